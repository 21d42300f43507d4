//! Acceptance suite. Runs every headline criterion at its stated tolerance and
//! prints one line per criterion. Pass substrings as arguments to run a subset,
//! e.g. `cargo test -p octnet-harness --test acceptance -- geometry scoring`.

use std::f64::consts::{FRAC_PI_4, PI};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context, Result};
use octnet_core::neck::LEVELS;
use octnet_core::{plan_connections, NeckConfig, OctVar, OctaveConv, OctaveFeature, Split};
use octnet_degrade::{gaussian_kernel, gaussian_noise, frequency_split, speckle_field, stage_rng, synth_scene, SceneSpec, Stage};
use octnet_detect::{average_precision, evaluate, rotated_iou, ApMethod, ImageResult, MatchResult, RotatedBox};
use octnet_harness::ab::{cmd_ab, DEFAULT_SEEDS, DEFAULT_SETS};
use octnet_harness::ablate::{param_counts, Row};
use octnet_harness::eval::{read_csv, write_reports};
use octnet_harness::gradcheck::{cmd_gradcheck, TOLERANCE};
use octnet_harness::{cmd_build_data, cmd_train, Detector, ExperimentConfig, ReportRow};
use octnet_tensor::kernels::{self, PoolMode, UpsampleMode};
use octnet_tensor::{Graph, Scalar, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Criterion {
    name: &'static str,
    budget: Duration,
    run: fn() -> Result<String>,
}

const fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

const CRITERIA: &[Criterion] = &[
    Criterion { name: "octave-degeneration", budget: secs(1), run: octave_degeneration },
    Criterion { name: "gradient-suite", budget: secs(300), run: gradient_suite },
    Criterion { name: "octave-oracle", budget: secs(30), run: octave_oracle },
    Criterion { name: "geometry", budget: secs(120), run: geometry },
    Criterion { name: "scoring", budget: secs(30), run: scoring },
    Criterion { name: "shape-contract", budget: secs(60), run: shape_contract },
    Criterion { name: "ablation-audit", budget: secs(60), run: ablation_audit },
    Criterion { name: "noise-statistics", budget: secs(60), run: noise_statistics },
    Criterion { name: "determinism", budget: secs(300), run: determinism },
    Criterion { name: "ab-desk-scale", budget: secs(1800), run: ab_desk_scale },
];

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn scratch(name: &str) -> Result<PathBuf> {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn run_octave<T: Scalar>(conv: &OctaveConv<T>, x: &OctaveFeature<T>) -> Result<OctaveFeature<T>> {
    let g = Graph::inference();
    let v = OctVar::constant(&g, x);
    Ok(conv.forward(&g, &v)?.to_feature())
}

fn degeneration_gap<T: Scalar>() -> Result<f64> {
    let mut worst = 0.0f64;
    for k in [1, 3] {
        for stride in [1, 2] {
            let conv = OctaveConv::<T>::with_stride("o", Split::plain(3), Split::plain(5), k, stride, k / 2, &mut rng(k as u64 * 7 + stride as u64));
            ensure!(conv.lh.is_none() && conv.ll.is_none() && conv.hl.is_none(), "alpha 0 built a low path");
            let x = Tensor::<T>::seeded_randn(Shape::new(2, 3, 9, 11), 3);
            let y = run_octave(&conv, &OctaveFeature::new(x.clone(), None)?)?;
            ensure!(y.low.is_none(), "alpha 0 produced a low map");
            let w = &conv.hh.as_ref().context("missing hh")?.weight.value;
            worst = worst.max(y.high.max_abs_diff(&kernels::conv2d(&x, w, None, stride, k / 2)?)?);
        }
    }
    Ok(worst)
}

fn octave_degeneration() -> Result<String> {
    let d64 = degeneration_gap::<f64>()?;
    let d32 = degeneration_gap::<f32>()?;
    ensure!(d64 == 0.0, "double max abs diff {d64:e}");
    ensure!(d32 <= 1e-6, "single max abs diff {d32:e}");
    Ok(format!("double diff {d64:e}, single diff {d32:.1e}"))
}

const REQUIRED_CHECKS: [&str; 17] = [
    "conv2d",
    "deconv2d",
    "pool2d",
    "upsample_nearest",
    "upsample_bilinear",
    "batchnorm2d",
    "octave_conv.hh",
    "octave_conv.hl",
    "octave_conv.lh",
    "octave_conv.ll",
    "cbr",
    "inception_block",
    "attention_block",
    "fuse_level",
    "build_pyramid",
    "detection_head",
    "octave_conv",
];

fn gradient_suite() -> Result<String> {
    let lines = cmd_gradcheck(None);
    for want in REQUIRED_CHECKS {
        ensure!(lines.iter().any(|l| l.name == want), "no check named {want}");
    }
    let failed: Vec<String> = lines.iter().filter(|l| !l.passed).map(|l| l.to_string()).collect();
    ensure!(failed.is_empty(), "{}", failed.join("; "));
    let worst = lines.iter().map(|l| l.max_rel_error).fold(0.0, f64::max);
    ensure!(worst <= TOLERANCE, "worst {worst:e}");
    Ok(format!("{} checks, worst relative error {worst:.2e}", lines.len()))
}

/// Each branch straight from the tensor kernels: convolve, pool or upsample, add.
fn composition_oracle(conv: &OctaveConv<f64>, x: &OctaveFeature<f64>, k: usize) -> Result<(Tensor<f64>, Option<Tensor<f64>>)> {
    let pad = k / 2;
    let mut high: Option<Tensor<f64>> = None;
    let mut low: Option<Tensor<f64>> = None;
    let add = |slot: &mut Option<Tensor<f64>>, t: Tensor<f64>| match slot {
        Some(a) => a.add_assign(&t),
        None => *slot = Some(t),
    };
    if let Some(c) = &conv.hh {
        add(&mut high, kernels::conv2d(&x.high, &c.weight.value, None, 1, pad)?);
    }
    if let (Some(c), Some(xl)) = (&conv.lh, &x.low) {
        let y = kernels::conv2d(xl, &c.weight.value, None, 1, pad)?;
        add(&mut high, kernels::upsample(&y, 2, UpsampleMode::Nearest)?);
    }
    if let (Some(c), Some(xl)) = (&conv.ll, &x.low) {
        add(&mut low, kernels::conv2d(xl, &c.weight.value, None, 1, pad)?);
    }
    if let Some(c) = &conv.hl {
        let pooled = kernels::pool2d(&x.high, 2, PoolMode::Average)?.out;
        add(&mut low, kernels::conv2d(&pooled, &c.weight.value, None, 1, pad)?);
    }
    Ok((high.context("no high output")?, low))
}

fn octave_oracle() -> Result<String> {
    let alphas = [0.0, 0.25, 0.5, 0.75];
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let s = seed as usize;
        let si = Split::new(4 + s % 3 * 4, alphas[s % 4])?;
        let so = Split::new(4 + s / 3 % 3 * 4, alphas[s / 4 % 4])?;
        let k = if seed % 2 == 0 { 3 } else { 1 };
        let conv = OctaveConv::<f64>::new("o", si, so, k, &mut rng(seed));
        let (h, w) = (8, 6 + 2 * (s % 3));
        let b = 1 + s % 2;
        let high = Tensor::seeded_randn(Shape::new(b, si.high, h, w), seed + 100);
        let low = (si.low > 0).then(|| Tensor::seeded_randn(Shape::new(b, si.low, h / 2, w / 2), seed + 200));
        let x = OctaveFeature::new(high, low)?;
        let y = run_octave(&conv, &x)?;
        let (wh, wl) = composition_oracle(&conv, &x, k)?;
        worst = worst.max(y.high.max_abs_diff(&wh)?);
        match (&y.low, &wl) {
            (Some(a), Some(b)) => worst = worst.max(a.max_abs_diff(b)?),
            (None, None) => {}
            _ => bail!("fixture {seed}: low map presence differs"),
        }
    }
    ensure!(worst <= 1e-12, "worst elementwise diff {worst:e}");
    Ok(format!("100 fixtures, worst elementwise diff {worst:.1e}"))
}

/// Area fraction of the smaller box inside the larger one, by stratified sampling.
fn monte_carlo_iou(a: &RotatedBox, b: &RotatedBox, side: usize, rng: &mut impl Rng) -> f64 {
    let (small, big) = if a.w * a.h <= b.w * b.h { (a, b) } else { (b, a) };
    let (s, c) = small.theta.sin_cos();
    let (bs, bc) = big.theta.sin_cos();
    let mut hits = 0usize;
    for i in 0..side {
        for j in 0..side {
            let u = ((i as f64 + rng.random::<f64>()) / side as f64 - 0.5) * small.w;
            let v = ((j as f64 + rng.random::<f64>()) / side as f64 - 0.5) * small.h;
            let (dx, dy) = (small.cx + u * c - v * s - big.cx, small.cy + u * s + v * c - big.cy);
            let (lu, lv) = (dx * bc + dy * bs, -dx * bs + dy * bc);
            if lu.abs() <= big.w / 2.0 && lv.abs() <= big.h / 2.0 {
                hits += 1;
            }
        }
    }
    let inter = hits as f64 / (side * side) as f64 * small.w * small.h;
    inter / (a.w * a.h + b.w * b.h - inter)
}

fn geometry() -> Result<String> {
    let sq = |cx: f64, theta: f64| RotatedBox::new(cx, 0.0, 2.0, 2.0, theta, 0);
    let a = sq(0.0, 0.0)?;
    let cases = [(sq(0.0, 0.0)?, 1.0), (sq(10.0, 0.0)?, 0.0), (sq(1.0, 0.0)?, 1.0 / 3.0), (sq(0.0, FRAC_PI_4)?, 1.0 / 2f64.sqrt())];
    for (b, want) in &cases {
        let got = rotated_iou(&a, b)?;
        ensure!((got - want).abs() <= 1e-9, "closed form: {got} against {want}");
    }
    let mut r = rng(2024);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let pick = |r: &mut ChaCha8Rng, spread: f64| {
            RotatedBox::new(
                r.random_range(-spread..=spread),
                r.random_range(-spread..=spread),
                r.random_range(1.0..10.0),
                r.random_range(1.0..10.0),
                r.random_range(-PI..PI),
                0,
            )
        };
        let a = pick(&mut r, 0.0)?;
        let b = pick(&mut r, 5.0)?;
        let mc = monte_carlo_iou(&a, &b, 1000, &mut r);
        worst = worst.max((mc - rotated_iou(&a, &b)?).abs());
    }
    ensure!(worst < 5e-3, "Monte Carlo deviation {worst:e}");
    Ok(format!("4 closed forms, 1000 pairs at 1e6 samples, worst deviation {worst:.1e}"))
}

/// 11-point interpolated AP over a ranked list of hit flags.
fn eleven_point(tp: &[bool], num_gt: usize) -> f64 {
    let mut hits = 0;
    let points: Vec<(f64, f64)> = tp
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            hits += t as usize;
            (hits as f64 / num_gt as f64, hits as f64 / (i + 1) as f64)
        })
        .collect();
    (0..=10)
        .map(|k| points.iter().filter(|(r, _)| *r >= k as f64 / 10.0).map(|p| p.1).fold(0.0, f64::max))
        .sum::<f64>()
        / 11.0
}

fn random_images(r: &mut ChaCha8Rng, classes: usize) -> Result<Vec<ImageResult>> {
    (0..5)
        .map(|_| {
            let mut gts = Vec::new();
            let mut dets = Vec::new();
            for _ in 0..r.random_range(1..5) {
                let g = RotatedBox::new(r.random_range(10.0..90.0), r.random_range(10.0..90.0), r.random_range(4.0..20.0), r.random_range(4.0..20.0), r.random_range(-1.5..1.5), r.random_range(0..classes))?;
                let d = RotatedBox::new(g.cx + r.random_range(-3.0..3.0), g.cy + r.random_range(-3.0..3.0), g.w, g.h, g.theta, g.class_id)?;
                dets.push(d.with_score(r.random_range(0.01..0.99)));
                gts.push(g);
            }
            for _ in 0..r.random_range(0..4) {
                let d = RotatedBox::new(r.random_range(0.0..100.0), r.random_range(0.0..100.0), 8.0, 6.0, 0.0, r.random_range(0..classes))?;
                dets.push(d.with_score(r.random_range(0.01..0.99)));
            }
            Ok(ImageResult { dets, gts })
        })
        .collect()
}

fn scoring() -> Result<String> {
    let tp = [true, false, true];
    let m = MatchResult { scores: vec![0.9, 0.8, 0.7], tp: tp.to_vec(), order: vec![0, 1, 2], gt_matched: vec![] };
    let ap = average_precision(&m, 2, ApMethod::ElevenPoint).ap;
    let oracle = eleven_point(&tp, 2);
    ensure!((oracle - 28.0 / 33.0).abs() < 1e-15, "oracle {oracle}");
    // Exact up to the rounding of an 11-term sum.
    ensure!((ap - 28.0 / 33.0).abs() <= 4.0 * f64::EPSILON, "AP {ap}, want 28/33");

    let mut r = rng(7);
    let k = 3;
    let mut rows = Vec::new();
    for t in 0..100 {
        let images = random_images(&mut r, k)?;
        let base = evaluate(&images, k, 0.5, ApMethod::ElevenPoint)?;
        let (p, a, b) = (r.random_range(0.2..5.0), r.random_range(0.1..3.0), r.random_range(-1.0..1.0));
        let moved: Vec<ImageResult> = images
            .iter()
            .map(|img| ImageResult {
                dets: img.dets.iter().map(|d| (*d).with_score(a * d.score.unwrap_or(0.0).powf(p) + b)).collect(),
                gts: img.gts.clone(),
            })
            .collect();
        let after = evaluate(&moved, k, 0.5, ApMethod::ElevenPoint)?;
        ensure!(base.map == after.map, "transform {t}: mAP {} became {}", base.map, after.map);
        let (ap, map) = ReportRow::from_evaluation(&base);
        rows.push(ReportRow {
            config_hash: format!("{t:016x}"),
            label: "fixture".into(),
            set: "clean".into(),
            split: "test".into(),
            seed: t,
            params: 0,
            wall_time_s: 0.0,
            ap,
            map,
        });
    }
    let dir = scratch("scoring")?;
    write_reports(&dir, "report", &rows)?;
    let back = read_csv(&dir.join("report.csv"))?;
    ensure!(back == rows, "CSV round trip changed rows");
    for row in &back {
        let present: Vec<f64> = row.ap.iter().flatten().copied().collect();
        let mean = present.iter().sum::<f64>() / present.len() as f64;
        ensure!((mean - row.map).abs() <= 1e-12, "row {}: mAP {} against cell mean {mean}", row.seed, row.map);
    }
    Ok("AP 28/33 exact, 100 monotone transforms invariant, 100 CSV rows self-consistent".into())
}

fn neck_cfg(near: bool, far: bool, attention: bool, fusion: bool) -> NeckConfig {
    NeckConfig { near_enabled: near, far_enabled: far, attention_enabled: attention, fusion_enabled: fusion, ..NeckConfig::default() }
}

/// Donor labels for a target, from the level-gap taxonomy alone.
fn expected_donors(target: usize, near: bool, far: bool) -> Vec<String> {
    let mut out = Vec::new();
    for j in LEVELS {
        let gap = j.abs_diff(target);
        if gap == 0 || (gap == 1 && near) || (gap >= 2 && far) {
            if j == 5 {
                out.push("O5".to_string());
            } else {
                out.push(format!("O{j}h"));
                out.push(format!("O{j}l"));
            }
        }
    }
    out
}

fn shape_contract() -> Result<String> {
    let mut runs = 0;
    for n in [128usize, 256] {
        let images = Tensor::<f32>::seeded_randn(Shape::new(1, 3, n, n), n as u64);
        for bits in 0..16u32 {
            let mut cfg = ExperimentConfig::default();
            cfg.neck_config = neck_cfg(bits & 1 != 0, bits & 2 != 0, bits & 4 != 0, bits & 8 != 0);
            let model = Detector::<f32>::new(&cfg, 5)?;
            let g = Graph::inference();
            let x = g.constant(images.clone());
            let p = model.pyramid(&g, &x)?;
            ensure!(p.levels.len() == 5, "{} pyramid levels", p.levels.len());
            for (t, v) in p.levels.iter().enumerate() {
                let s = v.shape();
                let e = n >> (t + 2);
                ensure!((s.c, s.h, s.w) == (64, e, e), "n {n}, toggles {bits:04b}: P{} is {s:?}", t + 2);
            }
            runs += 1;
        }
    }
    for (near, far) in [(true, true), (true, false), (false, true), (false, false)] {
        let plan = plan_connections(&LEVELS, &neck_cfg(near, far, true, true), 8);
        for i in LEVELS {
            let got = plan.donor_labels(i);
            let want = expected_donors(i, near, far);
            ensure!(got == want, "near {near} far {far}, target {i}: {got:?} against {want:?}");
        }
    }
    Ok(format!("{runs} pyramids at n 128 and 256, donor sets of 4 connection settings"))
}

fn ablation_audit() -> Result<String> {
    let base = ExperimentConfig::default();
    let counts = param_counts(&base)?;
    let get = |r: Row| counts.iter().find(|(x, _)| *x == r).map(|c| c.1).context("missing row");
    let (full, near, far) = (get(Row::Full)?, get(Row::NearOnly)?, get(Row::FarOnly)?);
    ensure!(full > near, "full {full} <= near-only {near}");
    ensure!(full > far, "full {full} <= far-only {far}");
    let images = Tensor::<f32>::seeded_randn(Shape::new(1, 3, 128, 128), 1);
    for row in [Row::AttentionOff, Row::FusionOff] {
        let mut cfg = base.clone();
        cfg.neck_config = row.neck_config(&base.neck_config);
        let model = Detector::<f32>::new(&cfg, 5)?;
        let g = Graph::inference();
        let x = g.constant(images.clone());
        let out = model.forward(&g, &x)?;
        ensure!(out.len() == 5 && out.iter().all(|o| o.cls.value().is_finite()), "{} forward output", row.label());
    }
    Ok(format!("params full {full}, near-only {near}, far-only {far}; attention-off and fusion-off run forward"))
}

fn mean_var(data: &[f64]) -> (f64, f64) {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    (mean, data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0))
}

fn noise_statistics() -> Result<String> {
    let flat = Tensor::full(Shape::new(1, 1, 1024, 1024), 0.5);
    let mut detail = Vec::new();
    for n in [0.01, 0.05] {
        let out = gaussian_noise(&flat, n, &mut stage_rng(1, 0, Stage::Noise))?;
        let std = mean_var(out.data()).1.sqrt();
        ensure!((std - n).abs() / n < 0.02, "noise {n}: std {std}");
        detail.push(format!("std {std:.4} for n {n}"));
    }
    for looks in [1u32, 4, 16] {
        let field = speckle_field(Shape::new(1, 1, 1000, 1000), looks, &mut stage_rng(5, looks as u64, Stage::Speckle))?;
        let (mean, var) = mean_var(field.data());
        let want = 1.0 / looks as f64;
        ensure!((mean - 1.0).abs() < 0.01, "looks {looks}: mean {mean}");
        ensure!((var - want).abs() / want < 0.05, "looks {looks}: variance {var}");
    }
    for v in [0.3, 0.5, 1.0, 2.5, 4.0] {
        let s: f64 = gaussian_kernel(v).iter().sum();
        ensure!((s - 1.0).abs() <= 1e-9, "kernel {v} sums to {s}");
    }
    for id in 0..4 {
        let img = synth_scene(&SceneSpec::default(), id)?.image;
        for sigma in [0.5, 2.0] {
            let (low, high) = frequency_split(&img, sigma)?;
            ensure!(low.zip_map(&high, "sum", |a, b| a + b)? == img, "split of scene {id} at sigma {sigma} is not exact");
        }
    }
    detail.push("speckle moments at looks 1/4/16, kernel sums, exact band splits".into());
    Ok(detail.join(", "))
}

fn determinism() -> Result<String> {
    octnet_tensor::set_threads(1);
    let root = scratch("determinism")?;
    let mut a = ExperimentConfig::default();
    a.out = root.join("a");
    a.train.steps = 100;
    let mut b = a.clone();
    b.out = root.join("b");
    cmd_build_data(&a, false)?;
    cmd_build_data(&b, false)?;
    let manifest = octnet_degrade::dataset::MANIFEST;
    let (ma, mb) = (fs::read(a.data_dir().join(manifest))?, fs::read(b.data_dir().join(manifest))?);
    ensure!(ma == mb, "dataset manifests differ");
    let (sa, sb) = (cmd_train(&a)?, cmd_train(&b)?);
    let (la, lb) = (fs::read(&sa.log)?, fs::read(&sb.log)?);
    ensure!(la == lb, "loss logs differ");
    Ok(format!("manifest {} bytes and 100-step log {} bytes identical", ma.len(), la.len()))
}

fn ab_desk_scale() -> Result<String> {
    octnet_tensor::set_threads(1);
    let mut cfg = ExperimentConfig::default();
    cfg.out = scratch("ab")?;
    let (_, s) = cmd_ab(&cfg, &DEFAULT_SEEDS, &DEFAULT_SETS)?;
    println!("    report in {}", cfg.out.join("ab").display());
    for set in &s.sets {
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
        println!(
            "    {:<8} baseline [{}] octave [{}] deltas [{}] mean {:+.4}, octave >= baseline on {}/{} seeds",
            set.set,
            fmt(&set.baseline_map),
            fmt(&set.octave_map),
            fmt(&set.deltas),
            set.mean_delta,
            set.octave_wins,
            s.seeds.len()
        );
    }
    let clean = s.sets.iter().find(|x| x.set == "clean").context("no clean set")?;
    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    ensure!(
        s.gate_passed,
        "clean mAP baseline {:.3}, octave {:.3} (gate {})",
        s.baseline_clean_mean,
        s.octave_clean_mean,
        s.clean_gate
    );
    Ok(format!(
        "clean mAP baseline {:.3} (min {:.3}), octave {:.3} (min {:.3}) over seeds {:?}",
        s.baseline_clean_mean,
        min(&clean.baseline_map),
        s.octave_clean_mean,
        min(&clean.octave_map),
        s.seeds
    ))
}

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for c in CRITERIA {
        if !filters.is_empty() && !filters.iter().any(|f| c.name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = (c.run)();
        let took = start.elapsed();
        let (ok, detail) = match outcome {
            Ok(d) if took <= c.budget => (true, d),
            Ok(d) => (false, format!("{d}; over the {:?} budget", c.budget)),
            Err(e) => (false, format!("{e:#}")),
        };
        failed += !ok as usize;
        println!("{} {:<20} {:>8.2}s  {detail}", if ok { "PASS" } else { "FAIL" }, c.name, took.as_secs_f64());
    }
    println!("acceptance: {}/{ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
