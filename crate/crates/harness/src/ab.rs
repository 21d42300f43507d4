//! Baseline pyramid on the plain backbone against the octave pyramid, over seeds.

use std::fs;

use octnet_core::BackboneConfig;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, NeckKind};
use crate::data::ensure_dataset;
use crate::error::{invalid, Result};
use crate::eval::{cmd_eval, write_reports, ReportRow};
use crate::train::cmd_train;

pub const AB_DIR: &str = "ab";
pub const DEFAULT_SEEDS: [u64; 3] = [0, 1, 2];
/// Image sets scored by default: clean and the strongest preset.
pub const DEFAULT_SETS: [&str; 2] = ["clean", "n0.2_v1"];
/// Both arms must clear this mean clean mAP.
pub const CLEAN_GATE: f64 = 0.5;

/// The plain-backbone, vanilla-pyramid counterpart of `cfg` with everything else
/// (data, head, schedule, seeds) shared.
pub fn baseline_twin(cfg: &ExperimentConfig) -> ExperimentConfig {
    ExperimentConfig {
        name: "baseline_fpn".into(),
        backbone: BackboneConfig { variant: octnet_core::Variant::Plain, ..cfg.backbone.clone() },
        neck: NeckKind::BaselineFpn,
        ..cfg.clone()
    }
}

/// Every run of the grid: for each seed, the baseline then the octave arm.
pub fn ab_configs(octave: &ExperimentConfig, seeds: &[u64], sets: &[&str]) -> Result<Vec<ExperimentConfig>> {
    let data_dir = std::path::absolute(octave.data_dir())?;
    let mut out = Vec::new();
    for &seed in seeds {
        for arm in [baseline_twin(octave), octave.clone()] {
            let mut c = arm;
            c.seeds.model = seed;
            c.out = octave.out.join(AB_DIR).join(format!("{}-seed{seed}", c.name));
            c.data.dir = data_dir.clone();
            c.eval.sets = sets.iter().map(|s| s.to_string()).collect();
            out.push(c);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetSummary {
    pub set: String,
    pub baseline_map: Vec<f64>,
    pub octave_map: Vec<f64>,
    /// Octave minus baseline, per seed.
    pub deltas: Vec<f64>,
    pub mean_delta: f64,
    pub octave_wins: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbSummary {
    pub seeds: Vec<u64>,
    pub baseline_hash: Vec<String>,
    pub octave_hash: Vec<String>,
    pub sets: Vec<SetSummary>,
    pub baseline_clean_mean: f64,
    pub octave_clean_mean: f64,
    pub clean_gate: f64,
    pub gate_passed: bool,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Builds per-set deltas from rows labelled `baseline_fpn` and the octave name.
pub fn summarize(rows: &[ReportRow], octave_name: &str, seeds: &[u64], sets: &[&str]) -> Result<AbSummary> {
    let find = |label: &str, set: &str, seed: u64| -> Result<&ReportRow> {
        rows.iter()
            .find(|r| r.label == label && r.set == set && r.seed == seed)
            .ok_or_else(|| invalid(format!("no row for {label} on {set} with seed {seed}")))
    };
    let mut out = Vec::new();
    for &set in sets {
        let b = seeds.iter().map(|&s| Ok(find("baseline_fpn", set, s)?.map)).collect::<Result<Vec<_>>>()?;
        let o = seeds.iter().map(|&s| Ok(find(octave_name, set, s)?.map)).collect::<Result<Vec<_>>>()?;
        let deltas: Vec<f64> = o.iter().zip(&b).map(|(o, b)| o - b).collect();
        out.push(SetSummary {
            set: set.to_string(),
            mean_delta: mean(&deltas),
            octave_wins: deltas.iter().filter(|&&d| d >= 0.0).count(),
            baseline_map: b,
            octave_map: o,
            deltas,
        });
    }
    let hashes = |label: &str| -> Result<Vec<String>> {
        seeds.iter().map(|&s| Ok(find(label, sets[0], s)?.config_hash.clone())).collect()
    };
    let clean = out.iter().find(|s| s.set == octnet_degrade::dataset::CLEAN);
    let (bc, oc) = clean.map_or((f64::NAN, f64::NAN), |c| (mean(&c.baseline_map), mean(&c.octave_map)));
    Ok(AbSummary {
        seeds: seeds.to_vec(),
        baseline_hash: hashes("baseline_fpn")?,
        octave_hash: hashes(octave_name)?,
        sets: out,
        baseline_clean_mean: bc,
        octave_clean_mean: oc,
        clean_gate: CLEAN_GATE,
        gate_passed: bc > CLEAN_GATE && oc > CLEAN_GATE,
    })
}

/// Trains and scores both arms for every seed, then writes `ab/report.{csv,json}`
/// and `ab/summary.json`.
pub fn cmd_ab(octave: &ExperimentConfig, seeds: &[u64], sets: &[&str]) -> Result<(Vec<ReportRow>, AbSummary)> {
    if octave.neck != NeckKind::Ocsafpn {
        return Err(invalid("the A/B comparison starts from an ocsafpn config"));
    }
    if seeds.is_empty() || sets.is_empty() {
        return Err(invalid("need at least one seed and one image set"));
    }
    octave.validate()?;
    ensure_dataset(octave)?;
    let mut rows = Vec::new();
    for cfg in ab_configs(octave, seeds, sets)? {
        cmd_train(&cfg)?;
        rows.extend(cmd_eval(&cfg, None)?);
    }
    let dir = octave.out.join(AB_DIR);
    write_reports(&dir, "report", &rows)?;
    let summary = summarize(&rows, &octave.name, seeds, sets)?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok((rows, summary))
}
