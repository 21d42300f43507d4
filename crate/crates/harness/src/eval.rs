//! Inference, scoring and the per-class report tables.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use octnet_core::checkpoint;
use octnet_degrade::dataset::Sample;
use octnet_degrade::Dataset;
use octnet_detect::jsonl::{self, BoxRecord};
use octnet_detect::{decode_detections, evaluate, Evaluation, ImageResult, RotatedBox};
use octnet_tensor::{threads, Graph, Module};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{batch, open_dataset};
use crate::error::{invalid, Result};
use crate::model::Detector;
use crate::train::CHECKPOINT;

pub const EVAL_DIR: &str = "eval";
const INFER_BATCH: usize = 8;
/// Slack when comparing a re-parsed mAP with the mean of its cells.
const MAP_SLACK: f64 = 1e-12;

/// One model on one image set. AP cells are `None` for classes without ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub config_hash: String,
    pub label: String,
    pub set: String,
    pub split: String,
    pub seed: u64,
    pub params: usize,
    pub wall_time_s: f64,
    pub ap: Vec<Option<f64>>,
    pub map: f64,
}

impl ReportRow {
    pub fn from_evaluation(e: &Evaluation) -> (Vec<Option<f64>>, f64) {
        let ap = e.per_class.iter().map(|c| (c.num_gt > 0).then_some(c.ap)).collect();
        (ap, e.map)
    }

    /// Mean of the listed AP cells.
    pub fn mean_of_cells(&self) -> f64 {
        let present: Vec<f64> = self.ap.iter().flatten().copied().collect();
        present.iter().sum::<f64>() / present.len() as f64
    }

    pub fn check(&self) -> Result<()> {
        let mean = self.mean_of_cells();
        if !((self.map - mean).abs() <= MAP_SLACK) {
            return Err(invalid(format!("row {}/{}: mAP {} but cells average {mean}", self.label, self.set, self.map)));
        }
        Ok(())
    }
}

const FIXED_COLUMNS: [&str; 7] = ["config_hash", "label", "set", "split", "seed", "params", "wall_time_s"];

/// Writes rows sharing one class count as CSV: identity columns, one AP column per
/// class, then mAP.
pub fn write_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let k = rows.first().map_or(0, |r| r.ap.len());
    if rows.iter().any(|r| r.ap.len() != k) {
        return Err(invalid("report rows disagree on the class count"));
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((0..k).map(|c| format!("ap_class{c}")));
    header.push("map".into());
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.config_hash.clone(),
            r.label.clone(),
            r.set.clone(),
            r.split.clone(),
            r.seed.to_string(),
            r.params.to_string(),
            r.wall_time_s.to_string(),
        ];
        rec.extend(r.ap.iter().map(|a| a.map_or(String::new(), |v| v.to_string())));
        rec.push(r.map.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let k = header
        .len()
        .checked_sub(FIXED_COLUMNS.len() + 1)
        .ok_or_else(|| invalid(format!("{} has too few columns", path.display())))?;
    let num = |s: &str, what: &str| -> Result<f64> { s.parse().map_err(|_| invalid(format!("bad {what} cell {s:?}"))) };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let ap = (0..k)
            .map(|c| {
                let cell = &rec[FIXED_COLUMNS.len() + c];
                if cell.is_empty() {
                    Ok(None)
                } else {
                    num(cell, "ap").map(Some)
                }
            })
            .collect::<Result<_>>()?;
        rows.push(ReportRow {
            config_hash: rec[0].to_string(),
            label: rec[1].to_string(),
            set: rec[2].to_string(),
            split: rec[3].to_string(),
            seed: num(&rec[4], "seed")? as u64,
            params: num(&rec[5], "params")? as usize,
            wall_time_s: num(&rec[6], "wall time")?,
            ap,
            map: num(&rec[header.len() - 1], "map")?,
        });
    }
    Ok(rows)
}

/// Writes `{stem}.csv` and `{stem}.json`, then re-parses the CSV and checks every
/// row's mAP against its cells.
pub fn write_reports(dir: &Path, stem: &str, rows: &[ReportRow]) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let json_path = dir.join(format!("{stem}.json"));
    write_csv(&csv_path, rows)?;
    fs::write(&json_path, serde_json::to_string_pretty(rows)?)?;
    for r in read_csv(&csv_path)? {
        r.check()?;
    }
    Ok((csv_path, json_path))
}

/// Runs the detector over `samples` in inference mode, image-parallel when more than
/// one thread is configured.
pub fn detect(model: &Detector<f32>, samples: &[Sample]) -> Result<Vec<Vec<RotatedBox>>> {
    let run = |chunk: &[Sample]| -> Result<Vec<Vec<RotatedBox>>> {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (images, _) = batch::<f32>(&refs, &vec![false; refs.len()])?;
        let g = Graph::inference();
        let x = g.constant(images);
        let outputs = model.forward(&g, &x)?;
        Ok(decode_detections(&model.head.config, &outputs)?)
    };
    let parts: Vec<Vec<Vec<RotatedBox>>> = if threads() > 1 {
        samples.par_chunks(INFER_BATCH).map(run).collect::<Result<_>>()?
    } else {
        samples.chunks(INFER_BATCH).map(run).collect::<Result<_>>()?
    };
    Ok(parts.into_iter().flatten().collect())
}

pub fn score(cfg: &ExperimentConfig, samples: &[Sample], dets: Vec<Vec<RotatedBox>>, num_classes: usize) -> Result<Evaluation> {
    if dets.len() != samples.len() {
        return Err(invalid(format!("{} detection lists for {} images", dets.len(), samples.len())));
    }
    let images: Vec<ImageResult> = samples
        .iter()
        .zip(dets)
        .map(|(s, d)| ImageResult { dets: d, gts: s.boxes.clone() })
        .collect();
    Ok(evaluate(&images, num_classes, cfg.eval.iou_thresh, cfg.eval.ap_method)?)
}

fn write_detections(path: &Path, hash: &str, samples: &[Sample], dets: &[Vec<RotatedBox>]) -> Result<()> {
    let records: Vec<BoxRecord> = samples
        .iter()
        .zip(dets)
        .flat_map(|(s, d)| d.iter().map(move |b| BoxRecord::new(s.image_id, b)))
        .collect();
    let f = fs::File::create(path)?;
    jsonl::write(std::io::BufWriter::new(f), &jsonl::Header::new(Some(hash.to_string())), &records)?;
    Ok(())
}

fn eval_sets<'a>(cfg: &'a ExperimentConfig, ds: &'a Dataset) -> Vec<&'a str> {
    if cfg.eval.sets.is_empty() {
        ds.set_names()
    } else {
        cfg.eval.sets.iter().map(String::as_str).collect()
    }
}

/// Loads a trained checkpoint and scores it on every configured set of the eval
/// split. Writes `eval/report.{csv,json}` and one detections file per set.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint_dir: Option<&Path>) -> Result<Vec<ReportRow>> {
    cfg.validate()?;
    let ds = open_dataset(cfg)?;
    let dir = checkpoint_dir.map_or_else(|| cfg.out.join(CHECKPOINT), Path::to_path_buf);
    let manifest = checkpoint::read_manifest(&dir)?;
    let k = ds.num_classes();
    if let Some(ck) = manifest.meta.get("num_classes").and_then(|v| v.as_u64()) {
        if ck as usize != k {
            return Err(invalid(format!("checkpoint has {ck} classes, dataset has {k}")));
        }
    }
    let mut model = Detector::<f32>::new(cfg, k)?;
    checkpoint::load(&dir, &mut model, Some(&cfg.hash()))?;
    let out = cfg.out.join(EVAL_DIR);
    fs::create_dir_all(&out)?;
    let mut rows = Vec::new();
    for set in eval_sets(cfg, &ds) {
        let samples = ds.load(set, &cfg.eval.split)?;
        let start = Instant::now();
        let dets = detect(&model, &samples)?;
        write_detections(&out.join(format!("{set}_detections.jsonl")), &cfg.hash(), &samples, &dets)?;
        let e = score(cfg, &samples, dets, k)?;
        let (ap, map) = ReportRow::from_evaluation(&e);
        rows.push(ReportRow {
            config_hash: cfg.hash(),
            label: cfg.name.clone(),
            set: set.to_string(),
            split: cfg.eval.split.clone(),
            seed: cfg.seeds.model,
            params: model.num_params(),
            wall_time_s: start.elapsed().as_secs_f64(),
            ap,
            map,
        });
    }
    write_reports(&out, "report", &rows)?;
    Ok(rows)
}

/// Scores a detections file against the ground truth of `split`. Detection class
/// ids must fall within the dataset's classes.
pub fn eval_detection_file(cfg: &ExperimentConfig, ds: &Dataset, split: &str, path: &Path) -> Result<ReportRow> {
    let start = Instant::now();
    let (header, records) = jsonl::read(BufReader::new(fs::File::open(path)?))?;
    let k = ds.num_classes();
    let gts = ds.annotations(split)?;
    let samples: Vec<Sample> = gts
        .into_iter()
        .map(|(image_id, boxes)| Sample { image_id, image: octnet_tensor::Tensor::zeros(octnet_tensor::Shape::new(1, 1, 1, 1)), boxes })
        .collect();
    let mut dets = vec![Vec::new(); samples.len()];
    for r in records {
        let b = r.to_box()?;
        if b.class_id >= k {
            return Err(invalid(format!("detection of class {} but the dataset has {k} classes", b.class_id)));
        }
        let i = samples
            .binary_search_by_key(&r.image_id, |s| s.image_id)
            .map_err(|_| invalid(format!("detection for image {} outside split {split}", r.image_id)))?;
        dets[i].push(b);
    }
    let e = score(cfg, &samples, dets, k)?;
    let (ap, map) = ReportRow::from_evaluation(&e);
    Ok(ReportRow {
        config_hash: header.config_hash.unwrap_or_default(),
        label: path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned()),
        set: String::new(),
        split: split.to_string(),
        seed: cfg.seeds.model,
        params: 0,
        wall_time_s: start.elapsed().as_secs_f64(),
        ap,
        map,
    })
}
