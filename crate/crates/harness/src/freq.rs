//! Spectrum panels and band energies of a clean scene and its degraded copies.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use octnet_degrade::{band_report, dft_magnitude, frequency_split, synth_scene, to_gray, write_pnm, BandReport};
use octnet_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::Result;

pub const FREQ_DIR: &str = "freq_diag";
/// Blur width separating the low and high bands.
pub const SPLIT_SIGMA: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetBands {
    pub set: String,
    pub bands: BandReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreqReport {
    pub config_hash: String,
    pub image_id: u64,
    pub sigma: f64,
    pub sets: Vec<SetBands>,
    pub panels: Vec<PathBuf>,
}

fn save(dir: &Path, name: &str, img: &Tensor<f64>, panels: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(format!("{name}.pgm"));
    write_pnm(BufWriter::new(fs::File::create(&path)?), img)?;
    panels.push(path);
    Ok(())
}

/// For scene `image_id`, writes the gray image, its centered log spectrum and its
/// high band (offset to mid-gray) for the clean set and every degraded set, plus
/// `bands.json` with band energies.
pub fn cmd_freq_diag(cfg: &ExperimentConfig, image_id: u64) -> Result<FreqReport> {
    let spec = cfg.dataset_spec()?;
    spec.validate()?;
    let clean = synth_scene(&spec.scene, image_id)?.image;
    let dir = cfg.out.join(FREQ_DIR);
    fs::create_dir_all(&dir)?;
    let mut panels = Vec::new();
    let mut images = vec![(octnet_degrade::dataset::CLEAN.to_string(), clean.clone())];
    for d in &spec.degraded {
        images.push((d.name.clone(), d.degradation.apply(&clean, image_id)?));
    }
    let mut sets = Vec::new();
    for (name, img) in &images {
        let gray = to_gray(img)?;
        save(&dir, name, &gray, &mut panels)?;
        save(&dir, &format!("{name}_spectrum"), &dft_magnitude(&gray)?, &mut panels)?;
        let (_, high) = frequency_split(&gray, SPLIT_SIGMA)?;
        save(&dir, &format!("{name}_high"), &high.map(|v| v + 0.5), &mut panels)?;
        sets.push(SetBands { set: name.clone(), bands: band_report(&clean, img, SPLIT_SIGMA)? });
    }
    let report = FreqReport { config_hash: cfg.hash(), image_id, sigma: SPLIT_SIGMA, sets, panels };
    fs::write(dir.join("bands.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}
