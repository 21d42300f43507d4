//! On-disk datasets: one clean image set plus one degraded copy per
//! degradation, sharing a single annotation file per split.
//!
//! ```text
//! manifest.json
//! annotations/{train,test}.jsonl
//! images/{set}/{split}/{image_id:06}.ppm
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use octnet_detect::jsonl::{self, BoxRecord, Header};
use octnet_detect::RotatedBox;
use octnet_tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DegradeError, Result};
use crate::image::{read_pnm, write_pnm};
use crate::noise::DegradationSpec;
use crate::scene::{synth_scene, SceneSpec};

pub const CLEAN: &str = "clean";
pub const SPLITS: [&str; 2] = ["train", "test"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradedSet {
    pub name: String,
    pub degradation: DegradationSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub scene: SceneSpec,
    pub train: usize,
    pub test: usize,
    pub degraded: Vec<DegradedSet>,
}

impl DatasetSpec {
    /// Degraded sets for named presets, all drawing noise from `seed`.
    pub fn with_presets(scene: SceneSpec, train: usize, test: usize, presets: &[&str], seed: u64) -> Result<Self> {
        let degraded = presets
            .iter()
            .map(|&p| Ok(DegradedSet { name: p.to_string(), degradation: DegradationSpec::preset(p, seed)? }))
            .collect::<Result<_>>()?;
        Ok(Self { scene, train, test, degraded })
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.train + self.test == 0 {
            return Err(DegradeError::Spec("dataset has no images".into()));
        }
        let mut names: Vec<&str> = vec![CLEAN];
        for d in &self.degraded {
            d.degradation.validate()?;
            let ok = !d.name.is_empty() && d.name.chars().all(|c| c.is_ascii_alphanumeric() || "._-".contains(c));
            if !ok || names.contains(&d.name.as_str()) {
                return Err(DegradeError::Spec(format!("bad or duplicate set name {:?}", d.name)));
            }
            names.push(&d.name);
        }
        Ok(())
    }

    /// Image ids of a split: train first, then test.
    pub fn ids(&self, split: &str) -> Result<std::ops::Range<u64>> {
        let (t, v) = (self.train as u64, self.test as u64);
        match split {
            "train" => Ok(0..t),
            "test" => Ok(t..t + v),
            other => Err(DegradeError::Dataset(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub image_id: u64,
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetEntry {
    pub name: String,
    pub degradation: Option<DegradationSpec>,
    pub files: BTreeMap<String, Vec<FileEntry>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub spec: DatasetSpec,
    /// Order degradations are applied in.
    pub degradation_order: Vec<String>,
    /// The std unit is a convention, recorded here since it changes results a lot.
    pub noise_unit_note: String,
    pub annotations: BTreeMap<String, FileEntry>,
    pub skipped_objects: usize,
    pub sets: Vec<SetEntry>,
}

pub const MANIFEST: &str = "manifest.json";

fn sha(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn image_rel(set: &str, split: &str, id: u64) -> String {
    format!("images/{set}/{split}/{id:06}.ppm")
}

fn prepare_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty && !overwrite {
            return Err(DegradeError::Dataset(format!("{} is not empty; pass overwrite to replace it", dir.display())));
        }
        if non_empty {
            if !dir.join(MANIFEST).exists() {
                return Err(DegradeError::Dataset(format!(
                    "refusing to clear {}: it does not hold a dataset",
                    dir.display()
                )));
            }
            fs::remove_dir_all(dir)?;
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Maps `f` over ids, on the rayon pool when more than one thread is allowed.
/// Output order never depends on scheduling.
fn map_ids<R: Send>(ids: Vec<u64>, f: impl Fn(u64) -> Result<R> + Sync + Send) -> Result<Vec<R>> {
    if octnet_tensor::threads() > 1 {
        ids.into_par_iter().map(f).collect()
    } else {
        ids.into_iter().map(f).collect()
    }
}

/// Writes a dataset. The manifest records a digest of every file, so two builds
/// with the same spec produce byte-identical manifests.
pub fn build(dir: &Path, spec: &DatasetSpec, config_hash: &str, overwrite: bool) -> Result<Manifest> {
    spec.validate()?;
    prepare_dir(dir, overwrite)?;
    fs::create_dir_all(dir.join("annotations"))?;
    let mut sets: Vec<SetEntry> = std::iter::once(SetEntry { name: CLEAN.into(), degradation: None, files: BTreeMap::new() })
        .chain(spec.degraded.iter().map(|d| SetEntry {
            name: d.name.clone(),
            degradation: Some(d.degradation.clone()),
            files: BTreeMap::new(),
        }))
        .collect();
    for set in &sets {
        for split in SPLITS {
            fs::create_dir_all(dir.join(format!("images/{}/{split}", set.name)))?;
        }
    }
    let mut annotations = BTreeMap::new();
    let mut skipped_objects = 0;
    for split in SPLITS {
        let ids: Vec<u64> = spec.ids(split)?.collect();
        let per_image = map_ids(ids, |id| {
            let scene = synth_scene(&spec.scene, id)?;
            let mut files = Vec::with_capacity(sets.len());
            for set in &sets {
                let img = match &set.degradation {
                    None => scene.image.clone(),
                    Some(d) => d.apply(&scene.image, id)?,
                };
                let mut bytes = Vec::new();
                write_pnm(&mut bytes, &img)?;
                let rel = image_rel(&set.name, split, id);
                fs::write(dir.join(&rel), &bytes)?;
                files.push(FileEntry { image_id: id, path: rel, sha256: sha(&bytes) });
            }
            Ok((id, scene.boxes, scene.skipped, files))
        })?;
        let mut records = Vec::new();
        for (id, boxes, skipped, files) in per_image {
            skipped_objects += skipped;
            records.extend(boxes.iter().map(|b| BoxRecord::new(id, b)));
            for (set, file) in sets.iter_mut().zip(files) {
                set.files.entry(split.to_string()).or_default().push(file);
            }
        }
        let mut bytes = Vec::new();
        jsonl::write(&mut bytes, &Header::new(Some(config_hash.to_string())), &records)?;
        let rel = format!("annotations/{split}.jsonl");
        fs::write(dir.join(&rel), &bytes)?;
        annotations.insert(split.to_string(), FileEntry { image_id: 0, path: rel, sha256: sha(&bytes) });
    }
    let manifest = Manifest {
        config_hash: config_hash.to_string(),
        spec: spec.clone(),
        degradation_order: vec!["blur".into(), "speckle".into(), "gaussian_noise".into(), "clamp".into()],
        noise_unit_note: "noise std n is read in the unit given by each degradation's `unit` field \
                          (unit = [0,1] intensities, byte = [0,255]); the source convention is ambiguous"
            .into(),
        annotations,
        skipped_objects,
        sets,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image_id: u64,
    pub image: Tensor<f64>,
    pub boxes: Vec<RotatedBox>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let text = fs::read_to_string(root.join(MANIFEST))
            .map_err(|e| DegradeError::Dataset(format!("cannot read {}: {e}", root.join(MANIFEST).display())))?;
        Ok(Self { root: root.to_path_buf(), manifest: serde_json::from_str(&text)? })
    }

    pub fn set_names(&self) -> Vec<&str> {
        self.manifest.sets.iter().map(|s| s.name.as_str()).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.spec.scene.num_classes
    }

    pub fn annotations(&self, split: &str) -> Result<BTreeMap<u64, Vec<RotatedBox>>> {
        let entry = self
            .manifest
            .annotations
            .get(split)
            .ok_or_else(|| DegradeError::Dataset(format!("no annotations for split {split:?}")))?;
        let (_, records) = jsonl::read(BufReader::new(fs::File::open(self.root.join(&entry.path))?))?;
        let mut out: BTreeMap<u64, Vec<RotatedBox>> = BTreeMap::new();
        for id in self.manifest.spec.ids(split)? {
            out.insert(id, Vec::new());
        }
        for r in records {
            out.entry(r.image_id).or_default().push(r.to_box()?);
        }
        Ok(out)
    }

    /// Every image of `set`/`split` with its boxes, in id order.
    pub fn load(&self, set: &str, split: &str) -> Result<Vec<Sample>> {
        let entry = self
            .manifest
            .sets
            .iter()
            .find(|s| s.name == set)
            .ok_or_else(|| DegradeError::Dataset(format!("unknown image set {set:?}; have {:?}", self.set_names())))?;
        let mut boxes = self.annotations(split)?;
        let files = entry.files.get(split).map(Vec::as_slice).unwrap_or(&[]);
        files
            .iter()
            .map(|f| {
                let image = read_pnm(BufReader::new(fs::File::open(self.root.join(&f.path))?))?;
                Ok(Sample { image_id: f.image_id, image, boxes: boxes.remove(&f.image_id).unwrap_or_default() })
            })
            .collect()
    }
}
