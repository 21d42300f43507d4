//! Dataset builds for an experiment and batch assembly for training.

use octnet_degrade::dataset::{self, Manifest, Sample, MANIFEST};
use octnet_degrade::Dataset;
use octnet_detect::RotatedBox;
use octnet_tensor::{Scalar, Shape, Tensor};

use crate::config::ExperimentConfig;
use crate::error::{invalid, Result};

/// Writes the clean set and every configured preset under the data directory.
pub fn cmd_build_data(cfg: &ExperimentConfig, overwrite: bool) -> Result<Manifest> {
    let spec = cfg.dataset_spec()?;
    Ok(dataset::build(&cfg.data_dir(), &spec, &cfg.data_hash(), overwrite)?)
}

/// Opens the dataset and checks it was built from this config's data section.
pub fn open_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let dir = cfg.data_dir();
    if !dir.join(MANIFEST).exists() {
        return Err(invalid(format!("no dataset at {}; run build-data first", dir.display())));
    }
    let ds = Dataset::open(&dir)?;
    if ds.manifest.config_hash != cfg.data_hash() {
        return Err(invalid(format!(
            "dataset at {} has hash {}, config expects {}",
            dir.display(),
            ds.manifest.config_hash,
            cfg.data_hash()
        )));
    }
    Ok(ds)
}

/// Opens the dataset, building it first when the directory holds none.
pub fn ensure_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let dir = cfg.data_dir();
    if !dir.join(MANIFEST).exists() {
        cmd_build_data(cfg, false)?;
    }
    open_dataset(cfg)
}

/// Mirrors a box about the vertical line through `width / 2`.
pub fn flip_box(b: &RotatedBox, width: f64) -> Result<RotatedBox> {
    let mut f = RotatedBox::new(width - b.cx, b.cy, b.w, b.h, -b.theta, b.class_id)?;
    f.score = b.score;
    Ok(f)
}

/// Stacks samples into one `(B, C, H, W)` tensor, mirroring those flagged in `flips`.
pub fn batch<T: Scalar>(samples: &[&Sample], flips: &[bool]) -> Result<(Tensor<T>, Vec<Vec<RotatedBox>>)> {
    let first = samples.first().ok_or_else(|| invalid("empty batch"))?;
    let s = first.image.shape();
    if samples.iter().any(|x| x.image.shape() != s) {
        return Err(invalid("batch images differ in shape"));
    }
    let images = Tensor::from_fn(Shape::new(samples.len(), s.c, s.h, s.w), |b, c, y, x| {
        let sx = if flips[b] { s.w - 1 - x } else { x };
        T::lit(samples[b].image.at(0, c, y, sx))
    });
    let boxes = samples
        .iter()
        .zip(flips)
        .map(|(smp, &f)| {
            if f {
                smp.boxes.iter().map(|b| flip_box(b, s.w as f64)).collect()
            } else {
                Ok(smp.boxes.clone())
            }
        })
        .collect::<Result<_>>()?;
    Ok((images, boxes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_mirrors_center_and_angle() {
        let b = RotatedBox::new(10.0, 20.0, 8.0, 4.0, 0.3, 2).unwrap();
        let f = flip_box(&b, 64.0).unwrap();
        assert_eq!((f.cx, f.cy, f.w, f.h, f.class_id), (54.0, 20.0, 8.0, 4.0, 2));
        assert!((f.theta + 0.3).abs() < 1e-15);
        let back = flip_box(&f, 64.0).unwrap();
        assert!((back.theta - b.theta).abs() < 1e-15 && back.cx == b.cx);
    }

    #[test]
    fn flipped_pixels_follow_the_box() {
        // A bright column at x = 2 of a width-8 image lands at x = 5.
        let image = Tensor::from_fn(Shape::new(1, 1, 2, 8), |_, _, _, x| if x == 2 { 1.0 } else { 0.0 });
        let smp = Sample { image_id: 0, image, boxes: vec![RotatedBox::new(2.5, 1.0, 1.0, 2.0, 0.0, 0).unwrap()] };
        let (t, boxes) = batch::<f64>(&[&smp], &[true]).unwrap();
        assert_eq!(t.at(0, 0, 1, 5), 1.0);
        assert_eq!(boxes[0][0].cx, 5.5);
    }
}
