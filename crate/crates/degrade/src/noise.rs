//! Blur, additive Gaussian noise and multiplicative speckle.

use octnet_tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{spec, Result};
use crate::image::{check_image, snap, snap_image};
use crate::rng::{stage_rng, Stage};

/// Normalized taps of a Gaussian with std `v`, radius `ceil(3v)`.
pub fn gaussian_kernel(v: f64) -> Vec<f64> {
    if v == 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * v).ceil() as i64;
    let taps: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * v * v)).exp()).collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Mirror index without repeating the edge sample (`-1 -> 1`).
pub fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m < n as i64 { m } else { period - m }) as usize
}

/// Separable blur, horizontal pass then vertical, with reflected borders.
/// `v = 0` returns the input unchanged.
pub fn gaussian_blur(img: &Tensor<f64>, v: f64) -> Result<Tensor<f64>> {
    if !(v >= 0.0 && v.is_finite()) {
        return Err(spec(format!("blur std must be finite and non-negative, got {v}")));
    }
    let s = img.shape();
    if v == 0.0 {
        return Ok(img.clone());
    }
    let k = gaussian_kernel(v);
    let r = (k.len() / 2) as i64;
    let mut tmp = Tensor::zeros(s);
    for b in 0..s.b {
        for c in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    let acc: f64 = k
                        .iter()
                        .enumerate()
                        .map(|(t, w)| w * img.at(b, c, y, reflect(x as i64 + t as i64 - r, s.w)))
                        .sum();
                    tmp.set(b, c, y, x, acc);
                }
            }
        }
    }
    let mut out = Tensor::zeros(s);
    for b in 0..s.b {
        for c in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    let acc: f64 = k
                        .iter()
                        .enumerate()
                        .map(|(t, w)| w * tmp.at(b, c, reflect(y as i64 + t as i64 - r, s.h), x))
                        .sum();
                    out.set(b, c, y, x, snap(acc));
                }
            }
        }
    }
    Ok(out)
}

/// Adds i.i.d. `N(0, n^2)` to every pixel and clamps to `[0, 1]`.
pub fn gaussian_noise(img: &Tensor<f64>, n: f64, rng: &mut impl Rng) -> Result<Tensor<f64>> {
    if !(n >= 0.0 && n.is_finite()) {
        return Err(spec(format!("noise std must be finite and non-negative, got {n}")));
    }
    if n == 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(0.0, n).map_err(|e| spec(e.to_string()))?;
    Ok(img.zip_map(&Tensor::from_fn(img.shape(), |_, _, _, _| normal.sample(rng)), "noise", |p, e| {
        snap((p + e).clamp(0.0, 1.0))
    })?)
}

/// Unit-mean `Gamma(looks, 1/looks)` multipliers, one per pixel.
pub fn speckle_field(shape: octnet_tensor::Shape, looks: u32, rng: &mut impl Rng) -> Result<Tensor<f64>> {
    if looks == 0 {
        return Err(spec("speckle needs at least one look"));
    }
    let gamma = Gamma::new(looks as f64, 1.0 / looks as f64).map_err(|e| spec(e.to_string()))?;
    Ok(Tensor::from_fn(shape, |_, _, _, _| gamma.sample(rng)))
}

/// Multiplies by a speckle field and clamps to `[0, 1]`.
pub fn speckle(img: &Tensor<f64>, looks: u32, rng: &mut impl Rng) -> Result<Tensor<f64>> {
    let field = speckle_field(img.shape(), looks, rng)?;
    Ok(img.zip_map(&field, "speckle", |p, m| snap((p * m).clamp(0.0, 1.0)))?)
}

/// Unit the noise std is expressed in.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseUnit {
    /// Intensities scaled to `[0, 1]`.
    #[default]
    Unit,
    /// 8-bit intensities; divided by 255 before use.
    Byte,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationSpec {
    /// Gaussian noise std.
    pub n: f64,
    /// Gaussian blur std in pixels.
    pub v: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speckle_looks: Option<u32>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub unit: NoiseUnit,
}

/// The three named presets, `(n, v)`.
pub const PRESETS: [(&str, f64, f64); 3] = [("n0.01_v1", 0.01, 1.0), ("n0.2_v0.5", 0.2, 0.5), ("n0.2_v1", 0.2, 1.0)];

impl DegradationSpec {
    pub fn new(n: f64, v: f64, seed: u64) -> Self {
        Self {
            n,
            v,
            speckle_looks: None,
            seed,
            unit: NoiseUnit::Unit,
        }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        PRESETS
            .iter()
            .find(|(p, _, _)| *p == name)
            .map(|&(_, n, v)| Self::new(n, v, seed))
            .ok_or_else(|| spec(format!("unknown preset {name:?}; known: {:?}", PRESETS.map(|p| p.0))))
    }

    /// Preset name if `(n, v)` is one, in unit intensities, without speckle.
    pub fn preset_name(&self) -> Option<&'static str> {
        if self.speckle_looks.is_some() {
            return None;
        }
        let n = self.noise_std();
        PRESETS.iter().find(|(_, pn, pv)| *pn == n && *pv == self.v).map(|p| p.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.n >= 0.0 && self.n.is_finite() && self.v >= 0.0 && self.v.is_finite()) {
            return Err(spec(format!("n and v must be finite and non-negative, got n={} v={}", self.n, self.v)));
        }
        if self.speckle_looks == Some(0) {
            return Err(spec("speckle_looks must be at least 1"));
        }
        Ok(())
    }

    /// Noise std in unit intensities.
    pub fn noise_std(&self) -> f64 {
        match self.unit {
            NoiseUnit::Unit => self.n,
            NoiseUnit::Byte => self.n / 255.0,
        }
    }

    /// Blur, then speckle when configured, then additive noise. Optics act on
    /// the scene before the sensor adds its noise.
    pub fn apply(&self, img: &Tensor<f64>, image_id: u64) -> Result<Tensor<f64>> {
        self.validate()?;
        check_image(img)?;
        let mut out = gaussian_blur(img, self.v)?;
        if let Some(looks) = self.speckle_looks {
            out = speckle(&out, looks, &mut stage_rng(self.seed, image_id, Stage::Speckle))?;
        }
        out = gaussian_noise(&out, self.noise_std(), &mut stage_rng(self.seed, image_id, Stage::Noise))?;
        Ok(snap_image(&out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_mirrors_without_edge_repeat() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect(5, 1), 0);
    }

    #[test]
    fn kernel_radius_and_sum() {
        assert_eq!(gaussian_kernel(1.0).len(), 7);
        assert_eq!(gaussian_kernel(0.5).len(), 5);
        assert_eq!(gaussian_kernel(1.1).len(), 9);
        assert!((gaussian_kernel(2.3).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn presets_resolve() {
        assert_eq!(DegradationSpec::preset("n0.2_v0.5", 1).unwrap().v, 0.5);
        assert!(DegradationSpec::preset("n0.3_v1", 1).is_err());
        assert_eq!(DegradationSpec::new(0.2, 1.0, 0).preset_name(), Some("n0.2_v1"));
        let byte = DegradationSpec {
            n: 51.0,
            unit: NoiseUnit::Byte,
            ..DegradationSpec::new(0.0, 1.0, 0)
        };
        assert_eq!(byte.preset_name(), Some("n0.2_v1"));
    }
}
