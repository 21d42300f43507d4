//! Band splitting and the 2-D Fourier magnitude diagnostic.

use octnet_tensor::Tensor;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{DegradeError, Result};
use crate::image::{check_image, snap_image, to_gray};
use crate::noise::gaussian_blur;

/// `low = blur(img, sigma)`, `high = img - low`. For on-grid images
/// `low + high == img` exactly.
pub fn frequency_split(img: &Tensor<f64>, sigma: f64) -> Result<(Tensor<f64>, Tensor<f64>)> {
    if !(sigma > 0.0) {
        return Err(DegradeError::Spec(format!("split sigma must be positive, got {sigma}")));
    }
    let low = snap_image(&gaussian_blur(img, sigma)?);
    let high = img.zip_map(&low, "frequency_split", |a, b| a - b)?;
    Ok((low, high))
}

/// Unnormalized forward 2-D DFT of a single-channel square image with a
/// power-of-two side, row-major.
pub fn dft2(img: &Tensor<f64>) -> Result<Vec<Complex64>> {
    let s = check_image(img)?;
    if s.c != 1 {
        return Err(DegradeError::Image(format!("DFT takes one channel, got {}", s.c)));
    }
    if s.h != s.w || !s.w.is_power_of_two() {
        return Err(DegradeError::Image(format!("DFT needs a square power-of-two image, got {}x{}", s.h, s.w)));
    }
    let n = s.w;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut buf: Vec<Complex64> = img.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    for row in buf.chunks_mut(n) {
        fft.process(row);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); n];
    for x in 0..n {
        for y in 0..n {
            col[y] = buf[y * n + x];
        }
        fft.process(&mut col);
        for y in 0..n {
            buf[y * n + x] = col[y];
        }
    }
    Ok(buf)
}

/// Magnitudes below this fraction of the peak are treated as rounding noise.
pub const MAGNITUDE_FLOOR: f64 = 1e-12;

/// Centered `log(1 + |F|)` scaled to `[0, 1]`. Color images are averaged to gray.
pub fn dft_magnitude(img: &Tensor<f64>) -> Result<Tensor<f64>> {
    let gray = to_gray(img)?;
    let n = gray.shape().w;
    let spec = dft2(&gray)?;
    let peak = spec.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let mut out = Tensor::zeros(gray.shape());
    let mut top: f64 = 0.0;
    for y in 0..n {
        for x in 0..n {
            let m = spec[y * n + x].norm();
            let m = if m <= MAGNITUDE_FLOOR * peak { 0.0 } else { m.ln_1p() };
            top = top.max(m);
            // Shift the zero frequency to the center.
            out.set(0, 0, (y + n / 2) % n, (x + n / 2) % n, m);
        }
    }
    if top > 0.0 {
        out = out.scale(1.0 / top);
    }
    Ok(out)
}

fn mean_square(t: &Tensor<f64>) -> f64 {
    t.data().iter().map(|v| v * v).sum::<f64>() / t.numel() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandReport {
    pub sigma: f64,
    pub clean_low: f64,
    pub clean_high: f64,
    pub noisy_low: f64,
    pub noisy_high: f64,
    /// Mean-square of the low band of `noisy - clean`.
    pub residual_low: f64,
    pub residual_high: f64,
}

/// Mean-square band energies of a clean image and a degraded copy.
pub fn band_report(clean: &Tensor<f64>, noisy: &Tensor<f64>, sigma: f64) -> Result<BandReport> {
    let (cl, ch) = frequency_split(&to_gray(clean)?, sigma)?;
    let (nl, nh) = frequency_split(&to_gray(noisy)?, sigma)?;
    let rl = nl.zip_map(&cl, "band_report", |a, b| a - b)?;
    let rh = nh.zip_map(&ch, "band_report", |a, b| a - b)?;
    Ok(BandReport {
        sigma,
        clean_low: mean_square(&cl),
        clean_high: mean_square(&ch),
        noisy_low: mean_square(&nl),
        noisy_high: mean_square(&nh),
        residual_low: mean_square(&rl),
        residual_high: mean_square(&rh),
    })
}
