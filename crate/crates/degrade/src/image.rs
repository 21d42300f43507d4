//! Pixel grid conventions and 8-bit netpbm I/O.
//!
//! Images are `(1, C, H, W)` tensors of `f64` in `[0, 1]`. Everything this crate
//! produces is snapped to multiples of [`PIXEL_QUANTUM`]: on that grid the
//! difference of two pixels is exact, which is what makes band splitting
//! reversible bit for bit.

use std::io::{BufRead, Write};

use octnet_tensor::{Shape, Tensor};

use crate::error::{DegradeError, Result};

pub const PIXEL_QUANTUM: f64 = 1.0 / 4_294_967_296.0;

pub fn snap(x: f64) -> f64 {
    (x / PIXEL_QUANTUM).round() * PIXEL_QUANTUM
}

pub fn snap_image(img: &Tensor<f64>) -> Tensor<f64> {
    img.map(snap)
}

pub fn check_image(img: &Tensor<f64>) -> Result<Shape> {
    let s = img.shape();
    if s.b != 1 || !(s.c == 1 || s.c == 3) {
        return Err(DegradeError::Image(format!("expected a (1, 1|3, H, W) image, got {s}")));
    }
    if !img.is_finite() {
        return Err(DegradeError::Image("image has non-finite pixels".into()));
    }
    Ok(s)
}

/// Channel mean as a single-channel image.
pub fn to_gray(img: &Tensor<f64>) -> Result<Tensor<f64>> {
    let s = check_image(img)?;
    if s.c == 1 {
        return Ok(img.clone());
    }
    let gray = Tensor::from_fn(s.with_c(1), |_, _, y, x| (0..s.c).map(|c| img.at(0, c, y, x)).sum::<f64>() / s.c as f64);
    Ok(snap_image(&gray))
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary P6 for three channels, P5 for one.
pub fn write_pnm(mut w: impl Write, img: &Tensor<f64>) -> Result<()> {
    let s = check_image(img)?;
    let magic = if s.c == 3 { "P6" } else { "P5" };
    write!(w, "{magic}\n{} {}\n255\n", s.w, s.h)?;
    let mut bytes = Vec::with_capacity(s.c * s.h * s.w);
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..s.c {
                bytes.push(to_byte(img.at(0, c, y, x)));
            }
        }
    }
    w.write_all(&bytes)?;
    Ok(())
}

fn header_token(r: &mut impl BufRead) -> Result<String> {
    let mut tok = String::new();
    loop {
        let mut byte = [0u8; 1];
        if r.read(&mut byte)? == 0 {
            break;
        }
        let ch = byte[0] as char;
        if ch == '#' && tok.is_empty() {
            let mut skip = String::new();
            r.read_line(&mut skip)?;
            continue;
        }
        if ch.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(ch);
    }
    if tok.is_empty() {
        return Err(DegradeError::Image("truncated netpbm header".into()));
    }
    Ok(tok)
}

pub fn read_pnm(mut r: impl BufRead) -> Result<Tensor<f64>> {
    let magic = header_token(&mut r)?;
    let c = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        other => return Err(DegradeError::Image(format!("unsupported netpbm magic {other}"))),
    };
    let mut num = || -> Result<usize> {
        let t = header_token(&mut r)?;
        t.parse().map_err(|_| DegradeError::Image(format!("bad netpbm header field {t:?}")))
    };
    let (w, h, max) = (num()?, num()?, num()?);
    if max != 255 {
        return Err(DegradeError::Image(format!("only 8-bit netpbm is supported, maxval {max}")));
    }
    let mut bytes = vec![0u8; c * w * h];
    r.read_exact(&mut bytes)?;
    let img = Tensor::from_fn(Shape::new(1, c, h, w), |_, ch, y, x| bytes[(y * w + x) * c + ch] as f64 / 255.0);
    Ok(snap_image(&img))
}
