//! Box interchange as JSON lines. The first line is a header naming the angle
//! unit; every later line is one box.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{DetectError, Result};
use crate::geometry::RotatedBox;

pub const FORMAT: &str = "octnet-boxes";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub angle_unit: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl Header {
    pub fn new(config_hash: Option<String>) -> Self {
        Self {
            format: FORMAT.into(),
            angle_unit: "radians".into(),
            config_hash,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub image_id: u64,
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl BoxRecord {
    pub fn new(image_id: u64, b: &RotatedBox) -> Self {
        Self {
            image_id,
            class_id: b.class_id,
            cx: b.cx,
            cy: b.cy,
            w: b.w,
            h: b.h,
            theta: b.theta,
            score: b.score,
        }
    }

    pub fn to_box(&self) -> Result<RotatedBox> {
        let mut b = RotatedBox::new(self.cx, self.cy, self.w, self.h, self.theta, self.class_id)?;
        b.score = self.score;
        b.validate()?;
        Ok(b)
    }
}

pub fn write(mut w: impl Write, header: &Header, records: &[BoxRecord]) -> Result<()> {
    serde_json::to_writer(&mut w, header)?;
    writeln!(w)?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    Ok(())
}

/// Reads a file written by [`write`]. Blank lines are skipped.
pub fn read(r: impl BufRead) -> Result<(Header, Vec<BoxRecord>)> {
    let mut header = None;
    let mut records = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| DetectError::Parse {
            line: i + 1,
            detail: e.to_string(),
        };
        if header.is_none() {
            let h: Header = serde_json::from_str(&line).map_err(parse_err)?;
            if h.format != FORMAT || h.angle_unit != "radians" {
                return Err(DetectError::Parse {
                    line: i + 1,
                    detail: format!("unsupported header {h:?}"),
                });
            }
            header = Some(h);
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(parse_err)?);
    }
    let header = header.ok_or(DetectError::Parse {
        line: 0,
        detail: "missing header line".into(),
    })?;
    Ok((header, records))
}
