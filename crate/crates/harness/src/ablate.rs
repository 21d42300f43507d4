//! The connection and component ablation grids.

use octnet_core::NeckConfig;
use octnet_tensor::Module;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, NeckKind};
use crate::data::ensure_dataset;
use crate::error::{invalid, Result};
use crate::eval::{cmd_eval, write_reports, ReportRow};
use crate::model::Detector;
use crate::train::cmd_train;

pub const ABLATE_DIR: &str = "ablate";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Row {
    Full,
    NearOnly,
    FarOnly,
    AttentionOff,
    FusionOff,
}

impl Row {
    pub const ALL: [Row; 5] = [Row::Full, Row::NearOnly, Row::FarOnly, Row::AttentionOff, Row::FusionOff];
    /// Rows of the connection table.
    pub const CONNECTIONS: [Row; 3] = [Row::Full, Row::NearOnly, Row::FarOnly];
    /// Rows of the component table.
    pub const COMPONENTS: [Row; 3] = [Row::Full, Row::AttentionOff, Row::FusionOff];

    pub fn label(self) -> &'static str {
        match self {
            Row::Full => "full",
            Row::NearOnly => "near_only",
            Row::FarOnly => "far_only",
            Row::AttentionOff => "attention_off",
            Row::FusionOff => "fusion_off",
        }
    }

    pub fn neck_config(self, base: &NeckConfig) -> NeckConfig {
        let mut c = base.clone();
        match self {
            Row::Full => {}
            Row::NearOnly => c.far_enabled = false,
            Row::FarOnly => c.near_enabled = false,
            Row::AttentionOff => c.attention_enabled = false,
            Row::FusionOff => c.fusion_enabled = false,
        }
        c
    }
}

/// One config per row. Only the neck toggles, name and output directory differ, and
/// every row reads the base config's dataset.
pub fn row_configs(base: &ExperimentConfig) -> Result<Vec<(Row, ExperimentConfig)>> {
    if base.neck != NeckKind::Ocsafpn {
        return Err(invalid("ablations need the ocsafpn neck"));
    }
    let data_dir = std::path::absolute(base.data_dir())?;
    Ok(Row::ALL
        .iter()
        .map(|&row| {
            let mut cfg = base.clone();
            cfg.name = format!("{}-{}", base.name, row.label());
            cfg.neck_config = row.neck_config(&base.neck_config);
            cfg.out = base.out.join(ABLATE_DIR).join(row.label());
            cfg.data.dir = data_dir.clone();
            (row, cfg)
        })
        .collect())
}

/// Parameter count of each row's model.
pub fn param_counts(base: &ExperimentConfig) -> Result<Vec<(Row, usize)>> {
    let k = base.data.scene.num_classes;
    row_configs(base)?
        .into_iter()
        .map(|(row, cfg)| Ok((row, Detector::<f32>::new(&cfg, k)?.num_params())))
        .collect()
}

#[derive(Clone, Debug)]
pub struct AblationTables {
    pub connections: Vec<ReportRow>,
    pub components: Vec<ReportRow>,
}

/// Trains and evaluates every row on every image set, then writes the two tables.
/// The full model is trained once and shared by both.
pub fn cmd_ablate(base: &ExperimentConfig) -> Result<AblationTables> {
    base.validate()?;
    ensure_dataset(base)?;
    let mut rows: Vec<(Row, Vec<ReportRow>)> = Vec::new();
    for (row, cfg) in row_configs(base)? {
        let cfg = ExperimentConfig { eval: crate::config::EvalConfig { sets: Vec::new(), ..cfg.eval.clone() }, ..cfg };
        cmd_train(&cfg)?;
        let mut report = cmd_eval(&cfg, None)?;
        for r in &mut report {
            r.label = row.label().to_string();
        }
        rows.push((row, report));
    }
    let pick = |which: &[Row]| -> Vec<ReportRow> {
        which
            .iter()
            .flat_map(|w| rows.iter().filter(move |(r, _)| r == w).flat_map(|(_, v)| v.clone()))
            .collect()
    };
    let tables = AblationTables { connections: pick(&Row::CONNECTIONS), components: pick(&Row::COMPONENTS) };
    let dir = base.out.join(ABLATE_DIR);
    write_reports(&dir, "connections", &tables.connections)?;
    write_reports(&dir, "components", &tables.components)?;
    Ok(tables)
}
