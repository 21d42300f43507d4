use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use octnet_harness::ab::{cmd_ab, DEFAULT_SEEDS, DEFAULT_SETS};
use octnet_harness::ablate::cmd_ablate;
use octnet_harness::eval::{eval_detection_file, write_reports, EVAL_DIR};
use octnet_harness::freq::cmd_freq_diag;
use octnet_harness::gradcheck::cmd_gradcheck;
use octnet_harness::{
    cmd_build_data, cmd_eval, cmd_train, open_dataset, ExperimentConfig, HarnessError, ReportRow, EXIT_NUMERIC, EXIT_OK,
    EXIT_USAGE,
};

#[derive(Parser)]
#[command(name = "octnet", version, about = "Octave pyramid detector experiments")]
struct Cli {
    /// Experiment config (JSON); defaults apply to omitted fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the model seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 keeps every run bit-reproducible.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the clean set and every degraded copy.
    BuildData {
        #[arg(long)]
        overwrite: bool,
    },
    /// Train and checkpoint the configured model.
    Train,
    /// Score a checkpoint, or a detections file, on the eval split.
    Eval {
        #[arg(long, conflicts_with = "detections")]
        checkpoint: Option<PathBuf>,
        /// JSONL detections to score instead of running a model.
        #[arg(long)]
        detections: Option<PathBuf>,
    },
    /// Train and score the connection and component ablation rows.
    Ablate,
    /// Finite-difference checks of every registered block.
    Gradcheck {
        /// Only checks whose name contains this.
        #[arg(long)]
        filter: Option<String>,
    },
    /// Spectrum and band panels of one scene and its degraded copies.
    FreqDiag {
        #[arg(long, default_value_t = 0)]
        image_id: u64,
    },
    /// Baseline against octave pyramid over several model seeds.
    Ab {
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SEEDS)]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SETS.map(String::from))]
        sets: Vec<String>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds.model = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_rows(rows: &[ReportRow]) {
    for r in rows {
        let cells: Vec<String> = r.ap.iter().map(|a| a.map_or("-".into(), |v| format!("{:.2}", 100.0 * v))).collect();
        println!("{:<16} {:<10} mAP {:6.2}  [{}]", r.label, r.set, 100.0 * r.map, cells.join(" "));
    }
}

fn run(cli: Cli) -> Result<ExitCode, HarnessError> {
    octnet_tensor::set_threads(cli.threads);
    if let Cmd::Gradcheck { filter } = &cli.cmd {
        let lines = cmd_gradcheck(filter.as_deref());
        for l in &lines {
            println!("{l}");
        }
        let ok = !lines.is_empty() && lines.iter().all(|l| l.passed);
        return Ok(if ok { ExitCode::from(EXIT_OK as u8) } else { ExitCode::from(EXIT_NUMERIC as u8) });
    }
    let cfg = load_config(&cli)?;
    println!("config {} ({})", cfg.hash(), cfg.name);
    match &cli.cmd {
        Cmd::BuildData { overwrite } => {
            let m = cmd_build_data(&cfg, *overwrite)?;
            let sets: Vec<&str> = m.sets.iter().map(|s| s.name.as_str()).collect();
            println!("dataset {} at {}: sets {sets:?}", m.config_hash, cfg.data_dir().display());
        }
        Cmd::Train => {
            let s = cmd_train(&cfg)?;
            println!("params {}, {} steps, final loss {:.4}", s.params, s.steps, s.final_loss);
            println!("checkpoint {}", s.checkpoint.display());
        }
        Cmd::Eval { checkpoint, detections } => {
            let rows = match detections {
                Some(path) => {
                    let ds = open_dataset(&cfg)?;
                    let row = eval_detection_file(&cfg, &ds, &cfg.eval.split, path)?;
                    write_reports(&cfg.out.join(EVAL_DIR), "detections_report", std::slice::from_ref(&row))?;
                    vec![row]
                }
                None => cmd_eval(&cfg, checkpoint.as_deref())?,
            };
            print_rows(&rows);
        }
        Cmd::Ablate => {
            let t = cmd_ablate(&cfg)?;
            println!("connections");
            print_rows(&t.connections);
            println!("components");
            print_rows(&t.components);
        }
        Cmd::FreqDiag { image_id } => {
            let r = cmd_freq_diag(&cfg, *image_id)?;
            for s in &r.sets {
                let b = &s.bands;
                println!("{:<10} high {:.3e} (clean {:.3e})  low {:.3e} (clean {:.3e})", s.set, b.noisy_high, b.clean_high, b.noisy_low, b.clean_low);
            }
        }
        Cmd::Ab { seeds, sets } => {
            let sets: Vec<&str> = sets.iter().map(String::as_str).collect();
            let (rows, s) = cmd_ab(&cfg, seeds, &sets)?;
            print_rows(&rows);
            for set in &s.sets {
                println!("{:<10} mean delta {:+.4}, octave >= baseline on {}/{} seeds", set.set, set.mean_delta, set.octave_wins, s.seeds.len());
            }
            println!(
                "clean mAP baseline {:.4}, octave {:.4}: gate {}",
                s.baseline_clean_mean,
                s.octave_clean_mean,
                if s.gate_passed { "passed" } else { "failed" }
            );
        }
        Cmd::Gradcheck { .. } => unreachable!("handled above"),
    }
    Ok(ExitCode::from(EXIT_OK as u8))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
