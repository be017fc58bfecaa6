//! `dca` command-line interface.
//!
//! Every failure prints exactly one line to stderr of the form
//! `error[<kind>]: <message>`; usage errors exit 1, everything else exits 2.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::fusion::FusionMode;
use crate::io::{
    self, export, read_avfs, write_avfs, write_config_echo, write_results_csv, ExperimentConfig,
    IoError,
};
use crate::synthdata::{generate, Dataset};
use crate::trainer::{self, RunResult};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Relative error above which `gradcheck` fails.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(
    name = "dca",
    version,
    about = "Dynamic cross-attention audio-visual fusion experiments",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// Experiment configuration (JSON); defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the training seed (for `gen`, the emission seed).
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Restricts the run to one fusion mode.
    #[arg(long, value_parser = parse_mode, value_name = "ca|dca")]
    mode: Option<FusionMode>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
struct DataArg {
    /// Directory holding train.avfs and val.avfs; generated from the config
    /// when omitted.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic train.avfs and val.avfs.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model (default mode dca).
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Train every (mode, seed) pair and compare.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Check analytic gradients of the training loss on random problems.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Number of random problems.
        #[arg(long, default_value_t = 20)]
        configs: usize,
    },
    /// Dump per-clip gate scores of a trained DCA model.
    ExportGates {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Model file written by `train` (default: <out>/model.json).
        #[arg(long, value_name = "PATH")]
        model: Option<PathBuf>,
    },
}

fn parse_mode(s: &str) -> Result<FusionMode, String> {
    s.parse::<FusionMode>().map_err(|e| e.to_string())
}

/// A failure with its machine-readable kind.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    fn new(kind: &'static str, message: impl ToString) -> Self {
        Self {
            kind,
            message: message.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        if self.kind == "usage" {
            EXIT_USAGE
        } else {
            EXIT_RUNTIME
        }
    }

    /// The single diagnostic line.
    pub fn line(&self) -> String {
        let flat: Vec<&str> = self.message.split_whitespace().collect();
        format!("error[{}]: {}", self.kind, flat.join(" "))
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        let kind = match e {
            IoError::Config(_) | IoError::Json(_) => "config",
            IoError::NotAvfs | IoError::Corrupt { .. } | IoError::Version(_) => "format",
            _ => "io",
        };
        CliError::new(kind, e)
    }
}

impl From<trainer::TrainError> for CliError {
    fn from(e: trainer::TrainError) -> Self {
        CliError::new("train", e)
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    EXIT_OK
                }
                _ => {
                    let rendered = e.render().to_string();
                    let _ = write!(err, "{rendered}");
                    let reason = rendered
                        .lines()
                        .find(|l| l.starts_with("error:"))
                        .map(|l| l.trim_start_matches("error:").trim().to_string())
                        .unwrap_or_else(|| "missing subcommand".into());
                    let _ = writeln!(err, "{}", CliError::new("usage", reason).line());
                    EXIT_USAGE
                }
            };
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "{}", e.line());
            e.exit_code()
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(mode) = common.mode {
        cfg.modes = vec![mode];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply_training_seed(cfg: &mut ExperimentConfig, seed: Option<u64>) {
    if let Some(seed) = seed {
        cfg.hyper.seed = seed;
        cfg.seeds = vec![seed];
    }
}

fn load_data(cfg: &ExperimentConfig, data: &DataArg) -> Result<Dataset, CliError> {
    match &data.data {
        Some(dir) => Ok(Dataset {
            train: read_avfs(&dir.join("train.avfs"))?,
            val: read_avfs(&dir.join("val.avfs"))?,
        }),
        None => generate(&cfg.generator).map_err(|e| CliError::new("data", e)),
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Gen { common } => {
            let mut cfg = load_config(&common)?;
            if let Some(seed) = common.seed {
                cfg.generator.emission_seed = seed;
            }
            let dir = cfg.prepare_output_dir()?.to_path_buf();
            let data = generate(&cfg.generator).map_err(|e| CliError::new("data", e))?;
            write_avfs(&dir.join("train.avfs"), &data.train)?;
            write_avfs(&dir.join("val.avfs"), &data.val)?;
            write_config_echo(&dir.join("config.json"), "gen", &cfg)?;
            say(
                out,
                format!(
                    "wrote {} training and {} validation sequences to {}",
                    data.train.len(),
                    data.val.len(),
                    dir.display()
                ),
            )
        }
        Command::Train { common, data } => {
            let mut cfg = load_config(&common)?;
            apply_training_seed(&mut cfg, common.seed);
            let mode = common.mode.unwrap_or(FusionMode::Dca);
            cfg.modes = vec![mode];
            let dir = cfg.prepare_output_dir()?.to_path_buf();
            let dataset = load_data(&cfg, &data)?;
            let result = trainer::train(mode, &dataset, &cfg.hyper)?;
            write_results_csv(&dir.join("results.csv"), std::slice::from_ref(&result))?;
            export::write_history_csv(&dir.join("history.csv"), &result)?;
            export::write_model(&dir.join("model.json"), mode, &result.final_params)?;
            if cfg.export_gates && mode == FusionMode::Dca {
                io::export_gates(&result, &dataset.val, &dir.join("gates.csv"))?;
            }
            write_config_echo(&dir.join("config.json"), "train", &cfg)?;
            print_runs(out, std::slice::from_ref(&result))
        }
        Command::Ablate { common, data } => {
            let mut cfg = load_config(&common)?;
            apply_training_seed(&mut cfg, common.seed);
            let dir = cfg.prepare_output_dir()?.to_path_buf();
            let dataset = load_data(&cfg, &data)?;
            let table = trainer::ablate(&dataset, &cfg.seeds, &cfg.modes, &cfg.hyper)?;
            write_results_csv(&dir.join("results.csv"), &table.runs)?;
            if cfg.export_gates {
                for r in table.runs.iter().filter(|r| r.mode == FusionMode::Dca) {
                    let path = dir.join(format!("gates_seed{}.csv", r.seed));
                    io::export_gates(r, &dataset.val, &path)?;
                }
            }
            write_config_echo(&dir.join("config.json"), "ablate", &cfg)?;
            print_runs(out, &table.runs)?;
            say(out, "")?;
            say(
                out,
                format!(
                    "{:<5} {:>5} {:>17} {:>17}",
                    "mode", "runs", "valence", "arousal"
                ),
            )?;
            for s in &table.summary {
                say(
                    out,
                    format!(
                        "{:<5} {:>5} {:>8.4} ± {:<6.4} {:>8.4} ± {:<6.4}",
                        s.mode.name(),
                        s.runs,
                        s.mean_valence,
                        s.std_valence,
                        s.mean_arousal,
                        s.std_arousal
                    ),
                )?;
            }
            Ok(())
        }
        Command::Gradcheck { common, configs } => {
            let cfg = load_config(&common)?;
            let seed = common.seed.unwrap_or(cfg.hyper.seed);
            let mode = common.mode.unwrap_or(FusionMode::Dca);
            if configs == 0 {
                return Err(CliError::new("usage", "--configs must be positive"));
            }
            let mut worst = 0.0f64;
            let (mut checked, mut skipped) = (0, 0);
            for k in 0..configs as u64 {
                let report = trainer::gradient_probe(seed.wrapping_add(k), mode, cfg.hyper.loss)?;
                worst = worst.max(report.max_relative_error);
                checked += report.checked;
                skipped += report.skipped;
            }
            say(
                out,
                format!(
                    "mode {} seed {seed}: {configs} configs, {checked} coordinates checked, {skipped} skipped at ReLU kinks",
                    mode.name()
                ),
            )?;
            say(out, format!("max relative error: {worst:.3e}"))?;
            if worst < GRADCHECK_TOLERANCE {
                Ok(())
            } else {
                Err(CliError::new(
                    "gradcheck",
                    format!("max relative error {worst:.3e} exceeds {GRADCHECK_TOLERANCE:e}"),
                ))
            }
        }
        Command::ExportGates {
            common,
            data,
            model,
        } => {
            let cfg = load_config(&common)?;
            let dir = cfg.prepare_output_dir()?.to_path_buf();
            let model_path = model.unwrap_or_else(|| dir.join("model.json"));
            let (mode, params) = export::read_model(&model_path)?;
            let dataset = load_data(&cfg, &data)?;
            let path = dir.join("gates.csv");
            export::export_gate_scores(mode, &params, &dataset.val, &path)?;
            say(out, format!("wrote {}", path.display()))
        }
    }
}

fn say(out: &mut dyn Write, line: impl AsRef<str>) -> Result<(), CliError> {
    writeln!(out, "{}", line.as_ref()).map_err(|e| CliError::new("io", format!("stdout: {e}")))
}

fn print_runs(out: &mut dyn Write, runs: &[RunResult]) -> Result<(), CliError> {
    say(
        out,
        format!(
            "{:<5} {:>6} {:>12} {:>12} {:>15}",
            "mode", "seed", "ccc_valence", "ccc_arousal", "epochs_to_best"
        ),
    )?;
    for r in runs {
        say(
            out,
            format!(
                "{:<5} {:>6} {:>12.4} {:>12.4} {:>15}",
                r.mode.name(),
                r.seed,
                r.ccc_valence,
                r.ccc_arousal,
                r.epochs_to_best
            ),
        )?;
    }
    Ok(())
}
