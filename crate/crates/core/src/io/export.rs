use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::fusion::{fuse_forward, FusionMode, FusionParams, Modality};
use crate::metrics::Aggregation;
use crate::synthdata::LabeledSequence;
use crate::trainer::RunResult;

use super::{ExperimentConfig, IoError};

pub const RESULTS_COLUMNS: [&str; 5] = [
    "mode",
    "seed",
    "ccc_valence",
    "ccc_arousal",
    "epochs_to_best",
];
pub const GATES_COLUMNS: [&str; 6] = [
    "sequence_id",
    "clip",
    "modality",
    "gate_unattended",
    "gate_attended",
    "corrupted_flag",
];

#[derive(Serialize)]
struct ResultRow<'a> {
    mode: &'a str,
    seed: u64,
    ccc_valence: f64,
    ccc_arousal: f64,
    epochs_to_best: usize,
}

#[derive(Serialize)]
struct GateRow<'a> {
    sequence_id: usize,
    clip: usize,
    modality: &'a str,
    gate_unattended: f64,
    gate_attended: f64,
    corrupted_flag: u8,
}

/// One row per run, in the order given.
pub fn write_results_csv(path: &Path, runs: &[RunResult]) -> Result<(), IoError> {
    let file = std::fs::File::create(path).map_err(|e| IoError::fs(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    if runs.is_empty() {
        w.write_record(RESULTS_COLUMNS)?;
    }
    for r in runs {
        w.serialize(ResultRow {
            mode: r.mode.name(),
            seed: r.seed,
            ccc_valence: r.ccc_valence,
            ccc_arousal: r.ccc_arousal,
            epochs_to_best: r.epochs_to_best,
        })?;
    }
    w.flush().map_err(|e| IoError::fs(path, e))
}

/// Per-clip gate scores of a DCA result on `val`, one row per
/// `(sequence, clip, modality)` with audio before visual.
pub fn export_gates(
    result: &RunResult,
    val: &[LabeledSequence],
    path: &Path,
) -> Result<(), IoError> {
    export_gate_scores(result.mode, &result.final_params, val, path)
}

/// As [`export_gates`], from a mode and parameters.
pub fn export_gate_scores(
    mode: FusionMode,
    params: &FusionParams,
    val: &[LabeledSequence],
    path: &Path,
) -> Result<(), IoError> {
    if mode != FusionMode::Dca {
        return Err(IoError::Invalid(format!(
            "gate export needs a DCA model, got {}",
            mode.name()
        )));
    }
    let mut rows = Vec::new();
    for (id, s) in val.iter().enumerate() {
        let out = fuse_forward(&s.xa, &s.xv, params, FusionMode::Dca)
            .map_err(|e| IoError::Invalid(format!("sequence {id}: {e}")))?;
        let gates = out.gates.expect("DCA mode yields gates");
        for clip in 0..s.clips() {
            for (modality, scores) in [
                (Modality::Audio, &gates.audio),
                (Modality::Visual, &gates.visual),
            ] {
                rows.push(GateRow {
                    sequence_id: id,
                    clip,
                    modality: modality.name(),
                    gate_unattended: scores.scores.get(clip, 0),
                    gate_attended: scores.scores.get(clip, 1),
                    corrupted_flag: s.mask.for_modality(modality)[clip] as u8,
                });
            }
        }
    }
    let file = std::fs::File::create(path).map_err(|e| IoError::fs(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    if rows.is_empty() {
        w.write_record(GATES_COLUMNS)?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| IoError::fs(path, e))
}

#[derive(Serialize)]
struct HistoryRow {
    epoch: usize,
    train_loss: f64,
    val_mean_ccc: f64,
}

/// Per-epoch training loss and validation CCC.
pub fn write_history_csv(path: &Path, result: &RunResult) -> Result<(), IoError> {
    let file = std::fs::File::create(path).map_err(|e| IoError::fs(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for (i, (&loss, &val)) in result
        .loss_history
        .iter()
        .zip(&result.val_history)
        .enumerate()
    {
        w.serialize(HistoryRow {
            epoch: i + 1,
            train_loss: loss,
            val_mean_ccc: val,
        })?;
    }
    w.flush().map_err(|e| IoError::fs(path, e))
}

#[derive(Serialize)]
struct ConfigEcho<'a> {
    crate_version: &'static str,
    command: &'a str,
    ccc_aggregation: Aggregation,
    config: &'a ExperimentConfig,
}

/// Writes the effective configuration (after command-line overrides) so the
/// run can be repeated exactly.
pub fn write_config_echo(
    path: &Path,
    command: &str,
    cfg: &ExperimentConfig,
) -> Result<(), IoError> {
    let echo = ConfigEcho {
        crate_version: env!("CARGO_PKG_VERSION"),
        command,
        ccc_aggregation: Aggregation::Concatenated,
        config: cfg,
    };
    let text = serde_json::to_string_pretty(&echo)?;
    std::fs::write(path, text).map_err(|e| IoError::fs(path, e))
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    mode: FusionMode,
    params: FusionParams,
}

/// Trained parameters together with the mode they were trained in.
pub fn write_model(path: &Path, mode: FusionMode, params: &FusionParams) -> Result<(), IoError> {
    let text = serde_json::to_string(&ModelFile {
        mode,
        params: params.clone(),
    })?;
    std::fs::write(path, text).map_err(|e| IoError::fs(path, e))
}

pub fn read_model(path: &Path) -> Result<(FusionMode, FusionParams), IoError> {
    let text = std::fs::read_to_string(path).map_err(|e| IoError::fs(path, e))?;
    let model: ModelFile = serde_json::from_str(&text)?;
    model
        .params
        .validate()
        .map_err(|e| IoError::Invalid(format!("parameters: {e}")))?;
    Ok((model.mode, model.params))
}
