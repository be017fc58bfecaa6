//! Mini-batch training, validation and the CA-vs-DCA ablation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{
    fuse_forward, fuse_on_tape, predict, FeatureSequence, FusionError, FusionMode, FusionParams,
    Modality, ParamNodes, DEFAULT_TEMPERATURE,
};
use crate::metrics::{self, Aggregation, CccPair, EmotionTrack, MetricsError};
use crate::numcore::{grad_check, GradCheckReport, Matrix, NodeId, NumError, Tape};
use crate::synthdata::{smooth, CorruptionMask, Dataset, LabeledSequence, SynthError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid hyperparameters: {0}")]
    Hyper(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (parameter norm {param_norm})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        param_norm: f64,
    },
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `1 - mean(CCC_valence, CCC_arousal)`.
    #[default]
    Ccc,
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Sequences per update.
    pub batch: usize,
    pub temperature: f64,
    pub smoothing_window: Option<usize>,
    pub seed: u64,
    pub loss: LossKind,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            momentum: 0.9,
            epochs: 100,
            batch: 8,
            temperature: DEFAULT_TEMPERATURE,
            smoothing_window: None,
            seed: 0,
            loss: LossKind::Ccc,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Hyper(m));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch == 0 {
            return bad("batch must be positive".into());
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        if let Some(w) = self.smoothing_window {
            if w % 2 == 0 {
                return bad(format!("smoothing_window {w} must be odd"));
            }
        }
        Ok(())
    }
}

/// Attended-column gate weight statistics for one modality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateSummary {
    pub mean_attended: f64,
    pub std_attended: f64,
    /// Mean over clips whose features for this modality were corrupted.
    pub mean_attended_corrupted: Option<f64>,
    pub mean_attended_clean: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateStats {
    pub audio: GateSummary,
    pub visual: GateSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub mode: FusionMode,
    pub seed: u64,
    pub ccc_valence: f64,
    pub ccc_arousal: f64,
    /// 1-based epoch whose parameters were kept.
    pub epochs_to_best: usize,
    /// Mean training loss per epoch.
    pub loss_history: Vec<f64>,
    /// Validation mean CCC per epoch.
    pub val_history: Vec<f64>,
    pub final_params: FusionParams,
    pub gate_stats: Option<GateStats>,
}

/// `1 - 0.5 (CCC_valence + CCC_arousal)`; a degenerate dimension scores 0.
pub fn loss(preds: &EmotionTrack, golds: &EmotionTrack) -> Result<f64, TrainError> {
    let v = metrics::ccc(preds.valence(), golds.valence())?;
    let a = metrics::ccc(preds.arousal(), golds.arousal())?;
    Ok(1.0 - 0.5 * (v.value + a.value))
}

/// Records the per-sequence loss of `pred` (a `2 x L` node) on `tape`.
pub fn loss_on_tape(
    tape: &mut Tape,
    pred: NodeId,
    gold: &EmotionTrack,
    kind: LossKind,
) -> Result<NodeId, TrainError> {
    let target = gold.to_matrix();
    let node = match kind {
        LossKind::Ccc => {
            let c = tape.concordance_rows(pred, target)?;
            let s = tape.sum(c)?;
            let scaled = tape.scale(s, -0.5)?;
            tape.offset(scaled, 1.0)?
        }
        LossKind::Mse => {
            let n = target.rows() * target.cols();
            let t = tape.constant(target);
            let diff = tape.sub(pred, t)?;
            let sq = tape.mul(diff, diff)?;
            let s = tape.sum(sq)?;
            tape.scale(s, 1.0 / n as f64)?
        }
    };
    Ok(node)
}

/// Mean per-sequence loss over `batch`, recorded on `tape`.
pub fn batch_loss_on_tape(
    tape: &mut Tape,
    nodes: ParamNodes,
    batch: &[&LabeledSequence],
    mode: FusionMode,
    hyper: &HyperParams,
) -> Result<NodeId, TrainError> {
    let mut total: Option<NodeId> = None;
    for seq in batch {
        let fwd = fuse_on_tape(tape, nodes, &seq.xa, &seq.xv, mode, hyper.temperature)?;
        let l = loss_on_tape(tape, fwd.predictions, &seq.labels, hyper.loss)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| TrainError::Data("empty batch".into()))?;
    Ok(tape.scale(total, 1.0 / batch.len() as f64)?)
}

/// Initial parameters for a run; the same generator then drives shuffling.
pub fn init_params(d_a: usize, d_v: usize, hyper: &HyperParams) -> (FusionParams, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let params = FusionParams::init(d_a, d_v, hyper.temperature, &mut rng);
    (params, rng)
}

/// Per-sequence predictions, optionally smoothed.
pub fn predict_sequences(
    params: &FusionParams,
    mode: FusionMode,
    seqs: &[LabeledSequence],
    smoothing_window: Option<usize>,
) -> Result<Vec<EmotionTrack>, TrainError> {
    seqs.iter()
        .map(|s| {
            let out = fuse_forward(&s.xa, &s.xv, params, mode)?;
            let track = predict(&out.fused, &params.head_w, &params.head_b)?;
            Ok(match smoothing_window {
                Some(w) if w > 1 => smooth(&track, w)?,
                _ => track,
            })
        })
        .collect()
}

/// Concatenated-track CCC of `params` on `seqs`.
pub fn validate_params(
    params: &FusionParams,
    mode: FusionMode,
    seqs: &[LabeledSequence],
    smoothing_window: Option<usize>,
) -> Result<CccPair, TrainError> {
    let preds = predict_sequences(params, mode, seqs, smoothing_window)?;
    let golds: Vec<EmotionTrack> = seqs.iter().map(|s| s.labels.clone()).collect();
    Ok(metrics::evaluate(
        &preds,
        &golds,
        Aggregation::Concatenated,
    )?)
}

fn check_data(data: &Dataset) -> Result<(usize, usize), TrainError> {
    if data.train.is_empty() {
        return Err(TrainError::Data("training set is empty".into()));
    }
    if data.val.is_empty() {
        return Err(TrainError::Data("validation set is empty".into()));
    }
    let (d_a, d_v) = data.dims().expect("non-empty");
    for (i, s) in data.train.iter().chain(&data.val).enumerate() {
        if s.xa.dim() != d_a || s.xv.dim() != d_v {
            return Err(TrainError::Data(format!(
                "sequence {i} has dims ({}, {}), expected ({d_a}, {d_v})",
                s.xa.dim(),
                s.xv.dim()
            )));
        }
        if s.clips() < 2 {
            return Err(TrainError::Data(format!(
                "sequence {i} has fewer than 2 clips"
            )));
        }
    }
    Ok((d_a, d_v))
}

/// Trains one model with momentum gradient descent and keeps the parameters
/// of the epoch with the best validation CCC (mean of both dimensions).
pub fn train(
    mode: FusionMode,
    data: &Dataset,
    hyper: &HyperParams,
) -> Result<RunResult, TrainError> {
    hyper.validate()?;
    let (d_a, d_v) = check_data(data)?;
    let (initial, mut rng) = init_params(d_a, d_v, hyper);

    let mut current: Vec<Matrix> = initial.matrices().into_iter().cloned().collect();
    let mut velocity: Vec<Matrix> = current
        .iter()
        .map(|m| Matrix::zeros(m.rows(), m.cols()))
        .collect();
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    let mut loss_history = Vec::with_capacity(hyper.epochs);
    let mut val_history = Vec::with_capacity(hyper.epochs);
    let mut best: Option<(usize, f64, CccPair, FusionParams)> = None;

    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(hyper.batch).enumerate() {
            let batch: Vec<&LabeledSequence> = chunk.iter().map(|&i| &data.train[i]).collect();
            let params = FusionParams::from_matrices(current.clone(), hyper.temperature);
            let mut tape = Tape::new();
            let nodes = ParamNodes::register(&mut tape, &params);
            let loss = batch_loss_on_tape(&mut tape, nodes, &batch, mode, hyper)?;
            let value = tape.value(loss).get(0, 0);
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: b,
                    param_norm: params.norm(),
                });
            }
            let grads = tape.backward(loss)?;
            for ((p, v), id) in current.iter_mut().zip(&mut velocity).zip(nodes.all()) {
                let g = grads.wrt(id);
                *v = v
                    .scale(hyper.momentum)
                    .add(&g.scale(-hyper.learning_rate))?;
                *p = p.add(v)?;
            }
            epoch_loss += value * batch.len() as f64;
        }
        loss_history.push(epoch_loss / data.train.len() as f64);

        let params = FusionParams::from_matrices(current.clone(), hyper.temperature);
        let score = validate_params(&params, mode, &data.val, hyper.smoothing_window)?;
        let mean = score.mean();
        val_history.push(mean);
        if best.as_ref().is_none_or(|(_, m, _, _)| mean > *m) {
            best = Some((epoch, mean, score, params));
        }
    }

    let (epochs_to_best, _, score, final_params) = best.expect("at least one epoch");
    let gate_stats = match mode {
        FusionMode::Dca => Some(gate_stats(&final_params, &data.val)?),
        FusionMode::Ca => None,
    };
    Ok(RunResult {
        mode,
        seed: hyper.seed,
        ccc_valence: score.valence.value,
        ccc_arousal: score.arousal.value,
        epochs_to_best,
        loss_history,
        val_history,
        final_params,
        gate_stats,
    })
}

/// Finite-difference step used by [`gradient_probe`].
pub const PROBE_STEP: f64 = 1e-5;

/// Gradient check of the full batch loss on a small random problem drawn
/// from `seed`: 2 to 4 feature dims per modality, 3 to 5 clips, two
/// sequences, standard normal features and labels uniform in `(-0.9, 0.9)`.
pub fn gradient_probe(
    seed: u64,
    mode: FusionMode,
    loss: LossKind,
) -> Result<GradCheckReport, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_a = rng.random_range(2..=4);
    let d_v = rng.random_range(2..=4);
    let clips = rng.random_range(3..=5);
    let normal = Normal::new(0.0, 1.0).expect("valid");
    let features = |d: usize, rng: &mut ChaCha8Rng| {
        let data = (0..d * clips).map(|_| normal.sample(rng)).collect();
        Matrix::new(d, clips, data).expect("sized")
    };
    let mut seqs = Vec::new();
    for _ in 0..2 {
        let xa = FeatureSequence::new(Modality::Audio, features(d_a, &mut rng))?;
        let xv = FeatureSequence::new(Modality::Visual, features(d_v, &mut rng))?;
        let valence = (0..clips).map(|_| rng.random_range(-0.9..0.9)).collect();
        let arousal = (0..clips).map(|_| rng.random_range(-0.9..0.9)).collect();
        seqs.push(LabeledSequence {
            xa,
            xv,
            labels: EmotionTrack::new(valence, arousal)?,
            mask: CorruptionMask::clean(clips),
        });
    }
    let hyper = HyperParams {
        loss,
        ..HyperParams::default()
    };
    let params = FusionParams::init(d_a, d_v, hyper.temperature, &mut rng);
    let batch: Vec<&LabeledSequence> = seqs.iter().collect();
    let initial: Vec<Matrix> = params.matrices().into_iter().cloned().collect();
    grad_check(
        |tape: &mut Tape, ids: &[NodeId]| {
            batch_loss_on_tape(tape, ParamNodes::from_slice(ids), &batch, mode, &hyper)
        },
        &initial,
        PROBE_STEP,
    )
}

/// Attended-gate statistics of a DCA model over `seqs`, split by each
/// modality's corruption mask.
pub fn gate_stats(
    params: &FusionParams,
    seqs: &[LabeledSequence],
) -> Result<GateStats, TrainError> {
    let mut per = [
        (Vec::new(), Vec::new(), Vec::new()),
        (Vec::new(), Vec::new(), Vec::new()),
    ];
    for s in seqs {
        let out = fuse_forward(&s.xa, &s.xv, params, FusionMode::Dca)?;
        let gates = out.gates.expect("DCA mode yields gates");
        for (slot, modality, scores) in [
            (0, Modality::Audio, &gates.audio),
            (1, Modality::Visual, &gates.visual),
        ] {
            let mask = s.mask.for_modality(modality);
            for (w, &corrupted) in scores.attended_weights().into_iter().zip(mask) {
                per[slot].0.push(w);
                if corrupted {
                    per[slot].1.push(w);
                } else {
                    per[slot].2.push(w);
                }
            }
        }
    }
    let summarize = |(all, bad, good): &(Vec<f64>, Vec<f64>, Vec<f64>)| {
        let (mean, std) = mean_std(all);
        GateSummary {
            mean_attended: mean,
            std_attended: std,
            mean_attended_corrupted: (!bad.is_empty()).then(|| mean_std(bad).0),
            mean_attended_clean: (!good.is_empty()).then(|| mean_std(good).0),
        }
    };
    Ok(GateStats {
        audio: summarize(&per[0]),
        visual: summarize(&per[1]),
    })
}

/// Population mean and standard deviation; `(0, 0)` for an empty slice.
fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean and sample standard deviation of validation CCC for one mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: FusionMode,
    pub runs: usize,
    pub mean_valence: f64,
    pub std_valence: f64,
    pub mean_arousal: f64,
    pub std_arousal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    /// One entry per `(mode, seed)`, modes outermost.
    pub runs: Vec<RunResult>,
    pub summary: Vec<ModeSummary>,
}

impl AblationTable {
    pub fn summary_for(&self, mode: FusionMode) -> Option<&ModeSummary> {
        self.summary.iter().find(|s| s.mode == mode)
    }
}

/// Trains every `(mode, seed)` pair on the same data. Runs execute in
/// parallel; each owns its parameters and generator, so the table matches a
/// serial run exactly.
pub fn ablate(
    data: &Dataset,
    seeds: &[u64],
    modes: &[FusionMode],
    hyper: &HyperParams,
) -> Result<AblationTable, TrainError> {
    if seeds.is_empty() || modes.is_empty() {
        return Err(TrainError::Hyper(
            "ablation needs at least one seed and one mode".into(),
        ));
    }
    let jobs: Vec<(FusionMode, u64)> = modes
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(mode, seed)| {
            let h = HyperParams {
                seed,
                ..hyper.clone()
            };
            train(mode, data, &h)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let summary = modes
        .iter()
        .map(|&mode| {
            let v: Vec<f64> = runs
                .iter()
                .filter(|r| r.mode == mode)
                .map(|r| r.ccc_valence)
                .collect();
            let a: Vec<f64> = runs
                .iter()
                .filter(|r| r.mode == mode)
                .map(|r| r.ccc_arousal)
                .collect();
            let (mean_valence, std_valence) = mean_sample_std(&v);
            let (mean_arousal, std_arousal) = mean_sample_std(&a);
            ModeSummary {
                mode,
                runs: v.len(),
                mean_valence,
                std_valence,
                mean_arousal,
                std_arousal,
            }
        })
        .collect();
    Ok(AblationTable { runs, summary })
}

fn mean_sample_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
