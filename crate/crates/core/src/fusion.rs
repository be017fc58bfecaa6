//! Cross-attention fusion of audio and visual feature sequences, with and
//! without the dynamic gate that chooses between attended and unattended
//! features per clip.
//!
//! Shapes follow the feature-major convention: a modality's features form a
//! `d x L` matrix with one column per clip.
//!
//! The plain functions here ([`cross_correlate`], [`attend`], ...) evaluate
//! one step each on concrete matrices. [`fuse_on_tape`] records the same
//! computation on a [`Tape`] so the trainer can differentiate it.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{EmotionTrack, MetricsError};
use crate::numcore::{concat_rows, matmul, softmax_cols, Matrix, NodeId, NumError, Tape};

/// Gate temperature used unless configured otherwise.
pub const DEFAULT_TEMPERATURE: f64 = 0.1;

/// Gate column holding the weight of the unattended features.
pub const UNATTENDED: usize = 0;
/// Gate column holding the weight of the cross-attended features.
pub const ATTENDED: usize = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("attention column {col} sums to {sum}, expected 1")]
    AttentionNotNormalised { col: usize, sum: f64 },
    #[error("gate row {row} sums to {sum}, expected 1")]
    GateNotNormalised { row: usize, sum: f64 },
    #[error("feature sequence has non-finite entries")]
    NonFinite,
    #[error("feature sequence must have at least one row and one clip")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Visual,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Visual => "visual",
        }
    }
}

/// Fusion variant: plain cross-attention, or cross-attention followed by the
/// dynamic gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Ca,
    Dca,
}

impl FusionMode {
    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Ca => "ca",
            FusionMode::Dca => "dca",
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ca" => Ok(FusionMode::Ca),
            "dca" => Ok(FusionMode::Dca),
            other => Err(format!("unknown mode `{other}` (expected ca or dca)")),
        }
    }
}

/// Per-clip features of one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    modality: Modality,
    features: Matrix,
}

impl FeatureSequence {
    pub fn new(modality: Modality, features: Matrix) -> Result<Self, FusionError> {
        if features.rows() == 0 || features.cols() == 0 {
            return Err(FusionError::Empty);
        }
        if !features.is_finite() {
            return Err(FusionError::NonFinite);
        }
        Ok(Self { modality, features })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn dim(&self) -> usize {
        self.features.rows()
    }

    pub fn clips(&self) -> usize {
        self.features.cols()
    }
}

/// Every learnable weight of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    /// `d_a x d_v` cross-correlation weights.
    #[serde(with = "matrix_serde")]
    pub w: Matrix,
    /// `d_a x 2` audio gating layer.
    #[serde(with = "matrix_serde")]
    pub gate_audio: Matrix,
    /// `d_v x 2` visual gating layer.
    #[serde(with = "matrix_serde")]
    pub gate_visual: Matrix,
    /// `2 x (d_a + d_v)` regression head.
    #[serde(with = "matrix_serde")]
    pub head_w: Matrix,
    /// `2 x 1` regression bias.
    #[serde(with = "matrix_serde")]
    pub head_b: Matrix,
    pub temperature: f64,
}

impl FusionParams {
    /// Uniform initialisation in `±1/sqrt(fan_in)` for every matrix.
    pub fn init<R: Rng + ?Sized>(d_a: usize, d_v: usize, temperature: f64, rng: &mut R) -> Self {
        let mut uniform = |rows: usize, cols: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            Matrix::new(rows, cols, data).expect("sized above")
        };
        Self {
            w: uniform(d_a, d_v, d_v),
            gate_audio: uniform(d_a, 2, d_a),
            gate_visual: uniform(d_v, 2, d_v),
            head_w: uniform(2, d_a + d_v, d_a + d_v),
            head_b: uniform(2, 1, d_a + d_v),
            temperature,
        }
    }

    pub fn d_a(&self) -> usize {
        self.w.rows()
    }

    pub fn d_v(&self) -> usize {
        self.w.cols()
    }

    /// Checks internal consistency of the shapes and temperature.
    pub fn validate(&self) -> Result<(), FusionError> {
        let (d_a, d_v) = (self.d_a(), self.d_v());
        let checks = [
            ("audio gate rows", d_a, self.gate_audio.rows()),
            ("audio gate columns", 2, self.gate_audio.cols()),
            ("visual gate rows", d_v, self.gate_visual.rows()),
            ("visual gate columns", 2, self.gate_visual.cols()),
            ("head rows", 2, self.head_w.rows()),
            ("head columns", d_a + d_v, self.head_w.cols()),
            ("bias rows", 2, self.head_b.rows()),
            ("bias columns", 1, self.head_b.cols()),
        ];
        for (what, expected, found) in checks {
            if expected != found {
                return Err(FusionError::Dimension {
                    what,
                    expected,
                    found,
                });
            }
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(NumError::Temperature(self.temperature).into());
        }
        Ok(())
    }

    /// Matrices in a fixed order: `w, gate_audio, gate_visual, head_w, head_b`.
    pub fn matrices(&self) -> [&Matrix; 5] {
        [
            &self.w,
            &self.gate_audio,
            &self.gate_visual,
            &self.head_w,
            &self.head_b,
        ]
    }

    /// Inverse of [`FusionParams::matrices`].
    pub fn from_matrices(mut m: Vec<Matrix>, temperature: f64) -> Self {
        assert_eq!(m.len(), 5);
        let head_b = m.pop().unwrap();
        let head_w = m.pop().unwrap();
        let gate_visual = m.pop().unwrap();
        let gate_audio = m.pop().unwrap();
        let w = m.pop().unwrap();
        Self {
            w,
            gate_audio,
            gate_visual,
            head_w,
            head_b,
            temperature,
        }
    }

    pub fn norm(&self) -> f64 {
        self.matrices()
            .iter()
            .map(|m| m.frobenius_norm().powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Intermediate cross-attention quantities for one sub-sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    /// `L x L` cross-correlation.
    pub z: Matrix,
    pub attn_audio: Matrix,
    pub attn_visual: Matrix,
    /// Attention maps `X * A`.
    pub map_audio: Matrix,
    pub map_visual: Matrix,
    /// Cross-attended features `X + X * A`.
    pub attended_audio: Matrix,
    pub attended_visual: Matrix,
}

/// Gate logits and probabilities for one modality, `L x 2` each. Column
/// [`UNATTENDED`] weighs the raw features, column [`ATTENDED`] the
/// cross-attended ones.
#[derive(Debug, Clone, PartialEq)]
pub struct GateScores {
    pub logits: Matrix,
    pub scores: Matrix,
}

impl GateScores {
    /// Gate with fixed probabilities `[unattended, attended]` on every clip.
    pub fn constant(clips: usize, unattended: f64, attended: f64) -> Self {
        let mut data = Vec::with_capacity(2 * clips);
        for _ in 0..clips {
            data.push(unattended);
            data.push(attended);
        }
        let scores = Matrix::new(clips, 2, data).expect("sized above");
        Self {
            logits: Matrix::zeros(clips, 2),
            scores,
        }
    }

    pub fn attended_weights(&self) -> Vec<f64> {
        self.scores.column(ATTENDED)
    }

    pub fn unattended_weights(&self) -> Vec<f64> {
        self.scores.column(UNATTENDED)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalityGates {
    pub audio: GateScores,
    pub visual: GateScores,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutput {
    /// `(d_a + d_v) x L`.
    pub fused: Matrix,
    pub trace: AttentionTrace,
    /// Present in DCA mode only.
    pub gates: Option<ModalityGates>,
}

/// `Z = Xa^T W Xv`.
pub fn cross_correlate(
    xa: &FeatureSequence,
    xv: &FeatureSequence,
    w: &Matrix,
) -> Result<Matrix, FusionError> {
    check_pair(xa, xv, w)?;
    let left = matmul(&xa.features().transpose(), w)?;
    Ok(matmul(&left, xv.features())?)
}

/// Column-wise softmax of `Z` (audio) and `Z^T` (visual), temperature 1.
pub fn attention_weights(z: &Matrix) -> Result<(Matrix, Matrix), FusionError> {
    if z.rows() != z.cols() {
        return Err(FusionError::Dimension {
            what: "correlation matrix columns",
            expected: z.rows(),
            found: z.cols(),
        });
    }
    Ok((softmax_cols(z, 1.0)?, softmax_cols(&z.transpose(), 1.0)?))
}

/// Residual attention `X + X A`. Returns `(X A, X + X A)`.
pub fn attend(x: &Matrix, attention: &Matrix) -> Result<(Matrix, Matrix), FusionError> {
    if attention.rows() != x.cols() || attention.cols() != x.cols() {
        return Err(NumError::shape("attend", x, attention).into());
    }
    for c in 0..attention.cols() {
        let sum: f64 = attention.column(c).iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(FusionError::AttentionNotNormalised { col: c, sum });
        }
    }
    let map = matmul(x, attention)?;
    let attended = x.add(&map)?;
    Ok((map, attended))
}

/// Gating layer `Y = Xatt^T W_gl` (no bias).
pub fn gate_logits(attended: &Matrix, gate: &Matrix) -> Result<Matrix, FusionError> {
    if gate.cols() != 2 {
        return Err(FusionError::Dimension {
            what: "gate outputs",
            expected: 2,
            found: gate.cols(),
        });
    }
    if gate.rows() != attended.rows() {
        return Err(NumError::shape("gate_logits", attended, gate).into());
    }
    Ok(matmul(&attended.transpose(), gate)?)
}

/// Row-wise softmax of `logits / temperature`.
pub fn gate_scores(logits: &Matrix, temperature: f64) -> Result<GateScores, FusionError> {
    if logits.cols() != 2 {
        return Err(FusionError::Dimension {
            what: "gate logit columns",
            expected: 2,
            found: logits.cols(),
        });
    }
    let scores = softmax_cols(&logits.transpose(), temperature)?.transpose();
    Ok(GateScores {
        logits: logits.clone(),
        scores,
    })
}

/// `ReLU(X ⊗ G0 + Xatt ⊗ G1)` with the gate columns replicated across the
/// feature rows of each clip.
pub fn dca_combine(
    x: &Matrix,
    attended: &Matrix,
    gates: &GateScores,
) -> Result<Matrix, FusionError> {
    if x.shape() != attended.shape() {
        return Err(NumError::shape("dca_combine", x, attended).into());
    }
    if gates.scores.shape() != (x.cols(), 2) {
        return Err(NumError::shape("dca_combine", x, &gates.scores).into());
    }
    for r in 0..gates.scores.rows() {
        let sum: f64 = gates.scores.row(r).iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(FusionError::GateNotNormalised { row: r, sum });
        }
    }
    let g = gates.scores.transpose();
    let g0 = Matrix::new(1, g.cols(), g.row(UNATTENDED).to_vec())?;
    let g1 = Matrix::new(1, g.cols(), g.row(ATTENDED).to_vec())?;
    let mixed = x
        .mul_row_broadcast(&g0)?
        .add(&attended.mul_row_broadcast(&g1)?)?;
    Ok(mixed.relu())
}

pub fn fuse_forward(
    xa: &FeatureSequence,
    xv: &FeatureSequence,
    params: &FusionParams,
    mode: FusionMode,
) -> Result<FusionOutput, FusionError> {
    fuse(xa, xv, params, mode, None)
}

/// DCA forward pass with externally supplied gate scores in place of the
/// learned gating layers.
pub fn fuse_forward_forced(
    xa: &FeatureSequence,
    xv: &FeatureSequence,
    params: &FusionParams,
    gates: &ModalityGates,
) -> Result<FusionOutput, FusionError> {
    fuse(xa, xv, params, FusionMode::Dca, Some(gates))
}

fn fuse(
    xa: &FeatureSequence,
    xv: &FeatureSequence,
    params: &FusionParams,
    mode: FusionMode,
    forced: Option<&ModalityGates>,
) -> Result<FusionOutput, FusionError> {
    params.validate()?;
    let z = cross_correlate(xa, xv, &params.w)?;
    let (attn_audio, attn_visual) = attention_weights(&z)?;
    let (map_audio, attended_audio) = attend(xa.features(), &attn_audio)?;
    let (map_visual, attended_visual) = attend(xv.features(), &attn_visual)?;
    let trace = AttentionTrace {
        z,
        attn_audio,
        attn_visual,
        map_audio,
        map_visual,
        attended_audio,
        attended_visual,
    };
    match mode {
        FusionMode::Ca => {
            let fused = concat_rows(&trace.attended_audio, &trace.attended_visual)?;
            Ok(FusionOutput {
                fused,
                trace,
                gates: None,
            })
        }
        FusionMode::Dca => {
            let gates = match forced {
                Some(g) => g.clone(),
                None => ModalityGates {
                    audio: gate_scores(
                        &gate_logits(&trace.attended_audio, &params.gate_audio)?,
                        params.temperature,
                    )?,
                    visual: gate_scores(
                        &gate_logits(&trace.attended_visual, &params.gate_visual)?,
                        params.temperature,
                    )?,
                },
            };
            let audio = dca_combine(xa.features(), &trace.attended_audio, &gates.audio)?;
            let visual = dca_combine(xv.features(), &trace.attended_visual, &gates.visual)?;
            Ok(FusionOutput {
                fused: concat_rows(&audio, &visual)?,
                trace,
                gates: Some(gates),
            })
        }
    }
}

/// Regression head: `tanh(head_w · fused + head_b)` per clip, giving
/// `[valence; arousal]` strictly inside `(-1, 1)`.
pub fn predict(
    fused: &Matrix,
    head_w: &Matrix,
    head_b: &Matrix,
) -> Result<EmotionTrack, FusionError> {
    if head_w.rows() != 2 {
        return Err(FusionError::Dimension {
            what: "head outputs",
            expected: 2,
            found: head_w.rows(),
        });
    }
    let out = matmul(head_w, fused)?.add_col_broadcast(head_b)?.tanh();
    Ok(EmotionTrack::from_matrix(&out)?)
}

/// Parameter nodes of a model registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ParamNodes {
    pub w: NodeId,
    pub gate_audio: NodeId,
    pub gate_visual: NodeId,
    pub head_w: NodeId,
    pub head_b: NodeId,
}

impl ParamNodes {
    pub fn register(tape: &mut Tape, params: &FusionParams) -> Self {
        Self {
            w: tape.param(params.w.clone()),
            gate_audio: tape.param(params.gate_audio.clone()),
            gate_visual: tape.param(params.gate_visual.clone()),
            head_w: tape.param(params.head_w.clone()),
            head_b: tape.param(params.head_b.clone()),
        }
    }

    pub fn from_slice(ids: &[NodeId]) -> Self {
        Self {
            w: ids[0],
            gate_audio: ids[1],
            gate_visual: ids[2],
            head_w: ids[3],
            head_b: ids[4],
        }
    }

    pub fn all(&self) -> [NodeId; 5] {
        [
            self.w,
            self.gate_audio,
            self.gate_visual,
            self.head_w,
            self.head_b,
        ]
    }
}

/// Node handles produced by [`fuse_on_tape`].
#[derive(Debug, Clone, Copy)]
pub struct TapeForward {
    pub fused: NodeId,
    /// `2 x L` predictions (rows valence, arousal).
    pub predictions: NodeId,
    /// `(audio, visual)` gate probabilities, transposed to `2 x L`.
    pub gates: Option<(NodeId, NodeId)>,
}

/// Records the full forward pass on `tape`.
pub fn fuse_on_tape(
    tape: &mut Tape,
    params: ParamNodes,
    xa: &FeatureSequence,
    xv: &FeatureSequence,
    mode: FusionMode,
    temperature: f64,
) -> Result<TapeForward, FusionError> {
    check_pair(xa, xv, tape.value(params.w))?;
    let xa_n = tape.constant(xa.features().clone());
    let xv_n = tape.constant(xv.features().clone());

    let xa_t = tape.transpose(xa_n)?;
    let left = tape.matmul(xa_t, params.w)?;
    let z = tape.matmul(left, xv_n)?;
    let attn_a = tape.softmax_cols(z, 1.0)?;
    let z_t = tape.transpose(z)?;
    let attn_v = tape.softmax_cols(z_t, 1.0)?;
    let map_a = tape.matmul(xa_n, attn_a)?;
    let map_v = tape.matmul(xv_n, attn_v)?;
    let att_a = tape.add(xa_n, map_a)?;
    let att_v = tape.add(xv_n, map_v)?;

    let (fused, gates) = match mode {
        FusionMode::Ca => (tape.concat_rows(att_a, att_v)?, None),
        FusionMode::Dca => {
            let (out_a, g_a) = gated_on_tape(tape, xa_n, att_a, params.gate_audio, temperature)?;
            let (out_v, g_v) = gated_on_tape(tape, xv_n, att_v, params.gate_visual, temperature)?;
            (tape.concat_rows(out_a, out_v)?, Some((g_a, g_v)))
        }
    };
    let lin = tape.matmul(params.head_w, fused)?;
    let biased = tape.add_col_broadcast(lin, params.head_b)?;
    let predictions = tape.tanh(biased)?;
    Ok(TapeForward {
        fused,
        predictions,
        gates,
    })
}

fn gated_on_tape(
    tape: &mut Tape,
    x: NodeId,
    attended: NodeId,
    gate: NodeId,
    temperature: f64,
) -> Result<(NodeId, NodeId), FusionError> {
    let att_t = tape.transpose(attended)?;
    let logits = tape.matmul(att_t, gate)?;
    let logits_t = tape.transpose(logits)?;
    // 2 x L: row 0 unattended, row 1 attended
    let g = tape.softmax_cols(logits_t, temperature)?;
    let g0 = tape.row(g, UNATTENDED)?;
    let g1 = tape.row(g, ATTENDED)?;
    let raw = tape.mul_row_broadcast(x, g0)?;
    let att = tape.mul_row_broadcast(attended, g1)?;
    let mixed = tape.add(raw, att)?;
    Ok((tape.relu(mixed)?, g))
}

fn check_pair(xa: &FeatureSequence, xv: &FeatureSequence, w: &Matrix) -> Result<(), FusionError> {
    if xa.clips() != xv.clips() {
        return Err(FusionError::Dimension {
            what: "visual clip count",
            expected: xa.clips(),
            found: xv.clips(),
        });
    }
    if w.rows() != xa.dim() {
        return Err(FusionError::Dimension {
            what: "cross-correlation rows (audio dim)",
            expected: xa.dim(),
            found: w.rows(),
        });
    }
    if w.cols() != xv.dim() {
        return Err(FusionError::Dimension {
            what: "cross-correlation columns (visual dim)",
            expected: xv.dim(),
            found: w.cols(),
        });
    }
    Ok(())
}

mod matrix_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::numcore::Matrix;

    pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> Result<S::Ok, S::Error> {
        m.to_rows().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        Matrix::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}
