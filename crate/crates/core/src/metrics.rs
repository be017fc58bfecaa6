//! Agreement metrics between predicted and reference emotion tracks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numcore::Matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: predictions have {pred} values, reference has {gold}")]
    LengthMismatch { pred: usize, gold: usize },
    #[error("need at least 2 values, got {0}")]
    TooShort(usize),
    #[error("track count mismatch: {pred} predicted vs {gold} reference tracks")]
    TrackCount { pred: usize, gold: usize },
    #[error("valence has {valence} values but arousal has {arousal}")]
    UnevenTrack { valence: usize, arousal: usize },
    #[error("empty track")]
    EmptyTrack,
    #[error("{dimension} value {value} at clip {clip} is outside [-1, 1]")]
    OutOfRange {
        dimension: &'static str,
        clip: usize,
        value: f64,
    },
}

/// Per-clip valence and arousal values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmotionTrack {
    valence: Vec<f64>,
    arousal: Vec<f64>,
}

impl EmotionTrack {
    pub fn new(valence: Vec<f64>, arousal: Vec<f64>) -> Result<Self, MetricsError> {
        if valence.len() != arousal.len() {
            return Err(MetricsError::UnevenTrack {
                valence: valence.len(),
                arousal: arousal.len(),
            });
        }
        if valence.is_empty() {
            return Err(MetricsError::EmptyTrack);
        }
        for (dimension, values) in [("valence", &valence), ("arousal", &arousal)] {
            if let Some((clip, &value)) = values
                .iter()
                .enumerate()
                .find(|(_, v)| !(-1.0..=1.0).contains(*v))
            {
                return Err(MetricsError::OutOfRange {
                    dimension,
                    clip,
                    value,
                });
            }
        }
        Ok(Self { valence, arousal })
    }

    /// Reads a `2 x L` matrix whose rows are valence and arousal.
    pub fn from_matrix(m: &Matrix) -> Result<Self, MetricsError> {
        assert_eq!(m.rows(), 2, "emotion matrix must have two rows");
        Self::new(m.row(0).to_vec(), m.row(1).to_vec())
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_rows(&[&self.valence, &self.arousal]).expect("equal lengths")
    }

    pub fn len(&self) -> usize {
        self.valence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valence.is_empty()
    }

    pub fn valence(&self) -> &[f64] {
        &self.valence
    }

    pub fn arousal(&self) -> &[f64] {
        &self.arousal
    }
}

/// A metric value plus whether the inputs were degenerate (constant), in
/// which case `value` is reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub value: f64,
    pub degenerate: bool,
}

impl Agreement {
    fn degenerate() -> Self {
        Self {
            value: 0.0,
            degenerate: true,
        }
    }
}

const DEGENERATE: f64 = 1e-15;

struct Moments {
    mean_x: f64,
    mean_y: f64,
    var_x: f64,
    var_y: f64,
    cov: f64,
}

// Biased (divide-by-N) estimators throughout.
fn moments(x: &[f64], y: &[f64]) -> Result<Moments, MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch {
            pred: x.len(),
            gold: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(MetricsError::TooShort(x.len()));
    }
    let n = x.len() as f64;
    let mean_x = x.iter().sum::<f64>() / n;
    let mean_y = y.iter().sum::<f64>() / n;
    let (mut var_x, mut var_y, mut cov) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mean_x, b - mean_y);
        var_x += dx * dx;
        var_y += dy * dy;
        cov += dx * dy;
    }
    Ok(Moments {
        mean_x,
        mean_y,
        var_x: var_x / n,
        var_y: var_y / n,
        cov: cov / n,
    })
}

/// Concordance correlation coefficient,
/// `2 s_xy / (s_x^2 + s_y^2 + (mean_x - mean_y)^2)`.
pub fn ccc(pred: &[f64], gold: &[f64]) -> Result<Agreement, MetricsError> {
    let m = moments(pred, gold)?;
    let shift = m.mean_x - m.mean_y;
    let den = m.var_x + m.var_y + shift * shift;
    if den < DEGENERATE {
        return Ok(Agreement::degenerate());
    }
    Ok(Agreement {
        value: (2.0 * m.cov / den).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// Pearson correlation; degenerate when either input is constant.
pub fn pearson(pred: &[f64], gold: &[f64]) -> Result<Agreement, MetricsError> {
    let m = moments(pred, gold)?;
    let den = (m.var_x * m.var_y).sqrt();
    if m.var_x < DEGENERATE || m.var_y < DEGENERATE || den < DEGENERATE {
        return Ok(Agreement::degenerate());
    }
    Ok(Agreement {
        value: (m.cov / den).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// How per-track scores are combined in [`evaluate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Concatenate all tracks, then score once per dimension.
    #[default]
    Concatenated,
    /// Score each track, then average.
    PerTrackMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CccPair {
    pub valence: Agreement,
    pub arousal: Agreement,
}

impl CccPair {
    pub fn mean(&self) -> f64 {
        0.5 * (self.valence.value + self.arousal.value)
    }
}

pub fn evaluate(
    preds: &[EmotionTrack],
    golds: &[EmotionTrack],
    aggregation: Aggregation,
) -> Result<CccPair, MetricsError> {
    if preds.len() != golds.len() {
        return Err(MetricsError::TrackCount {
            pred: preds.len(),
            gold: golds.len(),
        });
    }
    for (p, g) in preds.iter().zip(golds) {
        if p.len() != g.len() {
            return Err(MetricsError::LengthMismatch {
                pred: p.len(),
                gold: g.len(),
            });
        }
    }
    match aggregation {
        Aggregation::Concatenated => {
            let cat = |tracks: &[EmotionTrack], f: fn(&EmotionTrack) -> &[f64]| -> Vec<f64> {
                tracks.iter().flat_map(|t| f(t).iter().copied()).collect()
            };
            Ok(CccPair {
                valence: ccc(
                    &cat(preds, EmotionTrack::valence),
                    &cat(golds, EmotionTrack::valence),
                )?,
                arousal: ccc(
                    &cat(preds, EmotionTrack::arousal),
                    &cat(golds, EmotionTrack::arousal),
                )?,
            })
        }
        Aggregation::PerTrackMean => {
            if preds.is_empty() {
                return Err(MetricsError::TrackCount { pred: 0, gold: 0 });
            }
            let n = preds.len() as f64;
            let (mut v, mut a) = (0.0, 0.0);
            let (mut v_deg, mut a_deg) = (false, false);
            for (p, g) in preds.iter().zip(golds) {
                let cv = ccc(p.valence(), g.valence())?;
                let ca = ccc(p.arousal(), g.arousal())?;
                v += cv.value;
                a += ca.value;
                v_deg |= cv.degenerate;
                a_deg |= ca.degenerate;
            }
            Ok(CccPair {
                valence: Agreement {
                    value: v / n,
                    degenerate: v_deg,
                },
                arousal: Agreement {
                    value: a / n,
                    degenerate: a_deg,
                },
            })
        }
    }
}
