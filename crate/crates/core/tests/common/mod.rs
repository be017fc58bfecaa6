//! Helpers shared by the integration tests. Oracles here use nested `Vec`s
//! and textbook formulas only, never the crate's own kernels.
#![allow(dead_code)]

use dca_core::fusion::{FeatureSequence, FusionMode, FusionParams, Modality};
use dca_core::metrics::EmotionTrack;
use dca_core::numcore::Matrix;
use dca_core::synthdata::{CorruptionMask, LabeledSequence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Grid = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    Matrix::new(rows, cols, data).unwrap()
}

pub fn random_pair(
    rng: &mut ChaCha8Rng,
    d_a: usize,
    d_v: usize,
    clips: usize,
) -> (FeatureSequence, FeatureSequence) {
    (
        FeatureSequence::new(Modality::Audio, random_matrix(rng, d_a, clips, 1.0)).unwrap(),
        FeatureSequence::new(Modality::Visual, random_matrix(rng, d_v, clips, 1.0)).unwrap(),
    )
}

/// Parameters with every entry uniform in `(-scale, scale)`.
pub fn random_params(
    rng: &mut ChaCha8Rng,
    d_a: usize,
    d_v: usize,
    scale: f64,
    temperature: f64,
) -> FusionParams {
    FusionParams {
        w: random_matrix(rng, d_a, d_v, scale),
        gate_audio: random_matrix(rng, d_a, 2, scale),
        gate_visual: random_matrix(rng, d_v, 2, scale),
        head_w: random_matrix(rng, 2, d_a + d_v, scale),
        head_b: random_matrix(rng, 2, 1, scale),
        temperature,
    }
}

pub fn grid(m: &Matrix) -> Grid {
    (0..m.rows())
        .map(|r| (0..m.cols()).map(|c| m.get(r, c)).collect())
        .collect()
}

pub fn naive_matmul(a: &Grid, b: &Grid) -> Grid {
    let n = a.len();
    let k = b.len();
    let m = if k == 0 { 0 } else { b[0].len() };
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i][p] * b[p][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn transpose(a: &Grid) -> Grid {
    if a.is_empty() {
        return Vec::new();
    }
    (0..a[0].len())
        .map(|j| a.iter().map(|row| row[j]).collect())
        .collect()
}

/// Column softmax straight from the definition, no max shift.
pub fn naive_softmax_cols(z: &Grid, t: f64) -> Grid {
    let rows = z.len();
    let cols = z[0].len();
    let mut out = vec![vec![0.0; cols]; rows];
    for j in 0..cols {
        let denom: f64 = (0..rows).map(|i| (z[i][j] / t).exp()).sum();
        for i in 0..rows {
            out[i][j] = (z[i][j] / t).exp() / denom;
        }
    }
    out
}

pub fn max_abs_diff(a: &Grid, b: &Matrix) -> f64 {
    assert_eq!((a.len(), a.first().map_or(0, |r| r.len())), b.shape());
    let mut worst = 0.0f64;
    for (r, row) in a.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            worst = worst.max((v - b.get(r, c)).abs());
        }
    }
    worst
}

/// Biased-moment CCC written out term by term.
pub fn brute_ccc(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mut mx = 0.0;
    let mut my = 0.0;
    for i in 0..x.len() {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    let mut vx = 0.0;
    let mut vy = 0.0;
    let mut cxy = 0.0;
    for i in 0..x.len() {
        vx += (x[i] - mx) * (x[i] - mx);
        vy += (y[i] - my) * (y[i] - my);
        cxy += (x[i] - mx) * (y[i] - my);
    }
    vx /= n;
    vy /= n;
    cxy /= n;
    2.0 * cxy / (vx + vy + (mx - my) * (mx - my))
}

/// Ridge regression with an unpenalised intercept, solved by Gaussian
/// elimination on the normal equations. Returns `(weights, intercept)`.
pub fn ridge_fit(rows: &[Vec<f64>], targets: &[f64], lambda: f64) -> (Vec<f64>, f64) {
    let d = rows[0].len();
    let k = d + 1;
    let mut a = vec![vec![0.0; k + 1]; k];
    for (x, &y) in rows.iter().zip(targets) {
        let aug: Vec<f64> = x.iter().copied().chain([1.0]).collect();
        for i in 0..k {
            for j in 0..k {
                a[i][j] += aug[i] * aug[j];
            }
            a[i][k] += aug[i] * y;
        }
    }
    for (i, row) in a.iter_mut().enumerate().take(d) {
        row[i] += lambda;
    }
    for col in 0..k {
        let pivot = (col..k)
            .max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        for r in 0..k {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..=k {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    let sol: Vec<f64> = (0..k).map(|i| a[i][k] / a[i][i]).collect();
    (sol[..d].to_vec(), sol[d])
}

pub fn ridge_predict(w: &[f64], b: f64, x: &[f64]) -> f64 {
    w.iter().zip(x).map(|(u, v)| u * v).sum::<f64>() + b
}

/// Straight-line forward pass: cross-correlation, column softmax of Z and
/// Z^T, residual attention, per-modality gate logits, temperature softmax
/// per clip, gate columns replicated down the feature rows, ReLU, row
/// concatenation, then `tanh(head_w f + head_b)`.
pub struct Oracle {
    pub fused: Grid,
    pub predictions: Grid,
}

pub fn oracle(xa: &Grid, xv: &Grid, p: &FusionParams, mode: FusionMode) -> Oracle {
    let w = grid(&p.w);
    let l = xa[0].len();
    let z = naive_matmul(&naive_matmul(&transpose(xa), &w), xv);
    let a_a = naive_softmax_cols(&z, 1.0);
    let a_v = naive_softmax_cols(&transpose(&z), 1.0);

    let attend = |x: &Grid, a: &Grid| -> Grid {
        let hat = naive_matmul(x, a);
        x.iter()
            .zip(&hat)
            .map(|(xr, hr)| xr.iter().zip(hr).map(|(u, v)| u + v).collect())
            .collect()
    };
    let att_a = attend(xa, &a_a);
    let att_v = attend(xv, &a_v);

    let gated = |x: &Grid, att: &Grid, gate: &Grid| -> Grid {
        let y = naive_matmul(&transpose(att), gate);
        let d = x.len();
        let mut g0_rep = vec![vec![0.0; l]; d];
        let mut g1_rep = vec![vec![0.0; l]; d];
        for clip in 0..l {
            let e0 = (y[clip][0] / p.temperature).exp();
            let e1 = (y[clip][1] / p.temperature).exp();
            for r in 0..d {
                g0_rep[r][clip] = e0 / (e0 + e1);
                g1_rep[r][clip] = e1 / (e0 + e1);
            }
        }
        (0..d)
            .map(|r| {
                (0..l)
                    .map(|c| (x[r][c] * g0_rep[r][c] + att[r][c] * g1_rep[r][c]).max(0.0))
                    .collect()
            })
            .collect()
    };

    let (top, bottom) = match mode {
        FusionMode::Ca => (att_a, att_v),
        FusionMode::Dca => (
            gated(xa, &att_a, &grid(&p.gate_audio)),
            gated(xv, &att_v, &grid(&p.gate_visual)),
        ),
    };
    let fused: Grid = top.into_iter().chain(bottom).collect();
    let head_w = grid(&p.head_w);
    let mut predictions = naive_matmul(&head_w, &fused);
    for (k, row) in predictions.iter_mut().enumerate() {
        for v in row.iter_mut() {
            *v = (*v + p.head_b.get(k, 0)).tanh();
        }
    }
    Oracle { fused, predictions }
}

pub const AWKWARD: [f64; 6] = [
    -0.0,
    5e-324,
    -2.2250738585072014e-308,
    f64::MAX,
    f64::MIN,
    1.0 / 3.0,
];

/// Small dataset of random shape, with a sprinkling of extreme and signed-zero
/// entries.
pub fn random_dataset(seed: u64) -> Vec<LabeledSequence> {
    let mut r = rng(seed);
    let (d_a, d_v, clips) = (
        r.random_range(1..6),
        r.random_range(1..6),
        r.random_range(1..8),
    );
    let n = r.random_range(0..5);
    let entry = |r: &mut rand_chacha::ChaCha8Rng| {
        if r.random_bool(0.1) {
            AWKWARD[r.random_range(0..AWKWARD.len())]
        } else {
            r.random_range(-1e3..1e3)
        }
    };
    (0..n)
        .map(|_| {
            let mut m = |rows| {
                let data = (0..rows * clips).map(|_| entry(&mut r)).collect();
                Matrix::new(rows, clips, data).unwrap()
            };
            let xa = FeatureSequence::new(Modality::Audio, m(d_a)).unwrap();
            let xv = FeatureSequence::new(Modality::Visual, m(d_v)).unwrap();
            let mut label = || {
                (0..clips)
                    .map(|_| r.random_range(-1.0..=1.0))
                    .collect::<Vec<f64>>()
            };
            let labels = EmotionTrack::new(label(), label()).unwrap();
            let mask = CorruptionMask {
                audio: (0..clips).map(|_| r.random_bool(0.3)).collect(),
                visual: (0..clips).map(|_| r.random_bool(0.3)).collect(),
            };
            LabeledSequence {
                xa,
                xv,
                labels,
                mask,
            }
        })
        .collect()
}

pub fn bits(m: &Matrix) -> Vec<u64> {
    m.data().iter().map(|v| v.to_bits()).collect()
}

pub fn assert_bitwise(a: &[LabeledSequence], b: &[LabeledSequence]) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert_eq!(bits(x.xa.features()), bits(y.xa.features()));
        assert_eq!(bits(x.xv.features()), bits(y.xv.features()));
        assert_eq!(bits(&x.labels.to_matrix()), bits(&y.labels.to_matrix()));
        assert_eq!(x.mask, y.mask);
    }
}
