//! Softmax attention block with residual FFN, and the two-head pair detector.

use serde::{Deserialize, Serialize};

use super::{check_unit, max_abs_dot, Matrix, TheoryError, Vector};

/// A d×d map kept in the cheapest exact form.
#[derive(Debug, Clone, PartialEq)]
pub enum LinearMap {
    Zero,
    ScaledIdentity(f64),
    /// `left * right^T`, both d×r.
    LowRank { left: Matrix, right: Matrix },
    Dense(Matrix),
}

impl LinearMap {
    pub fn identity() -> Self {
        Self::ScaledIdentity(1.0)
    }

    pub fn apply(&self, x: &Vector) -> Vector {
        match self {
            Self::Zero => Vector::zeros(x.len()),
            Self::ScaledIdentity(g) => x * *g,
            Self::LowRank { left, right } => left * (right.transpose() * x),
            Self::Dense(m) => m * x,
        }
    }

    pub fn to_dense(&self, d: usize) -> Matrix {
        match self {
            Self::Zero => Matrix::zeros(d, d),
            Self::ScaledIdentity(g) => Matrix::identity(d, d) * *g,
            Self::LowRank { left, right } => left * right.transpose(),
            Self::Dense(m) => m.clone(),
        }
    }

    fn check_dim(&self, d: usize) -> Result<(), TheoryError> {
        let got = match self {
            Self::Zero | Self::ScaledIdentity(_) => return Ok(()),
            Self::LowRank { left, right } => {
                if left.ncols() != right.ncols() || right.nrows() != d {
                    return Err(TheoryError::Dimension {
                        expected: d,
                        got: right.nrows(),
                    });
                }
                left.nrows()
            }
            Self::Dense(m) => {
                if m.ncols() != d {
                    return Err(TheoryError::Dimension {
                        expected: d,
                        got: m.ncols(),
                    });
                }
                m.nrows()
            }
        };
        if got != d {
            return Err(TheoryError::Dimension { expected: d, got });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub w_kq: LinearMap,
    pub w_ov: LinearMap,
}

/// One block: H heads, then `FFN(v) = W_F2 ReLU(W_F1 v - b)`, then the
/// residual.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub dim: usize,
    pub heads: Vec<Head>,
    /// d_f × (H·d)
    pub w_f1: Matrix,
    pub b: Vector,
    /// d × d_f
    pub w_f2: Matrix,
    /// Attention sharpness used by the construction; informational.
    pub gamma: f64,
}

impl LayerWeights {
    pub fn validate(&self) -> Result<(), TheoryError> {
        let d = self.dim;
        for h in &self.heads {
            h.w_kq.check_dim(d)?;
            h.w_ov.check_dim(d)?;
        }
        let hd = self.heads.len() * d;
        let df = self.b.len();
        if self.w_f1.ncols() != hd {
            return Err(TheoryError::Dimension {
                expected: hd,
                got: self.w_f1.ncols(),
            });
        }
        if self.w_f1.nrows() != df || self.w_f2.ncols() != df {
            return Err(TheoryError::Dimension {
                expected: df,
                got: self.w_f1.nrows().max(self.w_f2.ncols()),
            });
        }
        if self.w_f2.nrows() != d {
            return Err(TheoryError::Dimension {
                expected: d,
                got: self.w_f2.nrows(),
            });
        }
        if !(self.gamma > 0.0) {
            return Err(TheoryError::Domain(format!("gamma must be positive, got {}", self.gamma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockTrace {
    pub output: Vec<Vector>,
    /// `[position][head]` attention rows over positions `0..=position`.
    pub attention: Vec<Vec<Vec<f64>>>,
    /// FFN hidden activations after ReLU, per position.
    pub hidden: Vec<Vector>,
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Causal evaluation: position t attends over 0..=t with query φ_t.
pub fn forward_block(weights: &LayerWeights, features: &[Vector]) -> Result<BlockTrace, TheoryError> {
    weights.validate()?;
    let d = weights.dim;
    if let Some(f) = features.iter().find(|f| f.len() != d) {
        return Err(TheoryError::Dimension { expected: d, got: f.len() });
    }
    let n_heads = weights.heads.len();
    let mut out = BlockTrace {
        output: Vec::with_capacity(features.len()),
        attention: Vec::with_capacity(features.len()),
        hidden: Vec::with_capacity(features.len()),
    };
    for t in 0..features.len() {
        let mut v = Vector::zeros(n_heads * d);
        let mut rows = Vec::with_capacity(n_heads);
        for (h, head) in weights.heads.iter().enumerate() {
            let q = head.w_kq.apply(&features[t]);
            let scores: Vec<f64> = features[..=t].iter().map(|k| k.dot(&q)).collect();
            let a = softmax(&scores);
            let mut mix = Vector::zeros(d);
            for (w, k) in a.iter().zip(&features[..=t]) {
                mix.axpy(*w, k, 1.0);
            }
            v.rows_mut(h * d, d).copy_from(&head.w_ov.apply(&mix));
            rows.push(a);
        }
        let hidden = (&weights.w_f1 * &v - &weights.b).map(|x| x.max(0.0));
        out.output.push(&features[t] + &weights.w_f2 * &hidden);
        out.attention.push(rows);
        out.hidden.push(hidden);
    }
    Ok(out)
}

/// Two-head block whose single hidden unit fires at positions where `x2`
/// occurs with an earlier `x1`.
///
/// Head 1 uses `W_KQ = γ φ(x1) φ(x2)^T`; head 2 is a sharp copy head
/// `W_KQ = γ I` so that its output is φ(x_t) up to exponentially small
/// leakage. The hidden unit reads `concat(φ(x1), φ(x2)) / (1 - ε)` with bias
/// `(1 + ε) / (1 - ε)`, which places the absent case at or below zero and the
/// present case at one.
pub fn build_pair_detector(
    x1: usize,
    x2: usize,
    emb: &[Vector],
    gamma: f64,
    eps: f64,
    out_vec: &Vector,
) -> Result<LayerWeights, TheoryError> {
    if x1 == x2 {
        return Err(TheoryError::Domain("detector tokens must differ".into()));
    }
    if !(eps > 0.0 && eps < 1.0) || !(gamma > 0.0) {
        return Err(TheoryError::Domain(format!("gamma {gamma}, eps {eps}")));
    }
    let (Some(p1), Some(p2)) = (emb.get(x1), emb.get(x2)) else {
        return Err(TheoryError::Domain(format!("token outside a vocabulary of {}", emb.len())));
    };
    let d = p1.len();
    for (i, e) in emb.iter().enumerate() {
        if e.len() != d {
            return Err(TheoryError::Dimension { expected: d, got: e.len() });
        }
        check_unit(e, || format!("token {i}"))?;
    }
    check_unit(out_vec, || "out_vec".into())?;
    let m = max_abs_dot(&Matrix::from_columns(emb));
    if m >= eps {
        return Err(TheoryError::NotOrthogonal { eps, max_abs_dot: m });
    }
    let scale = 1.0 / (1.0 - eps);
    let mut w_f1 = Matrix::zeros(1, 2 * d);
    w_f1.view_mut((0, 0), (1, d)).copy_from(&(p1.transpose() * scale));
    w_f1.view_mut((0, d), (1, d)).copy_from(&(p2.transpose() * scale));
    Ok(LayerWeights {
        dim: d,
        heads: vec![
            Head {
                w_kq: LinearMap::LowRank {
                    left: Matrix::from_column_slice(d, 1, (p1 * gamma).as_slice()),
                    right: Matrix::from_column_slice(d, 1, p2.as_slice()),
                },
                w_ov: LinearMap::identity(),
            },
            Head {
                w_kq: LinearMap::ScaledIdentity(gamma),
                w_ov: LinearMap::identity(),
            },
        ],
        w_f1,
        b: Vector::from_element(1, (1.0 + eps) * scale),
        w_f2: Matrix::from_column_slice(d, 1, out_vec.as_slice()),
        gamma,
    })
}

/// Worst-case detector error for sequences of length `n` whose token
/// embeddings are pairwise below `eps` in `|dot|`: returns
/// `(present_floor, absent_ceiling)` for the maximum hidden activation.
///
/// Attention mass leaking off the matching positions is at most
/// `w = (n-1) exp(-γ(1-ε))` per head. Present: each head's projection is at
/// least `1 - w(1+ε)`, so the activation is at least `1 - 2w(1+ε)/(1-ε)`.
/// Absent with `x_t = x2`: head 1 projects below ε and the activation is 0.
/// Absent with `x_t ≠ x2`: head 2 projects below `ε + w`, giving at most
/// `w/(1-ε)`.
pub fn pair_detector_bound(n: usize, gamma: f64, eps: f64) -> (f64, f64) {
    let w = n.saturating_sub(1) as f64 * (-gamma * (1.0 - eps)).exp();
    (1.0 - 2.0 * w * (1.0 + eps) / (1.0 - eps), w / (1.0 - eps))
}

/// Detector output summary for one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorRun {
    pub present: bool,
    pub max_activation: f64,
}

/// Run a single-hidden-unit detector on a token sequence.
pub fn run_detector(weights: &LayerWeights, emb: &[Vector], seq: &[usize], x1: usize, x2: usize) -> Result<DetectorRun, TheoryError> {
    let feats: Vec<Vector> = seq.iter().map(|&x| emb[x].clone()).collect();
    let trace = forward_block(weights, &feats)?;
    let max_activation = trace.hidden.iter().map(|h| h[0]).fold(0.0, f64::max);
    let present = seq
        .iter()
        .position(|&x| x == x1)
        .is_some_and(|i| seq[i + 1..].contains(&x2));
    Ok(DetectorRun { present, max_activation })
}
