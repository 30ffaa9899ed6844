//! Gradient bound for a one-layer linear-attention model whose position
//! features are exact dictionary sums (`μ = 1`).
//!
//! With `g_i(y) = p̂(y | s_i) - 1{y = y_i}` and `occ_i(s̃) = #{t : s̃ ∈ Sub(s_i, t)}`,
//! the cross-entropy gradient attributed to item `s̃` and output `y` is
//!
//! ```text
//! Δ_OV(s̃, y) = ω̂(s̃)      · G,   ω̂(s̃)    = φ(s̃)ᵀ W_KQ φ_∅
//! Δ_KQ(s̃, y) = Ψ̂(y, s̃)   · G,   Ψ̂(y, s̃) = φ(y)ᵀ W_OV φ(s̃)
//! G          = (1/N) Σ_i occ_i(s̃) g_i(y)
//! ```
//!
//! and `|Δ_OV| + |Δ_KQ| <= τ_dp (‖W_OV‖₂ + ‖W_KQ‖₂) P̂(s̃ ⊑ s) |gap|`, where `gap` is
//! `G` normalized by the total occurrence count.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::embedder::EmbeddingBook;
use super::logit::{in_sub, FeatureMap, LinAttnModel};
use super::{Matrix, TheoryError, Vector};
use crate::seq::{match_end, SubSeq, TokenId};

/// Step for the five-point central difference.
pub const FD_STEP: f64 = 1e-3;
/// Relative agreement required between analytic and numeric derivatives.
/// The stencil's truncation error is O(h^4) ~ 1e-12 at unit curvature, and
/// cancellation costs about 1e-13 / h, so 1e-5 leaves ample margin.
pub const FD_REL_TOL: f64 = 1e-5;
/// Absolute floor for derivatives that are zero analytically.
pub const FD_ABS_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub pattern: SubSeq,
    pub y: TokenId,
    #[serde(with = "crate::sig17")]
    pub delta_ov: f64,
    #[serde(with = "crate::sig17")]
    pub delta_kq: f64,
    #[serde(with = "crate::sig17")]
    pub lhs: f64,
    #[serde(with = "crate::sig17")]
    pub rhs: f64,
    pub holds: bool,
    /// Fraction of sequences containing the pattern.
    #[serde(with = "crate::sig17")]
    pub p_contain: f64,
    #[serde(with = "crate::sig17")]
    pub gap: f64,
    pub occurrences: usize,
    pub tau_dp: usize,
    #[serde(with = "crate::sig17")]
    pub norm_ov: f64,
    #[serde(with = "crate::sig17")]
    pub norm_kq: f64,
    #[serde(with = "crate::sig17")]
    pub fd_ov: f64,
    #[serde(with = "crate::sig17")]
    pub fd_kq: f64,
    /// `Σ_s̃ Δ_OV(s̃, y)` and the derivative of the loss along the weight
    /// direction that shifts every `Ψ̄_t(y)` by one.
    #[serde(with = "crate::sig17")]
    pub sum_ov: f64,
    #[serde(with = "crate::sig17")]
    pub fd_sum_ov: f64,
    /// `Σ_{s̃, y'} Δ_KQ(s̃, y')` and the derivative along the weight
    /// direction that shifts every `ω̄_t` by one.
    #[serde(with = "crate::sig17")]
    pub sum_kq: f64,
    #[serde(with = "crate::sig17")]
    pub fd_sum_kq: f64,
    pub fd_ok: bool,
}

impl GradientCheck {
    /// Largest relative analytic/numeric disagreement in the check.
    pub fn fd_error(&self) -> f64 {
        [
            (self.delta_ov, self.fd_ov),
            (self.delta_kq, self.fd_kq),
            (self.sum_ov, self.fd_sum_ov),
            (self.sum_kq, self.fd_sum_kq),
        ]
        .iter()
        .map(|&(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(FD_ABS_TOL / FD_REL_TOL))
        .fold(0.0, f64::max)
    }
}

fn fd_agrees(a: f64, n: f64) -> bool {
    (a - n).abs() <= FD_REL_TOL * a.abs().max(n.abs()) + FD_ABS_TOL
}

fn spectral_norm(m: &Matrix) -> f64 {
    m.clone().svd(false, false).singular_values.max()
}

fn five_point(f: impl Fn(f64) -> Result<f64, TheoryError>) -> Result<f64, TheoryError> {
    let h = FD_STEP;
    Ok((-f(2.0 * h)? + 8.0 * f(h)? - 8.0 * f(-h)? + f(-2.0 * h)?) / (12.0 * h))
}

fn log_softmax_at(logits: &[f64], k: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    logits[k] - m - z.ln()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

struct Prepared<'a> {
    model: &'a LinAttnModel,
    data: &'a [(Vec<TokenId>, TokenId)],
    vocab: Vec<TokenId>,
    items: Vec<SubSeq>,
    label_idx: Vec<usize>,
    logits: Vec<Vec<f64>>,
}

impl<'a> Prepared<'a> {
    fn new(model: &'a LinAttnModel, data: &'a [(Vec<TokenId>, TokenId)]) -> Result<Self, TheoryError> {
        model.validate()?;
        if !matches!(model.features, FeatureMap::Tokens | FeatureMap::Dictionary(_)) {
            return Err(TheoryError::Precondition(
                "gradient check needs tokens or an exact dictionary feature map".into(),
            ));
        }
        if data.is_empty() {
            return Err(TheoryError::Domain("empty dataset".into()));
        }
        let vocab = model.vocab();
        let items = model.items();
        if items.len() > model.book.dim() {
            return Err(TheoryError::Precondition(format!(
                "{} items cannot be linearly independent in {} dimensions",
                items.len(),
                model.book.dim()
            )));
        }
        if let Some(a) = items.iter().find(|a| a.len() > 1 && a.last() == Some(&model.end_token)) {
            return Err(TheoryError::Precondition(format!("item {a} ends with the end token")));
        }
        let mut label_idx = Vec::with_capacity(data.len());
        for (s, y) in data {
            if s.last() != Some(&model.end_token) {
                return Err(TheoryError::Precondition("sequence does not end with the end token".into()));
            }
            for t in s {
                if s.iter().filter(|u| *u == t).count() > model.tau_dp {
                    return Err(TheoryError::Precondition(format!("token {t} repeats more than tau_dp times")));
                }
            }
            let k = vocab
                .iter()
                .position(|v| v == y)
                .ok_or_else(|| TheoryError::MissingEmbedding(SubSeq::from([*y])))?;
            label_idx.push(k);
        }
        let logits = data.iter().map(|(s, _)| model.logits(s)).collect::<Result<_, _>>()?;
        Ok(Self {
            model,
            data,
            vocab,
            items,
            label_idx,
            logits,
        })
    }

    fn loss_with(&self, shift: impl Fn(usize, usize) -> f64) -> f64 {
        let n = self.data.len() as f64;
        self.logits
            .iter()
            .zip(&self.label_idx)
            .enumerate()
            .map(|(i, (l, &k))| {
                let shifted: Vec<f64> = l.iter().enumerate().map(|(j, v)| v + shift(i, j)).collect();
                -log_softmax_at(&shifted, k)
            })
            .sum::<f64>()
            / n
    }

    /// Mean loss of a model with different weights, recomputed end to end.
    fn loss_of(&self, model: &LinAttnModel) -> Result<f64, TheoryError> {
        let n = self.data.len() as f64;
        let mut total = 0.0;
        for ((s, _), &k) in self.data.iter().zip(&self.label_idx) {
            total -= log_softmax_at(&model.logits(s)?, k);
        }
        Ok(total / n)
    }

    /// Dual vector `c` with `cᵀ φ(a) = weights[a]` over all items.
    fn dual(&self, weights: impl Fn(&SubSeq) -> f64) -> Result<Vector, TheoryError> {
        let cols: Vec<Vector> = self
            .items
            .iter()
            .map(|a| self.model.book.expect(a).cloned())
            .collect::<Result<_, _>>()?;
        let a = Matrix::from_columns(&cols);
        let w = Vector::from_iterator(self.items.len(), self.items.iter().map(weights));
        let gram = a.transpose() * &a;
        let coef = gram
            .lu()
            .solve(&w)
            .ok_or_else(|| TheoryError::Precondition("item embeddings are linearly dependent".into()))?;
        Ok(a * coef)
    }
}

/// Occurrences of `pattern` as an item ending at some position: every
/// position at or after its first completion that holds its last token.
fn occurrences(pattern: &[TokenId], s: &[TokenId]) -> usize {
    let Some(end) = match_end(pattern, s) else {
        return 0;
    };
    let last = pattern[pattern.len() - 1];
    s[end - 1..].iter().filter(|&&t| t == last).count()
}

pub fn gradient_bound_check(
    model: &LinAttnModel,
    data: &[(Vec<TokenId>, TokenId)],
    pattern: &[TokenId],
    y: TokenId,
) -> Result<GradientCheck, TheoryError> {
    let prep = Prepared::new(model, data)?;
    gradient_check_prepared(&prep, pattern, y)
}

/// Run the check for every item and every output token.
pub fn gradient_bound_check_all(model: &LinAttnModel, data: &[(Vec<TokenId>, TokenId)]) -> Result<Vec<GradientCheck>, TheoryError> {
    let prep = Prepared::new(model, data)?;
    let mut out = Vec::new();
    for a in &prep.items {
        for &y in &prep.vocab {
            out.push(gradient_check_prepared(&prep, a, y)?);
        }
    }
    Ok(out)
}

fn gradient_check_prepared(prep: &Prepared<'_>, pattern: &[TokenId], y: TokenId) -> Result<GradientCheck, TheoryError> {
    let model = prep.model;
    let pattern = SubSeq::from(pattern);
    if !prep.items.contains(&pattern) {
        return Err(TheoryError::MissingEmbedding(pattern));
    }
    let yk = prep
        .vocab
        .iter()
        .position(|&v| v == y)
        .ok_or_else(|| TheoryError::MissingEmbedding(SubSeq::from([y])))?;
    let n = prep.data.len() as f64;
    let phi_p = model.book.expect(&pattern)?;
    let phi_end = model.book.token(model.end_token)?;
    let phi_y = model.book.token(y)?;
    let omega_hat = phi_p.dot(&(&model.w_kq * phi_end));
    let psi_hat = phi_y.dot(&(&model.w_ov * phi_p));

    let probs: Vec<Vec<f64>> = prep.logits.iter().map(|l| softmax(l)).collect();
    let g = |i: usize, k: usize| probs[i][k] - if prep.label_idx[i] == k { 1.0 } else { 0.0 };

    let occ: Vec<usize> = prep.data.iter().map(|(s, _)| occurrences(&pattern, s)).collect();
    let total_occ: usize = occ.iter().sum();
    let containing = occ.iter().filter(|&&o| o > 0).count();
    let weighted: f64 = occ.iter().enumerate().map(|(i, &o)| o as f64 * g(i, yk)).sum();
    let big_g = weighted / n;
    let gap = if total_occ == 0 { 0.0 } else { weighted / total_occ as f64 };

    let delta_ov = omega_hat * big_g;
    let delta_kq = psi_hat * big_g;
    let norm_ov = spectral_norm(&model.w_ov);
    let norm_kq = spectral_norm(&model.w_kq);
    let p_contain = containing as f64 / n;
    let lhs = delta_ov.abs() + delta_kq.abs();
    let rhs = model.tau_dp as f64 * (norm_ov + norm_kq) * p_contain * gap.abs();

    // Per-term derivatives: shift logit y of each sequence by h times the
    // term's factor for every position whose Sub set holds the pattern,
    // counted position by position.
    let kappa: Vec<f64> = prep
        .data
        .iter()
        .map(|(s, _)| (0..s.len()).filter(|&t| in_sub(&pattern, s, t)).count() as f64)
        .collect();
    let fd_term = |factor: f64| {
        five_point(|h| Ok(prep.loss_with(|i, j| if j == yk { h * kappa[i] * factor } else { 0.0 })))
    };
    let fd_ov = fd_term(omega_hat)?;
    let fd_kq = fd_term(psi_hat)?;

    // Sum rules through genuine weight perturbations.
    let c = prep.dual(|a| if a.len() == 1 { 1.0 } else { 0.0 })?;
    let a_y = prep.dual(|a| if a.len() == 1 && a[0] == y { 1.0 } else { 0.0 })?;
    let dir_ov = &a_y * c.transpose();
    let dir_kq = &c * phi_end.transpose();
    let fd_sum_ov = five_point(|h| {
        let mut m = model.clone();
        m.w_ov += h * &dir_ov;
        prep.loss_of(&m)
    })?;
    let fd_sum_kq = five_point(|h| {
        let mut m = model.clone();
        m.w_kq += h * &dir_kq;
        prep.loss_of(&m)
    })?;

    let mut sum_ov = 0.0;
    let mut sum_kq = 0.0;
    for a in &prep.items {
        let phi_a = model.book.expect(a)?;
        let w_a = phi_a.dot(&(&model.w_kq * phi_end));
        let ov_a = &model.w_ov * phi_a;
        for (i, (s, _)) in prep.data.iter().enumerate() {
            let o = occurrences(a, s) as f64;
            if o == 0.0 {
                continue;
            }
            sum_ov += o * g(i, yk) * w_a / n;
            for (k, &yy) in prep.vocab.iter().enumerate() {
                sum_kq += o * g(i, k) * model.book.token(yy)?.dot(&ov_a) / n;
            }
        }
    }

    let fd_ok = fd_agrees(delta_ov, fd_ov)
        && fd_agrees(delta_kq, fd_kq)
        && fd_agrees(sum_ov, fd_sum_ov)
        && fd_agrees(sum_kq, fd_sum_kq);
    Ok(GradientCheck {
        pattern,
        y,
        delta_ov,
        delta_kq,
        lhs,
        rhs,
        holds: lhs <= rhs * (1.0 + 1e-9),
        p_contain,
        gap,
        occurrences: total_occ,
        tau_dp: model.tau_dp,
        norm_ov,
        norm_kq,
        fd_ov,
        fd_kq,
        sum_ov,
        fd_sum_ov,
        sum_kq,
        fd_sum_kq,
        fd_ok,
    })
}

/// One training sequence and its next token.
pub type Example = (Vec<TokenId>, TokenId);

/// Small random instance: up to 8 tokens (the last one is the end token),
/// up to three composite dictionary items, sequences of length at most 6 and
/// at most 32 examples.
pub fn random_instance(seed: u64) -> Result<(LinAttnModel, Vec<Example>), TheoryError> {
    const DIM: usize = 24;
    let mut rng = crate::rng_from_seed(seed);
    let v: TokenId = rng.random_range(3..=8);
    let end = v - 1;
    let mut dict: Vec<SubSeq> = Vec::new();
    for _ in 0..rng.random_range(0..=3) {
        let len = rng.random_range(2..=3);
        let item: SubSeq = (0..len).map(|_| rng.random_range(0..end)).collect();
        if !dict.contains(&item) {
            dict.push(item);
        }
    }
    let items = (0..v).map(|t| SubSeq::from([t])).chain(dict.iter().cloned());
    let book = EmbeddingBook::sample(items, DIM, 0.9, rng.random(), 1000)?;
    let n = rng.random_range(2..=6);
    let count = rng.random_range(4..=32);
    let data: Vec<Example> = (0..count)
        .map(|_| {
            let mut s: Vec<TokenId> = (0..n - 1).map(|_| rng.random_range(0..end)).collect();
            s.push(end);
            (s, rng.random_range(0..v))
        })
        .collect();
    let tau_dp = data
        .iter()
        .flat_map(|(s, _)| s.iter().map(move |t| s.iter().filter(|u| *u == t).count()))
        .max()
        .unwrap_or(1);
    let scale = 1.0 / (DIM as f64).sqrt();
    let mut gauss = || Matrix::from_fn(DIM, DIM, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
    let w_kq = gauss();
    let w_ov = gauss();
    Ok((
        LinAttnModel {
            book,
            w_kq,
            w_ov,
            end_token: end,
            tau_dp,
            features: FeatureMap::Dictionary(dict),
        },
        data,
    ))
}
