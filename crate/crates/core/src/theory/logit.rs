//! Linear-attention logit layer and its decomposition into per-subsequence
//! association terms.
//!
//! `f(s, y) = Σ_t Ψ̄_t(y) ω̄_t` with `Ψ̄_t(y) = φ(y)ᵀ W_OV φ_t` and
//! `ω̄_t = φ_tᵀ W_KQ φ_n`. Expanding each φ_t over a dictionary gives
//! `f ≈ Σ_s̃ Ψ̂(y, s̃) ω(s̃)` with `Ψ̂(y, s̃) = φ(y)ᵀ W_OV φ(s̃)` and
//! `ω(s̃) = Σ_t μ_{t,s̃} ω̄_t`, the attention weight each item collects.

use serde::{Deserialize, Serialize};

use super::embedder::{least_squares, EmbeddingBook, SubseqEmbedder};
use super::{Matrix, TheoryError, Vector};
use crate::seq::{is_subsequence, SubSeq, TokenId};

/// How position features are produced from tokens.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureMap {
    /// `φ_t = φ(x_t)`.
    Tokens,
    /// `φ_t = Σ φ(a)` over the token `x_t` and every listed item in
    /// `Sub(s, t)`, all with unit coefficient.
    Dictionary(Vec<SubSeq>),
    /// Constructed embedder network.
    Net(Box<SubseqEmbedder>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinAttnModel {
    pub book: EmbeddingBook,
    pub w_kq: Matrix,
    pub w_ov: Matrix,
    /// Token every training sequence ends with.
    pub end_token: TokenId,
    /// Largest count of one token within one sequence.
    pub tau_dp: usize,
    pub features: FeatureMap,
}

/// `item ∈ Sub(s, t)`: a subsequence of `s[..=t]` ending with `s[t]`.
pub fn in_sub(item: &[TokenId], s: &[TokenId], t: usize) -> bool {
    item.last() == Some(&s[t]) && is_subsequence(item, &s[..=t])
}

impl LinAttnModel {
    pub fn validate(&self) -> Result<(), TheoryError> {
        let d = self.book.dim();
        for m in [&self.w_kq, &self.w_ov] {
            if m.nrows() != d || m.ncols() != d {
                return Err(TheoryError::Dimension {
                    expected: d,
                    got: m.nrows().max(m.ncols()),
                });
            }
        }
        self.book.token(self.end_token)?;
        if let FeatureMap::Dictionary(items) = &self.features {
            for a in items {
                self.book.expect(a)?;
            }
        }
        Ok(())
    }

    /// Output vocabulary: every token with an embedding.
    pub fn vocab(&self) -> Vec<TokenId> {
        self.book.items().filter(|(k, _)| k.len() == 1).map(|(k, _)| k[0]).collect()
    }

    /// Items whose embeddings make up the features, tokens first.
    pub fn items(&self) -> Vec<SubSeq> {
        let mut v: Vec<SubSeq> = self.vocab().into_iter().map(|t| SubSeq::from([t])).collect();
        if let FeatureMap::Dictionary(items) = &self.features {
            v.extend(items.iter().filter(|a| a.len() > 1).cloned());
        }
        v
    }

    pub fn features(&self, s: &[TokenId]) -> Result<Vec<Vector>, TheoryError> {
        match &self.features {
            FeatureMap::Tokens => s.iter().map(|&t| self.book.token(t).cloned()).collect(),
            FeatureMap::Dictionary(items) => (0..s.len())
                .map(|t| {
                    let mut f = self.book.token(s[t])?.clone();
                    for a in items.iter().filter(|a| a.len() > 1 && in_sub(a, s, t)) {
                        f += self.book.expect(a)?;
                    }
                    Ok(f)
                })
                .collect(),
            FeatureMap::Net(net) => net.embed(s),
        }
    }

    /// `ω̄_t` for each position.
    pub fn omegas(&self, feats: &[Vector]) -> Vec<f64> {
        let Some(last) = feats.last() else {
            return Vec::new();
        };
        let q = &self.w_kq * last;
        feats.iter().map(|f| f.dot(&q)).collect()
    }

    /// Logits over [`Self::vocab`], in that order.
    pub fn logits(&self, s: &[TokenId]) -> Result<Vec<f64>, TheoryError> {
        let feats = self.features(s)?;
        let om = self.omegas(&feats);
        let mut acc = Vector::zeros(self.book.dim());
        for (f, w) in feats.iter().zip(&om) {
            acc.axpy(*w, f, 1.0);
        }
        let z = &self.w_ov * acc;
        self.vocab()
            .into_iter()
            .map(|y| Ok(self.book.token(y)?.dot(&z)))
            .collect()
    }

    pub fn logit(&self, s: &[TokenId], y: TokenId) -> Result<f64, TheoryError> {
        let feats = self.features(s)?;
        let om = self.omegas(&feats);
        let u = self.w_ov.transpose() * self.book.token(y)?;
        Ok(feats.iter().zip(&om).map(|(f, w)| f.dot(&u) * w).sum())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitTerm {
    pub item: SubSeq,
    #[serde(with = "crate::sig17")]
    pub psi_hat: f64,
    #[serde(with = "crate::sig17")]
    pub omega: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitDecomposition {
    #[serde(with = "crate::sig17")]
    pub logit: f64,
    pub terms: Vec<LogitTerm>,
    /// `|f - Σ Ψ̂ ω|` relative to `|f|` (absolute when `f` is zero).
    #[serde(with = "crate::sig17")]
    pub reconstruction_gap: f64,
    /// Largest relative least-squares residual of a position feature.
    #[serde(with = "crate::sig17")]
    pub feature_residual: f64,
}

pub fn logit_decomposition(
    model: &LinAttnModel,
    s: &[TokenId],
    y: TokenId,
    dictionary: &[SubSeq],
) -> Result<LogitDecomposition, TheoryError> {
    model.validate()?;
    if dictionary.is_empty() {
        return Err(TheoryError::EmptyDictionary);
    }
    if s.is_empty() {
        return Err(TheoryError::Domain("empty sequence".into()));
    }
    let cols: Vec<Vector> = dictionary
        .iter()
        .map(|a| model.book.expect(a).cloned())
        .collect::<Result<_, _>>()?;
    let basis = Matrix::from_columns(&cols);
    let feats = model.features(s)?;
    let om = model.omegas(&feats);
    let f = model.logit(s, y)?;

    let mut omega = vec![0.0; dictionary.len()];
    let mut feature_residual: f64 = 0.0;
    for (phi, w) in feats.iter().zip(&om) {
        let mu = least_squares(&basis, phi);
        let norm = phi.norm();
        if norm > 0.0 {
            feature_residual = feature_residual.max((phi - &basis * &mu).norm() / norm);
        }
        for (o, m) in omega.iter_mut().zip(mu.iter()) {
            *o += m * w;
        }
    }
    let u = model.w_ov.transpose() * model.book.token(y)?;
    let terms: Vec<LogitTerm> = dictionary
        .iter()
        .zip(&cols)
        .zip(omega)
        .map(|((item, c), omega)| LogitTerm {
            item: item.clone(),
            psi_hat: u.dot(c),
            omega,
        })
        .collect();
    let sum: f64 = terms.iter().map(|t| t.psi_hat * t.omega).sum();
    let diff = (f - sum).abs();
    Ok(LogitDecomposition {
        logit: f,
        terms,
        reconstruction_gap: if f == 0.0 { diff } else { diff / f.abs() },
        feature_residual,
    })
}
