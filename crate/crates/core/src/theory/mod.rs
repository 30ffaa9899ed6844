//! Numerical checks of the constructive transformer results: near-orthogonal
//! embeddings, the pair-detector block, the multi-layer subsequence embedder,
//! the logit-as-association-sum decomposition, and the linear-attention
//! gradient bound.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seq::SubSeq;

pub mod block;
pub mod embedder;
pub mod gradient;
pub mod logit;
pub mod ortho;
pub mod report;

pub use block::{build_pair_detector, forward_block, pair_detector_bound, BlockTrace, Head, LayerWeights, LinearMap};
pub use embedder::{build_subseq_embedder, feature_decomposition_check, EmbeddingBook, SubseqEmbedder};
pub use gradient::{gradient_bound_check, GradientCheck};
pub use logit::{logit_decomposition, FeatureMap, LinAttnModel, LogitDecomposition};
pub use ortho::{required_dimension, sample_near_orthogonal, OrthoSample, DIMENSION_CONSTANT};
pub use report::{run_check, CheckKind, TheoryReport, THEORY_SCHEMA};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

#[derive(Debug, Error, Clone, PartialEq, Serialize, Deserialize)]
pub enum TheoryError {
    #[error("parameter out of domain: {0}")]
    Domain(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("embedding for {0} is not unit norm")]
    NotUnit(String),
    #[error("embeddings are not {eps}-orthogonal (max |dot| = {max_abs_dot})")]
    NotOrthogonal { eps: f64, max_abs_dot: f64 },
    #[error("no embedding for {0}")]
    MissingEmbedding(SubSeq),
    #[error("embedding budget insufficient: {0}")]
    Budget(String),
    #[error("dictionary is empty")]
    EmptyDictionary,
    #[error("precondition violated: {0}")]
    Precondition(String),
}

/// Largest `|<u, v>|` over distinct columns.
pub fn max_abs_dot(columns: &Matrix) -> f64 {
    let gram = columns.transpose() * columns;
    let mut m: f64 = 0.0;
    for j in 0..gram.ncols() {
        for i in 0..j {
            m = m.max(gram[(i, j)].abs());
        }
    }
    m
}

pub(crate) fn check_unit(v: &Vector, name: impl Fn() -> String) -> Result<(), TheoryError> {
    if (v.norm() - 1.0).abs() > 1e-9 {
        return Err(TheoryError::NotUnit(name()));
    }
    Ok(())
}
