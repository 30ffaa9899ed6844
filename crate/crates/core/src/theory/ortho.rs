//! Random near-orthogonal unit vectors and the dimension recipe for them.

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{max_abs_dot, Matrix, TheoryError};
use crate::rng_from_seed;

/// Constant in `d = ceil(C * ln(max(N*eps, e)) / eps^2)`.
///
/// Frozen from the calibration run in `tests::calibrate_dimension_constant`
/// (N = 1000, eps = 0.2, seeds 0..100). Success rates on the 0.25 grid were
/// 0.91 at C = 5.0, 0.98 at 5.75, 1.00 at 6.0 and 0.99 at 6.25; 6.5 keeps two
/// grid steps above the first passing value.
pub const DIMENSION_CONSTANT: f64 = 6.5;

/// Embedding dimension at which `n` random unit vectors are expected to be
/// pairwise `eps`-orthogonal.
pub fn required_dimension(n: usize, eps: f64) -> Result<usize, TheoryError> {
    required_dimension_with(n, eps, DIMENSION_CONSTANT)
}

pub(crate) fn required_dimension_with(n: usize, eps: f64, c: f64) -> Result<usize, TheoryError> {
    if n < 2 {
        return Err(TheoryError::Domain(format!("need N >= 2, got {n}")));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(TheoryError::Domain(format!("need 0 < eps < 1, got {eps}")));
    }
    let log = (n as f64 * eps).max(std::f64::consts::E).ln();
    Ok((c * log / (eps * eps)).ceil() as usize)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrthoSample {
    /// One unit vector per column.
    pub vectors: Matrix,
    pub max_abs_dot: f64,
    pub eps: f64,
    pub ok: bool,
}

impl OrthoSample {
    /// Wrap given columns, normalizing each.
    pub fn from_vectors(mut vectors: Matrix, eps: f64) -> Self {
        for mut c in vectors.column_iter_mut() {
            let n = c.norm();
            if n > 0.0 {
                c /= n;
            }
        }
        let m = max_abs_dot(&vectors);
        Self {
            vectors,
            max_abs_dot: m,
            eps,
            ok: m < eps,
        }
    }
}

/// `n` independent uniform unit vectors in `d` dimensions.
pub fn sample_near_orthogonal(n: usize, d: usize, eps: f64, seed: u64) -> OrthoSample {
    let mut rng = rng_from_seed(seed);
    let data: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
    OrthoSample::from_vectors(Matrix::from_vec(d, n, data), eps)
}

/// Fraction of `seeds` for which sampling at dimension `d` succeeds.
pub fn success_rate(n: usize, d: usize, eps: f64, seeds: std::ops::Range<u64>) -> f64 {
    let total = seeds.end - seeds.start;
    let ok = seeds
        .into_par_iter()
        .filter(|&s| sample_near_orthogonal(n, d, eps, s).ok)
        .count();
    ok as f64 / total as f64
}
