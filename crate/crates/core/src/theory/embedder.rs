//! Multi-layer subsequence embedder built by recursive splitting.
//!
//! Every composite item `s` splits into `s◁ = s[..ceil(len/2)]` and
//! `s▷ = s[ceil(len/2)..]`; block `l` detects the items of level
//! `ceil(log2 len) = l` from the parts written by earlier blocks and writes
//! φ(s) through its FFN. Length-1 parts are the token embeddings carried by
//! the residual stream.
//!
//! Detection checks that `s◁` ends at or before the position where `s▷`
//! ends; it does not check that `s▷` starts after `s◁` ends. Inputs such as
//! `[c, a, b, d]` therefore also fire the `[a, b, c, d]` unit. Repeated-token
//! pairs like `[a, a]` fire on a single `a` for the same reason.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::block::{forward_block, Head, LayerWeights, LinearMap};
use super::ortho::{required_dimension, sample_near_orthogonal};
use super::{check_unit, max_abs_dot, Matrix, TheoryError, Vector};
use crate::seq::{is_subsequence, SubSeq, TokenId};

pub const MAX_PATTERN_LEN: usize = 8;
pub const MAX_PATTERNS: usize = 64;

/// Unit embeddings for tokens (length-1 items) and composite subsequences.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBook {
    dim: usize,
    eps: f64,
    max_abs_dot: f64,
    items: BTreeMap<SubSeq, Vector>,
}

impl EmbeddingBook {
    /// Sample `eps`-orthogonal embeddings for `items`, trying seeds from
    /// `seed` upward.
    pub fn sample(items: impl IntoIterator<Item = SubSeq>, dim: usize, eps: f64, seed: u64, tries: u64) -> Result<Self, TheoryError> {
        let keys: BTreeSet<SubSeq> = items.into_iter().collect();
        if keys.len() < 2 {
            return Err(TheoryError::Domain("need at least two items".into()));
        }
        for s in seed..seed.saturating_add(tries) {
            let sample = sample_near_orthogonal(keys.len(), dim, eps, s);
            if sample.ok {
                let items = keys
                    .iter()
                    .cloned()
                    .zip(sample.vectors.column_iter().map(|c| c.into_owned()))
                    .collect();
                return Ok(Self {
                    dim,
                    eps,
                    max_abs_dot: sample.max_abs_dot,
                    items,
                });
            }
        }
        Err(TheoryError::Budget(format!(
            "no {eps}-orthogonal sample of {} vectors in {dim} dimensions within {tries} seeds",
            keys.len()
        )))
    }

    pub fn from_vectors(items: Vec<(SubSeq, Vector)>, eps: f64) -> Result<Self, TheoryError> {
        let dim = items.first().map_or(0, |(_, v)| v.len());
        let mut map = BTreeMap::new();
        for (k, v) in items {
            if v.len() != dim {
                return Err(TheoryError::Dimension { expected: dim, got: v.len() });
            }
            check_unit(&v, || k.to_string())?;
            map.insert(k, v);
        }
        let m = max_abs_dot(&Matrix::from_columns(&map.values().cloned().collect::<Vec<_>>()));
        if m >= eps {
            return Err(TheoryError::NotOrthogonal { eps, max_abs_dot: m });
        }
        Ok(Self {
            dim,
            eps,
            max_abs_dot: m,
            items: map,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn max_abs_dot(&self) -> f64 {
        self.max_abs_dot
    }

    pub fn get(&self, item: &[TokenId]) -> Option<&Vector> {
        self.items.get(&SubSeq::from(item))
    }

    pub fn expect(&self, item: &[TokenId]) -> Result<&Vector, TheoryError> {
        self.get(item).ok_or_else(|| TheoryError::MissingEmbedding(item.into()))
    }

    pub fn token(&self, t: TokenId) -> Result<&Vector, TheoryError> {
        self.expect(&[t])
    }

    pub fn items(&self) -> impl Iterator<Item = (&SubSeq, &Vector)> {
        self.items.iter()
    }

    pub fn token_count(&self) -> usize {
        self.items.keys().filter(|k| k.len() == 1).count()
    }
}

/// Split point: the left part gets `ceil(len/2)` tokens.
pub fn split(s: &[TokenId]) -> (&[TokenId], &[TokenId]) {
    s.split_at(s.len().div_ceil(2))
}

/// Every composite item (length >= 2) reached by recursively splitting
/// `patterns`, patterns included.
pub fn split_closure(patterns: &[SubSeq]) -> BTreeSet<SubSeq> {
    let mut out = BTreeSet::new();
    let mut stack: Vec<SubSeq> = patterns.iter().filter(|p| p.len() >= 2).cloned().collect();
    while let Some(s) = stack.pop() {
        let (l, r) = split(&s);
        for part in [l, r] {
            if part.len() >= 2 {
                stack.push(part.into());
            }
        }
        out.insert(s);
    }
    out
}

/// Whether the constructed network marks `item` at position `t`: the token
/// matches for length 1, otherwise the right part fires at `t` and the left
/// part fires at some position `<= t`. This admits the order and
/// repeated-token false positives described above.
pub fn construction_fires(item: &[TokenId], s: &[TokenId], t: usize) -> bool {
    if item.len() == 1 {
        return s[t] == item[0];
    }
    let (l, r) = split(item);
    construction_fires(r, s, t) && (0..=t).any(|i| construction_fires(l, s, i))
}

/// Block index that detects items of this length; 0 for single tokens.
pub fn level(len: usize) -> usize {
    len.max(1).next_power_of_two().trailing_zeros() as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubseqEmbedder {
    pub blocks: Vec<LayerWeights>,
    /// Items detected by each block.
    pub detected: Vec<Vec<SubSeq>>,
    /// Per-block cross-talk budget `eps * C_l`.
    pub nu: Vec<f64>,
    pub gamma: f64,
    pub eps: f64,
    book: EmbeddingBook,
    composite: BTreeSet<SubSeq>,
    final_mass: f64,
}

impl SubseqEmbedder {
    /// Layer count including the embedding layer.
    pub fn num_layers(&self) -> usize {
        self.blocks.len() + 1
    }

    pub fn book(&self) -> &EmbeddingBook {
        &self.book
    }

    /// Tokens and composite items the network embeds.
    pub fn contains(&self, item: &[TokenId]) -> bool {
        match item.len() {
            1 => self.book.get(item).is_some(),
            _ => self.composite.contains(&SubSeq::from(item)),
        }
    }

    pub fn embed(&self, seq: &[TokenId]) -> Result<Vec<Vector>, TheoryError> {
        let mut feats: Vec<Vector> = seq
            .iter()
            .map(|&t| self.book.token(t).cloned())
            .collect::<Result<_, _>>()?;
        for b in &self.blocks {
            feats = forward_block(b, &feats)?.output;
        }
        Ok(feats)
    }

    /// Bound on `|<φ_t, φ(s)> - μ_s|` for a sequence of length `n`: cross-talk
    /// of every other component plus attention leakage.
    pub fn error_budget(&self, n: usize) -> f64 {
        let nu_max = self.nu.iter().copied().fold(0.0, f64::max);
        let leak = n.saturating_sub(1) as f64 * (-self.gamma * (1.0 - 3.0 * nu_max)).exp();
        self.eps * self.final_mass + 4.0 * leak * self.final_mass
    }
}

/// Build the embedder for `patterns` (lengths 2..=8, at most 64 patterns).
/// `book` must hold every token that will be fed in and every composite
/// item reached by splitting.
pub fn build_subseq_embedder(patterns: &[SubSeq], book: &EmbeddingBook, gamma: f64) -> Result<SubseqEmbedder, TheoryError> {
    if patterns.len() > MAX_PATTERNS {
        return Err(TheoryError::Domain(format!("at most {MAX_PATTERNS} patterns")));
    }
    if !(gamma > 0.0) {
        return Err(TheoryError::Domain(format!("gamma must be positive, got {gamma}")));
    }
    let mut composite = BTreeSet::new();
    let mut stack: Vec<SubSeq> = Vec::new();
    for p in patterns {
        if !(2..=MAX_PATTERN_LEN).contains(&p.len()) {
            return Err(TheoryError::Domain(format!("pattern {p} must have length 2..={MAX_PATTERN_LEN}")));
        }
        stack.push(p.clone());
    }
    while let Some(s) = stack.pop() {
        for &t in s.iter() {
            book.token(t)?;
        }
        book.expect(&s)?;
        let (l, r) = split(&s);
        for part in [l, r] {
            if part.len() >= 2 {
                stack.push(part.into());
            }
        }
        composite.insert(s);
    }
    let eta = patterns.iter().map(|p| p.len()).max().unwrap_or(0);
    if eta > 0 {
        let need = required_dimension(book.token_count() + patterns.len() * eta, book.eps())?;
        if book.dim() < need {
            return Err(TheoryError::Budget(format!("dimension {} below the required {need}", book.dim())));
        }
    }

    let eps = book.eps();
    let n_levels = composite.iter().map(|s| level(s.len())).max().unwrap_or(0);
    // L1 mass of a feature entering block l, maximized over the last token.
    let mass_before = |l: usize| -> f64 {
        let mut per_token: BTreeMap<TokenId, usize> = BTreeMap::new();
        for s in composite.iter().filter(|s| level(s.len()) < l) {
            *per_token.entry(*s.last().expect("composite")).or_default() += 1;
        }
        1.0 + per_token.values().copied().max().unwrap_or(0) as f64
    };

    let d = book.dim();
    let mut blocks = Vec::with_capacity(n_levels);
    let mut detected = Vec::with_capacity(n_levels);
    let mut nus = Vec::with_capacity(n_levels);
    for l in 1..=n_levels {
        let items: Vec<SubSeq> = composite.iter().filter(|s| level(s.len()) == l).cloned().collect();
        let nu = eps * mass_before(l);
        if nu >= 0.25 {
            return Err(TheoryError::Budget(format!(
                "block {l}: cross-talk {nu:.3} leaves no detection margin (needs < 0.25)"
            )));
        }
        let (lo, hi) = (1.0 + 2.0 * nu, 2.0 - 2.0 * nu);
        let k = 1.0 / (hi - lo);
        let r = items.len();
        let mut left = Matrix::zeros(d, r);
        let mut right = Matrix::zeros(d, r);
        let mut w_f1 = Matrix::zeros(2 * r, 2 * d);
        let mut b = Vector::zeros(2 * r);
        let mut w_f2 = Matrix::zeros(d, 2 * r);
        for (j, s) in items.iter().enumerate() {
            let (sl, sr) = split(s);
            let (pl, pr, ps) = (book.expect(sl)?, book.expect(sr)?, book.expect(s)?);
            left.set_column(j, &(pl * gamma));
            right.set_column(j, pr);
            // Clipped ramp: ReLU(k(x-lo)) - ReLU(k(x-lo) - 1).
            for (row, offset) in [(2 * j, 0.0), (2 * j + 1, 1.0)] {
                w_f1.view_mut((row, 0), (1, d)).copy_from(&(pl.transpose() * k));
                w_f1.view_mut((row, d), (1, d)).copy_from(&(pr.transpose() * k));
                b[row] = k * lo + offset;
            }
            w_f2.set_column(2 * j, ps);
            w_f2.set_column(2 * j + 1, &(-ps));
        }
        blocks.push(LayerWeights {
            dim: d,
            heads: vec![
                Head {
                    w_kq: LinearMap::LowRank { left, right },
                    w_ov: LinearMap::identity(),
                },
                Head {
                    w_kq: LinearMap::ScaledIdentity(gamma),
                    w_ov: LinearMap::identity(),
                },
            ],
            w_f1,
            b,
            w_f2,
            gamma,
        });
        detected.push(items);
        nus.push(nu);
    }
    let final_mass = mass_before(n_levels + 1);
    Ok(SubseqEmbedder {
        blocks,
        detected,
        nu: nus,
        gamma,
        eps,
        book: book.clone(),
        composite,
        final_mass,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DictionaryCoefficient {
    pub item: SubSeq,
    #[serde(with = "crate::sig17")]
    pub coefficient: f64,
    /// Subsequence of the prefix ending at this position and ending with its token.
    pub in_sub: bool,
    /// Embedded by the network.
    pub in_net: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDecomposition {
    pub position: usize,
    /// `||φ_t - D c|| / ||φ_t||`.
    #[serde(with = "crate::sig17")]
    pub residual: f64,
    pub coefficients: Vec<DictionaryCoefficient>,
    /// Every item both embedded by the network and in the prefix's `Sub` set
    /// has a positive coefficient.
    pub positive_ok: bool,
}

/// Least-squares coefficients of `values` on the columns of `basis`.
pub(crate) fn least_squares(basis: &Matrix, values: &Vector) -> Vector {
    basis
        .clone()
        .svd(true, true)
        .solve(values, 1e-12)
        .expect("SVD computed with both factors")
}

/// Project the feature at position `t` onto the dictionary embeddings.
pub fn feature_decomposition_check(
    net: &SubseqEmbedder,
    s: &[TokenId],
    t: usize,
    dictionary: &[SubSeq],
) -> Result<FeatureDecomposition, TheoryError> {
    if dictionary.is_empty() {
        return Err(TheoryError::EmptyDictionary);
    }
    if t >= s.len() {
        return Err(TheoryError::Domain(format!("position {t} outside a sequence of {}", s.len())));
    }
    let cols: Vec<Vector> = dictionary
        .iter()
        .map(|i| net.book().expect(i).cloned())
        .collect::<Result<_, _>>()?;
    let feats = net.embed(s)?;
    let phi = &feats[t];
    let basis = Matrix::from_columns(&cols);
    let c = least_squares(&basis, phi);
    let residual = (phi - &basis * &c).norm() / phi.norm();
    let prefix = &s[..=t];
    let coefficients: Vec<DictionaryCoefficient> = dictionary
        .iter()
        .zip(c.iter())
        .map(|(item, &coefficient)| DictionaryCoefficient {
            item: item.clone(),
            coefficient,
            in_sub: item.last() == Some(&s[t]) && is_subsequence(item, prefix),
            in_net: net.contains(item),
        })
        .collect();
    let positive_ok = coefficients
        .iter()
        .filter(|c| c.in_sub && c.in_net)
        .all(|c| c.coefficient > 0.0);
    Ok(FeatureDecomposition {
        position: t,
        residual,
        coefficients,
        positive_ok,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::theory::block::{build_pair_detector, run_detector};
    use proptest::prelude::*;
    use rand::Rng as _;

    const V: u32 = 8;
    const D: usize = 4096;

    fn tok(t: TokenId) -> SubSeq {
        SubSeq::from([t])
    }

    fn book_for(patterns: &[SubSeq], seed: u64) -> EmbeddingBook {
        let mut items: Vec<SubSeq> = (0..V).map(tok).collect();
        let mut stack = patterns.to_vec();
        while let Some(s) = stack.pop() {
            let (l, r) = split(&s);
            for p in [l, r] {
                if p.len() >= 2 {
                    stack.push(p.into());
                }
            }
            items.push(s);
        }
        EmbeddingBook::sample(items, D, 0.05, seed, 200).unwrap()
    }

    #[test]
    fn split_and_level() {
        assert_eq!(split(&[1, 2, 3]), (&[1, 2][..], &[3][..]));
        assert_eq!(split(&[1, 2, 3, 4]), (&[1, 2][..], &[3, 4][..]));
        assert_eq!(
            (1..=8).map(level).collect::<Vec<_>>(),
            vec![0, 1, 2, 2, 3, 3, 3, 3]
        );
    }

    #[test]
    fn four_token_pattern() {
        let p = SubSeq::from([1, 2, 3, 4]);
        let book = book_for(std::slice::from_ref(&p), 0);
        let net = build_subseq_embedder(std::slice::from_ref(&p), &book, 50.0).unwrap();
        assert_eq!(net.blocks.len(), 2);
        assert_eq!(net.num_layers(), 3);
        let phi = book.get(&p).unwrap();
        let s = [0, 1, 5, 2, 3, 6, 4, 7];
        let delta = net.error_budget(s.len());
        assert!(delta < 0.2, "{delta}");
        let feats = net.embed(&s).unwrap();
        // μ = 1 under the clipped ramp.
        assert!(feats[6].dot(phi) >= 1.0 - delta);
        for (t, f) in feats.iter().enumerate().filter(|&(t, _)| t != 6) {
            assert!(f.dot(phi).abs() <= delta, "position {t}");
        }
        for s in [[4, 3, 2, 1, 0], [1, 2, 3, 0, 5], [2, 1, 4, 3, 0]] {
            for f in net.embed(&s).unwrap() {
                assert!(f.dot(phi).abs() <= delta, "{s:?}");
            }
        }
    }

    #[test]
    fn order_false_positive_is_real() {
        let p = SubSeq::from([1, 2, 3, 4]);
        let book = book_for(std::slice::from_ref(&p), 1);
        let net = build_subseq_embedder(std::slice::from_ref(&p), &book, 50.0).unwrap();
        let s = [3, 1, 2, 4];
        assert!(!is_subsequence(&p, &s));
        let f = net.embed(&s).unwrap();
        assert!(f[3].dot(book.get(&p).unwrap()) > 0.5);
    }

    #[test]
    fn pairs_only_match_the_pair_detector() {
        let p = SubSeq::from([2, 5]);
        let book = book_for(std::slice::from_ref(&p), 2);
        let net = build_subseq_embedder(std::slice::from_ref(&p), &book, 50.0).unwrap();
        assert_eq!(net.blocks.len(), 1);
        let emb: Vec<Vector> = (0..V).map(|t| book.token(t).unwrap().clone()).collect();
        let det = build_pair_detector(2, 5, &emb, 50.0, 0.05, book.get(&p).unwrap()).unwrap();
        let mut rng = crate::rng_from_seed(5);
        let delta = net.error_budget(16);
        for _ in 0..30 {
            let n = rng.random_range(1..=16);
            let s: Vec<TokenId> = (0..n).map(|_| rng.random_range(0..V)).collect();
            let idx: Vec<usize> = s.iter().map(|&t| t as usize).collect();
            let r = run_detector(&det, &emb, &idx, 2, 5).unwrap();
            let net_max = net
                .embed(&s)
                .unwrap()
                .iter()
                .map(|f| f.dot(book.get(&p).unwrap()))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((net_max - r.max_activation).abs() <= delta, "{s:?}");
        }
    }

    #[test]
    fn decomposition_of_single_pattern_net() {
        let p = SubSeq::from([1, 2, 3]);
        let book = book_for(std::slice::from_ref(&p), 3);
        let net = build_subseq_embedder(std::slice::from_ref(&p), &book, 50.0).unwrap();
        let dict: Vec<SubSeq> = book.items().map(|(k, _)| k.clone()).collect();
        let s = [1, 0, 2, 3];
        let r = feature_decomposition_check(&net, &s, 3, &dict).unwrap();
        assert!(r.residual < 1e-9, "{}", r.residual);
        assert!(r.positive_ok);
        let delta = net.error_budget(s.len());
        for c in &r.coefficients {
            if c.in_sub && c.in_net {
                assert!(c.coefficient > 1.0 - delta, "{c:?}");
            } else {
                assert!(c.coefficient.abs() <= delta, "{c:?}");
            }
        }
        // A single token is its own embedding.
        let single = feature_decomposition_check(&net, &[4], 0, &dict).unwrap();
        assert!(single.residual < 1e-9);
        let four = single.coefficients.iter().find(|c| c.item == tok(4)).unwrap();
        assert!((four.coefficient - 1.0).abs() < 1e-9);
        assert_eq!(
            feature_decomposition_check(&net, &s, 0, &[]).unwrap_err(),
            TheoryError::EmptyDictionary
        );
    }

    #[test]
    fn budget_errors() {
        let p = SubSeq::from([1, 2]);
        let small = EmbeddingBook::sample([tok(1), tok(2), p.clone()], 64, 0.5, 0, 50).unwrap();
        assert!(matches!(
            build_subseq_embedder(std::slice::from_ref(&p), &small, 50.0),
            Err(TheoryError::Budget(_))
        ));
        let book = book_for(&[], 0);
        assert!(matches!(
            build_subseq_embedder(&[p], &book, 50.0),
            Err(TheoryError::MissingEmbedding(_))
        ));
        assert!(build_subseq_embedder(&[SubSeq::from([1])], &book, 50.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        #[test]
        fn random_inputs_without_pattern_stay_small(seed in 0u64..1000) {
            let p = SubSeq::from([1, 2, 3, 4]);
            let book = book_for(std::slice::from_ref(&p), 7);
            let net = build_subseq_embedder(std::slice::from_ref(&p), &book, 50.0).unwrap();
            let mut rng = crate::rng_from_seed(seed);
            // Tokens 1..=4 appear at most in an order that cannot fire the unit.
            let mut s: Vec<TokenId> = (0..10).map(|_| [0, 5, 6, 7][rng.random_range(0..4)]).collect();
            s.insert(rng.random_range(0..=s.len()), 4);
            let delta = net.error_budget(s.len());
            for f in net.embed(&s).unwrap() {
                prop_assert!(f.dot(book.get(&p).unwrap()).abs() <= delta);
            }
        }
    }
}
