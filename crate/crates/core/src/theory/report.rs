//! Seeded end-to-end runs of each theory check, reported as named quantities
//! next to the bounds they must respect.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::block::{build_pair_detector, pair_detector_bound, run_detector};
use super::embedder::{build_subseq_embedder, construction_fires, split_closure, EmbeddingBook};
use super::gradient::{gradient_bound_check_all, random_instance, FD_REL_TOL};
use super::logit::{logit_decomposition, FeatureMap, LinAttnModel};
use super::ortho::{required_dimension, sample_near_orthogonal, success_rate};
use super::{Matrix, TheoryError, Vector};
use crate::seq::{is_subsequence, SubSeq, TokenId};

pub const THEORY_SCHEMA: &str = "subtrace-theory/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckKind {
    Ortho,
    Detector,
    Embedder,
    Logit,
    Gradient,
}

impl CheckKind {
    pub const ALL: [CheckKind; 5] = [
        CheckKind::Ortho,
        CheckKind::Detector,
        CheckKind::Embedder,
        CheckKind::Logit,
        CheckKind::Gradient,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CheckKind::Ortho => "ortho",
            CheckKind::Detector => "detector",
            CheckKind::Embedder => "embedder",
            CheckKind::Logit => "logit",
            CheckKind::Gradient => "gradient",
        }
    }
}

impl fmt::Display for CheckKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CheckKind {
    type Err = TheoryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| TheoryError::Domain(format!("unknown check {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "==")]
    Eq,
    /// Reported without a bound.
    #[serde(rename = "info")]
    Info,
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Relation::Le => "<=",
            Relation::Ge => ">=",
            Relation::Eq => "==",
            Relation::Info => "info",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantity {
    pub name: String,
    #[serde(with = "crate::sig17")]
    pub value: f64,
    #[serde(with = "crate::sig17::opt")]
    pub bound: Option<f64>,
    pub relation: Relation,
    pub holds: bool,
}

impl Quantity {
    fn new(name: &str, value: f64, relation: Relation, bound: f64) -> Self {
        let holds = match relation {
            Relation::Le => value <= bound,
            Relation::Ge => value >= bound,
            Relation::Eq => value == bound,
            Relation::Info => true,
        };
        Self {
            name: name.into(),
            value,
            bound: Some(bound),
            relation,
            holds,
        }
    }

    fn info(name: &str, value: f64) -> Self {
        Self {
            name: name.into(),
            value,
            bound: None,
            relation: Relation::Info,
            holds: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub schema: String,
    pub check: CheckKind,
    pub seed: u64,
    pub parameters: BTreeMap<String, Value>,
    pub quantities: Vec<Quantity>,
    pub passed: bool,
}

impl TheoryReport {
    pub fn quantity(&self, name: &str) -> Option<&Quantity> {
        self.quantities.iter().find(|q| q.name == name)
    }
}

const VOCAB: TokenId = 8;
const DIM: usize = 4096;
const EPS: f64 = 0.05;
const GAMMA: f64 = 50.0;

pub fn run_check(kind: CheckKind, seed: u64) -> Result<TheoryReport, TheoryError> {
    let (parameters, quantities) = match kind {
        CheckKind::Ortho => ortho(seed)?,
        CheckKind::Detector => detector(seed)?,
        CheckKind::Embedder => embedder(seed)?,
        CheckKind::Logit => logit(seed)?,
        CheckKind::Gradient => gradient(seed)?,
    };
    Ok(TheoryReport {
        schema: THEORY_SCHEMA.into(),
        check: kind,
        seed,
        passed: quantities.iter().all(|q| q.holds),
        parameters,
        quantities,
    })
}

type Parts = (BTreeMap<String, Value>, Vec<Quantity>);

fn params(pairs: &[(&str, Value)]) -> BTreeMap<String, Value> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn random_seq(rng: &mut crate::Rng, len: std::ops::RangeInclusive<usize>, exclude: Option<TokenId>) -> Vec<TokenId> {
    let n = rng.random_range(len);
    (0..n)
        .map(|_| loop {
            let t = rng.random_range(0..VOCAB);
            if Some(t) != exclude {
                break t;
            }
        })
        .collect()
}

fn ortho(seed: u64) -> Result<Parts, TheoryError> {
    let (n, eps, seeds) = (1000, 0.2, 100u64);
    let d = required_dimension(n, eps)?;
    let rate = success_rate(n, d, eps, seed..seed + seeds);
    let cramped = sample_near_orthogonal(n, 2, eps, seed);
    Ok((
        params(&[("n", json!(n)), ("eps", json!(eps)), ("seeds", json!(seeds))]),
        vec![
            Quantity::info("dimension", d as f64),
            Quantity::new("success_rate", rate, Relation::Ge, 0.99),
            Quantity::new("max_abs_dot_in_2d", cramped.max_abs_dot, Relation::Ge, eps),
        ],
    ))
}

fn detector(seed: u64) -> Result<Parts, TheoryError> {
    let (x1, x2, max_len, count) = (1usize, 2usize, 32usize, 200);
    let book = EmbeddingBook::sample((0..VOCAB).map(|t| SubSeq::from([t])), DIM, EPS, seed, 200)?;
    let emb: Vec<Vector> = (0..VOCAB).map(|t| book.token(t).cloned()).collect::<Result<_, _>>()?;
    let out = emb[0].clone();
    let weights = build_pair_detector(x1, x2, &emb, GAMMA, EPS, &out)?;
    let (floor, ceil) = pair_detector_bound(max_len, GAMMA, EPS);
    let mut rng = crate::rng_from_seed(seed);
    let mut min_present = f64::INFINITY;
    let mut max_absent: f64 = 0.0;
    let (mut n_present, mut n_absent) = (0, 0);
    for i in 0..count {
        let exclude = (i % 2 == 1).then_some(x2 as TokenId);
        let s: Vec<usize> = random_seq(&mut rng, 2..=max_len, exclude).into_iter().map(|t| t as usize).collect();
        let run = run_detector(&weights, &emb, &s, x1, x2)?;
        if run.present {
            n_present += 1;
            min_present = min_present.min(run.max_activation);
        } else {
            n_absent += 1;
            max_absent = max_absent.max(run.max_activation);
        }
    }
    Ok((
        params(&[
            ("vocab", json!(VOCAB)),
            ("dim", json!(DIM)),
            ("eps", json!(EPS)),
            ("gamma", json!(GAMMA)),
            ("sequences", json!(count)),
            ("max_len", json!(max_len)),
        ]),
        vec![
            Quantity::info("present_sequences", n_present as f64),
            Quantity::info("absent_sequences", n_absent as f64),
            Quantity::new("min_present_activation", min_present, Relation::Ge, floor),
            Quantity::new("max_absent_activation", max_absent, Relation::Le, ceil),
            Quantity::new("margin", min_present - max_absent, Relation::Ge, 0.98),
        ],
    ))
}

fn embedder(seed: u64) -> Result<Parts, TheoryError> {
    let pattern = SubSeq::from([1, 2, 3, 4]);
    let max_len = 12;
    let count = 100;
    let items = (0..VOCAB).map(|t| SubSeq::from([t])).chain(split_closure(std::slice::from_ref(&pattern)));
    let book = EmbeddingBook::sample(items, DIM, EPS, seed, 200)?;
    let net = build_subseq_embedder(std::slice::from_ref(&pattern), &book, GAMMA)?;
    let target = book.expect(&pattern)?.clone();
    let budget = net.error_budget(max_len);
    let mut rng = crate::rng_from_seed(seed);
    let mut worst: f64 = 0.0;
    let (mut fires, mut false_fires) = (0usize, 0usize);
    for i in 0..count {
        let mut s = random_seq(&mut rng, 4..=max_len, None);
        if i % 4 == 0 {
            // Plant the pattern at sorted random positions.
            let mut pos: Vec<usize> = rand::seq::index::sample(&mut rng, s.len(), 4).into_vec();
            pos.sort_unstable();
            for (p, &t) in pos.iter().zip(pattern.iter()) {
                s[*p] = t;
            }
        }
        let feats = net.embed(&s)?;
        for (t, f) in feats.iter().enumerate() {
            let expected = construction_fires(&pattern, &s, t);
            if expected {
                fires += 1;
                if !(s[t] == pattern[3] && is_subsequence(&pattern, &s[..=t])) {
                    false_fires += 1;
                }
            }
            worst = worst.max((f.dot(&target) - if expected { 1.0 } else { 0.0 }).abs());
        }
    }
    Ok((
        params(&[
            ("pattern", json!(pattern)),
            ("vocab", json!(VOCAB)),
            ("dim", json!(DIM)),
            ("eps", json!(EPS)),
            ("gamma", json!(GAMMA)),
            ("sequences", json!(count)),
        ]),
        vec![
            Quantity::new("layers", net.num_layers() as f64, Relation::Eq, 3.0),
            Quantity::new("max_projection_error", worst, Relation::Le, budget),
            Quantity::info("firing_positions", fires as f64),
            Quantity::info("firings_without_subsequence", false_fires as f64),
        ],
    ))
}

fn logit(seed: u64) -> Result<Parts, TheoryError> {
    use rand_distr::StandardNormal;
    let pattern = SubSeq::from([1, 2, 3]);
    let dict: Vec<SubSeq> = (0..VOCAB)
        .map(|t| SubSeq::from([t]))
        .chain(split_closure(std::slice::from_ref(&pattern)))
        .collect();
    let book = EmbeddingBook::sample(dict.iter().cloned(), DIM, EPS, seed, 200)?;
    let net = build_subseq_embedder(std::slice::from_ref(&pattern), &book, GAMMA)?;
    let max_len = 10;
    let budget = net.error_budget(max_len);
    let mut rng = crate::rng_from_seed(seed);
    let scale = 1.0 / (DIM as f64).sqrt();
    let mut gauss = || Matrix::from_fn(DIM, DIM, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
    let w_kq = gauss();
    let w_ov = gauss();
    let mut model = LinAttnModel {
        book,
        w_kq,
        w_ov,
        end_token: 0,
        tau_dp: max_len,
        features: FeatureMap::Net(Box::new(net)),
    };
    let mut rng = crate::rng_from_seed(seed.wrapping_add(1));
    let seqs: Vec<Vec<TokenId>> = (0..20).map(|_| random_seq(&mut rng, 3..=max_len, None)).collect();
    let mut worst: f64 = 0.0;
    for s in &seqs {
        let y = rng.random_range(0..VOCAB);
        worst = worst.max(logit_decomposition(&model, s, y, &dict)?.reconstruction_gap);
    }
    model.w_ov = Matrix::zeros(DIM, DIM);
    let zero = logit_decomposition(&model, &seqs[0], 1, &dict)?;
    Ok((
        params(&[
            ("pattern", json!(pattern)),
            ("dim", json!(DIM)),
            ("eps", json!(EPS)),
            ("gamma", json!(GAMMA)),
            ("sequences", json!(seqs.len())),
        ]),
        vec![
            Quantity::new("max_reconstruction_gap", worst, Relation::Le, budget),
            Quantity::new("zero_ov_gap", zero.reconstruction_gap, Relation::Eq, 0.0),
        ],
    ))
}

fn gradient(seed: u64) -> Result<Parts, TheoryError> {
    let instances = 50u64;
    let (mut checks, mut held, mut fd_ok) = (0usize, 0usize, 0usize);
    let mut worst_fd: f64 = 0.0;
    let mut worst_ratio: f64 = 0.0;
    for i in 0..instances {
        let (model, data) = random_instance(seed.wrapping_add(i))?;
        for c in gradient_bound_check_all(&model, &data)? {
            checks += 1;
            held += c.holds as usize;
            fd_ok += c.fd_ok as usize;
            worst_fd = worst_fd.max(c.fd_error());
            if c.rhs > 0.0 {
                worst_ratio = worst_ratio.max(c.lhs / c.rhs);
            }
        }
    }
    Ok((
        params(&[("instances", json!(instances))]),
        vec![
            Quantity::info("checks", checks as f64),
            Quantity::new("bound_violations", (checks - held) as f64, Relation::Eq, 0.0),
            Quantity::new("max_lhs_over_rhs", worst_ratio, Relation::Le, 1.0),
            Quantity::new("finite_difference_failures", (checks - fd_ok) as f64, Relation::Eq, 0.0),
            Quantity::new("max_finite_difference_error", worst_fd, Relation::Le, FD_REL_TOL),
        ],
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_round_trip() {
        for k in CheckKind::ALL {
            assert_eq!(k.as_str().parse::<CheckKind>().unwrap(), k);
            assert_eq!(serde_json::to_value(k).unwrap(), json!(k.as_str()));
        }
        assert!("nope".parse::<CheckKind>().is_err());
    }

    #[test]
    fn reports_pass_and_are_deterministic() {
        for k in [CheckKind::Detector, CheckKind::Embedder, CheckKind::Gradient] {
            let a = run_check(k, 0).unwrap();
            assert!(a.passed, "{}", serde_json::to_string_pretty(&a).unwrap());
            let b = run_check(k, 0).unwrap();
            assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
            let back: TheoryReport = serde_json::from_str(&serde_json::to_string(&a).unwrap()).unwrap();
            assert_eq!(back, a);
        }
    }

    #[test]
    fn quantity_relations() {
        assert!(Quantity::new("a", 1.0, Relation::Le, 1.0).holds);
        assert!(!Quantity::new("a", 1.1, Relation::Le, 1.0).holds);
        assert!(!Quantity::new("a", 0.9, Relation::Ge, 1.0).holds);
        assert!(Quantity::info("a", f64::NAN).holds);
    }
}
