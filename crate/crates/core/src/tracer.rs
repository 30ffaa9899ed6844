//! Beam search for the input subsequences most associated with a target
//! output subsequence.
//!
//! Candidates are position sets inside the query region, always read in
//! original order. Every candidate is scored against one fixed perturbation
//! corpus. Ranking is total: psi descending, then joint count descending, then
//! positions ascending lexicographically. Candidates with the same token
//! content share one slot and keep their leftmost positions.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assoc::{AssocEstimate, DEFAULT_LAMBDA, DEFAULT_MIN_SUPPORT};
use crate::perturb::{prompt_fingerprint, PerturbationCorpus, PromptTemplate};
use crate::seq::{enumerate_subsequences, is_subsequence, match_positions, SubSeq, TokenId, TokenSeq};

pub const TRACE_SCHEMA: &str = "subtrace-trace/1";

#[derive(Debug, Error, PartialEq)]
pub enum TraceError {
    #[error("candidate region is empty")]
    EmptyRegion,
    #[error("target subsequence is empty")]
    EmptyTarget,
    #[error("corpus fingerprint {corpus} does not match prompt fingerprint {prompt}")]
    FingerprintMismatch { corpus: String, prompt: String },
    #[error("invalid trace parameters: {0}")]
    Params(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("more than {cap} candidate subsequences; exhaustive search refused")]
    CapExceeded { cap: usize },
}

fn default_beam() -> usize {
    20
}
fn default_max_len() -> usize {
    4
}
fn default_min_support() -> u64 {
    DEFAULT_MIN_SUPPORT
}
fn default_patience() -> usize {
    3
}
fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceParams {
    #[serde(default = "default_beam")]
    pub beam_width: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default = "default_min_support")]
    pub min_support: u64,
    #[serde(default = "default_patience")]
    pub early_stop_patience: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Query-token index range searched; the whole query when absent.
    #[serde(default)]
    pub candidate_region: Option<Range<usize>>,
}

impl Default for TraceParams {
    fn default() -> Self {
        Self {
            beam_width: default_beam(),
            max_len: default_max_len(),
            min_support: default_min_support(),
            early_stop_patience: default_patience(),
            lambda: default_lambda(),
            candidate_region: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub length: usize,
    pub best: SubSeq,
    /// Query indices of `best`.
    pub positions: Vec<usize>,
    pub estimate: AssocEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceResult {
    pub schema: String,
    pub params: TraceParams,
    pub corpus_fingerprint: String,
    pub target: SubSeq,
    /// Top of the beam at each length reached.
    pub per_length: Vec<TraceRow>,
    /// Best admissible candidate seen anywhere in the search, which can differ
    /// from every stored beam top.
    pub best_visited: Option<TraceRow>,
    /// Length at which the search stopped before `max_len`, if it did.
    pub stopped_early_at: Option<usize>,
    /// Number of candidates scored.
    pub visited: usize,
}

impl TraceResult {
    pub fn row(&self, length: usize) -> Option<&TraceRow> {
        self.per_length.iter().find(|r| r.length == length)
    }

    /// Fixed-width table; `surface` renders a token id.
    pub fn to_table(&self, surface: impl Fn(TokenId) -> String) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>3}  {:>10}  {:>6}  {:>6}  {:>6}  tokens", "len", "psi", "joint", "cond", "marg");
        let row = |s: &mut String, tag: &str, r: &TraceRow| {
            let psi = r.estimate.psi.map_or("undef".to_owned(), |p| format!("{p:.4}"));
            let toks: Vec<String> = r.best.iter().map(|&t| surface(t)).collect();
            let _ = writeln!(
                s,
                "{tag:>3}  {psi:>10}  {:>6}  {:>6}  {:>6}  {}",
                r.estimate.n_joint,
                r.estimate.n_cond,
                r.estimate.n_marg,
                toks.join(" | ")
            );
        };
        for r in &self.per_length {
            row(&mut s, &r.length.to_string(), r);
        }
        if let Some(b) = &self.best_visited {
            row(&mut s, "*", b);
        }
        if let Some(k) = self.stopped_early_at {
            let _ = writeln!(s, "stopped early at length {k}");
        }
        s
    }
}

/// Query regions and output flags, computed once per trace.
struct Scorer<'a> {
    queries: Vec<&'a [TokenId]>,
    out_hit: Vec<bool>,
    n_marg: u64,
    lambda: f64,
    min_support: u64,
}

impl<'a> Scorer<'a> {
    fn new(corpus: &'a PerturbationCorpus, target: &[TokenId], lambda: f64, min_support: u64) -> Self {
        let queries: Vec<&[TokenId]> = (0..corpus.len()).map(|i| corpus.query(i)).collect();
        let out_hit: Vec<bool> = corpus
            .entries
            .par_iter()
            .map(|e| is_subsequence(target, &e.output_token_ids))
            .collect();
        let n_marg = out_hit.iter().filter(|&&h| h).count() as u64;
        Self {
            queries,
            out_hit,
            n_marg,
            lambda,
            min_support,
        }
    }

    fn score(&self, content: &[TokenId]) -> AssocEstimate {
        let (mut cond, mut joint) = (0u64, 0u64);
        for (q, &hit) in self.queries.iter().zip(&self.out_hit) {
            if is_subsequence(content, q) {
                cond += 1;
                joint += u64::from(hit);
            }
        }
        AssocEstimate::from_counts(
            joint,
            cond,
            self.n_marg,
            self.queries.len() as u64,
            self.lambda,
            self.min_support,
        )
    }
}

#[derive(Debug, Clone)]
struct Scored {
    content: Vec<TokenId>,
    positions: Vec<usize>,
    est: AssocEstimate,
}

impl Scored {
    fn admissible(&self) -> bool {
        self.est.psi.is_some() && !self.est.low_support
    }

    fn row(&self) -> TraceRow {
        TraceRow {
            length: self.content.len(),
            best: SubSeq(self.content.clone()),
            positions: self.positions.clone(),
            estimate: self.est.clone(),
        }
    }
}

/// psi desc, n_joint desc, positions asc.
fn rank(a: &Scored, b: &Scored) -> Ordering {
    let (pa, pb) = (a.est.psi.unwrap_or(f64::NEG_INFINITY), b.est.psi.unwrap_or(f64::NEG_INFINITY));
    pb.partial_cmp(&pa)
        .unwrap_or(Ordering::Equal)
        .then(b.est.n_joint.cmp(&a.est.n_joint))
        .then_with(|| a.positions.cmp(&b.positions))
}

fn resolve_region(prompt: &[TokenId], params: &TraceParams) -> Result<Range<usize>, TraceError> {
    let region = params.candidate_region.clone().unwrap_or(0..prompt.len());
    if region.end > prompt.len() || region.start > region.end {
        return Err(TraceError::Params(format!(
            "candidate region {region:?} outside a query of {} tokens",
            prompt.len()
        )));
    }
    if region.is_empty() {
        return Err(TraceError::EmptyRegion);
    }
    Ok(region)
}

fn check_inputs(
    prompt: &[TokenId],
    template: &PromptTemplate,
    target: &[TokenId],
    corpus: &PerturbationCorpus,
) -> Result<(), TraceError> {
    if target.is_empty() {
        return Err(TraceError::EmptyTarget);
    }
    if corpus.is_empty() {
        return Err(TraceError::EmptyCorpus);
    }
    let fp = prompt_fingerprint(prompt, template);
    if fp != corpus.fingerprint {
        return Err(TraceError::FingerprintMismatch {
            corpus: corpus.fingerprint.clone(),
            prompt: fp,
        });
    }
    Ok(())
}

/// Score candidate position sets, collapse equal contents onto their
/// smallest position vector, and return admissible ones in rank order.
fn score_candidates(prompt: &[TokenId], cands: Vec<Vec<usize>>, scorer: &Scorer<'_>) -> (Vec<Scored>, usize) {
    let mut by_content: BTreeMap<Vec<TokenId>, Vec<usize>> = BTreeMap::new();
    for pos in cands {
        let content: Vec<TokenId> = pos.iter().map(|&i| prompt[i]).collect();
        by_content
            .entry(content)
            .and_modify(|p| {
                if pos < *p {
                    *p = pos.clone();
                }
            })
            .or_insert(pos);
    }
    let visited = by_content.len();
    let mut scored: Vec<Scored> = by_content
        .into_par_iter()
        .map(|(content, positions)| {
            let est = scorer.score(&content);
            Scored { content, positions, est }
        })
        .filter(Scored::admissible)
        .collect();
    scored.sort_by(rank);
    (scored, visited)
}

/// Beam search over query subsequences, keeping `beam_width` candidates per
/// length and storing the top of each beam.
pub fn sat_trace(
    prompt: &TokenSeq,
    template: &PromptTemplate,
    target: &[TokenId],
    corpus: &PerturbationCorpus,
    params: &TraceParams,
) -> Result<TraceResult, TraceError> {
    check_inputs(prompt, template, target, corpus)?;
    let region = resolve_region(prompt, params)?;
    if params.beam_width == 0 {
        return Err(TraceError::Params("beam_width must be at least 1".into()));
    }
    if params.max_len == 0 || params.max_len > region.len() {
        return Err(TraceError::Params(format!(
            "max_len {} must be in 1..={}",
            params.max_len,
            region.len()
        )));
    }
    let scorer = Scorer::new(corpus, target, params.lambda, params.min_support);

    let mut per_length = Vec::new();
    let mut best_visited: Option<Scored> = None;
    let mut stopped_early_at = None;
    let mut visited = 0;
    let mut best_so_far = f64::NEG_INFINITY;
    let mut stale = 0;
    let mut beam: Vec<Vec<usize>> = Vec::new();

    for k in 1..=params.max_len {
        let cands: Vec<Vec<usize>> = if k == 1 {
            region.clone().map(|i| vec![i]).collect()
        } else {
            let mut c = Vec::new();
            for member in &beam {
                for j in region.clone() {
                    if let Err(at) = member.binary_search(&j) {
                        let mut p = member.clone();
                        p.insert(at, j);
                        c.push(p);
                    }
                }
            }
            c
        };
        let (scored, n) = score_candidates(prompt, cands, &scorer);
        visited += n;
        let Some(top) = scored.first() else {
            // No admissible candidate at this length.
            stopped_early_at = Some(k);
            break;
        };
        if best_visited.as_ref().is_none_or(|b| rank(top, b) == Ordering::Less) {
            best_visited = Some(top.clone());
        }
        per_length.push(top.row());
        let top_psi = top.est.psi.expect("admissible");
        if top_psi > best_so_far {
            best_so_far = top_psi;
            stale = 0;
        } else {
            stale += 1;
        }
        beam = scored.into_iter().take(params.beam_width).map(|s| s.positions).collect();
        if stale >= params.early_stop_patience && k < params.max_len {
            stopped_early_at = Some(k);
            break;
        }
    }

    Ok(TraceResult {
        schema: TRACE_SCHEMA.into(),
        params: params.clone(),
        corpus_fingerprint: corpus.fingerprint.clone(),
        target: target.into(),
        per_length,
        best_visited: best_visited.map(|s| s.row()),
        stopped_early_at,
        visited,
    })
}

/// Exact per-length argmax over every distinct subsequence of the candidate
/// region up to `max_len`, under the same ranking as [`sat_trace`].
pub fn brute_force_trace(
    prompt: &TokenSeq,
    template: &PromptTemplate,
    target: &[TokenId],
    corpus: &PerturbationCorpus,
    params: &TraceParams,
    cap: usize,
) -> Result<TraceResult, TraceError> {
    check_inputs(prompt, template, target, corpus)?;
    let region = resolve_region(prompt, params)?;
    if params.max_len == 0 {
        return Err(TraceError::Params("max_len must be at least 1".into()));
    }
    let host = &prompt[region.clone()];
    let all = enumerate_subsequences(host, params.max_len, cap.max(1));
    if all.truncated {
        return Err(TraceError::CapExceeded { cap });
    }
    let scorer = Scorer::new(corpus, target, params.lambda, params.min_support);
    let mut scored: Vec<Scored> = all
        .items
        .into_par_iter()
        .map(|content| {
            let positions = match_positions(&content, host)
                .expect("enumerated subsequences are contained")
                .into_iter()
                .map(|i| i + region.start)
                .collect();
            let est = scorer.score(&content);
            Scored {
                content: content.into_inner(),
                positions,
                est,
            }
        })
        .filter(Scored::admissible)
        .collect();
    let visited = scored.len();
    scored.sort_by(|a, b| a.content.len().cmp(&b.content.len()).then_with(|| rank(a, b)));
    let mut per_length: Vec<TraceRow> = Vec::new();
    for s in &scored {
        if per_length.last().is_none_or(|r| r.length != s.content.len()) {
            per_length.push(s.row());
        }
    }
    let best_visited = scored.iter().min_by(|a, b| rank(a, b)).map(|s| s.row());
    Ok(TraceResult {
        schema: TRACE_SCHEMA.into(),
        params: params.clone(),
        corpus_fingerprint: corpus.fingerprint.clone(),
        target: target.into(),
        per_length,
        best_visited,
        stopped_early_at: None,
        visited,
    })
}
