//! Subsequence association estimates, reproduction rates, and the
//! log-probability factorization check on analytic generators.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::genclient::{GenError, RuleGenerator, TextGenerator};
use crate::perturb::{eval_input, generation_seed, EvalMode, OracleSet, PerturbError, PerturbationCorpus, PromptTemplate};
use crate::seq::{is_subsequence, SubSeq, TokenId, TokenSeq};

pub const ASSOC_SCHEMA: &str = "subtrace-assoc/1";
pub const DEFAULT_LAMBDA: f64 = 0.5;
pub const DEFAULT_MIN_SUPPORT: u64 = 8;

#[derive(Debug, Error)]
pub enum AssocError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("smoothing constant must be non-negative, got {0}")]
    BadLambda(f64),
    #[error("n_per_mode must be at least 1")]
    NoSamples,
    #[error("generator: {0}")]
    Generator(#[from] GenError),
    #[error("oracle for mode {mode}: {source}")]
    Oracle {
        mode: &'static str,
        #[source]
        source: PerturbError,
    },
    #[error("independence precondition violated: {0}")]
    Precondition(String),
    #[error("target has zero marginal probability; the log terms are undefined")]
    ZeroMarginal,
}

/// Smoothed association estimate with the counts behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssocEstimate {
    /// Natural-log association; `None` when undefined (only possible with λ = 0).
    #[serde(with = "crate::sig17::opt")]
    pub psi: Option<f64>,
    pub n_cond: u64,
    pub n_joint: u64,
    pub n_marg: u64,
    pub n_total: u64,
    #[serde(with = "crate::sig17")]
    pub lambda: f64,
    pub low_support: bool,
}

impl AssocEstimate {
    /// `ln((j+λ)/(c+2λ)) − ln((m+λ)/(t+2λ))`.
    pub fn from_counts(n_joint: u64, n_cond: u64, n_marg: u64, n_total: u64, lambda: f64, min_support: u64) -> Self {
        debug_assert!(n_joint <= n_cond && n_cond <= n_total && n_marg <= n_total);
        let ratio = |num: u64, den: u64| {
            let (n, d) = (num as f64 + lambda, den as f64 + 2.0 * lambda);
            (n > 0.0 && d > 0.0).then(|| n / d)
        };
        let psi = match (ratio(n_joint, n_cond), ratio(n_marg, n_total)) {
            (Some(c), Some(m)) => Some(c.ln() - m.ln()),
            _ => None,
        };
        Self {
            psi,
            n_cond,
            n_joint,
            n_marg,
            n_total,
            lambda,
            low_support: n_cond < min_support,
        }
    }

    /// Score used for ranking: low-support or undefined estimates rank last.
    pub fn score(&self) -> f64 {
        match self.psi {
            Some(p) if !self.low_support => p,
            _ => f64::NEG_INFINITY,
        }
    }
}

/// Per-entry containment flags of `trigger` in the query and `target` in the output.
pub fn containment_counts(corpus: &PerturbationCorpus, trigger: &[TokenId], target: &[TokenId]) -> (u64, u64, u64) {
    (0..corpus.len())
        .into_par_iter()
        .map(|i| {
            let c = is_subsequence(trigger, corpus.query(i));
            let o = is_subsequence(target, &corpus.entries[i].output_token_ids);
            (u64::from(c), u64::from(c && o), u64::from(o))
        })
        .reduce(|| (0, 0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2))
}

/// Estimate the association between `trigger` in the (perturbed) query and
/// `target` in the output, over every corpus entry.
///
/// Conditioning uses actual containment in each entry's query region, not the
/// recorded kept positions: a refill may recreate a dropped token.
pub fn estimate_psi(
    corpus: &PerturbationCorpus,
    trigger: &[TokenId],
    target: &[TokenId],
    lambda: f64,
) -> Result<AssocEstimate, AssocError> {
    estimate_psi_with_support(corpus, trigger, target, lambda, DEFAULT_MIN_SUPPORT)
}

pub fn estimate_psi_with_support(
    corpus: &PerturbationCorpus,
    trigger: &[TokenId],
    target: &[TokenId],
    lambda: f64,
    min_support: u64,
) -> Result<AssocEstimate, AssocError> {
    if corpus.is_empty() {
        return Err(AssocError::EmptyCorpus);
    }
    if !(lambda >= 0.0) {
        return Err(AssocError::BadLambda(lambda));
    }
    let (n_cond, n_joint, n_marg) = containment_counts(corpus, trigger, target);
    Ok(AssocEstimate::from_counts(
        n_joint,
        n_cond,
        n_marg,
        corpus.len() as u64,
        lambda,
        min_support,
    ))
}

/// A serialized association report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssocReport {
    pub schema: String,
    pub corpus_fingerprint: String,
    pub trigger: SubSeq,
    pub target: SubSeq,
    pub estimate: AssocEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRate {
    #[serde(with = "crate::sig17::opt")]
    pub rate: Option<f64>,
    pub n_hits: u64,
    pub n_valid: u64,
    /// Samples excluded because the oracle broke the kept-token contract.
    pub n_invalid: u64,
}

/// Reproduction rates of a target under the evaluation distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrepReport {
    pub schema: String,
    pub trigger: SubSeq,
    pub target: SubSeq,
    pub target_len: usize,
    pub n_per_mode: usize,
    pub seed: u64,
    pub per_mode: BTreeMap<String, ModeRate>,
    /// Mean rate over the modes that produced a rate.
    #[serde(with = "crate::sig17::opt")]
    pub s_rep: Option<f64>,
    /// True when fewer than all four modes contributed.
    pub partial: bool,
    pub missing_modes: Vec<String>,
}

#[derive(Debug, Clone, Copy)]
pub struct SrepOptions {
    pub retry_budget: u32,
    pub max_in_flight: usize,
}

impl Default for SrepOptions {
    fn default() -> Self {
        Self {
            retry_budget: 3,
            max_in_flight: 8,
        }
    }
}

fn sample_seed(seed: u64, mode: EvalMode, j: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(mode.as_str().as_bytes());
    h.update((j as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Measure how often `target` appears in outputs for inputs that contain
/// `trigger`, under each evaluation distribution with an available oracle.
#[allow(clippy::too_many_arguments)]
pub fn eval_srep(
    trigger: &[TokenId],
    target: &[TokenId],
    target_len: usize,
    template: &PromptTemplate,
    gen: &dyn TextGenerator,
    oracles: &OracleSet,
    n_per_mode: usize,
    seed: u64,
    opts: &SrepOptions,
) -> Result<SrepReport, AssocError> {
    if n_per_mode == 0 {
        return Err(AssocError::NoSamples);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.max_in_flight.max(1))
        .build()
        .map_err(|e| AssocError::Generator(GenError::Other(e.to_string())))?;

    let mut per_mode = BTreeMap::new();
    let mut missing = Vec::new();
    for mode in EvalMode::ALL {
        if !mode.available(oracles) {
            missing.push(mode.as_str().to_owned());
            continue;
        }
        // Some(true/false) = valid hit/miss, None = contract violation.
        let outcomes: Vec<Result<Option<bool>, AssocError>> = pool.install(|| {
            (0..n_per_mode)
                .into_par_iter()
                .map(|j| {
                    let s = sample_seed(seed, mode, j);
                    let input = match eval_input(mode, trigger, target_len, oracles, s, opts.retry_budget) {
                        Ok(v) => v,
                        Err(PerturbError::ContractViolation { .. }) => return Ok(None),
                        Err(source) => {
                            return Err(AssocError::Oracle {
                                mode: mode.as_str(),
                                source,
                            })
                        }
                    };
                    let out = gen.generate(&template.render(&input), generation_seed(s))?;
                    Ok(Some(is_subsequence(target, &out)))
                })
                .collect()
        });
        let mut rate = ModeRate {
            rate: None,
            n_hits: 0,
            n_valid: 0,
            n_invalid: 0,
        };
        for o in outcomes {
            match o? {
                Some(hit) => {
                    rate.n_valid += 1;
                    rate.n_hits += u64::from(hit);
                }
                None => rate.n_invalid += 1,
            }
        }
        if rate.n_valid > 0 {
            rate.rate = Some(rate.n_hits as f64 / rate.n_valid as f64);
        } else {
            missing.push(mode.as_str().to_owned());
        }
        per_mode.insert(mode.as_str().to_owned(), rate);
    }
    let rates: Vec<f64> = per_mode.values().filter_map(|r| r.rate).collect();
    let s_rep = (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64);
    Ok(SrepReport {
        schema: ASSOC_SCHEMA.into(),
        trigger: trigger.into(),
        target: target.into(),
        target_len,
        n_per_mode,
        seed,
        per_mode,
        s_rep,
        partial: rates.len() < EvalMode::ALL.len(),
        missing_modes: missing,
    })
}

/// Outcome of the factorization check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizationReport {
    /// Indices into the trigger set of the triggers present in the input.
    pub present: Vec<usize>,
    #[serde(with = "crate::sig17")]
    pub lhs: f64,
    #[serde(with = "crate::sig17")]
    pub rhs: f64,
    #[serde(with = "crate::sig17")]
    pub log_marginal: f64,
    pub psi: Vec<f64>,
    #[serde(with = "crate::sig17")]
    pub residual: f64,
}

/// Tolerance for the exact-enumeration independence checks.
const INDEPENDENCE_TOL: f64 = 1e-12;

/// Compare `log P(õ | present triggers)` with `log P(õ) + Σ Ψ` exactly.
///
/// Inputs are drawn by including each trigger of `trigger_set` independently
/// with probability 1/2 and concatenating the included ones in order. The
/// triggers present in `input` are conditioned on; the rest are marginalized.
/// Every probability is obtained by enumerating the `2^k` inclusion patterns
/// with [`RuleGenerator::exact_output_prob`]. The generator is refused when the
/// trigger events are not independent, or not conditionally independent given
/// `õ ⊑ o`, under this distribution.
pub fn factorization_check(
    gen: &RuleGenerator,
    input: &[TokenId],
    target: &[TokenId],
    trigger_set: &[SubSeq],
) -> Result<FactorizationReport, AssocError> {
    let k = trigger_set.len();
    if k > 16 {
        return Err(AssocError::Precondition(format!("{k} triggers exceed the enumeration limit of 16")));
    }
    let n = 1usize << k;
    let weight = 1.0 / n as f64;
    // q[z] = P(õ ⊑ o | inclusion pattern z)
    let mut q = vec![0.0; n];
    for (z, qz) in q.iter_mut().enumerate() {
        let s: TokenSeq = (0..k)
            .filter(|i| z >> i & 1 == 1)
            .flat_map(|i| trigger_set[i].iter().copied())
            .collect();
        for (i, t) in trigger_set.iter().enumerate() {
            if is_subsequence(t, &s) != (z >> i & 1 == 1) {
                return Err(AssocError::Precondition(format!(
                    "trigger {i} is {} in inclusion pattern {z:#b}; trigger events must coincide with inclusion",
                    if z >> i & 1 == 1 { "missing" } else { "formed by other triggers" }
                )));
            }
        }
        *qz = gen.exact_output_prob(&s, target)?;
    }
    let p_o: f64 = q.iter().sum::<f64>() * weight;
    if p_o <= 0.0 {
        return Err(AssocError::ZeroMarginal);
    }

    // Conditional independence given õ: P(z | õ) must factor over triggers.
    let post: Vec<f64> = q.iter().map(|&x| x * weight / p_o).collect();
    let marg: Vec<f64> = (0..k)
        .map(|i| (0..n).filter(|z| z >> i & 1 == 1).map(|z| post[z]).sum())
        .collect();
    for (z, &pz) in post.iter().enumerate() {
        let prod: f64 = (0..k)
            .map(|i| if z >> i & 1 == 1 { marg[i] } else { 1.0 - marg[i] })
            .product();
        if (pz - prod).abs() > INDEPENDENCE_TOL {
            return Err(AssocError::Precondition(format!(
                "triggers are not conditionally independent given the target: P(pattern {z:#b} | target) = {} but the product of marginals is {prod}",
                pz
            )));
        }
    }

    let present: Vec<usize> = (0..k).filter(|&i| is_subsequence(&trigger_set[i], input)).collect();
    let cond_mean = |mask: usize| -> f64 {
        let zs: Vec<usize> = (0..n).filter(|z| z & mask == mask).collect();
        zs.iter().map(|&z| q[z]).sum::<f64>() / zs.len() as f64
    };
    let present_mask = present.iter().fold(0usize, |m, &i| m | 1 << i);
    let p_joint = cond_mean(present_mask);
    if p_joint <= 0.0 {
        return Err(AssocError::ZeroMarginal);
    }
    let mut psi = Vec::with_capacity(present.len());
    for &i in &present {
        let c = cond_mean(1 << i);
        if c <= 0.0 {
            return Err(AssocError::ZeroMarginal);
        }
        psi.push((c / p_o).ln());
    }
    let lhs = p_joint.ln();
    let rhs = p_o.ln() + psi.iter().sum::<f64>();
    Ok(FactorizationReport {
        present,
        lhs,
        rhs,
        log_marginal: p_o.ln(),
        psi,
        residual: (lhs - rhs).abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genclient::{Combine, FnGenerator, Rule};
    use crate::perturb::{CorpusEntry, FnComposeOracle, FnFillOracle, MaskedSeq, PerturbMode, PerturbSpec};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn corpus_from(rows: &[(Vec<TokenId>, Vec<TokenId>)]) -> PerturbationCorpus {
        let entries = rows
            .iter()
            .enumerate()
            .map(|(i, (inp, out))| CorpusEntry {
                entry_index: i,
                seed: i as u64,
                resamples: 0,
                input_token_ids: inp.clone().into(),
                kept_origin_indices: vec![],
                output_token_ids: out.clone().into(),
                generator_fingerprint: "test".into(),
            })
            .collect();
        PerturbationCorpus::new(
            TokenSeq::from([1, 2]),
            PromptTemplate::default(),
            PerturbSpec::new(PerturbMode::RandFill, 0.5, rows.len(), 0),
            entries,
        )
    }

    #[test]
    fn conditional_equal_to_marginal_gives_zero() {
        let rows: Vec<_> = (0..10)
            .map(|i| (if i % 2 == 0 { vec![1, 2] } else { vec![3] }, vec![9]))
            .collect();
        let c = corpus_from(&rows);
        let e = estimate_psi(&c, &[1], &[9], 0.0).unwrap();
        assert_eq!((e.n_cond, e.n_joint, e.n_marg, e.n_total), (5, 5, 10, 10));
        assert_eq!(e.psi, Some(0.0));
        // With smoothing the two ratios shrink by different amounts:
        // ln(5.5/6) − ln(10.5/11) at λ = 0.5.
        let e = estimate_psi(&c, &[1], &[9], 0.5).unwrap();
        let expected = (5.5f64 / 6.0).ln() - (10.5f64 / 11.0).ln();
        assert!((e.psi.unwrap() - expected).abs() < 1e-15);
        assert!(e.psi.unwrap() < 0.0);
    }

    #[test]
    fn half_rate_conditionals_are_zero_for_any_lambda() {
        // j/c = m/t = 1/2 is the proportional case smoothing leaves at zero.
        for lambda in [0.0, 0.5, 3.0] {
            let e = AssocEstimate::from_counts(4, 8, 50, 100, lambda, 0);
            assert!(e.psi.unwrap().abs() < 1e-15);
        }
    }

    #[test]
    fn perfect_trigger_closed_form() {
        // n_joint = n_cond = 256, n_marg = 256, n_total = 512, λ = 0.5:
        // ln(256.5/257) − ln(256.5/513) = ln(513/257).
        let e = AssocEstimate::from_counts(256, 256, 256, 512, 0.5, 8);
        let expected = (513.0f64 / 257.0).ln();
        assert!((e.psi.unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn undefined_without_smoothing() {
        let e = AssocEstimate::from_counts(0, 0, 3, 10, 0.0, 8);
        assert_eq!(e.psi, None);
        assert_eq!(e.score(), f64::NEG_INFINITY);
        let e = AssocEstimate::from_counts(0, 4, 0, 10, 0.0, 8);
        assert_eq!(e.psi, None);
    }

    #[test]
    fn low_support_flag() {
        assert!(AssocEstimate::from_counts(3, 7, 5, 100, 0.5, 8).low_support);
        assert!(!AssocEstimate::from_counts(3, 8, 5, 100, 0.5, 8).low_support);
    }

    #[test]
    fn condition_uses_query_region_only() {
        let mut c = corpus_from(&[(vec![5, 1], vec![9]), (vec![5, 2], vec![8])]);
        c.template = PromptTemplate::new(vec![5], vec![]);
        let e = estimate_psi(&c, &[5], &[9], 0.5).unwrap();
        assert_eq!(e.n_cond, 0);
    }

    #[test]
    fn report_uses_seventeen_digits() {
        let e = AssocEstimate::from_counts(256, 256, 256, 512, 0.5, 8);
        let s = serde_json::to_string(&e).unwrap();
        assert!(s.contains("\"psi\":6.9119"), "{s}");
        assert!(s.contains("\"lambda\":5.0000000000000000e-1"), "{s}");
        let back: AssocEstimate = serde_json::from_str(&s).unwrap();
        assert_eq!(back, e);
    }

    fn all_mock_oracles() -> OracleSet {
        let fill = |name: &str| -> Arc<dyn crate::perturb::FillOracle> {
            Arc::new(FnFillOracle(name.to_owned(), |m: &MaskedSeq, _| Ok(m.fill_with(|_| 50))))
        };
        OracleSet {
            bert: Some(fill("bert")),
            rand: Some(fill("rand")),
            gpt_m: Some(fill("gpt-m")),
            gpt_t: Some(Arc::new(FnComposeOracle("gpt-t".into(), |s: &[TokenId], _| Ok(TokenSeq::from(s))))),
            ..Default::default()
        }
    }

    #[test]
    fn srep_all_or_nothing() {
        let always = RuleGenerator::new(vec![Rule::new([1, 2], [9], 1.0)], [0], Combine::IndependentOr);
        let r = eval_srep(&[1, 2], &[9], 6, &PromptTemplate::default(), &always, &all_mock_oracles(), 25, 0, &SrepOptions::default()).unwrap();
        assert_eq!(r.s_rep, Some(1.0));
        assert!(!r.partial);
        assert!(r.per_mode.values().all(|m| m.rate == Some(1.0) && m.n_valid == 25));

        let never = RuleGenerator::new(vec![], [0], Combine::IndependentOr);
        let r = eval_srep(&[1, 2], &[9], 6, &PromptTemplate::default(), &never, &all_mock_oracles(), 25, 0, &SrepOptions::default()).unwrap();
        assert_eq!(r.s_rep, Some(0.0));
    }

    #[test]
    fn srep_partial_when_mode_missing() {
        let mut o = all_mock_oracles();
        o.gpt_m = None;
        let g = RuleGenerator::new(vec![Rule::new([1], [9], 1.0)], [0], Combine::IndependentOr);
        let r = eval_srep(&[1], &[9], 4, &PromptTemplate::default(), &g, &o, 5, 0, &SrepOptions::default()).unwrap();
        assert!(r.partial);
        assert_eq!(r.missing_modes, vec!["gpt-m".to_string()]);
        assert_eq!(r.per_mode.len(), 3);
    }

    #[test]
    fn srep_excludes_contract_violations() {
        let mut o = all_mock_oracles();
        o.gpt_t = Some(Arc::new(FnComposeOracle("bad".into(), |s: &[TokenId], _| {
            Ok(s.iter().rev().copied().collect())
        })));
        let g = RuleGenerator::new(vec![Rule::new([1, 2], [9], 1.0)], [0], Combine::IndependentOr);
        let r = eval_srep(&[1, 2], &[9], 4, &PromptTemplate::default(), &g, &o, 5, 0, &SrepOptions::default()).unwrap();
        let t = &r.per_mode["gpt-t"];
        assert_eq!((t.n_valid, t.n_invalid, t.rate), (0, 5, None));
        assert!(r.partial);
        assert_eq!(r.s_rep, Some(1.0));
    }

    #[test]
    fn srep_generator_error_propagates() {
        let g = FnGenerator::new("down", |_: &[TokenId], _| Err(GenError::Other("down".into())));
        let r = eval_srep(&[1], &[9], 2, &PromptTemplate::default(), &g, &all_mock_oracles(), 2, 0, &SrepOptions::default());
        assert!(matches!(r, Err(AssocError::Generator(_))));
    }

    fn suppressors(ps: &[f64]) -> (RuleGenerator, Vec<SubSeq>) {
        // Base output is the target; each trigger independently suppresses it.
        let rules = ps
            .iter()
            .enumerate()
            .map(|(i, &p)| Rule::new([10 + i as TokenId], [100 + i as TokenId], p))
            .collect();
        let triggers = (0..ps.len()).map(|i| SubSeq::from([10 + i as TokenId])).collect();
        (RuleGenerator::new(rules, [7], Combine::IndependentOr), triggers)
    }

    #[test]
    fn factorization_zero_and_one_trigger() {
        let (g, t) = suppressors(&[0.4, 0.7]);
        let r = factorization_check(&g, &[], &[7], &t).unwrap();
        assert!(r.present.is_empty());
        assert_eq!(r.residual, 0.0);
        assert_eq!(r.lhs, r.log_marginal);
        let r = factorization_check(&g, &[10], &[7], &t).unwrap();
        assert_eq!(r.present, vec![0]);
        assert!(r.residual < 1e-12);
    }

    #[test]
    fn factorization_three_triggers() {
        let (g, t) = suppressors(&[0.3, 0.55, 0.9]);
        let r = factorization_check(&g, &[12, 10, 11], &[7], &t).unwrap();
        assert_eq!(r.present, vec![0, 1, 2]);
        // Hand value: LHS = ln(0.7 * 0.45 * 0.1).
        assert!((r.lhs - (0.7f64 * 0.45 * 0.1).ln()).abs() < 1e-12);
        assert!(r.residual < 1e-9);
    }

    #[test]
    fn factorization_refuses_dependent_generator() {
        // Two promoters of the same target token are not conditionally
        // independent given the target.
        let g = RuleGenerator::new(
            vec![Rule::new([10], [7], 1.0), Rule::new([11], [7], 1.0)],
            [0],
            Combine::IndependentOr,
        );
        let t = vec![SubSeq::from([10]), SubSeq::from([11])];
        let r = factorization_check(&g, &[10, 11], &[7], &t);
        assert!(matches!(r, Err(AssocError::Precondition(_))), "{r:?}");
    }

    #[test]
    fn factorization_refuses_overlapping_triggers() {
        let (g, _) = suppressors(&[0.5, 0.5]);
        let t = vec![SubSeq::from([10]), SubSeq::from([10, 11])];
        assert!(matches!(factorization_check(&g, &[10], &[7], &t), Err(AssocError::Precondition(_))));
    }

    proptest! {
        #[test]
        fn psi_increases_with_joint(j in 0u64..50, extra in 1u64..50, m in 0u64..100, lambda in 0.01f64..5.0) {
            let c = j + extra;
            let t = c.max(m) + 10;
            let a = AssocEstimate::from_counts(j, c, m, t, lambda, 0).psi.unwrap();
            let b = AssocEstimate::from_counts(j + 1, c, m, t, lambda, 0).psi.unwrap();
            prop_assert!(b > a);
        }

        #[test]
        fn proportional_counts(a in 1u64..20, b in 1u64..20, scale in 1u64..20, lambda in 0.01f64..5.0) {
            // j/c = m/t with j = a, c = a + b, m = a * scale, t = (a + b) * scale.
            // Unsmoothed psi is zero; smoothed psi is zero exactly when
            // scale = 1 or c = 2j.
            let (j, c, m, t) = (a, a + b, a * scale, (a + b) * scale);
            let raw = AssocEstimate::from_counts(j, c, m, t, 0.0, 0).psi.unwrap();
            prop_assert!(raw.abs() < 1e-12);
            let smoothed = AssocEstimate::from_counts(j, c, m, t, lambda, 0).psi.unwrap();
            let zero = scale == 1 || c == 2 * j;
            prop_assert_eq!(smoothed.abs() < 1e-12, zero, "psi {}", smoothed);
        }

        #[test]
        fn heavy_smoothing_goes_to_zero(j in 0u64..50, c in 50u64..100, m in 0u64..100) {
            let e = AssocEstimate::from_counts(j, c, m, 100, 1e12, 0);
            prop_assert!(e.psi.unwrap().abs() < 1e-9);
        }

        #[test]
        fn factorization_holds_for_random_suppressors(ps in prop::collection::vec(0.0f64..0.99, 1..6), mask in any::<u8>()) {
            let (g, t) = suppressors(&ps);
            let input: Vec<TokenId> = (0..ps.len()).filter(|i| mask >> i & 1 == 1).map(|i| 10 + i as TokenId).collect();
            let r = factorization_check(&g, &input, &[7], &t).unwrap();
            prop_assert!(r.residual < 1e-9);
        }
    }
}
