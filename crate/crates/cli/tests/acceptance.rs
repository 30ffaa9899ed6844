//! Acceptance suite. Every criterion prints one `PASS`/`FAIL` line to the
//! real stderr (bypassing the test harness capture) and then asserts.
//! Tolerances and sizes are pinned as constants next to each test.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::index;
use rand::rngs::StdRng;
use rand::{Rng as _, SeedableRng};
use subtrace_core::assoc::{eval_srep, estimate_psi, factorization_check, SrepOptions, DEFAULT_LAMBDA};
use subtrace_core::corpus_stats::{scan_conditional, CorpusQuery, DocGranularity, ScanOptions};
use subtrace_core::genclient::{Combine, Rule};
use subtrace_core::perturb::{build_perturbation_corpus, BuildOptions, OracleSet, PaddingComposeOracle, RandFillOracle};
use subtrace_core::theory::block::run_detector;
use subtrace_core::theory::gradient::{gradient_bound_check_all, random_instance, FD_REL_TOL};
use subtrace_core::theory::{build_pair_detector, pair_detector_bound, required_dimension, sample_near_orthogonal};
use subtrace_core::tokenizer::WhitespaceTokenizer;
use subtrace_core::tracer::brute_force_trace;
use subtrace_core::{
    is_subsequence, sat_trace, PerturbMode, PerturbSpec, PromptTemplate, RuleGenerator, SubSeq, TokenId, TokenSeq,
    TraceParams,
};

/// Test-side RNG, a different generator from the library's streams.
fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    let line = format!("ACCEPTANCE {id:>2} {} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

/// Quadratic-table subsequence test, independent of the library matcher.
fn dp_subseq(p: &[TokenId], s: &[TokenId]) -> bool {
    let mut ok = vec![vec![false; s.len() + 1]; p.len() + 1];
    ok[0].fill(true);
    for i in 1..=p.len() {
        for j in 1..=s.len() {
            ok[i][j] = ok[i][j - 1] || (ok[i - 1][j - 1] && p[i - 1] == s[j - 1]);
        }
    }
    ok[p.len()][s.len()]
}

// 1 -------------------------------------------------------------------------

const C1_PAIRS: usize = 10_000;
const C1_MAX_HOST: usize = 64;
const C1_TIME: Duration = Duration::from_secs(5);

#[test]
fn c01_subsequence_oracle_equivalence() {
    let mut r = rng(1);
    let start = Instant::now();
    let (mut mismatches, mut positives) = (0, 0);
    for _ in 0..C1_PAIRS {
        let alphabet = r.random_range(1..=6);
        let host: Vec<TokenId> = (0..r.random_range(0..=C1_MAX_HOST)).map(|_| r.random_range(0..alphabet)).collect();
        let needle: Vec<TokenId> = (0..r.random_range(0..=10)).map(|_| r.random_range(0..alphabet)).collect();
        let want = dp_subseq(&needle, &host);
        positives += usize::from(want);
        mismatches += usize::from(is_subsequence(&needle, &host) != want);
    }
    let t = start.elapsed();
    verdict(
        1,
        "subsequence oracle equivalence",
        mismatches == 0 && t < C1_TIME && positives > C1_PAIRS / 10,
        &format!("{mismatches} mismatches over {C1_PAIRS} pairs ({positives} contained), {t:.2?}"),
    );
}

// 2 -------------------------------------------------------------------------

const C2_CORPUS: usize = 20_000;
const C2_TOL: f64 = 0.05;
const C2_TIME: Duration = Duration::from_secs(120);

struct PsiCase {
    prompt: Vec<TokenId>,
    rules: Vec<(Vec<TokenId>, Vec<TokenId>, f64)>,
    base: Vec<TokenId>,
    combine: Combine,
    mask_prob: f64,
    trigger: Vec<TokenId>,
    target: Vec<TokenId>,
}

fn psi_cases() -> Vec<PsiCase> {
    use Combine::{FirstMatch, IndependentOr};
    let seq = |n: TokenId| (0..n).collect::<Vec<_>>();
    let case = |prompt, rules, base: &[TokenId], combine, mask_prob, trigger: &[TokenId], target: &[TokenId]| PsiCase {
        prompt,
        rules,
        base: base.to_vec(),
        combine,
        mask_prob,
        trigger: trigger.to_vec(),
        target: target.to_vec(),
    };
    vec![
        case(seq(8), vec![(vec![1, 4], vec![300], 0.8)], &[301], IndependentOr, 0.3, &[1, 4], &[300]),
        case(seq(10), vec![(vec![2], vec![300], 0.6)], &[301], IndependentOr, 0.5, &[2], &[300]),
        case(
            seq(10),
            vec![(vec![0, 3], vec![300], 0.7), (vec![5], vec![301], 0.5)],
            &[302],
            IndependentOr,
            0.3,
            &[0, 3, 5],
            &[300, 301],
        ),
        case(
            seq(8),
            vec![(vec![1], vec![300], 0.9), (vec![6], vec![302], 0.9)],
            &[301],
            FirstMatch,
            0.3,
            &[6],
            &[302],
        ),
        // The rule suppresses the base emission, so the association is negative.
        case(seq(9), vec![(vec![3, 7], vec![301], 0.5)], &[300], IndependentOr, 0.4, &[3, 7], &[300]),
        case(seq(6), vec![(vec![0, 2, 4], vec![300], 1.0)], &[301], IndependentOr, 0.2, &[0, 2], &[300]),
        // Unrelated trigger: zero association.
        case(seq(8), vec![(vec![1], vec![300], 0.7)], &[301], IndependentOr, 0.5, &[5], &[300]),
        case(
            seq(7),
            vec![(vec![1], vec![300], 0.5), (vec![2], vec![300], 0.5)],
            &[301],
            IndependentOr,
            0.5,
            &[1, 2],
            &[300],
        ),
        case(seq(12), vec![(vec![4], vec![300, 301], 0.6)], &[302], IndependentOr, 0.4, &[4], &[300, 301]),
        case(
            vec![0, 1, 0, 2, 1, 3, 4, 0],
            vec![(vec![0, 1], vec![300], 0.7)],
            &[301],
            IndependentOr,
            0.5,
            &[1, 0],
            &[300],
        ),
    ]
}

/// Exact Ψ under independent per-token masking with fills drawn from tokens
/// no rule or trigger mentions: enumerate every keep pattern of the prompt.
fn analytic_psi(c: &PsiCase, gen: &RuleGenerator) -> f64 {
    let n = c.prompt.len();
    let (mut p_t, mut p_to, mut p_o) = (0.0, 0.0, 0.0);
    for keep in 0u32..(1 << n) {
        let kept: Vec<TokenId> = (0..n).filter(|i| keep >> i & 1 == 1).map(|i| c.prompt[i]).collect();
        let w = c.mask_prob.powi((n - kept.len()) as i32) * (1.0 - c.mask_prob).powi(kept.len() as i32);
        let q = gen.exact_output_prob(&kept, &c.target).unwrap();
        p_o += w * q;
        if dp_subseq(&c.trigger, &kept) {
            p_t += w;
            p_to += w * q;
        }
    }
    (p_to / p_t).ln() - p_o.ln()
}

#[test]
fn c02_psi_consistency() {
    let start = Instant::now();
    let fills: Vec<TokenId> = (100..200).collect();
    let oracles = OracleSet {
        rand: Some(Arc::new(RandFillOracle::new(fills).unwrap())),
        ..OracleSet::default()
    };
    let mut worst: f64 = 0.0;
    let mut lines = Vec::new();
    for (i, c) in psi_cases().iter().enumerate() {
        let rules = c.rules.iter().map(|(t, e, p)| Rule::new(t.clone(), e.clone(), *p)).collect();
        let gen = RuleGenerator::new(rules, c.base.clone(), c.combine);
        let spec = PerturbSpec::new(PerturbMode::RandFill, c.mask_prob, C2_CORPUS, 1000 + i as u64);
        let corpus = build_perturbation_corpus(
            &TokenSeq(c.prompt.clone()),
            &PromptTemplate::default(),
            &spec,
            &gen,
            &oracles,
            &BuildOptions::default(),
        )
        .unwrap();
        let est = estimate_psi(&corpus, &c.trigger, &c.target, DEFAULT_LAMBDA).unwrap().psi.unwrap();
        let exact = analytic_psi(c, &gen);
        worst = worst.max((est - exact).abs());
        lines.push(format!("{est:.4}/{exact:.4}"));
    }
    let t = start.elapsed();
    verdict(
        2,
        "psi consistency",
        worst <= C2_TOL && t < C2_TIME && lines.len() == 10,
        &format!("max |psi - analytic| = {worst:.4} (tol {C2_TOL}), estimate/exact {}, {t:.1?}", lines.join(" ")),
    );
}

// 3 -------------------------------------------------------------------------

const C3_RESIDUAL: f64 = 1e-9;
const C3_TIME: Duration = Duration::from_secs(1);

#[test]
fn c03_factorization() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut psi_err: f64 = 0.0;
    let ps = [0.35, 0.6, 0.85];
    for k in 1..=3 {
        // Each trigger independently suppresses the target base emission.
        let rules = (0..k).map(|i| Rule::new([10 + i as TokenId], [100 + i as TokenId], ps[i])).collect();
        let gen = RuleGenerator::new(rules, [7], Combine::IndependentOr);
        let triggers: Vec<SubSeq> = (0..k).map(|i| SubSeq::from([10 + i as TokenId])).collect();
        let input: Vec<TokenId> = (0..k).map(|i| 10 + i as TokenId).collect();
        let r = factorization_check(&gen, &input, &[7], &triggers).unwrap();
        worst = worst.max(r.residual);
        // Ψ_i = ln P(õ | i) - ln P(õ) = ln(1 - p_i) - ln(1 - p_i / 2).
        for (&i, &psi) in r.present.iter().zip(&r.psi) {
            let want = (1.0 - ps[i]).ln() - (1.0 - ps[i] / 2.0).ln();
            psi_err = psi_err.max((psi - want).abs());
        }
        let lhs: f64 = ps[..k].iter().map(|p| (1.0 - p).ln()).sum();
        psi_err = psi_err.max((r.lhs - lhs).abs());
    }
    let t = start.elapsed();
    verdict(
        3,
        "factorization",
        worst < C3_RESIDUAL && psi_err < C3_RESIDUAL && t < C3_TIME,
        &format!("max residual {worst:.2e}, max closed-form error {psi_err:.2e} with 1, 2, 3 triggers, {t:.2?}"),
    );
}

// 4 -------------------------------------------------------------------------

const C4_INSTANCES: u64 = 100;
const C4_REQUIRED: usize = 95;
const C4_CORPUS: usize = 512;
const C4_MASK: f64 = 0.5;
const C4_BEAM: usize = 20;
const C4_TIME: Duration = Duration::from_secs(600);

#[test]
fn c04_planted_trigger_recovery() {
    let start = Instant::now();
    let oracles = OracleSet {
        rand: Some(Arc::new(RandFillOracle::from_vocab(1000, &[]).unwrap())),
        ..OracleSet::default()
    };
    let params = TraceParams {
        beam_width: C4_BEAM,
        max_len: 4,
        ..TraceParams::default()
    };
    let depth1 = TraceParams {
        max_len: 1,
        ..params.clone()
    };
    let template = PromptTemplate::default();
    let (mut recovered, mut depth1_equal) = (0, 0);
    let mut misses = Vec::new();
    for inst in 0..C4_INSTANCES {
        let mut r = rng(4000 + inst);
        let n = r.random_range(8..=20);
        let prompt: Vec<TokenId> = (0..n).map(|_| r.random_range(0..50)).collect();
        let len = inst as usize % 4 + 1;
        let mut pos = index::sample(&mut r, n, len).into_vec();
        pos.sort_unstable();
        let trigger: Vec<TokenId> = pos.iter().map(|&i| prompt[i]).collect();
        let gen = RuleGenerator::new(vec![Rule::new(trigger.clone(), [900], 0.9)], [901], Combine::IndependentOr);
        let spec = PerturbSpec::new(PerturbMode::RandFill, C4_MASK, C4_CORPUS, inst);
        let prompt = TokenSeq(prompt);
        let corpus = build_perturbation_corpus(&prompt, &template, &spec, &gen, &oracles, &BuildOptions::default()).unwrap();
        let res = sat_trace(&prompt, &template, &[900], &corpus, &params).unwrap();
        if res.row(len).is_some_and(|row| row.best[..] == trigger[..]) {
            recovered += 1;
        } else {
            misses.push(inst);
        }
        let bf = brute_force_trace(&prompt, &template, &[900], &corpus, &depth1, 1 << 20).unwrap();
        depth1_equal += usize::from(res.row(1).is_some() && res.row(1) == bf.row(1));
    }
    let t = start.elapsed();
    verdict(
        4,
        "planted trigger recovery",
        recovered >= C4_REQUIRED && depth1_equal == C4_INSTANCES as usize && t < C4_TIME,
        &format!(
            "recovered {recovered}/{C4_INSTANCES} (need {C4_REQUIRED}, missed {misses:?}), depth-1 equal to brute force {depth1_equal}/{C4_INSTANCES}, {t:.1?}"
        ),
    );
}

// 5 -------------------------------------------------------------------------

const C5_P: f64 = 0.7;
const C5_N: usize = 100;
/// The nominal window; reported alongside the recomputed 3σ bound.
const C5_NOMINAL: f64 = 0.09;

#[test]
fn c05_srep_mock_calibration() {
    let bound = 3.0 * (C5_P * (1.0 - C5_P) / C5_N as f64).sqrt();
    let vocab = 50;
    let fill = || Arc::new(RandFillOracle::from_vocab(vocab, &[]).unwrap());
    let oracles = OracleSet {
        bert: Some(fill()),
        rand: Some(fill()),
        gpt_m: Some(fill()),
        gpt_t: Some(Arc::new(PaddingComposeOracle::new(vocab).unwrap())),
        ..OracleSet::default()
    };
    let gen = RuleGenerator::new(vec![Rule::new([3, 8], [300], C5_P)], [301], Combine::IndependentOr);
    let rep = eval_srep(&[3, 8], &[300], 12, &PromptTemplate::default(), &gen, &oracles, C5_N, 5, &SrepOptions::default())
        .unwrap();
    let rates: Vec<f64> = rep.per_mode.values().map(|m| m.rate.unwrap()).collect();
    let mean = rates.iter().sum::<f64>() / rates.len() as f64;
    let worst = rates.iter().map(|r| (r - C5_P).abs()).fold(0.0, f64::max);
    let counts_ok = rep.per_mode.values().all(|m| m.n_valid == C5_N as u64 && m.rate == Some(m.n_hits as f64 / C5_N as f64));
    verdict(
        5,
        "s_rep mock calibration",
        rates.len() == 4 && !rep.partial && worst <= bound && rep.s_rep == Some(mean) && counts_ok,
        &format!(
            "rates {rates:?}, max |rate - {C5_P}| = {worst:.2} (3 sigma bound {bound:.4}; within nominal {C5_NOMINAL}: {}), s_rep {:?} vs mean {mean}",
            worst <= C5_NOMINAL,
            rep.s_rep
        ),
    );
}

// 6 -------------------------------------------------------------------------

const C6_DOCS: usize = 1000;
const C6_QUERIES: usize = 20;
const C6_WORKERS: [usize; 3] = [1, 2, 8];
const C6_TIME: Duration = Duration::from_secs(30);

#[test]
fn c06_corpus_scan_equivalence() {
    let start = Instant::now();
    let words: Vec<String> = (0..12).map(|i| format!("w{i}")).collect();
    let ids: HashMap<&str, TokenId> = words.iter().enumerate().map(|(i, w)| (w.as_str(), i as TokenId)).collect();
    let mut r = rng(6);
    let dir = tempfile::tempdir().unwrap();
    let mut docs: Vec<String> = Vec::new();
    let mut files: Vec<Vec<String>> = vec![Vec::new(); 7];
    for i in 0..C6_DOCS {
        let n = r.random_range(1..=30);
        let doc = (0..n).map(|_| words[r.random_range(0..words.len())].as_str()).collect::<Vec<_>>().join(" ");
        files[i % 7].push(doc.clone());
        docs.push(doc);
    }
    for (i, f) in files.iter().enumerate() {
        let sub = dir.path().join(format!("d{}", i % 3));
        fs::create_dir_all(&sub).unwrap();
        fs::write(sub.join(format!("f{i}.txt")), f.join("\n") + "\n").unwrap();
    }
    let queries: Vec<CorpusQuery> = (0..C6_QUERIES)
        .map(|_| {
            let t: Vec<TokenId> = (0..r.random_range(1..=3)).map(|_| r.random_range(0..12)).collect();
            let o: Vec<TokenId> = (0..r.random_range(0..=2)).map(|_| r.random_range(0..12)).collect();
            let w = r.random_bool(0.3).then(|| r.random_range(3..=12));
            CorpusQuery::new(t, o, w)
        })
        .collect();

    // Brute force, one document at a time.
    let mut want = vec![(0u64, 0u64, 0u64); C6_QUERIES];
    for doc in &docs {
        let toks: Vec<TokenId> = doc.split(' ').map(|w| ids[w]).collect();
        for (q, c) in queries.iter().zip(want.iter_mut()) {
            let w = q.doc_window.unwrap_or(toks.len());
            let joint: Vec<TokenId> = q.trigger.iter().chain(q.target.iter()).copied().collect();
            for chunk in toks.chunks(w) {
                c.0 += 1;
                c.1 += u64::from(dp_subseq(&q.trigger, chunk));
                c.2 += u64::from(dp_subseq(&joint, chunk));
            }
        }
    }

    let tok = WhitespaceTokenizer::new(words.clone());
    let mut outputs = Vec::new();
    let mut mismatches = 0;
    for workers in C6_WORKERS {
        let opts = ScanOptions {
            workers,
            granularity: DocGranularity::Lines,
        };
        let out = scan_conditional(dir.path(), &queries, &tok, &opts).unwrap();
        for (rep, w) in out.reports.iter().zip(&want) {
            mismatches += usize::from((rep.n_docs, rep.n_trigger, rep.n_joint) != *w);
        }
        outputs.push(serde_json::to_string(&out).unwrap());
    }
    let identical = outputs.windows(2).all(|w| w[0] == w[1]);
    let nonzero = want.iter().filter(|w| w.2 > 0).count();
    let t = start.elapsed();
    verdict(
        6,
        "corpus scan equivalence",
        mismatches == 0 && identical && t < C6_TIME,
        &format!(
            "{mismatches} count mismatches over {C6_QUERIES} queries x {C6_DOCS} docs ({nonzero} with joint hits), identical across workers {C6_WORKERS:?}: {identical}, {t:.2?}"
        ),
    );
}

// 7 -------------------------------------------------------------------------

const C7_GAMMA: f64 = 50.0;
const C7_EPS: f64 = 0.05;
const C7_SEQUENCES: usize = 200;
const C7_MAX_LEN: usize = 32;
const C7_FLOOR: f64 = 0.99;
const C7_CEIL: f64 = 0.01;
const C7_TIME: Duration = Duration::from_secs(10);

#[test]
fn c07_pair_detector_margins() {
    let start = Instant::now();
    // Error budget at the longest sequence: leakage w = (n-1) e^{-γ(1-ε)}.
    let w = (C7_MAX_LEN - 1) as f64 * (-C7_GAMMA * (1.0 - C7_EPS)).exp();
    let floor = 1.0 - 2.0 * w * (1.0 + C7_EPS) / (1.0 - C7_EPS);
    let ceil = w / (1.0 - C7_EPS);
    let (lib_floor, lib_ceil) = pair_detector_bound(C7_MAX_LEN, C7_GAMMA, C7_EPS);
    let budget_ok = floor >= C7_FLOOR && ceil <= C7_CEIL && lib_floor == floor && lib_ceil == ceil;

    let vocab = 8;
    let sample = (0..100)
        .map(|s| sample_near_orthogonal(vocab + 1, 4096, C7_EPS, s))
        .find(|s| s.ok)
        .unwrap();
    let cols: Vec<_> = sample.vectors.column_iter().map(|c| c.into_owned()).collect();
    let (emb, out) = (cols[..vocab].to_vec(), cols[vocab].clone());
    let (x1, x2) = (1usize, 2usize);
    let weights = build_pair_detector(x1, x2, &emb, C7_GAMMA, C7_EPS, &out).unwrap();
    let mut r = rng(7);
    let (mut min_present, mut max_absent) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut n_present, mut n_absent) = (0, 0);
    for i in 0..C7_SEQUENCES {
        let n = r.random_range(2..=C7_MAX_LEN);
        let mut s: Vec<usize> = (0..n).map(|_| r.random_range(0..vocab)).collect();
        if i % 2 == 0 {
            // plant x1 ... x2
            let a = r.random_range(0..n - 1);
            let b = r.random_range(a + 1..n);
            s[a] = x1;
            s[b] = x2;
        } else {
            for t in s.iter_mut().filter(|t| **t == x2) {
                *t = 0;
            }
        }
        let present = dp_subseq(&[x1 as TokenId, x2 as TokenId], &s.iter().map(|&t| t as TokenId).collect::<Vec<_>>());
        let run = run_detector(&weights, &emb, &s, x1, x2).unwrap();
        assert_eq!(run.present, present);
        if present {
            n_present += 1;
            min_present = min_present.min(run.max_activation);
        } else {
            n_absent += 1;
            max_absent = max_absent.max(run.max_activation);
        }
    }
    let t = start.elapsed();
    verdict(
        7,
        "pair detector margins",
        budget_ok && n_present > 0 && n_absent > 0 && min_present >= C7_FLOOR && max_absent <= C7_CEIL && t < C7_TIME,
        &format!(
            "min present {min_present:.6} over {n_present}, max absent {max_absent:.2e} over {n_absent}, budget floor {floor:.6} ceil {ceil:.2e}, {t:.2?}"
        ),
    );
}

// 8 -------------------------------------------------------------------------

const C8_N: usize = 1000;
const C8_EPS: f64 = 0.2;
const C8_SEEDS: u64 = 100;
const C8_REQUIRED: usize = 99;
const C8_TIME: Duration = Duration::from_secs(60);

#[test]
fn c08_near_orthogonality() {
    let start = Instant::now();
    let d = required_dimension(C8_N, C8_EPS).unwrap();
    let mut ok = 0;
    let mut worst: f64 = 0.0;
    for seed in 0..C8_SEEDS {
        let s = sample_near_orthogonal(C8_N, d, C8_EPS, seed);
        if seed < 3 {
            // Recheck the reported maximum from the Gram matrix directly.
            let g = s.vectors.tr_mul(&s.vectors);
            let mut m: f64 = 0.0;
            for i in 0..C8_N {
                assert!((g[(i, i)] - 1.0).abs() < 1e-12);
                for j in 0..i {
                    m = m.max(g[(i, j)].abs());
                }
            }
            assert!((m - s.max_abs_dot).abs() < 1e-12);
        }
        worst = worst.max(s.max_abs_dot);
        ok += usize::from(s.max_abs_dot < C8_EPS);
    }
    let t = start.elapsed();
    verdict(
        8,
        "near orthogonality",
        ok >= C8_REQUIRED && t < C8_TIME,
        &format!("d = {d}: {ok}/{C8_SEEDS} seeds below {C8_EPS} (need {C8_REQUIRED}), worst max |dot| {worst:.4}, {t:.1?}"),
    );
}

// 9 -------------------------------------------------------------------------

const C9_INSTANCES: u64 = 50;
const C9_TIME: Duration = Duration::from_secs(120);

#[test]
fn c09_gradient_bound() {
    let start = Instant::now();
    let (mut checks, mut violations, mut fd_fail) = (0, 0, 0);
    let mut worst_ratio: f64 = 0.0;
    let mut worst_fd: f64 = 0.0;
    for seed in 0..C9_INSTANCES {
        let (model, data) = random_instance(seed).unwrap();
        for c in gradient_bound_check_all(&model, &data).unwrap() {
            checks += 1;
            let rhs = c.tau_dp as f64 * (c.norm_ov + c.norm_kq) * c.p_contain * c.gap.abs();
            assert!((rhs - c.rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
            // NaN counts as a violation.
            violations += usize::from(!matches!(c.lhs.partial_cmp(&c.rhs), Some(Ordering::Less | Ordering::Equal)));
            if c.rhs > 0.0 {
                worst_ratio = worst_ratio.max(c.lhs / c.rhs);
            }
            fd_fail += usize::from(!c.fd_ok);
            worst_fd = worst_fd.max(c.fd_error());
        }
    }
    let t = start.elapsed();
    verdict(
        9,
        "gradient bound",
        checks > 0 && violations == 0 && fd_fail == 0 && worst_fd <= FD_REL_TOL && t < C9_TIME,
        &format!(
            "{checks} checks on {C9_INSTANCES} instances: {violations} violations (max lhs/rhs {worst_ratio:.3}), {fd_fail} finite-difference failures (max rel error {worst_fd:.2e}, tol {FD_REL_TOL:.0e}), {t:.1?}"
        ),
    );
}

// 10 ------------------------------------------------------------------------

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn run_cli(args: &[&str], cache: &Path) {
    let o = Command::new(env!("CARGO_BIN_EXE_subtrace"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env("SUBTRACE_CACHE_DIR", cache)
        .output()
        .unwrap();
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn c10_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for f in ["vocab.txt", "prompt.txt", "rules.toml"] {
        fs::copy(fixtures().join(f), d.join(f)).unwrap();
    }
    let cache = d.join("cache");
    let p = |name: &str| d.join(name).to_str().unwrap().to_owned();
    let scan = fixtures().join("scan");
    let tok = format!("whitespace:{}", fixtures().join("vocab.txt").display());
    let mut compared = Vec::new();
    let mut differing = Vec::new();
    for run in ["a", "b"] {
        let o = |name: &str| p(&format!("{run}-{name}"));
        run_cli(&["perturb", "--config", &p("rules.toml"), "--prompt-file", &p("prompt.txt"), "--out", &o("corpus.jsonl")], &cache);
        run_cli(
            &[
                "trace",
                "--config",
                &p("rules.toml"),
                "--corpus",
                &p("a-corpus.jsonl"),
                "--prompt-file",
                &p("prompt.txt"),
                "--target",
                "alarm",
                "--out",
                &o("trace.json"),
            ],
            &cache,
        );
        run_cli(
            &["srep", "--config", &p("rules.toml"), "--trigger", "quick fox", "--target", "alarm", "--out", &o("srep.json")],
            &cache,
        );
        run_cli(
            &[
                "corpus-scan",
                "--root",
                scan.join("docs").to_str().unwrap(),
                "--queries",
                scan.join("queries.json").to_str().unwrap(),
                "--tokenizer",
                &tok,
                "--workers",
                "2",
                "--out",
                &o("scan.json"),
            ],
            &cache,
        );
        run_cli(&["theory-check", "gradient", "--seed", "2", "--report", &o("theory.json")], &cache);
    }
    for name in ["corpus.jsonl", "trace.json", "srep.json", "scan.json", "theory.json"] {
        let a = fs::read(d.join(format!("a-{name}"))).unwrap();
        let b = fs::read(d.join(format!("b-{name}"))).unwrap();
        compared.push(name);
        if a != b || a.is_empty() {
            differing.push(name);
        }
    }
    verdict(
        10,
        "reproducibility",
        differing.is_empty(),
        &format!("byte-identical reruns of {compared:?}; differing {differing:?}"),
    );
}
