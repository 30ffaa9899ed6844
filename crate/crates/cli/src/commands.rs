use std::fs;
use std::io::{BufReader, BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use subtrace_core::assoc::{eval_srep, AssocError, SrepOptions, ASSOC_SCHEMA};
use subtrace_core::corpus_stats::{scan_conditional, CorpusQuery, DocGranularity, ScanError, ScanOptions, SCAN_SCHEMA};
use subtrace_core::genclient::DiskCache;
use subtrace_core::perturb::{build_perturbation_corpus, BuildOptions, CorpusIoError, EntryError, PerturbError};
use subtrace_core::theory::{run_check, CheckKind};
use subtrace_core::tracer::{TraceError, TRACE_SCHEMA};
use subtrace_core::{sat_trace, PerturbMode, PerturbationCorpus, TokenSeq, Tokenizer};

use crate::config::{load_tokenizer_spec, Loaded};
use crate::error::{CliError, CliResult};

/// Report file layout: the payload plus the exact configuration behind it.
#[derive(Serialize)]
struct Envelope<'a, C: Serialize> {
    schema: &'a str,
    config: &'a C,
    report: &'a RawValue,
}

fn create_parent(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| CliError::io(p, e)),
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    create_parent(path)?;
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_report<C: Serialize, R: Serialize>(path: &Path, schema: &str, config: &C, report: &R) -> CliResult<()> {
    let raw = serde_json::value::to_raw_value(report).map_err(|e| CliError::io(path, e))?;
    let env = Envelope {
        schema,
        config,
        report: &raw,
    };
    let mut text = serde_json::to_string_pretty(&env).map_err(|e| CliError::io(path, e))?;
    text.push('\n');
    write_text(path, &text)
}

fn read_prompt(path: &Path, tok: &dyn Tokenizer) -> CliResult<TokenSeq> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let ids = tok.encode(text.trim());
    if ids.is_empty() {
        return Err(CliError::config(format!("{}: prompt has no tokens", path.display())));
    }
    Ok(TokenSeq(ids))
}

fn perturb_error(e: PerturbError) -> CliError {
    match e {
        PerturbError::Oracle(_) | PerturbError::ContractViolation { .. } => CliError::Generator(e.to_string()),
        _ => CliError::config(e),
    }
}

pub fn perturb(loaded: &Loaded, prompt_file: &Path, out: Option<&Path>) -> CliResult<PathBuf> {
    let cfg = &loaded.config;
    let tok = loaded.tokenizer()?;
    let prompt = read_prompt(prompt_file, &*tok)?;
    let template = loaded.template(&*tok);
    let gen = loaded.generator(&tok)?;
    let oracles = loaded.oracles(&tok, cfg.perturb.mode == PerturbMode::TopkRefill)?;
    let opts = BuildOptions {
        retry_budget: cfg.generator.retry_budget,
        ..BuildOptions::default()
    };
    log::info!(
        "building {} {} entries for a {}-token prompt",
        cfg.perturb.corpus_size,
        cfg.perturb.mode.as_str(),
        prompt.len()
    );
    let corpus = build_perturbation_corpus(&prompt, &template, &cfg.perturb, &*gen, &oracles, &opts).map_err(|e| {
        log::warn!("stopped at entry {} of {}", e.failed_entry, e.requested);
        match e.source {
            EntryError::Generator(g) => CliError::Generator(g.to_string()),
            EntryError::Perturb(p) => perturb_error(p),
        }
    })?;
    let path = loaded.output_path(out, "corpus.jsonl");
    create_parent(&path)?;
    let file = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
    let mut w = BufWriter::new(file);
    corpus.write_jsonl(&mut w).map_err(|e| CliError::io(&path, e))?;
    w.flush().map_err(|e| CliError::io(&path, e))?;
    log::info!("wrote {} entries to {}", corpus.entries.len(), path.display());
    Ok(path)
}

pub fn trace(loaded: &Loaded, corpus_file: &Path, prompt_file: &Path, target: &str, out: Option<&Path>) -> CliResult<String> {
    let cfg = &loaded.config;
    let tok = loaded.tokenizer()?;
    let file = fs::File::open(corpus_file).map_err(|e| CliError::io(corpus_file, e))?;
    let corpus = PerturbationCorpus::read_jsonl(BufReader::new(file)).map_err(|e| match e {
        CorpusIoError::Io(io) => CliError::io(corpus_file, io),
        CorpusIoError::Parse { .. } => CliError::Consistency(format!("{}: {e}", corpus_file.display())),
    })?;
    let prompt = read_prompt(prompt_file, &*tok)?;
    let template = loaded.template(&*tok);
    let target_ids = tok.encode(target);
    let res = sat_trace(&prompt, &template, &target_ids, &corpus, &cfg.trace).map_err(|e| match e {
        TraceError::FingerprintMismatch { .. } | TraceError::EmptyCorpus => CliError::Consistency(e.to_string()),
        _ => CliError::config(e),
    })?;
    let path = loaded.output_path(out, "trace.json");
    write_report(&path, TRACE_SCHEMA, cfg, &res)?;
    log::info!("scored {} candidates, report at {}", res.visited, path.display());
    Ok(res.to_table(|t| tok.decode(&[t])))
}

pub struct SrepArgs<'a> {
    pub trigger: &'a str,
    pub target: &'a str,
    pub n_per_mode: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<&'a Path>,
}

pub fn srep(loaded: &Loaded, args: &SrepArgs) -> CliResult<String> {
    let cfg = &loaded.config;
    let tok = loaded.tokenizer()?;
    let trigger = tok.encode(args.trigger);
    let target = tok.encode(args.target);
    if trigger.is_empty() || target.is_empty() {
        return Err(CliError::config("trigger and target must both have tokens"));
    }
    let template = loaded.template(&*tok);
    let gen = loaded.generator(&tok)?;
    let oracles = loaded.oracles(&tok, false)?;
    let opts = SrepOptions {
        retry_budget: cfg.generator.retry_budget,
        ..SrepOptions::default()
    };
    let report = eval_srep(
        &trigger,
        &target,
        cfg.srep.input_len,
        &template,
        &*gen,
        &oracles,
        args.n_per_mode.unwrap_or(cfg.srep.n_per_mode),
        args.seed.unwrap_or(cfg.srep.seed),
        &opts,
    )
    .map_err(|e| match e {
        AssocError::Generator(_) => CliError::Generator(e.to_string()),
        AssocError::Oracle { source, .. } => perturb_error(source),
        _ => CliError::config(e),
    })?;
    let path = loaded.output_path(args.out, "srep.json");
    write_report(&path, ASSOC_SCHEMA, cfg, &report)?;
    let mut lines = Vec::new();
    for (mode, r) in &report.per_mode {
        let rate = r.rate.map_or("-".to_owned(), |x| format!("{x:.4}"));
        lines.push(format!("{mode:8} {rate:>8}  hits {} / valid {} (invalid {})", r.n_hits, r.n_valid, r.n_invalid));
    }
    let s = report.s_rep.map_or("-".to_owned(), |x| format!("{x:.4}"));
    lines.push(format!("s_rep {s}{}", if report.partial { " (partial)" } else { "" }));
    Ok(lines.join("\n"))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryText {
    trigger: String,
    #[serde(default)]
    target: String,
    #[serde(default)]
    doc_window: Option<usize>,
}

/// Everything a scan depends on, stored with the report.
#[derive(Debug, Serialize)]
pub struct ScanArgs {
    pub root: PathBuf,
    pub queries: PathBuf,
    pub tokenizer: String,
    pub workers: usize,
    pub doc_window: Option<usize>,
    pub granularity: DocGranularity,
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

pub fn corpus_scan(args: &ScanArgs) -> CliResult<String> {
    let tok = load_tokenizer_spec(&args.tokenizer)?;
    let text = fs::read_to_string(&args.queries).map_err(|e| CliError::io(&args.queries, e))?;
    let raw: Vec<QueryText> =
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", args.queries.display())))?;
    let queries: Vec<CorpusQuery> = raw
        .iter()
        .map(|q| CorpusQuery::new(tok.encode(&q.trigger), tok.encode(&q.target), q.doc_window.or(args.doc_window)))
        .collect();
    let opts = ScanOptions {
        workers: args.workers,
        granularity: args.granularity,
    };
    let output = scan_conditional(&args.root, &queries, &*tok, &opts).map_err(|e| match e {
        ScanError::Root { ref path, .. } => CliError::io(&path.clone(), e),
        ScanError::Pool(_) => CliError::io(&args.root, e),
        _ => CliError::config(e),
    })?;
    let path = args.out.clone().unwrap_or_else(|| PathBuf::from("scan.json"));
    write_report(&path, SCAN_SCHEMA, args, &output)?;
    let mut lines = Vec::new();
    for (q, r) in raw.iter().zip(&output.reports) {
        let p = r.p_cond.map_or("-".to_owned(), |x| format!("{x:.6}"));
        lines.push(format!(
            "{:?} -> {:?}: docs {} trigger {} joint {} p {p}",
            q.trigger, q.target, r.n_docs, r.n_trigger, r.n_joint
        ));
    }
    if !output.skipped.is_empty() {
        lines.push(format!("skipped {} file(s)", output.skipped.len()));
    }
    Ok(lines.join("\n"))
}

/// Runs a check and writes its report. A failed check is still written
/// before the error is returned.
pub fn theory_check(kind: CheckKind, seed: u64, report_path: &Path) -> CliResult<String> {
    let report = run_check(kind, seed).map_err(CliError::config)?;
    let mut text = serde_json::to_string_pretty(&report).map_err(|e| CliError::io(report_path, e))?;
    text.push('\n');
    write_text(report_path, &text)?;
    let mut lines = Vec::new();
    for q in &report.quantities {
        let bound = q.bound.map_or(String::new(), |b| format!(" {} {b:.6e}", q.relation));
        let mark = if q.holds { "ok" } else { "FAILED" };
        lines.push(format!("{:24} {:.6e}{bound}  {mark}", q.name, q.value));
    }
    let summary = lines.join("\n");
    if !report.passed {
        return Err(CliError::Consistency(format!("{kind} check failed\n{summary}")));
    }
    Ok(summary)
}

pub fn cache_dir(explicit: Option<&Path>, loaded: Option<&Loaded>) -> DiskCache {
    match (explicit, loaded) {
        (Some(d), _) => DiskCache::new(d),
        (None, Some(l)) => l.cache(),
        (None, None) => DiskCache::from_env_or(".subtrace-cache"),
    }
}

pub fn cache_stats(cache: &DiskCache) -> CliResult<String> {
    let s = cache.stats().map_err(|e| CliError::io(cache.dir(), e))?;
    Ok(format!("entries {}\nbytes {}", s.entries, s.bytes))
}

pub fn cache_gc(cache: &DiskCache, retention_days: f64) -> CliResult<String> {
    if !(retention_days.is_finite() && retention_days >= 0.0) {
        return Err(CliError::config(format!("retention must be a non-negative number of days, got {retention_days}")));
    }
    let removed = cache
        .gc(Duration::from_secs_f64(retention_days * 86_400.0))
        .map_err(|e| CliError::io(cache.dir(), e))?;
    Ok(format!("removed {removed}"))
}
