//! Conditional containment statistics over document collections.
//!
//! Each document is tokenized once and every query advances two greedy
//! cursors over it: one for the trigger and one for `trigger ++ target`.
//! Per-file counts are merged by integer addition, so results do not depend
//! on worker count or visitation order.

use std::fs::File;
use std::io::{self, BufRead, BufReader, Read};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use flate2::read::MultiGzDecoder;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

use crate::seq::{concat, SubSeq, TokenId};
use crate::tokenizer::Tokenizer;

pub const SCAN_SCHEMA: &str = "subtrace-scan/1";

/// Lines per parallel batch when reading line-delimited files.
const LINE_BATCH: usize = 1024;

#[derive(Debug, Error)]
pub enum ScanError {
    #[error("query {0}: trigger is empty")]
    EmptyTrigger(usize),
    #[error("query {0}: doc_window must be positive")]
    ZeroWindow(usize),
    #[error("cannot walk {path}: {source}")]
    Root { path: PathBuf, source: walkdir::Error },
    #[error("worker pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least two points, got {0}")]
    TooFew(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusQuery {
    pub trigger: SubSeq,
    #[serde(default)]
    pub target: SubSeq,
    /// Documents longer than this many tokens are split without overlap.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doc_window: Option<usize>,
}

impl CorpusQuery {
    pub fn new(trigger: impl Into<SubSeq>, target: impl Into<SubSeq>, doc_window: Option<usize>) -> Self {
        Self {
            trigger: trigger.into(),
            target: target.into(),
            doc_window,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DocGranularity {
    /// Every non-empty line is one document.
    #[default]
    Lines,
    /// Every file is one document.
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanOptions {
    pub workers: usize,
    pub granularity: DocGranularity,
}

impl Default for ScanOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            granularity: DocGranularity::Lines,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub query: CorpusQuery,
    pub n_docs: u64,
    pub n_trigger: u64,
    pub n_joint: u64,
    /// `n_joint / n_trigger`; `None` when no document contains the trigger.
    #[serde(with = "crate::sig17::opt")]
    pub p_cond: Option<f64>,
    pub bytes_scanned: u64,
    /// Not serialized so that reports stay byte-reproducible.
    #[serde(skip)]
    pub wall_time: Duration,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanOutput {
    pub schema: String,
    pub tokenizer: String,
    pub granularity: DocGranularity,
    pub n_files: u64,
    pub skipped: Vec<SkippedFile>,
    pub reports: Vec<ScanReport>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Counts {
    docs: u64,
    trigger: u64,
    joint: u64,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Self) {
        self.docs += o.docs;
        self.trigger += o.trigger;
        self.joint += o.joint;
    }
}

#[derive(Debug, Clone, Default)]
struct Partial {
    counts: Vec<Counts>,
    bytes: u64,
    files: u64,
    skipped: Vec<SkippedFile>,
}

impl Partial {
    fn zero(n: usize) -> Self {
        Self {
            counts: vec![Counts::default(); n],
            ..Default::default()
        }
    }

    fn merge(mut self, o: Self) -> Self {
        for (a, b) in self.counts.iter_mut().zip(o.counts) {
            *a += b;
        }
        self.bytes += o.bytes;
        self.files += o.files;
        self.skipped.extend(o.skipped);
        self
    }
}

struct Pattern {
    trigger: Vec<TokenId>,
    joint: Vec<TokenId>,
    window: Option<usize>,
}

/// Update per-query counts with one document.
fn count_document(tokens: &[TokenId], patterns: &[Pattern], counts: &mut [Counts]) {
    for (p, c) in patterns.iter().zip(counts.iter_mut()) {
        let window = p.window.unwrap_or(usize::MAX);
        let mut chunks = tokens.chunks(window).peekable();
        if chunks.peek().is_none() {
            // An empty document is still one document.
            c.docs += 1;
            continue;
        }
        for chunk in chunks {
            c.docs += 1;
            // Greedy cursors; the joint pattern extends the trigger, so joint
            // containment implies trigger containment.
            let (mut ti, mut ji) = (0, 0);
            for &t in chunk {
                if ti < p.trigger.len() && p.trigger[ti] == t {
                    ti += 1;
                }
                if ji < p.joint.len() && p.joint[ji] == t {
                    ji += 1;
                    if ji == p.joint.len() {
                        break;
                    }
                }
            }
            c.trigger += u64::from(ti == p.trigger.len());
            c.joint += u64::from(ji == p.joint.len());
        }
    }
}

fn open_text(path: &Path) -> io::Result<Box<dyn Read>> {
    let f = File::open(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(MultiGzDecoder::new(f)))
    } else {
        Ok(Box::new(f))
    }
}

fn scan_file(path: &Path, patterns: &[Pattern], tok: &dyn Tokenizer, granularity: DocGranularity) -> Partial {
    let mut part = Partial::zero(patterns.len());
    let result = (|| -> io::Result<()> {
        let reader = BufReader::new(open_text(path)?);
        match granularity {
            DocGranularity::File => {
                let mut text = String::new();
                BufReader::new(reader).read_to_string(&mut text)?;
                part.bytes += text.len() as u64;
                count_document(&tok.encode(&text), patterns, &mut part.counts);
            }
            DocGranularity::Lines => {
                let mut lines = reader.lines();
                loop {
                    let mut batch = Vec::with_capacity(LINE_BATCH);
                    for line in lines.by_ref().take(LINE_BATCH) {
                        batch.push(line?);
                    }
                    if batch.is_empty() {
                        break;
                    }
                    part.bytes += batch.iter().map(|l| l.len() as u64 + 1).sum::<u64>();
                    let n = patterns.len();
                    let counts = batch
                        .par_iter()
                        .filter(|l| !l.is_empty())
                        .fold(
                            || vec![Counts::default(); n],
                            |mut acc, line| {
                                count_document(&tok.encode(line), patterns, &mut acc);
                                acc
                            },
                        )
                        .reduce(
                            || vec![Counts::default(); n],
                            |mut a, b| {
                                for (x, y) in a.iter_mut().zip(b) {
                                    *x += y;
                                }
                                a
                            },
                        );
                    for (x, y) in part.counts.iter_mut().zip(counts) {
                        *x += y;
                    }
                }
            }
        }
        Ok(())
    })();
    match result {
        Ok(()) => part.files = 1,
        Err(e) => {
            log::warn!("skipping {}: {e}", path.display());
            part = Partial::zero(patterns.len());
            part.skipped.push(SkippedFile {
                path: path.to_owned(),
                reason: e.to_string(),
            });
        }
    }
    part
}

/// Count, for every query, the documents under `root` containing the trigger
/// and those containing `trigger ++ target`.
///
/// Files that cannot be opened, decompressed, or decoded as UTF-8 are skipped
/// whole and listed in the output.
pub fn scan_conditional(
    root: &Path,
    queries: &[CorpusQuery],
    tok: &dyn Tokenizer,
    opts: &ScanOptions,
) -> Result<ScanOutput, ScanError> {
    let start = Instant::now();
    let mut patterns = Vec::with_capacity(queries.len());
    for (i, q) in queries.iter().enumerate() {
        if q.trigger.is_empty() {
            return Err(ScanError::EmptyTrigger(i));
        }
        if q.doc_window == Some(0) {
            return Err(ScanError::ZeroWindow(i));
        }
        patterns.push(Pattern {
            trigger: q.trigger.to_vec(),
            joint: concat(&q.trigger, &q.target).into_inner(),
            window: q.doc_window,
        });
    }

    let mut files = Vec::new();
    let mut walk_skipped = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        match entry {
            Ok(e) if e.file_type().is_file() => files.push(e.into_path()),
            Ok(_) => {}
            Err(e) if e.depth() == 0 => {
                return Err(ScanError::Root {
                    path: root.to_owned(),
                    source: e,
                })
            }
            Err(e) => walk_skipped.push(SkippedFile {
                path: e.path().map(Path::to_owned).unwrap_or_default(),
                reason: e.to_string(),
            }),
        }
    }

    let pool = rayon::ThreadPoolBuilder::new().num_threads(opts.workers.max(1)).build()?;
    let total = pool.install(|| {
        files
            .par_iter()
            .map(|f| scan_file(f, &patterns, tok, opts.granularity))
            .reduce(|| Partial::zero(patterns.len()), Partial::merge)
    });
    let mut skipped = walk_skipped;
    skipped.extend(total.skipped);
    skipped.sort_by(|a, b| a.path.cmp(&b.path));

    let wall_time = start.elapsed();
    let reports = queries
        .iter()
        .zip(&total.counts)
        .map(|(q, c)| ScanReport {
            query: q.clone(),
            n_docs: c.docs,
            n_trigger: c.trigger,
            n_joint: c.joint,
            p_cond: (c.trigger > 0).then(|| c.joint as f64 / c.trigger as f64),
            bytes_scanned: total.bytes,
            wall_time,
        })
        .collect();
    Ok(ScanOutput {
        schema: SCAN_SCHEMA.into(),
        tokenizer: tok.describe(),
        granularity: opts.granularity,
        n_files: total.files,
        skipped,
        reports,
    })
}

/// Sample Pearson correlation, two-pass. `Ok(None)` when either side has zero
/// variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<Option<f64>, StatsError> {
    if xs.len() != ys.len() {
        return Err(StatsError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(StatsError::TooFew(xs.len()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)))
}
