//! Perturbed-input corpora.
//!
//! Two families of perturbation live here:
//!
//! * mask-and-refill for tracing: every query token is masked with probability
//!   `p` and refilled either from its top-k embedding neighbours or by an
//!   external fill oracle;
//! * padding insertion for reproducibility evaluation: a trigger is spread over
//!   a longer sequence with masks at uniformly random positions, which a fill
//!   oracle then replaces, or a compose oracle writes a sentence around it.
//!
//! Only the query is perturbed; the prompt template (system prompt, chat
//! scaffold) is rendered around it unchanged.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::io::{self, BufRead, Write};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embed::{EmbedError, EmbedTable};
use crate::genclient::{ChatMessage, DiskCache, GenError, HttpClient, Request, TextGenerator};
use crate::seq::{is_subsequence, SubSeq, TokenId, TokenSeq};
use crate::tokenizer::Tokenizer;
use crate::{rng_from_seed, Rng};

pub const CORPUS_SCHEMA: &str = "subtrace-corpus/1";

pub const GPT_MASK_PROMPT: &str = "Fill in the blanks to form a coherent sentence. The answer can be random and does not have to be factual. All the non-masked tokens need to be kept in order.";
pub const GPT_COMPOSE_PROMPT: &str = "Use the following tokens to draft a creative and uncommon sentence. Make sure that all the tokens need to be included and it is in the original order.";
pub const DEFAULT_MASK_TEXT: &str = "<mask>";

#[derive(Debug, Error)]
pub enum PerturbError {
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("target length {target_len} is shorter than the subsequence ({sub_len} tokens)")]
    TargetTooShort { target_len: usize, sub_len: usize },
    #[error("refill needs an in-place mask; this sequence was built by padding insertion")]
    NotInPlace,
    #[error("oracle failed: {0}")]
    Oracle(String),
    #[error("oracle reply violated the kept-token contract on all {attempts} attempt(s)")]
    ContractViolation { attempts: u32 },
    #[error("no oracle configured for mode {0}")]
    MissingOracle(&'static str),
    #[error("mask probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("{0}")]
    Config(String),
}

impl From<GenError> for PerturbError {
    fn from(e: GenError) -> Self {
        PerturbError::Oracle(e.to_string())
    }
}

/// Whether masks replace origin tokens in place or pad around a subsequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskLayout {
    InPlace,
    Padded,
}

/// A sequence with some slots masked. `None` marks a mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSeq {
    pub slots: Vec<Option<TokenId>>,
    pub origin: TokenSeq,
    pub layout: MaskLayout,
    /// Origin index of every kept slot, strictly increasing.
    pub kept_origin: Vec<usize>,
}

impl MaskedSeq {
    pub fn kept(&self) -> SubSeq {
        self.slots.iter().flatten().copied().collect()
    }

    pub fn mask_count(&self) -> usize {
        self.slots.iter().filter(|s| s.is_none()).count()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Fill masks in slot order from `fill`; panics if `fill` runs short.
    pub fn fill_with(&self, mut fill: impl FnMut(usize) -> TokenId) -> TokenSeq {
        self.slots
            .iter()
            .enumerate()
            .map(|(i, s)| s.unwrap_or_else(|| fill(i)))
            .collect()
    }
}

/// Mask each position independently with probability `p`.
pub fn mask_tokens(seq: &[TokenId], p: f64, rng: &mut Rng) -> MaskedSeq {
    let mut slots = Vec::with_capacity(seq.len());
    let mut kept_origin = Vec::new();
    for (i, &t) in seq.iter().enumerate() {
        if rng.random::<f64>() < p {
            slots.push(None);
        } else {
            slots.push(Some(t));
            kept_origin.push(i);
        }
    }
    MaskedSeq {
        slots,
        origin: TokenSeq::from(seq),
        layout: MaskLayout::InPlace,
        kept_origin,
    }
}

/// Replace every mask with a uniform draw from the masked token's top-k neighbours.
pub fn refill_topk(m: &MaskedSeq, table: &EmbedTable, k: usize, rng: &mut Rng) -> Result<TokenSeq, PerturbError> {
    if m.layout != MaskLayout::InPlace {
        return Err(PerturbError::NotInPlace);
    }
    let mut neighbours: HashMap<TokenId, Vec<TokenId>> = HashMap::new();
    let mut out = Vec::with_capacity(m.len());
    for (i, slot) in m.slots.iter().enumerate() {
        match slot {
            Some(t) => out.push(*t),
            None => {
                let orig = m.origin[i];
                if let Entry::Vacant(e) = neighbours.entry(orig) {
                    e.insert(table.top_k_similar(orig, k)?);
                }
                let cands = &neighbours[&orig];
                if cands.is_empty() {
                    return Err(PerturbError::Config(format!(
                        "token {orig} has no neighbours in a vocabulary of size 1"
                    )));
                }
                out.push(cands[rng.random_range(0..cands.len())]);
            }
        }
    }
    Ok(TokenSeq(out))
}

/// Spread `sub` over `target_len` slots, choosing the mask positions uniformly
/// among all `C(target_len, target_len - |sub|)` subsets.
pub fn insert_padding(sub: &[TokenId], target_len: usize, rng: &mut Rng) -> Result<MaskedSeq, PerturbError> {
    if target_len < sub.len() {
        return Err(PerturbError::TargetTooShort {
            target_len,
            sub_len: sub.len(),
        });
    }
    let mut is_mask = vec![false; target_len];
    for i in index::sample(rng, target_len, target_len - sub.len()) {
        is_mask[i] = true;
    }
    let mut it = sub.iter();
    let slots = is_mask
        .iter()
        .map(|&m| if m { None } else { it.next().copied() })
        .collect();
    Ok(MaskedSeq {
        slots,
        origin: TokenSeq::from(sub),
        layout: MaskLayout::Padded,
        kept_origin: (0..sub.len()).collect(),
    })
}

/// Replaces masks in a [`MaskedSeq`]; the reply is validated by the caller.
pub trait FillOracle: Send + Sync {
    fn fill(&self, m: &MaskedSeq, seed: u64) -> Result<TokenSeq, PerturbError>;
    fn name(&self) -> String;
}

/// Writes a sequence that should contain `sub`; validated by the caller.
pub trait ComposeOracle: Send + Sync {
    fn compose(&self, sub: &[TokenId], seed: u64) -> Result<TokenSeq, PerturbError>;
    fn name(&self) -> String;
}

/// Generator sample seed for an entry or evaluation sample seeded with
/// `seed`. Kept apart from the perturbation stream so that generator draws
/// are independent of which tokens were masked.
pub fn generation_seed(seed: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(b"generate");
    h.update(seed.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Seed for retry/resample `attempt` of a stream seeded with `seed`.
fn attempt_seed(seed: u64, attempt: u32) -> u64 {
    if attempt == 0 {
        return seed;
    }
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(attempt.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Fill masks through `oracle`, requiring the kept tokens to survive in order.
/// Violations are retried up to `retry_budget` times with fresh seeds.
pub fn fill_with_oracle(
    m: &MaskedSeq,
    oracle: &dyn FillOracle,
    seed: u64,
    retry_budget: u32,
) -> Result<TokenSeq, PerturbError> {
    if m.mask_count() == 0 {
        return Ok(m.kept().into_inner().into());
    }
    let kept = m.kept();
    for attempt in 0..=retry_budget {
        let out = oracle.fill(m, attempt_seed(seed, attempt))?;
        if is_subsequence(&kept, &out) {
            return Ok(out);
        }
        log::debug!("{} dropped or reordered kept tokens (attempt {})", oracle.name(), attempt + 1);
    }
    Err(PerturbError::ContractViolation {
        attempts: retry_budget + 1,
    })
}

/// Ask `oracle` for a sequence containing `sub`, retrying on violations.
pub fn compose_from_tokens(
    sub: &[TokenId],
    oracle: &dyn ComposeOracle,
    seed: u64,
    retry_budget: u32,
) -> Result<TokenSeq, PerturbError> {
    for attempt in 0..=retry_budget {
        let out = oracle.compose(sub, attempt_seed(seed, attempt))?;
        if is_subsequence(sub, &out) {
            return Ok(out);
        }
        log::debug!("{} lost the subsequence (attempt {})", oracle.name(), attempt + 1);
    }
    Err(PerturbError::ContractViolation {
        attempts: retry_budget + 1,
    })
}

/// Fills each mask with a uniform draw from a fixed candidate list.
#[derive(Debug, Clone)]
pub struct RandFillOracle {
    candidates: Vec<TokenId>,
}

impl RandFillOracle {
    pub fn new(candidates: Vec<TokenId>) -> Result<Self, PerturbError> {
        if candidates.is_empty() {
            return Err(PerturbError::Config("rand-fill needs at least one candidate token".into()));
        }
        Ok(Self { candidates })
    }

    /// Every id in `0..vocab_size` except `excluded` (special/control tokens).
    pub fn from_vocab(vocab_size: usize, excluded: &[TokenId]) -> Result<Self, PerturbError> {
        let cands = (0..vocab_size as TokenId).filter(|t| !excluded.contains(t)).collect();
        Self::new(cands)
    }
}

impl FillOracle for RandFillOracle {
    fn fill(&self, m: &MaskedSeq, seed: u64) -> Result<TokenSeq, PerturbError> {
        let mut rng = rng_from_seed(seed);
        Ok(m.fill_with(|_| self.candidates[rng.random_range(0..self.candidates.len())]))
    }

    fn name(&self) -> String {
        let digest = Sha256::digest(serde_json::to_vec(&self.candidates).expect("serializes"));
        format!("rand:{}", &hex::encode(digest)[..16])
    }
}

/// Offline stand-in for a compose oracle: keeps the tokens in order and
/// inserts up to two uniform vocabulary tokens before each one and at the end.
#[derive(Debug, Clone)]
pub struct PaddingComposeOracle {
    vocab: usize,
}

impl PaddingComposeOracle {
    pub fn new(vocab: usize) -> Result<Self, PerturbError> {
        if vocab == 0 {
            return Err(PerturbError::Config("padding compose needs a non-empty vocabulary".into()));
        }
        Ok(Self { vocab })
    }
}

impl ComposeOracle for PaddingComposeOracle {
    fn compose(&self, sub: &[TokenId], seed: u64) -> Result<TokenSeq, PerturbError> {
        let mut rng = rng_from_seed(seed);
        let mut out = Vec::with_capacity(sub.len() * 3 + 2);
        let vocab = self.vocab as TokenId;
        let mut pad = |out: &mut Vec<TokenId>| {
            for _ in 0..rng.random_range(0..=2) {
                out.push(rng.random_range(0..vocab));
            }
        };
        for &t in sub {
            pad(&mut out);
            out.push(t);
        }
        pad(&mut out);
        Ok(TokenSeq(out))
    }

    fn name(&self) -> String {
        format!("padding-compose:{}", self.vocab)
    }
}

/// Closure-backed fill oracle.
pub struct FnFillOracle<F>(pub String, pub F);

impl<F> FillOracle for FnFillOracle<F>
where
    F: Fn(&MaskedSeq, u64) -> Result<TokenSeq, PerturbError> + Send + Sync,
{
    fn fill(&self, m: &MaskedSeq, seed: u64) -> Result<TokenSeq, PerturbError> {
        (self.1)(m, seed)
    }

    fn name(&self) -> String {
        self.0.clone()
    }
}

/// Closure-backed compose oracle.
pub struct FnComposeOracle<F>(pub String, pub F);

impl<F> ComposeOracle for FnComposeOracle<F>
where
    F: Fn(&[TokenId], u64) -> Result<TokenSeq, PerturbError> + Send + Sync,
{
    fn compose(&self, sub: &[TokenId], seed: u64) -> Result<TokenSeq, PerturbError> {
        (self.1)(sub, seed)
    }

    fn name(&self) -> String {
        self.0.clone()
    }
}

/// Render a masked sequence as text with `mask_text` for every mask slot.
pub fn render_masked(m: &MaskedSeq, tok: &dyn Tokenizer, mask_text: &str) -> String {
    let mut parts = Vec::new();
    let mut run = Vec::new();
    for s in &m.slots {
        match s {
            Some(t) => run.push(*t),
            None => {
                if !run.is_empty() {
                    parts.push(tok.decode(&run).trim().to_owned());
                    run.clear();
                }
                parts.push(mask_text.to_owned());
            }
        }
    }
    if !run.is_empty() {
        parts.push(tok.decode(&run).trim().to_owned());
    }
    parts.join(" ")
}

/// Chat-model mask filler: the masked text goes in the user turn under the
/// fill instruction; the reply is re-tokenized.
pub struct ChatFillOracle {
    client: Arc<HttpClient>,
    tokenizer: Arc<dyn Tokenizer>,
    pub mask_text: String,
}

impl ChatFillOracle {
    pub fn new(client: Arc<HttpClient>, tokenizer: Arc<dyn Tokenizer>) -> Self {
        Self {
            client,
            tokenizer,
            mask_text: DEFAULT_MASK_TEXT.into(),
        }
    }
}

impl FillOracle for ChatFillOracle {
    fn fill(&self, m: &MaskedSeq, seed: u64) -> Result<TokenSeq, PerturbError> {
        let req = Request::Chat {
            messages: vec![
                ChatMessage::system(GPT_MASK_PROMPT),
                ChatMessage::user(render_masked(m, self.tokenizer.as_ref(), &self.mask_text)),
            ],
        };
        let reply = self.client.complete(&req, seed)?;
        Ok(TokenSeq(self.tokenizer.encode(&reply)))
    }

    fn name(&self) -> String {
        format!("chat-fill:{}", self.client.spec().model_name)
    }
}

/// Chat-model composer: the token surfaces are sent as a JSON list.
pub struct ChatComposeOracle {
    client: Arc<HttpClient>,
    tokenizer: Arc<dyn Tokenizer>,
}

impl ChatComposeOracle {
    pub fn new(client: Arc<HttpClient>, tokenizer: Arc<dyn Tokenizer>) -> Self {
        Self { client, tokenizer }
    }
}

impl ComposeOracle for ChatComposeOracle {
    fn compose(&self, sub: &[TokenId], seed: u64) -> Result<TokenSeq, PerturbError> {
        let surfaces: Vec<String> = sub.iter().map(|&t| self.tokenizer.decode(&[t])).collect();
        let req = Request::Chat {
            messages: vec![
                ChatMessage::system(GPT_COMPOSE_PROMPT),
                ChatMessage::user(serde_json::to_string(&surfaces).expect("serializes")),
            ],
        };
        let reply = self.client.complete(&req, seed)?;
        Ok(TokenSeq(self.tokenizer.encode(&reply)))
    }

    fn name(&self) -> String {
        format!("chat-compose:{}", self.client.spec().model_name)
    }
}

/// Adapter for an external masked-LM fill service.
///
/// POSTs `{"masked_text", "mask_token", "seed"}` to the endpoint and expects
/// `{"filled_text"}` back. Replies are cached when a cache is given.
pub struct BertFillOracle {
    endpoint: String,
    agent: ureq::Agent,
    tokenizer: Arc<dyn Tokenizer>,
    cache: Option<DiskCache>,
    pub mask_text: String,
}

impl BertFillOracle {
    pub fn new(endpoint: impl Into<String>, tokenizer: Arc<dyn Tokenizer>, cache: Option<DiskCache>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(std::time::Duration::from_secs(60)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            agent,
            tokenizer,
            cache,
            mask_text: "[MASK]".into(),
        }
    }
}

impl FillOracle for BertFillOracle {
    fn fill(&self, m: &MaskedSeq, seed: u64) -> Result<TokenSeq, PerturbError> {
        let body = json!({
            "masked_text": render_masked(m, self.tokenizer.as_ref(), &self.mask_text),
            "mask_token": self.mask_text,
            "seed": seed,
        });
        let key = json!({"bert": self.endpoint, "body": body});
        if let Some(c) = &self.cache {
            if let Some(hit) = c.get(&key)? {
                return Ok(TokenSeq(self.tokenizer.encode(&hit)));
            }
        }
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .send_json(&body)
            .map_err(|e| PerturbError::Oracle(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| PerturbError::Oracle(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(PerturbError::Oracle(format!("fill endpoint returned HTTP {status}: {text}")));
        }
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| PerturbError::Oracle(e.to_string()))?;
        let filled = v["filled_text"]
            .as_str()
            .ok_or_else(|| PerturbError::Oracle(format!("no filled_text in {text}")))?;
        if let Some(c) = &self.cache {
            c.put(&key, filled)?;
        }
        Ok(TokenSeq(self.tokenizer.encode(filled)))
    }

    fn name(&self) -> String {
        format!("bert:{}", self.endpoint)
    }
}

/// Perturbation family used to build a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbMode {
    TopkRefill,
    BertFill,
    RandFill,
    GptMaskFill,
    GptTokenCompose,
}

impl PerturbMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PerturbMode::TopkRefill => "topk-refill",
            PerturbMode::BertFill => "bert-fill",
            PerturbMode::RandFill => "rand-fill",
            PerturbMode::GptMaskFill => "gpt-mask-fill",
            PerturbMode::GptTokenCompose => "gpt-token-compose",
        }
    }
}

fn default_mask_prob() -> f64 {
    0.5
}
fn default_k() -> usize {
    5
}
fn default_corpus_size() -> usize {
    512
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbSpec {
    pub mode: PerturbMode,
    #[serde(default = "default_mask_prob")]
    pub mask_prob: f64,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_corpus_size")]
    pub corpus_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl PerturbSpec {
    pub fn new(mode: PerturbMode, mask_prob: f64, corpus_size: usize, seed: u64) -> Self {
        Self {
            mode,
            mask_prob,
            k: default_k(),
            corpus_size,
            seed,
        }
    }
}

/// Fixed scaffold rendered around the (perturbed) query.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptTemplate {
    #[serde(default)]
    pub prefix: Vec<TokenId>,
    #[serde(default)]
    pub suffix: Vec<TokenId>,
}

impl PromptTemplate {
    pub fn new(prefix: Vec<TokenId>, suffix: Vec<TokenId>) -> Self {
        Self { prefix, suffix }
    }

    pub fn render(&self, query: &[TokenId]) -> TokenSeq {
        let mut v = Vec::with_capacity(self.prefix.len() + query.len() + self.suffix.len());
        v.extend_from_slice(&self.prefix);
        v.extend_from_slice(query);
        v.extend_from_slice(&self.suffix);
        TokenSeq(v)
    }

    /// The query part of a rendered input, or the whole input when it does
    /// not carry this template's prefix and suffix.
    pub fn query_of<'a>(&self, input: &'a [TokenId]) -> &'a [TokenId] {
        let (p, s) = (self.prefix.len(), self.suffix.len());
        if input.len() >= p + s && input[..p] == self.prefix[..] && input[input.len() - s..] == self.suffix[..] {
            &input[p..input.len() - s]
        } else {
            input
        }
    }
}

/// Identity of the unperturbed prompt inside its template.
pub fn prompt_fingerprint(prompt: &[TokenId], template: &PromptTemplate) -> String {
    let canon = json!({"prompt": prompt, "template": template});
    hex::encode(Sha256::digest(serde_json::to_vec(&canon).expect("serializes")))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub entry_index: usize,
    pub seed: u64,
    /// Contract-violation resamples needed before this entry was accepted.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub resamples: u32,
    /// The full rendered input (template included).
    pub input_token_ids: TokenSeq,
    pub kept_origin_indices: Vec<usize>,
    pub output_token_ids: TokenSeq,
    pub generator_fingerprint: String,
}

fn is_zero(x: &u32) -> bool {
    *x == 0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CorpusHeader {
    schema: String,
    spec: PerturbSpec,
    template: PromptTemplate,
    prompt: TokenSeq,
    fingerprint: String,
}

/// A fixed set of perturbed inputs and the generator's outputs for them.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationCorpus {
    pub spec: PerturbSpec,
    pub template: PromptTemplate,
    pub prompt: TokenSeq,
    pub fingerprint: String,
    pub entries: Vec<CorpusEntry>,
}

#[derive(Debug, Error)]
pub enum CorpusIoError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

impl PerturbationCorpus {
    pub fn new(prompt: TokenSeq, template: PromptTemplate, spec: PerturbSpec, entries: Vec<CorpusEntry>) -> Self {
        let fingerprint = prompt_fingerprint(&prompt, &template);
        Self {
            spec,
            template,
            prompt,
            fingerprint,
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Query region of entry `i`'s input.
    pub fn query(&self, i: usize) -> &[TokenId] {
        self.template.query_of(&self.entries[i].input_token_ids)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        let header = CorpusHeader {
            schema: CORPUS_SCHEMA.into(),
            spec: self.spec.clone(),
            template: self.template.clone(),
            prompt: self.prompt.clone(),
            fingerprint: self.fingerprint.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, CorpusIoError> {
        let mut lines = r.lines();
        let first = lines.next().ok_or(CorpusIoError::Parse {
            line: 1,
            msg: "empty corpus file".into(),
        })??;
        let header: CorpusHeader = serde_json::from_str(&first).map_err(|e| CorpusIoError::Parse {
            line: 1,
            msg: e.to_string(),
        })?;
        if header.schema != CORPUS_SCHEMA {
            return Err(CorpusIoError::Parse {
                line: 1,
                msg: format!("unsupported schema {:?}", header.schema),
            });
        }
        let mut entries = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: CorpusEntry = serde_json::from_str(&line).map_err(|e| CorpusIoError::Parse {
                line: i + 2,
                msg: e.to_string(),
            })?;
            entries.push(e);
        }
        Ok(Self {
            spec: header.spec,
            template: header.template,
            prompt: header.prompt,
            fingerprint: header.fingerprint,
            entries,
        })
    }
}

/// Oracles and tables available to corpus builders and evaluators.
#[derive(Clone, Default)]
pub struct OracleSet {
    pub embed: Option<Arc<EmbedTable>>,
    pub bert: Option<Arc<dyn FillOracle>>,
    pub rand: Option<Arc<dyn FillOracle>>,
    pub gpt_m: Option<Arc<dyn FillOracle>>,
    pub gpt_t: Option<Arc<dyn ComposeOracle>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BuildOptions {
    /// Bound on concurrently running entries (and therefore generator calls).
    pub max_in_flight: usize,
    /// Oracle retries per fill before the sample is rejected.
    pub retry_budget: u32,
    /// Fresh perturbations tried after a rejected sample before giving up.
    pub max_resamples: u32,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            max_in_flight: 8,
            retry_budget: 3,
            max_resamples: 8,
        }
    }
}

/// Build failure carrying everything that completed before the abort.
#[derive(Debug, Error)]
#[error("corpus build aborted at entry {failed_entry} ({} of {requested} entries completed): {source}", partial.len())]
pub struct BuildError {
    pub partial: PerturbationCorpus,
    pub failed_entry: usize,
    pub requested: usize,
    #[source]
    pub source: EntryError,
}

#[derive(Debug, Error)]
pub enum EntryError {
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error("generator: {0}")]
    Generator(#[from] GenError),
}

/// Perturb the query once for `spec.mode`. Also returns the prompt indices
/// of the tokens the mask kept.
fn perturb_query(
    prompt: &[TokenId],
    spec: &PerturbSpec,
    oracles: &OracleSet,
    seed: u64,
    retry_budget: u32,
) -> Result<(TokenSeq, Vec<usize>), PerturbError> {
    let mut rng = rng_from_seed(seed);
    let m = mask_tokens(prompt, spec.mask_prob, &mut rng);
    let oracle_seed = rng.random::<u64>();
    let query = match spec.mode {
        PerturbMode::TopkRefill => {
            let table = oracles.embed.as_deref().ok_or(PerturbError::MissingOracle("topk-refill"))?;
            refill_topk(&m, table, spec.k, &mut rng)?
        }
        PerturbMode::BertFill => fill_with_oracle(
            &m,
            oracles.bert.as_deref().ok_or(PerturbError::MissingOracle("bert-fill"))?,
            oracle_seed,
            retry_budget,
        )?,
        PerturbMode::RandFill => fill_with_oracle(
            &m,
            oracles.rand.as_deref().ok_or(PerturbError::MissingOracle("rand-fill"))?,
            oracle_seed,
            retry_budget,
        )?,
        PerturbMode::GptMaskFill => fill_with_oracle(
            &m,
            oracles.gpt_m.as_deref().ok_or(PerturbError::MissingOracle("gpt-mask-fill"))?,
            oracle_seed,
            retry_budget,
        )?,
        PerturbMode::GptTokenCompose => compose_from_tokens(
            &m.kept(),
            oracles.gpt_t.as_deref().ok_or(PerturbError::MissingOracle("gpt-token-compose"))?,
            oracle_seed,
            retry_budget,
        )?,
    };
    Ok((query, m.kept_origin))
}

/// Build `spec.corpus_size` perturbed inputs of `prompt` and record the
/// generator's output for each. Entry `i` perturbs with the stream seeded
/// with `spec.seed + i` and samples the generator with
/// [`generation_seed`] of it, so results do not depend on scheduling.
// The error carries the partial corpus by design.
#[allow(clippy::result_large_err)]
pub fn build_perturbation_corpus(
    prompt: &TokenSeq,
    template: &PromptTemplate,
    spec: &PerturbSpec,
    gen: &dyn TextGenerator,
    oracles: &OracleSet,
    opts: &BuildOptions,
) -> Result<PerturbationCorpus, BuildError> {
    let fail = |idx: usize, source: EntryError| BuildError {
        partial: PerturbationCorpus::new(prompt.clone(), template.clone(), spec.clone(), Vec::new()),
        failed_entry: idx,
        requested: spec.corpus_size,
        source,
    };
    if !(0.0..=1.0).contains(&spec.mask_prob) {
        return Err(fail(0, PerturbError::BadProbability(spec.mask_prob).into()));
    }
    if spec.corpus_size == 0 {
        return Err(fail(0, PerturbError::Config("corpus_size must be at least 1".into()).into()));
    }
    let gen_fp = gen.fingerprint();
    let abort = AtomicBool::new(false);

    let make_entry = |i: usize| -> Option<Result<CorpusEntry, EntryError>> {
        if abort.load(Ordering::Relaxed) {
            return None;
        }
        let seed = spec.seed.wrapping_add(i as u64);
        let result = (|| {
            let mut resample = 0;
            let (query, kept) = loop {
                match perturb_query(prompt, spec, oracles, attempt_seed(seed, resample), opts.retry_budget) {
                    Ok(v) => break v,
                    Err(PerturbError::ContractViolation { .. }) if resample < opts.max_resamples => {
                        resample += 1;
                    }
                    Err(e) => return Err(EntryError::from(e)),
                }
            };
            let input = template.render(&query);
            let output = gen.generate(&input, generation_seed(seed))?;
            Ok(CorpusEntry {
                entry_index: i,
                seed,
                resamples: resample,
                input_token_ids: input,
                kept_origin_indices: kept,
                output_token_ids: output,
                generator_fingerprint: gen_fp.clone(),
            })
        })();
        if result.is_err() {
            abort.store(true, Ordering::Relaxed);
        }
        Some(result)
    };

    let results: Vec<Option<Result<CorpusEntry, EntryError>>> = if opts.max_in_flight <= 1 {
        (0..spec.corpus_size).map(make_entry).collect()
    } else {
        match rayon::ThreadPoolBuilder::new().num_threads(opts.max_in_flight).build() {
            Ok(pool) => pool.install(|| (0..spec.corpus_size).into_par_iter().map(make_entry).collect()),
            Err(e) => return Err(fail(0, PerturbError::Config(format!("thread pool: {e}")).into())),
        }
    };

    let mut entries = Vec::with_capacity(spec.corpus_size);
    let mut first_err = None;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Some(Ok(e)) => entries.push(e),
            Some(Err(e)) if first_err.is_none() => first_err = Some((i, e)),
            _ => {}
        }
    }
    let corpus = PerturbationCorpus::new(prompt.clone(), template.clone(), spec.clone(), entries);
    match first_err {
        None => Ok(corpus),
        Some((i, source)) => Err(BuildError {
            partial: corpus,
            failed_entry: i,
            requested: spec.corpus_size,
            source,
        }),
    }
}

/// The four distributions used to measure trigger reproducibility.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EvalMode {
    #[serde(rename = "bert")]
    Bert,
    #[serde(rename = "rand")]
    Rand,
    #[serde(rename = "gpt-m")]
    GptM,
    #[serde(rename = "gpt-t")]
    GptT,
}

impl EvalMode {
    pub const ALL: [EvalMode; 4] = [EvalMode::Bert, EvalMode::Rand, EvalMode::GptM, EvalMode::GptT];

    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Bert => "bert",
            EvalMode::Rand => "rand",
            EvalMode::GptM => "gpt-m",
            EvalMode::GptT => "gpt-t",
        }
    }

    pub fn available(self, oracles: &OracleSet) -> bool {
        match self {
            EvalMode::Bert => oracles.bert.is_some(),
            EvalMode::Rand => oracles.rand.is_some(),
            EvalMode::GptM => oracles.gpt_m.is_some(),
            EvalMode::GptT => oracles.gpt_t.is_some(),
        }
    }
}

/// One evaluation input containing `sub`: padding insertion plus fill for the
/// mask-based modes, direct composition for `gpt-t`.
pub fn eval_input(
    mode: EvalMode,
    sub: &[TokenId],
    target_len: usize,
    oracles: &OracleSet,
    seed: u64,
    retry_budget: u32,
) -> Result<TokenSeq, PerturbError> {
    let mut rng = rng_from_seed(seed);
    let fill = |o: &Option<Arc<dyn FillOracle>>, rng: &mut Rng| -> Result<TokenSeq, PerturbError> {
        let o = o.as_deref().ok_or(PerturbError::MissingOracle(mode.as_str()))?;
        let m = insert_padding(sub, target_len, rng)?;
        fill_with_oracle(&m, o, rng.random::<u64>(), retry_budget)
    };
    match mode {
        EvalMode::Bert => fill(&oracles.bert, &mut rng),
        EvalMode::Rand => fill(&oracles.rand, &mut rng),
        EvalMode::GptM => fill(&oracles.gpt_m, &mut rng),
        EvalMode::GptT => {
            let o = oracles.gpt_t.as_deref().ok_or(PerturbError::MissingOracle("gpt-t"))?;
            compose_from_tokens(sub, o, rng.random::<u64>(), retry_budget)
        }
    }
}
