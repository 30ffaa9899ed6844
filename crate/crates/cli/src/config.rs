//! Run configuration (TOML) and the objects built from it.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use subtrace_core::genclient::{Combine, DiskCache, HttpClient, HttpGenerator, Rule};
use subtrace_core::perturb::{ChatComposeOracle, ChatFillOracle, OracleSet, PaddingComposeOracle, RandFillOracle};
use subtrace_core::{load_embed_table, load_tokenizer, GeneratorSpec, PerturbSpec, PromptTemplate, RuleGenerator, TextGenerator, Tokenizer, TraceParams};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateText {
    #[serde(default)]
    pub prefix: String,
    #[serde(default)]
    pub suffix: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleText {
    pub trigger: String,
    pub emission: String,
    pub prob: f64,
}

fn default_combine() -> Combine {
    Combine::IndependentOr
}

/// In-process rule generator, used when `generator.endpoint = "mock"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RulesConfig {
    #[serde(default)]
    pub base_emission: String,
    #[serde(default = "default_combine")]
    pub combine: Combine,
    #[serde(default)]
    pub rules: Vec<RuleText>,
}

fn yes() -> bool {
    true
}

/// Fill and compose oracles. `bert` takes `"mock"` or a fill-service URL;
/// `gpt_m` and `gpt_t` take `"mock"` or `"chat"` (the generator endpoint's
/// chat route).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    #[serde(default)]
    pub bert: Option<String>,
    #[serde(default = "yes")]
    pub rand: bool,
    #[serde(default)]
    pub gpt_m: Option<String>,
    #[serde(default)]
    pub gpt_t: Option<String>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            bert: None,
            rand: true,
            gpt_m: None,
            gpt_t: None,
        }
    }
}

fn default_n_per_mode() -> usize {
    25
}
fn default_input_len() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SrepConfig {
    #[serde(default = "default_n_per_mode")]
    pub n_per_mode: usize,
    /// Length of the padded inputs for the mask-based modes.
    #[serde(default = "default_input_len")]
    pub input_len: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SrepConfig {
    fn default() -> Self {
        Self {
            n_per_mode: default_n_per_mode(),
            input_len: default_input_len(),
            seed: 0,
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_cache_dir() -> PathBuf {
    PathBuf::from(".subtrace-cache")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    #[serde(default)]
    pub embed_table: Option<PathBuf>,
    #[serde(default = "default_cache_dir")]
    pub cache_dir: PathBuf,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            embed_table: None,
            cache_dir: default_cache_dir(),
            output_dir: default_output_dir(),
        }
    }
}

/// Everything a run depends on besides seeds and the cache. Relative paths
/// are resolved against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// `whitespace:VOCAB` or `bpe:VOCAB_JSON,MERGES`.
    pub tokenizer: String,
    #[serde(default)]
    pub template: TemplateText,
    pub generator: GeneratorSpec,
    #[serde(default)]
    pub rules: Option<RulesConfig>,
    pub perturb: PerturbSpec,
    #[serde(default)]
    pub trace: TraceParams,
    #[serde(default)]
    pub srep: SrepConfig,
    #[serde(default)]
    pub oracles: OracleConfig,
    #[serde(default)]
    pub paths: Paths,
}

/// A parsed config together with the directory relative paths refer to.
pub struct Loaded {
    pub config: RunConfig,
    pub base: PathBuf,
}

/// Rewrite the file paths inside a tokenizer spec relative to `base`.
pub fn resolve_tokenizer_spec(spec: &str, base: &Path) -> String {
    let join = |p: &str| base.join(p).to_string_lossy().into_owned();
    if let Some(p) = spec.strip_prefix("whitespace:") {
        return format!("whitespace:{}", join(p));
    }
    if let Some((v, m)) = spec.strip_prefix("bpe:").and_then(|r| r.split_once(',')) {
        return format!("bpe:{},{}", join(v), join(m));
    }
    spec.to_owned()
}

pub fn load_tokenizer_spec(spec: &str) -> CliResult<Arc<dyn Tokenizer>> {
    load_tokenizer(spec).map_err(|e| CliError::config(format!("tokenizer {spec:?}: {e}")))
}

impl Loaded {
    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let config: RunConfig = toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { config, base })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base.join(p)
    }

    pub fn output_path(&self, explicit: Option<&Path>, name: &str) -> PathBuf {
        match explicit {
            Some(p) => p.to_path_buf(),
            None => self.resolve(&self.config.paths.output_dir).join(name),
        }
    }

    pub fn tokenizer(&self) -> CliResult<Arc<dyn Tokenizer>> {
        load_tokenizer_spec(&resolve_tokenizer_spec(&self.config.tokenizer, &self.base))
    }

    pub fn template(&self, tok: &dyn Tokenizer) -> PromptTemplate {
        PromptTemplate::new(tok.encode(&self.config.template.prefix), tok.encode(&self.config.template.suffix))
    }

    pub fn cache(&self) -> DiskCache {
        DiskCache::from_env_or(self.resolve(&self.config.paths.cache_dir))
    }

    fn client(&self) -> Arc<HttpClient> {
        Arc::new(HttpClient::new(self.config.generator.clone(), Some(self.cache())))
    }

    pub fn generator(&self, tok: &Arc<dyn Tokenizer>) -> CliResult<Arc<dyn TextGenerator>> {
        let spec = &self.config.generator;
        match (&self.config.rules, spec.is_mock()) {
            (Some(r), true) => {
                let rules = r
                    .rules
                    .iter()
                    .map(|x| Rule::new(tok.encode(&x.trigger), tok.encode(&x.emission), x.prob))
                    .collect();
                let g = RuleGenerator::new(rules, tok.encode(&r.base_emission), r.combine);
                g.validate().map_err(CliError::config)?;
                Ok(Arc::new(g))
            }
            (Some(_), false) => Err(CliError::config("[rules] requires generator.endpoint = \"mock\"")),
            (None, _) => Ok(Arc::new(HttpGenerator::new(self.client(), tok.clone()))),
        }
    }

    /// Oracles named in the config, plus the embedding table when the
    /// perturbation mode needs it.
    pub fn oracles(&self, tok: &Arc<dyn Tokenizer>, need_embed: bool) -> CliResult<OracleSet> {
        let o = &self.config.oracles;
        let mut set = OracleSet::default();
        let vocab = tok.vocab_size();
        let mock_fill = || -> CliResult<RandFillOracle> {
            RandFillOracle::from_vocab(vocab, &[]).map_err(CliError::config)
        };
        if need_embed {
            let p = self
                .config
                .paths
                .embed_table
                .as_ref()
                .ok_or_else(|| CliError::config("topk-refill needs paths.embed_table"))?;
            let p = self.resolve(p);
            let table = load_embed_table(&p).map_err(|e| CliError::config(format!("embed table {}: {e}", p.display())))?;
            set.embed = Some(Arc::new(table));
        }
        if o.rand {
            set.rand = Some(Arc::new(mock_fill()?));
        }
        match o.bert.as_deref() {
            None => {}
            Some("mock") => set.bert = Some(Arc::new(mock_fill()?)),
            Some(url) => {
                set.bert = Some(Arc::new(subtrace_core::perturb::BertFillOracle::new(url, tok.clone(), Some(self.cache()))))
            }
        }
        match o.gpt_m.as_deref() {
            None => {}
            Some("mock") => set.gpt_m = Some(Arc::new(mock_fill()?)),
            Some("chat") => set.gpt_m = Some(Arc::new(ChatFillOracle::new(self.client(), tok.clone()))),
            Some(other) => return Err(CliError::config(format!("oracles.gpt_m must be \"mock\" or \"chat\", got {other:?}"))),
        }
        match o.gpt_t.as_deref() {
            None => {}
            Some("mock") => set.gpt_t = Some(Arc::new(PaddingComposeOracle::new(vocab).map_err(CliError::config)?)),
            Some("chat") => set.gpt_t = Some(Arc::new(ChatComposeOracle::new(self.client(), tok.clone()))),
            Some(other) => return Err(CliError::config(format!("oracles.gpt_t must be \"mock\" or \"chat\", got {other:?}"))),
        }
        Ok(set)
    }
}
