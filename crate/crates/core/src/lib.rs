//! Subsequence association tracing for language-model outputs.
//!
//! The crate estimates how strongly an input subsequence is associated with an
//! output subsequence over a corpus of perturbed inputs, searches for the most
//! associated triggers with beam search, measures how reproducible a trigger is
//! under several input distributions, counts the same statistic over training
//! corpora, and checks the constructive transformer results numerically.

// Input checks are written as `!(x > 0.0)` on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assoc;
pub mod corpus_stats;
pub mod embed;
pub mod genclient;
pub mod perturb;
pub mod seq;
pub mod theory;
pub mod tokenizer;
pub mod tracer;

pub use assoc::{estimate_psi, AssocEstimate, SrepReport};
pub use embed::{load_embed_table, EmbedTable};
pub use genclient::{GeneratorSpec, RuleGenerator, TextGenerator};
pub use perturb::{PerturbMode, PerturbSpec, PerturbationCorpus, PromptTemplate};
pub use seq::{concat, enumerate_subsequences, is_subsequence, match_positions, SubSeq, Token, TokenId, TokenSeq};
pub use tokenizer::{load_tokenizer, Tokenizer};
pub use tracer::{sat_trace, TraceParams, TraceResult};

/// Seeded RNG used for every reproducible stream in the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Seed a fresh stream.
pub fn rng_from_seed(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}

/// Serde helpers writing floats with 17 significant digits. Non-finite values
/// are written as `null` and read back as NaN.
pub mod sig17 {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use serde_json::value::RawValue;

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            RawValue::from_string(format!("{x:.16e}"))
                .map_err(serde::ser::Error::custom)?
                .serialize(s)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }

    pub mod opt {
        use super::*;

        pub fn serialize<S: Serializer>(x: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
            match x {
                Some(v) => super::serialize(v, s),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
            Option::<f64>::deserialize(d)
        }
    }
}
