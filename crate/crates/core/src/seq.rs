//! Token-sequence algebra.
//!
//! Containment here is the non-contiguous subsequence relation: a needle is
//! contained in a host when it can be obtained by deleting zero or more host
//! tokens without reordering the rest. Matching is on token ids only; surface
//! strings are display metadata.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

/// Vocabulary index of a token.
pub type TokenId = u32;

/// A token id with an optional display surface.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    pub id: TokenId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surface: Option<String>,
}

impl Token {
    pub fn new(id: TokenId) -> Self {
        Self { id, surface: None }
    }

    pub fn with_surface(id: TokenId, surface: impl Into<String>) -> Self {
        Self {
            id,
            surface: Some(surface.into()),
        }
    }
}

macro_rules! token_vec_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub Vec<TokenId>);

        impl $name {
            pub fn new(tokens: Vec<TokenId>) -> Self {
                Self(tokens)
            }

            pub fn empty() -> Self {
                Self(Vec::new())
            }

            pub fn into_inner(self) -> Vec<TokenId> {
                self.0
            }
        }

        impl Deref for $name {
            type Target = [TokenId];

            fn deref(&self) -> &[TokenId] {
                &self.0
            }
        }

        impl AsRef<[TokenId]> for $name {
            fn as_ref(&self) -> &[TokenId] {
                &self.0
            }
        }

        impl From<Vec<TokenId>> for $name {
            fn from(v: Vec<TokenId>) -> Self {
                Self(v)
            }
        }

        impl From<&[TokenId]> for $name {
            fn from(v: &[TokenId]) -> Self {
                Self(v.to_vec())
            }
        }

        impl<const N: usize> From<[TokenId; N]> for $name {
            fn from(v: [TokenId; N]) -> Self {
                Self(v.to_vec())
            }
        }

        impl FromIterator<TokenId> for $name {
            fn from_iter<I: IntoIterator<Item = TokenId>>(iter: I) -> Self {
                Self(iter.into_iter().collect())
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("[")?;
                for (i, t) in self.0.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{t}")?;
                }
                f.write_str("]")
            }
        }
    };
}

token_vec_newtype!(
    /// An ordered host sequence (prompt, model input or output, document).
    TokenSeq
);
token_vec_newtype!(
    /// An ordered selection of tokens with no positions attached; containment is
    /// always evaluated against a host.
    SubSeq
);

/// `true` iff `needle` is a (not necessarily contiguous) subsequence of `haystack`.
///
/// Single left-to-right greedy pass, `O(|haystack|)`.
pub fn is_subsequence(needle: &[TokenId], haystack: &[TokenId]) -> bool {
    if needle.len() > haystack.len() {
        return false;
    }
    let mut want = needle.iter();
    let mut next = want.next();
    for tok in haystack {
        match next {
            None => return true,
            Some(n) if n == tok => next = want.next(),
            Some(_) => {}
        }
    }
    next.is_none()
}

/// Leftmost-greedy witness for `needle ⊑ haystack`: the strictly increasing
/// host indices where each needle token is matched at its earliest legal index.
pub fn match_positions(needle: &[TokenId], haystack: &[TokenId]) -> Option<Vec<usize>> {
    let mut out = Vec::with_capacity(needle.len());
    let mut start = 0;
    for &want in needle {
        let off = haystack.get(start..)?.iter().position(|&t| t == want)?;
        out.push(start + off);
        start += off + 1;
    }
    Some(out)
}

/// Index one past the leftmost-greedy match end, or `None` when not contained.
/// For the empty needle this is `Some(0)`.
pub fn match_end(needle: &[TokenId], haystack: &[TokenId]) -> Option<usize> {
    match_positions(needle, haystack).map(|p| p.last().map_or(0, |&i| i + 1))
}

/// `left` followed by `right`.
pub fn concat(left: &[TokenId], right: &[TokenId]) -> SubSeq {
    let mut v = Vec::with_capacity(left.len() + right.len());
    v.extend_from_slice(left);
    v.extend_from_slice(right);
    SubSeq(v)
}

/// Result of a bounded enumeration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Enumeration {
    pub items: Vec<SubSeq>,
    /// `true` when more subsequences existed beyond the cap.
    pub truncated: bool,
}

impl Enumeration {
    pub fn is_complete(&self) -> bool {
        !self.truncated
    }
}

/// All distinct (by content) subsequences of `host` of length `1..=max_len`,
/// ordered by length and then lexicographically by token id, truncated at
/// `cap` items.
///
/// Level `k` is built from level `k-1`: a distinct subsequence whose
/// leftmost-greedy match ends at index `e` extends to every distinct
/// `(k)`-subsequence by appending any host token after `e`. Because the
/// greedy end is minimal, this reaches every distinct subsequence exactly once
/// per content.
pub fn enumerate_subsequences(host: &[TokenId], max_len: usize, cap: usize) -> Enumeration {
    assert!(max_len >= 1, "max_len must be at least 1");
    assert!(cap >= 1, "cap must be at least 1");

    let mut items = Vec::new();
    // content -> index one past its leftmost-greedy match end
    let mut frontier: BTreeMap<Vec<TokenId>, usize> = BTreeMap::new();
    frontier.insert(Vec::new(), 0);

    for len in 1..=max_len {
        let remaining = cap - items.len();
        let mut next: BTreeMap<Vec<TokenId>, usize> = BTreeMap::new();
        for (prefix, &end) in &frontier {
            for (i, &tok) in host.iter().enumerate().skip(end) {
                let mut cand = prefix.clone();
                cand.push(tok);
                next.entry(cand).or_insert(i + 1);
            }
            // Keep one item beyond what fits so truncation is detectable.
            while next.len() > remaining + 1 {
                next.pop_last();
            }
        }
        if next.is_empty() {
            break;
        }
        if next.len() > remaining {
            items.extend(next.into_keys().take(remaining).map(SubSeq));
            return Enumeration {
                items,
                truncated: true,
            };
        }
        items.extend(next.keys().cloned().map(SubSeq));
        frontier = next;
        if items.len() == cap {
            // Exactly full: anything at the next length means truncation.
            let more = max_len > len
                && frontier
                    .iter()
                    .any(|(_, &end)| end < host.len());
            return Enumeration {
                items,
                truncated: more,
            };
        }
    }
    Enumeration {
        items,
        truncated: false,
    }
}
