//! Token embedding tables and exact cosine nearest-neighbour lookup.
//!
//! On-disk format (`SUBTRACE-EMB v1`):
//!
//! ```text
//! SUBTRACE-EMB v1\n
//! <V> <d>\n
//! V*d little-endian f32, row-major
//! ```
//!
//! An optional `<path>.vocab` sidecar lists one UTF-8 surface per line, line
//! `i` being the surface of token `i`. Tables are expected to hold the
//! model's input embedding matrix.

use std::cmp::Ordering;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::seq::TokenId;

const MAGIC: &str = "SUBTRACE-EMB v1";

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("cannot read embedding table {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("expected {expected} bytes of row data, found {found}")]
    RowCount { expected: usize, found: usize },
    #[error("non-finite component at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    OutOfRange { id: TokenId, vocab: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("sidecar vocabulary has {found} lines, table has {expected} rows")]
    Vocab { expected: usize, found: usize },
}

/// A dense `V x d` embedding matrix with per-row squared norms cached for cosine queries.
#[derive(Debug, Clone)]
pub struct EmbedTable {
    dim: usize,
    rows: Vec<f32>,
    sq_norms: Vec<f64>,
    surfaces: Option<Vec<String>>,
}

impl EmbedTable {
    /// Build from row vectors. Every row must have the same length and finite values.
    pub fn from_rows(rows: Vec<Vec<f32>>) -> Result<Self, EmbedError> {
        let dim = rows.first().map_or(0, Vec::len);
        if dim == 0 {
            return Err(EmbedError::Header("table needs at least one row of positive dimension".into()));
        }
        let mut flat = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(EmbedError::Header(format!(
                    "row {i} has {} components, expected {dim}",
                    r.len()
                )));
            }
            flat.extend_from_slice(r);
        }
        Self::from_flat(rows.len(), dim, flat)
    }

    fn from_flat(vocab: usize, dim: usize, rows: Vec<f32>) -> Result<Self, EmbedError> {
        debug_assert_eq!(rows.len(), vocab * dim);
        if let Some(pos) = rows.iter().position(|x| !x.is_finite()) {
            return Err(EmbedError::NonFinite {
                row: pos / dim,
                col: pos % dim,
            });
        }
        let sq_norms = rows
            .chunks_exact(dim)
            .map(|r| r.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>())
            .collect();
        Ok(Self {
            dim,
            rows,
            sq_norms,
            surfaces: None,
        })
    }

    pub fn with_surfaces(mut self, surfaces: Vec<String>) -> Result<Self, EmbedError> {
        if surfaces.len() != self.vocab_size() {
            return Err(EmbedError::Vocab {
                expected: self.vocab_size(),
                found: surfaces.len(),
            });
        }
        self.surfaces = Some(surfaces);
        Ok(self)
    }

    pub fn vocab_size(&self) -> usize {
        self.sq_norms.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, id: TokenId) -> Option<&[f32]> {
        let i = id as usize;
        (i < self.vocab_size()).then(|| &self.rows[i * self.dim..(i + 1) * self.dim])
    }

    pub fn surface(&self, id: TokenId) -> Option<&str> {
        self.surfaces.as_ref()?.get(id as usize).map(String::as_str)
    }

    pub fn surfaces(&self) -> Option<&[String]> {
        self.surfaces.as_deref()
    }

    /// Look up a token id by its exact surface string.
    pub fn id_of(&self, surface: &str) -> Option<TokenId> {
        self.surfaces
            .as_ref()?
            .iter()
            .position(|s| s == surface)
            .map(|i| i as TokenId)
    }

    /// Cosine similarity between two rows; zero-norm rows have similarity 0.
    pub fn cosine(&self, a: TokenId, b: TokenId) -> Result<f64, EmbedError> {
        let ra = self.checked_row(a)?;
        let rb = self.checked_row(b)?;
        let denom = (self.sq_norms[a as usize] * self.sq_norms[b as usize]).sqrt();
        if denom == 0.0 {
            return Ok(0.0);
        }
        Ok(dot(ra, rb) / denom)
    }

    fn checked_row(&self, id: TokenId) -> Result<&[f32], EmbedError> {
        self.row(id).ok_or(EmbedError::OutOfRange {
            id,
            vocab: self.vocab_size(),
        })
    }

    /// The `k` most cosine-similar tokens to `token`, itself excluded, ordered by
    /// similarity descending and then by smaller id. Exact full scan.
    pub fn top_k_similar(&self, token: TokenId, k: usize) -> Result<Vec<TokenId>, EmbedError> {
        if k == 0 {
            return Err(EmbedError::ZeroK);
        }
        let q = self.checked_row(token)?;
        let mut scored: Vec<(Cosine, TokenId)> = self
            .rows
            .chunks_exact(self.dim)
            .zip(&self.sq_norms)
            .enumerate()
            .filter(|&(i, _)| i as TokenId != token)
            .map(|(i, (r, &n))| (Cosine::new(dot(q, r), n), i as TokenId))
            .collect();
        let by_rank = |a: &(Cosine, TokenId), b: &(Cosine, TokenId)| b.0.cmp(&a.0).then(a.1.cmp(&b.1));
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, by_rank);
            scored.truncate(k);
        }
        scored.sort_by(by_rank);
        Ok(scored.into_iter().map(|(_, id)| id).collect())
    }

    /// Write the table (and sidecar, when surfaces are attached) to `path`.
    pub fn save(&self, path: &Path) -> Result<(), EmbedError> {
        let io_err = |source| EmbedError::Io {
            path: path.to_path_buf(),
            source,
        };
        let f = fs::File::create(path).map_err(io_err)?;
        let mut w = BufWriter::new(f);
        write!(w, "{MAGIC}\n{} {}\n", self.vocab_size(), self.dim).map_err(io_err)?;
        for x in &self.rows {
            w.write_all(&x.to_le_bytes()).map_err(io_err)?;
        }
        w.flush().map_err(io_err)?;
        if let Some(s) = &self.surfaces {
            let side = sidecar_path(path);
            let mut text = s.join("\n");
            text.push('\n');
            fs::write(&side, text).map_err(|source| EmbedError::Io { path: side, source })?;
        }
        Ok(())
    }
}

/// Cosine to a fixed query, ordered without dividing: the query norm is a
/// common factor, so `sign(dot) dot^2 / |r|^2` ranks the same way and
/// cross-multiplication keeps mathematically equal values tied.
#[derive(Debug, Clone, Copy)]
struct Cosine {
    dot: f64,
    sq_norm: f64,
}

impl Cosine {
    fn new(dot: f64, sq_norm: f64) -> Self {
        if sq_norm == 0.0 {
            Self { dot: 0.0, sq_norm: 1.0 }
        } else {
            Self { dot, sq_norm }
        }
    }
}

impl Ord for Cosine {
    fn cmp(&self, other: &Self) -> Ordering {
        let sign = |x: f64| (x > 0.0) as i8 - (x < 0.0) as i8;
        let (sa, sb) = (sign(self.dot), sign(other.dot));
        if sa != sb || sa == 0 {
            return sa.cmp(&sb);
        }
        let a = self.dot * self.dot * other.sq_norm;
        let b = other.dot * other.dot * self.sq_norm;
        let mag = a.partial_cmp(&b).unwrap_or(Ordering::Equal);
        if sa > 0 { mag } else { mag.reverse() }
    }
}

impl PartialOrd for Cosine {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Cosine {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Cosine {}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".vocab");
    PathBuf::from(s)
}

/// Parse a `SUBTRACE-EMB v1` file, attaching `<path>.vocab` surfaces when present.
pub fn load_embed_table(path: &Path) -> Result<EmbedTable, EmbedError> {
    let bytes = fs::read(path).map_err(|source| EmbedError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let table = parse_embed_bytes(&bytes)?;
    let side = sidecar_path(path);
    if side.exists() {
        let text = fs::read_to_string(&side).map_err(|source| EmbedError::Io {
            path: side.clone(),
            source,
        })?;
        let surfaces: Vec<String> = text.lines().map(str::to_owned).collect();
        return table.with_surfaces(surfaces);
    }
    Ok(table)
}

/// Parse the in-memory bytes of a `SUBTRACE-EMB v1` file.
pub fn parse_embed_bytes(bytes: &[u8]) -> Result<EmbedTable, EmbedError> {
    let (magic, rest) = split_line(bytes).ok_or_else(|| EmbedError::Header("missing magic line".into()))?;
    if magic != MAGIC.as_bytes() {
        return Err(EmbedError::Header(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let (shape, data) = split_line(rest).ok_or_else(|| EmbedError::Header("missing shape line".into()))?;
    let shape = std::str::from_utf8(shape).map_err(|_| EmbedError::Header("shape line is not UTF-8".into()))?;
    let mut parts = shape.split(' ');
    let mut num = |what: &str| -> Result<usize, EmbedError> {
        parts
            .next()
            .and_then(|p| p.parse().ok())
            .filter(|&n: &usize| n > 0)
            .ok_or_else(|| EmbedError::Header(format!("bad {what} in shape line {shape:?}")))
    };
    let vocab = num("V")?;
    let dim = num("d")?;
    if parts.next().is_some() {
        return Err(EmbedError::Header(format!("trailing fields in shape line {shape:?}")));
    }
    let expected = vocab
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| EmbedError::Header("shape overflows".into()))?;
    if data.len() != expected {
        return Err(EmbedError::RowCount {
            expected,
            found: data.len(),
        });
    }
    let rows = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    EmbedTable::from_flat(vocab, dim, rows)
}

fn split_line(bytes: &[u8]) -> Option<(&[u8], &[u8])> {
    let nl = bytes.iter().position(|&b| b == b'\n')?;
    Some((&bytes[..nl], &bytes[nl + 1..]))
}
