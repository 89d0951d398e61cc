//! Frozen token embeddings.
//!
//! Providers turn answer text into a `T x E` matrix. Their output enters the
//! computation graph as constants, so no gradient ever reaches them.
//!
//! Binary file layout (all integers little-endian):
//!
//! ```text
//! "PSEB" | u32 version = 1 | u32 entry count | u32 dim E
//! per entry: u32 key length | key bytes (UTF-8) | u32 T | T*E f32 | T mask bytes (0/1)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::diff::Tensor;
use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"PSEB";
pub const EMBEDDING_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
    pub truncated: bool,
}

/// Lowercases and splits on whitespace and punctuation, keeping at most
/// `max_tokens` tokens.
pub fn tokenize(text: &str, max_tokens: usize) -> Result<TokenSequence> {
    if max_tokens == 0 {
        return Err(Error::Usage("tokenize: max_tokens must be at least 1".into()));
    }
    let lower = text.to_lowercase();
    let mut tokens: Vec<String> = lower
        .split(|c: char| c.is_whitespace() || c.is_ascii_punctuation() || c.is_ascii_control())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect();
    if tokens.is_empty() {
        return Err(Error::EmptyInput(format!("no tokens in {text:?}")));
    }
    let truncated = tokens.len() > max_tokens;
    tokens.truncate(max_tokens);
    Ok(TokenSequence { tokens, truncated })
}

/// `T x E` token matrix with a row validity mask; masked rows are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedSequence {
    pub matrix: Tensor,
    pub mask: Vec<bool>,
    pub provider_id: String,
}

impl EmbeddedSequence {
    pub fn new(matrix: Tensor, mask: Vec<bool>, provider_id: impl Into<String>) -> Result<Self> {
        if matrix.rank() != 2 || matrix.rows() != mask.len() {
            return Err(Error::Shape {
                op: "embedded_sequence",
                shapes: vec![matrix.shape().to_vec(), vec![mask.len()]],
            });
        }
        for (i, &m) in mask.iter().enumerate() {
            if !m && matrix.row(i).iter().any(|&v| v != 0.0) {
                return Err(Error::Usage(format!("embedded_sequence: masked row {i} is not zero")));
            }
        }
        Ok(Self {
            matrix,
            mask,
            provider_id: provider_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    /// Unmasked rows in order.
    pub fn valid_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| self.matrix.row(i))
    }
}

fn token_vector(token: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(token.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(digest);
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Maps every token to a seeded pseudo-random unit vector.
pub fn embed_hash(tokens: &TokenSequence, dim: usize, seed: u64) -> Result<EmbeddedSequence> {
    if dim < 2 {
        return Err(Error::Usage(format!("embed_hash: dim must be at least 2, got {dim}")));
    }
    let rows: Vec<Vec<f64>> = tokens.tokens.iter().map(|t| token_vector(t, dim, seed)).collect();
    EmbeddedSequence::new(Tensor::from_rows(&rows)?, vec![true; rows.len()], HashEmbedder::ID)
}

/// Source of frozen embeddings. `key` identifies the text for providers that
/// look embeddings up (see [`answer_key`] and friends); `text` is the raw
/// answer for providers that compute them.
pub trait EmbeddingProvider: Send + Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn max_tokens(&self) -> usize;
    fn embed(&self, key: &str, text: &str) -> Result<EmbeddedSequence>;
}

pub fn answer_key(answer_id: &str) -> String {
    answer_id.to_string()
}

pub fn paraphrase_key(answer_id: &str, z: usize) -> String {
    format!("{answer_id}#p{z}")
}

pub fn model_answer_key(question_id: &str) -> String {
    format!("model:{question_id}")
}

/// Deterministic stand-in for a pretrained embedder.
#[derive(Clone, Debug)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
    max_tokens: usize,
}

impl HashEmbedder {
    pub const ID: &'static str = "hash";

    pub fn new(dim: usize, seed: u64, max_tokens: usize) -> Result<Self> {
        if dim < 2 || max_tokens == 0 {
            return Err(Error::Usage(format!("hash embedder: dim {dim}, max_tokens {max_tokens}")));
        }
        Ok(Self { dim, seed, max_tokens })
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn id(&self) -> &str {
        Self::ID
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    fn embed(&self, _key: &str, text: &str) -> Result<EmbeddedSequence> {
        embed_hash(&tokenize(text, self.max_tokens)?, self.dim, self.seed)
    }
}

/// Precomputed embeddings looked up by key.
#[derive(Clone, Debug)]
pub struct FileEmbedder {
    entries: BTreeMap<String, EmbeddedSequence>,
    dim: usize,
    max_tokens: usize,
}

impl FileEmbedder {
    pub const ID: &'static str = "file";

    pub fn open(path: &Path, max_tokens: usize) -> Result<Self> {
        let bytes = fs::read(path)?;
        let (dim, entries) = decode_embeddings(&bytes, &path.display().to_string())?;
        Self::from_entries(entries, dim, max_tokens)
    }

    pub fn from_entries(entries: BTreeMap<String, EmbeddedSequence>, dim: usize, max_tokens: usize) -> Result<Self> {
        if let Some((k, e)) = entries.iter().find(|(_, e)| e.len() > max_tokens || e.dim() != dim) {
            return Err(Error::Usage(format!(
                "embedding `{k}` has shape {:?}, expected at most {max_tokens} x {dim}",
                e.matrix.shape()
            )));
        }
        Ok(Self {
            entries,
            dim,
            max_tokens,
        })
    }
}

impl EmbeddingProvider for FileEmbedder {
    fn id(&self) -> &str {
        Self::ID
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    fn embed(&self, key: &str, _text: &str) -> Result<EmbeddedSequence> {
        let mut e = self
            .entries
            .get(key)
            .cloned()
            .ok_or_else(|| Error::InsufficientData(format!("no precomputed embedding for key `{key}`")))?;
        e.provider_id = Self::ID.to_string();
        Ok(e)
    }
}

/// Encodes entries in the PSEB layout. Values are stored as `f32`.
pub fn encode_embeddings(entries: &BTreeMap<String, EmbeddedSequence>, dim: usize) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for (key, e) in entries {
        if e.dim() != dim {
            return Err(Error::Usage(format!(
                "embedding `{key}` has dimension {}, file dimension is {dim}",
                e.dim()
            )));
        }
        out.extend_from_slice(&(key.len() as u32).to_le_bytes());
        out.extend_from_slice(key.as_bytes());
        out.extend_from_slice(&(e.len() as u32).to_le_bytes());
        for v in e.matrix.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out.extend(e.mask.iter().map(|&m| m as u8));
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    context: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.context,
                Some(self.pos as u64),
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn err(&self, offset: usize, detail: impl Into<String>) -> Error {
        Error::format(self.context, Some(offset as u64), detail)
    }
}

/// Decodes a PSEB buffer into `(dim, entries)`.
pub fn decode_embeddings(bytes: &[u8], context: &str) -> Result<(usize, BTreeMap<String, EmbeddedSequence>)> {
    let mut c = Cursor { bytes, pos: 0, context };
    if c.take(4, "magic")? != EMBEDDING_MAGIC {
        return Err(c.err(0, "bad magic, expected PSEB"));
    }
    let version = c.u32("version")?;
    if version != EMBEDDING_VERSION {
        return Err(c.err(4, format!("unsupported version {version}")));
    }
    let count = c.u32("entry count")? as usize;
    let dim = c.u32("dimension")? as usize;
    let mut entries = BTreeMap::new();
    for _ in 0..count {
        let key_at = c.pos;
        let klen = c.u32("key length")? as usize;
        let key = std::str::from_utf8(c.take(klen, "key")?)
            .map_err(|_| c.err(key_at + 4, "key is not UTF-8"))?
            .to_string();
        let t = c.u32("token count")? as usize;
        let raw = c.take(t * dim * 4, "values")?;
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        let mask_at = c.pos;
        let mask = c
            .take(t, "mask")?
            .iter()
            .enumerate()
            .map(|(i, &b)| match b {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(c.err(mask_at + i, format!("mask byte {b} is not 0/1"))),
            })
            .collect::<Result<Vec<bool>>>()?;
        let matrix = if t == 0 || dim == 0 {
            return Err(c.err(key_at, format!("entry `{key}` is empty")));
        } else {
            Tensor::new(vec![t, dim], values)?
        };
        let seq = EmbeddedSequence::new(matrix, mask, FileEmbedder::ID).map_err(|e| c.err(key_at, e.to_string()))?;
        if entries.insert(key.clone(), seq).is_some() {
            return Err(c.err(key_at, format!("duplicate key `{key}`")));
        }
    }
    if c.pos != bytes.len() {
        return Err(c.err(c.pos, "trailing bytes after last entry"));
    }
    Ok((dim, entries))
}

pub fn write_embedding_file(entries: &BTreeMap<String, EmbeddedSequence>, dim: usize, path: &Path) -> Result<()> {
    fs::write(path, encode_embeddings(entries, dim)?)?;
    Ok(())
}

pub fn read_embedding_file(path: &Path) -> Result<(usize, BTreeMap<String, EmbeddedSequence>)> {
    decode_embeddings(&fs::read(path)?, &path.display().to_string())
}
