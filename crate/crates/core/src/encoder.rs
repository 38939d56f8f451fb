//! Lookup-table text encoder with mean pooling.
//!
//! Text is lowercased and split on whitespace. Each token id selects one row of
//! a trainable `V × d` table; those rows are the per-token context vectors and
//! the text embedding is their arithmetic mean. Queries carry a reserved
//! `<|query|>` token in front so one table can embed both sides of a retrieval
//! pair differently.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::ops::Deref;
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNK_TOKEN: &str = "<|unk|>";
pub const QUERY_PREFIX: &str = "<|query|>";

/// Default truncation length (tokens, prefix included).
pub const DEFAULT_MAX_LEN: usize = 224;
pub const DEFAULT_DIM: usize = 64;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CEMBCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Lowercased whitespace tokens of `text`.
pub fn split_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Number of whitespace tokens in `text`, without any prefix.
pub fn token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Query,
    Document,
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    unk_id: usize,
    query_prefix_id: usize,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens && self.unk_id == other.unk_id && self.query_prefix_id == other.query_prefix_id
    }
}

impl Vocabulary {
    /// Builds a vocabulary from every whitespace token seen at least
    /// `min_freq` times. Ids 0 and 1 are the unknown and query-prefix tokens;
    /// the rest follow frequency descending, then lexicographic order.
    pub fn build<S: AsRef<str>>(texts: &[S], min_freq: usize) -> Result<Self> {
        if texts.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if min_freq == 0 {
            return Err(Error::InvalidConfig("min_freq must be at least 1".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for token in split_tokens(text.as_ref()) {
                *counts.entry(token).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq && t != UNK_TOKEN && t != QUERY_PREFIX)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut tokens = Vec::with_capacity(kept.len() + 2);
        tokens.push(UNK_TOKEN.to_string());
        tokens.push(QUERY_PREFIX.to_string());
        tokens.extend(kept.into_iter().map(|(t, _)| t));
        Self::from_tokens(tokens, 0, 1)
    }

    /// Reassembles a vocabulary from its id-ordered token table.
    pub fn from_tokens(tokens: Vec<String>, unk_id: usize, query_prefix_id: usize) -> Result<Self> {
        let size = tokens.len();
        if size < 2 || unk_id >= size || query_prefix_id >= size || unk_id == query_prefix_id {
            return Err(Error::InvalidConfig(format!(
                "vocabulary of size {size} with reserved ids {unk_id}/{query_prefix_id}"
            )));
        }
        let mut index = HashMap::with_capacity(size);
        for (id, token) in tokens.iter().enumerate() {
            if index.insert(token.clone(), id).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate token {token:?}")));
            }
        }
        Ok(Self {
            tokens,
            index,
            unk_id,
            query_prefix_id,
        })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn unk_id(&self) -> usize {
        self.unk_id
    }

    pub fn query_prefix_id(&self) -> usize {
        self.query_prefix_id
    }

    /// Id of an already-lowercased token; out-of-vocabulary maps to `unk_id`.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(self.unk_id)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Writes `token<TAB>id` lines in id order.
    pub fn export_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for (id, token) in self.tokens.iter().enumerate() {
            out.push_str(token);
            out.push('\t');
            out.push_str(&id.to_string());
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Convenience alias for [`Vocabulary::build`].
pub fn build_vocab<S: AsRef<str>>(texts: &[S], min_freq: usize) -> Result<Vocabulary> {
    Vocabulary::build(texts, min_freq)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
    role: Role,
}

impl TokenSequence {
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Raw constructor; used when the ids come from somewhere other than
    /// [`tokenize`]. Range checks happen at encode time.
    pub fn from_ids(ids: Vec<usize>, role: Role) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::EmptySequence);
        }
        Ok(Self { ids, role })
    }
}

/// Maps `text` to token ids. Queries get the prefix token prepended before
/// truncation to `max_len`, so a query is never empty.
pub fn tokenize(vocab: &Vocabulary, text: &str, role: Role, max_len: usize) -> Result<TokenSequence> {
    if max_len == 0 {
        return Err(Error::InvalidConfig("max_len must be at least 1".into()));
    }
    let mut ids = Vec::new();
    if role == Role::Query {
        ids.push(vocab.query_prefix_id());
    }
    ids.extend(split_tokens(text).take(max_len - ids.len()).map(|t| vocab.id(&t)));
    if ids.is_empty() {
        return Err(Error::EmptySequence);
    }
    Ok(TokenSequence { ids, role })
}

/// A finite, fixed-length text embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidConfig(
                "embedding must have at least one dimension".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("embedding contains non-finite values".into()));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for EmbeddingVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl Deref for EmbeddingVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Sparse gradient over embedding rows, keyed by token id.
///
/// Rows are kept in id order so accumulation and iteration are deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct RowGradients {
    dim: usize,
    rows: BTreeMap<usize, Vec<f64>>,
}

impl RowGradients {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            rows: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Adds `scale * grad` to row `id`.
    pub fn add_row(&mut self, id: usize, grad: &[f64], scale: f64) {
        debug_assert_eq!(grad.len(), self.dim);
        let row = self.rows.entry(id).or_insert_with(|| vec![0.0; self.dim]);
        for (r, g) in row.iter_mut().zip(grad) {
            *r += scale * g;
        }
    }

    pub fn merge(&mut self, other: &RowGradients, scale: f64) {
        for (id, grad) in &other.rows {
            self.add_row(*id, grad, scale);
        }
    }

    pub fn row(&self, id: usize) -> Option<&[f64]> {
        self.rows.get(&id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.rows.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.rows.values().flatten().all(|v| v.is_finite())
    }
}

/// The entire trainable state: vocabulary plus a row-major `V × d` table.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    vocab: Vocabulary,
    dim: usize,
    embedding: Vec<f64>,
}

impl ModelParams {
    /// Uniform init in `[-0.5/d, 0.5/d]` from a seeded ChaCha stream.
    pub fn init(vocab: Vocabulary, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("embedding dimension must be at least 1".into()));
        }
        let bound = 0.5 / dim as f64;
        let dist = Uniform::new_inclusive(-bound, bound);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = (0..vocab.size() * dim).map(|_| dist.sample(&mut rng)).collect();
        Ok(Self { vocab, dim, embedding })
    }

    pub fn from_parts(vocab: Vocabulary, dim: usize, embedding: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("embedding dimension must be at least 1".into()));
        }
        if embedding.len() != vocab.size() * dim {
            return Err(Error::DimensionMismatch {
                expected: vocab.size() * dim,
                actual: embedding.len(),
            });
        }
        if embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(
                "embedding table contains non-finite values".into(),
            ));
        }
        Ok(Self { vocab, dim, embedding })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    pub fn row(&self, id: usize) -> &[f64] {
        &self.embedding[id * self.dim..(id + 1) * self.dim]
    }

    pub fn row_mut(&mut self, id: usize) -> &mut [f64] {
        &mut self.embedding[id * self.dim..(id + 1) * self.dim]
    }

    pub fn table(&self) -> &[f64] {
        &self.embedding
    }

    pub fn table_mut(&mut self) -> &mut [f64] {
        &mut self.embedding
    }

    fn check_ids(&self, seq: &TokenSequence) -> Result<()> {
        let vocab_size = self.vocab_size();
        match seq.ids().iter().find(|&&id| id >= vocab_size) {
            Some(&id) => Err(Error::InvalidTokenId { id, vocab_size }),
            None => Ok(()),
        }
    }

    /// Mean of the looked-up rows.
    pub fn encode(&self, seq: &TokenSequence) -> Result<EmbeddingVector> {
        self.check_ids(seq)?;
        if seq.is_empty() {
            return Err(Error::EmptySequence);
        }
        let mut out = vec![0.0; self.dim];
        for &id in seq.ids() {
            for (o, v) in out.iter_mut().zip(self.row(id)) {
                *o += v;
            }
        }
        let inv_n = 1.0 / seq.len() as f64;
        out.iter_mut().for_each(|o| *o *= inv_n);
        EmbeddingVector::new(out)
    }

    /// Gradient of [`encode`](Self::encode): every occurrence of a token adds
    /// `grad_e / n` to its row.
    pub fn encode_backward(&self, seq: &TokenSequence, grad_e: &[f64]) -> Result<RowGradients> {
        let mut grads = RowGradients::new(self.dim);
        self.accumulate_backward(seq, grad_e, 1.0, &mut grads)?;
        Ok(grads)
    }

    /// Same as [`encode_backward`](Self::encode_backward) but adds
    /// `scale * grad` into an existing buffer.
    pub fn accumulate_backward(
        &self,
        seq: &TokenSequence,
        grad_e: &[f64],
        scale: f64,
        grads: &mut RowGradients,
    ) -> Result<()> {
        self.check_ids(seq)?;
        if grad_e.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: grad_e.len(),
            });
        }
        if seq.is_empty() {
            return Err(Error::EmptySequence);
        }
        let inv_n = scale / seq.len() as f64;
        for &id in seq.ids() {
            grads.add_row(id, grad_e, inv_n);
        }
        Ok(())
    }

    /// Tokenize with `role` then encode.
    pub fn embed(&self, text: &str, role: Role, max_len: usize) -> Result<EmbeddingVector> {
        self.encode(&tokenize(&self.vocab, text, role, max_len)?)
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(48 + self.embedding.len() * 8);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [
            self.dim,
            self.vocab.size(),
            self.vocab.unk_id(),
            self.vocab.query_prefix_id(),
        ] {
            buf.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for token in self.vocab.tokens() {
            buf.extend_from_slice(&(token.len() as u32).to_le_bytes());
            buf.extend_from_slice(token.as_bytes());
        }
        for v in &self.embedding {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::CheckpointFormat("bad magic header".into()));
        }
        let version = u32::from_le_bytes(r.array()?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointFormat(format!("unsupported version {version}")));
        }
        let dim = r.usize()?;
        let size = r.usize()?;
        let unk_id = r.usize()?;
        let prefix_id = r.usize()?;
        if dim == 0 || size < 2 {
            return Err(Error::CheckpointFormat(format!("invalid shape {size}x{dim}")));
        }
        // Lengths are checked against what is actually left before allocating.
        if size.saturating_mul(dim).saturating_mul(8) > r.remaining() {
            return Err(Error::CheckpointFormat("truncated file".into()));
        }
        let mut tokens = Vec::with_capacity(size);
        for _ in 0..size {
            let len = u32::from_le_bytes(r.array()?) as usize;
            let raw = r.take(len)?;
            let token =
                std::str::from_utf8(raw).map_err(|_| Error::CheckpointFormat("token is not valid UTF-8".into()))?;
            tokens.push(token.to_string());
        }
        let embedding = (0..size * dim)
            .map(|_| r.array().map(f64::from_le_bytes))
            .collect::<Result<Vec<_>>>()?;
        if r.remaining() != 0 {
            return Err(Error::CheckpointFormat("trailing bytes".into()));
        }
        let vocab =
            Vocabulary::from_tokens(tokens, unk_id, prefix_id).map_err(|e| Error::CheckpointFormat(e.to_string()))?;
        Self::from_parts(vocab, dim, embedding).map_err(|e| Error::CheckpointFormat(e.to_string()))
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&self.to_checkpoint_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }

    /// Loads a checkpoint and rejects it unless its dimension is `dim`.
    pub fn load_checkpoint_expecting(path: impl AsRef<Path>, dim: usize) -> Result<Self> {
        let params = Self::load_checkpoint(path)?;
        if params.dim != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: params.dim,
            });
        }
        Ok(params)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::CheckpointFormat("truncated file".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(u64::from_le_bytes(self.array()?))
            .map_err(|_| Error::CheckpointFormat("size field overflows".into()))
    }
}
