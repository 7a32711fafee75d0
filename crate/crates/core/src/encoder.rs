//! Dual start/end representations for conversational contexts and phrases.
//!
//! Base features come from an [`EncoderProvider`]: either the built-in
//! [`Featurizer`] (a seeded hashed bag of tokens) or a remote embedding
//! service. Base features are frozen; the trainable part is the
//! [`ProjectionHead`], four square matrices applied locally.

use rayon::prelude::*;

use crate::corpus::{ConvContext, Passage, PhraseSpan, SEP};
use crate::error::{Error, Result};
use crate::scalar::{cast_vec, dot, normalize_in_place, Scalar};

/// Tokens on each side of a phrase that contribute to its base features.
pub const PHRASE_WINDOW: usize = 10;

pub const DEFAULT_DIM: usize = 64;

/// Leading/trailing tokens that get a position-specific hash.
const BOUNDARY_TOKENS: usize = 4;
/// Leading/trailing tokens mixed in with geometrically decaying weight.
const RUN_TOKENS: usize = 16;
const RUN_DECAY: f64 = 0.8;
const RUN_WEIGHT: f64 = 0.5;

/// A start vector and an end vector of equal dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct DualVec<S> {
    pub start: Vec<S>,
    pub end: Vec<S>,
}

pub type BaseEmbedding<S> = DualVec<S>;
pub type QueryEmbedding<S> = DualVec<S>;
pub type PhraseEmbedding<S> = DualVec<S>;

impl<S: Scalar> DualVec<S> {
    pub fn zeros(dim: usize) -> Self {
        DualVec {
            start: vec![S::zero(); dim],
            end: vec![S::zero(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.start.len()
    }

    pub fn cast<T: Scalar>(&self) -> DualVec<T> {
        DualVec {
            start: cast_vec(&self.start),
            end: cast_vec(&self.end),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.start.iter().chain(&self.end).all(|x| x.is_finite())
    }

    /// `[start; end]`, the layout the phrase index stores.
    pub fn concat(&self) -> Vec<S> {
        let mut v = Vec::with_capacity(2 * self.dim());
        v.extend_from_slice(&self.start);
        v.extend_from_slice(&self.end);
        v
    }
}

/// Square row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<S> {
    dim: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(dim: usize) -> Self {
        Matrix {
            dim,
            data: vec![S::zero(); dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.data[i * dim + i] = S::one();
        }
        m
    }

    pub fn from_rows(dim: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != dim * dim {
            return Err(Error::Config(format!(
                "matrix data has {} entries, expected {}",
                data.len(),
                dim * dim
            )));
        }
        Ok(Matrix { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> S {
        self.data[row * self.dim + col]
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[S] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    pub fn matvec(&self, x: &[S]) -> Vec<S> {
        debug_assert_eq!(x.len(), self.dim);
        (0..self.dim).map(|r| dot(self.row(r), x)).collect()
    }

    /// `self^T y`.
    pub fn matvec_transposed(&self, y: &[S]) -> Vec<S> {
        let mut out = vec![S::zero(); self.dim];
        for (r, &yr) in y.iter().enumerate() {
            if yr == S::zero() {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += w * yr;
            }
        }
        out
    }

    /// `self += alpha * a b^T`.
    pub fn add_outer(&mut self, alpha: S, a: &[S], b: &[S]) {
        for (r, &ar) in a.iter().enumerate() {
            let s = alpha * ar;
            if s == S::zero() {
                continue;
            }
            let row = &mut self.data[r * self.dim..(r + 1) * self.dim];
            for (w, &bc) in row.iter_mut().zip(b) {
                *w += s * bc;
            }
        }
    }

    pub fn scale(&mut self, alpha: S) {
        for x in &mut self.data {
            *x *= alpha;
        }
    }

    /// `self -= alpha * other`.
    pub fn sub_scaled(&mut self, alpha: S, other: &Matrix<S>) {
        for (x, &y) in self.data.iter_mut().zip(&other.data) {
            *x -= alpha * y;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Which of the four projection matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadRole {
    QueryStart,
    QueryEnd,
    PhraseStart,
    PhraseEnd,
}

impl HeadRole {
    pub const ALL: [HeadRole; 4] = [
        HeadRole::QueryStart,
        HeadRole::QueryEnd,
        HeadRole::PhraseStart,
        HeadRole::PhraseEnd,
    ];

    pub fn is_query(self) -> bool {
        matches!(self, HeadRole::QueryStart | HeadRole::QueryEnd)
    }
}

/// Trainable linear maps over frozen base embeddings, one per side and
/// endpoint. Gradients share this shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead<S> {
    pub query_start: Matrix<S>,
    pub query_end: Matrix<S>,
    pub phrase_start: Matrix<S>,
    pub phrase_end: Matrix<S>,
}

impl<S: Scalar> ProjectionHead<S> {
    pub fn identity(dim: usize) -> Self {
        ProjectionHead {
            query_start: Matrix::identity(dim),
            query_end: Matrix::identity(dim),
            phrase_start: Matrix::identity(dim),
            phrase_end: Matrix::identity(dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        ProjectionHead {
            query_start: Matrix::zeros(dim),
            query_end: Matrix::zeros(dim),
            phrase_start: Matrix::zeros(dim),
            phrase_end: Matrix::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.query_start.dim()
    }

    pub fn matrix(&self, role: HeadRole) -> &Matrix<S> {
        match role {
            HeadRole::QueryStart => &self.query_start,
            HeadRole::QueryEnd => &self.query_end,
            HeadRole::PhraseStart => &self.phrase_start,
            HeadRole::PhraseEnd => &self.phrase_end,
        }
    }

    pub fn matrix_mut(&mut self, role: HeadRole) -> &mut Matrix<S> {
        match role {
            HeadRole::QueryStart => &mut self.query_start,
            HeadRole::QueryEnd => &mut self.query_end,
            HeadRole::PhraseStart => &mut self.phrase_start,
            HeadRole::PhraseEnd => &mut self.phrase_end,
        }
    }

    pub fn scaled(mut self, alpha: S) -> Self {
        for role in HeadRole::ALL {
            self.matrix_mut(role).scale(alpha);
        }
        self
    }

    pub fn project_query(&self, base: &BaseEmbedding<S>) -> QueryEmbedding<S> {
        DualVec {
            start: self.query_start.matvec(&base.start),
            end: self.query_end.matvec(&base.end),
        }
    }

    pub fn project_phrase(&self, base: &BaseEmbedding<S>) -> PhraseEmbedding<S> {
        DualVec {
            start: self.phrase_start.matvec(&base.start),
            end: self.phrase_end.matvec(&base.end),
        }
    }

    /// Frobenius norm over all four matrices.
    pub fn norm(&self) -> S {
        HeadRole::ALL
            .iter()
            .flat_map(|&r| self.matrix(r).as_slice().iter())
            .map(|&x| x * x)
            .sum::<S>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        HeadRole::ALL.iter().all(|&r| self.matrix(r).is_finite())
    }

    pub fn cast<T: Scalar>(&self) -> ProjectionHead<T> {
        let m = |m: &Matrix<S>| Matrix {
            dim: m.dim,
            data: cast_vec(&m.data),
        };
        ProjectionHead {
            query_start: m(&self.query_start),
            query_end: m(&self.query_end),
            phrase_start: m(&self.phrase_start),
            phrase_end: m(&self.phrase_end),
        }
    }
}

const HEAD_MAGIC: &[u8; 8] = b"PFHEAD\0\0";
const HEAD_VERSION: u32 = 1;

/// Binary head file: magic, version and dim as little-endian `u32`, then
/// the four matrices row-major as little-endian `f64` in [`HeadRole::ALL`]
/// order.
pub fn head_bytes(head: &ProjectionHead<f64>) -> Vec<u8> {
    let d = head.dim();
    let mut out = Vec::with_capacity(16 + 32 * d * d);
    out.extend_from_slice(HEAD_MAGIC);
    out.extend_from_slice(&HEAD_VERSION.to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for role in HeadRole::ALL {
        for x in head.matrix(role).as_slice() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn parse_head(bytes: &[u8]) -> Result<ProjectionHead<f64>> {
    if bytes.len() < 16 || &bytes[..8] != HEAD_MAGIC {
        return Err(Error::Format("not a head file".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    if word(8) != HEAD_VERSION {
        return Err(Error::Format(format!("unsupported head version {}", word(8))));
    }
    let d = word(12) as usize;
    if d < 2 || bytes.len() != 16 + 32 * d * d {
        return Err(Error::Format(format!(
            "head file of {} bytes does not fit dim {d}",
            bytes.len()
        )));
    }
    let mut head = ProjectionHead::zeros(d);
    let mut chunks = bytes[16..].chunks_exact(8);
    for role in HeadRole::ALL {
        for x in head.matrix_mut(role).as_mut_slice() {
            *x = f64::from_le_bytes(chunks.next().expect("length checked").try_into().expect("8 bytes"));
        }
    }
    Ok(head)
}

pub fn save_head(head: &ProjectionHead<f64>, path: impl AsRef<std::path::Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, head_bytes(head)).map_err(|e| Error::io(path, e))
}

pub fn load_head(path: impl AsRef<std::path::Path>) -> Result<ProjectionHead<f64>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(format!("head not found: {}", path.display()))
        } else {
            Error::io(path, e)
        }
    })?;
    parse_head(&bytes)
}

/// Source of frozen base embeddings.
pub trait EncoderProvider: Send + Sync {
    fn dim(&self) -> usize;

    /// One embedding per text, in order.
    fn encode_batch(&self, texts: &[String]) -> Result<Vec<BaseEmbedding<f64>>>;

    fn encode_text(&self, text: &str) -> Result<BaseEmbedding<f64>> {
        let mut v = self.encode_batch(&[text.to_string()])?;
        v.pop()
            .ok_or_else(|| Error::Protocol("provider returned no embedding".into()))
    }
}

/// Built-in deterministic featurizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Featurizer {
    dim: usize,
    seed: u64,
}

impl Featurizer {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Config(format!("dim must be at least 2, got {dim}")));
        }
        Ok(Featurizer { dim, seed })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl EncoderProvider for Featurizer {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_batch(&self, texts: &[String]) -> Result<Vec<BaseEmbedding<f64>>> {
        Ok(texts
            .par_iter()
            .map(|t| featurize_unchecked(t, self.dim, self.seed))
            .collect())
    }

    fn encode_text(&self, text: &str) -> Result<BaseEmbedding<f64>> {
        Ok(featurize_unchecked(text, self.dim, self.seed))
    }
}

const SALT_BAG: u8 = 0;
const SALT_START_RUN: u8 = 1;
const SALT_END_RUN: u8 = 2;
const SALT_START: u8 = 16;
const SALT_END: u8 = 32;

fn token_hash(token: &str, seed: u64, salt: u8) -> u64 {
    // FNV-1a over (salt, seed, lowercase token), then a splitmix64 finalizer.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |b: u8| {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    };
    eat(salt);
    for b in seed.to_le_bytes() {
        eat(b);
    }
    for ch in token.chars().flat_map(char::to_lowercase) {
        let mut buf = [0u8; 4];
        for &b in ch.encode_utf8(&mut buf).as_bytes() {
            eat(b);
        }
    }
    let mut z = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[inline]
fn hashed_add<S: Scalar>(v: &mut [S], token: &str, seed: u64, salt: u8, weight: S) {
    let h = token_hash(token, seed, salt);
    let bucket = (h % v.len() as u64) as usize;
    let sign = if (h >> 40) & 1 == 1 { -S::one() } else { S::one() };
    v[bucket] += sign * weight;
}

/// Unnormalized signed bag-of-tokens vector shared by both endpoints.
pub fn bag_features<S: Scalar>(text: &str, dim: usize, seed: u64) -> Vec<S> {
    let mut bag = vec![S::zero(); dim];
    for tok in text.split_whitespace() {
        hashed_add(&mut bag, tok, seed, SALT_BAG, S::one());
    }
    bag
}

/// Deterministic hashed embedding of `text`.
///
/// Each token is hashed with `seed` into a signed bucket of `[0, dim)`. The
/// order-free bag is scaled to unit length. The start vector then adds the
/// leading tokens twice over: the first few under position-specific hashes
/// (weights 1, 1/2, 1/3, ...) and a longer run under one hash with weights
/// decaying from 1/2 by a constant factor. The end vector does the same
/// from the last token backwards. Each vector is finally L2-normalized;
/// empty text yields zeros.
pub fn featurize<S: Scalar>(text: &str, dim: usize, seed: u64) -> Result<BaseEmbedding<S>> {
    if dim < 2 {
        return Err(Error::Config(format!("dim must be at least 2, got {dim}")));
    }
    Ok(featurize_unchecked(text, dim, seed))
}

fn mix_positions<'a, S: Scalar>(
    v: &mut [S],
    tokens: impl Iterator<Item = &'a &'a str>,
    seed: u64,
    salt: u8,
    run_salt: u8,
) {
    let mut run_weight = RUN_WEIGHT;
    for (j, tok) in tokens.take(RUN_TOKENS).enumerate() {
        if j < BOUNDARY_TOKENS {
            hashed_add(v, tok, seed, salt + j as u8, S::lit(1.0 / (j + 1) as f64));
        }
        hashed_add(v, tok, seed, run_salt, S::lit(run_weight));
        run_weight *= RUN_DECAY;
    }
}

fn featurize_unchecked<S: Scalar>(text: &str, dim: usize, seed: u64) -> BaseEmbedding<S> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let mut bag = bag_features::<S>(text, dim, seed);
    normalize_in_place(&mut bag);

    let mut start = bag.clone();
    let mut end = bag;
    mix_positions(&mut start, tokens.iter(), seed, SALT_START, SALT_START_RUN);
    mix_positions(&mut end, tokens.iter().rev(), seed, SALT_END, SALT_END_RUN);
    normalize_in_place(&mut start);
    normalize_in_place(&mut end);
    DualVec { start, end }
}

/// Text whose base features represent the span `start..=end` of `passage`.
///
/// Layout: `surface [SEP] left [SEP] right [SEP] surface`, with both context
/// windows listed nearest token first. The start vector's leading features
/// therefore see the span's first tokens followed by its left neighbours,
/// and the end vector's trailing features its last tokens followed by its
/// right neighbours.
pub fn phrase_text(passage: &Passage, start: usize, end: usize) -> String {
    let surface = passage.surface(start, end);
    let toks = passage.token_texts();
    let left = &toks[start.saturating_sub(PHRASE_WINDOW)..start];
    let right = &toks[(end + 1).min(toks.len())..(end + 1 + PHRASE_WINDOW).min(toks.len())];
    let mut s = String::with_capacity(2 * surface.len() + 24 * PHRASE_WINDOW);
    s.push_str(surface);
    s.push_str(SEP);
    push_joined(&mut s, left.iter().rev());
    s.push_str(SEP);
    // read backwards from the end of the text, the right window runs outward
    push_joined(&mut s, right.iter().rev());
    s.push_str(SEP);
    s.push_str(surface);
    s
}

fn push_joined<'a>(s: &mut String, tokens: impl Iterator<Item = &'a &'a str>) {
    for (i, t) in tokens.enumerate() {
        if i > 0 {
            s.push(' ');
        }
        s.push_str(t);
    }
}

fn check_dims<S: Scalar>(head: &ProjectionHead<S>, provider: &dyn EncoderProvider) -> Result<()> {
    if head.dim() != provider.dim() {
        return Err(Error::Config(format!(
            "projection head dim {} does not match encoder dim {}",
            head.dim(),
            provider.dim()
        )));
    }
    Ok(())
}

fn check_base<T: Scalar>(base: &BaseEmbedding<T>, dim: usize) -> Result<()> {
    if base.start.len() != dim || base.end.len() != dim {
        return Err(Error::Config(format!(
            "base embedding dim {} does not match head dim {dim}",
            base.start.len()
        )));
    }
    Ok(())
}

fn with_context(err: Error, what: String) -> Error {
    match err {
        Error::Transport { message, .. } => Error::Transport { context: what, message },
        other => other,
    }
}

pub fn context_label(ctx: &ConvContext) -> String {
    format!("context {}#{}", ctx.conversation_id, ctx.turn_index)
}

pub fn encode_context_base<S: Scalar>(ctx: &ConvContext, provider: &dyn EncoderProvider) -> Result<BaseEmbedding<S>> {
    let base = provider
        .encode_text(&ctx.serialized_text)
        .map_err(|e| with_context(e, context_label(ctx)))?;
    check_base(&base, provider.dim())?;
    Ok(base.cast())
}

pub fn encode_context<S: Scalar>(
    ctx: &ConvContext,
    head: &ProjectionHead<S>,
    provider: &dyn EncoderProvider,
) -> Result<QueryEmbedding<S>> {
    check_dims(head, provider)?;
    let base = encode_context_base(ctx, provider)?;
    Ok(head.project_query(&base))
}

pub fn encode_phrase_base<S: Scalar>(
    span: &PhraseSpan,
    passage: &Passage,
    provider: &dyn EncoderProvider,
) -> Result<BaseEmbedding<S>> {
    if span.end_token >= passage.len() || span.start_token > span.end_token {
        return Err(Error::Validation(format!(
            "span {}..={} outside passage {}",
            span.start_token, span.end_token, passage.passage_id
        )));
    }
    let text = phrase_text(passage, span.start_token, span.end_token);
    let base = provider
        .encode_text(&text)
        .map_err(|e| with_context(e, format!("passage {}", passage.passage_id)))?;
    check_base(&base, provider.dim())?;
    Ok(base.cast())
}

pub fn encode_phrase<S: Scalar>(
    span: &PhraseSpan,
    passage: &Passage,
    head: &ProjectionHead<S>,
    provider: &dyn EncoderProvider,
) -> Result<PhraseEmbedding<S>> {
    check_dims(head, provider)?;
    let base = encode_phrase_base(span, passage, provider)?;
    Ok(head.project_phrase(&base))
}
