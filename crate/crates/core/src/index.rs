//! Flat dense phrase index with exact maximum inner-product search.
//!
//! Every candidate span of every passage is stored as one contiguous `2d`
//! row of `f32` (`[start; end]`), so the dual-vector score reduces to a
//! single inner product. Scores accumulate in `f64`.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::corpus::{enumerate_phrase_spans, Corpus, Fingerprint, Passage, PhraseSpan};
use crate::encoder::{phrase_text, DualVec, EncoderProvider, PhraseEmbedding, ProjectionHead, QueryEmbedding};
use crate::error::{Error, Result};
use crate::scalar::{dot, Scalar};

pub const DEFAULT_K: usize = 100;
pub const DEFAULT_CUTOFF: usize = 10;

const MAGIC: &[u8; 8] = b"PHRXIDX\0";
const VERSION: u32 = 1;

/// `<q.start, p.start> + <q.end, p.end>`.
pub fn score<S: Scalar>(q: &QueryEmbedding<S>, p: &PhraseEmbedding<S>) -> Result<S> {
    if q.start.len() != p.start.len() || q.end.len() != p.end.len() || q.start.len() != q.end.len() {
        return Err(Error::Config(format!(
            "score dims differ: query {}/{}, phrase {}/{}",
            q.start.len(),
            q.end.len(),
            p.start.len(),
            p.end.len()
        )));
    }
    Ok(dot(&q.start, &p.start) + dot(&q.end, &p.end))
}

/// Inner product of an `f64` query row with an `f32` stored row.
///
/// Four interleaved accumulators, combined in a fixed order, so every caller
/// gets bit-identical scores for the same row.
#[inline]
pub fn stored_dot(q: &[f64], row: &[f32]) -> f64 {
    debug_assert_eq!(q.len(), row.len());
    let mut acc = [0.0f64; 4];
    let mut qc = q.chunks_exact(4);
    let mut rc = row.chunks_exact(4);
    for (a, b) in (&mut qc).zip(&mut rc) {
        acc[0] += a[0] * b[0] as f64;
        acc[1] += a[1] * b[1] as f64;
        acc[2] += a[2] * b[2] as f64;
        acc[3] += a[3] * b[3] as f64;
    }
    let mut tail = 0.0;
    for (a, b) in qc.remainder().iter().zip(rc.remainder()) {
        tail += a * *b as f64;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + tail
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedPhrase {
    pub span: PhraseSpan,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
    /// Position in the index.
    pub entry: usize,
}

#[derive(Debug, Clone)]
pub struct PhraseIndex {
    dim: usize,
    spans: Vec<PhraseSpan>,
    vectors: Vec<f32>,
    fingerprint: Fingerprint,
}

impl PartialEq for PhraseIndex {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.fingerprint == other.fingerprint
            && self.spans == other.spans
            && self.vectors.len() == other.vectors.len()
            && self
                .vectors
                .iter()
                .zip(&other.vectors)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl PhraseIndex {
    /// Assembles an index from already-ordered parts. Rows are `[start; end]`.
    pub fn from_parts(dim: usize, spans: Vec<PhraseSpan>, vectors: Vec<f32>, fingerprint: Fingerprint) -> Result<Self> {
        if vectors.len() != spans.len() * 2 * dim {
            return Err(Error::Validation(format!(
                "{} vector values for {} entries of dim {dim}",
                vectors.len(),
                spans.len()
            )));
        }
        let ordered = spans.windows(2).all(|w| span_key(&w[0]) < span_key(&w[1]));
        if !ordered {
            return Err(Error::Validation(
                "index entries must be strictly ordered by (passage_id, start, end)".into(),
            ));
        }
        Ok(PhraseIndex {
            dim,
            spans,
            vectors,
            fingerprint,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn fingerprint(&self) -> &Fingerprint {
        &self.fingerprint
    }

    pub fn spans(&self) -> &[PhraseSpan] {
        &self.spans
    }

    pub fn span(&self, entry: usize) -> &PhraseSpan {
        &self.spans[entry]
    }

    /// Stored `[start; end]` row.
    pub fn row(&self, entry: usize) -> &[f32] {
        let w = 2 * self.dim;
        &self.vectors[entry * w..(entry + 1) * w]
    }

    pub fn embedding<S: Scalar>(&self, entry: usize) -> PhraseEmbedding<S> {
        let row = self.row(entry);
        DualVec {
            start: row[..self.dim].iter().map(|&x| S::lit(x as f64)).collect(),
            end: row[self.dim..].iter().map(|&x| S::lit(x as f64)).collect(),
        }
    }

    pub fn find(&self, passage_id: &str, start: usize, end: usize) -> Option<usize> {
        self.spans
            .binary_search_by(|s| span_key(s).cmp(&(passage_id, start, end)))
            .ok()
    }

    /// Entry range belonging to one passage.
    pub fn passage_entries(&self, passage_id: &str) -> std::ops::Range<usize> {
        let lo = self.spans.partition_point(|s| s.passage_id.as_str() < passage_id);
        let hi = self.spans.partition_point(|s| s.passage_id.as_str() <= passage_id);
        lo..hi
    }

    fn query_row<S: Scalar>(&self, q: &QueryEmbedding<S>) -> Result<Vec<f64>> {
        if q.start.len() != self.dim || q.end.len() != self.dim {
            return Err(Error::Config(format!(
                "query dim {}/{} does not match index dim {}",
                q.start.len(),
                q.end.len(),
                self.dim
            )));
        }
        Ok(q.start.iter().chain(&q.end).map(|x| x.to_f64_lossy()).collect())
    }

    pub fn entry_score<S: Scalar>(&self, q: &QueryEmbedding<S>, entry: usize) -> Result<f64> {
        Ok(stored_dot(&self.query_row(q)?, self.row(entry)))
    }

    fn ranked(&self, picks: impl IntoIterator<Item = (f64, usize)>) -> Vec<RankedPhrase> {
        picks
            .into_iter()
            .enumerate()
            .map(|(i, (score, entry))| RankedPhrase {
                span: self.spans[entry].clone(),
                score,
                rank: i + 1,
                entry,
            })
            .collect()
    }
}

fn span_key(s: &PhraseSpan) -> (&str, usize, usize) {
    (s.passage_id.as_str(), s.start_token, s.end_token)
}

/// Scores every span of every passage with the phrase side of `head`.
/// Entries are ordered by (passage_id, start, end).
pub fn build_index<S: Scalar>(
    corpus: &Corpus,
    head: &ProjectionHead<S>,
    provider: &dyn EncoderProvider,
    max_phrase_len: usize,
) -> Result<PhraseIndex> {
    if corpus.is_empty() {
        return Err(Error::Validation("cannot index an empty corpus".into()));
    }
    if head.dim() != provider.dim() {
        return Err(Error::Config(format!(
            "projection head dim {} does not match encoder dim {}",
            head.dim(),
            provider.dim()
        )));
    }
    let dim = head.dim();
    let mut passages: Vec<_> = corpus.passages().iter().collect();
    passages.sort_by(|a, b| a.passage_id.cmp(&b.passage_id));

    let per_passage: Vec<Result<(Vec<PhraseSpan>, Vec<f32>)>> = passages
        .par_iter()
        .map(|p| encode_passage_phrases(p, head, provider, max_phrase_len))
        .collect();

    let mut spans = Vec::new();
    let mut vectors = Vec::new();
    for part in per_passage {
        let (s, v) = part?;
        spans.extend(s);
        vectors.extend(v);
    }
    PhraseIndex::from_parts(dim, spans, vectors, *corpus.fingerprint())
}

/// Spans of one passage and their stored `f32` rows, exactly as
/// [`build_index`] writes them.
pub fn encode_passage_phrases<S: Scalar>(
    p: &Passage,
    head: &ProjectionHead<S>,
    provider: &dyn EncoderProvider,
    max_phrase_len: usize,
) -> Result<(Vec<PhraseSpan>, Vec<f32>)> {
    let dim = head.dim();
    let spans = enumerate_phrase_spans(p, max_phrase_len)?;
    let texts: Vec<String> = spans
        .iter()
        .map(|s| phrase_text(p, s.start_token, s.end_token))
        .collect();
    let bases = provider.encode_batch(&texts).map_err(|e| match e {
        Error::Transport { message, .. } => Error::Transport {
            context: format!("passage {}", p.passage_id),
            message,
        },
        other => Error::Validation(format!("encoding passage {}: {other}", p.passage_id)),
    })?;
    if bases.len() != spans.len() {
        return Err(Error::Protocol(format!(
            "passage {}: {} embeddings for {} spans",
            p.passage_id,
            bases.len(),
            spans.len()
        )));
    }
    let mut rows = Vec::with_capacity(spans.len() * 2 * dim);
    for base in bases {
        if base.dim() != dim {
            return Err(Error::Config(format!(
                "passage {}: base dim {} does not match head dim {dim}",
                p.passage_id,
                base.dim()
            )));
        }
        let e = head.project_phrase(&base.cast::<S>());
        if !e.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite phrase embedding in {}",
                p.passage_id
            )));
        }
        rows.extend(e.start.iter().chain(&e.end).map(|x| x.to_f32().unwrap_or(f32::NAN)));
    }
    Ok((spans, rows))
}

#[derive(Clone, Copy)]
struct Candidate {
    score: f64,
    entry: usize,
}

// Greater means worse: lower score, then later entry.
impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        other.score.total_cmp(&self.score).then(self.entry.cmp(&other.entry))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    Ok(())
}

/// The `k` best entries by score; ties go to the earlier entry.
pub fn search_topk<S: Scalar>(index: &PhraseIndex, q: &QueryEmbedding<S>, k: usize) -> Result<Vec<RankedPhrase>> {
    check_k(k)?;
    let qrow = index.query_row(q)?;
    let k = k.min(index.len());
    let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
    for entry in 0..index.len() {
        let c = Candidate {
            score: stored_dot(&qrow, index.row(entry)),
            entry,
        };
        if heap.len() < k {
            heap.push(c);
        } else if let Some(mut worst) = heap.peek_mut() {
            if c < *worst {
                *worst = c;
            }
        }
    }
    let best = heap.into_sorted_vec();
    Ok(index.ranked(best.into_iter().map(|c| (c.score, c.entry))))
}

/// Full scan plus stable sort. Reference for [`search_topk`].
pub fn brute_force_oracle<S: Scalar>(
    index: &PhraseIndex,
    q: &QueryEmbedding<S>,
    k: usize,
) -> Result<Vec<RankedPhrase>> {
    check_k(k)?;
    let qrow = index.query_row(q)?;
    let mut all: Vec<(f64, usize)> = (0..index.len()).map(|e| (stored_dot(&qrow, index.row(e)), e)).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    all.truncate(k);
    Ok(index.ranked(all))
}

/// Passage ids in order of each passage's best-ranked phrase, first `cutoff`.
pub fn passages_from_phrases(ranked: &[RankedPhrase], cutoff: usize) -> Result<Vec<String>> {
    if cutoff == 0 {
        return Err(Error::Config("cutoff must be at least 1".into()));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let mut sorted: Vec<&RankedPhrase> = ranked.iter().collect();
    sorted.sort_by_key(|r| r.rank);
    for r in sorted {
        if out.len() == cutoff {
            break;
        }
        if seen.insert(r.span.passage_id.as_str()) {
            out.push(r.span.passage_id.clone());
        }
    }
    Ok(out)
}

/// Serializes the index.
///
/// Layout, little-endian: magic `PHRXIDX\0`, version `u32`, dim `u32`, entry
/// count `u64`, 32-byte corpus fingerprint; then per entry a `u32`-length
/// prefixed passage id, start `u32`, end `u32`, and `2 * dim` `f32` values.
pub fn index_bytes(index: &PhraseIndex) -> Vec<u8> {
    let mut buf = Vec::with_capacity(56 + index.vectors.len() * 4 + index.len() * 24);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(index.dim as u32).to_le_bytes());
    buf.extend_from_slice(&(index.len() as u64).to_le_bytes());
    buf.extend_from_slice(&index.fingerprint);
    for (i, s) in index.spans.iter().enumerate() {
        buf.extend_from_slice(&(s.passage_id.len() as u32).to_le_bytes());
        buf.extend_from_slice(s.passage_id.as_bytes());
        buf.extend_from_slice(&(s.start_token as u32).to_le_bytes());
        buf.extend_from_slice(&(s.end_token as u32).to_le_bytes());
        for x in index.row(i) {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    buf
}

pub fn save_index(index: &PhraseIndex, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&index_bytes(index)).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {} (needed {n} more)", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses an index and checks it against `corpus`. Surfaces are restored
/// from the corpus text.
pub fn parse_index(bytes: &[u8], corpus: &Corpus) -> Result<PhraseIndex> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(MAGIC.len())? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dim = c.u32()? as usize;
    if dim == 0 {
        return Err(Error::Format("dim is zero".into()));
    }
    let count = c.u64()? as usize;
    let mut fingerprint = [0u8; 32];
    fingerprint.copy_from_slice(c.take(32)?);
    if &fingerprint != corpus.fingerprint() {
        return Err(Error::Format("corpus fingerprint mismatch".into()));
    }
    let row_bytes = 2 * dim * 4;
    // each entry needs at least 12 header bytes plus its row
    if count.saturating_mul(12 + row_bytes) > bytes.len() {
        return Err(Error::Format(format!("truncated: {count} entries declared")));
    }
    let mut spans = Vec::with_capacity(count);
    let mut vectors = Vec::with_capacity(count * 2 * dim);
    for _ in 0..count {
        let len = c.u32()? as usize;
        let id = std::str::from_utf8(c.take(len)?).map_err(|_| Error::Format("passage id is not UTF-8".into()))?;
        let start = c.u32()? as usize;
        let end = c.u32()? as usize;
        let passage = corpus
            .get(id)
            .ok_or_else(|| Error::Format(format!("passage {id} not in corpus")))?;
        if start > end || end >= passage.len() {
            return Err(Error::Format(format!("span {start}..={end} outside passage {id}")));
        }
        spans.push(PhraseSpan::from_passage(passage, start, end));
        for chunk in c.take(row_bytes)?.chunks_exact(4) {
            vectors.push(f32::from_le_bytes(chunk.try_into().expect("4 bytes")));
        }
    }
    if c.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    PhraseIndex::from_parts(dim, spans, vectors, fingerprint).map_err(|e| Error::Format(e.to_string()))
}

pub fn load_index(path: impl AsRef<Path>, corpus: &Corpus) -> Result<PhraseIndex> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(format!("index not found: {}", path.display()))
        } else {
            Error::io(path, e)
        }
    })?;
    parse_index(&bytes, corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Passage;
    use crate::encoder::{encode_phrase, Featurizer};

    fn corpus(texts: &[(&str, &str)]) -> Corpus {
        Corpus::from_passages(texts.iter().map(|(id, t)| Passage::new(*id, "", *t)).collect()).unwrap()
    }

    fn dv(start: Vec<f64>, end: Vec<f64>) -> DualVec<f64> {
        DualVec { start, end }
    }

    #[test]
    fn score_examples() {
        let q = dv(vec![1.0, 0.0], vec![1.0, 0.0]);
        assert_eq!(score(&q, &q.clone()).unwrap(), 2.0);
        let z = dv(vec![0.0, 0.0], vec![0.0, 0.0]);
        assert_eq!(score(&dv(vec![3.0, -1.0], vec![0.5, 9.0]), &z).unwrap(), 0.0);
        assert!(matches!(score(&q, &dv(vec![1.0], vec![1.0])), Err(Error::Config(_))));
    }

    #[test]
    fn three_token_passage_gives_five_entries() {
        let c = corpus(&[("p", "x y z")]);
        let f = Featurizer::new(8, 0).unwrap();
        let idx = build_index(&c, &ProjectionHead::<f64>::identity(8), &f, 2).unwrap();
        assert_eq!(idx.len(), 5);
        let c = corpus(&[("p", "x y z"), ("q", "")]);
        assert_eq!(
            build_index(&c, &ProjectionHead::<f64>::identity(8), &f, 2)
                .unwrap()
                .len(),
            5
        );
    }

    #[test]
    fn entries_sorted_by_passage_id() {
        let c = corpus(&[("p2", "b"), ("p10", "a"), ("p1", "c")]);
        let f = Featurizer::new(4, 0).unwrap();
        let idx = build_index(&c, &ProjectionHead::<f64>::identity(4), &f, 3).unwrap();
        let ids: Vec<_> = idx.spans().iter().map(|s| s.passage_id.as_str()).collect();
        assert_eq!(ids, ["p1", "p10", "p2"]);
        assert_eq!(idx.find("p10", 0, 0), Some(1));
        assert_eq!(idx.passage_entries("p2"), 2..3);
    }

    #[test]
    fn empty_corpus_rejected() {
        let c = Corpus::from_passages(vec![]).unwrap();
        let f = Featurizer::new(4, 0).unwrap();
        assert!(build_index(&c, &ProjectionHead::<f64>::identity(4), &f, 3).is_err());
    }

    #[test]
    fn self_match_ranks_first() {
        let c = corpus(&[("p", "alpha beta gamma delta"), ("q", "epsilon zeta eta")]);
        let f = Featurizer::new(64, 0).unwrap();
        let head = ProjectionHead::<f64>::identity(64);
        let idx = build_index(&c, &head, &f, 3).unwrap();
        let p = c.get("q").unwrap();
        let span = PhraseSpan::from_passage(p, 1, 2);
        let q = encode_phrase(&span, p, &head, &f).unwrap();
        let top = search_topk(&idx, &q, 1).unwrap();
        assert_eq!(top[0].span, span);
        assert_eq!(top[0].rank, 1);
    }

    #[test]
    fn zero_query_returns_index_order() {
        let c = corpus(&[("p", "a b c d")]);
        let f = Featurizer::new(8, 0).unwrap();
        let idx = build_index(&c, &ProjectionHead::<f64>::identity(8), &f, 4).unwrap();
        let top = search_topk(&idx, &DualVec::<f64>::zeros(8), 3).unwrap();
        assert_eq!(top.iter().map(|r| r.entry).collect::<Vec<_>>(), [0, 1, 2]);
        assert!(top.iter().all(|r| r.score == 0.0));
    }

    #[test]
    fn k_zero_and_oversized_k() {
        let c = corpus(&[("p", "a b")]);
        let f = Featurizer::new(8, 0).unwrap();
        let idx = build_index(&c, &ProjectionHead::<f64>::identity(8), &f, 2).unwrap();
        let q = DualVec::<f64>::zeros(8);
        assert!(search_topk(&idx, &q, 0).is_err());
        assert!(brute_force_oracle(&idx, &q, 0).is_err());
        assert_eq!(brute_force_oracle(&idx, &q, 50).unwrap().len(), 3);
        assert_eq!(
            search_topk(&idx, &q, 50).unwrap(),
            brute_force_oracle(&idx, &q, 50).unwrap()
        );
    }

    fn ranked(ids: &[&str]) -> Vec<RankedPhrase> {
        ids.iter()
            .enumerate()
            .map(|(i, id)| RankedPhrase {
                span: PhraseSpan {
                    passage_id: id.to_string(),
                    start_token: i,
                    end_token: i,
                    surface: String::new(),
                },
                score: -(i as f64),
                rank: i + 1,
                entry: i,
            })
            .collect()
    }

    #[test]
    fn passage_dedup() {
        assert_eq!(
            passages_from_phrases(&ranked(&["p1", "p1", "p2"]), 10).unwrap(),
            ["p1", "p2"]
        );
        assert_eq!(passages_from_phrases(&ranked(&["p", "p", "p"]), 10).unwrap(), ["p"]);
        assert_eq!(passages_from_phrases(&ranked(&["p3", "p1", "p2"]), 1).unwrap(), ["p3"]);
        assert!(passages_from_phrases(&ranked(&["p"]), 0).is_err());
    }

    #[test]
    fn persistence_round_trip_and_failures() {
        let c = corpus(&[("p", "a b c"), ("q", "d e")]);
        let f = Featurizer::new(6, 1).unwrap();
        let idx = build_index(&c, &ProjectionHead::<f64>::identity(6), &f, 2).unwrap();
        assert_eq!(idx.len(), 5 + 3);
        let bytes = index_bytes(&idx);
        assert_eq!(parse_index(&bytes, &c).unwrap(), idx);

        for cut in [0, 10, 40, bytes.len() - 1] {
            assert!(
                matches!(parse_index(&bytes[..cut], &c), Err(Error::Format(_))),
                "cut {cut}"
            );
        }
        let other = corpus(&[("p", "a b c"), ("q", "d f")]);
        let err = parse_index(&bytes, &other).unwrap_err();
        assert!(err.to_string().contains("fingerprint"), "{err}");

        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(parse_index(&bad, &c), Err(Error::Format(_))));
    }
}
