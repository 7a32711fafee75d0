//! Two-stage retriever-reader baseline.
//!
//! The retriever ranks whole passages (BM25 or a dense passage vector); the
//! reader then scores every span of the top-K passages with the same phrase
//! scorer the single-stage system uses, encoding those spans on the fly. An
//! answer can only come from a retrieved passage.

use std::collections::BTreeMap;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{ConvContext, Corpus, PhraseSpan};
use crate::encoder::{encode_context, DualVec, EncoderProvider, ProjectionHead, QueryEmbedding};
use crate::error::{Error, Result};
use crate::index::{encode_passage_phrases, stored_dot, PhraseIndex};
use crate::scalar::dot;

pub const BM25_K1: f64 = 0.9;
pub const BM25_B: f64 = 0.4;
pub const DEFAULT_TOPK_PASSAGES: usize = 5;

/// Lowercased whitespace tokens with ASCII punctuation removed.
pub fn bm25_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| {
            t.chars()
                .filter(|c| !c.is_ascii_punctuation())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

#[derive(Debug, Clone)]
pub struct Bm25Index {
    /// term -> (document, term frequency), documents ascending.
    postings: BTreeMap<String, Vec<(usize, u32)>>,
    doc_ids: Vec<String>,
    doc_len: Vec<usize>,
    avg_len: f64,
    pub k1: f64,
    pub b: f64,
}

impl Bm25Index {
    pub fn build(corpus: &Corpus) -> Result<Self> {
        Self::with_params(corpus, BM25_K1, BM25_B)
    }

    pub fn with_params(corpus: &Corpus, k1: f64, b: f64) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Validation("cannot index an empty corpus".into()));
        }
        let mut postings: BTreeMap<String, Vec<(usize, u32)>> = BTreeMap::new();
        let mut doc_ids = Vec::with_capacity(corpus.len());
        let mut doc_len = Vec::with_capacity(corpus.len());
        for (d, p) in corpus.passages().iter().enumerate() {
            let toks = bm25_tokens(&p.text);
            let mut tf: BTreeMap<&str, u32> = BTreeMap::new();
            for t in &toks {
                *tf.entry(t).or_default() += 1;
            }
            for (t, n) in tf {
                postings.entry(t.to_string()).or_default().push((d, n));
            }
            doc_ids.push(p.passage_id.clone());
            doc_len.push(toks.len());
        }
        let avg_len = doc_len.iter().sum::<usize>() as f64 / doc_len.len() as f64;
        if avg_len <= 0.0 {
            return Err(Error::Validation("corpus has no tokens".into()));
        }
        Ok(Bm25Index {
            postings,
            doc_ids,
            doc_len,
            avg_len,
            k1,
            b,
        })
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn vocabulary(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.len() as f64;
        let df = self.postings.get(term).map_or(0, Vec::len) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_weight(&self, idf: f64, tf: u32, doc: usize) -> f64 {
        let tf = tf as f64;
        let norm = 1.0 - self.b + self.b * self.doc_len[doc] as f64 / self.avg_len;
        idf * tf * (self.k1 + 1.0) / (tf + self.k1 * norm)
    }

    fn score_all(&self, query: &[String]) -> Vec<f64> {
        let mut scores = vec![0.0; self.len()];
        for t in query {
            let Some(list) = self.postings.get(t) else { continue };
            let idf = self.idf(t);
            for &(d, tf) in list {
                scores[d] += self.term_weight(idf, tf, d);
            }
        }
        scores
    }

    /// Top `k` passage ids with scores; ties go to the smaller passage id.
    pub fn search(&self, query: &[String], k: usize) -> Vec<(String, f64)> {
        let scores = self.score_all(query);
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .total_cmp(&scores[a])
                .then_with(|| self.doc_ids[a].cmp(&self.doc_ids[b]))
        });
        order
            .into_iter()
            .take(k)
            .map(|d| (self.doc_ids[d].clone(), scores[d]))
            .collect()
    }
}

/// BM25 score of one passage; terms absent from it contribute nothing.
pub fn bm25_score(query: &[String], passage_id: &str, index: &Bm25Index) -> f64 {
    let Some(doc) = index.doc_ids.iter().position(|d| d == passage_id) else {
        return 0.0;
    };
    query
        .iter()
        .filter_map(|t| {
            let list = index.postings.get(t)?;
            let &(_, tf) = list.iter().find(|(d, _)| *d == doc)?;
            Some(index.term_weight(index.idf(t), tf, doc))
        })
        .sum()
}

/// One vector per passage: the mean of its phrase start vectors and the mean
/// of its phrase end vectors.
#[derive(Debug, Clone)]
pub struct DensePassageIndex {
    ids: Vec<String>,
    vectors: Vec<DualVec<f64>>,
}

impl DensePassageIndex {
    pub fn from_phrase_index(index: &PhraseIndex) -> Self {
        let d = index.dim();
        let mut ids: Vec<String> = Vec::new();
        let mut vectors = Vec::new();
        let mut entry = 0;
        while entry < index.len() {
            let id = index.span(entry).passage_id.clone();
            let range = index.passage_entries(&id);
            let mut v = DualVec::<f64>::zeros(d);
            for e in range.clone() {
                let row = index.row(e);
                for i in 0..d {
                    v.start[i] += row[i] as f64;
                    v.end[i] += row[d + i] as f64;
                }
            }
            let n = range.len() as f64;
            v.start.iter_mut().chain(v.end.iter_mut()).for_each(|x| *x /= n);
            entry = range.end;
            ids.push(id);
            vectors.push(v);
        }
        DensePassageIndex { ids, vectors }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn search(&self, q: &QueryEmbedding<f64>, k: usize) -> Vec<(String, f64)> {
        let scores: Vec<f64> = self
            .vectors
            .iter()
            .map(|v| dot(&q.start, &v.start) + dot(&q.end, &v.end))
            .collect();
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .total_cmp(&scores[a])
                .then_with(|| self.ids[a].cmp(&self.ids[b]))
        });
        order
            .into_iter()
            .take(k)
            .map(|i| (self.ids[i].clone(), scores[i]))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrieverKind {
    Bm25,
    Dense,
}

impl FromStr for RetrieverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bm25" => Ok(RetrieverKind::Bm25),
            "dense" => Ok(RetrieverKind::Dense),
            other => Err(Error::Config(format!(
                "unknown retriever {other:?}, expected bm25 or dense"
            ))),
        }
    }
}

impl std::fmt::Display for RetrieverKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RetrieverKind::Bm25 => "bm25",
            RetrieverKind::Dense => "dense",
        })
    }
}

#[derive(Debug, Clone)]
pub enum Retriever {
    Bm25(Bm25Index),
    Dense(DensePassageIndex),
}

impl Retriever {
    pub fn build(kind: RetrieverKind, corpus: &Corpus, index: &PhraseIndex) -> Result<Self> {
        Ok(match kind {
            RetrieverKind::Bm25 => Retriever::Bm25(Bm25Index::build(corpus)?),
            RetrieverKind::Dense => Retriever::Dense(DensePassageIndex::from_phrase_index(index)),
        })
    }

    pub fn kind(&self) -> RetrieverKind {
        match self {
            Retriever::Bm25(_) => RetrieverKind::Bm25,
            Retriever::Dense(_) => RetrieverKind::Dense,
        }
    }
}

/// Top-`k` passage ids for a context. The dense retriever encodes the
/// context with the query side of `head`.
pub fn retrieve_passages(
    ctx: &ConvContext,
    retriever: &Retriever,
    head: &ProjectionHead<f64>,
    provider: &dyn EncoderProvider,
    k: usize,
) -> Result<Vec<String>> {
    if k == 0 {
        return Err(Error::Config("passage K must be at least 1".into()));
    }
    let ranked = match retriever {
        Retriever::Bm25(ix) => ix.search(&bm25_tokens(&ctx.serialized_text), k),
        Retriever::Dense(ix) => ix.search(&encode_context(ctx, head, provider)?, k),
    };
    Ok(ranked.into_iter().map(|(id, _)| id).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineAnswer {
    pub answer: String,
    pub source_passage_id: String,
    /// 1-based rank of the source passage in the retrieved list.
    pub retriever_rank_of_source: usize,
    pub span: PhraseSpan,
    pub score: f64,
    pub retrieve_ms: f64,
    pub read_ms: f64,
}

/// Scores every span of the given passages and returns the best one. Spans
/// are encoded exactly as the phrase index stores them, so on a single
/// passage the result equals the single-stage answer restricted to it.
pub fn read_answer(
    ctx: &ConvContext,
    passages: &[String],
    corpus: &Corpus,
    head: &ProjectionHead<f64>,
    provider: &dyn EncoderProvider,
    max_phrase_len: usize,
) -> Result<PipelineAnswer> {
    if passages.is_empty() {
        return Err(Error::Validation("reader needs at least one passage".into()));
    }
    let t0 = Instant::now();
    let q = encode_context(ctx, head, provider)?;
    let qrow: Vec<f64> = q.start.iter().chain(&q.end).copied().collect();
    let w = 2 * head.dim();
    let mut best: Option<(f64, usize, PhraseSpan)> = None;
    for (rank, id) in passages.iter().enumerate() {
        let p = corpus
            .get(id)
            .ok_or_else(|| Error::NotFound(format!("retrieved passage {id} not in corpus")))?;
        let (spans, rows) = encode_passage_phrases(p, head, provider, max_phrase_len)?;
        for (span, row) in spans.into_iter().zip(rows.chunks_exact(w)) {
            let s = stored_dot(&qrow, row);
            if best.as_ref().is_none_or(|(b, _, _)| s > *b) {
                best = Some((s, rank, span));
            }
        }
    }
    let (score, rank, span) = best.ok_or_else(|| Error::Validation("retrieved passages contain no spans".into()))?;
    Ok(PipelineAnswer {
        answer: span.surface.clone(),
        source_passage_id: span.passage_id.clone(),
        retriever_rank_of_source: rank + 1,
        span,
        score,
        retrieve_ms: 0.0,
        read_ms: t0.elapsed().as_secs_f64() * 1e3,
    })
}

/// A configured retriever-reader system.
pub struct Pipeline<'a> {
    pub corpus: &'a Corpus,
    pub retriever: &'a Retriever,
    pub head: &'a ProjectionHead<f64>,
    pub provider: &'a dyn EncoderProvider,
    pub topk_passages: usize,
    pub max_phrase_len: usize,
}

impl Pipeline<'_> {
    /// Retrieved passage ids and the reader's answer.
    pub fn answer(&self, ctx: &ConvContext) -> Result<(Vec<String>, PipelineAnswer)> {
        let t0 = Instant::now();
        let passages = retrieve_passages(ctx, self.retriever, self.head, self.provider, self.topk_passages)?;
        let retrieve_ms = t0.elapsed().as_secs_f64() * 1e3;
        let mut ans = read_answer(
            ctx,
            &passages,
            self.corpus,
            self.head,
            self.provider,
            self.max_phrase_len,
        )?;
        ans.retrieve_ms = retrieve_ms;
        Ok((passages, ans))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Passage;
    use crate::encoder::Featurizer;
    use crate::index::{build_index, search_topk};

    fn corpus(texts: &[&str]) -> Corpus {
        Corpus::from_passages(
            texts
                .iter()
                .enumerate()
                .map(|(i, t)| Passage::new(format!("p{i}"), "", *t))
                .collect(),
        )
        .unwrap()
    }

    fn toks(s: &str) -> Vec<String> {
        bm25_tokens(s)
    }

    // written out independently of the index internals
    fn oracle(query: &[&str], docs: &[Vec<&str>], doc: usize) -> f64 {
        let n = docs.len() as f64;
        let avg = docs.iter().map(Vec::len).sum::<usize>() as f64 / n;
        let len = docs[doc].len() as f64;
        let mut total = 0.0;
        for t in query {
            let df = docs.iter().filter(|d| d.contains(t)).count() as f64;
            let tf = docs[doc].iter().filter(|x| *x == t).count() as f64;
            if tf == 0.0 {
                continue;
            }
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            total += idf * tf * (0.9 + 1.0) / (tf + 0.9 * (1.0 - 0.4 + 0.4 * len / avg));
        }
        total
    }

    #[test]
    fn absent_term_contributes_nothing() {
        let c = corpus(&["red fox", "blue whale"]);
        let ix = Bm25Index::build(&c).unwrap();
        assert_eq!(bm25_score(&toks("zebra"), "p0", &ix), 0.0);
        assert_eq!(
            bm25_score(&toks("red zebra"), "p0", &ix),
            bm25_score(&toks("red"), "p0", &ix)
        );
    }

    #[test]
    fn single_passage_hand_value() {
        let c = corpus(&["solo"]);
        let ix = Bm25Index::build(&c).unwrap();
        // tf=1, df=1, N=1, len=avglen: idf=ln(1+0.5/1.5), tf part=(1.9)/(1+0.9)=1
        let expected = (1.0f64 + 0.5 / 1.5).ln();
        assert!((bm25_score(&toks("solo"), "p0", &ix) - expected).abs() < 1e-15);
    }

    #[test]
    fn three_passage_oracle() {
        let texts = [
            "the cat sat on the mat",
            "a dog and a cat",
            "birds sing at dawn and dusk",
        ];
        let c = corpus(&texts);
        let ix = Bm25Index::build(&c).unwrap();
        let docs: Vec<Vec<&str>> = texts.iter().map(|t| t.split_whitespace().collect()).collect();
        for q in [["cat", "dawn"], ["the", "a"], ["and", "cat"]] {
            for d in 0..3 {
                let got = bm25_score(&q.map(String::from), &format!("p{d}"), &ix);
                assert!((got - oracle(&q, &docs, d)).abs() < 1e-9, "{q:?} p{d}");
            }
        }
        let vocab: Vec<&str> = ix.vocabulary().collect();
        let mut expected: Vec<&str> = docs.iter().flatten().copied().collect();
        expected.sort();
        expected.dedup();
        assert_eq!(vocab, expected);
    }

    #[test]
    fn planted_passage_ranks_first_and_k_saturates() {
        let c = corpus(&["alpha beta", "gamma delta", "alpha gamma epsilon zeta", "zeta"]);
        let ix = Bm25Index::build(&c).unwrap();
        let r = ix.search(&toks("alpha gamma epsilon zeta"), 10);
        assert_eq!(r[0].0, "p2");
        assert_eq!(r.len(), 4);
        // all zero: passage id order
        let ties = ix.search(&toks("nothing"), 10);
        let ids: Vec<&str> = ties.iter().map(|(i, _)| i.as_str()).collect();
        assert_eq!(ids, ["p0", "p1", "p2", "p3"]);
    }

    #[test]
    fn reader_stays_within_retrieved_passages_and_matches_index() {
        let c = corpus(&[
            "the capital of france is paris",
            "the capital of peru is lima",
            "rivers flow into the sea",
        ]);
        let f = Featurizer::new(16, 1).unwrap();
        let head = ProjectionHead::<f64>::identity(16);
        let ix = build_index(&c, &head, &f, 4).unwrap();
        let ctx = ConvContext::standalone("capital of peru", 128);
        let only = vec!["p2".to_string()];
        let a = read_answer(&ctx, &only, &c, &head, &f, 4).unwrap();
        assert_eq!(a.source_passage_id, "p2");
        assert_eq!(a.retriever_rank_of_source, 1);

        // restricted single-stage answer over p1
        let q = encode_context(&ctx, &head, &f).unwrap();
        let range = ix.passage_entries("p1");
        let all = search_topk(&ix, &q, ix.len()).unwrap();
        let best = all.iter().find(|r| range.contains(&r.entry)).unwrap();
        let a1 = read_answer(&ctx, &["p1".to_string()], &c, &head, &f, 4).unwrap();
        assert_eq!(a1.span, best.span);
        assert_eq!(a1.score, best.score);
    }

    #[test]
    fn dense_passage_vector_is_mean_of_rows() {
        let c = corpus(&["a b c", "d e"]);
        let f = Featurizer::new(8, 3).unwrap();
        let head = ProjectionHead::<f64>::identity(8);
        let ix = build_index(&c, &head, &f, 2).unwrap();
        let dense = DensePassageIndex::from_phrase_index(&ix);
        assert_eq!(dense.len(), 2);
        let r = ix.passage_entries("p1");
        let mean0: f64 = r.clone().map(|e| ix.row(e)[0] as f64).sum::<f64>() / r.len() as f64;
        assert!((dense.vectors[1].start[0] - mean0).abs() < 1e-12);
    }

    #[test]
    fn retriever_kind_parses() {
        assert_eq!("bm25".parse::<RetrieverKind>().unwrap(), RetrieverKind::Bm25);
        assert_eq!("dense".parse::<RetrieverKind>().unwrap(), RetrieverKind::Dense);
        assert!("tfidf".parse::<RetrieverKind>().is_err());
    }
}
