//! Contrastive training of the projection head.
//!
//! Two softmax cross-entropy objectives share the dual-vector score `f`:
//!
//! * phrase loss: each context against its gold phrase, the other in-batch
//!   gold phrases and a queue of frozen phrase embeddings from the preceding
//!   `C` batches;
//! * turn loss: each previous-turn context against the current context of
//!   its own conversation and the other in-batch current contexts, all on
//!   the query side of the head.
//!
//! The joint loss is `lambda1 * phrase + lambda2 * turn`, averaged over the
//! batch (turn loss over the examples that have a previous turn). Gradients
//! are analytic; `tests/gradients.rs` checks them by central differences.

use std::collections::{HashSet, VecDeque};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_conv_context, conversations, ConvContext, ConversationTurn, Corpus, PhraseSpan, DEFAULT_CONTEXT_TOKENS,
    DEFAULT_MAX_PHRASE_LEN,
};
use crate::encoder::{
    encode_context_base, encode_phrase_base, BaseEmbedding, DualVec, EncoderProvider, HeadRole, Matrix,
    PhraseEmbedding, ProjectionHead, DEFAULT_DIM,
};
use crate::error::{Error, Result};
use crate::index::{search_topk, PhraseIndex};
use crate::reading::{encode_reading_set, pretrain_reading, reading_loss_and_grad, ReadingSet};
use crate::scalar::{dot, log_sum_exp, softmax_into, Scalar};

/// Loss above which training is declared divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingExample {
    pub ctx: ConvContext,
    pub positive_span: PhraseSpan,
    pub prev_ctx: Option<ConvContext>,
}

/// Turns with a gold passage whose answer can be located become examples.
/// Returns the examples and the number of turns skipped.
pub fn build_examples(
    turns: &[ConversationTurn],
    corpus: &Corpus,
    max_phrase_len: usize,
    token_budget: usize,
) -> Result<(Vec<TrainingExample>, usize)> {
    let mut out = Vec::new();
    let mut skipped = 0;
    for conv in conversations(turns) {
        for t in conv {
            let Some(passage) = t.gold_passage_id.as_deref().and_then(|id| corpus.get(id)) else {
                skipped += 1;
                continue;
            };
            let Some((s, e)) = passage.find_answer(&t.gold_answer, max_phrase_len) else {
                skipped += 1;
                continue;
            };
            if e - s + 1 > max_phrase_len {
                skipped += 1;
                continue;
            }
            let ctx = build_conv_context(conv, t.turn_index, token_budget)?;
            let prev_ctx = if t.turn_index > 1 {
                Some(build_conv_context(conv, t.turn_index - 1, token_budget)?)
            } else {
                None
            };
            out.push(TrainingExample {
                ctx,
                positive_span: PhraseSpan::from_passage(passage, s, e),
                prev_ctx,
            });
        }
    }
    Ok((out, skipped))
}

/// A training example with its frozen base features.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample<S> {
    pub id: String,
    /// Examples sharing a group never appear in one batch together.
    pub group: usize,
    pub ctx: BaseEmbedding<S>,
    pub positive: BaseEmbedding<S>,
    pub prev: Option<BaseEmbedding<S>>,
    pub positive_span: PhraseSpan,
}

pub fn encode_examples<S: Scalar>(
    examples: &[TrainingExample],
    corpus: &Corpus,
    provider: &dyn EncoderProvider,
) -> Result<Vec<EncodedExample<S>>> {
    let mut groups: Vec<&str> = Vec::new();
    examples
        .iter()
        .map(|ex| {
            let group = match groups.iter().position(|g| *g == ex.ctx.conversation_id) {
                Some(g) => g,
                None => {
                    groups.push(&ex.ctx.conversation_id);
                    groups.len() - 1
                }
            };
            let passage = corpus
                .get(&ex.positive_span.passage_id)
                .ok_or_else(|| Error::NotFound(format!("passage {}", ex.positive_span.passage_id)))?;
            Ok(EncodedExample {
                id: format!("{}#{}", ex.ctx.conversation_id, ex.ctx.turn_index),
                group,
                ctx: encode_context_base(&ex.ctx, provider)?,
                positive: encode_phrase_base(&ex.positive_span, passage, provider)?,
                prev: ex
                    .prev_ctx
                    .as_ref()
                    .map(|p| encode_context_base(p, provider))
                    .transpose()?,
                positive_span: ex.positive_span.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Batch<S> {
    pub examples: Vec<EncodedExample<S>>,
    pub epoch: usize,
    pub step: usize,
}

impl<S: Scalar> Batch<S> {
    pub fn new(examples: Vec<EncodedExample<S>>) -> Self {
        Batch {
            examples,
            epoch: 0,
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Ring buffer of phrase embeddings from the preceding `C` batches. Entries
/// are snapshots: no gradient flows through them.
#[derive(Debug, Clone)]
pub struct PreBatchQueue<S> {
    capacity: usize,
    batches: VecDeque<Vec<PhraseEmbedding<S>>>,
}

impl<S: Scalar> PreBatchQueue<S> {
    pub fn new(capacity_batches: usize) -> Self {
        PreBatchQueue {
            capacity: capacity_batches,
            batches: VecDeque::with_capacity(capacity_batches + 1),
        }
    }

    pub fn push(&mut self, batch: Vec<PhraseEmbedding<S>>) {
        if self.capacity == 0 {
            return;
        }
        if self.batches.len() == self.capacity {
            self.batches.pop_front();
        }
        self.batches.push_back(batch);
    }

    pub fn iter(&self) -> impl Iterator<Item = &PhraseEmbedding<S>> {
        self.batches.iter().flatten()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut PhraseEmbedding<S>> {
        self.batches.iter_mut().flatten()
    }

    /// Number of stored negatives.
    pub fn len(&self) -> usize {
        self.batches.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capacity_batches(&self) -> usize {
        self.capacity
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub l_neg: f64,
    pub l_turn: f64,
    pub l_total: f64,
    pub grad_norm: f64,
}

/// Turn loss plus how many examples had a previous turn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TurnLoss<S> {
    pub value: S,
    pub eligible: usize,
}

#[inline]
fn f<S: Scalar>(a: &DualVec<S>, b: &DualVec<S>) -> S {
    dot(&a.start, &b.start) + dot(&a.end, &b.end)
}

#[inline]
fn axpy<S: Scalar>(acc: &mut DualVec<S>, alpha: S, x: &DualVec<S>) {
    for (a, &b) in acc.start.iter_mut().zip(&x.start) {
        *a += alpha * b;
    }
    for (a, &b) in acc.end.iter_mut().zip(&x.end) {
        *a += alpha * b;
    }
}

fn check_lambdas(lambda1: f64, lambda2: f64) -> Result<()> {
    if !(lambda1 >= 0.0 && lambda2 >= 0.0 && lambda1.is_finite() && lambda2.is_finite()) {
        return Err(Error::Config(format!(
            "loss weights must be finite and non-negative, got {lambda1}, {lambda2}"
        )));
    }
    Ok(())
}

fn check_batch<S: Scalar>(batch: &Batch<S>, head: &ProjectionHead<S>) -> Result<()> {
    if batch.len() < 2 {
        return Err(Error::Config(format!(
            "batch size must be at least 2, got {}",
            batch.len()
        )));
    }
    let d = head.dim();
    for ex in &batch.examples {
        let dims_ok = ex.ctx.dim() == d && ex.positive.dim() == d && ex.prev.as_ref().is_none_or(|p| p.dim() == d);
        if !dims_ok {
            return Err(Error::Config(format!(
                "example {} dim differs from head dim {d}",
                ex.id
            )));
        }
    }
    Ok(())
}

struct Forward<S> {
    /// Query embeddings of current contexts.
    u: Vec<DualVec<S>>,
    /// Phrase embeddings of gold phrases.
    v: Vec<DualVec<S>>,
    /// Query embeddings of previous contexts.
    w: Vec<Option<DualVec<S>>>,
}

fn forward<S: Scalar>(batch: &Batch<S>, head: &ProjectionHead<S>) -> Forward<S> {
    Forward {
        u: batch.examples.iter().map(|e| head.project_query(&e.ctx)).collect(),
        v: batch
            .examples
            .iter()
            .map(|e| head.project_phrase(&e.positive))
            .collect(),
        w: batch
            .examples
            .iter()
            .map(|e| e.prev.as_ref().map(|p| head.project_query(p)))
            .collect(),
    }
}

struct EmbeddingGrads<S> {
    u: Vec<DualVec<S>>,
    v: Vec<DualVec<S>>,
    w: Vec<DualVec<S>>,
}

impl<S: Scalar> EmbeddingGrads<S> {
    fn new(n: usize, d: usize) -> Self {
        EmbeddingGrads {
            u: vec![DualVec::zeros(d); n],
            v: vec![DualVec::zeros(d); n],
            w: vec![DualVec::zeros(d); n],
        }
    }
}

fn non_finite(what: &str, id: &str) -> Error {
    Error::Numeric(format!("non-finite {what} score for example {id}"))
}

/// Phrase loss terms; accumulates `scale * dL/d(embedding)` into `grads`.
fn phrase_terms<S: Scalar>(
    batch: &Batch<S>,
    fw: &Forward<S>,
    queue: &PreBatchQueue<S>,
    scale: S,
    mut grads: Option<&mut EmbeddingGrads<S>>,
) -> Result<S> {
    let n = batch.len();
    let mut total = S::zero();
    let mut z: Vec<S> = Vec::with_capacity(n + queue.len());
    let mut p: Vec<S> = Vec::new();
    let queued: Vec<&PhraseEmbedding<S>> = queue.iter().collect();
    for i in 0..n {
        z.clear();
        // positive first, then the other in-batch gold phrases, then the queue
        z.push(f(&fw.u[i], &fw.v[i]));
        z.extend((0..n).filter(|&j| j != i).map(|j| f(&fw.u[i], &fw.v[j])));
        z.extend(queued.iter().map(|q| f(&fw.u[i], q)));
        if z.iter().any(|x| !x.is_finite()) {
            return Err(non_finite("phrase", &batch.examples[i].id));
        }
        let lse = log_sum_exp(&z);
        total += lse - z[0];
        if let Some(g) = grads.as_deref_mut() {
            softmax_into(&z, &mut p);
            let mut gu = DualVec::zeros(fw.u[i].dim());
            let mut k = 0;
            for j in std::iter::once(i).chain((0..n).filter(|&j| j != i)) {
                let coef = scale * (p[k] - if k == 0 { S::one() } else { S::zero() });
                axpy(&mut gu, coef, &fw.v[j]);
                axpy(&mut g.v[j], coef, &fw.u[i]);
                k += 1;
            }
            for q in &queued {
                axpy(&mut gu, scale * p[k], q);
                k += 1;
            }
            axpy(&mut g.u[i], S::one(), &gu);
        }
    }
    Ok(total / S::lit(n as f64))
}

/// Turn loss terms; accumulates `scale_per_eligible * dL/d(embedding)`.
fn turn_terms<S: Scalar>(
    batch: &Batch<S>,
    fw: &Forward<S>,
    weight: S,
    mut grads: Option<&mut EmbeddingGrads<S>>,
) -> Result<TurnLoss<S>> {
    let n = batch.len();
    let eligible = fw.w.iter().filter(|w| w.is_some()).count();
    if eligible == 0 {
        return Ok(TurnLoss {
            value: S::zero(),
            eligible: 0,
        });
    }
    let scale = weight / S::lit(eligible as f64);
    let mut total = S::zero();
    let mut z: Vec<S> = Vec::with_capacity(n);
    let mut p: Vec<S> = Vec::new();
    for i in 0..n {
        let Some(anchor) = &fw.w[i] else { continue };
        z.clear();
        z.extend((0..n).map(|j| f(&fw.u[j], anchor)));
        if z.iter().any(|x| !x.is_finite()) {
            return Err(non_finite("turn", &batch.examples[i].id));
        }
        total += log_sum_exp(&z) - z[i];
        if let Some(g) = grads.as_deref_mut() {
            softmax_into(&z, &mut p);
            for (j, &pj) in p.iter().enumerate() {
                let coef = scale * (pj - if j == i { S::one() } else { S::zero() });
                axpy(&mut g.u[j], coef, anchor);
                axpy(&mut g.w[i], coef, &fw.u[j]);
            }
        }
    }
    Ok(TurnLoss {
        value: total / S::lit(eligible as f64),
        eligible,
    })
}

/// Chains embedding gradients through the linear head.
fn head_gradient<S: Scalar>(batch: &Batch<S>, g: &EmbeddingGrads<S>, dim: usize) -> ProjectionHead<S> {
    let mut grad = ProjectionHead::zeros(dim);
    for (i, ex) in batch.examples.iter().enumerate() {
        grad.query_start.add_outer(S::one(), &g.u[i].start, &ex.ctx.start);
        grad.query_end.add_outer(S::one(), &g.u[i].end, &ex.ctx.end);
        grad.phrase_start.add_outer(S::one(), &g.v[i].start, &ex.positive.start);
        grad.phrase_end.add_outer(S::one(), &g.v[i].end, &ex.positive.end);
        if let Some(prev) = &ex.prev {
            grad.query_start.add_outer(S::one(), &g.w[i].start, &prev.start);
            grad.query_end.add_outer(S::one(), &g.w[i].end, &prev.end);
        }
    }
    grad
}

/// Mean phrase loss over the batch.
pub fn loss_neg<S: Scalar>(batch: &Batch<S>, queue: &PreBatchQueue<S>, head: &ProjectionHead<S>) -> Result<S> {
    check_batch(batch, head)?;
    let fw = forward(batch, head);
    phrase_terms(batch, &fw, queue, S::one(), None)
}

/// Mean turn loss over examples with a previous turn; zero with
/// `eligible == 0` when there are none.
pub fn loss_turn<S: Scalar>(batch: &Batch<S>, head: &ProjectionHead<S>) -> Result<TurnLoss<S>> {
    check_batch(batch, head)?;
    let fw = forward(batch, head);
    turn_terms(batch, &fw, S::one(), None)
}

/// Joint loss and its gradient with respect to every head matrix.
pub fn loss_and_grad<S: Scalar>(
    batch: &Batch<S>,
    queue: &PreBatchQueue<S>,
    head: &ProjectionHead<S>,
    lambda1: f64,
    lambda2: f64,
) -> Result<(LossReport, ProjectionHead<S>)> {
    check_lambdas(lambda1, lambda2)?;
    check_batch(batch, head)?;
    let fw = forward(batch, head);
    let mut g = EmbeddingGrads::new(batch.len(), head.dim());
    let l1 = S::lit(lambda1);
    let l2 = S::lit(lambda2);
    let neg_scale = l1 / S::lit(batch.len() as f64);
    let l_neg = phrase_terms(batch, &fw, queue, neg_scale, Some(&mut g))?;
    // a zero weight switches the term off, so it reports zero as well
    let turn = if lambda2 == 0.0 {
        TurnLoss {
            value: S::zero(),
            eligible: 0,
        }
    } else {
        turn_terms(batch, &fw, l2, Some(&mut g))?
    };
    let grad = head_gradient(batch, &g, head.dim());
    if !grad.is_finite() {
        return Err(Error::Numeric(format!("non-finite gradient at step {}", batch.step)));
    }
    let l_total = l1 * l_neg + l2 * turn.value;
    Ok((
        LossReport {
            step: batch.step,
            l_neg: l_neg.to_f64_lossy(),
            l_turn: turn.value.to_f64_lossy(),
            l_total: l_total.to_f64_lossy(),
            grad_norm: grad.norm().to_f64_lossy(),
        },
        grad,
    ))
}

pub fn loss_total<S: Scalar>(
    batch: &Batch<S>,
    queue: &PreBatchQueue<S>,
    head: &ProjectionHead<S>,
    lambda1: f64,
    lambda2: f64,
) -> Result<LossReport> {
    loss_and_grad(batch, queue, head, lambda1, lambda2).map(|(r, _)| r)
}

pub fn grad_head<S: Scalar>(
    batch: &Batch<S>,
    queue: &PreBatchQueue<S>,
    head: &ProjectionHead<S>,
    lambda1: f64,
    lambda2: f64,
) -> Result<ProjectionHead<S>> {
    loss_and_grad(batch, queue, head, lambda1, lambda2).map(|(_, g)| g)
}

/// Fraction of examples with a previous turn whose own current context
/// outscores every other in-batch current context against that previous
/// turn. Returns (hits, eligible).
pub fn turn_ranking_hits<S: Scalar>(batch: &Batch<S>, head: &ProjectionHead<S>) -> (usize, usize) {
    let fw = forward(batch, head);
    let mut hits = 0;
    let mut eligible = 0;
    for (i, w) in fw.w.iter().enumerate() {
        let Some(anchor) = w else { continue };
        eligible += 1;
        let own = f(&fw.u[i], anchor);
        if (0..batch.len()).filter(|&j| j != i).all(|j| f(&fw.u[j], anchor) < own) {
            hits += 1;
        }
    }
    (hits, eligible)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub prebatch_batches: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub seed: u64,
    pub dim: usize,
    pub max_phrase_len: usize,
    pub context_tokens: usize,
    pub qf_epochs: usize,
    pub qf_learning_rate: f64,
    /// Retrieved phrases used as negatives during query-side fine-tuning.
    pub qf_negatives: usize,
    /// Epochs of the span-reading warm start that precedes contrastive training.
    pub rc_epochs: usize,
    pub rc_learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            prebatch_batches: 2,
            epochs: 30,
            learning_rate: 0.05,
            lambda1: 4.0,
            lambda2: 1.0,
            seed: 7,
            dim: DEFAULT_DIM,
            max_phrase_len: DEFAULT_MAX_PHRASE_LEN,
            context_tokens: DEFAULT_CONTEXT_TOKENS,
            qf_epochs: 20,
            qf_learning_rate: 0.2,
            qf_negatives: 16,
            rc_epochs: 10,
            rc_learning_rate: 0.5,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: bad value {value:?} for {key}")))
}

impl TrainConfig {
    /// Parses `key = value` lines (`:` also accepted, `#` starts a comment)
    /// over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .or_else(|| line.split_once(':'))
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            c.set(k.trim(), v.trim(), i + 1)?;
        }
        c.validate()?;
        Ok(c)
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        match key {
            "batch_size" => self.batch_size = parse_value(key, value, line)?,
            "prebatch_batches" => self.prebatch_batches = parse_value(key, value, line)?,
            "epochs" => self.epochs = parse_value(key, value, line)?,
            "learning_rate" => self.learning_rate = parse_value(key, value, line)?,
            "lambda1" => self.lambda1 = parse_value(key, value, line)?,
            "lambda2" => self.lambda2 = parse_value(key, value, line)?,
            "seed" => self.seed = parse_value(key, value, line)?,
            "dim" => self.dim = parse_value(key, value, line)?,
            "max_phrase_len" => self.max_phrase_len = parse_value(key, value, line)?,
            "context_tokens" => self.context_tokens = parse_value(key, value, line)?,
            "qf_epochs" => self.qf_epochs = parse_value(key, value, line)?,
            "qf_learning_rate" => self.qf_learning_rate = parse_value(key, value, line)?,
            "qf_negatives" => self.qf_negatives = parse_value(key, value, line)?,
            "rc_epochs" => self.rc_epochs = parse_value(key, value, line)?,
            "rc_learning_rate" => self.rc_learning_rate = parse_value(key, value, line)?,
            other => return Err(Error::Config(format!("line {line}: unknown key {other}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.dim < 2 {
            return Err(Error::Config("dim must be at least 2".into()));
        }
        if self.max_phrase_len < 1 {
            return Err(Error::Config("max_phrase_len must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.qf_learning_rate >= 0.0 && self.rc_learning_rate >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        check_lambdas(self.lambda1, self.lambda2)
    }

    pub fn to_kv_string(&self) -> String {
        format!(
            "batch_size = {}\nprebatch_batches = {}\nepochs = {}\nlearning_rate = {}\nlambda1 = {}\nlambda2 = {}\nseed = {}\ndim = {}\nmax_phrase_len = {}\ncontext_tokens = {}\nqf_epochs = {}\nqf_learning_rate = {}\nqf_negatives = {}\nrc_epochs = {}\nrc_learning_rate = {}\n",
            self.batch_size,
            self.prebatch_batches,
            self.epochs,
            self.learning_rate,
            self.lambda1,
            self.lambda2,
            self.seed,
            self.dim,
            self.max_phrase_len,
            self.context_tokens,
            self.qf_epochs,
            self.qf_learning_rate,
            self.qf_negatives,
            self.rc_epochs,
            self.rc_learning_rate
        )
    }
}

/// Shuffles example indices and cuts them into batches of `batch_size`
/// in which no two examples share a group. Leftovers that cannot form a
/// batch of two are dropped for this epoch.
pub fn plan_batches(groups: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.shuffle(rng);
    let mut pending: VecDeque<usize> = order.into();
    let mut out = Vec::new();
    while !pending.is_empty() {
        let mut batch = Vec::with_capacity(batch_size);
        let mut used = HashSet::new();
        let mut deferred = VecDeque::new();
        while let Some(i) = pending.pop_front() {
            if batch.len() < batch_size && used.insert(groups[i]) {
                batch.push(i);
            } else {
                deferred.push_back(i);
            }
            if batch.len() == batch_size {
                break;
            }
        }
        deferred.extend(pending.drain(..));
        pending = deferred;
        if batch.len() < 2 {
            break;
        }
        out.push(batch);
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S> {
    pub head: ProjectionHead<S>,
    pub trajectory: Vec<LossReport>,
}

fn check_divergence(report: &LossReport, trajectory: &[LossReport]) -> Result<()> {
    if !report.l_total.is_finite() || report.l_total > DIVERGENCE_LIMIT {
        let mut t = trajectory.to_vec();
        t.push(*report);
        return Err(Error::Diverged {
            step: report.step,
            trajectory: t,
        });
    }
    Ok(())
}

/// Plain gradient descent on the joint loss. Deterministic given the seed.
pub fn train<S: Scalar>(
    examples: &[EncodedExample<S>],
    init: ProjectionHead<S>,
    config: &TrainConfig,
) -> Result<TrainOutcome<S>> {
    train_with_reading(examples, None, init, config)
}

/// [`train`], optionally interleaved with span-reading steps.
///
/// `reading` must be built from the same examples in the same order. Each
/// contrastive step is followed by one reading step on the same batch at
/// `rc_learning_rate`; those steps keep the head's span boundaries sharp,
/// which the contrastive loss alone never sees. The trajectory holds the
/// contrastive steps only.
pub fn train_with_reading<S: Scalar>(
    examples: &[EncodedExample<S>],
    reading: Option<&ReadingSet<S>>,
    init: ProjectionHead<S>,
    config: &TrainConfig,
) -> Result<TrainOutcome<S>> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::Validation("no training examples".into()));
    }
    if let Some(r) = reading {
        if r.items.len() != examples.len() {
            return Err(Error::Validation(format!(
                "{} reading items for {} examples",
                r.items.len(),
                examples.len()
            )));
        }
    }
    let rc_lr = S::lit(config.rc_learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let groups: Vec<usize> = examples.iter().map(|e| e.group).collect();
    let mut head = init;
    let mut queue = PreBatchQueue::new(config.prebatch_batches);
    let mut trajectory = Vec::new();
    let lr = S::lit(config.learning_rate);
    let mut step = 0;
    for epoch in 0..config.epochs {
        for idx in plan_batches(&groups, config.batch_size, &mut rng) {
            let batch = Batch {
                examples: idx.iter().map(|&i| examples[i].clone()).collect(),
                epoch,
                step,
            };
            let (report, grad) = loss_and_grad(&batch, &queue, &head, config.lambda1, config.lambda2)?;
            check_divergence(&report, &trajectory)?;
            trajectory.push(report);
            queue.push(
                batch
                    .examples
                    .iter()
                    .map(|e| head.project_phrase(&e.positive))
                    .collect(),
            );
            for role in HeadRole::ALL {
                head.matrix_mut(role).sub_scaled(lr, grad.matrix(role));
            }
            if let Some(r) = reading {
                let (_, g) = reading_loss_and_grad(r, &idx, &head)?;
                for role in HeadRole::ALL {
                    head.matrix_mut(role).sub_scaled(rc_lr, g.matrix(role));
                }
            }
            step += 1;
        }
    }
    Ok(TrainOutcome { head, trajectory })
}

/// Result of [`fit`].
#[derive(Debug, Clone)]
pub struct FitOutcome<S> {
    pub head: ProjectionHead<S>,
    /// Steps of the reading warm start.
    pub warmup: Vec<LossReport>,
    /// Steps of the joint contrastive loss.
    pub trajectory: Vec<LossReport>,
    pub examples: usize,
    pub skipped: usize,
}

/// Full training from conversation turns: builds and encodes examples,
/// runs `rc_epochs` of the reading warm start, then [`train_with_reading`].
/// Reading steps are skipped entirely when `rc_learning_rate` is zero.
pub fn fit<S: Scalar>(
    turns: &[ConversationTurn],
    corpus: &Corpus,
    provider: &dyn EncoderProvider,
    init: ProjectionHead<S>,
    config: &TrainConfig,
) -> Result<FitOutcome<S>> {
    config.validate()?;
    let (examples, skipped) = build_examples(turns, corpus, config.max_phrase_len, config.context_tokens)?;
    let encoded = encode_examples::<S>(&examples, corpus, provider)?;
    let reading = if config.rc_learning_rate > 0.0 {
        Some(encode_reading_set::<S>(
            &examples,
            corpus,
            provider,
            config.max_phrase_len,
        )?)
    } else {
        None
    };
    let (start, warmup) = match &reading {
        Some(r) if config.rc_epochs > 0 => {
            let w = pretrain_reading(
                r,
                init,
                config.rc_epochs,
                config.rc_learning_rate,
                config.batch_size,
                config.seed,
            )?;
            (w.head, w.trajectory)
        }
        _ => (init, Vec::new()),
    };
    let out = train_with_reading(&encoded, reading.as_ref(), start, config)?;
    Ok(FitOutcome {
        head: out.head,
        warmup,
        trajectory: out.trajectory,
        examples: encoded.len(),
        skipped,
    })
}

/// Updates only the query matrices against a frozen index. Each context's
/// negatives are the highest-scoring retrieved phrases other than its gold
/// phrase; examples whose gold phrase is not in the index are skipped.
pub fn finetune_query<S: Scalar>(
    index: &PhraseIndex,
    examples: &[EncodedExample<S>],
    init: ProjectionHead<S>,
    config: &TrainConfig,
) -> Result<TrainOutcome<S>> {
    config.validate()?;
    if init.dim() != index.dim() {
        return Err(Error::Config(format!(
            "head dim {} does not match index dim {}",
            init.dim(),
            index.dim()
        )));
    }
    let usable: Vec<(&EncodedExample<S>, usize)> = examples
        .iter()
        .filter_map(|e| {
            let s = &e.positive_span;
            index
                .find(&s.passage_id, s.start_token, s.end_token)
                .map(|entry| (e, entry))
        })
        .collect();
    if usable.is_empty() {
        return Err(Error::Validation(
            "no fine-tuning example has its gold phrase in the index".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let groups: Vec<usize> = usable.iter().map(|(e, _)| e.group).collect();
    let mut head = init;
    let mut trajectory = Vec::new();
    let lr = S::lit(config.qf_learning_rate);
    let k = config.qf_negatives + 1;
    let mut step = 0;
    for _epoch in 0..config.qf_epochs {
        for idx in plan_batches(&groups, config.batch_size, &mut rng) {
            let scale = S::one() / S::lit(idx.len() as f64);
            let per_example: Vec<Result<(S, DualVec<S>)>> = idx
                .par_iter()
                .map(|&i| {
                    let (ex, pos_entry) = usable[i];
                    let u = head.project_query(&ex.ctx);
                    let retrieved = search_topk(index, &u, k)?;
                    let mut cands: Vec<PhraseEmbedding<S>> = vec![index.embedding(pos_entry)];
                    cands.extend(
                        retrieved
                            .iter()
                            .filter(|r| r.entry != pos_entry)
                            .take(config.qf_negatives)
                            .map(|r| index.embedding(r.entry)),
                    );
                    let z: Vec<S> = cands.iter().map(|c| f(&u, c)).collect();
                    if z.iter().any(|x| !x.is_finite()) {
                        return Err(non_finite("fine-tuning", &ex.id));
                    }
                    let mut p = Vec::new();
                    softmax_into(&z, &mut p);
                    let mut gu = DualVec::zeros(u.dim());
                    for (kk, c) in cands.iter().enumerate() {
                        let coef = scale * (p[kk] - if kk == 0 { S::one() } else { S::zero() });
                        axpy(&mut gu, coef, c);
                    }
                    Ok((log_sum_exp(&z) - z[0], gu))
                })
                .collect();
            let mut grad_qs = Matrix::zeros(head.dim());
            let mut grad_qe = Matrix::zeros(head.dim());
            let mut loss = S::zero();
            for (&i, r) in idx.iter().zip(per_example) {
                let (l, gu) = r?;
                loss += l;
                let ex = usable[i].0;
                grad_qs.add_outer(S::one(), &gu.start, &ex.ctx.start);
                grad_qe.add_outer(S::one(), &gu.end, &ex.ctx.end);
            }
            let l_neg = (loss * scale).to_f64_lossy();
            let norm = grad_qs
                .as_slice()
                .iter()
                .chain(grad_qe.as_slice())
                .map(|&x| x * x)
                .sum::<S>()
                .sqrt()
                .to_f64_lossy();
            let report = LossReport {
                step,
                l_neg,
                l_turn: 0.0,
                l_total: l_neg,
                grad_norm: norm,
            };
            check_divergence(&report, &trajectory)?;
            trajectory.push(report);
            head.query_start.sub_scaled(lr, &grad_qs);
            head.query_end.sub_scaled(lr, &grad_qe);
            step += 1;
        }
    }
    Ok(TrainOutcome { head, trajectory })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn unit_example(id: usize, d: usize, prev: bool) -> EncodedExample<f64> {
        let v = DualVec {
            start: vec![0.0; d],
            end: vec![0.0; d],
        };
        EncodedExample {
            id: id.to_string(),
            group: id,
            ctx: v.clone(),
            positive: v.clone(),
            prev: prev.then(|| v.clone()),
            positive_span: PhraseSpan {
                passage_id: "p".into(),
                start_token: 0,
                end_token: 0,
                surface: "x".into(),
            },
        }
    }

    fn random_example(rng: &mut ChaCha8Rng, id: usize, d: usize, prev: bool) -> EncodedExample<f64> {
        let mut r = || DualVec {
            start: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            end: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        let (ctx, positive) = (r(), r());
        let prev = if prev { Some(r()) } else { None };
        EncodedExample {
            prev,
            ctx,
            positive,
            ..unit_example(id, d, false)
        }
    }

    #[test]
    fn uniform_two_batch_is_ln2() {
        let b = Batch::new(vec![unit_example(0, 4, true), unit_example(1, 4, true)]);
        let h = ProjectionHead::identity(4);
        let q = PreBatchQueue::new(0);
        assert!((loss_neg(&b, &q, &h).unwrap() - 2f64.ln()).abs() < 1e-12);
        let t = loss_turn(&b, &h).unwrap();
        assert!((t.value - 2f64.ln()).abs() < 1e-12);
        assert_eq!(t.eligible, 2);
    }

    #[test]
    fn batch_of_one_rejected() {
        let b = Batch::new(vec![unit_example(0, 4, false)]);
        assert!(matches!(
            loss_neg(&b, &PreBatchQueue::new(0), &ProjectionHead::identity(4)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn no_eligible_turns_is_zero_not_error() {
        let b = Batch::new(vec![unit_example(0, 4, false), unit_example(1, 4, false)]);
        let t = loss_turn(&b, &ProjectionHead::identity(4)).unwrap();
        assert_eq!(
            t,
            TurnLoss {
                value: 0.0,
                eligible: 0
            }
        );
    }

    #[test]
    fn dominant_positive_drives_loss_to_zero() {
        let mut a = unit_example(0, 2, false);
        let mut b = unit_example(1, 2, false);
        a.ctx.start = vec![10.0, 0.0];
        a.positive.start = vec![10.0, 0.0];
        b.ctx.start = vec![0.0, 10.0];
        b.positive.start = vec![0.0, 10.0];
        let batch = Batch::new(vec![a, b]);
        let l = loss_neg(&batch, &PreBatchQueue::new(0), &ProjectionHead::identity(2)).unwrap();
        assert!(l < 1e-40, "{l}");
        let (_, g) = loss_and_grad(&batch, &PreBatchQueue::new(0), &ProjectionHead::identity(2), 1.0, 0.0).unwrap();
        assert!(g.norm() < 1e-10);
    }

    #[test]
    fn zero_weights_give_zero_loss_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = Batch::new((0..3).map(|i| random_example(&mut rng, i, 4, true)).collect());
        let (r, g) = loss_and_grad(&batch, &PreBatchQueue::new(0), &ProjectionHead::identity(4), 0.0, 0.0).unwrap();
        assert_eq!(r.l_total, 0.0);
        assert_eq!(g.norm(), 0.0);
        let (r, _) = loss_and_grad(&batch, &PreBatchQueue::new(0), &ProjectionHead::identity(4), 3.0, 0.0).unwrap();
        assert_eq!(r.l_total, 3.0 * r.l_neg);
    }

    #[test]
    fn negative_weight_rejected() {
        let b = Batch::new(vec![unit_example(0, 4, false), unit_example(1, 4, false)]);
        assert!(loss_total(&b, &PreBatchQueue::new(0), &ProjectionHead::identity(4), -1.0, 0.0).is_err());
    }

    #[test]
    fn non_finite_score_names_example() {
        let mut a = unit_example(0, 2, false);
        a.ctx.start = vec![f64::INFINITY, 0.0];
        a.positive.start = vec![1.0, 0.0];
        let b = Batch::new(vec![a, unit_example(7, 2, false)]);
        let err = loss_neg(&b, &PreBatchQueue::new(0), &ProjectionHead::identity(2)).unwrap_err();
        assert!(matches!(&err, Error::Numeric(m) if m.contains("example 0")), "{err}");
    }

    #[test]
    fn queue_keeps_last_c_batches() {
        let mut q = PreBatchQueue::<f64>::new(2);
        for i in 0..5 {
            q.push(vec![
                DualVec {
                    start: vec![i as f64],
                    end: vec![0.0]
                };
                3
            ]);
        }
        assert_eq!(q.len(), 6);
        let firsts: Vec<f64> = q.iter().map(|e| e.start[0]).collect();
        assert_eq!(firsts, [3.0, 3.0, 3.0, 4.0, 4.0, 4.0]);
        let mut none = PreBatchQueue::<f64>::new(0);
        none.push(vec![DualVec::zeros(1)]);
        assert!(none.is_empty());
    }

    #[test]
    fn batches_never_repeat_a_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let groups: Vec<usize> = (0..30).map(|i| i / 3).collect();
        let plan = plan_batches(&groups, 4, &mut rng);
        let mut seen = HashSet::new();
        for b in &plan {
            assert!(b.len() >= 2 && b.len() <= 4);
            let gs: HashSet<_> = b.iter().map(|&i| groups[i]).collect();
            assert_eq!(gs.len(), b.len());
            for &i in b {
                assert!(seen.insert(i));
            }
        }
        assert!(seen.len() >= 28);
    }

    #[test]
    fn config_round_trip_and_errors() {
        let c = TrainConfig {
            lambda1: 2.0,
            seed: 99,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::parse(&c.to_kv_string()).unwrap(), c);
        let parsed = TrainConfig::parse("# comment\nbatch_size: 4\nlearning_rate = 0.1 # inline\n").unwrap();
        assert_eq!(parsed.batch_size, 4);
        assert_eq!(parsed.learning_rate, 0.1);
        assert!(TrainConfig::parse("batch_size = 1").is_err());
        assert!(TrainConfig::parse("bogus = 1").is_err());
        assert!(TrainConfig::parse("epochs = many").is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ex: Vec<_> = (0..6).map(|i| random_example(&mut rng, i, 4, i % 2 == 0)).collect();
        // one batch per epoch and no queue, so every step sees the same loss
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 3,
            batch_size: 6,
            prebatch_batches: 0,
            dim: 4,
            ..TrainConfig::default()
        };
        let init = ProjectionHead::identity(4);
        let out = train(&ex, init.clone(), &cfg).unwrap();
        assert_eq!(out.head, init);
        assert_eq!(out.trajectory.len(), 3);
        let first = out.trajectory[0].l_total;
        assert!(out.trajectory.iter().all(|r| (r.l_total - first).abs() < 1e-12));
    }

    #[test]
    fn divergence_aborts_with_trajectory() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ex: Vec<_> = (0..4).map(|i| random_example(&mut rng, i, 4, true)).collect();
        let cfg = TrainConfig {
            learning_rate: 1e9,
            epochs: 50,
            batch_size: 2,
            dim: 4,
            ..TrainConfig::default()
        };
        match train(&ex, ProjectionHead::identity(4), &cfg) {
            Err(Error::Diverged { trajectory, step }) => {
                assert_eq!(trajectory.last().unwrap().step, step);
                assert!(trajectory.len() >= 2);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
