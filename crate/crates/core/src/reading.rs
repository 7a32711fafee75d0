//! Reading-comprehension warm start for the projection head.
//!
//! Contrastive training only ever contrasts whole answer phrases with each
//! other, so it carries no signal about where a phrase should start or end.
//! This stage supplies that signal the way a pretrained phrase encoder
//! would: for each example, a softmax over every span of its gold passage
//! with the gold span as the target.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{enumerate_phrase_spans, Corpus};
use crate::encoder::{encode_context_base, phrase_text, BaseEmbedding, EncoderProvider, ProjectionHead};
use crate::error::{Error, Result};
use crate::scalar::{dot, log_sum_exp, softmax_into, Scalar};
use crate::training::{plan_batches, LossReport, TrainOutcome, TrainingExample, DIVERGENCE_LIMIT};

#[derive(Debug, Clone)]
pub struct ReadingItem<S> {
    pub id: String,
    pub group: usize,
    pub ctx: BaseEmbedding<S>,
    /// Slot in [`ReadingSet::passages`].
    pub passage: usize,
    /// Gold span's position among that passage's spans.
    pub positive: usize,
}

/// Contexts plus the base features of every span of each gold passage.
#[derive(Debug, Clone)]
pub struct ReadingSet<S> {
    pub passages: Vec<Vec<BaseEmbedding<S>>>,
    pub items: Vec<ReadingItem<S>>,
}

pub fn encode_reading_set<S: Scalar>(
    examples: &[TrainingExample],
    corpus: &Corpus,
    provider: &dyn EncoderProvider,
    max_phrase_len: usize,
) -> Result<ReadingSet<S>> {
    let mut slots: HashMap<&str, usize> = HashMap::new();
    let mut passages: Vec<Vec<BaseEmbedding<S>>> = Vec::new();
    let mut span_lists = Vec::new();
    let mut groups: HashMap<&str, usize> = HashMap::new();
    let mut items = Vec::with_capacity(examples.len());
    for ex in examples {
        let pid = ex.positive_span.passage_id.as_str();
        let slot = match slots.get(pid) {
            Some(&s) => s,
            None => {
                let p = corpus
                    .get(pid)
                    .ok_or_else(|| Error::NotFound(format!("passage {pid}")))?;
                let spans = enumerate_phrase_spans(p, max_phrase_len)?;
                let texts: Vec<String> = spans
                    .iter()
                    .map(|s| phrase_text(p, s.start_token, s.end_token))
                    .collect();
                let bases = provider.encode_batch(&texts)?;
                if bases.len() != spans.len() {
                    return Err(Error::Protocol(format!(
                        "passage {pid}: {} embeddings for {} spans",
                        bases.len(),
                        spans.len()
                    )));
                }
                passages.push(bases.iter().map(|b| b.cast()).collect());
                span_lists.push(spans);
                slots.insert(pid, passages.len() - 1);
                passages.len() - 1
            }
        };
        let positive = span_lists[slot]
            .iter()
            .position(|s| s.start_token == ex.positive_span.start_token && s.end_token == ex.positive_span.end_token)
            .ok_or_else(|| {
                Error::Validation(format!(
                    "gold span of {}#{} exceeds the phrase length limit",
                    ex.ctx.conversation_id, ex.ctx.turn_index
                ))
            })?;
        let n = groups.len();
        let group = *groups.entry(ex.ctx.conversation_id.as_str()).or_insert(n);
        items.push(ReadingItem {
            id: format!("{}#{}", ex.ctx.conversation_id, ex.ctx.turn_index),
            group,
            ctx: encode_context_base(&ex.ctx, provider)?,
            passage: slot,
            positive,
        });
    }
    Ok(ReadingSet { passages, items })
}

/// Mean span-softmax loss over `batch` and its gradient.
///
/// With `u = W_q x` and `t = W_p^T u`, span `k` scores `t . y_k`; the
/// gradient folds every span into `ybar = sum_k g_k y_k`, giving
/// `dW_p = u ybar^T` and `dW_q = (W_p ybar) x^T` per endpoint.
pub fn reading_loss_and_grad<S: Scalar>(
    set: &ReadingSet<S>,
    batch: &[usize],
    head: &ProjectionHead<S>,
) -> Result<(S, ProjectionHead<S>)> {
    if batch.is_empty() {
        return Err(Error::Config("empty reading batch".into()));
    }
    let d = head.dim();
    let scale = S::one() / S::lit(batch.len() as f64);
    let mut grad = ProjectionHead::zeros(d);
    let mut total = S::zero();
    let mut z = Vec::new();
    let mut p = Vec::new();
    for &i in batch {
        let item = &set.items[i];
        let spans = &set.passages[item.passage];
        let u = head.project_query(&item.ctx);
        let ts = head.phrase_start.matvec_transposed(&u.start);
        let te = head.phrase_end.matvec_transposed(&u.end);
        z.clear();
        z.extend(spans.iter().map(|y| dot(&ts, &y.start) + dot(&te, &y.end)));
        if z.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite span score for example {}", item.id)));
        }
        total += log_sum_exp(&z) - z[item.positive];
        softmax_into(&z, &mut p);
        let mut ys = vec![S::zero(); d];
        let mut ye = vec![S::zero(); d];
        for (k, y) in spans.iter().enumerate() {
            let g = scale * (p[k] - if k == item.positive { S::one() } else { S::zero() });
            for (a, &b) in ys.iter_mut().zip(&y.start) {
                *a += g * b;
            }
            for (a, &b) in ye.iter_mut().zip(&y.end) {
                *a += g * b;
            }
        }
        grad.phrase_start.add_outer(S::one(), &u.start, &ys);
        grad.phrase_end.add_outer(S::one(), &u.end, &ye);
        grad.query_start
            .add_outer(S::one(), &head.phrase_start.matvec(&ys), &item.ctx.start);
        grad.query_end
            .add_outer(S::one(), &head.phrase_end.matvec(&ye), &item.ctx.end);
    }
    Ok((total * scale, grad))
}

/// Gradient descent on the span-softmax loss. Steps are reported with the
/// loss in `l_neg` and `l_total`.
pub fn pretrain_reading<S: Scalar>(
    set: &ReadingSet<S>,
    init: ProjectionHead<S>,
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    seed: u64,
) -> Result<TrainOutcome<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<usize> = set.items.iter().map(|i| i.group).collect();
    let lr = S::lit(learning_rate);
    let mut head = init;
    let mut trajectory: Vec<LossReport> = Vec::new();
    let mut step = 0;
    for _ in 0..epochs {
        for batch in plan_batches(&groups, batch_size, &mut rng) {
            let (loss, grad) = reading_loss_and_grad(set, &batch, &head)?;
            let l = loss.to_f64_lossy();
            let report = LossReport {
                step,
                l_neg: l,
                l_turn: 0.0,
                l_total: l,
                grad_norm: grad.norm().to_f64_lossy(),
            };
            if !l.is_finite() || l > DIVERGENCE_LIMIT {
                trajectory.push(report);
                return Err(Error::Diverged { step, trajectory });
            }
            trajectory.push(report);
            for role in crate::encoder::HeadRole::ALL {
                head.matrix_mut(role).sub_scaled(lr, grad.matrix(role));
            }
            step += 1;
        }
    }
    Ok(TrainOutcome { head, trajectory })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{DualVec, HeadRole};
    use rand::Rng;

    fn random_set(rng: &mut ChaCha8Rng, d: usize) -> ReadingSet<f64> {
        let mut v = || DualVec {
            start: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            end: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        let passages = vec![(0..5).map(|_| v()).collect(), (0..3).map(|_| v()).collect()];
        let items = (0..3)
            .map(|i| ReadingItem {
                id: i.to_string(),
                group: i,
                ctx: v(),
                passage: i % 2,
                positive: i,
            })
            .collect();
        ReadingSet { passages, items }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 4;
        let set = random_set(&mut rng, d);
        let mut head = ProjectionHead::<f64>::zeros(d);
        for role in HeadRole::ALL {
            for x in head.matrix_mut(role).as_mut_slice() {
                *x = rng.gen_range(-1.0..1.0);
            }
        }
        let batch = [0, 1, 2];
        let (_, grad) = reading_loss_and_grad(&set, &batch, &head).unwrap();
        let h = 1e-5;
        for role in HeadRole::ALL {
            for k in 0..d * d {
                let mut plus = head.clone();
                plus.matrix_mut(role).as_mut_slice()[k] += h;
                let mut minus = head.clone();
                minus.matrix_mut(role).as_mut_slice()[k] -= h;
                let lp = reading_loss_and_grad(&set, &batch, &plus).unwrap().0;
                let lm = reading_loss_and_grad(&set, &batch, &minus).unwrap().0;
                let fd = (lp - lm) / (2.0 * h);
                let an = grad.matrix(role).as_slice()[k];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "{role:?}[{k}] {fd} vs {an}");
            }
        }
    }

    #[test]
    fn uniform_scores_give_log_span_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let set = random_set(&mut rng, 3);
        let (l, g) = reading_loss_and_grad(&set, &[0], &ProjectionHead::zeros(3)).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
        assert_eq!(g.norm(), 0.0);
    }
}
