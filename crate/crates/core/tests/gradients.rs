//! Loss values against direct summation and gradients against central
//! differences.

mod common;

use phraseforge::encoder::{DualVec, ProjectionHead};
use phraseforge::training::{grad_head, loss_neg, loss_total, loss_turn, train, Batch, PreBatchQueue, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{random_batch, random_head, random_queue, worst_gradient_error};

fn matvec(m: &[f64], x: &[f64]) -> Vec<f64> {
    let d = x.len();
    (0..d).map(|r| (0..d).map(|c| m[r * d + c] * x[c]).sum()).collect()
}

fn project(m_start: &[f64], m_end: &[f64], v: &DualVec<f64>) -> (Vec<f64>, Vec<f64>) {
    (matvec(m_start, &v.start), matvec(m_end, &v.end))
}

fn score(a: &(Vec<f64>, Vec<f64>), b: &(Vec<f64>, Vec<f64>)) -> f64 {
    let mut s = 0.0;
    for i in 0..a.0.len() {
        s += a.0[i] * b.0[i];
    }
    for i in 0..a.1.len() {
        s += a.1[i] * b.1[i];
    }
    s
}

/// `-log softmax(z)[target]` the long way.
fn nll(z: &[f64], target: usize) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|x| (x - m).exp()).sum();
    -(z[target] - m - sum.ln())
}

fn oracle_neg(batch: &Batch<f64>, queue: &PreBatchQueue<f64>, head: &ProjectionHead<f64>) -> f64 {
    let (qs, qe) = (head.query_start.as_slice(), head.query_end.as_slice());
    let (ps, pe) = (head.phrase_start.as_slice(), head.phrase_end.as_slice());
    let u: Vec<_> = batch.examples.iter().map(|e| project(qs, qe, &e.ctx)).collect();
    let v: Vec<_> = batch.examples.iter().map(|e| project(ps, pe, &e.positive)).collect();
    let queued: Vec<_> = queue.iter().map(|q| (q.start.clone(), q.end.clone())).collect();
    let mut total = 0.0;
    for (i, ui) in u.iter().enumerate() {
        let mut z: Vec<f64> = v.iter().map(|vj| score(ui, vj)).collect();
        z.extend(queued.iter().map(|q| score(ui, q)));
        total += nll(&z, i);
    }
    total / u.len() as f64
}

fn oracle_turn(batch: &Batch<f64>, head: &ProjectionHead<f64>) -> f64 {
    let (qs, qe) = (head.query_start.as_slice(), head.query_end.as_slice());
    let u: Vec<_> = batch.examples.iter().map(|e| project(qs, qe, &e.ctx)).collect();
    let mut total = 0.0;
    let mut eligible = 0;
    for (i, e) in batch.examples.iter().enumerate() {
        let Some(prev) = &e.prev else { continue };
        let w = project(qs, qe, prev);
        let z: Vec<f64> = u.iter().map(|uj| score(uj, &w)).collect();
        total += nll(&z, i);
        eligible += 1;
    }
    total / eligible as f64
}

#[test]
fn phrase_loss_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for c in [0, 1, 2] {
        let batch = random_batch(&mut rng, 4, 8);
        let queue = random_queue(&mut rng, c, 4, 8);
        let head = random_head(&mut rng, 8, 0.5);
        let got = loss_neg(&batch, &queue, &head).unwrap();
        assert!((got - oracle_neg(&batch, &queue, &head)).abs() < 1e-9);
    }
}

#[test]
fn turn_loss_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let batch = random_batch(&mut rng, 4, 8);
    let head = random_head(&mut rng, 8, 0.5);
    let got = loss_turn(&batch, &head).unwrap();
    assert_eq!(got.eligible, 2);
    assert!((got.value - oracle_turn(&batch, &head)).abs() < 1e-9);
}

#[test]
fn identical_contexts_give_log_batch_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut batch = random_batch(&mut rng, 4, 8);
    let shared = batch.examples[0].ctx.clone();
    for e in &mut batch.examples {
        e.ctx = shared.clone();
    }
    let t = loss_turn(&batch, &random_head(&mut rng, 8, 0.5)).unwrap();
    assert!((t.value - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn joint_loss_is_the_weighted_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let batch = random_batch(&mut rng, 4, 8);
    let queue = random_queue(&mut rng, 1, 4, 8);
    let head = random_head(&mut rng, 8, 0.5);
    let neg = oracle_neg(&batch, &queue, &head);
    let turn = oracle_turn(&batch, &head);
    let r = loss_total(&batch, &queue, &head, 2.0, 1.0).unwrap();
    assert!((r.l_total - (2.0 * neg + turn)).abs() < 1e-9);
    let r0 = loss_total(&batch, &queue, &head, 3.0, 0.0).unwrap();
    assert_eq!(r0.l_total, 3.0 * r0.l_neg);
    assert_eq!(r0.l_turn, 0.0);
}

#[test]
fn saturated_softmax_has_vanishing_gradient() {
    // orthogonal one-hot features: each context sees only its own phrase
    // and its own previous turn
    let d = 4;
    let one_hot = |i: usize| {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        DualVec {
            start: v.clone(),
            end: v,
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let mut batch = random_batch(&mut rng, 4, d);
    for (i, e) in batch.examples.iter_mut().enumerate() {
        e.ctx = one_hot(i);
        e.positive = one_hot(i);
        e.prev = Some(one_hot(i));
    }
    let head = ProjectionHead::<f64>::identity(d).scaled(5.0);
    // scores are 2 * 25 = 50 for the positive and 0 for every negative
    let g = grad_head(&batch, &PreBatchQueue::new(0), &head, 1.0, 1.0).unwrap();
    assert!(g.norm() < 1e-10, "gradient norm {}", g.norm());
}

#[test]
fn small_instance_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    let batch = random_batch(&mut rng, 4, 8);
    let queue = random_queue(&mut rng, 1, 4, 8);
    let head = random_head(&mut rng, 8, 0.5);
    let worst = worst_gradient_error(&batch, &queue, &head, 2.0, 1.0, 1e-4, 1e-8);
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn gradients_hold_away_from_identity() {
    // larger heads push the softmax toward saturation, where errors would show
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    for spread in [0.1, 1.0, 2.0] {
        let batch = random_batch(&mut rng, 4, 8);
        let queue = random_queue(&mut rng, 2, 4, 8);
        let head = random_head(&mut rng, 8, spread);
        let worst = worst_gradient_error(&batch, &queue, &head, 4.0, 1.0, 1e-4, 1e-8);
        assert!(worst < 1e-4, "spread {spread}: worst relative error {worst}");
    }
}

#[test]
fn same_seed_gives_identical_trajectories() {
    let mut rng = ChaCha8Rng::seed_from_u64(38);
    let examples = random_batch(&mut rng, 12, 8).examples;
    let config = TrainConfig {
        dim: 8,
        epochs: 3,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let a = train(&examples, ProjectionHead::identity(8), &config).unwrap();
    let b = train(&examples, ProjectionHead::identity(8), &config).unwrap();
    assert_eq!(a.head, b.head);
    assert_eq!(a.trajectory.len(), b.trajectory.len());
    for (x, y) in a.trajectory.iter().zip(&b.trajectory) {
        assert_eq!(x.l_total.to_bits(), y.l_total.to_bits());
        assert_eq!(x.grad_norm.to_bits(), y.grad_norm.to_bits());
    }
}
