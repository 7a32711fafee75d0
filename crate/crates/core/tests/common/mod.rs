#![allow(dead_code)]

use std::path::PathBuf;

use phraseforge::corpus::{load_conversations, load_corpus, ConversationTurn, Corpus, PhraseSpan};
use phraseforge::encoder::{DualVec, HeadRole, ProjectionHead};
use phraseforge::synthetic::FixtureManifest;
use phraseforge::training::{grad_head, loss_total, Batch, EncodedExample, PreBatchQueue};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/synthetic")
}

pub fn load_fixture() -> (Corpus, Vec<ConversationTurn>, FixtureManifest) {
    let dir = fixture_dir();
    let corpus = load_corpus(dir.join("corpus.jsonl")).expect("fixture corpus");
    let turns = load_conversations(dir.join("conversations.jsonl")).expect("fixture conversations");
    let manifest: FixtureManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).expect("fixture manifest"))
            .expect("manifest parses");
    (corpus, turns, manifest)
}

pub fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> DualVec<f64> {
    DualVec {
        start: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        end: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    }
}

pub fn random_head(rng: &mut ChaCha8Rng, d: usize, spread: f64) -> ProjectionHead<f64> {
    let mut h = ProjectionHead::zeros(d);
    for role in HeadRole::ALL {
        for x in h.matrix_mut(role).as_mut_slice() {
            *x = rng.gen_range(-spread..spread);
        }
    }
    h
}

fn dummy_span(i: usize) -> PhraseSpan {
    PhraseSpan {
        passage_id: format!("p{i}"),
        start_token: 0,
        end_token: 0,
        surface: String::new(),
    }
}

/// A batch of `b` examples; every other one has a previous turn.
pub fn random_batch(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Batch<f64> {
    Batch::new(
        (0..b)
            .map(|i| EncodedExample {
                id: format!("e{i}"),
                group: i,
                ctx: random_vec(rng, d),
                positive: random_vec(rng, d),
                prev: (i % 2 == 1 || b == 2).then(|| random_vec(rng, d)),
                positive_span: dummy_span(i),
            })
            .collect(),
    )
}

/// `c` queued batches of `b` random phrase embeddings.
pub fn random_queue(rng: &mut ChaCha8Rng, c: usize, b: usize, d: usize) -> PreBatchQueue<f64> {
    let mut q = PreBatchQueue::new(c);
    for _ in 0..c {
        q.push((0..b).map(|_| random_vec(rng, d)).collect());
    }
    q
}

/// Worst relative error between the analytic gradient and central
/// differences over entries whose analytic magnitude exceeds `floor`.
pub fn worst_gradient_error(
    batch: &Batch<f64>,
    queue: &PreBatchQueue<f64>,
    head: &ProjectionHead<f64>,
    lambda1: f64,
    lambda2: f64,
    h: f64,
    floor: f64,
) -> f64 {
    let grad = grad_head(batch, queue, head, lambda1, lambda2).expect("gradient");
    let loss = |hd: &ProjectionHead<f64>| loss_total(batch, queue, hd, lambda1, lambda2).expect("loss").l_total;
    let mut worst: f64 = 0.0;
    for role in HeadRole::ALL {
        let n = grad.matrix(role).as_slice().len();
        for k in 0..n {
            let an = grad.matrix(role).as_slice()[k];
            if an.abs() <= floor {
                continue;
            }
            let mut plus = head.clone();
            plus.matrix_mut(role).as_mut_slice()[k] += h;
            let mut minus = head.clone();
            minus.matrix_mut(role).as_mut_slice()[k] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            worst = worst.max((fd - an).abs() / an.abs().max(fd.abs()));
        }
    }
    worst
}
