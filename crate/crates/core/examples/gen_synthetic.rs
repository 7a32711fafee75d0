//! Regenerates the committed synthetic benchmark and measures the reference
//! EM recorded in its manifest.
//!
//!     cargo run --release --example gen_synthetic -- crates/core/fixtures/synthetic

use std::fs;
use std::path::PathBuf;

use phraseforge::corpus::Corpus;
use phraseforge::encoder::{Featurizer, ProjectionHead};
use phraseforge::index::build_index;
use phraseforge::qa::{answer_conversations, exact_match_rate, HistoryMode, SingleStage};
use phraseforge::synthetic::{generate, turns_jsonl, FixtureManifest, SyntheticConfig, HELD_OUT_FROM};
use phraseforge::training::{fit, TrainConfig};

fn main() -> phraseforge::Result<()> {
    let dir: PathBuf = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "fixtures/synthetic".into())
        .into();
    fs::create_dir_all(&dir).expect("create fixture dir");
    let config = SyntheticConfig::default();
    let data = generate(&config)?;
    let corpus = Corpus::from_passages(data.passages.clone())?;
    fs::write(dir.join("corpus.jsonl"), corpus.to_jsonl()).expect("write corpus");
    fs::write(dir.join("conversations.jsonl"), turns_jsonl(&data.conversations)).expect("write conversations");

    let train = TrainConfig::default();
    let provider = Featurizer::new(train.dim, train.seed)?;
    let out = fit::<f64>(
        &data.conversations,
        &corpus,
        &provider,
        ProjectionHead::identity(train.dim),
        &train,
    )?;
    let index = build_index(&corpus, &out.head, &provider, train.max_phrase_len)?;
    let system = SingleStage {
        index: &index,
        head: &out.head,
        provider: &provider,
        k: 1,
    };
    let preds = answer_conversations(&system, &data.conversations, train.context_tokens, HistoryMode::Gold)?;
    let em = exact_match_rate(&preds);
    let manifest = FixtureManifest {
        passages: data.passages.len(),
        conversations: phraseforge::corpus::conversations(&data.conversations).len(),
        turns: data.conversations.len(),
        held_out_topics: (HELD_OUT_FROM..config.topics).collect(),
        reference_em: em,
        em_threshold: ((em - 0.05) * 100.0).floor() / 100.0,
        config,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    fs::write(dir.join("manifest.json"), &text).expect("write manifest");
    print!("{text}");
    Ok(())
}
