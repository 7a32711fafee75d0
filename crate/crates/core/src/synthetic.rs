//! Generator for a small planted conversational benchmark.
//!
//! Each topic owns a disjoint vocabulary of entity names and answer words.
//! An entity's facts are spread over several passages of its topic, and each
//! passage holds facts about several entities, so a passage cannot be picked
//! out by entity name alone. Facts read `the <relation> of <entity> is <answer> .`
//! while questions name the relation with a different word, so relation
//! matching has to be learned.
//!
//! Conversations stay within one topic. Turn 1 names the entity and the
//! relation; later turns either ask another relation of the same entity
//! ("what about its ...") or keep the relation and switch entity
//! ("what about ...").

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ConversationTurn, Passage};
use crate::error::{Error, Result};

/// (passage word, question word) per relation.
pub const RELATIONS: [(&str, &str); 8] = [
    ("founder", "creator"),
    ("capital", "seat"),
    ("currency", "money"),
    ("anthem", "song"),
    ("river", "waterway"),
    ("mascot", "emblem"),
    ("motto", "slogan"),
    ("ruler", "monarch"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub topics: usize,
    pub passages_per_topic: usize,
    /// Facts per passage; also the number of passages each entity appears in.
    pub facts_per_passage: usize,
    pub conversations: usize,
    pub turns: usize,
    /// Probability that a later turn switches entity.
    pub shift_rate: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 7,
            topics: 20,
            passages_per_topic: 10,
            facts_per_passage: 6,
            conversations: 50,
            turns: 3,
            shift_rate: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fact {
    pub topic: usize,
    pub entity: usize,
    pub relation: usize,
    pub passage_id: String,
    pub answer: String,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub passages: Vec<Passage>,
    pub facts: Vec<Fact>,
    /// Entity display names, `[topic][entity]`.
    pub entities: Vec<Vec<String>>,
    pub conversations: Vec<ConversationTurn>,
}

const ONSETS: [&str; 16] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "th",
];
const NUCLEI: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];
const CODAS: [&str; 5] = ["", "n", "r", "l", "s"];

struct WordMint {
    used: HashSet<String>,
}

impl WordMint {
    fn new() -> Self {
        let mut used = HashSet::new();
        for w in [
            "the", "of", "is", "what", "about", "its", "a", "an", "and", "sun", "tin",
        ] {
            used.insert(w.to_string());
        }
        for (p, q) in RELATIONS {
            used.insert(p.to_string());
            used.insert(q.to_string());
        }
        WordMint { used }
    }

    fn mint(&mut self, rng: &mut ChaCha8Rng) -> String {
        loop {
            let syllables = rng.gen_range(2..=3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(ONSETS[rng.gen_range(0..ONSETS.len())]);
                w.push_str(NUCLEI[rng.gen_range(0..NUCLEI.len())]);
            }
            w.push_str(CODAS[rng.gen_range(0..CODAS.len())]);
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }

    fn mint_n(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
        (0..n).map(|_| self.mint(rng)).collect()
    }
}

fn validate(c: &SyntheticConfig) -> Result<()> {
    let ok = c.topics >= 1
        && c.passages_per_topic >= 1
        && (1..=c.passages_per_topic).contains(&c.facts_per_passage)
        && c.facts_per_passage <= RELATIONS.len()
        && c.turns >= 1
        && (0.0..=1.0).contains(&c.shift_rate);
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("invalid synthetic config {c:?}")))
    }
}

/// Builds the corpus, its facts and the conversations.
pub fn generate(config: &SyntheticConfig) -> Result<SyntheticData> {
    validate(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut mint = WordMint::new();
    let n_ent = config.passages_per_topic;
    let k = config.facts_per_passage;
    // enough answer words for a distinct (first, last) pair per fact
    let pool = ((n_ent * k) as f64).sqrt().ceil() as usize + 1;

    let mut passages = Vec::new();
    let mut facts = Vec::new();
    let mut entities = Vec::new();
    for topic in 0..config.topics {
        let given = mint.mint_n(4, &mut rng);
        let family = mint.mint_n(n_ent.div_ceil(4) + 1, &mut rng);
        let mut names: Vec<(usize, usize)> = (0..given.len())
            .flat_map(|g| (0..family.len()).map(move |f| (g, f)))
            .collect();
        names.shuffle(&mut rng);
        let names: Vec<String> = names[..n_ent]
            .iter()
            .map(|&(g, f)| format!("{} {}", given[g], family[f]))
            .collect();

        let firsts = mint.mint_n(pool, &mut rng);
        let lasts = mint.mint_n(pool, &mut rng);
        let mut answers: Vec<String> = firsts
            .iter()
            .flat_map(|a| lasts.iter().map(move |b| format!("{a} {b}")))
            .collect();
        answers.shuffle(&mut rng);
        let mut answers = answers.into_iter();

        // entity e appears in passages e, e+1, ..., e+k-1 (mod n)
        let relations: Vec<Vec<usize>> = (0..n_ent)
            .map(|_| {
                let mut r: Vec<usize> = (0..RELATIONS.len()).collect();
                r.shuffle(&mut rng);
                r.truncate(k);
                r
            })
            .collect();
        for p in 0..config.passages_per_topic {
            let passage_id = format!("t{topic:02}-p{p:02}");
            let mut members: Vec<(usize, usize)> = (0..k)
                .map(|j| {
                    let e = (p + n_ent - j) % n_ent;
                    (e, relations[e][j])
                })
                .collect();
            members.shuffle(&mut rng);
            let mut sentences = Vec::new();
            for (e, r) in members {
                let answer = answers.next().expect("answer pool covers every fact");
                sentences.push(format!("the {} of {} is {} .", RELATIONS[r].0, names[e], answer));
                facts.push(Fact {
                    topic,
                    entity: e,
                    relation: r,
                    passage_id: passage_id.clone(),
                    answer,
                });
            }
            passages.push(Passage::new(
                passage_id,
                format!("{} records {p}", given[0]),
                sentences.join(" "),
            ));
        }
        entities.push(names);
    }

    let conversations = conversations(config, &facts, &entities, &mut rng);
    Ok(SyntheticData {
        passages,
        facts,
        entities,
        conversations,
    })
}

fn conversations(
    config: &SyntheticConfig,
    facts: &[Fact],
    entities: &[Vec<String>],
    rng: &mut ChaCha8Rng,
) -> Vec<ConversationTurn> {
    let mut out = Vec::new();
    for c in 0..config.conversations {
        let topic = c % config.topics;
        let topic_facts: Vec<&Fact> = facts.iter().filter(|f| f.topic == topic).collect();
        let id = format!("t{topic:02}-c{c:03}");
        let mut current = *topic_facts.choose(rng).expect("topic has facts");
        let mut asked: Vec<&Fact> = vec![current];
        let mut question = format!(
            "what is the {} of {} ?",
            RELATIONS[current.relation].1, entities[topic][current.entity]
        );
        for turn in 1..=config.turns {
            if turn > 1 {
                let same_entity: Vec<&Fact> = topic_facts
                    .iter()
                    .copied()
                    .filter(|f| f.entity == current.entity && !asked.contains(f))
                    .collect();
                let same_relation: Vec<&Fact> = topic_facts
                    .iter()
                    .copied()
                    .filter(|f| f.relation == current.relation && f.entity != current.entity && !asked.contains(f))
                    .collect();
                let shift = !same_relation.is_empty() && (same_entity.is_empty() || rng.gen_bool(config.shift_rate));
                if shift {
                    current = same_relation.choose(rng).expect("non-empty");
                    question = format!("what about {} ?", entities[topic][current.entity]);
                } else if let Some(f) = same_entity.choose(rng) {
                    current = f;
                    question = format!("what about its {} ?", RELATIONS[current.relation].1);
                } else {
                    break;
                }
                asked.push(current);
            }
            out.push(ConversationTurn {
                conversation_id: id.clone(),
                turn_index: turn as u32,
                question: question.clone(),
                gold_answer: current.answer.clone(),
                gold_passage_id: Some(current.passage_id.clone()),
            });
        }
    }
    out
}

/// First topic of the held-out split used for transfer experiments.
pub const HELD_OUT_FROM: usize = 15;

/// Description of a committed benchmark fixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureManifest {
    pub config: SyntheticConfig,
    pub passages: usize,
    pub conversations: usize,
    pub turns: usize,
    /// Conversations on these topics form the held-out split.
    pub held_out_topics: Vec<usize>,
    /// Top-1 EM of the default-trained head, measured when the fixture was made.
    pub reference_em: f64,
    /// Minimum top-1 EM a default-trained head must reach.
    pub em_threshold: f64,
}

/// Whether a synthetic conversation id belongs to the held-out split.
pub fn is_held_out(conversation_id: &str) -> bool {
    conversation_id
        .strip_prefix('t')
        .and_then(|r| r.split('-').next())
        .and_then(|t| t.parse::<usize>().ok())
        .is_some_and(|t| t >= HELD_OUT_FROM)
}

/// Fixture-style JSONL for a list of turns.
pub fn turns_jsonl(turns: &[ConversationTurn]) -> String {
    turns
        .iter()
        .map(|t| serde_json::to_string(t).expect("turn serializes") + "\n")
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Corpus;

    #[test]
    fn default_shape() {
        let d = generate(&SyntheticConfig::default()).unwrap();
        assert_eq!(d.passages.len(), 200);
        assert_eq!(d.conversations.len(), 150);
        assert_eq!(d.facts.len(), 200 * 6);
        let answers: HashSet<&str> = d.facts.iter().map(|f| f.answer.as_str()).collect();
        assert_eq!(answers.len(), d.facts.len());
    }

    #[test]
    fn every_gold_answer_sits_in_its_gold_passage() {
        let d = generate(&SyntheticConfig::default()).unwrap();
        let corpus = Corpus::from_passages(d.passages.clone()).unwrap();
        for t in &d.conversations {
            let p = corpus.get(t.gold_passage_id.as_deref().unwrap()).unwrap();
            assert!(p.find_answer(&t.gold_answer, 20).is_some(), "{t:?}");
        }
    }

    #[test]
    fn topics_have_disjoint_vocabulary() {
        let d = generate(&SyntheticConfig::default()).unwrap();
        let shared: HashSet<&str> = ["the", "of", "is", "."]
            .into_iter()
            .chain(RELATIONS.iter().map(|r| r.0))
            .collect();
        let mut owner: std::collections::HashMap<&str, &str> = Default::default();
        for p in &d.passages {
            let topic = &p.passage_id[..3];
            for w in p.text.split_whitespace().filter(|w| !shared.contains(w)) {
                assert_eq!(*owner.entry(w).or_insert(topic), topic, "{w}");
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&SyntheticConfig::default()).unwrap();
        let b = generate(&SyntheticConfig::default()).unwrap();
        assert_eq!(a.passages, b.passages);
        assert_eq!(a.conversations, b.conversations);
        let c = generate(&SyntheticConfig {
            seed: 8,
            ..SyntheticConfig::default()
        })
        .unwrap();
        assert_ne!(a.passages, c.passages);
    }
}
