//! Corpora, conversational datasets, candidate phrase spans and the
//! serialized conversational context fed to the query encoder.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Boundary marker placed between the parts of a serialized context.
pub const SEP: &str = " [SEP] ";

pub const DEFAULT_MAX_PHRASE_LEN: usize = 20;
pub const DEFAULT_CONTEXT_TOKENS: usize = 128;

/// One whitespace token and its byte range in the owning text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Splits on Unicode whitespace, keeping byte offsets into `text`.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut start: Option<usize> = None;
    for (i, ch) in text.char_indices() {
        if ch.is_whitespace() {
            if let Some(s) = start.take() {
                tokens.push(Token {
                    text: text[s..i].to_string(),
                    start: s,
                    end: i,
                });
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        tokens.push(Token {
            text: text[s..].to_string(),
            start: s,
            end: text.len(),
        });
    }
    tokens
}

pub fn count_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Passage {
    pub passage_id: String,
    pub title: String,
    pub text: String,
    pub tokens: Vec<Token>,
}

impl Passage {
    pub fn new(passage_id: impl Into<String>, title: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens = tokenize(&text);
        Passage {
            passage_id: passage_id.into(),
            title: title.into(),
            text,
            tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Byte slice covered by tokens `start..=end`.
    pub fn surface(&self, start: usize, end: usize) -> &str {
        &self.text[self.tokens[start].start..self.tokens[end].end]
    }

    pub fn token_texts(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.text.as_str()).collect()
    }

    /// Up to `width` tokens immediately left and right of `start..=end`.
    pub fn window(&self, start: usize, end: usize, width: usize) -> (&str, &str) {
        let left = if start == 0 || width == 0 {
            ""
        } else {
            let from = start.saturating_sub(width);
            &self.text[self.tokens[from].start..self.tokens[start - 1].end]
        };
        let right = if end + 1 >= self.tokens.len() || width == 0 {
            ""
        } else {
            let to = (end + width).min(self.tokens.len() - 1);
            &self.text[self.tokens[end + 1].start..self.tokens[to].end]
        };
        (left, right)
    }

    /// Earliest span whose tokens spell `answer`.
    ///
    /// Case-insensitive token equality is tried first; failing that, the
    /// shortest, then earliest, span whose normalized surface equals the
    /// normalized answer.
    pub fn find_answer(&self, answer: &str, max_phrase_len: usize) -> Option<(usize, usize)> {
        let wanted: Vec<String> = answer.split_whitespace().map(str::to_lowercase).collect();
        if !wanted.is_empty() && wanted.len() <= max_phrase_len {
            let n = wanted.len();
            for s in 0..self.tokens.len().saturating_sub(n - 1) {
                if self.tokens[s..s + n]
                    .iter()
                    .zip(&wanted)
                    .all(|(t, w)| t.text.to_lowercase() == *w)
                {
                    return Some((s, s + n - 1));
                }
            }
        }
        let target = crate::eval::normalize_answer(answer);
        if target.is_empty() {
            return None;
        }
        for len in 1..=max_phrase_len.min(self.tokens.len()) {
            for s in 0..=self.tokens.len() - len {
                if crate::eval::normalize_answer(self.surface(s, s + len - 1)) == target {
                    return Some((s, s + len - 1));
                }
            }
        }
        None
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PassageRecord {
    passage_id: String,
    title: String,
    text: String,
}

pub type Fingerprint = [u8; 32];

#[derive(Debug, Clone)]
pub struct Corpus {
    passages: Vec<Passage>,
    by_id: HashMap<String, usize>,
    fingerprint: Fingerprint,
}

impl Corpus {
    /// Builds a corpus from in-memory passages. The fingerprint is taken over
    /// the canonical line-delimited serialization, so writing the corpus with
    /// [`Corpus::to_jsonl`] and loading it back yields the same fingerprint.
    pub fn from_passages(passages: Vec<Passage>) -> Result<Self> {
        let jsonl = serialize_passages(&passages);
        Self::assemble(passages, fingerprint_bytes(jsonl.as_bytes()))
    }

    fn assemble(passages: Vec<Passage>, fingerprint: Fingerprint) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(passages.len());
        let mut dups = Vec::new();
        for (i, p) in passages.iter().enumerate() {
            if by_id.insert(p.passage_id.clone(), i).is_some() {
                dups.push(p.passage_id.clone());
            }
        }
        if !dups.is_empty() {
            return Err(Error::Validation(format!("duplicate passage_id: {}", dups.join(", "))));
        }
        Ok(Corpus {
            passages,
            by_id,
            fingerprint,
        })
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn get(&self, passage_id: &str) -> Option<&Passage> {
        self.by_id.get(passage_id).map(|&i| &self.passages[i])
    }

    pub fn position(&self, passage_id: &str) -> Option<usize> {
        self.by_id.get(passage_id).copied()
    }

    pub fn fingerprint(&self) -> &Fingerprint {
        &self.fingerprint
    }

    pub fn to_jsonl(&self) -> String {
        serialize_passages(&self.passages)
    }
}

fn serialize_passages(passages: &[Passage]) -> String {
    let mut out = String::new();
    for p in passages {
        let rec = PassageRecord {
            passage_id: p.passage_id.clone(),
            title: p.title.clone(),
            text: p.text.clone(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("passage record serializes"));
        out.push('\n');
    }
    out
}

pub fn fingerprint_bytes(bytes: &[u8]) -> Fingerprint {
    let digest = Sha256::digest(bytes);
    let mut out = [0u8; 32];
    out.copy_from_slice(&digest);
    out
}

fn read_file(path: &Path, what: &str) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(format!("{what} not found: {}", path.display()))
        } else {
            Error::io(path, e)
        }
    })
}

fn records(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let bytes = read_file(path, "corpus")?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: 0,
        message: format!("invalid UTF-8: {e}"),
    })?;
    let mut passages = Vec::new();
    for (line, raw) in records(text) {
        let rec: PassageRecord = serde_json::from_str(raw).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line,
            message: e.to_string(),
        })?;
        passages.push(Passage::new(rec.passage_id, rec.title, rec.text));
    }
    Corpus::assemble(passages, fingerprint_bytes(&bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationTurn {
    pub conversation_id: String,
    pub turn_index: u32,
    pub question: String,
    pub gold_answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_passage_id: Option<String>,
}

/// Loads turns, grouped per conversation in order of first appearance and
/// sorted by `turn_index` within each conversation.
pub fn load_conversations(path: impl AsRef<Path>) -> Result<Vec<ConversationTurn>> {
    let path = path.as_ref();
    let bytes = read_file(path, "conversations")?;
    let text = String::from_utf8_lossy(&bytes);
    let mut turns = Vec::new();
    for (line, raw) in records(&text) {
        let turn: ConversationTurn = serde_json::from_str(raw).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line,
            message: e.to_string(),
        })?;
        turns.push(turn);
    }
    group_turns(turns)
}

/// Groups and validates a flat list of turns.
pub fn group_turns(turns: Vec<ConversationTurn>) -> Result<Vec<ConversationTurn>> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<ConversationTurn>> = HashMap::new();
    for t in turns {
        if !groups.contains_key(&t.conversation_id) {
            order.push(t.conversation_id.clone());
        }
        groups.entry(t.conversation_id.clone()).or_default().push(t);
    }
    let mut out = Vec::new();
    for id in order {
        let mut g = groups.remove(&id).expect("group exists");
        g.sort_by_key(|t| t.turn_index);
        for (expected, t) in (1u32..).zip(&g) {
            if t.turn_index != expected {
                let what = if t.turn_index < expected {
                    format!("duplicate turn {}", t.turn_index)
                } else {
                    format!("gap at turn {expected}")
                };
                return Err(Error::Validation(format!("conversation {id}: {what}")));
            }
        }
        out.extend(g);
    }
    Ok(out)
}

/// Splits grouped turns into per-conversation slices.
pub fn conversations(turns: &[ConversationTurn]) -> Vec<&[ConversationTurn]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=turns.len() {
        if i == turns.len() || turns[i].conversation_id != turns[start].conversation_id {
            if start < i {
                out.push(&turns[start..i]);
            }
            start = i;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhraseSpan {
    pub passage_id: String,
    pub start_token: usize,
    /// Inclusive.
    pub end_token: usize,
    pub surface: String,
}

impl PhraseSpan {
    pub fn from_passage(passage: &Passage, start: usize, end: usize) -> Self {
        PhraseSpan {
            passage_id: passage.passage_id.clone(),
            start_token: start,
            end_token: end,
            surface: passage.surface(start, end).to_string(),
        }
    }

    pub fn len(&self) -> usize {
        self.end_token - self.start_token + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Number of spans [`enumerate_phrase_spans`] yields for `n` tokens.
pub fn span_count(n: usize, max_phrase_len: usize) -> usize {
    (0..n).map(|s| max_phrase_len.min(n - s)).sum()
}

/// All spans of at most `max_phrase_len` tokens, ordered by (start, end).
pub fn enumerate_phrase_spans(passage: &Passage, max_phrase_len: usize) -> Result<Vec<PhraseSpan>> {
    if max_phrase_len < 1 {
        return Err(Error::Config("max_phrase_len must be at least 1".into()));
    }
    let n = passage.len();
    let mut spans = Vec::with_capacity(span_count(n, max_phrase_len));
    for s in 0..n {
        for e in s..(s + max_phrase_len).min(n) {
            spans.push(PhraseSpan::from_passage(passage, s, e));
        }
    }
    Ok(spans)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvContext {
    pub conversation_id: String,
    pub turn_index: u32,
    pub serialized_text: String,
    pub token_budget: usize,
}

impl ConvContext {
    /// A context holding a single question with no history.
    pub fn standalone(question: &str, token_budget: usize) -> Self {
        ConvContext {
            conversation_id: String::new(),
            turn_index: 1,
            serialized_text: question.to_string(),
            token_budget,
        }
    }

    pub fn token_len(&self) -> usize {
        count_tokens(&self.serialized_text)
    }
}

/// Serializes the `turn_index`-th context of one conversation using the gold
/// answers of earlier turns as history.
pub fn build_conv_context(turns: &[ConversationTurn], turn_index: u32, token_budget: usize) -> Result<ConvContext> {
    let answers: Vec<&str> = turns.iter().map(|t| t.gold_answer.as_str()).collect();
    build_conv_context_with_answers(turns, turn_index, token_budget, &answers)
}

/// As [`build_conv_context`], with `answers[k]` standing in for the answer of
/// turn `k + 1`. Used to feed predicted answers back as history.
///
/// History runs most recent first: `q_i SEP q_{i-1} SEP a_{i-1} ... q_1 SEP a_1`.
/// Whole (question, answer) pairs are dropped oldest first until the text fits
/// `token_budget`. The current question is never cut, so a question longer
/// than the budget comes back alone and over budget.
pub fn build_conv_context_with_answers(
    turns: &[ConversationTurn],
    turn_index: u32,
    token_budget: usize,
    answers: &[&str],
) -> Result<ConvContext> {
    let pos = turns
        .iter()
        .position(|t| t.turn_index == turn_index)
        .ok_or_else(|| Error::NotFound(format!("turn {turn_index}")))?;
    let current = &turns[pos];
    let history: Vec<(&str, &str)> = turns
        .iter()
        .filter(|t| t.conversation_id == current.conversation_id && t.turn_index < turn_index)
        .rev()
        .map(|t| {
            let a = answers
                .get(t.turn_index as usize - 1)
                .copied()
                .unwrap_or(t.gold_answer.as_str());
            (t.question.as_str(), a)
        })
        .collect();

    let question_tokens = count_tokens(&current.question);
    let sep_tokens = count_tokens(SEP);
    let mut used = question_tokens;
    let mut keep = 0;
    for (q, a) in &history {
        let cost = 2 * sep_tokens + count_tokens(q) + count_tokens(a);
        if used + cost > token_budget {
            break;
        }
        used += cost;
        keep += 1;
    }

    let mut text = current.question.clone();
    for (q, a) in &history[..keep] {
        text.push_str(SEP);
        text.push_str(q);
        text.push_str(SEP);
        text.push_str(a);
    }
    Ok(ConvContext {
        conversation_id: current.conversation_id.clone(),
        turn_index,
        serialized_text: text,
        token_budget,
    })
}
