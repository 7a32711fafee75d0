//! End-to-end answering over conversations for both system families.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::Pipeline;
use crate::corpus::{build_conv_context_with_answers, conversations, ConvContext, ConversationTurn};
use crate::encoder::{encode_context, EncoderProvider, ProjectionHead};
use crate::error::Result;
use crate::eval::{retrieval_metrics, EvalReport};
use crate::index::{passages_from_phrases, search_topk, PhraseIndex, RankedPhrase};

/// Which answers fill the history of later turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HistoryMode {
    Gold,
    Predicted,
}

impl std::str::FromStr for HistoryMode {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gold" => Ok(HistoryMode::Gold),
            "predicted" => Ok(HistoryMode::Predicted),
            other => Err(crate::error::Error::Config(format!(
                "unknown history mode {other:?}, expected gold or predicted"
            ))),
        }
    }
}

/// One system answer: the answer text and passages in ranked order.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemAnswer {
    pub answer: String,
    pub passages: Vec<String>,
    pub score: f64,
}

pub trait Answerer: Sync {
    fn answer_context(&self, ctx: &ConvContext) -> Result<SystemAnswer>;
}

/// Phrase retrieval straight from the index.
pub struct SingleStage<'a> {
    pub index: &'a PhraseIndex,
    pub head: &'a ProjectionHead<f64>,
    pub provider: &'a dyn EncoderProvider,
    pub k: usize,
}

impl SingleStage<'_> {
    pub fn search(&self, ctx: &ConvContext) -> Result<Vec<RankedPhrase>> {
        let q = encode_context(ctx, self.head, self.provider)?;
        search_topk(self.index, &q, self.k)
    }
}

impl Answerer for SingleStage<'_> {
    fn answer_context(&self, ctx: &ConvContext) -> Result<SystemAnswer> {
        let ranked = self.search(ctx)?;
        let top = &ranked[0];
        Ok(SystemAnswer {
            answer: top.span.surface.clone(),
            score: top.score,
            passages: passages_from_phrases(&ranked, ranked.len())?,
        })
    }
}

impl Answerer for Pipeline<'_> {
    fn answer_context(&self, ctx: &ConvContext) -> Result<SystemAnswer> {
        let (passages, a) = self.answer(ctx)?;
        Ok(SystemAnswer {
            answer: a.answer,
            score: a.score,
            passages,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnPrediction {
    pub conversation_id: String,
    pub turn_index: u32,
    pub question: String,
    pub context: String,
    pub gold_answer: String,
    pub gold_passage_id: Option<String>,
    pub prediction: String,
    pub score: f64,
    pub passages: Vec<String>,
}

impl TurnPrediction {
    /// Whether the gold passage is among the first `k` ranked passages.
    pub fn gold_in_top(&self, k: usize) -> bool {
        self.gold_passage_id
            .as_ref()
            .is_some_and(|g| self.passages.iter().take(k).any(|p| p == g))
    }
}

/// Answers every turn in order. Conversations run in parallel; turns within
/// one conversation run in sequence so predicted history can accumulate.
pub fn answer_conversations(
    system: &dyn Answerer,
    turns: &[ConversationTurn],
    token_budget: usize,
    history: HistoryMode,
) -> Result<Vec<TurnPrediction>> {
    let per_conv: Vec<Result<Vec<TurnPrediction>>> = conversations(turns)
        .par_iter()
        .map(|conv| {
            let mut predicted: Vec<String> = Vec::with_capacity(conv.len());
            let mut out = Vec::with_capacity(conv.len());
            for t in conv.iter() {
                let answers: Vec<&str> = match history {
                    HistoryMode::Gold => conv.iter().map(|t| t.gold_answer.as_str()).collect(),
                    HistoryMode::Predicted => predicted.iter().map(String::as_str).collect(),
                };
                let ctx = build_conv_context_with_answers(conv, t.turn_index, token_budget, &answers)?;
                let a = system.answer_context(&ctx)?;
                predicted.push(a.answer.clone());
                out.push(TurnPrediction {
                    conversation_id: t.conversation_id.clone(),
                    turn_index: t.turn_index,
                    question: t.question.clone(),
                    context: ctx.serialized_text,
                    gold_answer: t.gold_answer.clone(),
                    gold_passage_id: t.gold_passage_id.clone(),
                    prediction: a.answer,
                    score: a.score,
                    passages: a.passages,
                });
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::with_capacity(turns.len());
    for c in per_conv {
        all.extend(c?);
    }
    Ok(all)
}

pub fn report(system: &str, predictions: &[TurnPrediction], cutoff: usize) -> Result<EvalReport> {
    let ranked: Vec<Vec<String>> = predictions.iter().map(|p| p.passages.clone()).collect();
    let gold: Vec<Option<String>> = predictions.iter().map(|p| p.gold_passage_id.clone()).collect();
    let answers: Vec<(String, String)> = predictions
        .iter()
        .map(|p| (p.prediction.clone(), p.gold_answer.clone()))
        .collect();
    let retrieval = retrieval_metrics(&ranked, &gold, cutoff)?;
    Ok(EvalReport::from_parts(system, &answers, &retrieval))
}

/// Fraction of predictions whose answer matches gold exactly.
pub fn exact_match_rate(predictions: &[TurnPrediction]) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    predictions
        .iter()
        .map(|p| crate::eval::exact_match(&p.prediction, &p.gold_answer))
        .sum::<f64>()
        / predictions.len() as f64
}
