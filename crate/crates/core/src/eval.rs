//! Answer metrics, retrieval metrics and latency benchmarking.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ranks at which top-k accuracy is reported.
pub const TOP_K_LEVELS: [usize; 4] = [1, 5, 10, 20];
pub const DEFAULT_WARMUP: usize = 2;
pub const DEFAULT_REPS: usize = 5;
pub const MIN_BENCH_QUESTIONS: usize = 10;

/// Lowercase, drop punctuation, drop the articles a/an/the, collapse
/// whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase();
    let no_punct: String = lowered.chars().filter(|c| !is_punctuation(*c)).collect();
    no_punct
        .split_whitespace()
        .filter(|t| !matches!(*t, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
}

pub fn exact_match(prediction: &str, gold: &str) -> f64 {
    if normalize_answer(prediction) == normalize_answer(gold) {
        1.0
    } else {
        0.0
    }
}

pub fn f1_score(prediction: &str, gold: &str) -> f64 {
    let p = normalize_answer(prediction);
    let g = normalize_answer(gold);
    let pt: Vec<&str> = p.split_whitespace().collect();
    let gt: Vec<&str> = g.split_whitespace().collect();
    if pt.is_empty() || gt.is_empty() {
        return if pt.is_empty() && gt.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gt {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &pt {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pt.len() as f64;
    let recall = common as f64 / gt.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub top_k_accuracy: BTreeMap<usize, f64>,
    pub mrr: f64,
    pub precision: f64,
    pub evaluated: usize,
    /// Questions without a gold passage id.
    pub excluded: usize,
}

/// Single-gold retrieval metrics. `ranked[q]` is the ranked passage list
/// for question `q`; questions with no gold id are excluded and counted.
pub fn retrieval_metrics(ranked: &[Vec<String>], gold: &[Option<String>], cutoff: usize) -> Result<RetrievalMetrics> {
    if cutoff == 0 {
        return Err(Error::Config("cutoff must be at least 1".into()));
    }
    if ranked.len() != gold.len() {
        return Err(Error::Validation(format!(
            "{} rankings for {} gold labels",
            ranked.len(),
            gold.len()
        )));
    }
    let mut hits: BTreeMap<usize, usize> = TOP_K_LEVELS.iter().map(|&k| (k, 0)).collect();
    let mut rr = 0.0;
    let mut prec = 0.0;
    let mut evaluated = 0;
    let mut excluded = 0;
    for (r, g) in ranked.iter().zip(gold) {
        let Some(g) = g else {
            excluded += 1;
            continue;
        };
        evaluated += 1;
        let rank = r.iter().position(|p| p == g).map(|i| i + 1);
        for (k, h) in hits.iter_mut() {
            if rank.is_some_and(|rk| rk <= *k) {
                *h += 1;
            }
        }
        if let Some(rk) = rank.filter(|&rk| rk <= cutoff) {
            rr += 1.0 / rk as f64;
            prec += 1.0 / cutoff as f64;
        }
    }
    let denom = evaluated.max(1) as f64;
    Ok(RetrievalMetrics {
        top_k_accuracy: hits.into_iter().map(|(k, h)| (k, h as f64 / denom)).collect(),
        mrr: rr / denom,
        precision: prec / denom,
        evaluated,
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    pub f1: f64,
    pub em: f64,
    pub top_k_accuracy: BTreeMap<usize, f64>,
    pub mrr_at_10: f64,
    pub precision_at_10: f64,
    pub n_questions: usize,
    pub excluded_from_retrieval: usize,
}

impl EvalReport {
    /// Averages answer metrics over `(prediction, gold)` pairs and attaches
    /// retrieval metrics.
    pub fn from_parts(system: &str, answers: &[(String, String)], retrieval: &RetrievalMetrics) -> Self {
        let n = answers.len();
        let denom = n.max(1) as f64;
        EvalReport {
            system: system.to_string(),
            f1: answers.iter().map(|(p, g)| f1_score(p, g)).sum::<f64>() / denom,
            em: answers.iter().map(|(p, g)| exact_match(p, g)).sum::<f64>() / denom,
            top_k_accuracy: retrieval.top_k_accuracy.clone(),
            mrr_at_10: retrieval.mrr,
            precision_at_10: retrieval.precision,
            n_questions: n,
            excluded_from_retrieval: retrieval.excluded,
        }
    }

    pub const TSV_HEADER: &'static str = "system\tF1\tEM\tTop-1\tTop-5\tTop-10\tTop-20\tMRR@10\tP@10\tN";

    pub fn tsv_row(&self) -> String {
        let top = |k: usize| self.top_k_accuracy.get(&k).copied().unwrap_or(0.0) * 100.0;
        format!(
            "{}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{}",
            self.system,
            self.f1 * 100.0,
            self.em * 100.0,
            top(1),
            top(5),
            top(10),
            top(20),
            self.mrr_at_10 * 100.0,
            self.precision_at_10 * 100.0,
            self.n_questions
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemLatency {
    pub system: String,
    /// Median seconds for one pass over all questions.
    pub median_seconds: Option<f64>,
    pub relative_time: Option<f64>,
    pub questions_per_sec: Option<f64>,
    /// Fastest system; the one others are normalized to.
    pub baseline: bool,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub n_questions: usize,
    pub warmup: usize,
    pub repetitions: usize,
    pub systems: Vec<SystemLatency>,
}

impl LatencyReport {
    pub const TSV_HEADER: &'static str = "system\tRelative Time\t#Q/sec";

    pub fn get(&self, system: &str) -> Option<&SystemLatency> {
        self.systems.iter().find(|s| s.system == system)
    }

    pub fn tsv_rows(&self) -> Vec<String> {
        self.systems
            .iter()
            .map(|s| match (s.relative_time, s.questions_per_sec) {
                (Some(r), Some(q)) => format!("{}\t{:.2}\t{:.2}", s.system, r, q),
                _ => format!("{}\tfailed\tfailed", s.system),
            })
            .collect()
    }
}

pub type AnswerFn<'a, Q> = Box<dyn Fn(&Q) -> Result<String> + Send + Sync + 'a>;

/// A named system that answers one question per call.
pub struct BenchSystem<'a, Q> {
    pub name: String,
    pub answer: AnswerFn<'a, Q>,
}

impl<'a, Q> BenchSystem<'a, Q> {
    pub fn new(name: impl Into<String>, answer: impl Fn(&Q) -> Result<String> + Send + Sync + 'a) -> Self {
        BenchSystem {
            name: name.into(),
            answer: Box::new(answer),
        }
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn time_system<Q>(system: &BenchSystem<'_, Q>, questions: &[Q], warmup: usize, reps: usize) -> Result<f64> {
    for _ in 0..warmup {
        for q in questions {
            (system.answer)(q)?;
        }
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        for q in questions {
            std::hint::black_box((system.answer)(q)?);
        }
        times.push(t0.elapsed().as_secs_f64());
    }
    Ok(median(times))
}

/// Times each system sequentially over all questions, inside a one-thread
/// pool so no system fans out across cores. A system that fails on any
/// question is reported as failed; the rest are still measured.
pub fn bench_latency<Q: Sync>(
    systems: &[BenchSystem<'_, Q>],
    questions: &[Q],
    warmup: usize,
    repetitions: usize,
) -> Result<LatencyReport> {
    if systems.is_empty() {
        return Err(Error::Config("at least one system is required".into()));
    }
    if questions.len() < MIN_BENCH_QUESTIONS {
        return Err(Error::Config(format!(
            "at least {MIN_BENCH_QUESTIONS} questions are required, got {}",
            questions.len()
        )));
    }
    if warmup < DEFAULT_WARMUP || repetitions < DEFAULT_REPS {
        return Err(Error::Config(format!(
            "need warmup >= {DEFAULT_WARMUP} and repetitions >= {DEFAULT_REPS}"
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Config(format!("cannot build benchmark thread pool: {e}")))?;
    let measured: Vec<std::result::Result<f64, String>> = pool.install(|| {
        systems
            .iter()
            .map(|s| time_system(s, questions, warmup, repetitions).map_err(|e| e.to_string()))
            .collect()
    });
    let fastest = measured
        .iter()
        .filter_map(|m| m.as_ref().ok())
        .copied()
        .fold(f64::INFINITY, f64::min);
    let mut baseline_taken = false;
    let rows = systems
        .iter()
        .zip(measured)
        .map(|(s, m)| match m {
            Ok(t) => {
                let t = t.max(f64::MIN_POSITIVE);
                let baseline = !baseline_taken && t == fastest.max(f64::MIN_POSITIVE);
                baseline_taken |= baseline;
                SystemLatency {
                    system: s.name.clone(),
                    median_seconds: Some(t),
                    relative_time: Some(t / fastest.max(f64::MIN_POSITIVE)),
                    questions_per_sec: Some(questions.len() as f64 / t),
                    baseline,
                    failure: None,
                }
            }
            Err(e) => SystemLatency {
                system: s.name.clone(),
                median_seconds: None,
                relative_time: None,
                questions_per_sec: None,
                baseline: false,
                failure: Some(e),
            },
        })
        .collect();
    Ok(LatencyReport {
        n_questions: questions.len(),
        warmup,
        repetitions,
        systems: rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Duration;

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_answer("The Beatles!"), "beatles");
        assert_eq!(normalize_answer(""), "");
        assert_eq!(normalize_answer("a b"), "b");
        assert_eq!(normalize_answer("  An   apple, the pie. "), "apple pie");
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1_score("x y", "x y"), 1.0);
        assert!((f1_score("the cat sat", "cat") - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(f1_score("dog", "cat"), 0.0);
        assert_eq!(f1_score("", ""), 1.0);
        assert_eq!(f1_score("the", "cat"), 0.0);
        // multiset: a repeated prediction token counts once per gold copy
        assert!((f1_score("cat cat", "cat") - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn em_examples() {
        assert_eq!(exact_match("The Cat", "cat"), 1.0);
        assert_eq!(exact_match("cats", "cat"), 0.0);
        assert_eq!(exact_match("", ""), 1.0);
    }

    fn ids(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn retrieval_examples() {
        let m = retrieval_metrics(&[ids(&["a", "b", "g"])], &[Some("g".into())], 10).unwrap();
        assert!((m.mrr - 1.0 / 3.0).abs() < 1e-15);
        assert!((m.precision - 0.1).abs() < 1e-15);
        assert_eq!(m.top_k_accuracy[&1], 0.0);
        assert_eq!(m.top_k_accuracy[&5], 1.0);

        let all_first = retrieval_metrics(
            &[ids(&["g", "x"]), ids(&["h"])],
            &[Some("g".into()), Some("h".into())],
            10,
        )
        .unwrap();
        assert_eq!(all_first.top_k_accuracy[&1], 1.0);
        assert_eq!(all_first.mrr, 1.0);

        let missing = retrieval_metrics(&[ids(&["a"]), ids(&["b"])], &[None, Some("z".into())], 10).unwrap();
        assert_eq!((missing.evaluated, missing.excluded), (1, 1));
        assert_eq!(missing.mrr, 0.0);
        assert_eq!(missing.precision, 0.0);
    }

    #[test]
    fn gold_beyond_cutoff_scores_zero() {
        let m = retrieval_metrics(&[ids(&["a", "b", "g"])], &[Some("g".into())], 2).unwrap();
        assert_eq!((m.mrr, m.precision), (0.0, 0.0));
        assert!(retrieval_metrics(&[], &[], 0).is_err());
    }

    #[test]
    fn single_system_is_its_own_baseline() {
        let qs: Vec<usize> = (0..10).collect();
        let sys = [BenchSystem::new("only", |q: &usize| Ok(q.to_string()))];
        let r = bench_latency(&sys, &qs, 2, 5).unwrap();
        assert_eq!(r.systems[0].relative_time, Some(1.0));
        assert!(r.systems[0].baseline);
        assert!(r.systems[0].questions_per_sec.unwrap() > 0.0);
    }

    #[test]
    fn slower_system_measures_slower_and_failures_are_isolated() {
        let qs: Vec<usize> = (0..10).collect();
        let sys = [
            BenchSystem::new("fast", |_: &usize| Ok(String::new())),
            BenchSystem::new("slow", |_: &usize| {
                std::thread::sleep(Duration::from_millis(1));
                Ok(String::new())
            }),
            BenchSystem::new("broken", |q: &usize| {
                if *q == 3 {
                    Err(Error::Numeric("boom".into()))
                } else {
                    Ok(String::new())
                }
            }),
        ];
        let r = bench_latency(&sys, &qs, 2, 5).unwrap();
        let fast = r.get("fast").unwrap();
        let slow = r.get("slow").unwrap();
        assert!(fast.baseline && !slow.baseline);
        assert!(slow.relative_time.unwrap() > 1.0);
        assert!(slow.median_seconds.unwrap() >= 0.010);
        assert!(r.get("broken").unwrap().failure.as_deref().unwrap().contains("boom"));
        assert_eq!(r.tsv_rows()[2], "broken\tfailed\tfailed");
    }

    #[test]
    fn bench_preconditions() {
        let few: Vec<usize> = (0..9).collect();
        let sys = [BenchSystem::new("s", |_: &usize| Ok(String::new()))];
        assert!(bench_latency(&sys, &few, 2, 5).is_err());
        let qs: Vec<usize> = (0..10).collect();
        assert!(bench_latency(&sys, &qs, 1, 5).is_err());
        assert!(bench_latency::<usize>(&[], &qs, 2, 5).is_err());
    }
}
