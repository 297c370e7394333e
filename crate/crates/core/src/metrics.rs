//! Answer normalization, VQA accuracy and the aggregate statistics.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datasets::QuestionType;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("no ground-truth annotations")]
    EmptyAnnotations,
    #[error("relative decline needs a positive reference accuracy, got {0}")]
    ZeroDenominator(f64),
    #[error("result sets cover different questions: {0}")]
    IdMismatch(String),
}

/// Which accuracy formula to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricVariant {
    /// `min(0.3 * n, 1)` over all annotations.
    #[default]
    Paper,
    /// Mean of `min(n_others / 3, 1)` over every leave-one-annotator-out subset.
    OfficialSubsets,
}

impl fmt::Display for MetricVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricVariant::Paper => "paper",
            MetricVariant::OfficialSubsets => "official-subsets",
        })
    }
}

impl FromStr for MetricVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper" => Ok(MetricVariant::Paper),
            "official-subsets" | "official_subsets" => Ok(MetricVariant::OfficialSubsets),
            other => Err(format!("unknown metric `{other}`")),
        }
    }
}

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Lowercases, strips punctuation (keeping periods and commas between
/// digits), drops articles and collapses whitespace.
pub fn normalize_answer(s: &str) -> String {
    let chars: Vec<char> = s.trim().to_lowercase().chars().collect();
    let mut kept = String::with_capacity(chars.len());
    for (i, &c) in chars.iter().enumerate() {
        if c.is_alphanumeric() || c.is_whitespace() {
            kept.push(c);
            continue;
        }
        let intra_numeric = (c == '.' || c == ',')
            && i > 0
            && chars[i - 1].is_ascii_digit()
            && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit());
        if intra_numeric {
            kept.push(c);
        }
    }
    kept.split_whitespace()
        .filter(|w| !ARTICLES.contains(w))
        .collect::<Vec<_>>()
        .join(" ")
}

fn clamp_tenths(n: usize) -> f64 {
    // min(0.3 n, 1) computed in tenths so the values are exactly 0.3, 0.6, 0.9.
    (3 * n).min(10) as f64 / 10.0
}

pub fn vqa_accuracy(model_answer: &str, annotations: &[String]) -> Result<f64, MetricError> {
    vqa_accuracy_with(model_answer, annotations, MetricVariant::Paper)
}

pub fn vqa_accuracy_with(
    model_answer: &str,
    annotations: &[String],
    variant: MetricVariant,
) -> Result<f64, MetricError> {
    if annotations.is_empty() {
        return Err(MetricError::EmptyAnnotations);
    }
    let answer = normalize_answer(model_answer);
    let matches: Vec<bool> = annotations
        .iter()
        .map(|a| normalize_answer(a) == answer)
        .collect();
    let n = matches.iter().filter(|m| **m).count();
    Ok(match variant {
        MetricVariant::Paper => clamp_tenths(n),
        MetricVariant::OfficialSubsets => {
            let k = matches.len();
            if k == 1 {
                return Ok(clamp_tenths(n));
            }
            let total: f64 = matches
                .iter()
                .map(|&m| {
                    let others = n - usize::from(m);
                    (others as f64 / 3.0).min(1.0)
                })
                .sum();
            total / k as f64
        }
    })
}

/// `(acc_large - acc_small) / acc_large`.
pub fn relative_decline(acc_large: f64, acc_small: f64) -> Result<f64, MetricError> {
    if acc_large.is_nan() || acc_large <= 0.0 {
        return Err(MetricError::ZeroDenominator(acc_large));
    }
    Ok((acc_large - acc_small) / acc_large)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyResult {
    pub per_question: BTreeMap<String, f64>,
    pub mean: f64,
    pub n_evaluated: usize,
    pub n_errored: usize,
}

impl AccuracyResult {
    pub fn from_scores(
        scores: impl IntoIterator<Item = (String, f64)>,
        n_errored: usize,
    ) -> Self {
        let per_question: BTreeMap<String, f64> = scores.into_iter().collect();
        let n = per_question.len();
        Self {
            mean: mean(per_question.values().copied()),
            per_question,
            n_evaluated: n,
            n_errored,
        }
    }
}

/// Arithmetic mean, 0 for an empty input. Summation order is the iteration
/// order, so callers wanting reproducible sums pass sorted inputs.
pub fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Per-type `mean(treated) - mean(baseline)`; only types present in the
/// results appear.
pub fn accuracy_gain_by_type(
    baseline: &AccuracyResult,
    treated: &AccuracyResult,
    typing: impl Fn(&str) -> QuestionType,
) -> Result<BTreeMap<QuestionType, f64>, MetricError> {
    if baseline.per_question.len() != treated.per_question.len()
        || baseline
            .per_question
            .keys()
            .zip(treated.per_question.keys())
            .any(|(a, b)| a != b)
    {
        let missing = baseline
            .per_question
            .keys()
            .find(|k| !treated.per_question.contains_key(*k))
            .or_else(|| {
                treated
                    .per_question
                    .keys()
                    .find(|k| !baseline.per_question.contains_key(*k))
            })
            .cloned()
            .unwrap_or_default();
        return Err(MetricError::IdMismatch(missing));
    }
    let mut groups: BTreeMap<QuestionType, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (id, base) in &baseline.per_question {
        let entry = groups.entry(typing(id)).or_default();
        entry.0.push(*base);
        entry.1.push(treated.per_question[id]);
    }
    Ok(groups
        .into_iter()
        .map(|(t, (b, tr))| (t, mean(tr) - mean(b)))
        .collect())
}
