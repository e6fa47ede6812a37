//! Detection metrics: label accuracy and F1 over generated texts, and
//! rank-based AUC for score-producing detectors.
//!
//! Fake is the positive class. An `Unknown` prediction is always wrong for
//! accuracy and counts as a negative prediction for F1.

use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};

use crate::domain::{extract_label, Label};
use crate::io::{read_lines, IoError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("no evaluation pairs")]
    Empty,
    #[error("ground truth label must be real or fake")]
    UnknownGroundTruth,
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("AUC needs both classes present")]
    SingleClass,
    #[error("score {0} is not finite")]
    NonFiniteScore(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub pred: Label,
    pub gt: Label,
    pub score: Option<f64>,
}

impl EvalPair {
    pub fn from_text(text: &str, gt: Label) -> Self {
        Self { pred: extract_label(text), gt, score: None }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Pairs whose prediction equals the ground truth.
    pub correct: usize,
}

pub fn confusion(pairs: &[EvalPair]) -> Result<Confusion, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut c = Confusion::default();
    for p in pairs {
        let positive = match p.gt {
            Label::Fake => true,
            Label::Real => false,
            Label::Unknown => return Err(MetricsError::UnknownGroundTruth),
        };
        let predicted_positive = p.pred == Label::Fake;
        match (predicted_positive, positive) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
        if p.pred == p.gt {
            c.correct += 1;
        }
    }
    Ok(c)
}

pub fn accuracy(pairs: &[EvalPair]) -> Result<f64, MetricsError> {
    let c = confusion(pairs)?;
    Ok(c.correct as f64 / pairs.len() as f64)
}

/// F1 over the Fake class; zero denominators give 0.
pub fn f1(pairs: &[EvalPair]) -> Result<f64, MetricsError> {
    let c = confusion(pairs)?;
    // 2PR/(P+R) reduces to 2TP/(2TP+FP+FN)
    let denom = 2 * c.tp + c.fp + c.fn_;
    if c.tp == 0 || denom == 0 {
        return Ok(0.0);
    }
    Ok((2 * c.tp) as f64 / denom as f64)
}

/// Mann-Whitney AUC: the fraction of (positive, negative) pairs where the
/// positive scores higher, ties counting one half.
pub fn auc(scores: &[f64], positive: &[bool]) -> Result<f64, MetricsError> {
    if scores.len() != positive.len() {
        return Err(MetricsError::LengthMismatch { scores: scores.len(), labels: positive.len() });
    }
    if let Some(&s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(MetricsError::NonFiniteScore(s));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Walk tie groups in ascending order, counting twice the wins so ties
    // stay integral.
    let mut twice_wins: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let group = &order[i..j];
        let pos = group.iter().filter(|&&k| positive[k]).count() as u64;
        let neg = group.len() as u64 - pos;
        twice_wins += pos * (2 * neg_below + neg);
        neg_below += neg;
        i = j;
    }
    Ok(twice_wins as f64 / (2 * n_pos * n_neg) as f64)
}

/// One line of a prediction file: generated text and/or a detector score,
/// plus the ground-truth label (`"fake"`/`"real"` or `1`/`0`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionLine {
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub score: Option<f64>,
    #[serde(deserialize_with = "label_id")]
    pub label: Label,
}

fn label_id<'de, D: Deserializer<'de>>(d: D) -> Result<Label, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(u8),
        Text(String),
    }
    let label = match Raw::deserialize(d)? {
        Raw::Num(1) => Label::Fake,
        Raw::Num(0) => Label::Real,
        Raw::Num(n) => return Err(serde::de::Error::custom(format!("label id {n} is not 0 or 1"))),
        Raw::Text(s) => s.parse().map_err(serde::de::Error::custom)?,
    };
    if label == Label::Unknown {
        return Err(serde::de::Error::custom("label must be real or fake"));
    }
    Ok(label)
}

impl PredictionLine {
    pub fn to_pair(&self) -> EvalPair {
        EvalPair {
            pred: self.text.as_deref().map(extract_label).unwrap_or(Label::Unknown),
            gt: self.label,
            score: self.score,
        }
    }
}

pub fn load_predictions(path: &Path) -> Result<Vec<EvalPair>, IoError> {
    let mut out = Vec::new();
    for item in read_lines(path)? {
        let (line, text) = item?;
        let bad = |message: String| IoError::Line { path: path.to_path_buf(), line, message };
        let p: PredictionLine = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if p.text.is_none() && p.score.is_none() {
            return Err(bad("line carries neither text nor score".into()));
        }
        out.push(p.to_pair());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub count: usize,
    /// Pairs with generated text; accuracy and F1 cover these.
    pub text_count: usize,
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub confusion: Option<Confusion>,
    /// Pairs with a score; AUC covers these.
    pub scored_count: usize,
    pub auc: Option<f64>,
}

/// Metrics over whichever parts of the file are present. Pairs from
/// `load_predictions` without text carry `score` only and are left out of
/// accuracy and F1.
pub fn report(pairs: &[EvalPair], has_text: &[bool]) -> Result<MetricsReport, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let text_pairs: Vec<EvalPair> = pairs.iter().zip(has_text).filter(|(_, &t)| t).map(|(p, _)| *p).collect();
    let (scores, labels): (Vec<f64>, Vec<bool>) =
        pairs.iter().filter_map(|p| p.score.map(|s| (s, p.gt == Label::Fake))).unzip();
    let (accuracy, f1v, conf) = if text_pairs.is_empty() {
        (None, None, None)
    } else {
        (Some(accuracy(&text_pairs)?), Some(f1(&text_pairs)?), Some(confusion(&text_pairs)?))
    };
    let auc = if scores.is_empty() { None } else { Some(auc(&scores, &labels)?) };
    Ok(MetricsReport {
        count: pairs.len(),
        text_count: text_pairs.len(),
        accuracy,
        f1: f1v,
        confusion: conf,
        scored_count: scores.len(),
        auc,
    })
}

/// Loads a prediction file and computes its report.
pub fn evaluate_file(path: &Path) -> Result<MetricsReport, EvaluateError> {
    let mut pairs = Vec::new();
    let mut has_text = Vec::new();
    for item in read_lines(path)? {
        let (line, text) = item?;
        let bad = |message: String| IoError::Line { path: path.to_path_buf(), line, message };
        let p: PredictionLine = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if p.text.is_none() && p.score.is_none() {
            return Err(bad("line carries neither text nor score".into()).into());
        }
        has_text.push(p.text.is_some());
        pairs.push(p.to_pair());
    }
    Ok(report(&pairs, &has_text)?)
}

#[derive(Debug, thiserror::Error)]
pub enum EvaluateError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}
