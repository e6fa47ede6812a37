//! The five response rewards and their weighted combination.
//!
//! | component  | meaning                                                         |
//! |------------|-----------------------------------------------------------------|
//! | `format`   | 1 if the response follows the `<think>`/`<answer>` grammar      |
//! | `accuracy` | 1 if the label named in the explanation matches ground truth    |
//! | `text`     | `max(0, cos(embed(explanation), embed(gt_text)))`               |
//! | `roi`      | mean IoU over regions boxed in both prediction and ground truth |
//! | `align`    | overlap of regions mentioned in text vs. regions boxed          |
//!
//! The combined reward is `Σ βᵢ · componentᵢ`; default weights are 0.6 on
//! accuracy and 0.1 on each of the other four.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::domain::{box_regions, ensure_unique_regions, parse_response, BBox, DmaRecord, Label, ParsedResponse, RegionBox, RegionId};
use crate::lexicon::Lexicon;
use crate::providers::Embedder;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RewardError {
    #[error("ground-truth label must be real or fake")]
    InvalidGroundTruth,
    #[error("region `{0}` appears twice")]
    DuplicateRegion(RegionId),
    #[error("weight `{field}` = {value} is invalid: {reason}")]
    InvalidWeight { field: &'static str, value: f64, reason: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    #[serde(rename = "beta_f")]
    pub format: f64,
    #[serde(rename = "beta_a")]
    pub accuracy: f64,
    #[serde(rename = "beta_t")]
    pub text: f64,
    #[serde(rename = "beta_r")]
    pub roi: f64,
    #[serde(rename = "beta_align")]
    pub align: f64,
    /// Added to the union size in the alignment reward.
    pub align_epsilon: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { format: 0.1, accuracy: 0.6, text: 0.1, roi: 0.1, align: 0.1, align_epsilon: 1e-6 }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<(), RewardError> {
        let betas = [
            ("beta_f", self.format),
            ("beta_a", self.accuracy),
            ("beta_t", self.text),
            ("beta_r", self.roi),
            ("beta_align", self.align),
        ];
        for (field, value) in betas {
            if !value.is_finite() || value < 0.0 {
                return Err(RewardError::InvalidWeight { field, value, reason: "must be finite and >= 0" });
            }
        }
        if !(self.align_epsilon.is_finite() && self.align_epsilon > 0.0) {
            return Err(RewardError::InvalidWeight {
                field: "align_epsilon",
                value: self.align_epsilon,
                reason: "must be finite and > 0",
            });
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.format + self.accuracy + self.text + self.roi + self.align
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardVector {
    #[serde(rename = "r_format")]
    pub format: f64,
    #[serde(rename = "r_accuracy")]
    pub accuracy: f64,
    #[serde(rename = "r_text")]
    pub text: f64,
    #[serde(rename = "r_roi")]
    pub roi: f64,
    #[serde(rename = "r_align")]
    pub align: f64,
    pub combined: f64,
}

impl RewardVector {
    pub fn from_components(format: f64, accuracy: f64, text: f64, roi: f64, align: f64, w: &RewardWeights) -> Self {
        let combined = w.format * format + w.accuracy * accuracy + w.text * text + w.roi * roi + w.align * align;
        Self { format, accuracy, text, roi, align, combined }
    }

    pub fn components(&self) -> [f64; 5] {
        [self.format, self.accuracy, self.text, self.roi, self.align]
    }
}

/// Intersection over union of two boxes; 0 when they do not overlap.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2().min(b.x2()) - a.x1().max(b.x1())).max(0.0);
    let h = (a.y2().min(b.y2()) - a.y1().max(b.y1())).max(0.0);
    let inter = w * h;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

pub fn reward_format(r: &ParsedResponse) -> f64 {
    if r.well_formed {
        1.0
    } else {
        0.0
    }
}

pub fn reward_accuracy(pred: Label, gt: Label) -> Result<f64, RewardError> {
    if gt == Label::Unknown {
        return Err(RewardError::InvalidGroundTruth);
    }
    Ok(if pred == gt { 1.0 } else { 0.0 })
}

pub fn reward_text(generated: &str, gt: &str, embedder: &dyn Embedder) -> f64 {
    let a = embedder.embed(generated);
    let b = embedder.embed(gt);
    a.cosine(&b).clamp(0.0, 1.0)
}

/// Mean IoU over regions boxed on both sides; 0 if they share none.
pub fn reward_roi(pred: &[RegionBox], gt: &[RegionBox]) -> Result<f64, RewardError> {
    let unique = |b: &[RegionBox]| ensure_unique_regions(b).map_err(|_| duplicate_of(b));
    unique(pred)?;
    unique(gt)?;
    let gt_by_region: BTreeMap<RegionId, &BBox> = gt.iter().map(|b| (b.region, &b.bbox)).collect();
    let ious: Vec<f64> = pred
        .iter()
        .filter_map(|p| gt_by_region.get(&p.region).map(|g| iou(&p.bbox, g)))
        .collect();
    if ious.is_empty() {
        return Ok(0.0);
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

fn duplicate_of(boxes: &[RegionBox]) -> RewardError {
    let mut seen = BTreeSet::new();
    let dup = boxes.iter().find(|b| !seen.insert(b.region)).expect("caller saw a duplicate");
    RewardError::DuplicateRegion(dup.region)
}

/// `|text ∩ boxes| / (|text ∪ boxes| + eps)`.
pub fn reward_align(text_regions: &BTreeSet<RegionId>, box_regions: &BTreeSet<RegionId>, eps: f64) -> f64 {
    let inter = text_regions.intersection(box_regions).count();
    let union = text_regions.union(box_regions).count();
    inter as f64 / (union as f64 + eps)
}

/// Scores an already-parsed response against a record.
pub fn score_parsed(
    parsed: &ParsedResponse,
    record: &DmaRecord,
    weights: &RewardWeights,
    embedder: &dyn Embedder,
    lexicon: &Lexicon,
) -> RewardVector {
    let format = reward_format(parsed);
    let accuracy = reward_accuracy(parsed.pred_label, record.gt_label).unwrap_or(0.0);
    let text = if parsed.explanation.trim().is_empty() {
        0.0
    } else {
        reward_text(&parsed.explanation, &record.gt_text, embedder)
    };
    let roi = reward_roi(&parsed.boxes, &record.gt_boxes).unwrap_or(0.0);
    let text_regions = lexicon.extract_regions(&parsed.explanation);
    let align = reward_align(&text_regions, &box_regions(&parsed.boxes), weights.align_epsilon);
    RewardVector::from_components(format, accuracy, text, roi, align, weights)
}

/// Parses `raw` and computes every reward component plus the weighted sum.
///
/// Total: a malformed response scores 0 on format and whatever its
/// recoverable parts earn elsewhere.
pub fn score_response(
    raw: &str,
    record: &DmaRecord,
    weights: &RewardWeights,
    embedder: &dyn Embedder,
    lexicon: &Lexicon,
) -> RewardVector {
    score_parsed(&parse_response(raw), record, weights, embedder, lexicon)
}
