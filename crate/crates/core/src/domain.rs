//! Core domain types and the `<think>`/`<answer>` response grammar.
//!
//! A candidate response must look like
//!
//! ```text
//! <think>free-form reasoning</think>
//! <answer>{"explanation": "...", "bboxes": [{"region": "mouth", "box": [x1, y1, x2, y2]}]}</answer>
//! ```
//!
//! Whitespace is allowed around and between the two blocks; any other text
//! outside them makes the response malformed. Box coordinates are normalized
//! to the unit frame.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DomainError {
    #[error("unknown facial region `{0}`")]
    UnknownRegion(String),
    #[error("invalid box [{x1}, {y1}, {x2}, {y2}]: need 0 <= x1 < x2 <= 1 and 0 <= y1 < y2 <= 1")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("duplicate region `{0}`")]
    DuplicateRegion(RegionId),
    #[error("ground-truth label must be real or fake")]
    UnknownGroundTruth,
    #[error("ground-truth text is empty")]
    EmptyText,
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
}

/// One of the twelve facial regions the lexicon and landmark fixtures know about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionId {
    Skin,
    Nose,
    Mouth,
    Teeth,
    LeftEye,
    RightEye,
    LeftEyebrow,
    RightEyebrow,
    Chin,
    Beard,
    Hairline,
    Ear,
}

impl RegionId {
    pub const ALL: [RegionId; 12] = [
        RegionId::Skin,
        RegionId::Nose,
        RegionId::Mouth,
        RegionId::Teeth,
        RegionId::LeftEye,
        RegionId::RightEye,
        RegionId::LeftEyebrow,
        RegionId::RightEyebrow,
        RegionId::Chin,
        RegionId::Beard,
        RegionId::Hairline,
        RegionId::Ear,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RegionId::Skin => "skin",
            RegionId::Nose => "nose",
            RegionId::Mouth => "mouth",
            RegionId::Teeth => "teeth",
            RegionId::LeftEye => "left_eye",
            RegionId::RightEye => "right_eye",
            RegionId::LeftEyebrow => "left_eyebrow",
            RegionId::RightEyebrow => "right_eyebrow",
            RegionId::Chin => "chin",
            RegionId::Beard => "beard",
            RegionId::Hairline => "hairline",
            RegionId::Ear => "ear",
        }
    }
}

impl fmt::Display for RegionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RegionId {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RegionId::ALL
            .iter()
            .copied()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| DomainError::UnknownRegion(s.to_string()))
    }
}

/// Axis-aligned box in normalized corner form.
///
/// Serialized as the array `[x1, y1, x2, y2]`; deserialization validates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, DomainError> {
        let ok = (0.0..=1.0).contains(&x1)
            && (0.0..=1.0).contains(&y1)
            && (0.0..=1.0).contains(&x2)
            && (0.0..=1.0).contains(&y2)
            && x1 < x2
            && y1 < y2;
        if ok {
            Ok(Self { x1, y1, x2, y2 })
        } else {
            Err(DomainError::InvalidBox { x1, y1, x2, y2 })
        }
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = DomainError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_array().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = <[f64; 4]>::deserialize(deserializer)?;
        BBox::try_from(raw).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionBox {
    pub region: RegionId,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

impl RegionBox {
    pub fn new(region: RegionId, bbox: BBox) -> Self {
        Self { region, bbox }
    }
}

/// Checks that no region appears twice in `boxes`.
pub fn ensure_unique_regions(boxes: &[RegionBox]) -> Result<(), DomainError> {
    let mut seen = BTreeSet::new();
    for b in boxes {
        if !seen.insert(b.region) {
            return Err(DomainError::DuplicateRegion(b.region));
        }
    }
    Ok(())
}

pub fn box_regions(boxes: &[RegionBox]) -> BTreeSet<RegionId> {
    boxes.iter().map(|b| b.region).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
    Unknown,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Fake => "fake",
            Label::Unknown => "unknown",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "real" => Ok(Label::Real),
            "fake" => Ok(Label::Fake),
            "unknown" => Ok(Label::Unknown),
            other => Err(DomainError::UnknownLabel(other.to_string())),
        }
    }
}

/// One aligned sample: image reference, question, annotated text, label and region boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmaRecord {
    pub image_ref: String,
    pub question: String,
    pub gt_text: String,
    pub gt_label: Label,
    pub gt_boxes: Vec<RegionBox>,
}

impl DmaRecord {
    pub fn validate(&self) -> Result<(), DomainError> {
        if self.gt_label == Label::Unknown {
            return Err(DomainError::UnknownGroundTruth);
        }
        if self.gt_text.trim().is_empty() {
            return Err(DomainError::EmptyText);
        }
        ensure_unique_regions(&self.gt_boxes)
    }
}

/// Why a response failed the grammar. The first problem found is reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Diagnostic {
    MissingThink,
    MissingAnswer,
    DuplicateTag,
    MisorderedTags,
    TextOutsideTags,
    InvalidJson,
    MissingExplanation,
    EmptyExplanation,
    MissingBboxes,
    MalformedBboxEntry,
    UnknownRegion,
    InvalidBox,
    DuplicateRegion,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Diagnostic::MissingThink => "missing <think> block",
            Diagnostic::MissingAnswer => "missing <answer> block",
            Diagnostic::DuplicateTag => "a tag occurs more than once",
            Diagnostic::MisorderedTags => "tags are out of order",
            Diagnostic::TextOutsideTags => "text outside the <think>/<answer> blocks",
            Diagnostic::InvalidJson => "answer body is not a JSON object",
            Diagnostic::MissingExplanation => "answer has no string \"explanation\" field",
            Diagnostic::EmptyExplanation => "explanation is empty",
            Diagnostic::MissingBboxes => "answer has no \"bboxes\" array",
            Diagnostic::MalformedBboxEntry => "bboxes entry is not {region, box}",
            Diagnostic::UnknownRegion => "bboxes entry names an unknown region",
            Diagnostic::InvalidBox => "box violates 0 <= x1 < x2 <= 1, 0 <= y1 < y2 <= 1",
            Diagnostic::DuplicateRegion => "region listed twice in bboxes",
        };
        f.write_str(s)
    }
}

/// A candidate response split into its parts.
///
/// When `well_formed` is false the other fields hold whatever could be
/// recovered (possibly nothing) and `diagnostic` names the first violation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedResponse {
    pub think_text: String,
    pub explanation: String,
    pub boxes: Vec<RegionBox>,
    pub pred_label: Label,
    pub well_formed: bool,
    pub diagnostic: Option<Diagnostic>,
}

impl ParsedResponse {
    fn empty(diagnostic: Diagnostic) -> Self {
        Self {
            think_text: String::new(),
            explanation: String::new(),
            boxes: Vec::new(),
            pred_label: Label::Unknown,
            well_formed: false,
            diagnostic: Some(diagnostic),
        }
    }

    /// Renders the response back into the tagged grammar.
    pub fn to_raw(&self) -> String {
        render_response(&self.think_text, &self.explanation, &self.boxes)
    }
}

#[derive(Serialize)]
struct AnswerBody<'a> {
    explanation: &'a str,
    bboxes: &'a [RegionBox],
}

/// Builds a well-formed response string from its parts.
pub fn render_response(think: &str, explanation: &str, boxes: &[RegionBox]) -> String {
    let body = serde_json::to_string(&AnswerBody { explanation, bboxes: boxes })
        .expect("answer body serializes");
    format!("<think>{think}</think><answer>{body}</answer>")
}

const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";
const ANSWER_OPEN: &str = "<answer>";
const ANSWER_CLOSE: &str = "</answer>";

/// Parses a raw model output. Never fails; malformed input yields
/// `well_formed == false` plus a diagnostic.
pub fn parse_response(raw: &str) -> ParsedResponse {
    let count = |tag: &str| raw.matches(tag).count();
    let (think_open_n, think_close_n) = (count(THINK_OPEN), count(THINK_CLOSE));
    let (answer_open_n, answer_close_n) = (count(ANSWER_OPEN), count(ANSWER_CLOSE));

    let structural = if think_open_n == 0 || think_close_n == 0 {
        Some(Diagnostic::MissingThink)
    } else if answer_open_n == 0 || answer_close_n == 0 {
        Some(Diagnostic::MissingAnswer)
    } else if think_open_n > 1 || think_close_n > 1 || answer_open_n > 1 || answer_close_n > 1 {
        Some(Diagnostic::DuplicateTag)
    } else {
        None
    };

    // The answer body is recoverable whenever its own tags are unambiguous.
    let answer_span = match (answer_open_n, answer_close_n) {
        (1, 1) => {
            let open = raw.find(ANSWER_OPEN).unwrap();
            let close = raw.find(ANSWER_CLOSE).unwrap();
            (open < close).then_some((open, close))
        }
        _ => None,
    };
    let mut parsed = match answer_span {
        Some((open, close)) => parse_answer_body(&raw[open + ANSWER_OPEN.len()..close]),
        None => ParsedResponse::empty(Diagnostic::MissingAnswer),
    };

    if let Some(d) = structural {
        parsed.well_formed = false;
        parsed.diagnostic = Some(d);
        return parsed;
    }

    let think_open = raw.find(THINK_OPEN).unwrap();
    let think_close = raw.find(THINK_CLOSE).unwrap();
    let Some((answer_open, answer_close)) = answer_span.filter(|&(open, _)| think_open < think_close && think_close < open)
    else {
        parsed.well_formed = false;
        parsed.diagnostic = Some(Diagnostic::MisorderedTags);
        return parsed;
    };

    parsed.think_text = raw[think_open + THINK_OPEN.len()..think_close].to_string();
    let outside_ok = raw[..think_open].trim().is_empty()
        && raw[think_close + THINK_CLOSE.len()..answer_open].trim().is_empty()
        && raw[answer_close + ANSWER_CLOSE.len()..].trim().is_empty();
    if parsed.well_formed && !outside_ok {
        parsed.well_formed = false;
        parsed.diagnostic = Some(Diagnostic::TextOutsideTags);
    }
    parsed
}

fn parse_answer_body(body: &str) -> ParsedResponse {
    let value: Value = match serde_json::from_str(body.trim()) {
        Ok(v @ Value::Object(_)) => v,
        _ => return ParsedResponse::empty(Diagnostic::InvalidJson),
    };

    let mut first_problem: Option<Diagnostic> = None;
    let mut note = |d: Diagnostic| {
        first_problem.get_or_insert(d);
    };

    let explanation = match value.get("explanation") {
        Some(Value::String(s)) => {
            if s.trim().is_empty() {
                note(Diagnostic::EmptyExplanation);
            }
            s.clone()
        }
        _ => {
            note(Diagnostic::MissingExplanation);
            String::new()
        }
    };

    let mut boxes: Vec<RegionBox> = Vec::new();
    match value.get("bboxes") {
        Some(Value::Array(entries)) => {
            for entry in entries {
                match parse_bbox_entry(entry) {
                    Ok(rb) => {
                        if boxes.iter().any(|b| b.region == rb.region) {
                            note(Diagnostic::DuplicateRegion);
                        } else {
                            boxes.push(rb);
                        }
                    }
                    Err(d) => note(d),
                }
            }
        }
        _ => note(Diagnostic::MissingBboxes),
    }

    ParsedResponse {
        think_text: String::new(),
        pred_label: extract_label(&explanation),
        explanation,
        boxes,
        well_formed: first_problem.is_none(),
        diagnostic: first_problem,
    }
}

fn parse_bbox_entry(entry: &Value) -> Result<RegionBox, Diagnostic> {
    let obj = entry.as_object().ok_or(Diagnostic::MalformedBboxEntry)?;
    let region = obj
        .get("region")
        .and_then(Value::as_str)
        .ok_or(Diagnostic::MalformedBboxEntry)?;
    let region = RegionId::from_str(region).map_err(|_| Diagnostic::UnknownRegion)?;
    let coords = obj
        .get("box")
        .and_then(Value::as_array)
        .ok_or(Diagnostic::MalformedBboxEntry)?;
    if coords.len() != 4 {
        return Err(Diagnostic::InvalidBox);
    }
    let mut c = [0.0; 4];
    for (slot, v) in c.iter_mut().zip(coords) {
        *slot = v.as_f64().ok_or(Diagnostic::InvalidBox)?;
    }
    let bbox = BBox::try_from(c).map_err(|_| Diagnostic::InvalidBox)?;
    Ok(RegionBox::new(region, bbox))
}

/// Splits text into lowercase alphanumeric words.
pub(crate) fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// Returns the label named by the first whole-word "fake" or "real" in the
/// text (case-insensitive), or `Unknown` if neither occurs.
pub fn extract_label(text: &str) -> Label {
    for w in words(text) {
        match w.as_str() {
            "fake" => return Label::Fake,
            "real" => return Label::Real,
            _ => {}
        }
    }
    Label::Unknown
}
