//! Builds text-spatially aligned records from image/text records.
//!
//! Two stages per record: pull the facial regions named in the annotated
//! text out with the keyword lexicon, then turn each region's landmarks into
//! a padded box.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{DmaRecord, Label, RegionBox, RegionId};
use crate::io::{read_lines, IoError, JsonlWriter};
use crate::lexicon::Lexicon;
use crate::providers::{region_box_from_landmarks, LandmarkFixture, LandmarkSet, ProviderError};

pub const BUILDER_VERSION: &str = concat!("dma-builder/", env!("CARGO_PKG_VERSION"));

#[derive(Debug, thiserror::Error)]
pub enum BuildError {
    #[error("text mentions no facial region")]
    NoRegions,
    #[error("no landmarks for any mentioned region ({})", join_regions(.missing))]
    MissingLandmarks { missing: Vec<RegionId> },
    #[error("invalid source record: {0}")]
    InvalidSource(&'static str),
    #[error("pad {0} outside [0, 0.5]")]
    InvalidPad(f64),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Io(#[from] IoError),
}

fn join_regions(rs: &[RegionId]) -> String {
    rs.iter().map(|r| r.as_str()).collect::<Vec<_>>().join(", ")
}

/// An image/text pair before localization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRecord {
    pub image_ref: String,
    pub question: String,
    pub gt_text: String,
    pub gt_label: Label,
}

impl SourceRecord {
    pub fn validate(&self) -> Result<(), BuildError> {
        if self.gt_text.trim().is_empty() {
            return Err(BuildError::InvalidSource("gt_text is empty"));
        }
        if self.gt_label == Label::Unknown {
            return Err(BuildError::InvalidSource("gt_label must be real or fake"));
        }
        Ok(())
    }
}

/// A built record plus the mentioned regions that had no landmarks.
#[derive(Debug, Clone, PartialEq)]
pub struct BuiltRecord {
    pub record: DmaRecord,
    pub missing_regions: Vec<RegionId>,
}

pub fn build_record(src: &SourceRecord, lexicon: &Lexicon, landmarks: &LandmarkSet, pad: f64) -> Result<BuiltRecord, BuildError> {
    src.validate()?;
    if !(0.0..=0.5).contains(&pad) {
        return Err(BuildError::InvalidPad(pad));
    }
    let regions = lexicon.extract_regions(&src.gt_text);
    if regions.is_empty() {
        return Err(BuildError::NoRegions);
    }
    let mut boxes = Vec::new();
    let mut missing = Vec::new();
    for region in regions {
        if landmarks.contains(region) {
            boxes.push(RegionBox::new(region, region_box_from_landmarks(landmarks, region, pad)?));
        } else {
            missing.push(region);
        }
    }
    if boxes.is_empty() {
        return Err(BuildError::MissingLandmarks { missing });
    }
    Ok(BuiltRecord {
        record: DmaRecord {
            image_ref: src.image_ref.clone(),
            question: src.question.clone(),
            gt_text: src.gt_text.clone(),
            gt_label: src.gt_label,
            gt_boxes: boxes,
        },
        missing_regions: missing,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmaHeader {
    pub builder_version: String,
    pub lexicon_sha256: String,
    pub pad: f64,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: DmaHeader,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub total: usize,
    pub succeeded: usize,
    pub skipped_no_regions: usize,
    pub skipped_missing_landmarks: usize,
    /// Boxes emitted per region.
    pub region_frequency: BTreeMap<RegionId, usize>,
    /// Mentioned regions dropped for lack of landmarks.
    pub missing_region_mentions: BTreeMap<RegionId, usize>,
}

/// Streams `src_path` through [`build_record`] and writes the aligned
/// dataset (header line first) to `out`.
pub fn build_dataset_to<W: Write>(
    src_path: &Path,
    fixture: &LandmarkFixture,
    out: W,
    lexicon: &Lexicon,
    pad: f64,
) -> Result<BuildReport, BuildError> {
    if !(0.0..=0.5).contains(&pad) {
        return Err(BuildError::InvalidPad(pad));
    }
    let mut writer = JsonlWriter::new(out);
    let header = DmaHeader { builder_version: BUILDER_VERSION.to_string(), lexicon_sha256: lexicon.content_hash(), pad };
    writer.write(&HeaderLine { header }).map_err(IoError::from)?;

    let empty = LandmarkSet::default();
    let mut report = BuildReport::default();
    for item in read_lines(src_path)? {
        let (line, text) = item?;
        let src: SourceRecord = serde_json::from_str(&text)
            .map_err(|e| IoError::Line { path: src_path.to_path_buf(), line, message: e.to_string() })?;
        src.validate().map_err(|e| IoError::Line { path: src_path.to_path_buf(), line, message: e.to_string() })?;
        report.total += 1;

        let landmarks = fixture.get(&src.image_ref).unwrap_or(&empty);
        match build_record(&src, lexicon, landmarks, pad) {
            Ok(built) => {
                report.succeeded += 1;
                for b in &built.record.gt_boxes {
                    *report.region_frequency.entry(b.region).or_default() += 1;
                }
                for r in built.missing_regions {
                    *report.missing_region_mentions.entry(r).or_default() += 1;
                }
                writer.write(&built.record).map_err(IoError::from)?;
            }
            Err(BuildError::NoRegions) => report.skipped_no_regions += 1,
            Err(BuildError::MissingLandmarks { missing }) => {
                report.skipped_missing_landmarks += 1;
                for r in missing {
                    *report.missing_region_mentions.entry(r).or_default() += 1;
                }
            }
            Err(e) => return Err(e),
        }
    }
    writer.finish().map_err(IoError::from)?;
    Ok(report)
}

/// File-to-file form of [`build_dataset_to`].
pub fn build_dataset(
    src_path: &Path,
    landmarks_path: &Path,
    out_path: &Path,
    lexicon: &Lexicon,
    pad: f64,
) -> Result<BuildReport, BuildError> {
    let fixture = LandmarkFixture::load(landmarks_path)?;
    let file = std::fs::File::create(out_path).map_err(|source| IoError::Open { path: out_path.to_path_buf(), source })?;
    build_dataset_to(src_path, &fixture, std::io::BufWriter::new(file), lexicon, pad)
}

/// Reads an aligned dataset, validating each record. The header line is
/// optional.
pub fn read_dma_file(path: &Path) -> Result<(Option<DmaHeader>, Vec<DmaRecord>), IoError> {
    let mut header = None;
    let mut records = Vec::new();
    for item in read_lines(path)? {
        let (line, text) = item?;
        let bad = |message: String| IoError::Line { path: path.to_path_buf(), line, message };
        if header.is_none() && records.is_empty() {
            if let Ok(h) = serde_json::from_str::<HeaderLine>(&text) {
                header = Some(h.header);
                continue;
            }
        }
        let rec: DmaRecord = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        rec.validate().map_err(|e| bad(e.to_string()))?;
        records.push(rec);
    }
    Ok((header, records))
}

/// Regions a record is expected to carry boxes for.
pub fn expected_box_regions(src: &SourceRecord, lexicon: &Lexicon, landmarks: &LandmarkSet) -> BTreeSet<RegionId> {
    lexicon.extract_regions(&src.gt_text).into_iter().filter(|r| landmarks.contains(*r)).collect()
}
