//! Facial-region keyword lexicon and keyword retrieval over free text.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::domain::{words, RegionId};
use crate::io::{load_structured, IoError};

#[derive(Debug, thiserror::Error)]
pub enum LexiconError {
    #[error("lexicon has no entry for region `{0}`")]
    MissingRegion(RegionId),
    #[error("lexicon entry for `{0}` has no usable phrases")]
    EmptyEntry(RegionId),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Region → keyword phrases. Phrases are stored trimmed and lowercased.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    entries: BTreeMap<RegionId, Vec<String>>,
    // phrase word sequence -> every region listing it
    index: HashMap<Vec<String>, BTreeSet<RegionId>>,
    max_words: usize,
}

const DEFAULT_TABLE: [(RegionId, &[&str]); 12] = [
    (RegionId::Skin, &["skin", "cheek", "forehead", "complexion", "dermal", "face"]),
    (RegionId::Nose, &["nose", "nostril", "nasal"]),
    (RegionId::Mouth, &["mouth", "lip", "lips"]),
    (RegionId::Teeth, &["tooth", "teeth"]),
    (RegionId::LeftEye, &["left eye", "left-eye", "l eye", "lefteye", "eye", "ocular"]),
    (RegionId::RightEye, &["right eye", "right-eye", "r eye", "righteye", "eye", "ocular"]),
    (RegionId::LeftEyebrow, &["left eyebrow", "left brow", "left-eyebrow", "eyebrow", "brow"]),
    (RegionId::RightEyebrow, &["right eyebrow", "right brow", "right-eyebrow", "eyebrow", "brow"]),
    (RegionId::Chin, &["chin", "jaw", "jawline", "lower face"]),
    (RegionId::Beard, &["beard", "mustache", "moustache", "goatee"]),
    (RegionId::Hairline, &["hairline", "hair line", "hair"]),
    (RegionId::Ear, &["ear", "ears"]),
];

/// The built-in twelve-region keyword table.
pub fn default_lexicon() -> Lexicon {
    let entries = DEFAULT_TABLE
        .iter()
        .map(|(r, phrases)| (*r, phrases.iter().map(|p| p.to_string()).collect()))
        .collect();
    Lexicon::new(entries).expect("built-in table is complete")
}

impl Lexicon {
    pub fn new(entries: BTreeMap<RegionId, Vec<String>>) -> Result<Self, LexiconError> {
        let mut normalized = BTreeMap::new();
        for region in RegionId::ALL {
            let phrases = entries.get(&region).ok_or(LexiconError::MissingRegion(region))?;
            let mut cleaned: Vec<String> = Vec::new();
            for p in phrases {
                let p = p.trim().to_lowercase();
                if words(&p).next().is_some() && !cleaned.contains(&p) {
                    cleaned.push(p);
                }
            }
            if cleaned.is_empty() {
                return Err(LexiconError::EmptyEntry(region));
            }
            normalized.insert(region, cleaned);
        }

        let mut index: HashMap<Vec<String>, BTreeSet<RegionId>> = HashMap::new();
        for (region, phrases) in &normalized {
            for p in phrases {
                index.entry(words(p).collect()).or_default().insert(*region);
            }
        }
        let max_words = index.keys().map(Vec::len).max().unwrap_or(0);
        Ok(Self { entries: normalized, index, max_words })
    }

    /// Loads a region → phrase-list table from a JSON or TOML file.
    pub fn from_file(path: &Path) -> Result<Self, LexiconError> {
        let entries: BTreeMap<RegionId, Vec<String>> = load_structured(path)?;
        Self::new(entries)
    }

    pub fn lookup(&self, region: RegionId) -> &[String] {
        &self.entries[&region]
    }

    pub fn entries(&self) -> &BTreeMap<RegionId, Vec<String>> {
        &self.entries
    }

    /// SHA-256 of the canonical JSON form, used to stamp dataset headers.
    pub fn content_hash(&self) -> String {
        let canonical = serde_json::to_vec(&self.entries).expect("lexicon serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    /// Regions mentioned in `text`.
    ///
    /// Phrases match on whole words. Longer phrases are placed first and
    /// claim their words, so "left eye" yields only `left_eye` even though
    /// bare "eye" lists both eyes. Hyphens and other punctuation act as word
    /// separators, so "left-eye" and "left eye" are the same phrase.
    pub fn extract_regions(&self, text: &str) -> BTreeSet<RegionId> {
        let tokens: Vec<String> = words(text).collect();
        let mut consumed = vec![false; tokens.len()];
        let mut found = BTreeSet::new();

        for len in (1..=self.max_words.min(tokens.len())).rev() {
            for start in 0..=tokens.len() - len {
                let span = start..start + len;
                if consumed[span.clone()].iter().any(|&c| c) {
                    continue;
                }
                if let Some(regions) = self.index.get(&tokens[span.clone()]) {
                    found.extend(regions.iter().copied());
                    consumed[span].iter_mut().for_each(|c| *c = true);
                }
            }
        }
        found
    }
}

impl Default for Lexicon {
    fn default() -> Self {
        default_lexicon()
    }
}

/// Free-function form of [`Lexicon::extract_regions`].
pub fn extract_regions(text: &str, lexicon: &Lexicon) -> BTreeSet<RegionId> {
    lexicon.extract_regions(text)
}
