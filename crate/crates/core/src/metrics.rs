//! CHAIR hallucination metrics for generated captions.
//!
//! `chair_i` is the share of mentioned objects that are not in the image,
//! `chair_s` the share of captions mentioning at least one such object, and
//! `recall` the share of ground-truth objects that captions mention. Objects
//! are counted once per caption no matter how often they are repeated.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::guidance::SynonymMap;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("no annotation for image `{0}`")]
    MissingAnnotation(String),
    #[error("annotation for image `{image_id}` uses `{label}`, which is not in the vocabulary")]
    UnknownLabel { image_id: String, label: String },
    #[error("invalid record on line {line}: {reason}")]
    InvalidRecord { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub objects: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChairCounts {
    pub hallucinated_instances: u64,
    pub mentioned_instances: u64,
    pub hallucinated_captions: u64,
    pub total_captions: u64,
    pub matched_objects: u64,
    pub existing_objects: u64,
}

impl ChairCounts {
    pub fn merge(self, other: ChairCounts) -> ChairCounts {
        ChairCounts {
            hallucinated_instances: self.hallucinated_instances + other.hallucinated_instances,
            mentioned_instances: self.mentioned_instances + other.mentioned_instances,
            hallucinated_captions: self.hallucinated_captions + other.hallucinated_captions,
            total_captions: self.total_captions + other.total_captions,
            matched_objects: self.matched_objects + other.matched_objects,
            existing_objects: self.existing_objects + other.existing_objects,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChairReport {
    pub chair_s: f64,
    pub chair_i: f64,
    pub recall: f64,
    #[serde(flatten)]
    pub counts: ChairCounts,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl From<ChairCounts> for ChairReport {
    fn from(counts: ChairCounts) -> Self {
        ChairReport {
            chair_s: ratio(counts.hallucinated_captions, counts.total_captions),
            chair_i: ratio(counts.hallucinated_instances, counts.mentioned_instances),
            recall: ratio(counts.matched_objects, counts.existing_objects),
            counts,
        }
    }
}

/// Lowercased alphanumeric words of `text`.
pub fn words(text: &str) -> Vec<String> {
    text.to_lowercase().split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(str::to_string).collect()
}

/// Canonical objects mentioned in `text`.
///
/// Scans left to right trying the longest phrase first, so `hot dog` is read
/// as one object and its `dog` is not counted again.
pub fn extract_mentioned_objects(text: &str, map: &SynonymMap) -> BTreeSet<String> {
    let words = words(text);
    let longest = map.max_phrase_words().max(1);
    let mut found = BTreeSet::new();
    let mut i = 0;
    while i < words.len() {
        let mut consumed = 1;
        for len in (1..=longest.min(words.len() - i)).rev() {
            let phrase = words[i..i + len].join(" ");
            if let Some(label) = map.lookup_with_plural(&phrase) {
                found.insert(label.to_string());
                consumed = len;
                break;
            }
        }
        i += consumed;
    }
    found
}

/// Per-caption contribution to the corpus counts.
pub fn caption_counts(mentioned: &BTreeSet<String>, truth: &BTreeSet<String>) -> ChairCounts {
    let hallucinated = mentioned.difference(truth).count() as u64;
    let matched = mentioned.intersection(truth).count() as u64;
    ChairCounts {
        hallucinated_instances: hallucinated,
        mentioned_instances: mentioned.len() as u64,
        hallucinated_captions: u64::from(hallucinated > 0),
        total_captions: 1,
        matched_objects: matched,
        existing_objects: truth.len() as u64,
    }
}

/// Merges annotation records by image id.
pub fn index_annotations(annotations: &[AnnotationRecord]) -> BTreeMap<&str, BTreeSet<String>> {
    let mut index: BTreeMap<&str, BTreeSet<String>> = BTreeMap::new();
    for a in annotations {
        index.entry(a.image_id.as_str()).or_default().extend(a.objects.iter().cloned());
    }
    index
}

pub fn score_chair(
    captions: &[CaptionRecord],
    annotations: &[AnnotationRecord],
    map: &SynonymMap,
) -> Result<ChairReport, MetricsError> {
    let index = index_annotations(annotations);
    for (image_id, objects) in &index {
        if let Some(label) = objects.iter().find(|o| !map.vocabulary().contains(*o)) {
            return Err(MetricsError::UnknownLabel { image_id: image_id.to_string(), label: label.clone() });
        }
    }
    let mut counts = ChairCounts::default();
    for caption in captions {
        let truth = index
            .get(caption.image_id.as_str())
            .ok_or_else(|| MetricsError::MissingAnnotation(caption.image_id.clone()))?;
        let mentioned = extract_mentioned_objects(&caption.text, map);
        counts = counts.merge(caption_counts(&mentioned, truth));
    }
    Ok(counts.into())
}

fn read_jsonl<T: serde::de::DeserializeOwned, R: BufRead>(reader: R) -> Result<Vec<T>, MetricsError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| MetricsError::InvalidRecord { line: idx + 1, reason: e.to_string() })?,
        );
    }
    Ok(out)
}

pub fn read_captions<R: BufRead>(reader: R) -> Result<Vec<CaptionRecord>, MetricsError> {
    let records: Vec<CaptionRecord> = read_jsonl(reader)?;
    if let Some(pos) = records.iter().position(|r| r.image_id.is_empty()) {
        return Err(MetricsError::InvalidRecord { line: pos + 1, reason: "empty image_id".into() });
    }
    Ok(records)
}

pub fn read_annotations<R: BufRead>(reader: R) -> Result<Vec<AnnotationRecord>, MetricsError> {
    read_jsonl(reader)
}
