//! Guidance construction: detection thresholding, synonym canonicalization,
//! multi-detector aggregation and prompt templating.
//!
//! The output of this module is a [`GuidanceBundle`] per image, carrying the
//! ordered object list, the mean detector confidence and the rendered guidance
//! text. The `<QUERY>` slot of the template is left in place; the decode module
//! fills it in when building the conditional branch.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::BufRead;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Placeholder replaced with the user query at decode time.
pub const QUERY_SLOT: &str = "<QUERY>";
const OBJECT_SLOT: &str = "<OBJECT_GROUNDING>";
const SOURCE_LINES_SLOT: &str = "<OBJECT_GROUNDING_LINES>";

const BUNDLED_COCO_SYNONYMS: &str = include_str!("../data/coco_synonyms.json");

#[derive(Debug, thiserror::Error)]
pub enum GuidanceError {
    #[error("no threshold configured for model id `{0}`")]
    UnknownModelId(String),
    #[error("threshold for `{model_id}` must lie in [0, 1], got {value}")]
    InvalidThreshold { model_id: String, value: f64 },
    #[error("aggregation needs at least one input set")]
    EmptyInput,
    #[error("no objects to render into a guidance prompt")]
    EmptyObjects,
    #[error("invalid detection record on line {line}: {reason}")]
    InvalidRecord { line: usize, reason: String },
    #[error("invalid synonym map: {0}")]
    InvalidSynonymMap(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One detector output for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub model_id: String,
    pub label: String,
    pub confidence: f64,
}

impl DetectionRecord {
    pub fn new(image_id: &str, model_id: &str, label: &str, confidence: f64) -> Self {
        Self { image_id: image_id.to_string(), model_id: model_id.to_string(), label: label.to_string(), confidence }
    }

    fn validate(&self) -> Result<(), String> {
        if self.label.trim().is_empty() {
            return Err("label is empty".into());
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(format!("confidence {} outside [0, 1]", self.confidence));
        }
        Ok(())
    }
}

/// Reads detections from JSON Lines. Blank lines are skipped; unknown keys are ignored.
pub fn read_detections<R: BufRead>(reader: R) -> Result<Vec<DetectionRecord>, GuidanceError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DetectionRecord = serde_json::from_str(&line)
            .map_err(|e| GuidanceError::InvalidRecord { line: idx + 1, reason: e.to_string() })?;
        record.validate().map_err(|reason| GuidanceError::InvalidRecord { line: idx + 1, reason })?;
        out.push(record);
    }
    Ok(out)
}

/// Per-detector score thresholds, keyed by model id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Thresholds(pub BTreeMap<String, f64>);

impl Default for Thresholds {
    fn default() -> Self {
        let mut map = BTreeMap::new();
        map.insert("detr".to_string(), 0.95);
        map.insert("rampp".to_string(), 0.68);
        Thresholds(map)
    }
}

impl Thresholds {
    pub fn set(&mut self, model_id: &str, value: f64) {
        self.0.insert(model_id.to_string(), value);
    }

    pub fn get(&self, model_id: &str) -> Option<f64> {
        self.0.get(model_id).copied()
    }
}

/// Keeps the records whose confidence reaches their detector's threshold, in input order.
pub fn threshold_detections(
    records: &[DetectionRecord],
    thresholds: &Thresholds,
) -> Result<Vec<DetectionRecord>, GuidanceError> {
    for (model_id, &value) in &thresholds.0 {
        if !(0.0..=1.0).contains(&value) {
            return Err(GuidanceError::InvalidThreshold { model_id: model_id.clone(), value });
        }
    }
    let mut kept = Vec::with_capacity(records.len());
    for record in records {
        let threshold =
            thresholds.get(&record.model_id).ok_or_else(|| GuidanceError::UnknownModelId(record.model_id.clone()))?;
        if record.confidence >= threshold {
            kept.push(record.clone());
        }
    }
    Ok(kept)
}

/// Lowercase surface phrase to canonical label.
#[derive(Debug, Clone, PartialEq)]
pub struct SynonymMap {
    entries: HashMap<String, String>,
    vocabulary: BTreeSet<String>,
    max_phrase_words: usize,
}

impl SynonymMap {
    /// Builds a map from `(surface, canonical)` pairs. Every canonical label maps to itself.
    pub fn new<I, S>(vocabulary: I, entries: &[(&str, &str)]) -> Result<Self, GuidanceError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let owned: Vec<(String, String)> = entries.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        Self::from_parts(vocabulary.into_iter().map(|s| s.as_ref().to_string()), owned)
    }

    fn from_parts(
        vocabulary: impl Iterator<Item = String>,
        entries: Vec<(String, String)>,
    ) -> Result<Self, GuidanceError> {
        let vocabulary: BTreeSet<String> = vocabulary.map(|v| v.trim().to_lowercase()).collect();
        if vocabulary.iter().any(|v| v.is_empty()) {
            return Err(GuidanceError::InvalidSynonymMap("empty canonical label".into()));
        }
        let mut map = HashMap::new();
        for label in &vocabulary {
            map.insert(normalize_phrase(label), label.clone());
        }
        let identity_keys: BTreeSet<String> = map.keys().cloned().collect();
        for (surface, canonical) in entries {
            let surface = normalize_phrase(&surface);
            let canonical = canonical.trim().to_lowercase();
            if !vocabulary.contains(&canonical) {
                return Err(GuidanceError::InvalidSynonymMap(format!(
                    "`{surface}` maps to `{canonical}`, which is not in the vocabulary"
                )));
            }
            // canonical labels always map to themselves
            if surface.is_empty() || identity_keys.contains(&surface) {
                continue;
            }
            map.insert(surface, canonical);
        }
        let max_phrase_words = map.keys().map(|k| phrase_words(k).count()).max().unwrap_or(0);
        Ok(Self { entries: map, vocabulary, max_phrase_words })
    }

    /// Parses the JSON object form: `{"surface": "canonical", ..., "__vocabulary__": [...]}`.
    pub fn from_json(text: &str) -> Result<Self, GuidanceError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| GuidanceError::InvalidSynonymMap(e.to_string()))?;
        let obj = value.as_object().ok_or_else(|| GuidanceError::InvalidSynonymMap("expected a JSON object".into()))?;
        let vocab = obj
            .get("__vocabulary__")
            .and_then(|v| v.as_array())
            .ok_or_else(|| GuidanceError::InvalidSynonymMap("missing `__vocabulary__` array".into()))?;
        let mut vocabulary = Vec::with_capacity(vocab.len());
        for v in vocab {
            let s = v
                .as_str()
                .ok_or_else(|| GuidanceError::InvalidSynonymMap("vocabulary entries must be strings".into()))?;
            vocabulary.push(s.to_string());
        }
        let mut entries = Vec::new();
        for (k, v) in obj {
            if k == "__vocabulary__" {
                continue;
            }
            let canonical = v
                .as_str()
                .ok_or_else(|| GuidanceError::InvalidSynonymMap(format!("value for `{k}` must be a string")))?;
            entries.push((k.clone(), canonical.to_string()));
        }
        Self::from_parts(vocabulary.into_iter(), entries)
    }

    /// The 80 MSCOCO categories with a synonym list.
    pub fn coco() -> Self {
        Self::from_json(BUNDLED_COCO_SYNONYMS).expect("bundled synonym map is valid")
    }

    pub fn vocabulary(&self) -> &BTreeSet<String> {
        &self.vocabulary
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Exact lookup of an already-normalized phrase.
    pub(crate) fn lookup(&self, phrase: &str) -> Option<&str> {
        self.entries.get(phrase).map(String::as_str)
    }

    /// Lookup with the single trailing-"s" fallback.
    pub(crate) fn lookup_with_plural(&self, phrase: &str) -> Option<&str> {
        self.lookup(phrase)
            .or_else(|| phrase.strip_suffix('s').filter(|stem| !stem.is_empty()).and_then(|stem| self.lookup(stem)))
    }

    pub(crate) fn max_phrase_words(&self) -> usize {
        self.max_phrase_words
    }
}

fn phrase_words(s: &str) -> impl Iterator<Item = &str> {
    s.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty())
}

/// Lowercases and collapses every run of non-alphanumeric characters into one space.
pub(crate) fn normalize_phrase(s: &str) -> String {
    let lower = s.to_lowercase();
    phrase_words(&lower).collect::<Vec<_>>().join(" ")
}

/// Maps a surface label to its canonical label, if any.
pub fn canonicalize(label: &str, map: &SynonymMap) -> Option<String> {
    let phrase = normalize_phrase(label);
    if phrase.is_empty() {
        return None;
    }
    map.lookup_with_plural(&phrase).map(str::to_string)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    #[default]
    Intersection,
    Union,
}

/// Combines per-detector label sets. Output is lexicographically sorted.
pub fn aggregate(per_model_sets: &[BTreeSet<String>], mode: AggregationMode) -> Result<Vec<String>, GuidanceError> {
    let (first, rest) = per_model_sets.split_first().ok_or(GuidanceError::EmptyInput)?;
    let combined: BTreeSet<String> = match mode {
        AggregationMode::Intersection => {
            first.iter().filter(|label| rest.iter().all(|set| set.contains(*label))).cloned().collect()
        }
        AggregationMode::Union => per_model_sets.iter().flatten().cloned().collect(),
    };
    Ok(combined.into_iter().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateSet {
    #[default]
    Intersec,
    Pope,
    Union,
}

const INTERSEC_TEMPLATES: [&str; 4] = [
    "This image contains <OBJECT_GROUNDING>. Based on this, <QUERY>",
    "The image contains the following objects: <OBJECT_GROUNDING>. Given these detected objects, <QUERY>",
    "This image shows the following objects: <OBJECT_GROUNDING>. Using this information, <QUERY>",
    "The objects found in this image are: <OBJECT_GROUNDING>. Considering this list of objects, <QUERY>",
];

const POPE_TEMPLATES: [&str; 4] = [
    "This image contains only the following objects: <OBJECT_GROUNDING>. Do not assume anything beyond these objects. Based solely on this list, <QUERY>",
    "The detected objects in the image are: <OBJECT_GROUNDING>. Answer based only on these objects. <QUERY>",
    "This image shows the following objects: <OBJECT_GROUNDING>. You must answer using only the objects in this list. Given these detected objects, <QUERY>",
    "The objects found in this image are limited to: <OBJECT_GROUNDING>. You should rely strictly on this list of objects and make no other guesses. Based on this, <QUERY>",
];

// One line per grounding source goes where <OBJECT_GROUNDING_LINES> sits.
const UNION_TEMPLATES: [&str; 4] = [
    "List of detected objects in the image:\n<OBJECT_GROUNDING_LINES>\nBased on the detected objects above, <QUERY>",
    "The most prominent objects detected are:\n<OBJECT_GROUNDING_LINES>\nGiven these findings, <QUERY>",
    "The following objects were detected in the image:\n<OBJECT_GROUNDING_LINES>\nWith this information, <QUERY>",
    "Here is a list of all objects detected in the image:\n<OBJECT_GROUNDING_LINES>\nDo not infer or hallucinate any additional objects. Using only the detected objects, <QUERY>",
];

impl TemplateSet {
    pub fn templates(self) -> &'static [&'static str] {
        match self {
            TemplateSet::Intersec => &INTERSEC_TEMPLATES,
            TemplateSet::Pope => &POPE_TEMPLATES,
            TemplateSet::Union => &UNION_TEMPLATES,
        }
    }
}

/// Picks a template with a seeded RNG and renders `objects` into it.
///
/// Returns the guidance text (still holding the `<QUERY>` slot) and the
/// template index.
pub fn build_guidance_prompt(
    objects: &[String],
    template_set: TemplateSet,
    rng_seed: u64,
) -> Result<(String, usize), GuidanceError> {
    build_guidance_prompt_per_source(std::slice::from_ref(&objects.to_vec()), template_set, rng_seed)
}

/// Like [`build_guidance_prompt`] but keeps one object list per grounding source.
///
/// Union templates put each source on its own line; the other template sets
/// join all sources into one comma-separated list with duplicates removed.
pub fn build_guidance_prompt_per_source(
    sources: &[Vec<String>],
    template_set: TemplateSet,
    rng_seed: u64,
) -> Result<(String, usize), GuidanceError> {
    let sources: Vec<&Vec<String>> = sources.iter().filter(|s| !s.is_empty()).collect();
    if sources.is_empty() {
        return Err(GuidanceError::EmptyObjects);
    }
    let templates = template_set.templates();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let index = rng.gen_range(0..templates.len());
    let template = templates[index];
    let text = match template_set {
        TemplateSet::Union => {
            let lines: Vec<String> = sources.iter().map(|s| s.join(", ")).collect();
            template.replace(SOURCE_LINES_SLOT, &lines.join("\n"))
        }
        TemplateSet::Intersec | TemplateSet::Pope => {
            let mut seen = BTreeSet::new();
            let merged: Vec<&str> =
                sources.iter().flat_map(|s| s.iter()).filter(|o| seen.insert(o.as_str())).map(String::as_str).collect();
            template.replace(OBJECT_SLOT, &merged.join(", "))
        }
    };
    Ok((text, index))
}

/// Arithmetic mean of the confidences, 0 for no records.
pub fn mean_confidence(records: &[DetectionRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().map(|r| r.confidence).sum::<f64>() / records.len() as f64
}

/// What to do with an image whose aggregated object list is empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyGuidancePolicy {
    /// No guidance text; the decoder falls back to unguided generation.
    #[default]
    Degrade,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceBundle {
    pub image_id: String,
    pub objects: Vec<String>,
    pub mean_confidence: f64,
    /// `None` when no objects survived and the policy is `Degrade`.
    pub guidance_text: Option<String>,
    pub template_index: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BundleOptions {
    pub mode: AggregationMode,
    pub template_set: TemplateSet,
    pub empty_policy: EmptyGuidancePolicy,
}

impl Default for BundleOptions {
    fn default() -> Self {
        Self {
            mode: AggregationMode::Intersection,
            template_set: TemplateSet::Intersec,
            empty_policy: EmptyGuidancePolicy::Degrade,
        }
    }
}

/// Builds the guidance for one image from its already-thresholded records.
///
/// `model_ids` lists every detector taking part: a detector with no surviving
/// record for this image contributes an empty set, so intersection yields
/// nothing for it. Unmapped labels are dropped. Objects are ordered by
/// descending max confidence, ties lexicographic.
pub fn build_bundle(
    image_id: &str,
    records: &[DetectionRecord],
    model_ids: &BTreeSet<String>,
    synonyms: &SynonymMap,
    options: &BundleOptions,
    rng_seed: u64,
) -> Result<GuidanceBundle, GuidanceError> {
    let mut per_model: BTreeMap<&str, BTreeSet<String>> =
        model_ids.iter().map(|m| (m.as_str(), BTreeSet::new())).collect();
    let mut best: HashMap<String, f64> = HashMap::new();
    for record in records.iter().filter(|r| r.image_id == image_id) {
        let Some(label) = canonicalize(&record.label, synonyms) else {
            continue;
        };
        let entry = best.entry(label.clone()).or_insert(record.confidence);
        *entry = entry.max(record.confidence);
        per_model.entry(record.model_id.as_str()).or_default().insert(label);
    }
    let sets: Vec<BTreeSet<String>> = per_model.into_values().collect();
    let mut objects = if sets.is_empty() { Vec::new() } else { aggregate(&sets, options.mode)? };
    objects.sort_by(|a, b| best[b].partial_cmp(&best[a]).unwrap_or(std::cmp::Ordering::Equal).then_with(|| a.cmp(b)));
    let image_records: Vec<DetectionRecord> = records.iter().filter(|r| r.image_id == image_id).cloned().collect();
    let mean = mean_confidence(&image_records);

    let (guidance_text, template_index) = if objects.is_empty() {
        match options.empty_policy {
            EmptyGuidancePolicy::Degrade => (None, None),
            EmptyGuidancePolicy::Error => return Err(GuidanceError::EmptyObjects),
        }
    } else {
        let (text, idx) = match options.template_set {
            // one line per detector, each in the bundle's object order
            TemplateSet::Union => {
                let sources: Vec<Vec<String>> =
                    sets.iter().map(|set| objects.iter().filter(|o| set.contains(*o)).cloned().collect()).collect();
                build_guidance_prompt_per_source(&sources, options.template_set, rng_seed)?
            }
            _ => build_guidance_prompt(&objects, options.template_set, rng_seed)?,
        };
        (Some(text), Some(idx))
    };
    Ok(GuidanceBundle { image_id: image_id.to_string(), objects, mean_confidence: mean, guidance_text, template_index })
}
