//! POPE object-existence probing: question construction, answer parsing and scoring.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::metrics::{index_annotations, AnnotationRecord};

pub const DEFAULT_QUESTIONS_PER_IMAGE: usize = 6;

#[derive(Debug, thiserror::Error)]
pub enum PopeError {
    #[error("the candidate vocabulary is empty")]
    EmptyVocabulary,
    #[error("questions per image must be even, got {0}")]
    OddQuestionCount(usize),
    #[error("no answer for question {0}")]
    MissingAnswer(usize),
    #[error("invalid record on line {line}: {reason}")]
    InvalidRecord { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Random,
    Popular,
    Adversarial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Answer {
    Yes,
    No,
    Invalid,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CooccurrenceStats {
    pair_counts: BTreeMap<(String, String), u64>,
    object_freq: BTreeMap<String, u64>,
}

impl CooccurrenceStats {
    /// Number of images containing both `a` and `b`; symmetric in its arguments.
    pub fn pair(&self, a: &str, b: &str) -> u64 {
        let key = if a <= b { (a.to_string(), b.to_string()) } else { (b.to_string(), a.to_string()) };
        self.pair_counts.get(&key).copied().unwrap_or(0)
    }

    /// Number of images containing `label`.
    pub fn freq(&self, label: &str) -> u64 {
        self.object_freq.get(label).copied().unwrap_or(0)
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str, u64)> {
        self.pair_counts.iter().map(|((a, b), &n)| (a.as_str(), b.as_str(), n))
    }
}

pub fn build_cooccurrence(annotations: &[AnnotationRecord]) -> CooccurrenceStats {
    let mut stats = CooccurrenceStats::default();
    for objects in index_annotations(annotations).values() {
        let objects: Vec<&String> = objects.iter().collect();
        for (i, a) in objects.iter().enumerate() {
            *stats.object_freq.entry((*a).clone()).or_default() += 1;
            for b in &objects[i + 1..] {
                // sorted set iteration keeps a < b
                *stats.pair_counts.entry(((*a).clone(), (*b).clone())).or_default() += 1;
            }
        }
    }
    stats
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopeQuestion {
    pub image_id: String,
    pub object: String,
    pub expected: Answer,
    pub setting: Setting,
    pub question_text: String,
}

pub fn question_text(object: &str) -> String {
    format!("Is there a {object} in this image?")
}

/// An image that could not supply the requested number of questions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shortfall {
    pub image_id: String,
    pub requested: usize,
    pub produced: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuestionSet {
    pub questions: Vec<PopeQuestion>,
    pub shortfalls: Vec<Shortfall>,
}

/// Ranks `candidates` by descending score, ties lexicographic, and keeps `n`.
fn top_by<F: Fn(&str) -> u64>(candidates: &[&String], n: usize, score: F) -> Vec<String> {
    let mut ranked: Vec<(u64, &String)> = candidates.iter().map(|c| (score(c), *c)).collect();
    ranked.sort_by(|x, y| y.0.cmp(&x.0).then_with(|| x.1.cmp(y.1)));
    ranked.into_iter().take(n).map(|(_, c)| c.clone()).collect()
}

/// Builds balanced yes/no questions for each annotated image, in input order.
///
/// Each image gets `questions_per_image / 2` questions of each polarity, or
/// fewer (equally many of each) when it lacks present or absent objects.
pub fn build_questions(
    annotations: &[AnnotationRecord],
    stats: &CooccurrenceStats,
    vocabulary: &BTreeSet<String>,
    setting: Setting,
    questions_per_image: usize,
    seed: u64,
) -> Result<QuestionSet, PopeError> {
    if vocabulary.is_empty() {
        return Err(PopeError::EmptyVocabulary);
    }
    if !questions_per_image.is_multiple_of(2) {
        return Err(PopeError::OddQuestionCount(questions_per_image));
    }
    let per_polarity = questions_per_image / 2;
    let index = index_annotations(annotations);
    let mut order: Vec<&str> = Vec::new();
    for a in annotations {
        if !order.contains(&a.image_id.as_str()) {
            order.push(a.image_id.as_str());
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut questions = Vec::new();
    let mut shortfalls = Vec::new();
    for image_id in order {
        let present = &index[image_id];
        let absent: Vec<&String> = vocabulary.iter().filter(|v| !present.contains(*v)).collect();
        let k = per_polarity.min(present.len()).min(absent.len());

        let present_list: Vec<&String> = present.iter().collect();
        let yes: Vec<String> = present_list.choose_multiple(&mut rng, k).map(|s| (*s).clone()).collect();
        let no: Vec<String> = match setting {
            Setting::Random => absent.choose_multiple(&mut rng, k).map(|s| (*s).clone()).collect(),
            Setting::Popular => top_by(&absent, k, |c| stats.freq(c)),
            Setting::Adversarial => top_by(&absent, k, |c| present.iter().map(|p| stats.pair(p, c)).sum()),
        };

        if k < per_polarity {
            shortfalls.push(Shortfall {
                image_id: image_id.to_string(),
                requested: questions_per_image,
                produced: 2 * k,
            });
        }
        for (objects, expected) in [(yes, Answer::Yes), (no, Answer::No)] {
            for object in objects {
                questions.push(PopeQuestion {
                    image_id: image_id.to_string(),
                    question_text: question_text(&object),
                    object,
                    expected,
                    setting,
                });
            }
        }
    }
    Ok(QuestionSet { questions, shortfalls })
}

/// Reads a yes/no answer from free text.
///
/// Only the first sentence is considered; it must contain exactly one of the
/// standalone words `yes` or `no`.
pub fn parse_answer(text: &str) -> Answer {
    let first = text.split(['.', '!', '?', '\n']).find(|s| !s.trim().is_empty()).unwrap_or("");
    let lower = first.to_lowercase();
    let words: Vec<&str> = lower.split(|c: char| !c.is_alphanumeric()).collect();
    let yes = words.contains(&"yes");
    let no = words.contains(&"no");
    match (yes, no) {
        (true, false) => Answer::Yes,
        (false, true) => Answer::No,
        _ => Answer::Invalid,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub invalid: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_ + self.invalid
    }

    pub fn record(&mut self, expected: Answer, given: Answer) {
        match (given, expected) {
            (Answer::Invalid, _) => self.invalid += 1,
            (Answer::Yes, Answer::Yes) => self.tp += 1,
            (Answer::Yes, _) => self.fp += 1,
            (Answer::No, Answer::Yes) => self.fn_ += 1,
            (Answer::No, _) => self.tn += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopeReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub yes_ratio: f64,
    pub invalid_ratio: f64,
    pub confusion: Confusion,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl From<Confusion> for PopeReport {
    fn from(c: Confusion) -> Self {
        let total = c.total();
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        PopeReport {
            accuracy: ratio(c.tp + c.tn, total),
            precision,
            recall,
            f1,
            yes_ratio: ratio(c.tp + c.fp, total),
            invalid_ratio: ratio(c.invalid, total),
            confusion: c,
        }
    }
}

/// Scores answers keyed by question index. "yes" is the positive class; invalid
/// answers count as wrong and as neither yes nor no.
pub fn score_pope(questions: &[PopeQuestion], answers: &BTreeMap<usize, String>) -> Result<PopeReport, PopeError> {
    let mut confusion = Confusion::default();
    for (i, q) in questions.iter().enumerate() {
        let text = answers.get(&i).ok_or(PopeError::MissingAnswer(i))?;
        confusion.record(q.expected, parse_answer(text));
    }
    Ok(confusion.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub question_id: usize,
    pub text: String,
}

fn read_jsonl<T: serde::de::DeserializeOwned, R: BufRead>(reader: R) -> Result<Vec<T>, PopeError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| PopeError::InvalidRecord { line: idx + 1, reason: e.to_string() })?,
        );
    }
    Ok(out)
}

pub fn read_questions<R: BufRead>(reader: R) -> Result<Vec<PopeQuestion>, PopeError> {
    read_jsonl(reader)
}

pub fn read_answers<R: BufRead>(reader: R) -> Result<BTreeMap<usize, String>, PopeError> {
    let records: Vec<AnswerRecord> = read_jsonl(reader)?;
    Ok(records.into_iter().map(|r| (r.question_id, r.text)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ann(id: &str, objs: &[&str]) -> AnnotationRecord {
        AnnotationRecord { image_id: id.into(), objects: objs.iter().map(|s| s.to_string()).collect() }
    }

    fn vocab(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn cooccurrence_counts() {
        let s = build_cooccurrence(&[ann("1", &["dog", "frisbee"]), ann("2", &["dog", "car"]), ann("3", &["cat"])]);
        assert_eq!(s.pair("dog", "frisbee"), 1);
        assert_eq!(s.pair("car", "dog"), 1);
        assert_eq!(s.pair("dog", "car"), 1);
        assert_eq!(s.freq("dog"), 2);
        assert_eq!(s.freq("cat"), 1);
        assert!(s.pairs().all(|(a, b, _)| a != "cat" && b != "cat"));
    }

    #[test]
    fn adversarial_picks_top_cooccurring_absent_object() {
        let corpus = vec![
            ann("a", &["plate", "fork"]),
            ann("b", &["plate", "fork", "cup"]),
            ann("c", &["plate", "knife"]),
            ann("d", &["plate"]),
        ];
        let stats = build_cooccurrence(&corpus);
        let v = vocab(&["plate", "fork", "knife", "cup", "dog"]);
        let set = build_questions(&corpus[3..], &stats, &v, Setting::Adversarial, 2, 242).unwrap();
        let no: Vec<_> = set.questions.iter().filter(|q| q.expected == Answer::No).collect();
        assert_eq!(no.len(), 1);
        assert_eq!(no[0].object, "fork");
        assert_eq!(no[0].question_text, "Is there a fork in this image?");
    }

    #[test]
    fn shortfall_is_recorded_and_balanced() {
        let corpus = vec![ann("1", &["dog"])];
        let stats = build_cooccurrence(&corpus);
        let set = build_questions(&corpus, &stats, &vocab(&["dog", "cat", "car"]), Setting::Random, 6, 1).unwrap();
        assert_eq!(set.questions.len(), 2);
        assert_eq!(set.shortfalls, vec![Shortfall { image_id: "1".into(), requested: 6, produced: 2 }]);
    }

    #[test]
    fn argument_errors() {
        let corpus = vec![ann("1", &["dog"])];
        let stats = build_cooccurrence(&corpus);
        assert!(matches!(
            build_questions(&corpus, &stats, &BTreeSet::new(), Setting::Random, 6, 1),
            Err(PopeError::EmptyVocabulary)
        ));
        assert!(matches!(
            build_questions(&corpus, &stats, &vocab(&["dog"]), Setting::Random, 5, 1),
            Err(PopeError::OddQuestionCount(5))
        ));
    }

    #[test]
    fn parse_answer_examples() {
        assert_eq!(parse_answer("Yes, there is."), Answer::Yes);
        assert_eq!(parse_answer("no"), Answer::No);
        assert_eq!(parse_answer("It is unclear."), Answer::Invalid);
        assert_eq!(parse_answer("Yes or no, hard to say."), Answer::Invalid);
        assert_eq!(parse_answer("There is none. Yes."), Answer::Invalid);
        assert_eq!(parse_answer("  NO! yes"), Answer::No);
        assert_eq!(parse_answer("Not really"), Answer::Invalid);
        assert_eq!(parse_answer(""), Answer::Invalid);
    }

    fn balanced() -> Vec<PopeQuestion> {
        ["yes", "no", "yes", "no"]
            .iter()
            .enumerate()
            .map(|(i, e)| PopeQuestion {
                image_id: i.to_string(),
                object: "dog".into(),
                expected: if *e == "yes" { Answer::Yes } else { Answer::No },
                setting: Setting::Random,
                question_text: question_text("dog"),
            })
            .collect()
    }

    #[test]
    fn perfect_and_all_yes() {
        let qs = balanced();
        let perfect: BTreeMap<usize, String> = qs
            .iter()
            .enumerate()
            .map(|(i, q)| (i, if q.expected == Answer::Yes { "Yes." } else { "No." }.to_string()))
            .collect();
        let r = score_pope(&qs, &perfect).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.yes_ratio, 0.5);

        let all_yes: BTreeMap<usize, String> = (0..qs.len()).map(|i| (i, "yes".to_string())).collect();
        let r = score_pope(&qs, &all_yes).unwrap();
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.yes_ratio, 1.0);
        assert_eq!(r.recall, 1.0);
        assert_eq!(r.precision, 0.5);
    }

    #[test]
    fn invalid_answers_are_wrong() {
        let qs = balanced();
        let answers: BTreeMap<usize, String> = (0..qs.len()).map(|i| (i, "maybe".to_string())).collect();
        let r = score_pope(&qs, &answers).unwrap();
        assert_eq!(r.accuracy, 0.0);
        assert_eq!(r.invalid_ratio, 1.0);
        assert_eq!(r.yes_ratio, 0.0);
        assert_eq!(r.f1, 0.0);
    }

    #[test]
    fn missing_answer() {
        let qs = balanced();
        let answers: BTreeMap<usize, String> = [(0, "yes".to_string())].into_iter().collect();
        assert!(matches!(score_pope(&qs, &answers), Err(PopeError::MissingAnswer(1))));
    }

    #[test]
    fn answers_file() {
        let text = "{\"question_id\":1,\"text\":\"No.\"}\n{\"question_id\":0,\"text\":\"Yes\"}\n";
        let a = read_answers(text.as_bytes()).unwrap();
        assert_eq!(a[&0], "Yes");
        assert_eq!(a[&1], "No.");
    }

    fn corpus() -> impl Strategy<Value = Vec<BTreeSet<usize>>> {
        proptest::collection::vec(proptest::collection::btree_set(0usize..10, 0..6), 1..15)
    }

    fn to_records(c: &[BTreeSet<usize>]) -> Vec<AnnotationRecord> {
        c.iter()
            .enumerate()
            .map(|(i, s)| AnnotationRecord {
                image_id: format!("img{i}"),
                objects: s.iter().map(|o| format!("obj{o}")).collect(),
            })
            .collect()
    }

    proptest! {
        #[test]
        fn pairs_symmetric(c in corpus()) {
            let s = build_cooccurrence(&to_records(&c));
            for a in 0..10 {
                for b in 0..10 {
                    prop_assert_eq!(s.pair(&format!("obj{a}"), &format!("obj{b}")), s.pair(&format!("obj{b}"), &format!("obj{a}")));
                }
            }
        }

        #[test]
        fn sets_are_balanced_and_consistent(c in corpus(), seed in any::<u64>(), setting_idx in 0usize..3) {
            let setting = [Setting::Random, Setting::Popular, Setting::Adversarial][setting_idx];
            let recs = to_records(&c);
            let stats = build_cooccurrence(&recs);
            let v: BTreeSet<String> = (0..10).map(|o| format!("obj{o}")).collect();
            let set = build_questions(&recs, &stats, &v, setting, 6, seed).unwrap();
            let yes = set.questions.iter().filter(|q| q.expected == Answer::Yes).count();
            prop_assert_eq!(yes * 2, set.questions.len());
            for q in &set.questions {
                let present = recs.iter().find(|r| r.image_id == q.image_id).unwrap().objects.contains(&q.object);
                prop_assert_eq!(present, q.expected == Answer::Yes);
            }
            prop_assert_eq!(set.clone(), build_questions(&recs, &stats, &v, setting, 6, seed).unwrap());
        }
    }
}
