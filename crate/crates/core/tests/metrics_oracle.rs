mod support;

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use groundguide::metrics::{score_chair, AnnotationRecord, CaptionRecord};
use groundguide::pope::{build_cooccurrence, build_questions, parse_answer, score_pope, Answer, Setting};
use groundguide::SynonymMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::*;

#[test]
fn chair_matches_constructed_corpus() {
    let map = chair_synonyms();
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let corpus = chair_corpus(&mut rng, 1000, 150);
        let start = Instant::now();
        let report = score_chair(&corpus.captions, &corpus.annotations, &map).unwrap();
        assert!(start.elapsed().as_secs_f64() < 5.0);
        let c = report.counts;
        assert_eq!(
            [
                c.hallucinated_instances,
                c.mentioned_instances,
                c.hallucinated_captions,
                c.total_captions,
                c.matched_objects,
                c.existing_objects
            ],
            corpus.counts
        );
        assert!((report.chair_i - corpus.chair_i()).abs() <= 1e-12);
        assert!((report.chair_s - corpus.chair_s()).abs() <= 1e-12);
        assert!((report.recall - corpus.recall()).abs() <= 1e-12);
    }
}

#[test]
fn chair_on_coco_synonyms() {
    let map = SynonymMap::coco();
    let ann = |id: &str, objs: &[&str]| AnnotationRecord {
        image_id: id.into(),
        objects: objs.iter().map(|s| s.to_string()).collect(),
    };
    let cap = |id: &str, text: &str| CaptionRecord { image_id: id.into(), text: text.into() };
    let annotations = vec![ann("1", &["person", "dog"]), ann("2", &["hot dog", "dining table"])];
    let captions = vec![cap("1", "A man walking two dogs past a parked car."), cap("2", "A hot dog on a table.")];
    let report = score_chair(&captions, &annotations, &map).unwrap();
    // caption 1 mentions person, dog, car; caption 2 mentions hot dog, dining table
    assert_eq!(report.counts.mentioned_instances, 5);
    assert_eq!(report.counts.hallucinated_instances, 1);
    assert_eq!(report.chair_s, 0.5);
    assert_eq!(report.chair_i, 0.2);
    assert_eq!(report.recall, 1.0);
}

fn random_annotations(rng: &mut ChaCha8Rng, vocab: &[String], images: usize) -> Vec<AnnotationRecord> {
    (0..images)
        .map(|i| AnnotationRecord {
            image_id: format!("im{i}"),
            objects: vocab.iter().filter(|_| rng.gen_bool(0.3)).cloned().collect(),
        })
        .collect()
}

#[test]
fn pope_sets_are_balanced_and_disjoint() {
    let vocab: Vec<String> = (0..12).map(|i| format!("obj{i:02}")).collect();
    let vocab_set: BTreeSet<String> = vocab.iter().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let annotations = random_annotations(&mut rng, &vocab, 60);
    let stats = build_cooccurrence(&annotations);
    for setting in [Setting::Random, Setting::Popular, Setting::Adversarial] {
        let set = build_questions(&annotations, &stats, &vocab_set, setting, 6, 242).unwrap();
        let mut per_image: BTreeMap<&str, (Vec<&str>, Vec<&str>)> = BTreeMap::new();
        for q in &set.questions {
            let e = per_image.entry(&q.image_id).or_default();
            match q.expected {
                Answer::Yes => e.0.push(&q.object),
                _ => e.1.push(&q.object),
            }
        }
        for a in &annotations {
            let (yes, no) = per_image.get(a.image_id.as_str()).cloned().unwrap_or_default();
            let k = 3.min(a.objects.len()).min(vocab.len() - a.objects.len());
            assert_eq!(yes.len(), k);
            assert_eq!(no.len(), k);
            assert!(yes.iter().all(|o| a.objects.contains(*o)));
            assert!(no.iter().all(|o| !a.objects.contains(*o)));
            let shortfall = set.shortfalls.iter().any(|s| s.image_id == a.image_id);
            assert_eq!(shortfall, k < 3);
        }
    }
}

#[test]
fn popular_and_adversarial_follow_brute_force_ranking() {
    let vocab: Vec<String> = (0..10).map(|i| format!("o{i}")).collect();
    let vocab_set: BTreeSet<String> = vocab.iter().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let annotations = random_annotations(&mut rng, &vocab, 40);

    // frequency and co-occurrence counted directly from the annotations
    let freq = |o: &str| annotations.iter().filter(|a| a.objects.contains(o)).count();
    let co = |x: &str, y: &str| annotations.iter().filter(|a| a.objects.contains(x) && a.objects.contains(y)).count();
    let stats = build_cooccurrence(&annotations);
    for setting in [Setting::Popular, Setting::Adversarial] {
        let set = build_questions(&annotations, &stats, &vocab_set, setting, 4, 1).unwrap();
        for a in &annotations {
            let got: Vec<&str> = set
                .questions
                .iter()
                .filter(|q| q.image_id == a.image_id && q.expected == Answer::No)
                .map(|q| q.object.as_str())
                .collect();
            let mut absent: Vec<(usize, &str)> = vocab
                .iter()
                .filter(|v| !a.objects.contains(*v))
                .map(|v| {
                    let score = match setting {
                        Setting::Popular => freq(v),
                        _ => a.objects.iter().map(|p| co(p, v)).sum(),
                    };
                    (score, v.as_str())
                })
                .collect();
            absent.sort_by(|x, y| y.0.cmp(&x.0).then(x.1.cmp(y.1)));
            let expected: Vec<&str> = absent.iter().take(got.len()).map(|(_, v)| *v).collect();
            assert_eq!(got, expected, "{setting:?} {}", a.image_id);
        }
    }
}

#[test]
fn pope_confusion_matches_oracle() {
    let vocab: Vec<String> = (0..8).map(|i| format!("k{i}")).collect();
    let vocab_set: BTreeSet<String> = vocab.iter().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let annotations = random_annotations(&mut rng, &vocab, 50);
    let stats = build_cooccurrence(&annotations);
    let set = build_questions(&annotations, &stats, &vocab_set, Setting::Random, 6, 3).unwrap();

    let replies = ["Yes.", "No, there is not.", "yes", "NO!", "I cannot tell.", "Yes and no."];
    let mut answers = BTreeMap::new();
    let (mut tp, mut fp, mut tn, mut fn_, mut inv) = (0u64, 0u64, 0u64, 0u64, 0u64);
    for (i, q) in set.questions.iter().enumerate() {
        let r = rng.gen_range(0..replies.len());
        answers.insert(i, replies[r].to_string());
        let said_yes = r == 0 || r == 2;
        let said_no = r == 1 || r == 3;
        let truth_yes = q.expected == Answer::Yes;
        match (said_yes, said_no, truth_yes) {
            (true, _, true) => tp += 1,
            (true, _, false) => fp += 1,
            (_, true, true) => fn_ += 1,
            (_, true, false) => tn += 1,
            _ => inv += 1,
        }
    }
    let report = score_pope(&set.questions, &answers).unwrap();
    let c = report.confusion;
    assert_eq!((c.tp, c.fp, c.tn, c.fn_, c.invalid), (tp, fp, tn, fn_, inv));
    let total = (tp + fp + tn + fn_ + inv) as f64;
    assert!((report.accuracy - (tp + tn) as f64 / total).abs() <= 1e-12);
    assert!((report.precision - tp as f64 / (tp + fp) as f64).abs() <= 1e-12);
    assert!((report.recall - tp as f64 / (tp + fn_) as f64).abs() <= 1e-12);
    assert!((report.yes_ratio - (tp + fp) as f64 / total).abs() <= 1e-12);
    let p = tp as f64 / (tp + fp) as f64;
    let r = tp as f64 / (tp + fn_) as f64;
    assert!((report.f1 - 2.0 * p * r / (p + r)).abs() <= 1e-12);
}

#[test]
fn all_yes_on_balanced_set() {
    let vocab: Vec<String> = (0..8).map(|i| format!("k{i}")).collect();
    let vocab_set: BTreeSet<String> = vocab.iter().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let annotations = random_annotations(&mut rng, &vocab, 30);
    let set =
        build_questions(&annotations, &build_cooccurrence(&annotations), &vocab_set, Setting::Random, 6, 0).unwrap();
    let answers = (0..set.questions.len()).map(|i| (i, "Yes".to_string())).collect();
    let report = score_pope(&set.questions, &answers).unwrap();
    assert_eq!(report.accuracy, 0.5);
    assert_eq!(report.yes_ratio, 1.0);
    assert_eq!(report.recall, 1.0);
    assert_eq!(parse_answer("Yes"), Answer::Yes);
}
