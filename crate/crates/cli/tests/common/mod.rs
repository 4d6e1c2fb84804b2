//! Helpers shared by the CLI integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use clap::Parser;
use groundguide::decode::DEFAULT_QUERY;
use groundguide::guidance::{build_bundle, read_detections, threshold_detections, BundleOptions, Thresholds};
use groundguide::toylm::{signature_of, TableFixture};
use groundguide::SynonymMap;
use groundguide_cli::guide::prompt_seed;
use groundguide_cli::{run, Cli, CliError};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Compares `actual` with a golden file; `UPDATE_GOLDEN=1` rewrites it first.
pub fn assert_golden(path: &Path, actual: &str) {
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(path, actual).unwrap();
    }
    let expected = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(actual, expected, "golden mismatch for {}", path.display());
}

/// Runs the CLI in-process, returning the result and captured standard output.
pub fn run_cli(args: &[&str]) -> (Result<(), CliError>, String) {
    let cli = Cli::try_parse_from(std::iter::once("groundguide").chain(args.iter().copied()))
        .unwrap_or_else(|e| panic!("bad test arguments: {e}"));
    let mut out = Vec::new();
    let result = run(cli, &mut out);
    (result, String::from_utf8(out).unwrap())
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub const CAPTION_VOCAB: [&str; 12] =
    ["<eos>", "a", "dog", "cat", "person", "frisbee", "fork", "with", "on", "the", "couch", "sitting"];

/// What the captioner says per image, with and without guidance.
pub fn caption_plans() -> Vec<(&'static str, Vec<&'static str>, Vec<&'static str>)> {
    vec![
        ("139", vec!["a", "dog", "with", "frisbee"], vec!["a", "dog", "with", "fork"]),
        ("285", vec!["a", "person", "sitting"], vec!["a", "person", "with", "dog"]),
        ("632", vec!["a", "cat"], vec!["a", "cat", "on", "the", "couch"]),
    ]
}

/// Guidance text per image for the fixture detections under default flags,
/// rebuilt from the library rather than taken from the CLI.
pub fn expected_guidance() -> BTreeMap<String, Option<String>> {
    let raw = read_detections(std::fs::File::open(fixture("detections.jsonl")).map(std::io::BufReader::new).unwrap())
        .unwrap();
    let kept = threshold_detections(&raw, &Thresholds::default()).unwrap();
    let models: BTreeSet<String> = raw.iter().map(|r| r.model_id.clone()).collect();
    let map = SynonymMap::coco();
    caption_plans()
        .into_iter()
        .map(|(id, _, _)| {
            let b = build_bundle(id, &kept, &models, &map, &BundleOptions::default(), prompt_seed(242, id)).unwrap();
            (id.to_string(), b.guidance_text)
        })
        .collect()
}

/// A table model that, for each image, continues its guided plan in the
/// conditional branch and its unguided plan in the unconditional branch,
/// with probability 0.6 on the planned token.
pub fn toy_captioner() -> TableFixture {
    let vocab: Vec<String> = CAPTION_VOCAB.iter().map(|s| s.to_string()).collect();
    let n = vocab.len();
    let id = |w: &str| vocab.iter().position(|v| v == w).unwrap();
    let peaked =
        |target: usize| -> Vec<f64> { (0..n).map(|i| if i == target { 0.6 } else { 0.4 / (n - 1) as f64 }).collect() };
    let guidance = expected_guidance();
    let mut table = BTreeMap::new();
    for (image, cond_plan, uncond_plan) in caption_plans() {
        let mut branches = vec![(DEFAULT_QUERY.to_string(), uncond_plan.clone())];
        if let Some(g) = &guidance[image] {
            branches.push((g.replace("<QUERY>", DEFAULT_QUERY), cond_plan.clone()));
        }
        for (prompt, own) in &branches {
            for seq in [&cond_plan, &uncond_plan] {
                for k in 0..=seq.len() {
                    let prefix = &seq[..k];
                    let target = if k < own.len() && own[..k] == *prefix { id(own[k]) } else { 0 };
                    let mut parts = vec![image.to_string(), prompt.clone()];
                    parts.extend(prefix.iter().map(|s| s.to_string()));
                    table.insert(signature_of(&parts), peaked(target));
                }
            }
        }
    }
    TableFixture { model_name: "toy-captioner".into(), vocab, eos: 0, table }
}
