//! `chair`, `pope-build` and `pope-score`.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Args;
use groundguide::metrics::{read_annotations, read_captions, score_chair, AnnotationRecord};
use groundguide::pope::{build_cooccurrence, build_questions, read_answers, read_questions, score_pope, PopeQuestion};
use groundguide::SynonymMap;
use serde::Serialize;

use crate::guide::sample_indices;
use crate::manifest::{ConfigSnapshot, RunManifest, SCHEMA_VERSION};
use crate::{open_input, print_json, write_jsonl, write_manifest, CliError, CliResult, SettingArg};

#[derive(Debug, Clone, Args)]
pub struct ChairArgs {
    #[arg(long)]
    pub captions: PathBuf,
    #[arg(long)]
    pub annotations: PathBuf,
    /// Synonym map JSON; defaults to the bundled COCO list.
    #[arg(long)]
    pub synonyms: Option<PathBuf>,
    /// Also write the report here, with a manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PopeBuildArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long, value_enum, default_value_t = SettingArg::Adversarial)]
    pub setting: SettingArg,
    /// Questions per image, half yes and half no.
    #[arg(long, default_value_t = 6)]
    pub questions_per_image: usize,
    #[arg(long, default_value_t = groundguide::decode::DEFAULT_SEED)]
    pub seed: u64,
    /// Build questions for a seeded random subset of N images.
    #[arg(long)]
    pub sample: Option<usize>,
    /// Object vocabulary for negatives: `annotations` (every annotated label),
    /// `coco`, or a synonym map JSON path.
    #[arg(long, default_value = "annotations")]
    pub vocabulary: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct PopeScoreArgs {
    #[arg(long)]
    pub questions: PathBuf,
    #[arg(long)]
    pub answers: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn load_synonyms(path: Option<&Path>, manifest: &mut RunManifest) -> CliResult<SynonymMap> {
    match path {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::at_path(path, e))?;
            manifest.add_input(path).map_err(|e| CliError::at_path(path, e))?;
            SynonymMap::from_json(&text).map_err(|e| CliError::at_path(path, e))
        }
        None => Ok(SynonymMap::coco()),
    }
}

fn load_annotations(path: &Path, manifest: &mut RunManifest) -> CliResult<Vec<AnnotationRecord>> {
    let anns = read_annotations(open_input(path)?).map_err(|e| CliError::at_path(path, e))?;
    manifest.add_input(path).map_err(|e| CliError::at_path(path, e))?;
    Ok(anns)
}

fn write_report<T: Serialize>(path: &Path, report: &T, manifest: RunManifest) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(report).expect("report serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::at_path(path, e))?;
    write_manifest(manifest, path)
}

pub fn cmd_chair(args: &ChairArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut manifest = RunManifest::new("chair", ConfigSnapshot::default());
    let captions = read_captions(open_input(&args.captions)?).map_err(|e| CliError::at_path(&args.captions, e))?;
    manifest.add_input(&args.captions).map_err(|e| CliError::at_path(&args.captions, e))?;
    let annotations = load_annotations(&args.annotations, &mut manifest)?;
    let synonyms = load_synonyms(args.synonyms.as_deref(), &mut manifest)?;
    let report = score_chair(&captions, &annotations, &synonyms).map_err(|e| CliError::Input(e.to_string()))?;
    print_json(out, &report)?;
    if let Some(path) = &args.out {
        write_report(path, &report, manifest)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct QuestionOut<'a> {
    schema_version: u32,
    question_id: usize,
    #[serde(flatten)]
    question: &'a PopeQuestion,
}

pub fn cmd_pope_build(args: &PopeBuildArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut manifest = RunManifest::new("pope-build", ConfigSnapshot::default());
    manifest.config.seed = args.seed;
    manifest.config.sample = args.sample;
    manifest.param("setting", groundguide::pope::Setting::from(args.setting));
    manifest.param("questions_per_image", args.questions_per_image);
    manifest.param("vocabulary", &args.vocabulary);

    let annotations = load_annotations(&args.annotations, &mut manifest)?;
    let vocabulary: BTreeSet<String> = match args.vocabulary.as_str() {
        "annotations" => annotations.iter().flat_map(|a| a.objects.iter().cloned()).collect(),
        "coco" => SynonymMap::coco().vocabulary().clone(),
        path => load_synonyms(Some(Path::new(path)), &mut manifest)?.vocabulary().clone(),
    };
    // co-occurrence statistics always come from the full annotation set
    let stats = build_cooccurrence(&annotations);
    let selected: Vec<AnnotationRecord> = match args.sample {
        Some(n) => {
            let mut ids: Vec<&str> = Vec::new();
            for a in &annotations {
                if !ids.contains(&a.image_id.as_str()) {
                    ids.push(&a.image_id);
                }
            }
            let keep: BTreeSet<&str> = sample_indices(ids.len(), n, args.seed).into_iter().map(|i| ids[i]).collect();
            annotations.iter().filter(|a| keep.contains(a.image_id.as_str())).cloned().collect()
        }
        None => annotations.clone(),
    };

    let set = build_questions(&selected, &stats, &vocabulary, args.setting.into(), args.questions_per_image, args.seed)
        .map_err(|e| CliError::Input(e.to_string()))?;
    let records: Vec<QuestionOut> = set
        .questions
        .iter()
        .enumerate()
        .map(|(question_id, question)| QuestionOut { schema_version: SCHEMA_VERSION, question_id, question })
        .collect();
    write_jsonl(&args.out, &records)?;
    manifest.param("shortfalls", &set.shortfalls);
    write_manifest(manifest, &args.out)?;
    let _ = writeln!(
        out,
        "wrote {} questions to {}; images with fewer than {} questions: {}",
        records.len(),
        args.out.display(),
        args.questions_per_image,
        set.shortfalls.len()
    );
    Ok(())
}

pub fn cmd_pope_score(args: &PopeScoreArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut manifest = RunManifest::new("pope-score", ConfigSnapshot::default());
    let questions = read_questions(open_input(&args.questions)?).map_err(|e| CliError::at_path(&args.questions, e))?;
    manifest.add_input(&args.questions).map_err(|e| CliError::at_path(&args.questions, e))?;
    let answers = read_answers(open_input(&args.answers)?).map_err(|e| CliError::at_path(&args.answers, e))?;
    manifest.add_input(&args.answers).map_err(|e| CliError::at_path(&args.answers, e))?;
    let report = score_pope(&questions, &answers).map_err(|e| CliError::Input(e.to_string()))?;
    print_json(out, &report)?;
    if let Some(path) = &args.out {
        write_report(path, &report, manifest)?;
    }
    Ok(())
}
