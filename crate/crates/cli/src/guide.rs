//! `guide` and `pope-answer`: guided generation over a set of images.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::Args;
use groundguide::decode::{DecodeError, DynamicGamma, DynamicGammaConfig, GenerationConfig, GenerationContext};
use groundguide::guidance::{
    build_bundle, read_detections, threshold_detections, BundleOptions, DetectionRecord, GuidanceBundle, GuidanceError,
    TemplateSet, Thresholds,
};
use groundguide::metrics::read_annotations;
use groundguide::pope::read_questions;
use groundguide::{guided_generate, ModelBackend, SynonymMap, TokenId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend_spec::{BackendSpec, OpenError};
use crate::manifest::{BackendIdentity, ConfigSnapshot, RunManifest, SCHEMA_VERSION};
use crate::{open_input, write_jsonl, write_manifest, CliError, CliResult, DecodeArgs, GuidanceArgs};

#[derive(Debug, Clone, Args)]
pub struct GuideArgs {
    #[command(flatten)]
    pub guidance: GuidanceArgs,
    #[command(flatten)]
    pub decode: DecodeArgs,
    /// Annotation JSONL whose image ids define the images to caption.
    /// Without it, images are taken from the detections.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long, default_value_t = crate::default_query())]
    pub query: String,
    /// Prefix joined to each image id to form the image reference sent to the model.
    #[arg(long)]
    pub image_root: Option<String>,
    /// Caption a seeded random subset of N images.
    #[arg(long)]
    pub sample: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-image JSONL with the guidance, gamma and tokens used.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PopeAnswerArgs {
    #[command(flatten)]
    pub guidance: GuidanceArgs,
    #[command(flatten)]
    pub decode: DecodeArgs,
    /// Questions JSONL from `pope-build`.
    #[arg(long)]
    pub questions: PathBuf,
    #[arg(long)]
    pub image_root: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionOut {
    pub schema_version: u32,
    pub image_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceOut {
    pub image_id: String,
    pub objects: Vec<String>,
    pub mean_confidence: f64,
    pub guidance_text: Option<String>,
    pub template_index: Option<usize>,
    pub gamma: f64,
    pub tokens: Vec<TokenId>,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerOut {
    pub schema_version: u32,
    pub question_id: usize,
    pub text: String,
}

/// Per-image template seed: the run seed mixed with an FNV-1a hash of the id,
/// so an image's template does not depend on which other images are in the run.
pub fn prompt_seed(seed: u64, image_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in image_id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    seed ^ h
}

/// Seeded subset of `len` positions, returned in ascending order.
pub fn sample_indices(len: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, len, n.min(len)).into_vec();
    picked.sort_unstable();
    picked
}

/// Detections after loading and thresholding, plus everything needed to bundle them.
pub struct GuidanceSource {
    pub records: Vec<DetectionRecord>,
    pub model_ids: BTreeSet<String>,
    pub synonyms: SynonymMap,
    pub thresholds: Thresholds,
    pub options: BundleOptions,
    pub seed: u64,
    /// Image ids in first-appearance order across the detection files.
    pub image_order: Vec<String>,
}

impl GuidanceSource {
    pub fn load(
        args: &GuidanceArgs,
        default_templates: TemplateSet,
        seed: u64,
        manifest: &mut RunManifest,
    ) -> CliResult<Self> {
        let mut raw = Vec::new();
        for path in &args.detections {
            let records = read_detections(open_input(path)?).map_err(|e| CliError::at_path(path, e))?;
            manifest.add_input(path).map_err(|e| CliError::at_path(path, e))?;
            raw.extend(records);
        }
        let synonyms = match &args.synonyms {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| CliError::at_path(path, e))?;
                manifest.add_input(path).map_err(|e| CliError::at_path(path, e))?;
                SynonymMap::from_json(&text).map_err(|e| CliError::at_path(path, e))?
            }
            None => SynonymMap::coco(),
        };
        let mut thresholds = Thresholds::default();
        for (model, value) in &args.thresholds {
            thresholds.set(model, *value);
        }
        let records = threshold_detections(&raw, &thresholds).map_err(|e| CliError::Input(e.to_string()))?;
        let model_ids = raw.iter().map(|r| r.model_id.clone()).collect();
        let mut image_order = Vec::new();
        let mut seen = BTreeSet::new();
        for r in &raw {
            if seen.insert(r.image_id.as_str()) {
                image_order.push(r.image_id.clone());
            }
        }
        let options = BundleOptions {
            mode: args.agg.into(),
            template_set: args.template_set.map(Into::into).unwrap_or(default_templates),
            empty_policy: args.empty_guidance.into(),
        };
        Ok(Self { records, model_ids, synonyms, thresholds, options, seed, image_order })
    }

    pub fn bundle(&self, image_id: &str) -> CliResult<GuidanceBundle> {
        build_bundle(
            image_id,
            &self.records,
            &self.model_ids,
            &self.synonyms,
            &self.options,
            prompt_seed(self.seed, image_id),
        )
        .map_err(|e| match e {
            GuidanceError::EmptyObjects => {
                CliError::Input(format!("image {image_id}: no objects survived and --empty-guidance is error"))
            }
            other => CliError::Input(format!("image {image_id}: {other}")),
        })
    }
}

/// Resolves the dynamic-gamma range, defaulting to the extremes of `means`.
pub fn dynamic_config(args: &GuidanceArgs, means: &[f64]) -> Option<DynamicGammaConfig> {
    if !args.dynamic_gamma {
        return None;
    }
    let lo_s = means.iter().copied().fold(f64::INFINITY, f64::min);
    let hi_s = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo_s, hi_s) = if means.is_empty() { (0.0, 1.0) } else { (lo_s, hi_s) };
    Some(DynamicGammaConfig {
        lo: args.gamma_lo,
        hi: args.gamma_hi,
        s_min: args.s_min.unwrap_or(lo_s),
        s_max: args.s_max.unwrap_or(hi_s),
    })
}

pub fn generation_config(args: &GuidanceArgs, decode: &DecodeArgs) -> CliResult<GenerationConfig> {
    let cfg = GenerationConfig {
        gamma: args.gamma,
        max_tokens: decode.max_tokens,
        sampler: decode.sampler,
        seed: decode.seed,
        stop_on_eos: true,
    };
    cfg.validate().map_err(|e| CliError::Input(e.to_string()))?;
    if args.dynamic_gamma && !(0.0 <= args.gamma_lo && args.gamma_lo <= args.gamma_hi && args.gamma_hi <= 1.0) {
        return Err(CliError::Input("need 0 <= --gamma-lo <= --gamma-hi <= 1".into()));
    }
    Ok(cfg)
}

pub fn open_backend(spec: &BackendSpec, timeout_secs: u64) -> CliResult<Box<dyn ModelBackend>> {
    spec.open(Duration::from_secs(timeout_secs)).map_err(|e| match e {
        OpenError::Input(m) => CliError::Input(m),
        OpenError::Backend(e) => CliError::Backend { image_id: None, message: format!("{spec}: {e}") },
    })
}

pub fn backend_identity(spec: &BackendSpec, backend: &dyn ModelBackend) -> BackendIdentity {
    let info = backend.info();
    BackendIdentity {
        spec: spec.to_string(),
        model_name: info.model_name.clone(),
        vocab_size: info.vocab_size,
        eos_token: info.eos_token,
    }
}

pub fn decode_failure(image_id: &str, err: DecodeError) -> CliError {
    match err {
        DecodeError::InvalidConfig(m) => CliError::Input(m),
        other => CliError::Backend { image_id: Some(image_id.to_string()), message: other.to_string() },
    }
}

fn image_ref(root: Option<&str>, image_id: &str) -> String {
    match root {
        Some(root) => Path::new(root).join(image_id).display().to_string(),
        None => image_id.to_string(),
    }
}

fn snapshot(args: &GuidanceArgs, decode: &DecodeArgs, source: &GuidanceSource, query: &str) -> ConfigSnapshot {
    ConfigSnapshot {
        gamma: args.gamma,
        dynamic_gamma: None,
        thresholds: source.thresholds.clone(),
        aggregation: source.options.mode,
        template_set: source.options.template_set,
        empty_guidance: source.options.empty_policy,
        sampler: decode.sampler,
        seed: decode.seed,
        max_tokens: decode.max_tokens,
        query: query.to_string(),
        sample: None,
        backend: None,
    }
}

pub fn cmd_guide(args: &GuideArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut manifest = RunManifest::new("guide", ConfigSnapshot::default());
    let default_templates = match args.guidance.agg {
        crate::AggArg::Intersection => TemplateSet::Intersec,
        crate::AggArg::Union => TemplateSet::Union,
    };
    let cfg = generation_config(&args.guidance, &args.decode)?;
    let source = GuidanceSource::load(&args.guidance, default_templates, args.decode.seed, &mut manifest)?;

    let mut images = match &args.annotations {
        Some(path) => {
            let anns = read_annotations(open_input(path)?).map_err(|e| CliError::at_path(path, e))?;
            manifest.add_input(path).map_err(|e| CliError::at_path(path, e))?;
            let mut seen = BTreeSet::new();
            anns.into_iter().filter(|a| seen.insert(a.image_id.clone())).map(|a| a.image_id).collect()
        }
        None => source.image_order.clone(),
    };
    if images.is_empty() {
        return Err(CliError::Input("no images: pass --annotations or non-empty --detections".into()));
    }
    if let Some(n) = args.sample {
        let keep = sample_indices(images.len(), n, args.decode.seed);
        images = keep.into_iter().map(|i| images[i].clone()).collect();
    }

    let bundles = images.iter().map(|id| source.bundle(id)).collect::<CliResult<Vec<_>>>()?;
    let means: Vec<f64> = bundles.iter().filter(|b| b.guidance_text.is_some()).map(|b| b.mean_confidence).collect();
    let dynamic = dynamic_config(&args.guidance, &means);

    let mut backend = open_backend(&args.decode.backend, args.decode.timeout_secs)?;
    let mut config = snapshot(&args.guidance, &args.decode, &source, &args.query);
    config.dynamic_gamma = dynamic;
    config.sample = args.sample;
    config.backend = Some(backend_identity(&args.decode.backend, backend.as_ref()));
    manifest.config = config;
    manifest.param("image_root", &args.image_root);
    manifest.param("images", images.len());

    let mut captions = Vec::with_capacity(bundles.len());
    let mut traces = Vec::with_capacity(bundles.len());
    for bundle in bundles {
        let mut ctx = GenerationContext::new(
            image_ref(args.image_root.as_deref(), &bundle.image_id),
            bundle.guidance_text.clone(),
            args.query.as_str(),
        );
        let dyn_gamma = dynamic.map(|config| DynamicGamma { config, mean_confidence: bundle.mean_confidence });
        let generation = guided_generate(&mut backend, &mut ctx, &cfg, dyn_gamma.as_ref())
            .map_err(|e| decode_failure(&bundle.image_id, e))?;
        captions.push(CaptionOut {
            schema_version: SCHEMA_VERSION,
            image_id: bundle.image_id.clone(),
            text: generation.text,
        });
        traces.push(TraceOut {
            image_id: bundle.image_id,
            objects: bundle.objects,
            mean_confidence: bundle.mean_confidence,
            guidance_text: bundle.guidance_text,
            template_index: bundle.template_index,
            gamma: generation.gamma,
            tokens: generation.tokens,
            steps: generation.steps,
        });
    }

    write_jsonl(&args.out, &captions)?;
    if let Some(trace) = &args.trace {
        write_jsonl(trace, &traces)?;
    }
    write_manifest(manifest, &args.out)?;
    let _ = writeln!(out, "wrote {} captions to {}", captions.len(), args.out.display());
    Ok(())
}

pub fn cmd_pope_answer(args: &PopeAnswerArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut manifest = RunManifest::new("pope-answer", ConfigSnapshot::default());
    let cfg = generation_config(&args.guidance, &args.decode)?;
    let source = GuidanceSource::load(&args.guidance, TemplateSet::Pope, args.decode.seed, &mut manifest)?;
    let questions = read_questions(open_input(&args.questions)?).map_err(|e| CliError::at_path(&args.questions, e))?;
    manifest.add_input(&args.questions).map_err(|e| CliError::at_path(&args.questions, e))?;

    let mut bundles: BTreeMap<&str, GuidanceBundle> = BTreeMap::new();
    for q in &questions {
        if !bundles.contains_key(q.image_id.as_str()) {
            bundles.insert(&q.image_id, source.bundle(&q.image_id)?);
        }
    }
    let means: Vec<f64> = bundles.values().filter(|b| b.guidance_text.is_some()).map(|b| b.mean_confidence).collect();
    let dynamic = dynamic_config(&args.guidance, &means);

    let mut backend = open_backend(&args.decode.backend, args.decode.timeout_secs)?;
    let mut config = snapshot(&args.guidance, &args.decode, &source, "");
    config.dynamic_gamma = dynamic;
    config.backend = Some(backend_identity(&args.decode.backend, backend.as_ref()));
    manifest.config = config;
    manifest.param("image_root", &args.image_root);

    let mut answers = Vec::with_capacity(questions.len());
    for (question_id, q) in questions.iter().enumerate() {
        let bundle = &bundles[q.image_id.as_str()];
        let mut ctx = GenerationContext::new(
            image_ref(args.image_root.as_deref(), &q.image_id),
            bundle.guidance_text.clone(),
            q.question_text.as_str(),
        );
        let dyn_gamma = dynamic.map(|config| DynamicGamma { config, mean_confidence: bundle.mean_confidence });
        let generation = guided_generate(&mut backend, &mut ctx, &cfg, dyn_gamma.as_ref())
            .map_err(|e| decode_failure(&q.image_id, e))?;
        answers.push(AnswerOut { schema_version: SCHEMA_VERSION, question_id, text: generation.text });
    }
    write_jsonl(&args.out, &answers)?;
    write_manifest(manifest, &args.out)?;
    let _ = writeln!(out, "wrote {} answers to {}", answers.len(), args.out.display());
    Ok(())
}
