//! `bench`: wall-clock milliseconds per output token.
//!
//! Each run encodes the prompts and then generates exactly `max_tokens`
//! tokens with eos stopping disabled. Latency is the encode plus generation
//! time divided by the number of output tokens.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use groundguide::decode::{encode_prompts, generate_tokens, GenerationConfig, GenerationContext, DEFAULT_GAMMA};
use groundguide::guidance::{build_guidance_prompt, TemplateSet};
use groundguide::Sampler;
use serde::{Deserialize, Serialize};

use crate::guide::{backend_identity, decode_failure, open_backend, prompt_seed};
use crate::manifest::{BackendIdentity, ConfigSnapshot, RunManifest};
use crate::{print_json, write_manifest, BackendSpec, CliError, CliResult};

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub backend: BackendSpec,
    /// Number of timed runs, one synthetic image each.
    #[arg(long, default_value_t = 10)]
    pub n_images: usize,
    #[arg(long, default_value_t = groundguide::decode::DEFAULT_MAX_TOKENS)]
    pub max_tokens: usize,
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    pub gamma: f64,
    /// Comma-separated objects for the guidance prompt; empty runs unguided.
    #[arg(long, default_value = "person,dog")]
    pub objects: String,
    #[arg(long, default_value_t = crate::default_query())]
    pub query: String,
    #[arg(long, default_value_t = groundguide::decode::DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long, default_value_t = 120)]
    pub timeout_secs: u64,
    /// Also write the report here, with a manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRun {
    pub image_ref: String,
    pub output_tokens: usize,
    pub steps: usize,
    pub encode_ms: f64,
    pub generate_ms: f64,
    pub ms_per_token: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub backend: BackendIdentity,
    pub runs: Vec<BenchRun>,
    pub total_output_tokens: usize,
    pub total_ms: f64,
    pub ms_per_token: f64,
}

fn per_token(ms: f64, tokens: usize) -> f64 {
    if tokens == 0 {
        0.0
    } else {
        ms / tokens as f64
    }
}

pub fn run_bench(args: &BenchArgs) -> CliResult<BenchReport> {
    if args.n_images == 0 {
        return Err(CliError::Input("--n-images must be at least 1".into()));
    }
    if args.max_tokens == 0 {
        return Err(CliError::Input("--max-tokens must be at least 1".into()));
    }
    let cfg = GenerationConfig {
        gamma: args.gamma,
        max_tokens: args.max_tokens,
        sampler: Sampler::Greedy,
        seed: args.seed,
        stop_on_eos: false,
    };
    cfg.validate().map_err(|e| CliError::Input(e.to_string()))?;
    let objects: Vec<String> =
        args.objects.split(',').map(str::trim).filter(|o| !o.is_empty()).map(String::from).collect();

    let mut backend = open_backend(&args.backend, args.timeout_secs)?;
    let mut runs = Vec::with_capacity(args.n_images);
    for i in 0..args.n_images {
        let image_ref = format!("bench-{i:04}");
        let guidance = if objects.is_empty() {
            None
        } else {
            let seed = prompt_seed(args.seed, &image_ref);
            Some(build_guidance_prompt(&objects, TemplateSet::Intersec, seed).expect("objects are non-empty").0)
        };
        let mut ctx = GenerationContext::new(image_ref.as_str(), guidance, args.query.as_str());
        let gamma = if ctx.guidance_text.is_some() { args.gamma } else { 0.0 };

        let start = Instant::now();
        let prompts = encode_prompts(&mut backend, &ctx).map_err(|e| decode_failure(&image_ref, e))?;
        let encoded = Instant::now();
        let (tokens, steps) = generate_tokens(&mut backend, &mut ctx, &prompts, &cfg, gamma)
            .map_err(|e| decode_failure(&image_ref, e))?;
        let done = Instant::now();

        let encode_ms = (encoded - start).as_secs_f64() * 1e3;
        let generate_ms = (done - encoded).as_secs_f64() * 1e3;
        runs.push(BenchRun {
            image_ref,
            output_tokens: tokens.len(),
            steps,
            encode_ms,
            generate_ms,
            ms_per_token: per_token(encode_ms + generate_ms, tokens.len()),
        });
    }
    let total_output_tokens = runs.iter().map(|r| r.output_tokens).sum();
    let total_ms = runs.iter().map(|r| r.encode_ms + r.generate_ms).sum();
    Ok(BenchReport {
        backend: backend_identity(&args.backend, backend.as_ref()),
        runs,
        total_output_tokens,
        total_ms,
        ms_per_token: per_token(total_ms, total_output_tokens),
    })
}

pub fn cmd_bench(args: &BenchArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut manifest = RunManifest::new("bench", ConfigSnapshot::default());
    let report = run_bench(args)?;
    print_json(out, &report)?;
    if let Some(path) = &args.out {
        manifest.config.gamma = args.gamma;
        manifest.config.max_tokens = args.max_tokens;
        manifest.config.seed = args.seed;
        manifest.config.query = args.query.clone();
        manifest.config.backend = Some(report.backend.clone());
        manifest.param("n_images", args.n_images);
        manifest.param("objects", &args.objects);
        manifest.param("stop_on_eos", false);
        let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| CliError::at_path(path, e))?;
        write_manifest(manifest, path)?;
    }
    Ok(())
}
