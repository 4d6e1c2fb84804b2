//! Guided two-branch decoding.
//!
//! Every step evaluates the conditional context `[image, guidance, query, generated]`
//! and the unconditional context `[image, query, generated]`, blends the two
//! logit vectors as `gamma * cond + (1 - gamma) * uncond`, and picks the next
//! token from the blend. `gamma = 0` is plain unguided decoding, `gamma = 1`
//! decodes from the guided branch alone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, LogitVector, ModelBackend, TokenId};
use crate::guidance::QUERY_SLOT;

pub const DEFAULT_GAMMA: f64 = 0.7;
pub const DEFAULT_MAX_TOKENS: usize = 64;
pub const DEFAULT_SEED: u64 = 242;
pub const DEFAULT_QUERY: &str = "Generate a short caption of the image.";

#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error("logit vectors differ in length: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("backend failed at step {step}: {source}")]
    Backend {
        step: usize,
        #[source]
        source: BackendError,
    },
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    #[default]
    Greedy,
    Temperature(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub gamma: f64,
    pub max_tokens: usize,
    pub sampler: Sampler,
    pub seed: u64,
    pub stop_on_eos: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            max_tokens: DEFAULT_MAX_TOKENS,
            sampler: Sampler::Greedy,
            seed: DEFAULT_SEED,
            stop_on_eos: true,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(DecodeError::InvalidConfig(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if let Sampler::Temperature(t) = self.sampler {
            if !(t > 0.0 && t.is_finite()) {
                return Err(DecodeError::InvalidConfig(format!("temperature must be positive, got {t}")));
            }
        }
        Ok(())
    }
}

/// Linear map from mean detector confidence to guidance strength.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicGammaConfig {
    pub lo: f64,
    pub hi: f64,
    pub s_min: f64,
    pub s_max: f64,
}

impl Default for DynamicGammaConfig {
    fn default() -> Self {
        Self { lo: 0.4, hi: 0.8, s_min: 0.0, s_max: 1.0 }
    }
}

/// Dynamic guidance: the config plus the image's mean confidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicGamma {
    pub config: DynamicGammaConfig,
    pub mean_confidence: f64,
}

/// Maps `s` into `[lo, hi]`. `s` is clamped to `[s_min, s_max]`; a degenerate
/// range yields the midpoint.
pub fn dynamic_gamma(s: f64, cfg: &DynamicGammaConfig) -> f64 {
    let span = cfg.s_max - cfg.s_min;
    if span <= 0.0 || !span.is_finite() {
        return (cfg.lo + cfg.hi) / 2.0;
    }
    let s = s.clamp(cfg.s_min, cfg.s_max);
    let gamma = cfg.lo + (cfg.hi - cfg.lo) * (s - cfg.s_min) / span;
    gamma.clamp(cfg.lo, cfg.hi)
}

/// `gamma * cond + (1 - gamma) * uncond`, elementwise.
pub fn blend_logits(cond: &LogitVector, uncond: &LogitVector, gamma: f64) -> Result<LogitVector, DecodeError> {
    if cond.len() != uncond.len() {
        return Err(DecodeError::LengthMismatch { left: cond.len(), right: uncond.len() });
    }
    let values = cond.as_slice().iter().zip(uncond.as_slice()).map(|(&c, &u)| gamma * c + (1.0 - gamma) * u).collect();
    LogitVector::new(values).map_err(|e| DecodeError::InvalidConfig(format!("blend produced {e}")))
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax of `values / temperature`.
pub fn softmax(values: &[f64], temperature: f64) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|&v| ((v - max) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn select_token(logits: &LogitVector, sampler: Sampler, rng: &mut ChaCha8Rng) -> TokenId {
    let values = logits.as_slice();
    let index = match sampler {
        Sampler::Greedy => argmax(values),
        Sampler::Temperature(t) => {
            let probs = softmax(values, t);
            let draw: f64 = rng.gen();
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if draw < acc {
                    chosen = Some(i);
                    break;
                }
            }
            // rounding can leave `acc` just under 1.0
            chosen.unwrap_or_else(|| probs.iter().rposition(|&p| p > 0.0).unwrap_or(0))
        }
    };
    index as TokenId
}

/// One generation session.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationContext {
    pub image_ref: String,
    /// Guidance prompt; may hold a `<QUERY>` slot. `None` disables guidance.
    pub guidance_text: Option<String>,
    pub query_text: String,
    pub generated: Vec<TokenId>,
}

impl GenerationContext {
    pub fn new(image_ref: impl Into<String>, guidance_text: Option<String>, query: impl Into<String>) -> Self {
        Self { image_ref: image_ref.into(), guidance_text, query_text: query.into(), generated: Vec::new() }
    }

    fn has_guidance(&self) -> bool {
        self.guidance_text.as_deref().is_some_and(|g| !g.trim().is_empty())
    }

    /// Text of the conditional branch prompt: the guidance with the query in
    /// its slot, or guidance followed by the query when there is no slot.
    pub fn conditional_prompt(&self) -> String {
        match self.guidance_text.as_deref() {
            Some(g) if g.contains(QUERY_SLOT) => g.replace(QUERY_SLOT, &self.query_text),
            Some(g) if !g.trim().is_empty() => format!("{g} {}", self.query_text),
            _ => self.query_text.clone(),
        }
    }
}

/// Encoded branch prompts, ready for the step loop.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPrompts {
    pub cond: Vec<TokenId>,
    pub uncond: Vec<TokenId>,
}

pub fn encode_prompts<B: ModelBackend + ?Sized>(
    backend: &mut B,
    ctx: &GenerationContext,
) -> Result<EncodedPrompts, DecodeError> {
    let wrap = |source| DecodeError::Backend { step: 0, source };
    let cond = backend.encode(&ctx.conditional_prompt()).map_err(wrap)?;
    let uncond = backend.encode(&ctx.query_text).map_err(wrap)?;
    Ok(EncodedPrompts { cond, uncond })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Tokens produced in this call; a terminating eos is not included.
    pub tokens: Vec<TokenId>,
    pub text: String,
    /// Guidance strength actually applied.
    pub gamma: f64,
    /// Number of two-branch backend steps performed.
    pub steps: usize,
}

/// Strength used for `ctx`: 0 without guidance text, otherwise the dynamic
/// mapping when given, else `cfg.gamma`.
pub fn effective_gamma(ctx: &GenerationContext, cfg: &GenerationConfig, dynamic: Option<&DynamicGamma>) -> f64 {
    if !ctx.has_guidance() {
        return 0.0;
    }
    match dynamic {
        Some(d) => dynamic_gamma(d.mean_confidence, &d.config),
        None => cfg.gamma,
    }
}

/// Runs the step loop over already-encoded prompts, appending to `ctx.generated`.
/// Returns the new tokens and the number of steps taken.
pub fn generate_tokens<B: ModelBackend + ?Sized>(
    backend: &mut B,
    ctx: &mut GenerationContext,
    prompts: &EncodedPrompts,
    cfg: &GenerationConfig,
    gamma: f64,
) -> Result<(Vec<TokenId>, usize), DecodeError> {
    let vocab_size = backend.info().vocab_size;
    let eos = backend.info().eos_token;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut produced = Vec::new();
    let mut cond = prompts.cond.clone();
    cond.extend_from_slice(&ctx.generated);
    let mut uncond = prompts.uncond.clone();
    uncond.extend_from_slice(&ctx.generated);

    let mut steps = 0;
    while produced.len() < cfg.max_tokens {
        let (l_cond, l_uncond) = backend
            .step(&ctx.image_ref, &cond, &uncond)
            .map_err(|source| DecodeError::Backend { step: steps, source })?;
        steps += 1;
        for l in [&l_cond, &l_uncond] {
            if l.len() != vocab_size {
                return Err(DecodeError::LengthMismatch { left: vocab_size, right: l.len() });
            }
        }
        let blended = blend_logits(&l_cond, &l_uncond, gamma)?;
        let token = select_token(&blended, cfg.sampler, &mut rng);
        if cfg.stop_on_eos && token == eos {
            break;
        }
        produced.push(token);
        ctx.generated.push(token);
        cond.push(token);
        uncond.push(token);
    }
    Ok((produced, steps))
}

/// Guided generation for one context.
pub fn guided_generate<B: ModelBackend + ?Sized>(
    backend: &mut B,
    ctx: &mut GenerationContext,
    cfg: &GenerationConfig,
    dynamic: Option<&DynamicGamma>,
) -> Result<Generation, DecodeError> {
    cfg.validate()?;
    let gamma = effective_gamma(ctx, cfg, dynamic);
    let prompts = encode_prompts(backend, ctx)?;
    let (tokens, steps) = generate_tokens(backend, ctx, &prompts, cfg, gamma)?;
    let text = backend.decode(&tokens).map_err(|source| DecodeError::Backend { step: steps, source })?;
    Ok(Generation { tokens, text, gamma, steps })
}
