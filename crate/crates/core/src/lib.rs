//! Image-grounded classifier-free guidance for vision-language decoding, plus
//! the object-hallucination metrics used to evaluate it.
//!
//! - [`guidance`]: detections to a guidance prompt.
//! - [`decode`]: two-branch guided generation over a [`backend::ModelBackend`].
//! - [`toylm`]: a table-driven backend for tests and demos.
//! - [`bridge`]: newline-delimited JSON protocol for out-of-process models.
//! - [`metrics`]: the CHAIR metric.
//! - [`pope`]: POPE question sets and scoring.

pub mod backend;
pub mod bridge;
pub mod decode;
pub mod guidance;
pub mod metrics;
pub mod pope;
pub mod toylm;

pub use backend::{BackendError, HandshakeInfo, LogitVector, ModelBackend, TokenId};
pub use decode::{
    blend_logits, dynamic_gamma, guided_generate, select_token, DynamicGamma, DynamicGammaConfig, Generation,
    GenerationConfig, GenerationContext, Sampler,
};
pub use guidance::{GuidanceBundle, SynonymMap};
