//! The two-branch language-model contract consumed by the decoder.

use serde::{Deserialize, Serialize};

pub type TokenId = u32;

/// What a backend declares about itself once connected.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandshakeInfo {
    pub vocab_size: usize,
    pub eos_token: TokenId,
    pub model_name: String,
}

/// A finite logit vector over the backend vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("logit {index} is not finite ({value})")]
pub struct NonFiniteLogit {
    pub index: usize,
    pub value: f64,
}

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self, NonFiniteLogit> {
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(NonFiniteLogit { index, value });
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("backend timed out after {0:?}")]
    Timeout(std::time::Duration),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("backend reported an error: {0}")]
    Remote(String),
    #[error("expected {expected} logits, got {actual}")]
    VocabSizeMismatch { expected: usize, actual: usize },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A language model that evaluates a conditional and an unconditional context
/// in one step.
///
/// Token sequences passed to [`step`](ModelBackend::step) are full contexts:
/// the encoded prompt followed by every token generated so far. The image is
/// referenced by an opaque string only the backend interprets.
pub trait ModelBackend {
    fn info(&self) -> &HandshakeInfo;

    fn encode(&mut self, text: &str) -> Result<Vec<TokenId>, BackendError>;

    fn decode(&mut self, ids: &[TokenId]) -> Result<String, BackendError>;

    /// Returns `(conditional, unconditional)` logits for the next token.
    fn step(
        &mut self,
        image_ref: &str,
        cond_tokens: &[TokenId],
        uncond_tokens: &[TokenId],
    ) -> Result<(LogitVector, LogitVector), BackendError>;
}

impl<B: ModelBackend + ?Sized> ModelBackend for Box<B> {
    fn info(&self) -> &HandshakeInfo {
        (**self).info()
    }

    fn encode(&mut self, text: &str) -> Result<Vec<TokenId>, BackendError> {
        (**self).encode(text)
    }

    fn decode(&mut self, ids: &[TokenId]) -> Result<String, BackendError> {
        (**self).decode(ids)
    }

    fn step(
        &mut self,
        image_ref: &str,
        cond_tokens: &[TokenId],
        uncond_tokens: &[TokenId],
    ) -> Result<(LogitVector, LogitVector), BackendError> {
        (**self).step(image_ref, cond_tokens, uncond_tokens)
    }
}
