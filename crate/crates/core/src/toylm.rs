//! A table-driven language model for tests and desk-scale demos.
//!
//! The model maps a context signature to a next-token distribution. A
//! signature is the image reference, the prompt text and the string of every
//! generated token, joined by the ASCII unit separator (`\u{1f}`). Contexts
//! missing from the table get a uniform distribution.
//!
//! Prompt text is encoded one token per character, offset past the vocabulary
//! so that text ids never collide with vocabulary ids.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, HandshakeInfo, LogitVector, ModelBackend, TokenId};

pub const SIGNATURE_SEPARATOR: char = '\u{1f}';

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("vocabulary is empty")]
    EmptyVocab,
    #[error("eos token {eos} outside vocabulary of size {size}")]
    EosOutOfRange { eos: TokenId, size: usize },
    #[error("entry `{signature}`: {reason}")]
    BadEntry { signature: String, reason: String },
    #[error("fixture is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// On-disk form of a [`TableModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableFixture {
    #[serde(default = "default_model_name")]
    pub model_name: String,
    pub vocab: Vec<String>,
    pub eos: TokenId,
    pub table: BTreeMap<String, Vec<f64>>,
}

fn default_model_name() -> String {
    "table-model".to_string()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableModel {
    fixture: TableFixture,
    info: HandshakeInfo,
}

impl TableModel {
    pub fn new(fixture: TableFixture) -> Result<Self, FixtureError> {
        let size = fixture.vocab.len();
        if size == 0 {
            return Err(FixtureError::EmptyVocab);
        }
        if fixture.eos as usize >= size {
            return Err(FixtureError::EosOutOfRange { eos: fixture.eos, size });
        }
        for (signature, probs) in &fixture.table {
            let bad = |reason: String| FixtureError::BadEntry { signature: signature.clone(), reason };
            if probs.len() != size {
                return Err(bad(format!("{} probabilities for vocab of {size}", probs.len())));
            }
            if probs.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
                return Err(bad("probabilities must be strictly positive".into()));
            }
            let total: f64 = probs.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(bad(format!("probabilities sum to {total}")));
            }
        }
        let info = HandshakeInfo { vocab_size: size, eos_token: fixture.eos, model_name: fixture.model_name.clone() };
        Ok(Self { fixture, info })
    }

    pub fn from_json(text: &str) -> Result<Self, FixtureError> {
        Self::new(serde_json::from_str(text)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, FixtureError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn fixture(&self) -> &TableFixture {
        &self.fixture
    }

    pub fn vocab(&self) -> &[String] {
        &self.fixture.vocab
    }

    pub fn token_id(&self, token: &str) -> Option<TokenId> {
        self.fixture.vocab.iter().position(|t| t == token).map(|i| i as TokenId)
    }

    /// Distribution stored for `signature`, or uniform.
    pub fn distribution(&self, signature: &str) -> Vec<f64> {
        match self.fixture.table.get(signature) {
            Some(p) => p.clone(),
            None => {
                let n = self.fixture.vocab.len();
                vec![1.0 / n as f64; n]
            }
        }
    }

    pub fn log_probs(&self, signature: &str) -> LogitVector {
        LogitVector::new(self.distribution(signature).into_iter().map(f64::ln).collect())
            .expect("stored probabilities are positive")
    }

    /// Signature of a context given as image reference plus token ids.
    pub fn signature(&self, image_ref: &str, tokens: &[TokenId]) -> Result<String, BackendError> {
        let mut parts = vec![image_ref.to_string()];
        let mut text = String::new();
        for &id in tokens {
            match self.piece(id)? {
                Piece::Char(c) => text.push(c),
                Piece::Token(t) => {
                    if !text.is_empty() {
                        parts.push(std::mem::take(&mut text));
                    }
                    parts.push(t.to_string());
                }
            }
        }
        if !text.is_empty() {
            parts.push(text);
        }
        Ok(parts.join(&SIGNATURE_SEPARATOR.to_string()))
    }

    fn piece(&self, id: TokenId) -> Result<Piece<'_>, BackendError> {
        let size = self.fixture.vocab.len() as TokenId;
        if id < size {
            return Ok(Piece::Token(&self.fixture.vocab[id as usize]));
        }
        char::from_u32(id - size)
            .map(Piece::Char)
            .ok_or_else(|| BackendError::Invalid(format!("token id {id} is not decodable")))
    }

    /// Log-probabilities for both branch signatures.
    pub fn toy_step(&self, cond_sig: &str, uncond_sig: &str) -> (LogitVector, LogitVector) {
        (self.log_probs(cond_sig), self.log_probs(uncond_sig))
    }
}

enum Piece<'a> {
    Char(char),
    Token(&'a str),
}

/// Builds a signature from its parts.
pub fn signature_of<S: AsRef<str>>(parts: &[S]) -> String {
    parts.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(&SIGNATURE_SEPARATOR.to_string())
}

impl ModelBackend for TableModel {
    fn info(&self) -> &HandshakeInfo {
        &self.info
    }

    fn encode(&mut self, text: &str) -> Result<Vec<TokenId>, BackendError> {
        let offset = self.fixture.vocab.len() as u32;
        Ok(text.chars().map(|c| offset + c as u32).collect())
    }

    /// Prompt characters are copied verbatim; vocabulary tokens are joined with single spaces.
    fn decode(&mut self, ids: &[TokenId]) -> Result<String, BackendError> {
        let mut out = String::new();
        let mut last_was_token = false;
        for &id in ids {
            match self.piece(id)? {
                Piece::Char(c) => {
                    out.push(c);
                    last_was_token = false;
                }
                Piece::Token(t) => {
                    if last_was_token {
                        out.push(' ');
                    }
                    out.push_str(t);
                    last_was_token = true;
                }
            }
        }
        Ok(out)
    }

    fn step(
        &mut self,
        image_ref: &str,
        cond_tokens: &[TokenId],
        uncond_tokens: &[TokenId],
    ) -> Result<(LogitVector, LogitVector), BackendError> {
        let cond = self.signature(image_ref, cond_tokens)?;
        let uncond = self.signature(image_ref, uncond_tokens)?;
        Ok(self.toy_step(&cond, &uncond))
    }
}

/// A fixture where guidance suppresses one hallucinated object.
#[derive(Debug, Clone)]
pub struct BiasedFixture {
    pub model: TableModel,
    pub image_ref: String,
    /// Guidance text with a `<QUERY>` slot.
    pub guidance_text: String,
    pub query: String,
    /// The hallucination token.
    pub hallucination: TokenId,
    /// The correct token that competes with it.
    pub grounded: TokenId,
    /// Step (0-based) at which the two branches disagree.
    pub step: usize,
    /// Tokens generated before that step.
    pub prefix: Vec<TokenId>,
}

pub const BIASED_UNCOND_P: f64 = 0.6;
pub const BIASED_COND_P: f64 = 0.05;

/// Builds the biased fixture. Both branches agree on `a dog with`; then the
/// unguided branch puts 0.6 on `fork` while the guided branch puts 0.05 on it
/// and favors `frisbee`. Either object is followed by eos.
pub fn make_biased_fixture() -> BiasedFixture {
    let vocab: Vec<String> =
        ["<eos>", "a", "dog", "with", "fork", "frisbee", "on", "grass"].iter().map(|s| s.to_string()).collect();
    let (eos, a, dog, with, fork, frisbee) = (0u32, 1u32, 2u32, 3u32, 4u32, 5u32);
    let image_ref = "coco/000000000139.jpg".to_string();
    let query = crate::decode::DEFAULT_QUERY.to_string();
    let guidance_text = "This image contains dog, frisbee. Based on this, <QUERY>".to_string();
    let cond_prompt = guidance_text.replace(crate::guidance::QUERY_SLOT, &query);

    let peaked = |hot: TokenId, p: f64| -> Vec<f64> {
        let rest = (1.0 - p) / (vocab.len() - 1) as f64;
        (0..vocab.len() as u32).map(|i| if i == hot { p } else { rest }).collect()
    };
    let split = |first: TokenId, p_first: f64, second: TokenId, p_second: f64| -> Vec<f64> {
        let rest = (1.0 - p_first - p_second) / (vocab.len() - 2) as f64;
        (0..vocab.len() as u32)
            .map(|i| {
                if i == first {
                    p_first
                } else if i == second {
                    p_second
                } else {
                    rest
                }
            })
            .collect()
    };

    let mut table = BTreeMap::new();
    let prefix = [a, dog, with];
    for prompt in [cond_prompt.as_str(), query.as_str()] {
        let mut parts = vec![image_ref.clone(), prompt.to_string()];
        for &tok in &prefix {
            table.insert(signature_of(&parts), peaked(tok, 0.9));
            parts.push(vocab[tok as usize].clone());
        }
        let at_step = if prompt == query {
            split(fork, BIASED_UNCOND_P, frisbee, 0.2)
        } else {
            split(fork, BIASED_COND_P, frisbee, 0.8)
        };
        table.insert(signature_of(&parts), at_step);
        for obj in [fork, frisbee] {
            let mut done = parts.clone();
            done.push(vocab[obj as usize].clone());
            table.insert(signature_of(&done), peaked(eos, 0.9));
        }
    }

    let model = TableModel::new(TableFixture { model_name: "biased-table".into(), vocab, eos, table })
        .expect("biased fixture is well formed");
    BiasedFixture {
        model,
        image_ref,
        guidance_text,
        query,
        hallucination: fork,
        grounded: frisbee,
        step: prefix.len(),
        prefix: prefix.to_vec(),
    }
}
