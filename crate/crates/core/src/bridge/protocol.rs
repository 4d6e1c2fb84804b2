//! Newline-delimited JSON messages exchanged between the decoder and a model server.
//!
//! Each message is one UTF-8 JSON object terminated by `\n`, with a `type`
//! tag and a `request_id`. The server answers every request with exactly one
//! message carrying the same `request_id`: the matching `*_ack` or `error`.

use serde::{Deserialize, Serialize};

use crate::backend::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Handshake {
        request_id: u64,
    },
    HandshakeAck {
        request_id: u64,
        vocab_size: usize,
        eos_token: TokenId,
        model_name: String,
    },
    Encode {
        request_id: u64,
        text: String,
    },
    EncodeAck {
        request_id: u64,
        tokens: Vec<TokenId>,
    },
    Decode {
        request_id: u64,
        tokens: Vec<TokenId>,
    },
    DecodeAck {
        request_id: u64,
        text: String,
    },
    Step {
        request_id: u64,
        cond_tokens: Vec<TokenId>,
        uncond_tokens: Vec<TokenId>,
        image_ref: String,
    },
    StepAck {
        request_id: u64,
        cond_logits: Vec<f64>,
        uncond_logits: Vec<f64>,
    },
    Error {
        /// `null` when the offending request could not be parsed far enough to read its id.
        request_id: Option<u64>,
        message: String,
    },
}

impl Message {
    pub fn request_id(&self) -> Option<u64> {
        match self {
            Message::Handshake { request_id }
            | Message::HandshakeAck { request_id, .. }
            | Message::Encode { request_id, .. }
            | Message::EncodeAck { request_id, .. }
            | Message::Decode { request_id, .. }
            | Message::DecodeAck { request_id, .. }
            | Message::Step { request_id, .. }
            | Message::StepAck { request_id, .. } => Some(*request_id),
            Message::Error { request_id, .. } => *request_id,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Message::Handshake { .. } => "handshake",
            Message::HandshakeAck { .. } => "handshake_ack",
            Message::Encode { .. } => "encode",
            Message::EncodeAck { .. } => "encode_ack",
            Message::Decode { .. } => "decode",
            Message::DecodeAck { .. } => "decode_ack",
            Message::Step { .. } => "step",
            Message::StepAck { .. } => "step_ack",
            Message::Error { .. } => "error",
        }
    }

    /// Serializes to one line, including the trailing `\n`.
    pub fn to_line(&self) -> String {
        let mut line = serde_json::to_string(self).expect("messages always serialize");
        line.push('\n');
        line
    }

    pub fn from_line(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line.trim_end_matches(['\n', '\r']))
    }
}
