//! Reference protocol server wrapping any in-process [`ModelBackend`].
//!
//! Used as the stub end of the bridge in tests and benchmarks, typically over a
//! [`TableModel`](crate::toylm::TableModel).

use std::io::{self, BufRead, BufReader, Write};
use std::net::TcpListener;
use std::thread;
use std::time::Duration;

use super::protocol::Message;
use crate::backend::ModelBackend;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ServeOptions {
    /// Artificial latency added to every step request.
    pub step_delay: Duration,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ServeStats {
    pub requests: u64,
    pub steps: u64,
    pub errors: u64,
}

/// Answers requests until the reader reaches end of input.
pub fn serve<B, R, W>(backend: &mut B, reader: R, mut writer: W, options: &ServeOptions) -> io::Result<ServeStats>
where
    B: ModelBackend + ?Sized,
    R: BufRead,
    W: Write,
{
    let mut stats = ServeStats::default();
    let mut ready = false;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        stats.requests += 1;
        let reply = respond(backend, &line, &mut ready, options, &mut stats);
        if matches!(reply, Message::Error { .. }) {
            stats.errors += 1;
        }
        writer.write_all(reply.to_line().as_bytes())?;
        writer.flush()?;
    }
    Ok(stats)
}

fn respond<B: ModelBackend + ?Sized>(
    backend: &mut B,
    line: &str,
    ready: &mut bool,
    options: &ServeOptions,
    stats: &mut ServeStats,
) -> Message {
    let request = match Message::from_line(line) {
        Ok(m) => m,
        Err(e) => {
            let request_id = serde_json::from_str::<serde_json::Value>(line)
                .ok()
                .and_then(|v| v.get("request_id").and_then(|id| id.as_u64()));
            return Message::Error { request_id, message: format!("malformed request: {e}") };
        }
    };
    let request_id = request.request_id().unwrap_or_default();
    let error = |message: String| Message::Error { request_id: Some(request_id), message };

    if !*ready && !matches!(request, Message::Handshake { .. }) {
        return error("handshake required before any other request".into());
    }
    match request {
        Message::Handshake { request_id } => {
            *ready = true;
            let info = backend.info();
            Message::HandshakeAck {
                request_id,
                vocab_size: info.vocab_size,
                eos_token: info.eos_token,
                model_name: info.model_name.clone(),
            }
        }
        Message::Encode { request_id, text } => match backend.encode(&text) {
            Ok(tokens) => Message::EncodeAck { request_id, tokens },
            Err(e) => error(e.to_string()),
        },
        Message::Decode { request_id, tokens } => match backend.decode(&tokens) {
            Ok(text) => Message::DecodeAck { request_id, text },
            Err(e) => error(e.to_string()),
        },
        Message::Step { request_id, cond_tokens, uncond_tokens, image_ref } => {
            if !options.step_delay.is_zero() {
                thread::sleep(options.step_delay);
            }
            stats.steps += 1;
            match backend.step(&image_ref, &cond_tokens, &uncond_tokens) {
                Ok((c, u)) => {
                    Message::StepAck { request_id, cond_logits: c.into_inner(), uncond_logits: u.into_inner() }
                }
                Err(e) => error(e.to_string()),
            }
        }
        other => error(format!("unexpected message type `{}`", other.kind())),
    }
}

/// Serves connections from `listener` one at a time, each against a fresh
/// backend from `make_backend`. Returns after `max_connections` when given.
pub fn serve_tcp<B, F>(
    listener: TcpListener,
    mut make_backend: F,
    options: ServeOptions,
    max_connections: Option<usize>,
) -> io::Result<()>
where
    B: ModelBackend,
    F: FnMut() -> B,
{
    for (served, stream) in (1..).zip(listener.incoming()) {
        let stream = stream?;
        stream.set_nodelay(true)?;
        let reader = BufReader::new(stream.try_clone()?);
        let mut backend = make_backend();
        // a client vanishing mid-session only ends that session
        let _ = serve(&mut backend, reader, stream, &options);
        if max_connections.is_some_and(|m| served >= m) {
            break;
        }
    }
    Ok(())
}
