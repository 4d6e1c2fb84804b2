//! Client side of the bridge: drives an out-of-process model as a [`ModelBackend`].

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use super::protocol::Message;
use crate::backend::{BackendError, HandshakeInfo, LogitVector, ModelBackend, TokenId};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

/// One connection to a model server. Requests are strictly sequential.
pub struct BridgeClient {
    writer: Box<dyn Write + Send>,
    lines: Receiver<io::Result<String>>,
    child: Option<Child>,
    next_id: u64,
    info: HandshakeInfo,
    timeout: Duration,
    poisoned: bool,
    transcript: Option<Vec<String>>,
}

impl std::fmt::Debug for BridgeClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BridgeClient")
            .field("info", &self.info)
            .field("next_id", &self.next_id)
            .field("timeout", &self.timeout)
            .finish_non_exhaustive()
    }
}

fn spawn_line_reader<R: Read + Send + 'static>(reader: R) -> Receiver<io::Result<String>> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let mut reader = BufReader::new(reader);
        loop {
            let mut line = String::new();
            match reader.read_line(&mut line) {
                Ok(0) => break,
                Ok(_) => {
                    if tx.send(Ok(line)).is_err() {
                        break;
                    }
                }
                Err(e) => {
                    let _ = tx.send(Err(e));
                    break;
                }
            }
        }
    });
    rx
}

impl BridgeClient {
    /// Performs the handshake over an arbitrary byte stream.
    pub fn connect_handshake<R, W>(reader: R, writer: W, timeout: Duration) -> Result<Self, BackendError>
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        Self::handshake_with(reader, writer, timeout, false)
    }

    /// Same as [`connect_handshake`](Self::connect_handshake), recording every line.
    pub fn connect_recording<R, W>(reader: R, writer: W, timeout: Duration) -> Result<Self, BackendError>
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        Self::handshake_with(reader, writer, timeout, true)
    }

    fn handshake_with<R, W>(reader: R, writer: W, timeout: Duration, record: bool) -> Result<Self, BackendError>
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        let mut client = BridgeClient {
            writer: Box::new(writer),
            lines: spawn_line_reader(reader),
            child: None,
            next_id: 0,
            info: HandshakeInfo { vocab_size: 0, eos_token: 0, model_name: String::new() },
            timeout,
            poisoned: false,
            transcript: record.then(Vec::new),
        };
        let id = client.next_id;
        match client.call(Message::Handshake { request_id: id })? {
            Message::HandshakeAck { vocab_size, eos_token, model_name, .. } => {
                if vocab_size == 0 {
                    return Err(BackendError::ProtocolViolation("handshake declared vocab_size 0".into()));
                }
                if eos_token as usize >= vocab_size {
                    return Err(BackendError::ProtocolViolation(format!(
                        "eos token {eos_token} outside vocab of {vocab_size}"
                    )));
                }
                client.info = HandshakeInfo { vocab_size, eos_token, model_name };
                Ok(client)
            }
            other => Err(unexpected("handshake_ack", &other)),
        }
    }

    pub fn connect_tcp<A: ToSocketAddrs>(addr: A, timeout: Duration) -> Result<Self, BackendError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let reader = stream.try_clone()?;
        Self::connect_handshake(reader, stream, timeout)
    }

    /// Spawns `program` and talks to it over its standard input/output.
    pub fn spawn(program: &str, args: &[String], timeout: Duration) -> Result<Self, BackendError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        match Self::connect_handshake(stdout, stdin, timeout) {
            Ok(mut client) => {
                client.child = Some(child);
                Ok(client)
            }
            Err(e) => {
                let _ = child.kill();
                let _ = child.wait();
                Err(e)
            }
        }
    }

    pub fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }

    /// Lines sent (`> `) and received (`< `) so far, when recording.
    pub fn transcript(&self) -> Option<&[String]> {
        self.transcript.as_deref()
    }

    fn call(&mut self, request: Message) -> Result<Message, BackendError> {
        if self.poisoned {
            return Err(BackendError::ProtocolViolation("connection unusable after an earlier failure".into()));
        }
        let result = self.exchange(request);
        if matches!(result, Err(BackendError::Timeout(_) | BackendError::ProtocolViolation(_) | BackendError::Io(_))) {
            self.poisoned = true;
        }
        result
    }

    fn exchange(&mut self, request: Message) -> Result<Message, BackendError> {
        let id = request.request_id().expect("requests carry an id");
        self.next_id = id + 1;
        let line = request.to_line();
        if let Some(t) = self.transcript.as_mut() {
            t.push(format!("> {}", line.trim_end()));
        }
        self.writer.write_all(line.as_bytes())?;
        self.writer.flush()?;

        let reply = match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(line)) => line,
            Ok(Err(e)) => return Err(BackendError::Io(e)),
            Err(RecvTimeoutError::Timeout) => return Err(BackendError::Timeout(self.timeout)),
            Err(RecvTimeoutError::Disconnected) => {
                return Err(BackendError::ProtocolViolation("server closed the connection".into()))
            }
        };
        if let Some(t) = self.transcript.as_mut() {
            t.push(format!("< {}", reply.trim_end()));
        }
        let message = Message::from_line(&reply)
            .map_err(|e| BackendError::ProtocolViolation(format!("malformed message `{}`: {e}", reply.trim_end())))?;
        match message {
            Message::Error { request_id, message } => {
                if request_id.is_some_and(|r| r != id) {
                    return Err(BackendError::ProtocolViolation(format!(
                        "error for request {} while waiting on {id}",
                        request_id.unwrap_or_default()
                    )));
                }
                Err(BackendError::Remote(message))
            }
            other => {
                if other.request_id() != Some(id) {
                    return Err(BackendError::ProtocolViolation(format!(
                        "out-of-order response: expected request_id {id}, got {:?}",
                        other.request_id()
                    )));
                }
                Ok(other)
            }
        }
    }

    fn take_id(&self) -> u64 {
        self.next_id
    }

    pub fn encode_text(&mut self, text: &str) -> Result<Vec<TokenId>, BackendError> {
        let request_id = self.take_id();
        match self.call(Message::Encode { request_id, text: text.to_string() })? {
            Message::EncodeAck { tokens, .. } => Ok(tokens),
            other => Err(unexpected("encode_ack", &other)),
        }
    }

    pub fn decode_tokens(&mut self, ids: &[TokenId]) -> Result<String, BackendError> {
        let request_id = self.take_id();
        match self.call(Message::Decode { request_id, tokens: ids.to_vec() })? {
            Message::DecodeAck { text, .. } => Ok(text),
            other => Err(unexpected("decode_ack", &other)),
        }
    }

    pub fn step_remote(
        &mut self,
        cond_tokens: &[TokenId],
        uncond_tokens: &[TokenId],
        image_ref: &str,
    ) -> Result<(LogitVector, LogitVector), BackendError> {
        let request_id = self.take_id();
        let request = Message::Step {
            request_id,
            cond_tokens: cond_tokens.to_vec(),
            uncond_tokens: uncond_tokens.to_vec(),
            image_ref: image_ref.to_string(),
        };
        match self.call(request)? {
            Message::StepAck { cond_logits, uncond_logits, .. } => {
                let expected = self.info.vocab_size;
                for actual in [cond_logits.len(), uncond_logits.len()] {
                    if actual != expected {
                        return Err(BackendError::VocabSizeMismatch { expected, actual });
                    }
                }
                let wrap =
                    |v| LogitVector::new(v).map_err(|e| BackendError::ProtocolViolation(format!("step_ack: {e}")));
                Ok((wrap(cond_logits)?, wrap(uncond_logits)?))
            }
            other => Err(unexpected("step_ack", &other)),
        }
    }
}

fn unexpected(wanted: &str, got: &Message) -> BackendError {
    BackendError::ProtocolViolation(format!("expected {wanted}, got {}", got.kind()))
}

impl ModelBackend for BridgeClient {
    fn info(&self) -> &HandshakeInfo {
        &self.info
    }

    fn encode(&mut self, text: &str) -> Result<Vec<TokenId>, BackendError> {
        self.encode_text(text)
    }

    fn decode(&mut self, ids: &[TokenId]) -> Result<String, BackendError> {
        self.decode_tokens(ids)
    }

    fn step(
        &mut self,
        image_ref: &str,
        cond_tokens: &[TokenId],
        uncond_tokens: &[TokenId],
    ) -> Result<(LogitVector, LogitVector), BackendError> {
        self.step_remote(cond_tokens, uncond_tokens, image_ref)
    }
}

impl Drop for BridgeClient {
    fn drop(&mut self) {
        if let Some(mut child) = self.child.take() {
            // closing stdin lets a well-behaved server exit on EOF
            self.writer = Box::new(io::sink());
            let deadline = std::time::Instant::now() + Duration::from_millis(500);
            loop {
                match child.try_wait() {
                    Ok(Some(_)) => return,
                    Ok(None) if std::time::Instant::now() < deadline => thread::sleep(Duration::from_millis(10)),
                    _ => break,
                }
            }
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}
