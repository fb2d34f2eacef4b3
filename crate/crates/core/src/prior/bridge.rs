//! Client for an external log-probability oracle speaking newline-delimited
//! JSON over a pair of byte streams (normally a child process's stdio).
//!
//! Requests:
//! ```text
//! {"id": 7, "method": "next" | "score" | "logits", "context_tokens": [..] | "context_text": "..", "tokens": [..], "top_n": 5}
//! ```
//! Responses echo the id and carry either `tokens` + `logprobs`, a single
//! `logprob` (for `score`), or an `error` string. They may arrive out of
//! order; unknown fields are ignored.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::Deserialize;
use serde_json::json;

use super::{log_softmax, logsumexp, PriorModel};
use crate::data::TokenId;
use crate::error::{Error, Result};

const NORMALIZATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Deserialize)]
struct Response {
    id: Option<u64>,
    #[serde(default)]
    tokens: Option<Vec<u32>>,
    #[serde(default)]
    logprobs: Option<Vec<f64>>,
    #[serde(default)]
    logprob: Option<f64>,
    #[serde(default)]
    error: Option<String>,
}

type Incoming = std::result::Result<Response, String>;

struct Channel {
    writer: Box<dyn Write + Send>,
    incoming: Receiver<Incoming>,
    next_id: u64,
    /// Responses that arrived while waiting for a different id.
    parked: HashMap<u64, Response>,
}

/// Prior backed by an external oracle process.
///
/// Requests are serialized over the one connection; concurrent callers wait
/// their turn.
pub struct OracleBridgePrior {
    channel: Mutex<Channel>,
    vocab_size: usize,
    timeout: Duration,
    temperature: f64,
    child: Option<Mutex<Child>>,
}

enum Context<'a> {
    Tokens(&'a [TokenId]),
    Text(&'a str),
}

impl OracleBridgePrior {
    /// Spawns `command` and talks to it over its stdin/stdout.
    pub fn spawn(mut command: Command, vocab_size: usize, timeout: Duration) -> Result<Self> {
        let mut child = command
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Bridge(format!("failed to start oracle: {e}")))?;
        let stdin = child
            .stdin
            .take()
            .ok_or_else(|| Error::Bridge("oracle stdin unavailable".into()))?;
        let stdout = child
            .stdout
            .take()
            .ok_or_else(|| Error::Bridge("oracle stdout unavailable".into()))?;
        let mut bridge = Self::from_streams(stdout, stdin, vocab_size, timeout);
        bridge.child = Some(Mutex::new(child));
        Ok(bridge)
    }

    /// Uses an already-connected stream pair.
    pub fn from_streams<R, W>(reader: R, writer: W, vocab_size: usize, timeout: Duration) -> Self
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(reader).lines() {
                let (msg, stop) = match line {
                    Ok(l) if l.trim().is_empty() => continue,
                    Ok(l) => (
                        serde_json::from_str::<Response>(&l)
                            .map_err(|e| format!("malformed response {l:?}: {e}")),
                        false,
                    ),
                    Err(e) => (Err(format!("read failed: {e}")), true),
                };
                if tx.send(msg).is_err() || stop {
                    return;
                }
            }
            let _ = tx.send(Err("oracle closed its output".into()));
        });
        Self {
            channel: Mutex::new(Channel {
                writer: Box::new(writer),
                incoming: rx,
                next_id: 1,
                parked: HashMap::new(),
            }),
            vocab_size,
            timeout,
            temperature: 1.0,
            child: None,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::param(format!(
                "temperature must be > 0, got {temperature}"
            )));
        }
        self.temperature = temperature;
        Ok(self)
    }

    fn request(
        &self,
        method: &str,
        context: Context<'_>,
        tokens: Option<&[TokenId]>,
    ) -> Result<Response> {
        let mut ch = self
            .channel
            .lock()
            .map_err(|_| Error::Bridge("bridge state poisoned".into()))?;
        let id = ch.next_id;
        ch.next_id += 1;
        let mut req = json!({ "id": id, "method": method });
        match context {
            Context::Tokens(t) => req["context_tokens"] = json!(t),
            Context::Text(s) => req["context_text"] = json!(s),
        }
        if let Some(t) = tokens {
            req["tokens"] = json!(t);
        }
        let line = serde_json::to_string(&req)? + "\n";
        ch.writer
            .write_all(line.as_bytes())
            .and_then(|_| ch.writer.flush())
            .map_err(|e| Error::Bridge(format!("write failed: {e}")))?;

        let deadline = Instant::now() + self.timeout;
        loop {
            if let Some(resp) = ch.parked.remove(&id) {
                return check_error(resp);
            }
            let remaining = deadline.saturating_duration_since(Instant::now());
            match ch.incoming.recv_timeout(remaining) {
                Ok(Ok(resp)) => {
                    let rid = resp
                        .id
                        .ok_or_else(|| Error::Bridge("response without id".into()))?;
                    if rid == id {
                        return check_error(resp);
                    }
                    ch.parked.insert(rid, resp);
                }
                Ok(Err(msg)) => return Err(Error::Bridge(msg)),
                Err(RecvTimeoutError::Timeout) => {
                    return Err(Error::Bridge(format!(
                        "no response to request {id} within {:?}",
                        self.timeout
                    )))
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(Error::Bridge("oracle connection closed".into()))
                }
            }
        }
    }

    fn dense(&self, resp: Response) -> Result<Vec<f64>> {
        let (tokens, values) = match (resp.tokens, resp.logprobs) {
            (Some(t), Some(v)) if t.len() == v.len() => (t, v),
            _ => {
                return Err(Error::Bridge(
                    "response needs equal-length tokens and logprobs".into(),
                ))
            }
        };
        let mut out = vec![f64::NEG_INFINITY; self.vocab_size];
        for (t, v) in tokens.into_iter().zip(values) {
            let slot = out.get_mut(t as usize).ok_or_else(|| {
                Error::Bridge(format!(
                    "token {t} outside vocabulary of {}",
                    self.vocab_size
                ))
            })?;
            *slot = v;
        }
        Ok(out)
    }

    /// `log p(tokens | context_text)` as scored by the oracle under its own
    /// tokenizer.
    pub fn score_with_text_context(&self, context_text: &str, tokens: &[TokenId]) -> Result<f64> {
        let resp = self.request("score", Context::Text(context_text), Some(tokens))?;
        resp.logprob
            .ok_or_else(|| Error::Bridge("score response without logprob".into()))
    }
}

fn check_error(resp: Response) -> Result<Response> {
    match resp.error {
        Some(e) => Err(Error::Bridge(e)),
        None => Ok(resp),
    }
}

impl PriorModel for OracleBridgePrior {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_token_logprobs(&self, context: &[TokenId]) -> Result<Vec<f64>> {
        let lp = if self.temperature == 1.0 {
            self.dense(self.request("next", Context::Tokens(context), None)?)?
        } else {
            log_softmax(&self.next_token_logits(context)?, self.temperature)
        };
        let lse = logsumexp(&lp);
        if !(lse.abs() <= NORMALIZATION_TOLERANCE) {
            return Err(Error::Bridge(format!(
                "next-token distribution is not normalized (logsumexp = {lse})"
            )));
        }
        Ok(lp)
    }

    fn next_token_logits(&self, context: &[TokenId]) -> Result<Vec<f64>> {
        self.dense(self.request("logits", Context::Tokens(context), None)?)
    }

    fn sequence_logprob(&self, tokens: &[TokenId], context: &[TokenId]) -> Result<f64> {
        let resp = self.request("score", Context::Tokens(context), Some(tokens))?;
        let lp = resp
            .logprob
            .ok_or_else(|| Error::Bridge("score response without logprob".into()))?;
        if lp > 0.0 || lp.is_nan() {
            return Err(Error::Bridge(format!(
                "score {lp} is not a log-probability"
            )));
        }
        Ok(lp)
    }
}

impl Drop for OracleBridgePrior {
    fn drop(&mut self) {
        if let Some(child) = self.child.take() {
            if let Ok(mut c) = child.into_inner() {
                let _ = c.kill();
                let _ = c.wait();
            }
        }
    }
}
