//! Client for a remote embedding service.
//!
//! One JSON object per line in each direction:
//!
//! ```text
//! -> {"id":"b0","texts":["first text","second"]}
//! <- {"id":"b0","dim":4,"vectors":[[s0,s1,s2,s3,e0,e1,e2,e3],[...]]}
//! ```
//!
//! Each vector carries `2 * dim` numbers, the start features followed by the
//! end features. Only base features cross the wire; projection stays local.
//! Several requests may be in flight on one connection, and responses are
//! matched to requests by `id`.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::encoder::{BaseEmbedding, DualVec, EncoderProvider};
use crate::error::{Error, Result};

/// Environment variable naming the service address (`host:port`).
pub const ENDPOINT_ENV: &str = "PHRASEFORGE_ENCODER_ENDPOINT";

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct EncodeRequest {
    pub id: String,
    pub texts: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct EncodeResponse {
    pub id: String,
    pub dim: usize,
    pub vectors: Vec<Vec<f64>>,
}

/// Serialized request, newline-terminated.
pub fn request_line(id: &str, texts: &[String]) -> String {
    let req = EncodeRequest {
        id: id.to_string(),
        texts: texts.to_vec(),
    };
    let mut s = serde_json::to_string(&req).expect("request serializes");
    s.push('\n');
    s
}

pub fn parse_response(line: &str) -> Result<EncodeResponse> {
    serde_json::from_str(line.trim_end()).map_err(|e| Error::Protocol(format!("bad response: {e}")))
}

/// Checks a response against the request it answers and splits the vectors.
pub fn decode_response(resp: EncodeResponse, expected_id: &str, n_texts: usize) -> Result<Vec<BaseEmbedding<f64>>> {
    if resp.id != expected_id {
        return Err(Error::Protocol(format!(
            "response id {} does not match request {expected_id}",
            resp.id
        )));
    }
    if resp.vectors.len() != n_texts {
        return Err(Error::Protocol(format!(
            "request {expected_id}: {} vectors for {n_texts} texts",
            resp.vectors.len()
        )));
    }
    let d = resp.dim;
    resp.vectors
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            if v.len() != 2 * d {
                return Err(Error::Protocol(format!(
                    "request {expected_id}: vector {i} has {} values, header dim {d} needs {}",
                    v.len(),
                    2 * d
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Protocol(format!("request {expected_id}: vector {i} not finite")));
            }
            let mut start = v;
            let end = start.split_off(d);
            Ok(DualVec { start, end })
        })
        .collect()
}

#[derive(Debug)]
pub struct RemoteEncoder {
    endpoint: String,
    dim: usize,
    timeout: Duration,
    next_id: AtomicU64,
}

impl RemoteEncoder {
    pub fn new(endpoint: impl Into<String>, dim: usize) -> Self {
        RemoteEncoder {
            endpoint: endpoint.into(),
            dim,
            timeout: Duration::from_secs(30),
            next_id: AtomicU64::new(0),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    /// Builds a client from [`ENDPOINT_ENV`] if it is set and non-empty.
    pub fn from_env(dim: usize) -> Option<Self> {
        std::env::var(ENDPOINT_ENV)
            .ok()
            .filter(|s| !s.trim().is_empty())
            .map(|ep| RemoteEncoder::new(ep.trim(), dim))
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn transport(&self, message: impl ToString) -> Error {
        Error::Transport {
            context: self.endpoint.clone(),
            message: message.to_string(),
        }
    }

    fn connect(&self) -> Result<TcpStream> {
        let addrs = self.endpoint.to_socket_addrs().map_err(|e| self.transport(e))?;
        let mut last = None;
        for addr in addrs {
            match TcpStream::connect_timeout(&addr, self.timeout) {
                Ok(s) => {
                    s.set_read_timeout(Some(self.timeout)).map_err(|e| self.transport(e))?;
                    s.set_write_timeout(Some(self.timeout)).map_err(|e| self.transport(e))?;
                    return Ok(s);
                }
                Err(e) => last = Some(e),
            }
        }
        Err(self.transport(
            last.map(|e| e.to_string())
                .unwrap_or_else(|| "no address resolved".into()),
        ))
    }

    /// Sends every batch on one connection before reading any response.
    /// Output order follows `batches`, whatever order responses arrive in.
    pub fn encode_batches(&self, batches: &[Vec<String>]) -> Result<Vec<Vec<BaseEmbedding<f64>>>> {
        let mut out: Vec<Option<Vec<BaseEmbedding<f64>>>> = vec![None; batches.len()];
        let mut pending: HashMap<String, usize> = HashMap::new();
        let mut payload = String::new();
        for (slot, texts) in batches.iter().enumerate() {
            if texts.is_empty() {
                out[slot] = Some(Vec::new());
                continue;
            }
            let id = format!("b{}", self.next_id.fetch_add(1, Ordering::Relaxed));
            payload.push_str(&request_line(&id, texts));
            pending.insert(id, slot);
        }
        if pending.is_empty() {
            return Ok(out.into_iter().map(|o| o.unwrap_or_default()).collect());
        }

        let mut stream = self.connect()?;
        stream
            .write_all(payload.as_bytes())
            .and_then(|_| stream.flush())
            .map_err(|e| self.transport(e))?;
        let mut reader = BufReader::new(stream);
        let mut line = String::new();
        while !pending.is_empty() {
            line.clear();
            let n = reader.read_line(&mut line).map_err(|e| self.transport(e))?;
            if n == 0 {
                return Err(self.transport(format!(
                    "connection closed with {} responses outstanding",
                    pending.len()
                )));
            }
            let resp = parse_response(&line)?;
            let slot = pending
                .remove(&resp.id)
                .ok_or_else(|| Error::Protocol(format!("unexpected response id {}", resp.id)))?;
            if resp.dim != self.dim {
                return Err(Error::Config(format!(
                    "remote encoder dim {} does not match configured dim {}",
                    resp.dim, self.dim
                )));
            }
            let id = resp.id.clone();
            out[slot] = Some(decode_response(resp, &id, batches[slot].len())?);
        }
        Ok(out.into_iter().map(|o| o.unwrap_or_default()).collect())
    }
}

impl EncoderProvider for RemoteEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_batch(&self, texts: &[String]) -> Result<Vec<BaseEmbedding<f64>>> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let mut v = self.encode_batches(&[texts.to_vec()])?;
        Ok(v.pop().unwrap_or_default())
    }
}
