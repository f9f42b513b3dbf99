//! Newline-delimited JSON wire protocol for external models.
//!
//! A client sends one request object per line and reads exactly one
//! response line before sending the next request on the same session.
//! Sessions run over TCP or over the standard streams of a child process.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::str::FromStr;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::{Capabilities, GatewayError, ModelDistribution, ProbeBoard, Result, SequenceModel};
use crate::notation::{TokenId, VOCAB_SIZE};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

/// Where a model lives.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Endpoint {
    /// `tcp:host:port`
    Tcp(String),
    /// `exec:<command line>`, run through `sh -c`.
    Exec(String),
    /// `builtin:<name>`, an in-process reference model.
    Builtin(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid endpoint `{0}` (expected tcp:HOST:PORT, exec:COMMAND or builtin:NAME)")]
pub struct EndpointParseError(String);

impl FromStr for Endpoint {
    type Err = EndpointParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || EndpointParseError(s.to_string());
        let (scheme, rest) = s.split_once(':').ok_or_else(bad)?;
        if rest.trim().is_empty() {
            return Err(bad());
        }
        match scheme {
            "tcp" if rest.rsplit_once(':').is_some_and(|(h, p)| !h.is_empty() && p.parse::<u16>().is_ok()) => {
                Ok(Endpoint::Tcp(rest.to_string()))
            }
            "exec" => Ok(Endpoint::Exec(rest.to_string())),
            "builtin" => Ok(Endpoint::Builtin(rest.to_string())),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Tcp(a) => write!(f, "tcp:{a}"),
            Endpoint::Exec(c) => write!(f, "exec:{c}"),
            Endpoint::Builtin(n) => write!(f, "builtin:{n}"),
        }
    }
}

/// Requests as they appear on the wire.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    Info,
    Dist { tokens: Vec<TokenId> },
    DistBatch { seqs: Vec<Vec<TokenId>> },
    Probe { tokens: Vec<TokenId> },
    GradCos { tokens: Vec<TokenId> },
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct InfoResponse {
    pub vocab: usize,
    pub caps: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_ctx: Option<usize>,
}

#[derive(Deserialize)]
struct DistResponse {
    probs: Vec<f64>,
}

#[derive(Deserialize)]
struct BatchResponse {
    probs: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct ProbeResponse {
    board: ProbeBoard,
}

#[derive(Deserialize)]
struct GradCosResponse {
    cos_dist: f64,
}

fn failure(msg: impl Into<String>) -> GatewayError {
    GatewayError::QueryFailure(msg.into())
}

/// One connection with a single request in flight at a time.
struct Session {
    writer: Box<dyn Write + Send>,
    lines: Receiver<std::io::Result<String>>,
    child: Option<Child>,
}

impl Session {
    fn spawn_reader(reader: impl BufRead + Send + 'static) -> Receiver<std::io::Result<String>> {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in reader.lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        rx
    }

    fn open(endpoint: &Endpoint) -> Result<Session> {
        match endpoint {
            Endpoint::Tcp(addr) => {
                let stream = TcpStream::connect(addr).map_err(|e| failure(format!("connect {addr}: {e}")))?;
                stream.set_nodelay(true).ok();
                let read = stream.try_clone().map_err(|e| failure(e.to_string()))?;
                Ok(Session { writer: Box::new(stream), lines: Self::spawn_reader(BufReader::new(read)), child: None })
            }
            Endpoint::Exec(cmd) => {
                let mut child = Command::new("sh")
                    .arg("-c")
                    .arg(cmd)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(|e| failure(format!("spawn `{cmd}`: {e}")))?;
                let stdin: ChildStdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                Ok(Session { writer: Box::new(stdin), lines: Self::spawn_reader(BufReader::new(stdout)), child: Some(child) })
            }
            Endpoint::Builtin(_) => Err(failure("builtin endpoints have no wire session")),
        }
    }

    fn call(&mut self, req: &Request, timeout: Duration) -> Result<Value> {
        let mut line = serde_json::to_string(req).expect("requests serialize");
        line.push('\n');
        self.writer
            .write_all(line.as_bytes())
            .and_then(|_| self.writer.flush())
            .map_err(|e| failure(format!("send: {e}")))?;
        let reply = match self.lines.recv_timeout(timeout) {
            Ok(Ok(l)) => l,
            Ok(Err(e)) => return Err(failure(format!("receive: {e}"))),
            Err(RecvTimeoutError::Timeout) => return Err(failure(format!("no response within {timeout:?}"))),
            Err(RecvTimeoutError::Disconnected) => return Err(failure("model closed the connection")),
        };
        serde_json::from_str(&reply).map_err(|e| failure(format!("unparseable response: {e}")))
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// Idle sessions plus the number currently open.
struct Pool {
    idle: Vec<Session>,
    open: usize,
}

/// A model reached over the wire protocol, with a pool of sessions so that
/// concurrent episodes can query it in parallel.
pub struct ProtocolModel {
    endpoint: Endpoint,
    info: InfoResponse,
    caps: Capabilities,
    timeout: Duration,
    max_sessions: usize,
    pool: Mutex<Pool>,
    freed: Condvar,
}

impl ProtocolModel {
    /// Opens one session and performs the `info` handshake.
    pub fn connect(endpoint: Endpoint, timeout: Duration, max_sessions: usize) -> Result<ProtocolModel> {
        let mut session = Session::open(&endpoint)?;
        let reply = session.call(&Request::Info, timeout)?;
        if let Some(err) = reply.get("error") {
            return Err(failure(format!("info refused: {err}")));
        }
        let info: InfoResponse = serde_json::from_value(reply).map_err(|e| failure(format!("bad info response: {e}")))?;
        if info.vocab != VOCAB_SIZE {
            return Err(failure(format!("model vocabulary is {}, expected {VOCAB_SIZE}", info.vocab)));
        }
        if !info.caps.iter().any(|c| c == "dist") {
            return Err(failure("model does not declare the `dist` capability"));
        }
        let has = |name: &str| info.caps.iter().any(|c| c == name);
        let caps = Capabilities { dist_batch: has("dist_batch"), probe: has("probe"), grad_cos: has("grad_cos") };
        Ok(ProtocolModel {
            endpoint,
            info,
            caps,
            timeout,
            max_sessions: max_sessions.max(1),
            pool: Mutex::new(Pool { idle: vec![session], open: 1 }),
            freed: Condvar::new(),
        })
    }

    pub fn info(&self) -> &InfoResponse {
        &self.info
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    fn checkout(&self) -> Result<Session> {
        let mut pool = self.pool.lock().expect("pool lock");
        loop {
            if let Some(s) = pool.idle.pop() {
                return Ok(s);
            }
            if pool.open < self.max_sessions {
                pool.open += 1;
                drop(pool);
                return Session::open(&self.endpoint).inspect_err(|_| {
                    self.pool.lock().expect("pool lock").open -= 1;
                    self.freed.notify_one();
                });
            }
            pool = self.freed.wait(pool).expect("pool lock");
        }
    }

    /// Sends one request. A session that failed at the transport level is
    /// discarded, since a late reply would desynchronize it.
    pub fn request(&self, req: &Request) -> Result<Value> {
        let mut session = self.checkout()?;
        let result = session.call(req, self.timeout);
        let mut pool = self.pool.lock().expect("pool lock");
        match &result {
            Ok(_) => pool.idle.push(session),
            Err(_) => pool.open -= 1,
        }
        drop(pool);
        self.freed.notify_one();
        let value = result?;
        if let Some(err) = value.get("error") {
            let msg = err.as_str().map_or_else(|| err.to_string(), str::to_string);
            return Err(failure(format!("model error: {msg}")));
        }
        Ok(value)
    }

    fn check_ctx(&self, tokens: &[TokenId]) -> Result<()> {
        match self.info.max_ctx {
            Some(max) if tokens.len() > max => {
                Err(failure(format!("prefix of {} tokens exceeds the model context of {max}", tokens.len())))
            }
            _ => Ok(()),
        }
    }
}

fn decode<T: for<'de> Deserialize<'de>>(v: Value) -> Result<T> {
    serde_json::from_value(v).map_err(|e| failure(format!("malformed response: {e}")))
}

fn ingest(probs: &[f64]) -> Result<ModelDistribution> {
    ModelDistribution::new(probs).map_err(|e| failure(e.to_string()))
}

impl SequenceModel for ProtocolModel {
    fn capabilities(&self) -> Capabilities {
        self.caps
    }

    fn next_token_dist(&self, tokens: &[TokenId]) -> Result<ModelDistribution> {
        self.check_ctx(tokens)?;
        let r: DistResponse = decode(self.request(&Request::Dist { tokens: tokens.to_vec() })?)?;
        ingest(&r.probs)
    }

    fn next_token_dist_batch(&self, seqs: &[Vec<TokenId>]) -> Result<Vec<ModelDistribution>> {
        if !self.caps.dist_batch {
            return seqs.iter().map(|s| self.next_token_dist(s)).collect();
        }
        if seqs.is_empty() {
            return Ok(Vec::new());
        }
        seqs.iter().try_for_each(|s| self.check_ctx(s))?;
        let r: BatchResponse = decode(self.request(&Request::DistBatch { seqs: seqs.to_vec() })?)?;
        if r.probs.len() != seqs.len() {
            return Err(failure(format!("dist_batch of {} answered with {} rows", seqs.len(), r.probs.len())));
        }
        r.probs.iter().map(|p| ingest(p)).collect()
    }

    fn probe_board(&self, tokens: &[TokenId]) -> Result<ProbeBoard> {
        let r: ProbeResponse = decode(self.request(&Request::Probe { tokens: tokens.to_vec() })?)?;
        Ok(r.board)
    }

    fn grad_cos(&self, tokens: &[TokenId]) -> Result<f64> {
        let r: GradCosResponse = decode(self.request(&Request::GradCos { tokens: tokens.to_vec() })?)?;
        if !r.cos_dist.is_finite() {
            return Err(failure("non-finite cos_dist"));
        }
        Ok(r.cos_dist)
    }
}

/// Opens a model by endpoint. `sessions` bounds the parallel wire sessions.
pub fn open_model(endpoint: &Endpoint, timeout: Duration, sessions: usize) -> Result<Box<dyn SequenceModel>> {
    match endpoint {
        Endpoint::Builtin(name) => {
            super::reference::builtin(name).ok_or_else(|| failure(format!("unknown builtin model `{name}`")))
        }
        _ => Ok(Box::new(ProtocolModel::connect(endpoint.clone(), timeout, sessions)?)),
    }
}

fn handle(model: &dyn SequenceModel, line: &str) -> Value {
    let req: Request = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => return serde_json::json!({ "error": format!("bad request: {e}") }),
    };
    let caps = model.capabilities();
    let result = match req {
        Request::Info => {
            let info = InfoResponse {
                vocab: VOCAB_SIZE,
                caps: caps.names().into_iter().map(str::to_string).collect(),
                max_ctx: None,
            };
            Ok(serde_json::to_value(info).expect("info serializes"))
        }
        Request::Dist { tokens } => {
            model.next_token_dist(&tokens).map(|d| serde_json::json!({ "probs": d.probs().to_vec() }))
        }
        Request::DistBatch { .. } if !caps.dist_batch => Err(GatewayError::CapabilityMissing("dist_batch")),
        Request::DistBatch { seqs } => model.next_token_dist_batch(&seqs).map(|ds| {
            let rows: Vec<Vec<f64>> = ds.iter().map(|d| d.probs().to_vec()).collect();
            serde_json::json!({ "probs": rows })
        }),
        Request::Probe { tokens } => model.probe_board(&tokens).map(|b| serde_json::json!({ "board": b })),
        Request::GradCos { tokens } => model.grad_cos(&tokens).map(|x| serde_json::json!({ "cos_dist": x })),
    };
    result.unwrap_or_else(|e| serde_json::json!({ "error": e.to_string() }))
}

/// Answers protocol requests from `reader` until end of input. Malformed
/// requests get an `{"error": ...}` reply and the loop continues.
pub fn serve(model: &dyn SequenceModel, reader: impl BufRead, mut writer: impl Write) -> std::io::Result<()> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut reply = serde_json::to_vec(&handle(model, &line))?;
        reply.push(b'\n');
        writer.write_all(&reply)?;
        writer.flush()?;
    }
    Ok(())
}

/// Accepts connections forever, one thread per connection.
pub fn serve_tcp(model: Arc<dyn SequenceModel>, listener: TcpListener) -> std::io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        stream.set_nodelay(true).ok();
        let model = Arc::clone(&model);
        thread::spawn(move || {
            let Ok(read) = stream.try_clone() else { return };
            let _ = serve(model.as_ref(), BufReader::new(read), stream);
        });
    }
    Ok(())
}
