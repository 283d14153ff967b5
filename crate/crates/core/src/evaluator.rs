//! Loss feedback: the trainer contract and its implementations.
//!
//! A trainer is anything that, given an epoch index and the operations to
//! apply, trains for one epoch and reports a positive validation loss.
//! [`SyntheticLandscape`] is a closed-form stand-in for fast, reproducible
//! experiments; [`WireClient`] steers an external trainer over a
//! newline-delimited JSON protocol:
//!
//! ```text
//! engine -> trainer  {"type":"propose","epoch":N,"root_ops":[..],"path":[{"op":..,"side":..,"range":[lo,hi]},..]}
//! trainer -> engine  {"type":"loss","epoch":N,"value":X}
//! either side        {"type":"shutdown"}
//! ```
//!
//! Unknown fields are ignored. One proposal is outstanding at a time.

use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::search_space::{OpKind, OpVariant, Side, VariantKey};

/// Floor applied to synthetic losses so they stay strictly positive.
pub const MIN_LOSS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("trainer gone: {0}")]
    TrainerGone(String),
    #[error("expected loss for epoch {expected}, trainer answered epoch {got}")]
    EpochMismatch { expected: u64, got: u64 },
    #[error("invalid loss {0}")]
    InvalidLoss(f64),
    #[error("scripted losses exhausted at epoch {0}")]
    Exhausted(u64),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Anything that can train one epoch with a given augmentation pipeline.
pub trait Evaluator {
    fn evaluate(&mut self, epoch: u64, roots: &[OpVariant], path: &[OpVariant]) -> Result<f64, EvalError>;
}

impl<E: Evaluator + ?Sized> Evaluator for Box<E> {
    fn evaluate(&mut self, epoch: u64, roots: &[OpVariant], path: &[OpVariant]) -> Result<f64, EvalError> {
        (**self).evaluate(epoch, roots, path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Utility {
    pub op: OpKind,
    pub side: Side,
    pub u: f64,
}

/// `loss(t, path) = b0 * d^t * (1 + sum of u over path) + N(0, sigma)`, floored at [`MIN_LOSS`].
///
/// The noise draw depends only on `(seed, epoch)`, so every policy run on
/// the same landscape sees the same noise sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticLandscape {
    pub base_loss: f64,
    pub decay: f64,
    pub sigma: f64,
    pub seed: u64,
    /// Variants not listed have utility 0.
    pub utilities: Vec<Utility>,
}

impl Default for SyntheticLandscape {
    fn default() -> Self {
        Self {
            base_loss: 1.0,
            decay: 0.995,
            sigma: 0.0,
            seed: 0,
            utilities: Vec::new(),
        }
    }
}

impl SyntheticLandscape {
    pub fn utility(&self, key: VariantKey) -> f64 {
        self.utilities
            .iter()
            .find(|u| u.op == key.op && u.side == key.side)
            .map_or(0.0, |u| u.u)
    }

    /// Noise-free loss of the empty path.
    pub fn neutral_loss(&self, epoch: u64) -> f64 {
        self.base_loss * self.decay.powi(epoch as i32)
    }

    pub fn noise(&self, epoch: u64) -> f64 {
        if self.sigma <= 0.0 {
            return 0.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        Normal::new(0.0, self.sigma)
            .expect("sigma is finite and positive")
            .sample(&mut rng)
    }

    pub fn loss(&self, epoch: u64, path: &[OpVariant]) -> f64 {
        let total: f64 = path.iter().map(|v| self.utility(v.key())).sum();
        (self.neutral_loss(epoch) * (1.0 + total) + self.noise(epoch)).max(MIN_LOSS)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.base_loss.is_finite() && self.base_loss > 0.0) {
            return Err(format!("base_loss = {} must be > 0", self.base_loss));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(format!("decay = {} must be in (0, 1]", self.decay));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(format!("sigma = {} must be >= 0", self.sigma));
        }
        Ok(())
    }
}

impl Evaluator for SyntheticLandscape {
    fn evaluate(&mut self, epoch: u64, _roots: &[OpVariant], path: &[OpVariant]) -> Result<f64, EvalError> {
        Ok(self.loss(epoch, path))
    }
}

/// Replays a fixed loss sequence; epoch `t` receives `losses[t - 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedEvaluator {
    pub losses: Vec<f64>,
}

impl Evaluator for ScriptedEvaluator {
    fn evaluate(&mut self, epoch: u64, _roots: &[OpVariant], _path: &[OpVariant]) -> Result<f64, EvalError> {
        let idx = epoch.checked_sub(1).ok_or(EvalError::Exhausted(epoch))? as usize;
        self.losses.get(idx).copied().ok_or(EvalError::Exhausted(epoch))
    }
}

/// One operation as carried on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WireOp {
    pub op: OpKind,
    pub side: Side,
    pub range: [f64; 2],
}

impl From<&OpVariant> for WireOp {
    fn from(v: &OpVariant) -> Self {
        WireOp {
            op: v.kind,
            side: v.side(),
            range: [v.range.lo, v.range.hi],
        }
    }
}

impl From<&WireOp> for OpVariant {
    fn from(w: &WireOp) -> Self {
        OpVariant::new(w.op, w.range[0], w.range[1], w.side)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Propose {
        epoch: u64,
        root_ops: Vec<WireOp>,
        path: Vec<WireOp>,
    },
    Loss {
        epoch: u64,
        value: f64,
    },
    Shutdown,
}

impl Message {
    pub fn propose(epoch: u64, roots: &[OpVariant], path: &[OpVariant]) -> Self {
        Message::Propose {
            epoch,
            root_ops: roots.iter().map(WireOp::from).collect(),
            path: path.iter().map(WireOp::from).collect(),
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("messages always serialize")
    }

    pub fn parse(line: &str) -> Result<Self, EvalError> {
        serde_json::from_str(line.trim()).map_err(|e| EvalError::Protocol(format!("{e}: {}", line.trim())))
    }
}

fn gone_on_pipe(e: io::Error) -> EvalError {
    match e.kind() {
        io::ErrorKind::BrokenPipe | io::ErrorKind::ConnectionReset | io::ErrorKind::UnexpectedEof => {
            EvalError::TrainerGone(e.to_string())
        }
        _ => EvalError::Io(e),
    }
}

/// Synchronous client for the line protocol over any byte stream.
pub struct WireClient<R, W: Write> {
    reader: R,
    writer: W,
    closed: bool,
}

impl<R: BufRead, W: Write> WireClient<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        Self {
            reader,
            writer,
            closed: false,
        }
    }

    pub fn send(&mut self, msg: &Message) -> Result<(), EvalError> {
        let line = msg.to_line();
        self.writer
            .write_all(line.as_bytes())
            .and_then(|_| self.writer.write_all(b"\n"))
            .and_then(|_| self.writer.flush())
            .map_err(gone_on_pipe)
    }

    pub fn receive(&mut self) -> Result<Message, EvalError> {
        let mut line = String::new();
        loop {
            line.clear();
            let n = self.reader.read_line(&mut line).map_err(gone_on_pipe)?;
            if n == 0 {
                return Err(EvalError::TrainerGone("stream closed".into()));
            }
            if !line.trim().is_empty() {
                return Message::parse(&line);
            }
        }
    }

    /// Sends a proposal and blocks until the matching loss arrives.
    pub fn request_loss(&mut self, epoch: u64, roots: &[OpVariant], path: &[OpVariant]) -> Result<f64, EvalError> {
        if self.closed {
            return Err(EvalError::TrainerGone("shutdown already sent".into()));
        }
        self.send(&Message::propose(epoch, roots, path))?;
        match self.receive()? {
            Message::Loss { epoch: got, value } => {
                if got != epoch {
                    Err(EvalError::EpochMismatch { expected: epoch, got })
                } else if !(value.is_finite() && value > 0.0) {
                    Err(EvalError::InvalidLoss(value))
                } else {
                    Ok(value)
                }
            }
            Message::Shutdown => {
                self.closed = true;
                Err(EvalError::TrainerGone("trainer sent shutdown".into()))
            }
            Message::Propose { .. } => Err(EvalError::Protocol("trainer sent a proposal".into())),
        }
    }

    pub fn shutdown(&mut self) -> Result<(), EvalError> {
        if self.closed {
            return Ok(());
        }
        self.closed = true;
        self.send(&Message::Shutdown)
    }
}

impl<R: BufRead, W: Write> Evaluator for WireClient<R, W> {
    fn evaluate(&mut self, epoch: u64, roots: &[OpVariant], path: &[OpVariant]) -> Result<f64, EvalError> {
        self.request_loss(epoch, roots, path)
    }
}

pub type TcpClient = WireClient<BufReader<TcpStream>, TcpStream>;

pub fn connect_tcp<A: ToSocketAddrs>(addr: A) -> Result<TcpClient, EvalError> {
    let stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    let reader = BufReader::new(stream.try_clone()?);
    Ok(WireClient::new(reader, stream))
}

/// A trainer subprocess speaking the protocol on its standard I/O.
pub struct TrainerProcess {
    child: Child,
    client: Option<WireClient<BufReader<ChildStdout>, ChildStdin>>,
}

impl TrainerProcess {
    /// Runs `command` through `sh -c`.
    pub fn spawn(command: &str) -> Result<Self, EvalError> {
        let mut cmd = Command::new("sh");
        cmd.arg("-c").arg(command);
        Self::spawn_command(cmd)
    }

    pub fn spawn_command(mut cmd: Command) -> Result<Self, EvalError> {
        let mut child = cmd.stdin(Stdio::piped()).stdout(Stdio::piped()).spawn()?;
        let stdin = child.stdin.take().expect("stdin is piped");
        let stdout = child.stdout.take().expect("stdout is piped");
        Ok(Self {
            child,
            client: Some(WireClient::new(BufReader::new(stdout), stdin)),
        })
    }

    /// Sends shutdown, closes the pipes and reaps the child.
    pub fn finish(mut self) -> Result<std::process::ExitStatus, EvalError> {
        if let Some(mut client) = self.client.take() {
            let _ = client.shutdown();
        }
        Ok(self.child.wait()?)
    }
}

impl Evaluator for TrainerProcess {
    fn evaluate(&mut self, epoch: u64, roots: &[OpVariant], path: &[OpVariant]) -> Result<f64, EvalError> {
        match self.client.as_mut() {
            Some(c) => c.request_loss(epoch, roots, path),
            None => Err(EvalError::TrainerGone("trainer already finished".into())),
        }
    }
}

impl Drop for TrainerProcess {
    fn drop(&mut self) {
        if let Some(mut client) = self.client.take() {
            let _ = client.shutdown();
        }
        for _ in 0..50 {
            if let Ok(Some(_)) = self.child.try_wait() {
                return;
            }
            std::thread::sleep(std::time::Duration::from_millis(20));
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Serves losses from `landscape` until shutdown or end of input; the
/// reference trainer for the line protocol. Returns the number of epochs served.
pub fn serve_synthetic<R: BufRead, W: Write>(
    landscape: &SyntheticLandscape,
    mut reader: R,
    mut writer: W,
) -> Result<u64, EvalError> {
    let mut served = 0;
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Ok(served);
        }
        if line.trim().is_empty() {
            continue;
        }
        match Message::parse(&line)? {
            Message::Propose { epoch, path, .. } => {
                let variants: Vec<OpVariant> = path.iter().map(OpVariant::from).collect();
                let reply = Message::Loss {
                    epoch,
                    value: landscape.loss(epoch, &variants),
                };
                writeln!(writer, "{}", reply.to_line())?;
                writer.flush()?;
                served += 1;
            }
            Message::Shutdown => return Ok(served),
            Message::Loss { .. } => {
                return Err(EvalError::Protocol("engine sent a loss message".into()))
            }
        }
    }
}
