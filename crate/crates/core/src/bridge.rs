//! Loopback stream protocol that lets an external process act as a node's
//! local trainer. The node listens; a trainer connects and answers one
//! [`BridgeRequest`] at a time with a [`BridgeResponse`].
//!
//! Frames are `len:u32 ∥ message` with the block format's integer and float
//! encodings. Requests carry a path to the dataset, never its contents.

use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, warn};
use thiserror::Error;

use crate::codec::{read_frame, write_frame, DecodeError, Reader, Writer};
use crate::dataset::Dataset;
use crate::params::{Address, ModelConfig, ModelUpdate, ParameterVector};
use crate::trainer::{train_local, TrainError, TrainSpec};

pub const DEFAULT_BRIDGE_PORT: u16 = 9400;
pub const TIMEOUT_PER_EPOCH: Duration = Duration::from_secs(10);
const MAX_FRAME: usize = 256 << 20;

#[derive(Debug, Clone, PartialEq)]
pub struct BridgeRequest {
    pub job_id: [u8; 16],
    pub model: ModelConfig,
    pub start_params: ParameterVector,
    pub spec: TrainSpec,
    pub data_ref: String,
}

impl BridgeRequest {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(&self.job_id);
        self.model.encode(&mut w);
        self.start_params.encode(&mut w);
        self.spec.encode(&mut w);
        w.string(&self.data_ref);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let req = BridgeRequest {
            job_id: r.array()?,
            model: ModelConfig::decode(&mut r)?,
            start_params: ParameterVector::decode(&mut r)?,
            spec: TrainSpec::decode(&mut r)?,
            data_ref: r.string()?,
        };
        r.finish()?;
        Ok(req)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum BridgeStatus {
    Ok = 0,
    Error = 1,
}

/// `job_id ∥ status:u8 ∥ update (when ok) ∥ message`. A trainer may leave the
/// update's client id and round zeroed; the node fills them in.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeResponse {
    pub job_id: [u8; 16],
    pub status: BridgeStatus,
    pub update: Option<ModelUpdate>,
    pub message: String,
}

impl BridgeResponse {
    pub fn ok(job_id: [u8; 16], update: ModelUpdate) -> Self {
        BridgeResponse {
            job_id,
            status: BridgeStatus::Ok,
            update: Some(update),
            message: String::new(),
        }
    }

    pub fn error(job_id: [u8; 16], message: impl Into<String>) -> Self {
        BridgeResponse {
            job_id,
            status: BridgeStatus::Error,
            update: None,
            message: message.into(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(&self.job_id).u8(self.status as u8);
        if let (BridgeStatus::Ok, Some(u)) = (self.status, &self.update) {
            u.encode(&mut w);
        }
        w.string(&self.message);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let job_id = r.array()?;
        let (status, update) = match r.u8()? {
            0 => (BridgeStatus::Ok, Some(ModelUpdate::decode(&mut r)?)),
            1 => (BridgeStatus::Error, None),
            s => return Err(DecodeError::invalid("status", format!("unknown status {s}"))),
        };
        let message = r.string()?;
        r.finish()?;
        Ok(BridgeResponse {
            job_id,
            status,
            update,
            message,
        })
    }
}

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("bridge must listen on a loopback address, not {0}")]
    NotLoopback(SocketAddr),
    #[error("no trainer connected within the timeout")]
    NoTrainer,
    #[error("trainer did not answer in time")]
    Timeout,
    #[error("malformed response: {0}")]
    Malformed(#[from] DecodeError),
    #[error("response rejected: {0}")]
    Rejected(String),
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for BridgeError {
    fn from(e: io::Error) -> Self {
        match e.kind() {
            io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => BridgeError::Timeout,
            _ => BridgeError::Io(e),
        }
    }
}

#[derive(Debug)]
pub struct BridgeServer {
    listener: TcpListener,
    trainer: Option<TcpStream>,
    per_epoch: Duration,
}

impl BridgeServer {
    pub fn bind(addr: SocketAddr) -> Result<Self, BridgeError> {
        if !addr.ip().is_loopback() {
            return Err(BridgeError::NotLoopback(addr));
        }
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        Ok(BridgeServer {
            listener,
            trainer: None,
            per_epoch: TIMEOUT_PER_EPOCH,
        })
    }

    pub fn with_timeout_per_epoch(mut self, d: Duration) -> Self {
        self.per_epoch = d;
        self
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    pub fn timeout_for(&self, spec: &TrainSpec) -> Duration {
        self.per_epoch * spec.epochs.max(1)
    }

    fn connection(&mut self, deadline: Instant) -> Result<&mut TcpStream, BridgeError> {
        if self.trainer.is_none() {
            loop {
                match self.listener.accept() {
                    Ok((s, _)) => {
                        s.set_nonblocking(false)?;
                        self.trainer = Some(s);
                        break;
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                        if Instant::now() >= deadline {
                            return Err(BridgeError::NoTrainer);
                        }
                        thread::sleep(Duration::from_millis(10));
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        }
        Ok(self.trainer.as_mut().expect("set above"))
    }

    /// Sends one request and waits for the reply until the spec-scaled
    /// deadline. Any transport failure drops the connection.
    pub fn exchange(&mut self, req: &BridgeRequest) -> Result<BridgeResponse, BridgeError> {
        let deadline = Instant::now() + self.timeout_for(&req.spec);
        let result = (|| {
            let s = self.connection(deadline)?;
            let left = deadline
                .saturating_duration_since(Instant::now())
                .max(Duration::from_millis(1));
            s.set_write_timeout(Some(left))?;
            write_frame(s, &req.to_bytes())?;
            let left = deadline
                .saturating_duration_since(Instant::now())
                .max(Duration::from_millis(1));
            s.set_read_timeout(Some(left))?;
            let bytes = read_frame(s, MAX_FRAME)?;
            Ok(BridgeResponse::from_bytes(&bytes)?)
        })();
        if result.is_err() {
            self.trainer = None;
        }
        result
    }
}

/// The acceptance gates every external update must pass before use.
pub fn check_response(
    req: &BridgeRequest,
    resp: &BridgeResponse,
    n_samples: usize,
) -> Result<ParameterVector, BridgeError> {
    if resp.job_id != req.job_id {
        return Err(BridgeError::Rejected("job id not echoed".into()));
    }
    let update = match (resp.status, &resp.update) {
        (BridgeStatus::Ok, Some(u)) => u,
        _ => return Err(BridgeError::Rejected(format!("trainer error: {}", resp.message))),
    };
    if update.params.dim() != req.model.param_count() {
        return Err(BridgeError::Rejected(format!(
            "{} parameters, model has {}",
            update.params.dim(),
            req.model.param_count()
        )));
    }
    if update.params.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(BridgeError::Rejected("non-finite parameters".into()));
    }
    if update.sample_count != n_samples as u64 {
        return Err(BridgeError::Rejected(format!(
            "sample_count {} but the dataset has {n_samples} rows",
            update.sample_count
        )));
    }
    Ok(update.params.clone())
}

#[derive(Debug, Clone, PartialEq)]
pub enum BridgeOutcome {
    External,
    Fallback(String),
}

/// Delegates one training step to the connected trainer, falling back to the
/// built-in trainer on timeout or on any rejected response.
#[allow(clippy::too_many_arguments)]
pub fn bridge_train(
    server: &mut BridgeServer,
    job_id: [u8; 16],
    model: &ModelConfig,
    start: &ParameterVector,
    data: &Dataset,
    data_ref: &Path,
    spec: &TrainSpec,
    client_id: Address,
    round: u64,
) -> Result<(ModelUpdate, BridgeOutcome), TrainError> {
    let req = BridgeRequest {
        job_id,
        model: model.clone(),
        start_params: start.clone(),
        spec: spec.clone(),
        data_ref: data_ref.display().to_string(),
    };
    let why = match server
        .exchange(&req)
        .and_then(|resp| check_response(&req, &resp, data.n_samples()))
    {
        Ok(params) => {
            let u = ModelUpdate::new(client_id, data.n_samples() as u64, params, round)?;
            return Ok((u, BridgeOutcome::External));
        }
        Err(e) => e.to_string(),
    };
    warn!("bridge trainer unusable ({why}); using the built-in trainer");
    let u = train_local(model, start, data, spec, client_id, round)?;
    Ok((u, BridgeOutcome::Fallback(why)))
}

/// Trainer side of the protocol: connects to a node's bridge and answers
/// requests with `handler` until the node hangs up or `max_jobs` is reached.
pub fn run_trainer(
    addr: SocketAddr,
    max_jobs: Option<usize>,
    mut handler: impl FnMut(&BridgeRequest) -> Vec<u8>,
) -> io::Result<usize> {
    let mut s = TcpStream::connect(addr)?;
    let mut served = 0;
    while max_jobs.is_none_or(|m| served < m) {
        let bytes = match read_frame(&mut s, MAX_FRAME) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e),
        };
        let reply = match BridgeRequest::from_bytes(&bytes) {
            Ok(req) => handler(&req),
            Err(e) => {
                debug!("malformed bridge request: {e}");
                BridgeResponse::error([0; 16], e.to_string()).to_bytes()
            }
        };
        write_frame(&mut s, &reply)?;
        served += 1;
    }
    Ok(served)
}

/// A trainer written against the same protocol that simply runs the built-in
/// SGD on the referenced CSV file.
pub fn reference_handler(req: &BridgeRequest) -> Vec<u8> {
    let resp = Dataset::from_csv_path(&req.data_ref)
        .map_err(|e| e.to_string())
        .and_then(|d| {
            train_local(&req.model, &req.start_params, &d, &req.spec, Address::default(), 0).map_err(|e| e.to_string())
        });
    match resp {
        Ok(u) => BridgeResponse::ok(req.job_id, u),
        Err(msg) => BridgeResponse::error(req.job_id, msg),
    }
    .to_bytes()
}
