//! Delegating a client's training step to a worker node over a stream
//! connection. The data travels in a tagged, transformed payload; only the
//! identity transform is registered.

use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use log::{debug, warn};
use thiserror::Error;

use crate::codec::{read_frame, write_frame, DecodeError, Reader, Writer};
use crate::dataset::Dataset;
use crate::params::{Address, ModelConfig, ModelUpdate, ParameterVector};
use crate::trainer::{train_local, TrainError, TrainSpec};

pub const MAX_JOB_BYTES: usize = 256 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Transform {
    Identity = 0,
}

impl Transform {
    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Transform::Identity),
            _ => None,
        }
    }

    pub fn apply(self, data: &Dataset) -> Vec<u8> {
        match self {
            Transform::Identity => {
                let mut w = Writer::new();
                data.encode(&mut w);
                w.finish()
            }
        }
    }

    pub fn invert(self, payload: &[u8]) -> Result<Dataset, DecodeError> {
        match self {
            Transform::Identity => {
                let mut r = Reader::new(payload);
                let d = Dataset::decode(&mut r)?;
                r.finish()?;
                Ok(d)
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum OffloadError {
    #[error("transform tag {0} is not registered")]
    UnknownTransform(u8),
    #[error("payload does not decode under its transform: {0}")]
    Payload(DecodeError),
    #[error("malformed job: {0}")]
    Decode(#[from] DecodeError),
    #[error("start parameters have {actual} entries, model expects {expected}")]
    ParamDim { expected: usize, actual: usize },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("worker reported: {0}")]
    Remote(String),
    #[error("worker reply does not match the job: {0}")]
    BadReply(String),
    #[error("worker unreachable: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OffloadJob {
    pub job_id: [u8; 16],
    pub model: ModelConfig,
    pub start_params: ParameterVector,
    pub transform: u8,
    pub payload: Vec<u8>,
    pub spec: TrainSpec,
    pub reply_endpoint: String,
    pub client_id: Address,
    pub round: u64,
}

impl OffloadJob {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        job_id: [u8; 16],
        model: ModelConfig,
        start_params: ParameterVector,
        data: &Dataset,
        spec: TrainSpec,
        reply_endpoint: String,
        client_id: Address,
        round: u64,
    ) -> Self {
        OffloadJob {
            job_id,
            model,
            start_params,
            transform: Transform::Identity as u8,
            payload: Transform::Identity.apply(data),
            spec,
            reply_endpoint,
            client_id,
            round,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(self.payload.len() + 8 * self.start_params.dim() + 128);
        w.bytes(&self.job_id);
        self.model.encode(&mut w);
        self.start_params.encode(&mut w);
        w.u8(self.transform).var_bytes(&self.payload);
        self.spec.encode(&mut w);
        w.string(&self.reply_endpoint).bytes(&self.client_id.0).u64(self.round);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let job = OffloadJob {
            job_id: r.array()?,
            model: ModelConfig::decode(&mut r)?,
            start_params: ParameterVector::decode(&mut r)?,
            transform: r.u8()?,
            payload: r.var_bytes()?.to_vec(),
            spec: TrainSpec::decode(&mut r)?,
            reply_endpoint: r.string()?,
            client_id: Address(r.array()?),
            round: r.u64()?,
        };
        r.finish()?;
        Ok(job)
    }

    fn data(&self) -> Result<Dataset, OffloadError> {
        let t = Transform::from_tag(self.transform).ok_or(OffloadError::UnknownTransform(self.transform))?;
        t.invert(&self.payload).map_err(OffloadError::Payload)
    }
}

/// What a worker does with a job: decode the payload and train on it as the
/// originating client.
pub fn execute_job(job: &OffloadJob) -> Result<ModelUpdate, OffloadError> {
    let data = job.data()?;
    if job.start_params.dim() != job.model.param_count() {
        return Err(OffloadError::ParamDim {
            expected: job.model.param_count(),
            actual: job.start_params.dim(),
        });
    }
    Ok(train_local(
        &job.model,
        &job.start_params,
        &data,
        &job.spec,
        job.client_id,
        job.round,
    )?)
}

/// `job_id ∥ status:u8 ∥ (update | message)`.
#[derive(Debug, Clone, PartialEq)]
pub enum OffloadReply {
    Done { job_id: [u8; 16], update: ModelUpdate },
    Failed { job_id: [u8; 16], message: String },
}

impl OffloadReply {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            OffloadReply::Done { job_id, update } => {
                w.bytes(job_id).u8(0);
                update.encode(&mut w);
            }
            OffloadReply::Failed { job_id, message } => {
                w.bytes(job_id).u8(1).string(message);
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let job_id = r.array()?;
        let reply = match r.u8()? {
            0 => OffloadReply::Done {
                job_id,
                update: ModelUpdate::decode(&mut r)?,
            },
            1 => OffloadReply::Failed {
                job_id,
                message: r.string()?,
            },
            s => return Err(DecodeError::invalid("status", format!("unknown status {s}"))),
        };
        r.finish()?;
        Ok(reply)
    }
}

pub trait OffloadWorker {
    fn submit(&self, job: &OffloadJob) -> Result<ModelUpdate, OffloadError>;
}

/// Runs jobs in the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct InProcessWorker;

impl OffloadWorker for InProcessWorker {
    fn submit(&self, job: &OffloadJob) -> Result<ModelUpdate, OffloadError> {
        execute_job(job)
    }
}

/// A remote worker reached over a `len:u32 ∥ job` stream.
#[derive(Debug, Clone)]
pub struct TcpWorker {
    pub addr: SocketAddr,
    pub timeout: Duration,
}

impl OffloadWorker for TcpWorker {
    fn submit(&self, job: &OffloadJob) -> Result<ModelUpdate, OffloadError> {
        let mut s = TcpStream::connect_timeout(&self.addr, self.timeout)?;
        s.set_read_timeout(Some(self.timeout))?;
        s.set_write_timeout(Some(self.timeout))?;
        write_frame(&mut s, &job.to_bytes())?;
        let bytes = read_frame(&mut s, MAX_JOB_BYTES)?;
        match OffloadReply::from_bytes(&bytes)? {
            OffloadReply::Done { job_id, update } if job_id == job.job_id => Ok(update),
            OffloadReply::Failed { job_id, message } if job_id == job.job_id => Err(OffloadError::Remote(message)),
            _ => Err(OffloadError::BadReply("job id not echoed".into())),
        }
    }
}

fn serve_connection(mut s: TcpStream) -> io::Result<()> {
    s.set_read_timeout(Some(Duration::from_secs(30)))?;
    let bytes = read_frame(&mut s, MAX_JOB_BYTES)?;
    let reply = match OffloadJob::from_bytes(&bytes) {
        Ok(job) => match execute_job(&job) {
            Ok(update) => OffloadReply::Done {
                job_id: job.job_id,
                update,
            },
            Err(e) => OffloadReply::Failed {
                job_id: job.job_id,
                message: e.to_string(),
            },
        },
        Err(e) => OffloadReply::Failed {
            job_id: [0; 16],
            message: e.to_string(),
        },
    };
    write_frame(&mut s, &reply.to_bytes())
}

/// Accepts offload jobs until `stop` is set, one thread per connection.
pub fn serve_offload(listener: TcpListener, stop: Arc<AtomicBool>) -> io::Result<()> {
    listener.set_nonblocking(true)?;
    while !stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((s, peer)) => {
                s.set_nonblocking(false)?;
                thread::spawn(move || {
                    if let Err(e) = serve_connection(s) {
                        debug!("offload connection from {peer}: {e}");
                    }
                });
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(20)),
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum OffloadOutcome {
    Remote,
    Fallback(String),
}

/// Sends `job` to `worker`, falling back to training locally on the same data
/// if the worker fails or returns an update that does not fit the job.
pub fn submit_offload(
    job: &OffloadJob,
    worker: &dyn OffloadWorker,
    data: &Dataset,
) -> Result<(ModelUpdate, OffloadOutcome), TrainError> {
    let reason = match worker.submit(job) {
        Ok(u) => match check_reply(job, data, &u) {
            Ok(()) => return Ok((u, OffloadOutcome::Remote)),
            Err(why) => why,
        },
        Err(e) => e.to_string(),
    };
    warn!("offload failed ({reason}); training locally");
    let u = train_local(&job.model, &job.start_params, data, &job.spec, job.client_id, job.round)?;
    Ok((u, OffloadOutcome::Fallback(reason)))
}

fn check_reply(job: &OffloadJob, data: &Dataset, u: &ModelUpdate) -> Result<(), String> {
    if u.client_id != job.client_id || u.round != job.round {
        return Err("update attributed to a different client or round".into());
    }
    if u.params.dim() != job.model.param_count() {
        return Err(format!("update has {} parameters", u.params.dim()));
    }
    if u.sample_count != data.n_samples() as u64 {
        return Err(format!("update claims {} samples", u.sample_count));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::BlobSpec;
    use crate::params::Activation;
    use crate::trainer::init_params;

    fn job() -> (OffloadJob, Dataset) {
        let data = BlobSpec {
            samples: 60,
            features: 4,
            classes: 3,
            ..BlobSpec::default()
        }
        .generate();
        let model = ModelConfig::new(vec![4, 5, 3], Activation::Relu, 2).unwrap();
        let spec = TrainSpec {
            epochs: 2,
            batch_size: 8,
            learning_rate: 0.1,
            seed: 3,
        };
        let start = init_params(&model);
        let j = OffloadJob::new(
            [7; 16],
            model,
            start,
            &data,
            spec,
            "127.0.0.1:1".into(),
            Address([5; 20]),
            4,
        );
        (j, data)
    }

    #[test]
    fn identity_offload_is_bit_identical() {
        let (j, data) = job();
        let local = train_local(&j.model, &j.start_params, &data, &j.spec, j.client_id, j.round).unwrap();
        let (remote, how) = submit_offload(&j, &InProcessWorker, &data).unwrap();
        assert_eq!(how, OffloadOutcome::Remote);
        assert_eq!(remote, local);
    }

    #[test]
    fn job_round_trip() {
        let (j, _) = job();
        assert_eq!(OffloadJob::from_bytes(&j.to_bytes()).unwrap(), j);
        let r = OffloadReply::Failed {
            job_id: [1; 16],
            message: "x".into(),
        };
        assert_eq!(OffloadReply::from_bytes(&r.to_bytes()).unwrap(), r);
    }

    #[test]
    fn unknown_transform_rejected() {
        let (mut j, _) = job();
        j.transform = 9;
        assert!(matches!(execute_job(&j), Err(OffloadError::UnknownTransform(9))));
    }

    #[test]
    fn offline_worker_falls_back() {
        let (j, data) = job();
        let dead = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = dead.local_addr().unwrap();
        drop(dead);
        let worker = TcpWorker {
            addr,
            timeout: Duration::from_millis(200),
        };
        let (u, how) = submit_offload(&j, &worker, &data).unwrap();
        assert!(matches!(how, OffloadOutcome::Fallback(_)));
        assert_eq!(u, execute_job(&j).unwrap());
    }

    #[test]
    fn tcp_worker_serves_jobs() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let stop = Arc::new(AtomicBool::new(false));
        let s2 = Arc::clone(&stop);
        let h = thread::spawn(move || serve_offload(listener, s2));
        let worker = TcpWorker {
            addr,
            timeout: Duration::from_secs(10),
        };
        let (j, data) = job();
        let (u, how) = submit_offload(&j, &worker, &data).unwrap();
        assert_eq!(how, OffloadOutcome::Remote);
        assert_eq!(u, execute_job(&j).unwrap());

        let mut bad = j.clone();
        bad.transform = 3;
        assert!(matches!(worker.submit(&bad), Err(OffloadError::Remote(_))));
        stop.store(true, Ordering::Relaxed);
        h.join().unwrap().unwrap();
    }
}
