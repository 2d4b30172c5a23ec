//! Runs a [`Node`] on real UDP sockets with wall-clock rounds.
//!
//! Two receive threads feed datagrams to the loop; training and mining jobs
//! run on their own threads so the loop keeps answering peers. Rounds are
//! aligned to multiples of the block interval since the Unix epoch, so nodes
//! started separately agree on round boundaries.

use std::net::{SocketAddr, TcpListener};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use log::{debug, info, warn};
use thiserror::Error;

use crate::bridge::BridgeServer;
use crate::chain::{Block, Hash256};
use crate::net::udp::{Received, UdpTransport};
use crate::net::Transport;
use crate::node::{serve_offload, DataSource, MineJob, Node, NodeConfig, NodeError, Role, Step, TrainerBackend};
use crate::params::ModelUpdate;
use crate::trainer::TrainError;

const TICK: Duration = Duration::from_millis(100);

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error("cannot bind {what} on {addr}: {source}")]
    Bind {
        what: &'static str,
        addr: SocketAddr,
        source: std::io::Error,
    },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub height: u64,
    pub tip: Hash256,
    pub rounds_seen: u64,
}

pub fn unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

enum JobResult {
    Trained(u64, Result<(ModelUpdate, String), TrainError>),
    Mined(Box<MineJob>, Option<Block>),
}

/// Where the external trainer finds this node's data: the CSV it was loaded
/// from, or a CSV written once next to the chain file.
fn bridge_data_ref(config: &NodeConfig) -> Result<PathBuf, NodeError> {
    match &config.data {
        DataSource::Csv(p) => Ok(p.clone()),
        source => {
            let dir = config
                .chain_path
                .as_ref()
                .and_then(|p| p.parent().map(PathBuf::from))
                .unwrap_or_else(std::env::temp_dir);
            let path = dir.join(format!("fedchain-{}-data.csv", config.sync.port()));
            source.load()?.write_csv(&path)?;
            Ok(path)
        }
    }
}

/// Runs until `stop` is set or the chain reaches `max_height`.
pub fn run_node(config: NodeConfig, stop: Arc<AtomicBool>, max_height: Option<u64>) -> Result<RunReport, RuntimeError> {
    let interval_ms = config.desired_block_interval * 1000;
    let mut node = Node::new(config.clone())?;
    if let Some(r) = node.recovery() {
        info!(
            "chain file: {} blocks read, resuming at height {}{}",
            r.blocks_read,
            node.chain().height(),
            if r.truncated { " (invalid tail dropped)" } else { "" }
        );
    }
    if let Some(port) = config.bridge_port {
        let addr = SocketAddr::from(([127, 0, 0, 1], port));
        let server = BridgeServer::bind(addr).map_err(NodeError::from)?;
        info!("external trainer bridge listening on {addr}");
        node.set_backend(TrainerBackend::Bridge {
            server: Arc::new(Mutex::new(server)),
            data_ref: bridge_data_ref(&config)?,
        });
    }
    let mut workers = vec![];
    if config.has(Role::Worker) {
        let listener = TcpListener::bind(config.worker_listen).map_err(|source| RuntimeError::Bind {
            what: "offload worker",
            addr: config.worker_listen,
            source,
        })?;
        info!("offload worker listening on {}", config.worker_listen);
        let stop = stop.clone();
        workers.push(thread::spawn(move || {
            if let Err(e) = serve_offload(listener, stop) {
                warn!("offload worker stopped: {e}");
            }
        }));
    }

    let mut udp = UdpTransport::bind(config.sync, config.broadcast).map_err(|source| RuntimeError::Bind {
        what: "node sockets",
        addr: config.sync,
        source,
    })?;
    let (net_tx, net_rx) = mpsc::channel::<Received>();
    workers.extend(udp.spawn_receivers(net_tx, stop.clone())?);
    let (job_tx, job_rx) = mpsc::channel::<JobResult>();
    info!(
        "node {} on sync {} broadcast {}",
        node.address(),
        config.sync,
        config.broadcast
    );

    let flush = |step: Step, udp: &mut UdpTransport| {
        for e in &step.events {
            info!("{e}");
        }
        for (channel, to, bytes) in step.out.0 {
            if let Err(e) = udp.send(channel, to, bytes) {
                debug!("send to {to} failed: {e}");
            }
        }
    };

    let start = node.start(unix_ms());
    flush(start, &mut udp);
    let mut training = false;
    let mut mining = false;
    let mut last_slot = None;
    let mut mined_slot = None;
    let mut rounds_seen = 0;
    let mut next_tick = unix_ms();

    while !stop.load(Ordering::Relaxed) && max_height.is_none_or(|h| node.chain().height() < h) {
        match net_rx.recv_timeout(Duration::from_millis(20)) {
            Ok(r) => {
                let s = node.handle_datagram(unix_ms(), r.channel, r.from, &r.bytes);
                flush(s, &mut udp);
            }
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => break,
        }
        while let Ok(r) = job_rx.try_recv() {
            let s = match r {
                JobResult::Trained(round, result) => {
                    training = false;
                    node.training_done(round, result)
                }
                JobResult::Mined(job, block) => {
                    mining = false;
                    node.mining_done(&job, block)
                }
            };
            flush(s, &mut udp);
        }
        let now = unix_ms();
        if now < next_tick {
            continue;
        }
        next_tick = now + TICK.as_millis() as u64;
        let s = node.tick(now);
        flush(s, &mut udp);
        if node.is_bootstrapping() {
            continue;
        }
        let slot = now / interval_ms;
        if last_slot != Some(slot) && !training {
            last_slot = Some(slot);
            rounds_seen += 1;
            let (job, events) = node.begin_training();
            flush(
                Step {
                    events,
                    ..Step::default()
                },
                &mut udp,
            );
            if let Some(job) = job {
                training = true;
                let tx = job_tx.clone();
                thread::spawn(move || {
                    let r = job.run();
                    let _ = tx.send(JobResult::Trained(job.round, r));
                });
            }
        }
        if now % interval_ms >= interval_ms / 2 && mined_slot != Some(slot) && !mining && !training {
            if let Some(job) = node.begin_mining(now) {
                mined_slot = Some(slot);
                mining = true;
                let tx = job_tx.clone();
                thread::spawn(move || {
                    let b = job.run();
                    let _ = tx.send(JobResult::Mined(Box::new(job), b));
                });
            }
        }
    }
    stop.store(true, Ordering::Relaxed);
    for w in workers {
        let _ = w.join();
    }
    info!(
        "stopped at height {} tip {}",
        node.chain().height(),
        node.chain().tip_hash()
    );
    Ok(RunReport {
        height: node.chain().height(),
        tip: node.chain().tip_hash(),
        rounds_seen,
    })
}
