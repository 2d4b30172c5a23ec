//! Deterministic multi-node runs over [`SimNetwork`].
//!
//! Node 0 starts the network; every other node bootstraps from it. All nodes
//! are clients and miners holding disjoint equal shards of one blob dataset.
//! After one warm-up interval each round lasts one block interval: clients
//! train at its start and miners mine at its midpoint. The run ends with a
//! quiet period of [`QUIESCENT_INTERVALS`] intervals.

use std::io::{self, BufRead, Write};
use std::net::{Ipv4Addr, SocketAddr};

use serde::{Deserialize, Serialize};

use crate::chain::CompactTarget;
use crate::dataset::BlobSpec;
use crate::exec::Exec;
use crate::net::sim::{Datagram, SimConfig, SimNetwork, SimStats};
use crate::net::Channel;
use crate::node::{DataSource, Node, NodeConfig, NodeError, NodeEvent, Role, Step};
use crate::params::{Activation, ModelConfig};
use crate::trainer::{evaluate, TrainSpec};

pub const QUIESCENT_INTERVALS: u64 = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationSpec {
    pub nodes: usize,
    pub rounds: u64,
    pub net: SimConfig,
    pub seed: u64,
    pub blobs: BlobSpec,
    pub test_samples: usize,
    pub hidden: Vec<usize>,
    pub train: TrainSpec,
    pub block_interval: u64,
    pub tick_ms: u64,
    pub initial_target: CompactTarget,
    pub participation: f64,
}

impl SimulationSpec {
    pub fn new(nodes: usize, rounds: u64, net: SimConfig) -> Self {
        SimulationSpec {
            nodes,
            rounds,
            seed: net.seed,
            net,
            blobs: BlobSpec::default(),
            test_samples: 1000,
            hidden: vec![16],
            train: TrainSpec {
                epochs: 2,
                batch_size: 32,
                learning_rate: 0.05,
                seed: 0,
            },
            block_interval: 2,
            tick_ms: 100,
            initial_target: CompactTarget::new(0x2100_ffff).expect("valid"),
            participation: 1.0,
        }
    }

    fn interval_ticks(&self) -> u64 {
        (self.block_interval * 1000 / self.tick_ms).max(2)
    }

    pub fn model(&self) -> ModelConfig {
        let mut layers = vec![self.blobs.features];
        layers.extend(&self.hidden);
        layers.push(self.blobs.classes);
        ModelConfig::new(layers, Activation::Relu, self.seed).expect("valid layers")
    }

    pub fn sync_addr(i: usize) -> SocketAddr {
        SocketAddr::from((Ipv4Addr::from(0x0a00_0001 + i as u32), crate::net::DEFAULT_SYNC_PORT))
    }

    pub fn broadcast_addr(i: usize) -> SocketAddr {
        SocketAddr::from((
            Ipv4Addr::from(0x0a00_0001 + i as u32),
            crate::net::DEFAULT_BROADCAST_PORT,
        ))
    }

    pub fn node_config(&self, i: usize) -> NodeConfig {
        let mut c = NodeConfig::defaults();
        c.roles = [Role::Client, Role::Miner].into();
        c.model = self.model();
        c.train = TrainSpec {
            seed: self.seed ^ (i as u64 + 1).wrapping_mul(0xd1b5_4a32_d192_ed03),
            ..self.train.clone()
        };
        c.data = DataSource::Synthetic {
            blobs: self.blobs.clone(),
            shard: i,
            shards: self.nodes,
        };
        c.sync = Self::sync_addr(i);
        c.broadcast = Self::broadcast_addr(i);
        c.bootstrap = (i > 0).then(|| Self::sync_addr(0));
        c.desired_block_interval = self.block_interval;
        c.initial_target = self.initial_target;
        c.participation_probability = self.participation;
        c.seed = (self.seed << 16) ^ i as u64;
        c
    }
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub tick: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<usize>,
    pub event: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl TraceRecord {
    fn new(tick: u64, node: Option<usize>, event: &str) -> Self {
        TraceRecord {
            tick,
            node,
            event: event.to_string(),
            round: None,
            height: None,
            hash: None,
            accuracy: None,
            detail: None,
        }
    }

    fn from_event(tick: u64, node: usize, e: &NodeEvent) -> Self {
        let mut r = TraceRecord::new(tick, Some(node), e.kind());
        match e {
            NodeEvent::Adopted { height, hash, .. } | NodeEvent::Mined { height, hash, .. } => {
                r.height = Some(*height);
                r.hash = Some(hash.to_string());
            }
            NodeEvent::Trained { round, .. }
            | NodeEvent::NotParticipating { round }
            | NodeEvent::TrainingFailed { round, .. }
            | NodeEvent::MiningFailed { round }
            | NodeEvent::UpdateAccepted { round, .. } => r.round = Some(*round),
            NodeEvent::BootstrapDone { height, .. } => r.height = Some(*height),
            _ => {}
        }
        r.detail = Some(e.to_string());
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundAccuracy {
    pub round: u64,
    pub height: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub nodes: usize,
    pub rounds: u64,
    pub final_tips: Vec<String>,
    pub final_heights: Vec<u64>,
    pub converged: bool,
    pub round_accuracy: Vec<RoundAccuracy>,
}

/// Rebuilds the summary from a trace alone.
pub fn summarize_trace(trace: &[TraceRecord]) -> SimSummary {
    let mut nodes = 0;
    let mut rounds = 0;
    let mut tips: Vec<(String, u64)> = vec![];
    let mut round_accuracy = vec![];
    for r in trace {
        match (r.event.as_str(), r.node) {
            ("config", _) => {
                nodes = r.height.unwrap_or(0) as usize;
                rounds = r.round.unwrap_or(0);
                tips = vec![(String::new(), 0); nodes];
            }
            ("start" | "adopted", Some(i)) if i < tips.len() => {
                tips[i] = (r.hash.clone().unwrap_or_default(), r.height.unwrap_or(0));
            }
            ("round", _) => round_accuracy.push(RoundAccuracy {
                round: r.round.unwrap_or(0),
                height: r.height.unwrap_or(0),
                accuracy: r.accuracy.unwrap_or(f64::NAN),
            }),
            _ => {}
        }
    }
    let converged = !tips.is_empty() && tips.iter().all(|t| t.0 == tips[0].0);
    SimSummary {
        nodes,
        rounds,
        final_tips: tips.iter().map(|t| t.0.clone()).collect(),
        final_heights: tips.iter().map(|t| t.1).collect(),
        converged,
        round_accuracy,
    }
}

pub fn write_trace(w: &mut impl Write, trace: &[TraceRecord]) -> io::Result<()> {
    for r in trace {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_trace(r: impl BufRead) -> io::Result<Vec<TraceRecord>> {
    r.lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| serde_json::from_str(&l?).map_err(io::Error::from))
        .collect()
}

pub struct SimulationRun {
    pub nodes: Vec<Node>,
    pub trace: Vec<TraceRecord>,
    pub summary: SimSummary,
    pub network: SimStats,
}

struct Driver {
    nodes: Vec<Node>,
    net: SimNetwork,
    trace: Vec<TraceRecord>,
}

impl Driver {
    fn node_index(&self, channel: Channel, to: SocketAddr) -> Option<usize> {
        self.nodes.iter().position(|n| match channel {
            Channel::Sync => n.config().sync == to,
            Channel::Broadcast => n.config().broadcast == to,
        })
    }

    fn emit(&mut self, i: usize, step: Step) {
        let tick = self.net.tick();
        let (sync, broadcast) = (self.nodes[i].config().sync, self.nodes[i].config().broadcast);
        for (channel, to, bytes) in step.out.0 {
            let from = match channel {
                Channel::Sync => sync,
                Channel::Broadcast => broadcast,
            };
            self.net.send(Datagram {
                from,
                to,
                channel,
                bytes,
            });
        }
        for e in &step.events {
            if !matches!(e, NodeEvent::UpdateAccepted { .. }) {
                self.trace.push(TraceRecord::from_event(tick, i, e));
            }
        }
    }
}

pub fn run_simulation(spec: &SimulationSpec, exec: Exec) -> Result<SimulationRun, NodeError> {
    let nodes = (0..spec.nodes)
        .map(|i| Node::new(spec.node_config(i)))
        .collect::<Result<Vec<_>, _>>()?;
    let (_, test) = spec.blobs.train_test(spec.test_samples);
    let model = spec.model();
    let mut d = Driver {
        nodes,
        net: SimNetwork::new(spec.net),
        trace: vec![],
    };
    let mut cfg = TraceRecord::new(0, None, "config");
    cfg.height = Some(spec.nodes as u64);
    cfg.round = Some(spec.rounds);
    cfg.detail = Some(format!(
        "drop={} duplicate={} max_delay={} seed={}",
        spec.net.drop_probability, spec.net.duplicate_probability, spec.net.max_delay_ticks, spec.net.seed
    ));
    d.trace.push(cfg);
    for i in 0..d.nodes.len() {
        let mut r = TraceRecord::new(0, Some(i), "start");
        r.height = Some(0);
        r.hash = Some(d.nodes[i].chain().tip_hash().to_string());
        d.trace.push(r);
        let step = d.nodes[i].start(0);
        d.emit(i, step);
    }

    let per = spec.interval_ticks();
    let warmup = per;
    let end = warmup + spec.rounds * per + QUIESCENT_INTERVALS * per;
    while d.net.tick() < end {
        let delivered = d.net.step();
        let tick = d.net.tick();
        let now = tick * spec.tick_ms;
        for dg in delivered {
            if let Some(i) = d.node_index(dg.channel, dg.to) {
                let step = d.nodes[i].handle_datagram(now, dg.channel, dg.from, &dg.bytes);
                d.emit(i, step);
            }
        }
        for i in 0..d.nodes.len() {
            let step = d.nodes[i].tick(now);
            d.emit(i, step);
        }
        if tick < warmup || tick >= warmup + spec.rounds * per {
            continue;
        }
        let phase = (tick - warmup) % per;
        if phase == 0 {
            let mut jobs = vec![];
            for i in 0..d.nodes.len() {
                let (job, events) = d.nodes[i].begin_training();
                d.emit(
                    i,
                    Step {
                        events,
                        ..Step::default()
                    },
                );
                jobs.extend(job.map(|j| (i, j)));
            }
            let results = exec.map(&jobs, |(_, j)| j.run());
            for ((i, j), r) in jobs.into_iter().zip(results) {
                let step = d.nodes[i].training_done(j.round, r);
                d.emit(i, step);
            }
        } else if phase == per / 2 {
            let jobs: Vec<_> = (0..d.nodes.len())
                .filter_map(|i| d.nodes[i].begin_mining(now).map(|j| (i, j)))
                .collect();
            let results = exec.map(&jobs, |(_, j)| j.run());
            for ((i, j), r) in jobs.into_iter().zip(results) {
                let step = d.nodes[i].mining_done(&j, r);
                d.emit(i, step);
            }
        } else if phase == per - 1 {
            let c = d.nodes[0].chain();
            let mut r = TraceRecord::new(tick, None, "round");
            r.round = Some((tick - warmup) / per);
            r.height = Some(c.height());
            r.hash = Some(c.tip_hash().to_string());
            r.accuracy = Some(evaluate(&model, d.nodes[0].global_model(), &test).unwrap_or(f64::NAN));
            d.trace.push(r);
        }
    }
    let summary = summarize_trace(&d.trace);
    Ok(SimulationRun {
        network: d.net.stats(),
        nodes: d.nodes,
        trace: d.trace,
        summary,
    })
}
