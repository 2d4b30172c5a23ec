//! Deterministic in-process datagram network with seeded loss, duplication
//! and delay.

use std::collections::BTreeMap;
use std::net::SocketAddr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::Channel;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimConfigError {
    #[error("{name} must lie in [0, 1), got {value}")]
    Probability { name: &'static str, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub drop_probability: f64,
    pub duplicate_probability: f64,
    pub max_delay_ticks: u64,
    pub seed: u64,
}

impl SimConfig {
    pub fn new(drop: f64, duplicate: f64, max_delay_ticks: u64, seed: u64) -> Result<Self, SimConfigError> {
        for (name, value) in [("drop_probability", drop), ("duplicate_probability", duplicate)] {
            if !(0.0..1.0).contains(&value) {
                return Err(SimConfigError::Probability { name, value });
            }
        }
        Ok(SimConfig {
            drop_probability: drop,
            duplicate_probability: duplicate,
            max_delay_ticks,
            seed,
        })
    }

    pub fn lossless(seed: u64) -> Self {
        SimConfig {
            drop_probability: 0.0,
            duplicate_probability: 0.0,
            max_delay_ticks: 0,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Datagram {
    pub from: SocketAddr,
    pub to: SocketAddr,
    pub channel: Channel,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendOutcome {
    Dropped,
    /// Scheduled for delivery at `at`, with `copies` = 2 when duplicated.
    Queued {
        at: u64,
        copies: u8,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimStats {
    pub sent: u64,
    pub dropped: u64,
    pub duplicated: u64,
    pub delivered: u64,
}

/// Messages sent during tick `t` arrive at tick `t + 1 + delay`, in send order
/// within a tick.
#[derive(Debug, Clone)]
pub struct SimNetwork {
    config: SimConfig,
    rng: ChaCha8Rng,
    tick: u64,
    seq: u64,
    queue: BTreeMap<(u64, u64), Datagram>,
    stats: SimStats,
}

impl SimNetwork {
    pub fn new(config: SimConfig) -> Self {
        SimNetwork {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            tick: 0,
            seq: 0,
            queue: BTreeMap::new(),
            stats: SimStats::default(),
        }
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn stats(&self) -> SimStats {
        self.stats
    }

    pub fn in_flight(&self) -> usize {
        self.queue.len()
    }

    fn delay(&mut self) -> u64 {
        if self.config.max_delay_ticks == 0 {
            0
        } else {
            self.rng.random_range(0..=self.config.max_delay_ticks)
        }
    }

    fn enqueue(&mut self, at: u64, d: Datagram) {
        self.queue.insert((at, self.seq), d);
        self.seq += 1;
    }

    pub fn send(&mut self, d: Datagram) -> SendOutcome {
        self.stats.sent += 1;
        // Every send consumes the same random draws whatever the outcome, so
        // one lost message never reshuffles the fate of later ones.
        let lost = self.rng.random::<f64>() < self.config.drop_probability;
        let dup = self.rng.random::<f64>() < self.config.duplicate_probability;
        let d1 = self.delay();
        let d2 = self.delay();
        if lost {
            self.stats.dropped += 1;
            return SendOutcome::Dropped;
        }
        let at = self.tick + 1 + d1;
        if dup {
            self.stats.duplicated += 1;
            self.enqueue(self.tick + 1 + d2, d.clone());
        }
        self.enqueue(at, d);
        SendOutcome::Queued {
            at,
            copies: if dup { 2 } else { 1 },
        }
    }

    /// Advances one tick and returns everything due at the new tick.
    pub fn step(&mut self) -> Vec<Datagram> {
        self.tick += 1;
        let later = self.queue.split_off(&(self.tick + 1, 0));
        let due = std::mem::replace(&mut self.queue, later);
        self.stats.delivered += due.len() as u64;
        due.into_values().collect()
    }
}

/// Advances `network` one tick; the delivered datagrams.
pub fn sim_step(network: &mut SimNetwork) -> Vec<Datagram> {
    network.step()
}
