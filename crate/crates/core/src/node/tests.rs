use std::collections::VecDeque;
use std::net::SocketAddr;

use super::*;
use crate::dataset::BlobSpec;
use crate::params::Activation;

fn addr(i: u8, port: u16) -> SocketAddr {
    SocketAddr::from(([10, 0, 0, i], port))
}

fn config(i: u8, bootstrap: Option<u8>) -> NodeConfig {
    let mut c = NodeConfig::defaults();
    c.model = ModelConfig::new(vec![4, 5, 3], Activation::Relu, 2).unwrap();
    c.data = DataSource::Synthetic {
        blobs: BlobSpec {
            classes: 3,
            features: 4,
            samples: 120,
            ..BlobSpec::default()
        },
        shard: i as usize % 4,
        shards: 4,
    };
    c.train.batch_size = 8;
    c.train.epochs = 1;
    c.sync = addr(i, 9333);
    c.broadcast = addr(i, 9334);
    c.bootstrap = bootstrap.map(|b| addr(b, 9333));
    c.initial_target = crate::chain::CompactTarget::new(0x2100_ffff).unwrap();
    c.seed = i as u64;
    c
}

/// Delivers every datagram instantly and in order until the network is quiet.
struct Net {
    nodes: Vec<Node>,
    events: Vec<(usize, NodeEvent)>,
    queue: VecDeque<(SocketAddr, Channel, SocketAddr, Vec<u8>)>,
    now: u64,
}

impl Net {
    fn new(n: u8) -> Net {
        let mut net = Net {
            nodes: (0..n)
                .map(|i| Node::new(config(i, (i > 0).then_some(0))).unwrap())
                .collect(),
            events: vec![],
            queue: VecDeque::new(),
            now: 0,
        };
        for i in 0..n as usize {
            let s = net.nodes[i].start(0);
            net.absorb(i, s);
        }
        net.drain();
        net
    }

    fn absorb(&mut self, i: usize, step: Step) {
        let node = &self.nodes[i];
        for (ch, to, bytes) in step.out.0 {
            let from = match ch {
                Channel::Sync => node.config().sync,
                Channel::Broadcast => node.config().broadcast,
            };
            self.queue.push_back((from, ch, to, bytes));
        }
        self.events.extend(step.events.into_iter().map(|e| (i, e)));
    }

    fn drain(&mut self) {
        while let Some((from, ch, to, bytes)) = self.queue.pop_front() {
            let Some(i) = self.nodes.iter().position(|n| match ch {
                Channel::Sync => n.config().sync == to,
                Channel::Broadcast => n.config().broadcast == to,
            }) else {
                continue;
            };
            let s = self.nodes[i].handle_datagram(self.now, ch, from, &bytes);
            self.absorb(i, s);
        }
    }

    fn settle(&mut self, ms: u64) {
        for _ in 0..ms / 100 {
            self.now += 100;
            for i in 0..self.nodes.len() {
                let s = self.nodes[i].tick(self.now);
                self.absorb(i, s);
            }
            self.drain();
        }
    }

    fn round(&mut self) {
        self.now += 2000;
        for i in 0..self.nodes.len() {
            let (job, ev) = self.nodes[i].begin_training();
            self.events.extend(ev.into_iter().map(|e| (i, e)));
            if let Some(job) = job {
                let r = job.run();
                let s = self.nodes[i].training_done(job.round, r);
                self.absorb(i, s);
            }
        }
        self.drain();
        for i in 0..self.nodes.len() {
            if let Some(job) = self.nodes[i].begin_mining(self.now) {
                let r = job.run();
                let s = self.nodes[i].mining_done(&job, r);
                self.absorb(i, s);
                self.drain();
            }
        }
    }
}

#[test]
fn bootstrap_discovers_peers() {
    let mut net = Net::new(3);
    net.settle(2000);
    for n in &net.nodes {
        assert!(!n.is_bootstrapping());
        assert_eq!(n.peers().len(), 2, "{n:?}");
    }
    assert!(net
        .events
        .iter()
        .any(|(i, e)| *i == 2 && matches!(e, NodeEvent::BootstrapDone { .. })));
}

#[test]
fn rounds_converge_on_one_tip() {
    let mut net = Net::new(3);
    net.settle(2000);
    for r in 0..3 {
        net.round();
        let tip = net.nodes[0].chain().tip_hash();
        for n in &net.nodes {
            assert_eq!(n.chain().tip_hash(), tip);
            assert_eq!(n.chain().height(), r + 1);
        }
    }
    let b = net.nodes[0].chain().tip();
    assert_eq!(b.updates.len(), 3);
    assert!(b.updates.iter().all(|u| u.round == 2));
}

#[test]
fn bootstrap_times_out() {
    let mut n = Node::new(config(1, Some(9))).unwrap();
    let s = n.start(0);
    assert_eq!(s.out.0.len(), 2);
    let mut failed_at = None;
    for t in (0..5000).step_by(100) {
        let s = n.tick(t);
        if s.events.iter().any(|e| matches!(e, NodeEvent::BootstrapFailed { .. })) {
            failed_at = Some(t);
            break;
        }
    }
    assert_eq!(failed_at, Some(3500));
    assert_eq!(n.chain().height(), 0);
}

#[test]
fn invalid_bootstrap_chain_marks_peer_bad() {
    let mut n = Node::new(config(1, Some(0))).unwrap();
    let out = n.start(0).out.0;
    let (_, _, bytes) = out.iter().find(|(ch, _, _)| *ch == Channel::Sync).unwrap();
    let WireMessage::GetChain { request_id, .. } = decode_message(bytes).unwrap() else {
        panic!()
    };
    let mut other = config(0, None);
    other.model = ModelConfig::new(vec![4, 5, 3], Activation::Relu, 99).unwrap();
    let foreign = Chain::new(other.genesis());
    let data = encode_frames(foreign.blocks());
    let mut events = vec![];
    for m in chunk_snapshot(request_id, 0, &data) {
        events.extend(
            n.handle_datagram(10, Channel::Sync, addr(0, 9333), &encode_message(&m).unwrap())
                .events,
        );
    }
    assert!(events.iter().any(|e| matches!(e, NodeEvent::BootstrapFailed { .. })));
    assert_eq!(n.chain().tip_hash(), Chain::new(config(1, None).genesis()).tip_hash());
    assert!(!n.is_bootstrapping());
}

#[test]
fn unsolicited_snapshot_is_ignored() {
    let mut n = Node::new(config(0, None)).unwrap();
    let m = chunk_snapshot(77, 0, &[1, 2, 3]).remove(0);
    let s = n.handle_datagram(0, Channel::Sync, addr(5, 9333), &encode_message(&m).unwrap());
    assert!(s.out.0.is_empty() && s.events.is_empty());
}

#[test]
fn wrong_channel_and_garbage_are_reported() {
    let mut n = Node::new(config(0, None)).unwrap();
    let s = n.handle_datagram(
        0,
        Channel::Broadcast,
        addr(5, 9334),
        &encode_message(&WireMessage::GetPeers).unwrap(),
    );
    assert!(matches!(s.events[..], [NodeEvent::Malformed { .. }]));
    let s = n.handle_datagram(0, Channel::Sync, addr(5, 9333), b"hello");
    assert!(matches!(s.events[..], [NodeEvent::Malformed { .. }]));
}

#[test]
fn no_updates_means_no_block() {
    let mut c = config(0, None);
    c.roles = [Role::Miner].into();
    let mut n = Node::new(c).unwrap();
    assert!(n.begin_mining(1000).is_none());
    assert_eq!(n.run_round(1000).actions().len(), 0);
}

#[test]
fn lone_node_mines_its_own_updates() {
    let mut n = Node::new(config(0, None)).unwrap();
    for r in 0..3u64 {
        let report = n.run_round(1000 * (r + 1) * 2);
        assert!(
            report.actions().iter().any(|e| matches!(e, NodeEvent::Adopted { .. })),
            "{:?}",
            report.actions()
        );
    }
    assert_eq!(n.chain().height(), 3);
    assert_ne!(n.global_model(), &n.chain().genesis().aggregate);
}

#[test]
fn zero_participation_sits_out() {
    let mut c = config(0, None);
    c.participation_probability = 0.0;
    let mut n = Node::new(c).unwrap();
    let (job, ev) = n.begin_training();
    assert!(job.is_none());
    assert!(matches!(ev[..], [NodeEvent::NotParticipating { round: 0 }]));
}

#[test]
fn duplicate_update_gossip_is_not_relayed_twice() {
    let mut net = Net::new(2);
    let (job, _) = net.nodes[1].begin_training();
    let (u, _) = job.unwrap().run().unwrap();
    let bytes = encode_message(&WireMessage::UpdateGossip(u)).unwrap();
    let n = &mut net.nodes[0];
    let first = n.handle_datagram(0, Channel::Broadcast, addr(1, 9334), &bytes);
    assert_eq!(first.out.0.len(), 1);
    let second = n.handle_datagram(0, Channel::Broadcast, addr(1, 9334), &bytes);
    assert!(second.out.0.is_empty() && second.events.is_empty());
}

#[test]
fn restart_recovers_chain() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(0, None);
    c.chain_path = Some(dir.path().join("node.chain"));
    let mut n = Node::new(c.clone()).unwrap();
    for r in 1..=4 {
        n.run_round(r * 2000);
    }
    let tip = n.chain().tip_hash();
    drop(n);
    let n = recover(c, None).unwrap();
    assert_eq!(n.chain().tip_hash(), tip);
    assert_eq!(n.recovery().unwrap().blocks_read, 5);
}

#[test]
fn keys_are_deterministic() {
    assert_eq!(NodeKey::from_seed(3).address(), NodeKey::from_seed(3).address());
    assert_ne!(NodeKey::from_seed(3).address(), NodeKey::from_seed(4).address());
}

#[test]
fn dataset_rows_never_leave_the_node() {
    let mut net = Net::new(2);
    net.round();
    let data = net.nodes[1].config().data.load().unwrap();
    let (job, _) = net.nodes[1].begin_training();
    let (u, _) = job.unwrap().run().unwrap();
    assert!(!leaks_dataset(
        &encode_message(&WireMessage::UpdateGossip(u)).unwrap(),
        &data
    ));
    let mut raw = vec![0u8; 3];
    for v in data.row(5) {
        raw.extend(v.to_le_bytes());
    }
    assert!(leaks_dataset(&raw, &data));
}
