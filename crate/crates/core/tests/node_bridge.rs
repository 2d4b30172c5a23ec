//! A node whose training step is served by an out-of-process-style trainer
//! over the loopback bridge.

use std::sync::{Arc, Mutex};
use std::thread;

use fedchain::bridge::{reference_handler, run_trainer, BridgeResponse, BridgeServer};
use fedchain::chain::{Chain, CompactTarget};
use fedchain::node::{DataSource, Node, NodeConfig, NodeEvent, TrainerBackend};
use fedchain::{BlobSpec, ModelUpdate, ParameterVector};

fn config(lr: f64) -> NodeConfig {
    let mut c = NodeConfig::defaults();
    c.initial_target = CompactTarget::new(0x2100_ffff).unwrap();
    c.train.learning_rate = lr;
    c.data = DataSource::Synthetic {
        blobs: BlobSpec {
            samples: 120,
            ..BlobSpec::default()
        },
        shard: 0,
        shards: 1,
    };
    c
}

fn bridged_node(c: &NodeConfig, dir: &std::path::Path) -> (Node, std::net::SocketAddr) {
    let data_ref = dir.join("data.csv");
    c.data.load().unwrap().write_csv(&data_ref).unwrap();
    let server = BridgeServer::bind("127.0.0.1:0".parse().unwrap()).unwrap();
    let addr = server.local_addr().unwrap();
    let mut node = Node::new(c.clone()).unwrap();
    node.set_backend(TrainerBackend::Bridge {
        server: Arc::new(Mutex::new(server)),
        data_ref,
    });
    (node, addr)
}

fn vias(events: &[NodeEvent]) -> Vec<String> {
    events
        .iter()
        .filter_map(|e| match e {
            NodeEvent::Trained { via, .. } => Some(via.clone()),
            _ => None,
        })
        .collect()
}

#[test]
fn three_rounds_through_reference_trainer() {
    let dir = tempfile::tempdir().unwrap();
    let c = config(0.05);
    let (mut node, addr) = bridged_node(&c, dir.path());
    let trainer = thread::spawn(move || run_trainer(addr, Some(3), reference_handler).unwrap());
    let mut local = Node::new(c.clone()).unwrap();
    for r in 1..=3 {
        let report = node.run_round(r * 2000);
        assert_eq!(vias(report.actions()), vec!["bridge"]);
        local.run_round(r * 2000);
    }
    assert_eq!(trainer.join().unwrap(), 3);
    assert_eq!(node.chain().height(), 3);
    // Same mechanics as the built-in path, so the chains coincide.
    assert_eq!(node.chain().tip_hash(), local.chain().tip_hash());
    let revalidated = Chain::from_blocks(c.genesis(), node.chain().blocks().cloned().collect()).unwrap();
    assert_eq!(revalidated.tip_hash(), node.chain().tip_hash());
}

#[test]
fn zero_learning_rate_keeps_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let c = config(0.0);
    let (mut node, addr) = bridged_node(&c, dir.path());
    let trainer = thread::spawn(move || run_trainer(addr, Some(3), reference_handler).unwrap());
    let genesis = node.global_model().clone();
    for r in 1..=3 {
        node.run_round(r * 2000);
    }
    trainer.join().unwrap();
    let end = node.global_model();
    assert_eq!(node.chain().height(), 3);
    let drift = genesis
        .as_slice()
        .iter()
        .zip(end.as_slice())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(drift <= 1e-6, "{drift}");
}

#[test]
fn misbehaving_trainer_cannot_reach_the_chain() {
    let dir = tempfile::tempdir().unwrap();
    let c = config(0.05);
    let (mut node, addr) = bridged_node(&c, dir.path());
    let trainer = thread::spawn(move || {
        run_trainer(addr, Some(2), |req| {
            let n = req.start_params.dim();
            let junk = ParameterVector::new(vec![1e300; n]).unwrap();
            // Right shape, wrong sample count.
            BridgeResponse::ok(req.job_id, ModelUpdate::new(Default::default(), 7, junk, 0).unwrap()).to_bytes()
        })
        .unwrap()
    });
    let mut local = Node::new(c).unwrap();
    for r in 1..=2 {
        let report = node.run_round(r * 2000);
        assert!(vias(report.actions())[0].starts_with("local after bridge failure"));
        local.run_round(r * 2000);
    }
    trainer.join().unwrap();
    assert_eq!(node.chain().tip_hash(), local.chain().tip_hash());
}
