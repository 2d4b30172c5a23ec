//! Two nodes on real loopback sockets.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use fedchain::chain::CompactTarget;
use fedchain::node::{DataSource, NodeConfig};
use fedchain::runtime::run_node;
use fedchain::BlobSpec;

fn config(i: u16, base: u16) -> NodeConfig {
    let mut c = NodeConfig::defaults();
    c.seed = i as u64;
    c.initial_target = CompactTarget::new(0x2100_ffff).unwrap();
    c.desired_block_interval = 1;
    c.sync = ([127, 0, 0, 1], base + 2 * i).into();
    c.broadcast = ([127, 0, 0, 1], base + 2 * i + 1).into();
    c.bootstrap = (i > 0).then(|| ([127, 0, 0, 1], base).into());
    c.data = DataSource::Synthetic {
        blobs: BlobSpec {
            samples: 200,
            ..BlobSpec::default()
        },
        shard: i as usize,
        shards: 2,
    };
    c
}

#[test]
fn joiner_follows_the_seed_node() {
    let base = 26000 + (std::process::id() % 1000) as u16 * 4;
    let stop = Arc::new(AtomicBool::new(false));
    let s = stop.clone();
    let seed = thread::spawn(move || run_node(config(0, base), s, None).unwrap());
    thread::sleep(Duration::from_millis(200));
    let joined = run_node(config(1, base), Arc::new(AtomicBool::new(false)), Some(4)).unwrap();
    // Give the seed a moment to hear the joiner's last block.
    thread::sleep(Duration::from_millis(1500));
    stop.store(true, Ordering::Relaxed);
    let seeded = seed.join().unwrap();
    assert!(joined.height >= 4);
    assert!(
        seeded.height >= joined.height,
        "seed {} joiner {}",
        seeded.height,
        joined.height
    );
}
