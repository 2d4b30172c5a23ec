//! Real transport: one UDP socket per channel, each drained by its own thread
//! into a shared queue.

use std::io;
use std::net::{SocketAddr, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::Sender;
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::{debug, warn};

use super::{Channel, Transport, MAX_DATAGRAM};

const POLL: Duration = Duration::from_millis(100);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Received {
    pub channel: Channel,
    pub from: SocketAddr,
    pub bytes: Vec<u8>,
}

#[derive(Debug)]
pub struct UdpTransport {
    sync: UdpSocket,
    broadcast: UdpSocket,
}

impl UdpTransport {
    pub fn bind(sync: SocketAddr, broadcast: SocketAddr) -> io::Result<Self> {
        Ok(UdpTransport {
            sync: UdpSocket::bind(sync)?,
            broadcast: UdpSocket::bind(broadcast)?,
        })
    }

    pub fn local_addrs(&self) -> io::Result<(SocketAddr, SocketAddr)> {
        Ok((self.sync.local_addr()?, self.broadcast.local_addr()?))
    }

    /// Starts one receive loop per channel; both exit once `stop` is set.
    pub fn spawn_receivers(&self, tx: Sender<Received>, stop: Arc<AtomicBool>) -> io::Result<Vec<JoinHandle<()>>> {
        let mut handles = Vec::new();
        for (channel, socket) in [(Channel::Sync, &self.sync), (Channel::Broadcast, &self.broadcast)] {
            let socket = socket.try_clone()?;
            socket.set_read_timeout(Some(POLL))?;
            let tx = tx.clone();
            let stop = Arc::clone(&stop);
            let h = thread::Builder::new()
                .name(format!("recv-{channel}"))
                .spawn(move || receive_loop(channel, socket, tx, stop))?;
            handles.push(h);
        }
        Ok(handles)
    }
}

fn receive_loop(channel: Channel, socket: UdpSocket, tx: Sender<Received>, stop: Arc<AtomicBool>) {
    let mut buf = vec![0u8; MAX_DATAGRAM + 1];
    while !stop.load(Ordering::Relaxed) {
        match socket.recv_from(&mut buf) {
            Ok((n, from)) => {
                if n > MAX_DATAGRAM {
                    debug!("{channel}: oversize datagram from {from} ignored");
                    continue;
                }
                let msg = Received {
                    channel,
                    from,
                    bytes: buf[..n].to_vec(),
                };
                if tx.send(msg).is_err() {
                    return;
                }
            }
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
            Err(e) => {
                warn!("{channel}: receive failed: {e}");
                thread::sleep(POLL);
            }
        }
    }
}

impl Transport for UdpTransport {
    fn send(&mut self, channel: Channel, to: SocketAddr, datagram: Vec<u8>) -> io::Result<()> {
        let socket = match channel {
            Channel::Sync => &self.sync,
            Channel::Broadcast => &self.broadcast,
        };
        socket.send_to(&datagram, to).map(|_| ())
    }
}
