//! TCP front end for the offload engine.
//!
//! One listener serves both roles of the target: the block-volume service
//! (HELLO/IO_READ/IO_WRITE) and the offload service (OFFLOAD_SUBMIT, token
//! traffic, cache invalidation). Connections are handled by one thread
//! each; a connection binds to a volume at HELLO time and may then mix
//! block I/O with offload traffic.

use std::collections::HashMap;
use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crate::proto;
use crate::volume::{BlockAddr, BlockStore};
use crate::wire::{self, msg, FramedStream};

use super::OffloadEngine;

/// A volume exported by name over the wire.
#[derive(Clone)]
pub struct ServedVolume {
    pub name: String,
    pub volume_id: u64,
    pub store: Arc<dyn BlockStore>,
}

pub struct EngineServer {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    accept_thread: Option<JoinHandle<()>>,
}

impl EngineServer {
    /// Binds `bind` (e.g. `"127.0.0.1:0"`), registers every served volume
    /// with the engine, and starts accepting connections.
    pub fn start(
        engine: Arc<OffloadEngine>,
        bind: &str,
        volumes: Vec<ServedVolume>,
    ) -> io::Result<Self> {
        let listener = TcpListener::bind(bind)?;
        let addr = listener.local_addr()?;
        let mut by_name = HashMap::new();
        for v in volumes {
            engine.register_volume(v.volume_id, Arc::clone(&v.store));
            by_name.insert(v.name.clone(), v);
        }
        let by_name = Arc::new(by_name);
        let shutdown = Arc::new(AtomicBool::new(false));

        let stop = Arc::clone(&shutdown);
        let accept_thread = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let engine = Arc::clone(&engine);
                let by_name = Arc::clone(&by_name);
                let stop = Arc::clone(&stop);
                std::thread::spawn(move || {
                    let _ = handle_conn(engine, by_name, stop, stream);
                });
            }
        });

        Ok(Self {
            addr,
            shutdown,
            accept_thread: Some(accept_thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting and unblocks the accept loop. Connection threads
    /// exit when their client disconnects or at their next idle check.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        // Nudge the accept loop out of its blocking accept.
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for EngineServer {
    fn drop(&mut self) {
        if self.accept_thread.is_some() {
            self.stop();
        }
    }
}

fn handle_conn(
    engine: Arc<OffloadEngine>,
    by_name: Arc<HashMap<String, ServedVolume>>,
    stop: Arc<AtomicBool>,
    stream: TcpStream,
) -> io::Result<()> {
    stream.set_nodelay(true).ok();
    // Idle reads wake periodically so the thread notices shutdown.
    stream.set_read_timeout(Some(Duration::from_millis(100)))?;
    let mut conn = FramedStream::new(stream);
    let mut bound: Option<ServedVolume> = None;

    loop {
        let frame = match conn.recv() {
            Ok(f) => f,
            Err(e)
                if e.kind() == io::ErrorKind::WouldBlock
                    || e.kind() == io::ErrorKind::TimedOut =>
            {
                if stop.load(Ordering::SeqCst) {
                    return Ok(());
                }
                continue;
            }
            Err(_) => return Ok(()), // client gone
        };
        match frame.msg_type {
            msg::HELLO => {
                let p = &frame.payload;
                if p.len() < 6 {
                    conn.send(msg::ERR, b"malformed HELLO")?;
                    continue;
                }
                let theirs = u32::from_le_bytes(p[0..4].try_into().unwrap());
                if theirs != wire::PROTOCOL_VERSION {
                    // Reply with our version so the client can report the
                    // mismatch precisely.
                    let mut resp = Vec::with_capacity(24);
                    resp.extend_from_slice(&wire::PROTOCOL_VERSION.to_le_bytes());
                    resp.extend_from_slice(&[0u8; 20]);
                    conn.send(msg::HELLO_RESP, &resp)?;
                    continue;
                }
                let name_len = u16::from_le_bytes(p[4..6].try_into().unwrap()) as usize;
                if p.len() != 6 + name_len {
                    conn.send(msg::ERR, b"malformed HELLO")?;
                    continue;
                }
                let name = String::from_utf8_lossy(&p[6..]).into_owned();
                let Some(v) = by_name.get(&name) else {
                    conn.send(msg::ERR, format!("no such volume {:?}", name).as_bytes())?;
                    continue;
                };
                let geom = v.store.geometry();
                let mut resp = Vec::with_capacity(24);
                resp.extend_from_slice(&wire::PROTOCOL_VERSION.to_le_bytes());
                resp.extend_from_slice(&v.volume_id.to_le_bytes());
                resp.extend_from_slice(&geom.block_size.to_le_bytes());
                resp.extend_from_slice(&geom.block_count.to_le_bytes());
                conn.send(msg::HELLO_RESP, &resp)?;
                bound = Some(v.clone());
            }
            msg::IO_READ => {
                let Some(v) = &bound else {
                    conn.send(msg::ERR, b"no volume bound; HELLO first")?;
                    continue;
                };
                match wire::decode_io_read(&frame.payload)
                    .map_err(|e| e.to_string())
                    .and_then(|(addr, count)| {
                        v.store
                            .read_blocks(BlockAddr(addr), count as u64)
                            .map_err(|e| e.to_string())
                    }) {
                    Ok(data) => conn.send(msg::IO_READ_RESP, &data)?,
                    Err(e) => conn.send(msg::ERR, e.as_bytes())?,
                }
            }
            msg::IO_WRITE => {
                let Some(v) = &bound else {
                    conn.send(msg::ERR, b"no volume bound; HELLO first")?;
                    continue;
                };
                match wire::decode_io_write(&frame.payload)
                    .map_err(|e| e.to_string())
                    .and_then(|(addr, _count, data)| {
                        v.store
                            .write_blocks(BlockAddr(addr), data)
                            .map_err(|e| e.to_string())
                    }) {
                    Ok(()) => conn.send(msg::IO_WRITE_ACK, &[])?,
                    Err(e) => conn.send(msg::ERR, e.as_bytes())?,
                }
            }
            msg::OFFLOAD_SUBMIT => match proto::decode_offload_submit(&frame.payload) {
                Ok(req) => {
                    let resp = engine.submit(req);
                    conn.send(msg::OFFLOAD_RESULT, &proto::encode_offload_result(&resp))?;
                }
                Err(e) => conn.send(msg::ERR, e.to_string().as_bytes())?,
            },
            msg::TOKEN_ACQUIRE => match proto::decode_token_acquire(&frame.payload) {
                Ok(initiator) => {
                    let (id, ttl_ms) = match engine.acquire_token(&initiator) {
                        Some(g) => (g.token_id, engine
                            .token_scheduler()
                            .map(|t| t.ttl().as_millis() as u64)
                            .unwrap_or(0)),
                        None => (0, 0),
                    };
                    conn.send(msg::TOKEN_GRANT, &proto::encode_token_grant(id, ttl_ms))?;
                }
                Err(e) => conn.send(msg::ERR, e.to_string().as_bytes())?,
            },
            msg::TOKEN_RETURN => match proto::decode_token_return(&frame.payload) {
                Ok(id) => {
                    engine.return_token(id);
                    conn.send(msg::OK, &[])?;
                }
                Err(e) => conn.send(msg::ERR, e.to_string().as_bytes())?,
            },
            msg::CACHE_INVAL => match proto::decode_cache_inval(&frame.payload) {
                Ok((volume_id, addrs)) => {
                    engine.invalidate_blocks(volume_id, &addrs);
                    conn.send(msg::OK, &[])?;
                }
                Err(e) => conn.send(msg::ERR, e.to_string().as_bytes())?,
            },
            t => {
                conn.send(msg::ERR, format!("unsupported message type {}", t).as_bytes())?;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{AdmissionPolicy, EngineConfig};
    use crate::volume::{MemVolume, RemoteVolume, VolumeGeometry};

    fn served_mem(blocks: u64) -> ServedVolume {
        ServedVolume {
            name: "vol0".into(),
            volume_id: 900,
            store: Arc::new(MemVolume::new(VolumeGeometry::new(512, blocks).unwrap()))
                as Arc<dyn BlockStore>,
        }
    }

    fn start_server(policy: AdmissionPolicy) -> (Arc<OffloadEngine>, EngineServer) {
        let engine = OffloadEngine::new(EngineConfig {
            policy,
            ..Default::default()
        });
        let server = EngineServer::start(Arc::clone(&engine), "127.0.0.1:0", vec![served_mem(64)])
            .unwrap();
        (engine, server)
    }

    #[test]
    fn remote_volume_io_roundtrip() {
        let (_engine, server) = start_server(AdmissionPolicy::AcceptAll);
        let addr = server.addr().to_string();
        let vol = RemoteVolume::connect(&addr, "vol0").unwrap();
        assert_eq!(vol.volume_id(), 900);
        assert_eq!(vol.geometry().block_size, 512);
        vol.write_blocks(BlockAddr(3), &[0x5a; 1024]).unwrap();
        assert_eq!(vol.read_blocks(BlockAddr(4), 1).unwrap(), vec![0x5a; 512]);
        // Out-of-range requests are rejected locally, not remotely.
        let tx_before = vol.stats().tx_bytes();
        assert!(vol.read_blocks(BlockAddr(64), 1).is_err());
        assert_eq!(vol.stats().tx_bytes(), tx_before);
        server.shutdown();
    }

    #[test]
    fn unknown_volume_name_errors() {
        let (_engine, server) = start_server(AdmissionPolicy::AcceptAll);
        let addr = server.addr().to_string();
        let err = match RemoteVolume::connect(&addr, "nope") {
            Err(e) => e,
            Ok(_) => panic!("connect to unknown volume must fail"),
        };
        assert!(err.to_string().contains("no such volume"));
        server.shutdown();
    }

    #[test]
    fn byte_accounting_matches_frame_arithmetic() {
        let (_engine, server) = start_server(AdmissionPolicy::AcceptAll);
        let addr = server.addr().to_string();
        let vol = RemoteVolume::connect(&addr, "vol0").unwrap();
        let stats = vol.stats();
        let (tx0, rx0) = (stats.tx_bytes(), stats.rx_bytes());
        vol.write_blocks(BlockAddr(0), &[1u8; 512]).unwrap();
        assert_eq!(stats.tx_bytes() - tx0, wire::io_write_frame_len(512));
        assert_eq!(stats.rx_bytes() - rx0, wire::io_write_ack_frame_len());
        let (tx1, rx1) = (stats.tx_bytes(), stats.rx_bytes());
        vol.read_blocks(BlockAddr(0), 2).unwrap();
        assert_eq!(stats.tx_bytes() - tx1, wire::io_read_frame_len());
        assert_eq!(stats.rx_bytes() - rx1, wire::io_read_resp_frame_len(1024));
        server.shutdown();
    }
}
