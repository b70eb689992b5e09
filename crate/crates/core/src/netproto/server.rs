use std::collections::HashSet;
use std::io::Write;
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use super::wire::{code, read_message, write_message, Message, WireError};
use super::NetError;
use crate::fl::{fedavg_with, initial_model, ClientReport, RoundConfig, RoundReport};
use crate::nn::{ArchDescriptor, ModelParams};
use crate::seed;

const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);

/// Bytes one connection moved over the whole run, frames included.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientTraffic {
    pub client_id: String,
    pub sample_count: usize,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

#[derive(Debug)]
pub struct ServeOutcome {
    pub model: ModelParams,
    /// `bytes_transferred` is measured on the sockets.
    pub reports: Vec<RoundReport>,
    /// Sorted by client id. Sent and received are from the client's side.
    pub traffic: Vec<ClientTraffic>,
}

enum Event {
    Joined {
        client_id: String,
        sample_count: usize,
        stream: TcpStream,
        bytes_in: usize,
        bytes_out: usize,
    },
    Frame {
        slot: usize,
        msg: Message,
        bytes: usize,
    },
    Gone {
        slot: usize,
        err: WireError,
    },
}

struct Peer {
    client_id: String,
    sample_count: usize,
    stream: TcpStream,
    /// From the server's view.
    sent: u64,
    received: u64,
}

/// Binds `addr` and runs [`serve_on`].
pub fn serve<A: ToSocketAddrs>(
    addr: A,
    expected_clients: usize,
    cfg: &RoundConfig,
    arch: &ArchDescriptor,
) -> Result<ServeOutcome, NetError> {
    serve_on(TcpListener::bind(addr)?, expected_clients, cfg, arch)
}

fn reject(stream: &mut TcpStream, code: u16, text: String) {
    let _ = write_message(stream, &Message::Error { code, text });
    let _ = stream.shutdown(Shutdown::Both);
}

/// Handshakes every incoming connection until stopped. Joins are numbered in
/// arrival order; later joins, duplicate ids and arch mismatches get an
/// Error frame and are closed without touching the run.
fn acceptor(
    listener: TcpListener,
    expected: usize,
    arch_checksum: u64,
    cfg: RoundConfig,
    stop: Arc<AtomicBool>,
    tx: Sender<Event>,
) {
    let mut ids = HashSet::new();
    for conn in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let Ok(mut stream) = conn else { continue };
        let _ = stream.set_nodelay(true);
        let _ = stream.set_read_timeout(Some(HANDSHAKE_TIMEOUT));
        let (client_id, sample_count, bytes_in) = match read_message(&mut stream) {
            Ok((
                Message::JoinRequest {
                    client_id,
                    sample_count,
                    arch_checksum: theirs,
                },
                n,
            )) => {
                if ids.len() >= expected {
                    reject(
                        &mut stream,
                        code::RUN_FULL,
                        format!("run already has {expected} clients"),
                    );
                    continue;
                }
                if ids.contains(&client_id) {
                    reject(
                        &mut stream,
                        code::DUPLICATE_ID,
                        format!("client id {client_id:?} already joined"),
                    );
                    continue;
                }
                if theirs != arch_checksum {
                    reject(
                        &mut stream,
                        code::ARCH_MISMATCH,
                        format!("arch checksum {theirs:#018x}, server runs {arch_checksum:#018x}"),
                    );
                    continue;
                }
                if sample_count == 0 || client_id.is_empty() {
                    reject(
                        &mut stream,
                        code::BAD_REQUEST,
                        "empty client id or dataset".into(),
                    );
                    continue;
                }
                (client_id, sample_count as usize, n)
            }
            Ok((other, _)) => {
                reject(
                    &mut stream,
                    code::BAD_REQUEST,
                    format!("expected JoinRequest, got {}", other.name()),
                );
                continue;
            }
            Err(_) => {
                let _ = stream.shutdown(Shutdown::Both);
                continue;
            }
        };
        let accept = Message::JoinAccept {
            config: cfg.clone(),
            seed_stream: seed::fnv1a(client_id.as_bytes()),
        };
        let Ok(bytes_out) = write_message(&mut stream, &accept) else {
            continue;
        };
        let _ = stream.set_read_timeout(None);
        ids.insert(client_id.clone());
        let joined = Event::Joined {
            client_id,
            sample_count,
            stream,
            bytes_in,
            bytes_out,
        };
        if tx.send(joined).is_err() {
            break;
        }
    }
}

fn reader(slot: usize, mut stream: TcpStream, tx: Sender<Event>) {
    loop {
        let ev = match read_message(&mut stream) {
            Ok((msg, bytes)) => Event::Frame { slot, msg, bytes },
            Err(err) => {
                let _ = tx.send(Event::Gone { slot, err });
                return;
            }
        };
        if tx.send(ev).is_err() {
            return;
        }
    }
}

struct Run {
    peers: Vec<Peer>,
    rx: Receiver<Event>,
    tx: Sender<Event>,
    reports: Vec<RoundReport>,
    readers: Vec<thread::JoinHandle<()>>,
}

impl Run {
    fn abort(&mut self, round: usize, reason: String) -> NetError {
        for p in &mut self.peers {
            let text = reason.clone();
            let _ = write_message(
                &mut p.stream,
                &Message::Error {
                    code: code::ABORTED,
                    text,
                },
            );
            let _ = p.stream.shutdown(Shutdown::Both);
        }
        NetError::Aborted {
            round,
            reason,
            partial: std::mem::take(&mut self.reports),
        }
    }

    /// Blocks until K clients joined.
    fn gather(&mut self, expected: usize) -> Result<(), NetError> {
        while self.peers.len() < expected {
            match self.rx.recv() {
                Ok(Event::Joined {
                    client_id,
                    sample_count,
                    stream,
                    bytes_in,
                    bytes_out,
                }) => {
                    let slot = self.peers.len();
                    let read_half = stream.try_clone()?;
                    let tx = self.tx.clone();
                    self.readers
                        .push(thread::spawn(move || reader(slot, read_half, tx)));
                    self.peers.push(Peer {
                        client_id,
                        sample_count,
                        stream,
                        sent: bytes_out as u64,
                        received: bytes_in as u64,
                    });
                }
                Ok(Event::Gone { slot, err }) => {
                    let id = self.peers[slot].client_id.clone();
                    return Err(
                        self.abort(0, format!("client {id} left before the run started: {err}"))
                    );
                }
                Ok(Event::Frame { slot, msg, .. }) => {
                    let id = self.peers[slot].client_id.clone();
                    return Err(self.abort(
                        0,
                        format!("client {id} sent {} before the run started", msg.name()),
                    ));
                }
                Err(_) => return Err(NetError::Protocol("acceptor stopped".into())),
            }
        }
        Ok(())
    }

    fn send_all(&mut self, round: usize, msg: &Message) -> Result<u64, NetError> {
        let mut total = 0;
        for i in 0..self.peers.len() {
            match write_message(&mut self.peers[i].stream, msg) {
                Ok(n) => {
                    self.peers[i].sent += n as u64;
                    total += n as u64;
                }
                Err(e) => {
                    let id = self.peers[i].client_id.clone();
                    return Err(self.abort(round, format!("sending {} to {id}: {e}", msg.name())));
                }
            }
        }
        Ok(total)
    }

    /// Collects one LocalUpdate per peer for `round`, indexed by slot.
    fn collect(
        &mut self,
        round: usize,
        arch: &ArchDescriptor,
    ) -> Result<(Vec<(ModelParams, f32)>, u64), NetError> {
        let mut got: Vec<Option<(ModelParams, f32)>> = vec![None; self.peers.len()];
        let mut bytes_in = 0;
        while got.iter().any(Option::is_none) {
            let ev = match self.rx.recv() {
                Ok(ev) => ev,
                Err(_) => return Err(self.abort(round, "event channel closed".into())),
            };
            match ev {
                Event::Frame {
                    slot,
                    msg:
                        Message::LocalUpdate {
                            round: r,
                            client_id,
                            sample_count,
                            params,
                            loss,
                        },
                    bytes,
                } => {
                    let peer = &mut self.peers[slot];
                    peer.received += bytes as u64;
                    bytes_in += bytes as u64;
                    let problem = if r as usize != round {
                        Some(format!("update for round {r}"))
                    } else if client_id != peer.client_id
                        || sample_count as usize != peer.sample_count
                    {
                        Some(format!("update claims {client_id}/{sample_count}"))
                    } else if params.arch() != arch {
                        Some("update has a different architecture".to_string())
                    } else if got[slot].is_some() {
                        Some("second update in one round".to_string())
                    } else {
                        None
                    };
                    if let Some(p) = problem {
                        let id = peer.client_id.clone();
                        return Err(self.abort(round, format!("client {id}: {p}")));
                    }
                    got[slot] = Some((params, loss));
                }
                Event::Frame { slot, msg, .. } => {
                    let id = self.peers[slot].client_id.clone();
                    return Err(
                        self.abort(round, format!("client {id} sent unexpected {}", msg.name()))
                    );
                }
                Event::Gone { slot, err } => {
                    let id = self.peers[slot].client_id.clone();
                    return Err(self.abort(round, format!("client {id} disconnected: {err}")));
                }
                Event::Joined { mut stream, .. } => {
                    reject(&mut stream, code::RUN_FULL, "run in progress".into());
                }
            }
        }
        Ok((
            got.into_iter().map(|g| g.expect("all collected")).collect(),
            bytes_in,
        ))
    }
}

/// Serves one run on an already bound listener: waits for
/// `expected_clients` distinct joins, then runs `cfg.rounds` rounds with a
/// barrier on all updates per round. The final model is bit-identical to
/// [`crate::fl::run_federated`] over the same datasets.
pub fn serve_on(
    listener: TcpListener,
    expected_clients: usize,
    cfg: &RoundConfig,
    arch: &ArchDescriptor,
) -> Result<ServeOutcome, NetError> {
    if expected_clients == 0 {
        return Err(NetError::Protocol(
            "expected_clients must be at least 1".into(),
        ));
    }
    cfg.validate()?;
    let global = initial_model(arch, cfg)?;
    let wake = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let (tx, rx) = mpsc::channel();
    let acceptor_handle = {
        let (stop, tx, cfg) = (stop.clone(), tx.clone(), cfg.clone());
        let sum = arch.checksum();
        thread::spawn(move || acceptor(listener, expected_clients, sum, cfg, stop, tx))
    };
    let mut run = Run {
        peers: Vec::with_capacity(expected_clients),
        rx,
        tx,
        reports: Vec::with_capacity(cfg.rounds),
        readers: Vec::new(),
    };
    let result = drive(&mut run, global, expected_clients, cfg, arch);

    stop.store(true, Ordering::SeqCst);
    let _ = TcpStream::connect(wake);
    let _ = acceptor_handle.join();
    for p in &run.peers {
        let _ = p.stream.shutdown(Shutdown::Both);
    }
    drop(run.tx);
    for h in run.readers.drain(..) {
        let _ = h.join();
    }
    let model = result?;

    let mut traffic: Vec<ClientTraffic> = run
        .peers
        .iter()
        .map(|p| ClientTraffic {
            client_id: p.client_id.clone(),
            sample_count: p.sample_count,
            bytes_sent: p.received,
            bytes_received: p.sent,
        })
        .collect();
    traffic.sort_by(|a, b| a.client_id.cmp(&b.client_id));
    Ok(ServeOutcome {
        model,
        reports: run.reports,
        traffic,
    })
}

/// Owns the global model so that at most K+1 parameter vectors are alive:
/// the broadcast copy is dropped before updates arrive.
fn drive(
    run: &mut Run,
    mut global: ModelParams,
    expected: usize,
    cfg: &RoundConfig,
    arch: &ArchDescriptor,
) -> Result<ModelParams, NetError> {
    run.gather(expected)?;
    for round in 0..cfg.rounds {
        let start = Instant::now();
        let r = round as u32;
        let down = run.send_all(
            round,
            &Message::GlobalModel {
                round: r,
                params: global,
            },
        )?;
        let (updates, up) = run.collect(round, arch)?;
        let refs: Vec<(&ModelParams, usize)> = updates
            .iter()
            .zip(&run.peers)
            .map(|((p, _), peer)| (p, peer.sample_count))
            .collect();
        global = fedavg_with(&refs, cfg.weighting)?;
        let done = run.send_all(round, &Message::RoundComplete { round: r })?;
        let mut clients: Vec<ClientReport> = run
            .peers
            .iter()
            .zip(&updates)
            .map(|(p, (_, loss))| ClientReport {
                client_id: p.client_id.clone(),
                sample_count: p.sample_count,
                loss: *loss,
            })
            .collect();
        clients.sort_by(|a, b| a.client_id.cmp(&b.client_id));
        run.reports.push(RoundReport {
            round,
            clients,
            global_checksum: global.checksum(),
            wall_time: start.elapsed(),
            bytes_transferred: down + up + done,
        });
    }
    run.send_all(cfg.rounds, &Message::Shutdown)?;
    for p in &mut run.peers {
        let _ = p.stream.flush();
    }
    Ok(global)
}
