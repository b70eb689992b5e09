use std::io::ErrorKind;
use std::net::{Shutdown, TcpStream};
use std::thread;
use std::time::Duration;

use super::wire::{read_message, write_message, Message};
use super::NetError;
use crate::data::Dataset;
use crate::fl::{local_train_at, ClientState};
use crate::nn::ArchDescriptor;
use crate::seed;

#[derive(Debug, Clone)]
pub struct JoinOptions {
    /// Reconnect attempts after the first failed one.
    pub retries: usize,
    pub backoff: Duration,
}

impl Default for JoinOptions {
    fn default() -> Self {
        JoinOptions {
            retries: 3,
            backoff: Duration::from_secs(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JoinReport {
    pub client_id: String,
    pub rounds: usize,
    /// Final local training loss per round.
    pub losses: Vec<f32>,
    /// Frame bytes written, headers included.
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

fn retryable(e: &std::io::Error) -> bool {
    matches!(
        e.kind(),
        ErrorKind::ConnectionRefused
            | ErrorKind::ConnectionReset
            | ErrorKind::ConnectionAborted
            | ErrorKind::TimedOut
    )
}

fn connect(addr: &str, opts: &JoinOptions) -> Result<TcpStream, NetError> {
    let mut attempt = 0;
    loop {
        attempt += 1;
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(e) if retryable(&e) && attempt <= opts.retries => thread::sleep(opts.backoff),
            Err(source) => {
                return Err(NetError::Connect {
                    addr: addr.to_string(),
                    attempts: attempt,
                    source,
                })
            }
        }
    }
}

/// [`join_with`] default options: 3 retries, 1 s apart.
pub fn join(
    addr: &str,
    client_id: &str,
    dataset: &Dataset,
    arch: &ArchDescriptor,
) -> Result<JoinReport, NetError> {
    join_with(addr, client_id, dataset, arch, &JoinOptions::default())
}

/// Joins a run as `client_id`, trains on every global model received and
/// returns on Shutdown. Only parameters ever leave the process.
pub fn join_with(
    addr: &str,
    client_id: &str,
    dataset: &Dataset,
    arch: &ArchDescriptor,
    opts: &JoinOptions,
) -> Result<JoinReport, NetError> {
    if dataset.is_empty() {
        return Err(NetError::Protocol("dataset is empty".into()));
    }
    let item_len = arch.input.len();
    if dataset.items().iter().any(|it| it.pixels.len() != item_len) {
        return Err(NetError::Protocol(
            "dataset images do not match the architecture input".into(),
        ));
    }
    let mut stream = connect(addr, opts)?;
    let _ = stream.set_nodelay(true);
    let mut report = JoinReport {
        client_id: client_id.to_string(),
        rounds: 0,
        losses: Vec::new(),
        bytes_sent: 0,
        bytes_received: 0,
    };
    let result = converse(&mut stream, client_id, dataset, arch, &mut report);
    let _ = stream.shutdown(Shutdown::Both);
    result.map(|()| report)
}

fn converse(
    stream: &mut TcpStream,
    client_id: &str,
    dataset: &Dataset,
    arch: &ArchDescriptor,
    report: &mut JoinReport,
) -> Result<(), NetError> {
    let hello = Message::JoinRequest {
        client_id: client_id.to_string(),
        sample_count: dataset.len() as u64,
        arch_checksum: arch.checksum(),
    };
    report.bytes_sent += write_message(stream, &hello)? as u64;
    let (msg, n) = read_message(stream)?;
    report.bytes_received += n as u64;
    let cfg = match msg {
        Message::JoinAccept {
            config,
            seed_stream,
        } => {
            if seed_stream != seed::fnv1a(client_id.as_bytes()) {
                return Err(NetError::Protocol(format!(
                    "unexpected seed stream {seed_stream:#018x}"
                )));
            }
            config
        }
        Message::Error { code, text } => return Err(NetError::Rejected { code, text }),
        other => {
            return Err(NetError::Protocol(format!(
                "expected JoinAccept, got {}",
                other.name()
            )))
        }
    };
    let client = ClientState { client_id, dataset };
    let mut last_round = None;
    loop {
        let (msg, n) = read_message(stream)?;
        report.bytes_received += n as u64;
        match msg {
            Message::GlobalModel { round, params } => {
                if last_round.is_some_and(|r| round <= r) {
                    return Err(NetError::Protocol(format!(
                        "round {round} after round {}",
                        last_round.unwrap()
                    )));
                }
                if params.arch() != arch {
                    return Err(NetError::Protocol(
                        "global model has a different architecture".into(),
                    ));
                }
                last_round = Some(round);
                let (params, count, loss) = local_train_at(&params, client, &cfg, round as usize)?;
                let update = Message::LocalUpdate {
                    round,
                    client_id: client_id.to_string(),
                    sample_count: count as u64,
                    params,
                    loss,
                };
                report.bytes_sent += write_message(stream, &update)? as u64;
                report.losses.push(loss);
                report.rounds += 1;
            }
            Message::RoundComplete { round } => {
                if Some(round) != last_round {
                    return Err(NetError::Protocol(format!(
                        "RoundComplete for round {round} out of order"
                    )));
                }
            }
            Message::Shutdown => return Ok(()),
            Message::Error { code, text } => return Err(NetError::Rejected { code, text }),
            other => {
                return Err(NetError::Protocol(format!(
                    "unexpected {} from server",
                    other.name()
                )))
            }
        }
    }
}
