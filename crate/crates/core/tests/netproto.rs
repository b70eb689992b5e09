use std::io::Write;
use std::net::{TcpListener, TcpStream};
use std::thread;
use std::time::Duration;

use fedroam::data::{env, generate_dataset, Dataset};
use fedroam::fl::{local_train_at, run_federated, ClientState, RoundConfig, Weighting};
use fedroam::netproto::wire::{code, read_message, write_message, Message};
use fedroam::netproto::{join, join_with, serve_on, JoinOptions, NetError, ServeOutcome};
use fedroam::nn::{serialize_params, ArchDescriptor};

fn arch() -> ArchDescriptor {
    "input=64x64x3;conv=2,5,4,2;relu;maxpool=4,4;flatten;dense=2"
        .parse()
        .unwrap()
}

fn cfg() -> RoundConfig {
    RoundConfig {
        rounds: 3,
        local_epochs: 1,
        batch_size: 8,
        lr: 0.05,
        seed: 11,
        weighting: Weighting::SampleCount,
    }
}

fn datasets() -> Vec<Dataset> {
    env::sim_envs()
        .iter()
        .zip([20, 28, 16])
        .map(|(e, n)| generate_dataset(e, n, 5).unwrap())
        .collect()
}

fn listener() -> (TcpListener, String) {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = l.local_addr().unwrap().to_string();
    (l, addr)
}

fn spawn_server(
    l: TcpListener,
    k: usize,
    cfg: RoundConfig,
) -> thread::JoinHandle<Result<ServeOutcome, NetError>> {
    thread::spawn(move || serve_on(l, k, &cfg, &arch()))
}

#[test]
fn three_clients_match_simulation_bit_for_bit() {
    let ds = datasets();
    let (l, addr) = listener();
    let server = spawn_server(l, 3, cfg());
    let clients: Vec<_> = ds
        .iter()
        .cloned()
        .map(|d| {
            let addr = addr.clone();
            thread::spawn(move || join(&addr, d.name(), &d, &arch()).unwrap())
        })
        .collect();
    let reports: Vec<_> = clients.into_iter().map(|h| h.join().unwrap()).collect();
    let out = server.join().unwrap().unwrap();

    let states: Vec<_> = ds.iter().map(ClientState::new).collect();
    let (sim, sim_reports) = run_federated(&arch(), &states, &cfg()).unwrap();
    assert_eq!(serialize_params(&out.model), serialize_params(&sim));
    assert_eq!(out.reports.len(), 3);
    for (wire, simr) in out.reports.iter().zip(&sim_reports) {
        assert_eq!(wire.clients, simr.clients);
        assert_eq!(wire.global_checksum, simr.global_checksum);
    }
    // losses seen by each client equal the simulated ones
    for r in &reports {
        let sim_losses: Vec<f32> = sim_reports
            .iter()
            .map(|rr| {
                rr.clients
                    .iter()
                    .find(|c| c.client_id == r.client_id)
                    .unwrap()
                    .loss
            })
            .collect();
        assert_eq!(r.losses, sim_losses);
    }
    let n = arch().param_count().unwrap() as u64;
    for (r, t) in reports.iter().zip(&out.traffic) {
        assert_eq!(r.client_id, t.client_id);
        assert_eq!(r.bytes_sent, t.bytes_sent);
        assert_eq!(r.bytes_received, t.bytes_received);
        assert!(
            r.bytes_sent < 2 * 3 * n * 4 + 4096,
            "{} uploaded {}",
            r.client_id,
            r.bytes_sent
        );
    }
    let measured: u64 = out.reports.iter().map(|r| r.bytes_transferred).sum();
    assert!(measured > 3 * 3 * 2 * n * 4);
}

#[test]
fn single_client_matches_chained_local_training() {
    let d = &datasets()[1];
    let (l, addr) = listener();
    let server = spawn_server(l, 1, cfg());
    join(&addr, d.name(), d, &arch()).unwrap();
    let out = server.join().unwrap().unwrap();

    let mut p = fedroam::fl::initial_model(&arch(), &cfg()).unwrap();
    for round in 0..3 {
        p = local_train_at(&p, ClientState::new(d), &cfg(), round)
            .unwrap()
            .0;
    }
    assert!(out.model.bit_eq(&p));
}

#[test]
fn duplicate_id_is_rejected_and_run_continues() {
    let ds = datasets();
    let (l, addr) = listener();
    let server = spawn_server(l, 2, RoundConfig { rounds: 1, ..cfg() });
    let a = {
        let (addr, d) = (addr.clone(), ds[0].clone());
        thread::spawn(move || join(&addr, "S0", &d, &arch()))
    };
    // wait until S0 has joined
    thread::sleep(Duration::from_millis(300));
    let dup = join(&addr, "S0", &ds[1], &arch());
    match dup {
        Err(NetError::Rejected { code: c, .. }) => assert_eq!(c, code::DUPLICATE_ID),
        other => panic!("expected rejection, got {other:?}"),
    }
    join(&addr, "S1", &ds[1], &arch()).unwrap();
    a.join().unwrap().unwrap();
    let out = server.join().unwrap().unwrap();
    let ids: Vec<_> = out.traffic.iter().map(|t| t.client_id.as_str()).collect();
    assert_eq!(ids, ["S0", "S1"]);
}

#[test]
fn arch_mismatch_is_rejected() {
    let ds = datasets();
    let (l, addr) = listener();
    let server = spawn_server(l, 1, RoundConfig { rounds: 1, ..cfg() });
    let other: ArchDescriptor = "input=64x64x3;conv=3,5,4,2;relu;maxpool=4,4;flatten;dense=2"
        .parse()
        .unwrap();
    match join(&addr, "S0", &ds[0], &other) {
        Err(NetError::Rejected { code: c, .. }) => assert_eq!(c, code::ARCH_MISMATCH),
        r => panic!("expected rejection, got {r:?}"),
    }
    join(&addr, "S0", &ds[0], &arch()).unwrap();
    server.join().unwrap().unwrap();
}

#[test]
fn disconnect_mid_run_aborts_with_partial_report() {
    let ds = datasets();
    let (l, addr) = listener();
    let server = spawn_server(l, 2, cfg());
    let good = {
        let (addr, d) = (addr.clone(), ds[0].clone());
        thread::spawn(move || join(&addr, d.name(), &d, &arch()))
    };
    // a client that answers round 0 and then hangs up
    let mut s = TcpStream::connect(&addr).unwrap();
    let hello = Message::JoinRequest {
        client_id: "quitter".into(),
        sample_count: 10,
        arch_checksum: arch().checksum(),
    };
    write_message(&mut s, &hello).unwrap();
    assert!(matches!(
        read_message(&mut s).unwrap().0,
        Message::JoinAccept { .. }
    ));
    let Message::GlobalModel { params, .. } = read_message(&mut s).unwrap().0 else {
        panic!("expected GlobalModel")
    };
    let update = Message::LocalUpdate {
        round: 0,
        client_id: "quitter".into(),
        sample_count: 10,
        params,
        loss: 0.5,
    };
    write_message(&mut s, &update).unwrap();
    assert!(matches!(
        read_message(&mut s).unwrap().0,
        Message::RoundComplete { round: 0 }
    ));
    drop(s);

    match server.join().unwrap() {
        Err(NetError::Aborted { round, partial, .. }) => {
            assert_eq!(round, 1);
            assert_eq!(partial.len(), 1);
        }
        other => panic!("expected abort, got {:?}", other.map(|o| o.reports.len())),
    }
    assert!(good.join().unwrap().unwrap_err().is_protocol());
}

#[test]
fn malformed_frame_from_server_is_protocol_error() {
    let d = &datasets()[0];
    let (l, addr) = listener();
    let fake = thread::spawn(move || {
        let (mut s, _) = l.accept().unwrap();
        let _ = read_message(&mut s).unwrap();
        // valid header, unknown message type
        s.write_all(&[0, 0, 0, 1, 0xEE, 0]).unwrap();
    });
    let err = join(&addr, "S0", d, &arch()).unwrap_err();
    assert!(matches!(err, NetError::Wire(_)), "{err:?}");
    assert!(err.is_protocol());
    fake.join().unwrap();
}

#[test]
fn refused_connection_gives_up_after_retries() {
    let (l, addr) = listener();
    drop(l);
    let opts = JoinOptions {
        retries: 3,
        backoff: Duration::from_millis(10),
    };
    match join_with(&addr, "S0", &datasets()[0], &arch(), &opts) {
        Err(NetError::Connect { attempts, .. }) => assert_eq!(attempts, 4),
        other => panic!("expected connect failure, got {other:?}"),
    }
}
