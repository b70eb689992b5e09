use std::fs;
use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};

use fedroam::data::store::write_atomic;
use fedroam::data::{
    build_paper_partitions, generate_sim2real_holdout, load_dataset, save_dataset, train_val_split,
    Dataset, Domain, Table,
};
use fedroam::eval::report::{grid_csv, grid_table, sim2real_csv, sim2real_svg, Metric};
use fedroam::eval::{
    evaluate, grid_from_models, sim2real_from_models, train_columns, EnvPartition, EvalError,
    Regime, TrainedColumn,
};
use fedroam::fl::{run_centralized, run_federated, ClientState, FlError, RoundConfig};
use fedroam::netproto;
use fedroam::nn::{deserialize_params, serialize_params, ArchDescriptor, ModelParams};

use crate::config::{self, ConfigFile, TrainingOverrides};
use crate::error::{Context, Failure};
use crate::manifest::{manifest_path_for, now_ms, RunManifest};
use crate::{
    EvalArgs, GenDataArgs, GridArgs, JoinArgs, ServeArgs, Sim2RealArgs, TrainArgs, TrainingArgs,
};

const HOLDOUT_STEM: &str = "Rstar-val";

fn s(p: &Path) -> String {
    p.display().to_string()
}

/// Resolved training settings plus their explicit flag form.
struct Training {
    cfg: RoundConfig,
    arch: ArchDescriptor,
}

impl Training {
    fn resolve(a: &TrainingArgs) -> Result<Self, Failure> {
        let file = match &a.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        let flags = TrainingOverrides {
            rounds: a.rounds,
            local_epochs: a.local_epochs,
            batch_size: a.batch_size,
            lr: a.lr,
            weighting: a.weighting,
            seed: a.seed,
            arch: a.arch.clone(),
        };
        let (cfg, arch) = config::resolve(&flags, &file)?;
        Ok(Training { cfg, arch })
    }

    fn args(&self) -> Vec<String> {
        let c = &self.cfg;
        [
            ("--rounds", c.rounds.to_string()),
            ("--local-epochs", c.local_epochs.to_string()),
            ("--batch-size", c.batch_size.to_string()),
            ("--lr", c.lr.to_string()),
            ("--weighting", c.weighting.as_str().to_string()),
            ("--seed", c.seed.to_string()),
            ("--arch", self.arch.to_string()),
        ]
        .into_iter()
        .flat_map(|(k, v)| [k.to_string(), v])
        .collect()
    }

    fn record(&self, m: &mut RunManifest) {
        let c = &self.cfg;
        m.set("rounds", c.rounds)
            .set("local_epochs", c.local_epochs)
            .set("batch_size", c.batch_size)
            .set("lr", c.lr)
            .set("weighting", c.weighting.as_str())
            .set("arch", &self.arch);
    }
}

fn load(path: &Path) -> Result<Dataset, Failure> {
    Ok(load_dataset(path)?)
}

fn fl_failure(e: FlError) -> Failure {
    // training errors come from datasets, architectures or settings
    Failure::BadInput(e.into())
}

fn eval_failure(e: EvalError) -> Failure {
    Failure::BadInput(e.into())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).bad_input(format!("creating {}", dir.display()))?;
    }
    write_atomic(path, bytes)?;
    Ok(())
}

fn write_model(path: &Path, model: &ModelParams) -> Result<(), Failure> {
    write_file(path, &serialize_params(model))
}

fn read_model(path: &Path) -> Result<ModelParams, Failure> {
    let bytes = fs::read(path).bad_input(format!("reading model {}", path.display()))?;
    deserialize_params(&bytes).bad_input(format!("parsing model {}", path.display()))
}

pub fn gen_data(a: &GenDataArgs) -> Result<(), Failure> {
    let started = now_ms();
    let table: Table = a.table.parse()?;
    let seed = config::resolve_seed(a.seed, None)?;
    let parts = build_paper_partitions(a.total, table, seed)?;
    let mut m = RunManifest::new("gen-data", seed, started);
    let full = a.out.join("full");
    for d in &parts {
        m.outputs.push(save_dataset(d, &full)?);
        let (train, val) = train_val_split(d, a.val_fraction, seed)?;
        m.outputs.push(save_dataset(&train, &a.out)?);
        m.outputs.push(save_dataset(&val, &a.out)?);
        println!(
            "{}: {} images, {} blocked; train {}, validation {}",
            d.name(),
            d.len(),
            d.blocked_count(),
            train.len(),
            val.len()
        );
    }
    if let Some(n) = a.holdout {
        let h = generate_sim2real_holdout(n, seed)?;
        m.outputs.push(save_dataset(&h, &a.out)?);
        println!(
            "{}: {} images, {} blocked",
            h.name(),
            h.len(),
            h.blocked_count()
        );
    }
    m.set("table", &a.table)
        .set("total", a.total)
        .set("val_fraction", a.val_fraction);
    let mut args = vec![
        "gen-data".to_string(),
        "--table".into(),
        a.table.clone(),
        "--total".into(),
        a.total.to_string(),
        "--seed".into(),
        seed.to_string(),
        "--out".into(),
        s(&a.out),
        "--val-fraction".into(),
        a.val_fraction.to_string(),
    ];
    if let Some(n) = a.holdout {
        m.set("holdout", n);
        args.extend(["--holdout".to_string(), n.to_string()]);
    }
    m.args = args;
    m.write(&a.out.join("gen-data.run.json"))
}

pub fn train(a: &TrainArgs) -> Result<(), Failure> {
    let started = now_ms();
    let t = Training::resolve(&a.training)?;
    let sets = a
        .data
        .iter()
        .map(|p| load(p))
        .collect::<Result<Vec<_>, _>>()?;
    let model = match a.regime {
        Regime::Centralized => {
            let refs: Vec<&Dataset> = sets.iter().collect();
            let (model, loss) = run_centralized(&t.arch, &refs, &t.cfg).map_err(fl_failure)?;
            println!("final loss {loss:.6}");
            model
        }
        Regime::Federated => {
            let clients: Vec<ClientState<'_>> = sets.iter().map(ClientState::new).collect();
            let (model, reports) = run_federated(&t.arch, &clients, &t.cfg).map_err(fl_failure)?;
            if let Some(last) = reports.last() {
                for c in &last.clients {
                    println!("{} final loss {:.6}", c.client_id, c.loss);
                }
            }
            model
        }
    };
    write_model(&a.out, &model)?;
    println!(
        "wrote {} ({} parameters, checksum {:#018x})",
        a.out.display(),
        model.len(),
        model.checksum()
    );

    let mut m = RunManifest::new("train", t.cfg.seed, started);
    t.record(&mut m);
    m.set("regime", a.regime);
    m.inputs = a.data.clone();
    m.outputs = vec![a.out.clone()];
    m.args = vec![
        "train".into(),
        "--regime".into(),
        a.regime.to_string(),
        "--out".into(),
        s(&a.out),
        "--data".into(),
    ];
    m.args.extend(a.data.iter().map(|p| s(p)));
    m.args.extend(t.args());
    m.write(&manifest_path_for(&a.out))
}

pub fn serve(a: &ServeArgs) -> Result<(), Failure> {
    let started = now_ms();
    let t = Training::resolve(&a.training)?;
    if a.clients == 0 {
        return Err(Failure::bad_input("--clients must be at least 1"));
    }
    let listener = TcpListener::bind((a.bind.as_str(), a.port))
        .bad_input(format!("binding {}:{}", a.bind, a.port))?;
    let local = listener.local_addr().internal("reading bound address")?;
    println!("listening on {local}");
    let _ = std::io::stdout().flush();
    let out = netproto::serve_on(listener, a.clients, &t.cfg, &t.arch)?;

    let mut rounds = String::from("round,clients,bytes_transferred,global_checksum\n");
    for r in &out.reports {
        println!(
            "round {}: {} bytes over {} clients",
            r.round,
            r.bytes_transferred,
            r.clients.len()
        );
        rounds.push_str(&format!(
            "{},{},{},{:#018x}\n",
            r.round,
            r.clients.len(),
            r.bytes_transferred,
            r.global_checksum
        ));
    }
    let mut traffic = String::from("client_id,sample_count,bytes_sent,bytes_received\n");
    for c in &out.traffic {
        println!(
            "{}: sent {} bytes, received {} bytes",
            c.client_id, c.bytes_sent, c.bytes_received
        );
        traffic.push_str(&format!(
            "{},{},{},{}\n",
            c.client_id, c.sample_count, c.bytes_sent, c.bytes_received
        ));
    }
    write_model(&a.out, &out.model)?;
    let rounds_path = PathBuf::from(format!("{}.rounds.csv", s(&a.out)));
    let traffic_path = PathBuf::from(format!("{}.traffic.csv", s(&a.out)));
    write_file(&rounds_path, rounds.as_bytes())?;
    write_file(&traffic_path, traffic.as_bytes())?;
    println!(
        "wrote {} (checksum {:#018x})",
        a.out.display(),
        out.model.checksum()
    );

    let mut m = RunManifest::new("serve", t.cfg.seed, started);
    t.record(&mut m);
    m.set("clients", a.clients)
        .set("bind", &a.bind)
        .set("port", a.port);
    m.outputs = vec![a.out.clone(), rounds_path, traffic_path];
    m.args = vec![
        "serve".into(),
        "--bind".into(),
        a.bind.clone(),
        "--port".into(),
        a.port.to_string(),
        "--clients".into(),
        a.clients.to_string(),
        "--out".into(),
        s(&a.out),
    ];
    m.args.extend(t.args());
    m.write(&manifest_path_for(&a.out))
}

pub fn join(a: &JoinArgs) -> Result<(), Failure> {
    let d = load(&a.data)?;
    let arch = match &a.arch {
        Some(s) => s
            .parse::<ArchDescriptor>()
            .bad_input(format!("arch {s:?}"))?,
        None => ArchDescriptor::default_alexnet(),
    };
    let id = a.id.clone().unwrap_or_else(|| d.name().to_string());
    let r = netproto::join(&a.server, &id, &d, &arch)?;
    for (round, loss) in r.losses.iter().enumerate() {
        println!("round {round}: local loss {loss:.6}");
    }
    println!(
        "{}: {} rounds, sent {} bytes, received {} bytes",
        r.client_id, r.rounds, r.bytes_sent, r.bytes_received
    );
    Ok(())
}

/// The three environments of a gen-data directory: every `<name>` with both
/// `<name>.manifest` and `<name>-val.manifest`, sorted by name.
fn load_partitions(dir: &Path) -> Result<Vec<EnvPartition>, Failure> {
    let entries =
        fs::read_dir(dir).bad_input(format!("reading data directory {}", dir.display()))?;
    let mut stems: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            e.file_name()
                .to_str()
                .and_then(|n| n.strip_suffix(".manifest"))
                .map(str::to_string)
        })
        .collect();
    stems.sort();
    let envs: Vec<&String> = stems
        .iter()
        .filter(|s| !s.ends_with("-val") && stems.contains(&format!("{s}-val")))
        .collect();
    if envs.len() != 3 {
        return Err(Failure::bad_input(format!(
            "{} holds {} train/validation pairs, expected 3",
            dir.display(),
            envs.len()
        )));
    }
    envs.iter()
        .map(|stem| {
            Ok(EnvPartition {
                train: load(&dir.join(stem.as_str()))?,
                val: load(&dir.join(format!("{stem}-val")))?,
            })
        })
        .collect()
}

fn train_all(t: &Training, parts: &[EnvPartition]) -> Result<Vec<TrainedColumn>, Failure> {
    let mut columns =
        train_columns(&t.arch, parts, Regime::Centralized, &t.cfg).map_err(eval_failure)?;
    columns.extend(train_columns(&t.arch, parts, Regime::Federated, &t.cfg).map_err(eval_failure)?);
    Ok(columns)
}

fn write_sim2real(
    out: &Path,
    columns: &[TrainedColumn],
    parts: &[EnvPartition],
    holdout: &Dataset,
) -> Result<Vec<PathBuf>, Failure> {
    let series = sim2real_from_models(columns, parts, holdout).map_err(eval_failure)?;
    for p in &series {
        println!(
            "{} {:11} R* accuracy {:.3}",
            p.combination,
            p.regime.as_str(),
            p.accuracy
        );
    }
    let csv = out.join("sim2real.csv");
    let svg = out.join("sim2real.svg");
    write_file(&csv, sim2real_csv(&series).as_bytes())?;
    write_file(&svg, sim2real_svg(&series).as_bytes())?;
    Ok(vec![csv, svg])
}

fn grid_args(
    name: &str,
    data: &Path,
    out: &Path,
    holdout: Option<&Path>,
    t: &Training,
) -> Vec<String> {
    let mut args = vec![
        name.to_string(),
        "--data".into(),
        s(data),
        "--out".into(),
        s(out),
    ];
    if let Some(h) = holdout {
        args.extend(["--holdout".to_string(), s(h)]);
    }
    args.extend(t.args());
    args
}

pub fn grid(a: &GridArgs) -> Result<(), Failure> {
    let started = now_ms();
    let t = Training::resolve(&a.training)?;
    let parts = load_partitions(&a.data)?;
    let holdout = a.holdout.as_deref().map(load).transpose()?;
    let columns = train_all(&t, &parts)?;
    let (cent, fed): (Vec<_>, Vec<_>) = columns
        .iter()
        .cloned()
        .partition(|c| c.regime == Regime::Centralized);
    let cg = grid_from_models(&cent, &parts).map_err(eval_failure)?;
    let fg = grid_from_models(&fed, &parts).map_err(eval_failure)?;

    let mut outputs = Vec::new();
    for g in [&cg, &fg] {
        for metric in [Metric::Accuracy, Metric::Auc] {
            let p = a
                .out
                .join(format!("{}-{}.csv", g.regime.as_str(), metric.as_str()));
            write_file(&p, grid_csv(g, metric).as_bytes())?;
            outputs.push(p);
        }
    }
    let table = grid_table(&cg, &fg);
    print!("{table}");
    let tp = a.out.join("grid.txt");
    write_file(&tp, table.as_bytes())?;
    outputs.push(tp);
    if let Some(h) = &holdout {
        outputs.extend(write_sim2real(&a.out, &columns, &parts, h)?);
    }

    let mut m = RunManifest::new("grid", t.cfg.seed, started);
    t.record(&mut m);
    m.inputs = vec![a.data.clone()];
    m.inputs.extend(a.holdout.clone());
    m.outputs = outputs;
    m.args = grid_args("grid", &a.data, &a.out, a.holdout.as_deref(), &t);
    m.write(&a.out.join("grid.run.json"))
}

pub fn sim2real(a: &Sim2RealArgs) -> Result<(), Failure> {
    let started = now_ms();
    let t = Training::resolve(&a.training)?;
    let parts = load_partitions(&a.data)?;
    let hpath = a
        .holdout
        .clone()
        .unwrap_or_else(|| a.data.join(HOLDOUT_STEM));
    let holdout = load(&hpath)?;
    if let Some(p) = parts.iter().find(|p| p.train.domain() != Domain::Sim) {
        return Err(Failure::bad_input(format!(
            "partition {} is not sim-domain",
            p.train.name()
        )));
    }
    if holdout.domain() != Domain::Real {
        return Err(Failure::bad_input(format!(
            "hold-out {} is not real-domain",
            holdout.name()
        )));
    }
    let columns = train_all(&t, &parts)?;
    let outputs = write_sim2real(&a.out, &columns, &parts, &holdout)?;

    let mut m = RunManifest::new("sim2real", t.cfg.seed, started);
    t.record(&mut m);
    m.inputs = vec![a.data.clone(), hpath.clone()];
    m.outputs = outputs;
    m.args = grid_args("sim2real", &a.data, &a.out, Some(&hpath), &t);
    m.write(&a.out.join("sim2real.run.json"))
}

pub fn eval(a: &EvalArgs) -> Result<(), Failure> {
    let started = now_ms();
    let model = read_model(&a.model)?;
    let mut csv = String::from("dataset,split,accuracy,auc,tp,fp,tn,fn\n");
    for p in &a.data {
        let d = load(p)?;
        let r = evaluate(&model, &d).map_err(eval_failure)?;
        let auc = r.auc.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        println!(
            "{} ({}): accuracy {:.4}, auc {auc}",
            r.dataset,
            d.split(),
            r.accuracy
        );
        let c = r.confusion;
        csv.push_str(&format!(
            "{},{},{:.6},{},{},{},{},{}\n",
            r.dataset,
            d.split(),
            r.accuracy,
            r.auc.map_or_else(String::new, |v| format!("{v:.6}")),
            c.tp,
            c.fp,
            c.tn,
            c.fn_
        ));
    }
    if let Some(out) = &a.out {
        write_file(out, csv.as_bytes())?;
        let mut m = RunManifest::new("eval", 0, started);
        m.inputs = std::iter::once(a.model.clone())
            .chain(a.data.iter().cloned())
            .collect();
        m.outputs = vec![out.clone()];
        m.args = vec![
            "eval".into(),
            "--model".into(),
            s(&a.model),
            "--out".into(),
            s(out),
            "--data".into(),
        ];
        m.args.extend(a.data.iter().map(|p| s(p)));
        m.write(&manifest_path_for(out))?;
    }
    Ok(())
}
