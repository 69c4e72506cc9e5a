//! Command-line front end for split learning experiments.

use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use splitshield::attack::{run_attack, AttackSection, Similarity};
use splitshield::harness::dataset::{read_gradients_csv, write_dataset_csv, write_gradients_csv};
use splitshield::harness::experiment::{
    overlapping_ids, psu_in_process, run_experiment_observed, run_sweep, seed_from_env, write_outputs,
    ExperimentConfig,
};
use splitshield::harness::report::{aggregate, write_report};
use splitshield::harness::transport::TcpTransport;
use splitshield::harness::{gen_dataset, DatasetSpec};
use splitshield::numerics::{Mat, Rng};
use splitshield::psu::{run_psu, GroupParams, Role};
use splitshield::{Error, Result};

#[derive(Parser)]
#[command(name = "splitshield", version, about = "Label leakage and protection in two-party split learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-class dataset as CSV.
    GenData(GenDataArgs),
    /// Train one configuration and write step and summary CSVs.
    Train(TrainArgs),
    /// Attack a dumped gradient CSV offline.
    Attack(AttackArgs),
    /// Run the private set union protocol.
    Psu(PsuArgs),
    /// Run every point of the config's [sweep] section.
    Sweep(SweepArgs),
    /// Aggregate summary CSVs into a trade-off table.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    d_in: Option<usize>,
    #[arg(long)]
    pos_fraction: Option<f64>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// output CSV (stdout if omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// also write the last communicated gradient batch here
    #[arg(long)]
    dump_grads: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackName {
    Norm,
    Hint,
    Spectral,
}

#[derive(Clone, Copy, ValueEnum)]
enum SimilarityArg {
    Inner,
    Cosine,
}

#[derive(Args)]
struct AttackArgs {
    /// CSV with columns label,g0,...
    #[arg(long)]
    grads: PathBuf,
    #[arg(long, value_enum, default_value = "norm")]
    attack: AttackName,
    #[arg(long, default_value_t = 5)]
    n_hints: usize,
    #[arg(long, value_enum, default_value = "inner")]
    similarity: SimilarityArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Active,
    Passive,
}

#[derive(Args)]
struct PsuArgs {
    #[arg(long, value_enum)]
    role: Option<RoleArg>,
    /// accept one peer on this address
    #[arg(long, conflicts_with_all = ["connect", "in_process"])]
    listen: Option<String>,
    /// connect to a listening peer
    #[arg(long, conflicts_with = "in_process")]
    connect: Option<String>,
    /// run both parties in this process
    #[arg(long)]
    in_process: bool,
    /// file with one id per line (otherwise synthetic ids are used)
    #[arg(long)]
    ids: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    size_a: usize,
    #[arg(long, default_value_t = 64)]
    size_b: usize,
    #[arg(long, default_value_t = 0.5)]
    overlap: f64,
    /// modp2048, safe128 or toy23
    #[arg(long, default_value = "modp2048")]
    group: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// write this party's id,position,uid mapping as CSV
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// summary CSVs from `train` or `sweep`
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// which attack's leak AUC to report (default: the first)
    #[arg(long)]
    attack: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => {
            let mut cfg = ExperimentConfig::default();
            if let Some(seed) = seed_from_env()? {
                cfg.seed = seed;
            }
            Ok(cfg)
        }
    }
}

fn run_config(args: &RunArgs) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = args.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = args.learning_rate {
        cfg.train.learning_rate = lr;
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok((cfg, out))
}

fn writer(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let mut spec: DatasetSpec = cfg.dataset.spec(cfg.seed);
    if let Some(v) = a.n {
        spec.n = v;
    }
    if let Some(v) = a.d_in {
        spec.d_in = v;
    }
    if let Some(v) = a.pos_fraction {
        spec.pos_fraction = v;
    }
    if let Some(v) = a.separation {
        spec.separation = v;
    }
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    let data = gen_dataset(&spec)?;
    write_dataset_csv(&data, writer(a.out.as_deref())?)?;
    info!("wrote {} rows", data.len());
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let (cfg, out) = run_config(&a.run)?;
    let mut last: Option<(Mat, Vec<u8>)> = None;
    let mut keep = |b: &splitshield::splitnn::GradBatch| last = Some((b.grads.clone(), b.labels.clone()));
    let observer: Option<&mut dyn FnMut(&splitshield::splitnn::GradBatch)> =
        if a.dump_grads.is_some() { Some(&mut keep) } else { None };
    let result = run_experiment_observed(&cfg, observer)?;
    let files = write_outputs(&out, std::slice::from_ref(&result))?;
    if let (Some(path), Some((g, y))) = (&a.dump_grads, last) {
        write_gradients_csv(&g, &y, File::create(path)?)?;
    }
    let s = &result.summary;
    println!("test_auc = {:.4}  test_loss = {:.4}  ace = {:.4}", s.test_auc, s.test_loss, s.ace);
    for (name, v) in &s.leaks {
        match v {
            Some(v) => println!("leak_auc_{name} = {v:.4}"),
            None => println!("leak_auc_{name} = n/a"),
        }
    }
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn attack_cmd(a: &AttackArgs) -> Result<()> {
    let (grads, labels) = read_gradients_csv(File::open(&a.grads)?)?;
    let section = AttackSection {
        attack: match a.attack {
            AttackName::Norm => "norm",
            AttackName::Hint => "hint",
            AttackName::Spectral => "spectral",
        }
        .into(),
        n_hints: Some(a.n_hints),
        similarity: Some(match a.similarity {
            SimilarityArg::Inner => Similarity::Inner,
            SimilarityArg::Cosine => Similarity::Cosine,
        }),
    };
    let kind = section.to_kind()?;
    let res = run_attack(kind, &grads, &labels, &mut Rng::new(a.seed))?;
    let note = if res.leak.degraded { " (single class, undefined)" } else { "" };
    println!("leak_auc_{} = {:.6}{note}", kind.name(), res.leak.auc);
    Ok(())
}

fn read_ids(path: &Path) -> Result<Vec<Vec<u8>>> {
    let mut ids = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        let t = line.trim();
        if !t.is_empty() {
            ids.push(t.as_bytes().to_vec());
        }
    }
    Ok(ids)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_mapping(path: &Path, map: &splitshield::psu::UidMap) -> Result<()> {
    let mut w = File::create(path)?;
    writeln!(w, "id,position,uid")?;
    for (id, uid) in &map.mapping {
        let pos = map.uids.binary_search(uid).map_err(|_| Error::Consistency("uid not in U".into()))?;
        writeln!(w, "{},{pos},{}", String::from_utf8_lossy(id), hex(uid))?;
    }
    Ok(())
}

fn psu_cmd(a: &PsuArgs) -> Result<()> {
    let group = GroupParams::by_name(&a.group)?;
    let (set_a, set_b) = overlapping_ids(a.size_a, a.size_b, a.overlap, a.seed)?;
    if a.in_process {
        let out = psu_in_process(&set_a, &set_b, &group, a.seed)?;
        println!("|I_a| = {}, |I_p| = {}", set_a.len(), set_b.len());
        println!("|U| = {}", out.union_size);
        println!("maps consistent: {}", out.consistent);
        if let Some(p) = &a.out {
            write_mapping(p, &out.active)?;
        }
        return if out.consistent {
            Ok(())
        } else {
            Err(Error::Consistency("parties disagree on the uid mapping".into()))
        };
    }
    let role = match a.role {
        Some(RoleArg::Active) => Role::Active,
        Some(RoleArg::Passive) => Role::Passive,
        None => return Err(Error::Config("--role is required unless --in-process is given".into())),
    };
    let ids = match &a.ids {
        Some(p) => read_ids(p)?,
        None if role == Role::Active => set_a,
        None => set_b,
    };
    let transport = match (&a.listen, &a.connect) {
        (Some(addr), None) => TcpTransport::listen(addr.as_str())?,
        (None, Some(addr)) => TcpTransport::connect(addr.as_str(), Duration::from_secs(30))?,
        _ => return Err(Error::Config("exactly one of --listen, --connect or --in-process is required".into())),
    };
    let stream = match role {
        Role::Active => 42,
        Role::Passive => 41,
    };
    let map = run_psu(role, &ids, &group, transport, &mut Rng::new(a.seed).fork(stream))?;
    println!("|own ids| = {}", map.mapping.len());
    println!("|U| = {}", map.len());
    if let Some(p) = &a.out {
        write_mapping(p, &map)?;
    }
    Ok(())
}

fn sweep_cmd(a: &SweepArgs) -> Result<()> {
    let (cfg, out) = run_config(&a.run)?;
    let outputs = run_sweep(&cfg)?;
    for o in &outputs {
        let leak = o
            .summary
            .leaks
            .first()
            .and_then(|(_, v)| *v)
            .map_or("n/a".to_string(), |v| format!("{v:.4}"));
        println!(
            "{} seed {}: leak_auc = {leak}, test_auc = {:.4}",
            o.summary.param.as_deref().unwrap_or(""),
            o.summary.seed,
            o.summary.test_auc
        );
    }
    let files = write_outputs(&out, &outputs)?;
    println!("wrote {} files into {}", files.len(), out.display());
    Ok(())
}

fn report_cmd(a: &ReportArgs) -> Result<()> {
    let inputs = a.inputs.iter().map(File::open).collect::<io::Result<Vec<_>>>()?;
    let rows = aggregate(inputs, a.attack.as_deref())?;
    write_report(&rows, writer(a.out.as_deref())?)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Attack(a) => attack_cmd(a),
        Command::Psu(a) => psu_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Report(a) => report_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::FAILURE
        }
    }
}
