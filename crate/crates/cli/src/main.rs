use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

use ual_cli::pipeline::{self, GenDataConfig};
use ual_core::eval::{self, Fusion, RetrievalRun};
use ual_core::inference;
use ual_core::reliability::{self, DEFAULT_TAU_MAX, DEFAULT_TAU_MIN};
use ual_core::synthdata::{self, DatasetSpec};
use ual_core::textio::{self, fmt_f64};
use ual_core::trainer::{self, Objective, ProbeConfig, TrainConfig};
use ual_core::Network;

#[derive(Parser)]
#[command(name = "ual", version, about = "Uncertainty-aware embedding retrieval experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/query/gallery splits and OOD sets.
    GenData(GenDataArgs),
    /// Write a training config with every default spelled out.
    InitConfig(InitConfigArgs),
    /// Train a network and write its checkpoint.
    Train(TrainArgs),
    /// Embed a dataset as Gaussian embeddings.
    Embed(EmbedArgs),
    /// Single-query retrieval metrics.
    Search(SearchArgs),
    /// Risk-controlled gating sweep over alpha.
    GateSweep(GateSweepArgs),
    /// Multi-query retrieval with fused similarities.
    MultiQuery(MultiQueryArgs),
    /// Mean data uncertainty per corruption strength.
    ProbeNoise(ProbeNoiseArgs),
    /// Mean model uncertainty per dataset.
    ProbeOod(ProbeOodArgs),
    /// Mean parameter change from fitting single samples, per corruption strength.
    ProbeModelChange(ProbeModelChangeArgs),
}

/// Command line that reproduces a run with all defaults expanded.
struct Resolved(Vec<String>);

impl Resolved {
    fn new(cmd: &str) -> Self {
        Resolved(vec!["ual".into(), cmd.into()])
    }

    fn flag(mut self, name: &str, value: impl ToString) -> Self {
        self.0.push(format!("--{name}"));
        self.0.push(value.to_string());
        self
    }

    fn path(self, name: &str, value: &Path) -> Self {
        self.flag(name, value.display())
    }

    fn opt_path(self, name: &str, value: &Option<PathBuf>) -> Self {
        match value {
            Some(p) => self.path(name, p),
            None => self,
        }
    }

    fn switch(mut self, name: &str, on: bool) -> Self {
        if on {
            self.0.push(format!("--{name}"));
        }
        self
    }

    fn print(&self) {
        eprintln!("# resolved: {}", self.0.join(" "));
    }
}

fn list(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Writes to `out` when given, otherwise to stdout.
fn emit(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => textio::write_file(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    num_identities: usize,
    #[arg(long, default_value_t = 12)]
    samples_per_identity: usize,
    #[arg(long, default_value_t = 32)]
    d_in: usize,
    #[arg(long, default_value_t = 0.5)]
    cluster_spread: f64,
    #[arg(long, default_value_t = 4.0)]
    inter_cluster_scale: f64,
    #[arg(long, default_value_t = 4)]
    num_cameras: usize,
    /// Identities below this index are used for training [default: half].
    #[arg(long)]
    train_identities: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    query_fraction: f64,
    /// Probability that a query in the corrupted query set is corrupted.
    #[arg(long, default_value_t = 0.5)]
    corrupt_prob: f64,
    #[arg(long, default_value_t = 2.0)]
    corrupt_eta: f64,
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = GenDataConfig {
        spec: DatasetSpec {
            num_identities: a.num_identities,
            samples_per_identity: a.samples_per_identity,
            d_in: a.d_in,
            cluster_spread: a.cluster_spread,
            inter_cluster_scale: a.inter_cluster_scale,
            num_cameras: a.num_cameras,
            seed: a.seed,
        },
        train_identities: a.train_identities.unwrap_or(a.num_identities / 2),
        query_fraction: a.query_fraction,
        corrupt_prob: a.corrupt_prob,
        corrupt_eta: a.corrupt_eta,
    };
    Resolved::new("gen-data")
        .path("out", &a.out)
        .flag("seed", a.seed)
        .flag("num-identities", a.num_identities)
        .flag("samples-per-identity", a.samples_per_identity)
        .flag("d-in", a.d_in)
        .flag("cluster-spread", a.cluster_spread)
        .flag("inter-cluster-scale", a.inter_cluster_scale)
        .flag("num-cameras", a.num_cameras)
        .flag("train-identities", cfg.train_identities)
        .flag("query-fraction", a.query_fraction)
        .flag("corrupt-prob", a.corrupt_prob)
        .flag("corrupt-eta", a.corrupt_eta)
        .print();
    let bundle = pipeline::generate_bundle(&cfg)?;
    bundle.save(&a.out)?;
    for (name, samples) in bundle.files() {
        println!("{}\t{} samples", a.out.join(name).display(), samples.len());
    }
    Ok(())
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Ual,
    Dnet,
}

impl From<ObjectiveArg> for Objective {
    fn from(o: ObjectiveArg) -> Self {
        match o {
            ObjectiveArg::Ual => Objective::Ual,
            ObjectiveArg::Dnet => Objective::DNet,
        }
    }
}

#[derive(Args)]
struct InitConfigArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep probability of the Bayesian weight mask.
    #[arg(long, default_value_t = 0.7)]
    rho: f64,
    #[arg(long, value_enum, default_value_t = ObjectiveArg::Ual)]
    objective: ObjectiveArg,
}

fn init_config(a: InitConfigArgs) -> Result<()> {
    let cfg = TrainConfig {
        seed: a.seed,
        rho: a.rho,
        objective: a.objective.into(),
        ..TrainConfig::default()
    };
    cfg.validate()?;
    Resolved::new("init-config")
        .path("out", &a.out)
        .flag("seed", a.seed)
        .flag("rho", a.rho)
        .flag("objective", cfg.objective.as_str())
        .print();
    textio::write_file(&a.out, &cfg.to_text())?;
    Ok(())
}

#[derive(Args)]
struct TrainArgs {
    /// Training split.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path. On divergence the last good parameters are written here.
    #[arg(long)]
    out: PathBuf,
    /// Config file from `init-config`; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Loss history (`iteration,loss_total,loss_data,loss_triplet`).
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long, value_enum)]
    objective: Option<ObjectiveArg>,
    /// Override one config key, e.g. `--set epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| ual_core::Error::invalid(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(r) = a.rho {
        cfg.rho = r;
    }
    if let Some(o) = a.objective {
        cfg.objective = o.into();
    }
    let mut resolved = Resolved::new("train")
        .path("data", &a.data)
        .path("out", &a.out)
        .opt_path("history", &a.history);
    for line in cfg.to_text().lines() {
        let (k, v) = line.split_once(" = ").unwrap_or((line, ""));
        resolved = resolved.flag("set", format!("{k}={v}"));
    }
    resolved.print();

    let data = synthdata::load_dataset(&a.data)?;
    match trainer::train(&data, &cfg) {
        Ok(outcome) => {
            outcome.network.save(&a.out)?;
            if let Some(h) = &a.history {
                textio::write_file(h, &trainer::format_history(&outcome.history))?;
            }
            if let Some(last) = outcome.history.last() {
                println!(
                    "trained {} iterations, final loss {}",
                    outcome.history.len(),
                    fmt_f64(last.report.total)
                );
            }
            Ok(())
        }
        Err(failure) => {
            if let Some(net) = &failure.last_good {
                net.save(&a.out)?;
                eprintln!("last good checkpoint written to {}", a.out.display());
            }
            if let Some(h) = &a.history {
                textio::write_file(h, &trainer::format_history(&failure.history))?;
            }
            Err(failure.error.into())
        }
    }
}

#[derive(Args)]
struct MonteCarlo {
    /// Number of mask draws.
    #[arg(long = "T", default_value_t = inference::DEFAULT_T)]
    t: usize,
    /// Seed for the mask set.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl MonteCarlo {
    fn add(&self, r: Resolved) -> Resolved {
        r.flag("T", self.t).flag("seed", self.seed)
    }
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    mc: MonteCarlo,
}

fn embed(a: EmbedArgs) -> Result<()> {
    a.mc.add(
        Resolved::new("embed")
            .path("model", &a.model)
            .path("data", &a.data)
            .path("out", &a.out),
    )
    .print();
    let net = Network::load(&a.model)?;
    let data = synthdata::load_dataset(&a.data)?;
    let emb = pipeline::embed_with(&net, &data, a.mc.t, a.mc.seed)?;
    inference::save_embeddings(&a.out, net.dims.c, a.mc.t, &emb)?;
    Ok(())
}

#[derive(Args)]
struct RetrievalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    query: PathBuf,
    #[arg(long)]
    gallery: PathBuf,
    #[command(flatten)]
    mc: MonteCarlo,
}

impl RetrievalArgs {
    fn add(&self, r: Resolved) -> Resolved {
        self.mc.add(
            r.path("model", &self.model)
                .path("query", &self.query)
                .path("gallery", &self.gallery),
        )
    }

    fn embed(&self) -> Result<(Vec<inference::GaussianEmbedding>, Vec<inference::GaussianEmbedding>)> {
        let net = Network::load(&self.model)?;
        let queries = synthdata::load_dataset(&self.query)?;
        let gallery = synthdata::load_dataset(&self.gallery)?;
        Ok(pipeline::retrieval_run(&net, &queries, &gallery, self.mc.t, self.mc.seed)?)
    }
}

#[derive(Args)]
struct SearchArgs {
    #[command(flatten)]
    run: RetrievalArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    /// One JSON record per line instead of `metric,value`.
    #[arg(long)]
    jsonl: bool,
}

fn search(a: SearchArgs) -> Result<()> {
    a.run
        .add(Resolved::new("search"))
        .opt_path("out", &a.out)
        .switch("jsonl", a.jsonl)
        .print();
    let (q, g) = a.run.embed()?;
    let report = eval::single_query_eval(&RetrievalRun::single(q, g))?;
    let text = if a.jsonl {
        eval::format_report_jsonl(&report)
    } else {
        eval::format_report(&report)
    };
    emit(&a.out, &text)
}

#[derive(Args)]
struct GateSweepArgs {
    #[command(flatten)]
    run: RetrievalArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1")]
    alpha_grid: Vec<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-query gate decisions at the last alpha of the grid.
    #[arg(long)]
    decisions: Option<PathBuf>,
    #[arg(long)]
    jsonl: bool,
}

fn gate_sweep(a: GateSweepArgs) -> Result<()> {
    a.run
        .add(Resolved::new("gate-sweep"))
        .flag("alpha-grid", list(&a.alpha_grid))
        .opt_path("out", &a.out)
        .opt_path("decisions", &a.decisions)
        .switch("jsonl", a.jsonl)
        .print();
    let (q, g) = a.run.embed()?;
    if let (Some(path), Some(&alpha)) = (&a.decisions, a.alpha_grid.last()) {
        textio::write_file(path, &reliability::format_gate_report(&reliability::gate(&q, alpha)?))?;
    }
    let rows = eval::risk_sweep(&RetrievalRun::single(q, g), &a.alpha_grid)?;
    let text = if a.jsonl {
        eval::format_sweep_jsonl(&rows)
    } else {
        eval::format_sweep(&rows)
    };
    emit(&a.out, &text)
}

#[derive(Clone, Copy, ValueEnum)]
enum FusionArg {
    Reliability,
    Uniform,
}

#[derive(Args)]
struct MultiQueryArgs {
    #[command(flatten)]
    run: RetrievalArgs,
    #[arg(long, value_enum, default_value_t = FusionArg::Reliability)]
    fusion: FusionArg,
    #[arg(long, default_value_t = DEFAULT_TAU_MIN)]
    tau_min: f64,
    #[arg(long, default_value_t = DEFAULT_TAU_MAX)]
    tau_max: f64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-group fusion weights.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    jsonl: bool,
}

fn multi_query(a: MultiQueryArgs) -> Result<()> {
    let (fusion, name) = match a.fusion {
        FusionArg::Reliability => (
            Fusion::Reliability {
                tau_min: a.tau_min,
                tau_max: a.tau_max,
            },
            "reliability",
        ),
        FusionArg::Uniform => (Fusion::Uniform, "uniform"),
    };
    a.run
        .add(Resolved::new("multi-query"))
        .flag("fusion", name)
        .flag("tau-min", a.tau_min)
        .flag("tau-max", a.tau_max)
        .opt_path("out", &a.out)
        .opt_path("weights", &a.weights)
        .switch("jsonl", a.jsonl)
        .print();
    let (q, g) = a.run.embed()?;
    let (report, records) = eval::multi_query_eval(&RetrievalRun::multi(q, g), fusion)?;
    if let Some(path) = &a.weights {
        textio::write_file(path, &reliability::format_fusion_report(&records))?;
    }
    let text = if a.jsonl {
        eval::format_report_jsonl(&report)
    } else {
        eval::format_report(&report)
    };
    emit(&a.out, &text)
}

#[derive(Args)]
struct ProbeNoiseArgs {
    #[arg(long)]
    model: PathBuf,
    /// Evaluation set to corrupt.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,0.5,1,2,4")]
    etas: Vec<f64>,
    #[command(flatten)]
    mc: MonteCarlo,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn probe_noise(a: ProbeNoiseArgs) -> Result<()> {
    a.mc.add(
        Resolved::new("probe-noise")
            .path("model", &a.model)
            .path("data", &a.data)
            .flag("etas", list(&a.etas)),
    )
    .opt_path("out", &a.out)
    .print();
    let net = Network::load(&a.model)?;
    let data = synthdata::load_dataset(&a.data)?;
    let rows = pipeline::noise_probe(&net, &data, &a.etas, a.mc.t, a.mc.seed)?;
    emit(&a.out, &pipeline::format_noise(&rows))
}

#[derive(Args)]
struct ProbeOodArgs {
    #[arg(long)]
    model: PathBuf,
    /// Datasets in order of intended deviation.
    #[arg(long, value_delimiter = ',', required = true)]
    datasets: Vec<PathBuf>,
    #[command(flatten)]
    mc: MonteCarlo,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn probe_ood(a: ProbeOodArgs) -> Result<()> {
    let names: Vec<String> = a.datasets.iter().map(|p| p.display().to_string()).collect();
    a.mc.add(
        Resolved::new("probe-ood")
            .path("model", &a.model)
            .flag("datasets", names.join(",")),
    )
    .opt_path("out", &a.out)
    .print();
    let net = Network::load(&a.model)?;
    let sets = a
        .datasets
        .iter()
        .map(|p| synthdata::load_dataset(p))
        .collect::<ual_core::Result<Vec<_>>>()?;
    let refs: Vec<&[_]> = sets.iter().map(Vec::as_slice).collect();
    let values = pipeline::ood_probe(&net, &refs, a.mc.t, a.mc.seed)?;
    emit(&a.out, &pipeline::format_ood(&names, &values))
}

#[derive(Args)]
struct ProbeModelChangeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Samples whose identities are training classes.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,4")]
    etas: Vec<f64>,
    #[arg(long, default_value_t = ProbeConfig::default().iterations)]
    iterations: usize,
    /// Gradient-descent step size.
    #[arg(long, default_value_t = ProbeConfig::default().learning_rate)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn probe_model_change(a: ProbeModelChangeArgs) -> Result<()> {
    Resolved::new("probe-model-change")
        .path("model", &a.model)
        .path("data", &a.data)
        .flag("etas", list(&a.etas))
        .flag("iterations", a.iterations)
        .flag("lr", a.lr)
        .flag("seed", a.seed)
        .opt_path("out", &a.out)
        .print();
    let net = Network::load(&a.model)?;
    let data = synthdata::load_dataset(&a.data)?;
    let cfg = ProbeConfig {
        iterations: a.iterations,
        learning_rate: a.lr,
        seed: a.seed,
    };
    let rows = pipeline::model_change_by_eta(&net, &data, &a.etas, &cfg)?;
    emit(&a.out, &pipeline::format_model_change(&rows))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::InitConfig(a) => init_config(a),
        Command::Train(a) => train(a),
        Command::Embed(a) => embed(a),
        Command::Search(a) => search(a),
        Command::GateSweep(a) => gate_sweep(a),
        Command::MultiQuery(a) => multi_query(a),
        Command::ProbeNoise(a) => probe_noise(a),
        Command::ProbeOod(a) => probe_ood(a),
        Command::ProbeModelChange(a) => probe_model_change(a),
    }
}

/// 3 for numerical failures, 2 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<ual_core::Error>() {
        Some(e) if e.is_numerical() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
