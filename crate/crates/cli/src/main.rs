use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pcp_core::evaluation::{cluster_purity, knn_accuracy, linear_probe, nmi, LabeledSplit};
use pcp_core::harness::{
    default_output_dir, embed_dataset, export_embeddings, load_checkpoint, load_dataset, run_training, summary_csv,
    sweep, DataFormat, DataSource, Dataset, Mode, RunConfig, SyntheticSpec,
};
use pcp_core::{kmeans_fit, EmbeddingBank, PcpError, Result};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "pcp", version, about = "Unsupervised feature learning by progressive cluster purification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train an encoder and write metrics, checkpoint and embeddings.
    Train(RunArgs),
    /// Evaluate a checkpoint: kNN accuracy, k-means purity and NMI, linear probe.
    Eval(EvalArgs),
    /// Train once per value of one configuration field.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Field to vary: gamma, floor_clusters, alpha, k or tau.
        #[arg(long)]
        axis: String,
        /// Comma separated values.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<String>,
    },
    /// Embed a dataset with a checkpoint and write the vectors as PCPE.
    Export(ExportArgs),
    /// Write a labeled Gaussian-mixture train/test pair.
    GenData(GenArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Csv,
    Pcpd,
}

impl From<FormatArg> for DataFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => DataFormat::Csv,
            FormatArg::Pcpd => DataFormat::Pcpd,
        }
    }
}

/// Run configuration: an optional JSON file, then flag overrides.
#[derive(Args, Debug)]
struct RunArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training data, CSV or PCPD.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Held-out data for kNN accuracy.
    #[arg(long)]
    test_data: Option<PathBuf>,
    /// Data format; inferred from the extension when absent.
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    /// pcp, dc-baseline or ir-baseline.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    floor_clusters: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    theta_low: Option<f64>,
    #[arg(long)]
    theta_high: Option<f64>,
    #[arg(long)]
    activation_epoch: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    no_voting: bool,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    no_warmup: bool,
    #[arg(long)]
    warm_end_epoch: Option<usize>,
    /// Hidden layer widths, comma separated; empty for a linear encoder.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    output_dim: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Learning-rate milestones as epoch:factor pairs, comma separated.
    #[arg(long, value_delimiter = ',')]
    milestones: Option<Vec<String>>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    bank_momentum: Option<f64>,
    #[arg(long)]
    knn_k: Option<usize>,
    #[arg(long)]
    knn_tau: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

macro_rules! set {
    ($src:expr => $dst:expr) => {
        if let Some(v) = $src.clone() {
            $dst = v;
        }
    };
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let format = self.format.map(DataFormat::from);
        if let Some(p) = &self.data {
            c.dataset = Some(DataSource {
                path: p.clone(),
                format,
            });
        }
        if let Some(p) = &self.test_data {
            c.test_dataset = Some(DataSource {
                path: p.clone(),
                format,
            });
        }
        if let Some(m) = &self.mode {
            c.mode = m.parse::<Mode>()?;
        }
        set!(self.seed => c.seed);
        set!(self.epochs => c.schedule.total_epochs);
        set!(self.rounds => c.rounds);
        set!(self.floor_clusters => c.schedule.floor_clusters);
        set!(self.gamma => c.purify.gamma);
        set!(self.alpha => c.purify.alpha);
        set!(self.theta_low => c.purify.theta_low);
        set!(self.theta_high => c.purify.theta_high);
        set!(self.activation_epoch => c.purify.activation_epoch);
        set!(self.window => c.purify.window);
        set!(self.tau => c.loss.tau);
        set!(self.warm_end_epoch => c.loss.warm_end_epoch);
        set!(self.hidden => c.encoder.hidden_dims);
        set!(self.output_dim => c.encoder.output_dim);
        set!(self.lr => c.optim.lr.lr0);
        set!(self.batch_size => c.optim.batch_size);
        set!(self.momentum => c.optim.momentum);
        set!(self.weight_decay => c.optim.weight_decay);
        set!(self.bank_momentum => c.optim.bank_momentum);
        set!(self.knn_k => c.eval.knn_k);
        set!(self.knn_tau => c.eval.knn_tau);
        if let Some(ms) = &self.milestones {
            c.optim.lr.milestones = ms.iter().map(|m| parse_milestone(m)).collect::<Result<_>>()?;
        }
        if self.no_voting {
            c.purify.enable_voting = false;
        }
        if self.no_warmup {
            c.warmup = false;
        }
        if self.out.is_some() {
            c.output_dir = self.out.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

fn parse_milestone(text: &str) -> Result<(usize, f64)> {
    let bad = || PcpError::ConfigError(format!("milestone {text:?} is not epoch:factor"));
    let (e, f) = text.split_once(':').ok_or_else(bad)?;
    Ok((e.trim().parse().map_err(|_| bad())?, f.trim().parse().map_err(|_| bad())?))
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Encoder checkpoint (PCPW).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled reference data.
    #[arg(long)]
    data: PathBuf,
    /// Labeled queries.
    #[arg(long)]
    test_data: PathBuf,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    #[arg(long, default_value_t = 200)]
    knn_k: usize,
    #[arg(long, default_value_t = 0.1)]
    knn_tau: f64,
    /// k-means cluster count; defaults to the number of classes.
    #[arg(long)]
    clusters: Option<usize>,
    /// Linear probe epochs; 0 skips the probe.
    #[arg(long, default_value_t = 200)]
    probe_epochs: usize,
    #[arg(long, default_value_t = 0.5)]
    probe_lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    /// Destination PCPE file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    #[arg(long, default_value_t = 50)]
    test_per_class: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// Noise norm relative to the unit class centers.
    #[arg(long, default_value_t = 1.0)]
    spread: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training split destination; the extension picks the format.
    #[arg(long)]
    train_out: PathBuf,
    #[arg(long)]
    test_out: Option<PathBuf>,
}

fn labels_of(data: &Dataset, what: &str) -> Result<Vec<usize>> {
    data.labels
        .clone()
        .ok_or_else(|| PcpError::ConfigError(format!("{what} has no label column")))
}

fn train(args: &RunArgs) -> Result<()> {
    let mut config = args.config()?;
    if config.output_dir.is_none() {
        config.output_dir = Some(default_output_dir(&config));
    }
    let outcome = run_training(&config)?;
    let last = outcome.records.last().expect("at least one epoch");
    println!("{}", serde_json::to_string(last).expect("record serializes"));
    eprintln!("wrote {}", config.output_dir.as_deref().unwrap_or(Path::new(".")).display());
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let encoder = load_checkpoint(&args.checkpoint)?;
    let format = args.format.map(DataFormat::from);
    let train = load_dataset(&args.data, format)?;
    let test = load_dataset(&args.test_data, format)?;
    let train_labels = labels_of(&train, "data")?;
    let test_labels = labels_of(&test, "test data")?;
    let classes = train.num_classes().into_iter().chain(test.num_classes()).max().unwrap_or(1);
    let train_emb = embed_dataset(&encoder, &train)?;
    let test_emb = embed_dataset(&encoder, &test)?;

    let knn = knn_accuracy(
        &train_emb,
        &train_labels,
        classes,
        &test_emb,
        &test_labels,
        args.knn_k,
        args.knn_tau,
    )?;
    let k = args.clusters.unwrap_or(classes).min(train.len());
    let state = kmeans_fit(&train_emb, k, args.seed)?;
    let purity = cluster_purity(&state.assignment, &train_labels)?;
    let nmi_value = nmi(&state.assignment, &train_labels)?;
    let probe = if args.probe_epochs == 0 {
        None
    } else {
        let dim = train_emb.dim();
        let mut all = train_emb.as_slice().to_vec();
        all.extend_from_slice(test_emb.as_slice());
        let joint = EmbeddingBank::from_unit_data(dim, all)?;
        let n = train.len();
        let split = LabeledSplit {
            train_ids: (0..n).collect(),
            train_labels,
            test_ids: (n..n + test.len()).collect(),
            test_labels,
            num_classes: classes,
        };
        Some(linear_probe(&joint, &split, args.probe_epochs, args.probe_lr, args.seed)?)
    };
    let report = json!({
        "knn_accuracy": knn,
        "clusters": k,
        "purity": purity,
        "nmi": nmi_value,
        "linear_probe_accuracy": probe,
    });
    println!("{report}");
    Ok(())
}

fn export(args: &ExportArgs) -> Result<()> {
    let encoder = load_checkpoint(&args.checkpoint)?;
    let data = load_dataset(&args.data, args.format.map(DataFormat::from))?;
    let bank = embed_dataset(&encoder, &data)?;
    export_embeddings(&bank, &args.out)?;
    eprintln!("wrote {} x {} embeddings to {}", bank.count(), bank.dim(), args.out.display());
    Ok(())
}

fn gen_data(args: &GenArgs) -> Result<()> {
    let spec = SyntheticSpec {
        classes: args.classes,
        train_per_class: args.per_class,
        test_per_class: if args.test_out.is_some() { args.test_per_class } else { 0 },
        dim: args.dim,
        spread: args.spread,
        seed: args.seed,
    };
    let (train, test) = spec.generate()?;
    train.save(&args.train_out, DataFormat::from_path(&args.train_out))?;
    if let Some(path) = &args.test_out {
        test.save(path, DataFormat::from_path(path))?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args),
        Command::Sweep { run, axis, values } => {
            let config = run.config()?;
            let rows = sweep(&config, axis, values)?;
            print!("{}", summary_csv(axis, &rows)?);
            Ok(())
        }
        Command::Export(args) => export(args),
        Command::GenData(args) => gen_data(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
