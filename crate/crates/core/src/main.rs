use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use car_core::attention::Mechanism;
use car_core::car::{Mode, TrainConfig};
use car_core::config::{load_config, Overrides};
use car_core::graph::{Graph, Split};
use car_core::io::{convert_planetoid, dataset_name, load_dataset, write_dataset, PlanetoidSplit};
use car_core::metrics::{self, run_node_experiment};
use car_core::model::Model;
use car_core::rewire::{rewired_gcn_experiment, write_rewiring_tsv, RewiringSpec};
use car_core::sweep::{run_sweep, workers_from_env, ExperimentSpec, Grid};
use car_core::synth::{generate, SynthParams};
use car_core::{Error, Result};

#[derive(Parser)]
#[command(name = "car", version, about = "Graph attention training with causal attention regularization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its checkpoint and metrics record.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset's test split.
    Eval(EvalArgs),
    /// Run a configuration grid with matched baselines.
    Sweep(SweepArgs),
    /// Prune by attention and retrain GCNs over a threshold sweep.
    Prune(PruneArgs),
    /// Export the edge-wise attention change between two checkpoints.
    Explain(ExplainArgs),
    /// Write a synthetic dataset directory.
    GenSynth(SynthArgs),
    /// Convert Planetoid content/cites files into a dataset directory.
    ConvertPlanetoid(ConvertArgs),
}

#[derive(Args, Default)]
struct OverrideArgs {
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    mechanism: Option<Mechanism>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl OverrideArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            mode: self.mode,
            mechanism: self.mechanism,
            layers: self.layers,
            heads: self.heads,
            hidden: self.hidden,
            lambda: self.lambda,
            rounds: self.rounds,
            temperature: self.temperature,
            lr: self.lr,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Flat JSON file of training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: OverrideArgs,
    /// Output directory for `model.json` and `metrics.jsonl`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON experiment spec; replaces the grid, seed and mode flags.
    #[arg(long, conflicts_with_all = ["seeds", "mode", "mechanisms", "layers", "heads", "hidden", "lambdas", "config"])]
    spec: Option<PathBuf>,
    /// Base training settings for fields the grid does not vary.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    #[arg(long, default_value = "car")]
    mode: Mode,
    #[arg(long, value_delimiter = ',')]
    mechanisms: Option<Vec<Mechanism>>,
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    heads: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    #[arg(long)]
    max_epochs: Option<usize>,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    baseline_model: PathBuf,
    #[arg(long)]
    car_model: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5")]
    thresholds: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 100)]
    gcn_hidden: usize,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Output directory for `rewiring.tsv` and `rewiring_summary.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model_a: PathBuf,
    #[arg(long)]
    model_b: PathBuf,
    #[arg(long, default_value_t = 20)]
    top_k: usize,
    /// TSV destination; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    /// Target edge homophily.
    #[arg(long, default_value_t = 0.5)]
    h: f64,
    #[arg(long, default_value_t = 4.0)]
    mean_degree: f64,
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long)]
    content: PathBuf,
    #[arg(long)]
    cites: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    train_per_class: usize,
    #[arg(long, default_value_t = 500)]
    val: usize,
    #[arg(long, default_value_t = 1000)]
    test: usize,
}

fn load(dir: &PathBuf) -> Result<(String, Graph)> {
    Ok((dataset_name(dir), load_dataset(dir)?))
}

fn train(args: TrainArgs) -> Result<()> {
    let base = match &args.config {
        Some(p) => load_config(p)?,
        None => TrainConfig::default(),
    };
    let config = args.overrides.overrides().apply(base)?;
    let (name, g) = load(&args.data)?;
    let (outcome, record) = run_node_experiment(&name, &g, &config)?;
    fs::create_dir_all(&args.out)?;
    outcome.model.save(&args.out.join("model.json"))?;
    let line = record.to_json_line()?;
    fs::write(args.out.join("metrics.jsonl"), format!("{line}\n"))?;
    println!("{line}");
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let (_, g) = load(&args.data)?;
    let model = Model::load(&args.model)?;
    let out = model.node_forward(&g, &g.full_mask())?;
    let test = g.nodes_in(Split::Test);
    let mean_kl = match model.mechanism() {
        Some(_) => metrics::mean_label_agreement_kl(&model, &g, &test).ok(),
        None => None,
    };
    let report = serde_json::json!({
        "test_accuracy": metrics::accuracy(&out.probs, g.labels(), &test)?,
        "test_loss": metrics::mean_loss(&out.probs, g.labels(), &test)?,
        "mean_kl": mean_kl,
    });
    println!("{report}");
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::InvalidArgument(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<ExperimentSpec>(&text)?
        }
        None => {
            let full = Grid::full();
            ExperimentSpec {
                grid: Grid {
                    mechanisms: args.mechanisms.clone().unwrap_or(full.mechanisms),
                    layers: args.layers.clone().unwrap_or(full.layers),
                    heads: args.heads.clone().unwrap_or(full.heads),
                    hidden: args.hidden.clone().unwrap_or(full.hidden),
                    lambdas: args.lambdas.clone().unwrap_or(full.lambdas),
                },
                seeds: args.seeds.clone(),
                mode: args.mode,
                base: match &args.config {
                    Some(p) => load_config(p)?,
                    None => TrainConfig::default(),
                },
            }
        }
    };
    if let Some(e) = args.max_epochs {
        spec.base.max_epochs = e;
    }
    let (name, g) = load(&args.data)?;
    fs::create_dir_all(&args.out)?;
    let workers = workers_from_env()?;
    let (_, summary) = run_sweep(&name, &g, &spec, workers, &args.out)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn prune(args: PruneArgs) -> Result<()> {
    let (_, g) = load(&args.data)?;
    let baseline = Model::load(&args.baseline_model)?;
    let car = Model::load(&args.car_model)?;
    let mut spec = RewiringSpec {
        thresholds: args.thresholds,
        gcn_hidden: args.gcn_hidden,
        ..RewiringSpec::default()
    };
    if let Some(e) = args.max_epochs {
        spec.max_epochs = e;
    }
    let result = rewired_gcn_experiment(&g, &spec, &baseline, &car, &args.seeds)?;
    fs::create_dir_all(&args.out)?;
    let mut w = std::io::BufWriter::new(fs::File::create(args.out.join("rewiring.tsv"))?);
    write_rewiring_tsv(&result, &mut w)?;
    w.flush()?;
    let summary = serde_json::json!({
        "thresholds": spec.thresholds,
        "seeds": args.seeds,
        "unpruned_accuracy": result.unpruned_accuracy,
        "auc_baseline": result.auc_baseline,
        "auc_car": result.auc_car,
    });
    let text = serde_json::to_string_pretty(&summary)?;
    fs::write(args.out.join("rewiring_summary.json"), format!("{text}\n"))?;
    println!("{text}");
    Ok(())
}

fn explain(args: ExplainArgs) -> Result<()> {
    let (_, g) = load(&args.data)?;
    let a = Model::load(&args.model_a)?;
    let b = Model::load(&args.model_b)?;
    let rows = metrics::attention_delta_report(&a, &b, &g, args.top_k)?;
    match &args.out {
        Some(p) => {
            let mut w = std::io::BufWriter::new(fs::File::create(p)?);
            metrics::write_delta_tsv(&rows, &mut w)?;
            w.flush()?;
        }
        None => metrics::write_delta_tsv(&rows, &mut std::io::stdout().lock())?,
    }
    Ok(())
}

fn gen_synth(args: SynthArgs) -> Result<()> {
    let params = SynthParams {
        num_nodes: args.n,
        num_classes: args.classes,
        homophily: args.h,
        mean_degree: args.mean_degree,
        feature_dim: args.feature_dim,
        noise: args.noise,
        ..SynthParams::default()
    };
    let g = generate(&params, args.seed)?;
    write_dataset(&args.out, &g)?;
    println!(
        "{}",
        serde_json::json!({
            "nodes": g.num_nodes(),
            "edges": g.num_edges(),
            "classes": g.num_classes(),
            "homophily": g.edge_homophily(None)?,
        })
    );
    Ok(())
}

fn convert(args: ConvertArgs) -> Result<()> {
    let split = PlanetoidSplit {
        train_per_class: args.train_per_class,
        val: args.val,
        test: args.test,
    };
    let report = convert_planetoid(&args.content, &args.cites, &args.out, split, args.seed)?;
    let g = load_dataset(&args.out)?;
    println!(
        "{}",
        serde_json::json!({
            "nodes": report.num_nodes,
            "edges": report.num_edges,
            "classes": report.num_classes,
            "skipped_citations": report.skipped_citations,
            "homophily": g.edge_homophily(None)?,
        })
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Prune(a) => prune(a),
        Command::Explain(a) => explain(a),
        Command::GenSynth(a) => gen_synth(a),
        Command::ConvertPlanetoid(a) => convert(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
