use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde_json::json;

use mgahhn::eval::export_embeddings;
use mgahhn::hetgraph::GraphError;
use mgahhn::hypergraph::{write_dense_csv, write_incidence};
use mgahhn::run::{
    bench_scaling, load_model, model_grad_check, run_seed, score, seed_dir, write_json, Aggregate, BenchConfig,
    Prepared, RunConfig, RunError, SeedSummary,
};
use mgahhn::synth::{generate_to_dir, SynthConfig, SynthError};
use mgahhn::trainer::make_splits;

const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "mgahhn", version, about = "Multi-view hypergraph attention for heterogeneous graphs")]
struct Cli {
    /// JSON config file for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or file, for `embed`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for independent seeds.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic author/paper/venue graph.
    Synth,
    /// Write the incidence and normalized adjacency of every view.
    BuildHypergraph,
    /// Train over all configured seeds and write checkpoints, metrics and summaries.
    Train,
    /// Score a checkpoint on the test split of one seed.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Data directory, overriding the config.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Export node representations as CSV.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Append the top two principal components.
        #[arg(long)]
        pca: bool,
    },
    /// Finite-difference check of the full model's gradients.
    GradCheck,
    /// Time node-level attention at increasing graph sizes.
    BenchScaling,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| RunError::ConfigInvalid(format!("{}: {e}", path.display())).into())
}

fn require<'a>(opt: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf> {
    opt.as_ref()
        .ok_or_else(|| RunError::ConfigInvalid(format!("--{flag} is required")).into())
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn run_config(cli: &Cli, data: Option<&PathBuf>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(require(&cli.config, "config")?)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(d) = data {
        cfg.data_dir = d.clone();
    }
    Ok(cfg)
}

fn cmd_synth(cli: &Cli) -> Result<()> {
    let mut cfg: SynthConfig = match &cli.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = require(&cli.out, "out")?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let (data, _) = generate_to_dir(&cfg, out)?;
    print_json(&json!({
        "out": out,
        "authors": data.graph.num_targets(),
        "nodes": data.graph.num_nodes(),
        "edges": data.graph.edges().len(),
    }));
    Ok(())
}

fn cmd_build(cli: &Cli) -> Result<()> {
    let cfg = run_config(cli, None)?;
    let out = require(&cli.out, "out")?;
    fs::create_dir_all(out)?;
    let prep = Prepared::load(&cfg)?;
    prep.graph.write_id_map(&out.join("id_map.tsv"))?;
    let mut views = Vec::new();
    for (r, ((view, mats), name)) in prep.hypergraph.views().iter().zip(&prep.view_names).enumerate() {
        let stem = format!("view{}_{name}", r + 1);
        write_incidence(view, &out.join(format!("{stem}.incidence.tsv")))?;
        write_dense_csv(&mats.a_norm, &out.join(format!("{stem}.adjacency.csv")))?;
        views.push(json!({
            "name": name,
            "nodes": view.num_nodes(),
            "hyperedges": view.num_hyperedges(),
        }));
    }
    print_json(&json!({ "views": views }));
    Ok(())
}

fn cmd_train(cli: &Cli) -> Result<()> {
    let cfg = run_config(cli, None)?;
    let out = require(&cli.out, "out")?;
    fs::create_dir_all(out)?;
    let prep = Prepared::load(&cfg)?;
    write_json(&out.join("config.json"), &cfg)?;
    let runs: Vec<SeedSummary> = cfg
        .seeds()
        .into_par_iter()
        .map(|seed| run_seed(&prep, &cfg, seed, Some(&seed_dir(out, seed))).map(|r| r.summary))
        .collect::<Result<_, _>>()?;
    let agg = Aggregate::from_runs(runs);
    write_json(&out.join("summary.json"), &agg)?;
    print_json(&serde_json::to_value(&agg)?);
    Ok(())
}

fn load_for_checkpoint(cli: &Cli, checkpoint: &Path, data: Option<&PathBuf>) -> Result<(RunConfig, Prepared, mgahhn::model::Model)> {
    let cfg = run_config(cli, data)?;
    let prep = Prepared::load(&cfg)?;
    let model = load_model(cfg.model_config(&prep, cfg.seed), checkpoint)?;
    Ok((cfg, prep, model))
}

fn cmd_evaluate(cli: &Cli, checkpoint: &Path, data: Option<&PathBuf>) -> Result<()> {
    let (cfg, prep, model) = load_for_checkpoint(cli, checkpoint, data)?;
    let splits = make_splits(&prep.labels, &cfg.split.spec(cfg.seed))?;
    let (macro_f1, micro_f1, nmi, ari, beta, z) = score(&prep, &model, &splits, cfg.seed)?;
    if let Some(out) = &cli.out {
        fs::create_dir_all(out)?;
        export_embeddings(&z, &prep.ids, &out.join("embeddings.csv"), false)?;
    }
    print_json(&json!({
        "seed": cfg.seed,
        "test_macro_f1": macro_f1,
        "test_micro_f1": micro_f1,
        "nmi": nmi,
        "ari": ari,
        "beta": beta,
    }));
    Ok(())
}

fn cmd_embed(cli: &Cli, checkpoint: &Path, data: Option<&PathBuf>, pca: bool) -> Result<()> {
    let (_, prep, model) = load_for_checkpoint(cli, checkpoint, data)?;
    let out = require(&cli.out, "out")?;
    let z = model.infer(&prep.input)?.z;
    export_embeddings(&z, &prep.ids, out, pca)?;
    print_json(&json!({ "out": out, "rows": z.rows(), "dims": z.cols() }));
    Ok(())
}

fn cmd_grad_check(cli: &Cli) -> Result<bool> {
    let cases = model_grad_check(cli.seed.unwrap_or(0))?;
    let max = cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let pass = max <= GRAD_TOLERANCE;
    print_json(&json!({
        "max_rel_error": max,
        "tolerance": GRAD_TOLERANCE,
        "pass": pass,
        "cases": cases,
    }));
    Ok(pass)
}

fn cmd_bench(cli: &Cli) -> Result<()> {
    let mut cfg: BenchConfig = match &cli.config {
        Some(p) => read_json(p)?,
        None => BenchConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let points = bench_scaling(&cfg)?;
    let ratios: Vec<f64> = points
        .windows(2)
        .map(|w| w[1].median_seconds / w[0].median_seconds)
        .collect();
    let report = json!({ "points": points, "ratios": ratios });
    if let Some(out) = &cli.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("bench.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    }
    print_json(&report);
    Ok(())
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<RunError>() {
            return match e {
                RunError::ConfigInvalid(_) => "config_invalid",
                RunError::Io { .. } => "io",
                RunError::Graph(_) => "graph",
                RunError::MetaPath(_) => "metapath",
                RunError::Hypergraph(_) => "hypergraph",
                RunError::Model(_) => "model",
                RunError::Train(_) => "train",
                RunError::Eval(_) => "eval",
                RunError::Tensor(_) => "tensor",
            };
        }
        if cause.downcast_ref::<SynthError>().is_some() {
            return "synth";
        }
        if cause.downcast_ref::<GraphError>().is_some() {
            return "graph";
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "error"
}

/// The error chain joined with ": ", skipping causes already quoted by their parent.
fn error_message(err: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !msg.ends_with(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg
}

fn report(err: &anyhow::Error) {
    eprintln!("{}", json!({ "error": error_kind(err), "message": error_message(err) }));
}

fn dispatch(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Synth => cmd_synth(cli)?,
        Command::BuildHypergraph => cmd_build(cli)?,
        Command::Train => cmd_train(cli)?,
        Command::Evaluate { checkpoint, data } => cmd_evaluate(cli, checkpoint, data.as_ref())?,
        Command::Embed { checkpoint, data, pca } => cmd_embed(cli, checkpoint, data.as_ref(), *pca)?,
        Command::GradCheck => return cmd_grad_check(cli),
        Command::BenchScaling => cmd_bench(cli)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MGAHHN_LOG", "error")).init();
    if let Some(n) = cli.threads {
        let built = (n > 0)
            .then(|| rayon::ThreadPoolBuilder::new().num_threads(n).build_global().ok())
            .flatten();
        if built.is_none() {
            report(&RunError::ConfigInvalid(format!("--threads {n} is not usable")).into());
            return ExitCode::FAILURE;
        }
    }
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(err) => {
            report(&err);
            ExitCode::FAILURE
        }
    }
}
