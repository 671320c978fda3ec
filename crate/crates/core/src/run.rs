//! End-to-end runs: config, data preparation, per-seed training and artifacts.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{argmax_rows, ari, f1_scores_with_classes, kmeans, nmi, EvalError};
use crate::hetgraph::{fmt_f64, load_graph_paths, GraphError, GraphPaths, HeteroGraph};
use crate::hypergraph::{build_multiview, HypergraphError, MultiViewHypergraph, ViewOptions};
use crate::metapath::{parse_symmetric, MetaPathError};
use crate::model::{
    node_attention_head, node_attention_view, AttentionMode, FusionMode, GraphInput, Model, ModelConfig, ModelError,
    Residual, ResidualMode,
};
use crate::tensor::{read_checkpoint, write_checkpoint, Matrix, Tape, TensorError};
use crate::trainer::{make_splits, train, EpochRecord, SplitSpec, Splits, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    MetaPath(#[from] MetaPathError),
    #[error(transparent)]
    Hypergraph(#[from] HypergraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Model hyperparameters that are not implied by the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub d_prime: usize,
    pub heads: usize,
    pub attention_mode: AttentionMode,
    pub fusion_mode: FusionMode,
    pub residual_mode: ResidualMode,
    pub dropout: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            d_prime: 64,
            heads: 4,
            attention_mode: AttentionMode::Hadamard,
            fusion_mode: FusionMode::Attention,
            residual_mode: ResidualMode::ProjectX,
            dropout: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSettings {
    pub train_ratio: f64,
    pub val_ratio: Option<f64>,
    pub test_ratio: Option<f64>,
}

impl Default for SplitSettings {
    fn default() -> Self {
        Self {
            train_ratio: 0.8,
            val_ratio: None,
            test_ratio: None,
        }
    }
}

impl SplitSettings {
    pub fn spec(&self, seed: u64) -> SplitSpec {
        SplitSpec {
            train_ratio: self.train_ratio,
            val_ratio: self.val_ratio,
            test_ratio: self.test_ratio,
            seed,
        }
    }
}

fn default_seeds() -> usize {
    5
}

/// Run configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Directory holding `nodes.tsv`, `edges.tsv`, `features.csv`, `labels.tsv`
    /// and `schema.json`. Relative paths resolve against the config file.
    pub data_dir: PathBuf,
    pub metapaths: Vec<String>,
    #[serde(default)]
    pub views: ViewOptions,
    #[serde(default)]
    pub model: ModelSettings,
    #[serde(default)]
    pub split: SplitSettings,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_seeds")]
    pub num_seeds: usize,
    /// Run `i` uses seed `seed + i` for initialisation, splits and clustering.
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    pub fn new(data_dir: impl Into<PathBuf>, metapaths: &[&str]) -> Self {
        Self {
            data_dir: data_dir.into(),
            metapaths: metapaths.iter().map(|s| s.to_string()).collect(),
            views: ViewOptions::default(),
            model: ModelSettings::default(),
            split: SplitSettings::default(),
            train: TrainConfig::default(),
            num_seeds: default_seeds(),
            seed: 0,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, RunError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| RunError::ConfigInvalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::from_json(&text)?;
        if cfg.data_dir.is_relative() {
            if let Some(parent) = path.parent() {
                cfg.data_dir = parent.join(&cfg.data_dir);
            }
        }
        Ok(cfg)
    }

    /// Checks everything that can be checked without the data.
    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::ConfigInvalid(m));
        if self.metapaths.is_empty() {
            return bad("metapaths must list at least one meta-path".into());
        }
        if self.num_seeds == 0 {
            return bad("num_seeds must be positive".into());
        }
        let m = &self.model;
        if m.d_prime == 0 || m.heads == 0 || !m.d_prime.is_multiple_of(m.heads) {
            return bad(format!("d_prime {} must be a positive multiple of heads {}", m.d_prime, m.heads));
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return bad(format!("dropout {} outside [0, 1)", m.dropout));
        }
        if let FusionMode::SingleView(r) = m.fusion_mode {
            if r >= self.metapaths.len() {
                return bad(format!("single_view({r}) with {} meta-paths", self.metapaths.len()));
            }
        }
        if !self.views.hyperedge_weights.is_empty() && self.views.hyperedge_weights.len() != self.metapaths.len() {
            return bad("hyperedge_weights must be empty or have one entry per meta-path".into());
        }
        self.split
            .spec(0)
            .resolved()
            .map_err(|e| RunError::ConfigInvalid(e.to_string()))?;
        self.train.validate().map_err(|e| RunError::ConfigInvalid(e.to_string()))?;
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.num_seeds as u64).map(|i| self.seed.wrapping_add(i)).collect()
    }

    pub fn model_config(&self, prep: &Prepared, seed: u64) -> ModelConfig {
        ModelConfig {
            d: prep.input.x.cols(),
            d_prime: self.model.d_prime,
            heads: self.model.heads,
            num_views: prep.hypergraph.num_views(),
            num_classes: prep.num_classes,
            attention_mode: self.model.attention_mode,
            fusion_mode: self.model.fusion_mode,
            residual_mode: self.model.residual_mode,
            dropout: self.model.dropout,
            seed,
        }
    }
}

/// Graph, views and model input ready for training.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub graph: HeteroGraph,
    pub hypergraph: MultiViewHypergraph,
    pub view_names: Vec<String>,
    pub input: GraphInput,
    pub labels: Vec<Option<usize>>,
    pub num_classes: usize,
    /// Original ids of the target nodes, in row order.
    pub ids: Vec<String>,
}

impl Prepared {
    pub fn from_graph(graph: HeteroGraph, metapaths: &[String], views: &ViewOptions) -> Result<Self, RunError> {
        let paths = metapaths
            .iter()
            .map(|s| parse_symmetric(s, &graph))
            .collect::<Result<Vec<_>, _>>()?;
        let hypergraph = build_multiview(&graph, &paths, views)?;
        let input = GraphInput::new(graph.features().clone(), hypergraph.normalized_adjacencies())?;
        let labels = graph.labels().to_vec();
        let ids = graph.targets().iter().map(|&v| graph.original_id(v).to_string()).collect();
        Ok(Self {
            num_classes: graph.num_classes(),
            view_names: paths.iter().map(|p| p.name().to_string()).collect(),
            graph,
            hypergraph,
            input,
            labels,
            ids,
        })
    }

    pub fn load(cfg: &RunConfig) -> Result<Self, RunError> {
        let graph = load_graph_paths(&GraphPaths::in_dir(&cfg.data_dir))?;
        Self::from_graph(graph, &cfg.metapaths, &cfg.views)
    }

    fn labeled(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i].is_some()).collect()
    }
}

/// Outcome of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub test_macro_f1: f64,
    pub test_micro_f1: f64,
    pub nmi: f64,
    pub ari: f64,
    pub beta: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub summary: SeedSummary,
    pub model: Model,
    pub splits: Splits,
    pub history: Vec<EpochRecord>,
    pub embeddings: Matrix,
    pub seconds: f64,
}

/// Test macro/micro F1, NMI, ARI, fusion weights and the embeddings.
pub type Scores = (f64, f64, f64, f64, Option<Vec<f64>>, Matrix);

/// Test-split classification and all-labeled-node clustering scores.
pub fn score(
    prep: &Prepared,
    model: &Model,
    splits: &Splits,
    seed: u64,
) -> Result<Scores, RunError> {
    let inf = model.infer(&prep.input)?;
    let preds = argmax_rows(&inf.logits);
    let truth: Vec<usize> = splits.test.iter().map(|&i| prep.labels[i].expect("labeled")).collect();
    let test_pred: Vec<usize> = splits.test.iter().map(|&i| preds[i]).collect();
    let (macro_f1, micro_f1) = f1_scores_with_classes(&test_pred, &truth, prep.num_classes)?;

    let labeled = prep.labeled();
    let z = &inf.z;
    let zl = Matrix::from_fn(labeled.len(), z.cols(), |i, j| z.get(labeled[i], j));
    let lab: Vec<usize> = labeled.iter().map(|&i| prep.labels[i].expect("labeled")).collect();
    let clusters = kmeans(&zl, prep.num_classes.min(labeled.len()), seed)?;
    let nmi_v = nmi(&clusters.assignments, &lab)?;
    let ari_v = ari(&clusters.assignments, &lab)?;
    Ok((macro_f1, micro_f1, nmi_v, ari_v, inf.beta, inf.z))
}

/// Trains and scores one seed, writing artifacts into `out` when given.
pub fn run_seed(prep: &Prepared, cfg: &RunConfig, seed: u64, out: Option<&Path>) -> Result<SeedRun, RunError> {
    let start = Instant::now();
    let splits = make_splits(&prep.labels, &cfg.split.spec(seed))?;
    let mut model = Model::new(cfg.model_config(prep, seed))?;
    let outcome = train(&mut model, &prep.input, &prep.labels, &splits, &cfg.train, |r| {
        log::debug!(
            "seed {seed} epoch {} loss {:.5} val_loss {:.5} val_f1 {:.4}",
            r.epoch,
            r.train_loss,
            r.val_loss,
            r.val_macro_f1
        );
    })?;
    let (test_macro_f1, test_micro_f1, nmi_v, ari_v, beta, embeddings) = score(prep, &model, &splits, seed)?;
    let summary = SeedSummary {
        seed,
        epochs_run: outcome.epochs_run,
        best_epoch: outcome.best_epoch,
        test_macro_f1,
        test_micro_f1,
        nmi: nmi_v,
        ari: ari_v,
        beta,
    };
    let seconds = start.elapsed().as_secs_f64();
    log::info!(
        "seed {seed}: macro-F1 {test_macro_f1:.4} micro-F1 {test_micro_f1:.4} NMI {nmi_v:.4} ({} epochs, {seconds:.1}s)",
        outcome.epochs_run
    );
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        save_model(&model, &dir.join("model.ckpt"))?;
        write_metrics_csv(&outcome.history, prep.hypergraph.num_views(), &dir.join("metrics.csv"))?;
        write_json(&dir.join("summary.json"), &summary)?;
    }
    Ok(SeedRun {
        summary,
        model,
        splits,
        history: outcome.history,
        embeddings,
        seconds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: Vec<SeedSummary>,
    pub mean_test_macro_f1: f64,
    pub mean_test_micro_f1: f64,
    pub mean_nmi: f64,
    pub mean_ari: f64,
    pub mean_beta: Option<Vec<f64>>,
}

impl Aggregate {
    pub fn from_runs(runs: Vec<SeedSummary>) -> Self {
        let n = runs.len().max(1) as f64;
        let mean = |f: fn(&SeedSummary) -> f64| runs.iter().map(f).sum::<f64>() / n;
        let mean_beta = runs.iter().map(|r| r.beta.clone()).collect::<Option<Vec<_>>>().and_then(|bs| {
            let k = bs.first()?.len();
            Some((0..k).map(|r| bs.iter().map(|b| b[r]).sum::<f64>() / n).collect())
        });
        Self {
            mean_test_macro_f1: mean(|r| r.test_macro_f1),
            mean_test_micro_f1: mean(|r| r.test_micro_f1),
            mean_nmi: mean(|r| r.nmi),
            mean_ari: mean(|r| r.ari),
            mean_beta,
            runs,
        }
    }
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn save_model(model: &Model, path: &Path) -> Result<(), RunError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    write_checkpoint(model.params(), BufWriter::new(file))?;
    Ok(())
}

pub fn load_model(cfg: ModelConfig, path: &Path) -> Result<Model, RunError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let store = read_checkpoint(BufReader::new(file))?;
    let mut model = Model::new(cfg)?;
    model.load_params(&store)?;
    Ok(model)
}

/// `epoch,loss,val_f1,beta_1..beta_K`; beta fields are empty without attention fusion.
pub fn write_metrics_csv(history: &[EpochRecord], num_views: usize, path: &Path) -> Result<(), RunError> {
    let mut s = String::from("epoch,loss,val_f1");
    for r in 1..=num_views {
        write!(s, ",beta_{r}").unwrap();
    }
    s.push('\n');
    for rec in history {
        write!(s, "{},{},{}", rec.epoch, fmt_f64(rec.train_loss), fmt_f64(rec.val_macro_f1)).unwrap();
        for r in 0..num_views {
            match &rec.beta {
                Some(b) => write!(s, ",{}", fmt_f64(b[r])).unwrap(),
                None => s.push(','),
            }
        }
        s.push('\n');
    }
    fs::write(path, s).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub n: usize,
    pub median_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub d: usize,
    pub d_prime: usize,
    pub heads: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![256, 512, 1024],
            d: 16,
            d_prime: 64,
            heads: 4,
            repeats: 7,
            seed: 0,
        }
    }
}

/// Times one view of node-level attention (all heads plus the output layer)
/// on random dense inputs; reports the median over `repeats` runs per size.
pub fn bench_scaling(cfg: &BenchConfig) -> Result<Vec<BenchPoint>, RunError> {
    if cfg.heads == 0 || !cfg.d_prime.is_multiple_of(cfg.heads) || cfg.repeats == 0 || cfg.d == 0 {
        return Err(RunError::ConfigInvalid("bench needs heads | d_prime, d > 0 and repeats > 0".into()));
    }
    let hd = cfg.d_prime / cfg.heads;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rand_m = |r: usize, c: usize, s: f64| Matrix::from_fn(r, c, |_, _| rng.gen_range(-s..s));
    let head_w: Vec<[Matrix; 3]> = (0..cfg.heads).map(|_| [0; 3].map(|_| rand_m(hd, hd, 0.5))).collect();
    let w_in = rand_m(cfg.d, cfg.d_prime, 0.5);
    let w_res = rand_m(cfg.d, cfg.d_prime, 0.5);
    let w_out = rand_m(cfg.d_prime, cfg.d_prime, 0.2);
    let b_out = Matrix::zeros(1, cfg.d_prime);
    let mut points = Vec::with_capacity(cfg.sizes.len());
    for &n in &cfg.sizes {
        let x = rand_m(n, cfg.d, 1.0);
        let a = rand_m(n, n, 0.1).map(f64::abs);
        let mut times = Vec::with_capacity(cfg.repeats);
        for _ in 0..cfg.repeats {
            let start = Instant::now();
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let av = t.constant(a.clone());
            let wi = t.constant(w_in.clone());
            let xp = t.matmul(xv, wi)?;
            let mut heads = Vec::with_capacity(cfg.heads);
            for (h, ws) in head_w.iter().enumerate() {
                let xh = t.slice_cols(xp, h * hd, hd)?;
                let w = ws.clone().map(|m| t.constant(m));
                heads.push(node_attention_head(&mut t, xh, av, None, w)?.0);
            }
            let (wr, wo, bo) = (t.constant(w_res.clone()), t.constant(w_out.clone()), t.constant(b_out.clone()));
            let z = node_attention_view(&mut t, xv, &heads, Residual::Project(wr), wo, bo)?;
            std::hint::black_box(t.value(z));
            times.push(start.elapsed().as_secs_f64());
        }
        times.sort_by(f64::total_cmp);
        points.push(BenchPoint {
            n,
            median_seconds: times[times.len() / 2],
        });
    }
    Ok(points)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckCase {
    pub attention_mode: AttentionMode,
    pub fusion_mode: FusionMode,
    pub residual_mode: ResidualMode,
    pub max_rel_error: f64,
}

/// Central-difference check of the classification loss with respect to every
/// parameter of a small model (8 nodes, 2 random views, 2 heads, d = d′ = 4).
pub fn model_grad_check(seed: u64) -> Result<Vec<GradCheckCase>, RunError> {
    use crate::hypergraph::{HypergraphView, ViewMatrices};
    use crate::tensor::grad_check_many;

    let n = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adjs = Vec::new();
    for r in 0..2 {
        let columns: Vec<Vec<usize>> = (0..4)
            .map(|_| {
                let size = rng.gen_range(1..=4);
                (0..size).map(|_| rng.gen_range(0..n)).collect()
            })
            .collect();
        let view = HypergraphView::from_columns(format!("random{r}"), n, columns)?;
        adjs.push(ViewMatrices::compute(&view, Default::default())?.a_norm);
    }
    let x = Matrix::from_fn(n, 4, |_, _| rng.gen_range(-1.0..1.0));
    let input = GraphInput::new(x, adjs)?;
    let targets: Vec<(usize, usize)> = (0..n).map(|i| (i, rng.gen_range(0..3))).collect();

    let mut cases = Vec::new();
    for (attention_mode, fusion_mode, residual_mode) in [
        (AttentionMode::Hadamard, FusionMode::Attention, ResidualMode::ProjectX),
        (AttentionMode::Masked, FusionMode::Attention, ResidualMode::ProjectX),
        (AttentionMode::Hadamard, FusionMode::Concat, ResidualMode::ConcatX),
    ] {
        let model = Model::new(ModelConfig {
            d: 4,
            d_prime: 4,
            heads: 2,
            num_views: 2,
            num_classes: 3,
            attention_mode,
            fusion_mode,
            residual_mode,
            dropout: 0.0,
            seed,
        })?;
        let values: Vec<Matrix> = model.params().iter().map(|p| p.value.clone()).collect();
        let max_rel_error = grad_check_many(
            |t, vars| {
                let bound = model.bind_vars(vars.to_vec());
                let bi = input.bind(t);
                let out = model.forward(t, &bound, &input, &bi, None).map_err(|e| match e {
                    ModelError::Tensor(te) => te,
                    other => TensorError::ShapeMismatch {
                        op: "forward",
                        detail: other.to_string(),
                    },
                })?;
                t.cross_entropy_logits(out.logits, targets.clone())
            },
            &values,
            1e-6,
        )?;
        cases.push(GradCheckCase {
            attention_mode,
            fusion_mode,
            residual_mode,
            max_rel_error,
        });
    }
    Ok(cases)
}
