//! Measurements shared by the property tests and the acceptance suite.

use mgahhn::hypergraph::{HypergraphView, Normalization, ViewMatrices};
use mgahhn::model::{AttentionMode, FusionMode, GraphInput, Model, ModelConfig, ResidualMode};
use mgahhn::tensor::{grad_check_many, Matrix, Tape, TensorError, Var};
use rand::Rng;

use super::{naive_matmul, random_matrix};

pub const FD_STEP: f64 = 1e-6;

fn weighted_sum(t: &mut Tape, out: Var, w: &Matrix) -> Result<Var, TensorError> {
    let w = t.constant(w.clone());
    let p = t.hadamard(out, w)?;
    t.sum_all(p)
}

/// Entries bounded away from zero, so relu has no kink within the probe step.
fn away_from_zero(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let v: f64 = rng.gen_range(0.01..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn random_mask(rng: &mut impl Rng, rows: usize, cols: usize, keep_one: bool) -> Vec<bool> {
    let mut mask: Vec<bool> = (0..rows * cols).map(|_| rng.gen_bool(0.4)).collect();
    if keep_one {
        for i in 0..rows {
            mask[i * cols + rng.gen_range(0..cols)] = false;
        }
    }
    mask
}

/// Worst relative finite-difference error of every tape primitive, each at a
/// freshly drawn shape with both sides at most 8.
pub fn primitive_grad_errors(rng: &mut impl Rng) -> Result<Vec<(&'static str, f64)>, TensorError> {
    let dim = |rng: &mut dyn rand::RngCore| rng.gen_range(1..=8usize);
    let (m, n, k) = (dim(rng), dim(rng), dim(rng));
    let w_mn = random_matrix(rng, m, n, 1.0);
    let mut out = Vec::new();

    let a = random_matrix(rng, m, k, 1.0);
    let b = random_matrix(rng, k, n, 1.0);
    out.push((
        "matmul",
        grad_check_many(|t, v| { let o = t.matmul(v[0], v[1])?; weighted_sum(t, o, &w_mn) }, &[a, b], FD_STEP)?,
    ));

    let a = random_matrix(rng, m, n, 1.0);
    let b = random_matrix(rng, m, n, 1.0);
    out.push((
        "add",
        grad_check_many(|t, v| { let o = t.add(v[0], v[1])?; weighted_sum(t, o, &w_mn) }, &[a.clone(), b.clone()], FD_STEP)?,
    ));
    let bias = random_matrix(rng, 1, n, 1.0);
    out.push((
        "add_row",
        grad_check_many(|t, v| { let o = t.add(v[0], v[1])?; weighted_sum(t, o, &w_mn) }, &[a.clone(), bias], FD_STEP)?,
    ));
    out.push((
        "hadamard",
        grad_check_many(|t, v| { let o = t.hadamard(v[0], v[1])?; weighted_sum(t, o, &w_mn) }, &[a.clone(), b], FD_STEP)?,
    ));
    let s: f64 = rng.gen_range(-2.0..2.0);
    out.push((
        "scale",
        grad_check_many(|t, v| { let o = t.scale(v[0], s)?; weighted_sum(t, o, &w_mn) }, std::slice::from_ref(&a), FD_STEP)?,
    ));
    let sv = random_matrix(rng, 1, 1, 2.0);
    out.push((
        "scale_by",
        grad_check_many(|t, v| { let o = t.scale_by(v[0], v[1])?; weighted_sum(t, o, &w_mn) }, &[a.clone(), sv], FD_STEP)?,
    ));

    let c = random_matrix(rng, m, k, 1.0);
    let w_cat = random_matrix(rng, m, n + k, 1.0);
    out.push((
        "concat_cols",
        grad_check_many(|t, v| { let o = t.concat_cols(&[v[0], v[1]])?; weighted_sum(t, o, &w_cat) }, &[a.clone(), c], FD_STEP)?,
    ));
    let start = rng.gen_range(0..n);
    let len = rng.gen_range(1..=n - start);
    let w_slice = random_matrix(rng, m, len, 1.0);
    out.push((
        "slice_cols",
        grad_check_many(|t, v| { let o = t.slice_cols(v[0], start, len)?; weighted_sum(t, o, &w_slice) }, std::slice::from_ref(&a), FD_STEP)?,
    ));

    out.push((
        "row_softmax",
        grad_check_many(|t, v| { let o = t.row_softmax(v[0])?; weighted_sum(t, o, &w_mn) }, std::slice::from_ref(&a), FD_STEP)?,
    ));
    out.push((
        "tanh",
        grad_check_many(|t, v| { let o = t.tanh(v[0])?; weighted_sum(t, o, &w_mn) }, std::slice::from_ref(&a), FD_STEP)?,
    ));
    let kinked = away_from_zero(rng, m, n);
    out.push((
        "relu",
        grad_check_many(|t, v| { let o = t.relu(v[0])?; weighted_sum(t, o, &w_mn) }, &[kinked], FD_STEP)?,
    ));
    let w_row = random_matrix(rng, 1, n, 1.0);
    out.push((
        "mean_rows",
        grad_check_many(|t, v| { let o = t.mean_rows(v[0])?; weighted_sum(t, o, &w_row) }, std::slice::from_ref(&a), FD_STEP)?,
    ));
    out.push((
        "sum_all",
        grad_check_many(|t, v| { let o = t.tanh(v[0])?; t.sum_all(o) }, std::slice::from_ref(&a), FD_STEP)?,
    ));
    let w_t = random_matrix(rng, n, m, 1.0);
    out.push((
        "transpose",
        grad_check_many(|t, v| { let o = t.transpose(v[0])?; weighted_sum(t, o, &w_t) }, std::slice::from_ref(&a), FD_STEP)?,
    ));
    let mask = random_mask(rng, m, n, false);
    out.push((
        "masked_fill",
        grad_check_many(
            |t, v| { let o = t.masked_fill(v[0], mask.clone(), 0.5)?; weighted_sum(t, o, &w_mn) },
            std::slice::from_ref(&a),
            FD_STEP,
        )?,
    ));
    let mut soft_mask = random_mask(rng, m, n, true);
    if m > 1 {
        // one fully masked row
        soft_mask[..n].iter_mut().for_each(|x| *x = true);
    }
    out.push((
        "masked_softmax",
        grad_check_many(
            |t, v| {
                let o = t.masked_fill(v[0], soft_mask.clone(), f64::NEG_INFINITY)?;
                let o = t.row_softmax(o)?;
                weighted_sum(t, o, &w_mn)
            },
            std::slice::from_ref(&a),
            FD_STEP,
        )?,
    ));
    let (q, kk) = (random_matrix(rng, m, k, 1.0), random_matrix(rng, m, k, 1.0));
    let adj = random_matrix(rng, m, m, 1.0).map(f64::abs);
    let w_mm = random_matrix(rng, m, m, 1.0);
    let scale = 1.0 / (k as f64).sqrt();
    out.push((
        "attention_weights",
        grad_check_many(
            |t, v| { let o = t.attention_weights(v[0], v[1], v[2], scale, None)?; weighted_sum(t, o, &w_mm) },
            &[q.clone(), kk.clone(), adj.clone()],
            FD_STEP,
        )?,
    ));
    let mut att_mask = random_mask(rng, m, m, true);
    if m > 1 {
        att_mask[..m].iter_mut().for_each(|x| *x = true);
    }
    out.push((
        "attention_weights_masked",
        grad_check_many(
            |t, v| {
                let o = t.attention_weights(v[0], v[1], v[2], scale, Some(att_mask.clone()))?;
                weighted_sum(t, o, &w_mm)
            },
            &[q, kk, adj],
            FD_STEP,
        )?,
    ));
    let mut targets = Vec::new();
    for i in 0..m {
        if rng.gen_bool(0.7) {
            targets.push((i, rng.gen_range(0..n)));
        }
    }
    let targets = if targets.is_empty() { vec![(0, 0)] } else { targets };
    out.push((
        "cross_entropy",
        grad_check_many(|t, v| t.cross_entropy_logits(v[0], targets.clone()), &[a], FD_STEP)?,
    ));
    Ok(out)
}

/// Row-wise softmax written out directly, with all-`-inf` rows mapped to zero.
pub fn naive_softmax(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        let row = m.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let s: f64 = exps.iter().sum();
        for (j, e) in exps.iter().enumerate() {
            out.set(i, j, e / s);
        }
    }
    out
}

/// Random hyperedges over `n` nodes, symmetric-normalized.
pub fn random_view_adjacency(rng: &mut impl Rng, n: usize) -> Matrix {
    use rand::seq::index::sample;
    let m = rng.gen_range(1..=n);
    let cols: Vec<Vec<usize>> = (0..m)
        .map(|_| {
            let size = rng.gen_range(1..=n.min(4));
            let mut c = sample(rng, n, size).into_vec();
            c.sort_unstable();
            c
        })
        .collect();
    let view = HypergraphView::from_columns("rand", n, cols).expect("valid columns");
    ViewMatrices::compute(&view, Normalization::Symmetric).expect("valid view").a_norm
}

pub struct ModelCase {
    pub model: Model,
    pub input: GraphInput,
}

#[allow(clippy::too_many_arguments)]
pub fn random_model_case(
    rng: &mut impl Rng,
    n: usize,
    d: usize,
    d_prime: usize,
    heads: usize,
    k: usize,
    attention_mode: AttentionMode,
    fusion_mode: FusionMode,
) -> ModelCase {
    let cfg = ModelConfig {
        d,
        d_prime,
        heads,
        num_views: k,
        num_classes: 3,
        attention_mode,
        fusion_mode,
        residual_mode: ResidualMode::ProjectX,
        dropout: 0.0,
        seed: rng.gen(),
    };
    let x = random_matrix(rng, n, d, 1.0);
    let adjs = (0..k).map(|_| random_view_adjacency(rng, n)).collect();
    ModelCase {
        model: Model::new(cfg).expect("valid config"),
        input: GraphInput::new(x, adjs).expect("square adjacencies"),
    }
}

fn param<'a>(model: &'a Model, name: &str) -> &'a Matrix {
    &model.params().by_name(name).unwrap_or_else(|| panic!("missing {name}")).value
}

fn add_bias(m: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j) + b.get(0, j))
}

/// Output of view `r` computed with plain loops from the named parameters
/// (project-x residual).
pub fn reference_view_output(model: &Model, input: &GraphInput, r: usize) -> Matrix {
    let cfg = model.config();
    let x = &input.x;
    let a = &input.adjs[r];
    let n = x.rows();
    let hd = cfg.d_prime / cfg.heads;
    let xp = add_bias(&naive_matmul(x, param(model, "in_proj.weight")), param(model, "in_proj.bias"));
    let mut cat = Matrix::zeros(n, cfg.d_prime);
    for h in 0..cfg.heads {
        let xh = Matrix::from_fn(n, hd, |i, j| xp.get(i, h * hd + j));
        let q = naive_matmul(&xh, param(model, &format!("view{r}.head{h}.w_q")));
        let k = naive_matmul(&xh, param(model, &format!("view{r}.head{h}.w_k")));
        let v = naive_matmul(&xh, param(model, &format!("view{r}.head{h}.w_v")));
        let scores = Matrix::from_fn(n, n, |i, j| {
            let dot: f64 = (0..hd).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / (hd as f64).sqrt();
            match cfg.attention_mode {
                AttentionMode::Hadamard => dot * a.get(i, j),
                AttentionMode::Masked if a.get(i, j) == 0.0 => f64::NEG_INFINITY,
                AttentionMode::Masked => dot,
            }
        });
        let zh = naive_matmul(&naive_softmax(&scores), &v);
        for i in 0..n {
            for j in 0..hd {
                cat.set(i, h * hd + j, zh.get(i, j));
            }
        }
    }
    let combined = Matrix::from_fn(n, cfg.d_prime, |i, j| {
        cat.get(i, j) + (0..x.cols()).map(|c| x.get(i, c) * param(model, "residual.weight").get(c, j)).sum::<f64>()
    });
    let pre = add_bias(
        &naive_matmul(&combined, param(model, &format!("view{r}.out.weight"))),
        param(model, &format!("view{r}.out.bias")),
    );
    pre.map(|v| v.max(0.0))
}

/// Tape values of one forward pass: per-view outputs, attention maps, fused `Z`, β.
pub struct ForwardValues {
    pub views: Vec<Matrix>,
    pub attention: Vec<Vec<Matrix>>,
    pub z: Matrix,
    pub beta: Option<Vec<f64>>,
}

pub fn forward_values(case: &ModelCase) -> ForwardValues {
    let mut tape = Tape::new();
    let bound = case.model.bind(&mut tape, false);
    let bi = case.input.bind(&mut tape);
    let out = case.model.forward(&mut tape, &bound, &case.input, &bi, None).expect("forward");
    ForwardValues {
        views: out.view_outputs.iter().map(|v| tape.value(*v).clone()).collect(),
        attention: out
            .attention
            .iter()
            .map(|heads| heads.iter().map(|v| tape.value(*v).clone()).collect())
            .collect(),
        z: tape.value(out.z).clone(),
        beta: out.beta.map(|b| tape.value(b).data().to_vec()),
    }
}

/// Largest `|Σ_j α̂_ij - 1|`, skipping rows with nothing admissible under masking.
pub fn attention_row_sum_error(case: &ModelCase) -> f64 {
    let fv = forward_values(case);
    let mut worst = 0.0f64;
    for (r, heads) in fv.attention.iter().enumerate() {
        let mask = case.input.mask(r);
        for attn in heads {
            for i in 0..attn.rows() {
                let n = attn.cols();
                let isolated = mask[i * n..(i + 1) * n].iter().all(|m| *m);
                if case.model.config().attention_mode == AttentionMode::Masked && isolated {
                    continue;
                }
                let s: f64 = attn.row(i).iter().sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
    }
    worst
}

/// `(|Σβ - 1|, min β)`.
pub fn beta_sum_error(case: &ModelCase) -> (f64, f64) {
    let beta = forward_values(case).beta.expect("attention fusion");
    let s: f64 = beta.iter().sum();
    (
        (s - 1.0).abs(),
        beta.iter().cloned().fold(f64::INFINITY, f64::min),
    )
}

/// `(max |Z'[i] - Z[perm[i]]|, max |β' - β|)` after permuting nodes by `perm`.
pub fn permutation_error(case: &ModelCase, perm: &[usize]) -> (f64, f64) {
    let base = case.model.infer(&case.input).expect("infer");
    let x = case.input.x.permute_rows(perm);
    let adjs = case
        .input
        .adjs
        .iter()
        .map(|a| Matrix::from_fn(a.rows(), a.cols(), |i, j| a.get(perm[i], perm[j])))
        .collect();
    let moved = case.model.infer(&GraphInput::new(x, adjs).expect("square")).expect("infer");
    let z_err = moved.z.max_abs_diff(&base.z.permute_rows(perm));
    let beta_err = match (&base.beta, &moved.beta) {
        (Some(a), Some(b)) => a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max),
        _ => 0.0,
    };
    (z_err, beta_err)
}

/// Max gap between the model's per-view outputs and [`reference_view_output`].
pub fn reference_view_error(case: &ModelCase) -> f64 {
    let fv = forward_values(case);
    (0..fv.views.len())
        .map(|r| fv.views[r].max_abs_diff(&reference_view_output(&case.model, &case.input, r)))
        .fold(0.0, f64::max)
}

/// For a one-view model: `(max |Z - Z_1|, |β_1 - 1|)`.
pub fn single_view_fusion_error(case: &ModelCase) -> (f64, f64) {
    let fv = forward_values(case);
    let beta = fv.beta.expect("attention fusion");
    (fv.z.max_abs_diff(&fv.views[0]), (beta[0] - 1.0).abs())
}

/// Macro-F1 computed from per-class counts, with absent classes scoring zero.
pub fn macro_f1_oracle(pred: &[usize], truth: &[usize], num_classes: usize) -> f64 {
    let mut total = 0.0;
    for c in 0..num_classes {
        let tp = pred.iter().zip(truth).filter(|(p, t)| **p == c && **t == c).count() as f64;
        let fp = pred.iter().zip(truth).filter(|(p, t)| **p == c && **t != c).count() as f64;
        let fnn = pred.iter().zip(truth).filter(|(p, t)| **p != c && **t == c).count() as f64;
        if tp > 0.0 {
            total += 2.0 * tp / (2.0 * tp + fp + fnn);
        }
    }
    total / num_classes as f64
}

/// Multinomial logistic regression on standardized features, trained by full-batch
/// gradient descent on `train`; returns test Macro-F1.
pub fn logistic_baseline(x: &Matrix, labels: &[usize], train: &[usize], test: &[usize], num_classes: usize) -> f64 {
    let (n, d) = x.shape();
    let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x.get(i, j)).sum::<f64>() / n as f64).collect();
    let sd: Vec<f64> = (0..d)
        .map(|j| ((0..n).map(|i| (x.get(i, j) - mean[j]).powi(2)).sum::<f64>() / n as f64).sqrt().max(1e-12))
        .collect();
    let xs = Matrix::from_fn(n, d, |i, j| (x.get(i, j) - mean[j]) / sd[j]);
    let mut w = vec![vec![0.0; num_classes]; d + 1];
    let logits = |w: &Vec<Vec<f64>>, i: usize| -> Vec<f64> {
        (0..num_classes)
            .map(|c| w[d][c] + (0..d).map(|j| xs.get(i, j) * w[j][c]).sum::<f64>())
            .collect()
    };
    for _ in 0..500 {
        let mut grad = vec![vec![0.0; num_classes]; d + 1];
        for &i in train {
            let l = logits(&w, i);
            let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = l.iter().map(|v| (v - max).exp()).collect();
            let s: f64 = e.iter().sum();
            for (c, ec) in e.iter().enumerate() {
                let g = ec / s - if labels[i] == c { 1.0 } else { 0.0 };
                for (j, row) in grad.iter_mut().take(d).enumerate() {
                    row[c] += g * xs.get(i, j);
                }
                grad[d][c] += g;
            }
        }
        for j in 0..=d {
            for c in 0..num_classes {
                w[j][c] -= 0.5 * grad[j][c] / train.len() as f64;
            }
        }
    }
    let pred: Vec<usize> = test
        .iter()
        .map(|&i| {
            let l = logits(&w, i);
            (0..num_classes).max_by(|a, b| l[*a].total_cmp(&l[*b])).expect("classes")
        })
        .collect();
    let truth: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
    macro_f1_oracle(&pred, &truth, num_classes)
}

/// Generates the synthetic graph twice and trains seed `seed` twice from the
/// written files; returns whether checkpoints and metrics files match byte for byte.
pub fn twin_runs_identical(synth: &mgahhn::synth::SynthConfig, cfg: &mgahhn::run::RunConfig, seed: u64) -> (bool, bool) {
    use mgahhn::run::{run_seed, Prepared, RunConfig};
    let root = tempfile::tempdir().expect("tempdir");
    let mut outputs = Vec::new();
    for twin in 0..2 {
        let data_dir = root.path().join(format!("data{twin}"));
        mgahhn::synth::generate_to_dir(synth, &data_dir).expect("synth");
        let cfg = RunConfig { data_dir, ..cfg.clone() };
        let prep = Prepared::load(&cfg).expect("prepare");
        let out = root.path().join(format!("run{twin}"));
        run_seed(&prep, &cfg, seed, Some(&out)).expect("run");
        let read = |name: &str| std::fs::read(out.join(name)).expect("artifact");
        outputs.push((read("model.ckpt"), read("metrics.csv")));
    }
    (outputs[0].0 == outputs[1].0, outputs[0].1 == outputs[1].1)
}
