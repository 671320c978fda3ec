//! Multi-view hypergraph attention network.
//!
//! Per view `r` and head: `Q = X'_h W_Q`, `K = X'_h W_K`, `V = X'_h W_V`,
//! `α = Q Kᵀ / sqrt(h_d)`, `α̂ = softmax_rows(α ⊙ Ā_r)` (or a masked softmax),
//! `Z_head = α̂ V`. Heads are concatenated, combined with the input features
//! and passed through an affine + relu layer to give `Z_r`. Views are fused
//! with `β = softmax_r(qᵀ mean_rows(tanh(Z_r W + b)))`, `Z = Σ β_r Z_r`.
//!
//! All weight matrices are stored as `in x out`, so every affine map is `X W + b`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Matrix, ParamId, ParamStore, Parameter, Tape, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input mismatch: {0}")]
    ShapeMismatch(String),
    #[error("checkpoint does not match the model: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// `softmax(α ⊙ Ā)`: non-incident pairs keep a zero score, not a zero weight.
    #[default]
    Hadamard,
    /// `softmax(α)` restricted to pairs with `Ā ≠ 0`.
    Masked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Attention,
    /// Column-concatenate the view outputs and map back to `d′`.
    Concat,
    /// Use view `r` alone.
    SingleView(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// `relu((cat(heads) + X W_res) W_out + b_out)`
    #[default]
    ProjectX,
    /// `relu(cat(heads, X) W_out + b_out)`
    ConcatX,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub d_prime: usize,
    pub heads: usize,
    pub num_views: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub attention_mode: AttentionMode,
    #[serde(default)]
    pub fusion_mode: FusionMode,
    #[serde(default)]
    pub residual_mode: ResidualMode,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.d == 0 || self.d_prime == 0 {
            return bad("d and d_prime must be positive".into());
        }
        if self.heads == 0 || !self.d_prime.is_multiple_of(self.heads) {
            return bad(format!("d_prime {} not divisible by {} heads", self.d_prime, self.heads));
        }
        if self.num_views == 0 {
            return bad("at least one view is required".into());
        }
        if self.num_classes == 0 {
            return bad("at least one class is required".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if let FusionMode::SingleView(r) = self.fusion_mode {
            if r >= self.num_views {
                return bad(format!("single_view({r}) with {} views", self.num_views));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_prime / self.heads
    }
}

#[derive(Debug, Clone)]
struct ViewParams {
    heads: Vec<[ParamId; 3]>,
    out_w: ParamId,
    out_b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct FusionParams {
    w: ParamId,
    b: ParamId,
    q: ParamId,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    in_w: ParamId,
    in_b: ParamId,
    res_w: Option<ParamId>,
    views: Vec<ViewParams>,
    fusion: Option<FusionParams>,
    concat: Option<(ParamId, ParamId)>,
    cls_w: ParamId,
    cls_b: ParamId,
}

/// Parameters placed on a tape, indexed like the model's [`ParamStore`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Features plus one normalized adjacency per view.
#[derive(Debug, Clone)]
pub struct GraphInput {
    pub x: Matrix,
    pub adjs: Vec<Matrix>,
    masks: Vec<Vec<bool>>,
}

impl GraphInput {
    pub fn new(x: Matrix, adjs: Vec<Matrix>) -> Result<Self, ModelError> {
        let n = x.rows();
        if let Some(a) = adjs.iter().find(|a| a.shape() != (n, n)) {
            return Err(ModelError::ShapeMismatch(format!(
                "adjacency {}x{} for {n} nodes",
                a.rows(),
                a.cols()
            )));
        }
        let masks = adjs
            .iter()
            .map(|a| a.data().iter().map(|v| *v == 0.0).collect())
            .collect();
        Ok(Self { x, adjs, masks })
    }

    pub fn num_nodes(&self) -> usize {
        self.x.rows()
    }

    /// Attention mask for view `r`: true where `Ā_r` is zero.
    pub fn mask(&self, r: usize) -> &[bool] {
        &self.masks[r]
    }

    /// Places features and adjacencies on `tape` as constants.
    pub fn bind(&self, tape: &mut Tape) -> BoundInput {
        BoundInput {
            x: tape.constant(self.x.clone()),
            adjs: self.adjs.iter().map(|a| tape.constant(a.clone())).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundInput {
    pub x: Var,
    pub adjs: Vec<Var>,
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub z: Var,
    pub logits: Var,
    /// `1 x K` view weights (attention fusion only).
    pub beta: Option<Var>,
    /// Per view, per head: the row-normalized attention matrix.
    pub attention: Vec<Vec<Var>>,
    pub view_outputs: Vec<Var>,
}

/// Detached results of a forward pass.
#[derive(Debug, Clone)]
pub struct Inference {
    pub z: Matrix,
    pub logits: Matrix,
    pub beta: Option<Vec<f64>>,
}

/// `X W + b`.
pub fn project_features(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
    let xw = tape.matmul(x, w)?;
    tape.add(xw, b)
}

/// One attention head over `x_head` (`N x h_d`).
///
/// Returns `(Z_head, α̂)`. In masked mode, rows of `α̂` with no admissible
/// entry are zero; [`Tape::masked_rows`] on `α̂` counts them.
pub fn node_attention_head(
    tape: &mut Tape,
    x_head: Var,
    a_norm: Var,
    mask: Option<&[bool]>,
    [w_q, w_k, w_v]: [Var; 3],
) -> Result<(Var, Var), TensorError> {
    let (n, hd) = tape.shape(x_head);
    if tape.shape(a_norm) != (n, n) {
        return Err(TensorError::ShapeMismatch {
            op: "node_attention_head",
            detail: format!("adjacency {:?} for {n} nodes", tape.shape(a_norm)),
        });
    }
    let q = tape.matmul(x_head, w_q)?;
    let k = tape.matmul(x_head, w_k)?;
    let v = tape.matmul(x_head, w_v)?;
    let attn = tape.attention_weights(q, k, a_norm, 1.0 / (hd as f64).sqrt(), mask.map(<[bool]>::to_vec))?;
    let z = tape.matmul(attn, v)?;
    Ok((z, attn))
}

/// How the view output layer sees the raw features.
#[derive(Debug, Clone, Copy)]
pub enum Residual {
    Project(Var),
    Concat,
}

/// `relu(combine(cat(heads), X) W_out + b_out)`.
pub fn node_attention_view(
    tape: &mut Tape,
    x: Var,
    heads: &[Var],
    residual: Residual,
    out_w: Var,
    out_b: Var,
) -> Result<Var, TensorError> {
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(heads)?
    };
    let combined = match residual {
        Residual::Project(w_res) => {
            let xr = tape.matmul(x, w_res)?;
            tape.add(cat, xr)?
        }
        Residual::Concat => tape.concat_cols(&[cat, x])?,
    };
    let pre = project_features(tape, combined, out_w, out_b)?;
    tape.relu(pre)
}

/// Hyperedge-level attention. Returns `(β: 1 x K, Z = Σ_r β_r Z_r)`.
pub fn hyperedge_attention(
    tape: &mut Tape,
    views: &[Var],
    w: Var,
    b: Var,
    q: Var,
) -> Result<(Var, Var), TensorError> {
    let shape = tape.shape(views[0]);
    if views.iter().any(|v| tape.shape(*v) != shape) {
        return Err(TensorError::ShapeMismatch {
            op: "hyperedge_attention",
            detail: "view outputs differ in shape".into(),
        });
    }
    let mut scores = Vec::with_capacity(views.len());
    for &z in views {
        let h = project_features(tape, z, w, b)?;
        let h = tape.tanh(h)?;
        let phi = tape.mean_rows(h)?;
        scores.push(tape.matmul(phi, q)?);
    }
    let logits = tape.concat_cols(&scores)?;
    let beta = tape.row_softmax(logits)?;
    let mut fused = None;
    for (r, &z) in views.iter().enumerate() {
        let br = tape.slice_cols(beta, r, 1)?;
        let term = tape.scale_by(z, br)?;
        fused = Some(match fused {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok((beta, fused.expect("at least one view")))
}

impl Model {
    /// Builds a model with freshly initialised parameters (seeded by `config.seed`).
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, dp, hd) = (config.d, config.d_prime, config.head_dim());
        let mut params = ParamStore::new();

        let in_w = params.push(Parameter::glorot("in_proj.weight", d, dp, &mut rng));
        let in_b = params.push(Parameter::zeros("in_proj.bias", 1, dp));
        let res_w = match config.residual_mode {
            ResidualMode::ProjectX => Some(params.push(Parameter::glorot("residual.weight", d, dp, &mut rng))),
            ResidualMode::ConcatX => None,
        };
        let out_in = match config.residual_mode {
            ResidualMode::ProjectX => dp,
            ResidualMode::ConcatX => dp + d,
        };
        let mut views = Vec::with_capacity(config.num_views);
        for r in 0..config.num_views {
            let heads = (0..config.heads)
                .map(|h| {
                    ["w_q", "w_k", "w_v"].map(|name| {
                        params.push(Parameter::glorot(format!("view{r}.head{h}.{name}"), hd, hd, &mut rng))
                    })
                })
                .collect();
            let out_w = params.push(Parameter::glorot(format!("view{r}.out.weight"), out_in, dp, &mut rng));
            let out_b = params.push(Parameter::zeros(format!("view{r}.out.bias"), 1, dp));
            views.push(ViewParams { heads, out_w, out_b });
        }
        let (fusion, concat) = match config.fusion_mode {
            FusionMode::Attention => {
                let w = params.push(Parameter::glorot("fusion.weight", dp, dp, &mut rng));
                let b = params.push(Parameter::zeros("fusion.bias", 1, dp));
                let q = params.push(Parameter::uniform("fusion.q", dp, 1, 0.1, &mut rng));
                (Some(FusionParams { w, b, q }), None)
            }
            FusionMode::Concat => {
                let k = config.num_views;
                let w = params.push(Parameter::glorot("concat.weight", k * dp, dp, &mut rng));
                let b = params.push(Parameter::zeros("concat.bias", 1, dp));
                (None, Some((w, b)))
            }
            FusionMode::SingleView(_) => (None, None),
        };
        let cls_w = params.push(Parameter::glorot("classifier.weight", dp, config.num_classes, &mut rng));
        let cls_b = params.push(Parameter::zeros("classifier.bias", 1, config.num_classes));
        Ok(Self {
            config,
            params,
            in_w,
            in_b,
            res_w,
            views,
            fusion,
            concat,
            cls_w,
            cls_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Replaces parameter values with those from a checkpoint of the same layout.
    pub fn load_params(&mut self, store: &ParamStore) -> Result<(), ModelError> {
        if store.len() != self.params.len() {
            return Err(ModelError::CheckpointMismatch(format!(
                "{} parameters, model has {}",
                store.len(),
                self.params.len()
            )));
        }
        for (mine, theirs) in self.params.iter().zip(store.iter()) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                return Err(ModelError::CheckpointMismatch(format!(
                    "`{}` {:?} vs `{}` {:?}",
                    mine.name,
                    mine.value.shape(),
                    theirs.name,
                    theirs.value.shape()
                )));
            }
        }
        self.params.copy_values_from(store);
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundParams {
        BoundParams {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), requires_grad))
                .collect(),
        }
    }

    /// Wraps tape handles that already hold this model's parameters, in store order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> BoundParams {
        assert_eq!(vars.len(), self.params.len(), "one handle per parameter");
        BoundParams { vars }
    }

    /// Copies leaf gradients from `tape` into the parameter store.
    pub fn collect_grads(&mut self, tape: &Tape, bound: &BoundParams) {
        for (p, v) in self.params.iter_mut().zip(&bound.vars) {
            p.grad = Some(
                tape.grad(*v)
                    .cloned()
                    .unwrap_or_else(|| Matrix::zeros(p.value.rows(), p.value.cols())),
            );
        }
    }

    fn head_vars(&self, bound: &BoundParams, view: usize, head: usize) -> [Var; 3] {
        self.views[view].heads[head].map(|id| bound.var(id))
    }

    /// Full forward pass. `dropout_rng` enables dropout on the projected features.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        input: &GraphInput,
        bound_input: &BoundInput,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardOutput, ModelError> {
        let cfg = &self.config;
        let (n, d) = input.x.shape();
        if d != cfg.d {
            return Err(ModelError::ShapeMismatch(format!("features have {d} columns, model expects {}", cfg.d)));
        }
        if input.adjs.len() != cfg.num_views {
            return Err(ModelError::ShapeMismatch(format!(
                "{} views, model expects {}",
                input.adjs.len(),
                cfg.num_views
            )));
        }
        let x = bound_input.x;
        let mut xp = project_features(tape, x, bound.var(self.in_w), bound.var(self.in_b))?;
        if let (Some(rng), true) = (dropout_rng, cfg.dropout > 0.0) {
            let keep = 1.0 - cfg.dropout;
            let mask = Matrix::from_fn(n, cfg.d_prime, |_, _| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            });
            let mask = tape.constant(mask);
            xp = tape.hadamard(xp, mask)?;
        }
        let hd = cfg.head_dim();
        let head_inputs: Vec<Var> = if cfg.heads == 1 {
            vec![xp]
        } else {
            (0..cfg.heads)
                .map(|h| tape.slice_cols(xp, h * hd, hd))
                .collect::<Result<_, _>>()?
        };
        let residual = match self.res_w {
            Some(w) => Residual::Project(bound.var(w)),
            None => Residual::Concat,
        };

        let needed: Vec<usize> = match cfg.fusion_mode {
            FusionMode::SingleView(r) => vec![r],
            _ => (0..cfg.num_views).collect(),
        };
        let mut attention = vec![Vec::new(); cfg.num_views];
        let mut view_outputs = vec![None; cfg.num_views];
        for &r in &needed {
            let mask = match cfg.attention_mode {
                AttentionMode::Hadamard => None,
                AttentionMode::Masked => Some(input.mask(r)),
            };
            let mut heads = Vec::with_capacity(cfg.heads);
            for (h, &xh) in head_inputs.iter().enumerate() {
                let (z, attn) =
                    node_attention_head(tape, xh, bound_input.adjs[r], mask, self.head_vars(bound, r, h))?;
                heads.push(z);
                attention[r].push(attn);
            }
            let vp = &self.views[r];
            let zr = node_attention_view(tape, x, &heads, residual, bound.var(vp.out_w), bound.var(vp.out_b))?;
            view_outputs[r] = Some(zr);
        }
        let view_outputs: Vec<Var> = view_outputs.into_iter().flatten().collect();

        let (z, beta) = match cfg.fusion_mode {
            FusionMode::Attention => {
                let f = self.fusion.expect("attention fusion params");
                let (beta, z) =
                    hyperedge_attention(tape, &view_outputs, bound.var(f.w), bound.var(f.b), bound.var(f.q))?;
                (z, Some(beta))
            }
            FusionMode::Concat => {
                let (w, b) = self.concat.expect("concat fusion params");
                let cat = tape.concat_cols(&view_outputs)?;
                (project_features(tape, cat, bound.var(w), bound.var(b))?, None)
            }
            FusionMode::SingleView(_) => (view_outputs[0], None),
        };
        let logits = project_features(tape, z, bound.var(self.cls_w), bound.var(self.cls_b))?;
        Ok(ForwardOutput {
            z,
            logits,
            beta,
            attention,
            view_outputs,
        })
    }

    /// Gradient-free forward pass (dropout off).
    pub fn infer(&self, input: &GraphInput) -> Result<Inference, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let bi = input.bind(&mut tape);
        let out = self.forward(&mut tape, &bound, input, &bi, None)?;
        Ok(Inference {
            z: tape.value(out.z).clone(),
            logits: tape.value(out.logits).clone(),
            beta: out.beta.map(|b| tape.value(b).data().to_vec()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypergraph::{HypergraphView, Normalization, ViewMatrices};
    use crate::tensor::grad_check_many;

    fn cfg(d: usize, dp: usize, heads: usize, k: usize) -> ModelConfig {
        ModelConfig {
            d,
            d_prime: dp,
            heads,
            num_views: k,
            num_classes: 3,
            attention_mode: AttentionMode::Hadamard,
            fusion_mode: FusionMode::Attention,
            residual_mode: ResidualMode::ProjectX,
            dropout: 0.0,
            seed: 7,
        }
    }

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn three_node_adj() -> Matrix {
        let view = HypergraphView::from_columns("t", 3, vec![vec![0, 1], vec![1, 2]]).unwrap();
        ViewMatrices::compute(&view, Normalization::Symmetric).unwrap().a_norm
    }

    #[test]
    fn config_validation() {
        assert!(cfg(4, 6, 4, 1).validate().is_err());
        let mut c = cfg(4, 8, 2, 2);
        c.fusion_mode = FusionMode::SingleView(2);
        assert!(c.validate().is_err());
        c.fusion_mode = FusionMode::SingleView(1);
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn identity_projection() {
        let mut t = Tape::new();
        let xv = rand_matrix(4, 3, 1);
        let x = t.constant(xv.clone());
        let w = t.constant(Matrix::identity(3));
        let b = t.constant(Matrix::zeros(1, 3));
        let y = project_features(&mut t, x, w, b).unwrap();
        assert_eq!(t.value(y), &xv);

        let zero = t.constant(Matrix::zeros(4, 3));
        let bias = t.constant(Matrix::from_rows(&[[1.0, -2.0, 0.5]]));
        let y = project_features(&mut t, zero, w, bias).unwrap();
        for i in 0..4 {
            assert_eq!(t.value(y).row(i), &[1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn projection_matches_triple_loop() {
        let (xv, wv, bv) = (rand_matrix(4, 3, 2), rand_matrix(3, 5, 3), rand_matrix(1, 5, 4));
        let mut t = Tape::new();
        let (x, w, b) = (t.constant(xv.clone()), t.constant(wv.clone()), t.constant(bv.clone()));
        let y = project_features(&mut t, x, w, b).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                let mut s = bv.get(0, j);
                for k in 0..3 {
                    s += xv.get(i, k) * wv.get(k, j);
                }
                assert!((t.value(y).get(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_scores_average_values() {
        // zero query weights make α = 0, so every row attends uniformly
        let n = 4;
        let mut t = Tape::new();
        let x = t.constant(rand_matrix(n, 2, 5));
        let adj = t.constant(Matrix::filled(n, n, 0.3));
        let wq = t.constant(Matrix::zeros(2, 2));
        let wk = t.constant(rand_matrix(2, 2, 6));
        let wv = t.constant(rand_matrix(2, 2, 7));
        let (z, attn) = node_attention_head(&mut t, x, adj, None, [wq, wk, wv]).unwrap();
        for v in t.value(attn).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let vals = t.value(x).matmul(t.value(wv));
        let mut mean = [0.0; 2];
        for i in 0..n {
            mean[0] += vals.get(i, 0) / n as f64;
            mean[1] += vals.get(i, 1) / n as f64;
        }
        for i in 0..n {
            assert!((t.value(z).get(i, 0) - mean[0]).abs() < 1e-12);
            assert!((t.value(z).get(i, 1) - mean[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_adjacency_leaks_uniform_attention() {
        let mut t = Tape::new();
        let x = t.constant(rand_matrix(5, 2, 8));
        let adj = t.constant(Matrix::zeros(5, 5));
        let w = [9, 10, 11].map(|s| t.constant(rand_matrix(2, 2, s)));
        let (_, attn) = node_attention_head(&mut t, x, adj, None, w).unwrap();
        for v in t.value(attn).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_isolated_node_is_flagged() {
        let view = HypergraphView::from_columns("iso", 3, vec![vec![0, 1]]).unwrap();
        let a = ViewMatrices::compute(&view, Normalization::Symmetric).unwrap().a_norm;
        let input = GraphInput::new(rand_matrix(3, 2, 1), vec![a]).unwrap();
        let mut t = Tape::new();
        let x = t.constant(input.x.clone());
        let adj = t.constant(input.adjs[0].clone());
        let w = [2, 3, 4].map(|s| t.constant(rand_matrix(2, 2, s)));
        let (z, attn) = node_attention_head(&mut t, x, adj, Some(input.mask(0)), w).unwrap();
        assert_eq!(t.masked_rows(attn), 1);
        assert_eq!(t.value(z).row(2), &[0.0, 0.0]);
        let attn_v = t.value(attn);
        assert_eq!(attn_v.get(0, 2), 0.0);
        assert!((attn_v.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    /// Recomputes one head with explicit loops.
    fn scripted_head(x: &Matrix, a: &Matrix, wq: &Matrix, wk: &Matrix, wv: &Matrix) -> (Matrix, Matrix) {
        let n = x.rows();
        let hd = wq.cols();
        let lin = |w: &Matrix| {
            Matrix::from_fn(n, hd, |i, j| (0..x.cols()).map(|k| x.get(i, k) * w.get(k, j)).sum())
        };
        let (q, k, v) = (lin(wq), lin(wk), lin(wv));
        let mut attn = Matrix::zeros(n, n);
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| {
                    let dot: f64 = (0..hd).map(|c| q.get(i, c) * k.get(j, c)).sum();
                    dot / (hd as f64).sqrt() * a.get(i, j)
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for (j, ej) in e.iter().enumerate() {
                attn.set(i, j, ej / s);
            }
        }
        let z = Matrix::from_fn(n, hd, |i, c| (0..n).map(|j| attn.get(i, j) * v.get(j, c)).sum());
        (z, attn)
    }

    #[test]
    fn head_matches_scripted_recomputation() {
        let a = three_node_adj();
        let xv = rand_matrix(3, 2, 20);
        let ws = [21, 22, 23].map(|s| rand_matrix(2, 2, s).scale(2.0));
        let (z_ref, attn_ref) = scripted_head(&xv, &a, &ws[0], &ws[1], &ws[2]);
        let mut t = Tape::new();
        let x = t.constant(xv);
        let adj = t.constant(a);
        let w = ws.clone().map(|m| t.constant(m));
        let (z, attn) = node_attention_head(&mut t, x, adj, None, w).unwrap();
        assert!(t.value(z).max_abs_diff(&z_ref) < 1e-10);
        assert!(t.value(attn).max_abs_diff(&attn_ref) < 1e-10);
    }

    #[test]
    fn zero_params_view_gives_relu_bias() {
        let mut t = Tape::new();
        let x = t.constant(rand_matrix(3, 2, 1));
        let adj = t.constant(three_node_adj());
        let zero = t.constant(Matrix::zeros(2, 2));
        let (head, _) = node_attention_head(&mut t, x, adj, None, [zero, zero, zero]).unwrap();
        let w_res = t.constant(Matrix::zeros(2, 2));
        let out_w = t.constant(Matrix::zeros(2, 2));
        let out_b = t.constant(Matrix::from_rows(&[[0.7, -0.4]]));
        let z = node_attention_view(&mut t, x, &[head], Residual::Project(w_res), out_w, out_b).unwrap();
        for i in 0..3 {
            assert_eq!(t.value(z).row(i), &[0.7, 0.0]);
        }
    }

    #[test]
    fn view_layer_matches_scripted_recomputation() {
        let a = three_node_adj();
        let xv = rand_matrix(3, 2, 30);
        let (xp_w, res_w, out_w, out_b) =
            (rand_matrix(2, 4, 31), rand_matrix(2, 4, 32), rand_matrix(4, 4, 33), rand_matrix(1, 4, 34));
        let heads_w: Vec<[Matrix; 3]> =
            (0..2).map(|h| [0, 1, 2].map(|k| rand_matrix(2, 2, 40 + 3 * h + k))).collect();

        // scripted
        let xp = xv.matmul(&xp_w);
        let mut cat = Matrix::zeros(3, 4);
        for (h, [wq, wk, wv]) in heads_w.iter().enumerate() {
            let (z, _) = scripted_head(&xp.cols_slice(2 * h, 2), &a, wq, wk, wv);
            for i in 0..3 {
                for c in 0..2 {
                    cat.set(i, 2 * h + c, z.get(i, c));
                }
            }
        }
        let comb = cat.zip_map(&xv.matmul(&res_w), |p, q| p + q);
        let expected = Matrix::from_fn(3, 4, |i, j| {
            let s: f64 = (0..4).map(|k| comb.get(i, k) * out_w.get(k, j)).sum::<f64>() + out_b.get(0, j);
            s.max(0.0)
        });

        let mut t = Tape::new();
        let x = t.constant(xv);
        let adj = t.constant(a);
        let xpw = t.constant(xp_w);
        let zb = t.constant(Matrix::zeros(1, 4));
        let xp_v = project_features(&mut t, x, xpw, zb).unwrap();
        let mut heads = Vec::new();
        for (h, ws) in heads_w.iter().enumerate() {
            let xh = t.slice_cols(xp_v, 2 * h, 2).unwrap();
            let w = ws.clone().map(|m| t.constant(m));
            heads.push(node_attention_head(&mut t, xh, adj, None, w).unwrap().0);
        }
        let (rw, ow, ob) = (t.constant(res_w), t.constant(out_w), t.constant(out_b));
        let z = node_attention_view(&mut t, x, &heads, Residual::Project(rw), ow, ob).unwrap();
        assert!(t.value(z).max_abs_diff(&expected) < 1e-10);
    }

    #[test]
    fn fusion_examples() {
        let mut t = Tape::new();
        let z1 = t.constant(rand_matrix(4, 3, 1));
        let w = t.constant(rand_matrix(3, 3, 2));
        let b = t.constant(rand_matrix(1, 3, 3));
        let q = t.constant(rand_matrix(3, 1, 4));

        let (beta, z) = hyperedge_attention(&mut t, &[z1], w, b, q).unwrap();
        assert_eq!(t.value(beta).data(), &[1.0]);
        assert_eq!(t.value(z), t.value(z1));

        let z1b = t.constant(t.value(z1).clone());
        let (beta, _) = hyperedge_attention(&mut t, &[z1, z1b], w, b, q).unwrap();
        assert_eq!(t.value(beta).data(), &[0.5, 0.5]);

        let z2 = t.constant(rand_matrix(4, 3, 5));
        let z3 = t.constant(rand_matrix(4, 3, 6));
        let q0 = t.constant(Matrix::zeros(3, 1));
        let (beta, _) = hyperedge_attention(&mut t, &[z1, z2, z3], w, b, q0).unwrap();
        for v in t.value(beta).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_view_matches_attention_for_one_view() {
        let x = rand_matrix(3, 4, 50);
        let input = GraphInput::new(x, vec![three_node_adj()]).unwrap();
        let mut c = cfg(4, 4, 2, 1);
        let att = Model::new(c.clone()).unwrap();
        c.fusion_mode = FusionMode::SingleView(0);
        let mut single = Model::new(c).unwrap();
        // shared parameters are created first and in the same order
        for p in single.params_mut().iter_mut() {
            p.value = att.params().by_name(&p.name).unwrap().value.clone();
        }
        let a = att.infer(&input).unwrap();
        let s = single.infer(&input).unwrap();
        assert_eq!(a.z, s.z);
        assert_eq!(a.beta, Some(vec![1.0]));
    }

    #[test]
    fn full_model_gradients() {
        for (attention_mode, fusion_mode, residual_mode) in [
            (AttentionMode::Hadamard, FusionMode::Attention, ResidualMode::ProjectX),
            (AttentionMode::Masked, FusionMode::Concat, ResidualMode::ConcatX),
            (AttentionMode::Hadamard, FusionMode::SingleView(1), ResidualMode::ProjectX),
        ] {
            let mut c = cfg(4, 4, 2, 2);
            c.attention_mode = attention_mode;
            c.fusion_mode = fusion_mode;
            c.residual_mode = residual_mode;
            let model = Model::new(c).unwrap();
            let a2 = {
                let v = HypergraphView::from_columns("u", 3, vec![vec![0, 2], vec![1, 2]]).unwrap();
                ViewMatrices::compute(&v, Normalization::Symmetric).unwrap().a_norm
            };
            let input = GraphInput::new(rand_matrix(3, 4, 60), vec![three_node_adj(), a2]).unwrap();
            let targets = vec![(0, 0), (1, 2), (2, 1)];
            let values: Vec<Matrix> = model.params().iter().map(|p| p.value.clone()).collect();
            let err = grad_check_many(
                |t, vars| {
                    let bound = BoundParams { vars: vars.to_vec() };
                    let bi = input.bind(t);
                    let out = model.forward(t, &bound, &input, &bi, None).map_err(|e| match e {
                        ModelError::Tensor(te) => te,
                        other => panic!("{other}"),
                    })?;
                    t.cross_entropy_logits(out.logits, targets.clone())
                },
                &values,
                1e-6,
            )
            .unwrap();
            assert!(err <= 1e-4, "{attention_mode:?}/{fusion_mode:?}: {err}");
        }
    }
}
