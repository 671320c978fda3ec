//! Per-view hypergraph incidence, degree and (normalized) adjacency matrices.
//!
//! One view per symmetric meta-path: every center-type node whose reach set has
//! at least `min_hyperedge_size` targets becomes a hyperedge (column). The
//! node-by-node adjacency is `A = H W_e D_e^{-1} H^T` and the default
//! normalization is `D_v^{-1/2} A D_v^{-1/2}`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hetgraph::{fmt_f64, HeteroGraph, NodeId, TypeId};
use crate::metapath::{reach_targets, MetaPathError, SymmetricMetaPath};
use crate::tensor::Matrix;

#[derive(Debug, Error)]
pub enum HypergraphError {
    #[error("view `{0}` has no hyperedges")]
    EmptyView(String),
    #[error("hyperedge {0} has zero degree")]
    ZeroDegreeHyperedge(usize),
    #[error("hyperedge degree {0} is not positive")]
    SingularDegree(usize),
    #[error("hyperedge weight {0} must be positive and finite")]
    InvalidWeight(f64),
    #[error("invalid incidence: {0}")]
    InvalidIncidence(String),
    #[error("views disagree on node count: {0} vs {1}")]
    InconsistentViews(usize, usize),
    #[error("a multi-view hypergraph needs at least one view")]
    NoViews,
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    MetaPath(#[from] MetaPathError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Incidence structure of one hyperedge type, stored column-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct HypergraphView {
    pub name: String,
    pub hyperedge_type: Option<TypeId>,
    num_nodes: usize,
    columns: Vec<Vec<usize>>,
    weights: Vec<f64>,
    centers: Vec<Option<NodeId>>,
}

impl HypergraphView {
    /// Builds a view from explicit member lists (target-local indices).
    pub fn from_columns(
        name: impl Into<String>,
        num_nodes: usize,
        columns: Vec<Vec<usize>>,
    ) -> Result<Self, HypergraphError> {
        let name = name.into();
        if columns.is_empty() {
            return Err(HypergraphError::EmptyView(name));
        }
        let mut cleaned = Vec::with_capacity(columns.len());
        for (e, mut col) in columns.into_iter().enumerate() {
            col.sort_unstable();
            col.dedup();
            if col.is_empty() {
                return Err(HypergraphError::ZeroDegreeHyperedge(e));
            }
            if let Some(&v) = col.iter().find(|&&v| v >= num_nodes) {
                return Err(HypergraphError::InvalidIncidence(format!(
                    "node {v} out of range for {num_nodes} nodes"
                )));
            }
            cleaned.push(col);
        }
        let m = cleaned.len();
        Ok(Self {
            name,
            hyperedge_type: None,
            num_nodes,
            columns: cleaned,
            weights: vec![1.0; m],
            centers: vec![None; m],
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_hyperedges(&self) -> usize {
        self.columns.len()
    }

    /// Members of hyperedge `e`, sorted.
    pub fn column(&self, e: usize) -> &[usize] {
        &self.columns[e]
    }

    pub fn columns(&self) -> &[Vec<usize>] {
        &self.columns
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Identifier node behind each column, when built from a graph.
    pub fn centers(&self) -> &[Option<NodeId>] {
        &self.centers
    }

    pub fn set_weights(&mut self, weights: Vec<f64>) -> Result<(), HypergraphError> {
        if weights.len() != self.columns.len() {
            return Err(HypergraphError::InvalidIncidence(format!(
                "{} weights for {} hyperedges",
                weights.len(),
                self.columns.len()
            )));
        }
        if let Some(&w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(HypergraphError::InvalidWeight(w));
        }
        self.weights = weights;
        Ok(())
    }

    pub fn set_uniform_weight(&mut self, w: f64) -> Result<(), HypergraphError> {
        self.set_weights(vec![w; self.columns.len()])
    }

    /// Dense 0/1 incidence matrix `H` (N x M).
    pub fn incidence_dense(&self) -> Matrix {
        let mut h = Matrix::zeros(self.num_nodes, self.columns.len());
        for (e, col) in self.columns.iter().enumerate() {
            for &v in col {
                h.set(v, e, 1.0);
            }
        }
        h
    }

    /// Hyperedges incident to each node.
    pub fn node_memberships(&self) -> Vec<Vec<usize>> {
        let mut rows = vec![Vec::new(); self.num_nodes];
        for (e, col) in self.columns.iter().enumerate() {
            for &v in col {
                rows[v].push(e);
            }
        }
        rows
    }

    /// Applies a node relabeling: node `v` becomes `perm_inv[v]`.
    pub fn relabel(&self, perm_inv: &[usize]) -> HypergraphView {
        let mut out = self.clone();
        for col in &mut out.columns {
            for v in col.iter_mut() {
                *v = perm_inv[*v];
            }
            col.sort_unstable();
        }
        out
    }
}

/// One column per center-type node whose reach set has at least `min_hyperedge_size` members.
pub fn build_view(
    g: &HeteroGraph,
    smp: &SymmetricMetaPath,
    min_hyperedge_size: usize,
) -> Result<HypergraphView, HypergraphError> {
    let min_size = min_hyperedge_size.max(1);
    let mut columns = Vec::new();
    let mut centers = Vec::new();
    for &c in g.nodes_of_type(smp.center_type()) {
        let members = reach_targets(g, smp, c)?;
        if members.len() >= min_size {
            columns.push(members.iter().map(|v| g.local_index(*v)).collect::<Vec<_>>());
            centers.push(Some(c));
        }
    }
    if columns.is_empty() {
        return Err(HypergraphError::EmptyView(smp.name().to_string()));
    }
    let mut view = HypergraphView::from_columns(smp.name(), g.num_targets(), columns)?;
    view.hyperedge_type = Some(smp.center_type());
    view.centers = centers;
    Ok(view)
}

/// `(D_e, D_v)`: hyperedge sizes and weighted node degrees.
pub fn degrees(view: &HypergraphView) -> (Vec<f64>, Vec<f64>) {
    let d_e: Vec<f64> = view.columns.iter().map(|c| c.len() as f64).collect();
    let mut d_v = vec![0.0; view.num_nodes];
    for (col, w) in view.columns.iter().zip(&view.weights) {
        for &v in col {
            d_v[v] += w;
        }
    }
    (d_e, d_v)
}

/// `A = H · W_e · D_e^{-1} · H^T` (N x N), computed as a sparse row product.
pub fn adjacency(view: &HypergraphView, d_e: &[f64]) -> Result<Matrix, HypergraphError> {
    if let Some(e) = d_e.iter().position(|d| d.is_nan() || *d <= 0.0) {
        return Err(HypergraphError::SingularDegree(e));
    }
    let scale: Vec<f64> = view.weights.iter().zip(d_e).map(|(w, d)| w / d).collect();
    let n = view.num_nodes;
    let mut a = Matrix::zeros(n, n);
    // row i of H·S is sparse over the hyperedges containing i; multiply it into H^T
    for (i, edges) in view.node_memberships().iter().enumerate() {
        let row = a.row_mut(i);
        for &e in edges {
            for &j in &view.columns[e] {
                row[j] += scale[e];
            }
        }
    }
    Ok(a)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `D_v^{-1/2} A D_v^{-1/2}`
    #[default]
    Symmetric,
    /// `D_v^{-1/2} A D_v^{+1/2}`
    Asymmetric,
}

/// Degree-normalizes `A`. Nodes with zero degree get zero rows and columns.
pub fn normalize_adjacency(a: &Matrix, d_v: &[f64], mode: Normalization) -> Matrix {
    let inv_sqrt: Vec<f64> = d_v
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    let right: Vec<f64> = match mode {
        Normalization::Symmetric => inv_sqrt.clone(),
        Normalization::Asymmetric => d_v
            .iter()
            .map(|&d| if d > 0.0 { d.sqrt() } else { 0.0 })
            .collect(),
    };
    Matrix::from_fn(a.rows(), a.cols(), |i, j| inv_sqrt[i] * a.get(i, j) * right[j])
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewMatrices {
    pub d_e: Vec<f64>,
    pub d_v: Vec<f64>,
    pub a: Matrix,
    pub a_norm: Matrix,
}

impl ViewMatrices {
    pub fn compute(view: &HypergraphView, mode: Normalization) -> Result<Self, HypergraphError> {
        let (d_e, d_v) = degrees(view);
        let a = adjacency(view, &d_e)?;
        let a_norm = normalize_adjacency(&a, &d_v, mode);
        Ok(Self { d_e, d_v, a, a_norm })
    }
}

/// K views over the same N target nodes.
#[derive(Debug, Clone)]
pub struct MultiViewHypergraph {
    views: Vec<(HypergraphView, ViewMatrices)>,
}

impl MultiViewHypergraph {
    pub fn new(views: Vec<(HypergraphView, ViewMatrices)>) -> Result<Self, HypergraphError> {
        let first = views.first().ok_or(HypergraphError::NoViews)?.0.num_nodes();
        for (v, m) in &views {
            if v.num_nodes() != first {
                return Err(HypergraphError::InconsistentViews(first, v.num_nodes()));
            }
            if m.a_norm.shape() != (first, first) {
                return Err(HypergraphError::InconsistentViews(first, m.a_norm.rows()));
            }
        }
        Ok(Self { views })
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.views[0].0.num_nodes()
    }

    pub fn views(&self) -> &[(HypergraphView, ViewMatrices)] {
        &self.views
    }

    /// Normalized adjacency of every view, in view order.
    pub fn normalized_adjacencies(&self) -> Vec<Matrix> {
        self.views.iter().map(|(_, m)| m.a_norm.clone()).collect()
    }
}

/// Options shared by every view of a [`MultiViewHypergraph`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewOptions {
    pub min_hyperedge_size: usize,
    pub normalization: Normalization,
    /// One scalar weight per view; empty means all ones.
    pub hyperedge_weights: Vec<f64>,
}

impl Default for ViewOptions {
    fn default() -> Self {
        Self {
            min_hyperedge_size: 1,
            normalization: Normalization::Symmetric,
            hyperedge_weights: Vec::new(),
        }
    }
}

pub fn build_multiview(
    g: &HeteroGraph,
    paths: &[SymmetricMetaPath],
    opts: &ViewOptions,
) -> Result<MultiViewHypergraph, HypergraphError> {
    let mut views = Vec::with_capacity(paths.len());
    for (r, smp) in paths.iter().enumerate() {
        let mut view = build_view(g, smp, opts.min_hyperedge_size)?;
        if let Some(&w) = opts.hyperedge_weights.get(r) {
            view.set_uniform_weight(w)?;
        }
        let mats = ViewMatrices::compute(&view, opts.normalization)?;
        views.push((view, mats));
    }
    MultiViewHypergraph::new(views)
}

/// Writes `N<TAB>M` followed by one `v_id<TAB>e_col` line per nonzero.
pub fn write_incidence(view: &HypergraphView, path: &Path) -> Result<(), HypergraphError> {
    let mut out = String::new();
    let _ = writeln!(out, "{}\t{}", view.num_nodes, view.columns.len());
    for (v, edges) in view.node_memberships().iter().enumerate() {
        for e in edges {
            let _ = writeln!(out, "{v}\t{e}");
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads the format of [`write_incidence`] back into a view named after the file.
pub fn read_incidence(path: &Path) -> Result<HypergraphView, HypergraphError> {
    let text = fs::read_to_string(path)?;
    let malformed = |line: usize, message: String| HypergraphError::Malformed {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| malformed(1, "missing header".into()))?;
    let parse_pair = |i: usize, l: &str| -> Result<(usize, usize), HypergraphError> {
        let mut it = l.split('\t').map(|s| s.trim().parse::<usize>());
        match (it.next(), it.next(), it.next()) {
            (Some(Ok(a)), Some(Ok(b)), None) => Ok((a, b)),
            _ => Err(malformed(i + 1, format!("expected two integers, got `{l}`"))),
        }
    };
    let (n, m) = parse_pair(0, header)?;
    let mut columns = vec![Vec::new(); m];
    for (i, l) in lines {
        let (v, e) = parse_pair(i, l)?;
        if v >= n || e >= m {
            return Err(malformed(i + 1, format!("entry ({v}, {e}) outside {n}x{m}")));
        }
        columns[e].push(v);
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    HypergraphView::from_columns(name, n, columns)
}

/// Dense matrix as CSV with round-trip float formatting.
pub fn write_dense_csv(m: &Matrix, path: &Path) -> Result<(), HypergraphError> {
    let mut out = String::new();
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| fmt_f64(*v)).collect();
        let _ = writeln!(out, "{}", row.join(","));
    }
    fs::write(path, out)?;
    Ok(())
}
