//! Independent oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

pub mod checks;

use std::collections::{BTreeMap, BTreeSet};

use mgahhn::hetgraph::{EdgeTypeDecl, GraphRecords, HeteroGraph, TypeSchema};
use mgahhn::tensor::Matrix;
use rand::Rng;

/// A random typed graph kept alongside its raw records.
pub struct RandomGraph {
    pub graph: HeteroGraph,
    pub num_types: usize,
    /// Type of node `i` (file order).
    pub node_types: Vec<usize>,
    /// `(src, dst, edge_type)` by node index.
    pub edges: Vec<(usize, usize, usize)>,
    /// `(src_type, dst_type)` per edge type.
    pub edge_decls: Vec<(usize, usize)>,
}

pub fn type_name(t: usize) -> String {
    format!("T{t}")
}

pub fn edge_name(e: usize) -> String {
    format!("e{e}")
}

/// Up to `max_nodes` nodes over 1 to 3 types; type `T0` is the target.
pub fn random_graph(rng: &mut impl Rng, max_nodes: usize) -> RandomGraph {
    let num_types = rng.gen_range(1..=3);
    let mut edge_decls = Vec::new();
    for a in 0..num_types {
        for b in a..num_types {
            if rng.gen_bool(0.7) {
                edge_decls.push((a, b));
            }
        }
    }
    if !edge_decls.iter().any(|&(a, b)| a == 0 || b == 0) {
        edge_decls.push((0, rng.gen_range(0..num_types)));
    }
    let n = rng.gen_range(num_types.max(2)..=max_nodes);
    let mut node_types: Vec<usize> = (0..n).map(|_| rng.gen_range(0..num_types)).collect();
    node_types[0] = 0;
    let density = rng.gen_range(0.02..0.25);
    let mut edges = Vec::new();
    for (e, &(a, b)) in edge_decls.iter().enumerate() {
        for s in (0..n).filter(|&i| node_types[i] == a) {
            for d in (0..n).filter(|&i| node_types[i] == b) {
                if rng.gen_bool(density) {
                    edges.push((s, d, e));
                }
            }
        }
    }
    assemble(num_types, node_types, edges, edge_decls)
}

/// Builds the graph for raw records; edges are passed to the loader in the given order.
pub fn assemble(
    num_types: usize,
    node_types: Vec<usize>,
    edges: Vec<(usize, usize, usize)>,
    edge_decls: Vec<(usize, usize)>,
) -> RandomGraph {
    let n = node_types.len();
    let schema = TypeSchema {
        node_types: (0..num_types).map(type_name).collect(),
        edge_types: edge_decls
            .iter()
            .enumerate()
            .map(|(e, &(a, b))| EdgeTypeDecl {
                name: edge_name(e),
                src: type_name(a),
                dst: type_name(b),
            })
            .collect(),
    };
    let records = GraphRecords {
        nodes: (0..n).map(|i| (format!("n{i}"), type_name(node_types[i]))).collect(),
        edges: edges
            .iter()
            .map(|&(s, d, e)| (format!("n{s}"), format!("n{d}"), edge_name(e)))
            .collect(),
        labels: vec![],
    };
    let targets = node_types.iter().filter(|&&t| t == 0).count();
    let features = Matrix::from_fn(targets, 2, |i, j| (i * 2 + j) as f64);
    let graph = HeteroGraph::build(schema, &type_name(0), records, features).expect("valid random graph");
    RandomGraph {
        graph,
        num_types,
        node_types,
        edges,
        edge_decls,
    }
}

/// A random palindromic meta-path of `len` node types starting and ending at `T0`,
/// returned as `(explicit spec, node types, edge types)`.
pub fn random_symmetric_path(
    rng: &mut impl Rng,
    g: &RandomGraph,
    len: usize,
) -> Option<(String, Vec<usize>, Vec<usize>)> {
    assert!(len % 2 == 1);
    let half = len / 2;
    let mut types = vec![0];
    let mut etypes = Vec::new();
    for _ in 0..half {
        let cur = *types.last().unwrap();
        let options: Vec<(usize, usize)> = g
            .edge_decls
            .iter()
            .enumerate()
            .filter_map(|(e, &(a, b))| {
                if a == cur {
                    Some((e, b))
                } else if b == cur {
                    Some((e, a))
                } else {
                    None
                }
            })
            .collect();
        if options.is_empty() {
            return None;
        }
        let (e, next) = options[rng.gen_range(0..options.len())];
        etypes.push(e);
        types.push(next);
    }
    let mut full_types = types.clone();
    full_types.extend(types[..half].iter().rev());
    let mut full_edges = etypes.clone();
    full_edges.extend(etypes.iter().rev());
    let mut spec = type_name(full_types[0]);
    for i in 0..full_edges.len() {
        spec.push('-');
        spec.push_str(&edge_name(full_edges[i]));
        spec.push('-');
        spec.push_str(&type_name(full_types[i + 1]));
    }
    Some((spec, full_types, full_edges))
}

/// Enumerates every walk matching the meta-path and collects, per center node,
/// the set of endpoint nodes (as target-local indices).
pub fn enumerate_hyperedges(g: &RandomGraph, types: &[usize], etypes: &[usize]) -> BTreeMap<usize, BTreeSet<usize>> {
    let n = g.node_types.len();
    let mut local = vec![usize::MAX; n];
    let mut next = 0;
    for (slot, &t) in local.iter_mut().zip(&g.node_types) {
        if t == 0 {
            *slot = next;
            next += 1;
        }
    }
    let step = |from: usize, e: usize, to_type: usize| -> Vec<usize> {
        let mut out = Vec::new();
        for &(s, d, et) in &g.edges {
            if et != e {
                continue;
            }
            if s == from && g.node_types[d] == to_type {
                out.push(d);
            }
            if d == from && g.node_types[s] == to_type {
                out.push(s);
            }
        }
        out
    };
    let center = types.len() / 2;
    let mut result: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    let mut walk = Vec::with_capacity(types.len());
    #[allow(clippy::too_many_arguments)]
    fn dfs(
        pos: usize,
        walk: &mut Vec<usize>,
        types: &[usize],
        etypes: &[usize],
        center: usize,
        local: &[usize],
        step: &dyn Fn(usize, usize, usize) -> Vec<usize>,
        result: &mut BTreeMap<usize, BTreeSet<usize>>,
    ) {
        if pos == types.len() {
            let c = walk[center];
            let entry = result.entry(c).or_default();
            entry.insert(local[walk[0]]);
            entry.insert(local[*walk.last().unwrap()]);
            return;
        }
        let prev = walk[pos - 1];
        for nxt in step(prev, etypes[pos - 1], types[pos]) {
            walk.push(nxt);
            dfs(pos + 1, walk, types, etypes, center, local, step, result);
            walk.pop();
        }
    }
    for start in (0..n).filter(|&i| g.node_types[i] == types[0]) {
        walk.push(start);
        dfs(1, &mut walk, types, etypes, center, &local, &step, &mut result);
        walk.pop();
    }
    result
}

/// `Σ_e (w_e / |e|) h_e h_eᵀ`.
pub fn outer_product_adjacency(columns: &[Vec<usize>], weights: &[f64], n: usize) -> Matrix {
    let mut a = Matrix::zeros(n, n);
    for (col, w) in columns.iter().zip(weights) {
        let h: Vec<f64> = (0..n).map(|i| if col.contains(&i) { 1.0 } else { 0.0 }).collect();
        let s = w / col.len() as f64;
        for i in 0..n {
            for j in 0..n {
                a.set(i, j, a.get(i, j) + s * h[i] * h[j]);
            }
        }
    }
    a
}

pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_fn(a.rows(), b.cols(), |i, j| (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum())
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-scale..scale))
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &Matrix) -> f64 {
    let n = m.rows();
    let dm = nalgebra::DMatrix::from_row_slice(n, n, m.data());
    nalgebra::SymmetricEigen::new(dm).eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Random permutation `perm` with `perm[new] = old`.
pub fn random_permutation(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}
