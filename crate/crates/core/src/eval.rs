//! Classification and clustering metrics, k-means, and embedding export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::hetgraph::fmt_f64;
use crate::tensor::Matrix;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("k = {k} exceeds the {n} points available")]
    KTooLarge { k: usize, n: usize },
    #[error("class {class} outside [0, {num_classes})")]
    ClassOutOfRange { class: usize, num_classes: usize },
    #[error("embeddings: {0}")]
    Malformed(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Index of the maximum of each row (first one on ties).
pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    (0..m.rows())
        .map(|i| {
            let row = m.row(i);
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// `(macro_f1, micro_f1)` with the class count inferred from the data.
pub fn f1_scores(pred: &[usize], truth: &[usize]) -> Result<(f64, f64), EvalError> {
    let c = pred.iter().chain(truth).max().map_or(0, |m| m + 1);
    f1_scores_with_classes(pred, truth, c)
}

/// Macro-F1 averages over all `num_classes` classes; a class with no true
/// positives scores 0.
pub fn f1_scores_with_classes(
    pred: &[usize],
    truth: &[usize],
    num_classes: usize,
) -> Result<(f64, f64), EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch(pred.len(), truth.len()));
    }
    if let Some(&class) = pred.iter().chain(truth).find(|&&c| c >= num_classes) {
        return Err(EvalError::ClassOutOfRange { class, num_classes });
    }
    if num_classes == 0 {
        return Ok((0.0, 0.0));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let f1 = |tp: usize, fp: usize, fn_: usize| {
        let denom = 2 * tp + fp + fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        }
    };
    let macro_f1 = (0..num_classes).map(|c| f1(tp[c], fp[c], fn_[c])).sum::<f64>() / num_classes as f64;
    let micro_f1 = f1(tp.iter().sum(), fp.iter().sum(), fn_.iter().sum());
    Ok((macro_f1, micro_f1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Matrix,
    pub inertia: f64,
    /// Inertia after each assignment step of the winning restart.
    pub inertia_trace: Vec<f64>,
}

pub const KMEANS_RESTARTS: usize = 10;
const KMEANS_MAX_ITER: usize = 300;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn plus_plus_init(z: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = z.rows();
    let mut centroids = Matrix::zeros(k, z.cols());
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).copy_from_slice(z.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(z.row(i), z.row(first))).collect();
    let mut chosen = vec![false; n];
    chosen[first] = true;
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        } else {
            chosen.iter().position(|c| !c).unwrap_or(0)
        };
        chosen[pick] = true;
        centroids.row_mut(c).copy_from_slice(z.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(z.row(i), z.row(pick)));
        }
    }
    centroids
}

fn lloyd(z: &Matrix, mut centroids: Matrix) -> KMeansResult {
    let (n, dim) = z.shape();
    let k = centroids.rows();
    let mut assignments = vec![usize::MAX; n];
    let mut trace = Vec::new();
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        let mut inertia = 0.0;
        for (i, slot) in assignments.iter_mut().enumerate() {
            let (mut best, mut best_d) = (0, f64::INFINITY);
            for c in 0..k {
                let d = sq_dist(z.row(i), centroids.row(c));
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            inertia += best_d;
            if *slot != best {
                *slot = best;
                changed = true;
            }
        }
        trace.push(inertia);
        if !changed {
            break;
        }
        let mut sums = Matrix::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (i, &c) in assignments.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums.row_mut(c).iter_mut().zip(z.row(i)) {
                *s += v;
            }
        }
        for (c, &count) in counts.iter().enumerate() {
            if count > 0 {
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s / count as f64;
                }
            }
        }
    }
    KMeansResult {
        inertia: *trace.last().expect("at least one iteration"),
        assignments,
        centroids,
        inertia_trace: trace,
    }
}

/// Lloyd's algorithm with k-means++ seeding; the lowest-inertia of
/// [`KMEANS_RESTARTS`] restarts is returned.
pub fn kmeans(z: &Matrix, k: usize, seed: u64) -> Result<KMeansResult, EvalError> {
    let n = z.rows();
    if k == 0 || k > n {
        return Err(EvalError::KTooLarge { k, n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..KMEANS_RESTARTS {
        let init = plus_plus_init(z, k, &mut rng);
        let run = lloyd(z, init);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn contingency(a: &[usize], b: &[usize]) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0.0; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1.0;
    }
    let rows = table.iter().map(|r| r.iter().sum()).collect();
    let cols = (0..kb).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    (table, rows, cols)
}

fn entropy(counts: &[f64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let p = c / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information, `I(a; b) / ((H(a) + H(b)) / 2)`.
///
/// Two single-cluster partitions score 1.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Ok(1.0);
    }
    let n = a.len() as f64;
    let (table, rows, cols) = contingency(a, b);
    let (ha, hb) = (entropy(&rows, n), entropy(&cols, n));
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij > 0.0 {
                mi += nij / n * (n * nij / (rows[i] * cols[j])).ln();
            }
        }
    }
    Ok((mi / ((ha + hb) / 2.0)).clamp(0.0, 1.0))
}

/// Adjusted Rand index. Degenerate cases where the expected index equals the
/// maximum score 1.
pub fn ari(a: &[usize], b: &[usize]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    let comb2 = |x: f64| x * (x - 1.0) / 2.0;
    let n = a.len() as f64;
    let (table, rows, cols) = contingency(a, b);
    let index: f64 = table.iter().flatten().map(|&x| comb2(x)).sum();
    let sa: f64 = rows.iter().map(|&x| comb2(x)).sum();
    let sb: f64 = cols.iter().map(|&x| comb2(x)).sum();
    let total = comb2(n);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sa * sb / total;
    let max = (sa + sb) / 2.0;
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Projects the rows of `z` onto the top-two principal components.
///
/// Each component's sign is fixed so that its largest-magnitude loading is positive.
pub fn pca_2d(z: &Matrix) -> Matrix {
    let (n, d) = z.shape();
    let mut out = Matrix::zeros(n, 2);
    if n == 0 || d == 0 {
        return out;
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(z.row(i)) {
            *m += v / n as f64;
        }
    }
    let centered = Matrix::from_fn(n, d, |i, j| z.get(i, j) - mean[j]);
    let cov = centered.t_matmul(&centered).scale(1.0 / n as f64);
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, cov.data()));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]));
    for (pc, &col) in order.iter().take(2).enumerate() {
        let v = eig.eigenvectors.column(col);
        let pivot = (0..d).max_by(|&x, &y| v[x].abs().total_cmp(&v[y].abs())).unwrap_or(0);
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            let p: f64 = (0..d).map(|j| centered.get(i, j) * v[j]).sum();
            out.set(i, pc, sign * p);
        }
    }
    out
}

/// Writes `node_id,z_1..z_d[,pc1,pc2]`.
pub fn export_embeddings(z: &Matrix, ids: &[String], path: &Path, project2d: bool) -> Result<(), EvalError> {
    if ids.len() != z.rows() {
        return Err(EvalError::LengthMismatch(ids.len(), z.rows()));
    }
    let pcs = project2d.then(|| pca_2d(z));
    let mut s = String::from("node_id");
    for j in 1..=z.cols() {
        write!(s, ",z_{j}").unwrap();
    }
    if project2d {
        s.push_str(",pc1,pc2");
    }
    s.push('\n');
    for (i, id) in ids.iter().enumerate() {
        s.push_str(id);
        for v in z.row(i) {
            write!(s, ",{}", fmt_f64(*v)).unwrap();
        }
        if let Some(p) = &pcs {
            write!(s, ",{},{}", fmt_f64(p.get(i, 0)), fmt_f64(p.get(i, 1))).unwrap();
        }
        s.push('\n');
    }
    fs::write(path, s).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads a file written by [`export_embeddings`] into `(ids, columns header, values)`.
pub fn read_embeddings(path: &Path) -> Result<(Vec<String>, Vec<String>, Matrix), EvalError> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| EvalError::Malformed("empty file".into()))?
        .split(',')
        .skip(1)
        .map(str::to_string)
        .collect();
    let mut ids = Vec::new();
    let mut data = Vec::new();
    for (ln, line) in lines.enumerate() {
        let mut fields = line.split(',');
        ids.push(fields.next().unwrap_or_default().to_string());
        let row: Vec<f64> = fields
            .map(|f| f.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| EvalError::Malformed(format!("line {}: {e}", ln + 2)))?;
        if row.len() != header.len() {
            return Err(EvalError::Malformed(format!("line {}: {} values", ln + 2, row.len())));
        }
        data.extend(row);
    }
    let m = Matrix::from_vec(ids.len(), header.len(), data).map_err(|e| EvalError::Malformed(e.to_string()))?;
    Ok((ids, header, m))
}
