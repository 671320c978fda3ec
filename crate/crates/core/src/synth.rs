//! Synthetic author/paper/venue/term graphs with planted author classes.
//!
//! Authors (`a*`) carry the labels and features. Every paper (`p*`) has two to
//! four authors drawn around a primary class, sits in one venue (`v*`) and
//! optionally mentions terms (`t*`). Venue and term `j` belong to class `j mod C`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hetgraph::{
    write_graph, EdgeTypeDecl, GraphError, GraphPaths, GraphRecords, HeteroGraph, TypeSchema,
};
use crate::tensor::Matrix;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("infeasible synthetic config: {0}")]
    InfeasibleConfig(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub authors_per_class: usize,
    pub papers: usize,
    pub venues: usize,
    pub terms: usize,
    /// Relative weight of drawing a coauthor from the paper's primary class.
    pub p_in: f64,
    /// Relative weight of drawing a coauthor from another class.
    pub p_out: f64,
    /// Probability that a paper goes to a venue of its authors' majority class
    /// (otherwise any venue). The same bias applies to terms.
    pub venue_bias: f64,
    pub feature_dim: usize,
    /// Length of each class-mean vector (a scaled one-hot).
    pub class_separation: f64,
    pub feature_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            authors_per_class: 100,
            papers: 600,
            venues: 6,
            terms: 0,
            p_in: 0.9,
            p_out: 0.1,
            venue_bias: 0.9,
            feature_dim: 16,
            class_separation: 1.75,
            feature_noise: 1.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InfeasibleConfig(m));
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.authors_per_class < 2 {
            return bad(format!("authors_per_class = {} (need at least 2)", self.authors_per_class));
        }
        if self.venues == 0 {
            return bad("at least one venue is required".into());
        }
        if self.feature_dim < self.num_classes {
            return bad(format!(
                "feature_dim {} smaller than num_classes {}",
                self.feature_dim, self.num_classes
            ));
        }
        for (name, p) in [("p_in", self.p_in), ("p_out", self.p_out), ("venue_bias", self.venue_bias)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if self.p_in + self.p_out <= 0.0 {
            return bad("p_in + p_out must be positive".into());
        }
        if self.num_classes == 1 && self.p_out > 0.0 {
            return bad("p_out > 0 needs at least two classes".into());
        }
        if !(self.class_separation >= 0.0 && self.class_separation.is_finite()) {
            return bad(format!("class_separation = {}", self.class_separation));
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return bad(format!("feature_noise = {}", self.feature_noise));
        }
        Ok(())
    }
}

/// The author/paper/venue/term schema used by the generator.
pub fn bibliographic_schema() -> TypeSchema {
    let decl = |name: &str, src: &str, dst: &str| EdgeTypeDecl {
        name: name.into(),
        src: src.into(),
        dst: dst.into(),
    };
    TypeSchema {
        node_types: ["A", "P", "V", "T"].map(String::from).to_vec(),
        edge_types: vec![
            decl("writes", "A", "P"),
            decl("published_in", "P", "V"),
            decl("has_term", "P", "T"),
        ],
    }
}

pub const TARGET_TYPE: &str = "A";

#[derive(Debug, Clone)]
pub struct SynthData {
    pub graph: HeteroGraph,
    /// Class of author `i` (target-local order).
    pub classes: Vec<usize>,
}

fn biased_pick(rng: &mut ChaCha8Rng, count: usize, class: usize, num_classes: usize, bias: f64) -> usize {
    let owned: Vec<usize> = (class..count).step_by(num_classes).collect();
    if !owned.is_empty() && rng.gen::<f64>() < bias {
        *owned.choose(rng).expect("non-empty")
    } else {
        rng.gen_range(0..count)
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let c = cfg.num_classes;
    let apc = cfg.authors_per_class;
    let n_authors = c * apc;
    let classes: Vec<usize> = (0..n_authors).map(|i| i / apc).collect();

    let mut nodes = Vec::new();
    for i in 0..n_authors {
        nodes.push((format!("a{i}"), "A".to_string()));
    }
    for i in 0..cfg.papers {
        nodes.push((format!("p{i}"), "P".to_string()));
    }
    for i in 0..cfg.venues {
        nodes.push((format!("v{i}"), "V".to_string()));
    }
    for i in 0..cfg.terms {
        nodes.push((format!("t{i}"), "T".to_string()));
    }

    let p_within = cfg.p_in / (cfg.p_in + cfg.p_out);
    let reachable_authors = if p_within >= 1.0 { apc } else { n_authors };
    let mut edges = Vec::new();
    for p in 0..cfg.papers {
        let primary = rng.gen_range(0..c);
        let size = rng.gen_range(2..=4).min(reachable_authors);
        let mut authors: Vec<usize> = Vec::with_capacity(size);
        while authors.len() < size {
            let class = if authors.is_empty() || rng.gen::<f64>() < p_within {
                primary
            } else {
                let other = rng.gen_range(0..c - 1);
                if other >= primary {
                    other + 1
                } else {
                    other
                }
            };
            let a = class * apc + rng.gen_range(0..apc);
            if !authors.contains(&a) {
                authors.push(a);
            }
        }
        let mut votes = vec![0usize; c];
        for &a in &authors {
            votes[classes[a]] += 1;
        }
        // ties go to the primary class
        let majority = (0..c)
            .max_by_key(|&k| (votes[k], k == primary))
            .expect("at least one class");
        for &a in &authors {
            edges.push((format!("a{a}"), format!("p{p}"), "writes".to_string()));
        }
        let v = biased_pick(&mut rng, cfg.venues, majority, c, cfg.venue_bias);
        edges.push((format!("p{p}"), format!("v{v}"), "published_in".to_string()));
        if cfg.terms > 0 {
            let owned = (majority..cfg.terms).step_by(c).count();
            let reachable = if cfg.venue_bias >= 1.0 && owned > 0 { owned } else { cfg.terms };
            let k = rng.gen_range(1..=3).min(reachable);
            let mut picked = Vec::with_capacity(k);
            while picked.len() < k {
                let t = biased_pick(&mut rng, cfg.terms, majority, c, cfg.venue_bias);
                if !picked.contains(&t) {
                    picked.push(t);
                }
            }
            for t in picked {
                edges.push((format!("p{p}"), format!("t{t}"), "has_term".to_string()));
            }
        }
    }

    let noise = Normal::new(0.0, cfg.feature_noise).expect("validated noise");
    let features = Matrix::from_fn(n_authors, cfg.feature_dim, |i, j| {
        let mean = if j == classes[i] { cfg.class_separation } else { 0.0 };
        mean + noise.sample(&mut rng)
    });
    let labels = (0..n_authors).map(|i| (format!("a{i}"), classes[i])).collect();
    let graph = HeteroGraph::build(
        bibliographic_schema(),
        TARGET_TYPE,
        GraphRecords { nodes, edges, labels },
        features,
    )?;
    Ok(SynthData { graph, classes })
}

/// Generates a graph and writes its files into `dir`.
pub fn generate_to_dir(cfg: &SynthConfig, dir: &Path) -> Result<(SynthData, GraphPaths), SynthError> {
    let data = generate(cfg)?;
    let paths = write_graph(&data.graph, dir)?;
    Ok((data, paths))
}
