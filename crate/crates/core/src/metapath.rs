//! Meta-path parsing, symmetry checks and hyperedge member enumeration.
//!
//! A meta-path is written either as concatenated node type names (`APA`,
//! `APVPA`), hyphen-separated node types (`Author-Paper-Author`), or with
//! explicit edge names alternating with node types (`A-writes-P-writes-A`).
//! The explicit form is needed when two edge types join the same pair of
//! node types.

use std::fmt;

use thiserror::Error;

use crate::hetgraph::{EdgeTypeId, GraphError, HeteroGraph, NodeId, TypeId, TypeSchema};

#[derive(Debug, Error)]
pub enum MetaPathError {
    #[error("unknown type name in meta-path at `{0}`")]
    UnknownTypeName(String),
    #[error("edge types {candidates:?} all connect `{from}` and `{to}`; name the edge explicitly")]
    AmbiguousEdgeType {
        from: String,
        to: String,
        candidates: Vec<String>,
    },
    #[error("no edge type connects `{from}` and `{to}`")]
    NoEdgeType { from: String, to: String },
    #[error("meta-path needs at least two node types")]
    TooShort,
    #[error("meta-path `{0}` is not symmetric")]
    NotSymmetric(String),
    #[error("meta-path `{path}` ends in `{end}`, not the target type `{target}`")]
    EndpointNotTarget {
        path: String,
        end: String,
        target: String,
    },
    #[error("meta-path `{0}` has an even number of node types and no single center")]
    EvenLength(String),
    #[error("node {node} has type `{actual}`, the meta-path center is `{expected}`")]
    WrongCenterType {
        node: usize,
        actual: String,
        expected: String,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Ordered node types `O_1..O_{l+1}` joined by edge types `R_1..R_l`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetaPath {
    pub node_types: Vec<TypeId>,
    pub edge_types: Vec<EdgeTypeId>,
    name: String,
}

impl MetaPath {
    pub fn len(&self) -> usize {
        self.edge_types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edge_types.is_empty()
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn reversed(&self) -> MetaPath {
        let mut node_types = self.node_types.clone();
        node_types.reverse();
        let mut edge_types = self.edge_types.clone();
        edge_types.reverse();
        MetaPath {
            node_types,
            edge_types,
            name: self.name.clone(),
        }
    }
}

impl fmt::Display for MetaPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

fn infer_edge(schema: &TypeSchema, a: TypeId, b: TypeId) -> Result<EdgeTypeId, MetaPathError> {
    let candidates: Vec<EdgeTypeId> = (0..schema.edge_types.len())
        .map(EdgeTypeId)
        .filter(|&e| {
            let (s, d) = schema.edge_endpoints(e);
            (s, d) == (a, b) || (s, d) == (b, a)
        })
        .collect();
    let names = || (schema.node_type_name(a).to_string(), schema.node_type_name(b).to_string());
    match candidates.as_slice() {
        [e] => Ok(*e),
        [] => {
            let (from, to) = names();
            Err(MetaPathError::NoEdgeType { from, to })
        }
        many => {
            let (from, to) = names();
            Err(MetaPathError::AmbiguousEdgeType {
                from,
                to,
                candidates: many.iter().map(|e| schema.edge_types[e.0].name.clone()).collect(),
            })
        }
    }
}

/// Greedy longest-match split of `spec` into node type names.
fn split_concatenated(spec: &str, schema: &TypeSchema) -> Result<Vec<TypeId>, MetaPathError> {
    let mut out = Vec::new();
    let mut rest = spec;
    while !rest.is_empty() {
        let best = schema
            .node_types
            .iter()
            .enumerate()
            .filter(|(_, t)| rest.starts_with(t.as_str()))
            .max_by_key(|(_, t)| t.len());
        match best {
            Some((i, t)) => {
                out.push(TypeId(i));
                rest = &rest[t.len()..];
            }
            None => return Err(MetaPathError::UnknownTypeName(rest.to_string())),
        }
    }
    Ok(out)
}

/// Parses a meta-path string against `schema`, resolving every edge type.
pub fn parse_metapath(spec: &str, schema: &TypeSchema) -> Result<MetaPath, MetaPathError> {
    let spec = spec.trim();
    let mut node_types = Vec::new();
    let mut explicit: Vec<Option<EdgeTypeId>> = Vec::new();

    if spec.contains('-') {
        let tokens: Vec<&str> = spec.split('-').map(str::trim).collect();
        let all_nodes = tokens.iter().all(|t| schema.node_type_id(t).is_some());
        if all_nodes {
            node_types = tokens.iter().map(|t| schema.node_type_id(t).unwrap()).collect();
            explicit = vec![None; node_types.len().saturating_sub(1)];
        } else {
            for (i, tok) in tokens.iter().enumerate() {
                if i % 2 == 0 {
                    node_types.push(
                        schema
                            .node_type_id(tok)
                            .ok_or_else(|| MetaPathError::UnknownTypeName(tok.to_string()))?,
                    );
                } else {
                    explicit.push(Some(
                        schema
                            .edge_type_id(tok)
                            .ok_or_else(|| MetaPathError::UnknownTypeName(tok.to_string()))?,
                    ));
                }
            }
            if tokens.len().is_multiple_of(2) {
                // dangling edge name with no closing node type
                return Err(MetaPathError::UnknownTypeName(tokens.last().unwrap().to_string()));
            }
        }
    } else {
        node_types = split_concatenated(spec, schema)?;
        explicit = vec![None; node_types.len().saturating_sub(1)];
    }

    if node_types.len() < 2 {
        return Err(MetaPathError::TooShort);
    }

    let mut edge_types = Vec::with_capacity(node_types.len() - 1);
    for (i, given) in explicit.into_iter().enumerate() {
        let (a, b) = (node_types[i], node_types[i + 1]);
        let e = match given {
            None => infer_edge(schema, a, b)?,
            Some(e) => {
                let (s, d) = schema.edge_endpoints(e);
                if (s, d) != (a, b) && (s, d) != (b, a) {
                    return Err(MetaPathError::NoEdgeType {
                        from: schema.node_type_name(a).to_string(),
                        to: schema.node_type_name(b).to_string(),
                    });
                }
                e
            }
        };
        edge_types.push(e);
    }
    Ok(MetaPath {
        node_types,
        edge_types,
        name: spec.to_string(),
    })
}

/// A palindromic meta-path whose endpoints are the target type.
///
/// The center node type is the hyperedge (identifier) type; types strictly
/// between the center and the endpoints are slave types.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymmetricMetaPath {
    pub base: MetaPath,
    pub center_index: usize,
}

impl SymmetricMetaPath {
    pub fn center_type(&self) -> TypeId {
        self.base.node_types[self.center_index]
    }

    pub fn target_type(&self) -> TypeId {
        self.base.node_types[0]
    }

    /// Edge types from the center outwards, paired with the node type reached by each.
    pub fn half_path(&self) -> impl Iterator<Item = (EdgeTypeId, TypeId)> + '_ {
        let c = self.center_index;
        self.base.edge_types[c..]
            .iter()
            .copied()
            .zip(self.base.node_types[c + 1..].iter().copied())
    }

    pub fn slave_types(&self) -> &[TypeId] {
        let n = self.base.node_types.len();
        &self.base.node_types[self.center_index + 1..n - 1]
    }

    pub fn name(&self) -> &str {
        self.base.name()
    }
}

pub fn check_symmetric(mp: MetaPath, target_type: TypeId) -> Result<SymmetricMetaPath, MetaPathError> {
    let n = mp.node_types.len();
    if n < 2 {
        return Err(MetaPathError::TooShort);
    }
    if n.is_multiple_of(2) {
        return Err(MetaPathError::EvenLength(mp.name.clone()));
    }
    let palindrome = mp.node_types.iter().eq(mp.node_types.iter().rev())
        && mp.edge_types.iter().eq(mp.edge_types.iter().rev());
    if !palindrome {
        return Err(MetaPathError::NotSymmetric(mp.name.clone()));
    }
    if mp.node_types[0] != target_type {
        return Err(MetaPathError::EndpointNotTarget {
            path: mp.name.clone(),
            end: format!("type #{}", mp.node_types[0].0),
            target: format!("type #{}", target_type.0),
        });
    }
    Ok(SymmetricMetaPath {
        center_index: n.div_ceil(2) - 1,
        base: mp,
    })
}

/// Parses and validates a symmetric meta-path ending in the graph's target type.
pub fn parse_symmetric(spec: &str, g: &HeteroGraph) -> Result<SymmetricMetaPath, MetaPathError> {
    let mp = parse_metapath(spec, g.schema())?;
    let end = mp.node_types[0];
    check_symmetric(mp, g.target_type()).map_err(|e| match e {
        MetaPathError::EndpointNotTarget { path, .. } => MetaPathError::EndpointNotTarget {
            path,
            end: g.schema().node_type_name(end).to_string(),
            target: g.schema().node_type_name(g.target_type()).to_string(),
        },
        other => other,
    })
}

/// Target nodes reachable from `center` along the half path, sorted and deduplicated.
pub fn reach_targets(
    g: &HeteroGraph,
    smp: &SymmetricMetaPath,
    center: NodeId,
) -> Result<Vec<NodeId>, MetaPathError> {
    if center.0 >= g.num_nodes() {
        return Err(GraphError::UnknownNode(center.0).into());
    }
    if g.node_type(center) != smp.center_type() {
        return Err(MetaPathError::WrongCenterType {
            node: center.0,
            actual: g.schema().node_type_name(g.node_type(center)).to_string(),
            expected: g.schema().node_type_name(smp.center_type()).to_string(),
        });
    }
    let mut frontier = vec![center];
    let mut next = Vec::new();
    for (edge_type, node_type) in smp.half_path() {
        next.clear();
        for &v in &frontier {
            next.extend(
                g.neighbors(v, edge_type)?
                    .iter()
                    .copied()
                    .filter(|u| g.node_type(*u) == node_type),
            );
        }
        next.sort_unstable();
        next.dedup();
        std::mem::swap(&mut frontier, &mut next);
        if frontier.is_empty() {
            break;
        }
    }
    Ok(frontier)
}
