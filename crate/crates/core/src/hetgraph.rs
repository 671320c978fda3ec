//! Typed heterogeneous graphs: schema, validation, file ingestion and export.
//!
//! File formats (all UTF-8, one record per line, blank lines ignored):
//!
//! * nodes: `node_id<TAB>type_name`
//! * edges: `src_id<TAB>dst_id<TAB>edge_type_name`
//! * features: CSV, one row per target-type node in node-file order
//! * labels: `node_id<TAB>class_index`
//! * schema: `{"node_types": [...], "edge_types": [{"name", "src", "dst"}], "target_type": "..."}`
//!
//! Edges are stored as given but traversed in both directions.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Matrix;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{file}:{line}: column {column}: {message}")]
    MalformedLine {
        file: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unknown type `{0}`")]
    UnknownType(String),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("duplicate node id `{0}`")]
    DuplicateNode(String),
    #[error("edge on line {line} references undeclared node `{id}`")]
    DanglingEdge { line: usize, id: String },
    /// `found` and `expected` read `SRC -> DST`.
    #[error("edge `{edge_type}` on line {line} connects {found}, declared {expected}")]
    EdgeTypeMismatch {
        line: usize,
        edge_type: String,
        found: String,
        expected: String,
    },
    #[error("feature matrix mismatch: {0}")]
    FeatureDimMismatch(String),
    #[error("label for `{0}`, which is not a target node")]
    LabelNotTarget(String),
    #[error("unknown node {0}")]
    UnknownNode(usize),
    #[error("unknown edge type {0}")]
    UnknownEdgeType(usize),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("schema json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TypeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EdgeTypeId(pub usize);

/// Dense global node index (file order).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeTypeDecl {
    pub name: String,
    pub src: String,
    pub dst: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeSchema {
    pub node_types: Vec<String>,
    pub edge_types: Vec<EdgeTypeDecl>,
}

impl TypeSchema {
    pub fn validate(&self) -> Result<(), GraphError> {
        let mut seen = HashMap::new();
        for (i, t) in self.node_types.iter().enumerate() {
            if t.is_empty() {
                return Err(GraphError::InvalidSchema("empty node type name".into()));
            }
            if seen.insert(t.as_str(), i).is_some() {
                return Err(GraphError::InvalidSchema(format!("duplicate node type `{t}`")));
            }
        }
        let mut edge_names = HashMap::new();
        for e in &self.edge_types {
            if edge_names.insert(e.name.as_str(), ()).is_some() {
                return Err(GraphError::InvalidSchema(format!("duplicate edge type `{}`", e.name)));
            }
            if seen.contains_key(e.name.as_str()) {
                return Err(GraphError::InvalidSchema(format!(
                    "edge type `{}` shadows a node type",
                    e.name
                )));
            }
            for end in [&e.src, &e.dst] {
                if !seen.contains_key(end.as_str()) {
                    return Err(GraphError::UnknownType(end.clone()));
                }
            }
        }
        Ok(())
    }

    pub fn node_type_id(&self, name: &str) -> Option<TypeId> {
        self.node_types.iter().position(|t| t == name).map(TypeId)
    }

    pub fn edge_type_id(&self, name: &str) -> Option<EdgeTypeId> {
        self.edge_types.iter().position(|e| e.name == name).map(EdgeTypeId)
    }

    pub fn node_type_name(&self, t: TypeId) -> &str {
        &self.node_types[t.0]
    }

    /// Endpoint types of an edge type, as declared.
    pub fn edge_endpoints(&self, e: EdgeTypeId) -> (TypeId, TypeId) {
        let decl = &self.edge_types[e.0];
        (
            self.node_type_id(&decl.src).expect("validated schema"),
            self.node_type_id(&decl.dst).expect("validated schema"),
        )
    }
}

/// Schema JSON file contents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaFile {
    #[serde(flatten)]
    pub schema: TypeSchema,
    pub target_type: String,
}

impl SchemaFile {
    pub fn read(path: &Path) -> Result<Self, GraphError> {
        let text = read_text(path)?;
        let sf: SchemaFile = serde_json::from_str(&text)?;
        sf.schema.validate()?;
        if sf.schema.node_type_id(&sf.target_type).is_none() {
            return Err(GraphError::UnknownType(sf.target_type.clone()));
        }
        Ok(sf)
    }

    pub fn write(&self, path: &Path) -> Result<(), GraphError> {
        let text = serde_json::to_string_pretty(self)?;
        write_text(path, &(text + "\n"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub src: NodeId,
    pub dst: NodeId,
    pub edge_type: EdgeTypeId,
}

/// Immutable, validated heterogeneous graph.
#[derive(Debug, Clone)]
pub struct HeteroGraph {
    schema: TypeSchema,
    target_type: TypeId,
    node_ids: Vec<String>,
    node_type: Vec<TypeId>,
    local_index: Vec<usize>,
    members: Vec<Vec<NodeId>>,
    edges: Vec<Edge>,
    // [edge type][node] -> sorted, deduplicated neighbours in both directions
    adjacency: Vec<Vec<Vec<NodeId>>>,
    features: Matrix,
    labels: Vec<Option<usize>>,
    num_classes: usize,
}

/// Raw records accepted by [`HeteroGraph::build`].
#[derive(Debug, Clone, Default)]
pub struct GraphRecords {
    /// `(node_id, type_name)` in file order.
    pub nodes: Vec<(String, String)>,
    /// `(src_id, dst_id, edge_type_name)`.
    pub edges: Vec<(String, String, String)>,
    /// `(node_id, class)`.
    pub labels: Vec<(String, usize)>,
}

impl HeteroGraph {
    /// Validates raw records against `schema` and builds the graph.
    pub fn build(
        schema: TypeSchema,
        target_type: &str,
        records: GraphRecords,
        features: Matrix,
    ) -> Result<Self, GraphError> {
        schema.validate()?;
        let target = schema
            .node_type_id(target_type)
            .ok_or_else(|| GraphError::UnknownType(target_type.to_string()))?;

        let mut index: HashMap<String, NodeId> = HashMap::with_capacity(records.nodes.len());
        let mut node_ids = Vec::with_capacity(records.nodes.len());
        let mut node_type = Vec::with_capacity(records.nodes.len());
        let mut local_index = Vec::with_capacity(records.nodes.len());
        let mut members = vec![Vec::new(); schema.node_types.len()];
        for (id, ty) in records.nodes {
            let t = schema
                .node_type_id(&ty)
                .ok_or_else(|| GraphError::UnknownType(ty.clone()))?;
            let gid = NodeId(node_ids.len());
            if index.insert(id.clone(), gid).is_some() {
                return Err(GraphError::DuplicateNode(id));
            }
            local_index.push(members[t.0].len());
            members[t.0].push(gid);
            node_ids.push(id);
            node_type.push(t);
        }

        let n = node_ids.len();
        let mut adjacency = vec![vec![Vec::new(); n]; schema.edge_types.len()];
        let mut edges = Vec::with_capacity(records.edges.len());
        for (line, (s, d, et)) in records.edges.into_iter().enumerate() {
            let line = line + 1;
            let e = schema
                .edge_type_id(&et)
                .ok_or_else(|| GraphError::UnknownType(et.clone()))?;
            let src = *index
                .get(&s)
                .ok_or(GraphError::DanglingEdge { line, id: s.clone() })?;
            let dst = *index
                .get(&d)
                .ok_or(GraphError::DanglingEdge { line, id: d.clone() })?;
            let (es, ed) = schema.edge_endpoints(e);
            if node_type[src.0] != es || node_type[dst.0] != ed {
                let decl = &schema.edge_types[e.0];
                return Err(GraphError::EdgeTypeMismatch {
                    line,
                    edge_type: et,
                    found: format!(
                        "{} -> {}",
                        schema.node_types[node_type[src.0].0],
                        schema.node_types[node_type[dst.0].0]
                    ),
                    expected: format!("{} -> {}", decl.src, decl.dst),
                });
            }
            adjacency[e.0][src.0].push(dst);
            adjacency[e.0][dst.0].push(src);
            edges.push(Edge {
                src,
                dst,
                edge_type: e,
            });
        }
        for per_type in &mut adjacency {
            for list in per_type.iter_mut() {
                list.sort_unstable();
                list.dedup();
            }
        }

        let n_targets = members[target.0].len();
        if features.rows() != n_targets {
            return Err(GraphError::FeatureDimMismatch(format!(
                "{} feature rows for {n_targets} `{target_type}` nodes",
                features.rows()
            )));
        }

        let mut labels = vec![None; n_targets];
        for (id, class) in records.labels {
            let gid = *index.get(&id).ok_or_else(|| GraphError::LabelNotTarget(id.clone()))?;
            if node_type[gid.0] != target {
                return Err(GraphError::LabelNotTarget(id));
            }
            labels[local_index[gid.0]] = Some(class);
        }
        let num_classes = labels.iter().flatten().map(|c| c + 1).max().unwrap_or(0);

        Ok(Self {
            schema,
            target_type: target,
            node_ids,
            node_type,
            local_index,
            members,
            edges,
            adjacency,
            features,
            labels,
            num_classes,
        })
    }

    pub fn schema(&self) -> &TypeSchema {
        &self.schema
    }

    pub fn target_type(&self) -> TypeId {
        self.target_type
    }

    pub fn num_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn num_targets(&self) -> usize {
        self.members[self.target_type.0].len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node_type(&self, v: NodeId) -> TypeId {
        self.node_type[v.0]
    }

    pub fn original_id(&self, v: NodeId) -> &str {
        &self.node_ids[v.0]
    }

    /// Position of `v` among nodes of its own type.
    pub fn local_index(&self, v: NodeId) -> usize {
        self.local_index[v.0]
    }

    /// Nodes of type `t` in file order.
    pub fn nodes_of_type(&self, t: TypeId) -> &[NodeId] {
        &self.members[t.0]
    }

    pub fn targets(&self) -> &[NodeId] {
        &self.members[self.target_type.0]
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    /// Per target node (target-local order).
    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn find_node(&self, original_id: &str) -> Option<NodeId> {
        self.node_ids.iter().position(|s| s == original_id).map(NodeId)
    }

    /// Sorted, deduplicated nodes one `edge_type` edge away from `node`, in either direction.
    pub fn neighbors(&self, node: NodeId, edge_type: EdgeTypeId) -> Result<&[NodeId], GraphError> {
        let per_type = self
            .adjacency
            .get(edge_type.0)
            .ok_or(GraphError::UnknownEdgeType(edge_type.0))?;
        per_type
            .get(node.0)
            .map(Vec::as_slice)
            .ok_or(GraphError::UnknownNode(node.0))
    }

    /// Writes the id re-mapping table: `original_id<TAB>type_name<TAB>local_index`.
    pub fn write_id_map(&self, path: &Path) -> Result<(), GraphError> {
        let mut out = String::new();
        for (i, id) in self.node_ids.iter().enumerate() {
            let _ = writeln!(
                out,
                "{id}\t{}\t{}",
                self.schema.node_types[self.node_type[i].0], self.local_index[i]
            );
        }
        write_text(path, &out)
    }
}

/// Paths of the on-disk graph files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphPaths {
    pub nodes: PathBuf,
    pub edges: PathBuf,
    pub features: PathBuf,
    pub labels: Option<PathBuf>,
    pub schema: PathBuf,
}

impl GraphPaths {
    /// Standard file names inside a data directory.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            nodes: dir.join("nodes.tsv"),
            edges: dir.join("edges.tsv"),
            features: dir.join("features.csv"),
            labels: Some(dir.join("labels.tsv")),
            schema: dir.join("schema.json"),
        }
    }
}

fn read_text(path: &Path) -> Result<String, GraphError> {
    fs::read_to_string(path).map_err(|source| GraphError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), GraphError> {
    fs::write(path, text).map_err(|source| GraphError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn file_label(path: &Path) -> String {
    path.file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Splits non-blank lines into exactly `n` tab-separated fields.
fn tsv_rows(path: &Path, text: &str, n: usize) -> Result<Vec<Vec<String>>, GraphError> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split('\t').map(|s| s.trim().to_string()).collect();
        if fields.len() != n {
            return Err(GraphError::MalformedLine {
                file: file_label(path),
                line: i + 1,
                column: fields.len().min(n) + 1,
                message: format!("expected {n} tab-separated fields, found {}", fields.len()),
            });
        }
        if let Some(c) = fields.iter().position(String::is_empty) {
            return Err(GraphError::MalformedLine {
                file: file_label(path),
                line: i + 1,
                column: c + 1,
                message: "empty field".into(),
            });
        }
        rows.push(fields);
    }
    Ok(rows)
}

/// Reads a CSV of decimal floats. All rows must share one width.
pub fn read_feature_csv(path: &Path) -> Result<Matrix, GraphError> {
    let text = read_text(path)?;
    let mut data = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut count = 0;
        for (c, field) in line.split(',').enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| GraphError::MalformedLine {
                file: file_label(path),
                line: i + 1,
                column: c + 1,
                message: format!("`{}` is not a number", field.trim()),
            })?;
            if !v.is_finite() {
                return Err(GraphError::MalformedLine {
                    file: file_label(path),
                    line: i + 1,
                    column: c + 1,
                    message: "non-finite feature".into(),
                });
            }
            data.push(v);
            count += 1;
        }
        match width {
            None => width = Some(count),
            Some(w) if w != count => {
                return Err(GraphError::FeatureDimMismatch(format!(
                    "line {} has {count} columns, expected {w}",
                    i + 1
                )))
            }
            _ => {}
        }
        rows += 1;
    }
    Matrix::from_vec(rows, width.unwrap_or(0), data)
        .map_err(|e| GraphError::FeatureDimMismatch(e.to_string()))
}

/// Loads and validates a graph from the standard file formats.
pub fn load_graph(
    node_file: &Path,
    edge_file: &Path,
    feature_file: &Path,
    label_file: Option<&Path>,
    schema: &TypeSchema,
    target_type: &str,
) -> Result<HeteroGraph, GraphError> {
    let nodes = tsv_rows(node_file, &read_text(node_file)?, 2)?
        .into_iter()
        .map(|mut f| {
            let ty = f.pop().unwrap();
            (f.pop().unwrap(), ty)
        })
        .collect();
    let edges = tsv_rows(edge_file, &read_text(edge_file)?, 3)?
        .into_iter()
        .map(|mut f| {
            let et = f.pop().unwrap();
            let dst = f.pop().unwrap();
            (f.pop().unwrap(), dst, et)
        })
        .collect();
    let mut labels = Vec::new();
    if let Some(path) = label_file {
        let text = read_text(path)?;
        let rows = tsv_rows(path, &text, 2)?;
        let mut line_no = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, _)| i + 1);
        for mut f in rows {
            let line = line_no.next().unwrap_or(0);
            let raw = f.pop().unwrap();
            let class: usize = raw.parse().map_err(|_| GraphError::MalformedLine {
                file: file_label(path),
                line,
                column: 2,
                message: format!("`{raw}` is not a class index"),
            })?;
            labels.push((f.pop().unwrap(), class));
        }
    }
    let features = read_feature_csv(feature_file)?;
    HeteroGraph::build(
        schema.clone(),
        target_type,
        GraphRecords {
            nodes,
            edges,
            labels,
        },
        features,
    )
}

/// Loads a graph whose schema lives in a JSON file.
pub fn load_graph_paths(paths: &GraphPaths) -> Result<HeteroGraph, GraphError> {
    let sf = SchemaFile::read(&paths.schema)?;
    load_graph(
        &paths.nodes,
        &paths.edges,
        &paths.features,
        paths.labels.as_deref(),
        &sf.schema,
        &sf.target_type,
    )
}

/// Formats a float so that parsing it back yields the identical value.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Writes the graph in the formats [`load_graph_paths`] reads, plus `id_map.tsv`.
pub fn write_graph(g: &HeteroGraph, dir: &Path) -> Result<GraphPaths, GraphError> {
    fs::create_dir_all(dir).map_err(|source| GraphError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let paths = GraphPaths::in_dir(dir);

    let mut nodes = String::new();
    for (i, id) in g.node_ids.iter().enumerate() {
        let _ = writeln!(nodes, "{id}\t{}", g.schema.node_types[g.node_type[i].0]);
    }
    write_text(&paths.nodes, &nodes)?;

    let mut edges = String::new();
    for e in &g.edges {
        let _ = writeln!(
            edges,
            "{}\t{}\t{}",
            g.node_ids[e.src.0], g.node_ids[e.dst.0], g.schema.edge_types[e.edge_type.0].name
        );
    }
    write_text(&paths.edges, &edges)?;

    let mut feats = String::new();
    for i in 0..g.features.rows() {
        let row: Vec<String> = g.features.row(i).iter().map(|v| fmt_f64(*v)).collect();
        let _ = writeln!(feats, "{}", row.join(","));
    }
    write_text(&paths.features, &feats)?;

    let mut labels = String::new();
    for (t, label) in g.targets().iter().zip(&g.labels) {
        if let Some(c) = label {
            let _ = writeln!(labels, "{}\t{c}", g.node_ids[t.0]);
        }
    }
    write_text(paths.labels.as_ref().expect("in_dir sets labels"), &labels)?;

    SchemaFile {
        schema: g.schema.clone(),
        target_type: g.schema.node_types[g.target_type.0].clone(),
    }
    .write(&paths.schema)?;
    g.write_id_map(&dir.join("id_map.tsv"))?;
    Ok(paths)
}
