//! Heterogeneous hypergraphs built from symmetric meta-paths, and a
//! multi-view attention network (node-level attention inside each view,
//! hyperedge-level attention across views) for node classification and
//! clustering.

pub mod eval;
pub mod hetgraph;
pub mod hypergraph;
pub mod metapath;
pub mod run;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod trainer;
