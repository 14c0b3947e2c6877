//! Condenses unstructured text into syntactically valid tables.
//!
//! Generation runs in two stages: a header-construction request yields the
//! table skeleton, then one question per skeleton slot is answered against
//! the passage. Because cell content is placed into a fixed skeleton, every
//! generated table is rectangular. The crate also carries the evaluation
//! harness (exact-match header and cell F1, syntactic error rate and an
//! embedding-based similarity score) and a single-stage flat-format baseline.

pub mod backend;
pub mod corpus;
pub mod kind;
pub mod metrics;
pub mod pipeline;
pub mod qa;
pub mod table;

pub use kind::DatasetKind;
pub use table::{CellTuple, Orientation, Table};
