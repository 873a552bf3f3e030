//! Text-anchoring toolkit.
//!
//! Evaluation of bidirectional region/text grounding (region-to-text reading
//! accuracy and text-to-region detection F1), the data-engine procedures used
//! to build grounded training data (two-engine pseudo-label consensus,
//! stochastic prior injection, de-stylized mask rendering), and a small
//! double-precision reference of a causal query-driven mask decoder with its
//! losses and analytic gradients.
//!
//! Every module is usable on its own; [`cli`] wires them into reproducible
//! JSONL pipelines behind the `takit` binary.

pub mod adapters;
pub mod bench;
pub mod cli;
pub mod consensus;
pub mod cqmd;
pub mod evaluator;
pub mod geometry;
pub mod maskrender;
pub mod records;
pub mod rng;
pub mod spi;
pub mod textnorm;

pub use geometry::{iou, Box, CoordConvention, GeometryError, ImageSize};

/// Tool version echoed into every report.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
