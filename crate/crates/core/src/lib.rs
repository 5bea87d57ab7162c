//! Amnesic probing: remove a linearly decodable property from neural
//! representations with iterative nullspace projection (INLP) and measure
//! what the removal does to word prediction.
//!
//! The pieces, bottom-up:
//!
//! * [`dataset`]: labeled representation matrices and their on-disk format
//! * [`probe`]: multiclass linear probes and control-task labels
//! * [`inlp`]: projection algebra, the INLP loop and the random control
//! * [`eval`]: word-prediction accuracy, KL divergence, per-label tables,
//!   label-vs-rest removal and probe/impact correlation
//! * [`selectivity`]: re-injecting the gold property into amnesic
//!   representations

pub mod dataset;
pub mod error;
pub mod eval;
pub mod inlp;
pub mod probe;
pub mod repd;
pub mod seed;
pub mod selectivity;

pub use dataset::{label_stats, LabelStats, ReprDataset};
pub use error::{Error, Result};
pub use eval::{AmnesicReport, Decoder};
pub use inlp::{run_inlp, InlpConfig, InlpResult, Projection, ProjectionKind};
pub use probe::{LinearProbe, ProbeConfig};
pub use selectivity::{run_selectivity, SelectivityConfig};
