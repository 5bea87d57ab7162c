//! Iterative nullspace projection.
//!
//! Each iteration trains a linear probe for the property on the currently
//! projected training data, checks it on dev, and, if it still beats the
//! majority baseline by more than the stop margin, removes the probe's row
//! space from the representation.

mod projection;

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use projection::{
    apply_projection, extend_basis, random_projection, rowspace_basis, Projection, ProjectionKind,
    DEFAULT_TOL,
};

use crate::dataset::{label_stats, ReprDataset};
use crate::error::{Error, Result};
use crate::probe::{probe_accuracy, train_linear_probe, ProbeConfig};
use crate::{repd, seed};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InlpConfig {
    pub probe: ProbeConfig,
    /// Defaults to `d / C`.
    pub max_iterations: Option<usize>,
    /// Stop once dev accuracy is within this absolute margin (a fraction,
    /// 0.01 = one point) of the dev majority baseline.
    pub stop_margin: f64,
    /// Run exactly `max_iterations` iterations, ignoring the stop margin.
    pub fixed_iterations: bool,
    pub tol: f64,
    pub seed: u64,
}

impl Default for InlpConfig {
    fn default() -> Self {
        InlpConfig {
            probe: ProbeConfig::default(),
            max_iterations: None,
            stop_margin: 0.01,
            fixed_iterations: false,
            tol: DEFAULT_TOL,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    ReachedMajority,
    MaxIterations,
    RankExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub dev_accuracy: f64,
    pub train_accuracy: f64,
    pub directions_added: usize,
    pub cumulative_removed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InlpResult {
    #[serde(skip)]
    pub projection: Projection,
    pub iterations: Vec<IterationRecord>,
    pub stopped_reason: StopReason,
    /// Dev majority baseline the stopping rule compared against.
    pub majority: f64,
    pub num_classes: usize,
    /// Weights of every classifier whose directions were removed.
    #[serde(skip)]
    pub classifiers: Vec<Array2<f32>>,
}

impl InlpResult {
    pub fn removed(&self) -> usize {
        self.projection.removed()
    }

    /// Projection in effect after iteration `i` (0-based) completed.
    pub fn projection_after(&self, i: usize) -> Projection {
        let k = self.iterations.get(i).map_or(0, |r| r.cumulative_removed);
        self.projection.truncated(k)
    }
}

pub fn run_inlp(
    train: &ReprDataset,
    dev: &ReprDataset,
    property: &str,
    config: &InlpConfig,
) -> Result<InlpResult> {
    if train.dim() != dev.dim() {
        return Err(Error::DimensionMismatch {
            expected: train.dim(),
            found: dev.dim(),
        });
    }
    let dim = train.dim();
    let train_labels = train.property(property)?;
    let majority = label_stats(dev.property(property)?)?.majority_fraction;
    let num_classes = label_stats(train_labels)
        .map(|s| s.label_counts.len())
        .unwrap_or(0);
    let max_iterations = config
        .max_iterations
        .unwrap_or_else(|| dim / num_classes.max(1));

    let mut projection = Projection::identity(dim);
    projection.seed = Some(config.seed);
    let mut train_p = train.clone();
    let mut dev_p = dev.clone();
    let mut iterations = Vec::new();
    let mut classifiers = Vec::new();
    let mut stopped_reason = StopReason::MaxIterations;

    for it in 0..max_iterations {
        let probe_cfg = ProbeConfig {
            seed: seed::derive(config.seed, seed::stream::INLP, it as u64),
            ..config.probe
        };
        let probe = match train_linear_probe(&train_p, property, &probe_cfg) {
            Ok(p) => p,
            Err(Error::DegenerateLabels { .. }) => {
                stopped_reason = StopReason::ReachedMajority;
                break;
            }
            Err(e) => return Err(e),
        };
        let dev_accuracy = probe_accuracy(&probe, &dev_p, property)?;
        let train_accuracy = probe_accuracy(&probe, &train_p, property)?;
        let mut record = IterationRecord {
            iteration: it,
            dev_accuracy,
            train_accuracy,
            directions_added: 0,
            cumulative_removed: projection.removed(),
        };
        if !config.fixed_iterations && dev_accuracy <= majority + config.stop_margin {
            iterations.push(record);
            stopped_reason = StopReason::ReachedMajority;
            break;
        }
        let weights = probe.weights.mapv(|v| v as f64);
        let extended = match extend_basis(&projection, weights.view(), config.tol) {
            Ok(p) => p,
            Err(Error::RankExhausted { .. }) => {
                iterations.push(record);
                stopped_reason = StopReason::RankExhausted;
                break;
            }
            Err(e) => return Err(e),
        };
        let before = projection.removed();
        // new rows are orthogonal to the old ones, so projecting the already
        // projected data by just the new rows gives the full projection
        let step = extended.tail(before);
        train_p = train_p.with_reps(apply_projection(&step, &train_p.reps)?)?;
        dev_p = dev_p.with_reps(apply_projection(&step, &dev_p.reps)?)?;
        projection = extended;
        record.directions_added = projection.removed() - before;
        record.cumulative_removed = projection.removed();
        iterations.push(record);
        classifiers.push(probe.weights);
    }

    Ok(InlpResult {
        projection,
        iterations,
        stopped_reason,
        majority,
        num_classes,
        classifiers,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ProjectionFile {
    kind: ProjectionKind,
    seed: Option<u64>,
    dim: usize,
    removed: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    inlp: Option<InlpResult>,
}

/// Writes the basis to `path` (REPD, k x d) and metadata plus the optional
/// iteration log to `path` with a `.json` extension.
pub fn save_projection(p: &Projection, log: Option<&InlpResult>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    repd::write(path, &p.basis().mapv(|v| v as f32))?;
    let meta = ProjectionFile {
        kind: p.kind,
        seed: p.seed,
        dim: p.dim(),
        removed: p.removed(),
        inlp: log.cloned(),
    };
    let json_path = path.with_extension("json");
    let text = serde_json::to_string_pretty(&meta).expect("projection metadata serializes");
    fs::write(&json_path, text + "\n").map_err(|e| Error::io(&json_path, e))
}

/// Loads a projection saved by [`save_projection`], with its INLP log if any.
pub fn load_projection(path: impl AsRef<Path>) -> Result<(Projection, Option<InlpResult>)> {
    let path = path.as_ref();
    let json_path = path.with_extension("json");
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let meta: ProjectionFile = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: json_path.clone(),
        source: e,
    })?;
    let rows = repd::read(path)?;
    if rows.ncols() != meta.dim || rows.nrows() != meta.removed {
        return Err(Error::Consistency(format!(
            "projection {} is {}x{} but its metadata says {}x{}",
            path.display(),
            rows.nrows(),
            rows.ncols(),
            meta.removed,
            meta.dim
        )));
    }
    let projection = if rows.nrows() == 0 {
        let mut p = Projection::identity(meta.dim);
        p.kind = meta.kind;
        p.seed = meta.seed;
        p
    } else {
        Projection::from_stored(&rows, meta.kind, meta.seed)
    };
    let log = meta.inlp.map(|mut r| {
        r.projection = projection.clone();
        r
    });
    Ok((projection, log))
}
