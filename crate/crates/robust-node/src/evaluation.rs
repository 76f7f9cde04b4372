//! Objectives, classification metrics on a fixed lattice, and the CSV
//! exports behind the level-set and loss-history plots.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array3};
use serde::Serialize;

use crate::dynamics::{flow_forward, ControlSchedule, Ensemble};
use crate::shooting::TrainingHistory;
use crate::task::{loss_matrix, predict_probability, BoundaryCurve, ClassTargets, PerturbedBatch};
use crate::weights::{LossMatrix, WeightMatrix};
use crate::{Error, Result};

/// The robust objective of a loss matrix: mean over particles of the worst
/// perturbation loss.
pub fn robust_objective_of(losses: &LossMatrix) -> f64 {
    let (m, _) = losses.values.dim();
    let total: f64 = losses
        .values
        .rows()
        .into_iter()
        .map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .sum();
    total / m as f64
}

/// The weighted objective of a loss matrix: `(1/M) sum_ij gamma_ij loss_ij`.
pub fn weighted_objective_of(losses: &LossMatrix, gamma: &WeightMatrix) -> f64 {
    let (m, n) = losses.values.dim();
    assert_eq!(
        (gamma.particle_count(), gamma.perturbation_count()),
        (m, n),
        "weight/loss shape mismatch"
    );
    let total: f64 = losses
        .values
        .iter()
        .zip(gamma.rows().iter())
        .map(|(l, g)| g * l)
        .sum();
    total / m as f64
}

/// Flow the batch forward and evaluate the robust objective at the horizon.
pub fn robust_objective(
    batch: &PerturbedBatch,
    u: &ControlSchedule,
    targets: &ClassTargets,
) -> Result<f64> {
    let traj = flow_forward(&batch.ensemble, u)?;
    Ok(robust_objective_of(&loss_matrix(
        traj.terminal(),
        &batch.labels,
        targets,
    )))
}

/// Flow the batch forward and evaluate the weighted objective at the horizon.
pub fn weighted_objective(
    batch: &PerturbedBatch,
    u: &ControlSchedule,
    gamma: &WeightMatrix,
    targets: &ClassTargets,
) -> Result<f64> {
    let traj = flow_forward(&batch.ensemble, u)?;
    Ok(weighted_objective_of(
        &loss_matrix(traj.terminal(), &batch.labels, targets),
        gamma,
    ))
}

/// One evaluated lattice point. `true_label` is `None` for points exactly on
/// the boundary curve, which never enter a metric denominator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub x: [f64; 2],
    pub true_label: Option<u8>,
    pub prob_class1: f64,
}

impl GridPoint {
    pub fn predicted_label(&self) -> u8 {
        u8::from(self.prob_class1 > 0.5)
    }

    /// Probability assigned to the predicted class.
    pub fn confidence(&self) -> f64 {
        self.prob_class1.max(1.0 - self.prob_class1)
    }

    pub fn is_mistake(&self) -> bool {
        matches!(self.true_label, Some(t) if t != self.predicted_label())
    }
}

/// Correct/total counters behind each reported fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricCounts {
    pub hits: usize,
    pub total: usize,
}

impl MetricCounts {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.hits as f64 / self.total as f64
        }
    }
}

/// Flow a uniform `resolution x resolution` lattice on the unit square
/// through the model and record class-1 probabilities at the horizon.
/// Row-major order: the first coordinate varies in the outer loop.
pub fn evaluate_grid(
    u: &ControlSchedule,
    targets: &ClassTargets,
    boundary: &BoundaryCurve,
    resolution: usize,
) -> Result<Vec<GridPoint>> {
    assert!(resolution >= 2, "grid resolution must be at least 2");
    let count = resolution * resolution;
    let step = 1.0 / (resolution - 1) as f64;
    let mut states = Array3::zeros((count, 1, 2));
    let mut coords = Vec::with_capacity(count);
    for a in 0..resolution {
        for b in 0..resolution {
            let x = [a as f64 * step, b as f64 * step];
            let idx = a * resolution + b;
            states[[idx, 0, 0]] = x[0];
            states[[idx, 0, 1]] = x[1];
            coords.push(x);
        }
    }
    let traj = flow_forward(&Ensemble::new(states), u)?;
    let terminal = traj.terminal();
    Ok(coords
        .into_iter()
        .enumerate()
        .map(|(idx, x)| {
            let height = boundary.height(x[0]);
            let true_label = if x[1] == height {
                None
            } else {
                Some(u8::from(x[1] > height))
            };
            GridPoint {
                x,
                true_label,
                prob_class1: predict_probability(terminal.states.slice(s![idx, 0, ..]), targets),
            }
        })
        .collect())
}

/// Accuracy over all labeled lattice points.
pub fn test_accuracy_counts(grid: &[GridPoint]) -> MetricCounts {
    let mut hits = 0;
    let mut total = 0;
    for point in grid {
        if let Some(label) = point.true_label {
            total += 1;
            if point.predicted_label() == label {
                hits += 1;
            }
        }
    }
    MetricCounts { hits, total }
}

pub fn test_accuracy(
    u: &ControlSchedule,
    targets: &ClassTargets,
    boundary: &BoundaryCurve,
    resolution: usize,
) -> Result<f64> {
    Ok(test_accuracy_counts(&evaluate_grid(u, targets, boundary, resolution)?).fraction())
}

/// Accuracy restricted to the band within `margin` vertical distance of the
/// boundary, i.e. the region excluded from training data.
pub fn margin_accuracy_counts(
    grid: &[GridPoint],
    boundary: &BoundaryCurve,
    resolution: usize,
    margin: f64,
) -> Result<MetricCounts> {
    let mut hits = 0;
    let mut total = 0;
    for point in grid {
        if boundary.clearance(point.x) > margin {
            continue;
        }
        if let Some(label) = point.true_label {
            total += 1;
            if point.predicted_label() == label {
                hits += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::EmptyMarginBand { resolution, margin });
    }
    Ok(MetricCounts { hits, total })
}

pub fn margin_accuracy(
    u: &ControlSchedule,
    targets: &ClassTargets,
    boundary: &BoundaryCurve,
    resolution: usize,
    margin: f64,
) -> Result<f64> {
    let grid = evaluate_grid(u, targets, boundary, resolution)?;
    Ok(margin_accuracy_counts(&grid, boundary, resolution, margin)?.fraction())
}

/// Among misclassified lattice points, the fraction whose predicted-class
/// probability strictly exceeds `threshold`. Zero when nothing is
/// misclassified.
pub fn high_confidence_mistake_counts(grid: &[GridPoint], threshold: f64) -> MetricCounts {
    assert!(
        threshold > 0.5 && threshold < 1.0,
        "confidence threshold must lie in (0.5, 1)"
    );
    let mut hits = 0;
    let mut total = 0;
    for point in grid {
        if point.is_mistake() {
            total += 1;
            if point.confidence() > threshold {
                hits += 1;
            }
        }
    }
    MetricCounts { hits, total }
}

pub fn high_confidence_mistakes(
    u: &ControlSchedule,
    targets: &ClassTargets,
    boundary: &BoundaryCurve,
    resolution: usize,
    threshold: f64,
) -> Result<f64> {
    let grid = evaluate_grid(u, targets, boundary, resolution)?;
    Ok(high_confidence_mistake_counts(&grid, threshold).fraction())
}

/// The summary row reported for one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub test_accuracy: f64,
    pub margin_accuracy: f64,
    pub high_confidence_mistakes: f64,
    pub robust_objective: f64,
    pub seeds_used: Vec<u64>,
}

/// 17 significant digits: enough for an exact `f64` round trip.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write the evaluated lattice as CSV: `x1,x2,prob_class1,predicted,true_label`,
/// one row per lattice point in row-major order.
pub fn write_level_set_csv(grid: &[GridPoint], path: &Path) -> Result<()> {
    let mut out = String::from("x1,x2,prob_class1,predicted,true_label\n");
    for point in grid {
        let true_label = point
            .true_label
            .map(|l| l.to_string())
            .unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{}",
            fmt_f64(point.x[0]),
            fmt_f64(point.x[1]),
            fmt_f64(point.prob_class1),
            point.predicted_label(),
            true_label
        )
        .expect("writing to a string cannot fail");
    }
    std::fs::write(path, out).map_err(Error::io(path))
}

/// Flow the lattice and export its level-set CSV in one call.
pub fn export_level_set_grid(
    u: &ControlSchedule,
    targets: &ClassTargets,
    boundary: &BoundaryCurve,
    resolution: usize,
    path: &Path,
) -> Result<()> {
    write_level_set_csv(&evaluate_grid(u, targets, boundary, resolution)?, path)
}

/// Export the training history as CSV with columns
/// `iteration,J,J_Gamma,pmp_residual,weight_entropy_mean`. Zero objective
/// values are written as-is and flagged in a leading comment line so that
/// semilog plots know to mask them.
pub fn export_loss_history(history: &TrainingHistory, path: &Path) -> Result<()> {
    let mut out = String::new();
    if history
        .entries
        .iter()
        .any(|e| e.robust_objective == 0.0)
    {
        out.push_str("# note: J contains exact zeros; mask them on a log scale\n");
    }
    out.push_str("iteration,J,J_Gamma,pmp_residual,weight_entropy_mean\n");
    for entry in &history.entries {
        writeln!(
            out,
            "{},{},{},{},{}",
            entry.iteration,
            fmt_f64(entry.robust_objective),
            fmt_f64(entry.weighted_objective),
            fmt_f64(entry.pmp_residual),
            fmt_f64(entry.weight_entropy_mean)
        )
        .expect("writing to a string cannot fail");
    }
    std::fs::write(path, out).map_err(Error::io(path))
}
