//! Synthetic planar classification task: dataset sampling around a nonlinear
//! boundary, fixed perturbation sets, quadratic terminal losses, and the
//! probability readout.

use ndarray::{s, Array1, Array2, Array3, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::Ensemble;
use crate::weights::LossMatrix;
use crate::{derive_seed, Error, Result, SeedStream};

/// The class boundary `x2 = offset + amplitude * sin(2 pi frequency x1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundaryCurve {
    pub offset: f64,
    pub amplitude: f64,
    pub frequency: f64,
}

impl Default for BoundaryCurve {
    fn default() -> Self {
        BoundaryCurve {
            offset: 0.5,
            amplitude: 0.2,
            frequency: 1.0,
        }
    }
}

impl BoundaryCurve {
    pub fn height(&self, x1: f64) -> f64 {
        self.offset + self.amplitude * (std::f64::consts::TAU * self.frequency * x1).sin()
    }

    /// 1 above the curve, 0 on or below it.
    pub fn label(&self, point: [f64; 2]) -> u8 {
        u8::from(point[1] > self.height(point[0]))
    }

    /// Vertical distance from the curve.
    pub fn clearance(&self, point: [f64; 2]) -> f64 {
        (point[1] - self.height(point[0])).abs()
    }
}

/// Terminal readout: cluster centers per class plus the logistic sharpness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassTargets {
    pub t0: [f64; 2],
    pub t1: [f64; 2],
    pub kappa: f64,
}

impl Default for ClassTargets {
    fn default() -> Self {
        // Centers straddle the data horizontally so the readout boundary
        // (their perpendicular bisector) crosses the square at x1 = 0.5;
        // the bounded field speed can then carry every point across it
        // within the horizon.
        ClassTargets {
            t0: [-0.3, 0.5],
            t1: [1.3, 0.5],
            kappa: 4.0,
        }
    }
}

impl ClassTargets {
    pub fn target(&self, label: u8) -> [f64; 2] {
        if label == 0 {
            self.t0
        } else {
            self.t1
        }
    }
}

/// Labeled base points in the unit square, kept clear of the boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub points: Array2<f64>,
    pub labels: Vec<u8>,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn point(&self, i: usize) -> [f64; 2] {
        [self.points[[i, 0]], self.points[[i, 1]]]
    }
}

/// The training ensemble: every base point plus its perturbation offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedBatch {
    pub ensemble: Ensemble,
    pub perturbations: Array3<f64>,
    pub labels: Vec<u8>,
}

/// Rejection-sample `count` uniform points in the unit square, discarding
/// anything within `margin` vertical distance of the boundary. The label is
/// the boundary side. Deterministic in `seed`.
pub fn generate_dataset(
    seed: u64,
    count: usize,
    margin: f64,
    boundary: &BoundaryCurve,
) -> Result<Dataset> {
    assert!(count >= 2, "need at least two data points");
    assert!(
        margin > 0.0 && margin < 0.5,
        "margin must lie strictly between 0 and 0.5"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SeedStream::Dataset));
    let mut points = Array2::zeros((count, 2));
    let mut labels = Vec::with_capacity(count);
    let max_attempts = 10_000 + 200 * count;
    let mut attempts = 0;
    let mut accepted = 0;
    while accepted < count {
        if attempts >= max_attempts {
            return Err(Error::GenerationStalled {
                requested: count,
                accepted,
                attempts,
                margin,
            });
        }
        attempts += 1;
        let p = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
        if boundary.clearance(p) <= margin {
            continue;
        }
        points[[accepted, 0]] = p[0];
        points[[accepted, 1]] = p[1];
        labels.push(boundary.label(p));
        accepted += 1;
    }
    Ok(Dataset {
        points,
        labels,
        seed,
    })
}

/// Fixed perturbation offsets of sup-norm at most `epsilon`.
///
/// One perturbation is the zero offset; four are the axis-aligned extremes;
/// any other count places points on the radius-`epsilon` circle with a
/// seed-derived phase per particle. Every perturbed point must stay on its
/// base point's side of the boundary, which is checked exhaustively.
pub fn generate_perturbations(
    dataset: &Dataset,
    perturbations: usize,
    epsilon: f64,
    margin: f64,
    boundary: &BoundaryCurve,
) -> Result<PerturbedBatch> {
    assert!(perturbations >= 1, "need at least one perturbation");
    assert!(epsilon >= 0.0, "budget must be nonnegative");
    if epsilon >= margin {
        return Err(Error::Config(format!(
            "dataset.epsilon: budget {epsilon} must be smaller than the sampling margin {margin}"
        )));
    }
    let m = dataset.len();
    let mut offsets = Array3::zeros((m, perturbations, 2));
    match perturbations {
        1 => {}
        4 => {
            for i in 0..m {
                offsets[[i, 0, 0]] = epsilon;
                offsets[[i, 1, 0]] = -epsilon;
                offsets[[i, 2, 1]] = epsilon;
                offsets[[i, 3, 1]] = -epsilon;
            }
        }
        n => {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(dataset.seed, SeedStream::PerturbationPhase));
            for i in 0..m {
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                for j in 0..n {
                    let theta = std::f64::consts::TAU * j as f64 / n as f64 + phase;
                    offsets[[i, j, 0]] = epsilon * theta.cos();
                    offsets[[i, j, 1]] = epsilon * theta.sin();
                }
            }
        }
    }

    let mut states = Array3::zeros((m, perturbations, 2));
    for i in 0..m {
        let base = dataset.point(i);
        for j in 0..perturbations {
            let p = [base[0] + offsets[[i, j, 0]], base[1] + offsets[[i, j, 1]]];
            if boundary.label(p) != dataset.labels[i] {
                return Err(Error::LabelFlip {
                    point: i,
                    perturbation: j,
                    epsilon,
                    margin,
                });
            }
            states[[i, j, 0]] = p[0];
            states[[i, j, 1]] = p[1];
        }
    }
    Ok(PerturbedBatch {
        ensemble: Ensemble::new(states),
        perturbations: offsets,
        labels: dataset.labels.clone(),
    })
}

/// Quadratic terminal cost: squared distance to the label's cluster center.
pub fn terminal_loss(x: ArrayView1<f64>, label: u8, targets: &ClassTargets) -> f64 {
    let t = targets.target(label);
    let dx = x[0] - t[0];
    let dy = x[1] - t[1];
    dx * dx + dy * dy
}

pub fn terminal_loss_gradient(x: ArrayView1<f64>, label: u8, targets: &ClassTargets) -> Array1<f64> {
    let t = targets.target(label);
    ndarray::array![2.0 * (x[0] - t[0]), 2.0 * (x[1] - t[1])]
}

/// Terminal losses of every `(particle, perturbation)` trajectory.
pub fn loss_matrix(terminal: &Ensemble, labels: &[u8], targets: &ClassTargets) -> LossMatrix {
    let (m, n) = (terminal.particle_count(), terminal.perturbation_count());
    assert_eq!(labels.len(), m, "one label per particle");
    let mut values = Array2::zeros((m, n));
    for i in 0..m {
        for j in 0..n {
            values[[i, j]] = terminal_loss(terminal.states.slice(s![i, j, ..]), labels[i], targets);
        }
    }
    LossMatrix::new(values)
}

/// Gradients of the terminal losses, shaped like the ensemble.
pub fn loss_gradients(terminal: &Ensemble, labels: &[u8], targets: &ClassTargets) -> Array3<f64> {
    let (m, n) = (terminal.particle_count(), terminal.perturbation_count());
    assert_eq!(labels.len(), m, "one label per particle");
    let mut grads = Array3::zeros((m, n, 2));
    for i in 0..m {
        for j in 0..n {
            let g = terminal_loss_gradient(terminal.states.slice(s![i, j, ..]), labels[i], targets);
            grads[[i, j, 0]] = g[0];
            grads[[i, j, 1]] = g[1];
        }
    }
    grads
}

/// Probability of class 1: logistic in the difference of squared distances
/// to the two cluster centers.
pub fn predict_probability(terminal: ArrayView1<f64>, targets: &ClassTargets) -> f64 {
    let d0 = terminal_loss(terminal, 0, targets);
    let d1 = terminal_loss(terminal, 1, targets);
    let z = targets.kappa * (d0 - d1);
    1.0 / (1.0 + (-z).exp())
}

/// Class 1 iff the class-1 probability strictly exceeds one half.
pub fn predicted_label(terminal: ArrayView1<f64>, targets: &ClassTargets) -> u8 {
    u8::from(predict_probability(terminal, targets) > 0.5)
}
