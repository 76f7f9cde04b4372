//! The shooting trainer: forward sweep, weighted terminal covector, backward
//! adjoint sweep, and a proximally regularized Hamiltonian ascent step at
//! every time node.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adjoint::{flow_backward, terminal_covector};
use crate::dynamics::{
    flow_forward, hamiltonian, hamiltonian_control_gradient, ControlSchedule, ControlValue,
    Ensemble, TimeGrid,
};
use crate::evaluation::{robust_objective_of, weighted_objective_of};
use crate::task::{loss_gradients, loss_matrix, ClassTargets, PerturbedBatch};
use crate::verify::pmp_residual;
use crate::weights::{gibbs_weights, uniform_weights, worst_case_weights, LossMatrix, WeightMatrix};
use crate::{derive_seed, Error, Result, SeedStream};

/// How the perturbations of each particle are weighted when the terminal
/// covector is assembled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightScheme {
    /// Every perturbation counts the same.
    Uniform,
    /// Tempered softmax over terminal losses with temperature `c`.
    Gibbs { c: f64 },
    /// All mass on the worst perturbation (ties split equally).
    WorstCase,
}

impl WeightScheme {
    pub fn weights(&self, losses: &LossMatrix) -> Result<WeightMatrix> {
        let (m, n) = losses.values.dim();
        match self {
            WeightScheme::Uniform => uniform_weights(m, n),
            WeightScheme::Gibbs { c } => Ok(gibbs_weights(losses, *c)),
            WeightScheme::WorstCase => Ok(worst_case_weights(losses)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShootingConfig {
    /// Number of shooting iterations.
    pub iter_max: usize,
    /// Proximal (memory) parameter: anchor strength and base ascent step.
    pub tau: f64,
    /// Control-energy penalty weight.
    pub beta: f64,
    /// Hamiltonian ascent iterations per time node.
    pub inner_steps: usize,
    pub weight_scheme: WeightScheme,
    /// Recompute the weights every this many iterations.
    pub weight_refresh_period: usize,
    /// Controls start i.i.d. uniform in `[-init_scale, init_scale]`.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for ShootingConfig {
    fn default() -> Self {
        ShootingConfig {
            iter_max: 1000,
            tau: 0.2,
            beta: 0.01,
            inner_steps: 1,
            weight_scheme: WeightScheme::Gibbs { c: 100.0 },
            weight_refresh_period: 1,
            init_scale: 0.1,
            seed: 0,
        }
    }
}

impl ShootingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config(format!(
                "shooting.tau: must be positive, got {}",
                self.tau
            )));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::Config(format!(
                "shooting.beta: must be nonnegative, got {}",
                self.beta
            )));
        }
        if self.inner_steps == 0 {
            return Err(Error::Config("shooting.inner_steps: must be at least 1".into()));
        }
        if self.weight_refresh_period == 0 {
            return Err(Error::Config(
                "shooting.weight_refresh_period: must be at least 1".into(),
            ));
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(Error::Config(format!(
                "shooting.init_scale: must be nonnegative, got {}",
                self.init_scale
            )));
        }
        if let WeightScheme::Gibbs { c } = self.weight_scheme {
            if !(c.is_finite() && c >= 0.0) {
                return Err(Error::Config(format!(
                    "shooting.weight_scheme.c: must be nonnegative, got {c}"
                )));
            }
        }
        Ok(())
    }
}

/// One record per shooting iterate, including the initial guess.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HistoryEntry {
    pub iteration: usize,
    /// Mean over particles of the worst perturbation loss.
    pub robust_objective: f64,
    /// Weight-averaged terminal loss under the current weights.
    pub weighted_objective: f64,
    /// Stationarity residual of the Hamiltonian along the iterate.
    pub pmp_residual: f64,
    /// Mean per-particle entropy of the weight rows.
    pub weight_entropy_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingHistory {
    pub entries: Vec<HistoryEntry>,
}

impl TrainingHistory {
    pub fn first(&self) -> &HistoryEntry {
        self.entries.first().expect("history is never empty")
    }

    pub fn last(&self) -> &HistoryEntry {
        self.entries.last().expect("history is never empty")
    }
}

/// Deterministic control initialization: entries i.i.d. uniform in
/// `[-scale, scale)` from a dedicated RNG stream.
pub fn initial_schedule(grid: TimeGrid, dim: usize, scale: f64, seed: u64) -> ControlSchedule {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SeedStream::ControlInit));
    let values = (0..grid.node_count())
        .map(|_| {
            let weight = Array2::from_shape_fn((dim, dim), |_| {
                if scale > 0.0 {
                    rng.random_range(-scale..scale)
                } else {
                    0.0
                }
            });
            let bias = Array1::from_shape_fn(dim, |_| {
                if scale > 0.0 {
                    rng.random_range(-scale..scale)
                } else {
                    0.0
                }
            });
            ControlValue::new(weight, bias)
        })
        .collect();
    ControlSchedule::new(grid, values)
}

/// FNV-1a over the bit patterns of a schedule's flattened controls; used to
/// assert that runs meant to share an initialization really do.
pub fn schedule_fingerprint(u: &ControlSchedule) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    let mut absorb = |bits: u64| {
        for byte in bits.to_le_bytes() {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    absorb(u.grid.node_count() as u64);
    for value in &u.values {
        for v in value.to_flat().iter() {
            absorb(v.to_bits());
        }
    }
    hash
}

/// Ascend the proximally anchored Hamiltonian
/// `H_beta(omega) - |omega - u_prev|^2 / (2 tau)` from `omega = u_prev`.
///
/// Inner step `s` uses step size `tau / (1 + s)`, halved up to 20 times
/// until the augmented Hamiltonian does not decrease; if no step is
/// accepted the current point is returned, so the result never falls below
/// the anchor value.
pub fn hamiltonian_max_step(
    x: &Ensemble,
    p: &Ensemble,
    u_prev: &ControlValue,
    tau: f64,
    beta: f64,
    inner_steps: usize,
) -> ControlValue {
    assert!(tau > 0.0, "proximal parameter must be positive");
    assert!(inner_steps >= 1, "need at least one ascent step");
    let dim = u_prev.dim();
    let anchor = u_prev.to_flat();
    let augmented = |omega: &ControlValue| {
        let drift = omega.to_flat() - &anchor;
        hamiltonian(x, p, omega, beta) - drift.dot(&drift) / (2.0 * tau)
    };

    let mut omega = u_prev.clone();
    let mut value = augmented(&omega);
    for s in 0..inner_steps {
        let mut grad = hamiltonian_control_gradient(x, p, &omega, beta);
        let drift = omega.to_flat() - &anchor;
        grad.scaled_add(-1.0 / tau, &drift);

        let mut eta = tau / (1.0 + s as f64);
        let mut accepted = false;
        for _ in 0..=20 {
            let candidate =
                ControlValue::from_flat(dim, (omega.to_flat() + eta * &grad).view());
            let candidate_value = augmented(&candidate);
            if candidate_value >= value {
                omega = candidate;
                value = candidate_value;
                accepted = true;
                break;
            }
            eta *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    omega
}

/// Run the shooting method. Returns the final schedule and one history entry
/// per iterate, from the initial guess through iteration `iter_max`.
pub fn train(
    config: &ShootingConfig,
    grid: TimeGrid,
    batch: &PerturbedBatch,
    targets: &ClassTargets,
) -> Result<(ControlSchedule, TrainingHistory)> {
    config.validate()?;
    let dim = batch.ensemble.dim();
    let steps = grid.node_count();
    let mut u = initial_schedule(grid, dim, config.init_scale, config.seed);
    let mut history = TrainingHistory::default();
    let mut gamma: Option<WeightMatrix> = None;

    for iteration in 0..=config.iter_max {
        let wrap = |source: Error| Error::Shooting {
            iteration,
            source: Box::new(source),
        };
        let traj = flow_forward(&batch.ensemble, &u).map_err(wrap)?;
        let losses = loss_matrix(traj.terminal(), &batch.labels, targets);
        if gamma.is_none() || iteration % config.weight_refresh_period == 0 {
            gamma = Some(config.weight_scheme.weights(&losses).map_err(wrap)?);
        }
        let gamma_ref = gamma.as_ref().expect("weights initialized above");

        let grads = loss_gradients(traj.terminal(), &batch.labels, targets);
        let pt = terminal_covector(traj.terminal(), gamma_ref, &grads);
        let adj = flow_backward(&traj, &u, pt).map_err(wrap)?;

        history.entries.push(HistoryEntry {
            iteration,
            robust_objective: robust_objective_of(&losses),
            weighted_objective: weighted_objective_of(&losses, gamma_ref),
            pmp_residual: pmp_residual(&traj, &adj, &u, config.beta),
            weight_entropy_mean: gamma_ref.mean_row_entropy(),
        });
        if iteration == config.iter_max {
            break;
        }

        // The covector sweep above used the current controls throughout, so
        // the per-node updates can be applied in any order.
        let mut next = u.clone();
        for n in 0..steps {
            next.values[n] = hamiltonian_max_step(
                &traj.snapshots[n],
                &adj.snapshots[n + 1],
                &u.values[n],
                config.tau,
                config.beta,
                config.inner_steps,
            );
        }
        u = next;
    }
    Ok((u, history))
}
