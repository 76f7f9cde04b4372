//! Independent numerical verification: finite-difference gradients,
//! stationarity residuals, and weight-support checks.
//!
//! Everything here deliberately avoids the analytic adjoint path so it can
//! serve as an oracle for it.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adjoint::{flow_backward, terminal_covector, AdjointTrajectory};
use crate::dynamics::{
    flow_forward, hamiltonian, hamiltonian_control_gradient, jacobian_control, jacobian_state,
    vector_field, ControlSchedule, ControlValue, Ensemble, Trajectory,
};
use crate::task::{
    loss_gradients, loss_matrix, terminal_loss, terminal_loss_gradient, ClassTargets,
    PerturbedBatch,
};
use crate::weights::{LossMatrix, WeightMatrix};
use crate::{Error, Result};

/// Default central-difference step: balances truncation against roundoff
/// for order-one controls in double precision.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Central finite differences of a scalar objective with respect to every
/// flattened control coordinate at every node. Costs `2 L m` objective
/// evaluations.
pub fn finite_difference_gradient<F>(
    mut objective: F,
    u: &ControlSchedule,
    h: f64,
) -> Result<Vec<Array1<f64>>>
where
    F: FnMut(&ControlSchedule) -> Result<f64>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let dim = u.dim();
    let steps = u.grid.node_count();
    let mut grads = Vec::with_capacity(steps);
    for node in 0..steps {
        let flat = u.values[node].to_flat();
        let mut g = Array1::zeros(flat.len());
        for coord in 0..flat.len() {
            let mut probe = |sign: f64| -> Result<f64> {
                let mut shifted = flat.clone();
                shifted[coord] += sign * h;
                let mut uh = u.clone();
                uh.values[node] = ControlValue::from_flat(dim, shifted.view());
                let value = objective(&uh).map_err(|_| Error::NonFiniteProbe { node, coord })?;
                if !value.is_finite() {
                    return Err(Error::NonFiniteProbe { node, coord });
                }
                Ok(value)
            };
            let plus = probe(1.0)?;
            let minus = probe(-1.0)?;
            g[coord] = (plus - minus) / (2.0 * h);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Maximum-principle stationarity residual: the largest per-node 2-norm of
/// the Hamiltonian control gradient along the trajectory, using the node
/// pairing of the discrete adjoint (state at `n`, covector at `n + 1`).
/// Zero exactly when every node is control-stationary.
pub fn pmp_residual(
    traj: &Trajectory,
    adj: &AdjointTrajectory,
    u: &ControlSchedule,
    beta: f64,
) -> f64 {
    let steps = u.grid.node_count();
    assert_eq!(traj.grid, adj.grid, "trajectory and adjoint grids differ");
    (0..steps)
        .map(|n| {
            let g = hamiltonian_control_gradient(
                &traj.snapshots[n],
                &adj.snapshots[n + 1],
                &u.values[n],
                beta,
            );
            g.iter().map(|v| v * v).sum::<f64>().sqrt()
        })
        .fold(0.0, f64::max)
}

/// Per-row support check: row `i` passes when every weight above `tol` sits
/// on a loss within `tol` of the row maximum.
pub fn support_condition_check(gamma: &WeightMatrix, losses: &LossMatrix, tol: f64) -> Vec<bool> {
    assert!(tol >= 0.0, "tolerance must be nonnegative");
    let (m, n) = losses.values.dim();
    assert_eq!(
        (gamma.particle_count(), gamma.perturbation_count()),
        (m, n),
        "weight/loss shape mismatch"
    );
    (0..m)
        .map(|i| {
            let row = losses.values.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (0..n).all(|j| gamma.rows()[[i, j]] <= tol || row[j] >= max - tol)
        })
        .collect()
}

/// Outcome of [`surrogate_extremal_check`].
#[derive(Debug, Clone, Serialize)]
pub struct ExtremalReport {
    pub pmp_residual: f64,
    pub fd_gradient_norm: f64,
    pub ratio: f64,
    pub threshold: f64,
    pub passed: bool,
}

/// Checks that a control is approximately stationary for the weighted
/// objective induced by a fixed weight matrix: the adjoint-based residual
/// and the finite-difference gradient norm of the penalized weighted
/// objective must both fall below the threshold.
pub fn surrogate_extremal_check(
    u: &ControlSchedule,
    batch: &PerturbedBatch,
    gamma: &WeightMatrix,
    targets: &ClassTargets,
    beta: f64,
    threshold: f64,
) -> Result<ExtremalReport> {
    let traj = flow_forward(&batch.ensemble, u)?;
    let grads = loss_gradients(traj.terminal(), &batch.labels, targets);
    let pt = terminal_covector(traj.terminal(), gamma, &grads);
    let adj = flow_backward(&traj, u, pt)?;
    let residual = pmp_residual(&traj, &adj, u, beta);

    let m = batch.ensemble.particle_count() as f64;
    let dt = u.grid.dt();
    let objective = |u: &ControlSchedule| -> Result<f64> {
        let traj = flow_forward(&batch.ensemble, u)?;
        let losses = loss_matrix(traj.terminal(), &batch.labels, targets);
        let weighted: f64 = losses
            .values
            .iter()
            .zip(gamma.rows().iter())
            .map(|(l, g)| g * l)
            .sum();
        Ok(weighted / m + beta * dt * u.norm_sq())
    };
    let fd = finite_difference_gradient(objective, u, DEFAULT_FD_STEP)?;
    let fd_norm = crate::adjoint::gradient_norm(&fd);

    let ratio = if fd_norm > 0.0 {
        residual / fd_norm
    } else {
        f64::INFINITY
    };
    Ok(ExtremalReport {
        pmp_residual: residual,
        fd_gradient_norm: fd_norm,
        ratio,
        threshold,
        passed: residual <= threshold && fd_norm <= threshold,
    })
}

/// One analytic-versus-numeric comparison in the pre-flight suite.
#[derive(Debug, Clone, Serialize)]
pub struct PreflightCheck {
    pub name: &'static str,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Fast oracle self-test run before any training: finite differences must
/// recover the analytic derivatives of the field, the control Jacobian
/// assembly, the terminal loss, and the Hamiltonian.
#[derive(Debug, Clone, Serialize)]
pub struct PreflightReport {
    pub checks: Vec<PreflightCheck>,
    pub passed: bool,
}

pub fn preflight(seed: u64) -> PreflightReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let trials = 25;
    let mut state_jac: f64 = 0.0;
    let mut control_jac: f64 = 0.0;
    let mut loss_grad: f64 = 0.0;
    let mut ham_grad: f64 = 0.0;
    let targets = ClassTargets::default();

    for _ in 0..trials {
        let u = ControlValue::new(
            Array2::from_shape_fn((2, 2), |_| rng.random_range(-1.5..1.5)),
            Array1::from_shape_fn(2, |_| rng.random_range(-1.5..1.5)),
        );
        let x = Array1::from_shape_fn(2, |_| rng.random_range(-1.5..1.5));

        let analytic = jacobian_state(x.view(), &u);
        let scale = analytic.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-9);
        for l in 0..2 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[l] += h;
            xm[l] -= h;
            let fp = vector_field(xp.view(), &u);
            let fm = vector_field(xm.view(), &u);
            for k in 0..2 {
                let numeric = (fp[k] - fm[k]) / (2.0 * h);
                state_jac = state_jac.max((analytic[[k, l]] - numeric).abs() / scale);
            }
        }

        let analytic = jacobian_control(x.view(), &u);
        let scale = analytic.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-9);
        let flat = u.to_flat();
        for c in 0..flat.len() {
            let mut fp = flat.clone();
            let mut fm = flat.clone();
            fp[c] += h;
            fm[c] -= h;
            let vp = vector_field(x.view(), &ControlValue::from_flat(2, fp.view()));
            let vm = vector_field(x.view(), &ControlValue::from_flat(2, fm.view()));
            for k in 0..2 {
                let numeric = (vp[k] - vm[k]) / (2.0 * h);
                control_jac = control_jac.max((analytic[[k, c]] - numeric).abs() / scale);
            }
        }

        let label = u8::from(rng.random_range(0.0..1.0) > 0.5);
        let g = terminal_loss_gradient(x.view(), label, &targets);
        for c in 0..2 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[c] += h;
            xm[c] -= h;
            let numeric = (terminal_loss(xp.view(), label, &targets)
                - terminal_loss(xm.view(), label, &targets))
                / (2.0 * h);
            loss_grad = loss_grad.max((g[c] - numeric).abs() / numeric.abs().max(1.0));
        }

        let xs = Ensemble::new(ndarray::Array3::from_shape_fn((2, 2, 2), |_| {
            rng.random_range(-1.0..1.0)
        }));
        let ps = Ensemble::new(ndarray::Array3::from_shape_fn((2, 2, 2), |_| {
            rng.random_range(-1.0..1.0)
        }));
        let beta = 0.05;
        let analytic = hamiltonian_control_gradient(&xs, &ps, &u, beta);
        let scale = analytic.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-9);
        for c in 0..flat.len() {
            let mut fp = flat.clone();
            let mut fm = flat.clone();
            fp[c] += h;
            fm[c] -= h;
            let hp = hamiltonian(&xs, &ps, &ControlValue::from_flat(2, fp.view()), beta);
            let hm = hamiltonian(&xs, &ps, &ControlValue::from_flat(2, fm.view()), beta);
            let numeric = (hp - hm) / (2.0 * h);
            ham_grad = ham_grad.max((analytic[c] - numeric).abs() / scale);
        }
    }

    let checks = vec![
        PreflightCheck {
            name: "state_jacobian_vs_central_differences",
            max_relative_error: state_jac,
            tolerance: 1e-6,
            passed: state_jac < 1e-6,
        },
        PreflightCheck {
            name: "control_jacobian_vs_central_differences",
            max_relative_error: control_jac,
            tolerance: 1e-6,
            passed: control_jac < 1e-6,
        },
        PreflightCheck {
            name: "terminal_loss_gradient_vs_central_differences",
            max_relative_error: loss_grad,
            tolerance: 1e-8,
            passed: loss_grad < 1e-8,
        },
        PreflightCheck {
            name: "hamiltonian_control_gradient_vs_central_differences",
            max_relative_error: ham_grad,
            tolerance: 1e-6,
            passed: ham_grad < 1e-6,
        },
    ];
    let passed = checks.iter().all(|c| c.passed);
    PreflightReport { checks, passed }
}

/// One entry of the standard check battery run by the `verify` subcommand.
#[derive(Debug, Clone, Serialize)]
pub struct NamedCheck {
    pub name: &'static str,
    pub measured: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl NamedCheck {
    fn below(name: &'static str, measured: f64, threshold: f64) -> Self {
        NamedCheck {
            name,
            measured,
            threshold,
            passed: measured < threshold,
        }
    }
}

/// Full verification battery: the pre-flight derivative oracle, gradient
/// agreement between the adjoint and finite differences on a small random
/// instance, weight-scheme invariants, the support condition, the weighted
/// bound on the robust objective, and a residual decrease over a short
/// training run.
pub fn standard_checks(seed: u64) -> Result<Vec<NamedCheck>> {
    use crate::adjoint::{gradient_norm, weighted_objective_gradient};
    use crate::dynamics::TimeGrid;
    use crate::evaluation::{robust_objective_of, weighted_objective_of};
    use crate::shooting::{train, ShootingConfig, WeightScheme};
    use crate::task::{generate_dataset, generate_perturbations, BoundaryCurve};
    use crate::weights::{gibbs_weights, uniform_weights, worst_case_weights};

    let mut checks = Vec::new();
    for check in preflight(seed).checks {
        checks.push(NamedCheck {
            name: check.name,
            measured: check.max_relative_error,
            threshold: check.tolerance,
            passed: check.passed,
        });
    }

    // Adjoint gradient versus finite differences of the penalized weighted
    // objective on small random instances.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = TimeGrid::new(1.0, 10);
    let (m, n) = (3usize, 2usize);
    let beta = 0.01;
    let mut worst_rel: f64 = 0.0;
    for _ in 0..5 {
        let x0 = Ensemble::new(ndarray::Array3::from_shape_fn((m, n, 2), |_| {
            rng.random_range(0.0..1.0)
        }));
        let labels: Vec<u8> = (0..m)
            .map(|_| u8::from(rng.random_range(0.0..1.0) > 0.5))
            .collect();
        let mut rows = Array2::from_shape_fn((m, n), |_| rng.random_range(0.05..1.0));
        for mut row in rows.rows_mut() {
            let sum: f64 = row.iter().sum();
            row.mapv_inplace(|v| v / sum);
        }
        let gamma = WeightMatrix::new(rows)?;
        let values = (0..grid.node_count())
            .map(|_| {
                ControlValue::new(
                    Array2::from_shape_fn((2, 2), |_| rng.random_range(-0.8..0.8)),
                    Array1::from_shape_fn(2, |_| rng.random_range(-0.8..0.8)),
                )
            })
            .collect();
        let u = ControlSchedule::new(grid, values);
        let targets = ClassTargets::default();

        let traj = flow_forward(&x0, &u)?;
        let grads = loss_gradients(traj.terminal(), &labels, &targets);
        let pt = terminal_covector(traj.terminal(), &gamma, &grads);
        let adj = flow_backward(&traj, &u, pt)?;
        let analytic = weighted_objective_gradient(&traj, &adj, &u, beta);

        let objective = |u: &ControlSchedule| -> Result<f64> {
            let traj = flow_forward(&x0, u)?;
            let losses = loss_matrix(traj.terminal(), &labels, &targets);
            Ok(weighted_objective_of(&losses, &gamma) + beta * grid.dt() * u.norm_sq())
        };
        let numeric = finite_difference_gradient(objective, &u, DEFAULT_FD_STEP)?;
        let diff: f64 = analytic
            .iter()
            .zip(numeric.iter())
            .flat_map(|(a, b)| a.iter().zip(b.iter()))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        worst_rel = worst_rel.max(diff / gradient_norm(&numeric).max(1e-30));
    }
    checks.push(NamedCheck::below(
        "adjoint_gradient_vs_finite_differences",
        worst_rel,
        1e-4,
    ));

    // Weight invariants and the support condition on random losses.
    let mut simplex_violation: f64 = 0.0;
    let mut bound_violation: f64 = f64::NEG_INFINITY;
    let mut wc_support_ok = true;
    let mut gibbs_sharp_ok = true;
    for _ in 0..200 {
        let losses = LossMatrix::new(Array2::from_shape_fn((4, 4), |_| {
            rng.random_range(-2.0..2.0)
        }));
        for gamma in [
            uniform_weights(4, 4)?,
            gibbs_weights(&losses, 100.0),
            worst_case_weights(&losses),
        ] {
            for row in gamma.rows().rows() {
                let sum: f64 = row.iter().sum();
                simplex_violation = simplex_violation.max((sum - 1.0).abs());
                simplex_violation =
                    simplex_violation.max(-row.iter().cloned().fold(0.0f64, f64::min));
            }
            bound_violation = bound_violation
                .max(weighted_objective_of(&losses, &gamma) - robust_objective_of(&losses));
        }
        let wc = worst_case_weights(&losses);
        wc_support_ok &= support_condition_check(&wc, &losses, 0.0).iter().all(|ok| *ok);
        let sharp = gibbs_weights(&losses, 1e4);
        for (i, ok) in support_condition_check(&sharp, &losses, 1e-5).iter().enumerate() {
            let row = losses.values.row(i);
            let mut sorted: Vec<f64> = row.to_vec();
            sorted.sort_by(f64::total_cmp);
            let gap = sorted[sorted.len() - 1] - sorted[sorted.len() - 2];
            if gap >= 0.01 {
                gibbs_sharp_ok &= ok;
            }
        }
    }
    checks.push(NamedCheck::below(
        "weight_rows_on_the_simplex",
        simplex_violation,
        crate::weights::SIMPLEX_TOL,
    ));
    checks.push(NamedCheck::below(
        "weighted_objective_bounded_by_robust",
        bound_violation,
        1e-12,
    ));
    checks.push(NamedCheck {
        name: "worst_case_support_condition",
        measured: f64::from(u8::from(wc_support_ok)),
        threshold: 1.0,
        passed: wc_support_ok,
    });
    checks.push(NamedCheck {
        name: "sharp_gibbs_support_condition",
        measured: f64::from(u8::from(gibbs_sharp_ok)),
        threshold: 1.0,
        passed: gibbs_sharp_ok,
    });

    // A short training run must reduce the stationarity residual.
    let boundary = BoundaryCurve::default();
    let targets = ClassTargets::default();
    let ds = generate_dataset(seed, 10, 0.05, &boundary)?;
    let batch = generate_perturbations(&ds, 4, 0.02, 0.05, &boundary)?;
    let config = ShootingConfig {
        iter_max: 80,
        weight_scheme: WeightScheme::Gibbs { c: 100.0 },
        seed,
        ..Default::default()
    };
    let (_, history) = train(&config, TimeGrid::new(1.0, 20), &batch, &targets)?;
    let ratio = history.last().pmp_residual / history.first().pmp_residual.max(1e-30);
    checks.push(NamedCheck::below(
        "pmp_residual_decreases_over_training",
        ratio,
        1.0,
    ));
    Ok(checks)
}
