//! Controlled vector field, ensemble forward flow, and Hamiltonian.
//!
//! The field is fixed to the residual-layer form `F(x, u) = tanh(W x + b)`
//! with control `u = (W, b)`. Everything downstream reaches it only through
//! [`vector_field`] and its Jacobians, so swapping the field is a local
//! change.

use ndarray::{s, Array1, Array2, Array3, ArrayView1};

use crate::{Error, Result};

/// Uniform discretization of `[0, T]` into `node_count` Euler steps.
///
/// The step size is always derived from the horizon and the step count;
/// the step count is never recovered from a float division.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    node_count: usize,
    dt: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, node_count: usize) -> Self {
        assert!(
            horizon.is_finite() && horizon > 0.0,
            "horizon must be finite and positive"
        );
        assert!(node_count >= 1, "need at least one time step");
        TimeGrid {
            horizon,
            node_count,
            dt: horizon / node_count as f64,
        }
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of Euler steps; states live on `node_count + 1` nodes.
    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }
}

/// One layer's parameters: a `d x d` weight matrix and a `d` bias vector.
/// Flattened control dimension is `d^2 + d`, ordered `W` row-major then `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlValue {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ControlValue {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>) -> Self {
        assert!(
            weight.nrows() == weight.ncols() && weight.nrows() == bias.len(),
            "control shapes disagree: W is {}x{}, b has length {}",
            weight.nrows(),
            weight.ncols(),
            bias.len()
        );
        assert!(
            weight.iter().chain(bias.iter()).all(|v| v.is_finite()),
            "control entries must be finite"
        );
        ControlValue { weight, bias }
    }

    pub fn zeros(dim: usize) -> Self {
        ControlValue {
            weight: Array2::zeros((dim, dim)),
            bias: Array1::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    pub fn flat_len(&self) -> usize {
        let d = self.dim();
        d * d + d
    }

    /// Flatten as `[W_00, W_01, .., W_dd, b_0, .., b_d]`.
    pub fn to_flat(&self) -> Array1<f64> {
        let d = self.dim();
        let mut flat = Array1::zeros(d * d + d);
        for k in 0..d {
            for l in 0..d {
                flat[k * d + l] = self.weight[[k, l]];
            }
            flat[d * d + k] = self.bias[k];
        }
        flat
    }

    pub fn from_flat(dim: usize, flat: ArrayView1<f64>) -> Self {
        assert_eq!(flat.len(), dim * dim + dim, "flat control length mismatch");
        let mut weight = Array2::zeros((dim, dim));
        let mut bias = Array1::zeros(dim);
        for k in 0..dim {
            for l in 0..dim {
                weight[[k, l]] = flat[k * dim + l];
            }
            bias[k] = flat[dim * dim + k];
        }
        ControlValue { weight, bias }
    }

    /// Squared 2-norm of the flattened control.
    pub fn norm_sq(&self) -> f64 {
        let w: f64 = self.weight.iter().map(|v| v * v).sum();
        let b: f64 = self.bias.iter().map(|v| v * v).sum();
        w + b
    }
}

/// Piecewise-constant control: `values[n]` applies on `[t_n, t_{n+1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSchedule {
    pub grid: TimeGrid,
    pub values: Vec<ControlValue>,
}

impl ControlSchedule {
    pub fn new(grid: TimeGrid, values: Vec<ControlValue>) -> Self {
        assert_eq!(
            values.len(),
            grid.node_count(),
            "schedule needs one control value per time step"
        );
        ControlSchedule { grid, values }
    }

    pub fn zeros(grid: TimeGrid, dim: usize) -> Self {
        let values = (0..grid.node_count())
            .map(|_| ControlValue::zeros(dim))
            .collect();
        ControlSchedule { grid, values }
    }

    pub fn dim(&self) -> usize {
        self.values[0].dim()
    }

    /// Sum over nodes of the squared flattened control norm.
    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(ControlValue::norm_sq).sum()
    }
}

/// States of every perturbation of every particle: an `M x N x d` tensor.
/// Covectors reuse the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub states: Array3<f64>,
}

impl Ensemble {
    pub fn new(states: Array3<f64>) -> Self {
        assert!(
            states.iter().all(|v| v.is_finite()),
            "ensemble entries must be finite"
        );
        Ensemble { states }
    }

    pub fn zeros(particles: usize, perturbations: usize, dim: usize) -> Self {
        Ensemble {
            states: Array3::zeros((particles, perturbations, dim)),
        }
    }

    pub fn particle_count(&self) -> usize {
        self.states.shape()[0]
    }

    pub fn perturbation_count(&self) -> usize {
        self.states.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.states.shape()[2]
    }

    pub fn is_finite(&self) -> bool {
        self.states.iter().all(|v| v.is_finite())
    }
}

/// Full time history of an ensemble: `node_count + 1` snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub snapshots: Vec<Ensemble>,
}

impl Trajectory {
    pub fn terminal(&self) -> &Ensemble {
        self.snapshots.last().expect("trajectory is never empty")
    }
}

fn sech_sq(z: f64) -> f64 {
    let t = z.tanh();
    1.0 - t * t
}

/// The controlled field `F(x, u) = tanh(W x + b)`, evaluated componentwise.
pub fn vector_field(x: ArrayView1<f64>, u: &ControlValue) -> Array1<f64> {
    let mut z = u.weight.dot(&x);
    z += &u.bias;
    z.mapv_inplace(f64::tanh);
    z
}

/// Analytic state Jacobian `dF/dx = diag(1 - tanh^2(W x + b)) W`.
pub fn jacobian_state(x: ArrayView1<f64>, u: &ControlValue) -> Array2<f64> {
    let mut z = u.weight.dot(&x);
    z += &u.bias;
    let mut jac = u.weight.clone();
    for (k, mut row) in jac.rows_mut().into_iter().enumerate() {
        row *= sech_sq(z[k]);
    }
    jac
}

/// Analytic control Jacobian, a `d x (d^2 + d)` matrix in the flattened
/// control ordering: output `k` responds to `W_{k,l}` with
/// `(1 - tanh^2(z_k)) x_l` and to `b_k` with `(1 - tanh^2(z_k))`.
pub fn jacobian_control(x: ArrayView1<f64>, u: &ControlValue) -> Array2<f64> {
    let d = u.dim();
    assert_eq!(x.len(), d, "state/control dimension mismatch");
    let mut z = u.weight.dot(&x);
    z += &u.bias;
    let mut jac = Array2::zeros((d, d * d + d));
    for k in 0..d {
        let sk = sech_sq(z[k]);
        for l in 0..d {
            jac[[k, k * d + l]] = sk * x[l];
        }
        jac[[k, d * d + k]] = sk;
    }
    jac
}

/// Explicit Euler flow of the whole ensemble. Trajectories never interact;
/// the update is applied per `(particle, perturbation)` pair.
pub fn flow_forward(x0: &Ensemble, u: &ControlSchedule) -> Result<Trajectory> {
    let dt = u.grid.dt();
    let (m, n) = (x0.particle_count(), x0.perturbation_count());
    assert_eq!(x0.dim(), u.dim(), "state/control dimension mismatch");

    if !x0.is_finite() {
        return Err(Error::NonFinite {
            quantity: "state",
            node: 0,
        });
    }
    let mut snapshots = Vec::with_capacity(u.grid.node_count() + 1);
    snapshots.push(x0.clone());
    for step in 0..u.grid.node_count() {
        let prev = snapshots.last().expect("at least the initial snapshot");
        let mut next = prev.clone();
        for i in 0..m {
            for j in 0..n {
                let f = vector_field(prev.states.slice(s![i, j, ..]), &u.values[step]);
                let mut target = next.states.slice_mut(s![i, j, ..]);
                target.scaled_add(dt, &f);
            }
        }
        if !next.is_finite() {
            return Err(Error::NonFinite {
                quantity: "state",
                node: step + 1,
            });
        }
        snapshots.push(next);
    }
    Ok(Trajectory {
        grid: u.grid,
        snapshots,
    })
}

/// Ensemble Hamiltonian with control-energy penalty:
/// `H(X, P, u) = sum_{i,j} <p_i_j, F(x_i_j, u)> - beta |u|^2`.
pub fn hamiltonian(x: &Ensemble, p: &Ensemble, u: &ControlValue, beta: f64) -> f64 {
    assert_eq!(
        x.states.shape(),
        p.states.shape(),
        "state/covector shape mismatch"
    );
    assert!(beta >= 0.0, "penalty weight must be nonnegative");
    let (m, n) = (x.particle_count(), x.perturbation_count());
    let mut h = 0.0;
    for i in 0..m {
        for j in 0..n {
            let f = vector_field(x.states.slice(s![i, j, ..]), u);
            h += p.states.slice(s![i, j, ..]).dot(&f);
        }
    }
    h - beta * u.norm_sq()
}

/// Exact control gradient of [`hamiltonian`]:
/// `sum_{i,j} (dF/du)^T p_i_j - 2 beta u`, as a flattened vector.
pub fn hamiltonian_control_gradient(
    x: &Ensemble,
    p: &Ensemble,
    u: &ControlValue,
    beta: f64,
) -> Array1<f64> {
    assert_eq!(
        x.states.shape(),
        p.states.shape(),
        "state/covector shape mismatch"
    );
    let (m, n) = (x.particle_count(), x.perturbation_count());
    let mut grad = Array1::zeros(u.flat_len());
    for i in 0..m {
        for j in 0..n {
            let ju = jacobian_control(x.states.slice(s![i, j, ..]), u);
            grad += &ju.t().dot(&p.states.slice(s![i, j, ..]));
        }
    }
    grad.scaled_add(-2.0 * beta, &u.to_flat());
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_control(rng: &mut ChaCha8Rng, dim: usize) -> ControlValue {
        let weight = Array2::from_shape_fn((dim, dim), |_| rng.random_range(-2.0..2.0));
        let bias = Array1::from_shape_fn(dim, |_| rng.random_range(-2.0..2.0));
        ControlValue::new(weight, bias)
    }

    fn random_vec(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
        Array1::from_shape_fn(dim, |_| rng.random_range(-2.0..2.0))
    }

    fn max_rel_err(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
        let scale = numeric.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-12);
        analytic
            .iter()
            .zip(numeric.iter())
            .map(|(a, n)| (a - n).abs() / scale)
            .fold(0.0, f64::max)
    }

    #[test]
    fn field_is_zero_for_zero_control() {
        let u = ControlValue::zeros(2);
        let f = vector_field(array![0.3, -1.7].view(), &u);
        assert_eq!(f, array![0.0, 0.0]);
    }

    #[test]
    fn field_matches_scalar_tanh() {
        // tanh(0.5) evaluated independently.
        let u = ControlValue::new(Array2::eye(2), Array1::zeros(2));
        let f = vector_field(array![0.5, 0.5].view(), &u);
        assert!((f[0] - 0.46211715726000974).abs() < 1e-15);
        assert!((f[1] - 0.46211715726000974).abs() < 1e-15);
    }

    #[test]
    fn field_saturates_for_large_bias() {
        let u = ControlValue::new(Array2::zeros((2, 2)), array![1e3, 0.0]);
        let f = vector_field(array![0.1, 0.2].view(), &u);
        assert!((f[0] - 1.0).abs() < 1e-12);
        assert_eq!(f[1], 0.0);
    }

    #[test]
    fn state_jacobian_equals_weight_at_zero_preactivation() {
        let w = array![[0.4, -0.3], [1.1, 0.2]];
        let u = ControlValue::new(w.clone(), Array1::zeros(2));
        let jac = jacobian_state(array![0.0, 0.0].view(), &u);
        assert_eq!(jac, w);
    }

    #[test]
    fn state_jacobian_vanishes_for_zero_weight() {
        let u = ControlValue::new(Array2::zeros((2, 2)), array![0.7, -0.2]);
        let jac = jacobian_state(array![1.0, 2.0].view(), &u);
        assert!(jac.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn state_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        for _ in 0..100 {
            let u = random_control(&mut rng, 2);
            let x = random_vec(&mut rng, 2);
            let analytic = jacobian_state(x.view(), &u);
            let mut numeric = Array2::zeros((2, 2));
            for l in 0..2 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[l] += h;
                xm[l] -= h;
                let fp = vector_field(xp.view(), &u);
                let fm = vector_field(xm.view(), &u);
                for k in 0..2 {
                    numeric[[k, l]] = (fp[k] - fm[k]) / (2.0 * h);
                }
            }
            assert!(
                max_rel_err(&analytic, &numeric) < 1e-6,
                "state Jacobian disagrees with central differences"
            );
        }
    }

    #[test]
    fn control_jacobian_structure_at_zero_state() {
        let u = ControlValue::new(array![[0.5, -0.4], [0.1, 0.9]], array![0.3, -0.8]);
        let jac = jacobian_control(array![0.0, 0.0].view(), &u);
        // Zero state kills every W sensitivity.
        for k in 0..2 {
            for l in 0..2 {
                assert_eq!(jac[[k, k * 2 + l]], 0.0);
            }
        }
        for k in 0..2 {
            let t = u.bias[k].tanh();
            assert!((jac[[k, 4 + k]] - (1.0 - t * t)).abs() < 1e-15);
        }
    }

    #[test]
    fn control_jacobian_vanishes_under_saturation() {
        let u = ControlValue::new(Array2::zeros((2, 2)), array![20.0, -20.0]);
        let jac = jacobian_control(array![0.5, 0.5].view(), &u);
        assert!(jac.iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn control_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let h = 1e-6;
        for _ in 0..100 {
            let u = random_control(&mut rng, 2);
            let x = random_vec(&mut rng, 2);
            let analytic = jacobian_control(x.view(), &u);
            let flat = u.to_flat();
            let mut numeric = Array2::zeros((2, 6));
            for c in 0..6 {
                let mut fp = flat.clone();
                let mut fm = flat.clone();
                fp[c] += h;
                fm[c] -= h;
                let up = ControlValue::from_flat(2, fp.view());
                let um = ControlValue::from_flat(2, fm.view());
                let vp = vector_field(x.view(), &up);
                let vm = vector_field(x.view(), &um);
                for k in 0..2 {
                    numeric[[k, c]] = (vp[k] - vm[k]) / (2.0 * h);
                }
            }
            assert!(
                max_rel_err(&analytic, &numeric) < 1e-6,
                "control Jacobian disagrees with central differences"
            );
        }
    }

    #[test]
    fn zero_schedule_freezes_the_flow() {
        let grid = TimeGrid::new(1.0, 20);
        let u = ControlSchedule::zeros(grid, 2);
        let x0 = Ensemble::new(Array3::from_shape_fn((3, 2, 2), |(i, j, k)| {
            0.1 * (i + 2 * j + 4 * k) as f64
        }));
        let traj = flow_forward(&x0, &u).unwrap();
        for snap in &traj.snapshots {
            assert_eq!(snap.states, x0.states);
        }
    }

    #[test]
    fn single_euler_step_matches_hand_evaluation() {
        // One step from the origin with W = I, b = (1, 0), dt = 0.05:
        // x1 = (0.05 * tanh(1), 0), tanh(1) = 0.7615941559557649.
        let grid = TimeGrid::new(0.05, 1);
        let u = ControlSchedule::new(
            grid,
            vec![ControlValue::new(Array2::eye(2), array![1.0, 0.0])],
        );
        let x0 = Ensemble::zeros(1, 1, 2);
        let traj = flow_forward(&x0, &u).unwrap();
        let x1 = traj.terminal();
        assert!((x1.states[[0, 0, 0]] - 0.03807970779778824).abs() < 1e-15);
        assert_eq!(x1.states[[0, 0, 1]], 0.0);
    }

    #[test]
    fn ensemble_flow_equals_per_trajectory_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let grid = TimeGrid::new(1.0, 10);
        let u = ControlSchedule::new(grid, (0..10).map(|_| random_control(&mut rng, 2)).collect());
        let x0 = Ensemble::new(Array3::from_shape_fn((4, 3, 2), |_| {
            rng.random_range(0.0..1.0)
        }));
        let full = flow_forward(&x0, &u).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let single = Ensemble::new(
                    x0.states
                        .slice(s![i..i + 1, j..j + 1, ..])
                        .to_owned(),
                );
                let alone = flow_forward(&single, &u).unwrap();
                for (node, snap) in alone.snapshots.iter().enumerate() {
                    assert_eq!(
                        snap.states.slice(s![0, 0, ..]),
                        full.snapshots[node].states.slice(s![i, j, ..]),
                        "trajectory ({i},{j}) differs at node {node}"
                    );
                }
            }
        }
    }

    #[test]
    fn every_snapshot_satisfies_the_euler_update_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let grid = TimeGrid::new(1.0, 12);
        let u = ControlSchedule::new(grid, (0..12).map(|_| random_control(&mut rng, 2)).collect());
        let x0 = Ensemble::new(Array3::from_shape_fn((3, 2, 2), |_| {
            rng.random_range(0.0..1.0)
        }));
        let traj = flow_forward(&x0, &u).unwrap();
        assert_eq!(traj.snapshots[0], x0);
        for n in 0..12 {
            let mut expected = traj.snapshots[n].clone();
            for i in 0..3 {
                for j in 0..2 {
                    let f = vector_field(traj.snapshots[n].states.slice(s![i, j, ..]), &u.values[n]);
                    expected
                        .states
                        .slice_mut(s![i, j, ..])
                        .scaled_add(grid.dt(), &f);
                }
            }
            assert_eq!(expected.states, traj.snapshots[n + 1].states);
        }
    }

    #[test]
    fn flow_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let grid = TimeGrid::new(1.0, 8);
        let u = ControlSchedule::new(grid, (0..8).map(|_| random_control(&mut rng, 2)).collect());
        let x0 = Ensemble::new(Array3::from_shape_fn((2, 2, 2), |_| {
            rng.random_range(0.0..1.0)
        }));
        let a = flow_forward(&x0, &u).unwrap();
        let b = flow_forward(&x0, &u).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn flow_reports_non_finite_state_with_node() {
        let grid = TimeGrid::new(1.0, 5);
        let u = ControlSchedule::zeros(grid, 2);
        let mut x0 = Ensemble::zeros(1, 1, 2);
        x0.states[[0, 0, 1]] = f64::NAN;
        match flow_forward(&x0, &u) {
            Err(Error::NonFinite { quantity, node }) => {
                assert_eq!(quantity, "state");
                assert_eq!(node, 0);
            }
            other => panic!("expected non-finite abort, got {other:?}"),
        }
    }

    #[test]
    fn hamiltonian_is_zero_for_zero_covector() {
        let x = Ensemble::zeros(2, 2, 2);
        let p = Ensemble::zeros(2, 2, 2);
        let u = ControlValue::new(array![[1.0, 0.0], [0.0, 1.0]], array![0.5, -0.5]);
        assert_eq!(hamiltonian(&x, &p, &u, 0.0), 0.0);
    }

    #[test]
    fn hamiltonian_single_pair_is_a_dot_product() {
        // With W = 0 the field is tanh(b) for any state; pick b so that
        // F = (0.5, 0.3) and pair it with p = (1, 0).
        let x = Ensemble::zeros(1, 1, 2);
        let mut p = Ensemble::zeros(1, 1, 2);
        p.states[[0, 0, 0]] = 1.0;
        let b = array![0.5f64.atanh(), 0.3f64.atanh()];
        let u = ControlValue::new(Array2::zeros((2, 2)), b);
        let h = hamiltonian(&x, &p, &u, 0.0);
        assert!((h - 0.5).abs() < 1e-15);
    }

    #[test]
    fn penalty_vanishes_at_zero_control() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = Ensemble::new(Array3::from_shape_fn((2, 3, 2), |_| {
            rng.random_range(-1.0..1.0)
        }));
        let p = Ensemble::new(Array3::from_shape_fn((2, 3, 2), |_| {
            rng.random_range(-1.0..1.0)
        }));
        let u = ControlValue::zeros(2);
        assert_eq!(
            hamiltonian(&x, &p, &u, 0.0),
            hamiltonian(&x, &p, &u, 0.7)
        );
    }

    #[test]
    fn hamiltonian_is_additive_over_trajectories() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let x = Ensemble::new(Array3::from_shape_fn((3, 2, 2), |_| {
            rng.random_range(-1.0..1.0)
        }));
        let p = Ensemble::new(Array3::from_shape_fn((3, 2, 2), |_| {
            rng.random_range(-1.0..1.0)
        }));
        let u = random_control(&mut rng, 2);
        let whole = hamiltonian(&x, &p, &u, 0.0);
        let mut parts = 0.0;
        for i in 0..3 {
            for j in 0..2 {
                let xi = Ensemble::new(x.states.slice(s![i..i + 1, j..j + 1, ..]).to_owned());
                let pi = Ensemble::new(p.states.slice(s![i..i + 1, j..j + 1, ..]).to_owned());
                parts += hamiltonian(&xi, &pi, &u, 0.0);
            }
        }
        assert!((whole - parts).abs() < 1e-12);
    }

    #[test]
    fn hamiltonian_gradient_zero_cases() {
        let x = Ensemble::zeros(2, 2, 2);
        let p = Ensemble::zeros(2, 2, 2);
        let u = ControlValue::zeros(2);
        let g = hamiltonian_control_gradient(&x, &p, &u, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));

        // Only the penalty survives a zero covector.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let u = random_control(&mut rng, 2);
        let beta = 0.3;
        let g = hamiltonian_control_gradient(&x, &p, &u, beta);
        let expected = u.to_flat().mapv(|v| -2.0 * beta * v);
        assert!(g
            .iter()
            .zip(expected.iter())
            .all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn hamiltonian_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let h = 1e-6;
        for _ in 0..50 {
            let x = Ensemble::new(Array3::from_shape_fn((2, 2, 2), |_| {
                rng.random_range(-1.0..1.0)
            }));
            let p = Ensemble::new(Array3::from_shape_fn((2, 2, 2), |_| {
                rng.random_range(-1.0..1.0)
            }));
            let u = random_control(&mut rng, 2);
            let beta = 0.05;
            let analytic = hamiltonian_control_gradient(&x, &p, &u, beta);
            let flat = u.to_flat();
            let scale = analytic.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-9);
            for c in 0..flat.len() {
                let mut fp = flat.clone();
                let mut fm = flat.clone();
                fp[c] += h;
                fm[c] -= h;
                let hp = hamiltonian(&x, &p, &ControlValue::from_flat(2, fp.view()), beta);
                let hm = hamiltonian(&x, &p, &ControlValue::from_flat(2, fm.view()), beta);
                let numeric = (hp - hm) / (2.0 * h);
                assert!(
                    (analytic[c] - numeric).abs() / scale < 1e-6,
                    "coordinate {c}: analytic {} vs numeric {numeric}",
                    analytic[c]
                );
            }
        }
    }

    #[test]
    fn control_flattening_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let u = random_control(&mut rng, 3);
        let back = ControlValue::from_flat(3, u.to_flat().view());
        assert_eq!(u, back);
    }

    #[test]
    #[should_panic(expected = "dimension mismatch")]
    fn control_jacobian_rejects_dimension_mismatch() {
        let u = ControlValue::zeros(2);
        jacobian_control(array![1.0, 2.0, 3.0].view(), &u);
    }
}
