//! Perturbation weighting schemes: uniform, tempered softmax, worst-case.
//!
//! Each particle gets a row of nonnegative weights over its perturbations
//! that sums to one. The tempered scheme interpolates between uniform
//! (temperature zero) and worst-case (temperature to infinity).

use ndarray::Array2;

use crate::{Error, Result};

/// Simplex tolerance for row sums.
pub const SIMPLEX_TOL: f64 = 1e-12;

/// Absolute tie tolerance for the worst-case argmax.
pub const TIE_TOL: f64 = 1e-12;

/// `M x N` row-stochastic weights, one simplex row per particle.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    rows: Array2<f64>,
}

impl WeightMatrix {
    /// Validates nonnegativity and unit row sums (tolerance `SIMPLEX_TOL`).
    pub fn new(rows: Array2<f64>) -> Result<Self> {
        for (i, row) in rows.rows().into_iter().enumerate() {
            let mut sum = 0.0;
            for (j, &w) in row.iter().enumerate() {
                if !w.is_finite() || w < 0.0 {
                    return Err(Error::InvalidWeights(format!(
                        "entry ({i}, {j}) is {w}, expected a nonnegative finite value"
                    )));
                }
                sum += w;
            }
            if (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::InvalidWeights(format!(
                    "row {i} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(WeightMatrix { rows })
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn particle_count(&self) -> usize {
        self.rows.nrows()
    }

    pub fn perturbation_count(&self) -> usize {
        self.rows.ncols()
    }

    /// Mean over particles of the Shannon entropy of each weight row,
    /// with `0 ln 0 = 0`.
    pub fn mean_row_entropy(&self) -> f64 {
        let m = self.rows.nrows() as f64;
        let total: f64 = self
            .rows
            .rows()
            .into_iter()
            .map(|row| -row.iter().filter(|w| **w > 0.0).map(|w| w * w.ln()).sum::<f64>())
            .sum();
        total / m
    }
}

/// Terminal losses per `(particle, perturbation)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LossMatrix {
    pub values: Array2<f64>,
}

impl LossMatrix {
    pub fn new(values: Array2<f64>) -> Self {
        assert!(
            values.iter().all(|v| v.is_finite()),
            "loss entries must be finite"
        );
        LossMatrix { values }
    }
}

/// Every perturbation weighted equally: all entries `1/N`.
pub fn uniform_weights(particles: usize, perturbations: usize) -> Result<WeightMatrix> {
    if particles == 0 || perturbations == 0 {
        return Err(Error::InvalidWeights(
            "particle and perturbation counts must be positive".into(),
        ));
    }
    let w = 1.0 / perturbations as f64;
    Ok(WeightMatrix {
        rows: Array2::from_elem((particles, perturbations), w),
    })
}

/// Tempered softmax of the losses, row by row: weight proportional to
/// `exp(c * loss)`. The row maximum is subtracted before exponentiation,
/// which leaves the result mathematically unchanged but cannot overflow.
pub fn gibbs_weights(losses: &LossMatrix, c: f64) -> WeightMatrix {
    assert!(c >= 0.0 && c.is_finite(), "temperature must be nonnegative");
    let (m, n) = losses.values.dim();
    let mut rows = Array2::zeros((m, n));
    for i in 0..m {
        let row = losses.values.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut norm = 0.0;
        for j in 0..n {
            let e = (c * (row[j] - max)).exp();
            rows[[i, j]] = e;
            norm += e;
        }
        for j in 0..n {
            rows[[i, j]] /= norm;
        }
    }
    WeightMatrix { rows }
}

/// All mass on the largest loss of each row; ties within `TIE_TOL` of the
/// row maximum split the mass equally.
pub fn worst_case_weights(losses: &LossMatrix) -> WeightMatrix {
    let (m, n) = losses.values.dim();
    let mut rows = Array2::zeros((m, n));
    for i in 0..m {
        let row = losses.values.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let winners = row.iter().filter(|v| max - **v <= TIE_TOL).count();
        let w = 1.0 / winners as f64;
        for j in 0..n {
            if max - row[j] <= TIE_TOL {
                rows[[i, j]] = w;
            }
        }
    }
    WeightMatrix { rows }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn uniform_is_one_over_n() {
        let w = uniform_weights(3, 4).unwrap();
        assert!(w.rows().iter().all(|v| *v == 0.25));
        let w = uniform_weights(2, 1).unwrap();
        assert!(w.rows().iter().all(|v| *v == 1.0));
        assert!(uniform_weights(0, 4).is_err());
        assert!(uniform_weights(4, 0).is_err());
    }

    #[test]
    fn gibbs_at_zero_temperature_is_uniform() {
        let losses = LossMatrix::new(array![[0.1, 0.9, 0.4], [2.0, -1.0, 0.0]]);
        let w = gibbs_weights(&losses, 0.0);
        let u = uniform_weights(2, 3).unwrap();
        assert_eq!(w.rows(), u.rows());
    }

    #[test]
    fn gibbs_is_uniform_on_constant_rows() {
        let losses = LossMatrix::new(array![[0.7, 0.7, 0.7, 0.7]]);
        let w = gibbs_weights(&losses, 100.0);
        assert!(w.rows().iter().all(|v| *v == 0.25));
    }

    #[test]
    fn gibbs_matches_hand_evaluation() {
        // Losses (0.2, 0.4) at c = 5: weights (e^1, e^2) / (e^1 + e^2),
        // evaluated independently.
        let losses = LossMatrix::new(array![[0.2, 0.4]]);
        let w = gibbs_weights(&losses, 5.0);
        assert!((w.rows()[[0, 0]] - 0.2689414213699951).abs() < 1e-15);
        assert!((w.rows()[[0, 1]] - 0.7310585786300049).abs() < 1e-15);
    }

    #[test]
    fn gibbs_is_exactly_shift_invariant() {
        // Dyadic losses and a power-of-two shift keep the shifted inputs
        // exact, so max-subtraction makes the weights bitwise identical.
        let losses = LossMatrix::new(array![[0.25, 1.5, -0.75], [0.0, 0.5, 1.25]]);
        let shifted = LossMatrix::new(losses.values.clone() + 16.0);
        let a = gibbs_weights(&losses, 37.0);
        let b = gibbs_weights(&shifted, 37.0);
        assert_eq!(a.rows(), b.rows());
    }

    #[test]
    fn gibbs_survives_temperatures_that_overflow_naive_exponentials() {
        let losses = LossMatrix::new(array![[10.0, 9.0]]);
        let w = gibbs_weights(&losses, 100.0);
        assert!(w.rows().iter().all(|v| v.is_finite()));
        assert!((w.rows()[[0, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn worst_case_selects_the_argmax() {
        let losses = LossMatrix::new(array![[0.5, 0.9, 0.2, 0.1]]);
        let w = worst_case_weights(&losses);
        assert_eq!(w.rows().row(0).to_vec(), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn worst_case_splits_ties_equally() {
        let losses = LossMatrix::new(array![[0.9, 0.9, 0.1]]);
        let w = worst_case_weights(&losses);
        assert_eq!(w.rows().row(0).to_vec(), vec![0.5, 0.5, 0.0]);
    }

    #[test]
    fn large_temperature_approaches_worst_case() {
        let losses = LossMatrix::new(array![
            [0.50, 0.30, 0.29, 0.10],
            [0.00, 0.90, 0.80, 0.85],
            [1.25, 1.00, 0.75, 1.20]
        ]);
        let gibbs = gibbs_weights(&losses, 1e4);
        let wc = worst_case_weights(&losses);
        for (a, b) in gibbs.rows().iter().zip(wc.rows().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn entropy_is_zero_for_point_mass_and_ln_n_for_uniform() {
        let losses = LossMatrix::new(array![[0.9, 0.1, 0.0]]);
        assert_eq!(worst_case_weights(&losses).mean_row_entropy(), 0.0);
        let u = uniform_weights(5, 4).unwrap();
        assert!((u.mean_row_entropy() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn validation_rejects_bad_rows() {
        assert!(WeightMatrix::new(array![[0.5, 0.5], [0.6, 0.6]]).is_err());
        assert!(WeightMatrix::new(array![[1.2, -0.2]]).is_err());
        assert!(WeightMatrix::new(array![[0.0, 0.0]]).is_err());
        assert!(WeightMatrix::new(array![[0.25, 0.75]]).is_ok());
    }

    fn loss_rows() -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(
            prop::collection::vec(-10.0..10.0f64, 1..6),
            1..6,
        )
        .prop_filter("rows must be rectangular", |rows| {
            rows.iter().all(|r| r.len() == rows[0].len())
        })
    }

    proptest! {
        #[test]
        fn all_schemes_produce_simplex_rows(rows in loss_rows(), c in 0.0..200.0f64) {
            let m = rows.len();
            let n = rows[0].len();
            let flat: Vec<f64> = rows.iter().flatten().cloned().collect();
            let losses = LossMatrix::new(Array2::from_shape_vec((m, n), flat).unwrap());

            for w in [
                uniform_weights(m, n).unwrap(),
                gibbs_weights(&losses, c),
                worst_case_weights(&losses),
            ] {
                prop_assert!(WeightMatrix::new(w.rows().clone()).is_ok());
            }
        }

        #[test]
        fn larger_loss_never_gets_smaller_weight(rows in loss_rows(), c in 0.0..200.0f64) {
            let m = rows.len();
            let n = rows[0].len();
            let flat: Vec<f64> = rows.iter().flatten().cloned().collect();
            let losses = LossMatrix::new(Array2::from_shape_vec((m, n), flat).unwrap());

            for w in [gibbs_weights(&losses, c), worst_case_weights(&losses)] {
                for i in 0..m {
                    for j in 0..n {
                        for k in 0..n {
                            if losses.values[[i, j]] > losses.values[[i, k]] {
                                prop_assert!(w.rows()[[i, j]] >= w.rows()[[i, k]]);
                            }
                        }
                    }
                }
            }
        }
    }
}
