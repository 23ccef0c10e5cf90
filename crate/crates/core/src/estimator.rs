//! Online ridge regression over feature vectors: `EstRel = alpha . x`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{OreError, Result};
use crate::features::FeatureVector;

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorState {
    dim: usize,
    lambda: f64,
    seed: u64,
    gram: DMatrix<f64>,
    moment: DVector<f64>,
    alpha: DVector<f64>,
    n_samples: usize,
}

impl EstimatorState {
    /// `gram = lambda * I` and a random `alpha` in `[0, 1]^dim`.
    ///
    /// The moment starts at `lambda * alpha0`, so the random draw is the
    /// prior mean of the ridge fit and `alpha = gram^-1 * moment` holds from
    /// the start. Observations pull `alpha` away from it as they accumulate.
    pub fn init(dim: usize, lambda: f64, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(OreError::validation("estimator dim must be >= 1"));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(OreError::validation(format!(
                "estimator lambda must be > 0, got {lambda}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let alpha = DVector::from_iterator(dim, (0..dim).map(|_| rng.random_range(0.0..=1.0)));
        Ok(Self {
            dim,
            lambda,
            seed,
            gram: DMatrix::identity(dim, dim) * lambda,
            moment: &alpha * lambda,
            alpha,
            n_samples: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn alpha(&self) -> &[f64] {
        self.alpha.as_slice()
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn moment(&self) -> &[f64] {
        self.moment.as_slice()
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(OreError::validation(format!(
                "feature dim {} does not match estimator dim {}",
                x.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Fold a batch of `(features, score)` pairs and re-solve alpha.
    pub fn observe(&mut self, batch: &[(FeatureVector, f64)]) -> Result<()> {
        self.observe_raw(batch.iter().map(|(x, y)| (x.values.as_slice(), *y)))
    }

    pub fn observe_raw<'a>(&mut self, batch: impl IntoIterator<Item = (&'a [f64], f64)>) -> Result<()> {
        let batch: Vec<(&[f64], f64)> = batch.into_iter().collect();
        for (x, y) in &batch {
            self.check_dim(x)?;
            if !y.is_finite() || x.iter().any(|v| !v.is_finite()) {
                return Err(OreError::validation("non-finite observation"));
            }
        }
        if batch.is_empty() {
            return Ok(());
        }
        for (x, y) in &batch {
            let x = DVector::from_column_slice(x);
            self.gram.ger(1.0, &x, &x, 1.0);
            self.moment.axpy(*y, &x, 1.0);
        }
        self.n_samples += batch.len();
        self.solve()
    }

    fn solve(&mut self) -> Result<()> {
        let chol = self
            .gram
            .clone()
            .cholesky()
            .ok_or_else(|| OreError::validation("estimator gram matrix is not positive definite"))?;
        self.alpha = chol.solve(&self.moment);
        Ok(())
    }

    pub fn est_rel(&self, x: &FeatureVector) -> Result<f64> {
        self.est_rel_raw(&x.values)
    }

    pub fn est_rel_raw(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.alpha.iter().zip(x).map(|(a, v)| a * v).sum())
    }

    /// Mean absolute difference between estimates and true scores.
    pub fn estimation_error(&self, holdout: &[(FeatureVector, f64)]) -> Result<f64> {
        if holdout.is_empty() {
            return Err(OreError::validation("estimation error needs a non-empty holdout"));
        }
        let mut total = 0.0;
        for (x, y) in holdout {
            total += (self.est_rel(x)? - y).abs();
        }
        Ok(total / holdout.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Setup;
    use proptest::prelude::*;

    fn fv(values: &[f64]) -> FeatureVector {
        FeatureVector {
            setup: Setup::Adaptive,
            values: values.to_vec(),
            mask: vec![true; values.len()],
        }
    }

    /// Direct normal-equations solve, written out independently of nalgebra.
    fn normal_equations(xs: &[Vec<f64>], ys: &[f64], lambda: f64, prior: &[f64]) -> Vec<f64> {
        let d = prior.len();
        let mut a = vec![vec![0.0; d + 1]; d];
        for i in 0..d {
            a[i][i] = lambda;
            a[i][d] = lambda * prior[i];
        }
        for (x, y) in xs.iter().zip(ys) {
            for i in 0..d {
                for j in 0..d {
                    a[i][j] += x[i] * x[j];
                }
                a[i][d] += y * x[i];
            }
        }
        for col in 0..d {
            let piv = (col..d)
                .max_by(|&p, &q| a[p][col].abs().partial_cmp(&a[q][col].abs()).unwrap())
                .unwrap();
            a.swap(col, piv);
            for row in 0..d {
                if row != col {
                    let f = a[row][col] / a[col][col];
                    for k in col..=d {
                        a[row][k] -= f * a[col][k];
                    }
                }
            }
        }
        (0..d).map(|i| a[i][d] / a[i][i]).collect()
    }

    #[test]
    fn init_rules() {
        let s = EstimatorState::init(3, 1.0, 4).unwrap();
        assert_eq!(s.gram(), &DMatrix::<f64>::identity(3, 3));
        assert_eq!(s.n_samples(), 0);
        assert!(s.alpha().iter().all(|a| (0.0..=1.0).contains(a)));
        assert_eq!(s.alpha(), EstimatorState::init(3, 1.0, 4).unwrap().alpha());
        assert_ne!(s.alpha(), EstimatorState::init(3, 1.0, 5).unwrap().alpha());
        assert!(EstimatorState::init(3, 0.0, 4).is_err());
        assert!(EstimatorState::init(3, -1.0, 4).is_err());
        assert!(EstimatorState::init(0, 1.0, 4).is_err());
    }

    #[test]
    fn exact_fit_recovers_weights() {
        let mut s = EstimatorState::init(2, 1e-9, 1).unwrap();
        let xs = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let batch: Vec<_> = xs.iter().map(|x| (fv(x), 2.0 * x[0] + 3.0 * x[1])).collect();
        s.observe(&batch).unwrap();
        assert!((s.alpha()[0] - 2.0).abs() < 1e-6);
        assert!((s.alpha()[1] - 3.0).abs() < 1e-6);
        assert!((s.est_rel(&fv(&[1.0, 1.0])).unwrap() - 5.0).abs() < 1e-6);
        assert_eq!(s.n_samples(), 3);
    }

    #[test]
    fn zero_vector_leaves_alpha() {
        let mut s = EstimatorState::init(3, 1.0, 2).unwrap();
        let before = s.alpha().to_vec();
        for _ in 0..5 {
            s.observe(&[(fv(&[0.0, 0.0, 0.0]), 7.0)]).unwrap();
        }
        for (a, b) in s.alpha().iter().zip(&before) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn est_rel_and_errors() {
        let mut s = EstimatorState::init(3, 1.0, 0).unwrap();
        s.alpha = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        assert_eq!(s.est_rel(&fv(&[0.5, 9.0, -2.0])).unwrap(), 0.5);
        assert_eq!(s.est_rel(&fv(&[0.0, 0.0, 0.0])).unwrap(), 0.0);
        assert!(s.est_rel(&fv(&[1.0])).is_err());
        assert!(s.observe(&[(fv(&[1.0]), 1.0)]).is_err());
        assert!(s.estimation_error(&[]).is_err());

        s.alpha = DVector::zeros(3);
        let hold = vec![(fv(&[0.2, 0.3, 0.1]), 1.0), (fv(&[0.9, 0.0, 0.4]), 1.0)];
        assert_eq!(s.estimation_error(&hold).unwrap(), 1.0);
    }

    #[test]
    fn matches_normal_equations_oracle() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..20 {
            let d = 1 + trial % 4;
            let lambda = [1e-3, 0.5, 1.0, 4.0][trial % 4];
            let mut s = EstimatorState::init(d, lambda, trial as u64).unwrap();
            let prior = s.alpha().to_vec();
            let n = rng.random_range(1..12);
            let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let ys: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let batch: Vec<_> = xs.iter().zip(&ys).map(|(x, y)| (fv(x), *y)).collect();
            s.observe(&batch).unwrap();
            let want = normal_equations(&xs, &ys, lambda, &prior);
            for (a, w) in s.alpha().iter().zip(&want) {
                assert!((a - w).abs() < 1e-9, "{a} vs {w}");
            }
        }
    }

    proptest! {
        #[test]
        fn batch_split_is_associative(
            rows in prop::collection::vec((prop::collection::vec(-1.0f64..1.0, 3), -3.0f64..3.0), 6),
            split in 0usize..=6,
        ) {
            let batch: Vec<_> = rows.iter().map(|(x, y)| (fv(x), *y)).collect();
            let mut whole = EstimatorState::init(3, 1.0, 8).unwrap();
            whole.observe(&batch).unwrap();
            let mut parts = EstimatorState::init(3, 1.0, 8).unwrap();
            parts.observe(&batch[..split]).unwrap();
            parts.observe(&batch[split..]).unwrap();
            let mut reversed = EstimatorState::init(3, 1.0, 8).unwrap();
            let rev: Vec<_> = batch.iter().rev().cloned().collect();
            reversed.observe(&rev).unwrap();
            for ((a, b), c) in whole.alpha().iter().zip(parts.alpha()).zip(reversed.alpha()) {
                prop_assert!((a - b).abs() < 1e-12);
                prop_assert!((a - c).abs() < 1e-12);
            }
        }

        #[test]
        fn est_rel_is_linear(
            x in prop::collection::vec(-5.0f64..5.0, 4),
            z in prop::collection::vec(-5.0f64..5.0, 4),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
            seed in 0u64..1000,
        ) {
            let s = EstimatorState::init(4, 1.0, seed).unwrap();
            let mix: Vec<f64> = x.iter().zip(&z).map(|(p, q)| a * p + b * q).collect();
            let lhs = s.est_rel_raw(&mix).unwrap();
            let rhs = a * s.est_rel_raw(&x).unwrap() + b * s.est_rel_raw(&z).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }
    }
}
