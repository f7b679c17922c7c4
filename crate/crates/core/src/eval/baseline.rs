use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{EvalError, Forecaster};
use crate::data::Example;
use crate::haar::Trajectory;

/// Unimodal conditional Gaussian: the mean is affine in the flattened past,
/// the residual covariance is full and shared.
#[derive(Clone, Debug)]
pub struct GaussianBaseline {
    /// `[future_dim, past_dim + 1]`
    weights: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
    t_fut: usize,
    dim: usize,
}

fn features(x: &Trajectory) -> DVector<f64> {
    let mut v: Vec<f64> = x.values().to_vec();
    v.push(1.0);
    DVector::from_vec(v)
}

impl GaussianBaseline {
    /// Ridge least squares for the mean (penalty `ridge`, bias unpenalized),
    /// then the covariance of the residuals plus `jitter·I`.
    pub fn fit(examples: &[&Example], ridge: f64, jitter: f64) -> Result<Self, EvalError> {
        let first = examples.first().ok_or_else(|| EvalError::Input("no examples to fit".into()))?;
        let (t_fut, dim) = (first.y.len(), first.y.dim());
        let p = first.x.values().len() + 1;
        let q = t_fut * dim;
        let n = examples.len();
        let phi = DMatrix::from_fn(n, p, |r, c| features(&examples[r].x)[c]);
        let y = DMatrix::from_fn(n, q, |r, c| examples[r].y.values()[c]);
        let mut gram = phi.transpose() * &phi;
        for i in 0..p - 1 {
            gram[(i, i)] += ridge;
        }
        let rhs = phi.transpose() * &y;
        let sol = Cholesky::new(gram)
            .ok_or_else(|| EvalError::Input("singular design matrix for the baseline".into()))?
            .solve(&rhs);
        let resid = &y - &phi * &sol;
        let mut cov = resid.transpose() * &resid / n as f64;
        for i in 0..q {
            cov[(i, i)] += jitter;
        }
        let chol = Cholesky::new(cov).ok_or_else(|| EvalError::Input("baseline covariance is not positive definite".into()))?;
        let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(Self {
            weights: sol.transpose(),
            chol,
            log_det,
            t_fut,
            dim,
        })
    }

    pub fn mean(&self, x: &Trajectory) -> DVector<f64> {
        &self.weights * features(x)
    }

    pub fn log_density(&self, y: &Trajectory, x: &Trajectory) -> f64 {
        let r = DVector::from_column_slice(y.values()) - self.mean(x);
        let z = self.chol.l().solve_lower_triangular(&r).expect("triangular factor");
        let q = r.len() as f64;
        -0.5 * z.norm_squared() - 0.5 * self.log_det - 0.5 * q * (2.0 * std::f64::consts::PI).ln()
    }
}

impl Forecaster for GaussianBaseline {
    fn log_likelihoods(&self, examples: &[&Example]) -> Result<Vec<f64>, EvalError> {
        Ok(examples.iter().map(|e| self.log_density(&e.y, &e.x)).collect())
    }

    fn sample_futures(
        &self,
        x: &Trajectory,
        n: usize,
        t_future: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Trajectory>, EvalError> {
        if t_future != self.t_fut {
            return Err(EvalError::Input(format!(
                "baseline was fit for {} future steps, asked for {t_future}",
                self.t_fut
            )));
        }
        let mean = self.mean(x);
        let l = self.chol.l();
        (0..n)
            .map(|_| {
                let z = DVector::from_fn(mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
                let y = &mean + &l * z;
                Trajectory::new(y.as_slice().to_vec(), self.dim, x.dt()).map_err(|e| EvalError::Input(e.to_string()))
            })
            .collect()
    }
}
