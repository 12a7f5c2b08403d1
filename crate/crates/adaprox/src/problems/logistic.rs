//! l1-regularized logistic regression over a sparse dataset.
//!
//! The smooth part is the mean logistic loss
//! `f(x) = (1/N) sum_i log(1 + exp(-y_i x' z_i))`; the l1 penalty
//! `lambda ||x||_1` is handled by the prox term built via [`Self::prox_term`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{SampleSpace, StochasticProblem};
use crate::data::Dataset;
use crate::error::Error;
use crate::prox::ProxFunction;
use crate::vector::DenseVector;
use crate::Result;

pub struct LogisticL1Instance {
    data: Dataset,
    lambda: f64,
    lipschitz: f64,
}

impl LogisticL1Instance {
    /// Builds an instance; `lambda` defaults to `1/N` when `None`.
    ///
    /// The gradient Lipschitz constant `lambda_max(Z'Z) / (4N)` is estimated
    /// once by power iteration (relative tolerance 1e-3, at most 500
    /// iterations).
    pub fn new(data: Dataset, lambda: Option<f64>) -> Result<Self> {
        let n = data.n_rows();
        let lambda = lambda.unwrap_or(1.0 / n as f64);
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::invalid(format!(
                "lambda must be finite and nonnegative, got {lambda}"
            )));
        }
        let top = power_iteration_gram(&data)?;
        Ok(LogisticL1Instance {
            lambda,
            lipschitz: top / (4.0 * n as f64),
            data,
        })
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// The matching nonsmooth term `lambda ||x||_1`.
    pub fn prox_term(&self) -> Result<ProxFunction> {
        ProxFunction::l1(self.lambda, self.data.dim())
    }

    /// Margin `y_i * x' z_i` for component `i`.
    fn margin(&self, x: &DenseVector, id: usize) -> f64 {
        self.data.label(id) * self.data.matrix().row_dot(id, x)
    }
}

/// `log(1 + exp(u))` without overflow.
fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

/// `1 / (1 + exp(t))`, i.e. the sigmoid of `-t`.
fn sigmoid_neg(t: f64) -> f64 {
    1.0 / (1.0 + t.exp())
}

impl StochasticProblem for LogisticL1Instance {
    fn dimension(&self) -> usize {
        self.data.dim()
    }

    fn sample_space(&self) -> SampleSpace {
        SampleSpace::Finite(self.data.n_rows())
    }

    fn component_value(&self, x: &DenseVector, id: usize) -> f64 {
        softplus(-self.margin(x, id))
    }

    fn component_gradient_into(&self, x: &DenseVector, id: usize, out: &mut DenseVector) {
        out.fill(0.0);
        let coeff = -self.data.label(id) * sigmoid_neg(self.margin(x, id));
        self.data.matrix().row_add_scaled(id, coeff, out);
    }

    fn exact_value(&self, x: &DenseVector) -> f64 {
        let n = self.data.n_rows();
        let sum: f64 = (0..n).map(|i| self.component_value(x, i)).sum();
        sum / n as f64
    }

    fn exact_gradient(&self, x: &DenseVector) -> DenseVector {
        let n = self.data.n_rows();
        let mut acc = DenseVector::zeros(self.dimension());
        for i in 0..n {
            let coeff = -self.data.label(i) * sigmoid_neg(self.margin(x, i));
            self.data.matrix().row_add_scaled(i, coeff, &mut acc);
        }
        acc.scale(1.0 / n as f64);
        acc
    }

    fn exact_value_and_gradient(&self, x: &DenseVector) -> (f64, DenseVector) {
        // One pass: each margin feeds both the loss and the gradient weight.
        let n = self.data.n_rows();
        let mut acc = DenseVector::zeros(self.dimension());
        let mut value = 0.0;
        for i in 0..n {
            let t = self.margin(x, i);
            value += softplus(-t);
            let coeff = -self.data.label(i) * sigmoid_neg(t);
            self.data.matrix().row_add_scaled(i, coeff, &mut acc);
        }
        acc.scale(1.0 / n as f64);
        (value / n as f64, acc)
    }

    fn lipschitz(&self) -> Option<f64> {
        Some(self.lipschitz)
    }

    fn batch_cap(&self) -> Option<usize> {
        Some(self.data.n_rows())
    }
}

/// Largest eigenvalue of `Z'Z` by power iteration on the Gram matrix,
/// applied through the sparse factors.
fn power_iteration_gram(data: &Dataset) -> Result<f64> {
    let d = data.dim();
    let n = data.n_rows();
    if data.matrix().nnz() == 0 {
        return Err(Error::invalid(
            "cannot estimate a Lipschitz constant for an all-zero feature matrix",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e3779b97f4a7c15);
    let mut v = DenseVector::from_vec((0..d).map(|_| rng.random::<f64>() + 0.5).collect());
    let inv_norm = 1.0 / v.norm();
    v.scale(inv_norm);
    let mut lambda_prev = 0.0f64;
    for _ in 0..500 {
        // u = Z'(Z v)
        let mut u = DenseVector::zeros(d);
        for i in 0..n {
            let zi_v = data.matrix().row_dot(i, &v);
            data.matrix().row_add_scaled(i, zi_v, &mut u);
        }
        let lambda = v.dot(&u);
        let norm = u.norm();
        if norm == 0.0 {
            // v landed in the null space; restart from a fresh direction.
            v = DenseVector::from_vec((0..d).map(|_| rng.random::<f64>() + 0.5).collect());
            let inv = 1.0 / v.norm();
            v.scale(inv);
            continue;
        }
        u.scale(1.0 / norm);
        v = u;
        if (lambda - lambda_prev).abs() <= 1e-3 * lambda.abs() {
            return Ok(lambda);
        }
        lambda_prev = lambda;
    }
    Ok(lambda_prev)
}
