//! Diagonal quadratic with additive pool noise.
//!
//! `f(x) = x' Q x / 2 + b' x` with `Q = diag(q)`, and component gradients
//! `grad F(x, i) = grad f(x) + zeta_i` for a pre-drawn, exactly mean-centered
//! noise pool `{zeta_i}`. Because the pool is explicit, population quantities
//! (gradient variance, expectations over batches) are computable in closed
//! form, which is what makes these instances usable for rate verification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{SampleSpace, StochasticProblem};
use crate::error::Error;
use crate::vector::DenseVector;
use crate::Result;

pub struct StochasticQuadraticInstance {
    diag: Vec<f64>,
    b: DenseVector,
    pool: Vec<DenseVector>,
    popvar: f64,
    mu: f64,
    l: f64,
}

/// Serializable recipe for a pool quadratic; rate-check reports embed one so
/// a failure can be reproduced from the report alone.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct PoolQuadraticSpec {
    pub diag: Vec<f64>,
    pub b: Vec<f64>,
    pub sigma: f64,
    pub pool_size: usize,
    pub seed: u64,
}

impl PoolQuadraticSpec {
    pub fn build(&self) -> Result<StochasticQuadraticInstance> {
        StochasticQuadraticInstance::from_diagonal(
            self.diag.clone(),
            DenseVector::from_vec(self.b.clone()),
            self.sigma,
            self.pool_size,
            self.seed,
        )
    }
}

impl StochasticQuadraticInstance {
    /// Builds `f(x) = x' diag(q) x / 2 + b' x` with a noise pool of
    /// `pool_size` vectors drawn as `sigma * N(0, I)` and mirrored in +/-
    /// pairs, so the pool mean is exactly zero. `pool_size` must be even and
    /// at least 2; `sigma = 0` gives a deterministic problem.
    pub fn from_diagonal(
        diag: Vec<f64>,
        b: DenseVector,
        sigma: f64,
        pool_size: usize,
        seed: u64,
    ) -> Result<Self> {
        let d = diag.len();
        if d == 0 || b.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d.max(1),
                got: b.dim(),
            });
        }
        if diag.iter().any(|&q| !q.is_finite() || q < 0.0) || !b.is_finite() {
            return Err(Error::invalid(
                "diagonal entries must be finite and nonnegative, b finite",
            ));
        }
        let l = diag.iter().cloned().fold(0.0f64, f64::max);
        let mu = diag.iter().cloned().fold(f64::INFINITY, f64::min);
        if l <= 0.0 {
            return Err(Error::invalid("at least one diagonal entry must be positive"));
        }
        if pool_size < 2 || pool_size % 2 != 0 {
            return Err(Error::invalid(format!(
                "pool_size must be even and >= 2, got {pool_size}"
            )));
        }
        if !sigma.is_finite() || sigma < 0.0 {
            return Err(Error::invalid(format!(
                "sigma must be finite and nonnegative, got {sigma}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pool = Vec::with_capacity(pool_size);
        for _ in 0..pool_size / 2 {
            let v = DenseVector::from_vec((0..d).map(|_| sigma * gaussian(&mut rng)).collect());
            let mut neg = v.clone();
            neg.scale(-1.0);
            // Interleaving +/- pairs keeps every running sum over the pool
            // exactly zero in floating point.
            pool.push(v);
            pool.push(neg);
        }
        let popvar = pool.iter().map(|z| z.norm_sq()).sum::<f64>() / pool_size as f64;
        Ok(StochasticQuadraticInstance {
            diag,
            b,
            pool,
            popvar,
            mu,
            l,
        })
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn linear_term(&self) -> &DenseVector {
        &self.b
    }

    pub fn pool_size(&self) -> usize {
        self.pool.len()
    }

    pub fn noise(&self, id: usize) -> &DenseVector {
        &self.pool[id]
    }

    /// Population gradient variance `E ||grad F - grad f||^2`; constant in
    /// `x` because the noise is additive.
    pub fn population_variance(&self) -> f64 {
        self.popvar
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    /// The minimum-norm unconstrained minimizer: `x_j = -b_j / q_j` on
    /// curved coordinates, `0` on flat ones. Errors when the objective is
    /// unbounded below (`q_j = 0` with `b_j != 0`).
    pub fn unconstrained_minimizer(&self) -> Result<DenseVector> {
        let mut x = DenseVector::zeros(self.diag.len());
        for j in 0..self.diag.len() {
            if self.diag[j] > 0.0 {
                x[j] = -self.b[j] / self.diag[j];
            } else if self.b[j] != 0.0 {
                return Err(Error::invalid(
                    "objective is unbounded below along a flat coordinate",
                ));
            }
        }
        Ok(x)
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

impl StochasticProblem for StochasticQuadraticInstance {
    fn dimension(&self) -> usize {
        self.diag.len()
    }

    fn sample_space(&self) -> SampleSpace {
        SampleSpace::Finite(self.pool.len())
    }

    fn component_value(&self, x: &DenseVector, id: usize) -> f64 {
        self.exact_value(x) + self.pool[id].dot(x)
    }

    fn component_gradient_into(&self, x: &DenseVector, id: usize, out: &mut DenseVector) {
        for j in 0..self.diag.len() {
            out[j] = self.diag[j] * x[j] + self.b[j] + self.pool[id][j];
        }
    }

    fn exact_value(&self, x: &DenseVector) -> f64 {
        let mut acc = 0.0;
        for j in 0..self.diag.len() {
            acc += 0.5 * self.diag[j] * x[j] * x[j] + self.b[j] * x[j];
        }
        acc
    }

    fn exact_gradient(&self, x: &DenseVector) -> DenseVector {
        let mut g = DenseVector::zeros(self.diag.len());
        for j in 0..self.diag.len() {
            g[j] = self.diag[j] * x[j] + self.b[j];
        }
        g
    }

    fn lipschitz(&self) -> Option<f64> {
        Some(self.l)
    }

    fn strong_convexity(&self) -> Option<f64> {
        if self.mu > 0.0 {
            Some(self.mu)
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn instance() -> StochasticQuadraticInstance {
        StochasticQuadraticInstance::from_diagonal(
            vec![0.5, 2.0],
            DenseVector::from_vec(vec![1.0, -4.0]),
            0.3,
            10,
            1,
        )
        .unwrap()
    }

    #[test]
    fn pool_mean_is_exactly_zero() {
        let p = instance();
        let x = DenseVector::from_vec(vec![0.7, -0.2]);
        let mut mean = DenseVector::zeros(2);
        for i in 0..p.pool_size() {
            let g = p.component_gradient(&x, i);
            mean.add_scaled(1.0, &g);
        }
        mean.scale(1.0 / p.pool_size() as f64);
        let exact = p.exact_gradient(&x);
        assert!(mean.dist(&exact) <= 1e-12 * (1.0 + exact.norm()));
    }

    #[test]
    fn population_variance_matches_pool() {
        let p = instance();
        let by_hand: f64 =
            (0..p.pool_size()).map(|i| p.noise(i).norm_sq()).sum::<f64>() / p.pool_size() as f64;
        assert_eq!(p.population_variance(), by_hand);
        assert!(p.population_variance() > 0.0);
        let quiet =
            StochasticQuadraticInstance::from_diagonal(vec![1.0], DenseVector::zeros(1), 0.0, 2, 0)
                .unwrap();
        assert_eq!(quiet.population_variance(), 0.0);
    }

    #[test]
    fn value_and_gradient_agree_with_hand_formula() {
        let p = instance();
        let x = DenseVector::from_vec(vec![2.0, 1.0]);
        // f = 0.5*(0.5*4 + 2*1) + (2 - 4) = 2 - 2 = 0
        assert_eq!(p.exact_value(&x), 0.0);
        let g = p.exact_gradient(&x);
        assert_eq!(g.as_slice(), &[0.5 * 2.0 + 1.0, 2.0 * 1.0 - 4.0]);
        // component gradient adds the pool vector verbatim
        let g3 = p.component_gradient(&x, 3);
        let expected = {
            let mut e = g.clone();
            e.add_scaled(1.0, p.noise(3));
            e
        };
        assert_eq!(g3, expected);
    }

    #[test]
    fn strong_convexity_identity_on_random_triples() {
        // For a quadratic, interpolation satisfies
        //   f(c x + (1-c) y) = c f(x) + (1-c) f(y) - 0.5 c (1-c) (x-y)' Q (x-y)
        // exactly; with the curvature term bounded below by mu ||x-y||^2 this
        // is the strong-convexity inequality.
        let p = instance();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let x = DenseVector::from_vec(vec![rng.random::<f64>() * 4.0 - 2.0, rng.random::<f64>()]);
            let y = DenseVector::from_vec(vec![rng.random::<f64>(), rng.random::<f64>() * 6.0 - 3.0]);
            let c: f64 = rng.random();
            let mut z = x.clone();
            z.scale(c);
            z.add_scaled(1.0 - c, &y);
            let dxy = x.sub(&y);
            let quad: f64 = (0..2).map(|j| p.diag()[j] * dxy[j] * dxy[j]).sum();
            let lhs = p.exact_value(&z);
            let rhs = c * p.exact_value(&x) + (1.0 - c) * p.exact_value(&y)
                - 0.5 * c * (1.0 - c) * quad;
            assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
            let mu = p.mu();
            assert!(
                lhs <= c * p.exact_value(&x) + (1.0 - c) * p.exact_value(&y)
                    - 0.5 * mu * c * (1.0 - c) * dxy.norm_sq()
                    + 1e-12
            );
        }
    }

    #[test]
    fn minimizer_closed_form() {
        let p = instance();
        let xstar = p.unconstrained_minimizer().unwrap();
        assert_eq!(xstar.as_slice(), &[-2.0, 2.0]);
        assert!(p.exact_gradient(&xstar).norm() <= 1e-15);
        // Singular but bounded: flat coordinate with zero linear term.
        let flat = StochasticQuadraticInstance::from_diagonal(
            vec![1.0, 0.0],
            DenseVector::from_vec(vec![-1.0, 0.0]),
            0.0,
            2,
            0,
        )
        .unwrap();
        assert_eq!(flat.unconstrained_minimizer().unwrap().as_slice(), &[1.0, 0.0]);
        // Unbounded: flat coordinate with a linear tilt.
        let bad = StochasticQuadraticInstance::from_diagonal(
            vec![1.0, 0.0],
            DenseVector::from_vec(vec![0.0, 1.0]),
            0.0,
            2,
            0,
        )
        .unwrap();
        assert!(bad.unconstrained_minimizer().is_err());
    }

    #[test]
    fn constructor_validation() {
        let b = DenseVector::zeros(2);
        assert!(
            StochasticQuadraticInstance::from_diagonal(vec![1.0, -0.1], b.clone(), 0.1, 4, 0)
                .is_err()
        );
        assert!(
            StochasticQuadraticInstance::from_diagonal(vec![0.0, 0.0], b.clone(), 0.1, 4, 0)
                .is_err()
        );
        assert!(
            StochasticQuadraticInstance::from_diagonal(vec![1.0, 1.0], b.clone(), 0.1, 3, 0)
                .is_err()
        );
        assert!(
            StochasticQuadraticInstance::from_diagonal(vec![1.0, 1.0], b, -0.1, 4, 0).is_err()
        );
        assert!(StochasticQuadraticInstance::from_diagonal(
            vec![1.0],
            DenseVector::zeros(2),
            0.1,
            4,
            0
        )
        .is_err());
    }

    #[test]
    fn spec_roundtrip_builds_identical_pools() {
        let spec = PoolQuadraticSpec {
            diag: vec![0.1, 1.0],
            b: vec![0.0, 0.0],
            sigma: 0.5,
            pool_size: 20,
            seed: 11,
        };
        let a = spec.build().unwrap();
        let b = spec.build().unwrap();
        for i in 0..a.pool_size() {
            assert_eq!(a.noise(i), b.noise(i));
        }
    }
}
