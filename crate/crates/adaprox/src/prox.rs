//! The nonsmooth term `h` and its proximal operator.
//!
//! `h` is restricted to a closed set of shapes with cheap closed-form prox
//! maps: zero, weighted l1, and indicators of the nonnegative orthant, a
//! halfspace, or a box. `prox_oracle` re-solves the prox subproblem by brute
//! grid search and exists only to cross-check the closed forms in tests.

use crate::error::Error;
use crate::vector::DenseVector;
use crate::Result;

#[derive(Clone, Debug, PartialEq)]
pub enum ProxKind {
    /// `h = 0`; prox is the identity.
    Zero,
    /// `h(x) = weight * ||x||_1`; prox is soft thresholding.
    L1 { weight: f64 },
    /// Indicator of `{x : x >= 0}`; prox clamps below at zero.
    Nonneg,
    /// Indicator of `{x : a'x <= b}`; prox projects onto the halfspace.
    Halfspace { a: DenseVector, b: f64 },
    /// Indicator of `{x : lo <= x <= hi}`; prox clamps componentwise.
    Box { lo: DenseVector, hi: DenseVector },
}

/// An instance of the nonsmooth term, pinned to a dimension.
///
/// Immutable once built; all operations are pure, so a single instance can be
/// shared across solver threads.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxFunction {
    kind: ProxKind,
    dim: usize,
}

impl ProxFunction {
    pub fn zero(dim: usize) -> Self {
        ProxFunction {
            kind: ProxKind::Zero,
            dim,
        }
    }

    pub fn l1(weight: f64, dim: usize) -> Result<Self> {
        if !weight.is_finite() || weight < 0.0 {
            return Err(Error::invalid(format!(
                "l1 weight must be finite and nonnegative, got {weight}"
            )));
        }
        Ok(ProxFunction {
            kind: ProxKind::L1 { weight },
            dim,
        })
    }

    pub fn nonneg(dim: usize) -> Self {
        ProxFunction {
            kind: ProxKind::Nonneg,
            dim,
        }
    }

    pub fn halfspace(a: DenseVector, b: f64) -> Result<Self> {
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::invalid("halfspace parameters must be finite"));
        }
        if a.norm_sq() == 0.0 {
            return Err(Error::invalid("halfspace normal must be nonzero"));
        }
        let dim = a.dim();
        Ok(ProxFunction {
            kind: ProxKind::Halfspace { a, b },
            dim,
        })
    }

    pub fn boxed(lo: DenseVector, hi: DenseVector) -> Result<Self> {
        if lo.dim() != hi.dim() {
            return Err(Error::DimensionMismatch {
                expected: lo.dim(),
                got: hi.dim(),
            });
        }
        if lo
            .iter()
            .zip(hi.iter())
            .any(|(l, h)| !l.is_finite() || !h.is_finite() || l > h)
        {
            return Err(Error::invalid(
                "box bounds must be finite with lo <= hi componentwise",
            ));
        }
        let dim = lo.dim();
        Ok(ProxFunction {
            kind: ProxKind::Box { lo, hi },
            dim,
        })
    }

    pub fn kind(&self) -> &ProxKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, ProxKind::Zero)
    }

    /// Short tag for reports and config files.
    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            ProxKind::Zero => "zero",
            ProxKind::L1 { .. } => "l1",
            ProxKind::Nonneg => "nonneg",
            ProxKind::Halfspace { .. } => "halfspace",
            ProxKind::Box { .. } => "box",
        }
    }

    fn check_dim(&self, x: &DenseVector) -> Result<()> {
        if x.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.dim(),
            });
        }
        Ok(())
    }

    /// Extended-real evaluation: indicators return `+inf` outside their set.
    ///
    /// Box and nonneg membership use exact inequalities (clamping is exact in
    /// floating point). Halfspace membership allows rounding-level slack,
    /// because the projection `z - (a'z - b)/||a||^2 a` can land a few ulps
    /// past the hyperplane; without the slack, `evaluate` would report `+inf`
    /// at points produced by its own `prox`.
    pub fn evaluate(&self, x: &DenseVector) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.eval_slice(x.as_slice()))
    }

    fn eval_slice(&self, x: &[f64]) -> f64 {
        match &self.kind {
            ProxKind::Zero => 0.0,
            ProxKind::L1 { weight } => weight * x.iter().map(|v| v.abs()).sum::<f64>(),
            ProxKind::Nonneg => {
                if x.iter().all(|&v| v >= 0.0) {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            ProxKind::Halfspace { a, b } => {
                if halfspace_violation(a, *b, x) <= 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            ProxKind::Box { lo, hi } => {
                let inside = x
                    .iter()
                    .zip(lo.iter().zip(hi.iter()))
                    .all(|(&v, (&l, &h))| l <= v && v <= h);
                if inside {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
        }
    }

    /// `argmin_x h(x) + ||x - z||^2 / (2 alpha)` in closed form.
    pub fn prox(&self, alpha: f64, z: &DenseVector) -> Result<DenseVector> {
        self.check_dim(z)?;
        if !alpha.is_finite() || alpha <= 0.0 {
            return Err(Error::invalid(format!(
                "prox steplength must be finite and positive, got {alpha}"
            )));
        }
        let mut out = z.clone();
        match &self.kind {
            ProxKind::Zero => {}
            ProxKind::L1 { weight } => {
                let t = alpha * weight;
                for v in out.as_mut_slice() {
                    *v = v.signum() * (v.abs() - t).max(0.0);
                }
            }
            ProxKind::Nonneg => {
                for v in out.as_mut_slice() {
                    *v = v.max(0.0);
                }
            }
            ProxKind::Halfspace { a, b } => {
                // One projection pass can leave the point a few ulps outside
                // the hyperplane (cancellation leaves a residue proportional
                // to the pre-projection magnitudes), so re-correct until the
                // membership predicate used by `evaluate` accepts the point.
                for _ in 0..4 {
                    let violation = halfspace_violation(a, *b, out.as_slice());
                    if violation <= 0.0 {
                        break;
                    }
                    out.add_scaled(-(a.dot(&out) - b) / a.norm_sq(), a);
                }
            }
            ProxKind::Box { lo, hi } => {
                for (i, v) in out.as_mut_slice().iter_mut().enumerate() {
                    *v = v.clamp(lo[i], hi[i]);
                }
            }
        }
        Ok(out)
    }

    /// Brute-force prox by exhaustive grid search, for cross-checking tests.
    ///
    /// Scans the axis-aligned grid of spacing `grid_step` within
    /// `grid_radius` of `z` and returns the feasible grid point minimizing
    /// `h(x) + ||x - z||^2 / (2 alpha)`. Only dimensions <= 3 are supported;
    /// the caller must pick `grid_radius` large enough to contain the true
    /// minimizer (everything needed is computable from `h` and `z` alone).
    pub fn prox_oracle(
        &self,
        alpha: f64,
        z: &DenseVector,
        grid_radius: f64,
        grid_step: f64,
    ) -> Result<DenseVector> {
        self.check_dim(z)?;
        if !alpha.is_finite() || alpha <= 0.0 {
            return Err(Error::invalid(format!(
                "prox steplength must be finite and positive, got {alpha}"
            )));
        }
        if self.dim > 3 {
            return Err(Error::Unsupported(format!(
                "prox_oracle only supports dimension <= 3, got {}",
                self.dim
            )));
        }
        if grid_radius <= 0.0 || grid_step <= 0.0 || grid_step > grid_radius {
            return Err(Error::invalid(
                "grid oracle needs 0 < grid_step <= grid_radius",
            ));
        }
        let half = (grid_radius / grid_step).floor() as i64;
        let npts = 2 * half + 1;
        let d = self.dim;
        let mut best: Option<(f64, [f64; 3])> = None;
        let mut point = [0.0f64; 3];
        let mut idx = [0i64; 3];
        // Odometer over the (2*half+1)^d grid; dimension 0 is the fastest axis.
        let total = (npts as u128).pow(d as u32);
        let mut counter: u128 = 0;
        while counter < total {
            let mut rem = counter;
            for (ax, slot) in idx.iter_mut().enumerate().take(d) {
                *slot = (rem % npts as u128) as i64 - half;
                rem /= npts as u128;
                point[ax] = z[ax] + *slot as f64 * grid_step;
            }
            let hval = self.eval_slice(&point[..d]);
            if hval.is_finite() {
                let mut distsq = 0.0;
                for ax in 0..d {
                    let dlt = point[ax] - z[ax];
                    distsq += dlt * dlt;
                }
                let obj = hval + distsq / (2.0 * alpha);
                if best.map_or(true, |(b, _)| obj < b) {
                    best = Some((obj, point));
                }
            }
            counter += 1;
        }
        match best {
            Some((_, p)) => Ok(DenseVector::from_vec(p[..d].to_vec())),
            None => Err(Error::invalid(
                "no feasible grid point inside the search window; widen grid_radius",
            )),
        }
    }
}

/// Signed halfspace violation `a'x - b` minus a rounding allowance; the point
/// belongs to the set iff this is `<= 0`. The allowance scales with the
/// magnitudes actually summed in the dot product, so it stays a few hundred
/// ulps — far below any violation an optimization step could produce on
/// purpose — while absorbing the residue the projection formula leaves.
fn halfspace_violation(a: &DenseVector, b: f64, x: &[f64]) -> f64 {
    let mut ax = 0.0;
    let mut scale = b.abs();
    for (ai, xi) in a.iter().zip(x) {
        ax += ai * xi;
        scale += (ai * xi).abs();
    }
    ax - b - 8.0 * f64::EPSILON * (x.len() as f64 + 8.0) * scale
}
