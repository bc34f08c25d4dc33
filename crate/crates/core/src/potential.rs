//! Confining potentials with analytic first and second derivatives, and the
//! physical friction/diffusion parameters.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{PhaseGrid, XField};
use crate::scalar::Real;

/// Friction `nu` and diffusion `sigma`, both positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysParams<T> {
    pub nu: T,
    pub sigma: T,
}

impl<T: Real> PhysParams<T> {
    pub fn new(nu: T, sigma: T) -> Result<Self> {
        let p = Self { nu, sigma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu > T::zero() && self.nu.is_finite()) || !(self.sigma > T::zero() && self.sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "nu and sigma must be positive, got nu={}, sigma={}",
                self.nu, self.sigma
            )));
        }
        Ok(())
    }

    /// Inverse temperature `nu / sigma`.
    #[inline]
    pub fn beta(&self) -> T {
        self.nu / self.sigma
    }
}

/// External potential families.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum PotentialSpec<T> {
    /// `omega x^2 / 2`.
    Quadratic { omega: T },
    /// `r |x|^k`.
    Power { r: T, k: T },
    /// `r1 x^4 - r2 x^2`.
    DoubleWell { r1: T, r2: T },
    /// `r |x|^k + sum_m coeffs[m] x^m`, polynomial degree below `k`.
    PowerPoly { r: T, k: T, coeffs: Vec<T> },
}

/// `V`, `V'` and `V''` sampled on the `x` nodes.
#[derive(Clone, Debug)]
pub struct PotentialValues<T> {
    pub value: XField<T>,
    pub grad: XField<T>,
    pub hess: XField<T>,
}

fn poly<T: Real>(coeffs: &[T], x: T) -> (T, T, T) {
    let (mut p, mut dp, mut ddp) = (T::zero(), T::zero(), T::zero());
    for &c in coeffs.iter().rev() {
        ddp = ddp * x + dp + dp;
        dp = dp * x + p;
        p = p * x + c;
    }
    (p, dp, ddp)
}

fn power<T: Real>(r: T, k: T, x: T) -> (T, T, T) {
    let ax = x.abs();
    let s = if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    };
    let v = r * ax.powf(k);
    let dv = r * k * ax.powf(k - T::one()) * s;
    let ddv = r * k * (k - T::one()) * ax.powf(k - T::lit(2.0));
    (v, dv, ddv)
}

impl<T: Real> PotentialSpec<T> {
    /// `(V, V', V'')` at a single point.
    pub fn eval_point(&self, x: T) -> (T, T, T) {
        match self {
            PotentialSpec::Quadratic { omega } => (*omega * x * x * T::lit(0.5), *omega * x, *omega),
            PotentialSpec::Power { r, k } => power(*r, *k, x),
            PotentialSpec::DoubleWell { r1, r2 } => {
                let x2 = x * x;
                (
                    *r1 * x2 * x2 - *r2 * x2,
                    T::lit(4.0) * *r1 * x2 * x - T::lit(2.0) * *r2 * x,
                    T::lit(12.0) * *r1 * x2 - T::lit(2.0) * *r2,
                )
            }
            PotentialSpec::PowerPoly { r, k, coeffs } => {
                let (a, b, c) = power(*r, *k, x);
                let (p, dp, ddp) = poly(coeffs, x);
                (a + p, b + dp, c + ddp)
            }
        }
    }

    /// Checks family constraints: positive leading coefficient, `k > 1`, perturbation
    /// degree below `k`.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        match self {
            PotentialSpec::Quadratic { omega } if !(*omega > T::zero()) => bad(format!("omega must be positive, got {omega}")),
            PotentialSpec::Power { r, k } | PotentialSpec::PowerPoly { r, k, .. } if !(*r > T::zero()) || !(*k > T::one()) => {
                bad(format!("power family needs r > 0 and k > 1, got r={r}, k={k}"))
            }
            PotentialSpec::DoubleWell { r1, .. } if !(*r1 > T::zero()) => bad(format!("r1 must be positive, got {r1}")),
            PotentialSpec::PowerPoly { k, coeffs, .. } => {
                let degree = coeffs.iter().rposition(|c| *c != T::zero()).unwrap_or(0);
                if T::from_count(degree) >= *k {
                    bad(format!("perturbation degree {degree} must stay below k={k}"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    /// Samples `V`, `V'`, `V''` on the grid; fails if any value is not finite
    /// (e.g. `|x|^k` with `k < 2` evaluated at an origin node).
    pub fn eval(&self, grid: &Arc<PhaseGrid<T>>) -> Result<PotentialValues<T>> {
        self.validate()?;
        let mut value = Vec::with_capacity(grid.nx);
        let mut grad = Vec::with_capacity(grid.nx);
        let mut hess = Vec::with_capacity(grid.nx);
        for &x in &grid.x {
            let (a, b, c) = self.eval_point(x);
            if !(a.is_finite() && b.is_finite() && c.is_finite()) {
                return Err(Error::NonFinite(format!("potential derivatives at x={x}")));
            }
            value.push(a);
            grad.push(b);
            hess.push(c);
        }
        Ok(PotentialValues {
            value: XField::from_vec_unchecked(grid, value),
            grad: XField::from_vec_unchecked(grid, grad),
            hess: XField::from_vec_unchecked(grid, hess),
        })
    }

    /// Largest ratio `|V''| / (1 + |V'|)` over the grid nodes.
    pub fn verify_a2(&self, grid: &Arc<PhaseGrid<T>>) -> Result<T> {
        let pv = self.eval(grid)?;
        Ok(hessian_gradient_ratio(pv.grad.data(), pv.hess.data()))
    }

    /// Decay of the Boltzmann weight `exp(-beta V)` between `|x| = Lx/2` and `|x| = Lx`:
    /// the larger of the two one-sided ratios. Values well below one mean the truncated
    /// box captures the equilibrium.
    pub fn tail_ratio(&self, params: &PhysParams<T>, lx: T) -> T {
        let beta = params.beta();
        let half = lx * T::lit(0.5);
        [T::one(), -T::one()]
            .iter()
            .map(|&s| {
                let (v_out, _, _) = self.eval_point(s * lx);
                let (v_in, _, _) = self.eval_point(s * half);
                (-beta * (v_out - v_in)).exp()
            })
            .fold(T::zero(), |m, r| m.max(r))
    }

    /// Rejects boxes whose edge weight is not negligible (ratio at least `1e-6`).
    pub fn check_confinement(&self, params: &PhysParams<T>, lx: T) -> Result<T> {
        let r = self.tail_ratio(params, lx);
        if !(r < T::lit(1e-6)) {
            return Err(Error::InvalidParameter(format!(
                "potential does not confine the weight inside |x| < {lx}: tail ratio {r:e}"
            )));
        }
        Ok(r)
    }
}

/// `max_i |hess_i| / (1 + |grad_i|)`.
pub fn hessian_gradient_ratio<T: Real>(grad: &[T], hess: &[T]) -> T {
    grad.iter()
        .zip(hess)
        .map(|(&g, &h)| h.abs() / (T::one() + g.abs()))
        .fold(T::zero(), |m, r| m.max(r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn point_values() {
        let q = PotentialSpec::Quadratic { omega: 1.0 };
        assert_eq!(q.eval_point(2.0), (2.0, 2.0, 1.0));
        let dw = PotentialSpec::DoubleWell { r1: 1.0, r2: 1.0 };
        assert_eq!(dw.eval_point(0.0), (0.0, 0.0, -2.0));
        let p = PotentialSpec::Power { r: 1.0, k: 4.0 };
        let (a, b, c) = p.eval_point(1.5);
        assert_relative_eq!(a, 5.0625, epsilon = 1e-12);
        assert_relative_eq!(b, 13.5, epsilon = 1e-12);
        assert_relative_eq!(c, 27.0, epsilon = 1e-12);
        let (_, b, _) = p.eval_point(-1.5);
        assert_relative_eq!(b, -13.5, epsilon = 1e-12);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let specs = vec![
            PotentialSpec::Quadratic { omega: 1.3 },
            PotentialSpec::Power { r: 0.7, k: 3.5 },
            PotentialSpec::DoubleWell { r1: 0.25, r2: 1.0 },
            PotentialSpec::PowerPoly { r: 1.0, k: 4.0, coeffs: vec![0.3, -0.2, 0.5, 0.1] },
        ];
        let h = 1e-5;
        for s in &specs {
            for &x in &[-2.3, -0.7, 0.4, 1.9] {
                let (_, d, dd) = s.eval_point(x);
                let (vp, dp, _) = s.eval_point(x + h);
                let (vm, dm, _) = s.eval_point(x - h);
                assert_relative_eq!((vp - vm) / (2.0 * h), d, max_relative = 1e-7, epsilon = 1e-8);
                assert_relative_eq!((dp - dm) / (2.0 * h), dd, max_relative = 1e-7, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn family_constraints() {
        assert!(PotentialSpec::Quadratic { omega: -1.0 }.validate().is_err());
        assert!(PotentialSpec::Power { r: 1.0, k: 1.0 }.validate().is_err());
        assert!(PotentialSpec::PowerPoly { r: 1.0, k: 2.0, coeffs: vec![0.0, 0.0, 1.0] }.validate().is_err());
        assert!(PotentialSpec::PowerPoly { r: 1.0, k: 2.5, coeffs: vec![0.0, 0.0, 1.0] }.validate().is_ok());
        assert!(PhysParams::new(0.0, 1.0).is_err());
    }

    #[test]
    fn a2_constants() {
        // Odd resolution puts a node at the origin, where the quadratic attains the sup.
        let g = PhaseGrid::new(65, 8, 8.0, 8.0).unwrap();
        assert_relative_eq!(PotentialSpec::Quadratic { omega: 1.0 }.verify_a2(&g).unwrap(), 1.0, epsilon = 1e-14);
        let zeros = vec![0.0; 10];
        assert_eq!(hessian_gradient_ratio(&zeros, &zeros), 0.0);
    }

    #[test]
    fn origin_node_singularity_is_reported() {
        let g = PhaseGrid::new(9, 8, 2.0, 2.0).unwrap();
        assert!(PotentialSpec::Power { r: 1.0, k: 1.5 }.eval(&g).is_err());
    }

    #[test]
    fn tail_check() {
        let p = PhysParams::new(1.0, 1.0).unwrap();
        assert!(PotentialSpec::Quadratic { omega: 1.0 }.check_confinement(&p, 8.0).is_ok());
        assert!(PotentialSpec::Quadratic { omega: 1.0 }.check_confinement(&p, 2.0).is_err());
    }
}
