//! Quadratic and entropic functionals of a perturbation `h` around the equilibrium:
//! the field-augmented `L^2(finf)` norm, the gradient functional `S_P`, the Lyapunov
//! functional `E = gamma ||h||^2 + S_P`, its exact time derivative along the linear flow,
//! and the relative entropy with its Csiszar-Kullback-Pinsker lower bound.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{grad_v, grad_x, integrate, integrate_v, laplace_v, Field, XField};
use crate::linalg::Sym2;
use crate::poisson::{field_gradient_from_h, poisson_gradient};
use crate::potential::PhysParams;
use crate::scalar::Real;
use crate::steady_state::SteadyState;

/// Derivatives of a perturbation that the functionals share.
#[derive(Clone, Debug)]
pub struct Derivatives<T> {
    pub hx: Field<T>,
    pub hv: Field<T>,
    /// Gradient of the self-consistent field `psi'`.
    pub psi_grad: XField<T>,
}

impl<T: Real> Derivatives<T> {
    pub fn new(h: &Field<T>, eq: &SteadyState<T>) -> Result<Self> {
        Ok(Self { hx: grad_x(h), hv: grad_v(h), psi_grad: field_gradient_from_h(h, &eq.finf, eq.coupling)? })
    }
}

/// `int psi'^2 dx`.
pub fn field_energy<T: Real>(psi_grad: &XField<T>) -> T {
    psi_grad.data().iter().map(|&p| p * p).sum::<T>() * psi_grad.grid().dx
}

/// `||h||^2 = int h^2 finf + int psi'^2 dx`.
pub fn norm_squared<T: Real>(h: &Field<T>, eq: &SteadyState<T>) -> Result<T> {
    let psi_grad = field_gradient_from_h(h, &eq.finf, eq.coupling)?;
    Ok(integrate(&h.map(|a| a * a), Some(&eq.finf))? + field_energy(&psi_grad))
}

/// `int h^2 finf`.
pub fn l2_squared<T: Real>(h: &Field<T>, eq: &SteadyState<T>) -> Result<T> {
    integrate(&h.map(|a| a * a), Some(&eq.finf))
}

/// `(int |d_x h|^2 finf, int |d_v h|^2 finf)`.
pub fn gradient_energies<T: Real>(h: &Field<T>, eq: &SteadyState<T>) -> Result<(T, T)> {
    let gx = integrate(&grad_x(h).map(|a| a * a), Some(&eq.finf))?;
    let gv = integrate(&grad_v(h).map(|a| a * a), Some(&eq.finf))?;
    Ok((gx, gv))
}

/// `||h||^2_{H^1(finf)} = int (h^2 + |d_x h|^2 + |d_v h|^2) finf`.
pub fn h1_norm_squared<T: Real>(h: &Field<T>, eq: &SteadyState<T>) -> Result<T> {
    let (gx, gv) = gradient_energies(h, eq)?;
    Ok(l2_squared(h, eq)? + gx + gv)
}

/// `P = [[eps^3, eps^2], [eps^2, 2 eps]]`, positive definite for `eps > 0`.
pub fn p_matrix<T: Real>(eps: T) -> Result<Sym2<T>> {
    if !(eps > T::zero()) || !eps.is_finite() {
        return Err(Error::InvalidParameter(format!("eps must be positive, got {eps}")));
    }
    Ok(Sym2::new(eps * eps * eps, eps * eps, T::lit(2.0) * eps))
}

/// `P(t) = [[eps^3 t^3, eps^2 t^2], [eps^2 t^2, 2 eps t]]`.
pub fn p_matrix_time<T: Real>(eps: T, t: T) -> Result<Sym2<T>> {
    if !(eps > T::zero()) || !(t >= T::zero()) {
        return Err(Error::InvalidParameter(format!("need eps > 0 and t >= 0, got eps={eps}, t={t}")));
    }
    let et = eps * t;
    Ok(Sym2::new(et * et * et, et * et, T::lit(2.0) * et))
}

/// `d/dt P(t) = [[3 eps^3 t^2, 2 eps^2 t], [2 eps^2 t, 2 eps]]`.
pub fn p_matrix_time_derivative<T: Real>(eps: T, t: T) -> Sym2<T> {
    let e2 = eps * eps;
    Sym2::new(T::lit(3.0) * e2 * eps * t * t, T::lit(2.0) * e2 * t, T::lit(2.0) * eps)
}

fn require_psd<T: Real>(p: &Sym2<T>) -> Result<()> {
    if p.is_positive_semidefinite() {
        Ok(())
    } else {
        Err(Error::Indefinite(format!("P = [[{}, {}], [{}, {}]]", p.a, p.b, p.b, p.c)))
    }
}

fn s_p_from<T: Real>(d: &Derivatives<T>, eq: &SteadyState<T>, p: &Sym2<T>) -> T {
    let g = &eq.grid;
    let (nx, nv) = (g.nx, g.nv);
    let mut acc = T::zero();
    for i in 0..nx {
        let pg = d.psi_grad.data()[i];
        let mut row = T::zero();
        for j in 0..nv {
            let k = i * nv + j;
            row += p.quad(d.hx.data()[k] + pg, d.hv.data()[k]) * eq.finf.data()[k];
        }
        acc += row;
    }
    acc * g.cell_area()
}

/// `S_P[h] = int (d_x h + psi', d_v h) P (d_x h + psi', d_v h)^T finf`.
pub fn s_p_functional<T: Real>(h: &Field<T>, eq: &SteadyState<T>, p: &Sym2<T>) -> Result<T> {
    require_psd(p)?;
    let d = Derivatives::new(h, eq)?;
    Ok(s_p_from(&d, eq, p))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LyapunovMode {
    /// `P = p_matrix(eps)`.
    Constant,
    /// `P = p_matrix_time(eps, t)`.
    TimeDependent,
}

/// Parameters of `E = gamma ||h||^2 + S_P`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LyapunovSpec<T> {
    pub gamma: T,
    pub eps: T,
    pub mode: LyapunovMode,
}

impl<T: Real> LyapunovSpec<T> {
    pub fn matrix_at(&self, t: T) -> Result<Sym2<T>> {
        match self.mode {
            LyapunovMode::Constant => p_matrix(self.eps),
            LyapunovMode::TimeDependent => p_matrix_time(self.eps, t),
        }
    }
}

/// `E[h] = gamma ||h||^2 + S_{P(t)}[h]`.
pub fn e_functional<T: Real>(h: &Field<T>, eq: &SteadyState<T>, spec: &LyapunovSpec<T>, t: T) -> Result<T> {
    if !(spec.gamma >= T::zero()) {
        return Err(Error::InvalidParameter(format!("gamma must be non-negative, got {}", spec.gamma)));
    }
    let p = spec.matrix_at(t)?;
    require_psd(&p)?;
    let d = Derivatives::new(h, eq)?;
    let norm = integrate(&h.map(|a| a * a), Some(&eq.finf))? + field_energy(&d.psi_grad);
    Ok(spec.gamma * norm + s_p_from(&d, eq, &p))
}

/// Time derivative of the self-consistent field gradient along the flow, from the
/// continuity equation: `d_t psi' = coupling * int v h finf dv`.
pub fn field_gradient_rate<T: Real>(h: &Field<T>, eq: &SteadyState<T>) -> Result<XField<T>> {
    let vfield = Field::from_fn(&eq.grid, |_, v| v);
    let weighted = vfield.zip_map(&eq.finf, |a, b| a * b)?;
    Ok(integrate_v(h, Some(&weighted))?.scaled(eq.coupling))
}

/// The three contributions to `d/dt S_P` along the linear flow with constant `P`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct DissipationTerms<T> {
    /// `-2 sigma int (d_x d_v h, d_v^2 h) P (.)^T finf`.
    pub second_order: T,
    /// `-int u^T (Q P + P Q^T) u finf` with `Q = [[0, 1], [-W'', nu]]`.
    pub drift: T,
    /// `2 int (P11 u1 + P12 u2) d_t psi' finf`.
    pub field: T,
    pub total: T,
}

/// Evaluates the exact right-hand side of `d/dt S_P[h]` for the linear flow.
pub fn dissipation_rhs_sp<T: Real>(h: &Field<T>, eq: &SteadyState<T>, p: &Sym2<T>) -> Result<DissipationTerms<T>> {
    require_psd(p)?;
    let d = Derivatives::new(h, eq)?;
    let hxv = grad_x(&d.hv);
    let hvv = laplace_v(h);
    let rate = field_gradient_rate(h, eq)?;
    let g = &eq.grid;
    let (nx, nv) = (g.nx, g.nv);
    let nu = eq.params.nu;
    let two = T::lit(2.0);
    let (mut s1, mut s2, mut s3) = (T::zero(), T::zero(), T::zero());
    for i in 0..nx {
        let whh = eq.w_hess.data()[i];
        // Q P + P Q^T for Q = [[0, 1], [-W'', nu]].
        let qp = Sym2::new(
            two * p.b,
            p.c - whh * p.a + nu * p.b,
            two * (nu * p.c - whh * p.b),
        );
        let pg = d.psi_grad.data()[i];
        let dpsi = rate.data()[i];
        for j in 0..nv {
            let k = i * nv + j;
            let w = eq.finf.data()[k];
            let u1 = d.hx.data()[k] + pg;
            let u2 = d.hv.data()[k];
            s1 += p.quad(hxv.data()[k], hvv.data()[k]) * w;
            s2 += qp.quad(u1, u2) * w;
            s3 += (p.a * u1 + p.b * u2) * dpsi * w;
        }
    }
    let area = g.cell_area();
    let second_order = -two * eq.params.sigma * s1 * area;
    let drift = -s2 * area;
    let field = two * s3 * area;
    Ok(DissipationTerms { second_order, drift, field, total: second_order + drift + field })
}

/// `-2 sigma int |d_v h|^2 finf`, the exact rate of change of `||h||^2`.
pub fn dissipation_rhs_norm<T: Real>(h: &Field<T>, eq: &SteadyState<T>) -> Result<T> {
    let gv = integrate(&grad_v(h).map(|a| a * a), Some(&eq.finf))?;
    Ok(-T::lit(2.0) * eq.params.sigma * gv)
}

/// Distribution `finf (1 + h)` of a perturbation.
pub fn distribution_from_h<T: Real>(h: &Field<T>, eq: &SteadyState<T>) -> Field<T> {
    h.zip_map(&eq.finf, |a, w| w * (T::one() + a)).expect("perturbation lives on the equilibrium grid")
}

/// Field weight `nu / (2 sigma)` that turns `H` into the free energy of the coupled flow.
pub fn free_energy_weight<T: Real>(params: &PhysParams<T>) -> T {
    params.nu / (T::lit(2.0) * params.sigma)
}

/// Relative entropy of a distribution.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct EntropyValue<T> {
    /// `int f ln(f/finf) + c int psi'^2 dx`.
    pub value: T,
    pub kinetic: T,
    pub field: T,
    /// Mass of the negative part of `f` that was clipped to zero.
    pub clipped_mass: T,
    /// `int |f - finf|`.
    pub l1_distance: T,
}

/// `H[f] = int f ln(f / finf) + c int |psi'|^2 dx` where `-psi'' = coupling int (f - finf) dv`.
/// Negative values of `f` are clipped (their mass is reported). The field weight `c` is
/// a parameter: `1` reproduces the literal functional, `nu / (2 sigma)` is the free energy
/// of the self-consistent dynamics.
pub fn relative_entropy<T: Real>(f: &Field<T>, eq: &SteadyState<T>, field_weight: T) -> Result<EntropyValue<T>> {
    let mass = integrate(f, None)?;
    if !((mass - T::one()).abs() <= T::lit(1e-6)) {
        return Err(Error::Normalization(format!("int f = {mass}, expected 1")));
    }
    let area = eq.grid.cell_area();
    let (mut kinetic, mut clipped, mut l1) = (T::zero(), T::zero(), T::zero());
    for (&fv, &w) in f.data().iter().zip(eq.finf.data()) {
        l1 += (fv - w).abs();
        if fv < T::zero() {
            clipped -= fv;
        } else if fv > T::zero() {
            let w = w.max(T::min_positive_value());
            kinetic += fv * (fv / w).ln();
        }
    }
    let diff = f.axpy(-T::one(), &eq.finf)?;
    let rho = integrate_v(&diff, None)?.scaled(eq.coupling);
    let field = field_energy(&poisson_gradient(&rho));
    Ok(EntropyValue {
        value: kinetic * area + field_weight * field,
        kinetic: kinetic * area,
        field: field_weight * field,
        clipped_mass: clipped * area,
        l1_distance: l1 * area,
    })
}

/// Both sides of `H[f] >= 1/2 ||f - finf||_{L^1}^2 + c int |psi'|^2 dx`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct CkpReport<T> {
    pub lhs: T,
    pub rhs: T,
    pub holds: bool,
    pub clipped_mass: T,
}

pub fn ckp_check<T: Real>(f: &Field<T>, eq: &SteadyState<T>, field_weight: T) -> Result<CkpReport<T>> {
    let e = relative_entropy(f, eq, field_weight)?;
    let rhs = T::lit(0.5) * e.l1_distance * e.l1_distance + e.field;
    // Rounding slack relative to the size of the terms.
    let slack = T::lit(1e-12) * (e.value.abs() + rhs.abs());
    Ok(CkpReport { lhs: e.value, rhs, holds: e.value + slack >= rhs, clipped_mass: e.clipped_mass })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::PhaseGrid;
    use crate::potential::PotentialSpec;
    use crate::steady_state::{solve_pbe, PbeOptions};
    use approx::assert_relative_eq;

    fn eq(n: usize) -> SteadyState<f64> {
        let g = PhaseGrid::new(n, n, 8.0, 8.0).unwrap();
        solve_pbe(&g, &PotentialSpec::Quadratic { omega: 1.0 }, &PhysParams::new(1.0, 1.0).unwrap(), &PbeOptions::default())
            .unwrap()
    }

    #[test]
    fn p_matrices() {
        let p = p_matrix(0.1).unwrap();
        assert_relative_eq!(p.a, 0.001, epsilon = 1e-15);
        assert_relative_eq!(p.b, 0.01, epsilon = 1e-15);
        assert_relative_eq!(p.c, 0.2, epsilon = 1e-15);
        assert_relative_eq!(p.det(), 1e-4, epsilon = 1e-15);
        let q = p_matrix_time(1.0, 2.0).unwrap();
        assert_eq!((q.a, q.b, q.c), (8.0, 4.0, 4.0));
        assert!(p_matrix(0.0).is_err());
    }

    #[test]
    fn indefinite_p_rejected() {
        let e = eq(32);
        let h = Field::from_fn(&e.grid, |x, v| x * v);
        let bad = Sym2::new(1.0, 2.0, 1.0);
        assert!(matches!(s_p_functional(&h, &e, &bad), Err(Error::Indefinite(_))));
    }

    #[test]
    fn zero_perturbation_has_zero_functionals() {
        let e = eq(32);
        let h = Field::zeros(&e.grid);
        assert_eq!(norm_squared(&h, &e).unwrap(), 0.0);
        let spec = LyapunovSpec { gamma: 2.0, eps: 0.3, mode: LyapunovMode::Constant };
        assert_eq!(e_functional(&h, &e, &spec, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn time_dependent_functional_at_zero_is_scaled_norm() {
        let e = eq(32);
        let h = Field::from_fn(&e.grid, |x, v| (x + v) * (-(x * x) / 8.0).exp());
        let spec = LyapunovSpec { gamma: 3.0, eps: 0.5, mode: LyapunovMode::TimeDependent };
        let val = e_functional(&h, &e, &spec, 0.0).unwrap();
        assert_relative_eq!(val, 3.0 * norm_squared(&h, &e).unwrap(), max_relative = 1e-14);
    }

    #[test]
    fn entropy_vanishes_at_equilibrium_and_ckp_holds() {
        let e = eq(48);
        let f0 = distribution_from_h(&Field::zeros(&e.grid), &e);
        let h0 = relative_entropy(&f0, &e, 1.0).unwrap();
        assert!(h0.value.abs() < 1e-12);
        let h = Field::from_fn(&e.grid, |x, v| 0.3 * x * (1.0 + 0.5 * v) / (1.0 + x * x));
        let f = distribution_from_h(&h, &e);
        let r = ckp_check(&f, &e, 1.0).unwrap();
        assert!(r.holds && r.lhs > 0.0);
    }

    #[test]
    fn unnormalised_distribution_rejected() {
        let e = eq(32);
        let f = e.finf.scaled(1.1);
        assert!(matches!(relative_entropy(&f, &e, 1.0), Err(Error::Normalization(_))));
    }
}
