//! Computable constants and decay-rate certificates.
//!
//! Poincare and multiplier constants are sharp constants of the discrete Dirichlet forms
//! on the grid. All weighted operators are handled in the symmetrised form
//! `D^{-1/2} A D^{-1/2}`, whose entries depend only on ratios of neighbouring weights, so
//! the log-weights never have to be exponentiated as a whole.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evolution::{nonlinear_term, project_mean_zero, Mode, Stepper};
use crate::functionals::p_matrix;
use crate::grid::{fractional_x_norm, grad_v, integrate, integrate_v, Field, XField};
use crate::linalg::{pcg, Sym2, Tridiagonal};
use crate::poisson::{field_gradient_from_h, poisson_gradient};
use crate::potential::hessian_gradient_ratio;
use crate::scalar::Real;
use crate::steady_state::SteadyState;

/// Version of the serialized certificate layout.
pub const SCHEMA_VERSION: u32 = 1;

const EIG_TOL: f64 = 1e-13;
const EIG_MAX_ITER: usize = 200_000;
const INVERSE_MAX_ITER: usize = 20_000;
/// Relative amount by which the certified intermediate rate stays below the exact
/// generalized eigenvalue, so that the rate relation holds after rounding.
const RATE_SHRINK: f64 = 1e-10;

// ---------------------------------------------------------------------------------------
// Small vector helpers.

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&p, &q)| s + p * q)
}

fn normalize<T: Real>(y: &mut [T]) -> T {
    let n = dot(y, y).sqrt();
    if n > T::zero() {
        y.iter_mut().for_each(|v| *v /= n);
    }
    n
}

fn project_out<T: Real>(y: &mut [T], q: &[T]) {
    let c = dot(y, q);
    y.iter_mut().zip(q).for_each(|(v, &w)| *v -= c * w);
}

/// Deterministic start vector that excites every mode.
fn start_vector<T: Real>(n: usize) -> Vec<T> {
    (0..n)
        .map(|k| {
            let k = k as f64;
            T::lit(1.0 + 0.5 * (0.7373 * k).sin() + 0.25 * (0.0113 * k * k).cos())
        })
        .collect()
}

/// Unit vector proportional to `exp(log_weight / 2)`: the ground state of the symmetrised
/// Dirichlet form.
fn ground_state<T: Real>(log_weight: &[T]) -> Vec<T> {
    let top = log_weight.iter().copied().fold(T::neg_infinity(), T::max);
    let mut q: Vec<T> = log_weight.iter().map(|&l| ((l - top) * T::lit(0.5)).exp()).collect();
    normalize(&mut q);
    q
}

fn check_log_weight<T: Real>(log_weight: &[T]) -> Result<()> {
    if log_weight.len() < 3 {
        return Err(Error::InvalidGrid(format!("need at least 3 nodes, got {}", log_weight.len())));
    }
    if let Some(k) = log_weight.iter().position(|l| !l.is_finite()) {
        return Err(Error::NegativeWeight(k));
    }
    Ok(())
}

/// Diagonal of the symmetrised line form `(sqrt(mu_{i-1}/mu_i) + sqrt(mu_{i+1}/mu_i)) / h^2`;
/// the off-diagonal is `-1/h^2`.
fn line_diagonal<T: Real>(log_weight: &[T], spacing: T) -> Vec<T> {
    let n = log_weight.len();
    let inv = T::one() / (spacing * spacing);
    let half = T::lit(0.5);
    (0..n)
        .map(|i| {
            let mut d = T::zero();
            if i > 0 {
                d += ((log_weight[i - 1] - log_weight[i]) * half).exp();
            }
            if i + 1 < n {
                d += ((log_weight[i + 1] - log_weight[i]) * half).exp();
            }
            d * inv
        })
        .collect()
}

fn line_apply<T: Real>(diag: &[T], off: T, y: &[T], out: &mut [T]) {
    let n = y.len();
    for i in 0..n {
        let mut s = diag[i] * y[i];
        if i > 0 {
            s += off * y[i - 1];
        }
        if i + 1 < n {
            s += off * y[i + 1];
        }
        out[i] = s;
    }
}

/// Factorises `shift * I + A` for the symmetrised line form.
fn line_factor<T: Real>(diag: &[T], off: T, shift: T) -> Tridiagonal<T> {
    let n = diag.len();
    let lower: Vec<T> = (0..n).map(|i| if i == 0 { T::zero() } else { off }).collect();
    let upper: Vec<T> = (0..n).map(|i| if i + 1 == n { T::zero() } else { off }).collect();
    let d: Vec<T> = diag.iter().map(|&a| a + shift).collect();
    Tridiagonal::factor(&lower, &d, &upper)
}

/// Symmetrised phase-space form on an `nx * nv` grid (row-major, `v` fastest).
struct PhaseForm<T> {
    nx: usize,
    nv: usize,
    ox: T,
    ov: T,
    diag: Vec<T>,
}

impl<T: Real> PhaseForm<T> {
    fn new(log_weight: &[T], nx: usize, nv: usize, dx: T, dv: T) -> Self {
        let half = T::lit(0.5);
        let (ix, iv) = (T::one() / (dx * dx), T::one() / (dv * dv));
        let mut diag = vec![T::zero(); nx * nv];
        for i in 0..nx {
            for j in 0..nv {
                let k = i * nv + j;
                let l = log_weight[k];
                let ratio = |m: usize| ((log_weight[m] - l) * half).exp();
                let mut d = T::zero();
                if i > 0 {
                    d += ratio(k - nv) * ix;
                }
                if i + 1 < nx {
                    d += ratio(k + nv) * ix;
                }
                if j > 0 {
                    d += ratio(k - 1) * iv;
                }
                if j + 1 < nv {
                    d += ratio(k + 1) * iv;
                }
                diag[k] = d;
            }
        }
        Self { nx, nv, ox: -ix, ov: -iv, diag }
    }

    fn apply(&self, shift: T, y: &[T], out: &mut [T]) {
        let (nx, nv) = (self.nx, self.nv);
        out.par_chunks_mut(nv).enumerate().for_each(|(i, row)| {
            for j in 0..nv {
                let k = i * nv + j;
                let mut s = (self.diag[k] + shift) * y[k];
                if i > 0 {
                    s += self.ox * y[k - nv];
                }
                if i + 1 < nx {
                    s += self.ox * y[k + nv];
                }
                if j > 0 {
                    s += self.ov * y[k - 1];
                }
                if j + 1 < nv {
                    s += self.ov * y[k + 1];
                }
                row[j] = s;
            }
        });
    }
}

/// Smallest eigenvalue of a positive semidefinite operator on the orthogonal complement
/// of its unit kernel vector `q`, by shifted inverse iteration with Rayleigh quotients.
fn inverse_iteration<T: Real>(
    apply: impl Fn(&[T], &mut [T]),
    mut solve: impl FnMut(&[T]) -> Result<Vec<T>>,
    q: &[T],
    what: &str,
) -> Result<(T, usize)> {
    let n = q.len();
    let mut y = start_vector::<T>(n);
    project_out(&mut y, q);
    normalize(&mut y);
    let mut ay = vec![T::zero(); n];
    let (mut prev, mut stable) = (T::infinity(), 0);
    let tol = T::lit(EIG_TOL);
    for it in 1..=INVERSE_MAX_ITER {
        let mut z = solve(&y)?;
        project_out(&mut z, q);
        normalize(&mut z);
        apply(&z, &mut ay);
        let lam = dot(&z, &ay);
        if (lam - prev).abs() <= tol * lam.abs() {
            stable += 1;
            if stable >= 3 {
                return Ok((lam, it));
            }
        } else {
            stable = 0;
        }
        prev = lam;
        y = z;
    }
    Err(Error::NotConverged { what: what.into(), iterations: INVERSE_MAX_ITER })
}

// ---------------------------------------------------------------------------------------
// Spectral gaps and multiplier bounds.

/// Dirichlet form `int |grad g|^2 dmu` with `dmu = exp(log_weight)`, discretised with
/// geometric-mean face weights.
#[derive(Clone, Copy, Debug)]
pub enum DirichletForm<'a, T> {
    /// Nodes with uniform spacing.
    Line { log_weight: &'a [T], spacing: T },
    /// Full phase space, on the grid of the field.
    Phase { log_weight: &'a Field<T> },
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct GapEstimate<T> {
    /// Smallest nonzero eigenvalue of the weighted Laplacian.
    pub gap: T,
    /// Poincare constant `1 / gap`.
    pub kappa: T,
    pub iterations: usize,
}

/// Poincare constant of a weighted Dirichlet form: `kappa = 1 / gap` where `gap` is the
/// smallest nonzero eigenvalue of `A` with `<A g, g>_mu = int |grad g|^2 dmu`.
pub fn spectral_gap<T: Real>(form: DirichletForm<'_, T>) -> Result<GapEstimate<T>> {
    let (gap, iterations) = match form {
        DirichletForm::Line { log_weight, spacing } => {
            check_log_weight(log_weight)?;
            let diag = line_diagonal(log_weight, spacing);
            let off = -T::one() / (spacing * spacing);
            let shift = T::lit(1e-4) * diag.iter().copied().fold(T::zero(), T::max);
            let fac = line_factor(&diag, off, shift);
            let q = ground_state(log_weight);
            inverse_iteration(
                |y, out| line_apply(&diag, off, y, out),
                |y| {
                    let mut z = y.to_vec();
                    fac.solve(&mut z);
                    Ok(z)
                },
                &q,
                "line spectral gap",
            )?
        }
        DirichletForm::Phase { log_weight } => {
            let lw = log_weight.data();
            check_log_weight(lw)?;
            let g = log_weight.grid();
            let form = PhaseForm::new(lw, g.nx, g.nv, g.dx, g.dv);
            let shift = T::lit(1e-4) * form.diag.iter().copied().fold(T::zero(), T::max);
            let pre: Vec<T> = form.diag.iter().map(|&d| d + shift).collect();
            let q = ground_state(lw);
            let max_cg = 20 * g.len();
            inverse_iteration(
                |y, out| form.apply(T::zero(), y, out),
                |y| {
                    let mut z = vec![T::zero(); y.len()];
                    pcg(|a, out| form.apply(shift, a, out), &pre, y, &mut z, T::lit(1e-12), max_cg)
                        .ok_or_else(|| Error::NotConverged { what: "conjugate gradients".into(), iterations: max_cg })?;
                    Ok(z)
                },
                &q,
                "phase-space spectral gap",
            )?
        }
    };
    if !(gap > T::zero()) {
        return Err(Error::NotConverged { what: format!("spectral gap is not positive ({gap})"), iterations });
    }
    Ok(GapEstimate { gap, kappa: T::one() / gap, iterations })
}

/// Smallest `kappa` with `int g^2 m dmu <= kappa (int g^2 dmu + int |g'|^2 dmu)` for all
/// grid functions: the largest eigenvalue of `M g = kappa (I + A) g`, by power iteration
/// on `(I + A)^{-1} M` in the symmetrised variables.
pub fn relative_multiplier_bound<T: Real>(multiplier: &[T], log_weight: &[T], spacing: T) -> Result<T> {
    check_log_weight(log_weight)?;
    if multiplier.len() != log_weight.len() {
        return Err(Error::GridMismatch);
    }
    if let Some(k) = multiplier.iter().position(|m| !(m.is_finite() && *m >= T::zero())) {
        return Err(Error::InvalidParameter(format!("multiplier must be finite and non-negative (node {k})")));
    }
    if multiplier.iter().all(|&m| m == T::zero()) {
        return Ok(T::zero());
    }
    let n = log_weight.len();
    let diag = line_diagonal(log_weight, spacing);
    let off = -T::one() / (spacing * spacing);
    let fac = line_factor(&diag, off, T::one());
    let mut y = start_vector::<T>(n);
    normalize(&mut y);
    let mut by = vec![T::zero(); n];
    let (mut prev, mut stable) = (T::zero(), 0);
    let tol = T::lit(EIG_TOL);
    for _ in 0..EIG_MAX_ITER {
        let mut z: Vec<T> = y.iter().zip(multiplier).map(|(&a, &m)| a * m).collect();
        fac.solve(&mut z);
        normalize(&mut z);
        line_apply(&diag, off, &z, &mut by);
        let denom = dot(&z, &z) + dot(&z, &by);
        let num: T = z.iter().zip(multiplier).fold(T::zero(), |s, (&a, &m)| s + m * a * a);
        let kappa = num / denom;
        if (kappa - prev).abs() <= tol * kappa {
            stable += 1;
            if stable >= 3 {
                return Ok(kappa);
            }
        } else {
            stable = 0;
        }
        prev = kappa;
        y = z;
    }
    Err(Error::NotConverged { what: "relative multiplier bound".into(), iterations: EIG_MAX_ITER })
}

/// Log of the spatial equilibrium density up to a constant, `-beta (V + phi_inf)`.
pub fn spatial_log_weight<T: Real>(eq: &SteadyState<T>) -> Vec<T> {
    let beta = eq.params.beta();
    eq.external.value.data().iter().zip(eq.phi.data()).map(|(&v, &p)| -beta * (v + p)).collect()
}

/// Log of the Maxwellian up to a constant, `-beta v^2 / 2`.
pub fn velocity_log_weight<T: Real>(eq: &SteadyState<T>) -> Vec<T> {
    let beta = eq.params.beta();
    eq.grid.v.iter().map(|&v| -beta * v * v * T::lit(0.5)).collect()
}

/// Log of `finf` up to a constant.
pub fn phase_log_weight<T: Real>(eq: &SteadyState<T>) -> Field<T> {
    let lx = spatial_log_weight(eq);
    let lv = velocity_log_weight(eq);
    Field::from_vec(&eq.grid, lx.iter().flat_map(|&a| lv.iter().map(move |&b| a + b)).collect())
        .expect("sizes follow the grid")
}

/// Sharp discrete constant `theta` with `int |psi'|^2 dx <= theta^2 int h^2 finf` over
/// perturbations with `int h finf = 0`. Only the charge density enters the field, and for
/// a given density the smallest norm is attained by `h` independent of `v`, so this is
/// the top singular value of an `nx * nx` operator, found by power iteration.
pub fn field_bound<T: Real>(eq: &SteadyState<T>) -> Result<T> {
    if eq.coupling == T::zero() {
        return Ok(T::zero());
    }
    let g = &eq.grid;
    let n = g.nx;
    let rho = integrate_v(&eq.finf, None)?;
    let root: Vec<T> = rho.data().iter().map(|&r| r.max(T::zero()).sqrt()).collect();
    // Column k of B: field gradient of a unit charge at node k.
    let mut columns = Vec::with_capacity(n);
    for k in 0..n {
        let mut e = vec![T::zero(); n];
        e[k] = eq.coupling * root[k];
        columns.push(poisson_gradient(&XField::from_vec(g, e)?).into_vec());
    }
    let apply = |y: &[T]| -> Vec<T> {
        let mut out = vec![T::zero(); n];
        for (k, col) in columns.iter().enumerate() {
            let c = y[k];
            out.iter_mut().zip(col).for_each(|(o, &b)| *o += b * c);
        }
        out
    };
    let apply_t = |z: &[T]| -> Vec<T> { columns.iter().map(|col| dot(col, z)).collect() };
    let mut q = root.clone();
    normalize(&mut q);
    let mut y = start_vector::<T>(n);
    project_out(&mut y, &q);
    normalize(&mut y);
    let (mut prev, mut stable) = (T::zero(), 0);
    for _ in 0..EIG_MAX_ITER {
        let mut z = apply_t(&apply(&y));
        project_out(&mut z, &q);
        let lam = dot(&z, &y);
        normalize(&mut z);
        if (lam - prev).abs() <= T::lit(EIG_TOL) * lam {
            stable += 1;
            if stable >= 3 {
                return Ok(lam.sqrt());
            }
        } else {
            stable = 0;
        }
        prev = lam;
        y = z;
    }
    Err(Error::NotConverged { what: "field bound".into(), iterations: EIG_MAX_ITER })
}

// ---------------------------------------------------------------------------------------
// Constants report.

/// One estimated constant with its provenance.
#[derive(Clone, Debug, Serialize)]
pub struct Constant<T> {
    pub value: T,
    pub method: String,
    pub resolution: String,
}

impl<T: Real> Constant<T> {
    fn new(value: T, method: &str, resolution: String) -> Self {
        Self { value, method: method.into(), resolution }
    }
}

/// Every constant the certificate consumes.
#[derive(Clone, Debug, Serialize)]
pub struct ConstantsReport<T> {
    pub nu: T,
    pub sigma: T,
    pub coupling: T,
    /// Poincare constant of the spatial equilibrium density.
    pub kappa1: Constant<T>,
    /// Phase-space Poincare constant of `finf`.
    pub kappa2: Constant<T>,
    /// Multiplier bound of `|W''|^2` against `rho_inf`.
    pub kappa3: Constant<T>,
    /// Multiplier bound of `|W'|^2` against `rho_inf`.
    pub kappa4: Constant<T>,
    /// Multiplier bound of `v^2` against the Maxwellian.
    pub kappa4_prime: Constant<T>,
    /// `sqrt(2 + kappa4 nu^2 / (2 sigma^2))`.
    pub kappa5: Constant<T>,
    /// Field bound on the mean-zero subspace; zero without coupling.
    pub theta1: Constant<T>,
    pub rho_sup: Constant<T>,
    /// `sup |V''| / (1 + |V'|)`.
    pub c1: Constant<T>,
}

impl<T: Real> ConstantsReport<T> {
    /// Checks finiteness and positivity (the field bound may vanish without coupling).
    pub fn validate(&self) -> Result<()> {
        let entries = [
            ("kappa1", &self.kappa1),
            ("kappa2", &self.kappa2),
            ("kappa3", &self.kappa3),
            ("kappa4", &self.kappa4),
            ("kappa4_prime", &self.kappa4_prime),
            ("kappa5", &self.kappa5),
            ("rho_sup", &self.rho_sup),
            ("c1", &self.c1),
        ];
        for (name, c) in entries {
            if !(c.value.is_finite() && c.value > T::zero()) {
                return Err(Error::InvalidParameter(format!("{name} = {} is not finite and positive", c.value)));
            }
        }
        let theta_ok = self.theta1.value.is_finite()
            && (self.theta1.value > T::zero() || (self.coupling == T::zero() && self.theta1.value == T::zero()));
        if !theta_ok {
            return Err(Error::InvalidParameter(format!("theta1 = {} is invalid", self.theta1.value)));
        }
        Ok(())
    }

    /// The inputs of the rate search. The field terms of the Lyapunov derivative scale
    /// with the coupling, so the density bound enters as `coupling * sup rho_inf`.
    pub fn rate_inputs(&self) -> RateInputs<T> {
        RateInputs {
            nu: self.nu,
            sigma: self.sigma,
            kappa2: self.kappa2.value,
            kappa3: self.kappa3.value,
            rho_sup: self.coupling.abs() * self.rho_sup.value,
        }
    }
}

/// Estimates every constant on the grid of the equilibrium. The phase-space gap runs
/// concurrently with the one-dimensional problems.
pub fn estimate_constants<T: Real>(eq: &SteadyState<T>) -> Result<ConstantsReport<T>> {
    let g = &eq.grid;
    let (nu, sigma) = (eq.params.nu, eq.params.sigma);
    let lx = spatial_log_weight(eq);
    let lv = velocity_log_weight(eq);
    let phase = phase_log_weight(eq);
    let res_x = format!("nx={}", g.nx);
    let res_v = format!("nv={}", g.nv);
    let res_p = format!("nx={} nv={}", g.nx, g.nv);

    let (k2, rest) = rayon::join(
        || spectral_gap(DirichletForm::Phase { log_weight: &phase }),
        || -> Result<_> {
            let k1 = spectral_gap(DirichletForm::Line { log_weight: &lx, spacing: g.dx })?;
            let hess2: Vec<T> = eq.w_hess.data().iter().map(|&a| a * a).collect();
            let grad2: Vec<T> = eq.w_grad.data().iter().map(|&a| a * a).collect();
            let v2: Vec<T> = g.v.iter().map(|&v| v * v).collect();
            let k3 = relative_multiplier_bound(&hess2, &lx, g.dx)?;
            let k4 = relative_multiplier_bound(&grad2, &lx, g.dx)?;
            let k4p = relative_multiplier_bound(&v2, &lv, g.dv)?;
            let th = field_bound(eq)?;
            Ok((k1, k3, k4, k4p, th))
        },
    );
    let k2 = k2?;
    let (k1, k3, k4, k4p, th) = rest?;
    let two = T::lit(2.0);
    let k5 = (two + k4 * nu * nu / (two * sigma * sigma)).sqrt();
    let c1 = hessian_gradient_ratio(eq.external.grad.data(), eq.external.hess.data());
    let report = ConstantsReport {
        nu,
        sigma,
        coupling: eq.coupling,
        kappa1: Constant::new(k1.kappa, "inverse iteration, weighted line Laplacian", res_x.clone()),
        kappa2: Constant::new(k2.kappa, "inverse iteration with conjugate gradients, phase-space Laplacian", res_p.clone()),
        kappa3: Constant::new(k3, "power iteration, generalized multiplier problem", res_x.clone()),
        kappa4: Constant::new(k4, "power iteration, generalized multiplier problem", res_x.clone()),
        kappa4_prime: Constant::new(k4p, "power iteration, generalized multiplier problem", res_v),
        kappa5: Constant::new(k5, "closed form from kappa4", res_x.clone()),
        theta1: Constant::new(th, "power iteration, field operator on mean-zero densities", res_x.clone()),
        rho_sup: Constant::new(eq.rho_sup, "grid maximum", res_x.clone()),
        c1: Constant::new(c1, "grid maximum", res_x),
    };
    report.validate()?;
    Ok(report)
}

// ---------------------------------------------------------------------------------------
// Rate certificate.

/// Quantities the matrix conditions depend on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateInputs<T> {
    pub nu: T,
    pub sigma: T,
    pub kappa2: T,
    pub kappa3: T,
    /// Effective density bound (coupling times `sup rho_inf`).
    pub rho_sup: T,
}

/// Scan ranges of the `(eps, gamma)` search. Missing bounds take their defaults:
/// `eps` up to just below `sigma / (2 kappa3)` and `gamma` from `0.5 / sigma`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSpec<T> {
    pub eps_min: T,
    pub eps_max: Option<T>,
    pub n_eps: usize,
    pub gamma_min: Option<T>,
    pub gamma_max: T,
    pub n_gamma: usize,
    /// Rounds of local refinement around the best cell.
    pub refine: usize,
}

impl<T: Real> Default for SearchSpec<T> {
    fn default() -> Self {
        Self {
            eps_min: T::lit(1e-4),
            eps_max: None,
            n_eps: 60,
            gamma_min: None,
            gamma_max: T::lit(1e3),
            n_gamma: 60,
            refine: 4,
        }
    }
}

/// One checked condition with its margin (positive means satisfied).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Condition<T> {
    pub name: String,
    pub holds: bool,
    pub margin: T,
}

impl<T: Real> Condition<T> {
    fn strict(name: &str, margin: T) -> Self {
        Self { name: name.into(), holds: margin > T::zero(), margin }
    }

    fn weak(name: &str, margin: T) -> Self {
        Self { name: name.into(), holds: margin >= T::zero(), margin }
    }
}

/// Everything derived from one `(eps, gamma)` pair.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateCandidate<T> {
    pub eps: T,
    pub gamma: T,
    pub lambda_tilde: T,
    pub lambda: T,
    pub p1: T,
    pub p2: T,
    pub p1_matrix: Sym2<T>,
    pub ledger: Vec<Condition<T>>,
}

impl<T: Real> RateCandidate<T> {
    pub fn feasible(&self) -> bool {
        self.ledger.iter().all(|c| c.holds)
    }

    fn worst_margin(&self) -> T {
        self.ledger.iter().map(|c| c.margin).fold(T::infinity(), T::min)
    }
}

/// The matrix multiplying the second-order terms: `[[eps^3 - eps^4 kappa3 / sigma, eps^2],
/// [eps^2, 2 eps]]`.
pub fn second_order_matrix<T: Real>(eps: T, kappa3: T, sigma: T) -> Sym2<T> {
    let e2 = eps * eps;
    Sym2::new(e2 * eps - e2 * e2 * kappa3 / sigma, e2, T::lit(2.0) * eps)
}

/// The dissipation matrix `P1` of the first-order terms.
pub fn dissipation_matrix<T: Real>(eps: T, gamma: T, inputs: &RateInputs<T>) -> Sym2<T> {
    let RateInputs { nu, sigma, kappa3, rho_sup, .. } = *inputs;
    let two = T::lit(2.0);
    let e2 = eps * eps;
    let e4 = e2 * e2;
    let field = sigma * sigma * rho_sup * rho_sup / (nu * nu) + two * sigma * rho_sup / nu;
    Sym2::new(
        e2 - e4,
        nu * e2 + two * eps,
        two * gamma * sigma - T::one() + T::lit(4.0) * nu * eps - e2 * field - two * e4 * kappa3,
    )
}

/// Evaluates every condition for one pair. Pure and deterministic, so re-evaluating from
/// stored inputs reproduces a ledger exactly.
pub fn evaluate_candidate<T: Real>(eps: T, gamma: T, inputs: &RateInputs<T>) -> RateCandidate<T> {
    let m0 = second_order_matrix(eps, inputs.kappa3, inputs.sigma);
    let p1m = dissipation_matrix(eps, gamma, inputs);
    let (p1, p2, mu) = match p_matrix(eps) {
        Ok(p) => {
            let (a, b) = p.eigenvalues();
            (p.min_eig_accurate().max(a), b, p1m.generalized_min_eig(&p))
        }
        Err(_) => (T::zero(), T::zero(), T::zero()),
    };
    let lambda_tilde = T::lit(0.5) * mu * (T::one() - T::lit(RATE_SHRINK));
    let lambda = lambda_tilde * p1 / (p1 + gamma * inputs.kappa2);
    let rate_margin = match p_matrix(eps) {
        Ok(p) => p1m.sub(&p.scale(T::lit(2.0) * lambda_tilde)).min_eig_accurate(),
        Err(_) => T::neg_infinity(),
    };
    let ledger = vec![
        Condition::strict("eps_positive", eps),
        Condition::strict("gamma_positive", gamma),
        Condition::weak("second_order_matrix_psd", m0.min_eig_accurate()),
        Condition::strict("p_positive_definite", p1),
        Condition::strict("p1_positive_definite", p1m.min_eig_accurate()),
        Condition::strict("lambda_tilde_positive", lambda_tilde),
        Condition::weak("rate_relation_p1_minus_2_lambda_tilde_p_psd", rate_margin),
        Condition::strict("lambda_positive", lambda),
    ];
    RateCandidate { eps, gamma, lambda_tilde, lambda, p1, p2, p1_matrix: p1m, ledger }
}

fn log_grid<T: Real>(lo: T, hi: T, n: usize) -> Vec<T> {
    if n <= 1 || hi <= lo {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|k| (a + (b - a) * T::from_count(k) / T::from_count(n - 1)).exp()).collect()
}

/// Emitted certificate.
#[derive(Clone, Debug, Serialize)]
pub struct CertificateReport<T> {
    pub schema_version: u32,
    pub eps: T,
    pub gamma: T,
    pub lambda_tilde: T,
    pub lambda: T,
    pub p1: T,
    pub p2: T,
    pub condition_ledger: Vec<Condition<T>>,
    pub inputs: RateInputs<T>,
    pub search: SearchSpec<T>,
    pub candidates_evaluated: usize,
    pub duhamel: Option<DuhamelReport<T>>,
}

impl<T: Real> CertificateReport<T> {
    /// Lyapunov parameters of the certified functional.
    pub fn lyapunov(&self) -> crate::functionals::LyapunovSpec<T> {
        crate::functionals::LyapunovSpec {
            gamma: self.gamma,
            eps: self.eps,
            mode: crate::functionals::LyapunovMode::Constant,
        }
    }

    /// Re-evaluates the ledger from the stored inputs.
    pub fn recheck(&self) -> RateCandidate<T> {
        evaluate_candidate(self.eps, self.gamma, &self.inputs)
    }
}

/// Result of a search with an empty feasible set.
#[derive(Clone, Debug, Serialize)]
pub struct InfeasibleReport<T> {
    pub schema_version: u32,
    /// The pair whose worst margin is largest.
    pub best: RateCandidate<T>,
    pub violated: Vec<Condition<T>>,
    pub inputs: RateInputs<T>,
    pub search: SearchSpec<T>,
    pub candidates_evaluated: usize,
}

#[derive(Clone, Debug, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CertifyOutcome<T> {
    Certified(CertificateReport<T>),
    Infeasible(InfeasibleReport<T>),
}

/// Scans `(eps, gamma)` on log-spaced grids, refines around the best cell and returns
/// the feasible pair with the largest certified rate.
pub fn certify_rate<T: Real>(inputs: &RateInputs<T>, search: &SearchSpec<T>) -> Result<CertifyOutcome<T>> {
    let RateInputs { nu, sigma, kappa2, kappa3, rho_sup } = *inputs;
    for (name, v) in [("nu", nu), ("sigma", sigma), ("kappa2", kappa2), ("kappa3", kappa3)] {
        if !(v.is_finite() && v > T::zero()) {
            return Err(Error::InvalidParameter(format!("{name} must be finite and positive, got {v}")));
        }
    }
    if !(rho_sup.is_finite() && rho_sup >= T::zero()) {
        return Err(Error::InvalidParameter(format!("rho_sup must be finite and non-negative, got {rho_sup}")));
    }
    if search.n_eps == 0 || search.n_gamma == 0 || !(search.eps_min > T::zero()) {
        return Err(Error::InvalidParameter("search grids need points and eps_min > 0".into()));
    }
    let eps_cap = sigma / (T::lit(2.0) * kappa3) * (T::one() - T::lit(1e-6));
    let eps_hi = search.eps_max.unwrap_or(eps_cap);
    let gamma_lo = search.gamma_min.unwrap_or(T::lit(0.5) / sigma);
    let eps_grid = log_grid(search.eps_min, eps_hi, search.n_eps);
    let gamma_grid = log_grid(gamma_lo, search.gamma_max, search.n_gamma);

    let scan = |eg: &[T], gg: &[T]| -> Vec<RateCandidate<T>> {
        eg.par_iter()
            .flat_map_iter(|&e| gg.iter().map(move |&g| evaluate_candidate(e, g, inputs)))
            .collect()
    };
    let better = |a: &RateCandidate<T>, b: &RateCandidate<T>| -> bool {
        match (a.feasible(), b.feasible()) {
            (true, false) => true,
            (false, true) => false,
            (true, true) => a.lambda > b.lambda,
            (false, false) => a.worst_margin() > b.worst_margin(),
        }
    };
    let pick = |cands: Vec<RateCandidate<T>>| -> RateCandidate<T> {
        let mut best = cands[0].clone();
        for c in cands.into_iter().skip(1) {
            if better(&c, &best) {
                best = c;
            }
        }
        best
    };
    let first = scan(&eps_grid, &gamma_grid);
    let mut evaluated = first.len();
    let mut best = pick(first);

    // Local refinement: a finer log grid spanning the neighbouring cells.
    let ratio = |grid: &[T]| if grid.len() > 1 { grid[1] / grid[0] } else { T::one() };
    let (mut re, mut rg) = (ratio(&eps_grid), ratio(&gamma_grid));
    for _ in 0..search.refine {
        if !best.feasible() {
            break;
        }
        let e_lo = (best.eps / re).max(search.eps_min);
        let e_hi = (best.eps * re).min(eps_hi);
        let g_lo = (best.gamma / rg).max(gamma_lo);
        let g_hi = (best.gamma * rg).min(search.gamma_max);
        let eg = log_grid(e_lo, e_hi, 11);
        let gg = log_grid(g_lo, g_hi, 11);
        let cands = scan(&eg, &gg);
        evaluated += cands.len();
        let local = pick(cands);
        if better(&local, &best) {
            best = local;
        }
        re = ratio(&eg);
        rg = ratio(&gg);
    }

    if best.feasible() {
        Ok(CertifyOutcome::Certified(CertificateReport {
            schema_version: SCHEMA_VERSION,
            eps: best.eps,
            gamma: best.gamma,
            lambda_tilde: best.lambda_tilde,
            lambda: best.lambda,
            p1: best.p1,
            p2: best.p2,
            condition_ledger: best.ledger.clone(),
            inputs: *inputs,
            search: *search,
            candidates_evaluated: evaluated,
            duhamel: None,
        }))
    } else {
        let violated = best.ledger.iter().filter(|c| !c.holds).cloned().collect();
        Ok(CertifyOutcome::Infeasible(InfeasibleReport {
            schema_version: SCHEMA_VERSION,
            best,
            violated,
            inputs: *inputs,
            search: *search,
            candidates_evaluated: evaluated,
        }))
    }
}

// ---------------------------------------------------------------------------------------
// Short-time (hypoelliptic) admissibility.

#[derive(Clone, Debug, Serialize)]
pub struct HypoLedger<T> {
    pub eps: T,
    pub gamma: T,
    pub t0: T,
    /// Minimum over sampled times of each closed-form PSD test.
    pub conditions: Vec<Condition<T>>,
    pub samples: usize,
    pub admissible: bool,
}

/// Number of geometric time samples in `(0, t0]`.
pub const HYPO_SAMPLES: usize = 400;

/// Checks the time-dependent matrix conditions on a geometric grid of `(0, t0]` and the
/// bound `gamma >= sup rho eps^3 t0^3 / 3`.
pub fn hypo_admissible<T: Real>(eps: T, gamma: T, t0: T, inputs: &RateInputs<T>) -> Result<HypoLedger<T>> {
    if !(t0 > T::zero()) {
        return Err(Error::InvalidParameter(format!("t0 must be positive, got {t0}")));
    }
    let RateInputs { nu, sigma, kappa3, rho_sup, .. } = *inputs;
    let two = T::lit(2.0);
    let field = (sigma * sigma * rho_sup * rho_sup + two * sigma * nu * rho_sup) / (nu * nu);
    let mut mins = [T::infinity(); 6];
    let times = log_grid(t0 * T::lit(1e-6), t0, HYPO_SAMPLES);
    for &t in &times {
        let (et, e2t2) = (eps * t, eps * eps * t * t);
        let m0 = Sym2::new(e2t2 * et - e2t2 * e2t2 * kappa3 / sigma, e2t2, two * et);
        let a = (eps * eps - T::lit(3.0) * eps * eps * eps) * t * t - e2t2 * e2t2;
        let b = nu * e2t2 + two * (eps - eps * eps) * t;
        let c = two * (gamma * sigma - eps) - T::one() + T::lit(4.0) * nu * et - field * e2t2 - two * e2t2 * e2t2 * kappa3;
        let m1 = Sym2::new(a, b, c);
        let vals = [m0.a, m0.c, m0.det(), m1.a, m1.c, m1.det()];
        for (m, v) in mins.iter_mut().zip(vals) {
            *m = m.min(v);
        }
    }
    let names = [
        "second_order_diag_11",
        "second_order_diag_22",
        "second_order_det",
        "p1_minus_dpdt_diag_11",
        "p1_minus_dpdt_diag_22",
        "p1_minus_dpdt_det",
    ];
    let mut conditions: Vec<Condition<T>> = names.iter().zip(mins).map(|(n, m)| Condition::weak(n, m)).collect();
    conditions.insert(0, Condition::strict("eps_positive", eps));
    conditions.push(Condition::weak("gamma_bound", gamma - rho_sup * eps * eps * eps * t0 * t0 * t0 / T::lit(3.0)));
    let admissible = conditions.iter().all(|c| c.holds);
    Ok(HypoLedger { eps, gamma, t0, conditions, samples: times.len(), admissible })
}

/// Smallest admissible `gamma` for fixed `eps` and `t0`, by bisection on `[lo, hi]`.
/// Returns `None` when even `hi` fails.
pub fn min_admissible_gamma<T: Real>(eps: T, t0: T, inputs: &RateInputs<T>, lo: T, hi: T) -> Result<Option<T>> {
    if !hypo_admissible(eps, hi, t0, inputs)?.admissible {
        return Ok(None);
    }
    if hypo_admissible(eps, lo, t0, inputs)?.admissible {
        return Ok(Some(lo));
    }
    let (mut a, mut b) = (lo, hi);
    for _ in 0..200 {
        let m = T::lit(0.5) * (a + b);
        if hypo_admissible(eps, m, t0, inputs)?.admissible {
            b = m;
        } else {
            a = m;
        }
        if b - a <= T::lit(1e-12) * b {
            break;
        }
    }
    Ok(Some(b))
}

/// Scans `eps` on a log grid up to `eps_max` and returns the admissible ledger with the
/// smallest `gamma`, or `None` when no sampled `eps` admits any `gamma <= gamma_max`.
pub fn hypo_search<T: Real>(t0: T, inputs: &RateInputs<T>, eps_max: T, n_eps: usize, gamma_max: T) -> Result<Option<HypoLedger<T>>> {
    let eps_grid = log_grid(T::lit(1e-4).min(eps_max), eps_max, n_eps.max(2));
    let found: Vec<Option<(T, T)>> = eps_grid
        .par_iter()
        .map(|&e| -> Result<Option<(T, T)>> {
            Ok(min_admissible_gamma(e, t0, inputs, T::lit(1e-8), gamma_max)?.map(|g| (e, g)))
        })
        .collect::<Result<_>>()?;
    let best = found.into_iter().flatten().fold(None, |b: Option<(T, T)>, c| match b {
        Some(b) if b.1 <= c.1 => Some(b),
        _ => Some(c),
    });
    best.map(|(e, g)| hypo_admissible(e, g, t0, inputs)).transpose()
}

// ---------------------------------------------------------------------------------------
// Duhamel constants.

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DuhamelConstants<T> {
    pub lambda1: T,
    pub alpha: T,
    pub i1: T,
    pub i2: T,
    pub lambda_big: T,
}

/// `Lambda = ((e^{-l} + 2) / l + pi + 4) / (2 l)`.
pub fn gronwall_lambda<T: Real>(lambda1: T) -> T {
    ((((-lambda1).exp() + T::lit(2.0)) / lambda1) + T::PI() + T::lit(4.0)) / (T::lit(2.0) * lambda1)
}

/// `int_0^a u^{-p} e^{l u} du` by its everywhere-convergent series of positive terms.
fn singular_head<T: Real>(a: T, p: T, l: T) -> T {
    let base = a.powf(T::one() - p);
    let x = l * a;
    let (mut term, mut sum) = (T::one(), T::zero());
    for k in 0..500 {
        let kk = T::from_count(k);
        let add = term / (kk + T::one() - p);
        sum += add;
        if add <= T::lit(1e-18) * sum && k > 2 {
            break;
        }
        term = term * x / (kk + T::one());
    }
    base * sum
}

fn adaptive_simpson<T: Real>(f: &impl Fn(T) -> T, a: T, b: T, tol: T) -> T {
    fn rec<T: Real>(f: &impl Fn(T) -> T, a: T, b: T, fa: T, fm: T, fb: T, whole: T, tol: T, depth: usize) -> T {
        let m = T::lit(0.5) * (a + b);
        let (lm, rm) = (T::lit(0.5) * (a + m), T::lit(0.5) * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let six = T::lit(6.0);
        let left = (m - a) * (fa + T::lit(4.0) * flm + fm) / six;
        let right = (b - m) * (fm + T::lit(4.0) * frm + fb) / six;
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= T::lit(15.0) * tol {
            left + right + delta / T::lit(15.0)
        } else {
            let half = T::lit(0.5) * tol;
            rec(f, a, m, fa, flm, fm, left, half, depth - 1) + rec(f, m, b, fm, frm, fb, right, half, depth - 1)
        }
    }
    let m = T::lit(0.5) * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) * (fa + T::lit(4.0) * fm + fb) / T::lit(6.0);
    rec(f, a, b, fa, fm, fb, whole, tol, 50)
}

/// `int_0^t (1 + (t - s)^{-p}) e^{-l s} ds`. With `u = t - s` the singular factor sits
/// at `u = 0`, where it is integrated analytically against the exponential.
pub fn duhamel_integral<T: Real>(t: T, p: T, l: T, tol: T) -> T {
    if t <= T::zero() {
        return T::zero();
    }
    let smooth = -(-l * t).exp_m1() / l;
    let a = t.min(T::one() / l);
    // int_0^a u^{-p} e^{-l (t - u)} du
    let head = (-l * t).exp() * singular_head(a, p, l);
    let tail = if a < t {
        let f = |u: T| u.powf(-p) * (-l * (t - u)).exp();
        adaptive_simpson(&f, a, t, tol)
    } else {
        T::zero()
    };
    smooth + head + tail
}

/// Supremum over `t > 0` of the Duhamel integral: coarse geometric scan, then golden
/// section around the best sample.
pub fn duhamel_sup<T: Real>(p: T, l: T) -> T {
    let tol = T::lit(1e-12);
    let f = |t: T| duhamel_integral(t, p, l, tol);
    let ts = log_grid(T::lit(1e-6) / l, T::lit(200.0) / l, 240);
    let vals: Vec<T> = ts.iter().map(|&t| f(t)).collect();
    let k = (0..vals.len()).fold(0, |b, i| if vals[i] > vals[b] { i } else { b });
    let (mut a, mut b) = (ts[k.saturating_sub(1)], ts[(k + 1).min(ts.len() - 1)]);
    let g = T::lit(0.5) * (T::lit(5.0).sqrt() - T::one());
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a).abs() <= T::lit(1e-12) * b {
            break;
        }
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    vals[k].max(fc).max(fd)
}

/// `I1` (singularity `3 alpha / 2`), `I2` (singularity `1/2`) and `Lambda`.
pub fn duhamel_constants<T: Real>(lambda1: T, alpha: T) -> Result<DuhamelConstants<T>> {
    if !(lambda1 > T::zero() && lambda1.is_finite()) {
        return Err(Error::InvalidParameter(format!("lambda1 must be positive, got {lambda1}")));
    }
    if alpha >= T::lit(2.0) / T::lit(3.0) {
        return Err(Error::Divergent(format!("I1 diverges for alpha = {alpha} >= 2/3")));
    }
    if !(alpha > T::zero()) {
        return Err(Error::InvalidParameter(format!("alpha must be positive, got {alpha}")));
    }
    let p1 = T::lit(1.5) * alpha;
    Ok(DuhamelConstants {
        lambda1,
        alpha,
        i1: duhamel_sup(p1, lambda1),
        i2: duhamel_sup(T::lit(0.5), lambda1),
        lambda_big: gronwall_lambda(lambda1),
    })
}

// ---------------------------------------------------------------------------------------
// Empirical semigroup constants.

/// Probe suprema of the semigroup bounds. These are empirical, not proofs.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct SemigroupConstants<T> {
    pub c1: T,
    pub c2: T,
    pub c3: T,
    pub c4: T,
    pub c5: T,
    pub c_r: T,
    pub theta1: T,
    pub probes: usize,
    pub samples: usize,
    pub label: &'static str,
}

/// Options of the probe runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemigroupOptions<T> {
    pub dt: T,
    pub t_end: T,
    /// Sample every this many steps.
    pub every: usize,
    pub alpha: T,
    pub lambda: T,
    pub lambda1: T,
}

struct Norms<T> {
    l2: T,
    hx: T,
    hv1: T,
}

fn norms<T: Real>(h: &Field<T>, eq: &SteadyState<T>, alpha: T) -> Result<Norms<T>> {
    let l2sq = integrate(&h.map(|a| a * a), Some(&eq.finf))?;
    let hv = grad_v(h);
    let hvsq = integrate(&hv.map(|a| a * a), Some(&eq.finf))?;
    Ok(Norms { l2: l2sq.sqrt(), hx: fractional_x_norm(h, &eq.finf, alpha)?, hv1: (l2sq + hvsq).sqrt() })
}

/// Runs the linear flow from every probe (projected to mean zero) and returns the
/// supremum of each bound's defining ratio over probes and sample times.
pub fn estimate_semigroup_constants<T: Real>(
    eq: &SteadyState<T>,
    probes: &[Field<T>],
    opts: &SemigroupOptions<T>,
) -> Result<SemigroupConstants<T>> {
    if probes.is_empty() {
        return Err(Error::InvalidParameter("empty probe set".into()));
    }
    if !(opts.lambda1 > T::zero() && opts.lambda1 < opts.lambda) {
        return Err(Error::InvalidParameter(format!(
            "need 0 < lambda1 < lambda, got lambda1={}, lambda={}",
            opts.lambda1, opts.lambda
        )));
    }
    if !(opts.dt > T::zero() && opts.t_end > T::zero()) || opts.every == 0 {
        return Err(Error::InvalidParameter("probe runs need dt > 0, t_end > 0, every >= 1".into()));
    }
    let steps = (opts.t_end / opts.dt).round().to_usize().unwrap_or(0).max(1);
    let alpha = opts.alpha;
    let per_probe: Vec<Result<([T; 7], usize)>> = probes
        .par_iter()
        .map(|p| -> Result<([T; 7], usize)> {
            let h0 = project_mean_zero(p, eq)?;
            let n0 = norms(&h0, eq, alpha)?;
            if !(n0.l2 > T::zero()) {
                return Err(Error::InvalidParameter("zero probe".into()));
            }
            let mut sup = [T::one(), T::one(), T::zero(), T::one(), T::zero(), T::zero(), T::zero()];
            let mut samples = 0;
            let mut stepper = Stepper::new(eq, Mode::Linear)?;
            stepper.check_cfl(&h0, opts.dt)?;
            let mut h = h0.clone();
            let record = |h: &Field<T>, t: T, sup: &mut [T; 7]| -> Result<()> {
                let n = norms(h, eq, alpha)?;
                if n.l2 > T::zero() {
                    let r = nonlinear_term(h, eq)?;
                    let rn = integrate(&r.map(|a| a * a), Some(&eq.finf))?.sqrt();
                    sup[5] = sup[5].max(rn / (n.hx * n.hv1));
                    let psi = field_gradient_from_h(h, &eq.finf, eq.coupling)?;
                    sup[6] = sup[6].max(crate::functionals::field_energy(&psi).sqrt() / n.l2);
                }
                if t > T::zero() {
                    let (el, el1) = ((opts.lambda * t).exp(), (opts.lambda1 * t).exp());
                    sup[0] = sup[0].max(n.l2 * el / n0.l2);
                    sup[1] = sup[1].max(n.hx * el / n0.hx);
                    sup[2] = sup[2].max(n.hx * el1 / ((T::one() + t.powf(-T::lit(1.5) * alpha)) * n0.l2));
                    sup[3] = sup[3].max(n.hv1 * el / n0.hv1);
                    sup[4] = sup[4].max(n.hv1 * el1 / ((T::one() + t.powf(-T::lit(0.5))) * n0.l2));
                }
                Ok(())
            };
            record(&h, T::zero(), &mut sup)?;
            samples += 1;
            for n in 1..=steps {
                stepper.step_unchecked(&mut h, opts.dt);
                if !h.is_finite() {
                    return Err(Error::NonFinite("probe state".into()));
                }
                if n % opts.every == 0 || n == steps {
                    record(&h, opts.dt * T::from_count(n), &mut sup)?;
                    samples += 1;
                }
            }
            Ok((sup, samples))
        })
        .collect();
    let mut total = [T::zero(); 7];
    let mut samples = 0;
    for r in per_probe {
        let (s, n) = r?;
        for (t, v) in total.iter_mut().zip(s) {
            *t = t.max(v);
        }
        samples += n;
    }
    Ok(SemigroupConstants {
        c1: total[0],
        c2: total[1],
        c3: total[2],
        c4: total[3],
        c5: total[4],
        c_r: total[5],
        theta1: total[6],
        probes: probes.len(),
        samples,
        label: "empirical",
    })
}

// ---------------------------------------------------------------------------------------
// Smallness thresholds.

/// Coefficients of the two smallness inequalities at radius `r`:
/// `c2 d1 + first * d2 <= r` and `second * d2 < 1`. The exponential factor overflows
/// for small `lambda1`, so both coefficients are also kept as logarithms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SmallnessCoefficients<T> {
    pub c2: T,
    pub first: T,
    pub second: T,
    pub ln_first: T,
    pub ln_second: T,
}

/// `ln(e^a + e^b)` without overflow.
fn log_add_exp<T: Real>(a: T, b: T) -> T {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == T::neg_infinity() {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

pub fn smallness_coefficients<T: Real>(
    sg: &SemigroupConstants<T>,
    dc: &DuhamelConstants<T>,
    r: T,
) -> SmallnessCoefficients<T> {
    let (c3, c4, c5, cr) = (sg.c3, sg.c4, sg.c5, sg.c_r);
    let a = c5 * cr * dc.i2 * r;
    let x = c5 * c5 * cr * cr * dc.lambda_big * r * r;
    let ln_first = (c3 * c4 * cr * dc.i1 * (r + a * r)).ln() + x;
    let ln_quad = (c3 * c4 * c5 * cr * cr * dc.i1 * dc.i2 * r * (T::one() + a) * (T::one() + a)).ln() + x + x;
    let ln_lin = (c3 * c4 * cr * dc.i1 * (T::one() + a)).ln() + x;
    let ln_second = log_add_exp(ln_quad, ln_lin);
    SmallnessCoefficients { c2: sg.c2, first: ln_first.exp(), second: ln_second.exp(), ln_first, ln_second }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SmallnessThresholds<T> {
    pub r: T,
    pub delta1: T,
    /// May underflow to zero; `ln_delta2` keeps the value.
    pub delta2: T,
    pub ln_delta2: T,
    /// Left side of the first inequality at the thresholds (must be `<= r`).
    pub first_lhs: T,
    /// Left side of the second inequality at the thresholds (must be `< 1`).
    pub second_lhs: T,
}

/// Safety factor of the strict inequality.
pub const SMALLNESS_SAFETY: f64 = 0.99;

/// Largest thresholds at radius `r`: `delta2` makes the second left side equal to the
/// safety factor and `delta1` then saturates the first inequality.
pub fn smallness_thresholds<T: Real>(
    sg: &SemigroupConstants<T>,
    dc: &DuhamelConstants<T>,
    r: T,
) -> Result<SmallnessThresholds<T>> {
    if !(r > T::zero()) {
        return Err(Error::InvalidParameter(format!("r must be positive, got {r}")));
    }
    let k = smallness_coefficients(sg, dc, r);
    if !(k.c2 > T::zero()) {
        return Err(Error::InvalidParameter("C2 must be positive".into()));
    }
    if k.ln_second.is_nan() || k.ln_first.is_nan() || k.ln_second == T::infinity() {
        return Err(Error::NonFinite(format!("smallness coefficients at r = {r}")));
    }
    let ln_delta2 = T::lit(SMALLNESS_SAFETY).ln() - k.ln_second;
    let used = if ln_delta2.is_finite() { (k.ln_first + ln_delta2).exp() } else { T::zero() };
    let delta1 = ((r - used) / k.c2).max(T::zero());
    let first_lhs = k.c2 * delta1 + used;
    let second_lhs = if ln_delta2.is_finite() { (k.ln_second + ln_delta2).exp() } else { T::zero() };
    Ok(SmallnessThresholds { r, delta1, delta2: ln_delta2.exp(), ln_delta2, first_lhs, second_lhs })
}

/// Scans `r` over a log grid and keeps the radius maximising `min(delta1, delta2)`.
pub fn best_smallness_radius<T: Real>(
    sg: &SemigroupConstants<T>,
    dc: &DuhamelConstants<T>,
    r_min: T,
    r_max: T,
    n: usize,
) -> Result<SmallnessThresholds<T>> {
    let mut best: Option<SmallnessThresholds<T>> = None;
    for r in log_grid(r_min, r_max, n.max(2)) {
        let s = smallness_thresholds(sg, dc, r)?;
        if best.map_or(true, |b| s.delta1.min(s.delta2) > b.delta1.min(b.delta2)) {
            best = Some(s);
        }
    }
    best.ok_or_else(|| Error::InvalidParameter("empty radius grid".into()))
}

/// Duhamel block of a certificate.
#[derive(Clone, Debug, Serialize)]
pub struct DuhamelReport<T> {
    pub constants: DuhamelConstants<T>,
    pub semigroup: SemigroupConstants<T>,
    pub thresholds: SmallnessThresholds<T>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::PhaseGrid;
    use crate::potential::{PhysParams, PotentialSpec};
    use crate::steady_state::{solve_pbe, PbeOptions};
    use nalgebra::{DMatrix, DVector, SymmetricEigen};

    fn equilibrium(n: usize, l: f64, coupling: f64) -> SteadyState<f64> {
        let g = PhaseGrid::new(n, n, l, l).unwrap();
        let opts = PbeOptions { coupling, ..PbeOptions::default() };
        solve_pbe(&g, &PotentialSpec::Quadratic { omega: 1.0 }, &PhysParams::new(1.0, 1.0).unwrap(), &opts).unwrap()
    }

    fn gaussian_line(n: usize, l: f64) -> (Vec<f64>, f64) {
        let dx = 2.0 * l / n as f64;
        let lw = (0..n).map(|i| {
            let x = -l + (i as f64 + 0.5) * dx;
            -x * x / 2.0
        });
        (lw.collect(), dx)
    }

    /// Dense symmetrised line operator, assembled directly from the weights.
    fn dense_line(lw: &[f64], h: f64) -> DMatrix<f64> {
        let n = lw.len();
        let mu: Vec<f64> = lw.iter().map(|l| l.exp()).collect();
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n - 1 {
            // Face weight sqrt(mu_i mu_{i+1}); D^{-1/2} A D^{-1/2} with D = diag(mu).
            let w = (mu[i] * mu[i + 1]).sqrt() / (h * h);
            a[(i, i)] += w / mu[i];
            a[(i + 1, i + 1)] += w / mu[i + 1];
            a[(i, i + 1)] -= w / (mu[i] * mu[i + 1]).sqrt();
            a[(i + 1, i)] -= w / (mu[i] * mu[i + 1]).sqrt();
        }
        a
    }

    #[test]
    fn ornstein_uhlenbeck_gap_is_one() {
        let (lw, dx) = gaussian_line(512, 8.0);
        let g = spectral_gap(DirichletForm::Line { log_weight: &lw, spacing: dx }).unwrap();
        assert!((g.kappa - 1.0).abs() < 0.02, "{}", g.kappa);
    }

    #[test]
    fn line_gap_matches_dense_eigenvalues() {
        let lw: Vec<f64> = (0..60).map(|i| {
            let x = -4.0 + (i as f64 + 0.5) * 8.0 / 60.0;
            -(x * x - 1.0) * (x * x - 1.0) / 4.0
        }).collect();
        let h = 8.0 / 60.0;
        let eig = SymmetricEigen::new(dense_line(&lw, h)).eigenvalues;
        let mut e: Vec<f64> = eig.iter().copied().collect();
        e.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(e[0].abs() < 1e-9);
        let g = spectral_gap(DirichletForm::Line { log_weight: &lw, spacing: h }).unwrap();
        assert!((g.gap - e[1]).abs() < 1e-8 * e[1], "{} vs {}", g.gap, e[1]);
    }

    #[test]
    fn gap_is_invariant_under_weight_scaling() {
        let (lw, dx) = gaussian_line(200, 6.0);
        let shifted: Vec<f64> = lw.iter().map(|l| l + 7.3f64.ln()).collect();
        let a = spectral_gap(DirichletForm::Line { log_weight: &lw, spacing: dx }).unwrap().kappa;
        let b = spectral_gap(DirichletForm::Line { log_weight: &shifted, spacing: dx }).unwrap().kappa;
        assert!((a - b).abs() < 1e-10 * a);
    }

    #[test]
    fn phase_gap_tensorizes() {
        let eq = equilibrium(48, 6.0, 0.0);
        let g = &eq.grid;
        let lx = spatial_log_weight(&eq);
        let lv = velocity_log_weight(&eq);
        let kx = spectral_gap(DirichletForm::Line { log_weight: &lx, spacing: g.dx }).unwrap().kappa;
        let kv = spectral_gap(DirichletForm::Line { log_weight: &lv, spacing: g.dv }).unwrap().kappa;
        let phase = phase_log_weight(&eq);
        let k2 = spectral_gap(DirichletForm::Phase { log_weight: &phase }).unwrap().kappa;
        let oracle = kx.max(kv);
        assert!((k2 - oracle).abs() < 0.03 * oracle, "{k2} vs {oracle}");
        assert!((k2 - 1.0).abs() < 0.03, "{k2}");
    }

    #[test]
    fn constant_and_zero_multipliers() {
        let (lw, dx) = gaussian_line(128, 6.0);
        let four = vec![4.0; 128];
        let k = relative_multiplier_bound(&four, &lw, dx).unwrap();
        assert!((k - 4.0).abs() < 1e-10, "{k}");
        assert_eq!(relative_multiplier_bound(&[0.0; 128], &lw, dx).unwrap(), 0.0);
        assert!(relative_multiplier_bound(&[-1.0; 128], &lw, dx).is_err());
    }

    #[test]
    fn multiplier_bound_matches_dense_generalized_problem() {
        let n = 64;
        let (lw, dv) = gaussian_line(n, 5.0);
        let m: Vec<f64> = (0..n).map(|i| {
            let v = -5.0 + (i as f64 + 0.5) * dv;
            v * v
        }).collect();
        let b = DMatrix::identity(n, n) + dense_line(&lw, dv);
        let chol = b.cholesky().unwrap();
        let linv = chol.l().try_inverse().unwrap();
        let mm = DMatrix::from_diagonal(&DVector::from_vec(m.clone()));
        let c = &linv * mm * linv.transpose();
        let top = SymmetricEigen::new(c).eigenvalues.max();
        let k = relative_multiplier_bound(&m, &lw, dv).unwrap();
        assert!((k - top).abs() < 1e-8 * top, "{k} vs {top}");
    }

    #[test]
    fn field_bound_matches_dense_singular_value() {
        let eq = equilibrium(40, 6.0, 1.0);
        let g = &eq.grid;
        let n = g.nx;
        let rho = integrate_v(&eq.finf, None).unwrap();
        let root: Vec<f64> = rho.data().iter().map(|r| r.sqrt()).collect();
        let mut t = DMatrix::zeros(n, n);
        for k in 0..n {
            let mut e = vec![0.0; n];
            e[k] = 1.0;
            let col = poisson_gradient(&XField::from_vec(g, e).unwrap());
            for i in 0..n {
                t[(i, k)] = col.data()[i] * root[k];
            }
        }
        let q = DVector::from_vec(root.clone()).normalize();
        let proj = DMatrix::identity(n, n) - &q * q.transpose();
        let top = (t * proj).singular_values().max();
        let theta = field_bound(&eq).unwrap();
        assert!((theta - top).abs() < 1e-8 * top, "{theta} vs {top}");
        assert_eq!(field_bound(&equilibrium(40, 6.0, 0.0)).unwrap(), 0.0);
    }

    #[test]
    fn field_bound_dominates_random_perturbations() {
        let eq = equilibrium(48, 6.0, 1.0);
        let theta = field_bound(&eq).unwrap();
        for s in 0..10 {
            let a = 0.3 + 0.2 * s as f64;
            let h = Field::from_fn(&eq.grid, |x, v| (a * x).sin() + (x * v * 0.1 * s as f64).cos() * (-x * x / 4.0).exp());
            let h = project_mean_zero(&h, &eq).unwrap();
            let psi = field_gradient_from_h(&h, &eq.finf, eq.coupling).unwrap();
            let lhs = crate::functionals::field_energy(&psi).sqrt();
            let l2 = integrate(&h.map(|a| a * a), Some(&eq.finf)).unwrap().sqrt();
            assert!(lhs <= theta * l2 * (1.0 + 1e-9));
        }
    }

    #[test]
    fn constants_report_is_valid() {
        let eq = equilibrium(48, 6.0, 1.0);
        let c = estimate_constants(&eq).unwrap();
        assert!(c.theta1.value > 0.0);
        assert!(c.kappa5.value > 2f64.sqrt());
        let off = estimate_constants(&equilibrium(48, 6.0, 0.0)).unwrap();
        assert_eq!(off.theta1.value, 0.0);
        assert_eq!(off.rate_inputs().rho_sup, 0.0);
        // Quadratic potential without field: W'' = 1, so the multiplier bound is 1.
        assert!((off.kappa3.value - 1.0).abs() < 1e-10);
    }

    #[test]
    fn determinant_precondition() {
        let ok = second_order_matrix(0.25 * (1.0 - 1e-9), 2.0, 1.0);
        let bad = second_order_matrix(0.2501, 2.0, 1.0);
        assert!(ok.is_positive_semidefinite());
        assert!(!bad.is_positive_semidefinite());
        let e: f64 = 0.17;
        assert!((second_order_matrix(e, 2.0, 1.0).det() - e.powi(4) * (1.0 - 2.0 * e * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn zero_eps_is_rejected() {
        let inputs = RateInputs { nu: 1.0, sigma: 1.0, kappa2: 1.0, kappa3: 1.0, rho_sup: 0.4 };
        assert!(!evaluate_candidate(0.0, 5.0, &inputs).feasible());
        assert!(!hypo_admissible(0.0, 5.0, 1.0, &inputs).unwrap().admissible);
    }

    fn test_inputs() -> RateInputs<f64> {
        RateInputs { nu: 1.0, sigma: 1.0, kappa2: 1.0, kappa3: 1.0, rho_sup: 0.4 }
    }

    /// Rate of one pair computed independently with nalgebra: Cholesky feasibility and the
    /// symmetric eigenproblem of `L^{-1} P1 L^{-T}`.
    fn oracle_rate(e: f64, g: f64, k: &RateInputs<f64>) -> Option<f64> {
        let (nu, s, r) = (k.nu, k.sigma, k.rho_sup);
        let first = DMatrix::from_row_slice(2, 2, &[e.powi(3) - e.powi(4) * k.kappa3 / s, e * e, e * e, 2.0 * e]);
        if SymmetricEigen::new(first).eigenvalues.min() < 0.0 {
            return None;
        }
        let b = nu * e * e + 2.0 * e;
        let c = 2.0 * g * s - 1.0 + 4.0 * nu * e - e * e * (s * s * r * r / (nu * nu) + 2.0 * s * r / nu) - 2.0 * e.powi(4) * k.kappa3;
        let p1 = DMatrix::from_row_slice(2, 2, &[e * e - e.powi(4), b, b, c]);
        p1.clone().cholesky()?;
        let p = DMatrix::from_row_slice(2, 2, &[e.powi(3), e * e, e * e, 2.0 * e]);
        let pe = SymmetricEigen::new(p.clone()).eigenvalues.min();
        let l = p.cholesky()?.l();
        let li = l.try_inverse()?;
        let mu = SymmetricEigen::new(&li * p1 * li.transpose()).eigenvalues.min();
        Some(0.5 * mu * pe / (pe + g * k.kappa2))
    }

    #[test]
    fn coarse_search_matches_fine_scan() {
        let k = test_inputs();
        let mut fine: f64 = 0.0;
        for i in 1..=400 {
            for j in 1..=400 {
                if let Some(l) = oracle_rate(0.5 * i as f64 / 400.0, 50.0 * j as f64 / 400.0, &k) {
                    fine = fine.max(l);
                }
            }
        }
        let CertifyOutcome::Certified(c) = certify_rate(&k, &SearchSpec::default()).unwrap() else {
            panic!("infeasible")
        };
        assert!(fine > 0.0);
        assert!((c.lambda - fine).abs() < 0.05 * fine, "{} vs {fine}", c.lambda);
        assert!(c.condition_ledger.iter().all(|m| m.holds && m.margin >= 0.0));
        let direct = oracle_rate(c.eps, c.gamma, &k).unwrap();
        assert!((direct - c.lambda).abs() < 1e-8 * direct);
    }

    #[test]
    fn ledger_is_reproducible() {
        let k = test_inputs();
        let CertifyOutcome::Certified(c) = certify_rate(&k, &SearchSpec::default()).unwrap() else { panic!() };
        let again = c.recheck();
        assert_eq!(again.ledger, c.condition_ledger);
        assert_eq!(again.lambda.to_bits(), c.lambda.to_bits());
        assert_eq!(c.lambda, c.lambda_tilde * c.p1 / (c.p1 + c.gamma * k.kappa2));
    }

    #[test]
    fn infeasible_search_reports_violations() {
        let k = test_inputs();
        let search = SearchSpec { gamma_min: Some(1e-3), gamma_max: 1e-2, ..SearchSpec::default() };
        match certify_rate(&k, &search).unwrap() {
            CertifyOutcome::Infeasible(r) => {
                assert!(!r.violated.is_empty());
                assert!(r.violated.iter().any(|c| c.name == "p1_positive_definite"));
            }
            CertifyOutcome::Certified(_) => panic!("tiny gamma cannot be feasible"),
        }
    }

    #[test]
    fn hypo_margins_vanish_at_small_times() {
        let k = test_inputs();
        let led = hypo_admissible(0.1, 5.0, 1e-4, &k).unwrap();
        let m0 = led.conditions.iter().find(|c| c.name == "second_order_det").unwrap();
        assert!(m0.margin >= 0.0 && m0.margin < 1e-20);
    }

    #[test]
    fn hypo_boundary_matches_dense_scan() {
        let k = test_inputs();
        let eps = 0.1;
        let g = min_admissible_gamma(eps, 1.0, &k, 1e-3, 1e3).unwrap().expect("feasible region");
        // Dense scan on gamma at the same eps.
        let scan = (0..20_000)
            .map(|i| 1e-3 + (g * 2.0 - 1e-3) * i as f64 / 20_000.0)
            .find(|&gg| hypo_admissible(eps, gg, 1.0, &k).unwrap().admissible)
            .unwrap();
        assert!((scan - g).abs() < 2e-4 * g.max(1.0), "{scan} vs {g}");
    }

    #[test]
    fn hypo_search_returns_an_admissible_pair() {
        let k = test_inputs();
        let led = hypo_search(1.0, &k, 0.5, 30, 1e3).unwrap().expect("feasible");
        assert!(led.admissible);
        // A slightly smaller gamma at the same eps must fail.
        assert!(!hypo_admissible(led.eps, led.gamma * (1.0 - 1e-6), 1.0, &k).unwrap().admissible);
    }

    #[test]
    fn gronwall_constant_at_one() {
        assert!((gronwall_lambda(1.0f64) - 4.754736).abs() < 1e-5);
        let exact = 0.5 * ((-1.0f64).exp() + 2.0 + std::f64::consts::PI + 4.0);
        assert!((gronwall_lambda(1.0f64) - exact).abs() < 1e-14);
    }

    #[test]
    fn alpha_at_two_thirds_diverges() {
        assert!(matches!(duhamel_constants(1.0, 2.0 / 3.0), Err(Error::Divergent(_))));
        assert!(duhamel_constants(1.0, 0.6).is_ok());
    }

    #[test]
    fn half_singularity_integral_decreases_with_rate() {
        for l in [0.3, 1.0, 2.5] {
            assert!(duhamel_sup(0.5, 2.0 * l) < duhamel_sup(0.5, l));
        }
    }

    /// With `u = w^2` the singular integral becomes smooth; composite Simpson then gives
    /// the reference value.
    fn i2_reference(t: f64) -> f64 {
        let f = |w: f64| 2.0 * (-(t - w * w)).exp();
        let m = 20_000;
        let b = t.sqrt();
        let h = b / m as f64;
        let mut acc = f(0.0) + f(b);
        for k in 1..m {
            acc += if k % 2 == 1 { 4.0 } else { 2.0 } * f(k as f64 * h);
        }
        1.0 - (-t).exp() + acc * h / 3.0
    }

    #[test]
    fn half_singularity_sup_matches_reference_quadrature() {
        let mut best: f64 = 0.0;
        let mut arg = 0.0;
        for i in 1..=2000 {
            let t = 10.0 * i as f64 / 2000.0;
            let v = i2_reference(t);
            if v > best {
                best = v;
                arg = t;
            }
        }
        for i in 0..=2000 {
            let t = arg - 0.005 + 0.01 * i as f64 / 2000.0;
            best = best.max(i2_reference(t));
        }
        let got = duhamel_sup(0.5, 1.0);
        assert!((got - best).abs() < 1e-6, "{got} vs {best}");
        for t in [0.01, 0.5, 2.0, 7.0] {
            assert!((duhamel_integral(t, 0.5, 1.0, 1e-12) - i2_reference(t)).abs() < 1e-8);
        }
    }

    fn sample_constants(scale: f64) -> (SemigroupConstants<f64>, DuhamelConstants<f64>) {
        let sg = SemigroupConstants {
            c1: 1.2,
            c2: 1.5,
            c3: 2.0 * scale,
            c4: 1.3,
            c5: 1.8,
            c_r: 0.7,
            theta1: 0.4,
            probes: 7,
            samples: 100,
            label: "test",
        };
        (sg, duhamel_constants(1.0, 0.6).unwrap())
    }

    #[test]
    fn thresholds_without_nonlinearity() {
        let (mut sg, dc) = sample_constants(1.0);
        sg.c_r = 0.0;
        let t = smallness_thresholds(&sg, &dc, 0.7).unwrap();
        assert!((t.delta1 - 0.7 / sg.c2).abs() < 1e-15);
        assert!(t.delta2.is_infinite());
    }

    #[test]
    fn larger_constants_shrink_delta2() {
        let (a, dc) = sample_constants(1.0);
        let (b, _) = sample_constants(2.0);
        for r in [0.01, 0.1, 1.0] {
            assert!(smallness_thresholds(&b, &dc, r).unwrap().delta2 < smallness_thresholds(&a, &dc, r).unwrap().delta2);
        }
    }

    /// The two left sides written out term by term.
    fn lhs(sg: &SemigroupConstants<f64>, dc: &DuhamelConstants<f64>, r: f64, d1: f64, d2: f64) -> (f64, f64) {
        let (c2, c3, c4, c5, cr) = (sg.c2, sg.c3, sg.c4, sg.c5, sg.c_r);
        let (i1, i2, lam) = (dc.i1, dc.i2, dc.lambda_big);
        let growth = (c5 * c5 * cr * cr * lam * r * r).exp();
        let first = c2 * d1 + c3 * c4 * cr * i1 * (r + c5 * cr * i2 * r * r) * growth * d2;
        let inner = 1.0 + c5 * cr * i2 * r;
        let second = c3 * c4 * c5 * cr * cr * i1 * i2 * r * inner * inner * growth * growth * d2
            + c3 * c4 * cr * i1 * inner * growth * d2;
        (first, second)
    }

    /// Largest `d` in `[lo, hi]` with `ok(d)`, bisecting in `ln d`.
    fn bisect(lo: f64, hi: f64, ok: impl Fn(f64) -> bool) -> f64 {
        let (mut lo, mut hi) = (lo.ln(), hi.ln());
        for _ in 0..200 {
            let m = 0.5 * (lo + hi);
            if ok(m.exp()) {
                lo = m;
            } else {
                hi = m;
            }
        }
        lo.exp()
    }

    #[test]
    fn thresholds_match_bisection_oracle() {
        let (sg, dc) = sample_constants(1.0);
        let r = 1.0;
        let t = smallness_thresholds(&sg, &dc, r).unwrap();
        let d2 = bisect(1e-300, 1e6, |d| lhs(&sg, &dc, r, 0.0, d).1 <= SMALLNESS_SAFETY);
        let d1 = bisect(1e-300, 1e6, |d| lhs(&sg, &dc, r, d, d2).0 <= r);
        assert!((t.delta2 - d2).abs() < 0.01 * d2, "{} vs {d2}", t.delta2);
        assert!((t.delta1 - d1).abs() < 0.01 * d1, "{} vs {d1}", t.delta1);
        let (f, s) = lhs(&sg, &dc, r, t.delta1, t.delta2);
        assert!(f <= r * (1.0 + 1e-12) && s <= SMALLNESS_SAFETY * (1.0 + 1e-12));
    }

    #[test]
    fn thresholds_survive_exponent_overflow() {
        let (sg, _) = sample_constants(1.0);
        let dc = duhamel_constants(2.5e-3, 0.6).unwrap();
        let k = smallness_coefficients(&sg, &dc, 1.0);
        assert!(k.second.is_infinite() && k.ln_second.is_finite());
        let t = smallness_thresholds(&sg, &dc, 1.0).unwrap();
        assert_eq!(t.delta2, 0.0);
        assert!(t.ln_delta2.is_finite() && t.ln_delta2 < -700.0);
        assert!((t.second_lhs - SMALLNESS_SAFETY).abs() < 1e-9);
        assert!(t.first_lhs <= 1.0 && t.delta1 > 0.0);
        // Moderate radii agree with the direct products.
        let (sg, dc) = sample_constants(1.0);
        let k = smallness_coefficients(&sg, &dc, 0.3);
        let (f, s) = lhs(&sg, &dc, 0.3, 0.0, 1.0);
        assert!((k.first - f).abs() < 1e-12 * f && (k.second - s).abs() < 1e-12 * s);
    }

    #[test]
    fn radius_scan_improves_the_minimum() {
        let (sg, dc) = sample_constants(1.0);
        let best = best_smallness_radius(&sg, &dc, 1e-3, 10.0, 60).unwrap();
        let at_one = smallness_thresholds(&sg, &dc, 1.0).unwrap();
        assert!(best.delta1.min(best.delta2) >= at_one.delta1.min(at_one.delta2));
    }

    #[test]
    fn zero_probe_is_rejected() {
        let eq = equilibrium(24, 6.0, 1.0);
        let opts = SemigroupOptions { dt: 0.01, t_end: 0.05, every: 1, alpha: 0.6, lambda: 0.1, lambda1: 0.09 };
        assert!(estimate_semigroup_constants(&eq, &[Field::zeros(&eq.grid)], &opts).is_err());
    }

    #[test]
    fn semigroup_sups_dominate_sampled_ratios() {
        let eq = equilibrium(32, 6.0, 1.0);
        let h0 = Field::from_fn(&eq.grid, |x, v| (x + v) * (-(x * x + v * v) / 4.0).exp());
        let opts = SemigroupOptions { dt: 0.01, t_end: 0.2, every: 5, alpha: 0.6, lambda: 0.1, lambda1: 0.09 };
        let c = estimate_semigroup_constants(&eq, &[h0.clone()], &opts).unwrap();
        let h0 = project_mean_zero(&h0, &eq).unwrap();
        let mut h = h0.clone();
        let mut st = Stepper::new(&eq, Mode::Linear).unwrap();
        for _ in 0..10 {
            st.step(&mut h, 0.01).unwrap();
        }
        let (n0, n) = (norms(&h0, &eq, 0.6).unwrap(), norms(&h, &eq, 0.6).unwrap());
        let t: f64 = 0.1;
        assert!(n.l2 * (0.1 * t).exp() / n0.l2 <= c.c1 * (1.0 + 1e-12));
        assert!(n.hv1 * (0.09 * t).exp() / ((1.0 + t.powf(-0.5)) * n0.l2) <= c.c5 * (1.0 + 1e-12));
        assert!(c.c1 >= 1.0 && c.c_r > 0.0 && c.theta1 > 0.0);
    }
}
