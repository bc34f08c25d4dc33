//! Time integration of the perturbation equation `d_t h = -K h (+ R[h])`.
//!
//! One step is a Strang splitting: half a step of transport (free streaming in `x`, the
//! force in `v`, and the self-consistent source), a full Crank-Nicolson step of the
//! Fokker-Planck operator, and another half step of transport.
//!
//! Transport is written in flux form for `g = finf h`, so that `sum g dx dv` is conserved
//! to rounding. Face weights are geometric means of the neighbouring equilibrium values
//! and enter only through ratios of adjacent log-weights, which keeps steep potentials
//! from underflowing. The discrete streaming speed and force are derived from the same
//! face weights, which makes every constant an exact discrete steady state away from the
//! box edges. Face values use third-order upwind-biased reconstruction and each
//! transport half step is advanced with three-stage SSP Runge-Kutta.
//!
//! The Fokker-Planck operator uses Scharfetter-Gummel face weights in the symmetric
//! `h` form, which conserves mass and keeps constants exactly stationary.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functionals::{
    distribution_from_h, e_functional, field_energy, free_energy_weight, relative_entropy, s_p_functional, Derivatives, LyapunovSpec,
};
use crate::grid::{fractional_x_norm, grad_v, grad_x, integrate, integrate_v, laplace_v, Field, PhaseGrid};
use crate::linalg::Tridiagonal;
use crate::poisson::{field_gradient_from_h, poisson_gradient};
use crate::scalar::Real;
use crate::steady_state::SteadyState;

/// Largest admissible Courant number.
pub const CFL_LIMIT: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Linear,
    Nonlinear,
}

/// `K h = v h_x - W' h_v + v psi' - sigma h_vv + nu v h_v`, evaluated with centred stencils.
pub fn apply_k<T: Real>(h: &Field<T>, eq: &SteadyState<T>) -> Result<Field<T>> {
    let hx = grad_x(h);
    let hv = grad_v(h);
    let hvv = laplace_v(h);
    let psi_grad = field_gradient_from_h(h, &eq.finf, eq.coupling)?;
    let g = &eq.grid;
    let (nu, sigma) = (eq.params.nu, eq.params.sigma);
    let mut out = vec![T::zero(); g.len()];
    for i in 0..g.nx {
        let wg = eq.w_grad.data()[i];
        let pg = psi_grad.data()[i];
        for j in 0..g.nv {
            let k = i * g.nv + j;
            let v = g.v[j];
            out[k] = v * hx.data()[k] - wg * hv.data()[k] + v * pg - sigma * hvv.data()[k] + nu * v * hv.data()[k];
        }
    }
    Field::from_vec(g, out)
}

/// `R[h] = psi' h_v - (nu / sigma) v psi' h`, evaluated with centred stencils.
pub fn nonlinear_term<T: Real>(h: &Field<T>, eq: &SteadyState<T>) -> Result<Field<T>> {
    let hv = grad_v(h);
    let psi_grad = field_gradient_from_h(h, &eq.finf, eq.coupling)?;
    let g = &eq.grid;
    let beta = eq.params.beta();
    let mut out = vec![T::zero(); g.len()];
    for i in 0..g.nx {
        let pg = psi_grad.data()[i];
        for j in 0..g.nv {
            let k = i * g.nv + j;
            out[k] = pg * hv.data()[k] - beta * g.v[j] * pg * h.data()[k];
        }
    }
    Field::from_vec(g, out)
}

/// Removes the `finf`-weighted mean, `h - int h finf / int finf`.
pub fn project_mean_zero<T: Real>(h: &Field<T>, eq: &SteadyState<T>) -> Result<Field<T>> {
    let mean = integrate(h, Some(&eq.finf))? / integrate(&eq.finf, None)?;
    Ok(h.map(|a| a - mean))
}

#[inline]
fn upwind_face<T: Real>(u: impl Fn(usize) -> T, i: usize, n: usize, speed: T) -> T {
    // Face between cells i and i+1.
    let sixth = T::one() / T::lit(6.0);
    if speed >= T::zero() {
        if i >= 1 {
            (-u(i - 1) + T::lit(5.0) * u(i) + T::lit(2.0) * u(i + 1)) * sixth
        } else {
            u(i)
        }
    } else if i + 2 < n {
        (T::lit(2.0) * u(i) + T::lit(5.0) * u(i + 1) - u(i + 2)) * sixth
    } else {
        u(i + 1)
    }
}

/// Bernoulli function `w / (e^w - 1)`.
fn bernoulli<T: Real>(w: T) -> T {
    if w.abs() < T::lit(1e-10) {
        T::one() - w * T::lit(0.5)
    } else {
        w / w.exp_m1()
    }
}

/// Discrete evolution operator for one equilibrium.
#[derive(Clone, Debug)]
pub struct Stepper<T> {
    grid: Arc<PhaseGrid<T>>,
    mode: Mode,
    transport: bool,
    coupling: T,
    finf: Field<T>,
    /// Ratio of the `x`-face weight to the cell weight, right and left face.
    rx_plus: Vec<T>,
    rx_minus: Vec<T>,
    sv_plus: Vec<T>,
    sv_minus: Vec<T>,
    /// Discrete streaming speed, close to `v`.
    speed_x: Vec<T>,
    /// Discrete force, close to `-W'`.
    force_v: Vec<T>,
    /// Fokker-Planck mass weights `M_j dv` and face conductances.
    fp_mass: Vec<T>,
    fp_cond: Vec<T>,
    fp_cache: Option<(T, Tridiagonal<T>)>,
}

impl<T: Real> Stepper<T> {
    pub fn new(eq: &SteadyState<T>, mode: Mode) -> Result<Self> {
        Self::with_transport(eq, mode, true)
    }

    /// `transport = false` keeps only the Fokker-Planck part (a test hook).
    pub fn with_transport(eq: &SteadyState<T>, mode: Mode, transport: bool) -> Result<Self> {
        let g = eq.grid.clone();
        let (nx, nv) = (g.nx, g.nv);
        let beta = eq.params.beta();
        let half = T::lit(0.5);

        // Log-density up to a constant, from the potential so that it never underflows.
        let logrho: Vec<T> =
            (0..nx).map(|i| -beta * (eq.external.value.data()[i] + eq.phi.data()[i])).collect();
        let mut rx_plus = vec![T::zero(); nx];
        let mut rx_minus = vec![T::zero(); nx];
        for i in 0..nx - 1 {
            let d = (logrho[i + 1] - logrho[i]) * half;
            rx_plus[i] = d.exp();
            rx_minus[i + 1] = (-d).exp();
        }
        // Ghost ratios by linear extrapolation of the log-density; used for speeds only.
        let force_v: Vec<T> = (0..nx)
            .map(|i| {
                let rp = if i + 1 < nx { rx_plus[i] } else { T::one() / rx_minus[i] };
                let rm = if i > 0 { rx_minus[i] } else { T::one() / rx_plus[i] };
                (rp - rm) / (beta * g.dx)
            })
            .collect();

        let logm = |v: T| -beta * v * v * half;
        let mut sv_plus = vec![T::zero(); nv];
        let mut sv_minus = vec![T::zero(); nv];
        for j in 0..nv - 1 {
            let d = (logm(g.v[j + 1]) - logm(g.v[j])) * half;
            sv_plus[j] = d.exp();
            sv_minus[j + 1] = (-d).exp();
        }
        let speed_x: Vec<T> = (0..nv)
            .map(|j| {
                let v = g.v[j];
                let sp = ((logm(v + g.dv) - logm(v)) * half).exp();
                let sm = ((logm(v - g.dv) - logm(v)) * half).exp();
                -(sp - sm) / (beta * g.dv)
            })
            .collect();

        let m = eq.maxwellian.data();
        let fp_mass: Vec<T> = m.iter().map(|&mj| mj * g.dv).collect();
        let mut fp_cond = vec![T::zero(); nv + 1];
        for j in 0..nv - 1 {
            let vf = (g.v[j] + g.v[j + 1]) * half;
            let w = beta * vf * g.dv;
            let left = bernoulli(w) * m[j];
            let right = bernoulli(-w) * m[j + 1];
            fp_cond[j + 1] = eq.params.sigma * (left * right).sqrt() / g.dv;
        }

        Ok(Self {
            grid: g,
            mode,
            transport,
            coupling: eq.coupling,
            finf: eq.finf.clone(),
            rx_plus,
            rx_minus,
            sv_plus,
            sv_minus,
            speed_x,
            force_v,
            fp_mass,
            fp_cond,
            fp_cache: None,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn grid(&self) -> &Arc<PhaseGrid<T>> {
        &self.grid
    }

    fn field_gradient(&self, h: &[T]) -> Vec<T> {
        let field = Field::from_vec_unchecked(&self.grid, h.to_vec());
        let rho = integrate_v(&field, Some(&self.finf)).expect("same grid").scaled(self.coupling);
        poisson_gradient(&rho).into_vec()
    }

    /// Courant numbers `(x, v)` for step `dt` at state `h`.
    pub fn courant(&self, h: &Field<T>, dt: T) -> (T, T) {
        let g = &self.grid;
        let vmax = self.speed_x.iter().fold(g.max_abs_v(), |m, &a| m.max(a.abs()));
        let psi = match self.mode {
            Mode::Nonlinear => self.field_gradient(h.data()),
            Mode::Linear => vec![T::zero(); g.nx],
        };
        let fmax = (0..g.nx).fold(T::zero(), |m, i| m.max((self.force_v[i] - psi[i]).abs()));
        (vmax * dt / g.dx, fmax * dt / g.dv)
    }

    /// Fails if either Courant number exceeds [`CFL_LIMIT`].
    pub fn check_cfl(&self, h: &Field<T>, dt: T) -> Result<()> {
        let (cx, cv) = self.courant(h, dt);
        let lim = T::lit(CFL_LIMIT);
        if cx > lim || cv > lim || !cx.is_finite() || !cv.is_finite() {
            return Err(Error::Cfl(format!("dt={dt}: x-Courant {cx:.4}, v-Courant {cv:.4}, limit {lim}")));
        }
        Ok(())
    }

    /// Transport right-hand side: flux divergence, self-consistent source and, in the
    /// nonlinear mode, the field force acting on the perturbation.
    fn transport_rhs(&self, h: &[T], out: &mut [T]) {
        let g = &*self.grid;
        let (nx, nv) = (g.nx, g.nv);
        let inv_dx = T::one() / g.dx;
        let inv_dv = T::one() / g.dv;
        let psi = self.field_gradient(h);
        let nonlinear = self.mode == Mode::Nonlinear;

        // Fluxes through the interior x-faces, face k between rows k and k+1.
        let mut flux_x = vec![T::zero(); (nx - 1) * nv];
        flux_x.par_chunks_mut(nv).enumerate().for_each(|(k, fx)| {
            for j in 0..nv {
                let a = self.speed_x[j];
                let hf = upwind_face(|i| h[i * nv + j], k, nx, a);
                fx[j] = a * hf;
            }
        });

        out.par_chunks_mut(nv).enumerate().for_each(|(i, row)| {
            let hr = &h[i * nv..(i + 1) * nv];
            let speed = if nonlinear { self.force_v[i] - psi[i] } else { self.force_v[i] };
            for j in 0..nv {
                let right = if i + 1 < nx { self.rx_plus[i] * flux_x[i * nv + j] } else { T::zero() };
                let left = if i > 0 { self.rx_minus[i] * flux_x[(i - 1) * nv + j] } else { T::zero() };
                row[j] = -(right - left) * inv_dx - g.v[j] * psi[i];
            }
            let mut prev = T::zero();
            for j in 0..nv - 1 {
                let hf = upwind_face(|m| hr[m], j, nv, speed);
                let f = speed * hf;
                row[j] -= (self.sv_plus[j] * f - prev) * inv_dv;
                prev = self.sv_minus[j + 1] * f;
            }
            row[nv - 1] += prev * inv_dv;
        });
    }

    /// One SSP-RK3 step of the transport part.
    fn transport_step(&self, h: &mut [T], dt: T) {
        let n = h.len();
        let mut k = vec![T::zero(); n];
        let mut u1 = vec![T::zero(); n];
        self.transport_rhs(h, &mut k);
        for m in 0..n {
            u1[m] = h[m] + dt * k[m];
        }
        self.transport_rhs(&u1, &mut k);
        let (q3, q1) = (T::lit(0.75), T::lit(0.25));
        for m in 0..n {
            u1[m] = q3 * h[m] + q1 * (u1[m] + dt * k[m]);
        }
        self.transport_rhs(&u1, &mut k);
        let (t1, t2) = (T::one() / T::lit(3.0), T::lit(2.0) / T::lit(3.0));
        for m in 0..n {
            h[m] = t1 * h[m] + t2 * (u1[m] + dt * k[m]);
        }
    }

    fn fp_matrix(&mut self, dt: T) -> &Tridiagonal<T> {
        let stale = match &self.fp_cache {
            Some((d, _)) => *d != dt,
            None => true,
        };
        if stale {
            let nv = self.grid.nv;
            let half = dt * T::lit(0.5);
            let c = &self.fp_cond;
            let lower: Vec<T> = (0..nv).map(|j| -half * c[j]).collect();
            let upper: Vec<T> = (0..nv).map(|j| -half * c[j + 1]).collect();
            let diag: Vec<T> = (0..nv).map(|j| self.fp_mass[j] + half * (c[j] + c[j + 1])).collect();
            self.fp_cache = Some((dt, Tridiagonal::factor(&lower, &diag, &upper)));
        }
        &self.fp_cache.as_ref().expect("just filled").1
    }

    /// Crank-Nicolson step of `M d_t h = d_v (sigma M d_v h)` on every `v`-line.
    fn fokker_planck_step(&mut self, h: &mut [T], dt: T) {
        let nv = self.grid.nv;
        let half = dt * T::lit(0.5);
        let c = self.fp_cond.clone();
        let mass = self.fp_mass.clone();
        let solver = self.fp_matrix(dt).clone();
        h.par_chunks_mut(nv).for_each(|row| {
            let mut rhs = vec![T::zero(); nv];
            for j in 0..nv {
                let mut flux = T::zero();
                if j + 1 < nv {
                    flux += c[j + 1] * (row[j + 1] - row[j]);
                }
                if j > 0 {
                    flux -= c[j] * (row[j] - row[j - 1]);
                }
                rhs[j] = mass[j] * row[j] + half * flux;
            }
            solver.solve(&mut rhs);
            row.copy_from_slice(&rhs);
        });
    }

    /// Advances `h` by one Strang step of size `dt` (no CFL check).
    pub fn step_unchecked(&mut self, h: &mut Field<T>, dt: T) {
        let data = h.data_mut();
        if self.transport {
            let half = dt * T::lit(0.5);
            self.transport_step(data, half);
            self.fokker_planck_step(data, dt);
            self.transport_step(data, half);
        } else {
            self.fokker_planck_step(data, dt);
        }
    }

    /// Advances `h` by one step after checking the CFL condition.
    pub fn step(&mut self, h: &mut Field<T>, dt: T) -> Result<()> {
        if self.transport {
            self.check_cfl(h, dt)?;
        }
        self.step_unchecked(h, dt);
        Ok(())
    }
}

/// Diagnostics recorded along a trajectory.
#[derive(Clone, Debug, PartialEq)]
pub enum FunctionalKind<T> {
    Norm2,
    SP,
    E,
    H,
    CkpLhs,
    CkpRhs,
    GradX2,
    GradV2,
    /// `alpha`-fractional norm in `x` (a diagnostic; not squared).
    FracNorm(T),
    /// `int h finf`.
    Mass,
    /// `-2 sigma int |d_v h|^2 finf`.
    NormRate,
    /// `int h^2 finf`.
    L2,
}

impl<T: Real> FunctionalKind<T> {
    pub fn name(&self) -> String {
        match self {
            Self::Norm2 => "norm2".into(),
            Self::SP => "sP".into(),
            Self::E => "E".into(),
            Self::H => "H".into(),
            Self::CkpLhs => "ckp_lhs".into(),
            Self::CkpRhs => "ckp_rhs".into(),
            Self::GradX2 => "gradx2".into(),
            Self::GradV2 => "gradv2".into(),
            Self::FracNorm(a) => format!("fracnorm_a{a}"),
            Self::Mass => "mass".into(),
            Self::NormRate => "norm2_rate".into(),
            Self::L2 => "l2".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "norm2" => Self::Norm2,
            "sP" => Self::SP,
            "E" => Self::E,
            "H" => Self::H,
            "ckp_lhs" => Self::CkpLhs,
            "ckp_rhs" => Self::CkpRhs,
            "gradx2" => Self::GradX2,
            "gradv2" => Self::GradV2,
            "mass" => Self::Mass,
            "norm2_rate" => Self::NormRate,
            "l2" => Self::L2,
            other => match other.strip_prefix("fracnorm_a") {
                Some(a) => Self::FracNorm(T::lit(
                    a.parse::<f64>().map_err(|e| Error::Parse(format!("functional {other}: {e}")))?,
                )),
                None => return Err(Error::Parse(format!("unknown functional {other}"))),
            },
        })
    }
}

#[derive(Clone, Debug)]
pub struct EvolutionConfig<T> {
    pub dt: T,
    pub t_end: T,
    pub mode: Mode,
    /// Record functionals every this many steps (and at the final step).
    pub record_every: usize,
    pub functionals: Vec<FunctionalKind<T>>,
    /// Needed for `sP` and `E`.
    pub lyapunov: Option<LyapunovSpec<T>>,
    /// Weight of the field energy inside `H` and the entropy bound; `None` means the
    /// free-energy weight `nu / (2 sigma)`.
    pub entropy_field_weight: Option<T>,
    /// `false` keeps only the Fokker-Planck part (a test hook).
    pub transport: bool,
    /// Keep a copy of the state every this many steps.
    pub snapshot_every: Option<usize>,
}

impl<T: Real> EvolutionConfig<T> {
    pub fn new(dt: T, t_end: T, mode: Mode) -> Self {
        Self {
            dt,
            t_end,
            mode,
            record_every: 1,
            functionals: vec![FunctionalKind::Norm2],
            lyapunov: None,
            entropy_field_weight: None,
            transport: true,
            snapshot_every: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > T::zero()) || !(self.t_end >= T::zero()) || self.record_every == 0 {
            return Err(Error::InvalidParameter(format!(
                "need dt > 0, T >= 0, record_every >= 1; got dt={}, T={}, record_every={}",
                self.dt, self.t_end, self.record_every
            )));
        }
        let needs_p = self.functionals.iter().any(|f| matches!(f, FunctionalKind::SP | FunctionalKind::E));
        if needs_p && self.lyapunov.is_none() {
            return Err(Error::InvalidParameter("functionals sP and E need Lyapunov parameters".into()));
        }
        Ok(())
    }

    /// Number of steps, `round(T / dt)`.
    pub fn steps(&self) -> usize {
        (self.t_end / self.dt).round().to_usize().unwrap_or(0)
    }
}

/// Recorded diagnostics and the final state.
#[derive(Clone, Debug)]
pub struct Trajectory<T> {
    pub names: Vec<String>,
    pub times: Vec<T>,
    /// One row per recorded time, one column per functional.
    pub rows: Vec<Vec<T>>,
    pub snapshots: Vec<(T, Field<T>)>,
    pub final_state: Field<T>,
    pub steps: usize,
}

impl<T: Real> Trajectory<T> {
    pub fn column(&self, name: &str) -> Option<Vec<T>> {
        let k = self.names.iter().position(|n| n == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }

    /// Writes `t,<functional>,...` rows with 17 significant digits.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend(self.names.iter().cloned());
        wtr.write_record(&header)?;
        for (t, row) in self.times.iter().zip(&self.rows) {
            let mut rec = vec![format!("{t:.16e}")];
            rec.extend(row.iter().map(|v| format!("{v:.16e}")));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Evaluates the requested functionals of `h` at time `t`.
pub fn evaluate_functionals<T: Real>(
    h: &Field<T>,
    eq: &SteadyState<T>,
    kinds: &[FunctionalKind<T>],
    lyapunov: Option<&LyapunovSpec<T>>,
    entropy_field_weight: T,
    t: T,
) -> Result<Vec<T>> {
    let mut derivs: Option<Derivatives<T>> = None;
    let mut entropy = None;
    let mut out = Vec::with_capacity(kinds.len());
    for kind in kinds {
        let needs_derivs = matches!(kind, FunctionalKind::Norm2 | FunctionalKind::GradX2 | FunctionalKind::GradV2);
        if needs_derivs && derivs.is_none() {
            derivs = Some(Derivatives::new(h, eq)?);
        }
        let sq = |f: &Field<T>| integrate(&f.map(|a| a * a), Some(&eq.finf));
        let value = match kind {
            FunctionalKind::Norm2 => sq(h)? + field_energy(&derivs.as_ref().expect("computed").psi_grad),
            FunctionalKind::L2 => sq(h)?,
            FunctionalKind::GradX2 => sq(&derivs.as_ref().expect("computed").hx)?,
            FunctionalKind::GradV2 => sq(&derivs.as_ref().expect("computed").hv)?,
            FunctionalKind::SP => {
                let spec = lyapunov.ok_or_else(|| Error::InvalidParameter("sP needs Lyapunov parameters".into()))?;
                s_p_functional(h, eq, &spec.matrix_at(t)?)?
            }
            FunctionalKind::E => {
                let spec = lyapunov.ok_or_else(|| Error::InvalidParameter("E needs Lyapunov parameters".into()))?;
                e_functional(h, eq, spec, t)?
            }
            FunctionalKind::H | FunctionalKind::CkpLhs | FunctionalKind::CkpRhs => {
                if entropy.is_none() {
                    entropy = Some(relative_entropy(&distribution_from_h(h, eq), eq, entropy_field_weight)?);
                }
                let e = entropy.as_ref().expect("computed");
                match kind {
                    FunctionalKind::CkpRhs => T::lit(0.5) * e.l1_distance * e.l1_distance + e.field,
                    _ => e.value,
                }
            }
            FunctionalKind::FracNorm(alpha) => fractional_x_norm(h, &eq.finf, *alpha)?,
            FunctionalKind::Mass => integrate(h, Some(&eq.finf))?,
            FunctionalKind::NormRate => -T::lit(2.0) * eq.params.sigma * sq(&grad_v(h))?,
        };
        out.push(value);
    }
    Ok(out)
}

/// Integrates from `h0` up to `config.t_end`, recording functionals. Aborts on a CFL
/// violation or a non-finite state.
pub fn evolve<T: Real>(h0: &Field<T>, eq: &SteadyState<T>, config: &EvolutionConfig<T>) -> Result<Trajectory<T>> {
    config.validate()?;
    if !crate::grid::same_grid(h0.grid(), &eq.grid) {
        return Err(Error::GridMismatch);
    }
    let mut stepper = Stepper::with_transport(eq, config.mode, config.transport)?;
    let steps = config.steps();
    let mut h = h0.clone();
    if config.transport {
        stepper.check_cfl(&h, config.dt)?;
    }
    let weight = config.entropy_field_weight.unwrap_or_else(|| free_energy_weight(&eq.params));
    let names = config.functionals.iter().map(|f| f.name()).collect();
    let mut traj = Trajectory { names, times: vec![], rows: vec![], snapshots: vec![], final_state: h0.clone(), steps };
    let record = |traj: &mut Trajectory<T>, h: &Field<T>, t: T| -> Result<()> {
        let row = evaluate_functionals(h, eq, &config.functionals, config.lyapunov.as_ref(), weight, t)?;
        traj.times.push(t);
        traj.rows.push(row);
        Ok(())
    };
    record(&mut traj, &h, T::zero())?;
    if config.snapshot_every.is_some() {
        traj.snapshots.push((T::zero(), h.clone()));
    }
    for n in 1..=steps {
        stepper.step(&mut h, config.dt)?;
        if !h.is_finite() {
            return Err(Error::NonFinite(format!("state after step {n}")));
        }
        let t = config.dt * T::from_count(n);
        if n % config.record_every == 0 || n == steps {
            record(&mut traj, &h, t)?;
        }
        if let Some(every) = config.snapshot_every {
            if n % every == 0 {
                traj.snapshots.push((t, h.clone()));
            }
        }
    }
    traj.final_state = h;
    Ok(traj)
}

/// Result of the Duhamel fixed-point iteration.
#[derive(Clone, Debug)]
pub struct PicardResult<T> {
    /// Endpoint of every iterate, starting with the linear evolution.
    pub iterates: Vec<Field<T>>,
    /// Sup-norm distance between consecutive endpoints.
    pub increments: Vec<T>,
}

impl<T: Real> PicardResult<T> {
    pub fn last(&self) -> &Field<T> {
        self.iterates.last().expect("at least the linear iterate")
    }
}

/// Picard iteration of `h(t) = e^{-tK} h0 + int_0^t e^{-(t-s)K} R[h(s)] ds` on `[0, T]`,
/// with the trapezoidal rule in time and the linear stepper as propagator. All iterates
/// are advanced together, so memory stays proportional to the number of iterations.
pub fn picard_short_time<T: Real>(
    h0: &Field<T>,
    eq: &SteadyState<T>,
    t_end: T,
    n_iter: usize,
    dt: T,
) -> Result<PicardResult<T>> {
    if !(t_end > T::zero() && t_end <= T::lit(0.2)) {
        return Err(Error::InvalidParameter(format!("short-time horizon must lie in (0, 0.2], got {t_end}")));
    }
    if n_iter > 5 {
        return Err(Error::InvalidParameter(format!("at most 5 iterations, got {n_iter}")));
    }
    if !(dt > T::zero()) {
        return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    let steps = (t_end / dt).round().to_usize().unwrap_or(0).max(1);
    let mut stepper = Stepper::new(eq, Mode::Linear)?;
    stepper.check_cfl(h0, dt)?;
    let half = T::lit(0.5);

    let mut lin = h0.clone();
    // iterates[m] = h^m(t_n); sums[m-1] accumulates the Duhamel sum of iterate m.
    let mut iterates = vec![h0.clone(); n_iter + 1];
    let mut sums: Vec<Field<T>> = Vec::with_capacity(n_iter);
    for it in iterates.iter().take(n_iter) {
        sums.push(nonlinear_term(it, eq)?.scaled(half));
    }
    for _ in 1..=steps {
        stepper.step_unchecked(&mut lin, dt);
        iterates[0] = lin.clone();
        for m in 1..=n_iter {
            let r = nonlinear_term(&iterates[m - 1], eq)?;
            let s = &mut sums[m - 1];
            stepper.step_unchecked(s, dt);
            *s = s.axpy(T::one(), &r)?;
            iterates[m] = lin.axpy(dt, &s.axpy(-half, &r)?)?;
        }
        if !iterates[n_iter].is_finite() {
            return Err(Error::NonFinite("Picard iterate".into()));
        }
    }
    let increments = iterates
        .windows(2)
        .map(|w| w[0].data().iter().zip(w[1].data()).map(|(&a, &b)| (a - b).abs()).fold(T::zero(), T::max))
        .collect();
    Ok(PicardResult { iterates, increments })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functionals::{norm_squared, relative_entropy};
    use crate::potential::{PhysParams, PotentialSpec};
    use crate::steady_state::{solve_pbe, PbeOptions};

    fn equilibrium(n: usize, l: f64, coupling: f64) -> SteadyState<f64> {
        let g = PhaseGrid::new(n, n, l, l).unwrap();
        let opts = PbeOptions { coupling, ..PbeOptions::default() };
        solve_pbe(&g, &PotentialSpec::Quadratic { omega: 1.0 }, &PhysParams::new(1.0, 1.0).unwrap(), &opts).unwrap()
    }

    fn bump(eq: &SteadyState<f64>) -> Field<f64> {
        let h = Field::from_fn(&eq.grid, |x, v| (x + 0.5 * v + 0.3 * x * v) * (-(x * x + v * v) / 8.0).exp());
        project_mean_zero(&h, eq).unwrap()
    }

    fn l2_distance(a: &Field<f64>, b: &Field<f64>, eq: &SteadyState<f64>) -> f64 {
        integrate(&a.axpy(-1.0, b).unwrap().map(|d| d * d), Some(&eq.finf)).unwrap().sqrt()
    }

    #[test]
    fn constant_is_moved_only_by_its_field() {
        let eq = equilibrium(64, 8.0, 1.0);
        let h = Field::constant(&eq.grid, 1.0);
        let k = apply_k(&h, &eq).unwrap();
        let psi = poisson_gradient(&eq.rho);
        for i in 0..64 {
            for j in 0..64 {
                assert!((k.at(i, j) - eq.grid.v[j] * psi.data()[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn velocity_mode_has_no_field() {
        let eq = equilibrium(64, 8.0, 1.0);
        let h = Field::from_fn(&eq.grid, |_, v| v);
        let k = apply_k(&h, &eq).unwrap();
        for i in 0..64 {
            for j in 0..64 {
                let exact = -eq.w_grad.data()[i] + eq.grid.v[j];
                assert!((k.at(i, j) - exact).abs() < 1e-10, "{i} {j}");
            }
        }
        assert!(nonlinear_term(&h, &eq).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn operator_matches_analytic_terms() {
        // Uncoupled, so W = x^2 / 2 and psi = 0.
        let eq = equilibrium(128, 6.0, 0.0);
        let l = 6.0;
        let k = std::f64::consts::PI / l;
        let h = Field::from_fn(&eq.grid, |x, v| (k * x).sin() * v * (-v * v / 4.0).exp());
        let kh = apply_k(&h, &eq).unwrap();
        let mut worst: f64 = 0.0;
        for i in 2..126 {
            for j in 2..126 {
                let (x, v) = (eq.grid.x[i], eq.grid.v[j]);
                let e = (-v * v / 4.0).exp();
                let hx = k * (k * x).cos() * v * e;
                let hv = (k * x).sin() * (1.0 - v * v / 2.0) * e;
                let hvv = (k * x).sin() * (-1.5 * v + v * v * v / 4.0) * e;
                let exact = v * hx - x * hv - hvv + v * hv;
                worst = worst.max((kh.at(i, j) - exact).abs());
            }
        }
        assert!(worst < 1e-2, "{worst}");
    }

    #[test]
    fn nonlinear_term_matches_separate_assembly() {
        let eq = equilibrium(64, 8.0, 1.0);
        let h = Field::from_fn(&eq.grid, |x, v| (-(x - 0.5) * (x - 0.5) - 0.3 * (v - 0.2) * (v - 0.2)).exp());
        let r = nonlinear_term(&h, &eq).unwrap();
        let g = &eq.grid;
        let rho: Vec<f64> = (0..g.nx).map(|i| (0..g.nv).map(|j| h.at(i, j) * eq.finf.at(i, j) * g.dv).sum()).collect();
        let psi = crate::poisson::solve_poisson(&crate::grid::XField::from_vec(g, rho).unwrap()).grad;
        for i in 0..g.nx {
            for j in 1..g.nv - 1 {
                let hv = (h.at(i, j + 1) - h.at(i, j - 1)) / (2.0 * g.dv);
                let expect = psi.data()[i] * (hv - g.v[j] * h.at(i, j));
                assert!((r.at(i, j) - expect).abs() < 1e-12);
            }
        }
        assert_eq!(nonlinear_term(&Field::zeros(g), &eq).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn equilibrium_is_stationary() {
        let eq = equilibrium(48, 6.0, 1.0);
        for mode in [Mode::Linear, Mode::Nonlinear] {
            let mut st = Stepper::new(&eq, mode).unwrap();
            let mut h = Field::zeros(&eq.grid);
            st.step(&mut h, 0.01).unwrap();
            assert_eq!(h.max_abs(), 0.0);
        }
    }

    #[test]
    fn one_step_conserves_mass() {
        let eq = equilibrium(64, 8.0, 1.0);
        let h0 = Field::from_fn(&eq.grid, |x, v| (-(x - 1.0) * (x - 1.0) - v * v).exp());
        let m0 = integrate(&h0, Some(&eq.finf)).unwrap();
        for mode in [Mode::Linear, Mode::Nonlinear] {
            let mut h = h0.clone();
            Stepper::new(&eq, mode).unwrap().step(&mut h, 0.01).unwrap();
            let m1 = integrate(&h, Some(&eq.finf)).unwrap();
            assert!((m1 - m0).abs() < 1e-12, "{mode:?} {m0} {m1}");
        }
    }

    #[test]
    fn free_relaxation_of_velocity_mode() {
        let eq = equilibrium(128, 8.0, 1.0);
        let h0 = Field::from_fn(&eq.grid, |_, v| v);
        let mut cfg = EvolutionConfig::new(1e-3, 1.0, Mode::Linear);
        cfg.transport = false;
        let tr = evolve(&h0, &eq, &cfg).unwrap();
        let n = tr.column("norm2").unwrap();
        for (t, v) in tr.times.iter().zip(&n).step_by(100) {
            let ratio = (v / n[0]).sqrt() / (-t).exp();
            assert!((ratio - 1.0).abs() < 0.01, "t={t} ratio={ratio}");
        }
    }

    #[test]
    fn linear_flow_dissipates_the_norm() {
        let eq = equilibrium(64, 8.0, 1.0);
        let h0 = bump(&eq);
        let cfg = EvolutionConfig::new(5e-3, 1.0, Mode::Linear);
        let tr = evolve(&h0, &eq, &cfg).unwrap();
        let n = tr.column("norm2").unwrap();
        assert!(n[n.len() - 1] < n[0]);
        assert!(n.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
    }

    #[test]
    fn splitting_is_second_order() {
        let eq = equilibrium(48, 6.0, 1.0);
        let h0 = bump(&eq);
        let run = |dt: f64| {
            let cfg = EvolutionConfig::new(dt, 0.4, Mode::Nonlinear);
            evolve(&h0.scaled(0.5), &eq, &cfg).unwrap().final_state
        };
        let err = |dt: f64| l2_distance(&run(dt), &run(dt / 4.0), &eq);
        let (coarse, fine) = (err(0.02), err(0.002));
        let order = (coarse / fine).log10();
        assert!(order > 1.8, "order {order} ({coarse:e} -> {fine:e})");
    }

    #[test]
    fn cfl_violation_rejected_before_stepping() {
        let eq = equilibrium(64, 8.0, 1.0);
        let cfg = EvolutionConfig::new(0.5, 1.0, Mode::Linear);
        assert!(matches!(evolve(&bump(&eq), &eq, &cfg), Err(Error::Cfl(_))));
    }

    #[test]
    fn picard_without_iterations_is_linear_flow() {
        let eq = equilibrium(48, 6.0, 1.0);
        let h0 = bump(&eq).scaled(0.1);
        let p = picard_short_time(&h0, &eq, 0.05, 0, 1e-3).unwrap();
        let cfg = EvolutionConfig::new(1e-3, 0.05, Mode::Linear);
        let lin = evolve(&h0, &eq, &cfg).unwrap().final_state;
        assert_eq!(p.last().data(), lin.data());
    }

    #[test]
    fn picard_iterates_stay_linear_without_field() {
        // Coupling off: no field, no nonlinearity.
        let eq = equilibrium(48, 6.0, 0.0);
        let h0 = Field::from_fn(&eq.grid, |_, v| v * (-v * v / 4.0).exp());
        let p = picard_short_time(&h0, &eq, 0.05, 0, 1e-3).unwrap();
        let p3 = picard_short_time(&h0, &eq, 0.05, 3, 1e-3).unwrap();
        assert!(l2_distance(p.last(), p3.last(), &eq) < 1e-12);
        assert!(picard_short_time(&h0, &eq, 0.5, 1, 1e-3).is_err());
    }

    #[test]
    fn picard_agrees_with_splitting() {
        let eq = equilibrium(64, 8.0, 1.0);
        let h0 = bump(&eq);
        let h0 = h0.scaled(0.1 / norm_squared(&h0, &eq).unwrap().sqrt());
        let p = picard_short_time(&h0, &eq, 0.1, 3, 1e-3).unwrap();
        let cfg = EvolutionConfig::new(1e-3, 0.1, Mode::Nonlinear);
        let h = evolve(&h0, &eq, &cfg).unwrap().final_state;
        let rel = l2_distance(p.last(), &h, &eq) / integrate(&h.map(|a| a * a), Some(&eq.finf)).unwrap().sqrt();
        assert!(rel < 1e-3, "{rel}");
    }

    #[test]
    fn entropy_decreases_along_small_nonlinear_run() {
        let eq = equilibrium(64, 8.0, 1.0);
        let h0 = bump(&eq);
        let h0 = h0.scaled(0.1 / norm_squared(&h0, &eq).unwrap().sqrt());
        let mut cfg = EvolutionConfig::new(5e-3, 1.0, Mode::Nonlinear);
        cfg.functionals = vec![FunctionalKind::H];
        let tr = evolve(&h0, &eq, &cfg).unwrap();
        let hcol = tr.column("H").unwrap();
        assert!(hcol.windows(2).all(|w| w[1] <= w[0] + 1e-8));
        let direct = relative_entropy(&distribution_from_h(&h0, &eq), &eq, 0.5).unwrap().value;
        assert_eq!(hcol[0], direct);
    }

    #[test]
    fn functional_names_round_trip() {
        for k in [FunctionalKind::Norm2, FunctionalKind::SP, FunctionalKind::FracNorm(0.5), FunctionalKind::NormRate] {
            assert_eq!(FunctionalKind::<f64>::parse(&k.name()).unwrap(), k);
        }
        assert!(FunctionalKind::<f64>::parse("bogus").is_err());
    }
}
