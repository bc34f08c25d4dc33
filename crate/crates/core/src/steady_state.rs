//! Equilibrium `finf = rho_inf(x) M(v)` of the self-consistent problem: the Maxwellian,
//! the Poisson-Boltzmann fixed point for `phi_inf`, and the derived force fields.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field, PhaseGrid, VField, XField};
use crate::poisson::solve_poisson;
use crate::potential::{PhysParams, PotentialSpec, PotentialValues};
use crate::scalar::Real;

/// `M(v) = exp(-nu v^2 / (2 sigma)) / sqrt(2 pi sigma / nu)`.
pub fn maxwellian<T: Real>(grid: &Arc<PhaseGrid<T>>, params: &PhysParams<T>) -> VField<T> {
    let beta = params.beta();
    let norm = (T::lit(2.0) * T::PI() / beta).sqrt();
    VField::from_fn(grid, |v| (-beta * v * v * T::lit(0.5)).exp() / norm)
}

/// Options of the damped fixed-point iteration for `phi_inf`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PbeOptions<T> {
    /// Relaxation weight of the new iterate, in `(0, 1]`.
    pub damping: T,
    /// Stop once the sup-norm increment falls below this.
    pub tol: T,
    pub max_iter: usize,
    /// Multiplies the self-consistent source; `0` switches the coupling off.
    pub coupling: T,
}

impl<T: Real> Default for PbeOptions<T> {
    fn default() -> Self {
        Self { damping: T::lit(0.5), tol: T::lit(1e-10), max_iter: 10_000, coupling: T::one() }
    }
}

/// Equilibrium and every derived quantity the dynamics needs.
#[derive(Clone, Debug)]
pub struct SteadyState<T> {
    pub grid: Arc<PhaseGrid<T>>,
    pub params: PhysParams<T>,
    pub potential: PotentialSpec<T>,
    pub coupling: T,
    pub external: PotentialValues<T>,
    pub phi: XField<T>,
    pub phi_grad: XField<T>,
    /// Normalised density, `sum rho dx = 1`.
    pub rho: XField<T>,
    pub maxwellian: VField<T>,
    pub finf: Field<T>,
    /// `W' = V' + phi_inf'`.
    pub w_grad: XField<T>,
    /// `W'' = V'' - coupling * rho_inf`, using the Poisson equation.
    pub w_hess: XField<T>,
    pub rho_sup: T,
    pub iterations: usize,
    /// Fixed-point increment at exit.
    pub increment: T,
    /// Residual of the discrete Poisson equation for the final `phi_inf`.
    pub residual: T,
}

/// Scalar summary written next to the equilibrium profile.
#[derive(Clone, Debug, Serialize)]
pub struct SteadySummary<T> {
    pub residual: T,
    pub iterations: usize,
    pub rho_sup: T,
    pub mass: T,
    pub increment: T,
    pub coupling: T,
    /// Mass of `finf` in the outermost `x` cells and the outermost `v` cells.
    pub boundary_mass_x: T,
    pub boundary_mass_v: T,
}

/// Boltzmann density `exp(-beta (V + phi)) / Z`, normalised with the midpoint rule.
fn boltzmann<T: Real>(external: &PotentialValues<T>, phi: &[T], beta: T, dx: T) -> Result<Vec<T>> {
    let exponent: Vec<T> = external.value.data().iter().zip(phi).map(|(&v, &p)| -beta * (v + p)).collect();
    let top = exponent.iter().fold(T::neg_infinity(), |m, &e| m.max(e));
    if !top.is_finite() {
        return Err(Error::Overflow(format!("Boltzmann exponent {top}")));
    }
    let mut rho: Vec<T> = exponent.iter().map(|&e| (e - top).exp()).collect();
    let z = rho.iter().copied().sum::<T>() * dx;
    if !(z > T::zero()) || !z.is_finite() {
        return Err(Error::Overflow(format!("partition function {z}")));
    }
    for r in &mut rho {
        *r /= z;
    }
    Ok(rho)
}

/// Builds the equilibrium around a given `phi_inf` (no iteration).
pub fn assemble_equilibrium<T: Real>(
    phi: &XField<T>,
    potential: &PotentialSpec<T>,
    params: &PhysParams<T>,
    coupling: T,
) -> Result<SteadyState<T>> {
    params.validate()?;
    let grid = phi.grid().clone();
    let external = potential.eval(&grid)?;
    let rho = XField::from_vec_unchecked(&grid, boltzmann(&external, phi.data(), params.beta(), grid.dx)?);
    let sol = solve_poisson(&rho.scaled(coupling));
    let phi_grad = sol.grad;
    // The residual compares the supplied potential with the one its density generates.
    let residual = phi
        .data()
        .iter()
        .zip(sol.psi.data())
        .map(|(&a, &b)| (a - b).abs())
        .fold(T::zero(), T::max)
        .max(sol.residual);
    let w_grad = external.grad.axpy(T::one(), &phi_grad)?;
    let w_hess = external.hess.axpy(-coupling, &rho)?;
    let m = maxwellian(&grid, params);
    let finf = Field::outer(&rho, &m)?;
    let rho_sup = rho.max_abs();
    Ok(SteadyState {
        grid,
        params: *params,
        potential: potential.clone(),
        coupling,
        external,
        phi: phi.clone(),
        phi_grad,
        rho,
        maxwellian: m,
        finf,
        w_grad,
        w_hess,
        rho_sup,
        iterations: 0,
        increment: T::zero(),
        residual,
    })
}

/// Solves the Poisson-Boltzmann equation `-phi'' = exp(-beta (V + phi)) / Z` by damped
/// Picard iteration starting from `phi = 0`.
pub fn solve_pbe<T: Real>(
    grid: &Arc<PhaseGrid<T>>,
    potential: &PotentialSpec<T>,
    params: &PhysParams<T>,
    options: &PbeOptions<T>,
) -> Result<SteadyState<T>> {
    solve_pbe_from(&XField::zeros(grid), potential, params, options)
}

/// Damped Picard iteration from an arbitrary initial potential.
pub fn solve_pbe_from<T: Real>(
    phi0: &XField<T>,
    potential: &PotentialSpec<T>,
    params: &PhysParams<T>,
    options: &PbeOptions<T>,
) -> Result<SteadyState<T>> {
    params.validate()?;
    potential.validate()?;
    if !(options.damping > T::zero() && options.damping <= T::one()) {
        return Err(Error::InvalidParameter(format!("damping must lie in (0, 1], got {}", options.damping)));
    }
    let grid = phi0.grid().clone();
    let external = potential.eval(&grid)?;
    let beta = params.beta();
    let theta = options.damping;
    let mut phi = phi0.data().to_vec();
    let mut increment = T::infinity();
    let mut iterations = 0;
    while iterations < options.max_iter {
        iterations += 1;
        let rho = boltzmann(&external, &phi, beta, grid.dx)?;
        let rho = XField::from_vec_unchecked(&grid, rho).scaled(options.coupling);
        let target = solve_poisson(&rho).psi;
        increment = T::zero();
        for (p, &t) in phi.iter_mut().zip(target.data()) {
            let next = (T::one() - theta) * *p + theta * t;
            increment = increment.max((next - *p).abs());
            *p = next;
        }
        if !increment.is_finite() {
            return Err(Error::NonFinite(format!("potential iterate at step {iterations}")));
        }
        if increment < options.tol {
            break;
        }
    }
    if !(increment < options.tol) {
        return Err(Error::NotConverged { what: format!("Poisson-Boltzmann increment {increment:e}"), iterations });
    }
    let mut state = assemble_equilibrium(&XField::from_vec_unchecked(&grid, phi), potential, params, options.coupling)?;
    state.iterations = iterations;
    state.increment = increment;
    Ok(state)
}

/// Solves from `phi = 0` and from the field of the uncoupled Boltzmann density,
/// `G * (exp(-beta V) / Z)`; returns the first solution and the sup-norm distance
/// between the two densities.
pub fn check_uniqueness<T: Real>(
    grid: &Arc<PhaseGrid<T>>,
    potential: &PotentialSpec<T>,
    params: &PhysParams<T>,
    options: &PbeOptions<T>,
) -> Result<(SteadyState<T>, T)> {
    let a = solve_pbe(grid, potential, params, options)?;
    let external = potential.eval(grid)?;
    let zero = vec![T::zero(); grid.nx];
    let rho0 = XField::from_vec_unchecked(grid, boltzmann(&external, &zero, params.beta(), grid.dx)?);
    let start = solve_poisson(&rho0.scaled(options.coupling)).psi;
    let b = solve_pbe_from(&start, potential, params, options)?;
    let gap = a
        .rho
        .data()
        .iter()
        .zip(b.rho.data())
        .map(|(&p, &q)| (p - q).abs())
        .fold(T::zero(), T::max);
    Ok((a, gap))
}

impl<T: Real> SteadyState<T> {
    pub fn mass(&self) -> T {
        self.rho.integral()
    }

    /// Truncation diagnostic: `(rho_0 + rho_last) dx` and `(M_0 + M_last) dv`.
    pub fn boundary_mass(&self) -> (T, T) {
        let r = self.rho.data();
        let m = self.maxwellian.data();
        (
            (r[0] + r[r.len() - 1]) * self.grid.dx,
            (m[0] + m[m.len() - 1]) * self.grid.dv,
        )
    }

    pub fn summary(&self) -> SteadySummary<T> {
        let (boundary_mass_x, boundary_mass_v) = self.boundary_mass();
        SteadySummary {
            residual: self.residual,
            iterations: self.iterations,
            rho_sup: self.rho_sup,
            mass: self.mass(),
            increment: self.increment,
            coupling: self.coupling,
            boundary_mass_x,
            boundary_mass_v,
        }
    }

    /// Writes `x,rho_inf,phi_inf` rows with 17 significant digits.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["x", "rho_inf", "phi_inf"])?;
        for i in 0..self.grid.nx {
            wtr.write_record([
                format!("{:.16e}", self.grid.x[i]),
                format!("{:.16e}", self.rho.data()[i]),
                format!("{:.16e}", self.phi.data()[i]),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}
