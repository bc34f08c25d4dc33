//! One-dimensional Poisson problem `-psi'' = rho` on the whole line, solved through
//! the free-space kernel `-|x|/2`.

use crate::error::Result;
use crate::grid::{derivative_x, integrate_v, Field, XField};
use crate::scalar::Real;

#[derive(Clone, Debug)]
pub struct PoissonSolution<T> {
    /// `psi(x) = -1/2 int |x - y| rho(y) dy`.
    pub psi: XField<T>,
    /// `psi'(x) = -1/2 int sign(x - y) rho(y) dy`.
    pub grad: XField<T>,
    /// Largest interior value of `|-D2 psi - rho - dx^2/12 D2 rho|`, the residual of the
    /// fourth-order compact (Numerov) discretisation that `psi` solves exactly.
    pub residual: T,
}

/// Solves `-psi'' = rho` by midpoint convolution with the free-space kernel.
///
/// The plain midpoint sum `K rho` is inverted exactly by the three-point Laplacian `D2`,
/// so `K rho - dx^2/12 rho` solves the compact scheme `-D2 psi = rho + dx^2/12 D2 rho`
/// and is fourth order. The gradient adds the `dx^2/12 rho'` end correction of the half
/// cell around each node, which makes it fourth order as well.
pub fn solve_poisson<T: Real>(rho: &XField<T>) -> PoissonSolution<T> {
    let g = rho.grid();
    let n = g.nx;
    let dx = g.dx;
    let r = rho.data();
    let x = &g.x;
    let half = T::lit(0.5);

    let total: T = r.iter().copied().sum();
    let total_x: T = r.iter().zip(x).map(|(&a, &b)| a * b).sum();
    let drho = derivative_x(rho);
    let corr = dx * dx / T::lit(12.0);

    let mut psi = vec![T::zero(); n];
    let mut grad = vec![T::zero(); n];
    let (mut below, mut below_x) = (T::zero(), T::zero());
    for i in 0..n {
        let above = total - below - r[i];
        let above_x = total_x - below_x - r[i] * x[i];
        psi[i] = -half * dx * ((x[i] * below - below_x) + (above_x - x[i] * above)) - corr * r[i];
        grad[i] = -half * dx * (below - above) + corr * drho.data()[i];
        below += r[i];
        below_x += r[i] * x[i];
    }

    let inv = T::one() / (dx * dx);
    let mut residual = T::zero();
    for i in 1..n - 1 {
        let lap = (psi[i + 1] - psi[i] - psi[i] + psi[i - 1]) * inv;
        let lap_rho = (r[i + 1] - r[i] - r[i] + r[i - 1]) * inv;
        residual = residual.max((-lap - r[i] - corr * lap_rho).abs());
    }

    PoissonSolution {
        psi: XField::from_vec_unchecked(g, psi),
        grad: XField::from_vec_unchecked(g, grad),
        residual,
    }
}

/// Gradient only; same values as `solve_poisson(rho).grad`.
pub fn poisson_gradient<T: Real>(rho: &XField<T>) -> XField<T> {
    let g = rho.grid();
    let dx = g.dx;
    let r = rho.data();
    let total: T = r.iter().copied().sum();
    let drho = derivative_x(rho);
    let corr = dx * dx / T::lit(12.0);
    let half = T::lit(0.5);
    let mut below = T::zero();
    let mut grad = Vec::with_capacity(g.nx);
    for i in 0..g.nx {
        let above = total - below - r[i];
        grad.push(-half * dx * (below - above) + corr * drho.data()[i]);
        below += r[i];
    }
    XField::from_vec_unchecked(g, grad)
}

/// Self-consistent field of a perturbation: the source is `coupling * int h finf dv`.
pub fn field_from_h<T: Real>(h: &Field<T>, finf: &Field<T>, coupling: T) -> Result<PoissonSolution<T>> {
    let rho = integrate_v(h, Some(finf))?.scaled(coupling);
    Ok(solve_poisson(&rho))
}

/// Gradient of the self-consistent field of a perturbation.
pub fn field_gradient_from_h<T: Real>(h: &Field<T>, finf: &Field<T>, coupling: T) -> Result<XField<T>> {
    let rho = integrate_v(h, Some(finf))?.scaled(coupling);
    Ok(poisson_gradient(&rho))
}
