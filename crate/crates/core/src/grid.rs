//! Cell-centred tensor grid on the truncated phase space `[-Lx, Lx] x [-Lv, Lv]`,
//! the field containers living on it, midpoint quadrature, finite-difference
//! stencils and the weighted fractional norm in `x`.

use std::io::{Read, Write};
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Whether odd resolutions (which put a node at the origin) are accepted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OddPolicy {
    Allow,
    Reject,
}

/// Smallest resolution accepted in each direction.
pub const MIN_POINTS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PhaseGrid<T> {
    pub nx: usize,
    pub nv: usize,
    pub lx: T,
    pub lv: T,
    pub dx: T,
    pub dv: T,
    pub x: Vec<T>,
    pub v: Vec<T>,
}

/// Midpoints of `n` equal cells on `[-l, l]`, mirrored so that `x[n-1-i] == -x[i]` bitwise.
fn symmetric_nodes<T: Real>(n: usize, l: T) -> (Vec<T>, T) {
    let d = (l + l) / T::from_count(n);
    let mut nodes = vec![T::zero(); n];
    for i in 0..n.div_ceil(2) {
        let xi = -l + (T::from_count(i) + T::lit(0.5)) * d;
        nodes[i] = xi;
        nodes[n - 1 - i] = -xi;
    }
    if n % 2 == 1 {
        nodes[n / 2] = T::zero();
    }
    (nodes, d)
}

impl<T: Real> PhaseGrid<T> {
    /// Builds a grid accepting odd resolutions.
    pub fn new(nx: usize, nv: usize, lx: T, lv: T) -> Result<Arc<Self>> {
        Self::with_policy(nx, nv, lx, lv, OddPolicy::Allow)
    }

    pub fn with_policy(nx: usize, nv: usize, lx: T, lv: T, policy: OddPolicy) -> Result<Arc<Self>> {
        if nx < MIN_POINTS || nv < MIN_POINTS {
            return Err(Error::InvalidGrid(format!(
                "need at least {MIN_POINTS} points per direction, got nx={nx}, nv={nv}"
            )));
        }
        if policy == OddPolicy::Reject && (nx % 2 == 1 || nv % 2 == 1) {
            return Err(Error::InvalidGrid(format!("odd resolution rejected: nx={nx}, nv={nv}")));
        }
        if !(lx > T::zero()) || !(lv > T::zero()) || !lx.is_finite() || !lv.is_finite() {
            return Err(Error::InvalidGrid(format!("half-widths must be positive, got Lx={lx}, Lv={lv}")));
        }
        let (x, dx) = symmetric_nodes(nx, lx);
        let (v, dv) = symmetric_nodes(nv, lv);
        Ok(Arc::new(Self { nx, nv, lx, lv, dx, dv, x, v }))
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nx * self.nv
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        i * self.nv + j
    }

    #[inline]
    pub fn cell_area(&self) -> T {
        self.dx * self.dv
    }

    pub fn max_abs_v(&self) -> T {
        self.v.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    /// Same grid with every resolution multiplied by `factor`.
    pub fn refined(&self, factor: usize) -> Result<Arc<Self>> {
        Self::new(self.nx * factor, self.nv * factor, self.lx, self.lv)
    }
}

pub(crate) fn same_grid<T: Real>(a: &Arc<PhaseGrid<T>>, b: &Arc<PhaseGrid<T>>) -> bool {
    Arc::ptr_eq(a, b) || **a == **b
}

fn ensure_same<T: Real>(a: &Arc<PhaseGrid<T>>, b: &Arc<PhaseGrid<T>>) -> Result<()> {
    if same_grid(a, b) {
        Ok(())
    } else {
        Err(Error::GridMismatch)
    }
}

/// Values on the full phase-space grid, stored with `x` as the outer index.
#[derive(Clone, Debug)]
pub struct Field<T> {
    grid: Arc<PhaseGrid<T>>,
    data: Vec<T>,
}

/// Values depending on `x` only.
#[derive(Clone, Debug)]
pub struct XField<T> {
    grid: Arc<PhaseGrid<T>>,
    data: Vec<T>,
}

/// Values depending on `v` only.
#[derive(Clone, Debug)]
pub struct VField<T> {
    grid: Arc<PhaseGrid<T>>,
    data: Vec<T>,
}

macro_rules! common_field_impl {
    ($ty:ident, $len:expr) => {
        impl<T: Real> $ty<T> {
            pub fn zeros(grid: &Arc<PhaseGrid<T>>) -> Self {
                let n = $len(&**grid);
                Self { grid: grid.clone(), data: vec![T::zero(); n] }
            }

            pub fn constant(grid: &Arc<PhaseGrid<T>>, c: T) -> Self {
                let n = $len(&**grid);
                Self { grid: grid.clone(), data: vec![c; n] }
            }

            /// Wraps `data`, checking its length and that every entry is finite.
            pub fn from_vec(grid: &Arc<PhaseGrid<T>>, data: Vec<T>) -> Result<Self> {
                let n = $len(&**grid);
                if data.len() != n {
                    return Err(Error::InvalidParameter(format!(
                        "expected {n} values, got {}",
                        data.len()
                    )));
                }
                if let Some(k) = data.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("entry {k}")));
                }
                Ok(Self { grid: grid.clone(), data })
            }

            #[allow(dead_code)]
            pub(crate) fn from_vec_unchecked(grid: &Arc<PhaseGrid<T>>, data: Vec<T>) -> Self {
                debug_assert_eq!(data.len(), $len(&**grid));
                Self { grid: grid.clone(), data }
            }

            #[inline]
            pub fn grid(&self) -> &Arc<PhaseGrid<T>> {
                &self.grid
            }

            #[inline]
            pub fn data(&self) -> &[T] {
                &self.data
            }

            #[inline]
            pub fn data_mut(&mut self) -> &mut [T] {
                &mut self.data
            }

            pub fn into_vec(self) -> Vec<T> {
                self.data
            }

            pub fn map(&self, f: impl Fn(T) -> T) -> Self {
                Self { grid: self.grid.clone(), data: self.data.iter().map(|&a| f(a)).collect() }
            }

            pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
                ensure_same(&self.grid, &other.grid)?;
                let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
                Ok(Self { grid: self.grid.clone(), data })
            }

            pub fn scaled(&self, c: T) -> Self {
                self.map(|a| a * c)
            }

            /// `self + c * other`.
            pub fn axpy(&self, c: T, other: &Self) -> Result<Self> {
                self.zip_map(other, |a, b| a + c * b)
            }

            pub fn max_abs(&self) -> T {
                self.data.iter().fold(T::zero(), |m, &a| m.max(a.abs()))
            }

            pub fn is_finite(&self) -> bool {
                self.data.iter().all(|a| a.is_finite())
            }
        }
    };
}

common_field_impl!(Field, PhaseGrid::len);
common_field_impl!(XField, |g: &PhaseGrid<T>| g.nx);
common_field_impl!(VField, |g: &PhaseGrid<T>| g.nv);

impl<T: Real> Field<T> {
    pub fn from_fn(grid: &Arc<PhaseGrid<T>>, f: impl Fn(T, T) -> T) -> Self {
        let mut data = Vec::with_capacity(grid.len());
        for &x in &grid.x {
            for &v in &grid.v {
                data.push(f(x, v));
            }
        }
        Self { grid: grid.clone(), data }
    }

    /// Tensor product `a(x) b(v)`.
    pub fn outer(a: &XField<T>, b: &VField<T>) -> Result<Self> {
        ensure_same(&a.grid, &b.grid)?;
        let grid = a.grid.clone();
        let mut data = Vec::with_capacity(grid.len());
        for &ai in &a.data {
            for &bj in &b.data {
                data.push(ai * bj);
            }
        }
        Ok(Self { grid, data })
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.grid.nv + j]
    }

    /// The `v`-line at fixed `x` index `i`.
    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        let nv = self.grid.nv;
        &self.data[i * nv..(i + 1) * nv]
    }
}

impl<T: Real> XField<T> {
    pub fn from_fn(grid: &Arc<PhaseGrid<T>>, f: impl Fn(T) -> T) -> Self {
        Self { grid: grid.clone(), data: grid.x.iter().map(|&x| f(x)).collect() }
    }

    /// Extends to phase space as a function constant in `v`.
    pub fn broadcast(&self) -> Field<T> {
        let nv = self.grid.nv;
        let data = self.data.iter().flat_map(|&a| std::iter::repeat(a).take(nv)).collect();
        Field { grid: self.grid.clone(), data }
    }

    /// Midpoint integral over `x`.
    pub fn integral(&self) -> T {
        self.data.iter().copied().sum::<T>() * self.grid.dx
    }
}

impl<T: Real> VField<T> {
    pub fn from_fn(grid: &Arc<PhaseGrid<T>>, f: impl Fn(T) -> T) -> Self {
        Self { grid: grid.clone(), data: grid.v.iter().map(|&v| f(v)).collect() }
    }

    pub fn integral(&self) -> T {
        self.data.iter().copied().sum::<T>() * self.grid.dv
    }
}

/// Midpoint-rule integral of `field * weight` over phase space.
pub fn integrate<T: Real>(field: &Field<T>, weight: Option<&Field<T>>) -> Result<T> {
    let s: T = match weight {
        None => field.data.iter().copied().sum(),
        Some(w) => {
            ensure_same(&field.grid, &w.grid)?;
            field.data.iter().zip(&w.data).map(|(&a, &b)| a * b).sum()
        }
    };
    Ok(s * field.grid.cell_area())
}

/// Velocity moment `x -> sum_j field(x, v_j) weight(x, v_j) dv`.
pub fn integrate_v<T: Real>(field: &Field<T>, weight: Option<&Field<T>>) -> Result<XField<T>> {
    let g = &field.grid;
    if let Some(w) = weight {
        ensure_same(g, &w.grid)?;
    }
    let mut out = vec![T::zero(); g.nx];
    for (i, o) in out.iter_mut().enumerate() {
        let row = field.row(i);
        let s: T = match weight {
            None => row.iter().copied().sum(),
            Some(w) => row.iter().zip(w.row(i)).map(|(&a, &b)| a * b).sum(),
        };
        *o = s * g.dv;
    }
    Ok(XField { grid: g.clone(), data: out })
}

/// First derivative of a sampled line: centred inside, one-sided second order at the ends.
pub(crate) fn diff_line<T: Real>(u: &[T], h: T, out: &mut [T]) {
    let n = u.len();
    let inv2h = T::one() / (h + h);
    let three = T::lit(3.0);
    let four = T::lit(4.0);
    out[0] = (-three * u[0] + four * u[1] - u[2]) * inv2h;
    for k in 1..n - 1 {
        out[k] = (u[k + 1] - u[k - 1]) * inv2h;
    }
    out[n - 1] = (three * u[n - 1] - four * u[n - 2] + u[n - 3]) * inv2h;
}

/// Second derivative of a sampled line, second order everywhere.
pub(crate) fn diff2_line<T: Real>(u: &[T], h: T, out: &mut [T]) {
    let n = u.len();
    let inv = T::one() / (h * h);
    let two = T::lit(2.0);
    out[0] = (two * u[0] - T::lit(5.0) * u[1] + T::lit(4.0) * u[2] - u[3]) * inv;
    for k in 1..n - 1 {
        out[k] = (u[k + 1] - two * u[k] + u[k - 1]) * inv;
    }
    out[n - 1] = (two * u[n - 1] - T::lit(5.0) * u[n - 2] + T::lit(4.0) * u[n - 3] - u[n - 4]) * inv;
}

pub fn grad_x<T: Real>(field: &Field<T>) -> Field<T> {
    let g = &field.grid;
    let (nx, nv) = (g.nx, g.nv);
    let mut col = vec![T::zero(); nx];
    let mut dcol = vec![T::zero(); nx];
    let mut out = vec![T::zero(); g.len()];
    for j in 0..nv {
        for i in 0..nx {
            col[i] = field.data[i * nv + j];
        }
        diff_line(&col, g.dx, &mut dcol);
        for i in 0..nx {
            out[i * nv + j] = dcol[i];
        }
    }
    Field { grid: g.clone(), data: out }
}

pub fn grad_v<T: Real>(field: &Field<T>) -> Field<T> {
    let g = &field.grid;
    let mut out = vec![T::zero(); g.len()];
    for (i, chunk) in out.chunks_mut(g.nv).enumerate() {
        diff_line(field.row(i), g.dv, chunk);
    }
    Field { grid: g.clone(), data: out }
}

pub fn laplace_v<T: Real>(field: &Field<T>) -> Field<T> {
    let g = &field.grid;
    let mut out = vec![T::zero(); g.len()];
    for (i, chunk) in out.chunks_mut(g.nv).enumerate() {
        diff2_line(field.row(i), g.dv, chunk);
    }
    Field { grid: g.clone(), data: out }
}

pub fn derivative_x<T: Real>(field: &XField<T>) -> XField<T> {
    let mut out = vec![T::zero(); field.data.len()];
    diff_line(&field.data, field.grid.dx, &mut out);
    XField { grid: field.grid.clone(), data: out }
}

pub fn second_derivative_x<T: Real>(field: &XField<T>) -> XField<T> {
    let mut out = vec![T::zero(); field.data.len()];
    diff2_line(&field.data, field.grid.dx, &mut out);
    XField { grid: field.grid.clone(), data: out }
}

fn check_weight<T: Real>(w: &Field<T>) -> Result<()> {
    match w.data.iter().position(|&a| a < T::zero()) {
        Some(k) => Err(Error::NegativeWeight(k)),
        None => Ok(()),
    }
}

/// `sum h^2 w dx dv`; the weight must be non-negative.
pub fn weighted_norm_sq<T: Real>(h: &Field<T>, w: &Field<T>) -> Result<T> {
    ensure_same(&h.grid, &w.grid)?;
    check_weight(w)?;
    let s: T = h.data.iter().zip(&w.data).map(|(&a, &b)| a * a * b).sum();
    Ok(s * h.grid.cell_area())
}

/// `|| (1 - d_xx)^{alpha/2} (h sqrt(w)) ||_{L^2}` evaluated with a discrete Fourier
/// transform along `x` (periodic extension; the weighted integrand is negligible at the
/// truncation boundary for confined equilibria). Frequencies are in cycles per unit
/// length, so the multiplier is `(1 + 4 pi^2 xi^2)^{alpha/2}`.
pub fn fractional_x_norm<T: Real>(h: &Field<T>, w: &Field<T>, alpha: T) -> Result<T> {
    ensure_same(&h.grid, &w.grid)?;
    check_weight(w)?;
    if !(alpha >= T::zero() && alpha <= T::one()) {
        return Err(Error::InvalidParameter(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let g = &h.grid;
    let (nx, nv) = (g.nx, g.nv);
    let mut planner = FftPlanner::<T>::new();
    let fft = planner.plan_fft_forward(nx);
    let four_pi2 = T::lit(4.0) * T::PI() * T::PI();
    let period = g.lx + g.lx;
    let mult: Vec<T> = (0..nx)
        .map(|k| {
            let kk = if k <= nx / 2 { k as f64 } else { k as f64 - nx as f64 };
            let xi = T::lit(kk) / period;
            (T::one() + four_pi2 * xi * xi).powf(alpha)
        })
        .collect();
    let mut buf = vec![Complex::new(T::zero(), T::zero()); nx];
    let mut total = T::zero();
    for j in 0..nv {
        for i in 0..nx {
            let k = i * nv + j;
            buf[i] = Complex::new(h.data[k] * w.data[k].sqrt(), T::zero());
        }
        fft.process(&mut buf);
        total += buf.iter().zip(&mult).map(|(c, &m)| m * c.norm_sqr()).sum::<T>();
    }
    // Parseval: sum_i |g_i|^2 = (1/n) sum_k |G_k|^2.
    Ok((total * g.cell_area() / T::from_count(nx)).sqrt())
}

/// Writes `x,v,value` rows, `x` outer, with 17 significant digits.
pub fn write_field_csv<T: Real, W: Write>(field: &Field<T>, out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["x", "v", "value"])?;
    let g = &field.grid;
    for i in 0..g.nx {
        for j in 0..g.nv {
            wtr.write_record([
                format!("{:.16e}", g.x[i]),
                format!("{:.16e}", g.v[j]),
                format!("{:.16e}", field.at(i, j)),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Reads a field written by [`write_field_csv`] back onto `grid`.
pub fn read_field_csv<T: Real, R: Read>(grid: &Arc<PhaseGrid<T>>, input: R) -> Result<Field<T>> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["x", "v", "value"] {
        return Err(Error::Parse(format!("unexpected header {headers:?}")));
    }
    let mut data = Vec::with_capacity(grid.len());
    for rec in rdr.records() {
        let rec = rec?;
        let value: f64 = rec
            .get(2)
            .ok_or_else(|| Error::Parse("missing value column".into()))?
            .trim()
            .parse()
            .map_err(|e| Error::Parse(format!("{e}")))?;
        data.push(T::lit(value));
    }
    Field::from_vec(grid, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn grid(n: usize, l: f64) -> Arc<PhaseGrid<f64>> {
        PhaseGrid::new(n, n, l, l).unwrap()
    }

    #[test]
    fn constant_one_integrates_to_area() {
        let g = grid(16, 1.0);
        let one = Field::constant(&g, 1.0);
        assert_relative_eq!(integrate(&one, None).unwrap(), 4.0, epsilon = 1e-12);
    }

    #[test]
    fn nodes_are_symmetric() {
        for n in [8, 9, 16, 33] {
            let g = PhaseGrid::<f64>::new(n, n + 1, 3.0, 2.0).unwrap();
            for i in 0..n {
                assert_eq!(g.x[i], -g.x[n - 1 - i]);
            }
            assert_eq!(g.x[0], -g.x[n - 1]);
            assert_relative_eq!(g.dx, 6.0 / n as f64, epsilon = 1e-15);
        }
    }

    #[test]
    fn odd_policy() {
        assert!(PhaseGrid::<f64>::with_policy(9, 8, 1.0, 1.0, OddPolicy::Reject).is_err());
        let g = PhaseGrid::<f64>::with_policy(9, 8, 1.0, 1.0, OddPolicy::Allow).unwrap();
        assert_relative_eq!(g.dx, 2.0 / 9.0, epsilon = 1e-15);
        assert_eq!(g.x[4], 0.0);
        assert!(PhaseGrid::<f64>::new(7, 8, 1.0, 1.0).is_err());
        assert!(PhaseGrid::<f64>::new(8, 8, 0.0, 1.0).is_err());
    }

    #[test]
    fn stencils_exact_on_linear_fields() {
        let g = grid(12, 2.0);
        let f = Field::from_fn(&g, |x, v| 3.0 * x - 2.0 * v + 1.0);
        let gx = grad_x(&f);
        let gv = grad_v(&f);
        for k in 0..g.len() {
            assert!((gx.data()[k] - 3.0).abs() < 1e-12);
            assert!((gv.data()[k] + 2.0).abs() < 1e-12);
        }
        let q = Field::from_fn(&g, |_, v| v * v);
        assert!(laplace_v(&q).data().iter().all(|&a| (a - 2.0).abs() < 1e-10));
    }

    #[test]
    fn gaussian_second_moment() {
        let g = grid(128, 8.0);
        let m = Field::from_fn(&g, |_, v| (-v * v / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt() / 16.0);
        let h = Field::from_fn(&g, |_, v| v);
        let n = weighted_norm_sq(&h, &m).unwrap();
        assert!((n - 1.0).abs() < 1e-3, "{n}");
    }

    #[test]
    fn negative_weight_rejected() {
        let g = grid(8, 1.0);
        let h = Field::constant(&g, 1.0);
        let mut w = Field::constant(&g, 1.0);
        w.data_mut()[5] = -1.0;
        assert!(matches!(weighted_norm_sq(&h, &w), Err(Error::NegativeWeight(5))));
    }

    #[test]
    fn mismatched_grids_rejected() {
        let a = Field::constant(&grid(8, 1.0), 1.0);
        let b = Field::constant(&grid(10, 1.0), 1.0);
        assert!(matches!(integrate(&a, Some(&b)), Err(Error::GridMismatch)));
    }

    #[test]
    fn fractional_norm_endpoints() {
        let g = grid(64, 6.0);
        let w = Field::from_fn(&g, |x, v| (-(x * x + v * v) / 2.0).exp() / (2.0 * std::f64::consts::PI));
        let h = Field::from_fn(&g, |x, v| x * (1.0 + 0.3 * v) + 0.2 * x * x);
        let l2 = weighted_norm_sq(&h, &w).unwrap().sqrt();
        assert_relative_eq!(fractional_x_norm(&h, &w, 0.0).unwrap(), l2, max_relative = 1e-12);

        let gfield = h.zip_map(&w, |a, b| a * b.sqrt()).unwrap();
        let dg = grad_x(&gfield);
        let ones = Field::constant(&g, 1.0);
        let h1 = (weighted_norm_sq(&gfield, &ones).unwrap() + weighted_norm_sq(&dg, &ones).unwrap()).sqrt();
        let frac = fractional_x_norm(&h, &w, 1.0).unwrap();
        assert!((frac / h1 - 1.0).abs() < 0.01, "{frac} vs {h1}");
    }

    #[test]
    fn fractional_norm_single_mode() {
        let g = grid(32, 4.0);
        let ones = Field::constant(&g, 1.0);
        let m = 3.0;
        let xi = m / 8.0;
        let h = Field::from_fn(&g, |x, v| (2.0 * std::f64::consts::PI * xi * x).cos() * (1.0 + v * v));
        let l2 = weighted_norm_sq(&h, &ones).unwrap().sqrt();
        for alpha in [0.25, 0.6, 1.0] {
            let expect = (1.0 + 4.0 * std::f64::consts::PI.powi(2) * xi * xi).powf(alpha / 2.0) * l2;
            assert_relative_eq!(fractional_x_norm(&h, &ones, alpha).unwrap(), expect, max_relative = 1e-12);
        }
        assert!(fractional_x_norm(&h, &ones, 1.5).is_err());
    }

    #[test]
    fn csv_round_trip_is_bitwise() {
        let g = grid(8, 1.5);
        let f = Field::from_fn(&g, |x, v| (x * 1.7).sin() + v.exp() / 3.0);
        let mut buf = Vec::new();
        write_field_csv(&f, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x,v,value\n"));
        let back = read_field_csv(&g, buf.as_slice()).unwrap();
        assert_eq!(back.data(), f.data());
    }

    #[test]
    fn single_precision_quadrature() {
        let g = PhaseGrid::<f32>::new(16, 16, 1.0, 1.0).unwrap();
        let one = Field::constant(&g, 1.0f32);
        assert!((integrate(&one, None).unwrap() - 4.0).abs() < 1e-5);
    }
}
