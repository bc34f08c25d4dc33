//! Small dense helpers: symmetric 2x2 matrices and tridiagonal solves.

use serde::Serialize;

use crate::scalar::Real;

/// Symmetric matrix `[[a, b], [b, c]]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Sym2<T> {
    pub a: T,
    pub b: T,
    pub c: T,
}

impl<T: Real> Sym2<T> {
    pub fn new(a: T, b: T, c: T) -> Self {
        Self { a, b, c }
    }

    pub fn det(&self) -> T {
        self.a * self.c - self.b * self.b
    }

    pub fn trace(&self) -> T {
        self.a + self.c
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> (T, T) {
        let half = T::lit(0.5);
        let mean = (self.a + self.c) * half;
        let rad = ((self.a - self.c) * half).hypot(self.b);
        (mean - rad, mean + rad)
    }

    pub fn min_eig(&self) -> T {
        self.eigenvalues().0
    }

    pub fn max_eig(&self) -> T {
        self.eigenvalues().1
    }

    /// Frobenius norm.
    pub fn norm(&self) -> T {
        (self.a * self.a + T::lit(2.0) * self.b * self.b + self.c * self.c).sqrt()
    }

    pub fn is_positive_definite(&self) -> bool {
        self.a > T::zero() && self.det() > T::zero()
    }

    pub fn is_positive_semidefinite(&self) -> bool {
        self.a >= T::zero() && self.c >= T::zero() && self.det() >= T::zero()
    }

    #[inline]
    pub fn quad(&self, u1: T, u2: T) -> T {
        self.a * u1 * u1 + T::lit(2.0) * self.b * u1 * u2 + self.c * u2 * u2
    }

    /// Smallest eigenvalue computed as `det / max_eig` when the matrix is positive
    /// definite, which avoids the cancellation of `mean - radius` for nearly singular
    /// matrices.
    pub fn min_eig_accurate(&self) -> T {
        let det = self.det();
        let top = self.max_eig();
        if det > T::zero() && top > T::zero() {
            det / top
        } else {
            self.min_eig()
        }
    }

    pub fn scale(&self, s: T) -> Self {
        Self::new(self.a * s, self.b * s, self.c * s)
    }

    pub fn sub(&self, o: &Self) -> Self {
        Self::new(self.a - o.a, self.b - o.b, self.c - o.c)
    }

    /// Smallest `mu` with `det(self - mu * other) = 0`, for positive definite `other`.
    /// Equals the smallest eigenvalue of `other^{-1/2} self other^{-1/2}`.
    pub fn generalized_min_eig(&self, other: &Self) -> T {
        let (a, b) = (self, other);
        let qa = b.det();
        let qb = -(a.a * b.c + a.c * b.a - T::lit(2.0) * a.b * b.b);
        let qc = a.det();
        let disc = (qb * qb - T::lit(4.0) * qa * qc).max(T::zero()).sqrt();
        // Stable roots of qa mu^2 + qb mu + qc.
        let q = -T::lit(0.5) * (qb + qb.signum() * disc);
        let (r1, r2) = if q == T::zero() { (T::zero(), T::zero()) } else { (q / qa, qc / q) };
        r1.min(r2)
    }
}

/// Factorised tridiagonal matrix for repeated solves (Thomas algorithm).
#[derive(Clone, Debug)]
pub struct Tridiagonal<T> {
    lower: Vec<T>,
    /// Modified super-diagonal `c'`.
    upper: Vec<T>,
    /// Reciprocal pivots.
    pivots: Vec<T>,
}

impl<T: Real> Tridiagonal<T> {
    /// `lower[k]` multiplies `x[k-1]` in row `k` (`lower[0]` unused), `upper[k]` multiplies
    /// `x[k+1]` (`upper[n-1]` unused).
    pub fn factor(lower: &[T], diag: &[T], upper: &[T]) -> Self {
        let n = diag.len();
        let mut cp = vec![T::zero(); n];
        let mut piv = vec![T::zero(); n];
        let mut denom = diag[0];
        piv[0] = T::one() / denom;
        cp[0] = upper[0] * piv[0];
        for k in 1..n {
            denom = diag[k] - lower[k] * cp[k - 1];
            piv[k] = T::one() / denom;
            cp[k] = if k + 1 < n { upper[k] * piv[k] } else { T::zero() };
        }
        Self { lower: lower.to_vec(), upper: cp, pivots: piv }
    }

    /// Solves in place.
    pub fn solve(&self, rhs: &mut [T]) {
        let n = rhs.len();
        rhs[0] *= self.pivots[0];
        for k in 1..n {
            rhs[k] = (rhs[k] - self.lower[k] * rhs[k - 1]) * self.pivots[k];
        }
        for k in (0..n - 1).rev() {
            let next = rhs[k + 1];
            rhs[k] -= self.upper[k] * next;
        }
    }
}

/// Jacobi-preconditioned conjugate gradients for a symmetric positive definite operator.
/// Returns the iteration count, or `None` if the relative residual did not reach `tol`.
pub fn pcg<T: Real>(
    apply: impl Fn(&[T], &mut [T]),
    diag: &[T],
    b: &[T],
    x: &mut [T],
    tol: T,
    max_iter: usize,
) -> Option<usize> {
    let n = b.len();
    let dot = |a: &[T], c: &[T]| a.iter().zip(c).fold(T::zero(), |s, (&p, &q)| s + p * q);
    let bnorm = dot(b, b).sqrt();
    if bnorm == T::zero() {
        x.iter_mut().for_each(|v| *v = T::zero());
        return Some(0);
    }
    let mut ax = vec![T::zero(); n];
    apply(x, &mut ax);
    let mut r: Vec<T> = b.iter().zip(&ax).map(|(&p, &q)| p - q).collect();
    let mut z: Vec<T> = r.iter().zip(diag).map(|(&p, &d)| p / d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![T::zero(); n];
    for it in 0..max_iter {
        if dot(&r, &r).sqrt() <= tol * bnorm {
            return Some(it);
        }
        apply(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
            z[k] = r[k] / diag[k];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for k in 0..n {
            p[k] = z[k] + beta * p[k];
        }
    }
    (dot(&r, &r).sqrt() <= tol * bnorm).then_some(max_iter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn eigenvalues_of_diagonal_and_rotated() {
        let m = Sym2::new(2.0, 0.0, 5.0);
        assert_eq!(m.eigenvalues(), (2.0, 5.0));
        let r = Sym2::new(2.0, 1.0, 2.0);
        let (l1, l2) = r.eigenvalues();
        assert_relative_eq!(l1, 1.0, epsilon = 1e-14);
        assert_relative_eq!(l2, 3.0, epsilon = 1e-14);
    }

    #[test]
    fn generalized_eigenvalue_of_multiple() {
        let p = Sym2::new(0.001, 0.01, 0.2);
        assert_relative_eq!(p.scale(2.0).generalized_min_eig(&p), 2.0, max_relative = 1e-10);
    }

    #[test]
    fn generalized_eigenvalue_matches_determinant_root() {
        let a = Sym2::new(1.0f64, 0.3, 2.0);
        let b = Sym2::new(2.0, -0.5, 1.0);
        let mu = a.generalized_min_eig(&b);
        assert!(a.sub(&b.scale(mu)).det().abs() < 1e-12);
        assert!(a.sub(&b.scale(mu)).min_eig() > -1e-12);
        assert!(a.sub(&b.scale(mu * 1.001)).min_eig() < 0.0);
    }

    #[test]
    fn tridiagonal_solve() {
        let lower = [0.0, -1.0, -1.0, -1.0];
        let diag = [4.0, 4.0, 4.0, 4.0];
        let upper = [-1.0, -1.0, -1.0, 0.0];
        let t = Tridiagonal::factor(&lower, &diag, &upper);
        let x = [1.0, -2.0, 0.5, 3.0];
        let mut b: Vec<f64> = (0..4)
            .map(|k| {
                diag[k] * x[k] + if k > 0 { lower[k] * x[k - 1] } else { 0.0 } + if k < 3 { upper[k] * x[k + 1] } else { 0.0 }
            })
            .collect();
        t.solve(&mut b);
        for k in 0..4 {
            assert_relative_eq!(b[k], x[k], epsilon = 1e-14);
        }
    }

    #[test]
    fn accurate_min_eigenvalue_of_nearly_singular_matrix() {
        let m = Sym2::new(1.0, 1.0 - 1e-9, 1.0);
        assert_relative_eq!(m.min_eig_accurate(), 1e-9, max_relative = 1e-6);
    }

    #[test]
    fn conjugate_gradients_solve_laplacian() {
        let n = 50;
        let apply = |x: &[f64], out: &mut [f64]| {
            for k in 0..n {
                out[k] = 3.0 * x[k] - if k > 0 { x[k - 1] } else { 0.0 } - if k + 1 < n { x[k + 1] } else { 0.0 };
            }
        };
        let truth: Vec<f64> = (0..n).map(|k| (k as f64 * 0.3).sin()).collect();
        let mut b = vec![0.0; n];
        apply(&truth, &mut b);
        let mut x = vec![0.0; n];
        pcg(apply, &vec![3.0; n], &b, &mut x, 1e-13, 500).unwrap();
        for k in 0..n {
            assert!((x[k] - truth[k]).abs() < 1e-11);
        }
    }
}
