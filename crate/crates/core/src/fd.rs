//! Finite-difference stencils and the linear solvers behind the implicit steps.
//!
//! Advection terms are written for the time-to-maturity form
//! `dV/dtau = b dV/dxi + ...`, so the monotone choice takes the forward
//! difference where `b > 0` and the backward difference where `b < 0`.

use crate::error::{Error, Result};

#[inline]
pub fn pos(v: f64) -> f64 {
    v.max(0.0)
}

#[inline]
pub fn neg(v: f64) -> f64 {
    v.min(0.0)
}

/// Upwind difference of `v` at interior index `i` for speed `b`.
#[inline]
pub fn upwind_slope(b: f64, v: &[f64], i: usize, h: f64) -> f64 {
    if b >= 0.0 {
        (v[i + 1] - v[i]) / h
    } else {
        (v[i] - v[i - 1]) / h
    }
}

/// `b⁺Δ⁺v + b⁻Δ⁻v` at interior nodes; boundary entries are zero.
pub fn upwind_advection(speed: &[f64], v: &[f64], h: f64) -> Result<Vec<f64>> {
    check_len(v.len(), speed.len())?;
    let mut out = vec![0.0; v.len()];
    for i in 1..v.len().saturating_sub(1) {
        out[i] = speed[i] * upwind_slope(speed[i], v, i, h);
    }
    Ok(out)
}

/// Centred first difference at interior nodes, one-sided at the ends.
pub fn centered_first(v: &[f64], h: f64) -> Vec<f64> {
    let n = v.len();
    (0..n)
        .map(|i| match i {
            0 => (v[1] - v[0]) / h,
            _ if i == n - 1 => (v[n - 1] - v[n - 2]) / h,
            _ => (v[i + 1] - v[i - 1]) / (2.0 * h),
        })
        .collect()
}

/// Three-point second difference at interior nodes; boundary entries are zero.
pub fn centered_second(v: &[f64], h: f64) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for i in 1..v.len().saturating_sub(1) {
        out[i] = (v[i + 1] - 2.0 * v[i] + v[i - 1]) / (h * h);
    }
    out
}

/// Which diagonal pair carries the cross derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Diagonals {
    /// South-east / north-west, used for negative correlation.
    SeNw,
    /// North-east / south-west, used for positive correlation.
    NeSw,
}

impl Diagonals {
    pub fn for_rho(rho: f64) -> Self {
        if rho > 0.0 {
            Diagonals::NeSw
        } else {
            Diagonals::SeNw
        }
    }
}

/// Seven-point cross-derivative approximation on an `nx × ny` row-major
/// field (`y` fastest). Boundary entries are zero.
pub fn mixed_second(v: &[f64], nx: usize, ny: usize, dx: f64, dy: f64, diag: Diagonals) -> Result<Vec<f64>> {
    check_len(nx * ny, v.len())?;
    let at = |i: usize, j: usize| v[i * ny + j];
    let mut out = vec![0.0; v.len()];
    let h = 2.0 * dx * dy;
    for i in 1..nx.saturating_sub(1) {
        for j in 1..ny.saturating_sub(1) {
            let cross = at(i + 1, j) + at(i - 1, j) + at(i, j + 1) + at(i, j - 1);
            out[i * ny + j] = match diag {
                Diagonals::SeNw => -(2.0 * at(i, j) + at(i + 1, j - 1) + at(i - 1, j + 1) - cross) / h,
                Diagonals::NeSw => (2.0 * at(i, j) + at(i + 1, j + 1) + at(i - 1, j - 1) - cross) / h,
            };
        }
    }
    Ok(out)
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension { expected, actual })
    }
}

// ─────────────────────────── tridiagonal ───────────────────────────

/// Tridiagonal matrix; `lower[0]` and `upper[n-1]` are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct Tridiagonal {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Tridiagonal {
    pub fn new(lower: Vec<f64>, diag: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        check_len(diag.len(), lower.len())?;
        check_len(diag.len(), upper.len())?;
        Ok(Self { lower, diag, upper })
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    /// Positive diagonal, non-positive off-diagonals, weak row dominance.
    pub fn is_m_matrix(&self) -> bool {
        let n = self.len();
        (0..n).all(|i| {
            let l = if i > 0 { self.lower[i] } else { 0.0 };
            let u = if i + 1 < n { self.upper[i] } else { 0.0 };
            self.diag[i] > 0.0 && l <= 0.0 && u <= 0.0 && self.diag[i] + l + u >= -1e-12 * self.diag[i]
        })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = self.len();
        (0..n)
            .map(|i| {
                let mut s = self.diag[i] * x[i];
                if i > 0 {
                    s += self.lower[i] * x[i - 1];
                }
                if i + 1 < n {
                    s += self.upper[i] * x[i + 1];
                }
                s
            })
            .collect()
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        check_len(self.len(), rhs.len())?;
        let mut x = rhs.to_vec();
        let mut scratch = vec![0.0; self.len()];
        thomas_in_place(&self.lower, &self.diag, &self.upper, &mut x, &mut scratch)?;
        Ok(x)
    }
}

/// Thomas algorithm without pivoting; overwrites `rhs` with the solution.
pub fn thomas_in_place(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &mut [f64], scratch: &mut [f64]) -> Result<()> {
    let n = rhs.len();
    if n == 0 {
        return Ok(());
    }
    let mut beta = diag[0];
    if beta == 0.0 || !beta.is_finite() {
        return Err(Error::SingularPivot { row: 0 });
    }
    rhs[0] /= beta;
    for i in 1..n {
        scratch[i] = upper[i - 1] / beta;
        beta = diag[i] - lower[i] * scratch[i];
        if beta == 0.0 || !beta.is_finite() {
            return Err(Error::SingularPivot { row: i });
        }
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / beta;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= scratch[i + 1] * rhs[i + 1];
    }
    Ok(())
}

/// Reusable LU factors of a tridiagonal matrix.
#[derive(Debug, Clone)]
pub struct TridiagonalLu {
    lower: Vec<f64>,
    inv_pivot: Vec<f64>,
    upper_scaled: Vec<f64>,
}

impl TridiagonalLu {
    pub fn factor(m: &Tridiagonal) -> Result<Self> {
        let n = m.len();
        let mut inv_pivot = vec![0.0; n];
        let mut upper_scaled = vec![0.0; n];
        let mut beta = m.diag[0];
        for i in 0..n {
            if i > 0 {
                beta = m.diag[i] - m.lower[i] * upper_scaled[i - 1];
            }
            if beta == 0.0 || !beta.is_finite() {
                return Err(Error::SingularPivot { row: i });
            }
            inv_pivot[i] = 1.0 / beta;
            if i + 1 < n {
                upper_scaled[i] = m.upper[i] / beta;
            }
        }
        Ok(Self { lower: m.lower.clone(), inv_pivot, upper_scaled })
    }

    pub fn solve_in_place(&self, rhs: &mut [f64]) {
        let n = rhs.len();
        rhs[0] *= self.inv_pivot[0];
        for i in 1..n {
            rhs[i] = (rhs[i] - self.lower[i] * rhs[i - 1]) * self.inv_pivot[i];
        }
        for i in (0..n - 1).rev() {
            rhs[i] -= self.upper_scaled[i] * rhs[i + 1];
        }
    }
}

// ─────────────────────────── seven-point system ───────────────────────────

/// Implicit system on the `ni × nj` interior of a 2-D grid (second index
/// fastest) with a five-point cross plus one diagonal pair. Couplings that
/// leave the interior are folded onto the nearest interior node, which is
/// the zero-order extrapolation closure.
#[derive(Debug, Clone, PartialEq)]
pub struct SevenPointSystem {
    pub ni: usize,
    pub nj: usize,
    pub center: Vec<f64>,
    pub west: Vec<f64>,
    pub east: Vec<f64>,
    pub south: Vec<f64>,
    pub north: Vec<f64>,
    /// South-east or north-east coupling depending on `diagonals`.
    pub diag_a: Vec<f64>,
    /// North-west or south-west coupling depending on `diagonals`.
    pub diag_b: Vec<f64>,
    pub diagonals: Diagonals,
}

impl SevenPointSystem {
    pub fn zeros(ni: usize, nj: usize, diagonals: Diagonals) -> Self {
        let n = ni * nj;
        Self {
            ni,
            nj,
            center: vec![0.0; n],
            west: vec![0.0; n],
            east: vec![0.0; n],
            south: vec![0.0; n],
            north: vec![0.0; n],
            diag_a: vec![0.0; n],
            diag_b: vec![0.0; n],
            diagonals,
        }
    }

    pub fn len(&self) -> usize {
        self.ni * self.nj
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows with a positive off-diagonal coefficient.
    pub fn sign_violations(&self) -> usize {
        (0..self.len())
            .filter(|&r| {
                [self.west[r], self.east[r], self.south[r], self.north[r], self.diag_a[r], self.diag_b[r]]
                    .iter()
                    .any(|&c| c > 0.0)
            })
            .count()
    }

    /// Folded couplings of row `(a, b)` as `(column, coefficient)` pairs.
    fn couplings(&self, a: usize, b: usize) -> [(usize, f64); 7] {
        let r = a * self.nj + b;
        let (sa, sb) = match self.diagonals {
            Diagonals::SeNw => ((1, -1), (-1, 1)),
            Diagonals::NeSw => ((1, 1), (-1, -1)),
        };
        let idx = |da: isize, db: isize| -> usize {
            let aa = (a as isize + da).clamp(0, self.ni as isize - 1) as usize;
            let bb = (b as isize + db).clamp(0, self.nj as isize - 1) as usize;
            aa * self.nj + bb
        };
        [
            (r, self.center[r]),
            (idx(-1, 0), self.west[r]),
            (idx(1, 0), self.east[r]),
            (idx(0, -1), self.south[r]),
            (idx(0, 1), self.north[r]),
            (idx(sa.0, sa.1), self.diag_a[r]),
            (idx(sb.0, sb.1), self.diag_b[r]),
        ]
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for a in 0..self.ni {
            for b in 0..self.nj {
                out[a * self.nj + b] = self.couplings(a, b).iter().map(|&(c, v)| v * x[c]).sum();
            }
        }
        out
    }

    pub fn factorize(&self) -> Result<BandedLu> {
        let n = self.len();
        let w = self.nj + 1;
        let mut lu = BandedLu { n, w, band: vec![0.0; n * (2 * w + 1)] };
        for a in 0..self.ni {
            for b in 0..self.nj {
                let r = a * self.nj + b;
                for (c, v) in self.couplings(a, b) {
                    *lu.at_mut(r, c) += v;
                }
            }
        }
        lu.factor_in_place()?;
        Ok(lu)
    }
}

/// Banded LU factors without pivoting, half-bandwidth `w`.
#[derive(Debug, Clone)]
pub struct BandedLu {
    n: usize,
    w: usize,
    band: Vec<f64>,
}

impl BandedLu {
    #[inline]
    fn width(&self) -> usize {
        2 * self.w + 1
    }

    #[inline]
    fn at(&self, r: usize, c: usize) -> f64 {
        self.band[r * self.width() + c + self.w - r]
    }

    #[inline]
    fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        let width = self.width();
        &mut self.band[r * width + c + self.w - r]
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    fn factor_in_place(&mut self) -> Result<()> {
        let (n, w, width) = (self.n, self.w, self.width());
        for k in 0..n {
            let pivot = self.at(k, k);
            if pivot == 0.0 || !pivot.is_finite() {
                return Err(Error::SingularPivot { row: k });
            }
            let last = (k + w).min(n - 1);
            let (head, tail) = self.band.split_at_mut((k + 1) * width);
            let pivot_row = &head[k * width + w..k * width + w + (last - k) + 1];
            for i in k + 1..=last {
                let row = &mut tail[(i - k - 1) * width..(i - k) * width];
                let off = w + k - i;
                let l = row[off] / pivot;
                row[off] = l;
                if l != 0.0 {
                    for (dst, &src) in row[off + 1..off + 1 + (last - k)].iter_mut().zip(&pivot_row[1..]) {
                        *dst -= l * src;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        check_len(self.n, rhs.len())?;
        let mut x = rhs.to_vec();
        self.solve_many(&mut x, 1);
        Ok(x)
    }

    /// Solves for `cols` right-hand sides stored row-major (`rhs[r * cols + c]`).
    pub fn solve_many(&self, rhs: &mut [f64], cols: usize) {
        let (n, w, width) = (self.n, self.w, self.width());
        debug_assert_eq!(rhs.len(), n * cols);
        for r in 1..n {
            let first = r.saturating_sub(w);
            let (done, cur) = rhs.split_at_mut(r * cols);
            let cur = &mut cur[..cols];
            let lrow = &self.band[r * width..];
            for c in first..r {
                let l = lrow[c + w - r];
                if l != 0.0 {
                    let src = &done[c * cols..(c + 1) * cols];
                    for (d, &s) in cur.iter_mut().zip(src) {
                        *d -= l * s;
                    }
                }
            }
        }
        for r in (0..n).rev() {
            let last = (r + w).min(n - 1);
            let (cur, later) = rhs.split_at_mut((r + 1) * cols);
            let cur = &mut cur[r * cols..];
            let urow = &self.band[r * width..];
            for c in r + 1..=last {
                let u = urow[c + w - r];
                if u != 0.0 {
                    let src = &later[(c - r - 1) * cols..(c - r) * cols];
                    for (d, &s) in cur.iter_mut().zip(src) {
                        *d -= u * s;
                    }
                }
            }
            let inv = 1.0 / urow[w];
            for d in cur.iter_mut() {
                *d *= inv;
            }
        }
    }
}

/// One-shot factorisation and solve.
pub fn seven_point_solve(system: &SevenPointSystem, rhs: &[f64]) -> Result<Vec<f64>> {
    system.factorize()?.solve(rhs)
}
