//! Fixed-size 2×2 and 3×3 helpers for single-mode moment algebra.

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

/// Symmetric 2×2 matrix in `(x, p)` ordering.
///
/// Used both for covariance matrices and for their time derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Sym2 {
    pub xx: f64,
    pub pp: f64,
    pub xp: f64,
}

impl Sym2 {
    pub const ZERO: Sym2 = Sym2 { xx: 0.0, pp: 0.0, xp: 0.0 };

    pub const fn new(xx: f64, pp: f64, xp: f64) -> Self {
        Self { xx, pp, xp }
    }

    pub const fn diag(xx: f64, pp: f64) -> Self {
        Self { xx, pp, xp: 0.0 }
    }

    pub const fn identity() -> Self {
        Self::diag(1.0, 1.0)
    }

    pub fn scaled_identity(s: f64) -> Self {
        Self::diag(s, s)
    }

    /// `c cᵀ` for a column vector `c = (cx, cp)`.
    pub fn outer(cx: f64, cp: f64) -> Self {
        Self { xx: cx * cx, pp: cp * cp, xp: cx * cp }
    }

    pub fn det(&self) -> f64 {
        self.xx * self.pp - self.xp * self.xp
    }

    pub fn trace(&self) -> f64 {
        self.xx + self.pp
    }

    /// Adjugate, so that `adj(σ)·σ = det(σ)·I`.
    pub fn adjugate(&self) -> Self {
        Self { xx: self.pp, pp: self.xx, xp: -self.xp }
    }

    /// `tr(self · other)` for two symmetric matrices.
    pub fn trace_product(&self, other: &Sym2) -> f64 {
        self.xx * other.xx + self.pp * other.pp + 2.0 * self.xp * other.xp
    }

    /// Quadratic form `vᵀ self v`.
    pub fn quad(&self, v: [f64; 2]) -> f64 {
        self.xx * v[0] * v[0] + 2.0 * self.xp * v[0] * v[1] + self.pp * v[1] * v[1]
    }

    pub fn scale(&self, s: f64) -> Self {
        Self { xx: self.xx * s, pp: self.pp * s, xp: self.xp * s }
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.xx.abs().max(self.pp.abs()).max(self.xp.abs())
    }

    pub fn is_finite(&self) -> bool {
        self.xx.is_finite() && self.pp.is_finite() && self.xp.is_finite()
    }

    /// `R(φ) σ R(φ)ᵀ` with `R` the counter-clockwise rotation by `φ`.
    pub fn rotated(&self, phi: f64) -> Self {
        let (s, c) = phi.sin_cos();
        let r = Mat2::new(c, -s, s, c);
        r.congruence(self)
    }

    pub fn as_vec3(&self) -> [f64; 3] {
        [self.xx, self.pp, self.xp]
    }

    pub fn from_vec3(v: [f64; 3]) -> Self {
        Self { xx: v[0], pp: v[1], xp: v[2] }
    }
}

impl Add for Sym2 {
    type Output = Sym2;
    fn add(self, o: Sym2) -> Sym2 {
        Sym2 { xx: self.xx + o.xx, pp: self.pp + o.pp, xp: self.xp + o.xp }
    }
}

impl AddAssign for Sym2 {
    fn add_assign(&mut self, o: Sym2) {
        *self = *self + o;
    }
}

impl Sub for Sym2 {
    type Output = Sym2;
    fn sub(self, o: Sym2) -> Sym2 {
        Sym2 { xx: self.xx - o.xx, pp: self.pp - o.pp, xp: self.xp - o.xp }
    }
}

impl Neg for Sym2 {
    type Output = Sym2;
    fn neg(self) -> Sym2 {
        self.scale(-1.0)
    }
}

impl Mul<Sym2> for f64 {
    type Output = Sym2;
    fn mul(self, s: Sym2) -> Sym2 {
        s.scale(self)
    }
}

/// General (not necessarily symmetric) 2×2 matrix `[[a, b], [c, d]]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Mat2 {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl Mat2 {
    pub const ZERO: Mat2 = Mat2 { a: 0.0, b: 0.0, c: 0.0, d: 0.0 };

    pub const fn new(a: f64, b: f64, c: f64, d: f64) -> Self {
        Self { a, b, c, d }
    }

    pub fn trace(&self) -> f64 {
        self.a + self.d
    }

    pub fn det(&self) -> f64 {
        self.a * self.d - self.b * self.c
    }

    pub fn apply(&self, v: [f64; 2]) -> [f64; 2] {
        [self.a * v[0] + self.b * v[1], self.c * v[0] + self.d * v[1]]
    }

    /// `M σ + σ Mᵀ`, the Lyapunov operator of a drift matrix `M`.
    pub fn lyapunov(&self, s: &Sym2) -> Sym2 {
        Sym2 {
            xx: 2.0 * (self.a * s.xx + self.b * s.xp),
            pp: 2.0 * (self.c * s.xp + self.d * s.pp),
            xp: self.c * s.xx + self.b * s.pp + (self.a + self.d) * s.xp,
        }
    }

    /// `M σ Mᵀ`.
    pub fn congruence(&self, s: &Sym2) -> Sym2 {
        // rows of M σ
        let r1 = [self.a * s.xx + self.b * s.xp, self.a * s.xp + self.b * s.pp];
        let r2 = [self.c * s.xx + self.d * s.xp, self.c * s.xp + self.d * s.pp];
        Sym2 {
            xx: r1[0] * self.a + r1[1] * self.b,
            pp: r2[0] * self.c + r2[1] * self.d,
            xp: r1[0] * self.c + r1[1] * self.d,
        }
    }

    /// Matrix of the Lyapunov operator acting on `(σ_xx, σ_pp, σ_xp)`.
    pub fn lyapunov_operator(&self) -> Mat3 {
        Mat3([
            [2.0 * self.a, 0.0, 2.0 * self.b],
            [0.0, 2.0 * self.d, 2.0 * self.c],
            [self.c, self.b, self.a + self.d],
        ])
    }
}

impl Add for Mat2 {
    type Output = Mat2;
    fn add(self, o: Mat2) -> Mat2 {
        Mat2::new(self.a + o.a, self.b + o.b, self.c + o.c, self.d + o.d)
    }
}

/// Dense 3×3 matrix, row major.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub fn apply(&self, v: [f64; 3]) -> [f64; 3] {
        let m = &self.0;
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }

    /// Solves `self · x = rhs` by Gaussian elimination with partial pivoting,
    /// followed by one step of iterative refinement. Returns `None` when the
    /// matrix is numerically singular.
    pub fn solve(&self, rhs: [f64; 3]) -> Option<[f64; 3]> {
        let x = self.solve_once(rhs)?;
        let r = self.apply(x);
        let resid = [rhs[0] - r[0], rhs[1] - r[1], rhs[2] - r[2]];
        let dx = self.solve_once(resid)?;
        Some([x[0] + dx[0], x[1] + dx[1], x[2] + dx[2]])
    }

    fn solve_once(&self, rhs: [f64; 3]) -> Option<[f64; 3]> {
        let mut m = self.0;
        let mut b = rhs;
        let scale = m
            .iter()
            .flat_map(|r| r.iter())
            .fold(0.0_f64, |acc, v| acc.max(v.abs()));
        if scale == 0.0 {
            return None;
        }
        for col in 0..3 {
            let pivot = (col..3)
                .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
                .unwrap();
            if m[pivot][col].abs() <= scale * 1e-15 {
                return None;
            }
            m.swap(col, pivot);
            b.swap(col, pivot);
            for row in col + 1..3 {
                let f = m[row][col] / m[col][col];
                for k in col..3 {
                    m[row][k] -= f * m[col][k];
                }
                b[row] -= f * b[col];
            }
        }
        let mut x = [0.0; 3];
        for row in (0..3).rev() {
            let mut acc = b[row];
            for k in row + 1..3 {
                acc -= m[row][k] * x[k];
            }
            x[row] = acc / m[row][row];
        }
        Some(x)
    }
}
