//! Fixed-size forward-mode dual numbers.
//!
//! Carries a value together with its gradient against `N` seed directions.
//! The residual algebra of the physics loss is evaluated on these, which
//! yields exact derivatives of each residual with respect to the network
//! outputs in a single pass. Only the operations that algebra needs are
//! defined; anything else fails to compile rather than silently dropping
//! derivative terms.

use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual<const N: usize> {
    pub v: f64,
    pub d: [f64; N],
}

impl<const N: usize> Dual<N> {
    pub fn constant(v: f64) -> Self {
        Self { v, d: [0.0; N] }
    }

    /// Variable seeded along direction `k`.
    pub fn seed(v: f64, k: usize) -> Self {
        let mut d = [0.0; N];
        d[k] = 1.0;
        Self { v, d }
    }

    pub fn sqrt(self) -> Self {
        // Guarded at zero so clamped denominators do not poison gradients.
        let r = self.v.max(0.0).sqrt();
        let slope = if r > 0.0 { 0.5 / r } else { 0.0 };
        let mut d = [0.0; N];
        for i in 0..N {
            d[i] = self.d[i] * slope;
        }
        Self { v: r, d }
    }

    pub fn powi(self, n: i32) -> Self {
        let slope = n as f64 * self.v.powi(n - 1);
        let mut d = [0.0; N];
        for i in 0..N {
            d[i] = self.d[i] * slope;
        }
        Self { v: self.v.powi(n), d }
    }

    pub fn max_const(self, floor: f64) -> Self {
        if self.v >= floor {
            self
        } else {
            Self::constant(floor)
        }
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        let mut d = self.d;
        for i in 0..N {
            d[i] += rhs.d[i];
        }
        Self { v: self.v + rhs.v, d }
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        let mut d = self.d;
        for i in 0..N {
            d[i] -= rhs.d[i];
        }
        Self { v: self.v - rhs.v, d }
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        let mut d = [0.0; N];
        for i in 0..N {
            d[i] = self.d[i] * rhs.v + self.v * rhs.d[i];
        }
        Self { v: self.v * rhs.v, d }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let inv = 1.0 / rhs.v;
        let v = self.v * inv;
        let mut d = [0.0; N];
        for i in 0..N {
            d[i] = (self.d[i] - v * rhs.d[i]) * inv;
        }
        Self { v, d }
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;
    fn neg(self) -> Self {
        let mut d = self.d;
        for x in &mut d {
            *x = -*x;
        }
        Self { v: -self.v, d }
    }
}

impl<const N: usize> Add<f64> for Dual<N> {
    type Output = Self;
    fn add(self, rhs: f64) -> Self {
        Self { v: self.v + rhs, d: self.d }
    }
}

impl<const N: usize> Sub<f64> for Dual<N> {
    type Output = Self;
    fn sub(self, rhs: f64) -> Self {
        Self { v: self.v - rhs, d: self.d }
    }
}

impl<const N: usize> Mul<f64> for Dual<N> {
    type Output = Self;
    fn mul(self, rhs: f64) -> Self {
        let mut d = self.d;
        for x in &mut d {
            *x *= rhs;
        }
        Self { v: self.v * rhs, d }
    }
}

impl<const N: usize> Div<f64> for Dual<N> {
    type Output = Self;
    fn div(self, rhs: f64) -> Self {
        self * (1.0 / rhs)
    }
}

impl<const N: usize> Add<Dual<N>> for f64 {
    type Output = Dual<N>;
    fn add(self, rhs: Dual<N>) -> Dual<N> {
        rhs + self
    }
}

impl<const N: usize> Sub<Dual<N>> for f64 {
    type Output = Dual<N>;
    fn sub(self, rhs: Dual<N>) -> Dual<N> {
        -rhs + self
    }
}

impl<const N: usize> Mul<Dual<N>> for f64 {
    type Output = Dual<N>;
    fn mul(self, rhs: Dual<N>) -> Dual<N> {
        rhs * self
    }
}

impl<const N: usize> Div<Dual<N>> for f64 {
    type Output = Dual<N>;
    fn div(self, rhs: Dual<N>) -> Dual<N> {
        Dual::constant(self) / rhs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn arithmetic_matches_finite_differences() {
        let f = |x: f64, y: f64| (x * y + 3.0) / (x - y).sqrt() - y / x;
        let g = |x: Dual<2>, y: Dual<2>| (x * y + 3.0) / (x - y).sqrt() - y / x;
        let (x0, y0) = (2.3, 0.7);
        let out = g(Dual::seed(x0, 0), Dual::seed(y0, 1));
        let h = 1e-6;
        let dx = (f(x0 + h, y0) - f(x0 - h, y0)) / (2.0 * h);
        let dy = (f(x0, y0 + h) - f(x0, y0 - h)) / (2.0 * h);
        assert_relative_eq!(out.v, f(x0, y0), max_relative = 1e-12);
        assert_relative_eq!(out.d[0], dx, max_relative = 1e-7);
        assert_relative_eq!(out.d[1], dy, max_relative = 1e-7);
    }

    #[test]
    fn sqrt_guard_zeroes_gradient_at_clamp() {
        let x: Dual<1> = Dual::seed(-1.0, 0);
        let r = x.sqrt();
        assert_eq!(r.v, 0.0);
        assert_eq!(r.d[0], 0.0);
    }
}
