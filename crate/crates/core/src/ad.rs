//! Forward-mode algorithmic differentiation with hyper-dual numbers.
//!
//! A hyper-dual number `a + b e1 + c e2 + d e1 e2` (with `e1^2 = e2^2 = 0`)
//! carries a value, two independent directional derivatives and the mixed
//! second derivative. Seeding `e1` along input `i` and `e2` along input `j`
//! yields `df/dx_i` in `b` and `d2f/dx_i dx_j` in `d`, exact to rounding.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Arithmetic needed to evaluate the vehicle model generically.
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn constant(v: f64) -> Self;
    fn value(&self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tan(self) -> Self;

    fn scale(self, k: f64) -> Self {
        self * Self::constant(k)
    }
}

impl Scalar for f64 {
    fn constant(v: f64) -> Self {
        v
    }
    fn value(&self) -> f64 {
        *self
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn tan(self) -> Self {
        f64::tan(self)
    }
    fn scale(self, k: f64) -> Self {
        self * k
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HyperDual {
    pub re: f64,
    pub e1: f64,
    pub e2: f64,
    pub e12: f64,
}

impl HyperDual {
    pub fn new(re: f64, e1: f64, e2: f64, e12: f64) -> Self {
        Self { re, e1, e2, e12 }
    }

    /// Apply a scalar function given its value and first two derivatives at `re`.
    fn chain(self, f0: f64, f1: f64, f2: f64) -> Self {
        Self {
            re: f0,
            e1: f1 * self.e1,
            e2: f1 * self.e2,
            e12: f1 * self.e12 + f2 * self.e1 * self.e2,
        }
    }
}

impl Add for HyperDual {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(
            self.re + o.re,
            self.e1 + o.e1,
            self.e2 + o.e2,
            self.e12 + o.e12,
        )
    }
}

impl Sub for HyperDual {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(
            self.re - o.re,
            self.e1 - o.e1,
            self.e2 - o.e2,
            self.e12 - o.e12,
        )
    }
}

impl Mul for HyperDual {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self::new(
            self.re * o.re,
            self.re * o.e1 + self.e1 * o.re,
            self.re * o.e2 + self.e2 * o.re,
            self.re * o.e12 + self.e1 * o.e2 + self.e2 * o.e1 + self.e12 * o.re,
        )
    }
}

impl Div for HyperDual {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.re;
        let recip = o.chain(inv, -inv * inv, 2.0 * inv * inv * inv);
        self * recip
    }
}

impl Neg for HyperDual {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.re, -self.e1, -self.e2, -self.e12)
    }
}

impl Scalar for HyperDual {
    fn constant(v: f64) -> Self {
        Self::new(v, 0.0, 0.0, 0.0)
    }
    fn value(&self) -> f64 {
        self.re
    }
    fn sin(self) -> Self {
        let (s, c) = self.re.sin_cos();
        self.chain(s, c, -s)
    }
    fn cos(self) -> Self {
        let (s, c) = self.re.sin_cos();
        self.chain(c, -s, -c)
    }
    fn tan(self) -> Self {
        let t = self.re.tan();
        let sec2 = 1.0 + t * t;
        self.chain(t, sec2, 2.0 * t * sec2)
    }
    fn scale(self, k: f64) -> Self {
        Self::new(self.re * k, self.e1 * k, self.e2 * k, self.e12 * k)
    }
}
