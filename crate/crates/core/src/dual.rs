//! Forward-mode dual numbers with a fixed-capacity tangent.
//!
//! `Dual<T, N>` carries a primal value and up to `N` directional derivatives.
//! Only the first `len` tangent slots are live, so short Jacobians stay cheap
//! even when the capacity is generous. The type implements [`Scalar`], which
//! lets every generic routine in the crate (kernels, dynamics, Cholesky, GP
//! conditioning) be differentiated without a second code path.

use std::cmp::Ordering;
use std::fmt;
use std::iter::Sum;
use std::num::FpCategory;
use std::ops::{
    Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Rem, RemAssign, Sub, SubAssign,
};

use num_traits::{Float, FromPrimitive, Num, NumCast, One, ToPrimitive, Zero};

use crate::scalar::Scalar;

/// Default tangent capacity used by the solvers.
pub const GRAD_CAPACITY: usize = 32;

/// Dual number with the crate's default tangent capacity.
pub type Grad<T> = Dual<T, GRAD_CAPACITY>;

#[derive(Clone, Copy)]
pub struct Dual<T: Scalar, const N: usize> {
    pub re: T,
    eps: [T; N],
    len: u8,
}

impl<T: Scalar, const N: usize> Dual<T, N> {
    /// A constant (all tangents zero).
    #[inline]
    pub fn constant(re: T) -> Self {
        Self { re, eps: [T::zero(); N], len: 0 }
    }

    /// Independent variable `index` among `count` seeded directions.
    ///
    /// Panics when `count` exceeds the capacity `N`.
    #[inline]
    pub fn variable(re: T, index: usize, count: usize) -> Self {
        assert!(count <= N && index < count, "dual capacity {N} exceeded ({count} directions)");
        let mut eps = [T::zero(); N];
        eps[index] = T::one();
        Self { re, eps, len: count as u8 }
    }

    /// Seed a slice of values as consecutive independent variables starting at `offset`.
    pub fn seed(values: &[T], offset: usize, count: usize) -> Vec<Self> {
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| Self::variable(v, offset + i, count))
            .collect()
    }

    /// Number of live tangent directions.
    #[inline]
    pub fn directions(&self) -> usize {
        self.len as usize
    }

    /// Derivative along direction `i` (zero beyond the live range).
    #[inline]
    pub fn d(&self, i: usize) -> T {
        if i < self.len as usize {
            self.eps[i]
        } else {
            T::zero()
        }
    }

    #[inline]
    fn chain(self, value: T, slope: T) -> Self {
        let mut eps = [T::zero(); N];
        for i in 0..self.len as usize {
            eps[i] = slope * self.eps[i];
        }
        Self { re: value, eps, len: self.len }
    }

    #[inline]
    fn combine(a: &Self, b: &Self, ca: T, cb: T, value: T) -> Self {
        let len = a.len.max(b.len);
        let mut eps = [T::zero(); N];
        for (i, e) in eps.iter_mut().enumerate().take(len as usize) {
            *e = ca * a.eps[i] + cb * b.eps[i];
        }
        Self { re: value, eps, len }
    }
}

impl<T: Scalar, const N: usize> Default for Dual<T, N> {
    fn default() -> Self {
        Self::constant(T::zero())
    }
}

impl<T: Scalar, const N: usize> fmt::Debug for Dual<T, N> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Dual({:?}; {:?})", self.re, &self.eps[..self.len as usize])
    }
}

impl<T: Scalar, const N: usize> fmt::Display for Dual<T, N> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.re)
    }
}

impl<T: Scalar, const N: usize> PartialEq for Dual<T, N> {
    fn eq(&self, other: &Self) -> bool {
        self.re == other.re
    }
}

impl<T: Scalar, const N: usize> PartialOrd for Dual<T, N> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        self.re.partial_cmp(&other.re)
    }
}

impl<T: Scalar, const N: usize> Add for Dual<T, N> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        Self::combine(&self, &rhs, T::one(), T::one(), self.re + rhs.re)
    }
}

impl<T: Scalar, const N: usize> Sub for Dual<T, N> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        Self::combine(&self, &rhs, T::one(), -T::one(), self.re - rhs.re)
    }
}

impl<T: Scalar, const N: usize> Mul for Dual<T, N> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        Self::combine(&self, &rhs, rhs.re, self.re, self.re * rhs.re)
    }
}

impl<T: Scalar, const N: usize> Div for Dual<T, N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let inv = T::one() / rhs.re;
        let value = self.re * inv;
        Self::combine(&self, &rhs, inv, -value * inv, value)
    }
}

impl<T: Scalar, const N: usize> Rem for Dual<T, N> {
    type Output = Self;
    fn rem(self, rhs: Self) -> Self {
        let q = (self.re / rhs.re).trunc();
        Self::combine(&self, &rhs, T::one(), -q, self.re % rhs.re)
    }
}

impl<T: Scalar, const N: usize> Neg for Dual<T, N> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        self.chain(-self.re, -T::one())
    }
}

macro_rules! assign_op {
    ($tr:ident, $m:ident, $op:tt) => {
        impl<T: Scalar, const N: usize> $tr for Dual<T, N> {
            #[inline]
            fn $m(&mut self, rhs: Self) {
                *self = *self $op rhs;
            }
        }
    };
}
assign_op!(AddAssign, add_assign, +);
assign_op!(SubAssign, sub_assign, -);
assign_op!(MulAssign, mul_assign, *);
assign_op!(DivAssign, div_assign, /);
assign_op!(RemAssign, rem_assign, %);

impl<T: Scalar, const N: usize> Sum for Dual<T, N> {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::zero(), |a, b| a + b)
    }
}

impl<T: Scalar, const N: usize> Zero for Dual<T, N> {
    fn zero() -> Self {
        Self::constant(T::zero())
    }
    fn is_zero(&self) -> bool {
        self.re.is_zero()
    }
}

impl<T: Scalar, const N: usize> One for Dual<T, N> {
    fn one() -> Self {
        Self::constant(T::one())
    }
}

impl<T: Scalar, const N: usize> Num for Dual<T, N> {
    type FromStrRadixErr = T::FromStrRadixErr;
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        T::from_str_radix(s, radix).map(Self::constant)
    }
}

impl<T: Scalar, const N: usize> ToPrimitive for Dual<T, N> {
    fn to_i64(&self) -> Option<i64> {
        self.re.to_i64()
    }
    fn to_u64(&self) -> Option<u64> {
        self.re.to_u64()
    }
    fn to_f64(&self) -> Option<f64> {
        self.re.to_f64()
    }
}

impl<T: Scalar, const N: usize> NumCast for Dual<T, N> {
    fn from<P: ToPrimitive>(n: P) -> Option<Self> {
        <T as NumCast>::from(n).map(Self::constant)
    }
}

impl<T: Scalar, const N: usize> FromPrimitive for Dual<T, N> {
    fn from_i64(n: i64) -> Option<Self> {
        T::from_i64(n).map(Self::constant)
    }
    fn from_u64(n: u64) -> Option<Self> {
        T::from_u64(n).map(Self::constant)
    }
    fn from_f64(n: f64) -> Option<Self> {
        T::from_f64(n).map(Self::constant)
    }
}

impl<T: Scalar, const N: usize> Float for Dual<T, N> {
    fn nan() -> Self {
        Self::constant(T::nan())
    }
    fn infinity() -> Self {
        Self::constant(T::infinity())
    }
    fn neg_infinity() -> Self {
        Self::constant(T::neg_infinity())
    }
    fn neg_zero() -> Self {
        Self::constant(T::neg_zero())
    }
    fn min_value() -> Self {
        Self::constant(T::min_value())
    }
    fn min_positive_value() -> Self {
        Self::constant(T::min_positive_value())
    }
    fn max_value() -> Self {
        Self::constant(T::max_value())
    }
    fn epsilon() -> Self {
        Self::constant(T::epsilon())
    }
    fn is_nan(self) -> bool {
        self.re.is_nan()
    }
    fn is_infinite(self) -> bool {
        self.re.is_infinite()
    }
    fn is_finite(self) -> bool {
        self.re.is_finite()
    }
    fn is_normal(self) -> bool {
        self.re.is_normal()
    }
    fn classify(self) -> FpCategory {
        self.re.classify()
    }
    fn floor(self) -> Self {
        Self::constant(self.re.floor())
    }
    fn ceil(self) -> Self {
        Self::constant(self.re.ceil())
    }
    fn round(self) -> Self {
        Self::constant(self.re.round())
    }
    fn trunc(self) -> Self {
        Self::constant(self.re.trunc())
    }
    fn fract(self) -> Self {
        self.chain(self.re.fract(), T::one())
    }
    fn abs(self) -> Self {
        if self.re < T::zero() {
            -self
        } else {
            self
        }
    }
    fn signum(self) -> Self {
        Self::constant(self.re.signum())
    }
    fn is_sign_positive(self) -> bool {
        self.re.is_sign_positive()
    }
    fn is_sign_negative(self) -> bool {
        self.re.is_sign_negative()
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        self * a + b
    }
    fn recip(self) -> Self {
        let r = self.re.recip();
        self.chain(r, -r * r)
    }
    fn powi(self, n: i32) -> Self {
        match n {
            0 => Self::one(),
            1 => self,
            2 => self * self,
            _ => {
                let p = self.re.powi(n - 1);
                self.chain(p * self.re, T::c(n as f64) * p)
            }
        }
    }
    fn powf(self, n: Self) -> Self {
        if n.len == 0 {
            let p = self.re.powf(n.re);
            let slope = if self.re == T::zero() {
                T::zero()
            } else {
                n.re * p / self.re
            };
            self.chain(p, slope)
        } else {
            (n * self.ln()).exp()
        }
    }
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        let slope = if s > T::zero() { T::c(0.5) / s } else { T::zero() };
        self.chain(s, slope)
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        self.chain(e, e)
    }
    fn exp2(self) -> Self {
        let e = self.re.exp2();
        self.chain(e, e * T::c(std::f64::consts::LN_2))
    }
    fn ln(self) -> Self {
        self.chain(self.re.ln(), self.re.recip())
    }
    fn log(self, base: Self) -> Self {
        self.ln() / base.ln()
    }
    fn log2(self) -> Self {
        self.chain(self.re.log2(), (self.re * T::c(std::f64::consts::LN_2)).recip())
    }
    fn log10(self) -> Self {
        self.chain(self.re.log10(), (self.re * T::c(std::f64::consts::LN_10)).recip())
    }
    fn max(self, other: Self) -> Self {
        if other.re > self.re || self.re.is_nan() {
            other
        } else {
            self
        }
    }
    fn min(self, other: Self) -> Self {
        if other.re < self.re || self.re.is_nan() {
            other
        } else {
            self
        }
    }
    #[allow(deprecated)]
    fn abs_sub(self, other: Self) -> Self {
        if self.re > other.re {
            self - other
        } else {
            Self::zero()
        }
    }
    fn cbrt(self) -> Self {
        let c = self.re.cbrt();
        let slope = if c == T::zero() { T::zero() } else { (T::c(3.0) * c * c).recip() };
        self.chain(c, slope)
    }
    fn hypot(self, other: Self) -> Self {
        (self * self + other * other).sqrt()
    }
    fn sin(self) -> Self {
        self.chain(self.re.sin(), self.re.cos())
    }
    fn cos(self) -> Self {
        self.chain(self.re.cos(), -self.re.sin())
    }
    fn tan(self) -> Self {
        let t = self.re.tan();
        self.chain(t, T::one() + t * t)
    }
    fn asin(self) -> Self {
        self.chain(self.re.asin(), (T::one() - self.re * self.re).sqrt().recip())
    }
    fn acos(self) -> Self {
        self.chain(self.re.acos(), -(T::one() - self.re * self.re).sqrt().recip())
    }
    fn atan(self) -> Self {
        self.chain(self.re.atan(), (T::one() + self.re * self.re).recip())
    }
    fn atan2(self, other: Self) -> Self {
        let r2 = self.re * self.re + other.re * other.re;
        Self::combine(&self, &other, other.re / r2, -self.re / r2, self.re.atan2(other.re))
    }
    fn sin_cos(self) -> (Self, Self) {
        (self.sin(), self.cos())
    }
    fn exp_m1(self) -> Self {
        self.chain(self.re.exp_m1(), self.re.exp())
    }
    fn ln_1p(self) -> Self {
        self.chain(self.re.ln_1p(), (T::one() + self.re).recip())
    }
    fn sinh(self) -> Self {
        self.chain(self.re.sinh(), self.re.cosh())
    }
    fn cosh(self) -> Self {
        self.chain(self.re.cosh(), self.re.sinh())
    }
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        self.chain(t, T::one() - t * t)
    }
    fn asinh(self) -> Self {
        self.chain(self.re.asinh(), (self.re * self.re + T::one()).sqrt().recip())
    }
    fn acosh(self) -> Self {
        self.chain(self.re.acosh(), (self.re * self.re - T::one()).sqrt().recip())
    }
    fn atanh(self) -> Self {
        self.chain(self.re.atanh(), (T::one() - self.re * self.re).recip())
    }
    fn integer_decode(self) -> (u64, i16, i8) {
        self.re.integer_decode()
    }
}

impl<T: Scalar, const N: usize> Scalar for Dual<T, N> {}

#[cfg(test)]
mod tests {
    use super::*;

    type D = Dual<f64, 4>;

    fn fd(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6 * x.abs().max(1.0);
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn elementary_derivatives_match_finite_differences() {
        let x0 = 0.7;
        let cases: Vec<(Box<dyn Fn(D) -> D>, Box<dyn Fn(f64) -> f64>)> = vec![
            (Box::new(|x: D| x.exp() * x.sin()), Box::new(|x: f64| x.exp() * x.sin())),
            (Box::new(|x: D| (x * x + D::c(1.0)).sqrt()), Box::new(|x: f64| (x * x + 1.0).sqrt())),
            (Box::new(|x: D| x.ln() / (D::c(2.0) + x)), Box::new(|x: f64| x.ln() / (2.0 + x))),
            (Box::new(|x: D| x.powi(5) - x.powf(D::c(1.5))), Box::new(|x: f64| x.powi(5) - x.powf(1.5))),
            (Box::new(|x: D| x.tanh() + x.atan() + x.cbrt()), Box::new(|x: f64| x.tanh() + x.atan() + x.cbrt())),
            (Box::new(|x: D| x.recip() - x.ln_1p() + x.exp_m1()), Box::new(|x: f64| 1.0 / x - x.ln_1p() + x.exp_m1())),
        ];
        for (g, f) in cases {
            let y = g(D::variable(x0, 0, 1));
            assert!((y.re - f(x0)).abs() < 1e-14);
            assert!((y.d(0) - fd(&f, x0)).abs() < 1e-7, "{} vs {}", y.d(0), fd(&f, x0));
        }
    }

    #[test]
    fn multivariate_gradient() {
        let v = D::seed(&[1.5, -0.5, 2.0], 0, 3);
        let f = v[0] * v[1] + (v[2] / v[0]).exp();
        let e = (2.0f64 / 1.5).exp();
        assert!((f.d(0) - (-0.5 - 2.0 / 2.25 * e)).abs() < 1e-12);
        assert!((f.d(1) - 1.5).abs() < 1e-12);
        assert!((f.d(2) - e / 1.5).abs() < 1e-12);
        assert_eq!(f.d(3), 0.0);
    }

    #[test]
    fn constants_have_no_tangent() {
        let c = D::c(3.0);
        assert_eq!(c.directions(), 0);
        let x = D::variable(2.0, 1, 2);
        let y = c * x + c;
        assert_eq!(y.d(0), 0.0);
        assert_eq!(y.d(1), 3.0);
    }
}
