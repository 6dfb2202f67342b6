//! Second-order forward-mode numbers: value, gradient and Hessian in `N` seeds.

use std::ops::{Add, Div, Mul, Neg, Sub};

pub trait Number:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    fn constant(v: f64) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
}

impl Number for f64 {
    fn constant(v: f64) -> Self {
        v
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet<const N: usize> {
    pub v: f64,
    pub g: [f64; N],
    pub h: [[f64; N]; N],
}

impl<const N: usize> Jet<N> {
    pub fn var(i: usize, v: f64) -> Self {
        let mut j = Self::constant(v);
        j.g[i] = 1.0;
        j
    }

    fn chain(self, f: f64, df: f64, d2f: f64) -> Self {
        let mut out = Self::constant(f);
        for i in 0..N {
            out.g[i] = df * self.g[i];
            for k in 0..N {
                out.h[i][k] = df * self.h[i][k] + d2f * self.g[i] * self.g[k];
            }
        }
        out
    }

    pub fn recip(self) -> Self {
        let x = self.v;
        self.chain(1.0 / x, -1.0 / (x * x), 2.0 / (x * x * x))
    }
}

impl<const N: usize> Number for Jet<N> {
    fn constant(v: f64) -> Self {
        Self {
            v,
            g: [0.0; N],
            h: [[0.0; N]; N],
        }
    }
    fn sin(self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(s, c, -s)
    }
    fn cos(self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(c, -s, -c)
    }
}

impl<const N: usize> Add for Jet<N> {
    type Output = Self;
    fn add(mut self, o: Self) -> Self {
        self.v += o.v;
        for i in 0..N {
            self.g[i] += o.g[i];
            for k in 0..N {
                self.h[i][k] += o.h[i][k];
            }
        }
        self
    }
}

impl<const N: usize> Neg for Jet<N> {
    type Output = Self;
    fn neg(mut self) -> Self {
        self.v = -self.v;
        for i in 0..N {
            self.g[i] = -self.g[i];
            for k in 0..N {
                self.h[i][k] = -self.h[i][k];
            }
        }
        self
    }
}

impl<const N: usize> Sub for Jet<N> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        self + (-o)
    }
}

impl<const N: usize> Mul for Jet<N> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let mut out = Self::constant(self.v * o.v);
        for i in 0..N {
            out.g[i] = self.v * o.g[i] + o.v * self.g[i];
            for k in 0..N {
                out.h[i][k] = self.v * o.h[i][k] + o.v * self.h[i][k] + self.g[i] * o.g[k] + o.g[i] * self.g[k];
            }
        }
        out
    }
}

impl<const N: usize> Div for Jet<N> {
    type Output = Self;
    #[allow(clippy::suspicious_arithmetic_impl)]
    fn div(self, o: Self) -> Self {
        self * o.recip()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quotient_of_trig() {
        // f(x, y) = sin(x) / (1 + y cos x)
        let (x0, y0) = (0.7, 0.3);
        let f = |x: Jet<2>, y: Jet<2>| x.sin() / (Jet::constant(1.0) + y * x.cos());
        let j = f(Jet::var(0, x0), Jet::var(1, y0));
        let e = |x: f64, y: f64| x.sin() / (1.0 + y * x.cos());
        let h = 1e-4;
        assert!((j.v - e(x0, y0)).abs() < 1e-15);
        assert!((j.g[0] - (e(x0 + h, y0) - e(x0 - h, y0)) / (2.0 * h)).abs() < 1e-7);
        let fxy = (e(x0 + h, y0 + h) - e(x0 + h, y0 - h) - e(x0 - h, y0 + h) + e(x0 - h, y0 - h)) / (4.0 * h * h);
        assert!((j.h[0][1] - fxy).abs() < 1e-6);
        assert!((j.h[0][1] - j.h[1][0]).abs() < 1e-15);
        let fxx = (e(x0 + h, y0) - 2.0 * e(x0, y0) + e(x0 - h, y0)) / (h * h);
        assert!((j.h[0][0] - fxx).abs() < 1e-5);
    }
}
