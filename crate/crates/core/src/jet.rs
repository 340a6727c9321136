//! Second-order forward-mode differentiation in two variables.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Value, gradient and Hessian of a scalar function of `(u1, u2)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Jet {
    pub v: f64,
    pub g: [f64; 2],
    pub h: [[f64; 2]; 2],
}

impl Jet {
    pub fn constant(v: f64) -> Self {
        Self {
            v,
            ..Default::default()
        }
    }

    /// The coordinate function `u_{axis}` at value `v`.
    pub fn var(v: f64, axis: usize) -> Self {
        let mut j = Self::constant(v);
        j.g[axis] = 1.0;
        j
    }

    /// `f(self)` given `f`, `f'` and `f''` at `self.v`.
    pub fn chain(self, f: f64, df: f64, ddf: f64) -> Self {
        let mut out = Self::constant(f);
        for a in 0..2 {
            out.g[a] = df * self.g[a];
            for b in 0..2 {
                out.h[a][b] = ddf * self.g[a] * self.g[b] + df * self.h[a][b];
            }
        }
        out
    }

    pub fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, 0.5 / s, -0.25 / (s * self.v))
    }

    pub fn recip(self) -> Self {
        let r = 1.0 / self.v;
        self.chain(r, -r * r, 2.0 * r * r * r)
    }

    pub fn scale(self, s: f64) -> Self {
        let mut out = self;
        out.v *= s;
        for a in 0..2 {
            out.g[a] *= s;
            for b in 0..2 {
                out.h[a][b] *= s;
            }
        }
        out
    }

    pub fn add_const(mut self, c: f64) -> Self {
        self.v += c;
        self
    }
}

impl Add for Jet {
    type Output = Jet;
    fn add(self, o: Jet) -> Jet {
        let mut out = self;
        out.v += o.v;
        for a in 0..2 {
            out.g[a] += o.g[a];
            for b in 0..2 {
                out.h[a][b] += o.h[a][b];
            }
        }
        out
    }
}

impl Neg for Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        self.scale(-1.0)
    }
}

impl Sub for Jet {
    type Output = Jet;
    fn sub(self, o: Jet) -> Jet {
        self + (-o)
    }
}

impl Mul for Jet {
    type Output = Jet;
    fn mul(self, o: Jet) -> Jet {
        let mut out = Jet::constant(self.v * o.v);
        for a in 0..2 {
            out.g[a] = self.g[a] * o.v + self.v * o.g[a];
            for b in 0..2 {
                out.h[a][b] = self.h[a][b] * o.v
                    + self.g[a] * o.g[b]
                    + self.g[b] * o.g[a]
                    + self.v * o.h[a][b];
            }
        }
        out
    }
}

impl Div for Jet {
    type Output = Jet;
    fn div(self, o: Jet) -> Jet {
        self * o.recip()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivatives_of_a_rational_expression() {
        // f = u1 * sqrt(u1^2 + u2^2) / u2
        let (x, y) = (1.3, 0.7);
        let f = |x: f64, y: f64| x * (x * x + y * y).sqrt() / y;
        let u1 = Jet::var(x, 0);
        let u2 = Jet::var(y, 1);
        let j = u1 * (u1 * u1 + u2 * u2).sqrt() / u2;
        assert!((j.v - f(x, y)).abs() < 1e-14);
        let d = 1e-5;
        let fx = (f(x + d, y) - f(x - d, y)) / (2.0 * d);
        let fy = (f(x, y + d) - f(x, y - d)) / (2.0 * d);
        assert!((j.g[0] - fx).abs() < 1e-8 && (j.g[1] - fy).abs() < 1e-8);
        let fxy = (f(x + d, y + d) - f(x + d, y - d) - f(x - d, y + d) + f(x - d, y - d)) / (4.0 * d * d);
        assert!((j.h[0][1] - fxy).abs() < 1e-4);
        assert_eq!(j.h[0][1], j.h[1][0]);
    }
}
