//! Graf-Yafaev partition functions.
//!
//! For a quadrant point `x = (y, u1, u2)` and parameters `e = (e0..e3)` the
//! four candidates are
//!
//! ```text
//!   e0,  (1 + e1) u1,  (1 + e2) u2,  (1 + e3) |u|
//! ```
//!
//! and `g^(i)(x, e)` is candidate `i` where it strictly dominates the other
//! three. Off the quadrant the undefined end coordinates are set to 0: on the
//! half-cylinder `Z_k x R+` only `e0` and `(1 + e_k) u_k` compete, and on `X0`
//! only `g^(0) = e0` is nonzero. This keeps `g` continuous across regions.
//!
//! Two averaged versions are provided. The discrete one integrates the raw
//! pieces against the product of per-variable Gauss-Legendre measures; the
//! pieces then sum to the averaged maximum exactly and are piecewise linear in
//! `u`. The smooth one integrates the piece's own parameter by panel
//! quadrature against the exact cumulative profiles `Phi_j` of the others; it
//! is `C^inf` and carries gradients and Hessians.

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CornerModel, RegionTag};
use crate::jet::Jet;

/// Gauss-Legendre nodes and weights on `[-1, 1]` (Golub-Welsch).
pub fn gauss_legendre(q: usize) -> (Vec<f64>, Vec<f64>) {
    let mut t = DMatrix::<f64>::zeros(q, q);
    for k in 1..q {
        let b = k as f64 / ((4 * k * k - 1) as f64).sqrt();
        t[(k - 1, k)] = b;
        t[(k, k - 1)] = b;
    }
    let eig = nalgebra::SymmetricEigen::new(t);
    let mut pairs: Vec<(f64, f64)> = (0..q)
        .map(|i| (eig.eigenvalues[i], 2.0 * eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Symmetrise to remove eigen-solver asymmetry.
    let mut x: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let mut w: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    for i in 0..q / 2 {
        let j = q - 1 - i;
        let xm = 0.5 * (x[j] - x[i]);
        let wm = 0.5 * (w[i] + w[j]);
        x[i] = -xm;
        x[j] = xm;
        w[i] = wm;
        w[j] = wm;
    }
    if q % 2 == 1 {
        x[q / 2] = 0.0;
    }
    (x, w)
}

fn raw_bump(s: f64) -> f64 {
    if s.abs() >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - s * s)).exp()
    }
}

/// Normalised mollifier `exp(-1/(1-s^2))` on `[lo, hi]` with a tabulated
/// cumulative integral.
#[derive(Debug, Clone)]
pub struct Bump {
    pub lo: f64,
    pub hi: f64,
    norm: f64,
    table_x: Vec<f64>,
    table_cdf: Vec<f64>,
    table_phi: Vec<f64>,
    table_dphi: Vec<f64>,
}

const CDF_TABLE: usize = 2048;

/// Gauss-Legendre nodes per panel of the smooth outer integrals.
const PANEL_NODES: usize = 40;

impl Bump {
    pub fn new(lo: f64, hi: f64) -> Self {
        let half = 0.5 * (hi - lo);
        let (gx, gw) = gauss_legendre(8);
        let step = (hi - lo) / CDF_TABLE as f64;
        let mut table_x = Vec::with_capacity(CDF_TABLE + 1);
        let mut table_cdf = Vec::with_capacity(CDF_TABLE + 1);
        let mut acc = 0.0;
        table_x.push(lo);
        table_cdf.push(0.0);
        for k in 0..CDF_TABLE {
            let a = lo + k as f64 * step;
            for (x, w) in gx.iter().zip(&gw) {
                let e = a + 0.5 * step * (x + 1.0);
                acc += 0.5 * step * w * raw_bump((e - lo) / half - 1.0);
            }
            table_x.push(a + step);
            table_cdf.push(acc);
        }
        let norm = acc;
        for c in &mut table_cdf {
            *c /= norm;
        }
        let mut b = Self {
            lo,
            hi,
            norm,
            table_x,
            table_cdf,
            table_phi: Vec::new(),
            table_dphi: Vec::new(),
        };
        b.table_phi = b.table_x.iter().map(|&x| b.phi(x)).collect();
        b.table_dphi = b.table_x.iter().map(|&x| b.dphi(x)).collect();
        b
    }

    fn s(&self, e: f64) -> f64 {
        (2.0 * e - self.lo - self.hi) / (self.hi - self.lo)
    }

    /// Density `phi(e)`.
    pub fn phi(&self, e: f64) -> f64 {
        raw_bump(self.s(e)) / self.norm
    }

    pub fn lo_hi(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn dphi(&self, e: f64) -> f64 {
        self.phi_pair(e).1
    }

    /// `(phi(e), phi'(e))` with one exponential.
    pub fn phi_pair(&self, e: f64) -> (f64, f64) {
        let s = self.s(e);
        if s.abs() >= 1.0 {
            return (0.0, 0.0);
        }
        let ds = 2.0 / (self.hi - self.lo);
        let p = raw_bump(s) / self.norm;
        (p, p * (-2.0 * s / (1.0 - s * s).powi(2)) * ds)
    }

    /// Cumulative `Phi(v) = int_lo^v phi`, by quintic Hermite interpolation
    /// of the table using `phi` and `phi'`.
    pub fn cdf(&self, v: f64) -> f64 {
        if v <= self.lo {
            return 0.0;
        }
        if v >= self.hi {
            return 1.0;
        }
        let step = (self.hi - self.lo) / CDF_TABLE as f64;
        let k = (((v - self.lo) / step) as usize).min(CDF_TABLE - 1);
        let (x0, x1) = (self.table_x[k], self.table_x[k + 1]);
        let hh = x1 - x0;
        let t = (v - x0) / hh;
        let (p0, p1) = (self.table_cdf[k], self.table_cdf[k + 1]);
        let (d0, d1) = (self.table_phi[k] * hh, self.table_phi[k + 1] * hh);
        let (s0, s1) = (self.table_dphi[k] * hh * hh, self.table_dphi[k + 1] * hh * hh);
        let t2 = t * t;
        let t3 = t2 * t;
        let t4 = t3 * t;
        let t5 = t4 * t;
        let h00 = 1.0 - 10.0 * t3 + 15.0 * t4 - 6.0 * t5;
        let h10 = t - 6.0 * t3 + 8.0 * t4 - 3.0 * t5;
        let h20 = 0.5 * t2 - 1.5 * t3 + 1.5 * t4 - 0.5 * t5;
        let h01 = 10.0 * t3 - 15.0 * t4 + 6.0 * t5;
        let h11 = -4.0 * t3 + 7.0 * t4 - 3.0 * t5;
        let h21 = 0.5 * t3 - t4 + 0.5 * t5;
        h00 * p0 + h10 * d0 + h20 * s0 + h01 * p1 + h11 * d1 + h21 * s1
    }

    /// `Phi` composed with a jet.
    pub fn cdf_jet(&self, j: Jet) -> Jet {
        if j.v <= self.lo {
            return Jet::constant(0.0);
        }
        if j.v >= self.hi {
            return Jet::constant(1.0);
        }
        let (p, dp) = self.phi_pair(j.v);
        j.chain(self.cdf(j.v), p, dp)
    }
}

/// Parameters of the partition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct YafaevConfig {
    pub epsilon: f64,
    /// Supports `[lo, hi]` of the profiles for `e0, e1, e2, e3`.
    pub supports: [(f64, f64); 4],
    /// Quadrature nodes per parameter.
    pub q: usize,
    /// Time-scaling exponent.
    pub delta: f64,
}

impl Default for YafaevConfig {
    fn default() -> Self {
        Self::with_epsilon(0.1)
    }
}

impl YafaevConfig {
    /// `e0` on `[2, 2.4]`, `e1, e2` on `[2 eps, 3 eps]`, `e3` on
    /// `[2 eps^2, 3 eps^2]`, 16 nodes, `delta = 0.6`.
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self {
            epsilon,
            supports: [
                (2.0, 2.4),
                (2.0 * epsilon, 3.0 * epsilon),
                (2.0 * epsilon, 3.0 * epsilon),
                (2.0 * epsilon * epsilon, 3.0 * epsilon * epsilon),
            ],
            q: 16,
            delta: 0.6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.q < 4 {
            return Err(Error::QuadratureTooSmall(self.q));
        }
        let e = self.epsilon;
        if !(e > 0.0 && e < 0.25) {
            return Err(Error::InvalidParameter(format!("epsilon {e} outside (0, 0.25)")));
        }
        if !(self.delta > 1.0 / 3.0 && self.delta < 1.0) {
            return Err(Error::InvalidParameter(format!("delta {} outside (1/3, 1)", self.delta)));
        }
        let tol = 1e-12;
        let allowed = [
            (2.0, 3.0),
            (2.0 * e, 3.0 * e),
            (2.0 * e, 3.0 * e),
            (2.0 * e * e, 3.0 * e * e),
        ];
        for (i, ((lo, hi), (alo, ahi))) in self.supports.iter().zip(allowed).enumerate() {
            if !(lo < hi) || *lo < alo - tol || *hi > ahi + tol {
                return Err(Error::InvalidParameter(format!(
                    "support of e{i} [{lo}, {hi}] not inside [{alo}, {ahi}]"
                )));
            }
        }
        Ok(())
    }
}

/// A point of `X` in the coordinates the partition depends on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Point {
    Compact,
    Cylinder { k: u8, u: f64 },
    Quadrant { u1: f64, u2: f64 },
}

impl Point {
    pub fn from_tag(model: &CornerModel, tag: RegionTag) -> Self {
        match tag {
            RegionTag::X0 { .. } => Point::Compact,
            RegionTag::Cyl1 { i1, .. } => Point::Cylinder { k: 1, u: model.u(i1) },
            RegionTag::Cyl2 { i2, .. } => Point::Cylinder { k: 2, u: model.u(i2) },
            RegionTag::Quadrant { i1, i2, .. } => Point::Quadrant {
                u1: model.u(i1),
                u2: model.u(i2),
            },
        }
    }

    pub fn scaled(self, s: f64) -> Self {
        match self {
            Point::Compact => Point::Compact,
            Point::Cylinder { k, u } => Point::Cylinder { k, u: u * s },
            Point::Quadrant { u1, u2 } => Point::Quadrant { u1: u1 * s, u2: u2 * s },
        }
    }

    /// `(u1, u2)` with undefined coordinates as 0.
    pub fn coords(self) -> [f64; 2] {
        match self {
            Point::Compact => [0.0, 0.0],
            Point::Cylinder { k: 1, u } => [u, 0.0],
            Point::Cylinder { u, .. } => [0.0, u],
            Point::Quadrant { u1, u2 } => [u1, u2],
        }
    }
}

/// Membership of `x` in `X_1(eps)` and `X_2(eps)`.
pub fn cone_membership(x: Point, eps: f64) -> [bool; 2] {
    match x {
        Point::Compact => [false, false],
        Point::Cylinder { k, .. } => [k == 1, k == 2],
        Point::Quadrant { u1, u2 } => {
            let n = u1.hypot(u2);
            [u1 > (1.0 - eps) * n, u2 > (1.0 - eps) * n]
        }
    }
}

/// The un-averaged piece `g^(i)(x, e)`. Off the quadrant the undefined end
/// coordinates are 0, so on `X0` only `e0` competes and on `Cyl_k` only `e0`
/// and `(1 + e_k) u_k` can win.
pub fn g_raw(x: Point, e: [f64; 4], i: usize) -> f64 {
    let [u1, u2] = x.coords();
    let c = [e[0], (1.0 + e[1]) * u1, (1.0 + e[2]) * u2, (1.0 + e[3]) * u1.hypot(u2)];
    if (0..4).all(|j| j == i || c[i] > c[j]) {
        c[i]
    } else {
        0.0
    }
}

/// One averaging variable: atoms and masses of its discrete measure.
#[derive(Debug, Clone)]
struct Measure {
    atoms: Vec<f64>,
    masses: Vec<f64>,
}

impl Measure {
    /// `P(e < v)`; sets `tie` when `v` is within rounding of an atom.
    fn below(&self, v: f64, tie: &mut bool) -> f64 {
        let mut p = 0.0;
        for (a, m) in self.atoms.iter().zip(&self.masses) {
            if (a - v).abs() <= 1e-12 * v.abs().max(1.0) {
                *tie = true;
            }
            if *a < v {
                p += m;
            }
        }
        p
    }
}

/// Derived partition data.
#[derive(Debug)]
pub struct Yafaev {
    pub config: YafaevConfig,
    bumps: [Bump; 4],
    measures: [Measure; 4],
    /// `mu_k = E[1 + e_k]` under the discrete measure, `k = 1, 2, 3`.
    pub mu: [f64; 4],
    /// `E[e0]`: the plateau value `g(y, 0, 0)`.
    pub g_origin: f64,
    pub r2: f64,
    panel_rule: (Vec<f64>, Vec<f64>),
    ties: AtomicUsize,
}

impl Clone for Yafaev {
    fn clone(&self) -> Self {
        Self {
            config: self.config,
            bumps: self.bumps.clone(),
            measures: self.measures.clone(),
            mu: self.mu,
            g_origin: self.g_origin,
            r2: self.r2,
            panel_rule: self.panel_rule.clone(),
            ties: AtomicUsize::new(self.ties.load(Ordering::Relaxed)),
        }
    }
}

/// Components, total, gradient and Hessian at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldValue {
    /// Discrete averages `g^(0..3)`.
    pub components: [f64; 4],
    /// Layer-cake evaluation of the averaged maximum.
    pub total: f64,
    /// Smooth `g` with its derivatives.
    pub smooth: Jet,
}

impl Yafaev {
    pub fn new(config: YafaevConfig) -> Result<Self> {
        config.validate()?;
        let bumps = config.supports.map(|(lo, hi)| Bump::new(lo, hi));
        let (gx, gw) = gauss_legendre(config.q);
        let measures = bumps.clone().map(|b| {
            let half = 0.5 * (b.hi - b.lo);
            let atoms: Vec<f64> = gx.iter().map(|x| b.lo + half * (x + 1.0)).collect();
            let raw: Vec<f64> = atoms.iter().zip(&gw).map(|(a, w)| w * half * b.phi(*a)).collect();
            let s: f64 = raw.iter().sum();
            Measure {
                atoms,
                masses: raw.iter().map(|m| m / s).collect(),
            }
        });
        let mean = |m: &Measure| m.atoms.iter().zip(&m.masses).map(|(a, w)| a * w).sum::<f64>();
        let g_origin = mean(&measures[0]);
        let mu = [g_origin, 1.0 + mean(&measures[1]), 1.0 + mean(&measures[2]), 1.0 + mean(&measures[3])];
        let mut y = Self {
            config,
            bumps,
            measures,
            mu,
            g_origin,
            r2: 0.0,
            panel_rule: gauss_legendre(PANEL_NODES),
            ties: AtomicUsize::new(0),
        };
        y.r2 = y.compute_r2();
        Ok(y)
    }

    pub fn bump(&self, i: usize) -> &Bump {
        &self.bumps[i]
    }

    /// Mass of the discrete measure of `e_i` (sums to 1).
    pub fn quadrature_mass(&self, i: usize) -> f64 {
        self.measures[i].masses.iter().sum()
    }

    /// Number of evaluations that landed on a tie and were nudged.
    pub fn tie_events(&self) -> usize {
        self.ties.load(Ordering::Relaxed)
    }

    /// Smallest radius beyond which the e0 branch cannot win along the axes
    /// (homogeneity) and `g >= 1` on sampled half-cylinder points.
    fn compute_r2(&self) -> f64 {
        let s = &self.config.supports;
        let r_hom = s[0].1 / (1.0 + s[1].0.min(s[2].0));
        // Scan for the lower-bound radius on a 0.01 grid.
        let mut r_low: f64 = 0.0;
        for k in (0..=1000).rev() {
            let u = k as f64 * 0.01;
            let below = [1u8, 2].iter().any(|&c| self.components(Point::Cylinder { k: c, u }).iter().sum::<f64>() < 1.0);
            if below {
                r_low = u + 0.01;
                break;
            }
        }
        r_hom.max(r_low)
    }

    fn quadrant_components(&self, u1: f64, u2: f64, tie: &mut bool) -> [f64; 4] {
        let n = u1.hypot(u2);
        let m = &self.measures;
        let ratio = |a: f64, b: f64| if b > 0.0 { a / b - 1.0 } else { f64::INFINITY };
        let mut g = [0.0; 4];
        for (e, w) in m[0].atoms.iter().zip(&m[0].masses) {
            g[0] += w * e * m[1].below(ratio(*e, u1), tie) * m[2].below(ratio(*e, u2), tie) * m[3].below(ratio(*e, n), tie);
        }
        for (e, w) in m[1].atoms.iter().zip(&m[1].masses) {
            let a = (1.0 + e) * u1;
            if a > 0.0 {
                g[1] += w * a * m[0].below(a, tie) * m[2].below(ratio(a, u2), tie) * m[3].below(ratio(a, n), tie);
            }
        }
        for (e, w) in m[2].atoms.iter().zip(&m[2].masses) {
            let a = (1.0 + e) * u2;
            if a > 0.0 {
                g[2] += w * a * m[0].below(a, tie) * m[1].below(ratio(a, u1), tie) * m[3].below(ratio(a, n), tie);
            }
        }
        for (e, w) in m[3].atoms.iter().zip(&m[3].masses) {
            let a = (1.0 + e) * n;
            if a > 0.0 {
                g[3] += w * a * m[0].below(a, tie) * m[1].below(ratio(a, u1), tie) * m[2].below(ratio(a, u2), tie);
            }
        }
        g
    }

    /// Discrete averages `g^(0..3)(x)`.
    pub fn components(&self, x: Point) -> [f64; 4] {
        let [u1, u2] = x.coords();
        let mut tie = false;
        let g = self.quadrant_components(u1, u2, &mut tie);
        if tie {
            self.ties.fetch_add(1, Ordering::Relaxed);
            let nudge = |u: f64| if u > 0.0 { u.next_up() } else { u };
            let mut tie2 = false;
            return self.quadrant_components(nudge(u1), nudge(u2), &mut tie2);
        }
        g
    }

    /// Averaged `g` by an independent route: the layer-cake integral
    /// `int_0^inf (1 - prod_i F_i(s)) ds` of the averaged maximum.
    pub fn total(&self, x: Point) -> f64 {
        let m = &self.measures;
        let [u1, u2] = x.coords();
        let n = u1.hypot(u2);
        let scale = [1.0, u1, u2, n];
        let mut events: Vec<(f64, usize, f64)> = Vec::with_capacity(64);
        for i in 0..4 {
            for (e, w) in m[i].atoms.iter().zip(&m[i].masses) {
                let a = if i == 0 { *e } else { (1.0 + e) * scale[i] };
                events.push((a, i, *w));
            }
        }
        events.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut f = [0.0f64; 4];
        let mut prev = 0.0;
        let mut acc = 0.0;
        for (s, i, w) in events {
            let prod: f64 = f.iter().product();
            acc += (s - prev) * (1.0 - prod);
            prev = s;
            f[i] += w;
        }
        acc
    }

    /// `int phi_i(e) f(e) de` by composite Gauss-Legendre, with panels split
    /// where `f` changes regime. The split points are rule choices only;
    /// derivatives are taken at fixed nodes.
    fn outer(&self, i: usize, breaks: &mut Vec<f64>, f: impl Fn(f64) -> Jet) -> Jet {
        let b = &self.bumps[i];
        breaks.retain(|e| e.is_finite() && *e > b.lo && *e < b.hi);
        breaks.push(b.lo);
        breaks.push(b.hi);
        breaks.sort_by(f64::total_cmp);
        breaks.dedup_by(|a, c| (*a - *c).abs() < 1e-14);
        let (gx, gw) = &self.panel_rule;
        let mut acc = Jet::default();
        let mut mass = 0.0;
        for p in breaks.windows(2) {
            let half = 0.5 * (p[1] - p[0]);
            for (x, w) in gx.iter().zip(gw) {
                let e = p[0] + half * (x + 1.0);
                let m = w * half * b.phi(e);
                mass += m;
                acc = acc + f(e).scale(m);
            }
        }
        // Renormalise so that constants integrate exactly.
        acc.scale(1.0 / mass)
    }

    /// Values of the integration variable of piece `own` where
    /// `Phi_j((1 + e) d / d_j - 1)` (or `Phi_0((1 + e) d)`) switches on or
    /// off; for `own = 0` the candidate is `e` itself.
    fn regime_breaks(&self, own: usize, d: [f64; 4]) -> Vec<f64> {
        let mut out = Vec::with_capacity(6);
        for j in 0..4 {
            if j == own {
                continue;
            }
            let (lo, hi) = self.bumps[j].lo_hi();
            for edge in [lo, hi] {
                // Value of the own candidate at which competitor j sits on `edge`.
                let cand = if j == 0 { edge } else { d[j] * (1.0 + edge) };
                let e = if own == 0 { cand } else { cand / d[own] - 1.0 };
                out.push(e);
            }
        }
        out
    }

    /// Smooth pieces `g^(0..3)` with derivatives in the defined end
    /// coordinates.
    pub fn smooth_components(&self, x: Point) -> [Jet; 4] {
        let zero = Jet::default();
        let (j1, j2) = match x {
            Point::Compact => (zero, zero),
            Point::Cylinder { k: 1, u } => (Jet::var(u, 0), zero),
            Point::Cylinder { u, .. } => (zero, Jet::var(u, 1)),
            Point::Quadrant { u1, u2 } => (Jet::var(u1, 0), Jet::var(u2, 1)),
        };
        let b = &self.bumps;
        let n = if j1.v == 0.0 {
            j2
        } else if j2.v == 0.0 {
            j1
        } else {
            (j1 * j1 + j2 * j2).sqrt()
        };
        let one = Jet::constant(1.0);
        // Phi_i(a / d - 1), equal to 1 when d = 0.
        let ratio_cdf = |i: usize, a: Jet, d: Jet| {
            if d.v <= 0.0 {
                one
            } else {
                b[i].cdf_jet((a / d).add_const(-1.0))
            }
        };
        let d = [1.0, j1.v, j2.v, n.v];
        let mut out = [zero; 4];
        out[0] = self.outer(0, &mut self.regime_breaks(0, d), |e| {
            let a = Jet::constant(e);
            a * ratio_cdf(1, a, j1) * ratio_cdf(2, a, j2) * ratio_cdf(3, a, n)
        });
        if j1.v > 0.0 {
            out[1] = self.outer(1, &mut self.regime_breaks(1, d), |e| {
                let a = j1.scale(1.0 + e);
                a * b[0].cdf_jet(a) * ratio_cdf(2, a, j2) * ratio_cdf(3, a, n)
            });
        }
        if j2.v > 0.0 {
            out[2] = self.outer(2, &mut self.regime_breaks(2, d), |e| {
                let a = j2.scale(1.0 + e);
                a * b[0].cdf_jet(a) * ratio_cdf(1, a, j1) * ratio_cdf(3, a, n)
            });
        }
        if n.v > 0.0 {
            out[3] = self.outer(3, &mut self.regime_breaks(3, d), |e| {
                let a = n.scale(1.0 + e);
                a * b[0].cdf_jet(a) * ratio_cdf(1, a, j1) * ratio_cdf(2, a, j2)
            });
        }
        out
    }

    pub fn smooth(&self, x: Point) -> Jet {
        let c = self.smooth_components(x);
        c[0] + c[1] + c[2] + c[3]
    }

    pub fn field(&self, x: Point) -> FieldValue {
        FieldValue {
            components: self.components(x),
            total: self.total(x),
            smooth: self.smooth(x),
        }
    }

    /// Scaled smooth function `g_t(x) = t^delta g(x / t^delta)` (or of one
    /// piece when `piece` is given) with space and time derivatives.
    pub fn scaled(&self, x: Point, t: f64, piece: Option<usize>) -> Result<ScaledValue> {
        if !(t >= 1.0) {
            return Err(Error::TimeBelowOne(t));
        }
        Ok(self.scaled_unchecked(x, t, piece))
    }

    fn scaled_unchecked(&self, x: Point, t: f64, piece: Option<usize>) -> ScaledValue {
        let d = self.config.delta;
        let s = t.powf(d);
        let s1 = d * t.powf(d - 1.0);
        let s2 = d * (d - 1.0) * t.powf(d - 2.0);
        let y = x.scaled(1.0 / s);
        let gj = match piece {
            Some(i) => self.smooth_components(y)[i],
            None => self.smooth(y),
        };
        let yc = y.coords();
        let ydg = yc[0] * gj.g[0] + yc[1] * gj.g[1];
        let yhy: f64 = (0..2).map(|a| (0..2).map(|b| yc[a] * gj.h[a][b] * yc[b]).sum::<f64>()).sum();
        ScaledValue {
            value: s * gj.v,
            grad: gj.g,
            hess: [
                [gj.h[0][0] / s, gj.h[0][1] / s],
                [gj.h[1][0] / s, gj.h[1][1] / s],
            ],
            dt: s1 * (gj.v - ydg),
            dtt: s2 * (gj.v - ydg) + s1 * s1 / s * yhy,
        }
    }

    /// Scaled field on every site of `model`.
    pub fn scaled_field(&self, model: &CornerModel, t: f64, piece: Option<usize>) -> Result<ScaledField> {
        if !(t >= 1.0) {
            return Err(Error::TimeBelowOne(t));
        }
        let tags: Vec<RegionTag> = model.tags().collect();
        let vals: Vec<ScaledValue> = tags
            .par_iter()
            .map(|&tag| self.scaled_unchecked(Point::from_tag(model, tag), t, piece))
            .collect();
        Ok(ScaledField { t, values: vals })
    }

    /// Unscaled smooth field on every site.
    pub fn unscaled_field(&self, model: &CornerModel, piece: Option<usize>) -> Vec<f64> {
        let tags: Vec<RegionTag> = model.tags().collect();
        tags.par_iter()
            .map(|&tag| {
                let p = Point::from_tag(model, tag);
                match piece {
                    Some(i) => self.smooth_components(p)[i].v,
                    None => self.smooth(p).v,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ScaledValue {
    pub value: f64,
    pub grad: [f64; 2],
    pub hess: [[f64; 2]; 2],
    pub dt: f64,
    pub dtt: f64,
}

#[derive(Debug, Clone)]
pub struct ScaledField {
    pub t: f64,
    pub values: Vec<ScaledValue>,
}

impl ScaledField {
    pub fn value(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.value).collect()
    }

    pub fn dt(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.dt).collect()
    }
}

/// Smallest eigenvalue of a symmetric 2x2 matrix.
pub fn min_eig2(m: [[f64; 2]; 2]) -> f64 {
    let tr = m[0][0] + m[1][1];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
    0.5 * tr - disc
}

/// Symmetric square root of a positive semidefinite 2x2 matrix; negative
/// eigenvalues (rounding) are clipped to zero.
pub fn sqrt_psd2(m: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let a = m[0][0];
    let b = 0.5 * (m[0][1] + m[1][0]);
    let c = m[1][1];
    let tr = a + c;
    let disc = (0.25 * (a - c).powi(2) + b * b).sqrt();
    let l1 = (0.5 * tr + disc).max(0.0);
    let l2 = (0.5 * tr - disc).max(0.0);
    // Eigenvector of l1.
    let (vx, vy) = if b.abs() > 1e-300 {
        (l1 - c, b)
    } else if a >= c {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    let nrm = vx.hypot(vy);
    let (vx, vy) = (vx / nrm, vy / nrm);
    let (s1, s2) = (l1.sqrt(), l2.sqrt());
    [
        [s1 * vx * vx + s2 * vy * vy, (s1 - s2) * vx * vy],
        [(s1 - s2) * vx * vy, s1 * vy * vy + s2 * vx * vx],
    ]
}

/// Smallest `c` on `[0, c_max]` with `c g'' - (g^(i))'' >= -tol (c |g''| +
/// |(g^(i))''|)` at every sample, or `None` if even `c_max` fails.
pub fn hessian_domination(
    yaf: &Yafaev,
    piece: usize,
    samples: &[Point],
    c_max: f64,
    tol: f64,
) -> Option<f64> {
    let pairs: Vec<([[f64; 2]; 2], [[f64; 2]; 2])> = samples
        .iter()
        .map(|&p| (yaf.smooth(p).h, yaf.smooth_components(p)[piece].h))
        .collect();
    let norm = |m: &[[f64; 2]; 2]| m.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
    let ok = |c: f64| {
        pairs.iter().all(|(h, k)| {
            let m = [
                [c * h[0][0] - k[0][0], c * h[0][1] - k[0][1]],
                [c * h[1][0] - k[1][0], c * h[1][1] - k[1][1]],
            ];
            min_eig2(m) >= -tol * (c * norm(h) + norm(k))
        })
    };
    if !ok(c_max) {
        return None;
    }
    if ok(0.0) {
        return Some(0.0);
    }
    let (mut lo, mut hi) = (0.0, c_max);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}

/// Worst violations found by [`audit`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub samples: usize,
    /// `max |g - sum g^(i)|` (discrete) over the samples.
    pub partition: f64,
    /// `max |g_discrete - g_smooth| / g`.
    pub smooth_vs_discrete: f64,
    /// Count of `g^(j) != 0` on `X_i(eps)`, `j != i`, `i, j in {1, 2}`.
    pub support_exclusion: usize,
    /// `max |dg/du_j|` on `X_i(eps) ∩ {u_i > 2}`, `j != i`.
    pub locality: f64,
    /// `max |g(t x) - t g(x)| / (t g(x))` for `max u >= R2`, `t in {1, 2, 5}`.
    pub homogeneity: f64,
    /// `max (g(r'x' + r''x'') - r'g(x') - r''g(x''))`.
    pub convexity: f64,
    /// `min` of the smallest Hessian eigenvalue of the smooth total.
    pub hessian_min: f64,
    /// `min g` over sampled points with `r > R2`.
    pub lower_bound: f64,
    /// `max |g1 - mu1 u1|` on `X_1(eps) ∩ {u1 > 2}`.
    pub linear_first_cone: f64,
    /// `max |grad g_analytic - grad g_fd| / max(|grad g|, 1)`, step `1e-4`.
    pub gradient_fd: f64,
    pub tie_events: usize,
}

impl Yafaev {
    /// Sampled audits of the partition on the quadrant `[0, extent]^2` and
    /// on the half-cylinders.
    pub fn audit(&self, samples: usize, extent: f64, seed: u64) -> AuditReport {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let eps = self.config.epsilon;
        let mut rep = AuditReport {
            samples,
            hessian_min: f64::INFINITY,
            lower_bound: f64::INFINITY,
            ..Default::default()
        };
        let ties0 = self.tie_events();
        let fd = 1e-4;
        for _ in 0..samples {
            let u1 = rng.gen::<f64>() * extent;
            let u2 = rng.gen::<f64>() * extent;
            let x = Point::Quadrant { u1, u2 };
            let c = self.components(x);
            let g = self.total(x);
            rep.partition = rep.partition.max((g - c.iter().sum::<f64>()).abs());
            let sm = self.smooth(x);
            rep.smooth_vs_discrete = rep.smooth_vs_discrete.max((sm.v - g).abs() / g);
            rep.hessian_min = rep.hessian_min.min(min_eig2(sm.h));
            let cone = cone_membership(x, eps);
            for i in 0..2 {
                if cone[i] {
                    let j = 1 - i;
                    if c[j + 1] != 0.0 {
                        rep.support_exclusion += 1;
                    }
                    if [u1, u2][i] > 2.0 {
                        rep.locality = rep.locality.max(sm.g[j].abs());
                    }
                }
            }
            if cone[0] && u1 > 2.0 {
                rep.linear_first_cone = rep.linear_first_cone.max((c[1] - self.mu[1] * u1).abs());
            }
            if u1.max(u2) >= self.r2 {
                for t in [1.0, 2.0, 5.0] {
                    let gt = self.total(x.scaled(t));
                    rep.homogeneity = rep.homogeneity.max((gt - t * g).abs() / (t * g));
                }
            }
            if u1.hypot(u2) > self.r2 {
                rep.lower_bound = rep.lower_bound.min(g);
            }
            // Convexity along a segment to a second random point.
            let x2 = Point::Quadrant {
                u1: rng.gen::<f64>() * extent,
                u2: rng.gen::<f64>() * extent,
            };
            let r: f64 = rng.gen();
            let [a1, a2] = x2.coords();
            let mid = Point::Quadrant {
                u1: r * u1 + (1.0 - r) * a1,
                u2: r * u2 + (1.0 - r) * a2,
            };
            let gap = self.total(mid) - r * g - (1.0 - r) * self.total(x2);
            rep.convexity = rep.convexity.max(gap);
            // Finite-difference gradient check.
            let f = |a: f64, b: f64| self.smooth(Point::Quadrant { u1: a, u2: b }).v;
            if u1 > fd && u2 > fd {
                let gx = (f(u1 + fd, u2) - f(u1 - fd, u2)) / (2.0 * fd);
                let gy = (f(u1, u2 + fd) - f(u1, u2 - fd)) / (2.0 * fd);
                let err = (sm.g[0] - gx).hypot(sm.g[1] - gy) / sm.g[0].hypot(sm.g[1]).max(1.0);
                rep.gradient_fd = rep.gradient_fd.max(err);
            }
            // Half-cylinder samples.
            for k in [1u8, 2] {
                let u = rng.gen::<f64>() * extent;
                let p = Point::Cylinder { k, u };
                let c = self.components(p);
                let g = self.total(p);
                rep.partition = rep.partition.max((g - c.iter().sum::<f64>()).abs());
                if u >= self.r2 {
                    rep.lower_bound = rep.lower_bound.min(g);
                    for t in [2.0, 5.0] {
                        let gt = self.total(p.scaled(t));
                        rep.homogeneity = rep.homogeneity.max((gt - t * g).abs() / (t * g));
                    }
                }
            }
        }
        rep.tie_events = self.tie_events() - ties0;
        rep
    }

    /// Plateau and far-field checks of `g_t` at time `t`: returns
    /// `(max |grad g_t|` for `|u| < 2 t^delta / (1 + e1_max)`,
    /// `max |g_t - g|` for `|u| > 3 t^delta)`.
    pub fn plateau_audit(&self, t: f64, samples: usize, seed: u64) -> Result<(f64, f64)> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let s = t.powf(self.config.delta);
        let inner = 2.0 * s / (1.0 + self.config.supports[1].1.max(self.config.supports[2].1));
        let (mut flat, mut far) = (0.0f64, 0.0f64);
        for _ in 0..samples {
            let th = rng.gen::<f64>() * std::f64::consts::FRAC_PI_2;
            let r_in = rng.gen::<f64>() * inner;
            let v = self.scaled(Point::Quadrant { u1: r_in * th.cos(), u2: r_in * th.sin() }, t, None)?;
            flat = flat.max(v.grad[0].hypot(v.grad[1]));
            let r_out = 3.0 * s * (1.0 + 4.0 * rng.gen::<f64>());
            let x = Point::Quadrant { u1: r_out * th.cos(), u2: r_out * th.sin() };
            let v = self.scaled(x, t, None)?;
            far = far.max((v.value - self.smooth(x).v).abs());
        }
        Ok((flat, far))
    }

    /// Sup-norms of derivatives of `g_t` over the quadrant `[0, 10 t^delta]^2`
    /// sampled on a grid in scaled coordinates. Spatial derivatives carry the
    /// weight `kappa(u1) kappa(u2)`.
    pub fn derivative_sups(&self, t: f64, grid: usize) -> Result<DerivativeSups> {
        let s = t.powf(self.config.delta);
        let mut out = DerivativeSups { t, ..Default::default() };
        for a in 0..=grid {
            for b in 0..=grid {
                let y1 = 10.0 * a as f64 / grid as f64;
                let y2 = 10.0 * b as f64 / grid as f64;
                let x = Point::Quadrant { u1: y1 * s, u2: y2 * s };
                let v = self.scaled(x, t, None)?;
                let w = crate::assembly::kappa(y1 * s) * crate::assembly::kappa(y2 * s);
                out.grad = out.grad.max(w * v.grad[0].abs().max(v.grad[1].abs()));
                let hm = v.hess.iter().flatten().fold(0.0f64, |m, h| m.max(h.abs()));
                out.hess = out.hess.max(w * hm);
                out.dt = out.dt.max(v.dt.abs());
                out.dtt = out.dtt.max(v.dtt.abs());
            }
        }
        Ok(out)
    }

    /// Log-log slopes of [`Self::derivative_sups`] over `times`.
    pub fn derivative_exponents(&self, times: &[f64], grid: usize) -> Result<DerivativeExponents> {
        let sups = times
            .iter()
            .map(|&t| self.derivative_sups(t, grid))
            .collect::<Result<Vec<_>>>()?;
        let fit = |f: &dyn Fn(&DerivativeSups) -> f64, t_min: f64| {
            let pts: Vec<(f64, f64)> = sups
                .iter()
                .filter(|s| s.t >= t_min)
                .map(|s| (s.t.ln(), f(s).ln()))
                .collect();
            if pts.len() < 2 {
                f64::NAN
            } else {
                loglog_slope(&pts)
            }
        };
        Ok(DerivativeExponents {
            grad: fit(&|s| s.grad, 0.0),
            hess: fit(&|s| s.hess, 0.0),
            hess_tail: fit(&|s| s.hess, HESS_TAIL_START),
            dt: fit(&|s| s.dt, 0.0),
            dtt: fit(&|s| s.dtt, 0.0),
            expected: [0.0, -self.config.delta, self.config.delta - 1.0, self.config.delta - 2.0],
            sups,
        })
    }

    /// Field over every site of `model` at `t = 1` (unscaled).
    pub fn model_field(&self, model: &CornerModel) -> YafaevField {
        let tags: Vec<RegionTag> = model.tags().collect();
        let sites: Vec<FieldSite> = tags
            .par_iter()
            .map(|&tag| {
                let p = Point::from_tag(model, tag);
                let sm = self.smooth(p);
                FieldSite {
                    region: tag,
                    coords: p.coords(),
                    components: self.components(p),
                    total: self.total(p),
                    grad: sm.g,
                    hess: sm.h,
                }
            })
            .collect();
        YafaevField { t: 1.0, sites }
    }
}

/// Start of the tail fit for the Hessian exponent.
pub const HESS_TAIL_START: f64 = 10.0;

/// Least-squares slope of `(x, y)` pairs.
pub fn loglog_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DerivativeSups {
    pub t: f64,
    pub grad: f64,
    pub hess: f64,
    pub dt: f64,
    pub dtt: f64,
}

/// Fitted exponents for `|k| = 1, 2` and `l = 1, 2`, with the predicted
/// values `0, -delta, delta - 1, delta - 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivativeExponents {
    pub grad: f64,
    pub hess: f64,
    /// Hessian exponent fitted on `t >= HESS_TAIL_START` only, where the
    /// cutoff weight no longer hides the plateau edge.
    pub hess_tail: f64,
    pub dt: f64,
    pub dtt: f64,
    pub expected: [f64; 4],
    pub sups: Vec<DerivativeSups>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSite {
    pub region: RegionTag,
    pub coords: [f64; 2],
    pub components: [f64; 4],
    pub total: f64,
    pub grad: [f64; 2],
    pub hess: [[f64; 2]; 2],
}

/// Per-site values of the partition.
#[derive(Debug, Clone)]
pub struct YafaevField {
    pub t: f64,
    pub sites: Vec<FieldSite>,
}

impl YafaevField {
    /// `max |g - sum g^(i)|` over all sites.
    pub fn partition_defect(&self) -> f64 {
        self.sites
            .iter()
            .map(|s| (s.total - s.components.iter().sum::<f64>()).abs())
            .fold(0.0, f64::max)
    }

    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "site,region,u1,u2,g0,g1,g2,g3,g,h11,h12,h22")?;
        for (i, s) in self.sites.iter().enumerate() {
            let region = match s.region {
                RegionTag::X0 { .. } => "X0",
                RegionTag::Cyl1 { .. } => "Cyl1",
                RegionTag::Cyl2 { .. } => "Cyl2",
                RegionTag::Quadrant { .. } => "Quadrant",
            };
            let c = s.components;
            writeln!(
                w,
                "{i},{region},{},{},{},{},{},{},{},{},{},{}",
                s.coords[0], s.coords[1], c[0], c[1], c[2], c[3], s.total, s.hess[0][0], s.hess[0][1], s.hess[1][1]
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn yaf() -> Yafaev {
        Yafaev::new(YafaevConfig::default()).unwrap()
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(6);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(10)).sum();
        assert!((s - 2.0 / 11.0).abs() < 1e-14);
    }

    #[test]
    fn bump_normalisation_and_cdf() {
        let y = yaf();
        for i in 0..4 {
            assert!((y.quadrature_mass(i) - 1.0).abs() < 1e-12);
            let b = y.bump(i);
            assert_eq!(b.cdf(b.lo), 0.0);
            assert_eq!(b.cdf(b.hi), 1.0);
            let mid = 0.5 * (b.lo + b.hi);
            assert!((b.cdf(mid) - 0.5).abs() < 1e-12);
            let d = 1e-4 * (b.hi - b.lo);
            let v = b.lo + 0.3 * (b.hi - b.lo);
            let fd = (b.cdf(v + d) - b.cdf(v - d)) / (2.0 * d);
            assert!((fd - b.phi(v)).abs() < 1e-6 * b.phi(v).max(1.0));
        }
    }

    #[test]
    fn rejects_small_quadrature() {
        let mut c = YafaevConfig::default();
        c.q = 2;
        assert!(matches!(Yafaev::new(c), Err(Error::QuadratureTooSmall(2))));
    }

    #[test]
    fn raw_examples() {
        let x = Point::Quadrant { u1: 10.0, u2: 1.0 };
        let e = [2.5, 0.25, 0.25, 0.025];
        assert_eq!(g_raw(x, e, 1), 12.5);
        assert_eq!(g_raw(x, e, 2), 0.0);
        assert!(cone_membership(x, 0.1)[0]);
        assert!(cone_membership(Point::Cylinder { k: 1, u: 0.5 }, 0.1)[0]);
    }

    #[test]
    fn raw_pieces_sum_to_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2000 {
            let u1 = rng.gen::<f64>() * 20.0;
            let u2 = rng.gen::<f64>() * 20.0;
            let e = [
                2.0 + rng.gen::<f64>(),
                0.2 + 0.1 * rng.gen::<f64>(),
                0.2 + 0.1 * rng.gen::<f64>(),
                0.02 + 0.01 * rng.gen::<f64>(),
            ];
            let x = Point::Quadrant { u1, u2 };
            let want = e[0]
                .max((1.0 + e[1]) * u1)
                .max((1.0 + e[2]) * u2)
                .max((1.0 + e[3]) * u1.hypot(u2));
            let s: f64 = (0..4).map(|i| g_raw(x, e, i)).sum();
            assert!((s - want).abs() < 1e-12);
        }
    }

    #[test]
    fn partition_and_routes_agree() {
        let y = yaf();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let x = Point::Quadrant {
                u1: rng.gen::<f64>() * 15.0,
                u2: rng.gen::<f64>() * 15.0,
            };
            let c = y.components(x);
            let t = y.total(x);
            assert!((c.iter().sum::<f64>() - t).abs() < 1e-10 * t.max(1.0));
            let sm = y.smooth(x).v;
            // Discrete 16-node measure against the continuous profiles.
            assert!((sm - t).abs() < 5e-4 * t, "{sm} {t}");
        }
    }

    #[test]
    fn linear_on_first_cone() {
        let y = yaf();
        for &(u1, u2) in &[(2.01, 0.3), (5.0, 1.0), (40.0, 3.0)] {
            let x = Point::Quadrant { u1, u2 };
            assert!(cone_membership(x, 0.1)[0]);
            let g1 = y.components(x)[1];
            assert!((g1 - y.mu[1] * u1).abs() < 1e-10 * u1);
            let s = y.smooth_components(x)[1];
            assert!((s.g[0] - y.mu[1]).abs() < 1e-9 && s.g[1].abs() < 1e-12);
        }
    }

    #[test]
    fn origin_plateau() {
        let y = yaf();
        let f = y.smooth(Point::Quadrant { u1: 0.3, u2: 0.4 });
        assert!((f.v - y.g_origin).abs() < 1e-9);
        assert_eq!(f.g, [0.0, 0.0]);
    }

    #[test]
    fn analytic_gradient_matches_differences() {
        let y = yaf();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 1e-4;
        for _ in 0..100 {
            let (u1, u2) = (0.5 + rng.gen::<f64>() * 10.0, 0.5 + rng.gen::<f64>() * 10.0);
            let j = y.smooth(Point::Quadrant { u1, u2 });
            let f = |a: f64, b: f64| y.smooth(Point::Quadrant { u1: a, u2: b }).v;
            let gx = (f(u1 + d, u2) - f(u1 - d, u2)) / (2.0 * d);
            let gy = (f(u1, u2 + d) - f(u1, u2 - d)) / (2.0 * d);
            let norm = j.g[0].hypot(j.g[1]).max(1.0);
            let err = (j.g[0] - gx).hypot(j.g[1] - gy) / norm;
            assert!(err < 1e-5, "({u1}, {u2}) err {err}");
        }
    }

    #[test]
    fn scaled_matches_unscaled_far_out() {
        let y = yaf();
        let t: f64 = 20.0;
        let s = t.powf(y.config.delta);
        let x = Point::Quadrant { u1: 4.0 * s, u2: 3.5 * s };
        let v = y.scaled(x, t, None).unwrap();
        assert!((v.value - y.smooth(x).v).abs() < 1e-9 * v.value);
        assert!(y.scaled(x, 0.5, None).is_err());
    }

    #[test]
    fn time_derivatives_match_differences() {
        let y = yaf();
        let x = Point::Quadrant { u1: 4.0, u2: 2.5 };
        let t = 3.0;
        let dt = 1e-4;
        let f = |t: f64| y.scaled(x, t, None).unwrap().value;
        let v = y.scaled(x, t, None).unwrap();
        assert!((v.dt - (f(t + dt) - f(t - dt)) / (2.0 * dt)).abs() < 1e-6);
        assert!((v.dtt - (f(t + dt) - 2.0 * f(t) + f(t - dt)) / (dt * dt)).abs() < 1e-4);
    }

    #[test]
    fn sqrt_psd_squares_back() {
        let m = [[2.0, 0.7], [0.7, 0.5]];
        let r = sqrt_psd2(m);
        for a in 0..2 {
            for b in 0..2 {
                let v: f64 = (0..2).map(|k| r[a][k] * r[k][b]).sum();
                assert!((v - m[a][b]).abs() < 1e-14);
            }
        }
        assert!(min_eig2([[1.0, 0.0], [0.0, -2.0]]) == -2.0);
    }

    #[test]
    fn audit_is_clean() {
        let y = yaf();
        let r = y.audit(300, 12.0, 1);
        assert!(r.partition < 1e-10, "{r:?}");
        assert_eq!(r.support_exclusion, 0);
        assert!(r.locality < 1e-12, "{r:?}");
        assert!(r.homogeneity < 1e-10, "{r:?}");
        assert!(r.convexity < 1e-10, "{r:?}");
        assert!(r.lower_bound >= 1.0);
        assert!(r.linear_first_cone < 1e-10 * 12.0);
        assert!(r.gradient_fd < 1e-5, "{r:?}");
    }

    #[test]
    fn plateau_and_far_field() {
        let y = yaf();
        let (flat, far) = y.plateau_audit(50.0, 200, 2).unwrap();
        assert_eq!(flat, 0.0);
        assert!(far < 1e-9, "{far}");
    }

    #[test]
    fn gradient_exponent_is_zero() {
        let y = yaf();
        let e = y.derivative_exponents(&[1.0, 10.0, 100.0, 1000.0], 40).unwrap();
        assert!(e.grad.abs() < 0.05, "{e:?}");
        assert!((e.dt - e.expected[2]).abs() < 0.05, "{e:?}");
    }

    #[test]
    fn hessian_domination_is_monotone() {
        let y = yaf();
        let pts: Vec<Point> = (1..20)
            .flat_map(|a| (1..20).map(move |b| Point::Quadrant { u1: 0.4 * a as f64, u2: 0.4 * b as f64 }))
            .collect();
        let c = hessian_domination(&y, 3, &pts, 1e8, 1e-8).expect("finite scale");
        assert!(hessian_domination(&y, 3, &pts, 2.0 * c.max(1.0), 1e-8).is_some());
    }

    #[test]
    fn r2_value() {
        let y = yaf();
        assert!(y.r2 >= 2.0 && y.r2 < 2.05, "{}", y.r2);
    }
}
