//! Time evolution and Heisenberg observables.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::assembly::{assemble_b, assemble_cross_section, channel_length, channel_sites, forward_difference};
use crate::error::{Error, Result};
use crate::geometry::CornerModel;
use crate::linalg::{caxpy, cdiff_norm, cdot, cnorm, conjugate_gradient, dense_eigh, CVec, EigenPairs, DENSE_LIMIT};
use crate::sparse::SparseHermitian;
use crate::spectral::classify_bound;
use crate::yafaev::{loglog_slope, sqrt_psd2, Yafaev};

const I: Complex64 = Complex64::new(0.0, 1.0);

/// A state with cached norms.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    pub amps: CVec,
    pub norm: f64,
    /// `(|psi|^2 + <H psi, psi>)^(1/2)`, clipped at 0 inside the root.
    pub energy_norm: f64,
    pub channel: Option<u8>,
}

impl StateVector {
    pub fn new(amps: CVec, h: &SparseHermitian, channel: Option<u8>) -> Result<Self> {
        if amps.len() != h.dim() {
            return Err(Error::InvalidParameter(format!(
                "state of length {} for operator of dimension {}",
                amps.len(),
                h.dim()
            )));
        }
        if amps.iter().any(|a| !a.re.is_finite() || !a.im.is_finite()) {
            return Err(Error::InvalidParameter("state has non-finite entries".into()));
        }
        let norm = cnorm(&amps);
        let energy_norm = energy_norm(h, &amps);
        Ok(Self {
            amps,
            norm,
            energy_norm,
            channel,
        })
    }

    pub fn normalized(mut self, h: &SparseHermitian) -> Result<Self> {
        if self.norm == 0.0 {
            return Err(Error::InvalidParameter("cannot normalise the zero state".into()));
        }
        let s = 1.0 / self.norm;
        self.amps.iter_mut().for_each(|a| *a *= s);
        Self::new(self.amps, h, self.channel)
    }
}

pub fn energy_norm(h: &SparseHermitian, psi: &[Complex64]) -> f64 {
    let n2 = cdot(psi, psi).re;
    (n2 + h.expectation(psi)).max(0.0).sqrt()
}

/// Integrator for `exp(-i H t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Chebyshev,
    Krylov,
    CrankNicolson,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropagatorSpec {
    pub method: Method,
    /// Truncation tolerance of the Chebyshev series / Krylov step.
    pub tol: f64,
    /// Maximum Chebyshev degree per step.
    pub degree_budget: usize,
    pub krylov_dim: usize,
    /// Time step of Crank-Nicolson.
    pub cn_step: f64,
}

impl Default for PropagatorSpec {
    fn default() -> Self {
        Self {
            method: Method::Chebyshev,
            tol: 1e-13,
            degree_budget: 4000,
            krylov_dim: 30,
            cn_step: 0.01,
        }
    }
}

/// Bessel functions `J_0(z) ..= J_kmax(z)` by Miller's backward recurrence,
/// normalised with `J_0 + 2 sum J_2k = 1`.
pub fn bessel_j(z: f64, kmax: usize) -> Vec<f64> {
    let mut out = vec![0.0; kmax + 1];
    if z == 0.0 {
        out[0] = 1.0;
        return out;
    }
    let start = kmax.max(z.abs().ceil() as usize) + 40 + (10.0 * z.abs().cbrt()) as usize;
    let start = start + start % 2;
    let (mut jp1, mut j) = (0.0f64, 1e-300f64);
    let mut norm = 0.0;
    for n in (1..=start).rev() {
        let jm1 = 2.0 * n as f64 / z * j - jp1;
        jp1 = j;
        j = jm1;
        let m = n - 1;
        if m <= kmax {
            out[m] = j;
        }
        if m % 2 == 0 {
            norm += if m == 0 { j } else { 2.0 * j };
        }
        if j.abs() > 1e250 {
            jp1 *= 1e-250;
            j *= 1e-250;
            norm *= 1e-250;
            for v in out.iter_mut() {
                *v *= 1e-250;
            }
        }
    }
    for v in out.iter_mut() {
        *v /= norm;
    }
    out
}

/// `exp(-i H t)` for a fixed Hermitian operator.
#[derive(Debug, Clone)]
pub struct Propagator<'a> {
    pub h: &'a SparseHermitian,
    pub spec: PropagatorSpec,
    /// Spectral enclosure widened by 5%.
    pub interval: (f64, f64),
}

impl<'a> Propagator<'a> {
    pub fn new(h: &'a SparseHermitian, spec: PropagatorSpec) -> Self {
        let (lo, hi) = h.spectral_bounds();
        let pad = 0.025 * (hi - lo).max(1e-12);
        Self {
            h,
            spec,
            interval: (lo - pad, hi + pad),
        }
    }

    /// `exp(-i H t) psi`; negative `t` evolves backwards.
    pub fn propagate(&self, psi: &[Complex64], t: f64) -> Result<CVec> {
        if t == 0.0 {
            return Ok(psi.to_vec());
        }
        match self.spec.method {
            Method::Chebyshev => self.chebyshev(psi, t),
            Method::Krylov => self.krylov(psi, t),
            Method::CrankNicolson => self.crank_nicolson(psi, t),
        }
    }

    /// States at each of the ascending `times` (relative to `psi` at 0).
    pub fn series(&self, psi: &[Complex64], times: &[f64]) -> Result<Vec<CVec>> {
        let mut out = Vec::with_capacity(times.len());
        let mut cur = psi.to_vec();
        let mut now = 0.0;
        for &t in times {
            cur = self.propagate(&cur, t - now)?;
            now = t;
            out.push(cur.clone());
        }
        Ok(out)
    }

    fn chebyshev(&self, psi: &[Complex64], t: f64) -> Result<CVec> {
        const Z_MAX: f64 = 200.0;
        let (lo, hi) = self.interval;
        let a = 0.5 * (hi - lo);
        let steps = ((a * t.abs()) / Z_MAX).ceil().max(1.0) as usize;
        let tau = t / steps as f64;
        let mut cur = psi.to_vec();
        for _ in 0..steps {
            cur = self.chebyshev_step(&cur, tau)?;
        }
        Ok(cur)
    }

    fn chebyshev_step(&self, psi: &[Complex64], tau: f64) -> Result<CVec> {
        let (lo, hi) = self.interval;
        let a = 0.5 * (hi - lo);
        let c = 0.5 * (hi + lo);
        let z = a * tau.abs();
        let kmax = (z + 10.0 * z.cbrt() + 60.0) as usize;
        let j = bessel_j(z, kmax);
        let cut = self.spec.tol * 1e-2;
        let degree = (1..kmax)
            .find(|&k| k as f64 > z && j[k].abs() < cut && j[k + 1].abs() < cut)
            .unwrap_or(kmax);
        if degree > self.spec.degree_budget {
            return Err(Error::DegreeBudget {
                needed: degree,
                budget: self.spec.degree_budget,
            });
        }
        let n = psi.len();
        let sign = if tau >= 0.0 { -I } else { I };
        let apply_x = |v: &[Complex64], out: &mut [Complex64]| {
            self.h.apply(v, out);
            for (o, x) in out.iter_mut().zip(v) {
                *o = (*o - c * x) / a;
            }
        };
        let mut t_prev = psi.to_vec();
        let mut t_cur = vec![Complex64::default(); n];
        apply_x(&t_prev, &mut t_cur);
        let mut acc: CVec = psi.iter().map(|x| x * j[0]).collect();
        let mut phase = sign;
        caxpy(phase * 2.0 * j[1], &t_cur, &mut acc);
        let mut tmp = vec![Complex64::default(); n];
        for k in 2..=degree {
            apply_x(&t_cur, &mut tmp);
            for i in 0..n {
                tmp[i] = 2.0 * tmp[i] - t_prev[i];
            }
            std::mem::swap(&mut t_prev, &mut t_cur);
            std::mem::swap(&mut t_cur, &mut tmp);
            phase *= sign;
            caxpy(phase * 2.0 * j[k], &t_cur, &mut acc);
        }
        let global = (sign * c * tau.abs()).exp();
        acc.iter_mut().for_each(|x| *x *= global);
        Ok(acc)
    }

    fn krylov(&self, psi: &[Complex64], t: f64) -> Result<CVec> {
        let (lo, hi) = self.interval;
        let mut dt = (t.abs()).min(20.0 / (hi - lo).max(1e-12));
        let mut done = 0.0;
        let mut cur = psi.to_vec();
        let mut guard = 0usize;
        while done < t.abs() {
            guard += 1;
            if guard > 1_000_000 {
                return Err(Error::NonConvergence("Krylov step size collapsed".into()));
            }
            let step = dt.min(t.abs() - done);
            let (next, err) = self.krylov_step(&cur, step * t.signum());
            if err <= self.spec.tol * step.max(1e-3) || step < 1e-8 {
                cur = next;
                done += step;
                dt = (1.5 * step).max(dt);
            } else {
                dt = 0.5 * step;
            }
        }
        Ok(cur)
    }

    /// One Lanczos step with an a-posteriori error estimate.
    fn krylov_step(&self, psi: &[Complex64], tau: f64) -> (CVec, f64) {
        let n = psi.len();
        let beta0 = cnorm(psi);
        if beta0 == 0.0 {
            return (psi.to_vec(), 0.0);
        }
        let m = self.spec.krylov_dim.min(n);
        let mut basis: Vec<CVec> = vec![psi.iter().map(|x| x / beta0).collect()];
        let mut alpha = Vec::with_capacity(m);
        let mut beta: Vec<f64> = Vec::with_capacity(m);
        let mut w = vec![Complex64::default(); n];
        let mut last_beta = 0.0;
        for j in 0..m {
            self.h.apply(&basis[j], &mut w);
            let a = cdot(&basis[j], &w).re;
            alpha.push(a);
            for v in &basis {
                let c = cdot(v, &w);
                caxpy(-c, v, &mut w);
            }
            let b = cnorm(&w);
            last_beta = b;
            if b < 1e-13 * beta0.max(1.0) || j + 1 == m {
                break;
            }
            beta.push(b);
            basis.push(w.iter().map(|x| x / b).collect());
        }
        let k = alpha.len();
        let mut tm = DMatrix::<f64>::zeros(k, k);
        for i in 0..k {
            tm[(i, i)] = alpha[i];
            if i + 1 < k {
                tm[(i, i + 1)] = beta[i];
                tm[(i + 1, i)] = beta[i];
            }
        }
        let e = dense_eigh(&tm);
        let coef: Vec<Complex64> = (0..k)
            .map(|r| {
                (0..k)
                    .map(|s| e.vectors[(r, s)] * e.vectors[(0, s)] * (-I * e.values[s] * tau).exp())
                    .sum::<Complex64>()
            })
            .collect();
        let mut out = vec![Complex64::default(); n];
        for (c, v) in coef.iter().zip(&basis) {
            caxpy(c * beta0, v, &mut out);
        }
        let err = if k < m { 0.0 } else { beta0 * last_beta * coef[k - 1].norm() };
        (out, err)
    }

    fn crank_nicolson(&self, psi: &[Complex64], t: f64) -> Result<CVec> {
        let steps = (t.abs() / self.spec.cn_step).ceil().max(1.0) as usize;
        let dt = t / steps as f64;
        let half = 0.5 * dt;
        let n = psi.len();
        let apply_a = |v: &[Complex64]| -> CVec {
            let mut out = vec![Complex64::default(); n];
            self.h.apply(v, &mut out);
            out.iter_mut().for_each(|x| *x *= half);
            out
        };
        let mut cur = psi.to_vec();
        for _ in 0..steps {
            // (1 + iA)^-1 (1 - iA) = (1 - iA)^2 (1 + A^2)^-1
            let sol = conjugate_gradient(
                |v| {
                    let a2 = apply_a(&apply_a(v));
                    v.iter().zip(a2).map(|(x, y)| x + y).collect()
                },
                &cur,
                self.spec.tol,
                10 * n.max(100),
            )?;
            let mut x = sol.x;
            for _ in 0..2 {
                let ax = apply_a(&x);
                for (xi, ai) in x.iter_mut().zip(ax) {
                    *xi -= I * ai;
                }
            }
            cur = x;
        }
        Ok(cur)
    }
}

/// Dense eigendecomposition propagator for small operators.
#[derive(Debug, Clone)]
pub struct DenseEvolution {
    pub eig: EigenPairs,
}

impl DenseEvolution {
    pub fn new(h: &SparseHermitian) -> Result<Self> {
        if h.dim() > DENSE_LIMIT {
            return Err(Error::DimensionBudget {
                dim: h.dim(),
                budget: DENSE_LIMIT,
            });
        }
        Ok(Self {
            eig: dense_eigh(&h.to_dense()),
        })
    }

    pub fn propagate(&self, psi: &[Complex64], t: f64) -> CVec {
        let v = &self.eig.vectors;
        let n = psi.len();
        let mut out = vec![Complex64::default(); n];
        for (j, lam) in self.eig.values.iter().enumerate() {
            let col = v.column(j);
            let c: Complex64 = col.iter().zip(psi).map(|(a, b)| *a * b).sum::<Complex64>() * (-I * lam * t).exp();
            for (o, a) in out.iter_mut().zip(col.iter()) {
                *o += c * *a;
            }
        }
        out
    }
}

/// Which part of a channel's cross-section spectrum to keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Part {
    All,
    /// Flagged bound states of `H^(k)`.
    Pp,
    /// Complement of `Pp`.
    Ac,
}

/// Exact evolution of a channel operator `H_k = b ⊗ I + I ⊗ R` from the
/// eigendecompositions of its two factors. For `k = 1, 2`, `R = H^(k)`; for
/// `k = 3`, `b = b_1` and `R = b_2 ⊗ I + I ⊗ Delta_Y`.
#[derive(Debug, Clone)]
pub struct ChannelEvolution {
    pub k: u8,
    pub left: EigenPairs,
    pub right: EigenPairs,
    /// Bound flags of the right factor's eigenvectors.
    pub bound: Vec<bool>,
    /// Global site of each channel index.
    pub sites: Vec<usize>,
    pub global_dim: usize,
}

impl ChannelEvolution {
    pub fn new(model: &CornerModel, k: u8) -> Result<Self> {
        let (left_op, right_op) = match k {
            1 | 2 => (
                assemble_b(channel_length(model, k)?, model.h)?,
                assemble_cross_section(model, k)?,
            ),
            3 => (
                assemble_b(model.l1, model.h)?,
                assemble_b(model.l2, model.h)?.kron_sum(&assemble_cross_section(model, 3)?),
            ),
            _ => return Err(Error::InvalidChannel(k)),
        };
        if right_op.dim() > DENSE_LIMIT || left_op.dim() > DENSE_LIMIT {
            return Err(Error::DimensionBudget {
                dim: right_op.dim().max(left_op.dim()),
                budget: DENSE_LIMIT,
            });
        }
        let left = dense_eigh(&left_op.to_dense());
        let right = dense_eigh(&right_op.to_dense());
        let bound = (0..right.len())
            .map(|j| k != 3 && classify_bound(model, k, right.values[j], &right.vector(j)).1)
            .collect();
        Ok(Self {
            k,
            left,
            right,
            bound,
            sites: channel_sites(model, k)?,
            global_dim: model.dim(),
        })
    }

    pub fn dim(&self) -> usize {
        self.sites.len()
    }

    /// Channel-space values of a global vector.
    pub fn restrict(&self, global: &[Complex64]) -> CVec {
        self.sites.iter().map(|&s| global[s]).collect()
    }

    /// Norm of a global vector off the channel sites.
    pub fn leakage(&self, global: &[Complex64]) -> f64 {
        let total = cnorm(global).powi(2);
        let inside: f64 = self.sites.iter().map(|&s| global[s].norm_sqr()).sum();
        (total - inside).max(0.0).sqrt()
    }

    /// Global vector with `ch` placed on the channel sites and 0 elsewhere.
    pub fn embed(&self, ch: &[Complex64]) -> CVec {
        let mut out = vec![Complex64::default(); self.global_dim];
        for (&s, v) in self.sites.iter().zip(ch) {
            out[s] = *v;
        }
        out
    }

    fn as_matrix(&self, ch: &[Complex64]) -> DMatrix<Complex64> {
        DMatrix::from_row_slice(self.left.len(), self.right.len(), ch)
    }

    fn from_matrix(m: &DMatrix<Complex64>) -> CVec {
        m.transpose().iter().copied().collect()
    }

    /// Coefficients `c[a, j] = <u_a ⊗ v_j, ch>`.
    pub fn to_spectral(&self, ch: &[Complex64]) -> DMatrix<Complex64> {
        let u = self.left.vectors.map(|x| Complex64::new(x, 0.0));
        let v = self.right.vectors.map(|x| Complex64::new(x, 0.0));
        u.transpose() * self.as_matrix(ch) * v
    }

    pub fn from_spectral(&self, c: &DMatrix<Complex64>) -> CVec {
        let u = self.left.vectors.map(|x| Complex64::new(x, 0.0));
        let v = self.right.vectors.map(|x| Complex64::new(x, 0.0));
        Self::from_matrix(&(u * c * v.transpose()))
    }

    fn keep(&self, j: usize, part: Part) -> bool {
        match part {
            Part::All => true,
            Part::Pp => self.bound[j],
            Part::Ac => !self.bound[j],
        }
    }

    /// `exp(-i H_k t) Pi_part ch`.
    pub fn evolve(&self, ch: &[Complex64], t: f64, part: Part) -> CVec {
        let mut c = self.to_spectral(ch);
        for j in 0..self.right.len() {
            let keep = self.keep(j, part);
            for a in 0..self.left.len() {
                c[(a, j)] = if keep {
                    c[(a, j)] * (-I * (self.left.values[a] + self.right.values[j]) * t).exp()
                } else {
                    Complex64::default()
                };
            }
        }
        self.from_spectral(&c)
    }

    pub fn project(&self, ch: &[Complex64], part: Part) -> CVec {
        self.evolve(ch, 0.0, part)
    }

    /// Channel operator applied to a channel vector.
    pub fn apply(&self, ch: &[Complex64]) -> CVec {
        let mut c = self.to_spectral(ch);
        for j in 0..self.right.len() {
            for a in 0..self.left.len() {
                c[(a, j)] *= self.left.values[a] + self.right.values[j];
            }
        }
        self.from_spectral(&c)
    }
}

/// Time at which the fastest outgoing wave returns from the far wall:
/// `2 L h / v_max` with `v_max = 2 / h`.
pub fn reflection_time(model: &CornerModel) -> f64 {
    let l = model.l1.max(model.l2) as f64;
    2.0 * l * model.h / (2.0 / model.h)
}

/// `i [H, G] psi` for a multiplication operator `G`.
pub fn commutator_apply(h: &SparseHermitian, g: &[f64], psi: &[Complex64]) -> CVec {
    let n = psi.len();
    let gpsi: CVec = psi.iter().zip(g).map(|(x, v)| x * v).collect();
    let mut hg = vec![Complex64::default(); n];
    h.apply(&gpsi, &mut hg);
    let mut hp = vec![Complex64::default(); n];
    h.apply(psi, &mut hp);
    hg.iter().zip(&hp).zip(g).map(|((a, b), v)| I * (a - b * v)).collect()
}

/// `g_t` (or one piece) and `d/dt g_t` on every site at one time.
#[derive(Debug, Clone)]
pub struct GammaT {
    pub t: f64,
    pub g: Vec<f64>,
    pub dt: Vec<f64>,
    pub hess: Vec<[[f64; 2]; 2]>,
}

impl GammaT {
    pub fn new(model: &CornerModel, yaf: &Yafaev, t: f64, piece: Option<usize>) -> Result<Self> {
        let f = yaf.scaled_field(model, t, piece)?;
        Ok(Self {
            t,
            g: f.values.iter().map(|v| v.value).collect(),
            dt: f.values.iter().map(|v| v.dt).collect(),
            hess: f.values.iter().map(|v| v.hess).collect(),
        })
    }

    /// Unscaled field `g` (or a piece) at `t = 1`, with `d/dt = 0`; the
    /// Hessian is left empty.
    pub fn unscaled(model: &CornerModel, yaf: &Yafaev, piece: Option<usize>) -> Self {
        Self {
            t: 1.0,
            g: yaf.unscaled_field(model, piece),
            dt: vec![0.0; model.dim()],
            hess: Vec::new(),
        }
    }

    /// `gamma_t psi = i [H, g_t] psi + (d/dt g_t) psi`.
    pub fn apply(&self, h: &SparseHermitian, psi: &[Complex64]) -> CVec {
        let mut out = commutator_apply(h, &self.g, psi);
        for ((o, p), d) in out.iter_mut().zip(psi).zip(&self.dt) {
            *o += p * d;
        }
        out
    }

    pub fn apply_g(&self, psi: &[Complex64]) -> CVec {
        psi.iter().zip(&self.g).map(|(x, v)| x * v).collect()
    }
}

/// Cauchy tails `|x_j - x_{j-1}|` of a sequence (first entry NaN).
pub fn cauchy_tails(values: &[f64]) -> Vec<f64> {
    let mut out = vec![f64::NAN];
    out.extend(values.windows(2).map(|w| (w[1] - w[0]).abs()));
    out.truncate(values.len());
    out
}

/// Doubling grid `t0, 2 t0, ...` up to `t_max`.
pub fn doubling_grid(t0: f64, t_max: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut t = t0;
    while t <= t_max * (1.0 + 1e-12) {
        out.push(t);
        t *= 2.0;
    }
    out
}

/// One sample of a Heisenberg series.
#[derive(Debug, Clone, PartialEq)]
pub struct HeisenbergSample {
    pub t: f64,
    /// `<O_t psi_t, psi_t>`.
    pub expectation: f64,
    /// `exp(iHt) O_t exp(-iHt) psi` when requested.
    pub vector: Option<CVec>,
    /// `|O(t) psi - O(t_prev) psi|` when vectors are requested.
    pub cauchy: Option<f64>,
}

/// Samples `O(t) = exp(iHt) O_t exp(-iHt)` on ascending `times`.
pub fn heisenberg_series(
    prop: &Propagator,
    psi: &[Complex64],
    times: &[f64],
    mut observable: impl FnMut(f64, &[Complex64]) -> Result<CVec>,
    with_vectors: bool,
) -> Result<Vec<HeisenbergSample>> {
    let states = prop.series(psi, times)?;
    let mut out: Vec<HeisenbergSample> = Vec::with_capacity(times.len());
    for (&t, st) in times.iter().zip(&states) {
        let o = observable(t, st)?;
        let expectation = cdot(st, &o).re;
        let (vector, cauchy) = if with_vectors {
            let v = prop.propagate(&o, -t)?;
            let c = out.last().and_then(|p| p.vector.as_ref()).map(|p| cdiff_norm(p, &v));
            (Some(v), c)
        } else {
            (None, None)
        };
        out.push(HeisenbergSample {
            t,
            expectation,
            vector,
            cauchy,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaPlusReport {
    pub delta: f64,
    pub times: Vec<f64>,
    /// `<gamma(t) psi, psi>`.
    pub gamma: Vec<f64>,
    /// `<g(t) psi, psi> / t`.
    pub g_over_t: Vec<f64>,
    /// `<exp(iHt) g exp(-iHt) psi, psi> / t` with the unscaled `g`.
    pub unscaled_over_t: Vec<f64>,
    /// `|gamma(t) psi - gamma(t_prev) psi|` along the grid.
    pub vector_tails: Vec<f64>,
    /// Estimates at `t_max` in the order above.
    pub estimates: [f64; 3],
    /// Last Cauchy tails of the three expectation series.
    pub tails: [f64; 3],
    /// `|e0 - e1|, |e0 - e2|, |e1 - e2|`.
    pub discrepancies: [f64; 3],
    /// `|[gamma_t, H] psi_t| / |psi|` at `t_max`.
    pub commutator: f64,
    pub reflection_time: f64,
}

/// Estimates of `<gamma^+ psi, psi>` along a time grid (ascending, `t >= 1`).
pub fn gamma_plus(
    model: &CornerModel,
    prop: &Propagator,
    yaf: &Yafaev,
    psi: &[Complex64],
    times: &[f64],
) -> Result<GammaPlusReport> {
    let h = prop.h;
    let unscaled = GammaT::unscaled(model, yaf, None);
    let states = prop.series(psi, times)?;
    let n0 = cnorm(psi).max(1e-300);
    let mut rep = GammaPlusReport {
        delta: yaf.config.delta,
        times: times.to_vec(),
        gamma: Vec::new(),
        g_over_t: Vec::new(),
        unscaled_over_t: Vec::new(),
        vector_tails: Vec::new(),
        estimates: [f64::NAN; 3],
        tails: [f64::NAN; 3],
        discrepancies: [f64::NAN; 3],
        commutator: f64::NAN,
        reflection_time: reflection_time(model),
    };
    let mut prev_vec: Option<CVec> = None;
    for (&t, st) in times.iter().zip(&states) {
        let gt = GammaT::new(model, yaf, t, None)?;
        let gpsi = gt.apply(h, st);
        rep.gamma.push(cdot(st, &gpsi).re);
        rep.g_over_t.push(cdot(st, &gt.apply_g(st)).re / t);
        rep.unscaled_over_t.push(cdot(st, &unscaled.apply_g(st)).re / t);
        let v = prop.propagate(&gpsi, -t)?;
        rep.vector_tails.push(prev_vec.as_ref().map_or(f64::NAN, |p| cdiff_norm(p, &v)));
        prev_vec = Some(v);
        if Some(&t) == times.last() {
            let mut hpsi = vec![Complex64::default(); st.len()];
            h.apply(st, &mut hpsi);
            let a = gt.apply(h, &hpsi);
            let mut b = vec![Complex64::default(); st.len()];
            h.apply(&gpsi, &mut b);
            rep.commutator = cdiff_norm(&a, &b) / n0;
        }
    }
    let last = |v: &[f64]| *v.last().unwrap_or(&f64::NAN);
    let tail = |v: &[f64]| *cauchy_tails(v).last().unwrap_or(&f64::NAN);
    rep.estimates = [last(&rep.gamma), last(&rep.g_over_t), last(&rep.unscaled_over_t)];
    rep.tails = [tail(&rep.gamma), tail(&rep.g_over_t), tail(&rep.unscaled_over_t)];
    let e = rep.estimates;
    rep.discrepancies = [(e[0] - e[1]).abs(), (e[0] - e[2]).abs(), (e[1] - e[2]).abs()];
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationIntegral {
    pub times: Vec<f64>,
    /// `<p g_t'' p psi_t, psi_t>`.
    pub integrand: Vec<f64>,
    /// Trapezoidal partial sums from `times[0]`.
    pub partial: Vec<f64>,
    /// Growth over the last quarter of the time span relative to the total.
    pub tail_growth: f64,
    /// Log-log slope of the integrand over the last two thirds of the span.
    pub decay_exponent: f64,
    /// Integrable decay (`decay_exponent < -1`) and `tail_growth` below
    /// [`PLATEAU_GROWTH`].
    pub plateau: bool,
    pub energy_norm: f64,
    /// `partial.last() / energy_norm`.
    pub ratio: f64,
    pub min_integrand: f64,
    pub reflection_time: f64,
}

/// Relative growth over the last quarter below which partial sums count as
/// having reached a plateau.
pub const PLATEAU_GROWTH: f64 = 0.1;

/// Forward differences `D_1, D_2` along the two end coordinates.
pub fn momentum_pair(model: &CornerModel) -> Result<[SparseHermitian; 2]> {
    Ok([forward_difference(model, 1)?, forward_difference(model, 2)?])
}

/// `<g'' D psi, D phi>` summed over sites and axes.
pub fn hessian_form(d: &[SparseHermitian; 2], hess: &[[[f64; 2]; 2]], psi: &[Complex64], phi: &[Complex64]) -> Complex64 {
    let dp = [d[0].mul_vec(psi), d[1].mul_vec(psi)];
    let dq = [d[0].mul_vec(phi), d[1].mul_vec(phi)];
    let mut acc = Complex64::default();
    for (x, hm) in hess.iter().enumerate() {
        for a in 0..2 {
            for b in 0..2 {
                acc += (hm[a][b] * dp[b][x]).conj() * dq[a][x];
            }
        }
    }
    acc
}

/// `<B D psi, B D phi>` with `B = sqrt(g'')` per site.
pub fn factored_form(d: &[SparseHermitian; 2], hess: &[[[f64; 2]; 2]], psi: &[Complex64], phi: &[Complex64]) -> Complex64 {
    let dp = [d[0].mul_vec(psi), d[1].mul_vec(psi)];
    let dq = [d[0].mul_vec(phi), d[1].mul_vec(phi)];
    let mut acc = Complex64::default();
    for (x, hm) in hess.iter().enumerate() {
        let b = sqrt_psd2(*hm);
        for a in 0..2 {
            let bp = b[a][0] * dp[0][x] + b[a][1] * dp[1][x];
            let bq = b[a][0] * dq[0][x] + b[a][1] * dq[1][x];
            acc += bp.conj() * bq;
        }
    }
    acc
}

/// Largest `|<p g'' p psi, phi> - <B p psi, B p phi>|` over `pairs` random
/// pairs, relative to `|D psi| |D phi| max|g''|`.
pub fn factorization_residual(model: &CornerModel, gt: &GammaT, pairs: usize, seed: u64) -> Result<f64> {
    use rand::Rng;
    let d = momentum_pair(model)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = model.dim();
    let hmax = gt
        .hess
        .iter()
        .flat_map(|m| m.iter().flatten())
        .fold(0.0f64, |a, v| a.max(v.abs()))
        .max(1e-300);
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let mut rv = || -> CVec { (0..n).map(|_| Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)).collect() };
        let psi = rv();
        let phi = rv();
        let a = hessian_form(&d, &gt.hess, &psi, &phi);
        let b = factored_form(&d, &gt.hess, &psi, &phi);
        let scale = (cnorm(&d[0].mul_vec(&psi)) + cnorm(&d[1].mul_vec(&psi)))
            * (cnorm(&d[0].mul_vec(&phi)) + cnorm(&d[1].mul_vec(&phi)))
            * hmax;
        worst = worst.max((a - b).norm() / scale);
    }
    Ok(worst)
}

/// Partial sums of `int <p g_t'' p psi_t, psi_t> dt` on a uniform grid.
pub fn propagation_integral(
    model: &CornerModel,
    prop: &Propagator,
    yaf: &Yafaev,
    psi: &[Complex64],
    times: &[f64],
) -> Result<PropagationIntegral> {
    let d = momentum_pair(model)?;
    let states = prop.series(psi, times)?;
    let mut integrand = Vec::with_capacity(times.len());
    for (&t, st) in times.iter().zip(&states) {
        let gt = GammaT::new(model, yaf, t, None)?;
        integrand.push(hessian_form(&d, &gt.hess, st, st).re);
    }
    let mut partial = vec![0.0];
    for i in 1..times.len() {
        let dt = times[i] - times[i - 1];
        partial.push(partial[i - 1] + 0.5 * dt * (integrand[i] + integrand[i - 1]));
    }
    let total = *partial.last().unwrap_or(&0.0);
    let t0 = times.first().copied().unwrap_or(0.0);
    let t_end = times.last().copied().unwrap_or(0.0);
    let t_q = t0 + 0.75 * (t_end - t0);
    let at_q = times
        .iter()
        .zip(&partial)
        .filter(|(t, _)| **t <= t_q)
        .map(|(_, p)| *p)
        .last()
        .unwrap_or(0.0);
    let tail_growth = if total > 0.0 { (total - at_q) / total } else { 0.0 };
    let late: Vec<(f64, f64)> = times
        .iter()
        .zip(&integrand)
        .filter(|(t, v)| **t >= t0 + (t_end - t0) / 3.0 && **v > 0.0)
        .map(|(t, v)| (t.ln(), v.ln()))
        .collect();
    let decay_exponent = if late.len() >= 2 { loglog_slope(&late) } else { f64::NAN };
    let en = energy_norm(prop.h, psi);
    Ok(PropagationIntegral {
        times: times.to_vec(),
        min_integrand: integrand.iter().copied().fold(f64::INFINITY, f64::min),
        integrand,
        tail_growth,
        decay_exponent,
        plateau: decay_exponent < -1.0 && tail_growth <= PLATEAU_GROWTH,
        energy_norm: en,
        ratio: total / en.max(1e-300),
        partial,
        reflection_time: reflection_time(model),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeiftSimonReport {
    pub k: u8,
    pub times: Vec<f64>,
    /// `|omega_k(t) psi|`.
    pub norms: Vec<f64>,
    /// `|omega_k(t) psi - omega_k(t_prev) psi|`.
    pub tails: Vec<f64>,
    /// `<gamma_k(t) psi, psi>`.
    pub expectations: Vec<f64>,
    /// Largest norm of `gamma_{k,t} psi_t` outside the channel sites.
    pub leakage: f64,
    /// Channel-space estimate at the last time.
    pub estimate: CVec,
}

/// `omega_k psi ≈ exp(i H_k t) J_k^* gamma_{k,t} exp(-iHt) psi` on `times`,
/// where `gamma_{k,t}` uses the piece `g^(k)`.
pub fn deift_simon(
    model: &CornerModel,
    prop: &Propagator,
    chan: &ChannelEvolution,
    yaf: &Yafaev,
    psi: &[Complex64],
    times: &[f64],
) -> Result<DeiftSimonReport> {
    let k = chan.k;
    let states = prop.series(psi, times)?;
    let mut rep = DeiftSimonReport {
        k,
        times: times.to_vec(),
        norms: Vec::new(),
        tails: Vec::new(),
        expectations: Vec::new(),
        leakage: 0.0,
        estimate: Vec::new(),
    };
    let mut prev: Option<CVec> = None;
    for (&t, st) in times.iter().zip(&states) {
        let gt = GammaT::new(model, yaf, t, Some(k as usize))?;
        let v = gt.apply(prop.h, st);
        rep.expectations.push(cdot(st, &v).re);
        rep.leakage = rep.leakage.max(chan.leakage(&v));
        let w = chan.evolve(&chan.restrict(&v), -t, Part::All);
        rep.norms.push(cnorm(&w));
        rep.tails.push(prev.as_ref().map_or(f64::NAN, |p| cdiff_norm(p, &w)));
        prev = Some(w);
    }
    rep.estimate = prev.unwrap_or_default();
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::assemble_h;
    use crate::geometry::{layered_config, minimal_config, LayeredSpec};
    use crate::yafaev::YafaevConfig;

    fn small() -> CornerModel {
        CornerModel::build(&minimal_config(6, 5, 1.0)).unwrap()
    }

    fn random_state(n: usize, seed: u64) -> CVec {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v: CVec = (0..n).map(|_| Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)).collect();
        let s = 1.0 / cnorm(&v);
        v.into_iter().map(|x| x * s).collect()
    }

    #[test]
    fn bessel_values() {
        let j = bessel_j(1.0, 3);
        assert!((j[0] - 0.765_197_686_557_966_6).abs() < 1e-14);
        assert!((j[1] - 0.440_050_585_744_933_5).abs() < 1e-14);
        let j = bessel_j(50.0, 60);
        assert!((j[0] - 0.055_812_327_669_251_86).abs() < 1e-12);
    }

    #[test]
    fn methods_agree_with_dense_oracle() {
        let m = small();
        let h = assemble_h(&m);
        let psi = random_state(h.dim(), 1);
        let dense = DenseEvolution::new(&h).unwrap().propagate(&psi, 3.7);
        for (method, tol) in [(Method::Chebyshev, 1e-10), (Method::Krylov, 1e-9), (Method::CrankNicolson, 1e-2)] {
            let spec = PropagatorSpec { method, ..Default::default() };
            let out = Propagator::new(&h, spec).propagate(&psi, 3.7).unwrap();
            let err = cdiff_norm(&out, &dense);
            assert!(err < tol, "{method:?}: {err}");
            assert!((cnorm(&out) - 1.0).abs() < 1e-9);
        }
        let back = Propagator::new(&h, PropagatorSpec::default()).propagate(&dense, -3.7).unwrap();
        assert!(cdiff_norm(&back, &psi) < 1e-10);
    }

    #[test]
    fn eigenvector_picks_up_phase() {
        let m = small();
        let h = assemble_h(&m);
        let d = DenseEvolution::new(&h).unwrap();
        let v: CVec = d.eig.vector(3).iter().map(|&x| Complex64::new(x, 0.0)).collect();
        let out = Propagator::new(&h, PropagatorSpec::default()).propagate(&v, 11.0).unwrap();
        let want: CVec = v.iter().map(|x| x * (-I * d.eig.values[3] * 11.0).exp()).collect();
        assert!(cdiff_norm(&out, &want) < 1e-9);
    }

    #[test]
    fn degree_budget_is_enforced() {
        let m = small();
        let h = assemble_h(&m);
        let spec = PropagatorSpec {
            degree_budget: 5,
            ..Default::default()
        };
        let psi = random_state(h.dim(), 2);
        assert!(matches!(
            Propagator::new(&h, spec).propagate(&psi, 10.0),
            Err(Error::DegreeBudget { .. })
        ));
    }

    #[test]
    fn channel_evolution_matches_sparse_operator() {
        let m = small();
        for k in 1..=3u8 {
            let ch = ChannelEvolution::new(&m, k).unwrap();
            let hk = crate::assembly::assemble_channel(&m, k).unwrap();
            let psi = random_state(ch.dim(), 4 + k as u64);
            let exact = DenseEvolution::new(&hk).unwrap().propagate(&psi, 2.5);
            assert!(cdiff_norm(&ch.evolve(&psi, 2.5, Part::All), &exact) < 1e-10);
            let pp = ch.project(&psi, Part::Pp);
            let ac = ch.project(&psi, Part::Ac);
            let sum: CVec = pp.iter().zip(&ac).map(|(a, b)| a + b).collect();
            assert!(cdiff_norm(&sum, &psi) < 1e-12);
            assert!(cdot(&pp, &ac).norm() < 1e-12);
            let hv = hk.mul_vec(&psi);
            assert!(cdiff_norm(&ch.apply(&psi), &hv) < 1e-10);
            let round = ch.restrict(&ch.embed(&psi));
            assert_eq!(round, psi);
        }
    }

    #[test]
    fn gamma_is_hermitian_and_flat_on_plateau() {
        let m = CornerModel::build(&layered_config(&LayeredSpec {
            box_len: 12,
            ..Default::default()
        }))
        .unwrap();
        let h = assemble_h(&m);
        let yaf = Yafaev::new(YafaevConfig::default()).unwrap();
        let gt = GammaT::new(&m, &yaf, 30.0, None).unwrap();
        let a = random_state(h.dim(), 7);
        let b = random_state(h.dim(), 8);
        let lhs = cdot(&gt.apply(&h, &a), &b);
        let rhs = cdot(&a, &gt.apply(&h, &b));
        assert!((lhs - rhs).norm() < 1e-9);
        // A state on X0 lies in the plateau: only d/dt g_t acts.
        let mut psi = vec![Complex64::default(); h.dim()];
        psi[0] = Complex64::new(1.0, 0.0);
        let out = gt.apply(&h, &psi);
        let want = yaf.config.delta * 30f64.powf(yaf.config.delta - 1.0) * yaf.g_origin;
        assert!((out[0].re - want).abs() < 1e-9, "{} {}", out[0].re, want);
        assert!(out[1..].iter().all(|x| x.norm() < 1e-12));
    }

    #[test]
    fn commutator_with_free_laplacian_matches_continuum() {
        // i[b, g] psi ≈ -i (g' psi' + (g' psi)') for smooth g, psi.
        for (l, hstep) in [(200usize, 0.05f64), (400, 0.025)] {
            let b = assemble_b(l, hstep).unwrap();
            let u: Vec<f64> = (0..l).map(|i| hstep * (i as f64 + 1.0)).collect();
            let g: Vec<f64> = u.iter().map(|x| (x * 0.7).sin() + x).collect();
            let dg = |x: f64| 0.7 * (x * 0.7).cos() + 1.0;
            let ddg = |x: f64| -0.49 * (x * 0.7).sin();
            let w = |x: f64| (-(x - 5.0).powi(2)).exp();
            let dw = |x: f64| -2.0 * (x - 5.0) * w(x);
            let psi: CVec = u.iter().map(|&x| Complex64::new(w(x), 0.0)).collect();
            let out = commutator_apply(&b, &g, &psi);
            let err = u
                .iter()
                .zip(&out)
                .map(|(&x, o)| (o - (-I * (2.0 * dg(x) * dw(x) + ddg(x) * w(x)))).norm())
                .fold(0.0f64, f64::max);
            assert!(err < 20.0 * hstep * hstep, "h {hstep}: {err}");
        }
    }

    #[test]
    fn factorization_identity() {
        let m = CornerModel::build(&layered_config(&LayeredSpec {
            box_len: 16,
            ..Default::default()
        }))
        .unwrap();
        let yaf = Yafaev::new(YafaevConfig::default()).unwrap();
        let gt = GammaT::new(&m, &yaf, 2.0, None).unwrap();
        let r = factorization_residual(&m, &gt, 5, 3).unwrap();
        assert!(r < 1e-9, "{r}");
    }

    #[test]
    fn state_vector_norms() {
        let m = small();
        let h = assemble_h(&m);
        let s = StateVector::new(random_state(h.dim(), 9), &h, None).unwrap();
        assert!((s.norm - 1.0).abs() < 1e-12);
        assert!((s.energy_norm.powi(2) - 1.0 - h.expectation(&s.amps)).abs() < 1e-12);
        assert!(StateVector::new(vec![Complex64::default(); 3], &h, None).is_err());
    }

    #[test]
    fn grids() {
        assert_eq!(doubling_grid(1.0, 10.0), vec![1.0, 2.0, 4.0, 8.0]);
        let t = cauchy_tails(&[1.0, 3.0, 2.5]);
        assert!(t[0].is_nan() && t[1] == 2.0 && t[2] == 0.5);
    }
}
