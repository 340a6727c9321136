//! Channel identifications, time-dependent wave operators, `Omega_±`,
//! Gram matrices, Ruelle diagnostics, the asymptotic-completeness
//! decomposition and the scattering matrix.
//!
//! Every wave operator is sampled at finite `t` as
//! `W_±(t) = exp(±itH) J exp(∓itH_k)`; strong limits are read off doubling
//! grids together with their Cauchy tails.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::assembly::{channel_length, kappa};
use crate::error::{Error, Result};
use crate::geometry::CornerModel;
use crate::linalg::{caxpy, cdiff_norm, cdot, cnorm, CVec};
use crate::propagation::{deift_simon, reflection_time, ChannelEvolution, GammaT, Part, Propagator, PropagatorSpec};
use crate::sparse::SparseHermitian;
use crate::spectral::{ChannelSpectrum, SpectralWindow};
use crate::yafaev::{loglog_slope, Yafaev};

/// Coefficient of `W_±(H, H_3)` in `Omega_±` as printed.
pub const OMEGA_PRINTED: f64 = 2.0;

/// Time direction of a wave operator: `W_± = lim exp(±itH) J exp(∓itH_k)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn value(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }
}

/// Normalised Gaussian-modulated plane wave `exp(-(u-c)^2/2w^2 + iku)` on
/// the sites `u = h (i + 1)`, `i < len`.
pub fn gaussian_profile(len: usize, h: f64, center: f64, width: f64, momentum: f64) -> CVec {
    let v: CVec = (0..len)
        .map(|i| {
            let u = h * (i + 1) as f64;
            let a = (-(u - center).powi(2) / (2.0 * width * width)).exp();
            Complex64::from_polar(a, momentum * u)
        })
        .collect();
    normalized(v)
}

/// Momentum of the `m`-th Dirichlet sine mode (`m >= 1`) on `len` sites.
pub fn dst_momentum(m: usize, len: usize, h: f64) -> f64 {
    m as f64 * std::f64::consts::PI / ((len + 1) as f64 * h)
}

/// Normalised Dirichlet sine mode `m >= 1` on `len` sites.
pub fn dst_mode(m: usize, len: usize) -> Vec<f64> {
    let s = (2.0 / (len + 1) as f64).sqrt();
    (0..len)
        .map(|j| s * (m as f64 * std::f64::consts::PI * (j + 1) as f64 / (len + 1) as f64).sin())
        .collect()
}

/// Smooth bump `exp(-1/(1-x^2))` on the open interval `(lo, hi)`.
pub fn window_bump(k: f64, lo: f64, hi: f64) -> f64 {
    let x = (2.0 * k - lo - hi) / (hi - lo);
    if x.abs() < 1.0 {
        (-1.0 / (1.0 - x * x)).exp()
    } else {
        0.0
    }
}

/// Outgoing packet with sine-transform support in the momentum window
/// `(k_lo, k_hi)`: `sum_m bump(k_m) exp(-i k_m c) s_m` over the Dirichlet
/// modes, centred near `u = c`.
pub fn band_limited_profile(len: usize, h: f64, k_lo: f64, k_hi: f64, center: f64) -> Result<CVec> {
    if !(0.0 < k_lo && k_lo < k_hi) {
        return Err(Error::InvalidParameter(format!("momentum window ({k_lo}, {k_hi})")));
    }
    let mut v = vec![Complex64::default(); len];
    for m in 1..=len {
        let k = dst_momentum(m, len, h);
        let w = window_bump(k, k_lo, k_hi);
        if w == 0.0 {
            continue;
        }
        let c = Complex64::from_polar(w, -k * center);
        for (x, s) in v.iter_mut().zip(dst_mode(m, len)) {
            *x += c * s;
        }
    }
    if cnorm(&v) == 0.0 {
        return Err(Error::InvalidParameter(format!(
            "momentum window ({k_lo}, {k_hi}) contains no sine mode"
        )));
    }
    Ok(normalized(v))
}

/// Squared sine-transform coefficients `|<s_m, a>|^2`, `m = 1..=len`.
pub fn dst_weights(a: &[Complex64]) -> Vec<f64> {
    let len = a.len();
    (1..=len)
        .map(|m| {
            dst_mode(m, len)
                .iter()
                .zip(a)
                .map(|(s, x)| x * *s)
                .sum::<Complex64>()
                .norm_sqr()
        })
        .collect()
}

fn normalized(mut v: CVec) -> CVec {
    let n = cnorm(&v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn outer(left: &[Complex64], right: &[Complex64]) -> CVec {
    let mut out = Vec::with_capacity(left.len() * right.len());
    for a in left {
        for b in right {
            out.push(a * b);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PacketVariant {
    /// Half-line profile times the bound state of `H^(k)` with this index.
    Pp { index: usize },
    /// Half-line profile times a cross-section state orthogonal to all
    /// flagged bound states.
    Ac,
    /// Product `a(u1) c(u2) phi(y)` on the quadrant channel.
    Quadrant,
}

/// A normalised vector in the space of channel `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelPacket {
    pub channel: u8,
    pub variant: PacketVariant,
    pub amps: CVec,
}

impl ChannelPacket {
    /// `profile ⊗ phi_{k,index}` with `phi_{k,index}` the `index`-th flagged
    /// bound state of the cross-section operator.
    pub fn pp(chan: &ChannelEvolution, index: usize, profile: &[Complex64]) -> Result<Self> {
        if chan.k == 3 {
            return Err(Error::InvalidChannel(3));
        }
        check_len(profile.len(), chan.left.len())?;
        let j = (0..chan.right.len())
            .filter(|&j| chan.bound[j])
            .nth(index)
            .ok_or(Error::MissingBoundState {
                channel: chan.k,
                index,
            })?;
        let cross: CVec = chan.right.vector(j).into_iter().map(|x| Complex64::new(x, 0.0)).collect();
        Ok(Self {
            channel: chan.k,
            variant: PacketVariant::Pp { index },
            amps: normalized(outer(profile, &cross)),
        })
    }

    /// `profile ⊗ Pi_ac cross`.
    pub fn ac(chan: &ChannelEvolution, profile: &[Complex64], cross: &[f64]) -> Result<Self> {
        if chan.k == 3 {
            return Err(Error::InvalidChannel(3));
        }
        check_len(profile.len(), chan.left.len())?;
        check_len(cross.len(), chan.right.len())?;
        let mut c: Vec<f64> = cross.to_vec();
        for j in (0..chan.right.len()).filter(|&j| chan.bound[j]) {
            let v = chan.right.vectors.column(j);
            let d: f64 = v.iter().zip(&c).map(|(a, b)| a * b).sum();
            for (x, a) in c.iter_mut().zip(v.iter()) {
                *x -= d * a;
            }
        }
        let cross: CVec = c.into_iter().map(|x| Complex64::new(x, 0.0)).collect();
        if cnorm(&cross) < 1e-12 {
            return Err(Error::Rejected("cross-section state lies in the bound-state span".into()));
        }
        Ok(Self {
            channel: chan.k,
            variant: PacketVariant::Ac,
            amps: normalized(outer(profile, &cross)),
        })
    }

    /// `a(u1) c(u2) phi(y)` on the quadrant channel.
    pub fn quadrant(model: &CornerModel, a: &[Complex64], c: &[Complex64], fiber: &[f64]) -> Result<Self> {
        check_len(a.len(), model.l1)?;
        check_len(c.len(), model.l2)?;
        check_len(fiber.len(), model.y_dim)?;
        let phi: CVec = fiber.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        Ok(Self {
            channel: 3,
            variant: PacketVariant::Quadrant,
            amps: normalized(outer(a, &outer(c, &phi))),
        })
    }
}

fn check_len(found: usize, expected: usize) -> Result<()> {
    if found != expected {
        return Err(Error::InvalidParameter(format!("vector of length {found}, expected {expected}")));
    }
    Ok(())
}

/// Cutoff embedding `J` of a channel space into `L^2(X)`: multiplication by
/// `kappa(u_k)` (`kappa(u1) kappa(u2)` for `k = 3`) followed by placement on
/// the channel's sites.
#[derive(Debug, Clone)]
pub struct Identification {
    pub k: u8,
    pub sites: Vec<usize>,
    pub weights: Vec<f64>,
    pub global_dim: usize,
}

impl Identification {
    pub fn new(model: &CornerModel, chan: &ChannelEvolution) -> Result<Self> {
        let k = chan.k;
        let weights = match k {
            1 | 2 => {
                let zd = chan.right.len();
                (0..chan.dim()).map(|idx| kappa(model.u(idx / zd))).collect()
            }
            3 => {
                let per = model.l2 * model.y_dim;
                (0..chan.dim())
                    .map(|idx| {
                        let (i1, i2) = (idx / per, (idx % per) / model.y_dim);
                        kappa(model.u(i1)) * kappa(model.u(i2))
                    })
                    .collect()
            }
            _ => return Err(Error::InvalidChannel(k)),
        };
        Ok(Self {
            k,
            sites: chan.sites.clone(),
            weights,
            global_dim: chan.global_dim,
        })
    }

    pub fn apply(&self, ch: &[Complex64]) -> CVec {
        let mut out = vec![Complex64::default(); self.global_dim];
        for ((&s, &w), v) in self.sites.iter().zip(&self.weights).zip(ch) {
            out[s] = v * w;
        }
        out
    }

    pub fn adjoint(&self, global: &[Complex64]) -> CVec {
        self.sites.iter().zip(&self.weights).map(|(&s, &w)| global[s] * w).collect()
    }

    /// Operator norm (largest weight).
    pub fn norm(&self) -> f64 {
        self.weights.iter().copied().fold(0.0, f64::max)
    }
}

/// Embedding `J'_k` of the quadrant channel into channel `k = 1, 2`:
/// the `(u_other, y)` factor is placed on the half-line part of `Z_k`,
/// multiplied by `kappa(u_other)`.
#[derive(Debug, Clone)]
pub struct QuadrantLift {
    pub k: u8,
    /// Channel-`k` index of each quadrant-channel index.
    pub target: Vec<usize>,
    pub weights: Vec<f64>,
    pub channel_dim: usize,
}

impl QuadrantLift {
    pub fn new(model: &CornerModel, k: u8) -> Result<Self> {
        let n = model.y_dim;
        let zd = model.z_dim(k);
        let face = match k {
            1 => model.m1.sites,
            2 => model.m2.sites,
            _ => return Err(Error::InvalidChannel(k)),
        };
        let total = model.l1 * model.l2 * n;
        let mut target = Vec::with_capacity(total);
        let mut weights = Vec::with_capacity(total);
        for i1 in 0..model.l1 {
            for i2 in 0..model.l2 {
                for y in 0..n {
                    let (ik, other) = if k == 1 { (i1, i2) } else { (i2, i1) };
                    target.push(ik * zd + face + other * n + y);
                    weights.push(kappa(model.u(other)));
                }
            }
        }
        Ok(Self {
            k,
            target,
            weights,
            channel_dim: channel_length(model, k)? * zd,
        })
    }

    pub fn apply(&self, q: &[Complex64]) -> CVec {
        let mut out = vec![Complex64::default(); self.channel_dim];
        for ((&t, &w), v) in self.target.iter().zip(&self.weights).zip(q) {
            out[t] = v * w;
        }
        out
    }

    pub fn adjoint(&self, ch: &[Complex64]) -> CVec {
        self.target.iter().zip(&self.weights).map(|(&t, &w)| ch[t] * w).collect()
    }
}

/// Which wave operator is sampled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum WaveKind {
    /// `W_±(H, H_{k,pp})`.
    Pp(u8),
    /// `W_±(H, H_{k,ac})`.
    Ac(u8),
    /// `W_±(H, H_3)`.
    Quadrant,
    /// `W_±(H_{k,ac}, H_3)`, with values in channel `k`.
    ChannelAc(u8),
    /// `Omega_±` with the given coefficient of `W_±(H, H_3)`.
    Omega(f64),
}

impl WaveKind {
    /// Channel of the input vector.
    pub fn input_channel(self) -> u8 {
        match self {
            WaveKind::Pp(k) | WaveKind::Ac(k) => k,
            WaveKind::Quadrant | WaveKind::ChannelAc(_) | WaveKind::Omega(_) => 3,
        }
    }

    pub fn label(self) -> String {
        match self {
            WaveKind::Pp(k) => format!("W(H,H{k}pp)"),
            WaveKind::Ac(k) => format!("W(H,H{k}ac)"),
            WaveKind::Quadrant => "W(H,H3)".into(),
            WaveKind::ChannelAc(k) => format!("W(H{k}ac,H3)"),
            WaveKind::Omega(c) => format!("Omega[{c}]"),
        }
    }
}

/// Finite-time samples of one wave operator on one vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveSeries {
    pub kind: WaveKind,
    pub sign: Sign,
    pub times: Vec<f64>,
    /// `| |W(t) f| - |f| |`.
    pub defects: Vec<f64>,
    /// `|W(t_j) f - W(t_{j-1}) f|` (first entry NaN).
    pub tails: Vec<f64>,
    pub reflection_time: f64,
    #[serde(skip)]
    pub images: Vec<CVec>,
}

impl WaveSeries {
    pub fn last(&self) -> &[Complex64] {
        self.images.last().map(|v| v.as_slice()).unwrap_or(&[])
    }

    /// Defects non-increasing along the grid (up to `slack`).
    pub fn defects_monotone(&self, slack: f64) -> bool {
        self.defects.windows(2).all(|w| w[1] <= w[0] + slack)
    }

    /// True at every sample taken before the reflection time.
    pub fn valid(&self) -> Vec<bool> {
        self.times.iter().map(|&t| t < self.reflection_time).collect()
    }
}

/// Exact channel dynamics, identification maps and the propagator of `H`.
pub struct Scatterer<'a> {
    pub model: &'a CornerModel,
    pub h: &'a SparseHermitian,
    pub prop: Propagator<'a>,
    /// Channels 1, 2, 3 in order.
    pub chans: Vec<ChannelEvolution>,
    pub maps: Vec<Identification>,
    pub lifts: Vec<QuadrantLift>,
    pub reflection_time: f64,
}

impl<'a> Scatterer<'a> {
    pub fn new(model: &'a CornerModel, h: &'a SparseHermitian, spec: PropagatorSpec) -> Result<Self> {
        let chans = (1..=3u8)
            .map(|k| ChannelEvolution::new(model, k))
            .collect::<Result<Vec<_>>>()?;
        let maps = chans
            .iter()
            .map(|c| Identification::new(model, c))
            .collect::<Result<Vec<_>>>()?;
        let lifts = vec![QuadrantLift::new(model, 1)?, QuadrantLift::new(model, 2)?];
        Ok(Self {
            model,
            h,
            prop: Propagator::new(h, spec),
            chans,
            maps,
            lifts,
            reflection_time: reflection_time(model),
        })
    }

    pub fn chan(&self, k: u8) -> Result<&ChannelEvolution> {
        match k {
            1..=3 => Ok(&self.chans[k as usize - 1]),
            _ => Err(Error::InvalidChannel(k)),
        }
    }

    pub fn map(&self, k: u8) -> Result<&Identification> {
        match k {
            1..=3 => Ok(&self.maps[k as usize - 1]),
            _ => Err(Error::InvalidChannel(k)),
        }
    }

    fn lift(&self, k: u8) -> Result<&QuadrantLift> {
        match k {
            1 | 2 => Ok(&self.lifts[k as usize - 1]),
            _ => Err(Error::InvalidChannel(k)),
        }
    }

    /// `exp(i s t H) psi`.
    fn heisenberg_out(&self, psi: &[Complex64], s: f64, t: f64) -> Result<CVec> {
        self.prop.propagate(psi, -s * t)
    }

    /// The quadrant-to-global operator `sum_k J_k Pi_{k,ac} J'_k - c J_3`.
    pub fn omega_kernel(&self, q: &[Complex64], coefficient: f64) -> Result<CVec> {
        let mut out = self.map(3)?.apply(q);
        out.iter_mut().for_each(|x| *x *= -coefficient);
        for k in 1..=2u8 {
            let ch = self.lift(k)?.apply(q);
            let ac = self.chan(k)?.project(&ch, Part::Ac);
            let g = self.map(k)?.apply(&ac);
            caxpy(Complex64::new(1.0, 0.0), &g, &mut out);
        }
        Ok(out)
    }

    /// `W(t) f` for one kind, sign and time.
    pub fn image(&self, kind: WaveKind, sign: Sign, f: &[Complex64], t: f64) -> Result<CVec> {
        let s = sign.value();
        match kind {
            WaveKind::Pp(k) | WaveKind::Ac(k) => {
                if k == 3 {
                    return Err(Error::InvalidChannel(3));
                }
                let part = if matches!(kind, WaveKind::Pp(_)) { Part::Pp } else { Part::Ac };
                let v = self.chan(k)?.evolve(f, s * t, part);
                self.heisenberg_out(&self.map(k)?.apply(&v), s, t)
            }
            WaveKind::Quadrant => {
                let v = self.chan(3)?.evolve(f, s * t, Part::All);
                self.heisenberg_out(&self.map(3)?.apply(&v), s, t)
            }
            WaveKind::ChannelAc(k) => {
                let v = self.chan(3)?.evolve(f, s * t, Part::All);
                let ch = self.lift(k)?.apply(&v);
                Ok(self.chan(k)?.evolve(&ch, -s * t, Part::Ac))
            }
            WaveKind::Omega(c) => {
                let v = self.chan(3)?.evolve(f, s * t, Part::All);
                self.heisenberg_out(&self.omega_kernel(&v, c)?, s, t)
            }
        }
    }

    /// Adjoint of the finite-time `W_±(H_{k,ac}, H_3)`, channel `k` to quadrant.
    pub fn channel_ac_adjoint(&self, k: u8, sign: Sign, ch: &[Complex64], t: f64) -> Result<CVec> {
        let s = sign.value();
        let v = self.chan(k)?.evolve(ch, s * t, Part::Ac);
        let q = self.lift(k)?.adjoint(&v);
        Ok(self.chan(3)?.evolve(&q, -s * t, Part::All))
    }

    pub fn series(&self, kind: WaveKind, sign: Sign, f: &[Complex64], times: &[f64]) -> Result<WaveSeries> {
        let nf = cnorm(f);
        let mut out = WaveSeries {
            kind,
            sign,
            times: times.to_vec(),
            defects: Vec::new(),
            tails: Vec::new(),
            reflection_time: self.reflection_time,
            images: Vec::new(),
        };
        for &t in times {
            let w = self.image(kind, sign, f, t)?;
            out.defects.push((cnorm(&w) - nf).abs());
            out.tails
                .push(out.images.last().map_or(f64::NAN, |p: &CVec| cdiff_norm(p, &w)));
            out.images.push(w);
        }
        Ok(out)
    }

    /// `W f` with `J` replaced by `(1 - kappa_k) J_unweighted` at each time:
    /// the part of the channel state the cutoff discards.
    pub fn discarded_part(&self, k: u8, sign: Sign, f: &[Complex64], t: f64) -> Result<CVec> {
        let s = sign.value();
        let chan = self.chan(k)?;
        let v = chan.evolve(f, s * t, Part::Pp);
        let map = self.map(k)?;
        let mut g = vec![Complex64::default(); map.global_dim];
        for ((&site, &w), x) in map.sites.iter().zip(&map.weights).zip(&v) {
            g[site] = x * (1.0 - w);
        }
        self.heisenberg_out(&g, s, t)
    }

    /// `<J_1 exp(∓itH_{1,pp}) f1, J_2 exp(∓itH_{2,pp}) f2>`.
    pub fn pp_cross(&self, f1: &[Complex64], f2: &[Complex64], sign: Sign, t: f64) -> Result<Complex64> {
        let s = sign.value();
        let a = self.map(1)?.apply(&self.chan(1)?.evolve(f1, s * t, Part::Pp));
        let b = self.map(2)?.apply(&self.chan(2)?.evolve(f2, s * t, Part::Pp));
        Ok(cdot(&a, &b))
    }

    /// Largest `|<Omega f_i, Omega f_j> - <f_i, f_j>|` over a packet set.
    pub fn omega_defect(&self, fs: &[CVec], sign: Sign, coefficient: f64, t: f64) -> Result<f64> {
        let images = fs
            .iter()
            .map(|f| self.image(WaveKind::Omega(coefficient), sign, f, t))
            .collect::<Result<Vec<_>>>()?;
        let gi = gram(&images);
        let gf = gram(fs);
        Ok((&gi - &gf).iter().map(|z| z.norm()).fold(0.0, f64::max))
    }
}

/// `G_ij = <v_i, v_j>`.
pub fn gram(vs: &[CVec]) -> DMatrix<Complex64> {
    let n = vs.len();
    DMatrix::from_fn(n, n, |i, j| cdot(&vs[i], &vs[j]))
}

pub fn max_off_diagonal(g: &DMatrix<Complex64>) -> f64 {
    let mut m = 0.0f64;
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            if i != j {
                m = m.max(g[(i, j)].norm());
            }
        }
    }
    m
}

pub fn hermiticity_defect(g: &DMatrix<Complex64>) -> f64 {
    (g - g.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Decay rate `beta` from a fit `log(|Q(t)| / t) ≈ c - beta t`.
pub fn fit_cross_decay(times: &[f64], values: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(values)
        .filter(|(t, v)| **t > 0.0 && **v > 0.0)
        .map(|(t, v)| (*t, (v / t).ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    -loglog_slope(&pts)
}

/// Predicted cross-term decay rate `2 sqrt(mu~_0 - gamma_0)`, continuum and
/// lattice (`2 arcosh(1 + h^2 (mu - gamma)/2) / h`) forms. `gamma_0` is the
/// higher of the two lowest channel bound states and `mu~_0` the smallest
/// fiber eigenvalue above it.
pub fn cross_decay_rate(spec: &ChannelSpectrum, h: f64) -> Result<(f64, f64)> {
    let lowest = |k: u8| -> Result<f64> {
        spec.bound_states(k)?
            .first()
            .map(|s| s.value)
            .ok_or(Error::MissingBoundState { channel: k, index: 0 })
    };
    let gamma = lowest(1)?.max(lowest(2)?);
    let mu = spec
        .mu
        .iter()
        .copied()
        .filter(|&m| m > gamma)
        .fold(f64::INFINITY, f64::min);
    let gap = mu - gamma;
    Ok((2.0 * gap.sqrt(), 2.0 * (1.0 + h * h * gap / 2.0).acosh() / h))
}

/// Sampled escape `sup_t |(1 - chi_T) psi_t|` for each radius `T`.
pub fn escape_curve(model: &CornerModel, prop: &Propagator, psi: &[Complex64], radii: &[f64], times: &[f64]) -> Result<Vec<(f64, f64)>> {
    let mut states = vec![psi.to_vec()];
    states.extend(prop.series(psi, times)?);
    Ok(radii
        .iter()
        .map(|&r| {
            let mask = model.exhaustion_mask(r);
            let sup = states
                .iter()
                .map(|st| {
                    st.iter()
                        .zip(&mask)
                        .map(|(x, m)| x.norm_sqr() * (1.0 - m))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(0.0, f64::max);
            (r, sup)
        })
        .collect())
}

/// Cesàro averages `t^{-1} ∫_0^t |chi_T psi_s|^2 ds` (trapezoidal, step
/// `dt`) reported at every step up to `t_end`.
pub fn cesaro_curve(model: &CornerModel, prop: &Propagator, psi: &[Complex64], radius: f64, dt: f64, t_end: f64) -> Result<Vec<(f64, f64)>> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter("Cesàro step must be positive".into()));
    }
    let mask = model.exhaustion_mask(radius);
    let inside = |st: &[Complex64]| st.iter().zip(&mask).map(|(x, m)| x.norm_sqr() * m).sum::<f64>();
    let steps = (t_end / dt).round() as usize;
    let mut cur = psi.to_vec();
    let mut prev = inside(&cur);
    let mut integral = 0.0;
    let mut out = Vec::with_capacity(steps);
    for j in 1..=steps {
        cur = prop.propagate(&cur, dt)?;
        let v = inside(&cur);
        integral += 0.5 * dt * (prev + v);
        prev = v;
        let t = j as f64 * dt;
        out.push((t, integral / t));
    }
    Ok(out)
}

/// Solution of `gamma(t) phi = psi` over the window basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaSolve {
    /// Extreme eigenvalues of the compression `E_I gamma(t) E_I`.
    pub compressed_min: f64,
    pub compressed_max: f64,
    /// Negative eigenvalues of the compression.
    pub negative: usize,
    /// Strictly positive compression.
    pub positive: bool,
    /// Condition number of the least-squares matrix `gamma(t) V`.
    pub condition: f64,
    /// `|psi - gamma(t) phi| / |psi|`.
    pub residual: f64,
}

/// Subspace searched for `phi` in [`solve_gamma`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaBasis {
    /// Eigenvectors spanning the spectral window.
    Window,
    /// Krylov space of `gamma(t)` started at `psi`, of the given dimension.
    Krylov(usize),
}

/// Least-squares solve of `gamma(t) phi = psi` with `phi` in a subspace:
/// `phi = V c` minimising `|psi - gamma(t) V c|`, where
/// `gamma(t) = exp(iHt) gamma_t exp(-iHt)` and `V` is an orthonormal basis
/// of the window or of a Krylov space.
/// Fails when `gamma(t) V` is not invertible (condition above
/// [`MAX_CONDITION`]). The compression `V^* gamma(t) V` is indefinite on
/// standing-wave windows of a finite box; its signature is reported, not
/// enforced.
pub fn solve_gamma(
    scat: &Scatterer,
    yaf: &Yafaev,
    window: Option<&SpectralWindow>,
    psi: &[Complex64],
    t: f64,
    basis_kind: GammaBasis,
) -> Result<(CVec, GammaSolve)> {
    let gamma = GammaT::new(scat.model, yaf, t, None)?;
    let n = psi.len();
    let apply = |v: &[Complex64]| -> Result<CVec> {
        let st = scat.prop.propagate(v, t)?;
        let g = gamma.apply(scat.h, &st);
        scat.prop.propagate(&g, -t)
    };
    let mut basis: Vec<CVec> = Vec::new();
    let mut cols: Vec<CVec> = Vec::new();
    match basis_kind {
        GammaBasis::Window => {
            let window = window.ok_or(Error::InvalidParameter("window basis needs a spectral window".into()))?;
            for j in 0..window.rank() {
                let v: CVec = window.pairs.vectors.column(j).iter().map(|&x| Complex64::new(x, 0.0)).collect();
                cols.push(apply(&v)?);
                basis.push(v);
            }
        }
        GammaBasis::Krylov(dim) => {
            let np = cnorm(psi);
            if np == 0.0 {
                return Err(Error::Rejected("zero state".into()));
            }
            let mut v: CVec = psi.iter().map(|z| z / np).collect();
            for _ in 0..dim {
                let w = apply(&v)?;
                basis.push(v);
                let mut next = w.clone();
                cols.push(w);
                for _ in 0..2 {
                    for b in &basis {
                        let c = cdot(b, &next);
                        caxpy(-c, b, &mut next);
                    }
                }
                let nn = cnorm(&next);
                if nn < 1e-12 {
                    break;
                }
                v = next.iter().map(|z| z / nn).collect();
            }
        }
    }
    let r = basis.len();
    if r == 0 {
        return Err(Error::EmptyProjector);
    }
    let mut a = DMatrix::<Complex64>::zeros(n, r);
    for (j, c) in cols.iter().enumerate() {
        a.column_mut(j).copy_from_slice(c);
    }
    let compressed = DMatrix::from_fn(r, r, |i, j| cdot(&basis[i], a.column(j).as_slice()));
    let herm = (&compressed + compressed.adjoint()).map(|z| z * 0.5);
    let eig = herm.symmetric_eigen();
    let compressed_min = eig.eigenvalues.min();
    let compressed_max = eig.eigenvalues.max();
    let negative = eig.eigenvalues.iter().filter(|&&l| l < 0.0).count();
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if condition > MAX_CONDITION {
        return Err(Error::Rejected(format!(
            "gamma(t) is not invertible on the subspace (condition {condition:e})"
        )));
    }
    let b = DMatrix::from_column_slice(n, 1, psi);
    let c = svd
        .solve(&b, 0.0)
        .map_err(|e| Error::NonConvergence(format!("gamma least squares: {e}")))?;
    let fit = &a * &c;
    let residual = cdiff_norm(psi, fit.as_slice()) / cnorm(psi);
    let mut phi = vec![Complex64::default(); n];
    for (j, v) in basis.iter().enumerate() {
        caxpy(c[(j, 0)], v, &mut phi);
    }
    Ok((
        phi,
        GammaSolve {
            compressed_min,
            compressed_max,
            negative,
            positive: negative == 0 && compressed_min > 0.0,
            condition,
            residual,
        },
    ))
}

/// Output of the asymptotic-completeness decomposition.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub sign: Sign,
    pub t: f64,
    /// Solution of `gamma(t) phi = psi` on the window.
    pub phi: CVec,
    pub solve: GammaSolve,
    /// `omega_k phi` in channel `k`'s space.
    pub omega: [CVec; 3],
    /// Bound-state parts of `omega_1 phi`, `omega_2 phi`.
    pub pp: [CVec; 2],
    /// Quadrant datum: `omega_3 phi` plus the routed ac parts.
    pub quadrant: CVec,
    pub reconstruction: CVec,
    /// `|psi - Omega phi_3 - sum_k W(H, H_{k,pp}) phi_k| / |psi|`.
    pub residual: f64,
    /// Norm of each contribution to the reconstruction (pp1, pp2, Omega).
    pub weights: [f64; 3],
}

/// Options for [`completeness_decompose`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompletenessOptions {
    pub t: f64,
    pub omega_coefficient: f64,
    /// Maximum `|psi - E_I psi| / |psi|` accepted as a window state.
    pub window_tol: f64,
    pub basis: GammaBasis,
}

impl Default for CompletenessOptions {
    fn default() -> Self {
        Self {
            t: 0.0,
            omega_coefficient: OMEGA_PRINTED,
            window_tol: 1e-6,
            basis: GammaBasis::Window,
        }
    }
}

/// Writes `psi` as `Omega phi_3 + sum_k W(H, H_{k,pp}) phi_k`.
///
/// A given window is enforced as a membership test on `psi`.
/// `phi` solves `gamma(t) phi = psi` ([`solve_gamma`]); then
/// `phi_k = omega_k phi` by Deift–Simon at time `t`, the ac parts of
/// `phi_1, phi_2` are routed back through `W(H_{k,ac}, H_3)^*` and all pieces
/// are pushed forward again. The `Minus` sign uses complex conjugation,
/// which commutes with the real `H`.
pub fn completeness_decompose(
    scat: &Scatterer,
    yaf: &Yafaev,
    window: Option<&SpectralWindow>,
    psi: &[Complex64],
    sign: Sign,
    opts: &CompletenessOptions,
) -> Result<Decomposition> {
    if sign == Sign::Minus {
        let conj: CVec = psi.iter().map(|z| z.conj()).collect();
        let mut d = completeness_decompose(scat, yaf, window, &conj, Sign::Plus, opts)?;
        let cj = |v: &mut CVec| v.iter_mut().for_each(|z| *z = z.conj());
        cj(&mut d.phi);
        d.omega.iter_mut().for_each(cj);
        d.pp.iter_mut().for_each(cj);
        cj(&mut d.quadrant);
        cj(&mut d.reconstruction);
        d.sign = Sign::Minus;
        return Ok(d);
    }
    let t = opts.t;
    let np = cnorm(psi);
    if np == 0.0 {
        return Err(Error::Rejected("zero state".into()));
    }
    if let Some(window) = window {
        let off = cdiff_norm(psi, &window.apply(psi)) / np;
        if off > opts.window_tol {
            return Err(Error::Rejected(format!(
                "state is not in the spectral window (|psi - E psi| / |psi| = {off:e})"
            )));
        }
    }
    let (phi, solve) = solve_gamma(scat, yaf, window, psi, t, opts.basis)?;

    let mut omega: [CVec; 3] = Default::default();
    for k in 1..=3u8 {
        let rep = deift_simon(scat.model, &scat.prop, scat.chan(k)?, yaf, &phi, &[t])?;
        omega[k as usize - 1] = rep.estimate;
    }
    let mut quadrant = omega[2].clone();
    let mut pp: [CVec; 2] = Default::default();
    for k in 1..=2u8 {
        let chan = scat.chan(k)?;
        let o = &omega[k as usize - 1];
        pp[k as usize - 1] = chan.project(o, Part::Pp);
        let ac = chan.project(o, Part::Ac);
        let back = scat.channel_ac_adjoint(k, Sign::Plus, &ac, t)?;
        caxpy(Complex64::new(1.0, 0.0), &back, &mut quadrant);
    }

    let (reconstruction, weights) = recompose(scat, &pp, &quadrant, t, opts.omega_coefficient)?;
    let residual = cdiff_norm(psi, &reconstruction) / np;
    Ok(Decomposition {
        sign,
        t,
        phi,
        solve,
        omega,
        pp,
        quadrant,
        reconstruction,
        residual,
        weights,
    })
}

/// `Omega_+ q + sum_k W_+(H, H_{k,pp}) pp_k` at time `t`, with the norm of
/// each contribution (pp1, pp2, Omega).
pub fn recompose(scat: &Scatterer, pp: &[CVec; 2], quadrant: &[Complex64], t: f64, coefficient: f64) -> Result<(CVec, [f64; 3])> {
    let om = scat.image(WaveKind::Omega(coefficient), Sign::Plus, quadrant, t)?;
    let mut out = om.clone();
    let mut weights = [0.0; 3];
    weights[2] = cnorm(&om);
    for k in 1..=2u8 {
        let w = scat.image(WaveKind::Pp(k), Sign::Plus, &pp[k as usize - 1], t)?;
        weights[k as usize - 1] = cnorm(&w);
        caxpy(Complex64::new(1.0, 0.0), &w, &mut out);
    }
    Ok((out, weights))
}

/// Scattering matrix on a packet basis: least-squares solution of
/// `W_- S = W_+` with columns the basis images.
#[derive(Debug, Clone, PartialEq)]
pub struct SMatrix {
    pub s: DMatrix<Complex64>,
    /// Largest singular value of `S^* S - I`.
    pub unitarity_defect: f64,
    /// Condition number of the `W_-` image matrix.
    pub condition: f64,
    /// `|W_- S - W_+|_F / |W_+|_F`.
    pub residual: f64,
}

/// Condition numbers above this are rejected.
pub const MAX_CONDITION: f64 = 1e8;

pub fn scattering_matrix(minus: &[CVec], plus: &[CVec]) -> Result<SMatrix> {
    let n = minus.len();
    if n == 0 || plus.len() != n {
        return Err(Error::InvalidParameter("basis image sets must be non-empty and equal in size".into()));
    }
    let dim = minus[0].len();
    let a = DMatrix::from_fn(dim, n, |i, j| minus[j][i]);
    let b = DMatrix::from_fn(dim, n, |i, j| plus[j][i]);
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if condition > MAX_CONDITION {
        return Err(Error::IllConditioned(condition));
    }
    let s = svd
        .solve(&b, 0.0)
        .map_err(|e| Error::NonConvergence(format!("least squares: {e}")))?;
    let resid = (&a * &s - &b).norm() / b.norm().max(1e-300);
    let defect_m = s.adjoint() * &s - DMatrix::<Complex64>::identity(n, n);
    let unitarity_defect = defect_m.singular_values().max();
    Ok(SMatrix {
        s,
        unitarity_defect,
        condition,
        residual: resid,
    })
}

/// Löwdin orthonormalisation `V G^{-1/2}` of a set of vectors.
pub fn orthonormalize(vs: &[CVec]) -> Result<Vec<CVec>> {
    let g = gram(vs);
    let eig = g.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| l <= 1e-12) {
        return Err(Error::IllConditioned(f64::INFINITY));
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| Complex64::new(1.0 / l.sqrt(), 0.0)));
    let inv_sqrt = &eig.eigenvectors * d * eig.eigenvectors.adjoint();
    let n = vs.len();
    Ok((0..n)
        .map(|j| {
            let mut out = vec![Complex64::default(); vs[0].len()];
            for i in 0..n {
                caxpy(inv_sqrt[(i, j)], &vs[i], &mut out);
            }
            out
        })
        .collect())
}

/// Wave-operator entry of a scattering report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveEntry {
    pub label: String,
    pub sign: Sign,
    pub times: Vec<f64>,
    pub defects: Vec<f64>,
    pub tails: Vec<f64>,
    pub reflection_time: f64,
}

impl From<&WaveSeries> for WaveEntry {
    fn from(s: &WaveSeries) -> Self {
        Self {
            label: s.kind.label(),
            sign: s.sign,
            times: s.times.clone(),
            defects: s.defects.clone(),
            tails: s.tails.clone(),
            reflection_time: s.reflection_time,
        }
    }
}

/// Serializable summary of a scattering run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ScatteringReport {
    pub waves: Vec<WaveEntry>,
    /// Real and imaginary parts of the image Gram matrix.
    pub gram_re: Vec<Vec<f64>>,
    pub gram_im: Vec<Vec<f64>>,
    pub gram_labels: Vec<String>,
    pub omega_defects: Vec<(f64, f64)>,
    pub completeness_residual: Option<f64>,
    pub s_unitarity_defect: Option<f64>,
    pub s_condition: Option<f64>,
}

pub fn split_complex(m: &DMatrix<Complex64>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let re = (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)].re).collect()).collect();
    let im = (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)].im).collect()).collect();
    (re, im)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::assemble_h;
    use crate::geometry::{layered_config, LayeredSpec};
    use crate::yafaev::YafaevConfig;

    fn model(box_len: usize) -> CornerModel {
        CornerModel::build(&layered_config(&LayeredSpec {
            box_len,
            well1: 2.4,
            ..Default::default()
        }))
        .unwrap()
    }

    fn random(n: usize, seed: u64) -> CVec {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)).collect()
    }

    #[test]
    fn identification_is_a_contraction_with_consistent_adjoint() {
        let m = model(12);
        let h = assemble_h(&m);
        let sc = Scatterer::new(&m, &h, PropagatorSpec::default()).unwrap();
        for k in 1..=3u8 {
            let j = sc.map(k).unwrap();
            assert!(j.norm() <= 1.0);
            let f = random(sc.chan(k).unwrap().dim(), 3);
            let psi = random(m.dim(), 4);
            let lhs = cdot(&j.apply(&f), &psi);
            let rhs = cdot(&f, &j.adjoint(&psi));
            assert!((lhs - rhs).norm() < 1e-12);
        }
        let l = sc.lift(1).unwrap();
        let q = random(m.l1 * m.l2 * m.y_dim, 5);
        let c = random(l.channel_dim, 6);
        assert!((cdot(&l.apply(&q), &c) - cdot(&q, &l.adjoint(&c))).norm() < 1e-12);
    }

    #[test]
    fn far_packets_embed_isometrically_and_near_ones_vanish() {
        let m = model(20);
        let h = assemble_h(&m);
        let sc = Scatterer::new(&m, &h, PropagatorSpec::default()).unwrap();
        let chan = sc.chan(1).unwrap();
        let far = gaussian_profile(m.l1, m.h, 12.0, 1.0, 0.0);
        let f = ChannelPacket::pp(chan, 0, &far).unwrap();
        let g = sc.map(1).unwrap().apply(&f.amps);
        assert!((cnorm(&g) - 1.0).abs() < 1e-12);
        let mut near = vec![Complex64::default(); m.l1];
        near[0] = Complex64::new(1.0, 0.0);
        let f = ChannelPacket::pp(chan, 0, &near).unwrap();
        assert_eq!(cnorm(&sc.map(1).unwrap().apply(&f.amps)), 0.0);
    }

    #[test]
    fn quadrant_kernel_with_unit_coefficient_is_the_corner_cutoff_on_ac_data() {
        // Lifting to channel k and back with the cutoffs reproduces
        // kappa_1 kappa_2 on the quadrant, so the kernel differs from
        // (2 - c) J_3 only through the bound-state projections.
        let m = model(16);
        let h = assemble_h(&m);
        let sc = Scatterer::new(&m, &h, PropagatorSpec::default()).unwrap();
        let a = gaussian_profile(m.l1, m.h, 10.0, 2.0, 0.5);
        let c = gaussian_profile(m.l2, m.h, 11.0, 2.0, 0.5);
        let q = ChannelPacket::quadrant(&m, &a, &c, &[0.5; 4]).unwrap();
        let k2 = sc.omega_kernel(&q.amps, 2.0).unwrap();
        let k1 = sc.omega_kernel(&q.amps, 1.0).unwrap();
        let j3 = sc.map(3).unwrap().apply(&q.amps);
        let d: CVec = k1.iter().zip(&k2).map(|(a, b)| a - b).collect();
        assert!(cdiff_norm(&d, &j3) < 1e-12);
        // With the printed coefficient the kernel is what the bound states
        // remove: small for data far from the faces.
        assert!(cnorm(&k2) < 1e-3);
    }

    #[test]
    fn s_matrix_of_identical_images_is_identity() {
        let vs: Vec<CVec> = (0..3).map(|s| random(20, s)).collect();
        let s = scattering_matrix(&vs, &vs).unwrap();
        assert!(s.residual < 1e-12);
        let id = DMatrix::<Complex64>::identity(3, 3);
        assert!((&s.s - id).norm() < 1e-10);
        let o = orthonormalize(&vs).unwrap();
        let g = gram(&o);
        assert!((g - DMatrix::<Complex64>::identity(3, 3)).norm() < 1e-12);
    }

    #[test]
    fn ruelle_curves_vanish_on_zero_state() {
        let m = model(10);
        let h = assemble_h(&m);
        let prop = Propagator::new(&h, PropagatorSpec::default());
        let z = vec![Complex64::default(); m.dim()];
        for (_, v) in escape_curve(&m, &prop, &z, &[2.0, 5.0], &[1.0, 2.0]).unwrap() {
            assert_eq!(v, 0.0);
        }
        for (_, v) in cesaro_curve(&m, &prop, &z, 3.0, 0.5, 2.0).unwrap() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn gamma_solve_residual_matches_a_direct_application() {
        let m = model(12);
        let h = assemble_h(&m);
        let sc = Scatterer::new(&m, &h, PropagatorSpec::default()).unwrap();
        let yaf = Yafaev::new(YafaevConfig::default()).unwrap();
        let psi = random(m.dim(), 8);
        let t = 3.0;
        let (phi, info) = solve_gamma(&sc, &yaf, None, &psi, t, GammaBasis::Krylov(12)).unwrap();
        let gamma = GammaT::new(&m, &yaf, t, None).unwrap();
        let st = sc.prop.propagate(&phi, t).unwrap();
        let back = sc.prop.propagate(&gamma.apply(&h, &st), -t).unwrap();
        let direct = cdiff_norm(&back, &psi) / cnorm(&psi);
        assert!((direct - info.residual).abs() < 1e-8, "{direct} vs {}", info.residual);
        assert!(info.condition.is_finite() && info.condition <= MAX_CONDITION);
        assert!(info.compressed_min <= info.compressed_max);
        assert!(matches!(
            solve_gamma(&sc, &yaf, None, &psi, t, GammaBasis::Window),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn decomposition_recomposes_and_conjugates() {
        let m = model(12);
        let h = assemble_h(&m);
        let sc = Scatterer::new(&m, &h, PropagatorSpec::default()).unwrap();
        let yaf = Yafaev::new(YafaevConfig::default()).unwrap();
        let psi = random(m.dim(), 9);
        let opts = CompletenessOptions {
            t: 2.0,
            basis: GammaBasis::Krylov(10),
            ..Default::default()
        };
        let d = completeness_decompose(&sc, &yaf, None, &psi, Sign::Plus, &opts).unwrap();
        let (rec, weights) = recompose(&sc, &d.pp, &d.quadrant, opts.t, opts.omega_coefficient).unwrap();
        assert!(cdiff_norm(&rec, &d.reconstruction) < 1e-10);
        assert!(weights.iter().zip(&d.weights).all(|(a, b)| (a - b).abs() < 1e-10));
        assert!((cdiff_norm(&psi, &rec) / cnorm(&psi) - d.residual).abs() < 1e-10);
        let conj: CVec = psi.iter().map(|z| z.conj()).collect();
        let dm = completeness_decompose(&sc, &yaf, None, &conj, Sign::Minus, &opts).unwrap();
        let back: CVec = dm.phi.iter().map(|z| z.conj()).collect();
        assert!(cdiff_norm(&back, &d.phi) < 1e-10);
        assert!((dm.residual - d.residual).abs() < 1e-10);
    }

    #[test]
    fn cross_fit_recovers_a_synthetic_rate() {
        let ts: Vec<f64> = (1..20).map(|i| i as f64).collect();
        let vs: Vec<f64> = ts.iter().map(|t| 3.0 * t * (-1.3 * t).exp()).collect();
        assert!((fit_cross_decay(&ts, &vs) - 1.3).abs() < 1e-10);
    }
}
