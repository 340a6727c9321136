//! Exact reference solvers: separable product geometries through dense
//! factor spectral calculus, and free half-line dynamics through the
//! discrete sine transform.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::assembly::{assemble_b, kappa, kappa_prime};
use crate::error::{Error, Result};
use crate::geometry::{product_config, CornerModel, ProductFactor, RegionTag};
use crate::linalg::{cnorm, dense_eigh, CVec, EigenPairs, DENSE_LIMIT};
use crate::propagation::ChannelEvolution;
use crate::scattering::{dst_mode, dst_momentum, scattering_matrix, SMatrix, Sign, WaveKind};
use crate::sparse::{SparseHermitian, Symmetry, TripletBuilder};
use crate::spectral::ChannelSpectrum;
use crate::yafaev::loglog_slope;

const I: Complex64 = Complex64::new(0.0, 1.0);

/// Factor operator on `Z_P = P ∪ (half-line x ∂P)`; half-line site `(i, a)`
/// sits at `|P| + i |∂P| + a`.
pub fn factor_operator(f: &ProductFactor, len: usize, h: f64) -> Result<SparseHermitian> {
    let np = f.compact.sites;
    let bp = f.boundary.len();
    check_cross(f)?;
    let w = 1.0 / (h * h);
    let mut t = TripletBuilder::new(np + len * bp);
    for &(a, b, wt) in &f.compact.edges {
        t.add_edge(a, b, wt);
    }
    for (i, &v) in f.compact.potential.iter().enumerate() {
        t.add(i, i, v);
    }
    let hl = |i: usize, a: usize| np + i * bp + a;
    for i in 0..len {
        for a in 0..bp {
            for b in 0..bp {
                t.add(hl(i, a), hl(i, b), f.cross[(a, b)]);
            }
            if i == 0 {
                t.add_edge(f.boundary[a], hl(0, a), w);
            }
            if i + 1 < len {
                t.add_edge(hl(i, a), hl(i + 1, a), w);
            } else {
                t.add(hl(i, a), hl(i, a), w);
            }
        }
    }
    Ok(t.build(Symmetry::Hermitian))
}

/// Half-line channel operator `b ⊗ I + I ⊗ C` on `len x |∂P|`.
pub fn halfline_operator(f: &ProductFactor, len: usize, h: f64) -> Result<SparseHermitian> {
    check_cross(f)?;
    let bp = f.boundary.len();
    let mut t = TripletBuilder::new(bp);
    for a in 0..bp {
        for b in 0..bp {
            t.add(a, b, f.cross[(a, b)]);
        }
    }
    Ok(assemble_b(len, h)?.kron_sum(&t.build(Symmetry::Hermitian)))
}

fn check_cross(f: &ProductFactor) -> Result<()> {
    let bp = f.boundary.len();
    if f.cross.nrows() != bp || f.cross.ncols() != bp {
        return Err(Error::Geometry("cross-section operator has wrong size".into()));
    }
    Ok(())
}

fn check_budget(dim: usize) -> Result<()> {
    if dim > DENSE_LIMIT {
        return Err(Error::DimensionBudget { dim, budget: DENSE_LIMIT });
    }
    Ok(())
}

/// Dense spectral data of one factor.
#[derive(Debug, Clone)]
pub struct FactorData {
    pub compact: usize,
    pub boundary: usize,
    pub len: usize,
    pub h: f64,
    pub op: SparseHermitian,
    pub full: EigenPairs,
    pub halfline: EigenPairs,
    /// Continuum onset `min spec C`.
    pub threshold: f64,
}

impl FactorData {
    pub fn new(f: &ProductFactor, len: usize, h: f64) -> Result<Self> {
        let op = factor_operator(f, len, h)?;
        let half = halfline_operator(f, len, h)?;
        check_budget(op.dim())?;
        let threshold = dense_eigh(&f.cross).values.first().copied().unwrap_or(0.0);
        Ok(Self {
            compact: f.compact.sites,
            boundary: f.boundary.len(),
            len,
            h,
            full: dense_eigh(&op.to_dense()),
            halfline: dense_eigh(&half.to_dense()),
            op,
            threshold,
        })
    }

    pub fn dim(&self) -> usize {
        self.compact + self.len * self.boundary
    }

    pub fn halfline_dim(&self) -> usize {
        self.len * self.boundary
    }

    /// Eigenvalues strictly below the continuum onset.
    pub fn bound_values(&self) -> Vec<f64> {
        self.full.values.iter().copied().filter(|&v| v < self.threshold).collect()
    }

    fn propagator(e: &EigenPairs, t: f64) -> DMatrix<Complex64> {
        let v = e.vectors.map(|x| Complex64::new(x, 0.0));
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            e.len(),
            e.values.iter().map(|&l| (-I * l * t).exp()),
        ));
        &v * d * v.transpose()
    }

    /// Cutoff embedding `J_P`: half-line site `(i, a)` to the factor with
    /// weight `kappa(h (i + 1))`.
    pub fn embedding(&self) -> DMatrix<Complex64> {
        let mut j = DMatrix::zeros(self.dim(), self.halfline_dim());
        for i in 0..self.len {
            let k = kappa(self.h * (i + 1) as f64);
            for a in 0..self.boundary {
                let c = i * self.boundary + a;
                j[(self.compact + c, c)] = Complex64::new(k, 0.0);
            }
        }
        j
    }

    /// Finite-time factor wave operator `exp(i s t A) J exp(-i s t (b + C))`.
    pub fn wave(&self, sign: Sign, t: f64) -> DMatrix<Complex64> {
        let s = sign.value();
        Self::propagator(&self.full, -s * t) * self.embedding() * Self::propagator(&self.halfline, s * t)
    }

    /// Spectral projector onto eigenvectors below (`pp`) or above the onset.
    pub fn projector(&self, pp: bool) -> DMatrix<Complex64> {
        let n = self.dim();
        let mut p = DMatrix::zeros(n, n);
        for (j, &l) in self.full.values.iter().enumerate() {
            if (l < self.threshold) == pp {
                let v = self.full.vectors.column(j);
                for r in 0..n {
                    for c in 0..n {
                        p[(r, c)] += Complex64::new(v[r] * v[c], 0.0);
                    }
                }
            }
        }
        p
    }
}

/// Separable corner geometry `Z_P x Z_Q` with its factor oracles.
#[derive(Debug, Clone)]
pub struct ProductModel {
    pub model: CornerModel,
    pub p: FactorData,
    pub q: FactorData,
    /// Global site of product index `zp * dim_Q + zq`.
    pub site_map: Vec<usize>,
}

impl ProductModel {
    pub fn new(p: &ProductFactor, q: &ProductFactor, h: f64, box_lengths: [usize; 2]) -> Result<Self> {
        let model = CornerModel::build(&product_config(p, q, h, box_lengths)?)?;
        let pd = FactorData::new(p, box_lengths[0], h)?;
        let qd = FactorData::new(q, box_lengths[1], h)?;
        let (np, nq, bp, bq) = (pd.compact, qd.compact, pd.boundary, qd.boundary);
        let mut site_map = Vec::with_capacity(pd.dim() * qd.dim());
        for zp in 0..pd.dim() {
            for zq in 0..qd.dim() {
                let tag = match (zp < np, zq < nq) {
                    (true, true) => RegionTag::X0 { site: zp * nq + zq },
                    (false, true) => {
                        let (i1, a) = ((zp - np) / bp, (zp - np) % bp);
                        RegionTag::Cyl1 { i1, site: a * nq + zq }
                    }
                    (true, false) => {
                        let (i2, b) = ((zq - nq) / bq, (zq - nq) % bq);
                        RegionTag::Cyl2 { i2, site: zp * bq + b }
                    }
                    (false, false) => {
                        let (i1, a) = ((zp - np) / bp, (zp - np) % bp);
                        let (i2, b) = ((zq - nq) / bq, (zq - nq) % bq);
                        RegionTag::Quadrant { i1, i2, y: a * bq + b }
                    }
                };
                site_map.push(model.site(tag));
            }
        }
        Ok(Self {
            model,
            p: pd,
            q: qd,
            site_map,
        })
    }

    /// Kronecker sum `A_P ⊗ I + I ⊗ A_Q` in product indexing.
    pub fn kronecker_sum(&self) -> SparseHermitian {
        self.p.op.kron_sum(&self.q.op)
    }

    /// Largest entrywise gap between `h` (global indexing) and the Kronecker
    /// sum mapped through the site map, over the union of both patterns.
    pub fn kronecker_defect(&self, h: &SparseHermitian) -> f64 {
        let k = self.kronecker_sum();
        let mut inverse = vec![0usize; self.site_map.len()];
        for (i, &g) in self.site_map.iter().enumerate() {
            inverse[g] = i;
        }
        let a = k
            .triplets()
            .map(|(r, c, v)| (v - h.get(self.site_map[r], self.site_map[c])).abs())
            .fold(0.0, f64::max);
        let b = h
            .triplets()
            .map(|(r, c, v)| (v - k.get(inverse[r], inverse[c])).abs())
            .fold(0.0, f64::max);
        a.max(b)
    }

    pub fn to_tensor(&self, global: &[Complex64]) -> DMatrix<Complex64> {
        let nq = self.q.dim();
        DMatrix::from_fn(self.p.dim(), nq, |zp, zq| global[self.site_map[zp * nq + zq]])
    }

    pub fn to_global(&self, m: &DMatrix<Complex64>) -> CVec {
        let nq = self.q.dim();
        let mut out = vec![Complex64::default(); self.site_map.len()];
        for zp in 0..self.p.dim() {
            for zq in 0..nq {
                out[self.site_map[zp * nq + zq]] = m[(zp, zq)];
            }
        }
        out
    }

    /// Exact finite-time image of a channel vector under `kind`, computed by
    /// factor spectral calculus. `f` is laid out as the pipeline's channel
    /// space of `chan`.
    pub fn image(&self, chan: &ChannelEvolution, kind: WaveKind, sign: Sign, f: &[Complex64], t: f64) -> Result<CVec> {
        let m = self.to_tensor(&chan.embed(f));
        let (np, nq) = (self.p.compact, self.q.compact);
        let rows_half = |m: &DMatrix<Complex64>| m.rows(np, self.p.halfline_dim()).into_owned();
        let cols_half = |m: &DMatrix<Complex64>| m.columns(nq, self.q.halfline_dim()).into_owned();
        let out = match kind {
            WaveKind::Pp(1) => {
                let pq = self.q.projector(true);
                self.p.wave(sign, t) * rows_half(&m) * pq.transpose()
            }
            WaveKind::Pp(2) => {
                let pp = self.p.projector(true);
                pp * cols_half(&m) * self.q.wave(sign, t).transpose()
            }
            WaveKind::Ac(1) => {
                let pq = self.q.projector(false);
                self.p.wave(sign, t) * rows_half(&m) * pq.transpose()
            }
            WaveKind::Ac(2) => {
                let pp = self.p.projector(false);
                pp * cols_half(&m) * self.q.wave(sign, t).transpose()
            }
            WaveKind::Quadrant => {
                let f3 = m.view((np, nq), (self.p.halfline_dim(), self.q.halfline_dim())).into_owned();
                self.p.wave(sign, t) * f3 * self.q.wave(sign, t).transpose()
            }
            WaveKind::Omega(c) => {
                let f3 = m.view((np, nq), (self.p.halfline_dim(), self.q.halfline_dim())).into_owned();
                let wp = self.p.wave(sign, t);
                let wq = self.q.wave(sign, t);
                let ac_p = self.p.projector(false) * &wp;
                let ac_q = self.q.projector(false) * &wq;
                &wp * &f3 * ac_q.transpose() + ac_p * &f3 * wq.transpose()
                    - (&wp * &f3 * wq.transpose()).map(|z| z * c)
            }
            _ => return Err(Error::InvalidParameter(format!("no product oracle for {}", kind.label()))),
        };
        Ok(self.to_global(&out))
    }

    /// Exact `S` on a packet basis at time `t`: least squares `W_- S = W_+`
    /// over the oracle images.
    pub fn scattering_matrix(
        &self,
        chan: &ChannelEvolution,
        kind: WaveKind,
        packets: &[CVec],
        minus_packets: &[CVec],
        t: f64,
    ) -> Result<SMatrix> {
        let plus = packets
            .iter()
            .map(|f| self.image(chan, kind, Sign::Plus, f, t))
            .collect::<Result<Vec<_>>>()?;
        let minus = minus_packets
            .iter()
            .map(|f| self.image(chan, kind, Sign::Minus, f, t))
            .collect::<Result<Vec<_>>>()?;
        scattering_matrix(&minus, &plus)
    }
}

/// Stationary scattering phase of a one-fiber factor (`|∂P| = 1`) at
/// half-line momentum `k`: the ratio `S(k)` in `psi_j = exp(-i k u_j) +
/// S exp(i k u_j)` of the regular solution continued onto the half-line.
pub fn factor_phase(f: &ProductFactor, h: f64, k: f64) -> Result<Complex64> {
    if f.boundary.len() != 1 {
        return Err(Error::InvalidParameter("factor phase needs a one-site cross-section".into()));
    }
    let np = f.compact.sites;
    let w = 1.0 / (h * h);
    let c = f.cross[(0, 0)];
    let e = c + (2.0 - 2.0 * (k * h).cos()) * w;
    let boundary = f.boundary[0];
    let mut a = DMatrix::<f64>::zeros(np, np);
    for &(i, j, wt) in &f.compact.edges {
        a[(i, i)] += wt;
        a[(j, j)] += wt;
        a[(i, j)] -= wt;
        a[(j, i)] -= wt;
    }
    for (i, &v) in f.compact.potential.iter().enumerate() {
        a[(i, i)] += v;
    }
    a[(boundary, boundary)] += w;
    for i in 0..np {
        a[(i, i)] -= e;
    }
    // Regular solution on P with the boundary value fixed to 1.
    let others: Vec<usize> = (0..np).filter(|&i| i != boundary).collect();
    let mut psi = vec![0.0; np];
    psi[boundary] = 1.0;
    if !others.is_empty() {
        let m = DMatrix::from_fn(others.len(), others.len(), |r, s| a[(others[r], others[s])]);
        let rhs = nalgebra::DVector::from_iterator(others.len(), others.iter().map(|&r| -a[(r, boundary)]));
        let sol = m
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::NonConvergence("factor phase: singular compact block".into()))?;
        for (r, &i) in others.iter().enumerate() {
            psi[i] = sol[r];
        }
    }
    let row: f64 = (0..np).map(|j| a[(boundary, j)] * psi[j]).sum();
    // Equation at the boundary site: row - w psi_0 = 0.
    let psi0 = row / w;
    // Free solution alpha e^{-ik u} + beta e^{ik u}, with the boundary site at
    // u = 0 and the first half-line site at u = h.
    let (em, ep) = ((-I * k * h).exp(), (I * k * h).exp());
    let det = ep - em;
    let alpha = (Complex64::new(psi[boundary], 0.0) * ep - psi0) / det;
    let beta = (Complex64::new(psi0, 0.0) - psi[boundary] * em) / det;
    Ok(beta / alpha)
}

/// Sine-transform image `a_check(k) = -i sqrt(2/pi) sum_j h sin(k u_j) a(u_j)`
/// of an l2-normalised grid profile (`a(u_j) = a_j / sqrt(h)`).
pub fn sine_transform(a: &[Complex64], h: f64, k: f64) -> Complex64 {
    let s: Complex64 = a
        .iter()
        .enumerate()
        .map(|(j, &x)| x * (k * h * (j + 1) as f64).sin())
        .sum();
    -I * (2.0 / std::f64::consts::PI).sqrt() * h.sqrt() * s
}

/// `|sum_m |a_check(k_m)|^2 dk - |a|^2|` over the Dirichlet momenta.
pub fn parseval_defect(a: &[Complex64], h: f64) -> f64 {
    let len = a.len();
    let dk = std::f64::consts::PI / ((len + 1) as f64 * h);
    let total: f64 = (1..=len)
        .map(|m| sine_transform(a, h, dst_momentum(m, len, h)).norm_sqr() * dk)
        .sum();
    (total - cnorm(a).powi(2)).abs()
}

/// Exact `exp(-itb) a` for the Dirichlet second difference, via the DST.
pub fn dst_free_evolution(a: &[Complex64], h: f64, t: f64) -> CVec {
    let len = a.len();
    let mut out = vec![Complex64::default(); len];
    for m in 1..=len {
        let s = dst_mode(m, len);
        let c: Complex64 = s.iter().zip(a).map(|(x, y)| y * x).sum();
        let k = dst_momentum(m, len, h);
        let lambda = (2.0 - 2.0 * (k * h).cos()) / (h * h);
        let c = c * (-I * lambda * t).exp();
        for (o, x) in out.iter_mut().zip(&s) {
            *o += c * x;
        }
    }
    out
}

/// Continuum asymptotic profile `(2it)^{-1/2} exp(iu^2/4t) a_check(u/2t)`
/// on the grid, l2-normalised like the input.
pub fn stationary_comparator(a: &[Complex64], h: f64, t: f64) -> CVec {
    let pref = (Complex64::new(0.0, 2.0 * t)).sqrt().inv();
    (0..a.len())
        .map(|j| {
            let u = h * (j + 1) as f64;
            h.sqrt() * pref * (I * u * u / (4.0 * t)).exp() * sine_transform(a, h, u / (2.0 * t))
        })
        .collect()
}

/// One sample of the free-evolution comparator curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparatorSample {
    pub t: f64,
    pub error: f64,
    /// `|exp(-itb) a|`, checks unitarity of the DST evolution.
    pub norm: f64,
}

pub fn comparator_curve(a: &[Complex64], h: f64, times: &[f64]) -> Vec<ComparatorSample> {
    times
        .iter()
        .map(|&t| {
            let psi = dst_free_evolution(a, h, t);
            let c = stationary_comparator(a, h, t);
            let error = psi.iter().zip(&c).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt();
            ComparatorSample { t, error, norm: cnorm(&psi) }
        })
        .collect()
}

/// Decay of the evolved profile inside the cutoff transition region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryPhaseDecay {
    pub times: Vec<f64>,
    /// `|kappa' exp(-i s t b) a|`.
    pub values: Vec<f64>,
    /// Log-log slope over samples above `floor`.
    pub exponent: f64,
    /// Trapezoidal partial integrals of `values`.
    pub partial: Vec<f64>,
}

/// Values below this are treated as rounding noise in the fit.
pub const DECAY_FLOOR: f64 = 1e-13;

pub fn stationary_phase_decay(a: &[Complex64], h: f64, sign: Sign, times: &[f64]) -> StationaryPhaseDecay {
    let weights: Vec<f64> = (0..a.len()).map(|j| kappa_prime(h * (j + 1) as f64)).collect();
    let values: Vec<f64> = times
        .iter()
        .map(|&t| {
            let psi = dst_free_evolution(a, h, sign.value() * t);
            psi.iter()
                .zip(&weights)
                .map(|(x, w)| (x * w).norm_sqr())
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(&values)
        .filter(|(_, &v)| v > DECAY_FLOOR)
        .map(|(&t, &v)| (t.ln(), v.ln()))
        .collect();
    let exponent = if pts.len() >= 2 { loglog_slope(&pts) } else { f64::NEG_INFINITY };
    let mut partial = Vec::with_capacity(times.len());
    let mut acc = 0.0;
    for i in 0..times.len() {
        if i > 0 {
            acc += 0.5 * (values[i] + values[i - 1]) * (times[i] - times[i - 1]);
        }
        partial.push(acc);
    }
    StationaryPhaseDecay {
        times: times.to_vec(),
        values,
        exponent,
        partial,
    }
}

/// Fiber-mode expansion of a channel bound state along the cylinder slices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeFit {
    pub l: usize,
    pub mu: f64,
    /// Slice coefficient `b_{k,l}` extrapolated to `u = 0`.
    pub coefficient: f64,
    pub rate: f64,
    pub continuum_rate: f64,
    /// `arcosh(1 + h^2 (mu - gamma)/2) / h`.
    pub lattice_rate: f64,
    pub relative_error: f64,
    /// Largest slice amplitude of the mode.
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigfunctionFit {
    pub channel: u8,
    pub index: usize,
    pub gamma: f64,
    pub modes: Vec<ModeFit>,
}

/// Slice amplitudes below this are not fitted.
pub const FIT_FLOOR: f64 = 1e-11;

/// Projects the `index`-th bound state of channel `k` onto the fiber modes
/// on every half-line slice and fits `log |c_l(u)|` linearly in `u` over the
/// samples above `FIT_FLOOR`, skipping the first slice and the last quarter
/// of the box.
pub fn quadrant_eigfunction_fit(model: &CornerModel, spec: &ChannelSpectrum, k: u8, index: usize) -> Result<EigfunctionFit> {
    let state = spec.bound_state(k, index)?;
    let n = model.y_dim;
    let (face, len) = match k {
        1 => (model.m1.sites, model.l2),
        2 => (model.m2.sites, model.l1),
        _ => return Err(Error::InvalidChannel(k)),
    };
    let gamma = state.value;
    let stop = len - len / 4;
    let mut modes = Vec::new();
    for (l, &mu) in spec.mu.iter().enumerate() {
        let phi = spec.fiber.column(l);
        let coeffs: Vec<f64> = (0..len)
            .map(|s| (0..n).map(|y| phi[y] * state.vector[face + s * n + y]).sum())
            .collect();
        let amplitude = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        if mu <= gamma || amplitude < FIT_FLOOR {
            continue;
        }
        let pts: Vec<(f64, f64)> = (1..stop)
            .filter(|&s| coeffs[s].abs() > FIT_FLOOR)
            .map(|s| (model.h * (s + 1) as f64, coeffs[s].abs().ln()))
            .collect();
        if pts.len() < 3 {
            return Err(Error::InsufficientDecay(format!("mode {l}: {} usable slices", pts.len())));
        }
        let slope = loglog_slope(&pts);
        let (u0, y0) = pts[0];
        let rate = -slope;
        let gap = mu - gamma;
        let lattice_rate = (1.0 + model.h * model.h * gap / 2.0).acosh() / model.h;
        modes.push(ModeFit {
            l,
            mu,
            coefficient: (y0 + rate * u0).exp(),
            rate,
            continuum_rate: gap.sqrt(),
            lattice_rate,
            relative_error: (rate - lattice_rate).abs() / lattice_rate,
            amplitude,
        });
    }
    Ok(EigfunctionFit {
        channel: k,
        index,
        gamma,
        modes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::assemble_h;
    use crate::geometry::{layered_config, LayeredSpec};
    use crate::scattering::band_limited_profile;

    fn factors() -> (ProductFactor, ProductFactor) {
        (
            ProductFactor::path(4, Some((0, 1.5)), 0.0),
            ProductFactor::path(3, Some((0, 2.0)), 0.5),
        )
    }

    #[test]
    fn kronecker_identity_is_exact() {
        let (p, q) = factors();
        let pm = ProductModel::new(&p, &q, 1.0, [12, 10]).unwrap();
        let h = assemble_h(&pm.model);
        assert_eq!(pm.kronecker_defect(&h), 0.0);
        let mut seen = pm.site_map.clone();
        seen.sort_unstable();
        assert!(seen.iter().enumerate().all(|(i, &s)| i == s));
    }

    #[test]
    fn free_evolution_of_a_mode_is_a_phase() {
        let len = 40;
        let m = 3;
        let a: CVec = dst_mode(m, len).into_iter().map(|x| Complex64::new(x, 0.0)).collect();
        let k = dst_momentum(m, len, 1.0);
        let lambda = 2.0 - 2.0 * k.cos();
        let out = dst_free_evolution(&a, 1.0, 2.5);
        let phase = (-I * lambda * 2.5).exp();
        for (o, x) in out.iter().zip(&a) {
            assert!((o - x * phase).norm() < 1e-12);
        }
    }

    #[test]
    fn parseval_holds_for_the_sine_transform() {
        let a = band_limited_profile(200, 0.2, 0.5, 1.0, 10.0).unwrap();
        assert!(parseval_defect(&a, 0.2) < 1e-12);
    }

    #[test]
    fn factor_phase_has_unit_modulus() {
        let (p, q) = factors();
        for k in [0.3, 0.9, 1.7] {
            assert!((factor_phase(&p, 1.0, k).unwrap().norm() - 1.0).abs() < 1e-10);
            assert!((factor_phase(&q, 1.0, k).unwrap().norm() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn factor_phase_of_free_half_line() {
        // A single undecorated site glued to the half-line is a Neumann end:
        // psi = cos(k (x + 1/2)), so S = exp(ik).
        let p = ProductFactor::path(1, None, 0.0);
        let k = 0.7;
        let s = factor_phase(&p, 1.0, k).unwrap();
        assert!((s - (I * k).exp()).norm() < 1e-12);
    }

    #[test]
    fn fit_recovers_lattice_rates() {
        let m = CornerModel::build(&layered_config(&LayeredSpec {
            box_len: 40,
            well1: 2.4,
            ..Default::default()
        }))
        .unwrap();
        let spec = ChannelSpectrum::compute(&m, 4).unwrap();
        let fit = quadrant_eigfunction_fit(&m, &spec, 1, 0).unwrap();
        assert!(!fit.modes.is_empty());
        assert!(fit.modes.iter().all(|f| f.mu > fit.gamma));
        assert!(fit.modes[0].relative_error < 0.05, "{:?}", fit.modes[0]);
    }
}
