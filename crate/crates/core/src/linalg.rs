//! Eigen-solvers and small vector kernels.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sparse::SparseHermitian;

/// Dimension up to which eigenproblems are solved densely.
pub const DENSE_LIMIT: usize = 2000;

pub type CVec = Vec<Complex64>;

/// `<a, b>` (conjugate-linear in `a`).
pub fn cdot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

pub fn cnorm(a: &[Complex64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

pub fn cdiff_norm(a: &[Complex64], b: &[Complex64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt()
}

/// `y += s x`.
pub fn caxpy(s: Complex64, x: &[Complex64], y: &mut [Complex64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += s * xi;
    }
}

pub fn to_complex(x: &[f64]) -> CVec {
    x.iter().map(|&v| Complex64::new(v, 0.0)).collect()
}

/// Eigenpairs sorted ascending; eigenvectors are the columns.
#[derive(Debug, Clone)]
pub struct EigenPairs {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

impl EigenPairs {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn vector(&self, i: usize) -> Vec<f64> {
        self.vectors.column(i).iter().copied().collect()
    }

    /// `max_i |H v_i - lambda_i v_i|`.
    pub fn max_residual(&self, op: &SparseHermitian) -> f64 {
        (0..self.len())
            .map(|i| residual(op, self.values[i], &self.vector(i)))
            .fold(0.0, f64::max)
    }

    /// `max |V^T V - I|` entrywise.
    pub fn orthonormality_defect(&self) -> f64 {
        let g = self.vectors.transpose() * &self.vectors;
        let n = g.nrows();
        (g - DMatrix::<f64>::identity(n, n)).amax()
    }

    fn select(&self, keep: impl Fn(f64) -> bool) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(self.values[i])).collect();
        let cols: Vec<DVector<f64>> = idx.iter().map(|&i| self.vectors.column(i).into()).collect();
        let vectors = if cols.is_empty() {
            DMatrix::zeros(self.vectors.nrows(), 0)
        } else {
            DMatrix::from_columns(&cols)
        };
        Self {
            values: idx.iter().map(|&i| self.values[i]).collect(),
            vectors,
        }
    }
}

pub fn residual(op: &SparseHermitian, lambda: f64, v: &[f64]) -> f64 {
    let mut hv = vec![0.0; v.len()];
    op.apply_real(v, &mut hv);
    hv.iter()
        .zip(v)
        .map(|(a, b)| (a - lambda * b).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Full dense eigendecomposition of a real symmetric matrix.
pub fn dense_eigh(m: &DMatrix<f64>) -> EigenPairs {
    let n = m.nrows();
    if n == 0 {
        return EigenPairs {
            values: vec![],
            vectors: DMatrix::zeros(0, 0),
        };
    }
    let eig = SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let cols: Vec<DVector<f64>> = order
        .iter()
        .map(|&i| {
            let mut c: DVector<f64> = eig.eigenvectors.column(i).into();
            fix_sign(c.as_mut_slice());
            c
        })
        .collect();
    EigenPairs {
        values,
        vectors: DMatrix::from_columns(&cols),
    }
}

/// Makes the largest-magnitude entry positive, so outputs are reproducible.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0.0f64;
    let mut sign = 1.0;
    for &x in v.iter() {
        if x.abs() > best + 1e-12 {
            best = x.abs();
            sign = x.signum();
        }
    }
    if sign < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for q in basis {
            let c = dot(q, v);
            v.iter_mut().zip(q).for_each(|(x, y)| *x -= c * y);
        }
    }
}

/// Lowest eigenpairs by Lanczos with full reorthogonalisation.
///
/// Converged vectors are locked and the iteration restarts orthogonal to
/// them, so degenerate eigenvalues are found one copy per sweep. Stops once
/// `count` pairs are locked or a sweep finds nothing new below `cutoff`.
pub fn lanczos_lowest(
    op: &SparseHermitian,
    count: usize,
    cutoff: f64,
    tol: f64,
    max_krylov: usize,
    seed: u64,
) -> Result<EigenPairs> {
    let n = op.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut locked: Vec<(f64, Vec<f64>)> = Vec::new();
    let max_krylov = max_krylov.min(n);
    for _sweep in 0..(4 * count + 8) {
        if locked.len() >= count || locked.len() >= n {
            break;
        }
        let basis_locked: Vec<Vec<f64>> = locked.iter().map(|(_, v)| v.clone()).collect();
        let mut v: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
        orthogonalize(&mut v, &basis_locked);
        let nv = dot(&v, &v).sqrt();
        if nv < 1e-12 {
            break;
        }
        v.iter_mut().for_each(|x| *x /= nv);
        let mut q: Vec<Vec<f64>> = vec![v];
        let mut alpha = Vec::new();
        let mut beta: Vec<f64> = Vec::new();
        let mut found: Vec<(f64, Vec<f64>)> = Vec::new();
        let mut w = vec![0.0; n];
        let limit = max_krylov.min(n - locked.len());
        loop {
            let j = q.len() - 1;
            op.apply_real(&q[j], &mut w);
            let a = dot(&q[j], &w);
            alpha.push(a);
            orthogonalize(&mut w, &basis_locked);
            orthogonalize(&mut w, &q);
            let b = dot(&w, &w).sqrt();
            let k = alpha.len();
            let check = k % 10 == 0 || k == limit || b < 1e-12;
            if check {
                let mut t = DMatrix::<f64>::zeros(k, k);
                for i in 0..k {
                    t[(i, i)] = alpha[i];
                    if i + 1 < k {
                        t[(i, i + 1)] = beta[i];
                        t[(i + 1, i)] = beta[i];
                    }
                }
                let eig = dense_eigh(&t);
                let want = (count - locked.len()).min(k);
                let mut conv = Vec::new();
                for i in 0..want {
                    let est = (b * eig.vectors[(k - 1, i)]).abs();
                    if est <= tol {
                        conv.push(i);
                    } else {
                        break;
                    }
                }
                let done = conv.len() == want || b < 1e-12 || k == limit;
                if done || (conv.len() > 0 && eig.values[conv.len() - 1] > cutoff) {
                    for &i in &conv {
                        let mut x = vec![0.0; n];
                        for (r, qr) in q.iter().enumerate().take(k) {
                            let s = eig.vectors[(r, i)];
                            x.iter_mut().zip(qr).for_each(|(xi, qi)| *xi += s * qi);
                        }
                        let nx = dot(&x, &x).sqrt();
                        x.iter_mut().for_each(|xi| *xi /= nx);
                        found.push((eig.values[i], x));
                    }
                    break;
                }
            }
            if b < 1e-12 || k >= limit {
                break;
            }
            beta.push(b);
            q.push(w.iter().map(|x| x / b).collect());
        }
        // Lock only the lowest new pair per sweep; a single Krylov space can
        // miss copies of degenerate eigenvalues below it.
        found.sort_by(|a, b| a.0.total_cmp(&b.0));
        let Some(first) = found.into_iter().next() else {
            return Err(Error::NonConvergence(format!(
                "Lanczos found no converged pair within {limit} steps"
            )));
        };
        let stop = first.0 > cutoff;
        let (val, mut vec) = first;
        orthogonalize(&mut vec, &basis_locked);
        let nv = dot(&vec, &vec).sqrt();
        vec.iter_mut().for_each(|x| *x /= nv);
        if residual(op, val, &vec) > 10.0 * tol.max(1e-12) * (1.0 + val.abs()) {
            return Err(Error::NonConvergence("Lanczos residual check failed".into()));
        }
        if stop {
            break;
        }
        locked.push((val, vec));
    }
    locked.sort_by(|a, b| a.0.total_cmp(&b.0));
    let values: Vec<f64> = locked.iter().map(|p| p.0).collect();
    let cols: Vec<DVector<f64>> = locked
        .into_iter()
        .map(|(_, mut v)| {
            fix_sign(&mut v);
            DVector::from_vec(v)
        })
        .collect();
    let vectors = if cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&cols)
    };
    Ok(EigenPairs { values, vectors })
}

/// Settings for [`subspace_lowest`].
#[derive(Debug, Clone, Copy)]
pub struct SubspaceOptions {
    pub block: usize,
    pub degree: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub budget: usize,
    pub seed: u64,
}

impl Default for SubspaceOptions {
    fn default() -> Self {
        Self {
            block: 24,
            degree: 24,
            tol: 1e-9,
            max_iter: 200,
            budget: 400,
            seed: 7,
        }
    }
}

fn orthonormal_columns(x: DMatrix<f64>) -> DMatrix<f64> {
    let m = x.ncols();
    let qr = x.qr();
    let q = qr.q();
    q.columns(0, m).into_owned()
}

fn apply_block(op: &SparseHermitian, x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut y = DMatrix::zeros(x.nrows(), x.ncols());
    for j in 0..x.ncols() {
        let xs = x.column(j);
        let mut out = vec![0.0; x.nrows()];
        op.apply_real(xs.as_slice(), &mut out);
        y.column_mut(j).copy_from_slice(&out);
    }
    y
}

/// All eigenpairs with eigenvalue `<= cutoff`, by Chebyshev-filtered
/// subspace iteration with Rayleigh-Ritz. The block grows automatically so
/// that a guard band of unwanted Ritz values is always carried along.
pub fn subspace_lowest(op: &SparseHermitian, cutoff: f64, opts: &SubspaceOptions) -> Result<EigenPairs> {
    let n = op.dim();
    if n <= DENSE_LIMIT {
        let all = dense_eigh(&op.to_dense());
        let sel = all.select(|v| v <= cutoff);
        if sel.len() > opts.budget {
            return Err(Error::ProjectionBudget {
                found: sel.len(),
                budget: opts.budget,
            });
        }
        return Ok(sel);
    }
    let (_, hi) = op.spectral_bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut m = opts.block.clamp(4, n);
    let mut x = DMatrix::from_fn(n, m, |_, _| rng.gen::<f64>() - 0.5);
    x = orthonormal_columns(x);
    for it in 0..opts.max_iter {
        let hx = apply_block(op, &x);
        let g = x.transpose() * &hx;
        let g = (&g + g.transpose()) * 0.5;
        let eig = dense_eigh(&g);
        x = &x * &eig.vectors;
        let hx = hx * &eig.vectors;
        let theta = eig.values;
        let wanted = theta.iter().filter(|&&t| t <= cutoff).count();
        if wanted > opts.budget {
            return Err(Error::ProjectionBudget {
                found: wanted,
                budget: opts.budget,
            });
        }
        let guard = (m / 4).max(6);
        if wanted + guard > m && m < n {
            let grow = (wanted + 2 * guard).min(n) - m;
            let extra = DMatrix::from_fn(n, grow, |_, _| rng.gen::<f64>() - 0.5);
            let mut cols: Vec<DVector<f64>> = (0..m).map(|j| x.column(j).into()).collect();
            cols.extend((0..grow).map(|j| extra.column(j).into()));
            m += grow;
            x = orthonormal_columns(DMatrix::from_columns(&cols));
            continue;
        }
        let res: Vec<f64> = (0..m)
            .map(|j| (hx.column(j) - x.column(j) * theta[j]).norm())
            .collect();
        let ok = (0..wanted).all(|j| res[j] <= opts.tol * (1.0 + theta[j].abs()));
        if ok && it >= 1 {
            let mut out = EigenPairs {
                values: theta[..wanted].to_vec(),
                vectors: x.columns(0, wanted).into_owned(),
            };
            for j in 0..wanted {
                let mut c = out.vectors.column(j).clone_owned();
                fix_sign(c.as_mut_slice());
                out.vectors.column_mut(j).copy_from(&c);
            }
            return Ok(out);
        }
        // Damp [theta_max, hi]; scale relative to the lowest Ritz value.
        let a = theta[m - 1];
        let a0 = theta[0];
        x = chebyshev_filter(op, &x, opts.degree, a, hi, a0);
        x = orthonormal_columns(x);
    }
    Err(Error::NonConvergence(format!(
        "subspace iteration did not converge in {} sweeps",
        opts.max_iter
    )))
}

/// Scaled Chebyshev filter damping `[a, b]` and amplifying below `a`.
fn chebyshev_filter(op: &SparseHermitian, x: &DMatrix<f64>, degree: usize, a: f64, b: f64, a0: f64) -> DMatrix<f64> {
    let e = (b - a) / 2.0;
    let c = (b + a) / 2.0;
    let mut sigma = e / (a0 - c);
    let tau = 2.0 / sigma;
    let mut y = (apply_block(op, x) - x * c) * (sigma / e);
    let mut x_prev = x.clone();
    for _ in 1..degree {
        let sigma_new = 1.0 / (tau - sigma);
        let hy = apply_block(op, &y);
        let y_new = (hy - &y * c) * (2.0 * sigma_new / e) - &x_prev * (sigma * sigma_new);
        x_prev = y;
        y = y_new;
        sigma = sigma_new;
    }
    y
}

/// Conjugate gradients for a Hermitian positive-definite operator.
#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub x: CVec,
    pub iterations: usize,
    pub relative_residual: f64,
}

pub fn conjugate_gradient(
    mut apply: impl FnMut(&[Complex64]) -> CVec,
    b: &[Complex64],
    tol: f64,
    max_iter: usize,
) -> Result<CgOutcome> {
    let n = b.len();
    let bn = cnorm(b);
    if bn == 0.0 {
        return Ok(CgOutcome {
            x: vec![Complex64::default(); n],
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let mut x = vec![Complex64::default(); n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr = cdot(&r, &r).re;
    for it in 0..max_iter {
        if rr.sqrt() <= tol * bn {
            return Ok(CgOutcome {
                x,
                iterations: it,
                relative_residual: rr.sqrt() / bn,
            });
        }
        let ap = apply(&p);
        let pap = cdot(&p, &ap).re;
        if pap <= 0.0 {
            return Err(Error::IllConditioned(f64::INFINITY));
        }
        let alpha = rr / pap;
        caxpy(Complex64::new(alpha, 0.0), &p, &mut x);
        caxpy(Complex64::new(-alpha, 0.0), &ap, &mut r);
        let rr_new = cdot(&r, &r).re;
        let beta = rr_new / rr;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + *pi * beta;
        }
        rr = rr_new;
    }
    if rr.sqrt() <= tol * bn {
        return Ok(CgOutcome {
            x,
            iterations: max_iter,
            relative_residual: rr.sqrt() / bn,
        });
    }
    Err(Error::NonConvergence(format!(
        "CG residual {:e} after {max_iter} iterations",
        rr.sqrt() / bn
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::{Symmetry, TripletBuilder};

    fn path_with_defect(n: usize) -> SparseHermitian {
        let mut t = TripletBuilder::new(n);
        for i in 0..n - 1 {
            t.add_edge(i, i + 1, 1.0);
        }
        t.add(0, 0, -1.5);
        t.add(n - 1, n - 1, 1.0);
        t.build(Symmetry::Hermitian)
    }

    /// 2D grid Laplacian with square symmetry, hence degenerate pairs.
    fn grid(l: usize) -> SparseHermitian {
        let mut t = TripletBuilder::new(l * l);
        for i in 0..l {
            for j in 0..l {
                let s = i * l + j;
                t.add(s, s, 0.0);
                if i + 1 < l {
                    t.add_edge(s, s + l, 1.0);
                }
                if j + 1 < l {
                    t.add_edge(s, s + 1, 1.0);
                }
            }
        }
        t.build(Symmetry::Hermitian)
    }

    #[test]
    fn dense_matches_known_spectrum() {
        let b = crate::assembly::assemble_b(12, 1.0).unwrap();
        let e = dense_eigh(&b.to_dense());
        assert!(e.orthonormality_defect() < 1e-12);
        assert!(e.max_residual(&b) < 1e-12);
        let want = 2.0 - 2.0 * (std::f64::consts::PI / 13.0).cos();
        assert!((e.values[0] - want).abs() < 1e-12);
    }

    #[test]
    fn lanczos_agrees_with_dense() {
        let op = path_with_defect(300);
        let dense = dense_eigh(&op.to_dense());
        let lz = lanczos_lowest(&op, 5, f64::INFINITY, 1e-10, 300, 1).unwrap();
        for i in 0..5 {
            assert!((lz.values[i] - dense.values[i]).abs() < 1e-8, "{i}");
        }
        assert!(lz.orthonormality_defect() < 1e-10);
    }

    #[test]
    fn lanczos_finds_degenerate_copies() {
        let op = grid(12);
        let dense = dense_eigh(&op.to_dense());
        let lz = lanczos_lowest(&op, 4, f64::INFINITY, 1e-10, 144, 3).unwrap();
        for i in 0..4 {
            assert!((lz.values[i] - dense.values[i]).abs() < 1e-8, "{i}: {:?}", lz.values);
        }
    }

    #[test]
    fn subspace_agrees_with_dense() {
        let op = grid(48);
        assert!(op.dim() > DENSE_LIMIT);
        let cutoff = 0.12;
        let got = subspace_lowest(&op, cutoff, &SubspaceOptions::default()).unwrap();
        let mut want = Vec::new();
        for a in 1..=48 {
            for b in 1..=48 {
                let f = |m: usize| 2.0 - 2.0 * (std::f64::consts::PI * m as f64 / 48.0).cos();
                // Neumann-like ends (free boundary) give cos(pi m / l) modes.
                let v = f(a - 1) + f(b - 1);
                if v <= cutoff {
                    want.push(v);
                }
            }
        }
        want.sort_by(f64::total_cmp);
        assert_eq!(got.len(), want.len());
        for (g, w) in got.values.iter().zip(&want) {
            assert!((g - w).abs() < 1e-9);
        }
        assert!(got.max_residual(&op) < 1e-8);
    }

    #[test]
    fn cg_solves_spd() {
        let op = path_with_defect(50);
        let shifted = SparseHermitian::lin_comb(1.0, &op, 3.0, &SparseHermitian::identity(50), Symmetry::Hermitian);
        let b: CVec = (0..50).map(|i| Complex64::new(i as f64, 1.0)).collect();
        let out = conjugate_gradient(|v| shifted.mul_vec(v), &b, 1e-12, 500).unwrap();
        let ax = shifted.mul_vec(&out.x);
        assert!(cdiff_norm(&ax, &b) / cnorm(&b) < 1e-10);
    }
}
