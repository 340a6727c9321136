//! Compressed-row sparse operators.
//!
//! Every operator assembled by this crate has real entries: the Laplacian and
//! its channel pieces are real symmetric, the cutoff and weight fields are
//! real diagonal, and commutators of those are real symmetric or real
//! antisymmetric. Entries are therefore stored as `f64` and applied to complex
//! state vectors; the triplet export writes a zero imaginary column.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Symmetry class of a stored operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Symmetry {
    /// `M = M*` (real symmetric storage).
    Hermitian,
    /// `M = -M*` (real antisymmetric storage), e.g. a commutator `[H, f]`.
    AntiHermitian,
    General,
}

/// A square sparse operator in CSR layout with cached Gershgorin bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseHermitian {
    dim: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
    symmetry: Symmetry,
    bounds: (f64, f64),
}

/// Accumulates `(row, col, value)` contributions; duplicates are summed.
#[derive(Debug, Clone, Default)]
pub struct TripletBuilder {
    dim: usize,
    rows: Vec<BTreeMap<usize, f64>>,
}

impl TripletBuilder {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            rows: vec![BTreeMap::new(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn add(&mut self, row: usize, col: usize, value: f64) {
        *self.rows[row].entry(col).or_insert(0.0) += value;
    }

    /// Adds a symmetric graph edge: `+w` on both diagonals, `-w` off-diagonal.
    pub fn add_edge(&mut self, a: usize, b: usize, w: f64) {
        self.add(a, a, w);
        self.add(b, b, w);
        self.add(a, b, -w);
        self.add(b, a, -w);
    }

    pub fn build(self, symmetry: Symmetry) -> SparseHermitian {
        let mut row_ptr = Vec::with_capacity(self.dim + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for row in self.rows {
            for (c, v) in row {
                if v != 0.0 {
                    col_idx.push(c);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        SparseHermitian::from_csr(self.dim, row_ptr, col_idx, values, symmetry)
    }
}

impl SparseHermitian {
    fn from_csr(
        dim: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<f64>,
        symmetry: Symmetry,
    ) -> Self {
        let mut m = Self {
            dim,
            row_ptr,
            col_idx,
            values,
            symmetry,
            bounds: (0.0, 0.0),
        };
        m.bounds = m.gershgorin();
        m
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let dim = diag.len();
        let mut b = TripletBuilder::new(dim);
        for (i, &d) in diag.iter().enumerate() {
            b.add(i, i, d);
        }
        b.build(Symmetry::Hermitian)
    }

    pub fn identity(dim: usize) -> Self {
        Self::diagonal(&vec![1.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn symmetry(&self) -> Symmetry {
        self.symmetry
    }

    /// Gershgorin enclosure `[lo, hi]` of the spectrum (Hermitian case).
    pub fn spectral_bounds(&self) -> (f64, f64) {
        self.bounds
    }

    fn gershgorin(&self) -> (f64, f64) {
        if self.dim == 0 {
            return (0.0, 0.0);
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for r in 0..self.dim {
            let mut d = 0.0;
            let mut off = 0.0;
            for (c, v) in self.row(r) {
                if c == r {
                    d += v;
                } else {
                    off += v.abs();
                }
            }
            lo = lo.min(d - off);
            hi = hi.max(d + off);
        }
        (lo, hi)
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        match self.col_idx[span.clone()].binary_search(&c) {
            Ok(k) => self.values[span.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.dim).flat_map(move |r| self.row(r).map(move |(c, v)| (r, c, v)))
    }

    /// `y = M x` for real vectors.
    pub fn apply_real(&self, x: &[f64], y: &mut [f64]) {
        for (r, out) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            *out = acc;
        }
    }

    /// `y = M x` for complex vectors. Rows accumulate in storage order, so
    /// results are bitwise reproducible.
    pub fn apply(&self, x: &[Complex64], y: &mut [Complex64]) {
        for (r, out) in y.iter_mut().enumerate() {
            let mut re = 0.0;
            let mut im = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let v = self.values[k];
                let xv = x[self.col_idx[k]];
                re += v * xv.re;
                im += v * xv.im;
            }
            *out = Complex64::new(re, im);
        }
    }

    pub fn mul_vec(&self, x: &[Complex64]) -> Vec<Complex64> {
        let mut y = vec![Complex64::new(0.0, 0.0); self.dim];
        self.apply(x, &mut y);
        y
    }

    /// `<x, M x>` (real part; exact for Hermitian `M`).
    pub fn expectation(&self, x: &[Complex64]) -> f64 {
        let y = self.mul_vec(x);
        x.iter().zip(&y).map(|(a, b)| (a.conj() * b).re).sum()
    }

    pub fn transpose(&self) -> Self {
        let mut b = TripletBuilder::new(self.dim);
        for (r, c, v) in self.triplets() {
            b.add(c, r, v);
        }
        let sym = self.symmetry;
        b.build(sym)
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut m = self.clone();
        for v in &mut m.values {
            *v *= s;
        }
        m.bounds = m.gershgorin();
        m
    }

    /// `a A + b B` with the given symmetry label.
    pub fn lin_comb(a: f64, lhs: &Self, b: f64, rhs: &Self, symmetry: Symmetry) -> Self {
        assert_eq!(lhs.dim, rhs.dim, "dimension mismatch");
        let mut t = TripletBuilder::new(lhs.dim);
        for (r, c, v) in lhs.triplets() {
            t.add(r, c, a * v);
        }
        for (r, c, v) in rhs.triplets() {
            t.add(r, c, b * v);
        }
        t.build(symmetry)
    }

    /// Sparse product `self * rhs`.
    pub fn matmul(&self, rhs: &Self) -> Self {
        assert_eq!(self.dim, rhs.dim, "dimension mismatch");
        let mut t = TripletBuilder::new(self.dim);
        for r in 0..self.dim {
            for (k, a) in self.row(r) {
                for (c, b) in rhs.row(k) {
                    t.add(r, c, a * b);
                }
            }
        }
        t.build(Symmetry::General)
    }

    /// Kronecker sum `self ⊗ I + I ⊗ rhs`; index `(i, j)` maps to `i * rhs.dim + j`.
    pub fn kron_sum(&self, rhs: &Self) -> Self {
        let (na, nb) = (self.dim, rhs.dim);
        let mut t = TripletBuilder::new(na * nb);
        for (r, c, v) in self.triplets() {
            for j in 0..nb {
                t.add(r * nb + j, c * nb + j, v);
            }
        }
        for (r, c, v) in rhs.triplets() {
            for i in 0..na {
                t.add(i * nb + r, i * nb + c, v);
            }
        }
        let symmetry = if self.symmetry == rhs.symmetry {
            self.symmetry
        } else {
            Symmetry::General
        };
        t.build(symmetry)
    }

    /// `[self, rhs] = self rhs - rhs self`, labelled with `symmetry`.
    pub fn commutator(&self, rhs: &Self, symmetry: Symmetry) -> Self {
        let ab = self.matmul(rhs);
        let ba = rhs.matmul(self);
        Self::lin_comb(1.0, &ab, -1.0, &ba, symmetry)
    }

    /// `max |M - M*|` entrywise.
    pub fn hermiticity_defect(&self) -> f64 {
        self.triplets()
            .map(|(r, c, v)| (v - self.get(c, r)).abs())
            .fold(0.0, f64::max)
    }

    /// `max |M_rc - N_rc|` over the union of both patterns.
    pub fn entry_gap(&self, other: &Self) -> f64 {
        if self.dim != other.dim {
            return f64::INFINITY;
        }
        let a = self
            .triplets()
            .map(|(r, c, v)| (v - other.get(r, c)).abs())
            .fold(0.0, f64::max);
        let b = other
            .triplets()
            .map(|(r, c, v)| (v - self.get(r, c)).abs())
            .fold(0.0, f64::max);
        a.max(b)
    }

    /// `max |M + M*|` entrywise.
    pub fn anti_hermiticity_defect(&self) -> f64 {
        self.triplets()
            .map(|(r, c, v)| (v + self.get(c, r)).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for (r, c, v) in self.triplets() {
            m[(r, c)] += v;
        }
        m
    }

    /// Principal submatrix on `keep` (in the given order).
    pub fn restrict(&self, keep: &[usize]) -> Self {
        let mut pos = vec![usize::MAX; self.dim];
        for (k, &i) in keep.iter().enumerate() {
            pos[i] = k;
        }
        let mut t = TripletBuilder::new(keep.len());
        for (k, &r) in keep.iter().enumerate() {
            for (c, v) in self.row(r) {
                if pos[c] != usize::MAX {
                    t.add(k, pos[c], v);
                }
            }
        }
        t.build(self.symmetry)
    }

    /// Writes the triplet text format: a `dim nnz` header, then one
    /// `i j re im` line per stored entry in row-major order.
    pub fn write_triplets<W: Write>(&self, mut w: W) -> Result<()> {
        let mut s = String::new();
        writeln!(s, "{} {}", self.dim, self.nnz()).unwrap();
        for (r, c, v) in self.triplets() {
            writeln!(s, "{r} {c} {v:e} 0e0").unwrap();
        }
        w.write_all(s.as_bytes())?;
        Ok(())
    }

    /// Reads the triplet format. Nonzero imaginary parts are rejected.
    pub fn read_triplets<R: Read>(r: R, symmetry: Symmetry) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty triplet file".into()))??;
        let mut it = header.split_whitespace();
        let parse = |s: Option<&str>| -> Result<usize> {
            s.and_then(|x| x.parse().ok())
                .ok_or_else(|| Error::Format("bad triplet header".into()))
        };
        let dim = parse(it.next())?;
        let nnz = parse(it.next())?;
        let mut t = TripletBuilder::new(dim);
        let mut seen = 0;
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(Error::Format(format!("bad triplet line: {line}")));
            }
            let bad = || Error::Format(format!("bad triplet line: {line}"));
            let i: usize = f[0].parse().map_err(|_| bad())?;
            let j: usize = f[1].parse().map_err(|_| bad())?;
            let re: f64 = f[2].parse().map_err(|_| bad())?;
            let im: f64 = f[3].parse().map_err(|_| bad())?;
            if i >= dim || j >= dim {
                return Err(bad());
            }
            if im != 0.0 {
                return Err(Error::Format("complex entries are not supported".into()));
            }
            t.add(i, j, re);
            seen += 1;
        }
        if seen != nnz {
            return Err(Error::Format(format!(
                "header declares {nnz} entries, found {seen}"
            )));
        }
        Ok(t.build(symmetry))
    }
}
