//! Lattice model of a complete manifold with a corner of codimension 2.
//!
//! The space is glued from four product regions:
//!
//! ```text
//!   X0                compact corner piece (weighted graph)
//!   Cyl1 = R+(u1) x M1  half-cylinder over the face M1
//!   Cyl2 = R+(u2) x M2  half-cylinder over the face M2
//!   Quad = R+(u1) x R+(u2) x Y
//! ```
//!
//! `M1` is the compact part of `Z1 = M1 ∪ (R+(u2) x Y)`, so fixing `u1` on
//! `Cyl1 ∪ Quad` gives a full copy of the truncated `Z1` grid (and likewise
//! for `Z2`). Cylinder coordinates are `u = h (index + 1)`; the half-lines are
//! truncated after `L1`, `L2` sites with a Dirichlet wall.
//!
//! Global enumeration is region-major: all `X0` sites, then `Cyl1` ordered by
//! `(i1, m)`, then `Cyl2` by `(i2, m)`, then `Quad` by `(i1, i2, y)`.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weighted graph with an optional on-site potential (JSON schema unit).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub sites: usize,
    /// Undirected edges `[i, j, w]`. Listing both orientations is allowed
    /// when the weights agree.
    #[serde(default)]
    pub edges: Vec<(usize, usize, f64)>,
    #[serde(default)]
    pub potential: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CornerPieceConfig {
    #[serde(flatten)]
    pub graph: GraphConfig,
    /// `layer1[m]` is the X0 site glued to `Cyl1` slice 0 at face site `m`.
    pub layer1: Vec<usize>,
    pub layer2: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceConfig {
    #[serde(flatten)]
    pub graph: GraphConfig,
    /// `y_layer[y]` is the face site carrying fiber index `y`.
    pub y_layer: Vec<usize>,
}

/// Geometry description as ingested from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryConfig {
    pub y_dim: usize,
    /// Cross-section operator on Y, row-major `y_dim x y_dim`.
    pub delta_y: Vec<f64>,
    pub h: f64,
    pub box_lengths: [usize; 2],
    pub x0: CornerPieceConfig,
    pub m1: FaceConfig,
    pub m2: FaceConfig,
}

/// Validated weighted graph in adjacency-list form.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub sites: usize,
    /// Each undirected edge once, `i < j`.
    pub edges: Vec<(usize, usize, f64)>,
    pub potential: Vec<f64>,
}

impl Graph {
    fn from_config(cfg: &GraphConfig, what: &str) -> Result<Self> {
        let mut map: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for &(i, j, w) in &cfg.edges {
            if i >= cfg.sites || j >= cfg.sites {
                return Err(Error::Geometry(format!(
                    "{what}: edge ({i}, {j}) outside {} sites",
                    cfg.sites
                )));
            }
            if i == j {
                return Err(Error::Geometry(format!("{what}: self loop at {i}")));
            }
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::NegativeWeight(i, j, w));
            }
            let key = (i.min(j), i.max(j));
            if let Some(&prev) = map.get(&key) {
                if prev != w {
                    return Err(Error::NonSymmetricWeights(key.0, key.1));
                }
            } else {
                map.insert(key, w);
            }
        }
        let potential = if cfg.potential.is_empty() {
            vec![0.0; cfg.sites]
        } else if cfg.potential.len() == cfg.sites {
            cfg.potential.clone()
        } else {
            return Err(Error::Geometry(format!(
                "{what}: potential has {} entries for {} sites",
                cfg.potential.len(),
                cfg.sites
            )));
        };
        Ok(Self {
            sites: cfg.sites,
            edges: map.into_iter().map(|((i, j), w)| (i, j, w)).collect(),
            potential,
        })
    }

    pub fn to_config(&self) -> GraphConfig {
        GraphConfig {
            sites: self.sites,
            edges: self.edges.clone(),
            potential: self.potential.clone(),
        }
    }
}

/// Region of a global site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RegionTag {
    X0 { site: usize },
    Cyl1 { i1: usize, site: usize },
    Cyl2 { i2: usize, site: usize },
    Quadrant { i1: usize, i2: usize, y: usize },
}

/// Validated, immutable lattice model.
#[derive(Debug, Clone, PartialEq)]
pub struct CornerModel {
    pub y_dim: usize,
    pub delta_y: DMatrix<f64>,
    pub h: f64,
    pub l1: usize,
    pub l2: usize,
    pub x0: Graph,
    pub m1: Graph,
    pub m2: Graph,
    pub layer1: Vec<usize>,
    pub layer2: Vec<usize>,
    pub y_layer1: Vec<usize>,
    pub y_layer2: Vec<usize>,
    config: GeometryConfig,
}

/// JSON summary of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub y_dim: usize,
    pub h: f64,
    pub box_lengths: [usize; 2],
    pub x0_sites: usize,
    pub m1_sites: usize,
    pub m2_sites: usize,
    pub cyl1_sites: usize,
    pub cyl2_sites: usize,
    pub quadrant_sites: usize,
    pub dimension: usize,
}

impl CornerModel {
    pub fn build(cfg: &GeometryConfig) -> Result<Self> {
        if cfg.y_dim == 0 {
            return Err(Error::Geometry("y_dim must be at least 1".into()));
        }
        if !(cfg.h > 0.0) || !cfg.h.is_finite() {
            return Err(Error::Geometry(format!("lattice spacing {} is not positive", cfg.h)));
        }
        for (k, &l) in cfg.box_lengths.iter().enumerate() {
            if l == 0 {
                return Err(Error::ZeroBoxLength(k + 1));
            }
        }
        let n = cfg.y_dim;
        if cfg.delta_y.len() != n * n {
            return Err(Error::Geometry(format!(
                "delta_y has {} entries, expected {}",
                cfg.delta_y.len(),
                n * n
            )));
        }
        let delta_y = DMatrix::from_row_slice(n, n, &cfg.delta_y);
        for i in 0..n {
            for j in 0..n {
                if (delta_y[(i, j)] - delta_y[(j, i)]).abs() > 1e-12 {
                    return Err(Error::NonSymmetricWeights(i, j));
                }
            }
        }
        let min_eig = delta_y.clone().symmetric_eigenvalues().min();
        if min_eig < -1e-10 {
            return Err(Error::Geometry(format!(
                "delta_y is not positive semidefinite (min eigenvalue {min_eig:e})"
            )));
        }

        let x0 = Graph::from_config(&cfg.x0.graph, "x0")?;
        let m1 = Graph::from_config(&cfg.m1.graph, "m1")?;
        let m2 = Graph::from_config(&cfg.m2.graph, "m2")?;

        let check_len = |which, expected, found| {
            if expected != found {
                Err(Error::YLayerMismatch {
                    which,
                    expected,
                    found,
                })
            } else {
                Ok(())
            }
        };
        check_len("m1.y_layer", n, cfg.m1.y_layer.len())?;
        check_len("m2.y_layer", n, cfg.m2.y_layer.len())?;
        check_len("x0.layer1", m1.sites, cfg.x0.layer1.len())?;
        check_len("x0.layer2", m2.sites, cfg.x0.layer2.len())?;

        check_injective(&cfg.m1.y_layer, m1.sites, "m1.y_layer")?;
        check_injective(&cfg.m2.y_layer, m2.sites, "m2.y_layer")?;
        check_injective(&cfg.x0.layer1, x0.sites, "x0.layer1")?;
        check_injective(&cfg.x0.layer2, x0.sites, "x0.layer2")?;

        // B1 ∩ B2 must be the marked copy of Y, fiber by fiber.
        for y in 0..n {
            let a = cfg.x0.layer1[cfg.m1.y_layer[y]];
            let b = cfg.x0.layer2[cfg.m2.y_layer[y]];
            if a != b {
                return Err(Error::Geometry(format!(
                    "corner layers disagree at fiber {y}: layer1 gives {a}, layer2 gives {b}"
                )));
            }
        }
        let corner: Vec<usize> = (0..n).map(|y| cfg.x0.layer1[cfg.m1.y_layer[y]]).collect();
        let shared = cfg
            .x0
            .layer1
            .iter()
            .filter(|s| cfg.x0.layer2.contains(s))
            .count();
        if shared != n || !corner.iter().all(|s| cfg.x0.layer2.contains(s)) {
            return Err(Error::Geometry(format!(
                "layer1 ∩ layer2 has {shared} sites; it must be exactly the {n} corner sites"
            )));
        }

        Ok(Self {
            y_dim: n,
            delta_y,
            h: cfg.h,
            l1: cfg.box_lengths[0],
            l2: cfg.box_lengths[1],
            x0,
            m1,
            m2,
            layer1: cfg.x0.layer1.clone(),
            layer2: cfg.x0.layer2.clone(),
            y_layer1: cfg.m1.y_layer.clone(),
            y_layer2: cfg.m2.y_layer.clone(),
            config: cfg.clone(),
        })
    }

    pub fn config(&self) -> &GeometryConfig {
        &self.config
    }

    /// Same geometry with different truncation lengths.
    pub fn with_box(&self, l1: usize, l2: usize) -> Result<Self> {
        let mut cfg = self.config.clone();
        cfg.box_lengths = [l1, l2];
        Self::build(&cfg)
    }

    pub fn cyl1_offset(&self) -> usize {
        self.x0.sites
    }

    pub fn cyl2_offset(&self) -> usize {
        self.cyl1_offset() + self.l1 * self.m1.sites
    }

    pub fn quadrant_offset(&self) -> usize {
        self.cyl2_offset() + self.l2 * self.m2.sites
    }

    pub fn dim(&self) -> usize {
        self.quadrant_offset() + self.l1 * self.l2 * self.y_dim
    }

    /// Dimension of the truncated `Z_k` grid (face sites plus the Y half-line).
    pub fn z_dim(&self, k: u8) -> usize {
        match k {
            1 => self.m1.sites + self.l2 * self.y_dim,
            2 => self.m2.sites + self.l1 * self.y_dim,
            _ => 0,
        }
    }

    /// Cylinder coordinate of a lattice index.
    pub fn u(&self, index: usize) -> f64 {
        self.h * (index as f64 + 1.0)
    }

    pub fn site(&self, tag: RegionTag) -> usize {
        match tag {
            RegionTag::X0 { site } => site,
            RegionTag::Cyl1 { i1, site } => self.cyl1_offset() + i1 * self.m1.sites + site,
            RegionTag::Cyl2 { i2, site } => self.cyl2_offset() + i2 * self.m2.sites + site,
            RegionTag::Quadrant { i1, i2, y } => {
                self.quadrant_offset() + (i1 * self.l2 + i2) * self.y_dim + y
            }
        }
    }

    pub fn classify_site(&self, idx: usize) -> Result<RegionTag> {
        if idx >= self.dim() {
            return Err(Error::OutOfRange {
                index: idx,
                dim: self.dim(),
            });
        }
        Ok(self.tag_unchecked(idx))
    }

    pub(crate) fn tag_unchecked(&self, idx: usize) -> RegionTag {
        if idx < self.cyl1_offset() {
            RegionTag::X0 { site: idx }
        } else if idx < self.cyl2_offset() {
            let r = idx - self.cyl1_offset();
            RegionTag::Cyl1 {
                i1: r / self.m1.sites,
                site: r % self.m1.sites,
            }
        } else if idx < self.quadrant_offset() {
            let r = idx - self.cyl2_offset();
            RegionTag::Cyl2 {
                i2: r / self.m2.sites,
                site: r % self.m2.sites,
            }
        } else {
            let r = idx - self.quadrant_offset();
            let y = r % self.y_dim;
            let q = r / self.y_dim;
            RegionTag::Quadrant {
                i1: q / self.l2,
                i2: q % self.l2,
                y,
            }
        }
    }

    pub fn tags(&self) -> impl Iterator<Item = RegionTag> + '_ {
        (0..self.dim()).map(|i| self.tag_unchecked(i))
    }

    /// `(u1, u2)` where defined on the site.
    pub fn coords(&self, tag: RegionTag) -> (Option<f64>, Option<f64>) {
        match tag {
            RegionTag::X0 { .. } => (None, None),
            RegionTag::Cyl1 { i1, .. } => (Some(self.u(i1)), None),
            RegionTag::Cyl2 { i2, .. } => (None, Some(self.u(i2))),
            RegionTag::Quadrant { i1, i2, .. } => (Some(self.u(i1)), Some(self.u(i2))),
        }
    }

    /// Indicator of the exhaustion set `X_T`.
    pub fn exhaustion_mask(&self, t: f64) -> Vec<f64> {
        let t = t.max(0.0) + 1e-12 * self.h;
        self.tags()
            .map(|tag| {
                let (a, b) = self.coords(tag);
                let inside = a.is_none_or(|u| u <= t) && b.is_none_or(|u| u <= t);
                if inside {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub fn summary(&self) -> ModelSummary {
        ModelSummary {
            y_dim: self.y_dim,
            h: self.h,
            box_lengths: [self.l1, self.l2],
            x0_sites: self.x0.sites,
            m1_sites: self.m1.sites,
            m2_sites: self.m2.sites,
            cyl1_sites: self.l1 * self.m1.sites,
            cyl2_sites: self.l2 * self.m2.sites,
            quadrant_sites: self.l1 * self.l2 * self.y_dim,
            dimension: self.dim(),
        }
    }

    /// Largest cylinder coordinate in the box.
    pub fn box_radius(&self) -> f64 {
        self.h * self.l1.max(self.l2) as f64
    }
}

fn check_injective(map: &[usize], range: usize, what: &str) -> Result<()> {
    let mut seen = vec![false; range];
    for &s in map {
        if s >= range {
            return Err(Error::Geometry(format!("{what}: site {s} out of range {range}")));
        }
        if seen[s] {
            return Err(Error::Geometry(format!("{what}: site {s} listed twice")));
        }
        seen[s] = true;
    }
    Ok(())
}

/// One factor `Z_P = P ∪ (R+ x ∂P)` of a product geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductFactor {
    pub compact: GraphConfig,
    /// Sites of `P` forming its boundary layer, in cross-section order.
    pub boundary: Vec<usize>,
    /// Cross-section operator on `∂P`; off-diagonal entries must be `<= 0`.
    pub cross: DMatrix<f64>,
}

impl ProductFactor {
    /// A path of `len` sites with the boundary at the last site and a
    /// one-site cross-section (`∂P` trivial, cross-section operator `[c]`).
    pub fn path(len: usize, well: Option<(usize, f64)>, cross: f64) -> Self {
        let mut potential = vec![0.0; len];
        if let Some((site, depth)) = well {
            potential[site] -= depth;
        }
        Self {
            compact: GraphConfig {
                sites: len,
                edges: (0..len.saturating_sub(1)).map(|i| (i, i + 1, 1.0)).collect(),
                potential,
            },
            boundary: vec![len - 1],
            cross: DMatrix::from_element(1, 1, cross),
        }
    }

    fn cross_as_graph(&self) -> Result<(Vec<(usize, usize, f64)>, Vec<f64>)> {
        let n = self.boundary.len();
        if self.cross.nrows() != n || self.cross.ncols() != n {
            return Err(Error::Geometry("cross-section operator has wrong size".into()));
        }
        let mut edges = Vec::new();
        let mut pot = vec![0.0; n];
        for a in 0..n {
            pot[a] = self.cross[(a, a)];
            for b in 0..n {
                if a != b {
                    let w = -self.cross[(a, b)];
                    if w < 0.0 {
                        return Err(Error::NegativeWeight(a, b, w));
                    }
                    pot[a] -= w;
                    if a < b && w > 0.0 {
                        edges.push((a, b, w));
                    }
                }
            }
        }
        Ok((edges, pot))
    }
}

/// Geometry `X = Z_P x Z_Q` of a Cartesian product of two manifolds with
/// cylindrical ends. Its Laplacian is the exact Kronecker sum of the factor
/// Laplacians; `u1` runs along `Z_P`'s half-line and `u2` along `Z_Q`'s.
pub fn product_config(p: &ProductFactor, q: &ProductFactor, h: f64, box_lengths: [usize; 2]) -> Result<GeometryConfig> {
    let (np, nq) = (p.compact.sites, q.compact.sites);
    let (bp, bq) = (p.boundary.len(), q.boundary.len());
    let (p_cross_edges, p_cross_pot) = p.cross_as_graph()?;
    let (q_cross_edges, q_cross_pot) = q.cross_as_graph()?;
    let p_pot = pad(&p.compact.potential, np);
    let q_pot = pad(&q.compact.potential, nq);

    let y_dim = bp * bq;
    let delta = p.cross.kronecker(&DMatrix::<f64>::identity(bq, bq))
        + DMatrix::<f64>::identity(bp, bp).kronecker(&q.cross);
    let mut delta_y = Vec::with_capacity(y_dim * y_dim);
    for i in 0..y_dim {
        for j in 0..y_dim {
            delta_y.push(delta[(i, j)]);
        }
    }

    // X0 = P x Q, site (p, q) -> p * nq + q.
    let mut x0_edges = Vec::new();
    for &(a, b, w) in &p.compact.edges {
        for s in 0..nq {
            x0_edges.push((a * nq + s, b * nq + s, w));
        }
    }
    for &(a, b, w) in &q.compact.edges {
        for s in 0..np {
            x0_edges.push((s * nq + a, s * nq + b, w));
        }
    }
    let x0_pot: Vec<f64> = (0..np * nq).map(|i| p_pot[i / nq] + q_pot[i % nq]).collect();

    // M1 = ∂P x Q, site (a, q) -> a * nq + q.
    let mut m1_edges = Vec::new();
    for &(a, b, w) in &q.compact.edges {
        for s in 0..bp {
            m1_edges.push((s * nq + a, s * nq + b, w));
        }
    }
    for &(a, b, w) in &p_cross_edges {
        for s in 0..nq {
            m1_edges.push((a * nq + s, b * nq + s, w));
        }
    }
    let m1_pot: Vec<f64> = (0..bp * nq).map(|i| p_cross_pot[i / nq] + q_pot[i % nq]).collect();
    let m1_y: Vec<usize> = (0..y_dim).map(|y| (y / bq) * nq + q.boundary[y % bq]).collect();
    let layer1: Vec<usize> = (0..bp * nq).map(|i| p.boundary[i / nq] * nq + i % nq).collect();

    // M2 = P x ∂Q, site (p, b) -> p * bq + b.
    let mut m2_edges = Vec::new();
    for &(a, b, w) in &p.compact.edges {
        for s in 0..bq {
            m2_edges.push((a * bq + s, b * bq + s, w));
        }
    }
    for &(a, b, w) in &q_cross_edges {
        for s in 0..np {
            m2_edges.push((s * bq + a, s * bq + b, w));
        }
    }
    let m2_pot: Vec<f64> = (0..np * bq).map(|i| p_pot[i / bq] + q_cross_pot[i % bq]).collect();
    let m2_y: Vec<usize> = (0..y_dim).map(|y| p.boundary[y / bq] * bq + y % bq).collect();
    let layer2: Vec<usize> = (0..np * bq).map(|i| (i / bq) * nq + q.boundary[i % bq]).collect();

    Ok(GeometryConfig {
        y_dim,
        delta_y,
        h,
        box_lengths,
        x0: CornerPieceConfig {
            graph: GraphConfig {
                sites: np * nq,
                edges: x0_edges,
                potential: x0_pot,
            },
            layer1,
            layer2,
        },
        m1: FaceConfig {
            graph: GraphConfig {
                sites: bp * nq,
                edges: m1_edges,
                potential: m1_pot,
            },
            y_layer: m1_y,
        },
        m2: FaceConfig {
            graph: GraphConfig {
                sites: np * bq,
                edges: m2_edges,
                potential: m2_pot,
            },
            y_layer: m2_y,
        },
    })
}

fn pad(v: &[f64], n: usize) -> Vec<f64> {
    if v.is_empty() {
        vec![0.0; n]
    } else {
        v.to_vec()
    }
}

/// Smallest valid model: one fiber, one-site faces and corner piece.
pub fn minimal_config(l1: usize, l2: usize, h: f64) -> GeometryConfig {
    let single = || GraphConfig {
        sites: 1,
        edges: vec![],
        potential: vec![],
    };
    GeometryConfig {
        y_dim: 1,
        delta_y: vec![0.0],
        h,
        box_lengths: [l1, l2],
        x0: CornerPieceConfig {
            graph: single(),
            layer1: vec![0],
            layer2: vec![0],
        },
        m1: FaceConfig {
            graph: single(),
            y_layer: vec![0],
        },
        m2: FaceConfig {
            graph: single(),
            y_layer: vec![0],
        },
    }
}

/// Parameters of the layered reference geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayeredSpec {
    /// Number of fiber sites; `Y` is a ring and `delta_Y` its Laplacian.
    pub ring: usize,
    /// Layers in each face `M_k` (the outermost one is the marked Y-layer).
    pub layers: usize,
    pub box_len: usize,
    pub h: f64,
    /// Depth of the one-site well in `M1` (innermost layer, fiber 0).
    pub well1: f64,
    pub well2: f64,
    /// Extra attraction on the innermost corner sites of `X0`.
    pub corner_well: f64,
}

impl Default for LayeredSpec {
    fn default() -> Self {
        Self {
            ring: 4,
            layers: 2,
            box_len: 96,
            h: 1.0,
            well1: 1.5,
            well2: 0.0,
            corner_well: 0.0,
        }
    }
}

/// Layered model: faces are `layers x ring`, the corner piece is
/// `layers x layers x ring`, with nearest-neighbour unit weights. Wells on
/// the faces are continued through `X0` so the face neighbourhoods stay
/// product-like.
pub fn layered_config(spec: &LayeredSpec) -> GeometryConfig {
    let n = spec.ring;
    let nl = spec.layers;
    let ring_edges = |offset: usize, out: &mut Vec<(usize, usize, f64)>| {
        if n == 2 {
            out.push((offset, offset + 1, 1.0));
        } else if n > 2 {
            for y in 0..n {
                out.push((offset + y, offset + (y + 1) % n, 1.0));
            }
        }
    };
    let mut delta = DMatrix::<f64>::zeros(n, n);
    {
        let mut e = Vec::new();
        ring_edges(0, &mut e);
        for (a, b, w) in e {
            delta[(a, a)] += w;
            delta[(b, b)] += w;
            delta[(a, b)] -= w;
            delta[(b, a)] -= w;
        }
    }
    let face = |well: f64| {
        let mut edges = Vec::new();
        for l in 0..nl {
            ring_edges(l * n, &mut edges);
            if l + 1 < nl {
                for y in 0..n {
                    edges.push((l * n + y, (l + 1) * n + y, 1.0));
                }
            }
        }
        let mut potential = vec![0.0; nl * n];
        potential[0] -= well;
        FaceConfig {
            graph: GraphConfig {
                sites: nl * n,
                edges,
                potential,
            },
            y_layer: (0..n).map(|y| (nl - 1) * n + y).collect(),
        }
    };
    // X0 site (a, b, y): a runs toward Cyl1, b toward Cyl2.
    let x0_site = |a: usize, b: usize, y: usize| (a * nl + b) * n + y;
    let mut x0_edges = Vec::new();
    let mut x0_pot = vec![0.0; nl * nl * n];
    for a in 0..nl {
        for b in 0..nl {
            let mut ring = Vec::new();
            ring_edges(0, &mut ring);
            for (s, t, w) in ring {
                x0_edges.push((x0_site(a, b, s), x0_site(a, b, t), w));
            }
            for y in 0..n {
                if a + 1 < nl {
                    x0_edges.push((x0_site(a, b, y), x0_site(a + 1, b, y), 1.0));
                }
                if b + 1 < nl {
                    x0_edges.push((x0_site(a, b, y), x0_site(a, b + 1, y), 1.0));
                }
            }
        }
    }
    for a in 0..nl {
        x0_pot[x0_site(a, 0, 0)] -= spec.well1;
    }
    for b in 0..nl {
        x0_pot[x0_site(0, b, 0)] -= spec.well2;
    }
    for y in 0..n {
        x0_pot[x0_site(0, 0, y)] -= spec.corner_well;
    }
    // Face M1 site (layer l, y) sits at X0 (nl-1, l, y); M2 (l, y) at (l, nl-1, y).
    let layer1 = (0..nl * n).map(|i| x0_site(nl - 1, i / n, i % n)).collect();
    let layer2 = (0..nl * n).map(|i| x0_site(i / n, nl - 1, i % n)).collect();
    GeometryConfig {
        y_dim: n,
        delta_y: delta.transpose().iter().copied().collect(),
        h: spec.h,
        box_lengths: [spec.box_len, spec.box_len],
        x0: CornerPieceConfig {
            graph: GraphConfig {
                sites: nl * nl * n,
                edges: x0_edges,
                potential: x0_pot,
            },
            layer1,
            layer2,
        },
        m1: face(spec.well1),
        m2: face(spec.well2),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layered(box_len: usize) -> CornerModel {
        CornerModel::build(&layered_config(&LayeredSpec {
            box_len,
            ..Default::default()
        }))
        .unwrap()
    }

    #[test]
    fn minimal_model_dimension() {
        let m = CornerModel::build(&minimal_config(2, 2, 1.0)).unwrap();
        assert_eq!(m.dim(), 1 + 2 + 2 + 4);
    }

    #[test]
    fn first_and_last_tags() {
        let m = layered(8);
        assert_eq!(m.classify_site(0).unwrap(), RegionTag::X0 { site: 0 });
        assert_eq!(
            m.classify_site(m.dim() - 1).unwrap(),
            RegionTag::Quadrant { i1: 7, i2: 7, y: 3 }
        );
        assert!(matches!(
            m.classify_site(m.dim()),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn tag_round_trip_and_partition() {
        let m = layered(7);
        let mut counts = [0usize; 4];
        for idx in 0..m.dim() {
            let tag = m.classify_site(idx).unwrap();
            assert_eq!(m.site(tag), idx);
            counts[match tag {
                RegionTag::X0 { .. } => 0,
                RegionTag::Cyl1 { .. } => 1,
                RegionTag::Cyl2 { .. } => 2,
                RegionTag::Quadrant { .. } => 3,
            }] += 1;
        }
        let s = m.summary();
        assert_eq!(counts, [s.x0_sites, s.cyl1_sites, s.cyl2_sites, s.quadrant_sites]);
        assert_eq!(counts.iter().sum::<usize>(), m.dim());
    }

    #[test]
    fn exhaustion_counts() {
        let m = layered(8);
        let count = |t: f64| m.exhaustion_mask(t).iter().filter(|&&v| v == 1.0).count();
        assert_eq!(count(0.0), m.x0.sites);
        assert_eq!(
            count(3.0),
            m.x0.sites + 3 * m.m1.sites + 3 * m.m2.sites + 9 * m.y_dim
        );
        assert_eq!(count(8.0), m.dim());
        assert_eq!(count(100.0), m.dim());
    }

    #[test]
    fn exhaustion_is_monotone() {
        let m = layered(6);
        let mut prev = m.exhaustion_mask(0.0);
        for k in 1..10 {
            let next = m.exhaustion_mask(k as f64 * 0.7);
            assert!(prev.iter().zip(&next).all(|(a, b)| a <= b));
            prev = next;
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let good = layered_config(&LayeredSpec {
            box_len: 4,
            ..Default::default()
        });

        let mut c = good.clone();
        c.box_lengths = [0, 4];
        assert!(matches!(CornerModel::build(&c), Err(Error::ZeroBoxLength(1))));

        let mut c = good.clone();
        c.m1.y_layer.pop();
        assert!(matches!(
            CornerModel::build(&c),
            Err(Error::YLayerMismatch { .. })
        ));

        let mut c = good.clone();
        c.x0.graph.edges.push((0, 1, -1.0));
        assert!(matches!(
            CornerModel::build(&c),
            Err(Error::NegativeWeight(..))
        ));

        let mut c = good.clone();
        let (i, j, w) = c.m2.graph.edges[0];
        c.m2.graph.edges.push((j, i, w + 0.5));
        assert!(matches!(
            CornerModel::build(&c),
            Err(Error::NonSymmetricWeights(..))
        ));

        let mut c = good.clone();
        c.delta_y[1] += 0.1;
        assert!(CornerModel::build(&c).is_err());

        let mut c = good;
        c.x0.layer2.swap(4, 5);
        assert!(CornerModel::build(&c).is_err());
    }

    #[test]
    fn json_round_trip() {
        let cfg = layered_config(&LayeredSpec {
            box_len: 5,
            ..Default::default()
        });
        let text = serde_json::to_string(&cfg).unwrap();
        let back: GeometryConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let m = CornerModel::build(&back).unwrap();
        let s: ModelSummary =
            serde_json::from_str(&serde_json::to_string(&m.summary()).unwrap()).unwrap();
        assert_eq!(s.dimension, m.dim());
    }

    #[test]
    fn product_config_is_valid() {
        let p = ProductFactor::path(3, Some((0, 1.0)), 0.0);
        let q = ProductFactor::path(2, None, 0.5);
        let cfg = product_config(&p, &q, 1.0, [5, 6]).unwrap();
        let m = CornerModel::build(&cfg).unwrap();
        assert_eq!(m.x0.sites, 6);
        assert_eq!(m.y_dim, 1);
        assert_eq!(m.dim(), 6 + 5 * 2 + 6 * 3 + 30);
    }
}
