//! Sparse assembly of the Laplacian, its channel pieces and the Mourre
//! conjugate operator.
//!
//! Compact-graph edge weights enter as given; every cylinder and quadrant
//! bond (including the gluing bonds into `X0` and between the cylinders and
//! the quadrant) carries weight `1/h^2`. The far end of each half-line gets a
//! Dirichlet ghost, which adds `1/h^2` to the last diagonal entry.

use crate::error::{Error, Result};
use crate::geometry::{CornerModel, Graph, RegionTag};
use crate::sparse::{SparseHermitian, Symmetry, TripletBuilder};

/// Dirichlet second difference `-d^2/du^2` on `l` sites.
pub fn assemble_b(l: usize, h: f64) -> Result<SparseHermitian> {
    if l == 0 {
        return Err(Error::InvalidParameter("half-line needs at least one site".into()));
    }
    let w = 1.0 / (h * h);
    let mut t = TripletBuilder::new(l);
    for i in 0..l {
        t.add(i, i, 2.0 * w);
        if i + 1 < l {
            t.add(i, i + 1, -w);
            t.add(i + 1, i, -w);
        }
    }
    Ok(t.build(Symmetry::Hermitian))
}

fn add_graph(t: &mut TripletBuilder, g: &Graph, map: impl Fn(usize) -> usize) {
    for &(i, j, w) in &g.edges {
        t.add_edge(map(i), map(j), w);
    }
    for (i, &v) in g.potential.iter().enumerate() {
        t.add(map(i), map(i), v);
    }
}

fn add_delta_y(t: &mut TripletBuilder, model: &CornerModel, map: impl Fn(usize) -> usize) {
    let n = model.y_dim;
    for a in 0..n {
        for b in 0..n {
            let v = model.delta_y[(a, b)];
            if v != 0.0 {
                t.add(map(a), map(b), v);
            }
        }
    }
}

/// The compatible Laplacian `H` on the truncated model.
pub fn assemble_h(model: &CornerModel) -> SparseHermitian {
    let n = model.dim();
    let w = 1.0 / (model.h * model.h);
    let (l1, l2) = (model.l1, model.l2);
    let mut t = TripletBuilder::new(n);

    add_graph(&mut t, &model.x0, |s| s);

    for i1 in 0..l1 {
        let site = |m| model.site(RegionTag::Cyl1 { i1, site: m });
        add_graph(&mut t, &model.m1, site);
        for m in 0..model.m1.sites {
            if i1 == 0 {
                t.add_edge(model.layer1[m], site(m), w);
            }
            if i1 + 1 < l1 {
                t.add_edge(site(m), model.site(RegionTag::Cyl1 { i1: i1 + 1, site: m }), w);
            } else {
                t.add(site(m), site(m), w);
            }
        }
    }
    for i2 in 0..l2 {
        let site = |m| model.site(RegionTag::Cyl2 { i2, site: m });
        add_graph(&mut t, &model.m2, site);
        for m in 0..model.m2.sites {
            if i2 == 0 {
                t.add_edge(model.layer2[m], site(m), w);
            }
            if i2 + 1 < l2 {
                t.add_edge(site(m), model.site(RegionTag::Cyl2 { i2: i2 + 1, site: m }), w);
            } else {
                t.add(site(m), site(m), w);
            }
        }
    }
    for i1 in 0..l1 {
        for i2 in 0..l2 {
            let q = |y| model.site(RegionTag::Quadrant { i1, i2, y });
            add_delta_y(&mut t, model, q);
            for y in 0..model.y_dim {
                if i1 == 0 {
                    let c = model.site(RegionTag::Cyl2 {
                        i2,
                        site: model.y_layer2[y],
                    });
                    t.add_edge(c, q(y), w);
                }
                if i2 == 0 {
                    let c = model.site(RegionTag::Cyl1 {
                        i1,
                        site: model.y_layer1[y],
                    });
                    t.add_edge(c, q(y), w);
                }
                if i1 + 1 < l1 {
                    t.add_edge(q(y), model.site(RegionTag::Quadrant { i1: i1 + 1, i2, y }), w);
                } else {
                    t.add(q(y), q(y), w);
                }
                if i2 + 1 < l2 {
                    t.add_edge(q(y), model.site(RegionTag::Quadrant { i1, i2: i2 + 1, y }), w);
                } else {
                    t.add(q(y), q(y), w);
                }
            }
        }
    }
    t.build(Symmetry::Hermitian)
}

/// The cross-section operator `H^(k)` on the truncated `Z_k` grid; `k = 3`
/// gives `Delta_Y`.
///
/// `Z1` sites are the `M1` sites followed by `(i2, y)` at
/// `|M1| + i2 * y_dim + y`; `Z2` likewise with `i1`.
pub fn assemble_cross_section(model: &CornerModel, k: u8) -> Result<SparseHermitian> {
    let n = model.y_dim;
    let (face, y_layer, len) = match k {
        1 => (&model.m1, &model.y_layer1, model.l2),
        2 => (&model.m2, &model.y_layer2, model.l1),
        3 => {
            let mut t = TripletBuilder::new(n);
            add_delta_y(&mut t, model, |y| y);
            return Ok(t.build(Symmetry::Hermitian));
        }
        _ => return Err(Error::InvalidChannel(k)),
    };
    let w = 1.0 / (model.h * model.h);
    let off = face.sites;
    let mut t = TripletBuilder::new(off + len * n);
    add_graph(&mut t, face, |s| s);
    for i in 0..len {
        add_delta_y(&mut t, model, |y| off + i * n + y);
        for y in 0..n {
            let s = off + i * n + y;
            if i == 0 {
                t.add_edge(y_layer[y], s, w);
            }
            if i + 1 < len {
                t.add_edge(s, s + n, w);
            } else {
                t.add(s, s, w);
            }
        }
    }
    Ok(t.build(Symmetry::Hermitian))
}

/// Length of the half-line factor of channel `k` (1 or 2).
pub fn channel_length(model: &CornerModel, k: u8) -> Result<usize> {
    match k {
        1 => Ok(model.l1),
        2 => Ok(model.l2),
        _ => Err(Error::InvalidChannel(k)),
    }
}

/// Channel operator `H_k`: `b_k ⊗ I + I ⊗ H^(k)` for `k = 1, 2` and
/// `b_1 ⊗ I ⊗ I + I ⊗ b_2 ⊗ I + I ⊗ I ⊗ Delta_Y` for `k = 3`.
pub fn assemble_channel(model: &CornerModel, k: u8) -> Result<SparseHermitian> {
    match k {
        1 | 2 => {
            let b = assemble_b(channel_length(model, k)?, model.h)?;
            Ok(b.kron_sum(&assemble_cross_section(model, k)?))
        }
        3 => {
            let b1 = assemble_b(model.l1, model.h)?;
            let b2 = assemble_b(model.l2, model.h)?;
            let dy = assemble_cross_section(model, 3)?;
            Ok(b1.kron_sum(&b2.kron_sum(&dy)))
        }
        _ => Err(Error::InvalidChannel(k)),
    }
}

/// Entrywise gaps between the `Cyl_1 ∪ Quad`, `Cyl_2 ∪ Quad` and `Quad`
/// blocks of `h` and the channel operators `H_1, H_2, H_3`.
pub fn block_audit(model: &CornerModel, h: &SparseHermitian) -> Result<[f64; 3]> {
    let mut out = [0.0; 3];
    for k in 1..=3u8 {
        let keep = channel_sites(model, k)?;
        out[k as usize - 1] = h.restrict(&keep).entry_gap(&assemble_channel(model, k)?);
    }
    Ok(out)
}

/// Global site of each channel-space index.
///
/// Channel `k = 1, 2` indices are `(i_k, z)` at `i_k * dim(Z_k) + z`; the map
/// is a bijection onto `Cyl_k ∪ Quad`. Channel 3 maps onto the quadrant.
pub fn channel_sites(model: &CornerModel, k: u8) -> Result<Vec<usize>> {
    let n = model.y_dim;
    match k {
        1 => {
            let zd = model.z_dim(1);
            Ok((0..model.l1 * zd)
                .map(|idx| {
                    let (i1, z) = (idx / zd, idx % zd);
                    if z < model.m1.sites {
                        model.site(RegionTag::Cyl1 { i1, site: z })
                    } else {
                        let r = z - model.m1.sites;
                        model.site(RegionTag::Quadrant {
                            i1,
                            i2: r / n,
                            y: r % n,
                        })
                    }
                })
                .collect())
        }
        2 => {
            let zd = model.z_dim(2);
            Ok((0..model.l2 * zd)
                .map(|idx| {
                    let (i2, z) = (idx / zd, idx % zd);
                    if z < model.m2.sites {
                        model.site(RegionTag::Cyl2 { i2, site: z })
                    } else {
                        let r = z - model.m2.sites;
                        model.site(RegionTag::Quadrant {
                            i1: r / n,
                            i2,
                            y: r % n,
                        })
                    }
                })
                .collect())
        }
        3 => {
            let off = model.quadrant_offset();
            Ok((off..model.dim()).collect())
        }
        _ => Err(Error::InvalidChannel(k)),
    }
}

/// Quintic smoothstep rise of the cutoff on `(2, 3)`.
pub fn kappa(u: f64) -> f64 {
    if u <= 2.0 {
        0.0
    } else if u >= 3.0 {
        1.0
    } else {
        let s = u - 2.0;
        s * s * s * (10.0 + s * (-15.0 + 6.0 * s))
    }
}

pub fn kappa_prime(u: f64) -> f64 {
    if u <= 2.0 || u >= 3.0 {
        0.0
    } else {
        let s = u - 2.0;
        30.0 * s * s * (1.0 - s) * (1.0 - s)
    }
}

/// `kappa(u_axis)` per site, zero where `u_axis` is undefined.
pub fn kappa_field(model: &CornerModel, axis: u8) -> Result<Vec<f64>> {
    if axis != 1 && axis != 2 {
        return Err(Error::InvalidChannel(axis));
    }
    Ok(model
        .tags()
        .map(|tag| {
            let (a, b) = model.coords(tag);
            let u = if axis == 1 { a } else { b };
            u.map_or(0.0, kappa)
        })
        .collect())
}

pub fn cutoff_kappa(model: &CornerModel, axis: u8) -> Result<SparseHermitian> {
    Ok(SparseHermitian::diagonal(&kappa_field(model, axis)?))
}

/// `r^2 = kappa_1 u_1^2 + kappa_2 u_2^2` per site.
pub fn radius_squared_field(model: &CornerModel) -> Vec<f64> {
    model
        .tags()
        .map(|tag| {
            let (a, b) = model.coords(tag);
            a.map_or(0.0, |u| kappa(u) * u * u) + b.map_or(0.0, |u| kappa(u) * u * u)
        })
        .collect()
}

pub fn radius_squared(model: &CornerModel) -> SparseHermitian {
    SparseHermitian::diagonal(&radius_squared_field(model))
}

/// Raw commutator `A = [H, r^2]` (anti-Hermitian).
pub fn conjugate_a(h: &SparseHermitian, r2: &SparseHermitian) -> SparseHermitian {
    h.commutator(r2, Symmetry::AntiHermitian)
}

/// Hermitian Mourre form `i[H, iA] = -[H, [H, r^2]]`.
pub fn mourre_form(h: &SparseHermitian, a: &SparseHermitian) -> SparseHermitian {
    h.commutator(a, Symmetry::Hermitian).scale(-1.0)
}

/// Convenience: the Mourre form of the model's own `H` and `r^2`.
pub fn mourre_form_for(model: &CornerModel) -> SparseHermitian {
    let h = assemble_h(model);
    let a = conjugate_a(&h, &radius_squared(model));
    mourre_form(&h, &a)
}

/// Global indices in `big` of the sites of `small`, for two models that
/// differ only in box lengths (`big` at least as long on both axes).
pub fn box_embedding(small: &CornerModel, big: &CornerModel) -> Result<Vec<usize>> {
    if big.l1 < small.l1 || big.l2 < small.l2 || big.y_dim != small.y_dim {
        return Err(Error::InvalidParameter("target box must contain the source box".into()));
    }
    Ok(small.tags().map(|tag| big.site(tag)).collect())
}

/// Mourre form of the model with the box extended by `pad` sites per axis,
/// compressed back onto the original sites.
///
/// On a finite box every eigenvector of `H` annihilates its own commutator
/// with any bounded operator, so the sharp-window compression of `-[H,[H,r^2]]`
/// is traceless. The extended form keeps the interior stencil at the last
/// layers instead of the Dirichlet wall term, which makes the compressed form
/// the honest finite-box stand-in for the continuum operator.
pub fn extended_mourre_form(model: &CornerModel, pad: usize) -> Result<SparseHermitian> {
    let big = model.with_box(model.l1 + pad, model.l2 + pad)?;
    let keep = box_embedding(model, &big)?;
    Ok(mourre_form_for(&big).restrict(&keep))
}

/// Forward difference along `u_axis`: `(psi(next) - psi(x)) / h` on every
/// site where `u_axis` is defined (the Dirichlet ghost past the box is 0);
/// zero rows elsewhere.
pub fn forward_difference(model: &CornerModel, axis: u8) -> Result<SparseHermitian> {
    if axis != 1 && axis != 2 {
        return Err(Error::InvalidChannel(axis));
    }
    let inv = 1.0 / model.h;
    let mut t = TripletBuilder::new(model.dim());
    for (idx, tag) in model.tags().enumerate() {
        let next = match (axis, tag) {
            (1, RegionTag::Cyl1 { i1, site }) => {
                Some((i1 + 1 < model.l1).then(|| model.site(RegionTag::Cyl1 { i1: i1 + 1, site })))
            }
            (1, RegionTag::Quadrant { i1, i2, y }) => Some(
                (i1 + 1 < model.l1).then(|| model.site(RegionTag::Quadrant { i1: i1 + 1, i2, y })),
            ),
            (2, RegionTag::Cyl2 { i2, site }) => {
                Some((i2 + 1 < model.l2).then(|| model.site(RegionTag::Cyl2 { i2: i2 + 1, site })))
            }
            (2, RegionTag::Quadrant { i1, i2, y }) => Some(
                (i2 + 1 < model.l2).then(|| model.site(RegionTag::Quadrant { i1, i2: i2 + 1, y })),
            ),
            _ => None,
        };
        if let Some(next) = next {
            t.add(idx, idx, -inv);
            if let Some(j) = next {
                t.add(idx, j, inv);
            }
        }
    }
    Ok(t.build(Symmetry::General))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{layered_config, minimal_config, LayeredSpec};

    fn layered(box_len: usize, h: f64) -> CornerModel {
        CornerModel::build(&layered_config(&LayeredSpec {
            box_len,
            h,
            ..Default::default()
        }))
        .unwrap()
    }

    fn sym_eigs(m: &SparseHermitian) -> Vec<f64> {
        let mut e: Vec<f64> = m.to_dense().symmetric_eigenvalues().iter().copied().collect();
        e.sort_by(f64::total_cmp);
        e
    }

    #[test]
    fn b_spectrum() {
        assert_eq!(assemble_b(1, 1.0).unwrap().to_dense()[(0, 0)], 2.0);
        let e = sym_eigs(&assemble_b(3, 1.0).unwrap());
        let want = [2.0 - 2f64.sqrt(), 2.0, 2.0 + 2f64.sqrt()];
        for (a, b) in e.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        let l = 9;
        let h = 0.5;
        let e = sym_eigs(&assemble_b(l, h).unwrap());
        for (m, v) in e.iter().enumerate() {
            let th = std::f64::consts::PI * (m + 1) as f64 / (l + 1) as f64;
            assert!((v - (2.0 - 2.0 * th.cos()) / (h * h)).abs() < 1e-10);
        }
        assert!(assemble_b(0, 1.0).is_err());
    }

    #[test]
    fn minimal_h_is_psd_path_like() {
        let m = CornerModel::build(&minimal_config(2, 2, 1.0)).unwrap();
        let h = assemble_h(&m);
        assert_eq!(h.hermiticity_defect(), 0.0);
        assert!(sym_eigs(&h)[0] > -1e-12);
    }

    #[test]
    fn quadrant_block_is_h3() {
        let m = layered(6, 0.7);
        let h = assemble_h(&m);
        let keep = channel_sites(&m, 3).unwrap();
        let block = h.restrict(&keep);
        let h3 = assemble_channel(&m, 3).unwrap();
        assert_eq!(block.to_dense(), h3.to_dense());
    }

    #[test]
    fn channel_blocks_match_h() {
        let m = layered(5, 1.0);
        let h = assemble_h(&m);
        for k in [1u8, 2] {
            let keep = channel_sites(&m, k).unwrap();
            let hk = assemble_channel(&m, k).unwrap();
            assert_eq!(hk.dim(), channel_length(&m, k).unwrap() * m.z_dim(k));
            assert_eq!(h.restrict(&keep).to_dense(), hk.to_dense());
        }
        assert!(matches!(assemble_channel(&m, 4), Err(Error::InvalidChannel(4))));
    }

    #[test]
    fn block_audit_is_exact() {
        let m = layered(7, 1.3);
        let h = assemble_h(&m);
        assert_eq!(block_audit(&m, &h).unwrap(), [0.0; 3]);
    }

    #[test]
    fn cutoff_values() {
        assert_eq!(kappa(1.5), 0.0);
        assert_eq!(kappa(2.0), 0.0);
        assert_eq!(kappa(4.0), 1.0);
        assert!((kappa(2.5) - 0.5).abs() < 1e-15);
        let mut prev = 0.0;
        for i in 0..=100 {
            let v = kappa(2.0 + i as f64 / 100.0);
            assert!(v >= prev);
            prev = v;
        }
        let d = 1e-6;
        for u in [2.1, 2.4, 2.9] {
            let fd = (kappa(u + d) - kappa(u - d)) / (2.0 * d);
            assert!((fd - kappa_prime(u)).abs() < 1e-8);
        }
    }

    #[test]
    fn radius_squared_on_quadrant() {
        let m = layered(12, 1.0);
        let r2 = radius_squared_field(&m);
        // u = h (i + 1): (u1, u2) = (10, 1).
        let idx = m.site(RegionTag::Quadrant { i1: 9, i2: 0, y: 2 });
        assert_eq!(r2[idx], 100.0);
        let k1 = kappa_field(&m, 1).unwrap();
        assert!(k1[..m.x0.sites].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn a_is_antihermitian_and_form_hermitian() {
        let m = layered(8, 1.0);
        let h = assemble_h(&m);
        let a = conjugate_a(&h, &radius_squared(&m));
        assert!(a.anti_hermiticity_defect() <= 1e-10);
        let f = mourre_form(&h, &a);
        assert!(f.hermiticity_defect() <= 1e-9);
    }

    #[test]
    fn free_double_commutator_is_eight_b() {
        // Independent stencil expansion: on smooth f, -[b,[b,u^2]] f -> 8 b f.
        let l = 400;
        let h = 0.05;
        let b = assemble_b(l, h).unwrap();
        let u2: Vec<f64> = (0..l).map(|i| (h * (i + 1) as f64).powi(2)).collect();
        let a = conjugate_a(&b, &SparseHermitian::diagonal(&u2));
        let m = mourre_form(&b, &a);
        let f: Vec<f64> = (0..l)
            .map(|i| {
                let u = h * (i + 1) as f64;
                (-(u - 10.0).powi(2) / 2.0).exp() * (2.0 * u).cos()
            })
            .collect();
        let mut mf = vec![0.0; l];
        let mut bf = vec![0.0; l];
        m.apply_real(&f, &mut mf);
        b.apply_real(&f, &mut bf);
        let num: f64 = mf.iter().zip(&bf).map(|(x, y)| (x - 8.0 * y).powi(2)).sum();
        let den: f64 = bf.iter().map(|y| (8.0 * y).powi(2)).sum();
        assert!((num / den).sqrt() < 1e-2, "{}", (num / den).sqrt());
    }

    #[test]
    fn extended_form_matches_interior() {
        let m = layered(10, 1.0);
        let plain = mourre_form_for(&m);
        let ext = extended_mourre_form(&m, 2).unwrap();
        assert_eq!(ext.dim(), m.dim());
        let deep = m.site(RegionTag::Quadrant { i1: 4, i2: 4, y: 0 });
        for (c, v) in plain.row(deep) {
            assert!((ext.get(deep, c) - v).abs() < 1e-12);
        }
        let wall = m.site(RegionTag::Quadrant { i1: 9, i2: 4, y: 0 });
        assert!((ext.get(wall, wall) - plain.get(wall, wall)).abs() > 1e-3);
    }

    #[test]
    fn forward_difference_rows() {
        let m = layered(4, 0.5);
        let d1 = forward_difference(&m, 1).unwrap();
        let s = m.site(RegionTag::Cyl1 { i1: 1, site: 3 });
        let n = m.site(RegionTag::Cyl1 { i1: 2, site: 3 });
        assert_eq!(d1.get(s, s), -2.0);
        assert_eq!(d1.get(s, n), 2.0);
        let last = m.site(RegionTag::Quadrant { i1: 3, i2: 0, y: 0 });
        assert_eq!(d1.row(last).count(), 1);
        assert_eq!(d1.row(0).count(), 0);
        let c2 = m.site(RegionTag::Cyl2 { i2: 0, site: 0 });
        assert_eq!(d1.row(c2).count(), 0);
    }
}
