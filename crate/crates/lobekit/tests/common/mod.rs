//! Shared oracles and checkers for the integration suites.
//!
//! Everything here is an independent route to the same answer as the
//! production code: literal-definition morphology, Carathéodory hull
//! membership, flood-fill component labeling, per-candidate OTSU scans,
//! voxel-set dice counting, and central finite differences. None of it
//! calls the implementation being checked.

#![allow(dead_code)]

use lobekit::autodiff::{Graph, Tensor, Var};
use lobekit::volume::BinaryMask;

// ---------------------------------------------------------------------------
// finite differences
// ---------------------------------------------------------------------------

pub const FD_EPS: f64 = 1e-5;

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_diff<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], eps: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let fp = f(&probe);
        probe[i] = x[i] - eps;
        let fm = f(&probe);
        probe[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    grad
}

/// Worst elementwise relative error with a small denominator floor.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Scalar probe of a tensor-valued graph node: `sum(out * weights)` with a
/// fixed random weight leaf, so every output coordinate influences the loss.
pub fn weighted_sum(g: &mut Graph<f64>, out: Var, weights: &[f64]) -> Var {
    let shape = g.value(out).shape().to_vec();
    let w = g.leaf(Tensor::new(shape, weights.to_vec()).unwrap(), false);
    let prod = g.mul(out, w).unwrap();
    g.sum(prod).unwrap()
}

// ---------------------------------------------------------------------------
// morphology oracles (literal definitions)
// ---------------------------------------------------------------------------

pub fn naive_dilate_slice(src: &[bool], h: usize, w: usize, offsets: &[(isize, isize)]) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            out[(y * w as isize + x) as usize] = offsets.iter().any(|(dy, dx)| {
                let (sy, sx) = (y - dy, x - dx);
                sy >= 0
                    && sy < h as isize
                    && sx >= 0
                    && sx < w as isize
                    && src[(sy * w as isize + sx) as usize]
            });
        }
    }
    out
}

pub fn naive_erode_slice(src: &[bool], h: usize, w: usize, offsets: &[(isize, isize)]) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            out[(y * w as isize + x) as usize] = offsets.iter().all(|(dy, dx)| {
                let (sy, sx) = (y + dy, x + dx);
                sy >= 0
                    && sy < h as isize
                    && sx >= 0
                    && sx < w as isize
                    && src[(sy * w as isize + sx) as usize]
            });
        }
    }
    out
}

pub fn naive_close_slice(src: &[bool], h: usize, w: usize, offsets: &[(isize, isize)]) -> Vec<bool> {
    naive_erode_slice(&naive_dilate_slice(src, h, w, offsets), h, w, offsets)
}

/// Border flood fill: background 4-connected regions that never reach the
/// slice border become foreground.
pub fn naive_fill_holes_slice(src: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut reach = vec![false; h * w];
    let mut queue = std::collections::VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if (y == 0 || y + 1 == h || x == 0 || x + 1 == w) && !src[y * w + x] {
                reach[y * w + x] = true;
                queue.push_back((y, x));
            }
        }
    }
    while let Some((y, x)) = queue.pop_front() {
        for (ny, nx) in [
            (y.wrapping_sub(1), x),
            (y + 1, x),
            (y, x.wrapping_sub(1)),
            (y, x + 1),
        ] {
            if ny < h && nx < w && !src[ny * w + nx] && !reach[ny * w + nx] {
                reach[ny * w + nx] = true;
                queue.push_back((ny, nx));
            }
        }
    }
    (0..h * w).map(|i| src[i] || !reach[i]).collect()
}

/// Per-slice oracle applied across a 3D mask.
pub fn per_slice_oracle(
    m: &BinaryMask,
    f: impl Fn(&[bool], usize, usize) -> Vec<bool>,
) -> BinaryMask {
    let [dz, dy, dx] = m.dims;
    let mut data = Vec::with_capacity(dz * dy * dx);
    for z in 0..dz {
        data.extend(f(m.slice(z), dy, dx));
    }
    BinaryMask::new(m.dims, data).unwrap()
}

// ---------------------------------------------------------------------------
// convex hull membership by Carathéodory's theorem
// ---------------------------------------------------------------------------

type Pt = (i64, i64);

fn cross(o: Pt, a: Pt, b: Pt) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

fn on_segment(p: Pt, a: Pt, b: Pt) -> bool {
    cross(a, b, p) == 0
        && p.0 >= a.0.min(b.0)
        && p.0 <= a.0.max(b.0)
        && p.1 >= a.1.min(b.1)
        && p.1 <= a.1.max(b.1)
}

fn in_triangle(p: Pt, a: Pt, b: Pt, c: Pt) -> bool {
    let s1 = cross(a, b, p);
    let s2 = cross(b, c, p);
    let s3 = cross(c, a, p);
    (s1 >= 0 && s2 >= 0 && s3 >= 0) || (s1 <= 0 && s2 <= 0 && s3 <= 0)
}

/// A point lies in the convex hull of a planar set iff it lies in a
/// triangle (possibly degenerate) over set members.
pub fn hull_membership_oracle(src: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut pts: Vec<Pt> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if src[y * w + x] {
                pts.push((x as i64, y as i64));
            }
        }
    }
    let mut out = vec![false; h * w];
    if pts.is_empty() {
        return out;
    }
    for y in 0..h {
        'pixel: for x in 0..w {
            let p = (x as i64, y as i64);
            if src[y * w + x] {
                out[y * w + x] = true;
                continue;
            }
            for i in 0..pts.len() {
                for j in i + 1..pts.len() {
                    if on_segment(p, pts[i], pts[j]) {
                        out[y * w + x] = true;
                        continue 'pixel;
                    }
                }
            }
            for i in 0..pts.len() {
                for j in i + 1..pts.len() {
                    for k in j + 1..pts.len() {
                        if cross(pts[i], pts[j], pts[k]) != 0
                            && in_triangle(p, pts[i], pts[j], pts[k])
                        {
                            out[y * w + x] = true;
                            continue 'pixel;
                        }
                    }
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// component selection oracle
// ---------------------------------------------------------------------------

/// Flood-fill reimplementation of lung-candidate selection: 26-connected
/// components, drop those within `margin` of the x/y boundary or smaller
/// than `min_voxels`, keep the two largest (ties by first voxel).
pub fn component_selection_oracle(
    m: &BinaryMask,
    min_voxels: usize,
    margin: usize,
) -> Option<BinaryMask> {
    let [dz, dy, dx] = m.dims;
    let mut comp = vec![usize::MAX; m.data.len()];
    struct Info {
        size: usize,
        first: usize,
        bad: bool,
        id: usize,
    }
    let mut infos: Vec<Info> = Vec::new();
    for start in 0..m.data.len() {
        if !m.data[start] || comp[start] != usize::MAX {
            continue;
        }
        let id = infos.len();
        let mut stack = vec![start];
        comp[start] = id;
        let mut info = Info {
            size: 0,
            first: start,
            bad: false,
            id,
        };
        while let Some(i) = stack.pop() {
            info.size += 1;
            let z = i / (dy * dx);
            let y = (i / dx) % dy;
            let x = i % dx;
            if y < margin || y + margin > dy - 1 || x < margin || x + margin > dx - 1 {
                info.bad = true;
            }
            for oz in -1i64..=1 {
                for oy in -1i64..=1 {
                    for ox in -1i64..=1 {
                        let (nz, ny, nx) = (z as i64 + oz, y as i64 + oy, x as i64 + ox);
                        if nz < 0
                            || ny < 0
                            || nx < 0
                            || nz >= dz as i64
                            || ny >= dy as i64
                            || nx >= dx as i64
                        {
                            continue;
                        }
                        let j = ((nz as usize * dy) + ny as usize) * dx + nx as usize;
                        if m.data[j] && comp[j] == usize::MAX {
                            comp[j] = id;
                            stack.push(j);
                        }
                    }
                }
            }
        }
        infos.push(info);
    }
    let mut keep: Vec<&Info> = infos
        .iter()
        .filter(|i| !i.bad && i.size >= min_voxels)
        .collect();
    if keep.is_empty() {
        return None;
    }
    keep.sort_by(|a, b| b.size.cmp(&a.size).then(a.first.cmp(&b.first)));
    keep.truncate(2);
    let ids: Vec<usize> = keep.iter().map(|i| i.id).collect();
    let data = comp
        .iter()
        .map(|c| *c != usize::MAX && ids.contains(c))
        .collect();
    Some(BinaryMask::new(m.dims, data).unwrap())
}

// ---------------------------------------------------------------------------
// OTSU oracle: per-candidate recomputation, exact integer comparison
// ---------------------------------------------------------------------------

/// Recompute the inter-class variance ranking from scratch per candidate
/// split and return the winning bin edge as `k / bins`; ties to the lowest.
/// Scores compare as exact rationals `(s0*n1 - s1*n0)^2 / (n0*n1)` via
/// 256-bit cross multiplication.
pub fn otsu_oracle(hist: &[u64]) -> Option<f32> {
    let bins = hist.len();
    let mut best: Option<(usize, (u128, u128))> = None;
    for split in 1..bins {
        let mut n0 = 0u64;
        let mut s0 = 0u64;
        let mut n1 = 0u64;
        let mut s1 = 0u64;
        for (i, c) in hist.iter().enumerate() {
            if i < split {
                n0 += c;
                s0 += i as u64 * c;
            } else {
                n1 += c;
                s1 += i as u64 * c;
            }
        }
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let d = (s0 as i128) * (n1 as i128) - (s1 as i128) * (n0 as i128);
        let score = (d.unsigned_abs().pow(2), n0 as u128 * n1 as u128);
        let better = match &best {
            None => true,
            Some((_, b)) => rational_gt(score, *b),
        };
        if better {
            best = Some((split, score));
        }
    }
    best.map(|(split, _)| split as f32 / bins as f32)
}

fn mul_parts(a: u128, b: u128) -> (u128, u128) {
    const MASK: u128 = (1 << 64) - 1;
    let (a0, a1) = (a & MASK, a >> 64);
    let (b0, b1) = (b & MASK, b >> 64);
    let ll = a0 * b0;
    let lh = a0 * b1;
    let hl = a1 * b0;
    let hh = a1 * b1;
    let mid = (ll >> 64) + (lh & MASK) + (hl & MASK);
    ((ll & MASK) | (mid << 64), hh + (lh >> 64) + (hl >> 64) + (mid >> 64))
}

fn rational_gt(a: (u128, u128), b: (u128, u128)) -> bool {
    // a.0/a.1 > b.0/b.1  <=>  a.0*b.1 > b.0*a.1
    let (lo1, hi1) = mul_parts(a.0, b.1);
    let (lo2, hi2) = mul_parts(b.0, a.1);
    (hi1, lo1) > (hi2, lo2)
}

// ---------------------------------------------------------------------------
// dice oracle: explicit voxel-set enumeration
// ---------------------------------------------------------------------------

/// Dice by materializing the voxel index sets and intersecting them.
pub fn dice_set_oracle(p: &[u8], g: &[u8], class: u8) -> f64 {
    use std::collections::HashSet;
    let ps: HashSet<usize> = p
        .iter()
        .enumerate()
        .filter(|(_, v)| **v == class)
        .map(|(i, _)| i)
        .collect();
    let gs: HashSet<usize> = g
        .iter()
        .enumerate()
        .filter(|(_, v)| **v == class)
        .map(|(i, _)| i)
        .collect();
    if ps.is_empty() && gs.is_empty() {
        return 1.0;
    }
    let inter = ps.intersection(&gs).count();
    2.0 * inter as f64 / (ps.len() + gs.len()) as f64
}

// ---------------------------------------------------------------------------
// random mask builders
// ---------------------------------------------------------------------------

pub fn random_mask(rng: &mut impl rand::Rng, dims: [usize; 3], density: f64) -> BinaryMask {
    let data = (0..dims[0] * dims[1] * dims[2])
        .map(|_| rng.gen_bool(density))
        .collect();
    BinaryMask::new(dims, data).unwrap()
}

/// Blob-like slice: union of a couple of filled rectangles and ellipses.
pub fn random_blob_slice(rng: &mut impl rand::Rng, h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for _ in 0..rng.gen_range(1..=2) {
        let cy = rng.gen_range(3..h as i64 - 3);
        let cx = rng.gen_range(3..w as i64 - 3);
        let ry = rng.gen_range(2..=4);
        let rx = rng.gen_range(2..=4);
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let fy = (y - cy) as f64 / ry as f64;
                let fx = (x - cx) as f64 / rx as f64;
                if fy * fy + fx * fx <= 1.0 {
                    out[(y * w as i64 + x) as usize] = true;
                }
            }
        }
    }
    out
}
