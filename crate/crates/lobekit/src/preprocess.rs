//! Lung-field extraction producing a convex-hull crop of a CT volume.
//!
//! The pipeline runs: HU normalization → OTSU threshold → binarize (air is
//! dark, so below-threshold is foreground) → per-slice binary close → 3D
//! component selection → per-slice hole filling → per-slice convex hull
//! of the lungs → per-slice dilation → tight bounding-box crop.
//!
//! Component selection runs before hole filling: the exterior air ring
//! encloses the body in every slice, so filling first would flood the whole
//! body and leave nothing but one border-touching blob.
//!
//! All per-slice stages are pure functions of one slice and run in parallel
//! with slice-indexed output placement, so results are identical in
//! sequential and parallel mode.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::volume::{crop_volume, BinaryMask, CropRegion, Volume, HU_HI, HU_LO};

/// 2D boolean stencil with odd side lengths, anchored at its center.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructuringElement {
    height: usize,
    width: usize,
    shape: Vec<bool>,
}

impl StructuringElement {
    /// All-ones rectangle; sides must be odd.
    pub fn ones(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![true; height * width])
    }

    pub fn new(height: usize, width: usize, shape: Vec<bool>) -> Result<Self> {
        if height.is_multiple_of(2) || width.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "structuring element sides must be odd, got {height}x{width}"
            )));
        }
        if shape.len() != height * width {
            return Err(Error::InvalidConfig(
                "structuring element shape length mismatch".into(),
            ));
        }
        if !shape.iter().any(|v| *v) {
            return Err(Error::InvalidConfig("structuring element is empty".into()));
        }
        Ok(Self {
            height,
            width,
            shape,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Active offsets `(dy, dx)` relative to the center anchor.
    pub fn offsets(&self) -> Vec<(isize, isize)> {
        let (ry, rx) = (self.height as isize / 2, self.width as isize / 2);
        let mut out = Vec::new();
        for dy in -ry..=ry {
            for dx in -rx..=rx {
                if self.shape[((dy + ry) * self.width as isize + dx + rx) as usize] {
                    out.push((dy, dx));
                }
            }
        }
        out
    }

    fn is_full_rect(&self) -> bool {
        self.shape.iter().all(|v| *v)
    }
}

/// Pipeline configuration. Kernels are all-ones rectangles given as
/// `[height, width]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub hu_lo: f32,
    pub hu_hi: f32,
    pub close_kernel: [usize; 2],
    pub dilate_kernel: [usize; 2],
    /// Components smaller than this are dropped. `None` uses 0.1% of the
    /// volume's voxel count.
    pub min_component_voxels: Option<usize>,
    pub otsu_bins: usize,
    /// A component "touches" the x/y boundary when it comes within this many
    /// voxels of it. The closing step erodes one kernel radius off every
    /// slice border, so exterior air sits `radius` voxels in; the margin
    /// must exceed that for the border filter to see it.
    pub border_margin: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            hu_lo: HU_LO,
            hu_hi: HU_HI,
            close_kernel: [3, 3],
            dilate_kernel: [5, 5],
            min_component_voxels: None,
            otsu_bins: 256,
            border_margin: 2,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hu_lo >= self.hu_hi {
            return Err(Error::InvalidConfig(format!(
                "hu_lo {} must be below hu_hi {}",
                self.hu_lo, self.hu_hi
            )));
        }
        if self.otsu_bins < 2 {
            return Err(Error::InvalidConfig("otsu_bins must be at least 2".into()));
        }
        StructuringElement::ones(self.close_kernel[0], self.close_kernel[1])?;
        StructuringElement::ones(self.dilate_kernel[0], self.dilate_kernel[1])?;
        Ok(())
    }

    fn min_voxels(&self, numel: usize) -> usize {
        self.min_component_voxels.unwrap_or((numel / 1000).max(1))
    }
}

// ---------------------------------------------------------------------------
// OTSU
// ---------------------------------------------------------------------------

/// Inter-class variance score of splitting a histogram at bin edge `k`
/// (class 0 = bins below `k`), kept as an exact rational
/// `(s0*n1 - s1*n0)^2 / (n0*n1)` so candidate comparison has no rounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct OtsuScore {
    num: u128,
    den: u128,
}

impl OtsuScore {
    fn from_split(n0: u64, s0: u64, n: u64, s: u64) -> Option<Self> {
        let (n1, s1) = (n - n0, s - s0);
        if n0 == 0 || n1 == 0 {
            return None;
        }
        let d = (s0 as i128) * (n1 as i128) - (s1 as i128) * (n0 as i128);
        Some(Self {
            num: d.unsigned_abs().pow(2),
            den: n0 as u128 * n1 as u128,
        })
    }

    fn gt(&self, other: &Self) -> bool {
        // cross-multiplied comparison in 256-bit arithmetic
        mul_wide(self.num, other.den) > mul_wide(other.num, self.den)
    }
}

/// Full 256-bit product of two u128 values as `(hi, lo)`.
fn mul_wide(a: u128, b: u128) -> (u128, u128) {
    const MASK: u128 = (1 << 64) - 1;
    let (a0, a1) = (a & MASK, a >> 64);
    let (b0, b1) = (b & MASK, b >> 64);
    let ll = a0 * b0;
    let lh = a0 * b1;
    let hl = a1 * b0;
    let hh = a1 * b1;
    let mid = (ll >> 64) + (lh & MASK) + (hl & MASK);
    let lo = (ll & MASK) | (mid << 64);
    let hi = hh + (lh >> 64) + (hl >> 64) + (mid >> 64);
    (hi, lo)
}

/// Histogram of a normalized volume over `[0, 1]`.
pub fn intensity_histogram(v: &Volume, bins: usize) -> Vec<u64> {
    let mut hist = vec![0u64; bins];
    for value in &v.data {
        let b = ((value * bins as f32) as usize).min(bins - 1);
        hist[b] += 1;
    }
    hist
}

/// OTSU bin-edge threshold maximizing inter-class variance; ties break
/// toward the lower threshold. The returned value is `k / bins` for the
/// winning split index `k`.
pub fn otsu_threshold(v: &Volume, bins: usize) -> Result<f32> {
    let hist = intensity_histogram(v, bins);
    otsu_from_histogram(&hist)
}

/// OTSU split on a pre-computed histogram; the threshold is the winning
/// bin edge `k / len`.
pub fn otsu_from_histogram(hist: &[u64]) -> Result<f32> {
    if hist.iter().filter(|c| **c > 0).count() < 2 {
        return Err(Error::DegenerateHistogram);
    }
    let n: u64 = hist.iter().sum();
    let s: u64 = hist
        .iter()
        .enumerate()
        .map(|(i, c)| i as u64 * c)
        .sum();

    let mut best: Option<(usize, OtsuScore)> = None;
    let (mut n0, mut s0) = (0u64, 0u64);
    for (k, count) in hist.iter().enumerate().take(hist.len() - 1) {
        n0 += count;
        s0 += k as u64 * count;
        let split = k + 1;
        if let Some(score) = OtsuScore::from_split(n0, s0, n, s) {
            let better = match &best {
                Some((_, b)) => score.gt(b),
                None => true,
            };
            if better {
                best = Some((split, score));
            }
        }
    }
    let (split, _) = best.ok_or(Error::DegenerateHistogram)?;
    Ok(split as f32 / hist.len() as f32)
}

/// Foreground = voxels strictly below the threshold (lung air is dark).
pub fn binarize(v: &Volume, threshold: f32) -> BinaryMask {
    BinaryMask {
        dims: v.dims,
        data: v.data.iter().map(|x| *x < threshold).collect(),
    }
}

// ---------------------------------------------------------------------------
// Per-slice morphology
// ---------------------------------------------------------------------------

#[allow(clippy::needless_range_loop)] // windowed access, zip obscures the bounds
fn dilate_slice_rect(src: &[bool], h: usize, w: usize, ry: usize, rx: usize, out: &mut [bool]) {
    // separable sliding OR: horizontal into scratch, then vertical
    let mut tmp = vec![false; h * w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        let trow = &mut tmp[y * w..(y + 1) * w];
        for x in 0..w {
            let lo = x.saturating_sub(rx);
            let hi = (x + rx).min(w - 1);
            trow[x] = row[lo..=hi].iter().any(|v| *v);
        }
    }
    for y in 0..h {
        let lo = y.saturating_sub(ry);
        let hi = (y + ry).min(h - 1);
        for x in 0..w {
            out[y * w + x] = (lo..=hi).any(|yy| tmp[yy * w + x]);
        }
    }
}

#[allow(clippy::needless_range_loop)]
fn erode_slice_rect(src: &[bool], h: usize, w: usize, ry: usize, rx: usize, out: &mut [bool]) {
    let mut tmp = vec![false; h * w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        let trow = &mut tmp[y * w..(y + 1) * w];
        for x in 0..w {
            // outside the image counts as background, so borders erode
            trow[x] = x >= rx
                && x + rx < w
                && row[x - rx..=x + rx].iter().all(|v| *v);
        }
    }
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] =
                y >= ry && y + ry < h && (y - ry..=y + ry).all(|yy| tmp[yy * w + x]);
        }
    }
}

fn dilate_slice_general(
    src: &[bool],
    h: usize,
    w: usize,
    offsets: &[(isize, isize)],
    out: &mut [bool],
) {
    for y in 0..h as isize {
        for x in 0..w as isize {
            let hit = offsets.iter().any(|(dy, dx)| {
                let (sy, sx) = (y - dy, x - dx);
                sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize
                    && src[(sy * w as isize + sx) as usize]
            });
            out[(y * w as isize + x) as usize] = hit;
        }
    }
}

fn erode_slice_general(
    src: &[bool],
    h: usize,
    w: usize,
    offsets: &[(isize, isize)],
    out: &mut [bool],
) {
    for y in 0..h as isize {
        for x in 0..w as isize {
            let all = offsets.iter().all(|(dy, dx)| {
                let (sy, sx) = (y + dy, x + dx);
                sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize
                    && src[(sy * w as isize + sx) as usize]
            });
            out[(y * w as isize + x) as usize] = all;
        }
    }
}

fn per_slice<F>(m: &BinaryMask, f: F) -> BinaryMask
where
    F: Fn(&[bool], usize, usize, &mut [bool]) + Sync,
{
    let [z, h, w] = m.dims;
    let mut out = vec![false; z * h * w];
    exec::for_each_chunk_mut(&mut out, h * w, |zi, dst| {
        f(m.slice(zi), h, w, dst);
    });
    BinaryMask { dims: m.dims, data: out }
}

/// Per-slice Minkowski dilation with zero padding at image borders.
pub fn dilate_2d(m: &BinaryMask, k: &StructuringElement) -> BinaryMask {
    let (ry, rx) = (k.height / 2, k.width / 2);
    if k.is_full_rect() {
        per_slice(m, |src, h, w, out| dilate_slice_rect(src, h, w, ry, rx, out))
    } else {
        let offsets = k.offsets();
        per_slice(m, |src, h, w, out| {
            dilate_slice_general(src, h, w, &offsets, out)
        })
    }
}

/// Per-slice erosion; outside the image counts as background.
pub fn erode_2d(m: &BinaryMask, k: &StructuringElement) -> BinaryMask {
    let (ry, rx) = (k.height / 2, k.width / 2);
    if k.is_full_rect() {
        per_slice(m, |src, h, w, out| erode_slice_rect(src, h, w, ry, rx, out))
    } else {
        let offsets = k.offsets();
        per_slice(m, |src, h, w, out| {
            erode_slice_general(src, h, w, &offsets, out)
        })
    }
}

/// Per-slice closing: dilation followed by erosion with the same element.
pub fn binary_close_2d(m: &BinaryMask, k: &StructuringElement) -> BinaryMask {
    erode_2d(&dilate_2d(m, k), k)
}

/// Per slice, set every background 4-connected region that cannot reach the
/// slice border to foreground.
pub fn fill_holes_2d(m: &BinaryMask) -> BinaryMask {
    per_slice(m, |src, h, w, out| {
        let mut reach = vec![false; h * w];
        let mut stack = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if (y == 0 || y == h - 1 || x == 0 || x == w - 1) && !src[y * w + x] {
                    stack.push((y, x));
                    reach[y * w + x] = true;
                }
            }
        }
        while let Some((y, x)) = stack.pop() {
            let mut visit = |yy: usize, xx: usize| {
                let i = yy * w + xx;
                if !src[i] && !reach[i] {
                    reach[i] = true;
                    stack.push((yy, xx));
                }
            };
            if y > 0 {
                visit(y - 1, x);
            }
            if y + 1 < h {
                visit(y + 1, x);
            }
            if x > 0 {
                visit(y, x - 1);
            }
            if x + 1 < w {
                visit(y, x + 1);
            }
        }
        for i in 0..h * w {
            out[i] = src[i] || !reach[i];
        }
    })
}

// ---------------------------------------------------------------------------
// Component selection
// ---------------------------------------------------------------------------

struct UnionFind {
    parent: Vec<u32>,
    size: Vec<u32>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n as u32).collect(),
            size: vec![1; n],
        }
    }

    fn find(&mut self, mut i: u32) -> u32 {
        while self.parent[i as usize] != i {
            let grand = self.parent[self.parent[i as usize] as usize];
            self.parent[i as usize] = grand;
            i = grand;
        }
        i
    }

    fn union(&mut self, a: u32, b: u32) {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        if self.size[ra as usize] < self.size[rb as usize] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb as usize] = ra;
        self.size[ra as usize] += self.size[rb as usize];
    }
}

// backward half of the 26-neighborhood in (z, y, x) scan order
const BACKWARD_26: [(isize, isize, isize); 13] = [
    (-1, -1, -1),
    (-1, -1, 0),
    (-1, -1, 1),
    (-1, 0, -1),
    (-1, 0, 0),
    (-1, 0, 1),
    (-1, 1, -1),
    (-1, 1, 0),
    (-1, 1, 1),
    (0, -1, -1),
    (0, -1, 0),
    (0, -1, 1),
    (0, 0, -1),
];

/// Keep 26-connected components that stay `border_margin` voxels away from
/// the x/y volume boundary and meet the size floor; at most the two largest
/// survive.
pub fn select_lung_components(
    m: &BinaryMask,
    min_voxels: usize,
    border_margin: usize,
) -> Result<BinaryMask> {
    let [dz, dy, dx] = m.dims;
    let n = dz * dy * dx;
    let margin = border_margin.max(1);

    // two-pass labeling: union with already-scanned neighbors
    let mut uf = UnionFind::new(n);
    for z in 0..dz {
        for y in 0..dy {
            for x in 0..dx {
                let i = (z * dy + y) * dx + x;
                if !m.data[i] {
                    continue;
                }
                for (oz, oy, ox) in BACKWARD_26 {
                    let (nz, ny, nx) = (z as isize + oz, y as isize + oy, x as isize + ox);
                    if nz < 0 || ny < 0 || nx < 0 || ny >= dy as isize || nx >= dx as isize {
                        continue;
                    }
                    let j = ((nz as usize * dy) + ny as usize) * dx + nx as usize;
                    if m.data[j] {
                        uf.union(i as u32, j as u32);
                    }
                }
            }
        }
    }

    #[derive(Default, Clone)]
    struct Stats {
        size: usize,
        touches_xy_border: bool,
        first: usize,
    }
    let mut stats: std::collections::HashMap<u32, Stats> = std::collections::HashMap::new();
    for z in 0..dz {
        for y in 0..dy {
            for x in 0..dx {
                let i = (z * dy + y) * dx + x;
                if !m.data[i] {
                    continue;
                }
                let root = uf.find(i as u32);
                let e = stats.entry(root).or_insert(Stats {
                    size: 0,
                    touches_xy_border: false,
                    first: i,
                });
                e.size += 1;
                if y < margin || y + margin > dy - 1 || x < margin || x + margin > dx - 1 {
                    e.touches_xy_border = true;
                }
            }
        }
    }

    let mut keep: Vec<(usize, usize, u32)> = stats
        .iter()
        .filter(|(_, s)| !s.touches_xy_border && s.size >= min_voxels)
        .map(|(root, s)| (s.size, s.first, *root))
        .collect();
    if keep.is_empty() {
        return Err(Error::NoLungCandidate);
    }
    // largest first; first-voxel index is a deterministic tie-break
    keep.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    keep.truncate(2);
    let roots: Vec<u32> = keep.iter().map(|(_, _, r)| *r).collect();

    let mut out = vec![false; n];
    for (i, slot) in out.iter_mut().enumerate() {
        if m.data[i] {
            let r = uf.find(i as u32);
            *slot = roots.contains(&r);
        }
    }
    Ok(BinaryMask { dims: m.dims, data: out })
}

// ---------------------------------------------------------------------------
// Convex hull
// ---------------------------------------------------------------------------

type Pt = (i64, i64);

fn cross(o: Pt, a: Pt, b: Pt) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Monotone-chain hull in counterclockwise order; collinear points drop out,
/// so degenerate inputs yield one or two vertices.
fn convex_hull_points(mut pts: Vec<Pt>) -> Vec<Pt> {
    pts.sort_unstable();
    pts.dedup();
    if pts.len() <= 2 {
        return pts;
    }
    let mut lower: Vec<Pt> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<Pt> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn point_on_segment(p: Pt, a: Pt, b: Pt) -> bool {
    cross(a, b, p) == 0
        && p.0 >= a.0.min(b.0)
        && p.0 <= a.0.max(b.0)
        && p.1 >= a.1.min(b.1)
        && p.1 <= a.1.max(b.1)
}

fn fill_hull_slice(src: &[bool], h: usize, w: usize, out: &mut [bool]) {
    let mut pts: Vec<Pt> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if src[y * w + x] {
                pts.push((x as i64, y as i64));
            }
        }
    }
    if pts.is_empty() {
        out.fill(false);
        return;
    }
    let hull = convex_hull_points(pts);
    match hull.len() {
        1 => {
            out.fill(false);
            out[hull[0].1 as usize * w + hull[0].0 as usize] = true;
        }
        2 => {
            out.fill(false);
            for y in 0..h {
                for x in 0..w {
                    if point_on_segment((x as i64, y as i64), hull[0], hull[1]) {
                        out[y * w + x] = true;
                    }
                }
            }
        }
        _ => {
            let (min_x, max_x) = hull
                .iter()
                .fold((i64::MAX, i64::MIN), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
            let (min_y, max_y) = hull
                .iter()
                .fold((i64::MAX, i64::MIN), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
            out.fill(false);
            for y in min_y..=max_y {
                for x in min_x..=max_x {
                    let p = (x, y);
                    let inside = (0..hull.len())
                        .all(|i| cross(hull[i], hull[(i + 1) % hull.len()], p) >= 0);
                    if inside {
                        out[y as usize * w + x as usize] = true;
                    }
                }
            }
        }
    }
}

/// Filled convex hull of each slice's foreground (hull of the union of both
/// lungs); empty slices stay empty. A pixel is foreground when its center
/// lies inside or on the hull polygon.
pub fn convex_hull_slices(m: &BinaryMask) -> BinaryMask {
    per_slice(m, fill_hull_slice)
}

/// Hull of a single 2D slice given as a flat `h*w` buffer.
pub fn convex_hull_slice(src: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    fill_hull_slice(src, h, w, &mut out);
    out
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

/// Output of [`lung_crop_pipeline`].
#[derive(Debug, Clone)]
pub struct LungCrop {
    /// Normalized input cropped to the hull bounding box; voxels inside the
    /// box but outside the hull keep their normalized values.
    pub volume: Volume,
    pub region: CropRegion,
    /// Dilated per-slice hull mask at the input's full dims.
    pub hull: BinaryMask,
}

fn normalize_with(v: &Volume, lo: f32, hi: f32) -> Volume {
    let span = hi - lo;
    Volume {
        dims: v.dims,
        spacing: v.spacing,
        origin: v.origin,
        element_type: crate::volume::ElementType::Float,
        data: v.data.iter().map(|h| (h.clamp(lo, hi) - lo) / span).collect(),
    }
}

fn bounding_box(m: &BinaryMask) -> Option<CropRegion> {
    let [dz, dy, dx] = m.dims;
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for z in 0..dz {
        for y in 0..dy {
            for x in 0..dx {
                if m.data[(z * dy + y) * dx + x] {
                    let p = [z, y, x];
                    for a in 0..3 {
                        lo[a] = lo[a].min(p[a]);
                        hi[a] = hi[a].max(p[a] + 1);
                    }
                }
            }
        }
    }
    if lo[0] == usize::MAX {
        None
    } else {
        Some(CropRegion::new(lo, hi))
    }
}

/// Run the full §-by-§ crop pipeline on a raw HU volume.
pub fn lung_crop_pipeline(v: &Volume, cfg: &PreprocessConfig) -> Result<LungCrop> {
    cfg.validate()?;
    let normalized = normalize_with(v, cfg.hu_lo, cfg.hu_hi);
    let threshold = otsu_threshold(&normalized, cfg.otsu_bins)?;
    let binary = binarize(&normalized, threshold);
    let close_k = StructuringElement::ones(cfg.close_kernel[0], cfg.close_kernel[1])?;
    let dilate_k = StructuringElement::ones(cfg.dilate_kernel[0], cfg.dilate_kernel[1])?;
    let closed = binary_close_2d(&binary, &close_k);
    let lungs = select_lung_components(&closed, cfg.min_voxels(v.numel()), cfg.border_margin)?;
    let filled = fill_holes_2d(&lungs);
    let hull = convex_hull_slices(&filled);
    let dilated = dilate_2d(&hull, &dilate_k);
    let region = bounding_box(&dilated).ok_or(Error::NoLungCandidate)?;
    let volume = crop_volume(&normalized, &region)?;
    Ok(LungCrop {
        volume,
        region,
        hull: dilated,
    })
}
