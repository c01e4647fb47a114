//! Training-time augmentation applied jointly to a volume and its labels:
//! random integer shift, z-axis flip, and in-plane rotation.
//!
//! Volume and mask always go through the same geometric map; intensities
//! resample bilinearly, labels by nearest neighbor so class ids survive
//! untouched.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::volume::{LabelMask, Volume};

/// Augmentation magnitudes; zero values disable the corresponding transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Maximum absolute shift per axis, in voxels.
    pub shift_max: usize,
    pub flip_z_prob: f64,
    /// Maximum absolute in-plane rotation, degrees.
    pub rotate_max_deg: f64,
    /// Seed of the augmentation stream.
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            shift_max: 8,
            flip_z_prob: 0.5,
            rotate_max_deg: 10.0,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Config that leaves every sample untouched.
    pub fn disabled() -> Self {
        Self {
            shift_max: 0,
            flip_z_prob: 0.0,
            rotate_max_deg: 0.0,
            seed: 0,
        }
    }
}

/// Translate by integer voxels; vacated voxels become 0 intensity /
/// background label.
pub fn shift_by(v: &Volume, m: &LabelMask, offset: [i64; 3]) -> (Volume, LabelMask) {
    let dims = v.dims;
    let mut out_v = Volume {
        data: vec![0.0; v.data.len()],
        ..v.clone()
    };
    let mut out_m = LabelMask {
        data: vec![0; m.data.len()],
        ..m.clone()
    };
    for z in 0..dims[0] as i64 {
        let sz = z - offset[0];
        if sz < 0 || sz >= dims[0] as i64 {
            continue;
        }
        for y in 0..dims[1] as i64 {
            let sy = y - offset[1];
            if sy < 0 || sy >= dims[1] as i64 {
                continue;
            }
            for x in 0..dims[2] as i64 {
                let sx = x - offset[2];
                if sx < 0 || sx >= dims[2] as i64 {
                    continue;
                }
                let dst = ((z as usize * dims[1]) + y as usize) * dims[2] + x as usize;
                let src = ((sz as usize * dims[1]) + sy as usize) * dims[2] + sx as usize;
                out_v.data[dst] = v.data[src];
                out_m.data[dst] = m.data[src];
            }
        }
    }
    (out_v, out_m)
}

/// Shift by a per-axis uniform draw from `[-shift_max, shift_max]`.
pub fn random_shift(
    v: &Volume,
    m: &LabelMask,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> (Volume, LabelMask) {
    let s = cfg.shift_max as i64;
    let offset = if s == 0 {
        [0; 3]
    } else {
        [
            rng.gen_range(-s..=s),
            rng.gen_range(-s..=s),
            rng.gen_range(-s..=s),
        ]
    };
    shift_by(v, m, offset)
}

/// Reverse the slice order; label values are untouched.
pub fn flip_z(v: &Volume, m: &LabelMask) -> (Volume, LabelMask) {
    let [dz, dy, dx] = v.dims;
    let plane = dy * dx;
    let mut out_v = v.clone();
    let mut out_m = m.clone();
    for z in 0..dz {
        let src = (dz - 1 - z) * plane;
        out_v.data[z * plane..(z + 1) * plane].copy_from_slice(&v.data[src..src + plane]);
        out_m.data[z * plane..(z + 1) * plane].copy_from_slice(&m.data[src..src + plane]);
    }
    (out_v, out_m)
}

/// Inverse in-plane map shared by both containers: output pixel to source
/// coordinates, rotating about the slice center.
#[inline]
fn rotate_source(y: f64, x: f64, cy: f64, cx: f64, cos: f64, sin: f64) -> (f64, f64) {
    let (dy, dx) = (y - cy, x - cx);
    (cy + sin * dx + cos * dy, cx + cos * dx - sin * dy)
}

/// Rotate slices by `angle_deg` about their centers; bilinear for the
/// volume, nearest neighbor for labels, out-of-field maps to 0/background.
pub fn rotate_xy(v: &Volume, m: &LabelMask, angle_deg: f64) -> (Volume, LabelMask) {
    if angle_deg == 0.0 {
        return (v.clone(), m.clone());
    }
    let [dz, dy, dx] = v.dims;
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let (cy, cx) = ((dy as f64 - 1.0) / 2.0, (dx as f64 - 1.0) / 2.0);
    let mut out_v = Volume {
        data: vec![0.0; v.data.len()],
        ..v.clone()
    };
    let mut out_m = LabelMask {
        data: vec![0; m.data.len()],
        ..m.clone()
    };
    for z in 0..dz {
        let base = z * dy * dx;
        for y in 0..dy {
            for x in 0..dx {
                let (sy, sx) = rotate_source(y as f64, x as f64, cy, cx, cos, sin);
                let dst = base + y * dx + x;

                // nearest neighbor for the labels
                let (ny, nx) = (sy.round() as i64, sx.round() as i64);
                if ny >= 0 && ny < dy as i64 && nx >= 0 && nx < dx as i64 {
                    out_m.data[dst] = m.data[base + ny as usize * dx + nx as usize];
                }

                // bilinear for the intensities
                let (y0, x0) = (sy.floor(), sx.floor());
                let (fy, fx) = (sy - y0, sx - x0);
                let (y0, x0) = (y0 as i64, x0 as i64);
                let mut acc = 0.0f64;
                for (oy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
                    for (ox, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                        let (py, px) = (y0 + oy, x0 + ox);
                        if py >= 0 && py < dy as i64 && px >= 0 && px < dx as i64 {
                            acc += wy * wx * v.data[base + py as usize * dx + px as usize] as f64;
                        }
                    }
                }
                out_v.data[dst] = acc as f32;
            }
        }
    }
    (out_v, out_m)
}

/// Shift, maybe z-flip, then rotate, all drawn from `rng`.
pub fn apply_random(
    v: &Volume,
    m: &LabelMask,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> (Volume, LabelMask) {
    let (mut av, mut am) = random_shift(v, m, cfg, rng);
    if cfg.flip_z_prob > 0.0 && rng.gen_bool(cfg.flip_z_prob) {
        let flipped = flip_z(&av, &am);
        av = flipped.0;
        am = flipped.1;
    }
    if cfg.rotate_max_deg > 0.0 {
        let angle = rng.gen_range(-cfg.rotate_max_deg..=cfg.rotate_max_deg);
        let rotated = rotate_xy(&av, &am, angle);
        av = rotated.0;
        am = rotated.1;
    }
    (av, am)
}
