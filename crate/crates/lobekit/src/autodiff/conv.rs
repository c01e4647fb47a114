//! Direct 3D convolution kernels (cross-correlation, zero padding) and
//! their gradients.
//!
//! The stride-1 inner loops run over contiguous x rows as shifted
//! axpy/dot passes so they vectorize; strided variants fall back to scalar
//! gathers. Work is partitioned over independent output planes, so the
//! reduction order inside every output element is fixed and results do not
//! depend on the execution mode.

use super::Elem;
use crate::error::{Error, Result};
use crate::exec;

/// Output shape of a conv with square-law `floor((d + 2p - k) / s) + 1`.
pub fn conv3d_out_dims(xd: [usize; 5], wd: [usize; 5], stride: usize, pad: usize) -> Result<[usize; 5]> {
    let [n, ci, d, h, w] = xd;
    let [co, wci, kz, ky, kx] = wd;
    if wci != ci {
        return Err(Error::ShapeMismatch(format!(
            "conv3d: input channels {ci} != kernel channels {wci}"
        )));
    }
    if stride == 0 {
        return Err(Error::ShapeMismatch("conv3d: stride must be positive".into()));
    }
    for (dim, k) in [(d, kz), (h, ky), (w, kx)] {
        if dim + 2 * pad < k {
            return Err(Error::ShapeMismatch(format!(
                "conv3d: spatial dim {dim} + 2*pad {pad} smaller than kernel {k}"
            )));
        }
    }
    Ok([
        n,
        co,
        (d + 2 * pad - kz) / stride + 1,
        (h + 2 * pad - ky) / stride + 1,
        (w + 2 * pad - kx) / stride + 1,
    ])
}

/// Valid output-x window for a stride-1 row pass: `ix = ox + dx - pad`.
#[inline]
fn row_window(wi: usize, ow: usize, dx: usize, pad: usize) -> Option<(usize, usize, usize)> {
    let lo = (pad as isize - dx as isize).max(0) as usize;
    let hi = ((wi + pad) as isize - dx as isize).min(ow as isize);
    if hi <= lo as isize {
        return None;
    }
    let ix_lo = lo + dx - pad;
    Some((lo, hi as usize, ix_lo))
}

/// `dst[i] += w0*src[i-1] + w1*src[i] + w2*src[i+1]`, zero padded; rows
/// must have equal length (the stride-1, k=3, pad-1 case).
#[inline]
fn row_stencil3<T: Elem>(dst: &mut [T], src: &[T], w0: T, w1: T, w2: T) {
    let n = dst.len();
    debug_assert_eq!(src.len(), n);
    match n {
        0 => {}
        1 => dst[0] += w1 * src[0],
        _ => {
            dst[0] = dst[0] + w1 * src[0] + w2 * src[1];
            let (head, tail) = (&src[..n - 2], &src[2..]);
            for (((d, a), b), c) in dst[1..n - 1]
                .iter_mut()
                .zip(head)
                .zip(&src[1..n - 1])
                .zip(tail)
            {
                *d = *d + w0 * *a + w1 * *b + w2 * *c;
            }
            dst[n - 1] = dst[n - 1] + w0 * src[n - 2] + w1 * src[n - 1];
        }
    }
}

/// Shifted dot products of two equal rows: `out[t] += sum_i a[i] *
/// b[i+t-1]` with zero padding (kernel-gradient taps).
#[inline]
fn row_dots3<T: Elem>(a: &[T], b: &[T]) -> (T, T, T) {
    let n = a.len();
    debug_assert_eq!(b.len(), n);
    match n {
        0 => (T::zero(), T::zero(), T::zero()),
        1 => (T::zero(), a[0] * b[0], T::zero()),
        _ => {
            let mut d0 = T::zero();
            let mut d1 = T::zero();
            let mut d2 = T::zero();
            for ((av, b0), b2) in a[1..n - 1].iter().zip(&b[..n - 2]).zip(&b[2..]) {
                d0 += *av * *b0;
                d2 += *av * *b2;
            }
            for (av, bv) in a.iter().zip(b) {
                d1 += *av * *bv;
            }
            d0 += a[n - 1] * b[n - 2];
            d2 += a[0] * b[1];
            (d0, d1, d2)
        }
    }
}

/// Does this conv hit the fused 3x3x3 stride-1 pad-1 path?
#[inline]
fn is_k3_hot_path(wd: [usize; 5], stride: usize, pad: usize) -> bool {
    stride == 1 && pad == 1 && wd[2] == 3 && wd[3] == 3 && wd[4] == 3
}

#[allow(clippy::too_many_arguments)]
pub fn conv3d_forward<T: Elem>(
    x: &[T],
    xd: [usize; 5],
    w: &[T],
    wd: [usize; 5],
    bias: &[T],
    stride: usize,
    pad: usize,
    out: &mut [T],
    od: [usize; 5],
) {
    let [_, ci, d, h, wi] = xd;
    let [co, _, kz, ky, kx] = wd;
    let [_, _, odz, oh, ow] = od;
    let in_plane = d * h * wi;
    let out_plane = odz * oh * ow;

    if is_k3_hot_path(wd, stride, pad) {
        exec::for_each_chunk_mut(out, out_plane, |chunk, dst| {
            let nn = chunk / co;
            let c_out = chunk % co;
            let mut acc = vec![T::zero(); ow];
            for oz in 0..odz {
                for oy in 0..oh {
                    acc.fill(bias[c_out]);
                    for c_in in 0..ci {
                        let x_base = (nn * ci + c_in) * in_plane;
                        let w_base = (c_out * ci + c_in) * 27;
                        for dz in 0..3usize {
                            let iz = (oz + dz) as isize - 1;
                            if iz < 0 || iz >= d as isize {
                                continue;
                            }
                            for dy in 0..3usize {
                                let iy = (oy + dy) as isize - 1;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let x_row =
                                    &x[x_base + (iz as usize * h + iy as usize) * wi..][..wi];
                                let taps = &w[w_base + (dz * 3 + dy) * 3..][..3];
                                row_stencil3(&mut acc, x_row, taps[0], taps[1], taps[2]);
                            }
                        }
                    }
                    dst[(oz * oh + oy) * ow..][..ow].copy_from_slice(&acc);
                }
            }
        });
        return;
    }

    exec::for_each_chunk_mut(out, out_plane, |chunk, dst| {
        let nn = chunk / co;
        let c_out = chunk % co;
        dst.fill(bias[c_out]);
        for c_in in 0..ci {
            let x_base = (nn * ci + c_in) * in_plane;
            for dz in 0..kz {
                for dy in 0..ky {
                    for dx in 0..kx {
                        let wv = w[(((c_out * ci + c_in) * kz + dz) * ky + dy) * kx + dx];
                        for oz in 0..odz {
                            let iz = (oz * stride + dz) as isize - pad as isize;
                            if iz < 0 || iz >= d as isize {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = (oy * stride + dy) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let x_row = &x[x_base + (iz as usize * h + iy as usize) * wi..][..wi];
                                let o_row = &mut dst[(oz * oh + oy) * ow..][..ow];
                                if stride == 1 {
                                    if let Some((lo, hi, ix_lo)) = row_window(wi, ow, dx, pad) {
                                        let xs = &x_row[ix_lo..ix_lo + (hi - lo)];
                                        for (o, xv) in o_row[lo..hi].iter_mut().zip(xs) {
                                            *o += wv * *xv;
                                        }
                                    }
                                } else {
                                    for (ox, o) in o_row.iter_mut().enumerate() {
                                        let ix = (ox * stride + dx) as isize - pad as isize;
                                        if ix >= 0 && ix < wi as isize {
                                            *o += wv * x_row[ix as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Gradient w.r.t. the input, partitioned over (n, c_in) planes.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward_input<T: Elem>(
    gout: &[T],
    od: [usize; 5],
    w: &[T],
    wd: [usize; 5],
    stride: usize,
    pad: usize,
    dx_out: &mut [T],
    xd: [usize; 5],
) {
    let [_, ci, d, h, wi] = xd;
    let [co, _, kz, ky, kx] = wd;
    let [_, _, odz, oh, ow] = od;
    let in_plane = d * h * wi;
    let out_plane = odz * oh * ow;

    if is_k3_hot_path(wd, stride, pad) {
        // dx is the correlation of gout with the flipped kernel; for k=3,
        // pad 1, stride 1 the geometry mirrors the forward stencil
        exec::for_each_chunk_mut(dx_out, in_plane, |chunk, dst| {
            let nn = chunk / ci;
            let c_in = chunk % ci;
            let mut acc = vec![T::zero(); wi];
            for iz in 0..d {
                for iy in 0..h {
                    acc.fill(T::zero());
                    for c_out in 0..co {
                        let g_base = (nn * co + c_out) * out_plane;
                        let w_base = (c_out * ci + c_in) * 27;
                        for dz in 0..3usize {
                            let oz = (iz + 1) as isize - dz as isize;
                            if oz < 0 || oz >= odz as isize {
                                continue;
                            }
                            for dy in 0..3usize {
                                let oy = (iy + 1) as isize - dy as isize;
                                if oy < 0 || oy >= oh as isize {
                                    continue;
                                }
                                let g_row = &gout
                                    [g_base + (oz as usize * oh + oy as usize) * ow..][..ow];
                                let taps = &w[w_base + (dz * 3 + dy) * 3..][..3];
                                // flipped taps: dx[ix] += w[t] * g[ix + 1 - t]
                                row_stencil3(&mut acc, g_row, taps[2], taps[1], taps[0]);
                            }
                        }
                    }
                    dst[(iz * h + iy) * wi..][..wi].copy_from_slice(&acc);
                }
            }
        });
        return;
    }

    exec::for_each_chunk_mut(dx_out, in_plane, |chunk, dst| {
        let nn = chunk / ci;
        let c_in = chunk % ci;
        dst.fill(T::zero());
        for c_out in 0..co {
            let g_base = (nn * co + c_out) * out_plane;
            for dz in 0..kz {
                for dy in 0..ky {
                    for dx in 0..kx {
                        let wv = w[(((c_out * ci + c_in) * kz + dz) * ky + dy) * kx + dx];
                        for oz in 0..odz {
                            let iz = (oz * stride + dz) as isize - pad as isize;
                            if iz < 0 || iz >= d as isize {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = (oy * stride + dy) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let g_row = &gout[g_base + (oz * oh + oy) * ow..][..ow];
                                let d_row =
                                    &mut dst[(iz as usize * h + iy as usize) * wi..][..wi];
                                if stride == 1 {
                                    if let Some((lo, hi, ix_lo)) = row_window(wi, ow, dx, pad) {
                                        let ds = &mut d_row[ix_lo..ix_lo + (hi - lo)];
                                        for (dv, g) in ds.iter_mut().zip(&g_row[lo..hi]) {
                                            *dv += wv * *g;
                                        }
                                    }
                                } else {
                                    for (ox, g) in g_row.iter().enumerate() {
                                        let ix = (ox * stride + dx) as isize - pad as isize;
                                        if ix >= 0 && ix < wi as isize {
                                            d_row[ix as usize] += wv * *g;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Gradient w.r.t. the kernel, partitioned over output channels.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward_kernel<T: Elem>(
    gout: &[T],
    od: [usize; 5],
    x: &[T],
    xd: [usize; 5],
    stride: usize,
    pad: usize,
    dw_out: &mut [T],
    wd: [usize; 5],
) {
    let [n, ci, d, h, wi] = xd;
    let [co, _, kz, ky, kx] = wd;
    let [_, _, odz, oh, ow] = od;
    let in_plane = d * h * wi;
    let out_plane = odz * oh * ow;
    let w_chunk = ci * kz * ky * kx;

    if is_k3_hot_path(wd, stride, pad) {
        exec::for_each_chunk_mut(dw_out, w_chunk, |c_out, dst| {
            dst.fill(T::zero());
            for nn in 0..n {
                let g_base = (nn * co + c_out) * out_plane;
                for c_in in 0..ci {
                    let x_base = (nn * ci + c_in) * in_plane;
                    for oz in 0..odz {
                        for oy in 0..oh {
                            let g_row = &gout[g_base + (oz * oh + oy) * ow..][..ow];
                            for dz in 0..3usize {
                                let iz = (oz + dz) as isize - 1;
                                if iz < 0 || iz >= d as isize {
                                    continue;
                                }
                                for dy in 0..3usize {
                                    let iy = (oy + dy) as isize - 1;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let x_row = &x
                                        [x_base + (iz as usize * h + iy as usize) * wi..][..wi];
                                    let (d0, d1, d2) = row_dots3(g_row, x_row);
                                    let slot = c_in * 27 + (dz * 3 + dy) * 3;
                                    dst[slot] += d0;
                                    dst[slot + 1] += d1;
                                    dst[slot + 2] += d2;
                                }
                            }
                        }
                    }
                }
            }
        });
        return;
    }

    exec::for_each_chunk_mut(dw_out, w_chunk, |c_out, dst| {
        dst.fill(T::zero());
        for nn in 0..n {
            let g_base = (nn * co + c_out) * out_plane;
            for c_in in 0..ci {
                let x_base = (nn * ci + c_in) * in_plane;
                for dz in 0..kz {
                    for dy in 0..ky {
                        for dx in 0..kx {
                            let mut acc = T::zero();
                            for oz in 0..odz {
                                let iz = (oz * stride + dz) as isize - pad as isize;
                                if iz < 0 || iz >= d as isize {
                                    continue;
                                }
                                for oy in 0..oh {
                                    let iy = (oy * stride + dy) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let g_row = &gout[g_base + (oz * oh + oy) * ow..][..ow];
                                    let x_row =
                                        &x[x_base + (iz as usize * h + iy as usize) * wi..][..wi];
                                    if stride == 1 {
                                        if let Some((lo, hi, ix_lo)) = row_window(wi, ow, dx, pad)
                                        {
                                            let xs = &x_row[ix_lo..ix_lo + (hi - lo)];
                                            acc += g_row[lo..hi]
                                                    .iter()
                                                    .zip(xs)
                                                    .map(|(g, xv)| *g * *xv)
                                                    .sum::<T>();
                                        }
                                    } else {
                                        for (ox, g) in g_row.iter().enumerate() {
                                            let ix =
                                                (ox * stride + dx) as isize - pad as isize;
                                            if ix >= 0 && ix < wi as isize {
                                                acc += *g * x_row[ix as usize];
                                            }
                                        }
                                    }
                                }
                            }
                            let slot = ((c_in * kz + dz) * ky + dy) * kx + dx;
                            dst[slot] += acc;
                        }
                    }
                }
            }
        }
    });
}

/// Gradient w.r.t. the bias: per-channel sum of the output gradient.
pub fn conv3d_backward_bias<T: Elem>(gout: &[T], od: [usize; 5], db_out: &mut [T]) {
    let [n, co, odz, oh, ow] = od;
    let out_plane = odz * oh * ow;
    let sums = exec::map_collect(co, |c_out| {
        let mut acc = T::zero();
        for nn in 0..n {
            let g_plane = &gout[(nn * co + c_out) * out_plane..][..out_plane];
            acc += g_plane.iter().copied().sum::<T>();
        }
        acc
    });
    db_out.copy_from_slice(&sums);
}

/// Output shape of a transposed conv: `(d - 1) * s + k` per axis.
pub fn conv_transpose3d_out_dims(
    xd: [usize; 5],
    wd: [usize; 5],
    stride: usize,
) -> Result<[usize; 5]> {
    let [n, ci, d, h, w] = xd;
    let [wci, co, kz, ky, kx] = wd;
    if wci != ci {
        return Err(Error::ShapeMismatch(format!(
            "conv_transpose3d: input channels {ci} != kernel channels {wci}"
        )));
    }
    if stride == 0 {
        return Err(Error::ShapeMismatch(
            "conv_transpose3d: stride must be positive".into(),
        ));
    }
    Ok([
        n,
        co,
        (d - 1) * stride + kz,
        (h - 1) * stride + ky,
        (w - 1) * stride + kx,
    ])
}

/// Transposed convolution forward; kernel layout is [Cin, Cout, kz, ky, kx].
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose3d_forward<T: Elem>(
    x: &[T],
    xd: [usize; 5],
    w: &[T],
    wd: [usize; 5],
    bias: &[T],
    stride: usize,
    out: &mut [T],
    od: [usize; 5],
) {
    let [_, ci, d, h, wi] = xd;
    let [_, co, kz, ky, kx] = wd;
    let [_, _, odz, oh, ow] = od;
    let in_plane = d * h * wi;
    let out_plane = odz * oh * ow;

    exec::for_each_chunk_mut(out, out_plane, |chunk, dst| {
        let nn = chunk / co;
        let c_out = chunk % co;
        dst.fill(bias[c_out]);
        for c_in in 0..ci {
            let x_base = (nn * ci + c_in) * in_plane;
            for dz in 0..kz {
                for dy in 0..ky {
                    for dx in 0..kx {
                        let wv = w[(((c_in * co + c_out) * kz + dz) * ky + dy) * kx + dx];
                        for iz in 0..d {
                            let oz = iz * stride + dz;
                            for iy in 0..h {
                                let oy = iy * stride + dy;
                                let x_row = &x[x_base + (iz * h + iy) * wi..][..wi];
                                let o_row = &mut dst[(oz * oh + oy) * ow..];
                                for (ix, xv) in x_row.iter().enumerate() {
                                    let ox = ix * stride + dx;
                                    o_row[ox] += wv * *xv;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Transposed-conv input gradient: a strided gather of the output gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose3d_backward_input<T: Elem>(
    gout: &[T],
    od: [usize; 5],
    w: &[T],
    wd: [usize; 5],
    stride: usize,
    dx_out: &mut [T],
    xd: [usize; 5],
) {
    let [_, ci, d, h, wi] = xd;
    let [_, co, kz, ky, kx] = wd;
    let [_, _, odz, oh, ow] = od;
    let in_plane = d * h * wi;
    let out_plane = odz * oh * ow;

    exec::for_each_chunk_mut(dx_out, in_plane, |chunk, dst| {
        let nn = chunk / ci;
        let c_in = chunk % ci;
        dst.fill(T::zero());
        for c_out in 0..co {
            let g_base = (nn * co + c_out) * out_plane;
            for dz in 0..kz {
                for dy in 0..ky {
                    for dx in 0..kx {
                        let wv = w[(((c_in * co + c_out) * kz + dz) * ky + dy) * kx + dx];
                        for iz in 0..d {
                            let oz = iz * stride + dz;
                            for iy in 0..h {
                                let oy = iy * stride + dy;
                                let g_row = &gout[g_base + (oz * oh + oy) * ow..];
                                let d_row = &mut dst[(iz * h + iy) * wi..][..wi];
                                for (ix, dv) in d_row.iter_mut().enumerate() {
                                    *dv += wv * g_row[ix * stride + dx];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Transposed-conv kernel gradient, partitioned over input channels.
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose3d_backward_kernel<T: Elem>(
    gout: &[T],
    od: [usize; 5],
    x: &[T],
    xd: [usize; 5],
    stride: usize,
    dw_out: &mut [T],
    wd: [usize; 5],
) {
    let [n, ci, d, h, wi] = xd;
    let [_, co, kz, ky, kx] = wd;
    let [_, _, odz, oh, ow] = od;
    let in_plane = d * h * wi;
    let out_plane = odz * oh * ow;
    let w_chunk = co * kz * ky * kx;

    exec::for_each_chunk_mut(dw_out, w_chunk, |c_in, dst| {
        dst.fill(T::zero());
        for nn in 0..n {
            let x_base = (nn * ci + c_in) * in_plane;
            for c_out in 0..co {
                let g_base = (nn * co + c_out) * out_plane;
                for dz in 0..kz {
                    for dy in 0..ky {
                        for dx in 0..kx {
                            let mut acc = T::zero();
                            for iz in 0..d {
                                let oz = iz * stride + dz;
                                for iy in 0..h {
                                    let oy = iy * stride + dy;
                                    let x_row = &x[x_base + (iz * h + iy) * wi..][..wi];
                                    let g_row = &gout[g_base + (oz * oh + oy) * ow..];
                                    for (ix, xv) in x_row.iter().enumerate() {
                                        acc += *xv * g_row[ix * stride + dx];
                                    }
                                }
                            }
                            let slot = ((c_out * kz + dz) * ky + dy) * kx + dx;
                            dst[slot] += acc;
                        }
                    }
                }
            }
        }
    });
}
