//! Graph operations: elementwise primitives, channel softmax, batch
//! normalization, channel concatenation, and the conv3d wrappers.

use super::conv;
use super::{Elem, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::exec;

/// Chunk size for parallel elementwise passes.
const ELEM_CHUNK: usize = 1 << 15;

fn elementwise_binary<T: Elem>(a: &[T], b: &[T], out: &mut [T], f: impl Fn(T, T) -> T + Sync) {
    exec::for_each_chunk_mut(out, ELEM_CHUNK, |ci, dst| {
        let base = ci * ELEM_CHUNK;
        for (i, d) in dst.iter_mut().enumerate() {
            *d = f(a[base + i], b[base + i]);
        }
    });
}

/// Per-channel running statistics for batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Elem> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            momentum: T::from_f64(0.1),
            eps: T::from_f64(1e-5),
        }
    }
}

impl<T: Elem> Graph<T> {
    fn binary_same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    /// Elementwise sum; used as the residual skip connection.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let mut out = Tensor::zeros(self.value(a).shape());
        elementwise_binary(
            self.value(a).data(),
            self.value(b).data(),
            out.data_mut(),
            |x, y| x + y,
        );
        let backward: super::BackwardFn<T> = Box::new(|gout, _, _, needs| {
            let g = |want: bool| want.then(|| gout.to_vec());
            vec![g(needs[0]), g(needs[1])]
        });
        Ok(self.record("add", out, vec![a, b], Some(backward)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let mut out = Tensor::zeros(self.value(a).shape());
        elementwise_binary(
            self.value(a).data(),
            self.value(b).data(),
            out.data_mut(),
            |x, y| x * y,
        );
        let backward: super::BackwardFn<T> = Box::new(|gout, _, inputs, needs| {
            let other = |i: usize| inputs[i].data();
            vec![
                needs[0].then(|| gout.iter().zip(other(1)).map(|(g, v)| *g * *v).collect()),
                needs[1].then(|| gout.iter().zip(other(0)).map(|(g, v)| *g * *v).collect()),
            ]
        });
        Ok(self.record("mul", out, vec![a, b], Some(backward)))
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.check(a)?;
        let out = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().map(|v| *v * c).collect(),
        )?;
        let backward: super::BackwardFn<T> = Box::new(move |gout, _, _, needs| {
            vec![needs[0].then(|| gout.iter().map(|g| *g * c).collect())]
        });
        Ok(self.record("scale", out, vec![a], Some(backward)))
    }

    /// Sum of all elements, yielding a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let total = self.value(a).data().iter().copied().sum::<T>();
        let n = self.value(a).numel();
        let backward: super::BackwardFn<T> =
            Box::new(move |gout, _, _, needs| vec![needs[0].then(|| vec![gout[0]; n])]);
        Ok(self.record("sum", Tensor::scalar(total), vec![a], Some(backward)))
    }

    /// Rectified linear unit, `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let mut out = Tensor::zeros(self.value(a).shape());
        let src = self.value(a).data();
        exec::for_each_chunk_mut(out.data_mut(), ELEM_CHUNK, |ci, dst| {
            let base = ci * ELEM_CHUNK;
            for (i, d) in dst.iter_mut().enumerate() {
                let v = src[base + i];
                *d = if v > T::zero() { v } else { T::zero() };
            }
        });
        let backward: super::BackwardFn<T> = Box::new(|gout, _, inputs, needs| {
            vec![needs[0].then(|| {
                gout.iter()
                    .zip(inputs[0].data())
                    .map(|(g, x)| if *x > T::zero() { *g } else { T::zero() })
                    .collect()
            })]
        });
        Ok(self.record("relu", out, vec![a], Some(backward)))
    }

    /// Concatenate two activations along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [na, ca, dz, dy, dx] = self.value(a).dims5()?;
        let [nb, cb, ez, ey, ex] = self.value(b).dims5()?;
        if na != nb || [dz, dy, dx] != [ez, ey, ex] {
            return Err(Error::ShapeMismatch(
                "concat_channels: batch/spatial dims differ".into(),
            ));
        }
        let plane = dz * dy * dx;
        let mut data = Vec::with_capacity(na * (ca + cb) * plane);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for n in 0..na {
            data.extend_from_slice(&ad[n * ca * plane..(n + 1) * ca * plane]);
            data.extend_from_slice(&bd[n * cb * plane..(n + 1) * cb * plane]);
        }
        let out = Tensor::new(vec![na, ca + cb, dz, dy, dx], data)?;
        let backward: super::BackwardFn<T> = Box::new(move |gout, _, _, needs| {
            let mut ga = needs[0].then(|| Vec::with_capacity(na * ca * plane));
            let mut gb = needs[1].then(|| Vec::with_capacity(na * cb * plane));
            for n in 0..na {
                let base = n * (ca + cb) * plane;
                if let Some(ga) = ga.as_mut() {
                    ga.extend_from_slice(&gout[base..base + ca * plane]);
                }
                if let Some(gb) = gb.as_mut() {
                    gb.extend_from_slice(&gout[base + ca * plane..base + (ca + cb) * plane]);
                }
            }
            vec![ga, gb]
        });
        Ok(self.record("concat", out, vec![a, b], Some(backward)))
    }

    /// Per-voxel softmax over the channel axis with max-subtraction
    /// stabilization.
    pub fn softmax_channels(&mut self, a: Var) -> Result<Var> {
        let [n, c, dz, dy, dx] = self.value(a).dims5()?;
        let plane = dz * dy * dx;
        let src = self.value(a).data();
        let mut data = vec![T::zero(); src.len()];
        for nn in 0..n {
            let base = nn * c * plane;
            for v in 0..plane {
                let mut m = T::neg_infinity();
                for ch in 0..c {
                    m = m.max(src[base + ch * plane + v]);
                }
                let mut total = T::zero();
                for ch in 0..c {
                    let e = (src[base + ch * plane + v] - m).exp();
                    data[base + ch * plane + v] = e;
                    total += e;
                }
                for ch in 0..c {
                    data[base + ch * plane + v] = data[base + ch * plane + v] / total;
                }
            }
        }
        let out = Tensor::new(vec![n, c, dz, dy, dx], data)?;
        let backward: super::BackwardFn<T> = Box::new(move |gout, value, _, needs| {
            vec![needs[0].then(|| {
                let p = value.data();
                let mut dx_out = vec![T::zero(); p.len()];
                for nn in 0..n {
                    let base = nn * c * plane;
                    for v in 0..plane {
                        let mut dot = T::zero();
                        for ch in 0..c {
                            let i = base + ch * plane + v;
                            dot += gout[i] * p[i];
                        }
                        for ch in 0..c {
                            let i = base + ch * plane + v;
                            dx_out[i] = p[i] * (gout[i] - dot);
                        }
                    }
                }
                dx_out
            })]
        });
        Ok(self.record("softmax", out, vec![a], Some(backward)))
    }

    /// Batch normalization over (N, Z, Y, X) per channel.
    ///
    /// Training mode normalizes with the batch statistics (biased variance,
    /// floored by `stats.eps`) and updates the running statistics in place;
    /// eval mode normalizes with the running statistics.
    pub fn batchnorm3d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        training: bool,
    ) -> Result<Var> {
        let [n, c, dz, dy, dx] = self.value(x).dims5()?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::ShapeMismatch(format!(
                "batchnorm3d: gamma/beta length must be {c}"
            )));
        }
        if stats.mean.len() != c {
            return Err(Error::ShapeMismatch(format!(
                "batchnorm3d: running stats have {} channels, input has {c}",
                stats.mean.len()
            )));
        }
        let plane = dz * dy * dx;
        let m = n * plane;
        let src = self.value(x).data();

        let (mean, invstd): (Vec<T>, Vec<T>) = if training {
            let per_channel = exec::map_collect(c, |ch| {
                let mut sum = T::zero();
                let mut sq = T::zero();
                for nn in 0..n {
                    let s = &src[(nn * c + ch) * plane..][..plane];
                    for v in s {
                        sum += *v;
                        sq += *v * *v;
                    }
                }
                let mf = T::from_f64(m as f64);
                let mu = sum / mf;
                let var = (sq / mf - mu * mu).max(T::zero());
                (mu, var)
            });
            let mean: Vec<T> = per_channel.iter().map(|(mu, _)| *mu).collect();
            let var: Vec<T> = per_channel.iter().map(|(_, var)| *var).collect();
            let one = T::one();
            for ch in 0..c {
                stats.mean[ch] = (one - stats.momentum) * stats.mean[ch] + stats.momentum * mean[ch];
                stats.var[ch] = (one - stats.momentum) * stats.var[ch] + stats.momentum * var[ch];
            }
            let invstd = var.iter().map(|v| one / (*v + stats.eps).sqrt()).collect();
            (mean, invstd)
        } else {
            let invstd = stats
                .var
                .iter()
                .map(|v| T::one() / (*v + stats.eps).sqrt())
                .collect();
            (stats.mean.clone(), invstd)
        };

        let gamma_v = self.value(gamma).data().to_vec();
        let beta_v = self.value(beta).data().to_vec();
        let mut out = Tensor::zeros(self.value(x).shape());
        exec::for_each_chunk_mut(out.data_mut(), plane, |chunk, dst| {
            let ch = chunk % c;
            let s = &src[chunk * plane..][..plane];
            let (mu, is, g, b) = (mean[ch], invstd[ch], gamma_v[ch], beta_v[ch]);
            for (d, v) in dst.iter_mut().zip(s) {
                *d = (*v - mu) * is * g + b;
            }
        });

        let backward: super::BackwardFn<T> = Box::new(move |gout, _, inputs, needs| {
            let x = inputs[0].data();
            let gamma = inputs[1].data();
            let mf = T::from_f64(m as f64);
            // per-channel sums of g and g * xhat
            let sums = exec::map_collect(c, |ch| {
                let (mu, is) = (mean[ch], invstd[ch]);
                let mut sg = T::zero();
                let mut sgx = T::zero();
                for nn in 0..n {
                    let base = (nn * c + ch) * plane;
                    let gs = &gout[base..base + plane];
                    let xs = &x[base..base + plane];
                    for (g, xv) in gs.iter().zip(xs) {
                        sg += *g;
                        sgx += *g * (*xv - mu) * is;
                    }
                }
                (sg, sgx)
            });
            let dx = needs[0].then(|| {
                let mut dx = vec![T::zero(); x.len()];
                exec::for_each_chunk_mut(&mut dx, plane, |chunk, dst| {
                    let ch = chunk % c;
                    let (mu, is, g) = (mean[ch], invstd[ch], gamma[ch]);
                    let base = chunk * plane;
                    if training {
                        let (sg, sgx) = sums[ch];
                        let mean_g = sg / mf;
                        let mean_gx = sgx / mf;
                        for (i, d) in dst.iter_mut().enumerate() {
                            let xhat = (x[base + i] - mu) * is;
                            *d = g * is * (gout[base + i] - mean_g - xhat * mean_gx);
                        }
                    } else {
                        for (i, d) in dst.iter_mut().enumerate() {
                            *d = g * is * gout[base + i];
                        }
                    }
                });
                dx
            });
            let dgamma = needs[1].then(|| sums.iter().map(|(_, sgx)| *sgx).collect());
            let dbeta = needs[2].then(|| sums.iter().map(|(sg, _)| *sg).collect());
            vec![dx, dgamma, dbeta]
        });
        Ok(self.record("batchnorm", out, vec![x, gamma, beta], Some(backward)))
    }

    /// 3D cross-correlation with zero padding.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        self.check(b)?;
        let xd = self.value(x).dims5()?;
        let wd = self.value(w).dims5()?;
        let od = conv::conv3d_out_dims(xd, wd, stride, pad)?;
        if self.value(b).numel() != wd[0] {
            return Err(Error::ShapeMismatch(format!(
                "conv3d: bias length {} != output channels {}",
                self.value(b).numel(),
                wd[0]
            )));
        }
        let mut out = Tensor::zeros(&od);
        conv::conv3d_forward(
            self.value(x).data(),
            xd,
            self.value(w).data(),
            wd,
            self.value(b).data(),
            stride,
            pad,
            out.data_mut(),
            od,
        );
        let backward: super::BackwardFn<T> = Box::new(move |gout, _, inputs, needs| {
            let dx = needs[0].then(|| {
                let mut dx = vec![T::zero(); inputs[0].numel()];
                conv::conv3d_backward_input(gout, od, inputs[1].data(), wd, stride, pad, &mut dx, xd);
                dx
            });
            let dw = needs[1].then(|| {
                let mut dw = vec![T::zero(); inputs[1].numel()];
                conv::conv3d_backward_kernel(gout, od, inputs[0].data(), xd, stride, pad, &mut dw, wd);
                dw
            });
            let db = needs[2].then(|| {
                let mut db = vec![T::zero(); od[1]];
                conv::conv3d_backward_bias(gout, od, &mut db);
                db
            });
            vec![dx, dw, db]
        });
        Ok(self.record(
            if stride > 1 { "downsample" } else { "conv3d" },
            out,
            vec![x, w, b],
            Some(backward),
        ))
    }

    /// 3D transposed convolution (stride-s upsampling).
    pub fn conv_transpose3d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        self.check(b)?;
        let xd = self.value(x).dims5()?;
        let wd = self.value(w).dims5()?;
        let od = conv::conv_transpose3d_out_dims(xd, wd, stride)?;
        if self.value(b).numel() != wd[1] {
            return Err(Error::ShapeMismatch(format!(
                "conv_transpose3d: bias length {} != output channels {}",
                self.value(b).numel(),
                wd[1]
            )));
        }
        let mut out = Tensor::zeros(&od);
        conv::conv_transpose3d_forward(
            self.value(x).data(),
            xd,
            self.value(w).data(),
            wd,
            self.value(b).data(),
            stride,
            out.data_mut(),
            od,
        );
        let backward: super::BackwardFn<T> = Box::new(move |gout, _, inputs, needs| {
            let dx = needs[0].then(|| {
                let mut dx = vec![T::zero(); inputs[0].numel()];
                conv::conv_transpose3d_backward_input(
                    gout,
                    od,
                    inputs[1].data(),
                    wd,
                    stride,
                    &mut dx,
                    xd,
                );
                dx
            });
            let dw = needs[1].then(|| {
                let mut dw = vec![T::zero(); inputs[1].numel()];
                conv::conv_transpose3d_backward_kernel(
                    gout,
                    od,
                    inputs[0].data(),
                    xd,
                    stride,
                    &mut dw,
                    wd,
                );
                dw
            });
            let db = needs[2].then(|| {
                let mut db = vec![T::zero(); od[1]];
                conv::conv3d_backward_bias(gout, od, &mut db);
                db
            });
            vec![dx, dw, db]
        });
        Ok(self.record("upsample", out, vec![x, w, b], Some(backward)))
    }
}
