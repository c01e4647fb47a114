//! Hybrid training objective: soft dice plus focal loss.
//!
//! Dice aggregates per class c over all voxels i:
//! `s_c = (sum p*g + eps) / (sum [p*g + (1-p)*g + p*(1-g)] + eps)` and the
//! loss is `sum_c (1 - s_c)`, so empty classes contribute 0 rather than 0/0.
//! Focal is `-(1/N) * sum_c sum_i alpha_c * g * (1-p)^gamma * log(max(p,
//! floor))`. Both are recorded as single graph nodes with analytic
//! gradients; finite differences verify them in the test suites.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Elem, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::volume::LabelMask;

/// Hyperparameters of the hybrid objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the focal term.
    pub lambda: f64,
    /// Per-class focal weights; a single entry broadcasts to every class.
    pub alpha: Vec<f64>,
    /// Focusing exponent.
    pub gamma: f64,
    /// Probability floor inside the log.
    pub prob_floor: f64,
    /// Smoothing added to dice numerator and denominator.
    pub dice_smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            alpha: vec![1.0],
            gamma: 2.0,
            prob_floor: 1e-7,
            dice_smooth: 1e-5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::InvalidConfig("lambda must be >= 0".into()));
        }
        if self.gamma < 0.0 {
            return Err(Error::InvalidConfig("gamma must be >= 0".into()));
        }
        if self.alpha.is_empty() || self.alpha.iter().any(|a| *a <= 0.0) {
            return Err(Error::InvalidConfig("alpha weights must be positive".into()));
        }
        if self.prob_floor <= 0.0 || self.dice_smooth <= 0.0 {
            return Err(Error::InvalidConfig("floors must be positive".into()));
        }
        Ok(())
    }

    fn alpha_for(&self, classes: usize) -> Result<Vec<f64>> {
        if self.alpha.len() == 1 {
            Ok(vec![self.alpha[0]; classes])
        } else if self.alpha.len() == classes {
            Ok(self.alpha.clone())
        } else {
            Err(Error::InvalidConfig(format!(
                "alpha has {} entries for {} classes",
                self.alpha.len(),
                classes
            )))
        }
    }
}

/// One-hot indicator tensor `[1, C, Z, Y, X]` from a label mask.
pub fn one_hot<T: Elem>(labels: &LabelMask, classes: usize) -> Tensor<T> {
    let [dz, dy, dx] = labels.dims;
    let plane = dz * dy * dx;
    let mut data = vec![T::zero(); classes * plane];
    for (i, l) in labels.data.iter().enumerate() {
        data[*l as usize * plane + i] = T::one();
    }
    Tensor::new(vec![1, classes, dz, dy, dx], data).unwrap()
}

fn check_pair<T: Elem>(g: &Graph<T>, p: Var, target: Var) -> Result<[usize; 5]> {
    g.check(p)?;
    g.check(target)?;
    let pd = g.value(p).dims5()?;
    let td = g.value(target).dims5()?;
    if pd != td {
        return Err(Error::ShapeMismatch(format!(
            "loss: prediction {pd:?} and target {td:?} differ"
        )));
    }
    Ok(pd)
}

/// Soft dice loss `sum_c (1 - s_c)`; gradients flow to `p` only.
pub fn dice_loss<T: Elem>(g: &mut Graph<T>, p: Var, target: Var, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let [n, c, dz, dy, dx] = check_pair(g, p, target)?;
    let plane = dz * dy * dx;
    let eps = T::from_f64(cfg.dice_smooth);

    let sums = per_class_sums(g.value(p).data(), g.value(target).data(), n, c, plane, eps);
    let loss = sums
        .iter()
        .map(|(num, den)| T::one() - *num / *den)
        .sum::<T>();

    let backward: crate::autodiff::BackwardFn<T> = Box::new(move |gout, _, inputs, needs| {
        let dp = needs[0].then(|| {
            let p = inputs[0].data();
            let t = inputs[1].data();
            let g0 = gout[0];
            let mut dp = vec![T::zero(); p.len()];
            crate::exec::for_each_chunk_mut(&mut dp, plane, |chunk, dst| {
                let ch = chunk % c;
                let (num, den) = sums[ch];
                let base = chunk * plane;
                for (i, d) in dst.iter_mut().enumerate() {
                    let gi = t[base + i];
                    // d/dp of -num/den with d(num) = g, d(den) = 1
                    // (den collects g + p - p*g, so d(den)/dp = 1 - g)
                    *d = g0 * (num * (T::one() - gi) - gi * den) / (den * den);
                }
            });
            dp
        });
        vec![dp, None]
    });
    Ok(g.record("dice_loss", Tensor::scalar(loss), vec![p, target], Some(backward)))
}

fn per_class_sums<T: Elem>(
    p: &[T],
    t: &[T],
    n: usize,
    c: usize,
    plane: usize,
    eps: T,
) -> Vec<(T, T)> {
    crate::exec::map_collect(c, |ch| {
        let mut num = T::zero();
        let mut den = T::zero();
        for nn in 0..n {
            let base = (nn * c + ch) * plane;
            let ps = &p[base..base + plane];
            let ts = &t[base..base + plane];
            for (pv, tv) in ps.iter().zip(ts) {
                let pg = *pv * *tv;
                num += pg;
                den += *tv + *pv - pg;
            }
        }
        (num + eps, den + eps)
    })
}

/// Focal loss with probability floor; gradients flow to `p` only.
pub fn focal_loss<T: Elem>(g: &mut Graph<T>, p: Var, target: Var, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let [n, c, dz, dy, dx] = check_pair(g, p, target)?;
    let plane = dz * dy * dx;
    let voxels = n * plane;
    let alpha: Vec<T> = cfg
        .alpha_for(c)?
        .into_iter()
        .map(T::from_f64)
        .collect();
    let gamma = T::from_f64(cfg.gamma);
    let floor = T::from_f64(cfg.prob_floor);
    let scale = T::from_f64(1.0 / voxels as f64);

    let per_class = {
        let pd = g.value(p).data();
        let td = g.value(target).data();
        crate::exec::map_collect(c, |ch| {
            let mut acc = T::zero();
            for nn in 0..n {
                let base = (nn * c + ch) * plane;
                for (pv, tv) in pd[base..base + plane].iter().zip(&td[base..base + plane]) {
                    if *tv > T::zero() {
                        let omp = T::one() - *pv;
                        acc += *tv * omp.powf(gamma) * pv.max(floor).ln();
                    }
                }
            }
            -alpha[ch] * acc
        })
    };
    let loss = per_class.iter().copied().sum::<T>() * scale;

    let backward: crate::autodiff::BackwardFn<T> = Box::new(move |gout, _, inputs, needs| {
        let dp = needs[0].then(|| {
            let p = inputs[0].data();
            let t = inputs[1].data();
            let g0 = gout[0];
            let mut dp = vec![T::zero(); p.len()];
            crate::exec::for_each_chunk_mut(&mut dp, plane, |chunk, dst| {
                let ch = chunk % c;
                let k = alpha[ch] * scale * g0;
                let base = chunk * plane;
                for (i, d) in dst.iter_mut().enumerate() {
                    let gi = t[base + i];
                    if gi <= T::zero() {
                        continue;
                    }
                    let pv = p[base + i];
                    let omp = T::one() - pv;
                    let lnq = pv.max(floor).ln();
                    let modulation = if gamma > T::zero() && omp > T::zero() {
                        gamma * omp.powf(gamma - T::one()) * lnq
                    } else {
                        T::zero()
                    };
                    let ce = if pv > floor {
                        omp.powf(gamma) / pv
                    } else {
                        T::zero()
                    };
                    *d = k * gi * (modulation - ce);
                }
            });
            dp
        });
        vec![dp, None]
    });
    Ok(g.record("focal_loss", Tensor::scalar(loss), vec![p, target], Some(backward)))
}

/// `dice + lambda * focal`; with `lambda == 0` this IS the dice node, so the
/// identity is bit-exact.
pub fn hybrid_loss<T: Elem>(g: &mut Graph<T>, p: Var, target: Var, cfg: &LossConfig) -> Result<Var> {
    let dice = dice_loss(g, p, target, cfg)?;
    if cfg.lambda == 0.0 {
        return Ok(dice);
    }
    let focal = focal_loss(g, p, target, cfg)?;
    let weighted = g.scale(focal, T::from_f64(cfg.lambda))?;
    g.add(dice, weighted)
}
