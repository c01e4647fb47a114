//! Adam training loop and whole-volume inference.
//!
//! One sample per step (batch size is fixed at one), seeded shuffles per
//! epoch, optional augmentation and patch cropping, and no model selection:
//! the parameters after the final epoch are the result. The whole
//! trajectory is a pure function of (seed, dataset, config).

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_random, AugmentConfig};
use crate::autodiff::{Elem, Graph, Tensor};
use crate::error::{Error, Result};
use crate::loss::{hybrid_loss, one_hot, LossConfig};
use crate::model::{LobeNet, LobeNetSpec, Param};
use crate::volume::{crop_labels, crop_volume, CropRegion, Dims, LabelMask, Volume};

/// Optimization protocol parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Fixed at one; validated, not tuned.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Seed of the per-epoch sample shuffle.
    pub seed: u64,
    pub loss: LossConfig,
    /// `None` disables augmentation.
    pub augment: Option<AugmentConfig>,
    /// Optional training crop (z, y, x) for memory control.
    pub patch: Option<Dims>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 1,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            loss: LossConfig::default(),
            augment: Some(AugmentConfig::default()),
            patch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size != 1 {
            return Err(Error::InvalidConfig(format!(
                "batch_size is fixed at 1, got {}",
                self.batch_size
            )));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::InvalidConfig("adam betas must lie in [0, 1)".into()));
        }
        self.loss.validate()
    }
}

/// First/second moment estimates, one pair per parameter.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Elem> AdamState<T> {
    pub fn new(params: &[&mut Param<T>]) -> Self {
        Self {
            m: params.iter().map(|p| vec![T::zero(); p.value.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.value.numel()]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// Bias-corrected Adam update, in place; consumes and clears the gradients.
pub fn adam_step<T: Elem>(
    params: &mut [&mut Param<T>],
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    state.t += 1;
    let b1 = T::from_f64(cfg.adam_beta1);
    let b2 = T::from_f64(cfg.adam_beta2);
    let lr = T::from_f64(cfg.learning_rate);
    let eps = T::from_f64(cfg.adam_eps);
    let one = T::one();
    let bc1 = one - b1.powi(state.t as i32);
    let bc2 = one - b2.powi(state.t as i32);

    for (i, p) in params.iter_mut().enumerate() {
        let grad = p
            .grad
            .take()
            .ok_or_else(|| Error::MissingGradient(p.name.clone()))?;
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let data = p.value.data_mut();
        for j in 0..data.len() {
            let g = grad[j];
            m[j] = b1 * m[j] + (one - b1) * g;
            v[j] = b2 * v[j] + (one - b2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            data[j] = data[j] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// One epoch of the loss trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_seconds: f64,
}

/// Result of [`train`].
#[derive(Debug)]
pub struct TrainOutcome {
    pub net: LobeNet<f32>,
    pub history: Vec<EpochStats>,
    /// Sample visit order per epoch (for provenance digests).
    pub sample_orders: Vec<Vec<usize>>,
}

/// Zero-pad a volume so every spatial dim is even.
pub fn pad_to_even(v: &Volume) -> Volume {
    let dims = v.dims;
    let padded: Dims = [dims[0].next_multiple_of(2), dims[1].next_multiple_of(2), dims[2].next_multiple_of(2)];
    if padded == dims {
        return v.clone();
    }
    let mut out = Volume {
        dims: padded,
        spacing: v.spacing,
        origin: v.origin,
        element_type: v.element_type,
        data: vec![0.0; padded[0] * padded[1] * padded[2]],
    };
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            let src = (z * dims[1] + y) * dims[2];
            let dst = (z * padded[1] + y) * padded[2];
            out.data[dst..dst + dims[2]].copy_from_slice(&v.data[src..src + dims[2]]);
        }
    }
    out
}

fn pad_labels_to_even(m: &LabelMask) -> LabelMask {
    let dims = m.dims;
    let padded: Dims = [dims[0].next_multiple_of(2), dims[1].next_multiple_of(2), dims[2].next_multiple_of(2)];
    if padded == dims {
        return m.clone();
    }
    let mut out = LabelMask {
        dims: padded,
        spacing: m.spacing,
        origin: m.origin,
        data: vec![0; padded[0] * padded[1] * padded[2]],
    };
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            let src = (z * dims[1] + y) * dims[2];
            let dst = (z * padded[1] + y) * padded[2];
            out.data[dst..dst + dims[2]].copy_from_slice(&m.data[src..src + dims[2]]);
        }
    }
    out
}

fn volume_tensor(v: &Volume) -> Tensor<f32> {
    Tensor::new(
        vec![1, 1, v.dims[0], v.dims[1], v.dims[2]],
        v.data.clone(),
    )
    .unwrap()
}

fn random_patch(
    v: &Volume,
    m: &LabelMask,
    patch: Dims,
    rng: &mut impl Rng,
) -> Result<(Volume, LabelMask)> {
    let dims = v.dims;
    let size = [
        patch[0].min(dims[0]),
        patch[1].min(dims[1]),
        patch[2].min(dims[2]),
    ];
    let lo = [
        rng.gen_range(0..=dims[0] - size[0]),
        rng.gen_range(0..=dims[1] - size[1]),
        rng.gen_range(0..=dims[2] - size[2]),
    ];
    let region = CropRegion::new(lo, [lo[0] + size[0], lo[1] + size[1], lo[2] + size[2]]);
    Ok((crop_volume(v, &region)?, crop_labels(m, &region)?))
}

/// Train a fresh network on preprocessed (volume, labels) pairs.
pub fn train(
    spec: &LobeNetSpec,
    cfg: &TrainConfig,
    data: &[(Volume, LabelMask)],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut net = LobeNet::<f32>::new(spec.clone())?;
    let mut state = AdamState::new(&net.parameters_mut());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut sample_orders = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut shuffle_rng);

        let mut loss_total = 0.0f64;
        for (slot, &si) in order.iter().enumerate() {
            let (v, m) = &data[si];
            let mut sample_rng = ChaCha8Rng::seed_from_u64(
                cfg.augment.as_ref().map_or(cfg.seed, |a| a.seed),
            );
            sample_rng.set_stream(((epoch as u64) << 32) | slot as u64);

            let (mut av, mut am) = match &cfg.augment {
                Some(aug) => apply_random(v, m, aug, &mut sample_rng),
                None => (v.clone(), m.clone()),
            };
            if let Some(patch) = cfg.patch {
                let (pv, pm) = random_patch(&av, &am, patch, &mut sample_rng)?;
                av = pv;
                am = pm;
            }
            let av = pad_to_even(&av);
            let am = pad_labels_to_even(&am);

            let mut graph = Graph::<f32>::new();
            let pass = net.forward_train(&mut graph, volume_tensor(&av))?;
            let target = graph.leaf(one_hot::<f32>(&am, spec.num_classes), false);
            let loss = hybrid_loss(&mut graph, pass.output, target, &cfg.loss)?;
            let loss_value = graph.value(loss).item() as f64;
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, sample: si });
            }
            loss_total += loss_value;
            graph.backward(loss)?;

            let mut params = net.parameters_mut();
            for (p, var) in params.iter_mut().zip(&pass.param_vars) {
                if let Some(g) = graph.grad(*var) {
                    p.accumulate_grad(g);
                }
            }
            adam_step(&mut params, &mut state, cfg)?;
        }

        history.push(EpochStats {
            epoch,
            mean_loss: loss_total / data.len() as f64,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        sample_orders.push(order);
    }

    Ok(TrainOutcome {
        net,
        history,
        sample_orders,
    })
}

/// Per-voxel argmax over the class channels of `[1, C, Z, Y, X]`
/// probabilities; ties take the lowest class id.
pub fn argmax_labels(probs: &Tensor<f32>, dims: Dims) -> LabelMask {
    let [_, c, dz, dy, dx] = probs.dims5().expect("5-d probability tensor");
    let plane = dz * dy * dx;
    let data = probs.data();
    let mut out = vec![0u8; plane];
    for (v, slot) in out.iter_mut().enumerate() {
        let mut best = 0usize;
        let mut best_p = data[v];
        for ch in 1..c {
            let p = data[ch * plane + v];
            if p > best_p {
                best_p = p;
                best = ch;
            }
        }
        *slot = best as u8;
    }
    let mask = LabelMask {
        dims: [dz, dy, dx],
        spacing: [1.0; 3],
        origin: [0.0; 3],
        data: out,
    };
    // strip any even-padding back to the caller's dims
    crop_labels(&mask, &CropRegion::new([0; 3], dims)).expect("padding crop")
}

/// Whole-volume inference: pad to even dims, eval-mode forward, per-voxel
/// argmax, strip the padding.
pub fn infer(net: &mut LobeNet<f32>, v: &Volume) -> Result<LabelMask> {
    let padded = pad_to_even(v);
    let mut graph = Graph::<f32>::new();
    let probs = net.forward_eval(&mut graph, volume_tensor(&padded))?;
    let mut mask = argmax_labels(graph.value(probs), v.dims);
    mask.spacing = v.spacing;
    mask.origin = v.origin;
    Ok(mask)
}

/// Write the per-epoch loss trace as CSV (epoch, mean_loss, wall_seconds).
pub fn write_history_csv(path: impl AsRef<Path>, history: &[EpochStats]) -> Result<()> {
    let mut out = String::from("epoch,mean_loss,wall_seconds\n");
    for h in history {
        out.push_str(&format!("{},{},{}\n", h.epoch, h.mean_loss, h.wall_seconds));
    }
    std::fs::write(path, out)?;
    Ok(())
}
