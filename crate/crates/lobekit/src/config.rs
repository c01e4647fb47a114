//! Run configuration (the JSON document the CLI consumes) and the ablation
//! harness comparing dice-only, hybrid-loss, and hybrid-plus-hull-crop
//! training arms on one seeded split.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{dice_average, render_rows};
use crate::model::LobeNetSpec;
use crate::preprocess::{lung_crop_pipeline, PreprocessConfig};
use crate::trainer::{infer, train, EpochStats, TrainConfig};
use crate::volume::{crop_labels, hu_normalize, CropRegion, LabelMask, Volume};

/// The three training arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationMode {
    /// Dice loss only, no hull cropping.
    #[serde(rename = "DL")]
    Dl,
    /// Hybrid dice + focal loss, no hull cropping.
    #[serde(rename = "DL+FL")]
    DlFl,
    /// Hybrid loss on hull-cropped volumes.
    #[serde(rename = "DL+FL+CH")]
    DlFlCh,
}

impl AblationMode {
    pub const ALL: [AblationMode; 3] = [AblationMode::Dl, AblationMode::DlFl, AblationMode::DlFlCh];

    pub fn label(self) -> &'static str {
        match self {
            AblationMode::Dl => "DL",
            AblationMode::DlFl => "DL+FL",
            AblationMode::DlFlCh => "DL+FL+CH",
        }
    }

    pub fn lambda(self) -> f64 {
        match self {
            AblationMode::Dl => 0.0,
            _ => 1.0,
        }
    }

    pub fn hull_crop(self) -> bool {
        matches!(self, AblationMode::DlFlCh)
    }
}

/// Everything one run needs; serialized as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub preprocess: PreprocessConfig,
    pub network: LobeNetSpec,
    pub train: TrainConfig,
    pub mode: Option<AblationMode>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        self.train.validate()
    }

    /// Apply the ablation mode's lambda and cropping policy.
    pub fn resolved_for(&self, mode: AblationMode) -> RunConfig {
        let mut out = self.clone();
        out.train.loss.lambda = mode.lambda();
        out.mode = Some(mode);
        out
    }

    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::InvalidConfig(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Mode-appropriate preprocessing of one raw HU pair; the crop region is
/// `None` when hull cropping is off.
pub fn preprocess_pair(
    v: &Volume,
    m: &LabelMask,
    pre: &PreprocessConfig,
    hull_crop: bool,
) -> Result<(Volume, LabelMask, Option<CropRegion>)> {
    if hull_crop {
        let crop = lung_crop_pipeline(v, pre)?;
        let labels = crop_labels(m, &crop.region)?;
        Ok((crop.volume, labels, Some(crop.region)))
    } else {
        Ok((hu_normalize(v), m.clone(), None))
    }
}

/// Paste a cropped prediction back into a full-size background frame.
pub fn embed_labels(pred: &LabelMask, region: &CropRegion, full_dims: [usize; 3]) -> LabelMask {
    let mut out = LabelMask::background(full_dims);
    for z in 0..pred.dims[0] {
        for y in 0..pred.dims[1] {
            let src = (z * pred.dims[1] + y) * pred.dims[2];
            let dst = ((z + region.lo[0]) * full_dims[1] + y + region.lo[1]) * full_dims[2]
                + region.lo[2];
            out.data[dst..dst + pred.dims[2]].copy_from_slice(&pred.data[src..src + pred.dims[2]]);
        }
    }
    out
}

/// One arm's outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub mode: AblationMode,
    pub lambda: f64,
    pub hull_crop: bool,
    /// Mean per-lobe dice over the test split, RU..LL order.
    pub per_class: [f64; 5],
    pub average: f64,
    pub final_mean_loss: f64,
    /// Hex digests of the raw training samples, dataset order.
    pub sample_hashes: Vec<String>,
    /// Digest over the concatenated per-epoch visit orders.
    pub order_digest: String,
}

/// Comparison of the three arms on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub train_count: usize,
    pub test_count: usize,
    pub arms: Vec<ArmReport>,
}

impl AblationReport {
    pub fn arm(&self, mode: AblationMode) -> &ArmReport {
        self.arms.iter().find(|a| a.mode == mode).expect("arm present")
    }

    /// Table-shaped text rendering, one row per arm.
    pub fn render_table(&self) -> String {
        let rows: Vec<(String, [f64; 5], f64)> = self
            .arms
            .iter()
            .map(|a| (a.mode.label().to_string(), a.per_class, a.average))
            .collect();
        render_rows(&rows)
    }
}

fn sample_hash(v: &Volume, m: &LabelMask) -> String {
    let mut h = Sha256::new();
    for value in &v.data {
        h.update(value.to_le_bytes());
    }
    h.update(&m.data);
    let digest = h.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn order_digest(orders: &[Vec<usize>]) -> String {
    let mut h = Sha256::new();
    for epoch in orders {
        for i in epoch {
            h.update((*i as u32).to_le_bytes());
        }
    }
    let digest = h.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Seeded 80/20 split of `0..n` (at least one test sample).
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x53504c49); // split stream, distinct from epoch streams
    order.shuffle(&mut rng);
    let n_test = (n / 5).max(1);
    let test = order.split_off(n - n_test);
    (order, test)
}

/// Train and evaluate the three arms on identical data, seeds, and sample
/// orderings.
pub fn ablate(data: &[(Volume, LabelMask)], base: &RunConfig) -> Result<AblationReport> {
    base.validate()?;
    if data.len() < 2 {
        return Err(Error::EmptyDataset);
    }
    let (train_idx, test_idx) = split_indices(data.len(), base.train.seed);

    let hashes: Vec<String> = train_idx
        .iter()
        .map(|i| sample_hash(&data[*i].0, &data[*i].1))
        .collect();

    let mut arms = Vec::with_capacity(3);
    for mode in AblationMode::ALL {
        let cfg = base.resolved_for(mode);
        let mut train_set = Vec::with_capacity(train_idx.len());
        for &i in &train_idx {
            let (v, m, _) = preprocess_pair(&data[i].0, &data[i].1, &cfg.preprocess, mode.hull_crop())?;
            train_set.push((v, m));
        }
        let outcome = train(&cfg.network, &cfg.train, &train_set)?;
        let mut net = outcome.net;

        let mut class_sums = [0.0f64; 5];
        for &i in &test_idx {
            let (v, _, region) =
                preprocess_pair(&data[i].0, &data[i].1, &cfg.preprocess, mode.hull_crop())?;
            let pred = infer(&mut net, &v)?;
            let full_pred = match region {
                Some(r) => embed_labels(&pred, &r, data[i].1.dims),
                None => pred,
            };
            let report = dice_average(&full_pred, &data[i].1)?;
            for (s, d) in class_sums.iter_mut().zip(report.dice_values()) {
                *s += d;
            }
        }
        let per_class = class_sums.map(|s| s / test_idx.len() as f64);
        let average = per_class.iter().sum::<f64>() / 5.0;

        arms.push(ArmReport {
            mode,
            lambda: cfg.train.loss.lambda,
            hull_crop: mode.hull_crop(),
            per_class,
            average,
            final_mean_loss: outcome.history.last().map_or(f64::NAN, |h| h.mean_loss),
            sample_hashes: hashes.clone(),
            order_digest: order_digest(&outcome.sample_orders),
        });
    }

    Ok(AblationReport {
        train_count: train_idx.len(),
        test_count: test_idx.len(),
        arms,
    })
}

/// Helper shared by [`train`]-style callers: record one arm's epoch trace.
pub type History = Vec<EpochStats>;
