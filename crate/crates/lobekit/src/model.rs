//! One-downsampling residual V-Net variant.
//!
//! Residual blocks are two 3x3x3 convolutions, each followed by ReLU then
//! batchnorm, with an identity skip. The encoder keeps full resolution for
//! one block, downsamples once (learned stride-2 2x2x2 conv), and the
//! decoder mirrors it with a learned transposed conv; the full-resolution
//! skip is fused by channel concatenation plus a 1x1x1 conv. A final 1x1x1
//! conv maps to 6 class channels, then a channel softmax.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Elem, Graph, RunningStats, Tensor, Var};
use crate::error::{Error, Result};
use crate::volume::NUM_CLASSES;

/// Network hyperparameters; `seed` fully determines the initial weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LobeNetSpec {
    pub base_width: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for LobeNetSpec {
    fn default() -> Self {
        Self {
            base_width: 16,
            num_classes: NUM_CLASSES,
            seed: 0,
        }
    }
}

/// A named trainable tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Vec<T>>,
}

impl<T: Elem> Param<T> {
    fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            value,
            grad: None,
        }
    }

    /// Add a gradient contribution (sums with any existing one).
    pub fn accumulate_grad(&mut self, g: &[T]) {
        match &mut self.grad {
            Some(acc) => {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += *v;
                }
            }
            None => self.grad = Some(g.to_vec()),
        }
    }
}

#[derive(Debug, Clone)]
struct ConvLayer<T> {
    w: Param<T>,
    b: Param<T>,
    stride: usize,
    pad: usize,
}

impl<T: Elem> ConvLayer<T> {
    fn new(name: &str, co: usize, ci: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            w: Param::new(format!("{name}.w"), Tensor::zeros(&[co, ci, k, k, k])),
            b: Param::new(format!("{name}.b"), Tensor::zeros(&[co])),
            stride,
            pad,
        }
    }

    fn apply(&self, g: &mut Graph<T>, x: Var, vars: &mut Vec<Var>, train: bool) -> Result<Var> {
        let w = g.leaf(self.w.value.clone(), train);
        let b = g.leaf(self.b.value.clone(), train);
        vars.push(w);
        vars.push(b);
        g.conv3d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
struct ConvTLayer<T> {
    w: Param<T>,
    b: Param<T>,
    stride: usize,
}

impl<T: Elem> ConvTLayer<T> {
    fn new(name: &str, ci: usize, co: usize, k: usize, stride: usize) -> Self {
        Self {
            w: Param::new(format!("{name}.w"), Tensor::zeros(&[ci, co, k, k, k])),
            b: Param::new(format!("{name}.b"), Tensor::zeros(&[co])),
            stride,
        }
    }

    fn apply(&self, g: &mut Graph<T>, x: Var, vars: &mut Vec<Var>, train: bool) -> Result<Var> {
        let w = g.leaf(self.w.value.clone(), train);
        let b = g.leaf(self.b.value.clone(), train);
        vars.push(w);
        vars.push(b);
        g.conv_transpose3d(x, w, b, self.stride)
    }
}

#[derive(Debug, Clone)]
struct BatchNormLayer<T> {
    gamma: Param<T>,
    beta: Param<T>,
    stats: RunningStats<T>,
    name: String,
}

impl<T: Elem> BatchNormLayer<T> {
    fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Tensor::zeros(&[channels])),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            stats: RunningStats::new(channels),
            name: name.to_string(),
        }
    }

    fn apply(
        &mut self,
        g: &mut Graph<T>,
        x: Var,
        vars: &mut Vec<Var>,
        train: bool,
    ) -> Result<Var> {
        let gamma = g.leaf(self.gamma.value.clone(), train);
        let beta = g.leaf(self.beta.value.clone(), train);
        vars.push(gamma);
        vars.push(beta);
        if train {
            g.batchnorm3d(x, gamma, beta, &mut self.stats, true)
        } else {
            let mut frozen = self.stats.clone();
            g.batchnorm3d(x, gamma, beta, &mut frozen, false)
        }
    }
}

#[derive(Debug, Clone)]
struct ResidualBlock<T> {
    conv1: ConvLayer<T>,
    bn1: BatchNormLayer<T>,
    conv2: ConvLayer<T>,
    bn2: BatchNormLayer<T>,
}

impl<T: Elem> ResidualBlock<T> {
    fn new(name: &str, channels: usize) -> Self {
        Self {
            conv1: ConvLayer::new(&format!("{name}.conv1"), channels, channels, 3, 1, 1),
            bn1: BatchNormLayer::new(&format!("{name}.bn1"), channels),
            conv2: ConvLayer::new(&format!("{name}.conv2"), channels, channels, 3, 1, 1),
            bn2: BatchNormLayer::new(&format!("{name}.bn2"), channels),
        }
    }

    fn apply(&mut self, g: &mut Graph<T>, x: Var, vars: &mut Vec<Var>, train: bool) -> Result<Var> {
        let mut h = self.conv1.apply(g, x, vars, train)?;
        h = g.relu(h)?;
        h = self.bn1.apply(g, h, vars, train)?;
        h = self.conv2.apply(g, h, vars, train)?;
        h = g.relu(h)?;
        h = self.bn2.apply(g, h, vars, train)?;
        g.add(x, h)
    }
}

/// Output of one network pass: the probability tensor plus the leaf vars of
/// every parameter, aligned with [`LobeNet::parameters_mut`] order.
pub struct ForwardPass {
    pub output: Var,
    pub param_vars: Vec<Var>,
}

/// The segmentation network.
#[derive(Debug, Clone)]
pub struct LobeNet<T> {
    pub spec: LobeNetSpec,
    stem: ConvLayer<T>,
    enc: ResidualBlock<T>,
    down: ConvLayer<T>,
    bottom: ResidualBlock<T>,
    up: ConvTLayer<T>,
    fuse: ConvLayer<T>,
    dec: ResidualBlock<T>,
    head: ConvLayer<T>,
}

impl<T: Elem> LobeNet<T> {
    /// Build the network and initialize parameters from `spec.seed`.
    pub fn new(spec: LobeNetSpec) -> Result<Self> {
        if spec.base_width == 0 {
            return Err(Error::InvalidConfig("base_width must be positive".into()));
        }
        if spec.num_classes < 2 {
            return Err(Error::InvalidConfig("num_classes must be at least 2".into()));
        }
        let c = spec.base_width;
        let mut net = Self {
            stem: ConvLayer::new("stem", c, 1, 3, 1, 1),
            enc: ResidualBlock::new("enc", c),
            down: ConvLayer::new("down", 2 * c, c, 2, 2, 0),
            bottom: ResidualBlock::new("bottom", 2 * c),
            up: ConvTLayer::new("up", 2 * c, c, 2, 2),
            fuse: ConvLayer::new("fuse", c, 2 * c, 1, 1, 0),
            dec: ResidualBlock::new("dec", c),
            head: ConvLayer::new("head", spec.num_classes, c, 1, 1, 0),
            spec,
        };
        let seed = net.spec.seed;
        net.init_parameters(seed);
        Ok(net)
    }

    /// He-style uniform init: kernels ~ U(-sqrt(6/fan_in), sqrt(6/fan_in)),
    /// biases and beta 0, gamma 1, running stats reset. Fully determined by
    /// the seed.
    pub fn init_parameters(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in self.parameters_mut() {
            p.grad = None;
            let shape = p.value.shape().to_vec();
            if p.name.ends_with(".gamma") {
                p.value = Tensor::full(&shape, T::one());
            } else if p.name.ends_with(".beta") || p.name.ends_with(".b") {
                p.value = Tensor::zeros(&shape);
            } else {
                // conv kernel: [co, ci, k, k, k] or transposed [ci, co, k, k, k];
                // fan_in is input channels times kernel volume either way
                let fan_in: usize = if p.name.starts_with("up.") {
                    shape[0] * shape[2] * shape[3] * shape[4]
                } else {
                    shape[1] * shape[2] * shape[3] * shape[4]
                };
                let bound = (6.0 / fan_in as f64).sqrt();
                let data = (0..shape.iter().product::<usize>())
                    .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
                    .collect();
                p.value = Tensor::new(shape, data).unwrap();
            }
        }
        for bn in [
            &mut self.enc.bn1,
            &mut self.enc.bn2,
            &mut self.bottom.bn1,
            &mut self.bottom.bn2,
            &mut self.dec.bn1,
            &mut self.dec.bn2,
        ] {
            bn.stats = RunningStats::new(bn.gamma.value.numel());
        }
    }

    /// All trainable parameters in a fixed order.
    pub fn parameters_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out: Vec<&mut Param<T>> = Vec::with_capacity(28);
        out.push(&mut self.stem.w);
        out.push(&mut self.stem.b);
        for block in [&mut self.enc, &mut self.bottom] {
            out.push(&mut block.conv1.w);
            out.push(&mut block.conv1.b);
            out.push(&mut block.bn1.gamma);
            out.push(&mut block.bn1.beta);
            out.push(&mut block.conv2.w);
            out.push(&mut block.conv2.b);
            out.push(&mut block.bn2.gamma);
            out.push(&mut block.bn2.beta);
        }
        out.push(&mut self.down.w);
        out.push(&mut self.down.b);
        out.push(&mut self.up.w);
        out.push(&mut self.up.b);
        out.push(&mut self.fuse.w);
        out.push(&mut self.fuse.b);
        out.push(&mut self.dec.conv1.w);
        out.push(&mut self.dec.conv1.b);
        out.push(&mut self.dec.bn1.gamma);
        out.push(&mut self.dec.bn1.beta);
        out.push(&mut self.dec.conv2.w);
        out.push(&mut self.dec.conv2.b);
        out.push(&mut self.dec.bn2.gamma);
        out.push(&mut self.dec.bn2.beta);
        out.push(&mut self.head.w);
        out.push(&mut self.head.b);
        out
    }

    /// Parameter snapshot in [`Self::parameters_mut`] order.
    pub fn parameters(&self) -> Vec<(&str, &Tensor<T>)> {
        let mut out: Vec<(&str, &Tensor<T>)> = Vec::with_capacity(28);
        out.push((&self.stem.w.name, &self.stem.w.value));
        out.push((&self.stem.b.name, &self.stem.b.value));
        for block in [&self.enc, &self.bottom] {
            out.push((&block.conv1.w.name, &block.conv1.w.value));
            out.push((&block.conv1.b.name, &block.conv1.b.value));
            out.push((&block.bn1.gamma.name, &block.bn1.gamma.value));
            out.push((&block.bn1.beta.name, &block.bn1.beta.value));
            out.push((&block.conv2.w.name, &block.conv2.w.value));
            out.push((&block.conv2.b.name, &block.conv2.b.value));
            out.push((&block.bn2.gamma.name, &block.bn2.gamma.value));
            out.push((&block.bn2.beta.name, &block.bn2.beta.value));
        }
        out.push((&self.down.w.name, &self.down.w.value));
        out.push((&self.down.b.name, &self.down.b.value));
        out.push((&self.up.w.name, &self.up.w.value));
        out.push((&self.up.b.name, &self.up.b.value));
        out.push((&self.fuse.w.name, &self.fuse.w.value));
        out.push((&self.fuse.b.name, &self.fuse.b.value));
        out.push((&self.dec.conv1.w.name, &self.dec.conv1.w.value));
        out.push((&self.dec.conv1.b.name, &self.dec.conv1.b.value));
        out.push((&self.dec.bn1.gamma.name, &self.dec.bn1.gamma.value));
        out.push((&self.dec.bn1.beta.name, &self.dec.bn1.beta.value));
        out.push((&self.dec.conv2.w.name, &self.dec.conv2.w.value));
        out.push((&self.dec.conv2.b.name, &self.dec.conv2.b.value));
        out.push((&self.dec.bn2.gamma.name, &self.dec.bn2.gamma.value));
        out.push((&self.dec.bn2.beta.name, &self.dec.bn2.beta.value));
        out.push((&self.head.w.name, &self.head.w.value));
        out.push((&self.head.b.name, &self.head.b.value));
        out
    }

    /// Batchnorm running statistics, for checkpointing.
    pub fn named_buffers(&self) -> Vec<(String, Vec<T>)> {
        let mut out = Vec::new();
        for bn in [
            &self.enc.bn1,
            &self.enc.bn2,
            &self.bottom.bn1,
            &self.bottom.bn2,
            &self.dec.bn1,
            &self.dec.bn2,
        ] {
            out.push((format!("{}.running_mean", bn.name), bn.stats.mean.clone()));
            out.push((format!("{}.running_var", bn.name), bn.stats.var.clone()));
        }
        out
    }

    fn set_buffer(&mut self, name: &str, data: Vec<T>) -> Result<()> {
        for bn in [
            &mut self.enc.bn1,
            &mut self.enc.bn2,
            &mut self.bottom.bn1,
            &mut self.bottom.bn2,
            &mut self.dec.bn1,
            &mut self.dec.bn2,
        ] {
            let (mean_key, var_key) = (
                format!("{}.running_mean", bn.name),
                format!("{}.running_var", bn.name),
            );
            if name == mean_key || name == var_key {
                if data.len() != bn.stats.mean.len() {
                    return Err(Error::CorruptCheckpoint(format!(
                        "buffer {name} has length {}, expected {}",
                        data.len(),
                        bn.stats.mean.len()
                    )));
                }
                if name == mean_key {
                    bn.stats.mean = data;
                } else {
                    bn.stats.var = data;
                }
                return Ok(());
            }
        }
        Err(Error::CorruptCheckpoint(format!("unknown buffer {name}")))
    }

    fn check_even(x: &Tensor<T>) -> Result<()> {
        let [_, _, dz, dy, dx] = x.dims5()?;
        if dz % 2 != 0 || dy % 2 != 0 || dx % 2 != 0 {
            return Err(Error::OddSpatialDim([dz, dy, dx]));
        }
        Ok(())
    }

    fn forward_impl(&mut self, g: &mut Graph<T>, x: Tensor<T>, train: bool) -> Result<ForwardPass> {
        Self::check_even(&x)?;
        let [_, ci, ..] = x.dims5()?;
        if ci != 1 {
            return Err(Error::ShapeMismatch(format!(
                "expected a single input channel, got {ci}"
            )));
        }
        let mut vars = Vec::with_capacity(28);
        let x = g.leaf(x, false);
        let stem = self.stem.apply(g, x, &mut vars, train)?;
        let enc = self.enc.apply(g, stem, &mut vars, train)?;
        let down = self.down.apply(g, enc, &mut vars, train)?;
        let bottom = self.bottom.apply(g, down, &mut vars, train)?;
        let up = self.up.apply(g, bottom, &mut vars, train)?;
        let cat = g.concat_channels(up, enc)?;
        let fused = self.fuse.apply(g, cat, &mut vars, train)?;
        let dec = self.dec.apply(g, fused, &mut vars, train)?;
        let logits = self.head.apply(g, dec, &mut vars, train)?;
        let probs = g.softmax_channels(logits)?;
        // vars order mirrors parameters_mut(): stem, enc, bottom come before
        // down/up in that listing, so reorder the down/up entries
        Ok(ForwardPass {
            output: probs,
            param_vars: reorder_vars(vars),
        })
    }

    /// Training-mode pass: records gradients for every parameter and
    /// updates batchnorm running statistics.
    pub fn forward_train(&mut self, g: &mut Graph<T>, x: Tensor<T>) -> Result<ForwardPass> {
        self.forward_impl(g, x, true)
    }

    /// Eval-mode pass: batchnorm uses running statistics, nothing requires
    /// gradients.
    pub fn forward_eval(&mut self, g: &mut Graph<T>, x: Tensor<T>) -> Result<Var> {
        Ok(self.forward_impl(g, x, false)?.output)
    }
}

/// Forward registration order is stem, enc, down, bottom, up, fuse, dec,
/// head; `parameters_mut` lists stem, enc, bottom, down, up, fuse, dec,
/// head. Map the former onto the latter.
fn reorder_vars(vars: Vec<Var>) -> Vec<Var> {
    // counts per section: stem 2, enc 8, down 2, bottom 8, up 2, fuse 2,
    // dec 8, head 2
    let mut out = Vec::with_capacity(vars.len());
    out.extend_from_slice(&vars[0..2]); // stem
    out.extend_from_slice(&vars[2..10]); // enc
    out.extend_from_slice(&vars[12..20]); // bottom
    out.extend_from_slice(&vars[10..12]); // down
    out.extend_from_slice(&vars[20..22]); // up
    out.extend_from_slice(&vars[22..24]); // fuse
    out.extend_from_slice(&vars[24..32]); // dec
    out.extend_from_slice(&vars[32..34]); // head
    out
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"LBKC";
const CHECKPOINT_VERSION: u32 = 1;

impl LobeNet<f32> {
    /// Serialize parameters and batchnorm buffers.
    ///
    /// Layout (all little-endian): magic `LBKC`, u32 version, u32
    /// base_width, u32 num_classes, u64 seed, u32 record count, then per
    /// record: u32 name length, UTF-8 name, u32 ndim, u32 dims, f32 data.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        let mut u32buf = [0u8; 4];
        let mut push_u32 = |buf: &mut Vec<u8>, v: u32| {
            LittleEndian::write_u32(&mut u32buf, v);
            buf.extend_from_slice(&u32buf);
        };
        push_u32(&mut buf, CHECKPOINT_VERSION);
        push_u32(&mut buf, self.spec.base_width as u32);
        push_u32(&mut buf, self.spec.num_classes as u32);
        let mut u64buf = [0u8; 8];
        LittleEndian::write_u64(&mut u64buf, self.spec.seed);
        buf.extend_from_slice(&u64buf);

        let params = self.parameters();
        let buffers = self.named_buffers();
        push_u32(&mut buf, (params.len() + buffers.len()) as u32);

        let mut write_record = |buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]| {
            push_u32(buf, name.len() as u32);
            buf.extend_from_slice(name.as_bytes());
            push_u32(buf, shape.len() as u32);
            for d in shape {
                push_u32(buf, *d as u32);
            }
            let mut bytes = vec![0u8; data.len() * 4];
            LittleEndian::write_f32_into(data, &mut bytes);
            buf.extend_from_slice(&bytes);
        };
        for (name, t) in &params {
            write_record(&mut buf, name, t.shape(), t.data());
        }
        for (name, data) in &buffers {
            write_record(&mut buf, name, &[data.len()], data);
        }
        f.write_all(&buf)?;
        Ok(())
    }

    /// Load a checkpoint written by [`Self::save`].
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::CorruptCheckpoint("unexpected end of file".into()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != CHECKPOINT_MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic".into()));
        }
        let read_u32 =
            |pos: &mut usize| -> Result<u32> { Ok(LittleEndian::read_u32(take(pos, 4)?)) };
        let version = read_u32(&mut pos)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CorruptCheckpoint(format!(
                "unsupported version {version}"
            )));
        }
        let base_width = read_u32(&mut pos)? as usize;
        let num_classes = read_u32(&mut pos)? as usize;
        let seed = LittleEndian::read_u64(take(&mut pos, 8)?);
        let count = read_u32(&mut pos)? as usize;

        let mut records: HashMap<String, (Vec<usize>, Vec<f32>)> = HashMap::new();
        for _ in 0..count {
            let name_len = read_u32(&mut pos)? as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| Error::CorruptCheckpoint("record name is not UTF-8".into()))?;
            let ndim = read_u32(&mut pos)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u32(&mut pos)? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = take(&mut pos, numel * 4)?;
            let mut data = vec![0f32; numel];
            LittleEndian::read_f32_into(raw, &mut data);
            records.insert(name, (shape, data));
        }

        let mut net = LobeNet::<f32>::new(LobeNetSpec {
            base_width,
            num_classes,
            seed,
        })?;
        for p in net.parameters_mut() {
            let (shape, data) = records
                .remove(&p.name)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("missing record {}", p.name)))?;
            if shape != p.value.shape() {
                return Err(Error::CorruptCheckpoint(format!(
                    "record {} has shape {:?}, expected {:?}",
                    p.name,
                    shape,
                    p.value.shape()
                )));
            }
            p.value = Tensor::new(shape, data)?;
        }
        let buffer_names: Vec<String> = records.keys().cloned().collect();
        for name in buffer_names {
            let (_, data) = records.remove(&name).unwrap();
            net.set_buffer(&name, data)?;
        }
        Ok(net)
    }
}
