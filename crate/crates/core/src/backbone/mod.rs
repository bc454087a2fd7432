//! CA-I3D encoder: a reduced inflated-3D ConvNet whose two Inception modules
//! are gated by 3D coordinate attention.
//!
//! ```text
//! standardize → conv 3×3×3 /(1,2,2) → ReLU → maxpool 1×3×3 /(1,2,2)
//!   → CA-Inception-A → maxpool 1×3×3 /(1,2,2) → CA-Inception-B
//!   → [flatten → linear]   (embedding mode only)
//! ```
//!
//! Activations are `(N, C, T, H, W)`. Parameters are stored as `f32` and
//! bound into a [`Graph`] of any scalar type for a forward pass.

pub mod checkpoint;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::Window3;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint};

/// Minimum width of the attention bottleneck.
pub const CA_MIN_WIDTH: usize = 8;

/// Branch widths: `b0`; `b1_reduce → b1`; `b2_reduce → b2`; `pool → pool_proj`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InceptionSpec {
    pub b0: usize,
    pub b1_reduce: usize,
    pub b1: usize,
    pub b2_reduce: usize,
    pub b2: usize,
    pub pool_proj: usize,
}

impl InceptionSpec {
    pub const fn new(b0: usize, b1: (usize, usize), b2: (usize, usize), pool_proj: usize) -> Self {
        Self {
            b0,
            b1_reduce: b1.0,
            b1: b1.1,
            b2_reduce: b2.0,
            b2: b2.1,
            pool_proj,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.b0 + self.b1 + self.b2 + self.pool_proj
    }

    /// GoogLeNet 3a.
    pub const GOOGLENET_3A: Self = Self::new(64, (96, 128), (16, 32), 32);
    /// GoogLeNet 3b.
    pub const GOOGLENET_3B: Self = Self::new(128, (128, 192), (32, 96), 64);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    Embedding,
    FeatureMap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// He-normal: `N(0, 2/fan_in)`.
    FanInScaled,
    /// `N(0, 1)`; diverges easily on deep 3D stacks.
    UnitNormal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub inception: [InceptionSpec; 2],
    pub ca_reduction: usize,
    pub embedding_dim: usize,
    /// `(H, W)`
    pub input_hw: (usize, usize),
    pub input_t: usize,
    pub output_mode: OutputMode,
    pub init_scheme: InitScheme,
    pub seed: u64,
}

impl BackboneConfig {
    /// Full-size configuration for 128×128 inputs.
    pub fn full() -> Self {
        Self {
            in_channels: 5,
            stem_channels: 64,
            inception: [InceptionSpec::GOOGLENET_3A, InceptionSpec::GOOGLENET_3B],
            ca_reduction: 16,
            embedding_dim: 256,
            input_hw: (128, 128),
            input_t: 10,
            output_mode: OutputMode::Embedding,
            init_scheme: InitScheme::FanInScaled,
            seed: 0,
        }
    }

    /// Narrow configuration for 32×32 inputs that trains on one CPU core.
    pub fn desk() -> Self {
        Self {
            in_channels: 5,
            stem_channels: 8,
            inception: [
                InceptionSpec::new(8, (8, 12), (4, 4), 4),
                InceptionSpec::new(12, (12, 16), (4, 8), 8),
            ],
            ca_reduction: 4,
            embedding_dim: 256,
            input_hw: (32, 32),
            input_t: 10,
            output_mode: OutputMode::Embedding,
            init_scheme: InitScheme::FanInScaled,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.embedding_dim < 8 {
            return bad(format!("embedding_dim {} < 8", self.embedding_dim));
        }
        if self.ca_reduction < 1 {
            return bad("ca_reduction must be at least 1".into());
        }
        let (h, w) = self.input_hw;
        if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return bad(format!("input {}x{} must be divisible by 8", h, w));
        }
        if self.input_t == 0 || self.in_channels == 0 || self.stem_channels == 0 {
            return bad("channel and time extents must be positive".into());
        }
        for s in &self.inception {
            if [s.b0, s.b1_reduce, s.b1, s.b2_reduce, s.b2, s.pool_proj].contains(&0) {
                return bad(format!("inception branch of width 0 in {:?}", s));
            }
        }
        Ok(())
    }

    /// `(C, T, H/8, W/8)` of the Inception-B output.
    pub fn feature_map_dims(&self) -> [usize; 4] {
        [
            self.inception[1].out_channels(),
            self.input_t,
            self.input_hw.0 / 8,
            self.input_hw.1 / 8,
        ]
    }

    /// `(C, T, H, W)` of one input sample.
    pub fn input_shape(&self) -> [usize; 4] {
        [self.in_channels, self.input_t, self.input_hw.0, self.input_hw.1]
    }

    pub fn flat_features(&self) -> usize {
        self.feature_map_dims().iter().product()
    }

    pub fn ca_width(&self, channels: usize) -> usize {
        CA_MIN_WIDTH.max(channels / self.ca_reduction)
    }

    pub fn with_mode(&self, mode: OutputMode) -> Self {
        Self {
            output_mode: mode,
            ..self.clone()
        }
    }
}

const STAGES: [&str; 2] = ["inc_a", "inc_b"];

/// Names of the frozen input standardization statistics.
pub const INPUT_MEAN: &str = "input.mean";
pub const INPUT_STD: &str = "input.std";

fn conv_shape(o: usize, c: usize, k: usize) -> Vec<usize> {
    vec![o, c, k, k, k]
}

/// Ordered `(name, shape)` list of every parameter a config defines.
pub fn parameter_shapes(cfg: &BackboneConfig) -> Vec<(String, Vec<usize>)> {
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    let conv = |out: &mut Vec<(String, Vec<usize>)>, name: String, o: usize, c: usize, k: usize| {
        out.push((format!("{}.weight", name), conv_shape(o, c, k)));
        out.push((format!("{}.bias", name), vec![o]));
    };
    out.push((INPUT_MEAN.into(), vec![cfg.in_channels]));
    out.push((INPUT_STD.into(), vec![cfg.in_channels]));
    conv(&mut out, "stem".into(), cfg.stem_channels, cfg.in_channels, 3);
    let mut c = cfg.stem_channels;
    for (stage, s) in STAGES.iter().zip(&cfg.inception) {
        conv(&mut out, format!("{}.b0", stage), s.b0, c, 1);
        conv(&mut out, format!("{}.b1_reduce", stage), s.b1_reduce, c, 1);
        conv(&mut out, format!("{}.b1", stage), s.b1, s.b1_reduce, 3);
        conv(&mut out, format!("{}.b2_reduce", stage), s.b2_reduce, c, 1);
        conv(&mut out, format!("{}.b2", stage), s.b2, s.b2_reduce, 3);
        conv(&mut out, format!("{}.b3", stage), s.pool_proj, c, 1);
        let co = s.out_channels();
        let mid = cfg.ca_width(co);
        conv(&mut out, format!("{}.ca.reduce", stage), mid, co, 1);
        conv(&mut out, format!("{}.ca.expand", stage), co, mid, 1);
        c = co;
    }
    if cfg.output_mode == OutputMode::Embedding {
        out.push(("head.weight".into(), vec![cfg.embedding_dim, cfg.flat_features()]));
        out.push(("head.bias".into(), vec![cfg.embedding_dim]));
    }
    out
}

fn fan_in(shape: &[usize]) -> usize {
    shape[1..].iter().product::<usize>().max(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Scratch,
    GfePretrained,
    AfePretrained,
}

/// Named parameter arrays of one encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParameters {
    #[serde(skip)]
    pub params: BTreeMap<String, Tensor<f32>>,
    pub config: BackboneConfig,
    pub provenance: Provenance,
    #[serde(default)]
    pub training_meta: serde_json::Value,
}

/// Freshly initialized encoder for `cfg`, deterministic in `cfg.seed`.
pub fn build_backbone(cfg: &BackboneConfig) -> Result<EncoderParameters> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = BTreeMap::new();
    for (name, shape) in parameter_shapes(cfg) {
        let t = if name == INPUT_STD {
            Tensor::full(&shape, 1.0)
        } else if name.ends_with(".bias") || name == INPUT_MEAN {
            Tensor::zeros(&shape)
        } else {
            let std = match cfg.init_scheme {
                InitScheme::FanInScaled => (2.0 / fan_in(&shape) as f64).sqrt(),
                InitScheme::UnitNormal => 1.0,
            };
            let dist = Normal::new(0.0, std).expect("positive std");
            Tensor::from_fn(&shape, |_| dist.sample(&mut rng) as f32)
        };
        params.insert(name, t);
    }
    Ok(EncoderParameters {
        params,
        config: cfg.clone(),
        provenance: Provenance::Scratch,
        training_meta: serde_json::Value::Null,
    })
}

impl EncoderParameters {
    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", name)))
    }

    /// Checks that names and shapes match the config and values are finite.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = parameter_shapes(&self.config);
        if expected.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameters for a config defining {}",
                self.params.len(),
                expected.len()
            )));
        }
        for (name, shape) in expected {
            let t = self.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "`{}` has shape {:?}, expected {:?}",
                    name,
                    t.shape(),
                    shape
                )));
            }
            if !t.all_finite() {
                return Err(Error::Checkpoint(format!("`{}` holds non-finite values", name)));
            }
        }
        Ok(())
    }

    /// Whether `name` is updated by training (standardization statistics are not).
    pub fn is_trainable(name: &str) -> bool {
        name != INPUT_MEAN && name != INPUT_STD
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| Self::is_trainable(n))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Freezes per-channel standardization statistics computed over `features` `(C, T, H, W)`.
    pub fn fit_input_stats<'a>(&mut self, features: impl IntoIterator<Item = &'a Tensor<f32>>) -> Result<()> {
        let c = self.config.in_channels;
        let mut sum = vec![0f64; c];
        let mut sq = vec![0f64; c];
        let mut count = 0usize;
        for f in features {
            if f.dim(0) != c {
                return Err(Error::Shape(format!("feature {:?} for {} channels", f.shape(), c)));
            }
            let per = f.len() / c;
            for ch in 0..c {
                for &v in &f.data()[ch * per..(ch + 1) * per] {
                    sum[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
            count += per;
        }
        if count == 0 {
            return Err(Error::InsufficientData("no features to standardize over".into()));
        }
        let n = count as f64;
        let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
        let std: Vec<f32> = sq
            .iter()
            .zip(&sum)
            .map(|(q, s)| {
                let var = (q / n - (s / n).powi(2)).max(0.0);
                var.sqrt().max(1e-6) as f32
            })
            .collect();
        self.params.insert(INPUT_MEAN.into(), Tensor::from_vec(&[c], mean)?);
        self.params.insert(INPUT_STD.into(), Tensor::from_vec(&[c], std)?);
        Ok(())
    }

    /// Convolutional stage only: the head is dropped and the config switched
    /// to feature-map mode.
    pub fn conv_stage(&self) -> Self {
        let mut out = self.clone();
        out.params.retain(|n, _| !n.starts_with("head."));
        out.config.output_mode = OutputMode::FeatureMap;
        out
    }

    /// Adds a freshly initialized head (embedding mode), keeping every conv parameter.
    pub fn with_new_head(&self, embedding_dim: usize, seed: u64) -> Result<Self> {
        let mut cfg = self.config.clone();
        cfg.output_mode = OutputMode::Embedding;
        cfg.embedding_dim = embedding_dim;
        cfg.seed = seed;
        let fresh = build_backbone(&cfg)?;
        let mut out = self.clone();
        out.config = cfg;
        for (n, t) in fresh.params {
            if n.starts_with("head.") {
                out.params.insert(n, t);
            }
        }
        Ok(out)
    }

    /// Applies `p ← p + alpha·g` for every gradient in `grads`.
    pub fn apply(&mut self, grads: &BTreeMap<String, Tensor<f32>>, alpha: f32) {
        for (n, g) in grads {
            if let Some(p) = self.params.get_mut(n) {
                p.axpy(alpha, g);
            }
        }
    }
}

/// Parameters of one encoder bound into a graph.
pub struct Bound {
    vars: BTreeMap<String, Var>,
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        self.vars[name]
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    /// Collects gradients of every bound trainable parameter.
    pub fn gradients<T: Scalar>(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .filter_map(|(n, &v)| grads.get(v).map(|g| (n.clone(), g.clone())))
            .collect()
    }
}

/// Binds parameters as graph leaves. With `trainable = false` every parameter
/// is a constant, which also skips their backward pass.
pub fn bind<T: Scalar>(g: &mut Graph<T>, p: &EncoderParameters, trainable: bool) -> Result<Bound> {
    let mut vars = BTreeMap::new();
    for (name, t) in &p.params {
        if name == INPUT_MEAN || name == INPUT_STD {
            continue;
        }
        let v = if trainable { g.param(t.cast()) } else { g.input(t.cast()) };
        vars.insert(name.clone(), v);
    }
    let mean = p.get(INPUT_MEAN)?.data().iter().map(|&v| v as f64).collect();
    let std = p.get(INPUT_STD)?.data().iter().map(|&v| v as f64).collect();
    Ok(Bound { vars, mean, std })
}

fn conv_relu<T: Scalar>(g: &mut Graph<T>, b: &Bound, x: Var, name: &str, win: Window3) -> Result<Var> {
    let w = b.var(&format!("{}.weight", name));
    let bias = b.var(&format!("{}.bias", name));
    let y = g.conv3d(x, w, Some(bias), win)?;
    Ok(g.relu(y))
}

/// 3D coordinate attention on `(N, C, T, H, W)`: pooled descriptors along
/// each axis share one 1×1 bottleneck and gate `x` through the outer
/// product of three sigmoid vectors.
pub fn ca_block_forward<T: Scalar>(g: &mut Graph<T>, b: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (n, c, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let pd = g.axis_mean(x, 2)?;
    let ph = g.axis_mean(x, 3)?;
    let pw = g.axis_mean(x, 4)?;
    let desc = g.concat(&[pd, ph, pw], 2)?;
    let desc = g.reshape(desc, &[n, c, d + h + w, 1, 1])?;
    let mid = conv_relu(g, b, desc, &format!("{}.ca.reduce", prefix), Window3::same([1, 1, 1]))?;
    let we = b.var(&format!("{}.ca.expand.weight", prefix));
    let be = b.var(&format!("{}.ca.expand.bias", prefix));
    let gates = g.conv3d(mid, we, Some(be), Window3::same([1, 1, 1]))?;
    let gates = g.sigmoid(gates);
    let gates = g.reshape(gates, &[n, c, d + h + w])?;
    let gd = g.narrow(gates, 2, 0, d)?;
    let gh = g.narrow(gates, 2, d, h)?;
    let gw = g.narrow(gates, 2, d + h, w)?;
    g.coord_gate(x, gd, gh, gw)
}

/// Four-branch Inception module followed by coordinate attention.
pub fn inception3d_forward<T: Scalar>(g: &mut Graph<T>, b: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let p1 = Window3::same([1, 1, 1]);
    let p3 = Window3::same([3, 3, 3]);
    let b0 = conv_relu(g, b, x, &format!("{}.b0", prefix), p1)?;
    let r1 = conv_relu(g, b, x, &format!("{}.b1_reduce", prefix), p1)?;
    let b1 = conv_relu(g, b, r1, &format!("{}.b1", prefix), p3)?;
    let r2 = conv_relu(g, b, x, &format!("{}.b2_reduce", prefix), p1)?;
    let b2 = conv_relu(g, b, r2, &format!("{}.b2", prefix), p3)?;
    let pooled = g.max_pool3d(x, p3)?;
    let b3 = conv_relu(g, b, pooled, &format!("{}.b3", prefix), p1)?;
    let cat = g.concat(&[b0, b1, b2, b3], 1)?;
    ca_block_forward(g, b, cat, prefix)
}

fn spatial_pool() -> Window3 {
    Window3::new([1, 3, 3], [1, 2, 2], [0, 1, 1])
}

/// Standardized input → Inception-B output `(N, C_B, T, H/8, W/8)`.
pub fn feature_map_forward<T: Scalar>(g: &mut Graph<T>, b: &Bound, x: Var) -> Result<Var> {
    let scale: Vec<T> = b.std.iter().map(|&s| T::of(1.0 / s)).collect();
    let shift: Vec<T> = b.mean.iter().zip(&b.std).map(|(&m, &s)| T::of(-m / s)).collect();
    let z = g.channel_affine(x, &scale, &shift)?;
    stem_to_features(g, b, z)
}

fn stem_to_features<T: Scalar>(g: &mut Graph<T>, b: &Bound, z: Var) -> Result<Var> {
    let y = conv_relu(g, b, z, "stem", Window3::new([3, 3, 3], [1, 2, 2], [1, 1, 1]))?;
    let y = g.max_pool3d(y, spatial_pool())?;
    let y = inception3d_forward(g, b, y, STAGES[0])?;
    let y = g.max_pool3d(y, spatial_pool())?;
    inception3d_forward(g, b, y, STAGES[1])
}

/// Full forward for a batch `x: (N, C, T, H, W)`: embeddings `(N, E)` or the feature map.
pub fn backbone_forward<T: Scalar>(g: &mut Graph<T>, b: &Bound, cfg: &BackboneConfig, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let want = [cfg.in_channels, cfg.input_t, cfg.input_hw.0, cfg.input_hw.1];
    if s.len() != 5 || s[1..] != want {
        return Err(Error::Shape(format!("backbone input {:?}, expected (N, {:?})", s, want)));
    }
    let fm = feature_map_forward(g, b, x)?;
    match cfg.output_mode {
        OutputMode::FeatureMap => Ok(fm),
        OutputMode::Embedding => {
            let flat = g.reshape(fm, &[s[0], cfg.flat_features()])?;
            g.linear(flat, b.var("head.weight"), Some(b.var("head.bias")))
        }
    }
}

/// Stacks `(C, T, H, W)` samples into an `(N, C, T, H, W)` batch.
pub fn batch<T: Scalar>(samples: &[&Tensor<f32>]) -> Result<Tensor<T>> {
    let stacked = Tensor::stack(samples)?;
    Ok(stacked.cast())
}

/// Gradient-free forward of many samples in chunks; returns `(N, …)` outputs.
pub fn infer(p: &EncoderParameters, samples: &[&Tensor<f32>], chunk: usize) -> Result<Tensor<f32>> {
    let mut outs = Vec::new();
    for part in samples.chunks(chunk.max(1)) {
        let mut g = Graph::<f32>::new();
        let b = bind(&mut g, p, false)?;
        let x = g.input(batch(part)?);
        let y = backbone_forward(&mut g, &b, &p.config, x)?;
        outs.push(g.value(y).clone());
    }
    let refs: Vec<&Tensor<f32>> = outs.iter().collect();
    Tensor::concat(&refs, 0)
}

/// Compares analytic and central-difference gradients of `loss_fn(output)`
/// on `n_samples` randomly drawn trainable scalars at 64-bit precision.
/// Returns the largest relative error.
pub fn gradient_check(
    p: &EncoderParameters,
    input: &Tensor<f64>,
    loss_fn: &dyn Fn(&mut Graph<f64>, Var) -> Result<Var>,
    eps: f64,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    use rand::Rng;
    let mut params: BTreeMap<String, Tensor<f64>> = p
        .params
        .iter()
        .map(|(n, t)| (n.clone(), t.cast()))
        .collect();
    let eval = |params: &BTreeMap<String, Tensor<f64>>, grad: bool| -> Result<(f64, BTreeMap<String, Tensor<f64>>)> {
        let mut g = Graph::<f64>::new();
        let mut vars = BTreeMap::new();
        for (n, t) in params {
            if EncoderParameters::is_trainable(n) {
                vars.insert(n.clone(), g.param(t.clone()));
            }
        }
        let bound = Bound {
            vars,
            mean: params[INPUT_MEAN].data().to_vec(),
            std: params[INPUT_STD].data().to_vec(),
        };
        let x = g.input(input.clone());
        let y = backbone_forward(&mut g, &bound, &p.config, x)?;
        let loss = loss_fn(&mut g, y)?;
        let l = g.value(loss).data()[0];
        if !l.is_finite() {
            return Err(Error::Divergence("non-finite loss in gradient check".into()));
        }
        let grads = if grad {
            bound.gradients(&g.backward(loss)?)
        } else {
            BTreeMap::new()
        };
        Ok((l, grads))
    };
    let (_, analytic) = eval(&params, true)?;
    let names: Vec<(String, usize)> = params
        .iter()
        .filter(|(n, _)| EncoderParameters::is_trainable(n))
        .map(|(n, t)| (n.clone(), t.len()))
        .collect();
    let total: usize = names.iter().map(|(_, l)| l).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0f64;
    for _ in 0..n_samples {
        let mut k = rng.gen_range(0..total);
        let (name, idx) = names
            .iter()
            .find_map(|(n, l)| {
                if k < *l {
                    Some((n.clone(), k))
                } else {
                    k -= l;
                    None
                }
            })
            .expect("index within total");
        let orig = params[&name].data()[idx];
        params.get_mut(&name).unwrap().data_mut()[idx] = orig + eps;
        let (lp, _) = eval(&params, false)?;
        params.get_mut(&name).unwrap().data_mut()[idx] = orig - eps;
        let (lm, _) = eval(&params, false)?;
        params.get_mut(&name).unwrap().data_mut()[idx] = orig;
        let numeric = (lp - lm) / (2.0 * eps);
        let a = analytic.get(&name).map(|g| g.data()[idx]).unwrap_or(0.0);
        let denom = a.abs().max(numeric.abs());
        let rel = if denom < 1e-10 { 0.0 } else { (a - numeric).abs() / denom };
        worst = worst.max(rel);
    }
    Ok(worst)
}
