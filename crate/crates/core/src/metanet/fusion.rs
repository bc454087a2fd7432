//! Encoder fusion: parameter bundles, forward passes and persistence.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::cosine_similarity;
use crate::autograd::{Gradients, Graph, Var};
use crate::backbone::{
    backbone_forward, batch, bind, feature_map_forward, load_checkpoint, save_checkpoint, Bound, EncoderParameters,
    OutputMode,
};
use crate::error::{Error, Result};
use crate::kernels::Window3;
use crate::preprocess::FeatureSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Channels of the raw fused feature and of the projected GFE map.
pub const BASE_CHANNELS: usize = 5;

const PROJ_WEIGHT: &str = "proj.weight";
const PROJ_BIAS: &str = "proj.bias";
const INPUT_MEAN: &str = "input.mean";
const INPUT_STD: &str = "input.std";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionVariant {
    /// Weighted sum of the two encoders' cosine similarities.
    Parallel,
    /// GFE feature map concatenated onto the AFE input.
    Cascade,
    /// One encoder alone (no-prior baseline, GFE-only reference).
    Single,
}

/// Tuned fusion weight for a dataset tag; 0.7 for anything unrecognised.
pub fn default_gamma(dataset: &str) -> f64 {
    match dataset.to_ascii_lowercase().as_str() {
        "smic" => 0.8,
        "samm" => 0.6,
        _ => 0.7,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionSpec {
    pub variant: FusionVariant,
    pub gamma: Option<f64>,
    pub gfe: EncoderParameters,
    pub afe: Option<EncoderParameters>,
    /// Cascade only: `proj.weight (5, C_B, 1, 1, 1)` and `proj.bias (5)`.
    pub projection: BTreeMap<String, Tensor<f32>>,
    pub training_meta: serde_json::Value,
}

fn embedding_mode(enc: &EncoderParameters, dim: usize, seed: u64) -> Result<EncoderParameters> {
    match enc.config.output_mode {
        OutputMode::Embedding => Ok(enc.clone()),
        OutputMode::FeatureMap => enc.with_new_head(dim, seed),
    }
}

impl FusionSpec {
    /// Single-encoder model; a feature-map encoder gets a fresh head.
    pub fn single(enc: &EncoderParameters, embedding_dim: usize, seed: u64) -> Result<Self> {
        let s = Self {
            variant: FusionVariant::Single,
            gamma: None,
            gfe: embedding_mode(enc, embedding_dim, seed)?,
            afe: None,
            projection: BTreeMap::new(),
            training_meta: serde_json::Value::Null,
        };
        s.validate()?;
        Ok(s)
    }

    /// Parallel fusion; a feature-map GFE gets a fresh head sized like the AFE's.
    pub fn parallel(gfe: &EncoderParameters, afe: &EncoderParameters, gamma: f64, seed: u64) -> Result<Self> {
        let s = Self {
            variant: FusionVariant::Parallel,
            gamma: Some(gamma),
            gfe: embedding_mode(gfe, afe.config.embedding_dim, seed)?,
            afe: Some(afe.clone()),
            projection: BTreeMap::new(),
            training_meta: serde_json::Value::Null,
        };
        s.validate()?;
        Ok(s)
    }

    /// Cascade fusion from a pretrained GFE and an unadapted pretrained AFE.
    /// The projection starts at zero, so the untrained cascade reproduces the
    /// AFE on its original channels.
    pub fn cascade(gfe: &EncoderParameters, afe: &EncoderParameters) -> Result<Self> {
        let gfe = gfe.conv_stage();
        let cb = gfe.config.feature_map_dims()[0];
        let projection = BTreeMap::from([
            (PROJ_WEIGHT.to_string(), Tensor::zeros(&[BASE_CHANNELS, cb, 1, 1, 1])),
            (PROJ_BIAS.to_string(), Tensor::zeros(&[BASE_CHANNELS])),
        ]);
        let s = Self {
            variant: FusionVariant::Cascade,
            gamma: None,
            gfe,
            afe: Some(adapt_afe_for_cascade(afe, BASE_CHANNELS)?),
            projection,
            training_meta: serde_json::Value::Null,
        };
        s.validate()?;
        Ok(s)
    }

    /// Replaces the projection with He-normal weights (zero bias).
    pub fn randomize_projection(&mut self, seed: u64) {
        if let Some(w) = self.projection.get_mut(PROJ_WEIGHT) {
            let fan_in = w.dim(1) as f64;
            let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            w.data_mut().iter_mut().for_each(|v| *v = dist.sample(&mut rng) as f32);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        self.gfe.validate()?;
        if let Some(a) = &self.afe {
            a.validate()?;
        }
        match self.variant {
            FusionVariant::Single => {
                if self.gfe.config.output_mode != OutputMode::Embedding {
                    return bad("single-encoder model needs an embedding-mode encoder");
                }
            }
            FusionVariant::Parallel => {
                let afe = match &self.afe {
                    Some(a) => a,
                    None => return bad("parallel fusion needs an AFE"),
                };
                match self.gamma {
                    Some(g) if (0.0..=1.0).contains(&g) => {}
                    Some(_) => return bad("γ outside [0, 1]"),
                    None => return bad("parallel fusion needs γ"),
                }
                if self.gfe.config.output_mode != OutputMode::Embedding
                    || afe.config.output_mode != OutputMode::Embedding
                {
                    return bad("parallel fusion needs embedding-mode encoders");
                }
                if self.gfe.config.input_shape() != afe.config.input_shape() {
                    return bad("parallel encoders disagree on the input shape");
                }
            }
            FusionVariant::Cascade => {
                let afe = match &self.afe {
                    Some(a) => a,
                    None => return bad("cascade fusion needs an adapted AFE"),
                };
                if self.gfe.config.output_mode != OutputMode::FeatureMap {
                    return bad("cascade fusion needs a feature-map GFE");
                }
                if afe.config.in_channels != self.gfe.config.in_channels + BASE_CHANNELS {
                    return bad("cascade AFE is not channel-adapted");
                }
                let [cb, t, _, _] = self.gfe.config.feature_map_dims();
                if t != afe.config.input_t || self.gfe.config.input_hw != afe.config.input_hw {
                    return bad("cascade encoders disagree on the input shape");
                }
                let w = self.projection.get(PROJ_WEIGHT);
                let b = self.projection.get(PROJ_BIAS);
                match (w, b) {
                    (Some(w), Some(b)) if w.shape() == [BASE_CHANNELS, cb, 1, 1, 1] && b.shape() == [BASE_CHANNELS] => {}
                    _ => return bad("cascade projection missing or misshapen"),
                }
            }
        }
        Ok(())
    }

    /// `(C, T, H, W)` accepted by the model.
    pub fn input_shape(&self) -> [usize; 4] {
        self.gfe.config.input_shape()
    }

    /// Every trainable parameter, prefixed with `gfe.`, `afe.` or nothing
    /// (projection).
    pub fn trainable_params(&self) -> BTreeMap<String, Tensor<f32>> {
        let mut out = BTreeMap::new();
        let mut add = |prefix: &str, p: &EncoderParameters| {
            for (n, t) in &p.params {
                if EncoderParameters::is_trainable(n) {
                    out.insert(format!("{}.{}", prefix, n), t.clone());
                }
            }
        };
        add("gfe", &self.gfe);
        if let Some(a) = &self.afe {
            add("afe", a);
        }
        for (n, t) in &self.projection {
            out.insert(n.clone(), t.clone());
        }
        out
    }

    /// Inverse of [`Self::trainable_params`].
    pub fn set_trainable_params(&mut self, params: BTreeMap<String, Tensor<f32>>) {
        for (n, t) in params {
            if let Some(rest) = n.strip_prefix("gfe.") {
                self.gfe.params.insert(rest.to_string(), t);
            } else if let Some(rest) = n.strip_prefix("afe.") {
                if let Some(a) = self.afe.as_mut() {
                    a.params.insert(rest.to_string(), t);
                }
            } else {
                self.projection.insert(n, t);
            }
        }
    }
}

/// Widens the first convolution from 5 to `5 + extra` input channels. New
/// kernel slices are the mean of the pretrained slices; new input channels
/// are standardized with mean 0 and scale 1.
pub fn adapt_afe_for_cascade(afe: &EncoderParameters, extra: usize) -> Result<EncoderParameters> {
    if afe.config.in_channels != BASE_CHANNELS {
        return Err(Error::InvalidArgument(format!(
            "AFE already has {} input channels",
            afe.config.in_channels
        )));
    }
    if extra == 0 {
        return Ok(afe.clone());
    }
    let mut out = afe.clone();
    let c0 = BASE_CHANNELS;
    let c1 = c0 + extra;
    let w = afe.get("stem.weight")?;
    let (o, k) = (w.dim(0), w.len() / (w.dim(0) * c0));
    let mut data = Vec::with_capacity(o * c1 * k);
    for oc in 0..o {
        let base = &w.data()[oc * c0 * k..(oc + 1) * c0 * k];
        data.extend_from_slice(base);
        let mean: Vec<f32> = (0..k)
            .map(|j| (0..c0).map(|ic| base[ic * k + j]).sum::<f32>() / c0 as f32)
            .collect();
        for _ in 0..extra {
            data.extend_from_slice(&mean);
        }
    }
    let mut shape = w.shape().to_vec();
    shape[1] = c1;
    out.params.insert("stem.weight".into(), Tensor::from_vec(&shape, data)?);
    let mut mean = afe.get(INPUT_MEAN)?.data().to_vec();
    let mut std = afe.get(INPUT_STD)?.data().to_vec();
    mean.resize(c1, 0.0);
    std.resize(c1, 1.0);
    out.params.insert(INPUT_MEAN.into(), Tensor::from_vec(&[c1], mean)?);
    out.params.insert(INPUT_STD.into(), Tensor::from_vec(&[c1], std)?);
    out.config.in_channels = c1;
    Ok(out)
}

/// A [`FusionSpec`] bound into a graph.
pub struct BoundFusion {
    pub gfe: Bound,
    pub afe: Option<Bound>,
    pub proj: Option<(Var, Var)>,
}

impl BoundFusion {
    pub fn bind<T: Scalar>(g: &mut Graph<T>, spec: &FusionSpec, trainable: bool) -> Result<Self> {
        let gfe = bind(g, &spec.gfe, trainable)?;
        let afe = match &spec.afe {
            Some(a) => Some(bind(g, a, trainable)?),
            None => None,
        };
        let proj = if spec.variant == FusionVariant::Cascade {
            let leaf = |g: &mut Graph<T>, t: &Tensor<f32>| if trainable { g.param(t.cast()) } else { g.input(t.cast()) };
            let w = leaf(g, &spec.projection[PROJ_WEIGHT]);
            let b = leaf(g, &spec.projection[PROJ_BIAS]);
            Some((w, b))
        } else {
            None
        };
        Ok(Self { gfe, afe, proj })
    }

    /// Gradients keyed like [`FusionSpec::trainable_params`].
    pub fn gradients<T: Scalar>(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        for (n, t) in self.gfe.gradients(grads) {
            out.insert(format!("gfe.{}", n), t);
        }
        if let Some(a) = &self.afe {
            for (n, t) in a.gradients(grads) {
                out.insert(format!("afe.{}", n), t);
            }
        }
        if let Some((w, b)) = self.proj {
            if let Some(t) = grads.get(w) {
                out.insert(PROJ_WEIGHT.into(), t.clone());
            }
            if let Some(t) = grads.get(b) {
                out.insert(PROJ_BIAS.into(), t.clone());
            }
        }
        out
    }
}

/// Cascade embedding of `x: (N, 5, T, H, W)`.
pub fn cascade_forward<T: Scalar>(g: &mut Graph<T>, spec: &FusionSpec, b: &BoundFusion, x: Var) -> Result<Var> {
    let (afe, afe_b, (pw, pb)) = match (&spec.afe, &b.afe, b.proj) {
        (Some(a), Some(ab), Some(p)) if spec.variant == FusionVariant::Cascade => (a, ab, p),
        _ => return Err(Error::InvalidArgument("cascade forward on a non-cascade model".into())),
    };
    let xs = g.shape(x).to_vec();
    if xs.len() != 5 || xs[1..] != spec.input_shape() {
        return Err(Error::Shape(format!("cascade input {:?}", xs)));
    }
    let fm = feature_map_forward(g, &b.gfe, x)?;
    let proj = g.conv3d(fm, pw, Some(pb), Window3::same([1, 1, 1]))?;
    let up = g.resize(proj, [xs[3], xs[4]])?;
    let cat = g.concat(&[x, up], 1)?;
    backbone_forward(g, afe_b, &afe.config, cat)
}

/// Embedding streams of a batch with their fusion weights.
pub fn forward_streams<T: Scalar>(
    g: &mut Graph<T>,
    spec: &FusionSpec,
    b: &BoundFusion,
    x: Var,
) -> Result<Vec<(Var, f64)>> {
    match spec.variant {
        FusionVariant::Single => Ok(vec![(backbone_forward(g, &b.gfe, &spec.gfe.config, x)?, 1.0)]),
        FusionVariant::Parallel => {
            let gamma = spec.gamma.unwrap_or(0.0);
            let mut out = vec![(backbone_forward(g, &b.gfe, &spec.gfe.config, x)?, 1.0)];
            if gamma != 0.0 {
                let afe = spec.afe.as_ref().expect("validated");
                let ab = b.afe.as_ref().expect("bound");
                out.push((backbone_forward(g, ab, &afe.config, x)?, gamma));
            }
            Ok(out)
        }
        FusionVariant::Cascade => Ok(vec![(cascade_forward(g, spec, b, x)?, 1.0)]),
    }
}

/// Fused similarity `(M, G)` between query rows and the prototypes of
/// `groups` of support rows, for `x` holding support then query samples.
pub fn fused_scores<T: Scalar>(
    g: &mut Graph<T>,
    spec: &FusionSpec,
    b: &BoundFusion,
    x: Var,
    n_support: usize,
    groups: &[Vec<usize>],
) -> Result<Var> {
    let n = g.shape(x)[0];
    let mut total: Option<Var> = None;
    for (emb, w) in forward_streams(g, spec, b, x)? {
        let s = g.narrow(emb, 0, 0, n_support)?;
        let q = g.narrow(emb, 0, n_support, n - n_support)?;
        let protos = g.group_mean(s, groups)?;
        let cos = g.cosine_matrix(q, protos)?;
        let term = if w == 1.0 { cos } else { g.scale(cos, T::of(w)) };
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::InvalidArgument("model produced no embedding stream".into()))
}

/// Per-clip embeddings of each stream, for repeated prototype scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    rows: BTreeMap<String, usize>,
    pub streams: Vec<Stream>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stream {
    pub name: String,
    pub weight: f64,
    pub embeddings: Vec<Vec<f64>>,
}

impl EmbeddingTable {
    /// Embeds `clip_ids` with `spec`, `chunk` samples per forward pass.
    pub fn compute(spec: &FusionSpec, features: &FeatureSet, clip_ids: &[String], chunk: usize) -> Result<Self> {
        spec.validate()?;
        let mut rows = BTreeMap::new();
        for id in clip_ids {
            let next = rows.len();
            rows.entry(id.clone()).or_insert(next);
        }
        let ordered: Vec<&String> = {
            let mut v: Vec<(&String, &usize)> = rows.iter().collect();
            v.sort_by_key(|(_, &i)| i);
            v.into_iter().map(|(id, _)| id).collect()
        };
        let names: Vec<&str> = match spec.variant {
            FusionVariant::Parallel => vec!["gfe", "afe"],
            FusionVariant::Cascade => vec!["cascade"],
            FusionVariant::Single => vec!["gfe"],
        };
        let mut embeddings: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(ordered.len()); names.len()];
        for part in ordered.chunks(chunk.max(1)) {
            let xs: Vec<&Tensor<f32>> = part.iter().map(|id| features.get(id)).collect::<Result<_>>()?;
            let mut g = Graph::<f32>::new();
            let b = BoundFusion::bind(&mut g, spec, false)?;
            let x = g.input(batch(&xs)?);
            let outs = match spec.variant {
                FusionVariant::Parallel => {
                    let afe = spec.afe.as_ref().expect("validated");
                    vec![
                        backbone_forward(&mut g, &b.gfe, &spec.gfe.config, x)?,
                        backbone_forward(&mut g, b.afe.as_ref().expect("bound"), &afe.config, x)?,
                    ]
                }
                _ => forward_streams(&mut g, spec, &b, x)?.into_iter().map(|(v, _)| v).collect(),
            };
            for (s, v) in outs.into_iter().enumerate() {
                let t = g.value(v);
                let e = t.dim(1);
                for r in 0..t.dim(0) {
                    embeddings[s].push(t.data()[r * e..(r + 1) * e].iter().map(|&v| v as f64).collect());
                }
            }
        }
        let weights: Vec<f64> = match spec.variant {
            FusionVariant::Parallel => vec![1.0, spec.gamma.unwrap_or(0.0)],
            _ => vec![1.0],
        };
        let streams = names
            .into_iter()
            .zip(weights)
            .zip(embeddings)
            .map(|((name, weight), embeddings)| Stream {
                name: name.to_string(),
                weight,
                embeddings,
            })
            .collect();
        Ok(Self { rows, streams })
    }

    /// Builds a table from explicit embeddings of one stream.
    pub fn from_embeddings(entries: Vec<(String, Vec<f64>)>) -> Self {
        let mut rows = BTreeMap::new();
        let mut embeddings = Vec::with_capacity(entries.len());
        for (id, e) in entries {
            rows.insert(id, embeddings.len());
            embeddings.push(e);
        }
        Self {
            rows,
            streams: vec![Stream {
                name: "single".into(),
                weight: 1.0,
                embeddings,
            }],
        }
    }

    pub fn contains(&self, clip_id: &str) -> bool {
        self.rows.contains_key(clip_id)
    }

    /// Copy with the weight of stream `name` replaced.
    pub fn with_weight(&self, name: &str, weight: f64) -> Result<Self> {
        let mut out = self.clone();
        let s = out
            .streams
            .iter_mut()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("no stream `{}`", name)))?;
        s.weight = weight;
        Ok(out)
    }

    /// Copy keeping only stream `name` at weight 1.
    pub fn only(&self, name: &str) -> Result<Self> {
        let s = self
            .streams
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("no stream `{}`", name)))?;
        Ok(Self {
            rows: self.rows.clone(),
            streams: vec![Stream {
                weight: 1.0,
                ..s.clone()
            }],
        })
    }

    pub fn embedding(&self, stream: usize, clip_id: &str) -> Result<&[f64]> {
        let r = *self
            .rows
            .get(clip_id)
            .ok_or_else(|| Error::InvalidArgument(format!("clip `{}` was not embedded", clip_id)))?;
        Ok(&self.streams[stream].embeddings[r])
    }

    /// Per-stream prototypes `[stream][class]` of a support set.
    pub fn prototypes(&self, support: &[(String, usize)], n_classes: usize) -> Result<Vec<Vec<Vec<f64>>>> {
        let mut out = Vec::with_capacity(self.streams.len());
        for s in 0..self.streams.len() {
            let mut labelled = Vec::with_capacity(support.len());
            for (id, c) in support {
                if *c >= n_classes {
                    return Err(Error::InvalidArgument(format!("class {} of {}", c, n_classes)));
                }
                labelled.push((self.embedding(s, id)?.to_vec(), c.to_string()));
            }
            let protos = super::compute_prototypes(&labelled)?;
            let mut by_class = vec![Vec::new(); n_classes];
            for p in protos {
                let c: usize = p.class.parse().expect("index label");
                by_class[c] = p.w;
            }
            if let Some(c) = by_class.iter().position(|w| w.is_empty()) {
                return Err(Error::InsufficientData(format!("no support for class {}", c)));
            }
            out.push(by_class);
        }
        Ok(out)
    }

    /// Fused similarity of `clip_id` to each class prototype.
    pub fn scores(&self, prototypes: &[Vec<Vec<f64>>], clip_id: &str) -> Result<Vec<f64>> {
        let n_classes = prototypes.first().map_or(0, |p| p.len());
        let mut total = vec![0.0; n_classes];
        for (s, stream) in self.streams.iter().enumerate() {
            let q = self.embedding(s, clip_id)?;
            for (c, w) in prototypes[s].iter().enumerate() {
                total[c] += stream.weight * cosine_similarity(q, w)?;
            }
        }
        Ok(total)
    }
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct FusionRecord {
    variant: FusionVariant,
    gamma: Option<f64>,
    projection: BTreeMap<String, StoredTensor>,
    #[serde(default)]
    training_meta: serde_json::Value,
}

const GFE_FILE: &str = "gfe.ckpt";
const AFE_FILE: &str = "afe.ckpt";
const FUSION_FILE: &str = "fusion.json";

/// Writes `gfe.ckpt`, `afe.ckpt` (when present) and `fusion.json` into `dir`.
pub fn save_fusion(spec: &FusionSpec, dir: &Path) -> Result<()> {
    spec.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_checkpoint(&spec.gfe, &dir.join(GFE_FILE))?;
    if let Some(a) = &spec.afe {
        save_checkpoint(a, &dir.join(AFE_FILE))?;
    }
    let record = FusionRecord {
        variant: spec.variant,
        gamma: spec.gamma,
        projection: spec
            .projection
            .iter()
            .map(|(n, t)| {
                (
                    n.clone(),
                    StoredTensor {
                        shape: t.shape().to_vec(),
                        data: t.data().to_vec(),
                    },
                )
            })
            .collect(),
        training_meta: spec.training_meta.clone(),
    };
    let path = dir.join(FUSION_FILE);
    std::fs::write(&path, serde_json::to_vec_pretty(&record)?).map_err(|e| Error::io(&path, e))
}

pub fn load_fusion(dir: &Path) -> Result<FusionSpec> {
    let path = dir.join(FUSION_FILE);
    let text = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let record: FusionRecord = serde_json::from_slice(&text)?;
    let gfe = load_checkpoint(&dir.join(GFE_FILE))?;
    let afe = match record.variant {
        FusionVariant::Single => None,
        _ => Some(load_checkpoint(&dir.join(AFE_FILE))?),
    };
    let mut projection = BTreeMap::new();
    for (n, t) in record.projection {
        projection.insert(n, Tensor::from_vec(&t.shape, t.data)?);
    }
    let spec = FusionSpec {
        variant: record.variant,
        gamma: record.gamma,
        gfe,
        afe,
        projection,
        training_meta: record.training_meta,
    };
    spec.validate()?;
    Ok(spec)
}
