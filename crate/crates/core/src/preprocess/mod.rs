//! Onset/apex pair → fixed-length fused motion feature.
//!
//! A clip's onset and apex frames are interpolated into an `L`-frame
//! sequence; every adjacent pair contributes a flow field `(u, v)` and an
//! absolute RGB difference; both are stacked into a `(5, L−1, H, W)` tensor
//! with channels `[u, v, ΔR, ΔG, ΔB]`.

pub mod farneback;
pub mod features;

pub use features::FeatureSet;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datamodel::container::read_tensor;
use crate::datamodel::frames::load_clip;
use crate::datamodel::manifest::ClipRecord;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use farneback::{farneback, FarnebackParams, Plane};

pub const DEFAULT_SEQUENCE_LEN: usize = 11;

/// `L` frames stored as `(3, L, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub frames: Tensor<f32>,
}

impl FrameSequence {
    pub fn new(frames: Tensor<f32>) -> Result<Self> {
        if frames.ndim() != 4 || frames.dim(0) != 3 || frames.dim(1) < 2 {
            return Err(Error::Shape(format!(
                "frame sequence must be (3, L>=2, H, W), got {:?}",
                frames.shape()
            )));
        }
        Ok(Self { frames })
    }

    /// Builds a sequence from `(3, H, W)` frames.
    pub fn from_frames(frames: &[Tensor<f32>]) -> Result<Self> {
        let refs: Vec<&Tensor<f32>> = frames.iter().collect();
        let stacked = Tensor::stack(&refs)?; // (L, 3, H, W)
        let (l, h, w) = (frames.len(), stacked.dim(2), stacked.dim(3));
        let plane = h * w;
        let mut data = Vec::with_capacity(stacked.len());
        for c in 0..3 {
            for t in 0..l {
                let off = (t * 3 + c) * plane;
                data.extend_from_slice(&stacked.data()[off..off + plane]);
            }
        }
        Self::new(Tensor::from_vec(&[3, l, h, w], data)?)
    }

    pub fn len(&self) -> usize {
        self.frames.dim(1)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn frame_size(&self) -> (usize, usize) {
        (self.frames.dim(2), self.frames.dim(3))
    }

    pub fn frame(&self, t: usize) -> Tensor<f32> {
        self.frames.index_axis(1, t).expect("frame index in range")
    }
}

/// Synthesises intermediate frame `t` of an `len`-frame sequence.
pub trait Interpolator: Send + Sync {
    fn interpolate(&self, onset: &Tensor<f32>, apex: &Tensor<f32>, t: usize, len: usize) -> Result<Tensor<f32>>;
}

/// Per-pixel linear blend `I_o + (t/(L−1))·(I_a − I_o)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct LinearInterpolator;

impl Interpolator for LinearInterpolator {
    fn interpolate(&self, onset: &Tensor<f32>, apex: &Tensor<f32>, t: usize, len: usize) -> Result<Tensor<f32>> {
        let a = (t as f64 / (len - 1) as f64) as f32;
        onset.zip_map(apex, |o, p| o + a * (p - o))
    }
}

fn check_frame(f: &Tensor<f32>) -> Result<()> {
    if f.ndim() != 3 || f.dim(0) != 3 {
        return Err(Error::Shape(format!("frame must be (3, H, W), got {:?}", f.shape())));
    }
    Ok(())
}

fn check_pair(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<()> {
    check_frame(a)?;
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("frames {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `len` frames whose endpoints are `onset` and `apex` themselves.
pub fn interpolate_sequence(
    onset: &Tensor<f32>,
    apex: &Tensor<f32>,
    len: usize,
    interpolator: &dyn Interpolator,
) -> Result<FrameSequence> {
    check_pair(onset, apex)?;
    if len < 2 {
        return Err(Error::InvalidArgument(format!("sequence length {} < 2", len)));
    }
    let mut frames = Vec::with_capacity(len);
    frames.push(onset.clone());
    for t in 1..len - 1 {
        let f = interpolator.interpolate(onset, apex, t, len)?;
        check_pair(onset, &f)?;
        frames.push(f);
    }
    frames.push(apex.clone());
    FrameSequence::from_frames(&frames)
}

/// Context a flow port may use beyond the two frames themselves.
#[derive(Clone, Copy, Debug)]
pub struct FlowRequest<'a> {
    pub clip_id: &'a str,
    pub from_index: usize,
    pub to_index: usize,
    pub sequence_len: usize,
    /// Ground-truth onset→apex displacement `(2, H, W)`, when known.
    pub ground_truth: Option<&'a Tensor<f32>>,
}

impl<'a> FlowRequest<'a> {
    /// Request without clip context, for ports that only look at pixels.
    pub fn pixels_only() -> Self {
        Self {
            clip_id: "",
            from_index: 0,
            to_index: 1,
            sequence_len: 2,
            ground_truth: None,
        }
    }
}

/// Dense displacement estimation between two `(3, H, W)` frames.
pub trait FlowEstimator: Send + Sync {
    /// Returns `(2, H, W)` flow `[u, v]` in pixels.
    fn estimate(&self, from: &Tensor<f32>, to: &Tensor<f32>, request: &FlowRequest<'_>) -> Result<Tensor<f32>>;
}

/// Reads the ground-truth displacement of a synthetic clip, scaled to the
/// fraction of the onset→apex interval the request spans.
#[derive(Clone, Copy, Debug, Default)]
pub struct OracleFlow;

impl FlowEstimator for OracleFlow {
    fn estimate(&self, from: &Tensor<f32>, to: &Tensor<f32>, req: &FlowRequest<'_>) -> Result<Tensor<f32>> {
        check_pair(from, to)?;
        let gt = req
            .ground_truth
            .ok_or_else(|| Error::Flow(format!("clip `{}` has no ground-truth displacement", req.clip_id)))?;
        if gt.shape() != [2, from.dim(1), from.dim(2)] {
            return Err(Error::Shape(format!(
                "ground truth {:?} for frames {:?}",
                gt.shape(),
                from.shape()
            )));
        }
        if req.sequence_len < 2 {
            return Err(Error::InvalidArgument("sequence length < 2".into()));
        }
        let span = req.to_index as f64 - req.from_index as f64;
        let frac = (span / (req.sequence_len - 1) as f64) as f32;
        Ok(if frac == 1.0 { gt.clone() } else { gt.scale(frac) })
    }
}

/// Classical polynomial-expansion flow on luminance.
#[derive(Clone, Debug, Default)]
pub struct FarnebackFlow {
    pub params: FarnebackParams,
}

fn luminance(f: &Tensor<f32>) -> Plane {
    let (h, w) = (f.dim(1), f.dim(2));
    let d = f.data();
    let n = h * w;
    Plane::new(
        h,
        w,
        (0..n)
            .map(|i| 0.299 * d[i] as f64 + 0.587 * d[n + i] as f64 + 0.114 * d[2 * n + i] as f64)
            .collect(),
    )
}

impl FlowEstimator for FarnebackFlow {
    fn estimate(&self, from: &Tensor<f32>, to: &Tensor<f32>, _req: &FlowRequest<'_>) -> Result<Tensor<f32>> {
        check_pair(from, to)?;
        let (u, v) = farneback(&luminance(from), &luminance(to), &self.params);
        let data: Vec<f32> = u.data.iter().chain(&v.data).map(|&x| x as f32).collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Flow("non-finite flow".into()));
        }
        Tensor::from_vec(&[2, u.h, u.w], data)
    }
}

/// Reads flow computed offline: one `<clip_id>.flow.mef` of dims `(2, L−1, H, W)` per clip.
/// A request spanning several steps sums the covered slices.
#[derive(Clone, Debug)]
pub struct PrecomputedFlow {
    pub dir: PathBuf,
}

impl PrecomputedFlow {
    pub fn path_for(&self, clip_id: &str) -> PathBuf {
        self.dir.join(format!("{}.flow.mef", clip_id))
    }
}

impl FlowEstimator for PrecomputedFlow {
    fn estimate(&self, from: &Tensor<f32>, to: &Tensor<f32>, req: &FlowRequest<'_>) -> Result<Tensor<f32>> {
        check_pair(from, to)?;
        let c = read_tensor(self.path_for(req.clip_id))?;
        let (h, w) = (from.dim(1), from.dim(2));
        let dims = c.dims().to_vec();
        if dims.len() != 4 || dims[0] != 2 || dims[1] != req.sequence_len - 1 || dims[2] != h || dims[3] != w {
            return Err(Error::Shape(format!(
                "precomputed flow for `{}` has dims {:?}, expected (2, {}, {}, {})",
                req.clip_id,
                dims,
                req.sequence_len - 1,
                h,
                w
            )));
        }
        if req.to_index <= req.from_index || req.to_index >= req.sequence_len {
            return Err(Error::InvalidArgument(format!(
                "flow request {}→{} in a {}-frame sequence",
                req.from_index, req.to_index, req.sequence_len
            )));
        }
        let mut out = Tensor::zeros(&[2, h, w]);
        for t in req.from_index..req.to_index {
            let slice = c.tensor.index_axis(1, t)?;
            out.add_assign(&slice);
        }
        Ok(out)
    }
}

/// Flow between two frames through a port.
pub fn optical_flow(
    frame_t: &Tensor<f32>,
    frame_t1: &Tensor<f32>,
    estimator: &dyn FlowEstimator,
    request: &FlowRequest<'_>,
) -> Result<Tensor<f32>> {
    check_pair(frame_t, frame_t1)?;
    let f = estimator.estimate(frame_t, frame_t1, request)?;
    if f.shape() != [2, frame_t.dim(1), frame_t.dim(2)] {
        return Err(Error::Shape(format!("flow port returned {:?}", f.shape())));
    }
    Ok(f)
}

/// Per-channel `|I_{t+1} − I_t|`.
pub fn frame_difference(frame_t: &Tensor<f32>, frame_t1: &Tensor<f32>) -> Result<Tensor<f32>> {
    check_pair(frame_t, frame_t1)?;
    frame_t.zip_map(frame_t1, |a, b| (b - a).abs())
}

/// Fused `(5, L−1, H, W)` motion feature of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeature {
    pub clip_id: String,
    pub tensor: Tensor<f32>,
}

/// Concatenates `(2, T, H, W)` flows and `(3, T, H, W)` differences along channels.
pub fn fuse_features(flows: &Tensor<f32>, diffs: &Tensor<f32>, clip_id: &str) -> Result<FusedFeature> {
    if flows.ndim() != 4 || flows.dim(0) != 2 || diffs.ndim() != 4 || diffs.dim(0) != 3 {
        return Err(Error::Shape(format!(
            "flows {:?} must be (2, T, H, W) and diffs {:?} (3, T, H, W)",
            flows.shape(),
            diffs.shape()
        )));
    }
    if flows.shape()[1..] != diffs.shape()[1..] {
        return Err(Error::Shape(format!("flows {:?} vs diffs {:?}", flows.shape(), diffs.shape())));
    }
    Ok(FusedFeature {
        clip_id: clip_id.to_string(),
        tensor: Tensor::concat(&[flows, diffs], 0)?,
    })
}

/// Which flow port to use.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FlowPortConfig {
    Oracle,
    Farneback {
        #[serde(default)]
        params: FarnebackParams,
    },
    Precomputed {
        dir: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub sequence_len: usize,
    pub flow: FlowPortConfig,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            sequence_len: DEFAULT_SEQUENCE_LEN,
            flow: FlowPortConfig::Farneback {
                params: FarnebackParams::default(),
            },
        }
    }
}

impl PreprocessConfig {
    pub fn flow_port(&self) -> Box<dyn FlowEstimator> {
        match &self.flow {
            FlowPortConfig::Oracle => Box::new(OracleFlow),
            FlowPortConfig::Farneback { params } => Box::new(FarnebackFlow { params: params.clone() }),
            FlowPortConfig::Precomputed { dir } => Box::new(PrecomputedFlow { dir: dir.clone() }),
        }
    }
}

/// Interpolation, flow and difference ports bound to a sequence length.
pub struct Preprocessor {
    pub sequence_len: usize,
    pub interpolator: Box<dyn Interpolator>,
    pub flow: Box<dyn FlowEstimator>,
}

impl Preprocessor {
    pub fn from_config(cfg: &PreprocessConfig) -> Result<Self> {
        if cfg.sequence_len < 2 {
            return Err(Error::InvalidArgument(format!("sequence length {} < 2", cfg.sequence_len)));
        }
        Ok(Self {
            sequence_len: cfg.sequence_len,
            interpolator: Box::new(LinearInterpolator),
            flow: cfg.flow_port(),
        })
    }

    /// Features of an onset/apex pair.
    pub fn run_pair(
        &self,
        clip_id: &str,
        onset: &Tensor<f32>,
        apex: &Tensor<f32>,
        ground_truth: Option<&Tensor<f32>>,
    ) -> Result<FusedFeature> {
        let seq = interpolate_sequence(onset, apex, self.sequence_len, self.interpolator.as_ref())?;
        let mut flows = Vec::with_capacity(self.sequence_len - 1);
        let mut diffs = Vec::with_capacity(self.sequence_len - 1);
        for t in 0..self.sequence_len - 1 {
            let (a, b) = (seq.frame(t), seq.frame(t + 1));
            let req = FlowRequest {
                clip_id,
                from_index: t,
                to_index: t + 1,
                sequence_len: self.sequence_len,
                ground_truth,
            };
            flows.push(optical_flow(&a, &b, self.flow.as_ref(), &req)?);
            diffs.push(frame_difference(&a, &b)?);
        }
        fuse_features(&stack_time(&flows)?, &stack_time(&diffs)?, clip_id)
    }
}

/// `T` tensors of `(C, H, W)` → `(C, T, H, W)`.
fn stack_time(parts: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let unsq: Vec<Tensor<f32>> = parts.iter().map(|p| p.clone().unsqueeze(1)).collect();
    let refs: Vec<&Tensor<f32>> = unsq.iter().collect();
    Tensor::concat(&refs, 1)
}

/// Loads a record's frames from `frames_path` and runs the full pipeline.
pub fn preprocess_clip(record: &ClipRecord, frames_path: &Path, pre: &Preprocessor) -> Result<FusedFeature> {
    let clip = load_clip(frames_path)?;
    if record.apex_index >= clip.len() {
        return Err(Error::InvalidRecord {
            clip_id: record.clip_id.clone(),
            message: format!("apex index {} beyond {} frames", record.apex_index, clip.len()),
        });
    }
    let onset = clip.frame(record.onset_index)?;
    let apex = clip.frame(record.apex_index)?;
    pre.run_pair(&record.clip_id, &onset, &apex, clip.displacement.as_ref())
}
