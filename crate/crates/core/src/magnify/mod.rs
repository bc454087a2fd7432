//! Motion magnification and the class-balancing amplification plan.
//!
//! A magnified sequence moves every pixel of the reference frame by
//! `(1+φ)·δ(x, t)`, where `δ` is the motion of frame `t` relative to frame 0.
//! Balancing adds magnified copies at `φ = 1..φ_max[c]` per class so that
//! rare classes receive more copies.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::frames::{load_clip, write_clip_dir, ClipFrames};
use crate::datamodel::manifest::{ClipRecord, DatasetManifest, MAX_MAGNIFICATION};
use crate::error::{Error, Result};
use crate::preprocess::{optical_flow, FlowEstimator, FlowRequest, FrameSequence};
use crate::tensor::Tensor;

/// Per-clip context handed to a magnifier's flow port.
#[derive(Clone, Copy, Debug)]
pub struct MagnifyContext<'a> {
    pub clip_id: &'a str,
    /// Ground-truth frame 0 → last frame displacement `(2, H, W)`, when known.
    pub ground_truth: Option<&'a Tensor<f32>>,
}

pub trait Magnifier: Send + Sync {
    /// Sequence of equal length whose motion relative to frame 0 is scaled by `1 + φ`.
    fn magnify(&self, seq: &FrameSequence, phi: u32, ctx: &MagnifyContext<'_>) -> Result<FrameSequence>;
}

/// Estimates `δ` against frame 0 through a flow port, then forward-warps
/// frame 0 by `(1+φ)·δ` with bilinear splatting. Pixels that receive no
/// mass keep the original frame's value.
pub struct FlowWarpMagnifier {
    pub flow: Box<dyn FlowEstimator>,
}

impl FlowWarpMagnifier {
    pub fn new(flow: Box<dyn FlowEstimator>) -> Self {
        Self { flow }
    }
}

/// Forward bilinear splat of `src` `(3, H, W)` by `gain · disp`; holes fall back to `fallback`.
pub fn splat_warp(src: &Tensor<f32>, disp: &Tensor<f32>, gain: f64, fallback: &Tensor<f32>) -> Tensor<f32> {
    let (h, w) = (src.dim(1), src.dim(2));
    let n = h * w;
    let mut acc = vec![0f64; 3 * n];
    let mut wsum = vec![0f64; n];
    let (s, d) = (src.data(), disp.data());
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let ty = y as f64 + gain * d[n + i] as f64;
            let tx = x as f64 + gain * d[i] as f64;
            let (y0, x0) = (ty.floor(), tx.floor());
            let (fy, fx) = (ty - y0, tx - x0);
            for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
                for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
                    let wt = wy * wx;
                    if wt <= 0.0 {
                        continue;
                    }
                    let (yy, xx) = (y0 as isize + dy, x0 as isize + dx);
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    let j = yy as usize * w + xx as usize;
                    wsum[j] += wt;
                    for c in 0..3 {
                        acc[c * n + j] += wt * s[c * n + i] as f64;
                    }
                }
            }
        }
    }
    let fb = fallback.data();
    let mut out = vec![0f32; 3 * n];
    for j in 0..n {
        let ws = wsum[j];
        for c in 0..3 {
            out[c * n + j] = if ws >= 1.0 {
                (acc[c * n + j] / ws) as f32
            } else {
                // partial coverage blends towards the fallback
                (acc[c * n + j] + (1.0 - ws) * fb[c * n + j] as f64) as f32
            };
        }
    }
    Tensor::from_vec(&[3, h, w], out).expect("warp shape")
}

impl Magnifier for FlowWarpMagnifier {
    fn magnify(&self, seq: &FrameSequence, phi: u32, ctx: &MagnifyContext<'_>) -> Result<FrameSequence> {
        if phi == 0 {
            return Ok(seq.clone());
        }
        let len = seq.len();
        let reference = seq.frame(0);
        let mut frames = vec![reference.clone()];
        for t in 1..len {
            let current = seq.frame(t);
            let req = FlowRequest {
                clip_id: ctx.clip_id,
                from_index: 0,
                to_index: t,
                sequence_len: len,
                ground_truth: ctx.ground_truth,
            };
            let delta = optical_flow(&reference, &current, self.flow.as_ref(), &req)?;
            if !delta.all_finite() {
                return Err(Error::Flow(format!("non-finite displacement for `{}`", ctx.clip_id)));
            }
            if delta.data().iter().all(|&v| v == 0.0) {
                frames.push(current);
            } else {
                frames.push(splat_warp(&reference, &delta, 1.0 + phi as f64, &current));
            }
        }
        FrameSequence::from_frames(&frames)
    }
}

/// Magnifies with factor `phi`; `phi = 0` returns the input unchanged.
pub fn magnify_sequence(
    seq: &FrameSequence,
    phi: i64,
    magnifier: &dyn Magnifier,
    ctx: &MagnifyContext<'_>,
) -> Result<FrameSequence> {
    if phi < 0 {
        return Err(Error::InvalidArgument(format!("magnification factor {} < 0", phi)));
    }
    if phi == 0 {
        return Ok(seq.clone());
    }
    let out = magnifier.magnify(seq, phi as u32, ctx)?;
    if out.frames.shape() != seq.frames.shape() {
        return Err(Error::Shape(format!(
            "magnifier changed shape {:?} -> {:?}",
            seq.frames.shape(),
            out.frames.shape()
        )));
    }
    Ok(out)
}

/// Originals plus one copy at each `φ ∈ 1..=φ_max`.
pub fn amplified_count(raw: usize, phi_max: u32) -> usize {
    raw * (phi_max as usize + 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MagnificationPlan {
    pub per_class: BTreeMap<String, u32>,
    pub cap: u32,
    pub predicted_counts: BTreeMap<String, usize>,
}

/// `target = min·(cap+1)`, `φ_max[c] = clamp(round(target/raw[c]) − 1, 1, cap)`.
pub fn plan_balancing(raw_counts: &BTreeMap<String, usize>, cap: u32) -> Result<MagnificationPlan> {
    if raw_counts.is_empty() {
        return Err(Error::InvalidArgument("empty class map".into()));
    }
    if cap == 0 || cap > MAX_MAGNIFICATION {
        return Err(Error::InvalidArgument(format!(
            "magnification cap {} outside 1..={}",
            cap, MAX_MAGNIFICATION
        )));
    }
    if let Some((c, _)) = raw_counts.iter().find(|(_, &n)| n == 0) {
        return Err(Error::InvalidArgument(format!("class `{}` has no samples", c)));
    }
    let min = *raw_counts.values().min().unwrap();
    let target = (min * (cap as usize + 1)) as f64;
    let mut per_class = BTreeMap::new();
    let mut predicted_counts = BTreeMap::new();
    for (c, &raw) in raw_counts {
        let phi = ((target / raw as f64).round() as i64 - 1).clamp(1, cap as i64) as u32;
        per_class.insert(c.clone(), phi);
        predicted_counts.insert(c.clone(), amplified_count(raw, phi));
    }
    Ok(MagnificationPlan {
        per_class,
        cap,
        predicted_counts,
    })
}

pub fn magnified_id(clip_id: &str, phi: u32) -> String {
    format!("{}__mag{}", clip_id, phi)
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).map_err(|e| Error::io(p, e))
}

/// Writes magnified copies of every record under `out_dir` and returns the
/// augmented manifest (also saved as `out_dir/manifest.jsonl`). Originals are
/// kept in place and referenced by absolute path; copies inherit the
/// source's subject and label.
pub fn build_balanced_dataset(
    manifest: &DatasetManifest,
    plan: &MagnificationPlan,
    out_dir: &Path,
    magnifier: &dyn Magnifier,
) -> Result<DatasetManifest> {
    let present = manifest.class_counts();
    for c in plan.per_class.keys() {
        if present.get(c).copied().unwrap_or(0) == 0 {
            return Err(Error::InvalidArgument(format!(
                "plan class `{}` has no records in the manifest",
                c
            )));
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let per_record: Vec<Result<Vec<ClipRecord>>> = manifest
        .records
        .par_iter()
        .map(|r| magnify_record(manifest, r, plan.per_class.get(&r.label).copied().unwrap_or(0), out_dir, magnifier))
        .collect();
    let mut out = DatasetManifest::new(manifest.label_space.clone(), manifest.frame_size, out_dir);
    for recs in per_record {
        out.records.extend(recs?);
    }
    out.validate()?;
    out.save(out_dir.join("manifest.jsonl"))?;
    Ok(out)
}

fn magnify_record(
    manifest: &DatasetManifest,
    r: &ClipRecord,
    phi_max: u32,
    out_dir: &Path,
    magnifier: &dyn Magnifier,
) -> Result<Vec<ClipRecord>> {
    let mut original = r.clone();
    original.frames_path = absolute(&manifest.resolve(r))?;
    let mut out = vec![original];
    if phi_max == 0 {
        return Ok(out);
    }
    let clip = load_clip(&manifest.resolve(r))?;
    let frames: Vec<Tensor<f32>> = (r.onset_index..=r.apex_index)
        .map(|t| clip.frame(t))
        .collect::<Result<_>>()?;
    let seq = FrameSequence::from_frames(&frames)?;
    let ctx = MagnifyContext {
        clip_id: &r.clip_id,
        ground_truth: clip.displacement.as_ref(),
    };
    for phi in 1..=phi_max {
        let mag = magnify_sequence(&seq, phi as i64, magnifier, &ctx)?;
        let id = magnified_id(&r.clip_id, phi);
        let rel = PathBuf::from("clips").join(&id);
        let copy = ClipFrames {
            frames: mag.frames,
            displacement: clip.displacement.as_ref().map(|d| d.scale(1.0 + phi as f32)),
        };
        write_clip_dir(&out_dir.join(&rel), &copy)?;
        out.push(ClipRecord {
            clip_id: id,
            frames_path: rel,
            onset_index: 0,
            apex_index: seq.len() - 1,
            magnification_factor: phi,
            ..r.clone()
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::synth::{blob_centroid, synth_generate, tracking_probe, SynthConfig};
    use crate::preprocess::OracleFlow;
    use proptest::prelude::*;

    fn counts(pairs: &[(&str, usize)]) -> BTreeMap<String, usize> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn table_rows() {
        assert_eq!(amplified_count(70, 8), 630);
        assert_eq!(amplified_count(25, 14), 375);
        assert_eq!(amplified_count(92, 3), 368);
    }

    #[test]
    fn skewed_counts_plan() {
        let p = plan_balancing(&counts(&[("negative", 70), ("positive", 51), ("surprise", 43)]), 14).unwrap();
        assert_eq!(p.per_class["negative"], 8);
        assert_eq!(p.per_class["positive"], 12);
        assert_eq!(p.per_class["surprise"], 14);
        assert_eq!(p.predicted_counts.values().copied().collect::<Vec<_>>(), vec![630, 663, 645]);
        let q = plan_balancing(&counts(&[("a", 100), ("b", 10)]), 14).unwrap();
        assert_eq!((q.per_class["a"], q.per_class["b"]), (1, 14));
        assert_eq!((q.predicted_counts["a"], q.predicted_counts["b"]), (200, 150));
        assert!(plan_balancing(&BTreeMap::new(), 14).is_err());
        assert!(plan_balancing(&counts(&[("a", 1)]), 15).is_err());
    }

    fn probe_seq(amp: f64) -> (FrameSequence, Tensor<f32>) {
        let (clip, _) = tracking_probe((32, 32), amp, (1.0, 0.0));
        let seq = FrameSequence::new(clip.frames.clone()).unwrap();
        (seq, clip.displacement.unwrap())
    }

    #[test]
    fn blob_moves_by_one_plus_phi() {
        let (seq, gt) = probe_seq(1.0);
        let mag = FlowWarpMagnifier::new(Box::new(OracleFlow));
        let ctx = MagnifyContext {
            clip_id: "probe",
            ground_truth: Some(&gt),
        };
        let c0 = blob_centroid(&seq.frame(0), 0.2);
        for phi in [0i64, 1, 2, 4] {
            let out = magnify_sequence(&seq, phi, &mag, &ctx).unwrap();
            let c1 = blob_centroid(&out.frame(1), 0.2);
            let shift = c1.1 - c0.1;
            assert!((shift - (1.0 + phi as f64)).abs() <= 0.25, "phi {}: shift {}", phi, shift);
            assert!((c1.0 - c0.0).abs() <= 0.25);
        }
        assert_eq!(magnify_sequence(&seq, 0, &mag, &ctx).unwrap(), seq);
        assert!(magnify_sequence(&seq, -1, &mag, &ctx).is_err());
    }

    #[test]
    fn static_sequence_is_unchanged() {
        let (seq, gt) = probe_seq(0.0);
        let mag = FlowWarpMagnifier::new(Box::new(OracleFlow));
        let ctx = MagnifyContext {
            clip_id: "probe",
            ground_truth: Some(&gt),
        };
        for phi in [1, 3, 14] {
            assert_eq!(magnify_sequence(&seq, phi, &mag, &ctx).unwrap(), seq);
        }
    }

    #[test]
    fn balanced_dataset_has_planned_size_and_keeps_subjects() {
        let src = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let m = synth_generate(
            src.path(),
            &SynthConfig {
                n_subjects: 2,
                clips_per_class: 1,
                class_clip_counts: Some([3, 1, 1]),
                ..Default::default()
            },
        )
        .unwrap();
        let before = m.clone();
        let plan = plan_balancing(&m.class_counts(), 4).unwrap();
        let mag = FlowWarpMagnifier::new(Box::new(OracleFlow));
        let b = build_balanced_dataset(&m, &plan, out.path(), &mag).unwrap();
        assert_eq!(m, before);
        assert_eq!(b.records.len(), plan.predicted_counts.values().sum::<usize>());
        for r in &b.records {
            let src_id = r.clip_id.split("__mag").next().unwrap();
            let orig = m.records.iter().find(|o| o.clip_id == src_id).unwrap();
            assert_eq!(r.subject_id, orig.subject_id);
            assert_eq!(r.label, orig.label);
        }
        let reloaded = crate::datamodel::load_manifest(out.path().join("manifest.jsonl")).unwrap();
        assert_eq!(reloaded.records, b.records);
        let copy = b.records.iter().find(|r| r.magnification_factor == 2).unwrap();
        let clip = load_clip(&b.resolve(copy)).unwrap();
        let orig = b.records.iter().find(|r| copy.clip_id.starts_with(&r.clip_id) && r.magnification_factor == 0).unwrap();
        let oclip = load_clip(&b.resolve(orig)).unwrap();
        assert_eq!(clip.displacement.unwrap(), oclip.displacement.unwrap().scale(3.0));
    }

    #[test]
    fn all_ones_plan_doubles_records() {
        let src = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let m = synth_generate(src.path(), &SynthConfig { n_subjects: 2, clips_per_class: 1, ..Default::default() }).unwrap();
        let m = m.filtered(|r| r.clip_id != "s02_surprise_00"); // 5 records
        let plan = MagnificationPlan {
            per_class: m.class_counts().keys().map(|k| (k.clone(), 1)).collect(),
            cap: 1,
            predicted_counts: BTreeMap::new(),
        };
        let mag = FlowWarpMagnifier::new(Box::new(OracleFlow));
        let b = build_balanced_dataset(&m, &plan, out.path(), &mag).unwrap();
        assert_eq!(b.records.len(), 2 * m.records.len());
        let alien = MagnificationPlan {
            per_class: counts(&[("disgust", 1)]).into_iter().map(|(k, _)| (k, 1)).collect(),
            cap: 1,
            predicted_counts: BTreeMap::new(),
        };
        assert!(build_balanced_dataset(&m, &alien, out.path(), &mag).is_err());
    }

    proptest! {
        #[test]
        fn plan_respects_bounds_and_reduces_imbalance(
            raw in proptest::collection::vec(1usize..400, 1..6),
            cap in 1u32..=14,
        ) {
            let map: BTreeMap<String, usize> = raw.iter().enumerate().map(|(i, &n)| (format!("c{}", i), n)).collect();
            let p = plan_balancing(&map, cap).unwrap();
            let min = *raw.iter().min().unwrap();
            for (c, &n) in &map {
                let phi = p.per_class[c];
                prop_assert!((1..=cap).contains(&phi));
                prop_assert_eq!(p.predicted_counts[c], n * (phi as usize + 1));
                if n == min {
                    prop_assert_eq!(phi, cap);
                }
            }
            let ratio = |v: Vec<usize>| *v.iter().max().unwrap() as f64 / *v.iter().min().unwrap() as f64;
            let before = ratio(raw.clone());
            let after = ratio(p.predicted_counts.values().copied().collect());
            prop_assert!(after <= before + 1e-12, "raw {:?} → {:?}", raw, p.predicted_counts);
            let distinct: std::collections::BTreeSet<u32> = p.per_class.values().copied().collect();
            if distinct.len() > 1 {
                prop_assert!(after < before, "raw {:?} → {:?}", raw, p.predicted_counts);
            }
        }
    }
}
