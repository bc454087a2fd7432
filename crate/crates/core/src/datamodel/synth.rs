//! Deterministic synthetic micro-motion corpus.
//!
//! Every clip is an `(onset, apex)` pair rendered from a smooth per-subject
//! texture. The apex frame displaces one facial region, and the region plus
//! direction encode the class:
//!
//! * `negative`: both brow regions shift down,
//! * `positive`: both mouth corners shift outward,
//! * `surprise`: both brow regions shift up.
//!
//! Appearance carries no class information. The per-pixel displacement field
//! is stored next to the frames so flow estimators can be scored against it.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::frames::{write_clip_dir, ClipFrames};
use crate::datamodel::manifest::{ClipRecord, DatasetManifest, LabelSpace, CDE3_CLASSES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_subjects: usize,
    pub clips_per_class: usize,
    /// Per-class override of `clips_per_class` in `negative, positive, surprise` order.
    #[serde(default)]
    pub class_clip_counts: Option<[usize; 3]>,
    /// `(height, width)`.
    pub frame_size: (usize, usize),
    /// Peak displacement in pixels at each moving region's centre.
    pub motion_amplitude: f64,
    /// Integer pixel jitter of region centres per clip.
    #[serde(default)]
    pub center_jitter: usize,
    /// Class-uninformative motion bumps added away from the class regions.
    #[serde(default)]
    pub distractors: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_subjects: 4,
            clips_per_class: 5,
            class_clip_counts: None,
            frame_size: (32, 32),
            motion_amplitude: 1.0,
            center_jitter: 0,
            distractors: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 2 {
            return Err(Error::InvalidArgument("need at least 2 subjects".into()));
        }
        if self.frame_size.0 < 32 || self.frame_size.1 < 32 {
            return Err(Error::InvalidArgument("frame size must be at least 32x32".into()));
        }
        if self.motion_amplitude != 0.0 && self.motion_amplitude < 0.5 {
            return Err(Error::InvalidArgument(
                "motion amplitude must be 0 or at least 0.5 px".into(),
            ));
        }
        Ok(())
    }

    pub fn counts(&self) -> [usize; 3] {
        self.class_clip_counts.unwrap_or([self.clips_per_class; 3])
    }
}

/// One moving region: centre `(row, col)`, unit direction `(u, v)` and radii.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionRegion {
    pub center: (f64, f64),
    pub direction: (f64, f64),
    pub amplitude: f64,
    /// Radius of the rigid plateau.
    pub inner: f64,
    /// Radius where the displacement reaches zero.
    pub outer: f64,
}

impl MotionRegion {
    fn weight(&self, row: f64, col: f64) -> f64 {
        let r = ((row - self.center.0).powi(2) + (col - self.center.1).powi(2)).sqrt();
        if r <= self.inner {
            1.0
        } else if r >= self.outer {
            0.0
        } else {
            0.5 * (1.0 + (std::f64::consts::PI * (r - self.inner) / (self.outer - self.inner)).cos())
        }
    }

    /// Displacement `(u, v)` at a pixel.
    pub fn displacement(&self, row: f64, col: f64) -> (f64, f64) {
        let w = self.weight(row, col) * self.amplitude;
        (w * self.direction.0, w * self.direction.1)
    }
}

/// Class-defining regions for a frame size, before jitter.
pub fn class_regions(class: usize, frame_size: (usize, usize), amplitude: f64) -> Vec<MotionRegion> {
    let (h, w) = (frame_size.0 as f64, frame_size.1 as f64);
    let m = h.min(w);
    let (inner, outer) = (0.07 * m, 0.16 * m);
    let at = |fr: f64, fc: f64, dir: (f64, f64)| MotionRegion {
        center: ((fr * h).round(), (fc * w).round()),
        direction: dir,
        amplitude,
        inner,
        outer,
    };
    match class {
        0 => vec![at(0.30, 0.32, (0.0, 1.0)), at(0.30, 0.68, (0.0, 1.0))],
        1 => vec![at(0.72, 0.34, (-1.0, 0.0)), at(0.72, 0.66, (1.0, 0.0))],
        _ => vec![at(0.30, 0.32, (0.0, -1.0)), at(0.30, 0.68, (0.0, -1.0))],
    }
}

/// Smooth RGB texture evaluated at continuous coordinates.
#[derive(Clone, Debug)]
pub struct Texture {
    blobs: Vec<((f64, f64), f64, [f64; 3])>,
    waves: Vec<((f64, f64), f64, [f64; 3])>,
    base: [f64; 3],
}

impl Texture {
    pub fn random(rng: &mut impl Rng, frame_size: (usize, usize)) -> Self {
        let (h, w) = (frame_size.0 as f64, frame_size.1 as f64);
        let m = h.min(w);
        let blobs = (0..24)
            .map(|_| {
                let c = (rng.gen_range(0.0..h), rng.gen_range(0.0..w));
                let s = rng.gen_range(0.04..0.12) * m;
                let a = [
                    rng.gen_range(-0.25..0.25),
                    rng.gen_range(-0.25..0.25),
                    rng.gen_range(-0.25..0.25),
                ];
                (c, s, a)
            })
            .collect();
        let waves = (0..3)
            .map(|_| {
                let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
                let k = rng.gen_range(0.15..0.45);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                let a = [
                    rng.gen_range(0.02..0.08),
                    rng.gen_range(0.02..0.08),
                    rng.gen_range(0.02..0.08),
                ];
                ((k * theta.cos(), k * theta.sin()), phase, a)
            })
            .collect();
        let base = [
            rng.gen_range(0.45..0.6),
            rng.gen_range(0.35..0.5),
            rng.gen_range(0.3..0.45),
        ];
        Self { blobs, waves, base }
    }

    /// Flat texture of a single colour.
    pub fn flat(value: f64) -> Self {
        Self {
            blobs: Vec::new(),
            waves: Vec::new(),
            base: [value; 3],
        }
    }

    pub fn with_blob(mut self, center: (f64, f64), sigma: f64, amplitude: f64) -> Self {
        self.blobs.push((center, sigma, [amplitude; 3]));
        self
    }

    pub fn sample(&self, row: f64, col: f64) -> [f64; 3] {
        let mut v = self.base;
        for &((r, c), s, a) in &self.blobs {
            let g = (-((row - r).powi(2) + (col - c).powi(2)) / (2.0 * s * s)).exp();
            for k in 0..3 {
                v[k] += a[k] * g;
            }
        }
        for &((kr, kc), ph, a) in &self.waves {
            let s = (kr * row + kc * col + ph).sin();
            for k in 0..3 {
                v[k] += a[k] * s;
            }
        }
        v.map(|x| x.clamp(0.0, 1.0))
    }
}

/// Renders onset and apex frames plus the displacement field for the given regions.
/// The apex samples the texture at `x − δ(x)`, so content moves by `δ`.
pub fn render_clip(
    texture: &Texture,
    frame_size: (usize, usize),
    regions: &[MotionRegion],
    brightness: f64,
) -> ClipFrames {
    let (h, w) = frame_size;
    let mut onset = vec![0f32; 3 * h * w];
    let mut apex = vec![0f32; 3 * h * w];
    let mut disp = vec![0f32; 2 * h * w];
    for r in 0..h {
        for c in 0..w {
            let (rf, cf) = (r as f64, c as f64);
            let (mut u, mut v) = (0.0, 0.0);
            for reg in regions {
                let (du, dv) = reg.displacement(rf, cf);
                u += du;
                v += dv;
            }
            let a = texture.sample(rf, cf);
            let b = if u == 0.0 && v == 0.0 { a } else { texture.sample(rf - v, cf - u) };
            let i = r * w + c;
            for k in 0..3 {
                onset[k * h * w + i] = (a[k] + brightness).clamp(0.0, 1.0) as f32;
                apex[k * h * w + i] = (b[k] + brightness).clamp(0.0, 1.0) as f32;
            }
            disp[i] = u as f32;
            disp[h * w + i] = v as f32;
        }
    }
    let onset = Tensor::from_vec(&[3, h, w], onset).expect("frame shape");
    let apex = Tensor::from_vec(&[3, h, w], apex).expect("frame shape");
    let disp = Tensor::from_vec(&[2, h, w], disp).expect("flow shape");
    ClipFrames::from_pair(&onset, &apex, Some(disp)).expect("pair shape")
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Clip frames for one synthetic record, regenerated from the config alone.
fn synth_clip(cfg: &SynthConfig, subject: usize, class: usize, k: usize) -> ClipFrames {
    let mut srng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, subject as u64 + 1, 0));
    let texture = Texture::random(&mut srng, cfg.frame_size);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, subject as u64 + 1, (class * 10_000 + k + 1) as u64));
    let j = cfg.center_jitter as i64;
    let (dr, dc) = if j > 0 {
        (rng.gen_range(-j..=j) as f64, rng.gen_range(-j..=j) as f64)
    } else {
        (0.0, 0.0)
    };
    let mut regions: Vec<MotionRegion> = class_regions(class, cfg.frame_size, cfg.motion_amplitude)
        .into_iter()
        .map(|mut r| {
            r.center = (r.center.0 + dr, r.center.1 + dc);
            r
        })
        .collect();
    let (h, w) = (cfg.frame_size.0 as f64, cfg.frame_size.1 as f64);
    let class_regs = regions.clone();
    let mut placed = 0;
    let mut attempts = 0;
    while placed < cfg.distractors && attempts < 200 {
        attempts += 1;
        let m = h.min(w);
        let reg = MotionRegion {
            center: (rng.gen_range(0.0..h).round(), rng.gen_range(0.0..w).round()),
            direction: {
                let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                (a.cos(), a.sin())
            },
            amplitude: cfg.motion_amplitude * rng.gen_range(0.5..1.0),
            inner: 0.05 * m,
            outer: 0.12 * m,
        };
        let clear = class_regs.iter().chain(regions[class_regs.len()..].iter()).all(|c| {
            let d = ((c.center.0 - reg.center.0).powi(2) + (c.center.1 - reg.center.1).powi(2)).sqrt();
            d > c.outer + reg.outer
        });
        if clear {
            regions.push(reg);
            placed += 1;
        }
    }
    let brightness = rng.gen_range(-0.05..0.05);
    render_clip(&texture, cfg.frame_size, &regions, brightness)
}

pub fn clip_id(subject: usize, class: usize, k: usize) -> String {
    format!("s{:02}_{}_{:02}", subject + 1, CDE3_CLASSES[class], k)
}

pub fn subject_id(subject: usize) -> String {
    format!("s{:02}", subject + 1)
}

/// Writes the corpus under `out_dir` and returns its manifest (also saved as
/// `out_dir/manifest.jsonl`).
pub fn synth_generate(out_dir: &Path, cfg: &SynthConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = DatasetManifest::new(LabelSpace::cde3(), cfg.frame_size, out_dir);
    let counts = cfg.counts();
    for s in 0..cfg.n_subjects {
        for (class, &count) in counts.iter().enumerate() {
            for k in 0..count {
                let id = clip_id(s, class, k);
                let rel = PathBuf::from("clips").join(&id);
                write_clip_dir(&out_dir.join(&rel), &synth_clip(cfg, s, class, k))?;
                manifest.records.push(ClipRecord {
                    clip_id: id,
                    subject_id: subject_id(s),
                    label: CDE3_CLASSES[class].to_string(),
                    frames_path: rel,
                    onset_index: 0,
                    apex_index: 1,
                    source_dataset: "synthetic".into(),
                    magnification_factor: 0,
                });
            }
        }
    }
    manifest.validate()?;
    manifest.save(out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// Flat grey clip with one Gaussian blob centred in a rigid plateau that moves
/// by `amplitude` along `direction`. Used for displacement tracking checks.
pub fn tracking_probe(frame_size: (usize, usize), amplitude: f64, direction: (f64, f64)) -> (ClipFrames, MotionRegion) {
    let (h, w) = (frame_size.0 as f64, frame_size.1 as f64);
    let center = ((h / 2.0).round(), (w / 2.0).round());
    let region = MotionRegion {
        center,
        direction,
        amplitude,
        inner: 0.2 * h.min(w),
        outer: 0.3 * h.min(w),
    };
    let texture = Texture::flat(0.2).with_blob(center, 1.5, 0.6);
    (render_clip(&texture, frame_size, &[region], 0.0), region)
}

/// Intensity-weighted centroid `(row, col)` of `frame − background` on channel 0.
pub fn blob_centroid(frame: &Tensor<f32>, background: f32) -> (f64, f64) {
    let (h, w) = (frame.dim(1), frame.dim(2));
    let (mut m, mut sr, mut sc) = (0.0, 0.0, 0.0);
    for r in 0..h {
        for c in 0..w {
            let v = (frame.data()[r * w + c] - background).max(0.0) as f64;
            m += v;
            sr += v * r as f64;
            sc += v * c as f64;
        }
    }
    (sr / m, sc / m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::frames::load_clip;
    use crate::datamodel::manifest::load_manifest;
    use std::collections::BTreeSet;

    #[test]
    fn counts_and_balance() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            seed: 7,
            n_subjects: 4,
            clips_per_class: 5,
            ..Default::default()
        };
        let m = synth_generate(dir.path(), &cfg).unwrap();
        assert_eq!(m.records.len(), 4 * 5 * 3);
        assert!(m.class_counts().values().all(|&c| c == 20));
    }

    #[test]
    fn sixteen_subjects_are_discoverable() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_subjects: 16,
            clips_per_class: 1,
            ..Default::default()
        };
        synth_generate(dir.path(), &cfg).unwrap();
        let m = load_manifest(dir.path().join("manifest.jsonl")).unwrap();
        let subjects: BTreeSet<_> = m.records.iter().map(|r| r.subject_id.clone()).collect();
        assert_eq!(subjects.len(), 16);
        assert_eq!(m.subjects().len(), 16);
    }

    #[test]
    fn zero_motion_gives_identical_frames() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            motion_amplitude: 0.0,
            n_subjects: 2,
            clips_per_class: 1,
            ..Default::default()
        };
        let m = synth_generate(dir.path(), &cfg).unwrap();
        for r in &m.records {
            let clip = load_clip(&m.resolve(r)).unwrap();
            assert_eq!(clip.frame(0).unwrap(), clip.frame(1).unwrap());
        }
    }

    #[test]
    fn generation_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_subjects: 2,
            clips_per_class: 2,
            center_jitter: 2,
            distractors: 1,
            ..Default::default()
        };
        synth_generate(a.path(), &cfg).unwrap();
        synth_generate(b.path(), &cfg).unwrap();
        for entry in walk(a.path()) {
            let rel = entry.strip_prefix(a.path()).unwrap();
            let other = b.path().join(rel);
            if rel.to_str() == Some("manifest.jsonl") {
                continue; // embeds the output root only through relative paths
            }
            assert_eq!(std::fs::read(&entry).unwrap(), std::fs::read(other).unwrap(), "{:?}", rel);
        }
        assert_eq!(
            std::fs::read(a.path().join("manifest.jsonl")).unwrap(),
            std::fs::read(b.path().join("manifest.jsonl")).unwrap()
        );
    }

    fn walk(p: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for e in std::fs::read_dir(p).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                out.extend(walk(&path));
            } else {
                out.push(path);
            }
        }
        out
    }

    #[test]
    fn displacement_peaks_at_region_centres() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_subjects: 2,
            clips_per_class: 1,
            motion_amplitude: 1.5,
            ..Default::default()
        };
        let m = synth_generate(dir.path(), &cfg).unwrap();
        for r in &m.records {
            let class = m.label_index(r);
            let clip = load_clip(&m.resolve(r)).unwrap();
            let d = clip.displacement.unwrap();
            let (h, w) = cfg.frame_size;
            for reg in class_regions(class, cfg.frame_size, cfg.motion_amplitude) {
                let (row, col) = (reg.center.0 as usize, reg.center.1 as usize);
                let u = d.data()[row * w + col] as f64;
                let v = d.data()[h * w + row * w + col] as f64;
                assert_eq!((u * u + v * v).sqrt(), 1.5);
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        for cfg in [
            SynthConfig { n_subjects: 1, ..Default::default() },
            SynthConfig { frame_size: (16, 32), ..Default::default() },
            SynthConfig { motion_amplitude: 0.2, ..Default::default() },
        ] {
            assert!(synth_generate(dir.path(), &cfg).is_err());
        }
    }
}
