//! Loading and storing the frames of one clip.
//!
//! A clip lives either in a packed `.mef` tensor of shape `(3, F, H, W)` or in
//! a directory. A directory holds `frames.mef` (same layout) or, failing
//! that, image files whose lexicographic order is the frame order. An
//! optional `displacement.mef` of shape `(2, H, W)` carries the ground-truth
//! onset→apex motion `[u, v]` in pixels for synthetic clips.

use std::fs;
use std::path::{Path, PathBuf};

use crate::datamodel::container::{read_tensor, write_tensor, TensorContainer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FRAMES_FILE: &str = "frames.mef";
pub const DISPLACEMENT_FILE: &str = "displacement.mef";

#[derive(Clone, Debug, PartialEq)]
pub struct ClipFrames {
    /// `(3, F, H, W)`, RGB in `[0, 1]`.
    pub frames: Tensor<f32>,
    /// `(2, H, W)` ground-truth onset→apex displacement, when known.
    pub displacement: Option<Tensor<f32>>,
}

impl ClipFrames {
    pub fn len(&self) -> usize {
        self.frames.dim(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame_size(&self) -> (usize, usize) {
        (self.frames.dim(2), self.frames.dim(3))
    }

    /// Frame `t` as `(3, H, W)`.
    pub fn frame(&self, t: usize) -> Result<Tensor<f32>> {
        if t >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "frame {} of a {}-frame clip",
                t,
                self.len()
            )));
        }
        self.frames.index_axis(1, t)
    }

    pub fn from_pair(onset: &Tensor<f32>, apex: &Tensor<f32>, displacement: Option<Tensor<f32>>) -> Result<Self> {
        let frames = Tensor::stack(&[onset, apex])?;
        // (2, 3, H, W) -> (3, 2, H, W)
        let (h, w) = (onset.dim(1), onset.dim(2));
        let mut data = Vec::with_capacity(frames.len());
        for c in 0..3 {
            for t in 0..2 {
                data.extend_from_slice(&frames.data()[(t * 3 + c) * h * w..(t * 3 + c + 1) * h * w]);
            }
        }
        Ok(Self {
            frames: Tensor::from_vec(&[3, 2, h, w], data)?,
            displacement,
        })
    }
}

pub fn write_clip_dir(dir: &Path, clip: &ClipFrames) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_tensor(
        &TensorContainer::new(&["channel", "frame", "height", "width"], clip.frames.clone())?,
        dir.join(FRAMES_FILE),
    )?;
    if let Some(d) = &clip.displacement {
        write_tensor(
            &TensorContainer::new(&["component", "height", "width"], d.clone())?,
            dir.join(DISPLACEMENT_FILE),
        )?;
    }
    Ok(())
}

fn check_frames(t: &Tensor<f32>, path: &Path) -> Result<()> {
    if t.ndim() != 4 || t.dim(0) != 3 {
        return Err(Error::Container(format!(
            "{} holds {:?}, expected (3, F, H, W)",
            path.display(),
            t.shape()
        )));
    }
    Ok(())
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg" | "bmp")
    )
}

fn load_image_dir(dir: &Path) -> Result<Tensor<f32>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_image(p))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Container(format!("no frames in {}", dir.display())));
    }
    let mut planes: Vec<Vec<f32>> = vec![Vec::new(); 3];
    let mut size = None;
    for f in &files {
        let img = image::open(f)
            .map_err(|e| Error::Image {
                path: f.clone(),
                message: e.to_string(),
            })?
            .to_rgb8();
        let dims = (img.height() as usize, img.width() as usize);
        if *size.get_or_insert(dims) != dims {
            return Err(Error::Shape(format!("{} has size {:?}", f.display(), dims)));
        }
        for c in 0..3 {
            planes[c].extend(img.pixels().map(|p| p.0[c] as f32 / 255.0));
        }
    }
    let (h, w) = size.unwrap_or((0, 0));
    let data = planes.concat();
    Tensor::from_vec(&[3, files.len(), h, w], data)
}

/// Loads every frame of a clip plus its ground-truth displacement, if any.
pub fn load_clip(path: &Path) -> Result<ClipFrames> {
    if path.is_file() {
        let t = read_tensor(path)?.tensor;
        check_frames(&t, path)?;
        return Ok(ClipFrames {
            frames: t,
            displacement: None,
        });
    }
    let packed = path.join(FRAMES_FILE);
    let frames = if packed.exists() {
        let t = read_tensor(&packed)?.tensor;
        check_frames(&t, &packed)?;
        t
    } else {
        load_image_dir(path)?
    };
    let disp_path = path.join(DISPLACEMENT_FILE);
    let displacement = if disp_path.exists() {
        let d = read_tensor(&disp_path)?.tensor;
        if d.shape() != [2, frames.dim(2), frames.dim(3)] {
            return Err(Error::Shape(format!(
                "displacement {:?} for frames {:?}",
                d.shape(),
                frames.shape()
            )));
        }
        Some(d)
    } else {
        None
    };
    Ok(ClipFrames {
        frames,
        displacement,
    })
}
