//! Dataset manifests, label spaces, tensor container I/O and the synthetic corpus.

pub mod container;
pub mod frames;
pub mod manifest;
pub mod synth;

pub use container::{read_tensor, write_tensor, TensorContainer};
pub use frames::{load_clip, write_clip_dir, ClipFrames};
pub use manifest::{load_manifest, ClipRecord, DatasetManifest, LabelSpace, Task, MAX_MAGNIFICATION};
pub use synth::{synth_generate, SynthConfig};
