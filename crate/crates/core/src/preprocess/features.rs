//! In-memory and on-disk cache of fused features keyed by clip id.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use super::{preprocess_clip, Preprocessor};
use crate::datamodel::container::{read_tensor, write_tensor, TensorContainer};
use crate::datamodel::manifest::DatasetManifest;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureSet {
    map: BTreeMap<String, Tensor<f32>>,
}

impl FeatureSet {
    /// Preprocesses every record of `manifest`.
    pub fn compute(manifest: &DatasetManifest, pre: &Preprocessor) -> Result<Self> {
        let items: Vec<Result<(String, Tensor<f32>)>> = manifest
            .records
            .par_iter()
            .map(|r| preprocess_clip(r, &manifest.resolve(r), pre).map(|f| (f.clip_id, f.tensor)))
            .collect();
        let mut map = BTreeMap::new();
        for it in items {
            let (k, v) = it?;
            map.insert(k, v);
        }
        Ok(Self { map })
    }

    pub fn insert(&mut self, clip_id: String, t: Tensor<f32>) {
        self.map.insert(clip_id, t);
    }

    pub fn get(&self, clip_id: &str) -> Result<&Tensor<f32>> {
        self.map
            .get(clip_id)
            .ok_or_else(|| Error::InsufficientData(format!("no features for clip `{}`", clip_id)))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<f32>)> {
        self.map.iter()
    }

    pub fn merge(&mut self, other: FeatureSet) {
        self.map.extend(other.map);
    }

    /// Writes `<dir>/<clip_id>.mef` per clip.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (id, t) in &self.map {
            let c = TensorContainer::new(&["channel", "time", "height", "width"], t.clone())?;
            write_tensor(&c, dir.join(format!("{}.mef", id)))?;
        }
        Ok(())
    }

    /// Reads the features of every record in `manifest` from `dir`.
    pub fn load(dir: &Path, manifest: &DatasetManifest) -> Result<Self> {
        let mut map = BTreeMap::new();
        for r in &manifest.records {
            let c = read_tensor(dir.join(format!("{}.mef", r.clip_id)))?;
            map.insert(r.clip_id.clone(), c.tensor);
        }
        Ok(Self { map })
    }
}
