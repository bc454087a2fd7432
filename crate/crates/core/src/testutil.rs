//! Fixtures shared by unit tests.

use crate::backbone::{BackboneConfig, InceptionSpec};
use crate::datamodel::manifest::{ClipRecord, DatasetManifest};
use crate::datamodel::synth::{synth_generate, SynthConfig};
use crate::preprocess::{FeatureSet, FlowPortConfig, PreprocessConfig, Preprocessor};

pub fn corpus(cfg: &SynthConfig) -> (tempfile::TempDir, DatasetManifest, FeatureSet) {
    let dir = tempfile::tempdir().unwrap();
    let m = synth_generate(dir.path(), cfg).unwrap();
    let pre = Preprocessor::from_config(&PreprocessConfig {
        sequence_len: 11,
        flow: FlowPortConfig::Oracle,
    })
    .unwrap();
    let f = FeatureSet::compute(&m, &pre).unwrap();
    (dir, m, f)
}

pub fn small_corpus() -> (tempfile::TempDir, DatasetManifest, FeatureSet) {
    corpus(&SynthConfig {
        n_subjects: 2,
        clips_per_class: 3,
        motion_amplitude: 1.0,
        ..Default::default()
    })
}

/// Narrow backbone for fast unit tests on 32×32 inputs.
pub fn small_backbone() -> BackboneConfig {
    BackboneConfig {
        stem_channels: 4,
        inception: [
            InceptionSpec::new(4, (4, 4), (2, 2), 2),
            InceptionSpec::new(4, (4, 4), (2, 2), 2),
        ],
        embedding_dim: 16,
        ..BackboneConfig::desk()
    }
}

pub fn records(labels: &[(&str, &str)]) -> Vec<ClipRecord> {
    labels
        .iter()
        .enumerate()
        .map(|(i, (subject, label))| ClipRecord {
            clip_id: format!("c{:03}", i),
            subject_id: subject.to_string(),
            label: label.to_string(),
            frames_path: format!("c{:03}", i).into(),
            onset_index: 0,
            apex_index: 1,
            source_dataset: "t".into(),
            magnification_factor: 0,
        })
        .collect()
}
