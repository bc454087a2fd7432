//! Per-fold training pipeline: GFE triplet pretraining, balanced AFE
//! pretraining and episodic fine-tuning of each requested model.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{Fold, FoldTrainer};
use crate::backbone::{build_backbone, BackboneConfig, EncoderParameters};
use crate::datamodel::manifest::DatasetManifest;
use crate::error::Result;
use crate::magnify::{build_balanced_dataset, plan_balancing, FlowWarpMagnifier};
use crate::metanet::{train_mpfnet, EmbeddingTable, FusionSpec, MetaConfig};
use crate::preprocess::{FeatureSet, PreprocessConfig, Preprocessor};
use crate::pretrain::{train_afe, train_gfe, AuditLog, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Episodic training from scratch, no pretrained priors.
    NoPrior,
    /// Parallel fusion of GFE and AFE.
    MpfnetP,
    /// Cascaded fusion of GFE and AFE.
    MpfnetC,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::NoPrior => "no_prior",
            Variant::MpfnetP => "mpfnet_p",
            Variant::MpfnetC => "mpfnet_c",
        }
    }

    fn needs_priors(self) -> bool {
        self != Variant::NoPrior
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub backbone: BackboneConfig,
    pub gfe: TrainConfig,
    pub afe: TrainConfig,
    pub meta: MetaConfig,
    pub magnify_cap: u32,
    pub gamma: f64,
    pub variants: Vec<Variant>,
    pub seed: u64,
    pub embed_chunk: usize,
    /// Magnified training clips are written under `<work_dir>/fold_<subject>`.
    pub work_dir: PathBuf,
}

impl PipelineConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.backbone.seed = seed;
        self.gfe.seed = seed;
        self.afe.seed = seed;
        self.meta.seed = seed;
        self
    }
}

pub struct PipelineTrainer {
    pub cfg: PipelineConfig,
    pub preprocess: PreprocessConfig,
    /// Features of every original clip of the corpus.
    pub features: FeatureSet,
}

impl PipelineTrainer {
    pub fn new(cfg: PipelineConfig, preprocess: PreprocessConfig, features: FeatureSet) -> Self {
        Self {
            cfg,
            preprocess,
            features,
        }
    }

    fn encoder(&self, offset: u64) -> Result<EncoderParameters> {
        build_backbone(&BackboneConfig {
            seed: self.cfg.backbone.seed.wrapping_add(offset),
            ..self.cfg.backbone.clone()
        })
    }

    /// GFE on the training originals and AFE on their balanced, magnified
    /// expansion.
    fn priors(
        &self,
        fold: &Fold,
        originals: &DatasetManifest,
        audit: &mut AuditLog,
    ) -> Result<(EncoderParameters, EncoderParameters)> {
        let gfe_cfg = TrainConfig {
            fold: Some(fold.test_subject.clone()),
            ..self.cfg.gfe.clone()
        };
        let gfe = train_gfe(originals, &self.features, &self.encoder(0)?, &gfe_cfg, audit)?;
        let plan = plan_balancing(&originals.class_counts(), self.cfg.magnify_cap)?;
        let out = self.cfg.work_dir.join(format!("fold_{}", fold.test_subject));
        let magnifier = FlowWarpMagnifier::new(self.preprocess.flow_port());
        let balanced = build_balanced_dataset(originals, &plan, &out, &magnifier)?;
        let pre = Preprocessor::from_config(&self.preprocess)?;
        let copies = balanced.filtered(|r| r.magnification_factor > 0);
        let mut features = FeatureSet::compute(&copies, &pre)?;
        for r in &originals.records {
            features.insert(r.clip_id.clone(), self.features.get(&r.clip_id)?.clone());
        }
        let afe_cfg = TrainConfig {
            fold: Some(fold.test_subject.clone()),
            ..self.cfg.afe.clone()
        };
        let afe = train_afe(&balanced, &features, &self.encoder(1)?, &afe_cfg, audit)?;
        Ok((gfe, afe))
    }
}

impl FoldTrainer for PipelineTrainer {
    fn train_fold(
        &mut self,
        fold: &Fold,
        train: &DatasetManifest,
        clip_ids: &[String],
        audit: &mut AuditLog,
    ) -> Result<Vec<(String, EmbeddingTable)>> {
        let originals = train.filtered(|r| r.magnification_factor == 0);
        let priors = if self.cfg.variants.iter().any(|v| v.needs_priors()) {
            Some(self.priors(fold, &originals, audit)?)
        } else {
            None
        };
        let meta = MetaConfig {
            fold: Some(fold.test_subject.clone()),
            ..self.cfg.meta.clone()
        };
        let dim = self.cfg.backbone.embedding_dim;
        let mut out = Vec::new();
        for &v in &self.cfg.variants {
            let spec = match (v, &priors) {
                (Variant::NoPrior, _) => {
                    let mut enc = self.encoder(2)?;
                    let feats: Vec<_> = originals
                        .records
                        .iter()
                        .map(|r| self.features.get(&r.clip_id))
                        .collect::<Result<_>>()?;
                    enc.fit_input_stats(feats)?;
                    FusionSpec::single(&enc, dim, self.cfg.seed)?
                }
                (Variant::MpfnetP, Some((gfe, afe))) => FusionSpec::parallel(gfe, afe, self.cfg.gamma, self.cfg.seed)?,
                (Variant::MpfnetC, Some((gfe, afe))) => FusionSpec::cascade(gfe, afe)?,
                _ => unreachable!("priors are trained whenever a fused variant is requested"),
            };
            let (trained, log) = train_mpfnet(&originals, &self.features, &spec, &meta, audit)?;
            log::info!(
                "fold {} {}: final batch loss {:.4}",
                fold.test_subject,
                v.name(),
                log.batch_loss.last().copied().unwrap_or(f64::NAN)
            );
            let table = EmbeddingTable::compute(&trained, &self.features, clip_ids, self.cfg.embed_chunk)?;
            out.push((v.name().to_string(), table));
        }
        Ok(out)
    }
}
