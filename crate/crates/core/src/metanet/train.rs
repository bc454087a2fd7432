//! Episodic meta-training.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::fusion::{fused_scores, BoundFusion, FusionSpec};
use super::{sample_episode, Episode};
use crate::autograd::Graph;
use crate::backbone::batch;
use crate::datamodel::manifest::DatasetManifest;
use crate::error::{Error, Result};
use crate::preprocess::FeatureSet;
use crate::pretrain::{argmax, guard_leakage, AuditLog, Sgd, SgdConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub episodes_per_batch: usize,
    pub batches: usize,
    pub sgd: SgdConfig,
    /// Evaluate the loss without updating any parameter.
    pub freeze: bool,
    pub seed: u64,
    pub fold: Option<String>,
    /// Held-out episode accuracy is logged every this many batches (0 = never).
    pub eval_every: usize,
    pub eval_episodes: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            way: 3,
            shot: 5,
            query: 5,
            episodes_per_batch: 4,
            batches: 200,
            sgd: SgdConfig {
                lr: 0.05,
                ..SgdConfig::default()
            },
            freeze: false,
            seed: 0,
            fold: None,
            eval_every: 25,
            eval_episodes: 4,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.way < 2 || self.shot == 0 || self.query == 0 || self.episodes_per_batch == 0 {
            return Err(Error::InvalidArgument(format!(
                "meta config needs N ≥ 2 and positive K, Q, episodes per batch: {:?}",
                self
            )));
        }
        if !(self.sgd.lr > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetaLog {
    pub batch_loss: Vec<f64>,
    /// `(batch index, query accuracy)` on freshly drawn episodes.
    pub eval_accuracy: Vec<(usize, f64)>,
}

pub struct EpisodeOutcome {
    pub loss: f64,
    pub correct: usize,
    pub grads: Option<BTreeMap<String, Tensor<f32>>>,
}

/// Loss and query hits of one episode; gradients when `grad` is set.
pub fn run_episode(spec: &FusionSpec, features: &FeatureSet, ep: &Episode, grad: bool) -> Result<EpisodeOutcome> {
    let ids: Vec<&str> = ep.support.iter().chain(&ep.query).map(|(id, _)| id.as_str()).collect();
    let xs: Vec<&Tensor<f32>> = ids.iter().map(|id| features.get(id)).collect::<Result<_>>()?;
    let mut g = Graph::<f32>::new();
    let b = BoundFusion::bind(&mut g, spec, grad)?;
    let x = g.input(batch(&xs)?);
    let scores = fused_scores(&mut g, spec, &b, x, ep.support.len(), &ep.support_groups())?;
    let sv = g.value(scores);
    if !sv.all_finite() {
        return Err(Error::Divergence("episode scores became non-finite".into()));
    }
    let labels = ep.query_labels();
    let n = ep.way();
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(r, &y)| argmax(&sv.data()[r * n..(r + 1) * n]) == y)
        .count();
    let loss = g.cross_entropy(scores, &labels)?;
    let lv = g.value(loss).data()[0] as f64;
    let grads = if grad { Some(b.gradients(&g.backward(loss)?)) } else { None };
    Ok(EpisodeOutcome { loss: lv, correct, grads })
}

/// Fraction of correctly classified queries over `episodes`.
pub fn episode_accuracy(spec: &FusionSpec, features: &FeatureSet, episodes: &[Episode]) -> Result<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    for ep in episodes {
        hits += run_episode(spec, features, ep, false)?.correct;
        total += ep.query.len();
    }
    Ok(hits as f64 / total.max(1) as f64)
}

/// Fine-tunes every parameter of `spec` on episodes from `manifest`, one
/// SGD step per batch of episodes on the mean episode loss.
pub fn train_mpfnet(
    manifest: &DatasetManifest,
    features: &FeatureSet,
    spec: &FusionSpec,
    cfg: &MetaConfig,
    audit: &mut AuditLog,
) -> Result<(FusionSpec, MetaLog)> {
    cfg.validate()?;
    spec.validate()?;
    guard_leakage(&manifest.records, cfg.fold.as_deref())?;
    let records = &manifest.records;
    let mut spec = spec.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut opt = Sgd::new(cfg.sgd.clone());
    let mut log = MetaLog::default();
    let scale = 1.0 / cfg.episodes_per_batch as f32;
    for step in 0..cfg.batches {
        let mut total = 0.0;
        let mut acc: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        for _ in 0..cfg.episodes_per_batch {
            let ep = sample_episode(records, cfg.way, cfg.shot, cfg.query, &mut rng)?;
            let out = run_episode(&spec, features, &ep, !cfg.freeze)?;
            if !out.loss.is_finite() {
                return Err(Error::Divergence(format!("episode loss {} at batch {}", out.loss, step)));
            }
            total += out.loss;
            if let Some(grads) = out.grads {
                for (n, gt) in grads {
                    match acc.get_mut(&n) {
                        Some(a) => a.axpy(scale, &gt),
                        None => {
                            acc.insert(n, gt.scale(scale));
                        }
                    }
                }
                for (id, _) in ep.support.iter().chain(&ep.query) {
                    audit.record("meta", id);
                }
            }
        }
        if !cfg.freeze {
            let mut params = spec.trainable_params();
            opt.step(&mut params, &acc, cfg.sgd.lr);
            if params.values().any(|t| !t.all_finite()) {
                return Err(Error::Divergence(format!("parameters became non-finite at batch {}", step)));
            }
            spec.set_trainable_params(params);
        }
        let mean = total / cfg.episodes_per_batch as f64;
        log::info!("meta batch {} loss {:.5}", step, mean);
        log.batch_loss.push(mean);
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            let eps: Vec<Episode> = (0..cfg.eval_episodes)
                .map(|_| sample_episode(records, cfg.way, cfg.shot, cfg.query, &mut eval_rng))
                .collect::<Result<_>>()?;
            let a = episode_accuracy(&spec, features, &eps)?;
            log::info!("meta batch {} held-out episode accuracy {:.3}", step, a);
            log.eval_accuracy.push((step, a));
        }
    }
    spec.training_meta = serde_json::json!({
        "stage": "meta",
        "variant": spec.variant,
        "seed": cfg.seed,
        "batches": cfg.batches,
        "batch_loss": log.batch_loss,
        "eval_accuracy": log.eval_accuracy,
    });
    Ok((spec, log))
}
