//! Prior-learning stages: triplet training of the generic encoder (GFE) and
//! supervised training of the advanced encoder (AFE) on the balanced,
//! motion-magnified set.

pub mod optim;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::backbone::{backbone_forward, batch, bind, EncoderParameters, OutputMode, Provenance};
use crate::datamodel::manifest::{ClipRecord, DatasetManifest};
use crate::error::{Error, Result};
use crate::preprocess::FeatureSet;
use crate::tensor::Tensor;
pub use optim::{Sgd, SgdConfig, StepSchedule};

/// `‖a − b‖₂`.
pub fn euclidean_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("distance between {} and {} dims", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// `max(d(a,p)² − d(a,n)² + α, 0)` for one triplet.
pub fn triplet_loss(a: &[f64], p: &[f64], n: &[f64], alpha: f64) -> Result<f64> {
    if alpha <= 0.0 {
        return Err(Error::InvalidArgument(format!("margin {} must be positive", alpha)));
    }
    let dp = euclidean_distance(a, p)?;
    let dn = euclidean_distance(a, n)?;
    Ok((dp * dp - dn * dn + alpha).max(0.0))
}

/// Clip ids consumed by gradient computations, tagged with the stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditLog {
    pub entries: Vec<(String, String)>,
}

impl AuditLog {
    pub fn record(&mut self, stage: &str, clip_id: &str) {
        self.entries.push((stage.to_string(), clip_id.to_string()));
    }

    pub fn clip_ids(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|(_, c)| c.as_str()).collect()
    }

    pub fn extend(&mut self, other: AuditLog) {
        self.entries.extend(other.entries);
    }
}

/// Errors when any record belongs to the held-out subject.
pub fn guard_leakage(records: &[ClipRecord], held_out: Option<&str>) -> Result<()> {
    if let Some(s) = held_out {
        if let Some(r) = records.iter().find(|r| r.subject_id == s) {
            return Err(Error::Leakage {
                clip_id: r.clip_id.clone(),
                subject: s.to_string(),
            });
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: String,
    pub positive: String,
    pub negative: String,
}

/// Up to `batch_size` uniformly drawn valid triplets with distinct anchors.
pub fn sample_triplets(records: &[ClipRecord], batch_size: usize, rng: &mut impl Rng) -> Result<Vec<Triplet>> {
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_class.entry(r.label.as_str()).or_default().push(i);
    }
    if by_class.len() < 2 || by_class.values().all(|v| v.len() < 2) {
        return Err(Error::InsufficientData(
            "triplets need two classes and a class with two samples".into(),
        ));
    }
    let mut eligible: Vec<usize> = (0..records.len())
        .filter(|&i| by_class[records[i].label.as_str()].len() >= 2)
        .collect();
    eligible.shuffle(rng);
    eligible.truncate(batch_size);
    let out = eligible
        .into_iter()
        .map(|a| {
            let label = records[a].label.as_str();
            let same = &by_class[label];
            let p = loop {
                let c = same[rng.gen_range(0..same.len())];
                if c != a {
                    break c;
                }
            };
            let others: Vec<usize> = (0..records.len()).filter(|&i| records[i].label != label).collect();
            let n = others[rng.gen_range(0..others.len())];
            Triplet {
                anchor: records[a].clip_id.clone(),
                positive: records[p].clip_id.clone(),
                negative: records[n].clip_id.clone(),
            }
        })
        .collect();
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Gfe,
    Afe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    /// Triplet batches per GFE epoch; AFE epochs are full passes.
    #[serde(default)]
    pub batches_per_epoch: Option<usize>,
    pub sgd: SgdConfig,
    #[serde(default)]
    pub schedule: Option<StepSchedule>,
    pub margin: f64,
    pub seed: u64,
    /// Held-out subject; any of its clips in the training data is an error.
    #[serde(default)]
    pub fold: Option<String>,
}

impl TrainConfig {
    pub fn gfe() -> Self {
        Self {
            stage: Stage::Gfe,
            epochs: 60,
            batch_size: 128,
            batches_per_epoch: None,
            sgd: SgdConfig {
                clip_norm: Some(1.0),
                ..SgdConfig::default()
            },
            schedule: None,
            margin: 0.2,
            seed: 0,
            fold: None,
        }
    }

    pub fn afe() -> Self {
        Self {
            stage: Stage::Afe,
            epochs: 80,
            batch_size: 32,
            batches_per_epoch: None,
            sgd: SgdConfig {
                lr: 0.001,
                ..SgdConfig::default()
            },
            schedule: Some(StepSchedule {
                step_epochs: 10,
                factor: 0.1,
            }),
            margin: 0.2,
            seed: 0,
            fold: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.sgd;
        if self.epochs == 0 || self.batch_size == 0 || s.lr <= 0.0 || s.momentum < 0.0 || s.weight_decay < 0.0 {
            return Err(Error::InvalidArgument("training hyperparameters must be positive".into()));
        }
        if self.stage == Stage::Gfe && self.margin <= 0.0 {
            return Err(Error::InvalidArgument("triplet margin must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match &self.schedule {
            Some(s) => s.lr_at(self.sgd.lr, epoch),
            None => self.sgd.lr,
        }
    }
}

fn check_finite(loss: f32, stage: &str, epoch: usize, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!(
            "{} loss became {} at epoch {} batch {}",
            stage, loss, epoch, step
        )))
    }
}

fn check_finite_tensor(t: &Tensor<f32>, stage: &str, epoch: usize, step: usize) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!(
            "{} embeddings became non-finite at epoch {} batch {}",
            stage, epoch, step
        )))
    }
}

fn trainable(grads: BTreeMap<String, Tensor<f32>>) -> BTreeMap<String, Tensor<f32>> {
    grads
        .into_iter()
        .filter(|(n, _)| EncoderParameters::is_trainable(n))
        .collect()
}

fn prepare(init: &EncoderParameters, records: &[ClipRecord], features: &FeatureSet) -> Result<EncoderParameters> {
    let mut enc = init.clone();
    if enc.config.output_mode != OutputMode::Embedding {
        return Err(Error::InvalidArgument("pretraining needs an embedding-mode encoder".into()));
    }
    let feats: Vec<&Tensor<f32>> = records.iter().map(|r| features.get(&r.clip_id)).collect::<Result<_>>()?;
    enc.fit_input_stats(feats)?;
    Ok(enc)
}

/// Shared-weight triplet training. Returns the convolutional stage of the
/// trained encoder.
pub fn train_gfe(
    manifest: &DatasetManifest,
    features: &FeatureSet,
    init: &EncoderParameters,
    cfg: &TrainConfig,
    audit: &mut AuditLog,
) -> Result<EncoderParameters> {
    cfg.validate()?;
    guard_leakage(&manifest.records, cfg.fold.as_deref())?;
    let records = &manifest.records;
    let mut enc = prepare(init, records, features)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg.sgd.clone());
    let per_epoch = cfg
        .batches_per_epoch
        .unwrap_or_else(|| records.len().div_ceil(cfg.batch_size))
        .max(1);
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut total = 0f64;
        for step in 0..per_epoch {
            let triplets = sample_triplets(records, cfg.batch_size, &mut rng)?;
            let b = triplets.len();
            let mut ids: Vec<&str> = triplets.iter().map(|t| t.anchor.as_str()).collect();
            ids.extend(triplets.iter().map(|t| t.positive.as_str()));
            ids.extend(triplets.iter().map(|t| t.negative.as_str()));
            let xs: Vec<&Tensor<f32>> = ids.iter().map(|id| features.get(id)).collect::<Result<_>>()?;
            let mut g = Graph::<f32>::new();
            let bound = bind(&mut g, &enc, true)?;
            let x = g.input(batch(&xs)?);
            let emb = backbone_forward(&mut g, &bound, &enc.config, x)?;
            check_finite_tensor(g.value(emb), "gfe", epoch, step)?;
            let a = g.narrow(emb, 0, 0, b)?;
            let p = g.narrow(emb, 0, b, b)?;
            let n = g.narrow(emb, 0, 2 * b, b)?;
            let loss = g.triplet(a, p, n, cfg.margin as f32)?;
            let lv = g.value(loss).data()[0];
            check_finite(lv, "triplet", epoch, step)?;
            let grads = trainable(bound.gradients(&g.backward(loss)?));
            opt.step(&mut enc.params, &grads, lr);
            for id in &ids {
                audit.record("gfe", id);
            }
            total += lv as f64;
        }
        let mean = total / per_epoch as f64;
        log::info!("gfe epoch {} lr {:.2e} loss {:.5}", epoch, lr, mean);
        epoch_loss.push(mean);
    }
    enc.provenance = Provenance::GfePretrained;
    enc.training_meta = serde_json::json!({
        "stage": "gfe",
        "epochs": cfg.epochs,
        "margin": cfg.margin,
        "seed": cfg.seed,
        "epoch_loss": epoch_loss,
    });
    Ok(enc.conv_stage())
}

/// Cross-entropy training with a linear classification head over the
/// embedding. Returns the encoder; the classification head is discarded.
pub fn train_afe(
    manifest: &DatasetManifest,
    features: &FeatureSet,
    init: &EncoderParameters,
    cfg: &TrainConfig,
    audit: &mut AuditLog,
) -> Result<EncoderParameters> {
    cfg.validate()?;
    guard_leakage(&manifest.records, cfg.fold.as_deref())?;
    let records = &manifest.records;
    let n_classes = manifest.label_space.len();
    let counts = manifest.class_counts();
    if let Some(c) = manifest.label_space.classes.iter().find(|c| counts.get(*c).copied().unwrap_or(0) == 0) {
        return Err(Error::InsufficientData(format!("class `{}` absent from the training split", c)));
    }
    let mut enc = prepare(init, records, features)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let e = enc.config.embedding_dim;
    let std = (1.0 / e as f64).sqrt();
    let dist = rand_distr::Normal::new(0.0, std).expect("positive std");
    let mut head = BTreeMap::from([
        (
            "cls.weight".to_string(),
            Tensor::from_fn(&[n_classes, e], |_| rand_distr::Distribution::sample(&dist, &mut rng) as f32),
        ),
        ("cls.bias".to_string(), Tensor::zeros(&[n_classes])),
    ]);
    let mut opt = Sgd::new(cfg.sgd.clone());
    let mut head_opt = Sgd::new(cfg.sgd.clone());
    let labels: Vec<usize> = records.iter().map(|r| manifest.label_index(r)).collect();
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut epoch_loss = Vec::new();
    let mut epoch_acc = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut total, mut correct) = (0f64, 0usize);
        let steps = order.len().div_ceil(cfg.batch_size);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let xs: Vec<&Tensor<f32>> = chunk
                .iter()
                .map(|&i| features.get(&records[i].clip_id))
                .collect::<Result<_>>()?;
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::<f32>::new();
            let bound = bind(&mut g, &enc, true)?;
            let hw = g.param(head["cls.weight"].clone());
            let hb = g.param(head["cls.bias"].clone());
            let x = g.input(batch(&xs)?);
            let emb = backbone_forward(&mut g, &bound, &enc.config, x)?;
            check_finite_tensor(g.value(emb), "afe", epoch, step)?;
            let logits = g.linear(emb, hw, Some(hb))?;
            let loss = g.cross_entropy(logits, &ys)?;
            let lv = g.value(loss).data()[0];
            check_finite(lv, "afe", epoch, step)?;
            let lg = g.value(logits);
            for (r, &y) in ys.iter().enumerate() {
                let row = &lg.data()[r * n_classes..(r + 1) * n_classes];
                let pred = argmax(row);
                correct += usize::from(pred == y);
            }
            let mut grads = g.backward(loss)?;
            let head_grads = BTreeMap::from([
                ("cls.weight".to_string(), grads.take(hw).expect("head grad")),
                ("cls.bias".to_string(), grads.take(hb).expect("head grad")),
            ]);
            let enc_grads = trainable(bound.gradients(&grads));
            opt.step(&mut enc.params, &enc_grads, lr);
            head_opt.step(&mut head, &head_grads, lr);
            for &i in chunk {
                audit.record("afe", &records[i].clip_id);
            }
            total += lv as f64 * chunk.len() as f64;
        }
        let loss = total / records.len() as f64;
        let acc = correct as f64 / records.len() as f64;
        log::info!("afe epoch {} lr {:.2e} loss {:.5} acc {:.3} ({} batches)", epoch, lr, loss, acc, steps);
        epoch_loss.push(loss);
        epoch_acc.push(acc);
    }
    enc.provenance = Provenance::AfePretrained;
    enc.training_meta = serde_json::json!({
        "stage": "afe",
        "epochs": cfg.epochs,
        "seed": cfg.seed,
        "epoch_loss": epoch_loss,
        "epoch_accuracy": epoch_acc,
    });
    Ok(enc)
}

/// Index of the largest value; the first wins ties.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests;
