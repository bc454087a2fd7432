//! Episodic meta-learning with multi-prior fusion.
//!
//! Classification is nearest prototype by cosine similarity. Two pretrained
//! encoders are combined either in parallel (`d_G + γ·d_A` over the two
//! similarity vectors) or in cascade (the GFE feature map is projected,
//! upsampled and concatenated onto the AFE input).

pub mod fusion;
pub mod train;

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::manifest::ClipRecord;
use crate::error::{Error, Result};

pub use fusion::{
    adapt_afe_for_cascade, cascade_forward, default_gamma, load_fusion, save_fusion, EmbeddingTable, FusionSpec,
    FusionVariant,
};
pub use train::{train_mpfnet, MetaConfig, MetaLog};

/// One N-way K-shot task. Class indices refer to positions in `classes`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub classes: Vec<String>,
    pub support: Vec<(String, usize)>,
    pub query: Vec<(String, usize)>,
    pub shot: usize,
    pub query_per_class: usize,
}

impl Episode {
    pub fn way(&self) -> usize {
        self.classes.len()
    }

    /// Support rows of each class, ascending.
    pub fn support_groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.way()];
        for (i, (_, c)) in self.support.iter().enumerate() {
            groups[*c].push(i);
        }
        groups
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|(_, c)| *c).collect()
    }
}

fn by_class(records: &[ClipRecord]) -> BTreeMap<&str, Vec<&str>> {
    let mut m: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for r in records {
        m.entry(r.label.as_str()).or_default().push(r.clip_id.as_str());
    }
    m
}

/// Draws `n` classes uniformly, then `k + q` clips of each without
/// replacement; the first `k` form the support set.
pub fn sample_episode(records: &[ClipRecord], n: usize, k: usize, q: usize, rng: &mut impl Rng) -> Result<Episode> {
    if n < 2 || k == 0 || q == 0 {
        return Err(Error::InvalidArgument(format!(
            "episode needs N ≥ 2, K ≥ 1, Q ≥ 1 (got {}, {}, {})",
            n, k, q
        )));
    }
    let pool = by_class(records);
    if pool.len() < n {
        return Err(Error::InsufficientData(format!(
            "{}-way episode from {} classes",
            n,
            pool.len()
        )));
    }
    let names: Vec<&str> = pool.keys().copied().collect();
    let chosen: Vec<&str> = index::sample(rng, names.len(), n).iter().map(|i| names[i]).collect();
    let mut ep = Episode {
        classes: chosen.iter().map(|c| c.to_string()).collect(),
        support: Vec::with_capacity(n * k),
        query: Vec::with_capacity(n * q),
        shot: k,
        query_per_class: q,
    };
    for (ci, class) in chosen.iter().enumerate() {
        let clips = &pool[class];
        if clips.len() < k + q {
            return Err(Error::InsufficientData(format!(
                "class `{}` has {} clips, episode needs {}",
                class,
                clips.len(),
                k + q
            )));
        }
        let picks = index::sample(rng, clips.len(), k + q).into_vec();
        for (j, &i) in picks.iter().enumerate() {
            let item = (clips[i].to_string(), ci);
            if j < k {
                ep.support.push(item);
            } else {
                ep.query.push(item);
            }
        }
    }
    Ok(ep)
}

/// `k` support clips for each of `classes` (in that order), drawn without
/// replacement; classes with fewer than `k` clips contribute all of them.
pub fn sample_support(
    records: &[ClipRecord],
    classes: &[String],
    k: usize,
    rng: &mut impl Rng,
) -> Result<Vec<(String, usize)>> {
    let pool = by_class(records);
    let mut out = Vec::new();
    for (ci, class) in classes.iter().enumerate() {
        let clips = pool
            .get(class.as_str())
            .ok_or_else(|| Error::InsufficientData(format!("no support clips of class `{}`", class)))?;
        let take = k.min(clips.len());
        for i in index::sample(rng, clips.len(), take).into_vec() {
            out.push((clips[i].to_string(), ci));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub class: String,
    pub w: Vec<f64>,
}

/// Per-class arithmetic mean, summed in index-ascending order. Classes are
/// returned in order of first appearance.
pub fn compute_prototypes(embeddings: &[(Vec<f64>, String)]) -> Result<Vec<Prototype>> {
    let dim = match embeddings.first() {
        Some((e, _)) => e.len(),
        None => return Err(Error::InsufficientData("no embeddings to average".into())),
    };
    let mut order: Vec<&str> = Vec::new();
    let mut sums: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
    for (e, c) in embeddings {
        if e.len() != dim {
            return Err(Error::Shape(format!("embedding of {} dims among {}", e.len(), dim)));
        }
        let slot = sums.entry(c.as_str()).or_insert_with(|| {
            order.push(c.as_str());
            (vec![0.0; dim], 0)
        });
        slot.0.iter_mut().zip(e).for_each(|(s, v)| *s += v);
        slot.1 += 1;
    }
    Ok(order
        .into_iter()
        .map(|c| {
            let (s, n) = &sums[c];
            Prototype {
                class: c.to_string(),
                w: s.iter().map(|v| v / *n as f64).collect(),
            }
        })
        .collect())
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine of {} and {} dims", a.len(), b.len())));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// `d_G + γ·d_A` per class.
pub fn score_parallel(d_gfe: &[f64], d_afe: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("γ = {} outside [0, 1]", gamma)));
    }
    if d_gfe.len() != d_afe.len() {
        return Err(Error::Shape(format!("{} vs {} class scores", d_gfe.len(), d_afe.len())));
    }
    Ok(d_gfe.iter().zip(d_afe).map(|(g, a)| g + gamma * a).collect())
}

/// Softmax over `−d` with `d = 1 − s`.
pub fn classify_query(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.len() < 2 {
        return Err(Error::InvalidArgument(format!("{} class scores", scores.len())));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite score {}", s)));
    }
    let neg_d: Vec<f64> = scores.iter().map(|s| -(1.0 - s)).collect();
    Ok(crate::autograd::softmax(&neg_d))
}

/// Mean of `−ln p[label]`, clamping the probability at 1e−12.
pub fn episode_loss(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::Shape(format!("{} rows for {} labels", probs.len(), labels.len())));
    }
    let mut total = 0.0;
    for (row, &y) in probs.iter().zip(labels) {
        let p = *row
            .get(y)
            .ok_or_else(|| Error::InvalidArgument(format!("label {} of {} classes", y, row.len())))?;
        if p <= 1e-12 {
            log::warn!("true-class probability {} clamped to 1e-12", p);
        }
        total -= p.max(1e-12).ln();
    }
    Ok(total / probs.len() as f64)
}
