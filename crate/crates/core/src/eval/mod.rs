//! Leave-one-subject-out evaluation, confusion matrices and the unweighted
//! metric suite.

pub mod pipeline;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::manifest::{ClipRecord, DatasetManifest};
use crate::error::{Error, Result};
use crate::metanet::{classify_query, sample_support, EmbeddingTable};
use crate::pretrain::{argmax, AuditLog};

pub use pipeline::{PipelineConfig, PipelineTrainer, Variant};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub test_subject: String,
    pub train_subjects: Vec<String>,
}

impl Fold {
    /// `(train, test)` manifests; magnified copies follow their subject.
    pub fn split(&self, manifest: &DatasetManifest) -> (DatasetManifest, DatasetManifest) {
        (
            manifest.filtered(|r| r.subject_id != self.test_subject),
            manifest.filtered(|r| r.subject_id == self.test_subject),
        )
    }
}

/// One fold per distinct subject, in sorted subject order.
pub fn loso_split(manifest: &DatasetManifest) -> Result<Vec<Fold>> {
    let subjects = manifest.subjects();
    if subjects.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "LOSO needs at least 2 subjects, found {}",
            subjects.len()
        )));
    }
    Ok(subjects
        .iter()
        .map(|s| Fold {
            test_subject: s.clone(),
            train_subjects: subjects.iter().filter(|t| *t != s).cloned().collect(),
        })
        .collect())
}

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: &[String]) -> Self {
        Self {
            classes: classes.to_vec(),
            counts: vec![vec![0; classes.len()]; classes.len()],
        }
    }

    fn index(&self, label: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    pub fn record(&mut self, truth: &str, predicted: &str) -> Result<()> {
        let (t, p) = (self.index(truth)?, self.index(predicted)?);
        self.counts[t][p] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn add(&mut self, other: &Self) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::InvalidArgument("confusion matrices over different classes".into()));
        }
        for (a, b) in self.counts.iter_mut().flatten().zip(other.counts.iter().flatten()) {
            *a += b;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["true\\predicted".to_string()];
        header.extend(self.classes.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for (c, row) in self.classes.iter().zip(&self.counts) {
            let mut rec = vec![c.clone()];
            rec.extend(row.iter().map(u64::to_string));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("utf-8 csv"))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("csv: {}", e))
}

pub fn confusion_from_predictions(classes: &[String], preds: &[(String, String)]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::zeros(classes);
    for (t, p) in preds {
        cm.record(t, p)?;
    }
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub support: u64,
    /// Per-class recall `TP / N`; `None` when the class has no samples.
    pub acc: Option<f64>,
    /// `2·TP / (2·TP + FP + FN)`; `None` when the class has no samples.
    pub f1: Option<f64>,
}

pub fn per_class_metrics(cm: &ConfusionMatrix) -> Result<Vec<ClassMetrics>> {
    if cm.classes.is_empty() || cm.total() == 0 {
        return Err(Error::InsufficientData("empty confusion matrix".into()));
    }
    let k = cm.classes.len();
    Ok((0..k)
        .map(|c| {
            let tp = cm.counts[c][c];
            let n: u64 = cm.counts[c].iter().sum();
            let predicted: u64 = (0..k).map(|r| cm.counts[r][c]).sum();
            let (fp, fn_) = (predicted - tp, n - tp);
            let (acc, f1) = if n == 0 {
                log::warn!("class `{}` has no samples; its metrics are undefined", cm.classes[c]);
                (None, None)
            } else {
                (
                    Some(tp as f64 / n as f64),
                    Some(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64),
                )
            };
            ClassMetrics {
                class: cm.classes[c].clone(),
                support: n,
                acc,
                f1,
            }
        })
        .collect())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `(UF1, UAR)`: unweighted means over the classes with samples.
pub fn uf1_uar(cm: &ConfusionMatrix) -> Result<(f64, f64)> {
    let m = per_class_metrics(cm)?;
    let f1: Vec<f64> = m.iter().filter_map(|c| c.f1).collect();
    let acc: Vec<f64> = m.iter().filter_map(|c| c.acc).collect();
    Ok((mean(&f1), mean(&acc)))
}

/// Population standard deviation of the defined per-class recalls.
pub fn per_class_acc_std(cm: &ConfusionMatrix) -> Result<f64> {
    let acc: Vec<f64> = per_class_metrics(cm)?.iter().filter_map(|c| c.acc).collect();
    let mu = mean(&acc);
    Ok((acc.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>() / acc.len() as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub subject: String,
    pub confusion: ConfusionMatrix,
    /// Over the classes present in this subject's clips.
    pub uf1: f64,
    pub uar: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_fold: Vec<FoldSummary>,
    pub aggregate: ConfusionMatrix,
    pub acc: f64,
    pub per_class: Vec<ClassMetrics>,
    pub uf1: f64,
    pub uar: f64,
    pub per_class_acc_std: f64,
}

impl MetricsReport {
    /// Sums the fold matrices and derives every metric from the aggregate.
    pub fn assemble(classes: &[String], folds: Vec<(String, ConfusionMatrix)>) -> Result<Self> {
        let mut aggregate = ConfusionMatrix::zeros(classes);
        let mut per_fold = Vec::with_capacity(folds.len());
        for (subject, cm) in folds {
            aggregate.add(&cm)?;
            let (uf1, uar) = uf1_uar(&cm)?;
            per_fold.push(FoldSummary {
                subject,
                confusion: cm,
                uf1,
                uar,
            });
        }
        let (uf1, uar) = uf1_uar(&aggregate)?;
        Ok(Self {
            per_fold,
            acc: aggregate.trace() as f64 / aggregate.total() as f64,
            per_class: per_class_metrics(&aggregate)?,
            per_class_acc_std: per_class_acc_std(&aggregate)?,
            aggregate,
            uf1,
            uar,
        })
    }

    pub fn summary_text(&self) -> String {
        let mut s = format!(
            "folds {}\nacc {:.4}\nUF1 {:.4}\nUAR {:.4}\nper-class accuracy std {:.4}\n",
            self.per_fold.len(),
            self.acc,
            self.uf1,
            self.uar,
            self.per_class_acc_std
        );
        for c in &self.per_class {
            let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{:.4}", v));
            s.push_str(&format!("  {} n={} acc={} f1={}\n", c.class, c.support, fmt(c.acc), fmt(c.f1)));
        }
        s
    }

    /// Writes `summary.json`, `summary.txt`, `aggregate.csv` and
    /// `fold_<subject>.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, bytes: &[u8]| {
            let p = dir.join(name);
            std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
        };
        put("summary.json", &serde_json::to_vec_pretty(self)?)?;
        put("summary.txt", self.summary_text().as_bytes())?;
        put("aggregate.csv", self.aggregate.to_csv()?.as_bytes())?;
        for f in &self.per_fold {
            put(&format!("fold_{}.csv", f.subject), f.confusion.to_csv()?.as_bytes())?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub clip_id: String,
    pub subject: String,
    pub truth: String,
    pub predicted: String,
    /// Mean class probabilities over the support resamples.
    pub probabilities: Vec<f64>,
}

pub fn predictions_csv(classes: &[String], preds: &[Prediction]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["clip_id", "subject", "true", "predicted"].iter().map(|s| s.to_string()).collect();
    header.extend(classes.iter().map(|c| format!("p_{}", c)));
    w.write_record(&header).map_err(csv_err)?;
    for p in preds {
        let mut rec = vec![p.clip_id.clone(), p.subject.clone(), p.truth.clone(), p.predicted.clone()];
        rec.extend(p.probabilities.iter().map(|v| format!("{:.9}", v)));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("utf-8 csv"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Support clips per class.
    pub shot: usize,
    /// Support resamples voted over per query.
    pub resamples: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            shot: 5,
            resamples: 10,
            seed: 0,
        }
    }
}

/// Classifies every clip of `test` against supports drawn from `support_pool`
/// by majority vote; ties go to the higher mean probability.
pub fn evaluate_fold(
    table: &EmbeddingTable,
    classes: &[String],
    support_pool: &[ClipRecord],
    test: &[ClipRecord],
    cfg: &EvalConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Prediction>> {
    if cfg.resamples == 0 || cfg.shot == 0 {
        return Err(Error::InvalidArgument("evaluation needs positive shot and resamples".into()));
    }
    let n = classes.len();
    let mut votes = vec![vec![0usize; n]; test.len()];
    let mut probs = vec![vec![0.0; n]; test.len()];
    for _ in 0..cfg.resamples {
        let support = sample_support(support_pool, classes, cfg.shot, rng)?;
        let protos = table.prototypes(&support, n)?;
        for (i, q) in test.iter().enumerate() {
            let p = classify_query(&table.scores(&protos, &q.clip_id)?)?;
            votes[i][argmax(&p)] += 1;
            probs[i].iter_mut().zip(&p).for_each(|(a, b)| *a += b / cfg.resamples as f64);
        }
    }
    Ok(test
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let best = *votes[i].iter().max().expect("classes");
            let winner = (0..n)
                .filter(|&c| votes[i][c] == best)
                .fold(None::<usize>, |acc, c| match acc {
                    Some(a) if probs[i][a] >= probs[i][c] => Some(a),
                    _ => Some(c),
                })
                .expect("at least one class");
            Prediction {
                clip_id: q.clip_id.clone(),
                subject: q.subject_id.clone(),
                truth: q.label.clone(),
                predicted: classes[winner].clone(),
                probabilities: probs[i].clone(),
            }
        })
        .collect())
}

/// Trains one fold and embeds every clip the evaluation needs.
pub trait FoldTrainer {
    /// `train` excludes the test subject. `clip_ids` lists the support pool
    /// followed by the test clips; the returned table must cover all of them.
    fn train_fold(
        &mut self,
        fold: &Fold,
        train: &DatasetManifest,
        clip_ids: &[String],
        audit: &mut AuditLog,
    ) -> Result<Vec<(String, EmbeddingTable)>>;
}

/// Trained embedding tables of every fold, keyed by model name.
#[derive(Clone, Debug)]
pub struct FoldTables {
    pub fold: Fold,
    pub tables: Vec<(String, EmbeddingTable)>,
    pub audit: AuditLog,
}

impl FoldTables {
    pub fn table(&self, model: &str) -> Result<&EmbeddingTable> {
        self.tables
            .iter()
            .find(|(n, _)| n == model)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::InvalidArgument(format!("fold has no model `{}`", model)))
    }
}

/// Errors when any audited clip belongs to the fold's test subject, either
/// directly or as a magnified copy.
pub fn check_audit(fold: &Fold, manifest: &DatasetManifest, audit: &AuditLog) -> Result<()> {
    let held: BTreeSet<&str> = manifest
        .records
        .iter()
        .filter(|r| r.subject_id == fold.test_subject)
        .map(|r| r.clip_id.as_str())
        .collect();
    for id in audit.clip_ids() {
        let source = id.split("__mag").next().unwrap_or(id);
        if held.contains(id) || held.contains(source) {
            return Err(Error::Leakage {
                clip_id: id.to_string(),
                subject: fold.test_subject.clone(),
            });
        }
    }
    Ok(())
}

/// Unmagnified clips of the training subjects.
pub fn support_pool(train: &DatasetManifest) -> Vec<ClipRecord> {
    train
        .records
        .iter()
        .filter(|r| r.magnification_factor == 0)
        .cloned()
        .collect()
}

/// Trains every fold and checks its audit log against the held-out subject.
pub fn train_folds(manifest: &DatasetManifest, trainer: &mut dyn FoldTrainer) -> Result<Vec<FoldTables>> {
    manifest.validate()?;
    let mut out = Vec::new();
    for fold in loso_split(manifest)? {
        let (train, test) = fold.split(manifest);
        let mut ids: Vec<String> = support_pool(&train).into_iter().map(|r| r.clip_id).collect();
        ids.extend(test.records.iter().map(|r| r.clip_id.clone()));
        let mut audit = AuditLog::default();
        let tables = trainer.train_fold(&fold, &train, &ids, &mut audit)?;
        check_audit(&fold, manifest, &audit)?;
        log::info!("fold {} trained ({} audited clip uses)", fold.test_subject, audit.entries.len());
        out.push(FoldTables { fold, tables, audit });
    }
    Ok(out)
}

/// Scores the held-out clips of each fold with `model`'s table after
/// `adjust`, and assembles the report and prediction log.
pub fn score_folds(
    manifest: &DatasetManifest,
    folds: &[FoldTables],
    model: &str,
    adjust: &dyn Fn(&EmbeddingTable) -> Result<EmbeddingTable>,
    cfg: &EvalConfig,
) -> Result<(MetricsReport, Vec<Prediction>)> {
    let classes = &manifest.label_space.classes;
    let mut per_fold = Vec::new();
    let mut log = Vec::new();
    for (i, ft) in folds.iter().enumerate() {
        let (train, test) = ft.fold.split(manifest);
        let pool = support_pool(&train);
        let table = adjust(ft.table(model)?)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(i as u64));
        let preds = evaluate_fold(&table, classes, &pool, &test.records, cfg, &mut rng)?;
        let pairs: Vec<(String, String)> = preds.iter().map(|p| (p.truth.clone(), p.predicted.clone())).collect();
        per_fold.push((ft.fold.test_subject.clone(), confusion_from_predictions(classes, &pairs)?));
        log.extend(preds);
    }
    Ok((MetricsReport::assemble(classes, per_fold)?, log))
}

/// Full LOSO run of one model.
pub fn run_loso(
    manifest: &DatasetManifest,
    trainer: &mut dyn FoldTrainer,
    model: &str,
    cfg: &EvalConfig,
) -> Result<(MetricsReport, Vec<Prediction>)> {
    let folds = train_folds(manifest, trainer)?;
    score_folds(manifest, &folds, model, &|t| Ok(t.clone()), cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    /// Normalized sequence length.
    L,
    /// Parallel fusion weight.
    Gamma,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub acc: f64,
    pub uf1: f64,
    pub uar: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub param: SweepParam,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let name = match self.param {
            SweepParam::L => "L",
            SweepParam::Gamma => "gamma",
        };
        w.write_record([name, "acc", "uf1", "uar"]).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                format!("{}", r.value),
                format!("{:.6}", r.acc),
                format!("{:.6}", r.uf1),
                format!("{:.6}", r.uar),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("utf-8 csv"))
    }
}

/// Rejects grids outside `L ∈ {3, …, 20}` or `γ ∈ [0, 1]`.
pub fn validate_grid(param: SweepParam, values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("empty sweep grid".into()));
    }
    for &v in values {
        let ok = match param {
            SweepParam::L => v.fract() == 0.0 && (3.0..=20.0).contains(&v),
            SweepParam::Gamma => (0.0..=1.0).contains(&v),
        };
        if !ok {
            return Err(Error::InvalidArgument(format!("sweep value {} outside the {:?} grid", v, param)));
        }
    }
    Ok(())
}

/// Evaluates `run` at every grid value.
pub fn sweep(
    param: SweepParam,
    values: &[f64],
    run: &mut dyn FnMut(f64) -> Result<MetricsReport>,
) -> Result<SweepTable> {
    validate_grid(param, values)?;
    let mut rows = Vec::with_capacity(values.len());
    for &v in values {
        let r = run(v)?;
        rows.push(SweepRow {
            value: v,
            acc: r.acc,
            uf1: r.uf1,
            uar: r.uar,
        });
    }
    Ok(SweepTable { param, rows })
}

/// γ sweep over already trained parallel-fusion folds: the AFE stream is
/// reweighted at scoring time.
pub fn sweep_gamma(
    manifest: &DatasetManifest,
    folds: &[FoldTables],
    model: &str,
    values: &[f64],
    cfg: &EvalConfig,
) -> Result<(SweepTable, BTreeMap<String, Vec<Prediction>>)> {
    let mut logs = BTreeMap::new();
    let table = sweep(SweepParam::Gamma, values, &mut |g| {
        let (report, preds) = score_folds(manifest, folds, model, &|t| t.with_weight("afe", g), cfg)?;
        logs.insert(format!("{}", g), preds);
        Ok(report)
    })?;
    Ok((table, logs))
}

#[cfg(test)]
mod tests;
