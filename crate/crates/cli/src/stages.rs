//! Stage graph, content-hash skipping and the work each stage performs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use clap::ValueEnum;
use mpfnet::backbone::{build_backbone, load_checkpoint, save_checkpoint, BackboneConfig};
use mpfnet::datamodel::{load_manifest, synth_generate, DatasetManifest};
use mpfnet::eval::{
    predictions_csv, score_folds, sweep, sweep_gamma, train_folds, MetricsReport, PipelineTrainer, SweepParam,
    SweepTable, Variant,
};
use mpfnet::magnify::{build_balanced_dataset, plan_balancing, FlowWarpMagnifier};
use mpfnet::metanet::{save_fusion, train_mpfnet, FusionSpec};
use mpfnet::preprocess::{FeatureSet, PreprocessConfig, Preprocessor};
use mpfnet::pretrain::{train_afe, train_gfe, AuditLog};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{Overrides, RunConfig};
use crate::ledger::{hash_parts, list_outputs, Ledger, LedgerEntry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Synth,
    Preprocess,
    Magnify,
    PretrainGfe,
    PretrainAfe,
    Train,
    Eval,
    Sweep,
    Report,
}

pub const PIPELINE: [Stage; 9] = [
    Stage::Synth,
    Stage::Preprocess,
    Stage::Magnify,
    Stage::PretrainGfe,
    Stage::PretrainAfe,
    Stage::Train,
    Stage::Eval,
    Stage::Sweep,
    Stage::Report,
];

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Preprocess => "preprocess",
            Stage::Magnify => "magnify",
            Stage::PretrainGfe => "pretrain-gfe",
            Stage::PretrainAfe => "pretrain-afe",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Sweep => "sweep",
            Stage::Report => "report",
        }
    }

    pub fn deps(self) -> &'static [Stage] {
        match self {
            Stage::Synth => &[],
            Stage::Preprocess | Stage::Magnify => &[Stage::Synth],
            Stage::PretrainGfe => &[Stage::Preprocess],
            Stage::PretrainAfe => &[Stage::Preprocess, Stage::Magnify],
            Stage::Train => &[Stage::PretrainGfe, Stage::PretrainAfe],
            // LOSO retrains every stage per fold; the dependency on the
            // deployable model keeps the command order fixed.
            Stage::Eval => &[Stage::Train],
            Stage::Sweep => &[Stage::Preprocess],
            Stage::Report => &[Stage::Eval],
        }
    }

    /// Output directory, relative to the run directory.
    pub fn out_dir(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Preprocess => "features",
            Stage::Magnify => "balanced",
            Stage::PretrainGfe => "checkpoints/gfe",
            Stage::PretrainAfe => "checkpoints/afe",
            Stage::Train => "model",
            Stage::Eval => "eval",
            Stage::Sweep => "sweep",
            Stage::Report => "report",
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Missing(&'static str),
    Stage(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Stage(_) => 1,
            CliError::Missing(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "{}", m),
            CliError::Missing(s) => write!(f, "missing upstream stage `{}`: run it first", s),
            CliError::Stage(e) => write!(f, "stage failed: {:#}", e),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Stage(e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    Skipped,
}

pub struct Runner {
    pub cfg: RunConfig,
    pub overrides: Overrides,
    pub ledger: Ledger,
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("config sections serialize")
}

impl Runner {
    pub fn new(cfg: RunConfig, overrides: Overrides) -> Result<Self, CliError> {
        let ledger = Ledger::load(&cfg.run_dir).map_err(CliError::Stage)?;
        Ok(Self { cfg, overrides, ledger })
    }

    fn run_dir(&self) -> &Path {
        &self.cfg.run_dir
    }

    fn path(&self, stage: Stage) -> PathBuf {
        self.run_dir().join(stage.out_dir())
    }

    /// Configuration that determines the stage's outputs.
    fn section(&self, stage: Stage) -> Result<String> {
        let c = &self.cfg;
        let v = match stage {
            Stage::Synth => match &c.data.manifest {
                Some(p) => {
                    let text = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
                    json!({ "manifest": p, "content": hex::encode(Sha256::digest(&text)) })
                }
                None => json!({ "synth": c.synth }),
            },
            Stage::Preprocess => json!({ "preprocess": c.preprocess_config() }),
            Stage::Magnify => json!({ "cap": c.magnify.cap, "preprocess": c.preprocess_config() }),
            Stage::PretrainGfe => json!({ "backbone": c.backbone_config(), "train": c.gfe }),
            Stage::PretrainAfe => json!({ "backbone": c.backbone_config(), "train": c.afe }),
            Stage::Train => json!({ "meta": c.meta_config(), "variant": c.variant, "gamma": c.gamma() }),
            Stage::Eval => json!({
                "pipeline": c.pipeline_config(self.eval_variants(), PathBuf::new()),
                "eval": c.eval_config(),
                "preprocess": c.preprocess_config(),
            }),
            Stage::Sweep => json!({
                "sweep": c.sweep,
                "variant": c.variant,
                "pipeline": c.pipeline_config(vec![], PathBuf::new()),
                "eval": c.eval_config(),
                "preprocess": c.preprocess_config(),
            }),
            Stage::Report => json!({ "sweep": self.sweep_hash_if_fresh() }),
        };
        Ok(to_json(&v))
    }

    fn sweep_hash_if_fresh(&self) -> Option<String> {
        let h = self.input_hash(Stage::Sweep).ok()?;
        self.ledger.is_fresh(Stage::Sweep.name(), &h, self.run_dir()).then_some(h)
    }

    pub fn input_hash(&self, stage: Stage) -> Result<String> {
        let mut parts = vec![stage.name().to_string(), self.section(stage)?];
        for &d in stage.deps() {
            parts.push(self.input_hash(d)?);
        }
        let refs: Vec<&str> = parts.iter().map(String::as_str).collect();
        Ok(hash_parts(&refs))
    }

    pub fn is_fresh(&self, stage: Stage) -> Result<bool> {
        Ok(self.ledger.is_fresh(stage.name(), &self.input_hash(stage)?, self.run_dir()))
    }

    pub fn run(&mut self, stage: Stage) -> Result<Outcome, CliError> {
        for &d in stage.deps() {
            if !self.is_fresh(d)? {
                return Err(CliError::Missing(d.name()));
            }
        }
        let hash = self.input_hash(stage)?;
        if self.ledger.is_fresh(stage.name(), &hash, self.run_dir()) {
            println!("{}: up to date, skipped", stage.name());
            return Ok(Outcome::Skipped);
        }
        let out = self.path(stage);
        if out.exists() {
            std::fs::remove_dir_all(&out).with_context(|| format!("clearing {}", out.display()))?;
        }
        self.ledger.invalidate(stage.name());
        self.ledger.save(self.run_dir())?;
        log::info!("{}: running", stage.name());
        match stage {
            Stage::Synth => self.synth(&out)?,
            Stage::Preprocess => self.preprocess(&out)?,
            Stage::Magnify => self.magnify(&out)?,
            Stage::PretrainGfe => self.pretrain_gfe(&out)?,
            Stage::PretrainAfe => self.pretrain_afe(&out)?,
            Stage::Train => self.train(&out)?,
            Stage::Eval => self.eval(&out)?,
            Stage::Sweep => self.sweep(&out)?,
            Stage::Report => self.report(&out)?,
        }
        let outputs = if out.exists() {
            list_outputs(self.run_dir(), &out)?
        } else {
            Vec::new()
        };
        self.ledger.record(
            stage.name(),
            LedgerEntry {
                input_hash: hash,
                outputs,
                overrides: self.overrides.describe(),
                completed: true,
            },
        );
        self.ledger.save(self.run_dir())?;
        println!("{}: done", stage.name());
        Ok(Outcome::Ran)
    }

    fn manifest(&self) -> Result<DatasetManifest> {
        let path = match &self.cfg.data.manifest {
            Some(p) => p.clone(),
            None => self.path(Stage::Synth).join("manifest.jsonl"),
        };
        Ok(load_manifest(&path)?)
    }

    fn originals(&self) -> Result<DatasetManifest> {
        Ok(self.manifest()?.filtered(|r| r.magnification_factor == 0))
    }

    fn features(&self, manifest: &DatasetManifest) -> Result<FeatureSet> {
        Ok(FeatureSet::load(&self.path(Stage::Preprocess), manifest)?)
    }

    fn preprocessor(&self, cfg: &PreprocessConfig) -> Result<Preprocessor> {
        Ok(Preprocessor::from_config(cfg)?)
    }

    fn encoder(&self, offset: u64) -> Result<mpfnet::backbone::EncoderParameters> {
        let b = self.cfg.backbone_config();
        Ok(build_backbone(&BackboneConfig {
            seed: b.seed.wrapping_add(offset),
            ..b
        })?)
    }

    fn eval_variants(&self) -> Vec<Variant> {
        let mut v = Vec::new();
        if self.cfg.eval.baseline {
            v.push(Variant::NoPrior);
        }
        v.push(self.cfg.variant.variant());
        v
    }

    fn synth(&self, out: &Path) -> Result<()> {
        if self.cfg.data.manifest.is_none() {
            synth_generate(out, &self.cfg.synth)?;
        }
        Ok(())
    }

    fn preprocess(&self, out: &Path) -> Result<()> {
        let m = self.manifest()?;
        let f = FeatureSet::compute(&m, &self.preprocessor(&self.cfg.preprocess_config())?)?;
        f.save(out)?;
        Ok(())
    }

    fn magnify(&self, out: &Path) -> Result<()> {
        let m = self.originals()?;
        let pre_cfg = self.cfg.preprocess_config();
        let plan = plan_balancing(&m.class_counts(), self.cfg.magnify.cap)?;
        let clips = out.join("data");
        let balanced = build_balanced_dataset(&m, &plan, &clips, &FlowWarpMagnifier::new(pre_cfg.flow_port()))?;
        let copies = balanced.filtered(|r| r.magnification_factor > 0);
        FeatureSet::compute(&copies, &self.preprocessor(&pre_cfg)?)?.save(&out.join("features"))?;
        Ok(())
    }

    fn pretrain_gfe(&self, out: &Path) -> Result<()> {
        let m = self.originals()?;
        let f = self.features(&m)?;
        let mut audit = AuditLog::default();
        let gfe = train_gfe(&m, &f, &self.encoder(0)?, &self.cfg.gfe, &mut audit)?;
        std::fs::create_dir_all(out)?;
        save_checkpoint(&gfe, &out.join("gfe.ckpt"))?;
        Ok(())
    }

    fn pretrain_afe(&self, out: &Path) -> Result<()> {
        let m = self.originals()?;
        let dir = self.path(Stage::Magnify);
        let balanced = load_manifest(dir.join("data").join("manifest.jsonl"))?;
        let copies = balanced.filtered(|r| r.magnification_factor > 0);
        let mut f = self.features(&m)?;
        f.merge(FeatureSet::load(&dir.join("features"), &copies)?);
        let mut audit = AuditLog::default();
        let afe = train_afe(&balanced, &f, &self.encoder(1)?, &self.cfg.afe, &mut audit)?;
        std::fs::create_dir_all(out)?;
        save_checkpoint(&afe, &out.join("afe.ckpt"))?;
        Ok(())
    }

    fn train(&self, out: &Path) -> Result<()> {
        let m = self.originals()?;
        let f = self.features(&m)?;
        let gfe = load_checkpoint(&self.path(Stage::PretrainGfe).join("gfe.ckpt"))?;
        let afe = load_checkpoint(&self.path(Stage::PretrainAfe).join("afe.ckpt"))?;
        let spec = match self.cfg.variant.variant() {
            Variant::MpfnetP => FusionSpec::parallel(&gfe, &afe, self.cfg.gamma(), self.cfg.seed)?,
            _ => FusionSpec::cascade(&gfe, &afe)?,
        };
        let mut audit = AuditLog::default();
        let (trained, log) = train_mpfnet(&m, &f, &spec, &self.cfg.meta_config(), &mut audit)?;
        save_fusion(&trained, out)?;
        std::fs::write(out.join("meta_log.json"), serde_json::to_vec_pretty(&log)?)?;
        Ok(())
    }

    fn trainer(&self, cfg: &RunConfig, variants: Vec<Variant>, features: FeatureSet) -> PipelineTrainer {
        let work = self.run_dir().join("work");
        PipelineTrainer::new(cfg.pipeline_config(variants, work), cfg.preprocess_config(), features)
    }

    fn clear_work(&self) -> Result<()> {
        let work = self.run_dir().join("work");
        if work.exists() {
            std::fs::remove_dir_all(&work)?;
        }
        Ok(())
    }

    fn eval(&self, out: &Path) -> Result<()> {
        let m = self.originals()?;
        let f = self.features(&m)?;
        let mut trainer = self.trainer(&self.cfg, self.eval_variants(), f);
        let folds = train_folds(&m, &mut trainer);
        self.clear_work()?;
        let folds = folds?;
        for v in self.eval_variants() {
            let (report, preds) = score_folds(&m, &folds, v.name(), &|t| Ok(t.clone()), &self.cfg.eval_config())?;
            let dir = out.join(v.name());
            report.write(&dir)?;
            std::fs::write(
                dir.join("predictions.csv"),
                predictions_csv(&m.label_space.classes, &preds)?,
            )?;
            println!("{} UF1 {:.4} UAR {:.4}", v.name(), report.uf1, report.uar);
        }
        Ok(())
    }

    fn sweep(&self, out: &Path) -> Result<()> {
        let m = self.originals()?;
        let classes = m.label_space.classes.clone();
        let eval_cfg = self.cfg.eval_config();
        std::fs::create_dir_all(out)?;
        let mut logs = Vec::new();
        let table: SweepTable = match self.cfg.sweep.param {
            SweepParam::Gamma => {
                let mut trainer = self.trainer(&self.cfg, vec![Variant::MpfnetP], self.features(&m)?);
                let folds = train_folds(&m, &mut trainer);
                self.clear_work()?;
                let (table, by_value) = sweep_gamma(&m, &folds?, Variant::MpfnetP.name(), &self.cfg.sweep.values, &eval_cfg)?;
                logs.extend(by_value);
                table
            }
            SweepParam::L => {
                let variant = self.cfg.variant.variant();
                let result = sweep(SweepParam::L, &self.cfg.sweep.values, &mut |l| {
                    let cfg = RunConfig {
                        sequence_len: l as usize,
                        ..self.cfg.clone()
                    };
                    let f = FeatureSet::compute(&m, &Preprocessor::from_config(&cfg.preprocess_config())?)?;
                    let mut trainer = self.trainer(&cfg, vec![variant], f);
                    let folds = train_folds(&m, &mut trainer);
                    let _ = self.clear_work();
                    let (report, preds) = score_folds(&m, &folds?, variant.name(), &|t| Ok(t.clone()), &eval_cfg)?;
                    logs.push((format!("{}", l), preds));
                    Ok(report)
                });
                result?
            }
        };
        std::fs::write(out.join("sweep.csv"), table.to_csv()?)?;
        for (value, preds) in logs {
            std::fs::write(out.join(format!("predictions_{}.csv", value)), predictions_csv(&classes, &preds)?)?;
        }
        Ok(())
    }

    fn report(&self, out: &Path) -> Result<()> {
        let eval_dir = self.path(Stage::Eval);
        let mut models = Vec::new();
        for entry in std::fs::read_dir(&eval_dir)? {
            let dir = entry?.path();
            let summary = dir.join("summary.json");
            if summary.is_file() {
                let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
                let report: MetricsReport = serde_json::from_slice(&std::fs::read(&summary)?)?;
                models.push((name, report));
            }
        }
        if models.is_empty() {
            return Err(anyhow!("no evaluation summaries under {}", eval_dir.display()));
        }
        models.sort_by(|a, b| a.0.cmp(&b.0));
        std::fs::create_dir_all(out)?;
        let mut csv = String::from("model,acc,uf1,uar,per_class_acc_std\n");
        let mut text = format!("{:<10} {:>7} {:>7} {:>7} {:>7}\n", "model", "acc", "UF1", "UAR", "std");
        for (name, r) in &models {
            writeln!(csv, "{},{:.6},{:.6},{:.6},{:.6}", name, r.acc, r.uf1, r.uar, r.per_class_acc_std)?;
            writeln!(
                text,
                "{:<10} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
                name, r.acc, r.uf1, r.uar, r.per_class_acc_std
            )?;
            std::fs::write(out.join(format!("confusion_{}.csv", name)), r.aggregate.to_csv()?)?;
            std::fs::write(out.join(format!("confusion_{}.txt", name)), render_confusion(r))?;
        }
        std::fs::write(out.join("metrics.csv"), csv)?;
        if self.sweep_hash_if_fresh().is_some() {
            let table = std::fs::read_to_string(self.path(Stage::Sweep).join("sweep.csv"))?;
            std::fs::write(out.join("sweep.csv"), &table)?;
            text.push_str("\nsweep\n");
            text.push_str(&table);
        }
        std::fs::write(out.join("metrics.txt"), &text)?;
        print!("{}", text);
        Ok(())
    }
}

fn render_confusion(r: &MetricsReport) -> String {
    let cm = &r.aggregate;
    let width = cm.classes.iter().map(String::len).max().unwrap_or(0).max(6);
    let mut s = format!("{:<w$}", "true\\pred", w = width + 2);
    for c in &cm.classes {
        let _ = write!(s, " {:>w$}", c, w = width);
    }
    s.push('\n');
    for (c, row) in cm.classes.iter().zip(&cm.counts) {
        let _ = write!(s, "{:<w$}", c, w = width + 2);
        for v in row {
            let _ = write!(s, " {:>w$}", v, w = width);
        }
        s.push('\n');
    }
    s
}
