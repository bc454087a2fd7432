//! Run configuration: one TOML document, sections per stage. Every section
//! is optional; missing keys fall back to the defaults below.

use std::path::{Path, PathBuf};

use mpfnet::backbone::BackboneConfig;
use mpfnet::datamodel::SynthConfig;
use mpfnet::eval::{EvalConfig, PipelineConfig, SweepParam, Variant};
use mpfnet::metanet::{default_gamma, MetaConfig};
use mpfnet::preprocess::{FlowPortConfig, PreprocessConfig, DEFAULT_SEQUENCE_LEN};
use mpfnet::pretrain::{SgdConfig, TrainConfig};
use serde::{Deserialize, Serialize};

pub const RUN_DIR_ENV: &str = "MPF_RUN_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionChoice {
    P,
    C,
}

impl FusionChoice {
    pub fn variant(self) -> Variant {
        match self {
            FusionChoice::P => Variant::MpfnetP,
            FusionChoice::C => Variant::MpfnetC,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// External manifest; the synthetic corpus is used when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MagnifySection {
    pub cap: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub resamples: usize,
    /// Also evaluate the episodic model trained without priors.
    pub baseline: bool,
    pub embed_chunk: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_dir: PathBuf,
    pub dataset: String,
    pub seed: u64,
    pub variant: FusionChoice,
    /// Normalized sequence length `L`.
    pub sequence_len: usize,
    /// Parallel fusion weight; defaults per dataset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub data: DataSection,
    pub synth: SynthConfig,
    pub flow: FlowPortConfig,
    pub magnify: MagnifySection,
    pub backbone: BackboneConfig,
    pub gfe: TrainConfig,
    pub afe: TrainConfig,
    pub meta: MetaConfig,
    pub eval: EvalSection,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let clipped = SgdConfig {
            clip_norm: Some(1.0),
            ..SgdConfig::default()
        };
        Self {
            run_dir: PathBuf::from("runs/default"),
            dataset: "synthetic".into(),
            seed: 0,
            variant: FusionChoice::C,
            sequence_len: DEFAULT_SEQUENCE_LEN,
            gamma: None,
            way: 3,
            shot: 5,
            query: 5,
            data: DataSection::default(),
            synth: SynthConfig {
                n_subjects: 6,
                clips_per_class: 15,
                center_jitter: 4,
                distractors: 6,
                ..SynthConfig::default()
            },
            flow: FlowPortConfig::Oracle,
            magnify: MagnifySection { cap: 2 },
            backbone: BackboneConfig {
                embedding_dim: 64,
                ..BackboneConfig::desk()
            },
            gfe: TrainConfig {
                epochs: 8,
                batch_size: 16,
                batches_per_epoch: Some(2),
                ..TrainConfig::gfe()
            },
            afe: TrainConfig {
                epochs: 4,
                sgd: SgdConfig { lr: 0.01, ..clipped },
                schedule: None,
                ..TrainConfig::afe()
            },
            meta: MetaConfig {
                batches: 10,
                eval_every: 0,
                sgd: SgdConfig { lr: 0.05, ..clipped },
                ..MetaConfig::default()
            },
            eval: EvalSection {
                resamples: 10,
                baseline: true,
                embed_chunk: 32,
            },
            sweep: SweepSection {
                param: SweepParam::Gamma,
                values: (0..=10).map(|i| i as f64 / 10.0).collect(),
            },
        }
    }
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err(m: impl Into<String>) -> ConfigError {
    ConfigError(m.into())
}

/// Recursively overlays `top` on `base`; tables merge, everything else replaces.
fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses the right-hand side of `--set key=value` as a TOML value, falling
/// back to a bare string.
fn parse_override(assign: &str) -> Result<(Vec<String>, toml::Value), ConfigError> {
    let (key, raw) = assign
        .split_once('=')
        .ok_or_else(|| err(format!("override `{}` is not key=value", assign)))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(err(format!("bad override key `{}`", key)));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {}", raw))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((path, value))
}

fn nest(path: &[String], value: toml::Value) -> toml::Value {
    path.iter().rev().fold(value, |acc, k| {
        let mut t = toml::Table::new();
        t.insert(k.clone(), acc);
        toml::Value::Table(t)
    })
}

#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub set: Vec<String>,
    pub run_dir_env: Option<PathBuf>,
}

impl Overrides {
    /// Human-readable list for the ledger.
    pub fn describe(&self) -> Vec<String> {
        let mut out: Vec<String> = self.set.clone();
        if let Some(s) = self.seed {
            out.push(format!("--seed {}", s));
        }
        if let Some(d) = &self.run_dir_env {
            out.push(format!("{}={}", RUN_DIR_ENV, d.display()));
        }
        out
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str, overrides: &Overrides) -> Result<Self, ConfigError> {
        let user: toml::Value = toml::from_str::<toml::Table>(text)
            .map(toml::Value::Table)
            .map_err(|e| err(format!("parse: {}", e)))?;
        let mut doc = toml::Value::try_from(RunConfig::default()).map_err(|e| err(e.to_string()))?;
        merge(&mut doc, user);
        for s in &overrides.set {
            let (path, v) = parse_override(s)?;
            merge(&mut doc, nest(&path, v));
        }
        let mut cfg: RunConfig = doc.try_into().map_err(|e: toml::de::Error| err(e.to_string()))?;
        if let Some(seed) = overrides.seed {
            cfg.set_all_seeds(seed);
        }
        if let Some(d) = &overrides.run_dir_env {
            cfg.run_dir = d.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| err(format!("{}: {}", path.display(), e)))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn set_all_seeds(&mut self, seed: u64) {
        self.seed = seed;
        self.synth.seed = seed;
        self.backbone.seed = seed;
        self.gfe.seed = seed;
        self.afe.seed = seed;
        self.meta.seed = seed;
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(3..=20).contains(&self.sequence_len) {
            return Err(err(format!("sequence_len {} outside [3, 20]", self.sequence_len)));
        }
        if let Some(g) = self.gamma {
            if !(0.0..=1.0).contains(&g) {
                return Err(err(format!("gamma {} outside [0, 1]", g)));
            }
        }
        if !matches!(self.way, 3 | 5) {
            return Err(err(format!("way {} must be 3 or 5", self.way)));
        }
        if self.shot == 0 || self.query == 0 {
            return Err(err("shot and query must be positive"));
        }
        if self.magnify.cap == 0 || self.magnify.cap > mpfnet::datamodel::MAX_MAGNIFICATION {
            return Err(err(format!("magnify.cap {} outside 1..=14", self.magnify.cap)));
        }
        if self.eval.resamples == 0 || self.eval.embed_chunk == 0 {
            return Err(err("eval.resamples and eval.embed_chunk must be positive"));
        }
        self.backbone.validate().map_err(|e| err(e.to_string()))?;
        for t in [&self.gfe, &self.afe] {
            t.validate().map_err(|e| err(e.to_string()))?;
        }
        self.meta_config().validate().map_err(|e| err(e.to_string()))?;
        mpfnet::eval::validate_grid(self.sweep.param, &self.sweep.values).map_err(|e| err(e.to_string()))?;
        match &self.data.manifest {
            Some(m) if !m.is_file() => {
                return Err(err(format!("data.manifest {} does not exist", m.display())));
            }
            Some(_) => {}
            None => self.synth.validate().map_err(|e| err(e.to_string()))?,
        }
        if let FlowPortConfig::Precomputed { dir } = &self.flow {
            if !dir.is_dir() {
                return Err(err(format!("precomputed flow directory {} does not exist", dir.display())));
            }
        }
        Ok(())
    }

    pub fn gamma(&self) -> f64 {
        self.gamma.unwrap_or_else(|| default_gamma(&self.dataset))
    }

    pub fn preprocess_config(&self) -> PreprocessConfig {
        PreprocessConfig {
            sequence_len: self.sequence_len,
            flow: self.flow.clone(),
        }
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            input_t: self.sequence_len - 1,
            input_hw: self.input_hw(),
            ..self.backbone.clone()
        }
    }

    fn input_hw(&self) -> (usize, usize) {
        if self.data.manifest.is_none() {
            self.synth.frame_size
        } else {
            self.backbone.input_hw
        }
    }

    pub fn meta_config(&self) -> MetaConfig {
        MetaConfig {
            way: self.way,
            shot: self.shot,
            query: self.query,
            ..self.meta.clone()
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            shot: self.shot,
            resamples: self.eval.resamples,
            seed: self.seed,
        }
    }

    pub fn pipeline_config(&self, variants: Vec<Variant>, work_dir: PathBuf) -> PipelineConfig {
        PipelineConfig {
            backbone: self.backbone_config(),
            gfe: self.gfe.clone(),
            afe: self.afe.clone(),
            meta: self.meta_config(),
            magnify_cap: self.magnify.cap,
            gamma: self.gamma(),
            variants,
            seed: self.seed,
            embed_chunk: self.eval.embed_chunk,
            work_dir,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn partial_sections_keep_defaults() {
        let cfg = RunConfig::from_toml_str("[meta]\nbatches = 7\n", &Overrides::default()).unwrap();
        assert_eq!(cfg.meta.batches, 7);
        assert_eq!(cfg.meta.episodes_per_batch, RunConfig::default().meta.episodes_per_batch);
        assert_eq!(cfg.sequence_len, 11);
        assert_eq!(cfg.gamma(), 0.7);
    }

    #[test]
    fn set_overrides_beat_the_file() {
        let o = Overrides {
            set: vec!["meta.batches=9".into(), "dataset=samm".into()],
            seed: Some(3),
            run_dir_env: None,
        };
        let cfg = RunConfig::from_toml_str("dataset = \"smic\"\n[meta]\nbatches = 7\n", &o).unwrap();
        assert_eq!(cfg.meta.batches, 9);
        assert_eq!(cfg.dataset, "samm");
        assert_eq!(cfg.gamma(), 0.6);
        assert_eq!((cfg.synth.seed, cfg.gfe.seed, cfg.meta.seed), (3, 3, 3));
    }

    #[test]
    fn rejects_out_of_range_values() {
        for text in ["sequence_len = 2", "sequence_len = 21", "gamma = -0.1", "way = 2", "[sweep]\nparam = \"l\"\nvalues = [2.0]"] {
            assert!(RunConfig::from_toml_str(text, &Overrides::default()).is_err(), "{}", text);
        }
        assert!(RunConfig::from_toml_str("sequence_len = \"x\"", &Overrides::default()).is_err());
        assert!(parse_override("novalue").is_err());
        assert!(RunConfig::from_toml_str("sequence_length = 5", &Overrides::default()).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_a_fixed_point(
            l in 3usize..=20,
            gamma in proptest::option::of(0.0f64..=1.0),
            seed in 0u64..1_000_000,
            way in prop_oneof![Just(3usize), Just(5usize)],
            cap in 1u32..=14,
            p in any::<bool>(),
        ) {
            let mut cfg = RunConfig {
                sequence_len: l,
                gamma,
                way,
                variant: if p { FusionChoice::P } else { FusionChoice::C },
                magnify: MagnifySection { cap },
                ..RunConfig::default()
            };
            cfg.set_all_seeds(seed);
            let text = cfg.to_toml_string();
            let parsed = RunConfig::from_toml_str(&text, &Overrides::default()).unwrap();
            prop_assert_eq!(&parsed, &cfg);
            prop_assert_eq!(parsed.to_toml_string(), text);
        }
    }
}
