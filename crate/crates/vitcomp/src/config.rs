//! Run configuration: a strict TOML document driving the pipeline.
//!
//! Unknown keys are rejected and all referenced paths are validated before
//! any stage starts. Every artifact a run emits records the sha256 of the
//! raw config bytes plus the seed, so outputs are attributable to exactly
//! one (config, seed) pair.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::merge::MergePlan;
use crate::trainer::Schedule;
use crate::vit::ViTConfig;

/// Environment variable overriding `out_dir`.
pub const OUT_ROOT_ENV: &str = "VITCOMP_OUT_ROOT";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelSection,
    pub data: DataSection,
    #[serde(default)]
    pub merge: MergeSection,
    #[serde(default)]
    pub prune: PruneSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Preset name; explicit fields override individual values.
    #[serde(default)]
    pub arch: Option<String>,
    #[serde(default)]
    pub blocks: Option<usize>,
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default)]
    pub heads: Option<usize>,
    #[serde(default)]
    pub patch: Option<usize>,
    #[serde(default)]
    pub img: Option<usize>,
    #[serde(default)]
    pub classes: Option<usize>,
    #[serde(default)]
    pub use_cls: Option<bool>,
    /// Start from this checkpoint instead of pretraining.
    #[serde(default)]
    pub baseline: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// "synth" or "manifest".
    pub source: String,
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_val")]
    pub n_val: usize,
}

fn default_n_train() -> usize {
    512
}

fn default_n_val() -> usize {
    256
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct MergeSection {
    /// Token-merging FLOPs reduction target for the planner.
    #[serde(default)]
    pub token_target: Option<f64>,
    /// Explicit plan like "1h,2v"; overrides the planner.
    #[serde(default)]
    pub entries: Option<String>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PruneSection {
    /// Channel-pruning reduction target relative to the merged model.
    #[serde(default)]
    pub final_ratio: Option<f64>,
    /// Overall reduction target; the channel budget is derived from what
    /// the merge plan leaves over.
    #[serde(default)]
    pub joint_target: Option<f64>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    #[serde(default)]
    pub profile: Option<String>,
    #[serde(default)]
    pub pretrain_epochs: Option<usize>,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub batch: Option<usize>,
    #[serde(default)]
    pub base_lr: Option<f32>,
    #[serde(default)]
    pub weight_decay: Option<f32>,
    #[serde(default)]
    pub beta1: Option<f32>,
    #[serde(default)]
    pub beta1_compactor: Option<f32>,
    #[serde(default)]
    pub beta2: Option<f32>,
    #[serde(default)]
    pub lr_warmup_frac: Option<f64>,
    #[serde(default)]
    pub prune_warmup_frac: Option<f64>,
    #[serde(default)]
    pub interval_iters: Option<usize>,
    #[serde(default)]
    pub ratio_step: Option<f64>,
    #[serde(default)]
    pub ramp_end_frac: Option<f64>,
    #[serde(default)]
    pub lambda: Option<f32>,
    #[serde(default)]
    pub distill_alpha: Option<f32>,
    /// Teacher checkpoint for distillation; defaults to the run's own
    /// baseline when alpha > 0.
    #[serde(default)]
    pub teacher: Option<PathBuf>,
    #[serde(default)]
    pub flip_augment: Option<bool>,
    /// Save a checkpoint every this many fine-tuning epochs.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

/// A parsed, validated run configuration.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub raw: RunConfig,
    pub vit: ViTConfig,
    pub config_hash: String,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))
    }

    /// Parse, validate, and resolve a config file.
    pub fn load(path: &Path) -> Result<ResolvedConfig> {
        let bytes = std::fs::read(path)?;
        let text = std::str::from_utf8(&bytes)
            .map_err(|_| Error::Config("config is not utf-8".into()))?;
        let cfg = Self::parse(text)?;
        let hash = crate::data::hex(&Sha256::digest(&bytes));
        cfg.resolve(hash)
    }

    pub fn resolve(self, config_hash: String) -> Result<ResolvedConfig> {
        let vit = self.model.to_vit_config()?;
        match self.data.source.as_str() {
            "synth" => {}
            "manifest" => {
                let p = self.data.manifest.as_ref().ok_or_else(|| {
                    Error::Config("data.source = \"manifest\" needs data.manifest".into())
                })?;
                if !p.is_file() {
                    return Err(Error::Config(format!(
                        "data.manifest {} does not exist",
                        p.display()
                    )));
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "data.source must be \"synth\" or \"manifest\", got '{other}'"
                )))
            }
        }
        if let Some(b) = &self.model.baseline {
            if !b.is_file() {
                return Err(Error::Config(format!(
                    "model.baseline {} does not exist",
                    b.display()
                )));
            }
        }
        if let Some(t) = &self.schedule.teacher {
            if !t.is_file() {
                return Err(Error::Config(format!(
                    "schedule.teacher {} does not exist",
                    t.display()
                )));
            }
        }
        if let (Some(_), Some(_)) = (&self.prune.final_ratio, &self.prune.joint_target) {
            return Err(Error::Config(
                "set either prune.final_ratio or prune.joint_target, not both".into(),
            ));
        }
        if let Some(p) = &self.schedule.profile {
            if p != "desk" && p != "paper" {
                return Err(Error::Config(format!(
                    "schedule.profile must be \"desk\" or \"paper\", got '{p}'"
                )));
            }
        }
        let out_dir = match std::env::var_os(OUT_ROOT_ENV) {
            Some(root) => PathBuf::from(root).join(&self.out_dir),
            None => self.out_dir.clone(),
        };
        Ok(ResolvedConfig {
            vit,
            config_hash,
            out_dir,
            raw: self,
        })
    }
}

impl ModelSection {
    pub fn to_vit_config(&self) -> Result<ViTConfig> {
        let mut cfg = match &self.arch {
            Some(name) => ViTConfig::preset(name)?,
            None => ViTConfig::desk(),
        };
        if let Some(v) = self.blocks {
            cfg.blocks = v;
        }
        if let Some(v) = self.dim {
            cfg.dim = v;
        }
        if let Some(v) = self.heads {
            cfg.heads = v;
            cfg.head_dim = cfg.dim / v.max(1);
        } else if self.dim.is_some() {
            cfg.head_dim = cfg.dim / cfg.heads;
        }
        if let Some(v) = self.patch {
            cfg.patch = v;
        }
        if let Some(v) = self.img {
            cfg.img = v;
        }
        if let Some(v) = self.classes {
            cfg.classes = v;
        }
        if let Some(v) = self.use_cls {
            cfg.use_cls = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl ScheduleSection {
    /// Materialize the fine-tuning schedule with profile defaults.
    pub fn to_schedule(&self, final_ratio: f64) -> Result<Schedule> {
        let mut s = match self.profile.as_deref() {
            Some("paper") => Schedule::paper(final_ratio),
            _ => Schedule::desk(
                self.epochs.unwrap_or(40),
                self.batch.unwrap_or(32),
                final_ratio,
            ),
        };
        if let Some(v) = self.epochs {
            s.epochs = v;
        }
        if let Some(v) = self.batch {
            s.batch = v;
        }
        if let Some(v) = self.base_lr {
            s.base_lr = v;
        }
        if let Some(v) = self.weight_decay {
            s.weight_decay = v;
        }
        if let Some(v) = self.beta1 {
            s.beta1 = v;
        }
        if let Some(v) = self.beta1_compactor {
            s.beta1_compactor = v;
        }
        if let Some(v) = self.beta2 {
            s.beta2 = v;
        }
        if let Some(v) = self.lr_warmup_frac {
            s.lr_warmup_frac = v;
        }
        if let Some(v) = self.prune_warmup_frac {
            s.prune_warmup_frac = v;
        }
        if let Some(v) = self.interval_iters {
            s.interval_iters = v;
        }
        if let Some(v) = self.ratio_step {
            s.ratio_step = Some(v);
        }
        if let Some(v) = self.ramp_end_frac {
            s.ramp_end_frac = v;
        }
        if let Some(v) = self.lambda {
            s.lambda = v;
        }
        if let Some(v) = self.distill_alpha {
            s.distill_alpha = v;
        }
        if let Some(v) = self.flip_augment {
            s.flip_augment = v;
        }
        s.validate()?;
        Ok(s)
    }

    pub fn pretrain_schedule(&self) -> Result<Schedule> {
        let mut s = self.to_schedule(0.0)?;
        s.epochs = self.pretrain_epochs.unwrap_or(12);
        s.final_ratio = 0.0;
        s.distill_alpha = 0.0;
        s.validate()?;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 7
out_dir = "runs/x"

[model]
arch = "desk"

[data]
source = "synth"
"#;

    #[test]
    fn minimal_config_parses() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        let resolved = cfg.resolve("abc".into()).unwrap();
        assert_eq!(resolved.vit, ViTConfig::desk());
        assert_eq!(resolved.raw.seed, 7);
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = format!("{MINIMAL}\nbogus_key = 3\n");
        assert!(RunConfig::parse(&bad).is_err());
        let bad_nested = MINIMAL.replace("[data]\nsource = \"synth\"", "[data]\nsource = \"synth\"\nwat = 1");
        assert!(RunConfig::parse(&bad_nested).is_err());
    }

    #[test]
    fn manifest_source_requires_existing_file() {
        let cfg = RunConfig::parse(
            &MINIMAL.replace("source = \"synth\"", "source = \"manifest\"\nmanifest = \"/definitely/not/here.bin\""),
        )
        .unwrap();
        assert!(cfg.resolve("h".into()).is_err());
    }

    #[test]
    fn overrides_apply() {
        let text = r#"
seed = 1
out_dir = "o"

[model]
arch = "desk"
blocks = 2
dim = 32
heads = 2

[data]
source = "synth"

[schedule]
epochs = 9
base_lr = 1e-3
"#;
        let cfg = RunConfig::parse(text).unwrap().resolve("h".into()).unwrap();
        assert_eq!(cfg.vit.blocks, 2);
        assert_eq!(cfg.vit.head_dim, 16);
        let sched = cfg.raw.schedule.to_schedule(0.1).unwrap();
        assert_eq!(sched.epochs, 9);
        assert_eq!(sched.base_lr, 1e-3);
    }

    #[test]
    fn paper_profile_defaults() {
        let sched = ScheduleSection {
            profile: Some("paper".into()),
            ..Default::default()
        }
        .to_schedule(0.25)
        .unwrap();
        assert_eq!(sched.epochs, 300);
        assert_eq!(sched.interval_iters, 25);
        assert_eq!(sched.ratio_step, Some(0.00025));
        assert_eq!(sched.base_lr, 1e-4);
    }
}
