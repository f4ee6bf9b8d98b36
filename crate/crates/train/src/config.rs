//! Run configuration, read from TOML. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use lstcn_core::{AdamConfig, DType, LossConfig, LrSchedule, ModelConfig, PoolMode, Variant};
use lstcn_data::{Condition, Protocol, SeqFilter, SynthProtocol};
use serde::{Deserialize, Serialize};

use crate::TrainError;

/// Where sequences come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// A manifest written by `synth` or by hand. Relative paths resolve
    /// against the config file's directory.
    Manifest {
        path: PathBuf,
        /// Crop, rescale and center raw frames on load.
        #[serde(default)]
        normalize: bool,
    },
    /// Generated in memory.
    Synthetic { protocol: SynthProtocol },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Subjects used for training, as ids or inclusive numeric ranges
    /// such as `"001-074"`. Empty means every subject.
    #[serde(default)]
    pub train_subjects: Vec<String>,
    /// Subjects used for evaluation, same syntax.
    #[serde(default)]
    pub eval_subjects: Vec<String>,
    pub train_filter: SeqFilter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub protocol: Protocol,
    /// Count probe/gallery pairs recorded from the same view in aggregates.
    pub include_same_view: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub data: DataConfig,
    pub eval: EvalConfig,
    /// Subjects per batch.
    pub p: usize,
    /// Clips per subject.
    pub k: usize,
    pub frames_per_clip: usize,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    pub lr_schedule: LrSchedule,
    pub max_iters: u64,
    pub seed: u64,
    pub deterministic: bool,
    /// Applied on top of `model.branch` / `model.head` when set.
    #[serde(default)]
    pub variant: Option<Variant>,
    pub precision: Precision,
    /// Write a checkpoint every this many iterations; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Architecture. `n_classes` is replaced by the number of training subjects.
    pub model: ModelConfig,
}

pub const MAX_BATCH: usize = 1024;

impl TrainConfig {
    pub fn from_text(text: &str) -> Result<Self, TrainError> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and resolves a relative manifest path against its directory.
    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut cfg = Self::from_text(&text)
            .map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?;
        if let DataSource::Manifest { path: m, .. } = &mut cfg.data.source {
            if m.is_relative() {
                *m = path.parent().unwrap_or(Path::new(".")).join(&*m);
            }
        }
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The model configuration with the variant applied.
    pub fn effective_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        if let Some(v) = self.variant {
            v.apply(&mut m);
        }
        m
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.p < 2 {
            return bad(format!(
                "p = {} but a batch needs at least 2 subjects",
                self.p
            ));
        }
        if self.k < 1 {
            return bad("k must be at least 1".into());
        }
        if self.p * self.k < 4 {
            return bad(format!("p * k = {} must be at least 4", self.p * self.k));
        }
        if self.p * self.k > MAX_BATCH {
            return bad(format!("p * k = {} exceeds {MAX_BATCH}", self.p * self.k));
        }
        if !(3..=1000).contains(&self.frames_per_clip) {
            return bad(format!(
                "frames_per_clip {} outside 3..=1000",
                self.frames_per_clip
            ));
        }
        let l = &self.loss;
        if !(l.margin > 0.0 && l.margin.is_finite()) {
            return bad(format!("loss.margin {} must be positive", l.margin));
        }
        if !(l.gamma >= 0.0 && l.gamma.is_finite()) {
            return bad(format!("loss.gamma {} must be >= 0", l.gamma));
        }
        if !(l.lambda >= 0.0 && l.lambda.is_finite()) {
            return bad(format!("loss.lambda {} must be >= 0", l.lambda));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return bad(format!(
                "adam betas ({}, {}) must lie in [0, 1)",
                a.beta1, a.beta2
            ));
        }
        if !(a.eps > 0.0) {
            return bad(format!("adam.eps {} must be positive", a.eps));
        }
        self.lr_schedule.validate().map_err(TrainError::Config)?;
        if self.max_iters == 0 {
            return bad("max_iters must be positive".into());
        }
        if self.data.train_filter.conditions.is_empty() {
            return bad("data.train_filter.conditions is empty".into());
        }
        parse_subjects(&self.data.train_subjects)?;
        parse_subjects(&self.data.eval_subjects)?;
        self.effective_model()
            .validate()
            .map_err(|e| TrainError::Config(format!("model: {e}")))?;
        Ok(())
    }

    /// Desk-scale run on the motion-only synthetic walkers: sequences 1 and 2
    /// train, 3 is the gallery and 4 the probe, both views.
    pub fn synthetic_default() -> Self {
        let protocol = SynthProtocol::default();
        let filter = |idx: Vec<u32>| SeqFilter {
            conditions: protocol.conditions.clone(),
            views: vec![],
            seq_indices: idx,
        };
        TrainConfig {
            data: DataConfig {
                train_filter: filter(vec![1, 2]),
                source: DataSource::Synthetic {
                    protocol: protocol.clone(),
                },
                train_subjects: vec![],
                eval_subjects: vec![],
            },
            eval: EvalConfig {
                protocol: Protocol::Synthetic {
                    gallery: filter(vec![3]),
                    probe: filter(vec![4]),
                },
                include_same_view: true,
            },
            p: 4,
            k: 2,
            frames_per_clip: 30,
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            lr_schedule: LrSchedule::new(vec![(0, 0.01), (800, 0.001), (1500, 0.0001)])
                .expect("valid"),
            max_iters: 2000,
            seed: 0,
            deterministic: true,
            variant: None,
            precision: Precision::F64,
            checkpoint_every: 500,
            model: desk_model(),
        }
    }

    /// Full-size network with the long schedule, for the real CASIA-B data.
    pub fn casia_b_default(manifest: PathBuf) -> Self {
        TrainConfig {
            data: DataConfig {
                source: DataSource::Manifest {
                    path: manifest,
                    normalize: true,
                },
                train_subjects: vec!["001-074".into()],
                eval_subjects: vec!["075-124".into()],
                train_filter: SeqFilter {
                    conditions: vec![Condition::Nm, Condition::Bg, Condition::Cl],
                    views: vec![],
                    seq_indices: vec![],
                },
            },
            eval: EvalConfig {
                protocol: Protocol::CasiaB,
                include_same_view: false,
            },
            p: 8,
            k: 8,
            frames_per_clip: 30,
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            lr_schedule: LrSchedule::new(vec![(0, 0.1), (20_000, 0.01), (40_000, 0.001)])
                .expect("valid"),
            max_iters: 60_000,
            seed: 0,
            deterministic: true,
            variant: None,
            precision: Precision::F32,
            checkpoint_every: 5000,
            model: ModelConfig::default(),
        }
    }
}

/// Small network used for the synthetic experiments.
pub fn desk_model() -> ModelConfig {
    ModelConfig {
        stem_channels: 4,
        static_channels: [8, 16],
        lstc_channels: [8, 16],
        stem_stride: 2,
        lstc_kernel: 5,
        embed_dim: 16,
        static_strips: 8,
        n_classes: 10,
        strip_pool: PoolMode::Max,
        temporal_pool: PoolMode::Max,
        ..ModelConfig::default()
    }
}

/// Expands ids and inclusive numeric ranges (`"001-074"`). Range endpoints
/// keep the zero-padding width of the first endpoint.
pub fn parse_subjects(specs: &[String]) -> Result<Vec<String>, TrainError> {
    let mut out = Vec::new();
    for s in specs {
        match s.split_once('-') {
            Some((a, b)) => {
                let (lo, hi) = match (a.parse::<u32>(), b.parse::<u32>()) {
                    (Ok(lo), Ok(hi)) if lo <= hi => (lo, hi),
                    _ => return Err(TrainError::Config(format!("bad subject range {s:?}"))),
                };
                out.extend((lo..=hi).map(|i| format!("{i:0w$}", w = a.len())));
            }
            None if !s.is_empty() => out.push(s.clone()),
            None => return Err(TrainError::Config("empty subject id".into())),
        }
    }
    out.sort();
    out.dedup();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        for cfg in [
            TrainConfig::synthetic_default(),
            TrainConfig::casia_b_default(PathBuf::from("data/manifest.tsv")),
        ] {
            cfg.validate().unwrap();
            let back = TrainConfig::from_text(&cfg.to_text()).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn unknown_key_rejected() {
        let text = TrainConfig::synthetic_default()
            .to_text()
            .replace("max_iters", "max_iter");
        assert!(TrainConfig::from_text(&text).is_err());
        let text = format!("bogus = 1\n{}", TrainConfig::synthetic_default().to_text());
        assert!(TrainConfig::from_text(&text).is_err());
    }

    #[test]
    fn small_batch_rejected() {
        let mut cfg = TrainConfig::synthetic_default();
        cfg.p = 3;
        cfg.k = 1;
        assert!(cfg.validate().is_err());
        cfg.p = 2;
        cfg.k = 2;
        cfg.validate().unwrap();
    }

    #[test]
    fn subject_ranges() {
        let ids = parse_subjects(&["001-003".into(), "010".into(), "002".into()]).unwrap();
        assert_eq!(ids, ["001", "002", "003", "010"]);
        assert!(parse_subjects(&["5-2".into()]).is_err());
        assert_eq!(parse_subjects(&["075-124".into()]).unwrap().len(), 50);
    }
}
