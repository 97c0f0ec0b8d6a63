//! Flat JSON run configuration.

use std::path::{Path, PathBuf};

use notecoder_core::cohort::Split;
use notecoder_core::encoder::EncoderConfig;
use notecoder_core::heads::{HeadConfig, HeadKind, TrainConfig};
use notecoder_core::numerics::AdamWConfig;
use notecoder_core::pretrain::{MaskingPolicy, PretrainConfig};
use notecoder_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::synth::SynthConfig;

/// A preset name (`small`, `big`, `desk`) or a full inline configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EncoderChoice {
    Preset(String),
    Inline(EncoderConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Labeled notes, JSON lines.
    pub notes: Option<PathBuf>,
    /// Unlabeled notes for pretraining; `notes` when unset.
    pub pretrain_notes: Option<PathBuf>,
    pub descriptions: Option<PathBuf>,
    pub chronic: Option<PathBuf>,
    /// `patient_id,split` CSV; computed from the seed when unset.
    pub splits: Option<PathBuf>,
    /// Read when present, otherwise written by `build-vocab`.
    pub vocab: Option<PathBuf>,
    pub comparison_vocab: Option<PathBuf>,
    pub output_dir: PathBuf,

    pub vocab_size: usize,
    pub max_len: usize,
    pub min_label_count: u64,
    pub excluded_categories: Vec<String>,
    pub split_ratios: (f64, f64, f64),

    pub encoder: EncoderChoice,
    pub head: HeadKind,
    pub head_params: HeadConfig,

    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_proportion: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Encoder checkpoint to fine-tune from; scratch init when unset.
    pub init_checkpoint: Option<PathBuf>,

    pub pretrain_lr: f64,
    pub pretrain_epochs: usize,
    pub pretrain_batch_size: usize,
    pub pretrain_warmup_proportion: f64,
    pub pretrain_pairs_per_doc: usize,
    pub pretrain_log_every: u64,
    pub mask_prob: f64,

    pub bin_width: f64,
    pub high_auc_threshold: f64,
    pub low_frequency_max_count: u64,
    pub eval_split: Split,

    pub synth: SynthConfig,
    pub synth_train: usize,
    pub synth_dev: usize,
    pub synth_test: usize,
    pub synth_pretrain: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            notes: None,
            pretrain_notes: None,
            descriptions: None,
            chronic: None,
            splits: None,
            vocab: None,
            comparison_vocab: None,
            output_dir: PathBuf::from("run"),
            vocab_size: 20_000,
            max_len: 128,
            min_label_count: 10,
            excluded_categories: Vec::new(),
            split_ratios: notecoder_core::cohort::PAPER_SPLIT,
            encoder: EncoderChoice::Preset("small".into()),
            head: HeadKind::Xml,
            head_params: HeadConfig::default(),
            lr: 2e-5,
            epochs: 3,
            batch_size: 32,
            warmup_proportion: 0.1,
            weight_decay: AdamWConfig::default().weight_decay,
            seed: 0,
            init_checkpoint: None,
            pretrain_lr: 1e-4,
            pretrain_epochs: 2,
            pretrain_batch_size: 32,
            pretrain_warmup_proportion: 0.1,
            pretrain_pairs_per_doc: 1,
            pretrain_log_every: 10,
            mask_prob: 0.15,
            bin_width: 0.05,
            high_auc_threshold: notecoder_core::eval::DEFAULT_HIGH_AUC,
            low_frequency_max_count: 50,
            eval_split: Split::Test,
            synth: SynthConfig::default(),
            synth_train: 2000,
            synth_dev: 500,
            synth_test: 500,
            synth_pretrain: 2000,
        }
    }
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    /// Parses `path`; relative paths inside are taken from the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        for p in [
            &mut cfg.notes,
            &mut cfg.pretrain_notes,
            &mut cfg.descriptions,
            &mut cfg.chronic,
            &mut cfg.splits,
            &mut cfg.vocab,
            &mut cfg.comparison_vocab,
            &mut cfg.init_checkpoint,
        ] {
            resolve(&base, p);
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    /// Range checks and existence of every input file.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.lr > 0.0) || !(self.pretrain_lr > 0.0) {
            problems.push("learning rates must be > 0".to_string());
        }
        if self.epochs < 1 || self.pretrain_epochs < 1 {
            problems.push("epochs must be >= 1".into());
        }
        if self.batch_size < 1 || self.pretrain_batch_size < 1 {
            problems.push("batch sizes must be >= 1".into());
        }
        if self.max_len < notecoder_core::corpus::MIN_CHUNK_LEN {
            problems.push(format!("max_len {} must be >= 8", self.max_len));
        }
        if self.vocab_size < 1 {
            problems.push("vocab_size must be >= 1".into());
        }
        if self.min_label_count < 1 {
            problems.push("min_label_count must be >= 1".into());
        }
        for (name, v) in [
            ("warmup_proportion", self.warmup_proportion),
            ("pretrain_warmup_proportion", self.pretrain_warmup_proportion),
        ] {
            if !(0.0..=1.0).contains(&v) {
                problems.push(format!("{name} must be in [0,1]"));
            }
        }
        if !(self.bin_width > 0.0 && self.bin_width <= 1.0) {
            problems.push("bin_width must be in (0,1]".into());
        }
        for (name, p) in [
            ("notes", &self.notes),
            ("pretrain_notes", &self.pretrain_notes),
            ("descriptions", &self.descriptions),
            ("chronic", &self.chronic),
            ("splits", &self.splits),
            ("comparison_vocab", &self.comparison_vocab),
            ("init_checkpoint", &self.init_checkpoint),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    problems.push(format!("{name}: {} does not exist", p.display()));
                }
            }
        }
        if let EncoderChoice::Preset(name) = &self.encoder {
            if let Err(e) = EncoderConfig::by_name(name, 1) {
                problems.push(e.to_string());
            }
        }
        if let Err(e) = self.head_params.validate() {
            problems.push(e.to_string());
        }
        if let Err(e) = self.synth.validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.vocab.clone().unwrap_or_else(|| self.output_dir.join("vocab.txt"))
    }

    pub fn require<'a>(&self, name: &str, p: &'a Option<PathBuf>) -> Result<&'a Path> {
        p.as_deref()
            .ok_or_else(|| Error::InvalidConfig(format!("config field {name:?} is required for this command")))
    }

    /// Encoder shape for a vocabulary of `vocab_size` entries. Presets get
    /// positions for at least `max_len` tokens.
    pub fn encoder_config(&self, vocab_size: usize) -> Result<EncoderConfig> {
        let cfg = match &self.encoder {
            EncoderChoice::Preset(name) => {
                let mut c = EncoderConfig::by_name(name, vocab_size)?;
                c.max_len = c.max_len.max(self.max_len);
                c
            }
            EncoderChoice::Inline(c) => {
                if c.vocab_size != vocab_size {
                    return Err(Error::InvalidConfig(format!(
                        "inline encoder vocab_size {} but vocabulary has {vocab_size} entries",
                        c.vocab_size
                    )));
                }
                c.clone()
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            peak_lr: self.lr,
            warmup_proportion: self.warmup_proportion,
            adamw: self.adamw(),
            max_len: self.max_len,
            ..TrainConfig::default()
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            batch_size: self.pretrain_batch_size,
            peak_lr: self.pretrain_lr,
            warmup_proportion: self.pretrain_warmup_proportion,
            adamw: self.adamw(),
            masking: MaskingPolicy {
                select_prob: self.mask_prob,
                ..MaskingPolicy::default()
            },
            pairs_per_doc: self.pretrain_pairs_per_doc,
            log_every: self.pretrain_log_every,
        }
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let cfg = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&cfg.to_pretty_json()).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_fields_and_bad_ranges_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"learning_rate": 1}"#).is_err());
        let cfg: RunConfig = serde_json::from_str(r#"{"lr": 0, "epochs": 0, "max_len": 4}"#).unwrap();
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("learning rates") && msg.contains("epochs") && msg.contains("max_len"), "{msg}");
    }

    #[test]
    fn missing_input_file_is_reported() {
        let cfg: RunConfig = serde_json::from_str(r#"{"notes": "/nonexistent/notes.jsonl"}"#).unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("notes"));
    }

    #[test]
    fn encoder_choice_accepts_preset_or_inline() {
        let cfg: RunConfig = serde_json::from_str(r#"{"encoder": "desk", "max_len": 256}"#).unwrap();
        let e = cfg.encoder_config(50).unwrap();
        assert_eq!((e.hidden_size, e.max_len, e.vocab_size), (64, 256, 50));
        let inline = serde_json::to_value(EncoderConfig::desk(50)).unwrap();
        let cfg: RunConfig = serde_json::from_value(serde_json::json!({ "encoder": inline })).unwrap();
        assert_eq!(cfg.encoder_config(50).unwrap(), EncoderConfig::desk(50));
        assert!(cfg.encoder_config(51).is_err());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"notes": "n.jsonl", "output_dir": "out"}"#).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.notes.unwrap(), dir.path().join("n.jsonl"));
        assert_eq!(cfg.output_dir, dir.path().join("out"));
    }
}
