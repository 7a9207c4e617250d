use std::path::Path;

use crate::encoders::{text_enum, Arch, EncoderConfig, ModelSpec, ProjectorKind};
use crate::kv::{KvDoc, KvError};
use crate::losses::{Contrastive, DEFAULT_MARGIN, DEFAULT_TAU};
use crate::sampler::NegativeStrategy;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    BaselineBce,
    AttentionBceMargin,
    ContrastiveNtXent,
    ContrastiveInfoNce,
}

text_enum!(Regime {
    BaselineBce => "baseline_bce",
    AttentionBceMargin => "attention_bce_margin",
    ContrastiveNtXent => "contrastive_ntxent",
    ContrastiveInfoNce => "contrastive_infonce",
});

impl Regime {
    pub fn contrastive(self) -> Option<Contrastive> {
        match self {
            Regime::ContrastiveNtXent => Some(Contrastive::NtXent),
            Regime::ContrastiveInfoNce => Some(Contrastive::InfoNce),
            _ => None,
        }
    }

    pub fn default_arch(self) -> Arch {
        match self {
            Regime::BaselineBce => Arch::Baseline,
            _ => Arch::Attention,
        }
    }

    pub fn default_batch_size(self) -> usize {
        match self {
            Regime::BaselineBce => 128,
            Regime::AttentionBceMargin => 32,
            Regime::ContrastiveNtXent | Regime::ContrastiveInfoNce => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub regime: Regime,
    pub arch: Arch,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub margin: f64,
    pub tau: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub projector: ProjectorKind,
    /// Adds the audio-anchored contrastive term.
    pub symmetric: bool,
    pub negative_strategy: NegativeStrategy,
    /// Aligned pairs drawn per training video each epoch.
    pub pairs_per_video: usize,
    /// Aligned pairs per validation video (fixed across epochs).
    pub val_pairs_per_video: usize,
    pub lr_decay_patience: usize,
    pub lr_decay_factor: f64,
    pub min_lr: f64,
    /// Fraction of the training manifest's videos held out for validation.
    pub val_fraction: f64,
    /// Items per forward pass when embedding for evaluation.
    pub eval_chunk: usize,
    pub encoder: EncoderConfig,
}

impl TrainConfig {
    pub fn new(regime: Regime) -> Self {
        TrainConfig {
            regime,
            arch: regime.default_arch(),
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: regime.default_batch_size(),
            margin: DEFAULT_MARGIN,
            tau: DEFAULT_TAU,
            patience: 20,
            max_epochs: 200,
            seed: 0,
            projector: ProjectorKind::Nonlinear,
            symmetric: false,
            negative_strategy: NegativeStrategy::DiffLabel,
            pairs_per_video: usize::MAX,
            val_pairs_per_video: usize::MAX,
            lr_decay_patience: 10,
            lr_decay_factor: 0.5,
            min_lr: 1e-6,
            val_fraction: 0.1,
            eval_chunk: 64,
            encoder: EncoderConfig::default(),
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        let contrastive = self.regime.contrastive().is_some();
        ModelSpec {
            arch: self.arch,
            encoder: self.encoder.clone(),
            correlation_head: !contrastive,
            projector: contrastive.then_some(self.projector),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("lr", self.lr),
            ("tau", self.tau),
            ("margin", self.margin),
            ("lr_decay_factor", self.lr_decay_factor),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v >= 0.0) || (name != "lr" && v == 0.0) {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size < 2 {
            return Err(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.regime.contrastive().is_none() && self.batch_size % 2 != 0 {
            return Err(format!("classification batches must be even, got {}", self.batch_size));
        }
        if self.patience == 0 || self.max_epochs == 0 || self.pairs_per_video == 0 || self.val_pairs_per_video == 0 {
            return Err("patience, max_epochs and pairs per video must be positive".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(format!("val_fraction must be in [0, 1), got {}", self.val_fraction));
        }
        self.encoder.validate()
    }

    const KEYS: &'static [&'static str] = &[
        "regime",
        "arch",
        "lr",
        "momentum",
        "weight_decay",
        "batch_size",
        "margin",
        "tau",
        "patience",
        "max_epochs",
        "seed",
        "projector",
        "symmetric",
        "negative_strategy",
        "pairs_per_video",
        "val_pairs_per_video",
        "lr_decay_patience",
        "lr_decay_factor",
        "min_lr",
        "val_fraction",
        "eval_chunk",
    ];

    /// Reads a `key = value` config. `regime` is required; everything else has a default.
    pub fn from_kv(doc: &KvDoc) -> Result<Self, KvError> {
        let keys: Vec<&str> = Self::KEYS.iter().chain(EncoderConfig::KEYS).copied().collect();
        doc.check_keys(&keys)?;
        let regime: Regime = doc.require("regime")?;
        let d = TrainConfig::new(regime);
        let count = |key: &str, default: usize| -> Result<usize, KvError> {
            match doc.raw(key) {
                Some("all") => Ok(usize::MAX),
                _ => doc.get_or(key, default),
            }
        };
        Ok(TrainConfig {
            regime,
            arch: doc.get_or("arch", d.arch)?,
            lr: doc.get_or("lr", d.lr)?,
            momentum: doc.get_or("momentum", d.momentum)?,
            weight_decay: doc.get_or("weight_decay", d.weight_decay)?,
            batch_size: doc.get_or("batch_size", d.batch_size)?,
            margin: doc.get_or("margin", d.margin)?,
            tau: doc.get_or("tau", d.tau)?,
            patience: doc.get_or("patience", d.patience)?,
            max_epochs: doc.get_or("max_epochs", d.max_epochs)?,
            seed: doc.get_or("seed", d.seed)?,
            projector: doc.get_or("projector", d.projector)?,
            symmetric: doc.get_or("symmetric", d.symmetric)?,
            negative_strategy: doc.get_or("negative_strategy", d.negative_strategy)?,
            pairs_per_video: count("pairs_per_video", d.pairs_per_video)?,
            val_pairs_per_video: count("val_pairs_per_video", d.val_pairs_per_video)?,
            lr_decay_patience: doc.get_or("lr_decay_patience", d.lr_decay_patience)?,
            lr_decay_factor: doc.get_or("lr_decay_factor", d.lr_decay_factor)?,
            min_lr: doc.get_or("min_lr", d.min_lr)?,
            val_fraction: doc.get_or("val_fraction", d.val_fraction)?,
            eval_chunk: doc.get_or("eval_chunk", d.eval_chunk)?,
            encoder: EncoderConfig::from_kv(doc)?,
        })
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::default();
        let count = |n: usize| if n == usize::MAX { "all".to_string() } else { n.to_string() };
        doc.set("regime", self.regime);
        doc.set("arch", self.arch);
        doc.set("lr", self.lr);
        doc.set("momentum", self.momentum);
        doc.set("weight_decay", self.weight_decay);
        doc.set("batch_size", self.batch_size);
        doc.set("margin", self.margin);
        doc.set("tau", self.tau);
        doc.set("patience", self.patience);
        doc.set("max_epochs", self.max_epochs);
        doc.set("seed", self.seed);
        doc.set("projector", self.projector);
        doc.set("symmetric", self.symmetric);
        doc.set("negative_strategy", self.negative_strategy);
        doc.set("pairs_per_video", count(self.pairs_per_video));
        doc.set("val_pairs_per_video", count(self.val_pairs_per_video));
        doc.set("lr_decay_patience", self.lr_decay_patience);
        doc.set("lr_decay_factor", self.lr_decay_factor);
        doc.set("min_lr", self.min_lr);
        doc.set("val_fraction", self.val_fraction);
        doc.set("eval_chunk", self.eval_chunk);
        self.encoder.write_kv(&mut doc);
        doc
    }

    pub fn read(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let doc = KvDoc::parse(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        let cfg = TrainConfig::from_kv(&doc).map_err(|e| format!("{}: {e}", path.display()))?;
        cfg.validate().map_err(|e| format!("{}: {e}", path.display()))?;
        Ok(cfg)
    }
}
