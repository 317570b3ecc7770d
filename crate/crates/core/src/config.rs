//! Run configuration, loaded from TOML.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::backbones::{presets, BuildVariant, NetworkConfig};
use crate::cost::CostTarget;
use crate::data::{Augment, CifarKind, DatasetKind, Normalization, SynthConfig};
use crate::error::{Error, Result};
use crate::spm::BinarizerConfig;

/// Variant names as they appear in config files and on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VariantName {
    Adaptive,
    FixedK,
    Static,
    Unpruned,
}

impl VariantName {
    pub const ALL: [VariantName; 4] = [
        VariantName::Adaptive,
        VariantName::FixedK,
        VariantName::Static,
        VariantName::Unpruned,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantName::Adaptive => "adaptive",
            VariantName::FixedK => "fixed-k",
            VariantName::Static => "static",
            VariantName::Unpruned => "unpruned",
        }
    }
}

impl fmt::Display for VariantName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VariantName::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected adaptive, fixed-k, static or unpruned)")))
    }
}

impl Serialize for VariantName {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for VariantName {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    Pretrain,
    Warmup,
    Finetune,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Pretrain, Phase::Warmup, Phase::Finetune];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Warmup => "warmup",
            Phase::Finetune => "finetune",
        }
    }

    pub fn previous(self) -> Option<Phase> {
        match self {
            Phase::Pretrain => None,
            Phase::Warmup => Some(Phase::Pretrain),
            Phase::Finetune => Some(Phase::Warmup),
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Phase::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Usage(format!("unknown phase `{s}` (expected pretrain, warmup or finetune)")))
    }
}

/// Optimizer schedule of one phase: step decay every `decay_every` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseSchedule {
    pub epochs: usize,
    pub lr: f64,
    pub decay_every: usize,
    pub decay_factor: f64,
}

impl Default for PhaseSchedule {
    fn default() -> Self {
        Self {
            epochs: 1,
            lr: 0.1,
            decay_every: 100,
            decay_factor: 0.1,
        }
    }
}

impl PhaseSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = epoch.checked_div(self.decay_every).unwrap_or(0);
        self.lr * self.decay_factor.powi(drops as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedules {
    pub pretrain: PhaseSchedule,
    pub warmup: PhaseSchedule,
    pub finetune: PhaseSchedule,
}

impl Schedules {
    pub fn get(&self, phase: Phase) -> &PhaseSchedule {
        match phase {
            Phase::Pretrain => &self.pretrain,
            Phase::Warmup => &self.warmup,
            Phase::Finetune => &self.finetune,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Preset name; ignored when `network` is given.
    pub backbone: String,
    /// Explicit network description.
    pub network: Option<NetworkConfig>,
    /// Overrides the preset's reduction rate.
    pub reduction_rate: Option<usize>,
    pub dataset: DatasetKind,
    pub data_dir: Option<PathBuf>,
    pub synthetic: SynthConfig,
    pub variant: VariantName,
    /// Kept fraction per layer for the `fixed-k` variant.
    pub fixed_k: f64,
    pub budget_fraction: f64,
    pub lambda0: f64,
    pub estimator_window: usize,
    pub cost_target: CostTarget,
    pub momentum: f64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub augment: Option<Augment>,
    pub normalization: Normalization,
    pub binarizer: BinarizerConfig,
    /// Mean saliency the heads are calibrated to before warmup; 0 keeps the
    /// random initialization.
    pub saliency_init: f64,
    pub phases: Schedules,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            backbone: "tiny".into(),
            network: None,
            reduction_rate: None,
            dataset: DatasetKind::Synthetic,
            data_dir: None,
            synthetic: SynthConfig::default(),
            variant: VariantName::Adaptive,
            fixed_k: 0.5,
            budget_fraction: 0.5,
            lambda0: 0.01,
            estimator_window: 20,
            cost_target: CostTarget::Saliency,
            momentum: 0.9,
            batch_size: 256,
            eval_batch_size: 256,
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            augment: Some(Augment::default()),
            normalization: Normalization::default(),
            binarizer: BinarizerConfig::default(),
            saliency_init: 1.0,
            phases: Schedules::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Usage(format!("config file {} not found", path.display())),
            _ => Error::Io(e),
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn num_classes(&self) -> usize {
        match self.dataset {
            DatasetKind::Synthetic => self.synthetic.classes,
            DatasetKind::Cifar10 => CifarKind::Cifar10.num_classes(),
            DatasetKind::Cifar100 => CifarKind::Cifar100.num_classes(),
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        match self.dataset {
            DatasetKind::Synthetic => [3, self.synthetic.image_size, self.synthetic.image_size],
            _ => crate::data::CIFAR_SHAPE,
        }
    }

    pub fn network_config(&self) -> Result<NetworkConfig> {
        let mut net = match &self.network {
            Some(n) => n.clone(),
            None => presets::by_name(&self.backbone, self.num_classes(), self.input_shape())?,
        };
        if let Some(r) = self.reduction_rate {
            net.reduction_rate = r;
        }
        if net.input_shape != self.input_shape() {
            return Err(Error::Config(format!(
                "network input shape {:?} does not match the dataset's {:?}",
                net.input_shape,
                self.input_shape()
            )));
        }
        if net.num_classes != self.num_classes() {
            return Err(Error::Config(format!(
                "network has {} classes but the dataset has {}",
                net.num_classes,
                self.num_classes()
            )));
        }
        Ok(net)
    }

    pub fn build_variant(&self) -> BuildVariant {
        match self.variant {
            VariantName::Adaptive => BuildVariant::Adaptive,
            VariantName::FixedK => BuildVariant::FixedK(self.fixed_k),
            VariantName::Static => BuildVariant::Static,
            VariantName::Unpruned => BuildVariant::Unpruned,
        }
    }

    pub fn augment(&self) -> Augment {
        self.augment.unwrap_or(Augment { crop_pad: 0, flip: false })
    }

    /// Checks everything that can be checked without data.
    pub fn validate(&self) -> Result<()> {
        if !(self.budget_fraction > 0.0 && self.budget_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "budget out of range: budget_fraction must lie in (0, 1], got {}",
                self.budget_fraction
            )));
        }
        if !(self.lambda0 > 0.0 && self.lambda0.is_finite()) {
            return Err(Error::Config(format!("lambda0 must be positive, got {}", self.lambda0)));
        }
        if self.estimator_window == 0 {
            return Err(Error::Config("estimator_window must be at least 1".into()));
        }
        if self.batch_size < 2 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 2 (batch norm) and eval_batch_size positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.variant == VariantName::FixedK && !(self.fixed_k > 0.0 && self.fixed_k <= 1.0) {
            return Err(Error::Config(format!("fixed_k must lie in (0, 1], got {}", self.fixed_k)));
        }
        for phase in Phase::ALL {
            let s = self.phases.get(phase);
            if !(s.lr > 0.0 && s.lr.is_finite() && s.decay_factor > 0.0) {
                return Err(Error::Config(format!("phase {phase}: lr and decay_factor must be positive")));
            }
        }
        if self.dataset != DatasetKind::Synthetic && self.data_dir.is_none() {
            return Err(Error::Config("cifar datasets need `data_dir`".into()));
        }
        self.binarizer.validate()?;
        self.normalization.validate()?;
        let net = self.network_config()?;
        let plan = net.plan()?;
        if self.variant == VariantName::FixedK {
            for c in plan.iter().filter(|c| c.gateable) {
                crate::spm::fixed_k_select(&vec![0.0; c.c_out], self.fixed_k)
                    .map_err(|e| Error::Config(format!("{}: {e}", c.name)))?;
            }
        }
        Ok(())
    }

    pub fn checkpoint_path(&self, phase: Phase) -> PathBuf {
        self.out_dir.join(format!("{phase}.ckpt"))
    }

    pub fn metrics_path(&self, phase: Phase) -> PathBuf {
        self.out_dir.join(format!("{phase}_metrics.csv"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lambda0, 0.01);
        assert_eq!(cfg.batch_size, 256);
        assert_eq!(cfg.phases.pretrain.lr, 0.1);
        let back = TrainConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = TrainConfig::from_toml(
            "variant = \"fixed-k\"\nfixed_k = 0.25\n[phases.finetune]\nepochs = 3\nlr = 0.01\n",
        )
        .unwrap();
        assert_eq!(cfg.variant, VariantName::FixedK);
        assert_eq!(cfg.phases.finetune.epochs, 3);
        assert_eq!(cfg.phases.finetune.decay_every, 100);
        assert_eq!(cfg.estimator_window, 20);
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_unknown_keys_and_bad_budgets() {
        assert!(matches!(TrainConfig::from_toml("bogus = 1"), Err(Error::Config(_))));
        assert!(TrainConfig::from_toml("variant = \"sparse\"").is_err());
        for b in [1.5, 0.0, -0.1, f64::NAN] {
            let cfg = TrainConfig {
                budget_fraction: b,
                ..Default::default()
            };
            let msg = cfg.validate().unwrap_err().to_string();
            assert!(msg.contains("budget out of range"), "{msg}");
        }
    }

    #[test]
    fn lr_steps_down() {
        let s = PhaseSchedule {
            epochs: 300,
            lr: 0.1,
            decay_every: 100,
            decay_factor: 0.1,
        };
        assert_eq!(s.lr_at(0), 0.1);
        assert_eq!(s.lr_at(99), 0.1);
        assert!((s.lr_at(100) - 0.01).abs() < 1e-15);
        assert!((s.lr_at(250) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn fixed_k_that_empties_a_layer_is_rejected() {
        let cfg = TrainConfig {
            variant: VariantName::FixedK,
            fixed_k: 0.01,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
