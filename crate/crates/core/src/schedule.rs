//! Training recipes and learning-rate schedules.

use alloc::string::String;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ModelKind {
    MaskRcnn,
    MaskRcnnDsm,
    FasterRcnn,
    FasterRcnnDsm,
    Rsprompter,
    Balsam,
    /// DSM fused into the prompter input as well as the decoder input.
    BalsamVariantA,
    /// DSM fused into the prompter input only.
    BalsamVariantB,
}

impl ModelKind {
    pub const ALL: [ModelKind; 8] = [
        ModelKind::MaskRcnn,
        ModelKind::MaskRcnnDsm,
        ModelKind::FasterRcnn,
        ModelKind::FasterRcnnDsm,
        ModelKind::Rsprompter,
        ModelKind::Balsam,
        ModelKind::BalsamVariantA,
        ModelKind::BalsamVariantB,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::MaskRcnn => "mask_rcnn",
            ModelKind::MaskRcnnDsm => "mask_rcnn_dsm",
            ModelKind::FasterRcnn => "faster_rcnn",
            ModelKind::FasterRcnnDsm => "faster_rcnn_dsm",
            ModelKind::Rsprompter => "rsprompter",
            ModelKind::Balsam => "balsam",
            ModelKind::BalsamVariantA => "balsam_variant_a",
            ModelKind::BalsamVariantB => "balsam_variant_b",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(alloc::format!("unknown model kind {s}")))
    }

    pub fn uses_dsm(self) -> bool {
        !matches!(
            self,
            ModelKind::MaskRcnn | ModelKind::FasterRcnn | ModelKind::Rsprompter
        )
    }

    pub fn is_prompter(self) -> bool {
        matches!(
            self,
            ModelKind::Rsprompter
                | ModelKind::Balsam
                | ModelKind::BalsamVariantA
                | ModelKind::BalsamVariantB
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum DatasetId {
    Plantations,
    Sbl,
    Bci,
    /// Generated fixtures; recipes fall back to documented defaults.
    Synthetic,
}

impl DatasetId {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetId::Plantations => "plantations",
            DatasetId::Sbl => "sbl",
            DatasetId::Bci => "bci",
            DatasetId::Synthetic => "synthetic",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [
            DatasetId::Plantations,
            DatasetId::Sbl,
            DatasetId::Bci,
            DatasetId::Synthetic,
        ]
        .into_iter()
        .find(|d| d.as_str() == s)
        .ok_or_else(|| Error::InvalidConfig(alloc::format!("unknown dataset {s}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Adamw,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Warmup {
    pub start_lr: f64,
    /// length in epochs; fractional values are allowed
    pub epochs: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum Decay {
    None,
    /// Cosine annealing to zero at the final step.
    Cosine,
    /// Multiply by `factor` at every `every_epochs` boundary.
    Exponential { factor: f64, every_epochs: u32 },
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub model_kind: ModelKind,
    pub dataset_id: DatasetId,
    pub optimizer: OptimizerKind,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub warmup: Option<Warmup>,
    pub schedule: Decay,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub random_flip: bool,
    pub seed: u64,
    /// false when some value is a documented default rather than a published recipe value
    pub published_recipe: bool,
}

pub const DEFAULT_EXPONENTIAL_FACTOR: f64 = 0.9;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidConfig("max epochs must be at least 1".into()));
        }
        if let Some(w) = self.warmup {
            if !(w.start_lr > 0.0) || !(w.epochs >= 0.0) {
                return Err(Error::InvalidConfig("bad warmup".into()));
            }
        }
        if let Decay::Exponential { factor, every_epochs } = self.schedule {
            if !(factor > 0.0) || every_epochs == 0 {
                return Err(Error::InvalidConfig("bad exponential decay".into()));
            }
        }
        Ok(())
    }

    /// Faster R-CNN learning rate for training without pretrained weights.
    pub fn from_scratch(mut self) -> Self {
        if matches!(self.model_kind, ModelKind::FasterRcnn | ModelKind::FasterRcnnDsm) {
            self.base_lr = 5e-4;
        }
        self
    }

    pub fn schedule(&self, steps_per_epoch: usize) -> LrSchedule {
        LrSchedule {
            base_lr: self.base_lr,
            warmup: self.warmup,
            decay: self.schedule,
            steps_per_epoch: steps_per_epoch.max(1),
            max_epochs: self.max_epochs,
        }
    }

    pub fn label(&self) -> String {
        alloc::format!("{}/{}", self.model_kind.as_str(), self.dataset_id.as_str())
    }
}

/// Published recipe for a model and dataset. Pairs without one get the closest recipe with
/// `published_recipe` cleared.
pub fn make_recipe(model_kind: ModelKind, dataset_id: DatasetId) -> TrainConfig {
    use DatasetId::*;
    use ModelKind::*;
    let (epochs_known, max_epochs) = match (model_kind, dataset_id) {
        (MaskRcnn | MaskRcnnDsm, Plantations) => (true, 100),
        (MaskRcnn | MaskRcnnDsm, Sbl) => (true, 200),
        (MaskRcnn | MaskRcnnDsm, Bci) => (true, 300),
        (FasterRcnn | FasterRcnnDsm, Plantations) => (true, 100),
        (FasterRcnn | FasterRcnnDsm, Sbl) => (false, 200),
        (FasterRcnn | FasterRcnnDsm, Bci) => (false, 300),
        (_, Plantations) => (true, 50),
        (_, Sbl) => (true, 100),
        (_, Bci) => (true, 200),
        (_, Synthetic) => (false, 10),
    };
    let base = TrainConfig {
        model_kind,
        dataset_id,
        optimizer: OptimizerKind::Sgd,
        base_lr: 1e-4,
        momentum: 0.9,
        weight_decay: 5e-4,
        betas: (0.9, 0.999),
        warmup: None,
        schedule: Decay::None,
        batch_size: 32,
        max_epochs,
        random_flip: true,
        seed: 0,
        published_recipe: epochs_known,
    };
    match model_kind {
        MaskRcnn | MaskRcnnDsm => TrainConfig {
            // warmup length is unpublished; one epoch
            warmup: Some(Warmup {
                start_lr: 1e-6,
                epochs: 1.0,
            }),
            batch_size: if model_kind == MaskRcnn { 32 } else { 8 },
            ..base
        },
        FasterRcnn | FasterRcnnDsm => TrainConfig {
            optimizer: OptimizerKind::Adam,
            schedule: Decay::Exponential {
                factor: DEFAULT_EXPONENTIAL_FACTOR,
                every_epochs: 10,
            },
            batch_size: if model_kind == FasterRcnn { 32 } else { 16 },
            ..base
        },
        Rsprompter | Balsam | BalsamVariantA | BalsamVariantB => TrainConfig {
            optimizer: OptimizerKind::Adamw,
            base_lr: 1e-5,
            momentum: 0.0,
            weight_decay: 0.1,
            warmup: Some(Warmup {
                start_lr: 1e-8,
                epochs: 1.0,
            }),
            schedule: Decay::Cosine,
            batch_size: 2,
            ..base
        },
    }
}

/// Per-step learning rate: optional linear warmup, then the decay rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup: Option<Warmup>,
    pub decay: Decay,
    pub steps_per_epoch: usize,
    pub max_epochs: usize,
}

impl LrSchedule {
    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch * self.max_epochs
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup
            .map(|w| libm::round(w.epochs * self.steps_per_epoch as f64) as usize)
            .unwrap_or(0)
            .min(self.total_steps())
    }

    pub fn lr(&self, step: usize) -> f64 {
        let ws = self.warmup_steps();
        if let Some(w) = self.warmup {
            if step < ws {
                let t = step as f64 / ws as f64;
                return w.start_lr + (self.base_lr - w.start_lr) * t;
            }
        }
        match self.decay {
            Decay::None => self.base_lr,
            Decay::Cosine => {
                let span = self.total_steps().saturating_sub(ws);
                if span == 0 {
                    return self.base_lr;
                }
                let t = ((step - ws) as f64 / span as f64).min(1.0);
                self.base_lr * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * t))
            }
            Decay::Exponential {
                factor,
                every_epochs,
            } => {
                let epoch = step / self.steps_per_epoch;
                self.base_lr * libm::pow(factor, (epoch / every_epochs as usize) as f64)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_recipes() {
        let m = make_recipe(ModelKind::MaskRcnn, DatasetId::Plantations);
        assert_eq!(m.optimizer, OptimizerKind::Sgd);
        assert_eq!((m.base_lr, m.momentum, m.weight_decay), (1e-4, 0.9, 5e-4));
        assert_eq!(m.warmup.unwrap().start_lr, 1e-6);
        assert_eq!((m.batch_size, m.max_epochs), (32, 100));
        let d = make_recipe(ModelKind::MaskRcnnDsm, DatasetId::Plantations);
        assert_eq!(d.batch_size, 8);
        assert_eq!(TrainConfig { batch_size: 32, model_kind: ModelKind::MaskRcnn, ..d }, m);
        let b = make_recipe(ModelKind::Balsam, DatasetId::Bci);
        assert_eq!(b.optimizer, OptimizerKind::Adamw);
        assert_eq!((b.base_lr, b.weight_decay), (1e-5, 0.1));
        assert_eq!(b.warmup, Some(Warmup { start_lr: 1e-8, epochs: 1.0 }));
        assert_eq!(b.schedule, Decay::Cosine);
        assert_eq!((b.batch_size, b.max_epochs), (2, 200));
        let f = make_recipe(ModelKind::FasterRcnn, DatasetId::Plantations);
        assert_eq!(f.from_scratch().base_lr, 5e-4);
        assert!(!make_recipe(ModelKind::FasterRcnn, DatasetId::Bci).published_recipe);
    }

    #[test]
    fn warmup_endpoints_and_cosine_tail() {
        let b = make_recipe(ModelKind::Balsam, DatasetId::Plantations);
        let s = b.schedule(37);
        assert_eq!(s.lr(0), 1e-8);
        assert!((s.lr(37) - 1e-5).abs() <= 1e-12 * 1e-5);
        assert!(s.lr(s.total_steps()) <= 1e-7 * 1e-5);
        assert!(s.lr(100) < s.lr(50));
    }

    #[test]
    fn exponential_steps_every_ten_epochs() {
        let f = make_recipe(ModelKind::FasterRcnn, DatasetId::Plantations);
        let s = f.schedule(4);
        assert_eq!(s.lr(39), 1e-4);
        assert!((s.lr(40) - 0.9e-4).abs() < 1e-18);
        assert!((s.lr(80) - 0.81e-4).abs() < 1e-18);
    }
}
