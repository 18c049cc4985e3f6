//! Experiment configuration files and the model factory.
//!
//! A config is a TOML document with top-level keys for the model and data plus optional
//! tables that override the training recipe, loss, NMS, segmenter, detector and prompter
//! defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crownseg_core::dsm::{NormalizeMode, PeakConfig};
use crownseg_core::losses::HierarchicalLossConfig;
use crownseg_core::nms::{NmsConfig, OverlapBasis};
use crownseg_core::schedule::{make_recipe, DatasetId, Decay, ModelKind, OptimizerKind, TrainConfig, Warmup};
use crownseg_core::taxonomy::{inverse_frequency_weights, TaxonomyTree};
use serde::{Deserialize, Serialize};

use crate::detectors::{Detector, DetectorConfig, DetectorKind, DsmInput};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::losses::ClassLoss;
use crate::prompter::{AnchorPrompter, FusionVariant, PrompterConfig};
use crate::sam::{PromptMode, ScoreMode, Segmenter, SegmenterSpec};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DsmNormalization {
    #[default]
    Max,
    Minmax,
}

impl From<DsmNormalization> for NormalizeMode {
    fn from(d: DsmNormalization) -> Self {
        match d {
            DsmNormalization::Max => NormalizeMode::Max,
            DsmNormalization::Minmax => NormalizeMode::MinMax,
        }
    }
}

/// Recipe fields that may be overridden; unset fields keep the published recipe.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeOverrides {
    pub optimizer: Option<OptimizerKind>,
    pub base_lr: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub betas: Option<(f64, f64)>,
    /// `false` removes the warmup.
    pub warmup: Option<bool>,
    pub warmup_start_lr: Option<f64>,
    pub warmup_epochs: Option<f64>,
    pub schedule: Option<String>,
    pub exponential_factor: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub random_flip: Option<bool>,
    pub from_scratch: Option<bool>,
    pub clip_norm: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Ce,
    Weighted,
    Hierarchical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub kind: LossKind,
    /// Species, genus and family weights of the hierarchical loss.
    pub level_weights: [f64; 3],
    /// Taxonomy JSON file for the hierarchical loss.
    pub taxonomy: Option<PathBuf>,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            kind: LossKind::Ce,
            level_weights: HierarchicalLossConfig::default().level_weights,
            taxonomy: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NmsSection {
    pub score: f64,
    pub iou: f64,
    pub class_agnostic: bool,
}

impl Default for NmsSection {
    fn default() -> Self {
        let d = NmsConfig::default();
        Self {
            score: d.score_threshold,
            iou: d.iou_threshold,
            class_agnostic: d.class_agnostic,
        }
    }
}

impl NmsSection {
    pub fn to_config(&self, basis: OverlapBasis) -> NmsConfig {
        NmsConfig {
            score_threshold: self.score,
            iou_threshold: self.iou,
            class_agnostic: self.class_agnostic,
            overlap_basis: basis,
        }
    }
}

/// Settings for the segmenter-only pipelines and detector re-segmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub points_per_side: usize,
    pub peak_min_distance: f64,
    pub prompt_mode: PromptMode,
    pub score_mode: ScoreMode,
    pub batch: usize,
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self {
            points_per_side: 32,
            peak_min_distance: PeakConfig::FOREST.min_distance,
            prompt_mode: PromptMode::Boxes,
            score_mode: ScoreMode::Box,
            batch: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: String,
    /// DSM input of R-CNN models: none, stack, gradients or encoder.
    #[serde(default)]
    pub dsm: Option<String>,
    #[serde(default = "default_dataset")]
    pub dataset: String,
    pub image_size: usize,
    /// Directory with `train.json`, `val.json` and `test.json`.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    #[serde(default)]
    pub dsm_normalization: DsmNormalization,
    #[serde(default)]
    pub seed: u64,
    /// Re-segment detector outputs with the segmenter.
    #[serde(default)]
    pub sam_refine: bool,
    #[serde(default)]
    pub recipe: RecipeOverrides,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub nms: NmsSection,
    #[serde(default)]
    pub sam: Option<SegmenterSpec>,
    #[serde(default)]
    pub detector: Option<DetectorConfig>,
    #[serde(default)]
    pub prompter: Option<PrompterConfig>,
    #[serde(default)]
    pub pipeline: PipelineSection,
}

fn default_dataset() -> String {
    "synthetic".into()
}

impl ExperimentConfig {
    /// Parse a config file and resolve its relative paths.
    pub fn load(path: &Path, checkpoint_dir: Option<&Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::format(path, m),
            e => e,
        })?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")), checkpoint_dir);
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Config(e.to_string()))?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            Error::Config(format!("{}: {}", e.path(), e.inner().message()))
        })?;
        cfg.model_kind()?;
        cfg.dataset_id()?;
        cfg.dsm_input()?;
        Ok(cfg)
    }

    /// Make relative paths absolute: data and taxonomy paths against `base`, model
    /// checkpoints against `checkpoint_dir` when given, else `base`.
    pub fn resolve_paths(&mut self, base: &Path, checkpoint_dir: Option<&Path>) {
        let under = |dir: &Path, p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        if let Some(p) = &mut self.data_dir {
            under(base, p);
        }
        if let Some(p) = &mut self.loss.taxonomy {
            under(base, p);
        }
        let ckpt = checkpoint_dir.unwrap_or(base);
        if let Some(SegmenterSpec::Vit { checkpoint: Some(p), .. }) = &mut self.sam {
            under(ckpt, p);
        }
        if let Some(p) = self.detector.as_mut().and_then(|d| d.pretrained_checkpoint.as_mut()) {
            under(ckpt, p);
        }
    }

    pub fn model_kind(&self) -> Result<ModelKind> {
        let name = self.model.replace('-', "_");
        let kind = match name.as_str() {
            "maskrcnn" => ModelKind::MaskRcnn,
            "fasterrcnn" => ModelKind::FasterRcnn,
            "balsam_a" => ModelKind::BalsamVariantA,
            "balsam_b" => ModelKind::BalsamVariantB,
            other => ModelKind::parse(other)?,
        };
        // R-CNN models with a DSM option take the DSM kind
        Ok(match (kind, self.dsm_input()?) {
            (ModelKind::MaskRcnn, d) if d != DsmInput::None => ModelKind::MaskRcnnDsm,
            (ModelKind::FasterRcnn, d) if d != DsmInput::None => ModelKind::FasterRcnnDsm,
            (k, _) => k,
        })
    }

    pub fn dataset_id(&self) -> Result<DatasetId> {
        Ok(DatasetId::parse(&self.dataset)?)
    }

    pub fn dsm_input(&self) -> Result<DsmInput> {
        match &self.dsm {
            None => Ok(DsmInput::None),
            Some(s) => DsmInput::parse(s).ok_or_else(|| Error::Config(format!("unknown DSM input {s}"))),
        }
    }

    /// Published recipe with the overrides applied.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let kind = self.model_kind()?;
        let mut tc = make_recipe(kind, self.dataset_id()?);
        let r = &self.recipe;
        if r.from_scratch == Some(true) {
            tc = tc.from_scratch();
        }
        if let Some(v) = r.optimizer {
            tc.optimizer = v;
        }
        if let Some(v) = r.base_lr {
            tc.base_lr = v;
        }
        if let Some(v) = r.momentum {
            tc.momentum = v;
        }
        if let Some(v) = r.weight_decay {
            tc.weight_decay = v;
        }
        if let Some(v) = r.betas {
            tc.betas = v;
        }
        if r.warmup == Some(false) {
            tc.warmup = None;
        } else if r.warmup == Some(true) || r.warmup_start_lr.is_some() || r.warmup_epochs.is_some() {
            let base = tc.warmup.unwrap_or(Warmup {
                start_lr: tc.base_lr * 0.01,
                epochs: 1.0,
            });
            tc.warmup = Some(Warmup {
                start_lr: r.warmup_start_lr.unwrap_or(base.start_lr),
                epochs: r.warmup_epochs.unwrap_or(base.epochs),
            });
        }
        if let Some(s) = &r.schedule {
            tc.schedule = match s.as_str() {
                "none" => Decay::None,
                "cosine" => Decay::Cosine,
                "exponential" => Decay::Exponential {
                    factor: r
                        .exponential_factor
                        .unwrap_or(crownseg_core::schedule::DEFAULT_EXPONENTIAL_FACTOR),
                    every_epochs: 10,
                },
                other => return Err(Error::Config(format!("unknown schedule {other}"))),
            };
        }
        if let Some(v) = r.batch_size {
            tc.batch_size = v;
        }
        if let Some(v) = r.max_epochs {
            tc.max_epochs = v;
        }
        if let Some(v) = r.random_flip {
            tc.random_flip = v;
        }
        tc.seed = self.seed;
        if self.recipe != RecipeOverrides::default() {
            tc.published_recipe = false;
        }
        tc.validate()?;
        Ok(tc)
    }

    pub fn segmenter_spec(&self) -> SegmenterSpec {
        self.sam.clone().unwrap_or(SegmenterSpec::Mock {
            image_size: self.image_size,
            seed: 0,
        })
    }

    pub fn build_segmenter(&self) -> Result<Arc<dyn Segmenter>> {
        let spec = self.segmenter_spec();
        if spec.image_size() != self.image_size {
            return Err(Error::Config(format!(
                "segmenter takes {} pixels but image_size is {}",
                spec.image_size(),
                self.image_size
            )));
        }
        Ok(Arc::from(spec.build()?))
    }

    /// Classification loss for the given classes. `train_counts` feeds the weighted loss.
    pub fn class_loss(&self, classes: &[String], train_counts: Option<&BTreeMap<String, u64>>) -> Result<ClassLoss> {
        Ok(match self.loss.kind {
            LossKind::Ce => ClassLoss::CrossEntropy,
            LossKind::Weighted => {
                let counts = train_counts
                    .ok_or_else(|| Error::Config("the weighted loss needs training class counts".into()))?;
                ClassLoss::Weighted(inverse_frequency_weights(counts)?.to_vec(classes)?)
            }
            LossKind::Hierarchical => {
                let path = self
                    .loss
                    .taxonomy
                    .as_ref()
                    .ok_or_else(|| Error::Config("the hierarchical loss needs loss.taxonomy".into()))?;
                let tree: TaxonomyTree = crate::io::read_json(path)?;
                tree.validate()?;
                let config = HierarchicalLossConfig::from_taxonomy(&tree, self.loss.level_weights);
                config.validate(classes)?;
                ClassLoss::Hierarchical {
                    classes: classes.to_vec(),
                    tree,
                    config,
                }
            }
        })
    }

    pub fn detector_config(&self, num_classes: usize) -> Result<DetectorConfig> {
        let kind = self.model_kind()?;
        let dk = match kind {
            ModelKind::MaskRcnn | ModelKind::MaskRcnnDsm => DetectorKind::Mask,
            ModelKind::FasterRcnn | ModelKind::FasterRcnnDsm => DetectorKind::Faster,
            _ => return Err(Error::Config(format!("{} is not a detector", kind.as_str()))),
        };
        let dsm = self.dsm_input()?;
        let mut cfg = self.detector.clone().unwrap_or_default();
        cfg.kind = dk;
        cfg.in_channels = dsm.in_channels();
        cfg.dsm_encoder_stack = dsm == DsmInput::Encoder;
        cfg.num_classes = num_classes;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Build the trainable model named by the config.
    pub fn build_model(&self, classes: &[String], train_counts: Option<&BTreeMap<String, u64>>) -> Result<Box<dyn Model>> {
        let kind = self.model_kind()?;
        let loss = self.class_loss(classes, train_counts)?;
        if kind.is_prompter() {
            let mut pc = self.prompter.clone().unwrap_or_default();
            pc.num_classes = classes.len();
            if !self.nms.class_agnostic && pc.class_agnostic_nms {
                pc.class_agnostic_nms = true;
            } else {
                pc.class_agnostic_nms |= self.nms.class_agnostic;
            }
            let variant = FusionVariant::of(kind);
            let sam = self.build_segmenter()?;
            return Ok(Box::new(AnchorPrompter::new(sam, pc, variant, loss, self.seed)?));
        }
        let det = Detector::new(self.detector_config(classes.len())?, self.image_size, loss, self.seed)?;
        if self.sam_refine {
            return Ok(Box::new(crate::detectors::PromptedDetector {
                detector: det,
                sam: self.build_segmenter()?,
                mode: self.pipeline.prompt_mode,
                score_mode: self.pipeline.score_mode,
                batch: self.pipeline.batch,
            }));
        }
        Ok(Box::new(det))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_applies_overrides() {
        let cfg = ExperimentConfig::parse(
            r#"
model = "maskrcnn"
dsm = "stack"
image_size = 64
seed = 3
[recipe]
base_lr = 0.001
max_epochs = 2
random_flip = false
[detector]
widths = [4, 8, 8, 8]
"#,
        )
        .unwrap();
        assert_eq!(cfg.model_kind().unwrap(), ModelKind::MaskRcnnDsm);
        let tc = cfg.train_config().unwrap();
        assert_eq!(tc.base_lr, 0.001);
        assert_eq!(tc.batch_size, 8);
        assert_eq!(tc.seed, 3);
        assert!(!tc.published_recipe);
        let dc = cfg.detector_config(2).unwrap();
        assert_eq!(dc.in_channels, 4);
        assert_eq!(dc.widths, [4, 8, 8, 8]);
    }

    #[test]
    fn unknown_keys_name_their_path() {
        let err = ExperimentConfig::parse("model = \"balsam\"\nimage_size = 64\n[recipe]\nlr = 1\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("recipe"), "{err}");
        assert!(ExperimentConfig::parse("model = \"nope\"\nimage_size = 64\n").is_err());
    }
}
