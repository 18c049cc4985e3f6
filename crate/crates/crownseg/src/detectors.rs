//! Two-stage R-CNN detectors with optional DSM input channels.
//!
//! A small convolutional backbone reduces the input by 8; a region-proposal network and a box
//! head with a background column follow, and Mask R-CNN adds a per-class mask head. DSM input
//! enters as extra channels in front of the backbone: the normalized DSM itself, its two
//! gradient maps, or the output of a jointly trained resolution-preserving encoder.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use candle_core::{DType, IndexOp, Module, Tensor};
use crownseg_core::dsm::{dsm_gradients, DsmChannel};
use crownseg_core::schedule::ModelKind;
use crownseg_core::{BBox, Detection, Grid};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{LossReport, Model};
use crate::nn::boxes::{box_nms, BoxCoder};
use crate::nn::losses::{bce_with_logits, smooth_l1, ClassLoss};
use crate::nn::ops::{crop_mask, grid_tensor, image_tensor, paste_mask, roi_align, to_f32_vec};
use crate::nn::{softmax_last, Conv2d, ConvTranspose2d, ParamStore};
use crate::prompter::{DsmEncoder, DsmEncoderSpec};
use crate::rcnn::{roi_targets, sample_rois, BoxHead, RoiConfig, Rpn, RpnConfig};
use crate::sam::{run_detector_prompted, PromptMode, ScoreMode, Segmenter, PIXEL_MEAN, PIXEL_STD};

/// Seed of the reference 3-channel backbone that stands in for pretrained weights when no
/// checkpoint is given.
pub const REFERENCE_SEED: u64 = 0x5eed_0b0b;
const STRIDE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorKind {
    Faster,
    Mask,
}

/// How the DSM reaches the backbone.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DsmInput {
    #[default]
    None,
    Stack,
    Gradients,
    Encoder,
}

impl DsmInput {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Self::None),
            "stack" => Some(Self::Stack),
            "gradients" => Some(Self::Gradients),
            "encoder" => Some(Self::Encoder),
            _ => None,
        }
    }

    pub fn in_channels(self) -> usize {
        match self {
            Self::None => 3,
            Self::Stack | Self::Encoder => 4,
            Self::Gradients => 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub kind: DetectorKind,
    pub in_channels: usize,
    pub num_classes: usize,
    pub pretrained_backbone: bool,
    /// Reference backbone weights; the seeded reference backbone is used when absent.
    pub pretrained_checkpoint: Option<PathBuf>,
    pub extra_head_capacity: bool,
    pub dsm_encoder_stack: bool,
    pub dsm_encoder: DsmEncoderSpec,
    /// Channel widths of the backbone stages.
    pub widths: [usize; 4],
    pub rpn: RpnConfig,
    pub roi: RoiConfig,
    pub mask_pool: usize,
    pub max_mask_rois: usize,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    /// Gradient maps are clamped to this quantile of their absolute values before scaling.
    pub gradient_quantile: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            kind: DetectorKind::Mask,
            in_channels: 3,
            num_classes: 1,
            pretrained_backbone: true,
            pretrained_checkpoint: None,
            extra_head_capacity: false,
            dsm_encoder_stack: false,
            dsm_encoder: DsmEncoderSpec::stack(),
            widths: [16, 32, 64, 64],
            rpn: RpnConfig::default(),
            roi: RoiConfig::default(),
            mask_pool: 14,
            max_mask_rois: 32,
            score_threshold: 0.05,
            nms_iou: 0.5,
            max_detections: 100,
            gradient_quantile: 0.99,
        }
    }
}

impl DetectorConfig {
    pub fn new(kind: DetectorKind, dsm: DsmInput, num_classes: usize) -> Self {
        Self {
            kind,
            in_channels: dsm.in_channels(),
            num_classes,
            dsm_encoder_stack: dsm == DsmInput::Encoder,
            ..Self::default()
        }
    }

    pub fn dsm_input(&self) -> DsmInput {
        match (self.in_channels, self.dsm_encoder_stack) {
            (4, true) => DsmInput::Encoder,
            (4, false) => DsmInput::Stack,
            (5, _) => DsmInput::Gradients,
            _ => DsmInput::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("a detector needs at least one class".into()));
        }
        if !(3..=5).contains(&self.in_channels) {
            return Err(Error::Config(format!(
                "in_channels must be 3, 4 or 5, got {}",
                self.in_channels
            )));
        }
        if self.dsm_encoder_stack && self.in_channels != 4 {
            return Err(Error::Config(
                "the DSM encoder stack feeds exactly one extra channel (in_channels 4)".into(),
            ));
        }
        if self.dsm_encoder_stack
            && (self.dsm_encoder.reduction() != 1 || self.dsm_encoder.out_channels() != 1)
        {
            return Err(Error::Config(
                "the stacked DSM encoder must keep the resolution and emit one channel".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) || !(0.0..1.0).contains(&self.score_threshold) {
            return Err(Error::Config("NMS IoU and score threshold must lie in [0, 1]".into()));
        }
        if !(self.gradient_quantile > 0.0 && self.gradient_quantile <= 1.0) {
            return Err(Error::Config("gradient_quantile must lie in (0, 1]".into()));
        }
        if self.widths.contains(&0) || self.mask_pool == 0 {
            return Err(Error::Config("backbone widths and mask pool must be positive".into()));
        }
        Ok(())
    }

    pub fn model_kind(&self) -> ModelKind {
        match (self.kind, self.in_channels > 3) {
            (DetectorKind::Mask, false) => ModelKind::MaskRcnn,
            (DetectorKind::Mask, true) => ModelKind::MaskRcnnDsm,
            (DetectorKind::Faster, false) => ModelKind::FasterRcnn,
            (DetectorKind::Faster, true) => ModelKind::FasterRcnnDsm,
        }
    }
}

/// Stride-8 convolutional backbone. The first layer keeps full resolution so extra input
/// channels only touch one weight tensor.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub stem: Conv2d,
    stages: Vec<(Conv2d, Conv2d)>,
}

impl Backbone {
    pub fn new(ps: &mut ParamStore, name: &str, in_channels: usize, widths: [usize; 4]) -> Result<Self> {
        ps.scoped(name, |ps| {
            let stem = Conv2d::new(ps, "stem", in_channels, widths[0], 3, 1, 1)?;
            let mut stages = Vec::new();
            for i in 1..4 {
                let down = Conv2d::new(ps, &format!("stage{i}.down"), widths[i - 1], widths[i], 2, 2, 0)?;
                let conv = Conv2d::new(ps, &format!("stage{i}.conv"), widths[i], widths[i], 3, 1, 1)?;
                stages.push((down, conv));
            }
            Ok(Self { stem, stages })
        })
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(self.stem.out_channels(), |s| s.1.out_channels())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = self.stem.forward(x)?.relu()?;
        for (down, conv) in &self.stages {
            x = down.forward(&x)?.relu()?;
            x = conv.forward(&x)?.relu()?;
        }
        Ok(x)
    }
}

/// Three-channel backbone weights that play the role of pretrained weights.
pub fn reference_backbone(widths: [usize; 4], checkpoint: Option<&std::path::Path>) -> Result<ParamStore> {
    let mut ps = ParamStore::new(REFERENCE_SEED, DType::F32);
    Backbone::new(&mut ps, "backbone", 3, widths)?;
    if let Some(p) = checkpoint {
        ps.load(p)?;
    }
    Ok(ps)
}

/// Copy reference weights into `target`. The first layer's RGB slice is copied verbatim;
/// extra input channels keep their fresh initialization.
pub fn transplant_backbone(target: &ParamStore, reference: &ParamStore) -> Result<()> {
    for (name, rv) in reference.vars() {
        let tv = target
            .get(name)
            .ok_or_else(|| Error::Model(format!("backbone parameter {name} missing")))?;
        let r = rv.as_tensor();
        let t = tv.as_tensor();
        if r.dims() == t.dims() {
            tv.set(r)?;
            continue;
        }
        // first-layer surgery: [O, 3, k, k] into [O, C, k, k]
        let (o, c, kh, kw) = t.dims4()?;
        let (ro, rc, rkh, rkw) = r.dims4()?;
        if o != ro || kh != rkh || kw != rkw || c < rc {
            return Err(Error::Model(format!(
                "cannot transplant {name}: {:?} into {:?}",
                r.dims(),
                t.dims()
            )));
        }
        let extra = t.narrow(1, rc, c - rc)?;
        tv.set(&Tensor::cat(&[r, &extra], 1)?)?;
    }
    Ok(())
}

/// Per-class mask predictor over RoI-aligned features.
#[derive(Clone, Debug)]
struct MaskHead {
    convs: Vec<Conv2d>,
    up: ConvTranspose2d,
    out: Conv2d,
    pool: usize,
}

impl MaskHead {
    fn new(ps: &mut ParamStore, c: usize, k: usize, pool: usize) -> Result<Self> {
        ps.scoped("mask_head", |ps| {
            Ok(Self {
                convs: vec![
                    Conv2d::new(ps, "conv1", c, c, 3, 1, 1)?,
                    Conv2d::new(ps, "conv2", c, c, 3, 1, 1)?,
                ],
                up: ConvTranspose2d::new(ps, "up", c, c, 2)?,
                out: Conv2d::new(ps, "out", c, k, 1, 1, 0)?,
                pool,
            })
        })
    }

    fn mask_size(&self) -> usize {
        2 * self.pool
    }

    /// `[N, K, 2P, 2P]` mask logits.
    fn forward(&self, features: &Tensor, rois: &[BBox]) -> Result<Tensor> {
        let mut x = roi_align(features, rois, 1.0 / STRIDE as f64, self.pool, 2)?;
        for c in &self.convs {
            x = c.forward(&x)?.relu()?;
        }
        x = self.up.forward(&x)?.relu()?;
        Ok(self.out.forward(&x)?)
    }
}

/// Pick row `i`'s channel `classes[i]` of an `[N, K, ...]` tensor, keeping the channel axis.
fn select_class(x: &Tensor, classes: &[u32]) -> Result<Tensor> {
    let rows = classes
        .iter()
        .enumerate()
        .map(|(i, &c)| x.i(i)?.narrow(0, c as usize, 1))
        .collect::<candle_core::Result<Vec<_>>>()?;
    Ok(Tensor::stack(&rows, 0)?)
}

/// Scale a signed gradient map to `[0, 1]` after clamping to `+-q`, where `q` is the given
/// quantile of absolute values over valid pixels. Invalid pixels map to the midpoint.
pub fn standardize_gradient(g: &Grid<f32>, valid: &Grid<bool>, quantile: f64) -> Grid<f32> {
    let mut mags: Vec<f32> = g
        .data()
        .iter()
        .zip(valid.data())
        .filter(|(_, &v)| v)
        .map(|(x, _)| x.abs())
        .collect();
    let q = if mags.is_empty() {
        0.0
    } else {
        let k = ((mags.len() - 1) as f64 * quantile).round() as usize;
        let (_, q, _) = mags.select_nth_unstable_by(k, f32::total_cmp);
        *q
    };
    g.map(|&x| if q > 0.0 { (x.clamp(-q, q) / q + 1.0) * 0.5 } else { 0.5 })
}

pub struct Detector {
    cfg: DetectorConfig,
    ps: ParamStore,
    backbone: Backbone,
    rpn: Rpn,
    head: BoxHead,
    mask_head: Option<MaskHead>,
    encoder: Option<DsmEncoder>,
    class_loss: ClassLoss,
    image_size: usize,
}

impl Detector {
    pub fn new(cfg: DetectorConfig, image_size: usize, class_loss: ClassLoss, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if image_size % STRIDE != 0 || image_size == 0 {
            return Err(Error::Config(format!(
                "image size {image_size} must be a positive multiple of {STRIDE}"
            )));
        }
        let mut ps = ParamStore::new(seed, DType::F32);
        let backbone = Backbone::new(&mut ps, "backbone", cfg.in_channels, cfg.widths)?;
        let c = backbone.out_channels();
        let rpn = Rpn::new(&mut ps, "rpn", c, cfg.rpn.clone(), image_size, STRIDE)?;
        let k = cfg.num_classes;
        let head = BoxHead::new(
            &mut ps,
            "roi_head",
            c,
            &cfg.roi,
            1.0 / STRIDE as f64,
            k + 1,
            false,
            k,
            cfg.extra_head_capacity,
        )?;
        let mask_head = match cfg.kind {
            DetectorKind::Mask => Some(MaskHead::new(&mut ps, c, k, cfg.mask_pool)?),
            DetectorKind::Faster => None,
        };
        let encoder = if cfg.dsm_encoder_stack {
            Some(DsmEncoder::new(&mut ps, "dsm_encoder", &cfg.dsm_encoder)?)
        } else {
            None
        };
        if cfg.pretrained_backbone {
            let reference = reference_backbone(cfg.widths, cfg.pretrained_checkpoint.as_deref())?;
            transplant_backbone(&ps, &reference)?;
        }
        Ok(Self {
            cfg,
            ps,
            backbone,
            rpn,
            head,
            mask_head,
            encoder,
            class_loss,
            image_size,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn dsm_encoder(&self) -> Option<&DsmEncoder> {
        self.encoder.as_ref()
    }

    fn dsm_of<'a>(&self, sample: &'a Sample) -> Result<&'a DsmChannel> {
        sample.dsm.as_ref().ok_or_else(|| {
            Error::Usage(format!(
                "sample {}: a {}-channel detector needs a DSM",
                sample.id, self.cfg.in_channels
            ))
        })
    }

    /// `[1, C, S, S]` backbone input for a sample.
    pub fn input(&self, sample: &Sample) -> Result<Tensor> {
        let s = self.image_size;
        if sample.rgb.width() != s || sample.rgb.height() != s {
            return Err(Error::Model(format!(
                "sample {} is {}x{}, the detector takes {s}x{s}",
                sample.id,
                sample.rgb.width(),
                sample.rgb.height()
            )));
        }
        let rgb = image_tensor(&sample.rgb, PIXEL_MEAN, PIXEL_STD)?;
        let extra = match self.cfg.dsm_input() {
            DsmInput::None => return Ok(rgb),
            DsmInput::Stack => grid_tensor(&self.dsm_of(sample)?.values)?,
            DsmInput::Encoder => {
                let enc = self.encoder.as_ref().expect("encoder built for this input");
                enc.forward(&grid_tensor(&self.dsm_of(sample)?.values)?)?
            }
            DsmInput::Gradients => {
                let dsm = self.dsm_of(sample)?;
                let g = dsm_gradients(dsm);
                let q = self.cfg.gradient_quantile;
                let v = standardize_gradient(&g.vertical, &dsm.valid, q);
                let h = standardize_gradient(&g.horizontal, &dsm.valid, q);
                Tensor::cat(&[grid_tensor(&v)?, grid_tensor(&h)?], 1)?
            }
        };
        Ok(Tensor::cat(&[&rgb, &extra], 1)?)
    }

    /// Stride-8 features of a prepared input; the channel count must match the model.
    pub fn features(&self, input: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = input.dims4()?;
        if c != self.cfg.in_channels {
            return Err(Error::Model(format!(
                "input has {c} channels, the detector takes {}",
                self.cfg.in_channels
            )));
        }
        if h != self.image_size || w != self.image_size {
            return Err(Error::Model(format!(
                "input is {w}x{h}, the detector takes {0}x{0}",
                self.image_size
            )));
        }
        self.backbone.forward(input)
    }

    /// Post-processed detections for a prepared input.
    pub fn detect(&self, input: &Tensor) -> Result<Vec<Detection>> {
        let feats = self.features(input)?;
        let rpn_out = self.rpn.forward(&feats)?;
        let proposals = self.rpn.proposals(&rpn_out, false)?;
        if proposals.is_empty() {
            return Ok(Vec::new());
        }
        let out = self.head.forward(&feats, &proposals)?;
        let probs = softmax_last(&out.logits)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let deltas = to_f32_vec(&out.deltas)?;
        let k = self.cfg.num_classes;
        let s = self.image_size as f64;
        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        let mut classes = Vec::new();
        for (i, p) in proposals.iter().enumerate() {
            for c in 0..k {
                let score = probs[i][c + 1];
                if score <= self.cfg.score_threshold {
                    continue;
                }
                let o = (i * k + c) * 4;
                let b = BoxCoder::ROI
                    .decode(p, [deltas[o], deltas[o + 1], deltas[o + 2], deltas[o + 3]])
                    .clamp(s, s);
                if b.width() < 1.0 || b.height() < 1.0 {
                    continue;
                }
                boxes.push(b);
                scores.push(score);
                classes.push(c as u32);
            }
        }
        let mut keep = box_nms(&boxes, &scores, &classes, self.cfg.nms_iou);
        keep.truncate(self.cfg.max_detections);
        let mut dets: Vec<Detection> = keep
            .iter()
            .map(|&j| Detection::new(boxes[j], classes[j], scores[j]))
            .collect();
        if let (Some(mh), false) = (&self.mask_head, dets.is_empty()) {
            let kept_boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
            let kept_classes: Vec<u32> = dets.iter().map(|d| d.class_id).collect();
            let logits = select_class(&mh.forward(&feats, &kept_boxes)?, &kept_classes)?;
            let probs = to_f32_vec(&candle_nn::ops::sigmoid(&logits)?)?;
            let m = mh.mask_size();
            let n = self.image_size;
            for (j, d) in dets.iter_mut().enumerate() {
                let mask = paste_mask(&probs[j * m * m..(j + 1) * m * m], m, &d.bbox, n, n, 0.5);
                d.mask = Some(mask);
            }
        }
        Ok(dets)
    }

    fn training_loss(&self, sample: &Sample, rng: &mut ChaCha8Rng) -> Result<LossReport> {
        let input = self.input(sample)?;
        let feats = self.features(&input)?;
        let rpn_out = self.rpn.forward(&feats)?;
        let gt: Vec<BBox> = sample.instances.iter().map(|i| i.bbox).collect();
        let (rpn_cls, rpn_box) = self.rpn.loss(&rpn_out, &gt, rng)?;
        let proposals = self.rpn.proposals(&rpn_out, true)?;
        let rois = sample_rois(&proposals, &gt, &self.cfg.roi, rng);
        let boxes: Vec<BBox> = rois.iter().map(|r| r.0).collect();
        let out = self.head.forward(&feats, &boxes)?;
        let labels: Vec<u32> = rois
            .iter()
            .map(|r| r.1.map_or(0, |j| sample.instances[j].class_id + 1))
            .collect();
        let cls = self.class_loss.compute(&out.logits, &labels, true)?;
        let dev = self.ps.device().clone();
        let dtype = self.ps.dtype();
        let pos: Vec<usize> = (0..rois.len()).filter(|&i| rois[i].1.is_some()).collect();
        let mut terms = vec![("rpn_cls", rpn_cls), ("rpn_box", rpn_box), ("class", cls)];
        if pos.is_empty() {
            let z = Tensor::zeros((), dtype, &dev)?;
            terms.push(("box", z.clone()));
            if self.mask_head.is_some() {
                terms.push(("mask", z));
            }
            return LossReport::new(terms);
        }
        let matched: Vec<usize> = pos.iter().map(|&i| rois[i].1.expect("positive")).collect();
        let pos_classes: Vec<u32> = matched.iter().map(|&j| sample.instances[j].class_id).collect();
        let pidx = Tensor::from_vec(pos.iter().map(|&i| i as u32).collect::<Vec<_>>(), pos.len(), &dev)?;
        let k = self.cfg.num_classes;
        let deltas = out.deltas.index_select(&pidx, 0)?.reshape((pos.len(), k, 4))?;
        let deltas = select_class(&deltas, &pos_classes)?.squeeze(1)?;
        let pos_boxes: Vec<BBox> = pos.iter().map(|&i| boxes[i]).collect();
        let targets = roi_targets(&pos_boxes, &gt, &matched, dtype, &dev)?;
        terms.push(("box", smooth_l1(&deltas, &targets, 1.0 / 9.0, rois.len() as f64)?));
        if let Some(mh) = &self.mask_head {
            let nm = pos.len().min(self.cfg.max_mask_rois.max(1));
            let logits = mh.forward(&feats, &pos_boxes[..nm])?;
            let logits = select_class(&logits, &pos_classes[..nm])?;
            let m = mh.mask_size();
            let mut tgt = Vec::with_capacity(nm * m * m);
            for (b, &j) in pos_boxes.iter().zip(&matched).take(nm) {
                tgt.extend(crop_mask(&sample.instances[j].mask, b, m));
            }
            let tgt = Tensor::from_vec(tgt, (nm, 1, m, m), &dev)?.to_dtype(dtype)?;
            terms.push(("mask", bce_with_logits(&logits, &tgt)?));
        }
        LossReport::new(terms)
    }
}

impl Model for Detector {
    fn kind(&self) -> ModelKind {
        self.cfg.model_kind()
    }

    fn params(&self) -> &ParamStore {
        &self.ps
    }

    fn loss(&self, sample: &Sample, rng: &mut ChaCha8Rng) -> Result<LossReport> {
        self.training_loss(sample, rng)
    }

    fn predict(&self, sample: &Sample) -> Result<Vec<Detection>> {
        self.detect(&self.input(sample)?)
    }

    fn image_size(&self) -> usize {
        self.image_size
    }
}

/// A detector whose detections are re-segmented by the frozen segmenter. Training updates the
/// detector only.
pub struct PromptedDetector {
    pub detector: Detector,
    pub sam: Arc<dyn Segmenter>,
    pub mode: PromptMode,
    pub score_mode: ScoreMode,
    pub batch: usize,
}

impl Model for PromptedDetector {
    fn kind(&self) -> ModelKind {
        self.detector.kind()
    }

    fn params(&self) -> &ParamStore {
        self.detector.params()
    }

    fn loss(&self, sample: &Sample, rng: &mut ChaCha8Rng) -> Result<LossReport> {
        self.detector.loss(sample, rng)
    }

    fn predict(&self, sample: &Sample) -> Result<Vec<Detection>> {
        let dets = self.detector.predict(sample)?;
        run_detector_prompted(
            self.sam.as_ref(),
            &sample.rgb,
            &dets,
            self.mode,
            self.score_mode,
            self.batch,
        )
    }

    fn frozen_checksums(&self) -> Result<BTreeMap<String, String>> {
        self.sam.component_checksums()
    }

    fn image_size(&self) -> usize {
        self.detector.image_size()
    }
}
