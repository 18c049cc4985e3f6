//! Learned prompters over the frozen segmenter: the anchor-based prompter and its DSM-fused
//! extensions.
//!
//! A prompter reads the image embedding (or the image embedding fused with a DSM embedding),
//! proposes boxes with a region-proposal head, classifies them, and turns each into prompt
//! tokens for the frozen mask decoder. The segmenter is never updated; only the prompter and
//! the DSM encoder carry trainable parameters.

pub mod dsm_encoder;

use std::collections::BTreeMap;
use std::sync::Arc;

use candle_core::{DType, IndexOp, Module, Tensor};
use crownseg_core::schedule::ModelKind;
use crownseg_core::{BBox, Detection};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{LossReport, Model};
use crate::nn::boxes::{box_nms, BoxCoder};
use crate::nn::losses::{bce_with_logits, dice_loss, smooth_l1, ClassLoss};
use crate::nn::ops::{downsample_mask, grid_tensor, to_f32_vec};
use crate::nn::{softmax_last, Conv2d, ConvTranspose2d, Linear, ParamStore};
use crate::rcnn::{roi_targets, sample_rois, BoxHead, RoiConfig, Rpn, RpnConfig};
use crate::sam::{logits_to_mask, Segmenter};

pub use dsm_encoder::{fuse, DsmEncoder, DsmEncoderSpec, EncoderLayer};

/// Where the DSM embedding enters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionVariant {
    /// Prompter reads the image embedding; the decoder reads the fused embedding.
    Balsam,
    /// Prompter and decoder both read the fused embedding.
    VariantA,
    /// Prompter reads the fused embedding; the decoder sees the plain image embedding.
    VariantB,
}

impl FusionVariant {
    pub fn of(kind: ModelKind) -> Option<Self> {
        match kind {
            ModelKind::Balsam => Some(FusionVariant::Balsam),
            ModelKind::BalsamVariantA => Some(FusionVariant::VariantA),
            ModelKind::BalsamVariantB => Some(FusionVariant::VariantB),
            _ => None,
        }
    }
}

/// How the fused embedding reaches the mask decoder when the variant routes it there.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenseInjection {
    /// The fused embedding replaces the image embedding; the dense prompt stays at its
    /// no-mask default.
    #[default]
    DecoderInput,
    /// The image embedding is kept and the DSM embedding is added to the dense prompt.
    DenseBranch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrompterConfig {
    pub num_classes: usize,
    /// Width of the 1x1 projection of the embedding.
    pub neck_channels: usize,
    /// Width of the stride-8 feature map the heads read.
    pub feature_channels: usize,
    pub rpn: RpnConfig,
    pub roi: RoiConfig,
    /// Learned tokens per instance on top of the two box-corner tokens.
    pub extra_tokens: usize,
    /// Token width; must equal the decoder's prompt width.
    pub token_width: usize,
    /// Foreground RoIs per image that go through the mask decoder during training.
    pub max_mask_rois: usize,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub class_agnostic_nms: bool,
    pub max_detections: usize,
    pub dense_injection: DenseInjection,
    pub dsm_encoder: DsmEncoderSpec,
}

impl Default for PrompterConfig {
    fn default() -> Self {
        Self {
            num_classes: 1,
            neck_channels: 128,
            feature_channels: 64,
            rpn: RpnConfig::default(),
            roi: RoiConfig::default(),
            extra_tokens: 1,
            token_width: 256,
            max_mask_rois: 16,
            score_threshold: 0.05,
            nms_iou: 0.5,
            class_agnostic_nms: false,
            max_detections: 100,
            dense_injection: DenseInjection::DecoderInput,
            dsm_encoder: DsmEncoderSpec::prompt(),
        }
    }
}

/// Embedding projection to a stride-8 feature map.
#[derive(Clone, Debug)]
struct Neck {
    proj: Conv2d,
    up: ConvTranspose2d,
    conv: Conv2d,
}

impl Neck {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.proj.forward(x)?.gelu_erf()?;
        let x = self.up.forward(&x)?;
        Ok(self.conv.forward(&x)?.relu()?)
    }
}

/// Per-instance token residuals from RoI features; the output layer starts at zero so the
/// first tokens are exactly the segmenter's own box encoding.
#[derive(Clone, Debug)]
struct TokenHead {
    hidden: Linear,
    out: Linear,
    tokens: usize,
    width: usize,
}

impl TokenHead {
    fn forward(&self, features: &Tensor) -> Result<Tensor> {
        let n = features.dim(0)?;
        let h = self.hidden.forward(features)?.relu()?;
        Ok(self.out.forward(&h)?.reshape((n, self.tokens, self.width))?)
    }
}

/// Everything the prompter computes for one image in eval mode.
pub struct PrompterEval {
    pub proposals: Vec<BBox>,
    /// `[P, K]` class logits of every proposal.
    pub logits: Tensor,
    /// `[P]` foreground logits.
    pub foreground: Tensor,
    /// Indices of the proposals that survive scoring and suppression.
    pub kept: Vec<usize>,
    /// `[D, 1, M, M]` mask probabilities of the kept proposals.
    pub mask_probs: Tensor,
    pub detections: Vec<Detection>,
}

pub struct AnchorPrompter {
    sam: Arc<dyn Segmenter>,
    ps: ParamStore,
    neck: Neck,
    rpn: Rpn,
    head: BoxHead,
    tokens: TokenHead,
    dsm_encoder: Option<DsmEncoder>,
    variant: Option<FusionVariant>,
    cfg: PrompterConfig,
    class_loss: ClassLoss,
}

/// The three inputs the prompter and the decoder read for one image.
struct Inputs {
    prompter: Tensor,
    decoder: Tensor,
    dense: Tensor,
}

impl AnchorPrompter {
    /// Build a prompter. `variant = None` gives the plain anchor prompter without DSM input.
    /// Prompter weights are drawn before the DSM encoder's, so the same seed gives the same
    /// prompter with or without a DSM path.
    pub fn new(
        sam: Arc<dyn Segmenter>,
        cfg: PrompterConfig,
        variant: Option<FusionVariant>,
        class_loss: ClassLoss,
        seed: u64,
    ) -> Result<Self> {
        if cfg.num_classes == 0 {
            return Err(Error::Config("the prompter needs at least one class".into()));
        }
        if cfg.token_width != sam.embed_dim() {
            return Err(Error::Config(format!(
                "prompt tokens are {} wide but the mask decoder takes {}",
                cfg.token_width,
                sam.embed_dim()
            )));
        }
        let s = sam.image_size();
        let mut ps = ParamStore::new(seed, DType::F32);
        let (neck, rpn, head, tokens) = ps.scoped("prompter", |ps| {
            let c = cfg.feature_channels;
            let neck = Neck {
                proj: Conv2d::new(ps, "neck.proj", sam.embed_dim(), cfg.neck_channels, 1, 1, 0)?,
                up: ConvTranspose2d::new(ps, "neck.up", cfg.neck_channels, c, 2)?,
                conv: Conv2d::new(ps, "neck.conv", c, c, 3, 1, 1)?,
            };
            let rpn = Rpn::new(ps, "rpn", c, cfg.rpn.clone(), s, 8)?;
            let head = BoxHead::new(ps, "roi_head", c, &cfg.roi, 1.0 / 8.0, cfg.num_classes, true, 1, false)?;
            let n_tok = 2 + cfg.extra_tokens;
            let tokens = ps.scoped("tokens", |ps| {
                Ok(TokenHead {
                    hidden: Linear::new(ps, "hidden", cfg.roi.hidden, cfg.roi.hidden)?,
                    out: Linear {
                        weight: ps.constant("out.weight", &[n_tok * cfg.token_width, cfg.roi.hidden], 0.0)?,
                        bias: ps.constant("out.bias", &[n_tok * cfg.token_width], 0.0)?,
                    },
                    tokens: n_tok,
                    width: cfg.token_width,
                })
            })?;
            Ok((neck, rpn, head, tokens))
        })?;
        let dsm_encoder = match variant {
            Some(_) => {
                let spec = &cfg.dsm_encoder;
                if spec.reduction() != 16 || spec.out_channels() != sam.embed_dim() {
                    return Err(Error::Config(format!(
                        "the DSM encoder must map S x S to S/16 x S/16 x {}",
                        sam.embed_dim()
                    )));
                }
                Some(DsmEncoder::new(&mut ps, "dsm_encoder", spec)?)
            }
            None => None,
        };
        Ok(Self {
            sam,
            ps,
            neck,
            rpn,
            head,
            tokens,
            dsm_encoder,
            variant,
            cfg,
            class_loss,
        })
    }

    pub fn config(&self) -> &PrompterConfig {
        &self.cfg
    }

    pub fn variant(&self) -> Option<FusionVariant> {
        self.variant
    }

    pub fn segmenter(&self) -> &Arc<dyn Segmenter> {
        &self.sam
    }

    pub fn dsm_encoder(&self) -> Option<&DsmEncoder> {
        self.dsm_encoder.as_ref()
    }

    /// SHA-256 of the prompter parameters and of the DSM encoder parameters.
    pub fn trainable_checksums(&self) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        out.insert("prompter".to_string(), self.ps.checksum_prefix("prompter.")?);
        if self.dsm_encoder.is_some() {
            out.insert("dsm_encoder".to_string(), self.ps.checksum_prefix("dsm_encoder.")?);
        }
        Ok(out)
    }

    /// DSM embedding of a sample, `[1, C, S/16, S/16]`.
    pub fn dsm_embedding(&self, sample: &Sample) -> Result<Option<Tensor>> {
        let Some(enc) = &self.dsm_encoder else {
            return Ok(None);
        };
        let dsm = sample.dsm.as_ref().ok_or_else(|| {
            Error::Usage(format!("sample {}: this prompter needs a DSM", sample.id))
        })?;
        let x = grid_tensor(&dsm.values)?.to_dtype(self.ps.dtype())?;
        Ok(Some(enc.forward(&x)?))
    }

    fn inputs(&self, sample: &Sample) -> Result<Inputs> {
        let s = self.sam.image_size();
        if sample.rgb.width() != s || sample.rgb.height() != s {
            return Err(Error::Model(format!(
                "sample {} is {}x{}, the prompter takes {s}x{s}",
                sample.id,
                sample.rgb.width(),
                sample.rgb.height()
            )));
        }
        let dtype = self.ps.dtype();
        let image = self.sam.encode_rgb(&sample.rgb)?.to_dtype(dtype)?.detach();
        let no_mask = self.sam.no_mask_dense()?.to_dtype(dtype)?.detach();
        let Some(dsm) = self.dsm_embedding(sample)? else {
            return Ok(Inputs {
                prompter: image.clone(),
                decoder: image,
                dense: no_mask,
            });
        };
        let fused = fuse(&image, &dsm)?;
        let variant = self.variant.expect("a DSM encoder implies a variant");
        let prompter = match variant {
            FusionVariant::Balsam => image.clone(),
            FusionVariant::VariantA | FusionVariant::VariantB => fused.clone(),
        };
        let (decoder, dense) = match (variant, self.cfg.dense_injection) {
            (FusionVariant::VariantB, _) => (image, no_mask),
            (_, DenseInjection::DecoderInput) => (fused, no_mask),
            (_, DenseInjection::DenseBranch) => (image, no_mask.broadcast_add(&dsm)?),
        };
        Ok(Inputs {
            prompter,
            decoder,
            dense,
        })
    }

    /// Mask logits `[N, 1, M, M]` and predicted quality `[N, 1]` for boxes with their RoI
    /// features.
    fn decode_masks(&self, inputs: &Inputs, boxes: &[BBox], features: &Tensor) -> Result<(Tensor, Tensor)> {
        let s = self.sam.image_size() as f64;
        let flat: Vec<[f32; 4]> = boxes
            .iter()
            .map(|b| {
                let b = b.clamp(s, s);
                [b.x0 as f32, b.y0 as f32, b.x1 as f32, b.y1 as f32]
            })
            .collect();
        let dev = self.ps.device();
        let base = self
            .sam
            .encode_boxes(&crate::nn::boxes::boxes_tensor(&flat, dev)?)?
            .to_dtype(self.ps.dtype())?
            .detach();
        let base = base.pad_with_zeros(1, 0, self.cfg.extra_tokens)?;
        let tokens = (base + self.tokens.forward(features)?)?;
        self.sam.decode(&inputs.decoder, &tokens, &inputs.dense, false)
    }

    /// Eval-mode forward pass with every intermediate the invariant checks need.
    pub fn evaluate(&self, sample: &Sample) -> Result<PrompterEval> {
        let inputs = self.inputs(sample)?;
        let feats = self.neck.forward(&inputs.prompter)?;
        let rpn_out = self.rpn.forward(&feats)?;
        let proposals = self.rpn.proposals(&rpn_out, false)?;
        let s = self.sam.image_size();
        let dtype = self.ps.dtype();
        let dev = self.ps.device().clone();
        if proposals.is_empty() {
            let m = self.sam.mask_size();
            return Ok(PrompterEval {
                proposals,
                logits: Tensor::zeros((0, self.cfg.num_classes), dtype, &dev)?,
                foreground: Tensor::zeros(0, dtype, &dev)?,
                kept: Vec::new(),
                mask_probs: Tensor::zeros((0, 1, m, m), dtype, &dev)?,
                detections: Vec::new(),
            });
        }
        let out = self.head.forward(&feats, &proposals)?;
        let fg = out.fg.clone().expect("the prompter head has a foreground output");
        let probs = softmax_last(&out.logits)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let fg_p = candle_nn::ops::sigmoid(&fg)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let deltas = to_f32_vec(&out.deltas)?;
        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        let mut classes = Vec::new();
        let mut index = Vec::new();
        for (i, p) in proposals.iter().enumerate() {
            let (c, pc) = p_argmax(&probs[i]);
            let score = fg_p[i] * pc;
            if score <= self.cfg.score_threshold {
                continue;
            }
            let d = [deltas[4 * i], deltas[4 * i + 1], deltas[4 * i + 2], deltas[4 * i + 3]];
            let b = BoxCoder::ROI.decode(p, d).clamp(s as f64, s as f64);
            if b.width() < 1.0 || b.height() < 1.0 {
                continue;
            }
            boxes.push(b);
            scores.push(score);
            classes.push(if self.cfg.class_agnostic_nms { 0 } else { c as u32 });
            index.push((i, c as u32));
        }
        let mut keep = box_nms(&boxes, &scores, &classes, self.cfg.nms_iou);
        keep.truncate(self.cfg.max_detections);
        let kept: Vec<usize> = keep.iter().map(|&k| index[k].0).collect();
        let m = self.sam.mask_size();
        if kept.is_empty() {
            return Ok(PrompterEval {
                proposals,
                logits: out.logits,
                foreground: fg,
                kept,
                mask_probs: Tensor::zeros((0, 1, m, m), dtype, &dev)?,
                detections: Vec::new(),
            });
        }
        let kept_boxes: Vec<BBox> = keep.iter().map(|&k| boxes[k]).collect();
        let idx = Tensor::from_vec(kept.iter().map(|&i| i as u32).collect::<Vec<_>>(), kept.len(), &dev)?;
        let features = out.features.index_select(&idx, 0)?;
        let (mask_logits, quality) = self.decode_masks(&inputs, &kept_boxes, &features)?;
        let mask_probs = candle_nn::ops::sigmoid(&mask_logits)?;
        let quality = quality.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let mut detections = Vec::with_capacity(kept.len());
        for (j, &k) in keep.iter().enumerate() {
            let logits = to_f32_vec(&mask_logits.i((j, 0))?)?;
            let mask = logits_to_mask(&logits, m, s);
            let mut d = Detection::new(boxes[k], index[k].1, scores[k]).with_mask(mask);
            d.mask_score = Some(quality[j][0].clamp(0.0, 1.0));
            detections.push(d);
        }
        Ok(PrompterEval {
            proposals,
            logits: out.logits,
            foreground: fg,
            kept,
            mask_probs,
            detections,
        })
    }

    fn training_loss(&self, sample: &Sample, rng: &mut ChaCha8Rng) -> Result<LossReport> {
        let inputs = self.inputs(sample)?;
        let feats = self.neck.forward(&inputs.prompter)?;
        let rpn_out = self.rpn.forward(&feats)?;
        let gt: Vec<BBox> = sample.instances.iter().map(|i| i.bbox).collect();
        let (rpn_cls, rpn_box) = self.rpn.loss(&rpn_out, &gt, rng)?;
        let proposals = self.rpn.proposals(&rpn_out, true)?;
        let rois = sample_rois(&proposals, &gt, &self.cfg.roi, rng);
        let boxes: Vec<BBox> = rois.iter().map(|r| r.0).collect();
        let out = self.head.forward(&feats, &boxes)?;
        let dev = self.ps.device().clone();
        let dtype = self.ps.dtype();
        let fg_target: Vec<f32> = rois.iter().map(|r| if r.1.is_some() { 1.0 } else { 0.0 }).collect();
        let fg_target = Tensor::from_vec(fg_target, rois.len(), &dev)?.to_dtype(dtype)?;
        let fg_loss = bce_with_logits(out.fg.as_ref().expect("foreground output"), &fg_target)?;
        let pos: Vec<usize> = (0..rois.len()).filter(|&i| rois[i].1.is_some()).collect();
        let mut terms = vec![
            ("rpn_cls", rpn_cls),
            ("rpn_box", rpn_box),
            ("foreground", fg_loss),
        ];
        if pos.is_empty() {
            let z = Tensor::zeros((), dtype, &dev)?;
            terms.extend([("class", z.clone()), ("box", z.clone()), ("mask", z)]);
            return LossReport::new(terms);
        }
        let matched: Vec<usize> = pos.iter().map(|&i| rois[i].1.expect("positive")).collect();
        let pidx = Tensor::from_vec(pos.iter().map(|&i| i as u32).collect::<Vec<_>>(), pos.len(), &dev)?;
        let labels: Vec<u32> = matched.iter().map(|&j| sample.instances[j].class_id).collect();
        let cls = self.class_loss.compute(&out.logits.index_select(&pidx, 0)?, &labels, false)?;
        let pos_boxes: Vec<BBox> = pos.iter().map(|&i| boxes[i]).collect();
        let targets = roi_targets(&pos_boxes, &gt, &matched, dtype, &dev)?;
        let pos_deltas = out.deltas.index_select(&pidx, 0)?;
        let box_loss = smooth_l1(&pos_deltas, &targets, 1.0 / 9.0, rois.len() as f64)?;

        // masks for the first foreground RoIs, prompted with their refined (detached) boxes
        let nm = pos.len().min(self.cfg.max_mask_rois.max(1));
        let s = self.sam.image_size() as f64;
        let d = to_f32_vec(&pos_deltas.narrow(0, 0, nm)?)?;
        let refined: Vec<BBox> = (0..nm)
            .map(|k| {
                let b = BoxCoder::ROI
                    .decode(&pos_boxes[k], [d[4 * k], d[4 * k + 1], d[4 * k + 2], d[4 * k + 3]])
                    .clamp(s, s);
                if b.width() < 1.0 || b.height() < 1.0 {
                    pos_boxes[k].clamp(s, s)
                } else {
                    b
                }
            })
            .collect();
        let features = out.features.index_select(&pidx.narrow(0, 0, nm)?, 0)?;
        let (mask_logits, _) = self.decode_masks(&inputs, &refined, &features)?;
        let m = self.sam.mask_size();
        let f = self.sam.image_size() / m;
        let mut tgt = Vec::with_capacity(nm * m * m);
        for &j in &matched[..nm] {
            tgt.extend(
                downsample_mask(&sample.instances[j].mask, f)
                    .into_iter()
                    .map(|v| if v >= 0.5 { 1.0f32 } else { 0.0 }),
            );
        }
        let tgt = Tensor::from_vec(tgt, (nm, 1, m, m), &dev)?.to_dtype(dtype)?;
        let mask_logits = mask_logits.to_dtype(dtype)?;
        let mask = (bce_with_logits(&mask_logits, &tgt)? + dice_loss(&mask_logits, &tgt)?)?;
        terms.extend([("class", cls), ("box", box_loss), ("mask", mask)]);
        LossReport::new(terms)
    }
}

fn p_argmax(p: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for j in 1..p.len() {
        if p[j] > p[best] {
            best = j;
        }
    }
    (best, p[best])
}

impl Model for AnchorPrompter {
    fn kind(&self) -> ModelKind {
        match self.variant {
            None => ModelKind::Rsprompter,
            Some(FusionVariant::Balsam) => ModelKind::Balsam,
            Some(FusionVariant::VariantA) => ModelKind::BalsamVariantA,
            Some(FusionVariant::VariantB) => ModelKind::BalsamVariantB,
        }
    }

    fn params(&self) -> &ParamStore {
        &self.ps
    }

    fn loss(&self, sample: &Sample, rng: &mut ChaCha8Rng) -> Result<LossReport> {
        self.training_loss(sample, rng)
    }

    fn predict(&self, sample: &Sample) -> Result<Vec<Detection>> {
        Ok(self.evaluate(sample)?.detections)
    }

    fn frozen_checksums(&self) -> Result<BTreeMap<String, String>> {
        self.sam.component_checksums()
    }

    fn image_size(&self) -> usize {
        self.sam.image_size()
    }
}
