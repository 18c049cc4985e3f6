//! Region-proposal network and RoI heads shared by the R-CNN detectors and the anchor
//! prompter.

use candle_core::{DType, Module, Tensor};
use crownseg_core::BBox;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::boxes::{box_nms, grid_anchors, match_boxes, sample_matches, BoxCoder, MatchLabel};
use crate::nn::losses::{bce_with_logits, smooth_l1};
use crate::nn::ops::{roi_align, to_f32_vec};
use crate::nn::{Conv2d, Linear, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RpnConfig {
    /// Anchor side lengths as fractions of the image side.
    pub anchor_fractions: Vec<f64>,
    pub pre_nms_train: usize,
    pub post_nms_train: usize,
    pub pre_nms_test: usize,
    pub post_nms_test: usize,
    pub nms_iou: f64,
    pub batch: usize,
    pub fg_fraction: f64,
    pub fg_iou: f64,
    pub bg_iou: f64,
}

impl Default for RpnConfig {
    fn default() -> Self {
        Self {
            anchor_fractions: vec![1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0],
            pre_nms_train: 1000,
            post_nms_train: 200,
            pre_nms_test: 500,
            post_nms_test: 100,
            nms_iou: 0.7,
            batch: 256,
            fg_fraction: 0.5,
            fg_iou: 0.7,
            bg_iou: 0.3,
        }
    }
}

/// Objectness and box deltas for every anchor of a single-level feature map.
#[derive(Clone, Debug)]
pub struct Rpn {
    conv: Conv2d,
    cls: Conv2d,
    reg: Conv2d,
    pub cfg: RpnConfig,
    image_size: usize,
    stride: f64,
}

pub struct RpnOutput {
    /// `[P]` objectness logits, one per anchor.
    pub objectness: Tensor,
    /// `[P, 4]` deltas.
    pub deltas: Tensor,
    pub anchors: Vec<BBox>,
}

impl Rpn {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        channels: usize,
        cfg: RpnConfig,
        image_size: usize,
        stride: usize,
    ) -> Result<Self> {
        let a = cfg.anchor_fractions.len();
        if a == 0 {
            return Err(Error::Config("at least one anchor size is needed".into()));
        }
        if cfg.post_nms_train == 0 || cfg.post_nms_test == 0 {
            return Err(Error::Config("proposal count must be positive".into()));
        }
        ps.scoped(name, |ps| {
            Ok(Self {
                conv: Conv2d::new(ps, "conv", channels, channels, 3, 1, 1)?,
                cls: conv_normal(ps, "cls", channels, a)?,
                reg: conv_normal(ps, "reg", channels, 4 * a)?,
                cfg,
                image_size,
                stride: stride as f64,
            })
        })
    }

    pub fn forward(&self, features: &Tensor) -> Result<RpnOutput> {
        let (_, _, h, w) = features.dims4()?;
        let a = self.cfg.anchor_fractions.len();
        let x = self.conv.forward(features)?.relu()?;
        let objectness = self.cls.forward(&x)?.permute((0, 2, 3, 1))?.flatten_all()?;
        let deltas = self
            .reg
            .forward(&x)?
            .reshape((1, a, 4, h, w))?
            .permute((0, 3, 4, 1, 2))?
            .reshape((h * w * a, 4))?;
        let sizes: Vec<f64> = self
            .cfg
            .anchor_fractions
            .iter()
            .map(|f| f * self.image_size as f64)
            .collect();
        Ok(RpnOutput {
            objectness,
            deltas,
            anchors: grid_anchors(w, h, self.stride, &sizes),
        })
    }

    /// Decoded, clipped and suppressed proposals, best first.
    pub fn proposals(&self, out: &RpnOutput, training: bool) -> Result<Vec<BBox>> {
        let (pre, post) = if training {
            (self.cfg.pre_nms_train, self.cfg.post_nms_train)
        } else {
            (self.cfg.pre_nms_test, self.cfg.post_nms_test)
        };
        let obj = to_f32_vec(&out.objectness)?;
        let deltas = to_f32_vec(&out.deltas)?;
        let mut order: Vec<usize> = (0..obj.len()).collect();
        order.sort_by(|&a, &b| obj[b].total_cmp(&obj[a]).then(a.cmp(&b)));
        order.truncate(pre);
        let s = self.image_size as f64;
        let mut boxes = Vec::with_capacity(order.len());
        let mut scores = Vec::with_capacity(order.len());
        for &i in &order {
            let d = [deltas[4 * i], deltas[4 * i + 1], deltas[4 * i + 2], deltas[4 * i + 3]];
            let b = BoxCoder::RPN.decode(&out.anchors[i], d).clamp(s, s);
            if b.width() < 1e-3 || b.height() < 1e-3 {
                continue;
            }
            boxes.push(b);
            scores.push(f64::from(obj[i]));
        }
        let classes = vec![0; boxes.len()];
        let keep = box_nms(&boxes, &scores, &classes, self.cfg.nms_iou);
        Ok(keep.into_iter().take(post).map(|i| boxes[i]).collect())
    }

    /// Objectness and box-regression losses against ground truth boxes.
    pub fn loss<R: Rng>(&self, out: &RpnOutput, gt: &[BBox], rng: &mut R) -> Result<(Tensor, Tensor)> {
        let labels = match_boxes(&out.anchors, gt, self.cfg.fg_iou, self.cfg.bg_iou, true);
        let (pos, neg) = sample_matches(&labels, self.cfg.batch, self.cfg.fg_fraction, rng);
        let dev = out.objectness.device();
        let dtype = out.objectness.dtype();
        let mut idx: Vec<u32> = pos.iter().chain(&neg).map(|&i| i as u32).collect();
        if idx.is_empty() {
            idx.push(0);
        }
        let n = idx.len();
        let mut target = vec![0f32; n];
        target[..pos.len()].fill(1.0);
        let sel = out.objectness.index_select(&Tensor::from_vec(idx, n, dev)?, 0)?;
        let target = Tensor::from_vec(target, n, dev)?.to_dtype(dtype)?;
        let cls = bce_with_logits(&sel, &target)?;
        let reg = if pos.is_empty() {
            Tensor::zeros((), dtype, dev)?
        } else {
            let t: Vec<f32> = pos
                .iter()
                .flat_map(|&i| match labels[i] {
                    MatchLabel::Foreground(j) => BoxCoder::RPN.encode(&out.anchors[i], &gt[j]),
                    _ => unreachable!("sampled positives are foreground"),
                })
                .collect();
            let t = Tensor::from_vec(t, (pos.len(), 4), dev)?.to_dtype(dtype)?;
            let pi: Vec<u32> = pos.iter().map(|&i| i as u32).collect();
            let p = out.deltas.index_select(&Tensor::from_vec(pi, pos.len(), dev)?, 0)?;
            smooth_l1(&p, &t, 1.0 / 9.0, n as f64)?
        };
        Ok((cls, reg))
    }
}

fn conv_normal(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Conv2d> {
    ps.scoped(name, |ps| {
        Ok(Conv2d {
            weight: ps.normal("weight", &[c_out, c_in, 1, 1], 0.01)?,
            bias: Some(ps.constant("bias", &[c_out], 0.0)?),
            stride: 1,
            padding: 0,
        })
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoiConfig {
    pub batch: usize,
    pub fg_fraction: f64,
    pub fg_iou: f64,
    pub pool: usize,
    pub hidden: usize,
}

impl Default for RoiConfig {
    fn default() -> Self {
        Self {
            batch: 64,
            fg_fraction: 0.25,
            fg_iou: 0.5,
            pool: 7,
            hidden: 256,
        }
    }
}

/// Training RoIs: proposals plus the ground truth boxes, sampled into foreground (with the
/// matched ground truth index) and background.
pub fn sample_rois<R: Rng>(
    proposals: &[BBox],
    gt: &[BBox],
    cfg: &RoiConfig,
    rng: &mut R,
) -> Vec<(BBox, Option<usize>)> {
    let mut all: Vec<BBox> = proposals.to_vec();
    all.extend_from_slice(gt);
    let labels = match_boxes(&all, gt, cfg.fg_iou, cfg.fg_iou, false);
    let (pos, neg) = sample_matches(&labels, cfg.batch, cfg.fg_fraction, rng);
    pos.iter()
        .map(|&i| match labels[i] {
            MatchLabel::Foreground(j) => (all[i], Some(j)),
            _ => unreachable!("sampled positives are foreground"),
        })
        .chain(neg.iter().map(|&i| (all[i], None)))
        .collect()
}

/// Two fully connected layers over pooled RoI features, with an optional third, followed by
/// the classification, optional foreground and box outputs.
#[derive(Clone, Debug)]
pub struct BoxHead {
    fc: Vec<Linear>,
    pub cls: Linear,
    pub fg: Option<Linear>,
    pub reg: Linear,
    pool: usize,
    scale: f64,
}

pub struct BoxHeadOutput {
    /// `[N, hidden]` RoI features after the shared layers.
    pub features: Tensor,
    pub logits: Tensor,
    pub fg: Option<Tensor>,
    /// `[N, 4 * R]`.
    pub deltas: Tensor,
}

impl BoxHead {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        channels: usize,
        cfg: &RoiConfig,
        scale: f64,
        num_logits: usize,
        foreground: bool,
        num_regressions: usize,
        extra_layer: bool,
    ) -> Result<Self> {
        let d_in = channels * cfg.pool * cfg.pool;
        let h = cfg.hidden;
        ps.scoped(name, |ps| {
            let mut fc = vec![Linear::new(ps, "fc1", d_in, h)?, Linear::new(ps, "fc2", h, h)?];
            if extra_layer {
                fc.push(Linear::new(ps, "fc3", h, h)?);
            }
            Ok(Self {
                fc,
                cls: Linear::new_normal(ps, "cls", h, num_logits, 0.01)?,
                fg: if foreground {
                    Some(Linear::new_normal(ps, "fg", h, 1, 0.01)?)
                } else {
                    None
                },
                reg: Linear::new_normal(ps, "reg", h, 4 * num_regressions, 0.001)?,
                pool: cfg.pool,
                scale,
            })
        })
    }

    pub fn forward(&self, features: &Tensor, rois: &[BBox]) -> Result<BoxHeadOutput> {
        let pooled = roi_align(features, rois, self.scale, self.pool, 2)?;
        let mut x = pooled.flatten_from(1)?;
        for l in &self.fc {
            x = l.forward(&x)?.relu()?;
        }
        Ok(BoxHeadOutput {
            logits: self.cls.forward(&x)?,
            fg: match &self.fg {
                Some(l) => Some(l.forward(&x)?.squeeze(1)?),
                None => None,
            },
            deltas: self.reg.forward(&x)?,
            features: x,
        })
    }
}

/// Regression targets for sampled foreground RoIs, `[F, 4]`.
pub fn roi_targets(rois: &[BBox], gt: &[BBox], matched: &[usize], dtype: DType, dev: &candle_core::Device) -> Result<Tensor> {
    let t: Vec<f32> = rois
        .iter()
        .zip(matched)
        .flat_map(|(r, &j)| BoxCoder::ROI.encode(r, &gt[j]))
        .collect();
    Ok(Tensor::from_vec(t, (rois.len(), 4), dev)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::SeedableRng;

    #[test]
    fn rpn_layout_and_proposals() {
        let mut ps = ParamStore::new(0, DType::F32);
        let rpn = Rpn::new(&mut ps, "rpn", 8, RpnConfig::default(), 64, 8).unwrap();
        let f = Tensor::randn(0f32, 1.0, (1, 8, 8, 8), &Device::Cpu).unwrap();
        let out = rpn.forward(&f).unwrap();
        assert_eq!(out.objectness.dims(), &[8 * 8 * 3]);
        assert_eq!(out.deltas.dims(), &[8 * 8 * 3, 4]);
        assert_eq!(out.anchors.len(), 192);
        let p = rpn.proposals(&out, false).unwrap();
        assert!(!p.is_empty() && p.len() <= 100);
        let gt = [BBox::new(10.0, 10.0, 30.0, 28.0)];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let (c, r) = rpn.loss(&out, &gt, &mut rng).unwrap();
        assert!(crate::nn::scalar(&c).unwrap() > 0.0);
        assert!(crate::nn::scalar(&r).unwrap() >= 0.0);
        let rois = sample_rois(&p, &gt, &RoiConfig::default(), &mut rng);
        assert!(rois.iter().any(|r| r.1 == Some(0)));
    }
}
