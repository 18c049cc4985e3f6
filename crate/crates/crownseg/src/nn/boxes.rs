//! Anchors, box encoding, proposal matching and sampling for the region-based heads.

use candle_core::{Device, Tensor};
use crownseg_core::nms::{nms_indices, NmsConfig, OverlapBasis};
use crownseg_core::{BBox, Detection};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::Result;

/// Largest log-scale change a decoded box may apply.
const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxCoder {
    pub weights: [f64; 4],
}

impl BoxCoder {
    pub const RPN: BoxCoder = BoxCoder {
        weights: [1.0, 1.0, 1.0, 1.0],
    };
    pub const ROI: BoxCoder = BoxCoder {
        weights: [10.0, 10.0, 5.0, 5.0],
    };

    pub fn encode(&self, reference: &BBox, target: &BBox) -> [f32; 4] {
        let (rw, rh) = (reference.width().max(1e-6), reference.height().max(1e-6));
        let (rx, ry) = reference.center();
        let (tw, th) = (target.width().max(1e-6), target.height().max(1e-6));
        let (tx, ty) = target.center();
        let [wx, wy, ww, wh] = self.weights;
        [
            (wx * (tx - rx) / rw) as f32,
            (wy * (ty - ry) / rh) as f32,
            (ww * (tw / rw).ln()) as f32,
            (wh * (th / rh).ln()) as f32,
        ]
    }

    pub fn decode(&self, reference: &BBox, d: [f32; 4]) -> BBox {
        let (rw, rh) = (reference.width(), reference.height());
        let (rx, ry) = reference.center();
        let [wx, wy, ww, wh] = self.weights;
        let dx = f64::from(d[0]) / wx;
        let dy = f64::from(d[1]) / wy;
        let dw = (f64::from(d[2]) / ww).min(MAX_LOG_SCALE);
        let dh = (f64::from(d[3]) / wh).min(MAX_LOG_SCALE);
        let cx = dx * rw + rx;
        let cy = dy * rh + ry;
        let w = dw.exp() * rw;
        let h = dh.exp() * rh;
        BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }
}

/// Square anchors of each size centered on every cell of a `gw x gh` grid with the given
/// stride, ordered by cell (row-major) then size.
pub fn grid_anchors(gw: usize, gh: usize, stride: f64, sizes: &[f64]) -> Vec<BBox> {
    let mut out = Vec::with_capacity(gw * gh * sizes.len());
    for y in 0..gh {
        for x in 0..gw {
            let cx = (x as f64 + 0.5) * stride;
            let cy = (y as f64 + 0.5) * stride;
            for &s in sizes {
                out.push(BBox::new(cx - s / 2.0, cy - s / 2.0, cx + s / 2.0, cy + s / 2.0));
            }
        }
    }
    out
}

/// Outcome of matching one proposal against the ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchLabel {
    Foreground(usize),
    Background,
    Ignore,
}

/// Assign every proposal to its best ground truth box. Proposals at or above `high` become
/// foreground, below `low` background, the rest ignored. With `allow_low_quality` each
/// ground truth also claims the proposals that overlap it best.
pub fn match_boxes(
    proposals: &[BBox],
    gt: &[BBox],
    high: f64,
    low: f64,
    allow_low_quality: bool,
) -> Vec<MatchLabel> {
    if gt.is_empty() {
        return vec![MatchLabel::Background; proposals.len()];
    }
    let ious: Vec<Vec<f64>> = proposals
        .iter()
        .map(|p| gt.iter().map(|g| p.iou(g)).collect())
        .collect();
    let mut out: Vec<MatchLabel> = ious
        .iter()
        .map(|row| {
            let (j, &best) = row
                .iter()
                .enumerate()
                .fold((0, &f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
            if best >= high {
                MatchLabel::Foreground(j)
            } else if best < low {
                MatchLabel::Background
            } else {
                MatchLabel::Ignore
            }
        })
        .collect();
    if allow_low_quality {
        for j in 0..gt.len() {
            let best = ious.iter().map(|r| r[j]).fold(0.0, f64::max);
            if best <= 0.0 {
                continue;
            }
            for (i, row) in ious.iter().enumerate() {
                if row[j] == best {
                    let (bj, _) = row
                        .iter()
                        .enumerate()
                        .fold((0, &f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
                    out[i] = MatchLabel::Foreground(bj);
                }
            }
        }
    }
    out
}

/// Choose up to `total` proposals with at most `fraction` foreground. Returns indices.
pub fn sample_matches<R: Rng>(
    labels: &[MatchLabel],
    total: usize,
    fraction: f64,
    rng: &mut R,
) -> (Vec<usize>, Vec<usize>) {
    let mut pos: Vec<usize> = (0..labels.len())
        .filter(|&i| matches!(labels[i], MatchLabel::Foreground(_)))
        .collect();
    let mut neg: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] == MatchLabel::Background)
        .collect();
    let n_pos = pos.len().min((total as f64 * fraction) as usize);
    let n_neg = neg.len().min(total - n_pos);
    pos.shuffle(rng);
    neg.shuffle(rng);
    pos.truncate(n_pos);
    neg.truncate(n_neg);
    pos.sort_unstable();
    neg.sort_unstable();
    (pos, neg)
}

/// Greedy box NMS over `(box, score, class)` triples; returns kept indices by descending
/// score. Pass one class for class-agnostic suppression.
pub fn box_nms(boxes: &[BBox], scores: &[f64], classes: &[u32], iou: f64) -> Vec<usize> {
    let dets: Vec<Detection> = boxes
        .iter()
        .zip(scores)
        .zip(classes)
        .map(|((b, &s), &c)| Detection::new(*b, c, s))
        .collect();
    nms_indices(
        &dets,
        &NmsConfig {
            score_threshold: f64::NEG_INFINITY,
            iou_threshold: iou,
            class_agnostic: false,
            overlap_basis: OverlapBasis::Box,
        },
    )
}

pub fn boxes_tensor(boxes: &[[f32; 4]], device: &Device) -> Result<Tensor> {
    let flat: Vec<f32> = boxes.iter().flat_map(|b| b.iter().copied()).collect();
    Ok(Tensor::from_vec(flat, (boxes.len(), 4), device)?)
}
