//! Greedy non-maximum suppression.

use alloc::vec::Vec;

use crate::detection::Detection;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum OverlapBasis {
    Box,
    #[default]
    Mask,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NmsConfig {
    pub score_threshold: f64,
    pub iou_threshold: f64,
    pub class_agnostic: bool,
    pub overlap_basis: OverlapBasis,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.5,
            iou_threshold: 0.5,
            class_agnostic: false,
            overlap_basis: OverlapBasis::Mask,
        }
    }
}

impl NmsConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("score", self.score_threshold), ("iou", self.iou_threshold)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(alloc::format!(
                    "nms.{name} = {v} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Overlap between two detections under `basis`. Mask overlap falls back to boxes when
/// either mask is missing.
pub fn overlap(a: &Detection, b: &Detection, basis: OverlapBasis) -> f64 {
    match (basis, &a.mask, &b.mask) {
        (OverlapBasis::Mask, Some(ma), Some(mb)) => ma.iou(mb),
        _ => a.bbox.iou(&b.bbox),
    }
}

/// Indices (into `dets`) of survivors, in descending score order.
pub fn nms_indices(dets: &[Detection], cfg: &NmsConfig) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len())
        .filter(|&i| dets[i].score >= cfg.score_threshold)
        .collect();
    // stable: equal scores keep insertion order
    order.sort_by(|&i, &j| dets[j].score.total_cmp(&dets[i].score));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = keep.iter().any(|&k| {
            (cfg.class_agnostic || dets[k].class_id == dets[i].class_id)
                && overlap(&dets[k], &dets[i], cfg.overlap_basis) > cfg.iou_threshold
        });
        if !suppressed {
            keep.push(i);
        }
    }
    keep
}

/// Drop detections under the score threshold, then greedily suppress any detection that
/// overlaps a higher-scored kept one by more than the IoU threshold. Only same-class pairs
/// compete unless the config is class-agnostic.
pub fn nms(dets: &[Detection], cfg: &NmsConfig) -> Vec<Detection> {
    nms_indices(dets, cfg)
        .into_iter()
        .map(|i| dets[i].clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::BBox;
    use alloc::vec;

    fn det(class: u32, score: f64) -> Detection {
        Detection::new(BBox::new(0.0, 0.0, 10.0, 10.0), class, score)
    }

    #[test]
    fn identical_same_class_keeps_best() {
        let cfg = NmsConfig {
            overlap_basis: OverlapBasis::Box,
            ..Default::default()
        };
        let out = nms(&[det(0, 0.8), det(0, 0.9)], &cfg);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.9);
    }

    #[test]
    fn class_aware_split() {
        let mut cfg = NmsConfig::default();
        assert_eq!(nms(&[det(0, 0.9), det(1, 0.8)], &cfg).len(), 2);
        cfg.class_agnostic = true;
        assert_eq!(nms(&[det(0, 0.9), det(1, 0.8)], &cfg).len(), 1);
    }

    #[test]
    fn low_scores_dropped_and_ties_stable() {
        let cfg = NmsConfig::default();
        assert!(nms(&[det(0, 0.4)], &cfg).is_empty());
        let a = Detection::new(BBox::new(0.0, 0.0, 10.0, 10.0), 0, 0.7);
        let b = Detection::new(BBox::new(50.0, 0.0, 60.0, 10.0), 0, 0.7);
        assert_eq!(nms_indices(&[a, b], &cfg), vec![0, 1]);
    }
}
