//! COCO-style average precision, weighted mAP, single-class collapse and best-match mIoU.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::detection::{BBox, Detection};
use crate::error::{Error, Result};
use crate::raster::Mask;
use crate::taxonomy::ClassWeights;

/// Detections kept per image and class, as in the COCO evaluator.
pub const MAX_DETS: usize = 100;
pub const RECALL_POINTS: usize = 101;

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub class_id: u32,
    pub bbox: BBox,
    pub mask: Option<Mask>,
}

impl GroundTruth {
    pub fn from_mask(class_id: u32, mask: Mask) -> Self {
        let bbox = mask.bbox().unwrap_or(BBox::new(0.0, 0.0, 0.0, 0.0));
        Self {
            class_id,
            bbox,
            mask: Some(mask),
        }
    }
}

/// Ground truth and predictions of one image.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct EvalImage {
    pub ground_truth: Vec<GroundTruth>,
    pub detections: Vec<Detection>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum IouType {
    #[default]
    Segm,
    BBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum IouThresholds {
    /// 0.50:0.95 in steps of 0.05.
    #[default]
    Coco,
    /// 0.5 only.
    Single,
}

impl IouThresholds {
    pub fn values(self) -> Vec<f64> {
        match self {
            IouThresholds::Coco => linspace(0.5, 0.95, 10),
            IouThresholds::Single => vec![0.5],
        }
    }
}

/// Evenly spaced samples computed as `start + i * step` with the last sample pinned to `stop`.
pub fn linspace(start: f64, stop: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![start];
    }
    let step = (stop - start) / (n - 1) as f64;
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * step + start).collect();
    v[n - 1] = stop;
    v
}

fn gt_iou(gt: &GroundTruth, dt: &Detection, kind: IouType) -> f64 {
    match kind {
        IouType::BBox => dt.bbox.iou(&gt.bbox),
        IouType::Segm => match (&dt.mask, &gt.mask) {
            (Some(a), Some(b)) => a.iou(b),
            _ => 0.0,
        },
    }
}

/// Per-prediction match flags for one image and class at one threshold. `dts` must already be
/// in descending score order.
pub fn greedy_match(ious: &[Vec<f64>], n_gt: usize, threshold: f64) -> Vec<Option<usize>> {
    let mut taken = vec![false; n_gt];
    let mut out = Vec::with_capacity(ious.len());
    for row in ious {
        let mut best = libm::fmin(threshold, 1.0 - 1e-10);
        let mut m = None;
        for (g, &iou) in row.iter().enumerate() {
            if taken[g] || iou < best {
                continue;
            }
            best = iou;
            m = Some(g);
        }
        if let Some(g) = m {
            taken[g] = true;
        }
        out.push(m);
    }
    out
}

/// Interpolated precision averaged over 101 recall points, given detections already ranked.
pub fn interpolated_precision(tp: &[bool], n_gt: usize) -> f64 {
    let mut tps = 0.0f64;
    let mut fps = 0.0f64;
    let mut rc = Vec::with_capacity(tp.len());
    let mut pr = Vec::with_capacity(tp.len());
    for &t in tp {
        if t {
            tps += 1.0;
        } else {
            fps += 1.0;
        }
        rc.push(tps / n_gt as f64);
        // tps + fps >= 1 here, so no guard term is needed
        pr.push(tps / (tps + fps));
    }
    for i in (1..pr.len()).rev() {
        if pr[i] > pr[i - 1] {
            pr[i - 1] = pr[i];
        }
    }
    let mut sum = 0.0;
    for r in linspace(0.0, 1.0, RECALL_POINTS) {
        let idx = rc.partition_point(|&x| x < r);
        if idx < pr.len() {
            sum += pr[idx];
        }
    }
    sum / RECALL_POINTS as f64
}

/// AP of one class averaged over `thresholds`; `None` when the class has no ground truth.
pub fn average_precision(
    images: &[EvalImage],
    class_id: u32,
    thresholds: &[f64],
    kind: IouType,
) -> Option<f64> {
    struct Prepared {
        scores: Vec<f64>,
        ious: Vec<Vec<f64>>,
        n_gt: usize,
    }
    let mut prepared = Vec::with_capacity(images.len());
    let mut n_gt = 0;
    for img in images {
        let gts: Vec<&GroundTruth> = img
            .ground_truth
            .iter()
            .filter(|g| g.class_id == class_id)
            .collect();
        let mut dts: Vec<&Detection> = img
            .detections
            .iter()
            .filter(|d| d.class_id == class_id)
            .collect();
        dts.sort_by(|a, b| b.score.total_cmp(&a.score));
        dts.truncate(MAX_DETS);
        n_gt += gts.len();
        prepared.push(Prepared {
            scores: dts.iter().map(|d| d.score).collect(),
            ious: dts
                .iter()
                .map(|d| gts.iter().map(|g| gt_iou(g, d, kind)).collect())
                .collect(),
            n_gt: gts.len(),
        });
    }
    if n_gt == 0 {
        return None;
    }
    let mut total = 0.0;
    for &t in thresholds {
        let mut ranked: Vec<(f64, bool)> = Vec::new();
        for p in &prepared {
            let m = greedy_match(&p.ious, p.n_gt, t);
            ranked.extend(p.scores.iter().zip(m).map(|(&s, m)| (s, m.is_some())));
        }
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
        let tp: Vec<bool> = ranked.into_iter().map(|(_, t)| t).collect();
        total += interpolated_precision(&tp, n_gt);
    }
    Some(total / thresholds.len() as f64)
}

/// AP per class id, skipping classes absent from the ground truth.
pub fn per_class_ap(
    images: &[EvalImage],
    thresholds: &[f64],
    kind: IouType,
) -> BTreeMap<u32, f64> {
    let classes: BTreeSet<u32> = images
        .iter()
        .flat_map(|i| i.ground_truth.iter().map(|g| g.class_id))
        .collect();
    classes
        .into_iter()
        .filter_map(|c| average_precision(images, c, thresholds, kind).map(|ap| (c, ap)))
        .collect()
}

/// Unweighted mean of per-class APs, or their weighted combination when weights are given.
/// Weights are renormalized over the evaluated classes.
pub fn aggregate(per_class: &BTreeMap<String, f64>, weights: Option<&ClassWeights>) -> Result<f64> {
    if per_class.is_empty() {
        return Err(Error::Empty("per-class AP"));
    }
    match weights {
        None => Ok(per_class.values().sum::<f64>() / per_class.len() as f64),
        Some(w) => {
            let mut num = 0.0;
            let mut den = 0.0;
            for (c, &ap) in per_class {
                let wc = w
                    .get(c)
                    .ok_or_else(|| Error::WeightMismatch(alloc::format!("no weight for {c}")))?;
                num += wc * ap;
                den += wc;
            }
            if !(den > 0.0) {
                return Err(Error::WeightMismatch("weights sum to zero".into()));
            }
            // rounding must not push a convex combination outside its hull
            let lo = per_class.values().copied().fold(f64::INFINITY, f64::min);
            let hi = per_class.values().copied().fold(f64::NEG_INFINITY, f64::max);
            Ok((num / den).clamp(lo, hi))
        }
    }
}

/// Mean over ground-truth instances of the best IoU against any prediction in the same image.
/// Scores and classes are ignored and a prediction may serve several instances.
pub fn mean_iou(images: &[EvalImage], kind: IouType) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for img in images {
        for g in &img.ground_truth {
            n += 1;
            sum += img
                .detections
                .iter()
                .map(|d| gt_iou(g, d, kind))
                .fold(0.0, f64::max);
        }
    }
    if n == 0 {
        return Err(Error::NoGroundTruth);
    }
    Ok(sum / n as f64)
}

/// Relabel every instance as one class.
pub fn collapse(images: &[EvalImage]) -> Vec<EvalImage> {
    images
        .iter()
        .map(|img| EvalImage {
            ground_truth: img
                .ground_truth
                .iter()
                .map(|g| GroundTruth {
                    class_id: 0,
                    ..g.clone()
                })
                .collect(),
            detections: img
                .detections
                .iter()
                .map(|d| Detection {
                    class_id: 0,
                    ..d.clone()
                })
                .collect(),
        })
        .collect()
}

/// `(mAP, mIoU)` with all labels merged into a single class.
pub fn single_class_collapse(
    images: &[EvalImage],
    thresholds: &[f64],
    kind: IouType,
) -> Result<(f64, f64)> {
    let c = collapse(images);
    let ap = average_precision(&c, 0, thresholds, kind).ok_or(Error::NoGroundTruth)?;
    Ok((ap, mean_iou(&c, kind)?))
}

#[derive(Clone, Debug, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsReport {
    pub per_class_ap: BTreeMap<String, f64>,
    pub map: f64,
    pub wmap: f64,
    pub single_class_map: f64,
    pub miou: f64,
    pub iou_thresholds: IouThresholds,
    /// classes listed in the schema without ground truth; excluded from the means
    #[cfg_attr(feature = "serde", serde(default))]
    pub skipped_classes: Vec<String>,
}

/// Full report. `class_names[i]` names class id `i`; `weights` defaults to test proportions.
pub fn evaluate(
    images: &[EvalImage],
    class_names: &[String],
    weights: Option<&ClassWeights>,
    thresholds: IouThresholds,
) -> Result<MetricsReport> {
    let ts = thresholds.values();
    let kind = IouType::Segm;
    let by_id = per_class_ap(images, &ts, kind);
    let mut per_class = BTreeMap::new();
    for (&id, &ap) in &by_id {
        let name = class_names.get(id as usize).ok_or(Error::LabelOutOfRange {
            label: id as usize,
            num_classes: class_names.len(),
        })?;
        per_class.insert(name.clone(), ap);
    }
    let skipped = class_names
        .iter()
        .filter(|c| !per_class.contains_key(*c))
        .cloned()
        .collect();
    let test_weights;
    let weights = match weights {
        Some(w) => w,
        None => {
            let mut counts: BTreeMap<String, u64> = BTreeMap::new();
            for img in images {
                for g in &img.ground_truth {
                    if let Some(name) = class_names.get(g.class_id as usize) {
                        *counts.entry(name.clone()).or_default() += 1;
                    }
                }
            }
            test_weights = crate::taxonomy::test_proportion_weights(&counts)?;
            &test_weights
        }
    };
    let (single_class_map, miou) = single_class_collapse(images, &ts, kind)?;
    Ok(MetricsReport {
        map: aggregate(&per_class, None)?,
        wmap: aggregate(&per_class, Some(weights))?,
        per_class_ap: per_class,
        single_class_map,
        miou,
        iou_thresholds: thresholds,
        skipped_classes: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::test_proportion_weights;
    use alloc::string::ToString;

    fn square(x: usize, y: usize, s: usize) -> Mask {
        Mask::from_fn(32, 32, |i, j| i >= x && i < x + s && j >= y && j < y + s)
    }

    fn det(mask: Mask, class: u32, score: f64) -> Detection {
        Detection::new(mask.bbox().unwrap(), class, score).with_mask(mask)
    }

    #[test]
    fn coco_thresholds() {
        let t = IouThresholds::Coco.values();
        assert_eq!(t.len(), 10);
        assert_eq!(t[0], 0.5);
        assert_eq!(t[9], 0.95);
    }

    #[test]
    fn perfect_and_empty() {
        let img = EvalImage {
            ground_truth: vec![GroundTruth::from_mask(0, square(2, 2, 6))],
            detections: vec![det(square(2, 2, 6), 0, 0.9)],
        };
        let t = IouThresholds::Coco.values();
        assert_eq!(average_precision(&[img.clone()], 0, &t, IouType::Segm), Some(1.0));
        let none = EvalImage {
            detections: vec![],
            ..img.clone()
        };
        assert_eq!(average_precision(&[none], 0, &t, IouType::Segm), Some(0.0));
        assert_eq!(average_precision(&[img], 3, &t, IouType::Segm), None);
    }

    #[test]
    fn tp_tp_fp() {
        let gts: Vec<GroundTruth> = (0..3)
            .map(|i| GroundTruth::from_mask(0, square(i * 10, 0, 8)))
            .collect();
        let img = EvalImage {
            detections: vec![
                det(square(0, 0, 8), 0, 0.9),
                det(square(10, 0, 8), 0, 0.8),
                det(square(20, 20, 8), 0, 0.7),
            ],
            ground_truth: gts,
        };
        let ap = average_precision(&[img], 0, &[0.5], IouType::Segm).unwrap();
        // precision 1 up to recall 2/3 covers recall samples 0..=66
        assert!((ap - 67.0 / 101.0).abs() < 1e-12);
    }

    #[test]
    fn aggregation() {
        let ap: BTreeMap<String, f64> = [("A".to_string(), 0.5), ("B".to_string(), 1.0)].into();
        let w = test_proportion_weights(&[("A".to_string(), 90), ("B".to_string(), 10)].into()).unwrap();
        assert!((aggregate(&ap, Some(&w)).unwrap() - 0.55).abs() < 1e-12);
        assert_eq!(aggregate(&ap, None).unwrap(), 0.75);
        let partial = test_proportion_weights(&[("A".to_string(), 1)].into()).unwrap();
        assert!(matches!(aggregate(&ap, Some(&partial)), Err(Error::WeightMismatch(_))));
    }

    #[test]
    fn miou_best_match() {
        let img = EvalImage {
            ground_truth: vec![
                GroundTruth::from_mask(0, square(0, 0, 10)),
                GroundTruth::from_mask(0, square(20, 20, 5)),
            ],
            detections: vec![det(square(0, 0, 8), 1, 0.1)],
        };
        let m = mean_iou(&[img], IouType::Segm).unwrap();
        assert!((m - 0.64 / 2.0).abs() < 1e-12);
        assert_eq!(mean_iou(&[], IouType::Segm), Err(Error::NoGroundTruth));
    }

    #[test]
    fn collapse_ignores_class_errors() {
        let img = EvalImage {
            ground_truth: vec![GroundTruth::from_mask(0, square(0, 0, 10))],
            detections: vec![det(square(0, 0, 10), 2, 0.9)],
        };
        let t = IouThresholds::Coco.values();
        assert_eq!(average_precision(&[img.clone()], 0, &t, IouType::Segm), Some(0.0));
        assert_eq!(single_class_collapse(&[img], &t, IouType::Segm).unwrap(), (1.0, 1.0));
    }
}
