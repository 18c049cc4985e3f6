//! Differentiable losses.

use candle_core::{Tensor, D};
use crownseg_core::losses::{HierarchicalLossConfig, HierarchyPlan, LevelBuckets};
use crownseg_core::taxonomy::{Level, TaxonomyTree};

use crate::error::{Error, Result};
use crate::nn::log_softmax_last;

fn labels_tensor(labels: &[u32], dev: &candle_core::Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(labels.to_vec(), (labels.len(), 1), dev)?)
}

fn check_labels(logits: &Tensor, labels: &[u32]) -> Result<usize> {
    let (n, k) = logits.dims2()?;
    if n != labels.len() {
        return Err(Error::Model(format!("{n} logit rows for {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(crownseg_core::Error::LabelOutOfRange {
            label: bad as usize,
            num_classes: k,
        }
        .into());
    }
    Ok(k)
}

fn zero(like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::zeros((), like.dtype(), like.device())?)
}

/// Per-instance negative log-likelihood, shape `[N]`.
pub fn nll(logits: &Tensor, labels: &[u32]) -> Result<Tensor> {
    check_labels(logits, labels)?;
    let lp = log_softmax_last(logits)?;
    Ok(lp
        .gather(&labels_tensor(labels, logits.device())?, 1)?
        .squeeze(1)?
        .neg()?)
}

pub fn cross_entropy(logits: &Tensor, labels: &[u32]) -> Result<Tensor> {
    if labels.is_empty() {
        return zero(logits);
    }
    Ok(nll(logits, labels)?.mean_all()?)
}

/// Cross-entropy weighted by the true class, reduced by the weighted mean.
pub fn weighted_cross_entropy(logits: &Tensor, labels: &[u32], weights: &[f64]) -> Result<Tensor> {
    let k = check_labels(logits, labels)?;
    if weights.len() != k {
        return Err(crownseg_core::Error::MissingWeight(format!(
            "{} weights for {k} classes",
            weights.len()
        ))
        .into());
    }
    if labels.is_empty() {
        return zero(logits);
    }
    let w: Vec<f64> = labels.iter().map(|&l| weights[l as usize]).collect();
    let den: f64 = w.iter().sum();
    if den <= 0.0 {
        return zero(logits);
    }
    let w = Tensor::from_vec(w, labels.len(), logits.device())?.to_dtype(logits.dtype())?;
    Ok((nll(logits, labels)?.mul(&w)?.sum_all()? / den)?)
}

/// Mean negative log bucket probability for one level of the hierarchy.
pub fn bucket_nll(logits: &Tensor, buckets: &LevelBuckets) -> Result<Tensor> {
    let (_, k) = logits.dims2()?;
    let rows: Vec<u32> = (0..buckets.targets.len())
        .filter(|&i| buckets.targets[i].is_some())
        .map(|i| i as u32)
        .collect();
    if rows.is_empty() {
        return zero(logits);
    }
    let targets: Vec<u32> = buckets.targets.iter().flatten().map(|&b| b as u32).collect();
    let nb = buckets.num_buckets();
    let dev = logits.device();
    // additive mask: 0 where the class belongs to the bucket, a large negative value elsewhere
    let mut mask = vec![-1e4f64; k * nb];
    for (c, &b) in buckets.class_bucket.iter().enumerate() {
        mask[c * nb + b] = 0.0;
    }
    let mask = Tensor::from_vec(mask, (1, k, nb), dev)?.to_dtype(logits.dtype())?;
    let sel = logits.index_select(&Tensor::from_vec(rows.clone(), rows.len(), dev)?, 0)?;
    let lp = log_softmax_last(&sel)?;
    let per_bucket = lp.unsqueeze(2)?.broadcast_add(&mask)?.log_sum_exp(1)?;
    let picked = per_bucket.gather(&labels_tensor(&targets, dev)?, 1)?.squeeze(1)?;
    Ok(picked.neg()?.mean_all()?)
}

/// Weighted sum of the species, genus and family terms of a resolved hierarchy plan.
pub fn hierarchical_loss(logits: &Tensor, plan: &HierarchyPlan, level_weights: [f64; 3]) -> Result<Tensor> {
    let mut total = zero(logits)?;
    for (w, b) in level_weights
        .iter()
        .zip([&plan.species, &plan.genus, &plan.family])
    {
        if *w != 0.0 {
            total = (total + (bucket_nll(logits, b)? * *w)?)?;
        }
    }
    Ok(total)
}

/// Numerically stable binary cross-entropy on logits, averaged over all elements.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    if logits.elem_count() == 0 {
        return zero(logits);
    }
    let relu = logits.relu()?;
    let soft = logits.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok((relu - logits.mul(targets)?)?.add(&soft)?.mean_all()?)
}

/// Soft dice loss per instance (first dimension), averaged.
pub fn dice_loss(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let n = logits.dim(0)?;
    if n == 0 {
        return zero(logits);
    }
    let p = candle_nn::ops::sigmoid(logits)?.flatten_from(1)?;
    let t = targets.flatten_from(1)?;
    let inter = p.mul(&t)?.sum(D::Minus1)?;
    let denom = (p.sum(D::Minus1)? + t.sum(D::Minus1)?)?;
    let dice = ((inter * 2.0)? + 1.0)?.div(&(denom + 1.0)?)?;
    Ok(dice.neg()?.affine(1.0, 1.0)?.mean_all()?)
}

/// Smooth L1 summed over elements and divided by `normalizer`.
pub fn smooth_l1(pred: &Tensor, target: &Tensor, beta: f64, normalizer: f64) -> Result<Tensor> {
    if pred.elem_count() == 0 {
        return zero(pred);
    }
    let d = (pred - target)?.abs()?;
    let small = d.lt(beta)?;
    let quad = (d.sqr()? * (0.5 / beta))?;
    let lin = (d.clone() - 0.5 * beta)?;
    Ok((small.where_cond(&quad, &lin)?.sum_all()? / normalizer.max(1.0))?)
}

/// Name of the background column that region-based heads put in front of the classes.
pub const BACKGROUND: &str = "__background__";

/// Classification loss applied to the class logits of every model.
#[derive(Clone, Debug, PartialEq)]
pub enum ClassLoss {
    CrossEntropy,
    /// Weighted by the true class; one weight per schema class.
    Weighted(Vec<f64>),
    Hierarchical {
        classes: Vec<String>,
        tree: TaxonomyTree,
        config: HierarchicalLossConfig,
    },
}

impl ClassLoss {
    /// `logits` is `[N, K]`, or `[N, K + 1]` with background in column 0 when `background` is
    /// set; `labels` index the logit columns.
    pub fn compute(&self, logits: &Tensor, labels: &[u32], background: bool) -> Result<Tensor> {
        match self {
            ClassLoss::CrossEntropy => cross_entropy(logits, labels),
            ClassLoss::Weighted(w) => {
                if !background {
                    return weighted_cross_entropy(logits, labels, w);
                }
                // background counts like an average class
                let mean = if w.is_empty() { 1.0 } else { w.iter().sum::<f64>() / w.len() as f64 };
                let mut full = Vec::with_capacity(w.len() + 1);
                full.push(mean);
                full.extend_from_slice(w);
                weighted_cross_entropy(logits, labels, &full)
            }
            ClassLoss::Hierarchical {
                classes,
                tree,
                config,
            } => {
                let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
                let plan = if background {
                    let mut cls = Vec::with_capacity(classes.len() + 1);
                    cls.push(BACKGROUND.to_string());
                    cls.extend(classes.iter().cloned());
                    let mut tree = tree.clone();
                    tree.level.insert(BACKGROUND.to_string(), Level::Other);
                    HierarchyPlan::new(&cls, &labels, &tree, config)?
                } else {
                    HierarchyPlan::new(classes, &labels, tree, config)?
                };
                check_labels(logits, &labels.iter().map(|&l| l as u32).collect::<Vec<_>>())?;
                hierarchical_loss(logits, &plan, config.level_weights)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t(v: &[f64], shape: (usize, usize)) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn matches_reference_values() {
        let logits = [0.2, -1.0, 0.5, 1.5, 0.0, -0.3];
        let labels = [2u32, 0];
        let ce = crate::nn::scalar(&cross_entropy(&t(&logits, (2, 3)), &labels).unwrap()).unwrap();
        let reference = crownseg_core::losses::cross_entropy(&logits, &[2, 0], 3).unwrap();
        assert!((ce - reference).abs() < 1e-12);
        let w = crate::nn::scalar(
            &weighted_cross_entropy(&t(&logits, (2, 3)), &labels, &[0.5, 0.1, 0.4]).unwrap(),
        )
        .unwrap();
        let names = ["a", "b", "c"];
        let cw = crownseg_core::taxonomy::ClassWeights {
            weights: [("a".into(), 0.5), ("b".into(), 0.1), ("c".into(), 0.4)].into(),
            normalization: crownseg_core::taxonomy::Normalization::SumToOne,
        };
        let r = crownseg_core::losses::weighted_cross_entropy(&logits, &[2, 0], &names, &cw).unwrap();
        assert!((w - r).abs() < 1e-12);
    }

    #[test]
    fn bce_and_dice_limits() {
        let big = t(&[30.0, -30.0], (1, 2));
        let tgt = t(&[1.0, 0.0], (1, 2));
        assert!(crate::nn::scalar(&bce_with_logits(&big, &tgt).unwrap()).unwrap() < 1e-10);
        assert!(crate::nn::scalar(&dice_loss(&big, &tgt).unwrap()).unwrap() < 1e-10);
        let zero = t(&[0.0, 0.0], (1, 2));
        let b = crate::nn::scalar(&bce_with_logits(&zero, &tgt).unwrap()).unwrap();
        assert!((b - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn class_loss_background_column() {
        let logits = t(&[0.3, 0.1, -0.4, 1.0, -2.0, 0.5], (2, 3));
        let labels = [0u32, 2];
        let ce = crate::nn::scalar(&cross_entropy(&logits, &labels).unwrap()).unwrap();
        let w = ClassLoss::Weighted(vec![0.5, 0.5]);
        let got = crate::nn::scalar(&w.compute(&logits, &labels, true).unwrap()).unwrap();
        assert!((got - ce).abs() < 1e-12);
        let mut level = std::collections::BTreeMap::new();
        level.insert("a".to_string(), Level::Other);
        level.insert("b".to_string(), Level::Other);
        let h = ClassLoss::Hierarchical {
            classes: vec!["a".into(), "b".into()],
            tree: TaxonomyTree {
                level,
                ..Default::default()
            },
            config: HierarchicalLossConfig {
                level_weights: [1.0, 0.0, 0.0],
                ..Default::default()
            },
        };
        let got = crate::nn::scalar(&h.compute(&logits, &labels, true).unwrap()).unwrap();
        assert!((got - ce).abs() < 1e-9);
    }
}
