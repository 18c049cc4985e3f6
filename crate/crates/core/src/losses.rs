//! Reference classification losses in `f64`.
//!
//! Logits are row-major `n x num_classes`. The training crate has tensor versions of the same
//! losses; these are the slow, obviously-correct counterparts used for checking them.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::taxonomy::{ClassWeights, Level, TaxonomyTree};

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + libm::log(xs.map(|x| libm::exp(x - m)).sum::<f64>())
}

fn check(logits: &[f64], labels: &[usize], k: usize) -> Result<()> {
    if k == 0 || logits.len() != labels.len() * k {
        return Err(Error::ShapeMismatch(alloc::format!(
            "{} logits for {} labels and {k} classes",
            logits.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            num_classes: k,
        });
    }
    Ok(())
}

/// Negative log-likelihood of each instance's label.
pub fn per_instance_nll(logits: &[f64], labels: &[usize], k: usize) -> Result<Vec<f64>> {
    check(logits, labels, k)?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let row = &logits[i * k..(i + 1) * k];
            log_sum_exp(row.iter().copied()) - row[y]
        })
        .collect())
}

/// Mean negative log-likelihood; 0 for an empty batch.
pub fn cross_entropy(logits: &[f64], labels: &[usize], k: usize) -> Result<f64> {
    let nll = per_instance_nll(logits, labels, k)?;
    if nll.is_empty() {
        return Ok(0.0);
    }
    Ok(nll.iter().sum::<f64>() / nll.len() as f64)
}

/// Cross-entropy where each instance counts with the weight of its true class, reduced by the
/// weighted mean. `class_names[i]` names class index `i`.
pub fn weighted_cross_entropy<S: AsRef<str>>(
    logits: &[f64],
    labels: &[usize],
    class_names: &[S],
    weights: &ClassWeights,
) -> Result<f64> {
    let w = weights.to_vec(class_names)?;
    let nll = per_instance_nll(logits, labels, class_names.len())?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (&y, l) in labels.iter().zip(&nll) {
        num += w[y] * l;
        den += w[y];
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct HierarchicalLossConfig {
    /// species, genus and family term weights
    pub level_weights: [f64; 3],
    pub species_exclusion: BTreeSet<String>,
    pub genus_exclusion: BTreeSet<String>,
}

impl Default for HierarchicalLossConfig {
    fn default() -> Self {
        Self {
            level_weights: [1.0 / 3.0; 3],
            species_exclusion: BTreeSet::new(),
            genus_exclusion: BTreeSet::new(),
        }
    }
}

impl HierarchicalLossConfig {
    pub fn from_taxonomy(tree: &TaxonomyTree, level_weights: [f64; 3]) -> Self {
        Self {
            level_weights,
            species_exclusion: tree.species_exclusion.clone(),
            genus_exclusion: tree.genus_exclusion.clone(),
        }
    }

    pub fn validate<S: AsRef<str>>(&self, classes: &[S]) -> Result<()> {
        if self.level_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidConfig("level weights must be nonnegative".into()));
        }
        for c in self.species_exclusion.iter().chain(&self.genus_exclusion) {
            if !classes.iter().any(|k| k.as_ref() == c) {
                return Err(Error::InvalidConfig(alloc::format!(
                    "excluded label {c} is not a class"
                )));
            }
        }
        Ok(())
    }
}

/// Grouping of classes into buckets at one taxonomic level.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelBuckets {
    /// bucket index of every class
    pub class_bucket: Vec<usize>,
    pub bucket_names: Vec<String>,
    /// target bucket per instance, `None` when the instance is excluded at this level
    pub targets: Vec<Option<usize>>,
}

impl LevelBuckets {
    pub fn num_buckets(&self) -> usize {
        self.bucket_names.len()
    }

    pub fn members(&self, bucket: usize) -> impl Iterator<Item = usize> + Clone + '_ {
        self.class_bucket
            .iter()
            .enumerate()
            .filter(move |(_, &b)| b == bucket)
            .map(|(c, _)| c)
    }
}

/// The three levels of the hierarchical loss resolved for one batch of labels.
#[derive(Clone, Debug, PartialEq)]
pub struct HierarchyPlan {
    pub species: LevelBuckets,
    pub genus: LevelBuckets,
    pub family: LevelBuckets,
}

fn level_buckets<S: AsRef<str>>(
    classes: &[S],
    labels: &[usize],
    tree: &TaxonomyTree,
    level: Level,
    excluded: &BTreeSet<String>,
) -> Result<LevelBuckets> {
    let mut names: Vec<String> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    let mut class_bucket = Vec::with_capacity(classes.len());
    for c in classes {
        let c = c.as_ref();
        let name = match level {
            Level::Species => String::from(c),
            _ => match tree.lift(c, level) {
                Ok(name) => Some(name),
                // coarser classes cannot be lifted down; they stay singletons
                Err(_) if tree.level_of(c).is_some() => None,
                Err(e) => return Err(e),
            }
            .unwrap_or_else(|| String::from(c)),
        };
        let id = *index.entry(name.clone()).or_insert_with(|| {
            names.push(name.clone());
            names.len() - 1
        });
        class_bucket.push(id);
    }
    let mut targets = Vec::with_capacity(labels.len());
    for &y in labels {
        let label = classes[y].as_ref();
        if excluded.contains(label) {
            targets.push(None);
            continue;
        }
        let bucket = match level {
            Level::Species => class_bucket[y],
            _ => {
                let name = tree.lift(label, level)?;
                index[&name]
            }
        };
        targets.push(Some(bucket));
    }
    Ok(LevelBuckets {
        class_bucket,
        bucket_names: names,
        targets,
    })
}

impl HierarchyPlan {
    pub fn new<S: AsRef<str>>(
        classes: &[S],
        labels: &[usize],
        tree: &TaxonomyTree,
        cfg: &HierarchicalLossConfig,
    ) -> Result<Self> {
        cfg.validate(classes)?;
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes.len()) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                num_classes: classes.len(),
            });
        }
        let none = BTreeSet::new();
        Ok(Self {
            species: level_buckets(classes, labels, tree, Level::Species, &cfg.species_exclusion)?,
            genus: level_buckets(classes, labels, tree, Level::Genus, &cfg.genus_exclusion)?,
            family: level_buckets(classes, labels, tree, Level::Family, &none)?,
        })
    }
}

/// Mean negative log of the bucket probability of each non-excluded instance; 0 when no
/// instance takes part.
pub fn bucket_nll(logits: &[f64], k: usize, buckets: &LevelBuckets) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, t) in buckets.targets.iter().enumerate() {
        let Some(b) = *t else { continue };
        let row = &logits[i * k..(i + 1) * k];
        let all = log_sum_exp(row.iter().copied());
        let part = log_sum_exp(buckets.members(b).map(|c| row[c]));
        sum += all - part;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Bucket probabilities of one instance at one level.
pub fn marginalize(row: &[f64], buckets: &LevelBuckets) -> Vec<f64> {
    let all = log_sum_exp(row.iter().copied());
    let mut out = alloc::vec![0.0; buckets.num_buckets()];
    for (c, &b) in buckets.class_bucket.iter().enumerate() {
        out[b] += libm::exp(row[c] - all);
    }
    out
}

/// Weighted sum of species, genus and family cross-entropies. Genus and family terms use
/// class probabilities summed within each taxon.
pub fn hierarchical_loss<S: AsRef<str>>(
    logits: &[f64],
    labels: &[usize],
    classes: &[S],
    tree: &TaxonomyTree,
    cfg: &HierarchicalLossConfig,
) -> Result<f64> {
    let k = classes.len();
    check(logits, labels, k)?;
    let plan = HierarchyPlan::new(classes, labels, tree, cfg)?;
    let [ws, wg, wf] = cfg.level_weights;
    let mut total = 0.0;
    for (w, b) in [(ws, &plan.species), (wg, &plan.genus), (wf, &plan.family)] {
        if w != 0.0 {
            total += w * bucket_nll(logits, k, b);
        }
    }
    Ok(total)
}
