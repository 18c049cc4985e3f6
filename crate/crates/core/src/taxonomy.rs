//! Class schemas, the species/genus/family hierarchy and class weight vectors.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const OTHER: &str = "Other";

/// Taxonomic rank of a class. `Other` marks classes with no botanical rank (dead trees, the
/// catch-all bucket); they stand for themselves at every level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Level {
    Species,
    Genus,
    Family,
    Other,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::Species => "species",
            Level::Genus => "genus",
            Level::Family => "family",
            Level::Other => "other",
        }
    }

    fn rank(self) -> u8 {
        match self {
            Level::Species => 0,
            Level::Genus => 1,
            Level::Family => 2,
            Level::Other => 3,
        }
    }
}

/// Taxonomy over class codes of mixed rank.
#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TaxonomyTree {
    /// child -> parent, species to genus and genus to family
    pub parent: BTreeMap<String, String>,
    pub level: BTreeMap<String, Level>,
    /// labels dropped from the species term of the hierarchical loss
    #[cfg_attr(feature = "serde", serde(default))]
    pub species_exclusion: BTreeSet<String>,
    /// labels dropped from the genus term
    #[cfg_attr(feature = "serde", serde(default))]
    pub genus_exclusion: BTreeSet<String>,
}

impl TaxonomyTree {
    pub fn new(
        parent: BTreeMap<String, String>,
        level: BTreeMap<String, Level>,
        species_exclusion: BTreeSet<String>,
        genus_exclusion: BTreeSet<String>,
    ) -> Result<Self> {
        let t = Self {
            parent,
            level,
            species_exclusion,
            genus_exclusion,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        for (child, parent) in &self.parent {
            let (Some(&lc), Some(&lp)) = (self.level.get(child), self.level.get(parent)) else {
                return Err(Error::InvalidTaxonomy(alloc::format!(
                    "edge {child} -> {parent} references a name without a level"
                )));
            };
            let ok = matches!(
                (lc, lp),
                (Level::Species, Level::Genus) | (Level::Genus, Level::Family)
            );
            if !ok {
                return Err(Error::InvalidTaxonomy(alloc::format!(
                    "edge {child} ({}) -> {parent} ({}) does not go one rank up",
                    lc.as_str(),
                    lp.as_str()
                )));
            }
        }
        // ranks strictly increase along edges, so the graph is acyclic
        for (name, &lvl) in &self.level {
            match lvl {
                Level::Species | Level::Genus => {
                    self.lift(name, Level::Family)?;
                }
                _ => {}
            }
        }
        for name in self.species_exclusion.iter().chain(&self.genus_exclusion) {
            if !self.level.contains_key(name) {
                return Err(Error::InvalidTaxonomy(alloc::format!(
                    "exclusion set references unknown class {name}"
                )));
            }
        }
        Ok(())
    }

    pub fn level_of(&self, name: &str) -> Option<Level> {
        self.level.get(name).copied()
    }

    /// Ancestor of `name` at `target` rank. Rankless classes map to themselves.
    pub fn lift(&self, name: &str, target: Level) -> Result<String> {
        let cannot = || Error::CannotLift {
            label: name.to_string(),
            level: target.as_str(),
        };
        let mut cur = name;
        let mut lvl = self.level_of(name).ok_or_else(cannot)?;
        if lvl == Level::Other {
            return Ok(name.to_string());
        }
        if target == Level::Other || lvl.rank() > target.rank() {
            return Err(cannot());
        }
        while lvl != target {
            cur = self.parent.get(cur).ok_or_else(cannot)?;
            lvl = self.level_of(cur).ok_or_else(cannot)?;
        }
        Ok(cur.to_string())
    }

    pub fn family_of(&self, name: &str) -> Result<String> {
        self.lift(name, Level::Family)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Grouping {
    #[default]
    Species,
    Family,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassSchema {
    pub classes: Vec<String>,
    pub raw_to_class: BTreeMap<String, String>,
    pub other_class: String,
    pub min_count: u64,
}

impl ClassSchema {
    /// Schema that keeps each listed class as is.
    pub fn from_classes(classes: Vec<String>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for c in &classes {
            if !seen.insert(c.clone()) {
                return Err(Error::InvalidConfig(alloc::format!("duplicate class {c}")));
            }
        }
        let raw_to_class = classes.iter().map(|c| (c.clone(), c.clone())).collect();
        Ok(Self {
            classes,
            raw_to_class,
            other_class: OTHER.to_string(),
            min_count: 0,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn index_of(&self, class: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == class)
    }

    /// Class code for a raw label. Class codes map to themselves.
    pub fn map(&self, raw: &str) -> Option<&str> {
        if let Some(c) = self.raw_to_class.get(raw) {
            return Some(c);
        }
        self.classes.iter().find(|c| c.as_str() == raw).map(String::as_str)
    }

    pub fn class_id(&self, raw: &str) -> Option<u32> {
        self.map(raw).and_then(|c| self.index_of(c)).map(|i| i as u32)
    }

    pub fn has_other(&self) -> bool {
        self.classes.iter().any(|c| *c == self.other_class)
    }
}

/// Threshold raw label counts into a class schema.
///
/// Labels seen more than `min_count` times become their own class; the rest are pooled into
/// `Other`. With family grouping labels are lifted first. A lone label always stands alone.
/// Kept classes are ordered by name with `Other` last.
pub fn build_schema(
    counts: &BTreeMap<String, u64>,
    min_count: u64,
    grouping: Grouping,
    taxonomy: Option<&TaxonomyTree>,
) -> Result<ClassSchema> {
    if counts.is_empty() {
        return Err(Error::Empty("label counts"));
    }
    let mut lifted: BTreeMap<String, String> = BTreeMap::new();
    match grouping {
        Grouping::Species => {
            for raw in counts.keys() {
                lifted.insert(raw.clone(), raw.clone());
            }
        }
        Grouping::Family => {
            let mut unknown = Vec::new();
            for raw in counts.keys() {
                match taxonomy.map(|t| t.family_of(raw)) {
                    Some(Ok(f)) => {
                        lifted.insert(raw.clone(), f);
                    }
                    _ if raw == OTHER => {
                        lifted.insert(raw.clone(), raw.clone());
                    }
                    _ => unknown.push(raw.clone()),
                }
            }
            if !unknown.is_empty() {
                return Err(Error::UnknownFamily(unknown));
            }
        }
    }
    let mut grouped: BTreeMap<&str, u64> = BTreeMap::new();
    for (raw, n) in counts {
        *grouped.entry(lifted[raw].as_str()).or_default() += n;
    }
    let lone = grouped.len() == 1;
    let kept: BTreeSet<&str> = grouped
        .iter()
        .filter(|(name, &n)| lone || (n > min_count && **name != OTHER))
        .map(|(name, _)| *name)
        .collect();
    let mut classes: Vec<String> = kept.iter().map(|s| s.to_string()).collect();
    let mut raw_to_class = BTreeMap::new();
    let mut any_other = false;
    for (raw, group) in &lifted {
        let class = if kept.contains(group.as_str()) {
            group.clone()
        } else {
            any_other = true;
            OTHER.to_string()
        };
        raw_to_class.insert(raw.clone(), class);
    }
    if any_other {
        classes.retain(|c| c != OTHER);
        classes.push(OTHER.to_string());
    }
    Ok(ClassSchema {
        classes,
        raw_to_class,
        other_class: OTHER.to_string(),
        min_count,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    SumToOne,
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    pub weights: BTreeMap<String, f64>,
    pub normalization: Normalization,
}

impl ClassWeights {
    pub fn uniform<S: AsRef<str>>(classes: &[S]) -> Self {
        let w = 1.0 / classes.len().max(1) as f64;
        Self {
            weights: classes.iter().map(|c| (c.as_ref().to_string(), w)).collect(),
            normalization: Normalization::SumToOne,
        }
    }

    pub fn get(&self, class: &str) -> Option<f64> {
        self.weights.get(class).copied()
    }

    /// Weights ordered like `classes`.
    pub fn to_vec<S: AsRef<str>>(&self, classes: &[S]) -> Result<Vec<f64>> {
        classes
            .iter()
            .map(|c| {
                self.get(c.as_ref())
                    .ok_or_else(|| Error::MissingWeight(c.as_ref().to_string()))
            })
            .collect()
    }
}

fn normalized(raw: BTreeMap<String, f64>) -> ClassWeights {
    let total: f64 = raw.values().sum();
    ClassWeights {
        weights: raw.into_iter().map(|(k, v)| (k, v / total)).collect(),
        normalization: Normalization::SumToOne,
    }
}

/// Weights proportional to the reciprocal of each class's training count.
pub fn inverse_frequency_weights(train_counts: &BTreeMap<String, u64>) -> Result<ClassWeights> {
    if train_counts.is_empty() {
        return Err(Error::Empty("training counts"));
    }
    if let Some((c, _)) = train_counts.iter().find(|(_, &n)| n == 0) {
        return Err(Error::ClassAbsent(c.clone()));
    }
    Ok(normalized(
        train_counts
            .iter()
            .map(|(k, &n)| (k.clone(), 1.0 / n as f64))
            .collect(),
    ))
}

/// Share of each class among test instances.
pub fn test_proportion_weights(test_counts: &BTreeMap<String, u64>) -> Result<ClassWeights> {
    if test_counts.values().sum::<u64>() == 0 {
        return Err(Error::EmptyTestSet);
    }
    Ok(normalized(
        test_counts
            .iter()
            .map(|(k, &n)| (k.clone(), n as f64))
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn counts(items: &[(&str, u64)]) -> BTreeMap<String, u64> {
        items.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    pub(crate) fn tree() -> TaxonomyTree {
        let parent = [
            ("Acer rubrum", "Acer"),
            ("Acer saccharum", "Acer"),
            ("Betula papyrifera", "Betula"),
            ("Acer", "Sapindaceae"),
            ("Betula", "Betulaceae"),
        ]
        .iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect();
        let level = [
            ("Acer rubrum", Level::Species),
            ("Acer saccharum", Level::Species),
            ("Betula papyrifera", Level::Species),
            ("Acer", Level::Genus),
            ("Betula", Level::Genus),
            ("Sapindaceae", Level::Family),
            ("Betulaceae", Level::Family),
            ("Dead", Level::Other),
        ]
        .iter()
        .map(|(a, b)| (a.to_string(), *b))
        .collect();
        TaxonomyTree::new(
            parent,
            level,
            ["Acer".to_string()].into(),
            BTreeSet::new(),
        )
        .unwrap()
    }

    #[test]
    fn threshold_is_strict() {
        let s = build_schema(&counts(&[("A", 25), ("B", 19), ("C", 100)]), 20, Grouping::Species, None)
            .unwrap();
        assert_eq!(s.classes, vec!["A", "C", "Other"]);
        assert_eq!(s.map("B"), Some("Other"));
        let s = build_schema(&counts(&[("A", 25), ("B", 20)]), 20, Grouping::Species, None).unwrap();
        assert_eq!(s.map("B"), Some("Other"));
        let s = build_schema(&counts(&[("A", 3)]), 20, Grouping::Species, None).unwrap();
        assert_eq!(s.classes, vec!["A"]);
        assert!(!s.has_other());
    }

    #[test]
    fn mapping_is_idempotent() {
        let s = build_schema(&counts(&[("A", 25), ("B", 19), ("C", 100)]), 20, Grouping::Species, None)
            .unwrap();
        for raw in ["A", "B", "C"] {
            let c = s.map(raw).unwrap();
            assert_eq!(s.map(c), Some(c));
        }
    }

    #[test]
    fn family_grouping_lifts_then_thresholds() {
        let t = tree();
        let s = build_schema(
            &counts(&[("Acer rubrum", 15), ("Acer saccharum", 10), ("Betula papyrifera", 5)]),
            20,
            Grouping::Family,
            Some(&t),
        )
        .unwrap();
        assert_eq!(s.classes, vec!["Sapindaceae", "Other"]);
        let err = build_schema(&counts(&[("Quercus", 30)]), 20, Grouping::Family, Some(&t)).unwrap_err();
        assert_eq!(err, Error::UnknownFamily(vec!["Quercus".into()]));
    }

    #[test]
    fn lifting_is_path_consistent() {
        let t = tree();
        let g = t.lift("Acer rubrum", Level::Genus).unwrap();
        assert_eq!(t.family_of(&g).unwrap(), t.family_of("Acer rubrum").unwrap());
        assert_eq!(t.lift("Dead", Level::Species).unwrap(), "Dead");
        assert!(t.lift("Acer", Level::Species).is_err());
    }

    #[test]
    fn bad_edges_rejected() {
        let parent = [("x".to_string(), "y".to_string())].into();
        let level = [("x".to_string(), Level::Species), ("y".to_string(), Level::Family)].into();
        assert!(TaxonomyTree::new(parent, level, BTreeSet::new(), BTreeSet::new()).is_err());
    }

    #[test]
    fn weights() {
        let w = inverse_frequency_weights(&counts(&[("A", 10), ("B", 40)])).unwrap();
        assert!((w.get("A").unwrap() - 0.8).abs() < 1e-12);
        assert!((w.get("B").unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(
            inverse_frequency_weights(&counts(&[("A", 0)])).unwrap_err(),
            Error::ClassAbsent("A".into())
        );
        let p = test_proportion_weights(&counts(&[("A", 90), ("B", 10)])).unwrap();
        assert!((p.get("A").unwrap() - 0.9).abs() < 1e-12);
        assert_eq!(test_proportion_weights(&counts(&[("A", 1)])).unwrap().get("A"), Some(1.0));
        assert_eq!(
            test_proportion_weights(&counts(&[("A", 0)])).unwrap_err(),
            Error::EmptyTestSet
        );
    }
}
