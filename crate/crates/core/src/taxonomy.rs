//! Open-world split labels for ground-truth triplets.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{GroundTruthGraph, VocabularyProfile};

/// Novelty class of a triplet relative to the training vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SplitLabel {
    /// Objects, predicate and the full triplet were seen in training.
    #[serde(rename = "CS")]
    Cs,
    /// Seen objects and predicate in an unseen combination.
    #[serde(rename = "ZS")]
    Zs,
    /// Seen objects, novel predicate.
    #[serde(rename = "OVR")]
    Ovr,
    /// Both objects novel, predicate seen.
    #[serde(rename = "OVD")]
    Ovd,
    /// Both objects and the predicate novel.
    #[serde(rename = "OW")]
    Ow,
    /// Exactly one object novel.
    #[serde(rename = "MIXED")]
    Mixed,
}

impl SplitLabel {
    pub const ALL: [SplitLabel; 6] =
        [SplitLabel::Cs, SplitLabel::Zs, SplitLabel::Ovr, SplitLabel::Ovd, SplitLabel::Ow, SplitLabel::Mixed];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitLabel::Cs => "CS",
            SplitLabel::Zs => "ZS",
            SplitLabel::Ovr => "OVR",
            SplitLabel::Ovd => "OVD",
            SplitLabel::Ow => "OW",
            SplitLabel::Mixed => "MIXED",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        SplitLabel::ALL.into_iter().find(|l| l.as_str() == name)
    }
}

impl fmt::Display for SplitLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TaxonomyError {
    UnknownLabel(String),
}

impl fmt::Display for TaxonomyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaxonomyError::UnknownLabel(l) => write!(f, "label '{l}' is not in the vocabulary"),
        }
    }
}

impl core::error::Error for TaxonomyError {}

/// Classify a `(subject, object, relation)` label triple.
pub fn classify_triplet(
    subject: &str,
    object: &str,
    relation: &str,
    vocab: &VocabularyProfile,
) -> Result<SplitLabel, TaxonomyError> {
    for label in [subject, object] {
        if vocab.object_index(label).is_none() {
            return Err(TaxonomyError::UnknownLabel(String::from(label)));
        }
    }
    if vocab.relation_index(relation).is_none() {
        return Err(TaxonomyError::UnknownLabel(String::from(relation)));
    }
    let seen_s = vocab.is_train_object(subject);
    let seen_o = vocab.is_train_object(object);
    let seen_r = vocab.is_train_relation(relation);
    Ok(match (seen_s, seen_o, seen_r) {
        (true, true, true) if vocab.is_train_triplet(subject, object, relation) => SplitLabel::Cs,
        (true, true, true) => SplitLabel::Zs,
        (true, true, false) => SplitLabel::Ovr,
        (false, false, true) => SplitLabel::Ovd,
        (false, false, false) => SplitLabel::Ow,
        _ => SplitLabel::Mixed,
    })
}

/// Labels counted by the combined OVD+R split.
pub fn is_ovdr(label: SplitLabel) -> bool {
    matches!(label, SplitLabel::Ovd | SplitLabel::Ovr | SplitLabel::Ow)
}

/// A named evaluation split over GT triplets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SplitSelector {
    All,
    Label(SplitLabel),
    OvdR,
}

impl SplitSelector {
    /// Report order: all, CS, ZS, OVR, OVD, OVD+R, OW, MIXED.
    pub const REPORTED: [SplitSelector; 8] = [
        SplitSelector::All,
        SplitSelector::Label(SplitLabel::Cs),
        SplitSelector::Label(SplitLabel::Zs),
        SplitSelector::Label(SplitLabel::Ovr),
        SplitSelector::Label(SplitLabel::Ovd),
        SplitSelector::OvdR,
        SplitSelector::Label(SplitLabel::Ow),
        SplitSelector::Label(SplitLabel::Mixed),
    ];

    pub fn name(self) -> &'static str {
        match self {
            SplitSelector::All => "all",
            SplitSelector::Label(l) => l.as_str(),
            SplitSelector::OvdR => "OVD+R",
        }
    }

    pub fn accepts(self, label: SplitLabel) -> bool {
        match self {
            SplitSelector::All => true,
            SplitSelector::Label(l) => l == label,
            SplitSelector::OvdR => is_ovdr(label),
        }
    }
}

/// Split label of every GT triplet, keyed by `(image_id, relation index)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitIndex {
    labels: BTreeMap<(String, usize), SplitLabel>,
}

impl SplitIndex {
    pub fn insert(&mut self, image_id: &str, relation: usize, label: SplitLabel) {
        self.labels.insert((String::from(image_id), relation), label);
    }

    pub fn get(&self, image_id: &str, relation: usize) -> Option<SplitLabel> {
        self.labels.get(&(String::from(image_id), relation)).copied()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize, SplitLabel)> {
        self.labels.iter().map(|((img, k), l)| (img.as_str(), *k, *l))
    }

    /// Count per label.
    pub fn sizes(&self) -> BTreeMap<SplitLabel, usize> {
        let mut out = BTreeMap::new();
        for l in self.labels.values() {
            *out.entry(*l).or_insert(0) += 1;
        }
        out
    }

    /// `{label: ["image#relation", ...]}` with every label present.
    pub fn manifest(&self) -> BTreeMap<&'static str, Vec<String>> {
        let mut out: BTreeMap<&'static str, Vec<String>> =
            SplitLabel::ALL.iter().map(|l| (l.as_str(), Vec::new())).collect();
        for ((img, k), l) in &self.labels {
            out.get_mut(l.as_str()).expect("all labels seeded").push(triplet_key(img, *k));
        }
        out
    }

    /// Inverse of [`SplitIndex::manifest`].
    pub fn from_manifest<'a>(
        entries: impl IntoIterator<Item = (&'a str, &'a [String])>,
    ) -> Result<Self, TaxonomyError> {
        let mut index = SplitIndex::default();
        for (name, keys) in entries {
            let label = SplitLabel::parse(name).ok_or_else(|| TaxonomyError::UnknownLabel(String::from(name)))?;
            for key in keys {
                let (img, k) = key
                    .rsplit_once('#')
                    .and_then(|(img, k)| Some((img, k.parse::<usize>().ok()?)))
                    .ok_or_else(|| TaxonomyError::UnknownLabel(key.clone()))?;
                index.insert(img, k, label);
            }
        }
        Ok(index)
    }
}

/// `"{image_id}#{relation_index}"`.
pub fn triplet_key(image_id: &str, relation: usize) -> String {
    format!("{image_id}#{relation}")
}

/// Label every GT relation of every graph.
pub fn partition(graphs: &[GroundTruthGraph], vocab: &VocabularyProfile) -> Result<SplitIndex, TaxonomyError> {
    let mut index = SplitIndex::default();
    for g in graphs {
        for k in 0..g.relations.len() {
            let (s, o, r) = g.triplet_labels(k);
            index.insert(&g.image.id, k, classify_triplet(s, o, r, vocab)?);
        }
    }
    Ok(index)
}
