//! Triplet matching, Recall@K, mean Recall@K and pair-refinement P/R/F1.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{iou, Averaging, EvalConfig, GroundTruthGraph, ObjectInstance, Task, TripletPrediction};
use crate::taxonomy::{SplitIndex, SplitSelector};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MetricsError {
    /// No image in scope has a ground-truth relation.
    NoGroundTruth,
    InvalidKs,
    InvalidThreshold,
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::NoGroundTruth => f.write_str("no ground-truth relations to evaluate"),
            MetricsError::InvalidKs => f.write_str("K values must be positive and strictly increasing"),
            MetricsError::InvalidThreshold => f.write_str("IoU threshold must lie in [0, 1]"),
        }
    }
}

impl core::error::Error for MetricsError {}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchConfig {
    pub task: Task,
    /// SGDet only.
    pub iou_threshold: f64,
    pub ks: Vec<usize>,
    pub averaging: Averaging,
}

impl MatchConfig {
    pub fn new(task: Task, eval: &EvalConfig) -> Result<Self, MetricsError> {
        let cfg =
            MatchConfig { task, iou_threshold: eval.iou_threshold, ks: eval.ks.clone(), averaging: eval.averaging };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.ks.is_empty() || self.ks[0] == 0 || self.ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MetricsError::InvalidKs);
        }
        if !(0.0..=1.0).contains(&self.iou_threshold) {
            return Err(MetricsError::InvalidThreshold);
        }
        Ok(())
    }
}

/// Matching outcome for one image: for each GT relation, its predicate and
/// the 0-based rank of the prediction that claimed it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageMatches {
    pub image_id: String,
    pub predicates: Vec<String>,
    pub rank: Vec<Option<usize>>,
}

impl ImageMatches {
    pub fn gt_count(&self) -> usize {
        self.rank.len()
    }

    pub fn matched_within(&self, k: usize) -> usize {
        self.rank.iter().filter(|r| r.is_some_and(|r| r < k)).count()
    }

    /// Keep only the GT relations selected by `keep(relation_index)`.
    pub fn filtered(&self, mut keep: impl FnMut(usize) -> bool) -> ImageMatches {
        let mut out = ImageMatches { image_id: self.image_id.clone(), predicates: Vec::new(), rank: Vec::new() };
        for (k, (p, r)) in self.predicates.iter().zip(&self.rank).enumerate() {
            if keep(k) {
                out.predicates.push(p.clone());
                out.rank.push(*r);
            }
        }
        out
    }
}

fn instance_matches(pred: &ObjectInstance, gt: &GroundTruthGraph, gt_index: usize, cfg: &MatchConfig) -> bool {
    let target = &gt.objects[gt_index];
    if pred.label != target.label {
        return false;
    }
    match cfg.task {
        Task::Predcls => pred.origin == Some(gt_index),
        Task::Sgdet => iou(&pred.bbox, &target.bbox) >= cfg.iou_threshold,
    }
}

/// Walk predictions in the given (rank) order; each prediction claims the
/// lowest-indexed unmatched GT relation it matches.
pub fn match_triplets(preds: &[TripletPrediction], gt: &GroundTruthGraph, cfg: &MatchConfig) -> ImageMatches {
    let mut rank: Vec<Option<usize>> = alloc::vec![None; gt.relations.len()];
    for (r, p) in preds.iter().enumerate() {
        let hit = gt.relations.iter().enumerate().position(|(k, rel)| {
            rank[k].is_none()
                && rel.predicate == p.predicate
                && instance_matches(&p.subject, gt, rel.subject, cfg)
                && instance_matches(&p.object, gt, rel.object, cfg)
        });
        if let Some(k) = hit {
            rank[k] = Some(r);
        }
    }
    ImageMatches {
        image_id: gt.image.id.clone(),
        predicates: gt.relations.iter().map(|r| r.predicate.clone()).collect(),
        rank,
    }
}

/// R@K: per-image recall averaged over images with GT (macro), or pooled
/// matched/total counts (micro).
pub fn recall_at_k(
    images: &[ImageMatches],
    ks: &[usize],
    averaging: Averaging,
) -> Result<BTreeMap<usize, f64>, MetricsError> {
    let scored: Vec<&ImageMatches> = images.iter().filter(|m| m.gt_count() > 0).collect();
    if scored.is_empty() {
        return Err(MetricsError::NoGroundTruth);
    }
    let mut out = BTreeMap::new();
    for &k in ks {
        let value = match averaging {
            Averaging::Macro => {
                let sum: f64 = scored.iter().map(|m| m.matched_within(k) as f64 / m.gt_count() as f64).sum();
                sum / scored.len() as f64
            }
            Averaging::Micro => {
                let hit: usize = scored.iter().map(|m| m.matched_within(k)).sum();
                let total: usize = scored.iter().map(|m| m.gt_count()).sum();
                hit as f64 / total as f64
            }
        };
        out.insert(k, value);
    }
    Ok(out)
}

/// Per-predicate recall pooled over the dataset.
pub fn per_predicate_recall(images: &[ImageMatches], ks: &[usize]) -> BTreeMap<String, BTreeMap<usize, f64>> {
    let mut totals: BTreeMap<&str, (usize, Vec<usize>)> = BTreeMap::new();
    for m in images {
        for (p, r) in m.predicates.iter().zip(&m.rank) {
            let entry = totals.entry(p.as_str()).or_insert_with(|| (0, alloc::vec![0; ks.len()]));
            entry.0 += 1;
            for (slot, &k) in entry.1.iter_mut().zip(ks) {
                if r.is_some_and(|r| r < k) {
                    *slot += 1;
                }
            }
        }
    }
    totals
        .into_iter()
        .map(|(p, (n, hits))| {
            let per_k = ks.iter().zip(&hits).map(|(&k, &h)| (k, h as f64 / n as f64)).collect();
            (String::from(p), per_k)
        })
        .collect()
}

/// mR@K: unweighted mean of per-predicate recall over predicates with GT.
pub fn mean_recall_at_k(images: &[ImageMatches], ks: &[usize]) -> Result<BTreeMap<usize, f64>, MetricsError> {
    let per = per_predicate_recall(images, ks);
    if per.is_empty() {
        return Err(MetricsError::NoGroundTruth);
    }
    Ok(ks.iter().map(|k| (*k, per.values().map(|m| m[k]).sum::<f64>() / per.len() as f64)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub per_k: BTreeMap<usize, f64>,
    pub per_predicate_per_k: BTreeMap<String, BTreeMap<usize, f64>>,
    pub mean_per_k: BTreeMap<usize, f64>,
}

pub fn recall_report(images: &[ImageMatches], cfg: &MatchConfig) -> Result<RecallReport, MetricsError> {
    Ok(RecallReport {
        per_k: recall_at_k(images, &cfg.ks, cfg.averaging)?,
        per_predicate_per_k: per_predicate_recall(images, &cfg.ks),
        mean_per_k: mean_recall_at_k(images, &cfg.ks)?,
    })
}

/// Report restricted to GT triplets of one split. Matching has already run
/// against the full GT, so predictions are not filtered. `None` when the
/// split holds no GT triplet.
pub fn split_filtered_report(
    images: &[ImageMatches],
    splits: &SplitIndex,
    selector: SplitSelector,
    cfg: &MatchConfig,
) -> Option<RecallReport> {
    let filtered: Vec<ImageMatches> = images
        .iter()
        .map(|m| {
            m.filtered(|k| {
                selector == SplitSelector::All || splits.get(&m.image_id, k).is_some_and(|l| selector.accepts(l))
            })
        })
        .collect();
    recall_report(&filtered, cfg).ok()
}

/// Pair-level counts, pooled across images before computing P/R/F1.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCounts {
    pub selected: usize,
    /// Selected pairs that correspond to some GT pair.
    pub selected_hits: usize,
    pub gt: usize,
    /// GT pairs covered by some selected pair.
    pub gt_hits: usize,
}

impl PairCounts {
    pub fn add(&mut self, other: PairCounts) {
        self.selected += other.selected;
        self.selected_hits += other.selected_hits;
        self.gt += other.gt;
        self.gt_hits += other.gt_hits;
    }

    pub fn prf(&self) -> Prf {
        let precision = ratio(self.selected_hits, self.selected);
        let recall = ratio(self.gt_hits, self.gt);
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Prf { precision, recall, f1 }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    #[serde(rename = "P")]
    pub precision: f64,
    #[serde(rename = "R")]
    pub recall: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
}

fn unordered(pairs: &[(usize, usize)]) -> BTreeSet<(usize, usize)> {
    pairs.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect()
}

/// Set-level P/R/F1 between selected and GT unordered pairs.
pub fn pair_refinement_prf(selected: &[(usize, usize)], gt_pairs: &[(usize, usize)]) -> Prf {
    let sel = unordered(selected);
    let gt = unordered(gt_pairs);
    let hits = sel.intersection(&gt).count();
    PairCounts { selected: sel.len(), selected_hits: hits, gt: gt.len(), gt_hits: hits }.prf()
}

/// Pair counts for one image. Instance pair `(i, j)` corresponds to GT pair
/// `(a, b)` when both sides match in either orientation: by annotation
/// identity for PredCls, by label and IoU for SGDet.
pub fn pair_counts(
    selected: &[(usize, usize)],
    instances: &[ObjectInstance],
    gt: &GroundTruthGraph,
    cfg: &MatchConfig,
) -> PairCounts {
    let sel = unordered(selected);
    let gt_pairs = unordered(&gt.relations.iter().map(|r| (r.subject, r.object)).collect::<Vec<_>>());
    let corresponds = |(i, j): (usize, usize), (a, b): (usize, usize)| {
        let m = |x: usize, y: usize| instance_matches(&instances[x], gt, y, cfg);
        (m(i, a) && m(j, b)) || (m(i, b) && m(j, a))
    };
    PairCounts {
        selected: sel.len(),
        selected_hits: sel.iter().filter(|&&s| gt_pairs.iter().any(|&g| corresponds(s, g))).count(),
        gt: gt_pairs.len(),
        gt_hits: gt_pairs.iter().filter(|&&g| sel.iter().any(|&s| corresponds(s, g))).count(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BoundingBox, Direction, GtRelation, ImageRef};
    use crate::taxonomy::SplitLabel;
    use alloc::vec;

    fn cfg(task: Task) -> MatchConfig {
        MatchConfig { task, iou_threshold: 0.5, ks: vec![1, 2, 20], averaging: Averaging::Macro }
    }

    fn graph(id: &str, rels: &[(usize, usize, &str)]) -> GroundTruthGraph {
        let b = |x: f64| BoundingBox::new(x, 0.0, x + 10.0, 10.0).unwrap();
        GroundTruthGraph::new(
            ImageRef::new(id, "x.jpg", 100, 100).unwrap(),
            vec![("person".into(), b(0.0)), ("chair".into(), b(20.0)), ("table".into(), b(40.0))],
            rels.iter().map(|&(s, o, p)| GtRelation { subject: s, object: o, predicate: p.into() }).collect(),
        )
        .unwrap()
    }

    fn pred(g: &GroundTruthGraph, s: usize, o: usize, p: &str, shift: f64) -> TripletPrediction {
        let inst = |k: usize| {
            let b = g.objects[k].bbox.to_array();
            ObjectInstance {
                index: k,
                label: g.objects[k].label.clone(),
                bbox: BoundingBox::new(b[0] + shift, b[1], b[2] + shift, b[3]).unwrap(),
                det_score: 1.0,
                origin: Some(k),
            }
        };
        TripletPrediction {
            subject: inst(s),
            object: inst(o),
            predicate: p.into(),
            score: 1.0,
            pair_id: 0,
            direction: Direction::Forward,
            raw_sentence: String::new(),
        }
    }

    #[test]
    fn perfect_predictor() {
        let g = graph("a", &[(0, 1, "on"), (2, 1, "near")]);
        let preds = vec![pred(&g, 2, 1, "near", 0.0), pred(&g, 0, 1, "on", 0.0)];
        let m = match_triplets(&preds, &g, &cfg(Task::Predcls));
        assert_eq!(m.rank, [Some(1), Some(0)]);
        let r = recall_at_k(&[m], &[1, 2], Averaging::Macro).unwrap();
        assert_eq!(r[&1], 0.5);
        assert_eq!(r[&2], 1.0);
    }

    #[test]
    fn sgdet_iou_boundary() {
        let g = graph("a", &[(0, 1, "on")]);
        // shift 10-wide boxes by 4.2 px: IoU = 5.8 / 14.2 < 0.5
        let m = match_triplets(&[pred(&g, 0, 1, "on", 4.2)], &g, &cfg(Task::Sgdet));
        assert_eq!(m.rank, [None]);
        let m = match_triplets(&[pred(&g, 0, 1, "on", 2.0)], &g, &cfg(Task::Sgdet));
        assert_eq!(m.rank, [Some(0)]);
    }

    #[test]
    fn duplicates_do_not_add_recall() {
        let g = graph("a", &[(0, 1, "on"), (0, 2, "on")]);
        let p = pred(&g, 0, 1, "on", 0.0);
        let m = match_triplets(&[p.clone(), p.clone(), p], &g, &cfg(Task::Predcls));
        assert_eq!(m.rank, [Some(0), None]);
    }

    #[test]
    fn macro_micro_and_errors() {
        let a = ImageMatches { image_id: "a".into(), predicates: vec!["on".into()], rank: vec![Some(0)] };
        let b = ImageMatches {
            image_id: "b".into(),
            predicates: vec!["on".into(), "on".into(), "near".into()],
            rank: vec![None, None, None],
        };
        let empty = ImageMatches { image_id: "c".into(), predicates: vec![], rank: vec![] };
        let images = [a, b, empty.clone()];
        assert_eq!(recall_at_k(&images, &[5], Averaging::Macro).unwrap()[&5], 0.5);
        assert_eq!(recall_at_k(&images, &[5], Averaging::Micro).unwrap()[&5], 0.25);
        // on: 1 of 3, near: 0 of 1
        let mr = mean_recall_at_k(&images, &[5]).unwrap()[&5];
        assert!((mr - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(
            recall_at_k(core::slice::from_ref(&empty), &[5], Averaging::Macro),
            Err(MetricsError::NoGroundTruth)
        );
        assert_eq!(mean_recall_at_k(&[empty], &[5]), Err(MetricsError::NoGroundTruth));
    }

    #[test]
    fn split_filtering() {
        let g = graph("a", &[(0, 1, "on"), (2, 1, "near")]);
        let m = match_triplets(&[pred(&g, 0, 1, "on", 0.0)], &g, &cfg(Task::Predcls));
        let mut idx = SplitIndex::default();
        idx.insert("a", 0, SplitLabel::Cs);
        idx.insert("a", 1, SplitLabel::Ovr);
        let c = cfg(Task::Predcls);
        let cs =
            split_filtered_report(core::slice::from_ref(&m), &idx, SplitSelector::Label(SplitLabel::Cs), &c).unwrap();
        assert_eq!(cs.per_k[&20], 1.0);
        let ovdr = split_filtered_report(core::slice::from_ref(&m), &idx, SplitSelector::OvdR, &c).unwrap();
        assert_eq!(ovdr.per_k[&20], 0.0);
        let all = split_filtered_report(core::slice::from_ref(&m), &idx, SplitSelector::All, &c).unwrap();
        assert_eq!(all.per_k[&20], 0.5);
        assert!(split_filtered_report(&[m], &idx, SplitSelector::Label(SplitLabel::Ow), &c).is_none());
    }

    #[test]
    fn prf_worked_example() {
        let selected: Vec<(usize, usize)> = (0..25).map(|k| (k, 100 + k)).collect();
        let mut gt: Vec<(usize, usize)> = (0..5).map(|k| (100 + k, k)).collect();
        gt.extend((0..5).map(|k| (200 + k, 300 + k)));
        let prf = pair_refinement_prf(&selected, &gt);
        assert!((prf.precision - 0.2).abs() < 1e-12);
        assert!((prf.recall - 0.5).abs() < 1e-12);
        assert!((prf.f1 - 0.2857).abs() < 1e-4);
        assert_eq!(pair_refinement_prf(&[], &gt), Prf { precision: 0.0, recall: 0.0, f1: 0.0 });
        assert_eq!(pair_refinement_prf(&gt, &gt), Prf { precision: 1.0, recall: 1.0, f1: 1.0 });
    }

    #[test]
    fn pair_counts_by_identity_and_iou() {
        let g = graph("a", &[(0, 1, "on"), (1, 0, "under"), (2, 1, "near")]);
        let insts: Vec<ObjectInstance> = (0..3).map(|k| pred(&g, k, k, "x", 0.0).subject).collect();
        let c = pair_counts(&[(1, 0), (0, 2)], &insts, &g, &cfg(Task::Predcls));
        assert_eq!(c, PairCounts { selected: 2, selected_hits: 1, gt: 2, gt_hits: 1 });
        let c = pair_counts(&[(1, 0), (0, 2)], &insts, &g, &cfg(Task::Sgdet));
        assert_eq!(c, PairCounts { selected: 2, selected_hits: 1, gt: 2, gt_hits: 1 });
        assert_eq!(MatchConfig { ks: vec![20, 20], ..cfg(Task::Sgdet) }.validate(), Err(MetricsError::InvalidKs));
    }
}
