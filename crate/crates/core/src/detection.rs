//! Assembly of per-image object instance lists.

use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;

use crate::model::{clamp_box, BoundingBox, GroundTruthGraph, ImageRef, ObjectInstance, VocabularyProfile};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DetectionError {
    /// No category produced a single usable box.
    AllEntitiesAbsent,
    /// A detector label contains a `.` separator or is empty.
    InvalidLabel(String),
}

impl fmt::Display for DetectionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DetectionError::AllEntitiesAbsent => f.write_str("no mapped entity was found in the image"),
            DetectionError::InvalidLabel(l) => write!(f, "detector prompt must be one object name, got '{l}'"),
        }
    }
}

impl core::error::Error for DetectionError {}

/// Detector output for one label, before clamping and filtering.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDetection {
    pub bbox: [f64; 4],
    pub score: f64,
}

/// Object instances of one image, indexed `0..N` in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet {
    pub image: ImageRef,
    pub instances: Vec<ObjectInstance>,
}

impl DetectionSet {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// A detector prompt must name exactly one object.
pub fn check_detector_label(label: &str) -> Result<(), DetectionError> {
    if label.trim().is_empty() || label.contains('.') {
        return Err(DetectionError::InvalidLabel(String::from(label)));
    }
    Ok(())
}

/// Remove repeated categories, keeping first occurrences.
pub fn dedup_categories(categories: &[String]) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(categories.len());
    for c in categories {
        if !out.contains(c) {
            out.push(c.clone());
        }
    }
    out
}

/// Canonical instance order: vocabulary index, descending score, then
/// reading order of box centers (top to bottom, left to right).
fn canonical_order(vocab: &VocabularyProfile, a: &ObjectInstance, b: &ObjectInstance) -> Ordering {
    let va = vocab.object_index(&a.label).unwrap_or(usize::MAX);
    let vb = vocab.object_index(&b.label).unwrap_or(usize::MAX);
    let (ax, ay) = a.bbox.center();
    let (bx, by) = b.bbox.center();
    va.cmp(&vb)
        .then_with(|| a.label.cmp(&b.label))
        .then_with(|| b.det_score.total_cmp(&a.det_score))
        .then_with(|| ay.total_cmp(&by))
        .then_with(|| ax.total_cmp(&bx))
        .then_with(|| {
            let (pa, pb) = (a.bbox.to_array(), b.bbox.to_array());
            pa.iter().zip(&pb).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
        })
        .then_with(|| a.origin.cmp(&b.origin))
}

/// Build a detection set from per-category detector results.
///
/// Boxes are clamped to the image (degenerate ones dropped), scores below
/// `box_threshold` are discarded, each category keeps at most `cap`
/// highest-scoring boxes and categories without boxes vanish.
pub fn assemble_detections(
    image: &ImageRef,
    per_category: &[(String, Vec<RawDetection>)],
    vocab: &VocabularyProfile,
    box_threshold: f64,
    cap: usize,
) -> Result<DetectionSet, DetectionError> {
    let mut instances = Vec::new();
    for (label, detections) in per_category {
        let mut kept: Vec<ObjectInstance> = detections
            .iter()
            .filter(|d| d.score >= box_threshold && d.score.is_finite())
            .filter_map(|d| {
                clamp_box(d.bbox, image).ok().map(|bbox| ObjectInstance {
                    index: 0,
                    label: label.clone(),
                    bbox,
                    det_score: d.score.clamp(0.0, 1.0),
                    origin: None,
                })
            })
            .collect();
        kept.sort_by(|a, b| canonical_order(vocab, a, b));
        kept.truncate(cap);
        instances.extend(kept);
    }
    if instances.is_empty() {
        return Err(DetectionError::AllEntitiesAbsent);
    }
    Ok(finish(image.clone(), instances, vocab))
}

/// Annotated objects as a detection set with unit scores (PredCls).
pub fn ground_truth_set(gt: &GroundTruthGraph, vocab: &VocabularyProfile) -> Result<DetectionSet, DetectionError> {
    if gt.objects.is_empty() {
        return Err(DetectionError::AllEntitiesAbsent);
    }
    let instances = gt
        .objects
        .iter()
        .enumerate()
        .map(|(k, o)| ObjectInstance {
            index: 0,
            label: o.label.clone(),
            bbox: o.bbox,
            det_score: 1.0,
            origin: Some(k),
        })
        .collect();
    Ok(finish(gt.image.clone(), instances, vocab))
}

fn finish(image: ImageRef, mut instances: Vec<ObjectInstance>, vocab: &VocabularyProfile) -> DetectionSet {
    instances.sort_by(|a, b| canonical_order(vocab, a, b));
    for (i, inst) in instances.iter_mut().enumerate() {
        inst.index = i;
    }
    DetectionSet { image, instances }
}

/// Rebuild a detection set from stored `(label, box, score, origin)` rows
/// that are already in canonical order.
pub fn from_stored(
    image: &ImageRef,
    rows: impl IntoIterator<Item = (String, BoundingBox, f64, Option<usize>)>,
) -> DetectionSet {
    let instances = rows
        .into_iter()
        .enumerate()
        .map(|(index, (label, bbox, det_score, origin))| ObjectInstance { index, label, bbox, det_score, origin })
        .collect();
    DetectionSet { image: image.clone(), instances }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GtRelation;
    use alloc::string::ToString;
    use alloc::vec;

    fn vocab() -> VocabularyProfile {
        let objects = ["windshield", "vehicle", "light", "building", "car", "street", "cat", "bag", "person"];
        VocabularyProfile::new(&objects, &["on"], &[], &[], &[]).unwrap()
    }

    fn image() -> ImageRef {
        ImageRef::new("fig4", "fig4.jpg", 640, 480).unwrap()
    }

    fn det(b: [f64; 4], score: f64) -> RawDetection {
        RawDetection { bbox: b, score }
    }

    #[test]
    fn absent_categories_are_dropped() {
        let found = ["windshield", "vehicle", "car", "cat"];
        let per: Vec<(String, Vec<RawDetection>)> =
            ["windshield", "vehicle", "light", "building", "car", "street", "cat", "bag"]
                .iter()
                .enumerate()
                .map(|(k, l)| {
                    let boxes = if found.contains(l) {
                        vec![det([10.0 * k as f64, 10.0, 10.0 * k as f64 + 50.0, 90.0], 0.6)]
                    } else {
                        vec![]
                    };
                    (l.to_string(), boxes)
                })
                .collect();
        let set = assemble_detections(&image(), &per, &vocab(), 0.35, 10).unwrap();
        let labels: Vec<_> = set.instances.iter().map(|i| i.label.as_str()).collect();
        assert_eq!(labels, ["windshield", "vehicle", "car", "cat"]);
        assert!(set.instances.iter().enumerate().all(|(i, o)| o.index == i));
    }

    #[test]
    fn all_absent_is_an_error() {
        let per = vec![("cat".to_string(), vec![]), ("bag".to_string(), vec![det([0.0, 0.0, 5.0, 5.0], 0.2)])];
        assert_eq!(assemble_detections(&image(), &per, &vocab(), 0.35, 10), Err(DetectionError::AllEntitiesAbsent));
    }

    #[test]
    fn ordering_threshold_clamp_and_cap() {
        let per = vec![
            (
                "person".to_string(),
                vec![
                    det([0.0, 100.0, 10.0, 110.0], 0.5),
                    det([0.0, 0.0, 10.0, 10.0], 0.5),
                    det([-20.0, 0.0, 700.0, 20.0], 0.9),
                    det([700.0, 0.0, 800.0, 10.0], 0.9), // outside the image
                    det([0.0, 0.0, 1.0, 1.0], 0.3),      // below threshold
                ],
            ),
            ("cat".to_string(), vec![det([1.0, 1.0, 2.0, 2.0], 0.4)]),
        ];
        let set = assemble_detections(&image(), &per, &vocab(), 0.35, 2).unwrap();
        let summary: Vec<_> =
            set.instances.iter().map(|i| (i.label.as_str(), i.det_score, i.bbox.to_array())).collect();
        assert_eq!(
            summary,
            vec![
                ("cat", 0.4, [1.0, 1.0, 2.0, 2.0]),
                ("person", 0.9, [0.0, 0.0, 640.0, 20.0]),
                ("person", 0.5, [0.0, 0.0, 10.0, 10.0]),
            ]
        );
    }

    #[test]
    fn ground_truth_passthrough_keeps_duplicates() {
        let b = BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let gt = GroundTruthGraph::new(
            image(),
            vec![("person".into(), b), ("person".into(), b), ("cat".into(), b)],
            vec![GtRelation { subject: 0, object: 2, predicate: "on".into() }],
        )
        .unwrap();
        let set = ground_truth_set(&gt, &vocab()).unwrap();
        assert_eq!(set.len(), 3);
        assert!(set.instances.iter().all(|i| i.det_score == 1.0));
        let origins: Vec<_> = set.instances.iter().map(|i| i.origin).collect();
        assert_eq!(origins, [Some(2), Some(0), Some(1)]);

        let empty = GroundTruthGraph::new(image(), vec![], vec![]).unwrap();
        assert_eq!(ground_truth_set(&empty, &vocab()), Err(DetectionError::AllEntitiesAbsent));
    }

    #[test]
    fn detector_labels_must_be_single_names() {
        assert!(check_detector_label("tennis racket").is_ok());
        assert!(check_detector_label("person.cat.dog").is_err());
        assert!(check_detector_label(" ").is_err());
        assert_eq!(dedup_categories(&["a".into(), "b".into(), "a".into()]), ["a", "b"]);
    }
}
