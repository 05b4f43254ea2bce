//! Domain types shared by every pipeline stage.
//!
//! Boxes are kept in absolute-pixel corner form `(x1, y1, x2, y2)`. Prompt
//! renderers rescale them on the way out; nothing else ever sees another
//! representation.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

/// Errors raised while constructing or validating domain values.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    /// The box has zero (or negative) area after clamping, or a non-finite coordinate.
    DegenerateBox([f64; 4]),
    InvalidImage(String),
    Vocabulary(String),
    Graph(String),
    Config(String),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::DegenerateBox(b) => {
                write!(f, "degenerate box [{}, {}, {}, {}]", b[0], b[1], b[2], b[3])
            }
            ModelError::InvalidImage(m) => write!(f, "invalid image: {m}"),
            ModelError::Vocabulary(m) => write!(f, "invalid vocabulary: {m}"),
            ModelError::Graph(m) => write!(f, "invalid ground-truth graph: {m}"),
            ModelError::Config(m) => write!(f, "invalid configuration: {m}"),
        }
    }
}

impl core::error::Error for ModelError {}

/// Lowercase, trim, strip punctuation and collapse internal whitespace.
pub fn normalize_label(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut pending_space = false;
    for c in raw.chars() {
        if c.is_whitespace() {
            pending_space = !out.is_empty();
        } else if c.is_alphanumeric() {
            if pending_space {
                out.push(' ');
                pending_space = false;
            }
            out.extend(c.to_lowercase());
        }
    }
    out
}

/// An image referenced by a manifest. Pixel data never enters this crate.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub id: String,
    pub path: String,
    pub width: u32,
    pub height: u32,
}

impl ImageRef {
    pub fn new(id: impl Into<String>, path: impl Into<String>, width: u32, height: u32) -> Result<Self, ModelError> {
        let image = ImageRef { id: id.into(), path: path.into(), width, height };
        image.validate()?;
        Ok(image)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.width == 0 || self.height == 0 {
            return Err(ModelError::InvalidImage(alloc::format!(
                "{}: dimensions must be positive, got {}x{}",
                self.id,
                self.width,
                self.height
            )));
        }
        Ok(())
    }

    /// Length of the image diagonal in pixels.
    pub fn diagonal(&self) -> f64 {
        let w = f64::from(self.width);
        let h = f64::from(self.height);
        libm::sqrt(w * w + h * h)
    }
}

/// Axis-aligned box in absolute pixel coordinates with positive area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, ModelError> {
        let finite = x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite();
        if !finite || x1 >= x2 || y1 >= y2 {
            return Err(ModelError::DegenerateBox([x1, y1, x2, y2]));
        }
        Ok(BoundingBox { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// True when the box lies inside `[0, W] x [0, H]`.
    pub fn within(&self, image: &ImageRef) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= f64::from(image.width) && self.y2 <= f64::from(image.height)
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = ModelError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = a.x2.min(b.x2) - a.x1.max(b.x1);
    let iy = a.y2.min(b.y2) - a.y1.max(b.y1);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Clip a raw `[x1, y1, x2, y2]` box to the image and reject empty results.
pub fn clamp_box(raw: [f64; 4], image: &ImageRef) -> Result<BoundingBox, ModelError> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::DegenerateBox(raw));
    }
    let w = f64::from(image.width);
    let h = f64::from(image.height);
    let x1 = raw[0].clamp(0.0, w);
    let y1 = raw[1].clamp(0.0, h);
    let x2 = raw[2].clamp(0.0, w);
    let y2 = raw[3].clamp(0.0, h);
    BoundingBox::new(x1, y1, x2, y2).map_err(|_| ModelError::DegenerateBox(raw))
}

/// A detected or annotated object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    /// Position within the image's instance list.
    pub index: usize,
    pub label: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub det_score: f64,
    /// Index of the annotated object this instance was copied from (PredCls only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// First object of the pair is the subject.
    Forward,
    Reverse,
}

/// A directed, scored `(subject, predicate, object)` prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletPrediction {
    pub subject: ObjectInstance,
    pub object: ObjectInstance,
    pub predicate: String,
    pub score: f64,
    pub pair_id: usize,
    pub direction: Direction,
    pub raw_sentence: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VocabularyDoc {
    objects: Vec<String>,
    relations: Vec<String>,
    #[serde(default)]
    train_objects: Vec<String>,
    #[serde(default)]
    train_relations: Vec<String>,
    #[serde(default)]
    train_triplets: Vec<[String; 3]>,
}

/// Dataset vocabulary plus the training-time subsets that define novelty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyDoc", into = "VocabularyDoc")]
pub struct VocabularyProfile {
    objects: Vec<String>,
    relations: Vec<String>,
    train_objects: BTreeSet<String>,
    train_relations: BTreeSet<String>,
    train_triplets: BTreeSet<(String, String, String)>,
    object_index: BTreeMap<String, usize>,
    relation_index: BTreeMap<String, usize>,
}

impl VocabularyProfile {
    /// Build a profile; every label is normalized and duplicates are dropped
    /// (first occurrence keeps its position).
    pub fn new<S: AsRef<str>>(
        objects: &[S],
        relations: &[S],
        train_objects: &[S],
        train_relations: &[S],
        train_triplets: &[[S; 3]],
    ) -> Result<Self, ModelError> {
        let (objects, object_index) = ordered_unique(objects);
        let (relations, relation_index) = ordered_unique(relations);
        if objects.is_empty() {
            return Err(ModelError::Vocabulary("object list is empty".into()));
        }
        if relations.is_empty() {
            return Err(ModelError::Vocabulary("relation list is empty".into()));
        }
        let mut train_o = BTreeSet::new();
        for o in train_objects {
            let n = normalize_label(o.as_ref());
            if !object_index.contains_key(&n) {
                return Err(ModelError::Vocabulary(alloc::format!("train object '{n}' is not in the object list")));
            }
            train_o.insert(n);
        }
        let mut train_r = BTreeSet::new();
        for r in train_relations {
            let n = normalize_label(r.as_ref());
            if !relation_index.contains_key(&n) {
                return Err(ModelError::Vocabulary(alloc::format!("train relation '{n}' is not in the relation list")));
            }
            train_r.insert(n);
        }
        let mut triplets = BTreeSet::new();
        for [s, o, r] in train_triplets {
            let (s, o, r) = (normalize_label(s.as_ref()), normalize_label(o.as_ref()), normalize_label(r.as_ref()));
            if !object_index.contains_key(&s) || !object_index.contains_key(&o) || !relation_index.contains_key(&r) {
                return Err(ModelError::Vocabulary(alloc::format!(
                    "train triplet ({s}, {o}, {r}) uses labels outside the vocabulary"
                )));
            }
            triplets.insert((s, o, r));
        }
        Ok(VocabularyProfile {
            objects,
            relations,
            train_objects: train_o,
            train_relations: train_r,
            train_triplets: triplets,
            object_index,
            relation_index,
        })
    }

    pub fn objects(&self) -> &[String] {
        &self.objects
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn object_index(&self, label: &str) -> Option<usize> {
        self.object_index.get(label).copied()
    }

    pub fn relation_index(&self, label: &str) -> Option<usize> {
        self.relation_index.get(label).copied()
    }

    pub fn is_train_object(&self, label: &str) -> bool {
        self.train_objects.contains(label)
    }

    pub fn is_train_relation(&self, label: &str) -> bool {
        self.train_relations.contains(label)
    }

    pub fn is_train_triplet(&self, subject: &str, object: &str, relation: &str) -> bool {
        self.train_triplets.contains(&(subject.into(), object.into(), relation.into()))
    }

    pub fn train_objects(&self) -> impl Iterator<Item = &str> {
        self.train_objects.iter().map(String::as_str)
    }

    pub fn train_relations(&self) -> impl Iterator<Item = &str> {
        self.train_relations.iter().map(String::as_str)
    }

    pub fn train_triplets(&self) -> impl Iterator<Item = (&str, &str, &str)> {
        self.train_triplets.iter().map(|(s, o, r)| (s.as_str(), o.as_str(), r.as_str()))
    }
}

fn ordered_unique<S: AsRef<str>>(items: &[S]) -> (Vec<String>, BTreeMap<String, usize>) {
    let mut list = Vec::new();
    let mut index = BTreeMap::new();
    for item in items {
        let n = normalize_label(item.as_ref());
        if n.is_empty() || index.contains_key(&n) {
            continue;
        }
        index.insert(n.clone(), list.len());
        list.push(n);
    }
    (list, index)
}

impl TryFrom<VocabularyDoc> for VocabularyProfile {
    type Error = ModelError;

    fn try_from(doc: VocabularyDoc) -> Result<Self, Self::Error> {
        VocabularyProfile::new(
            &doc.objects,
            &doc.relations,
            &doc.train_objects,
            &doc.train_relations,
            &doc.train_triplets,
        )
    }
}

impl From<VocabularyProfile> for VocabularyDoc {
    fn from(v: VocabularyProfile) -> Self {
        VocabularyDoc {
            objects: v.objects,
            relations: v.relations,
            train_objects: v.train_objects.into_iter().collect(),
            train_relations: v.train_relations.into_iter().collect(),
            train_triplets: v.train_triplets.into_iter().map(|(s, o, r)| [s, o, r]).collect(),
        }
    }
}

/// One annotated relation, referencing objects by index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GtRelation {
    pub subject: usize,
    pub object: usize,
    pub predicate: String,
}

/// Annotated scene graph of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthGraph {
    pub image: ImageRef,
    pub objects: Vec<ObjectInstance>,
    pub relations: Vec<GtRelation>,
}

impl GroundTruthGraph {
    /// Checks index ranges and self-relations; object indices are rewritten
    /// to their list position and scores forced to 1.0.
    pub fn new(
        image: ImageRef,
        objects: Vec<(String, BoundingBox)>,
        relations: Vec<GtRelation>,
    ) -> Result<Self, ModelError> {
        image.validate()?;
        let objects: Vec<ObjectInstance> = objects
            .into_iter()
            .enumerate()
            .map(|(index, (label, bbox))| ObjectInstance {
                index,
                label: normalize_label(&label),
                bbox,
                det_score: 1.0,
                origin: Some(index),
            })
            .collect();
        let mut rels = Vec::with_capacity(relations.len());
        for (k, r) in relations.into_iter().enumerate() {
            if r.subject >= objects.len() || r.object >= objects.len() {
                return Err(ModelError::Graph(alloc::format!(
                    "{}: relation {k} references a missing object",
                    image.id
                )));
            }
            if r.subject == r.object {
                return Err(ModelError::Graph(alloc::format!("{}: relation {k} is a self-relation", image.id)));
            }
            rels.push(GtRelation { predicate: normalize_label(&r.predicate), ..r });
        }
        Ok(GroundTruthGraph { image, objects, relations: rels })
    }

    /// `(subject label, object label, predicate)` of relation `k`.
    pub fn triplet_labels(&self, k: usize) -> (&str, &str, &str) {
        let r = &self.relations[k];
        (&self.objects[r.subject].label, &self.objects[r.object].label, &r.predicate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    Vg150,
    Oiv6,
    Psg,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Relations over annotated objects.
    Predcls,
    /// Objects and relations from the raw image.
    Sgdet,
}

/// How boxes are written into relation prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CoordinateStyle {
    /// Fractions of width/height, two decimals (LLaVA-style prompts).
    #[serde(rename = "normalized_0_1")]
    Normalized01,
    /// Integers in `[1, 1000]` (Qwen2-VL-style prompts).
    #[serde(rename = "scaled_1_1000")]
    Scaled11000,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    /// Mean of per-image recalls.
    Macro,
    /// Total matched over total ground truth.
    Micro,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappingConfig {
    pub tau_softmax: f64,
    pub delta: f64,
    pub top_k_map: usize,
}

impl Default for MappingConfig {
    fn default() -> Self {
        MappingConfig { tau_softmax: 0.2, delta: 0.05, top_k_map: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau_dist: f64,
    /// 16 for 7B backbones, 10 for the 72B one.
    pub beta: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig { lambda1: 1.0, lambda2: 1.5, tau_dist: 0.5, beta: 16.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub alpha: f64,
    pub top_k_pairs: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { alpha: 0.25, top_k_pairs: 25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub box_threshold: f64,
    pub text_threshold: f64,
    pub max_instances_per_label: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig { box_threshold: 0.35, text_threshold: 0.25, max_instances_per_label: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    pub presence_penalty: f64,
    pub repetition_penalty: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig { temperature: 0.1, top_p: 1.0, max_tokens: 512, presence_penalty: 0.4, repetition_penalty: 1.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConcurrencyConfig {
    pub max_in_flight: usize,
}

impl Default for ConcurrencyConfig {
    fn default() -> Self {
        ConcurrencyConfig { max_in_flight: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub ks: Vec<usize>,
    pub averaging: Averaging,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { iou_threshold: 0.5, ks: alloc::vec![20, 50, 100], averaging: Averaging::Macro }
    }
}

/// Model identifiers; they select the served model and are folded into
/// cache keys.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelsConfig {
    pub chat: String,
    pub embed: String,
    pub detect: String,
    pub depth: String,
}

impl Default for ModelsConfig {
    fn default() -> Self {
        ModelsConfig {
            chat: "Qwen/Qwen2-VL-7B-Instruct".into(),
            embed: "princeton-nlp/sup-simcse-roberta-large".into(),
            detect: "groundingdino_swinb_cogcoor".into(),
            depth: "depth-anything".into(),
        }
    }
}

/// Every tunable of the pipeline. Defaults reproduce the published setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: Dataset,
    pub task: Task,
    /// Entity prompt used when `dataset = "custom"`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entity_prompt: Option<String>,
    pub mapping: MappingConfig,
    pub geometry: GeometryConfig,
    pub fusion: FusionConfig,
    pub detector: DetectorConfig,
    pub sampling: SamplingConfig,
    pub coordinate_style: CoordinateStyle,
    pub concurrency: ConcurrencyConfig,
    pub eval: EvalConfig,
    pub models: ModelsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            dataset: Dataset::Vg150,
            task: Task::Sgdet,
            entity_prompt: None,
            mapping: MappingConfig::default(),
            geometry: GeometryConfig::default(),
            fusion: FusionConfig::default(),
            detector: DetectorConfig::default(),
            sampling: SamplingConfig::default(),
            coordinate_style: CoordinateStyle::Scaled11000,
            concurrency: ConcurrencyConfig::default(),
            eval: EvalConfig::default(),
            models: ModelsConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: &str| Err(ModelError::Config(m.into()));
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(self.mapping.tau_softmax > 0.0) {
            return fail("mapping.tau_softmax must be > 0");
        }
        if !(self.mapping.delta >= 0.0) {
            return fail("mapping.delta must be >= 0");
        }
        if self.mapping.top_k_map == 0 {
            return fail("mapping.top_k_map must be >= 1");
        }
        if !(self.geometry.lambda1 > 0.0 && self.geometry.lambda2 > 0.0) {
            return fail("geometry.lambda1 and geometry.lambda2 must be > 0");
        }
        if !(self.geometry.tau_dist > 0.0) {
            return fail("geometry.tau_dist must be > 0");
        }
        if !(self.geometry.beta > 0.0) {
            return fail("geometry.beta must be > 0");
        }
        if !unit(self.fusion.alpha) {
            return fail("fusion.alpha must lie in [0, 1]");
        }
        if self.fusion.top_k_pairs == 0 {
            return fail("fusion.top_k_pairs must be >= 1");
        }
        if !unit(self.detector.box_threshold) || !unit(self.detector.text_threshold) {
            return fail("detector thresholds must lie in [0, 1]");
        }
        if self.detector.max_instances_per_label == 0 {
            return fail("detector.max_instances_per_label must be >= 1");
        }
        if !(self.sampling.temperature >= 0.0) {
            return fail("sampling.temperature must be >= 0");
        }
        if !(self.sampling.top_p > 0.0 && self.sampling.top_p <= 1.0) {
            return fail("sampling.top_p must lie in (0, 1]");
        }
        if self.concurrency.max_in_flight == 0 {
            return fail("concurrency.max_in_flight must be >= 1");
        }
        if !unit(self.eval.iou_threshold) {
            return fail("eval.iou_threshold must lie in [0, 1]");
        }
        if self.eval.ks.is_empty() || self.eval.ks.windows(2).any(|w| w[0] >= w[1]) {
            return fail("eval.ks must be non-empty and strictly increasing");
        }
        if self.eval.ks[0] == 0 {
            return fail("eval.ks values must be >= 1");
        }
        let m = &self.models;
        if [&m.chat, &m.embed, &m.detect, &m.depth].iter().any(|id| id.trim().is_empty()) {
            return fail("model identifiers must be non-empty");
        }
        if self.dataset == Dataset::Custom && self.entity_prompt.is_none() {
            return fail("dataset = custom requires entity_prompt");
        }
        Ok(())
    }
}
