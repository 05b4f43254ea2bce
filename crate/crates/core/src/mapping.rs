//! Entity generation prompts and vocabulary alignment.
//!
//! Free-form labels produced by a vision-language model are aligned to a
//! fixed category list in two steps: an exact match on the normalized label,
//! then a sentence-embedding comparison scored with a temperature softmax.
//! Every category whose softmax score lies within `delta` of the best one is
//! kept, up to `k` of them.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::model::{normalize_label, Dataset};

const ENTITY_OUTPUT_FORMAT: &str = "### Output Format Instructions

- Do not repeat object names.
- Do not describe attributes, adjectives, or relationships.
- Return the result as a comma-separated list.
- If unsure, include it.

### Prompt

List all the objects visible in the image, including foreground and background. Return the objects as a comma-separated list.";

const PSG_TASK: &str = "### Task Start
You are an expert at detecting objects in images. You are given an image. Your task is to list all objects visible in the image, including both foreground and background. The objects may include natural elements, human-made structures, or any other discernible entities.";

const OIV6_TASK: &str = "### Task Start

You are an expert at detecting objects in images. You are given an image. Your task is to identify and list all visible objects in the image, including both foreground and background. Include a wide range of recognizable categories, whether specific or general, as long as they are visibly present in the scene.";

const VG_TASK: &str = "### Task Start

You are an expert at detecting objects in images. You are given an image. Your task is to list all identifiable objects visible in the image, including those in the foreground and background. Include both whole objects and meaningful parts or components that are visually discernible.";

#[derive(Debug, Clone, PartialEq)]
pub enum MappingError<E> {
    /// `dataset = custom` without a prompt template.
    UnknownDataset,
    /// The response contained no usable entity names.
    EmptyEntityList,
    /// No entity produced any category.
    MappingEmpty,
    EmptyVocabulary,
    /// Embedding vectors of different lengths, or the wrong number of them.
    DimensionMismatch,
    /// A scoring parameter is out of range.
    InvalidParameter(&'static str),
    Encoder(E),
}

impl<E: fmt::Display> fmt::Display for MappingError<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MappingError::UnknownDataset => f.write_str("custom dataset requires an entity prompt"),
            MappingError::EmptyEntityList => f.write_str("no entities could be parsed"),
            MappingError::MappingEmpty => f.write_str("no entity mapped to any category"),
            MappingError::EmptyVocabulary => f.write_str("vocabulary is empty"),
            MappingError::DimensionMismatch => f.write_str("embedding dimension mismatch"),
            MappingError::InvalidParameter(p) => write!(f, "invalid parameter: {p}"),
            MappingError::Encoder(e) => write!(f, "encoder failed: {e}"),
        }
    }
}

impl<E: fmt::Debug + fmt::Display> core::error::Error for MappingError<E> {}

/// Sentence encoder used for semantic matching.
pub trait TextEncoder {
    type Error;

    /// One vector per input text, all of the same dimension.
    fn encode(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, Self::Error>;
}

impl<T: TextEncoder + ?Sized> TextEncoder for &T {
    type Error = T::Error;

    fn encode(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, Self::Error> {
        (**self).encode(texts)
    }
}

/// The entity-listing prompt for a dataset.
pub fn build_entity_prompt<E>(dataset: Dataset, custom: Option<&str>) -> Result<String, MappingError<E>> {
    let task = match dataset {
        Dataset::Psg => PSG_TASK,
        Dataset::Oiv6 => OIV6_TASK,
        Dataset::Vg150 => VG_TASK,
        Dataset::Custom => {
            return custom.map(String::from).ok_or(MappingError::UnknownDataset);
        }
    };
    let mut prompt = String::with_capacity(task.len() + ENTITY_OUTPUT_FORMAT.len() + 2);
    prompt.push_str(task);
    prompt.push_str("\n\n");
    prompt.push_str(ENTITY_OUTPUT_FORMAT);
    Ok(prompt)
}

/// An entity name as returned by the model, plus its normalized form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictedEntity {
    pub raw: String,
    pub normalized: String,
}

/// Split a comma/newline separated entity list, normalize and dedupe it.
pub fn parse_entity_list<E>(raw: &str) -> Result<Vec<PredictedEntity>, MappingError<E>> {
    let mut out: Vec<PredictedEntity> = Vec::new();
    for item in raw.split([',', '\n']) {
        let item = strip_list_marker(item.trim());
        let normalized = normalize_label(item);
        if normalized.is_empty() || out.iter().any(|e| e.normalized == normalized) {
            continue;
        }
        out.push(PredictedEntity { raw: String::from(item), normalized });
    }
    if out.is_empty() {
        return Err(MappingError::EmptyEntityList);
    }
    Ok(out)
}

// "- cat", "* cat", "3. cat", "3) cat"
fn strip_list_marker(item: &str) -> &str {
    if let Some(rest) = item.strip_prefix(['-', '*', '•']) {
        return rest.trim_start();
    }
    let digits = item.bytes().take_while(u8::is_ascii_digit).count();
    if digits > 0 {
        if let Some(rest) = item[digits..].strip_prefix(['.', ')']) {
            return rest.trim_start();
        }
    }
    item
}

/// Softmax temperature, near-max window and result cap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoringParams {
    pub tau: f64,
    pub delta: f64,
    pub k: usize,
}

impl Default for ScoringParams {
    fn default() -> Self {
        ScoringParams { tau: 0.2, delta: 0.05, k: 2 }
    }
}

/// Cosine similarity of one category to the query, tagged with the
/// category's position in the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub vocab_index: usize,
    pub cosine: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredCategory {
    pub vocab_index: usize,
    /// Softmax probability over the full candidate set.
    pub score: f64,
}

/// Temperature softmax over all candidates, keep those within `delta` of the
/// maximum, return at most `k` by descending score (ties by vocabulary index).
pub fn score_candidates<E>(sims: &[Similarity], params: ScoringParams) -> Result<Vec<ScoredCategory>, MappingError<E>> {
    if sims.is_empty() {
        return Err(MappingError::EmptyVocabulary);
    }
    if !(params.tau > 0.0) {
        return Err(MappingError::InvalidParameter("tau must be > 0"));
    }
    if !(params.delta >= 0.0) {
        return Err(MappingError::InvalidParameter("delta must be >= 0"));
    }
    if params.k == 0 {
        return Err(MappingError::InvalidParameter("k must be >= 1"));
    }
    let scores = softmax(sims.iter().map(|s| s.cosine), params.tau);
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut kept: Vec<ScoredCategory> = sims
        .iter()
        .zip(&scores)
        .filter(|(_, &p)| best - p < params.delta)
        .map(|(s, &p)| ScoredCategory { vocab_index: s.vocab_index, score: p })
        .collect();
    kept.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.vocab_index.cmp(&b.vocab_index)));
    kept.truncate(params.k);
    Ok(kept)
}

/// Numerically stable `exp(x/tau) / sum exp(x/tau)`.
pub fn softmax(values: impl Iterator<Item = f64> + Clone, tau: f64) -> Vec<f64> {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.map(|v| libm::exp((v - max) / tau)).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum());
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchMethod {
    Exact,
    Semantic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MappingResult {
    pub entity: PredictedEntity,
    /// `(category, score)` in descending score order.
    pub matches: Vec<(String, f64)>,
    pub method: MatchMethod,
}

/// Wraps a label in the sentence that gets embedded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SentenceTemplate {
    /// "There is a {label} in the image."
    Entity,
    /// "subject {label} object"
    Predicate,
}

impl SentenceTemplate {
    pub fn render(self, label: &str) -> String {
        match self {
            SentenceTemplate::Entity => alloc::format!("There is a {label} in the image."),
            SentenceTemplate::Predicate => alloc::format!("subject {label} object"),
        }
    }
}

/// Aligns labels to one category list. Category embeddings are computed on
/// the first semantic lookup and reused afterwards.
#[derive(Debug, Clone)]
pub struct LabelMatcher {
    labels: Vec<String>,
    params: ScoringParams,
    template: SentenceTemplate,
    embeddings: Option<Vec<Vec<f64>>>,
}

impl LabelMatcher {
    pub fn new(labels: &[String], params: ScoringParams, template: SentenceTemplate) -> Self {
        LabelMatcher { labels: labels.to_vec(), params, template, embeddings: None }
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Sentences that are embedded for the category list, in vocabulary order.
    pub fn category_sentences(&self) -> Vec<String> {
        self.labels.iter().map(|l| self.template.render(l)).collect()
    }

    /// Install precomputed category embeddings (one per label).
    pub fn with_embeddings<E>(mut self, embeddings: Vec<Vec<f64>>) -> Result<Self, MappingError<E>> {
        check_dimensions(&embeddings, self.labels.len())?;
        self.embeddings = Some(embeddings);
        Ok(self)
    }

    pub fn has_embeddings(&self) -> bool {
        self.embeddings.is_some()
    }

    /// Map one entity. An exact normalized match never touches the encoder.
    pub fn map_entity<T: TextEncoder>(
        &mut self,
        entity: &PredictedEntity,
        encoder: &T,
    ) -> Result<MappingResult, MappingError<T::Error>> {
        if self.labels.is_empty() {
            return Err(MappingError::EmptyVocabulary);
        }
        if let Some(label) = self.labels.iter().find(|l| **l == entity.normalized) {
            return Ok(MappingResult {
                entity: entity.clone(),
                matches: alloc::vec![(label.clone(), 1.0)],
                method: MatchMethod::Exact,
            });
        }
        if self.embeddings.is_none() {
            let vectors = encoder.encode(&self.category_sentences()).map_err(MappingError::Encoder)?;
            check_dimensions(&vectors, self.labels.len())?;
            self.embeddings = Some(vectors);
        }
        let categories = self.embeddings.as_ref().expect("embeddings populated above");
        let mut query = encoder.encode(&[self.template.render(&entity.normalized)]).map_err(MappingError::Encoder)?;
        if query.len() != 1 || query[0].len() != categories[0].len() {
            return Err(MappingError::DimensionMismatch);
        }
        let query = query.pop().expect("length checked");
        let sims: Vec<Similarity> = categories
            .iter()
            .enumerate()
            .map(|(vocab_index, c)| Similarity { vocab_index, cosine: cosine(&query, c) })
            .collect();
        let scored = score_candidates(&sims, self.params)?;
        Ok(MappingResult {
            entity: entity.clone(),
            matches: scored.into_iter().map(|s| (self.labels[s.vocab_index].clone(), s.score)).collect(),
            method: MatchMethod::Semantic,
        })
    }

    /// Union of the categories matched by every entity, in vocabulary order.
    pub fn map_all<T: TextEncoder>(
        &mut self,
        entities: &[PredictedEntity],
        encoder: &T,
    ) -> Result<Vec<String>, MappingError<T::Error>> {
        let mut hit = alloc::vec![false; self.labels.len()];
        for entity in entities {
            let result = self.map_entity(entity, encoder)?;
            for (label, _) in &result.matches {
                if let Some(i) = self.labels.iter().position(|l| l == label) {
                    hit[i] = true;
                }
            }
        }
        let union: Vec<String> = self.labels.iter().zip(&hit).filter(|(_, &h)| h).map(|(l, _)| l.clone()).collect();
        if union.is_empty() {
            return Err(MappingError::MappingEmpty);
        }
        Ok(union)
    }
}

fn check_dimensions<E>(vectors: &[Vec<f64>], expected: usize) -> Result<(), MappingError<E>> {
    if vectors.len() != expected {
        return Err(MappingError::DimensionMismatch);
    }
    if let Some(first) = vectors.first() {
        if first.is_empty() || vectors.iter().any(|v| v.len() != first.len()) {
            return Err(MappingError::DimensionMismatch);
        }
    }
    Ok(())
}
