//! Candidate pair refinement.
//!
//! Each unordered instance pair gets a semantic score from the VLM (shared by
//! every pair with the same two labels) and a geometric score from 2D center
//! distance plus median-depth difference pushed through a sigmoid gate. The
//! two are fused in log space and the best `k` pairs move on to relation
//! prediction.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::fmt::Write as _;

use crate::model::{BoundingBox, GeometryConfig, ImageRef, ObjectInstance};
use crate::parse::pair_sections;

/// Pairs per semantic-scoring prompt.
pub const PAIRS_PER_PROMPT: usize = 50;

/// Score assumed for a label pair whose VLM answer stayed malformed ("Uncertain").
pub const FALLBACK_PAIR_SCORE: u8 = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PairScoreError {
    MissingPair(usize),
    ScoreOutOfRange(usize),
    DuplicatePair(usize),
    /// Index beyond the number of pairs asked for.
    UnexpectedPair(usize),
}

impl fmt::Display for PairScoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PairScoreError::MissingPair(i) => write!(f, "pair {i} missing from response"),
            PairScoreError::ScoreOutOfRange(i) => write!(f, "pair {i} score is not an integer in 1..=5"),
            PairScoreError::DuplicatePair(i) => write!(f, "pair {i} scored twice"),
            PairScoreError::UnexpectedPair(i) => write!(f, "pair {i} was not requested"),
        }
    }
}

impl core::error::Error for PairScoreError {}

#[derive(Debug, Clone, PartialEq)]
pub enum RefineError {
    EmptyPairs,
    /// A present label pair has no semantic score.
    MissingLabelPair(String, String),
    /// Log fusion needs strictly positive inputs.
    NonPositiveScore,
    LengthMismatch,
}

impl fmt::Display for RefineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RefineError::EmptyPairs => f.write_str("at least one pair is required"),
            RefineError::MissingLabelPair(a, b) => write!(f, "no semantic score for ({a}, {b})"),
            RefineError::NonPositiveScore => f.write_str("fusion inputs must be > 0"),
            RefineError::LengthMismatch => f.write_str("one depth value per instance is required"),
        }
    }
}

impl core::error::Error for RefineError {}

/// Dense `n x n` matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn filled(n: usize, value: f64) -> Self {
        SquareMatrix { n, data: alloc::vec![value; n * n] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    /// Set `(i, j)` and `(j, i)`.
    pub fn set_sym(&mut self, i: usize, j: usize, v: f64) {
        self.set(i, j, v);
        self.set(j, i, v);
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }
}

/// Distinct unordered label pairs present among the instances, sorted.
/// A label pairs with itself only when it has two or more instances.
pub fn label_pairs(instances: &[ObjectInstance]) -> Vec<(String, String)> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for inst in instances {
        *counts.entry(inst.label.as_str()).or_default() += 1;
    }
    let labels: Vec<(&str, usize)> = counts.into_iter().collect();
    let mut pairs = Vec::new();
    for (a, &(la, ca)) in labels.iter().enumerate() {
        if ca >= 2 {
            pairs.push((String::from(la), String::from(la)));
        }
        for &(lb, _) in &labels[a + 1..] {
            pairs.push((String::from(la), String::from(lb)));
        }
    }
    pairs
}

const SEMANTIC_PREAMBLE: &str = "You are a world-class vision-language analyst, highly specialized in understanding spatial and functional relationships between objects in visual scenes. Your role is to evaluate how likely it is that specific object pairs are engaged in meaningful physical interactions in the given image.

### Object Pair List:
";

const SEMANTIC_INSTRUCTIONS: &str = "
### Task:
Carefully assess each object pair listed above and determine the likelihood that they participate in a meaningful interaction within the scene. Base your assessment on how objects of those categories typically relate in physical or functional terms within real-world images.
Provide a single integer confidence score from 1 to 5 for each pair, where:
- 1 = Very Unlikely
- 2 = Unlikely
- 3 = Uncertain
- 4 = Likely
- 5 = Very Likely

### Output Format:
- Do not include any object names, explanations, or extra text.
- Stop after the final pair.
- You must return exactly one line per pair listed above.
- Use the format: Pair [index]: [score]

### Begin:";

/// Semantic pair-scoring prompt for one chunk of label pairs (indices start at 1).
pub fn build_semantic_prompt(pairs: &[(String, String)]) -> Result<String, RefineError> {
    if pairs.is_empty() {
        return Err(RefineError::EmptyPairs);
    }
    let mut prompt = String::from(SEMANTIC_PREAMBLE);
    for (k, (a, b)) in pairs.iter().enumerate() {
        let _ = writeln!(prompt, "Pair {}: {} and {}", k + 1, a, b);
    }
    prompt.push_str(SEMANTIC_INSTRUCTIONS);
    Ok(prompt)
}

/// Parse `Pair [index]: [score]` lines into one score per requested pair.
pub fn parse_pair_scores(raw: &str, expected: usize) -> Result<Vec<u8>, PairScoreError> {
    let mut scores: Vec<Option<u8>> = alloc::vec![None; expected];
    for (index, body) in pair_sections(raw) {
        if index == 0 || index > expected {
            return Err(PairScoreError::UnexpectedPair(index));
        }
        let slot = &mut scores[index - 1];
        if slot.is_some() {
            return Err(PairScoreError::DuplicatePair(index));
        }
        *slot = Some(score_token(&body).ok_or(PairScoreError::ScoreOutOfRange(index))?);
    }
    scores.into_iter().enumerate().map(|(k, s)| s.ok_or(PairScoreError::MissingPair(k + 1))).collect()
}

/// Best-effort parse: the first in-range score for each pair, `None` where
/// the response gives nothing usable.
pub fn parse_pair_scores_lenient(raw: &str, expected: usize) -> Vec<Option<u8>> {
    let mut scores: Vec<Option<u8>> = alloc::vec![None; expected];
    for (index, body) in pair_sections(raw) {
        if index == 0 || index > expected || scores[index - 1].is_some() {
            continue;
        }
        scores[index - 1] = score_token(&body);
    }
    scores
}

fn score_token(body: &str) -> Option<u8> {
    let token = body.trim_start_matches(['[', '*', ' ']);
    let digits = token.bytes().take_while(u8::is_ascii_digit).count();
    match token[..digits].parse::<u32>() {
        Ok(v @ 1..=5) => Some(v as u8),
        _ => None,
    }
}

/// Semantic scores keyed by unordered label pair.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelPairScores(BTreeMap<(String, String), u8>);

impl LabelPairScores {
    pub fn new() -> Self {
        Self::default()
    }

    fn key(a: &str, b: &str) -> (String, String) {
        if a <= b {
            (String::from(a), String::from(b))
        } else {
            (String::from(b), String::from(a))
        }
    }

    pub fn insert(&mut self, a: &str, b: &str, score: u8) {
        self.0.insert(Self::key(a, b), score);
    }

    pub fn get(&self, a: &str, b: &str) -> Option<u8> {
        self.0.get(&Self::key(a, b)).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// VLM score `1..=5` as a probability in `[0.2, 1]`.
pub fn semantic_probability(score: u8) -> f64 {
    f64::from(score) / 5.0
}

/// Broadcast label-pair scores to every instance pair. Diagonal stays 1.
pub fn semantic_matrix(scores: &LabelPairScores, instances: &[ObjectInstance]) -> Result<SquareMatrix, RefineError> {
    let n = instances.len();
    let mut m = SquareMatrix::filled(n, 1.0);
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (&instances[i].label, &instances[j].label);
            let s = scores.get(a, b).ok_or_else(|| RefineError::MissingLabelPair(a.clone(), b.clone()))?;
            m.set_sym(i, j, semantic_probability(s));
        }
    }
    Ok(m)
}

/// Weighted sum of diagonal-normalized center distance and depth gap.
pub fn pair_distance(
    bi: &BoundingBox,
    bj: &BoundingBox,
    di: f64,
    dj: f64,
    image: &ImageRef,
    lambda1: f64,
    lambda2: f64,
) -> f64 {
    let (xi, yi) = bi.center();
    let (xj, yj) = bj.center();
    let planar = libm::sqrt((xi - xj) * (xi - xj) + (yi - yj) * (yi - yj));
    lambda1 * (planar / image.diagonal()) + lambda2 * libm::fabs(di - dj)
}

/// `sigmoid(-beta * (d - tau))`.
pub fn geometric_gate(distance: f64, tau: f64, beta: f64) -> f64 {
    1.0 / (1.0 + libm::exp(beta * (distance - tau)))
}

/// `alpha * ln(ps) + (1 - alpha) * ln(pg)`.
pub fn fuse(ps: f64, pg: f64, alpha: f64) -> Result<f64, RefineError> {
    if !(ps > 0.0 && pg > 0.0) {
        return Err(RefineError::NonPositiveScore);
    }
    Ok(alpha * libm::log(ps) + (1.0 - alpha) * libm::log(pg))
}

/// Semantic, geometric and fused pair scores for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PairMatrixBundle {
    pub n: usize,
    pub semantic: SquareMatrix,
    pub geometric: SquareMatrix,
    /// Diagonal is `-inf`.
    pub fused: SquareMatrix,
}

impl PairMatrixBundle {
    pub fn build(
        instances: &[ObjectInstance],
        depths: &[f64],
        image: &ImageRef,
        semantic: SquareMatrix,
        geometry: &GeometryConfig,
        alpha: f64,
    ) -> Result<Self, RefineError> {
        let n = instances.len();
        if depths.len() != n || semantic.n() != n {
            return Err(RefineError::LengthMismatch);
        }
        let mut geometric = SquareMatrix::filled(n, 1.0);
        let mut fused = SquareMatrix::filled(n, f64::NEG_INFINITY);
        for i in 0..n {
            for j in i + 1..n {
                let d = pair_distance(
                    &instances[i].bbox,
                    &instances[j].bbox,
                    depths[i],
                    depths[j],
                    image,
                    geometry.lambda1,
                    geometry.lambda2,
                );
                // extreme beta can underflow the gate to exactly 0
                let pg = geometric_gate(d, geometry.tau_dist, geometry.beta).max(f64::MIN_POSITIVE);
                geometric.set_sym(i, j, pg);
                fused.set_sym(i, j, fuse(semantic.get(i, j), pg, alpha)?);
            }
        }
        Ok(PairMatrixBundle { n, semantic, geometric, fused })
    }

    /// Best `k` unordered pairs by fused score.
    pub fn select_top_k(&self, k: usize) -> Vec<CandidatePair> {
        top_k_pairs(&self.fused, k)
            .into_iter()
            .map(|(i, j)| CandidatePair {
                i,
                j,
                fused_score: self.fused.get(i, j),
                semantic_score: self.semantic.get(i, j),
                geometric_score: self.geometric.get(i, j),
            })
            .collect()
    }

    /// All unordered pairs in `(i, j)` order.
    pub fn all_pairs(&self) -> Vec<CandidatePair> {
        let mut out = Vec::with_capacity(self.n * self.n.saturating_sub(1) / 2);
        for i in 0..self.n {
            for j in i + 1..self.n {
                out.push(CandidatePair {
                    i,
                    j,
                    fused_score: self.fused.get(i, j),
                    semantic_score: self.semantic.get(i, j),
                    geometric_score: self.geometric.get(i, j),
                });
            }
        }
        out
    }
}

/// An unordered instance pair (`i < j`) kept for relation prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidatePair {
    pub i: usize,
    pub j: usize,
    pub fused_score: f64,
    pub semantic_score: f64,
    pub geometric_score: f64,
}

/// Upper-triangle pairs ranked by descending score, ties by `(i, j)`.
pub fn top_k_pairs(fused: &SquareMatrix, k: usize) -> Vec<(usize, usize)> {
    let n = fused.n();
    let mut pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    pairs.sort_by(|&(ai, aj), &(bi, bj)| fused.get(bi, bj).total_cmp(&fused.get(ai, aj)).then((ai, aj).cmp(&(bi, bj))));
    pairs.truncate(k);
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn inst(index: usize, label: &str, b: [f64; 4]) -> ObjectInstance {
        ObjectInstance {
            index,
            label: label.into(),
            bbox: BoundingBox::try_from(b).unwrap(),
            det_score: 1.0,
            origin: None,
        }
    }

    #[test]
    fn semantic_prompt_lists_pairs() {
        let p = build_semantic_prompt(&[("book".into(), "bookcase".into())]).unwrap();
        assert!(p.contains("Pair 1: book and bookcase\n"));
        assert!(p.contains("Use the format: Pair [index]: [score]"));
        assert!(p.ends_with("### Begin:"));
        assert_eq!(build_semantic_prompt(&[]), Err(RefineError::EmptyPairs));
    }

    #[test]
    fn label_pairs_include_self_pairs_for_repeated_labels() {
        let insts = vec![
            inst(0, "person", [0.0, 0.0, 1.0, 1.0]),
            inst(1, "chair", [0.0, 0.0, 1.0, 1.0]),
            inst(2, "person", [0.0, 0.0, 1.0, 1.0]),
        ];
        let pairs = label_pairs(&insts);
        let expect: Vec<(String, String)> = vec![("chair".into(), "person".into()), ("person".into(), "person".into())];
        assert_eq!(pairs, expect);
    }

    #[test]
    fn parse_scores_happy_and_error_paths() {
        assert_eq!(parse_pair_scores("Pair 1: 5\nPair 2: 3", 2), Ok(vec![5, 3]));
        assert_eq!(parse_pair_scores("pair 2: 1\nPAIR 1: 4", 2), Ok(vec![4, 1]));
        assert_eq!(parse_pair_scores("Pair 1: 7", 1), Err(PairScoreError::ScoreOutOfRange(1)));
        assert_eq!(parse_pair_scores("Pair 1: 0", 1), Err(PairScoreError::ScoreOutOfRange(1)));
        assert_eq!(parse_pair_scores("Pair 1: high", 1), Err(PairScoreError::ScoreOutOfRange(1)));
        assert_eq!(parse_pair_scores("Pair 2: 4", 2), Err(PairScoreError::MissingPair(1)));
        assert_eq!(parse_pair_scores("Pair 1: 4\nPair 1: 2", 1), Err(PairScoreError::DuplicatePair(1)));
        assert_eq!(parse_pair_scores("Pair 3: 4", 2), Err(PairScoreError::UnexpectedPair(3)));
        assert_eq!(parse_pair_scores_lenient("Pair 2: 9\nPair 1: 4\nPair 1: 2", 3), vec![Some(4), None, None]);
    }

    #[test]
    fn semantic_scores_broadcast_by_label_pair() {
        let insts = vec![
            inst(0, "person", [0.0, 0.0, 1.0, 1.0]),
            inst(1, "person", [2.0, 0.0, 3.0, 1.0]),
            inst(2, "chair", [4.0, 0.0, 5.0, 1.0]),
        ];
        let mut scores = LabelPairScores::new();
        scores.insert("person", "chair", 4);
        scores.insert("person", "person", 1);
        let m = semantic_matrix(&scores, &insts).unwrap();
        assert!(m.is_symmetric());
        let filled: Vec<_> = [(0, 2), (2, 0), (1, 2), (2, 1)].iter().map(|&(i, j)| m.get(i, j)).collect();
        assert_eq!(filled, [0.8; 4]);
        assert_eq!(m.get(0, 1), 0.2);
        assert_eq!(semantic_probability(5), 1.0);

        let empty = LabelPairScores::new();
        assert_eq!(
            semantic_matrix(&empty, &insts),
            Err(RefineError::MissingLabelPair("person".to_string(), "person".to_string()))
        );
    }

    #[test]
    fn distance_worked_cases() {
        let image = ImageRef::new("g", "g.jpg", 800, 600).unwrap();
        let a = BoundingBox::new(50.0, 50.0, 150.0, 150.0).unwrap(); // center (100, 100)
        let b = BoundingBox::new(350.0, 450.0, 450.0, 550.0).unwrap(); // center (400, 500)
        assert_eq!(pair_distance(&a, &a, 0.3, 0.3, &image, 1.0, 1.5), 0.0);
        let d = pair_distance(&a, &b, 0.2, 0.4, &image, 1.0, 1.5);
        assert!((d - 0.8).abs() < 1e-12, "{d}");
        let d = pair_distance(&a, &a, 0.0, 1.0, &image, 1.0, 1.5);
        assert_eq!(d, 1.5);
    }

    #[test]
    fn gate_worked_cases() {
        assert_eq!(geometric_gate(0.5, 0.5, 16.0), 0.5);
        assert!((geometric_gate(0.8, 0.5, 16.0) - 0.00816).abs() < 1e-5);
        assert!((geometric_gate(0.0, 0.5, 16.0) - 0.99966).abs() < 1e-5);
    }

    #[test]
    fn fuse_worked_cases() {
        assert_eq!(fuse(0.8, 0.5, 1.0).unwrap(), libm::log(0.8));
        assert_eq!(fuse(0.8, 0.5, 0.0).unwrap(), libm::log(0.5));
        assert!((fuse(0.8, 0.5, 0.25).unwrap() - (-0.57565)).abs() < 1e-5);
        assert_eq!(fuse(0.0, 0.5, 0.25), Err(RefineError::NonPositiveScore));
        assert_eq!(fuse(0.5, -1.0, 0.25), Err(RefineError::NonPositiveScore));
    }

    #[test]
    fn top_k_small_cases() {
        let mut m = SquareMatrix::filled(2, f64::NEG_INFINITY);
        m.set_sym(0, 1, -3.0);
        assert_eq!(top_k_pairs(&m, 10), vec![(0, 1)]);

        let mut m = SquareMatrix::filled(3, f64::NEG_INFINITY);
        m.set_sym(0, 1, -1.0);
        m.set_sym(0, 2, -0.5);
        m.set_sym(1, 2, -1.0);
        assert_eq!(top_k_pairs(&m, 3), vec![(0, 2), (0, 1), (1, 2)]);
        assert_eq!(top_k_pairs(&m, 1), vec![(0, 2)]);
    }

    #[test]
    fn bundle_is_symmetric_with_sentinel_diagonal() {
        let image = ImageRef::new("g", "g.jpg", 100, 100).unwrap();
        let insts = vec![
            inst(0, "a", [0.0, 0.0, 10.0, 10.0]),
            inst(1, "b", [50.0, 50.0, 60.0, 60.0]),
            inst(2, "a", [90.0, 0.0, 100.0, 10.0]),
        ];
        let mut scores = LabelPairScores::new();
        scores.insert("a", "b", 5);
        scores.insert("a", "a", 2);
        let sem = semantic_matrix(&scores, &insts).unwrap();
        let bundle =
            PairMatrixBundle::build(&insts, &[0.1, 0.5, 0.9], &image, sem, &GeometryConfig::default(), 0.25).unwrap();
        assert!(bundle.semantic.is_symmetric());
        assert!(bundle.geometric.is_symmetric());
        assert!(bundle.fused.is_symmetric());
        assert!((0..3).all(|i| bundle.fused.get(i, i) == f64::NEG_INFINITY));
        let top = bundle.select_top_k(2);
        assert_eq!(top.len(), 2);
        assert!(top[0].fused_score >= top[1].fused_score);
        assert_eq!(bundle.all_pairs().len(), 3);
        assert_eq!(
            PairMatrixBundle::build(
                &insts,
                &[0.1],
                &image,
                SquareMatrix::filled(3, 1.0),
                &GeometryConfig::default(),
                0.25
            ),
            Err(RefineError::LengthMismatch)
        );
    }
}
