//! Relation prediction: prompt rendering, response parsing, predicate
//! extraction and triplet assembly.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::fmt::Write as _;

use crate::mapping::{LabelMatcher, MappingError, PredictedEntity, ScoringParams, SentenceTemplate, TextEncoder};
use crate::model::{
    normalize_label, BoundingBox, CoordinateStyle, Direction, ImageRef, MappingConfig, ObjectInstance,
    TripletPrediction,
};
use crate::parse::pair_sections;
use crate::refine::CandidatePair;

/// Pairs per relation prompt.
pub const PAIRS_PER_PROMPT: usize = 50;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RelationParseError {
    MissingPair(usize),
    UnsplittableLine(usize),
}

impl fmt::Display for RelationParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RelationParseError::MissingPair(i) => write!(f, "pair {i} missing from response"),
            RelationParseError::UnsplittableLine(i) => write!(f, "pair {i} does not hold two sentences"),
        }
    }
}

impl core::error::Error for RelationParseError {}

/// Two sentences for one pair: first-to-second and second-to-first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectedSentencePair {
    pub pair_id: usize,
    pub s1: String,
    pub s2: String,
}

/// A predicate phrase aligned to the relation vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct PredicateCandidate {
    pub phrase: String,
    pub mapped: String,
    pub map_score: f64,
}

/// Render a pixel box for the prompt.
///
/// `Normalized01` divides by the image size and rounds half up to two
/// decimals, printed without trailing zeros beyond the first decimal
/// (`0.36`, `0.7`, `1.0`). `Scaled11000` rounds half up to integers in
/// `[1, 1000]`.
pub fn render_box(bbox: &BoundingBox, image: &ImageRef, style: CoordinateStyle) -> String {
    let (w, h) = (f64::from(image.width), f64::from(image.height));
    let coords = [bbox.x1() / w, bbox.y1() / h, bbox.x2() / w, bbox.y2() / h];
    let mut out = String::from("[");
    for (n, c) in coords.iter().enumerate() {
        if n > 0 {
            out.push_str(", ");
        }
        match style {
            CoordinateStyle::Normalized01 => push_hundredths(&mut out, round_half_up(c * 100.0)),
            CoordinateStyle::Scaled11000 => {
                let _ = write!(out, "{}", scaled_coordinate(*c));
            }
        }
    }
    out.push(']');
    out
}

/// A `[0, 1]` coordinate on the integer `[1, 1000]` grid.
pub fn scaled_coordinate(fraction: f64) -> i64 {
    round_half_up(fraction * 1000.0).clamp(1, 1000)
}

fn round_half_up(v: f64) -> i64 {
    // the epsilon absorbs representation error such as 0.285 * 100 = 28.499999
    libm::floor(v + 0.5 + 1e-9) as i64
}

fn push_hundredths(out: &mut String, k: i64) {
    let k = k.clamp(0, 100);
    let (whole, frac) = (k / 100, k % 100);
    let _ = if frac % 10 == 0 { write!(out, "{}.{}", whole, frac / 10) } else { write!(out, "{}.{:02}", whole, frac) };
}

const HEADER: &str = "You are a vision-language expert. Given an image with pairs of objects along with their bounding box coordinates. The bounding box coordinates are defined by (X_top_left, Y_top_left, X_bottom_right, Y_bottom_right) and are ";

const NORMALIZED_INSTRUCTIONS: &str = "
### Output Format Instructions
- Write two sentences describing their spatial relationship.
- Sentence one describes how the first object is related to the second object.
- Sentence two describes how the second object is related to the first object.
- Use natural but concise relationships.
- Do not describe properties of a single object.
- Format your answer in the following manner:
  Pair [idx]:
  Sentence1:|Sentence2:

### Begin:";

const SCALED_INSTRUCTIONS: &str = "
### Output Instructions
- For each pair, write two short sentences:
- Sentence 1: how the first object relates to the second.
- Sentence 2: how the second object relates to the first.
- Focus on spatial or functional interactions.
- Use this format:
  Pair [index]:
  Sentence1: | Sentence2:

### Begin:";

/// Relation prompt for one chunk of pairs (indices start at 1). The
/// lower-indexed instance of each pair is the first object. Returns `None`
/// for an empty chunk.
pub fn build_relation_prompt(
    pairs: &[CandidatePair],
    instances: &[ObjectInstance],
    image: &ImageRef,
    style: CoordinateStyle,
) -> Option<String> {
    if pairs.is_empty() {
        return None;
    }
    let mut prompt = String::from(HEADER);
    let (range, separator) = match style {
        CoordinateStyle::Normalized01 => ("normalized between 0 and 1.", ""),
        CoordinateStyle::Scaled11000 => ("scaled between 1 and 1000.", " "),
    };
    prompt.push_str(range);
    prompt.push_str("\n\n### Object Pair List\n");
    for (k, pair) in pairs.iter().enumerate() {
        let (a, b) = (&instances[pair.i], &instances[pair.j]);
        let _ = writeln!(
            prompt,
            "Pair {}: First object: '{}' {}, Second object:{}'{}' {}",
            k + 1,
            a.label,
            render_box(&a.bbox, image, style),
            separator,
            b.label,
            render_box(&b.bbox, image, style),
        );
    }
    prompt.push_str(match style {
        CoordinateStyle::Normalized01 => NORMALIZED_INSTRUCTIONS,
        CoordinateStyle::Scaled11000 => SCALED_INSTRUCTIONS,
    });
    Some(prompt)
}

/// Per-pair parse results, one slot per requested pair. Later duplicates and
/// indices beyond `expected` are ignored.
pub fn parse_relation_sections(raw: &str, expected: usize) -> Vec<Result<DirectedSentencePair, RelationParseError>> {
    let mut slots: Vec<Option<Result<DirectedSentencePair, RelationParseError>>> = alloc::vec![None; expected];
    for (index, body) in pair_sections(raw) {
        if index == 0 || index > expected || slots[index - 1].is_some() {
            continue;
        }
        slots[index - 1] = Some(
            split_sentences(&body)
                .map(|(s1, s2)| DirectedSentencePair { pair_id: index, s1, s2 })
                .ok_or(RelationParseError::UnsplittableLine(index)),
        );
    }
    slots.into_iter().enumerate().map(|(k, s)| s.unwrap_or(Err(RelationParseError::MissingPair(k + 1)))).collect()
}

/// Strict parse: every requested pair must be present and splittable. The
/// error reported is the one for the lowest pair index.
pub fn parse_relation_response(raw: &str, expected: usize) -> Result<Vec<DirectedSentencePair>, RelationParseError> {
    parse_relation_sections(raw, expected).into_iter().collect()
}

fn split_sentences(body: &str) -> Option<(String, String)> {
    let (first, second) = body.split_once('|')?;
    let s1 = strip_sentence_label(first, '1');
    let s2 = strip_sentence_label(second, '2');
    if s1.is_empty() || s2.is_empty() {
        return None;
    }
    Some((s1, s2))
}

fn strip_sentence_label(part: &str, digit: char) -> String {
    let s = part.trim().trim_matches(|c: char| c == '*' || c.is_whitespace());
    let lower = s.get(..8).map(|p| p.eq_ignore_ascii_case("sentence")).unwrap_or(false);
    let s = if lower {
        let rest = s[8..].trim_start();
        match rest.strip_prefix(digit) {
            Some(r) => r.trim_start_matches(|c: char| c == '*' || c.is_whitespace()).strip_prefix(':').unwrap_or(r),
            None => s,
        }
    } else {
        s
    };
    let s = s.trim().trim_matches(|c: char| c == '*' || c.is_whitespace());
    String::from(s.replace('\n', " ").trim())
}

const DETERMINERS: &[&str] =
    &["the", "a", "an", "this", "that", "these", "those", "another", "his", "her", "its", "their"];

const AUXILIARIES: &[&str] = &["is", "are", "was", "were"];

fn tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(normalize_label).filter(|t| !t.is_empty()).collect()
}

fn token_matches(token: &str, label: &str) -> bool {
    token == label || token.strip_suffix('s') == Some(label) || token.strip_suffix("es") == Some(label)
}

/// Length of the label mention at the front of `toks`, including a determiner.
fn leading_mention(toks: &[String], label: &[String]) -> Option<usize> {
    let start = usize::from(toks.first().is_some_and(|t| DETERMINERS.contains(&t.as_str())));
    let body = toks.get(start..start + label.len())?;
    body.iter().zip(label).all(|(t, l)| token_matches(t, l)).then_some(start + label.len())
}

/// Length of the label mention at the end of `toks`, including a determiner.
fn trailing_mention(toks: &[String], label: &[String]) -> Option<usize> {
    let start = toks.len().checked_sub(label.len())?;
    if !toks[start..].iter().zip(label).all(|(t, l)| token_matches(t, l)) {
        return None;
    }
    let det = start > 0 && DETERMINERS.contains(&toks[start - 1].as_str());
    Some(label.len() + usize::from(det))
}

/// Predicate phrase from a relation sentence such as
/// "The woman is sitting on the chair." (woman, chair) -> "sitting on".
///
/// The subject mention must open the sentence; otherwise the whole
/// (normalized) sentence is returned. A missing object mention at the end
/// leaves the remainder after the subject as the phrase.
pub fn extract_predicate(sentence: &str, subject: &str, object: &str) -> String {
    let toks = tokens(sentence);
    let whole = toks.join(" ");
    let (subj, obj) = (tokens(subject), tokens(object));
    if subj.is_empty() {
        return whole;
    }
    let Some(lead) = leading_mention(&toks, &subj) else {
        return whole;
    };
    let mut rest = &toks[lead..];
    if rest.first().is_some_and(|t| AUXILIARIES.contains(&t.as_str())) {
        rest = &rest[1..];
    }
    if !obj.is_empty() {
        if let Some(tail) = trailing_mention(rest, &obj) {
            rest = &rest[..rest.len() - tail];
        }
    }
    if rest.is_empty() {
        return whole;
    }
    rest.join(" ")
}

/// Matcher that aligns predicate phrases to a relation vocabulary (top-1).
pub fn predicate_matcher(relations: &[String], cfg: &MappingConfig) -> LabelMatcher {
    let params = ScoringParams { tau: cfg.tau_softmax, delta: cfg.delta, k: 1 };
    LabelMatcher::new(relations, params, SentenceTemplate::Predicate)
}

/// Align one phrase; an exact normalized match scores 1.0.
pub fn map_predicate<T: TextEncoder>(
    matcher: &mut LabelMatcher,
    phrase: &str,
    encoder: &T,
) -> Result<PredicateCandidate, MappingError<T::Error>> {
    let entity = PredictedEntity { raw: String::from(phrase), normalized: normalize_label(phrase) };
    let result = matcher.map_entity(&entity, encoder)?;
    let (mapped, map_score) = result.matches.into_iter().next().ok_or(MappingError::MappingEmpty)?;
    Ok(PredicateCandidate { phrase: String::from(phrase), mapped, map_score })
}

/// One directed sentence resolved to a vocabulary predicate.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectedPredicate {
    pub sentence: String,
    pub predicate: PredicateCandidate,
}

/// Relation-stage outcome for one selected pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairOutcome {
    pub pair_id: usize,
    pub pair: CandidatePair,
    pub forward: Option<DirectedPredicate>,
    pub reverse: Option<DirectedPredicate>,
}

/// Emit up to two triplets per pair, scored by
/// `exp(fused) * map_score * det_subject * det_object`, sorted by descending
/// score with ties broken by `(pair_id, direction)`.
pub fn assemble_triplets(outcomes: &[PairOutcome], instances: &[ObjectInstance]) -> Vec<TripletPrediction> {
    let mut triplets = Vec::with_capacity(outcomes.len() * 2);
    for outcome in outcomes {
        let (a, b) = (&instances[outcome.pair.i], &instances[outcome.pair.j]);
        let pair_weight = libm::exp(outcome.pair.fused_score);
        for (direction, directed, subject, object) in
            [(Direction::Forward, &outcome.forward, a, b), (Direction::Reverse, &outcome.reverse, b, a)]
        {
            let Some(d) = directed else { continue };
            triplets.push(TripletPrediction {
                subject: subject.clone(),
                object: object.clone(),
                predicate: d.predicate.mapped.clone(),
                score: pair_weight * d.predicate.map_score * subject.det_score * object.det_score,
                pair_id: outcome.pair_id,
                direction,
                raw_sentence: d.sentence.clone(),
            });
        }
    }
    sort_triplets(&mut triplets);
    triplets
}

/// Canonical ranking order for predictions.
pub fn sort_triplets(triplets: &mut [TripletPrediction]) {
    triplets.sort_by(|x, y| {
        y.score.total_cmp(&x.score).then(x.pair_id.cmp(&y.pair_id)).then(x.direction.cmp(&y.direction))
    });
}
