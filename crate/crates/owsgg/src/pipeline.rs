//! Stage runner: executes the pipeline stages over a manifest, one image
//! per worker, and keeps one JSON-Lines record per image and stage.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use owsgg_core::detection::{self, DetectionError, RawDetection};
use owsgg_core::mapping::{self, LabelMatcher, MappingError, MatchMethod, ScoringParams, SentenceTemplate};
use owsgg_core::metrics::{self, MatchConfig, PairCounts};
use owsgg_core::model::Task;
use owsgg_core::refine::{self, CandidatePair, LabelPairScores, PairMatrixBundle};
use owsgg_core::relation::{self, DirectedPredicate, DirectedSentencePair, PairOutcome, RelationParseError};
use owsgg_core::{
    BoundingBox, Direction, GroundTruthGraph, ObjectInstance, PipelineConfig, TripletPrediction, VocabularyProfile,
};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::backends::{BackendError, CachedBackend, ChatRequest, DetectionRequest, Stage, StageEncoder};
use crate::io::{append_jsonl, read_jsonl, write_json, write_jsonl};
use crate::report::{build_report, write_report};

/// Directory (inside the cache dir) holding one JSONL file per stage.
pub const STAGES_DIR: &str = "stages";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const ERRORS_FILE: &str = "errors.jsonl";
pub const RUN_FILE: &str = "run.json";
pub const SPLITS_FILE: &str = "splits.json";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Input(#[from] crate::io::IoError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    /// The stage ran but produced nothing usable (e.g. no entity detected).
    Empty,
    /// The stage does not apply to the configured task.
    Skipped,
}

/// One image's output of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub image_id: String,
    pub stage: Stage,
    pub config_hash: String,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(flatten)]
    pub data: Map<String, Value>,
}

impl StageRecord {
    pub fn decode<T: DeserializeOwned>(&self) -> Result<T, Failure> {
        serde_json::from_value(Value::Object(self.data.clone()))
            .map_err(|e| Failure::new("InvalidRecord", format!("{} record: {e}", self.stage)))
    }
}

/// A hard per-image failure, written to `errors.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub kind: String,
    pub message: String,
}

impl Failure {
    fn new(kind: &str, message: impl Into<String>) -> Self {
        Failure { kind: kind.into(), message: message.into() }
    }
}

impl From<BackendError> for Failure {
    fn from(e: BackendError) -> Self {
        let kind = match &e {
            BackendError::BackendUnavailable(_) => "BackendUnavailable",
            BackendError::MalformedResponse(_) => "MalformedResponse",
            BackendError::ReplayMiss { .. } => "ReplayMiss",
            BackendError::DimensionMismatch => "DimensionMismatch",
            BackendError::InvalidRequest(_) => "InvalidRequest",
            BackendError::Cache(_) => "CacheError",
        };
        Failure::new(kind, e.to_string())
    }
}

fn mapping_failure(e: MappingError<BackendError>) -> Failure {
    match e {
        MappingError::Encoder(b) => b.into(),
        other => Failure::new("MappingError", other.to_string()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub image_id: String,
    pub stage: Stage,
    #[serde(flatten)]
    pub failure: Failure,
}

enum Outcome {
    Ok(Map<String, Value>),
    Empty(String),
    Skipped,
}

fn ok<T: Serialize>(data: &T) -> Outcome {
    match serde_json::to_value(data).expect("stage data serializes") {
        Value::Object(m) => Outcome::Ok(m),
        _ => unreachable!("stage data is a struct"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntitiesData {
    pub entities: Vec<String>,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityMatch {
    pub entity: String,
    pub method: String,
    pub matches: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapData {
    pub mapped: Vec<String>,
    pub matches: Vec<EntityMatch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredInstance {
    pub label: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectData {
    pub instances: Vec<StoredInstance>,
}

impl DetectData {
    pub fn to_instances(&self, g: &GroundTruthGraph) -> Result<Vec<ObjectInstance>, Failure> {
        let rows = self
            .instances
            .iter()
            .map(|s| {
                BoundingBox::try_from(s.bbox)
                    .map(|b| (s.label.clone(), b, s.score, s.origin))
                    .map_err(|e| Failure::new("InvalidRecord", e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(detection::from_stored(&g.image, rows).instances)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub a: String,
    pub b: String,
    pub score: u8,
    /// True when the score is the neutral default after failed parses.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub i: usize,
    pub j: usize,
    pub ps: f64,
    pub pg: f64,
    pub fused: f64,
}

impl PairRow {
    fn candidate(&self) -> CandidatePair {
        CandidatePair {
            i: self.i,
            j: self.j,
            fused_score: self.fused,
            semantic_score: self.ps,
            geometric_score: self.pg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineData {
    pub depths: Vec<f64>,
    pub label_scores: Vec<LabelScore>,
    pub pairs: Vec<PairRow>,
    pub selected: Vec<[usize; 2]>,
}

/// A triplet as written to the prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletRow {
    pub s_idx: usize,
    pub o_idx: usize,
    pub s_label: String,
    pub o_label: String,
    pub s_box: [f64; 4],
    pub o_box: [f64; 4],
    pub predicate: String,
    pub score: f64,
    pub pair_id: usize,
    pub direction: Direction,
    pub sentence: String,
}

impl TripletRow {
    fn from_prediction(t: &TripletPrediction) -> Self {
        TripletRow {
            s_idx: t.subject.index,
            o_idx: t.object.index,
            s_label: t.subject.label.clone(),
            o_label: t.object.label.clone(),
            s_box: t.subject.bbox.to_array(),
            o_box: t.object.bbox.to_array(),
            predicate: t.predicate.clone(),
            score: t.score,
            pair_id: t.pair_id,
            direction: t.direction,
            sentence: t.raw_sentence.clone(),
        }
    }

    fn to_prediction(&self, instances: &[ObjectInstance]) -> Result<TripletPrediction, Failure> {
        let get = |k: usize| {
            instances
                .get(k)
                .cloned()
                .ok_or_else(|| Failure::new("InvalidRecord", format!("triplet references instance {k}")))
        };
        Ok(TripletPrediction {
            subject: get(self.s_idx)?,
            object: get(self.o_idx)?,
            predicate: self.predicate.clone(),
            score: self.score,
            pair_id: self.pair_id,
            direction: self.direction,
            raw_sentence: self.sentence.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelateData {
    pub triplets: Vec<TripletRow>,
    /// Selected pairs whose sentences could not be parsed after the retry.
    pub unparsed_pairs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalData {
    pub predicates: Vec<String>,
    pub rank: Vec<Option<usize>>,
    pub pairs: PairCounts,
}

/// Prediction file line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub image_id: String,
    pub triplets: Vec<TripletRow>,
}

fn sha256_json(v: &Value) -> String {
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

/// Hash of every setting that influences `stage` or any stage before it.
pub fn stage_hash(cfg: &PipelineConfig, vocab: &VocabularyProfile, stage: Stage) -> String {
    let mut parts = Map::new();
    for s in Stage::ALL {
        let part = match s {
            Stage::Entities => json!({
                "task": cfg.task,
                "dataset": cfg.dataset,
                "entity_prompt": cfg.entity_prompt,
                "sampling": cfg.sampling,
                "chat_model": cfg.models.chat,
            }),
            Stage::Map => json!({
                "mapping": cfg.mapping,
                "embed_model": cfg.models.embed,
                "objects": vocab.objects(),
                "relations": vocab.relations(),
            }),
            Stage::Detect => json!({ "detector": cfg.detector, "detect_model": cfg.models.detect }),
            Stage::Refine => json!({
                "geometry": cfg.geometry,
                "fusion": cfg.fusion,
                "depth_model": cfg.models.depth,
            }),
            Stage::Relate => json!({ "coordinate_style": cfg.coordinate_style }),
            Stage::Eval => json!({ "eval": cfg.eval, "vocab": vocab }),
        };
        parts.insert(s.as_str().to_string(), part);
        if s == stage {
            break;
        }
    }
    sha256_json(&Value::Object(parts))
}

/// Stage record files under `cache/stages`.
#[derive(Debug, Clone)]
pub struct StageStore {
    dir: PathBuf,
}

impl StageStore {
    pub fn new(cache_dir: &Path) -> Self {
        StageStore { dir: cache_dir.join(STAGES_DIR) }
    }

    pub fn path(&self, stage: Stage) -> PathBuf {
        self.dir.join(format!("{stage}.jsonl"))
    }

    /// Latest record per image carrying `hash`, or every latest record when
    /// `hash` is `None`.
    pub fn load(&self, stage: Stage, hash: Option<&str>) -> Result<HashMap<String, StageRecord>, PipelineError> {
        let path = self.path(stage);
        if !path.exists() {
            return Ok(HashMap::new());
        }
        let mut out = HashMap::new();
        for rec in read_jsonl::<StageRecord>(&path)? {
            if hash.is_none_or(|h| rec.config_hash == h) {
                out.insert(rec.image_id.clone(), rec);
            }
        }
        Ok(out)
    }

    /// Latest record per image, in order of each image's first appearance.
    pub fn load_ordered(&self, stage: Stage) -> Result<Vec<StageRecord>, PipelineError> {
        let path = self.path(stage);
        if !path.exists() {
            return Ok(Vec::new());
        }
        let mut out: Vec<StageRecord> = Vec::new();
        let mut position: HashMap<String, usize> = HashMap::new();
        for rec in read_jsonl::<StageRecord>(&path)? {
            match position.get(&rec.image_id) {
                Some(&k) => out[k] = rec,
                None => {
                    position.insert(rec.image_id.clone(), out.len());
                    out.push(rec);
                }
            }
        }
        Ok(out)
    }

    pub fn append(&self, stage: Stage, records: &[StageRecord]) -> std::io::Result<()> {
        append_jsonl(&self.path(stage), records)
    }
}

/// Counts for one executed stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: Option<Stage>,
    pub config_hash: String,
    /// Images that already had a record and were not re-run.
    pub cached: usize,
    pub ok: usize,
    pub empty: usize,
    pub skipped: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub images: usize,
    pub stages: Vec<StageSummary>,
    pub errors: Vec<ErrorRecord>,
    pub live_calls: usize,
}

impl RunSummary {
    pub fn success(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Which stages `run` executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSelection {
    One(Stage),
    All,
}

impl StageSelection {
    pub fn parse(name: &str) -> Option<Self> {
        if name == "all" {
            return Some(StageSelection::All);
        }
        Stage::ALL.into_iter().find(|s| s.as_str() == name).map(StageSelection::One)
    }
}

pub struct Pipeline {
    cfg: PipelineConfig,
    vocab: VocabularyProfile,
    graphs: Vec<GroundTruthGraph>,
    backend: Arc<CachedBackend>,
    cache_dir: PathBuf,
    store: StageStore,
    pool: rayon::ThreadPool,
    entity_matcher: LabelMatcher,
    predicate_matcher: LabelMatcher,
}

type PriorRecords = HashMap<Stage, HashMap<String, StageRecord>>;

impl Pipeline {
    pub fn new(
        cfg: PipelineConfig,
        vocab: VocabularyProfile,
        graphs: Vec<GroundTruthGraph>,
        backend: Arc<CachedBackend>,
        cache_dir: &Path,
    ) -> Result<Self, PipelineError> {
        cfg.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.concurrency.max_in_flight)
            .build()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        fs::create_dir_all(cache_dir)?;
        let params = ScoringParams { tau: cfg.mapping.tau_softmax, delta: cfg.mapping.delta, k: cfg.mapping.top_k_map };
        let entity_matcher = LabelMatcher::new(vocab.objects(), params, SentenceTemplate::Entity);
        let predicate_matcher = relation::predicate_matcher(vocab.relations(), &cfg.mapping);
        Ok(Pipeline {
            cfg,
            vocab,
            graphs,
            backend,
            cache_dir: cache_dir.to_path_buf(),
            store: StageStore::new(cache_dir),
            pool,
            entity_matcher,
            predicate_matcher,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn store(&self) -> &StageStore {
        &self.store
    }

    pub fn hash(&self, stage: Stage) -> String {
        stage_hash(&self.cfg, &self.vocab, stage)
    }

    pub fn run(&self, selection: StageSelection) -> Result<RunSummary, PipelineError> {
        let stages: Vec<Stage> = match selection {
            StageSelection::One(s) => vec![s],
            StageSelection::All => Stage::ALL.to_vec(),
        };
        let mut summary = RunSummary { images: self.graphs.len(), ..Default::default() };
        let mut failed: HashSet<String> = HashSet::new();
        for stage in stages {
            let (s, errors) = self.run_stage(stage, &failed)?;
            failed.extend(errors.iter().map(|e| e.image_id.clone()));
            summary.stages.push(s);
            summary.errors.extend(errors);
        }
        append_jsonl(&self.cache_dir.join(ERRORS_FILE), &summary.errors)?;
        summary.live_calls = self.backend.live_calls();
        write_json(
            &self.cache_dir.join(RUN_FILE),
            &json!({
                "stages": summary.stages,
                "images": summary.images,
                "errors": summary.errors.len(),
                "live_calls": summary.live_calls,
                "config": self.cfg,
            }),
        )?;
        Ok(summary)
    }

    fn run_stage(
        &self,
        stage: Stage,
        failed: &HashSet<String>,
    ) -> Result<(StageSummary, Vec<ErrorRecord>), PipelineError> {
        let hash = self.hash(stage);
        let done = self.store.load(stage, Some(&hash))?;
        let mut prior: PriorRecords = HashMap::new();
        for s in Stage::ALL.into_iter().take_while(|s| *s != stage) {
            prior.insert(s, self.store.load(s, Some(&self.hash(s)))?);
        }
        let todo: Vec<&GroundTruthGraph> =
            self.graphs.iter().filter(|g| !done.contains_key(&g.image.id) && !failed.contains(&g.image.id)).collect();
        let mut summary = StageSummary { stage: Some(stage), config_hash: hash.clone(), ..Default::default() };
        summary.cached = self.graphs.iter().filter(|g| done.contains_key(&g.image.id)).count();
        log::info!("stage {stage}: {} to run, {} cached", todo.len(), summary.cached);

        let results: Vec<Result<Outcome, Failure>> =
            self.pool.install(|| todo.par_iter().map(|g| self.process(stage, g, &prior)).collect());

        let mut records = Vec::new();
        let mut errors = Vec::new();
        for (g, result) in todo.iter().zip(results) {
            let image_id = g.image.id.clone();
            let (status, reason, data) = match result {
                Ok(Outcome::Ok(data)) => (Status::Ok, None, data),
                Ok(Outcome::Empty(reason)) => (Status::Empty, Some(reason), Map::new()),
                Ok(Outcome::Skipped) => (Status::Skipped, None, Map::new()),
                Err(failure) => {
                    log::error!("{image_id} {stage}: {}: {}", failure.kind, failure.message);
                    errors.push(ErrorRecord { image_id, stage, failure });
                    continue;
                }
            };
            match status {
                Status::Ok => summary.ok += 1,
                Status::Empty => summary.empty += 1,
                Status::Skipped => summary.skipped += 1,
            }
            records.push(StageRecord { image_id, stage, config_hash: hash.clone(), status, reason, data });
        }
        summary.failed = errors.len();
        self.store.append(stage, &records)?;
        if stage == Stage::Eval {
            self.write_outputs(&prior)?;
        }
        Ok((summary, errors))
    }

    fn process(&self, stage: Stage, g: &GroundTruthGraph, prior: &PriorRecords) -> Result<Outcome, Failure> {
        let get = |s: Stage| -> Result<&StageRecord, Failure> {
            prior.get(&s).and_then(|m| m.get(&g.image.id)).ok_or_else(|| {
                Failure::new("OrderingError", format!("no current {s} record; run `{s}` before `{stage}`"))
            })
        };
        if let Some(prev) = stage.previous() {
            let rec = get(prev)?;
            if rec.status == Status::Empty && stage != Stage::Eval {
                return Ok(Outcome::Empty(rec.reason.clone().unwrap_or_default()));
            }
        }
        match stage {
            Stage::Entities => self.entities(g),
            Stage::Map => self.map(get(Stage::Entities)?),
            Stage::Detect => self.detect(g, get(Stage::Map)?),
            Stage::Refine => self.refine(g, get(Stage::Detect)?),
            Stage::Relate => self.relate(g, get(Stage::Detect)?, get(Stage::Refine)?),
            Stage::Eval => self.eval(g, get(Stage::Detect)?, get(Stage::Refine)?, get(Stage::Relate)?),
        }
    }

    fn chat(&self, stage: Stage, g: &GroundTruthGraph, prompt: String, attempt: u32) -> Result<String, Failure> {
        let req = ChatRequest { image: Some(g.image.clone()), prompt, sampling: self.cfg.sampling.clone() };
        Ok(self.backend.chat(stage, &req, attempt)?)
    }

    fn entities(&self, g: &GroundTruthGraph) -> Result<Outcome, Failure> {
        if self.cfg.task == Task::Predcls {
            return Ok(Outcome::Skipped);
        }
        let prompt = mapping::build_entity_prompt::<BackendError>(self.cfg.dataset, self.cfg.entity_prompt.as_deref())
            .map_err(mapping_failure)?;
        let response = self.chat(Stage::Entities, g, prompt, 0)?;
        match mapping::parse_entity_list::<BackendError>(&response) {
            Ok(list) => Ok(ok(&EntitiesData { entities: list.into_iter().map(|e| e.raw).collect(), response })),
            Err(MappingError::EmptyEntityList) => Ok(Outcome::Empty("EmptyEntityList".into())),
            Err(e) => Err(mapping_failure(e)),
        }
    }

    fn map(&self, entities: &StageRecord) -> Result<Outcome, Failure> {
        if entities.status == Status::Skipped {
            return Ok(Outcome::Skipped);
        }
        let data: EntitiesData = entities.decode()?;
        let parsed = mapping::parse_entity_list::<BackendError>(&data.entities.join("\n")).map_err(mapping_failure)?;
        let encoder = StageEncoder { backend: &self.backend, stage: Stage::Map };
        let mut matcher = self.entity_matcher.clone();
        let mut matches = Vec::with_capacity(parsed.len());
        let mut hit = vec![false; self.vocab.objects().len()];
        for entity in &parsed {
            let r = matcher.map_entity(entity, &encoder).map_err(mapping_failure)?;
            for (label, _) in &r.matches {
                if let Some(i) = self.vocab.object_index(label) {
                    hit[i] = true;
                }
            }
            matches.push(EntityMatch {
                entity: r.entity.normalized.clone(),
                method: match r.method {
                    MatchMethod::Exact => "exact".into(),
                    MatchMethod::Semantic => "semantic".into(),
                },
                matches: r.matches,
            });
        }
        let mapped: Vec<String> =
            self.vocab.objects().iter().zip(&hit).filter(|(_, h)| **h).map(|(l, _)| l.clone()).collect();
        if mapped.is_empty() {
            return Ok(Outcome::Empty("MappingEmpty".into()));
        }
        Ok(ok(&MapData { mapped, matches }))
    }

    fn detect(&self, g: &GroundTruthGraph, map: &StageRecord) -> Result<Outcome, Failure> {
        let set = if self.cfg.task == Task::Predcls {
            detection::ground_truth_set(g, &self.vocab)
        } else {
            let data: MapData = map.decode()?;
            let categories = detection::dedup_categories(&data.mapped);
            let per_category: Vec<(String, Vec<RawDetection>)> = categories
                .par_iter()
                .map(|label| {
                    let req = DetectionRequest {
                        image: g.image.clone(),
                        label: label.clone(),
                        box_threshold: self.cfg.detector.box_threshold,
                        text_threshold: self.cfg.detector.text_threshold,
                    };
                    self.backend.detect(&req).map(|d| (label.clone(), d))
                })
                .collect::<Result<_, _>>()?;
            detection::assemble_detections(
                &g.image,
                &per_category,
                &self.vocab,
                self.cfg.detector.box_threshold,
                self.cfg.detector.max_instances_per_label,
            )
        };
        match set {
            Ok(set) => Ok(ok(&DetectData {
                instances: set
                    .instances
                    .iter()
                    .map(|i| StoredInstance {
                        label: i.label.clone(),
                        bbox: i.bbox.to_array(),
                        score: i.det_score,
                        origin: i.origin,
                    })
                    .collect(),
            })),
            Err(DetectionError::AllEntitiesAbsent) => Ok(Outcome::Empty("AllEntitiesAbsent".into())),
            Err(e) => Err(Failure::new("DetectionError", e.to_string())),
        }
    }

    /// Label-pair scores, chunk by chunk. A malformed answer is asked again
    /// once; pairs still unreadable after that get the neutral score.
    fn semantic_scores(&self, g: &GroundTruthGraph, pairs: &[(String, String)]) -> Result<Vec<LabelScore>, Failure> {
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(refine::PAIRS_PER_PROMPT) {
            let prompt =
                refine::build_semantic_prompt(chunk).map_err(|e| Failure::new("RefineError", e.to_string()))?;
            let first = self.chat(Stage::Refine, g, prompt.clone(), 0)?;
            let scores: Vec<Option<u8>> = match refine::parse_pair_scores(&first, chunk.len()) {
                Ok(s) => s.into_iter().map(Some).collect(),
                Err(e) => {
                    log::warn!("{}: pair scores unreadable ({e:?}), asking again", g.image.id);
                    let second = self.chat(Stage::Refine, g, prompt, 1)?;
                    match refine::parse_pair_scores(&second, chunk.len()) {
                        Ok(s) => s.into_iter().map(Some).collect(),
                        Err(_) => refine::parse_pair_scores_lenient(&second, chunk.len())
                            .into_iter()
                            .zip(refine::parse_pair_scores_lenient(&first, chunk.len()))
                            .map(|(b, a)| b.or(a))
                            .collect(),
                    }
                }
            };
            for ((a, b), s) in chunk.iter().zip(scores) {
                out.push(LabelScore {
                    a: a.clone(),
                    b: b.clone(),
                    score: s.unwrap_or(refine::FALLBACK_PAIR_SCORE),
                    fallback: s.is_none(),
                });
            }
        }
        Ok(out)
    }

    fn refine(&self, g: &GroundTruthGraph, detect: &StageRecord) -> Result<Outcome, Failure> {
        let instances = detect.decode::<DetectData>()?.to_instances(g)?;
        if instances.len() < 2 {
            return Ok(Outcome::Empty("fewer than two instances".into()));
        }
        let depth = self.backend.depth(&g.image)?;
        let depths: Vec<f64> = instances.iter().map(|i| depth.median_in_box(&i.bbox)).collect();
        let label_scores = self.semantic_scores(g, &refine::label_pairs(&instances))?;
        let mut table = LabelPairScores::new();
        for s in &label_scores {
            table.insert(&s.a, &s.b, s.score);
        }
        let refine_err = |e: refine::RefineError| Failure::new("RefineError", e.to_string());
        let semantic = refine::semantic_matrix(&table, &instances).map_err(refine_err)?;
        let bundle =
            PairMatrixBundle::build(&instances, &depths, &g.image, semantic, &self.cfg.geometry, self.cfg.fusion.alpha)
                .map_err(refine_err)?;
        let row = |p: &CandidatePair| PairRow {
            i: p.i,
            j: p.j,
            ps: p.semantic_score,
            pg: p.geometric_score,
            fused: p.fused_score,
        };
        Ok(ok(&RefineData {
            depths,
            label_scores,
            pairs: bundle.all_pairs().iter().map(row).collect(),
            selected: bundle.select_top_k(self.cfg.fusion.top_k_pairs).iter().map(|p| [p.i, p.j]).collect(),
        }))
    }

    /// Sentence pairs for one chunk. Pairs missing or unsplittable in the
    /// first answer are taken from a second one.
    fn relation_sentences(
        &self,
        g: &GroundTruthGraph,
        chunk: &[CandidatePair],
        instances: &[ObjectInstance],
    ) -> Result<Vec<Option<DirectedSentencePair>>, Failure> {
        let prompt = relation::build_relation_prompt(chunk, instances, &g.image, self.cfg.coordinate_style)
            .expect("chunk is non-empty");
        let first = relation::parse_relation_sections(&self.chat(Stage::Relate, g, prompt.clone(), 0)?, chunk.len());
        if first.iter().all(Result::is_ok) {
            return Ok(first.into_iter().map(Result::ok).collect());
        }
        let bad: Vec<&RelationParseError> = first.iter().filter_map(|r| r.as_ref().err()).collect();
        log::warn!("{}: {} relation pairs unreadable ({:?}), asking again", g.image.id, bad.len(), bad.first());
        let second = relation::parse_relation_sections(&self.chat(Stage::Relate, g, prompt, 1)?, chunk.len());
        Ok(first.into_iter().zip(second).map(|(a, b)| a.ok().or(b.ok())).collect())
    }

    fn relate(&self, g: &GroundTruthGraph, detect: &StageRecord, refine: &StageRecord) -> Result<Outcome, Failure> {
        let instances = detect.decode::<DetectData>()?.to_instances(g)?;
        let data: RefineData = refine.decode()?;
        let rows: HashMap<(usize, usize), &PairRow> = data.pairs.iter().map(|r| ((r.i, r.j), r)).collect();
        let selected: Vec<CandidatePair> = data
            .selected
            .iter()
            .map(|[i, j]| {
                rows.get(&(*i, *j))
                    .map(|r| r.candidate())
                    .ok_or_else(|| Failure::new("InvalidRecord", format!("selected pair ({i}, {j}) has no scores")))
            })
            .collect::<Result<_, _>>()?;
        let encoder = StageEncoder { backend: &self.backend, stage: Stage::Relate };
        let mut matcher = self.predicate_matcher.clone();
        let mut outcomes = Vec::with_capacity(selected.len());
        let mut unparsed = Vec::new();
        for (c, chunk) in selected.chunks(relation::PAIRS_PER_PROMPT).enumerate() {
            let sentences = self.relation_sentences(g, chunk, &instances)?;
            for (k, (pair, sp)) in chunk.iter().zip(sentences).enumerate() {
                let pair_id = c * relation::PAIRS_PER_PROMPT + k;
                let Some(sp) = sp else {
                    unparsed.push(pair_id);
                    continue;
                };
                let (a, b) = (&instances[pair.i], &instances[pair.j]);
                let mut resolve = |sentence: &str, subj: &str, obj: &str| -> Result<DirectedPredicate, Failure> {
                    let phrase = relation::extract_predicate(sentence, subj, obj);
                    let predicate =
                        relation::map_predicate(&mut matcher, &phrase, &encoder).map_err(mapping_failure)?;
                    Ok(DirectedPredicate { sentence: sentence.to_string(), predicate })
                };
                let forward = resolve(&sp.s1, &a.label, &b.label)?;
                let reverse = resolve(&sp.s2, &b.label, &a.label)?;
                outcomes.push(PairOutcome { pair_id, pair: *pair, forward: Some(forward), reverse: Some(reverse) });
            }
        }
        let triplets = relation::assemble_triplets(&outcomes, &instances);
        Ok(ok(&RelateData {
            triplets: triplets.iter().map(TripletRow::from_prediction).collect(),
            unparsed_pairs: unparsed,
        }))
    }

    fn match_config(&self) -> Result<MatchConfig, Failure> {
        MatchConfig::new(self.cfg.task, &self.cfg.eval).map_err(|e| Failure::new("MetricsError", format!("{e:?}")))
    }

    fn eval(
        &self,
        g: &GroundTruthGraph,
        detect: &StageRecord,
        refine: &StageRecord,
        relate: &StageRecord,
    ) -> Result<Outcome, Failure> {
        let cfg = self.match_config()?;
        let instances = match detect.status {
            Status::Ok => detect.decode::<DetectData>()?.to_instances(g)?,
            _ => Vec::new(),
        };
        let preds = match relate.status {
            Status::Ok => relate
                .decode::<RelateData>()?
                .triplets
                .iter()
                .map(|t| t.to_prediction(&instances))
                .collect::<Result<Vec<_>, _>>()?,
            _ => Vec::new(),
        };
        let selected: Vec<(usize, usize)> = match refine.status {
            Status::Ok => refine.decode::<RefineData>()?.selected.iter().map(|[i, j]| (*i, *j)).collect(),
            _ => Vec::new(),
        };
        let m = metrics::match_triplets(&preds, g, &cfg);
        let pairs = metrics::pair_counts(&selected, &instances, g, &cfg);
        Ok(ok(&EvalData { predicates: m.predicates, rank: m.rank, pairs }))
    }

    /// Prediction file, split manifest and report, from the current records.
    fn write_outputs(&self, prior: &PriorRecords) -> Result<(), PipelineError> {
        let relate = &prior[&Stage::Relate];
        let mut lines = Vec::new();
        for g in &self.graphs {
            let Some(rec) = relate.get(&g.image.id) else { continue };
            let triplets = match rec.status {
                Status::Ok => rec.decode::<RelateData>().map(|d| d.triplets).unwrap_or_default(),
                _ => Vec::new(),
            };
            lines.push(PredictionLine { image_id: g.image.id.clone(), triplets });
        }
        write_jsonl(&self.cache_dir.join(PREDICTIONS_FILE), &lines)?;

        let splits = owsgg_core::taxonomy::partition(&self.graphs, &self.vocab)
            .map_err(|e| PipelineError::Config(format!("split classification: {e}")))?;
        write_json(&self.cache_dir.join(SPLITS_FILE), &json!({ "split": splits.manifest() }))?;

        let evals = self.store.load(Stage::Eval, Some(&self.hash(Stage::Eval)))?;
        let ordered: Vec<&StageRecord> = self.graphs.iter().filter_map(|g| evals.get(&g.image.id)).collect();
        let cfg = self.match_config().map_err(|f| PipelineError::Config(f.message))?;
        let report = build_report(&ordered, &splits, &cfg, self.graphs.len())?;
        write_report(&self.cache_dir, &report)?;
        Ok(())
    }
}
