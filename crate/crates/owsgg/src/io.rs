//! Dataset manifests, vocabularies, configs and JSON-Lines helpers.

use std::collections::{BTreeSet, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use owsgg_core::model::ModelError;
use owsgg_core::{
    normalize_label, BoundingBox, GroundTruthGraph, GtRelation, ImageRef, PipelineConfig, VocabularyProfile,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

impl IoError {
    fn read(path: &Path, source: std::io::Error) -> Self {
        IoError::Read { path: path.to_path_buf(), source }
    }

    fn invalid(path: &Path, message: impl Into<String>) -> Self {
        IoError::Invalid { path: path.to_path_buf(), message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestObject {
    pub label: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRelation {
    pub s: usize,
    pub o: usize,
    pub p: String,
}

/// One manifest line as written on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub path: String,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub objects: Vec<ManifestObject>,
    #[serde(default)]
    pub relations: Vec<ManifestRelation>,
}

impl ManifestRecord {
    pub fn to_graph(&self) -> Result<GroundTruthGraph, ModelError> {
        let image = ImageRef::new(&self.id, &self.path, self.width, self.height)?;
        let objects = self
            .objects
            .iter()
            .map(|o| BoundingBox::try_from(o.bbox).map(|b| (o.label.clone(), b)))
            .collect::<Result<Vec<_>, _>>()?;
        let relations =
            self.relations.iter().map(|r| GtRelation { subject: r.s, object: r.o, predicate: r.p.clone() }).collect();
        GroundTruthGraph::new(image, objects, relations)
    }

    pub fn from_graph(g: &GroundTruthGraph) -> Self {
        ManifestRecord {
            id: g.image.id.clone(),
            path: g.image.path.clone(),
            width: g.image.width,
            height: g.image.height,
            objects: g
                .objects
                .iter()
                .map(|o| ManifestObject { label: o.label.clone(), bbox: o.bbox.to_array() })
                .collect(),
            relations: g
                .relations
                .iter()
                .map(|r| ManifestRelation { s: r.subject, o: r.object, p: r.predicate.clone() })
                .collect(),
        }
    }
}

/// Read every non-blank line of a JSON-Lines file.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, IoError> {
    let file = File::open(path).map_err(|e| IoError::read(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| IoError::read(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| IoError::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

/// Write records one per line, replacing the file.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Append records one per line.
pub fn append_jsonl<T: Serialize>(path: &Path, records: &[T]) -> std::io::Result<()> {
    if records.is_empty() {
        return Ok(());
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::OpenOptions::new().create(true).append(true).open(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Pretty JSON followed by a newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)
}

pub fn load_manifest_records(path: &Path) -> Result<Vec<ManifestRecord>, IoError> {
    read_jsonl(path)
}

/// Parse a manifest into ground-truth graphs; ids must be unique.
pub fn load_manifest(path: &Path) -> Result<Vec<GroundTruthGraph>, IoError> {
    let records = load_manifest_records(path)?;
    let mut seen = HashSet::new();
    let mut graphs = Vec::with_capacity(records.len());
    for (n, r) in records.iter().enumerate() {
        if !seen.insert(r.id.clone()) {
            return Err(IoError::invalid(path, format!("duplicate image id {}", r.id)));
        }
        graphs.push(r.to_graph().map_err(|e| IoError::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?);
    }
    Ok(graphs)
}

pub fn load_vocab(path: &Path) -> Result<VocabularyProfile, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::read(path, e))?;
    serde_json::from_str(&text).map_err(|e| IoError::invalid(path, e.to_string()))
}

/// One label per line; blank lines and `#` comments are skipped.
pub fn load_label_list(path: &Path) -> Result<Vec<String>, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::read(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(normalize_label).collect())
}

/// Replace the training subsets of `vocab` with "everything not listed as
/// novel". Training triplets that use a novel label are dropped.
pub fn apply_novelty(
    vocab: &VocabularyProfile,
    novel_objects: Option<&[String]>,
    novel_relations: Option<&[String]>,
) -> Result<VocabularyProfile, String> {
    let check = |list: &[String], known: &[String], what: &str| -> Result<BTreeSet<String>, String> {
        let set: BTreeSet<String> = list.iter().cloned().collect();
        match set.iter().find(|l| !known.contains(l)) {
            Some(bad) => Err(format!("novel {what} '{bad}' is not in the vocabulary")),
            None => Ok(set),
        }
    };
    let train_objects: Vec<String> = match novel_objects {
        Some(list) => {
            let novel = check(list, vocab.objects(), "object")?;
            vocab.objects().iter().filter(|o| !novel.contains(*o)).cloned().collect()
        }
        None => vocab.train_objects().map(String::from).collect(),
    };
    let train_relations: Vec<String> = match novel_relations {
        Some(list) => {
            let novel = check(list, vocab.relations(), "relation")?;
            vocab.relations().iter().filter(|r| !novel.contains(*r)).cloned().collect()
        }
        None => vocab.train_relations().map(String::from).collect(),
    };
    let triplets: Vec<[&str; 3]> = vocab
        .train_triplets()
        .filter(|(s, o, r)| {
            train_objects.iter().any(|x| x == s)
                && train_objects.iter().any(|x| x == o)
                && train_relations.iter().any(|x| x == r)
        })
        .map(|(s, o, r)| [s, o, r])
        .collect();
    VocabularyProfile::new(
        &strs(vocab.objects()),
        &strs(vocab.relations()),
        &strs(&train_objects),
        &strs(&train_relations),
        &triplets,
    )
    .map_err(|e| e.to_string())
}

fn strs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

/// Parse a TOML pipeline config; unknown keys are errors.
pub fn parse_config(text: &str) -> Result<PipelineConfig, String> {
    let cfg: PipelineConfig = toml::from_str(text).map_err(|e| e.to_string())?;
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<PipelineConfig, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::read(path, e))?;
    parse_config(&text).map_err(|m| IoError::invalid(path, m))
}

/// A problem found by [`validate_manifest`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Diagnostic {
    ParseError { line: usize, message: String },
    DuplicateId { line: usize, image_id: String },
    BadImage { line: usize, image_id: String, message: String },
    DegenerateBox { line: usize, image_id: String, object: usize },
    BoxOutOfBounds { line: usize, image_id: String, object: usize },
    UnknownLabel { line: usize, image_id: String, label: String },
    UnknownPredicate { line: usize, image_id: String, predicate: String },
    IndexOutOfRange { line: usize, image_id: String, relation: usize, index: usize, objects: usize },
    SelfRelation { line: usize, image_id: String, relation: usize },
}

/// Check a manifest against a vocabulary. An empty result means the
/// manifest is admissible.
pub fn validate_manifest(path: &Path, vocab: &VocabularyProfile) -> Result<Vec<Diagnostic>, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::read(path, e))?;
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                out.push(Diagnostic::ParseError { line: line_no, message: e.to_string() });
                continue;
            }
        };
        let id = rec.id.clone();
        if !ids.insert(id.clone()) {
            out.push(Diagnostic::DuplicateId { line: line_no, image_id: id.clone() });
        }
        let image = ImageRef::new(&rec.id, &rec.path, rec.width, rec.height);
        if let Err(e) = &image {
            out.push(Diagnostic::BadImage { line: line_no, image_id: id.clone(), message: e.to_string() });
        }
        for (k, o) in rec.objects.iter().enumerate() {
            match BoundingBox::try_from(o.bbox) {
                Err(_) => out.push(Diagnostic::DegenerateBox { line: line_no, image_id: id.clone(), object: k }),
                Ok(b) => {
                    if let Ok(img) = &image {
                        if !b.within(img) {
                            out.push(Diagnostic::BoxOutOfBounds { line: line_no, image_id: id.clone(), object: k });
                        }
                    }
                }
            }
            let label = normalize_label(&o.label);
            if vocab.object_index(&label).is_none() {
                out.push(Diagnostic::UnknownLabel { line: line_no, image_id: id.clone(), label });
            }
        }
        for (k, r) in rec.relations.iter().enumerate() {
            for index in [r.s, r.o] {
                if index >= rec.objects.len() {
                    out.push(Diagnostic::IndexOutOfRange {
                        line: line_no,
                        image_id: id.clone(),
                        relation: k,
                        index,
                        objects: rec.objects.len(),
                    });
                }
            }
            if r.s == r.o {
                out.push(Diagnostic::SelfRelation { line: line_no, image_id: id.clone(), relation: k });
            }
            let predicate = normalize_label(&r.p);
            if vocab.relation_index(&predicate).is_none() {
                out.push(Diagnostic::UnknownPredicate { line: line_no, image_id: id.clone(), predicate });
            }
        }
    }
    Ok(out)
}
