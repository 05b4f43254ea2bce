//! Evaluation report assembly and the JSON/CSV writers.

use std::collections::BTreeMap;
use std::path::Path;

use owsgg_core::metrics::{self, ImageMatches, MatchConfig, PairCounts, Prf};
use owsgg_core::model::{Averaging, Task};
use owsgg_core::taxonomy::{SplitIndex, SplitSelector};
use serde::ser::SerializeMap;
use serde::{Serialize, Serializer};

use crate::io::write_json;
use crate::pipeline::{EvalData, PipelineError, StageRecord};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitMetrics {
    /// Ground-truth triplets in the split.
    pub gt: usize,
    #[serde(rename = "R")]
    pub recall: BTreeMap<usize, f64>,
    #[serde(rename = "mR")]
    pub mean_recall: BTreeMap<usize, f64>,
}

/// Splits in report order; serialized as a JSON object.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitTable(pub Vec<(String, SplitMetrics)>);

impl Serialize for SplitTable {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.0.len()))?;
        for (k, v) in &self.0 {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

impl SplitTable {
    pub fn get(&self, name: &str) -> Option<&SplitMetrics> {
        self.0.iter().find(|(k, _)| k == name).map(|(_, v)| v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub task: Task,
    pub averaging: Averaging,
    pub images: usize,
    pub images_evaluated: usize,
    /// Splits without ground truth are absent.
    pub splits: SplitTable,
    pub pair_refinement: Prf,
}

/// Report over the given eval records (in manifest order).
pub fn build_report(
    records: &[&StageRecord],
    splits: &SplitIndex,
    cfg: &MatchConfig,
    images: usize,
) -> Result<Report, PipelineError> {
    let mut matches = Vec::with_capacity(records.len());
    let mut pairs = PairCounts::default();
    for rec in records {
        let data: EvalData = rec.decode().map_err(|f| PipelineError::Config(f.message))?;
        pairs.add(data.pairs);
        matches.push(ImageMatches { image_id: rec.image_id.clone(), predicates: data.predicates, rank: data.rank });
    }
    let mut table = Vec::new();
    for selector in SplitSelector::REPORTED {
        let Some(r) = metrics::split_filtered_report(&matches, splits, selector, cfg) else { continue };
        let gt = matches
            .iter()
            .flat_map(|m| (0..m.gt_count()).map(move |k| (m.image_id.as_str(), k)))
            .filter(|(id, k)| selector == SplitSelector::All || splits.get(id, *k).is_some_and(|l| selector.accepts(l)))
            .count();
        table.push((selector.name().to_string(), SplitMetrics { gt, recall: r.per_k, mean_recall: r.mean_per_k }));
    }
    Ok(Report {
        task: cfg.task,
        averaging: cfg.averaging,
        images,
        images_evaluated: matches.len(),
        splits: SplitTable(table),
        pair_refinement: pairs.prf(),
    })
}

/// Flat `split,metric,k,value` rows.
pub fn report_csv(report: &Report) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["split", "metric", "k", "value"])?;
    for (name, m) in &report.splits.0 {
        for (metric, values) in [("R", &m.recall), ("mR", &m.mean_recall)] {
            for (k, v) in values {
                w.write_record([name.as_str(), metric, &k.to_string(), &v.to_string()])?;
            }
        }
    }
    let p = report.pair_refinement;
    for (metric, v) in [("P", p.precision), ("R", p.recall), ("F1", p.f1)] {
        w.write_record(["pair_refinement", metric, "", &v.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_report(dir: &Path, report: &Report) -> Result<(), PipelineError> {
    write_json(&dir.join(REPORT_JSON), report)?;
    let text = report_csv(report).map_err(|e| PipelineError::Config(e.to_string()))?;
    std::fs::write(dir.join(REPORT_CSV), text)?;
    Ok(())
}
