use serde::{Deserialize, Serialize};

use super::{EvalError, EvalRecord};
use crate::data::BenchmarkName;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub benchmark: BenchmarkName,
    pub n_items: usize,
    pub accuracy: f64,
    /// Yes/no benchmarks only, with "yes" as the positive class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Confusion counts with "yes" positive. Any prediction other than "yes"
/// counts as a negative. Precision, recall, and F1 are 0 when undefined.
pub fn f1_from_records(records: &[EvalRecord]) -> Result<BinaryMetrics, EvalError> {
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for r in records {
        let gold = match r.gold.as_str() {
            "yes" => true,
            "no" => false,
            other => {
                return Err(EvalError::Input(format!("item {} has non-binary gold answer {other:?}", r.item_id)))
            }
        };
        match (r.predicted == "yes", gold) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(BinaryMetrics { tp, fp, fn_, tn, precision, recall, f1 })
}

pub fn summarize(benchmark: BenchmarkName, records: &[EvalRecord]) -> Result<MetricSummary, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Input(format!("no records for {benchmark}")));
    }
    let correct: usize = records.iter().map(|r| r.correct as usize).sum();
    let mut s = MetricSummary {
        benchmark,
        n_items: records.len(),
        accuracy: correct as f64 / records.len() as f64,
        precision: None,
        recall: None,
        f1: None,
    };
    if benchmark.is_binary() {
        let b = f1_from_records(records)?;
        s.precision = Some(b.precision);
        s.recall = Some(b.recall);
        s.f1 = Some(b.f1);
    }
    Ok(s)
}
