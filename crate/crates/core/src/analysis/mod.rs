//! Linear probability models of per-item correctness on the design flags,
//! the effect plot, and the results table.

mod ols;
mod plot;
mod table;

pub use ols::{ols, DesignMatrix, OlsFit, MAIN_EFFECTS};
pub use plot::render_effect_plot;
pub use table::{render_results_table, ResultsTable, TableRow};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::BenchmarkName;
use crate::eval::{read_records, records_path, summary_path, EvalError, EvalRecord, MetricSummary};
use crate::train::{Cell, MatrixIndex, RunManifest, TrainError, MANIFEST_FILE};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.96;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("design matrix is singular; collinear columns: {}", columns.join(", "))]
    Singular { columns: Vec<String> },
    #[error("input error: {0}")]
    Input(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectTerm {
    pub name: String,
    /// Change in the probability of a correct answer.
    pub beta: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub benchmark: BenchmarkName,
    pub n: usize,
    pub r_squared: f64,
    pub terms: Vec<EffectTerm>,
}

impl EffectEstimate {
    pub fn term(&self, name: &str) -> Option<&EffectTerm> {
        self.terms.iter().find(|t| t.name == name)
    }
}

/// effects.json: the estimates plus how they were computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectsReport {
    pub model: String,
    pub standard_errors: String,
    pub ci_level: f64,
    pub baseline: String,
    pub interactions: bool,
    pub note: String,
    pub estimates: Vec<EffectEstimate>,
}

/// One OLS fit per benchmark, in benchmark order.
pub fn fit_effects(records: &[EvalRecord], interactions: bool) -> Result<Vec<EffectEstimate>, AnalysisError> {
    if records.is_empty() {
        return Err(AnalysisError::Input("no records to analyze".into()));
    }
    let mut groups: BTreeMap<BenchmarkName, Vec<EvalRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.benchmark).or_default().push(r.clone());
    }
    groups
        .into_iter()
        .map(|(benchmark, recs)| {
            let design = DesignMatrix::from_records(&recs, interactions);
            let fit = ols(&design).map_err(|e| match e {
                AnalysisError::Singular { columns } => AnalysisError::Singular {
                    columns: columns.into_iter().map(|c| format!("{benchmark}/{c}")).collect(),
                },
                other => other,
            })?;
            let terms = design
                .columns
                .iter()
                .zip(fit.beta.iter().zip(&fit.se))
                .map(|(name, (&beta, &se))| EffectTerm {
                    name: name.clone(),
                    beta,
                    se,
                    ci_low: beta - Z95 * se,
                    ci_high: beta + Z95 * se,
                })
                .collect();
            Ok(EffectEstimate { benchmark, n: fit.n, r_squared: fit.r_squared, terms })
        })
        .collect()
}

pub fn effects_report(estimates: Vec<EffectEstimate>, interactions: bool) -> EffectsReport {
    EffectsReport {
        model: "linear probability model fitted by ordinary least squares".into(),
        standard_errors: "classical (homoskedastic)".into(),
        ci_level: 0.95,
        baseline: "S language tower, vision variant A, connector pretrained".into(),
        interactions,
        note: "fitted probabilities are not clipped to [0, 1]".into(),
        estimates,
    }
}

/// Run directories listed in the matrix index, falling back to every
/// subdirectory holding a manifest.
pub fn run_dirs(runs_root: &Path) -> Result<Vec<PathBuf>, AnalysisError> {
    let index = MatrixIndex::load(runs_root)?;
    let mut dirs: Vec<PathBuf> = if index.runs.is_empty() {
        let mut d = Vec::new();
        for entry in fs::read_dir(runs_root)? {
            let p = entry?.path();
            if p.join(MANIFEST_FILE).exists() {
                d.push(p);
            }
        }
        d
    } else {
        index.runs.iter().map(|e| runs_root.join(&e.run_id)).collect()
    };
    dirs.sort();
    Ok(dirs)
}

pub fn load_all_records(runs_root: &Path) -> Result<Vec<EvalRecord>, AnalysisError> {
    let mut all = Vec::new();
    for dir in run_dirs(runs_root)? {
        for b in BenchmarkName::ALL {
            let p = records_path(&dir, b);
            if p.exists() {
                all.extend(read_records(&p)?);
            }
        }
    }
    Ok(all)
}

/// Fits every benchmark found under `runs_root` and writes `effects.json` and
/// `effects.png` into `out_dir`.
pub fn analyze(runs_root: &Path, out_dir: &Path, interactions: bool) -> Result<EffectsReport, AnalysisError> {
    let records = load_all_records(runs_root)?;
    let estimates = fit_effects(&records, interactions)?;
    fs::create_dir_all(out_dir)?;
    render_effect_plot(&estimates, &out_dir.join("effects.png"))?;
    let report = effects_report(estimates, interactions);
    fs::write(out_dir.join("effects.json"), serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}

const COLUMNS: [(BenchmarkName, &str, &str); 4] = [
    (BenchmarkName::ToyGqa, "accuracy", "toy-GQA"),
    (BenchmarkName::ToyPope, "accuracy", "toy-POPE Acc."),
    (BenchmarkName::ToyPope, "f1", "toy-POPE F1"),
    (BenchmarkName::ToyVqa, "accuracy", "toy-VQA"),
];

/// One row per ablation cell in canonical order; cells without a summary print `-`.
pub fn table_from_summaries(summaries: &[(Cell, Vec<MetricSummary>)]) -> ResultsTable {
    let rows = Cell::all()
        .into_iter()
        .map(|cell| {
            let found = summaries.iter().find(|(c, _)| *c == cell).map(|(_, s)| s.as_slice()).unwrap_or(&[]);
            let values = COLUMNS
                .iter()
                .map(|(b, metric, _)| {
                    let s = found.iter().find(|s| s.benchmark == *b)?;
                    if *metric == "f1" {
                        s.f1
                    } else {
                        Some(s.accuracy)
                    }
                })
                .collect();
            TableRow {
                labels: vec![
                    cell.lm.as_str().to_string(),
                    cell.vision.as_str().to_string(),
                    if cell.pretrain { "Yes" } else { "No" }.to_string(),
                ],
                values,
                reference: false,
            }
        })
        .collect();
    ResultsTable {
        label_headers: vec!["Language".into(), "Vision".into(), "Pretrain connector".into()],
        columns: COLUMNS.iter().map(|c| c.2.to_string()).collect(),
        decimals: vec![3; COLUMNS.len()],
        rows,
    }
}

/// Collects eval summaries of every run under `runs_root` and writes `results_table.md`.
pub fn report(runs_root: &Path, out_dir: &Path) -> Result<String, AnalysisError> {
    let mut summaries = Vec::new();
    for dir in run_dirs(runs_root)? {
        let manifest: RunManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
        let mut found = Vec::new();
        for b in BenchmarkName::ALL {
            let p = summary_path(&dir, b);
            if p.exists() {
                found.push(serde_json::from_slice::<MetricSummary>(&fs::read(p)?)?);
            }
        }
        summaries.push((manifest.cell(), found));
    }
    let md = render_results_table(&table_from_summaries(&summaries))?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("results_table.md"), &md)?;
    Ok(md)
}

#[cfg(test)]
mod tests;
