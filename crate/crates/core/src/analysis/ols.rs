use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::eval::EvalRecord;

pub const MAIN_EFFECTS: [&str; 3] = ["skip_pretrain", "dino_like", "large_lm"];

/// Rows of 0/1 regressors with an intercept column first, and the 0/1 response.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignMatrix {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub response: Vec<f64>,
}

impl DesignMatrix {
    /// Records are sorted by (item, run) first so that sums never depend on input order.
    pub fn from_records(records: &[EvalRecord], interactions: bool) -> Self {
        let mut sorted: Vec<&EvalRecord> = records.iter().collect();
        sorted.sort_by(|a, b| a.item_id.cmp(&b.item_id).then_with(|| a.run_id.cmp(&b.run_id)));
        let mut columns = vec!["intercept".to_string()];
        columns.extend(MAIN_EFFECTS.iter().map(|s| s.to_string()));
        let pairs = [(0, 1), (0, 2), (1, 2)];
        if interactions {
            columns.extend(pairs.iter().map(|&(i, j)| format!("{}:{}", MAIN_EFFECTS[i], MAIN_EFFECTS[j])));
        }
        let rows = sorted
            .iter()
            .map(|r| {
                let f = [r.skip_pretrain as f64, r.dino_like as f64, r.large_lm as f64];
                let mut row = vec![1.0, f[0], f[1], f[2]];
                if interactions {
                    row.extend(pairs.iter().map(|&(i, j)| f[i] * f[j]));
                }
                row
            })
            .collect();
        let response = sorted.iter().map(|r| r.correct as f64).collect();
        DesignMatrix { columns, rows, response }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub beta: Vec<f64>,
    /// Classical standard errors, `sqrt(σ̂² · diag((XᵀX)⁻¹))` with `σ̂² = RSS / (n − p)`.
    pub se: Vec<f64>,
    pub n: usize,
    pub rss: f64,
    /// 0 when the response is constant.
    pub r_squared: f64,
}

/// Lower Cholesky factor of a symmetric positive definite matrix, or the first
/// column whose pivot vanishes.
fn cholesky(a: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, usize> {
    let p = a.len();
    let mut l = vec![vec![0.0; p]; p];
    for j in 0..p {
        let d = a[j][j] - (0..j).map(|k| l[j][k] * l[j][k]).sum::<f64>();
        if d <= 1e-10 * a[j][j].max(1.0) {
            return Err(j);
        }
        l[j][j] = d.sqrt();
        for i in j + 1..p {
            let s = a[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            l[i][j] = s / l[j][j];
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ x = b`.
fn cholesky_solve(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let p = b.len();
    let mut z = vec![0.0; p];
    for i in 0..p {
        z[i] = (b[i] - (0..i).map(|k| l[i][k] * z[k]).sum::<f64>()) / l[i][i];
    }
    let mut x = vec![0.0; p];
    for i in (0..p).rev() {
        x[i] = (z[i] - (i + 1..p).map(|k| l[k][i] * x[k]).sum::<f64>()) / l[i][i];
    }
    x
}

pub fn ols(design: &DesignMatrix) -> Result<OlsFit, AnalysisError> {
    let n = design.rows.len();
    let p = design.columns.len();
    if n <= p {
        return Err(AnalysisError::Input(format!("{n} observations cannot identify {p} coefficients")));
    }
    let mut xtx = vec![vec![0.0; p]; p];
    let mut xty = vec![0.0; p];
    for (row, &y) in design.rows.iter().zip(&design.response) {
        for i in 0..p {
            xty[i] += row[i] * y;
            for j in 0..p {
                xtx[i][j] += row[i] * row[j];
            }
        }
    }
    let l = cholesky(&xtx).map_err(|j| {
        // Regress column j on the earlier, independent columns to name the dependency.
        let head: Vec<Vec<f64>> = xtx[..j].iter().map(|r| r[..j].to_vec()).collect();
        let mut columns: Vec<String> = match cholesky(&head) {
            Ok(lh) => {
                let c = cholesky_solve(&lh, &xtx[j][..j]);
                c.iter().enumerate().filter(|(_, v)| v.abs() > 1e-8).map(|(k, _)| design.columns[k].clone()).collect()
            }
            Err(_) => Vec::new(),
        };
        columns.push(design.columns[j].clone());
        AnalysisError::Singular { columns }
    })?;
    let beta = cholesky_solve(&l, &xty);
    let rss: f64 = design
        .rows
        .iter()
        .zip(&design.response)
        .map(|(row, y)| {
            let fit: f64 = row.iter().zip(&beta).map(|(x, b)| x * b).sum();
            (y - fit).powi(2)
        })
        .sum();
    let mean = design.response.iter().sum::<f64>() / n as f64;
    let tss: f64 = design.response.iter().map(|y| (y - mean).powi(2)).sum();
    let sigma2 = rss / (n - p) as f64;
    let se = (0..p)
        .map(|k| {
            let mut e = vec![0.0; p];
            e[k] = 1.0;
            (sigma2 * cholesky_solve(&l, &e)[k]).max(0.0).sqrt()
        })
        .collect();
    let r_squared = if tss > 0.0 { 1.0 - rss / tss } else { 0.0 };
    Ok(OlsFit { beta, se, n, rss, r_squared })
}
