use serde::{Deserialize, Serialize};

use super::AnalysisError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    /// Leading descriptive cells, one per label header.
    pub labels: Vec<String>,
    pub values: Vec<Option<f64>>,
    /// Reference rows are printed after a separator and never highlighted.
    #[serde(default)]
    pub reference: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub label_headers: Vec<String>,
    pub columns: Vec<String>,
    /// Digits after the decimal point, per value column.
    pub decimals: Vec<usize>,
    pub rows: Vec<TableRow>,
}

impl ResultsTable {
    fn validate(&self) -> Result<(), AnalysisError> {
        if self.decimals.len() != self.columns.len() {
            return Err(AnalysisError::Input("one decimals entry per column is required".into()));
        }
        for (i, r) in self.rows.iter().enumerate() {
            if r.values.len() != self.columns.len() || r.labels.len() != self.label_headers.len() {
                return Err(AnalysisError::Input(format!("row {i} does not match the table header")));
            }
        }
        Ok(())
    }

    fn shown(&self, col: usize, v: f64) -> String {
        format!("{:.*}", self.decimals[col], v)
    }

    /// Which cells are bold: the column maximum among non-reference rows,
    /// compared at displayed precision, with ties all highlighted.
    pub fn highlights(&self) -> Result<Vec<Vec<bool>>, AnalysisError> {
        self.validate()?;
        let mut out = vec![vec![false; self.columns.len()]; self.rows.len()];
        for c in 0..self.columns.len() {
            let rounded = |v: f64| self.shown(c, v).parse::<f64>().unwrap_or(v);
            let best = self
                .rows
                .iter()
                .filter(|r| !r.reference)
                .filter_map(|r| r.values[c].map(rounded))
                .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
            if let Some(best) = best {
                for (i, r) in self.rows.iter().enumerate() {
                    out[i][c] = !r.reference && r.values[c].map(rounded) == Some(best);
                }
            }
        }
        Ok(out)
    }
}

/// Markdown table; missing values print as `-`.
pub fn render_results_table(table: &ResultsTable) -> Result<String, AnalysisError> {
    let bold = table.highlights()?;
    let mut s = String::new();
    let header: Vec<&str> = table.label_headers.iter().chain(&table.columns).map(String::as_str).collect();
    s.push_str(&format!("| {} |\n", header.join(" | ")));
    let align: Vec<&str> = table
        .label_headers
        .iter()
        .map(|_| ":--")
        .chain(table.columns.iter().map(|_| "--:"))
        .collect();
    s.push_str(&format!("|{}|\n", align.join("|")));
    let mut separated = false;
    for (i, row) in table.rows.iter().enumerate() {
        if row.reference && !separated {
            let blank: Vec<&str> = header.iter().map(|_| "").collect();
            s.push_str(&format!("|{}|\n", blank.join("|")));
            separated = true;
        }
        let mut cells = row.labels.clone();
        for (c, v) in row.values.iter().enumerate() {
            cells.push(match v {
                None => "-".to_string(),
                Some(v) if bold[i][c] => format!("**{}**", table.shown(c, *v)),
                Some(v) => table.shown(c, *v),
            });
        }
        s.push_str(&format!("| {} |\n", cells.join(" | ")));
    }
    Ok(s)
}
