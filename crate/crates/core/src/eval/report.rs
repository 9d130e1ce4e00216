use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{cpwer, CpWer};
use crate::error::{Error, Result};
use crate::vocab::Transcript;

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: usize,
    pub edits: usize,
    pub ref_len: usize,
    pub permutation: Vec<usize>,
}

/// Corpus-level cpWER with its per-sample breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub version: u32,
    /// Scoring unit; tokens stand in for words.
    pub unit: String,
    pub edits: usize,
    pub ref_len: usize,
    pub cpwer: f64,
    pub per_sample: Vec<SampleScore>,
}

impl ScoreReport {
    pub fn from_samples(per_sample: Vec<SampleScore>) -> Self {
        let edits = per_sample.iter().map(|s| s.edits).sum();
        let ref_len = per_sample.iter().map(|s| s.ref_len).sum();
        ScoreReport {
            version: REPORT_VERSION,
            unit: "token".into(),
            edits,
            ref_len,
            cpwer: if ref_len == 0 { 0.0 } else { edits as f64 / ref_len as f64 },
            per_sample,
        }
    }

    /// Scores `(id, references, hypotheses)` triples in the given order.
    pub fn score<'a, I>(items: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, &'a [Transcript], &'a [Transcript])>,
    {
        let mut per_sample = Vec::new();
        for (id, refs, hyps) in items {
            let CpWer { edits, ref_len, permutation } = cpwer(refs, hyps)?;
            per_sample.push(SampleScore { id, edits, ref_len, permutation });
        }
        Ok(Self::from_samples(per_sample))
    }

    pub fn ids(&self) -> BTreeSet<usize> {
        self.per_sample.iter().map(|s| s.id).collect()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "id,edits,ref_len,permutation")?;
        for s in &self.per_sample {
            let perm: Vec<String> = s.permutation.iter().map(usize::to_string).collect();
            writeln!(out, "{},{},{},{}", s.id, s.edits, s.ref_len, perm.join(" "))?;
        }
        Ok(())
    }

    /// Aggregate summary without the per-sample list.
    pub fn aggregate_json(&self) -> Result<String> {
        let summary = serde_json::json!({
            "version": self.version,
            "unit": self.unit,
            "samples": self.per_sample.len(),
            "edits": self.edits,
            "ref_len": self.ref_len,
            "cpwer": self.cpwer,
        });
        Ok(serde_json::to_string_pretty(&summary)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub cpwer: f64,
    /// `(base - system) / base`; zero when the baseline is error free.
    pub relative_reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "label,cpwer,relative_reduction")?;
        for r in &self.rows {
            writeln!(out, "{},{},{}", r.label, r.cpwer, r.relative_reduction)?;
        }
        Ok(())
    }
}

pub fn relative_reduction(base: f64, system: f64) -> f64 {
    if base == 0.0 {
        0.0
    } else {
        (base - system) / base
    }
}

/// Tabulates aggregate cpWER of each labelled report against `baseline`.
pub fn compare_runs(reports: &[(&str, &ScoreReport)], baseline: &str) -> Result<Comparison> {
    let base = reports
        .iter()
        .find(|(l, _)| *l == baseline)
        .ok_or_else(|| Error::InvalidArgument(format!("baseline `{baseline}` not among the reports")))?
        .1;
    let ids = base.ids();
    let mut rows = Vec::with_capacity(reports.len());
    for (label, report) in reports {
        if report.ids() != ids {
            return Err(Error::Mismatch(format!("report `{label}` covers different sample ids than `{baseline}`")));
        }
        rows.push(ComparisonRow {
            label: (*label).to_string(),
            cpwer: report.cpwer,
            relative_reduction: relative_reduction(base.cpwer, report.cpwer),
        });
    }
    Ok(Comparison { baseline: baseline.to_string(), rows })
}

/// Writes a dense matrix as headerless CSV with round-trip float formatting.
pub fn write_matrix_csv<W: Write>(matrix: &Array2<f64>, mut out: W) -> Result<()> {
    for row in matrix.rows() {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}

pub fn read_matrix_csv<R: BufRead>(input: R) -> Result<Array2<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|c| c.trim().parse::<f64>().map_err(|e| Error::InvalidArgument(format!("bad matrix cell `{c}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Shape(format!("ragged matrix: {} vs {} columns", first.len(), row.len())));
            }
        }
        rows.push(row);
    }
    let cols = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), cols), flat).map_err(|e| Error::Shape(e.to_string()))
}

/// Steps x frames attention matrix as CSV.
pub fn attention_dump<W: Write>(attention: &Array2<f64>, out: W) -> Result<()> {
    write_matrix_csv(attention, out)
}
