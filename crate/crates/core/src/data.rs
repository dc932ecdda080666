//! Long-format panel data: one record per (subject, visit, response) cell.
//!
//! CSV layout (header required):
//!
//! ```text
//! subject,visit,response,value,censor,<covariate columns…>
//! ```
//!
//! An empty `value` marks a missing cell. A non-empty `censor` marks the cell
//! as right-censored at that threshold: only `Y > censor` is used.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const FIXED_COLUMNS: [&str; 5] = ["subject", "visit", "response", "value", "censor"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub subject: String,
    pub visit: i64,
    pub response: String,
    pub value: Option<f64>,
    pub censor: Option<f64>,
    pub covariates: Vec<f64>,
}

/// How a cell enters the likelihood.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CellStatus {
    Observed(f64),
    /// Known only to exceed the threshold.
    Censored(f64),
    Missing,
}

impl Record {
    pub fn status(&self) -> CellStatus {
        match (self.value, self.censor) {
            (_, Some(c)) => CellStatus::Censored(c),
            (Some(v), None) => CellStatus::Observed(v),
            (None, None) => CellStatus::Missing,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PanelDataset {
    pub covariate_names: Vec<String>,
    pub records: Vec<Record>,
}

/// Outcome of [`PanelDataset::validate`].
#[derive(Clone, Debug, Default, Serialize)]
pub struct ValidationReport {
    pub subjects: usize,
    pub cells: usize,
    pub responses: Vec<ResponseSummary>,
    pub errors: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ResponseSummary {
    pub response: String,
    pub cells: usize,
    pub missing: usize,
    pub censored: usize,
    pub missing_pct: f64,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{} subjects, {} cells", self.subjects, self.cells)?;
        for r in &self.responses {
            writeln!(
                f,
                "response {}: {} cells, {:.0}% missing, {} censored",
                r.response, r.cells, r.missing_pct, r.censored
            )?;
        }
        for e in &self.errors {
            writeln!(f, "error: {e}")?;
        }
        Ok(())
    }
}

impl PanelDataset {
    pub fn new(covariate_names: Vec<String>) -> Self {
        Self { covariate_names, records: Vec::new() }
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        for (i, want) in FIXED_COLUMNS.iter().enumerate() {
            if headers.get(i) != Some(*want) {
                return Err(Error::Data(format!(
                    "column {} must be `{want}`, found `{}`",
                    i + 1,
                    headers.get(i).unwrap_or("")
                )));
            }
        }
        let covariate_names: Vec<String> = headers.iter().skip(5).map(str::to_string).collect();
        let mut records = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = row + 2;
            let field = |i: usize| rec.get(i).unwrap_or("");
            let parse_opt = |i: usize| -> Result<Option<f64>> {
                let s = field(i);
                if s.is_empty() || s.eq_ignore_ascii_case("na") {
                    Ok(None)
                } else {
                    s.parse::<f64>().map(Some).map_err(|_| {
                        Error::Data(format!("row {line}: cannot parse `{s}` in column {}", i + 1))
                    })
                }
            };
            let visit = field(1)
                .parse::<i64>()
                .map_err(|_| Error::Data(format!("row {line}: visit `{}` is not an integer", field(1))))?;
            let mut covariates = Vec::with_capacity(covariate_names.len());
            for i in 5..5 + covariate_names.len() {
                covariates.push(parse_opt(i)?.ok_or_else(|| {
                    Error::Data(format!("row {line}: covariate `{}` is empty", &headers[i]))
                })?);
            }
            records.push(Record {
                subject: field(0).to_string(),
                visit,
                response: field(2).to_string(),
                value: parse_opt(3)?,
                censor: parse_opt(4)?,
                covariates,
            });
        }
        Ok(Self { covariate_names, records })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = FIXED_COLUMNS.to_vec();
        header.extend(self.covariate_names.iter().map(String::as_str));
        wtr.write_record(&header)?;
        let fmt = |v: Option<f64>| v.map(|v| format!("{v:?}")).unwrap_or_default();
        for r in &self.records {
            let mut fields = vec![
                r.subject.clone(),
                r.visit.to_string(),
                r.response.clone(),
                fmt(r.value),
                fmt(r.censor),
            ];
            fields.extend(r.covariates.iter().map(|v| format!("{v:?}")));
            wtr.write_record(&fields)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn to_path(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// SHA-256 of the canonical CSV serialization.
    pub fn content_hash(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        hex::encode(Sha256::digest(&buf))
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|c| c == name)
    }

    /// Response labels in order of first appearance.
    pub fn response_labels(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.records {
            if !out.contains(&r.response) {
                out.push(r.response.clone());
            }
        }
        out
    }

    /// Subject ids in order of first appearance.
    pub fn subject_ids(&self) -> Vec<String> {
        let mut seen = HashMap::new();
        let mut out = Vec::new();
        for r in &self.records {
            if seen.insert(r.subject.as_str(), ()).is_none() {
                out.push(r.subject.clone());
            }
        }
        out
    }

    /// Check every dataset invariant; errors carry 1-based CSV row numbers.
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        let mut keys: HashMap<(&str, i64, &str), usize> = HashMap::new();
        let mut visits: BTreeMap<&str, Vec<i64>> = BTreeMap::new();
        let mut any_value = false;
        for (i, r) in self.records.iter().enumerate() {
            let line = i + 2;
            if let Some(first) = keys.insert((&r.subject, r.visit, &r.response), line) {
                report.errors.push(format!(
                    "row {line}: duplicate key (subject {}, visit {}, response {}) first seen at row {first}",
                    r.subject, r.visit, r.response
                ));
            }
            visits.entry(&r.subject).or_default().push(r.visit);
            if let Some(c) = r.censor {
                if r.value.is_none() {
                    report.errors.push(format!("row {line}: censor threshold on a missing cell"));
                }
                if !c.is_finite() {
                    report.errors.push(format!("row {line}: censor threshold is not finite"));
                }
            }
            if let Some(v) = r.value {
                if !v.is_finite() {
                    report.errors.push(format!("row {line}: value is not finite"));
                }
                any_value = true;
            }
            if r.covariates.len() != self.covariate_names.len() {
                report.errors.push(format!("row {line}: wrong number of covariates"));
            }
            if r.covariates.iter().any(|v| !v.is_finite()) {
                report.errors.push(format!("row {line}: covariate is not finite"));
            }
        }
        for (subject, vs) in &mut visits {
            vs.sort_unstable();
            vs.dedup();
            if vs.windows(2).any(|w| w[1] != w[0] + 1) {
                report.errors.push(format!("subject {subject}: visit indices are not contiguous"));
            }
        }
        if !any_value {
            report.errors.push("dataset has no non-missing cells".into());
        }
        report.subjects = visits.len();
        report.cells = self.records.len();
        for label in self.response_labels() {
            let cells: Vec<&Record> = self.records.iter().filter(|r| r.response == label).collect();
            let missing = cells.iter().filter(|r| r.status() == CellStatus::Missing).count();
            let censored = cells.iter().filter(|r| matches!(r.status(), CellStatus::Censored(_))).count();
            report.responses.push(ResponseSummary {
                response: label,
                cells: cells.len(),
                missing,
                censored,
                missing_pct: 100.0 * missing as f64 / cells.len().max(1) as f64,
            });
        }
        report
    }

    /// Concatenate two datasets, renaming the second copy's subjects.
    pub fn concat_renamed(&self, other: &Self, suffix: &str) -> Result<Self> {
        if self.covariate_names != other.covariate_names {
            return Err(Error::Data("covariate columns differ".into()));
        }
        let mut records = self.records.clone();
        records.extend(other.records.iter().map(|r| Record {
            subject: format!("{}{suffix}", r.subject),
            ..r.clone()
        }));
        Ok(Self { covariate_names: self.covariate_names.clone(), records })
    }
}
