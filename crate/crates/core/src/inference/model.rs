use serde::{Deserialize, Serialize};

use crate::basis::BasisConfig;
use crate::data::{CellStatus, PanelDataset};
use crate::error::{Error, Result};
use crate::qfmodel::{PredictorScaling, ResponseScaling};

use super::config::{DependenceMode, ModelConfig};

/// Name of the constant column in fixed- and random-effect designs.
pub const INTERCEPT: &str = "intercept";

/// One cell on the model scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    /// Index of the source record in the dataset.
    pub record: usize,
    /// Visit relative to the subject's first visit.
    pub visit: usize,
    pub response: usize,
    /// Status with standardized value / threshold.
    pub status: CellStatus,
    /// Scaled fixed-effect design with leading intercept.
    pub x: Vec<f64>,
    /// Random-effect design.
    pub z: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub id: String,
    /// Visit-major, response-minor.
    pub cells: Vec<Cell>,
}

impl Subject {
    pub fn visits(&self) -> usize {
        self.cells.iter().map(|c| c.visit + 1).max().unwrap_or(0)
    }
}

/// Everything about a fit's design that is fixed before sampling. Stored in
/// run manifests so a run can be re-evaluated on new data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub basis: BasisConfig,
    pub dependence: DependenceMode,
    pub responses: Vec<String>,
    /// Fixed-effect columns, starting with [`INTERCEPT`].
    pub fixed_names: Vec<String>,
    pub random_names: Vec<String>,
    /// Fixed-effect column indices whose effect is constant in `τ`.
    pub constant_columns: Vec<usize>,
    pub x_scaling: PredictorScaling,
    pub y_scaling: Vec<ResponseScaling>,
}

impl ModelDescriptor {
    pub fn num_responses(&self) -> usize {
        self.responses.len()
    }

    pub fn num_basis(&self) -> usize {
        self.basis.num_basis
    }

    pub fn num_covariates(&self) -> usize {
        self.fixed_names.len()
    }

    pub fn num_random(&self) -> usize {
        self.random_names.len()
    }

    /// Shrinkage across responses is used when there are at least two.
    pub fn shrinkage(&self) -> bool {
        self.responses.len() >= 2
    }
}

/// A dataset mapped onto a model: scaled designs, standardized responses,
/// subjects in first-appearance order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelData {
    pub descriptor: ModelDescriptor,
    pub subjects: Vec<Subject>,
    /// Covariate values clipped to `[-1, 1]` while building designs.
    pub clipped: usize,
    pub data_hash: String,
}

impl ModelData {
    /// Fit scalings on `dataset` and build the model view.
    pub fn prepare(dataset: &PanelDataset, model: &ModelConfig) -> Result<Self> {
        let responses = if model.responses.is_empty() {
            dataset.response_labels()
        } else {
            model.responses.clone()
        };
        let fixed_cols = column_indices(dataset, &model.fixed_effects, "fixed")?;
        let x_scaling = if fixed_cols.is_empty() {
            PredictorScaling::identity(0)
        } else {
            let columns: Vec<Vec<f64>> = fixed_cols
                .iter()
                .map(|&c| dataset.records.iter().map(|r| r.covariates[c]).collect())
                .collect();
            PredictorScaling::fit(&columns)?
        };
        let y_scaling = responses
            .iter()
            .map(|label| {
                if !model.standardize {
                    return Ok(ResponseScaling::IDENTITY);
                }
                let values: Vec<f64> = dataset
                    .records
                    .iter()
                    .filter(|r| &r.response == label)
                    .filter_map(|r| match r.status() {
                        CellStatus::Observed(v) => Some(v),
                        _ => None,
                    })
                    .collect();
                ResponseScaling::fit(&values)
                    .map_err(|e| Error::Data(format!("response `{label}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let descriptor = Self::describe(model, responses, x_scaling, y_scaling)?;
        Self::with_descriptor(dataset, descriptor)
    }

    fn describe(
        model: &ModelConfig,
        responses: Vec<String>,
        x_scaling: PredictorScaling,
        y_scaling: Vec<ResponseScaling>,
    ) -> Result<ModelDescriptor> {
        if responses.is_empty() {
            return Err(Error::Config("no responses to model".into()));
        }
        match model.dependence {
            DependenceMode::CopulaUnivariate if responses.len() != 1 => {
                return Err(Error::Config(format!(
                    "univariate copula needs exactly one response, got {}",
                    responses.len()
                )))
            }
            _ => {}
        }
        let mut fixed_names = vec![INTERCEPT.to_string()];
        fixed_names.extend(model.fixed_effects.iter().cloned());
        let mut constant_columns = Vec::new();
        for name in &model.constant_effects {
            let idx = fixed_names.iter().position(|n| n == name).ok_or_else(|| {
                Error::Config(format!("constant effect `{name}` is not a fixed effect"))
            })?;
            constant_columns.push(idx);
        }
        let basis = model.basis.build()?;
        Ok(ModelDescriptor {
            basis: BasisConfig::from(&basis),
            dependence: model.dependence,
            responses,
            fixed_names,
            random_names: model.random_effects.clone(),
            constant_columns,
            x_scaling,
            y_scaling,
        })
    }

    /// Build the model view of `dataset` under frozen scalings.
    pub fn with_descriptor(dataset: &PanelDataset, descriptor: ModelDescriptor) -> Result<Self> {
        let report = dataset.validate();
        if !report.is_ok() {
            return Err(Error::Data(report.errors.join("; ")));
        }
        let fixed_cols = column_indices(dataset, &descriptor.fixed_names[1..], "fixed")?;
        let random_cols: Vec<Option<usize>> = descriptor
            .random_names
            .iter()
            .map(|n| {
                if n == INTERCEPT {
                    Ok(None)
                } else {
                    dataset.covariate_index(n).map(Some).ok_or_else(|| {
                        Error::Config(format!("random-effect column `{n}` not in data"))
                    })
                }
            })
            .collect::<Result<_>>()?;

        let ids = dataset.subject_ids();
        let index: std::collections::HashMap<&str, usize> =
            ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut first_visit = vec![i64::MAX; ids.len()];
        for r in &dataset.records {
            let i = index[r.subject.as_str()];
            first_visit[i] = first_visit[i].min(r.visit);
        }
        let mut subjects: Vec<Subject> =
            ids.iter().map(|id| Subject { id: id.clone(), cells: Vec::new() }).collect();
        let mut clipped = 0;
        let mut raw = Vec::with_capacity(fixed_cols.len());
        for (ri, r) in dataset.records.iter().enumerate() {
            let Some(h) = descriptor.responses.iter().position(|l| l == &r.response) else {
                continue;
            };
            let i = index[r.subject.as_str()];
            raw.clear();
            raw.extend(fixed_cols.iter().map(|&c| r.covariates[c]));
            let mut x = Vec::with_capacity(raw.len() + 1);
            clipped += descriptor.x_scaling.design(&raw, &mut x);
            let z = random_cols
                .iter()
                .map(|c| c.map_or(1.0, |c| r.covariates[c]))
                .collect();
            let ys = descriptor.y_scaling[h];
            let status = match r.status() {
                CellStatus::Observed(v) => CellStatus::Observed(ys.forward(v)),
                CellStatus::Censored(c) => CellStatus::Censored(ys.forward(c)),
                CellStatus::Missing => CellStatus::Missing,
            };
            subjects[i].cells.push(Cell {
                record: ri,
                visit: (r.visit - first_visit[i]) as usize,
                response: h,
                status,
                x,
                z,
            });
        }
        for s in &mut subjects {
            s.cells.sort_by_key(|c| (c.visit, c.response));
        }
        subjects.retain(|s| !s.cells.is_empty());
        if clipped > 0 {
            log::warn!("{clipped} covariate values clipped to [-1, 1]");
        }
        Ok(Self { descriptor, subjects, clipped, data_hash: dataset.content_hash() })
    }

    pub fn num_subjects(&self) -> usize {
        self.subjects.len()
    }

    /// Observed cells per response, used for the raw-scale density Jacobian.
    pub fn log_jacobian(&self, subject: usize) -> f64 {
        self.subjects[subject]
            .cells
            .iter()
            .filter(|c| matches!(c.status, CellStatus::Observed(_)))
            .map(|c| self.descriptor.y_scaling[c.response].sd.ln())
            .sum()
    }
}

fn column_indices(dataset: &PanelDataset, names: &[String], what: &str) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|n| {
            dataset
                .covariate_index(n)
                .ok_or_else(|| Error::Config(format!("{what}-effect column `{n}` not in data")))
        })
        .collect()
}
