//! Hyper-parameter grid search ranked by the label-free tuning score.
//! Labeled kNN is recorded alongside for comparison but never drives the
//! ranking.

use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{CldError, Result};

use super::config::Config;
use super::train::{train_on, TrainOutput};

/// Grid axes; a missing axis keeps the base config's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub lambda: Option<Vec<f64>>,
    /// Sets both temperatures T_I and T_G.
    pub t: Option<Vec<f64>>,
}

impl GridSpec {
    pub fn parse(text: &str) -> Result<GridSpec> {
        let spec: GridSpec = serde_json::from_str(text).map_err(|e| CldError::InvalidConfig {
            key: "grid".to_string(),
            msg: e.to_string(),
        })?;
        if spec.lambda.as_deref() == Some(&[]) || spec.t.as_deref() == Some(&[]) {
            return Err(CldError::InvalidConfig {
                key: "grid".to_string(),
                msg: "axes must be nonempty when present".to_string(),
            });
        }
        if spec.lambda.is_none() && spec.t.is_none() {
            return Err(CldError::InvalidConfig {
                key: "grid".to_string(),
                msg: "at least one axis (lambda, t) is required".to_string(),
            });
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone)]
pub struct GridCell {
    pub lambda: f64,
    pub t: f64,
    pub tuning_score: f64,
    pub knn: f64,
    pub error: Option<String>,
}

/// Train one model per grid cell with a shared seed. Failed cells are
/// marked and the search continues.
pub fn grid_search(config: &Config, grid: &GridSpec, ds: &Dataset) -> Vec<GridCell> {
    let lambdas = grid
        .lambda
        .clone()
        .unwrap_or_else(|| vec![config.contrast.lambda]);
    let temps = grid.t.clone().unwrap_or_else(|| vec![config.contrast.t_i]);
    let mut cells = Vec::with_capacity(lambdas.len() * temps.len());
    for &lambda in &lambdas {
        for &t in &temps {
            let mut cell_config = config.clone();
            cell_config.contrast.lambda = lambda;
            cell_config.contrast.t_i = t;
            cell_config.contrast.t_g = t;
            cell_config.out_dir = None;
            let outcome: Result<TrainOutput> =
                cell_config.validate().and_then(|_| train_on(&cell_config, ds));
            match outcome {
                Ok(out) => {
                    let last = out.log.evals.last().expect("final eval present");
                    cells.push(GridCell {
                        lambda,
                        t,
                        tuning_score: last.report.tuning_score,
                        knn: last.report.knn_top1,
                        error: None,
                    });
                }
                Err(e) => cells.push(GridCell {
                    lambda,
                    t,
                    tuning_score: f64::NEG_INFINITY,
                    knn: f64::NEG_INFINITY,
                    error: Some(e.to_string()),
                }),
            }
        }
    }
    cells
}

fn csv_of(cells: &[GridCell]) -> String {
    let mut out = String::from("lambda,t,tuning_score,knn,status\n");
    for c in cells {
        let (tuning, knn, status) = match &c.error {
            None => (c.tuning_score.to_string(), c.knn.to_string(), "ok".to_string()),
            Some(e) => ("".to_string(), "".to_string(), format!("failed: {e}")),
        };
        out.push_str(&format!("{},{},{},{},{}\n", c.lambda, c.t, tuning, knn, status));
    }
    out
}

/// Cells sorted descending by tuning score (failed cells last).
pub fn rankings_csv(cells: &[GridCell]) -> String {
    let mut sorted = cells.to_vec();
    sorted.sort_by(|a, b| b.tuning_score.partial_cmp(&a.tuning_score).unwrap());
    csv_of(&sorted)
}

/// The same cells ordered by labeled kNN, for side-by-side comparison.
pub fn rankings_by_knn_csv(cells: &[GridCell]) -> String {
    let mut sorted = cells.to_vec();
    sorted.sort_by(|a, b| b.knn.partial_cmp(&a.knn).unwrap());
    csv_of(&sorted)
}
