//! Explicit covariate transforms: prepending an intercept and standardizing.

use gpml_core::Dataset;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::CliError;

pub const INTERCEPT_NAME: &str = "(intercept)";

/// What [`transform`] did, enough to map coefficients back to the original scale.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransformRecord {
    pub add_intercept: bool,
    pub standardize: bool,
    /// Column means of the original covariates (empty unless standardized).
    pub means: Vec<f64>,
    /// Population (n-denominator) standard deviations (empty unless standardized).
    pub sds: Vec<f64>,
}

/// Standardizes each column as `(x - mean) / sd` with the n-denominator sd,
/// then prepends a column of ones. The intercept is never standardized.
pub fn transform(data: &Dataset, add_intercept: bool, standardize: bool) -> Result<(Dataset, TransformRecord), CliError> {
    let (n, d) = (data.n(), data.d());
    let names: Vec<String> = match data.feature_names() {
        Some(names) => names.to_vec(),
        None => (1..=d).map(|j| format!("x{j}")).collect(),
    };
    let mut x = data.x().clone();
    let (mut means, mut sds) = (Vec::new(), Vec::new());
    if standardize {
        for (j, name) in names.iter().enumerate() {
            let col = x.column(j);
            let mean = col.sum() / n as f64;
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            if !(sd > 0.0) {
                return Err(CliError::usage("--standardize", format!("column '{name}' has zero standard deviation")));
            }
            x.column_mut(j).apply(|v| *v = (*v - mean) / sd);
            means.push(mean);
            sds.push(sd);
        }
    }
    let (x, names) = if add_intercept {
        let mut with = DMatrix::from_element(n, d + 1, 1.0);
        with.columns_mut(1, d).copy_from(&x);
        let mut all = vec![INTERCEPT_NAME.to_string()];
        all.extend(names);
        (with, all)
    } else {
        (x, names)
    };
    let out = Dataset::new(data.y().clone(), x)?.with_feature_names(names)?;
    Ok((
        out,
        TransformRecord {
            add_intercept,
            standardize,
            means,
            sds,
        },
    ))
}

impl TransformRecord {
    /// Coefficients on the original covariate scale giving the same linear
    /// predictor. Standardized fits can only be mapped back with an intercept,
    /// which absorbs the centering.
    pub fn unmap(&self, theta: &DVector<f64>) -> Option<DVector<f64>> {
        if !self.standardize {
            return Some(theta.clone());
        }
        if !self.add_intercept {
            return None;
        }
        let mut out = theta.clone();
        for j in 0..self.sds.len() {
            out[j + 1] = theta[j + 1] / self.sds[j];
            out[0] -= theta[j + 1] * self.means[j] / self.sds[j];
        }
        Some(out)
    }
}
