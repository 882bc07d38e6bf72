use std::io::Read;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Least-squares model `cycles ≈ intercept + Σ coefficients[i] · feature[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub features: Vec<String>,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub r_squared: f64,
    pub samples: usize,
}

impl LinearModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept
            + self
                .coefficients
                .iter()
                .zip(x)
                .map(|(c, v)| c * v)
                .sum::<f64>()
    }
}

/// Fit from CSV text: a header naming the features plus a `cycles` column.
pub fn fit_linear_csv(reader: impl Read) -> Result<LinearModel> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let target = headers
        .iter()
        .position(|h| h.trim() == "cycles")
        .ok_or_else(|| Error::Schema("sample CSV needs a `cycles` column".into()))?;
    let features: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != target)
        .map(|(_, h)| h.trim().to_string())
        .collect();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let mut row = Vec::with_capacity(features.len());
        for (i, field) in rec.iter().enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Schema(format!("sample CSV: `{field}` is not a number")))?;
            if i == target {
                ys.push(v);
            } else {
                row.push(v);
            }
        }
        xs.push(row);
    }
    fit_linear(&features, &xs, &ys)
}

pub fn fit_linear(features: &[String], xs: &[Vec<f64>], ys: &[f64]) -> Result<LinearModel> {
    let n = xs.len();
    let p = features.len() + 1;
    if n < p {
        return Err(Error::Regression(format!(
            "{n} samples cannot determine {p} coefficients"
        )));
    }
    let design = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { xs[i][j - 1] });
    let y = DVector::from_column_slice(ys);

    // Scale columns so the rank test is not fooled by feature magnitudes.
    let scales: Vec<f64> = (0..p)
        .map(|j| {
            let norm = design.column(j).norm();
            if norm == 0.0 {
                1.0
            } else {
                norm
            }
        })
        .collect();
    let scaled = DMatrix::from_fn(n, p, |i, j| design[(i, j)] / scales[j]);
    let svd = scaled.svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * 1e-10 * n.max(p) as f64;
    if smax == 0.0 || svd.rank(tol) < p {
        return Err(Error::Regression("design matrix is rank deficient".into()));
    }
    let beta_scaled = svd
        .solve(&y, tol)
        .map_err(|e| Error::Regression(e.to_string()))?;
    let beta: Vec<f64> = (0..p).map(|j| beta_scaled[j] / scales[j]).collect();

    let pred = &design * DVector::from_column_slice(&beta);
    let mean = y.mean();
    let ss_res: f64 = (&y - &pred).iter().map(|r| r * r).sum();
    let ss_tot: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    let r_squared = if ss_tot == 0.0 {
        if ss_res <= f64::EPSILON * n as f64 {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 - ss_res / ss_tot
    };
    Ok(LinearModel {
        features: features.to_vec(),
        coefficients: beta[1..].to_vec(),
        intercept: beta[0],
        r_squared,
        samples: n,
    })
}
