//! Minimizer for (possibly indefinite) quadratic objectives and model metrics.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::objective::{PolyObjective, Record, TaskKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub weights: Vec<f64>,
    pub task: TaskKind,
}

impl Model {
    pub fn new(weights: Vec<f64>, task: TaskKind) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Solver("non-finite model weights".into()));
        }
        Ok(Model { weights, task })
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }
}

/// Default eigenvalue floor: coefficients grow linearly with the record count.
pub fn default_ridge_floor(n: usize) -> f64 {
    1e-4 * n as f64
}

/// Symmetrized quadratic block `(L2 + L2^T) / 2`.
pub fn symmetric_part(obj: &PolyObjective) -> DMatrix<f64> {
    let d = obj.dim();
    DMatrix::from_fn(d, d, |a, b| 0.5 * (obj.quad(a, b) + obj.quad(b, a)))
}

/// The quadratic block with every eigenvalue below `rho` raised to `rho`.
pub fn repaired_quadratic(obj: &PolyObjective, rho: f64) -> Result<DMatrix<f64>> {
    let eig = clipped_eigen(obj, rho)?;
    Ok(eig.recompose())
}

fn clipped_eigen(obj: &PolyObjective, rho: f64) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    if !(rho >= 0.0) {
        return input(format!("ridge floor must be non-negative, got {rho}"));
    }
    if obj.to_vec().iter().any(|v| !v.is_finite()) {
        return input("objective has non-finite coefficients");
    }
    let mut eig = SymmetricEigen::new(symmetric_part(obj));
    for v in eig.eigenvalues.iter_mut() {
        if *v < rho {
            *v = rho;
        }
    }
    Ok(eig)
}

/// Minimizes `lambda0 + lambda1 . w + w^T L2 w` after repairing the quadratic
/// block to be positive definite with eigenvalue floor `rho`.
pub fn minimize(obj: &PolyObjective, rho: f64) -> Result<Vec<f64>> {
    let d = obj.dim();
    if d == 0 {
        return Ok(Vec::new());
    }
    let eig = clipped_eigen(obj, rho)?;
    if eig.eigenvalues.iter().any(|&v| v <= 0.0) {
        return Err(Error::Solver(
            "quadratic block is singular; use a positive ridge floor".into(),
        ));
    }
    // Stationarity: 2 S' w + lambda1 = 0.
    let q = &eig.eigenvectors;
    let rhs = DVector::from_column_slice(&obj.lambda1);
    let mut proj = q.transpose() * rhs;
    for (p, &ev) in proj.iter_mut().zip(eig.eigenvalues.iter()) {
        *p /= -2.0 * ev;
    }
    let w = q * proj;
    let w: Vec<f64> = w.iter().copied().collect();
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Solver("minimizer is not finite".into()));
    }
    Ok(w)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn predict(model: &Model, x: &[f64]) -> Result<f64> {
    if x.len() != model.dim() {
        return input(format!(
            "input has {} features, model expects {}",
            x.len(),
            model.dim()
        ));
    }
    let z: f64 = x.iter().zip(&model.weights).map(|(a, b)| a * b).sum();
    Ok(match model.task {
        TaskKind::Linear => z,
        TaskKind::Logistic => sigmoid(z),
    })
}

pub fn mse(model: &Model, records: &[Record]) -> Result<f64> {
    if records.is_empty() {
        return input("empty evaluation set");
    }
    let mut acc = 0.0;
    for r in records {
        let e = predict(model, &r.features)? - r.label;
        acc += e * e;
    }
    Ok(acc / records.len() as f64)
}

/// Fraction of records whose thresholded prediction equals the label.
pub fn accuracy(model: &Model, records: &[Record]) -> Result<f64> {
    if records.is_empty() {
        return input("empty evaluation set");
    }
    let mut hits = 0usize;
    for r in records {
        let yhat = if predict(model, &r.features)? >= 0.5 { 1.0 } else { 0.0 };
        if yhat == r.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / records.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn obj(l1: Vec<f64>, l2: Vec<f64>) -> PolyObjective {
        PolyObjective::from_parts(0.0, l1, l2).unwrap()
    }

    fn gradient_inf(o: &PolyObjective, rho: f64, w: &[f64]) -> f64 {
        let s = repaired_quadratic(o, rho).unwrap();
        let g = 2.0 * s * DVector::from_column_slice(w) + DVector::from_column_slice(&o.lambda1);
        g.amax()
    }

    #[test]
    fn scalar_quadratic() {
        let w = minimize(&obj(vec![-2.0], vec![1.0]), 0.0).unwrap();
        assert_abs_diff_eq!(w[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn separable_quadratic() {
        let w = minimize(&obj(vec![-2.0, -4.0], vec![1.0, 0.0, 0.0, 1.0]), 0.0).unwrap();
        assert_abs_diff_eq!(w[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w[1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn negative_curvature_is_clipped() {
        let o = obj(vec![-2.0], vec![-1.0]);
        let w = minimize(&o, 0.01).unwrap();
        // 2 * 0.01 * w = 2
        assert_abs_diff_eq!(w[0], 100.0, epsilon = 1e-9);
        assert!(gradient_inf(&o, 0.01, &w) <= 1e-8 * 3.0);
    }

    #[test]
    fn singular_without_floor_is_an_error() {
        assert!(matches!(
            minimize(&obj(vec![1.0], vec![0.0]), 0.0),
            Err(Error::Solver(_))
        ));
        assert!(minimize(&obj(vec![f64::NAN], vec![1.0]), 0.0).is_err());
    }

    #[test]
    fn asymmetric_block_uses_symmetric_part() {
        // [[1, 2], [0, 1]] has symmetric part [[1, 1], [1, 1]] + diag repair.
        let o = obj(vec![-1.0, 0.5], vec![2.0, 2.0, 0.0, 3.0]);
        let w = minimize(&o, 0.0).unwrap();
        assert!(gradient_inf(&o, 0.0, &w) <= 1e-10);
    }

    #[test]
    fn predictions_and_metrics() {
        let m = Model::new(vec![0.0, 0.0], TaskKind::Logistic).unwrap();
        assert_eq!(predict(&m, &[0.3, -0.9]).unwrap(), 0.5);
        assert!(predict(&m, &[0.3]).is_err());

        let lin = Model::new(vec![0.5, -0.25], TaskKind::Linear).unwrap();
        let recs: Vec<Record> = [
            ([1.0, 0.0], 0.5),
            ([0.0, 1.0], -0.25),
            ([0.4, 0.4], 0.1),
        ]
        .iter()
        .map(|(x, y)| Record::new_unchecked(x.to_vec(), *y))
        .collect();
        assert!(mse(&lin, &recs).unwrap() < 1e-24);

        // Hand-computed residuals: predictions 0.5, -0.25, 0.1, 0.25, -0.5.
        let toy: Vec<Record> = [
            ([1.0, 0.0], 0.4),
            ([0.0, 1.0], 0.0),
            ([0.4, 0.4], 0.1),
            ([0.5, 0.0], 0.5),
            ([-1.0, 0.0], -0.2),
        ]
        .iter()
        .map(|(x, y)| Record::new_unchecked(x.to_vec(), *y))
        .collect();
        let hand = (0.01 + 0.0625 + 0.0 + 0.0625 + 0.09) / 5.0;
        assert_abs_diff_eq!(mse(&lin, &toy).unwrap(), hand, epsilon = 1e-15);

        let clf = Model::new(vec![1.0], TaskKind::Logistic).unwrap();
        let recs: Vec<Record> = [(0.5, 1.0), (-0.5, 0.0), (0.2, 0.0), (-0.1, 1.0)]
            .iter()
            .map(|&(x, y)| Record::new_unchecked(vec![x], y))
            .collect();
        assert_eq!(accuracy(&clf, &recs).unwrap(), 0.5);
    }
}
