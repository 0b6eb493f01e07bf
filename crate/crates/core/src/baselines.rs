//! Reference models: exact non-private fits and full-batch DPSGD.

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dp::{laplace_sample, Epsilon, NoiseStream, StreamId};
use crate::error::{input, Result};
use crate::objective::TaskKind;
use crate::solver::{sigmoid, Model};

/// Gradient norm at which the logistic fit stops.
pub const LOGISTIC_GRADIENT_TOL: f64 = 1e-6;
const NEWTON_MAX_ITER: usize = 500;

fn gram(ds: &Dataset) -> (DMatrix<f64>, DVector<f64>) {
    let d = ds.dim();
    let mut a = DMatrix::zeros(d, d);
    let mut b = DVector::zeros(d);
    for r in ds.records() {
        let x = DVector::from_column_slice(&r.features);
        a.syger(1.0, &x, &x, 1.0);
        b.axpy(r.label, &x, 1.0);
    }
    a.fill_upper_triangle_with_lower_triangle();
    (a, b)
}

/// Solves `A w = b` for symmetric PSD `A`, adding a small ridge when `A` is
/// numerically singular.
fn solve_psd(a: DMatrix<f64>, b: &DVector<f64>, what: &str) -> DVector<f64> {
    let d = a.nrows();
    let eig = SymmetricEigen::new(a.clone());
    let max = eig.eigenvalues.iter().copied().fold(0.0f64, f64::max);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let ridge = if min <= 1e-12 * max.max(1.0) {
        let r = 1e-8 * max.max(1.0);
        warn!("{what}: singular system (smallest eigenvalue {min:e}); adding ridge {r:e}");
        r
    } else {
        0.0
    };
    let a = a + DMatrix::identity(d, d) * ridge;
    match a.clone().cholesky() {
        Some(ch) => ch.solve(b),
        None => {
            // Only reached when the ridge is too small for rounding; fall back
            // to the eigendecomposition.
            let eig = SymmetricEigen::new(a);
            let mut proj = eig.eigenvectors.transpose() * b;
            for (p, &ev) in proj.iter_mut().zip(eig.eigenvalues.iter()) {
                *p = if ev > 0.0 { *p / ev } else { 0.0 };
            }
            &eig.eigenvectors * proj
        }
    }
}

/// Exact least squares for the linear task; Newton's method on the exact
/// log-loss for the logistic task.
pub fn fit_nonprivate(ds: &Dataset) -> Result<Model> {
    if ds.is_empty() {
        return input("cannot fit an empty dataset");
    }
    match ds.task() {
        TaskKind::Linear => {
            let (a, b) = gram(ds);
            let w = solve_psd(a, &b, "least squares");
            Model::new(w.iter().copied().collect(), TaskKind::Linear)
        }
        TaskKind::Logistic => fit_logistic(ds),
    }
}

fn log_loss(ds: &Dataset, w: &DVector<f64>) -> f64 {
    ds.records()
        .iter()
        .map(|r| {
            let z: f64 = r.features.iter().zip(w.iter()).map(|(a, b)| a * b).sum();
            // log(1 + e^z) - y z, computed without overflow.
            z.max(0.0) + (-z.abs()).exp().ln_1p() - r.label * z
        })
        .sum()
}

fn fit_logistic(ds: &Dataset) -> Result<Model> {
    let d = ds.dim();
    let mut w = DVector::zeros(d);
    let mut loss = log_loss(ds, &w);
    for _ in 0..NEWTON_MAX_ITER {
        let mut g = DVector::zeros(d);
        let mut h = DMatrix::zeros(d, d);
        for r in ds.records() {
            let x = DVector::from_column_slice(&r.features);
            let p = sigmoid(x.dot(&w));
            g.axpy(p - r.label, &x, 1.0);
            h.syger(p * (1.0 - p), &x, &x, 1.0);
        }
        if g.norm() <= LOGISTIC_GRADIENT_TOL {
            return Model::new(w.iter().copied().collect(), TaskKind::Logistic);
        }
        h.fill_upper_triangle_with_lower_triangle();
        let mut step = solve_psd_quiet(h, &g);
        // Backtracking keeps every iterate a descent step, including on
        // separable data where the minimum is at infinity.
        let mut t = 1.0;
        loop {
            let cand = &w - &step * t;
            let cl = log_loss(ds, &cand);
            if cl <= loss - 1e-4 * t * g.dot(&step) || t < 1e-12 {
                w = cand;
                loss = cl;
                break;
            }
            t *= 0.5;
        }
        if t < 1e-12 {
            // Newton direction stalled; take a gradient step instead.
            step = g.clone();
            w -= step * (1.0 / (ds.len() as f64));
            loss = log_loss(ds, &w);
        }
    }
    warn!("logistic fit stopped after {NEWTON_MAX_ITER} iterations above the gradient tolerance");
    Model::new(w.iter().copied().collect(), TaskKind::Logistic)
}

fn solve_psd_quiet(h: DMatrix<f64>, g: &DVector<f64>) -> DVector<f64> {
    let d = h.nrows();
    let scale = h.diagonal().amax().max(1.0);
    let h = h + DMatrix::identity(d, d) * (1e-12 * scale);
    match h.clone().cholesky() {
        Some(ch) => ch.solve(g),
        None => g.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub iterations: usize,
    /// Step size; `None` means `0.1 / n`.
    pub learning_rate: Option<f64>,
    /// L1 bound on each per-example gradient.
    pub clip: f64,
    pub epsilon: Epsilon,
}

impl SgdConfig {
    pub fn new(epsilon: Epsilon) -> Self {
        SgdConfig {
            iterations: 100,
            learning_rate: None,
            clip: 1.0,
            epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return input("DPSGD needs at least one iteration");
        }
        if let Some(eta) = self.learning_rate {
            if !(eta > 0.0 && eta.is_finite()) {
                return input(format!("learning rate {eta} must be positive"));
            }
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return input(format!("clip bound {} must be positive", self.clip));
        }
        Ok(())
    }

    pub fn step_size(&self, n: usize) -> f64 {
        self.learning_rate.unwrap_or(0.1 / n as f64)
    }

    /// Per-coordinate Laplace scale of each iteration: the summed clipped
    /// gradient has L1 sensitivity `2C`, spent at `epsilon / T`.
    pub fn noise_scale(&self) -> Option<f64> {
        self.epsilon
            .value()
            .map(|e| 2.0 * self.clip * self.iterations as f64 / e)
    }
}

/// Sequential-composition accountant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetAccountant {
    pub total: Epsilon,
    pub iterations: usize,
    pub spent_iterations: usize,
}

impl BudgetAccountant {
    pub fn per_iteration(&self) -> Option<f64> {
        self.total.value().map(|e| e / self.iterations as f64)
    }

    /// Budget consumed so far; equals the total after the last iteration.
    pub fn spent(&self) -> Option<f64> {
        self.total
            .value()
            .map(|e| e * self.spent_iterations as f64 / self.iterations as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpsgdOutput {
    pub model: Model,
    /// Noise added to each coordinate, one row per iteration.
    pub draws: Vec<Vec<f64>>,
    pub accountant: BudgetAccountant,
}

/// Per-example gradient of the squared error or log-loss at `w`.
pub fn example_gradient(task: TaskKind, x: &[f64], y: f64, w: &[f64]) -> Vec<f64> {
    let z: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum();
    let r = match task {
        TaskKind::Linear => 2.0 * (z - y),
        TaskKind::Logistic => sigmoid(z) - y,
    };
    x.iter().map(|v| r * v).collect()
}

/// Scales `g` onto the L1 ball of radius `c` when it lies outside.
pub fn clip_l1(g: &mut [f64], c: f64) {
    let norm: f64 = g.iter().map(|v| v.abs()).sum();
    if norm > c {
        let s = c / norm;
        g.iter_mut().for_each(|v| *v *= s);
    }
}

/// Full-batch gradient descent with clipped per-example gradients and
/// Laplace noise on every iteration's summed gradient.
pub fn dpsgd(ds: &Dataset, cfg: &SgdConfig, seed: u64) -> Result<DpsgdOutput> {
    cfg.validate()?;
    if ds.is_empty() {
        return input("cannot train on an empty dataset");
    }
    let (d, task) = (ds.dim(), ds.task());
    let eta = cfg.step_size(ds.len());
    let scale = cfg.noise_scale();
    let mut stream = NoiseStream::new(seed, StreamId::Aux(0x5347_44));
    let mut w = vec![0.0; d];
    let mut draws = Vec::with_capacity(if scale.is_some() { cfg.iterations } else { 0 });
    let mut acc = BudgetAccountant {
        total: cfg.epsilon,
        iterations: cfg.iterations,
        spent_iterations: 0,
    };
    for _ in 0..cfg.iterations {
        let mut sum = vec![0.0; d];
        for r in ds.records() {
            let mut g = example_gradient(task, &r.features, r.label, &w);
            clip_l1(&mut g, cfg.clip);
            sum.iter_mut().zip(&g).for_each(|(s, v)| *s += v);
        }
        if let Some(scale) = scale {
            let noise = (0..d)
                .map(|_| laplace_sample(scale, &mut stream))
                .collect::<Result<Vec<f64>>>()?;
            sum.iter_mut().zip(&noise).for_each(|(s, v)| *s += v);
            draws.push(noise);
        }
        w.iter_mut().zip(&sum).for_each(|(wi, g)| *wi -= eta * g);
        acc.spent_iterations += 1;
    }
    Ok(DpsgdOutput {
        model: Model::new(w, task)?,
        draws,
        accountant: acc,
    })
}
