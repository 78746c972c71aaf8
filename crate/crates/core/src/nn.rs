//! Shared numeric plumbing for the small trainable nets: seeded dense
//! initialization, an AdamW optimizer with decoupled weight decay, a
//! warm-up/linear-decay learning-rate schedule, and a pivoted
//! Gaussian-elimination linear solver for closed-form fits.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::error::{Result, SfError};

/// Uniform Glorot initialization: entries in (-s, s), s = sqrt(6 / (rows + cols)).
pub fn glorot_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let scale = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

/// AdamW: Adam moment estimates with weight decay applied directly to the
/// parameters (decoupled), not folded into the gradient.
#[derive(Debug, Clone)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> AdamW {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// One update over a flat parameter vector. The vector's layout must stay
    /// fixed across calls; the moment buffers are sized on first use.
    pub fn step(&mut self, lr: f64, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(SfError::Contract(format!(
                "optimizer got {} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = vec![0.0; params.len()];
            self.v = vec![0.0; params.len()];
        }
        if self.m.len() != params.len() {
            return Err(SfError::Contract(format!(
                "parameter vector length changed from {} to {}",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
        Ok(())
    }
}

/// Linear warm-up to `base_lr` over `warmup` steps, then linear decay to zero
/// at `total` steps. With `total = 0` the rate is constant after warm-up.
#[derive(Debug, Clone, Copy)]
pub struct LinearSchedule {
    pub base_lr: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LinearSchedule {
    pub fn constant(base_lr: f64) -> LinearSchedule {
        LinearSchedule { base_lr, warmup: 0, total: 0 }
    }

    /// Learning rate for 0-indexed optimizer step `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup > 0 && step < self.warmup {
            return self.base_lr * (step + 1) as f64 / self.warmup as f64;
        }
        if self.total > self.warmup {
            let span = (self.total - self.warmup) as f64;
            let done = (step.min(self.total) - self.warmup) as f64;
            return self.base_lr * ((span - done) / span).max(0.0);
        }
        self.base_lr
    }
}

/// Solve A x = b by Gaussian elimination with partial pivoting.
pub fn solve_linear(a: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.len() != n {
        return Err(SfError::Contract(format!(
            "solve_linear needs square A and matching b: A is {}x{}, b has {}",
            a.nrows(),
            a.ncols(),
            b.len()
        )));
    }
    // Augmented working copy.
    let mut w = vec![vec![0.0; n + 1]; n];
    for i in 0..n {
        for j in 0..n {
            w[i][j] = a[(i, j)];
        }
        w[i][n] = b[i];
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| w[i][col].abs().partial_cmp(&w[j][col].abs()).unwrap())
            .unwrap();
        if w[pivot][col].abs() < 1e-12 {
            return Err(SfError::Numerical(
                "singular linear system; a positive ridge term would regularize it".into(),
            ));
        }
        w.swap(col, pivot);
        for row in col + 1..n {
            let factor = w[row][col] / w[col][col];
            if factor == 0.0 {
                continue;
            }
            for j in col..=n {
                w[row][j] -= factor * w[col][j];
            }
        }
    }
    let mut x = Array1::zeros(n);
    for col in (0..n).rev() {
        let mut acc = w[col][n];
        for j in col + 1..n {
            acc -= w[col][j] * x[j];
        }
        x[col] = acc / w[col][col];
    }
    Ok(x)
}
