//! Gaussian-process belief over the intensity field.
//!
//! Exact GP regression with an isotropic RBF kernel, kept factorized as a
//! packed lower-triangular Cholesky factor of the regularized Gram matrix.
//! Observations are appended by a rank-1 extension of the factor, which is
//! required to agree with a from-scratch batch refit to 1e-8.
//!
//! [`TrackedGp`] layers a fixed probe set (e.g. the uncertainty grid plus the
//! roadmap nodes) on top of [`GpModel`] and maintains running posterior means
//! and variances at every probe, so one new observation costs O(M·P) instead
//! of a full re-prediction.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GpError {
    #[error("invalid GP hyperparameters: {0}")]
    BadHyper(&'static str),
    #[error("Gram factorization failed even with jitter {max_jitter:e}")]
    Numerical { max_jitter: f64 },
}

/// Deterministic diagonal regularization: always added to the Gram diagonal,
/// escalated ×10 on factorization failure up to [`MAX_JITTER`].
pub const BASE_JITTER: f64 = 1e-8;
pub const MAX_JITTER: f64 = 1e-2;

/// RBF kernel hyperparameters plus observation noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    /// Correlation length in unit-square distance.
    pub lengthscale: f64,
    /// Prior (signal) variance σ_f².
    pub signal_var: f64,
    /// Observation noise variance σ_n².
    pub noise_var: f64,
}

impl Default for GpHyper {
    fn default() -> Self {
        GpHyper {
            lengthscale: 0.125,
            signal_var: 1.0,
            noise_var: 1e-4,
        }
    }
}

impl GpHyper {
    pub fn validate(&self) -> Result<(), GpError> {
        if !(self.lengthscale > 0.0) || !self.lengthscale.is_finite() {
            return Err(GpError::BadHyper("lengthscale must be positive"));
        }
        if !(self.signal_var > 0.0) || !self.signal_var.is_finite() {
            return Err(GpError::BadHyper("signal_var must be positive"));
        }
        if !(self.noise_var >= 0.0) || !self.noise_var.is_finite() {
            return Err(GpError::BadHyper("noise_var must be non-negative"));
        }
        Ok(())
    }

    /// k(a, b) = σ_f² · exp(−‖a−b‖² / (2ℓ²))
    pub fn kernel(&self, a: [f64; 2], b: [f64; 2]) -> f64 {
        let dx = a[0] - b[0];
        let dy = a[1] - b[1];
        let d2 = dx * dx + dy * dy;
        self.signal_var * (-d2 / (2.0 * self.lengthscale * self.lengthscale)).exp()
    }
}

/// Exact GP regressor with zero prior mean.
///
/// Internally stores L (packed row-major lower triangle) with
/// L·Lᵀ = K(X,X) + (σ_n² + jitter)·I, and β = L⁻¹Y. The mean at a query z is
/// w_zᵀβ with w_z = L⁻¹k(X,z); the variance is k(z,z) − ‖w_z‖².
#[derive(Debug, Clone, PartialEq)]
pub struct GpModel {
    hyper: GpHyper,
    xs: Vec<[f64; 2]>,
    ys: Vec<f64>,
    /// Packed lower triangle: row i occupies chol[i(i+1)/2 .. i(i+1)/2 + i + 1].
    chol: Vec<f64>,
    /// β = L⁻¹ Y, maintained by forward substitution as rows are appended.
    beta: Vec<f64>,
    jitter: f64,
}

impl GpModel {
    pub fn new(hyper: GpHyper) -> Result<Self, GpError> {
        hyper.validate()?;
        Ok(GpModel {
            hyper,
            xs: Vec::new(),
            ys: Vec::new(),
            chol: Vec::new(),
            beta: Vec::new(),
            jitter: BASE_JITTER,
        })
    }

    /// Batch constructor: factorizes the full Gram matrix, escalating jitter
    /// on failure.
    pub fn fit(hyper: GpHyper, xs: &[[f64; 2]], ys: &[f64]) -> Result<Self, GpError> {
        assert_eq!(xs.len(), ys.len(), "xs/ys length mismatch");
        let mut model = GpModel::new(hyper)?;
        model.xs = xs.to_vec();
        model.ys = ys.to_vec();
        model.refit()?;
        Ok(model)
    }

    pub fn hyper(&self) -> &GpHyper {
        &self.hyper
    }

    pub fn n_obs(&self) -> usize {
        self.xs.len()
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn observations(&self) -> (&[[f64; 2]], &[f64]) {
        (&self.xs, &self.ys)
    }

    fn row(&self, i: usize) -> &[f64] {
        let base = i * (i + 1) / 2;
        &self.chol[base..base + i + 1]
    }

    /// Solves L v = b in place (forward substitution).
    fn forward_solve(&self, b: &mut [f64]) {
        for i in 0..b.len() {
            let row = self.row(i);
            let mut acc = b[i];
            for j in 0..i {
                acc -= row[j] * b[j];
            }
            b[i] = acc / row[i];
        }
    }

    /// Computes the next Cholesky row for a point x given the current factor.
    /// Returns (l, d) with L_new = [[L, 0], [lᵀ, d]], or None when the pivot
    /// is not positive at the current jitter. Only the already-factored
    /// observations participate (during refit, xs is ahead of the factor).
    fn next_row(&self, x: [f64; 2]) -> Option<(Vec<f64>, f64)> {
        let factored = self.beta.len();
        let mut l: Vec<f64> = self.xs[..factored]
            .iter()
            .map(|&xi| self.hyper.kernel(x, xi))
            .collect();
        self.forward_solve(&mut l);
        let self_cov = self.hyper.kernel(x, x) + self.hyper.noise_var + self.jitter;
        let d2 = self_cov - l.iter().map(|v| v * v).sum::<f64>();
        if d2 > 0.0 && d2.is_finite() {
            Some((l, d2.sqrt()))
        } else {
            None
        }
    }

    /// Rebuilds the factorization from stored observations, escalating the
    /// jitter ladder from its current level on pivot failure.
    fn refit(&mut self) -> Result<(), GpError> {
        loop {
            if self.try_refit() {
                return Ok(());
            }
            if self.jitter >= MAX_JITTER {
                return Err(GpError::Numerical {
                    max_jitter: MAX_JITTER,
                });
            }
            self.jitter *= 10.0;
        }
    }

    fn try_refit(&mut self) -> bool {
        let n = self.xs.len();
        self.chol.clear();
        self.chol.reserve(n * (n + 1) / 2);
        self.beta.clear();
        for i in 0..n {
            match self.next_row(self.xs[i]) {
                Some((l, d)) => {
                    let beta_i = (self.ys[i]
                        - l.iter().zip(&self.beta).map(|(a, b)| a * b).sum::<f64>())
                        / d;
                    self.chol.extend_from_slice(&l);
                    self.chol.push(d);
                    self.beta.push(beta_i);
                }
                None => return false,
            }
        }
        true
    }

    /// Appends one observation in place via rank-1 Cholesky extension,
    /// falling back to a jittered refit when the pivot fails.
    pub fn observe(&mut self, x: [f64; 2], y: f64) -> Result<(), GpError> {
        match self.next_row(x) {
            Some((l, d)) => {
                let beta_new = (y - l.iter().zip(&self.beta).map(|(a, b)| a * b).sum::<f64>()) / d;
                self.chol.extend_from_slice(&l);
                self.chol.push(d);
                self.beta.push(beta_new);
                self.xs.push(x);
                self.ys.push(y);
                Ok(())
            }
            None => {
                self.xs.push(x);
                self.ys.push(y);
                if self.jitter >= MAX_JITTER {
                    return Err(GpError::Numerical {
                        max_jitter: MAX_JITTER,
                    });
                }
                self.jitter *= 10.0;
                self.refit()
            }
        }
    }

    /// Value semantics: returns an extended copy, leaving `self` untouched.
    pub fn add_observation(&self, x: [f64; 2], y: f64) -> Result<GpModel, GpError> {
        let mut next = self.clone();
        next.observe(x, y)?;
        Ok(next)
    }

    /// α = (K+σ_n²I)⁻¹Y, recovered from β by back substitution.
    pub fn alpha(&self) -> Vec<f64> {
        let n = self.beta.len();
        let mut a = self.beta.clone();
        for i in (0..n).rev() {
            a[i] /= self.row(i)[i];
            let ai = a[i];
            for j in 0..i {
                // Column i of Lᵀ lives in the packed rows below.
                a[j] -= self.row(i)[j] * ai;
            }
        }
        a
    }

    /// Posterior mean and variance at each query point (diagonal-only path).
    /// With no observations this is the prior: mean 0, variance σ_f².
    pub fn predict(&self, xstar: &[[f64; 2]]) -> (Vec<f64>, Vec<f64>) {
        let mut means = Vec::with_capacity(xstar.len());
        let mut vars = Vec::with_capacity(xstar.len());
        for &z in xstar {
            let mut w: Vec<f64> = self.xs.iter().map(|&xi| self.hyper.kernel(z, xi)).collect();
            self.forward_solve(&mut w);
            let mean = w.iter().zip(&self.beta).map(|(a, b)| a * b).sum::<f64>();
            let var = self.hyper.kernel(z, z) - w.iter().map(|v| v * v).sum::<f64>();
            means.push(mean);
            vars.push(var);
        }
        (means, vars)
    }

    /// Posterior mean and full covariance matrix over the query points.
    pub fn predict_full(&self, xstar: &[[f64; 2]]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let t = xstar.len();
        let mut ws: Vec<Vec<f64>> = Vec::with_capacity(t);
        let mut means = Vec::with_capacity(t);
        for &z in xstar {
            let mut w: Vec<f64> = self.xs.iter().map(|&xi| self.hyper.kernel(z, xi)).collect();
            self.forward_solve(&mut w);
            means.push(w.iter().zip(&self.beta).map(|(a, b)| a * b).sum::<f64>());
            ws.push(w);
        }
        let mut cov = vec![vec![0.0; t]; t];
        for s in 0..t {
            for u in s..t {
                let cross: f64 = ws[s].iter().zip(&ws[u]).map(|(a, b)| a * b).sum();
                let c = self.hyper.kernel(xstar[s], xstar[u]) - cross;
                cov[s][u] = c;
                cov[u][s] = c;
            }
        }
        (means, cov)
    }

    /// Tr(P) over the given points: sum of posterior variances, computed on
    /// the diagonal-only path (no T×T allocation).
    pub fn trace_cov(&self, grid: &[[f64; 2]]) -> f64 {
        let (_, vars) = self.predict(grid);
        vars.iter().sum()
    }
}

/// A query point's solved context against the current factorization:
/// w = L⁻¹ k(X, z). Lets callers form posterior covariances between
/// hypothetical measurement points and the tracked probes without touching
/// the full model again.
#[derive(Debug, Clone)]
pub struct PointContext {
    pub pos: [f64; 2],
    w: Vec<f64>,
}

/// [`GpModel`] plus running posterior mean/variance over a fixed probe set.
///
/// Rows of W = L⁻¹K(X, probes) are cached per observation, so appending an
/// observation updates every probe's mean and variance with one pass over the
/// cached rows: O(M·P) instead of a fresh O(M²) solve per probe.
#[derive(Debug, Clone)]
pub struct TrackedGp {
    model: GpModel,
    probes: Vec<[f64; 2]>,
    /// w_rows[i][p] = (L⁻¹ K(X, probes))[i][p]
    w_rows: Vec<Vec<f64>>,
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl TrackedGp {
    pub fn new(hyper: GpHyper, probes: Vec<[f64; 2]>) -> Result<Self, GpError> {
        let model = GpModel::new(hyper)?;
        let var = probes.iter().map(|&p| hyper.kernel(p, p)).collect();
        let mean = vec![0.0; probes.len()];
        Ok(TrackedGp {
            model,
            probes,
            w_rows: Vec::new(),
            mean,
            var,
        })
    }

    pub fn model(&self) -> &GpModel {
        &self.model
    }

    pub fn probes(&self) -> &[[f64; 2]] {
        &self.probes
    }

    pub fn n_obs(&self) -> usize {
        self.model.n_obs()
    }

    pub fn mean_at(&self, probe: usize) -> f64 {
        self.mean[probe]
    }

    /// Posterior variance at a probe, clamped at zero (running subtraction
    /// can drift a few ulps negative once variance is numerically zero).
    pub fn var_at(&self, probe: usize) -> f64 {
        self.var[probe].max(0.0)
    }

    /// Sum of posterior variances over a contiguous probe range.
    pub fn trace_over(&self, range: Range<usize>) -> f64 {
        self.var[range].iter().map(|v| v.max(0.0)).sum()
    }

    pub fn observe(&mut self, x: [f64; 2], y: f64) -> Result<(), GpError> {
        match self.model.next_row(x) {
            Some((l, d)) => {
                let beta_new =
                    (y - l.iter().zip(&self.model.beta).map(|(a, b)| a * b).sum::<f64>()) / d;
                // New W row: (k(x, probes) − lᵀ·W) / d, accumulated row-wise
                // over the cache for sequential memory access.
                let mut w_new: Vec<f64> =
                    self.probes.iter().map(|&p| self.model.hyper.kernel(x, p)).collect();
                for (li, row) in l.iter().zip(&self.w_rows) {
                    for (acc, wv) in w_new.iter_mut().zip(row) {
                        *acc -= li * wv;
                    }
                }
                for ((wv, m), v) in w_new.iter_mut().zip(&mut self.mean).zip(&mut self.var) {
                    *wv /= d;
                    *m += beta_new * *wv;
                    *v -= *wv * *wv;
                }
                self.model.chol.extend_from_slice(&l);
                self.model.chol.push(d);
                self.model.beta.push(beta_new);
                self.model.xs.push(x);
                self.model.ys.push(y);
                self.w_rows.push(w_new);
                Ok(())
            }
            None => {
                // Pivot failure: hand the whole problem back to the jittered
                // refit, then rebuild the probe caches from scratch.
                self.model.xs.push(x);
                self.model.ys.push(y);
                if self.model.jitter >= MAX_JITTER {
                    return Err(GpError::Numerical {
                        max_jitter: MAX_JITTER,
                    });
                }
                self.model.jitter *= 10.0;
                self.model.refit()?;
                self.rebuild_caches();
                Ok(())
            }
        }
    }

    fn rebuild_caches(&mut self) {
        let m = self.model.n_obs();
        let p = self.probes.len();
        self.w_rows.clear();
        for i in 0..m {
            let row = {
                let li = self.model.row(i);
                let mut w: Vec<f64> = self
                    .probes
                    .iter()
                    .map(|&pt| self.model.hyper.kernel(self.model.xs[i], pt))
                    .collect();
                for (j, prev) in self.w_rows.iter().enumerate() {
                    let lij = li[j];
                    for (acc, wv) in w.iter_mut().zip(prev) {
                        *acc -= lij * wv;
                    }
                }
                let d = li[i];
                for wv in w.iter_mut() {
                    *wv /= d;
                }
                w
            };
            self.w_rows.push(row);
        }
        for q in 0..p {
            let mut mean = 0.0;
            let mut reduction = 0.0;
            for (row, b) in self.w_rows.iter().zip(&self.model.beta) {
                mean += b * row[q];
                reduction += row[q] * row[q];
            }
            self.mean[q] = mean;
            self.var[q] = self.model.hyper.kernel(self.probes[q], self.probes[q]) - reduction;
        }
    }

    /// Solves a hypothetical point against the current factorization.
    pub fn point_context(&self, z: [f64; 2]) -> PointContext {
        let mut w: Vec<f64> = self
            .model
            .xs
            .iter()
            .map(|&xi| self.model.hyper.kernel(z, xi))
            .collect();
        self.model.forward_solve(&mut w);
        PointContext { pos: z, w }
    }

    /// Posterior covariance between two hypothetical points.
    pub fn ctx_cov(&self, a: &PointContext, b: &PointContext) -> f64 {
        let cross: f64 = a.w.iter().zip(&b.w).map(|(x, y)| x * y).sum();
        self.model.hyper.kernel(a.pos, b.pos) - cross
    }

    /// Posterior covariance between a hypothetical point and every probe in
    /// `range`, in probe order.
    pub fn ctx_cross_to_probes(&self, ctx: &PointContext, range: Range<usize>) -> Vec<f64> {
        let mut c: Vec<f64> = self.probes[range.clone()]
            .iter()
            .map(|&p| self.model.hyper.kernel(ctx.pos, p))
            .collect();
        for (wi, row) in ctx.w.iter().zip(&self.w_rows) {
            for (acc, wv) in c.iter_mut().zip(&row[range.clone()]) {
                *acc -= wi * wv;
            }
        }
        c
    }
}

/// Uniform g×g grid over [0,1]² in row-major order (used as the canonical
/// uncertainty grid). Points sit at cell centers so no probe lies on the
/// domain boundary.
pub fn uniform_grid(g: usize) -> Vec<[f64; 2]> {
    let mut pts = Vec::with_capacity(g * g);
    for r in 0..g {
        for c in 0..g {
            pts.push([(c as f64 + 0.5) / g as f64, (r as f64 + 0.5) / g as f64]);
        }
    }
    pts
}
