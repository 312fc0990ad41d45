//! Fitting series coefficients to kernel weights.
//!
//! The loss for one filter is the mean squared error over its `K^2` grid
//! samples,
//!
//! ```text
//! L(a) = 1/K^2 * || Phi a - w ||^2,      dL/da = 2/K^2 * Phi^T (Phi a - w)
//! ```
//!
//! which is a convex quadratic in the coefficients. Three solvers are
//! provided: fixed-step gradient descent, the normal equations, and (for
//! `N = K`) the closed-form DCT-II analysis. Filters are independent and are
//! fitted in parallel on the current rayon pool.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::basis::{self, BasisKind, DesignMatrix, SampleGrid};
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Series coefficients for every filter of a layer. Filter `(o, i)` owns the
/// slice `[(o * c_in + i) * n^2 ..][.. n^2]`, indexed `i0 * n + i1`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffTensor {
    c_out: usize,
    c_in: usize,
    n: usize,
    data: Vec<f64>,
}

impl CoeffTensor {
    pub fn new(c_out: usize, c_in: usize, n: usize, data: Vec<f64>) -> Result<Self> {
        if c_out == 0 || c_in == 0 || n == 0 {
            return Err(Error::argument(format!(
                "coefficient extents ({c_out}, {c_in}, {n}) must be positive"
            )));
        }
        let want = c_out
            .checked_mul(c_in)
            .and_then(|v| v.checked_mul(n * n))
            .ok_or_else(|| Error::argument("coefficient extents overflow"))?;
        if data.len() != want {
            return Err(Error::argument(format!(
                "coefficient tensor ({c_out}, {c_in}, {n}) needs {want} values, got {}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite coefficient {v}")));
        }
        Ok(CoeffTensor { c_out, c_in, n, data })
    }

    pub fn zeros(c_out: usize, c_in: usize, n: usize) -> Result<Self> {
        Self::new(c_out, c_in, n, vec![0.0; c_out * c_in * n * n])
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn filter_count(&self) -> usize {
        self.c_out * self.c_in
    }

    pub fn filter(&self, o: usize, i: usize) -> &[f64] {
        let len = self.n * self.n;
        let start = (o * self.c_in + i) * len;
        &self.data[start..start + len]
    }

    pub fn filters(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.n * self.n)
    }

    /// Same extents with values replaced, e.g. after quantization.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.c_out, self.c_in, self.n, data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// DC coefficient set to the filter mean, everything else zero.
    ChebyshevMeanDc,
    /// i.i.d. `N(0, 1 / (C_in K^2))`, one stream per filter derived from the
    /// seed.
    GaussianRandom { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitMethod {
    GradientDescent,
    LeastSquares,
    ClosedFormDct,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub max_iters: usize,
    /// Descent stops once the gradient max-norm drops below this.
    pub grad_tol: f64,
    pub init: Init,
    pub method: FitMethod,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            learning_rate: 0.05,
            max_iters: 2000,
            grad_tol: 1e-10,
            init: Init::ChebyshevMeanDc,
            method: FitMethod::LeastSquares,
        }
    }
}

impl FitConfig {
    /// Defaults with the initialization each basis responds best to: random
    /// for cosine, mean-DC for Chebyshev.
    pub fn for_basis(kind: BasisKind, seed: u64) -> Self {
        let init = match kind {
            BasisKind::Cosine => Init::GaussianRandom { seed },
            BasisKind::Chebyshev => Init::ChebyshevMeanDc,
        };
        FitConfig {
            init,
            ..FitConfig::default()
        }
    }

    pub fn with_method(mut self, method: FitMethod) -> Self {
        self.method = method;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::argument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::argument("max_iters must be at least 1"));
        }
        if self.grad_tol.is_nan() || self.grad_tol <= 0.0 {
            return Err(Error::argument(format!(
                "grad_tol must be positive, got {}",
                self.grad_tol
            )));
        }
        Ok(())
    }
}

/// Per-filter diagnostics, in `(o, i)` row-major order.
///
/// Only `mse` is persisted with a compressed layer; the other vectors are
/// empty on a layer loaded from disk.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitReport {
    pub mse: Vec<f64>,
    pub max_abs_residual: Vec<f64>,
    /// Accepted descent steps; zero for the direct solvers.
    pub iterations: Vec<usize>,
    /// Filters whose normal equations could not be factored and were fitted
    /// by gradient descent instead.
    pub fallback: Vec<usize>,
}

impl FitReport {
    pub fn from_mse(mse: Vec<f64>) -> Self {
        FitReport {
            mse,
            ..FitReport::default()
        }
    }

    pub fn max_iterations(&self) -> usize {
        self.iterations.iter().copied().max().unwrap_or(0)
    }

    pub fn mean_mse(&self) -> f64 {
        if self.mse.is_empty() {
            0.0
        } else {
            self.mse.iter().sum::<f64>() / self.mse.len() as f64
        }
    }

    pub fn max_mse(&self) -> f64 {
        self.mse.iter().copied().fold(0.0, f64::max)
    }
}

pub fn init_chebyshev(kernels: &Tensor4, n: usize) -> Result<CoeffTensor> {
    if n == 0 {
        return Err(Error::argument("harmonic count must be at least 1"));
    }
    let mut data = vec![0.0; kernels.filter_count() * n * n];
    for (coeffs, filter) in data.chunks_exact_mut(n * n).zip(kernels.filters()) {
        // Shifted by the first tap, so a constant filter gets its value back exactly.
        let pivot = filter[0];
        coeffs[0] = pivot + filter.iter().map(|w| w - pivot).sum::<f64>() / filter.len() as f64;
    }
    CoeffTensor::new(kernels.c_out(), kernels.c_in(), n, data)
}

fn filter_rng(seed: u64, flat_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(flat_index as u64);
    rng
}

fn gaussian_filter(seed: u64, flat_index: usize, std_dev: f64, out: &mut [f64]) {
    let normal = Normal::new(0.0, std_dev).expect("std dev is positive and finite");
    let mut rng = filter_rng(seed, flat_index);
    for v in out {
        *v = normal.sample(&mut rng);
    }
}

fn gaussian_std(c_in: usize, k: usize) -> f64 {
    (1.0 / (c_in as f64 * (k * k) as f64)).sqrt()
}

pub fn init_gaussian(c_out: usize, c_in: usize, k: usize, n: usize, seed: u64) -> Result<CoeffTensor> {
    if n == 0 || k == 0 || c_in == 0 || c_out == 0 {
        return Err(Error::argument("extents and harmonic count must be positive"));
    }
    let std_dev = gaussian_std(c_in, k);
    let mut data = vec![0.0; c_out * c_in * n * n];
    for (idx, coeffs) in data.chunks_exact_mut(n * n).enumerate() {
        gaussian_filter(seed, idx, std_dev, coeffs);
    }
    CoeffTensor::new(c_out, c_in, n, data)
}

fn check_shapes(filter: &[f64], coeffs: &[f64], grid: &SampleGrid) -> Result<usize> {
    let k = grid.k();
    if filter.len() != k * k {
        return Err(Error::argument(format!(
            "filter has {} weights, grid expects {}",
            filter.len(),
            k * k
        )));
    }
    let n = (coeffs.len() as f64).sqrt().round() as usize;
    if n * n != coeffs.len() {
        return Err(Error::argument(format!(
            "{} coefficients is not a square count",
            coeffs.len()
        )));
    }
    basis::check_harmonics(k, n)?;
    Ok(n)
}

/// Mean squared error between a filter and its series evaluated on `grid`.
pub fn mse_loss(filter: &[f64], coeffs: &[f64], grid: &SampleGrid) -> Result<f64> {
    check_shapes(filter, coeffs, grid)?;
    let kind = grid.kind();
    let sum: f64 = grid
        .points()
        .zip(filter)
        .map(|(p, w)| {
            let r = w - basis::eval_series(kind, coeffs, p);
            r * r
        })
        .sum();
    Ok(sum / filter.len() as f64)
}

/// Exact gradient of [`mse_loss`] with respect to each coefficient.
pub fn mse_gradient(filter: &[f64], coeffs: &[f64], grid: &SampleGrid) -> Result<Vec<f64>> {
    let n = check_shapes(filter, coeffs, grid)?;
    let phi = DesignMatrix::new(grid.kind(), grid.k(), n)?;
    Ok(Quadratic::new(&phi, filter).gradient(coeffs))
}

/// One filter's least-squares objective over a fixed design matrix.
struct Quadratic<'a> {
    phi: &'a DesignMatrix,
    target: &'a [f64],
}

impl<'a> Quadratic<'a> {
    fn new(phi: &'a DesignMatrix, target: &'a [f64]) -> Self {
        Quadratic { phi, target }
    }

    fn residual(&self, coeffs: &[f64]) -> Vec<f64> {
        let mut r = self.phi.apply(coeffs);
        for (ri, w) in r.iter_mut().zip(self.target) {
            *ri -= w;
        }
        r
    }

    fn loss(&self, coeffs: &[f64]) -> f64 {
        let r = self.residual(coeffs);
        r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64
    }

    fn gradient(&self, coeffs: &[f64]) -> Vec<f64> {
        let r = self.residual(coeffs);
        let scale = 2.0 / r.len() as f64;
        let mut g = self.phi.apply_transpose(&r);
        g.iter_mut().for_each(|v| *v *= scale);
        g
    }
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Fixed-step descent; a step that raises the loss is retried at half the
/// rate. Returns the number of accepted steps.
fn descend(q: &Quadratic<'_>, coeffs: &mut [f64], config: &FitConfig) -> usize {
    let mut lr = config.learning_rate;
    let mut loss = q.loss(coeffs);
    let mut trial = vec![0.0; coeffs.len()];
    let mut steps = 0;
    while steps < config.max_iters {
        let g = q.gradient(coeffs);
        if max_norm(&g) < config.grad_tol {
            break;
        }
        loop {
            for ((t, c), gi) in trial.iter_mut().zip(coeffs.iter()).zip(&g) {
                *t = c - lr * gi;
            }
            let next = q.loss(&trial);
            if next <= loss {
                coeffs.copy_from_slice(&trial);
                loss = next;
                break;
            }
            lr *= 0.5;
            if lr < f64::MIN_POSITIVE {
                return steps;
            }
        }
        steps += 1;
    }
    steps
}

/// Solves `(Phi^T Phi) a = Phi^T w` by Cholesky. `None` if the Gram matrix is
/// not numerically positive definite.
fn normal_equations(phi: &DesignMatrix, gram: &DMatrix<f64>, target: &[f64]) -> Option<Vec<f64>> {
    let rhs = DVector::from_vec(phi.apply_transpose(target));
    let chol = gram.clone().cholesky()?;
    let sol = chol.solve(&rhs);
    sol.iter().all(|v| v.is_finite()).then(|| sol.iter().copied().collect())
}

/// DCT-II analysis of a `K x K` filter, normalized so the result is the
/// series coefficient vector at `N = K`.
fn dct2_analysis(filter: &[f64], k: usize) -> Vec<f64> {
    let table: Vec<f64> = (0..k)
        .flat_map(|i| (0..k).map(move |a| (PI * i as f64 * (2 * a + 1) as f64 / (2 * k) as f64).cos()))
        .collect();
    // Rows first: tmp[a][i1] = sum_b w[a][b] cos(i1 theta_b)
    let mut tmp = vec![0.0; k * k];
    for a in 0..k {
        for i1 in 0..k {
            tmp[a * k + i1] = (0..k).map(|b| filter[a * k + b] * table[i1 * k + b]).sum();
        }
    }
    let weight = |i: usize| if i == 0 { 1.0 / k as f64 } else { 2.0 / k as f64 };
    let mut out = vec![0.0; k * k];
    for i0 in 0..k {
        for i1 in 0..k {
            let s: f64 = (0..k).map(|a| tmp[a * k + i1] * table[i0 * k + a]).sum();
            out[i0 * k + i1] = s * weight(i0) * weight(i1);
        }
    }
    out
}

struct FilterFit {
    coeffs: Vec<f64>,
    mse: f64,
    max_abs_residual: f64,
    iterations: usize,
    fell_back: bool,
}

fn initial_coeffs(config: &FitConfig, filter: &[f64], flat_index: usize, n: usize, c_in: usize, k: usize) -> Vec<f64> {
    let mut coeffs = vec![0.0; n * n];
    match config.init {
        Init::ChebyshevMeanDc => coeffs[0] = filter.iter().sum::<f64>() / filter.len() as f64,
        Init::GaussianRandom { seed } => gaussian_filter(seed, flat_index, gaussian_std(c_in, k), &mut coeffs),
    }
    coeffs
}

/// Fits every filter of `kernels` with an `n`-harmonic series of `kind`.
///
/// Non-convergence of gradient descent within `max_iters` is not an error;
/// the report carries whatever loss was reached.
pub fn fit(kernels: &Tensor4, kind: BasisKind, n: usize, config: &FitConfig) -> Result<(CoeffTensor, FitReport)> {
    config.validate()?;
    let k = kernels.square_side()?;
    basis::check_harmonics(k, n)?;
    if config.method == FitMethod::ClosedFormDct && n != k {
        return Err(Error::argument(format!(
            "closed-form DCT needs n = K, got n = {n} with K = {k}"
        )));
    }
    let phi = DesignMatrix::new(kind, k, n)?;
    let gram = DMatrix::from_row_slice(n * n, n * n, &phi.gram());
    let c_in = kernels.c_in();

    let fitted: Vec<FilterFit> = kernels
        .data()
        .par_chunks_exact(k * k)
        .enumerate()
        .map(|(idx, filter)| {
            let q = Quadratic::new(&phi, filter);
            let mut fell_back = false;
            let mut iterations = 0;
            let coeffs = match config.method {
                FitMethod::ClosedFormDct => dct2_analysis(filter, k),
                FitMethod::LeastSquares => match normal_equations(&phi, &gram, filter) {
                    Some(c) => c,
                    None => {
                        fell_back = true;
                        let mut c = initial_coeffs(config, filter, idx, n, c_in, k);
                        iterations = descend(&q, &mut c, config);
                        c
                    }
                },
                FitMethod::GradientDescent => {
                    let mut c = initial_coeffs(config, filter, idx, n, c_in, k);
                    iterations = descend(&q, &mut c, config);
                    c
                }
            };
            let r = q.residual(&coeffs);
            FilterFit {
                mse: r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64,
                max_abs_residual: max_norm(&r),
                coeffs,
                iterations,
                fell_back,
            }
        })
        .collect();

    let mut data = Vec::with_capacity(fitted.len() * n * n);
    let mut report = FitReport::default();
    for (idx, f) in fitted.into_iter().enumerate() {
        data.extend_from_slice(&f.coeffs);
        report.mse.push(f.mse);
        report.max_abs_residual.push(f.max_abs_residual);
        report.iterations.push(f.iterations);
        if f.fell_back {
            report.fallback.push(idx);
        }
    }
    Ok((CoeffTensor::new(kernels.c_out(), c_in, n, data)?, report))
}
