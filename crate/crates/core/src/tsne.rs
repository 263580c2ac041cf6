//! Exact t-SNE to two dimensions.
//!
//! Input affinities come from per-point Gaussian kernels whose bandwidths are
//! calibrated to a target perplexity; output affinities use a Student-t
//! kernel with one degree of freedom. Optimization is gradient descent with
//! momentum, per-coordinate adaptive gains and early exaggeration.

use nalgebra::{DMatrix, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{mix, stream_rng, Stream};

#[derive(Debug, Error)]
pub enum TsneError {
    #[error("perplexity {target} cannot be reached with {neighbors} neighbours")]
    CalibrationFailed { target: f64, neighbors: usize },
    #[error("need at least {need} rows, found {found}")]
    TooFewRows { need: usize, found: usize },
    #[error("input has non-finite cells")]
    NonFinite,
    #[error("invalid t-SNE config: {0}")]
    InvalidConfig(String),
}

pub type Result<T, E = TsneError> = std::result::Result<T, E>;

const FLOOR: f64 = 1e-12;

/// Conditional distribution over the other points of one row.
#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub probabilities: Vec<f64>,
    /// Kernel precision `1 / (2σ_i²)`.
    pub precision: f64,
    pub perplexity: f64,
    /// All distances equal, so the row is uniform whatever the bandwidth.
    pub degenerate: bool,
}

fn row_distribution(sq: &[f64], dmin: f64, precision: f64) -> (Vec<f64>, f64) {
    let weights: Vec<f64> = sq.iter().map(|d| (-(d - dmin) * precision).exp()).collect();
    let total: f64 = weights.iter().sum();
    let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let entropy = -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
    (probs, entropy)
}

/// Binary search on the kernel precision so that `2^H(P_i)` equals the
/// target perplexity. `sq_distances` excludes the point itself.
pub fn perplexity_calibration(sq_distances: &[f64], target: f64) -> Result<Calibration> {
    let m = sq_distances.len();
    let fail = TsneError::CalibrationFailed { target, neighbors: m };
    if m < 2 || sq_distances.iter().any(|d| !d.is_finite() || *d < 0.0) || !(target > 1.0) {
        return Err(fail);
    }
    let dmin = sq_distances.iter().copied().fold(f64::INFINITY, f64::min);
    let dmax = sq_distances.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let goal = target.ln();
    if dmax - dmin <= 0.0 {
        return Ok(Calibration { probabilities: vec![1.0 / m as f64; m], precision: 0.0, perplexity: m as f64, degenerate: true });
    }
    let ties = sq_distances.iter().filter(|&&d| d == dmin).count() as f64;
    if goal >= (m as f64).ln() || goal <= ties.ln() {
        return Err(fail);
    }
    let entropy = |beta: f64| row_distribution(sq_distances, dmin, beta).1;
    // bracket in log-precision, starting from the scale of the distances
    let mut lo = (1.0 / (dmax - dmin)).ln();
    let mut hi = lo;
    let mut steps = 0;
    while entropy(lo.exp()) < goal {
        lo -= std::f64::consts::LN_2;
        steps += 1;
        if steps > 2000 {
            return Err(fail);
        }
    }
    while entropy(hi.exp()) > goal {
        hi += std::f64::consts::LN_2;
        steps += 1;
        if steps > 2000 {
            return Err(fail);
        }
    }
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..50 {
        mid = 0.5 * (lo + hi);
        let h = entropy(mid.exp());
        if (h - goal).abs() < 1e-13 {
            break;
        }
        if h > goal {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let precision = mid.exp();
    let (probabilities, h) = row_distribution(sq_distances, dmin, precision);
    Ok(Calibration { probabilities, precision, perplexity: h.exp(), degenerate: false })
}

/// KL(P‖Q) and its gradient for a symmetric joint `P` (n×n, zero diagonal)
/// and coordinates `Y` (n×2).
pub fn tsne_cost_grad(p: &DMatrix<f64>, y: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
    let state = Pass::run(p, y, 1.0);
    let p_entropy: f64 = p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum();
    (state.cost(p_entropy), state.grad)
}

struct Pass {
    grad: DMatrix<f64>,
    /// `Σ p_ij ln(1 + d_ij²)` with the unexaggerated P.
    p_log_kernel: f64,
    /// `Σ_{i≠j} (1 + d_ij²)^{-1}`.
    z: f64,
    p_mass: f64,
}

impl Pass {
    /// One sweep over all pairs. The gradient splits into an attractive part
    /// `Σ_j αp_ij k_ij (y_i − y_j)` and a repulsive part
    /// `Σ_j k_ij² (y_i − y_j) / Z`, so Z is not needed until the end.
    fn run(p: &DMatrix<f64>, y: &DMatrix<f64>, exaggeration: f64) -> Pass {
        let n = y.nrows();
        let y0: Vec<f64> = y.column(0).iter().copied().collect();
        let y1: Vec<f64> = y.column(1).iter().copied().collect();
        let rows: Vec<[f64; 7]> = (0..n)
            .into_par_iter()
            .map(|i| {
                // P is symmetric with a zero diagonal; its column is contiguous.
                // The j = i term adds exactly 1 to the kernel sum and nothing else.
                let pi = p.column(i);
                let (yi0, yi1) = (y0[i], y1[i]);
                let mut acc = [0.0; 7];
                for ((&a0, &a1), &pij) in y0.iter().zip(&y1).zip(pi.iter()) {
                    let (d0, d1) = (yi0 - a0, yi1 - a1);
                    let k = 1.0 / (1.0 + d0 * d0 + d1 * d1);
                    acc[0] += k;
                    if pij > 0.0 {
                        acc[1] -= pij * k.ln();
                        acc[2] += pij;
                    }
                    let a = exaggeration * pij * k;
                    acc[3] += a * d0;
                    acc[4] += a * d1;
                    let r = k * k;
                    acc[5] += r * d0;
                    acc[6] += r * d1;
                }
                acc[0] -= 1.0;
                acc
            })
            .collect();
        let z: f64 = rows.iter().map(|r| r[0]).sum();
        let p_log_kernel: f64 = rows.iter().map(|r| r[1]).sum();
        let p_mass: f64 = rows.iter().map(|r| r[2]).sum();
        let mut grad = DMatrix::zeros(n, 2);
        for (i, r) in rows.iter().enumerate() {
            grad[(i, 0)] = 4.0 * (r[3] - r[5] / z);
            grad[(i, 1)] = 4.0 * (r[4] - r[6] / z);
        }
        Pass { grad, p_log_kernel, z, p_mass }
    }

    /// `Σ p ln p − Σ p ln q`, with `ln q = ln k − ln Z`.
    fn cost(&self, p_entropy: f64) -> f64 {
        (p_entropy + self.p_log_kernel + self.p_mass * self.z.max(FLOOR).ln()).max(0.0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TsneInit {
    #[default]
    Random,
    Pca,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub total_iters: usize,
    pub learning_rate: f64,
    pub momentum_initial: f64,
    pub momentum_final: f64,
    pub momentum_switch_iter: usize,
    pub init: TsneInit,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            total_iters: 1000,
            learning_rate: 200.0,
            momentum_initial: 0.5,
            momentum_final: 0.8,
            momentum_switch_iter: 250,
            init: TsneInit::Random,
            seed: 0,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        let bad = |m: &str| Err(TsneError::InvalidConfig(m.to_string()));
        if !(self.perplexity > 1.0 && self.perplexity < n as f64 - 1.0) {
            return bad(&format!("perplexity {} outside (1, {})", self.perplexity, n as f64 - 1.0));
        }
        if !(self.early_exaggeration > 0.0 && self.learning_rate > 0.0) {
            return bad("exaggeration and learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum_initial) || !(0.0..1.0).contains(&self.momentum_final) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.exaggeration_iters > self.total_iters {
            return bad("exaggeration phase longer than the run");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub coords: Vec<[f64; 2]>,
    /// KL cost (unexaggerated) before each iteration, plus the final value.
    pub cost_trace: Vec<f64>,
    pub config: TsneConfig,
    pub seed: u64,
    /// Rows whose neighbour distances were all equal.
    pub degenerate_rows: Vec<usize>,
}

impl Embedding {
    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.coords.len(), 2, |i, j| self.coords[i][j])
    }
}

/// Z-scores each column; constant columns become zero.
pub fn standardize_columns(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for j in 0..x.ncols() {
        let col: Vec<f64> = x.column(j).iter().copied().collect();
        let m = crate::stats::mean(&col);
        let sd = crate::stats::sample_variance(&col).sqrt();
        out.column_mut(j).apply(|v| *v = if sd > 0.0 { (*v - m) / sd } else { 0.0 });
    }
    out
}

fn squared_distances(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    let n = x.nrows();
    (0..n)
        .into_par_iter()
        .map(|i| (0..n).filter(|&j| j != i).map(|j| (x.row(i) - x.row(j)).norm_squared()).collect())
        .collect()
}

/// Symmetrized joint affinities `(P_{j|i} + P_{i|j}) / 2n`.
pub fn joint_probabilities(x: &DMatrix<f64>, perplexity: f64) -> Result<(DMatrix<f64>, Vec<usize>)> {
    let n = x.nrows();
    let rows: Vec<Calibration> =
        squared_distances(x).par_iter().map(|d| perplexity_calibration(d, perplexity)).collect::<Result<_>>()?;
    let mut cond = DMatrix::zeros(n, n);
    for (i, c) in rows.iter().enumerate() {
        for (k, &pv) in c.probabilities.iter().enumerate() {
            let j = if k < i { k } else { k + 1 };
            cond[(i, j)] = pv;
        }
    }
    let joint = (&cond + cond.transpose()) / (2.0 * n as f64);
    let degenerate = rows.iter().enumerate().filter(|(_, c)| c.degenerate).map(|(i, _)| i).collect();
    Ok((joint, degenerate))
}

/// Per-point seeds derived from row contents, so a permutation of the input
/// permutes the initial layout the same way.
fn random_init(x: &DMatrix<f64>, seed: u64) -> DMatrix<f64> {
    let n = x.nrows();
    let mut seen: std::collections::HashMap<u64, u64> = std::collections::HashMap::new();
    let mut y = DMatrix::zeros(n, 2);
    for i in 0..n {
        let h = x.row(i).iter().fold(seed, |h, v| mix(h, v.to_bits()));
        let dup = seen.entry(h).or_insert(0);
        let mut rng = stream_rng(h, Stream::Tsne, *dup);
        *dup += 1;
        for j in 0..2 {
            let z: f64 = StandardNormal.sample(&mut rng);
            y[(i, j)] = 1e-4 * z;
        }
    }
    y
}

fn pca_init(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let mean = x.row_mean();
    let centred = DMatrix::from_fn(n, x.ncols(), |i, j| x[(i, j)] - mean[j]);
    let cov = centred.transpose() * &centred;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut y = DMatrix::zeros(n, 2);
    for (c, &k) in order.iter().take(2).enumerate() {
        let mut v = eig.eigenvectors.column(k).into_owned();
        // sign convention: largest-magnitude loading positive
        if v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a }) < 0.0 {
            v = -v;
        }
        y.set_column(c, &(&centred * v));
    }
    let sd = (y.column(0).norm_squared() / n as f64).sqrt();
    if sd > 0.0 {
        y *= 1e-4 / sd;
    }
    y
}

fn recentre(y: &mut DMatrix<f64>) {
    let m = y.row_mean();
    for i in 0..y.nrows() {
        y[(i, 0)] -= m[0];
        y[(i, 1)] -= m[1];
    }
}

pub fn tsne_embed(x: &DMatrix<f64>, config: &TsneConfig) -> Result<Embedding> {
    let n = x.nrows();
    if n < 5 {
        return Err(TsneError::TooFewRows { need: 5, found: n });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(TsneError::NonFinite);
    }
    config.validate(n)?;
    // run in a canonical row order so sums do not depend on input order
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        x.row(a).iter().zip(x.row(b).iter()).map(|(u, v)| u.total_cmp(v)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
    });
    let x = &x.select_rows(&order);
    let (p, degenerate) = joint_probabilities(x, config.perplexity)?;
    let p_entropy: f64 = p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum();
    let mut y = match config.init {
        TsneInit::Random => random_init(x, config.seed),
        TsneInit::Pca => pca_init(x),
    };
    let mut update = DMatrix::zeros(n, 2);
    let mut gains = DMatrix::from_element(n, 2, 1.0);
    let mut cost_trace = Vec::with_capacity(config.total_iters + 1);
    for t in 0..config.total_iters {
        if t == config.exaggeration_iters && t > 0 {
            // the exaggerated phase's velocity and gains do not carry over
            update.fill(0.0);
            gains.fill(1.0);
        }
        let exaggeration = if t < config.exaggeration_iters { config.early_exaggeration } else { 1.0 };
        let momentum = if t < config.momentum_switch_iter { config.momentum_initial } else { config.momentum_final };
        let pass = Pass::run(&p, &y, exaggeration);
        cost_trace.push(pass.cost(p_entropy));
        for idx in 0..n * 2 {
            let g = pass.grad[idx];
            gains[idx] = if (g > 0.0) != (update[idx] > 0.0) { gains[idx] + 0.2 } else { (gains[idx] * 0.8f64).max(0.01) };
            update[idx] = momentum * update[idx] - config.learning_rate * gains[idx] * g;
        }
        y += &update;
        recentre(&mut y);
    }
    cost_trace.push(Pass::run(&p, &y, 1.0).cost(p_entropy));
    let mut coords = vec![[0.0; 2]; n];
    for (k, &i) in order.iter().enumerate() {
        coords[i] = [y[(k, 0)], y[(k, 1)]];
    }
    let mut degenerate_rows: Vec<usize> = degenerate.iter().map(|&k| order[k]).collect();
    degenerate_rows.sort_unstable();
    Ok(Embedding {
        coords,
        cost_trace,
        config: config.clone(),
        seed: config.seed,
        degenerate_rows,
    })
}
