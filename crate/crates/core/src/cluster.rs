//! Gaussian-mixture clustering of a 2-D embedding, cluster comparison
//! (per-feature divergence and hypothesis tests) and visit-to-visit
//! trajectories.

use std::collections::BTreeMap;

use nalgebra::{Matrix2, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::OutcomeGroup;
use crate::lgmm::sig_code;
use crate::rng::{stream_rng, Stream};
use crate::stats::{self, chi_square_test, fisher_exact_2xl, min_expected_count, welch_t_test};
use crate::table::{NumericTable, RowKey};

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("{n} points cannot support {k} components (need at least 3 per component)")]
    TooFewPoints { n: usize, k: usize },
    #[error("component count must be at least 1")]
    InvalidK,
    #[error("empty k range")]
    EmptyRange,
    #[error("a component collapsed after {rescues} rescues in every restart")]
    DegenerateComponent { rescues: usize },
    #[error("non-finite coordinate at row {0}")]
    NonFinite(usize),
    #[error("variance must be positive")]
    ZeroVariance,
    #[error("cluster {0} has too few members")]
    EmptyCluster(usize),
    #[error("{left} rows against {right} labels")]
    LengthMismatch { left: usize, right: usize },
    #[error("contingency table for {0} has all-zero margins")]
    DegenerateTable(String),
}

pub type Result<T> = std::result::Result<T, ClusterError>;

pub const EIGEN_FLOOR: f64 = 1e-6;
const MAX_RESCUES: usize = 3;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmmConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        GmmConfig { tol: 1e-8, max_iter: 500, restarts: 10, seed: 0 }
    }
}

/// Full-covariance mixture in the plane. Components are ordered by their
/// first mean coordinate so that labels are comparable between runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub k: usize,
    pub weights: Vec<f64>,
    pub means: Vec<[f64; 2]>,
    pub covariances: Vec<[[f64; 2]; 2]>,
    pub loglik: f64,
    pub loglik_trace: Vec<f64>,
    pub bic: f64,
    pub n: usize,
    pub converged: bool,
    pub iterations: usize,
    /// Components re-seeded after collapsing, in the winning restart.
    pub rescues: usize,
    pub seed: u64,
    pub restarts: usize,
    pub best_restart: usize,
}

#[derive(Clone, Copy, Debug)]
struct Component {
    weight: f64,
    mean: [f64; 2],
    cov: [[f64; 2]; 2],
}

impl Component {
    fn log_density(&self, y: &[f64; 2]) -> f64 {
        let [[a, b], [_, c]] = self.cov;
        let det = a * c - b * b;
        let (dx, dy) = (y[0] - self.mean[0], y[1] - self.mean[1]);
        let quad = (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det;
        -LN_2PI - 0.5 * det.ln() - 0.5 * quad
    }
}

fn floor_covariance(cov: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let m = Matrix2::new(cov[0][0], cov[0][1], cov[0][1], cov[1][1]);
    let eig = SymmetricEigen::new(m);
    if eig.eigenvalues.min() >= EIGEN_FLOOR {
        return [[cov[0][0], cov[0][1]], [cov[0][1], cov[1][1]]];
    }
    let lambda = eig.eigenvalues.map(|l| l.max(EIGEN_FLOOR));
    let r = eig.eigenvectors * Matrix2::from_diagonal(&lambda) * eig.eigenvectors.transpose();
    let off = 0.5 * (r[(0, 1)] + r[(1, 0)]);
    [[r[(0, 0)], off], [off, r[(1, 1)]]]
}

fn weighted_moments(y: &[[f64; 2]], w: impl Fn(usize) -> f64) -> (f64, [f64; 2], [[f64; 2]; 2]) {
    let mass: f64 = (0..y.len()).map(&w).sum();
    let mut mean = [0.0; 2];
    for (i, p) in y.iter().enumerate() {
        let wi = w(i);
        mean[0] += wi * p[0];
        mean[1] += wi * p[1];
    }
    mean = [mean[0] / mass, mean[1] / mass];
    let mut s = [0.0; 3];
    for (i, p) in y.iter().enumerate() {
        let wi = w(i);
        let (dx, dy) = (p[0] - mean[0], p[1] - mean[1]);
        s[0] += wi * dx * dx;
        s[1] += wi * dx * dy;
        s[2] += wi * dy * dy;
    }
    (mass, mean, [[s[0] / mass, s[1] / mass], [s[1] / mass, s[2] / mass]])
}

/// Per-row log joint densities `ln π_k + ln N(y; μ_k, Σ_k)`.
fn log_joint(components: &[Component], y: &[[f64; 2]]) -> Vec<Vec<f64>> {
    y.par_iter()
        .map(|p| components.iter().map(|c| c.weight.ln() + c.log_density(p)).collect())
        .collect()
}

fn normalise(rows: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<f64>) {
    rows.iter()
        .map(|r| {
            let lse = stats::logsumexp(r);
            (r.iter().map(|v| (v - lse).exp()).collect(), lse)
        })
        .unzip()
}

fn kmeans_plus_plus(y: &[[f64; 2]], k: usize, rng: &mut impl Rng) -> Vec<[f64; 2]> {
    let n = y.len();
    let mut centres = vec![y[rng.random_range(0..n)]];
    let mut d2: Vec<f64> = y.iter().map(|p| sq_dist(p, &centres[0])).collect();
    while centres.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if u < *d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centres.push(y[next]);
        for (d, p) in d2.iter_mut().zip(y) {
            *d = d.min(sq_dist(p, &y[next]));
        }
    }
    centres
}

fn sq_dist(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

struct RunOutcome {
    components: Vec<Component>,
    trace: Vec<f64>,
    converged: bool,
    iterations: usize,
    rescues: usize,
}

fn run_em(y: &[[f64; 2]], k: usize, config: &GmmConfig, restart: usize) -> Option<RunOutcome> {
    let n = y.len();
    let mut rng = stream_rng(config.seed, Stream::Gmm, ((k as u64) << 32) | restart as u64);
    let (_, _, global_cov) = weighted_moments(y, |_| 1.0);
    let global_cov = floor_covariance(global_cov);
    let mut components: Vec<Component> = kmeans_plus_plus(y, k, &mut rng)
        .into_iter()
        .map(|mean| Component { weight: 1.0 / k as f64, mean, cov: global_cov })
        .collect();

    let mut trace = Vec::new();
    let mut rescues = 0;
    let mut converged = false;
    let mut iterations = 0;
    let (mut resp, mut row_ll) = normalise(&log_joint(&components, y));
    let mut ll: f64 = row_ll.iter().sum();
    trace.push(ll);
    while iterations < config.max_iter {
        // a collapsing component is moved to the worst-explained point
        let masses: Vec<f64> = (0..k).map(|j| resp.iter().map(|r| r[j]).sum()).collect();
        if let Some(j) = masses.iter().position(|&m| m < 1e-6 * n as f64) {
            rescues += 1;
            if rescues > MAX_RESCUES {
                return None;
            }
            let worst = (0..n).fold(0, |best, i| if row_ll[i] < row_ll[best] { i } else { best });
            components[j] = Component { weight: 1.0 / k as f64, mean: y[worst], cov: global_cov };
            let total: f64 = components.iter().map(|c| c.weight).sum();
            components.iter_mut().for_each(|c| c.weight /= total);
            (resp, row_ll) = normalise(&log_joint(&components, y));
            ll = row_ll.iter().sum();
            trace.clear();
            trace.push(ll);
            continue;
        }
        iterations += 1;
        let candidate: Vec<Component> = (0..k)
            .map(|j| {
                let (mass, mean, cov) = weighted_moments(y, |i| resp[i][j]);
                Component { weight: mass / n as f64, mean, cov: floor_covariance(cov) }
            })
            .collect();
        let (next_resp, next_row_ll) = normalise(&log_joint(&candidate, y));
        let next_ll: f64 = next_row_ll.iter().sum();
        if !next_ll.is_finite() || next_ll < ll {
            // only round-off (or the eigenvalue floor) can do this; keep the previous state
            converged = true;
            break;
        }
        let change = (next_ll - ll).abs() / ll.abs().max(f64::MIN_POSITIVE);
        components = candidate;
        resp = next_resp;
        row_ll = next_row_ll;
        ll = next_ll;
        trace.push(ll);
        if change < config.tol {
            converged = true;
            break;
        }
    }
    Some(RunOutcome { components, trace, converged, iterations, rescues })
}

fn to_points(y: &[[f64; 2]]) -> Result<()> {
    match y.iter().position(|p| !p[0].is_finite() || !p[1].is_finite()) {
        Some(i) => Err(ClusterError::NonFinite(i)),
        None => Ok(()),
    }
}

/// `(6K − 1) ln n − 2 ℓ`: K − 1 free weights, 2K means, 3K covariance entries.
pub fn bic(loglik: f64, k: usize, n: usize) -> f64 {
    (6 * k - 1) as f64 * (n as f64).ln() - 2.0 * loglik
}

/// EM for a K-component full-covariance mixture, best of `restarts`
/// k-means++ starts by final log-likelihood.
pub fn gmm_fit_em(y: &[[f64; 2]], k: usize, config: &GmmConfig) -> Result<GmmModel> {
    if k == 0 {
        return Err(ClusterError::InvalidK);
    }
    if y.len() < 3 * k {
        return Err(ClusterError::TooFewPoints { n: y.len(), k });
    }
    to_points(y)?;
    let restarts = config.restarts.max(1);
    let runs: Vec<Option<RunOutcome>> = (0..restarts).into_par_iter().map(|r| run_em(y, k, config, r)).collect();
    let (best_restart, best) = runs
        .into_iter()
        .enumerate()
        .filter_map(|(r, run)| run.map(|run| (r, run)))
        .reduce(|a, b| if b.1.trace.last() > a.1.trace.last() { b } else { a })
        .ok_or(ClusterError::DegenerateComponent { rescues: MAX_RESCUES })?;
    let mut components = best.components;
    components.sort_by(|a, b| a.mean[0].total_cmp(&b.mean[0]).then(a.mean[1].total_cmp(&b.mean[1])));
    let loglik = *best.trace.last().expect("trace starts non-empty");
    Ok(GmmModel {
        k,
        weights: components.iter().map(|c| c.weight).collect(),
        means: components.iter().map(|c| c.mean).collect(),
        covariances: components.iter().map(|c| c.cov).collect(),
        loglik,
        loglik_trace: best.trace,
        bic: bic(loglik, k, y.len()),
        n: y.len(),
        converged: best.converged,
        iterations: best.iterations,
        rescues: best.rescues,
        seed: config.seed,
        restarts,
        best_restart,
    })
}

/// Fits every K in the range and returns the index of the lowest BIC
/// (ties go to the smaller K) together with all models.
pub fn select_k(y: &[[f64; 2]], k_range: std::ops::RangeInclusive<usize>, config: &GmmConfig) -> Result<(usize, Vec<GmmModel>)> {
    if k_range.is_empty() {
        return Err(ClusterError::EmptyRange);
    }
    let models = k_range.map(|k| gmm_fit_em(y, k, config)).collect::<Result<Vec<_>>>()?;
    let best = models.iter().enumerate().fold(0, |b, (i, m)| if m.bic < models[b].bic { i } else { b });
    Ok((models[best].k, models))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub responsibilities: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl ClusterAssignment {
    pub fn to_csv_string(&self, keys: &[RowKey]) -> String {
        let k = self.responsibilities.first().map_or(0, Vec::len);
        let mut out = String::from("subject_id,visit,cluster");
        for j in 0..k {
            out.push_str(&format!(",p{}", j + 1));
        }
        out.push('\n');
        for ((key, r), l) in keys.iter().zip(&self.responsibilities).zip(&self.labels) {
            out.push_str(&format!("{},{},{}", key.subject_id, key.visit, l + 1));
            for p in r {
                out.push_str(&format!(",{p:.6}"));
            }
            out.push('\n');
        }
        out
    }
}

fn components_of(model: &GmmModel) -> Vec<Component> {
    (0..model.k)
        .map(|j| Component { weight: model.weights[j], mean: model.means[j], cov: model.covariances[j] })
        .collect()
}

/// Posterior membership probabilities, computed in log space; labels are the
/// argmax with ties to the lower component.
pub fn assign_clusters(model: &GmmModel, y: &[[f64; 2]]) -> ClusterAssignment {
    let (responsibilities, _) = normalise(&log_joint(&components_of(model), y));
    let labels = responsibilities
        .iter()
        .map(|r| r.iter().enumerate().fold(0, |b, (j, &p)| if p > r[b] { j } else { b }))
        .collect();
    ClusterAssignment { responsibilities, labels }
}

/// Adjusted Rand index between two labelings of the same points.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let choose2 = |m: u64| (m * m.saturating_sub(1)) as f64 / 2.0;
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&m| choose2(m)).sum();
    let sa: f64 = rows.values().map(|&m| choose2(m)).sum();
    let sb: f64 = cols.values().map(|&m| choose2(m)).sum();
    let expected = sa * sb / choose2(a.len() as u64);
    let max = 0.5 * (sa + sb);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Closed-form `D(p ‖ q)` between univariate normals given as (mean, variance).
pub fn kld_gaussian_1d(p: (f64, f64), q: (f64, f64)) -> Result<f64> {
    let ((mp, vp), (mq, vq)) = (p, q);
    if !(vp > 0.0 && vq > 0.0) {
        return Err(ClusterError::ZeroVariance);
    }
    Ok(0.5 * (vq / vp).ln() + (vp + (mp - mq).powi(2)) / (2.0 * vq) - 0.5)
}

/// Discrete `Σ p ln(p/q)`; terms with p = 0 contribute nothing.
pub fn kld_discrete(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum::<f64>().max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KldMethod {
    Gaussian,
    LaplacePmf,
    Constant,
}

impl std::fmt::Display for KldMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            KldMethod::Gaussian => "gaussian",
            KldMethod::LaplacePmf => "laplace-pmf",
            KldMethod::Constant => "constant",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KldRow {
    pub feature: String,
    pub divergence: f64,
    pub method: KldMethod,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KldReport {
    /// Cluster indices, divergence measured from the first to the second.
    pub from: usize,
    pub to: usize,
    pub rows: Vec<KldRow>,
}

impl KldReport {
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("feature,kld,method\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:.9},{}\n", r.feature, r.divergence, r.method));
        }
        out
    }
}

fn cluster_values(table: &NumericTable, col: usize, labels: &[usize], cluster: usize) -> Vec<f64> {
    labels
        .iter()
        .enumerate()
        .filter(|(i, &l)| l == cluster && !table.missing[(*i, col)])
        .map(|(i, _)| table.data[(i, col)])
        .collect()
}

/// Smoothed PMF `(c_l + 1/L) / (n + 1)` over levels `0..L`.
pub fn laplace_pmf(values: &[f64], levels: usize) -> Vec<f64> {
    let mut counts = vec![0.0; levels];
    for &v in values {
        counts[(v as usize).min(levels - 1)] += 1.0;
    }
    let denom = values.len() as f64 + 1.0;
    counts.iter().map(|c| (c + 1.0 / levels as f64) / denom).collect()
}

fn gaussian_fit(v: &[f64]) -> (f64, f64) {
    let m = stats::mean(v);
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64)
}

fn check_labels(table: &NumericTable, labels: &[usize], clusters: [usize; 2]) -> Result<[usize; 2]> {
    if table.nrows() != labels.len() {
        return Err(ClusterError::LengthMismatch { left: table.nrows(), right: labels.len() });
    }
    let sizes = clusters.map(|c| labels.iter().filter(|&&l| l == c).count());
    for (c, s) in clusters.iter().zip(sizes) {
        if s < 2 {
            return Err(ClusterError::EmptyCluster(*c));
        }
    }
    Ok(sizes)
}

/// Per-feature divergence from cluster `from` to cluster `to`, sorted
/// descending (ties by feature name).
pub fn per_feature_kld(table: &NumericTable, labels: &[usize], from: usize, to: usize) -> Result<KldReport> {
    check_labels(table, labels, [from, to])?;
    let mut rows = Vec::with_capacity(table.ncols());
    for (c, name) in table.names.iter().enumerate() {
        let (p, q) = (cluster_values(table, c, labels, from), cluster_values(table, c, labels, to));
        let row = if table.kinds[c].is_discrete() {
            let levels = table.n_levels[c].max(2);
            KldRow { feature: name.clone(), divergence: kld_discrete(&laplace_pmf(&p, levels), &laplace_pmf(&q, levels)), method: KldMethod::LaplacePmf }
        } else {
            let all = p.iter().chain(&q);
            let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
            let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
            let floor = 1e-12 * (hi - lo).powi(2);
            if !(floor > 0.0) {
                KldRow { feature: name.clone(), divergence: 0.0, method: KldMethod::Constant }
            } else {
                let (mp, vp) = gaussian_fit(&p);
                let (mq, vq) = gaussian_fit(&q);
                let d = kld_gaussian_1d((mp, vp.max(floor)), (mq, vq.max(floor)))?;
                KldRow { feature: name.clone(), divergence: d.max(0.0), method: KldMethod::Gaussian }
            }
        };
        rows.push(row);
    }
    rows.sort_by(|a, b| b.divergence.total_cmp(&a.divergence).then_with(|| a.feature.cmp(&b.feature)));
    Ok(KldReport { from, to, rows })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestKind {
    ChiSquare,
    Fisher,
    /// Fisher was called for but the enumeration exceeded its budget.
    ChiSquareFallback,
    Welch,
}

impl std::fmt::Display for TestKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TestKind::ChiSquare => "chi-square",
            TestKind::Fisher => "fisher",
            TestKind::ChiSquareFallback => "chi-square (fisher budget exceeded)",
            TestKind::Welch => "welch-t",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub variable: String,
    pub first: String,
    pub second: String,
    pub test: TestKind,
    pub statistic: Option<f64>,
    pub p_value: f64,
    pub sig: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub clusters: [usize; 2],
    pub sizes: [usize; 2],
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn to_csv_string(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header = |i: usize| format!("Cluster {} (n = {})", self.clusters[i] + 1, self.sizes[i]);
        w.write_record(["variable".to_string(), header(0), header(1), "test".into(), "statistic".into(), "p-value".into(), "Sig code".into()])
            .expect("in-memory write");
        for r in &self.rows {
            let stat = r.statistic.map_or_else(String::new, |s| format!("{s:.4}"));
            w.write_record([r.variable.clone(), r.first.clone(), r.second.clone(), r.test.to_string(), stat, format!("{:.4e}", r.p_value), r.sig.clone()])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }
}

pub const FISHER_BUDGET: usize = 2_000_000;

fn level_summary(counts: &[u64], n: usize) -> String {
    let pct = |c: u64| 100.0 * c as f64 / n as f64;
    if counts.len() == 2 {
        format!("{}({:.2}%)", counts[1], pct(counts[1]))
    } else {
        counts.iter().enumerate().map(|(l, &c)| format!("{l}: {c}({:.2}%)", pct(c))).collect::<Vec<_>>().join("; ")
    }
}

/// Cluster-versus-cluster tests per feature: chi-square (Fisher when an
/// expected count is below 5) for discrete columns, Welch's t for
/// continuous ones.
pub fn compare_clusters(table: &NumericTable, labels: &[usize], first: usize, second: usize) -> Result<ComparisonTable> {
    let sizes = check_labels(table, labels, [first, second])?;
    let mut rows = Vec::new();
    for (c, name) in table.names.iter().enumerate() {
        let (a, b) = (cluster_values(table, c, labels, first), cluster_values(table, c, labels, second));
        let row = if table.kinds[c].is_discrete() {
            let levels = table.n_levels[c].max(2);
            let count = |v: &[f64]| {
                let mut k = vec![0u64; levels];
                v.iter().for_each(|&x| k[(x as usize).min(levels - 1)] += 1);
                k
            };
            let (ca, cb) = (count(&a), count(&b));
            let t = vec![ca.clone(), cb.clone()];
            let chi = chi_square_test(&t).ok_or_else(|| ClusterError::DegenerateTable(name.clone()))?;
            let small = min_expected_count(&t).is_some_and(|e| e < 5.0);
            let (test, statistic, p) = if small {
                match fisher_exact_2xl([&ca, &cb], FISHER_BUDGET) {
                    Some(p) => (TestKind::Fisher, None, p),
                    None => (TestKind::ChiSquareFallback, Some(chi.statistic), chi.p_value),
                }
            } else {
                (TestKind::ChiSquare, Some(chi.statistic), chi.p_value)
            };
            ComparisonRow {
                variable: name.clone(),
                first: level_summary(&ca, a.len()),
                second: level_summary(&cb, b.len()),
                test,
                statistic,
                p_value: p,
                sig: sig_code(p).to_string(),
            }
        } else {
            let t = welch_t_test(&a, &b);
            let summary = |v: &[f64]| format!("{:.2} ± {:.2}", stats::mean(v), stats::sample_variance(v).sqrt());
            ComparisonRow {
                variable: name.clone(),
                first: summary(&a),
                second: summary(&b),
                test: TestKind::Welch,
                statistic: Some(t.statistic),
                p_value: t.p_value,
                sig: sig_code(t.p_value).to_string(),
            }
        };
        rows.push(row);
    }
    Ok(ComparisonTable { clusters: [first, second], sizes, rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    /// Outcome group code; `None` for subjects without a complete outcome triple.
    pub group: Option<u8>,
    /// Cluster at the later visit; `None` pools all clusters.
    pub cluster: Option<usize>,
    pub from_visit: u32,
    pub to_visit: u32,
    pub subjects: usize,
    pub mean_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transitions {
    pub from_visit: u32,
    pub to_visit: u32,
    /// `counts[a][b]`: subjects in cluster a at the earlier visit and b at the later one.
    pub counts: Vec<Vec<u64>>,
    /// Subjects seen at exactly one of the two visits.
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub attribution: String,
    pub averaging: String,
    pub rows: Vec<TrajectoryRow>,
    pub transitions: Vec<Transitions>,
}

impl TrajectorySummary {
    /// One line per group, e.g. `Group 3: 34.71 units (visit 1 → 2), 18.19 units (visit 2 → 3)`.
    pub fn describe(&self) -> String {
        let mut by_group: BTreeMap<Option<u8>, Vec<&TrajectoryRow>> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.cluster.is_none()) {
            by_group.entry(r.group).or_default().push(r);
        }
        let mut out = String::new();
        for (g, rows) in by_group {
            let name = g.map_or_else(|| "Incomplete".to_string(), |g| format!("Group {g}"));
            let parts: Vec<String> =
                rows.iter().map(|r| format!("{:.2} units (visit {} → {})", r.mean_distance, r.from_visit, r.to_visit)).collect();
            out.push_str(&format!("{name}: {}\n", parts.join(", ")));
        }
        out
    }
}

/// Mean displacement of subjects between consecutive visits, split by
/// outcome group and by the cluster each subject occupies at the later visit.
pub fn trajectory_distances(
    coords: &[[f64; 2]],
    keys: &[RowKey],
    labels: &[usize],
    groups: &BTreeMap<String, OutcomeGroup>,
) -> Result<TrajectorySummary> {
    if coords.len() != keys.len() || labels.len() != keys.len() {
        return Err(ClusterError::LengthMismatch { left: coords.len(), right: labels.len() });
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let index: BTreeMap<(&str, u32), usize> = keys.iter().enumerate().map(|(i, key)| ((key.subject_id.as_str(), key.visit), i)).collect();
    let mut subjects: Vec<&str> = keys.iter().map(|key| key.subject_id.as_str()).collect();
    subjects.sort_unstable();
    subjects.dedup();
    let max_visit = keys.iter().map(|key| key.visit).max().unwrap_or(0);

    let mut sums: BTreeMap<(Option<u8>, Option<usize>, u32), (f64, usize)> = BTreeMap::new();
    let mut transitions = Vec::new();
    for v in 1..max_visit {
        let mut counts = vec![vec![0u64; k]; k];
        let mut skipped = 0;
        for s in &subjects {
            let (Some(&i), Some(&j)) = (index.get(&(*s, v)), index.get(&(*s, v + 1))) else {
                skipped += usize::from(index.contains_key(&(*s, v)) || index.contains_key(&(*s, v + 1)));
                continue;
            };
            let d = sq_dist(&coords[i], &coords[j]).sqrt();
            counts[labels[i]][labels[j]] += 1;
            let g = groups.get(*s).map(|g| g.code());
            for cluster in [None, Some(labels[j])] {
                let e = sums.entry((g, cluster, v)).or_insert((0.0, 0));
                e.0 += d;
                e.1 += 1;
            }
        }
        transitions.push(Transitions { from_visit: v, to_visit: v + 1, counts, skipped });
    }
    let rows = sums
        .into_iter()
        .map(|((group, cluster, v), (sum, m))| TrajectoryRow {
            group,
            cluster,
            from_visit: v,
            to_visit: v + 1,
            subjects: m,
            mean_distance: sum / m as f64,
        })
        .collect();
    Ok(TrajectorySummary {
        attribution: "cluster at the later visit of each pair".into(),
        averaging: "mean over subjects of per-subject displacement".into(),
        rows,
        transitions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bic_spot_value() {
        assert!((bic(-350.0, 2, 100) - 750.657).abs() < 0.01);
    }

    #[test]
    fn ari_known_values() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
        // sklearn's documented example: [0,0,1,2] vs [0,0,1,1] → 0.5714...
        assert!((adjusted_rand_index(&[0, 0, 1, 1], &[0, 0, 1, 2]) - 4.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn eigen_floor_lifts_singular_covariance() {
        let c = floor_covariance([[1.0, 1.0], [1.0, 1.0]]);
        let e = SymmetricEigen::new(Matrix2::new(c[0][0], c[0][1], c[1][0], c[1][1]));
        assert!(e.eigenvalues.min() >= EIGEN_FLOOR * (1.0 - 1e-9));
    }

    #[test]
    fn laplace_smoothing_sums_to_one() {
        let p = laplace_pmf(&[0.0, 1.0, 1.0, 2.0], 3);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((p[1] - (2.0 + 1.0 / 3.0) / 5.0).abs() < 1e-15);
    }

    #[test]
    fn trajectory_3_4_5() {
        let keys = vec![RowKey { subject_id: "a".into(), visit: 1 }, RowKey { subject_id: "a".into(), visit: 2 }];
        let s = trajectory_distances(&[[0.0, 0.0], [3.0, 4.0]], &keys, &[0, 1], &BTreeMap::new()).unwrap();
        assert_eq!(s.rows.len(), 2);
        assert!(s.rows.iter().all(|r| r.mean_distance == 5.0));
        assert_eq!(s.transitions[0].counts, vec![vec![0, 1], vec![0, 0]]);
    }
}
