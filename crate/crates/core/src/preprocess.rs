//! Categorical encoding, KNN imputation, Mahalanobis outlier flags, SMOTE
//! oversampling and quadratic-term augmentation.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{Cohort, FeatureKind, Value};
use crate::rng::{stream_rng, Stream};
use crate::stats;
use crate::table::{NumericTable, RowKey};

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("feature `{feature}`: level `{level}` is not in the schema")]
    UnknownLevel { feature: String, level: String },
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("feature `{0}` is not continuous")]
    NotContinuous(String),
    #[error("column `{column}` is observed in {observed} rows, fewer than k = {k}")]
    InsufficientDonors { column: String, observed: usize, k: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("need more rows ({rows}) than columns ({cols})")]
    TooFewRows { rows: usize, cols: usize },
    #[error("covariance is singular even after ridge regularization")]
    SingularCovariance,
    #[error("alpha must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("input has missing cells")]
    Incomplete,
    #[error("percent must be a positive multiple of 100, got {0}")]
    InvalidPercent(u32),
    #[error("class {class} has {count} members; SMOTE needs at least 2")]
    DegenerateClass { class: bool, count: usize },
    #[error("{what}: lengths differ ({left} vs {right})")]
    LengthMismatch { what: &'static str, left: usize, right: usize },
}

pub type Result<T, E = PreprocessError> = std::result::Result<T, E>;

/// Level label → integer code for every categorical feature. Codes are
/// `0..L` in lexicographic label order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Codebook {
    pub features: BTreeMap<String, Vec<String>>,
}

impl Codebook {
    pub fn encode(&self, feature: &str, label: &str) -> Option<usize> {
        self.features.get(feature)?.binary_search_by(|l| l.as_str().cmp(label)).ok()
    }

    pub fn decode(&self, feature: &str, code: usize) -> Option<&str> {
        self.features.get(feature)?.get(code).map(String::as_str)
    }
}

pub fn encode_categoricals(cohort: &Cohort) -> Result<(NumericTable, Codebook)> {
    let specs = cohort.specs();
    let mut codebook = Codebook::default();
    for spec in specs.iter().filter(|s| s.kind == FeatureKind::Categorical) {
        let mut levels = spec.levels.clone();
        levels.sort();
        codebook.features.insert(spec.name.clone(), levels);
    }
    let (n, p) = (cohort.len(), specs.len());
    let mut data = DMatrix::from_element(n, p, f64::NAN);
    let mut missing = DMatrix::from_element(n, p, true);
    for (i, row) in cohort.rows().iter().enumerate() {
        for (j, (spec, cell)) in specs.iter().zip(&row.values).enumerate() {
            let Some(value) = cell else { continue };
            let x = match value {
                Value::Number(x) => *x,
                Value::Label(l) => codebook.encode(&spec.name, l).ok_or_else(|| PreprocessError::UnknownLevel {
                    feature: spec.name.clone(),
                    level: l.clone(),
                })? as f64,
            };
            data[(i, j)] = x;
            missing[(i, j)] = false;
        }
    }
    let table = NumericTable {
        names: specs.iter().map(|s| s.name.clone()).collect(),
        kinds: specs.iter().map(|s| s.kind).collect(),
        n_levels: specs
            .iter()
            .map(|s| match s.kind {
                FeatureKind::Continuous => 0,
                FeatureKind::Binary => 2,
                FeatureKind::Categorical => s.levels.len(),
            })
            .collect(),
        data,
        missing,
        keys: cohort.rows().iter().map(|r| RowKey { subject_id: r.subject_id.clone(), visit: r.visit }).collect(),
        outcome: cohort.rows().iter().map(|r| r.outcome).collect(),
    };
    Ok((table, codebook))
}

/// Columns that enter the imputation distance.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceScope {
    #[default]
    AllColumns,
    Columns(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Imputation {
    pub table: NumericTable,
    /// `(row, column)` cells filled with the column mean/mode because fewer
    /// than k donors shared any observed column with the row.
    pub fallbacks: Vec<(usize, usize)>,
}

pub const DEFAULT_IMPUTE_K: usize = 5;

/// Fills each missing cell from its k nearest donor rows.
///
/// Distances are Euclidean over z-scored columns observed in both rows,
/// rescaled by `scope width / shared columns` so rows with partial overlap
/// remain comparable. Continuous cells take the donor mean, discrete cells
/// the donor mode (smallest code on ties). Observed cells are never touched.
pub fn impute_knn(table: &NumericTable, k: usize, scope: &DistanceScope) -> Result<Imputation> {
    if k == 0 {
        return Err(PreprocessError::ZeroK);
    }
    let (n, p) = (table.nrows(), table.ncols());
    let scope_cols: Vec<usize> = match scope {
        DistanceScope::AllColumns => (0..p).collect(),
        DistanceScope::Columns(cols) => cols.clone(),
    };
    if let Some(&bad) = scope_cols.iter().find(|&&c| c >= p) {
        return Err(PreprocessError::UnknownFeature(format!("column #{bad}")));
    }
    let observed_col = |j: usize| -> Vec<f64> { (0..n).filter(|&i| !table.missing[(i, j)]).map(|i| table.data[(i, j)]).collect() };
    let mut centre = vec![0.0; p];
    let mut scale = vec![1.0; p];
    for j in 0..p {
        let xs = observed_col(j);
        if xs.is_empty() {
            continue;
        }
        centre[j] = stats::mean(&xs);
        let sd = stats::sample_variance(&xs).sqrt();
        if sd > 0.0 && sd.is_finite() {
            scale[j] = sd;
        }
    }
    for j in 0..p {
        let observed = (0..n).filter(|&i| !table.missing[(i, j)]).count();
        let needed = (0..n).any(|i| table.missing[(i, j)]);
        if needed && observed < k {
            return Err(PreprocessError::InsufficientDonors { column: table.names[j].clone(), observed, k });
        }
    }
    let z = |i: usize, j: usize| (table.data[(i, j)] - centre[j]) / scale[j];
    let fallback_value = |j: usize| -> f64 {
        let xs = observed_col(j);
        if table.kinds[j].is_discrete() {
            mode(&xs)
        } else {
            stats::mean(&xs)
        }
    };

    let rows_with_gaps: Vec<usize> = (0..n).filter(|&i| (0..p).any(|j| table.missing[(i, j)])).collect();
    let fills: Vec<Vec<(usize, f64, bool)>> = rows_with_gaps
        .par_iter()
        .map(|&r| {
            let dist: Vec<Option<f64>> = (0..n)
                .map(|s| {
                    if s == r {
                        return None;
                    }
                    let mut sum = 0.0;
                    let mut shared = 0usize;
                    for &j in &scope_cols {
                        if !table.missing[(r, j)] && !table.missing[(s, j)] {
                            sum += (z(r, j) - z(s, j)).powi(2);
                            shared += 1;
                        }
                    }
                    (shared > 0).then(|| (sum * scope_cols.len() as f64 / shared as f64).sqrt())
                })
                .collect();
            (0..p)
                .filter(|&j| table.missing[(r, j)])
                .map(|j| {
                    let mut donors: Vec<(f64, usize)> =
                        (0..n).filter(|&s| !table.missing[(s, j)]).filter_map(|s| dist[s].map(|d| (d, s))).collect();
                    if donors.len() < k {
                        return (j, fallback_value(j), true);
                    }
                    donors.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                    let values: Vec<f64> = donors[..k].iter().map(|&(_, s)| table.data[(s, j)]).collect();
                    let v = if table.kinds[j].is_discrete() { mode(&values) } else { stats::mean(&values) };
                    (j, v, false)
                })
                .collect()
        })
        .collect();

    let mut out = table.clone();
    let mut fallbacks = Vec::new();
    for (&r, row_fills) in rows_with_gaps.iter().zip(fills) {
        for (j, v, fell_back) in row_fills {
            out.data[(r, j)] = v;
            out.missing[(r, j)] = false;
            if fell_back {
                fallbacks.push((r, j));
            }
        }
    }
    Ok(Imputation { table: out, fallbacks })
}

/// Most frequent value; ties go to the smallest.
fn mode(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best = (sorted[0], 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        if j - i > best.1 {
            best = (sorted[i], j - i);
        }
        i = j;
    }
    best.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutlierReport {
    /// Mahalanobis distance `d` per row (unitless).
    pub distances: Vec<f64>,
    pub squared: Vec<f64>,
    /// Chi-square(p) quantile at `1 − alpha`, compared against `d²`.
    pub threshold: f64,
    pub alpha: f64,
    pub flags: Vec<bool>,
    /// Ridge added to the covariance diagonal (0 when none was needed).
    pub ridge: f64,
}

pub const DEFAULT_OUTLIER_ALPHA: f64 = 0.001;

/// Sample mean and Cholesky-factored sample covariance of a complete matrix.
#[derive(Clone, Debug)]
pub struct MahalanobisModel {
    mean: DVector<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    ridge: f64,
}

impl MahalanobisModel {
    /// Fits mean and covariance; adds `1e-8·trace(S)/p` to the diagonal when
    /// `S` is numerically singular.
    pub fn fit(data: &DMatrix<f64>) -> Result<Self> {
        let (n, p) = data.shape();
        if n <= p || p == 0 {
            return Err(PreprocessError::TooFewRows { rows: n, cols: p });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(PreprocessError::Incomplete);
        }
        let mean = data.row_mean().transpose();
        let mut centred = data.clone();
        for mut row in centred.row_iter_mut() {
            row -= &mean.transpose();
        }
        let cov = centred.transpose() * &centred / (n - 1) as f64;
        Self::from_moments(mean, &cov)
    }

    pub fn from_moments(mean: DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let p = mean.len();
        let well_conditioned = |m: &DMatrix<f64>| {
            m.clone().cholesky().filter(|c| {
                let d = c.l_dirty().diagonal().map(|x| x * x);
                d.min() > 1e-12 * d.max()
            })
        };
        let (chol, ridge) = match well_conditioned(cov) {
            Some(c) => (c, 0.0),
            None => {
                let ridge = 1e-8 * cov.trace() / p as f64;
                if !(ridge > 0.0) {
                    return Err(PreprocessError::SingularCovariance);
                }
                let reg = cov + DMatrix::identity(p, p) * ridge;
                (reg.cholesky().ok_or(PreprocessError::SingularCovariance)?, ridge)
            }
        };
        Ok(Self { mean, chol, ridge })
    }

    /// `(x − m)ᵀ S⁻¹ (x − m)`
    pub fn squared_distance(&self, x: &[f64]) -> f64 {
        let c = DVector::from_column_slice(x) - &self.mean;
        let y = self.chol.l_dirty().solve_lower_triangular(&c).expect("triangular factor is invertible");
        y.norm_squared()
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }
}

pub fn mahalanobis_outliers(data: &DMatrix<f64>, alpha: f64) -> Result<OutlierReport> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(PreprocessError::InvalidAlpha(alpha));
    }
    let model = MahalanobisModel::fit(data)?;
    let p = data.ncols();
    let squared: Vec<f64> = (0..data.nrows())
        .map(|i| model.squared_distance(&data.row(i).iter().copied().collect::<Vec<_>>()))
        .collect();
    let threshold = stats::chi_squared_quantile(1.0 - alpha, p as f64);
    Ok(OutlierReport {
        distances: squared.iter().map(|d| d.sqrt()).collect(),
        flags: squared.iter().map(|&d| d > threshold).collect(),
        squared,
        threshold,
        alpha,
        ridge: model.ridge(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SmoteTarget {
    #[default]
    Minority,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoteConfig {
    pub percent: u32,
    #[serde(default = "default_smote_k")]
    pub k: usize,
    #[serde(default)]
    pub target: SmoteTarget,
}

fn default_smote_k() -> usize {
    5
}

impl Default for SmoteConfig {
    fn default() -> Self {
        Self { percent: 100, k: 5, target: SmoteTarget::Minority }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "origin", rename_all = "snake_case")]
pub enum RowOrigin {
    Original { row: usize },
    Synthetic { parent: usize, neighbor: usize, lambda: f64 },
}

impl RowOrigin {
    pub fn is_synthetic(&self) -> bool {
        matches!(self, RowOrigin::Synthetic { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SmoteOutput {
    pub data: DMatrix<f64>,
    pub labels: Vec<bool>,
    pub origin: Vec<RowOrigin>,
    /// Classes whose neighbour count had to shrink: `(class, k used)`.
    pub clamped: Vec<(bool, usize)>,
}

/// Interpolates continuous cells between `parent` and `neighbor`; discrete
/// cells are copied from the parent.
pub fn interpolate(parent: &[f64], neighbor: &[f64], lambda: f64, discrete: &[bool]) -> Vec<f64> {
    parent
        .iter()
        .zip(neighbor)
        .zip(discrete)
        .map(|((&a, &b), &d)| if d { a } else { a + lambda * (b - a) })
        .collect()
}

/// SMOTE: per 100% of `percent`, one synthetic row per target-class row,
/// placed at a uniform point on the segment to one of its k nearest
/// same-class neighbours. Originals keep their order; synthetics follow.
pub fn smote_oversample(data: &DMatrix<f64>, labels: &[bool], discrete: &[bool], config: &SmoteConfig, seed: u64) -> Result<SmoteOutput> {
    let (n, p) = data.shape();
    if labels.len() != n {
        return Err(PreprocessError::LengthMismatch { what: "labels", left: labels.len(), right: n });
    }
    if discrete.len() != p {
        return Err(PreprocessError::LengthMismatch { what: "column kinds", left: discrete.len(), right: p });
    }
    if config.percent == 0 || config.percent % 100 != 0 {
        return Err(PreprocessError::InvalidPercent(config.percent));
    }
    if config.k == 0 {
        return Err(PreprocessError::ZeroK);
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let classes: Vec<bool> = match config.target {
        SmoteTarget::Minority => vec![positives <= n - positives],
        SmoteTarget::Both => vec![false, true],
    };

    // distance space: z-scored continuous columns, raw codes for discrete
    let mut space = data.clone();
    for j in (0..p).filter(|&j| !discrete[j]) {
        let col: Vec<f64> = data.column(j).iter().copied().collect();
        let m = stats::mean(&col);
        let sd = stats::sample_variance(&col).sqrt();
        let sd = if sd > 0.0 && sd.is_finite() { sd } else { 1.0 };
        space.column_mut(j).apply(|x| *x = (*x - m) / sd);
    }

    let rounds = (config.percent / 100) as usize;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut new_labels = Vec::new();
    let mut origin: Vec<RowOrigin> = (0..n).map(|row| RowOrigin::Original { row }).collect();
    let mut clamped = Vec::new();
    for &class in &classes {
        let members: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
        if members.len() < 2 {
            return Err(PreprocessError::DegenerateClass { class, count: members.len() });
        }
        let k = if members.len() < config.k + 1 {
            clamped.push((class, members.len() - 1));
            members.len() - 1
        } else {
            config.k
        };
        let neighbours: Vec<Vec<usize>> = members
            .par_iter()
            .map(|&i| {
                let mut d: Vec<(f64, usize)> = members
                    .iter()
                    .filter(|&&j| j != i)
                    .map(|&j| ((space.row(i) - space.row(j)).norm_squared(), j))
                    .collect();
                d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                d.truncate(k);
                d.into_iter().map(|(_, j)| j).collect()
            })
            .collect();
        let mut rng = stream_rng(seed, Stream::Smote, class as u64);
        for _ in 0..rounds {
            for (m, &i) in members.iter().enumerate() {
                let nb = neighbours[m][rng.random_range(0..k)];
                let lambda: f64 = rng.random();
                let parent: Vec<f64> = data.row(i).iter().copied().collect();
                let other: Vec<f64> = data.row(nb).iter().copied().collect();
                rows.push(interpolate(&parent, &other, lambda, discrete));
                new_labels.push(class);
                origin.push(RowOrigin::Synthetic { parent: i, neighbor: nb, lambda });
            }
        }
    }
    let total = n + rows.len();
    let mut out = DMatrix::zeros(total, p);
    out.rows_mut(0, n).copy_from(data);
    for (r, row) in rows.iter().enumerate() {
        for (j, &x) in row.iter().enumerate() {
            out[(n + r, j)] = x;
        }
    }
    let mut labels_out = labels.to_vec();
    labels_out.extend(new_labels);
    Ok(SmoteOutput { data: out, labels: labels_out, origin, clamped })
}

/// Appends a `name^2` column for each named continuous feature.
pub fn augment_quadratic(table: &NumericTable, names: &[String]) -> Result<NumericTable> {
    let mut out = table.clone();
    for name in names {
        let j = table.column_index(name).ok_or_else(|| PreprocessError::UnknownFeature(name.clone()))?;
        if table.kinds[j] != FeatureKind::Continuous {
            return Err(PreprocessError::NotContinuous(name.clone()));
        }
        let squared: Vec<f64> = table.data.column(j).iter().map(|x| x * x).collect();
        out.push_column(format!("{name}^2"), FeatureKind::Continuous, 0, &squared);
        let last = out.ncols() - 1;
        for i in 0..table.nrows() {
            if table.missing[(i, j)] {
                out.missing[(i, last)] = true;
                out.data[(i, last)] = f64::NAN;
            }
        }
    }
    Ok(out)
}
