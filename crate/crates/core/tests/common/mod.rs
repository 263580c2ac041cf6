//! Shared simulators and oracles for integration tests.
#![allow(dead_code)]

use cohort_core::lgmm::LgmmDesign;
use cohort_core::table::RowKey;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Random-intercept logistic data with standard-normal covariates.
pub fn simulate(beta: &[f64], sigma: f64, subjects: usize, visits: u32, seed: u64) -> LgmmDesign {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = beta.len() - 1;
    let n = subjects * visits as usize;
    let mut x = DMatrix::zeros(n, p);
    let mut y = Vec::with_capacity(n);
    let mut keys = Vec::with_capacity(n);
    for s in 0..subjects {
        let z: f64 = StandardNormal.sample(&mut rng);
        let mu = sigma * z;
        for v in 1..=visits {
            let r = keys.len();
            let mut eta = beta[0] + mu;
            for j in 0..p {
                let xv: f64 = StandardNormal.sample(&mut rng);
                x[(r, j)] = xv;
                eta += beta[j + 1] * xv;
            }
            y.push(rng.random::<f64>() < logistic(eta));
            keys.push(RowKey { subject_id: format!("S{s:05}"), visit: v });
        }
    }
    LgmmDesign::new((1..=p).map(|j| format!("x{j}")).collect(), x, y, keys).unwrap()
}

/// Marginal log-likelihood by composite Simpson over μ on a dense grid.
pub fn simpson_loglik(design: &LgmmDesign, beta: &[f64], sigma: f64, points: usize, half_width: f64) -> f64 {
    assert!(points % 2 == 1);
    let h = 2.0 * half_width / (points - 1) as f64;
    let mut by_subject: std::collections::BTreeMap<&str, Vec<usize>> = Default::default();
    for (i, k) in design.keys.iter().enumerate() {
        by_subject.entry(&k.subject_id).or_default().push(i);
    }
    let mut total = 0.0;
    for rows in by_subject.values() {
        let f = |mu: f64| {
            let mut v = (-0.5 * (mu / sigma).powi(2)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
            for &r in rows {
                let mut eta = beta[0] + mu;
                for j in 0..design.x.ncols() {
                    eta += beta[j + 1] * design.x[(r, j)];
                }
                let p = logistic(eta);
                v *= if design.y[r] { p } else { 1.0 - p };
            }
            v
        };
        let mut s = f(-half_width) + f(half_width);
        for k in 1..points - 1 {
            let mu = -half_width + k as f64 * h;
            s += if k % 2 == 1 { 4.0 } else { 2.0 } * f(mu);
        }
        total += (s * h / 3.0).ln();
    }
    total
}

/// Plain logistic log-likelihood, summed row by row.
pub fn logistic_loglik(design: &LgmmDesign, beta: &[f64]) -> f64 {
    (0..design.y.len())
        .map(|r| {
            let eta = beta[0] + (0..design.x.ncols()).map(|j| beta[j + 1] * design.x[(r, j)]).sum::<f64>();
            let p = logistic(eta);
            if design.y[r] { p.ln() } else { (1.0 - p).ln() }
        })
        .sum()
}

/// Logistic regression by iteratively reweighted least squares.
pub fn irls(design: &LgmmDesign) -> Vec<f64> {
    let n = design.y.len();
    let p1 = design.x.ncols() + 1;
    let xm = DMatrix::from_fn(n, p1, |i, j| if j == 0 { 1.0 } else { design.x[(i, j - 1)] });
    let mut b = nalgebra::DVector::zeros(p1);
    for _ in 0..100 {
        let eta = &xm * &b;
        let p = eta.map(logistic);
        let w = p.map(|v| v * (1.0 - v));
        let resid = nalgebra::DVector::from_fn(n, |i, _| design.y[i] as u8 as f64 - p[i]);
        let xtwx = xm.transpose() * DMatrix::from_diagonal(&w) * &xm;
        let step = xtwx.cholesky().unwrap().solve(&(xm.transpose() * resid));
        b += &step;
        if step.amax() < 1e-12 {
            break;
        }
    }
    b.iter().copied().collect()
}

pub fn uniform_points(n: usize, dim: usize, lo: f64, hi: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..dim).map(|_| rng.random_range(lo..hi)).collect()).collect()
}

/// Composite Simpson rule on `[a, b]` with `n` (odd) points.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / (n - 1) as f64;
    let mut s = f(a) + f(b);
    for i in 1..n - 1 {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// Gaussian clouds with identity covariance around the given centres,
/// `per` points each; returns the points and their true component.
pub fn planted_mixture(centres: &[[f64; 2]], per: usize, seed: u64) -> (Vec<[f64; 2]>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = Vec::new();
    let mut truth = Vec::new();
    for (c, centre) in centres.iter().enumerate() {
        for _ in 0..per {
            let (a, b): (f64, f64) = (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
            pts.push([centre[0] + a, centre[1] + b]);
            truth.push(c);
        }
    }
    (pts, truth)
}

/// Bivariate normal density by explicit matrix inversion.
pub fn normal_pdf_2d(y: [f64; 2], mean: [f64; 2], cov: [[f64; 2]; 2]) -> f64 {
    let s = nalgebra::Matrix2::new(cov[0][0], cov[0][1], cov[1][0], cov[1][1]);
    let inv = s.try_inverse().unwrap();
    let d = nalgebra::Vector2::new(y[0] - mean[0], y[1] - mean[1]);
    let q = (d.transpose() * inv * d)[(0, 0)];
    (-0.5 * q).exp() / (2.0 * std::f64::consts::PI * s.determinant().sqrt())
}

/// The Table-1-shaped synthetic cohort, encoded and imputed, with the
/// outcome group of every subject.
pub fn table1_table(
    seed: u64,
) -> (cohort_core::table::NumericTable, std::collections::BTreeMap<String, cohort_core::cohort::OutcomeGroup>) {
    use cohort_core::preprocess::{encode_categoricals, impute_knn, DistanceScope};
    use cohort_core::synth::{generate_cohort, SynthConfig};
    let (cohort, _) = generate_cohort(&SynthConfig::table1_default(seed)).unwrap();
    let (table, _) = encode_categoricals(&cohort).unwrap();
    let imputed = impute_knn(&table, 5, &DistanceScope::AllColumns).unwrap();
    (imputed.table, cohort.outcome_groups())
}
