//! Small statistical toolbox shared across modules.

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};
use statrs::function::erf::erfc;
use statrs::function::factorial::ln_binomial;

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with the n−1 denominator; 0 for fewer than two values.
pub fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(logistic(x))` without overflow.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Two-sided tail probability of a standard normal statistic.
pub fn normal_two_sided_p(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

pub fn chi_squared_quantile(prob: f64, dof: f64) -> f64 {
    ChiSquared::new(dof).expect("positive dof").inverse_cdf(prob)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TestResult {
    pub statistic: f64,
    pub dof: f64,
    pub p_value: f64,
}

/// Welch's unequal-variance two-sample t-test, two-sided.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> TestResult {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, mb) = (mean(a), mean(b));
    let (va, vb) = (sample_variance(a) / na, sample_variance(b) / nb);
    let se2 = va + vb;
    let diff = ma - mb;
    if se2 == 0.0 {
        let (statistic, p_value) = if diff == 0.0 { (0.0, 1.0) } else { (diff.signum() * f64::INFINITY, 0.0) };
        return TestResult { statistic, dof: na + nb - 2.0, p_value };
    }
    let t = diff / se2.sqrt();
    let dof = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, dof).expect("finite dof");
    let p_value = (2.0 * dist.cdf(-t.abs())).clamp(0.0, 1.0);
    TestResult { statistic: t, dof, p_value }
}

/// Pearson chi-square test of independence, no continuity correction.
/// Rows and columns with zero margins are dropped first.
pub fn chi_square_test(table: &[Vec<u64>]) -> Option<TestResult> {
    let table = trim_table(table)?;
    let rows: Vec<f64> = table.iter().map(|r| r.iter().sum::<u64>() as f64).collect();
    let ncol = table[0].len();
    let cols: Vec<f64> = (0..ncol).map(|j| table.iter().map(|r| r[j]).sum::<u64>() as f64).collect();
    let total: f64 = rows.iter().sum();
    let mut stat = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &obs) in row.iter().enumerate() {
            let e = rows[i] * cols[j] / total;
            stat += (obs as f64 - e).powi(2) / e;
        }
    }
    let dof = ((table.len() - 1) * (ncol - 1)) as f64;
    let p_value = if dof == 0.0 {
        1.0
    } else {
        1.0 - ChiSquared::new(dof).expect("positive dof").cdf(stat)
    };
    Some(TestResult { statistic: stat, dof, p_value: p_value.clamp(0.0, 1.0) })
}

/// Smallest expected count of the (trimmed) table.
pub fn min_expected_count(table: &[Vec<u64>]) -> Option<f64> {
    let table = trim_table(table)?;
    let rows: Vec<f64> = table.iter().map(|r| r.iter().sum::<u64>() as f64).collect();
    let ncol = table[0].len();
    let cols: Vec<f64> = (0..ncol).map(|j| table.iter().map(|r| r[j]).sum::<u64>() as f64).collect();
    let total: f64 = rows.iter().sum();
    rows.iter().flat_map(|r| cols.iter().map(move |c| r * c / total)).reduce(f64::min)
}

fn trim_table(table: &[Vec<u64>]) -> Option<Vec<Vec<u64>>> {
    let ncol = table.first()?.len();
    let keep_cols: Vec<usize> = (0..ncol).filter(|&j| table.iter().any(|r| r[j] > 0)).collect();
    let trimmed: Vec<Vec<u64>> = table
        .iter()
        .filter(|r| r.iter().any(|&x| x > 0))
        .map(|r| keep_cols.iter().map(|&j| r[j]).collect())
        .collect();
    (!trimmed.is_empty() && !keep_cols.is_empty()).then_some(trimmed)
}

/// Fisher's exact test for a 2×L table, two-sided: the sum of the
/// probabilities of every table with the observed margins whose probability
/// does not exceed the observed one (relative slack 1e-7).
///
/// Returns `None` for all-zero margins or when enumeration would visit more
/// than `budget` tables.
pub fn fisher_exact_2xl(table: [&[u64]; 2], budget: usize) -> Option<f64> {
    let trimmed = trim_table(&[table[0].to_vec(), table[1].to_vec()])?;
    if trimmed.len() < 2 || trimmed[0].len() < 2 {
        return Some(1.0);
    }
    let cols: Vec<u64> = (0..trimmed[0].len()).map(|j| trimmed[0][j] + trimmed[1][j]).collect();
    let r1: u64 = trimmed[0].iter().sum();
    let n: u64 = cols.iter().sum();
    let ln_denom = ln_binomial(n, r1);
    let ln_prob = |first_row: &[u64]| -> f64 {
        first_row.iter().zip(&cols).map(|(&a, &c)| ln_binomial(c, a)).sum::<f64>() - ln_denom
    };
    let observed = ln_prob(&trimmed[0]).exp();
    let threshold = observed * (1.0 + 1e-7);
    // integer weights ∏ C(c_j, a_j) while they fit; exact ties and one rounding
    let weight = |row: &[u64]| row.iter().zip(&cols).try_fold(1u128, |w, (&a, &c)| w.checked_mul(exact_binomial(c, a)?));
    let observed_weight = weight(&trimmed[0]);
    let mut exact_total = Some(0u128);

    // suffix sums bound the remaining row total at each column
    let mut suffix = vec![0u64; cols.len() + 1];
    for j in (0..cols.len()).rev() {
        suffix[j] = suffix[j + 1] + cols[j];
    }
    let mut visited = 0usize;
    let mut total = 0.0;
    let mut current = vec![0u64; cols.len()];
    fn walk(
        j: usize,
        remaining: u64,
        cols: &[u64],
        suffix: &[u64],
        current: &mut Vec<u64>,
        visit: &mut dyn FnMut(&[u64]) -> bool,
    ) -> bool {
        if j == cols.len() {
            return remaining != 0 || visit(current);
        }
        let lo = remaining.saturating_sub(suffix[j + 1]);
        let hi = remaining.min(cols[j]);
        for a in lo..=hi {
            current[j] = a;
            if !walk(j + 1, remaining - a, cols, suffix, current, visit) {
                return false;
            }
        }
        true
    }
    let finished = walk(0, r1, &cols, &suffix, &mut current, &mut |row| {
        visited += 1;
        if visited > budget {
            return false;
        }
        let p = ln_prob(row).exp();
        if p <= threshold {
            total += p;
        }
        exact_total = match (exact_total, observed_weight, weight(row)) {
            (Some(t), Some(o), Some(w)) if w <= o => t.checked_add(w),
            (Some(t), Some(_), Some(_)) => Some(t),
            _ => None,
        };
        true
    });
    if !finished {
        return None;
    }
    match (exact_total, exact_binomial(n, r1)) {
        (Some(t), Some(d)) => Some((t as f64 / d as f64).min(1.0)),
        _ => Some(total.min(1.0)),
    }
}

/// C(n, k) in integers, `None` on overflow.
fn exact_binomial(n: u64, k: u64) -> Option<u128> {
    let k = k.min(n - k);
    (0..k).try_fold(1u128, |acc, i| Some(acc.checked_mul((n - i) as u128)? / (i + 1) as u128))
}

/// Kolmogorov–Smirnov distance between a sample and Uniform(0, 1).
pub fn ks_uniform_statistic(samples: &[f64]) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let lo = x - i as f64 / n;
            let hi = (i + 1) as f64 / n - x;
            lo.max(hi)
        })
        .fold(0.0, f64::max)
}
