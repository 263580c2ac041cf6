//! Acceptance checks. Each criterion prints one PASS/FAIL line followed by
//! indented measurements; the process exits non-zero if any check fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use cohort_core::cluster::{adjusted_rand_index, assign_clusters, bic, gmm_fit_em, kld_gaussian_1d, select_k, GmmConfig};
use cohort_core::cohort::FeatureKind;
use cohort_core::eval::{
    confusion_metrics, cross_validate, evaluate_by_stratum, CvConfig, MetricsReport, StratumKind, SYNTHETIC_PREFIX,
};
use cohort_core::lgmm::{lgmm_fit, lgmm_loglik, lgmm_loglik_grad, wald_table, LgmmConfig, LgmmDesign};
use cohort_core::pipeline::{run_pipeline, PipelineConfig, Stage};
use cohort_core::preprocess::{
    encode_categoricals, impute_knn, mahalanobis_outliers, smote_oversample, DistanceScope, SmoteConfig, SmoteTarget,
};
use cohort_core::rank::{rank_features, RankConfig, SUBGROUP_TOP};
use cohort_core::stats::{fisher_exact_2xl, ks_uniform_statistic, welch_t_test};
use cohort_core::synth::{generate_cohort, SynthConfig};
use cohort_core::table::{NumericTable, RowKey};
use cohort_core::tsne::{joint_probabilities, perplexity_calibration, standardize_columns, tsne_cost_grad, tsne_embed, TsneConfig};
use common::{planted_mixture, simpson, simpson_loglik, simulate, table1_table, uniform_points};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Check = Result<Vec<String>, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn gaussian(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng))
}

fn lgmm_simpson() -> Check {
    // three subjects, two visits each
    let x = DMatrix::from_row_slice(6, 2, &[0.4, -1.2, 1.0, 0.3, -0.6, 1.1, 0.2, -0.5, 1.7, 1.4, -0.9, 0.1]);
    let y = vec![true, false, true, true, false, true];
    let keys = ["s1", "s1", "s2", "s2", "s3", "s3"]
        .iter()
        .enumerate()
        .map(|(i, s)| RowKey { subject_id: s.to_string(), visit: (i % 2 + 1) as u32 })
        .collect();
    let d = LgmmDesign::new(vec!["a".into(), "b".into()], x, y, keys).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    let mut slowest: f64 = 0.0;
    for (beta, sigma) in [([0.3, 0.6, -0.7], 0.8), ([-1.0, 1.4, 0.2], 1.5), ([0.0, 0.0, 0.0], 2.5), ([0.5, -0.3, 0.9], 0.2)] {
        let t = Instant::now();
        let ll = lgmm_loglik(&d, &beta, sigma, 40).map_err(|e| e.to_string())?;
        slowest = slowest.max(t.elapsed().as_secs_f64());
        let oracle = simpson_loglik(&d, &beta, sigma, 10_001, 12.0 * sigma);
        worst = worst.max((ll - oracle).abs());
    }
    ensure!(worst <= 1e-6, "max |Δ loglik| {worst:e}");
    ensure!(slowest < 1.0, "evaluation took {slowest} s");
    Ok(vec![format!("max |Δ| vs 10,001-point Simpson = {worst:.2e}; slowest evaluation {:.1} ms", slowest * 1e3)])
}

fn lgmm_coverage() -> Check {
    let truth = [-1.0, 0.5, -0.3];
    let reps = 200;
    let t = Instant::now();
    let mut hits = [0usize; 3];
    let mut failed = 0;
    for r in 0..reps {
        let d = simulate(&truth, 0.8, 500, 3, 10_000 + r as u64);
        match lgmm_fit(&d, &LgmmConfig::default()) {
            Ok(fit) => {
                for (j, row) in wald_table(&fit).iter().take(3).enumerate() {
                    if row.ci_lower <= truth[j] && truth[j] <= row.ci_upper {
                        hits[j] += 1;
                    }
                }
            }
            Err(_) => failed += 1,
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let cover: Vec<f64> = hits.iter().map(|&h| h as f64 / reps as f64).collect();
    let lines = vec![format!("coverage β0, β1, β2 = {cover:?} over {reps} fits ({failed} failed) in {secs:.0} s")];
    ensure!(failed == 0, "{failed} fits failed; {}", lines[0]);
    ensure!(cover.iter().all(|c| (0.91..=0.99).contains(c)), "{}", lines[0]);
    ensure!(secs < 600.0, "{}", lines[0]);
    Ok(lines)
}

/// KL(P‖Q) for Student-t affinities, evaluated directly.
fn tsne_kl_oracle(p: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    let n = y.nrows();
    let k = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 / (1.0 + (y.row(i) - y.row(j)).norm_squared()) });
    let z = k.sum();
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j && p[(i, j)] > 0.0 {
                kl += p[(i, j)] * (p[(i, j)] * z / k[(i, j)]).ln();
            }
        }
    }
    kl
}

fn gradients() -> Check {
    let d = simulate(&[-0.5, 0.8, -0.4], 1.0, 40, 3, 77);
    let h = 1e-5;
    let mut worst_lgmm: f64 = 0.0;
    for point in uniform_points(10, 4, -1.5, 1.5, 78) {
        let beta = &point[..3];
        let sigma = 0.2 + point[3].abs();
        let e = lgmm_loglik_grad(&d, beta, sigma, 20, false).map_err(|e| e.to_string())?;
        for k in 0..4 {
            let at = |delta: f64| {
                let mut b = beta.to_vec();
                let mut s = sigma;
                if k < 3 { b[k] += delta } else { s += delta }
                lgmm_loglik(&d, &b, s, 20).unwrap()
            };
            let numeric = (at(h) - at(-h)) / (2.0 * h);
            let analytic = if k < 3 { e.grad_beta[k] } else { e.grad_sigma };
            worst_lgmm = worst_lgmm.max(rel_err(analytic, numeric));
        }
    }
    let n = 12;
    let pts = uniform_points(n * n, 1, 0.0, 1.0, 79);
    let mut p = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { pts[i * n + j][0] });
    p = &p + p.transpose();
    p /= p.sum();
    let mut worst_tsne: f64 = 0.0;
    for point in uniform_points(10, 2 * n, -2.0, 2.0, 80) {
        let y = DMatrix::from_row_slice(n, 2, &point);
        let (_, grad) = tsne_cost_grad(&p, &y);
        let mut numeric = DMatrix::zeros(n, 2);
        for idx in 0..2 * n {
            let (mut a, mut b) = (y.clone(), y.clone());
            a[idx] += 1e-6;
            b[idx] -= 1e-6;
            numeric[idx] = (tsne_kl_oracle(&p, &a) - tsne_kl_oracle(&p, &b)) / 2e-6;
        }
        worst_tsne = worst_tsne.max((&grad - &numeric).amax() / numeric.amax());
    }
    ensure!(worst_lgmm < 1e-4 && worst_tsne < 1e-4, "relative error lgmm {worst_lgmm:e}, t-SNE {worst_tsne:e}");
    Ok(vec![format!("max relative error: log-likelihood {worst_lgmm:.1e}, t-SNE cost {worst_tsne:.1e} (10 points each)")])
}

fn em_and_bic() -> Check {
    let monotone = |t: &[f64]| t.windows(2).all(|w| w[1] >= w[0]);
    let mut runs = 0;
    let mut min_ari: f64 = 1.0;
    let mut hits = 0;
    for s in 0..10u64 {
        let (y, truth) = planted_mixture(&[[-5.0, 0.0], [5.0, 0.0]], 100, 500 + s);
        let cfg = GmmConfig { seed: s, ..GmmConfig::default() };
        let (k, models) = select_k(&y, 1..=6, &cfg).map_err(|e| e.to_string())?;
        hits += (k == 2) as usize;
        for m in &models {
            runs += 1;
            ensure!(monotone(&m.loglik_trace), "non-monotone trace at k = {}, seed {s}", m.k);
        }
        let two = models.iter().find(|m| m.k == 2).unwrap();
        min_ari = min_ari.min(adjusted_rand_index(&assign_clusters(two, &y).labels, &truth));
        let direct = gmm_fit_em(&y, 2, &cfg).map_err(|e| e.to_string())?;
        ensure!(monotone(&direct.loglik_trace), "non-monotone direct fit, seed {s}");
        runs += 1;
    }
    let b = bic(-350.0, 2, 100);
    let lines = vec![
        format!("select_k = 2 in {hits}/10 seeds; min ARI {min_ari:.4}; {runs} monotone traces"),
        format!("BIC(loglik −350, K = 2, n = 100) = {b:.4}"),
    ];
    ensure!(hits >= 9 && min_ari >= 0.95, "{}", lines[0]);
    ensure!((b - 750.66).abs() <= 0.01, "{}", lines[1]);
    Ok(lines)
}

fn kld() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let p = (rng.random_range(-3.0..3.0), rng.random_range(0.3f64..3.0).powi(2));
        let q = (rng.random_range(-3.0..3.0), rng.random_range(0.3f64..3.0).powi(2));
        let closed = kld_gaussian_1d(p, q).map_err(|e| e.to_string())?;
        let log_pdf = |x: f64, (m, v): (f64, f64)| -0.5 * (x - m).powi(2) / v - 0.5 * (2.0 * std::f64::consts::PI * v).ln();
        let sd = p.1.sqrt();
        let integrand = |x: f64| log_pdf(x, p).exp() * (log_pdf(x, p) - log_pdf(x, q));
        let numeric = simpson(integrand, p.0 - 14.0 * sd, p.0 + 14.0 * sd, 200_001);
        worst = worst.max((closed - numeric).abs());
    }
    let mut max_self: f64 = 0.0;
    let mut min_pair = f64::INFINITY;
    for _ in 0..1000 {
        let p = (rng.random_range(-10.0..10.0), rng.random_range(0.01..20.0));
        let q = (rng.random_range(-10.0..10.0), rng.random_range(0.01..20.0));
        max_self = max_self.max(kld_gaussian_1d(p, p).map_err(|e| e.to_string())?.abs());
        min_pair = min_pair.min(kld_gaussian_1d(p, q).map_err(|e| e.to_string())?);
    }
    let lines = vec![format!("max |closed − Simpson| {worst:.1e} (20 pairs); max |D(P‖P)| {max_self:e}; min D over 1000 pairs {min_pair:.3e}")];
    ensure!(worst <= 1e-6 && max_self == 0.0 && min_pair >= 0.0, "{}", lines[0]);
    Ok(lines)
}

fn tsne() -> Check {
    let x = gaussian(150, 4, 60);
    let mut worst: f64 = 0.0;
    for i in [0, 40, 149] {
        let d: Vec<f64> = (0..150).filter(|&j| j != i).map(|j| (x.row(i) - x.row(j)).norm_squared()).collect();
        for target in [5.0, 30.0] {
            let c = perplexity_calibration(&d, target).map_err(|e| e.to_string())?;
            let h: f64 = -c.probabilities.iter().filter(|&&p| p > 0.0).map(|p| p * p.log2()).sum::<f64>();
            worst = worst.max((2f64.powf(h) - target).abs());
        }
    }
    let (p, _) = joint_probabilities(&x, 30.0).map_err(|e| e.to_string())?;
    ensure!((p.sum() - 1.0).abs() < 1e-9, "joint P sums to {}", p.sum());

    let mut blobs = gaussian(40, 5, 61);
    for i in 20..40 {
        for j in 0..5 {
            blobs[(i, j)] += 10.0;
        }
    }
    let cfg = TsneConfig { perplexity: 10.0, seed: 62, ..TsneConfig::default() };
    let e = tsne_embed(&standardize_columns(&blobs), &cfg).map_err(|e| e.to_string())?;
    let centre = |r: std::ops::Range<usize>| {
        let k = r.len() as f64;
        r.fold([0.0, 0.0], |a, i| [a[0] + e.coords[i][0] / k, a[1] + e.coords[i][1] / k])
    };
    let (a, b) = (centre(0..20), centre(20..40));
    let dist = |p: [f64; 2], c: [f64; 2]| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt();
    let within = ((0..20).map(|i| dist(e.coords[i], a)).sum::<f64>() + (20..40).map(|i| dist(e.coords[i], b)).sum::<f64>()) / 40.0;
    let between = dist(a, b);
    let post = &e.cost_trace[cfg.exaggeration_iters..];
    let again = tsne_embed(&standardize_columns(&blobs), &cfg).map_err(|e| e.to_string())?;
    let identical = serde_json::to_vec(&e).unwrap() == serde_json::to_vec(&again).unwrap();
    let lines = vec![
        format!("max |perplexity − target| {worst:.1e}"),
        format!("blob separation {between:.2} vs within-blob spread {within:.2}"),
        format!("cost {:.4} → {:.4} after exaggeration; same-seed bytes identical: {identical}", post[0], post[post.len() - 1]),
    ];
    ensure!(worst < 1e-4, "{}", lines[0]);
    ensure!(between > 3.0 * within, "{}", lines[1]);
    ensure!(post.last().unwrap() < &post[0] && identical, "{}", lines[2]);
    Ok(lines)
}

/// Neighbour space: continuous columns z-scored over all rows, codes raw.
fn neighbour_space(x: &DMatrix<f64>, discrete: &[bool]) -> DMatrix<f64> {
    let n = x.nrows() as f64;
    let mut z = x.clone();
    for j in (0..x.ncols()).filter(|&j| !discrete[j]) {
        let m = x.column(j).sum() / n;
        let sd = (x.column(j).iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        z.column_mut(j).apply(|v| *v = (*v - m) / sd);
    }
    z
}

/// Brute-force: every synthetic row lies on a segment between a same-class
/// original and one of that original's k nearest same-class neighbours.
fn on_some_segment(s: &[f64], x: &DMatrix<f64>, members: &[usize], k: usize, discrete: &[bool]) -> bool {
    let row = |i: usize| x.row(i).iter().copied().collect::<Vec<f64>>();
    let space = neighbour_space(x, discrete);
    members.iter().any(|&a| {
        let ra = row(a);
        if discrete.iter().enumerate().any(|(j, &d)| d && s[j] != ra[j]) {
            return false;
        }
        let mut by_dist: Vec<(f64, usize)> =
            members.iter().filter(|&&b| b != a).map(|&b| ((space.row(a) - space.row(b)).norm_squared(), b)).collect();
        by_dist.sort_by(|p, q| p.0.total_cmp(&q.0));
        let kth = by_dist.get(k.min(by_dist.len()) - 1).map_or(f64::INFINITY, |p| p.0);
        by_dist.iter().filter(|p| p.0 <= kth).any(|&(_, b)| {
            let rb = row(b);
            let cont: Vec<usize> = (0..s.len()).filter(|&j| !discrete[j]).collect();
            let dd: f64 = cont.iter().map(|&j| (rb[j] - ra[j]).powi(2)).sum();
            let lambda = if dd == 0.0 { 0.0 } else { cont.iter().map(|&j| (s[j] - ra[j]) * (rb[j] - ra[j])).sum::<f64>() / dd };
            (-1e-12..=1.0 + 1e-12).contains(&lambda)
                && cont.iter().all(|&j| (s[j] - (ra[j] + lambda * (rb[j] - ra[j]))).abs() <= 1e-9 * (1.0 + ra[j].abs()))
        })
    })
}

fn preprocessing() -> Check {
    let mut lines = Vec::new();
    // SMOTE on small inputs
    let mut checked = 0;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let n = 30 + 4 * seed as usize;
        let x = DMatrix::from_fn(n, 4, |_, j| if j == 3 { rng.random_range(0..2) as f64 } else { rng.random_range(-5.0..5.0) });
        let y: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
        let discrete = [false, false, false, true];
        for (percent, target) in [(200, SmoteTarget::Minority), (100, SmoteTarget::Both)] {
            let cfg = SmoteConfig { percent, k: 5, target };
            let out = smote_oversample(&x, &y, &discrete, &cfg, seed).map_err(|e| e.to_string())?;
            ensure!(out.data.rows(0, n) == x.rows(0, n), "originals were altered");
            for r in n..out.data.nrows() {
                let s: Vec<f64> = out.data.row(r).iter().copied().collect();
                let members: Vec<usize> = (0..n).filter(|&i| y[i] == out.labels[r]).collect();
                ensure!(on_some_segment(&s, &x, &members, cfg.k, &discrete), "synthetic row {r} (seed {seed}) is off every segment");
                checked += 1;
            }
        }
    }
    lines.push(format!("{checked} synthetic rows verified on-segment by brute force (n ≤ 46)"));

    // visit-1 rows of the Table-1-shaped cohort
    let (table, _) = table1_table(1);
    let visit1: Vec<usize> = (0..table.nrows()).filter(|&i| table.keys[i].visit == 1).collect();
    let t1 = table.select_rows(&visit1);
    let discrete: Vec<bool> = t1.kinds.iter().map(|k| k.is_discrete()).collect();
    let before = t1.outcome.iter().filter(|&&y| y).count();
    let out = smote_oversample(&t1.data, &t1.outcome, &discrete, &SmoteConfig { percent: 100, k: 5, target: SmoteTarget::Minority }, 3)
        .map_err(|e| e.to_string())?;
    let after = out.labels.iter().filter(|&&y| y).count();
    let negatives = (t1.outcome.len() - before, out.labels.len() - after);
    lines.push(format!("visit-1 positives {before} → {after} at 100%; negatives {} → {}", negatives.0, negatives.1));
    ensure!(before == 34 && after == 68 && negatives.0 == negatives.1, "{}", lines[1]);

    // Mahalanobis under an affine map
    let x = gaussian(200, 4, 300);
    let a = DMatrix::from_row_slice(4, 4, &[2.0, 0.3, -0.5, 0.0, 0.1, 1.5, 0.2, -0.4, 0.0, -0.7, 3.0, 0.6, 0.8, 0.0, 0.1, 0.9]);
    let shift = nalgebra::RowDVector::from_row_slice(&[5.0, -3.0, 100.0, 0.25]);
    let mut moved = &x * a.transpose();
    for mut r in moved.row_iter_mut() {
        r += &shift;
    }
    let r0 = mahalanobis_outliers(&x, 0.001).map_err(|e| e.to_string())?;
    let r1 = mahalanobis_outliers(&moved, 0.001).map_err(|e| e.to_string())?;
    let worst = r0.distances.iter().zip(&r1.distances).map(|(p, q)| rel_err(*p, *q)).fold(0.0, f64::max);
    lines.push(format!("Mahalanobis max relative change under an affine map {worst:.1e}"));
    ensure!(worst <= 1e-8 && r0.flags == r1.flags, "{}", lines[2]);

    // KNN leaves observed cells untouched
    let (cohort, _) = generate_cohort(&SynthConfig { missing_rate: 0.1, ..SynthConfig::table1_default(4) }).map_err(|e| e.to_string())?;
    let (encoded, _) = encode_categoricals(&cohort).map_err(|e| e.to_string())?;
    let imputed = impute_knn(&encoded, 5, &DistanceScope::AllColumns).map_err(|e| e.to_string())?.table;
    let mut observed = 0;
    for i in 0..encoded.nrows() {
        for j in 0..encoded.ncols() {
            if !encoded.missing[(i, j)] {
                observed += 1;
                ensure!(encoded.data[(i, j)].to_bits() == imputed.data[(i, j)].to_bits(), "cell ({i}, {j}) changed");
            }
        }
    }
    let missing = encoded.missing.iter().filter(|&&m| m).count();
    lines.push(format!("{observed} observed cells bit-identical after imputing {missing} missing ones"));
    ensure!(imputed.is_complete() && missing > 0, "imputation left gaps");
    Ok(lines)
}

fn planted_rank_table(n_subjects: usize, seed: u64) -> NumericTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = ["noise1", "signal", "noise2", "constant", "noise3", "noise4"];
    let mut data = DMatrix::zeros(n_subjects * 2, names.len());
    let mut keys = Vec::new();
    let mut outcome = Vec::new();
    for s in 0..n_subjects {
        for v in 1..=2u32 {
            let r = keys.len();
            for j in 0..names.len() {
                data[(r, j)] = if j == 3 { 7.0 } else { rng.random_range(0.0..1.0) };
            }
            outcome.push(data[(r, 1)] > 0.7);
            keys.push(RowKey { subject_id: format!("p{s:04}"), visit: v });
        }
    }
    NumericTable {
        names: names.iter().map(|s| s.to_string()).collect(),
        kinds: vec![FeatureKind::Continuous; names.len()],
        n_levels: vec![0; names.len()],
        missing: DMatrix::from_element(data.nrows(), data.ncols(), false),
        data,
        keys,
        outcome,
    }
}

fn ranking() -> Check {
    let table = planted_rank_table(150, 400);
    let ranked = rank_features(&table, &RankConfig { seed: 401, ..RankConfig::default() }).map_err(|e| e.to_string())?;
    let signal = ranked.rows.iter().find(|r| r.name == "signal").unwrap();
    let folds = signal.per_fold.len();
    let wins = (0..folds).filter(|&f| ranked.rows.iter().all(|r| r.name == "signal" || r.per_fold[f] < signal.per_fold[f])).count();
    let sums: Vec<f64> = (0..folds).map(|f| ranked.rows.iter().map(|r| r.per_fold[f]).sum()).collect();
    let mean_sum: f64 = ranked.rows.iter().map(|r| r.mean).sum();
    let constant = ranked.rows.iter().find(|r| r.name == "constant").unwrap();
    let mut lines = vec![
        format!("signal ranked first in {wins}/{folds} folds"),
        format!("per-fold importance sums deviate from 1 by at most {:.1e}", sums.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max)),
        format!("constant feature importances {:?}", constant.per_fold),
    ];
    ensure!(wins >= 4, "{}", lines[0]);
    ensure!(sums.iter().all(|s| (s - 1.0).abs() <= 1e-9) && (mean_sum - 1.0).abs() <= 1e-9, "{}", lines[1]);
    ensure!(constant.per_fold.iter().all(|&v| v == 0.0) && constant.mean == 0.0, "{}", lines[2]);

    let (t1, _) = table1_table(2);
    let default = rank_features(&t1, &RankConfig { seed: 5, ..RankConfig::default() }).map_err(|e| e.to_string())?;
    let sub = rank_features(&t1, &RankConfig { seed: 5, n_top: SUBGROUP_TOP, ..RankConfig::default() }).map_err(|e| e.to_string())?;
    let distinct = default.top.iter().collect::<BTreeSet<_>>().len();
    lines.push(format!("default mode returns {} names ({distinct} distinct), subgroup mode {}", default.top.len(), sub.top.len()));
    ensure!(default.top.len() == 20 && distinct == 20 && sub.top.len() == 10, "{}", lines[3]);
    ensure!(sub.top[..] == default.top[..10], "subgroup list is not the head of the full ranking");
    Ok(lines)
}

fn from_counts(tp: usize, tn: usize, fp: usize, fn_: usize) -> (Vec<bool>, Vec<bool>) {
    let mut pred = Vec::new();
    let mut label = Vec::new();
    for (n, p, l) in [(fn_, false, true), (tp, true, true), (fp, true, false), (tn, false, false)] {
        pred.extend(std::iter::repeat_n(p, n));
        label.extend(std::iter::repeat_n(l, n));
    }
    // interleave so position carries no information
    let idx: Vec<usize> = (0..pred.len()).map(|i| (i * 7) % pred.len().max(1)).collect();
    if BTreeSet::from_iter(idx.iter().copied()).len() == pred.len() {
        return (idx.iter().map(|&i| pred[i]).collect(), idx.iter().map(|&i| label[i]).collect());
    }
    (pred, label)
}

fn metrics_and_cv() -> Check {
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    let tables = [(3, 5, 1, 1), (10, 0, 0, 0), (0, 9, 0, 0), (0, 0, 4, 6), (17, 23, 5, 2), (1, 1, 1, 1), (0, 12, 3, 0)];
    for &(tp, tn, fp, fn_) in &tables {
        let (pred, label) = from_counts(tp, tn, fp, fn_);
        let m = confusion_metrics(&pred, &label).map_err(|e| e.to_string())?;
        let c = m.counts;
        ensure!((c.tp, c.tn, c.fp, c.fn_) == (tp as u64, tn as u64, fp as u64, fn_ as u64), "counts {c:?} for {:?}", (tp, tn, fp, fn_));
        ensure!(m.accuracy == ratio(tp + tn, tp + tn + fp + fn_), "accuracy {:?}", m.accuracy);
        ensure!(m.precision == ratio(tp, tp + fp), "precision {:?}", m.precision);
        ensure!(m.specificity == ratio(tn, tn + fp), "specificity {:?}", m.specificity);
        ensure!(m.npv == ratio(tn, tn + fn_), "npv {:?}", m.npv);
        ensure!(m.recall == ratio(tp, tp + fn_), "recall {:?}", m.recall);
    }
    let (pred, label) = from_counts(3, 5, 1, 1);
    let m = confusion_metrics(&pred, &label).unwrap();
    ensure!(
        m.accuracy == Some(0.8) && m.precision == Some(0.75) && m.recall == Some(0.75) && m.specificity == Some(5.0 / 6.0) && m.npv == Some(5.0 / 6.0),
        "worked example {m:?}"
    );
    let mut lines = vec![format!("{} hand-counted tables match exactly, including undefined ratios", tables.len())];

    let (table, groups) = table1_table(3);
    let features: Vec<String> = ["total_cholesterol", "ldl", "hdl", "triglycerides", "glucose", "age"].map(String::from).to_vec();
    let cv = cross_validate(&table, &features, &CvConfig { seed: 9, ..CvConfig::default() }).map_err(|e| e.to_string())?;
    let subjects: BTreeSet<&str> = table.keys.iter().map(|k| k.subject_id.as_str()).collect();
    let folded: BTreeSet<&str> = cv.folds.fold_of.keys().map(String::as_str).collect();
    ensure!(subjects == folded, "folds do not cover the subject set");
    let mut fold_seen: BTreeMap<&str, usize> = BTreeMap::new();
    let mut rows_seen = vec![0usize; table.nrows()];
    for p in &cv.predictions {
        ensure!(!p.key.subject_id.starts_with(SYNTHETIC_PREFIX), "synthetic row {:?} evaluated", p.key);
        ensure!(p.row < table.nrows() && table.keys[p.row] == p.key, "prediction {:?} has no original row", p.key);
        ensure!(p.label == table.outcome[p.row], "label mismatch at row {}", p.row);
        ensure!(*fold_seen.entry(&p.key.subject_id).or_insert(p.fold) == p.fold, "subject {} split across folds", p.key.subject_id);
        ensure!(cv.folds.fold_of[&p.key.subject_id] == p.fold, "row evaluated outside its fold");
        rows_seen[p.row] += 1;
    }
    ensure!(rows_seen.iter().all(|&c| c == 1), "some rows were not evaluated exactly once");
    let synthetic: usize = cv.fold_records.iter().map(|r| r.synthetic_rows).sum();
    ensure!(synthetic > 0, "no oversampling happened, provenance check is vacuous");
    let sum_counts = |reports: &[MetricsReport]| {
        reports.iter().fold((0, 0, 0, 0), |a, r| (a.0 + r.counts.tp, a.1 + r.counts.tn, a.2 + r.counts.fp, a.3 + r.counts.fn_))
    };
    let pooled = (cv.pooled.counts.tp, cv.pooled.counts.tn, cv.pooled.counts.fp, cv.pooled.counts.fn_);
    ensure!(sum_counts(&cv.per_fold) == pooled, "fold counts do not sum to pooled");
    for kind in [StratumKind::Visit, StratumKind::Group] {
        let s = evaluate_by_stratum(&cv.predictions, &groups, kind, 3);
        ensure!(sum_counts(&s.reports) == pooled, "{kind:?} strata do not sum to pooled");
    }
    lines.push(format!(
        "{} subjects in {} folds, {} rows each evaluated once, {synthetic} synthetic training rows never evaluated",
        subjects.len(),
        cv.folds.n_folds,
        cv.predictions.len()
    ));
    lines.push("fold, visit and group confusion counts each sum to the pooled counts".into());
    Ok(lines)
}

fn hypothesis_tests() -> Check {
    let p = fisher_exact_2xl([&[2, 0], &[0, 2]], 1_000_000).ok_or("Fisher enumeration failed")?;
    // integer enumeration: tables with margins (2, 2 | 2, 2) have weights 1, 4, 1
    let exact = (1.0 + 1.0) / 6.0;
    let mut rng = ChaCha8Rng::seed_from_u64(700);
    let mut pvals = Vec::with_capacity(2000);
    for _ in 0..2000 {
        let a: Vec<f64> = (0..8).map(|_| StandardNormal.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..15).map(|_| 3.0 * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
        pvals.push(welch_t_test(&a, &b).p_value);
    }
    let ks = ks_uniform_statistic(&pvals);
    // independent KS computation
    let mut sorted = pvals.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let ks_oracle = sorted.iter().enumerate().map(|(i, &x)| (x - i as f64 / n).max((i + 1) as f64 / n - x)).fold(0.0, f64::max);
    let lines = vec![format!("Fisher p = {p:.17} (1/3 = {exact:.17})"), format!("Welch KS statistic {ks:.4} over 2000 null draws")];
    ensure!(p == exact, "{}", lines[0]);
    ensure!(ks < 0.05 && (ks - ks_oracle).abs() < 1e-12, "{} (oracle {ks_oracle:.4})", lines[1]);
    Ok(lines)
}

fn end_to_end() -> Check {
    let config = PipelineConfig { seed: 2024, ..PipelineConfig::default() };
    let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    let t = Instant::now();
    let first = run_pipeline(&config, a.path()).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let second = run_pipeline(&config, b.path()).map_err(|e| e.to_string())?;
    let truth: serde_json::Value = serde_json::from_slice(&std::fs::read(a.path().join("ground_truth.json")).unwrap()).unwrap();
    let counts: Vec<u64> = truth["group_counts"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    ensure!(counts == [303, 13, 1, 9, 4, 1, 0, 29], "group counts {counts:?}");
    let stages: Vec<Stage> = first.payload.stages.iter().map(|s| s.stage).collect();
    ensure!(stages == Stage::ALL, "stages run {stages:?}");
    for name in [
        "wald_lgmm.csv", "wald_lr_visit1.csv", "importance.csv", "embedding.csv", "assignment.csv", "kld.csv", "trajectory.json",
        "comparison.csv",
    ] {
        ensure!(a.path().join(name).exists(), "missing {name}");
    }
    let gmm: serde_json::Value = serde_json::from_slice(&std::fs::read(a.path().join("gmm.json")).unwrap()).unwrap();
    ensure!(gmm["model"]["k"] == 2, "assignment has k = {}", gmm["model"]["k"]);
    let identical = first.payload_json() == second.payload_json();
    let lines = vec![
        format!("all 7 stages in {secs:.1} s for 360 subjects × 3 visits; group counts {counts:?}"),
        format!("repeat run manifest payload identical: {identical} ({})", &first.payload_sha256[..16]),
    ];
    ensure!(secs < 300.0, "{}", lines[0]);
    ensure!(identical, "{}", lines[1]);
    Ok(lines)
}

fn main() {
    let criteria: [(&str, fn() -> Check); 11] = [
        ("LGMM log-likelihood matches dense Simpson integration", lgmm_simpson),
        ("LGMM Wald interval coverage", lgmm_coverage),
        ("Analytic gradients match central differences", gradients),
        ("EM monotonicity, planted recovery and BIC", em_and_bic),
        ("Gaussian KL divergence", kld),
        ("t-SNE calibration, separation, descent and determinism", tsne),
        ("Preprocessing properties", preprocessing),
        ("Feature ranking", ranking),
        ("Metrics and cross-validation", metrics_and_cv),
        ("Hypothesis tests", hypothesis_tests),
        ("End-to-end run", end_to_end),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(lines) => {
                println!("PASS {:>2}. {name} ({secs:.1} s)", i + 1);
                lines.iter().for_each(|l| println!("        {l}"));
            }
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2}. {name} ({secs:.1} s)", i + 1);
                println!("        {why}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
