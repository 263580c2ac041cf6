//! Planted-truth synthetic cohorts.
//!
//! Runs the random-intercept logistic model forward: features are drawn per
//! visit, each subject gets an intercept shift `μ_i ~ N(0, σ_μ²)`, and each
//! visit's outcome is `Bernoulli(logistic(β₀ + μ_i + Σ β_k x_k))`. Outcome
//! group quotas are met by rejection sampling whole subjects, so the
//! generative model is never bypassed.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{Cohort, FeatureKind, FeatureSpec, Observation, OutcomeGroup, Schema, Value};
use crate::rng::{stream_rng, Stream};
use crate::stats::logistic;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error("group targets not met after {attempts} draws (filled {filled:?} of {targets:?})")]
    InfeasibleTargets { attempts: u64, filled: [usize; 8], targets: [usize; 8] },
    #[error(transparent)]
    Cohort(#[from] crate::cohort::CohortError),
}

/// Draws per subject allowed for each requested subject when meeting group targets.
pub const REJECTION_BUDGET_PER_SUBJECT: u64 = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum FeatureDist {
    /// `x_ij = mean + visit_shift·(j−1) + b_i + e_ij` with `b_i ~ N(0, subject_sd²)`, `e_ij ~ N(0, sd²)`.
    Continuous {
        mean: f64,
        sd: f64,
        #[serde(default)]
        visit_shift: f64,
        #[serde(default)]
        subject_sd: f64,
    },
    Binary {
        p: f64,
    },
    /// Level probabilities follow `levels` order; the linear predictor uses
    /// the lexicographic code of the drawn level.
    Categorical {
        levels: Vec<String>,
        probs: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthFeature {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    pub dist: FeatureDist,
}

impl SynthFeature {
    pub fn spec(&self) -> FeatureSpec {
        let mut spec = match &self.dist {
            FeatureDist::Continuous { .. } => FeatureSpec::continuous(&self.name),
            FeatureDist::Binary { .. } => FeatureSpec::binary(&self.name),
            FeatureDist::Categorical { levels, .. } => FeatureSpec::categorical(&self.name, levels.iter().cloned()),
        };
        spec.unit = self.unit.clone();
        spec
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_subjects: usize,
    #[serde(default = "default_visits")]
    pub n_visits: u32,
    pub features: Vec<SynthFeature>,
    /// Intercept followed by one coefficient per feature.
    pub true_beta: Vec<f64>,
    /// Coefficient on the visit index (1-based) in the linear predictor.
    #[serde(default)]
    pub visit_beta: f64,
    pub sigma_mu: f64,
    #[serde(default)]
    pub missing_rate: f64,
    #[serde(default)]
    pub group_targets: Option<[usize; 8]>,
    #[serde(default)]
    pub seed: u64,
}

fn default_visits() -> u32 {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub beta: Vec<f64>,
    pub visit_beta: f64,
    pub sigma_mu: f64,
    /// `(subject_id, μ_i)` in subject order.
    pub subject_intercepts: Vec<(String, f64)>,
    /// Linear predictor of each cohort row, row-aligned.
    pub linear_predictors: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub group_counts: [usize; 8],
    /// Rejected subject draws while meeting group targets.
    pub rejected: u64,
}

impl SynthConfig {
    pub fn from_json(text: &str) -> Result<Self, SynthError> {
        let config: SynthConfig = serde_json::from_str(text).map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn schema(&self) -> Schema {
        Schema { n_visits: self.n_visits, features: self.features.iter().map(SynthFeature::spec).collect() }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.n_subjects == 0 {
            return bad("n_subjects must be positive".into());
        }
        if self.n_visits == 0 {
            return bad("n_visits must be positive".into());
        }
        if self.true_beta.len() != self.features.len() + 1 {
            return bad(format!(
                "true_beta needs {} entries (intercept + one per feature), got {}",
                self.features.len() + 1,
                self.true_beta.len()
            ));
        }
        if self.true_beta.iter().any(|b| !b.is_finite()) || !self.visit_beta.is_finite() {
            return bad("coefficients must be finite".into());
        }
        if !(self.sigma_mu.is_finite() && self.sigma_mu >= 0.0) {
            return bad("sigma_mu must be finite and >= 0".into());
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return bad("missing_rate must lie in [0, 1)".into());
        }
        if let Some(targets) = self.group_targets {
            if self.n_visits < 3 {
                return bad("group targets need at least 3 visits".into());
            }
            if targets.iter().sum::<usize>() != self.n_subjects {
                return bad("group_targets must sum to n_subjects".into());
            }
        }
        for f in &self.features {
            match &f.dist {
                FeatureDist::Continuous { mean, sd, visit_shift, subject_sd } => {
                    if ![*mean, *sd, *visit_shift, *subject_sd].iter().all(|v| v.is_finite()) || *sd < 0.0 || *subject_sd < 0.0 {
                        return bad(format!("feature `{}`: bad normal parameters", f.name));
                    }
                }
                FeatureDist::Binary { p } => {
                    if !(0.0..=1.0).contains(p) {
                        return bad(format!("feature `{}`: p outside [0,1]", f.name));
                    }
                }
                FeatureDist::Categorical { levels, probs } => {
                    if levels.is_empty() || levels.len() != probs.len() {
                        return bad(format!("feature `{}`: levels and probs must align", f.name));
                    }
                    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                        return bad(format!("feature `{}`: probs must lie in [0,1] and sum to 1", f.name));
                    }
                }
            }
        }
        // duplicate names, reserved names, etc.
        crate::cohort::Cohort::new(self.schema().features, self.n_visits, Vec::new())?;
        Ok(())
    }

    /// A 360-subject, three-visit cohort whose outcome groups follow the
    /// 303/13/1/9/4/1/0/29 split, with lipid, blood-pressure and sleep
    /// features of which a handful carry signal.
    pub fn table1_default(seed: u64) -> Self {
        let cont = |name: &str, mean: f64, sd: f64, shift: f64, subject_sd: f64| SynthFeature {
            name: name.into(),
            unit: None,
            dist: FeatureDist::Continuous { mean, sd, visit_shift: shift, subject_sd },
        };
        let bin = |name: &str, p: f64| SynthFeature { name: name.into(), unit: None, dist: FeatureDist::Binary { p } };
        let features = vec![
            cont("total_cholesterol", 195.0, 18.0, -6.0, 25.0),
            cont("ldl", 112.0, 16.0, -5.0, 22.0),
            cont("hdl", 53.0, 8.0, 0.0, 11.0),
            cont("triglycerides", 140.0, 45.0, 0.0, 55.0),
            cont("sbp_mean", 126.0, 8.0, 1.0, 11.0),
            cont("glucose", 104.0, 12.0, 0.5, 18.0),
            cont("creatinine", 1.0, 0.1, 0.0, 0.15),
            cont("uric_acid", 5.7, 0.7, 0.0, 1.1),
            cont("age", 56.0, 0.5, 4.0, 7.0),
            cont("bmi", 31.3, 2.0, 0.1, 6.5),
            cont("waisthip", 0.91, 0.04, 0.005, 0.08),
            cont("hipgirthm", 109.0, 5.0, 0.0, 13.0),
            cont("neckgirthm", 38.8, 1.5, 0.0, 3.8),
            cont("ahi", 11.0, 6.0, 0.5, 12.0),
            cont("nremahi", 9.0, 6.0, 0.3, 11.0),
            cont("avgo2sattst", 95.3, 1.2, 0.0, 1.5),
            cont("sleep_latency", 13.5, 9.0, 0.0, 12.0),
            cont("caffeine", 2.7, 1.2, 0.0, 1.8),
            cont("zung_index", 40.0, 5.0, 0.0, 7.0),
            bin("diabetes_med", 0.10),
            bin("htn_med", 0.35),
            bin("arthritis_ynd", 0.33),
            SynthFeature {
                name: "sex".into(),
                unit: None,
                dist: FeatureDist::Categorical { levels: vec!["F".into(), "M".into()], probs: vec![0.55, 0.45] },
            },
            SynthFeature {
                name: "eval_health".into(),
                unit: None,
                dist: FeatureDist::Categorical {
                    levels: vec!["Excellent".into(), "Fair".into(), "Good".into(), "Poor".into(), "Very good".into()],
                    probs: vec![0.15, 0.06, 0.30, 0.01, 0.48],
                },
            },
        ];
        let mut true_beta = vec![0.0; features.len() + 1];
        true_beta[0] = -3.4;
        let set = |beta: &mut Vec<f64>, name: &str, value: f64| {
            let idx = features.iter().position(|f| f.name == name).expect("known feature");
            beta[idx + 1] = value;
        };
        // centred through the intercept: effects are per unit, means absorbed above
        set(&mut true_beta, "total_cholesterol", -0.03);
        set(&mut true_beta, "ldl", -0.02);
        set(&mut true_beta, "sbp_mean", 0.02);
        set(&mut true_beta, "diabetes_med", 0.9);
        set(&mut true_beta, "htn_med", 0.8);
        set(&mut true_beta, "age", 0.04);
        let offset: f64 = 195.0 * -0.03 + 112.0 * -0.02 + 126.0 * 0.02 + 60.0 * 0.04;
        true_beta[0] -= offset;
        SynthConfig {
            n_subjects: 360,
            n_visits: 3,
            features,
            true_beta,
            visit_beta: 0.0,
            sigma_mu: 2.5,
            missing_rate: 0.03,
            group_targets: Some([303, 13, 1, 9, 4, 1, 0, 29]),
            seed,
        }
    }
}

struct SubjectDraw {
    values: Vec<Vec<Value>>,
    codes: Vec<Vec<f64>>,
    intercept: f64,
    etas: Vec<f64>,
    outcomes: Vec<bool>,
}

fn draw_subject(config: &SynthConfig, attempt: u64) -> SubjectDraw {
    let mut feat_rng = stream_rng(config.seed, Stream::Features, attempt);
    let mut mu_rng = stream_rng(config.seed, Stream::Intercepts, attempt);
    let mut out_rng = stream_rng(config.seed, Stream::Outcomes, attempt);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    let intercept = config.sigma_mu * std_normal.sample(&mut mu_rng);
    let n_visits = config.n_visits as usize;
    let mut values = vec![Vec::with_capacity(config.features.len()); n_visits];
    let mut codes = vec![Vec::with_capacity(config.features.len()); n_visits];
    for f in &config.features {
        match &f.dist {
            FeatureDist::Continuous { mean, sd, visit_shift, subject_sd } => {
                let offset = subject_sd * std_normal.sample(&mut feat_rng);
                for v in 0..n_visits {
                    let x = mean + visit_shift * v as f64 + offset + sd * std_normal.sample(&mut feat_rng);
                    values[v].push(Value::Number(x));
                    codes[v].push(x);
                }
            }
            FeatureDist::Binary { p } => {
                for v in 0..n_visits {
                    let x = if feat_rng.random::<f64>() < *p { 1.0 } else { 0.0 };
                    values[v].push(Value::Number(x));
                    codes[v].push(x);
                }
            }
            FeatureDist::Categorical { levels, probs } => {
                let mut sorted: Vec<&String> = levels.iter().collect();
                sorted.sort();
                for v in 0..n_visits {
                    let u: f64 = feat_rng.random();
                    let mut acc = 0.0;
                    let mut pick = levels.len() - 1;
                    for (i, p) in probs.iter().enumerate() {
                        acc += p;
                        if u < acc {
                            pick = i;
                            break;
                        }
                    }
                    let label = &levels[pick];
                    let code = sorted.iter().position(|l| *l == label).expect("level present") as f64;
                    values[v].push(Value::Label(label.clone()));
                    codes[v].push(code);
                }
            }
        }
    }
    let mut etas = Vec::with_capacity(n_visits);
    let mut outcomes = Vec::with_capacity(n_visits);
    for v in 0..n_visits {
        let eta = config.true_beta[0]
            + intercept
            + config.visit_beta * (v + 1) as f64
            + config.true_beta[1..].iter().zip(&codes[v]).map(|(b, x)| b * x).sum::<f64>();
        etas.push(eta);
        outcomes.push(out_rng.random::<f64>() < logistic(eta));
    }
    SubjectDraw { values, codes, intercept, etas, outcomes }
}

/// Generates a cohort and its ground truth. Equal configs give bit-identical output.
pub fn generate_cohort(config: &SynthConfig) -> Result<(Cohort, GroundTruth), SynthError> {
    config.validate()?;
    let budget = REJECTION_BUDGET_PER_SUBJECT * config.n_subjects as u64;
    let mut filled = [0usize; 8];
    let mut accepted: Vec<SubjectDraw> = Vec::with_capacity(config.n_subjects);
    let mut attempt = 0u64;
    while accepted.len() < config.n_subjects {
        if attempt >= budget {
            return Err(SynthError::InfeasibleTargets {
                attempts: attempt,
                filled,
                targets: config.group_targets.unwrap_or_default(),
            });
        }
        let draw = draw_subject(config, attempt);
        attempt += 1;
        if let Some(targets) = config.group_targets {
            let g = OutcomeGroup::from_outcomes([draw.outcomes[0], draw.outcomes[1], draw.outcomes[2]]).code() as usize;
            if filled[g] >= targets[g] {
                continue;
            }
        }
        if config.n_visits >= 3 {
            let g = OutcomeGroup::from_outcomes([draw.outcomes[0], draw.outcomes[1], draw.outcomes[2]]);
            filled[g.code() as usize] += 1;
        }
        accepted.push(draw);
    }

    let width = config.n_subjects.to_string().len().max(4);
    let mut rows = Vec::new();
    let mut intercepts = Vec::new();
    let mut etas = Vec::new();
    let mut probs = Vec::new();
    for (i, draw) in accepted.into_iter().enumerate() {
        let id = format!("S{:0width$}", i + 1);
        let mut mask_rng = stream_rng(config.seed, Stream::Mask, i as u64);
        for v in 0..config.n_visits as usize {
            let values = draw.values[v]
                .iter()
                .map(|x| if mask_rng.random::<f64>() < config.missing_rate { None } else { Some(x.clone()) })
                .collect();
            rows.push(Observation { subject_id: id.clone(), visit: v as u32 + 1, values, outcome: draw.outcomes[v] });
            etas.push(draw.etas[v]);
            probs.push(logistic(draw.etas[v]));
        }
        debug_assert_eq!(draw.codes.len(), config.n_visits as usize);
        intercepts.push((id, draw.intercept));
    }
    let cohort = Cohort::new(config.schema().features, config.n_visits, rows)?;
    let truth = GroundTruth {
        beta: config.true_beta.clone(),
        visit_beta: config.visit_beta,
        sigma_mu: config.sigma_mu,
        subject_intercepts: intercepts,
        linear_predictors: etas,
        probabilities: probs,
        group_counts: filled,
        rejected: attempt - config.n_subjects as u64,
    };
    Ok((cohort, truth))
}

/// Numeric design value of a cohort cell as the generator saw it.
pub fn design_value(spec: &FeatureSpec, value: &Value) -> f64 {
    match (spec.kind, value) {
        (FeatureKind::Categorical, Value::Label(l)) => {
            let mut sorted: Vec<&String> = spec.levels.iter().collect();
            sorted.sort();
            sorted.iter().position(|s| *s == l).map_or(f64::NAN, |c| c as f64)
        }
        (_, Value::Number(x)) => *x,
        _ => f64::NAN,
    }
}
