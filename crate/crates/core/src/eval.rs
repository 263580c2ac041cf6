//! Confusion metrics, subject-level cross-validation and stratified reports.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::OutcomeGroup;
use crate::lgmm::{lgmm_fit, lgmm_predict, FitWarning, LgmmConfig, LgmmDesign, LgmmError, PredictMode};
use crate::preprocess::{smote_oversample, PreprocessError, RowOrigin, SmoteConfig, SmoteTarget};
use crate::rank::{rank_features, RankConfig, RankError, SUBGROUP_TOP};
use crate::rng::{mix, stream_rng, Stream};
use crate::table::{NumericTable, RowKey};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{left} predictions for {right} labels")]
    LengthMismatch { left: usize, right: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error("{count} subjects in class {class} cannot fill {folds} folds")]
    TooFewSubjects { class: bool, count: usize, folds: usize },
    #[error("fold count must be at least 2, got {0}")]
    InvalidFolds(usize),
    #[error("threshold must lie in (0, 1), got {0}")]
    InvalidThreshold(f64),
    #[error("fold {fold}: {cause}")]
    Model { fold: usize, cause: LgmmError },
    #[error(transparent)]
    Lgmm(#[from] LgmmError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error("fold {fold}: evaluation row {row} is synthetic or shares a subject with training")]
    Provenance { fold: usize, row: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn from_predictions(predictions: &[bool], labels: &[bool]) -> Result<Self, EvalError> {
        if predictions.len() != labels.len() {
            return Err(EvalError::LengthMismatch { left: predictions.len(), right: labels.len() });
        }
        let mut c = ConfusionCounts::default();
        for (&p, &l) in predictions.iter().zip(labels) {
            match (p, l) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.tn += other.tn;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "stratum", content = "value", rename_all = "lowercase")]
pub enum Stratum {
    Pooled,
    Visit(u32),
    Group(u8),
    Fold(usize),
}

impl std::fmt::Display for Stratum {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stratum::Pooled => write!(f, "pooled"),
            Stratum::Visit(v) => write!(f, "visit {v}"),
            Stratum::Group(g) => write!(f, "group {g}"),
            Stratum::Fold(k) => write!(f, "fold {}", k + 1),
        }
    }
}

/// The five rates; `None` where the denominator is zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub stratum: Stratum,
    pub counts: ConfusionCounts,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub specificity: Option<f64>,
    pub npv: Option<f64>,
    pub recall: Option<f64>,
}

impl MetricsReport {
    pub fn from_counts(stratum: Stratum, c: ConfusionCounts) -> Self {
        MetricsReport {
            stratum,
            counts: c,
            accuracy: ratio(c.tp + c.tn, c.total()),
            precision: ratio(c.tp, c.tp + c.fp),
            specificity: ratio(c.tn, c.tn + c.fp),
            npv: ratio(c.tn, c.tn + c.fn_),
            recall: ratio(c.tp, c.tp + c.fn_),
        }
    }

    pub fn csv_header() -> &'static str {
        "stratum,tp,tn,fp,fn,accuracy,precision,specificity,npv,recall"
    }

    pub fn csv_row(&self) -> String {
        let f = |m: Option<f64>| m.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
        let c = &self.counts;
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.stratum,
            c.tp,
            c.tn,
            c.fp,
            c.fn_,
            f(self.accuracy),
            f(self.precision),
            f(self.specificity),
            f(self.npv),
            f(self.recall)
        )
    }
}

pub fn confusion_metrics(predictions: &[bool], labels: &[bool]) -> Result<MetricsReport, EvalError> {
    if predictions.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(MetricsReport::from_counts(Stratum::Pooled, ConfusionCounts::from_predictions(predictions, labels)?))
}

/// Assignment of whole subjects to folds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectFolds {
    pub n_folds: usize,
    pub fold_of: BTreeMap<String, usize>,
    /// Any-visit outcome per subject, the stratification label.
    pub label_of: BTreeMap<String, bool>,
}

impl SubjectFolds {
    pub fn fold_of_row(&self, key: &RowKey) -> Option<usize> {
        self.fold_of.get(&key.subject_id).copied()
    }

    pub fn subjects_in(&self, fold: usize) -> BTreeSet<&str> {
        self.fold_of.iter().filter(|(_, &f)| f == fold).map(|(s, _)| s.as_str()).collect()
    }
}

/// Stratified subject-level folds. Subjects are labelled by whether any of
/// their visits has a positive outcome; each class is shuffled and dealt
/// round-robin, the second class continuing the first one's counter so fold
/// sizes differ by at most one.
pub fn stratified_subject_folds(keys: &[RowKey], outcome: &[bool], folds: usize, seed: u64) -> Result<SubjectFolds, EvalError> {
    if folds < 2 {
        return Err(EvalError::InvalidFolds(folds));
    }
    if keys.len() != outcome.len() {
        return Err(EvalError::LengthMismatch { left: keys.len(), right: outcome.len() });
    }
    let mut label_of: BTreeMap<String, bool> = BTreeMap::new();
    for (k, &y) in keys.iter().zip(outcome) {
        *label_of.entry(k.subject_id.clone()).or_insert(false) |= y;
    }
    let mut fold_of = BTreeMap::new();
    let mut counter = 0usize;
    for class in [true, false] {
        let mut members: Vec<&String> = label_of.iter().filter(|(_, &l)| l == class).map(|(s, _)| s).collect();
        if !members.is_empty() && members.len() < folds {
            return Err(EvalError::TooFewSubjects { class, count: members.len(), folds });
        }
        members.shuffle(&mut stream_rng(seed, Stream::Folds, class as u64));
        for s in members {
            fold_of.insert(s.clone(), counter % folds);
            counter += 1;
        }
    }
    Ok(SubjectFolds { n_folds: folds, fold_of, label_of })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelChoice {
    /// Random-intercept logistic model over all visits.
    #[default]
    Lgmm,
    /// One ordinary logistic regression per visit.
    Lr,
}

impl std::fmt::Display for ModelChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelChoice::Lgmm => "lgmm",
            ModelChoice::Lr => "lr",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub folds: usize,
    pub seed: u64,
    /// Oversampling of each training split; evaluation rows are never resampled.
    pub smote: Option<SmoteConfig>,
    pub model: ModelChoice,
    pub lgmm: LgmmConfig,
    /// Append the visit number as a covariate (LGMM only; the per-visit
    /// regressions hold it constant).
    pub visit_covariate: bool,
    pub threshold: f64,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            folds: 5,
            seed: 0,
            smote: Some(SmoteConfig::default()),
            model: ModelChoice::Lgmm,
            lgmm: LgmmConfig::default(),
            visit_covariate: true,
            threshold: 0.5,
        }
    }
}

/// Out-of-fold prediction for one original row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OofPrediction {
    pub key: RowKey,
    /// Row index in the evaluated table.
    pub row: usize,
    pub fold: usize,
    pub probability: f64,
    pub predicted: bool,
    pub label: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub fold: usize,
    pub train_rows: usize,
    pub synthetic_rows: usize,
    pub eval_rows: usize,
    /// Fit warnings keyed by model (`lgmm` or `lr visit v`).
    pub warnings: Vec<(String, FitWarning)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub model: ModelChoice,
    pub features: Vec<String>,
    pub folds: SubjectFolds,
    pub per_fold: Vec<MetricsReport>,
    /// Metrics of the concatenated out-of-fold predictions.
    pub pooled: MetricsReport,
    pub predictions: Vec<OofPrediction>,
    pub fold_records: Vec<FoldRecord>,
}

impl CvReport {
    pub fn metrics_csv(&self) -> String {
        let mut out = format!("model,{}\n", MetricsReport::csv_header());
        for m in self.per_fold.iter().chain(std::iter::once(&self.pooled)) {
            out.push_str(&format!("{},{}\n", self.model, m.csv_row()));
        }
        out
    }

    pub fn predictions_csv(&self) -> String {
        let mut out = String::from("subject_id,visit,fold,probability,predicted,label\n");
        for p in &self.predictions {
            out.push_str(&format!(
                "{},{},{},{:.9},{},{}\n",
                p.key.subject_id,
                p.key.visit,
                p.fold + 1,
                p.probability,
                p.predicted as u8,
                p.label as u8
            ));
        }
        out
    }
}

/// Pseudo-subject identifiers for synthetic rows cannot collide with
/// cohort identifiers, which are validated to be non-empty and printable.
pub const SYNTHETIC_PREFIX: &str = "\u{1}smote";

struct Design {
    names: Vec<String>,
    x: DMatrix<f64>,
    discrete: Vec<bool>,
}

fn design_matrix(table: &NumericTable, features: &[String], visit: bool) -> Result<Design, EvalError> {
    let d = LgmmDesign::from_table(table, features, visit)?;
    let mut discrete: Vec<bool> =
        features.iter().map(|f| table.kinds[table.column_index(f).expect("checked by the design")].is_discrete()).collect();
    if visit {
        discrete.push(true);
    }
    Ok(Design { names: d.names, x: d.x, discrete })
}

struct FoldOutput {
    predictions: Vec<OofPrediction>,
    record: FoldRecord,
}

fn run_fold(table: &NumericTable, design: &Design, folds: &SubjectFolds, fold: usize, config: &CvConfig) -> Result<FoldOutput, EvalError> {
    let n = table.nrows();
    let train: Vec<usize> = (0..n).filter(|&i| folds.fold_of_row(&table.keys[i]) != Some(fold)).collect();
    let test: Vec<usize> = (0..n).filter(|&i| folds.fold_of_row(&table.keys[i]) == Some(fold)).collect();
    let x_train = design.x.select_rows(&train);
    let y_train: Vec<bool> = train.iter().map(|&i| table.outcome[i]).collect();
    let (x_fit, y_fit, origin) = match &config.smote {
        Some(smote) => {
            let out = smote_oversample(&x_train, &y_train, &design.discrete, smote, mix(config.seed, fold as u64))?;
            (out.data, out.labels, out.origin)
        }
        None => (x_train, y_train, (0..train.len()).map(|row| RowOrigin::Original { row }).collect()),
    };
    let keys_fit: Vec<RowKey> = origin
        .iter()
        .enumerate()
        .map(|(i, o)| match *o {
            RowOrigin::Original { row } => table.keys[train[row]].clone(),
            RowOrigin::Synthetic { parent, .. } => {
                RowKey { subject_id: format!("{SYNTHETIC_PREFIX}-{fold}-{i}"), visit: table.keys[train[parent]].visit }
            }
        })
        .collect();

    // provenance: evaluation rows are originals of subjects absent from training
    let train_subjects: BTreeSet<&str> = keys_fit.iter().map(|k| k.subject_id.as_str()).collect();
    if let Some(&row) = test
        .iter()
        .find(|&&i| train_subjects.contains(table.keys[i].subject_id.as_str()) || table.keys[i].subject_id.starts_with(SYNTHETIC_PREFIX))
    {
        return Err(EvalError::Provenance { fold, row });
    }

    let model_err = |cause| EvalError::Model { fold, cause };
    let x_test = design.x.select_rows(&test);
    let keys_test: Vec<RowKey> = test.iter().map(|&i| table.keys[i].clone()).collect();
    let mut warnings = Vec::new();
    let mut probability = vec![f64::NAN; test.len()];
    match config.model {
        ModelChoice::Lgmm => {
            let d = LgmmDesign::new(design.names.clone(), x_fit, y_fit, keys_fit).map_err(model_err)?;
            let fit = lgmm_fit(&d, &config.lgmm).map_err(model_err)?;
            warnings.extend(fit.warnings.iter().map(|w| ("lgmm".to_string(), *w)));
            probability = lgmm_predict(&fit, &x_test, &keys_test, PredictMode::Population).map_err(model_err)?.probabilities;
        }
        ModelChoice::Lr => {
            let p = design.names.len() - usize::from(config.visit_covariate);
            let cols: Vec<usize> = (0..p).collect();
            let visits: BTreeSet<u32> = keys_test.iter().map(|k| k.visit).collect();
            for v in visits {
                let rows: Vec<usize> = (0..keys_fit.len()).filter(|&i| keys_fit[i].visit == v).collect();
                let d = LgmmDesign::new(
                    design.names[..p].to_vec(),
                    x_fit.select_rows(&rows).select_columns(&cols),
                    rows.iter().map(|&i| y_fit[i]).collect(),
                    rows.iter().map(|&i| keys_fit[i].clone()).collect(),
                )
                .map_err(model_err)?;
                let fit = lgmm_fit(&d, &LgmmConfig { fix_sigma_zero: true, ..config.lgmm.clone() }).map_err(model_err)?;
                warnings.extend(fit.warnings.iter().map(|w| (format!("lr visit {v}"), *w)));
                let at: Vec<usize> = (0..test.len()).filter(|&i| keys_test[i].visit == v).collect();
                let keys: Vec<RowKey> = at.iter().map(|&i| keys_test[i].clone()).collect();
                let pred = lgmm_predict(&fit, &x_test.select_rows(&at).select_columns(&cols), &keys, PredictMode::Population)
                    .map_err(model_err)?;
                for (&i, p) in at.iter().zip(pred.probabilities) {
                    probability[i] = p;
                }
            }
        }
    }
    let predictions = test
        .iter()
        .zip(probability)
        .map(|(&row, prob)| OofPrediction {
            key: table.keys[row].clone(),
            row,
            fold,
            probability: prob,
            predicted: prob >= config.threshold,
            label: table.outcome[row],
        })
        .collect();
    let synthetic_rows = origin.iter().filter(|o| o.is_synthetic()).count();
    Ok(FoldOutput {
        predictions,
        record: FoldRecord { fold, train_rows: train.len(), synthetic_rows, eval_rows: test.len(), warnings },
    })
}

/// Subject-level stratified k-fold cross-validation. Each training split is
/// oversampled (synthetic rows become single-visit pseudo-subjects), the
/// model is fitted and the held-out subjects are predicted at the
/// population level. The pooled report is computed from the concatenated
/// out-of-fold predictions.
pub fn cross_validate(table: &NumericTable, features: &[String], config: &CvConfig) -> Result<CvReport, EvalError> {
    if !(config.threshold > 0.0 && config.threshold < 1.0) {
        return Err(EvalError::InvalidThreshold(config.threshold));
    }
    let visit = config.visit_covariate;
    let design = design_matrix(table, features, visit)?;
    let folds = stratified_subject_folds(&table.keys, &table.outcome, config.folds, config.seed)?;
    let outputs: Vec<FoldOutput> =
        (0..config.folds).into_par_iter().map(|f| run_fold(table, &design, &folds, f, config)).collect::<Result<_, _>>()?;

    let mut predictions: Vec<OofPrediction> = Vec::with_capacity(table.nrows());
    let mut per_fold = Vec::new();
    let mut fold_records = Vec::new();
    for out in outputs {
        let (pred, lab): (Vec<bool>, Vec<bool>) = out.predictions.iter().map(|p| (p.predicted, p.label)).unzip();
        per_fold.push(MetricsReport::from_counts(Stratum::Fold(out.record.fold), ConfusionCounts::from_predictions(&pred, &lab)?));
        predictions.extend(out.predictions);
        fold_records.push(out.record);
    }
    predictions.sort_by_key(|p| p.row);
    let (pred, lab): (Vec<bool>, Vec<bool>) = predictions.iter().map(|p| (p.predicted, p.label)).unzip();
    let pooled = MetricsReport::from_counts(Stratum::Pooled, ConfusionCounts::from_predictions(&pred, &lab)?);
    Ok(CvReport { model: config.model, features: features.to_vec(), folds, per_fold, pooled, predictions, fold_records })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StratumKind {
    Visit,
    Group,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratumReport {
    pub reports: Vec<MetricsReport>,
    /// Requested strata without any prediction.
    pub empty: Vec<Stratum>,
}

impl StratumReport {
    pub fn to_csv_string(&self) -> String {
        let mut out = format!("{}\n", MetricsReport::csv_header());
        for r in &self.reports {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }
}

/// Metrics per visit (1..=`n_visits`) or per outcome group (0..=7). Rows
/// of subjects without a group are left out of the group view.
pub fn evaluate_by_stratum(
    predictions: &[OofPrediction],
    groups: &BTreeMap<String, OutcomeGroup>,
    kind: StratumKind,
    n_visits: u32,
) -> StratumReport {
    let strata: Vec<Stratum> = match kind {
        StratumKind::Visit => (1..=n_visits).map(Stratum::Visit).collect(),
        StratumKind::Group => (0..8).map(Stratum::Group).collect(),
    };
    let mut counts: BTreeMap<Stratum, ConfusionCounts> = BTreeMap::new();
    for p in predictions {
        let s = match kind {
            StratumKind::Visit => Stratum::Visit(p.key.visit),
            StratumKind::Group => match groups.get(&p.key.subject_id) {
                Some(g) => Stratum::Group(g.code()),
                None => continue,
            },
        };
        let one = ConfusionCounts::from_predictions(&[p.predicted], &[p.label]).expect("equal lengths");
        counts.entry(s).or_default().add(&one);
    }
    let mut reports = Vec::new();
    let mut empty = Vec::new();
    for s in strata {
        match counts.remove(&s) {
            Some(c) => reports.push(MetricsReport::from_counts(s, c)),
            None => empty.push(s),
        }
    }
    // visits beyond the requested range are still reported
    reports.extend(counts.into_iter().map(|(s, c)| MetricsReport::from_counts(s, c)));
    StratumReport { reports, empty }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubgroupConfig {
    pub groups: Vec<u8>,
    pub n_top: usize,
    pub smote: SmoteConfig,
}

impl Default for SubgroupConfig {
    fn default() -> Self {
        SubgroupConfig { groups: vec![1, 3], n_top: SUBGROUP_TOP, smote: SmoteConfig { percent: 500, k: 5, target: SmoteTarget::Both } }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgroupResult {
    pub group: u8,
    pub subjects: usize,
    pub top: Vec<String>,
    pub cv: Option<CvReport>,
    /// Why the group could not be evaluated.
    pub skipped: Option<String>,
}

/// Per-group models: the group's own feature ranking (top `n_top`) and a
/// cross-validated fit, both with the subgroup oversampling recipe.
pub fn subgroup_evaluate(
    table: &NumericTable,
    groups: &BTreeMap<String, OutcomeGroup>,
    rank: &RankConfig,
    cv: &CvConfig,
    config: &SubgroupConfig,
) -> Vec<SubgroupResult> {
    config
        .groups
        .iter()
        .map(|&g| {
            let rows: Vec<usize> =
                (0..table.nrows()).filter(|&i| groups.get(&table.keys[i].subject_id).is_some_and(|o| o.code() == g)).collect();
            let sub = table.select_rows(&rows);
            let subjects = sub.keys.iter().map(|k| k.subject_id.as_str()).collect::<BTreeSet<_>>().len();
            let skip = |why: String| SubgroupResult { group: g, subjects, top: Vec::new(), cv: None, skipped: Some(why) };
            let rc = RankConfig { n_top: config.n_top, smote: Some(config.smote.clone()), ..rank.clone() };
            let ranking = match rank_features(&sub, &rc) {
                Ok(r) => r,
                Err(RankError::SingleClass) => return skip("outcome is constant within the group".into()),
                Err(e) => return skip(e.to_string()),
            };
            let cc = CvConfig { smote: Some(config.smote.clone()), ..cv.clone() };
            match cross_validate(&sub, &ranking.top, &cc) {
                Ok(report) => SubgroupResult { group: g, subjects, top: ranking.top, cv: Some(report), skipped: None },
                Err(e) => SubgroupResult { top: ranking.top, ..skip(e.to_string()) },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_from_hand_counts() {
        let c = ConfusionCounts { tp: 3, tn: 5, fp: 1, fn_: 1 };
        let m = MetricsReport::from_counts(Stratum::Pooled, c);
        assert_eq!(m.accuracy, Some(0.8));
        assert_eq!(m.precision, Some(0.75));
        assert_eq!(m.specificity, Some(5.0 / 6.0));
        assert_eq!(m.npv, Some(5.0 / 6.0));
        assert_eq!(m.recall, Some(0.75));
    }

    #[test]
    fn undefined_metrics_are_none() {
        let m = confusion_metrics(&[false; 4], &[false; 4]).unwrap();
        assert_eq!(m.accuracy, Some(1.0));
        assert_eq!(m.precision, None);
        assert_eq!(m.recall, None);
        assert!(m.csv_row().contains("NA"));
        assert!(matches!(confusion_metrics(&[true], &[true, false]), Err(EvalError::LengthMismatch { .. })));
    }

    fn keys(n_subjects: usize, visits: u32) -> Vec<RowKey> {
        (0..n_subjects)
            .flat_map(|s| (1..=visits).map(move |v| RowKey { subject_id: format!("S{s:03}"), visit: v }))
            .collect()
    }

    #[test]
    fn folds_partition_and_stratify() {
        let k = keys(53, 3);
        let y: Vec<bool> = k.iter().map(|r| r.subject_id.as_str() < "S011" && r.visit == 2).collect();
        let f = stratified_subject_folds(&k, &y, 5, 9).unwrap();
        assert_eq!(f.fold_of.len(), 53);
        let positives_per_fold: Vec<usize> = (0..5).map(|i| f.subjects_in(i).iter().filter(|s| f.label_of[**s]).count()).collect();
        assert!(positives_per_fold.iter().all(|&c| c == 2 || c == 3), "{positives_per_fold:?}");
        let sizes: Vec<usize> = (0..5).map(|i| f.subjects_in(i).len()).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn too_few_subjects() {
        let k = keys(10, 1);
        let y: Vec<bool> = (0..10).map(|i| i < 3).collect();
        assert!(matches!(stratified_subject_folds(&k, &y, 5, 0), Err(EvalError::TooFewSubjects { class: true, count: 3, .. })));
    }
}
