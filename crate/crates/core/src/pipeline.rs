//! End-to-end run: preprocess → rank → fit → embed → cluster → analyze →
//! evaluate, writing every artifact plus a hashed manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cluster::{
    assign_clusters, compare_clusters, gmm_fit_em, per_feature_kld, select_k, trajectory_distances, ClusterAssignment, GmmConfig,
    GmmModel,
};
use crate::cohort::{summarize_by_outcome, Cohort, OutcomeGroup, Schema};
use crate::eval::{
    cross_validate, evaluate_by_stratum, subgroup_evaluate, CvConfig, CvReport, ModelChoice, StratumKind, SubgroupConfig,
};
use crate::lgmm::{lgmm_fit, lr_fit_per_visit, wald_csv, wald_table, LgmmConfig, LgmmDesign, LgmmFit};
use crate::preprocess::{
    augment_quadratic, encode_categoricals, impute_knn, mahalanobis_outliers, smote_oversample, DistanceScope, SmoteConfig,
    DEFAULT_IMPUTE_K, DEFAULT_OUTLIER_ALPHA,
};
use crate::rank::{rank_features, ForestConfig, ImportanceTable, RankConfig, DEFAULT_TOP};
use crate::rng::mix;
use crate::svg;
use crate::synth::{generate_cohort, SynthConfig};
use crate::table::NumericTable;
use crate::tsne::{standardize_columns, tsne_embed, Embedding, TsneConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Preprocess,
    Rank,
    Fit,
    Embed,
    Cluster,
    Analyze,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 7] = [Stage::Preprocess, Stage::Rank, Stage::Fit, Stage::Embed, Stage::Cluster, Stage::Analyze, Stage::Evaluate];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Preprocess => "preprocess",
            Stage::Rank => "rank",
            Stage::Fit => "fit",
            Stage::Embed => "embed",
            Stage::Cluster => "cluster",
            Stage::Analyze => "analyze",
            Stage::Evaluate => "evaluate",
        }
    }

    fn deps(self) -> &'static [Stage] {
        match self {
            Stage::Preprocess => &[],
            Stage::Rank => &[Stage::Preprocess],
            Stage::Fit | Stage::Embed | Stage::Evaluate => &[Stage::Rank],
            Stage::Cluster => &[Stage::Embed],
            Stage::Analyze => &[Stage::Cluster],
        }
    }

    /// The stage together with everything it needs, in execution order.
    pub fn closure(targets: &[Stage]) -> Vec<Stage> {
        fn add(s: Stage, set: &mut BTreeSet<Stage>) {
            if set.insert(s) {
                s.deps().iter().for_each(|d| add(*d, set));
            }
        }
        let mut set = BTreeSet::new();
        targets.iter().for_each(|t| add(*t, &mut set));
        set.into_iter().collect()
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("stage {stage} failed: {cause}")]
    StageFailed { stage: Stage, cause: String },
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputPaths {
    pub cohort_csv: PathBuf,
    pub schema_json: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSettings {
    pub impute_k: usize,
    pub outlier_alpha: f64,
    /// Remove flagged rows instead of only reporting them.
    pub drop_outliers: bool,
    /// Oversampling used inside ranking and cross-validation training splits.
    pub smote: SmoteConfig,
    /// Continuous features that get an extra `name^2` column.
    pub quadratic: Vec<String>,
}

impl Default for PreprocessSettings {
    fn default() -> Self {
        PreprocessSettings {
            impute_k: DEFAULT_IMPUTE_K,
            outlier_alpha: DEFAULT_OUTLIER_ALPHA,
            drop_outliers: false,
            smote: SmoteConfig::default(),
            quadratic: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankSettings {
    pub n_top: usize,
    pub folds: usize,
    pub forest: ForestConfig,
}

impl Default for RankSettings {
    fn default() -> Self {
        RankSettings { n_top: DEFAULT_TOP, folds: 5, forest: ForestConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSettings {
    /// `None` fits both the mixed model and the per-visit regressions.
    pub model: Option<ModelChoice>,
    /// Restricts the per-visit regressions to one visit.
    pub visit: Option<u32>,
    /// Overrides the ranked feature list.
    pub features: Option<Vec<String>>,
    pub visit_covariate: bool,
    pub lgmm: LgmmConfig,
}

impl Default for FitSettings {
    fn default() -> Self {
        FitSettings { model: None, visit: None, features: None, visit_covariate: true, lgmm: LgmmConfig::default() }
    }
}

/// Number of mixture components: chosen by BIC or fixed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "KRaw", into = "KRaw")]
pub enum KChoice {
    Auto,
    Fixed(usize),
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum KRaw {
    Number(usize),
    Text(String),
}

impl TryFrom<KRaw> for KChoice {
    type Error = String;
    fn try_from(raw: KRaw) -> std::result::Result<Self, String> {
        match raw {
            KRaw::Number(n) => Ok(KChoice::Fixed(n)),
            KRaw::Text(s) => s.parse(),
        }
    }
}

impl From<KChoice> for KRaw {
    fn from(k: KChoice) -> Self {
        match k {
            KChoice::Auto => KRaw::Text("auto".into()),
            KChoice::Fixed(n) => KRaw::Number(n),
        }
    }
}

impl std::str::FromStr for KChoice {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "auto" {
            return Ok(KChoice::Auto);
        }
        s.parse().map(KChoice::Fixed).map_err(|_| format!("expected `auto` or a component count, got `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSettings {
    pub k: KChoice,
    /// Inclusive range scanned for the BIC table.
    pub k_range: [usize; 2],
    pub gmm: GmmConfig,
}

impl Default for ClusterSettings {
    fn default() -> Self {
        ClusterSettings { k: KChoice::Fixed(2), k_range: [1, 6], gmm: GmmConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub folds: usize,
    pub threshold: f64,
    /// Per-group models; `None` skips them.
    pub subgroup: Option<SubgroupConfig>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { folds: 5, threshold: 0.5, subgroup: Some(SubgroupConfig::default()) }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Cohort on disk; when absent a synthetic cohort is generated.
    pub input: Option<InputPaths>,
    /// Generator settings; defaults to the 360-subject three-visit layout.
    pub synth: Option<SynthConfig>,
    pub preprocess: PreprocessSettings,
    pub rank: RankSettings,
    pub fit: FitSettings,
    pub tsne: TsneConfig,
    pub cluster: ClusterSettings,
    pub eval: EvalSettings,
    pub output_dir: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: PipelineConfig = serde_json::from_str(text).map_err(|e| PipelineError::Validation(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PipelineError::Validation(m.to_string()));
        if self.input.is_some() && self.synth.is_some() {
            return bad("give either `input` or `synth`, not both");
        }
        if let Some(s) = &self.synth {
            s.validate().map_err(|e| PipelineError::Validation(e.to_string()))?;
        }
        let p = &self.preprocess;
        if p.impute_k == 0 {
            return bad("impute_k must be at least 1");
        }
        if !(p.outlier_alpha > 0.0 && p.outlier_alpha < 1.0) {
            return bad("outlier_alpha must lie in (0, 1)");
        }
        if p.smote.percent == 0 || p.smote.percent % 100 != 0 || p.smote.k == 0 {
            return bad("smote percent must be a positive multiple of 100 and k positive");
        }
        if self.rank.n_top == 0 || self.rank.folds < 2 || self.rank.forest.n_trees == 0 {
            return bad("rank needs n_top ≥ 1, folds ≥ 2 and at least one tree");
        }
        if self.fit.lgmm.quad_points == 0 {
            return bad("quad_points must be at least 1");
        }
        if let Some(v) = self.fit.visit {
            if v == 0 {
                return bad("visits are numbered from 1");
            }
        }
        let [lo, hi] = self.cluster.k_range;
        if lo == 0 || lo > hi {
            return bad("k_range must satisfy 1 ≤ lo ≤ hi");
        }
        if self.cluster.k == KChoice::Fixed(0) {
            return bad("k must be at least 1");
        }
        if self.eval.folds < 2 || !(self.eval.threshold > 0.0 && self.eval.threshold < 1.0) {
            return bad("eval needs folds ≥ 2 and a threshold in (0, 1)");
        }
        if self.tsne.perplexity <= 0.0 || self.tsne.learning_rate <= 0.0 || self.tsne.total_iters < self.tsne.exaggeration_iters {
            return bad("t-SNE needs positive perplexity and learning rate, and total_iters ≥ exaggeration_iters");
        }
        Ok(())
    }

    /// Hash of the configuration with the output directory blanked.
    pub fn fingerprint(&self) -> String {
        let canonical = PipelineConfig { output_dir: None, ..self.clone() };
        sha256_hex(serde_json::to_string(&canonical).expect("config serializes").as_bytes())
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub outputs: Vec<FileHash>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: Stage,
    pub cause: String,
}

/// Everything that must be reproducible for a given config and seed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestPayload {
    pub seed: u64,
    pub config_sha256: String,
    pub inputs: Vec<FileHash>,
    pub stages: Vec<StageRecord>,
    pub failure: Option<StageFailure>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub payload: ManifestPayload,
    pub payload_sha256: String,
    /// Wall-clock time per stage; excluded from the payload.
    pub durations_ms: BTreeMap<String, u64>,
}

impl Manifest {
    pub fn payload_json(&self) -> String {
        serde_json::to_string(&self.payload).expect("payload serializes")
    }

    pub fn outputs(&self, stage: Stage) -> Option<&[FileHash]> {
        self.payload.stages.iter().find(|s| s.stage == stage).map(|s| s.outputs.as_slice())
    }
}

struct Writer<'a> {
    dir: &'a Path,
    files: Vec<FileHash>,
}

impl Writer<'_> {
    fn bytes(&mut self, name: &str, data: &[u8]) -> Result<(), String> {
        let path = self.dir.join(name);
        std::fs::write(&path, data).map_err(|e| format!("writing {}: {e}", path.display()))?;
        self.files.push(FileHash { path: name.to_string(), sha256: sha256_hex(data), bytes: data.len() as u64 });
        Ok(())
    }

    fn text(&mut self, name: &str, data: &str) -> Result<(), String> {
        self.bytes(name, data.as_bytes())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), String> {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| e.to_string())?;
        s.push('\n');
        self.text(name, &s)
    }
}

#[derive(Default)]
struct State {
    cohort: Option<Cohort>,
    groups: BTreeMap<String, OutcomeGroup>,
    table: Option<NumericTable>,
    ranking: Option<ImportanceTable>,
    features: Vec<String>,
    embedding: Option<Embedding>,
    assignment: Option<ClusterAssignment>,
    model: Option<GmmModel>,
    inputs: Vec<FileHash>,
}

impl State {
    fn table(&self) -> &NumericTable {
        self.table.as_ref().expect("preprocess runs first")
    }
}

/// Stage seeds derived from the run seed.
fn stage_seed(seed: u64, stage: Stage) -> u64 {
    mix(seed, 0x5747_0000 + stage as u64)
}

fn stage_preprocess(config: &PipelineConfig, st: &mut State, out: &mut Writer) -> Result<(), String> {
    let cohort = match &config.input {
        Some(paths) => {
            let mut inputs = Vec::new();
            let mut read = |p: &Path| -> Result<Vec<u8>, String> {
                let bytes = std::fs::read(p).map_err(|e| format!("reading {}: {e}", p.display()))?;
                inputs.push(FileHash { path: p.display().to_string(), sha256: sha256_hex(&bytes), bytes: bytes.len() as u64 });
                Ok(bytes)
            };
            let schema_bytes = read(&paths.schema_json)?;
            let csv_bytes = read(&paths.cohort_csv)?;
            st.inputs = inputs;
            let schema = Schema::from_json(&String::from_utf8_lossy(&schema_bytes)).map_err(|e| e.to_string())?;
            Cohort::from_csv(csv_bytes.as_slice(), &schema).map_err(|e| e.to_string())?
        }
        None => {
            let mut synth = config.synth.clone().unwrap_or_else(|| SynthConfig::table1_default(config.seed));
            synth.seed = config.seed;
            let (cohort, truth) = generate_cohort(&synth).map_err(|e| e.to_string())?;
            let mut csv = Vec::new();
            cohort.write_csv(&mut csv).map_err(|e| e.to_string())?;
            out.bytes("cohort.csv", &csv)?;
            out.text("schema.json", &(cohort.schema().to_json() + "\n"))?;
            out.json("ground_truth.json", &truth)?;
            cohort
        }
    };
    out.text("descriptive.csv", &summarize_by_outcome(&cohort).to_csv_string())?;
    st.groups = cohort.outcome_groups();

    let p = &config.preprocess;
    let (encoded, codebook) = encode_categoricals(&cohort).map_err(|e| e.to_string())?;
    let imputed = impute_knn(&encoded, p.impute_k, &DistanceScope::AllColumns).map_err(|e| e.to_string())?;
    let mut table = imputed.table;

    let continuous: Vec<usize> = (0..table.ncols()).filter(|&j| !table.kinds[j].is_discrete()).collect();
    let outliers = if continuous.is_empty() {
        None
    } else {
        Some(mahalanobis_outliers(&table.data.select_columns(&continuous), p.outlier_alpha).map_err(|e| e.to_string())?)
    };
    let mut dropped = Vec::new();
    if let Some(report) = &outliers {
        let mut csv = String::from("subject_id,visit,distance,flagged\n");
        for (i, k) in table.keys.iter().enumerate() {
            csv.push_str(&format!("{},{},{:.6},{}\n", k.subject_id, k.visit, report.distances[i], report.flags[i] as u8));
        }
        out.text("outliers.csv", &csv)?;
        if p.drop_outliers {
            dropped = (0..table.nrows()).filter(|&i| report.flags[i]).collect();
            let keep: Vec<usize> = (0..table.nrows()).filter(|&i| !report.flags[i]).collect();
            table = table.select_rows(&keep);
        }
    }
    if !p.quadratic.is_empty() {
        table = augment_quadratic(&table, &p.quadratic).map_err(|e| e.to_string())?;
    }
    let mut csv = Vec::new();
    table.write_csv(&mut csv).map_err(|e| e.to_string())?;
    out.bytes("preprocessed.csv", &csv)?;

    // preview of the oversampling applied later to each training split
    let discrete: Vec<bool> = table.kinds.iter().map(|k| k.is_discrete()).collect();
    let smote = smote_oversample(&table.data, &table.outcome, &discrete, &p.smote, stage_seed(config.seed, Stage::Preprocess))
        .map_err(|e| e.to_string())?;
    let count = |labels: &[bool], v: bool| labels.iter().filter(|&&l| l == v).count();

    #[derive(Serialize)]
    struct Summary<'a> {
        rows: usize,
        columns: &'a [String],
        codebook: &'a crate::preprocess::Codebook,
        imputed_cells: usize,
        imputation_fallbacks: &'a [(usize, usize)],
        outlier_alpha: f64,
        outlier_threshold: Option<f64>,
        outlier_ridge: Option<f64>,
        outliers_flagged: usize,
        outliers_dropped: usize,
        smote: &'a SmoteConfig,
        smote_positive: [usize; 2],
        smote_negative: [usize; 2],
    }
    let summary = Summary {
        rows: table.nrows(),
        columns: &table.names,
        codebook: &codebook,
        imputed_cells: encoded.missing.iter().filter(|&&m| m).count(),
        imputation_fallbacks: &imputed.fallbacks,
        outlier_alpha: p.outlier_alpha,
        outlier_threshold: outliers.as_ref().map(|o| o.threshold),
        outlier_ridge: outliers.as_ref().map(|o| o.ridge),
        outliers_flagged: outliers.as_ref().map_or(0, |o| o.flags.iter().filter(|&&f| f).count()),
        outliers_dropped: dropped.len(),
        smote: &p.smote,
        smote_positive: [count(&table.outcome, true), count(&smote.labels, true)],
        smote_negative: [count(&table.outcome, false), count(&smote.labels, false)],
    };
    out.json("preprocess.json", &summary)?;
    st.cohort = Some(cohort);
    st.table = Some(table);
    Ok(())
}

fn stage_rank(config: &PipelineConfig, st: &mut State, out: &mut Writer) -> Result<(), String> {
    let seed = stage_seed(config.seed, Stage::Rank);
    let rc = RankConfig {
        forest: ForestConfig { seed, ..config.rank.forest.clone() },
        n_top: config.rank.n_top,
        folds: config.rank.folds,
        smote: Some(config.preprocess.smote.clone()),
        seed,
    };
    let ranking = rank_features(st.table(), &rc).map_err(|e| e.to_string())?;
    out.text("importance.csv", &ranking.to_csv_string())?;
    out.json("top_features.json", &ranking.top)?;
    let shown: Vec<_> = ranking.rows.iter().take(ranking.top.len()).collect();
    out.text(
        "importance.svg",
        &svg::bars(
            "Mean decrease in Gini impurity",
            &shown.iter().map(|r| r.name.clone()).collect::<Vec<_>>(),
            &shown.iter().map(|r| r.mean).collect::<Vec<_>>(),
        ),
    )?;
    st.features = config.fit.features.clone().unwrap_or_else(|| ranking.top.clone());
    st.ranking = Some(ranking);
    Ok(())
}

fn stage_fit(config: &PipelineConfig, st: &mut State, out: &mut Writer) -> Result<(), String> {
    let table = st.table();
    let f = &config.fit;
    if f.model != Some(ModelChoice::Lr) {
        let design = LgmmDesign::from_table(table, &st.features, f.visit_covariate).map_err(|e| e.to_string())?;
        let fit = lgmm_fit(&design, &f.lgmm).map_err(|e| e.to_string())?;
        out.json("lgmm_fit.json", &fit)?;
        out.text("wald_lgmm.csv", &wald_csv(&wald_table(&fit)))?;
    }
    if f.model != Some(ModelChoice::Lgmm) {
        let visits: BTreeSet<u32> = table.keys.iter().map(|k| k.visit).collect();
        let mut fits: BTreeMap<u32, LgmmFit> = BTreeMap::new();
        for v in visits.into_iter().filter(|v| f.visit.is_none_or(|w| w == *v)) {
            let fit = lr_fit_per_visit(table, &st.features, v, &f.lgmm).map_err(|e| format!("visit {v}: {e}"))?;
            out.text(&format!("wald_lr_visit{v}.csv"), &wald_csv(&wald_table(&fit)))?;
            fits.insert(v, fit);
        }
        if fits.is_empty() {
            return Err(format!("no rows for visit {}", f.visit.unwrap_or(0)));
        }
        out.json("lr_fits.json", &fits)?;
    }
    Ok(())
}

fn stage_embed(config: &PipelineConfig, st: &mut State, out: &mut Writer) -> Result<(), String> {
    let table = st.table();
    let cols = st
        .features
        .iter()
        .map(|f| table.column_index(f).ok_or_else(|| format!("unknown feature {f}")))
        .collect::<Result<Vec<_>, _>>()?;
    let x = standardize_columns(&table.data.select_columns(&cols));
    let tc = TsneConfig { seed: stage_seed(config.seed, Stage::Embed), ..config.tsne.clone() };
    let emb = tsne_embed(&x, &tc).map_err(|e| e.to_string())?;
    let mut csv = String::from("subject_id,visit,y1,y2\n");
    for (k, c) in table.keys.iter().zip(&emb.coords) {
        csv.push_str(&format!("{},{},{:.9},{:.9}\n", k.subject_id, k.visit, c[0], c[1]));
    }
    out.text("embedding.csv", &csv)?;
    let mut trace = String::from("iteration,cost\n");
    for (i, c) in emb.cost_trace.iter().enumerate() {
        trace.push_str(&format!("{i},{c:.9}\n"));
    }
    out.text("cost_trace.csv", &trace)?;
    out.json("embedding.json", &serde_json::json!({
        "features": st.features,
        "cost_trace": emb.cost_trace,
        "config": emb.config,
        "degenerate_rows": emb.degenerate_rows,
    }))?;
    // colour by outcome group, with subjects lacking a full outcome triple last
    let labels: Vec<usize> =
        table.keys.iter().map(|k| st.groups.get(&k.subject_id).map_or(8, |g| g.code() as usize)).collect();
    let names: Vec<String> = (0..8).map(|g| format!("Group {g}")).chain(["incomplete".to_string()]).collect();
    out.text("embedding.svg", &svg::scatter("t-SNE embedding by outcome group", &emb.coords, &labels, &names))?;
    st.embedding = Some(emb);
    Ok(())
}

fn stage_cluster(config: &PipelineConfig, st: &mut State, out: &mut Writer) -> Result<(), String> {
    let emb = st.embedding.as_ref().expect("embed runs first");
    let c = &config.cluster;
    let gc = GmmConfig { seed: stage_seed(config.seed, Stage::Cluster), ..c.gmm.clone() };
    let (best_k, models) = select_k(&emb.coords, c.k_range[0]..=c.k_range[1], &gc).map_err(|e| e.to_string())?;
    let mut csv = String::from("k,loglik,bic,converged\n");
    for m in &models {
        csv.push_str(&format!("{},{:.6},{:.6},{}\n", m.k, m.loglik, m.bic, m.converged));
    }
    out.text("bic.csv", &csv)?;
    let k = match c.k {
        KChoice::Auto => best_k,
        KChoice::Fixed(k) => k,
    };
    let model = match models.iter().find(|m| m.k == k) {
        Some(m) => m.clone(),
        None => gmm_fit_em(&emb.coords, k, &gc).map_err(|e| e.to_string())?,
    };
    let assignment = assign_clusters(&model, &emb.coords);
    out.json("gmm.json", &serde_json::json!({ "k_choice": c.k, "bic_best_k": best_k, "model": model }))?;
    out.text("assignment.csv", &assignment.to_csv_string(&st.table().keys))?;
    let names: Vec<String> = (1..=k).map(|j| format!("Cluster {j}")).collect();
    out.text("clusters.svg", &svg::scatter("Gaussian-mixture clusters", &emb.coords, &assignment.labels, &names))?;
    st.assignment = Some(assignment);
    st.model = Some(model);
    Ok(())
}

fn stage_analyze(_config: &PipelineConfig, st: &mut State, out: &mut Writer) -> Result<(), String> {
    let table = st.table();
    let emb = st.embedding.as_ref().expect("embed runs first");
    let labels = &st.assignment.as_ref().expect("cluster runs first").labels;
    let traj = trajectory_distances(&emb.coords, &table.keys, labels, &st.groups).map_err(|e| e.to_string())?;
    out.json("trajectory.json", &traj)?;
    out.text("trajectory.txt", &traj.describe())?;
    let pooled: Vec<_> = traj.rows.iter().filter(|r| r.cluster.is_none()).collect();
    let group_names: Vec<Option<u8>> = pooled.iter().map(|r| r.group).collect::<BTreeSet<_>>().into_iter().collect();
    let pairs: BTreeSet<u32> = pooled.iter().map(|r| r.from_visit).collect();
    let series: Vec<(String, Vec<f64>)> = pairs
        .iter()
        .map(|&v| {
            let values = group_names
                .iter()
                .map(|g| pooled.iter().find(|r| r.group == *g && r.from_visit == v).map_or(f64::NAN, |r| r.mean_distance))
                .collect();
            (format!("visit {v} → {}", v + 1), values)
        })
        .collect();
    let cats: Vec<String> = group_names.iter().map(|g| g.map_or_else(|| "incomplete".into(), |g| format!("Group {g}"))).collect();
    out.text("trajectories.svg", &svg::grouped_bars("Mean displacement between visits", &cats, &series))?;

    let k = st.model.as_ref().map_or(0, |m| m.k);
    if k < 2 {
        out.json("analyze.json", &serde_json::json!({ "skipped": "a single cluster has nothing to compare" }))?;
        return Ok(());
    }
    let kld = per_feature_kld(table, labels, 0, 1).map_err(|e| e.to_string())?;
    out.text("kld.csv", &kld.to_csv_string())?;
    out.text(
        "kld.svg",
        &svg::bars(
            "KL divergence, Cluster 1 → Cluster 2",
            &kld.rows.iter().map(|r| r.feature.clone()).collect::<Vec<_>>(),
            &kld.rows.iter().map(|r| r.divergence).collect::<Vec<_>>(),
        ),
    )?;
    let cmp = compare_clusters(table, labels, 0, 1).map_err(|e| e.to_string())?;
    out.text("comparison.csv", &cmp.to_csv_string())?;
    Ok(())
}

fn stage_evaluate(config: &PipelineConfig, st: &mut State, out: &mut Writer) -> Result<(), String> {
    let table = st.table();
    let e = &config.eval;
    let base = CvConfig {
        folds: e.folds,
        seed: stage_seed(config.seed, Stage::Evaluate),
        smote: Some(config.preprocess.smote.clone()),
        model: ModelChoice::Lgmm,
        lgmm: config.fit.lgmm.clone(),
        visit_covariate: config.fit.visit_covariate,
        threshold: e.threshold,
    };
    let n_visits = st.cohort.as_ref().map_or(3, |c| c.n_visits());
    let mut reports: Vec<CvReport> = Vec::new();
    for model in [ModelChoice::Lgmm, ModelChoice::Lr] {
        let cv = cross_validate(table, &st.features, &CvConfig { model, ..base.clone() }).map_err(|e| format!("{model}: {e}"))?;
        out.text(&format!("cv_{model}.csv"), &cv.metrics_csv())?;
        out.text(&format!("predictions_{model}.csv"), &cv.predictions_csv())?;
        for (kind, name) in [(StratumKind::Visit, "visit"), (StratumKind::Group, "group")] {
            let s = evaluate_by_stratum(&cv.predictions, &st.groups, kind, n_visits);
            out.text(&format!("metrics_by_{name}_{model}.csv"), &s.to_csv_string())?;
        }
        out.json(&format!("folds_{model}.json"), &cv.fold_records)?;
        reports.push(cv);
    }
    let metric = |m: &crate::eval::MetricsReport| [m.accuracy, m.precision, m.specificity, m.npv, m.recall];
    let names = ["accuracy", "precision", "specificity", "npv", "recall"];
    let mut csv = String::from("metric,lgmm,lr\n");
    let (a, b) = (metric(&reports[0].pooled), metric(&reports[1].pooled));
    let na = |v: Option<f64>| v.map_or_else(|| "NA".into(), |v| format!("{v:.6}"));
    for i in 0..5 {
        csv.push_str(&format!("{},{},{}\n", names[i], na(a[i]), na(b[i])));
    }
    out.text("model_comparison.csv", &csv)?;
    let nan = |v: Option<f64>| v.unwrap_or(f64::NAN);
    out.text(
        "metrics.svg",
        &svg::grouped_bars(
            "Pooled out-of-fold metrics",
            &names.map(String::from),
            &[("LGMM".into(), a.iter().map(|v| nan(*v)).collect()), ("LR".into(), b.iter().map(|v| nan(*v)).collect())],
        ),
    )?;

    if let Some(sub) = &e.subgroup {
        let rc = RankConfig {
            forest: ForestConfig { seed: base.seed, ..config.rank.forest.clone() },
            n_top: sub.n_top,
            folds: config.rank.folds,
            smote: Some(sub.smote.clone()),
            seed: base.seed,
        };
        let results = subgroup_evaluate(table, &st.groups, &rc, &base, sub);
        let mut csv = format!("group,{}\n", crate::eval::MetricsReport::csv_header());
        for r in &results {
            if let Some(cv) = &r.cv {
                csv.push_str(&format!("{},{}\n", r.group, cv.pooled.csv_row()));
            }
        }
        out.text("subgroup_metrics.csv", &csv)?;
        let summary: Vec<_> = results
            .iter()
            .map(|r| {
                serde_json::json!({
                    "group": r.group,
                    "subjects": r.subjects,
                    "top": r.top,
                    "pooled": r.cv.as_ref().map(|c| &c.pooled),
                    "skipped": r.skipped,
                })
            })
            .collect();
        out.json("subgroups.json", &summary)?;
    }
    out.json(
        "report.json",
        &serde_json::json!({
            "features": st.features,
            "lgmm": reports[0].pooled,
            "lr": reports[1].pooled,
        }),
    )?;
    Ok(())
}

/// Runs `targets` and their prerequisites, writing artifacts and
/// `manifest.json` into `out_dir`. On failure the partial outputs and a
/// manifest naming the failed stage are kept.
pub fn run_stages(config: &PipelineConfig, targets: &[Stage], out_dir: &Path) -> Result<Manifest> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| PipelineError::Validation(format!("cannot create {}: {e}", out_dir.display())))?;
    let mut st = State::default();
    let mut stages = Vec::new();
    let mut durations = BTreeMap::new();
    let mut failure = None;
    for stage in Stage::closure(targets) {
        let started = Instant::now();
        let mut out = Writer { dir: out_dir, files: Vec::new() };
        let result = match stage {
            Stage::Preprocess => stage_preprocess(config, &mut st, &mut out),
            Stage::Rank => stage_rank(config, &mut st, &mut out),
            Stage::Fit => stage_fit(config, &mut st, &mut out),
            Stage::Embed => stage_embed(config, &mut st, &mut out),
            Stage::Cluster => stage_cluster(config, &mut st, &mut out),
            Stage::Analyze => stage_analyze(config, &mut st, &mut out),
            Stage::Evaluate => stage_evaluate(config, &mut st, &mut out),
        };
        durations.insert(stage.name().to_string(), started.elapsed().as_millis() as u64);
        stages.push(StageRecord { stage, outputs: out.files });
        if let Err(cause) = result {
            failure = Some(StageFailure { stage, cause });
            break;
        }
    }
    let payload = ManifestPayload { seed: config.seed, config_sha256: config.fingerprint(), inputs: st.inputs, stages, failure };
    let payload_sha256 = sha256_hex(serde_json::to_string(&payload).expect("payload serializes").as_bytes());
    let manifest = Manifest { payload, payload_sha256, durations_ms: durations };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    std::fs::write(out_dir.join("manifest.json"), text).map_err(|e| PipelineError::StageFailed {
        stage: *targets.last().unwrap_or(&Stage::Preprocess),
        cause: format!("writing manifest: {e}"),
    })?;
    match &manifest.payload.failure {
        Some(f) => Err(PipelineError::StageFailed { stage: f.stage, cause: f.cause.clone() }),
        None => Ok(manifest),
    }
}

pub fn run_pipeline(config: &PipelineConfig, out_dir: &Path) -> Result<Manifest> {
    run_stages(config, &Stage::ALL, out_dir)
}
