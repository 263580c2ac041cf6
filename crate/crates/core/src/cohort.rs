//! Longitudinal cohort data model.
//!
//! A [`Cohort`] is a long table: one [`Observation`] per `(subject, visit)`
//! with a value slot per [`FeatureSpec`] and a binary outcome. Missing cells
//! are `None`, never a sentinel number, so categorical columns can be missing
//! just like continuous ones.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("duplicate feature name `{0}`")]
    DuplicateFeature(String),
    #[error("feature `{name}`: {reason}")]
    InvalidSpec { name: String, reason: String },
    #[error("subject `{subject}` has more than one row for visit {visit}")]
    DuplicateObservation { subject: String, visit: u32 },
    #[error("subject `{subject}`: visit {visit} outside 1..={n_visits}")]
    VisitOutOfRange { subject: String, visit: u32, n_visits: u32 },
    #[error("row for subject `{subject}` has {got} values, expected {expected}")]
    ValueLength { subject: String, got: usize, expected: usize },
    #[error("subject `{subject}`, feature `{feature}`: {reason}")]
    InvalidValue { subject: String, feature: String, reason: String },
    #[error("subject `{0}` is missing one of visits 1..3")]
    MissingVisit(String),
    #[error("outcome group coding needs exactly 3 visit outcomes, got {0}")]
    WrongVisitCount(usize),
    #[error("schema: {0}")]
    Schema(String),
    #[error("csv line {line}: {reason}")]
    Csv { line: u64, reason: String },
    #[error("n_visits must be at least 1")]
    NoVisits,
}

pub type Result<T, E = CohortError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Continuous,
    Categorical,
    Binary,
}

impl FeatureKind {
    pub fn is_discrete(self) -> bool {
        !matches!(self, FeatureKind::Continuous)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub levels: Vec<String>,
}

impl FeatureSpec {
    pub fn continuous(name: impl Into<String>) -> Self {
        Self { name: name.into(), kind: FeatureKind::Continuous, unit: None, levels: Vec::new() }
    }

    pub fn binary(name: impl Into<String>) -> Self {
        Self { name: name.into(), kind: FeatureKind::Binary, unit: None, levels: Vec::new() }
    }

    pub fn categorical<S: Into<String>>(name: impl Into<String>, levels: impl IntoIterator<Item = S>) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Categorical,
            unit: None,
            levels: levels.into_iter().map(Into::into).collect(),
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |reason: &str| CohortError::InvalidSpec { name: self.name.clone(), reason: reason.into() };
        if self.name.is_empty() {
            return Err(bad("empty name"));
        }
        if matches!(self.name.as_str(), "subject_id" | "visit" | "outcome") {
            return Err(bad("name collides with a reserved column"));
        }
        match self.kind {
            FeatureKind::Categorical => {
                if self.levels.is_empty() {
                    return Err(bad("categorical features need at least one level"));
                }
                let unique: BTreeSet<_> = self.levels.iter().collect();
                if unique.len() != self.levels.len() {
                    return Err(bad("duplicate level labels"));
                }
            }
            FeatureKind::Continuous | FeatureKind::Binary => {
                if !self.levels.is_empty() {
                    return Err(bad("only categorical features list levels"));
                }
            }
        }
        Ok(())
    }
}

/// JSON sidecar describing the feature columns of a cohort CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    #[serde(default = "default_visits")]
    pub n_visits: u32,
    pub features: Vec<FeatureSpec>,
}

fn default_visits() -> u32 {
    3
}

impl Schema {
    pub fn from_json(text: &str) -> Result<Self> {
        let schema: Schema = serde_json::from_str(text).map_err(|e| CohortError::Schema(e.to_string()))?;
        validate_specs(&schema.features)?;
        if schema.n_visits == 0 {
            return Err(CohortError::NoVisits);
        }
        Ok(schema)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }
}

fn validate_specs(specs: &[FeatureSpec]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for spec in specs {
        spec.validate()?;
        if !seen.insert(spec.name.as_str()) {
            return Err(CohortError::DuplicateFeature(spec.name.clone()));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Number(f64),
    Label(String),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Number(x) => write!(f, "{x}"),
            Value::Label(s) => f.write_str(s),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub subject_id: String,
    pub visit: u32,
    /// One slot per feature spec; `None` marks a missing cell.
    pub values: Vec<Option<Value>>,
    pub outcome: bool,
}

impl Observation {
    pub fn missing_mask(&self) -> Vec<bool> {
        self.values.iter().map(Option::is_none).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    specs: Vec<FeatureSpec>,
    rows: Vec<Observation>,
    n_visits: u32,
}

impl Cohort {
    pub fn new(specs: Vec<FeatureSpec>, n_visits: u32, rows: Vec<Observation>) -> Result<Self> {
        if n_visits == 0 {
            return Err(CohortError::NoVisits);
        }
        validate_specs(&specs)?;
        let mut keys = BTreeSet::new();
        for row in &rows {
            if row.visit == 0 || row.visit > n_visits {
                return Err(CohortError::VisitOutOfRange {
                    subject: row.subject_id.clone(),
                    visit: row.visit,
                    n_visits,
                });
            }
            if !keys.insert((row.subject_id.as_str(), row.visit)) {
                return Err(CohortError::DuplicateObservation { subject: row.subject_id.clone(), visit: row.visit });
            }
            if row.values.len() != specs.len() {
                return Err(CohortError::ValueLength {
                    subject: row.subject_id.clone(),
                    got: row.values.len(),
                    expected: specs.len(),
                });
            }
            for (spec, value) in specs.iter().zip(&row.values) {
                if let Some(value) = value {
                    check_value(spec, value).map_err(|reason| CohortError::InvalidValue {
                        subject: row.subject_id.clone(),
                        feature: spec.name.clone(),
                        reason,
                    })?;
                }
            }
        }
        Ok(Self { specs, rows, n_visits })
    }

    pub fn specs(&self) -> &[FeatureSpec] {
        &self.specs
    }

    pub fn rows(&self) -> &[Observation] {
        &self.rows
    }

    pub fn n_visits(&self) -> u32 {
        self.n_visits
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn schema(&self) -> Schema {
        Schema { n_visits: self.n_visits, features: self.specs.clone() }
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    /// Distinct subject ids in first-appearance order.
    pub fn subjects(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.rows
            .iter()
            .filter(|r| seen.insert(r.subject_id.as_str()))
            .map(|r| r.subject_id.clone())
            .collect()
    }

    /// Outcome group of every subject observed at visits 1, 2 and 3.
    /// Subjects missing any of those visits are left out.
    pub fn outcome_groups(&self) -> BTreeMap<String, OutcomeGroup> {
        let mut by_subject: HashMap<&str, [Option<bool>; 3]> = HashMap::new();
        for row in &self.rows {
            let slot = by_subject.entry(row.subject_id.as_str()).or_insert([None; 3]);
            if (1..=3).contains(&row.visit) {
                slot[row.visit as usize - 1] = Some(row.outcome);
            }
        }
        by_subject
            .into_iter()
            .filter_map(|(id, outcomes)| assign_outcome_group(&outcomes).ok().map(|g| (id.to_string(), g)))
            .collect()
    }

    pub fn from_csv<R: Read>(reader: R, schema: &Schema) -> Result<Self> {
        read_cohort_csv(reader, schema)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        let csv_err = |e: csv::Error| CohortError::Csv { line: 0, reason: e.to_string() };
        let mut header = vec!["subject_id".to_string(), "visit".to_string()];
        header.extend(self.specs.iter().map(|s| s.name.clone()));
        header.push("outcome".into());
        out.write_record(&header).map_err(csv_err)?;
        for row in &self.rows {
            let mut record = vec![row.subject_id.clone(), row.visit.to_string()];
            record.extend(row.values.iter().map(|v| v.as_ref().map(Value::to_string).unwrap_or_default()));
            record.push(if row.outcome { "1" } else { "0" }.into());
            out.write_record(&record).map_err(csv_err)?;
        }
        out.flush().map_err(|e| CohortError::Csv { line: 0, reason: e.to_string() })
    }
}

fn check_value(spec: &FeatureSpec, value: &Value) -> Result<(), String> {
    match (spec.kind, value) {
        (FeatureKind::Continuous, Value::Number(x)) if x.is_finite() => Ok(()),
        (FeatureKind::Continuous, Value::Number(_)) => Err("non-finite number".into()),
        (FeatureKind::Binary, Value::Number(x)) if *x == 0.0 || *x == 1.0 => Ok(()),
        (FeatureKind::Binary, _) => Err("binary features take 0 or 1".into()),
        (FeatureKind::Categorical, Value::Label(_)) => Ok(()),
        (FeatureKind::Categorical, Value::Number(_)) => Err("categorical features take labels".into()),
        (FeatureKind::Continuous, Value::Label(s)) => Err(format!("`{s}` is not a number")),
    }
}

fn parse_cell(spec: &FeatureSpec, raw: &str) -> Result<Option<Value>, String> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Ok(None);
    }
    let value = match spec.kind {
        FeatureKind::Categorical => Value::Label(raw.to_string()),
        FeatureKind::Continuous | FeatureKind::Binary => {
            Value::Number(raw.parse::<f64>().map_err(|_| format!("`{raw}` is not a number"))?)
        }
    };
    check_value(spec, &value)?;
    Ok(Some(value))
}

/// Reads the long-format CSV: `subject_id,visit,<features...>,outcome`.
///
/// Feature columns may appear in any order but must match the schema's names
/// exactly; empty cells are missing. The outcome column is mandatory.
pub fn read_cohort_csv<R: Read>(reader: R, schema: &Schema) -> Result<Cohort> {
    validate_specs(&schema.features)?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(reader);
    let header = rdr.headers().map_err(|e| CohortError::Csv { line: 1, reason: e.to_string() })?.clone();
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    let p = schema.features.len();
    if cols.len() != p + 3 || cols[0] != "subject_id" || cols[1] != "visit" || cols[cols.len() - 1] != "outcome" {
        return Err(CohortError::Csv {
            line: 1,
            reason: format!("header must be subject_id,visit,<{p} features>,outcome"),
        });
    }
    // column position in file -> spec index
    let mut slot_of = Vec::with_capacity(p);
    let mut used = vec![false; p];
    for name in &cols[2..cols.len() - 1] {
        let idx = schema
            .features
            .iter()
            .position(|s| s.name == *name)
            .ok_or_else(|| CohortError::Csv { line: 1, reason: format!("column `{name}` not in schema") })?;
        if std::mem::replace(&mut used[idx], true) {
            return Err(CohortError::Csv { line: 1, reason: format!("column `{name}` repeated") });
        }
        slot_of.push(idx);
    }

    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| CohortError::Csv {
            line: e.position().map_or(0, |pos| pos.line()),
            reason: e.to_string(),
        })?;
        let line = record.position().map_or(0, |pos| pos.line());
        let err = |reason: String| CohortError::Csv { line, reason };
        let subject_id = record[0].trim().to_string();
        if subject_id.is_empty() {
            return Err(err("empty subject_id".into()));
        }
        let visit: u32 = record[1].trim().parse().map_err(|_| err(format!("bad visit `{}`", &record[1])))?;
        let outcome = match record[p + 2].trim() {
            "0" => false,
            "1" => true,
            other => return Err(err(format!("outcome must be 0 or 1, got `{other}`"))),
        };
        let mut values = vec![None; p];
        for (pos, &idx) in slot_of.iter().enumerate() {
            let spec = &schema.features[idx];
            values[idx] = parse_cell(spec, &record[pos + 2]).map_err(|r| err(format!("{}: {r}", spec.name)))?;
        }
        rows.push(Observation { subject_id, visit, values, outcome });
    }
    Cohort::new(schema.features.clone(), schema.n_visits, rows)
}

/// Three-visit outcome pattern coded as `4·o₁ + 2·o₂ + o₃`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OutcomeGroup(u8);

impl OutcomeGroup {
    pub fn new(code: u8) -> Option<Self> {
        (code < 8).then_some(Self(code))
    }

    pub fn from_outcomes(outcomes: [bool; 3]) -> Self {
        Self(4 * outcomes[0] as u8 + 2 * outcomes[1] as u8 + outcomes[2] as u8)
    }

    pub fn code(self) -> u8 {
        self.0
    }

    pub fn outcomes(self) -> [bool; 3] {
        [self.0 & 4 != 0, self.0 & 2 != 0, self.0 & 1 != 0]
    }
}

impl fmt::Display for OutcomeGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub fn assign_outcome_group(outcomes_by_visit: &[Option<bool>]) -> Result<OutcomeGroup> {
    if outcomes_by_visit.len() != 3 {
        return Err(CohortError::WrongVisitCount(outcomes_by_visit.len()));
    }
    let mut triple = [false; 3];
    for (slot, o) in triple.iter_mut().zip(outcomes_by_visit) {
        *slot = o.ok_or_else(|| CohortError::MissingVisit(String::new()))?;
    }
    Ok(OutcomeGroup::from_outcomes(triple))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LevelCount {
    pub label: String,
    pub count: usize,
    pub percent: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FeatureSummary {
    /// mean(SD) with the n−1 denominator; `degenerate` marks n = 1 (SD reported as 0).
    Continuous { name: String, n: usize, mean: Option<f64>, sd: Option<f64>, degenerate: bool },
    /// n(%) per level; binary features report the positive level only.
    Counts { name: String, n: usize, levels: Vec<LevelCount> },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StratumSummary {
    pub outcome: bool,
    pub n: usize,
    pub features: Vec<FeatureSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VisitSummary {
    pub visit: u32,
    /// `[no event, event]`
    pub strata: [StratumSummary; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DescriptiveTable {
    pub visits: Vec<VisitSummary>,
}

pub fn summarize_by_outcome(cohort: &Cohort) -> DescriptiveTable {
    let visits = (1..=cohort.n_visits())
        .map(|visit| {
            let strata = [false, true].map(|outcome| {
                let rows: Vec<&Observation> =
                    cohort.rows().iter().filter(|r| r.visit == visit && r.outcome == outcome).collect();
                let features = cohort
                    .specs()
                    .iter()
                    .enumerate()
                    .map(|(j, spec)| summarize_feature(spec, rows.iter().filter_map(|r| r.values[j].as_ref())))
                    .collect();
                StratumSummary { outcome, n: rows.len(), features }
            });
            VisitSummary { visit, strata }
        })
        .collect();
    DescriptiveTable { visits }
}

fn summarize_feature<'a>(spec: &FeatureSpec, values: impl Iterator<Item = &'a Value>) -> FeatureSummary {
    let name = spec.name.clone();
    match spec.kind {
        FeatureKind::Continuous => {
            let xs: Vec<f64> = values.filter_map(|v| if let Value::Number(x) = v { Some(*x) } else { None }).collect();
            let n = xs.len();
            let (mean, sd) = match n {
                0 => (None, None),
                1 => (Some(xs[0]), Some(0.0)),
                _ => {
                    let m = xs.iter().sum::<f64>() / n as f64;
                    let ss: f64 = xs.iter().map(|x| (x - m).powi(2)).sum();
                    (Some(m), Some((ss / (n - 1) as f64).sqrt()))
                }
            };
            FeatureSummary::Continuous { name, n, mean, sd, degenerate: n == 1 }
        }
        FeatureKind::Binary => {
            let xs: Vec<bool> = values.map(|v| matches!(v, Value::Number(x) if *x == 1.0)).collect();
            let n = xs.len();
            let count = xs.iter().filter(|&&b| b).count();
            FeatureSummary::Counts { name, n, levels: vec![level_count("1", count, n)] }
        }
        FeatureKind::Categorical => {
            let mut counts: BTreeMap<&str, usize> = spec.levels.iter().map(|l| (l.as_str(), 0)).collect();
            let mut n = 0;
            for v in values {
                if let Value::Label(l) = v {
                    *counts.entry(l.as_str()).or_default() += 1;
                    n += 1;
                }
            }
            let levels = spec.levels.iter().map(|l| level_count(l, counts[l.as_str()], n)).collect();
            FeatureSummary::Counts { name, n, levels }
        }
    }
}

fn level_count(label: &str, count: usize, n: usize) -> LevelCount {
    LevelCount { label: label.to_string(), count, percent: (n > 0).then(|| 100.0 * count as f64 / n as f64) }
}

impl DescriptiveTable {
    /// Renders the table with one column per (visit, stratum): continuous
    /// rows as `mean(SD)`, counts as `n(%)`. Empty strata leave cells blank.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("variable");
        for v in &self.visits {
            for s in &v.strata {
                let label = if s.outcome { "CVD" } else { "No CVD" };
                out.push_str(&format!(",Visit {} {} (n = {})", v.visit, label, s.n));
            }
        }
        out.push('\n');
        let Some(first) = self.visits.first() else { return out };
        for (j, feat) in first.strata[0].features.iter().enumerate() {
            match feat {
                FeatureSummary::Continuous { name, .. } => {
                    out.push_str(&format!("{name} mean(SD)"));
                    for s in self.visits.iter().flat_map(|v| v.strata.iter()) {
                        out.push(',');
                        if let FeatureSummary::Continuous { mean: Some(m), sd: Some(sd), .. } = &s.features[j] {
                            out.push_str(&format!("{m:.2}({sd:.2})"));
                        }
                    }
                    out.push('\n');
                }
                FeatureSummary::Counts { name, levels, .. } => {
                    for (li, level) in levels.iter().enumerate() {
                        out.push_str(&format!("{name}: {} n(%)", level.label));
                        for s in self.visits.iter().flat_map(|v| v.strata.iter()) {
                            out.push(',');
                            if let FeatureSummary::Counts { levels, .. } = &s.features[j] {
                                if let Some(LevelCount { count, percent: Some(pct), .. }) = levels.get(li) {
                                    out.push_str(&format!("{count}({pct:.2})"));
                                }
                            }
                        }
                        out.push('\n');
                    }
                }
            }
        }
        out
    }
}
