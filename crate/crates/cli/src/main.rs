use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cohort_core::eval::ModelChoice;
use cohort_core::pipeline::{run_stages, KChoice, Manifest, PipelineConfig, PipelineError, Stage};
use cohort_core::preprocess::SmoteTarget;
use cohort_core::synth::{generate_cohort, SynthConfig};

const THREADS_ENV: &str = "COHORT_PHENOTYPER_THREADS";

#[derive(Parser)]
#[command(name = "cohort-phenotyper", version, about = "Phenotype longitudinal cohorts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort (config is a generator JSON).
    Synth(Common),
    /// Encode, impute, flag outliers.
    Preprocess(PipelineArgs),
    /// Random-forest feature ranking.
    Rank(PipelineArgs),
    /// Mixed-effects and per-visit logistic fits.
    Fit(PipelineArgs),
    /// t-SNE embedding of the top features.
    Embed(PipelineArgs),
    /// Gaussian-mixture clustering of the embedding, with KL divergence,
    /// trajectories and cluster comparison.
    Cluster(PipelineArgs),
    /// Cluster analysis plus cross-validated model evaluation.
    Report(PipelineArgs),
    /// Every stage.
    Run(PipelineArgs),
}

#[derive(Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SmoteClasses {
    Minority,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum Model {
    Lgmm,
    Lr,
}

#[derive(Args)]
struct PipelineArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    impute_k: Option<usize>,
    #[arg(long)]
    outlier_alpha: Option<f64>,
    #[arg(long)]
    smote_percent: Option<u32>,
    #[arg(long, value_enum)]
    smote_classes: Option<SmoteClasses>,
    /// Comma-separated features that get a squared column.
    #[arg(long, value_delimiter = ',')]
    quadratic: Option<Vec<String>>,
    #[arg(long, value_enum)]
    model: Option<Model>,
    /// Restrict per-visit regressions to this visit.
    #[arg(long)]
    visit: Option<u32>,
    #[arg(long)]
    quad_points: Option<usize>,
    /// JSON list of feature names replacing the ranked list.
    #[arg(long)]
    features: Option<String>,
    /// `auto` or a component count.
    #[arg(long)]
    k: Option<KChoice>,
    /// Inclusive range such as `1..6`.
    #[arg(long, value_parser = parse_range)]
    k_range: Option<[usize; 2]>,
}

fn parse_range(s: &str) -> Result<[usize; 2], String> {
    let (a, b) = s.split_once("..").ok_or("expected LO..HI")?;
    let b = b.strip_prefix('=').unwrap_or(b);
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v}: {e}"));
    Ok([parse(a)?, parse(b)?])
}

enum Failure {
    Validation(String),
    Stage(String),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Validation(_) => Failure::Validation(e.to_string()),
            PipelineError::StageFailed { .. } => Failure::Stage(e.to_string()),
        }
    }
}

fn read_config(path: &Option<PathBuf>) -> Result<Option<String>, Failure> {
    path.as_ref()
        .map(|p| std::fs::read_to_string(p).map_err(|e| Failure::Validation(format!("reading {}: {e}", p.display()))))
        .transpose()
}

fn out_dir(common: &Common, fallback: Option<&PathBuf>) -> Result<PathBuf, Failure> {
    common
        .out
        .clone()
        .or_else(|| fallback.cloned())
        .ok_or_else(|| Failure::Validation("--out is required".into()))
}

fn synth(common: &Common) -> Result<(), Failure> {
    let mut config = match read_config(&common.config)? {
        Some(text) => SynthConfig::from_json(&text).map_err(|e| Failure::Validation(e.to_string()))?,
        None => SynthConfig::table1_default(common.seed.unwrap_or(0)),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    let dir = out_dir(common, None)?;
    let io = |e: std::io::Error| Failure::Stage(format!("writing {}: {e}", dir.display()));
    std::fs::create_dir_all(&dir).map_err(io)?;
    let (cohort, truth) = generate_cohort(&config).map_err(|e| Failure::Stage(e.to_string()))?;
    let mut csv = Vec::new();
    cohort.write_csv(&mut csv).map_err(|e| Failure::Stage(e.to_string()))?;
    std::fs::write(dir.join("cohort.csv"), csv).map_err(io)?;
    std::fs::write(dir.join("schema.json"), cohort.schema().to_json() + "\n").map_err(io)?;
    let truth = serde_json::to_string_pretty(&truth).expect("ground truth serializes") + "\n";
    std::fs::write(dir.join("ground_truth.json"), truth).map_err(io)?;
    println!("wrote {} rows to {}", cohort.rows().len(), dir.display());
    Ok(())
}

fn apply(args: &PipelineArgs, config: &mut PipelineConfig) -> Result<(), Failure> {
    if let Some(seed) = args.common.seed {
        config.seed = seed;
    }
    let p = &mut config.preprocess;
    if let Some(k) = args.impute_k {
        p.impute_k = k;
    }
    if let Some(a) = args.outlier_alpha {
        p.outlier_alpha = a;
    }
    if let Some(pct) = args.smote_percent {
        p.smote.percent = pct;
    }
    if let Some(c) = args.smote_classes {
        p.smote.target = match c {
            SmoteClasses::Minority => SmoteTarget::Minority,
            SmoteClasses::Both => SmoteTarget::Both,
        };
    }
    if let Some(q) = &args.quadratic {
        p.quadratic = q.clone();
    }
    if let Some(m) = args.model {
        config.fit.model = Some(match m {
            Model::Lgmm => ModelChoice::Lgmm,
            Model::Lr => ModelChoice::Lr,
        });
    }
    if let Some(v) = args.visit {
        config.fit.visit = Some(v);
    }
    if let Some(q) = args.quad_points {
        config.fit.lgmm.quad_points = q;
    }
    if let Some(f) = &args.features {
        let list: Vec<String> =
            serde_json::from_str(f).map_err(|e| Failure::Validation(format!("--features must be a JSON list: {e}")))?;
        config.fit.features = Some(list);
    }
    if let Some(k) = args.k {
        config.cluster.k = k;
    }
    if let Some(r) = args.k_range {
        config.cluster.k_range = r;
    }
    Ok(())
}

fn pipeline(args: &PipelineArgs, targets: &[Stage]) -> Result<(Manifest, PathBuf), Failure> {
    let mut config = match read_config(&args.common.config)? {
        Some(text) => serde_json::from_str(&text).map_err(|e| Failure::Validation(e.to_string()))?,
        None => PipelineConfig::default(),
    };
    apply(args, &mut config)?;
    config.validate()?;
    let dir = out_dir(&args.common, config.output_dir.as_ref())?;
    let manifest = run_stages(&config, targets, &dir)?;
    Ok((manifest, dir))
}

fn report(manifest: &Manifest, dir: &Path) {
    for stage in &manifest.payload.stages {
        let ms = manifest.durations_ms.get(stage.stage.name()).copied().unwrap_or(0);
        eprintln!("{:<10} {:>3} files {:>8} ms", stage.stage.name(), stage.outputs.len(), ms);
    }
    println!("{}", dir.join("manifest.json").display());
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Validation(format!("{THREADS_ENV} must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Failure::Validation(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| {
        let (args, targets): (&PipelineArgs, &[Stage]) = match &cli.command {
            Command::Synth(common) => return synth(common),
            Command::Preprocess(a) => (a, &[Stage::Preprocess]),
            Command::Rank(a) => (a, &[Stage::Rank]),
            Command::Fit(a) => (a, &[Stage::Fit]),
            Command::Embed(a) => (a, &[Stage::Embed]),
            Command::Cluster(a) => (a, &[Stage::Cluster, Stage::Analyze]),
            Command::Report(a) => (a, &[Stage::Analyze, Stage::Evaluate]),
            Command::Run(a) => (a, &Stage::ALL),
        };
        let (manifest, dir) = pipeline(args, targets)?;
        report(&manifest, &dir);
        Ok(())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Stage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
