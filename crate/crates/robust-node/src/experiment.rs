//! Experiment configuration, single-run orchestration, and the four-method
//! comparison harness.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlSchedule, TimeGrid};
use crate::evaluation::{
    evaluate_grid, high_confidence_mistake_counts, margin_accuracy_counts, test_accuracy_counts,
    write_level_set_csv, MetricsReport,
};
use crate::shooting::{
    initial_schedule, schedule_fingerprint, train, ShootingConfig, TrainingHistory, WeightScheme,
};
use crate::task::{
    generate_dataset, generate_perturbations, BoundaryCurve, ClassTargets, Dataset, PerturbedBatch,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Number of base data points.
    pub m: usize,
    /// Perturbations per data point.
    pub n: usize,
    /// Sup-norm perturbation budget.
    pub epsilon: f64,
    /// Boundary clearance enforced when sampling; must exceed `epsilon`.
    pub margin: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            m: 200,
            n: 4,
            epsilon: 0.02,
            margin: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeConfig {
    pub horizon: f64,
    /// Euler steps, i.e. residual layers.
    pub nodes: usize,
}

impl Default for TimeConfig {
    fn default() -> Self {
        TimeConfig {
            horizon: 1.0,
            nodes: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub grid_resolution: usize,
    pub confidence_threshold: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            grid_resolution: 101,
            confidence_threshold: 0.7,
        }
    }
}

/// Everything one experiment needs. An empty JSON object is a valid config
/// and reproduces the reference setup; `out_dir` is the only field that must
/// come from the file or the command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub boundary: BoundaryCurve,
    pub targets: ClassTargets,
    pub time: TimeConfig,
    pub shooting: ShootingConfig,
    pub evaluation: EvaluationConfig,
    /// Seeds swept by `compare`.
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::default(),
            boundary: BoundaryCurve::default(),
            targets: ClassTargets::default(),
            time: TimeConfig::default(),
            shooting: ShootingConfig::default(),
            evaluation: EvaluationConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.m < 2 {
            return Err(Error::Config(format!(
                "dataset.m: need at least 2 data points, got {}",
                d.m
            )));
        }
        if d.n < 1 {
            return Err(Error::Config("dataset.n: need at least 1 perturbation".into()));
        }
        if !(d.margin > 0.0 && d.margin < 0.5) {
            return Err(Error::Config(format!(
                "dataset.margin: must lie strictly between 0 and 0.5, got {}",
                d.margin
            )));
        }
        if !(d.epsilon >= 0.0 && d.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "dataset.epsilon: must be nonnegative, got {}",
                d.epsilon
            )));
        }
        if d.epsilon >= d.margin {
            return Err(Error::Config(format!(
                "dataset.epsilon: budget {} must be smaller than dataset.margin {}",
                d.epsilon, d.margin
            )));
        }
        if !(self.time.horizon.is_finite() && self.time.horizon > 0.0) {
            return Err(Error::Config(format!(
                "time.horizon: must be positive, got {}",
                self.time.horizon
            )));
        }
        if self.time.nodes < 1 {
            return Err(Error::Config("time.nodes: need at least 1 step".into()));
        }
        if self.evaluation.grid_resolution < 2 {
            return Err(Error::Config(format!(
                "evaluation.grid_resolution: must be at least 2, got {}",
                self.evaluation.grid_resolution
            )));
        }
        let t = self.evaluation.confidence_threshold;
        if !(t > 0.5 && t < 1.0) {
            return Err(Error::Config(format!(
                "evaluation.confidence_threshold: must lie in (0.5, 1), got {t}"
            )));
        }
        if !(self.targets.kappa.is_finite() && self.targets.kappa > 0.0) {
            return Err(Error::Config(format!(
                "targets.kappa: must be positive, got {}",
                self.targets.kappa
            )));
        }
        if self.targets.t0 == self.targets.t1 {
            return Err(Error::Config(
                "targets.t0: cluster centers must differ".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: need at least one seed".into()));
        }
        self.shooting.validate()
    }

    pub fn grid(&self) -> TimeGrid {
        TimeGrid::new(self.time.horizon, self.time.nodes)
    }

    /// Resolve the output directory from the config or a CLI override.
    pub fn resolve_out_dir(&self, cli_override: Option<&Path>) -> Result<PathBuf> {
        cli_override
            .map(Path::to_path_buf)
            .or_else(|| self.out_dir.clone())
            .ok_or_else(|| {
                Error::Config(
                    "missing required field: out_dir (set it in the config or pass --out)".into(),
                )
            })
    }

    /// Same experiment with another training method plugged in.
    pub fn with_method(&self, method: Method) -> ExperimentConfig {
        let mut cfg = self.clone();
        let gibbs_c = match self.shooting.weight_scheme {
            WeightScheme::Gibbs { c } => c,
            _ => 100.0,
        };
        match method {
            Method::NonRobust => {
                cfg.dataset.n = 1;
                cfg.shooting.weight_scheme = WeightScheme::Uniform;
            }
            Method::UniformRobust => cfg.shooting.weight_scheme = WeightScheme::Uniform,
            Method::WeightedRobust => {
                cfg.shooting.weight_scheme = WeightScheme::Gibbs { c: gibbs_c }
            }
            Method::WorstCaseRobust => cfg.shooting.weight_scheme = WeightScheme::WorstCase,
        }
        cfg
    }
}

/// Training method rows of the comparison table. "Non-robust" trains on the
/// unperturbed data through the same code path with a single zero offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    NonRobust,
    UniformRobust,
    WeightedRobust,
    WorstCaseRobust,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::NonRobust,
        Method::UniformRobust,
        Method::WeightedRobust,
        Method::WorstCaseRobust,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::NonRobust => "non-robust",
            Method::UniformRobust => "uniform-robust",
            Method::WeightedRobust => "weighted-robust",
            Method::WorstCaseRobust => "worst-case-robust",
        }
    }

    pub fn parse(name: &str) -> Result<Method> {
        match name {
            "non-robust" | "non_robust" | "nonrobust" => Ok(Method::NonRobust),
            "uniform-robust" | "uniform" => Ok(Method::UniformRobust),
            "weighted-robust" | "weighted" | "gibbs" => Ok(Method::WeightedRobust),
            "worst-case-robust" | "worst-case" | "worst_case" => Ok(Method::WorstCaseRobust),
            other => Err(Error::Config(format!(
                "method: unknown method {other}; use non-robust, uniform-robust, \
                 weighted-robust, or worst-case-robust"
            ))),
        }
    }
}

/// Parse a config file with field-level error paths.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    let mut de = serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        Error::Config(format!(
            "{}: {} (at field {})",
            path.display(),
            e.inner(),
            e.path()
        ))
    })
}

/// A trained model plus the bookkeeping needed for reporting.
pub struct TrainedModel {
    pub dataset: Dataset,
    pub batch: PerturbedBatch,
    pub schedule: ControlSchedule,
    pub history: TrainingHistory,
    pub u0_fingerprint: u64,
}

/// Generate data and train under the given config.
pub fn train_model(cfg: &ExperimentConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    let dataset = generate_dataset(cfg.dataset.seed, cfg.dataset.m, cfg.dataset.margin, &cfg.boundary)?;
    let batch = generate_perturbations(
        &dataset,
        cfg.dataset.n,
        cfg.dataset.epsilon,
        cfg.dataset.margin,
        &cfg.boundary,
    )?;
    let grid = cfg.grid();
    let u0 = initial_schedule(grid, 2, cfg.shooting.init_scale, cfg.shooting.seed);
    let u0_fingerprint = schedule_fingerprint(&u0);
    let (schedule, history) = train(&cfg.shooting, grid, &batch, &cfg.targets)?;
    Ok(TrainedModel {
        dataset,
        batch,
        schedule,
        history,
        u0_fingerprint,
    })
}

pub struct RunOutput {
    pub metrics: MetricsReport,
    pub model: TrainedModel,
}

#[derive(Serialize, Deserialize)]
struct DatasetEcho {
    m: usize,
    n: usize,
    epsilon: f64,
    margin: f64,
    boundary: BoundaryCurve,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    seed: u64,
    points: Vec<[f64; 2]>,
    labels: Vec<u8>,
    perturbations: Vec<Vec<[f64; 2]>>,
    config: DatasetEcho,
}

#[derive(Serialize)]
struct RunManifest {
    status: &'static str,
    error: Option<String>,
    started_unix_ms: u128,
    finished_unix_ms: u128,
    artifacts: Vec<String>,
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .expect("report serialization cannot fail")
        + "\n";
    std::fs::write(path, text).map_err(Error::io(path))
}

fn write_dataset_json(cfg: &ExperimentConfig, model: &TrainedModel, path: &Path) -> Result<()> {
    let m = model.dataset.len();
    let n = model.batch.ensemble.perturbation_count();
    let file = DatasetFile {
        seed: model.dataset.seed,
        points: (0..m).map(|i| model.dataset.point(i)).collect(),
        labels: model.dataset.labels.clone(),
        perturbations: (0..m)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        [
                            model.batch.perturbations[[i, j, 0]],
                            model.batch.perturbations[[i, j, 1]],
                        ]
                    })
                    .collect()
            })
            .collect(),
        config: DatasetEcho {
            m: cfg.dataset.m,
            n,
            epsilon: cfg.dataset.epsilon,
            margin: cfg.dataset.margin,
            boundary: cfg.boundary,
        },
    };
    write_json(&file, path)
}

/// Execute generate, train, evaluate, export for one method. Partial
/// artifacts survive a mid-run abort; the manifest (the only file with
/// timestamps) records the outcome either way.
pub fn run_to_dir(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunOutput> {
    std::fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    let started = now_ms();
    let mut artifacts: Vec<String> = Vec::new();
    let result = run_inner(cfg, out_dir, &mut artifacts);
    let manifest = RunManifest {
        status: if result.is_ok() { "ok" } else { "error" },
        error: result.as_ref().err().map(|e| e.to_string()),
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
        artifacts,
    };
    write_json(&manifest, &out_dir.join("run_manifest.json"))?;
    result
}

fn run_inner(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    artifacts: &mut Vec<String>,
) -> Result<RunOutput> {
    let mut echo = cfg.clone();
    echo.out_dir = Some(out_dir.to_path_buf());
    write_json(&echo, &out_dir.join("config.json"))?;
    artifacts.push("config.json".into());

    let model = train_model(cfg)?;
    write_dataset_json(cfg, &model, &out_dir.join("dataset.json"))?;
    artifacts.push("dataset.json".into());

    crate::evaluation::export_loss_history(&model.history, &out_dir.join("history.csv"))?;
    artifacts.push("history.csv".into());

    let grid = evaluate_grid(
        &model.schedule,
        &cfg.targets,
        &cfg.boundary,
        cfg.evaluation.grid_resolution,
    )?;
    write_level_set_csv(&grid, &out_dir.join("level_set.csv"))?;
    artifacts.push("level_set.csv".into());

    let mut seeds_used = vec![cfg.dataset.seed];
    if cfg.shooting.seed != cfg.dataset.seed {
        seeds_used.push(cfg.shooting.seed);
    }
    let metrics = MetricsReport {
        test_accuracy: test_accuracy_counts(&grid).fraction(),
        margin_accuracy: margin_accuracy_counts(
            &grid,
            &cfg.boundary,
            cfg.evaluation.grid_resolution,
            cfg.dataset.margin,
        )?
        .fraction(),
        high_confidence_mistakes: high_confidence_mistake_counts(
            &grid,
            cfg.evaluation.confidence_threshold,
        )
        .fraction(),
        robust_objective: model.history.last().robust_objective,
        seeds_used,
    };
    write_json(&metrics, &out_dir.join("metrics.json"))?;
    artifacts.push("metrics.json".into());

    Ok(RunOutput { metrics, model })
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonRow {
    pub method: &'static str,
    pub seed: u64,
    pub metrics: MetricsReport,
    pub u0_fingerprint: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
    /// Per-method metric means over the seed list.
    pub means: Vec<(&'static str, MetricsReport)>,
}

fn mean_metrics(rows: &[&ComparisonRow], seeds: &[u64]) -> MetricsReport {
    let k = rows.len() as f64;
    MetricsReport {
        test_accuracy: rows.iter().map(|r| r.metrics.test_accuracy).sum::<f64>() / k,
        margin_accuracy: rows.iter().map(|r| r.metrics.margin_accuracy).sum::<f64>() / k,
        high_confidence_mistakes: rows
            .iter()
            .map(|r| r.metrics.high_confidence_mistakes)
            .sum::<f64>()
            / k,
        robust_objective: rows
            .iter()
            .map(|r| r.metrics.robust_objective)
            .sum::<f64>()
            / k,
        seeds_used: seeds.to_vec(),
    }
}

/// Run all four methods for every seed with a shared initialization per
/// seed, writing one artifact directory per cell and a comparison CSV of
/// per-seed and mean metrics.
pub fn compare_to_dir(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ComparisonReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    let mut rows = Vec::new();
    let mut failures: Vec<(Method, u64, Error)> = Vec::new();

    for &seed in &cfg.seeds {
        let mut fingerprints = Vec::new();
        for method in Method::ALL {
            let mut cell = cfg.with_method(method);
            cell.dataset.seed = seed;
            cell.shooting.seed = seed;
            let cell_dir = out_dir.join(format!("{}-seed{}", method.name(), seed));
            match run_to_dir(&cell, &cell_dir) {
                Ok(out) => {
                    fingerprints.push(out.model.u0_fingerprint);
                    rows.push(ComparisonRow {
                        method: method.name(),
                        seed,
                        metrics: out.metrics,
                        u0_fingerprint: out.model.u0_fingerprint,
                    });
                }
                Err(e) => failures.push((method, seed, e)),
            }
        }
        assert!(
            fingerprints.windows(2).all(|w| w[0] == w[1]),
            "methods must share the control initialization for seed {seed}"
        );
    }

    let mut csv = String::from(
        "method,seed,test_accuracy,margin_accuracy,high_confidence_mistakes,robust_objective\n",
    );
    let fmt = crate::evaluation::fmt_f64;
    for method in Method::ALL {
        for row in rows.iter().filter(|r| r.method == method.name()) {
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.method,
                row.seed,
                fmt(row.metrics.test_accuracy),
                fmt(row.metrics.margin_accuracy),
                fmt(row.metrics.high_confidence_mistakes),
                fmt(row.metrics.robust_objective),
            ));
        }
    }
    let mut means = Vec::new();
    for method in Method::ALL {
        let method_rows: Vec<&ComparisonRow> =
            rows.iter().filter(|r| r.method == method.name()).collect();
        if method_rows.is_empty() {
            continue;
        }
        let mean = mean_metrics(&method_rows, &cfg.seeds);
        csv.push_str(&format!(
            "{},mean,{},{},{},{}\n",
            method.name(),
            fmt(mean.test_accuracy),
            fmt(mean.margin_accuracy),
            fmt(mean.high_confidence_mistakes),
            fmt(mean.robust_objective),
        ));
        means.push((method.name(), mean));
    }
    for (method, seed, error) in &failures {
        csv.push_str(&format!("# failed: {} seed {} ({})\n", method.name(), seed, error));
    }
    let csv_path = out_dir.join("comparison.csv");
    std::fs::write(&csv_path, csv).map_err(Error::io(&csv_path))?;

    if let Some((_, _, error)) = failures.into_iter().next() {
        return Err(error);
    }
    Ok(ComparisonReport { rows, means })
}
