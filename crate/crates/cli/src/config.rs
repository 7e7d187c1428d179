//! Experiment configuration: one TOML document with sections, overridable
//! key by key from the command line.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use predattn::synth::{DatasetConfig, ShiftedBallConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

/// Environment variable naming the default output root.
pub const OUTPUT_ENV: &str = "PREDATTN_OUT";
pub const DEFAULT_OUTPUT: &str = "predattn-out";

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: Option<u64>,
    output_dir: Option<PathBuf>,
    #[serde(default)]
    dataset: Table,
    #[serde(default)]
    predictor: PredictorSection,
    #[serde(default)]
    evaluator: EvaluatorSection,
    #[serde(default)]
    metrics: MetricsRaw,
    #[serde(default)]
    attention: AttentionSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorSection {
    /// Layer-stack file; the built-in stack when absent.
    pub spec: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Frames per training window.
    pub window: usize,
    pub stride: usize,
    pub clip_norm: Option<f64>,
}

impl Default for PredictorSection {
    fn default() -> Self {
        Self {
            spec: None,
            checkpoint: "predictor.ckpt".into(),
            epochs: 30,
            batch_size: 8,
            lr: 1e-3,
            window: 8,
            stride: 4,
            clip_norm: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluatorSection {
    pub spec: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub max_horizon: usize,
    pub anchor_stride: usize,
    /// Caps how many sequences of each split feed the corpus.
    pub corpus_sequences: Option<usize>,
}

impl Default for EvaluatorSection {
    fn default() -> Self {
        Self {
            spec: None,
            checkpoint: "evaluator.ckpt".into(),
            epochs: 20,
            batch_size: 8,
            lr: 1e-3,
            warmup: 3,
            max_horizon: 10,
            anchor_stride: 2,
            corpus_sequences: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Two AER recordings compared frame by frame.
    Pair,
    ShiftedBall,
    /// Predictor robustness to injected noise.
    Noise,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct MetricsRaw {
    scenario: Scenario,
    frames_a: Option<PathBuf>,
    frames_b: Option<PathBuf>,
    dt_us: u64,
    windows: Vec<usize>,
    threshold: f64,
    shifted_ball: Table,
    noise_levels: Vec<f64>,
    noise_sequences: usize,
    warmup: usize,
}

impl Default for MetricsRaw {
    fn default() -> Self {
        let m = MetricsSection::default();
        Self {
            scenario: m.scenario,
            frames_a: None,
            frames_b: None,
            dt_us: m.dt_us,
            windows: m.windows,
            threshold: m.threshold,
            shifted_ball: Table::new(),
            noise_levels: m.noise_levels,
            noise_sequences: m.noise_sequences,
            warmup: m.warmup,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSection {
    pub scenario: Scenario,
    pub frames_a: Option<PathBuf>,
    pub frames_b: Option<PathBuf>,
    /// Bin width used when reading AER recordings.
    pub dt_us: u64,
    /// Region sizes reported next to plain esim.
    pub windows: Vec<usize>,
    pub threshold: f64,
    pub shifted_ball: ShiftedBallConfig,
    pub noise_levels: Vec<f64>,
    /// Held-out sequences used by the noise scenario.
    pub noise_sequences: usize,
    pub warmup: usize,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            scenario: Scenario::ShiftedBall,
            frames_a: None,
            frames_b: None,
            dt_us: 10_000,
            windows: vec![2, 4],
            threshold: predattn::metrics::DEFAULT_POLARITY_THRESHOLD,
            shifted_ball: ShiftedBallConfig::default(),
            noise_levels: (1..=9).map(|k| k as f64 / 10.0).collect(),
            noise_sequences: 20,
            warmup: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Predictive,
    Random,
    Periodic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionSection {
    pub policy: PolicyKind,
    pub threshold: f64,
    pub rate: f64,
    pub period: usize,
    pub phase: usize,
    pub warmup: usize,
    /// Held-out sequences to run.
    pub sequences: usize,
    pub dump_frames: bool,
    /// Thresholds compared directly when `target_rates` is empty.
    pub thresholds: Vec<f64>,
    /// Attend rates to calibrate the predictive threshold to.
    pub target_rates: Vec<f64>,
    pub calibration_iterations: usize,
    pub seeds: Vec<u64>,
    pub energy_per_bit: f64,
}

impl Default for AttentionSection {
    fn default() -> Self {
        Self {
            policy: PolicyKind::Predictive,
            threshold: 0.5,
            rate: 0.5,
            period: 2,
            phase: 0,
            warmup: predattn::attention::DEFAULT_WARMUP,
            sequences: 10,
            dump_frames: true,
            thresholds: vec![0.3, 0.5, 0.7],
            target_rates: vec![],
            calibration_iterations: 10,
            seeds: vec![1, 2, 3, 4, 5],
            energy_per_bit: predattn::attention::ENERGY_PER_BIT_RANGE.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub dataset_dir: PathBuf,
    pub predictor: PredictorSection,
    pub evaluator: EvaluatorSection,
    pub metrics: MetricsSection,
    pub attention: AttentionSection,
}

/// Command-line sources of configuration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigSources {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    /// `section.key=value` overrides, applied in order.
    pub overrides: Vec<String>,
    /// Output root used when the document does not name one; falls back to
    /// the environment variable.
    pub default_output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(sources: &ConfigSources) -> Result<Self> {
        let (mut table, base_dir) = match &sources.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                let table: Table = text.parse().with_context(|| format!("parsing config {}", path.display()))?;
                (table, path.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None => (Table::new(), PathBuf::new()),
        };
        for o in &sources.overrides {
            apply_override(&mut table, o)?;
        }
        if let Some(seed) = sources.seed {
            table.insert("seed".into(), Value::Integer(seed as i64));
        }
        Self::from_table(table, &base_dir, sources.default_output.clone())
    }

    pub fn from_table(table: Table, base_dir: &Path, default_output: Option<PathBuf>) -> Result<Self> {
        let raw: RawConfig = Value::Table(table).try_into().context("invalid configuration")?;
        let Some(seed) = raw.seed else {
            bail!("configuration has no `seed`; set it in the file or pass --seed");
        };
        let output_dir = raw
            .output_dir
            .or(default_output)
            .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT));

        let mut dataset_table = raw.dataset;
        let preset = match dataset_table.remove("preset") {
            Some(Value::String(s)) => s,
            Some(other) => bail!("dataset.preset must be a string, got {other}"),
            None => "bouncingball64".into(),
        };
        let dir = match dataset_table.remove("dir") {
            Some(Value::String(s)) => PathBuf::from(s),
            Some(other) => bail!("dataset.dir must be a string, got {other}"),
            None => PathBuf::from("data"),
        };
        if dataset_table.contains_key("seed") {
            bail!("dataset.seed is not allowed; the top-level seed drives everything");
        }
        let dataset = merge(DatasetConfig::preset(&preset, seed)?, dataset_table).context("invalid [dataset] section")?;
        dataset.validate()?;

        let resolve = |p: Option<PathBuf>, what: &str| -> Result<Option<PathBuf>> {
            match p {
                Some(p) => {
                    let full = if p.is_absolute() { p } else { base_dir.join(p) };
                    if !full.exists() {
                        bail!("{what} {} does not exist", full.display());
                    }
                    Ok(Some(full))
                }
                None => Ok(None),
            }
        };
        let mut predictor = raw.predictor;
        predictor.spec = resolve(predictor.spec, "predictor spec")?;
        let mut evaluator = raw.evaluator;
        evaluator.spec = resolve(evaluator.spec, "evaluator spec")?;

        let m = raw.metrics;
        let shifted_ball = merge(ShiftedBallConfig { seed, ..ShiftedBallConfig::default() }, m.shifted_ball)
            .context("invalid [metrics.shifted_ball] section")?;
        let (frames_a, frames_b) = if m.scenario == Scenario::Pair {
            match (m.frames_a, m.frames_b) {
                (Some(a), Some(b)) => (resolve(Some(a), "metrics.frames_a")?, resolve(Some(b), "metrics.frames_b")?),
                _ => bail!("the pair scenario needs metrics.frames_a and metrics.frames_b"),
            }
        } else {
            (m.frames_a, m.frames_b)
        };
        let metrics = MetricsSection {
            scenario: m.scenario,
            frames_a,
            frames_b,
            dt_us: m.dt_us,
            windows: m.windows,
            threshold: m.threshold,
            shifted_ball,
            noise_levels: m.noise_levels,
            noise_sequences: m.noise_sequences,
            warmup: m.warmup,
        };
        if metrics.dt_us == 0 || metrics.windows.contains(&0) {
            bail!("metrics.dt_us and metrics.windows must be positive");
        }

        Ok(Self {
            seed,
            dataset_dir: output_dir.join(dir),
            output_dir,
            dataset,
            predictor,
            evaluator,
            metrics,
            attention: raw.attention,
        })
    }

    pub fn predictor_checkpoint(&self) -> PathBuf {
        self.output_dir.join(&self.predictor.checkpoint)
    }

    pub fn evaluator_checkpoint(&self) -> PathBuf {
        self.output_dir.join(&self.evaluator.checkpoint)
    }
}

/// Overlays `overrides` on the serialized form of `base`; unknown keys are
/// rejected by the target type.
fn merge<T: Serialize + DeserializeOwned>(base: T, overrides: Table) -> Result<T> {
    let mut table = Table::try_from(base)?;
    for (k, v) in overrides {
        table.insert(k, v);
    }
    Ok(Value::Table(table).try_into()?)
}

/// Applies `a.b.key=value`. The value is read as TOML when it parses and as
/// a bare string otherwise.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let Some((path, raw)) = spec.split_once('=') else {
        bail!("override `{spec}` is not of the form section.key=value");
    };
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("override `{spec}` has an empty key");
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    };
    let (last, parents) = keys.split_last().expect("non-empty");
    let mut cursor = table;
    for k in parents {
        let entry = cursor.entry(k.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cursor = match entry {
            Value::Table(t) => t,
            _ => bail!("override `{spec}`: `{k}` is not a section"),
        };
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(text: &str, overrides: &[&str]) -> Result<ExperimentConfig> {
        let mut table: Table = text.parse()?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        ExperimentConfig::from_table(table, Path::new("."), Some("out".into()))
    }

    #[test]
    fn missing_seed_is_rejected() {
        let err = load("[dataset]\nsequences = 4\n", &[]).unwrap_err();
        assert!(err.to_string().contains("seed"));
        assert!(load("", &["seed=3"]).is_ok());
    }

    #[test]
    fn defaults_follow_the_preset() {
        let c = load("seed = 5", &[]).unwrap();
        assert_eq!(c.dataset, DatasetConfig::bouncing_ball_64(5));
        assert_eq!(c.dataset_dir, PathBuf::from("out/data"));
        assert_eq!(c.metrics.shifted_ball.seed, 5);
        assert_eq!(c.predictor.lr, 1e-3);
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let c = load(
            "seed = 1\n[dataset]\nsequences = 10\n",
            &["dataset.sequences=4", "predictor.lr=0.01", "attention.policy=random", "metrics.shifted_ball.radius=8.0"],
        )
        .unwrap();
        assert_eq!(c.dataset.sequences, 4);
        assert_eq!(c.predictor.lr, 0.01);
        assert_eq!(c.attention.policy, PolicyKind::Random);
        assert_eq!(c.metrics.shifted_ball.radius, 8.0);
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(load("seed = 1\nbogus = 2", &[]).is_err());
        assert!(load("seed = 1\n[dataset]\nballz = 2", &[]).is_err());
        assert!(load("seed = 1\n[predictor]\nepoch = 2", &[]).is_err());
        assert!(load("seed = 1\n[dataset]\nseed = 2", &[]).is_err());
    }

    #[test]
    fn referenced_paths_must_exist() {
        let err = load("seed = 1\n[predictor]\nspec = \"/nonexistent/spec.toml\"", &[]).unwrap_err();
        assert!(err.to_string().contains("does not exist"));
        assert!(load("seed = 1\n[metrics]\nscenario = \"pair\"", &[]).is_err());
    }

    #[test]
    fn malformed_override() {
        let mut t = Table::new();
        assert!(apply_override(&mut t, "noequals").is_err());
        assert!(apply_override(&mut t, "a..b=1").is_err());
        apply_override(&mut t, "name=hello world").unwrap();
        assert_eq!(t["name"], Value::String("hello world".into()));
    }
}
