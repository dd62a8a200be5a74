//! Config files, seeded experiment execution, CSV trace persistence and
//! rounds-to-target comparison.
//!
//! Config format: flat `[section]` headers with `key = value` lines and
//! `#` comments. Trace files are comma-separated with a `#`-prefixed
//! header block that echoes the resolved config, so any trace can be
//! compared or re-run without its config file.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use crate::data::{
    dirichlet_partition, generate_synthetic, load_idx, standardize, ClientShard, LabeledDataset,
    PartitionScheme, PartitionSpec, ShardSize,
};
use crate::error::{Error, Result};
use crate::model::Objective;
use crate::protocol::{
    run_training, Algorithm, BatchSize, HyperParams, TraceRow, TrainingSetup, TrainingTrace,
};
use crate::rng;

/// Fixed trace schema; the column set and order are stable.
pub const TRACE_COLUMNS: &str =
    "round,grad_norm_sq,train_loss,test_accuracy,floats_up,floats_down,eta_t,gamma_t";

const TRACE_MAGIC: &str = "# hybridfl trace v1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    /// Met when train loss drops to the value or below.
    Loss(f64),
    /// Met when test accuracy reaches the value or above.
    Accuracy(f64),
}

impl Target {
    pub fn parse(s: &str) -> Result<Target> {
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        if let Some(v) = compact.strip_prefix("loss<=") {
            return Ok(Target::Loss(parse_float_str("target", v)?));
        }
        if let Some(v) = compact.strip_prefix("accuracy>=") {
            return Ok(Target::Accuracy(parse_float_str("target", v)?));
        }
        Err(Error::invalid_value(
            "target",
            format!("expected `loss<=V` or `accuracy>=V`, got `{s}`"),
        ))
    }

    pub fn met_by(&self, row: &TraceRow) -> bool {
        match *self {
            Target::Loss(v) => row.train_loss <= v,
            Target::Accuracy(v) => row.test_accuracy >= v,
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Loss(v) => write!(f, "loss<={v}"),
            Target::Accuracy(v) => write!(f, "accuracy>={v}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetConfig {
    Synthetic {
        classes: usize,
        input_dim: usize,
        train_size: usize,
        test_size: usize,
        separation: f64,
        seed: Option<u64>,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: Option<PathBuf>,
        test_labels: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKindName {
    LogisticRegression,
    MlpOneHidden,
    LeastSquares,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKindName,
    pub hidden_width: Option<usize>,
    pub l2_reg: f64,
}

impl ObjectiveConfig {
    pub fn build(&self, input_dim: usize, num_classes: usize) -> Objective {
        match self.kind {
            ObjectiveKindName::LogisticRegression => {
                Objective::logistic_regression(input_dim, num_classes).with_l2(self.l2_reg)
            }
            ObjectiveKindName::MlpOneHidden => Objective::mlp_one_hidden(
                input_dim,
                self.hidden_width.expect("validated at parse"),
                num_classes,
            )
            .with_l2(self.l2_reg),
            ObjectiveKindName::LeastSquares => {
                Objective::least_squares(input_dim).with_l2(self.l2_reg)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub algorithm: Algorithm,
    pub dataset: DatasetConfig,
    pub objective: ObjectiveConfig,
    pub scheme: PartitionScheme,
    pub shard_size: ShardSize,
    pub partition_seed: Option<u64>,
    pub hp: HyperParams,
    pub master_seed: u64,
    pub repeats: usize,
    pub target: Option<Target>,
    pub output_dir: PathBuf,
    pub standardize: bool,
}

impl ExperimentConfig {
    pub fn dataset_seed(&self) -> u64 {
        match &self.dataset {
            DatasetConfig::Synthetic { seed: Some(s), .. } => *s,
            _ => rng::derive_seed(self.master_seed, &[rng::STREAM_DATASET]),
        }
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        PartitionSpec {
            scheme: self.scheme,
            num_clients: self.hp.num_clients,
            shard_size: self.shard_size,
            seed: self
                .partition_seed
                .unwrap_or_else(|| rng::derive_seed(self.master_seed, &[rng::STREAM_PARTITION])),
        }
    }

    /// Canonical `section.key = value` lines echoed into trace headers.
    pub fn echo_lines(&self) -> Vec<(String, String)> {
        let mut lines: Vec<(String, String)> = vec![
            ("experiment.name".into(), self.name.clone()),
            ("experiment.algorithm".into(), self.algorithm.to_string()),
            ("experiment.master_seed".into(), self.master_seed.to_string()),
            ("experiment.repeats".into(), self.repeats.to_string()),
            (
                "experiment.output_dir".into(),
                self.output_dir.display().to_string(),
            ),
            (
                "experiment.standardize".into(),
                self.standardize.to_string(),
            ),
        ];
        if let Some(target) = self.target {
            lines.push(("experiment.target".into(), target.to_string()));
        }
        match &self.dataset {
            DatasetConfig::Synthetic {
                classes,
                input_dim,
                train_size,
                test_size,
                separation,
                seed,
            } => {
                lines.push(("dataset.kind".into(), "synthetic".into()));
                lines.push(("dataset.classes".into(), classes.to_string()));
                lines.push(("dataset.input_dim".into(), input_dim.to_string()));
                lines.push(("dataset.train_size".into(), train_size.to_string()));
                lines.push(("dataset.test_size".into(), test_size.to_string()));
                lines.push(("dataset.separation".into(), separation.to_string()));
                if let Some(seed) = seed {
                    lines.push(("dataset.seed".into(), seed.to_string()));
                }
            }
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                lines.push(("dataset.kind".into(), "idx".into()));
                lines.push((
                    "dataset.train_images".into(),
                    train_images.display().to_string(),
                ));
                lines.push((
                    "dataset.train_labels".into(),
                    train_labels.display().to_string(),
                ));
                if let Some(p) = test_images {
                    lines.push(("dataset.test_images".into(), p.display().to_string()));
                }
                if let Some(p) = test_labels {
                    lines.push(("dataset.test_labels".into(), p.display().to_string()));
                }
            }
        }
        lines.push((
            "objective.kind".into(),
            match self.objective.kind {
                ObjectiveKindName::LogisticRegression => "logistic-regression".into(),
                ObjectiveKindName::MlpOneHidden => "mlp-1hidden".to_string(),
                ObjectiveKindName::LeastSquares => "least-squares".into(),
            },
        ));
        if let Some(h) = self.objective.hidden_width {
            lines.push(("objective.hidden_width".into(), h.to_string()));
        }
        lines.push(("objective.l2_reg".into(), self.objective.l2_reg.to_string()));
        match self.scheme {
            PartitionScheme::Iid => lines.push(("partition.scheme".into(), "iid".into())),
            PartitionScheme::Dirichlet { alpha } => {
                lines.push(("partition.scheme".into(), "dirichlet".into()));
                lines.push(("partition.alpha".into(), alpha.to_string()));
            }
        }
        lines.push(("partition.clients".into(), self.hp.num_clients.to_string()));
        lines.push((
            "partition.shard_size".into(),
            match self.shard_size {
                ShardSize::Fixed(m) => m.to_string(),
                ShardSize::Proportional => "proportional".into(),
            },
        ));
        if let Some(seed) = self.partition_seed {
            lines.push(("partition.seed".into(), seed.to_string()));
        }
        let hp = &self.hp;
        let batch = |b: BatchSize| match b {
            BatchSize::Full => "full".to_string(),
            BatchSize::Size(n) => n.to_string(),
        };
        lines.push(("hyperparams.client_lr".into(), hp.client_lr.to_string()));
        lines.push(("hyperparams.global_lr".into(), hp.global_lr.to_string()));
        lines.push(("hyperparams.server_lr".into(), hp.server_lr.to_string()));
        lines.push(("hyperparams.client_steps".into(), hp.client_steps.to_string()));
        lines.push(("hyperparams.server_steps".into(), hp.server_steps.to_string()));
        lines.push(("hyperparams.rounds".into(), hp.rounds.to_string()));
        lines.push((
            "hyperparams.sampled_clients".into(),
            hp.sampled_clients.to_string(),
        ));
        lines.push((
            "hyperparams.server_dataset_size".into(),
            hp.server_dataset_size.to_string(),
        ));
        lines.push(("hyperparams.client_batch".into(), batch(hp.client_batch)));
        lines.push(("hyperparams.server_batch".into(), batch(hp.server_batch)));
        lines.push(("hyperparams.lr_decay".into(), hp.lr_decay.to_string()));
        lines.push(("hyperparams.lr_floor".into(), hp.lr_floor.to_string()));
        lines
    }
}

struct RawConfig {
    /// `(section.key, value)` in file order.
    entries: Vec<(String, String)>,
    consumed: std::collections::BTreeSet<String>,
}

const SECTIONS: [&str; 5] = ["experiment", "dataset", "objective", "partition", "hyperparams"];

impl RawConfig {
    fn parse(text: &str) -> Result<RawConfig> {
        let mut section = String::new();
        let mut entries = Vec::new();
        for (lineno, raw_line) in text.lines().enumerate() {
            let line = raw_line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !SECTIONS.contains(&name) {
                    return Err(Error::UnknownKey(format!("[{name}] (line {})", lineno + 1)));
                }
                section = name.to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::invalid_value(
                    format!("line {}", lineno + 1),
                    format!("expected `key = value`, got `{line}`"),
                ));
            };
            if section.is_empty() {
                return Err(Error::invalid_value(
                    key.trim(),
                    "key appears before any [section] header",
                ));
            }
            entries.push((
                format!("{section}.{}", key.trim()),
                value.trim().to_string(),
            ));
        }
        Ok(RawConfig {
            entries,
            consumed: Default::default(),
        })
    }

    fn take(&mut self, key: &str) -> Option<String> {
        let found = self
            .entries
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.clone());
        if found.is_some() {
            self.consumed.insert(key.to_string());
        }
        found
    }

    fn require(&mut self, key: &str) -> Result<String> {
        self.take(key).ok_or_else(|| Error::MissingKey(key.into()))
    }

    /// First key (in file order) that no parser consumed.
    fn reject_unknown(&self) -> Result<()> {
        for (key, _) in &self.entries {
            if !self.consumed.contains(key) {
                return Err(Error::UnknownKey(key.clone()));
            }
        }
        Ok(())
    }
}

fn parse_float_str(key: &str, s: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| Error::invalid_value(key, format!("`{s}` is not a number")))
}

fn parse_usize(key: &str, s: &str) -> Result<usize> {
    s.parse::<usize>()
        .map_err(|_| Error::invalid_value(key, format!("`{s}` is not a nonnegative integer")))
}

fn parse_u64(key: &str, s: &str) -> Result<u64> {
    s.parse::<u64>()
        .map_err(|_| Error::invalid_value(key, format!("`{s}` is not a nonnegative integer")))
}

fn parse_bool(key: &str, s: &str) -> Result<bool> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::invalid_value(key, format!("`{s}` is not true/false"))),
    }
}

fn parse_batch(key: &str, s: &str) -> Result<BatchSize> {
    if s == "full" {
        Ok(BatchSize::Full)
    } else {
        let n = parse_usize(key, s)?;
        if n == 0 {
            return Err(Error::invalid_value(key, "batch size must be >= 1"));
        }
        Ok(BatchSize::Size(n))
    }
}

/// Parses and fully validates a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let mut raw = RawConfig::parse(text)?;

    let algorithm_str = raw.require("experiment.algorithm")?;
    let algorithm = Algorithm::parse(&algorithm_str).ok_or_else(|| {
        let valid: Vec<&str> = Algorithm::ALL.iter().map(|a| a.name()).collect();
        Error::invalid_value(
            "experiment.algorithm",
            format!("unknown algorithm `{algorithm_str}`, expected one of {valid:?}"),
        )
    })?;
    let master_seed = parse_u64("experiment.master_seed", &raw.require("experiment.master_seed")?)?;
    let name = raw
        .take("experiment.name")
        .unwrap_or_else(|| algorithm.name().to_string());
    let repeats = match raw.take("experiment.repeats") {
        Some(v) => {
            let r = parse_usize("experiment.repeats", &v)?;
            if r == 0 {
                return Err(Error::invalid_value("experiment.repeats", "must be >= 1"));
            }
            r
        }
        None => 1,
    };
    let output_dir = PathBuf::from(raw.require("experiment.output_dir")?);
    let standardize = match raw.take("experiment.standardize") {
        Some(v) => parse_bool("experiment.standardize", &v)?,
        None => true,
    };
    let target = match raw.take("experiment.target") {
        Some(v) => Some(Target::parse(&v)?),
        None => None,
    };

    let dataset_kind = raw.require("dataset.kind")?;
    let dataset = match dataset_kind.as_str() {
        "synthetic" => {
            let classes = parse_usize("dataset.classes", &raw.require("dataset.classes")?)?;
            let input_dim = parse_usize("dataset.input_dim", &raw.require("dataset.input_dim")?)?;
            let train_size =
                parse_usize("dataset.train_size", &raw.require("dataset.train_size")?)?;
            let test_size = match raw.take("dataset.test_size") {
                Some(v) => parse_usize("dataset.test_size", &v)?,
                None => (train_size / 5).max(classes),
            };
            let separation =
                parse_float_str("dataset.separation", &raw.require("dataset.separation")?)?;
            if separation < 0.0 {
                return Err(Error::invalid_value(
                    "dataset.separation",
                    "must be nonnegative",
                ));
            }
            let seed = match raw.take("dataset.seed") {
                Some(v) => Some(parse_u64("dataset.seed", &v)?),
                None => None,
            };
            DatasetConfig::Synthetic {
                classes,
                input_dim,
                train_size,
                test_size,
                separation,
                seed,
            }
        }
        "idx" => {
            let train_images = PathBuf::from(raw.require("dataset.train_images")?);
            let train_labels = PathBuf::from(raw.require("dataset.train_labels")?);
            let test_images = raw.take("dataset.test_images").map(PathBuf::from);
            let test_labels = raw.take("dataset.test_labels").map(PathBuf::from);
            for (key, p) in [
                ("dataset.train_images", Some(&train_images)),
                ("dataset.train_labels", Some(&train_labels)),
                ("dataset.test_images", test_images.as_ref()),
                ("dataset.test_labels", test_labels.as_ref()),
            ] {
                if let Some(p) = p {
                    if !p.exists() {
                        return Err(Error::invalid_value(
                            key,
                            format!("file {} does not exist", p.display()),
                        ));
                    }
                }
            }
            if test_images.is_some() != test_labels.is_some() {
                return Err(Error::invalid_value(
                    "dataset.test_images",
                    "test_images and test_labels must be given together",
                ));
            }
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            }
        }
        other => {
            return Err(Error::invalid_value(
                "dataset.kind",
                format!("unknown dataset kind `{other}`, expected synthetic or idx"),
            ))
        }
    };

    let objective_kind = raw.require("objective.kind")?;
    let kind = match objective_kind.as_str() {
        "logistic-regression" => ObjectiveKindName::LogisticRegression,
        "mlp-1hidden" => ObjectiveKindName::MlpOneHidden,
        "least-squares" => ObjectiveKindName::LeastSquares,
        other => {
            return Err(Error::invalid_value(
                "objective.kind",
                format!(
                    "unknown objective `{other}`, expected logistic-regression, \
                     mlp-1hidden or least-squares"
                ),
            ))
        }
    };
    let hidden_width = match raw.take("objective.hidden_width") {
        Some(v) => Some(parse_usize("objective.hidden_width", &v)?),
        None => None,
    };
    if kind == ObjectiveKindName::MlpOneHidden && hidden_width.is_none() {
        return Err(Error::MissingKey("objective.hidden_width".into()));
    }
    if kind != ObjectiveKindName::MlpOneHidden && hidden_width.is_some() {
        return Err(Error::invalid_value(
            "objective.hidden_width",
            "only valid for mlp-1hidden",
        ));
    }
    let l2_reg = match raw.take("objective.l2_reg") {
        Some(v) => parse_float_str("objective.l2_reg", &v)?,
        None => 0.0,
    };
    if l2_reg < 0.0 {
        return Err(Error::invalid_value("objective.l2_reg", "must be nonnegative"));
    }
    let objective = ObjectiveConfig {
        kind,
        hidden_width,
        l2_reg,
    };

    let scheme = match raw.require("partition.scheme")?.as_str() {
        "iid" => PartitionScheme::Iid,
        "dirichlet" => {
            let alpha = parse_float_str("partition.alpha", &raw.require("partition.alpha")?)?;
            if !(alpha > 0.0) {
                return Err(Error::invalid_value("partition.alpha", "must be positive"));
            }
            PartitionScheme::Dirichlet { alpha }
        }
        other => {
            return Err(Error::invalid_value(
                "partition.scheme",
                format!("unknown scheme `{other}`, expected iid or dirichlet"),
            ))
        }
    };
    let num_clients = parse_usize("partition.clients", &raw.require("partition.clients")?)?;
    let shard_size = match raw.require("partition.shard_size")?.as_str() {
        "proportional" => ShardSize::Proportional,
        other => ShardSize::Fixed(parse_usize("partition.shard_size", other)?),
    };
    let partition_seed = match raw.take("partition.seed") {
        Some(v) => Some(parse_u64("partition.seed", &v)?),
        None => None,
    };

    let sampled_clients = parse_usize(
        "hyperparams.sampled_clients",
        &raw.require("hyperparams.sampled_clients")?,
    )?;
    if sampled_clients > num_clients {
        return Err(Error::invalid_value(
            "hyperparams.sampled_clients",
            format!("M exceeds N ({sampled_clients} > {num_clients})"),
        ));
    }
    let hp = HyperParams {
        client_lr: parse_float_str("hyperparams.client_lr", &raw.require("hyperparams.client_lr")?)?,
        global_lr: parse_float_str("hyperparams.global_lr", &raw.require("hyperparams.global_lr")?)?,
        server_lr: parse_float_str("hyperparams.server_lr", &raw.require("hyperparams.server_lr")?)?,
        client_steps: parse_usize(
            "hyperparams.client_steps",
            &raw.require("hyperparams.client_steps")?,
        )?,
        server_steps: parse_usize(
            "hyperparams.server_steps",
            &raw.require("hyperparams.server_steps")?,
        )?,
        rounds: parse_usize("hyperparams.rounds", &raw.require("hyperparams.rounds")?)?,
        sampled_clients,
        num_clients,
        server_dataset_size: parse_usize(
            "hyperparams.server_dataset_size",
            &raw.require("hyperparams.server_dataset_size")?,
        )?,
        client_batch: parse_batch(
            "hyperparams.client_batch",
            &raw.require("hyperparams.client_batch")?,
        )?,
        server_batch: parse_batch(
            "hyperparams.server_batch",
            &raw.require("hyperparams.server_batch")?,
        )?,
        lr_decay: match raw.take("hyperparams.lr_decay") {
            Some(v) => parse_float_str("hyperparams.lr_decay", &v)?,
            None => 0.99,
        },
        lr_floor: match raw.take("hyperparams.lr_floor") {
            Some(v) => parse_float_str("hyperparams.lr_floor", &v)?,
            None => 0.001,
        },
    };
    hp.validate().map_err(|e| match e {
        Error::InvalidSize(msg) => Error::invalid_value("hyperparams", msg),
        other => other,
    })?;

    raw.reject_unknown()?;

    Ok(ExperimentConfig {
        name,
        algorithm,
        dataset,
        objective,
        scheme,
        shard_size,
        partition_seed,
        hp,
        master_seed,
        repeats,
        target,
        output_dir,
        standardize,
    })
}

/// Materialized data for one experiment: shards, their union (the
/// population the server resamples from), the objective and optional
/// held-out test data.
pub struct PreparedExperiment {
    pub shards: Vec<ClientShard>,
    pub population: LabeledDataset,
    pub test_data: Option<LabeledDataset>,
    pub objective: Objective,
}

pub fn prepare(config: &ExperimentConfig) -> Result<PreparedExperiment> {
    let (train, test) = match &config.dataset {
        DatasetConfig::Synthetic {
            classes,
            input_dim,
            train_size,
            test_size,
            separation,
            ..
        } => {
            let seed = config.dataset_seed();
            let train = generate_synthetic(*classes, *input_dim, *train_size, *separation, seed)?;
            let test = generate_synthetic(
                *classes,
                *input_dim,
                *test_size,
                *separation,
                rng::derive_seed(seed, &[rng::STREAM_DATASET, 1]),
            )?;
            (train, Some(test))
        }
        DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let train = load_idx(train_images, train_labels)?;
            let test = match (test_images, test_labels) {
                (Some(i), Some(l)) => Some(load_idx(i, l)?.expand_classes(train.num_classes())?),
                _ => None,
            };
            (train, test)
        }
    };

    let (train, test) = if config.standardize {
        match test {
            Some(test) => {
                let (train, mut rest) = standardize(&train, &[&test]);
                (train, Some(rest.remove(0)))
            }
            None => (standardize(&train, &[]).0, None),
        }
    } else {
        (train, test)
    };

    let objective = config
        .objective
        .build(train.input_dim(), train.num_classes());
    let shards = dirichlet_partition(&train, &config.partition_spec())?;
    let refs: Vec<&LabeledDataset> = shards.iter().map(|s| &s.data).collect();
    let population = LabeledDataset::concat(&refs)?;
    Ok(PreparedExperiment {
        shards,
        population,
        test_data: test,
        objective,
    })
}

fn format_float(v: f64) -> String {
    // shortest round-trip formatting keeps traces diffable and exact
    format!("{v}")
}

fn render_trace(config: &ExperimentConfig, seed: u64, trace: &TrainingTrace) -> String {
    let mut out = String::new();
    out.push_str(TRACE_MAGIC);
    out.push('\n');
    for (key, value) in config.echo_lines() {
        out.push_str(&format!("# {key} = {value}\n"));
    }
    out.push_str(&format!("# seed = {seed}\n"));
    out.push_str(&format!("# aborted = {}\n", trace.aborted.is_some()));
    if let Some(reason) = &trace.aborted {
        out.push_str(&format!("# abort_reason = {reason}\n"));
    }
    out.push_str(TRACE_COLUMNS);
    out.push('\n');
    for row in &trace.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            row.round,
            format_float(row.grad_norm_sq),
            format_float(row.train_loss),
            format_float(row.test_accuracy),
            row.floats_up,
            row.floats_down,
            format_float(row.client_lr),
            format_float(row.server_lr),
        ));
    }
    out
}

/// Writes via a temp file and rename, so readers never observe a partial
/// trace.
fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)
        .map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    std::fs::rename(&tmp, path)
        .map_err(|e| Error::io(format!("renaming {} to {}", tmp.display(), path.display()), e))
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub trace_paths: Vec<PathBuf>,
    pub summary_path: PathBuf,
}

/// Runs the experiment once per repeat seed (`master_seed + r`), writing
/// one trace per repeat plus a per-round averaged summary.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let prepared = prepare(config)?;
    std::fs::create_dir_all(&config.output_dir)
        .map_err(|e| Error::io(format!("creating {}", config.output_dir.display()), e))?;

    let mut trace_paths = Vec::with_capacity(config.repeats);
    let mut traces = Vec::with_capacity(config.repeats);
    for r in 0..config.repeats {
        let seed = config.master_seed + r as u64;
        let setup = TrainingSetup {
            algorithm: config.algorithm,
            objective: &prepared.objective,
            shards: &prepared.shards,
            population: &prepared.population,
            test_data: prepared.test_data.as_ref(),
            hp: &config.hp,
            master_seed: seed,
        };
        let trace = run_training(&setup)?;
        let path = config.output_dir.join(format!("{}_r{r}.csv", config.name));
        write_atomic(&path, &render_trace(config, seed, &trace))?;
        trace_paths.push(path);
        traces.push(trace);
    }

    let summary = summarize(&traces);
    let summary_path = config.output_dir.join(format!("{}_summary.csv", config.name));
    write_atomic(
        &summary_path,
        &render_trace(config, config.master_seed, &summary),
    )?;
    Ok(ExperimentOutput {
        trace_paths,
        summary_path,
    })
}

/// Per-round arithmetic mean of the repeat traces (rows beyond the
/// shortest trace are dropped; shorter-than-expected traces only occur on
/// aborts).
pub fn summarize(traces: &[TrainingTrace]) -> TrainingTrace {
    let rows = traces.iter().map(|t| t.rows.len()).min().unwrap_or(0);
    let k = traces.len() as f64;
    let mut out = TrainingTrace {
        rows: Vec::with_capacity(rows),
        aborted: traces.iter().find_map(|t| t.aborted.clone()),
    };
    for i in 0..rows {
        let mean = |f: &dyn Fn(&TraceRow) -> f64| traces.iter().map(|t| f(&t.rows[i])).sum::<f64>() / k;
        out.rows.push(TraceRow {
            round: traces[0].rows[i].round,
            grad_norm_sq: mean(&|r| r.grad_norm_sq),
            train_loss: mean(&|r| r.train_loss),
            test_accuracy: mean(&|r| r.test_accuracy),
            floats_up: (traces.iter().map(|t| t.rows[i].floats_up).sum::<u64>() as f64 / k) as u64,
            floats_down: (traces.iter().map(|t| t.rows[i].floats_down).sum::<u64>() as f64 / k)
                as u64,
            client_lr: mean(&|r| r.client_lr),
            server_lr: mean(&|r| r.server_lr),
        });
    }
    out
}

/// Header metadata and rows of a persisted trace.
#[derive(Debug, Clone)]
pub struct LoadedTrace {
    pub meta: BTreeMap<String, String>,
    pub rows: Vec<TraceRow>,
}

pub fn read_trace(path: &Path) -> Result<LoadedTrace> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let malformed = |reason: &str| Error::MalformedTrace {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut lines = text.lines();
    if lines.next() != Some(TRACE_MAGIC) {
        return Err(malformed("missing trace header"));
    }
    let mut meta = BTreeMap::new();
    let mut rows = Vec::new();
    let mut saw_columns = false;
    for line in lines {
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((key, value)) = rest.split_once('=') {
                meta.insert(key.trim().to_string(), value.trim().to_string());
            }
            continue;
        }
        if line == TRACE_COLUMNS {
            saw_columns = true;
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(malformed(&format!("expected 8 fields, got {}", fields.len())));
        }
        let parse_f = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| malformed(&format!("bad float `{s}`")))
        };
        rows.push(TraceRow {
            round: fields[0]
                .parse()
                .map_err(|_| malformed(&format!("bad round `{}`", fields[0])))?,
            grad_norm_sq: parse_f(fields[1])?,
            train_loss: parse_f(fields[2])?,
            test_accuracy: parse_f(fields[3])?,
            floats_up: fields[4]
                .parse()
                .map_err(|_| malformed(&format!("bad count `{}`", fields[4])))?,
            floats_down: fields[5]
                .parse()
                .map_err(|_| malformed(&format!("bad count `{}`", fields[5])))?,
            client_lr: parse_f(fields[6])?,
            server_lr: parse_f(fields[7])?,
        });
    }
    if !saw_columns {
        return Err(malformed("missing column header"));
    }
    Ok(LoadedTrace { meta, rows })
}

/// First round index whose metric satisfies the target, if any.
pub fn rounds_to_target(rows: &[TraceRow], target: Target) -> Option<usize> {
    rows.iter().find(|row| target.met_by(row)).map(|row| row.round)
}

#[derive(Debug, Clone)]
pub struct AlgorithmSummary {
    pub algorithm: String,
    /// Rounds-to-target per trace; `None` when the target was never met.
    pub rounds: Vec<Option<usize>>,
    pub median: Option<f64>,
    pub mean: Option<f64>,
    /// `baseline_median / median`.
    pub speedup: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ComparisonTable {
    pub target: Target,
    pub baseline: String,
    pub entries: Vec<AlgorithmSummary>,
}

impl fmt::Display for ComparisonTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "target: {}   baseline: {}", self.target, self.baseline)?;
        writeln!(f, "{:<14} {:>8} {:>8}  speedup", "algorithm", "median", "mean")?;
        for entry in &self.entries {
            let median = entry
                .median
                .map(|m| format!("{m}"))
                .unwrap_or_else(|| "not reached".into());
            let mean = entry
                .mean
                .map(|m| format!("{m:.1}"))
                .unwrap_or_else(|| "not reached".into());
            let speedup = entry
                .speedup
                .map(|s| format!("({s:.2}x)"))
                .unwrap_or_else(|| "(-)".into());
            writeln!(f, "{:<14} {:>8} {:>8}  {}", entry.algorithm, median, mean, speedup)?;
        }
        Ok(())
    }
}

fn median_rounds(rounds: &[Option<usize>]) -> Option<f64> {
    let mut values: Vec<f64> = rounds
        .iter()
        .map(|r| r.map(|v| v as f64).unwrap_or(f64::INFINITY))
        .collect();
    values.sort_by(|a, b| a.partial_cmp(b).expect("no NaN rounds"));
    let mid = values.len() / 2;
    let median = if values.len() % 2 == 1 {
        values[mid]
    } else {
        (values[mid - 1] + values[mid]) / 2.0
    };
    median.is_finite().then_some(median)
}

/// Groups traces by algorithm and reports median/mean rounds-to-target
/// plus the speedup against the baseline's median. Traces recording
/// different targets cannot be compared.
pub fn compare_runs(
    paths: &[PathBuf],
    target: Option<Target>,
    baseline: &str,
) -> Result<ComparisonTable> {
    if paths.len() < 2 {
        return Err(Error::InvalidSize(format!(
            "need at least 2 traces to compare, got {}",
            paths.len()
        )));
    }
    let mut loaded = Vec::with_capacity(paths.len());
    let mut header_targets: Vec<String> = Vec::new();
    for path in paths {
        let trace = read_trace(path)?;
        if let Some(t) = trace.meta.get("experiment.target") {
            if !header_targets.contains(t) {
                header_targets.push(t.clone());
            }
        }
        loaded.push(trace);
    }
    if header_targets.len() > 1 {
        return Err(Error::MismatchedTargets(header_targets.join(" vs ")));
    }
    let resolved_target = match (target, header_targets.first()) {
        (Some(t), _) => t,
        (None, Some(t)) => Target::parse(t)?,
        (None, None) => return Err(Error::MissingKey("target".into())),
    };

    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<Option<usize>>> = BTreeMap::new();
    for trace in &loaded {
        let algorithm = trace
            .meta
            .get("experiment.algorithm")
            .cloned()
            .unwrap_or_else(|| "unknown".into());
        if !groups.contains_key(&algorithm) {
            order.push(algorithm.clone());
        }
        groups
            .entry(algorithm)
            .or_default()
            .push(rounds_to_target(&trace.rows, resolved_target));
    }
    if !groups.contains_key(baseline) {
        return Err(Error::invalid_value(
            "baseline",
            format!("no trace for algorithm `{baseline}` (have {order:?})"),
        ));
    }
    let baseline_median = median_rounds(&groups[baseline]);

    let entries = order
        .into_iter()
        .map(|algorithm| {
            let rounds = groups.remove(&algorithm).expect("grouped above");
            let median = median_rounds(&rounds);
            let mean = rounds
                .iter()
                .map(|r| r.map(|v| v as f64))
                .sum::<Option<f64>>()
                .map(|total| total / rounds.len() as f64);
            let speedup = match (baseline_median, median) {
                (Some(b), Some(m)) if m > 0.0 => Some(b / m),
                (Some(b), Some(_)) if b == 0.0 => Some(1.0),
                _ => None,
            };
            AlgorithmSummary {
                algorithm,
                rounds,
                median,
                mean,
                speedup,
            }
        })
        .collect();
    Ok(ComparisonTable {
        target: resolved_target,
        baseline: baseline.to_string(),
        entries,
    })
}
