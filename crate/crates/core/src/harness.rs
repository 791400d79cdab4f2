//! Config-driven experiment pipeline.
//!
//! Stages communicate through files under the output directory:
//!
//! ```text
//! <out>/resolved_config.toml
//! <out>/data/manifest.json
//! <out>/teacher/checkpoint.json, metrics.json, timing.json
//! <out>/profile.json
//! <out>/runs/<method>/seed-<s>/student.json, trace.jsonl, metrics.json, timing.json
//! <out>/report.json, report.md, timings.json
//! <out>/inspect/sparsity.json, sparsity.txt
//! ```
//!
//! Wall-clock measurements live only in the `timing.json`/`timings.json`
//! files so that `report.json` is a pure function of config and seeds.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attribution::{
    activation_sparsity_profile, compute_profile, select_top, AttributionOptions,
    ImportanceProfile, OutputReduction, SparsityTable,
};
use crate::data::{load_csv, CsvSchema, DatasetSplits, PlantedRelevanceSpec, SeqRule, SeqTaskSpec, Split};
use crate::error::{Error, Result};
use crate::io::{read_json, read_text, write_json, write_text};
use crate::losses::LossWeights;
use crate::model::{Checkpoint, ModelConfig};
use crate::train::{
    distill, evaluate, trace_to_jsonl, train_teacher, DistillationPlan, Method, Metric,
    TrainConfig,
};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    Planted {
        d_input: usize,
        num_relevant: usize,
        noise_scale: f64,
        num_classes: usize,
        seed: u64,
        #[serde(default = "default_train_size")]
        train_size: usize,
        #[serde(default)]
        val_size: usize,
        #[serde(default = "default_test_size")]
        test_size: usize,
    },
    Sequence {
        vocab_size: usize,
        context_len: usize,
        rule: SeqRule,
        seed: u64,
        #[serde(default = "default_train_size")]
        train_size: usize,
        #[serde(default)]
        val_size: usize,
        #[serde(default = "default_test_size")]
        test_size: usize,
    },
    Csv {
        train: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        val: Option<PathBuf>,
        test: PathBuf,
        features: Vec<String>,
        num_classes: usize,
    },
}

fn default_train_size() -> usize {
    2000
}

fn default_test_size() -> usize {
    500
}

impl DatasetConfig {
    pub fn num_classes(&self) -> usize {
        match self {
            DatasetConfig::Planted { num_classes, .. } | DatasetConfig::Csv { num_classes, .. } => {
                *num_classes
            }
            DatasetConfig::Sequence {
                vocab_size, rule, ..
            } => rule.num_classes(*vocab_size),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            DatasetConfig::Planted {
                train_size,
                test_size,
                ..
            }
            | DatasetConfig::Sequence {
                train_size,
                test_size,
                ..
            } => {
                if *train_size == 0 || *test_size == 0 {
                    return Err(Error::config("train_size and test_size must be >= 1"));
                }
                match self.planted_spec() {
                    Some(spec) => spec.validate(),
                    None => self.seq_spec().expect("sequence dataset").validate(),
                }
            }
            DatasetConfig::Csv {
                train,
                val,
                test,
                features,
                num_classes,
            } => {
                for p in std::iter::once(train).chain(val).chain(std::iter::once(test)) {
                    if !p.is_file() {
                        return Err(Error::config(format!(
                            "dataset file {} does not exist",
                            p.display()
                        )));
                    }
                }
                if features.is_empty() || *num_classes < 2 {
                    return Err(Error::config(
                        "csv dataset needs feature columns and at least 2 classes",
                    ));
                }
                Ok(())
            }
        }
    }

    fn planted_spec(&self) -> Option<PlantedRelevanceSpec> {
        match self {
            DatasetConfig::Planted {
                d_input,
                num_relevant,
                noise_scale,
                num_classes,
                seed,
                ..
            } => Some(PlantedRelevanceSpec {
                d_input: *d_input,
                num_relevant: *num_relevant,
                noise_scale: *noise_scale,
                num_classes: *num_classes,
                seed: *seed,
            }),
            _ => None,
        }
    }

    fn seq_spec(&self) -> Option<SeqTaskSpec> {
        match self {
            DatasetConfig::Sequence {
                vocab_size,
                context_len,
                rule,
                seed,
                ..
            } => Some(SeqTaskSpec {
                vocab_size: *vocab_size,
                context_len: *context_len,
                rule: *rule,
                seed: *seed,
            }),
            _ => None,
        }
    }

    /// Generates or reads every split.
    pub fn load(&self) -> Result<DatasetSplits> {
        self.validate()?;
        match self {
            DatasetConfig::Planted {
                train_size,
                val_size,
                test_size,
                ..
            } => Ok(self
                .planted_spec()
                .expect("planted dataset")
                .generate(*train_size, *val_size, *test_size)?
                .splits),
            DatasetConfig::Sequence {
                train_size,
                val_size,
                test_size,
                ..
            } => self
                .seq_spec()
                .expect("sequence dataset")
                .generate(*train_size, *val_size, *test_size),
            DatasetConfig::Csv {
                train,
                val,
                test,
                features,
                num_classes,
            } => {
                let schema = CsvSchema {
                    features: features.clone(),
                    num_classes: *num_classes,
                };
                Ok(DatasetSplits {
                    train: load_csv(train, &schema, Split::Train)?,
                    val: val
                        .as_ref()
                        .map(|p| load_csv(p, &schema, Split::Val))
                        .transpose()?,
                    test: load_csv(test, &schema, Split::Test)?,
                    seed: None,
                })
            }
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        if let DatasetConfig::Csv {
            train, val, test, ..
        } = self
        {
            for p in [Some(train), val.as_mut(), Some(test)].into_iter().flatten() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSection {
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentSection {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributionSection {
    #[serde(default)]
    pub output_reduction: OutputReduction,
    #[serde(default = "default_fraction")]
    pub calibration_fraction: f64,
    #[serde(default)]
    pub sample_seed: u64,
}

fn default_fraction() -> f64 {
    1.0
}

impl Default for AttributionSection {
    fn default() -> Self {
        Self {
            output_reduction: OutputReduction::TaskLoss,
            calibration_fraction: 1.0,
            sample_seed: 0,
        }
    }
}

impl From<AttributionSection> for AttributionOptions {
    fn from(a: AttributionSection) -> Self {
        AttributionOptions {
            output_reduction: a.output_reduction,
            calibration_fraction: a.calibration_fraction,
            sample_seed: a.sample_seed,
        }
    }
}

/// Everything one comparison needs. Loaded from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub dataset: DatasetConfig,
    pub teacher: TeacherSection,
    pub student: StudentSection,
    #[serde(default)]
    pub attribution: AttributionSection,
    /// Loss weights keyed by method name. Missing methods get their defaults
    /// when the config is resolved.
    #[serde(default)]
    pub weights: BTreeMap<String, LossWeights>,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("flexkd-out")
}

fn default_methods() -> Vec<Method> {
    vec![
        Method::FtOnly,
        Method::VanillaKd,
        Method::ProjectorMse,
        Method::Flexkd,
    ]
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

impl ExperimentConfig {
    /// Parses, resolves defaults and validates. Relative CSV paths are taken
    /// relative to `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))?;
        cfg.dataset.resolve_paths(base_dir);
        cfg.resolve()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path).map_err(|e| match e {
            Error::Io { path, source } => {
                Error::config(format!("cannot read config {}: {source}", path.display()))
            }
            other => other,
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml_str(&text, base)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Fills every default the run will use, so the written config is complete.
    fn resolve(&mut self) -> Result<()> {
        for key in self.weights.keys() {
            Method::parse(key)?;
        }
        for m in &self.methods {
            self.weights
                .entry(m.name().to_string())
                .or_insert_with(|| m.default_weights());
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.dataset.validate()?;
        for (who, model, train) in [
            ("teacher", &self.teacher.model, &self.teacher.train),
            ("student", &self.student.model, &self.student.train),
        ] {
            model.validate()?;
            train.validate()?;
            if model.num_classes() != self.dataset.num_classes() {
                return Err(Error::config(format!(
                    "{who} has {} classes but the dataset has {}",
                    model.num_classes(),
                    self.dataset.num_classes()
                )));
            }
            self.check_input(who, model)?;
        }
        let (d_t, d_s) = (self.teacher.model.hidden_size(), self.student.model.hidden_size());
        if self.methods.contains(&Method::Flexkd) && d_s > d_t {
            return Err(Error::config(format!(
                "flexkd needs student width {d_s} <= teacher width {d_t}"
            )));
        }
        let a = self.attribution.calibration_fraction;
        if !(a > 0.0 && a <= 1.0) {
            return Err(Error::config(format!(
                "calibration_fraction must be in (0, 1], got {a}"
            )));
        }
        if self.methods.is_empty() {
            return Err(Error::config("methods must not be empty"));
        }
        if self.methods.iter().collect::<BTreeSet<_>>().len() != self.methods.len() {
            return Err(Error::config("methods contain duplicates"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(Error::config("seeds contain duplicates"));
        }
        for m in &self.methods {
            self.weights_for(*m)?.validate()?;
        }
        Ok(())
    }

    fn check_input(&self, who: &str, model: &ModelConfig) -> Result<()> {
        let ok = match (&self.dataset, model) {
            (DatasetConfig::Planted { d_input, .. }, ModelConfig::Mlp(c)) => c.input_dim == *d_input,
            (DatasetConfig::Csv { features, .. }, ModelConfig::Mlp(c)) => c.input_dim == features.len(),
            (
                DatasetConfig::Sequence {
                    vocab_size,
                    context_len,
                    ..
                },
                ModelConfig::Seq(c),
            ) => c.vocab_size == *vocab_size && c.context_len >= *context_len,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!(
                "{who} model does not fit the dataset's inputs"
            )))
        }
    }

    pub fn weights_for(&self, method: Method) -> Result<LossWeights> {
        self.weights
            .get(method.name())
            .copied()
            .ok_or_else(|| Error::config(format!("no loss weights for {method}")))
    }

    pub fn layout(&self) -> Layout {
        Layout {
            root: self.out_dir.clone(),
        }
    }
}

/// Artifact paths under an output directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn resolved_config(&self) -> PathBuf {
        self.root.join("resolved_config.toml")
    }
    pub fn data_manifest(&self) -> PathBuf {
        self.root.join("data/manifest.json")
    }
    pub fn teacher_checkpoint(&self) -> PathBuf {
        self.root.join("teacher/checkpoint.json")
    }
    pub fn teacher_metrics(&self) -> PathBuf {
        self.root.join("teacher/metrics.json")
    }
    fn teacher_timing(&self) -> PathBuf {
        self.root.join("teacher/timing.json")
    }
    pub fn profile(&self) -> PathBuf {
        self.root.join("profile.json")
    }
    pub fn run_dir(&self, method: Method, seed: u64) -> PathBuf {
        self.root.join(format!("runs/{method}/seed-{seed}"))
    }
    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn report_md(&self) -> PathBuf {
        self.root.join("report.md")
    }
    pub fn timings(&self) -> PathBuf {
        self.root.join("timings.json")
    }
    pub fn sparsity_json(&self) -> PathBuf {
        self.root.join("inspect/sparsity.json")
    }
    pub fn sparsity_txt(&self) -> PathBuf {
        self.root.join("inspect/sparsity.txt")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Timing {
    seconds: f64,
}

fn write_resolved(cfg: &ExperimentConfig) -> Result<()> {
    write_text(&cfg.layout().resolved_config(), &cfg.to_toml()?)
}

/// Trains the teacher and writes its checkpoint, metrics and the dataset
/// manifest. Returns the checkpoint path.
pub fn cmd_train_teacher(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let start = Instant::now();
    let layout = cfg.layout();
    write_resolved(cfg)?;
    let splits = cfg.dataset.load()?;
    write_json(&layout.data_manifest(), &splits.manifest())?;
    let outcome = train_teacher(
        cfg.teacher.model.clone(),
        &splits.train,
        splits.val.as_ref(),
        &cfg.teacher.train,
        cfg.teacher.seed,
    )?;
    let path = layout.teacher_checkpoint();
    outcome.checkpoint.save(&path)?;
    write_json(&layout.teacher_metrics(), &outcome.epochs)?;
    write_json(
        &layout.teacher_timing(),
        &Timing {
            seconds: start.elapsed().as_secs_f64(),
        },
    )?;
    Ok(path)
}

fn load_model(path: &Path) -> Result<crate::model::Model> {
    Checkpoint::load(path)?.to_model()
}

/// Scores the teacher's last hidden layer on the training split.
pub fn cmd_score(cfg: &ExperimentConfig, teacher: Option<&Path>) -> Result<PathBuf> {
    let layout = cfg.layout();
    let teacher_path = teacher.map_or_else(|| layout.teacher_checkpoint(), Path::to_path_buf);
    let model = load_model(&teacher_path)?;
    let splits = cfg.dataset.load()?;
    let profile = compute_profile(&model, &splits.train, &cfg.attribution.into())?;
    let path = layout.profile();
    profile.save(&path)?;
    Ok(path)
}

/// Final metrics of one (method, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub method: Method,
    pub seed: u64,
    pub test_accuracy: f64,
    pub test_nll: f64,
    pub steps: u64,
    pub final_loss: Option<f64>,
}

/// Distils one student per (method, seed). Returns the run directories.
pub fn cmd_distill(
    cfg: &ExperimentConfig,
    teacher: Option<&Path>,
    profile: Option<&Path>,
    methods: &[Method],
    seeds: &[u64],
) -> Result<Vec<PathBuf>> {
    let layout = cfg.layout();
    let teacher_path = teacher.map_or_else(|| layout.teacher_checkpoint(), Path::to_path_buf);
    let teacher_model = load_model(&teacher_path)?;
    let profile_path = profile.map_or_else(|| layout.profile(), Path::to_path_buf);
    let profile: Option<ImportanceProfile> =
        if methods.contains(&Method::Flexkd) || profile_path.is_file() {
            let p = ImportanceProfile::load(&profile_path)?;
            p.check_teacher(&teacher_model)?;
            Some(p)
        } else {
            None
        };
    let splits = cfg.dataset.load()?;
    let d_s = cfg.student.model.hidden_size();
    let mut dirs = Vec::new();
    for &method in methods {
        let weights = cfg.weights_for(method)?;
        let selection = match (&profile, method) {
            (Some(p), Method::Flexkd) => Some(select_top(p, d_s)?),
            _ => None,
        };
        for &seed in seeds {
            let start = Instant::now();
            let plan = DistillationPlan {
                teacher: teacher_model.clone(),
                teacher_checksum: teacher_model.checksum(),
                student_config: cfg.student.model.clone(),
                profile: profile.clone(),
                selection: selection.clone(),
                weights,
                method,
                train: cfg.student.train,
                seed,
            };
            let outcome = distill(&plan, &splits.train)?;
            let student = outcome.student.to_model()?;
            let metrics = RunMetrics {
                method,
                seed,
                test_accuracy: evaluate(&student, &splits.test, Metric::Accuracy)?,
                test_nll: evaluate(&student, &splits.test, Metric::Nll)?,
                steps: outcome.student.metadata.steps,
                final_loss: outcome.student.metadata.final_loss,
            };
            let dir = layout.run_dir(method, seed);
            outcome.student.save(&dir.join("student.json"))?;
            if let Some(head) = &outcome.projector {
                write_json(&dir.join("projector.json"), head)?;
            }
            write_text(&dir.join("trace.jsonl"), &trace_to_jsonl(&outcome.trace))?;
            write_json(&dir.join("metrics.json"), &metrics)?;
            write_json(
                &dir.join("timing.json"),
                &Timing {
                    seconds: start.elapsed().as_secs_f64(),
                },
            )?;
            dirs.push(dir);
        }
    }
    Ok(dirs)
}

/// Evaluates a checkpoint on the test split.
pub fn cmd_evaluate(cfg: &ExperimentConfig, checkpoint: &Path, metric: Metric) -> Result<f64> {
    let model = load_model(checkpoint)?;
    let splits = cfg.dataset.load()?;
    evaluate(&model, &splits.test, metric)
}

/// Per-method aggregate over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub seeds: Vec<u64>,
    pub values: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    /// `mean - baseline mean`; absent without a projector baseline.
    pub delta_vs_baseline: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub metric: String,
    pub baseline: Option<Method>,
    pub runs: Vec<RunMetrics>,
    pub summary: Vec<MethodSummary>,
}

/// Mean and population standard deviation, accumulated in order.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl ExperimentReport {
    /// Aggregates test accuracy per method; the projector baseline is
    /// `projector_mse` when present, else `projector_corr`.
    pub fn from_runs(config: ExperimentConfig, runs: Vec<RunMetrics>) -> Self {
        let baseline = [Method::ProjectorMse, Method::ProjectorCorr]
            .into_iter()
            .find(|m| config.methods.contains(m));
        let mut summary: Vec<MethodSummary> = config
            .methods
            .iter()
            .map(|&method| {
                let own: Vec<&RunMetrics> = runs.iter().filter(|r| r.method == method).collect();
                let values: Vec<f64> = own.iter().map(|r| r.test_accuracy).collect();
                let (mean, std) = mean_std(&values);
                MethodSummary {
                    method,
                    seeds: own.iter().map(|r| r.seed).collect(),
                    values,
                    mean,
                    std,
                    delta_vs_baseline: None,
                }
            })
            .collect();
        if let Some(b) = baseline {
            let base = summary.iter().find(|s| s.method == b).map(|s| s.mean);
            for s in &mut summary {
                s.delta_vs_baseline = base.map(|m| s.mean - m);
            }
        }
        ExperimentReport {
            config,
            metric: "test_accuracy".to_string(),
            baseline,
            runs,
            summary,
        }
    }

    pub fn method(&self, method: Method) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == method)
    }

    /// Markdown table: accuracy in percent, deltas against the projector.
    pub fn to_markdown(&self) -> String {
        let seeds = &self.config.seeds;
        let mut s = String::from("| Method |");
        for seed in seeds {
            s.push_str(&format!(" seed {seed} |"));
        }
        s.push_str(" Accuracy (%) |");
        if let Some(b) = self.baseline {
            s.push_str(&format!(" Δ vs {b} |"));
        }
        s.push_str("\n|---|");
        for _ in seeds {
            s.push_str("---:|");
        }
        s.push_str("---:|");
        if self.baseline.is_some() {
            s.push_str("---:|");
        }
        s.push('\n');
        for m in &self.summary {
            s.push_str(&format!("| {} |", m.method));
            for v in &m.values {
                s.push_str(&format!(" {:.2} |", 100.0 * v));
            }
            s.push_str(&format!(" {:.2} ± {:.2} |", 100.0 * m.mean, 100.0 * m.std));
            if let Some(d) = m.delta_vs_baseline {
                if Some(m.method) == self.baseline {
                    s.push_str(" baseline |");
                } else {
                    s.push_str(&format!(" {:+.2} |", 100.0 * d));
                }
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunTiming {
    method: Method,
    seed: u64,
    seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Timings {
    teacher_seconds: Option<f64>,
    runs: Vec<RunTiming>,
}

/// Collects every (method, seed) run into `report.json` and `report.md`.
/// Fails listing the missing cells if any run has no metrics.
pub fn cmd_compare(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let layout = cfg.layout();
    let mut runs = Vec::new();
    let mut timings = Vec::new();
    let mut missing = Vec::new();
    for &method in &cfg.methods {
        for &seed in &cfg.seeds {
            let dir = layout.run_dir(method, seed);
            let path = dir.join("metrics.json");
            if !path.is_file() {
                missing.push(format!("{method}/seed-{seed}"));
                continue;
            }
            runs.push(read_json::<RunMetrics>(&path)?);
            if let Ok(t) = read_json::<Timing>(&dir.join("timing.json")) {
                timings.push(RunTiming {
                    method,
                    seed,
                    seconds: t.seconds,
                });
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::config(format!(
            "missing runs: {}",
            missing.join(", ")
        )));
    }
    let report = ExperimentReport::from_runs(cfg.clone(), runs);
    write_json(&layout.report_json(), &report)?;
    write_text(&layout.report_md(), &report.to_markdown())?;
    let teacher_seconds = read_json::<Timing>(&layout.teacher_timing()).ok().map(|t| t.seconds);
    write_json(
        &layout.timings(),
        &Timings {
            teacher_seconds,
            runs: timings,
        },
    )?;
    Ok(report)
}

/// Small-activation percentages of a checkpoint on the training split.
pub fn cmd_inspect(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    thresholds: &[f64],
) -> Result<SparsityTable> {
    let layout = cfg.layout();
    let path = checkpoint.map_or_else(|| layout.teacher_checkpoint(), Path::to_path_buf);
    let model = load_model(&path)?;
    let splits = cfg.dataset.load()?;
    let table = activation_sparsity_profile(&model, &splits.train, thresholds)?;
    write_json(&layout.sparsity_json(), &table)?;
    write_text(&layout.sparsity_txt(), &table.to_text())?;
    Ok(table)
}

/// train-teacher, score, distill every cell, compare.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let teacher = cmd_train_teacher(cfg)?;
    let profile = cmd_score(cfg, Some(&teacher))?;
    cmd_distill(cfg, Some(&teacher), Some(&profile), &cfg.methods, &cfg.seeds)?;
    cmd_compare(cfg)
}
