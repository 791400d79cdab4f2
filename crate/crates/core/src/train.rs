//! Teacher fine-tuning, student distillation and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::{ImportanceProfile, SelectionSet};
use crate::autograd::{Tape, Var};
use crate::data::{argmax, Batch, LabeledDataset};
use crate::error::{Error, Result};
use crate::losses::{
    composite_loss, flex_kd_loss, logit_kd_loss, projector_loss, LogitMode, LossParts, LossWeights,
    ProjectorHead, ProjectorMetric,
};
use crate::model::{Checkpoint, ForwardResult, Model, ModelConfig, RowLayout, TrainingMetadata};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default)]
    pub method: OptimizerKind,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::epsilon")]
    pub epsilon: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
}

mod defaults {
    pub fn learning_rate() -> f64 {
        5e-4
    }
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn epsilon() -> f64 {
        1e-8
    }
    pub fn weight_decay() -> f64 {
        1e-6
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            method: OptimizerKind::Adam,
            learning_rate: defaults::learning_rate(),
            beta1: defaults::beta1(),
            beta2: defaults::beta2(),
            epsilon: defaults::epsilon(),
            weight_decay: defaults::weight_decay(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Optimizer with per-parameter moment buffers. Weight decay is added to the
/// gradient (L2 style) before the update.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, shapes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::dim("optimizer parameter count changed"));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.numel() != g.len() || self.first[k].len() != g.len() {
                return Err(Error::dim(format!("gradient {k} does not match its parameter")));
            }
            let data = p.data_mut();
            match c.method {
                OptimizerKind::Sgd => {
                    for (w, &gi) in data.iter_mut().zip(g.iter()) {
                        *w -= c.learning_rate * (gi + c.weight_decay * *w);
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.first[k], &mut self.second[k]);
                    for i in 0..data.len() {
                        let gi = g[i] + c.weight_decay * data[i];
                        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        data[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
                    }
                }
            }
            if data.iter().any(|w| !w.is_finite()) {
                return Err(Error::numeric("optimizer produced a non-finite parameter"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

fn default_batch() -> usize {
    8
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        self.optimizer.validate()
    }
}

/// Shuffled mini-batches for one epoch.
fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn shuffle_rng(seed: u64) -> ChaCha8Rng {
    // separate stream from the parameter initialisation
    ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed_5eed_5eed)
}

/// Cross-entropy over the valid rows of `out`.
fn supervised_loss(tape: &mut Tape, out: &ForwardResult, targets: &[usize]) -> Result<Var> {
    let logits = match &out.layout {
        RowLayout::Samples => out.logits,
        RowLayout::Positions { valid_rows, .. } => tape.gather_rows(out.logits, valid_rows)?,
    };
    tape.softmax_cross_entropy(logits, targets)
}

fn valid_rows_var(tape: &mut Tape, v: Var, layout: &RowLayout) -> Result<Var> {
    match layout {
        RowLayout::Samples => Ok(v),
        RowLayout::Positions { valid_rows, .. } => tape.gather_rows(v, valid_rows),
    }
}

fn valid_rows_tensor(t: &Tensor, layout: &RowLayout) -> Result<Tensor> {
    match layout {
        RowLayout::Samples => Ok(t.clone()),
        RowLayout::Positions { valid_rows, .. } => t.select_rows(valid_rows),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub val_nll: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TeacherOutcome {
    pub checkpoint: Checkpoint,
    pub epochs: Vec<EpochMetrics>,
}

fn one_step(
    model: &mut Model,
    optimizer: &mut Optimizer,
    batch: &Batch,
) -> Result<f64> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &batch.input, true)?;
    let loss = supervised_loss(&mut tape, &out, &batch.targets)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let gs: Vec<&[f64]> = out
        .params
        .iter()
        .map(|&p| grads.get(p).ok_or_else(|| Error::Graph("missing parameter gradient".into())))
        .collect::<Result<_>>()?;
    let mut ps: Vec<&mut Tensor> = model.params_mut().iter_mut().map(|p| &mut p.value).collect();
    optimizer.step(&mut ps, &gs)?;
    Ok(value)
}

/// Supervised fine-tuning from a seeded initialisation.
pub fn train_teacher(
    config: ModelConfig,
    train: &LabeledDataset,
    val: Option<&LabeledDataset>,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<TeacherOutcome> {
    train_supervised(Model::init(config, seed)?, train, val, train_cfg, seed)
}

/// Supervised training of an existing model.
pub fn train_supervised(
    mut model: Model,
    train: &LabeledDataset,
    val: Option<&LabeledDataset>,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<TeacherOutcome> {
    let meta = |steps: u64, loss: Option<f64>| TrainingMetadata {
        seed,
        steps,
        final_loss: loss,
        note: None,
    };
    if train.is_empty() {
        return Err(Error::data("empty training set"));
    }
    train_cfg.validate()?;
    let sizes: Vec<usize> = model.params().iter().map(|p| p.value.numel()).collect();
    let mut opt = Optimizer::new(train_cfg.optimizer, &sizes);
    let mut rng = shuffle_rng(seed);
    let mut epochs = Vec::with_capacity(train_cfg.epochs);
    let mut last_loss = None;
    for epoch in 0..train_cfg.epochs {
        let mut total = 0.0;
        let mut count = 0usize;
        for idx in epoch_batches(train.len(), train_cfg.batch_size, &mut rng) {
            let batch = train.batch(&idx)?;
            let backup = model.clone();
            match one_step(&mut model, &mut opt, &batch) {
                Ok(l) => {
                    total += l * idx.len() as f64;
                    count += idx.len();
                }
                Err(Error::Numeric(message)) => {
                    return Err(Error::Diverged {
                        message,
                        last_good: Box::new(Checkpoint::from_model(
                            &backup,
                            meta(opt.steps_taken().saturating_sub(1), last_loss),
                        )),
                    })
                }
                Err(e) => return Err(e),
            }
        }
        let train_loss = total / count as f64;
        last_loss = Some(train_loss);
        let train_accuracy = evaluate(&model, train, Metric::Accuracy)?;
        let (val_accuracy, val_nll) = match val {
            Some(v) => (
                Some(evaluate(&model, v, Metric::Accuracy)?),
                Some(evaluate(&model, v, Metric::Nll)?),
            ),
            None => (None, None),
        };
        epochs.push(EpochMetrics {
            epoch,
            train_loss,
            train_accuracy,
            val_accuracy,
            val_nll,
        });
    }
    Ok(TeacherOutcome {
        checkpoint: Checkpoint::from_model(&model, meta(opt.steps_taken(), last_loss)),
        epochs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Correlation loss on the top-ranked teacher units.
    Flexkd,
    ProjectorMse,
    ProjectorCorr,
    VanillaKd,
    FtOnly,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::FtOnly,
        Method::VanillaKd,
        Method::ProjectorMse,
        Method::ProjectorCorr,
        Method::Flexkd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Flexkd => "flexkd",
            Method::ProjectorMse => "projector_mse",
            Method::ProjectorCorr => "projector_corr",
            Method::VanillaKd => "vanilla_kd",
            Method::FtOnly => "ft_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown method {s:?}")))
    }

    /// Each distillation term is a stand-alone regularizer at 0.5 next to the
    /// hard loss at 0.5; plain fine-tuning uses the hard loss alone.
    pub fn default_weights(self) -> LossWeights {
        match self {
            Method::Flexkd | Method::ProjectorMse | Method::ProjectorCorr => {
                LossWeights::classification()
            }
            Method::VanillaKd => LossWeights {
                alpha: 0.0,
                beta: 0.5,
                lambda: 0.5,
                temperature: 1.0,
                logit_mode: LogitMode::ForwardKl,
                centered: false,
            },
            Method::FtOnly => LossWeights::supervised_only(),
        }
    }

    fn projector_metric(self) -> Option<ProjectorMetric> {
        match self {
            Method::ProjectorMse => Some(ProjectorMetric::Mse),
            Method::ProjectorCorr => Some(ProjectorMetric::Correlation),
            _ => None,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything a distillation run needs.
#[derive(Debug, Clone)]
pub struct DistillationPlan {
    pub teacher: Model,
    /// Checksum the caller expects the teacher to have.
    pub teacher_checksum: String,
    pub student_config: ModelConfig,
    pub profile: Option<ImportanceProfile>,
    pub selection: Option<SelectionSet>,
    pub weights: LossWeights,
    pub method: Method,
    pub train: TrainConfig,
    pub seed: u64,
}

impl DistillationPlan {
    pub fn validate(&self) -> Result<()> {
        if self.teacher.checksum() != self.teacher_checksum {
            return Err(Error::config("teacher checkpoint does not match the expected checksum"));
        }
        self.weights.validate()?;
        self.train.validate()?;
        self.student_config.validate()?;
        if self.student_config.num_classes() != self.teacher.config().num_classes() {
            return Err(Error::config("teacher and student disagree on the number of classes"));
        }
        let d_t = self.teacher.hidden_size();
        let d_s = self.student_config.hidden_size();
        if let Some(p) = &self.profile {
            p.check_teacher(&self.teacher)?;
        }
        if self.method == Method::Flexkd {
            let sel = self
                .selection
                .as_ref()
                .ok_or_else(|| Error::config("flexkd needs a selection set"))?;
            if sel.len() != d_s {
                return Err(Error::config(format!(
                    "selection has {} units but the student is {d_s} wide",
                    sel.len()
                )));
            }
            if sel.indices.iter().any(|&i| i >= d_t) {
                return Err(Error::config("selection refers to units outside the teacher"));
            }
            if let Some(p) = &self.profile {
                if p.ranked_indices[..d_s] != sel.indices[..] {
                    return Err(Error::config("selection is not the top of the profile ranking"));
                }
            }
            if self.weights.alpha <= 0.0 {
                return Err(Error::config("flexkd needs alpha > 0"));
            }
        }
        if self.method == Method::FtOnly && (self.weights.alpha != 0.0 || self.weights.beta != 0.0) {
            return Err(Error::config("ft_only must have alpha = beta = 0"));
        }
        if self.method == Method::VanillaKd && self.weights.alpha != 0.0 {
            return Err(Error::config("vanilla_kd has no feature term"));
        }
        Ok(())
    }
}

/// One line of the metric trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    pub loss_total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_feature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_logit: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_supervised: Option<f64>,
    pub lr: f64,
}

pub fn trace_to_jsonl(trace: &[TraceRecord]) -> String {
    let mut s = String::new();
    for r in trace {
        s.push_str(&serde_json::to_string(r).expect("trace record serializes"));
        s.push('\n');
    }
    s
}

pub fn trace_from_jsonl(text: &str) -> Result<Vec<TraceRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub student: Checkpoint,
    pub projector: Option<ProjectorHead>,
    pub trace: Vec<TraceRecord>,
}

/// Trains a fresh student under `plan`. The teacher only runs inference.
pub fn distill(plan: &DistillationPlan, train: &LabeledDataset) -> Result<DistillOutcome> {
    plan.validate()?;
    if train.is_empty() {
        return Err(Error::data("empty training set"));
    }
    let mut student = Model::init(plan.student_config.clone(), plan.seed)?;
    let d_t = plan.teacher.hidden_size();
    let d_s = student.hidden_size();
    let metric = plan.method.projector_metric();
    let mut head = match metric {
        Some(_) => Some(ProjectorHead::init(d_t, d_s, plan.seed.wrapping_add(0x9e37_79b9))?),
        None => None,
    };
    let mut sizes: Vec<usize> = student.params().iter().map(|p| p.value.numel()).collect();
    if let Some(h) = &head {
        sizes.push(h.weight.numel());
    }
    let mut opt = Optimizer::new(plan.train.optimizer, &sizes);
    let mut rng = shuffle_rng(plan.seed);
    let mut trace = Vec::new();
    let w = plan.weights;
    let needs_teacher = w.alpha > 0.0 || w.beta > 0.0;

    for _ in 0..plan.train.epochs {
        for idx in epoch_batches(train.len(), plan.train.batch_size, &mut rng) {
            let batch = train.batch(&idx)?;
            let mut tape = Tape::new();
            let out = student.forward(&mut tape, &batch.input, true)?;
            let mut parts = LossParts::default();
            if w.lambda > 0.0 {
                parts.supervised = Some(supervised_loss(&mut tape, &out, &batch.targets)?);
            }
            let mut head_var = None;
            if needs_teacher {
                let (t_logits, t_hidden, t_layout) = plan.teacher.infer(&batch.input)?;
                let t_h = valid_rows_tensor(t_hidden.last().expect("hidden layer"), &t_layout)?;
                if w.alpha > 0.0 {
                    let s_h = valid_rows_var(&mut tape, out.last_hidden, &out.layout)?;
                    parts.feature = Some(match (plan.method, metric, &head) {
                        (_, Some(m), Some(h)) => {
                            let hv = tape.param(h.weight.clone())?;
                            head_var = Some(hv);
                            projector_loss(&mut tape, &t_h, s_h, hv, m, w.centered)?
                        }
                        (Method::Flexkd, _, _) => flex_kd_loss(
                            &mut tape,
                            &t_h,
                            s_h,
                            plan.selection.as_ref().expect("validated"),
                            w.centered,
                        )?,
                        _ => return Err(Error::config(format!(
                            "method {} has no feature loss",
                            plan.method
                        ))),
                    });
                }
                if w.beta > 0.0 {
                    let t_l = valid_rows_tensor(&t_logits, &t_layout)?;
                    let s_l = valid_rows_var(&mut tape, out.logits, &out.layout)?;
                    parts.logit = Some(logit_kd_loss(&mut tape, &t_l, s_l, w.temperature, w.logit_mode)?);
                }
            }
            let loss = composite_loss(&mut tape, parts, &w)?;
            let total = tape.value(loss.total).item();
            let grads = tape.backward(loss.total)?;
            let zeros: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            let mut gs: Vec<&[f64]> = out
                .params
                .iter()
                .enumerate()
                .map(|(k, &p)| grads.get(p).unwrap_or(&zeros[k]))
                .collect();
            if let Some(hv) = head_var {
                gs.push(grads.get(hv).unwrap_or(&zeros[sizes.len() - 1]));
            } else if head.is_some() {
                gs.push(&zeros[sizes.len() - 1]);
            }
            let mut ps: Vec<&mut Tensor> =
                student.params_mut().iter_mut().map(|p| &mut p.value).collect();
            if let Some(h) = head.as_mut() {
                ps.push(&mut h.weight);
            }
            opt.step(&mut ps, &gs)?;
            trace.push(TraceRecord {
                step: opt.steps_taken() - 1,
                loss_total: total,
                loss_feature: loss.feature,
                loss_logit: loss.logit,
                loss_supervised: loss.supervised,
                lr: plan.train.optimizer.learning_rate,
            });
        }
    }
    let final_loss = trace.last().map(|r| r.loss_total);
    Ok(DistillOutcome {
        student: Checkpoint::from_model(
            &student,
            TrainingMetadata {
                seed: plan.seed,
                steps: opt.steps_taken(),
                final_loss,
                note: Some(format!("method={}", plan.method)),
            },
        ),
        projector: head,
        trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Accuracy,
    Nll,
}

const EVAL_CHUNK: usize = 256;

/// Accuracy (argmax, lowest class on ties) or mean negative log-likelihood
/// over every valid row.
pub fn evaluate(model: &Model, dataset: &LabeledDataset, metric: Metric) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::data("cannot evaluate on an empty dataset"));
    }
    let all: Vec<usize> = (0..dataset.len()).collect();
    let mut correct = 0usize;
    let mut nll = 0.0;
    let mut rows = 0usize;
    for chunk in all.chunks(EVAL_CHUNK) {
        let batch = dataset.batch(chunk)?;
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &batch.input, false)?;
        let logits = valid_rows_var(&mut tape, out.logits, &out.layout)?;
        let n = batch.targets.len();
        match metric {
            Metric::Accuracy => {
                let l = tape.value(logits);
                correct += (0..n).filter(|&r| argmax(l.row(r)) == batch.targets[r]).count();
            }
            Metric::Nll => {
                let ce = tape.softmax_cross_entropy(logits, &batch.targets)?;
                nll += tape.value(ce).item() * n as f64;
            }
        }
        rows += n;
    }
    Ok(match metric {
        Metric::Accuracy => correct as f64 / rows as f64,
        Metric::Nll => nll / rows as f64,
    })
}
