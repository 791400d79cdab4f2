//! Training objectives: correlation-based feature distillation, logit
//! distillation, the linear projector baseline, and their weighted sum.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::SelectionSet;
use crate::autograd::{cosine_parts, log_softmax_rows, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Un-centered cosine between two batch columns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossCorrelation {
    pub value: f64,
    /// Either column had zero norm; `value` is then 0.
    pub degenerate: bool,
}

pub fn cross_correlation(teacher_col: &[f64], student_col: &[f64]) -> Result<CrossCorrelation> {
    if teacher_col.is_empty() || teacher_col.len() != student_col.len() {
        return Err(Error::dim(format!(
            "columns of length {} and {}",
            teacher_col.len(),
            student_col.len()
        )));
    }
    let (value, tn, sn) = cosine_parts(teacher_col, student_col);
    Ok(CrossCorrelation {
        value,
        degenerate: tn == 0.0 || sn == 0.0,
    })
}

/// `sum_m (1 - C_m)^2`, pairing teacher column `selection[m]` with student
/// column `m`. Rows are samples (or flattened non-padding positions). The
/// teacher side is constant.
pub fn flex_kd_loss(
    tape: &mut Tape,
    teacher_hidden: &Tensor,
    student_hidden: Var,
    selection: &SelectionSet,
    centered: bool,
) -> Result<Var> {
    tape.correlation_loss(teacher_hidden, student_hidden, &selection.indices, centered)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LogitMode {
    /// `KL(teacher || student)`.
    #[default]
    ForwardKl,
    /// `KL(student || teacher)`.
    ReverseKl,
    None,
}

/// Temperature-softened KL between teacher and student distributions, scaled
/// by `T^2` and averaged over rows. Only the student receives gradient.
pub fn logit_kd_loss(
    tape: &mut Tape,
    teacher_logits: &Tensor,
    student_logits: Var,
    temperature: f64,
    mode: LogitMode,
) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::config("temperature must be positive"));
    }
    let s_shape = tape.try_value(student_logits)?.shape().to_vec();
    if s_shape != teacher_logits.shape() {
        return Err(Error::dim(format!(
            "teacher logits {:?} vs student logits {s_shape:?}",
            teacher_logits.shape()
        )));
    }
    let (rows, cols) = teacher_logits.require_matrix("logit_kd_loss")?;
    let t_logp = Tensor::from_parts(
        vec![rows, cols],
        log_softmax_rows(&teacher_logits.map(|v| v / temperature).into_data(), rows, cols),
    );
    let scaled = tape.scale(student_logits, 1.0 / temperature)?;
    let s_logp = tape.log_softmax(scaled)?;
    let factor = temperature * temperature / rows as f64;
    let kl_sum = match mode {
        LogitMode::ForwardKl => {
            let p = t_logp.map(f64::exp);
            let entropy_term: f64 = p.data().iter().zip(t_logp.data()).map(|(p, l)| p * l).sum();
            let p = tape.constant(p)?;
            let cross = tape.mul(p, s_logp)?;
            let cross = tape.sum(cross)?;
            let c = tape.constant(Tensor::scalar(entropy_term))?;
            tape.sub(c, cross)?
        }
        LogitMode::ReverseKl => {
            let q = tape.exp(s_logp)?;
            let t = tape.constant(t_logp)?;
            let diff = tape.sub(s_logp, t)?;
            let prod = tape.mul(q, diff)?;
            tape.sum(prod)?
        }
        LogitMode::None => return Err(Error::config("logit mode 'none' has no loss")),
    };
    tape.scale(kl_sum, factor)
}

/// Trainable `d_T x d_S` map from student features into teacher space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectorHead {
    pub weight: Tensor,
}

impl ProjectorHead {
    /// Same scaled-uniform scheme as model weights (`fan_in = d_S`).
    pub fn init(d_t: usize, d_s: usize, seed: u64) -> Result<Self> {
        if d_t == 0 || d_s == 0 {
            return Err(Error::config("projector dimensions must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (d_s as f64).sqrt();
        let data = (0..d_t * d_s).map(|_| rng.gen_range(-bound..bound)).collect();
        Ok(Self {
            weight: Tensor::new(vec![d_t, d_s], data)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectorMetric {
    Mse,
    Correlation,
}

/// Projects the student into teacher space (`student · Wᵀ`) and scores the
/// result against the teacher. Gradients reach both the student and `head`.
pub fn projector_loss(
    tape: &mut Tape,
    teacher_hidden: &Tensor,
    student_hidden: Var,
    head: Var,
    metric: ProjectorMetric,
    centered: bool,
) -> Result<Var> {
    let (n, d_s) = tape.try_value(student_hidden)?.require_matrix("projector student")?;
    let (tn, d_t) = teacher_hidden.require_matrix("projector teacher")?;
    let w_shape = tape.try_value(head)?.shape().to_vec();
    if w_shape != [d_t, d_s] || tn != n {
        return Err(Error::config(format!(
            "projector head {w_shape:?} cannot map student {n}x{d_s} onto teacher {tn}x{d_t}"
        )));
    }
    let wt = tape.transpose(head)?;
    let projected = tape.matmul(student_hidden, wt)?;
    match metric {
        ProjectorMetric::Mse => {
            let t = tape.constant(teacher_hidden.clone())?;
            let diff = tape.sub(projected, t)?;
            let sq = tape.square(diff)?;
            tape.mean(sq)
        }
        ProjectorMetric::Correlation => {
            let all: Vec<usize> = (0..d_t).collect();
            tape.correlation_loss(teacher_hidden, projected, &all, centered)
        }
    }
}

/// Weights of the final objective
/// `alpha * feature + beta * logit + lambda * supervised`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub logit_mode: LogitMode,
    /// Mean-subtract columns before correlating (ablation only).
    #[serde(default)]
    pub centered: bool,
}

fn default_temperature() -> f64 {
    1.0
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.alpha, self.beta, self.lambda];
        if ws.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::config("loss weights must be finite and >= 0"));
        }
        if ws.iter().sum::<f64>() <= 0.0 {
            return Err(Error::config("at least one loss weight must be positive"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        if self.beta > 0.0 && self.logit_mode == LogitMode::None {
            return Err(Error::config("beta > 0 needs a logit mode"));
        }
        Ok(())
    }

    /// Classification regime: every distillation term and the hard loss at 0.5.
    pub fn classification() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.0,
            lambda: 0.5,
            temperature: 1.0,
            logit_mode: LogitMode::None,
            centered: false,
        }
    }

    /// Generation regime: small feature weight plus reverse-KL logit loss.
    pub fn generation() -> Self {
        Self {
            alpha: 0.05,
            beta: 1.0,
            lambda: 1.0,
            temperature: 1.0,
            logit_mode: LogitMode::ReverseKl,
            centered: false,
        }
    }

    pub fn supervised_only() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            lambda: 1.0,
            temperature: 1.0,
            logit_mode: LogitMode::None,
            centered: false,
        }
    }
}

/// Unweighted loss terms available for one step.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub feature: Option<Var>,
    pub logit: Option<Var>,
    pub supervised: Option<Var>,
}

/// Weighted total plus the raw value of every term that took part.
#[derive(Debug, Clone, Copy)]
pub struct CompositeLoss {
    pub total: Var,
    pub feature: Option<f64>,
    pub logit: Option<f64>,
    pub supervised: Option<f64>,
}

pub fn composite_loss(tape: &mut Tape, parts: LossParts, weights: &LossWeights) -> Result<CompositeLoss> {
    weights.validate()?;
    let terms = [
        ("feature", parts.feature, weights.alpha),
        ("logit", parts.logit, weights.beta),
        ("supervised", parts.supervised, weights.lambda),
    ];
    let mut total: Option<Var> = None;
    let mut raw = [None; 3];
    for (k, (name, part, w)) in terms.into_iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let part = part.ok_or_else(|| {
            Error::config(format!("{name} weight is {w} but no {name} loss was provided"))
        })?;
        raw[k] = Some(tape.try_value(part)?.item());
        let weighted = tape.scale(part, w)?;
        total = Some(match total {
            None => weighted,
            Some(t) => tape.add(t, weighted)?,
        });
    }
    Ok(CompositeLoss {
        total: total.expect("validated: some weight is positive"),
        feature: raw[0],
        logit: raw[1],
        supervised: raw[2],
    })
}
