//! Task-relevant unit localization.
//!
//! Each teacher hidden unit is scored by the magnitude of the gradient of a
//! scalar model output with respect to that unit's activation, averaged over
//! a dataset. Units are ranked by score and the top `d_S` become the
//! distillation targets for a student of width `d_S`.

use std::cmp::Ordering;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Reduction, Tape};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{Model, RowLayout};

/// Which scalar of the model output is differentiated.
///
/// The choice is an interpretation: the scoring rule differentiates "the
/// model's prediction" without naming a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutputReduction {
    /// Cross-entropy of the labelled target (summed over positions for
    /// sequences).
    #[default]
    TaskLoss,
    /// The largest logit (per position for sequences).
    PredictedLogit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    #[default]
    LastLayer,
}

/// Aggregated importance scores with their ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceProfile {
    pub d_t: usize,
    pub num_samples: usize,
    pub scores: Vec<f64>,
    pub ranked_indices: Vec<usize>,
    pub scope: Scope,
    pub output_reduction: OutputReduction,
    pub calibration_fraction: f64,
    pub sample_seed: u64,
    /// Checksum of the teacher the scores were computed from.
    pub teacher_checksum: String,
}

impl ImportanceProfile {
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p: Self = crate::io::read_json(path)?;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scores.len() != self.d_t || self.ranked_indices.len() != self.d_t {
            return Err(Error::data("profile lengths disagree with d_t"));
        }
        if self.scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::data("profile scores must be finite and non-negative"));
        }
        if rank_neurons(&self.scores)? != self.ranked_indices {
            return Err(Error::data("ranked indices do not match scores"));
        }
        Ok(())
    }

    /// Fails unless the profile was computed from `teacher`.
    pub fn check_teacher(&self, teacher: &Model) -> Result<()> {
        let actual = teacher.checksum();
        if actual != self.teacher_checksum {
            return Err(Error::config(format!(
                "profile was computed for teacher {} but the teacher checkpoint is {}",
                self.teacher_checksum, actual
            )));
        }
        if teacher.hidden_size() != self.d_t {
            return Err(Error::config("profile width differs from teacher hidden size"));
        }
        Ok(())
    }
}

/// Teacher units chosen as distillation targets, in rank order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionSet {
    pub indices: Vec<usize>,
}

impl SelectionSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// `E = [0, 1, ..., d-1]`.
    pub fn identity(d: usize) -> Self {
        Self {
            indices: (0..d).collect(),
        }
    }
}

/// `|d F / d h|` for one sample, `F` chosen by `reduction`. For sequences the
/// per-position magnitudes are averaged over non-padding positions.
pub fn per_sample_importance(
    teacher: &Model,
    dataset: &LabeledDataset,
    index: usize,
    reduction: OutputReduction,
) -> Result<Vec<f64>> {
    let batch = dataset.batch(&[index])?;
    let mut tape = Tape::new();
    let out = teacher.forward(&mut tape, &batch.input, false)?;
    let total_rows = tape.value(out.logits).rows();
    let valid = out.layout.valid_rows(total_rows);
    let logits = match out.layout {
        RowLayout::Samples => out.logits,
        RowLayout::Positions { .. } => tape.gather_rows(out.logits, &valid)?,
    };
    let output = match reduction {
        OutputReduction::TaskLoss => {
            let mean = tape.softmax_cross_entropy(logits, &batch.targets)?;
            // sum over positions, so each position's gradient is its own loss's
            tape.scale(mean, valid.len() as f64)?
        }
        OutputReduction::PredictedLogit => {
            let best = tape.reduce(Reduction::Max, logits, Some(1))?;
            tape.sum(best)?
        }
    };
    let grad = tape.grad_wrt(output, out.last_hidden)?;
    if !grad.all_finite() {
        return Err(Error::numeric("non-finite attribution gradient"));
    }
    let d = grad.cols();
    let mut g = vec![0.0; d];
    for &r in &valid {
        for (gi, v) in g.iter_mut().zip(grad.row(r)) {
            *gi += v.abs();
        }
    }
    if valid.len() > 1 {
        let n = valid.len() as f64;
        g.iter_mut().for_each(|v| *v /= n);
    }
    Ok(g)
}

/// Indices sorted by descending score, ascending index on ties.
pub fn rank_neurons(scores: &[f64]) -> Result<Vec<usize>> {
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::numeric(format!("score {i} is NaN")));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    Ok(idx)
}

/// Settings for [`compute_profile`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributionOptions {
    pub output_reduction: OutputReduction,
    /// Fraction of the dataset used for scoring, in `(0, 1]`.
    pub calibration_fraction: f64,
    pub sample_seed: u64,
}

impl Default for AttributionOptions {
    fn default() -> Self {
        Self {
            output_reduction: OutputReduction::TaskLoss,
            calibration_fraction: 1.0,
            sample_seed: 0,
        }
    }
}

/// Dataset indices used for a calibration fraction, in dataset order.
pub fn calibration_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!(
            "calibration fraction must be in (0, 1], got {fraction}"
        )));
    }
    if n == 0 {
        return Err(Error::data("empty attribution dataset"));
    }
    if fraction == 1.0 {
        return Ok((0..n).collect());
    }
    let k = ((n as f64 * fraction).round() as usize).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Mean importance over `indices`, accumulated in the given order.
pub fn aggregate_importance(
    teacher: &Model,
    dataset: &LabeledDataset,
    indices: &[usize],
    reduction: OutputReduction,
) -> Result<Vec<f64>> {
    if indices.is_empty() {
        return Err(Error::data("cannot aggregate importance over an empty dataset"));
    }
    let mut total = vec![0.0; teacher.hidden_size()];
    for &j in indices {
        let g = per_sample_importance(teacher, dataset, j, reduction)?;
        for (t, v) in total.iter_mut().zip(g) {
            *t += v;
        }
    }
    let n = indices.len() as f64;
    Ok(total.into_iter().map(|t| t / n).collect())
}

/// Scores, ranks and packages an importance profile.
pub fn compute_profile(
    teacher: &Model,
    dataset: &LabeledDataset,
    opts: &AttributionOptions,
) -> Result<ImportanceProfile> {
    let indices = calibration_indices(dataset.len(), opts.calibration_fraction, opts.sample_seed)?;
    let scores = aggregate_importance(teacher, dataset, &indices, opts.output_reduction)?;
    let ranked_indices = rank_neurons(&scores)?;
    Ok(ImportanceProfile {
        d_t: scores.len(),
        num_samples: indices.len(),
        scores,
        ranked_indices,
        scope: Scope::LastLayer,
        output_reduction: opts.output_reduction,
        calibration_fraction: opts.calibration_fraction,
        sample_seed: opts.sample_seed,
        teacher_checksum: teacher.checksum(),
    })
}

/// First `d_s` entries of the ranking.
pub fn select_top(profile: &ImportanceProfile, d_s: usize) -> Result<SelectionSet> {
    if d_s == 0 || d_s > profile.d_t {
        return Err(Error::config(format!(
            "cannot select {d_s} units from a layer of width {}",
            profile.d_t
        )));
    }
    Ok(SelectionSet {
        indices: profile.ranked_indices[..d_s].to_vec(),
    })
}

/// Percentage of small activation magnitudes per layer and threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityTable {
    pub thresholds: Vec<f64>,
    pub num_samples: usize,
    /// `percent[layer][k]`: share of entries with `|a| < thresholds[k]`,
    /// averaged over samples.
    pub percent: Vec<Vec<f64>>,
}

impl SparsityTable {
    pub fn to_text(&self) -> String {
        let mut s = String::from("layer");
        for t in &self.thresholds {
            s.push_str(&format!("\t|a|<{t}"));
        }
        s.push('\n');
        for (l, row) in self.percent.iter().enumerate() {
            s.push_str(&format!("{l}"));
            for p in row {
                s.push_str(&format!("\t{p:.2}%"));
            }
            s.push('\n');
        }
        s
    }
}

pub fn activation_sparsity_profile(
    model: &Model,
    dataset: &LabeledDataset,
    thresholds: &[f64],
) -> Result<SparsityTable> {
    if dataset.is_empty() {
        return Err(Error::data("empty dataset"));
    }
    if thresholds.is_empty() || thresholds.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::config("thresholds must be positive"));
    }
    let layers = model.config().num_hidden_layers();
    let mut sums = vec![vec![0.0; thresholds.len()]; layers];
    const CHUNK: usize = 128;
    let all: Vec<usize> = (0..dataset.len()).collect();
    for chunk in all.chunks(CHUNK) {
        let batch = dataset.batch(chunk)?;
        let (_, stack, layout) = model.infer(&batch.input)?;
        for (l, act) in stack.iter().enumerate() {
            let d = act.cols();
            let per_sample: Vec<Vec<usize>> = match &layout {
                RowLayout::Samples => (0..chunk.len()).map(|r| vec![r]).collect(),
                RowLayout::Positions { seq_len, valid_rows } => {
                    let mut rows = vec![Vec::new(); chunk.len()];
                    for &r in valid_rows {
                        rows[r / seq_len].push(r);
                    }
                    rows
                }
            };
            for rows in per_sample {
                let entries = (rows.len() * d) as f64;
                for (k, &tau) in thresholds.iter().enumerate() {
                    let small = rows
                        .iter()
                        .flat_map(|&r| act.row(r))
                        .filter(|a| a.abs() < tau)
                        .count();
                    sums[l][k] += 100.0 * small as f64 / entries;
                }
            }
        }
    }
    let n = dataset.len() as f64;
    Ok(SparsityTable {
        thresholds: thresholds.to_vec(),
        num_samples: dataset.len(),
        percent: sums
            .into_iter()
            .map(|row| row.into_iter().map(|s| s / n).collect())
            .collect(),
    })
}
