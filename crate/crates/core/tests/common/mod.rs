#![allow(dead_code)]

pub mod grad_cases;

use std::path::{Path, PathBuf};

use flexkd::attribution::OutputReduction;
use flexkd::autograd::{Tape, Var};
use flexkd::data::argmax;
use flexkd::model::Model;
use flexkd::harness::ExperimentConfig;
use flexkd::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values in `(-hi, -lo] ∪ [lo, hi)`: away from the kinks of |x| and relu.
pub fn random_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(lo..hi);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

pub const REL_FLOOR: f64 = 1e-3;

/// Builds `f(inputs)`, contracts it with fixed random weights into a scalar and
/// compares the tape gradient of every input with central differences.
/// Returns the worst relative error.
pub fn fd_check<F>(inputs: &[Tensor], seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let scalar = |vals: &[Tensor], weights: Option<&Tensor>| -> (Tape, Vec<Var>, Var, Tensor) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone()).unwrap()).collect();
        let out = f(&mut tape, &vars).unwrap();
        let shape = tape.value(out).shape().to_vec();
        let w = match weights {
            Some(w) => w.clone(),
            None => random_tensor(&mut rng(seed ^ 0xabcd), &shape, -1.0, 1.0),
        };
        let wv = tape.constant(w.clone()).unwrap();
        let prod = tape.mul(out, wv).unwrap();
        let loss = tape.sum(prod).unwrap();
        (tape, vars, loss, w)
    };
    let (tape, vars, loss, w) = scalar(inputs, None);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k], &tape).unwrap();
        for i in 0..input.numel() {
            let eval = |delta: f64| {
                let mut vals = inputs.to_vec();
                vals[k].data_mut()[i] += delta;
                let (t, _, l, _) = scalar(&vals, Some(&w));
                t.value(l).item()
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[i], numeric, REL_FLOOR));
        }
    }
    worst
}

pub fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

/// The shipped planted-task config, writing into `out`.
pub fn planted_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::load(&configs_dir().join("planted.toml")).unwrap();
    cfg.out_dir = out.to_path_buf();
    cfg
}

/// A config small enough for sub-second pipeline runs.
pub const TINY_CONFIG: &str = r#"
version = 1
methods = ["ft_only", "vanilla_kd", "projector_mse", "flexkd"]
seeds = [1, 2]

[dataset]
kind = "planted"
d_input = 6
num_relevant = 2
noise_scale = 0.5
num_classes = 2
seed = 3
train_size = 120
test_size = 60

[teacher.model]
family = "mlp"
input_dim = 6
hidden_dims = [12]
num_classes = 2
activation = "tanh"

[teacher.train]
epochs = 3

[student.model]
family = "mlp"
input_dim = 6
hidden_dims = [4]
num_classes = 2
activation = "tanh"

[student.train]
epochs = 2
"#;

pub fn tiny_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml_str(TINY_CONFIG, Path::new(".")).unwrap();
    cfg.out_dir = out.to_path_buf();
    cfg
}

pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let inter = a.iter().filter(|x| b.contains(x)).count() as f64;
    let union = (a.len() + b.len()) as f64 - inter;
    if union == 0.0 {
        1.0
    } else {
        inter / union
    }
}

/// Output scalar as a function of the last hidden activation only.
pub fn head_output(model: &Model, h: &[f64], label: usize, reduction: OutputReduction) -> f64 {
    let w = model.param("head.weight").unwrap();
    let b = model.param("head.bias").unwrap();
    let logits: Vec<f64> = (0..w.cols())
        .map(|c| b.data()[c] + h.iter().enumerate().map(|(i, v)| v * w.at(i, c)).sum::<f64>())
        .collect();
    match reduction {
        OutputReduction::TaskLoss => {
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
            lse - logits[label]
        }
        OutputReduction::PredictedLogit => logits[argmax(&logits)],
    }
}


/// Sum over pairs of `(1 - cos(t[:, E[m]], s[:, m]))^2`, written out directly.
pub fn brute_force(t: &Tensor, s: &Tensor, e: &[usize]) -> f64 {
    let n = t.rows();
    let mut total = 0.0;
    for (m, &j) in e.iter().enumerate() {
        let (mut ts, mut tt, mut ss) = (0.0, 0.0, 0.0);
        for b in 0..n {
            ts += t.at(b, j) * s.at(b, m);
            tt += t.at(b, j) * t.at(b, j);
            ss += s.at(b, m) * s.at(b, m);
        }
        let c = ts / (tt.sqrt() * ss.sqrt());
        total += (1.0 - c) * (1.0 - c);
    }
    total
}
