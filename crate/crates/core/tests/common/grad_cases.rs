use flexkd::autograd::{Binary, Reduction, Tape, Unary, Var};
use flexkd::losses::{logit_kd_loss, projector_loss, LogitMode, ProjectorMetric};
use flexkd::{Result, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{random_away_from_zero, random_tensor};

pub type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One random instance of an operation: inputs and the graph to build.
pub struct Case {
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(2..6), rng.gen_range(2..6))
}

fn mat(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Tensor {
    random_tensor(rng, &[m, n], -1.5, 1.5)
}

fn unary(op: Unary) -> impl Fn(&mut ChaCha8Rng) -> Case {
    move |rng| {
        let (m, n) = dims(rng);
        let x = match op {
            Unary::Abs | Unary::Relu => random_away_from_zero(rng, &[m, n], 0.05, 2.0),
            Unary::Sqrt => random_tensor(rng, &[m, n], 0.2, 3.0),
            _ => mat(rng, m, n),
        };
        Case {
            inputs: vec![x],
            build: Box::new(move |t, v| t.unary(op, v[0])),
        }
    }
}

fn binary(op: Binary, scalar_rhs: bool) -> impl Fn(&mut ChaCha8Rng) -> Case {
    move |rng| {
        let (m, n) = dims(rng);
        let b = if scalar_rhs {
            Tensor::scalar(rng.gen_range(-2.0..2.0))
        } else {
            mat(rng, m, n)
        };
        Case {
            inputs: vec![mat(rng, m, n), b],
            build: Box::new(move |t, v| t.binary(op, v[0], v[1])),
        }
    }
}

fn reduce(op: Reduction, axis: Option<usize>) -> impl Fn(&mut ChaCha8Rng) -> Case {
    move |rng| {
        let (m, n) = dims(rng);
        // distinct values keep max differentiable under the probe step
        let mut vals: Vec<f64> = (0..m * n).map(|k| 0.37 * k as f64 - 1.0).collect();
        vals.shuffle(rng);
        let x = Tensor::new(vec![m, n], vals).unwrap();
        Case {
            inputs: vec![x],
            build: Box::new(move |t, v| t.reduce(op, v[0], axis)),
        }
    }
}

fn targets(rng: &mut ChaCha8Rng, m: usize, classes: usize) -> Vec<usize> {
    (0..m).map(|_| rng.gen_range(0..classes)).collect()
}

fn probs(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Tensor {
    mat(rng, m, n)
}

/// Every differentiable operation, keyed by name.
pub fn all() -> Vec<(&'static str, Box<dyn Fn(&mut ChaCha8Rng) -> Case>)> {
    let mut v: Vec<(&'static str, Box<dyn Fn(&mut ChaCha8Rng) -> Case>)> = vec![
        ("add", Box::new(binary(Binary::Add, false))),
        ("sub", Box::new(binary(Binary::Sub, false))),
        ("mul", Box::new(binary(Binary::Mul, false))),
        ("add_scalar", Box::new(binary(Binary::Add, true))),
        ("mul_scalar", Box::new(binary(Binary::Mul, true))),
        ("abs", Box::new(unary(Unary::Abs))),
        ("tanh", Box::new(unary(Unary::Tanh))),
        ("gelu", Box::new(unary(Unary::Gelu))),
        ("relu", Box::new(unary(Unary::Relu))),
        ("exp", Box::new(unary(Unary::Exp))),
        ("square", Box::new(unary(Unary::Square))),
        ("sqrt", Box::new(unary(Unary::Sqrt))),
        ("sum_all", Box::new(reduce(Reduction::Sum, None))),
        ("sum_rows", Box::new(reduce(Reduction::Sum, Some(0)))),
        ("mean_cols", Box::new(reduce(Reduction::Mean, Some(1)))),
        ("max_all", Box::new(reduce(Reduction::Max, None))),
        ("max_cols", Box::new(reduce(Reduction::Max, Some(1)))),
    ];
    v.push((
        "scale",
        Box::new(|rng: &mut ChaCha8Rng| {
            let (m, n) = dims(rng);
            let c = rng.gen_range(-3.0..3.0);
            Case {
                inputs: vec![mat(rng, m, n)],
                build: Box::new(move |t, v| t.scale(v[0], c)),
            }
        }),
    ));
    v.push((
        "matmul",
        Box::new(|rng: &mut ChaCha8Rng| {
            let (m, k) = dims(rng);
            let n = rng.gen_range(2..6);
            Case {
                inputs: vec![mat(rng, m, k), mat(rng, k, n)],
                build: Box::new(|t, v| t.matmul(v[0], v[1])),
            }
        }),
    ));
    v.push((
        "transpose",
        Box::new(|rng: &mut ChaCha8Rng| {
            let (m, n) = dims(rng);
            Case {
                inputs: vec![mat(rng, m, n)],
                build: Box::new(|t, v| t.transpose(v[0])),
            }
        }),
    ));
    v.push((
        "reshape",
        Box::new(|rng: &mut ChaCha8Rng| {
            let (m, n) = dims(rng);
            Case {
                inputs: vec![mat(rng, m, n)],
                build: Box::new(move |t, v| t.reshape(v[0], vec![n, m])),
            }
        }),
    ));
    v.push((
        "bias_add",
        Box::new(|rng: &mut ChaCha8Rng| {
            let (m, n) = dims(rng);
            Case {
                inputs: vec![mat(rng, m, n), random_tensor(rng, &[n], -1.0, 1.0)],
                build: Box::new(|t, v| t.bias_add(v[0], v[1])),
            }
        }),
    ));
    v.push((
        "log_softmax",
        Box::new(|rng: &mut ChaCha8Rng| {
            let (m, n) = dims(rng);
            Case {
                inputs: vec![mat(rng, m, n)],
                build: Box::new(|t, v| t.log_softmax(v[0])),
            }
        }),
    ));
    v.push((
        "softmax_cross_entropy",
        Box::new(|rng: &mut ChaCha8Rng| {
            let (m, n) = dims(rng);
            let y = targets(rng, m, n);
            Case {
                inputs: vec![mat(rng, m, n)],
                build: Box::new(move |t, v| t.softmax_cross_entropy(v[0], &y)),
            }
        }),
    ));
    v.push((
        "gather_rows",
        Box::new(|rng: &mut ChaCha8Rng| {
            let (m, n) = dims(rng);
            let rows: Vec<usize> = (0..rng.gen_range(1..7)).map(|_| rng.gen_range(0..m)).collect();
            Case {
                inputs: vec![mat(rng, m, n)],
                build: Box::new(move |t, v| t.gather_rows(v[0], &rows)),
            }
        }),
    ));
    v.push((
        "select_columns",
        Box::new(|rng: &mut ChaCha8Rng| {
            let (m, n) = dims(rng);
            let cols: Vec<usize> = (0..rng.gen_range(1..7)).map(|_| rng.gen_range(0..n)).collect();
            Case {
                inputs: vec![mat(rng, m, n)],
                build: Box::new(move |t, v| t.select_columns(v[0], &cols)),
            }
        }),
    ));
    v.push((
        "causal_cummean",
        Box::new(|rng: &mut ChaCha8Rng| {
            let seq = rng.gen_range(2..5);
            let blocks = rng.gen_range(1..4);
            let n = rng.gen_range(2..5);
            Case {
                inputs: vec![mat(rng, seq * blocks, n)],
                build: Box::new(move |t, v| t.causal_cummean(v[0], seq)),
            }
        }),
    ));
    for centered in [false, true] {
        v.push((
            if centered {
                "correlation_loss_centered"
            } else {
                "correlation_loss"
            },
            Box::new(move |rng: &mut ChaCha8Rng| {
                let n = rng.gen_range(3..9);
                let d_t = rng.gen_range(3..8);
                let d_s = rng.gen_range(1..=d_t);
                let teacher = mat(rng, n, d_t);
                let mut pairs: Vec<usize> = (0..d_t).collect();
                pairs.shuffle(rng);
                pairs.truncate(d_s);
                Case {
                    inputs: vec![mat(rng, n, d_s)],
                    build: Box::new(move |t, v| t.correlation_loss(&teacher, v[0], &pairs, centered)),
                }
            }),
        ));
    }
    for mode in [LogitMode::ForwardKl, LogitMode::ReverseKl] {
        v.push((
            if mode == LogitMode::ForwardKl {
                "logit_kd_forward"
            } else {
                "logit_kd_reverse"
            },
            Box::new(move |rng: &mut ChaCha8Rng| {
                let (m, n) = dims(rng);
                let teacher = probs(rng, m, n);
                let temp = rng.gen_range(0.5..4.0);
                Case {
                    inputs: vec![mat(rng, m, n)],
                    build: Box::new(move |t, v| logit_kd_loss(t, &teacher, v[0], temp, mode)),
                }
            }),
        ));
    }
    for metric in [ProjectorMetric::Mse, ProjectorMetric::Correlation] {
        v.push((
            if metric == ProjectorMetric::Mse {
                "projector_mse"
            } else {
                "projector_corr"
            },
            Box::new(move |rng: &mut ChaCha8Rng| {
                let n = rng.gen_range(3..7);
                let d_t = rng.gen_range(3..6);
                let d_s = rng.gen_range(1..=d_t);
                let teacher = mat(rng, n, d_t);
                Case {
                    inputs: vec![mat(rng, n, d_s), mat(rng, d_t, d_s)],
                    build: Box::new(move |t, v| projector_loss(t, &teacher, v[0], v[1], metric, false)),
                }
            }),
        ));
    }
    v
}
