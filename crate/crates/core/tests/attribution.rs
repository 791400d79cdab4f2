mod common;

use common::rng;
use flexkd::attribution::{
    activation_sparsity_profile, calibration_indices, compute_profile, per_sample_importance,
    rank_neurons, select_top, AttributionOptions, OutputReduction,
};
use flexkd::data::{PlantedRelevanceSpec, SeqRule, SeqTaskSpec};
use flexkd::model::{Activation, BatchInput, MlpConfig, Model, ModelConfig, TinySeqConfig};
use rand::Rng;

fn teacher(d_input: usize, d_t: usize, classes: usize, seed: u64) -> Model {
    Model::init(
        ModelConfig::Mlp(MlpConfig {
            input_dim: d_input,
            hidden_dims: vec![12, d_t],
            num_classes: classes,
            activation: Activation::Gelu,
        }),
        seed,
    )
    .unwrap()
}

#[test]
fn importance_matches_hidden_perturbation() {
    let task = PlantedRelevanceSpec {
        d_input: 5,
        num_relevant: 3,
        noise_scale: 1.0,
        num_classes: 3,
        seed: 4,
    }
    .generate(12, 0, 4)
    .unwrap();
    let model = teacher(5, 16, 3, 21);
    let ds = &task.splits.train;
    for reduction in [OutputReduction::TaskLoss, OutputReduction::PredictedLogit] {
        for j in 0..ds.len() {
            let g = per_sample_importance(&model, ds, j, reduction).unwrap();
            let batch = ds.batch(&[j]).unwrap();
            let (_, stack, _) = model.infer(&batch.input).unwrap();
            let h = stack.last().unwrap().row(0).to_vec();
            for i in 0..16 {
                let f = |d: f64| {
                    let mut hp = h.clone();
                    hp[i] += d;
                    common::head_output(&model, &hp, batch.targets[0], reduction)
                };
                let numeric = ((f(1e-5) - f(-1e-5)) / 2e-5).abs();
                let err = (g[i] - numeric).abs() / g[i].max(numeric).max(1e-3);
                assert!(err < 1e-4, "{reduction:?} sample {j} unit {i}: {} vs {numeric}", g[i]);
            }
        }
    }
}

#[test]
fn sequence_importance_averages_valid_positions() {
    let cfg = TinySeqConfig {
        vocab_size: 4,
        embed_dim: 3,
        num_layers: 1,
        hidden_dim: 5,
        context_len: 6,
        num_classes: 2,
        activation: Activation::Tanh,
    };
    let model = Model::init(ModelConfig::Seq(cfg), 2).unwrap();
    let splits = SeqTaskSpec {
        vocab_size: 4,
        context_len: 6,
        rule: SeqRule::ParityOfMarker,
        seed: 1,
    }
    .generate(4, 0, 2)
    .unwrap();
    let ds = &splits.train;
    let g = per_sample_importance(&model, ds, 0, OutputReduction::TaskLoss).unwrap();
    let batch = ds.batch(&[0]).unwrap();
    let tokens = match &batch.input {
        BatchInput::Tokens(t) => t[0].clone(),
        _ => unreachable!(),
    };
    let (_, stack, _) = model.infer(&batch.input).unwrap();
    let h = stack.last().unwrap();
    let mut want = vec![0.0; 5];
    for p in 0..tokens.len() {
        for i in 0..5 {
            let f = |d: f64| {
                let mut hp = h.row(p).to_vec();
                hp[i] += d;
                common::head_output(&model, &hp, batch.targets[p], OutputReduction::TaskLoss)
            };
            want[i] += ((f(1e-5) - f(-1e-5)) / 2e-5).abs() / tokens.len() as f64;
        }
    }
    for i in 0..5 {
        assert!((g[i] - want[i]).abs() < 1e-8, "unit {i}: {} vs {}", g[i], want[i]);
    }
}

#[test]
fn ranking_is_descending_with_index_tie_break() {
    assert_eq!(rank_neurons(&[0.2, 0.9, 0.5]).unwrap(), vec![1, 2, 0]);
    assert_eq!(rank_neurons(&[1.0, 1.0, 1.0]).unwrap(), vec![0, 1, 2]);
    assert_eq!(rank_neurons(&[0.0, 3.0, 3.0, 1.0]).unwrap(), vec![1, 2, 3, 0]);
    assert_eq!(rank_neurons(&[0.1, f64::NAN]).unwrap_err().exit_code(), 4);
}

#[test]
fn rank_invariant_under_monotone_maps_and_selection_nests() {
    let mut r = rng(3);
    for _ in 0..100 {
        let d = r.gen_range(1..20);
        let s: Vec<f64> = (0..d).map(|_| r.gen_range(0.0..2.0)).collect();
        let base = rank_neurons(&s).unwrap();
        for map in [|x: f64| x.exp(), |x: f64| 3.0 * x + 1.0, |x: f64| x.powi(3)] {
            let t: Vec<f64> = s.iter().map(|&x| map(x)).collect();
            assert_eq!(rank_neurons(&t).unwrap(), base);
        }
    }
}

#[test]
fn calibration_subset_is_sorted_seeded_and_sized() {
    let a = calibration_indices(2000, 0.05, 9).unwrap();
    assert_eq!(a.len(), 100);
    assert!(a.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(a, calibration_indices(2000, 0.05, 9).unwrap());
    assert_ne!(a, calibration_indices(2000, 0.05, 10).unwrap());
    assert_eq!(calibration_indices(10, 1.0, 0).unwrap(), (0..10).collect::<Vec<_>>());
    assert_eq!(calibration_indices(10, 0.0, 0).unwrap_err().exit_code(), 2);
}

#[test]
fn profile_binds_to_its_teacher() {
    let task = PlantedRelevanceSpec {
        d_input: 4,
        num_relevant: 2,
        noise_scale: 1.0,
        num_classes: 2,
        seed: 1,
    }
    .generate(20, 0, 5)
    .unwrap();
    let model = teacher(4, 6, 2, 1);
    let p = compute_profile(&model, &task.splits.train, &AttributionOptions::default()).unwrap();
    assert_eq!(p.scores.len(), 6);
    assert_eq!(p.num_samples, 20);
    p.check_teacher(&model).unwrap();
    let other = teacher(4, 6, 2, 2);
    assert_eq!(p.check_teacher(&other).unwrap_err().exit_code(), 2);
    let sel = select_top(&p, 3).unwrap();
    assert_eq!(sel.indices, p.ranked_indices[..3]);
    assert!(select_top(&p, 7).is_err());
    assert!(select_top(&p, 0).is_err());
}

#[test]
fn sparsity_matches_recount() {
    let mut r = rng(8);
    let model = teacher(3, 10, 2, 5);
    let x = common::random_tensor(&mut r, &[37, 3], -3.0, 3.0);
    let task = flexkd::data::LabeledDataset::new(
        flexkd::data::Inputs::Features(x.clone()),
        flexkd::data::Targets::Classes(vec![0; 37]),
        2,
        flexkd::data::Split::Train,
        "test",
    )
    .unwrap();
    let th = [0.1, 0.5, 1.0];
    let table = activation_sparsity_profile(&model, &task, &th).unwrap();
    let stack = model.hidden_layer_stack(&BatchInput::Features(x)).unwrap();
    for (l, act) in stack.iter().enumerate() {
        for (k, &t) in th.iter().enumerate() {
            let mut sum = 0.0;
            for row in 0..37 {
                let small = act.row(row).iter().filter(|a| a.abs() < t).count();
                sum += 100.0 * small as f64 / act.cols() as f64;
            }
            assert_eq!(table.percent[l][k], sum / 37.0);
        }
        assert!(table.percent[l].windows(2).all(|w| w[0] <= w[1]));
    }
}
