//! Distils a 64-wide teacher into 16-wide students with each method and
//! prints test accuracy per method.

use flexkd::attribution::{compute_profile, select_top, AttributionOptions};
use flexkd::data::PlantedRelevanceSpec;
use flexkd::model::{Activation, MlpConfig, ModelConfig};
use flexkd::train::{
    distill, evaluate, train_teacher, DistillationPlan, Method, Metric, OptimizerConfig,
    TrainConfig,
};

fn mlp(hidden: usize) -> ModelConfig {
    ModelConfig::Mlp(MlpConfig {
        input_dim: 32,
        hidden_dims: vec![hidden],
        num_classes: 2,
        activation: Activation::Tanh,
    })
}

fn main() -> flexkd::Result<()> {
    let task = PlantedRelevanceSpec {
        d_input: 32,
        num_relevant: 8,
        noise_scale: 0.5,
        num_classes: 2,
        seed: 7,
    }
    .generate(2000, 0, 500)?;
    let (train, test) = (&task.splits.train, &task.splits.test);

    let teacher_train = TrainConfig {
        epochs: 30,
        batch_size: 8,
        optimizer: OptimizerConfig {
            learning_rate: 1e-3,
            weight_decay: 1e-3,
            ..OptimizerConfig::default()
        },
    };
    let teacher = train_teacher(mlp(64), train, None, &teacher_train, 1)?
        .checkpoint
        .to_model()?;
    println!("teacher: {:.2}%", 100.0 * evaluate(&teacher, test, Metric::Accuracy)?);

    let profile = compute_profile(&teacher, train, &AttributionOptions::default())?;
    let selection = select_top(&profile, 16)?;
    let student_train = TrainConfig {
        epochs: 20,
        batch_size: 8,
        optimizer: OptimizerConfig::default(),
    };
    for method in [Method::FtOnly, Method::VanillaKd, Method::ProjectorMse, Method::Flexkd] {
        let plan = DistillationPlan {
            teacher: teacher.clone(),
            teacher_checksum: teacher.checksum(),
            student_config: mlp(16),
            profile: Some(profile.clone()),
            selection: (method == Method::Flexkd).then(|| selection.clone()),
            weights: method.default_weights(),
            method,
            train: student_train,
            seed: 1,
        };
        let outcome = distill(&plan, train)?;
        let acc = evaluate(&outcome.student.to_model()?, test, Metric::Accuracy)?;
        println!("{:<14} {:.2}%", method.name(), 100.0 * acc);
    }
    Ok(())
}
