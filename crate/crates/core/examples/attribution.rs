//! Trains a teacher on a planted-relevance task and ranks its last hidden
//! layer by gradient-magnitude importance.

use flexkd::attribution::{compute_profile, select_top, AttributionOptions};
use flexkd::data::PlantedRelevanceSpec;
use flexkd::model::{Activation, MlpConfig, ModelConfig};
use flexkd::train::{evaluate, train_teacher, Metric, OptimizerConfig, TrainConfig};

fn main() -> flexkd::Result<()> {
    let task = PlantedRelevanceSpec {
        d_input: 16,
        num_relevant: 4,
        noise_scale: 0.5,
        num_classes: 2,
        seed: 3,
    }
    .generate(800, 0, 200)?;
    println!("relevant input coordinates: {:?}", task.relevant);

    let config = ModelConfig::Mlp(MlpConfig {
        input_dim: 16,
        hidden_dims: vec![32],
        num_classes: 2,
        activation: Activation::Tanh,
    });
    let train = TrainConfig {
        epochs: 20,
        batch_size: 8,
        optimizer: OptimizerConfig {
            learning_rate: 1e-3,
            ..OptimizerConfig::default()
        },
    };
    let teacher = train_teacher(config, &task.splits.train, None, &train, 1)?
        .checkpoint
        .to_model()?;
    println!(
        "teacher test accuracy: {:.2}%",
        100.0 * evaluate(&teacher, &task.splits.test, Metric::Accuracy)?
    );

    let profile = compute_profile(&teacher, &task.splits.train, &AttributionOptions::default())?;
    println!("rank  unit  score");
    for (r, &i) in profile.ranked_indices.iter().take(10).enumerate() {
        println!("{r:>4}  {i:>4}  {:.5}", profile.scores[i]);
    }
    println!("top-8 selection: {:?}", select_top(&profile, 8)?.indices);
    Ok(())
}
