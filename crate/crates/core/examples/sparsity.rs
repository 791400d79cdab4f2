//! Percentage of near-zero activations per hidden layer of a trained MLP.

use flexkd::attribution::activation_sparsity_profile;
use flexkd::data::PlantedRelevanceSpec;
use flexkd::model::{Activation, MlpConfig, ModelConfig};
use flexkd::train::{train_teacher, TrainConfig};

fn main() -> flexkd::Result<()> {
    let task = PlantedRelevanceSpec {
        d_input: 20,
        num_relevant: 5,
        noise_scale: 0.5,
        num_classes: 3,
        seed: 2,
    }
    .generate(600, 0, 100)?;
    let config = ModelConfig::Mlp(MlpConfig {
        input_dim: 20,
        hidden_dims: vec![48, 48, 24],
        num_classes: 3,
        activation: Activation::Gelu,
    });
    let train = TrainConfig {
        epochs: 10,
        batch_size: 16,
        optimizer: Default::default(),
    };
    let model = train_teacher(config, &task.splits.train, None, &train, 4)?
        .checkpoint
        .to_model()?;
    let table = activation_sparsity_profile(&model, &task.splits.train, &[0.1, 0.5, 1.0, 2.0])?;
    print!("{}", table.to_text());
    Ok(())
}
