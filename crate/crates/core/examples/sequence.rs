//! Trains a small causal sequence model on the parity-of-marker task and
//! scores its last hidden layer, averaging over non-padding positions.

use flexkd::attribution::{compute_profile, AttributionOptions};
use flexkd::data::{SeqRule, SeqTaskSpec};
use flexkd::model::{Activation, ModelConfig, TinySeqConfig};
use flexkd::train::{evaluate, train_teacher, Metric, OptimizerConfig, TrainConfig};

fn main() -> flexkd::Result<()> {
    let spec = SeqTaskSpec {
        vocab_size: 6,
        context_len: 12,
        rule: SeqRule::ParityOfMarker,
        seed: 11,
    };
    let splits = spec.generate(400, 0, 100)?;
    let config = ModelConfig::Seq(TinySeqConfig {
        vocab_size: 6,
        embed_dim: 16,
        num_layers: 2,
        hidden_dim: 32,
        context_len: 12,
        num_classes: SeqRule::ParityOfMarker.num_classes(6),
        activation: Activation::Gelu,
    });
    let train = TrainConfig {
        epochs: 10,
        batch_size: 8,
        optimizer: OptimizerConfig {
            learning_rate: 2e-3,
            ..OptimizerConfig::default()
        },
    };
    let outcome = train_teacher(config, &splits.train, None, &train, 1)?;
    for e in &outcome.epochs {
        println!("epoch {:>2}  loss {:.4}  train acc {:.3}", e.epoch, e.train_loss, e.train_accuracy);
    }
    let model = outcome.checkpoint.to_model()?;
    println!(
        "per-position test accuracy: {:.2}%",
        100.0 * evaluate(&model, &splits.test, Metric::Accuracy)?
    );

    let opts = AttributionOptions {
        calibration_fraction: 0.25,
        ..AttributionOptions::default()
    };
    let profile = compute_profile(&model, &splits.train, &opts)?;
    println!(
        "scored on {} sequences; top units {:?}",
        profile.num_samples,
        &profile.ranked_indices[..8]
    );
    Ok(())
}
