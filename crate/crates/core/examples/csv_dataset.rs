//! Writes a generated dataset to CSV, reads it back and prints its manifest
//! data.

use flexkd::data::{load_csv, write_csv, CsvSchema, PlantedRelevanceSpec, Split};

fn main() -> flexkd::Result<()> {
    let task = PlantedRelevanceSpec {
        d_input: 4,
        num_relevant: 2,
        noise_scale: 1.0,
        num_classes: 3,
        seed: 9,
    }
    .generate(50, 0, 10)?;
    let schema = CsvSchema {
        features: (0..4).map(|i| format!("x{i}")).collect(),
        num_classes: 3,
    };
    let path = std::env::temp_dir().join("flexkd-example-train.csv");
    write_csv(&task.splits.train, &schema, &path)?;
    let loaded = load_csv(&path, &schema, Split::Train)?;
    println!("{}: {} rows", path.display(), loaded.len());
    println!("label histogram: {:?}", loaded.label_histogram());
    println!(
        "checksum matches the generated split: {}",
        loaded.checksum() == task.splits.train.checksum()
    );
    std::fs::remove_file(&path).ok();
    Ok(())
}
