//! Trains a small quad-modal model with the modal switch and prints the full
//! evaluation matrix: every missing condition, then every sensor failure.
//! Also writes the report and a checkpoint to a temporary directory and reads
//! the checkpoint back.
//!
//!     cargo run --release --example eval_matrix

use mmfpt::backbone::{BackboneConfig, Model};
use mmfpt::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use mmfpt::data::{Dataset, SceneConfig};
use mmfpt::eval::{evaluate_matrix, EvalOptions};
use mmfpt::modality::ModalitySpec;
use mmfpt::train::{train, TrainConfig};

fn main() -> mmfpt::Result<()> {
    let spec = ModalitySpec::quad();
    let data = Dataset::generate(&SceneConfig::default(), 5, 100)?;
    let (train_set, eval_set) = data.split_at(80);
    let config = TrainConfig {
        epochs: 10,
        ..TrainConfig::new(1)
    };
    let mut model = Model::new(BackboneConfig::toy(), spec, config.spectral, config.seed)?;
    train(&mut model, &train_set.scenes, &config)?;

    let report = evaluate_matrix(&model, &eval_set.scenes, &EvalOptions::default(), "example")?;
    print!("{}", report.to_table());

    let dir = std::env::temp_dir().join(format!("mmfpt-eval-matrix-{}", std::process::id()));
    report.write(&dir)?;
    let ck = Checkpoint {
        model,
        tuning: config.tuning,
        config_hash: "example".into(),
    };
    write_checkpoint(&dir.join("checkpoint"), &ck)?;
    let back = read_checkpoint(&dir.join("checkpoint"))?;
    println!("report and checkpoint in {}; checkpoint round trip exact: {}", dir.display(), back == ck);
    Ok(())
}
