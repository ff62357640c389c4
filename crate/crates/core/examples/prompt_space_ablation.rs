//! Trains the three prompt-space variants under the modal switch and prints
//! the mean ± std table over seeds.
//!
//!     cargo run --release --example prompt_space_ablation [epochs] [seeds]

use mmfpt::backbone::BackboneConfig;
use mmfpt::data::{Dataset, SceneConfig};
use mmfpt::eval::run_ablation;
use mmfpt::modality::ModalitySpec;
use mmfpt::train::TrainConfig;

fn main() -> mmfpt::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(4, |s| s.parse().expect("epochs"));
    let seeds: Vec<u64> = (0..args.next().map_or(2, |s| s.parse().expect("seed count"))).collect();
    let data = Dataset::generate(&SceneConfig::default(), 2024, 75)?;
    let (train_set, eval_set) = data.split_at(60);
    let base = TrainConfig {
        epochs,
        ..TrainConfig::new(0)
    };
    let report = run_ablation(
        &BackboneConfig::toy(),
        &ModalitySpec::rgb_depth(),
        &train_set.scenes,
        &eval_set.scenes,
        &base,
        &seeds,
    )?;
    print!("{}", report.to_table());
    Ok(())
}
