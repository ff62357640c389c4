//! Trains the same plus_fpt model twice, once on complete data and once with
//! the missing-aware modal switch, then scores both with a modality missing.
//!
//!     cargo run --release --example train_mms [epochs]

use mmfpt::backbone::{BackboneConfig, Model};
use mmfpt::data::{Dataset, SceneConfig};
use mmfpt::eval::{ablation_columns, ablation_scores};
use mmfpt::modality::ModalitySpec;
use mmfpt::train::{train, Regime, TrainConfig};

fn main() -> mmfpt::Result<()> {
    let epochs = std::env::args().nth(1).map_or(15, |s| s.parse().expect("epochs"));
    let spec = ModalitySpec::rgb_depth();
    let data = Dataset::generate(&SceneConfig::default(), 2024, 100)?;
    let (train_set, eval_set) = data.split_at(80);

    let columns = ablation_columns(&spec);
    println!("{:<10} {}", "regime", columns.iter().map(|c| format!("{c:>10}")).collect::<String>());
    for regime in [Regime::Complete, Regime::Mms] {
        let config = TrainConfig {
            regime,
            epochs,
            ..TrainConfig::new(0)
        };
        let mut model = Model::new(BackboneConfig::toy(), spec.clone(), config.spectral, config.seed)?;
        let report = train(&mut model, &train_set.scenes, &config)?;
        let first = report.losses.first().map_or(f64::NAN, |l| l.loss);
        let last = report.losses.last().map_or(f64::NAN, |l| l.loss);
        let scores = ablation_scores(&model, &eval_set.scenes, config.dropout)?;
        println!(
            "{:<10} {}   loss {first:.3} -> {last:.3}, {} masks drawn, visits {:?}",
            regime.to_string(),
            scores.iter().map(|s| format!("{:>10.2}", 100.0 * s)).collect::<String>(),
            report.masks_sampled,
            report.condition_visits,
        );
        if let Some(l) = report.losses.get(3) {
            println!("           step {} masks {}", l.step, l.mask);
        }
    }
    Ok(())
}
