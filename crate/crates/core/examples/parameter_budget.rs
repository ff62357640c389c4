//! Counts frozen and tunable parameters per tuning mode at toy and full
//! (ViT-B sized) scale.
//!
//!     cargo run --example parameter_budget

use mmfpt::backbone::{count_parameters, partition_parameters, BackboneConfig, TuningMode};
use mmfpt::modality::ModalitySpec;

fn main() {
    let spec = ModalitySpec::rgb_depth();
    for (scale, base) in [("toy", BackboneConfig::toy()), ("vit-b", BackboneConfig::paper_scale())] {
        println!("{scale}: d_model {}, depth {}, {} prompts", base.d_model, base.depth, base.prompt_count);
        let decoder = base.d_model * base.num_classes + base.num_classes;
        for mode in [TuningMode::Full, TuningMode::DecoderOnly, TuningMode::PlusFpt, TuningMode::PlusAdapter] {
            let config = match mode {
                TuningMode::PlusAdapter => {
                    let mut c = base.clone().without_prompts();
                    c.bottleneck = if scale == "toy" { base.bottleneck } else { 64 };
                    c
                }
                _ => base.clone(),
            };
            let counts = count_parameters(&partition_parameters(&config.layout(&spec), mode));
            println!(
                "  {:<13} r={:<3} tunable {:>11} ({:>6.3}%)  over decoder {:>+10.3}M",
                mode.as_str(),
                config.bottleneck,
                counts.tunable_count,
                100.0 * counts.tunable_fraction,
                (counts.tunable_count as f64 - decoder as f64) / 1e6
            );
        }
    }
}
