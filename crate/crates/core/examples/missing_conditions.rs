//! Enumerates the legal missing-modality conditions of a four-modality rig,
//! draws switch masks and a static fixed-ratio assignment.
//!
//!     cargo run --example missing_conditions

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mmfpt::modality::{
    assign_fixed_missing_ratio, condition_for_mask, count_missing_conditions, enumerate_conditions,
    sample_switch_mask, ModalitySpec,
};

fn main() -> mmfpt::Result<()> {
    let spec = ModalitySpec::quad();
    let conditions = enumerate_conditions(&spec);
    println!(
        "{} dense + {} sparse modalities -> {} conditions",
        spec.n_dense(),
        spec.m_sparse(),
        count_missing_conditions(spec.n_dense(), spec.m_sparse())?
    );
    for c in &conditions {
        println!("  #{:<2} {}", c.canonical_id(), c.label());
    }

    // One mask per batch; dense bits that come up all zero are turned back on.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut visits = vec![0usize; conditions.len()];
    for step in 0..2000 {
        let mask = sample_switch_mask(&spec, &mut rng);
        if step < 5 {
            println!("batch {step}: mask {mask}");
        }
        visits[condition_for_mask(&conditions, &mask).expect("legal mask")] += 1;
    }
    println!("visits over 2000 batches:");
    for (c, v) in conditions.iter().zip(&visits) {
        println!("  {:<10} {v}", c.label());
    }

    // The static baseline: 70% of samples get a fixed incomplete condition.
    let assignment = assign_fixed_missing_ratio(20, 0.7, &spec, &mut rng)?;
    let labels: Vec<String> = assignment.iter().map(|&i| conditions[i].label()).collect();
    println!("fixed_ratio:0.7 over 20 samples: {}", labels.join(" "));
    Ok(())
}
