//! Runs one prompt-rectification step on random tokens in each prompt space
//! and shows what changes and what does not.
//!
//!     cargo run --example fourier_prompt

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mmfpt::fpt::{
    fourier_prompt_forward, parameter_free_prompt_attention, prompt_attention, real_fft, FftAxis,
    FourierPromptParams, PromptSpace, SpectralMode, TokenBundle,
};

fn main() -> mmfpt::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut random = |r: usize, c: usize| Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0));
    let d = 6;
    let bundle = TokenBundle::new(random(3, d), random(10, d), Some(random(1, d)), 0)?;
    let params = FourierPromptParams {
        w_q: random(d, d),
        w_k: random(d, d),
    };

    let row: Vec<f64> = bundle.prompts.row(0).to_vec();
    println!("prompt 0:          {:?}", round(&row));
    println!("Re FFT of prompt 0: {:?}", round(&real_fft(&row)?));

    for variant in PromptSpace::ALL {
        let mode = SpectralMode::new(variant, FftAxis::Channel);
        let out = fourier_prompt_forward(&bundle, &params, mode)?;
        let (_, cache) = prompt_attention(bundle.prompts.view(), bundle.features.view(), &params, mode)?;
        let sums: Vec<f64> = cache.attention.rows().into_iter().map(|r| r.sum()).collect();
        println!(
            "{:<17} new prompt 0 {:?}  attention row sums {:?}  features untouched {}",
            variant.label(),
            round(&out.prompts.row(0).to_vec()),
            round(&sums),
            out.features == bundle.features && out.cls == bundle.cls
        );
    }

    // Later blocks use the same update with identity mixers.
    let mode = SpectralMode::default();
    let free = parameter_free_prompt_attention(&bundle, mode)?;
    let ident = fourier_prompt_forward(&bundle, &FourierPromptParams::identity(d), mode)?;
    println!("parameter-free == identity mixers: {}", free == ident);
    Ok(())
}

fn round(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1000.0).round() / 1000.0).collect()
}
