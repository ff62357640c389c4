//! Compares analytic gradients of every tunable tensor with central finite
//! differences, then shows that a deliberately wrong gradient is caught.
//!
//!     cargo run --release --example gradient_check [seeds]

use mmfpt::gradcheck::{gradcheck_suite, gradcheck_suite_with, DEFAULT_TOLERANCE};

fn main() -> mmfpt::Result<()> {
    let n: u64 = std::env::args().nth(1).map_or(3, |s| s.parse().expect("seed count"));
    let seeds: Vec<u64> = (0..n).collect();
    let report = gradcheck_suite(&seeds, DEFAULT_TOLERANCE)?;
    for e in &report.entries {
        println!("{:<40} {:.2e}", format!("{}:{}", e.variant, e.name), e.max_relative_error);
    }
    println!("tolerance {:.0e}, passed {}", report.tolerance, report.passed());

    let flipped = gradcheck_suite_with(&[0], DEFAULT_TOLERANCE, &|g| {
        g.visit_mut(&mut |name, mut t| {
            if name == "adapter.block0.w_down" {
                t.mapv_inplace(|v| -v);
            }
        })
    })?;
    println!("sign-flipped adapter.block0.w_down flagged as {:?}", flipped.failures());
    Ok(())
}
