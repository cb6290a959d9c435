//! Check every analytic gradient of the full training objective against
//! central finite differences in double precision, with the detached
//! second bounce held fixed.
//!
//! Run with: `cargo run --release --example gradient_check`

fn main() {
    let t0 = std::time::Instant::now();
    let report = irvox::trainer::toy_gradcheck(5, 1);
    print!("{report}");
    println!(
        "max relative error {:.3e} over {} tensors in {:.1?}",
        report.max_rel_err(),
        report.entries.len(),
        t0.elapsed()
    );
    assert!(report.passes(1e-4), "gradient check failed");
    println!("PASS at 1e-4");
}
