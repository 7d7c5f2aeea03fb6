//! Runs the built-in self checks: blending operators against their loop
//! oracles, finite-difference gradients, the reference AP case and a
//! checkpoint round trip.
//!
//! Run with `cargo run --example self_check [-- <oracle cases>]`.

use blendnet::selftest::run_selftest;

fn main() -> blendnet::Result<()> {
    let cases = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(20);
    let report = run_selftest(cases)?;
    print!("{}", report.render());
    if !report.passed() {
        std::process::exit(3);
    }
    Ok(())
}
