//! Lists the configurations an ablation over the given axes would train
//! and evaluate. `blendnet ablate` runs them.
//!
//! Run with `cargo run --example ablation_grid [-- order,T_test]`.

use blendnet::config::RunConfig;
use blendnet::run::commands::ablation_grid;

fn main() -> blendnet::Result<()> {
    let axes: Vec<String> = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "order,T_test".into())
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    let cases = ablation_grid(&RunConfig::default(), &axes)?;
    println!("{} configurations", cases.len());
    for case in &cases {
        let labels: Vec<String> = case.labels.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let b = &case.config.blend;
        println!("{:<40} T_train {} T_test {} site {}", labels.join(" "), b.t_train, b.t_test, b.insertion_point);
    }
    Ok(())
}
