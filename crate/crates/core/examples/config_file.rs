//! Parses a configuration file (or the defaults), validates it and prints
//! the effective configuration in the format runs echo to `config.txt`.
//!
//! Run with `cargo run --example config_file [-- <file>]`.

use std::path::PathBuf;

use blendnet::config::RunConfig;

fn main() -> blendnet::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(p) => RunConfig::load(&PathBuf::from(p))?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    print!("{}", cfg.to_text());
    println!("# hash {}", cfg.hash());
    Ok(())
}
