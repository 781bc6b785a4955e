//! Runs paired grounding trials over seeds and prints the in-mask masses.
//!
//! Usage: `grounding_trial [config.toml] [seeds]`

use mc2_core::harness::{run_grounding_trial, GroundingTrialConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let cfg: GroundingTrialConfig = match args.next() {
        Some(path) if path.ends_with(".toml") => toml::from_str(&std::fs::read_to_string(path)?)?,
        _ => GroundingTrialConfig::default(),
    };
    let seeds: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(10);
    let start = std::time::Instant::now();
    let mut wins = 0;
    for seed in 0..seeds {
        let t = run_grounding_trial(&Default::default(), &cfg, seed)?;
        wins += t.improved() as usize;
        println!("seed {seed:>2}  grounded {:.4}  ungrounded {:.4}", t.grounded, t.ungrounded);
    }
    println!("{wins}/{seeds} improved in {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
