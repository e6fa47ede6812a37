//! Runs the toy group-relative policy loop on the demo record and prints how
//! the template probabilities and the mean reward evolve.
//!
//! ```text
//! cargo run --example grpo_simulation [-- extended]
//! ```

use deepfake_align::grpo::{default_pool, demo_record, extended_pool, run_simulation, SimConfig};
use deepfake_align::lexicon::default_lexicon;
use deepfake_align::providers::HashedBagEmbedder;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let record = demo_record();
    let pool = match std::env::args().nth(1).as_deref() {
        Some("extended") => extended_pool(&record),
        _ => default_pool(&record),
    };
    let config = SimConfig::default();
    let outcome = run_simulation(&config, &record, &pool, &HashedBagEmbedder::default(), &default_lexicon())?;

    println!("template rewards:");
    for (i, r) in outcome.template_rewards.iter().enumerate() {
        println!("  [{i}] combined {:.4}  {:.60}", r.combined, pool[i].replace('\n', " "));
    }
    println!("\niter  mean_reward  expected  probabilities");
    for p in outcome.trajectory.iter().filter(|p| p.iteration % 20 == 0 || p.iteration + 1 == config.iterations) {
        let probs: Vec<String> = p.probabilities.iter().map(|x| format!("{x:.3}")).collect();
        println!("{:>4}  {:>11.4}  {:>8.4}  [{}]", p.iteration, p.mean_reward, p.expected_reward, probs.join(", "));
    }
    println!("\n{}", serde_json::to_string_pretty(&outcome.summary())?);
    Ok(())
}
