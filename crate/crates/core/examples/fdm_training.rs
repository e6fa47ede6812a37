//! Trains the disentanglement model on synthetic features, then repeats the
//! run without the forgery loss to show that term is what teaches the
//! forgery branch.
//!
//! ```text
//! cargo run --release --example fdm_training
//! ```

use deepfake_align::fdm::{train_fdm, FdmConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = FdmConfig::default();
    let full = train_fdm(&config)?;
    for step in full.trajectory.iter().step_by(100) {
        let l = &step.loss;
        println!(
            "step {:>3}  total {:.5}  identity {:.4}  forgery {:.5}  recon {:.3}",
            step.step, l.total, l.identity, l.forgery, l.reconstruction
        );
    }
    println!("held-out: {}", serde_json::to_string(&full.metrics)?);

    let mut ablated = config.clone();
    ablated.loss_weights.lambda2 = 0.0;
    let without = train_fdm(&ablated)?;
    println!(
        "forgery accuracy {:.4} with the forgery loss, {:.4} without",
        full.metrics.forgery_accuracy, without.metrics.forgery_accuracy
    );
    Ok(())
}
