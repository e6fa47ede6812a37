//! Computes accuracy, F1 and AUC for a prediction file.
//!
//! ```text
//! cargo run --example evaluate_predictions [-- PREDICTIONS.jsonl]
//! ```

use std::path::PathBuf;

use deepfake_align::metrics::evaluate_file;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/predictions_hand.jsonl")
    });
    let report = evaluate_file(&path)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
