//! Drives the line-delimited scoring loop in-process, the same loop the
//! `serve` subcommand runs on stdin/stdout.
//!
//! ```text
//! cargo run --example serve_sidecar
//! ```

use deepfake_align::cli::{serve, ScoringContext};
use deepfake_align::grpo::{demo_record, perfect_response};
use serde_json::json;

fn main() -> std::io::Result<()> {
    let record = demo_record();
    let requests = [
        json!({ "id": "a", "raw_response": perfect_response(&record), "record": record }).to_string(),
        json!({ "id": "b", "raw_response": "The face is real.", "record": record }).to_string(),
        "this line is not JSON".to_string(),
        json!({ "id": "c", "raw_response": "x" }).to_string(),
    ];
    let input = requests.join("\n");
    let mut output = Vec::new();
    let stats = serve(input.as_bytes(), &mut output, &ScoringContext::default())?;

    for (req, reply) in requests.iter().zip(String::from_utf8_lossy(&output).lines()) {
        println!("> {:.70}\n< {reply}", req);
    }
    println!("{} requests, {} error replies", stats.requests, stats.errors);
    Ok(())
}
