//! Builds an aligned dataset from the bundled 50-record fixture and prints
//! the build report.
//!
//! ```text
//! cargo run --example build_dma [-- OUT.jsonl]
//! ```

use std::path::Path;

use deepfake_align::dma::{build_dataset, read_dma_file};
use deepfake_align::lexicon::default_lexicon;
use deepfake_align::providers::DEFAULT_PAD;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let out = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("dma_example.jsonl"));

    let report = build_dataset(
        &fixtures.join("source_50.jsonl"),
        &fixtures.join("landmarks_50.jsonl"),
        &out,
        &default_lexicon(),
        DEFAULT_PAD,
    )?;
    println!("{}", serde_json::to_string_pretty(&report)?);

    let (header, records) = read_dma_file(&out)?;
    println!("wrote {} records to {} ({:?})", records.len(), out.display(), header.map(|h| h.builder_version));
    if let Some(first) = records.first() {
        println!("first record: {}", serde_json::to_string(first)?);
    }
    Ok(())
}
