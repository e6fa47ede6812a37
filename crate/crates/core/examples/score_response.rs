//! Scores a handful of candidate responses against one aligned record and
//! prints every reward component.
//!
//! ```text
//! cargo run --example score_response
//! ```

use deepfake_align::domain::{parse_response, render_response, BBox, RegionBox, RegionId};
use deepfake_align::grpo::{demo_record, perfect_response};
use deepfake_align::lexicon::default_lexicon;
use deepfake_align::providers::HashedBagEmbedder;
use deepfake_align::rewards::{score_response, RewardWeights};

fn main() {
    let record = demo_record();
    let weights = RewardWeights::default();
    let embedder = HashedBagEmbedder::default();
    let lexicon = default_lexicon();

    let off_target = vec![RegionBox::new(RegionId::Ear, BBox::new(0.1, 0.4, 0.2, 0.6).unwrap())];
    let candidates = [
        ("perfect", perfect_response(&record)),
        ("wrong label", render_response("Looks clean.", "The image is real: nothing stands out.", &[])),
        ("right label, wrong box", render_response("Edges.", "The image is fake: the ear is warped.", &off_target)),
        ("no tags", "The face is fake, look at the mouth.".to_string()),
    ];

    println!("record {}: {:?}", record.image_ref, record.gt_text);
    println!("{:<24} {:>6} {:>6} {:>6} {:>6} {:>6} {:>8}  diagnostic", "candidate", "fmt", "acc", "text", "roi", "align", "combined");
    for (name, raw) in &candidates {
        let v = score_response(raw, &record, &weights, &embedder, &lexicon);
        let diag = parse_response(raw).diagnostic.map(|d| d.to_string()).unwrap_or_default();
        println!(
            "{name:<24} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>8.4}  {diag}",
            v.format, v.accuracy, v.text, v.roi, v.align, v.combined
        );
    }
}
