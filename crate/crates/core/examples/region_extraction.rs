//! Pulls facial regions out of free-text annotations with the keyword
//! lexicon, and turns landmark points into padded boxes.
//!
//! ```text
//! cargo run --example region_extraction -- "the left eye and jawline look off"
//! ```

use std::collections::BTreeMap;

use deepfake_align::domain::RegionId;
use deepfake_align::lexicon::default_lexicon;
use deepfake_align::providers::{region_box_from_landmarks, LandmarkSet, DEFAULT_PAD};

fn main() {
    let lexicon = default_lexicon();
    let mut texts: Vec<String> = std::env::args().skip(1).collect();
    if texts.is_empty() {
        texts = vec![
            "The image is fake: the mouth is blurred and the nose shows seams.".into(),
            "Unnatural left eye reflection; the eyebrow and hair line are smeared.".into(),
            "One eye looks glassy.".into(),
            "Lighting is consistent overall.".into(),
        ];
    }
    for text in &texts {
        let regions: Vec<&str> = lexicon.extract_regions(text).into_iter().map(|r| r.as_str()).collect();
        println!("{text:?}\n    -> {regions:?}");
    }

    let points = BTreeMap::from([
        (RegionId::Mouth, vec![[0.41, 0.64], [0.59, 0.66], [0.5, 0.73]]),
        (RegionId::Nose, vec![[0.5, 0.45]]),
    ]);
    let landmarks = LandmarkSet::new(points).expect("valid landmarks");
    for region in landmarks.regions() {
        let b = region_box_from_landmarks(&landmarks, region, DEFAULT_PAD).expect("region present");
        println!("{region}: {:?}", b.to_array());
    }
}
