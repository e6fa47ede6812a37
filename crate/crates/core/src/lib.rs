//! Reward shaping, dataset construction and toy training loops for
//! explainable face-forgery detection with vision-language models.

pub mod cli;
pub mod dma;
pub mod domain;
pub mod fdm;
pub mod grpo;
pub mod io;
pub mod lexicon;
pub mod metrics;
pub mod providers;
pub mod rewards;
