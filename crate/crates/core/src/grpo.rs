//! Group-relative advantages and a small policy-gradient loop.
//!
//! The policy is a categorical distribution over a fixed pool of response
//! templates. Each iteration draws a group of `K` templates, scores them with
//! the reward suite, normalizes rewards within the group and takes a
//! score-function step on the logits:
//!
//! ```text
//! A_k     = (r_k - mean(r)) / (std(r) + eps)
//! logits += lr * Σ_k A_k * ∇ log softmax(logits)[i_k]
//! ```
//!
//! There is no KL penalty and no ratio clipping; with a direct categorical
//! policy neither is needed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{render_response, BBox, DmaRecord, Label, RegionBox};
use crate::lexicon::Lexicon;
use crate::providers::Embedder;
use crate::rewards::{score_response, RewardVector, RewardWeights};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GrpoError {
    #[error("group needs at least 2 responses, got {0}")]
    GroupTooSmall(usize),
    #[error("advantage epsilon must be > 0, got {0}")]
    InvalidEpsilon(f64),
    #[error("{what}: expected {expected}, got {got}")]
    LengthMismatch { what: &'static str, expected: usize, got: usize },
    #[error("template pool is empty")]
    EmptyPool,
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
}

pub const DEFAULT_ADV_EPSILON: f64 = 1e-8;

/// Normalizes rewards within a group to zero mean and (near) unit spread,
/// using the population standard deviation.
///
/// Constant groups carry no preference signal and map to all zeros.
pub fn group_advantages(rewards: &[f64], eps: f64) -> Result<Vec<f64>, GrpoError> {
    let k = rewards.len();
    if k < 2 {
        return Err(GrpoError::GroupTooSmall(k));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(GrpoError::InvalidEpsilon(eps));
    }
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(vec![0.0; k]);
    }
    let n = k as f64;
    let sum: f64 = rewards.iter().sum();
    // (K·r - Σr)/K rather than r - Σr/K: identical inputs shifted by a
    // constant give bit-identical deviations whenever the sums are exact.
    let dev: Vec<f64> = rewards.iter().map(|&r| (n * r - sum) / n).collect();
    let std = (dev.iter().map(|d| d * d).sum::<f64>() / n).sqrt();
    Ok(dev.into_iter().map(|d| d / (std + eps)).collect())
}

/// Categorical policy over a pool of raw response templates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    logits: Vec<f64>,
    pool: Vec<String>,
}

impl ToyPolicy {
    /// Uniform policy over `pool`.
    pub fn uniform(pool: Vec<String>) -> Result<Self, GrpoError> {
        let logits = vec![0.0; pool.len()];
        Self::new(logits, pool)
    }

    pub fn new(logits: Vec<f64>, pool: Vec<String>) -> Result<Self, GrpoError> {
        if pool.is_empty() {
            return Err(GrpoError::EmptyPool);
        }
        if logits.len() != pool.len() {
            return Err(GrpoError::LengthMismatch { what: "logits", expected: pool.len(), got: logits.len() });
        }
        Ok(Self { logits, pool })
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn pool(&self) -> &[String] {
        &self.pool
    }

    pub fn probabilities(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    /// Log-probability of template `index`.
    pub fn log_prob(&self, index: usize) -> f64 {
        let max = self.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + self.logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        self.logits[index] - lse
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `k` independent draws from the policy.
pub fn sample_group<R: Rng + ?Sized>(policy: &ToyPolicy, k: usize, rng: &mut R) -> Vec<usize> {
    let probs = policy.probabilities();
    let last = probs.len() - 1;
    (0..k)
        .map(|_| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return i;
                }
            }
            // rounding left u above the cumulative total; take the last nonzero
            probs.iter().rposition(|&p| p > 0.0).unwrap_or(last)
        })
        .collect()
}

/// Gradient of `Σ_k A_k log π(i_k)` with respect to the logits.
pub fn score_function_gradient(policy: &ToyPolicy, indices: &[usize], advantages: &[f64]) -> Result<Vec<f64>, GrpoError> {
    if indices.len() != advantages.len() {
        return Err(GrpoError::LengthMismatch { what: "advantages", expected: indices.len(), got: advantages.len() });
    }
    let probs = policy.probabilities();
    let mut grad = vec![0.0; probs.len()];
    for (&i, &a) in indices.iter().zip(advantages) {
        if i >= probs.len() {
            return Err(GrpoError::LengthMismatch { what: "template index", expected: probs.len(), got: i });
        }
        for (j, g) in grad.iter_mut().enumerate() {
            let indicator = if j == i { 1.0 } else { 0.0 };
            *g += a * (indicator - probs[j]);
        }
    }
    Ok(grad)
}

/// One ascent step along the score-function gradient.
pub fn policy_update(policy: &ToyPolicy, indices: &[usize], advantages: &[f64], lr: f64) -> Result<ToyPolicy, GrpoError> {
    let grad = score_function_gradient(policy, indices, advantages)?;
    let logits = policy.logits.iter().zip(&grad).map(|(l, g)| l + lr * g).collect();
    Ok(ToyPolicy { logits, pool: policy.pool.clone() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub group_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub adv_epsilon: f64,
    pub weights: RewardWeights,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            iterations: 200,
            learning_rate: 0.5,
            seed: 7,
            adv_epsilon: DEFAULT_ADV_EPSILON,
            weights: RewardWeights::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if self.group_size < 2 {
            return Err(GrpoError::InvalidConfig(format!("group_size must be >= 2, got {}", self.group_size)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(GrpoError::InvalidConfig(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if self.adv_epsilon.is_nan() || self.adv_epsilon <= 0.0 {
            return Err(GrpoError::InvalidEpsilon(self.adv_epsilon));
        }
        self.weights.validate().map_err(|e| GrpoError::InvalidConfig(format!("weights: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub iteration: usize,
    /// Mean combined reward of the sampled group.
    pub mean_reward: f64,
    /// Per-component means of the sampled group.
    pub component_means: RewardVector,
    /// Reward expected under the policy before this iteration's update.
    pub expected_reward: f64,
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub initial_mean_reward: f64,
    pub final_mean_reward: f64,
    pub improvement: f64,
    pub initial_expected_reward: f64,
    pub final_expected_reward: f64,
    /// Least-squares slope of sampled mean reward against iteration.
    pub trend_slope: f64,
    pub best_template: usize,
    pub best_template_prob_start: f64,
    pub best_template_prob_end: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutcome {
    pub trajectory: Vec<TrajectoryPoint>,
    pub template_rewards: Vec<RewardVector>,
    pub initial_policy: ToyPolicy,
    pub final_policy: ToyPolicy,
}

impl SimOutcome {
    pub fn summary(&self) -> SimSummary {
        let first = self.trajectory.first();
        let last = self.trajectory.last();
        let best = self
            .template_rewards
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.combined.total_cmp(&b.1.combined))
            .map_or(0, |(i, _)| i);
        let initial_mean = first.map_or(0.0, |p| p.mean_reward);
        let final_mean = last.map_or(0.0, |p| p.mean_reward);
        let expected = |policy: &ToyPolicy| {
            policy.probabilities().iter().zip(&self.template_rewards).map(|(p, r)| p * r.combined).sum::<f64>()
        };
        SimSummary {
            initial_mean_reward: initial_mean,
            final_mean_reward: final_mean,
            improvement: final_mean - initial_mean,
            initial_expected_reward: expected(&self.initial_policy),
            final_expected_reward: expected(&self.final_policy),
            trend_slope: slope(self.trajectory.iter().map(|p| (p.iteration as f64, p.mean_reward))),
            best_template: best,
            best_template_prob_start: self.initial_policy.probabilities()[best],
            best_template_prob_end: self.final_policy.probabilities()[best],
        }
    }
}

fn slope(points: impl Iterator<Item = (f64, f64)>) -> f64 {
    let pts: Vec<(f64, f64)> = points.collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return 0.0;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Runs `iterations` rounds of sample → score → normalize → update,
/// starting from a uniform policy over `pool`.
pub fn run_simulation(
    config: &SimConfig,
    record: &DmaRecord,
    pool: &[String],
    embedder: &dyn Embedder,
    lexicon: &Lexicon,
) -> Result<SimOutcome, GrpoError> {
    config.validate()?;
    let mut policy = ToyPolicy::uniform(pool.to_vec())?;
    let initial_policy = policy.clone();
    // Scoring is deterministic, so each template is scored once up front.
    let template_rewards: Vec<RewardVector> = pool
        .iter()
        .map(|raw| score_response(raw, record, &config.weights, embedder, lexicon))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trajectory = Vec::with_capacity(config.iterations);
    for iteration in 0..config.iterations {
        let probabilities = policy.probabilities();
        let expected_reward = probabilities.iter().zip(&template_rewards).map(|(p, r)| p * r.combined).sum();
        let indices = sample_group(&policy, config.group_size, &mut rng);
        let group: Vec<&RewardVector> = indices.iter().map(|&i| &template_rewards[i]).collect();
        let rewards: Vec<f64> = group.iter().map(|r| r.combined).collect();

        let k = group.len() as f64;
        let mean_of = |f: fn(&RewardVector) -> f64| group.iter().map(|r| f(r)).sum::<f64>() / k;
        let component_means = RewardVector {
            format: mean_of(|r| r.format),
            accuracy: mean_of(|r| r.accuracy),
            text: mean_of(|r| r.text),
            roi: mean_of(|r| r.roi),
            align: mean_of(|r| r.align),
            combined: mean_of(|r| r.combined),
        };
        trajectory.push(TrajectoryPoint {
            iteration,
            mean_reward: component_means.combined,
            component_means,
            expected_reward,
            probabilities,
        });

        let advantages = group_advantages(&rewards, config.adv_epsilon)?;
        policy = policy_update(&policy, &indices, &advantages, config.learning_rate)?;
    }
    Ok(SimOutcome { trajectory, template_rewards, initial_policy, final_policy: policy })
}

/// A fixed fake record with two localized regions, used when no dataset is
/// supplied.
pub fn demo_record() -> DmaRecord {
    let bx = |x1, y1, x2, y2| BBox::new(x1, y1, x2, y2).expect("valid demo box");
    DmaRecord {
        image_ref: "demo_0001".into(),
        question: "Is this face real or fake? Explain and localize the evidence.".into(),
        gt_text: "The image is fake: the mouth is blurred and the nose shows blending seams.".into(),
        gt_label: Label::Fake,
        gt_boxes: vec![
            RegionBox::new(crate::domain::RegionId::Nose, bx(0.44, 0.38, 0.56, 0.58)),
            RegionBox::new(crate::domain::RegionId::Mouth, bx(0.38, 0.62, 0.62, 0.76)),
        ],
    }
}

/// Ideal response for `record`: its annotation as explanation, its boxes as
/// evidence.
pub fn perfect_response(record: &DmaRecord) -> String {
    render_response("Inspecting the facial regions for blending artifacts.", &record.gt_text, &record.gt_boxes)
}

/// The two-template pool: the ideal response and an untagged one that names
/// the wrong label.
pub fn default_pool(record: &DmaRecord) -> Vec<String> {
    vec![perfect_response(record), format!("The face looks {} to me.", opposite(record.gt_label))]
}

/// The ideal response plus several defective variants: wrong label, no
/// boxes, displaced boxes, and an untagged answer.
pub fn extended_pool(record: &DmaRecord) -> Vec<String> {
    let think = "Looking at the face.";
    let wrong_label = render_response(
        think,
        &format!("The image is {}: the face shows no manipulation.", opposite(record.gt_label)),
        &[],
    );
    let no_boxes = render_response(think, &record.gt_text, &[]);
    let shifted: Vec<RegionBox> = record.gt_boxes.iter().map(|b| RegionBox::new(b.region, displace(&b.bbox))).collect();
    let displaced = render_response(think, &record.gt_text, &shifted);
    let mut pool = default_pool(record);
    pool.extend([wrong_label, no_boxes, displaced]);
    pool
}

// Slides a box by half its size, staying inside the frame where possible.
fn displace(b: &BBox) -> BBox {
    let offset = |lo: f64, hi: f64| {
        let half = (hi - lo) / 2.0;
        if hi + half <= 1.0 {
            half
        } else if lo - half >= 0.0 {
            -half
        } else {
            0.0
        }
    };
    let dx = offset(b.x1(), b.x2());
    let dy = offset(b.y1(), b.y2());
    BBox::new(b.x1() + dx, b.y1() + dy, b.x2() + dx, b.y2() + dy).unwrap_or(*b)
}

fn opposite(label: Label) -> &'static str {
    match label {
        Label::Fake => "real",
        _ => "fake",
    }
}
