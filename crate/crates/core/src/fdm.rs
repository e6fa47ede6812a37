//! Small forgery-disentanglement model trained on synthetic features.
//!
//! A shared feature vector is projected into identity, structural and
//! forgery parts. An identity head (softmax over `M` identities) reads the
//! identity part, a forgery head (one logistic unit) reads the forgery part,
//! and a linear decoder rebuilds the shared feature from all three.
//!
//! ```text
//! L_id    = -(1/N) Σ_i α_{y_i} (1 - p_i)^γ log p_i            p_i = ŷ_{i, y_i}
//! L_forge = -(1/N) Σ_i [ g α (1-ĝ)^γ̂ log ĝ + (1-g)(1-α) ĝ^γ̂ log(1-ĝ) ]
//! L_rec   =  (1/N) Σ_i ‖F_i - F̂_i‖²
//! L       =  λ1 L_id + λ2 L_forge + λ3 L_rec
//! ```
//!
//! Gradients are derived by hand and checked against central differences
//! by [`grad_check`].

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::metrics;

/// Floor applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FdmError {
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    Shape { what: &'static str, expected: String, got: String },
    #[error("label {label} out of range for {classes} identities")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
}

fn std_normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn shape_err(what: &'static str, expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> FdmError {
    FdmError::Shape { what, expected: format!("{expected:?}"), got: format!("{got:?}") }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FdmDims {
    pub feature: usize,
    pub identity: usize,
    pub structural: usize,
    pub forgery: usize,
    pub identities: usize,
}

impl Default for FdmDims {
    fn default() -> Self {
        Self { feature: 64, identity: 24, structural: 24, forgery: 16, identities: 8 }
    }
}

impl FdmDims {
    pub fn concat(&self) -> usize {
        self.identity + self.structural + self.forgery
    }

    fn validate(&self) -> Result<(), FdmError> {
        if [self.feature, self.identity, self.structural, self.forgery].contains(&0) {
            return Err(FdmError::InvalidConfig("feature dimensions must be positive".into()));
        }
        if self.identities < 2 {
            return Err(FdmError::InvalidConfig("need at least 2 identities".into()));
        }
        Ok(())
    }
}

/// Dense layer `y = x Wᵀ + b`, weight shaped `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Array2::zeros((output, input)), bias: Array1::zeros(output) }
    }

    fn random<R: Rng>(input: usize, output: usize, scale: f64, rng: &mut R) -> Self {
        let weight = Array2::from_shape_fn((output, input), |_| scale * std_normal(rng));
        let bias = Array1::from_shape_fn(output, |_| scale * std_normal(rng));
        Self { weight, bias }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Projections, heads and decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct FdmParams {
    pub dims: FdmDims,
    pub identity_proj: Linear,
    pub structural_proj: Linear,
    pub forgery_proj: Linear,
    pub identity_head: Linear,
    pub forgery_head: Linear,
    pub decoder: Linear,
}

impl FdmParams {
    pub fn zeros(dims: FdmDims) -> Self {
        Self {
            dims,
            identity_proj: Linear::zeros(dims.feature, dims.identity),
            structural_proj: Linear::zeros(dims.feature, dims.structural),
            forgery_proj: Linear::zeros(dims.feature, dims.forgery),
            identity_head: Linear::zeros(dims.identity, dims.identities),
            forgery_head: Linear::zeros(dims.forgery, 1),
            decoder: Linear::zeros(dims.concat(), dims.feature),
        }
    }

    /// Training initialization: scaled-normal projections and decoder, zero
    /// heads, zero biases.
    pub fn init<R: Rng>(dims: FdmDims, rng: &mut R) -> Self {
        let mut p = Self::zeros(dims);
        let proj_scale = 1.0 / (dims.feature as f64).sqrt();
        let dec_scale = 1.0 / (dims.concat() as f64).sqrt();
        for (layer, scale) in [
            (&mut p.identity_proj, proj_scale),
            (&mut p.structural_proj, proj_scale),
            (&mut p.forgery_proj, proj_scale),
            (&mut p.decoder, dec_scale),
        ] {
            layer.weight.mapv_inplace(|_| scale * std_normal(rng));
        }
        p
    }

    /// Every weight and bias drawn from `N(0, scale²)`.
    pub fn random<R: Rng>(dims: FdmDims, scale: f64, rng: &mut R) -> Self {
        Self {
            dims,
            identity_proj: Linear::random(dims.feature, dims.identity, scale, rng),
            structural_proj: Linear::random(dims.feature, dims.structural, scale, rng),
            forgery_proj: Linear::random(dims.feature, dims.forgery, scale, rng),
            identity_head: Linear::random(dims.identity, dims.identities, scale, rng),
            forgery_head: Linear::random(dims.forgery, 1, scale, rng),
            decoder: Linear::random(dims.concat(), dims.feature, scale, rng),
        }
    }

    fn layers(&self) -> [&Linear; 6] {
        [
            &self.identity_proj,
            &self.structural_proj,
            &self.forgery_proj,
            &self.identity_head,
            &self.forgery_head,
            &self.decoder,
        ]
    }

    fn layers_mut(&mut self) -> [&mut Linear; 6] {
        [
            &mut self.identity_proj,
            &mut self.structural_proj,
            &mut self.forgery_proj,
            &mut self.identity_head,
            &mut self.forgery_head,
            &mut self.decoder,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|l| l.len()).sum()
    }

    /// All parameters in a fixed order: per layer, weight (row-major) then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in self.layers() {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params());
        let mut it = flat.iter().copied();
        for l in self.layers_mut() {
            l.weight.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v = it.next().unwrap());
        }
    }

    /// `self -= lr * grad`.
    pub fn descend(&mut self, grad: &FdmParams, lr: f64) {
        for (l, g) in self.layers_mut().into_iter().zip(grad.layers()) {
            l.weight.scaled_add(-lr, &g.weight);
            l.bias.scaled_add(-lr, &g.bias);
        }
    }

    pub fn norm(&self) -> f64 {
        self.to_flat().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// The three parts of one shared feature.
#[derive(Debug, Clone, PartialEq)]
pub struct DisentangledFeatures {
    pub identity: Array1<f64>,
    pub structural: Array1<f64>,
    pub forgery: Array1<f64>,
}

/// Forward pass over a batch (rows are samples).
#[derive(Debug, Clone)]
pub struct FdmForward {
    pub identity: Array2<f64>,
    pub structural: Array2<f64>,
    pub forgery: Array2<f64>,
    pub identity_probs: Array2<f64>,
    pub forgery_prob: Array1<f64>,
    pub reconstruction: Array2<f64>,
}

impl FdmForward {
    pub fn features(&self, row: usize) -> DisentangledFeatures {
        DisentangledFeatures {
            identity: self.identity.row(row).to_owned(),
            structural: self.structural.row(row).to_owned(),
            forgery: self.forgery.row(row).to_owned(),
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row /= total;
    }
    out
}

pub fn fdm_forward(x: &Array2<f64>, params: &FdmParams) -> Result<FdmForward, FdmError> {
    if x.ncols() != params.dims.feature {
        return Err(shape_err("shared features", params.dims.feature, x.ncols()));
    }
    let identity = params.identity_proj.forward(x);
    let structural = params.structural_proj.forward(x);
    let forgery = params.forgery_proj.forward(x);
    let identity_probs = softmax_rows(&params.identity_head.forward(&identity));
    let forgery_prob = params.forgery_head.forward(&forgery).column(0).mapv(sigmoid);
    let joined = concatenate(Axis(1), &[identity.view(), structural.view(), forgery.view()]).expect("same row count");
    let reconstruction = params.decoder.forward(&joined);
    Ok(FdmForward { identity, structural, forgery, identity_probs, forgery_prob, reconstruction })
}

/// Forward pass for a single shared feature.
pub fn fdm_forward_one(x: ArrayView1<f64>, params: &FdmParams) -> Result<(DisentangledFeatures, Array1<f64>, f64, Array1<f64>), FdmError> {
    let batch = x.to_owned().insert_axis(Axis(0));
    let out = fdm_forward(&batch, params)?;
    Ok((out.features(0), out.identity_probs.row(0).to_owned(), out.forgery_prob[0], out.reconstruction.row(0).to_owned()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FocalParams {
    /// Per-identity weights; `None` means uniform `1/M`.
    pub alpha_identity: Option<Vec<f64>>,
    pub gamma_identity: f64,
    pub alpha_forgery: f64,
    pub gamma_forgery: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { alpha_identity: None, gamma_identity: 2.0, alpha_forgery: 0.5, gamma_forgery: 2.0 }
    }
}

impl FocalParams {
    /// Plain cross-entropy: γ = 0 and unit class weights.
    pub fn cross_entropy(classes: usize) -> Self {
        Self { alpha_identity: Some(vec![1.0; classes]), gamma_identity: 0.0, alpha_forgery: 0.5, gamma_forgery: 0.0 }
    }

    pub fn class_weight(&self, class: usize, classes: usize) -> f64 {
        match &self.alpha_identity {
            Some(w) => w[class],
            None => 1.0 / classes as f64,
        }
    }

    pub fn validate(&self, classes: usize) -> Result<(), FdmError> {
        if let Some(w) = &self.alpha_identity {
            if w.len() != classes {
                return Err(shape_err("alpha_identity", classes, w.len()));
            }
            if w.iter().any(|&a| a.is_nan() || a <= 0.0) {
                return Err(FdmError::InvalidConfig("alpha_identity weights must be > 0".into()));
            }
        }
        if !(self.alpha_forgery > 0.0 && self.alpha_forgery < 1.0) {
            return Err(FdmError::InvalidConfig("alpha_forgery must lie in (0, 1)".into()));
        }
        if !(self.gamma_identity >= 0.0 && self.gamma_forgery >= 0.0) {
            return Err(FdmError::InvalidConfig("focusing parameters must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 1e-4, lambda2: 1.0, lambda3: 1e-4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub identity: f64,
    pub forgery: f64,
    pub reconstruction: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(identity: f64, forgery: f64, reconstruction: f64, lw: &LossWeights) -> Self {
        let total = lw.lambda1 * identity + lw.lambda2 * forgery + lw.lambda3 * reconstruction;
        Self { identity, forgery, reconstruction, total }
    }
}

/// `(1-p)^γ` with `0^0 = 1`.
fn modulation(one_minus_p: f64, gamma: f64) -> f64 {
    if gamma == 0.0 {
        1.0
    } else {
        one_minus_p.max(0.0).powf(gamma)
    }
}

pub fn identity_focal_loss(probs: &Array2<f64>, labels: &[usize], fp: &FocalParams) -> Result<f64, FdmError> {
    let (n, m) = probs.dim();
    if labels.len() != n || n == 0 {
        return Err(shape_err("identity labels", n, labels.len()));
    }
    let mut total = 0.0;
    for (row, &y) in probs.rows().into_iter().zip(labels) {
        if y >= m {
            return Err(FdmError::LabelOutOfRange { label: y, classes: m });
        }
        let p = row[y];
        total -= fp.class_weight(y, m) * modulation(1.0 - p, fp.gamma_identity) * p.max(PROB_FLOOR).ln();
    }
    Ok(total / n as f64)
}

/// Binary focal loss over forgery probabilities. The probability is floored
/// at [`PROB_FLOOR`] inside each logarithm only, so a perfect prediction
/// scores exactly 0.
pub fn forgery_focal_loss(probs: &Array1<f64>, labels: &[bool], fp: &FocalParams) -> Result<f64, FdmError> {
    let n = probs.len();
    if labels.len() != n || n == 0 {
        return Err(shape_err("forgery labels", n, labels.len()));
    }
    let (alpha, gamma) = (fp.alpha_forgery, fp.gamma_forgery);
    let mut total = 0.0;
    for (&g, &fake) in probs.iter().zip(labels) {
        total -= if fake {
            alpha * modulation(1.0 - g, gamma) * g.max(PROB_FLOOR).ln()
        } else {
            (1.0 - alpha) * modulation(g, gamma) * (1.0 - g).max(PROB_FLOOR).ln()
        };
    }
    Ok(total / n as f64)
}

/// Mean over samples of the squared L2 residual.
pub fn recon_loss(shared: &Array2<f64>, reconstructed: &Array2<f64>) -> Result<f64, FdmError> {
    if shared.dim() != reconstructed.dim() {
        return Err(shape_err("reconstruction", shared.dim(), reconstructed.dim()));
    }
    let n = shared.nrows();
    if n == 0 {
        return Err(shape_err("reconstruction", "at least one row", 0));
    }
    Ok((shared - reconstructed).mapv(|v| v * v).sum() / n as f64)
}

/// Shared features with identity and authenticity labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FdmBatch {
    pub features: Array2<f64>,
    pub identity: Vec<usize>,
    pub fake: Vec<bool>,
}

impl FdmBatch {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self, dims: &FdmDims) -> Result<(), FdmError> {
        let n = self.features.nrows();
        if n == 0 {
            return Err(shape_err("batch", "at least one sample", 0));
        }
        if self.features.ncols() != dims.feature {
            return Err(shape_err("shared features", dims.feature, self.features.ncols()));
        }
        if self.identity.len() != n || self.fake.len() != n {
            return Err(shape_err("labels", n, (self.identity.len(), self.fake.len())));
        }
        if let Some(&y) = self.identity.iter().find(|&&y| y >= dims.identities) {
            return Err(FdmError::LabelOutOfRange { label: y, classes: dims.identities });
        }
        Ok(())
    }
}

pub fn total_loss(batch: &FdmBatch, params: &FdmParams, fp: &FocalParams, lw: &LossWeights) -> Result<LossBreakdown, FdmError> {
    batch.validate(&params.dims)?;
    let out = fdm_forward(&batch.features, params)?;
    Ok(LossBreakdown::combine(
        identity_focal_loss(&out.identity_probs, &batch.identity, fp)?,
        forgery_focal_loss(&out.forgery_prob, &batch.fake, fp)?,
        recon_loss(&batch.features, &out.reconstruction)?,
        lw,
    ))
}

/// d(focal term)/d(true-class logit) scale factor `κ`; the gradient with
/// respect to logit `j` is `κ (δ_{j,y} - ŷ_j)`.
fn identity_logit_scale(p: f64, alpha: f64, gamma: f64) -> f64 {
    let log_p = p.max(PROB_FLOOR).ln();
    let from_modulation = if gamma == 0.0 || p >= 1.0 {
        0.0
    } else {
        gamma * (1.0 - p).powf(gamma - 1.0) * p * log_p
    };
    let from_log = if p >= PROB_FLOOR { modulation(1.0 - p, gamma) } else { 0.0 };
    alpha * (from_modulation - from_log)
}

/// d(forgery focal term)/d(forgery logit).
fn forgery_logit_grad(g: f64, fake: bool, alpha: f64, gamma: f64) -> f64 {
    // the loss of a sample with true-class probability q is
    // -w (1-q)^γ ln(max(q, floor)), and dq/dz = ±g(1-g)
    let (q, w, sign) = if fake { (g, alpha, 1.0) } else { (1.0 - g, 1.0 - alpha, -1.0) };
    let from_modulation = if gamma == 0.0 { 0.0 } else { gamma * modulation(1.0 - q, gamma) * q * q.max(PROB_FLOOR).ln() };
    let from_log = if q >= PROB_FLOOR { modulation(1.0 - q, gamma + 1.0) } else { 0.0 };
    sign * w * (from_modulation - from_log)
}

/// Loss and its gradient with respect to every parameter.
pub fn loss_and_grad(
    batch: &FdmBatch,
    params: &FdmParams,
    fp: &FocalParams,
    lw: &LossWeights,
) -> Result<(LossBreakdown, FdmParams), FdmError> {
    batch.validate(&params.dims)?;
    let dims = params.dims;
    let x = &batch.features;
    let n = x.nrows() as f64;
    let out = fdm_forward(x, params)?;
    let loss = LossBreakdown::combine(
        identity_focal_loss(&out.identity_probs, &batch.identity, fp)?,
        forgery_focal_loss(&out.forgery_prob, &batch.fake, fp)?,
        recon_loss(x, &out.reconstruction)?,
        lw,
    );

    // identity logits
    let mut d_id_logits = -out.identity_probs.clone();
    for (i, mut row) in d_id_logits.rows_mut().into_iter().enumerate() {
        let y = batch.identity[i];
        row[y] += 1.0;
        let p = out.identity_probs[[i, y]];
        let k = identity_logit_scale(p, fp.class_weight(y, dims.identities), fp.gamma_identity);
        row *= lw.lambda1 * k / n;
    }
    // forgery logit
    let d_forge_logit: Array1<f64> = out
        .forgery_prob
        .iter()
        .zip(&batch.fake)
        .map(|(&g, &fake)| lw.lambda2 * forgery_logit_grad(g, fake, fp.alpha_forgery, fp.gamma_forgery) / n)
        .collect();
    let d_forge_logit = d_forge_logit.insert_axis(Axis(1));
    // reconstruction
    let d_recon = (&out.reconstruction - x) * (2.0 * lw.lambda3 / n);

    let joined = concatenate(Axis(1), &[out.identity.view(), out.structural.view(), out.forgery.view()]).expect("same rows");
    let mut grad = FdmParams::zeros(dims);
    grad.decoder.weight = d_recon.t().dot(&joined);
    grad.decoder.bias = d_recon.sum_axis(Axis(0));
    let d_joined = d_recon.dot(&params.decoder.weight);
    let (di, ds) = (dims.identity, dims.structural);

    grad.identity_head.weight = d_id_logits.t().dot(&out.identity);
    grad.identity_head.bias = d_id_logits.sum_axis(Axis(0));
    let d_identity = d_id_logits.dot(&params.identity_head.weight) + d_joined.slice(s![.., ..di]);

    grad.forgery_head.weight = d_forge_logit.t().dot(&out.forgery);
    grad.forgery_head.bias = d_forge_logit.sum_axis(Axis(0));
    let d_forgery = d_forge_logit.dot(&params.forgery_head.weight) + d_joined.slice(s![.., di + ds..]);

    let d_structural = d_joined.slice(s![.., di..di + ds]).to_owned();

    for (layer, d) in [
        (&mut grad.identity_proj, &d_identity),
        (&mut grad.structural_proj, &d_structural),
        (&mut grad.forgery_proj, &d_forgery),
    ] {
        layer.weight = d.t().dot(x);
        layer.bias = d.sum_axis(Axis(0));
    }
    Ok((loss, grad))
}

/// Largest relative error between analytic and central-difference gradients
/// over every parameter.
///
/// Relative error is `|a - f| / max(|a|, |f|, GRAD_CHECK_FLOOR)`.
pub fn grad_check(params: &FdmParams, batch: &FdmBatch, fp: &FocalParams, lw: &LossWeights, h: f64) -> Result<f64, FdmError> {
    let (_, analytic) = loss_and_grad(batch, params, fp, lw)?;
    let analytic = analytic.to_flat();
    let base = params.to_flat();
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    let mut shifted = base.clone();
    for (i, &a) in analytic.iter().enumerate() {
        shifted[i] = base[i] + h;
        probe.set_flat(&shifted);
        let up = total_loss(batch, &probe, fp, lw)?.total;
        shifted[i] = base[i] - h;
        probe.set_flat(&shifted);
        let down = total_loss(batch, &probe, fp, lw)?.total;
        shifted[i] = base[i];
        let fd = (up - down) / (2.0 * h);
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Denominator floor for [`grad_check`]; gradients smaller than this are
/// compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-8;

/// Synthetic factorized features: identity prototype + isotropic noise, plus
/// a fixed forgery direction for fake samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub identities: usize,
    pub samples: usize,
    pub feature_dim: usize,
    pub forgery_shift: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { identities: 8, samples: 2048, feature_dim: 64, forgery_shift: 2.0, noise: 0.5, seed: 17 }
    }
}

/// Fixed latent factors from which samples are drawn.
#[derive(Debug, Clone)]
pub struct SynthFactors {
    pub prototypes: Array2<f64>,
    /// Unit vector orthogonal to every prototype.
    pub forgery_direction: Array1<f64>,
    pub forgery_shift: f64,
    pub noise: f64,
}

impl SynthFactors {
    pub fn new<R: Rng>(identities: usize, feature_dim: usize, forgery_shift: f64, noise: f64, rng: &mut R) -> Self {
        let mut u: Array1<f64> = Array1::from_shape_fn(feature_dim, |_| std_normal(rng));
        u /= u.dot(&u).sqrt();
        let mut prototypes = Array2::from_shape_fn((identities, feature_dim), |_| std_normal(rng));
        for mut row in prototypes.rows_mut() {
            let along = row.dot(&u);
            row.scaled_add(-along, &u);
        }
        Self { prototypes, forgery_direction: u, forgery_shift, noise }
    }

    /// `n` samples, balanced over identities and over real/fake within each
    /// identity, in shuffled order.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> FdmBatch {
        let (m, f) = self.prototypes.dim();
        let mut labels: Vec<(usize, bool)> = (0..n).map(|i| (i % m, (i / m) % 2 == 1)).collect();
        labels.shuffle(rng);
        let noise = Normal::new(0.0, self.noise.max(0.0)).expect("finite noise");
        let mut features = Array2::zeros((n, f));
        for (mut row, &(id, fake)) in features.rows_mut().into_iter().zip(&labels) {
            row.assign(&self.prototypes.row(id));
            row.mapv_inplace(|v| v + noise.sample(rng));
            if fake {
                row.scaled_add(self.forgery_shift, &self.forgery_direction);
            }
        }
        FdmBatch {
            features,
            identity: labels.iter().map(|l| l.0).collect(),
            fake: labels.iter().map(|l| l.1).collect(),
        }
    }
}

pub fn synth_dataset(cfg: &SynthConfig) -> Result<(SynthFactors, FdmBatch), FdmError> {
    if cfg.identities < 2 || cfg.samples < cfg.identities {
        return Err(FdmError::InvalidConfig("need identities >= 2 and samples >= identities".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let factors = SynthFactors::new(cfg.identities, cfg.feature_dim, cfg.forgery_shift, cfg.noise, &mut rng);
    let batch = factors.sample(cfg.samples, &mut rng);
    Ok((factors, batch))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FdmConfig {
    pub identity_dim: usize,
    pub structural_dim: usize,
    pub forgery_dim: usize,
    pub data: SynthConfig,
    pub holdout_samples: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub focal: FocalParams,
    pub loss_weights: LossWeights,
}

impl Default for FdmConfig {
    fn default() -> Self {
        Self {
            identity_dim: 24,
            structural_dim: 24,
            forgery_dim: 16,
            data: SynthConfig::default(),
            holdout_samples: 1024,
            steps: 500,
            learning_rate: 0.5,
            focal: FocalParams::default(),
            loss_weights: LossWeights::default(),
        }
    }
}

impl FdmConfig {
    pub fn dims(&self) -> FdmDims {
        FdmDims {
            feature: self.data.feature_dim,
            identity: self.identity_dim,
            structural: self.structural_dim,
            forgery: self.forgery_dim,
            identities: self.data.identities,
        }
    }

    pub fn validate(&self) -> Result<(), FdmError> {
        self.dims().validate()?;
        self.focal.validate(self.data.identities)?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(FdmError::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.holdout_samples < 2 {
            return Err(FdmError::InvalidConfig("holdout_samples must be >= 2".into()));
        }
        let lw = &self.loss_weights;
        if [lw.lambda1, lw.lambda2, lw.lambda3].iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(FdmError::InvalidConfig("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdmMetrics {
    pub forgery_accuracy: f64,
    pub identity_accuracy: f64,
    pub forgery_auc: f64,
    pub holdout_loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStep {
    pub step: usize,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct FdmTrainOutcome {
    pub params: FdmParams,
    pub metrics: FdmMetrics,
    pub trajectory: Vec<TrainStep>,
}

/// Full-batch gradient descent on synthetic data, evaluated on a held-out
/// draw from the same factors.
pub fn train_fdm(cfg: &FdmConfig) -> Result<FdmTrainOutcome, FdmError> {
    cfg.validate()?;
    let (factors, train) = synth_dataset(&cfg.data)?;
    let mut holdout_rng = ChaCha8Rng::seed_from_u64(cfg.data.seed ^ 0x9e37_79b9_7f4a_7c15);
    let holdout = factors.sample(cfg.holdout_samples, &mut holdout_rng);
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.data.seed.wrapping_add(1));
    let mut params = FdmParams::init(cfg.dims(), &mut init_rng);

    let mut trajectory = Vec::with_capacity(cfg.steps + 1);
    for step in 0..cfg.steps {
        let (loss, grad) = loss_and_grad(&train, &params, &cfg.focal, &cfg.loss_weights)?;
        if !loss.total.is_finite() {
            return Err(FdmError::Diverged { step, loss: loss.total });
        }
        trajectory.push(TrainStep { step, loss });
        params.descend(&grad, cfg.learning_rate);
    }
    let last = total_loss(&train, &params, &cfg.focal, &cfg.loss_weights)?;
    if !last.total.is_finite() {
        return Err(FdmError::Diverged { step: cfg.steps, loss: last.total });
    }
    trajectory.push(TrainStep { step: cfg.steps, loss: last });

    let metrics = evaluate_fdm(&params, &holdout, &cfg.focal, &cfg.loss_weights)?;
    Ok(FdmTrainOutcome { params, metrics, trajectory })
}

/// Held-out metrics; a sample is called fake when its forgery probability
/// is at least 0.5.
pub fn evaluate_fdm(params: &FdmParams, batch: &FdmBatch, fp: &FocalParams, lw: &LossWeights) -> Result<FdmMetrics, FdmError> {
    let out = fdm_forward(&batch.features, params)?;
    let n = batch.len() as f64;
    let forgery_hits = out.forgery_prob.iter().zip(&batch.fake).filter(|(&g, &fake)| (g >= 0.5) == fake).count();
    let identity_hits = out
        .identity_probs
        .rows()
        .into_iter()
        .zip(&batch.identity)
        .filter(|(row, &y)| {
            let best = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(j, _)| j);
            best == Some(y)
        })
        .count();
    let forgery_auc = metrics::auc(out.forgery_prob.as_slice().expect("contiguous"), &batch.fake).unwrap_or(f64::NAN);
    Ok(FdmMetrics {
        forgery_accuracy: forgery_hits as f64 / n,
        identity_accuracy: identity_hits as f64 / n,
        forgery_auc,
        holdout_loss: total_loss(batch, params, fp, lw)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small_dims() -> FdmDims {
        FdmDims { feature: 8, identity: 3, structural: 3, forgery: 2, identities: 3 }
    }

    fn random_batch(dims: FdmDims, n: usize, rng: &mut ChaCha8Rng) -> FdmBatch {
        FdmBatch {
            features: Array2::from_shape_fn((n, dims.feature), |_| std_normal(rng)),
            identity: (0..n).map(|_| rng.random_range(0..dims.identities)).collect(),
            fake: (0..n).map(|_| rng.random_bool(0.5)).collect(),
        }
    }

    #[test]
    fn zero_model_is_uninformative() {
        let dims = small_dims();
        let p = FdmParams::zeros(dims);
        let (_, probs, g, recon) = fdm_forward_one(Array1::zeros(8).view(), &p).unwrap();
        assert!(probs.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(g, 0.5);
        assert!(recon.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_probabilities_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dims = small_dims();
        let p = FdmParams::random(dims, 1.0, &mut rng);
        let b = random_batch(dims, 32, &mut rng);
        let out = fdm_forward(&b.features, &p).unwrap();
        for row in out.identity_probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
        assert!(fdm_forward(&Array2::zeros((2, 5)), &p).is_err());
    }

    #[test]
    fn identity_focal_examples() {
        let fp0 = FocalParams::cross_entropy(2);
        let probs = array![[1.0, 0.0]];
        assert_eq!(identity_focal_loss(&probs, &[0], &FocalParams::default()).unwrap(), 0.0);
        let half = array![[0.5, 0.5]];
        assert!((identity_focal_loss(&half, &[0], &fp0).unwrap() - 2f64.ln()).abs() < 1e-15);
        let fp2 = FocalParams { gamma_identity: 2.0, ..fp0.clone() };
        for p in [0.01, 0.3, 0.5, 0.9, 0.999] {
            let probs = array![[p, 1.0 - p]];
            assert!(identity_focal_loss(&probs, &[0], &fp2).unwrap() <= identity_focal_loss(&probs, &[0], &fp0).unwrap());
        }
        assert!(identity_focal_loss(&half, &[2], &fp0).is_err());
        assert!(identity_focal_loss(&half, &[0, 1], &fp0).is_err());
        // floor keeps p = 0 finite
        assert!(identity_focal_loss(&array![[0.0, 1.0]], &[0], &fp0).unwrap().is_finite());
    }

    #[test]
    fn forgery_focal_examples() {
        let fp = FocalParams::default();
        assert_eq!(forgery_focal_loss(&array![1.0], &[true], &fp).unwrap(), 0.0);
        assert_eq!(forgery_focal_loss(&array![0.0], &[false], &fp).unwrap(), 0.0);
        assert_eq!(forgery_focal_loss(&array![1.0, 0.0], &[true, false], &FocalParams::cross_entropy(2)).unwrap(), 0.0);
        assert!(forgery_focal_loss(&array![0.0], &[true], &fp).unwrap().is_finite());
        let reduced = FocalParams { gamma_forgery: 0.0, alpha_forgery: 0.5, ..fp };
        let v = forgery_focal_loss(&array![0.5], &[true], &reduced).unwrap();
        assert!((v - 0.5 * 2f64.ln()).abs() < 1e-15);
        assert!((v - 0.346574).abs() < 1e-6);
    }

    #[test]
    fn recon_examples() {
        let f = Array2::<f64>::zeros((1, 4));
        let ones = Array2::<f64>::ones((1, 4));
        assert_eq!(recon_loss(&f, &f).unwrap(), 0.0);
        assert_eq!(recon_loss(&f, &ones).unwrap(), 4.0);
        assert_eq!(recon_loss(&f, &(&ones * 2.0)).unwrap(), 16.0);
        assert!(recon_loss(&f, &Array2::zeros((1, 3))).is_err());
    }

    #[test]
    fn total_loss_weighting() {
        let lw = LossWeights::default();
        let b = LossBreakdown::combine(1.0, 1.0, 1.0, &lw);
        assert!((b.total - 1.0002).abs() < 1e-15);
        assert_eq!(LossBreakdown::combine(0.0, 0.0, 0.0, &lw).total, 0.0);
        let doubled = LossWeights { lambda2: 2.0, ..lw };
        let (a, c) = (LossBreakdown::combine(0.3, 0.7, 0.2, &lw), LossBreakdown::combine(0.3, 0.7, 0.2, &doubled));
        assert!((c.total - a.total - 0.7).abs() < 1e-15);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let dims = small_dims();
        let p = FdmParams::random(dims, 0.5, &mut rng);
        let b = random_batch(dims, 6, &mut rng);
        for (fp, lw) in [
            (FocalParams::default(), LossWeights::default()),
            (FocalParams::cross_entropy(3), LossWeights { lambda1: 1.0, lambda2: 1.0, lambda3: 1.0 }),
            (FocalParams { gamma_identity: 0.5, gamma_forgery: 1.5, alpha_forgery: 0.3, alpha_identity: Some(vec![0.2, 1.0, 3.0]) }, LossWeights { lambda1: 0.7, lambda2: 0.2, lambda3: 0.05 }),
        ] {
            let err = grad_check(&p, &b, &fp, &lw, 1e-5).unwrap();
            assert!(err < 1e-4, "max relative error {err}");
        }
    }

    #[test]
    fn satisfied_labels_give_zero_gradient() {
        let dims = small_dims();
        let mut p = FdmParams::zeros(dims);
        p.identity_head.bias[1] = 60.0;
        p.forgery_head.bias[0] = 60.0;
        let b = FdmBatch { features: Array2::zeros((4, 8)), identity: vec![1; 4], fake: vec![true; 4] };
        let (loss, grad) = loss_and_grad(&b, &p, &FocalParams::default(), &LossWeights::default()).unwrap();
        assert!(loss.total.abs() < 1e-20, "{}", loss.total);
        assert!(grad.norm() < 1e-8, "{}", grad.norm());
    }

    #[test]
    fn grad_check_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let p = FdmParams::random(small_dims(), 0.5, &mut rng);
            let b = random_batch(small_dims(), 5, &mut rng);
            grad_check(&p, &b, &FocalParams::default(), &LossWeights::default(), 1e-5).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn flat_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = FdmParams::random(small_dims(), 1.0, &mut rng);
        let mut q = FdmParams::zeros(small_dims());
        q.set_flat(&p.to_flat());
        assert_eq!(p, q);
    }

    #[test]
    fn synth_is_balanced_and_seeded() {
        let cfg = SynthConfig { samples: 64, ..Default::default() };
        let (_, a) = synth_dataset(&cfg).unwrap();
        let (_, b) = synth_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fake.iter().filter(|&&f| f).count(), 32);
        for id in 0..8 {
            assert_eq!(a.identity.iter().filter(|&&y| y == id).count(), 8);
        }
        assert!(synth_dataset(&SynthConfig { identities: 1, ..cfg.clone() }).is_err());
        assert!(synth_dataset(&SynthConfig { samples: 4, ..cfg }).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(FdmConfig::default().validate().is_ok());
        assert!(FdmConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        let bad_alpha = FocalParams { alpha_identity: Some(vec![1.0; 3]), ..Default::default() };
        assert!(FdmConfig { focal: bad_alpha, ..Default::default() }.validate().is_err());
    }
}
