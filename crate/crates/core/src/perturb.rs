//! Victim classifier, universal adversarial perturbations and noise baselines.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::FeatureSequence;
use crate::error::{DspError, Result};
use crate::io::{dim_u32, read_file, write_file, Decoder, Encoder, PERTURBATION_MAGIC, VICTIM_MAGIC};
use crate::pool::NegativeBag;

/// Stacks feature vectors as the rows of a matrix.
pub fn stack_rows(features: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    let d = features.first().map_or(0, |f| f.len());
    if let Some(bad) = features.iter().find(|f| f.len() != d) {
        return Err(DspError::dim("feature list", d, bad.len()));
    }
    Ok(DMatrix::from_fn(features.len(), d, |i, j| features[i][j]))
}

fn softmax_rows(logits: &mut DMatrix<f64>) {
    for mut row in logits.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

fn argmax(row: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, v) in row.enumerate() {
        if v > best.1 {
            best = (k, v);
        }
    }
    best.0
}

/// Linear softmax classifier `softmax(Wᵀx + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxModel {
    weights: DMatrix<f64>,
    bias: DVector<f64>,
}

impl SoftmaxModel {
    pub fn new(weights: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        if weights.ncols() != bias.len() {
            return Err(DspError::dim("softmax bias", weights.ncols(), bias.len()));
        }
        if weights.ncols() < 2 {
            return Err(DspError::DegenerateLabels { classes: weights.ncols() });
        }
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(DspError::NonFinite { iteration: 0, what: "softmax parameters" });
        }
        Ok(SoftmaxModel { weights, bias })
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn bias(&self) -> &DVector<f64> {
        &self.bias
    }

    pub fn classes(&self) -> usize {
        self.weights.ncols()
    }

    pub fn dim(&self) -> usize {
        self.weights.nrows()
    }

    fn check(&self, features: &DMatrix<f64>) -> Result<()> {
        if features.ncols() != self.dim() {
            return Err(DspError::dim("softmax input", self.dim(), features.ncols()));
        }
        Ok(())
    }

    /// Logits for every row of `features` (`N × K`).
    pub fn logits(&self, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(features)?;
        let mut out = features * &self.weights;
        for mut row in out.row_iter_mut() {
            row += self.bias.transpose();
        }
        Ok(out)
    }

    pub fn probabilities(&self, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut p = self.logits(features)?;
        softmax_rows(&mut p);
        Ok(p)
    }

    /// Predicted class per row; ties go to the lowest class id.
    pub fn predict(&self, features: &DMatrix<f64>) -> Result<Vec<usize>> {
        Ok(self.logits(features)?.row_iter().map(|r| argmax(r.iter().copied())).collect())
    }

    /// Predictions on `features + ε` (ε added to every row).
    pub fn predict_shifted(&self, features: &DMatrix<f64>, epsilon: &DVector<f64>) -> Result<Vec<usize>> {
        if epsilon.len() != self.dim() {
            return Err(DspError::dim("perturbation", self.dim(), epsilon.len()));
        }
        self.check(features)?;
        let shift = (self.weights.transpose() * epsilon + &self.bias).transpose();
        let mut logits = features * &self.weights;
        for mut row in logits.row_iter_mut() {
            row += &shift;
        }
        Ok(logits.row_iter().map(|r| argmax(r.iter().copied())).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainParams {
    pub epochs: usize,
    pub lr: f64,
    /// Train on per-dimension standardized features; the affine map is
    /// folded back into the returned weights.
    pub standardize: bool,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams { epochs: 300, lr: 0.5, standardize: true }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: SoftmaxModel,
    pub accuracy: f64,
    /// Mean cross-entropy before each epoch's update, then after the last.
    pub losses: Vec<f64>,
}

fn mean_cross_entropy(probs: &DMatrix<f64>, labels: &[usize]) -> f64 {
    let total: f64 = labels.iter().enumerate().map(|(i, &y)| -probs[(i, y)].max(f64::MIN_POSITIVE).ln()).sum();
    total / labels.len() as f64
}

/// Full-batch gradient descent on the mean cross-entropy.
pub fn train_softmax(features: &DMatrix<f64>, labels: &[usize], params: &TrainParams) -> Result<TrainReport> {
    let (n, d) = features.shape();
    if labels.len() != n {
        return Err(DspError::dim("training labels", n, labels.len()));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(DspError::NonFinite { iteration: 0, what: "training features" });
    }
    if !(params.lr > 0.0 && params.lr.is_finite()) || params.epochs == 0 {
        return Err(DspError::param("training needs epochs >= 1 and a positive learning rate"));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut present = vec![false; classes];
    for &y in labels {
        present[y] = true;
    }
    let distinct = present.iter().filter(|&&p| p).count();
    if distinct < 2 {
        return Err(DspError::DegenerateLabels { classes: distinct });
    }

    let (mean, scale) = if params.standardize {
        let mean = DVector::from_fn(d, |j, _| features.column(j).mean());
        let scale = DVector::from_fn(d, |j, _| {
            let sd = features.column(j).variance().sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        });
        (mean, scale)
    } else {
        (DVector::zeros(d), DVector::from_element(d, 1.0))
    };
    let x = DMatrix::from_fn(n, d, |i, j| (features[(i, j)] - mean[j]) / scale[j]);
    let onehot = DMatrix::from_fn(n, classes, |i, k| if labels[i] == k { 1.0 } else { 0.0 });

    let mut w = DMatrix::<f64>::zeros(d, classes);
    let mut b = DVector::<f64>::zeros(classes);
    let mut losses = Vec::with_capacity(params.epochs + 1);
    let forward = |w: &DMatrix<f64>, b: &DVector<f64>| {
        let mut p = &x * w;
        for mut row in p.row_iter_mut() {
            row += b.transpose();
        }
        softmax_rows(&mut p);
        p
    };
    for epoch in 0..params.epochs {
        let probs = forward(&w, &b);
        let loss = mean_cross_entropy(&probs, labels);
        if !loss.is_finite() {
            return Err(DspError::NonFinite { iteration: epoch, what: "training loss" });
        }
        losses.push(loss);
        let residual = (probs - &onehot) / n as f64;
        let gw = x.transpose() * &residual;
        let gb = DVector::from_fn(classes, |k, _| residual.column(k).sum());
        w -= gw * params.lr;
        b -= gb * params.lr;
    }
    let probs = forward(&w, &b);
    losses.push(mean_cross_entropy(&probs, labels));

    // Fold the standardization: Wᵀ((x − μ)/σ) + b = (W/σ)ᵀx + (b − (W/σ)ᵀμ).
    let folded = DMatrix::from_fn(d, classes, |j, k| w[(j, k)] / scale[j]);
    let bias = &b - folded.transpose() * &mean;
    let model = SoftmaxModel::new(folded, bias)?;
    let predictions = model.predict(features)?;
    let correct = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(TrainReport { model, accuracy: correct as f64 / n as f64, losses })
}

/// Fraction of rows whose predicted class changes under `+ε`.
pub fn fooling_rate(model: &SoftmaxModel, features: &DMatrix<f64>, epsilon: &DVector<f64>) -> Result<f64> {
    if features.nrows() == 0 {
        return Ok(0.0);
    }
    let clean = model.predict(features)?;
    let shifted = model.predict_shifted(features, epsilon)?;
    let flipped = clean.iter().zip(&shifted).filter(|(a, b)| a != b).count();
    Ok(flipped as f64 / clean.len() as f64)
}

/// A universal perturbation with its budget and outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub epsilon: DVector<f64>,
    pub rho: f64,
    pub psi: f64,
    pub achieved_fooling_rate: f64,
}

impl Perturbation {
    pub fn from_epsilon(epsilon: DVector<f64>, rho: f64, psi: f64, achieved_fooling_rate: f64) -> Self {
        Perturbation { epsilon, rho, psi, achieved_fooling_rate }
    }

    pub fn zeros(d: usize) -> Self {
        Perturbation::from_epsilon(DVector::zeros(d), 0.0, 0.0, 0.0)
    }

    pub fn dim(&self) -> usize {
        self.epsilon.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UapParams {
    /// Target fooling rate.
    pub psi: f64,
    /// Budget as a fraction of the mean feature norm, used when `rho` is unset.
    pub rho_frac: f64,
    pub rho: Option<f64>,
    pub inner_steps: usize,
    pub inner_lr: f64,
    /// Weight of the `‖r‖²` pull-back in the inner ascent.
    pub penalty: f64,
    pub max_epochs: usize,
}

impl Default for UapParams {
    fn default() -> Self {
        UapParams { psi: 0.8, rho_frac: 0.1, rho: None, inner_steps: 5, inner_lr: 0.1, penalty: 0.1, max_epochs: 200 }
    }
}

impl UapParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.psi) {
            return Err(DspError::param(format!("psi must lie in [0, 1), got {}", self.psi)));
        }
        if let Some(rho) = self.rho {
            if !(rho > 0.0 && rho.is_finite()) {
                return Err(DspError::param(format!("rho must be positive, got {rho}")));
            }
        } else if !(self.rho_frac > 0.0 && self.rho_frac.is_finite()) {
            return Err(DspError::param(format!("rho_frac must be positive, got {}", self.rho_frac)));
        }
        if !(self.inner_lr > 0.0) || self.penalty < 0.0 || self.max_epochs == 0 {
            return Err(DspError::param("uap needs inner_lr > 0, penalty >= 0, max_epochs >= 1"));
        }
        Ok(())
    }

    pub fn resolve_rho(&self, features: &DMatrix<f64>) -> f64 {
        self.rho.unwrap_or_else(|| {
            let mean_norm = features.row_iter().map(|r| r.norm()).sum::<f64>() / features.nrows().max(1) as f64;
            self.rho_frac * mean_norm
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UapEpoch {
    pub fooling_rate: f64,
    /// Mean cross-entropy of perturbed predictions against clean labels.
    pub cross_entropy: f64,
    pub norm: f64,
}

#[derive(Debug, Clone)]
pub struct UapOutcome {
    pub perturbation: Perturbation,
    pub converged: bool,
    pub history: Vec<UapEpoch>,
}

fn project_ball(v: &mut DVector<f64>, rho: f64) {
    let norm = v.norm();
    if norm > rho {
        *v *= rho / norm;
    }
}

/// Alternates penalized ascent on the cross-entropy of perturbed predictions
/// against the clean predicted labels with
/// projection onto the `ℓ2` ball of radius `rho` until the fooling rate
/// reaches `psi`.
pub fn compute_uap(model: &SoftmaxModel, features: &DMatrix<f64>, params: &UapParams) -> Result<UapOutcome> {
    params.validate()?;
    model.check(features)?;
    let n = features.nrows().max(1) as f64;
    let rho = params.resolve_rho(features);
    if !(rho > 0.0) {
        return Err(DspError::param(format!("rho must be positive, got {rho}")));
    }
    // Targets are the clean predicted labels: soft clean probabilities make
    // ε = 0 a stationary point of the ascent.
    let base = model.logits(features)?;
    let clean = {
        let labels = model.predict(features)?;
        DMatrix::from_fn(base.nrows(), base.ncols(), |i, k| if labels[i] == k { 1.0 } else { 0.0 })
    };
    let v = model.weights();
    // The ascent runs on isotropically rescaled unit-variance data, which in
    // raw coordinates multiplies the gradient by the mean feature variance.
    let scale = {
        let d = features.ncols().max(1) as f64;
        let mean_var = features.column_iter().map(|c| c.variance()).sum::<f64>() / d;
        if mean_var > 0.0 && mean_var.is_finite() {
            mean_var
        } else {
            1.0
        }
    };

    let perturbed = |shift: &DVector<f64>| {
        let offset = (v.transpose() * shift).transpose();
        let mut q = base.clone();
        for mut row in q.row_iter_mut() {
            row += &offset;
        }
        softmax_rows(&mut q);
        q
    };
    let cross_entropy = |q: &DMatrix<f64>| {
        let mut total = 0.0;
        for (pr, qr) in clean.row_iter().zip(q.row_iter()) {
            total -= pr.iter().zip(qr.iter()).map(|(p, q)| p * q.max(f64::MIN_POSITIVE).ln()).sum::<f64>();
        }
        total / n
    };

    let mut epsilon = DVector::zeros(model.dim());
    let mut rate = fooling_rate(model, features, &epsilon)?;
    let mut best = (rate, epsilon.clone());
    let mut history = Vec::new();
    let mut converged = rate >= params.psi;
    let mut epoch = 0;
    while !converged && epoch < params.max_epochs {
        let mut r = DVector::zeros(model.dim());
        for _ in 0..params.inner_steps {
            let q = perturbed(&(&epsilon + &r));
            let mean_diff = DVector::from_fn(q.ncols(), |k, _| (q.column(k) - clean.column(k)).sum() / n);
            let ascent = v * mean_diff * scale - &r * (2.0 * params.penalty);
            r += ascent * params.inner_lr;
        }
        epsilon += r;
        project_ball(&mut epsilon, rho);
        if epsilon.iter().any(|x| !x.is_finite()) {
            return Err(DspError::NonFinite { iteration: epoch, what: "perturbation" });
        }
        rate = fooling_rate(model, features, &epsilon)?;
        history.push(UapEpoch { fooling_rate: rate, cross_entropy: cross_entropy(&perturbed(&epsilon)), norm: epsilon.norm() });
        if rate > best.0 {
            best = (rate, epsilon.clone());
        }
        converged = rate >= params.psi;
        epoch += 1;
    }
    let (achieved, eps) = if converged { (rate, epsilon) } else { best };
    Ok(UapOutcome {
        perturbation: Perturbation { epsilon: eps, rho, psi: params.psi, achieved_fooling_rate: achieved },
        converged,
        history,
    })
}

/// Per-dimension mean and standard deviation of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMoments {
    pub mean: DVector<f64>,
    pub std: DVector<f64>,
}

impl GaussianMoments {
    pub fn from_features(features: &DMatrix<f64>) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(DspError::param("moments need at least one feature"));
        }
        let d = features.ncols();
        Ok(GaussianMoments {
            mean: DVector::from_fn(d, |j, _| features.column(j).mean()),
            std: DVector::from_fn(d, |j, _| features.column(j).variance().sqrt()),
        })
    }
}

/// `n` independent draws from `N(mean, diag(std²))`.
pub fn gaussian_noise(moments: &GaussianMoments, n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let d = moments.mean.len();
    let mut out = DMatrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            let g: f64 = rng.sample(StandardNormal);
            out[(i, j)] = moments.mean[j] + moments.std[j] * g;
        }
    }
    out
}

/// Zeroes each coordinate independently with probability `rate`.
pub fn dropout_noise(features: &DMatrix<f64>, rate: f64, rng: &mut impl Rng) -> Result<DMatrix<f64>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(DspError::param(format!("dropout rate must lie in [0, 1], got {rate}")));
    }
    let mut out = features.clone();
    for i in 0..out.nrows() {
        for j in 0..out.ncols() {
            if rng.random::<f64>() < rate {
                out[(i, j)] = 0.0;
            }
        }
    }
    Ok(out)
}

/// Source of the negative bag for pooling.
#[derive(Debug, Clone)]
pub enum NoiseSource {
    Uap(Perturbation),
    Gaussian(GaussianMoments),
    Dropout(f64),
}

impl NoiseSource {
    pub fn name(&self) -> &'static str {
        match self {
            NoiseSource::Uap(_) => "uap",
            NoiseSource::Gaussian(_) => "gaussian",
            NoiseSource::Dropout(_) => "dropout",
        }
    }
}

impl NegativeBag for NoiseSource {
    fn negative(&self, seq: &FeatureSequence, seed: u64) -> Result<DMatrix<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match self {
            NoiseSource::Uap(eps) => eps.negative(seq, seed),
            NoiseSource::Gaussian(m) => {
                if m.mean.len() != seq.dim() {
                    return Err(DspError::dim("gaussian moments", seq.dim(), m.mean.len()));
                }
                Ok(gaussian_noise(m, seq.len(), &mut rng))
            }
            NoiseSource::Dropout(rate) => dropout_noise(seq.frames(), *rate, &mut rng),
        }
    }
}

pub fn encode_perturbation(p: &Perturbation) -> Result<Vec<u8>> {
    let mut e = Encoder::new(PERTURBATION_MAGIC);
    e.u32(dim_u32(p.dim(), "perturbation dimension")?)
        .f64(p.rho)
        .f64(p.psi)
        .f64(p.achieved_fooling_rate)
        .f64s(p.epsilon.iter().copied());
    Ok(e.finish())
}

pub fn decode_perturbation(bytes: &[u8]) -> Result<Perturbation> {
    let mut dec = Decoder::new(bytes, PERTURBATION_MAGIC)?;
    let d = dec.usize()?;
    let rho = dec.f64()?;
    let psi = dec.f64()?;
    let achieved = dec.f64()?;
    let eps = dec.f64s(d)?;
    dec.finish()?;
    Ok(Perturbation::from_epsilon(DVector::from_vec(eps), rho, psi, achieved))
}

pub fn write_perturbation(p: &Perturbation, path: &Path) -> Result<()> {
    write_file(path, &encode_perturbation(p)?)
}

pub fn read_perturbation(path: &Path) -> Result<Perturbation> {
    decode_perturbation(&read_file(path)?)
}

pub fn encode_model(model: &SoftmaxModel) -> Result<Vec<u8>> {
    let mut e = Encoder::new(VICTIM_MAGIC);
    e.u32(dim_u32(model.dim(), "victim dimension")?)
        .u32(dim_u32(model.classes(), "victim classes")?)
        .matrix(&model.weights)
        .f64s(model.bias.iter().copied());
    Ok(e.finish())
}

pub fn decode_model(bytes: &[u8]) -> Result<SoftmaxModel> {
    let mut dec = Decoder::new(bytes, VICTIM_MAGIC)?;
    let d = dec.usize()?;
    let k = dec.usize()?;
    let weights = dec.matrix(d, k)?;
    let bias = dec.f64s(k)?;
    dec.finish()?;
    SoftmaxModel::new(weights, DVector::from_vec(bias))
}

pub fn write_model(model: &SoftmaxModel, path: &Path) -> Result<()> {
    write_file(path, &encode_model(model)?)
}

pub fn read_model(path: &Path) -> Result<SoftmaxModel> {
    decode_model(&read_file(path)?)
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn uap_stays_in_ball(seed in 0u64..500, rho_frac in 0.01f64..0.5, psi in 0.0f64..0.95) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (n, d, k) = (30, 4, 3);
            let x = DMatrix::from_fn(n, d, |i, j| rng.sample::<f64, _>(StandardNormal) + if j == i % k { 2.0 } else { 0.0 });
            let y: Vec<usize> = (0..n).map(|i| i % k).collect();
            let model = train_softmax(&x, &y, &TrainParams::default()).unwrap().model;
            let params = UapParams { psi, rho_frac, max_epochs: 20, ..UapParams::default() };
            let out = compute_uap(&model, &x, &params).unwrap();
            let rho = out.perturbation.rho;
            prop_assert!(out.perturbation.epsilon.norm() <= rho + 1e-12);
            prop_assert!(out.history.iter().all(|e| e.norm <= rho + 1e-12));
            prop_assert_eq!(fooling_rate(&model, &x, &out.perturbation.epsilon).unwrap(), out.perturbation.achieved_fooling_rate);
        }
    }
}
