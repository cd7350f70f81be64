//! End-to-end desk benchmark: victim training, perturbation, pooling, kernel
//! SVM classification, and the average/max pooling baselines.

use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{generate, Dataset, Split, SynthSpec};
use crate::error::{DspError, Result};
use crate::kernel_svm::{accuracy, select_model, KernelKind, KernelSvm, SelectionParams, SmoParams};
use crate::perturb::{compute_uap, stack_rows, train_softmax, GaussianMoments, NoiseSource, SoftmaxModel, TrainParams, UapOutcome, UapParams};
use crate::pool::{dataset_delta, pool_many, DspParams, PoolOutcome, SegmentPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    Uap,
    Gaussian,
    Dropout,
}

impl NoiseKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uap" => Ok(NoiseKind::Uap),
            "gaussian" => Ok(NoiseKind::Gaussian),
            "dropout" => Ok(NoiseKind::Dropout),
            other => Err(DspError::param(format!("unknown noise kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    Ap,
    Mp,
}

impl Baseline {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ap" => Ok(Baseline::Ap),
            "mp" => Ok(Baseline::Mp),
            other => Err(DspError::param(format!("unknown baseline {other:?} (expected ap or mp)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Baseline::Ap => "ap",
            Baseline::Mp => "mp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub synth: SynthSpec,
    pub train: TrainParams,
    pub uap: UapParams,
    pub dsp: DspParams,
    pub noise: NoiseKind,
    pub dropout_rate: f64,
    pub selection: SelectionParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            synth: SynthSpec::default(),
            train: TrainParams::default(),
            uap: UapParams::default(),
            dsp: DspParams::default(),
            noise: NoiseKind::Uap,
            dropout_rate: 0.5,
            selection: SelectionParams::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.uap.validate()?;
        self.dsp.validate(self.synth.dim)?;
        if !(0.0..=1.0).contains(&self.dropout_rate) {
            return Err(DspError::param("dropout_rate must lie in [0, 1]"));
        }
        if self.selection.folds < 2 || self.selection.kernel_grid.is_empty() || self.selection.c_grid.is_empty() {
            return Err(DspError::param("model selection needs >= 2 folds and non-empty grids"));
        }
        if self.selection.kernel_grid.iter().chain(&self.selection.c_grid).any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(DspError::param("kernel and C grids must hold positive finite values"));
        }
        Ok(())
    }

    /// Same configuration with every seed replaced by `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.synth.seed = seed;
        cfg.dsp.rcg.seed = seed;
        cfg.selection.seed = seed;
        cfg
    }
}

/// Victim model and its perturbation.
#[derive(Debug, Clone)]
pub struct Victim {
    pub model: SoftmaxModel,
    pub train_accuracy: f64,
    pub uap: UapOutcome,
}

/// Per-frame training set of a split.
pub fn frame_matrix(ds: &Dataset, split: Split) -> Result<(DMatrix<f64>, Vec<usize>)> {
    let (xs, ys) = ds.frames(split);
    Ok((stack_rows(&xs)?, ys))
}

pub fn train_victim(ds: &Dataset, train: &TrainParams, uap: &UapParams) -> Result<Victim> {
    let (x, y) = frame_matrix(ds, Split::Train)?;
    let report = train_softmax(&x, &y, train)?;
    let outcome = compute_uap(&report.model, &x, uap)?;
    Ok(Victim { model: report.model, train_accuracy: report.accuracy, uap: outcome })
}

/// Negative-bag source for the configured noise kind.
pub fn noise_source(ds: &Dataset, kind: NoiseKind, victim: Option<&Victim>, dropout_rate: f64) -> Result<NoiseSource> {
    Ok(match kind {
        NoiseKind::Uap => {
            let v = victim.ok_or_else(|| DspError::param("uap noise needs a trained victim"))?;
            NoiseSource::Uap(v.uap.perturbation.clone())
        }
        NoiseKind::Gaussian => {
            let (x, _) = frame_matrix(ds, Split::Train)?;
            NoiseSource::Gaussian(GaussianMoments::from_features(&x)?)
        }
        NoiseKind::Dropout => NoiseSource::Dropout(dropout_rate),
    })
}

/// Resolves a dataset-mean segment length from the training split.
pub fn resolve_params(ds: &Dataset, params: &DspParams) -> Result<DspParams> {
    let mut out = params.clone();
    if params.segment_policy == SegmentPolicy::DatasetMean && params.delta.is_none() {
        let train = ds.indices(Split::Train);
        out.delta = Some(dataset_delta(train.iter().map(|&i| &ds.sequences[i]), params.delta_min)?);
    }
    Ok(out)
}

pub fn pool_dataset(ds: &Dataset, noise: &NoiseSource, params: &DspParams) -> Result<Vec<PoolOutcome>> {
    let resolved = resolve_params(ds, params)?;
    pool_many(&ds.sequences, noise, &resolved)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub sequence_id: String,
    pub true_label: usize,
    pub predicted_label: usize,
    pub margins: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MethodResult {
    pub name: String,
    pub kernel: KernelKind,
    pub c: f64,
    pub cv_accuracy: f64,
    pub test_accuracy: f64,
    pub model: KernelSvm,
    pub predictions: Vec<Prediction>,
}

/// Projection kernels `β = m/p` for each grid multiplier `m`.
pub fn projection_kernels(p: usize, grid: &[f64]) -> Vec<KernelKind> {
    grid.iter().map(|m| KernelKind::Projection { beta: m / p as f64 }).collect()
}

/// RBF kernels `γ = m/σ²`, with `σ²` the mean squared distance between
/// training items.
pub fn rbf_kernels(train: &[DMatrix<f64>], grid: &[f64]) -> Vec<KernelKind> {
    let n = train.len();
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            total += (&train[i] - &train[j]).norm_squared();
            count += 1;
        }
    }
    let scale = if count > 0 && total > 0.0 { total / count as f64 } else { 1.0 };
    grid.iter().map(|m| KernelKind::Rbf { gamma: m / scale }).collect()
}

/// Model selection on the training items, refit, and test evaluation.
pub fn evaluate(
    name: &str,
    items: &[DMatrix<f64>],
    ds: &Dataset,
    kernels: &[KernelKind],
    selection: &SelectionParams,
) -> Result<MethodResult> {
    let train = ds.indices(Split::Train);
    let test = ds.indices(Split::Test);
    let labels = ds.labels();
    let train_items: Vec<DMatrix<f64>> = train.iter().map(|&i| items[i].clone()).collect();
    let train_labels: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let chosen = select_model(&train_items, &train_labels, kernels, selection)?;
    let smo = SmoParams { c: chosen.c, tol: selection.tol, ..SmoParams::default() };
    let model = KernelSvm::fit(&train_items, &train_labels, chosen.kernel, &smo)?;
    let mut predictions = Vec::with_capacity(test.len());
    for &i in &test {
        let margins = model.decisions(&items[i])?;
        let predicted_label = model.predict(&items[i])?;
        predictions.push(Prediction {
            sequence_id: ds.sequences[i].id.clone(),
            true_label: labels[i],
            predicted_label,
            margins,
        });
    }
    let predicted: Vec<usize> = predictions.iter().map(|p| p.predicted_label).collect();
    let truth: Vec<usize> = predictions.iter().map(|p| p.true_label).collect();
    Ok(MethodResult {
        name: name.to_string(),
        kernel: chosen.kernel,
        c: chosen.c,
        cv_accuracy: chosen.cv_accuracy,
        test_accuracy: accuracy(&predicted, &truth),
        model,
        predictions,
    })
}

/// Mean- or max-pooled frame vectors as `d × 1` matrices.
pub fn baseline_features(ds: &Dataset, kind: Baseline) -> Vec<DMatrix<f64>> {
    ds.sequences
        .iter()
        .map(|s| {
            let x = s.frames();
            DMatrix::from_fn(x.ncols(), 1, |j, _| match kind {
                Baseline::Ap => x.column(j).mean(),
                Baseline::Mp => x.column(j).max(),
            })
        })
        .collect()
}

pub fn run_baseline(ds: &Dataset, kind: Baseline, selection: &SelectionParams) -> Result<MethodResult> {
    let items = baseline_features(ds, kind);
    let train: Vec<DMatrix<f64>> = ds.indices(Split::Train).iter().map(|&i| items[i].clone()).collect();
    let kernels = rbf_kernels(&train, &selection.kernel_grid);
    evaluate(kind.name(), &items, ds, &kernels, selection)
}

/// DSP descriptors of every sequence in `ds`, classified with the projection
/// kernel SVM.
pub fn run_dsp(ds: &Dataset, noise: &NoiseSource, params: &DspParams, selection: &SelectionParams) -> Result<(MethodResult, Vec<PoolOutcome>)> {
    let pooled = pool_dataset(ds, noise, params)?;
    let items: Vec<DMatrix<f64>> = pooled.iter().map(|o| o.descriptor.matrix().clone()).collect();
    let kernels = projection_kernels(params.p, &selection.kernel_grid);
    Ok((evaluate("dsp", &items, ds, &kernels, selection)?, pooled))
}

#[derive(Debug, Clone)]
pub struct BenchmarkReport {
    pub seed: u64,
    pub victim_accuracy: f64,
    pub fooling_rate: f64,
    pub uap_converged: bool,
    pub dsp: MethodResult,
    pub ap: MethodResult,
    pub mp: MethodResult,
    pub pool_seconds: f64,
    pub frames: usize,
}

/// Full desk benchmark for one configuration.
pub fn run_benchmark(cfg: &ExperimentConfig) -> Result<BenchmarkReport> {
    cfg.validate()?;
    let ds = generate(&cfg.synth)?;
    let victim = train_victim(&ds, &cfg.train, &cfg.uap)?;
    let noise = noise_source(&ds, cfg.noise, Some(&victim), cfg.dropout_rate)?;
    let start = Instant::now();
    let (dsp, _) = run_dsp(&ds, &noise, &cfg.dsp, &cfg.selection)?;
    let pool_seconds = start.elapsed().as_secs_f64();
    let ap = run_baseline(&ds, Baseline::Ap, &cfg.selection)?;
    let mp = run_baseline(&ds, Baseline::Mp, &cfg.selection)?;
    Ok(BenchmarkReport {
        seed: cfg.synth.seed,
        victim_accuracy: victim.train_accuracy,
        fooling_rate: victim.uap.perturbation.achieved_fooling_rate,
        uap_converged: victim.uap.converged,
        dsp,
        ap,
        mp,
        pool_seconds,
        frames: ds.sequences.iter().map(|s| s.len()).sum(),
    })
}

/// DSP test accuracy only (no baselines), for ablations.
pub fn run_dsp_only(cfg: &ExperimentConfig) -> Result<f64> {
    cfg.validate()?;
    let ds = generate(&cfg.synth)?;
    let victim = match cfg.noise {
        NoiseKind::Uap => Some(train_victim(&ds, &cfg.train, &cfg.uap)?),
        _ => None,
    };
    let noise = noise_source(&ds, cfg.noise, victim.as_ref(), cfg.dropout_rate)?;
    Ok(run_dsp(&ds, &noise, &cfg.dsp, &cfg.selection)?.0.test_accuracy)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.synth.classes = 3;
        cfg.synth.per_class = 10;
        cfg.synth.dim = 12;
        cfg.synth.signal_dims = 4;
        cfg.synth.n_min = 8;
        cfg.synth.n_max = 12;
        cfg.dsp.p = 2;
        cfg.dsp.rcg.max_iters = 10;
        cfg.selection.folds = 2;
        cfg.selection.kernel_grid = vec![1.0];
        cfg.selection.c_grid = vec![1.0];
        cfg.uap.max_epochs = 20;
        cfg
    }

    #[test]
    fn small_benchmark_runs_and_is_deterministic() {
        let cfg = small();
        let a = run_benchmark(&cfg).unwrap();
        let b = run_benchmark(&cfg).unwrap();
        assert_eq!(a.dsp.predictions, b.dsp.predictions);
        assert_eq!(a.ap.test_accuracy, b.ap.test_accuracy);
        assert_eq!(a.dsp.predictions.len(), 6);
        for r in [&a.dsp, &a.ap, &a.mp] {
            assert!((0.0..=1.0).contains(&r.test_accuracy));
        }
    }

    #[test]
    fn dataset_mean_policy_resolves_delta() {
        let cfg = small();
        let ds = generate(&cfg.synth).unwrap();
        let params = DspParams { segment_policy: SegmentPolicy::DatasetMean, ..cfg.dsp };
        let resolved = resolve_params(&ds, &params).unwrap();
        assert!(resolved.delta.unwrap() >= 2);
    }

    #[test]
    fn baseline_features_pool_frames() {
        let cfg = small();
        let ds = generate(&cfg.synth).unwrap();
        let seq = &ds.sequences[0];
        let ap = baseline_features(&ds, Baseline::Ap);
        let mp = baseline_features(&ds, Baseline::Mp);
        let col = seq.frames().column(3);
        assert!((ap[0][(3, 0)] - col.mean()).abs() <= 1e-12);
        assert_eq!(mp[0][(3, 0)], col.max());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut cfg = small();
        cfg.selection.c_grid = vec![-1.0];
        assert!(cfg.validate().is_err());
        let mut cfg = small();
        cfg.dsp.p = 100;
        assert!(cfg.validate().is_err());
    }
}
