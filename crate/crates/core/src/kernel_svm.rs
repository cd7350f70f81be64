//! Projection-metric kernel and a kernel SVM trained by SMO.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DspError, Result};
use crate::io::{dim_u32, read_file, write_file, Decoder, Encoder, MODEL_MAGIC};

/// Relative eigenvalue floor below which a Gram matrix is rejected.
pub const PSD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub beta: f64,
}

impl KernelParams {
    /// Default bandwidth `1/p`.
    pub fn for_rank(p: usize) -> Self {
        KernelParams { beta: 1.0 / p.max(1) as f64 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(DspError::param(format!("kernel beta must be finite and positive, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Kernel family used by a trained model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelKind {
    /// `exp(β‖W₁ᵀW₂‖²_F)` on `d × p` descriptors.
    Projection { beta: f64 },
    /// `exp(−γ‖a − b‖²)` on `d × 1` vectors.
    Rbf { gamma: f64 },
}

impl KernelKind {
    pub fn eval(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
        if a.shape() != b.shape() {
            return Err(DspError::dim(
                "kernel arguments",
                format!("{}x{}", a.nrows(), a.ncols()),
                format!("{}x{}", b.nrows(), b.ncols()),
            ));
        }
        Ok(match *self {
            KernelKind::Projection { beta } => (beta * (a.transpose() * b).norm_squared()).exp(),
            KernelKind::Rbf { gamma } => (-gamma * (a - b).norm_squared()).exp(),
        })
    }

    fn tag(&self) -> (u16, f64) {
        match *self {
            KernelKind::Projection { beta } => (0, beta),
            KernelKind::Rbf { gamma } => (1, gamma),
        }
    }
}

pub fn proj_kernel(w1: &DMatrix<f64>, w2: &DMatrix<f64>, params: &KernelParams) -> Result<f64> {
    params.validate()?;
    KernelKind::Projection { beta: params.beta }.eval(w1, w2)
}

fn check_uniform(items: &[DMatrix<f64>]) -> Result<()> {
    if let Some(first) = items.first() {
        if let Some(bad) = items.iter().find(|m| m.shape() != first.shape()) {
            return Err(DspError::dim(
                "descriptor set",
                format!("{}x{}", first.nrows(), first.ncols()),
                format!("{}x{}", bad.nrows(), bad.ncols()),
            ));
        }
    }
    Ok(())
}

/// Symmetric Gram matrix, assembled in parallel over rows of the upper triangle.
pub fn kernel_gram(items: &[DMatrix<f64>], kernel: KernelKind) -> Result<DMatrix<f64>> {
    check_uniform(items)?;
    let n = items.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (i..n).map(|j| kernel.eval(&items[i], &items[j])).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let mut g = DMatrix::zeros(n, n);
    for (i, row) in rows.iter().enumerate() {
        for (off, &v) in row.iter().enumerate() {
            g[(i, i + off)] = v;
            g[(i + off, i)] = v;
        }
    }
    Ok(g)
}

/// `K[a, b] = k(rows[a], cols[b])`.
pub fn cross_gram(rows: &[DMatrix<f64>], cols: &[DMatrix<f64>], kernel: KernelKind) -> Result<DMatrix<f64>> {
    check_uniform(rows)?;
    check_uniform(cols)?;
    let entries: Vec<Vec<f64>> = rows
        .par_iter()
        .map(|r| cols.iter().map(|c| kernel.eval(r, c)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(rows.len(), cols.len(), |i, j| entries[i][j]))
}

/// Projection-kernel Gram matrix of `d × p` descriptors.
pub fn gram(descriptors: &[DMatrix<f64>], params: &KernelParams) -> Result<DMatrix<f64>> {
    params.validate()?;
    kernel_gram(descriptors, KernelKind::Projection { beta: params.beta })
}

/// Extreme eigenvalues of a symmetric matrix.
pub fn eigen_range(g: &DMatrix<f64>) -> (f64, f64) {
    let eig = SymmetricEigen::new(g.clone());
    (eig.eigenvalues.min(), eig.eigenvalues.max())
}

/// Rejects a Gram matrix whose smallest eigenvalue is below `−1e−8·λ_max`.
pub fn check_psd(g: &DMatrix<f64>) -> Result<()> {
    if g.nrows() == 0 {
        return Ok(());
    }
    let (min_eig, max_eig) = eigen_range(g);
    if min_eig < -PSD_FLOOR * max_eig.abs() {
        return Err(DspError::NotPsd { min_eig, max_eig });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmoParams {
    pub c: f64,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for SmoParams {
    fn default() -> Self {
        SmoParams { c: 1.0, tol: 1e-3, max_iters: 100_000 }
    }
}

impl SmoParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) || !(self.tol > 0.0) || self.max_iters == 0 {
            return Err(DspError::param("svm needs c > 0, tol > 0, max_iters >= 1"));
        }
        Ok(())
    }
}

/// Two-class machine: `f(x) = Σ_i coef_i k(x_i, x) + bias` with
/// `coef_i = α_i y_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMachine {
    pub alpha: DVector<f64>,
    pub coef: DVector<f64>,
    pub bias: f64,
    pub iterations: usize,
    /// Maximal KKT violation `m(α) − M(α)` at exit.
    pub violation: f64,
}

impl BinaryMachine {
    pub fn decision(&self, kernel_row: &[f64]) -> f64 {
        self.coef.iter().zip(kernel_row).map(|(c, k)| c * k).sum::<f64>() + self.bias
    }
}

/// SMO with maximal-violating-pair working-set selection.
pub fn smo_binary(gram: &DMatrix<f64>, y: &[f64], params: &SmoParams) -> Result<BinaryMachine> {
    params.validate()?;
    let n = y.len();
    if gram.shape() != (n, n) {
        return Err(DspError::dim("svm gram", n, gram.nrows()));
    }
    let c = params.c;
    let mut alpha = DVector::<f64>::zeros(n);
    // Gradient of ½αᵀQα − eᵀα.
    let mut grad = DVector::<f64>::from_element(n, -1.0);
    let in_up = |a: f64, yt: f64| (yt > 0.0 && a < c) || (yt < 0.0 && a > 0.0);
    let in_low = |a: f64, yt: f64| (yt > 0.0 && a > 0.0) || (yt < 0.0 && a < c);

    let mut iterations = 0;
    let mut violation;
    loop {
        let mut i = None;
        let mut gmax = f64::NEG_INFINITY;
        let mut gmin = f64::INFINITY;
        let mut j = None;
        for t in 0..n {
            let v = -y[t] * grad[t];
            if in_up(alpha[t], y[t]) && v > gmax {
                gmax = v;
                i = Some(t);
            }
            if in_low(alpha[t], y[t]) && v < gmin {
                gmin = v;
                j = Some(t);
            }
        }
        violation = if i.is_some() && j.is_some() { gmax - gmin } else { 0.0 };
        if violation <= params.tol || iterations >= params.max_iters {
            break;
        }
        let (i, j) = (i.expect("checked"), j.expect("checked"));
        iterations += 1;

        let quad = (gram[(i, i)] + gram[(j, j)] - 2.0 * gram[(i, j)]).max(1e-12);
        let (old_i, old_j) = (alpha[i], alpha[j]);
        // Move along y_i Δα_i = −y_j Δα_j to decrease the dual.
        let step = (gmax - gmin) / quad;
        let mut ai = old_i + y[i] * step;
        let sum = y[i] * old_i + y[j] * old_j;
        // Clip α_i to the box induced by both constraints.
        let (lo, hi) = if y[i] == y[j] {
            ((sum * y[i] - c).max(0.0), (sum * y[i]).min(c))
        } else {
            ((sum * y[i]).max(0.0), (c + sum * y[i]).min(c))
        };
        ai = ai.clamp(lo, hi);
        let aj = y[j] * (sum - y[i] * ai);
        let aj = aj.clamp(0.0, c);
        let (di, dj) = (ai - old_i, aj - old_j);
        alpha[i] = ai;
        alpha[j] = aj;
        for t in 0..n {
            grad[t] += y[t] * (y[i] * gram[(t, i)] * di + y[j] * gram[(t, j)] * dj);
        }
    }

    // Bias from free support vectors, else the midpoint of the feasible range.
    let mut free_sum = 0.0;
    let mut free = 0;
    let mut ub = f64::INFINITY;
    let mut lb = f64::NEG_INFINITY;
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] > 0.0 && alpha[t] < c {
            free_sum += yg;
            free += 1;
        } else {
            let at_upper = alpha[t] >= c;
            if (y[t] > 0.0) == at_upper {
                lb = lb.max(yg);
            } else {
                ub = ub.min(yg);
            }
        }
    }
    let rho = if free > 0 {
        free_sum / free as f64
    } else if ub.is_finite() && lb.is_finite() {
        (ub + lb) / 2.0
    } else if ub.is_finite() {
        ub
    } else if lb.is_finite() {
        lb
    } else {
        0.0
    };
    let coef = DVector::from_fn(n, |t, _| alpha[t] * y[t]);
    Ok(BinaryMachine { alpha, coef, bias: -rho, iterations, violation })
}

/// One-vs-rest multi-class machine over a fixed training set.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    pub classes: Vec<usize>,
    pub machines: Vec<BinaryMachine>,
    pub params: SmoParams,
}

impl SvmModel {
    /// Decision values for one kernel row against the training set.
    pub fn decisions(&self, kernel_row: &[f64]) -> Vec<f64> {
        self.machines.iter().map(|m| m.decision(kernel_row)).collect()
    }

    /// Class with the largest decision value; ties go to the lowest class id.
    pub fn predict_row(&self, kernel_row: &[f64]) -> usize {
        let dec = self.decisions(kernel_row);
        let mut best = 0;
        for k in 1..dec.len() {
            if dec[k] > dec[best] {
                best = k;
            }
        }
        self.classes[best]
    }

    /// Predictions for each row of a test-by-train kernel matrix.
    pub fn predict(&self, kernel_rows: &DMatrix<f64>) -> Vec<usize> {
        kernel_rows.row_iter().map(|r| self.predict_row(&r.iter().copied().collect::<Vec<_>>())).collect()
    }

    pub fn train_size(&self) -> usize {
        self.machines.first().map_or(0, |m| m.coef.len())
    }
}

pub fn svm_train(gram: &DMatrix<f64>, labels: &[usize], params: &SmoParams) -> Result<SvmModel> {
    if gram.shape() != (labels.len(), labels.len()) {
        return Err(DspError::dim("svm gram", labels.len(), gram.nrows()));
    }
    check_psd(gram)?;
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(DspError::DegenerateLabels { classes: classes.len() });
    }
    let machines = classes
        .par_iter()
        .map(|&cls| {
            let y: Vec<f64> = labels.iter().map(|&l| if l == cls { 1.0 } else { -1.0 }).collect();
            smo_binary(gram, &y, params)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SvmModel { classes, machines, params: *params })
}

pub fn svm_predict(model: &SvmModel, kernel_row: &[f64]) -> Result<usize> {
    if kernel_row.len() != model.train_size() {
        return Err(DspError::dim("kernel row", model.train_size(), kernel_row.len()));
    }
    Ok(model.predict_row(kernel_row))
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

/// Stratified fold assignment: each class is shuffled and dealt round-robin.
pub fn stratified_folds(labels: &[usize], folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0; labels.len()];
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut next = 0;
    for cls in classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == cls).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            assignment[i] = next % folds;
            next += 1;
        }
    }
    assignment
}

/// Mean held-out accuracy of `k`-fold cross-validation on a precomputed Gram.
pub fn cross_validate(gram: &DMatrix<f64>, labels: &[usize], params: &SmoParams, folds: usize, seed: u64) -> Result<f64> {
    let assignment = stratified_folds(labels, folds, seed);
    let mut accs = Vec::new();
    for f in 0..folds {
        let train: Vec<usize> = (0..labels.len()).filter(|&i| assignment[i] != f).collect();
        let test: Vec<usize> = (0..labels.len()).filter(|&i| assignment[i] == f).collect();
        if test.is_empty() {
            continue;
        }
        let train_labels: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
        let sub = gram.select_rows(&train).select_columns(&train);
        let model = match svm_train(&sub, &train_labels, params) {
            Ok(m) => m,
            Err(DspError::DegenerateLabels { .. }) => continue,
            Err(e) => return Err(e),
        };
        let rows = gram.select_rows(&test).select_columns(&train);
        let truth: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
        accs.push(accuracy(&model.predict(&rows), &truth));
    }
    if accs.is_empty() {
        return Err(DspError::param("cross-validation produced no usable folds"));
    }
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionParams {
    /// Multipliers of the base bandwidth (`1/p` for the projection kernel).
    pub kernel_grid: Vec<f64>,
    pub c_grid: Vec<f64>,
    pub folds: usize,
    pub seed: u64,
    pub tol: f64,
}

impl Default for SelectionParams {
    fn default() -> Self {
        SelectionParams {
            kernel_grid: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            c_grid: vec![0.1, 1.0, 10.0, 100.0],
            folds: 5,
            seed: 0,
            tol: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selection {
    pub kernel: KernelKind,
    pub c: f64,
    pub cv_accuracy: f64,
}

/// Grid search over kernel bandwidth and `C`; ties keep the earlier grid point.
pub fn select_model(
    items: &[DMatrix<f64>],
    labels: &[usize],
    kernels: &[KernelKind],
    params: &SelectionParams,
) -> Result<Selection> {
    let mut best: Option<Selection> = None;
    for &kernel in kernels {
        let g = kernel_gram(items, kernel)?;
        check_psd(&g)?;
        for &c in &params.c_grid {
            let smo = SmoParams { c, tol: params.tol, ..SmoParams::default() };
            let acc = cross_validate(&g, labels, &smo, params.folds, params.seed)?;
            if best.is_none_or(|b| acc > b.cv_accuracy) {
                best = Some(Selection { kernel, c, cv_accuracy: acc });
            }
        }
    }
    best.ok_or_else(|| DspError::param("empty model-selection grid"))
}

/// A trained machine together with its support items, usable on new inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSvm {
    pub kernel: KernelKind,
    pub support: Vec<DMatrix<f64>>,
    pub model: SvmModel,
}

impl KernelSvm {
    pub fn fit(items: &[DMatrix<f64>], labels: &[usize], kernel: KernelKind, params: &SmoParams) -> Result<Self> {
        let g = kernel_gram(items, kernel)?;
        let model = svm_train(&g, labels, params)?;
        // Keep only items with a non-zero coefficient in some machine.
        let keep: Vec<usize> = (0..items.len())
            .filter(|&i| model.machines.iter().any(|m| m.coef[i] != 0.0))
            .collect();
        let machines = model
            .machines
            .iter()
            .map(|m| BinaryMachine {
                alpha: DVector::from_iterator(keep.len(), keep.iter().map(|&i| m.alpha[i])),
                coef: DVector::from_iterator(keep.len(), keep.iter().map(|&i| m.coef[i])),
                ..m.clone()
            })
            .collect();
        Ok(KernelSvm {
            kernel,
            support: keep.iter().map(|&i| items[i].clone()).collect(),
            model: SvmModel { machines, ..model },
        })
    }

    pub fn decisions(&self, item: &DMatrix<f64>) -> Result<Vec<f64>> {
        let row = self.support.iter().map(|s| self.kernel.eval(s, item)).collect::<Result<Vec<_>>>()?;
        Ok(self.model.decisions(&row))
    }

    pub fn predict(&self, item: &DMatrix<f64>) -> Result<usize> {
        let row = self.support.iter().map(|s| self.kernel.eval(s, item)).collect::<Result<Vec<_>>>()?;
        Ok(self.model.predict_row(&row))
    }

    pub fn predict_many(&self, items: &[DMatrix<f64>]) -> Result<Vec<usize>> {
        items.par_iter().map(|it| self.predict(it)).collect()
    }
}

pub fn encode_model(svm: &KernelSvm) -> Result<Vec<u8>> {
    let (tag, width) = svm.kernel.tag();
    let (rows, cols) = svm.support.first().map_or((0, 0), |m| m.shape());
    let mut e = Encoder::new(MODEL_MAGIC);
    e.u16(tag)
        .f64(width)
        .f64(svm.model.params.c)
        .f64(svm.model.params.tol)
        .u32(dim_u32(svm.model.classes.len(), "class count")?)
        .u32(dim_u32(svm.support.len(), "support count")?)
        .u32(dim_u32(rows, "support rows")?)
        .u32(dim_u32(cols, "support columns")?);
    for s in &svm.support {
        e.matrix(s);
    }
    for (cls, m) in svm.model.classes.iter().zip(&svm.model.machines) {
        e.u32(dim_u32(*cls, "class id")?).f64(m.bias).f64s(m.alpha.iter().copied()).f64s(m.coef.iter().copied());
    }
    Ok(e.finish())
}

pub fn decode_model(bytes: &[u8]) -> Result<KernelSvm> {
    let mut dec = Decoder::new(bytes, MODEL_MAGIC)?;
    let tag = dec.u16()?;
    let width = dec.f64()?;
    let kernel = match tag {
        0 => KernelKind::Projection { beta: width },
        1 => KernelKind::Rbf { gamma: width },
        other => return Err(DspError::param(format!("unknown kernel tag {other}"))),
    };
    let c = dec.f64()?;
    let tol = dec.f64()?;
    let classes_n = dec.usize()?;
    let n = dec.usize()?;
    let rows = dec.usize()?;
    let cols = dec.usize()?;
    let support = (0..n).map(|_| dec.matrix(rows, cols)).collect::<Result<Vec<_>>>()?;
    let mut classes = Vec::with_capacity(classes_n);
    let mut machines = Vec::with_capacity(classes_n);
    for _ in 0..classes_n {
        classes.push(dec.usize()?);
        let bias = dec.f64()?;
        let alpha = DVector::from_vec(dec.f64s(n)?);
        let coef = DVector::from_vec(dec.f64s(n)?);
        machines.push(BinaryMachine { alpha, coef, bias, iterations: 0, violation: 0.0 });
    }
    dec.finish()?;
    Ok(KernelSvm {
        kernel,
        support,
        model: SvmModel { classes, machines, params: SmoParams { c, tol, ..SmoParams::default() } },
    })
}

pub fn write_model(svm: &KernelSvm, path: &Path) -> Result<()> {
    write_file(path, &encode_model(svm)?)
}

pub fn read_model(path: &Path) -> Result<KernelSvm> {
    decode_model(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stiefel::{qf, StiefelPoint};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_point(d: usize, p: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        StiefelPoint::random(d, p, rng).unwrap().into_matrix()
    }

    fn random_orthogonal(p: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        random_point(p, p, rng)
    }

    /// Small random tangent step from `base`, retracted back.
    fn jitter(base: &DMatrix<f64>, scale: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let g = DMatrix::from_fn(base.nrows(), base.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let point = StiefelPoint::new(base.clone()).unwrap();
        let h = point.project_tangent(&g).unwrap();
        point.retract(&h, scale).unwrap().into_matrix()
    }

    #[test]
    fn kernel_extremes() {
        let params = KernelParams::for_rank(2);
        let w = DMatrix::from_column_slice(4, 2, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let v = DMatrix::from_column_slice(4, 2, &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert!((proj_kernel(&w, &w, &params).unwrap() - 1f64.exp()).abs() <= 1e-12);
        assert_eq!(proj_kernel(&w, &v, &params).unwrap(), 1.0);
        assert!(proj_kernel(&w, &DMatrix::zeros(3, 2), &params).is_err());
    }

    #[test]
    fn gram_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = KernelParams::for_rank(3);
        let one = vec![random_point(6, 3, &mut rng)];
        let g = gram(&one, &params).unwrap();
        assert_eq!(g.shape(), (1, 1));
        assert!((g[(0, 0)] - 1f64.exp()).abs() <= 1e-12);

        let many: Vec<_> = (0..20).map(|_| random_point(6, 3, &mut rng)).collect();
        let g = gram(&many, &params).unwrap();
        for i in 0..20 {
            assert!((g[(i, i)] - 1f64.exp()).abs() <= 1e-12);
        }
        check_psd(&g).unwrap();
        let (min_eig, max_eig) = eigen_range(&g);
        assert!(min_eig >= -PSD_FLOOR * max_eig);

        let mixed = vec![random_point(6, 3, &mut rng), random_point(6, 2, &mut rng)];
        assert!(gram(&mixed, &params).is_err());
    }

    #[test]
    fn non_psd_gram_is_refused() {
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(svm_train(&g, &[0, 1], &SmoParams::default()), Err(DspError::NotPsd { .. })));
    }

    #[test]
    fn orthogonal_subspace_classes_are_separated() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (d, p) = (8, 2);
        let a = qf(&DMatrix::from_fn(d, p, |i, j| if i == j { 1.0 } else { 0.0 })).unwrap();
        let b = qf(&DMatrix::from_fn(d, p, |i, j| if i == j + p { 1.0 } else { 0.0 })).unwrap();
        let mut items = Vec::new();
        let mut labels = Vec::new();
        for (cls, base) in [(0, &a), (1, &b)] {
            for _ in 0..10 {
                items.push(jitter(base, 0.2, &mut rng));
                labels.push(cls);
            }
        }
        let svm = KernelSvm::fit(&items, &labels, KernelKind::Projection { beta: 0.5 }, &SmoParams::default()).unwrap();
        let predicted = svm.predict_many(&items).unwrap();
        assert_eq!(accuracy(&predicted, &labels), 1.0);
        for m in &svm.model.machines {
            assert!(m.violation <= 1e-3);
            assert!(m.alpha.iter().all(|&a| (0.0..=1.0).contains(&a)));
        }
    }

    #[test]
    fn single_point_per_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let items: Vec<_> = (0..3).map(|_| random_point(5, 2, &mut rng)).collect();
        let labels = [4, 1, 7];
        let svm = KernelSvm::fit(&items, &labels, KernelKind::Projection { beta: 0.5 }, &SmoParams::default()).unwrap();
        for (item, &label) in items.iter().zip(&labels) {
            assert_eq!(svm.predict(item).unwrap(), label);
        }
    }

    #[test]
    fn vanishing_c_zeroes_duals() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let items: Vec<_> = (0..8).map(|_| random_point(5, 2, &mut rng)).collect();
        let labels = [0, 1, 0, 1, 0, 1, 0, 1];
        let g = gram(&items, &KernelParams::for_rank(2)).unwrap();
        let model = svm_train(&g, &labels, &SmoParams { c: 1e-12, ..SmoParams::default() }).unwrap();
        for m in &model.machines {
            assert!(m.alpha.iter().all(|a| a.abs() <= 1e-12));
            let row: Vec<f64> = g.row(0).iter().copied().collect();
            assert!((m.decision(&row) - m.bias).abs() <= 1e-9);
        }
    }

    #[test]
    fn smo_matches_closed_form_on_two_points() {
        // Linear kernel on ±1: α = 1/2 each, w = 1, bias 0.
        let g = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        let m = smo_binary(&g, &[1.0, -1.0], &SmoParams { c: 10.0, ..SmoParams::default() }).unwrap();
        assert!((m.alpha[0] - 0.5).abs() <= 1e-12 && (m.alpha[1] - 0.5).abs() <= 1e-12);
        assert!(m.bias.abs() <= 1e-12);
    }

    #[test]
    fn model_roundtrip_and_rebasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let items: Vec<_> = (0..12).map(|_| random_point(6, 2, &mut rng)).collect();
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let svm = KernelSvm::fit(&items, &labels, KernelKind::Projection { beta: 1.0 }, &SmoParams::default()).unwrap();
        let back = decode_model(&encode_model(&svm).unwrap()).unwrap();
        let probe = random_point(6, 2, &mut rng);
        assert_eq!(back.decisions(&probe).unwrap(), svm.decisions(&probe).unwrap());

        let mut rebased = svm.clone();
        for s in rebased.support.iter_mut() {
            *s = &*s * random_orthogonal(2, &mut rng);
        }
        let a = svm.decisions(&probe).unwrap();
        let b = rebased.decisions(&probe).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
        }
        assert_eq!(svm.predict(&probe).unwrap(), rebased.predict(&probe).unwrap());
    }

    #[test]
    fn cross_validation_selects_from_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_point(6, 2, &mut rng);
        let b = random_point(6, 2, &mut rng);
        let mut items = Vec::new();
        let mut labels = Vec::new();
        for i in 0..20 {
            let base = if i % 2 == 0 { &a } else { &b };
            items.push(jitter(base, 0.1, &mut rng));
            labels.push(i % 2);
        }
        let kernels: Vec<_> = [0.25, 1.0].iter().map(|m| KernelKind::Projection { beta: m / 2.0 }).collect();
        let sel = select_model(&items, &labels, &kernels, &SelectionParams::default()).unwrap();
        assert!(sel.cv_accuracy >= 0.9);
    }

    #[test]
    fn folds_are_stratified() {
        let labels: Vec<usize> = (0..50).map(|i| i % 5).collect();
        let folds = stratified_folds(&labels, 5, 0);
        for f in 0..5 {
            for c in 0..5 {
                let count = (0..50).filter(|&i| folds[i] == f && labels[i] == c).count();
                assert_eq!(count, 2);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn kernel_is_symmetric_bounded_and_basis_free(seed in 0u64..10_000, d in 2usize..9, p_raw in 1usize..4) {
            let p = p_raw.min(d);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w1 = random_point(d, p, &mut rng);
            let w2 = random_point(d, p, &mut rng);
            let r = random_orthogonal(p, &mut rng);
            let params = KernelParams::for_rank(p);
            let k12 = proj_kernel(&w1, &w2, &params).unwrap();
            let k21 = proj_kernel(&w2, &w1, &params).unwrap();
            prop_assert!((k12 - k21).abs() <= 1e-12);
            prop_assert!(k12 >= 1.0 - 1e-12 && k12 <= (params.beta * p as f64).exp() + 1e-12);
            let rotated = proj_kernel(&(&w1 * &r), &w2, &params).unwrap();
            prop_assert!((rotated - k12).abs() <= 1e-12 * k12);
        }
    }
}
