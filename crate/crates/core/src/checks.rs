//! Numerical self-checks shared by the `gradcheck` command and the
//! acceptance suite.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::derive_seed;
use crate::error::Result;
use crate::kernel_svm::{eigen_range, gram, proj_kernel, KernelParams, PSD_FLOOR};
use crate::pool::argmin::{check_tied_gradient, GradCheck};
use crate::pool::{build_segments, initial_subspace, DspObjective, HingeVariant, SequenceBags};
use crate::rcg::{minimize, RcgParams};
use crate::stiefel::{orthonormality_residual, StiefelPoint};

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldReport {
    pub calls: usize,
    pub orthonormality: f64,
    pub skew: f64,
    pub idempotency: f64,
    pub seconds: f64,
}

impl ManifoldReport {
    pub fn passed(&self) -> bool {
        self.orthonormality <= 1e-10 && self.skew <= 1e-10 && self.idempotency <= 1e-12
    }
}

/// Random projection/retraction calls cycling through the given shapes.
///
/// Residuals are worst cases: `‖WᵀW − I‖_F` after retraction, `‖sym(WᵀH)‖_F`
/// after projection, and `‖P(P(G)) − P(G)‖_F / max(1, ‖P(G)‖_F)`.
pub fn manifold_suite(calls: usize, shapes: &[(usize, usize)], seed: u64) -> Result<ManifoldReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = ManifoldReport { calls, orthonormality: 0.0, skew: 0.0, idempotency: 0.0, seconds: 0.0 };
    for k in 0..calls {
        let (d, p) = shapes[k % shapes.len()];
        let w = StiefelPoint::random(d, p, &mut rng)?;
        let g = gaussian(d, p, &mut rng);
        let h = w.project_tangent(&g)?;
        report.skew = report.skew.max(h.skew_residual(&w));
        let again = w.project_tangent(h.matrix())?;
        let idem = (again.matrix() - h.matrix()).norm() / h.norm().max(1.0);
        report.idempotency = report.idempotency.max(idem);
        let t: f64 = rng.random_range(0.01..2.0);
        let moved = w.retract(&h, t)?;
        report.orthonormality = report.orthonormality.max(orthonormality_residual(moved.matrix()));
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub points: usize,
    pub failures: usize,
    pub worst: f64,
    /// Draws rejected for lying too close to a kink or an argmax tie.
    pub rejected: usize,
    pub seconds: f64,
}

impl GradientReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Distance of `w` from the nonsmooth set of the objective: the smallest of
/// all hinge-argument magnitudes and top-two argmax gaps.
pub fn kink_distance(bags: &SequenceBags, pairs: &[(usize, usize)], w: &DMatrix<f64>) -> f64 {
    let mut dist = f64::INFINITY;
    for (members, y) in [(&bags.positive, 1.0), (&bags.negative, -1.0)] {
        let scores = members * w * y;
        for row in scores.row_iter() {
            let mut top = f64::NEG_INFINITY;
            let mut second = f64::NEG_INFINITY;
            for &v in row.iter() {
                if v > top {
                    second = top;
                    top = v;
                } else if v > second {
                    second = v;
                }
            }
            dist = dist.min((1.0 - top).abs());
            if second.is_finite() {
                dist = dist.min(top - second);
            }
        }
    }
    let energy = |t: usize| (bags.positive.row(t) * w).norm_squared();
    for &(i, j) in pairs {
        dist = dist.min((1.0 + energy(i) - energy(j)).abs());
    }
    dist
}

/// Central-difference check of the objective's Euclidean gradient at random
/// points at least `margin` away from every kink.
pub fn gradient_suite(points: usize, margin: f64, tol: f64, seed: u64) -> Result<GradientReport> {
    let start = Instant::now();
    let mut report = GradientReport { points, failures: 0, worst: 0.0, rejected: 0, seconds: 0.0 };
    let step = 1e-6;
    for k in 0..points {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, k as u64));
        let variant = if k % 2 == 0 { HingeVariant::Hinge } else { HingeVariant::SquaredHinge };
        let (bags, pairs, w) = loop {
            let d = rng.random_range(4..=10);
            let n = rng.random_range(3..=8);
            let p = rng.random_range(1..=3usize.min(d));
            let x = gaussian(n, d, &mut rng) * 1.5;
            let eps: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let bags = SequenceBags::from_perturbation(&x, &eps)?;
            let delta = rng.random_range(2..=n);
            let pairs = build_segments(n, delta)?.ordering_pairs(false);
            let w = StiefelPoint::random(d, p, &mut rng)?.into_matrix();
            if kink_distance(&bags, &pairs, &w) >= margin {
                break (bags, pairs, w);
            }
            report.rejected += 1;
        };
        let ordering_weight = rng.random_range(0.0..3.0);
        let obj = DspObjective::new(&bags, pairs, ordering_weight, variant);
        let analytic = obj.gradient(&w);
        let mut numeric = DMatrix::zeros(w.nrows(), w.ncols());
        for idx in 0..w.len() {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp.as_mut_slice()[idx] += step;
            wm.as_mut_slice()[idx] -= step;
            numeric.as_mut_slice()[idx] = (obj.cost(&wp) - obj.cost(&wm)) / (2.0 * step);
        }
        let scale = analytic.norm().max(numeric.norm()).max(1e-6);
        let err = (&analytic - &numeric).norm() / scale;
        report.worst = report.worst.max(err);
        if err > tol {
            report.failures += 1;
        }
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayleighReport {
    /// Largest principal angle (radians) to the top eigenspace.
    pub angle: f64,
    pub iterations: usize,
    pub monotone: bool,
}

impl RayleighReport {
    pub fn passed(&self, max_angle: f64, max_iters: usize) -> bool {
        self.angle <= max_angle && self.iterations <= max_iters && self.monotone
    }
}

/// Minimizes `−tr(WᵀAW)` on `S(d, p)` for a random SPD `A`.
pub fn rayleigh_check(d: usize, p: usize, max_iters: usize, seed: u64) -> Result<RayleighReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = gaussian(d, d, &mut rng);
    let a = &b * b.transpose() + DMatrix::identity(d, d) * 1e-3;
    let eig = a.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let top = DMatrix::from_columns(&order[..p].iter().map(|&i| eig.eigenvectors.column(i)).collect::<Vec<_>>());

    let params = RcgParams { max_iters, grad_tol: 1e-10, ..RcgParams::default() };
    let out = minimize(
        |w: &StiefelPoint| -(w.matrix().transpose() * &a * w.matrix()).trace(),
        |w: &StiefelPoint| -(&a * w.matrix()) * 2.0,
        StiefelPoint::random(d, p, &mut rng)?,
        &params,
    )?;
    let cosines = (out.point.matrix().transpose() * &top).singular_values();
    let min_cos = cosines.iter().cloned().fold(f64::INFINITY, f64::min).clamp(-1.0, 1.0);
    Ok(RayleighReport { angle: min_cos.acos(), iterations: out.iterations(), monotone: out.trace.is_monotone(1e-12) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArgminReport {
    pub instances: usize,
    pub passed: usize,
    pub failed: usize,
    pub excluded: usize,
    pub not_converged: usize,
    pub worst: f64,
}

impl ArgminReport {
    pub fn passed(&self) -> bool {
        self.failed == 0 && self.not_converged == 0 && self.passed > 0
    }
}

/// Exact-mode argmin gradients of tiny penalty problems (`d = n = 4`, `p = 1`)
/// against central differences through re-solved minimizers. Odd instances
/// carry an ordering term. Instances whose active set moves under the
/// probes are excluded and counted.
pub fn argmin_suite(instances: usize, tol: f64, seed: u64) -> Result<ArgminReport> {
    let (n, d) = (4, 4);
    let mut report = ArgminReport { instances, passed: 0, failed: 0, excluded: 0, not_converged: 0, worst: 0.0 };
    let ordered = build_segments(n, 2)?.ordering_pairs(false);
    for k in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, k as u64));
        let x = gaussian(n, d, &mut rng);
        let eps: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let upstream = gaussian(d, 1, &mut rng);
        let bags = SequenceBags::from_perturbation(&x, &eps)?;
        let w0 = initial_subspace(&bags, 1, k as u64)?.into_matrix();
        let (pairs, weight) = if k % 2 == 1 { (ordered.as_slice(), 12.0) } else { (&[][..], 0.0) };
        match check_tied_gradient(&x, &eps, pairs, weight, &w0, &upstream, 1e-5, tol)? {
            GradCheck::Passed { rel_error } => {
                report.passed += 1;
                report.worst = report.worst.max(rel_error);
            }
            GradCheck::Failed { rel_error } => {
                report.failed += 1;
                report.worst = report.worst.max(rel_error);
            }
            GradCheck::ActiveSetChanged => report.excluded += 1,
            GradCheck::NotConverged => report.not_converged += 1,
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelReport {
    pub min_eigen: f64,
    pub max_eigen: f64,
    pub self_error: f64,
    pub rebase_error: f64,
}

impl KernelReport {
    pub fn passed(&self) -> bool {
        self.min_eigen >= -PSD_FLOOR * self.max_eigen && self.self_error <= 1e-12 && self.rebase_error <= 1e-12
    }
}

/// Projection-kernel Gram checks on random descriptors: eigenvalue floor,
/// `K(W, W) = exp(βp)` (relative error) and invariance of the Gram matrix
/// under `W ↦ WQ` for random orthogonal `Q`.
pub fn kernel_suite(count: usize, d: usize, p: usize, seed: u64) -> Result<KernelReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = KernelParams::for_rank(p);
    let ws: Vec<DMatrix<f64>> =
        (0..count).map(|_| StiefelPoint::random(d, p, &mut rng).map(StiefelPoint::into_matrix)).collect::<Result<_>>()?;
    let g = gram(&ws, &params)?;
    let (min_eigen, max_eigen) = eigen_range(&g);
    let expected = (params.beta * p as f64).exp();
    let mut self_error: f64 = 0.0;
    for w in &ws {
        self_error = self_error.max((proj_kernel(w, w, &params)? - expected).abs() / expected);
    }
    let rebased: Vec<DMatrix<f64>> = ws
        .iter()
        .map(|w| StiefelPoint::random(p, p, &mut rng).map(|q| w * q.matrix()))
        .collect::<Result<_>>()?;
    let g2 = gram(&rebased, &params)?;
    let rebase_error = (&g - &g2).abs().max();
    Ok(KernelReport { min_eigen, max_eigen, self_error, rebase_error })
}
