//! Riemannian conjugate gradient on the Stiefel manifold.
//!
//! Search directions use the Hestenes–Stiefel formula with projection
//! transport, steps are chosen by Armijo backtracking along the QR
//! retraction, and the method falls back to steepest descent whenever the
//! conjugate direction is unusable.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{DspError, Result};
use crate::stiefel::{StiefelPoint, TangentVector};

const HS_DENOMINATOR_FLOOR: f64 = 1e-14;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RcgParams {
    pub max_iters: usize,
    /// Stop once the Riemannian gradient norm falls to this value.
    pub grad_tol: f64,
    pub armijo_c1: f64,
    pub backtrack_factor: f64,
    pub max_backtracks: usize,
    pub initial_step: f64,
    /// Forces `β = 0` on every step (Riemannian steepest descent).
    pub steepest_descent: bool,
    pub seed: u64,
}

impl Default for RcgParams {
    fn default() -> Self {
        RcgParams {
            max_iters: 50,
            grad_tol: 1e-5,
            armijo_c1: 1e-4,
            backtrack_factor: 0.5,
            max_backtracks: 30,
            initial_step: 1.0,
            steepest_descent: false,
            seed: 0,
        }
    }
}

impl RcgParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(DspError::param("rcg max_iters must be at least 1"));
        }
        if !(self.armijo_c1 > 0.0 && self.armijo_c1 < 1.0) {
            return Err(DspError::param(format!("armijo_c1 must lie in (0, 1), got {}", self.armijo_c1)));
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return Err(DspError::param(format!(
                "backtrack_factor must lie in (0, 1), got {}",
                self.backtrack_factor
            )));
        }
        if !(self.initial_step > 0.0 && self.initial_step.is_finite()) {
            return Err(DspError::param("initial_step must be positive and finite"));
        }
        if !(self.grad_tol >= 0.0) {
            return Err(DspError::param("grad_tol must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub cost: f64,
    pub grad_norm: f64,
    /// Accepted step length; zero for the initial record.
    pub step: f64,
    /// Whether the direction used to reach this iterate was steepest descent.
    pub restart: bool,
}

/// Per-iteration history. The first record describes the starting point.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RcgTrace {
    pub records: Vec<IterationRecord>,
}

impl RcgTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn costs(&self) -> impl Iterator<Item = f64> + '_ {
        self.records.iter().map(|r| r.cost)
    }

    pub fn final_cost(&self) -> Option<f64> {
        self.records.last().map(|r| r.cost)
    }

    /// True if no recorded cost exceeds its predecessor by more than `slack`.
    pub fn is_monotone(&self, slack: f64) -> bool {
        self.records.windows(2).all(|w| w[1].cost <= w[0].cost + slack)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    GradientTolerance,
    MaxIterations,
    /// Armijo backtracking exhausted; the returned point is the best iterate.
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct RcgOutcome {
    pub point: StiefelPoint,
    pub trace: RcgTrace,
    pub termination: Termination,
}

impl RcgOutcome {
    pub fn iterations(&self) -> usize {
        self.trace.len().saturating_sub(1)
    }
}

/// Minimizes `cost` over `S(d, p)` starting from `w0`.
///
/// `euclid_grad` returns the Euclidean (sub)gradient in the ambient space;
/// it is projected onto the tangent space internally.
pub fn minimize<F, G>(cost: F, euclid_grad: G, w0: StiefelPoint, params: &RcgParams) -> Result<RcgOutcome>
where
    F: Fn(&StiefelPoint) -> f64,
    G: Fn(&StiefelPoint) -> DMatrix<f64>,
{
    params.validate()?;
    let (d, p) = (w0.dim(), w0.rank());
    let restart_period = d * p;

    let riemannian_grad = |w: &StiefelPoint, iteration: usize| -> Result<TangentVector> {
        let eg = euclid_grad(w);
        if eg.shape() != (d, p) {
            return Err(DspError::dim("euclidean gradient", format!("{d}x{p}"), format!("{}x{}", eg.nrows(), eg.ncols())));
        }
        if eg.iter().any(|v| !v.is_finite()) {
            return Err(DspError::NonFinite { iteration, what: "gradient" });
        }
        w.project_tangent(&eg)
    };

    let mut w = w0;
    let mut f = cost(&w);
    if !f.is_finite() {
        return Err(DspError::NonFinite { iteration: 0, what: "cost" });
    }
    let mut g = riemannian_grad(&w, 0)?;
    let mut trace = RcgTrace::default();
    trace.records.push(IterationRecord { cost: f, grad_norm: g.norm(), step: 0.0, restart: true });

    let mut dir = g.scale(-1.0);
    let mut dir_is_steepest = true;
    let mut since_restart = 0usize;
    let mut termination = Termination::MaxIterations;

    for iteration in 1..=params.max_iters {
        if g.norm() <= params.grad_tol {
            termination = Termination::GradientTolerance;
            break;
        }

        let mut slope = g.inner(&dir);
        if slope >= 0.0 {
            dir = g.scale(-1.0);
            dir_is_steepest = true;
            since_restart = 0;
            slope = -g.inner(&g);
        }

        let mut searched = line_search(&cost, &w, f, &dir, slope, params, iteration)?;
        if searched.is_none() && !dir_is_steepest {
            dir = g.scale(-1.0);
            dir_is_steepest = true;
            since_restart = 0;
            slope = -g.inner(&g);
            searched = line_search(&cost, &w, f, &dir, slope, params, iteration)?;
        }
        let Some((w_next, f_next, step)) = searched else {
            termination = Termination::LineSearchFailed;
            break;
        };

        let g_next = riemannian_grad(&w_next, iteration)?;
        trace.records.push(IterationRecord {
            cost: f_next,
            grad_norm: g_next.norm(),
            step,
            restart: dir_is_steepest,
        });

        let g_moved = w.transport(&w_next, &g)?;
        let d_moved = w.transport(&w_next, &dir)?;
        since_restart += 1;

        let beta = if params.steepest_descent || since_restart >= restart_period {
            None
        } else {
            let y = g_next.axpy(-1.0, &g_moved);
            let denom = d_moved.inner(&y);
            (denom > HS_DENOMINATOR_FLOOR).then(|| g_next.inner(&y) / denom)
        };

        let (next_dir, steepest) = match beta {
            Some(beta) if beta.is_finite() => {
                let candidate = g_next.scale(-1.0).axpy(beta, &d_moved);
                if candidate.inner(&g_next) < 0.0 {
                    (candidate, false)
                } else {
                    (g_next.scale(-1.0), true)
                }
            }
            _ => (g_next.scale(-1.0), true),
        };
        if steepest {
            since_restart = 0;
        }

        w = w_next;
        f = f_next;
        g = g_next;
        dir = next_dir;
        dir_is_steepest = steepest;
    }
    if termination == Termination::MaxIterations && g.norm() <= params.grad_tol {
        termination = Termination::GradientTolerance;
    }

    Ok(RcgOutcome { point: w, trace, termination })
}

/// Armijo backtracking along the retraction, starting from
/// `params.initial_step`; `None` when every trial step is rejected.
///
/// An accepted step that overshoots the minimizer of the quadratic model
/// through `f`, `slope` and the accepted cost is refined by one extra
/// evaluation at that minimizer, keeping whichever point is lower. Without
/// this, a unit step that lands on the mirror image of the iterate is
/// accepted forever and the conjugate direction collapses.
fn line_search<F>(
    cost: &F,
    w: &StiefelPoint,
    f: f64,
    dir: &TangentVector,
    slope: f64,
    params: &RcgParams,
    iteration: usize,
) -> Result<Option<(StiefelPoint, f64, f64)>>
where
    F: Fn(&StiefelPoint) -> f64,
{
    let evaluate = |step: f64| -> Result<(StiefelPoint, f64)> {
        let trial = w.retract(dir, step)?;
        let f_trial = cost(&trial);
        if !f_trial.is_finite() {
            return Err(DspError::NonFinite { iteration, what: "cost" });
        }
        Ok((trial, f_trial))
    };
    let armijo = |step: f64, f_trial: f64| f_trial <= f + params.armijo_c1 * step * slope;

    let mut step = params.initial_step;
    for _ in 0..params.max_backtracks {
        let (trial, f_trial) = evaluate(step)?;
        if armijo(step, f_trial) {
            let curvature = (f_trial - f - slope * step) / (step * step);
            if curvature > 0.0 {
                let model_step = -slope / (2.0 * curvature);
                if model_step.is_finite() && model_step > 0.0 && model_step < 0.9 * step {
                    let (refined, f_refined) = evaluate(model_step)?;
                    if f_refined < f_trial && armijo(model_step, f_refined) {
                        return Ok(Some((refined, f_refined, model_step)));
                    }
                }
            }
            return Ok(Some((trial, f_trial, step)));
        }
        step *= params.backtrack_factor;
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn rayleigh(a: &DMatrix<f64>) -> (impl Fn(&StiefelPoint) -> f64 + '_, impl Fn(&StiefelPoint) -> DMatrix<f64> + '_) {
        let cost = move |w: &StiefelPoint| -(w.matrix().transpose() * a * w.matrix()).trace();
        let grad = move |w: &StiefelPoint| -(a * w.matrix()) * 2.0;
        (cost, grad)
    }

    /// Largest sine of the principal angles between two orthonormal bases.
    fn max_principal_sine(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        let s = (a.transpose() * b).singular_values();
        let min_cos = s.iter().cloned().fold(f64::INFINITY, f64::min).min(1.0);
        (1.0 - min_cos * min_cos).max(0.0).sqrt()
    }

    #[test]
    fn zero_cost_returns_start() {
        let w0 = StiefelPoint::identity(4, 2).unwrap();
        let out = minimize(|_| 0.0, |_| DMatrix::zeros(4, 2), w0.clone(), &RcgParams::default()).unwrap();
        assert_eq!(out.point, w0);
        assert_eq!(out.trace.len(), 1);
        assert_eq!(out.termination, Termination::GradientTolerance);
    }

    #[test]
    fn rank_one_dominant_direction() {
        let e3 = DMatrix::from_column_slice(3, 1, &[0.0, 0.0, 1.0]);
        let a = &e3 * e3.transpose();
        let (cost, grad) = rayleigh(&a);
        let w0 = StiefelPoint::from_qr(&DMatrix::from_column_slice(3, 1, &[1.0, 0.5, 0.3])).unwrap();
        let params = RcgParams { max_iters: 200, grad_tol: 1e-10, ..RcgParams::default() };
        let out = minimize(cost, grad, w0, &params).unwrap();
        let w = out.point.matrix();
        assert!(w[(0, 0)].abs() < 1e-6 && w[(1, 0)].abs() < 1e-6);
        assert!((w[(2, 0)].abs() - 1.0).abs() < 1e-6);
    }

    fn random_gram(d: usize, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(d, k, |_, _| rng.sample::<f64, _>(StandardNormal));
        &a * a.transpose()
    }

    #[test]
    fn recovers_top_eigenspace() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a = random_gram(6, 6, &mut rng);
        let eig = a.clone().symmetric_eigen();
        let mut order: Vec<usize> = (0..6).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
        let top = DMatrix::from_columns(&[eig.eigenvectors.column(order[0]), eig.eigenvectors.column(order[1])]);

        let (cost, grad) = rayleigh(&a);
        let w0 = StiefelPoint::random(6, 2, &mut rng).unwrap();
        let params = RcgParams { max_iters: 200, grad_tol: 1e-9, ..RcgParams::default() };
        let out = minimize(cost, grad, w0, &params).unwrap();
        assert!(max_principal_sine(out.point.matrix(), &top) <= 1e-4);
        assert!(out.trace.is_monotone(1e-12));
        assert!(out.point.residual() <= 1e-10);
    }

    #[test]
    fn steepest_descent_also_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_gram(6, 6, &mut rng);
        let eig = a.clone().symmetric_eigen();
        let mut order: Vec<usize> = (0..6).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
        let top = DMatrix::from_columns(&[eig.eigenvectors.column(order[0]), eig.eigenvectors.column(order[1])]);
        let (cost, grad) = rayleigh(&a);
        let params = RcgParams { max_iters: 5000, grad_tol: 1e-9, steepest_descent: true, ..RcgParams::default() };
        let out = minimize(cost, grad, StiefelPoint::random(6, 2, &mut rng).unwrap(), &params).unwrap();
        assert!(out.trace.records.iter().all(|r| r.restart));
        assert!(max_principal_sine(out.point.matrix(), &top) <= 1e-4);
    }

    #[test]
    fn non_finite_cost_is_reported() {
        let w0 = StiefelPoint::identity(3, 1).unwrap();
        let err = minimize(|_| f64::NAN, |_| DMatrix::zeros(3, 1), w0, &RcgParams::default()).unwrap_err();
        assert!(matches!(err, DspError::NonFinite { iteration: 0, .. }));
    }

    #[test]
    fn non_finite_gradient_carries_iteration() {
        let w0 = StiefelPoint::identity(3, 1).unwrap();
        let err = minimize(
            |w| -w.matrix()[(1, 0)],
            |w| {
                if w.matrix()[(0, 0)] < 0.999 {
                    DMatrix::from_element(3, 1, f64::INFINITY)
                } else {
                    DMatrix::from_column_slice(3, 1, &[0.0, -1.0, 0.0])
                }
            },
            w0,
            &RcgParams::default(),
        )
        .unwrap_err();
        assert!(matches!(err, DspError::NonFinite { iteration: 1, what: "gradient" }));
    }

    #[test]
    fn exhausted_line_search_returns_best_iterate() {
        // The supplied gradient points uphill, so no step satisfies Armijo.
        let w0 = StiefelPoint::identity(3, 1).unwrap();
        let cost = |w: &StiefelPoint| w.matrix()[(1, 0)];
        let grad = |_: &StiefelPoint| DMatrix::from_column_slice(3, 1, &[0.0, -1.0, 0.0]);
        let out = minimize(cost, grad, w0.clone(), &RcgParams::default()).unwrap();
        assert_eq!(out.termination, Termination::LineSearchFailed);
        assert_eq!(out.point, w0);
    }

    #[test]
    fn invalid_params_are_rejected() {
        let w0 = StiefelPoint::identity(3, 1).unwrap();
        for params in [
            RcgParams { max_iters: 0, ..RcgParams::default() },
            RcgParams { armijo_c1: 1.0, ..RcgParams::default() },
            RcgParams { backtrack_factor: 0.0, ..RcgParams::default() },
        ] {
            assert!(minimize(|_| 0.0, |_| DMatrix::zeros(3, 1), w0.clone(), &params).is_err());
        }
    }
}
