//! Gradients through the pooling argmin.
//!
//! The manifold constraint is replaced by the penalty `‖WᵀW − I‖²_F` and both
//! hinges are squared, so the objective
//!
//! ```text
//! F(W; X, Z) = ‖WᵀW − I‖²_F + Σ_θ [1 − max_q y(Wᵀθ)_q]²₊ + c Σ_(i,j) [1 + ‖Wᵀx_i‖² − ‖Wᵀx_j‖²]²₊
//! ```
//!
//! is once continuously differentiable. At a minimizer `W*`, the implicit
//! function theorem gives `∂W*/∂x = −H⁻¹ M` with `H = ∇²_WW F` and
//! `M = ∇²_xW F`. Matrices are vectorized column-major: entry `(k, q)` of a
//! `d × p` matrix sits at index `q·d + k`.

use nalgebra::{DMatrix, DVector};

use super::objective::best_column;
use super::{DspParams, HingeVariant, SequenceBags, TemporalSegments};
use crate::error::{DspError, Result};

/// Largest `d·p` accepted by the dense solve.
pub const EXACT_MAX_DIM: usize = 64;
const DAMPING: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HessianMode {
    Exact,
    Diagonal,
}

impl HessianMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(HessianMode::Exact),
            "diagonal" => Ok(HessianMode::Diagonal),
            other => Err(DspError::param(format!("unknown hessian mode {other:?}"))),
        }
    }
}

/// Which hinge terms are active at a point, and on which column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveSet {
    /// Active column per positive-bag member (`None` when the margin is met).
    pub positive: Vec<Option<usize>>,
    pub negative: Vec<Option<usize>>,
    /// Per ordering pair.
    pub pairs: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct PenaltySolution {
    pub w: DMatrix<f64>,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveParams {
    pub grad_tol: f64,
    pub max_iters: usize,
}

impl Default for SolveParams {
    fn default() -> Self {
        SolveParams { grad_tol: 1e-9, max_iters: 200 }
    }
}

/// Per-member input gradients.
#[derive(Debug, Clone)]
pub struct InputGradient {
    /// `n × d`, one row per positive-bag frame.
    pub positive: DMatrix<f64>,
    /// `n × d`, one row per negative-bag member.
    pub negative: DMatrix<f64>,
    /// Set when the Hessian solve needed damping.
    pub damped: bool,
}

impl InputGradient {
    /// Gradient w.r.t. `x_i` when the negative bag is `z_i = x_i + ε`.
    pub fn tied(&self) -> DMatrix<f64> {
        &self.positive + &self.negative
    }
}

fn sq_hinge(u: f64) -> f64 {
    if u > 0.0 {
        u * u
    } else {
        0.0
    }
}

/// Solves `(H + μI) s = −g` with the smallest `μ` from `{0, 1e-10‖H‖, …}`
/// that makes the shifted matrix positive definite.
fn newton_direction(h: DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    let n = h.nrows();
    let scale = h.norm().max(1.0);
    let mut mu = 0.0;
    for _ in 0..24 {
        if let Some(chol) = (&h + DMatrix::identity(n, n) * mu).cholesky() {
            let dir = chol.solve(&(-g));
            if dir.iter().all(|v| v.is_finite()) {
                return Some(dir);
            }
        }
        mu = if mu == 0.0 { 1e-10 * scale } else { mu * 10.0 };
    }
    None
}

/// Penalized squared-hinge pooling objective.
#[derive(Debug, Clone)]
pub struct PenaltyProblem<'a> {
    bags: &'a SequenceBags,
    pairs: Vec<(usize, usize)>,
    ordering_scale: f64,
}

impl<'a> PenaltyProblem<'a> {
    pub fn new(bags: &'a SequenceBags, pairs: Vec<(usize, usize)>, ordering_weight: f64) -> Self {
        let n = bags.positive.nrows() as f64;
        let ordering_scale = if n > 1.0 { ordering_weight / (n * (n - 1.0)) } else { 0.0 };
        PenaltyProblem { bags, pairs, ordering_scale }
    }

    fn members(&self) -> [(&DMatrix<f64>, f64); 2] {
        [(&self.bags.positive, 1.0), (&self.bags.negative, -1.0)]
    }

    fn pair_matrix(&self, i: usize, j: usize) -> DMatrix<f64> {
        let xi = self.bags.positive.row(i).transpose();
        let xj = self.bags.positive.row(j).transpose();
        &xi * xi.transpose() - &xj * xj.transpose()
    }

    fn pair_slack(&self, w: &DMatrix<f64>, i: usize, j: usize) -> f64 {
        let ei = (self.bags.positive.row(i) * w).norm_squared();
        let ej = (self.bags.positive.row(j) * w).norm_squared();
        1.0 + ei - ej
    }

    pub fn cost(&self, w: &DMatrix<f64>) -> f64 {
        let p = w.ncols();
        let mut total = (w.transpose() * w - DMatrix::identity(p, p)).norm_squared();
        for (bag, y) in self.members() {
            for row in (bag * w).row_iter() {
                total += sq_hinge(1.0 - best_column(row.iter().copied(), y).1);
            }
        }
        for &(i, j) in &self.pairs {
            total += self.ordering_scale * sq_hinge(self.pair_slack(w, i, j));
        }
        total
    }

    pub fn gradient(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        let p = w.ncols();
        let mut g = (w * (w.transpose() * w - DMatrix::identity(p, p))) * 4.0;
        for (bag, y) in self.members() {
            for (t, row) in (bag * w).row_iter().enumerate() {
                let (r, m) = best_column(row.iter().copied(), y);
                if m < 1.0 {
                    let mut col = g.column_mut(r);
                    col.axpy(-2.0 * (1.0 - m) * y, &bag.row(t).transpose(), 1.0);
                }
            }
        }
        for &(i, j) in &self.pairs {
            let h = self.pair_slack(w, i, j);
            if h > 0.0 {
                g += self.pair_matrix(i, j) * w * (4.0 * self.ordering_scale * h);
            }
        }
        g
    }

    pub fn active_set(&self, w: &DMatrix<f64>) -> ActiveSet {
        let side = |bag: &DMatrix<f64>, y: f64| {
            (bag * w)
                .row_iter()
                .map(|row| {
                    let (r, m) = best_column(row.iter().copied(), y);
                    (m < 1.0).then_some(r)
                })
                .collect()
        };
        ActiveSet {
            positive: side(&self.bags.positive, 1.0),
            negative: side(&self.bags.negative, -1.0),
            pairs: self.pairs.iter().map(|&(i, j)| self.pair_slack(w, i, j) > 0.0).collect(),
        }
    }

    /// Dense `pd × pd` Hessian.
    pub fn hessian(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        let (d, p) = w.shape();
        let pd = d * p;
        let gram = w.transpose() * w - DMatrix::identity(p, p);
        let mut h = DMatrix::zeros(pd, pd);
        // Ω''[E] = 4E(WᵀW − I) + 4W(EᵀW + WᵀE), applied to each basis matrix.
        for q in 0..p {
            for k in 0..d {
                let mut e = DMatrix::zeros(d, p);
                e[(k, q)] = 1.0;
                let image = &e * &gram * 4.0 + w * (e.transpose() * w + w.transpose() * &e) * 4.0;
                h.column_mut(q * d + k).copy_from_slice(image.as_slice());
            }
        }
        for (bag, y) in self.members() {
            for (t, row) in (bag * w).row_iter().enumerate() {
                let (r, m) = best_column(row.iter().copied(), y);
                if m < 1.0 {
                    let theta = bag.row(t).transpose();
                    let mut block = h.view_mut((r * d, r * d), (d, d));
                    block += &theta * theta.transpose() * 2.0;
                }
            }
        }
        for &(i, j) in &self.pairs {
            let slack = self.pair_slack(w, i, j);
            if slack > 0.0 {
                let s = self.pair_matrix(i, j);
                let sw = &s * w;
                let v = DVector::from_column_slice(sw.as_slice());
                h += &v * v.transpose() * (8.0 * self.ordering_scale);
                for q in 0..p {
                    let mut block = h.view_mut((q * d, q * d), (d, d));
                    block += &s * (4.0 * self.ordering_scale * slack);
                }
            }
        }
        h
    }

    /// Diagonal of the Hessian without forming it.
    pub fn hessian_diagonal(&self, w: &DMatrix<f64>) -> DVector<f64> {
        let (d, p) = w.shape();
        let gram = w.transpose() * w - DMatrix::identity(p, p);
        let mut diag = DVector::zeros(d * p);
        for q in 0..p {
            for k in 0..d {
                let row_norm = w.row(k).norm_squared();
                diag[q * d + k] = 4.0 * gram[(q, q)] + 4.0 * (w[(k, q)] * w[(k, q)] + row_norm);
            }
        }
        for (bag, y) in self.members() {
            for (t, row) in (bag * w).row_iter().enumerate() {
                let (r, m) = best_column(row.iter().copied(), y);
                if m < 1.0 {
                    for k in 0..d {
                        diag[r * d + k] += 2.0 * bag[(t, k)] * bag[(t, k)];
                    }
                }
            }
        }
        for &(i, j) in &self.pairs {
            let slack = self.pair_slack(w, i, j);
            if slack > 0.0 {
                let s = self.pair_matrix(i, j);
                let sw = &s * w;
                for q in 0..p {
                    for k in 0..d {
                        diag[q * d + k] += 8.0 * self.ordering_scale * sw[(k, q)].powi(2)
                            + 4.0 * self.ordering_scale * slack * s[(k, k)];
                    }
                }
            }
        }
        diag
    }

    /// Mixed derivative `∂(∇_W F)/∂θ` for one bag member, `pd × d`.
    pub fn mixed(&self, w: &DMatrix<f64>, negative: bool, t: usize) -> DMatrix<f64> {
        let (d, p) = w.shape();
        let (bag, y) = if negative { (&self.bags.negative, -1.0) } else { (&self.bags.positive, 1.0) };
        let mut m = DMatrix::zeros(d * p, d);
        let theta = bag.row(t).transpose();
        let (r, margin) = best_column((theta.transpose() * w).iter().copied(), y);
        if margin < 1.0 {
            // Block r: 2θw_rᵀ − 2(1 − m)y I.
            let mut block = m.view_mut((r * d, 0), (d, d));
            block += &theta * w.column(r).transpose() * 2.0;
            for k in 0..d {
                block[(k, k)] -= 2.0 * (1.0 - margin) * y;
            }
        }
        if negative || self.ordering_scale == 0.0 {
            return m;
        }
        let x = &theta;
        let wwx = w * (w.transpose() * x) * 2.0;
        for (pair, &(i, j)) in self.pairs.iter().enumerate() {
            let sign = if i == t {
                1.0
            } else if j == t {
                -1.0
            } else {
                continue;
            };
            let _ = pair;
            let slack = self.pair_slack(w, i, j);
            if slack <= 0.0 {
                continue;
            }
            let s = self.pair_matrix(i, j);
            let sw = DVector::from_column_slice((&s * w).as_slice());
            let c = 4.0 * self.ordering_scale;
            for l in 0..d {
                // ∂S/∂x[l] = ±(e_l xᵀ + x e_lᵀ); ∂h/∂x[l] = ±2(WWᵀx)[l].
                let mut ds = DMatrix::zeros(d, d);
                for k in 0..d {
                    ds[(l, k)] += x[k];
                    ds[(k, l)] += x[k];
                }
                let dsw = ds * w;
                let mut col = m.column_mut(l);
                col.axpy(sign * c * wwx[l], &sw, 1.0);
                col.axpy(sign * c * slack, &DVector::from_column_slice(dsw.as_slice()), 1.0);
            }
        }
        m
    }

    /// Damped Newton with Armijo backtracking; falls back to a gradient step
    /// when the Newton direction is unavailable or not a descent direction.
    pub fn solve(&self, w0: &DMatrix<f64>, params: &SolveParams) -> Result<PenaltySolution> {
        let mut w = w0.clone();
        let mut f = self.cost(&w);
        let mut g = self.gradient(&w);
        for it in 0..params.max_iters {
            let gn = g.norm();
            if !gn.is_finite() || !f.is_finite() {
                return Err(DspError::NonFinite { iteration: it, what: "penalty objective" });
            }
            if gn <= params.grad_tol {
                return Ok(PenaltySolution { w, grad_norm: gn, iterations: it, converged: true });
            }
            let gv = DVector::from_column_slice(g.as_slice());
            let dir = newton_direction(self.hessian(&w), &gv).unwrap_or_else(|| -gv.clone());
            let slope = dir.dot(&gv);
            let step_dir = DMatrix::from_column_slice(w.nrows(), w.ncols(), dir.as_slice());
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let cand = &w + &step_dir * t;
                let fc = self.cost(&cand);
                // Near the optimum the Armijo decrease drops below rounding in
                // the cost, so a step that shrinks the gradient is also taken.
                let flat = fc <= f + 1e-12 * f.abs().max(1.0) && self.gradient(&cand).norm() < gn;
                if fc <= f + 1e-4 * t * slope || flat {
                    w = cand;
                    f = fc;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            g = self.gradient(&w);
            if !accepted {
                let gn = g.norm();
                return Ok(PenaltySolution { w, grad_norm: gn, iterations: it, converged: gn <= params.grad_tol });
            }
        }
        let gn = g.norm();
        Ok(PenaltySolution { w, grad_norm: gn, iterations: params.max_iters, converged: gn <= params.grad_tol })
    }

    /// `−Mᵀ H⁻¹ vec(G)` for every bag member.
    pub fn input_gradient(&self, w_star: &DMatrix<f64>, upstream: &DMatrix<f64>, mode: HessianMode) -> Result<InputGradient> {
        let (d, p) = w_star.shape();
        if upstream.shape() != (d, p) {
            return Err(DspError::dim("upstream gradient", format!("{d}x{p}"), format!("{}x{}", upstream.nrows(), upstream.ncols())));
        }
        if d != self.bags.dim() {
            return Err(DspError::dim("argmin point", self.bags.dim(), d));
        }
        let rhs = DVector::from_column_slice(upstream.as_slice());
        let (v, damped) = match mode {
            HessianMode::Exact => {
                if d * p > EXACT_MAX_DIM {
                    return Err(DspError::param(format!("exact mode needs d*p <= {EXACT_MAX_DIM}, got {}", d * p)));
                }
                let h = self.hessian(w_star);
                let solved = h.clone().lu().solve(&rhs).filter(|v| v.iter().all(|x| x.is_finite()));
                match solved {
                    Some(v) => (v, false),
                    None => {
                        let damped = h + DMatrix::identity(d * p, d * p) * DAMPING;
                        let v = damped
                            .lu()
                            .solve(&rhs)
                            .ok_or(DspError::NonFinite { iteration: 0, what: "damped hessian solve" })?;
                        (v, true)
                    }
                }
            }
            HessianMode::Diagonal => {
                let diag = self.hessian_diagonal(w_star);
                let mut damped = false;
                let v = DVector::from_fn(d * p, |k, _| {
                    let mut h = diag[k];
                    if h.abs() <= 1e-12 {
                        h += DAMPING;
                        damped = true;
                    }
                    rhs[k] / h
                });
                (v, damped)
            }
        };
        let n_pos = self.bags.positive.nrows();
        let n_neg = self.bags.negative.nrows();
        let mut positive = DMatrix::zeros(n_pos, d);
        let mut negative = DMatrix::zeros(n_neg, d);
        for (out, neg, count) in [(&mut positive, false, n_pos), (&mut negative, true, n_neg)] {
            for t in 0..count {
                let row = -(self.mixed(w_star, neg, t).transpose() * &v);
                out.row_mut(t).copy_from(&row.transpose());
            }
        }
        Ok(InputGradient { positive, negative, damped })
    }
}

/// Argmin gradient for a pooled descriptor under the penalty form. Requires
/// the squared-hinge variant.
pub fn grad_wrt_input(
    w_star: &DMatrix<f64>,
    bags: &SequenceBags,
    segs: &TemporalSegments,
    params: &DspParams,
    upstream: &DMatrix<f64>,
    mode: HessianMode,
) -> Result<InputGradient> {
    if params.hinge_variant != HingeVariant::SquaredHinge {
        return Err(DspError::param("argmin gradients need the squared-hinge variant"));
    }
    let problem = PenaltyProblem::new(bags, segs.ordering_pairs(params.consecutive_only), params.ordering_weight);
    problem.input_gradient(w_star, upstream, mode)
}

/// Outcome of one finite-difference-through-argmin comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradCheck {
    Passed { rel_error: f64 },
    Failed { rel_error: f64 },
    /// A perturbed re-solve changed the hinge active set.
    ActiveSetChanged,
    /// The unperturbed or a perturbed re-solve did not reach tolerance.
    NotConverged,
}

/// Compares the exact tied gradient of `⟨G, W*(X)⟩` (with `Z = X + ε`) against
/// central differences, re-solving the penalty problem for every probe.
pub fn check_tied_gradient(
    frames: &DMatrix<f64>,
    epsilon: &[f64],
    pairs: &[(usize, usize)],
    ordering_weight: f64,
    w0: &DMatrix<f64>,
    upstream: &DMatrix<f64>,
    step: f64,
    tol: f64,
) -> Result<GradCheck> {
    let solve = SolveParams::default();
    let bags = SequenceBags::from_perturbation(frames, epsilon)?;
    let problem = PenaltyProblem::new(&bags, pairs.to_vec(), ordering_weight);
    let base = problem.solve(w0, &solve)?;
    if !base.converged {
        return Ok(GradCheck::NotConverged);
    }
    let active = problem.active_set(&base.w);
    let analytic = problem.input_gradient(&base.w, upstream, HessianMode::Exact)?.tied();

    let mut numeric = DMatrix::zeros(frames.nrows(), frames.ncols());
    for t in 0..frames.nrows() {
        for l in 0..frames.ncols() {
            let mut values = [0.0; 2];
            for (slot, sign) in [(0, 1.0), (1, -1.0)] {
                let mut moved = frames.clone();
                moved[(t, l)] += sign * step;
                let b = SequenceBags::from_perturbation(&moved, epsilon)?;
                let pr = PenaltyProblem::new(&b, pairs.to_vec(), ordering_weight);
                let sol = pr.solve(&base.w, &solve)?;
                if !sol.converged {
                    return Ok(GradCheck::NotConverged);
                }
                if pr.active_set(&sol.w) != active {
                    return Ok(GradCheck::ActiveSetChanged);
                }
                values[slot] = upstream.dot(&sol.w);
            }
            numeric[(t, l)] = (values[0] - values[1]) / (2.0 * step);
        }
    }
    let scale = analytic.norm().max(numeric.norm()).max(1e-8);
    let rel_error = (&analytic - &numeric).norm() / scale;
    Ok(if rel_error <= tol { GradCheck::Passed { rel_error } } else { GradCheck::Failed { rel_error } })
}
