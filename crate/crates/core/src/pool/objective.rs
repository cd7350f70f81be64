//! The pooling objective over `W ∈ S(d, p)` and its Euclidean subgradient.
//!
//! ```text
//! g(W) = Σ_{θ ∈ X ∪ Z} ℓ(1 − max_q y(θ)·(Wᵀθ)_q)
//!      + λ / (n(n−1)) · Σ_{(i,j) in-segment, i<j} ℓ(1 + ‖Wᵀx_i‖² − ‖Wᵀx_j‖²)
//! ```
//!
//! with `ℓ(u) = max(0, u)` (or its square). The ordering subgradient
//! `2(x_i x_iᵀ − x_j x_jᵀ)W` is accumulated as `2 Xᵀ diag(c) (XW)` with one
//! coefficient per frame, so each active pair costs `O(1)` on top of a
//! shared `O(ndp)` projection.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::SequenceBags;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HingeVariant {
    Hinge,
    SquaredHinge,
}

impl HingeVariant {
    fn loss(self, u: f64) -> f64 {
        match self {
            HingeVariant::Hinge => u.max(0.0),
            HingeVariant::SquaredHinge => {
                let v = u.max(0.0);
                v * v
            }
        }
    }

    /// Derivative of the loss at `u`, zero on the inactive side.
    fn slope(self, u: f64) -> f64 {
        if u <= 0.0 {
            return 0.0;
        }
        match self {
            HingeVariant::Hinge => 1.0,
            HingeVariant::SquaredHinge => 2.0 * u,
        }
    }
}

/// Flop tallies for one gradient evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub classification: u64,
    pub ordering: u64,
    pub bag_members: u64,
    pub ordering_pairs: u64,
}

/// Largest entry of `y ⊙ row`, with its column (lowest index on ties).
pub(crate) fn best_column(row: impl Iterator<Item = f64>, y: f64) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (q, v) in row.enumerate() {
        let s = y * v;
        if s > best.1 {
            best = (q, s);
        }
    }
    best
}

/// Objective bound to one pair of bags and its ordering pairs.
#[derive(Debug, Clone)]
pub struct DspObjective<'a> {
    bags: &'a SequenceBags,
    pairs: Vec<(usize, usize)>,
    ordering_scale: f64,
    variant: HingeVariant,
}

impl<'a> DspObjective<'a> {
    pub fn new(bags: &'a SequenceBags, pairs: Vec<(usize, usize)>, ordering_weight: f64, variant: HingeVariant) -> Self {
        let n = bags.positive.nrows() as f64;
        let ordering_scale = if n > 1.0 { ordering_weight / (n * (n - 1.0)) } else { 0.0 };
        DspObjective { bags, pairs, ordering_scale, variant }
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn ordering_scale(&self) -> f64 {
        self.ordering_scale
    }

    fn classification_cost(&self, proj: &DMatrix<f64>, y: f64) -> f64 {
        proj.row_iter()
            .map(|row| self.variant.loss(1.0 - best_column(row.iter().copied(), y).1))
            .sum()
    }

    pub fn cost(&self, w: &DMatrix<f64>) -> f64 {
        let pos = &self.bags.positive * w;
        let neg = &self.bags.negative * w;
        let mut total = self.classification_cost(&pos, 1.0) + self.classification_cost(&neg, -1.0);
        if self.ordering_scale != 0.0 && !self.pairs.is_empty() {
            let energy: Vec<f64> = pos.row_iter().map(|r| r.norm_squared()).collect();
            let ordering: f64 = self
                .pairs
                .iter()
                .map(|&(i, j)| self.variant.loss(1.0 + energy[i] - energy[j]))
                .sum();
            total += self.ordering_scale * ordering;
        }
        total
    }

    pub fn gradient(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        self.gradient_counted(w).0
    }

    pub fn gradient_counted(&self, w: &DMatrix<f64>) -> (DMatrix<f64>, OpCounts) {
        let (d, p) = w.shape();
        let mut counts = OpCounts::default();
        let mut grad = DMatrix::<f64>::zeros(d, p);
        let pos = &self.bags.positive * w;
        let neg = &self.bags.negative * w;

        for (bag, proj, y) in [(&self.bags.positive, &pos, 1.0), (&self.bags.negative, &neg, -1.0)] {
            for (t, row) in proj.row_iter().enumerate() {
                counts.bag_members += 1;
                // Projection Wᵀθ plus the argmax over columns.
                counts.classification += (2 * d * p + p) as u64;
                let (r, margin) = best_column(row.iter().copied(), y);
                let coef = self.variant.slope(1.0 - margin);
                if coef != 0.0 {
                    let mut col = grad.column_mut(r);
                    for k in 0..d {
                        col[k] -= coef * y * bag[(t, k)];
                    }
                    counts.classification += (2 * d) as u64;
                }
            }
        }

        if self.ordering_scale != 0.0 && !self.pairs.is_empty() {
            let n = pos.nrows();
            let energy: Vec<f64> = pos.row_iter().map(|r| r.norm_squared()).collect();
            counts.ordering += (2 * n * p) as u64;
            let mut coef = vec![0.0; n];
            for &(i, j) in &self.pairs {
                counts.ordering_pairs += 1;
                counts.ordering += 3;
                let s = self.variant.slope(1.0 + energy[i] - energy[j]);
                if s != 0.0 {
                    coef[i] += s;
                    coef[j] -= s;
                    counts.ordering += 2;
                }
            }
            // 2 λ' Σ_t c_t x_t (x_tᵀ W)
            for (t, &c) in coef.iter().enumerate() {
                if c == 0.0 {
                    continue;
                }
                let scale = 2.0 * self.ordering_scale * c;
                for q in 0..p {
                    let a = scale * pos[(t, q)];
                    let mut col = grad.column_mut(q);
                    for k in 0..d {
                        col[k] += a * self.bags.positive[(t, k)];
                    }
                }
                counts.ordering += (2 * d * p + p) as u64;
            }
            // Shared projection XW used by the energies.
            counts.ordering += (2 * n * d * p) as u64;
        }
        (grad, counts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pool::segments::build_segments;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn bags(x: &[f64], z: &[f64], d: usize) -> SequenceBags {
        SequenceBags::new(
            DMatrix::from_row_slice(x.len() / d, d, x),
            DMatrix::from_row_slice(z.len() / d, d, z),
        )
        .unwrap()
    }

    #[test]
    fn satisfied_margins_cost_nothing() {
        // Column 0 scores +2 on x and -2 on z; ordering energies 4 -> 9 satisfy the margin.
        let b = bags(&[2.0, 0.0, 3.0, 0.0], &[-2.0, 0.0, -3.0, 0.0], 2);
        let w = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let obj = DspObjective::new(&b, vec![(0, 1)], 1.0, HingeVariant::Hinge);
        assert_eq!(obj.cost(&w), 0.0);
        assert_eq!(obj.gradient(&w), DMatrix::zeros(2, 1));
    }

    #[test]
    fn zero_margin_costs_one() {
        let single = bags(&[0.0, 1.0], &[], 2);
        let w = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        for variant in [HingeVariant::Hinge, HingeVariant::SquaredHinge] {
            assert_eq!(DspObjective::new(&single, vec![], 1.0, variant).cost(&w), 1.0);
        }
    }

    /// x1=(1,0), x2=(0,2), ε=(−2,0), w=(1,0)ᵀ, one segment holding both frames.
    #[test]
    fn hand_instance_matches_scalar_arithmetic() {
        let x = [1.0, 0.0, 0.0, 2.0];
        let eps = [-2.0, 0.0];
        let z = [x[0] + eps[0], x[1] + eps[1], x[2] + eps[0], x[3] + eps[1]];
        let b = bags(&x, &z, 2);
        let w = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let obj = DspObjective::new(&b, vec![(0, 1)], 1.0, HingeVariant::Hinge);

        // Scores wᵀθ: x1 → 1, x2 → 0, z1 → −1, z2 → −2.
        let hinge = |u: f64| u.max(0.0);
        let class = hinge(1.0 - 1.0) + hinge(1.0 - 0.0) + hinge(1.0 - 1.0) + hinge(1.0 - 2.0);
        // Energies ‖wᵀx‖²: 1 and 0; pair (1,2) → max(0, 1 + 1 − 0) = 2, scaled by 1/(2·1).
        let ordering = hinge(1.0 + 1.0 - 0.0) / 2.0;
        assert_eq!(obj.cost(&w), class + ordering);
        assert_eq!(class + ordering, 2.0);
    }

    #[test]
    fn single_active_pair_gradient() {
        // Classification inactive (margins ≥ 1 everywhere), ordering pair violated.
        let x = [0.0, 3.0, 1.0, 0.0, 0.0, 0.0];
        let b = SequenceBags::new(DMatrix::from_row_slice(2, 3, &x[..6]), DMatrix::zeros(0, 3)).unwrap();
        let w = DMatrix::from_column_slice(3, 2, &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        let obj = DspObjective::new(&b, vec![(0, 1)], 0.7, HingeVariant::Hinge);
        let xi = DMatrix::from_column_slice(3, 1, &x[0..3]);
        let xj = DMatrix::from_column_slice(3, 1, &x[3..6]);
        let expected = (&xi * xi.transpose() - &xj * xj.transpose()) * &w * (2.0 * 0.7 / 2.0);
        assert!((obj.gradient(&w) - expected).norm() < 1e-14);
    }

    #[test]
    fn argmax_ties_use_lowest_column() {
        assert_eq!(best_column([0.5, 0.5, 0.1].into_iter(), 1.0), (0, 0.5));
        assert_eq!(best_column([0.5, -0.7, -0.7].into_iter(), -1.0), (1, 0.7));
    }

    fn random_instance(seed: u64, d: usize, n: usize, p: usize) -> (SequenceBags, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // The leading coordinate shrinks over time, so with W = [I_p; 0] every
        // ordering pair is active.
        let mut x = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        for t in 0..n {
            x[(t, 0)] = 10.0 * (n - t) as f64;
        }
        let eps = DMatrix::from_fn(1, d, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.5);
        let z = DMatrix::from_fn(n, d, |i, j| x[(i, j)] + eps[(0, j)]);
        let w = crate::stiefel::StiefelPoint::identity(d, p).unwrap().into_matrix();
        (SequenceBags::new(x, z).unwrap(), w)
    }

    #[test]
    fn operation_counts_scale_linearly_in_dimension() {
        let n = 12;
        let p = 3;
        let mut per_member = Vec::new();
        let mut ordering = Vec::new();
        for d in [64, 128, 256] {
            let (b, w) = random_instance(d as u64, d, n, p);
            let segs = build_segments(n, 4).unwrap();
            let obj = DspObjective::new(&b, segs.ordering_pairs(false), 1.0, HingeVariant::Hinge);
            let (_, counts) = obj.gradient_counted(&w);
            assert_eq!(counts.bag_members, 2 * n as u64);
            per_member.push(counts.classification as f64 / counts.bag_members as f64);
            ordering.push(counts.ordering as f64);
            // Never worse than the O(d²p) per-pair bound.
            assert!(counts.ordering <= counts.ordering_pairs * (d * d * p) as u64);
        }
        for k in 1..3 {
            let r_class = per_member[k] / per_member[k - 1];
            let r_order = ordering[k] / ordering[k - 1];
            assert!(r_class <= 2.1, "classification ratio {r_class}");
            assert!(r_order <= 2.1, "ordering ratio {r_order}");
        }
    }
}
