//! Discriminative subspace pooling.
//!
//! A sequence `X` (positive bag, label +1) is contrasted with a negative bag
//! `Z` (label −1), usually `Z = X + ε` for a universal perturbation `ε`. The
//! pooled descriptor is the orthonormal `d × p` matrix `W*` minimizing the
//! multi-hyperplane hinge objective in [`objective`] under temporal ordering
//! constraints within segments of length `δ`.

pub mod argmin;
pub mod objective;
pub mod segments;

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{derive_seed_for_id, FeatureSequence};
use crate::error::{DspError, Result};
use crate::io::{dim_u32, read_file, write_file, Decoder, Encoder, DESCRIPTOR_MAGIC};
use crate::perturb::Perturbation;
use crate::rcg::{self, RcgParams, RcgTrace, Termination};
use crate::stiefel::{self, StiefelPoint};

pub use objective::{DspObjective, HingeVariant, OpCounts};
pub use segments::{build_segments, compute_delta, mean_delta, SegmentPolicy, TemporalSegments};

/// Positive and negative bags for one sequence, one member per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBags {
    pub positive: DMatrix<f64>,
    pub negative: DMatrix<f64>,
}

impl SequenceBags {
    pub fn new(positive: DMatrix<f64>, negative: DMatrix<f64>) -> Result<Self> {
        if positive.nrows() == 0 {
            return Err(DspError::SequenceTooShort { n: 0 });
        }
        if positive.ncols() != negative.ncols() {
            return Err(DspError::dim("sequence bags", positive.ncols(), negative.ncols()));
        }
        Ok(SequenceBags { positive, negative })
    }

    /// `Z = X + ε` row-wise.
    pub fn from_perturbation(frames: &DMatrix<f64>, epsilon: &[f64]) -> Result<Self> {
        if frames.ncols() != epsilon.len() {
            return Err(DspError::dim("perturbation", frames.ncols(), epsilon.len()));
        }
        let negative = DMatrix::from_fn(frames.nrows(), frames.ncols(), |i, j| frames[(i, j)] + epsilon[j]);
        SequenceBags::new(frames.clone(), negative)
    }

    pub fn frames(&self) -> usize {
        self.positive.nrows()
    }

    pub fn dim(&self) -> usize {
        self.positive.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DspParams {
    /// Number of hyperplanes (subspace dimension).
    pub p: usize,
    /// Weight of the in-segment ordering term; the `1/(n(n−1))` factor is
    /// applied on top.
    pub ordering_weight: f64,
    pub hinge_variant: HingeVariant,
    pub segment_policy: SegmentPolicy,
    /// Segment length for the `Fixed` and (resolved) `DatasetMean` policies.
    pub delta: Option<usize>,
    pub delta_min: usize,
    /// Use only `(i, i+1)` ordering pairs instead of every in-segment pair.
    pub consecutive_only: bool,
    pub rcg: RcgParams,
}

impl Default for DspParams {
    fn default() -> Self {
        DspParams {
            p: 6,
            ordering_weight: 1.0,
            hinge_variant: HingeVariant::Hinge,
            segment_policy: SegmentPolicy::PerSequence,
            delta: None,
            delta_min: 2,
            consecutive_only: false,
            rcg: RcgParams::default(),
        }
    }
}

impl DspParams {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.p < 1 || self.p > d {
            return Err(DspError::param(format!("subspace dimension p={} must satisfy 1 <= p <= d={d}", self.p)));
        }
        if !(self.ordering_weight >= 0.0 && self.ordering_weight.is_finite()) {
            return Err(DspError::param("ordering_weight must be finite and non-negative"));
        }
        if self.delta_min < 1 {
            return Err(DspError::param("delta_min must be at least 1"));
        }
        if self.delta == Some(0) {
            return Err(DspError::param("delta must be at least 1"));
        }
        self.rcg.validate()
    }

    /// Stable hash of the parameters (first 16 hex digits of SHA-256 over
    /// their TOML form).
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("params serialize");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Segment length for `frames` under the configured policy.
    pub fn resolve_delta(&self, frames: &DMatrix<f64>) -> Result<usize> {
        match self.segment_policy {
            SegmentPolicy::PerSequence => compute_delta(frames, self.delta_min),
            SegmentPolicy::DatasetMean | SegmentPolicy::Fixed => self.delta.ok_or_else(|| {
                DspError::param(format!(
                    "segment policy {:?} needs a resolved delta",
                    self.segment_policy
                ))
            }),
        }
    }
}

/// Rounded mean of per-sequence `δ` over `sequences`.
pub fn dataset_delta<'a>(sequences: impl IntoIterator<Item = &'a FeatureSequence>, delta_min: usize) -> Result<usize> {
    let deltas = sequences
        .into_iter()
        .map(|s| compute_delta(s.frames(), delta_min))
        .collect::<Result<Vec<_>>>()?;
    mean_delta(&deltas)
}

/// A pooled subspace with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceDescriptor {
    pub point: StiefelPoint,
    pub sequence_id: String,
    pub params_hash: String,
}

impl SubspaceDescriptor {
    pub fn matrix(&self) -> &DMatrix<f64> {
        self.point.matrix()
    }
}

#[derive(Debug, Clone)]
pub struct PoolOutcome {
    pub descriptor: SubspaceDescriptor,
    pub trace: RcgTrace,
    pub termination: Termination,
    pub delta: usize,
}

fn is_constant(frames: &DMatrix<f64>) -> bool {
    let first = frames.row(0);
    frames.row_iter().all(|r| r == first)
}

/// Deterministic start: the top-`p` right singular vectors of the stacked
/// `2n × d` bag matrix, each signed so its largest-magnitude entry is
/// positive. Missing directions (rank below `p`) are filled from a seeded
/// Gaussian draw orthogonalized against the rest.
pub fn initial_subspace(bags: &SequenceBags, p: usize, seed: u64) -> Result<StiefelPoint> {
    let d = bags.dim();
    let stacked = DMatrix::from_fn(bags.positive.nrows() + bags.negative.nrows(), d, |i, j| {
        if i < bags.positive.nrows() {
            bags.positive[(i, j)]
        } else {
            bags.negative[(i - bags.positive.nrows(), j)]
        }
    });
    let m = stacked.nrows();

    // Eigenpairs of the smaller Gram matrix; map back to ℝ^d when needed.
    let (values, vectors) = if d <= m {
        let eig = SymmetricEigen::new(stacked.transpose() * &stacked);
        (eig.eigenvalues, eig.eigenvectors)
    } else {
        let eig = SymmetricEigen::new(&stacked * stacked.transpose());
        let mapped = stacked.transpose() * &eig.eigenvectors;
        (eig.eigenvalues, mapped)
    };
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let top = values.get(order.first().copied().unwrap_or(0)).copied().unwrap_or(0.0).max(0.0);

    let mut basis: Vec<nalgebra::DVector<f64>> = Vec::with_capacity(p);
    for &k in &order {
        if basis.len() == p {
            break;
        }
        if values[k] <= 1e-20 * top.max(f64::MIN_POSITIVE) || values[k] <= 0.0 {
            break;
        }
        let mut v = vectors.column(k).into_owned();
        for b in &basis {
            let r = b.dot(&v);
            v.axpy(-r, b, 1.0);
        }
        let norm = v.norm();
        if norm > 1e-8 {
            basis.push(v / norm);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while basis.len() < p {
        let mut v = nalgebra::DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        for _ in 0..2 {
            for b in &basis {
                let r = b.dot(&v);
                v.axpy(-r, b, 1.0);
            }
        }
        let norm = v.norm();
        if norm > 1e-8 {
            basis.push(v / norm);
        }
    }
    let mut w = DMatrix::from_columns(&basis);
    w = stiefel::qf(&w)?;
    for mut col in w.column_iter_mut() {
        let (mut idx, mut best) = (0, f64::NEG_INFINITY);
        for (k, v) in col.iter().enumerate() {
            if v.abs() > best {
                best = v.abs();
                idx = k;
            }
        }
        if col[idx] < 0.0 {
            col.neg_mut();
        }
    }
    StiefelPoint::new(w)
}

/// Pools arbitrary bags with an explicit segment length.
pub fn pool_bags(bags: &SequenceBags, delta: usize, params: &DspParams, sequence_id: &str) -> Result<PoolOutcome> {
    params.validate(bags.dim())?;
    let n = bags.frames();
    if n < 2 {
        return Err(DspError::SequenceTooShort { n });
    }
    let segs = build_segments(n, delta)?;
    let pairs = if is_constant(&bags.positive) { Vec::new() } else { segs.ordering_pairs(params.consecutive_only) };
    let objective = DspObjective::new(bags, pairs, params.ordering_weight, params.hinge_variant);
    let w0 = initial_subspace(bags, params.p, params.rcg.seed)?;
    let outcome = rcg::minimize(
        |w| objective.cost(w.matrix()),
        |w| objective.gradient(w.matrix()),
        w0,
        &params.rcg,
    )?;
    Ok(PoolOutcome {
        descriptor: SubspaceDescriptor {
            point: outcome.point,
            sequence_id: sequence_id.to_string(),
            params_hash: params.hash(),
        },
        trace: outcome.trace,
        termination: outcome.termination,
        delta,
    })
}

/// Pools `seq` against its perturbed copy `seq + ε`.
pub fn pool_sequence(seq: &FeatureSequence, eps: &Perturbation, params: &DspParams) -> Result<PoolOutcome> {
    if seq.len() < 2 {
        return Err(DspError::SequenceTooShort { n: seq.len() });
    }
    params.validate(seq.dim())?;
    let bags = SequenceBags::from_perturbation(seq.frames(), eps.epsilon.as_slice())?;
    let delta = params.resolve_delta(seq.frames())?;
    pool_bags(&bags, delta, params, &seq.id)
}

/// Builds the negative bag for a sequence.
pub trait NegativeBag: Sync {
    fn negative(&self, seq: &FeatureSequence, seed: u64) -> Result<DMatrix<f64>>;
}

impl NegativeBag for Perturbation {
    fn negative(&self, seq: &FeatureSequence, _seed: u64) -> Result<DMatrix<f64>> {
        Ok(SequenceBags::from_perturbation(seq.frames(), self.epsilon.as_slice())?.negative)
    }
}

/// Pools many sequences in parallel. Each sequence's seed is derived from
/// `params.rcg.seed` and its id, so results do not depend on scheduling.
pub fn pool_many<N: NegativeBag>(sequences: &[FeatureSequence], noise: &N, params: &DspParams) -> Result<Vec<PoolOutcome>> {
    sequences
        .par_iter()
        .map(|seq| {
            let seed = derive_seed_for_id(params.rcg.seed, &seq.id);
            let negative = noise.negative(seq, seed)?;
            let bags = SequenceBags::new(seq.frames().clone(), negative)?;
            let delta = params.resolve_delta(seq.frames())?;
            let mut local = params.clone();
            local.rcg.seed = seed;
            let mut out = pool_bags(&bags, delta, &local, &seq.id)?;
            out.descriptor.params_hash = params.hash();
            Ok(out)
        })
        .collect()
}

pub fn encode_descriptor(w: &DMatrix<f64>) -> Result<Vec<u8>> {
    let mut e = Encoder::new(DESCRIPTOR_MAGIC);
    e.u32(dim_u32(w.nrows(), "descriptor rows")?)
        .u32(dim_u32(w.ncols(), "descriptor columns")?)
        .matrix(w);
    Ok(e.finish())
}

pub fn decode_descriptor(bytes: &[u8]) -> Result<StiefelPoint> {
    let mut dec = Decoder::new(bytes, DESCRIPTOR_MAGIC)?;
    let d = dec.usize()?;
    let p = dec.usize()?;
    let w = dec.matrix(d, p)?;
    dec.finish()?;
    StiefelPoint::new(w)
}

pub fn write_descriptor(w: &StiefelPoint, path: &Path) -> Result<()> {
    write_file(path, &encode_descriptor(w.matrix())?)
}

pub fn read_descriptor(path: &Path) -> Result<StiefelPoint> {
    decode_descriptor(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perturb::Perturbation;
    use nalgebra::DVector;

    fn sequence(seed: u64, n: usize, d: usize) -> FeatureSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = DMatrix::from_fn(n, d, |i, _| rng.sample::<f64, _>(StandardNormal) + 0.1 * i as f64);
        FeatureSequence::new(format!("s{seed}"), 0, frames).unwrap()
    }

    fn eps(values: Vec<f64>) -> Perturbation {
        Perturbation::from_epsilon(DVector::from_vec(values), 10.0, 0.0, 0.0)
    }

    #[test]
    fn bag_identity_for_exact_single_hyperplane() {
        // Two frames in ℝ²; w with wᵀx_i = 1 and wᵀz_i = −1 exactly.
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let w = DVector::from_vec(vec![1.0, 1.0]);
        let epsilon = [-1.0, -1.0];
        let bags = SequenceBags::from_perturbation(&x, &epsilon).unwrap();
        for i in 0..2 {
            assert!((bags.positive.row(i) * &w)[0] - 1.0 == 0.0);
            assert!((bags.negative.row(i) * &w)[0] + 1.0 == 0.0);
        }
        let e = DVector::from_row_slice(&epsilon);
        assert!((w.dot(&e) + 2.0).abs() <= 1e-10);
        let diff = &bags.negative - &bags.positive;
        for row in diff.row_iter() {
            assert_eq!(row.iter().copied().collect::<Vec<_>>(), epsilon.to_vec());
        }
    }

    #[test]
    fn pooled_descriptor_is_orthonormal_and_deterministic() {
        let seq = sequence(1, 20, 10);
        let e = eps(vec![0.3; 10]);
        let params = DspParams { p: 3, ..DspParams::default() };
        let a = pool_sequence(&seq, &e, &params).unwrap();
        let b = pool_sequence(&seq, &e, &params).unwrap();
        assert!(a.descriptor.point.residual() <= 1e-10);
        let bits = |o: &PoolOutcome| o.descriptor.matrix().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert!(a.trace.is_monotone(1e-12));
    }

    #[test]
    fn separable_bags_end_with_correct_signs() {
        // Class signal lives in the first four coordinates; ε points along the
        // last coordinate, which carries no signal.
        let (n, d) = (30, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let frames = DMatrix::from_fn(n, d, |_, j| {
            if j < 4 {
                2.0 + 0.5 * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.3 * rng.sample::<f64, _>(StandardNormal)
            }
        });
        let seq = FeatureSequence::new("sep", 0, frames).unwrap();
        let mut epsilon = vec![0.0; d];
        epsilon[d - 1] = -4.0;
        let params = DspParams { p: 2, ..DspParams::default() };
        let out = pool_sequence(&seq, &eps(epsilon.clone()), &params).unwrap();
        let bags = SequenceBags::from_perturbation(seq.frames(), &epsilon).unwrap();
        let w = out.descriptor.matrix();
        let mut correct = 0;
        for (bag, y) in [(&bags.positive, 1.0), (&bags.negative, -1.0)] {
            let proj = bag * w;
            for row in proj.row_iter() {
                if objective::best_column(row.iter().copied(), y).1 > 0.0 {
                    correct += 1;
                }
            }
        }
        assert!(correct as f64 >= 0.9 * (2 * n) as f64, "{correct} of {}", 2 * n);
    }

    #[test]
    fn constant_sequence_still_pools() {
        let frames = DMatrix::from_fn(6, 5, |_, j| j as f64 + 1.0);
        let seq = FeatureSequence::new("flat", 0, frames).unwrap();
        assert_eq!(compute_delta(seq.frames(), 2).unwrap(), 2);
        let out = pool_sequence(&seq, &eps(vec![-0.5; 5]), &DspParams { p: 3, ..DspParams::default() }).unwrap();
        assert!(out.descriptor.point.residual() <= 1e-10);
    }

    #[test]
    fn parameter_errors() {
        let short = FeatureSequence::new("x", 0, DMatrix::zeros(2, 3)).unwrap();
        let e = eps(vec![0.0; 3]);
        assert!(matches!(
            pool_sequence(&short, &e, &DspParams { p: 4, ..DspParams::default() }),
            Err(DspError::Parameter(_))
        ));
        let fixed = DspParams { p: 1, segment_policy: SegmentPolicy::Fixed, ..DspParams::default() };
        assert!(pool_sequence(&short, &e, &fixed).is_err());
        let ok = DspParams { delta: Some(2), ..fixed };
        assert!(pool_sequence(&short, &e, &ok).is_ok());
        assert!(matches!(
            SequenceBags::from_perturbation(&DMatrix::zeros(2, 3), &[0.0; 2]),
            Err(DspError::Dimension { .. })
        ));
    }

    #[test]
    fn initializer_signs_and_rank_completion() {
        let seq = sequence(3, 12, 7);
        let bags = SequenceBags::from_perturbation(seq.frames(), &[0.1; 7]).unwrap();
        let w = initial_subspace(&bags, 4, 0).unwrap();
        for col in w.matrix().column_iter() {
            let idx = col.iamax();
            assert!(col[idx] > 0.0);
        }
        // Rank-2 bags (all rows equal within each bag) still yield p = 4 columns.
        let flat = DMatrix::from_fn(5, 6, |_, j| j as f64);
        let flat_bags = SequenceBags::from_perturbation(&flat, &[1.0, 0.0, 0.0, 0.0, 0.0, 2.0]).unwrap();
        let w = initial_subspace(&flat_bags, 4, 9).unwrap();
        assert!(w.residual() <= 1e-10);
    }

    #[test]
    fn batch_pooling_is_schedule_independent() {
        let seqs: Vec<FeatureSequence> = (0..6).map(|k| sequence(k, 15, 6)).collect();
        let e = eps(vec![0.2; 6]);
        let params = DspParams { p: 2, ..DspParams::default() };
        let all = pool_many(&seqs, &e, &params).unwrap();
        let single = pool_many(&seqs[3..4], &e, &params).unwrap();
        assert_eq!(all[3].descriptor.matrix(), single[0].descriptor.matrix());
    }

    #[test]
    fn descriptor_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = StiefelPoint::random(9, 3, &mut rng).unwrap();
        let back = decode_descriptor(&encode_descriptor(w.matrix()).unwrap()).unwrap();
        assert_eq!(back, w);
        let bytes = encode_descriptor(w.matrix()).unwrap();
        assert!(matches!(decode_descriptor(&bytes[..20]), Err(DspError::Truncated { .. })));
    }
}
