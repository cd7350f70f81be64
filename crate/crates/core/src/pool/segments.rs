//! Temporal segmentation of a sequence into blocks of at most `δ` frames.

use std::ops::Range;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{DspError, Result};

/// Disjoint, ordered frame ranges (0-based, half-open) covering `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemporalSegments {
    pub delta: usize,
    pub ranges: Vec<Range<usize>>,
}

impl TemporalSegments {
    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn frames(&self) -> usize {
        self.ranges.last().map_or(0, |r| r.end)
    }

    /// Ordered frame pairs `(i, j)`, `i < j`, that share a segment. With
    /// `consecutive_only`, only `(i, i + 1)` pairs are produced.
    pub fn ordering_pairs(&self, consecutive_only: bool) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for r in &self.ranges {
            for i in r.clone() {
                if consecutive_only {
                    if i + 1 < r.end {
                        pairs.push((i, i + 1));
                    }
                } else {
                    for j in i + 1..r.end {
                        pairs.push((i, j));
                    }
                }
            }
        }
        pairs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SegmentPolicy {
    /// `δ` estimated from the sequence being pooled.
    PerSequence,
    /// `δ` is the rounded mean of per-sequence estimates over a training set,
    /// resolved by the caller before pooling.
    DatasetMean,
    /// A fixed `δ` supplied in the parameters.
    Fixed,
}

impl SegmentPolicy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "per-sequence" => Ok(SegmentPolicy::PerSequence),
            "dataset-mean" => Ok(SegmentPolicy::DatasetMean),
            "fixed" | "global" => Ok(SegmentPolicy::Fixed),
            other => Err(DspError::param(format!("unknown delta policy {other:?}"))),
        }
    }
}

/// Closest pair of frames `(a, b)`, `a < b`, by Euclidean distance. Ties go
/// to the smallest `a`, then the smallest `b`.
pub fn closest_pair(frames: &DMatrix<f64>) -> Result<(usize, usize)> {
    let n = frames.nrows();
    if n < 2 {
        return Err(DspError::SequenceTooShort { n });
    }
    let mut best = (0, 1);
    let mut best_dist = f64::INFINITY;
    for a in 0..n {
        for b in a + 1..n {
            let dist = (frames.row(a) - frames.row(b)).norm_squared();
            if dist < best_dist {
                best_dist = dist;
                best = (a, b);
            }
        }
    }
    Ok(best)
}

/// Segment length `max(b* − a*, delta_min)` from the closest frame pair.
pub fn compute_delta(frames: &DMatrix<f64>, delta_min: usize) -> Result<usize> {
    let (a, b) = closest_pair(frames)?;
    Ok((b - a).max(delta_min))
}

/// Rounded mean of a collection of per-sequence `δ` values.
pub fn mean_delta(deltas: &[usize]) -> Result<usize> {
    if deltas.is_empty() {
        return Err(DspError::param("cannot average an empty set of segment lengths"));
    }
    let mean = deltas.iter().sum::<usize>() as f64 / deltas.len() as f64;
    Ok((mean.round() as usize).max(1))
}

/// Blocks `T_k = {kδ, …, min(n, (k+1)δ) − 1}` (0-based); the empty trailing
/// block that appears when `δ` divides `n` is dropped.
pub fn build_segments(n: usize, delta: usize) -> Result<TemporalSegments> {
    if n == 0 || delta == 0 {
        return Err(DspError::param(format!("segments need n >= 1 and delta >= 1 (n={n}, delta={delta})")));
    }
    let ranges = (0..=n / delta)
        .map(|k| k * delta..((k + 1) * delta).min(n))
        .filter(|r| !r.is_empty())
        .collect();
    Ok(TemporalSegments { delta, ranges })
}
