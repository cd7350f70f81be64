//! Synthetic labelled feature sequences.
//!
//! Each sequence has `signal_dims` coordinates driven by a class-specific
//! stable linear dynamical system and `dim − signal_dims` background
//! coordinates driven by a class-independent random walk, plus additive
//! Gaussian noise on every coordinate. The dynamics-dominated variant
//! replaces both with a linear sweep whose direction encodes the class.
//!
//! Generation is fully determined by the seed. Class parameters come from a
//! `ChaCha8Rng` seeded with `seed`; sequence `k` (in class-major order) uses
//! its own `ChaCha8Rng` seeded with `derive_seed(seed, k)`, so sequences can
//! be produced in parallel without changing the result. All arithmetic is
//! performed in a fixed order.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DspError, Result};
use crate::io::{dim_u32, read_file, write_file, Decoder, Encoder, FEATURES_MAGIC};

/// An ordered `n × d` matrix of frame features, one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub id: String,
    pub label: usize,
    frames: DMatrix<f64>,
}

impl FeatureSequence {
    pub fn new(id: impl Into<String>, label: usize, frames: DMatrix<f64>) -> Result<Self> {
        if frames.nrows() < 2 {
            return Err(DspError::SequenceTooShort { n: frames.nrows() });
        }
        if frames.ncols() == 0 {
            return Err(DspError::dim("feature sequence", "d >= 1", 0));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(DspError::NonFinite { iteration: 0, what: "feature sequence" });
        }
        Ok(FeatureSequence { id: id.into(), label, frames })
    }

    pub fn frames(&self) -> &DMatrix<f64> {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    pub fn frame(&self, i: usize) -> DVector<f64> {
        self.frames.row(i).transpose()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(DspError::param(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthVariant {
    /// Classes differ in their signal offset and in their dynamics.
    Default,
    /// Classes come in pairs sharing two signal directions `a` and `b`. A
    /// sequence of the even class sweeps linearly from `b` to `a`, one of the
    /// odd class from `a` to `b`, with a random overall sign and white noise
    /// on every coordinate. The linear dynamics and the background walk are
    /// off. Every class has zero mean and both classes of a pair visit the
    /// same states, so only the direction of time tells them apart.
    DynamicsDominated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub dim: usize,
    pub signal_dims: usize,
    /// Standard deviation of the additive per-coordinate noise.
    pub noise_std: f64,
    pub variant: SynthVariant,
    /// Norm of each class's signal offset, or of the sweep end points in the
    /// dynamics-dominated variant.
    pub class_offset: f64,
    /// Modulus of the slow rotation plane of each class's dynamics.
    pub slow_modulus: f64,
    /// Modulus of the remaining, fast-decaying modes.
    pub fast_modulus: f64,
    /// Norm of the class-specific start displacement inside the slow plane.
    pub start_amplitude: f64,
    pub start_std: f64,
    /// Standard deviation of the LDS process noise.
    pub process_std: f64,
    /// Standard deviation of each random-walk step in the background.
    pub background_step: f64,
    /// Standard deviation of the random start point of the background walk.
    pub background_start: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 5,
            per_class: 100,
            n_min: 30,
            n_max: 50,
            dim: 64,
            signal_dims: 16,
            noise_std: 0.5,
            variant: SynthVariant::Default,
            class_offset: 3.0,
            slow_modulus: 0.97,
            fast_modulus: 0.5,
            start_amplitude: 3.0,
            start_std: 0.1,
            process_std: 0.5,
            background_step: 0.1,
            background_start: 20.0,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 1 || self.per_class < 1 {
            return Err(DspError::param("need at least one class and one sequence per class"));
        }
        if self.n_min < 2 || self.n_max < self.n_min {
            return Err(DspError::param(format!(
                "sequence length range [{}, {}] invalid (need 2 <= n_min <= n_max)",
                self.n_min, self.n_max
            )));
        }
        if self.signal_dims < 2 || self.signal_dims >= self.dim {
            return Err(DspError::param(format!(
                "signal_dims must satisfy 2 <= s < d, got s={} d={}",
                self.signal_dims, self.dim
            )));
        }
        for (name, v) in [
            ("noise_std", self.noise_std),
            ("class_offset", self.class_offset),
            ("start_amplitude", self.start_amplitude),
            ("start_std", self.start_std),
            ("process_std", self.process_std),
            ("background_step", self.background_step),
            ("background_start", self.background_start),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(DspError::param(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        for (name, v) in [("slow_modulus", self.slow_modulus), ("fast_modulus", self.fast_modulus)] {
            if !(0.0..=0.99).contains(&v) {
                return Err(DspError::param(format!("{name} must lie in [0, 0.99], got {v}")));
            }
        }
        if !(self.test_fraction >= 0.0 && self.test_fraction < 1.0) {
            return Err(DspError::param("test_fraction must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn dynamics_dominated(self) -> Self {
        SynthSpec { variant: SynthVariant::DynamicsDominated, ..self }
    }
}

/// Parameters of one class's signal process.
#[derive(Debug, Clone)]
pub struct ClassDynamics {
    pub offset: DVector<f64>,
    pub transition: DMatrix<f64>,
    pub start: DVector<f64>,
    /// Sweep end points of the dynamics-dominated variant: frame `t` of `n`
    /// is `±(τ·rising + (1 − τ)·falling)` plus noise, `τ = t/(n − 1)`. Zero in
    /// the default variant.
    pub rising: DVector<f64>,
    pub falling: DVector<f64>,
}

impl ClassDynamics {
    pub fn spectral_radius(&self) -> f64 {
        self.transition
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub sequences: Vec<FeatureSequence>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.sequences.iter().map(|s| s.label).collect()
    }

    /// All frames of the given split, with the sequence label per frame.
    pub fn frames(&self, split: Split) -> (Vec<DVector<f64>>, Vec<usize>) {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in self.indices(split) {
            let seq = &self.sequences[i];
            for t in 0..seq.len() {
                xs.push(seq.frame(t));
                ys.push(seq.label);
            }
        }
        (xs, ys)
    }
}

/// SplitMix64 finalizer applied to `seed ^ golden·(index + 1)`.
///
/// Used to derive independent per-item seeds that do not depend on
/// scheduling order.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index.wrapping_add(1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed derived from a string id (FNV-1a), for per-sequence seeding keyed
/// by sequence id.
pub fn derive_seed_for_id(seed: u64, id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    derive_seed(seed, h)
}

fn gaussian_vec<R: Rng>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn random_orthogonal<R: Rng>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    crate::stiefel::qf(&g).expect("gaussian matrix is full rank with probability one")
}

fn rotation_block(m: &mut DMatrix<f64>, at: usize, modulus: f64, angle: f64) {
    let (s, c) = angle.sin_cos();
    m[(at, at)] = modulus * c;
    m[(at, at + 1)] = -modulus * s;
    m[(at + 1, at)] = modulus * s;
    m[(at + 1, at + 1)] = modulus * c;
}

/// Draws the per-class signal processes.
pub fn class_dynamics(spec: &SynthSpec) -> Result<Vec<ClassDynamics>> {
    spec.validate()?;
    let s = spec.signal_dims;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // Offsets are spread over an orthonormal frame when there is room.
    let frame = random_orthogonal(s, &mut rng);
    let mut out: Vec<ClassDynamics> = Vec::with_capacity(spec.classes);
    for c in 0..spec.classes {
        if spec.variant == SynthVariant::DynamicsDominated && c % 2 == 1 {
            let mut twin = out[c - 1].clone();
            std::mem::swap(&mut twin.rising, &mut twin.falling);
            out.push(twin);
            continue;
        }
        let basis = random_orthogonal(s, &mut rng);
        let mut core = DMatrix::<f64>::zeros(s, s);
        let slow_angle = rng.random_range(0.05..0.35);
        rotation_block(&mut core, 0, spec.slow_modulus, slow_angle);
        let mut k = 2;
        while k + 1 < s {
            let angle = rng.random_range(0.3..2.5);
            rotation_block(&mut core, k, spec.fast_modulus, angle);
            k += 2;
        }
        if k < s {
            core[(k, k)] = spec.fast_modulus;
        }
        let transition = &basis * core * basis.transpose();
        let start = basis.column(0) * spec.start_amplitude;
        let (offset, rising, falling) = match spec.variant {
            SynthVariant::Default => {
                let dir = if c < s { frame.column(c).into_owned() } else { gaussian_vec(s, &mut rng).normalize() };
                (dir * spec.class_offset, DVector::zeros(s), DVector::zeros(s))
            }
            SynthVariant::DynamicsDominated => {
                let ends = random_orthogonal(s, &mut rng);
                (DVector::zeros(s), ends.column(0) * spec.class_offset, ends.column(1) * spec.class_offset)
            }
        };
        out.push(ClassDynamics { offset, transition, start: start.into_owned(), rising, falling });
    }
    Ok(out)
}

fn generate_sequence(spec: &SynthSpec, dynamics: &ClassDynamics, label: usize, index: usize) -> Result<FeatureSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, index as u64));
    let n = rng.random_range(spec.n_min..=spec.n_max);
    let s = spec.signal_dims;
    let b = spec.dim - s;

    let mut frames = DMatrix::<f64>::zeros(n, spec.dim);
    match spec.variant {
        SynthVariant::Default => {
            let mut state = &dynamics.start + gaussian_vec(s, &mut rng) * spec.start_std;
            let mut background = gaussian_vec(b, &mut rng) * spec.background_start;
            for t in 0..n {
                if t > 0 {
                    state = &dynamics.transition * &state + gaussian_vec(s, &mut rng) * spec.process_std;
                    background += gaussian_vec(b, &mut rng) * spec.background_step;
                }
                let noise = gaussian_vec(spec.dim, &mut rng) * spec.noise_std;
                for j in 0..s {
                    frames[(t, j)] = dynamics.offset[j] + state[j] + noise[j];
                }
                for j in 0..b {
                    frames[(t, s + j)] = background[j] + noise[s + j];
                }
            }
        }
        SynthVariant::DynamicsDominated => {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            for t in 0..n {
                let tau = if n > 1 { t as f64 / (n - 1) as f64 } else { 0.0 };
                let noise = gaussian_vec(spec.dim, &mut rng) * spec.noise_std;
                for j in 0..s {
                    frames[(t, j)] = sign * (tau * dynamics.rising[j] + (1.0 - tau) * dynamics.falling[j]) + noise[j];
                }
                for j in 0..b {
                    frames[(t, s + j)] = noise[s + j];
                }
            }
        }
    }
    FeatureSequence::new(format!("seq{index:05}"), label, frames)
}

/// Stratified split: within each class, a seeded shuffle sends
/// `round(test_fraction · count)` sequences to the test split.
pub fn stratified_split(labels: &[usize], test_fraction: f64, seed: u64) -> Vec<Split> {
    let mut splits = vec![Split::Train; labels.len()];
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX));
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        let n_test = (test_fraction * members.len() as f64).round() as usize;
        for &i in members.iter().take(n_test) {
            splits[i] = Split::Test;
        }
    }
    splits
}

pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    let dynamics = class_dynamics(spec)?;
    let jobs: Vec<(usize, usize)> = (0..spec.classes)
        .flat_map(|c| (0..spec.per_class).map(move |k| (c, c * spec.per_class + k)))
        .collect();
    let sequences = jobs
        .par_iter()
        .map(|&(c, index)| generate_sequence(spec, &dynamics[c], c, index))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = sequences.iter().map(|s| s.label).collect();
    let splits = stratified_split(&labels, spec.test_fraction, spec.seed);
    Ok(Dataset { sequences, splits })
}

/// Serializes the frames in the `DSPF` container. The id and label live in
/// the dataset manifest, not in the file.
pub fn encode_features(seq: &FeatureSequence) -> Result<Vec<u8>> {
    let mut e = Encoder::new(FEATURES_MAGIC);
    e.u32(dim_u32(seq.len(), "frame count")?)
        .u32(dim_u32(seq.dim(), "feature dimension")?)
        .matrix(seq.frames());
    Ok(e.finish())
}

pub fn decode_features(bytes: &[u8], id: impl Into<String>, label: usize) -> Result<FeatureSequence> {
    let mut d = Decoder::new(bytes, FEATURES_MAGIC)?;
    let n = d.usize()?;
    let dim = d.usize()?;
    let frames = d.matrix(n, dim)?;
    d.finish()?;
    FeatureSequence::new(id, label, frames)
}

pub fn write_features(seq: &FeatureSequence, path: &Path) -> Result<()> {
    write_file(path, &encode_features(seq)?)
}

pub fn read_features(path: &Path) -> Result<FeatureSequence> {
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    decode_features(&read_file(path)?, id, 0)
}

/// One row of a dataset manifest (`sequence_id,path,label,split`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub sequence_id: String,
    pub path: String,
    pub label: usize,
    pub split: Split,
}

pub fn write_manifest(rows: &[ManifestRow], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    if !path.exists() {
        return Err(DspError::MissingInput(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<ManifestRow>, _>>()?)
}

/// Writes each sequence to `dir/features/<id>.dspf` and the manifest to
/// `dir/manifest.csv`. Paths in the manifest are relative to `dir`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<Vec<ManifestRow>> {
    let rows: Vec<ManifestRow> = ds
        .sequences
        .iter()
        .zip(&ds.splits)
        .map(|(seq, split)| ManifestRow {
            sequence_id: seq.id.clone(),
            path: format!("features/{}.dspf", seq.id),
            label: seq.label,
            split: *split,
        })
        .collect();
    for (seq, row) in ds.sequences.iter().zip(&rows) {
        write_features(seq, &dir.join(&row.path))?;
    }
    write_manifest(&rows, &dir.join("manifest.csv"))?;
    Ok(rows)
}

/// Loads a dataset from a manifest; relative paths resolve against the
/// manifest's directory.
pub fn read_dataset(manifest: &Path) -> Result<Dataset> {
    let rows = read_manifest(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut sequences = Vec::with_capacity(rows.len());
    let mut splits = Vec::with_capacity(rows.len());
    for row in rows {
        let path = base.join(&row.path);
        let mut seq = decode_features(&read_file(&path)?, row.sequence_id.clone(), row.label)?;
        seq.id = row.sequence_id;
        sequences.push(seq);
        splits.push(row.split);
    }
    Ok(Dataset { sequences, splits })
}
