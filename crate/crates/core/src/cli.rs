//! Command-line pipeline driver.
//!
//! Every stage reads its inputs from and writes its outputs to the `--out`
//! directory:
//!
//! | stage        | reads                                   | writes                                       |
//! |--------------|-----------------------------------------|----------------------------------------------|
//! | `gen-data`   |                                         | `data/manifest.csv`, `data/features/*.dspf`  |
//! | `train-base` | dataset                                 | `victim.dspv`                                |
//! | `uap`        | dataset, `victim.dspv`                  | `uap.dspe`, `uap.csv`                        |
//! | `pool`       | dataset, `uap.dspe` (uap noise)         | `descriptors/*.dspw`, `pool.csv`             |
//! | `train-svm`  | dataset, descriptors                    | `svm.dspm`, `gram_train.dspg`, `selection.csv` |
//! | `eval`       | dataset, descriptors, `svm.dspm`, `selection.csv` | `predictions_*.csv`, `eval.csv`    |
//! | `baseline`   | dataset                                 | `predictions_{ap,mp}.csv`, `baseline_{ap,mp}.csv` |
//! | `gradcheck`  |                                         | `gradcheck.csv`                              |
//! | `bench`      |                                         | `bench.csv`                                  |
//!
//! Each stage also writes the resolved configuration to `config.toml` and
//! appends one `key=value` line to `runs.txt`.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checks::{argmin_suite, gradient_suite, kernel_suite, manifold_suite, rayleigh_check};
use crate::data::{generate, read_dataset, write_dataset, Dataset, Split};
use crate::error::{DspError, Result};
use crate::experiment::{
    frame_matrix, noise_source, pool_dataset, projection_kernels, run_baseline, Baseline, ExperimentConfig, MethodResult,
    NoiseKind, Prediction,
};
use crate::io::{encode_gram, write_file};
use crate::kernel_svm::{
    accuracy, kernel_gram, read_model, select_model, write_model, KernelKind, KernelSvm, SmoParams,
};
use crate::perturb::{compute_uap, read_model as read_victim, read_perturbation, train_softmax, write_model as write_victim, write_perturbation, NoiseSource};
use crate::pool::{pool_bags, read_descriptor, write_descriptor, DspParams, SegmentPolicy, SequenceBags};

/// Pooling time per frame above which `bench` warns, at `d = 2048, p = 1`.
pub const BENCH_WARN_MS: f64 = 20.0;

#[derive(Debug, Parser)]
#[command(name = "dsp", version, about = "Discriminative subspace pooling of feature sequences")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct GlobalArgs {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default `dsp-out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for pooling and Gram computation (default: all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true)]
    pub p: Option<usize>,
    #[arg(long, global = true)]
    pub psi: Option<f64>,
    #[arg(long = "rho-frac", global = true)]
    pub rho_frac: Option<f64>,
    #[arg(long = "ordering-weight", global = true)]
    pub ordering_weight: Option<f64>,
    /// per-sequence | dataset-mean | global
    #[arg(long = "delta-policy", global = true)]
    pub delta_policy: Option<String>,
    /// Fixed projection-kernel β (skips the β grid).
    #[arg(long, global = true)]
    pub beta: Option<f64>,
    /// Fixed SVM regularization (skips the C grid).
    #[arg(long = "c-svm", global = true)]
    pub c_svm: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset.
    GenData,
    /// Train the softmax victim on training frames.
    TrainBase,
    /// Compute the universal perturbation against the victim.
    Uap,
    /// Pool every sequence into a subspace descriptor.
    Pool,
    /// Select and train the projection-kernel SVM on training descriptors.
    TrainSvm,
    /// Evaluate DSP and both baselines on the test split.
    Eval,
    /// Run the average (ap) or max (mp) pooling baseline.
    Baseline {
        /// ap | mp
        kind: String,
    },
    /// Run the numerical self-check suites.
    Gradcheck {
        /// Number of consecutive seeds starting at --seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Time pooling per frame.
    Bench {
        #[arg(long, default_value_t = 100)]
        frames: usize,
        #[arg(long, value_delimiter = ',', default_values_t = vec![128usize, 512, 2048])]
        dims: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 6])]
        ranks: Vec<usize>,
    },
}

impl Command {
    pub fn stage(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainBase => "train-base",
            Command::Uap => "uap",
            Command::Pool => "pool",
            Command::TrainSvm => "train-svm",
            Command::Eval => "eval",
            Command::Baseline { .. } => "baseline",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Bench { .. } => "bench",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub workers: Option<usize>,
    pub beta: Option<f64>,
    pub c_svm: Option<f64>,
    #[serde(flatten)]
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("dsp-out"),
            workers: None,
            beta: None,
            c_svm: None,
            experiment: ExperimentConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(DspError::MissingInput(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| DspError::param(format!("config {}: {e}", path.display())))
    }

    /// Loads the configuration (if any) and applies command-line overrides.
    pub fn resolve(args: &GlobalArgs) -> Result<Self> {
        let mut cfg = match &args.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = args.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &args.out {
            cfg.out = out.clone();
        }
        if args.workers.is_some() {
            cfg.workers = args.workers;
        }
        if let Some(p) = args.p {
            cfg.experiment.dsp.p = p;
        }
        if let Some(psi) = args.psi {
            cfg.experiment.uap.psi = psi;
        }
        if let Some(r) = args.rho_frac {
            cfg.experiment.uap.rho_frac = r;
        }
        if let Some(w) = args.ordering_weight {
            cfg.experiment.dsp.ordering_weight = w;
        }
        if let Some(policy) = &args.delta_policy {
            cfg.experiment.dsp.segment_policy = SegmentPolicy::parse(policy)?;
        }
        if args.beta.is_some() {
            cfg.beta = args.beta;
        }
        if args.c_svm.is_some() {
            cfg.c_svm = args.c_svm;
        }
        cfg.experiment = cfg.experiment.with_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.experiment.validate()?;
        for (name, v) in [("beta", self.beta), ("c_svm", self.c_svm)] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(DspError::param(format!("{name} must be positive and finite, got {v}")));
                }
            }
        }
        if self.workers == Some(0) {
            return Err(DspError::param("workers must be at least 1"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| DspError::param(format!("config serialization: {e}")))
    }

    /// First 16 hex digits of the SHA-256 of the TOML form.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().take(8).fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        }))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn manifest(&self) -> PathBuf {
        self.out.join("data").join("manifest.csv")
    }

    fn descriptor_path(&self, id: &str) -> PathBuf {
        self.out.join("descriptors").join(format!("{id}.dspw"))
    }

    fn c_grid(&self) -> Vec<f64> {
        self.c_svm.map_or_else(|| self.experiment.selection.c_grid.clone(), |c| vec![c])
    }
}

/// Key metrics reported by a stage, in output order.
pub type Metrics = Vec<(String, String)>;

fn metric(key: &str, value: impl ToString) -> (String, String) {
    (key.to_string(), value.to_string())
}

/// Outcome of a stage: its metrics and whether every check it ran passed.
#[derive(Debug, Clone)]
pub struct StageReport {
    pub metrics: Metrics,
    pub ok: bool,
}

impl StageReport {
    fn ok(metrics: Metrics) -> Self {
        StageReport { metrics, ok: true }
    }
}

/// Parses arguments and runs one stage; returns the process exit code.
pub fn main_with(cli: Cli) -> i32 {
    match run(&cli) {
        Ok(report) if report.ok => 0,
        Ok(_) => 4,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<StageReport> {
    let cfg = RunConfig::resolve(&cli.global)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.unwrap_or(0))
        .build()
        .map_err(|e| DspError::param(format!("worker pool: {e}")))?;
    let start = Instant::now();
    let report = pool.install(|| run_stage(&cli.command, &cfg))?;
    let wall = start.elapsed();
    std::fs::create_dir_all(&cfg.out)?;
    write_file(&cfg.path("config.toml"), cfg.to_toml()?.as_bytes())?;
    let mut line = format!(
        "stage={} config_hash={} seed={} wall_ms={:.3} ok={}",
        cli.command.stage(),
        cfg.hash()?,
        cfg.seed,
        wall.as_secs_f64() * 1e3,
        report.ok
    );
    for (k, v) in &report.metrics {
        let _ = write!(line, " {k}={v}");
    }
    println!("{line}");
    let mut log = OpenOptions::new().create(true).append(true).open(cfg.path("runs.txt"))?;
    writeln!(log, "{line}")?;
    Ok(report)
}

fn run_stage(command: &Command, cfg: &RunConfig) -> Result<StageReport> {
    match command {
        Command::GenData => gen_data(cfg),
        Command::TrainBase => train_base(cfg),
        Command::Uap => uap(cfg),
        Command::Pool => pool(cfg),
        Command::TrainSvm => train_svm(cfg),
        Command::Eval => eval(cfg),
        Command::Baseline { kind } => baseline(cfg, Baseline::parse(kind)?),
        Command::Gradcheck { seeds } => gradcheck(cfg, *seeds),
        Command::Bench { frames, dims, ranks } => bench(cfg, *frames, dims, ranks),
    }
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    read_dataset(&cfg.manifest())
}

fn gen_data(cfg: &RunConfig) -> Result<StageReport> {
    let ds = generate(&cfg.experiment.synth)?;
    write_dataset(&ds, &cfg.out.join("data"))?;
    Ok(StageReport::ok(vec![
        metric("sequences", ds.len()),
        metric("train", ds.indices(Split::Train).len()),
        metric("test", ds.indices(Split::Test).len()),
        metric("frames", ds.sequences.iter().map(|s| s.len()).sum::<usize>()),
    ]))
}

fn train_base(cfg: &RunConfig) -> Result<StageReport> {
    let ds = load_dataset(cfg)?;
    let (x, y) = frame_matrix(&ds, Split::Train)?;
    let report = train_softmax(&x, &y, &cfg.experiment.train)?;
    write_victim(&report.model, &cfg.path("victim.dspv"))?;
    Ok(StageReport::ok(vec![metric("train_accuracy", format!("{:.6}", report.accuracy))]))
}

fn uap(cfg: &RunConfig) -> Result<StageReport> {
    let ds = load_dataset(cfg)?;
    let model = read_victim(&cfg.path("victim.dspv"))?;
    let (x, _) = frame_matrix(&ds, Split::Train)?;
    let out = compute_uap(&model, &x, &cfg.experiment.uap)?;
    write_perturbation(&out.perturbation, &cfg.path("uap.dspe"))?;
    let mut w = csv::Writer::from_path(cfg.path("uap.csv"))?;
    w.write_record(["epoch", "fooling_rate", "cross_entropy", "norm"])?;
    for (k, e) in out.history.iter().enumerate() {
        w.write_record([(k + 1).to_string(), e.fooling_rate.to_string(), e.cross_entropy.to_string(), e.norm.to_string()])?;
    }
    w.flush()?;
    Ok(StageReport::ok(vec![
        metric("fooling_rate", format!("{:.6}", out.perturbation.achieved_fooling_rate)),
        metric("converged", out.converged),
        metric("epochs", out.history.len()),
        metric("norm", format!("{:.6}", out.perturbation.epsilon.norm())),
        metric("rho", format!("{:.6}", out.perturbation.rho)),
    ]))
}

fn pool(cfg: &RunConfig) -> Result<StageReport> {
    let ds = load_dataset(cfg)?;
    let exp = &cfg.experiment;
    let noise = match exp.noise {
        NoiseKind::Uap => NoiseSource::Uap(read_perturbation(&cfg.path("uap.dspe"))?),
        kind => noise_source(&ds, kind, None, exp.dropout_rate)?,
    };
    let pooled = pool_dataset(&ds, &noise, &exp.dsp)?;
    let mut w = csv::Writer::from_path(cfg.path("pool.csv"))?;
    w.write_record(["sequence_id", "frames", "delta", "iterations", "final_cost", "termination"])?;
    let mut iterations = 0usize;
    for (seq, out) in ds.sequences.iter().zip(&pooled) {
        write_descriptor(&out.descriptor.point, &cfg.descriptor_path(&seq.id))?;
        iterations += out.trace.len().saturating_sub(1);
        w.write_record([
            seq.id.clone(),
            seq.len().to_string(),
            out.delta.to_string(),
            out.trace.len().saturating_sub(1).to_string(),
            out.trace.final_cost().unwrap_or(f64::NAN).to_string(),
            format!("{:?}", out.termination),
        ])?;
    }
    w.flush()?;
    Ok(StageReport::ok(vec![
        metric("sequences", pooled.len()),
        metric("noise", noise.name()),
        metric("mean_iterations", format!("{:.2}", iterations as f64 / pooled.len().max(1) as f64)),
    ]))
}

fn load_descriptors(cfg: &RunConfig, ds: &Dataset, indices: &[usize]) -> Result<Vec<DMatrix<f64>>> {
    indices
        .iter()
        .map(|&i| read_descriptor(&cfg.descriptor_path(&ds.sequences[i].id)).map(|w| w.into_matrix()))
        .collect()
}

fn train_svm(cfg: &RunConfig) -> Result<StageReport> {
    let ds = load_dataset(cfg)?;
    let train = ds.indices(Split::Train);
    let items = load_descriptors(cfg, &ds, &train)?;
    let labels: Vec<usize> = train.iter().map(|&i| ds.sequences[i].label).collect();
    let p = items.first().map_or(cfg.experiment.dsp.p, |w| w.ncols());
    let kernels = match cfg.beta {
        Some(beta) => vec![KernelKind::Projection { beta }],
        None => projection_kernels(p, &cfg.experiment.selection.kernel_grid),
    };
    let selection = crate::kernel_svm::SelectionParams { c_grid: cfg.c_grid(), ..cfg.experiment.selection.clone() };
    let chosen = select_model(&items, &labels, &kernels, &selection)?;
    let smo = SmoParams { c: chosen.c, tol: selection.tol, ..SmoParams::default() };
    let svm = KernelSvm::fit(&items, &labels, chosen.kernel, &smo)?;
    write_model(&svm, &cfg.path("svm.dspm"))?;
    write_file(&cfg.path("gram_train.dspg"), &encode_gram(&kernel_gram(&items, chosen.kernel)?)?)?;
    let mut w = csv::Writer::from_path(cfg.path("selection.csv"))?;
    w.write_record(["kernel", "kernel_param", "c", "cv_accuracy"])?;
    let (kind, param) = kernel_fields(chosen.kernel);
    w.write_record([kind.to_string(), param.to_string(), chosen.c.to_string(), chosen.cv_accuracy.to_string()])?;
    w.flush()?;
    Ok(StageReport::ok(vec![
        metric("kernel_param", param),
        metric("c", chosen.c),
        metric("cv_accuracy", format!("{:.6}", chosen.cv_accuracy)),
    ]))
}

fn kernel_fields(kernel: KernelKind) -> (&'static str, f64) {
    match kernel {
        KernelKind::Projection { beta } => ("projection", beta),
        KernelKind::Rbf { gamma } => ("rbf", gamma),
    }
}

/// Writes `sequence_id,true_label,predicted_label,margin_0..margin_{K−1}`.
pub fn write_predictions(predictions: &[Prediction], path: &Path) -> Result<()> {
    let classes = predictions.first().map_or(0, |p| p.margins.len());
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["sequence_id".to_string(), "true_label".into(), "predicted_label".into()];
    header.extend((0..classes).map(|k| format!("margin_{k}")));
    w.write_record(&header)?;
    for p in predictions {
        let mut row = vec![p.sequence_id.clone(), p.true_label.to_string(), p.predicted_label.to_string()];
        row.extend(p.margins.iter().map(|m| m.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

const EVAL_HEADER: [&str; 6] = ["method", "kernel", "kernel_param", "c", "cv_accuracy", "test_accuracy"];

fn eval_row(name: &str, kernel: KernelKind, c: f64, cv: f64, test: f64) -> [String; 6] {
    let (kind, param) = kernel_fields(kernel);
    [name.to_string(), kind.to_string(), param.to_string(), c.to_string(), cv.to_string(), test.to_string()]
}

fn read_selection_cv(path: &Path) -> Result<f64> {
    if !path.exists() {
        return Err(DspError::MissingInput(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    let row = r.records().next().ok_or_else(|| DspError::param(format!("{} is empty", path.display())))??;
    row.get(3)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| DspError::param(format!("{}: malformed cv_accuracy", path.display())))
}

fn baseline_selection(cfg: &RunConfig) -> crate::kernel_svm::SelectionParams {
    crate::kernel_svm::SelectionParams { c_grid: cfg.c_grid(), ..cfg.experiment.selection.clone() }
}

fn eval(cfg: &RunConfig) -> Result<StageReport> {
    let ds = load_dataset(cfg)?;
    let svm = read_model(&cfg.path("svm.dspm"))?;
    let cv = read_selection_cv(&cfg.path("selection.csv"))?;
    let test = ds.indices(Split::Test);
    let items = load_descriptors(cfg, &ds, &test)?;
    let mut predictions = Vec::with_capacity(test.len());
    for (&i, item) in test.iter().zip(&items) {
        predictions.push(Prediction {
            sequence_id: ds.sequences[i].id.clone(),
            true_label: ds.sequences[i].label,
            predicted_label: svm.predict(item)?,
            margins: svm.decisions(item)?,
        });
    }
    let predicted: Vec<usize> = predictions.iter().map(|p| p.predicted_label).collect();
    let truth: Vec<usize> = predictions.iter().map(|p| p.true_label).collect();
    let dsp_acc = accuracy(&predicted, &truth);
    write_predictions(&predictions, &cfg.path("predictions_dsp.csv"))?;

    let selection = baseline_selection(cfg);
    let ap = run_baseline(&ds, Baseline::Ap, &selection)?;
    let mp = run_baseline(&ds, Baseline::Mp, &selection)?;
    write_predictions(&ap.predictions, &cfg.path("predictions_ap.csv"))?;
    write_predictions(&mp.predictions, &cfg.path("predictions_mp.csv"))?;

    let mut w = csv::Writer::from_path(cfg.path("eval.csv"))?;
    w.write_record(EVAL_HEADER)?;
    w.write_record(eval_row("dsp", svm.kernel, svm.model.params.c, cv, dsp_acc))?;
    for r in [&ap, &mp] {
        w.write_record(eval_row(&r.name, r.kernel, r.c, r.cv_accuracy, r.test_accuracy))?;
    }
    w.flush()?;
    Ok(StageReport::ok(vec![
        metric("dsp", format!("{dsp_acc:.6}")),
        metric("ap", format!("{:.6}", ap.test_accuracy)),
        metric("mp", format!("{:.6}", mp.test_accuracy)),
    ]))
}

fn write_method(result: &MethodResult, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(EVAL_HEADER)?;
    w.write_record(eval_row(&result.name, result.kernel, result.c, result.cv_accuracy, result.test_accuracy))?;
    w.flush()?;
    Ok(())
}

fn baseline(cfg: &RunConfig, kind: Baseline) -> Result<StageReport> {
    let ds = load_dataset(cfg)?;
    let result = run_baseline(&ds, kind, &baseline_selection(cfg))?;
    std::fs::create_dir_all(&cfg.out)?;
    write_predictions(&result.predictions, &cfg.path(&format!("predictions_{}.csv", kind.name())))?;
    write_method(&result, &cfg.path(&format!("baseline_{}.csv", kind.name())))?;
    Ok(StageReport::ok(vec![
        metric("method", kind.name()),
        metric("test_accuracy", format!("{:.6}", result.test_accuracy)),
        metric("cv_accuracy", format!("{:.6}", result.cv_accuracy)),
    ]))
}

/// Shapes cycled through by the manifold suite.
pub const MANIFOLD_SHAPES: [(usize, usize); 3] = [(8, 2), (64, 6), (256, 6)];

fn gradcheck(cfg: &RunConfig, seeds: u64) -> Result<StageReport> {
    std::fs::create_dir_all(&cfg.out)?;
    let mut w = csv::Writer::from_path(cfg.path("gradcheck.csv"))?;
    w.write_record(["seed", "suite", "passed", "worst", "detail"])?;
    let mut ok = true;
    let mut failed = Vec::new();
    for seed in cfg.seed..cfg.seed + seeds {
        let m = manifold_suite(1000, &MANIFOLD_SHAPES, seed)?;
        let g = gradient_suite(200, 1e-3, 1e-4, seed)?;
        let r = rayleigh_check(6, 2, 200, seed)?;
        let a = argmin_suite(20, 1e-2, seed)?;
        let k = kernel_suite(50, 32, 6, seed)?;
        let rows = [
            ("manifold", m.passed(), m.orthonormality.max(m.skew), format!("idempotency={:e}", m.idempotency)),
            ("gradient", g.passed(), g.worst, format!("failures={} rejected={}", g.failures, g.rejected)),
            ("rcg", r.passed(1e-4, 200), r.angle, format!("iterations={} monotone={}", r.iterations, r.monotone)),
            ("argmin", a.passed(), a.worst, format!("passed={} excluded={} not_converged={}", a.passed, a.excluded, a.not_converged)),
            ("kernel", k.passed(), k.self_error.max(k.rebase_error), format!("min_eig={:e} max_eig={:e}", k.min_eigen, k.max_eigen)),
        ];
        for (suite, passed, worst, detail) in rows {
            w.write_record([seed.to_string(), suite.to_string(), passed.to_string(), format!("{worst:e}"), detail])?;
            if !passed {
                ok = false;
                failed.push(format!("{suite}@{seed}"));
            }
        }
    }
    w.flush()?;
    let mut metrics = vec![metric("seeds", seeds)];
    if !failed.is_empty() {
        metrics.push(metric("failed", failed.join(",")));
    }
    Ok(StageReport { metrics, ok })
}

/// Pooling time per frame for one random `n × d` sequence at rank `p`.
pub fn bench_one(d: usize, p: usize, n: usize, seed: u64) -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mean_norm = frames.row_iter().map(|r| r.norm()).sum::<f64>() / n as f64;
    let mut eps: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let scale = 0.1 * mean_norm / eps.iter().map(|v| v * v).sum::<f64>().sqrt();
    eps.iter_mut().for_each(|v| *v *= scale);
    let bags = SequenceBags::from_perturbation(&frames, &eps)?;
    let params = DspParams { p, ..DspParams::default() };
    let delta = params.resolve_delta(&frames)?;
    let start = Instant::now();
    let out = pool_bags(&bags, delta, &params, "bench")?;
    let ms = start.elapsed().as_secs_f64() * 1e3 / n as f64;
    Ok((ms, out.trace.len().saturating_sub(1)))
}

fn bench(cfg: &RunConfig, frames: usize, dims: &[usize], ranks: &[usize]) -> Result<StageReport> {
    if frames < 2 {
        return Err(DspError::SequenceTooShort { n: frames });
    }
    std::fs::create_dir_all(&cfg.out)?;
    let mut w = csv::Writer::from_path(cfg.path("bench.csv"))?;
    w.write_record(["d", "p", "n", "iterations", "ms_per_frame"])?;
    let mut metrics = Vec::new();
    for &d in dims {
        for &p in ranks {
            if p > d {
                return Err(DspError::param(format!("rank {p} exceeds dimension {d}")));
            }
            let (ms, iters) = bench_one(d, p, frames, cfg.seed)?;
            w.write_record([d.to_string(), p.to_string(), frames.to_string(), iters.to_string(), format!("{ms:.4}")])?;
            metrics.push(metric(&format!("ms_d{d}_p{p}"), format!("{ms:.4}")));
            if d == 2048 && p == 1 && ms > BENCH_WARN_MS {
                eprintln!("warning: {ms:.2} ms/frame at d=2048, p=1 exceeds {BENCH_WARN_MS} ms/frame");
            }
        }
    }
    w.flush()?;
    Ok(StageReport::ok(metrics))
}
