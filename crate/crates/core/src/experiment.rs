//! Replicated experiments: dataset loading, per-replicate seeding, method
//! execution and the result tables written by the command-line tool.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{dpsgd, fit_nonprivate, SgdConfig};
use crate::data::{
    gen_synthetic, ingest_csv, split_train_test, vsplit, Dataset, DatasetMetadata, DatasetSpec,
    IngestOptions, SplitScheme,
};
use crate::dp::{Epsilon, NoiseKeying};
use crate::error::{input, Error, Result};
use crate::mpc::Backend;
use crate::objective::TaskKind;
use crate::protocol::{
    check_economy, plan_budget, run_protocol, BudgetSpec, ProtocolConfig, ProtocolTranscript,
    Scheduler, TranscriptDetail,
};
use crate::solver::{accuracy, mse, Model};

pub const CSV_HEADER: [&str; 8] = ["dataset", "method", "epsilon", "K", "metric", "mean", "std", "seconds"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Fm,
    Dpsgd,
    Nonprivate,
}

impl Method {
    pub fn is_private(self) -> bool {
        self != Method::Nonprivate
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Fm => "fm",
            Method::Dpsgd => "dpsgd",
            Method::Nonprivate => "nonprivate",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fm" => Ok(Method::Fm),
            "dpsgd" => Ok(Method::Dpsgd),
            "nonprivate" | "non-private" => Ok(Method::Nonprivate),
            other => input(format!("unknown method '{other}' (expected fm, dpsgd or nonprivate)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Mse,
    Accuracy,
}

impl Metric {
    pub fn for_task(task: TaskKind) -> Self {
        match task {
            TaskKind::Linear => Metric::Mse,
            TaskKind::Logistic => Metric::Accuracy,
        }
    }

    pub fn evaluate(self, model: &Model, test: &Dataset) -> Result<f64> {
        match self {
            Metric::Mse => mse(model, test.records()),
            Metric::Accuracy => accuracy(model, test.records()),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Mse => "mse",
            Metric::Accuracy => "accuracy",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic(DatasetSpec),
    Csv {
        path: PathBuf,
        label: String,
        normalize: bool,
    },
}

impl DataSource {
    pub fn id(&self) -> String {
        match self {
            DataSource::Synthetic(s) => format!("synthetic-n{}-d{}-s{}", s.n, s.d, s.sparsity),
            DataSource::Csv { path, .. } => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string()),
        }
    }

    pub fn load(&self, task: TaskKind) -> Result<(Dataset, DatasetMetadata)> {
        match self {
            DataSource::Synthetic(spec) => {
                let (ds, truth) = gen_synthetic(spec, task)?;
                let mut meta = DatasetMetadata::for_dataset(&ds, "label");
                meta.true_weights = Some(truth);
                Ok((ds, meta))
            }
            DataSource::Csv { path, label, normalize } => {
                let mut opts = IngestOptions::new(label.clone(), task);
                opts.normalize = *normalize;
                ingest_csv(path, &opts)
            }
        }
    }
}

/// Budget mode of the functional mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetMode {
    /// Each listed epsilon is the global level.
    TopDown,
    /// Every party spends `single` on its own coefficients and every pair
    /// spends `cross` on shared ones; the composed level replaces the list.
    BottomUp { single: f64, cross: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub source: DataSource,
    /// Overrides the identifier derived from the source.
    pub dataset_id: Option<String>,
    pub parties: usize,
    pub scheme: SplitScheme,
    pub epsilons: Vec<Epsilon>,
    pub mode: BudgetMode,
    pub backend: Backend,
    pub keying: NoiseKeying,
    pub methods: Vec<Method>,
    pub replicates: usize,
    pub seed: u64,
    /// Solver eigenvalue floor; `None` uses the default for the train size.
    pub ridge: Option<f64>,
    pub sgd_iterations: usize,
    pub sgd_learning_rate: Option<f64>,
    pub sgd_clip: f64,
    pub train_ratio: f64,
    pub scheduler: Scheduler,
    /// Worker threads for replicates; `None` uses the available cores.
    pub threads: Option<usize>,
    /// Keep a digest transcript of the first FM run.
    pub capture_transcript: bool,
}

impl ExperimentConfig {
    pub fn new(task: TaskKind, source: DataSource) -> Self {
        ExperimentConfig {
            task,
            source,
            dataset_id: None,
            parties: 2,
            scheme: SplitScheme::Even,
            epsilons: vec![Epsilon::Finite(1.0)],
            mode: BudgetMode::TopDown,
            backend: Backend::SecretSharing,
            keying: NoiseKeying::Coefficient,
            methods: vec![Method::Fm, Method::Dpsgd, Method::Nonprivate],
            replicates: 10,
            seed: 0,
            ridge: None,
            sgd_iterations: 100,
            sgd_learning_rate: None,
            sgd_clip: 1.0,
            train_ratio: 0.8,
            scheduler: Scheduler::Deterministic,
            threads: None,
            capture_transcript: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return input("replicates must be at least 1");
        }
        if self.methods.is_empty() {
            return input("no methods selected");
        }
        if self.epsilons.is_empty() && self.mode == BudgetMode::TopDown {
            return input("no epsilon values given");
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return input(format!("train ratio {} must lie in (0, 1)", self.train_ratio));
        }
        if self.parties == 0 {
            return input("K must be at least 1");
        }
        if let BudgetMode::BottomUp { single, cross } = self.mode {
            if !(single >= 0.0 && cross >= 0.0 && single.is_finite() && cross.is_finite()) {
                return input("bottom-up sub-budgets must be finite and non-negative");
            }
        }
        if self.threads == Some(0) {
            return input("threads must be at least 1");
        }
        self.sgd(Epsilon::NoiseOff).validate()
    }

    pub fn dataset_id(&self) -> String {
        self.dataset_id.clone().unwrap_or_else(|| self.source.id())
    }

    fn sgd(&self, epsilon: Epsilon) -> SgdConfig {
        SgdConfig {
            iterations: self.sgd_iterations,
            learning_rate: self.sgd_learning_rate,
            clip: self.sgd_clip,
            epsilon,
        }
    }

    fn budget(&self, epsilon: Epsilon, partition: &crate::VerticalPartition) -> BudgetSpec {
        match self.mode {
            BudgetMode::TopDown => BudgetSpec::TopDown(epsilon),
            BudgetMode::BottomUp { single, cross } => BudgetSpec::bottom_up_uniform(partition, single, cross),
        }
    }
}

/// Seed of replicate `r`: the first eight bytes of SHA-256 over both values.
pub fn replicate_seed(master: u64, r: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update((r as u64).to_le_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("digest is 32 bytes"))
}

/// One method evaluated in one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub method: Method,
    pub epsilon: Epsilon,
    pub replicate: usize,
    pub value: f64,
    pub seconds: f64,
}

/// Aggregate over replicates of one (method, epsilon, K).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub method: Method,
    pub epsilon: Epsilon,
    #[serde(rename = "K")]
    pub k: usize,
    pub metric: Metric,
    pub mean: f64,
    /// Sample standard deviation; zero for a single replicate.
    pub std: f64,
    pub median: f64,
    /// Mean wall time per replicate.
    pub seconds: f64,
    /// Metric per replicate, in replicate order.
    pub values: Vec<f64>,
}

impl ResultRow {
    fn from_observations(dataset: &str, k: usize, metric: Metric, obs: &[&Observation]) -> Self {
        let values: Vec<f64> = obs.iter().map(|o| o.value).collect();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        ResultRow {
            dataset: dataset.to_string(),
            method: obs[0].method,
            epsilon: obs[0].epsilon,
            k,
            metric,
            mean,
            std,
            median: median(&values),
            seconds: obs.iter().map(|o| o.seconds).sum::<f64>() / n,
            values,
        }
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    match v.len() {
        0 => f64::NAN,
        len if len % 2 == 1 => v[m],
        _ => 0.5 * (v[m - 1] + v[m]),
    }
}

fn epsilon_key(e: Epsilon) -> f64 {
    e.value().unwrap_or(f64::INFINITY)
}

/// DPSGD settings as resolved for the training set size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedSgd {
    pub iterations: usize,
    pub learning_rate: f64,
    pub clip: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub config: ExperimentConfig,
    pub dataset_id: String,
    pub dataset: DatasetMetadata,
    pub train_size: usize,
    pub test_size: usize,
    pub epsilons: Vec<Epsilon>,
    pub dpsgd: ResolvedSgd,
    pub replicate_seeds: Vec<u64>,
    pub rows: Vec<ResultRow>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub rows: Vec<ResultRow>,
    pub metadata: RunMetadata,
    pub transcript: Option<ProtocolTranscript>,
}

/// Runs every method for every epsilon over all replicates. Rows come back
/// ordered by method, then epsilon, whatever order the replicates finish in.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let (ds, ds_meta) = cfg.source.load(cfg.task)?;
    run_on_dataset(cfg, &ds, ds_meta)
}

pub fn run_on_dataset(cfg: &ExperimentConfig, ds: &Dataset, ds_meta: DatasetMetadata) -> Result<ExperimentOutput> {
    cfg.validate()?;
    if ds.task() != cfg.task {
        return input("dataset task does not match the configuration");
    }
    let partition = vsplit(ds.dim(), cfg.parties, &cfg.scheme)?;
    let mut epsilons = match cfg.mode {
        BudgetMode::TopDown => cfg.epsilons.clone(),
        BudgetMode::BottomUp { .. } => {
            let b = plan_budget(cfg.task, &partition, &cfg.budget(Epsilon::NoiseOff, &partition))?;
            vec![Epsilon::finite(b.epsilon)?]
        }
    };
    epsilons.sort_by(|a, b| epsilon_key(*a).total_cmp(&epsilon_key(*b)));
    epsilons.dedup();

    let mut methods = cfg.methods.clone();
    methods.sort();
    methods.dedup();

    let seeds: Vec<u64> = (0..cfg.replicates).map(|r| replicate_seed(cfg.seed, r)).collect();
    let metric = Metric::for_task(cfg.task);
    let workers = cfg
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .min(cfg.replicates);

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<ReplicateOut>>>> = Mutex::new((0..cfg.replicates).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let r = next.fetch_add(1, Ordering::SeqCst);
                if r >= cfg.replicates {
                    break;
                }
                let out = run_replicate(cfg, ds, &partition, &methods, &epsilons, metric, r, seeds[r]);
                results.lock().expect("results lock")[r] = Some(out);
            });
        }
    });

    let mut observations = Vec::new();
    let mut transcript = None;
    for (r, res) in results.into_inner().expect("results lock").into_iter().enumerate() {
        let out = res.ok_or_else(|| Error::Protocol(format!("replicate {r} did not run")))??;
        observations.extend(out.observations);
        if r == 0 {
            transcript = out.transcript;
        }
    }

    let dataset_id = cfg.dataset_id();
    let mut rows = Vec::new();
    for &m in &methods {
        let eps_list: Vec<Epsilon> = if m.is_private() { epsilons.clone() } else { vec![Epsilon::NoiseOff] };
        for e in eps_list {
            let obs: Vec<&Observation> = observations
                .iter()
                .filter(|o| o.method == m && o.epsilon == e)
                .collect();
            rows.push(ResultRow::from_observations(&dataset_id, cfg.parties, metric, &obs));
        }
    }

    let train_size = (ds.len() as f64 * cfg.train_ratio).round() as usize;
    let metadata = RunMetadata {
        config: cfg.clone(),
        dataset_id,
        dataset: ds_meta,
        train_size,
        test_size: ds.len() - train_size,
        epsilons,
        dpsgd: ResolvedSgd {
            iterations: cfg.sgd_iterations,
            learning_rate: cfg.sgd(Epsilon::NoiseOff).step_size(train_size),
            clip: cfg.sgd_clip,
        },
        replicate_seeds: seeds,
        rows: rows.clone(),
    };
    Ok(ExperimentOutput { rows, metadata, transcript })
}

struct ReplicateOut {
    observations: Vec<Observation>,
    transcript: Option<ProtocolTranscript>,
}

#[allow(clippy::too_many_arguments)]
fn run_replicate(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    partition: &crate::VerticalPartition,
    methods: &[Method],
    epsilons: &[Epsilon],
    metric: Metric,
    r: usize,
    seed: u64,
) -> Result<ReplicateOut> {
    let wrap = |m: Method| {
        move |e: Error| Error::Replicate {
            method: m.to_string(),
            replicate: r,
            source: Box::new(e),
        }
    };
    let (train, test) = split_train_test(ds, cfg.train_ratio, seed)?;
    let mut observations = Vec::new();
    let mut transcript = None;
    for &m in methods {
        let eps_list: Vec<Epsilon> = if m.is_private() { epsilons.to_vec() } else { vec![Epsilon::NoiseOff] };
        for e in eps_list {
            let start = Instant::now();
            let model = match m {
                Method::Fm => {
                    let keep = cfg.capture_transcript && r == 0 && transcript.is_none();
                    let pcfg = ProtocolConfig {
                        budget: cfg.budget(e, partition),
                        seed,
                        backend: cfg.backend,
                        keying: cfg.keying,
                        ridge: cfg.ridge,
                        scheduler: cfg.scheduler,
                        detail: if keep { TranscriptDetail::Digest } else { TranscriptDetail::EventsOnly },
                        fault: None,
                        timeout: std::time::Duration::from_secs(600),
                    };
                    let out = run_protocol(&train, partition, &pcfg).map_err(wrap(m))?;
                    let econ = check_economy(&out.transcript, partition);
                    if !econ.ok() {
                        return Err(wrap(m)(Error::Protocol(format!("economy check failed: {econ:?}"))));
                    }
                    if keep {
                        transcript = Some(out.transcript);
                    }
                    out.model
                }
                Method::Dpsgd => dpsgd(&train, &cfg.sgd(e), seed).map_err(wrap(m))?.model,
                Method::Nonprivate => fit_nonprivate(&train).map_err(wrap(m))?,
            };
            let value = metric.evaluate(&model, &test).map_err(wrap(m))?;
            let seconds = start.elapsed().as_secs_f64();
            info!("replicate {r}: {m} eps={e} {metric}={value:.6} ({seconds:.3}s)");
            observations.push(Observation {
                method: m,
                epsilon: e,
                replicate: r,
                value,
                seconds,
            });
        }
    }
    Ok(ReplicateOut { observations, transcript })
}

/// Axes of a sweep; each combination is one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub base: ExperimentConfig,
    pub parties: Vec<usize>,
    /// Sparsity levels of a synthetic source; empty keeps the base level.
    pub sparsities: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub rows: Vec<ResultRow>,
    pub runs: Vec<RunMetadata>,
}

pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepOutput> {
    let sources: Vec<DataSource> = if cfg.sparsities.is_empty() {
        vec![cfg.base.source.clone()]
    } else {
        let DataSource::Synthetic(spec) = &cfg.base.source else {
            return input("a sparsity sweep needs a synthetic source");
        };
        cfg.sparsities
            .iter()
            .map(|&s| DataSource::Synthetic(DatasetSpec { sparsity: s, ..spec.clone() }))
            .collect()
    };
    let parties = if cfg.parties.is_empty() { vec![cfg.base.parties] } else { cfg.parties.clone() };
    let mut out = SweepOutput { rows: Vec::new(), runs: Vec::new() };
    for source in sources {
        let (ds, meta) = source.load(cfg.base.task)?;
        for &k in &parties {
            let run_cfg = ExperimentConfig {
                source: source.clone(),
                parties: k,
                dataset_id: cfg.base.dataset_id.clone().or_else(|| Some(source.id())),
                ..cfg.base.clone()
            };
            let res = run_on_dataset(&run_cfg, &ds, meta.clone())?;
            out.rows.extend(res.rows);
            out.runs.push(res.metadata);
        }
    }
    Ok(out)
}

/// Writes the result table with the fixed header.
pub fn write_rows<W: Write>(w: W, rows: &[ResultRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_HEADER)?;
    for r in rows {
        out.write_record([
            r.dataset.clone(),
            r.method.to_string(),
            r.epsilon.to_string(),
            r.k.to_string(),
            r.metric.to_string(),
            r.mean.to_string(),
            r.std.to_string(),
            format!("{:.6}", r.seconds),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(f, value)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(task: TaskKind) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(task, DataSource::Synthetic(DatasetSpec::new(400, 4, 1.0, 3)));
        c.replicates = 3;
        c.seed = 11;
        c
    }

    #[test]
    fn replicate_seeds_differ_and_repeat() {
        assert_eq!(replicate_seed(5, 2), replicate_seed(5, 2));
        assert_ne!(replicate_seed(5, 2), replicate_seed(5, 3));
        assert_ne!(replicate_seed(5, 2), replicate_seed(6, 2));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn rows_are_ordered_and_complete() {
        let mut c = small(TaskKind::Linear);
        c.epsilons = vec![Epsilon::Finite(10.0), Epsilon::Finite(0.1)];
        let out = run_experiment(&c).unwrap();
        let keys: Vec<(Method, String)> = out.rows.iter().map(|r| (r.method, r.epsilon.to_string())).collect();
        assert_eq!(
            keys,
            vec![
                (Method::Fm, "0.1".into()),
                (Method::Fm, "10".into()),
                (Method::Dpsgd, "0.1".into()),
                (Method::Dpsgd, "10".into()),
                (Method::Nonprivate, "inf".into()),
            ]
        );
        assert!(out.rows.iter().all(|r| r.std >= 0.0 && r.values.len() == 3));
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let mut a = small(TaskKind::Logistic);
        a.threads = Some(1);
        let mut b = a.clone();
        b.threads = Some(3);
        let ra = run_experiment(&a).unwrap();
        let rb = run_experiment(&b).unwrap();
        for (x, y) in ra.rows.iter().zip(&rb.rows) {
            assert_eq!(x.values, y.values);
        }
    }

    #[test]
    fn bottom_up_reports_composed_epsilon() {
        let mut c = small(TaskKind::Linear);
        c.mode = BudgetMode::BottomUp { single: 0.5, cross: 0.5 };
        c.methods = vec![Method::Fm];
        let out = run_experiment(&c).unwrap();
        assert_eq!(out.rows.len(), 1);
        assert!(out.rows[0].epsilon.value().unwrap() > 0.0);
    }

    #[test]
    fn csv_header_is_fixed() {
        let mut buf = Vec::new();
        write_rows(&mut buf, &[]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "dataset,method,epsilon,K,metric,mean,std,seconds\n");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = small(TaskKind::Linear);
        c.replicates = 0;
        assert_eq!(run_experiment(&c).unwrap_err().exit_code(), 1);
        let mut c = small(TaskKind::Linear);
        c.parties = 9;
        assert_eq!(run_experiment(&c).unwrap_err().exit_code(), 1);
    }
}
