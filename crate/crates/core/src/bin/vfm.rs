use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::warn;

use vfm_core::audit::{audit_server_view, sensitivity_audit, Scope, SensitivityAuditConfig};
use vfm_core::data::{gen_synthetic, vsplit, DatasetMetadata, DatasetSpec, SplitScheme};
use vfm_core::dp::{Epsilon, NoiseKeying};
use vfm_core::experiment::{
    run_experiment, run_sweep, write_json, write_rows, BudgetMode, DataSource, ExperimentConfig,
    Method, ResultRow, SweepConfig,
};
use vfm_core::mpc::Backend;
use vfm_core::objective::Coeff;
use vfm_core::protocol::{run_protocol, Fault, ProtocolConfig, Scheduler};
use vfm_core::{Error, Result, TaskKind};

const SUBCOMMANDS: [&str; 4] = ["gen", "run", "audit", "sweep"];

/// Differentially private regression over vertically partitioned data.
#[derive(Parser, Debug)]
#[command(name = "vfm", version, args_override_self = true)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    /// Flat key=value file; keys are flag names, command-line flags win.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write a synthetic dataset and its metadata sidecar.
    Gen(GenArgs),
    /// Replicated comparison of the selected methods.
    Run(RunArgs),
    /// Neighboring-dataset sensitivity checks and a server-view audit.
    Audit(AuditArgs),
    /// Cross product of epsilon, K and sparsity axes.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct GenArgs {
    #[arg(long, default_value = "linear")]
    task: TaskKind,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    d: usize,
    /// Fraction of nonzero features per record.
    #[arg(long, default_value_t = 1.0)]
    s: f64,
    #[arg(long, env = "VFM_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    label_noise: f64,
    /// Output CSV; metadata goes to `<out>.meta.json`.
    #[arg(long, default_value = "synthetic.csv")]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
#[command(args_override_self = true)]
struct RunArgs {
    #[arg(long, default_value = "linear")]
    task: TaskKind,
    /// CSV input; without it a synthetic dataset is generated.
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
    #[arg(long, default_value = "label")]
    label: String,
    /// Treat CSV values as already inside [-1, 1].
    #[arg(long)]
    no_normalize: bool,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    d: usize,
    #[arg(long, default_value_t = 1.0)]
    s: f64,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    #[arg(long, default_value_t = 0.1)]
    label_noise: f64,
    #[arg(long)]
    dataset_id: Option<String>,
    /// Number of parties.
    #[arg(long = "K", visible_alias = "k", default_value_t = 2)]
    parties: usize,
    /// `even`, or 0-based feature lists such as `0,1;2,3` (party 1 first).
    #[arg(long, default_value = "even")]
    scheme: String,
    /// Comma-separated list; `inf` turns noise off.
    #[arg(long, default_value = "1")]
    epsilon: String,
    /// `top-down` or `bottom-up`.
    #[arg(long, default_value = "top-down")]
    mode: String,
    /// Bottom-up budget of each party's own coefficients.
    #[arg(long, default_value_t = 0.5)]
    eps_single: f64,
    /// Bottom-up budget of each party pair's shared coefficients.
    #[arg(long, default_value_t = 0.5)]
    eps_cross: f64,
    /// `ss` or `plaintext`.
    #[arg(long, default_value = "ss")]
    backend: Backend,
    /// `coefficient` or `party`.
    #[arg(long, default_value = "coefficient")]
    keying: String,
    #[arg(long, default_value = "fm,dpsgd,nonprivate")]
    methods: String,
    #[arg(long, default_value_t = 10)]
    replicates: usize,
    #[arg(long, env = "VFM_SEED", default_value_t = 0)]
    seed: u64,
    /// Solver eigenvalue floor; defaults to 1e-4 times the training size.
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long, default_value_t = 100)]
    dpsgd_iterations: usize,
    /// Defaults to 0.1 / n.
    #[arg(long)]
    dpsgd_lr: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    dpsgd_clip: f64,
    #[arg(long, default_value_t = 0.8)]
    train_ratio: f64,
    /// `deterministic` or `threaded`.
    #[arg(long, default_value = "deterministic")]
    scheduler: String,
    #[arg(long)]
    threads: Option<usize>,
    /// Result CSV; stdout when absent.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Metadata sidecar; defaults to `<out>.meta.json`.
    #[arg(long, value_name = "PATH")]
    meta: Option<PathBuf>,
    /// Line-delimited transcript of the first FM run.
    #[arg(long, value_name = "PATH")]
    transcript: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated party counts.
    #[arg(long = "Ks", visible_alias = "ks")]
    parties_list: Option<String>,
    /// Comma-separated sparsity levels (synthetic data only).
    #[arg(long)]
    sparsities: Option<String>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct AuditArgs {
    #[arg(long, default_value = "linear")]
    task: TaskKind,
    #[arg(long, default_value_t = 4)]
    d: usize,
    /// Neighboring dataset pairs.
    #[arg(long, default_value_t = 1000)]
    pairs: usize,
    /// Records per neighboring dataset.
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long = "K", visible_alias = "k", default_value_t = 2)]
    parties: usize,
    #[arg(long, env = "VFM_SEED", default_value_t = 0)]
    seed: u64,
    /// Put a record with |x| = 2 into this pair.
    #[arg(long)]
    inject_out_of_range: Option<usize>,
    #[arg(long, default_value = "ss")]
    backend: Backend,
    #[arg(long, default_value_t = 1.0)]
    epsilon: f64,
    /// Records of the protocol run whose server view is audited.
    #[arg(long, default_value_t = 200)]
    server_n: usize,
    /// Fault injection: forward this canonical coefficient without noise.
    #[arg(long)]
    skip_noise: Option<usize>,
    /// JSON report.
    #[arg(long, value_name = "PATH")]
    report: Option<PathBuf>,
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let argv = match with_config_file(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let res = match cli.cmd {
        Cmd::Gen(a) => cmd_gen(&a),
        Cmd::Run(a) => cmd_run(&a),
        Cmd::Audit(a) => cmd_audit(&a),
        Cmd::Sweep(a) => cmd_sweep(&a),
    };
    match res {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Splices `key=value` lines of the `--config` file in right after the
/// subcommand so that explicit flags, which come later, override them.
fn with_config_file(argv: Vec<String>) -> Result<Vec<String>> {
    let mut path = None;
    for (i, a) in argv.iter().enumerate() {
        if a == "--config" {
            path = argv.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else { return Ok(argv) };
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Input(format!("config file {path}: {e}")))?;
    let mut extra = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Input(format!("config file {path}, line {}: expected key=value", lineno + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k == "config" {
            continue;
        }
        match v {
            "true" => extra.push(format!("--{k}")),
            "false" => {}
            _ => extra.push(format!("--{k}={v}")),
        }
    }
    let Some(pos) = argv.iter().position(|a| SUBCOMMANDS.contains(&a.as_str())) else {
        return Ok(argv);
    };
    let mut out = argv[..=pos].to_vec();
    out.extend(extra);
    out.extend_from_slice(&argv[pos + 1..]);
    Ok(out)
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn cmd_gen(a: &GenArgs) -> Result<u8> {
    let spec = DatasetSpec {
        label_noise: a.label_noise,
        ..DatasetSpec::new(a.n, a.d, a.s, a.seed)
    };
    let (ds, truth) = gen_synthetic(&spec, a.task)?;
    let f = File::create(&a.out).map_err(|e| Error::Input(format!("cannot write {}: {e}", a.out.display())))?;
    ds.write_csv(BufWriter::new(f), "label")?;
    let mut meta = DatasetMetadata::for_dataset(&ds, "label");
    meta.true_weights = Some(truth);
    meta.write_json(&sidecar(&a.out))?;
    eprintln!("wrote {} records with {} features to {}", ds.len(), ds.dim(), a.out.display());
    Ok(0)
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<T>().map_err(|e| Error::Input(format!("bad {what} '{t}': {e}"))))
        .collect()
}

fn parse_scheme(s: &str) -> Result<SplitScheme> {
    if s.trim() == "even" {
        return Ok(SplitScheme::Even);
    }
    let parts = s
        .split(';')
        .map(|p| parse_list::<usize>(p, "feature index"))
        .collect::<Result<Vec<_>>>()?;
    Ok(SplitScheme::Explicit(parts))
}

fn experiment_config(a: &RunArgs) -> Result<ExperimentConfig> {
    let source = match &a.data {
        Some(path) => DataSource::Csv {
            path: path.clone(),
            label: a.label.clone(),
            normalize: !a.no_normalize,
        },
        None => DataSource::Synthetic(DatasetSpec {
            label_noise: a.label_noise,
            ..DatasetSpec::new(a.n, a.d, a.s, a.data_seed)
        }),
    };
    let mut cfg = ExperimentConfig::new(a.task, source);
    cfg.dataset_id = a.dataset_id.clone();
    cfg.parties = a.parties;
    cfg.scheme = parse_scheme(&a.scheme)?;
    cfg.epsilons = parse_list::<Epsilon>(&a.epsilon, "epsilon")?;
    cfg.mode = match a.mode.as_str() {
        "top-down" => BudgetMode::TopDown,
        "bottom-up" => BudgetMode::BottomUp {
            single: a.eps_single,
            cross: a.eps_cross,
        },
        other => return Err(Error::Input(format!("unknown mode '{other}'"))),
    };
    cfg.backend = a.backend;
    cfg.keying = match a.keying.as_str() {
        "coefficient" => NoiseKeying::Coefficient,
        "party" => NoiseKeying::Party,
        other => return Err(Error::Input(format!("unknown keying '{other}'"))),
    };
    cfg.methods = parse_list::<Method>(&a.methods, "method")?;
    cfg.replicates = a.replicates;
    cfg.seed = a.seed;
    cfg.ridge = a.rho;
    cfg.sgd_iterations = a.dpsgd_iterations;
    cfg.sgd_learning_rate = a.dpsgd_lr;
    cfg.sgd_clip = a.dpsgd_clip;
    cfg.train_ratio = a.train_ratio;
    cfg.scheduler = match a.scheduler.as_str() {
        "deterministic" => Scheduler::Deterministic,
        "threaded" => Scheduler::Threaded,
        other => return Err(Error::Input(format!("unknown scheduler '{other}'"))),
    };
    cfg.threads = a.threads;
    cfg.capture_transcript = a.transcript.is_some();
    cfg.validate()?;
    Ok(cfg)
}

fn emit_rows(a: &RunArgs, rows: &[ResultRow]) -> Result<()> {
    match &a.out {
        Some(p) => write_rows(BufWriter::new(File::create(p)?), rows),
        None => write_rows(io::stdout().lock(), rows),
    }
}

fn meta_path(a: &RunArgs) -> Option<PathBuf> {
    a.meta.clone().or_else(|| a.out.as_deref().map(sidecar))
}

fn cmd_run(a: &RunArgs) -> Result<u8> {
    let cfg = experiment_config(a)?;
    let out = run_experiment(&cfg)?;
    emit_rows(a, &out.rows)?;
    if let Some(p) = meta_path(a) {
        write_json(&p, &out.metadata)?;
    }
    if let Some(p) = &a.transcript {
        match &out.transcript {
            Some(t) => t.write_jsonl(BufWriter::new(File::create(p)?))?,
            None => warn!("no FM run, so no transcript was written"),
        }
    }
    Ok(0)
}

fn cmd_sweep(a: &SweepArgs) -> Result<u8> {
    let base = experiment_config(&a.run)?;
    let cfg = SweepConfig {
        base,
        parties: a.parties_list.as_deref().map(|s| parse_list(s, "K")).transpose()?.unwrap_or_default(),
        sparsities: a.sparsities.as_deref().map(|s| parse_list(s, "sparsity")).transpose()?.unwrap_or_default(),
    };
    let out = run_sweep(&cfg)?;
    emit_rows(&a.run, &out.rows)?;
    if let Some(p) = meta_path(&a.run) {
        write_json(&p, &out.runs)?;
    }
    Ok(0)
}

fn cmd_audit(a: &AuditArgs) -> Result<u8> {
    let mut scfg = SensitivityAuditConfig::new(a.task, a.d, a.pairs, a.seed);
    scfg.n = a.n;
    scfg.parties = a.parties;
    scfg.inject_out_of_range = a.inject_out_of_range;
    let sens = sensitivity_audit(&scfg)?;
    println!(
        "sensitivity: {} checks, {} violations (global bound {}, max ratio {:.4})",
        sens.checks,
        sens.violations.len(),
        sens.global_bound,
        sens.max_global_ratio
    );
    for (p, b) in &sens.party_bounds {
        let ratio = sens.max_party_ratio.get(p).copied().unwrap_or(0.0);
        println!("  {p}: bound {b}, max ratio {ratio:.4}");
    }
    for v in &sens.violations {
        let scope = match v.scope {
            Scope::Global => "global".to_string(),
            Scope::Party(p) => p.to_string(),
        };
        println!(
            "  violation: pair {} scope {scope} distance {} > bound {} ({:?})",
            v.pair, v.distance, v.bound, v.attribution
        );
    }

    let spec = DatasetSpec::new(a.server_n, a.d, 1.0, a.seed);
    let (ds, _) = gen_synthetic(&spec, a.task)?;
    let partition = vsplit(a.d, a.parties, &SplitScheme::Even)?;
    let mut pcfg = ProtocolConfig::new(Epsilon::finite(a.epsilon)?, a.seed, a.backend);
    if let Some(idx) = a.skip_noise {
        let c = Coeff::from_canonical_index(idx, a.d)
            .ok_or_else(|| Error::Input(format!("coefficient index {idx} out of range")))?;
        pcfg.fault = Some(Fault::SkipNoise(c));
    }
    let run = run_protocol(&ds, &partition, &pcfg)?;
    let view = audit_server_view(&run.transcript, &ds)?;
    let leaks = view.leaks().count();
    println!(
        "server view: {} messages, {} values, {} findings ({} outside audit-tagged messages)",
        view.messages_inspected,
        view.values_inspected,
        view.findings.len(),
        leaks
    );
    for f in view.leaks() {
        println!("  finding: seq {} from {} [{}]: {:?}", f.seq, f.sender, f.tag, f.kind);
    }

    if let Some(p) = &a.report {
        let report = serde_json::json!({ "sensitivity": sens, "server_view": view });
        write_json(p, &report)?;
    }
    let passed = sens.violations.is_empty() && leaks == 0;
    println!("audit: {}", if passed { "PASS" } else { "FAIL" });
    io::stdout().flush()?;
    Ok(if passed { 0 } else { 2 })
}
