//! `odit`: train, run, simulate, evaluate and benchmark the kNN sequential detectors.
//!
//! Exit status: 0 on success without alarm, 2 when `detect` raises an alarm,
//! 1 on any error (including usage errors).

mod manifest;
mod model_file;

use std::error::Error;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use odit_core::data::{save_csv, CsvStream};
use odit_core::detectors::{EventLogWriter, OditUni, UniStop};
use odit_core::eval::{
    effective_delay, sampling_regime, timing_benchmark, write_experiment_outputs, Experiment,
    SamplingRegime,
};
use odit_core::localization::localize_samples;
use odit_core::scenarios::save_stream;
use odit_core::{
    Backend, DetectorConfig, DetectorState, EvidenceSource, LocalizationConfig, Scenario,
};

use manifest::{manifest_path_for, RunManifest};
use model_file::{ModelFile, TrainRequest};

type BoxResult<T> = Result<T, Box<dyn Error>>;

#[derive(Debug, Parser)]
#[command(
    name = "odit",
    version,
    about = "Sequential kNN anomaly detection on multivariate streams"
)]
struct Cli {
    /// Master seed; every random choice is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for trial-level parallelism (eval only).
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    /// JSON input of the command: detector config (train), scenario (simulate) or experiment (eval).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model on nominal data (and optionally a known-anomaly set).
    Train(TrainArgs),
    /// Stream a CSV through a trained model.
    Detect(DetectArgs),
    /// Generate a stream with a known change point.
    Simulate(SimulateArgs),
    /// Run a Monte-Carlo experiment.
    Eval(EvalArgs),
    /// Time exact and approximate neighbor search.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    Exact,
    Approximate,
}

#[derive(Debug, Args)]
struct BackendArgs {
    #[arg(long, value_enum, default_value_t = BackendKind::Exact)]
    backend: BackendKind,
    /// Tree branching factor.
    #[arg(long, default_value_t = 32)]
    branching: usize,
    /// k-means iterations per tree node.
    #[arg(long, default_value_t = 11)]
    max_iters: usize,
    /// Maximum number of points examined per query.
    #[arg(long, default_value_t = 1000)]
    max_examined: usize,
}

impl BackendArgs {
    fn backend(&self) -> Backend {
        match self.backend {
            BackendKind::Exact => Backend::Exact,
            BackendKind::Approximate => Backend::Approximate {
                branching: self.branching,
                max_iters: self.max_iters,
                max_examined: self.max_examined,
            },
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Nominal training CSV.
    #[arg(long)]
    nominal: PathBuf,
    /// Known-anomaly CSV, enabling the odit2 and uni variants.
    #[arg(long)]
    anomaly: Option<PathBuf>,
    /// Input CSVs start with a header row.
    #[arg(long)]
    header: bool,
    /// Keep every anomaly sample instead of dropping those inside the nominal borderline.
    #[arg(long)]
    no_clean: bool,
    /// Significance level for cleaning the anomaly set (default: the model's alpha).
    #[arg(long)]
    alpha_clean: Option<f64>,
    #[command(flatten)]
    backend: BackendArgs,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Variant {
    Odit,
    Odit2,
    Uni,
}

#[derive(Debug, Args)]
struct DetectArgs {
    #[arg(long)]
    model: PathBuf,
    /// Stream CSV, read one row at a time.
    #[arg(long)]
    stream: PathBuf,
    #[arg(long)]
    header: bool,
    /// Alarm threshold (default: the model's threshold_h).
    #[arg(long)]
    h: Option<f64>,
    /// Threshold of the supervised statistic in the uni variant (default: h).
    #[arg(long)]
    h2: Option<f64>,
    #[arg(long, value_enum, default_value_t = Variant::Odit)]
    variant: Variant,
    /// Localize after the alarm with S samples at t-test level BETA.
    #[arg(long, num_args = 2, value_names = ["S", "BETA"])]
    localize: Option<Vec<String>>,
    /// Per-sample log `t,D_t,Delta_t,alarm_flag` (uni: the supervised statistic).
    #[arg(long)]
    event_log: Option<PathBuf>,
    /// Uni variant: event log of the semi-supervised statistic.
    #[arg(long)]
    event_log_odit: Option<PathBuf>,
    /// Localization report CSV.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Uni variant: drop appended samples inside the nominal borderline.
    #[arg(long)]
    reclean: bool,
    /// Uni variant: write the augmented anomaly set here.
    #[arg(long)]
    augmented_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Scenario JSON (or use --config).
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Output CSV; the ground truth goes to `<stem>.truth.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Experiment JSON (or use --config).
    #[arg(long)]
    experiment: Option<PathBuf>,
    /// Override the number of trials.
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 300_000)]
    n2: usize,
    #[arg(long, default_value_t = 50)]
    d: usize,
    #[arg(long, default_value_t = 200)]
    queries: usize,
    #[arg(long, default_value_t = 100)]
    branching: usize,
    #[arg(long, default_value_t = 11)]
    max_iters: usize,
    #[arg(long, default_value_t = 1000)]
    max_examined: usize,
    /// Sampling period in seconds, to report whether detection keeps up.
    #[arg(long)]
    sampling_period: Option<f64>,
    /// Result JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(alarm) => ExitCode::from(if alarm { 2 } else { 0 }),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

/// Returns whether an alarm was raised.
fn run(cli: Cli) -> BoxResult<bool> {
    let seed = cli.seed.unwrap_or(0);
    let config = cli.config.as_deref();
    match cli.command {
        Command::Train(a) => cmd_train(&a, config, cli.seed).map(|_| false),
        Command::Detect(a) => {
            reject_config(config, "detect")?;
            cmd_detect(&a, seed)
        }
        Command::Simulate(a) => cmd_simulate(&a, config, seed).map(|_| false),
        Command::Eval(a) => cmd_eval(&a, config, seed, cli.jobs).map(|_| false),
        Command::Bench(a) => {
            reject_config(config, "bench")?;
            cmd_bench(&a, seed).map(|_| false)
        }
    }
}

fn reject_config(config: Option<&Path>, command: &str) -> BoxResult<()> {
    match config {
        Some(_) => Err(format!("--config is not used by `{command}`").into()),
        None => Ok(()),
    }
}

fn json_input(
    explicit: Option<&Path>,
    config: Option<&Path>,
    what: &str,
) -> BoxResult<(PathBuf, String)> {
    let path = match (explicit, config) {
        (Some(p), None) | (None, Some(p)) => p.to_path_buf(),
        (Some(_), Some(_)) => {
            return Err(format!("give the {what} either directly or via --config, not both").into())
        }
        (None, None) => return Err(format!("missing {what} JSON").into()),
    };
    let text =
        fs::read_to_string(&path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    Ok((path, text))
}

fn cmd_train(a: &TrainArgs, config_path: Option<&Path>, seed: Option<u64>) -> BoxResult<()> {
    let mut config = match config_path {
        Some(p) => DetectorConfig::from_json(
            &fs::read_to_string(p).map_err(|e| format!("cannot read {}: {e}", p.display()))?,
        )?,
        None => DetectorConfig::default(),
    };
    if let Some(s) = seed {
        config.rng_seed = s;
    }
    let req = TrainRequest {
        nominal: &a.nominal,
        anomaly: a.anomaly.as_deref(),
        has_header: a.header,
        config,
        backend: a.backend.backend(),
        clean: !a.no_clean,
        alpha_clean: a.alpha_clean,
    };
    let (file, loaded) = model_file::train(&req)?;
    file.write(&a.out)?;
    println!(
        "trained on {} rows (d = {}): K = {}, borderline L_(K) = {}",
        file.nominal.rows, file.nominal.dim, file.k_rank, file.borderline
    );
    if let Some(m2) = &loaded.odit2 {
        println!("anomaly reference: {} rows", m2.anomaly_size());
    }
    let mut m = RunManifest::new("train", config_path, file.config.rng_seed).input(&a.nominal);
    if let Some(p) = &a.anomaly {
        m = m.input(p);
    }
    m.output(&a.out).write(&manifest_path_for(&a.out))?;
    Ok(())
}

fn parse_localize(v: &Option<Vec<String>>) -> BoxResult<Option<LocalizationConfig>> {
    let Some(v) = v else { return Ok(None) };
    let samples: usize = v[0]
        .parse()
        .map_err(|_| format!("--localize: S must be an integer, got {:?}", v[0]))?;
    let beta: f64 = v[1]
        .parse()
        .map_err(|_| format!("--localize: BETA must be a number, got {:?}", v[1]))?;
    let cfg = LocalizationConfig { samples, beta };
    cfg.validate()?;
    Ok(Some(cfg))
}

fn open_stream(path: &Path, header: bool) -> BoxResult<CsvStream<BufReader<File>>> {
    let f = File::open(path).map_err(|e| format!("cannot open {}: {e}", path.display()))?;
    Ok(CsvStream::new(BufReader::new(f), header))
}

fn cmd_detect(a: &DetectArgs, seed: u64) -> BoxResult<bool> {
    let file = ModelFile::read(&a.model)?;
    let h = a.h.unwrap_or(file.config.threshold_h);
    let localize = parse_localize(&a.localize)?;
    let loaded = file.load()?;
    let mut manifest = RunManifest::new("detect", None, seed)
        .input(&a.model)
        .input(&a.stream);
    let alarmed = match a.variant {
        Variant::Uni => {
            if localize.is_some() {
                return Err("--localize is not supported with --variant uni".into());
            }
            let mut odit2 = loaded
                .odit2
                .ok_or("the model has no anomaly reference; train it with --anomaly")?;
            let (alarm, outputs) = detect_uni(a, &loaded.nominal, &mut odit2, h)?;
            manifest.outputs.extend(outputs);
            alarm
        }
        Variant::Odit | Variant::Odit2 => {
            let (source, baseline): (&dyn EvidenceSource<f64>, Vec<f64>) = match a.variant {
                Variant::Odit => (
                    loaded.nominal.as_ref(),
                    loaded.nominal.contribution_baseline().to_vec(),
                ),
                _ => {
                    let m2 = loaded
                        .odit2
                        .as_ref()
                        .ok_or("the model has no anomaly reference; train it with --anomaly")?;
                    (m2, m2.contribution_baseline()?.to_vec())
                }
            };
            let (alarm, outputs) = detect_single(a, source, &baseline, h, localize)?;
            manifest.outputs.extend(outputs);
            alarm
        }
    };
    if let Some(first) = manifest.outputs.first().cloned() {
        manifest.write(&manifest_path_for(&first))?;
    }
    Ok(alarmed)
}

fn detect_single(
    a: &DetectArgs,
    source: &dyn EvidenceSource<f64>,
    baseline: &[f64],
    h: f64,
    localize: Option<LocalizationConfig>,
) -> BoxResult<(bool, Vec<PathBuf>)> {
    let mut stream = open_stream(&a.stream, a.header)?;
    let mut log = a
        .event_log
        .as_ref()
        .map(|p| File::create(p).map(EventLogWriter::new))
        .transpose()?
        .transpose()?;
    let mut state: DetectorState<f64> = DetectorState::new();
    // Contributions of the samples after the current onset estimate.
    let mut since_zero: Vec<Vec<f64>> = Vec::new();
    let needed = localize.map_or(0, |c| c.samples);
    while let Some(obs) = stream.next_observation::<f64>() {
        let x = obs?.values;
        if x.len() != source.dim() {
            return Err(odit_core::Error::DimensionMismatch {
                expected: source.dim(),
                found: x.len(),
            }
            .into());
        }
        let t = state.t + 1;
        let was_alarmed = state.alarm;
        let ev = source.evidence(&x, localize.is_some())?;
        let alarm = state.update_statistic(t, ev.value, h);
        if let Some(log) = log.as_mut() {
            log.record(t, ev.value, state.statistic, alarm)?;
        }
        if let Some(c) = ev.contributions {
            if !was_alarmed && state.statistic == 0.0 {
                since_zero.clear();
            } else {
                since_zero.push(c);
            }
        }
        if alarm && since_zero.len() >= needed {
            break;
        }
    }
    if let Some(log) = log {
        log.finish()?;
    }
    let mut outputs: Vec<PathBuf> = a.event_log.iter().cloned().collect();
    let Some(alarm_time) = state.alarm_time else {
        println!("no alarm in {} samples", state.t);
        return Ok((false, outputs));
    };
    let tau_hat = state.tau_hat().unwrap_or(0);
    println!("alarm at t = {alarm_time}, onset estimate tau_hat = {tau_hat}");
    if let Some(cfg) = localize {
        let samples: Vec<&[f64]> = since_zero.iter().map(Vec::as_slice).collect();
        let report = localize_samples(&samples, baseline, tau_hat, &cfg)?;
        let flagged = report.flagged();
        println!(
            "localization (S = {}, beta = {}, threshold = {:.4}): {} flagged dimension(s): {:?}",
            cfg.samples,
            cfg.beta,
            report.threshold,
            flagged.len(),
            flagged
        );
        if let Some(p) = &a.report {
            report.write_csv(File::create(p)?)?;
            outputs.push(p.clone());
        }
    }
    Ok((true, outputs))
}

fn detect_uni(
    a: &DetectArgs,
    odit: &odit_core::TrainedModel64,
    odit2: &mut odit_core::Odit2Model64,
    h: f64,
) -> BoxResult<(bool, Vec<PathBuf>)> {
    let mut stream = open_stream(&a.stream, a.header)?;
    let h2 = a.h2.unwrap_or(h);
    let before = odit2.anomaly_size();
    let outcome = {
        let mut uni = OditUni::new(odit, odit2, h, h2, a.reclean);
        while let Some(obs) = stream.next_observation::<f64>() {
            let x = obs?.values;
            if x.len() != odit.dim() {
                return Err(odit_core::Error::DimensionMismatch {
                    expected: odit.dim(),
                    found: x.len(),
                }
                .into());
            }
            if uni.step(&x)?.is_some() {
                break;
            }
        }
        uni.finish()
    };
    let mut outputs = Vec::new();
    for (path, state) in [
        (&a.event_log, &outcome.odit2),
        (&a.event_log_odit, &outcome.odit),
    ] {
        if let Some(p) = path {
            odit_core::detectors::write_event_log(state, File::create(p)?)?;
            outputs.push(p.clone());
        }
    }
    match outcome.stopped_by {
        UniStop::None => println!("no alarm in {} samples", outcome.odit.t),
        UniStop::Odit2 => println!(
            "known anomaly: ODIT-2 alarm at t = {}, onset estimate tau_hat = {}",
            outcome.stop_time.unwrap_or(0),
            outcome.odit2.tau_hat().unwrap_or(0)
        ),
        UniStop::Odit => {
            println!(
                "new anomaly: ODIT alarm at t = {}, onset estimate tau_hat = {}; {} sample(s) appended to the anomaly set ({} -> {})",
                outcome.stop_time.unwrap_or(0),
                outcome.odit.tau_hat().unwrap_or(0),
                outcome.appended,
                before,
                odit2.anomaly_size()
            );
            if let Some(p) = &a.augmented_out {
                save_csv(odit2.anomaly_reference(), p)?;
                outputs.push(p.clone());
            }
        }
    }
    Ok((outcome.stopped_by != UniStop::None, outputs))
}

fn cmd_simulate(a: &SimulateArgs, config: Option<&Path>, seed: u64) -> BoxResult<()> {
    let (path, text) = json_input(a.scenario.as_deref(), config, "scenario")?;
    let scenario = Scenario::from_json(&text)?;
    let (data, truth) = scenario.generate(seed)?;
    let sidecar = save_stream(&data, &truth, &a.out)?;
    println!(
        "wrote {} rows x {} columns to {} (tau = {}, {} affected)",
        data.len(),
        data.dim(),
        a.out.display(),
        truth.tau,
        truth.affected.len()
    );
    RunManifest::new("simulate", config, seed)
        .input(path)
        .output(&a.out)
        .output(sidecar)
        .write(&manifest_path_for(&a.out))?;
    Ok(())
}

fn cmd_eval(a: &EvalArgs, config: Option<&Path>, seed: u64, jobs: usize) -> BoxResult<()> {
    let (path, text) = json_input(a.experiment.as_deref(), config, "experiment")?;
    let mut exp = Experiment::from_json(&text)?;
    if let Some(n) = a.trials {
        exp.n_trials = n;
    }
    let results = exp.run(seed, jobs)?;
    let written = write_experiment_outputs(&exp, &results, seed, &a.out_dir)?;
    println!(
        "{:<14} {:>10} {:>12} {:>8} {:>9}",
        "detector", "h", "mean_delay", "far", "censored"
    );
    for r in &results {
        for row in &r.report.rows {
            println!(
                "{:<14} {:>10} {:>12} {:>8.4} {:>9}",
                r.report.metadata.detector,
                format!("{}", row.h),
                row.mean_delay
                    .map_or_else(|| "-".to_string(), |d| format!("{d:.3}")),
                row.far,
                row.censored
            );
        }
    }
    let mut m = RunManifest::new("eval", config, seed).input(path);
    m.outputs = written;
    m.write(&a.out_dir.join(format!("{}.manifest.json", exp.name)))?;
    Ok(())
}

fn cmd_bench(a: &BenchArgs, seed: u64) -> BoxResult<()> {
    let exact = timing_benchmark(Backend::Exact, a.n2, a.d, a.queries, seed)?;
    let approx = timing_benchmark(
        Backend::Approximate {
            branching: a.branching,
            max_iters: a.max_iters,
            max_examined: a.max_examined,
        },
        a.n2,
        a.d,
        a.queries,
        seed,
    )?;
    let speedup = exact.per_sample_seconds / approx.per_sample_seconds;
    println!("N2 = {}, d = {}, {} queries", exact.n2, a.d, a.queries);
    println!(
        "exact:       {:.6} s/sample (build {:.2} s)",
        exact.per_sample_seconds, exact.build_seconds
    );
    println!(
        "approximate: {:.6} s/sample (build {:.2} s)",
        approx.per_sample_seconds, approx.build_seconds
    );
    println!("speedup: {speedup:.1}x");
    let mut regimes = Vec::new();
    if let Some(period) = a.sampling_period {
        for (name, r) in [("exact", &exact), ("approximate", &approx)] {
            let regime = sampling_regime(period, r.per_sample_seconds)?;
            let delay0 = effective_delay(0.0, period, r.per_sample_seconds)?;
            match regime {
                SamplingRegime::RealTime => {
                    println!("{name}: keeps up; zero-delay detection after {delay0:.6} s")
                }
                SamplingRegime::Staircase { missed_per_sample } => {
                    println!("{name}: misses {missed_per_sample} sample(s) per processed sample")
                }
            }
            regimes.push(serde_json::json!({ "backend": name, "regime": regime, "zero_delay_seconds": delay0 }));
        }
    }
    if let Some(out) = &a.out {
        let json = serde_json::json!({
            "exact": exact,
            "approximate": approx,
            "speedup": speedup,
            "sampling": regimes,
        });
        fs::write(out, serde_json::to_string_pretty(&json)? + "\n")?;
        RunManifest::new("bench", None, seed)
            .output(out)
            .write(&manifest_path_for(out))?;
    }
    Ok(())
}
