use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use nxb_core::data::{self, LetterSpec};
use nxb_core::device::Intensity;
use nxb_core::nn::ExecMode;
use nxb_core::report::sig6;
use nxb_core::rng::{self, tag};
use nxb_core::train::{self, Axis, ExperimentConfig, Regime, RunOutput, TrainArtifact};
use nxb_core::verify::{self, Instance};
use nxb_core::Error;

const EXIT_VERIFY: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(
    name = "nxb",
    version,
    about = "Noise-aware training and verification for fluctuating crossbar arrays"
)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one regime for every configured seed.
    Train(TrainArgs),
    /// Evaluate a checkpoint by Monte Carlo.
    Eval(EvalArgs),
    /// Train one regime across values of an axis.
    Sweep(SweepArgs),
    /// Check the decomposition inequalities against independent oracles.
    Verify(VerifyArgs),
    /// Write the synthetic letter dataset as IDX and CSV files.
    GenData(GenDataArgs),
}

#[derive(Args)]
struct Overrides {
    /// Experiment config (JSON), or a manifest written by a previous run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// baseline | A | A+B | A+B+C
    #[arg(long)]
    regime: Option<String>,
    /// Replaces the config's seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// weak | normal | strong
    #[arg(long)]
    intensity: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Activation bit-width (bit planes in decomposed mode).
    #[arg(long)]
    bits: Option<u32>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: Overrides,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// ideal | original | decomposed (default: the regime's evaluation mode).
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Evaluate on a different device strength.
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    intensity: Option<String>,
    /// Config whose data section replaces the checkpoint's.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for eval.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    cfg: Overrides,
    /// lambda | intensity | energy_budget | bits
    #[arg(long)]
    axis: String,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    /// JSON array of instances (default: the built-in suite).
    #[arg(long)]
    instances: Option<PathBuf>,
    /// Monte Carlo trials per check (default: 10^6 scalar, 10^5 vector).
    #[arg(long)]
    trials: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for verify.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DataFormat {
    Idx,
    Csv,
    Both,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    train_per_class: usize,
    #[arg(long, default_value_t = 250)]
    test_per_class: usize,
    #[arg(long, default_value_t = 0.1)]
    jitter: f64,
    #[arg(long, default_value_t = 0.3)]
    slant: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = DataFormat::Both)]
    format: DataFormat,
}

/// A failure mapped to an exit code.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Divergence(_) => EXIT_DIVERGED,
            _ => EXIT_USAGE,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        msg: msg.into(),
    }
}

type CliResult<T> = Result<T, Failure>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| usage(format!("{}: {e}", path.display()))
}

fn write(dir: &Path, name: &str, contents: &str) -> CliResult<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(io_err(&path))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

/// Parses a config, reporting the JSON path of the first bad field. A run
/// manifest is accepted in place of a config.
fn parse_config(text: &str, origin: &str) -> CliResult<(ExperimentConfig, bool)> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| usage(format!("{origin}: invalid JSON: {e}")))?;
    let value = match value.get("tool_version").and(value.get("config")) {
        Some(inner) => inner.clone(),
        None => value,
    };
    let has_seeds = value.get("seeds").is_some();
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        usage(format!("{origin}: invalid config field `{path}`: {}", e.into_inner()))
    })?;
    Ok((cfg, has_seeds))
}

fn resolve_config(o: &Overrides) -> CliResult<ExperimentConfig> {
    let (mut cfg, has_seeds) = match &o.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            parse_config(&text, &p.display().to_string())?
        }
        None => (ExperimentConfig::default(), false),
    };
    if let Some(r) = &o.regime {
        cfg.regime = r.parse::<Regime>()?;
    }
    if let Some(i) = &o.intensity {
        cfg.intensity = i.parse::<Intensity>()?;
        cfg.kappa = None;
    }
    if let Some(l) = o.lambda {
        cfg.lambda = l;
    }
    if let Some(b) = o.bits {
        cfg.act_bits = Some(b);
    }
    match o.seed {
        Some(s) => cfg.seeds = vec![s],
        None if !has_seeds => {
            if let Some(s) = rng::env_seed() {
                cfg.seeds = vec![s];
            }
        }
        None => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool_version: &'static str,
    command: &'static str,
    config_path: Option<String>,
    config: &'a ExperimentConfig,
    seeds: &'a [u64],
    out: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    extra: Option<serde_json::Value>,
    started_unix_s: f64,
    finished_unix_s: f64,
    wall_clock_s: f64,
}

fn manifest(
    command: &'static str,
    o: &Overrides,
    cfg: &ExperimentConfig,
    out: &Path,
    extra: Option<serde_json::Value>,
    started: (f64, Instant),
) -> String {
    to_json(&Manifest {
        tool_version: env!("CARGO_PKG_VERSION"),
        command,
        config_path: o.config.as_ref().map(|p| p.display().to_string()),
        config: cfg,
        seeds: &cfg.seeds,
        out: out.display().to_string(),
        extra,
        started_unix_s: started.0,
        finished_unix_s: unix_now(),
        wall_clock_s: started.1.elapsed().as_secs_f64(),
    })
}

fn create_out(out: &Path) -> CliResult<()> {
    fs::create_dir_all(out).map_err(io_err(out))
}

fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let started = (unix_now(), Instant::now());
    let cfg = resolve_config(&a.cfg)?;
    let (train_ds, test_ds) = train::load_data(&cfg)?;
    create_out(&a.out)?;
    let runs = train::run_seeds(&cfg, &train_ds, &test_ds)?;
    write(&a.out, "metrics.csv", &RunOutput::metrics_csv(&runs))?;
    write(&a.out, "epochs.csv", &RunOutput::epochs_csv(&runs))?;
    let artifact = TrainArtifact {
        config: cfg.clone(),
        runs: runs.iter().map(|r| r.checkpoint.clone()).collect(),
    };
    write(&a.out, "checkpoint.json", &to_json(&artifact))?;
    write(
        &a.out,
        "manifest.json",
        &manifest("train", &a.cfg, &cfg, &a.out, None, started),
    )?;
    for r in &runs {
        let m = &r.metrics;
        match (&m.eval, &m.diverged) {
            (Some(e), _) => println!(
                "{} seed {}: acc {:.4} ± {:.4} ({} mode, {} reps), energy {}, rho {}",
                m.regime,
                m.seed,
                e.acc_mean,
                e.acc_std.unwrap_or(0.0),
                e.mode,
                e.reps,
                sig6(e.energy_mean),
                sig6(m.rho_final_mean())
            ),
            (None, Some(d)) => eprintln!("{} seed {}: diverged: {d}", m.regime, m.seed),
            (None, None) => {}
        }
    }
    if let Some(d) = runs.iter().find_map(|r| r.metrics.diverged.clone()) {
        return Err(Failure {
            code: EXIT_DIVERGED,
            msg: format!("training diverged: {d}"),
        });
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let text = fs::read_to_string(&a.checkpoint).map_err(io_err(&a.checkpoint))?;
    let artifact: TrainArtifact = serde_path_to_error::deserialize(&mut serde_json::Deserializer::from_str(&text))
        .map_err(|e| usage(format!("checkpoint field `{}`: {}", e.path(), e.inner())))?;
    artifact.validate()?;
    let mut cfg = artifact.config.clone();
    if let Some(p) = &a.config {
        let t = fs::read_to_string(p).map_err(io_err(p))?;
        cfg.data = parse_config(&t, &p.display().to_string())?.0.data;
    }
    let reps = a.reps.unwrap_or(cfg.eval_reps);
    if reps == 0 {
        return Err(usage("invalid value for `--reps`: must be >= 1"));
    }
    let mode = match &a.mode {
        Some(m) => m.parse::<ExecMode>()?,
        None => cfg.regime.eval_mode(),
    };
    let (_, test) = train::load_data(&cfg)?;
    let mut csv = String::from("seed,mode,reps,acc_mean,acc_std,energy_mean,read_steps\n");
    for run in &artifact.runs {
        let mut net = run.network.clone();
        if let Some(i) = &a.intensity {
            net.device = nxb_core::device::DeviceModel::preset(i.parse::<Intensity>()?)
                .with_peripheral_energy(net.device.peripheral_energy())?;
        }
        if let Some(k) = a.kappa {
            net.device = net.device.with_kappa(k)?;
        }
        if test.pixels() != net.inputs() {
            return Err(usage(format!(
                "dataset images have {} pixels, checkpoint expects {} inputs",
                test.pixels(),
                net.inputs()
            )));
        }
        let seed = a.seed.unwrap_or_else(|| rng::stream_id(&[tag::EVAL, run.seed]));
        let e = train::evaluate(&net, &test, mode, reps, seed)?;
        let std = e.acc_std.unwrap_or(0.0);
        println!(
            "seed {}: acc {:.4} ± {std:.4} over {reps} reps, energy {} per inference, {} read steps ({mode} mode)",
            run.seed,
            e.acc_mean,
            sig6(e.energy_mean),
            e.read_steps,
        );
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            run.seed,
            mode,
            reps,
            sig6(e.acc_mean),
            sig6(e.acc_std.unwrap_or(f64::NAN)),
            sig6(e.energy_mean),
            e.read_steps
        ));
    }
    match &a.out {
        Some(out) => {
            create_out(out)?;
            write(out, "eval.csv", &csv)
        }
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn cmd_sweep(a: &SweepArgs) -> CliResult<()> {
    let started = (unix_now(), Instant::now());
    let axis: Axis = a.axis.parse()?;
    let cfg = resolve_config(&a.cfg)?;
    let (train_ds, test_ds) = train::load_data(&cfg)?;
    create_out(&a.out)?;
    let result = train::sweep(&cfg, axis, &a.values, &train_ds, &test_ds)?;
    let csv = result.to_csv();
    write(&a.out, "sweep.csv", &csv)?;
    if !result.infeasible.is_empty() {
        write(&a.out, "infeasible.csv", &result.infeasible_csv())?;
        for i in &result.infeasible {
            eprintln!("infeasible: {}={} seed {}: {}", axis, i.value, i.seed, i.reason);
        }
    }
    let extra = serde_json::json!({ "axis": axis, "values": a.values });
    write(
        &a.out,
        "manifest.json",
        &manifest("sweep", &a.cfg, &cfg, &a.out, Some(extra), started),
    )?;
    print!("{csv}");
    Ok(())
}

fn cmd_verify(a: &VerifyArgs) -> CliResult<()> {
    let instances: Vec<Instance> = match &a.instances {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            serde_path_to_error::deserialize(&mut serde_json::Deserializer::from_str(&text))
                .map_err(|e| usage(format!("{}: field `{}`: {}", p.display(), e.path(), e.inner())))?
        }
        None => verify::default_suite(),
    };
    if instances.is_empty() {
        return Err(usage("no instances to verify"));
    }
    let seed = a.seed.or_else(rng::env_seed).unwrap_or(0);
    let report = verify::run_suite(&instances, a.trials, seed)?;
    print!("{}", report.to_text());
    let json = to_json(&report);
    match &a.out {
        Some(out) => {
            create_out(out)?;
            write(out, "verify.json", &json)?;
        }
        None => print!("{json}"),
    }
    if report.passed {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_VERIFY,
            msg: "verification failed".into(),
        })
    }
}

fn cmd_gen_data(a: &GenDataArgs) -> CliResult<()> {
    let spec = LetterSpec {
        jitter: a.jitter,
        slant: a.slant,
        ..LetterSpec::default()
    };
    let seed = a.seed.or_else(rng::env_seed).unwrap_or(0);
    create_out(&a.out)?;
    for (name, n, part) in [("train", a.train_per_class, 0), ("test", a.test_per_class, 1)] {
        let ds = data::gen_letters(&spec, n, rng::stream_id(&[tag::DATA, seed, part]))?;
        if matches!(a.format, DataFormat::Idx | DataFormat::Both) {
            let (images, labels) = data::to_idx(&ds);
            for (file, bytes) in [
                (format!("{name}-images.idx"), images),
                (format!("{name}-labels.idx"), labels),
            ] {
                let path = a.out.join(file);
                fs::write(&path, bytes).map_err(io_err(&path))?;
            }
        }
        if matches!(a.format, DataFormat::Csv | DataFormat::Both) {
            write(&a.out, &format!("{name}.csv"), &ds.to_csv())?;
        }
        println!("{name}: {} images of {}x{}", ds.len(), ds.height, ds.width);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(j) = cli.jobs {
        if j == 0 {
            eprintln!("error: --jobs must be >= 1");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Verify(a) => cmd_verify(a),
        Command::GenData(a) => cmd_gen_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
