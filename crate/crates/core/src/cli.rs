//! The `rolldrop` command line.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis::{emit_plots, record_distributions, write_histograms_csv, write_running_means_csv, Channel};
use crate::config::{load_config, ExperimentConfig, ExperimentManifest};
use crate::error::{Error, Result};
use crate::harness::{
    multi_seed_report, run_mismatch, run_noise_sweep, tune_dropout, write_mismatch_csv, NoiseSweepSpec, Variant,
};
use crate::nn::load_policy;
use crate::ppo::train;

/// Environment variable holding the default worker-thread cap.
pub const THREADS_ENV: &str = "ROLLDROP_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "rolldrop",
    version,
    about = "Train and evaluate walking policies with rollout-only dropout",
    propagate_version = true
)]
pub struct Cli {
    /// Worker threads for collection and evaluation (default: $ROLLDROP_THREADS, else all cores).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a policy with PPO.
    Train(TrainArgs),
    /// Train at decreasing Roll-Drop probabilities and pick the largest stable one.
    TuneDropout(TuneArgs),
    /// Success rate of a checkpoint across observation-noise levels.
    EvalNoise(EvalNoiseArgs),
    /// Compare two checkpoints under a stiffness mismatch.
    EvalMismatch(MismatchArgs),
    /// Train baseline and Roll-Drop variants on several seeds.
    MultiSeed(MultiSeedArgs),
    /// Record state/action distributions of a run and render figures.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Experiment configuration (JSON) or a manifest.json to replay.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed (defaults to the manifest's seed when replaying, else 0).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Override the number of iterations.
    #[arg(long)]
    pub iterations: Option<u64>,
    /// Override the Roll-Drop probability.
    #[arg(long)]
    pub rolldrop_p: Option<f64>,
    /// Override the update-time dropout probability.
    #[arg(long)]
    pub train_dropout_p: Option<f64>,
    /// Override the impedance stiffness used for training.
    #[arg(long)]
    pub kp: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for the candidate runs and tune.csv.
    #[arg(long, default_value = "tune")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalNoiseArgs {
    /// Policy checkpoint.
    #[arg(long)]
    pub policy: PathBuf,
    /// Sweep specification (JSON); defaults to the 12-level, 100-run grid.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Environment configuration; defaults to the run's manifest next to the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Summary CSV; per-run rows go to `<stem>_runs.csv` beside it.
    #[arg(long)]
    pub out: PathBuf,
    /// Override runs per level.
    #[arg(long)]
    pub runs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MismatchArgs {
    #[arg(long)]
    pub rolldrop: PathBuf,
    #[arg(long)]
    pub baseline: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "mismatch.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MultiSeedArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of seeds.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    /// First seed; seeds are consecutive.
    #[arg(long, default_value_t = 0)]
    pub first_seed: u64,
    /// Roll-Drop probability of the Roll-Drop variant.
    #[arg(long, default_value_t = 1e-4)]
    pub rolldrop_p: f64,
    #[arg(long, default_value = "multi_seed")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Run directory (with manifest.json) or a directory of CSV files.
    #[arg(long)]
    pub run: PathBuf,
    /// Channels to record, e.g. `joint_pos:3,action:2`. Requires a manifest.
    #[arg(long)]
    pub channels: Option<String>,
    /// Iterations to record (capped by the run's length).
    #[arg(long, default_value_t = 3000)]
    pub iterations: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Thread cap from the flag, else the environment variable.
pub fn thread_cap(flag: Option<usize>) -> Result<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map(Some)
            .map_err(|_| Error::config(THREADS_ENV, format!("`{v}` is not a thread count"))),
        Err(_) => Ok(None),
    }
}

fn config_or_default(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => load_config(p),
        None => Ok(ExperimentConfig::desk()),
    }
}

/// Config of the run a checkpoint belongs to (its directory or the parent).
fn config_near(ckpt: &Path) -> Result<Option<ExperimentConfig>> {
    let mut dir = ckpt.parent();
    for _ in 0..2 {
        let Some(d) = dir else { break };
        let m = d.join("manifest.json");
        if m.exists() {
            return Ok(Some(ExperimentManifest::load(&m)?.config));
        }
        dir = d.parent();
    }
    Ok(None)
}

fn eval_config(explicit: Option<&Path>, ckpt: &Path) -> Result<ExperimentConfig> {
    if let Some(p) = explicit {
        return load_config(p);
    }
    Ok(config_near(ckpt)?.unwrap_or_default())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn run_train(a: &TrainArgs) -> Result<()> {
    let (mut cfg, manifest_seed) = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            if text.contains("\"manifest_version\"") {
                let m = ExperimentManifest::parse(&text)?;
                (m.config, Some(m.seed))
            } else {
                (load_config(p)?, None)
            }
        }
        None => (ExperimentConfig::desk(), None),
    };
    if let Some(n) = a.iterations {
        cfg.ppo.total_iterations = n;
    }
    if let Some(p) = a.rolldrop_p {
        cfg.ppo.rolldrop_p = p;
    }
    if let Some(p) = a.train_dropout_p {
        cfg.ppo.train_dropout_p = p;
    }
    if let Some(kp) = a.kp {
        cfg.env.kp = kp;
    }
    cfg.validate()?;
    let seed = a.seed.or(manifest_seed).unwrap_or(0);
    let total = cfg.ppo.total_iterations;
    let outcome = train(&cfg, seed, &a.out, &mut |it, b| {
        if it % 10 == 0 || it + 1 == total {
            eprintln!("iteration {it}/{total}: mean reward {:.4}", b.mean_raw_reward());
        }
    })?;
    let last = outcome.records.last();
    println!(
        "trained {} iterations into {} (final mean reward {:.4}, sigma {:.4})",
        outcome.records.len(),
        a.out.display(),
        last.map_or(f64::NAN, |r| r.mean_reward),
        last.map_or(f64::NAN, |r| r.mean_sigma)
    );
    Ok(())
}

fn run_tune(a: &TuneArgs) -> Result<()> {
    let cfg = config_or_default(a.config.as_deref())?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    ExperimentManifest::new(cfg.clone(), a.seed, "tune-dropout", &a.out).write(&a.out.join("manifest.json"))?;
    let report = tune_dropout(&cfg, a.seed, &a.out)?;
    let csv = a.out.join("tune.csv");
    report.write_csv(create(&csv)?)?;
    match report.chosen {
        Some(p) => println!("chosen rolldrop_p = {p} (report: {})", csv.display()),
        None => println!("no candidate probability was stable (report: {})", csv.display()),
    }
    Ok(())
}

fn run_eval_noise(a: &EvalNoiseArgs) -> Result<()> {
    let policy = load_policy(&a.policy)?;
    let cfg = eval_config(a.config.as_deref(), &a.policy)?;
    let mut spec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let de = &mut serde_json::Deserializer::from_str(&text);
            serde_path_to_error::deserialize::<_, NoiseSweepSpec>(de)
                .map_err(|e| Error::config(format!("spec.{}", e.path()), e.into_inner().to_string()))?
        }
        None => cfg.eval.clone(),
    };
    if let Some(r) = a.runs {
        spec.runs_per_level = r;
    }
    let result = run_noise_sweep(&policy, &cfg.env, &spec)?;
    result.write_csv(create(&a.out)?)?;
    let stem = a.out.file_stem().and_then(|s| s.to_str()).unwrap_or("sweep");
    let runs = a.out.with_file_name(format!("{stem}_runs.csv"));
    result.write_runs_csv(create(&runs)?)?;
    for l in &result.levels {
        println!("n = {:.2}: success rate {:.2}", l.level, l.success_rate);
    }
    Ok(())
}

fn run_eval_mismatch(a: &MismatchArgs) -> Result<()> {
    let rd = load_policy(&a.rolldrop)?;
    let bl = load_policy(&a.baseline)?;
    let cfg = eval_config(a.config.as_deref(), &a.rolldrop)?;
    let rows = run_mismatch(&cfg.mismatch, &cfg.env, &[("rolldrop", &rd), ("baseline", &bl)])?;
    write_mismatch_csv(&rows, create(&a.out)?)?;
    for r in &rows {
        println!(
            "{:>9} kp {:>5.1}: falls {}/{}  vx rms {:.3}  mean |qd| {:.3}",
            r.variant, r.kp, r.falls, r.episodes, r.vx_rms, r.mean_abs_qd
        );
    }
    Ok(())
}

fn run_multi_seed(a: &MultiSeedArgs) -> Result<()> {
    let cfg = config_or_default(a.config.as_deref())?;
    let seeds: Vec<u64> = (a.first_seed..a.first_seed + a.seeds).collect();
    let variants = [Variant::baseline(), Variant::rolldrop(a.rolldrop_p)];
    let report = multi_seed_report(&cfg, &variants, &seeds, &a.out)?;
    report.write_curves_csv(create(&a.out.join("reward_curves.csv"))?)?;
    report.write_final_csv(cfg.tune.tail_fraction, create(&a.out.join("final_rewards.csv"))?)?;
    println!("wrote {}", a.out.join("reward_curves.csv").display());
    Ok(())
}

fn run_analyze(a: &AnalyzeArgs) -> Result<()> {
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    if let Some(spec) = &a.channels {
        let m = a.run.join("manifest.json");
        let manifest = ExperimentManifest::load(&m)?;
        let channels = Channel::parse_list(spec, manifest.config.env.joint_limit)?;
        let iters = a.iterations.min(manifest.config.ppo.total_iterations);
        let recs = record_distributions(&manifest.config, manifest.seed, channels, iters)?;
        write_histograms_csv(&recs, create(&a.out.join("histograms.csv"))?)?;
        write_running_means_csv(&recs, create(&a.out.join("running_means.csv"))?)?;
    }
    let mut inputs: Vec<PathBuf> = Vec::new();
    for dir in [&a.run, &a.out] {
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for e in entries {
            let p = e.map_err(|e| Error::io(dir, e))?.path();
            if p.extension().is_some_and(|x| x == "csv") && p.file_name() != Some("drop_events.csv".as_ref()) {
                inputs.push(p);
            }
        }
    }
    inputs.sort();
    inputs.dedup();
    let written = emit_plots(&inputs, &a.out)?;
    println!("wrote {} figures to {}", written.len(), a.out.display());
    Ok(())
}

/// Parse `argv` (including the program name) and run it. Returns the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = thread_cap(cli.threads)? {
        // a pool may already exist when called twice in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match &cli.command {
        Command::Train(a) => run_train(a),
        Command::TuneDropout(a) => run_tune(a),
        Command::EvalNoise(a) => run_eval_noise(a),
        Command::EvalMismatch(a) => run_eval_mismatch(a),
        Command::MultiSeed(a) => run_multi_seed(a),
        Command::Analyze(a) => run_analyze(a),
    }
}
