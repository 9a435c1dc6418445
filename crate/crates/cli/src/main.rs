use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use qtlab::backend::{
    integer_infer, profile_sweep, BackendProfile, CalibrationSet, Checkpoint, CHECKPOINT_VERSION,
};
use qtlab::config::{RunConfig, Settings};
use qtlab::experiment::{
    aggregate_csv, baseline, run, with_overrides, Run, ABLATION, ABLATION_PRESET,
};
use qtlab::metrics::MetricsReport;
use qtlab::quant::Granularity;

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_ARTIFACT: u8 = 3;

#[derive(Parser)]
#[command(
    name = "qtl",
    version,
    about = "Quantization-aware training lab: train, export, simulate integer backends",
    after_long_help = config_help()
)]
struct Cli {
    /// Run configuration file (flat `key = value`)
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one key; repeatable, applied after --config
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for --set seed=N, applied last; for eval and simulate it
    /// picks the data seed, which otherwise comes from the checkpoint
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parallel sub-runs for ablation and sweep
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Output root [default: output.dir, then $QTL_OUT_DIR, then ./runs]
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model into a fresh run directory
    Train,
    /// Score a checkpoint in FP and on integer profiles
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Profile id; repeatable [default: pt-static]
        #[arg(long = "profile")]
        profiles: Vec<String>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Re-freeze a checkpoint at another bit-width or granularity
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Destination checkpoint path
        #[arg(long)]
        to: PathBuf,
        #[arg(long, default_value_t = 8)]
        bits: u32,
        #[arg(long, value_enum, default_value_t = GranularityArg::PerTensor)]
        granularity: GranularityArg,
    },
    /// Run a checkpoint through backend profiles
    Simulate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Profile id; repeatable [default: sweep.profiles]
        #[arg(long = "profile")]
        profiles: Vec<String>,
        /// Write the table here instead of stdout
        #[arg(long)]
        to: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Five-configuration ablation matrix over seeds
    Ablation {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Keep the configured optimizer and epochs instead of the ablation preset
        #[arg(long)]
        as_configured: bool,
    },
    /// Train Quant-Trim and FP baseline per seed and sweep both over profiles
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Print every configuration key with its default
    ConfigReference,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum GranularityArg {
    PerTensor,
    PerChannel,
}

fn config_help() -> String {
    format!("Configuration keys:\n\n{}", RunConfig::reference())
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<qtlab::Error> for Failure {
    fn from(e: qtlab::Error) -> Self {
        let code = match e {
            qtlab::Error::Config { .. } => EXIT_CONFIG,
            qtlab::Error::Io(_)
            | qtlab::Error::Format { .. }
            | qtlab::Error::VersionMismatch { .. } => EXIT_ARTIFACT,
            _ => EXIT_RUNTIME,
        };
        Failure {
            code,
            error: e.into(),
        }
    }
}

fn artifact(e: impl Into<anyhow::Error>, path: &Path) -> Failure {
    Failure {
        code: EXIT_ARTIFACT,
        error: e.into().context(format!("{}", path.display())),
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::ConfigReference => {
            print!("{}", RunConfig::reference());
            Ok(())
        }
        Command::Train => {
            let config = load_config(cli)?;
            let root = out_root(cli, &config.settings()?);
            let (dir, _) = train_into(&root, &config)?;
            println!("{}", dir.display());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            profiles,
            format,
        } => {
            let settings = load_config(cli)?.settings()?;
            let ckpt = load_checkpoint(checkpoint)?;
            let profiles = if profiles.is_empty() {
                vec![BackendProfile::defaults()[0]]
            } else {
                parse_profiles(profiles)?
            };
            eval(&ckpt, &settings, data_seed(cli, &ckpt), &profiles, *format)
        }
        Command::Export {
            checkpoint,
            to,
            bits,
            granularity,
        } => {
            let ckpt = load_checkpoint(checkpoint)?;
            let g = match granularity {
                GranularityArg::PerTensor => Granularity::PerTensor,
                GranularityArg::PerChannel => Granularity::PerChannel { axis: 0 },
            };
            let out = ckpt.requantize(*bits, g)?;
            out.save(to).map_err(|e| artifact(e, to))?;
            println!("{}", to.display());
            Ok(())
        }
        Command::Simulate {
            checkpoint,
            profiles,
            to,
            format,
        } => {
            let settings = load_config(cli)?.settings()?;
            let ckpt = load_checkpoint(checkpoint)?;
            let profiles = if profiles.is_empty() {
                settings.profiles.clone()
            } else {
                parse_profiles(profiles)?
            };
            let data = settings.dataset.build(data_seed(cli, &ckpt))?;
            let calib = CalibrationSet::from_dataset(&data.train, settings.calib_size)?;
            let table =
                profile_sweep(&ckpt, &profiles, &data.val, Some(&calib), settings.ece_bins)?;
            let text = match format {
                Format::Csv => table.to_csv(),
                Format::Json => json(&table)?,
            };
            emit(&text, to.as_deref())
        }
        Command::Ablation {
            seeds,
            as_configured,
        } => {
            let mut config = load_config(cli)?;
            if !as_configured {
                config = with_overrides(&config, &ABLATION_PRESET)?;
            }
            ablation(cli, &config, seeds)
        }
        Command::Sweep { seeds } => sweep(cli, &load_config(cli)?, seeds),
    }
}

fn load_config(cli: &Cli) -> Outcome<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure {
                code: EXIT_CONFIG,
                error: anyhow!(e).context(format!("reading config {}", path.display())),
            })?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    for s in &cli.set {
        config.set(s)?;
    }
    if let Some(seed) = cli.seed {
        config.set(&format!("seed={seed}"))?;
    }
    config.settings()?;
    Ok(config)
}

fn out_root(cli: &Cli, settings: &Settings) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| settings.output_dir.clone())
        .or_else(|| std::env::var_os("QTL_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Creates `<root>/<timestamp>-<tag>`, adding a numeric suffix on collision.
fn fresh_dir(root: &Path, tag: &str) -> Outcome<PathBuf> {
    fs::create_dir_all(root).map_err(|e| artifact(e, root))?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
    let base = format!("{stamp}-{tag}");
    for i in 0u32.. {
        let name = if i == 0 {
            base.clone()
        } else {
            format!("{base}.{i}")
        };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(artifact(e, &dir)),
        }
    }
    unreachable!()
}

fn write(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| artifact(e, path))
}

/// Trains `config` into a new run directory under `root`.
fn train_into(root: &Path, config: &RunConfig) -> Outcome<(PathBuf, Run)> {
    let settings = config.settings()?;
    let dir = fresh_dir(root, &config.hash8())?;
    write(&dir.join("config.snapshot"), &config.snapshot())?;
    for w in settings.train.warnings() {
        eprintln!("warning: {w}");
    }
    let r = run(&settings).map_err(|e| Failure::from(e).with_dir(&dir))?;
    write(&dir.join("report.csv"), &r.report().to_csv())?;
    let model = dir.join("model.qtck");
    r.checkpoint.save(&model).map_err(|e| artifact(e, &model))?;
    Ok((dir, r))
}

impl Failure {
    fn with_dir(self, dir: &Path) -> Self {
        Failure {
            code: self.code,
            error: self.error.context(format!("run {}", dir.display())),
        }
    }
}

fn load_checkpoint(path: &Path) -> Outcome<Checkpoint> {
    Checkpoint::load(path).map_err(|e| {
        let mut f = Failure::from(e);
        f.code = EXIT_ARTIFACT;
        if let Some(qtlab::Error::VersionMismatch { .. }) = f.error.downcast_ref::<qtlab::Error>() {
            f.error = f.error.context(format!(
                "this build reads checkpoint version {CHECKPOINT_VERSION}"
            ));
        }
        f.error = f.error.context(format!("loading {}", path.display()));
        f
    })
}

fn parse_profiles(ids: &[String]) -> Outcome<Vec<BackendProfile>> {
    ids.iter()
        .map(|id| {
            id.parse::<BackendProfile>().map_err(|e| Failure {
                code: EXIT_CONFIG,
                error: e.into(),
            })
        })
        .collect()
}

fn json<T: serde::Serialize>(value: &T) -> Outcome<String> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| Failure {
            code: EXIT_RUNTIME,
            error: e.into(),
        })
}

fn emit(text: &str, to: Option<&Path>) -> Outcome {
    match to {
        Some(path) => write(path, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Datasets for scoring a checkpoint are regenerated with its training seed
/// unless --seed says otherwise.
fn data_seed(cli: &Cli, ckpt: &Checkpoint) -> u64 {
    cli.seed.unwrap_or(ckpt.meta.seed)
}

fn eval(
    ckpt: &Checkpoint,
    settings: &Settings,
    seed: u64,
    profiles: &[BackendProfile],
    format: Format,
) -> Outcome {
    let data = settings.dataset.build(seed)?;
    let calib = CalibrationSet::from_dataset(&data.train, settings.calib_size)?;
    let x = &data.val.inputs;
    let reference = ckpt.fp_model()?.predict(x)?;
    let mut rows = vec![(
        "fp".to_string(),
        MetricsReport::compute(&reference, &reference, &data.val.labels, settings.ece_bins)?,
    )];
    for p in profiles {
        let logits = integer_infer(ckpt, x, p, Some(&calib))?;
        rows.push((
            p.id(),
            MetricsReport::compute(&logits, &reference, &data.val.labels, settings.ece_bins)?,
        ));
    }
    let text = match format {
        Format::Csv => {
            let mut out = format!("mode,{}\n", MetricsReport::CSV_HEADER);
            for (mode, m) in &rows {
                let _ = writeln!(out, "{mode},{}", m.csv_row());
            }
            out
        }
        Format::Json => {
            let map: serde_json::Map<String, serde_json::Value> = rows
                .iter()
                .map(|(mode, m)| {
                    Ok((
                        mode.clone(),
                        serde_json::to_value(m).map_err(|e| anyhow!(e))?,
                    ))
                })
                .collect::<anyhow::Result<_>>()
                .map_err(|error| Failure {
                    code: EXIT_RUNTIME,
                    error,
                })?;
            json(&map)?
        }
    };
    emit(&text, None)
}

fn pool(jobs: usize) -> Outcome<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Failure {
            code: EXIT_RUNTIME,
            error: e.into(),
        })
}

fn ablation(cli: &Cli, base: &RunConfig, seeds: &[u64]) -> Outcome {
    let root = fresh_dir(
        &out_root(cli, &base.settings()?),
        &format!("ablation-{}", base.hash8()),
    )?;
    write(&root.join("base.snapshot"), &base.snapshot())?;
    let jobs: Vec<(&str, u64, RunConfig)> = ABLATION
        .iter()
        .flat_map(|row| seeds.iter().map(move |&s| (row, s)))
        .map(|(row, s)| Ok((row.name, s, row.configure(base, s)?)))
        .collect::<Outcome<_>>()?;
    let results: Vec<Outcome<(PathBuf, Run)>> = pool(cli.jobs)?.install(|| {
        jobs.par_iter()
            .map(|(_, _, c)| train_into(&root, c))
            .collect()
    });

    let mut index = String::from("config,seed,run_dir,status\n");
    let mut done = Vec::new();
    let mut first_failure = None;
    for ((name, seed, _), result) in jobs.iter().zip(results) {
        match result {
            Ok((dir, r)) => {
                let _ = writeln!(index, "{name},{seed},{},ok", file_name(&dir));
                done.push((*name, r));
            }
            Err(f) => {
                eprintln!("error: {name} seed {seed}: {:#}", f.error);
                let _ = writeln!(index, "{name},{seed},,failed");
                first_failure.get_or_insert(f);
            }
        }
    }
    write(&root.join("runs.csv"), &index)?;
    let reports: Vec<(&str, &qtlab::trainer::TrainReport)> =
        done.iter().map(|(n, r)| (*n, r.report())).collect();
    write(&root.join("aggregate.csv"), &aggregate_csv(&reports))?;
    println!("{}", root.display());
    match first_failure {
        Some(f) => Err(Failure {
            code: f.code,
            error: f
                .error
                .context("ablation incomplete; finished runs are kept"),
        }),
        None => Ok(()),
    }
}

fn sweep(cli: &Cli, config: &RunConfig, seeds: &[u64]) -> Outcome {
    let settings = config.settings()?;
    let root = fresh_dir(
        &out_root(cli, &settings),
        &format!("sweep-{}", config.hash8()),
    )?;
    let mut jobs = Vec::new();
    for &seed in seeds {
        let qt = with_overrides(config, &[format!("seed={seed}")])?;
        let base = baseline(&qt)?;
        jobs.push((seed, "quant-trim", qt));
        jobs.push((seed, "baseline", base));
    }
    let results: Vec<Outcome<(String, String)>> = pool(cli.jobs)?.install(|| {
        jobs.par_iter()
            .map(|(seed, name, c)| {
                let (_, r) = train_into(&root, c)?;
                let table = r.sweep(&c.settings()?)?;
                let mut rows = String::new();
                for line in table.to_csv().lines().skip(1) {
                    let _ = writeln!(rows, "{seed},{name},{line}");
                }
                Ok((rows, format!("{seed},{name},{}\n", table.top1_std())))
            })
            .collect()
    });
    let mut csv = format!("seed,model,{}\n", qtlab::backend::SweepTable::CSV_HEADER);
    let mut summary = String::from("seed,model,top1_std\n");
    let mut first_failure = None;
    for r in results {
        match r {
            Ok((rows, spread)) => {
                csv.push_str(&rows);
                summary.push_str(&spread);
            }
            Err(f) => {
                eprintln!("error: {:#}", f.error);
                first_failure.get_or_insert(f);
            }
        }
    }
    write(&root.join("sweep.csv"), &csv)?;
    write(&root.join("summary.csv"), &summary)?;
    println!("{}", root.display());
    first_failure.map_or(Ok(()), Err)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}
