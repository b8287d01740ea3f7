//! `eqvar`: generate datasets, run training studies, analyze variability,
//! and inspect predictions, all from one JSON config.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use config::RunConfig;
use eqvar_core::datagen::{generate_split, read_dataset, write_dataset, Dataset, Split};
use eqvar_core::field::{divergence, high_freq_energy_ratio, mse_equil, mse_sigma, ScalarField2D};
use eqvar_core::losses::Method;
use eqvar_core::trainer::{
    load_generator_checkpoint, train_session, DataTriple, SessionRecord, SessionStatus,
};
use eqvar_core::variability::{analyze_study, write_report};
use eqvar_core::{exec, Error, Result};

#[derive(Parser)]
#[command(name = "eqvar", version, about = "Stress-field GAN variability lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// JSON run configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root directory.
    #[arg(long, default_value = "eqvar-out")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Baseline,
    SimpleAddition,
    Sigmoid,
    Arctan,
    All,
}

impl MethodArg {
    fn resolve(self, from_config: &[Method]) -> Vec<Method> {
        match self {
            MethodArg::Baseline => vec![Method::Baseline],
            MethodArg::SimpleAddition => vec![Method::SimpleAddition],
            MethodArg::Sigmoid => vec![Method::Sigmoid],
            MethodArg::Arctan => vec![Method::ArcTan],
            MethodArg::All => {
                if from_config.is_empty() {
                    Method::ALL.to_vec()
                } else {
                    from_config.to_vec()
                }
            }
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/validation/test datasets.
    Generate {
        #[command(flatten)]
        common: CommonArgs,
        /// Overwrite an existing dataset directory.
        #[arg(long)]
        force: bool,
    },
    /// Run a training study; completed sessions are skipped by seed.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Training method; `all` runs the configured method list.
        #[arg(long, value_enum, default_value_t = MethodArg::All)]
        method: MethodArg,
        /// Sessions per method (overrides config).
        #[arg(long)]
        sessions: Option<usize>,
        /// Maximum concurrent sessions.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Analyze the run directories into report files.
    Analyze {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Dump one prediction (stress channels, |K| fields, metrics) as CSV grids.
    Inspect {
        /// Dataset file (.eqvd) to draw the sample from.
        #[arg(long)]
        data: PathBuf,
        /// Sample index within the dataset.
        #[arg(long)]
        index: usize,
        /// Checkpoint to load; omit with --mode identity/zero.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Prediction source: a checkpoint, the target itself, or zeros.
        #[arg(long, value_enum, default_value_t = InspectMode::Checkpoint)]
        mode: InspectMode,
        #[arg(long, default_value = "eqvar-inspect")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum InspectMode {
    Checkpoint,
    Identity,
    Zero,
}

/// Exclusive lock on an output root; commands are not designed for
/// concurrent invocation on the same root.
struct Lock {
    path: PathBuf,
}

impl Lock {
    fn acquire(root: &Path) -> Result<Lock> {
        fs::create_dir_all(root)?;
        let path = root.join(".eqvar-lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Lock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Usage(format!(
                "lock file {} exists; another eqvar command may be running (delete it if stale)",
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(errors) => {
            let list: Vec<serde_json::Value> = errors
                .iter()
                .map(|e| serde_json::json!({"error": e.to_string()}))
                .collect();
            eprintln!(
                "{}",
                serde_json::to_string_pretty(&serde_json::json!({ "errors": list }))
                    .unwrap_or_else(|_| "{\"errors\":[\"unserializable\"]}".into())
            );
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> std::result::Result<(), Vec<Error>> {
    match command {
        Command::Generate { common, force } => {
            cmd_generate(&common, force).map_err(|e| vec![e])
        }
        Command::Train {
            common,
            method,
            sessions,
            workers,
        } => cmd_train(&common, method, sessions, workers),
        Command::Analyze { common } => cmd_analyze(&common).map_err(|e| vec![e]),
        Command::Inspect {
            data,
            index,
            checkpoint,
            mode,
            out,
        } => cmd_inspect(&data, index, checkpoint.as_deref(), mode, &out).map_err(|e| vec![e]),
    }
}

fn split_path(out: &Path, split: Split) -> PathBuf {
    out.join("data").join(format!("{}.eqvd", split.name()))
}

fn cmd_generate(common: &CommonArgs, force: bool) -> Result<()> {
    let config = RunConfig::load(common.config.as_deref())?;
    let _lock = Lock::acquire(&common.out)?;
    config.echo_to(&common.out.join("config.json"))?;

    let data_dir = common.out.join("data");
    if data_dir.exists() {
        if !force {
            return Err(Error::Usage(format!(
                "{} exists; pass --force to regenerate",
                data_dir.display()
            )));
        }
        fs::remove_dir_all(&data_dir)?;
    }
    fs::create_dir_all(&data_dir)?;

    let seed = config.generation_seed();
    let counts = [
        (Split::Train, config.dataset.train_count),
        (Split::Validation, config.dataset.validation_count),
        (Split::Test, config.dataset.test_count),
    ];
    let mut manifest_splits = serde_json::Map::new();
    for (split, count) in counts {
        let generated = generate_split(&config.dataset.generation, split, count, seed)?;
        let path = split_path(&common.out, split);
        write_dataset(&generated.dataset, &path)?;
        let residuals: Vec<f64> = generated.solver_stats.iter().map(|s| s.1).collect();
        let iters: Vec<usize> = generated.solver_stats.iter().map(|s| s.0).collect();
        manifest_splits.insert(
            split.name().into(),
            serde_json::json!({
                "file": path.file_name().unwrap().to_string_lossy(),
                "count": count,
                "residual_max": residuals.iter().cloned().fold(0.0f64, f64::max),
                "residual_mean": residuals.iter().sum::<f64>() / residuals.len() as f64,
                "iterations_max": iters.iter().max(),
                "iterations_mean": iters.iter().sum::<usize>() as f64 / iters.len() as f64,
            }),
        );
    }
    let manifest = serde_json::json!({
        "generation_seed": seed,
        "solver_tolerance": config.dataset.generation.solver_tolerance,
        "splits": manifest_splits,
    });
    fs::write(
        data_dir.join("dataset.json"),
        serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Parse {
            path: "dataset.json".into(),
            reason: e.to_string(),
        })?,
    )?;
    println!("generated datasets under {}", data_dir.display());
    Ok(())
}

fn load_triple(out: &Path) -> Result<DataTriple> {
    let read = |split: Split| -> Result<Dataset> {
        let path = split_path(out, split);
        if !path.exists() {
            return Err(Error::Usage(format!(
                "dataset {} missing; run `eqvar generate` first",
                path.display()
            )));
        }
        read_dataset(&path)
    };
    let triple = DataTriple {
        train: read(Split::Train)?,
        validation: read(Split::Validation)?,
        test: read(Split::Test)?,
    };
    triple.validate()?;
    Ok(triple)
}

fn cmd_train(
    common: &CommonArgs,
    method: MethodArg,
    sessions: Option<usize>,
    workers: usize,
) -> std::result::Result<(), Vec<Error>> {
    let config = RunConfig::load(common.config.as_deref()).map_err(|e| vec![e])?;
    let _lock = Lock::acquire(&common.out).map_err(|e| vec![e])?;
    config
        .echo_to(&common.out.join("config.json"))
        .map_err(|e| vec![e])?;
    let data = load_triple(&common.out).map_err(|e| vec![e])?;

    let methods = method.resolve(&config.training.methods);
    let n_sessions = sessions.unwrap_or(config.training.n_sessions);
    let seeds = config.session_seeds(n_sessions);
    let runs = common.out.join("runs");

    // one task per (method, seed) not yet completed
    let mut pending: Vec<(Method, u64, PathBuf)> = Vec::new();
    let mut skipped = 0usize;
    for &m in &methods {
        for &seed in &seeds {
            let dir = runs.join(m.slug()).join(seed.to_string());
            if dir.join("session.json").exists() {
                skipped += 1;
            } else {
                pending.push((m, seed, dir));
            }
        }
    }
    println!(
        "training {} sessions ({} already complete) on {} workers",
        pending.len(),
        skipped,
        workers
    );

    let results: Vec<Result<SessionRecord>> =
        exec::map_indexed_bounded(pending.len(), workers, |i| {
            let (m, seed, ref dir) = pending[i];
            train_session(&config.train_config(m, seed), &data, Some(dir))
        });
    let mut errors = Vec::new();
    let mut aborted = 0usize;
    for r in results {
        match r {
            Ok(rec) => {
                if !matches!(rec.status, SessionStatus::Completed) {
                    aborted += 1;
                }
            }
            Err(e) => errors.push(e),
        }
    }
    if aborted > 0 {
        println!("warning: {aborted} sessions aborted (recorded in session.json)");
    }
    if errors.is_empty() {
        println!("study complete under {}", runs.display());
        Ok(())
    } else {
        Err(errors)
    }
}

#[derive(Deserialize)]
struct SessionFile {
    record: SessionRecord,
}

fn read_records(runs: &Path) -> Result<Vec<(Method, Vec<SessionRecord>)>> {
    if !runs.exists() {
        return Err(Error::Usage(format!(
            "{} missing; run `eqvar train` first",
            runs.display()
        )));
    }
    let mut by_method = Vec::new();
    // fixed method order keeps reports deterministic
    for method in Method::ALL {
        let dir = runs.join(method.slug());
        if !dir.exists() {
            continue;
        }
        let mut entries: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("session.json").exists())
            .collect();
        // numeric seed order, not directory order
        entries.sort_by_key(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.parse::<u64>().ok())
                .unwrap_or(u64::MAX)
        });
        let mut records = Vec::new();
        for dir in entries {
            let path = dir.join("session.json");
            let text = fs::read_to_string(&path)?;
            let parsed: SessionFile =
                serde_json::from_str(&text).map_err(|e| Error::Parse {
                    path: path.display().to_string(),
                    reason: e.to_string(),
                })?;
            records.push(parsed.record);
        }
        if !records.is_empty() {
            by_method.push((method, records));
        }
    }
    if by_method.is_empty() {
        return Err(Error::Usage(format!(
            "no completed sessions under {}",
            runs.display()
        )));
    }
    Ok(by_method)
}

fn cmd_analyze(common: &CommonArgs) -> Result<()> {
    let config = RunConfig::load(common.config.as_deref())?;
    let _lock = Lock::acquire(&common.out)?;
    config.echo_to(&common.out.join("config.json"))?;

    let by_method = read_records(&common.out.join("runs"))?;
    // insufficient sessions is reported with per-method counts
    let shortfall: Vec<String> = by_method
        .iter()
        .filter_map(|(m, recs)| {
            let done = recs
                .iter()
                .filter(|r| matches!(r.status, SessionStatus::Completed))
                .count();
            (done < 2).then(|| format!("{}: {done} completed", m.slug()))
        })
        .collect();
    if !shortfall.is_empty() {
        return Err(Error::InsufficientData(format!(
            "methods with < 2 completed sessions: {}",
            shortfall.join(", ")
        )));
    }

    let report = analyze_study(&by_method, &config.analysis_config())?;
    let report_dir = common.out.join("report");
    write_report(&report_dir, &report)?;
    println!("report written to {}", report_dir.display());
    Ok(())
}

fn write_grid_csv(path: &Path, field: &ScalarField2D) -> Result<()> {
    let (h, w) = field.shape();
    let mut out = String::new();
    for i in 0..h {
        for j in 0..w {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&format!("{:e}", field.get(i, j)));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn cmd_inspect(
    data: &Path,
    index: usize,
    checkpoint: Option<&Path>,
    mode: InspectMode,
    out: &Path,
) -> Result<()> {
    let dataset = read_dataset(data)?;
    if index >= dataset.pairs.len() {
        return Err(Error::Usage(format!(
            "index {index} out of range ({} samples)",
            dataset.pairs.len()
        )));
    }
    let pair = &dataset.pairs[index];
    let (h, w) = pair.input.shape();

    let pred = match mode {
        InspectMode::Identity => pair.target.clone(),
        InspectMode::Zero => eqvar_core::field::StressField::constant(h, w, 0.0),
        InspectMode::Checkpoint => {
            let path = checkpoint.ok_or_else(|| {
                Error::Usage("--checkpoint required with --mode checkpoint".into())
            })?;
            let (_, gen) = load_generator_checkpoint(path)?;
            let micro = eqvar_core::autodiff::Tensor::new(
                vec![1, 1, h, w],
                pair.input.phase().values().to_vec(),
            )?;
            let out_t = gen.predict(&micro)?;
            let per = h * w;
            let comp = |c: usize| {
                ScalarField2D::new(h, w, out_t.data[c * per..(c + 1) * per].to_vec()).unwrap()
            };
            eqvar_core::field::StressField::new(comp(0), comp(1), comp(2))?
        }
    };

    fs::create_dir_all(out)?;
    write_grid_csv(&out.join("phase.csv"), pair.input.phase())?;
    for (name, field) in [
        ("sigma11", pred.s11()),
        ("sigma22", pred.s22()),
        ("sigma12", pred.s12()),
    ] {
        write_grid_csv(&out.join(format!("{name}.csv")), field)?;
    }
    let div = divergence(&pred, 1.0)?;
    let k1_abs = ScalarField2D::from_fn(h, w, |i, j| div.components()[0].get(i, j).abs());
    let k2_abs = ScalarField2D::from_fn(h, w, |i, j| div.components()[1].get(i, j).abs());
    write_grid_csv(&out.join("k1_abs.csv"), &k1_abs)?;
    write_grid_csv(&out.join("k2_abs.csv"), &k2_abs)?;

    let metrics = serde_json::json!({
        "index": index,
        "mse_sigma": mse_sigma(&pred, &pair.target)?,
        "mse_equil": mse_equil(&pred, &pair.target, 1.0)?,
        "high_freq_energy_ratio": {
            "sigma11": high_freq_energy_ratio(pred.s11(), 0.5)?,
            "sigma22": high_freq_energy_ratio(pred.s22(), 0.5)?,
            "sigma12": high_freq_energy_ratio(pred.s12(), 0.5)?,
        },
        "norm_scale": pair.norm_scale,
    });
    fs::write(
        out.join("metrics.json"),
        serde_json::to_vec_pretty(&metrics).map_err(|e| Error::Parse {
            path: "metrics.json".into(),
            reason: e.to_string(),
        })?,
    )?;
    println!("inspection written to {}", out.display());
    Ok(())
}
