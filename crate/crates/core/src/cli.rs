//! The `polypflow` command line.
//!
//! Every subcommand writes under a single `--out-dir` root (default `.`);
//! output file names given with `--out` must be relative to it. Config keys
//! can be overridden on any training-related subcommand with
//! `--<key> <value>` or `--<key>=<value>`, e.g. `--train.lr 1e-3`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::ablate::{self, AblationConfig, AblationMode, EvalSet, DEFAULT_STEP_GRID};
use crate::checkpoint;
use crate::config::{self, TrainConfig};
use crate::data::{self, Dataset, Sample, Split};
use crate::error::Error;
use crate::gradcheck::{self, GradCheckOptions, Group};
use crate::metrics::{self, MetricsReport};
use crate::train::{self, RecordSource, SampleSource, TrainOptions};
use crate::viz;

pub const DATA_ROOT_ENV: &str = "POLYPFLOW_DATA_ROOT";

#[derive(Parser, Debug)]
#[command(name = "polypflow", version, about = "Polyp segmentation with a flow-matching refinement ODE")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct OutDir {
    /// Root directory for every file this command writes.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes config.txt, train_log.csv and last.safetensors.
    Train {
        /// `key = value` config file; `--<key> value` flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset root (falls back to data.root, then $POLYPFLOW_DATA_ROOT).
        #[arg(long)]
        root: Option<PathBuf>,
        /// Split manifest CSV; without one, splits are computed from data.split_seed.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Keep a checkpoint per epoch under checkpoints/.
        #[arg(long)]
        keep_checkpoints: bool,
        /// Train on at most this many images.
        #[arg(long)]
        limit: Option<usize>,
        #[command(flatten)]
        out: OutDir,
    },
    /// Segment one image; writes mask.png and trajectory/step_XX.png.
    Infer {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Euler steps (defaults to the checkpoint's ode.n_steps).
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        out: OutDir,
    },
    /// Score prediction masks against ground truth.
    Eval {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        gts: PathBuf,
        /// CSV report; a JSON copy is written next to it.
        #[arg(long, default_value = "report.csv")]
        out: PathBuf,
        /// Dataset label for the report rows.
        #[arg(long, default_value = "dataset")]
        dataset: String,
        #[command(flatten)]
        out_dir: OutDir,
    },
    /// Component and step-count ablations; writes ablation.csv and ablation.json.
    Ablate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Evaluation set as NAME=DIR, DIR holding images/ and masks/ (repeatable).
        #[arg(long = "data", value_name = "NAME=DIR")]
        data: Vec<String>,
        /// Dataset root for --datasets (falls back to $POLYPFLOW_DATA_ROOT).
        #[arg(long)]
        root: Option<PathBuf>,
        /// Comma-separated benchmark names under --root.
        #[arg(long, value_delimiter = ',')]
        datasets: Vec<String>,
        #[arg(long, value_enum, default_value = "reuse")]
        mode: Mode,
        #[arg(long, value_enum, default_value = "both")]
        grid: Grid,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_STEP_GRID.to_vec())]
        steps_grid: Vec<usize>,
        /// Evaluate at most this many images per set.
        #[arg(long)]
        limit: Option<usize>,
        /// Training images/ and masks/ directory for --mode retrain.
        #[arg(long)]
        train_data: Option<PathBuf>,
        #[command(flatten)]
        out: OutDir,
    },
    /// Render the per-step trajectory of one image as a panel strip.
    VizSteps {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value = "steps.png")]
        out: PathBuf,
        #[command(flatten)]
        out_dir: OutDir,
    },
    /// Render input | GT | overlay rows for several prediction masks.
    VizCompare {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Method prediction as NAME=PATH (repeatable).
        #[arg(long = "pred", value_name = "NAME=PATH")]
        preds: Vec<String>,
        #[arg(long, default_value = "compare.png")]
        out: PathBuf,
        #[command(flatten)]
        out_dir: OutDir,
    },
    /// Assign train / seen_test / unseen_test splits and write the manifest.
    Split {
        #[arg(long)]
        root: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "split.csv")]
        out: PathBuf,
        #[command(flatten)]
        out_dir: OutDir,
    },
    /// Compare analytic gradients with central differences on a tiny model.
    GradCheck {
        /// Comma-separated groups (default: all).
        #[arg(long, value_delimiter = ',')]
        groups: Vec<String>,
        /// Override every group's tolerance.
        #[arg(long)]
        tolerance: Option<f64>,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Reuse,
    Retrain,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Grid {
    Components,
    Steps,
    Both,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Pull `--<config key> value` and `--<config key>=value` pairs out of
/// `args`, leaving everything else for clap.
fn extract_overrides(args: Vec<OsString>) -> CliResult<(Vec<OsString>, Vec<(String, String)>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.to_str().and_then(|s| s.strip_prefix("--")) else {
            rest.push(arg);
            continue;
        };
        if flag.is_empty() {
            rest.push(arg);
            rest.extend(it);
            break;
        }
        let (key, inline) = match flag.split_once('=') {
            Some((k, v)) => (k, Some(v.to_string())),
            None => (flag, None),
        };
        if !config::KEYS.contains(&key) {
            rest.push(arg);
            continue;
        }
        let key = key.to_string();
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .and_then(|v| v.into_string().ok())
                .ok_or_else(|| usage(format!("--{key} needs a value")))?,
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

fn apply_overrides(config: &mut TrainConfig, overrides: &[(String, String)]) -> CliResult {
    for (k, v) in overrides {
        config.set(k, v).map_err(|e| usage(e.to_string()))?;
    }
    config.validate().map_err(|e| usage(e.to_string()))
}

/// Resolve an output file name under `out_dir`.
fn output_path(out_dir: &Path, name: &Path) -> CliResult<PathBuf> {
    if name.is_absolute() || name.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
        return Err(usage(format!(
            "--out must be a relative path inside --out-dir, got {}",
            name.display()
        )));
    }
    Ok(out_dir.join(name))
}

fn create_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(Error::io(dir, e)))
}

fn split_pair(s: &str, what: &str) -> CliResult<(String, PathBuf)> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_string(), PathBuf::from(path))),
        _ => Err(usage(format!("{what} expects NAME=PATH, got `{s}`"))),
    }
}

fn env_root() -> Option<PathBuf> {
    std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from)
}

/// Preprocess every image/mask pair of a directory holding `images/` and
/// `masks/`.
fn load_dir_samples(dir: &Path, size: usize, limit: Option<usize>) -> CliResult<Vec<Sample>> {
    let mut pairs = data::load_pairs(dir)?;
    if let Some(n) = limit {
        pairs.truncate(n);
    }
    Ok(pairs
        .iter()
        .map(|(image, mask)| data::preprocess_files(image, mask, size))
        .collect::<crate::Result<_>>()?)
}

/// Every benchmark present under `root`; missing ones are skipped.
fn load_benchmarks(root: &Path) -> CliResult<Vec<data::SampleRecord>> {
    let mut records = Vec::new();
    for ds in Dataset::ALL {
        if data::dataset_dir(root, ds).is_ok() {
            records.extend(data::load_dataset(root, ds)?);
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset(root.to_path_buf()).into());
    }
    Ok(records)
}

fn training_source(config: &TrainConfig, root: &Path, limit: Option<usize>) -> CliResult<Box<dyn SampleSource>> {
    if root.join("images").is_dir() {
        return Ok(Box::new(load_dir_samples(root, config.image_size, limit)?));
    }
    let records = match &config.manifest {
        Some(m) => data::read_manifest(m, root)?,
        None => data::make_splits(load_benchmarks(root)?, config.split_seed)?,
    };
    let mut records: Vec<_> = records.into_iter().filter(|r| r.split == Some(Split::Train)).collect();
    if let Some(n) = limit {
        records.truncate(n);
    }
    Ok(Box::new(RecordSource {
        records,
        size: config.image_size,
    }))
}

fn cmd_train(
    config_file: Option<PathBuf>,
    root: Option<PathBuf>,
    manifest: Option<PathBuf>,
    keep_checkpoints: bool,
    limit: Option<usize>,
    out_dir: PathBuf,
    overrides: &[(String, String)],
) -> CliResult {
    let mut config = match config_file {
        Some(path) => TrainConfig::load(&path)?,
        None => TrainConfig::default(),
    };
    apply_overrides(&mut config, overrides)?;
    if manifest.is_some() {
        config.manifest = manifest;
    }
    let root = root
        .or_else(|| config.data_root.clone())
        .or_else(env_root)
        .ok_or_else(|| usage(format!("no dataset root: pass --root, set data.root or {DATA_ROOT_ENV}")))?;
    config.data_root = Some(root.clone());
    let source = training_source(&config, &root, limit)?;
    create_dir(&out_dir)?;
    let config_path = out_dir.join("config.txt");
    std::fs::write(&config_path, config.to_text()).map_err(|e| Error::io(&config_path, e))?;
    let report = train::train(
        config,
        source.as_ref(),
        &TrainOptions {
            out_dir: Some(out_dir.clone()),
            keep_epoch_checkpoints: keep_checkpoints,
        },
    )?;
    if let Some(last) = report.log.last() {
        println!(
            "trained {} steps on {} images: loss_seg={:.4} loss_fm={:.4} probe_mdice={:.4}",
            last.step,
            source.len(),
            last.loss_seg,
            last.loss_fm,
            last.probe_mdice
        );
    }
    println!("checkpoint: {}", out_dir.join(train::LAST_CHECKPOINT).display());
    Ok(())
}

fn cmd_infer(image: &Path, ckpt: &Path, steps: Option<usize>, out_dir: &Path) -> CliResult {
    let model = checkpoint::load_model(ckpt)?;
    let n = steps.unwrap_or(model.config.n_steps);
    let out = model.infer_file(image, n, out_dir)?;
    println!("mask: {}", out.mask_path.display());
    println!("trajectory: {} ({} states)", out.trajectory_dir.display(), out.index.len());
    Ok(())
}

fn cmd_eval(preds: &Path, gts: &Path, out: &Path, dataset: &str, out_dir: &Path) -> CliResult {
    let csv_path = output_path(out_dir, out)?;
    let report = MetricsReport {
        datasets: vec![metrics::evaluate_dataset(preds, gts, dataset)?],
    };
    if let Some(dir) = csv_path.parent() {
        create_dir(dir)?;
    }
    report.write_csv(&csv_path)?;
    report.write_json(&csv_path.with_extension("json"))?;
    let m = &report.datasets[0].mean;
    println!(
        "{dataset}: {} images  dice={:.4} iou={:.4} fbw={:.4} sm={:.4} em={:.4} mae={:.4}",
        report.datasets[0].rows.len(),
        m.dice,
        m.iou,
        m.fbw,
        m.sm,
        m.em,
        m.mae
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_ablate(
    ckpt: &Path,
    data_sets: &[String],
    root: Option<PathBuf>,
    datasets: &[String],
    mode: Mode,
    grid: Grid,
    steps_grid: &[usize],
    limit: Option<usize>,
    train_data: Option<PathBuf>,
    out_dir: &Path,
    overrides: &[(String, String)],
) -> CliResult {
    let mut base = checkpoint::load_model(ckpt)?;
    apply_overrides(&mut base.config, overrides)?;
    let size = base.config.image_size;

    let mut eval_sets = Vec::new();
    for spec in data_sets {
        let (name, dir) = split_pair(spec, "--data")?;
        eval_sets.push(EvalSet {
            name,
            samples: load_dir_samples(&dir, size, limit)?,
        });
    }
    if !datasets.is_empty() {
        let root = root
            .or_else(env_root)
            .ok_or_else(|| usage(format!("--datasets needs --root or {DATA_ROOT_ENV}")))?;
        for name in datasets {
            let ds: Dataset = name.parse().map_err(|e: Error| usage(e.to_string()))?;
            let mut records = data::load_dataset(&root, ds)?;
            if let Some(n) = limit {
                records.truncate(n);
            }
            let samples = records
                .iter()
                .map(|r| data::preprocess(r, size))
                .collect::<crate::Result<Vec<_>>>()?;
            eval_sets.push(EvalSet {
                name: ds.name().to_string(),
                samples,
            });
        }
    }
    if eval_sets.is_empty() {
        return Err(usage("ablate needs at least one --data NAME=DIR or --datasets"));
    }

    let mut configs = Vec::new();
    if matches!(grid, Grid::Components | Grid::Both) {
        configs.extend(AblationConfig::components(base.config.n_steps));
    }
    if matches!(grid, Grid::Steps | Grid::Both) {
        configs.extend(AblationConfig::steps(steps_grid));
    }
    let (mode, train_samples) = match mode {
        Mode::Reuse => (AblationMode::Reuse, None),
        Mode::Retrain => {
            let dir = train_data.ok_or_else(|| usage("--mode retrain needs --train-data DIR"))?;
            (AblationMode::Retrain, Some(load_dir_samples(&dir, size, None)?))
        }
    };
    let report = ablate::ablate(
        &base,
        &configs,
        &eval_sets,
        mode,
        train_samples.as_ref().map(|s| s as &dyn SampleSource),
    )?;
    create_dir(out_dir)?;
    report.write_csv(&out_dir.join("ablation.csv"))?;
    report.write_json(&out_dir.join("ablation.json"))?;
    for row in &report.rows {
        let dice: Vec<String> = row
            .results
            .iter()
            .map(|r| format!("{}={:.4}", r.dataset, r.metrics.dice))
            .collect();
        println!("{:<22} N={:<3} mDice {}", row.config.label, row.config.n_steps, dice.join(" "));
    }
    Ok(())
}

fn cmd_viz_steps(image: &Path, ckpt: &Path, steps: Option<usize>, out: &Path, out_dir: &Path) -> CliResult {
    let path = output_path(out_dir, out)?;
    let model = checkpoint::load_model(ckpt)?;
    let n = steps.unwrap_or(model.config.n_steps);
    let (traj, _) = model.trajectory_for_file(image, n)?;
    let layout = viz::emit_step_grid(&traj, &path)?;
    println!("{}: {} panels", path.display(), layout.panels);
    Ok(())
}

fn cmd_viz_compare(image: &Path, gt: &Path, preds: &[String], out: &Path, out_dir: &Path) -> CliResult {
    let path = output_path(out_dir, out)?;
    let rows = preds
        .iter()
        .map(|p| split_pair(p, "--pred"))
        .collect::<CliResult<Vec<_>>>()?;
    let layout = viz::emit_comparison(&rows, gt, image, &path)?;
    for o in &layout.overlays {
        println!(
            "{}: tp={} fp={} fn={}",
            o.name, o.true_positive, o.false_positive, o.false_negative
        );
    }
    println!("{}: {} rows", path.display(), layout.rows);
    Ok(())
}

fn cmd_split(root: Option<PathBuf>, seed: u64, out: &Path, out_dir: &Path) -> CliResult {
    let path = output_path(out_dir, out)?;
    let root = root
        .or_else(env_root)
        .ok_or_else(|| usage(format!("no dataset root: pass --root or set {DATA_ROOT_ENV}")))?;
    let records = data::make_splits(load_benchmarks(&root)?, seed)?;
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    data::write_manifest(&records, &path)?;
    for ds in Dataset::ALL {
        let count = |s: Split| records.iter().filter(|r| r.dataset == ds && r.split == Some(s)).count();
        let (train, seen, unseen) = (count(Split::Train), count(Split::SeenTest), count(Split::UnseenTest));
        if train + seen + unseen > 0 {
            println!("{ds}: train={train} seen_test={seen} unseen_test={unseen}");
        }
    }
    Ok(())
}

fn cmd_grad_check(groups: &[String], tolerance: Option<f64>, eps: Option<f64>, seed: u64) -> CliResult {
    let groups = if groups.is_empty() {
        Group::ALL.to_vec()
    } else {
        groups
            .iter()
            .map(|g| g.parse().map_err(|e: Error| usage(e.to_string())))
            .collect::<CliResult<Vec<_>>>()?
    };
    let mut opts = GradCheckOptions {
        seed,
        ..Default::default()
    };
    if let Some(eps) = eps {
        opts.eps = eps;
    }
    let report = gradcheck::grad_check(&groups, tolerance, &opts)?;
    print!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(Error::Invalid("gradient check failed".into()).into())
    }
}

fn dispatch(command: Command, overrides: &[(String, String)]) -> CliResult {
    let takes_overrides = matches!(command, Command::Train { .. } | Command::Ablate { .. });
    if !takes_overrides {
        if let Some((k, _)) = overrides.first() {
            return Err(usage(format!("--{k} is only accepted by `train` and `ablate`")));
        }
    }
    match command {
        Command::Train {
            config,
            root,
            manifest,
            keep_checkpoints,
            limit,
            out,
        } => cmd_train(config, root, manifest, keep_checkpoints, limit, out.out_dir, overrides),
        Command::Infer {
            image,
            ckpt,
            steps,
            out,
        } => cmd_infer(&image, &ckpt, steps, &out.out_dir),
        Command::Eval {
            preds,
            gts,
            out,
            dataset,
            out_dir,
        } => cmd_eval(&preds, &gts, &out, &dataset, &out_dir.out_dir),
        Command::Ablate {
            ckpt,
            data,
            root,
            datasets,
            mode,
            grid,
            steps_grid,
            limit,
            train_data,
            out,
        } => cmd_ablate(
            &ckpt,
            &data,
            root,
            &datasets,
            mode,
            grid,
            &steps_grid,
            limit,
            train_data,
            &out.out_dir,
            overrides,
        ),
        Command::VizSteps {
            image,
            ckpt,
            steps,
            out,
            out_dir,
        } => cmd_viz_steps(&image, &ckpt, steps, &out, &out_dir.out_dir),
        Command::VizCompare {
            image,
            gt,
            preds,
            out,
            out_dir,
        } => cmd_viz_compare(&image, &gt, &preds, &out, &out_dir.out_dir),
        Command::Split {
            root,
            seed,
            out,
            out_dir,
        } => cmd_split(root, seed, &out, &out_dir.out_dir),
        Command::GradCheck {
            groups,
            tolerance,
            eps,
            seed,
        } => cmd_grad_check(&groups, tolerance, eps, seed),
    }
}

/// Run the CLI on `args` (program name first) and return the exit code:
/// 0 on success, 2 on usage errors, 1 on runtime errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let result = extract_overrides(args).and_then(|(rest, overrides)| {
        let cli = Cli::try_parse_from(rest).map_err(|e| {
            if e.use_stderr() {
                Failure::Usage(e.render().to_string())
            } else {
                print!("{}", e.render());
                Failure::Usage(String::new())
            }
        });
        match cli {
            Ok(cli) => dispatch(cli.command, &overrides),
            Err(Failure::Usage(msg)) if msg.is_empty() => Ok(()),
            Err(e) => Err(e),
        }
    });
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("{}", msg.trim_end());
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}
