use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use ptn::datasets::{generate, DatasetName, DatasetSpec, Mnist};
use ptn::equivariance::{check_model_equivariance, gaussian_blur, library_checks, ModelChecks, Report, Tolerances};
use ptn::network::Model;
use ptn::trainer::{ablate, evaluate, mean_origin_error, train, Ablation, Splits, TrainConfig};
use ptn::verification::gradcheck_suite;
use ptn::{Error, Result, Tensor};

use crate::{Cli, Command, Global};

#[derive(Debug, Args)]
pub struct GenData {
    /// Dataset preset: rotmnist, mnist-r, mnist-rts or sim2mnist
    #[arg(long, default_value = "sim2mnist")]
    pub spec: String,
    /// Training items [default: the preset's]
    #[arg(long)]
    pub train: Option<usize>,
    /// Validation items [default: the preset's]
    #[arg(long)]
    pub val: Option<usize>,
    /// Test items [default: the preset's]
    #[arg(long)]
    pub test: Option<usize>,
}

#[derive(Debug, Args)]
pub struct Train {
    /// Config overrides as dotted key=value pairs, e.g. network.variant=ccnn-s
    #[arg(value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct Eval {
    /// Checkpoint to evaluate
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Rotations summed at test time [default: the config's, 1]
    #[arg(long)]
    pub tta: Option<usize>,
    /// Config overrides as dotted key=value pairs
    #[arg(value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct Gradcheck {}

#[derive(Debug, Args)]
pub struct Equivariance {
    /// Trained checkpoint for the model checks [default: none, library checks only]
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Test images used by the model checks
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    /// Image side of the library checks without a checkpoint
    #[arg(long, default_value_t = 28)]
    pub size: usize,
    /// Config overrides as dotted key=value pairs
    #[arg(value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct Ablate {
    /// Comma-separated training seeds
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    /// Epochs per run
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    /// Config overrides as dotted key=value pairs
    #[arg(value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Argument(_) | Error::Format { .. } | Error::Line { .. } | Error::Generation(_) => 1,
        Error::Shape(_) | Error::Divergence { .. } | Error::Io { .. } => 2,
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Creates a fresh run directory, refusing to reuse an existing one.
fn run_dir(g: &Global, command: &str, seed: u64) -> Result<PathBuf> {
    let dir = match &g.run_dir {
        Some(d) => d.clone(),
        None => {
            let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
            g.out.join(format!("{stamp}-{command}-seed{seed}"))
        }
    };
    if dir.exists() {
        return Err(Error::Config(format!("run directory {} already exists", dir.display())));
    }
    fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    log::info!("run directory {}", dir.display());
    Ok(dir)
}

/// Config file (or defaults) plus overrides and flags, with the data source
/// defaulting to rotated MNIST generated from `<data-dir>/mnist`.
fn resolve_config(g: &Global, file: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let text = match file {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        })?,
        None => String::new(),
    };
    let mut cfg = TrainConfig::from_toml(&text, overrides)?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(t) = g.threads {
        cfg.threads = t;
    }
    if cfg.data.mnist_dir.is_none() {
        cfg.data.mnist_dir = Some(g.data_dir.join("mnist"));
    }
    if cfg.data.dir.is_none() && cfg.data.generate.is_none() {
        cfg.data.generate = Some(DatasetSpec::preset(DatasetName::Rotmnist, 0));
    }
    cfg.validate()?;
    log::info!("resolved config:\n{}", cfg.to_toml());
    Ok(cfg)
}

pub fn dispatch(cli: &Cli) -> Result<u8> {
    let g = &cli.global;
    if let Some(t) = g.threads {
        if t == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        ptn::parallel::set_threads(t);
    }
    match &cli.command {
        Command::GenData(c) => gen_data(g, c),
        Command::Train(c) => train_cmd(g, c),
        Command::Eval(c) => eval_cmd(g, c),
        Command::Gradcheck(_) => gradcheck_cmd(g),
        Command::Equivariance(c) => equivariance_cmd(g, c),
        Command::Ablate(c) => ablate_cmd(g, c),
    }
}

fn gen_data(g: &Global, c: &GenData) -> Result<u8> {
    let seed = g.seed.unwrap_or(0);
    let mut spec = DatasetSpec::preset(DatasetName::parse(&c.spec)?, seed);
    spec.train = c.train.unwrap_or(spec.train);
    spec.val = c.val.unwrap_or(spec.val);
    spec.test = c.test.unwrap_or(spec.test);
    spec.validate()?;
    log::info!("resolved spec:\n{}", toml::to_string(&spec).expect("spec serializes"));
    let mnist = Mnist::load(&g.data_dir.join("mnist"))?;
    let dir = run_dir(g, "gen-data", seed)?;
    let data = generate(&spec, &mnist.digits)?;
    data.save(&dir)?;
    println!("{}", dir.display());
    Ok(0)
}

fn train_cmd(g: &Global, c: &Train) -> Result<u8> {
    let cfg = resolve_config(g, g.config.as_deref(), &c.overrides)?;
    let data = Splits::resolve(&cfg.data)?;
    let dir = run_dir(g, "train", cfg.seed)?;
    let out = train(&cfg, &data, Some(&dir))?;
    let tta = cfg.network.augmentation.test_time_rotations;
    let test = evaluate(&out.best, &data.test, tta, cfg.eval_batch_size)?;
    write(
        &dir.join("summary.csv"),
        &format!(
            "best_epoch,best_val_err,test_err\n{},{},{}\n",
            out.best_epoch, out.best_val_err, test.error_pct
        ),
    )?;
    println!(
        "best epoch {} val error {:.2}% test error {:.2}% -> {}",
        out.best_epoch,
        out.best_val_err,
        test.error_pct,
        dir.display()
    );
    Ok(0)
}

/// Config for a checkpoint: `--config`, else `config.toml` next to it.
fn checkpoint_config(g: &Global, ckpt: &Path, overrides: &[String]) -> Result<TrainConfig> {
    let file = match &g.config {
        Some(p) => p.clone(),
        None => ckpt.parent().unwrap_or(Path::new(".")).join("config.toml"),
    };
    resolve_config(g, Some(&file), overrides)
}

fn eval_cmd(g: &Global, c: &Eval) -> Result<u8> {
    let cfg = checkpoint_config(g, &c.ckpt, &c.overrides)?;
    let model = Model::<f32>::load(cfg.network.clone(), &c.ckpt)?;
    let data = Splits::resolve(&cfg.data)?;
    let tta = c.tta.unwrap_or(cfg.network.augmentation.test_time_rotations);
    let dir = run_dir(g, "eval", cfg.seed)?;
    let e = evaluate(&model, &data.test, tta, cfg.eval_batch_size)?;
    let origin = mean_origin_error(&model, &data.test, cfg.eval_batch_size)?;
    write(
        &dir.join("eval.csv"),
        &format!(
            "checkpoint,n,tta,error_pct,origin_error\n{},{},{tta},{},{}\n",
            c.ckpt.display(),
            data.test.len(),
            e.error_pct,
            origin.map_or(String::new(), |o| o.to_string())
        ),
    )?;
    let k = cfg.network.num_classes;
    let mut confusion = String::from("true");
    for p in 0..k {
        let _ = write!(confusion, ",pred{p}");
    }
    confusion.push('\n');
    for (t, row) in e.confusion.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(confusion, "{t},{}", cells.join(","));
    }
    write(&dir.join("confusion.csv"), &confusion)?;
    println!(
        "test error {:.2}% ({} images, {tta} rotations)",
        e.error_pct,
        data.test.len()
    );
    Ok(0)
}

fn gradcheck_cmd(g: &Global) -> Result<u8> {
    let results = gradcheck_suite(g.seed.unwrap_or(0))?;
    println!("{:<36} {:>14} {:>10}  result", "op", "max rel error", "tolerance");
    for r in &results {
        println!(
            "{:<36} {:>14.3e} {:>10.0e}  {}",
            r.op,
            r.max_rel_error,
            r.tolerance,
            if r.pass() { "ok" } else { "FAIL" }
        );
    }
    Ok(if results.iter().all(|r| r.pass()) { 0 } else { 1 })
}

fn equivariance_cmd(g: &Global, c: &Equivariance) -> Result<u8> {
    let seed = g.seed.unwrap_or(0);
    match &c.ckpt {
        None => {
            let dir = run_dir(g, "equivariance", seed)?;
            let report = library_checks(seed, c.size, &[], Tolerances::default())?;
            finish_report(&dir, &report)
        }
        Some(ckpt) => {
            let cfg = checkpoint_config(g, ckpt, &c.overrides)?;
            let model = Model::<f32>::load(cfg.network.clone(), ckpt)?;
            let data = Splits::resolve(&cfg.data)?;
            let dir = run_dir(g, "equivariance", seed)?;
            let n = c.samples.min(data.test.len());
            let indices: Vec<usize> = (0..n).collect();
            let digits: Vec<Tensor<f64>> = indices
                .iter()
                .take(5)
                .map(|&i| gaussian_blur(&data.test.batch::<f64>(&[i]), 1.0))
                .collect::<Result<_>>()?;
            let mut report = library_checks(seed, cfg.network.input_size, &digits, Tolerances::default())?;
            let images = data.test.batch::<f32>(&indices);
            report.extend(check_model_equivariance(&model, &images, &ModelChecks::default())?);
            finish_report(&dir, &report)
        }
    }
}

fn finish_report(dir: &Path, report: &Report) -> Result<u8> {
    write(&dir.join("equivariance.csv"), &report.to_csv()?)?;
    print!("{}", report.summary());
    Ok(if report.all_pass() { 0 } else { 1 })
}

fn ablate_cmd(g: &Global, c: &Ablate) -> Result<u8> {
    if c.seeds.is_empty() {
        return Err(Error::Config("--seeds must name at least one seed".into()));
    }
    let mut cfg = resolve_config(g, g.config.as_deref(), &c.overrides)?;
    cfg.epochs = c.epochs;
    let data = Splits::resolve(&cfg.data)?;
    let dir = run_dir(g, "ablate", c.seeds[0])?;
    write(&dir.join("config.toml"), &cfg.to_toml())?;
    let rows = ablate(&cfg, &data, &c.seeds, Some(&dir))?;
    let mut csv = String::from("ablation,mean_err,std_err");
    for s in &c.seeds {
        let _ = write!(csv, ",seed{s}");
    }
    csv.push('\n');
    for r in &rows {
        let errs: Vec<String> = r.errors.iter().map(|e| e.to_string()).collect();
        let _ = writeln!(csv, "{},{},{},{}", r.ablation.name(), r.mean(), r.std(), errs.join(","));
        println!("{:<16} {:.2} +- {:.2}", r.ablation.name(), r.mean(), r.std());
    }
    write(&dir.join("ablation.csv"), &csv)?;
    let full = rows.iter().find(|r| r.ablation == Ablation::Full).map(|r| r.mean());
    if let Some(full) = full {
        let worse = rows
            .iter()
            .filter(|r| r.ablation != Ablation::Full && r.mean() < full)
            .count();
        println!("full configuration beaten by {worse} of {} ablations", rows.len() - 1);
    }
    Ok(0)
}
