//! `crfmc` — matrix completion with unfolded conditional-random-field
//! inference layers: training, evaluation, prediction, the mean-field
//! ablation table, k-NN baselines, similarity export, gradient checking
//! and hyper-parameter sweeps.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};

use crfmc::dataio::{
    load_movielens_triplets, split_dataset, LabelSet, RatingDataset, Splits, TrainIndex,
};
use crfmc::error::{Error, Result};
use crfmc::knn;
use crfmc::meanfield::build_compatibility;
use crfmc::params::{load_checkpoint, save_checkpoint, ParamStore};
use crfmc::predictor::{self, render_eval_report};
use crfmc::trainer::{
    self, ablation_matrix, evaluate_indices, gradcheck_toy, predict_config, train_with_splits,
    write_ablation_report, write_epoch_log, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "crfmc",
    version,
    about = "Matrix completion with unfolded CRF mean-field layers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Increase log verbosity (-v: debug, -vv: trace).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the best-on-validation checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a data split.
    Eval(EvalArgs),
    /// Predict ratings for explicit pairs or the held-out test split.
    Predict(PredictArgs),
    /// Train with and without mean-field layers and tabulate the 2×2
    /// train/test ablation.
    Ablate(AblateArgs),
    /// Sweep k-NN baselines over neighbourhood sizes.
    Knn(KnnArgs),
    /// Export learned user/item similarity tables from a checkpoint.
    ExportSim(ExportSimArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Train across a grid of one hyper-parameter and tabulate accuracy.
    SweepHyper(SweepHyperArgs),
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Ratings file.
    #[arg(long)]
    data: PathBuf,
    /// Input format (only whitespace-separated `user item rating` triplets).
    #[arg(long, default_value = "triplets", value_parser = ["triplets"])]
    format: String,
}

impl DataArgs {
    fn load(&self) -> Result<RatingDataset> {
        load_movielens_triplets(&self.data)
    }
}

/// Config resolution: preset (or built-in default) → `--config` file →
/// individual flags → `--set key=value` pairs.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Per-dataset preset: movielens, flixster, douban, yahoomusic.
    #[arg(long)]
    preset: Option<String>,
    /// Flat key=value config file applied on top of the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Similarity-loss weight.
    #[arg(long)]
    beta: Option<f64>,
    /// Pairwise-potential strength.
    #[arg(long)]
    gamma: Option<f64>,
    /// Mean-field layer count.
    #[arg(long = "T", value_name = "LAYERS")]
    layers: Option<usize>,
    /// Label-compatibility truncation.
    #[arg(long)]
    tau: Option<f64>,
    /// Similarity-target bandwidth σ².
    #[arg(long = "sigma2")]
    sigma_sq: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_rows: Option<usize>,
    #[arg(long)]
    batch_cols: Option<usize>,
    /// Unfold mean-field layers inside the training loss.
    #[arg(long, value_parser = ["on", "off"])]
    mf_train: Option<String>,
    /// Unfold mean-field layers at prediction time.
    #[arg(long, value_parser = ["on", "off"])]
    mf_test: Option<String>,
    /// Test-time chunk height (number or `auto`).
    #[arg(long)]
    chunk_rows: Option<String>,
    /// Test-time chunk width (number or `auto`).
    #[arg(long)]
    chunk_cols: Option<String>,
    /// Chunk partitions averaged at prediction time.
    #[arg(long)]
    repeats: Option<usize>,
    /// Zero wall-clock fields in logs so artifacts are byte-reproducible.
    #[arg(long)]
    deterministic: bool,
    /// Extra key=value override for any config field (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.beta {
            cfg.beta = v;
        }
        if let Some(v) = self.gamma {
            cfg.gamma = v;
        }
        if let Some(v) = self.layers {
            cfg.layers = v;
        }
        if let Some(v) = self.tau {
            cfg.tau = v;
        }
        if let Some(v) = self.sigma_sq {
            cfg.sigma_sq = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.batch_rows {
            cfg.batch_rows = v;
        }
        if let Some(v) = self.batch_cols {
            cfg.batch_cols = v;
        }
        if let Some(v) = &self.mf_train {
            cfg.mf_train = v == "on";
        }
        if let Some(v) = &self.mf_test {
            cfg.mf_test = v == "on";
        }
        if let Some(v) = &self.chunk_rows {
            cfg.apply_kv("chunk_rows", v)?;
        }
        if let Some(v) = &self.chunk_cols {
            cfg.apply_kv("chunk_cols", v)?;
        }
        if let Some(v) = self.repeats {
            cfg.repeats = v;
        }
        if self.deterministic {
            cfg.deterministic = true;
        }
        for pair in &self.set {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{pair}`")))?;
            cfg.apply_kv(key.trim(), value.trim())?;
        }
        Ok(())
    }

    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.preset {
            Some(name) => trainer::preset(name)?,
            None => TrainConfig::default(),
        };
        self.apply(&mut cfg)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Resolution starting from a checkpoint's config echo instead of a
    /// preset.
    fn resolve_over_echo(&self, echo: &str) -> Result<TrainConfig> {
        let mut cfg = match &self.preset {
            Some(name) => trainer::preset(name)?,
            None => {
                let mut c = TrainConfig::default();
                c.apply_text(echo)?;
                c
            }
        };
        self.apply(&mut cfg)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Epoch log CSV path (default: `<out>.log.csv`).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint to evaluate.
    #[arg(long)]
    ckpt: PathBuf,
    /// Which split of the seeded partition to score.
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    split: String,
    /// Report output path (also printed to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    ckpt: PathBuf,
    /// File of `user item` pairs to score (default: the test split).
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Prediction CSV output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Ablation table CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct KnnArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma list of metrics (cosine, msd, pearson, pearson_shrunk) or
    /// `all`; `none` uses only learned tables.
    #[arg(long, default_value = "all")]
    metric: String,
    /// Neighbourhood side: user or item.
    #[arg(long, default_value = "user", value_parser = ["user", "item"])]
    mode: String,
    /// Comma list of neighbourhood sizes.
    #[arg(long = "k", default_value = "10,20,30,50,100,200,300")]
    ks: String,
    /// Pearson shrinkage strength.
    #[arg(long, default_value_t = knn::DEFAULT_SHRINKAGE)]
    shrinkage: f64,
    /// Checkpoint providing a learned similarity table.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Exported similarity file providing a learned table.
    #[arg(long)]
    sim_file: Option<PathBuf>,
    /// Sweep CSV output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportSimArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    ckpt: PathBuf,
    /// Which tables to export.
    #[arg(long, default_value = "both", value_parser = ["user", "item", "both"])]
    mode: String,
    /// Output path; `both` writes `<out>.user.txt` and `<out>.item.txt`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Check the built-in toy problem (5×6 matrix, hidden [8,4], T=3).
    #[arg(long)]
    toy: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-4)]
    h: f64,
    /// Maximum acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Args)]
struct SweepHyperArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Hyper-parameter to sweep.
    #[arg(long, value_parser = ["beta", "gamma", "layers"])]
    param: String,
    /// Comma list of values to train at.
    #[arg(long)]
    values: String,
    /// Sweep CSV output path.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Predict(args) => run_predict(args),
        Command::Ablate(args) => run_ablate(args),
        Command::Knn(args) => run_knn(args),
        Command::ExportSim(args) => run_export_sim(args),
        Command::Gradcheck(args) => run_gradcheck(args),
        Command::SweepHyper(args) => run_sweep_hyper(args),
    }
}

fn splits_for(ds: &RatingDataset, cfg: &TrainConfig) -> Result<Splits> {
    split_dataset(ds, (cfg.train_frac, cfg.val_frac, cfg.test_frac), cfg.seed)
}

fn run_train(args: TrainArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let ds = args.data.load()?;
    let splits = splits_for(&ds, &cfg)?;
    let outcome = train_with_splits(&ds, &cfg, &splits)?;
    save_checkpoint(&args.out, &outcome.best_store, Some(&outcome.best_adam), &outcome.config_echo)?;
    let log_path = args
        .log
        .unwrap_or_else(|| PathBuf::from(format!("{}.log.csv", args.out.display())));
    write_epoch_log(&log_path, &outcome.logs)?;
    match outcome.best_val_rmse {
        Some(rmse) => println!(
            "trained {} epochs ({} steps); best validation rmse {rmse:.6} at epoch {}",
            cfg.epochs, outcome.steps, outcome.best_epoch
        ),
        None => println!(
            "trained {} epochs ({} steps); no validation split, kept final parameters",
            cfg.epochs, outcome.steps
        ),
    }
    println!("checkpoint: {}", args.out.display());
    println!("epoch log: {}", log_path.display());
    Ok(())
}

fn load_model(ckpt: &Path, config: &ConfigArgs) -> Result<(ParamStore, TrainConfig)> {
    let (store, _, echo) = load_checkpoint(ckpt)?;
    let cfg = config.resolve_over_echo(&echo)?;
    Ok((store, cfg))
}

fn split_indices<'s>(splits: &'s Splits, which: &str) -> &'s [usize] {
    match which {
        "train" => &splits.train,
        "val" => &splits.val,
        _ => &splits.test,
    }
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let (store, cfg) = load_model(&args.ckpt, &args.config)?;
    let ds = args.data.load()?;
    let splits = splits_for(&ds, &cfg)?;
    let indices = split_indices(&splits, &args.split);
    let index = TrainIndex::build(&ds, &splits.train)?;
    let report = evaluate_indices(&ds, &cfg, &store, &index, indices, cfg.mf_test)?;
    let rendered = render_eval_report(&report, &cfg.to_kv_string());
    print!("{rendered}");
    if let Some(out) = &args.out {
        std::fs::write(out, &rendered)?;
    }
    Ok(())
}

fn parse_pairs(path: &Path) -> Result<Vec<(usize, usize)>> {
    let text = std::fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim().replace(',', " ");
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let parse = |tok: Option<&str>| -> Result<usize> {
            tok.ok_or(())
                .and_then(|t| t.parse().map_err(|_| ()))
                .map_err(|_| Error::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    msg: "expected `user item`".into(),
                })
        };
        let u = parse(it.next())?;
        let i = parse(it.next())?;
        pairs.push((u, i));
    }
    if pairs.is_empty() {
        return Err(Error::Domain(format!("no query pairs in {}", path.display())));
    }
    Ok(pairs)
}

fn run_predict(args: PredictArgs) -> Result<()> {
    let (store, cfg) = load_model(&args.ckpt, &args.config)?;
    let ds = args.data.load()?;
    let splits = splits_for(&ds, &cfg)?;
    let index = TrainIndex::build(&ds, &splits.train)?;
    let queries = match &args.pairs {
        Some(path) => parse_pairs(path)?,
        None => splits.test.iter().map(|&i| (ds.ratings[i].user, ds.ratings[i].item)).collect(),
    };
    let labels = LabelSet::new(cfg.labels.clone())?;
    let compat = build_compatibility(&labels, cfg.tau)?;
    let pcfg = predict_config(&cfg, ds.n_users, ds.n_items, cfg.mf_test);
    let preds = predictor::predict(&store, &cfg.net_config(), &labels, &compat, &index, &queries, &pcfg)?;
    predictor::write_predictions(&args.out, &queries, &preds)?;
    println!("wrote {} predictions to {}", preds.len(), args.out.display());
    Ok(())
}

fn run_ablate(args: AblateArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let ds = args.data.load()?;
    let report = ablation_matrix(&ds, &cfg)?;
    println!("train_mf,test_mf,rmse,mae");
    for (train, test, cell) in report.cells() {
        println!("{train},{test},{:.6},{:.6}", cell.rmse, cell.mae);
    }
    if let Some(out) = &args.out {
        write_ablation_report(out, &report)?;
    }
    Ok(())
}

fn parse_ks(raw: &str) -> Result<Vec<usize>> {
    let ks: Vec<usize> = raw
        .split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid neighbourhood size `{t}`")))
        })
        .collect::<Result<_>>()?;
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("neighbourhood sizes must be positive".into()));
    }
    Ok(ks)
}

fn run_knn(args: KnnArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let ds = args.data.load()?;
    let splits = splits_for(&ds, &cfg)?;
    let index = TrainIndex::build(&ds, &splits.train)?;
    let labels = LabelSet::new(cfg.labels.clone())?;
    let mode = knn::Mode::parse(&args.mode)?;
    let ks = parse_ks(&args.ks)?;

    let metrics: Vec<knn::Metric> = match args.metric.as_str() {
        "all" => knn::Metric::ALL.to_vec(),
        "none" => Vec::new(),
        list => list.split(',').map(|m| knn::Metric::parse(m.trim())).collect::<Result<_>>()?,
    };
    let mut tables = Vec::new();
    for metric in metrics {
        log::info!("computing {} table ({})", metric.name(), mode.name());
        tables.push(knn::compute_metric(&index, mode, metric, args.shrinkage)?);
    }
    if let Some(ckpt) = &args.ckpt {
        let (store, model_cfg) = load_model(ckpt, &args.config)?;
        tables.push(knn::import_learned(&store, &model_cfg.net_config(), &index, mode)?);
    }
    if let Some(path) = &args.sim_file {
        tables.push(knn::import_learned_file(path, mode)?);
    }
    if tables.is_empty() {
        return Err(Error::Config(
            "nothing to sweep: no metrics selected and no learned table given".into(),
        ));
    }

    let targets: Vec<(usize, usize, f64)> = splits
        .test
        .iter()
        .map(|&i| {
            let r = &ds.ratings[i];
            (r.user, r.item, r.value)
        })
        .collect();
    let rows = knn::sweep(&tables, &index, &labels, &targets, &ks)?;
    println!("source,mode,k,rmse,mae");
    for r in &rows {
        println!("{},{},{},{:.6},{:.6}", r.source, r.mode, r.k, r.rmse, r.mae);
    }
    knn::write_sweep_csv(&args.out, &rows)?;
    Ok(())
}

fn run_export_sim(args: ExportSimArgs) -> Result<()> {
    let (store, cfg) = load_model(&args.ckpt, &args.config)?;
    let ds = args.data.load()?;
    let splits = splits_for(&ds, &cfg)?;
    let index = TrainIndex::build(&ds, &splits.train)?;
    let net = cfg.net_config();
    let jobs: &[knn::Mode] = match args.mode.as_str() {
        "user" => &[knn::Mode::User],
        "item" => &[knn::Mode::Item],
        _ => &[knn::Mode::User, knn::Mode::Item],
    };
    for &mode in jobs {
        let table = knn::import_learned(&store, &net, &index, mode)?;
        let path = if jobs.len() == 1 {
            args.out.clone()
        } else {
            PathBuf::from(format!("{}.{}.txt", args.out.display(), mode.name()))
        };
        crfmc::basenet::export_similarity(&path, &table.sim)?;
        println!("wrote {} similarity table to {}", mode.name(), path.display());
    }
    Ok(())
}

fn run_gradcheck(args: GradcheckArgs) -> Result<()> {
    if !args.toy {
        return Err(Error::Config("only --toy gradient checking is available".into()));
    }
    let report = gradcheck_toy(args.seed, args.h, 1e-6)?;
    println!(
        "checked {} scalars: max relative error {:.3e} at {}[{}]",
        report.checked, report.max_rel_err, report.worst_param, report.worst_index
    );
    if report.max_rel_err > args.tol {
        return Err(Error::Domain(format!(
            "gradient check failed: {:.3e} exceeds tolerance {:.1e}",
            report.max_rel_err, args.tol
        )));
    }
    println!("gradient check passed (tolerance {:.1e})", args.tol);
    Ok(())
}

fn run_sweep_hyper(args: SweepHyperArgs) -> Result<()> {
    let base = args.config.resolve()?;
    let ds = args.data.load()?;
    let splits = splits_for(&ds, &base)?;
    let index = TrainIndex::build(&ds, &splits.train)?;
    let values: Vec<&str> = args.values.split(',').map(str::trim).collect();
    if values.is_empty() {
        return Err(Error::Config("--values must list at least one setting".into()));
    }
    let mut out = String::from("param,value,rmse,mae\n");
    println!("param,value,rmse,mae");
    for value in values {
        let mut cfg = base.clone();
        cfg.apply_kv(&args.param, value)?;
        cfg.validate()?;
        log::info!("training {}={value}", args.param);
        let outcome = train_with_splits(&ds, &cfg, &splits)?;
        let report = evaluate_indices(&ds, &cfg, &outcome.best_store, &index, &splits.test, cfg.mf_test)?;
        println!("{},{value},{:.6},{:.6}", args.param, report.rmse, report.mae);
        out.push_str(&format!("{},{value},{},{}\n", args.param, report.rmse, report.mae));
    }
    std::fs::write(&args.out, out)?;
    Ok(())
}
