mod report;
mod svg;

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use evi::checkpoint;
use evi::data::{
    calibrate_shifts, load_log_inferred, split, write_log, Dataset, SyntheticConfig, SyntheticWorld,
};
use evi::trainer::{
    evaluate, run_ablation, run_bias_study, run_multi_seed, run_sweep, EpochLog, Method,
    MultiSeedReport, RunCache, StudyDataset, TrainConfig, TrainError, TrainOutcome,
};

use report::{Format, ABLATION_FILE, BIAS_FILE, REPORT_FILE, SWEEP_FILE};

/// Entire-space CVR estimation experiments on synthetic or logged impressions.
#[derive(Parser)]
#[command(name = "evi", version)]
struct Cli {
    /// Only machine-readable payloads on stdout; logs limited to errors on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic impression log with oracle labels.
    GenData(GenDataArgs),
    /// Train one method for one or more seeds and write run directories.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset; prints metrics JSON.
    Eval(EvalArgs),
    /// Ablation table: EVI w/o VIE and CECT, EVI w/o VIE, EVI.
    Ablation(StudyArgs),
    /// Teacher non-click log loss and student mean bias study.
    BiasStudy(StudyArgs),
    /// EVI AUC over VIE ratios and transfer layer counts.
    Sweep(SweepArgs),
    /// Aggregate run artifacts into CSV, JSON or SVG.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Number of impressions.
    #[arg(long, default_value_t = 100_000)]
    n: usize,
    /// World and sampling seed.
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    /// Target click rate; recalibrates the click logit shift.
    #[arg(long)]
    ctr: Option<f64>,
    /// Target conversion rate given click; recalibrates the conversion logit shift.
    #[arg(long)]
    cvr: Option<f64>,
    /// Strength of the latent factors shared by click and conversion.
    #[arg(long, default_value_t = 1.2)]
    confounding: f64,
    /// Also write an independent log from the same world to this path.
    #[arg(long)]
    holdout_out: Option<PathBuf>,
    /// Impressions in the holdout log.
    #[arg(long, default_value_t = 100_000)]
    holdout_n: usize,
}

/// Training configuration: desk defaults, then preset, then config file,
/// then explicit flags.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// Loss trade-off preset: ali-ccp or aliexpress.
    #[arg(long)]
    preset: Option<String>,
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable), e.g. --set lambda_i=0.1.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Number of epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Mini-batch size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Training log (CSV).
    #[arg(long)]
    data: PathBuf,
    /// Evaluation log; without it 20% of --data is held out.
    #[arg(long)]
    eval: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Method: evi, evi-no-vie, evi-no-vie-cect, naive, esmm, ipw, dr, ddpo, entire-distill.
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    /// Single seed.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seeds; one run directory each plus an aggregate.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Log to evaluate on.
    #[arg(long)]
    data: PathBuf,
    /// Dataset name in the report; defaults to the name recorded at training time.
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args)]
struct StudyArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    seeds: Vec<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    study: StudyArgs,
    /// Comma-separated VIE ratios.
    #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.4,0.6,0.8,1")]
    ratios: Vec<f64>,
    /// Comma-separated transfer layer counts (1 to 3).
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    layers: Vec<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories or artifact files to aggregate.
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Output format.
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: TrainError| e.to_string())
}

/// Bad input that the user can fix: exits with status 2.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablation(a) => ablation(a),
        Command::BiasStudy(a) => bias_study(a),
        Command::Sweep(a) => sweep(a),
        Command::Report(a) => report_cmd(a),
    }
}

fn print_json(v: &impl Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let body = serde_json::to_string_pretty(v)? + "\n";
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct DataSummary {
    path: String,
    records: usize,
    click_rate: f64,
    conversion_rate_given_click: f64,
    mnar_gap: Option<f64>,
}

impl DataSummary {
    fn of(path: &Path, d: &Dataset) -> Self {
        DataSummary {
            path: path.display().to_string(),
            records: d.len(),
            click_rate: d.click_rate(),
            conversion_rate_given_click: d.conversion_rate_given_click(),
            mnar_gap: d.mnar_gap(),
        }
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    for (name, v) in [("ctr", a.ctr), ("cvr", a.cvr)] {
        if let Some(v) = v {
            if !(v > 0.0 && v < 1.0) {
                return Err(usage(format!(
                    "--{name} must lie strictly between 0 and 1, got {v}"
                )));
            }
        }
    }
    if a.n == 0 {
        return Err(usage("--n must be positive"));
    }
    let mut cfg = SyntheticConfig {
        n_records: a.n,
        seed: a.seed,
        confounder_strength_ctr: a.confounding,
        confounder_strength_cvr: a.confounding,
        ..SyntheticConfig::default()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    if a.ctr.is_some() || a.cvr.is_some() {
        let ctr = a.ctr.unwrap_or(0.04);
        let cvr = a.cvr.unwrap_or(0.02);
        let (s_ctr, s_cvr) = calibrate_shifts(&cfg, ctr, cvr)?;
        if a.ctr.is_some() {
            cfg.base_ctr_logit_shift = s_ctr;
        }
        if a.cvr.is_some() {
            cfg.base_cvr_logit_shift = s_cvr;
        }
        log::info!("logit shifts: click {s_ctr:.4}, conversion {s_cvr:.4}");
    }
    let world = SyntheticWorld::new(&cfg)?;
    let d = world.sample(cfg.n_records, 1)?;
    check_rates(&d)?;
    write_log(&d, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let mut summaries = vec![DataSummary::of(&a.out, &d)];
    if let Some(path) = &a.holdout_out {
        let h = world.sample(a.holdout_n, 2)?;
        write_log(&h, path).with_context(|| format!("writing {}", path.display()))?;
        summaries.push(DataSummary::of(path, &h));
    }
    print_json(&summaries)
}

fn check_rates(d: &Dataset) -> Result<()> {
    let clicks = d.records().iter().filter(|r| r.click).count();
    let convs = d.records().iter().filter(|r| r.conversion).count();
    if clicks == 0 || clicks == d.len() || convs == 0 {
        anyhow::bail!(
            "degenerate log: {clicks} clicks and {convs} conversions in {} impressions",
            d.len()
        );
    }
    Ok(())
}

fn load(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        return Err(usage(format!("no such file: {}", path.display())));
    }
    load_log_inferred(path).with_context(|| format!("loading {}", path.display()))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("data")
        .to_string()
}

/// Training and evaluation logs, plus the evaluation name.
struct Loaded {
    train: Dataset,
    eval: Dataset,
    eval_name: String,
}

fn load_pair(a: &DataArgs) -> Result<Loaded> {
    let full = load(&a.data)?;
    Ok(match &a.eval {
        Some(p) => {
            let eval = load(p)?;
            if eval.schema() != full.schema() {
                return Err(usage("--data and --eval have different field schemas"));
            }
            Loaded {
                train: full,
                eval,
                eval_name: stem(p),
            }
        }
        None => {
            let (train, eval) = split(&full, 0.8, 0)?;
            Loaded {
                train,
                eval,
                eval_name: format!("{}-holdout", stem(&a.data)),
            }
        }
    })
}

fn build_config(a: &ConfigArgs, method: Option<Method>) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::desk();
    if let Some(p) = &a.preset {
        cfg = cfg.with_preset(p).map_err(|e| usage(e.to_string()))?;
    }
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path)
            .map_err(|e| usage(format!("reading {}: {e}", path.display())))?;
        cfg = cfg.apply_kv(&text).map_err(|e| usage(e.to_string()))?;
    }
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v).map_err(|e| usage(e.to_string()))?;
    }
    if let Some(m) = method {
        cfg.method = m;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.adam.learning_rate = lr;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn history_csv(history: &[EpochLog]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from(
        "epoch,batches,loss_total,loss_ctr,loss_cvr_teacher,loss_cvr,loss_vie,loss_ctcvr,\
         loss_imputation,teacherless_batches,auc,nll,mean_bias,teacher_nonclick_logloss,ctr_auc\n",
    );
    for h in history {
        let m = h.metrics.as_ref();
        let cols = [
            h.epoch.to_string(),
            h.batches.to_string(),
            h.loss_total.to_string(),
            opt(h.loss_ctr),
            opt(h.loss_cvr_teacher),
            opt(h.loss_cvr),
            opt(h.loss_vie),
            opt(h.loss_ctcvr),
            opt(h.loss_imputation),
            h.teacherless_batches.to_string(),
            opt(m.map(|m| m.auc)),
            opt(m.map(|m| m.nll)),
            opt(m.map(|m| m.mean_bias)),
            opt(m.and_then(|m| m.teacher_nonclick_logloss)),
            opt(m.and_then(|m| m.ctr_auc)),
        ];
        s.push_str(&cols.join(","));
        s.push('\n');
    }
    s
}

fn write_run(dir: &Path, cfg: &TrainConfig, outcome: &TrainOutcome, eval_name: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.txt"), cfg.to_kv())?;
    fs::write(dir.join("history.csv"), history_csv(&outcome.history))?;
    if let Some(r) = outcome.final_report() {
        write_json(&dir.join(REPORT_FILE), r)?;
    }
    let epoch = outcome.history.last().map_or(0, |h| h.epoch);
    let notes = vec![
        ("method".to_string(), cfg.method.name().to_string()),
        ("seed".to_string(), cfg.seed.to_string()),
        ("epoch".to_string(), epoch.to_string()),
        ("dataset".to_string(), eval_name.to_string()),
    ];
    checkpoint::save(&dir.join("checkpoint.bin"), &outcome.model, &notes)?;
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = build_config(&a.config, a.method)?;
    let seeds = match (a.seed, a.seeds.is_empty()) {
        (Some(s), _) => vec![s],
        (None, true) => vec![cfg.seed],
        (None, false) => a.seeds.clone(),
    };
    let l = load_pair(&a.data)?;
    let single = seeds.len() == 1 && a.seeds.len() <= 1;
    if single {
        cfg.seed = seeds[0];
    }
    let out = a.out.clone();
    let eval_name = l.eval_name.clone();
    let agg = run_multi_seed(
        &l.train,
        (&l.eval_name, &l.eval),
        &cfg,
        &seeds,
        |c, outcome| {
            let dir = if single {
                out.clone()
            } else {
                out.join(format!("seed-{}", c.seed))
            };
            write_run(&dir, c, outcome, &eval_name)
                .map_err(|e| TrainError::Config(format!("{e:#}")))
        },
    )?;
    if !single {
        write_json(&out.join("aggregate.json"), &agg)?;
    }
    print_json(&summary_of(&agg))
}

#[derive(Serialize)]
struct RunSummary<'a> {
    method: &'a str,
    dataset: &'a str,
    seeds: Vec<u64>,
    auc: f64,
    nll: f64,
    mean_bias: f64,
}

fn summary_of(r: &MultiSeedReport) -> RunSummary<'_> {
    RunSummary {
        method: &r.method,
        dataset: &r.dataset,
        seeds: r.runs.iter().map(|m| m.seed).collect(),
        auc: r.auc.mean,
        nll: r.nll.mean,
        mean_bias: r.mean_bias.mean,
    }
}

fn note<'a>(notes: &'a [(String, String)], key: &str) -> Option<&'a str> {
    notes
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
}

fn eval(a: EvalArgs) -> Result<()> {
    if !a.checkpoint.exists() {
        return Err(usage(format!(
            "no such checkpoint: {}",
            a.checkpoint.display()
        )));
    }
    let ckpt = checkpoint::load(&a.checkpoint)
        .with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let d = load(&a.data)?;
    let name = a
        .name
        .clone()
        .or_else(|| note(&ckpt.notes, "dataset").map(str::to_string))
        .unwrap_or_else(|| stem(&a.data));
    let method = note(&ckpt.notes, "method").unwrap_or("unknown");
    let seed = note(&ckpt.notes, "seed")
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let epoch = note(&ckpt.notes, "epoch")
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let report = evaluate(&ckpt.model, &d, method, &name, seed, epoch).map_err(|e| match e {
        TrainError::SchemaMismatch => usage("dataset schema does not match the checkpoint"),
        other => other.into(),
    })?;
    print_json(&report)
}

fn study_setup(a: &StudyArgs) -> Result<(Loaded, TrainConfig)> {
    if a.seeds.is_empty() {
        return Err(usage("--seeds must name at least one seed"));
    }
    let cfg = build_config(&a.config, None)?;
    let l = load_pair(&a.data)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join("config.txt"), cfg.to_kv())?;
    Ok((l, cfg))
}

fn study_dataset(l: &Loaded) -> StudyDataset<'_> {
    StudyDataset {
        name: &l.eval_name,
        train: &l.train,
        eval: &l.eval,
    }
}

fn ablation(a: StudyArgs) -> Result<()> {
    let (l, cfg) = study_setup(&a)?;
    let table = run_ablation(&[study_dataset(&l)], &cfg, &a.seeds, &mut RunCache::new())?;
    write_json(&a.out.join(ABLATION_FILE), &table)?;
    print_json(&table)
}

fn bias_study(a: StudyArgs) -> Result<()> {
    let (l, cfg) = study_setup(&a)?;
    if !l.eval.has_oracle() {
        return Err(usage(
            "the bias study needs an evaluation log with oracle columns",
        ));
    }
    let study = run_bias_study(study_dataset(&l), &cfg, &a.seeds, &mut RunCache::new())?;
    write_json(&a.out.join(BIAS_FILE), &study)?;
    print_json(&study)
}

fn sweep(a: SweepArgs) -> Result<()> {
    if let Some(k) = a.layers.iter().find(|k| !(1..=3).contains(*k)) {
        return Err(usage(format!("--layers values must be 1, 2 or 3, got {k}")));
    }
    if a.ratios.is_empty() || a.layers.is_empty() {
        return Err(usage("--ratios and --layers must be non-empty"));
    }
    let (l, cfg) = study_setup(&a.study)?;
    let grid = run_sweep(
        study_dataset(&l),
        &cfg,
        &a.ratios,
        &a.layers,
        &a.study.seeds,
        &mut RunCache::new(),
    )?;
    write_json(&a.study.out.join(SWEEP_FILE), &grid)?;
    print_json(&grid)
}

fn report_cmd(a: ReportArgs) -> Result<()> {
    for r in &a.runs {
        if !r.exists() {
            return Err(usage(format!("no such run path: {}", r.display())));
        }
    }
    let c = report::collect(&a.runs)?;
    if c.is_empty() {
        return Err(usage("no run artifacts found"));
    }
    let written = report::emit(&c, &a.out, a.format)?;
    let names: Vec<String> = written.iter().map(|p| p.display().to_string()).collect();
    print_json(&names)
}
