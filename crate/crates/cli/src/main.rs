//! `cnf-audit` command-line front end.
//!
//! Exit codes: 0 success or property holds, 1 property fails or no feasible
//! configuration, 2 any error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cnf_audit::bound::{self, verify_chain};
use cnf_audit::data::{self, SplitTag, SyntheticTask};
use cnf_audit::distill::{self, DistillConfig};
use cnf_audit::loss::{paired_loss, Reduction};
use cnf_audit::metrics::{self, AuditOptions, BotPolicy, ConfidenceReport};
use cnf_audit::mlp::{parse_dims, MlpModel};
use cnf_audit::tuner::{self, TuneGrid, TuneOptions};

#[derive(Parser)]
#[command(
    name = "cnf-audit",
    version,
    about = "Confidence-preservation audit for distilled classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute sigma, accuracy and ECE for a paired-logits file and decide
    /// whether sigma <= kappa.
    Audit(AuditArgs),
    /// Export confidence and pairwise-difference histograms as CSV.
    Histogram(HistogramArgs),
    /// Check the inequality chain bounding sigma by the distillation loss.
    Bound(BoundArgs),
    /// Generate a synthetic 2-D classification dataset.
    GenData(GenDataArgs),
    /// Train a teacher classifier on cross-entropy.
    TrainTeacher(TrainTeacherArgs),
    /// Distil a student from a teacher.
    Distill(DistillArgs),
    /// Grid-search distillation hyperparameters for a holding student.
    Tune(TuneArgs),
}

#[derive(Args)]
struct AuditArgs {
    /// Paired-logits file (one JSON record per line).
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = metrics::DEFAULT_KAPPA)]
    kappa: f64,
    /// Softmax inverse temperature.
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = metrics::DEFAULT_ECE_BINS)]
    ece_bins: usize,
    /// How teacher/student disagreements enter sigma.
    #[arg(long, default_value = "zero", value_parser = ["zero", "exclude"])]
    bot_policy: String,
    /// Split tag recorded in the report.
    #[arg(long, default_value = "train", value_parser = ["train", "eval"])]
    split: String,
    /// Report file; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct HistogramArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 50)]
    bins: usize,
    /// Writes `<prefix>_teacher.csv`, `<prefix>_student.csv`, `<prefix>_delta.csv`.
    #[arg(long)]
    out_prefix: String,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
}

#[derive(Args)]
struct BoundArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    /// Total sum-form loss, or `auto` to compute it from the logits.
    #[arg(long)]
    loss: String,
    #[arg(long, default_value_t = bound::DEFAULT_TOL)]
    tol: f64,
    /// Report file; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_parser = ["blobs", "moons", "xor"])]
    task: String,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Labeled-points file; holds the training split when `--eval-out` is set.
    #[arg(long)]
    out: PathBuf,
    /// Also split off an eval set and write it here.
    #[arg(long)]
    eval_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2, requires = "eval_out")]
    eval_fraction: f64,
}

#[derive(Args)]
struct TrainTeacherArgs {
    /// Labeled-points training file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "2,64,64,64,2")]
    dims: String,
    /// Flat `key = value` config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch training log (JSON).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct DistillArgs {
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "2,32,32,2")]
    dims: String,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Student model file.
    #[arg(long)]
    out: PathBuf,
    /// Paired-logits file over `--data`, ready for `audit`.
    #[arg(long)]
    emit_pairs: Option<PathBuf>,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct TuneArgs {
    #[arg(long)]
    teacher: PathBuf,
    /// Training split; sigma is measured here.
    #[arg(long)]
    data: PathBuf,
    /// Eval split; the accuracy constraint is measured here.
    #[arg(long)]
    eval: PathBuf,
    #[arg(long, default_value = "2,8,2")]
    dims: String,
    /// Grid file with `key = v1,v2,...` lines; built-in ranges when omitted.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Baseline config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = metrics::DEFAULT_KAPPA)]
    kappa: f64,
    #[arg(long, default_value_t = tuner::DEFAULT_MAX_ACC_DROP)]
    max_acc_drop: f64,
    /// Overrides the seed of the baseline config.
    #[arg(long)]
    seed: Option<u64>,
    /// Also search stage-1 learning rate and epochs.
    #[arg(long)]
    tune_stage1: bool,
    /// Keep only the first N grid configurations.
    #[arg(long)]
    max_trials: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Before/after comparison table (plain text).
    #[arg(long)]
    table: Option<PathBuf>,
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<DistillConfig> {
    match path {
        Some(p) => {
            DistillConfig::load(p).with_context(|| format!("reading config {}", p.display()))
        }
        None => Ok(DistillConfig::default()),
    }
}

fn load_pairs(path: &Path) -> Result<data::PairedDataset> {
    data::load_paired(path).with_context(|| format!("reading {}", path.display()))
}

fn load_points(path: &Path) -> Result<Vec<data::LabeledPoint>> {
    data::load_points(path).with_context(|| format!("reading {}", path.display()))
}

fn load_model(path: &Path) -> Result<MlpModel> {
    MlpModel::load(path).with_context(|| format!("reading model {}", path.display()))
}

fn audit(a: AuditArgs) -> Result<u8> {
    let split: SplitTag = a.split.parse()?;
    let ds = load_pairs(&a.input)?.with_split(split);
    let opts = AuditOptions {
        gamma: a.gamma,
        kappa: a.kappa,
        ece_bins: a.ece_bins,
        bot_policy: a.bot_policy.parse::<BotPolicy>()?,
    };
    let report = ConfidenceReport::build(&ds, &opts)?;
    emit(a.out.as_deref(), &report.to_json())?;
    Ok(if report.holds { 0 } else { 1 })
}

fn histogram(a: HistogramArgs) -> Result<u8> {
    let ds = load_pairs(&a.input)?;
    let d = metrics::distributions(&ds, a.gamma, a.bins)?;
    for (name, h) in [
        ("teacher", &d.teacher),
        ("student", &d.student),
        ("delta", &d.delta),
    ] {
        write(
            Path::new(&format!("{}_{name}.csv", a.out_prefix)),
            &h.to_csv(),
        )?;
    }
    println!(
        "n_total={} delta_counted={} bot_count={}",
        ds.len(),
        d.delta.total(),
        d.bot_count
    );
    Ok(0)
}

fn bound_cmd(a: BoundArgs) -> Result<u8> {
    let ds = load_pairs(&a.input)?;
    let loss = match a.loss.as_str() {
        "auto" => paired_loss(&ds, a.alpha, a.gamma, Reduction::Sum)?,
        v => v
            .parse::<f64>()
            .with_context(|| format!("--loss expects a number or 'auto', got '{v}'"))?,
    };
    let report = verify_chain(&ds, a.gamma, a.alpha, loss, a.tol)?;
    emit(a.out.as_deref(), &report.to_json())?;
    Ok(if report.all_hold { 0 } else { 1 })
}

fn gen_data(a: GenDataArgs) -> Result<u8> {
    let task: SyntheticTask = a.task.parse()?;
    let points = data::gen_synthetic(task, a.n, a.noise, a.seed)?;
    match &a.eval_out {
        Some(eval_path) => {
            let (train, eval) = data::split(&points, a.eval_fraction, a.seed)?;
            data::save_points(&train, &a.out)?;
            data::save_points(&eval, eval_path)?;
        }
        None => data::save_points(&points, &a.out)?,
    }
    Ok(0)
}

fn train_teacher(a: TrainTeacherArgs) -> Result<u8> {
    let cfg = load_config(a.config.as_deref())?;
    let points = load_points(&a.data)?;
    let dims = parse_dims(&a.dims)?;
    let (model, log) = distill::train_teacher(&points, &dims, &cfg)?;
    model.save(&a.out)?;
    if let Some(p) = &a.log {
        write(p, &log.to_json())?;
    }
    if let Some(last) = log.epochs.last() {
        eprintln!(
            "teacher: {} epochs, train accuracy {:.4}",
            last.epoch, last.train_accuracy
        );
    }
    Ok(0)
}

fn distill_cmd(a: DistillArgs) -> Result<u8> {
    let cfg = load_config(a.config.as_deref())?;
    let teacher = load_model(&a.teacher)?;
    let points = load_points(&a.data)?;
    let dims = parse_dims(&a.dims)?;
    let (student, log) = distill::distill(&teacher, &points, &dims, &cfg)?;
    student.save(&a.out)?;
    if let Some(p) = &a.log {
        write(p, &log.to_json())?;
    }
    if let Some(p) = &a.emit_pairs {
        let pairs = distill::export_pairs(&teacher, &student, &points, SplitTag::Train)?;
        data::save_paired(&pairs, p)?;
    }
    Ok(0)
}

fn tune_cmd(a: TuneArgs) -> Result<u8> {
    let mut baseline = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        baseline.seed = seed;
    }
    let grid = match &a.grid {
        Some(p) => TuneGrid::load(p).with_context(|| format!("reading grid {}", p.display()))?,
        None => TuneGrid::default(),
    };
    let opts = TuneOptions {
        kappa: a.kappa,
        max_acc_drop: a.max_acc_drop,
        include_stage1: a.tune_stage1,
        max_trials: a.max_trials,
    };
    let teacher = load_model(&a.teacher)?;
    let train = load_points(&a.data)?;
    let eval = load_points(&a.eval)?;
    let dims = parse_dims(&a.dims)?;
    let total = grid.size(opts.include_stage1);
    let planned = opts.max_trials.map_or(total, |m| m.min(total));
    eprintln!("tune: grid holds {total} configurations, running {planned}");
    if planned == 0 {
        bail!("--max-trials 0 leaves nothing to run");
    }
    let outcome = tuner::tune(&teacher, &train, &eval, &dims, &grid, &opts, &baseline)?;
    write(&a.out, &outcome.to_json())?;
    let table = tuner::render_table3(&tuner::report_table3(&outcome));
    match &a.table {
        Some(p) => write(p, &table)?,
        None => eprint!("{table}"),
    }
    Ok(if outcome.best_config.is_some() { 0 } else { 1 })
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Audit(a) => audit(a),
        Command::Histogram(a) => histogram(a),
        Command::Bound(a) => bound_cmd(a),
        Command::GenData(a) => gen_data(a),
        Command::TrainTeacher(a) => train_teacher(a),
        Command::Distill(a) => distill_cmd(a),
        Command::Tune(a) => tune_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
