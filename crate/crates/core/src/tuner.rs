//! Exhaustive grid search over distillation hyperparameters, looking for a
//! student whose train-split sigma meets the threshold without losing more
//! than a fixed amount of eval accuracy relative to a baseline run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Serialize, Serializer};

use crate::data::{LabeledPoint, PairedDataset, SplitTag};
use crate::distill::{self, DistillConfig};
use crate::error::{Error, Result};
use crate::metrics::{self, BotPolicy, Side};
use crate::mlp::MlpModel;

/// Default allowed eval-accuracy drop: one percentage point.
pub const DEFAULT_MAX_ACC_DROP: f64 = 0.01;
/// Slack for comparing accuracies that are ratios of small integers.
const ACC_EPS: f64 = 1e-12;

/// Candidate values per hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TuneGrid {
    pub lr_stg1: Vec<f64>,
    pub lr_stg2: Vec<f64>,
    pub batch: Vec<usize>,
    pub epochs_stg2: Vec<usize>,
    pub weight_decay: Vec<f64>,
    pub epochs_stg1: Option<Vec<usize>>,
}

impl Default for TuneGrid {
    /// The prediction-stage ranges explored for the original models, plus
    /// the intermediate-stage learning rates and epochs.
    fn default() -> Self {
        Self {
            lr_stg1: vec![5e-7, 1e-6, 5e-5, 1e-4, 3e-4, 5e-3],
            lr_stg2: vec![3e-6, 1e-5, 3e-5, 7e-5, 4e-4, 5e-4, 8e-4],
            batch: vec![28, 32, 34, 36, 38, 40],
            epochs_stg2: vec![2, 3, 4, 5, 6],
            weight_decay: vec![1e-4, 1e-3, 5e-3, 1e-2, 5e-2],
            epochs_stg1: Some(vec![3, 6, 9]),
        }
    }
}

fn parse_list<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(|v| {
            v.trim().parse::<T>().map_err(|e| Error::Parse {
                line,
                msg: format!("{key}: '{}': {e}", v.trim()),
            })
        })
        .collect()
}

impl TuneGrid {
    /// A grid with exactly one candidate per hyperparameter, taken from `cfg`.
    pub fn single(cfg: &DistillConfig) -> Self {
        Self {
            lr_stg1: vec![cfg.lr_stg1],
            lr_stg2: vec![cfg.lr_stg2],
            batch: vec![cfg.batch],
            epochs_stg2: vec![cfg.epochs_stg2],
            weight_decay: vec![cfg.weight_decay],
            epochs_stg1: Some(vec![cfg.epochs_stg1]),
        }
    }

    /// Parses `key = v1, v2, ...` lines. Keys missing from the text keep the
    /// default candidate list.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut grid = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: line_no,
                msg: format!("expected 'key = v1,v2,...', got '{line}'"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "lr_stg1" => grid.lr_stg1 = parse_list(line_no, key, value)?,
                "lr_stg2" => grid.lr_stg2 = parse_list(line_no, key, value)?,
                "batch" => grid.batch = parse_list(line_no, key, value)?,
                "epochs_stg2" => grid.epochs_stg2 = parse_list(line_no, key, value)?,
                "weight_decay" => grid.weight_decay = parse_list(line_no, key, value)?,
                "epochs_stg1" => grid.epochs_stg1 = Some(parse_list(line_no, key, value)?),
                other => {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("unknown grid key '{other}'"),
                    })
                }
            }
        }
        grid.validate()?;
        Ok(grid)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_kv_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        let empty = [
            ("lr_stg1", self.lr_stg1.is_empty()),
            ("lr_stg2", self.lr_stg2.is_empty()),
            ("batch", self.batch.is_empty()),
            ("epochs_stg2", self.epochs_stg2.is_empty()),
            ("weight_decay", self.weight_decay.is_empty()),
            (
                "epochs_stg1",
                self.epochs_stg1.as_ref().is_some_and(Vec::is_empty),
            ),
        ];
        match empty.iter().find(|(_, e)| *e) {
            Some((k, _)) => Err(Error::invalid(format!("grid list '{k}' is empty"))),
            None => Ok(()),
        }
    }

    /// Number of configurations [`TuneGrid::configs`] produces.
    pub fn size(&self, include_stage1: bool) -> usize {
        let stage1 = if include_stage1 {
            self.lr_stg1.len() * self.epochs_stg1.as_ref().map_or(1, Vec::len)
        } else {
            1
        };
        stage1
            * self.lr_stg2.len()
            * self.batch.len()
            * self.epochs_stg2.len()
            * self.weight_decay.len()
    }

    /// Cartesian product in a fixed order: `lr_stg1`, `epochs_stg1` (only
    /// when `include_stage1`), then `lr_stg2`, `batch`, `epochs_stg2`,
    /// `weight_decay`, with the last key varying fastest. Fields not in the
    /// grid come from `base`.
    pub fn configs(&self, base: &DistillConfig, include_stage1: bool) -> Vec<DistillConfig> {
        let (lr1, ep1) = if include_stage1 {
            (
                self.lr_stg1.clone(),
                self.epochs_stg1
                    .clone()
                    .unwrap_or_else(|| vec![base.epochs_stg1]),
            )
        } else {
            (vec![base.lr_stg1], vec![base.epochs_stg1])
        };
        let mut out = Vec::with_capacity(self.size(include_stage1));
        for &lr_stg1 in &lr1 {
            for &epochs_stg1 in &ep1 {
                for &lr_stg2 in &self.lr_stg2 {
                    for &batch in &self.batch {
                        for &epochs_stg2 in &self.epochs_stg2 {
                            for &weight_decay in &self.weight_decay {
                                out.push(DistillConfig {
                                    lr_stg1,
                                    epochs_stg1,
                                    lr_stg2,
                                    batch,
                                    epochs_stg2,
                                    weight_decay,
                                    ..*base
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TuneOptions {
    pub kappa: f64,
    pub max_acc_drop: f64,
    /// Also search the stage-1 learning rate and epochs.
    pub include_stage1: bool,
    /// Keep only the first `n` configurations in grid order.
    pub max_trials: Option<usize>,
}

impl Default for TuneOptions {
    fn default() -> Self {
        Self {
            kappa: metrics::DEFAULT_KAPPA,
            max_acc_drop: DEFAULT_MAX_ACC_DROP,
            include_stage1: false,
            max_trials: None,
        }
    }
}

/// Result of distilling one configuration. Metrics are NaN when the run
/// diverged.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRecord {
    pub config: DistillConfig,
    pub sigma_train: f64,
    pub sigma_eval: f64,
    pub acc_train: f64,
    pub acc_eval: f64,
    pub holds: bool,
    pub feasible: bool,
    pub diverged: bool,
}

/// The score a trial is ranked by.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialScore {
    pub sigma: f64,
    pub acc: f64,
}

/// True when `acc` is at most `max_drop` below `baseline_acc`.
pub fn is_feasible(acc: f64, baseline_acc: f64, max_drop: f64) -> bool {
    acc >= baseline_acc - max_drop - ACC_EPS
}

/// Index of the feasible, holding trial with the smallest sigma; ties go to
/// the higher accuracy, then to the earlier trial.
pub fn select_best(
    trials: &[TrialScore],
    baseline_acc: f64,
    kappa: f64,
    max_drop: f64,
) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, t) in trials.iter().enumerate() {
        if t.sigma.is_nan() || t.sigma > kappa || !is_feasible(t.acc, baseline_acc, max_drop) {
            continue;
        }
        let better = match best {
            None => true,
            Some(b) => {
                let cur = &trials[b];
                t.sigma < cur.sigma || (t.sigma == cur.sigma && t.acc > cur.acc)
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

fn absent_if_none<S: Serializer>(
    cfg: &Option<DistillConfig>,
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    match cfg {
        Some(c) => c.serialize(s),
        None => s.serialize_str("absent"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TuneOutcome {
    #[serde(serialize_with = "absent_if_none")]
    pub best_config: Option<DistillConfig>,
    pub best_index: Option<usize>,
    pub best_sigma: Option<f64>,
    pub best_acc: Option<f64>,
    pub baseline_sigma: f64,
    pub baseline_acc: f64,
    pub kappa: f64,
    pub max_acc_drop: f64,
    pub grid_size: usize,
    pub teacher_acc_train: f64,
    pub teacher_acc_eval: f64,
    pub baseline: TrialRecord,
    pub trials: Vec<TrialRecord>,
}

impl TuneOutcome {
    pub fn best(&self) -> Option<&TrialRecord> {
        self.best_index.map(|i| &self.trials[i])
    }

    pub fn to_json(&self) -> String {
        crate::textfmt::to_pretty(self)
    }
}

struct Splits<'a> {
    train: &'a [LabeledPoint],
    eval: &'a [LabeledPoint],
}

fn measure(
    teacher: &MlpModel,
    student: &MlpModel,
    data: &Splits<'_>,
    cfg: &DistillConfig,
) -> Result<(f64, f64, f64, f64)> {
    let pairs = |pts: &[LabeledPoint], tag| distill::export_pairs(teacher, student, pts, tag);
    let tr = pairs(data.train, SplitTag::Train)?;
    let ev = pairs(data.eval, SplitTag::Eval)?;
    let sig = |d: &PairedDataset| metrics::sigma(d, cfg.gamma, BotPolicy::Zero).map(|s| s.sigma);
    let acc = |d: &PairedDataset| metrics::accuracy(d, Side::Student, cfg.gamma);
    Ok((sig(&tr)?, sig(&ev)?, acc(&tr)?, acc(&ev)?))
}

fn record(
    cfg: DistillConfig,
    run: Result<(f64, f64, f64, f64)>,
    baseline_acc: f64,
    opts: &TuneOptions,
) -> Result<TrialRecord> {
    match run {
        Ok((sigma_train, sigma_eval, acc_train, acc_eval)) => Ok(TrialRecord {
            config: cfg,
            sigma_train,
            sigma_eval,
            acc_train,
            acc_eval,
            holds: metrics::holds(sigma_train, opts.kappa)?,
            feasible: is_feasible(acc_eval, baseline_acc, opts.max_acc_drop),
            diverged: false,
        }),
        Err(Error::Diverged { .. }) => Ok(TrialRecord {
            config: cfg,
            sigma_train: f64::NAN,
            sigma_eval: f64::NAN,
            acc_train: f64::NAN,
            acc_eval: f64::NAN,
            holds: false,
            feasible: false,
            diverged: true,
        }),
        Err(e) => Err(e),
    }
}

/// Distils a baseline student, then every grid configuration, and picks
/// the best feasible configuration that satisfies the threshold. Sigma is
/// measured on `train` and feasibility on `eval`. Trials run in parallel;
/// the log is ordered by grid position.
pub fn tune(
    teacher: &MlpModel,
    train: &[LabeledPoint],
    eval: &[LabeledPoint],
    student_dims: &[usize],
    grid: &TuneGrid,
    opts: &TuneOptions,
    baseline: &DistillConfig,
) -> Result<TuneOutcome> {
    grid.validate()?;
    if !(opts.max_acc_drop >= 0.0) {
        return Err(Error::invalid(format!(
            "max_acc_drop must be >= 0, got {}",
            opts.max_acc_drop
        )));
    }
    metrics::holds(0.0, opts.kappa)?;
    if eval.is_empty() {
        return Err(Error::invalid("eval data is empty"));
    }
    let data = Splits { train, eval };

    let (base_student, _) = distill::distill(teacher, train, student_dims, baseline)?;
    let base_metrics = measure(teacher, &base_student, &data, baseline)?;
    let baseline_acc = base_metrics.3;
    let baseline_rec = record(*baseline, Ok(base_metrics), baseline_acc, opts)?;

    let mut configs = grid.configs(baseline, opts.include_stage1);
    if let Some(cap) = opts.max_trials {
        configs.truncate(cap);
    }
    if configs.is_empty() {
        return Err(Error::invalid("the grid yields no configurations"));
    }

    // stage 1 depends only on (lr_stg1, epochs_stg1) within one grid
    let mut stage1_keys: BTreeMap<(u64, usize), usize> = BTreeMap::new();
    for c in &configs {
        let next = stage1_keys.len();
        stage1_keys
            .entry((c.lr_stg1.to_bits(), c.epochs_stg1))
            .or_insert(next);
    }
    let mut keyed: Vec<_> = stage1_keys.iter().map(|(k, &slot)| (slot, *k)).collect();
    keyed.sort_unstable();
    let pretrained: Vec<Result<MlpModel>> = keyed
        .par_iter()
        .map(|&(_, (lr_bits, epochs))| {
            let cfg = DistillConfig {
                lr_stg1: f64::from_bits(lr_bits),
                epochs_stg1: epochs,
                ..*baseline
            };
            distill::distill(
                teacher,
                train,
                student_dims,
                &DistillConfig {
                    epochs_stg2: 0,
                    ..cfg
                },
            )
            .map(|(m, _)| m)
        })
        .collect();

    let trials = configs
        .par_iter()
        .map(|cfg| {
            let slot = stage1_keys[&(cfg.lr_stg1.to_bits(), cfg.epochs_stg1)];
            let run = match &pretrained[slot] {
                Ok(pre) => distill::distill_stage2(teacher, pre.clone(), train, cfg)
                    .and_then(|(student, _)| measure(teacher, &student, &data, cfg)),
                Err(Error::Diverged { epoch, loss }) => Err(Error::Diverged {
                    epoch: *epoch,
                    loss: *loss,
                }),
                Err(e) => Err(Error::invalid(e.to_string())),
            };
            record(*cfg, run, baseline_acc, opts)
        })
        .collect::<Result<Vec<_>>>()?;

    let scores: Vec<TrialScore> = trials
        .iter()
        .map(|t| TrialScore {
            sigma: t.sigma_train,
            acc: t.acc_eval,
        })
        .collect();
    let best_index = select_best(&scores, baseline_acc, opts.kappa, opts.max_acc_drop);
    let best = best_index.map(|i| &trials[i]);

    let teacher_acc = |pts: &[LabeledPoint], tag| -> Result<f64> {
        let d = distill::export_pairs(teacher, teacher, pts, tag)?;
        metrics::accuracy(&d, Side::Teacher, baseline.gamma)
    };
    Ok(TuneOutcome {
        best_config: best.map(|t| t.config),
        best_index,
        best_sigma: best.map(|t| t.sigma_train),
        best_acc: best.map(|t| t.acc_eval),
        baseline_sigma: baseline_rec.sigma_train,
        baseline_acc,
        kappa: opts.kappa,
        max_acc_drop: opts.max_acc_drop,
        grid_size: configs.len(),
        teacher_acc_train: teacher_acc(train, SplitTag::Train)?,
        teacher_acc_eval: teacher_acc(eval, SplitTag::Eval)?,
        baseline: baseline_rec,
        trials,
    })
}

/// Accuracy and sigma of one student on one split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitMetrics {
    pub acc: f64,
    pub sigma: f64,
}

/// One row of the before/after comparison: teacher accuracy, original and
/// tuned student accuracy, original and tuned sigma.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table3Row {
    pub split: SplitTag,
    pub acc_teacher: f64,
    pub acc_student: f64,
    pub acc_tuned: f64,
    pub sigma_student: f64,
    pub sigma_tuned: f64,
    pub holds_student: bool,
    pub holds_tuned: bool,
}

impl Table3Row {
    pub fn new(
        split: SplitTag,
        acc_teacher: f64,
        original: SplitMetrics,
        tuned: SplitMetrics,
        kappa: f64,
    ) -> Self {
        Self {
            split,
            acc_teacher,
            acc_student: original.acc,
            acc_tuned: tuned.acc,
            sigma_student: original.sigma,
            sigma_tuned: tuned.sigma,
            holds_student: original.sigma <= kappa,
            holds_tuned: tuned.sigma <= kappa,
        }
    }

    /// The original student failed the threshold and the tuned one meets it.
    pub fn is_repair(&self) -> bool {
        !self.holds_student && self.holds_tuned
    }
}

/// Train and eval rows comparing the baseline student with the tuned one.
/// When no tuned configuration exists the baseline stands in for it.
pub fn report_table3(outcome: &TuneOutcome) -> Vec<Table3Row> {
    let base = &outcome.baseline;
    let tuned = outcome.best().unwrap_or(base);
    vec![
        Table3Row::new(
            SplitTag::Train,
            outcome.teacher_acc_train,
            SplitMetrics {
                acc: base.acc_train,
                sigma: base.sigma_train,
            },
            SplitMetrics {
                acc: tuned.acc_train,
                sigma: tuned.sigma_train,
            },
            outcome.kappa,
        ),
        Table3Row::new(
            SplitTag::Eval,
            outcome.teacher_acc_eval,
            SplitMetrics {
                acc: base.acc_eval,
                sigma: base.sigma_eval,
            },
            SplitMetrics {
                acc: tuned.acc_eval,
                sigma: tuned.sigma_eval,
            },
            outcome.kappa,
        ),
    ]
}

/// Plain-text rendering; accuracies in percent.
pub fn render_table3(rows: &[Table3Row]) -> String {
    let mut s = String::from("split  acc_B  acc_S  acc_S~  sigma_S  sigma_S~  phi_S  phi_S~\n");
    let verdict = |h: bool| if h { "holds" } else { "fails" };
    for r in rows {
        let _ = writeln!(
            s,
            "{:<5}  {:>5.1}  {:>5.1}  {:>6.1}  {:>7.3}  {:>8.3}  {:<5}  {}",
            r.split.to_string(),
            100.0 * r.acc_teacher,
            100.0 * r.acc_student,
            100.0 * r.acc_tuned,
            r.sigma_student,
            r.sigma_tuned,
            verdict(r.holds_student),
            verdict(r.holds_tuned),
        );
    }
    s
}
