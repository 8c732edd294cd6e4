//! Teacher training and two-stage prediction-layer distillation.
//!
//! Stage 1 pre-trains the student on plain cross-entropy. Stage 2 minimises
//! `alpha * CE + (1 - alpha) * ||z_teacher - z_student||^2` with batch-mean
//! reduction. After every epoch the sum-form loss over the full training
//! set is logged; that value is what [`crate::bound::verify_chain`] expects.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledPoint, PairedDataset, PairedLogitRecord, SplitTag};
use crate::error::{Error, Result};
use crate::loss::{self, LossTerms, Reduction};
use crate::metrics::softmax_unchecked;
use crate::mlp::{Gradients, MlpModel};
use crate::rng::{self, stream, Rng};
use crate::textfmt::fmt_f64;

/// Batch size of the stage-1 pre-training pass.
pub const STAGE1_BATCH: usize = 32;
/// Losses above this are treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

pub const TEACHER_DIMS: [usize; 5] = [2, 64, 64, 64, 2];
pub const STUDENT_MILD_DIMS: [usize; 4] = [2, 32, 32, 2];
pub const STUDENT_AGGRESSIVE_DIMS: [usize; 3] = [2, 8, 2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    /// Weight of the cross-entropy term.
    pub alpha: f64,
    /// Softmax inverse temperature.
    pub gamma: f64,
    pub lr_stg1: f64,
    pub lr_stg2: f64,
    pub batch: usize,
    pub epochs_stg1: usize,
    pub epochs_stg2: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            gamma: 1.0,
            lr_stg1: 0.05,
            lr_stg2: 3e-5,
            batch: 32,
            epochs_stg1: 30,
            epochs_stg2: 3,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

const CONFIG_KEYS: [&str; 9] = [
    "alpha",
    "gamma",
    "lr_stg1",
    "lr_stg2",
    "batch",
    "epochs_stg1",
    "epochs_stg2",
    "weight_decay",
    "seed",
];

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::invalid(format!("config: {what}")));
        if !(0.0..1.0).contains(&self.alpha) {
            return bad(&format!("alpha must lie in [0, 1), got {}", self.alpha));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(&format!("gamma must be > 0, got {}", self.gamma));
        }
        for (name, lr) in [("lr_stg1", self.lr_stg1), ("lr_stg2", self.lr_stg2)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad(&format!("{name} must be >= 0, got {lr}"));
            }
        }
        if self.batch == 0 {
            return bad("batch must be >= 1");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(&format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        Ok(())
    }

    /// Parses flat `key = value` lines. `#` starts a comment; keys not given
    /// keep their defaults.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .or_else(|| line.split_once(':'))
                .ok_or_else(|| Error::Parse {
                    line: i + 1,
                    msg: format!("expected 'key = value', got '{line}'"),
                })?;
            let (key, value) = (key.trim(), value.trim());
            let perr = |e: &dyn std::fmt::Display| Error::Parse {
                line: i + 1,
                msg: format!("{key}: {e}"),
            };
            let float = || value.parse::<f64>().map_err(|e| perr(&e));
            let int = || value.parse::<usize>().map_err(|e| perr(&e));
            match key {
                "alpha" => cfg.alpha = float()?,
                "gamma" => cfg.gamma = float()?,
                "lr_stg1" => cfg.lr_stg1 = float()?,
                "lr_stg2" => cfg.lr_stg2 = float()?,
                "batch" | "batch_stg2" => cfg.batch = int()?,
                "epochs_stg1" => cfg.epochs_stg1 = int()?,
                "epochs_stg2" => cfg.epochs_stg2 = int()?,
                "weight_decay" => cfg.weight_decay = float()?,
                "seed" => cfg.seed = value.parse::<u64>().map_err(|e| perr(&e))?,
                other => {
                    return Err(Error::Parse {
                        line: i + 1,
                        msg: format!(
                            "unknown config key '{other}' (expected one of {CONFIG_KEYS:?})"
                        ),
                    })
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "alpha = {}", fmt_f64(self.alpha));
        let _ = writeln!(s, "gamma = {}", fmt_f64(self.gamma));
        let _ = writeln!(s, "lr_stg1 = {}", fmt_f64(self.lr_stg1));
        let _ = writeln!(s, "lr_stg2 = {}", fmt_f64(self.lr_stg2));
        let _ = writeln!(s, "batch = {}", self.batch);
        let _ = writeln!(s, "epochs_stg1 = {}", self.epochs_stg1);
        let _ = writeln!(s, "epochs_stg2 = {}", self.epochs_stg2);
        let _ = writeln!(s, "weight_decay = {}", fmt_f64(self.weight_decay));
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_kv_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1 for teacher training and student pre-training, 2 for distillation.
    pub stage: u8,
    pub epoch: usize,
    pub mean_batch_loss: f64,
    /// Loss of the stage's objective, summed over the full training set.
    pub sum_form_loss: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn stage(&self, stage: u8) -> impl Iterator<Item = &EpochRecord> {
        self.epochs.iter().filter(move |r| r.stage == stage)
    }

    pub fn to_json(&self) -> String {
        crate::textfmt::to_pretty(self)
    }
}

/// What the student is trained against.
#[derive(Debug, Clone, Copy)]
pub enum LossSpec<'a> {
    /// Cross-entropy of `softmax_gamma(z)` against the labels.
    CrossEntropy { gamma: f64 },
    /// The mixed distillation loss with a fixed teacher.
    Distill {
        teacher: &'a MlpModel,
        alpha: f64,
        gamma: f64,
    },
}

/// A training example with its precomputed teacher logits, if any.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Sample<'a> {
    pub features: &'a [f64],
    pub label: usize,
    pub teacher: Option<&'a [f64]>,
}

#[derive(Debug, Clone, Copy)]
struct Objective {
    alpha: f64,
    gamma: f64,
}

impl LossSpec<'_> {
    fn objective(&self) -> Objective {
        match *self {
            LossSpec::CrossEntropy { gamma } => Objective { alpha: 1.0, gamma },
            LossSpec::Distill { alpha, gamma, .. } => Objective { alpha, gamma },
        }
    }

    fn teacher(&self) -> Option<&MlpModel> {
        match self {
            LossSpec::CrossEntropy { .. } => None,
            LossSpec::Distill { teacher, .. } => Some(teacher),
        }
    }
}

fn teacher_logits(teacher: &MlpModel, points: &[LabeledPoint]) -> Result<Vec<Vec<f64>>> {
    points
        .par_iter()
        .map(|p| teacher.forward(&p.features))
        .collect()
}

fn samples<'a>(points: &'a [LabeledPoint], teacher: Option<&'a [Vec<f64>]>) -> Vec<Sample<'a>> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| Sample {
            features: &p.features,
            label: p.label,
            teacher: teacher.map(|t| t[i].as_slice()),
        })
        .collect()
}

fn check_labels(model: &MlpModel, points: &[LabeledPoint]) -> Result<()> {
    let c = model.num_classes();
    match points.iter().find(|p| p.label >= c) {
        Some(p) => Err(Error::invalid(format!(
            "label {} out of range for {c} classes",
            p.label
        ))),
        None => Ok(()),
    }
}

/// Loss terms (and optionally gradients) of `model` over `batch`.
fn evaluate(
    model: &MlpModel,
    batch: &[Sample<'_>],
    obj: Objective,
    mut grads: Option<&mut Gradients>,
) -> Result<LossTerms> {
    let mut terms = Vec::with_capacity(batch.len());
    for s in batch {
        let trace = model.trace(s.features)?;
        let z = trace.logits();
        let teacher = s.teacher.unwrap_or(z);
        if teacher.len() != z.len() {
            return Err(Error::Shape {
                expected: teacher.len(),
                got: z.len(),
            });
        }
        if let Some(g) = grads.as_deref_mut() {
            let mut d = vec![0.0; z.len()];
            if obj.alpha > 0.0 {
                let y = softmax_unchecked(z, obj.gamma);
                for (k, dk) in d.iter_mut().enumerate() {
                    let t = if k == s.label { 1.0 } else { 0.0 };
                    *dk += obj.alpha * obj.gamma * (y[k] - t);
                }
            }
            if obj.alpha < 1.0 {
                for (dk, (zs, zb)) in d.iter_mut().zip(z.iter().zip(teacher)) {
                    *dk += (1.0 - obj.alpha) * 2.0 * (zs - zb);
                }
            }
            model.accumulate_grad(&trace, &d, g);
        }
        terms.push((teacher.to_vec(), z.to_vec(), s.label));
    }
    loss::accumulate(
        terms
            .iter()
            .map(|(t, z, l)| (t.as_slice(), z.as_slice(), Some(*l))),
        obj.alpha,
        obj.gamma,
    )
}

/// Loss and its analytic gradient with respect to every parameter of `model`.
pub fn backward(
    model: &MlpModel,
    batch: &[LabeledPoint],
    spec: &LossSpec<'_>,
    reduction: Reduction,
) -> Result<(f64, Gradients)> {
    check_labels(model, batch)?;
    let tl = spec
        .teacher()
        .map(|t| teacher_logits(t, batch))
        .transpose()?;
    let samples = samples(batch, tl.as_deref());
    let mut grads = Gradients::zeros_like(model);
    let obj = spec.objective();
    let terms = evaluate(model, &samples, obj, Some(&mut grads))?;
    if reduction == Reduction::Mean {
        grads.scale(1.0 / batch.len() as f64);
    }
    Ok((terms.combine(obj.alpha, reduction), grads))
}

/// The mixed distillation loss of `student` against `teacher` on `batch`.
pub fn loss_eq1(
    batch: &[LabeledPoint],
    teacher: &MlpModel,
    student: &MlpModel,
    alpha: f64,
    gamma: f64,
    reduction: Reduction,
) -> Result<f64> {
    loss::check_alpha(alpha)?;
    if batch.is_empty() {
        return Err(Error::invalid("loss over an empty batch"));
    }
    let tl = teacher_logits(teacher, batch)?;
    let samples = samples(batch, Some(&tl));
    Ok(evaluate(student, &samples, Objective { alpha, gamma }, None)?.combine(alpha, reduction))
}

struct SgdRun {
    epochs: usize,
    lr: f64,
    batch: usize,
    weight_decay: f64,
    obj: Objective,
    stage: u8,
}

fn accuracy_of(model: &MlpModel, samples: &[Sample<'_>]) -> Result<f64> {
    let mut correct = 0;
    for s in samples {
        let z = model.forward(s.features)?;
        if argmax(&z) == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}

fn diverged(loss: f64) -> bool {
    !loss.is_finite() || loss > DIVERGENCE_LIMIT
}

fn sgd(
    model: &mut MlpModel,
    data: &[Sample<'_>],
    run: &SgdRun,
    rng: &mut Rng,
) -> Result<Vec<EpochRecord>> {
    let mut log = Vec::with_capacity(run.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut batch = Vec::with_capacity(run.batch);
    for epoch in 1..=run.epochs {
        order.shuffle(rng);
        let mut batch_losses = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(run.batch) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| data[i]));
            let mut grads = Gradients::zeros_like(model);
            let terms = evaluate(model, &batch, run.obj, Some(&mut grads))?;
            let loss = terms.combine(run.obj.alpha, Reduction::Mean);
            if diverged(loss) {
                return Err(Error::Diverged { epoch, loss });
            }
            grads.scale(1.0 / batch.len() as f64);
            model.sgd_step(&grads, run.lr, run.weight_decay);
            batch_losses += loss;
            batches += 1;
        }
        let full = evaluate(model, data, run.obj, None)?;
        let sum_form_loss = full.combine(run.obj.alpha, Reduction::Sum);
        if diverged(sum_form_loss / data.len() as f64) || !model.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: sum_form_loss,
            });
        }
        log.push(EpochRecord {
            stage: run.stage,
            epoch,
            mean_batch_loss: batch_losses / batches as f64,
            sum_form_loss,
            train_accuracy: accuracy_of(model, data)?,
        });
    }
    Ok(log)
}

fn check_data(data: &[LabeledPoint]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::invalid("training data is empty"));
    }
    Ok(())
}

/// Trains a classifier on plain cross-entropy with SGD and weight decay,
/// using `lr_stg1`, `epochs_stg1`, `batch` and `weight_decay` from `cfg`.
pub fn train_teacher(
    data: &[LabeledPoint],
    dims: &[usize],
    cfg: &DistillConfig,
) -> Result<(MlpModel, TrainLog)> {
    cfg.validate()?;
    check_data(data)?;
    let mut model = MlpModel::init(dims, &mut rng::seeded(cfg.seed, stream::INIT))?;
    check_labels(&model, data)?;
    let samples = samples(data, None);
    let run = SgdRun {
        epochs: cfg.epochs_stg1,
        lr: cfg.lr_stg1,
        batch: cfg.batch,
        weight_decay: cfg.weight_decay,
        obj: Objective {
            alpha: 1.0,
            gamma: cfg.gamma,
        },
        stage: 1,
    };
    let epochs = sgd(
        &mut model,
        &samples,
        &run,
        &mut rng::seeded(cfg.seed, stream::SHUFFLE_TEACHER),
    )?;
    Ok((model, TrainLog { epochs }))
}

/// Stage 1: seeded student initialisation followed by cross-entropy
/// pre-training for `epochs_stg1` at `lr_stg1`, batch [`STAGE1_BATCH`], no
/// weight decay.
pub fn pretrain_student(
    data: &[LabeledPoint],
    student_dims: &[usize],
    cfg: &DistillConfig,
) -> Result<(MlpModel, TrainLog)> {
    cfg.validate()?;
    check_data(data)?;
    let mut student = MlpModel::init(
        student_dims,
        &mut rng::seeded(cfg.seed, stream::STUDENT_INIT),
    )?;
    check_labels(&student, data)?;
    let samples = samples(data, None);
    let run = SgdRun {
        epochs: cfg.epochs_stg1,
        lr: cfg.lr_stg1,
        batch: STAGE1_BATCH,
        weight_decay: 0.0,
        obj: Objective {
            alpha: 1.0,
            gamma: cfg.gamma,
        },
        stage: 1,
    };
    let epochs = sgd(
        &mut student,
        &samples,
        &run,
        &mut rng::seeded(cfg.seed, stream::SHUFFLE_STAGE1),
    )?;
    Ok((student, TrainLog { epochs }))
}

/// Stage 2: prediction-layer distillation of an existing student.
pub fn distill_stage2(
    teacher: &MlpModel,
    student: MlpModel,
    data: &[LabeledPoint],
    cfg: &DistillConfig,
) -> Result<(MlpModel, TrainLog)> {
    cfg.validate()?;
    check_data(data)?;
    check_pair(teacher, &student)?;
    check_labels(&student, data)?;
    let tl = teacher_logits(teacher, data)?;
    let samples = samples(data, Some(&tl));
    let run = SgdRun {
        epochs: cfg.epochs_stg2,
        lr: cfg.lr_stg2,
        batch: cfg.batch,
        weight_decay: cfg.weight_decay,
        obj: Objective {
            alpha: cfg.alpha,
            gamma: cfg.gamma,
        },
        stage: 2,
    };
    let mut student = student;
    let epochs = sgd(
        &mut student,
        &samples,
        &run,
        &mut rng::seeded(cfg.seed, stream::SHUFFLE_STAGE2),
    )?;
    Ok((student, TrainLog { epochs }))
}

fn check_pair(teacher: &MlpModel, student: &MlpModel) -> Result<()> {
    if teacher.num_classes() != student.num_classes() {
        return Err(Error::Shape {
            expected: teacher.num_classes(),
            got: student.num_classes(),
        });
    }
    if teacher.input_dim() != student.input_dim() {
        return Err(Error::Shape {
            expected: teacher.input_dim(),
            got: student.input_dim(),
        });
    }
    Ok(())
}

/// Full two-stage distillation. The student must have strictly fewer
/// parameters than the teacher.
pub fn distill(
    teacher: &MlpModel,
    data: &[LabeledPoint],
    student_dims: &[usize],
    cfg: &DistillConfig,
) -> Result<(MlpModel, TrainLog)> {
    let probe = MlpModel::zeros(student_dims)?;
    check_pair(teacher, &probe)?;
    if probe.num_params() >= teacher.num_params() {
        return Err(Error::invalid(format!(
            "student has {} parameters, teacher {}: the student must be smaller",
            probe.num_params(),
            teacher.num_params()
        )));
    }
    let (student, mut log) = pretrain_student(data, student_dims, cfg)?;
    let (student, stage2) = distill_stage2(teacher, student, data, cfg)?;
    log.epochs.extend(stage2.epochs);
    Ok((student, log))
}

/// Runs both models over `data` and pairs their logits, one record per
/// point with ids `0, 1, ...`.
pub fn export_pairs(
    teacher: &MlpModel,
    student: &MlpModel,
    data: &[LabeledPoint],
    split: SplitTag,
) -> Result<PairedDataset> {
    check_pair(teacher, student)?;
    let records = data
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            Ok(PairedLogitRecord {
                id: i.to_string(),
                teacher_logits: teacher.forward(&p.features)?,
                student_logits: student.forward(&p.features)?,
                label: Some(p.label),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    PairedDataset::new(records, split)
}
