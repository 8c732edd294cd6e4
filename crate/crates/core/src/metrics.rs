//! Confidence, pairwise confidence difference, sigma, verdict, accuracy,
//! expected calibration error and histogram extraction.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{PairedDataset, PairedLogitRecord, SplitTag};
use crate::error::{Error, Result};

/// Default confidence-preservation threshold.
pub const DEFAULT_KAPPA: f64 = 0.05;
/// Default number of equal-width ECE bins.
pub const DEFAULT_ECE_BINS: usize = 10;

/// Output of a softmax: non-negative entries summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Largest probability and its position; ties go to the lowest index.
    pub fn max(&self) -> Confidence {
        let mut index = 0;
        for (i, &p) in self.0.iter().enumerate().skip(1) {
            if p > self.0[index] {
                index = i;
            }
        }
        Confidence {
            value: self.0[index],
            index,
        }
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "gamma must be finite and > 0, got {gamma}"
        )))
    }
}

/// `exp(gamma * z_i) / sum_j exp(gamma * z_j)`, with the maximum logit
/// subtracted first so large magnitudes cannot overflow.
pub fn softmax_gamma(logits: &[f64], gamma: f64) -> Result<ProbVector> {
    check_gamma(gamma)?;
    if logits.len() < 2 {
        return Err(Error::invalid(format!(
            "softmax needs at least 2 logits, got {}",
            logits.len()
        )));
    }
    if !logits.iter().all(|z| z.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    Ok(ProbVector(softmax_unchecked(logits, gamma)))
}

pub(crate) fn softmax_unchecked(logits: &[f64], gamma: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (gamma * (z - max)).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

/// Maximum softmax probability and the class index it belongs to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Confidence {
    pub value: f64,
    pub index: usize,
}

pub fn confidence(logits: &[f64], gamma: f64) -> Result<Confidence> {
    Ok(softmax_gamma(logits, gamma)?.max())
}

/// Student-minus-teacher confidence on one input, or `Bot` when the two
/// models predict different classes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PairwiseDiff {
    Agreed(f64),
    Bot,
}

impl PairwiseDiff {
    pub fn value(self) -> Option<f64> {
        match self {
            PairwiseDiff::Agreed(v) => Some(v),
            PairwiseDiff::Bot => None,
        }
    }

    pub fn agreed(self) -> bool {
        matches!(self, PairwiseDiff::Agreed(_))
    }
}

pub fn delta_cnf(rec: &PairedLogitRecord, gamma: f64) -> Result<PairwiseDiff> {
    let teacher = confidence(&rec.teacher_logits, gamma)?;
    let student = confidence(&rec.student_logits, gamma)?;
    Ok(if teacher.index == student.index {
        PairwiseDiff::Agreed(student.value - teacher.value)
    } else {
        PairwiseDiff::Bot
    })
}

/// How disagreeing records enter sigma.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BotPolicy {
    /// Disagreements contribute zero and count in the denominator.
    #[default]
    Zero,
    /// Disagreements are dropped; the denominator is the agreement count.
    Exclude,
}

impl FromStr for BotPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Self::Zero),
            "exclude" => Ok(Self::Exclude),
            other => Err(Error::Unknown {
                kind: "bot policy",
                name: other.into(),
            }),
        }
    }
}

impl fmt::Display for BotPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Zero => "zero",
            Self::Exclude => "exclude",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaResult {
    pub sigma: f64,
    pub n_total: usize,
    pub n_agree: usize,
    pub n_disagree: usize,
    pub bot_policy: BotPolicy,
}

/// Neumaier-compensated summation; keeps reductions permutation-stable.
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn total(self) -> f64 {
        self.sum + self.comp
    }
}

impl FromIterator<f64> for KahanSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = KahanSum::default();
        for x in iter {
            acc.add(x);
        }
        acc
    }
}

/// Root mean square of the pairwise confidence differences.
pub fn sigma(ds: &PairedDataset, gamma: f64, bot_policy: BotPolicy) -> Result<SigmaResult> {
    let diffs = ds
        .records()
        .iter()
        .map(|r| delta_cnf(r, gamma))
        .collect::<Result<Vec<_>>>()?;
    sigma_from_diffs(&diffs, bot_policy)
}

pub fn sigma_from_diffs(diffs: &[PairwiseDiff], bot_policy: BotPolicy) -> Result<SigmaResult> {
    let n_total = diffs.len();
    let n_agree = diffs.iter().filter(|d| d.agreed()).count();
    let sum_sq = diffs
        .iter()
        .filter_map(|d| d.value())
        .map(|v| v * v)
        .collect::<KahanSum>()
        .total();
    let denom = match bot_policy {
        BotPolicy::Zero => n_total,
        BotPolicy::Exclude => n_agree,
    };
    if denom == 0 {
        return Err(match bot_policy {
            BotPolicy::Exclude => Error::NoAgreement,
            BotPolicy::Zero => Error::invalid("sigma of an empty record set"),
        });
    }
    Ok(SigmaResult {
        sigma: (sum_sq / denom as f64).sqrt(),
        n_total,
        n_agree,
        n_disagree: n_total - n_agree,
        bot_policy,
    })
}

/// Whether the confidence-preservation property holds: `sigma <= kappa`.
pub fn verdict(sig: &SigmaResult, kappa: f64) -> Result<bool> {
    holds(sig.sigma, kappa)
}

pub fn holds(sigma: f64, kappa: f64) -> Result<bool> {
    if !(kappa > 0.0) {
        return Err(Error::invalid(format!("kappa must be > 0, got {kappa}")));
    }
    Ok(sigma <= kappa)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Teacher,
    Student,
}

impl Side {
    pub fn logits(self, rec: &PairedLogitRecord) -> &[f64] {
        match self {
            Side::Teacher => &rec.teacher_logits,
            Side::Student => &rec.student_logits,
        }
    }
}

/// (confidence, correct) for every record on one side.
fn scored(ds: &PairedDataset, side: Side, gamma: f64) -> Result<Vec<(f64, bool)>> {
    ds.records()
        .iter()
        .map(|r| {
            let label = r.label.ok_or_else(|| Error::MissingLabel(r.id.clone()))?;
            let c = confidence(side.logits(r), gamma)?;
            Ok((c.value, c.index == label))
        })
        .collect()
}

pub fn accuracy(ds: &PairedDataset, side: Side, gamma: f64) -> Result<f64> {
    let scored = scored(ds, side, gamma)?;
    let correct = scored.iter().filter(|(_, ok)| *ok).count();
    Ok(correct as f64 / scored.len() as f64)
}

/// Expected calibration error in percent over equal-width bins.
pub fn ece(ds: &PairedDataset, side: Side, gamma: f64, bins: usize) -> Result<f64> {
    ece_from_scores(&scored(ds, side, gamma)?, bins)
}

/// Bin index for a value in `[lo, hi]`; the top edge folds into the last bin.
fn bin_index(x: f64, lo: f64, hi: f64, bins: usize) -> usize {
    let t = ((x - lo) / (hi - lo) * bins as f64).floor();
    if t <= 0.0 {
        0
    } else {
        (t as usize).min(bins - 1)
    }
}

pub fn ece_from_scores(scores: &[(f64, bool)], bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(Error::invalid("ECE needs at least one bin"));
    }
    if scores.is_empty() {
        return Err(Error::invalid("ECE of an empty sample"));
    }
    let mut count = vec![0usize; bins];
    let mut conf = vec![KahanSum::default(); bins];
    let mut hits = vec![0usize; bins];
    for &(c, ok) in scores {
        let b = bin_index(c, 0.0, 1.0, bins);
        count[b] += 1;
        conf[b].add(c);
        hits[b] += ok as usize;
    }
    let n = scores.len() as f64;
    let gap: KahanSum = (0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let nb = count[b] as f64;
            (nb / n) * (hits[b] as f64 / nb - conf[b].total() / nb).abs()
        })
        .collect();
    Ok(100.0 * gap.total())
}

/// Equal-width histogram over `[lo, hi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Self {
        Self {
            lo,
            hi,
            counts: vec![0; bins],
        }
    }

    pub fn add(&mut self, x: f64) {
        let b = bin_index(x, self.lo, self.hi, self.counts.len());
        self.counts[b] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn edges(&self, bin: usize) -> (f64, f64) {
        let width = (self.hi - self.lo) / self.counts.len() as f64;
        let hi = if bin + 1 == self.counts.len() {
            self.hi
        } else {
            self.lo + width * (bin + 1) as f64
        };
        (self.lo + width * bin as f64, hi)
    }

    /// CSV with header `bin_lo,bin_hi,count`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (b, c) in self.counts.iter().enumerate() {
            let (lo, hi) = self.edges(b);
            out.push_str(&format!("{lo},{hi},{c}\n"));
        }
        out
    }
}

/// Teacher confidence, student confidence and pairwise-difference histograms.
#[derive(Debug, Clone, PartialEq)]
pub struct Distributions {
    pub teacher: Histogram,
    pub student: Histogram,
    pub delta: Histogram,
    pub bot_count: usize,
}

pub fn distributions(ds: &PairedDataset, gamma: f64, bins: usize) -> Result<Distributions> {
    if bins == 0 {
        return Err(Error::invalid("histograms need at least one bin"));
    }
    let mut out = Distributions {
        teacher: Histogram::new(0.0, 1.0, bins),
        student: Histogram::new(0.0, 1.0, bins),
        delta: Histogram::new(-1.0, 1.0, bins),
        bot_count: 0,
    };
    for r in ds.records() {
        let t = confidence(&r.teacher_logits, gamma)?;
        let s = confidence(&r.student_logits, gamma)?;
        out.teacher.add(t.value);
        out.student.add(s.value);
        if t.index == s.index {
            out.delta.add(s.value - t.value);
        } else {
            out.bot_count += 1;
        }
    }
    Ok(out)
}

/// One audit row: accuracy and ECE of both models plus the sigma verdict.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceReport {
    pub acc_teacher: Option<f64>,
    pub acc_student: Option<f64>,
    pub ece_teacher: Option<f64>,
    pub ece_student: Option<f64>,
    pub sigma_result: SigmaResult,
    pub kappa: f64,
    pub holds: bool,
    pub split: SplitTag,
}

#[derive(Debug, Clone, Copy)]
pub struct AuditOptions {
    pub gamma: f64,
    pub kappa: f64,
    pub ece_bins: usize,
    pub bot_policy: BotPolicy,
}

impl Default for AuditOptions {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            kappa: DEFAULT_KAPPA,
            ece_bins: DEFAULT_ECE_BINS,
            bot_policy: BotPolicy::Zero,
        }
    }
}

#[derive(Serialize)]
struct ReportDoc {
    acc_teacher: Option<f64>,
    acc_student: Option<f64>,
    ece_teacher: Option<f64>,
    ece_student: Option<f64>,
    sigma: f64,
    n_total: usize,
    n_agree: usize,
    n_disagree: usize,
    kappa: f64,
    holds: bool,
    split: SplitTag,
}

impl ConfidenceReport {
    pub fn build(ds: &PairedDataset, opts: &AuditOptions) -> Result<Self> {
        let sigma_result = sigma(ds, opts.gamma, opts.bot_policy)?;
        let holds = verdict(&sigma_result, opts.kappa)?;
        let labelled = ds.has_labels();
        let when = |f: &dyn Fn() -> Result<f64>| -> Result<Option<f64>> {
            if labelled {
                f().map(Some)
            } else {
                Ok(None)
            }
        };
        Ok(Self {
            acc_teacher: when(&|| accuracy(ds, Side::Teacher, opts.gamma))?,
            acc_student: when(&|| accuracy(ds, Side::Student, opts.gamma))?,
            ece_teacher: when(&|| ece(ds, Side::Teacher, opts.gamma, opts.ece_bins))?,
            ece_student: when(&|| ece(ds, Side::Student, opts.gamma, opts.ece_bins))?,
            sigma_result,
            kappa: opts.kappa,
            holds,
            split: ds.split(),
        })
    }

    /// Structured-text export; absent accuracies and ECE are `null`.
    pub fn to_json(&self) -> String {
        let s = &self.sigma_result;
        crate::textfmt::to_pretty(&ReportDoc {
            acc_teacher: self.acc_teacher,
            acc_student: self.acc_student,
            ece_teacher: self.ece_teacher,
            ece_student: self.ece_student,
            sigma: s.sigma,
            n_total: s.n_total,
            n_agree: s.n_agree,
            n_disagree: s.n_disagree,
            kappa: self.kappa,
            holds: self.holds,
            split: self.split,
        })
    }
}
