//! Prediction-layer distillation loss on logits:
//! `alpha * CE(softmax_gamma(z_student), t) + (1 - alpha) * ||z_teacher - z_student||^2`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::PairedDataset;
use crate::error::{Error, Result};
use crate::metrics::KahanSum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    Mean,
}

impl FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Self::Sum),
            "mean" => Ok(Self::Mean),
            other => Err(Error::Unknown {
                kind: "reduction",
                name: other.into(),
            }),
        }
    }
}

impl fmt::Display for Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sum => "sum",
            Self::Mean => "mean",
        })
    }
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )))
    }
}

/// `log(sum_j exp(gamma * z_j))`, stabilised by the maximum logit.
pub(crate) fn log_sum_exp(z: &[f64], gamma: f64) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    gamma * max
        + z.iter()
            .map(|&v| (gamma * (v - max)).exp())
            .sum::<f64>()
            .ln()
}

/// Cross-entropy of `softmax_gamma(z)` against a one-hot target.
pub fn cross_entropy(z: &[f64], label: usize, gamma: f64) -> f64 {
    log_sum_exp(z, gamma) - gamma * z[label]
}

/// Squared Euclidean distance between two logit vectors.
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Per-sample loss terms accumulated over a set of samples.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    /// Summed cross-entropy (zero when it was not needed).
    pub ce: f64,
    /// Summed squared logit distance.
    pub distill: f64,
    pub count: usize,
}

impl LossTerms {
    pub fn combine(&self, alpha: f64, reduction: Reduction) -> f64 {
        let scale = match reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / self.count as f64,
        };
        // alpha = 0 or 1 drops the other term entirely, even if it is huge
        let ce = if alpha > 0.0 { alpha * self.ce } else { 0.0 };
        let distill = if alpha < 1.0 {
            (1.0 - alpha) * self.distill
        } else {
            0.0
        };
        scale * (ce + distill)
    }
}

/// Accumulates the loss terms over `(teacher, student, label)` triples.
/// Labels are required only when `alpha > 0`.
pub fn accumulate<'a, I>(items: I, alpha: f64, gamma: f64) -> Result<LossTerms>
where
    I: IntoIterator<Item = (&'a [f64], &'a [f64], Option<usize>)>,
{
    check_alpha(alpha)?;
    let mut ce = KahanSum::default();
    let mut distill = KahanSum::default();
    let mut count = 0;
    for (teacher, student, label) in items {
        if teacher.len() != student.len() {
            return Err(Error::Shape {
                expected: teacher.len(),
                got: student.len(),
            });
        }
        if alpha > 0.0 {
            let label = label.ok_or_else(|| Error::MissingLabel(format!("#{count}")))?;
            ce.add(cross_entropy(student, label, gamma));
        }
        distill.add(squared_distance(teacher, student));
        count += 1;
    }
    if count == 0 {
        return Err(Error::invalid("loss over an empty batch"));
    }
    Ok(LossTerms {
        ce: ce.total(),
        distill: distill.total(),
        count,
    })
}

/// The combined loss evaluated directly on a paired-logit dataset.
pub fn paired_loss(
    ds: &PairedDataset,
    alpha: f64,
    gamma: f64,
    reduction: Reduction,
) -> Result<f64> {
    let terms = accumulate(
        ds.records().iter().map(|r| {
            (
                r.teacher_logits.as_slice(),
                r.student_logits.as_slice(),
                r.label,
            )
        }),
        alpha,
        gamma,
    )
    .map_err(|e| match e {
        Error::MissingLabel(_) => Error::invalid("alpha > 0 needs labels on every record"),
        e => e,
    })?;
    Ok(terms.combine(alpha, reduction))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(t: &[f64], s: &[f64], label: Option<usize>, alpha: f64) -> f64 {
        accumulate([(t, s, label)], alpha, 1.0)
            .unwrap()
            .combine(alpha, Reduction::Sum)
    }

    #[test]
    fn pure_logit_mse() {
        assert_eq!(one(&[1.0, 0.0], &[0.0, 0.0], None, 0.0), 1.0);
    }

    #[test]
    fn half_mix() {
        let l = one(&[1.0, 0.0], &[0.0, 0.0], Some(0), 0.5);
        assert!((l - (0.5 * 2f64.ln() + 0.5)).abs() < 1e-12);
        assert!((l - 0.84657).abs() < 1e-5);
    }

    #[test]
    fn alpha_one_is_cross_entropy() {
        let l = one(&[1e3, -1e3], &[0.0, 0.0], Some(1), 1.0);
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_is_stable() {
        let ce = cross_entropy(&[1000.0, 0.0], 0, 1.0);
        assert!(ce.abs() < 1e-12);
        let ce = cross_entropy(&[1000.0, 0.0], 1, 1.0);
        assert!((ce - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn labels_needed_only_with_cross_entropy() {
        assert!(accumulate([(&[1.0, 0.0][..], &[0.0, 0.0][..], None)], 0.5, 1.0).is_err());
        assert!(accumulate([(&[1.0, 0.0][..], &[0.0, 0.0][..], None)], 1.5, 1.0).is_err());
    }

    #[test]
    fn mean_divides_by_count() {
        let t = accumulate(
            [
                (&[1.0, 0.0][..], &[0.0, 0.0][..], Some(0)),
                (&[0.0, 3.0][..], &[0.0, 0.0][..], Some(1)),
            ],
            0.0,
            1.0,
        )
        .unwrap();
        assert_eq!(t.combine(0.0, Reduction::Sum), 10.0);
        assert_eq!(t.combine(0.0, Reduction::Mean), 5.0);
    }
}
