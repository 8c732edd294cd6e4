//! Checks, on concrete data, the inequality chain that bounds sigma by the
//! distillation loss, and the threshold that chain implies.

use serde::Serialize;

use crate::data::PairedDataset;
use crate::error::{Error, Result};
use crate::metrics::{self, BotPolicy, KahanSum};

/// Default absolute slack for every chain step.
pub const DEFAULT_TOL: f64 = 1e-9;

/// Sum over records of the squared Euclidean logit gap.
pub fn logit_mse_sum(ds: &PairedDataset) -> f64 {
    ds.records()
        .iter()
        .map(|r| crate::loss::squared_distance(&r.teacher_logits, &r.student_logits))
        .collect::<KahanSum>()
        .total()
}

/// `gamma * sqrt(beta / (n * (1 - alpha)))`: the sigma threshold implied by a
/// total loss of at most `beta`.
pub fn kappa_from_bound(gamma: f64, beta: f64, alpha: f64, n: usize) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(Error::invalid(format!("gamma must be > 0, got {gamma}")));
    }
    if !(beta >= 0.0) {
        return Err(Error::invalid(format!("beta must be >= 0, got {beta}")));
    }
    check_alpha(alpha)?;
    if n == 0 {
        return Err(Error::invalid("n must be >= 1"));
    }
    Ok(gamma * (beta / (n as f64 * (1.0 - alpha))).sqrt())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "alpha must lie in [0, 1), got {alpha}"
        )))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundChainReport {
    /// `sigma^2 * n`, i.e. the sum of squared confidence differences.
    pub lhs_sigma_sq_n: f64,
    /// `gamma^2 * sum ||z_s - z_b||^2`.
    pub mid_gamma_sq_logit_mse: f64,
    /// The loss value the chain is checked against.
    pub beta: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub sigma: f64,
    pub logit_mse_sum: f64,
    /// `gamma^2 * beta / (1 - alpha)`.
    pub rhs_loss_bound: f64,
    pub kappa_theoretical: f64,
    pub tol: f64,
    pub step1_holds: bool,
    pub step2_holds: bool,
    pub step3_holds: bool,
    /// Right side minus left side of each step; negative means violated.
    pub slack1: f64,
    pub slack2: f64,
    pub slack3: f64,
    pub all_hold: bool,
}

#[derive(Serialize)]
struct ChainDoc {
    step1_holds: bool,
    step2_holds: bool,
    step3_holds: bool,
    sigma: f64,
    kappa_theoretical: f64,
    slack1: f64,
    slack2: f64,
    slack3: f64,
}

impl BoundChainReport {
    /// How much of the Lipschitz budget the confidence differences use.
    /// `None` when the logits coincide exactly.
    pub fn lhs_mid_ratio(&self) -> Option<f64> {
        (self.mid_gamma_sq_logit_mse > 0.0)
            .then(|| self.lhs_sigma_sq_n / self.mid_gamma_sq_logit_mse)
    }

    pub fn to_json(&self) -> String {
        crate::textfmt::to_pretty(&ChainDoc {
            step1_holds: self.step1_holds,
            step2_holds: self.step2_holds,
            step3_holds: self.step3_holds,
            sigma: self.sigma,
            kappa_theoretical: self.kappa_theoretical,
            slack1: self.slack1,
            slack2: self.slack2,
            slack3: self.slack3,
        })
    }
}

/// Checks, in order:
/// 1. `sum delta^2 <= gamma^2 * sum ||z_s - z_b||^2`
/// 2. `(1 - alpha) * sum ||z_s - z_b||^2 <= observed_loss`
/// 3. `sigma <= gamma * sqrt(observed_loss / (n * (1 - alpha)))`
///
/// each up to `tol`. `observed_loss` must be the sum-form combined loss on
/// `ds`; sigma uses the zero policy for disagreements.
pub fn verify_chain(
    ds: &PairedDataset,
    gamma: f64,
    alpha: f64,
    observed_loss: f64,
    tol: f64,
) -> Result<BoundChainReport> {
    check_alpha(alpha)?;
    if !(tol >= 0.0) {
        return Err(Error::invalid(format!("tol must be >= 0, got {tol}")));
    }
    let sig = metrics::sigma(ds, gamma, BotPolicy::Zero)?;
    let n = sig.n_total as f64;
    let lhs = sig.sigma * sig.sigma * n;
    let mse = logit_mse_sum(ds);
    let mid = gamma * gamma * mse;
    let kappa = kappa_from_bound(gamma, observed_loss, alpha, sig.n_total)?;

    let slack1 = mid - lhs;
    let slack2 = observed_loss - (1.0 - alpha) * mse;
    let slack3 = kappa - sig.sigma;
    let (step1_holds, step2_holds, step3_holds) = (slack1 >= -tol, slack2 >= -tol, slack3 >= -tol);
    Ok(BoundChainReport {
        lhs_sigma_sq_n: lhs,
        mid_gamma_sq_logit_mse: mid,
        beta: observed_loss,
        alpha,
        gamma,
        sigma: sig.sigma,
        logit_mse_sum: mse,
        rhs_loss_bound: gamma * gamma * observed_loss / (1.0 - alpha),
        kappa_theoretical: kappa,
        tol,
        step1_holds,
        step2_holds,
        step3_holds,
        slack1,
        slack2,
        slack3,
        all_hold: step1_holds && step2_holds && step3_holds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{PairedLogitRecord, SplitTag};
    use crate::loss::{paired_loss, Reduction};
    use proptest::prelude::*;

    fn ds(pairs: &[(&[f64], &[f64])]) -> PairedDataset {
        PairedDataset::new(
            pairs
                .iter()
                .enumerate()
                .map(|(i, (t, s))| PairedLogitRecord {
                    id: i.to_string(),
                    teacher_logits: t.to_vec(),
                    student_logits: s.to_vec(),
                    label: Some(0),
                })
                .collect(),
            SplitTag::Train,
        )
        .unwrap()
    }

    #[test]
    fn logit_mse_examples() {
        assert_eq!(logit_mse_sum(&ds(&[(&[1.0, 0.0], &[0.0, 0.0])])), 1.0);
        assert_eq!(logit_mse_sum(&ds(&[(&[1.0, 2.0], &[1.0, 2.0])])), 0.0);
        let two = ds(&[(&[0.3, -0.4], &[0.0, 0.0]), (&[1.3, 0.6], &[1.0, 1.0])]);
        assert!((logit_mse_sum(&two) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kappa_examples() {
        assert!((kappa_from_bound(1.0, 4.0, 0.0, 400).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(kappa_from_bound(1.0, 0.0, 0.3, 10).unwrap(), 0.0);
        let k1 = kappa_from_bound(1.0, 2.5, 0.2, 17).unwrap();
        let k2 = kappa_from_bound(2.0, 2.5, 0.2, 17).unwrap();
        assert!((k2 - 2.0 * k1).abs() < 1e-15);
        assert!(kappa_from_bound(1.0, 1.0, 1.0, 10).is_err());
        assert!(kappa_from_bound(1.0, -1.0, 0.0, 10).is_err());
    }

    #[test]
    fn identical_models_satisfy_every_step() {
        let d = ds(&[(&[1.0, 2.0], &[1.0, 2.0]), (&[0.0, -1.0], &[0.0, -1.0])]);
        for gamma in [0.5, 1.0, 3.0] {
            let r = verify_chain(&d, gamma, 0.0, 0.0, DEFAULT_TOL).unwrap();
            assert!(r.all_hold);
            assert_eq!(r.lhs_sigma_sq_n, 0.0);
            assert_eq!(r.lhs_mid_ratio(), None);
        }
    }

    #[test]
    fn handmade_two_records() {
        let d = ds(&[(&[2.0, 0.0], &[1.0, 0.0]), (&[1.0, 1.0], &[1.0, 1.0])]);
        let loss = logit_mse_sum(&d);
        assert_eq!(loss, 1.0);
        let r = verify_chain(&d, 1.0, 0.0, loss, DEFAULT_TOL).unwrap();
        // delta = e/(e+1) - e^2/(e^2+1) on the first record only
        let e = std::f64::consts::E;
        let delta = e / (e + 1.0) - e * e / (e * e + 1.0);
        assert!((r.lhs_sigma_sq_n - delta * delta).abs() < 1e-12);
        assert_eq!(r.mid_gamma_sq_logit_mse, 1.0);
        assert!((r.kappa_theoretical - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(r.step1_holds && r.step2_holds && r.step3_holds && r.all_hold);
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v.as_object().unwrap().len(), 8);
    }

    #[test]
    fn understated_loss_fails_step_two() {
        let d = ds(&[(&[2.0, 0.0], &[1.0, 0.0])]);
        let r = verify_chain(&d, 1.0, 0.0, 0.5, DEFAULT_TOL).unwrap();
        assert!(r.step1_holds);
        assert!(!r.step2_holds);
        assert!(!r.all_hold);
        assert!(verify_chain(&d, 1.0, 1.0, 0.5, DEFAULT_TOL).is_err());
    }

    proptest! {
        #[test]
        fn chain_holds_for_sum_form_loss(
            rows in prop::collection::vec((prop::collection::vec(-5.0f64..5.0, 3), prop::collection::vec(-0.5f64..0.5, 3), 0usize..3), 1..40),
            gamma in prop::sample::select(vec![0.5, 1.0, 2.0]),
            alpha in 0.0f64..0.9,
        ) {
            let records = rows.iter().enumerate().map(|(i, (t, d, l))| PairedLogitRecord {
                id: i.to_string(),
                teacher_logits: t.clone(),
                student_logits: t.iter().zip(d).map(|(a, b)| a + b).collect(),
                label: Some(*l),
            }).collect();
            let d = PairedDataset::new(records, SplitTag::Train).unwrap();
            let loss = paired_loss(&d, alpha, gamma, Reduction::Sum).unwrap();
            let r = verify_chain(&d, gamma, alpha, loss, DEFAULT_TOL).unwrap();
            prop_assert!(r.step1_holds && r.step2_holds && r.step3_holds);
            if let Some(ratio) = r.lhs_mid_ratio() {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&ratio));
            }
            if alpha == 0.0 && gamma == 1.0 {
                prop_assert!(r.sigma <= (logit_mse_sum(&d) / d.len() as f64).sqrt() + 1e-9);
            }
        }

        #[test]
        fn kappa_monotone(beta in 0.0f64..100.0, gamma in 0.1f64..5.0, n in 1usize..1000, alpha in 0.0f64..0.99) {
            let k = kappa_from_bound(gamma, beta, alpha, n).unwrap();
            prop_assert!(kappa_from_bound(gamma, beta + 1.0, alpha, n).unwrap() >= k);
            prop_assert!(kappa_from_bound(gamma * 1.5, beta, alpha, n).unwrap() >= k);
            prop_assert!(kappa_from_bound(gamma, beta, alpha, n + 1).unwrap() <= k);
        }
    }
}
