//! End-to-end checks of the synthetic tasks and the distillation engine.

use cnf_audit::bound::{logit_mse_sum, verify_chain, DEFAULT_TOL};
use cnf_audit::data::{gen_synthetic, LabeledPoint, SplitTag, SyntheticTask};
use cnf_audit::distill::{
    distill, export_pairs, loss_eq1, train_teacher, DistillConfig, STUDENT_AGGRESSIVE_DIMS,
    STUDENT_MILD_DIMS, TEACHER_DIMS,
};
use cnf_audit::loss::Reduction;
use cnf_audit::metrics::{sigma, BotPolicy};

/// Pocket perceptron: cyclic passes, keeps the best accuracy seen.
fn perceptron_accuracy(pts: &[LabeledPoint]) -> f64 {
    let mut w = [0.0f64; 3];
    let mut best = 0.0f64;
    let score = |w: &[f64; 3], p: &LabeledPoint| w[0] * p.features[0] + w[1] * p.features[1] + w[2];
    for _ in 0..100 {
        for p in pts {
            let y = if p.label == 1 { 1.0 } else { -1.0 };
            if y * score(&w, p) <= 0.0 {
                w[0] += y * p.features[0];
                w[1] += y * p.features[1];
                w[2] += y;
            }
        }
        let hits = pts
            .iter()
            .filter(|p| (score(&w, p) > 0.0) == (p.label == 1))
            .count();
        best = best.max(hits as f64 / pts.len() as f64);
    }
    best
}

#[test]
fn moons_need_a_nonlinear_model() {
    let pts = gen_synthetic(SyntheticTask::Moons, 1000, 0.1, 7).unwrap();
    let linear = perceptron_accuracy(&pts);
    assert!(linear < 1.0);
    assert!((linear - 0.85).abs() < 1e-12, "{linear}");

    let cfg = DistillConfig {
        epochs_stg1: 60,
        ..DistillConfig::default()
    };
    let (_, log) = train_teacher(&pts, &[2, 32, 32, 2], &cfg).unwrap();
    let mlp = log.epochs.last().unwrap().train_accuracy;
    assert!(mlp > 0.95, "{mlp}");
    assert!((mlp - 0.998).abs() < 1e-12);
}

#[test]
fn frozen_moons_sigma() {
    let pts = gen_synthetic(SyntheticTask::Moons, 300, 0.2, 11).unwrap();
    let cfg = DistillConfig {
        seed: 11,
        ..DistillConfig::default()
    };
    let (t, _) = train_teacher(&pts, &TEACHER_DIMS, &cfg).unwrap();
    let (s, _) = distill(&t, &pts, &STUDENT_MILD_DIMS, &cfg).unwrap();
    let ds = export_pairs(&t, &s, &pts, SplitTag::Train).unwrap();
    let r = sigma(&ds, 1.0, BotPolicy::Zero).unwrap();
    assert!((r.sigma - 0.06417402750988695).abs() < 1e-6, "{r:?}");
    assert_eq!((r.n_agree, r.n_disagree), (291, 9));
}

#[test]
fn blobs_pipeline_respects_the_loss_bound() {
    let pts = gen_synthetic(SyntheticTask::Blobs, 400, 1.0, 3).unwrap();
    let cfg = DistillConfig::default();
    let (t, _) = train_teacher(&pts, &TEACHER_DIMS, &cfg).unwrap();
    for dims in [&STUDENT_MILD_DIMS[..], &STUDENT_AGGRESSIVE_DIMS[..]] {
        let (s, log) = distill(&t, &pts, dims, &cfg).unwrap();
        let ds = export_pairs(&t, &s, &pts, SplitTag::Train).unwrap();
        let sig = sigma(&ds, 1.0, BotPolicy::Zero).unwrap().sigma;
        let l_dist = loss_eq1(&pts, &t, &s, 0.0, 1.0, Reduction::Sum).unwrap();
        assert!((l_dist - logit_mse_sum(&ds)).abs() <= 1e-9 * l_dist.max(1.0));
        // the last logged epoch is the final student
        let logged = log.stage(2).last().unwrap().sum_form_loss;
        assert!((logged - l_dist).abs() <= 1e-9 * l_dist.max(1.0));
        assert!(sig < (l_dist / pts.len() as f64).sqrt());
        let chain = verify_chain(&ds, 1.0, 0.0, l_dist, DEFAULT_TOL).unwrap();
        assert!(chain.all_hold, "{chain:?}");
    }
}

#[test]
fn sum_form_loss_is_independent_of_batching() {
    let pts = gen_synthetic(SyntheticTask::Xor, 97, 0.3, 5).unwrap();
    let cfg = DistillConfig {
        epochs_stg1: 3,
        ..DistillConfig::default()
    };
    let (t, _) = train_teacher(&pts, &[2, 16, 2], &cfg).unwrap();
    let (s, _) = distill(&t, &pts, &[2, 4, 2], &cfg).unwrap();
    for alpha in [0.0, 0.3, 1.0] {
        let full = loss_eq1(&pts, &t, &s, alpha, 1.0, Reduction::Sum).unwrap();
        for batch in [1, 7, 32] {
            let parts: f64 = pts
                .chunks(batch)
                .map(|c| loss_eq1(c, &t, &s, alpha, 1.0, Reduction::Sum).unwrap())
                .sum();
            assert!((parts - full).abs() <= 1e-9 * full.abs().max(1.0));
            let means: f64 = pts
                .chunks(batch)
                .map(|c| c.len() as f64 * loss_eq1(c, &t, &s, alpha, 1.0, Reduction::Mean).unwrap())
                .sum();
            assert!((means - full).abs() <= 1e-9 * full.abs().max(1.0));
        }
    }
}

#[test]
fn training_is_deterministic() {
    let pts = gen_synthetic(SyntheticTask::Moons, 200, 0.2, 9).unwrap();
    let cfg = DistillConfig {
        epochs_stg1: 5,
        seed: 9,
        ..DistillConfig::default()
    };
    let (t1, l1) = train_teacher(&pts, &[2, 16, 16, 2], &cfg).unwrap();
    let (t2, l2) = train_teacher(&pts, &[2, 16, 16, 2], &cfg).unwrap();
    assert_eq!(t1.to_json(), t2.to_json());
    assert_eq!(l1, l2);
    let (s1, _) = distill(&t1, &pts, &[2, 4, 2], &cfg).unwrap();
    let (s2, _) = distill(&t2, &pts, &[2, 4, 2], &cfg).unwrap();
    assert_eq!(s1.to_json(), s2.to_json());
    let other = DistillConfig { seed: 10, ..cfg };
    let (t3, _) = train_teacher(&pts, &[2, 16, 16, 2], &other).unwrap();
    assert_ne!(t1, t3);
}
