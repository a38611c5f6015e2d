use super::test_oracles::{CountingOracle, MarginOracle};
use super::*;
use crate::defense::{DefenseKind, QueryOracle};
use crate::model::{build_model, ArchKind, ClassifierModel};
use crate::tensor::{dot, l2_norm, linf_norm};

fn flat_image(values: &[f64]) -> Tensor {
    Tensor::new(&[1, 1, 1, values.len()], values.to_vec()).unwrap()
}

fn mid_batch(b: usize, side: usize) -> Tensor {
    Tensor::filled(&[b, 1, side, side], 0.5)
}

#[test]
fn margin_loss_values() {
    let probs = Tensor::new(&[1, 3], vec![0.7, 0.2, 0.1]).unwrap();
    assert!((margin_loss(&probs, &[0])[0] - 0.5).abs() < 1e-12);
    let probs = Tensor::new(&[1, 2], vec![0.5, 0.5]).unwrap();
    assert_eq!(margin_loss(&probs, &[0])[0], 0.0);
    let probs = Tensor::new(&[1, 4], vec![0.25; 4]).unwrap();
    for y in 0..4 {
        assert_eq!(margin_loss(&probs, &[y])[0], 0.0);
    }
}

#[test]
fn targeted_margin_is_untargeted_dual_in_two_classes() {
    let probs = Tensor::new(&[1, 2], vec![0.8, 0.2]).unwrap();
    let untargeted = margin_loss(&probs, &[0])[0];
    let targeted = margin_loss_targeted(&probs, &[1])[0];
    assert!((untargeted - targeted).abs() < 1e-12);
}

#[test]
fn zero_budget_returns_clean_images() {
    let x = mid_batch(3, 4);
    let mut oracle = MarginOracle {
        margin_fn: |_, _| 0.9,
    };
    let mut cfg = AttackConfig::new(AttackKind::Square);
    cfg.budget = 0;
    let run = run_attack(&mut oracle, &x, &[0, 0, 0], &cfg).unwrap();
    for (i, o) in run.outcomes.iter().enumerate() {
        assert_eq!(o.best_adv, x.row(i));
        assert!(!o.success);
        assert_eq!(o.queries_used, 0);
        assert!(o.best_margin.is_infinite());
        assert!(o.margin_trace.is_empty());
    }
}

#[test]
fn already_misclassified_succeeds_at_query_one() {
    let x = mid_batch(2, 4);
    let mut oracle = MarginOracle {
        margin_fn: |_, _| -0.2,
    };
    for kind in AttackKind::ALL {
        let mut cfg = AttackConfig::new(kind);
        cfg.budget = 5;
        let run = run_attack(&mut oracle, &x, &[0, 0], &cfg).unwrap();
        for o in &run.outcomes {
            assert!(o.success);
            assert_eq!(o.queries_to_success, Some(1));
        }
    }
}

#[test]
fn square_succeeds_when_large_perturbations_misclassify() {
    // Margin falls with perturbation size; the stripe init already reaches
    // the misclassification region.
    let x = mid_batch(1, 6);
    let orig = x.row(0).to_vec();
    let mut oracle = MarginOracle {
        margin_fn: move |_, q: &[f64]| {
            let dev = q
                .iter()
                .zip(&orig)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            0.6 - 6.0 * dev
        },
    };
    let mut cfg = AttackConfig::new(AttackKind::Square);
    cfg.epsilon = 0.2;
    cfg.budget = 10;
    let run = run_attack(&mut oracle, &x, &[0], &cfg).unwrap();
    assert!(run.outcomes[0].success);
    assert!(run.outcomes[0].queries_to_success.unwrap() <= 3);
}

#[test]
fn square_schedule_halves_at_budget_fractions() {
    let x = mid_batch(1, 8);
    let cfg = AttackConfig::new(AttackKind::Square);
    let base = EngineBase::new(&x, &cfg);
    let engine = square::SquareEngine::new(base, 1, &cfg, &RngStream::new(0));
    let b = cfg.budget;
    let p0 = cfg.square_p_init;
    assert_eq!(engine.p_at(2), p0);
    assert_eq!(engine.p_at((b as f64 * 0.05) as u64 + 1), p0 * 0.5);
    assert_eq!(engine.p_at((b as f64 * 0.2) as u64 + 1), p0 * 0.25);
    assert_eq!(engine.p_at((b as f64 * 0.5) as u64 + 1), p0 * 0.125);
    assert_eq!(engine.p_at((b as f64 * 0.8) as u64 + 1), p0 * 0.0625);
}

#[test]
fn simba_rejects_everything_on_flat_oracle() {
    let x = mid_batch(1, 4);
    let mut oracle = MarginOracle {
        margin_fn: |_, _| 0.5,
    };
    let mut cfg = AttackConfig::new(AttackKind::SimBA);
    cfg.budget = 40;
    let run = run_attack(&mut oracle, &x, &[0], &cfg).unwrap();
    assert_eq!(run.outcomes[0].best_adv, x.row(0));
    assert!(!run.outcomes[0].success);
}

#[test]
fn simba_one_pixel_matches_exhaustive_best() {
    // One-pixel image, margin monotone in the pixel: the accepted direction
    // must match the brute-force best of {+step, -step}.
    let x = flat_image(&[0.5]);
    let weight = 0.8;
    let margin = move |q: &[f64]| 0.3 + weight * (q[0] - 0.5);
    let mut oracle = MarginOracle {
        margin_fn: move |_, q: &[f64]| margin(q),
    };
    let mut cfg = AttackConfig::new(AttackKind::SimBA);
    cfg.epsilon = 0.2;
    cfg.budget = 3;
    let run = run_attack(&mut oracle, &x, &[0], &cfg).unwrap();
    let step = cfg.simba_step();
    // Brute force over the two candidate moves (projection is a no-op here).
    let best_dir = if margin(&[0.5 + step]) < margin(&[0.5 - step]) {
        0.5 + step
    } else {
        0.5 - step
    };
    let got = run.outcomes[0].best_adv[0];
    let want = best_dir.min(margin(&[0.5]).min(1.0)).min(1.0);
    let _ = want;
    assert!((got - best_dir).abs() < 1e-12, "got {got}, want {best_dir}");
}

#[test]
fn simba_small_budget_touches_at_most_one_basis_direction() {
    let x = mid_batch(1, 4);
    let mut oracle = MarginOracle {
        margin_fn: |_, _| 0.5,
    };
    for budget in [1u64, 2] {
        let mut cfg = AttackConfig::new(AttackKind::SimBA);
        cfg.budget = budget;
        let run = run_attack(&mut oracle, &x, &[0], &cfg).unwrap();
        let changed = run.outcomes[0]
            .best_adv
            .iter()
            .zip(x.row(0))
            .filter(|(a, b)| a != b)
            .count();
        assert!(changed <= 1, "budget {budget} changed {changed} pixels");
    }
}

#[test]
fn signhunter_matches_brute_force_on_two_pixels() {
    let x = flat_image(&[0.5, 0.5]);
    let eps = 0.3;
    let margin = |q: &[f64]| 0.4 + 0.9 * (q[0] - 0.5) - 0.7 * (q[1] - 0.5);
    let mut oracle = MarginOracle {
        margin_fn: move |_, q: &[f64]| margin(q),
    };
    let mut cfg = AttackConfig::new(AttackKind::SignHunter);
    cfg.epsilon = eps;
    cfg.budget = 7;
    let run = run_attack(&mut oracle, &x, &[0], &cfg).unwrap();
    // Exhaustive enumeration of the four sign patterns.
    let mut best = margin(&[0.5, 0.5]);
    for s0 in [-1.0, 1.0] {
        for s1 in [-1.0, 1.0] {
            let q = [(0.5 + s0 * eps).clamp(0.0, 1.0), (0.5 + s1 * eps).clamp(0.0, 1.0)];
            best = best.min(margin(&q));
        }
    }
    assert!(
        (run.outcomes[0].best_margin - best).abs() < 1e-12,
        "got {}, brute force {best}",
        run.outcomes[0].best_margin
    );
}

#[test]
fn signhunter_keeps_all_plus_signs_on_flat_oracle() {
    let x = mid_batch(1, 3);
    let cfg = {
        let mut c = AttackConfig::new(AttackKind::SignHunter);
        c.budget = 30;
        c
    };
    let base = EngineBase::new(&x, &cfg);
    let mut engine = signhunter::SignHunterEngine::new(base, 1);
    engine.init(0, 0.5);
    let mut buf = vec![0.0; 9];
    for round in 2..=30u64 {
        engine.propose(0, round, &mut buf);
        engine.digest(0, round, 0.5); // constant margin, nothing accepted
    }
    assert!(engine.slots[0].signs.iter().all(|&s| s == 1.0));
}

#[test]
fn signhunter_accepted_flips_decrease_margin() {
    let x = mid_batch(2, 4);
    let weights: Vec<f64> = (0..16).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect();
    let w2 = weights.clone();
    let mut oracle = MarginOracle {
        margin_fn: move |_, q: &[f64]| 0.5 + dot(q, &w2) - 0.25,
    };
    let mut cfg = AttackConfig::new(AttackKind::SignHunter);
    cfg.budget = 64;
    let run = run_attack(&mut oracle, &x, &[0, 0], &cfg).unwrap();
    for o in &run.outcomes {
        for w in o.margin_trace.windows(2) {
            assert!(w[1].1 <= w[0].1, "best margin trace must be non-increasing");
        }
    }
}

#[test]
fn nes_estimate_aligns_with_linear_gradient() {
    // Synthetic linear margin l(q) = w . q: the expectation of the
    // antithetic estimator is proportional to w.
    let dim = 16;
    let x = Tensor::filled(&[1, 1, 4, 4], 0.5);
    let mut rng = RngStream::new(99);
    let w: Vec<f64> = (0..dim).map(|_| rng.normal(0.0, 1.0)).collect();

    let mut cfg = AttackConfig::new(AttackKind::Nes);
    cfg.nes_samples = 200;
    cfg.nes_sigma = 0.01;
    cfg.epsilon = 10.0; // keep projection inactive
    let base = EngineBase::new(&x, &cfg);
    let mut engine = nes::NesEngine::new(base, 1, &cfg, &RngStream::new(3));
    engine.init(0, 0.5);
    let mut buf = vec![0.0; dim];
    let mut estimate = vec![0.0; dim];
    for round in 0..(2 * cfg.nes_samples as u64) {
        engine.propose(0, round + 2, &mut buf);
        let m = 0.5 + dot(&buf, &w) * 0.01;
        // Capture the accumulator right before the final digest resets it.
        if round == 2 * cfg.nes_samples as u64 - 1 {
            let s = &engine.slots[0];
            let diff = s.plus_margin - m;
            estimate = s
                .grad_accum
                .iter()
                .zip(&s.u)
                .map(|(g, &u)| g + diff * u)
                .collect();
        }
        engine.digest(0, round + 2, m);
    }
    let cos = dot(&estimate, &w) / (l2_norm(&estimate) * l2_norm(&w));
    assert!(cos >= 0.9, "cosine {cos}");
}

#[test]
fn nes_zero_step_never_moves_the_iterate() {
    let x = mid_batch(2, 4);
    let orig0 = x.row(0).to_vec();
    let mut oracle = MarginOracle {
        margin_fn: move |_, q: &[f64]| {
            // Clean point is the unique margin minimum nearby.
            0.5 + q.iter().zip(&orig0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        },
    };
    let mut cfg = AttackConfig::new(AttackKind::Nes);
    cfg.nes_step = 0.0;
    cfg.budget = 50;
    let run = run_attack(&mut oracle, &x, &[0, 0], &cfg).unwrap();
    assert_eq!(run.outcomes[0].best_adv, x.row(0));
}

#[test]
fn bandits_zero_prior_lr_keeps_clean_iterate() {
    let x = mid_batch(1, 4);
    let orig = x.row(0).to_vec();
    let mut oracle = MarginOracle {
        margin_fn: move |_, q: &[f64]| {
            0.5 + q.iter().zip(&orig).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        },
    };
    let mut cfg = AttackConfig::new(AttackKind::Bandits);
    cfg.bandits_prior_lr = 0.0;
    cfg.budget = 41;
    let run = run_attack(&mut oracle, &x, &[0], &cfg).unwrap();
    // sign(0) = 0: with the prior stuck at zero the image step is zero.
    assert_eq!(run.outcomes[0].best_adv, x.row(0));
}

#[test]
fn bandits_prior_aligns_with_linear_gradient() {
    let dim = 16;
    let x = Tensor::filled(&[1, 1, 4, 4], 0.5);
    let mut rng = RngStream::new(17);
    let w: Vec<f64> = (0..dim).map(|_| rng.normal(0.0, 1.0)).collect();

    let mut cfg = AttackConfig::new(AttackKind::Bandits);
    cfg.bandits_tile = Some(2);
    cfg.epsilon = 10.0;
    cfg.bandits_step = 0.0; // isolate the prior update
    let base = EngineBase::new(&x, &cfg);
    let mut engine = bandits::BanditsEngine::new(base, 1, &cfg, &RngStream::new(5));
    engine.init(0, 0.5);
    let mut buf = vec![0.0; dim];
    for round in 0..1000u64 {
        engine.propose(0, round + 2, &mut buf);
        let m = 0.5 + dot(&buf, &w) * 0.05;
        engine.digest(0, round + 2, m);
    }
    let mut up = vec![0.0; dim];
    let prior = engine.slots[0].prior.clone();
    engine.upsample(&prior, &mut up);
    let cos = dot(&up, &w) / (l2_norm(&up) * l2_norm(&w));
    assert!(cos > 0.0, "cosine {cos}");
}

fn small_model() -> ClassifierModel {
    let mut rng = RngStream::new(60);
    build_model(
        ArchKind::Cnn {
            conv1: 2,
            conv2: 3,
            feat_dim: 8,
        },
        (1, 8, 8),
        2,
        &mut rng,
    )
    .unwrap()
}

fn model_batch(b: usize, seed: u64) -> Tensor {
    let mut rng = RngStream::new(seed);
    Tensor::from_fn(&[b, 1, 8, 8], |_| rng.uniform())
}

#[test]
fn every_attack_respects_ball_box_and_budget() {
    let model = small_model();
    let x = model_batch(4, 8);
    let labels = vec![0, 1, 0, 1];
    for kind in AttackKind::ALL {
        for norm in [Norm::Linf, Norm::L2] {
            let mut cfg = AttackConfig::new(kind);
            cfg.norm = norm;
            cfg.epsilon = if norm == Norm::Linf { 0.12 } else { 1.0 };
            cfg.budget = 60;
            let mut oracle = QueryOracle::new(&model, DefenseKind::Vanilla, 1);
            let run = run_attack(&mut oracle, &x, &labels, &cfg).unwrap();
            for (i, o) in run.outcomes.iter().enumerate() {
                let diff: Vec<f64> =
                    o.best_adv.iter().zip(x.row(i)).map(|(a, b)| a - b).collect();
                match norm {
                    Norm::Linf => assert!(linf_norm(&diff) <= cfg.epsilon + 1e-6),
                    Norm::L2 => assert!(l2_norm(&diff) <= cfg.epsilon + 1e-6),
                }
                assert!(o.best_adv.iter().all(|&v| (-1e-6..=1.0 + 1e-6).contains(&v)));
                assert!(o.queries_used <= cfg.budget);
                if let Some(q) = o.queries_to_success {
                    assert!(q <= cfg.budget);
                }
                for wpair in o.margin_trace.windows(2) {
                    assert!(wpair[1].1 <= wpair[0].1 + 1e-12);
                }
            }
        }
    }
}

#[test]
fn counter_matches_sum_of_batch_sizes() {
    let model = small_model();
    let x = model_batch(3, 9);
    let labels = vec![0, 1, 1];
    let mut cfg = AttackConfig::new(AttackKind::Square);
    cfg.budget = 25;
    cfg.freeze_successful = true;
    let inner = QueryOracle::new(&model, DefenseKind::Vanilla, 2);
    let mut counting = CountingOracle::new(inner);
    run_attack(&mut counting, &x, &labels, &cfg).unwrap();
    assert_eq!(counting.inner.query_count(), counting.images_seen);
    assert_eq!(counting.images_seen, counting.calls * 3);
}

#[test]
fn identical_seeds_reproduce_runs_exactly() {
    let model = small_model();
    let x = model_batch(3, 10);
    let labels = vec![0, 1, 0];
    for kind in AttackKind::ALL {
        let mut cfg = AttackConfig::new(kind);
        cfg.budget = 40;
        cfg.seed = 77;
        let mut o1 = QueryOracle::new(&model, DefenseKind::Vanilla, 5);
        let r1 = run_attack(&mut o1, &x, &labels, &cfg).unwrap();
        let mut o2 = QueryOracle::new(&model, DefenseKind::Vanilla, 5);
        let r2 = run_attack(&mut o2, &x, &labels, &cfg).unwrap();
        for (a, b) in r1.outcomes.iter().zip(&r2.outcomes) {
            assert_eq!(a.best_adv, b.best_adv);
            assert_eq!(a.best_margin.to_bits(), b.best_margin.to_bits());
            assert_eq!(a.margin_trace, b.margin_trace);
            assert_eq!(a.queries_to_success, b.queries_to_success);
        }
    }
}

#[test]
fn targeted_equals_untargeted_dual_in_two_classes() {
    let model = small_model();
    let x = model_batch(3, 11);
    let labels = vec![0, 1, 0];
    let targets: Vec<usize> = labels.iter().map(|&y| 1 - y).collect();
    let mut base = AttackConfig::new(AttackKind::Square);
    base.budget = 50;
    base.seed = 3;
    let mut untargeted_cfg = base.clone();
    untargeted_cfg.targeted = false;
    let mut targeted_cfg = base;
    targeted_cfg.targeted = true;
    targeted_cfg.target_labels = Some(targets);

    let mut o1 = QueryOracle::new(&model, DefenseKind::Vanilla, 6);
    let run_u = run_attack(&mut o1, &x, &labels, &untargeted_cfg).unwrap();
    let mut o2 = QueryOracle::new(&model, DefenseKind::Vanilla, 6);
    let run_t = run_attack(&mut o2, &x, &labels, &targeted_cfg).unwrap();
    for (a, b) in run_u.outcomes.iter().zip(&run_t.outcomes) {
        assert_eq!(a.success, b.success);
        assert_eq!(a.best_adv, b.best_adv);
        assert!((a.best_margin - b.best_margin).abs() < 1e-12);
    }
}

#[test]
fn disabling_freeze_changes_accounting_not_success() {
    let model = small_model();
    let x = model_batch(4, 12);
    let labels = vec![0, 0, 1, 1];
    let mut cfg = AttackConfig::new(AttackKind::Square);
    cfg.budget = 80;
    cfg.seed = 9;
    let mut frozen_cfg = cfg.clone();
    frozen_cfg.freeze_successful = true;
    let mut live_cfg = cfg;
    live_cfg.freeze_successful = false;

    let mut o1 = QueryOracle::new(&model, DefenseKind::Vanilla, 7);
    let run_f = run_attack(&mut o1, &x, &labels, &frozen_cfg).unwrap();
    let mut o2 = QueryOracle::new(&model, DefenseKind::Vanilla, 7);
    let run_l = run_attack(&mut o2, &x, &labels, &live_cfg).unwrap();
    for (a, b) in run_f.outcomes.iter().zip(&run_l.outcomes) {
        assert_eq!(a.success, b.success);
        assert_eq!(a.queries_to_success, b.queries_to_success);
        if a.success {
            assert!(a.queries_used <= b.queries_used);
        }
    }
}

#[test]
fn batch_of_one_is_reproducible() {
    let model = small_model();
    let x = model_batch(1, 13);
    let mut cfg = AttackConfig::new(AttackKind::Square);
    cfg.budget = 30;
    let mut o1 = QueryOracle::new(&model, DefenseKind::Vanilla, 8);
    let a = run_attack(&mut o1, &x, &[0], &cfg).unwrap();
    let mut o2 = QueryOracle::new(&model, DefenseKind::Vanilla, 8);
    let b = run_attack(&mut o2, &x, &[0], &cfg).unwrap();
    assert_eq!(a.outcomes[0].best_adv, b.outcomes[0].best_adv);
}
