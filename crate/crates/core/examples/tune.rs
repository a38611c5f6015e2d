//! Scratch harness for desk-scale parameter exploration.

use std::time::Instant;

use unig_core::attack::{run_attack, AttackConfig, AttackKind};
use unig_core::data::gen_synthetic_dataset;
use unig_core::defense::{DefenseKind, QueryOracle};
use unig_core::model::{train_classifier, ArchConfig, TrainConfig};
use unig_core::unig::{unig_forward, UniGConfig};
use unig_core::RngStream;

fn main() {
    let stage = std::env::args().nth(1).unwrap_or_else(|| "all".into());

    let t0 = Instant::now();
    let data = gen_synthetic_dataset(4, 4000, 16, 7).unwrap();
    println!("dataset: {} images {:?}", data.len(), data.input_shape());

    let arch = ArchConfig::default();
    let train_cfg = TrainConfig::default();
    let model = match train_classifier(&data, &arch, &train_cfg) {
        Ok(m) => m,
        Err(e) => {
            println!("TRAINING FAILED: {e}");
            return;
        }
    };
    println!("trained in {:.1}s", t0.elapsed().as_secs_f64());

    // Held-out evaluation set, disjoint seed from training data.
    let eval_data = gen_synthetic_dataset(4, 256, 16, 1007).unwrap();
    let idx: Vec<usize> = (0..256).collect();
    let (x_eval, y_eval) = eval_data.batch(&idx);
    let probs = model.forward_probs(&x_eval).unwrap();
    let clean_acc = unig_core::ops::accuracy(&probs, &y_eval);
    println!("vanilla clean acc on fresh eval set: {clean_acc:.4}");

    if stage == "alpha" || stage == "all" {
        // Clean-accuracy preservation + loss descent per alpha.
        for alpha in [0.1, 0.15, 0.2, 0.3, 0.4, 0.5] {
            let cfg = UniGConfig {
                alpha,
                ..UniGConfig::default()
            };
            // Clean accuracy under the defense, batch 128.
            let mut correct = 0;
            for (bi, chunk) in idx.chunks(128).enumerate() {
                let (x, y) = eval_data.batch(chunk);
                let call = UniGConfig {
                    seed: 555 + bi as u64,
                    ..cfg
                };
                let out = unig_forward(&model, &x, &call).unwrap();
                for (i, &label) in y.iter().enumerate() {
                    if unig_core::ops::argmax(out.probs.row(i)) == label {
                        correct += 1;
                    }
                }
            }
            // Descent rate over 100 random batches of 128.
            let mut rng = RngStream::new(99);
            let mut descents = 0;
            let mut ratios = Vec::new();
            for t in 0..100 {
                let picks: Vec<usize> = (0..128).map(|_| rng.below(data.len())).collect();
                let (x, _) = data.batch(&picks);
                let call = UniGConfig {
                    seed: 7000 + t as u64,
                    ..cfg
                };
                let out = unig_forward(&model, &x, &call).unwrap();
                let tr = &out.state.trace;
                if tr[1] < tr[0] {
                    descents += 1;
                }
                ratios.push(tr[1] / tr[0]);
            }
            ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
            println!(
                "alpha {alpha:6.2}: clean {}/256, descent {descents}/100, median loss ratio {:.4}",
                correct, ratios[50]
            );
        }
    }

    if stage == "potency" || stage == "all" {
        let sub: Vec<usize> = (0..128).collect();
        let (x, y) = eval_data.batch(&sub);
        for kind in AttackKind::ALL {
            let t = Instant::now();
            let mut cfg = AttackConfig::new(kind);
            cfg.budget = 2500;
            cfg.seed = 3;
            let mut oracle = QueryOracle::new(&model, DefenseKind::Vanilla, 11);
            let run = run_attack(&mut oracle, &x, &y, &cfg).unwrap();
            let succ = run.outcomes.iter().filter(|o| o.success).count();
            let robust = 128 - succ;
            println!(
                "vanilla {:9} budget 2500: robust {robust}/128 ({:.1}%), {:.1}s",
                kind.name(),
                robust as f64 / 1.28,
                t.elapsed().as_secs_f64()
            );
        }
    }


    if stage == "extras" {
        use unig_core::ops::pairwise_cosine;
        use unig_core::unig::cascade_single_sample;
        use unig_core::Tensor;
        let sub: Vec<usize> = (0..128).collect();
        let (x, y) = eval_data.batch(&sub);

        // Universality: cosine of final square perturbations, unig vs vanilla.
        for seed in [0u64, 1, 2] {
            let mut cos = Vec::new();
            for dk in [
                DefenseKind::Vanilla,
                DefenseKind::UniG(UniGConfig::default()),
            ] {
                let mut cfg = AttackConfig::new(AttackKind::Square);
                cfg.budget = 1000;
                cfg.seed = seed;
                let mut oracle = QueryOracle::new(&model, dk, 20 + seed);
                let run = run_attack(&mut oracle, &x, &y, &cfg).unwrap();
                let perts = run.final_perturbations(&x);
                cos.push(pairwise_cosine(&perts).unwrap());
            }
            println!(
                "seed {seed}: universality vanilla {:.4} unig {:.4} ratio {:.2}",
                cos[0], cos[1], cos[1] / cos[0]
            );
        }

        // Margin ordering at checkpoint 1000 under square.
        for seed in [0u64, 1, 2] {
            let mut vals = Vec::new();
            for dk in [
                DefenseKind::Vanilla,
                DefenseKind::Rnd { sigma: 0.02 },
                DefenseKind::UniG(UniGConfig::default()),
            ] {
                let mut cfg = AttackConfig::new(AttackKind::Square);
                cfg.budget = 1000;
                cfg.seed = seed;
                let mut oracle = QueryOracle::new(&model, dk, 30 + seed);
                let run = run_attack(&mut oracle, &x, &y, &cfg).unwrap();
                vals.push(run.mean_margin_at(1000).unwrap());
            }
            println!(
                "seed {seed}: margin@1000 vanilla {:.4} rnd {:.4} unig {:.4}",
                vals[0], vals[1], vals[2]
            );
        }

        // Square-size degradation for unig: p_init 0.05 -> 0.3.
        for budget in [100u64, 500, 1000, 2500] {
            for p_init in [0.05, 0.1, 0.2, 0.3] {
                let mut cfg = AttackConfig::new(AttackKind::Square);
                cfg.budget = budget;
                cfg.square_p_init = p_init;
                cfg.seed = 4;
                let mut oracle =
                    QueryOracle::new(&model, DefenseKind::UniG(UniGConfig::default()), 40);
                let run = run_attack(&mut oracle, &x, &y, &cfg).unwrap();
                let robust = 128 - run.outcomes.iter().filter(|o| o.success).count();
                println!("unig square p_init {p_init} budget {budget}: robust {robust}/128");
            }
        }

        // Cascade mode: clean accuracy and 100-query square robustness.
        let cas_cfg = UniGConfig {
            cascade_k: 10,
            ..UniGConfig::default()
        };
        let mut correct = 0;
        for (i, &idx) in sub.iter().enumerate() {
            let img = Tensor::new(&[1, 1, 16, 16], eval_data.image(idx).to_vec()).unwrap();
            let call = UniGConfig { seed: 900 + i as u64, ..cas_cfg };
            let out = cascade_single_sample(&model, &img, &data, &call).unwrap();
            if unig_core::ops::argmax(out.probs.row(0)) == y[i] {
                correct += 1;
            }
        }
        println!("cascade clean: {correct}/128");
        let t = Instant::now();
        let mut robust = 0;
        for (i, &idx) in sub.iter().enumerate().take(64) {
            let img = Tensor::new(&[1, 1, 16, 16], eval_data.image(idx).to_vec()).unwrap();
            let mut cfg = AttackConfig::new(AttackKind::Square);
            cfg.budget = 100;
            cfg.seed = 50 + i as u64;
            let mut oracle = QueryOracle::new(
                &model,
                DefenseKind::UniG(cas_cfg),
                60 + i as u64,
            )
            .with_reservoir(&data);
            let run = run_attack(&mut oracle, &img, &[y[i]], &cfg).unwrap();
            if !run.outcomes[0].success {
                robust += 1;
            }
        }
        println!("cascade square@100: robust {robust}/64, {:.1}s", t.elapsed().as_secs_f64());
        // Vanilla baseline at 100 queries on the same 64 images.
        let (x64, y64) = eval_data.batch(&sub[..64]);
        let mut cfg = AttackConfig::new(AttackKind::Square);
        cfg.budget = 100;
        cfg.seed = 70;
        let mut oracle = QueryOracle::new(&model, DefenseKind::Vanilla, 71);
        let run = run_attack(&mut oracle, &x64, &y64, &cfg).unwrap();
        let robust = 64 - run.outcomes.iter().filter(|o| o.success).count();
        println!("vanilla square@100: robust {robust}/64");
    }

    if stage == "defense" || stage == "all" {
        let sub: Vec<usize> = (0..128).collect();
        let (x, y) = eval_data.batch(&sub);
        for alpha in [0.1, 0.2, 0.3, 0.5] {
            for kindname in ["square", "simba"] {
                let akind = if kindname == "square" {
                    AttackKind::Square
                } else {
                    AttackKind::SimBA
                };
                let mut cfg = AttackConfig::new(akind);
                cfg.budget = 1000;
                cfg.seed = 5;
                let t = Instant::now();
                let unig = DefenseKind::UniG(UniGConfig {
                    alpha,
                    ..UniGConfig::default()
                });
                let mut oracle = QueryOracle::new(&model, unig, 13);
                let run = run_attack(&mut oracle, &x, &y, &cfg).unwrap();
                let robust = 128 - run.outcomes.iter().filter(|o| o.success).count();
                println!(
                    "unig(alpha={alpha}) {kindname} budget 1000: robust {robust}/128, {:.1}s",
                    t.elapsed().as_secs_f64()
                );
            }
        }
        for kindname in ["square", "simba"] {
            let akind = if kindname == "square" {
                AttackKind::Square
            } else {
                AttackKind::SimBA
            };
            let mut cfg = AttackConfig::new(akind);
            cfg.budget = 1000;
            cfg.seed = 5;
            for (dname, dk) in [
                ("vanilla", DefenseKind::Vanilla),
                ("rnd0.02", DefenseKind::Rnd { sigma: 0.02 }),
            ] {
                let t = Instant::now();
                let mut oracle = QueryOracle::new(&model, dk, 13);
                let run = run_attack(&mut oracle, &x, &y, &cfg).unwrap();
                let robust = 128 - run.outcomes.iter().filter(|o| o.success).count();
                println!(
                    "{dname} {kindname} budget 1000: robust {robust}/128, {:.1}s",
                    t.elapsed().as_secs_f64()
                );
            }
        }
    }
}
