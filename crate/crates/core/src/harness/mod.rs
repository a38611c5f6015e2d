//! Evaluation protocol: clean accuracy, logit distortion, robust accuracy
//! at query-budget checkpoints, margin curves, and the universality score
//! of final perturbations.

mod report;
mod sweep;

pub use report::{read_json, write_csv, write_curves, write_json, write_sweep_csv, CSV_HEADER};
pub use sweep::{run_sweep, SweepAxis, SweepRow, SweepSpec};

use crate::attack::{run_attack, AttackConfig, MARGIN_CHECKPOINTS};
use crate::data::Dataset;
use crate::defense::{logit_diff, DefenseKind, Oracle, QueryOracle};
use crate::error::{Error, Result};
use crate::model::ClassifierModel;
use crate::ops::{argmax, pairwise_cosine};
use crate::tensor::Tensor;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Aggregated result of one (defense, attack) evaluation cell.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub model_id: String,
    pub defense: String,
    pub defense_params: String,
    pub attack: String,
    pub norm: String,
    pub epsilon: f64,
    pub seed: u64,
    pub clean_accuracy: f64,
    /// Robust accuracy at each requested budget, ascending.
    pub robust_accuracy: Vec<(u64, f64)>,
    pub logit_diff: f64,
    /// Mean best margin over attacked images at checkpoint query counts.
    pub margin_curve: Vec<(u64, f64)>,
    /// Mean pairwise cosine of final perturbations; absent when fewer than
    /// two images were perturbed.
    pub universality: Option<f64>,
    pub wall_time_s: f64,
}

/// Evaluation-wide settings.
#[derive(Clone, Debug)]
pub struct EvalConfig {
    /// Images drawn from the head of the dataset.
    pub n_eval: usize,
    /// Oracle batch size; also the defense's optimization batch.
    pub batch: usize,
    pub budgets: Vec<u64>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_eval: 128,
            batch: 128,
            budgets: vec![100, 2500],
            seed: 0,
        }
    }
}

/// Clean accuracy under a defense, batched.
fn defended_clean_correct(
    model: &ClassifierModel,
    kind: &DefenseKind,
    data: &Dataset,
    indices: &[usize],
    batch: usize,
    seed: u64,
    reservoir: Option<&Dataset>,
) -> Vec<bool> {
    let mut correct = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch.max(1)) {
        let (x, y) = data.batch(chunk);
        let mut oracle = QueryOracle::new(model, kind.clone(), seed);
        if let Some(r) = reservoir {
            oracle = oracle.with_reservoir(r);
        }
        let probs = oracle.query(&x);
        for (i, &label) in y.iter().enumerate() {
            correct.push(argmax(probs.row(i)) == label);
        }
    }
    correct
}

/// Runs the full protocol for one defense against a set of attacks.
///
/// Only images the defended model classifies correctly are attacked;
/// misclassified ones count as non-robust at every budget. A single run at
/// the largest budget yields every smaller budget checkpoint through the
/// recorded success query counts.
pub fn eval_defense(
    model: &ClassifierModel,
    kind: &DefenseKind,
    attack_cfgs: &[AttackConfig],
    dataset: &Dataset,
    eval: &EvalConfig,
    reservoir: Option<&Dataset>,
) -> Result<Vec<EvalReport>> {
    if dataset.is_empty() {
        return Err(Error::InputDomain("empty evaluation dataset".into()));
    }
    let mut budgets = eval.budgets.clone();
    budgets.sort_unstable();
    budgets.dedup();
    if budgets.is_empty() {
        return Err(Error::Config("no budgets requested".into()));
    }
    let n_eval = eval.n_eval.min(dataset.len());
    let indices: Vec<usize> = (0..n_eval).collect();

    let clean_correct = defended_clean_correct(
        model,
        kind,
        dataset,
        &indices,
        eval.batch,
        eval.seed,
        reservoir,
    );
    let clean_accuracy =
        clean_correct.iter().filter(|&&c| c).count() as f64 / n_eval as f64;
    let ld = logit_diff(
        model,
        kind,
        &dataset.select(&indices),
        eval.batch,
        eval.seed ^ 0x10f1,
    )?;

    let attacked: Vec<usize> = indices
        .iter()
        .copied()
        .filter(|&i| clean_correct[i])
        .collect();

    let reports: Vec<Result<EvalReport>> = attack_cfgs
        .par_iter()
        .enumerate()
        .map(|(ai, cfg)| {
            let start = Instant::now();
            let max_budget = *budgets.last().unwrap();
            let mut run_cfg = cfg.clone();
            run_cfg.budget = max_budget;
            run_cfg.seed = cfg.seed ^ (ai as u64).wrapping_mul(0x9E37);

            // Per-image success budgets and perturbations over all attacked
            // batches.
            let mut success_at: Vec<Option<u64>> = Vec::with_capacity(attacked.len());
            let mut perturbation_rows: Vec<f64> = Vec::new();
            let mut margin_totals: Vec<(u64, f64, usize)> = MARGIN_CHECKPOINTS
                .iter()
                .filter(|&&cp| cp <= max_budget)
                .map(|&cp| (cp, 0.0, 0usize))
                .collect();

            for (bi, chunk) in attacked.chunks(eval.batch.max(2)).enumerate() {
                let (x, y) = dataset.batch(chunk);
                let mut oracle = QueryOracle::new(
                    model,
                    kind.clone(),
                    eval.seed ^ (0xA77 + bi as u64 + (ai as u64) << 8),
                );
                if let Some(r) = reservoir {
                    oracle = oracle.with_reservoir(r);
                }
                let run = run_attack(&mut oracle, &x, &y, &run_cfg)?;
                for o in &run.outcomes {
                    success_at.push(o.queries_to_success.filter(|_| o.success));
                }
                let perts = run.final_perturbations(&x);
                perturbation_rows.extend_from_slice(perts.data());
                for (cp, total, count) in margin_totals.iter_mut() {
                    if let Some(m) = run.mean_margin_at(*cp) {
                        *total += m * run.outcomes.len() as f64;
                        *count += run.outcomes.len();
                    }
                }
            }

            let robust_accuracy: Vec<(u64, f64)> = budgets
                .iter()
                .map(|&b| {
                    let surviving = success_at
                        .iter()
                        .filter(|s| !s.is_some_and(|q| q <= b))
                        .count();
                    (b, surviving as f64 / n_eval as f64)
                })
                .collect();

            let margin_curve: Vec<(u64, f64)> = margin_totals
                .iter()
                .filter(|(_, _, n)| *n > 0)
                .map(|(cp, total, n)| (*cp, total / *n as f64))
                .collect();

            let universality = if attacked.len() >= 2 {
                let il = dataset.images.row_len();
                let mat = Tensor::new(&[attacked.len(), il], perturbation_rows.clone())
                    .expect("perturbation matrix");
                pairwise_cosine(&mat).ok()
            } else {
                None
            };

            Ok(EvalReport {
                model_id: dataset.name.clone(),
                defense: kind.name().into(),
                defense_params: kind.params_string(),
                attack: cfg.kind.name().into(),
                norm: cfg.norm.name().into(),
                epsilon: cfg.epsilon,
                seed: eval.seed,
                clean_accuracy,
                robust_accuracy,
                logit_diff: ld,
                margin_curve,
                universality,
                wall_time_s: start.elapsed().as_secs_f64(),
            })
        })
        .collect();

    reports.into_iter().collect()
}

/// Robust accuracy of one report at a budget, if recorded.
pub fn robust_at(report: &EvalReport, budget: u64) -> Option<f64> {
    report
        .robust_accuracy
        .iter()
        .find(|(b, _)| *b == budget)
        .map(|(_, v)| *v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::AttackKind;
    use crate::data::gen_synthetic_dataset;
    use crate::model::{build_model, ArchKind};
    use crate::rng::RngStream;

    fn tiny_setup() -> (ClassifierModel, Dataset) {
        let mut rng = RngStream::new(70);
        let model = build_model(
            ArchKind::Cnn {
                conv1: 2,
                conv2: 3,
                feat_dim: 8,
            },
            (1, 8, 8),
            3,
            &mut rng,
        )
        .unwrap();
        let data = gen_synthetic_dataset(3, 24, 8, 2).unwrap();
        (model, data)
    }

    #[test]
    fn zero_budget_robust_equals_clean() {
        let (model, data) = tiny_setup();
        let mut cfg = AttackConfig::new(AttackKind::Square);
        cfg.budget = 0;
        let eval = EvalConfig {
            n_eval: 24,
            batch: 8,
            budgets: vec![0],
            seed: 1,
        };
        let reports =
            eval_defense(&model, &DefenseKind::Vanilla, &[cfg], &data, &eval, None).unwrap();
        let r = &reports[0];
        assert_eq!(robust_at(r, 0).unwrap(), r.clean_accuracy);
    }

    #[test]
    fn robust_accuracy_non_increasing_in_budget() {
        let (model, data) = tiny_setup();
        let cfg = AttackConfig::new(AttackKind::Square);
        let eval = EvalConfig {
            n_eval: 16,
            batch: 8,
            budgets: vec![5, 20, 60],
            seed: 2,
        };
        let reports =
            eval_defense(&model, &DefenseKind::Vanilla, &[cfg], &data, &eval, None).unwrap();
        let r = &reports[0];
        for w in r.robust_accuracy.windows(2) {
            assert!(w[1].1 <= w[0].1);
        }
        assert!(r.robust_accuracy.iter().all(|(_, v)| (0.0..=1.0).contains(v)));
        assert!(r.clean_accuracy >= r.robust_accuracy.last().unwrap().1);
    }

    #[test]
    fn reports_are_seed_reproducible() {
        let (model, data) = tiny_setup();
        let cfg = AttackConfig::new(AttackKind::SimBA);
        let eval = EvalConfig {
            n_eval: 12,
            batch: 6,
            budgets: vec![30],
            seed: 3,
        };
        let mut a = eval_defense(
            &model,
            &DefenseKind::Rnd { sigma: 0.02 },
            &[cfg.clone()],
            &data,
            &eval,
            None,
        )
        .unwrap();
        let mut b = eval_defense(
            &model,
            &DefenseKind::Rnd { sigma: 0.02 },
            &[cfg],
            &data,
            &eval,
            None,
        )
        .unwrap();
        a[0].wall_time_s = 0.0;
        b[0].wall_time_s = 0.0;
        assert_eq!(a, b);
    }
}
