//! Score-based query attacks: zeroth-order optimizers of the margin loss
//! against an [`Oracle`], sharing budget handling, projection, and success
//! bookkeeping.
//!
//! The batched driver runs all images in lockstep: every attack iteration
//! submits one full-batch oracle call, so batch-optimizing defenses see
//! realistic mixed batches. Images that succeed are frozen and their slot
//! resubmits the successful example, keeping batch composition constant.

mod bandits;
mod nes;
mod signhunter;
mod simba;
mod square;

use crate::defense::Oracle;
use crate::error::{Error, Result};
use crate::ops::{project_slice, Norm};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// The five attacks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackKind {
    Square,
    SimBA,
    SignHunter,
    Nes,
    Bandits,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Square => "square",
            AttackKind::SimBA => "simba",
            AttackKind::SignHunter => "sign",
            AttackKind::Nes => "nes",
            AttackKind::Bandits => "bandits",
        }
    }

    pub const ALL: [AttackKind; 5] = [
        AttackKind::Square,
        AttackKind::SimBA,
        AttackKind::SignHunter,
        AttackKind::Nes,
        AttackKind::Bandits,
    ];
}

impl std::str::FromStr for AttackKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "square" => Ok(AttackKind::Square),
            "simba" => Ok(AttackKind::SimBA),
            "sign" | "signhunter" => Ok(AttackKind::SignHunter),
            "nes" => Ok(AttackKind::Nes),
            "bandits" => Ok(AttackKind::Bandits),
            other => Err(Error::Config(format!("unknown attack {other:?}"))),
        }
    }
}

/// Attack parameters. Kind-specific fields are ignored by other kinds.
#[derive(Clone, Debug)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub norm: Norm,
    pub epsilon: f64,
    /// Per-image query budget.
    pub budget: u64,
    pub targeted: bool,
    pub target_labels: Option<Vec<usize>>,
    pub seed: u64,
    /// Resubmit the successful example for finished images (keeps batch
    /// composition constant). Disabling only changes query accounting.
    pub freeze_successful: bool,
    /// Square: initial fraction of pixels the square covers.
    pub square_p_init: f64,
    /// SimBA: per-coordinate step; defaults to `epsilon / 4`.
    pub simba_step: Option<f64>,
    /// NES: antithetic pairs per update.
    pub nes_samples: usize,
    /// NES: smoothing radius of the gradient estimate.
    pub nes_sigma: f64,
    /// NES: image update step.
    pub nes_step: f64,
    /// Bandits: prior learning rate.
    pub bandits_prior_lr: f64,
    /// Bandits: exploration radius in prior space.
    pub bandits_exploration: f64,
    /// Bandits: prior grid side; defaults to a quarter of the image side.
    pub bandits_tile: Option<usize>,
    /// Bandits: image update step.
    pub bandits_step: f64,
}

impl AttackConfig {
    pub fn new(kind: AttackKind) -> Self {
        AttackConfig {
            kind,
            norm: Norm::Linf,
            epsilon: 0.15,
            budget: 2500,
            targeted: false,
            target_labels: None,
            seed: 0,
            freeze_successful: true,
            square_p_init: 0.05,
            simba_step: None,
            nes_samples: 10,
            nes_sigma: 0.01,
            nes_step: 0.01,
            bandits_prior_lr: 0.1,
            bandits_exploration: 0.1,
            bandits_tile: None,
            bandits_step: 0.01,
        }
    }

    pub fn simba_step(&self) -> f64 {
        self.simba_step.unwrap_or(self.epsilon / 4.0)
    }
}

/// Margin of one probability row: positive while the attacked class wins.
pub fn margin_of_row(probs: &[f64], label: usize, targeted: bool) -> f64 {
    if targeted {
        // Success when the target class dominates.
        let target = label;
        let other = probs
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != target)
            .map(|(_, &p)| p)
            .fold(f64::NEG_INFINITY, f64::max);
        other - probs[target]
    } else {
        let other = probs
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != label)
            .map(|(_, &p)| p)
            .fold(f64::NEG_INFINITY, f64::max);
        probs[label] - other
    }
}

/// Untargeted margin per image: `probs[y] - max_{j != y} probs[j]`.
pub fn margin_loss(probs: &Tensor, labels: &[usize]) -> Vec<f64> {
    (0..probs.rows())
        .map(|i| margin_of_row(probs.row(i), labels[i], false))
        .collect()
}

/// Targeted margin per image: `max_{j != t} probs[j] - probs[t]`.
pub fn margin_loss_targeted(probs: &Tensor, targets: &[usize]) -> Vec<f64> {
    (0..probs.rows())
        .map(|i| margin_of_row(probs.row(i), targets[i], true))
        .collect()
}

/// Query counts at which best margins are sampled for curves.
pub const MARGIN_CHECKPOINTS: [u64; 8] = [1, 10, 50, 100, 250, 500, 1000, 2500];

/// Per-image attack result.
#[derive(Clone, Debug)]
pub struct ImageOutcome {
    /// Best (lowest-margin) example observed; the clean image if no query
    /// improved on it. Always inside the ball-and-box constraint.
    pub best_adv: Vec<f64>,
    /// Best margin observed; infinity when the budget was zero.
    pub best_margin: f64,
    pub success: bool,
    pub queries_used: u64,
    pub queries_to_success: Option<u64>,
    /// Best margin sampled at checkpoint query counts.
    pub margin_trace: Vec<(u64, f64)>,
}

/// Result of one batched attack run.
#[derive(Clone, Debug)]
pub struct AttackRun {
    pub kind: AttackKind,
    pub norm: Norm,
    pub epsilon: f64,
    pub budget: u64,
    pub outcomes: Vec<ImageOutcome>,
}

impl AttackRun {
    /// Fraction of attacked images broken within `budget` queries.
    pub fn success_fraction_within(&self, budget: u64) -> f64 {
        if self.outcomes.is_empty() {
            return 0.0;
        }
        let n = self
            .outcomes
            .iter()
            .filter(|o| o.queries_to_success.is_some_and(|q| q <= budget))
            .count();
        n as f64 / self.outcomes.len() as f64
    }

    /// Mean best margin over images at a checkpoint.
    pub fn mean_margin_at(&self, checkpoint: u64) -> Option<f64> {
        let vals: Vec<f64> = self
            .outcomes
            .iter()
            .filter_map(|o| {
                o.margin_trace
                    .iter()
                    .find(|(q, _)| *q == checkpoint)
                    .map(|(_, m)| *m)
            })
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    /// Final perturbations as rows `[n x image_len]`.
    pub fn final_perturbations(&self, x_orig: &Tensor) -> Tensor {
        let n = self.outcomes.len();
        let il = x_orig.row_len();
        let mut out = Tensor::zeros(&[n, il]);
        for (i, o) in self.outcomes.iter().enumerate() {
            for ((d, &adv), &orig) in out
                .row_mut(i)
                .iter_mut()
                .zip(&o.best_adv)
                .zip(x_orig.row(i))
            {
                *d = adv - orig;
            }
        }
        out
    }
}

/// Shared geometry every engine works with.
pub(crate) struct EngineBase {
    pub orig: Vec<f64>,
    pub image_len: usize,
    pub chans: usize,
    pub h: usize,
    pub w: usize,
    pub norm: Norm,
    pub epsilon: f64,
}

impl EngineBase {
    fn new(x: &Tensor, cfg: &AttackConfig) -> Self {
        let s = x.shape();
        EngineBase {
            orig: x.data().to_vec(),
            image_len: s[1] * s[2] * s[3],
            chans: s[1],
            h: s[2],
            w: s[3],
            norm: cfg.norm,
            epsilon: cfg.epsilon,
        }
    }

    pub fn orig_slice(&self, slot: usize) -> &[f64] {
        &self.orig[slot * self.image_len..(slot + 1) * self.image_len]
    }

    pub fn project(&self, slot: usize, cand: &mut [f64]) {
        project_slice(cand, self.orig_slice(slot), self.norm, self.epsilon);
    }
}

/// One attack algorithm driving candidates per slot. The driver owns
/// success bookkeeping; engines own their iterates and accept rules.
pub(crate) trait Engine {
    /// Observes the clean-point margin before any proposal.
    fn init(&mut self, slot: usize, clean_margin: f64);
    /// Writes the round's candidate (already projected) into `out`.
    fn propose(&mut self, slot: usize, round: u64, out: &mut [f64]);
    /// Observes the oracle margin of this round's candidate.
    fn digest(&mut self, slot: usize, round: u64, margin: f64);
}

fn build_engine(x: &Tensor, cfg: &AttackConfig) -> Box<dyn Engine> {
    let base = EngineBase::new(x, cfg);
    let slots = x.shape()[0];
    let root = RngStream::new(cfg.seed);
    match cfg.kind {
        AttackKind::Square => Box::new(square::SquareEngine::new(base, slots, cfg, &root)),
        AttackKind::SimBA => Box::new(simba::SimbaEngine::new(base, slots, cfg, &root)),
        AttackKind::SignHunter => Box::new(signhunter::SignHunterEngine::new(base, slots)),
        AttackKind::Nes => Box::new(nes::NesEngine::new(base, slots, cfg, &root)),
        AttackKind::Bandits => Box::new(bandits::BanditsEngine::new(base, slots, cfg, &root)),
    }
}

/// Runs the configured attack over the whole batch in lockstep.
///
/// Query accounting is per image: every round consumes one query per
/// still-active image, and the run ends when each image has either
/// succeeded or spent `cfg.budget` queries. Budget exhaustion is normal
/// termination, not an error.
pub fn run_attack<O: Oracle>(
    oracle: &mut O,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackRun> {
    let shape = x.shape();
    if shape.len() != 4 || shape[0] == 0 {
        return Err(Error::InputDomain("attack needs a nonempty image batch".into()));
    }
    let b = shape[0];
    if labels.len() != b {
        return Err(Error::ShapeMismatch {
            expected: vec![b],
            got: vec![labels.len()],
        });
    }
    if cfg.epsilon <= 0.0 {
        return Err(Error::Config("epsilon must be positive".into()));
    }
    let attack_labels: Vec<usize> = if cfg.targeted {
        match &cfg.target_labels {
            Some(t) if t.len() == b => t.clone(),
            Some(_) => {
                return Err(Error::ShapeMismatch {
                    expected: vec![b],
                    got: vec![cfg.target_labels.as_ref().unwrap().len()],
                })
            }
            None => {
                return Err(Error::Config(
                    "targeted attack needs target_labels".into(),
                ))
            }
        }
    } else {
        labels.to_vec()
    };

    let il = x.row_len();
    let mut best_margin = vec![f64::INFINITY; b];
    let mut best_adv: Vec<Vec<f64>> = (0..b).map(|i| x.row(i).to_vec()).collect();
    let mut success = vec![false; b];
    let mut queries_to_success: Vec<Option<u64>> = vec![None; b];
    let mut used = vec![0u64; b];
    let mut traces: Vec<Vec<(u64, f64)>> = vec![Vec::new(); b];

    let frozen =
        |success: &[bool], i: usize, cfg: &AttackConfig| success[i] && cfg.freeze_successful;

    if cfg.budget > 0 {
        let mut engine = build_engine(x, cfg);

        // Query 1: the clean points.
        let probs = oracle.query(x);
        for i in 0..b {
            let m = margin_of_row(probs.row(i), attack_labels[i], cfg.targeted);
            used[i] = 1;
            best_margin[i] = m;
            if m <= 0.0 {
                success[i] = true;
                queries_to_success[i] = Some(1);
            }
            engine.init(i, m);
            if MARGIN_CHECKPOINTS.contains(&1) {
                traces[i].push((1, best_margin[i]));
            }
        }

        let mut batch = Tensor::zeros(shape);
        for round in 2..=cfg.budget {
            if (0..b).all(|i| frozen(&success, i, cfg)) {
                break;
            }
            for i in 0..b {
                let slot = batch.row_mut(i);
                if frozen(&success, i, cfg) {
                    slot.copy_from_slice(&best_adv[i]);
                } else {
                    engine.propose(i, round, slot);
                }
            }
            let probs = oracle.query(&batch);
            for i in 0..b {
                if frozen(&success, i, cfg) {
                    continue;
                }
                used[i] += 1;
                let m = margin_of_row(probs.row(i), attack_labels[i], cfg.targeted);
                if m < best_margin[i] {
                    best_margin[i] = m;
                    best_adv[i].copy_from_slice(&batch.data()[i * il..(i + 1) * il]);
                }
                if best_margin[i] <= 0.0 && !success[i] {
                    success[i] = true;
                    queries_to_success[i] = Some(used[i]);
                }
                engine.digest(i, round, m);
                if MARGIN_CHECKPOINTS.contains(&used[i]) {
                    traces[i].push((used[i], best_margin[i]));
                }
            }
        }
    }

    // Align every trace on the same checkpoint grid; frozen or early-exited
    // images carry their final best margin forward.
    for i in 0..b {
        for cp in MARGIN_CHECKPOINTS {
            if cp <= cfg.budget && !traces[i].iter().any(|(q, _)| *q == cp) {
                traces[i].push((cp, best_margin[i]));
            }
        }
        traces[i].sort_by_key(|(q, _)| *q);
    }

    let outcomes = (0..b)
        .map(|i| ImageOutcome {
            best_adv: std::mem::take(&mut best_adv[i]),
            best_margin: best_margin[i],
            success: success[i],
            queries_used: used[i],
            queries_to_success: queries_to_success[i],
            margin_trace: std::mem::take(&mut traces[i]),
        })
        .collect();

    Ok(AttackRun {
        kind: cfg.kind,
        norm: cfg.norm,
        epsilon: cfg.epsilon,
        budget: cfg.budget,
        outcomes,
    })
}

#[cfg(test)]
pub(crate) mod test_oracles;

#[cfg(test)]
mod tests;
