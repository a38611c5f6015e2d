//! Random search with localized square-shaped perturbations.
//!
//! Initialization places full-strength vertical stripes of width one; each
//! later candidate rewrites a randomly placed square of the perturbation
//! with a fresh per-channel sign at full strength. Candidates are accepted
//! only on a strict margin decrease. The square side follows a
//! budget-relative halving schedule.
//!
//! Proposal geometry (stripe signs, square position and signs) is drawn
//! once per round from a round-keyed stream and shared by every slot of
//! the lockstep batch; acceptance stays per-image. Keying by round keeps
//! runs reproducible and independent of how many slots are still active.

use super::{AttackConfig, Engine, EngineBase};
use crate::rng::RngStream;

/// Budget fractions at which the square fraction halves.
const SCHEDULE: [f64; 4] = [0.05, 0.2, 0.5, 0.8];

pub(crate) struct SquareEngine {
    base: EngineBase,
    p_init: f64,
    budget: u64,
    seed: u64,
    round_cached: u64,
    stripe_signs: Vec<f64>,
    square: (usize, usize, usize, Vec<f64>), // (side, py, px, per-channel signs)
    slots: Vec<Slot>,
}

struct Slot {
    cur: Vec<f64>,
    cur_margin: f64,
    cand: Vec<f64>,
}

impl SquareEngine {
    pub fn new(base: EngineBase, slots: usize, cfg: &AttackConfig, root: &RngStream) -> Self {
        let il = base.image_len;
        SquareEngine {
            p_init: cfg.square_p_init,
            budget: cfg.budget,
            seed: root.seed(),
            round_cached: 0,
            stripe_signs: Vec::new(),
            square: (0, 0, 0, Vec::new()),
            slots: (0..slots)
                .map(|_| Slot {
                    cur: vec![0.0; il],
                    cur_margin: f64::INFINITY,
                    cand: vec![0.0; il],
                })
                .collect(),
            base,
        }
    }

    /// Current square fraction, halved at each elapsed schedule fraction.
    pub(crate) fn p_at(&self, round: u64) -> f64 {
        let frac = (round - 1) as f64 / self.budget.max(1) as f64;
        let halvings = SCHEDULE.iter().filter(|&&f| frac >= f).count();
        self.p_init * 0.5f64.powi(halvings as i32)
    }

    /// Draws this round's shared geometry once.
    fn refresh_geometry(&mut self, round: u64) {
        if self.round_cached == round {
            return;
        }
        self.round_cached = round;
        let mut rng = RngStream::new(self.seed).derive(round);
        let (h, w, chans) = (self.base.h, self.base.w, self.base.chans);
        if round == 2 {
            self.stripe_signs = (0..chans * w).map(|_| rng.sign()).collect();
        } else {
            let p_t = self.p_at(round);
            let side = ((p_t * (h * w) as f64).sqrt().round() as usize).clamp(1, h.min(w));
            let py = rng.below(h - side + 1);
            let px = rng.below(w - side + 1);
            let signs = (0..chans).map(|_| rng.sign()).collect();
            self.square = (side, py, px, signs);
        }
    }
}

impl Engine for SquareEngine {
    fn init(&mut self, slot: usize, clean_margin: f64) {
        let orig = self.base.orig_slice(slot).to_vec();
        let s = &mut self.slots[slot];
        s.cur = orig;
        s.cur_margin = clean_margin;
    }

    fn propose(&mut self, slot: usize, round: u64, out: &mut [f64]) {
        self.refresh_geometry(round);
        let (h, w, chans, eps) = (self.base.h, self.base.w, self.base.chans, self.base.epsilon);
        if round == 2 {
            // Vertical +-eps stripes of width 1 over the original image.
            let orig = self.base.orig_slice(slot);
            let s = &mut self.slots[slot];
            s.cand.copy_from_slice(orig);
            for c in 0..chans {
                for x in 0..w {
                    let sign = self.stripe_signs[c * w + x];
                    for y in 0..h {
                        let idx = (c * h + y) * w + x;
                        s.cand[idx] = orig[idx] + sign * eps;
                    }
                }
            }
        } else {
            let (side, py, px, ref signs) = self.square;
            let orig = self.base.orig_slice(slot);
            let s = &mut self.slots[slot];
            s.cand.copy_from_slice(&s.cur);
            for (c, &sign) in signs.iter().enumerate() {
                for y in py..py + side {
                    for x in px..px + side {
                        let idx = (c * h + y) * w + x;
                        s.cand[idx] = orig[idx] + sign * eps;
                    }
                }
            }
        }
        let s = &mut self.slots[slot];
        let mut cand = std::mem::take(&mut s.cand);
        self.base.project(slot, &mut cand);
        out.copy_from_slice(&cand);
        self.slots[slot].cand = cand;
    }

    fn digest(&mut self, slot: usize, round: u64, margin: f64) {
        let s = &mut self.slots[slot];
        if round == 2 {
            // The stripe initialization is adopted as the starting point.
            s.cur.copy_from_slice(&s.cand);
            s.cur_margin = margin;
        } else if margin < s.cur_margin {
            s.cur.copy_from_slice(&s.cand);
            s.cur_margin = margin;
        }
    }
}
