//! Gradient estimation with a data-dependent prior: a low-resolution
//! latent gradient estimate is updated from antithetic finite differences
//! and upsampled to drive sign steps at image resolution.

use super::{AttackConfig, Engine, EngineBase};
use crate::ops::sign0;
use crate::rng::RngStream;
use crate::tensor::l2_norm;

pub(crate) struct BanditsEngine {
    base: EngineBase,
    prior_h: usize,
    prior_w: usize,
    prior_lr: f64,
    exploration: f64,
    step: f64,
    pub(crate) slots: Vec<Slot>,
}

pub(crate) struct Slot {
    rng: RngStream,
    cur: Vec<f64>,
    pub(crate) prior: Vec<f64>,
    u: Vec<f64>,
    plus_margin: f64,
    exploring_minus: bool,
}

impl BanditsEngine {
    pub fn new(base: EngineBase, slots: usize, cfg: &AttackConfig, root: &RngStream) -> Self {
        let tile = cfg.bandits_tile.unwrap_or_else(|| (base.h / 4).max(1));
        let prior_h = tile.clamp(1, base.h);
        let prior_w = tile.clamp(1, base.w);
        let prior_len = base.chans * prior_h * prior_w;
        BanditsEngine {
            prior_h,
            prior_w,
            prior_lr: cfg.bandits_prior_lr,
            exploration: cfg.bandits_exploration,
            step: cfg.bandits_step,
            slots: (0..slots)
                .map(|i| Slot {
                    rng: root.derive(i as u64),
                    cur: vec![0.0; base.image_len],
                    prior: vec![0.0; prior_len],
                    u: vec![0.0; prior_len],
                    plus_margin: 0.0,
                    exploring_minus: false,
                })
                .collect(),
            base,
        }
    }

    /// Nearest-neighbor upsample from the prior grid to image resolution.
    pub(crate) fn upsample(&self, prior: &[f64], out: &mut [f64]) {
        let (c, h, w) = (self.base.chans, self.base.h, self.base.w);
        let (ph, pw) = (self.prior_h, self.prior_w);
        for ch in 0..c {
            for y in 0..h {
                let py = (y * ph / h).min(ph - 1);
                for x in 0..w {
                    let px = (x * pw / w).min(pw - 1);
                    out[(ch * h + y) * w + x] = prior[(ch * ph + py) * pw + px];
                }
            }
        }
    }
}

impl Engine for BanditsEngine {
    fn init(&mut self, slot: usize, _clean_margin: f64) {
        let orig = self.base.orig_slice(slot).to_vec();
        self.slots[slot].cur = orig;
    }

    fn propose(&mut self, slot: usize, _round: u64, out: &mut [f64]) {
        let delta = self.exploration;
        {
            let s = &mut self.slots[slot];
            if !s.exploring_minus {
                s.rng.fill_normal(&mut s.u, 0.0, 1.0);
            }
        }
        let s = &self.slots[slot];
        let sign = if s.exploring_minus { -1.0 } else { 1.0 };
        let probe_prior: Vec<f64> = s
            .prior
            .iter()
            .zip(&s.u)
            .map(|(&v, &u)| v + sign * delta * u)
            .collect();
        let mut dir = vec![0.0; self.base.image_len];
        self.upsample(&probe_prior, &mut dir);
        let n = l2_norm(&dir);
        let scale = if n > 0.0 { delta / n } else { 0.0 };
        let s = &self.slots[slot];
        for ((o, &c), &d) in out.iter_mut().zip(&s.cur).zip(&dir) {
            *o = c + scale * d;
        }
        self.base.project(slot, out);
    }

    fn digest(&mut self, slot: usize, _round: u64, margin: f64) {
        let (delta, lr, step) = (self.exploration, self.prior_lr, self.step);
        {
            let s = &mut self.slots[slot];
            if !s.exploring_minus {
                s.plus_margin = margin;
                s.exploring_minus = true;
                return;
            }
            // Finite-difference estimate of the margin slope along u in
            // prior space; the prior tracks the margin gradient.
            let fd = (s.plus_margin - margin) / (2.0 * delta);
            for (v, &u) in s.prior.iter_mut().zip(&s.u) {
                *v += lr * fd * u;
            }
            s.exploring_minus = false;
        }
        let mut dir = vec![0.0; self.base.image_len];
        self.upsample(&self.slots[slot].prior, &mut dir);
        let s = &mut self.slots[slot];
        for (c, &d) in s.cur.iter_mut().zip(&dir) {
            *c -= step * sign0(d);
        }
        let mut cur = std::mem::take(&mut s.cur);
        self.base.project(slot, &mut cur);
        self.slots[slot].cur = cur;
    }
}
