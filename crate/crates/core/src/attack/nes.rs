//! Natural evolution strategies: antithetic Gaussian probes estimate the
//! margin gradient, then the iterate takes a sign step and re-projects.

use super::{AttackConfig, Engine, EngineBase};
use crate::ops::sign0;
use crate::rng::RngStream;

pub(crate) struct NesEngine {
    base: EngineBase,
    pairs: usize,
    sigma: f64,
    step: f64,
    pub(crate) slots: Vec<Slot>,
}

pub(crate) struct Slot {
    rng: RngStream,
    cur: Vec<f64>,
    pub(crate) u: Vec<f64>,
    pub(crate) grad_accum: Vec<f64>,
    pub(crate) plus_margin: f64,
    phase: usize,
}

impl NesEngine {
    pub fn new(base: EngineBase, slots: usize, cfg: &AttackConfig, root: &RngStream) -> Self {
        let il = base.image_len;
        NesEngine {
            pairs: cfg.nes_samples.max(1),
            sigma: cfg.nes_sigma,
            step: cfg.nes_step,
            slots: (0..slots)
                .map(|i| Slot {
                    rng: root.derive(i as u64),
                    cur: vec![0.0; il],
                    u: vec![0.0; il],
                    grad_accum: vec![0.0; il],
                    plus_margin: 0.0,
                    phase: 0,
                })
                .collect(),
            base,
        }
    }
}

impl Engine for NesEngine {
    fn init(&mut self, slot: usize, _clean_margin: f64) {
        let orig = self.base.orig_slice(slot).to_vec();
        self.slots[slot].cur = orig;
    }

    fn propose(&mut self, slot: usize, _round: u64, out: &mut [f64]) {
        let sigma = self.sigma;
        let s = &mut self.slots[slot];
        if s.phase % 2 == 0 {
            s.rng.fill_normal(&mut s.u, 0.0, 1.0);
            for ((o, &c), &u) in out.iter_mut().zip(&s.cur).zip(&s.u) {
                *o = c + sigma * u;
            }
        } else {
            for ((o, &c), &u) in out.iter_mut().zip(&s.cur).zip(&s.u) {
                *o = c - sigma * u;
            }
        }
        self.base.project(slot, out);
    }

    fn digest(&mut self, slot: usize, _round: u64, margin: f64) {
        let (pairs, sigma, step) = (self.pairs, self.sigma, self.step);
        let s = &mut self.slots[slot];
        if s.phase % 2 == 0 {
            s.plus_margin = margin;
            s.phase += 1;
            return;
        }
        let diff = s.plus_margin - margin;
        for (g, &u) in s.grad_accum.iter_mut().zip(&s.u) {
            *g += diff * u;
        }
        s.phase += 1;
        if s.phase == 2 * pairs {
            // grad ~ sum_j (l+ - l-) u_j / (2 n sigma); only the sign is used.
            let scale = 1.0 / (2.0 * pairs as f64 * sigma);
            for (c, g) in s.cur.iter_mut().zip(&s.grad_accum) {
                *c -= step * sign0(g * scale);
            }
            let mut cur = std::mem::take(&mut s.cur);
            self.base.project(slot, &mut cur);
            let s = &mut self.slots[slot];
            s.cur = cur;
            s.grad_accum.fill(0.0);
            s.phase = 0;
        }
    }
}
