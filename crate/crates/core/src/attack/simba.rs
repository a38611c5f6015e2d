//! Simple black-box attack: walk a seeded random permutation of the pixel
//! basis, keeping a +-step move whenever the margin strictly decreases.

use super::{AttackConfig, Engine, EngineBase};
use crate::rng::RngStream;

pub(crate) struct SimbaEngine {
    base: EngineBase,
    step: f64,
    slots: Vec<Slot>,
}

struct Slot {
    rng: RngStream,
    perm: Vec<usize>,
    pos: usize,
    trying_negative: bool,
    cur: Vec<f64>,
    cur_margin: f64,
    cand: Vec<f64>,
}

impl SimbaEngine {
    pub fn new(base: EngineBase, slots: usize, cfg: &AttackConfig, root: &RngStream) -> Self {
        let il = base.image_len;
        SimbaEngine {
            step: cfg.simba_step(),
            slots: (0..slots)
                .map(|i| {
                    let mut rng = root.derive(i as u64);
                    let mut perm: Vec<usize> = (0..il).collect();
                    rng.shuffle(&mut perm);
                    Slot {
                        rng,
                        perm,
                        pos: 0,
                        trying_negative: false,
                        cur: vec![0.0; il],
                        cur_margin: f64::INFINITY,
                        cand: vec![0.0; il],
                    }
                })
                .collect(),
            base,
        }
    }

    fn advance(slot: &mut Slot, image_len: usize) {
        slot.trying_negative = false;
        slot.pos += 1;
        if slot.pos >= image_len {
            slot.pos = 0;
            slot.rng.shuffle(&mut slot.perm);
        }
    }
}

impl Engine for SimbaEngine {
    fn init(&mut self, slot: usize, clean_margin: f64) {
        let orig = self.base.orig_slice(slot).to_vec();
        let s = &mut self.slots[slot];
        s.cur = orig;
        s.cur_margin = clean_margin;
    }

    fn propose(&mut self, slot: usize, _round: u64, out: &mut [f64]) {
        let step = self.step;
        let s = &mut self.slots[slot];
        let dir = s.perm[s.pos];
        let sign = if s.trying_negative { -1.0 } else { 1.0 };
        s.cand.copy_from_slice(&s.cur);
        s.cand[dir] += sign * step;
        let mut cand = std::mem::take(&mut s.cand);
        self.base.project(slot, &mut cand);
        out.copy_from_slice(&cand);
        self.slots[slot].cand = cand;
    }

    fn digest(&mut self, slot: usize, _round: u64, margin: f64) {
        let il = self.base.image_len;
        let s = &mut self.slots[slot];
        if margin < s.cur_margin {
            s.cur.copy_from_slice(&s.cand);
            s.cur_margin = margin;
            Self::advance(s, il);
        } else if !s.trying_negative {
            s.trying_negative = true;
        } else {
            Self::advance(s, il);
        }
    }
}
