//! Sign-only gradient estimation by divide and conquer: maintain a full
//! sign vector, flip progressively finer coordinate chunks, and keep each
//! flip only when the margin strictly decreases. Deterministic; the only
//! randomness an attack run sees is in the oracle.

use super::{Engine, EngineBase};

pub(crate) struct SignHunterEngine {
    base: EngineBase,
    pub(crate) slots: Vec<Slot>,
}

pub(crate) struct Slot {
    pub(crate) signs: Vec<f64>,
    cand_signs: Vec<f64>,
    cur_margin: f64,
    level: u32,
    chunk: usize,
}

fn chunk_len(dim: usize, level: u32) -> usize {
    let parts = 1usize << level.min(usize::BITS - 1);
    dim.div_ceil(parts).max(1)
}

impl SignHunterEngine {
    pub fn new(base: EngineBase, slots: usize) -> Self {
        let il = base.image_len;
        SignHunterEngine {
            base,
            slots: (0..slots)
                .map(|_| Slot {
                    signs: vec![1.0; il],
                    cand_signs: vec![1.0; il],
                    cur_margin: f64::INFINITY,
                    level: 0,
                    chunk: 0,
                })
                .collect(),
        }
    }

    fn write_candidate(&self, slot: usize, out: &mut [f64]) {
        let orig = self.base.orig_slice(slot);
        let eps = self.base.epsilon;
        for ((o, &x), &s) in out.iter_mut().zip(orig).zip(&self.slots[slot].cand_signs) {
            *o = x + eps * s;
        }
    }

    fn advance(slot: &mut Slot, dim: usize) {
        let len = chunk_len(dim, slot.level);
        let nchunks = dim.div_ceil(len);
        slot.chunk += 1;
        if slot.chunk >= nchunks {
            slot.chunk = 0;
            if len == 1 {
                // Finest level exhausted: restart the pass from the root.
                slot.level = 0;
            } else {
                slot.level += 1;
            }
        }
    }
}

impl Engine for SignHunterEngine {
    fn init(&mut self, _slot: usize, _clean_margin: f64) {}

    fn propose(&mut self, slot: usize, round: u64, out: &mut [f64]) {
        let dim = self.base.image_len;
        {
            let s = &mut self.slots[slot];
            if round == 2 {
                // First probe: the all-plus sign pattern.
                s.cand_signs.fill(1.0);
            } else {
                let len = chunk_len(dim, s.level);
                let start = s.chunk * len;
                let end = (start + len).min(dim);
                s.cand_signs.copy_from_slice(&s.signs);
                for v in &mut s.cand_signs[start..end] {
                    *v = -*v;
                }
            }
        }
        self.write_candidate(slot, out);
        self.base.project(slot, out);
    }

    fn digest(&mut self, slot: usize, round: u64, margin: f64) {
        let dim = self.base.image_len;
        let s = &mut self.slots[slot];
        if round == 2 {
            s.signs.copy_from_slice(&s.cand_signs);
            s.cur_margin = margin;
            return;
        }
        if margin < s.cur_margin {
            s.signs.copy_from_slice(&s.cand_signs);
            s.cur_margin = margin;
        }
        Self::advance(s, dim);
    }
}
