//! Black-box oracle wrappers. Vanilla, random-noise, and the gradient
//! unification defense all answer through the same interface with strict
//! query accounting, so attacks cannot tell them apart structurally.

use crate::data::Dataset;
use crate::error::Result;
use crate::model::ClassifierModel;
use crate::rng::RngStream;
use crate::tensor::{l2_norm, Tensor};
use crate::unig::{cascade_single_sample, unig_forward, UniGConfig};

/// What the wrapped model does with each query.
#[derive(Clone, Debug, PartialEq)]
pub enum DefenseKind {
    Vanilla,
    /// Fresh Gaussian noise added to the input of every query.
    Rnd { sigma: f64 },
    UniG(UniGConfig),
}

impl DefenseKind {
    pub fn name(&self) -> &'static str {
        match self {
            DefenseKind::Vanilla => "vanilla",
            DefenseKind::Rnd { .. } => "rnd",
            DefenseKind::UniG(_) => "unig",
        }
    }

    pub fn params_string(&self) -> String {
        match self {
            DefenseKind::Vanilla => String::new(),
            DefenseKind::Rnd { sigma } => format!("sigma={sigma}"),
            DefenseKind::UniG(cfg) => cfg.params_string(),
        }
    }
}

/// Batch-of-probabilities interface every attack consumes. Implemented by
/// [`QueryOracle`] and by synthetic oracles in tests.
pub trait Oracle {
    fn classes(&self) -> usize;
    /// Probabilities for a batch `[b x c x h x w] -> [b x classes]`.
    fn query(&mut self, x: &Tensor) -> Tensor;
}

/// A defended model behind the score-based query interface.
///
/// The counter increases by the batch size on every call, over-budget
/// probes included. Calls past the budget are still answered; the
/// `budget_exhausted` flag is the termination signal attack loops consult.
pub struct QueryOracle<'a> {
    model: &'a ClassifierModel,
    kind: DefenseKind,
    reservoir: Option<&'a Dataset>,
    query_count: u64,
    budget: Option<u64>,
    rng: RngStream,
    degenerate_warned: bool,
}

impl<'a> QueryOracle<'a> {
    pub fn new(model: &'a ClassifierModel, kind: DefenseKind, seed: u64) -> Self {
        QueryOracle {
            model,
            kind,
            reservoir: None,
            query_count: 0,
            budget: None,
            rng: RngStream::new(seed).derive(0x0AC1E),
            degenerate_warned: false,
        }
    }

    /// Reservoir of training images for single-sample cascade mode.
    pub fn with_reservoir(mut self, reservoir: &'a Dataset) -> Self {
        self.reservoir = Some(reservoir);
        self
    }

    /// Optional cap on total image-queries.
    pub fn with_budget(mut self, budget: u64) -> Self {
        self.budget = Some(budget);
        self
    }

    pub fn kind(&self) -> &DefenseKind {
        &self.kind
    }

    pub fn query_count(&self) -> u64 {
        self.query_count
    }

    pub fn budget_exhausted(&self) -> bool {
        self.budget.is_some_and(|b| self.query_count >= b)
    }

    /// True once a batch of one hit the UniG path without a cascade
    /// reservoir and was served the vanilla output.
    pub fn degenerate_warned(&self) -> bool {
        self.degenerate_warned
    }

    fn defended_logits_probs(&mut self, x: &Tensor) -> (Tensor, Tensor) {
        match &self.kind {
            DefenseKind::Vanilla => {
                let logits = self.model.forward_logits(x).expect("oracle input shape");
                let probs = crate::ops::softmax(&logits);
                (logits, probs)
            }
            DefenseKind::Rnd { sigma } => {
                let mut noisy = x.clone();
                for v in noisy.data_mut() {
                    *v = (*v + sigma * self.rng.normal(0.0, 1.0)).clamp(0.0, 1.0);
                }
                let logits = self
                    .model
                    .forward_logits(&noisy)
                    .expect("oracle input shape");
                let probs = crate::ops::softmax(&logits);
                (logits, probs)
            }
            DefenseKind::UniG(cfg) => {
                let call_cfg = UniGConfig {
                    seed: self.rng.derive(self.query_count).seed(),
                    ..*cfg
                };
                let b = x.shape()[0];
                let out = if b == 1 && call_cfg.cascade_k > 0 {
                    let reservoir = self
                        .reservoir
                        .expect("cascade_k > 0 requires a reservoir dataset");
                    cascade_single_sample(self.model, x, reservoir, &call_cfg)
                        .expect("cascade forward")
                } else {
                    unig_forward(self.model, x, &call_cfg).expect("defended forward")
                };
                if out.state.degenerate {
                    self.degenerate_warned = true;
                }
                (out.logits, out.probs)
            }
        }
    }

    /// Defended logits for diagnostics (same stochastic draw semantics as a
    /// query, without counting one).
    pub fn defended_logits(&mut self, x: &Tensor) -> Tensor {
        self.defended_logits_probs(x).0
    }
}

impl Oracle for QueryOracle<'_> {
    fn classes(&self) -> usize {
        self.model.classes()
    }

    fn query(&mut self, x: &Tensor) -> Tensor {
        self.query_count += x.shape()[0] as u64;
        let (_, probs) = self.defended_logits_probs(x);
        debug_assert!(probs.is_finite());
        probs
    }
}

/// Mean L2 distance between defended and vanilla logits on clean images,
/// one stochastic draw per image.
pub fn logit_diff(
    model: &ClassifierModel,
    kind: &DefenseKind,
    dataset: &Dataset,
    batch: usize,
    seed: u64,
) -> Result<f64> {
    let mut oracle = QueryOracle::new(model, kind.clone(), seed);
    let n = dataset.len();
    let mut sum = 0.0;
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(batch.max(2)) {
        let (x, _) = dataset.batch(chunk);
        let defended = oracle.defended_logits(&x);
        let vanilla = model.forward_logits(&x)?;
        for i in 0..chunk.len() {
            let diff: Vec<f64> = defended
                .row(i)
                .iter()
                .zip(vanilla.row(i))
                .map(|(a, b)| a - b)
                .collect();
            sum += l2_norm(&diff);
        }
    }
    Ok(sum / n as f64)
}
