//! Hand-built oracles for attack unit tests.

use crate::defense::Oracle;
use crate::tensor::Tensor;

/// Two-class oracle whose margin for label 0 is an arbitrary function of
/// the image: probs = [0.5 + m/2, 0.5 - m/2], so margin_loss(probs, 0) = m.
pub struct MarginOracle<F: FnMut(usize, &[f64]) -> f64> {
    pub margin_fn: F,
}

impl<F: FnMut(usize, &[f64]) -> f64> Oracle for MarginOracle<F> {
    fn classes(&self) -> usize {
        2
    }

    fn query(&mut self, x: &Tensor) -> Tensor {
        let b = x.rows();
        let mut out = Tensor::zeros(&[b, 2]);
        for i in 0..b {
            let m = (self.margin_fn)(i, x.row(i)).clamp(-1.0, 1.0);
            out.row_mut(i)[0] = 0.5 + m / 2.0;
            out.row_mut(i)[1] = 0.5 - m / 2.0;
        }
        out
    }
}

/// Wrapper that tallies the images submitted to an inner oracle.
pub struct CountingOracle<O: Oracle> {
    pub inner: O,
    pub images_seen: u64,
    pub calls: u64,
}

impl<O: Oracle> CountingOracle<O> {
    pub fn new(inner: O) -> Self {
        CountingOracle {
            inner,
            images_seen: 0,
            calls: 0,
        }
    }
}

impl<O: Oracle> Oracle for CountingOracle<O> {
    fn classes(&self) -> usize {
        self.inner.classes()
    }

    fn query(&mut self, x: &Tensor) -> Tensor {
        self.images_seen += x.rows() as u64;
        self.calls += 1;
        self.inner.query(x)
    }
}
