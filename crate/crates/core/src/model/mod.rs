//! Small image classifier split into a feature extractor and a linear head,
//! so a defense module can be inserted at the penultimate layer.

mod io;
mod train;

pub use io::{load_model, save_model};
pub use train::{
    build_model, ce_loss_and_grad, holdout_accuracy, train_classifier, ArchConfig, ArchKind,
    TrainConfig,
};

use crate::error::{Error, Result};
use crate::ops::softmax;
use crate::tensor::Tensor;

use rayon::prelude::*;

/// Fully-connected layer: `out = W x + b` with `W` stored row-major
/// `[out_d x in_d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub out_d: usize,
    pub in_d: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(out_d: usize, in_d: usize) -> Self {
        Dense {
            out_d,
            in_d,
            weight: vec![0.0; out_d * in_d],
            bias: vec![0.0; out_d],
        }
    }

    pub fn forward(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_d);
        debug_assert_eq!(out.len(), self.out_d);
        for (o, out_v) in out.iter_mut().enumerate() {
            let row = &self.weight[o * self.in_d..(o + 1) * self.in_d];
            let mut acc = self.bias[o];
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            *out_v = acc;
        }
    }

    /// `out += W^T y`, the backward map of the linear part.
    pub fn backward_input(&self, dy: &[f64], dx: &mut [f64]) {
        debug_assert_eq!(dy.len(), self.out_d);
        debug_assert_eq!(dx.len(), self.in_d);
        for (o, &g) in dy.iter().enumerate() {
            let row = &self.weight[o * self.in_d..(o + 1) * self.in_d];
            for (d, w) in dx.iter_mut().zip(row) {
                *d += g * w;
            }
        }
    }
}

/// 2-D convolution with square kernel, fixed stride and zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub out_c: usize,
    pub in_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Vec<f64>, // out_c x in_c x k x k
    pub bias: Vec<f64>,   // out_c
}

impl Conv2d {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    pub fn forward(&self, input: &[f64], h: usize, w: usize, out: &mut [f64]) {
        let (oh, ow) = self.out_hw(h, w);
        let k = self.kernel;
        for o in 0..self.out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = self.bias[o];
                    for i in 0..self.in_c {
                        let plane = &input[i * h * w..(i + 1) * h * w];
                        let wbase = ((o * self.in_c + i) * k) * k;
                        for ky in 0..k {
                            let y = (oy * self.stride + ky) as isize - self.pad as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            let row = &plane[y as usize * w..(y as usize + 1) * w];
                            let wrow = &self.weight[wbase + ky * k..wbase + (ky + 1) * k];
                            for kx in 0..k {
                                let x = (ox * self.stride + kx) as isize - self.pad as isize;
                                if x < 0 || x >= w as isize {
                                    continue;
                                }
                                acc += row[x as usize] * wrow[kx];
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
}

/// One stage of the feature extractor.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    Dense(Dense),
    Relu,
    Flatten,
}

impl Layer {
    pub fn output_shape(&self, input: &[usize]) -> Vec<usize> {
        match self {
            Layer::Conv2d(c) => {
                let (oh, ow) = c.out_hw(input[1], input[2]);
                vec![c.out_c, oh, ow]
            }
            Layer::Dense(d) => vec![d.out_d],
            Layer::Relu => input.to_vec(),
            Layer::Flatten => vec![input.iter().product()],
        }
    }
}

/// Trained classifier: immutable extractor layers plus a linear head.
/// `forward_logits(x) == head(forward_features(x))` by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel {
    pub(crate) extractor: Vec<Layer>,
    pub(crate) head: Dense,
    input_shape: (usize, usize, usize),
    feat_dim: usize,
    classes: usize,
}

impl ClassifierModel {
    pub fn new(
        extractor: Vec<Layer>,
        head: Dense,
        input_shape: (usize, usize, usize),
    ) -> Result<Self> {
        let mut shape = vec![input_shape.0, input_shape.1, input_shape.2];
        for layer in &extractor {
            shape = layer.output_shape(&shape);
        }
        let feat_dim: usize = shape.iter().product();
        if shape.len() != 1 {
            return Err(Error::InputDomain(
                "extractor must end in a flat feature vector".into(),
            ));
        }
        if head.in_d != feat_dim {
            return Err(Error::ShapeMismatch {
                expected: vec![head.in_d],
                got: vec![feat_dim],
            });
        }
        Ok(ClassifierModel {
            classes: head.out_d,
            extractor,
            head,
            input_shape,
            feat_dim,
        })
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn head(&self) -> &Dense {
        &self.head
    }

    pub fn extractor(&self) -> &[Layer] {
        &self.extractor
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let (c, h, w) = self.input_shape;
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != c || shape[2] != h || shape[3] != w {
            return Err(Error::ShapeMismatch {
                expected: vec![0, c, h, w],
                got: shape.to_vec(),
            });
        }
        Ok(shape[0])
    }

    /// Runs one image through the extractor, returning the feature vector.
    fn features_single(&self, image: &[f64]) -> Vec<f64> {
        let (c, h, w) = self.input_shape;
        let mut shape = vec![c, h, w];
        let mut act = image.to_vec();
        for layer in &self.extractor {
            let out_shape = layer.output_shape(&shape);
            match layer {
                Layer::Conv2d(conv) => {
                    let mut out = vec![0.0; out_shape.iter().product()];
                    conv.forward(&act, shape[1], shape[2], &mut out);
                    act = out;
                }
                Layer::Dense(dense) => {
                    let mut out = vec![0.0; dense.out_d];
                    dense.forward(&act, &mut out);
                    act = out;
                }
                Layer::Relu => {
                    for v in act.iter_mut() {
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                }
                Layer::Flatten => {}
            }
            shape = out_shape;
        }
        act
    }

    /// Penultimate features for a batch, `[b x d]`.
    pub fn forward_features(&self, x: &Tensor) -> Result<Tensor> {
        let b = self.check_input(x)?;
        let d = self.feat_dim;
        let mut out = Tensor::zeros(&[b, d]);
        let image_len = x.row_len();
        let data = x.data();
        out.data_mut()
            .par_chunks_mut(d)
            .enumerate()
            .for_each(|(i, slot)| {
                let image = &data[i * image_len..(i + 1) * image_len];
                slot.copy_from_slice(&self.features_single(image));
            });
        Ok(out)
    }

    /// Applies the linear head to a feature batch `[b x d]`.
    pub fn head_logits(&self, features: &Tensor) -> Tensor {
        let b = features.rows();
        let mut out = Tensor::zeros(&[b, self.classes]);
        for i in 0..b {
            self.head.forward(features.row(i), out.row_mut(i));
        }
        out
    }

    pub fn forward_logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.head_logits(&self.forward_features(x)?))
    }

    pub fn forward_probs(&self, x: &Tensor) -> Result<Tensor> {
        Ok(softmax(&self.forward_logits(x)?))
    }

    /// Canonical flat parameter order: extractor layers front to back
    /// (weights then bias), then the head. Used by the training update and
    /// by finite-difference checks.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        for layer in &self.extractor {
            match layer {
                Layer::Conv2d(c) => n += c.weight.len() + c.bias.len(),
                Layer::Dense(d) => n += d.weight.len() + d.bias.len(),
                _ => {}
            }
        }
        n + self.head.weight.len() + self.head.bias.len()
    }

    fn param_slices(&self) -> Vec<&[f64]> {
        let mut slices = Vec::new();
        for layer in &self.extractor {
            match layer {
                Layer::Conv2d(c) => {
                    slices.push(c.weight.as_slice());
                    slices.push(c.bias.as_slice());
                }
                Layer::Dense(d) => {
                    slices.push(d.weight.as_slice());
                    slices.push(d.bias.as_slice());
                }
                _ => {}
            }
        }
        slices.push(self.head.weight.as_slice());
        slices.push(self.head.bias.as_slice());
        slices
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut slices = Vec::new();
        for layer in &mut self.extractor {
            match layer {
                Layer::Conv2d(c) => {
                    slices.push(c.weight.as_mut_slice());
                    slices.push(c.bias.as_mut_slice());
                }
                Layer::Dense(d) => {
                    slices.push(d.weight.as_mut_slice());
                    slices.push(d.bias.as_mut_slice());
                }
                _ => {}
            }
        }
        slices.push(self.head.weight.as_mut_slice());
        slices.push(self.head.bias.as_mut_slice());
        slices
    }

    pub fn get_param(&self, mut idx: usize) -> f64 {
        for s in self.param_slices() {
            if idx < s.len() {
                return s[idx];
            }
            idx -= s.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_param(&mut self, mut idx: usize, value: f64) {
        for s in self.param_slices_mut() {
            if idx < s.len() {
                s[idx] = value;
                return;
            }
            idx -= s.len();
        }
        panic!("parameter index out of range");
    }

    /// `params -= scale * grad` over the canonical flat order.
    pub(crate) fn apply_update(&mut self, grad: &[f64], scale: f64) {
        debug_assert_eq!(grad.len(), self.param_count());
        let mut offset = 0;
        for s in self.param_slices_mut() {
            let len = s.len();
            for (p, g) in s.iter_mut().zip(&grad[offset..offset + len]) {
                *p -= scale * g;
            }
            offset += len;
        }
    }

    /// Rounds every parameter through f32. Run at the end of training so the
    /// 32-bit file format round-trips weights bit-exactly.
    pub(crate) fn quantize_f32(&mut self) {
        for s in self.param_slices_mut() {
            for p in s.iter_mut() {
                *p = *p as f32 as f64;
            }
        }
    }
}
