//! Seeded mini-batch SGD with analytic backprop through the small stack.

use super::{ClassifierModel, Conv2d, Dense, Layer};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::ops::{accuracy, softmax_row};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Extractor architecture.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ArchKind {
    /// Flatten only: features are the raw pixels, head is the whole model.
    Linear,
    /// Two strided 3x3 convolutions then a dense layer to `feat_dim`.
    Cnn {
        conv1: usize,
        conv2: usize,
        feat_dim: usize,
    },
}

impl ArchKind {
    pub fn desk_default() -> Self {
        ArchKind::Cnn {
            conv1: 8,
            conv2: 16,
            feat_dim: 64,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ArchConfig {
    pub kind: ArchKind,
    /// Held-out accuracy the trained model must reach.
    pub target_accuracy: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            kind: ArchKind::desk_default(),
            target_accuracy: 0.97,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub holdout_frac: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 40,
            lr: 0.2,
            batch_size: 64,
            holdout_frac: 0.2,
        }
    }
}

fn init_dense(out_d: usize, in_d: usize, rng: &mut RngStream) -> Dense {
    let scale = 1.0 / (in_d as f64).sqrt();
    Dense {
        out_d,
        in_d,
        weight: (0..out_d * in_d)
            .map(|_| (rng.uniform() * 2.0 - 1.0) * scale)
            .collect(),
        bias: vec![0.0; out_d],
    }
}

fn init_conv(out_c: usize, in_c: usize, rng: &mut RngStream) -> Conv2d {
    let fan_in = in_c * 9;
    let scale = 1.0 / (fan_in as f64).sqrt();
    Conv2d {
        out_c,
        in_c,
        kernel: 3,
        stride: 2,
        pad: 1,
        weight: (0..out_c * fan_in)
            .map(|_| (rng.uniform() * 2.0 - 1.0) * scale)
            .collect(),
        bias: vec![0.0; out_c],
    }
}

/// Builds an initialized (untrained) model for the given architecture.
pub fn build_model(
    kind: ArchKind,
    input_shape: (usize, usize, usize),
    classes: usize,
    rng: &mut RngStream,
) -> Result<ClassifierModel> {
    let (c, h, w) = input_shape;
    match kind {
        ArchKind::Linear => {
            let d = c * h * w;
            let head = init_dense(classes, d, rng);
            ClassifierModel::new(vec![Layer::Flatten], head, input_shape)
        }
        ArchKind::Cnn {
            conv1,
            conv2,
            feat_dim,
        } => {
            let l1 = init_conv(conv1, c, rng);
            let (h1, w1) = l1.out_hw(h, w);
            let l2 = init_conv(conv2, conv1, rng);
            let (h2, w2) = l2.out_hw(h1, w1);
            let flat = conv2 * h2 * w2;
            let dense = init_dense(feat_dim, flat, rng);
            let head = init_dense(classes, feat_dim, rng);
            ClassifierModel::new(
                vec![
                    Layer::Conv2d(l1),
                    Layer::Relu,
                    Layer::Conv2d(l2),
                    Layer::Relu,
                    Layer::Flatten,
                    Layer::Dense(dense),
                ],
                head,
                input_shape,
            )
        }
    }
}

fn conv_backward(
    conv: &Conv2d,
    input: &[f64],
    h: usize,
    w: usize,
    dout: &[f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
    dinput: &mut [f64],
) {
    let (oh, ow) = conv.out_hw(h, w);
    let k = conv.kernel;
    for o in 0..conv.out_c {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dout[(o * oh + oy) * ow + ox];
                if g == 0.0 {
                    continue;
                }
                dbias[o] += g;
                for i in 0..conv.in_c {
                    let plane_off = i * h * w;
                    let wbase = ((o * conv.in_c + i) * k) * k;
                    for ky in 0..k {
                        let y = (oy * conv.stride + ky) as isize - conv.pad as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        let row_off = plane_off + y as usize * w;
                        for kx in 0..k {
                            let x = (ox * conv.stride + kx) as isize - conv.pad as isize;
                            if x < 0 || x >= w as isize {
                                continue;
                            }
                            let widx = wbase + ky * k + kx;
                            dweight[widx] += g * input[row_off + x as usize];
                            dinput[row_off + x as usize] += g * conv.weight[widx];
                        }
                    }
                }
            }
        }
    }
}

/// Mean cross-entropy over the batch and its gradient w.r.t. every
/// parameter, flattened in the model's canonical order.
pub fn ce_loss_and_grad(
    model: &ClassifierModel,
    x: &Tensor,
    labels: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let b = x.shape()[0];
    if labels.len() != b {
        return Err(Error::ShapeMismatch {
            expected: vec![b],
            got: vec![labels.len()],
        });
    }
    let mut grad = vec![0.0; model.param_count()];
    // Offsets of each layer's (weight, bias) block in the flat vector.
    let mut offsets = Vec::new();
    let mut off = 0;
    for layer in &model.extractor {
        match layer {
            Layer::Conv2d(c) => {
                offsets.push(Some((off, off + c.weight.len())));
                off += c.weight.len() + c.bias.len();
            }
            Layer::Dense(d) => {
                offsets.push(Some((off, off + d.weight.len())));
                off += d.weight.len() + d.bias.len();
            }
            _ => offsets.push(None),
        }
    }
    let head_off = (off, off + model.head.weight.len());

    let (c, h, w) = model.input_shape();
    let image_len = c * h * w;
    let classes = model.classes();
    let mut total_loss = 0.0;

    for n in 0..b {
        let image = &x.data()[n * image_len..(n + 1) * image_len];
        // Forward with cached layer inputs.
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(model.extractor.len() + 1);
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(model.extractor.len() + 1);
        let mut act = image.to_vec();
        let mut shape = vec![c, h, w];
        for layer in &model.extractor {
            acts.push(act.clone());
            shapes.push(shape.clone());
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
        let features = act;

        let mut logits = vec![0.0; classes];
        model.head.forward(&features, &mut logits);
        let mut probs = vec![0.0; classes];
        softmax_row(&logits, &mut probs);
        let y = labels[n];
        if y >= classes {
            return Err(Error::InputDomain(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        total_loss += -(probs[y].max(1e-300)).ln();

        // dCE/dlogits = p - onehot(y).
        let mut dz = probs;
        dz[y] -= 1.0;

        // Head gradients.
        let d = model.feat_dim();
        for o in 0..classes {
            let g = dz[o];
            let wrow = head_off.0 + o * d;
            for j in 0..d {
                grad[wrow + j] += g * features[j];
            }
            grad[head_off.1 + o] += g;
        }
        let mut dact = vec![0.0; d];
        model.head.backward_input(&dz, &mut dact);

        // Extractor backward.
        for (li, layer) in model.extractor.iter().enumerate().rev() {
            let input = &acts[li];
            let in_shape = &shapes[li];
            match layer {
                Layer::Conv2d(conv) => {
                    let (w_off, b_off) = offsets[li].unwrap();
                    let mut dinput = vec![0.0; input.len()];
                    let (dw, rest) = grad[w_off..].split_at_mut(conv.weight.len());
                    let db = &mut rest[..conv.bias.len()];
                    debug_assert_eq!(w_off + conv.weight.len(), b_off);
                    conv_backward(
                        conv, input, in_shape[1], in_shape[2], &dact, dw, db, &mut dinput,
                    );
                    dact = dinput;
                }
                Layer::Dense(dense) => {
                    let (w_off, b_off) = offsets[li].unwrap();
                    for o in 0..dense.out_d {
                        let g = dact[o];
                        let wrow = w_off + o * dense.in_d;
                        for j in 0..dense.in_d {
                            grad[wrow + j] += g * input[j];
                        }
                        grad[b_off + o] += g;
                    }
                    let mut dinput = vec![0.0; dense.in_d];
                    dense.backward_input(&dact, &mut dinput);
                    dact = dinput;
                }
                Layer::Relu => {
                    for (dv, &v) in dact.iter_mut().zip(input) {
                        if v <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                }
                Layer::Flatten => {}
            }
        }
    }

    let inv_b = 1.0 / b as f64;
    for g in grad.iter_mut() {
        *g *= inv_b;
    }
    Ok((total_loss * inv_b, grad))
}

/// Held-out accuracy evaluated in fixed-size batches.
pub fn holdout_accuracy(model: &ClassifierModel, data: &Dataset, indices: &[usize]) -> f64 {
    let mut correct = 0usize;
    for chunk in indices.chunks(256) {
        let (x, y) = data.batch(chunk);
        let probs = model.forward_probs(&x).expect("holdout shape");
        correct += (accuracy(&probs, &y) * chunk.len() as f64).round() as usize;
    }
    correct as f64 / indices.len() as f64
}

/// Trains a classifier with seeded mini-batch SGD on cross-entropy.
/// Fails with the achieved accuracy when the held-out target is not met.
pub fn train_classifier(
    dataset: &Dataset,
    arch: &ArchConfig,
    cfg: &TrainConfig,
) -> Result<ClassifierModel> {
    if dataset.len() == 0 {
        return Err(Error::InputDomain("empty training dataset".into()));
    }
    let root = RngStream::new(cfg.seed);
    let mut init_rng = root.derive(1);
    let mut model = build_model(arch.kind, dataset.input_shape(), dataset.classes, &mut init_rng)?;

    // Deterministic split.
    let n = dataset.len();
    let mut indices: Vec<usize> = (0..n).collect();
    root.derive(2).shuffle(&mut indices);
    let n_holdout = ((n as f64 * cfg.holdout_frac).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let (holdout_idx, train_idx) = indices.split_at(n_holdout);

    let mut achieved = holdout_accuracy(&model, dataset, holdout_idx);
    for epoch in 0..cfg.epochs {
        let mut order = train_idx.to_vec();
        root.derive(100 + epoch as u64).shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let (x, y) = dataset.batch(chunk);
            let (_, grad) = ce_loss_and_grad(&model, &x, &y)?;
            model.apply_update(&grad, cfg.lr);
        }
        achieved = holdout_accuracy(&model, dataset, holdout_idx);
        if achieved >= arch.target_accuracy {
            break;
        }
    }
    if achieved < arch.target_accuracy {
        return Err(Error::TrainingFailed {
            achieved,
            target: arch.target_accuracy,
            epochs: cfg.epochs,
        });
    }
    model.quantize_f32();
    Ok(model)
}
