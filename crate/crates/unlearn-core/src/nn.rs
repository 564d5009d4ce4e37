//! Minimal feed-forward network machinery: 3x3 convolutions, 2x2 max
//! pooling, residual blocks, linear layers, inverted dropout, and Adam.
//!
//! Layers operate on planar `(c, h, w)` buffers; dataset images arrive in
//! `(h, w, c)` order and are transposed on entry. Backward passes propagate
//! gradients to parameters and to the layer input, so a frozen network can
//! still pass gradients through to whatever produced its input (used by the
//! sample generator).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::dataset::Geometry;
use crate::error::CoreError;
use crate::rng;

/// Shape of the activation flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Chw(usize, usize, usize),
    Flat(usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Chw(c, h, w) => c * h * w,
            Shape::Flat(d) => d,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One network layer with its parameters inline.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// 3x3 convolution, stride 1, zero padding 1. Weights are
    /// `[out_c][in_c][3][3]` flattened.
    Conv {
        name: String,
        in_c: usize,
        out_c: usize,
        w: Vec<f64>,
        b: Vec<f64>,
    },
    Relu,
    /// 2x2 max pooling, stride 2.
    MaxPool2,
    Flatten,
    /// Fully connected; weights `[out][in]` flattened.
    Linear {
        name: String,
        in_dim: usize,
        out_dim: usize,
        w: Vec<f64>,
        b: Vec<f64>,
    },
    /// Inverted dropout; identity during inference.
    Dropout { rate: f64 },
    /// Two-convolution residual block over a fixed channel count:
    /// `y = relu(x + conv2(relu(conv1(x))))`.
    Residual {
        name: String,
        channels: usize,
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: Vec<f64>,
    },
}

/// Per-layer cache captured during a training-mode forward pass.
enum Trace {
    Conv { input: Vec<f64> },
    Relu { mask: Vec<bool> },
    MaxPool2 { argmax: Vec<usize>, in_len: usize },
    Flatten,
    Linear { input: Vec<f64> },
    Dropout { mask: Option<Vec<f64>> },
    Residual {
        input: Vec<f64>,
        mask_mid: Vec<bool>,
        hidden: Vec<f64>,
        mask_out: Vec<bool>,
    },
}

/// Gradients for one layer's parameters, matching `Layer`'s storage order.
#[derive(Debug, Clone)]
pub enum LayerGrad {
    None,
    WithBias { w: Vec<f64>, b: Vec<f64> },
    ResidualPair {
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: Vec<f64>,
    },
}

/// A full network: geometry-checked input, layer stack, and shape plan.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    geometry: Geometry,
    layers: Vec<Layer>,
    /// Input shape of each layer, plus the final output shape at the end.
    shapes: Vec<Shape>,
    /// Index of the last `Linear` layer; its input is the feature vector.
    final_linear: usize,
}

fn conv_forward(
    input: &[f64],
    w: &[f64],
    b: &[f64],
    in_c: usize,
    out_c: usize,
    h: usize,
    wd: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; out_c * h * wd];
    for oc in 0..out_c {
        for y in 0..h {
            for x in 0..wd {
                let mut acc = b[oc];
                for ic in 0..in_c {
                    let plane = &input[ic * h * wd..(ic + 1) * h * wd];
                    let wbase = ((oc * in_c + ic) * 3) * 3;
                    for ky in 0..3 {
                        let iy = y + ky;
                        if iy == 0 || iy > h {
                            continue;
                        }
                        let iy = iy - 1;
                        for kx in 0..3 {
                            let ix = x + kx;
                            if ix == 0 || ix > wd {
                                continue;
                            }
                            acc += w[wbase + ky * 3 + kx] * plane[iy * wd + (ix - 1)];
                        }
                    }
                }
                out[oc * h * wd + y * wd + x] = acc;
            }
        }
    }
    out
}

/// Returns grad wrt input; accumulates grads into `gw`/`gb`.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &[f64],
    grad_out: &[f64],
    w: &[f64],
    in_c: usize,
    out_c: usize,
    h: usize,
    wd: usize,
    gw: &mut [f64],
    gb: &mut [f64],
) -> Vec<f64> {
    let mut grad_in = vec![0.0; in_c * h * wd];
    for oc in 0..out_c {
        let gplane = &grad_out[oc * h * wd..(oc + 1) * h * wd];
        for y in 0..h {
            for x in 0..wd {
                let g = gplane[y * wd + x];
                if g == 0.0 {
                    continue;
                }
                gb[oc] += g;
                for ic in 0..in_c {
                    let ibase = ic * h * wd;
                    let wbase = ((oc * in_c + ic) * 3) * 3;
                    for ky in 0..3 {
                        let iy = y + ky;
                        if iy == 0 || iy > h {
                            continue;
                        }
                        let iy = iy - 1;
                        for kx in 0..3 {
                            let ix = x + kx;
                            if ix == 0 || ix > wd {
                                continue;
                            }
                            let ix = ix - 1;
                            gw[wbase + ky * 3 + kx] += g * input[ibase + iy * wd + ix];
                            grad_in[ibase + iy * wd + ix] += g * w[wbase + ky * 3 + kx];
                        }
                    }
                }
            }
        }
    }
    grad_in
}

fn pool_forward(input: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    let mut argmax = vec![0usize; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = ch * h * w + (2 * y + dy) * w + (2 * x + dx);
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = ch * oh * ow + y * ow + x;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    (out, argmax)
}

fn linear_forward(input: &[f64], w: &[f64], b: &[f64], in_dim: usize, out_dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(out_dim);
    for o in 0..out_dim {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let mut acc = b[o];
        for i in 0..in_dim {
            acc += row[i] * input[i];
        }
        out.push(acc);
    }
    out
}

impl Network {
    pub fn new(geometry: Geometry, layers: Vec<Layer>) -> Result<Self, CoreError> {
        let mut shapes = Vec::with_capacity(layers.len() + 1);
        let mut shape = Shape::Chw(geometry.c, geometry.h, geometry.w);
        let mut final_linear = None;
        for (i, layer) in layers.iter().enumerate() {
            shapes.push(shape);
            shape = match (layer, shape) {
                (Layer::Conv { in_c, out_c, .. }, Shape::Chw(c, h, w)) => {
                    if *in_c != c {
                        return Err(CoreError::Config(format!(
                            "conv layer {i} expects {in_c} channels, got {c}"
                        )));
                    }
                    Shape::Chw(*out_c, h, w)
                }
                (Layer::Residual { channels, .. }, Shape::Chw(c, h, w)) => {
                    if *channels != c {
                        return Err(CoreError::Config(format!(
                            "residual layer {i} expects {channels} channels, got {c}"
                        )));
                    }
                    Shape::Chw(c, h, w)
                }
                (Layer::MaxPool2, Shape::Chw(c, h, w)) => {
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(CoreError::Config(format!(
                            "max pool at layer {i} needs even spatial dims, got {h}x{w}"
                        )));
                    }
                    Shape::Chw(c, h / 2, w / 2)
                }
                (Layer::Flatten, s) => Shape::Flat(s.len()),
                (Layer::Linear { in_dim, out_dim, .. }, s) => {
                    if s.len() != *in_dim {
                        return Err(CoreError::Config(format!(
                            "linear layer {i} expects {in_dim} inputs, got {}",
                            s.len()
                        )));
                    }
                    final_linear = Some(i);
                    Shape::Flat(*out_dim)
                }
                (Layer::Relu, s) | (Layer::Dropout { .. }, s) => s,
                (layer, shape) => {
                    return Err(CoreError::Config(format!(
                        "layer {i} ({layer:?}) incompatible with shape {shape:?}"
                    )))
                }
            };
        }
        shapes.push(shape);
        let final_linear = final_linear
            .ok_or_else(|| CoreError::Config("network has no output linear layer".into()))?;
        Ok(Network {
            geometry,
            layers,
            shapes,
            final_linear,
        })
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn output_dim(&self) -> usize {
        self.shapes.last().unwrap().len()
    }

    /// Dimension of the feature vector (input of the final linear layer).
    pub fn feature_dim(&self) -> usize {
        self.shapes[self.final_linear].len()
    }

    /// Named parameter vectors in a stable order.
    pub fn named_params(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv { name, w, b, .. } | Layer::Linear { name, w, b, .. } => {
                    out.push((format!("{name}.w"), w.as_slice()));
                    out.push((format!("{name}.b"), b.as_slice()));
                }
                Layer::Residual {
                    name, w1, b1, w2, b2, ..
                } => {
                    out.push((format!("{name}.c1.w"), w1.as_slice()));
                    out.push((format!("{name}.c1.b"), b1.as_slice()));
                    out.push((format!("{name}.c2.w"), w2.as_slice()));
                    out.push((format!("{name}.c2.b"), b2.as_slice()));
                }
                _ => {}
            }
        }
        out
    }

    /// Replace parameters by name. Every parameter must be present with the
    /// exact length; unknown names are rejected.
    pub fn set_named_params(&mut self, values: &[(String, Vec<f64>)]) -> Result<(), CoreError> {
        let expected: Vec<(String, usize)> = self
            .named_params()
            .iter()
            .map(|(n, v)| (n.clone(), v.len()))
            .collect();
        if expected.len() != values.len() {
            return Err(CoreError::Config(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                values.len()
            )));
        }
        for ((en, el), (gn, gv)) in expected.iter().zip(values) {
            if en != gn || *el != gv.len() {
                return Err(CoreError::Config(format!(
                    "parameter mismatch: expected {en}[{el}], got {gn}[{}]",
                    gv.len()
                )));
            }
        }
        let mut it = values.iter();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv { w, b, .. } | Layer::Linear { w, b, .. } => {
                    *w = it.next().unwrap().1.clone();
                    *b = it.next().unwrap().1.clone();
                }
                Layer::Residual { w1, b1, w2, b2, .. } => {
                    *w1 = it.next().unwrap().1.clone();
                    *b1 = it.next().unwrap().1.clone();
                    *w2 = it.next().unwrap().1.clone();
                    *b2 = it.next().unwrap().1.clone();
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, v)| v.len()).sum()
    }

    fn check_input(&self, image: &[f64]) -> Result<(), CoreError> {
        if image.len() != self.geometry.len() {
            return Err(CoreError::Shape(format!(
                "input has {} values, expected {} for {}x{}x{}",
                image.len(),
                self.geometry.len(),
                self.geometry.h,
                self.geometry.w,
                self.geometry.c
            )));
        }
        Ok(())
    }

    /// Transpose a `(h, w, c)` image into the planar `(c, h, w)` layout.
    pub fn to_planar(&self, image: &[f64]) -> Vec<f64> {
        let Geometry { h, w, c } = self.geometry;
        if c == 1 {
            return image.to_vec();
        }
        let mut planar = vec![0.0; image.len()];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    planar[ch * h * w + y * w + x] = image[(y * w + x) * c + ch];
                }
            }
        }
        planar
    }

    /// Transpose a planar `(c, h, w)` gradient back to `(h, w, c)`.
    pub fn from_planar(&self, planar: &[f64]) -> Vec<f64> {
        let Geometry { h, w, c } = self.geometry;
        if c == 1 {
            return planar.to_vec();
        }
        let mut image = vec![0.0; planar.len()];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    image[(y * w + x) * c + ch] = planar[ch * h * w + y * w + x];
                }
            }
        }
        image
    }

    /// Inference forward pass: logits only. Dropout is disabled.
    pub fn forward_logits(&self, image: &[f64]) -> Result<Vec<f64>, CoreError> {
        Ok(self.forward_eval(image)?.1)
    }

    /// Inference forward pass returning (features, logits).
    pub fn forward_eval(&self, image: &[f64]) -> Result<(Vec<f64>, Vec<f64>), CoreError> {
        self.check_input(image)?;
        let mut act = self.to_planar(image);
        let mut features = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if i == self.final_linear {
                features = act.clone();
            }
            act = self.apply_eval(layer, act, self.shapes[i]);
        }
        Ok((features, act))
    }

    fn apply_eval(&self, layer: &Layer, act: Vec<f64>, shape: Shape) -> Vec<f64> {
        match (layer, shape) {
            (Layer::Conv { in_c, out_c, w, b, .. }, Shape::Chw(_, h, wd)) => {
                conv_forward(&act, w, b, *in_c, *out_c, h, wd)
            }
            (Layer::Relu, _) => act.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            (Layer::MaxPool2, Shape::Chw(c, h, w)) => pool_forward(&act, c, h, w).0,
            (Layer::Flatten, _) | (Layer::Dropout { .. }, _) => act,
            (Layer::Linear { in_dim, out_dim, w, b, .. }, _) => {
                linear_forward(&act, w, b, *in_dim, *out_dim)
            }
            (Layer::Residual { channels, w1, b1, w2, b2, .. }, Shape::Chw(_, h, wd)) => {
                let c = *channels;
                let u = conv_forward(&act, w1, b1, c, c, h, wd);
                let a: Vec<f64> = u.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
                let v = conv_forward(&a, w2, b2, c, c, h, wd);
                act.iter()
                    .zip(&v)
                    .map(|(&x, &vv)| {
                        let s = x + vv;
                        if s > 0.0 {
                            s
                        } else {
                            0.0
                        }
                    })
                    .collect()
            }
            _ => unreachable!("shape plan validated at construction"),
        }
    }

    /// Training-mode forward pass, capturing caches for backward.
    /// `rng` drives dropout masks; pass `None` for inference-mode behavior
    /// with gradient capture (used by the generator against a frozen net).
    fn forward_train(
        &self,
        planar_input: &[f64],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Vec<Trace>, Vec<f64>) {
        let mut act = planar_input.to_vec();
        let mut traces = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let shape = self.shapes[i];
            match (layer, shape) {
                (Layer::Conv { in_c, out_c, w, b, .. }, Shape::Chw(_, h, wd)) => {
                    let out = conv_forward(&act, w, b, *in_c, *out_c, h, wd);
                    traces.push(Trace::Conv { input: act });
                    act = out;
                }
                (Layer::Relu, _) => {
                    let mask: Vec<bool> = act.iter().map(|&v| v > 0.0).collect();
                    act = act.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
                    traces.push(Trace::Relu { mask });
                }
                (Layer::MaxPool2, Shape::Chw(c, h, w)) => {
                    let in_len = act.len();
                    let (out, argmax) = pool_forward(&act, c, h, w);
                    traces.push(Trace::MaxPool2 { argmax, in_len });
                    act = out;
                }
                (Layer::Flatten, _) => traces.push(Trace::Flatten),
                (Layer::Linear { in_dim, out_dim, w, b, .. }, _) => {
                    let out = linear_forward(&act, w, b, *in_dim, *out_dim);
                    traces.push(Trace::Linear { input: act });
                    act = out;
                }
                (Layer::Dropout { rate }, _) => {
                    if let Some(r) = rng.as_deref_mut() {
                        if *rate > 0.0 {
                            let keep = 1.0 - *rate;
                            let mask: Vec<f64> = act
                                .iter()
                                .map(|_| {
                                    if rng::uniform(r) < keep {
                                        1.0 / keep
                                    } else {
                                        0.0
                                    }
                                })
                                .collect();
                            act = act.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
                            traces.push(Trace::Dropout { mask: Some(mask) });
                            continue;
                        }
                    }
                    traces.push(Trace::Dropout { mask: None });
                }
                (Layer::Residual { channels, w1, b1, w2, b2, .. }, Shape::Chw(_, h, wd)) => {
                    let c = *channels;
                    let u = conv_forward(&act, w1, b1, c, c, h, wd);
                    let mask_mid: Vec<bool> = u.iter().map(|&v| v > 0.0).collect();
                    let hidden: Vec<f64> =
                        u.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
                    let v = conv_forward(&hidden, w2, b2, c, c, h, wd);
                    let s: Vec<f64> = act.iter().zip(&v).map(|(&x, &vv)| x + vv).collect();
                    let mask_out: Vec<bool> = s.iter().map(|&v| v > 0.0).collect();
                    let out: Vec<f64> = s.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
                    traces.push(Trace::Residual {
                        input: act,
                        mask_mid,
                        hidden,
                        mask_out,
                    });
                    act = out;
                }
                _ => unreachable!("shape plan validated at construction"),
            }
        }
        (traces, act)
    }

    /// Zero-filled gradient buffers matching the layer stack.
    pub fn zero_grads(&self) -> Vec<LayerGrad> {
        self.layers
            .iter()
            .map(|layer| match layer {
                Layer::Conv { w, b, .. } | Layer::Linear { w, b, .. } => LayerGrad::WithBias {
                    w: vec![0.0; w.len()],
                    b: vec![0.0; b.len()],
                },
                Layer::Residual { w1, b1, w2, b2, .. } => LayerGrad::ResidualPair {
                    w1: vec![0.0; w1.len()],
                    b1: vec![0.0; b1.len()],
                    w2: vec![0.0; w2.len()],
                    b2: vec![0.0; b2.len()],
                },
                _ => LayerGrad::None,
            })
            .collect()
    }

    /// Backward pass from a logit gradient. Accumulates parameter gradients
    /// into `grads` and returns the gradient wrt the planar input.
    fn backward(
        &self,
        traces: &[Trace],
        grad_logits: &[f64],
        grads: &mut [LayerGrad],
    ) -> Vec<f64> {
        let mut grad = grad_logits.to_vec();
        for i in (0..self.layers.len()).rev() {
            let shape = self.shapes[i];
            grad = match (&self.layers[i], &traces[i], &mut grads[i]) {
                (
                    Layer::Conv { in_c, out_c, w, .. },
                    Trace::Conv { input },
                    LayerGrad::WithBias { w: gw, b: gb },
                ) => {
                    let (h, wd) = match shape {
                        Shape::Chw(_, h, wd) => (h, wd),
                        _ => unreachable!(),
                    };
                    conv_backward(input, &grad, w, *in_c, *out_c, h, wd, gw, gb)
                }
                (Layer::Relu, Trace::Relu { mask }, _) => grad
                    .iter()
                    .zip(mask)
                    .map(|(&g, &m)| if m { g } else { 0.0 })
                    .collect(),
                (Layer::MaxPool2, Trace::MaxPool2 { argmax, in_len }, _) => {
                    let mut gin = vec![0.0; *in_len];
                    for (o, &src) in argmax.iter().enumerate() {
                        gin[src] += grad[o];
                    }
                    gin
                }
                (Layer::Flatten, _, _) => grad,
                (
                    Layer::Linear { in_dim, out_dim, w, .. },
                    Trace::Linear { input },
                    LayerGrad::WithBias { w: gw, b: gb },
                ) => {
                    let mut gin = vec![0.0; *in_dim];
                    for o in 0..*out_dim {
                        let g = grad[o];
                        gb[o] += g;
                        let row = &w[o * in_dim..(o + 1) * in_dim];
                        let grow = &mut gw[o * in_dim..(o + 1) * in_dim];
                        for i in 0..*in_dim {
                            grow[i] += g * input[i];
                            gin[i] += g * row[i];
                        }
                    }
                    gin
                }
                (Layer::Dropout { .. }, Trace::Dropout { mask }, _) => match mask {
                    Some(m) => grad.iter().zip(m).map(|(&g, &mv)| g * mv).collect(),
                    None => grad,
                },
                (
                    Layer::Residual { channels, w1, w2, .. },
                    Trace::Residual {
                        input,
                        mask_mid,
                        hidden,
                        mask_out,
                    },
                    LayerGrad::ResidualPair {
                        w1: gw1,
                        b1: gb1,
                        w2: gw2,
                        b2: gb2,
                    },
                ) => {
                    let (h, wd) = match shape {
                        Shape::Chw(_, h, wd) => (h, wd),
                        _ => unreachable!(),
                    };
                    let c = *channels;
                    let gs: Vec<f64> = grad
                        .iter()
                        .zip(mask_out)
                        .map(|(&g, &m)| if m { g } else { 0.0 })
                        .collect();
                    let ga = conv_backward(hidden, &gs, w2, c, c, h, wd, gw2, gb2);
                    let gu: Vec<f64> = ga
                        .iter()
                        .zip(mask_mid)
                        .map(|(&g, &m)| if m { g } else { 0.0 })
                        .collect();
                    let gx = conv_backward(input, &gu, w1, c, c, h, wd, gw1, gb1);
                    gs.iter().zip(&gx).map(|(&a, &b)| a + b).collect()
                }
                _ => unreachable!("trace and grads mirror the layer stack"),
            };
        }
        grad
    }

    /// Forward + backward for one sample under softmax cross-entropy against
    /// a target distribution. Returns (loss, grad wrt planar input).
    ///
    /// `dropout_rng = None` runs the forward in inference mode, which is what
    /// projector training against a frozen classifier needs.
    pub fn backprop_ce(
        &self,
        image: &[f64],
        target: &[f64],
        dropout_rng: Option<&mut ChaCha8Rng>,
        grads: &mut [LayerGrad],
    ) -> Result<(f64, Vec<f64>), CoreError> {
        self.check_input(image)?;
        let planar = self.to_planar(image);
        let (traces, logits) = self.forward_train(&planar, dropout_rng);
        let probs = softmax(&logits);
        let mut loss = 0.0;
        for (p, q) in probs.iter().zip(target) {
            if *q > 0.0 {
                // clamp (unlike max) lets a NaN probability propagate into
                // the loss, so divergence is detectable by the caller.
                loss -= q * libm::log(p.clamp(1e-300, 1.0));
            }
        }
        let grad_logits: Vec<f64> = probs.iter().zip(target).map(|(&p, &q)| p - q).collect();
        let grad_in = self.backward(&traces, &grad_logits, grads);
        Ok((loss, grad_in))
    }

    /// Apply a scaled gradient step directly (used by the optimizer).
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(usize, &mut [f64])) {
        let mut slot = 0;
        for layer in &mut self.layers {
            match layer {
                Layer::Conv { w, b, .. } | Layer::Linear { w, b, .. } => {
                    f(slot, w);
                    f(slot + 1, b);
                    slot += 2;
                }
                Layer::Residual { w1, b1, w2, b2, .. } => {
                    f(slot, w1);
                    f(slot + 1, b1);
                    f(slot + 2, w2);
                    f(slot + 3, b2);
                    slot += 4;
                }
                _ => {}
            }
        }
    }

    /// Flattened view of gradient buffers in the same slot order as
    /// `for_each_param_mut`.
    pub fn grad_slots(grads: &[LayerGrad]) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for g in grads {
            match g {
                LayerGrad::None => {}
                LayerGrad::WithBias { w, b } => {
                    out.push(w.as_slice());
                    out.push(b.as_slice());
                }
                LayerGrad::ResidualPair { w1, b1, w2, b2 } => {
                    out.push(w1.as_slice());
                    out.push(b1.as_slice());
                    out.push(w2.as_slice());
                    out.push(b2.as_slice());
                }
            }
        }
        out
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| libm::exp(v - max)).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Adam with fixed hyperparameters (beta1 0.9, beta2 0.999, eps 1e-8).
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, slot_lens: &[usize]) -> Self {
        Adam {
            lr,
            step: 0,
            m: slot_lens.iter().map(|&l| vec![0.0; l]).collect(),
            v: slot_lens.iter().map(|&l| vec![0.0; l]).collect(),
        }
    }

    pub fn for_network(lr: f64, net: &Network) -> Self {
        let lens: Vec<usize> = net.named_params().iter().map(|(_, p)| p.len()).collect();
        Adam::new(lr, &lens)
    }

    /// One update over all parameter slots. `grads` must be in slot order.
    pub fn apply(&mut self, net: &mut Network, grads: &[LayerGrad]) {
        self.step += 1;
        let slots = Network::grad_slots(grads);
        let bc1 = 1.0 - libm::pow(0.9, self.step as f64);
        let bc2 = 1.0 - libm::pow(0.999, self.step as f64);
        net.for_each_param_mut(|slot, params| {
            let g = slots[slot];
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            for i in 0..params.len() {
                m[i] = 0.9 * m[i] + 0.1 * g[i];
                v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                params[i] -= self.lr * mhat / (libm::sqrt(vhat) + 1e-8);
            }
        });
    }

    /// Update a bare parameter vector outside a network (projector weights).
    pub fn apply_flat(&mut self, slot_params: &mut [&mut [f64]], grads: &[&[f64]]) {
        self.step += 1;
        let bc1 = 1.0 - libm::pow(0.9, self.step as f64);
        let bc2 = 1.0 - libm::pow(0.999, self.step as f64);
        for (slot, params) in slot_params.iter_mut().enumerate() {
            let g = grads[slot];
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            for i in 0..params.len() {
                m[i] = 0.9 * m[i] + 0.1 * g[i];
                v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                params[i] -= self.lr * mhat / (libm::sqrt(vhat) + 1e-8);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn tiny_net() -> Network {
        // 4x4x1 input, one 2-channel conv, pool, flatten, 8 -> 3 linear.
        let layers = vec![
            Layer::Conv {
                name: "conv0".to_string(),
                in_c: 1,
                out_c: 2,
                w: (0..18).map(|i| (i as f64 - 9.0) * 0.05).collect(),
                b: vec![0.01, -0.02],
            },
            Layer::Relu,
            Layer::MaxPool2,
            Layer::Flatten,
            Layer::Linear {
                name: "fc0".to_string(),
                in_dim: 8,
                out_dim: 3,
                w: (0..24).map(|i| ((i * 7) % 11) as f64 * 0.03 - 0.15).collect(),
                b: vec![0.0, 0.1, -0.1],
            },
        ];
        Network::new(Geometry::new(4, 4, 1), layers).unwrap()
    }

    #[test]
    fn softmax_normalizes() {
        let p = softmax(&[1.0, 2.0, 3.0]);
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(p.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn forward_rejects_wrong_geometry() {
        let net = tiny_net();
        assert!(matches!(
            net.forward_logits(&[0.0; 9]),
            Err(CoreError::Shape(_))
        ));
    }

    #[test]
    fn hand_computed_linear_forward() {
        // 1x1 image through a single 1 -> 2 linear layer.
        let layers = vec![
            Layer::Flatten,
            Layer::Linear {
                name: "fc0".to_string(),
                in_dim: 1,
                out_dim: 2,
                w: vec![2.0, -1.0],
                b: vec![0.5, 0.25],
            },
        ];
        let net = Network::new(Geometry::new(1, 1, 1), layers).unwrap();
        let logits = net.forward_logits(&[0.5]).unwrap();
        assert_eq!(logits, vec![1.5, -0.25]);
    }

    /// Central-difference gradient check over every parameter and the input.
    #[test]
    fn gradients_match_finite_differences() {
        let net = tiny_net();
        let image: Vec<f64> = (0..16).map(|i| (i as f64) / 16.0).collect();
        let target = vec![0.2, 0.5, 0.3];

        let mut grads = net.zero_grads();
        let (_, grad_in) = net
            .backprop_ce(&image, &target, None, &mut grads)
            .unwrap();
        let analytic: Vec<f64> = Network::grad_slots(&grads)
            .iter()
            .flat_map(|s| s.iter().copied())
            .collect();

        let h = 1e-6;
        let named = net.named_params();
        let mut flat_idx = 0;
        for (pi, (_, param)) in named.iter().enumerate() {
            for i in 0..param.len() {
                let eval = |delta: f64| {
                    let mut values: Vec<(String, Vec<f64>)> = net
                        .named_params()
                        .iter()
                        .map(|(n, v)| (n.clone(), v.to_vec()))
                        .collect();
                    values[pi].1[i] += delta;
                    let mut pert = net.clone();
                    pert.set_named_params(&values).unwrap();
                    let mut g = pert.zero_grads();
                    pert.backprop_ce(&image, &target, None, &mut g).unwrap().0
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic[flat_idx];
                let denom = a.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    (a - numeric).abs() / denom < 1e-4,
                    "param {pi}[{i}]: analytic {a} vs numeric {numeric}"
                );
                flat_idx += 1;
            }
        }

        // Input gradient too (used by the sample generator).
        for i in 0..image.len() {
            let eval = |delta: f64| {
                let mut img = image.clone();
                img[i] += delta;
                let mut g = net.zero_grads();
                net.backprop_ce(&img, &target, None, &mut g).unwrap().0
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = grad_in[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            assert!(
                (a - numeric).abs() / denom < 1e-4,
                "input[{i}]: analytic {a} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn residual_gradients_match_finite_differences() {
        let layers = vec![
            Layer::Conv {
                name: "conv0".to_string(),
                in_c: 1,
                out_c: 2,
                w: (0..18).map(|i| ((i * 5) % 13) as f64 * 0.04 - 0.2).collect(),
                b: vec![0.05, -0.05],
            },
            Layer::Relu,
            Layer::Residual {
                name: "res0".to_string(),
                channels: 2,
                w1: (0..36).map(|i| ((i * 3) % 17) as f64 * 0.02 - 0.1).collect(),
                b1: vec![0.01, 0.02],
                w2: (0..36).map(|i| ((i * 11) % 19) as f64 * 0.02 - 0.15).collect(),
                b2: vec![-0.01, 0.03],
            },
            Layer::MaxPool2,
            Layer::Flatten,
            Layer::Linear {
                name: "fc0".to_string(),
                in_dim: 8,
                out_dim: 2,
                w: (0..16).map(|i| ((i * 7) % 9) as f64 * 0.05 - 0.2).collect(),
                b: vec![0.0, 0.0],
            },
        ];
        let net = Network::new(Geometry::new(4, 4, 1), layers).unwrap();
        let image: Vec<f64> = (0..16).map(|i| ((i * 13) % 16) as f64 / 16.0).collect();
        let target = vec![0.7, 0.3];

        let mut grads = net.zero_grads();
        net.backprop_ce(&image, &target, None, &mut grads).unwrap();
        let analytic: Vec<f64> = Network::grad_slots(&grads)
            .iter()
            .flat_map(|s| s.iter().copied())
            .collect();

        let h = 1e-6;
        let mut flat_idx = 0;
        let names: Vec<String> = net.named_params().iter().map(|(n, _)| n.clone()).collect();
        for (pi, name) in names.iter().enumerate() {
            let len = net.named_params()[pi].1.len();
            for i in 0..len {
                let eval = |delta: f64| {
                    let mut values: Vec<(String, Vec<f64>)> = net
                        .named_params()
                        .iter()
                        .map(|(n, v)| (n.clone(), v.to_vec()))
                        .collect();
                    values[pi].1[i] += delta;
                    let mut pert = net.clone();
                    pert.set_named_params(&values).unwrap();
                    let mut g = pert.zero_grads();
                    pert.backprop_ce(&image, &target, None, &mut g).unwrap().0
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic[flat_idx];
                let denom = a.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    (a - numeric).abs() / denom < 1e-4,
                    "{name}[{i}]: analytic {a} vs numeric {numeric}"
                );
                flat_idx += 1;
            }
        }
    }
}
