//! A minimal CONV(+ReLU) stack with an optional dense head, trained in `f64`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_ptk, write_ptk, FeatureMap, LayerShape, WeightTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Loss {
    SoftmaxCrossEntropy,
    /// `0.5 * ||output - onehot(label)||^2`
    MeanSquared,
    /// Contributes nothing; leaves only the ADMM penalty terms.
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub shape: LayerShape,
    /// `[out][in][row][col]`
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    /// `[out][in]`
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// CONV+ReLU layers followed by an optional fully connected head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyNet {
    pub convs: Vec<ConvLayer>,
    pub fc: Option<DenseLayer>,
    pub loss: Loss,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub input: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            channels: self.channels,
            height: self.height,
            width: self.width,
            classes: self.classes,
            samples: Vec::new(),
        }
    }
}

/// Per-parameter gradients, mirroring the layout of [`TinyNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub convs: Vec<(Vec<f64>, Vec<f64>)>,
    pub fc: Option<(Vec<f64>, Vec<f64>)>,
}

impl Gradients {
    pub fn zeros_like(net: &TinyNet) -> Self {
        Self {
            convs: net
                .convs
                .iter()
                .map(|c| (vec![0.0; c.weights.len()], vec![0.0; c.bias.len()]))
                .collect(),
            fc: net
                .fc
                .as_ref()
                .map(|f| (vec![0.0; f.weights.len()], vec![0.0; f.bias.len()])),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.convs {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        if let Some((w, b)) = &self.fc {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    fn scale(&mut self, s: f64) {
        for (w, b) in &mut self.convs {
            w.iter_mut().chain(b.iter_mut()).for_each(|v| *v *= s);
        }
        if let Some((w, b)) = &mut self.fc {
            w.iter_mut().chain(b.iter_mut()).for_each(|v| *v *= s);
        }
    }
}

fn conv_forward(layer: &ConvLayer, input: &[f64]) -> Vec<f64> {
    let s = layer.shape;
    let (oh, ow) = (s.output_h(), s.output_w());
    let mut out = vec![0.0; s.out_channels * oh * ow];
    for o in 0..s.out_channels {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = layer.bias[o];
                for i in 0..s.in_channels {
                    for p in 0..s.kernel_h {
                        let in_row = (i * s.input_h + y * s.stride + p) * s.input_w + x * s.stride;
                        let w_row = ((o * s.in_channels + i) * s.kernel_h + p) * s.kernel_w;
                        for q in 0..s.kernel_w {
                            acc += layer.weights[w_row + q] * input[in_row + q];
                        }
                    }
                }
                out[(o * oh + y) * ow + x] = acc;
            }
        }
    }
    out
}

fn conv_backward(
    layer: &ConvLayer,
    input: &[f64],
    d_pre: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let s = layer.shape;
    let (oh, ow) = (s.output_h(), s.output_w());
    let mut d_in = vec![0.0; input.len()];
    for o in 0..s.out_channels {
        for y in 0..oh {
            for x in 0..ow {
                let g = d_pre[(o * oh + y) * ow + x];
                if g == 0.0 {
                    continue;
                }
                db[o] += g;
                for i in 0..s.in_channels {
                    for p in 0..s.kernel_h {
                        let in_row = (i * s.input_h + y * s.stride + p) * s.input_w + x * s.stride;
                        let w_row = ((o * s.in_channels + i) * s.kernel_h + p) * s.kernel_w;
                        for q in 0..s.kernel_w {
                            dw[w_row + q] += g * input[in_row + q];
                            d_in[in_row + q] += g * layer.weights[w_row + q];
                        }
                    }
                }
            }
        }
    }
    d_in
}

impl TinyNet {
    /// He-uniform initialisation of a CONV stack with an optional dense head of `classes` outputs.
    pub fn init<R: Rng>(
        shapes: &[LayerShape],
        classes: Option<usize>,
        loss: Loss,
        rng: &mut R,
    ) -> Result<Self> {
        if shapes.is_empty() {
            return Err(Error::EmptyInput(
                "network needs at least one conv layer".into(),
            ));
        }
        for pair in shapes.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if a.out_channels != b.in_channels
                || a.output_h() != b.input_h
                || a.output_w() != b.input_w
            {
                return Err(Error::Shape(format!(
                    "layer shapes do not chain: {a:?} -> {b:?}"
                )));
            }
        }
        let convs = shapes
            .iter()
            .map(|&shape| {
                shape.validate()?;
                let fan_in = (shape.in_channels * shape.kernel_len()) as f64;
                let bound = (6.0 / fan_in).sqrt();
                Ok(ConvLayer {
                    shape,
                    weights: (0..shape.weight_len())
                        .map(|_| rng.random_range(-bound..bound))
                        .collect(),
                    bias: vec![0.0; shape.out_channels],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let last = shapes[shapes.len() - 1];
        let fc = classes.map(|classes| {
            let inputs = last.out_channels * last.output_h() * last.output_w();
            let bound = (6.0 / inputs as f64).sqrt();
            DenseLayer {
                inputs,
                outputs: classes,
                weights: (0..inputs * classes)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect(),
                bias: vec![0.0; classes],
            }
        });
        Ok(Self { convs, fc, loss })
    }

    pub fn param_count(&self) -> usize {
        self.convs
            .iter()
            .map(|c| c.weights.len() + c.bias.len())
            .sum::<usize>()
            + self
                .fc
                .as_ref()
                .map_or(0, |f| f.weights.len() + f.bias.len())
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for c in &self.convs {
            out.extend_from_slice(&c.weights);
            out.extend_from_slice(&c.bias);
        }
        if let Some(f) = &self.fc {
            out.extend_from_slice(&f.weights);
            out.extend_from_slice(&f.bias);
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.param_count(), "parameter vector length");
        let mut at = 0;
        let mut take = |dst: &mut Vec<f64>| {
            let n = dst.len();
            dst.copy_from_slice(&params[at..at + n]);
            at += n;
        };
        for c in &mut self.convs {
            take(&mut c.weights);
            take(&mut c.bias);
        }
        if let Some(f) = &mut self.fc {
            take(&mut f.weights);
            take(&mut f.bias);
        }
    }

    /// Network output (logits) for one input.
    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut act = input.to_vec();
        for c in &self.convs {
            act = conv_forward(c, &act);
            act.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        match &self.fc {
            Some(f) => (0..f.outputs)
                .map(|o| {
                    f.bias[o]
                        + f.weights[o * f.inputs..(o + 1) * f.inputs]
                            .iter()
                            .zip(&act)
                            .map(|(w, a)| w * a)
                            .sum::<f64>()
                })
                .collect(),
            None => act,
        }
    }

    pub fn predict(&self, input: &[f64]) -> usize {
        let out = self.forward(input);
        out.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                if v > best.1 {
                    (i, v)
                } else {
                    best
                }
            })
            .0
    }

    pub fn accuracy(&self, data: &Dataset) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let correct = data
            .samples
            .iter()
            .filter(|s| self.predict(&s.input) == s.label)
            .count();
        correct as f64 / data.len() as f64
    }

    fn sample_loss(&self, out: &[f64], label: usize) -> (f64, Vec<f64>) {
        match self.loss {
            Loss::SoftmaxCrossEntropy => {
                let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exp: Vec<f64> = out.iter().map(|v| (v - max).exp()).collect();
                let z: f64 = exp.iter().sum();
                let loss = z.ln() + max - out[label];
                let grad = exp
                    .iter()
                    .enumerate()
                    .map(|(i, e)| e / z - if i == label { 1.0 } else { 0.0 })
                    .collect();
                (loss, grad)
            }
            Loss::MeanSquared => {
                let grad: Vec<f64> = out
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v - if i == label { 1.0 } else { 0.0 })
                    .collect();
                (0.5 * grad.iter().map(|g| g * g).sum::<f64>(), grad)
            }
            Loss::Constant => (0.0, vec![0.0; out.len()]),
        }
    }

    /// Mean loss over `data`.
    pub fn loss(&self, data: &Dataset) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let total: f64 = data
            .samples
            .iter()
            .map(|s| self.sample_loss(&self.forward(&s.input), s.label).0)
            .sum();
        total / data.len() as f64
    }

    /// Mean loss and its exact gradient over `data`.
    pub fn loss_and_grad(&self, data: &Dataset) -> (f64, Gradients) {
        let mut grads = Gradients::zeros_like(self);
        if data.is_empty() {
            return (0.0, grads);
        }
        let mut total = 0.0;
        for s in &data.samples {
            // forward, keeping every layer input and pre-activation
            let mut inputs = Vec::with_capacity(self.convs.len());
            let mut pres = Vec::with_capacity(self.convs.len());
            let mut act = s.input.clone();
            for c in &self.convs {
                let pre = conv_forward(c, &act);
                inputs.push(act);
                act = pre.iter().map(|v| v.max(0.0)).collect();
                pres.push(pre);
            }
            let out = match &self.fc {
                Some(f) => (0..f.outputs)
                    .map(|o| {
                        f.bias[o]
                            + f.weights[o * f.inputs..(o + 1) * f.inputs]
                                .iter()
                                .zip(&act)
                                .map(|(w, a)| w * a)
                                .sum::<f64>()
                    })
                    .collect(),
                None => act.clone(),
            };
            let (loss, d_out) = self.sample_loss(&out, s.label);
            total += loss;

            let mut d_act = match (&self.fc, &mut grads.fc) {
                (Some(f), Some((gw, gb))) => {
                    let mut d_act = vec![0.0; f.inputs];
                    for o in 0..f.outputs {
                        let g = d_out[o];
                        gb[o] += g;
                        for i in 0..f.inputs {
                            gw[o * f.inputs + i] += g * act[i];
                            d_act[i] += g * f.weights[o * f.inputs + i];
                        }
                    }
                    d_act
                }
                _ => d_out,
            };
            for k in (0..self.convs.len()).rev() {
                let d_pre: Vec<f64> = d_act
                    .iter()
                    .zip(&pres[k])
                    .map(|(g, p)| if *p > 0.0 { *g } else { 0.0 })
                    .collect();
                let (gw, gb) = &mut grads.convs[k];
                d_act = conv_backward(&self.convs[k], &inputs[k], &d_pre, gw, gb);
            }
        }
        let n = data.len() as f64;
        grads.scale(1.0 / n);
        (total / n, grads)
    }

    /// `f32` weight tensor of conv layer `k`, as consumed by the encoder and executor.
    pub fn conv_tensor(&self, k: usize) -> Result<WeightTensor> {
        let c = &self.convs[k];
        WeightTensor::new(
            c.shape,
            c.weights.iter().map(|&v| v as f32).collect(),
            c.bias.iter().map(|&v| v as f32).collect(),
        )
    }

    /// Reference feature-map path through the conv stack (ReLU after each layer),
    /// computed with the dense `f32` oracle.
    pub fn conv_stack_dense(&self, input: &FeatureMap) -> Result<FeatureMap> {
        let mut act = input.clone();
        for k in 0..self.convs.len() {
            act = crate::tensor::conv_dense(&act, &self.conv_tensor(k)?)?.relu();
        }
        Ok(act)
    }
}

impl TinyNet {
    /// Serializes as a sequence of `PTK0` records: a header `[C, H, W, stride...]`
    /// (one stride per conv layer), then weights and bias of every conv layer,
    /// then the dense head's `[out, in]` weights and bias if present.
    pub fn to_ptk_bytes(&self) -> Vec<u8> {
        let first = self.convs[0].shape;
        let mut header = vec![
            first.in_channels as f32,
            first.input_h as f32,
            first.input_w as f32,
        ];
        header.extend(self.convs.iter().map(|c| c.shape.stride as f32));
        let mut out = Vec::new();
        let put = |out: &mut Vec<u8>, dims: &[usize], data: &[f64]| {
            let dims: Vec<u32> = dims.iter().map(|&d| d as u32).collect();
            let data: Vec<f32> = data.iter().map(|&v| v as f32).collect();
            write_ptk(out, &dims, &data).expect("writing to a Vec cannot fail");
        };
        write_ptk(&mut out, &[header.len() as u32], &header).expect("writing to a Vec cannot fail");
        for c in &self.convs {
            let s = c.shape;
            put(
                &mut out,
                &[s.out_channels, s.in_channels, s.kernel_h, s.kernel_w],
                &c.weights,
            );
            put(&mut out, &[s.out_channels], &c.bias);
        }
        if let Some(f) = &self.fc {
            put(&mut out, &[f.outputs, f.inputs], &f.weights);
            put(&mut out, &[f.outputs], &f.bias);
        }
        out
    }

    /// Inverse of [`TinyNet::to_ptk_bytes`]. Nets with a dense head use softmax
    /// cross-entropy, others mean squared error.
    pub fn from_ptk_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let (hdims, header) = read_ptk(&mut cur)?;
        if hdims.len() != 1
            || header.len() < 4
            || header.iter().any(|v| v.fract() != 0.0 || *v < 1.0)
        {
            return Err(Error::Shape(
                "net header must be [C, H, W, stride...]".into(),
            ));
        }
        let header: Vec<usize> = header.iter().map(|&v| v as usize).collect();
        let (mut c, mut h, mut w) = (header[0], header[1], header[2]);
        let mut convs = Vec::new();
        for &stride in &header[3..] {
            let (dims, weights) = read_ptk(&mut cur)?;
            let (bdims, bias) = read_ptk(&mut cur)?;
            if dims.len() != 4 || dims[1] != c || bdims != [dims[0]] {
                return Err(Error::Shape(format!(
                    "conv layer {} records do not chain",
                    convs.len()
                )));
            }
            let shape = LayerShape::new(dims[2], dims[3], dims[1], dims[0], stride, h, w)?;
            (c, h, w) = (shape.out_channels, shape.output_h(), shape.output_w());
            convs.push(ConvLayer {
                shape,
                weights: weights.iter().map(|&v| v as f64).collect(),
                bias: bias.iter().map(|&v| v as f64).collect(),
            });
        }
        let fc = if cur.is_empty() {
            None
        } else {
            let (dims, weights) = read_ptk(&mut cur)?;
            let (bdims, bias) = read_ptk(&mut cur)?;
            if dims.len() != 2 || dims[1] != c * h * w || bdims != [dims[0]] || !cur.is_empty() {
                return Err(Error::Shape(
                    "dense head records do not match the conv stack".into(),
                ));
            }
            Some(DenseLayer {
                inputs: dims[1],
                outputs: dims[0],
                weights: weights.iter().map(|&v| v as f64).collect(),
                bias: bias.iter().map(|&v| v as f64).collect(),
            })
        };
        let loss = if fc.is_some() {
            Loss::SoftmaxCrossEntropy
        } else {
            Loss::MeanSquared
        };
        Ok(Self { convs, fc, loss })
    }
}

/// Plain ADAM over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, len: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}
