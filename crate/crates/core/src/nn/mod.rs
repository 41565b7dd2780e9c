//! Small dense-tensor CNN engine trained with the memristor switching curve
//! as its activation.
//!
//! Every parameterized layer emits `a(net + b0)` with
//! `a(u) = 1 - exp(-e^u)`, the switching probability of a device driven by a
//! voltage affine in `u` for a fixed pulse width. The offset `b0` is shared by
//! all neurons and never trained. Subsample layers are plain means.

mod kernels;
mod tensor;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{Purpose, StreamKey};

pub use kernels::{conv_forward, pool_forward};
pub use tensor::Tensor;

/// Device-derived activation `1 - exp(-e^(z + b0))`.
pub fn activation(z: f64, b0: f64) -> f64 {
    -(-(z + b0).exp()).exp_m1()
}

/// `da/dz` written in terms of the output: `(o - 1) ln(1 - o)`.
pub fn activation_deriv_from_output(o: f64) -> Result<f64> {
    if !(o > 0.0 && o < 1.0) {
        return Err(Error::Domain(format!("activation output {o} outside (0, 1)")));
    }
    Ok((o - 1.0) * (-o).ln_1p())
}

/// Same derivative from the survival probability `s = 1 - o`, which the
/// forward pass stores exactly: `-s ln s`.
#[inline]
fn deriv_from_survival(s: f64, e: f64) -> f64 {
    // ln s = -e^u exactly, so -s ln s = s * e^u.
    s * e
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    /// Valid, stride-1 convolution with a square kernel.
    Conv {
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
    },
    /// Non-overlapping mean pooling with stride equal to `factor`.
    Subsample { factor: usize },
    Dense { fan_in: usize, fan_out: usize },
}

impl LayerSpec {
    pub fn is_parameterized(&self) -> bool {
        !matches!(self, LayerSpec::Subsample { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Subsample { .. } => "subsample",
            LayerSpec::Dense { .. } => "dense",
        }
    }

    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Conv {
                kernel,
                in_channels,
                out_channels,
            } => Some(vec![out_channels, in_channels, kernel, kernel]),
            LayerSpec::Dense { fan_in, fan_out } => Some(vec![fan_out, fan_in]),
            LayerSpec::Subsample { .. } => None,
        }
    }

    fn fans(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Conv {
                kernel,
                in_channels,
                out_channels,
            } => (in_channels * kernel * kernel, out_channels * kernel * kernel),
            LayerSpec::Dense { fan_in, fan_out } => (fan_in, fan_out),
            LayerSpec::Subsample { .. } => (0, 0),
        }
    }

    /// Output shape for an input of `shape`, or a structured error naming `index`.
    pub fn output_shape(&self, index: usize, [c, h, w]: [usize; 3]) -> Result<[usize; 3]> {
        let name = || format!("{index} ({})", self.name());
        match *self {
            LayerSpec::Conv {
                kernel,
                in_channels,
                out_channels,
            } => {
                if kernel == 0 || in_channels == 0 || out_channels == 0 {
                    return Err(Error::shape(name(), "extents must be >= 1"));
                }
                if c != in_channels {
                    return Err(Error::shape(
                        name(),
                        format!("expects {in_channels} input channels, got {c}"),
                    ));
                }
                if kernel > h || kernel > w {
                    return Err(Error::shape(
                        name(),
                        format!("kernel {kernel} larger than {h}x{w} input"),
                    ));
                }
                Ok([out_channels, h - kernel + 1, w - kernel + 1])
            }
            LayerSpec::Subsample { factor } => {
                if factor == 0 {
                    return Err(Error::shape(name(), "factor must be >= 1"));
                }
                if h % factor != 0 || w % factor != 0 {
                    return Err(Error::shape(
                        name(),
                        format!("{h}x{w} input not divisible by factor {factor}"),
                    ));
                }
                Ok([c, h / factor, w / factor])
            }
            LayerSpec::Dense { fan_in, fan_out } => {
                if fan_in == 0 || fan_out == 0 {
                    return Err(Error::shape(name(), "extents must be >= 1"));
                }
                if c * h * w != fan_in {
                    return Err(Error::shape(
                        name(),
                        format!("expects fan-in {fan_in}, got {}", c * h * w),
                    ));
                }
                Ok([fan_out, 1, 1])
            }
        }
    }
}

/// Layer graph, real-valued weights, and the fixed activation offset.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
    /// One tensor per parameterized layer, in layer order.
    weights: Vec<Tensor>,
    b0: f64,
    shapes: Vec<[usize; 3]>,
}

/// Per-layer outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pub outputs: Vec<Vec<f64>>,
    /// Survival probability `exp(-e^u)` for activated layers.
    survival: Vec<Vec<f64>>,
    /// `e^u` for activated layers.
    hazard: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.outputs.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl NetworkModel {
    pub fn from_parts(
        input_shape: [usize; 3],
        layers: Vec<LayerSpec>,
        weights: Vec<Tensor>,
        b0: f64,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidParam("network has no layers".into()));
        }
        if !b0.is_finite() {
            return Err(Error::InvalidParam("b0 must be finite".into()));
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut shape = input_shape;
        for (i, l) in layers.iter().enumerate() {
            shape = l.output_shape(i, shape)?;
            shapes.push(shape);
        }
        let expected: Vec<Vec<usize>> = layers.iter().filter_map(LayerSpec::weight_shape).collect();
        if expected.len() != weights.len() {
            return Err(Error::InvalidParam(format!(
                "{} weight tensors for {} parameterized layers",
                weights.len(),
                expected.len()
            )));
        }
        for (i, (e, w)) in expected.iter().zip(&weights).enumerate() {
            if e.as_slice() != w.shape() {
                return Err(Error::shape(
                    format!("param {i}"),
                    format!("weight shape {:?}, expected {e:?}", w.shape()),
                ));
            }
        }
        Ok(Self {
            input_shape,
            layers,
            weights,
            b0,
            shapes,
        })
    }

    /// Glorot-uniform weights, `U(+-sqrt(6 / (fan_in + fan_out)))`.
    pub fn init(input_shape: [usize; 3], layers: Vec<LayerSpec>, b0: f64, seed: u64) -> Result<Self> {
        let weights = layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.weight_shape().map(|s| (i, l, s)))
            .map(|(i, l, shape)| {
                let (fi, fo) = l.fans();
                let bound = (6.0 / (fi + fo) as f64).sqrt();
                let mut rng = StreamKey::new(seed, Purpose::WeightInit, 0, i as u64).rng();
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor::from_parts(shape, data)
            })
            .collect();
        Self::from_parts(input_shape, layers, weights, b0)
    }

    /// 28x28-6c5-2s-12c5-2s-10o.
    pub fn reference_layers() -> Vec<LayerSpec> {
        vec![
            LayerSpec::Conv {
                kernel: 5,
                in_channels: 1,
                out_channels: 6,
            },
            LayerSpec::Subsample { factor: 2 },
            LayerSpec::Conv {
                kernel: 5,
                in_channels: 6,
                out_channels: 12,
            },
            LayerSpec::Subsample { factor: 2 },
            LayerSpec::Dense {
                fan_in: 192,
                fan_out: 10,
            },
        ]
    }

    pub fn reference_cnn(b0: f64, seed: u64) -> Self {
        Self::init([1, 28, 28], Self::reference_layers(), b0, seed).expect("reference topology is valid")
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Output shape of every layer.
    pub fn shapes(&self) -> &[[usize; 3]] {
        &self.shapes
    }

    pub fn input_shape_of(&self, layer: usize) -> [usize; 3] {
        if layer == 0 {
            self.input_shape
        } else {
            self.shapes[layer - 1]
        }
    }

    pub fn b0(&self) -> f64 {
        self.b0
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    /// Weight tensor of layer `layer`, if it is parameterized.
    pub fn layer_weights(&self, layer: usize) -> Option<&Tensor> {
        self.param_slot(layer).map(|i| &self.weights[i])
    }

    pub fn set_layer_weights(&mut self, layer: usize, data: Vec<f64>) -> Result<()> {
        let slot = self
            .param_slot(layer)
            .ok_or_else(|| Error::InvalidParam(format!("layer {layer} has no weights")))?;
        let shape = self.weights[slot].shape().to_vec();
        self.weights[slot] = Tensor::new(shape, data)?;
        Ok(())
    }

    fn param_slot(&self, layer: usize) -> Option<usize> {
        if !self.layers.get(layer)?.is_parameterized() {
            return None;
        }
        Some(self.layers[..layer].iter().filter(|l| l.is_parameterized()).count())
    }

    pub fn output_len(&self) -> usize {
        self.shapes.last().map(|s| s.iter().product()).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Tensor::len).sum()
    }

    /// FNV-1a over the bit patterns of every weight and of `b0`.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut feed = |x: u64| {
            for b in x.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for w in &self.weights {
            for v in w.data() {
                feed(v.to_bits());
            }
        }
        feed(self.b0.to_bits());
        h
    }

    pub fn forward(&self, input: &Tensor) -> Result<Trace> {
        let want: usize = self.input_shape.iter().product();
        if input.len() != want {
            return Err(Error::shape(
                "input",
                format!("expected {:?} ({want} values), got {}", self.input_shape, input.len()),
            ));
        }
        Ok(self.forward_slice(input.data()))
    }

    pub(crate) fn forward_slice(&self, input: &[f64]) -> Trace {
        let n = self.layers.len();
        let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut survival = vec![Vec::new(); n];
        let mut hazard = vec![Vec::new(); n];
        let mut slot = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            let x = if i == 0 { input } else { outputs[i - 1].as_slice() };
            let in_shape = self.input_shape_of(i);
            let out_len: usize = self.shapes[i].iter().product();
            let mut out = vec![0.0; out_len];
            match *layer {
                LayerSpec::Conv {
                    kernel,
                    out_channels,
                    ..
                } => {
                    conv_forward(x, in_shape, self.weights[slot].data(), kernel, out_channels, &mut out);
                    slot += 1;
                }
                LayerSpec::Dense { fan_out, .. } => {
                    kernels::dense_forward(x, self.weights[slot].data(), fan_out, &mut out);
                    slot += 1;
                }
                LayerSpec::Subsample { factor } => {
                    pool_forward(x, in_shape, factor, &mut out);
                }
            }
            if layer.is_parameterized() {
                let mut s = vec![0.0; out_len];
                let mut e = vec![0.0; out_len];
                for j in 0..out_len {
                    let ej = (out[j] + self.b0).exp();
                    e[j] = ej;
                    s[j] = (-ej).exp();
                    out[j] = -(-ej).exp_m1();
                }
                survival[i] = s;
                hazard[i] = e;
            }
            outputs.push(out);
        }
        Trace {
            outputs,
            survival,
            hazard,
        }
    }

    /// Predicted class: argmax of output activations, ties to the lowest index.
    pub fn predict(&self, input: &[f64]) -> usize {
        argmax(self.forward_slice(input).output())
    }

    /// Squared-error loss and its gradient with respect to every weight,
    /// flattened in parameter order.
    pub fn loss_and_gradient(&self, input: &[f64], target: &[f64]) -> (f64, Vec<f64>, Trace) {
        let trace = self.forward_slice(input);
        let out = trace.output();
        let mut delta: Vec<f64> = out.iter().zip(target).map(|(o, t)| o - t).collect();
        let loss = 0.5 * delta.iter().map(|d| d * d).sum::<f64>();

        let offsets = self.param_offsets();
        let mut grad = vec![0.0; self.param_count()];
        let mut slot = self.weights.len();
        for i in (0..self.layers.len()).rev() {
            let layer = self.layers[i];
            if layer.is_parameterized() {
                for ((d, s), e) in delta.iter_mut().zip(&trace.survival[i]).zip(&trace.hazard[i]) {
                    *d *= deriv_from_survival(*s, *e);
                }
            }
            let x = if i == 0 { input } else { trace.outputs[i - 1].as_slice() };
            let in_shape = self.input_shape_of(i);
            let need_input_grad = i > 0;
            let mut grad_in = if need_input_grad { vec![0.0; x.len()] } else { Vec::new() };
            match layer {
                LayerSpec::Conv {
                    kernel,
                    out_channels,
                    ..
                } => {
                    slot -= 1;
                    let g = &mut grad[offsets[slot]..offsets[slot] + self.weights[slot].len()];
                    kernels::conv_backward(
                        x,
                        in_shape,
                        self.weights[slot].data(),
                        kernel,
                        out_channels,
                        &delta,
                        g,
                        need_input_grad.then_some(grad_in.as_mut_slice()),
                    );
                }
                LayerSpec::Dense { .. } => {
                    slot -= 1;
                    let g = &mut grad[offsets[slot]..offsets[slot] + self.weights[slot].len()];
                    kernels::dense_backward(
                        x,
                        self.weights[slot].data(),
                        &delta,
                        g,
                        need_input_grad.then_some(grad_in.as_mut_slice()),
                    );
                }
                LayerSpec::Subsample { factor } => {
                    if need_input_grad {
                        kernels::pool_backward(&delta, in_shape, factor, &mut grad_in);
                    }
                }
            }
            delta = grad_in;
        }
        (loss, grad, trace)
    }

    fn param_offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.weights
            .iter()
            .map(|w| {
                let o = acc;
                acc += w.len();
                o
            })
            .collect()
    }

    fn apply_update(&mut self, grad: &[f64], scale: f64) {
        let mut k = 0;
        for w in &mut self.weights {
            for v in w.data_mut() {
                *v -= scale * grad[k];
                k += 1;
            }
        }
    }

    /// One SGD step on the mean squared-error gradient of the batch. Returns
    /// the mean batch loss (computed before the update).
    pub fn train_step(&mut self, inputs: &[&[f64]], targets: &[&[f64]], learning_rate: f64) -> Result<f64> {
        Ok(self.train_step_detail(inputs, targets, learning_rate)?.0)
    }

    fn train_step_detail(
        &mut self,
        inputs: &[&[f64]],
        targets: &[&[f64]],
        learning_rate: f64,
    ) -> Result<(f64, usize)> {
        if inputs.is_empty() || inputs.len() != targets.len() {
            return Err(Error::InvalidParam("batch must be nonempty with one target per input".into()));
        }
        let per_sample: Vec<(f64, Vec<f64>, bool)> = inputs
            .par_iter()
            .zip(targets.par_iter())
            .map(|(x, t)| {
                let (loss, g, trace) = self.loss_and_gradient(x, t);
                let hit = argmax(trace.output()) == argmax(t);
                (loss, g, hit)
            })
            .collect();
        let mut grad = vec![0.0; self.param_count()];
        let mut loss = 0.0;
        let mut hits = 0;
        for (l, g, hit) in &per_sample {
            loss += l;
            hits += *hit as usize;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        let n = inputs.len() as f64;
        loss /= n;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite training loss ({loss}); lower the learning rate (currently {learning_rate})"
            )));
        }
        let b0 = self.b0.to_bits();
        self.apply_update(&grad, learning_rate / n);
        debug_assert_eq!(b0, self.b0.to_bits());
        Ok((loss, hits))
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn one_hot(label: usize, classes: usize) -> Vec<f64> {
    let mut t = vec![0.0; classes];
    t[label] = 1.0;
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Activation offset of a freshly initialized model.
    pub b0: f64,
    /// Set from the experiment master seed, not from the config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            epochs: 20,
            batch_size: 32,
            b0: 0.0,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidParam("learning_rate must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParam("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Running accuracy on the training batches, before each update.
    pub train_accuracy: f64,
    pub eval_accuracy: Option<f64>,
}

/// Shuffled mini-batch SGD. Deterministic for a fixed `cfg.seed`,
/// independent of the rayon pool size.
pub fn train(
    model: &mut NetworkModel,
    dataset: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let classes = model.output_len();
    let targets: Vec<Vec<f64>> = (0..classes).map(|c| one_hot(c, classes)).collect();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = StreamKey::new(cfg.seed, Purpose::Shuffle, epoch as u64, 0).rng();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut hits = 0;
        for batch in order.chunks(cfg.batch_size) {
            let xs: Vec<&[f64]> = batch.iter().map(|&i| dataset.pixels(i)).collect();
            let ts: Vec<&[f64]> = batch.iter().map(|&i| targets[dataset.label(i)].as_slice()).collect();
            let (loss, h) = model.train_step_detail(&xs, &ts, cfg.learning_rate)?;
            loss_sum += loss * batch.len() as f64;
            hits += h;
        }
        let stats = EpochStats {
            epoch: epoch + 1,
            mean_loss: loss_sum / dataset.len() as f64,
            train_accuracy: hits as f64 / dataset.len() as f64,
            eval_accuracy: eval.map(|d| evaluate(model, d)),
        };
        on_epoch(&stats);
        history.push(stats);
    }
    Ok(history)
}

/// Classification accuracy; argmax ties go to the lowest class index.
pub fn evaluate(model: &NetworkModel, dataset: &Dataset) -> f64 {
    if dataset.is_empty() {
        return 0.0;
    }
    let hits: usize = (0..dataset.len())
        .into_par_iter()
        .map(|i| (model.predict(dataset.pixels(i)) == dataset.label(i)) as usize)
        .sum();
    hits as f64 / dataset.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(layer index, layer name, max relative error, weights checked)`.
    pub per_layer: Vec<(usize, &'static str, f64, usize)>,
}

/// Denominator floor of the relative error. At `h = 1e-6` the central
/// difference itself is only resolved to about `eps * E / h ~ 1e-10`, so
/// gradients below the floor are held to an absolute `1e-9` instead.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// Central finite differences on up to 100 randomly chosen weights per
/// parameterized layer (all of them if the layer is smaller).
pub fn gradient_check(
    model: &NetworkModel,
    input: &[f64],
    target: &[f64],
    h: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(h > 0.0) {
        return Err(Error::Domain("finite-difference step must be > 0".into()));
    }
    let (_, analytic, _) = model.loss_and_gradient(input, target);
    let offsets = model.param_offsets();
    let loss_at = |m: &NetworkModel| {
        let out = m.forward_slice(input);
        0.5 * out.output().iter().zip(target).map(|(o, t)| (o - t) * (o - t)).sum::<f64>()
    };
    let mut probe = model.clone();
    let mut per_layer = Vec::new();
    let mut slot = 0;
    for (li, layer) in model.layers.iter().enumerate() {
        if !layer.is_parameterized() {
            continue;
        }
        let n = model.weights[slot].len();
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = StreamKey::new(seed, Purpose::GradCheck, slot as u64, 0).rng();
        idx.shuffle(&mut rng);
        idx.truncate(100);
        idx.sort_unstable();
        let mut worst: f64 = 0.0;
        for &k in &idx {
            let orig = model.weights[slot].data()[k];
            probe.weights[slot].data_mut()[k] = orig + h;
            let up = loss_at(&probe);
            probe.weights[slot].data_mut()[k] = orig - h;
            let down = loss_at(&probe);
            probe.weights[slot].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[offsets[slot] + k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            worst = worst.max(rel);
        }
        per_layer.push((li, layer.name(), worst, idx.len()));
        slot += 1;
    }
    let max_rel_error = per_layer.iter().map(|p| p.2).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        per_layer,
    })
}
