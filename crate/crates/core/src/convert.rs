//! Trained network to crossbar program: weight quantization, dual-rail
//! conductance mapping, pulse-voltage calibration, and input rate coding.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::device::{switch_probability, voltage_for_probability, DeviceParams};
use crate::error::{Error, Result};
use crate::nn::{activation, LayerSpec, NetworkModel, Tensor};
use crate::xbar::{conv_to_matrix, tile_layer_rect, GatherPlan, Matrix, TiledLayer, MAX_TILE_DIM};

/// Row drive of one input spike, volts.
pub const V_SPIKE: f64 = 1.0;
/// Clamp probabilities for the neuron drive.
pub const P_LOW: f64 = 0.001;
pub const P_HIGH: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvertConfig {
    pub bits: u32,
    /// Skip quantization: conductances carry the exact weight magnitudes.
    pub ideal: bool,
    /// Measuring resistor at every crossbar column, ohms.
    pub r_meas: f64,
    pub max_tile: usize,
}

impl Default for ConvertConfig {
    fn default() -> Self {
        Self {
            bits: 4,
            ideal: false,
            r_meas: 100.0,
            max_tile: MAX_TILE_DIM,
        }
    }
}

impl ConvertConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=9).contains(&self.bits) {
            return Err(Error::InvalidParam(format!("bits must be in [1, 9], got {}", self.bits)));
        }
        if !(self.r_meas >= 0.0 && self.r_meas.is_finite()) {
            return Err(Error::InvalidParam("r_meas must be >= 0".into()));
        }
        if self.max_tile < 2 || self.max_tile > MAX_TILE_DIM {
            return Err(Error::InvalidParam(format!("max_tile must be in [2, {MAX_TILE_DIM}]")));
        }
        Ok(())
    }
}

/// Symmetric uniform quantizer with `2^bits` magnitude levels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantScheme {
    pub bits: u32,
    pub scale: f64,
}

impl QuantScheme {
    /// Index of the top level, `2^bits - 1`.
    pub fn top(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    pub fn lsb(&self) -> f64 {
        self.scale / self.top() as f64
    }

    pub fn dequantize(&self, level: u32, negative: bool) -> f64 {
        let m = level as f64 / self.top() as f64 * self.scale;
        if negative {
            -m
        } else {
            m
        }
    }

    /// Conductance of each level, uniform between `g_off` and `1 / r_on`.
    pub fn levels(&self, device: &DeviceParams) -> Vec<f64> {
        (0..=self.top()).map(|l| level_conductance(l as f64 / self.top() as f64, device)).collect()
    }
}

#[inline]
fn level_conductance(frac: f64, device: &DeviceParams) -> f64 {
    let (g_off, g_max) = (device.g_off(), device.g_on());
    g_off + frac * (g_max - g_off)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub scheme: QuantScheme,
    pub levels: Vec<u32>,
    pub negative: Vec<bool>,
    /// Weights beyond `+-scale` that were clipped to the top level.
    pub saturated: usize,
}

/// Per-tensor scale `max |w|`; an all-zero tensor falls back to scale 1.
pub fn weight_scale(w: &[f64]) -> f64 {
    let m = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m > 0.0 {
        m
    } else {
        warn!("all-zero weight tensor; using quantization scale 1");
        1.0
    }
}

pub fn quantize_weights(w: &Tensor, bits: u32) -> Result<Quantized> {
    quantize_with_scale(w.data(), bits, weight_scale(w.data()))
}

/// Round-to-nearest quantization against an explicit scale.
pub fn quantize_with_scale(w: &[f64], bits: u32, scale: f64) -> Result<Quantized> {
    if !(1..=9).contains(&bits) {
        return Err(Error::InvalidParam(format!("bits must be in [1, 9], got {bits}")));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidParam("quantization scale must be > 0".into()));
    }
    let scheme = QuantScheme { bits, scale };
    let top = scheme.top() as f64;
    let mut saturated = 0;
    let mut levels = Vec::with_capacity(w.len());
    let mut negative = Vec::with_capacity(w.len());
    for &x in w {
        let mut m = x.abs() / scale;
        if m > 1.0 {
            saturated += 1;
            m = 1.0;
        }
        levels.push((m * top).round() as u32);
        negative.push(x < 0.0);
    }
    Ok(Quantized {
        scheme,
        levels,
        negative,
        saturated,
    })
}

/// Dual-rail conductances: the weight's sign picks the rail holding the level,
/// the other rail stays at `g_off`.
pub fn map_to_conductance(q: &Quantized, device: &DeviceParams) -> (Vec<f64>, Vec<f64>) {
    let table = q.scheme.levels(device);
    let g_off = device.g_off();
    q.levels
        .iter()
        .zip(&q.negative)
        .map(|(&l, &neg)| {
            let g = table[l as usize];
            if neg {
                (g_off, g)
            } else {
                (g, g_off)
            }
        })
        .unzip()
}

/// Unquantized mapping used by the ideal mode.
pub fn map_exact(w: &[f64], scale: f64, device: &DeviceParams) -> (Vec<f64>, Vec<f64>) {
    let g_off = device.g_off();
    w.iter()
        .map(|&x| {
            let g = level_conductance((x.abs() / scale).min(1.0), device);
            if x < 0.0 {
                (g_off, g)
            } else {
                (g, g_off)
            }
        })
        .unzip()
}

/// Affine net-input to pulse-voltage map and its clamps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoltageMap {
    /// Volts per unit of net input.
    pub gain: f64,
    pub v_bias: f64,
    pub v_low: f64,
    pub v_high: f64,
}

impl VoltageMap {
    #[inline]
    pub fn voltage(&self, z: f64) -> f64 {
        self.gain * z + self.v_bias
    }

    #[inline]
    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.v_low, self.v_high)
    }
}

/// `V(z) = v0 z + v0 (b0 + ln(tau0 / t_write))`, for which the switching
/// probability of a `t_write` pulse equals `activation(z, b0)`.
pub fn calibrate_voltage_map(device: &DeviceParams, b0: f64) -> Result<VoltageMap> {
    device.validate()?;
    let t = device.t_write;
    let map = VoltageMap {
        gain: device.v0,
        v_bias: device.v0 * (b0 + (device.tau0 / t).ln()),
        v_low: voltage_for_probability(P_LOW, t, device)?,
        v_high: voltage_for_probability(P_HIGH, t, device)?,
    };
    if !(map.v_low < map.v_bias && map.v_bias < map.v_high) {
        return Err(Error::InvalidParam(format!(
            "b0 = {b0} puts the no-spike probability {:.4} outside the clamp window",
            activation(0.0, b0)
        )));
    }
    Ok(map)
}

/// Switching probability of a calibrated neuron at net input `z`.
pub fn calibrated_probability(map: &VoltageMap, z: f64, device: &DeviceParams) -> f64 {
    switch_probability(map.voltage(z), device.t_write, device)
}

/// One Bernoulli frame: pixel `i` spikes with probability `image[i]`.
pub fn encode_frame<R: Rng + ?Sized>(image: &[f64], rng: &mut R, out: &mut [f64]) {
    for (o, &p) in out.iter_mut().zip(image) {
        // Drawing for every pixel keeps the stream layout independent of the image.
        let u: f64 = rng.random();
        *o = if u < p { 1.0 } else { 0.0 };
    }
}

/// `steps` independent Bernoulli frames of `image`.
pub fn rate_encode<R: Rng + ?Sized>(image: &[f64], steps: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    if image.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Domain("pixel intensities must lie in [0, 1]".into()));
    }
    Ok((0..steps)
        .map(|_| {
            let mut f = vec![0.0; image.len()];
            encode_frame(image, rng, &mut f);
            f
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Wiring {
    Dense,
    /// One crossbar per output position, all holding the same kernel matrix.
    Conv { plan: GatherPlan },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronLayer {
    pub spec: LayerSpec,
    pub input_shape: [usize; 3],
    pub output_shape: [usize; 3],
    pub wiring: Wiring,
    /// Logical conductance matrix: `fan_in` rows (patch length for conv),
    /// one column per output neuron (per output channel for conv).
    pub crossbar: TiledLayer,
    /// Weight magnitude represented by the top conductance level.
    pub scale: f64,
    pub map: VoltageMap,
    /// Per-position crossbars for conv layers whose copies differ (after
    /// device variation); empty when every position shares `crossbar`.
    pub replicas_xbar: Vec<TiledLayer>,
    /// Per-neuron shift of `map.v_bias`; empty means none.
    pub bias_offsets: Vec<f64>,
    /// Per-neuron `[tau0, v0]` overriding the program device; empty means none.
    pub neuron_devices: Vec<[f64; 2]>,
}

impl NeuronLayer {
    /// Column current of one unit of net input: `V_SPIKE (g_max - g_off) / scale`.
    pub fn unit_current(&self, device: &DeviceParams) -> f64 {
        V_SPIKE * (device.g_on() - device.g_off()) / self.scale
    }

    pub fn neurons(&self) -> usize {
        self.output_shape.iter().product()
    }

    /// Crossbar copies: one per output position for conv, one for dense.
    pub fn replicas(&self) -> usize {
        match &self.wiring {
            Wiring::Dense => 1,
            Wiring::Conv { plan } => plan.positions,
        }
    }

    /// Equivalent real weights `(G_pos - G_neg) / (g_max - g_off) * scale`,
    /// in the model's layout, ignoring `r_meas`.
    pub fn effective_weights(&self, device: &DeviceParams) -> Vec<f64> {
        let (pos, neg) = self.crossbar.conductances();
        let span = device.g_on() - device.g_off();
        let (rows, cols) = (pos.rows(), pos.cols());
        let mut w = vec![0.0; rows * cols];
        for o in 0..cols {
            for r in 0..rows {
                let n = neg.as_ref().map_or(0.0, |m| m.get(r, o));
                w[o * rows + r] = (pos.get(r, o) - n) / span * self.scale;
            }
        }
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SnnLayer {
    Neurons(NeuronLayer),
    /// Equal-weight averaging; outputs are fractional drive levels.
    Subsample {
        factor: usize,
        input_shape: [usize; 3],
        output_shape: [usize; 3],
    },
}

impl SnnLayer {
    pub fn output_len(&self) -> usize {
        match self {
            SnnLayer::Neurons(n) => n.neurons(),
            SnnLayer::Subsample { output_shape, .. } => output_shape.iter().product(),
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        match self {
            SnnLayer::Neurons(n) => n.input_shape,
            SnnLayer::Subsample { input_shape, .. } => *input_shape,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnnProgram {
    pub device: DeviceParams,
    pub b0: f64,
    pub input_shape: [usize; 3],
    /// `None` in ideal (unquantized) mode.
    pub bits: Option<u32>,
    pub r_meas: f64,
    pub layers: Vec<SnnLayer>,
}

impl SnnProgram {
    pub fn output_len(&self) -> usize {
        self.layers.last().map_or(0, SnnLayer::output_len)
    }

    pub fn neuron_layers(&self) -> impl Iterator<Item = &NeuronLayer> {
        self.layers.iter().filter_map(|l| match l {
            SnnLayer::Neurons(n) => Some(n),
            SnnLayer::Subsample { .. } => None,
        })
    }

    pub fn neuron_count(&self) -> usize {
        self.neuron_layers().map(NeuronLayer::neurons).sum()
    }

    /// Same conductances with every voltage map recalibrated for `device`.
    pub fn recalibrated(&self, device: &DeviceParams) -> Result<SnnProgram> {
        let map = calibrate_voltage_map(device, self.b0)?;
        let mut p = self.clone();
        p.device = *device;
        for l in &mut p.layers {
            if let SnnLayer::Neurons(n) = l {
                n.map = map;
            }
        }
        Ok(p)
    }

    /// All crossbars with the measuring resistor replaced.
    pub fn with_r_meas(&self, r_meas: f64) -> Result<SnnProgram> {
        if !(r_meas >= 0.0 && r_meas.is_finite()) {
            return Err(Error::InvalidParam("r_meas must be >= 0".into()));
        }
        let mut p = self.clone();
        p.r_meas = r_meas;
        for l in &mut p.layers {
            if let SnnLayer::Neurons(n) = l {
                for tile in n.crossbar.tiles.iter_mut().flatten() {
                    tile.r_meas = r_meas;
                }
            }
        }
        Ok(p)
    }
}

/// Quantizes, maps, tiles and calibrates every layer of `model`.
pub fn convert(model: &NetworkModel, device: &DeviceParams, cfg: &ConvertConfig) -> Result<SnnProgram> {
    cfg.validate()?;
    let map = calibrate_voltage_map(device, model.b0())?;
    let mut layers = Vec::with_capacity(model.layers().len());
    for (i, spec) in model.layers().iter().enumerate() {
        let input_shape = model.input_shape_of(i);
        let output_shape = model.shapes()[i];
        let layer = match *spec {
            LayerSpec::Subsample { factor } => SnnLayer::Subsample {
                factor,
                input_shape,
                output_shape,
            },
            LayerSpec::Conv { .. } | LayerSpec::Dense { .. } => {
                let w = model.layer_weights(i).expect("parameterized layer has weights");
                let (matrix, wiring) = match spec {
                    LayerSpec::Conv { .. } => {
                        let (m, plan) = conv_to_matrix(spec, input_shape, w.data())?;
                        (m, Wiring::Conv { plan })
                    }
                    _ => {
                        let [fan_out, fan_in] = [w.shape()[0], w.shape()[1]];
                        let mut m = Matrix::filled(fan_in, fan_out, 0.0);
                        for o in 0..fan_out {
                            for r in 0..fan_in {
                                m.set(r, o, w.data()[o * fan_in + r]);
                            }
                        }
                        (m, Wiring::Dense)
                    }
                };
                let scale = weight_scale(w.data());
                let (gp, gn) = if cfg.ideal {
                    map_exact(matrix.data(), scale, device)
                } else {
                    let q = quantize_with_scale(matrix.data(), cfg.bits, scale)?;
                    if q.saturated > 0 {
                        warn!("layer {i}: {} weights saturated at +-{scale}", q.saturated);
                    }
                    map_to_conductance(&q, device)
                };
                let (rows, cols) = (matrix.rows(), matrix.cols());
                // Each signed input occupies a row pair, so an array of
                // `max_tile` physical rows holds half as many inputs.
                let crossbar = tile_layer_rect(
                    &Matrix::new(rows, cols, gp)?,
                    Some(&Matrix::new(rows, cols, gn)?),
                    cfg.r_meas,
                    cfg.max_tile / 2,
                    cfg.max_tile,
                )?;
                SnnLayer::Neurons(NeuronLayer {
                    spec: *spec,
                    input_shape,
                    output_shape,
                    wiring,
                    crossbar,
                    scale,
                    map,
                    replicas_xbar: Vec::new(),
                    bias_offsets: Vec::new(),
                    neuron_devices: Vec::new(),
                })
            }
        };
        layers.push(layer);
    }
    Ok(SnnProgram {
        device: *device,
        b0: model.b0(),
        input_shape: model.input_shape(),
        bits: (!cfg.ideal).then_some(cfg.bits),
        r_meas: cfg.r_meas,
        layers,
    })
}
