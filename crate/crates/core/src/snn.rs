//! Time-stepped stochastic spiking inference.
//!
//! Each step drives every crossbar with the previous layer's activity frame,
//! maps column currents to neuron pulse voltages, fires each neuron with its
//! switching probability, reads the state back and resets. Frames move
//! through the whole network within a step; a hardware pipeline produces the
//! same per-frame statistics once its fill transient is discarded.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convert::{encode_frame, NeuronLayer, SnnLayer, SnnProgram, Wiring};
use crate::data::Dataset;
use crate::device::{DeviceParams, ReadCircuit};
use crate::error::{Error, Result};
use crate::nn::activation;
use crate::rng::{Purpose, StreamKey};
use crate::xbar::{GatherPlan, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub steps: usize,
    /// Set from the experiment master seed, not from the config file.
    #[serde(skip)]
    pub seed: u64,
    pub clamp_enabled: bool,
    /// Relative spread of the ON/OFF resistance seen by the read circuit.
    pub read_sigma_r: f64,
    pub read_voltage: f64,
    /// Evaluate only the first `n` images.
    pub image_subset: Option<usize>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            seed: 1,
            clamp_enabled: true,
            read_sigma_r: 0.2,
            read_voltage: 1.0,
            image_subset: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidParam("steps must be >= 1".into()));
        }
        if !(self.read_sigma_r >= 0.0 && self.read_voltage > 0.0) {
            return Err(Error::InvalidParam("read_sigma_r must be >= 0 and read_voltage > 0".into()));
        }
        Ok(())
    }
}

/// Perturbations redrawn for every neuron at every step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RuntimeNoise {
    /// Relative spread of the write pulse width; the voltage map is not recalibrated.
    pub pulse_width_sigma: f64,
    /// Additive Gaussian offset on the switching probability, clipped to [0, 1].
    pub prob_sigma: f64,
}

impl RuntimeNoise {
    fn is_active(&self) -> bool {
        self.pulse_width_sigma > 0.0 || self.prob_sigma > 0.0
    }
}

/// Activity frames per layer and step: `frames[layer][step]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeRaster {
    pub frames: Vec<Vec<Vec<f64>>>,
}

impl SpikeRaster {
    /// Long-format CSV: `step,layer,neuron,value`. Layer 0 is the encoded input.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "step,layer,neuron,value")?;
        let steps = self.frames.first().map_or(0, Vec::len);
        for t in 0..steps {
            for (l, layer) in self.frames.iter().enumerate() {
                for (n, v) in layer[t].iter().enumerate() {
                    writeln!(w, "{t},{l},{n},{v}")?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResult {
    pub counts: Vec<u32>,
    pub winner: usize,
    pub raster: Option<SpikeRaster>,
}

/// Highest count wins; ties go to the lowest class index.
pub fn winner(counts: &[u32]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

enum Drive {
    /// `e[row * cols + col]`: net input contributed by one unit of row drive.
    Dense { e: Vec<f64>, rows: usize, cols: usize },
    Conv {
        /// One folded kernel matrix shared by all positions, or one per position.
        e: Vec<Vec<f64>>,
        channels: usize,
        positions: usize,
        /// Inverse of the gather plan: input `i` feeds `(position, patch row)`
        /// pairs `uses[offsets[i]..offsets[i + 1]]`, in ascending position.
        offsets: Vec<usize>,
        uses: Vec<(u32, u32)>,
    },
    Subsample { factor: usize, shape: [usize; 3] },
}

struct Stage {
    drive: Drive,
    out_len: usize,
    neurons: Option<Neurons>,
}

/// Per-neuron firing parameters. The switching probability of neuron `n` is
/// `1 - exp(-exp(log_rate[n] + V / v0[n]))` with `V` the (clamped) drive.
struct Neurons {
    gain: f64,
    v_bias: Vec<f64>,
    v_low: f64,
    v_high: f64,
    inv_v0: Vec<f64>,
    /// `ln(t_write / tau0)`.
    log_rate: Vec<f64>,
}

/// A program prepared for repeated simulation: crossbars folded into
/// net-input matrices, per-neuron parameters expanded.
pub struct Engine {
    stages: Vec<Stage>,
    input_len: usize,
    classes: usize,
    clamp: bool,
    /// Misread probability for a neuron that did not fire / did fire.
    misread: [f64; 2],
    noise: RuntimeNoise,
    steps: usize,
    seed: u64,
}

fn fold(m: &Matrix, unit: f64) -> Vec<f64> {
    m.data().iter().map(|x| x / unit).collect()
}

fn neurons_for(layer: &NeuronLayer, device: &DeviceParams) -> Neurons {
    let n = layer.neurons();
    let v_bias = (0..n)
        .map(|k| layer.map.v_bias + layer.bias_offsets.get(k).copied().unwrap_or(0.0))
        .collect();
    let dev = |k: usize| layer.neuron_devices.get(k).map_or((device.tau0, device.v0), |d| (d[0], d[1]));
    Neurons {
        gain: layer.map.gain,
        v_bias,
        v_low: layer.map.v_low,
        v_high: layer.map.v_high,
        inv_v0: (0..n).map(|k| 1.0 / dev(k).1).collect(),
        log_rate: (0..n).map(|k| (device.t_write / dev(k).0).ln()).collect(),
    }
}

impl Engine {
    pub fn new(program: &SnnProgram, cfg: &SimConfig, noise: RuntimeNoise) -> Result<Self> {
        cfg.validate()?;
        let device = &program.device;
        let mut stages = Vec::with_capacity(program.layers.len());
        for layer in &program.layers {
            let stage = match layer {
                SnnLayer::Subsample {
                    factor,
                    input_shape,
                    output_shape,
                } => Stage {
                    drive: Drive::Subsample {
                        factor: *factor,
                        shape: *input_shape,
                    },
                    out_len: output_shape.iter().product(),
                    neurons: None,
                },
                SnnLayer::Neurons(n) => {
                    let unit = n.unit_current(device);
                    let drive = match &n.wiring {
                        Wiring::Dense => Drive::Dense {
                            e: fold(&n.crossbar.effective(), unit),
                            rows: n.crossbar.rows,
                            cols: n.crossbar.cols,
                        },
                        Wiring::Conv { plan } => {
                            let e = if n.replicas_xbar.is_empty() {
                                vec![fold(&n.crossbar.effective(), unit)]
                            } else {
                                n.replicas_xbar.iter().map(|t| fold(&t.effective(), unit)).collect()
                            };
                            let (offsets, uses) = invert_plan(plan, n.input_shape.iter().product());
                            Drive::Conv {
                                e,
                                channels: n.crossbar.cols,
                                positions: plan.positions,
                                offsets,
                                uses,
                            }
                        }
                    };
                    Stage {
                        drive,
                        out_len: n.neurons(),
                        neurons: Some(neurons_for(n, device)),
                    }
                }
            };
            stages.push(stage);
        }
        let rc = ReadCircuit::for_device(device, cfg.read_voltage, cfg.read_sigma_r);
        rc.validate(device)?;
        let clean = |p: f64| if p < 1e-300 { 0.0 } else { p };
        Ok(Self {
            stages,
            input_len: program.input_shape.iter().product(),
            classes: program.output_len(),
            clamp: cfg.clamp_enabled,
            misread: [
                clean(rc.misread_probability(false, device)),
                clean(rc.misread_probability(true, device)),
            ],
            noise,
            steps: cfg.steps,
            seed: cfg.seed,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Runs `steps` frames of one image. `checkpoints` (ascending) receive
    /// the cumulative output counts after that many steps. `trial` only keys
    /// the runtime-noise stream; the inference draws depend on the image alone
    /// so that every trial sees the same input spikes and firing uniforms.
    fn run(
        &self,
        image: &[f64],
        item: u64,
        trial: u64,
        steps: usize,
        checkpoints: &[usize],
        mut raster: Option<&mut SpikeRaster>,
    ) -> Vec<Vec<u32>> {
        let key = StreamKey::new(self.seed, Purpose::Inference, 0, item).stepper();
        let noise_key = StreamKey::new(self.seed, Purpose::RuntimePerturbation, trial, item).stepper();
        let mut counts = vec![0u32; self.classes];
        let mut out = Vec::with_capacity(checkpoints.len());
        let mut next_cp = 0;
        let mut bufs: Vec<Vec<f64>> = std::iter::once(self.input_len)
            .chain(self.stages.iter().map(|s| s.out_len))
            .map(|n| vec![0.0; n])
            .collect();
        let mut z = Vec::new();
        for t in 0..steps {
            let mut rng = key.at(t as u64);
            let mut noise_rng = self.noise.is_active().then(|| noise_key.at(t as u64));
            encode_frame(image, &mut rng, &mut bufs[0]);
            for (s, stage) in self.stages.iter().enumerate() {
                let (prev, rest) = bufs.split_at_mut(s + 1);
                let x = &prev[s];
                let y = &mut rest[0];
                match &stage.drive {
                    Drive::Subsample { factor, shape } => {
                        crate::nn::pool_forward(x, *shape, *factor, y);
                    }
                    drive => {
                        z.clear();
                        z.resize(stage.out_len, 0.0);
                        net_input(drive, x, &mut z);
                        let nrn = stage.neurons.as_ref().expect("neuron stage");
                        self.fire(nrn, &z, y, &mut rng, noise_rng.as_mut());
                    }
                }
            }
            let last = bufs.last().unwrap();
            for (c, v) in counts.iter_mut().zip(last) {
                *c += *v as u32;
            }
            if let Some(r) = raster.as_deref_mut() {
                for (l, b) in bufs.iter().enumerate() {
                    r.frames[l].push(b.clone());
                }
            }
            while next_cp < checkpoints.len() && checkpoints[next_cp] == t + 1 {
                out.push(counts.clone());
                next_cp += 1;
            }
        }
        out
    }

    fn fire<R: Rng>(&self, nrn: &Neurons, z: &[f64], y: &mut [f64], rng: &mut R, mut noise: Option<&mut R>) {
        let check_read = self.misread[0] > 0.0 || self.misread[1] > 0.0;
        for (k, (yk, &zk)) in y.iter_mut().zip(z).enumerate() {
            let mut v = nrn.gain * zk + nrn.v_bias[k];
            if self.clamp {
                v = v.clamp(nrn.v_low, nrn.v_high);
            }
            let mut h = nrn.log_rate[k] + v * nrn.inv_v0[k];
            if let Some(nr) = noise.as_deref_mut() {
                if self.noise.pulse_width_sigma > 0.0 {
                    h += crate::device::positive_gaussian_factor(self.noise.pulse_width_sigma, nr).ln();
                }
            }
            let mut p = -(-h.exp()).exp_m1();
            if let Some(nr) = noise.as_deref_mut() {
                if self.noise.prob_sigma > 0.0 {
                    let d: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, nr);
                    p = (p + self.noise.prob_sigma * d).clamp(0.0, 1.0);
                }
            }
            let fired = rng.random::<f64>() < p;
            let seen = if check_read {
                let wrong = rng.random::<f64>() < self.misread[fired as usize];
                fired != wrong
            } else {
                fired
            };
            *yk = if seen { 1.0 } else { 0.0 };
        }
    }

    pub fn infer(&self, image: &[f64], item: u64, with_raster: bool) -> Result<InferenceResult> {
        self.infer_trial(image, item, 0, with_raster)
    }

    fn infer_trial(&self, image: &[f64], item: u64, trial: u64, with_raster: bool) -> Result<InferenceResult> {
        if image.len() != self.input_len {
            return Err(Error::Dimension {
                expected: self.input_len,
                got: image.len(),
            });
        }
        if image.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Domain("pixel intensities must lie in [0, 1]".into()));
        }
        let mut raster = with_raster.then(|| SpikeRaster {
            frames: vec![Vec::with_capacity(self.steps); self.stages.len() + 1],
        });
        let counts = self
            .run(image, item, trial, self.steps, &[self.steps], raster.as_mut())
            .pop()
            .expect("final checkpoint");
        Ok(InferenceResult {
            winner: winner(&counts),
            counts,
            raster,
        })
    }

    /// Accuracy on `dataset` (first `image_subset` images when set).
    pub fn accuracy(&self, dataset: &Dataset, image_subset: Option<usize>, trial: u64) -> Result<f64> {
        let curve = self.accuracy_curve(dataset, image_subset, trial, &[self.steps])?;
        Ok(curve[0])
    }

    /// Accuracy after each step count in `steps_list`, all from one run of
    /// `max(steps_list)` frames per image.
    pub fn accuracy_curve(
        &self,
        dataset: &Dataset,
        image_subset: Option<usize>,
        trial: u64,
        steps_list: &[usize],
    ) -> Result<Vec<f64>> {
        let n = image_subset.map_or(dataset.len(), |k| k.min(dataset.len()));
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if dataset.pixel_count() != self.input_len {
            return Err(Error::Dimension {
                expected: self.input_len,
                got: dataset.pixel_count(),
            });
        }
        if steps_list.is_empty() || steps_list.contains(&0) {
            return Err(Error::InvalidParam("step counts must be nonempty and >= 1".into()));
        }
        let mut cps: Vec<usize> = steps_list.to_vec();
        cps.sort_unstable();
        cps.dedup();
        let max = *cps.last().unwrap();
        let hits: Vec<usize> = (0..n)
            .into_par_iter()
            .map(|i| {
                let cs = self.run(dataset.pixels(i), i as u64, trial, max, &cps, None);
                cs.iter().map(|c| (winner(c) == dataset.label(i)) as usize).collect::<Vec<_>>()
            })
            .reduce(
                || vec![0; cps.len()],
                |mut a, b| {
                    for (x, y) in a.iter_mut().zip(b) {
                        *x += y;
                    }
                    a
                },
            );
        Ok(steps_list
            .iter()
            .map(|s| hits[cps.binary_search(s).unwrap()] as f64 / n as f64)
            .collect())
    }
}

/// Net input of every neuron of a crossbar stage for activity frame `x`.
fn net_input(drive: &Drive, x: &[f64], z: &mut [f64]) {
    match drive {
        Drive::Dense { e, rows, cols } => {
            for i in 0..*rows {
                let xi = x[i];
                if xi == 0.0 {
                    continue;
                }
                for (zj, ej) in z.iter_mut().zip(&e[i * cols..(i + 1) * cols]) {
                    *zj += xi * ej;
                }
            }
        }
        Drive::Conv {
            e,
            channels,
            positions,
            offsets,
            uses,
        } => {
            // Accumulate position-major, visiting only active inputs. Each
            // position still sums its patch rows in ascending order.
            let ch = *channels;
            let mut acc = vec![0.0; positions * ch];
            for (i, &xi) in x.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                for &(p, r) in &uses[offsets[i]..offsets[i + 1]] {
                    let (p, r) = (p as usize, r as usize);
                    let m = if e.len() == 1 { &e[0] } else { &e[p] };
                    for (a, ej) in acc[p * ch..(p + 1) * ch].iter_mut().zip(&m[r * ch..(r + 1) * ch]) {
                        *a += xi * ej;
                    }
                }
            }
            for p in 0..*positions {
                for o in 0..ch {
                    z[o * positions + p] = acc[p * ch + o];
                }
            }
        }
        Drive::Subsample { .. } => unreachable!("subsample stages have no crossbar"),
    }
}

fn invert_plan(plan: &GatherPlan, input_len: usize) -> (Vec<usize>, Vec<(u32, u32)>) {
    let mut count = vec![0usize; input_len + 1];
    for &src in &plan.indices {
        count[src as usize + 1] += 1;
    }
    for i in 0..input_len {
        count[i + 1] += count[i];
    }
    let mut fill = count.clone();
    let mut uses = vec![(0, 0); plan.indices.len()];
    for p in 0..plan.positions {
        for (r, &src) in plan.patch(p).iter().enumerate() {
            uses[fill[src as usize]] = (p as u32, r as u32);
            fill[src as usize] += 1;
        }
    }
    (count, uses)
}

/// Single-image inference. `item` selects the image's random substream.
pub fn infer(program: &SnnProgram, image: &[f64], item: u64, cfg: &SimConfig) -> Result<InferenceResult> {
    Engine::new(program, cfg, RuntimeNoise::default())?.infer(image, item, false)
}

/// Accuracy for every `(steps, t_write)` pair; the program's voltage maps are
/// recalibrated for each pulse width. Returns `curves[t_write index][steps index]`.
pub fn accuracy_vs_steps(
    program: &SnnProgram,
    dataset: &Dataset,
    steps_list: &[usize],
    t_write_list: &[f64],
    cfg: &SimConfig,
) -> Result<Vec<Vec<f64>>> {
    if t_write_list.is_empty() {
        return Err(Error::InvalidParam("t_write list must be nonempty".into()));
    }
    t_write_list
        .iter()
        .map(|&tw| {
            let p = program.recalibrated(&program.device.with_t_write(tw))?;
            let max = *steps_list.iter().max().unwrap_or(&1);
            let engine = Engine::new(&p, &SimConfig { steps: max, ..*cfg }, RuntimeNoise::default())?;
            engine.accuracy_curve(dataset, cfg.image_subset, 0, steps_list)
        })
        .collect()
}

/// Expected firing rate of a one-input neuron with input rate `x`:
/// `x f(w) + (1 - x) f(0)`.
pub fn expected_output_rate(x: f64, w: f64, b0: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Domain(format!("input rate {x} outside [0, 1]")));
    }
    Ok(x * activation(w, b0) + (1.0 - x) * activation(0.0, b0))
}

/// `e(x, w) = a(x w) - E[output rate]`, rows over `x_grid`, columns over `w_grid`.
pub fn conversion_error_surface(x_grid: &[f64], w_grid: &[f64], b0: f64) -> Result<Vec<Vec<f64>>> {
    if let Some(w) = w_grid.iter().find(|w| !(w.abs() <= 4.0)) {
        return Err(Error::Domain(format!("weight {w} outside [-4, 4]")));
    }
    x_grid
        .iter()
        .map(|&x| {
            w_grid
                .iter()
                .map(|&w| Ok(activation(x * w, b0) - expected_output_rate(x, w, b0)?))
                .collect()
        })
        .collect()
}

/// Mean of `|e(x, w)|` over `x_grid` with columns weighted by `w_weights`
/// (e.g. a trained weight histogram). One value per `x`.
pub fn weighted_conversion_error(x_grid: &[f64], w_grid: &[f64], w_weights: &[f64], b0: f64) -> Result<Vec<f64>> {
    if w_grid.len() != w_weights.len() {
        return Err(Error::Dimension {
            expected: w_grid.len(),
            got: w_weights.len(),
        });
    }
    let total: f64 = w_weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidParam("weight histogram has no mass".into()));
    }
    let surf = conversion_error_surface(x_grid, w_grid, b0)?;
    Ok(surf
        .iter()
        .map(|row| row.iter().zip(w_weights).map(|(e, c)| e.abs() * c).sum::<f64>() / total)
        .collect())
}

/// Empirical firing rate of one neuron with weight `w` over `steps` steps,
/// input spikes drawn at rate `x`. Unclamped, ideal read.
pub fn single_neuron_rate(x: f64, w: f64, b0: f64, device: &DeviceParams, steps: usize, rng: &mut impl Rng) -> Result<f64> {
    let map = crate::convert::calibrate_voltage_map(device, b0)?;
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Domain(format!("input rate {x} outside [0, 1]")));
    }
    let mut fired = 0u64;
    for _ in 0..steps {
        let spike = rng.random::<f64>() < x;
        let z = if spike { w } else { 0.0 };
        if crate::device::sample_switch(map.voltage(z), device, rng) {
            fired += 1;
        }
    }
    Ok(fired as f64 / steps as f64)
}

/// Mean spike rate of every neuron stage over `steps` for one image.
pub fn neuron_rates(engine: &Engine, image: &[f64], item: u64) -> Result<Vec<Vec<f64>>> {
    let r = engine.infer(image, item, true)?;
    let raster = r.raster.expect("raster requested");
    Ok(raster
        .frames
        .iter()
        .skip(1)
        .map(|frames| {
            let n = frames[0].len();
            let mut sum = vec![0.0; n];
            for f in frames {
                for (s, v) in sum.iter_mut().zip(f) {
                    *s += v;
                }
            }
            sum.iter().map(|s| s / frames.len() as f64).collect()
        })
        .collect())
}

/// Mean squared drive of every stage input, `[stage][element]`, averaged over
/// the first `images` images of `dataset` and all steps. Stage 0 is the pixel
/// spike train. Binary spikes make this the spike rate; subsampled levels
/// contribute their square, which is what sets resistive dissipation.
pub fn mean_drive_power(engine: &Engine, dataset: &Dataset, images: usize) -> Result<Vec<Vec<f64>>> {
    let n = images.min(dataset.len());
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let per_image = (0..n)
        .into_par_iter()
        .map(|i| {
            let raster = engine.infer(dataset.pixels(i), i as u64, true)?.raster.expect("raster requested");
            Ok(raster
                .frames
                .iter()
                .take(raster.frames.len() - 1)
                .map(|frames| {
                    let mut sum = vec![0.0; frames[0].len()];
                    for f in frames {
                        for (s, v) in sum.iter_mut().zip(f) {
                            *s += v * v;
                        }
                    }
                    sum
                })
                .collect::<Vec<Vec<f64>>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = per_image[0].clone();
    for img in &per_image[1..] {
        for (t, x) in total.iter_mut().zip(img) {
            for (a, b) in t.iter_mut().zip(x) {
                *a += b;
            }
        }
    }
    let denom = (n * engine.steps()) as f64;
    for t in &mut total {
        for a in t.iter_mut() {
            *a /= denom;
        }
    }
    Ok(total)
}
