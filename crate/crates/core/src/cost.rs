//! Energy, latency and area estimates for a converted network.

use serde::{Deserialize, Serialize};

use crate::convert::{SnnLayer, SnnProgram, Wiring, V_SPIKE};
use crate::device::{voltage_for_probability, DeviceParams};
use crate::error::{Error, Result};
use crate::xbar::{TiledLayer, MAX_TILE_DIM};

/// Per-event energies in joules. The CMOS figures are published totals for
/// the same network at 50 steps, kept only for the comparison ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyConstants {
    pub e_write_neuron: f64,
    pub e_reset: f64,
    pub e_read: f64,
    pub e_buffer_per_bit: f64,
    pub cmos_total: f64,
    pub cmos_memory: f64,
    pub cmos_buffers: f64,
    pub cmos_neurons: f64,
}

impl Default for EnergyConstants {
    fn default() -> Self {
        Self {
            e_write_neuron: 249e-15,
            e_reset: 500e-15,
            e_read: 1.4e-15,
            e_buffer_per_bit: 0.0,
            cmos_total: 736e-9,
            cmos_memory: 130e-9,
            cmos_buffers: 64e-9,
            cmos_neurons: 542e-9,
        }
    }
}

impl EnergyConstants {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.e_write_neuron,
            self.e_reset,
            self.e_read,
            self.e_buffer_per_bit,
            self.cmos_total,
            self.cmos_memory,
            self.cmos_buffers,
            self.cmos_neurons,
        ];
        if all.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
            return Err(Error::InvalidParam("energy constants must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Phase durations of one step, in nanoseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingConstants {
    pub t_write: f64,
    pub t_xbar: f64,
    pub t_read_buffer: f64,
    pub t_reset: f64,
}

impl Default for TimingConstants {
    fn default() -> Self {
        Self {
            t_write: 10.0,
            t_xbar: 10.0,
            t_read_buffer: 2.0,
            t_reset: 20.0,
        }
    }
}

impl TimingConstants {
    pub fn validate(&self) -> Result<()> {
        let all = [self.t_write, self.t_xbar, self.t_read_buffer, self.t_reset];
        if all.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(Error::InvalidParam("timing constants must be finite and > 0".into()));
        }
        Ok(())
    }
}

/// Areas in square micrometres. Per-unit neuron and buffer areas default to
/// the published component totals divided over the reference network's
/// 4234 neurons. The `*_total` overrides replace the computed component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AreaConstants {
    pub feature_size_nm: f64,
    pub cell_area_f2: f64,
    pub array_dim: usize,
    pub neuron_area: f64,
    pub buffer_area: f64,
    pub crossbar_total: Option<f64>,
    pub neuron_total: Option<f64>,
    pub buffer_total: Option<f64>,
}

impl Default for AreaConstants {
    fn default() -> Self {
        Self {
            feature_size_nm: 45.0,
            cell_area_f2: 100.0,
            array_dim: MAX_TILE_DIM,
            neuron_area: 154e3 / 4234.0,
            buffer_area: 56e3 / 4234.0,
            crossbar_total: None,
            neuron_total: None,
            buffer_total: None,
        }
    }
}

impl AreaConstants {
    /// Component totals of the published memristor design.
    pub fn published() -> Self {
        Self {
            crossbar_total: Some(2895e3),
            neuron_total: Some(154e3),
            buffer_total: Some(56e3),
            ..Self::default()
        }
    }

    pub fn cell_area(&self) -> f64 {
        let f_um = self.feature_size_nm * 1e-3;
        self.cell_area_f2 * f_um * f_um
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.feature_size_nm, self.cell_area_f2, self.neuron_area, self.buffer_area];
        let overrides = [self.crossbar_total, self.neuron_total, self.buffer_total];
        if all.iter().any(|a| !(*a > 0.0 && a.is_finite()))
            || self.array_dim == 0
            || overrides.iter().flatten().any(|a| !(*a >= 0.0 && a.is_finite()))
        {
            return Err(Error::InvalidParam("area constants must be positive".into()));
        }
        Ok(())
    }
}

/// Flat `[cost]` config section; splits into the three constant groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostConfig {
    pub e_write_neuron: f64,
    pub e_reset: f64,
    pub e_read: f64,
    pub e_buffer_per_bit: f64,
    pub cmos_total: f64,
    pub cmos_memory: f64,
    pub cmos_buffers: f64,
    pub cmos_neurons: f64,
    pub t_write_ns: f64,
    pub t_xbar_ns: f64,
    pub t_read_buffer_ns: f64,
    pub t_reset_ns: f64,
    pub feature_size_nm: f64,
    pub cell_area_f2: f64,
    pub array_dim: usize,
    pub neuron_area_um2: f64,
    pub buffer_area_um2: f64,
    pub crossbar_total_um2: Option<f64>,
    pub neuron_total_um2: Option<f64>,
    pub buffer_total_um2: Option<f64>,
    /// Steps per classification for the energy estimate.
    pub steps: usize,
    /// Test images whose activity is averaged.
    pub activity_images: usize,
}

impl Default for CostConfig {
    fn default() -> Self {
        let (e, t, a) = (EnergyConstants::default(), TimingConstants::default(), AreaConstants::default());
        Self {
            e_write_neuron: e.e_write_neuron,
            e_reset: e.e_reset,
            e_read: e.e_read,
            e_buffer_per_bit: e.e_buffer_per_bit,
            cmos_total: e.cmos_total,
            cmos_memory: e.cmos_memory,
            cmos_buffers: e.cmos_buffers,
            cmos_neurons: e.cmos_neurons,
            t_write_ns: t.t_write,
            t_xbar_ns: t.t_xbar,
            t_read_buffer_ns: t.t_read_buffer,
            t_reset_ns: t.t_reset,
            feature_size_nm: a.feature_size_nm,
            cell_area_f2: a.cell_area_f2,
            array_dim: a.array_dim,
            neuron_area_um2: a.neuron_area,
            buffer_area_um2: a.buffer_area,
            crossbar_total_um2: a.crossbar_total,
            neuron_total_um2: a.neuron_total,
            buffer_total_um2: a.buffer_total,
            steps: 50,
            activity_images: 1000,
        }
    }
}

impl CostConfig {
    pub fn energy(&self) -> EnergyConstants {
        EnergyConstants {
            e_write_neuron: self.e_write_neuron,
            e_reset: self.e_reset,
            e_read: self.e_read,
            e_buffer_per_bit: self.e_buffer_per_bit,
            cmos_total: self.cmos_total,
            cmos_memory: self.cmos_memory,
            cmos_buffers: self.cmos_buffers,
            cmos_neurons: self.cmos_neurons,
        }
    }

    pub fn timing(&self) -> TimingConstants {
        TimingConstants {
            t_write: self.t_write_ns,
            t_xbar: self.t_xbar_ns,
            t_read_buffer: self.t_read_buffer_ns,
            t_reset: self.t_reset_ns,
        }
    }

    pub fn area(&self) -> AreaConstants {
        AreaConstants {
            feature_size_nm: self.feature_size_nm,
            cell_area_f2: self.cell_area_f2,
            array_dim: self.array_dim,
            neuron_area: self.neuron_area_um2,
            buffer_area: self.buffer_area_um2,
            crossbar_total: self.crossbar_total_um2,
            neuron_total: self.neuron_total_um2,
            buffer_total: self.buffer_total_um2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.energy().validate()?;
        self.timing().validate()?;
        self.area().validate()?;
        if self.steps == 0 || self.activity_images == 0 {
            return Err(Error::InvalidParam("cost steps and activity_images must be > 0".into()));
        }
        Ok(())
    }
}

/// Expected energy of one neuron write at the voltage that gives
/// `target_prob` for pulse `t_w`. The device is assumed to sit at `r_off` for
/// the whole pulse and, when it switches, at `r_on` for half the pulse on
/// average.
pub fn neuron_write_energy(t_w: f64, target_prob: f64, device: &DeviceParams) -> Result<f64> {
    if !(target_prob > 0.0 && target_prob < 1.0) {
        return Err(Error::Domain(format!("target probability {target_prob} outside (0, 1)")));
    }
    let v = voltage_for_probability(target_prob, t_w, device)?;
    Ok(v * v * t_w * (1.0 / device.r_off() + target_prob / device.r_on * 0.5))
}

pub fn step_latency(tc: &TimingConstants) -> f64 {
    tc.t_write + tc.t_xbar + tc.t_read_buffer + tc.t_reset
}

pub fn pipeline_latency(stages: usize, tc: &TimingConstants) -> f64 {
    stages as f64 * step_latency(tc)
}

/// Area in mm² times latency in ns.
pub fn area_delay_product(area_mm2: f64, latency_ns: f64) -> f64 {
    area_mm2 * latency_ns
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaTable {
    /// Physical arrays allocated, each `array_dim x array_dim` cells.
    pub arrays: usize,
    pub cells: usize,
    pub neurons: usize,
    pub crossbar_mm2: f64,
    pub neurons_mm2: f64,
    pub buffers_mm2: f64,
    pub total_mm2: f64,
}

/// Arrays for the pooling stage: each output position averages a
/// `c*s*s`-row, `c`-column single-rail block.
fn subsample_arrays(factor: usize, [c, _, _]: [usize; 3], [_, oh, ow]: [usize; 3], dim: usize) -> usize {
    oh * ow * (c * factor * factor).div_ceil(dim) * c.div_ceil(dim)
}

/// Allocated-array area. Signed layers spend two physical rows per input,
/// which the program's tiling already reflects; conv layers need one copy
/// of their kernel arrays per output position.
pub fn network_area(program: &SnnProgram, ac: &AreaConstants) -> AreaTable {
    let mut arrays = 0;
    for layer in &program.layers {
        arrays += match layer {
            SnnLayer::Neurons(n) => n.crossbar.tile_count() * n.replicas(),
            SnnLayer::Subsample {
                factor,
                input_shape,
                output_shape,
            } => subsample_arrays(*factor, *input_shape, *output_shape, ac.array_dim),
        };
    }
    let cells = arrays * ac.array_dim * ac.array_dim;
    let neurons = program.neuron_count();
    let um2_to_mm2 = 1e-6;
    let crossbar = ac.crossbar_total.unwrap_or(cells as f64 * ac.cell_area()) * um2_to_mm2;
    let neuron = ac.neuron_total.unwrap_or(neurons as f64 * ac.neuron_area) * um2_to_mm2;
    let buffer = ac.buffer_total.unwrap_or(neurons as f64 * ac.buffer_area) * um2_to_mm2;
    AreaTable {
        arrays,
        cells,
        neurons,
        crossbar_mm2: crossbar,
        neurons_mm2: neuron,
        buffers_mm2: buffer,
        total_mm2: crossbar + neuron + buffer,
    }
}

/// Per-image energy in joules by component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub steps: usize,
    pub crossbar: f64,
    pub writes: f64,
    pub resets: f64,
    pub reads: f64,
    pub buffers: f64,
    pub total: f64,
}

impl EnergyBreakdown {
    fn new(steps: usize, crossbar: f64, writes: f64, resets: f64, reads: f64, buffers: f64) -> Self {
        Self {
            steps,
            crossbar,
            writes,
            resets,
            reads,
            buffers,
            total: crossbar + writes + resets + reads + buffers,
        }
    }

    pub fn crossbar_dominant(&self) -> bool {
        self.crossbar > self.writes.max(self.resets).max(self.reads).max(self.buffers)
    }
}

/// Row conductance sums `sum_j (G_pos + G_neg)` of a tiled layer.
fn row_loads(t: &TiledLayer) -> Vec<f64> {
    let (p, n) = t.conductances();
    let mut out = vec![0.0; p.rows()];
    for (i, o) in out.iter_mut().enumerate() {
        *o = p.row(i).iter().sum::<f64>() + n.as_ref().map_or(0.0, |n| n.row(i).iter().sum());
    }
    out
}

/// Crossbar dissipation of one average step: every driven row delivers
/// `v^2 G` into its cells for the write pulse. Column nodes are taken at
/// ground, which bounds the dissipation from above. Pooling cells sit at the
/// top conductance level.
pub fn crossbar_step_energy(program: &SnnProgram, drive_power: &[Vec<f64>]) -> Result<f64> {
    if drive_power.len() != program.layers.len() {
        return Err(Error::Dimension {
            expected: program.layers.len(),
            got: drive_power.len(),
        });
    }
    let mut conductance = 0.0;
    for (layer, x2) in program.layers.iter().zip(drive_power) {
        let input_len: usize = match layer {
            SnnLayer::Neurons(n) => n.input_shape.iter().product(),
            SnnLayer::Subsample { input_shape, .. } => input_shape.iter().product(),
        };
        if x2.len() != input_len {
            return Err(Error::Dimension {
                expected: input_len,
                got: x2.len(),
            });
        }
        match layer {
            SnnLayer::Neurons(n) => match &n.wiring {
                Wiring::Dense => {
                    conductance += row_loads(&n.crossbar).iter().zip(x2).map(|(g, a)| g * a).sum::<f64>();
                }
                Wiring::Conv { plan } => {
                    let shared = row_loads(&n.crossbar);
                    for p in 0..plan.positions {
                        let own;
                        let loads = match n.replicas_xbar.get(p) {
                            Some(t) => {
                                own = row_loads(t);
                                &own
                            }
                            None => &shared,
                        };
                        for (g, &idx) in loads.iter().zip(plan.patch(p)) {
                            conductance += g * x2[idx as usize];
                        }
                    }
                }
            },
            SnnLayer::Subsample { .. } => {
                conductance += program.device.g_on() * x2.iter().sum::<f64>();
            }
        }
    }
    Ok(conductance * V_SPIKE * V_SPIKE * program.device.t_write)
}

/// Energy per classification over `steps` steps, given the mean squared
/// drive of every stage input measured from real inference runs. Every
/// neuron is written, read and reset once per step; one buffered bit per
/// neuron per step.
pub fn per_image_energy(
    drive_power: &[Vec<f64>],
    program: &SnnProgram,
    ec: &EnergyConstants,
    steps: usize,
) -> Result<EnergyBreakdown> {
    ec.validate()?;
    let events = (program.neuron_count() * steps) as f64;
    let crossbar = crossbar_step_energy(program, drive_power)? * steps as f64;
    Ok(EnergyBreakdown::new(
        steps,
        crossbar,
        events * ec.e_write_neuron,
        events * ec.e_reset,
        events * ec.e_read,
        events * ec.e_buffer_per_bit,
    ))
}

/// How many times more energy the CMOS design uses than `memristor_total`.
pub fn cmos_ratio(memristor_total: f64, ec: &EnergyConstants) -> f64 {
    ec.cmos_total / memristor_total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub energy: EnergyBreakdown,
    pub crossbar_dominant: bool,
    pub neuron_write_energy_j: f64,
    pub step_latency_ns: f64,
    pub pipeline_latency_ns: f64,
    pub stages: usize,
    pub area: AreaTable,
    pub area_delay_ns_mm2: f64,
    pub published_area_delay_ns_mm2: f64,
    pub cmos_area_delay_ns_mm2: f64,
    pub cmos_energy_ratio: f64,
}

pub const CMOS_AREA_MM2: f64 = 0.19;
pub const CMOS_LATENCY_NS: f64 = 28e3;

pub fn report(
    program: &SnnProgram,
    drive_power: &[Vec<f64>],
    steps: usize,
    ec: &EnergyConstants,
    tc: &TimingConstants,
    ac: &AreaConstants,
) -> Result<CostReport> {
    tc.validate()?;
    ac.validate()?;
    let energy = per_image_energy(drive_power, program, ec, steps)?;
    let stages = program.layers.len();
    let latency = pipeline_latency(stages, tc);
    let area = network_area(program, ac);
    let published = network_area(program, &AreaConstants::published());
    Ok(CostReport {
        crossbar_dominant: energy.crossbar_dominant(),
        neuron_write_energy_j: neuron_write_energy(program.device.t_write, 0.5, &program.device)?,
        step_latency_ns: step_latency(tc),
        pipeline_latency_ns: latency,
        stages,
        area_delay_ns_mm2: area_delay_product(area.total_mm2, latency),
        published_area_delay_ns_mm2: area_delay_product(published.total_mm2, latency),
        cmos_area_delay_ns_mm2: area_delay_product(CMOS_AREA_MM2, CMOS_LATENCY_NS),
        cmos_energy_ratio: cmos_ratio(energy.total, ec),
        area,
        energy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convert::{convert, ConvertConfig};
    use crate::nn::NetworkModel;

    fn reference_program() -> SnnProgram {
        let model = NetworkModel::reference_cnn(-1.0, 3);
        convert(&model, &DeviceParams::default(), &ConvertConfig::default()).unwrap()
    }

    fn uniform_drive(program: &SnnProgram, level: f64) -> Vec<Vec<f64>> {
        program
            .layers
            .iter()
            .map(|l| {
                let n: usize = match l {
                    SnnLayer::Neurons(n) => n.input_shape.iter().product(),
                    SnnLayer::Subsample { input_shape, .. } => input_shape.iter().product(),
                };
                vec![level; n]
            })
            .collect()
    }

    #[test]
    fn latency_arithmetic() {
        let tc = TimingConstants::default();
        assert_eq!(step_latency(&tc), 42.0);
        assert_eq!(pipeline_latency(5, &tc), 210.0);
        assert_eq!(pipeline_latency(1, &tc), 42.0);
        assert_eq!(pipeline_latency(0, &tc), 0.0);
        let doubled = TimingConstants {
            t_write: 20.0,
            t_xbar: 20.0,
            t_read_buffer: 4.0,
            t_reset: 40.0,
        };
        assert_eq!(step_latency(&doubled), 84.0);
        let zero = TimingConstants {
            t_write: 0.0,
            t_xbar: 0.0,
            t_read_buffer: 0.0,
            t_reset: 0.0,
        };
        assert_eq!(step_latency(&zero), 0.0);
        assert!(zero.validate().is_err());
    }

    #[test]
    fn area_delay() {
        assert!((area_delay_product(3.105, 210.0) / 652.0 - 1.0).abs() < 5e-3);
        assert!((area_delay_product(CMOS_AREA_MM2, CMOS_LATENCY_NS) / 5320.0 - 1.0).abs() < 5e-3);
        assert_eq!(area_delay_product(0.0, 210.0), 0.0);
    }

    #[test]
    fn write_energy() {
        let d = DeviceParams::default();
        let e = |t| neuron_write_energy(t, 0.5, &d).unwrap();
        assert!(e(1e-6) > e(100e-9) && e(100e-9) > e(10e-9));
        let e10 = e(10e-9);
        assert!((e10 / 2.2771987242504796e-13 - 1.0).abs() < 1e-12);
        assert!(e10 > 24.9e-15 && e10 < 2.49e-12);
        assert!(e(1e-18) < 1e-6 * e10);
        let mut t = 1e-9;
        let mut prev = 0.0;
        while t <= 1e-3 {
            let v = e(t);
            assert!(v > prev);
            prev = v;
            t *= 1.25;
        }
        assert!(neuron_write_energy(10e-9, 1.0, &d).is_err());
        assert!(neuron_write_energy(10e-9, 0.0, &d).is_err());
    }

    #[test]
    fn reference_network_area() {
        let p = reference_program();
        let published = network_area(&p, &AreaConstants::published());
        assert!((published.total_mm2 - 3.105).abs() < 1e-12);
        let computed = network_area(&p, &AreaConstants::default());
        // 576 + 64*3 + 3 signed arrays, 144 + 16 pooling arrays.
        assert_eq!(computed.arrays, 931);
        let ratio = computed.crossbar_mm2 / 2.895;
        assert!((0.5..2.0).contains(&ratio), "{ratio}");
        assert!((computed.neurons_mm2 - 0.154).abs() < 1e-12);
        assert!((computed.buffers_mm2 - 0.056).abs() < 1e-12);

        let empty = SnnProgram { layers: Vec::new(), ..p };
        assert_eq!(network_area(&empty, &AreaConstants::default()).total_mm2, 0.0);
    }

    #[test]
    fn energy_breakdown() {
        let p = reference_program();
        let ec = EnergyConstants::default();
        let low = per_image_energy(&uniform_drive(&p, 0.1), &p, &ec, 50).unwrap();
        let high = per_image_energy(&uniform_drive(&p, 0.3), &p, &ec, 50).unwrap();
        assert!(high.crossbar > low.crossbar);
        for b in [&low, &high] {
            let parts = [b.crossbar, b.writes, b.resets, b.reads, b.buffers];
            assert!(parts.iter().all(|x| *x >= 0.0));
            assert_eq!(b.total, b.crossbar + b.writes + b.resets + b.reads + b.buffers);
        }
        assert_eq!(low.buffers, 0.0);

        let zero = EnergyConstants {
            e_write_neuron: 0.0,
            e_reset: 0.0,
            e_read: 0.0,
            ..EnergyConstants::default()
        };
        let none = per_image_energy(&uniform_drive(&p, 0.0), &p, &zero, 50).unwrap();
        assert_eq!(none.total, 0.0);

        assert!(per_image_energy(&[], &p, &ec, 50).is_err());
    }

    #[test]
    fn cmos_ratio_arithmetic() {
        let r = cmos_ratio(115e-9, &EnergyConstants::default());
        assert_eq!((r * 10.0).round() / 10.0, 6.4);
    }
}
