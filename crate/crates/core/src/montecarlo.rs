//! Monte-Carlo variation sweeps over a converted program.
//!
//! A trial perturbs one parameter family of a program copy and measures
//! accuracy on an image subset. Perturbation draws come from the
//! `(seed, Perturbation, trial)` stream and are shared across sigma values,
//! so a sigma sweep rescales one set of draws. Inference draws depend only
//! on the image, so every trial and point sees identical input spikes.

use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::convert::{SnnLayer, SnnProgram};
use crate::data::Dataset;
use crate::device::{perturb_device, positive_gaussian_factor};
use crate::error::{Error, Result};
use crate::rng::{Purpose, StreamKey};
use crate::snn::{Engine, RuntimeNoise, SimConfig};
use crate::xbar::TiledLayer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationKind {
    /// Gaussian offset on every neuron's bias voltage, sigma in volts.
    BiasVoltage,
    /// Each effective weight scaled by `N(1, sigma)`.
    SynapticWeight,
    /// Write pulse width scaled by `N(1, sigma)` per neuron and step.
    PulseWidth,
    Tau0,
    V0,
    /// Additive `N(0, sigma)` on each firing probability, per neuron and step.
    ProbCurve,
    /// Measuring resistance set to `sigma` ohms (deterministic).
    RMeas,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 7] = [
        PerturbationKind::BiasVoltage,
        PerturbationKind::SynapticWeight,
        PerturbationKind::PulseWidth,
        PerturbationKind::Tau0,
        PerturbationKind::V0,
        PerturbationKind::ProbCurve,
        PerturbationKind::RMeas,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbationKind::BiasVoltage => "bias",
            PerturbationKind::SynapticWeight => "weight",
            PerturbationKind::PulseWidth => "pulse-width",
            PerturbationKind::Tau0 => "tau0",
            PerturbationKind::V0 => "v0",
            PerturbationKind::ProbCurve => "prob-curve",
            PerturbationKind::RMeas => "rmeas",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|k| k.name()).collect();
                Error::InvalidParam(format!("unknown perturbation kind '{s}' (expected one of {})", names.join(", ")))
            })
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }

    /// Whether a trial at this kind involves random draws.
    fn is_random(self) -> bool {
        self != PerturbationKind::RMeas
    }
}

/// Program copy with every neuron's bias voltage shifted by `N(0, sigma)`.
/// The clamp window is a property of the amplifier and stays fixed.
pub fn perturb_bias<R: Rng>(program: &SnnProgram, sigma: f64, rng: &mut R) -> SnnProgram {
    let mut p = program.clone();
    if sigma == 0.0 {
        return p;
    }
    for l in &mut p.layers {
        if let SnnLayer::Neurons(n) = l {
            let count = n.neurons();
            n.bias_offsets = (0..count)
                .map(|_| sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                .collect();
        }
    }
    p
}

fn perturb_tiles<R: Rng>(t: &TiledLayer, sigma: f64, g_off: f64, rng: &mut R) -> TiledLayer {
    let mut t = t.clone();
    for tile in t.tiles.iter_mut().flatten() {
        let (rows, cols) = (tile.rows(), tile.cols());
        for i in 0..rows {
            for j in 0..cols {
                let xi = positive_gaussian_factor(sigma, rng);
                let gp = tile.g_pos.get(i, j);
                tile.g_pos.set(i, j, g_off + (gp - g_off) * xi);
                if let Some(gn) = tile.g_neg.as_mut() {
                    let v = gn.get(i, j);
                    gn.set(i, j, g_off + (v - g_off) * xi);
                }
            }
        }
    }
    t
}

/// Program copy with each weight's programmed conductance excess over
/// `g_off` scaled by `N(1, sigma)` (redrawn until positive), which scales the
/// effective weight by the same factor. Every conv output position gets its
/// own independently perturbed crossbar copy.
pub fn perturb_weights<R: Rng>(program: &SnnProgram, sigma: f64, rng: &mut R) -> SnnProgram {
    let mut p = program.clone();
    if sigma == 0.0 {
        return p;
    }
    let g_off = program.device.g_off();
    for l in &mut p.layers {
        if let SnnLayer::Neurons(n) = l {
            if n.replicas() > 1 {
                n.replicas_xbar = (0..n.replicas()).map(|_| perturb_tiles(&n.crossbar, sigma, g_off, rng)).collect();
            } else {
                n.crossbar = perturb_tiles(&n.crossbar, sigma, g_off, rng);
            }
        }
    }
    p
}

/// Program copy with each neuron's `tau0` and `v0` scaled independently.
/// Voltage maps keep their nominal calibration.
pub fn perturb_device_params<R: Rng>(program: &SnnProgram, sigma_tau0: f64, sigma_v0: f64, rng: &mut R) -> SnnProgram {
    let mut p = program.clone();
    if sigma_tau0 == 0.0 && sigma_v0 == 0.0 {
        return p;
    }
    let device = program.device;
    for l in &mut p.layers {
        if let SnnLayer::Neurons(n) = l {
            n.neuron_devices = (0..n.neurons())
                .map(|_| {
                    let d = perturb_device(&device, sigma_tau0, sigma_v0, rng);
                    [d.tau0, d.v0]
                })
                .collect();
        }
    }
    p
}

/// Program and runtime noise for one trial.
pub fn apply(
    program: &SnnProgram,
    kind: PerturbationKind,
    sigma: f64,
    seed: u64,
    trial: u64,
) -> Result<(SnnProgram, RuntimeNoise)> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParam(format!("sigma must be >= 0, got {sigma}")));
    }
    let mut rng = StreamKey::new(seed, Purpose::Perturbation, trial, kind.tag()).rng();
    let none = RuntimeNoise::default();
    Ok(match kind {
        PerturbationKind::BiasVoltage => (perturb_bias(program, sigma, &mut rng), none),
        PerturbationKind::SynapticWeight => (perturb_weights(program, sigma, &mut rng), none),
        PerturbationKind::Tau0 => (perturb_device_params(program, sigma, 0.0, &mut rng), none),
        PerturbationKind::V0 => (perturb_device_params(program, 0.0, sigma, &mut rng), none),
        PerturbationKind::PulseWidth => (
            program.clone(),
            RuntimeNoise {
                pulse_width_sigma: sigma,
                ..none
            },
        ),
        PerturbationKind::ProbCurve => (
            program.clone(),
            RuntimeNoise {
                prob_sigma: sigma,
                ..none
            },
        ),
        PerturbationKind::RMeas => (program.with_r_meas(sigma)?, none),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub trials: usize,
    pub image_count: usize,
    /// Set from the experiment master seed, not from the config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            trials: 50,
            image_count: 1000,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub kind: PerturbationKind,
    pub sigma: f64,
    pub trial_count: usize,
    pub image_count: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub seed: u64,
    pub accuracies: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    pub wall_seconds: f64,
}

impl SweepResult {
    pub fn baseline(&self) -> &SweepPoint {
        &self.points[0]
    }

    pub fn degradation(&self, sigma: f64) -> Option<f64> {
        let base = self.baseline().mean_acc;
        self.points.iter().find(|p| p.sigma == sigma).map(|p| base - p.mean_acc)
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Sweeps `kind` over `sigmas`. The unperturbed point (sigma 0, or the
/// program's own `r_meas` for [`PerturbationKind::RMeas`]) always comes
/// first. Points without random draws are evaluated once.
pub fn run_sweep(
    program: &SnnProgram,
    dataset: &Dataset,
    kind: PerturbationKind,
    sigmas: &[f64],
    cfg: &SweepConfig,
    sim: &SimConfig,
) -> Result<SweepResult> {
    if cfg.trials == 0 {
        return Err(Error::InvalidParam("trials must be >= 1".into()));
    }
    let start = Instant::now();
    let images = cfg.image_count.min(dataset.len());
    let base_sigma = if kind == PerturbationKind::RMeas { program.r_meas } else { 0.0 };
    let mut grid = vec![base_sigma];
    grid.extend(sigmas.iter().copied().filter(|s| *s != base_sigma));
    let sim = SimConfig { image_subset: None, ..*sim };
    let mut points = Vec::with_capacity(grid.len());
    for &sigma in &grid {
        let trials = if kind.is_random() && sigma != base_sigma { cfg.trials } else { 1 };
        let accuracies = (0..trials)
            .map(|trial| {
                let (p, noise) = apply(program, kind, sigma, cfg.seed, trial as u64)?;
                Engine::new(&p, &sim, noise)?.accuracy(dataset, Some(images), trial as u64)
            })
            .collect::<Result<Vec<f64>>>()?;
        let (mean_acc, std_acc) = mean_std(&accuracies);
        points.push(SweepPoint {
            kind,
            sigma,
            trial_count: trials,
            image_count: images,
            mean_acc,
            std_acc,
            seed: cfg.seed,
            accuracies,
        });
    }
    Ok(SweepResult {
        points,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Accuracy at each measuring resistance, averaged over the given inference seeds.
pub fn sweep_rmeas(
    program: &SnnProgram,
    dataset: &Dataset,
    values: &[f64],
    seeds: &[u64],
    image_count: usize,
    sim: &SimConfig,
) -> Result<Vec<(f64, f64)>> {
    if seeds.is_empty() {
        return Err(Error::InvalidParam("at least one seed required".into()));
    }
    values
        .iter()
        .map(|&r| {
            let p = program.with_r_meas(r)?;
            let accs = seeds
                .iter()
                .map(|&seed| Engine::new(&p, &SimConfig { seed, ..*sim }, RuntimeNoise::default())?.accuracy(dataset, Some(image_count), 0))
                .collect::<Result<Vec<f64>>>()?;
            Ok((r, mean_std(&accs).0))
        })
        .collect()
}

/// `tau0` and `v0` sweeps sharing one configuration.
pub fn sweep_device_params(
    program: &SnnProgram,
    dataset: &Dataset,
    tau0_sigmas: &[f64],
    v0_sigmas: &[f64],
    cfg: &SweepConfig,
    sim: &SimConfig,
) -> Result<(SweepResult, SweepResult)> {
    Ok((
        run_sweep(program, dataset, PerturbationKind::Tau0, tau0_sigmas, cfg, sim)?,
        run_sweep(program, dataset, PerturbationKind::V0, v0_sigmas, cfg, sim)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convert::{convert, ConvertConfig};
    use crate::data::Split;
    use crate::device::DeviceParams;
    use crate::nn::{LayerSpec, NetworkModel};

    fn program() -> SnnProgram {
        let m = NetworkModel::init(
            [1, 6, 6],
            vec![
                LayerSpec::Conv {
                    kernel: 3,
                    in_channels: 1,
                    out_channels: 2,
                },
                LayerSpec::Subsample { factor: 2 },
                LayerSpec::Dense { fan_in: 8, fan_out: 3 },
            ],
            0.0,
            4,
        )
        .unwrap();
        convert(&m, &DeviceParams::default(), &ConvertConfig::default()).unwrap()
    }

    fn data(n: usize) -> Dataset {
        let mut rng = StreamKey::new(6, Purpose::Test, 0, 0).rng();
        let pixels = (0..n * 36).map(|_| rng.random_range(0.0..1.0)).collect();
        let labels = (0..n).map(|i| (i % 3) as u8).collect();
        Dataset::new(pixels, [1, 6, 6], labels, 3, Split::Test).unwrap()
    }

    fn sim() -> SimConfig {
        SimConfig {
            steps: 20,
            ..Default::default()
        }
    }

    #[test]
    fn zero_sigma_is_identity() {
        let p = program();
        for kind in PerturbationKind::ALL {
            if kind == PerturbationKind::RMeas {
                continue;
            }
            let (q, noise) = apply(&p, kind, 0.0, 1, 3).unwrap();
            assert_eq!(q, p, "{kind:?}");
            assert_eq!(noise, RuntimeNoise::default());
        }
    }

    #[test]
    fn baseline_point_reproduces_unperturbed_accuracy() {
        let p = program();
        let d = data(30);
        let base = Engine::new(&p, &sim(), RuntimeNoise::default()).unwrap().accuracy(&d, Some(30), 0).unwrap();
        let cfg = SweepConfig {
            trials: 3,
            image_count: 30,
            seed: 2,
        };
        for kind in [PerturbationKind::BiasVoltage, PerturbationKind::PulseWidth, PerturbationKind::ProbCurve] {
            let r = run_sweep(&p, &d, kind, &[0.1, 0.3], &cfg, &sim()).unwrap();
            assert_eq!(r.points.len(), 3);
            assert_eq!(r.baseline().mean_acc, base);
            assert_eq!(r.baseline().std_acc, 0.0);
            assert_eq!(r.points[1].trial_count, 3);
            for pt in &r.points {
                assert!((0.0..=1.0).contains(&pt.mean_acc) && pt.std_acc >= 0.0);
            }
        }
        let r = run_sweep(&p, &d, PerturbationKind::RMeas, &[0.0, 1e4], &cfg, &sim()).unwrap();
        assert_eq!(r.baseline().sigma, 100.0);
        assert_eq!(r.baseline().mean_acc, base);
        assert_eq!(r.points.len(), 3);
        let zero_trials = SweepConfig { trials: 0, ..cfg };
        assert!(run_sweep(&p, &d, PerturbationKind::V0, &[0.1], &zero_trials, &sim()).is_err());
    }

    #[test]
    fn sweeps_are_reproducible_and_order_independent() {
        let p = program();
        let d = data(20);
        let cfg = SweepConfig {
            trials: 4,
            image_count: 20,
            seed: 9,
        };
        let a = run_sweep(&p, &d, PerturbationKind::SynapticWeight, &[0.2], &cfg, &sim()).unwrap();
        let b = run_sweep(&p, &d, PerturbationKind::SynapticWeight, &[0.2], &cfg, &sim()).unwrap();
        assert_eq!(a.points, b.points);
        // Running trial 2 alone gives the same value it had inside the sweep.
        let (q, noise) = apply(&p, PerturbationKind::SynapticWeight, 0.2, 9, 2).unwrap();
        let alone = Engine::new(&q, &sim(), noise).unwrap().accuracy(&d, Some(20), 2).unwrap();
        assert_eq!(alone, a.points[1].accuracies[2]);
    }

    #[test]
    fn bias_draws_have_requested_spread() {
        let p = program();
        let mut rng = StreamKey::new(3, Purpose::Test, 0, 0).rng();
        let mut all = Vec::new();
        while all.len() < 10_000 {
            let q = perturb_bias(&p, 0.3, &mut rng);
            for n in q.neuron_layers() {
                all.extend_from_slice(&n.bias_offsets);
            }
        }
        let (m, s) = mean_std(&all);
        assert!(m.abs() < 0.02);
        assert!((s / 0.3 - 1.0).abs() < 0.05, "{s}");
        for n in perturb_bias(&p, 0.3, &mut rng).neuron_layers() {
            assert_eq!(n.map.v_low, p.neuron_layers().next().unwrap().map.v_low);
            assert!(n.map.v_low < n.map.v_high);
        }
    }

    #[test]
    fn weight_perturbation_scales_effective_weights() {
        let p = program();
        let mut rng = StreamKey::new(4, Purpose::Test, 0, 0).rng();
        let q = perturb_weights(&p, 0.1, &mut rng);
        let dev = p.device;
        let (a, b) = (p.neuron_layers().nth(1).unwrap(), q.neuron_layers().nth(1).unwrap());
        let (wa, wb) = (a.effective_weights(&dev), b.effective_weights(&dev));
        let mut ratios = Vec::new();
        for (x, y) in wa.iter().zip(&wb) {
            if *x == 0.0 {
                assert_eq!(*y, 0.0);
            } else {
                assert!(x.signum() == y.signum());
                ratios.push(y / x);
            }
        }
        let (m, _) = mean_std(&ratios);
        assert!((m - 1.0).abs() < 0.1);
        let conv = q.neuron_layers().next().unwrap();
        assert_eq!(conv.replicas_xbar.len(), 16);
        assert_ne!(conv.replicas_xbar[0], conv.replicas_xbar[1]);
    }

    #[test]
    fn prob_curve_perturbation_stays_valid() {
        // Heavy additive noise must still produce a well-defined simulation.
        let p = program();
        let d = data(10);
        let (q, noise) = apply(&p, PerturbationKind::ProbCurve, 5.0, 1, 0).unwrap();
        let acc = Engine::new(&q, &sim(), noise).unwrap().accuracy(&d, None, 0).unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn kind_names_round_trip() {
        for k in PerturbationKind::ALL {
            assert_eq!(PerturbationKind::parse(k.name()).unwrap(), k);
        }
        assert!(PerturbationKind::parse("gain").is_err());
    }

    #[test]
    fn rmeas_sweep_is_reproducible() {
        let p = program();
        let d = data(20);
        let a = sweep_rmeas(&p, &d, &[0.0, 1e3, 1e5], &[1, 2], 20, &sim()).unwrap();
        let b = sweep_rmeas(&p, &d, &[0.0, 1e3, 1e5], &[1, 2], 20, &sim()).unwrap();
        assert_eq!(a, b);
        let base = Engine::new(&p.with_r_meas(0.0).unwrap(), &sim(), RuntimeNoise::default()).unwrap();
        let b1 = base.accuracy(&d, Some(20), 0).unwrap();
        let b2 = Engine::new(&p.with_r_meas(0.0).unwrap(), &SimConfig { seed: 2, ..sim() }, RuntimeNoise::default())
            .unwrap()
            .accuracy(&d, Some(20), 0)
            .unwrap();
        assert_eq!(a[0].1, (b1 + b2) / 2.0);
    }
}
