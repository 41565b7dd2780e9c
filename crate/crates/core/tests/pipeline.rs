use memsnn::convert::{convert, ConvertConfig};
use memsnn::data::{Dataset, Split};
use memsnn::device::DeviceParams;
use memsnn::io::persist::{decode_model, decode_program, encode_model, encode_program};
use memsnn::montecarlo::{run_sweep, PerturbationKind, SweepConfig};
use memsnn::nn::{evaluate, train, LayerSpec, NetworkModel, TrainConfig};
use memsnn::snn::{Engine, RuntimeNoise, SimConfig};

const CLASSES: usize = 4;

// Class c lights one 3x3 quadrant of an 8x8 image.
fn quadrants(n: usize, split: Split) -> Dataset {
    let mut pixels = vec![0.0; n * 64];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % CLASSES;
        labels.push(c as u8);
        let (r0, c0) = (1 + (c / 2) * 4, 1 + (c % 2) * 4);
        for r in r0..r0 + 3 {
            for k in c0..c0 + 3 {
                pixels[i * 64 + r * 8 + k] = 0.7 + 0.3 * ((i / CLASSES) % 4) as f64 / 3.0;
            }
        }
    }
    Dataset::new(pixels, [1, 8, 8], labels, CLASSES, split).unwrap()
}

fn tiny_model(seed: u64) -> NetworkModel {
    let layers = vec![
        LayerSpec::Conv {
            kernel: 3,
            in_channels: 1,
            out_channels: 4,
        },
        LayerSpec::Subsample { factor: 2 },
        LayerSpec::Dense {
            fan_in: 36,
            fan_out: CLASSES,
        },
    ];
    NetworkModel::init([1, 8, 8], layers, 0.0, seed).unwrap()
}

fn trained() -> (NetworkModel, Dataset) {
    let train_set = quadrants(200, Split::Train);
    let test_set = quadrants(40, Split::Test);
    let mut model = tiny_model(3);
    let cfg = TrainConfig {
        epochs: 8,
        batch_size: 8,
        seed: 3,
        ..TrainConfig::default()
    };
    train(&mut model, &train_set, None, &cfg, |_| {}).unwrap();
    (model, test_set)
}

#[test]
fn train_convert_infer_round_trip() {
    let (model, test) = trained();
    let ann = evaluate(&model, &test);
    assert!(ann >= 0.95, "ann accuracy {ann}");

    let model = decode_model(&encode_model(&model)).unwrap();
    assert_eq!(evaluate(&model, &test), ann);

    let program = convert(&model, &DeviceParams::default(), &ConvertConfig::default()).unwrap();
    let program = decode_program(&encode_program(&program).unwrap()).unwrap();
    let sim = SimConfig {
        steps: 50,
        seed: 11,
        ..SimConfig::default()
    };
    let engine = Engine::new(&program, &sim, RuntimeNoise::default()).unwrap();
    let snn = engine.accuracy(&test, None, 0).unwrap();
    assert!(snn >= ann - 0.1, "snn {snn} vs ann {ann}");
    assert_eq!(engine.accuracy(&test, None, 0).unwrap(), snn);
}

#[test]
fn large_bias_spread_degrades_accuracy() {
    let (model, test) = trained();
    let program = convert(&model, &DeviceParams::default(), &ConvertConfig::default()).unwrap();
    let sim = SimConfig {
        steps: 30,
        ..SimConfig::default()
    };
    let cfg = SweepConfig {
        trials: 3,
        image_count: 40,
        seed: 5,
    };
    let res = run_sweep(&program, &test, PerturbationKind::BiasVoltage, &[2.0], &cfg, &sim).unwrap();
    assert_eq!(res.points.len(), 2);
    assert_eq!(res.points[0].trial_count, 1);
    assert_eq!(res.points[1].trial_count, 3);
    let d = res.degradation(2.0).unwrap();
    assert!(d > 0.1, "degradation {d}");
}
