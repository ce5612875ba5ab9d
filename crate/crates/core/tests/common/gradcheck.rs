//! Central finite-difference checks of the tape gradients in double precision.

use qmat_core::nn::{Backend, DenseNet, DenseNetConfig, Graph, Mode, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;
pub const MIN_COORDS: usize = 20;

/// Result of checking one layer type.
#[derive(Debug)]
pub struct CheckResult {
    pub layer: &'static str,
    pub coords: usize,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.coords >= MIN_COORDS && self.max_rel_error < TOLERANCE
    }
}

type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Var + 'a;

fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero so a ±STEP perturbation never crosses a
/// rectifier kink.
fn off_zero_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn objective(inputs: &[Tensor<f64>], build: &Build, weights: &Tensor<f64>) -> f64 {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.parameter(t)).collect();
    let out = build(&mut g, &vars);
    g.value(out)
        .data()
        .iter()
        .zip(weights.data())
        .map(|(a, b)| a * b)
        .sum()
}

/// Compares `d/dx <w, f(x)>` from the tape against central differences on
/// `per_input` random coordinates of every input.
fn check(
    layer: &'static str,
    inputs: Vec<Tensor<f64>>,
    build: &Build,
    per_input: usize,
    rng: &mut ChaCha8Rng,
) -> CheckResult {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.parameter(t)).collect();
    let out = build(&mut g, &vars);
    let shape = g.value(out).shape().to_vec();
    let weights = random_tensor(&shape, -1.0, 1.0, rng);
    let grads = g.backward_with(out, weights.clone()).unwrap();

    let mut coords = 0;
    let mut worst: f64 = 0.0;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("every input receives a gradient");
        let n = inputs[i].len();
        let picks: Vec<usize> = if n <= per_input {
            (0..n).collect()
        } else {
            rand::seq::index::sample(rng, n, per_input).into_vec()
        };
        for j in picks {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= STEP;
            let numeric =
                (objective(&plus, build, &weights) - objective(&minus, build, &weights)) / (2.0 * STEP);
            let a = analytic.data()[j];
            let scale = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / scale);
            coords += 1;
        }
    }
    CheckResult {
        layer,
        coords,
        max_rel_error: worst,
    }
}

/// Runs the check for every layer type used by the network.
pub fn all_layer_checks(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();

    let x = random_tensor(&[2, 3, 6, 6], -1.0, 1.0, &mut rng);
    let k = random_tensor(&[4, 3, 3, 3], -0.5, 0.5, &mut rng);
    results.push(check(
        "conv3x3",
        vec![x, k],
        &|g, v| g.conv3x3(&v[0], &v[1]).unwrap(),
        24,
        &mut rng,
    ));

    let x = random_tensor(&[3, 4, 4, 4], -2.0, 2.0, &mut rng);
    let scale = random_tensor(&[4], 0.5, 1.5, &mut rng);
    let shift = random_tensor(&[4], -0.5, 0.5, &mut rng);
    results.push(check(
        "batch_norm_train",
        vec![x.clone(), scale.clone(), shift.clone()],
        &|g, v| g.batch_norm_train(&v[0], &v[1], &v[2]).unwrap().0,
        24,
        &mut rng,
    ));

    let mean: Vec<f64> = (0..4).map(|_| rng.random_range(-0.5..0.5)).collect();
    let var: Vec<f64> = (0..4).map(|_| rng.random_range(0.5..2.0)).collect();
    results.push(check(
        "batch_norm_eval",
        vec![x, scale, shift],
        &|g, v| g.batch_norm_eval(&v[0], &v[1], &v[2], &mean, &var).unwrap(),
        24,
        &mut rng,
    ));

    results.push(check(
        "relu",
        vec![off_zero_tensor(&[2, 3, 4, 4], &mut rng)],
        &|g, v| g.relu(&v[0]),
        24,
        &mut rng,
    ));

    results.push(check(
        "avg_pool2",
        vec![random_tensor(&[2, 3, 6, 6], -1.0, 1.0, &mut rng)],
        &|g, v| g.avg_pool2(&v[0]).unwrap(),
        24,
        &mut rng,
    ));

    results.push(check(
        "global_avg_pool",
        vec![random_tensor(&[2, 3, 5, 5], -1.0, 1.0, &mut rng)],
        &|g, v| g.global_avg_pool(&v[0]).unwrap(),
        24,
        &mut rng,
    ));

    results.push(check(
        "concat",
        vec![
            random_tensor(&[2, 2, 3, 3], -1.0, 1.0, &mut rng),
            random_tensor(&[2, 3, 3, 3], -1.0, 1.0, &mut rng),
        ],
        &|g, v| g.concat(&[&v[0], &v[1]]).unwrap(),
        12,
        &mut rng,
    ));

    let mask: Vec<f64> = (0..2 * 3 * 4 * 4)
        .map(|_| if rng.random_bool(0.8) { 1.25 } else { 0.0 })
        .collect();
    results.push(check(
        "dropout",
        vec![random_tensor(&[2, 3, 4, 4], -1.0, 1.0, &mut rng)],
        &|g, v| g.dropout(&v[0], mask.clone()).unwrap(),
        24,
        &mut rng,
    ));

    results.push(check(
        "linear",
        vec![
            random_tensor(&[4, 6], -1.0, 1.0, &mut rng),
            random_tensor(&[5, 6], -1.0, 1.0, &mut rng),
            random_tensor(&[5], -1.0, 1.0, &mut rng),
        ],
        &|g, v| g.linear(&v[0], &v[1], &v[2]).unwrap(),
        12,
        &mut rng,
    ));

    let target = random_tensor(&[4, 6], 1.0, 20.0, &mut rng);
    let t1 = target.clone();
    results.push(check(
        "log_cosh_loss",
        vec![random_tensor(&[4, 6], 0.0, 20.0, &mut rng)],
        &move |g, v| {
            let t = g.constant(t1.clone());
            g.log_cosh_loss(v[0], t).unwrap()
        },
        24,
        &mut rng,
    ));
    results.push(check(
        "l2_loss",
        vec![random_tensor(&[4, 6], 0.0, 20.0, &mut rng)],
        &move |g, v| {
            let t = g.constant(target.clone());
            g.l2_loss(v[0], t).unwrap()
        },
        24,
        &mut rng,
    ));

    results
}

/// Whole-network check through [`DenseNet::forward`] in train mode. The
/// dropout mask generator is reseeded on every pass so the mask stays fixed.
///
/// With dozens of rectifiers in series, a step as large as [`STEP`] regularly
/// moves some pre-activation across zero, where the central difference is
/// meaningless; callers pick a step small enough to stay on one side.
pub fn network_check(seed: u64, step: f64) -> CheckResult {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let cfg = DenseNetConfig {
        input_size: 8,
        nc_outputs: 3,
        ..DenseNetConfig::with_depth(10, 3).unwrap()
    };
    let model: DenseNet<f64> = DenseNet::new(cfg, rng.random()).unwrap();
    let x = random_tensor(&[3, 3, 8, 8], 0.0, 1.0, rng);
    let mask_seed: u64 = rng.random();
    let run = |m: &DenseNet<f64>, g: &mut Graph<f64>| {
        let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
        m.forward(g, x.clone(), Mode::Train(&mut mask_rng)).unwrap()
    };

    let mut g = Graph::<f64>::new();
    let out = run(&model, &mut g);
    let weights = random_tensor(g.value(out.output).shape(), -1.0, 1.0, rng);
    let grads = g.backward_with(out.output, weights.clone()).unwrap();
    let objective = |m: &DenseNet<f64>| {
        let mut g = Graph::<f64>::new();
        let out = run(m, &mut g);
        g.value(out.output)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum::<f64>()
    };

    let mut coords = 0;
    let mut worst: f64 = 0.0;
    for (i, var) in out.params.iter().enumerate() {
        let analytic = grads.get(*var).expect("parameters receive gradients");
        let n = model.params()[i].value.len();
        for j in rand::seq::index::sample(rng, n, n.min(2)) {
            let mut plus = model.clone();
            plus.params_mut()[i].value.data_mut()[j] += step;
            let mut minus = model.clone();
            minus.params_mut()[i].value.data_mut()[j] -= step;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * step);
            let a = analytic.data()[j];
            let scale = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / scale);
            coords += 1;
        }
    }
    CheckResult {
        layer: "densenet (end to end)",
        coords,
        max_rel_error: worst,
    }
}
