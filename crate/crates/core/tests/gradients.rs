//! Analytic gradients against central finite differences, 100 random instances each.

use dynacal_core::datagen::{self, NormStats};
use dynacal_core::mlp::Mlp;
use dynacal_core::surrogate::{self, MlpCheckpoint};
use dynacal_core::tpo::{self, PolicyNet, PreferencePair};
use dynacal_core::{seed, Action, JointState, PhysParams, PlantConfig};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const INSTANCES: u64 = 100;

/// Entries below `floor` in magnitude are compared on an absolute scale.
fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn jitter(net: &mut Mlp, rng: &mut ChaCha8Rng, amount: f64) {
    let flat: Vec<f64> = net.flat_params().iter().map(|w| w + rng.random_range(-amount..amount)).collect();
    net.set_flat_params(&flat).unwrap();
}

fn sq_loss(net: &Mlp, x: &Array2<f64>, t: &Array2<f64>) -> f64 {
    let y = net.forward(x.view()).unwrap();
    (&y - t).mapv(|v| v * v).sum()
}

#[test]
fn surrogate_weight_gradients() {
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let mut rng = seed::rng(100, &[i]);
        let n = rng.random_range(1..=3);
        let dims = surrogate::default_layer_dims(n);
        let mut net = Mlp::init(&dims, i).unwrap();
        jitter(&mut net, &mut rng, 0.05);
        let batch = rng.random_range(1..=4);
        let x = Array2::from_shape_fn((batch, dims[0]), |_| rng.random_range(-2.0..2.0));
        let t = Array2::from_shape_fn((batch, dims[3]), |_| rng.random_range(-1.0..1.0));

        let cache = net.forward_cached(x.view()).unwrap();
        let grad_out = (cache.output() - &t).mapv(|v| 2.0 * v);
        let analytic = net.backward(&cache, grad_out.view(), true).flat();

        let base = net.flat_params();
        let h = 1e-5;
        // every weight is too many; sample coordinates, always including the first and last
        let mut coords: Vec<usize> = (0..30).map(|_| rng.random_range(0..base.len())).collect();
        coords.extend([0, base.len() - 1]);
        for k in coords {
            let mut probe = net.clone();
            let mut p = base.clone();
            p[k] = base[k] + h;
            probe.set_flat_params(&p).unwrap();
            let up = sq_loss(&probe, &x, &t);
            p[k] = base[k] - h;
            probe.set_flat_params(&p).unwrap();
            let down = sq_loss(&probe, &x, &t);
            let numeric = (up - down) / (2.0 * h);
            let e = rel_err(analytic[k], numeric, 1e-6);
            assert!(e <= TOL, "instance {i} coord {k}: {} vs {numeric} (rel {e:e})", analytic[k]);
            worst = worst.max(e);
        }
    }
    eprintln!("surrogate weight gradients: worst rel err {worst:e}");
}

fn random_checkpoint(rng: &mut ChaCha8Rng, n: usize, seed: u64) -> MlpCheckpoint {
    let dims = surrogate::default_layer_dims(n);
    let mut net = Mlp::init(&dims, seed).unwrap();
    jitter(&mut net, rng, 0.05);
    let dim = datagen::record_dim(n);
    let stats = NormStats {
        mean: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        std: (0..dim).map(|_| rng.random_range(0.2..5.0)).collect(),
    };
    MlpCheckpoint::new(net, stats, seed).unwrap()
}

#[test]
fn surrogate_param_input_gradients() {
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let mut rng = seed::rng(200, &[i]);
        let n = rng.random_range(1..=3);
        let model = random_checkpoint(&mut rng, n, i);
        // raw values within two stds of the norm stats, where tanh is not saturated
        let stats = &model.norm_stats;
        let raw: Vec<f64> = (0..stats.dim()).map(|k| stats.mean[k] + stats.std[k] * rng.random_range(-2.0..2.0)).collect();
        let params = PhysParams::new(raw[0], raw[1], raw[2]);
        let state = JointState::new(raw[3..3 + n].to_vec(), raw[3 + n..3 + 2 * n].to_vec());
        let action = Action::new(raw[3 + 2 * n..3 + 3 * n].to_vec());
        let target = JointState::new(raw[3 + 3 * n..3 + 4 * n].to_vec(), raw[3 + 4 * n..].to_vec());

        let analytic = model.grad_wrt_params(&params, &state, &action, &target).unwrap();
        let loss = |p: &PhysParams| {
            let pred = model.forward(p, &state, &action).unwrap();
            pred.to_vec().iter().zip(target.to_vec()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        };
        let h = 1e-5;
        for k in 0..3 {
            let std = model.norm_stats.std[k];
            let shifted = |s: f64| {
                let mut a = params.to_array();
                a[k] += s * h * std;
                PhysParams::from_array(a)
            };
            // derivative with respect to the normalized input
            let numeric = (loss(&shifted(1.0)) - loss(&shifted(-1.0))) / (2.0 * h);
            let e = rel_err(analytic[k] * std, numeric, 1e-6);
            assert!(e <= TOL, "instance {i} param {k}: {} vs {numeric} (rel {e:e})", analytic[k] * std);
            worst = worst.max(e);
        }
    }
    eprintln!("surrogate input gradients: worst rel err {worst:e}");
}

fn random_pairs(reference: &PolicyNet, rng: &mut ChaCha8Rng, count: usize) -> Vec<PreferencePair> {
    let plant = PlantConfig::default();
    let params = PhysParams::new(1.0, 40.0, 5.0);
    let roll = |rng: &mut ChaCha8Rng| {
        let goal = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
        tpo::policy_rollout(reference, &params, &JointState::zeros(2), goal, 5, &plant, rng).unwrap()
    };
    (0..count).map(|_| PreferencePair { chosen: roll(rng), rejected: roll(rng) }).collect()
}

#[test]
fn tpo_loss_policy_gradients() {
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let mut rng = seed::rng(300, &[i]);
        let reference = PolicyNet::init(2, 8, 0.3, i).unwrap();
        let mut policy = reference.clone();
        jitter(&mut policy.network, &mut rng, 0.2);
        let count = rng.random_range(1..=4);
        let pairs = random_pairs(&reference, &mut rng, count);
        let beta = rng.random_range(0.05..2.0);

        let (_, analytic) = tpo::tpo_loss(&policy, &reference, &pairs, beta).unwrap();
        let base = policy.network.flat_params();
        let h = 1e-5;
        for k in 0..base.len() {
            let mut probe = policy.clone();
            let mut p = base.clone();
            p[k] = base[k] + h;
            probe.network.set_flat_params(&p).unwrap();
            let up = tpo::tpo_loss(&probe, &reference, &pairs, beta).unwrap().0;
            p[k] = base[k] - h;
            probe.network.set_flat_params(&p).unwrap();
            let down = tpo::tpo_loss(&probe, &reference, &pairs, beta).unwrap().0;
            let numeric = (up - down) / (2.0 * h);
            let e = rel_err(analytic[k], numeric, 1e-6);
            assert!(e <= TOL, "instance {i} coord {k}: {} vs {numeric} (rel {e:e})", analytic[k]);
            worst = worst.max(e);
        }
    }
    eprintln!("tpo gradients: worst rel err {worst:e}");
}
