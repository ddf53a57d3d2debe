//! Finite-difference checks for every differentiable operation, shared by
//! the test targets that report on them.
#![allow(dead_code)]

use catt_tensor::{grad_check_with, GradCheckOptions, Graph, Real, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random<E: Real>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<E> {
    Tensor::from_fn(shape, |_| E::from_f64_lossy(rng.gen_range(lo..hi)))
}

/// Values bounded away from zero by `gap`, random sign.
pub fn away_from_zero<E: Real>(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<E> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(gap..1.0);
        E::from_f64_lossy(if rng.gen_bool(0.5) { m } else { -m })
    })
}

/// Reduces an arbitrary tensor to a scalar with fixed random weights so every
/// output element contributes a distinct coefficient.
pub fn project<E: Real>(g: &mut Graph<E>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = random(&mut rng, g.shape(y), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

pub fn opts<E: Real>() -> (GradCheckOptions, f64) {
    let o = GradCheckOptions::for_real::<E>();
    (o, if o == GradCheckOptions::F32 { 1e-2 } else { 1e-6 })
}

pub fn check_linear<E: Real>(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = vec![
        random::<E>(&mut rng, &[4, 3], -1.0, 1.0),
        random::<E>(&mut rng, &[5, 3], -1.0, 1.0),
        random::<E>(&mut rng, &[5], -1.0, 1.0),
    ];
    let (o, _) = opts::<E>();
    grad_check_with(
        |g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            project(g, y, seed)
        },
        &inputs,
        o,
    )
    .unwrap()
    .max_rel_error
}

pub fn check_conv<E: Real>(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = vec![
        random::<E>(&mut rng, &[2, 2, 5, 4], -1.0, 1.0),
        random::<E>(&mut rng, &[3, 2, 3, 3], -1.0, 1.0),
        random::<E>(&mut rng, &[3], -1.0, 1.0),
    ];
    let (o, _) = opts::<E>();
    grad_check_with(
        |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 1)?;
            project(g, y, seed)
        },
        &inputs,
        o,
    )
    .unwrap()
    .max_rel_error
}

pub fn check_batch_norm<E: Real>(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = vec![
        random::<E>(&mut rng, &[3, 2, 3, 3], -2.0, 2.0),
        random::<E>(&mut rng, &[2], 0.5, 1.5),
        random::<E>(&mut rng, &[2], -1.0, 1.0),
    ];
    let (o, _) = opts::<E>();
    grad_check_with(
        |g, v| {
            let (y, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
            project(g, y, seed)
        },
        &inputs,
        o,
    )
    .unwrap()
    .max_rel_error
}

pub fn check_batch_norm_eval<E: Real>(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = vec![
        random::<E>(&mut rng, &[2, 2, 3, 3], -2.0, 2.0),
        random::<E>(&mut rng, &[2], 0.5, 1.5),
        random::<E>(&mut rng, &[2], -1.0, 1.0),
    ];
    let mean = [E::from_f64_lossy(0.3), E::from_f64_lossy(-0.2)];
    let var = [E::from_f64_lossy(1.7), E::from_f64_lossy(0.4)];
    let (o, _) = opts::<E>();
    grad_check_with(
        |g, v| {
            let y = g.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)?;
            project(g, y, seed)
        },
        &inputs,
        o,
    )
    .unwrap()
    .max_rel_error
}

pub fn check_relu<E: Real>(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = vec![away_from_zero::<E>(&mut rng, &[4, 6], 0.05)];
    let (o, _) = opts::<E>();
    grad_check_with(
        |g, v| {
            let y = g.relu(v[0]);
            project(g, y, seed)
        },
        &inputs,
        o,
    )
    .unwrap()
    .max_rel_error
}

pub fn check_maxpool<E: Real>(seed: u64) -> f64 {
    // A permutation of well-separated values keeps every window's argmax
    // stable under perturbation.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 2 * 2 * 5 * 4;
    let mut vals: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    let t = Tensor::new(
        vec![2, 2, 5, 4],
        vals.iter().map(|v| E::from_f64_lossy(*v as f64 * 0.1)).collect(),
    )
    .unwrap();
    let (o, _) = opts::<E>();
    grad_check_with(
        |g, v| {
            let y = g.maxpool2(v[0])?;
            project(g, y, seed)
        },
        &[t],
        o,
    )
    .unwrap()
    .max_rel_error
}

pub fn check_gating<E: Real>(seed: u64) -> f64 {
    // sigmoid, broadcasting product, fold, concat and reshape in one chain
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = vec![
        random::<E>(&mut rng, &[2, 3], -2.0, 2.0),
        random::<E>(&mut rng, &[2, 3], -2.0, 2.0),
        random::<E>(&mut rng, &[2, 4], -2.0, 2.0),
        random::<E>(&mut rng, &[1, 3, 2, 2], -1.0, 1.0),
    ];
    let (o, _) = opts::<E>();
    grad_check_with(
        |g, v| {
            let both = g.concat_batch(v[0], v[1])?;
            let folded = g.fold_halves(both)?;
            let ch = g.sigmoid(folded);
            let ch = g.reshape(ch, &[1, 3, 1, 2])?;
            let sp = g.sigmoid(v[2]);
            let sp = g.reshape(sp, &[1, 1, 4, 2])?;
            let sp = g.flatten(sp)?;
            let sp = g.reshape(sp, &[1, 1, 2, 4])?;
            let first = g.reshape(ch, &[1, 3, 2, 1])?;
            let a = g.mul(first, sp)?;
            let a = g.reshape(a, &[1, 3, 2, 4])?;
            let t = g.reshape(v[3], &[1, 3, 4, 1])?;
            let t = g.reshape(t, &[1, 3, 2, 2])?;
            let t = g.concat_batch(t, t)?;
            let t = g.reshape(t, &[1, 3, 2, 4])?;
            let y = g.mul(a, t)?;
            let y2 = g.add(y, y)?;
            project(g, y2, seed)
        },
        &inputs,
        o,
    )
    .unwrap()
    .max_rel_error
}

pub fn check_cross_entropy<E: Real>(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = vec![random::<E>(&mut rng, &[5, 3], -3.0, 3.0)];
    let labels: Vec<usize> = (0..5).map(|_| rng.gen_range(0..3)).collect();
    let weights = [E::from_f64_lossy(0.5), E::one(), E::from_f64_lossy(2.0)];
    let (o, _) = opts::<E>();
    let plain = grad_check_with(
        |g, v| g.softmax_cross_entropy(v[0], &labels, None),
        &inputs,
        o,
    )
    .unwrap()
    .max_rel_error;
    let weighted = grad_check_with(
        |g, v| g.softmax_cross_entropy(v[0], &labels, Some(&weights)),
        &inputs,
        o,
    )
    .unwrap()
    .max_rel_error;
    plain.max(weighted)
}

pub fn all_layers<E: Real>(seed: u64) -> Vec<(&'static str, f64)> {
    vec![
        ("linear", check_linear::<E>(seed)),
        ("conv2d", check_conv::<E>(seed)),
        ("batch_norm_train", check_batch_norm::<E>(seed)),
        ("batch_norm_eval", check_batch_norm_eval::<E>(seed)),
        ("relu", check_relu::<E>(seed)),
        ("maxpool2", check_maxpool::<E>(seed)),
        ("gating_chain", check_gating::<E>(seed)),
        ("cross_entropy", check_cross_entropy::<E>(seed)),
    ]
}
