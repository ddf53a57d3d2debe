#![allow(dead_code)]

use catt_core::model::{build_model, Model, ModelConfig, PairBatch, Variant, POSITION_FEATURES};
use catt_tensor::{grad_check_params, GradCheckOptions, Graph, Mode, Objective, ParamStore, Real, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The reference architecture shrunk to 16px crops and 4 filters.
pub fn small_config(variant: Variant, seed: u64) -> ModelConfig {
    ModelConfig {
        variant,
        input_size: 16,
        channels: 4,
        attention_hidden: 8,
        classifier_hidden: 8,
        position_hidden: 8,
        seed,
    }
}

pub fn random_batch<E: Real>(n: usize, side: usize, seed: u64) -> PairBatch<E> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = |rng: &mut ChaCha8Rng| Tensor::from_fn(&[n, 1, side, side], |_| E::from_f64_lossy(rng.gen()));
    let cell_a = img(&mut rng);
    let cell_b = img(&mut rng);
    let union = img(&mut rng);
    PairBatch {
        cell_a,
        cell_b,
        union,
        positions: Tensor::from_fn(&[n, POSITION_FEATURES], |_| E::from_f64_lossy(rng.gen())),
        labels: (0..n).map(|_| rng.gen_range(0..3)).collect(),
    }
}

pub struct PairLoss<E: Real> {
    pub model: Model<E>,
    pub batch: PairBatch<E>,
}

impl<E: Real> Objective<E> for PairLoss<E> {
    fn store(&mut self) -> &mut ParamStore<E> {
        &mut self.model.store
    }

    fn evaluate(&mut self, g: &mut Graph<E>) -> Result<Var, TensorError> {
        let out = self
            .model
            .forward(g, &self.batch, Mode::Train)
            .map_err(|e| TensorError::InvalidArgument(e.to_string()))?;
        g.softmax_cross_entropy(out.logits, &self.batch.labels, None)
    }
}

/// A small full model moved off the measure-zero kinks that zero-initialised
/// biases create when an input row is all zeros.
fn jittered_model<E: Real>(seed: u64) -> Model<E> {
    let mut model = build_model::<E>(&small_config(Variant::Full, seed)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    for p in model.store.iter_mut() {
        for v in p.value.data_mut() {
            *v = E::from_f64_lossy(v.as_f64() + rng.gen_range(-0.05..0.05));
        }
    }
    model
}

/// Max relative error of the end-to-end loss gradient with respect to every
/// parameter, finite differences taken in the same precision.
pub fn model_grad_error<E: Real>(seed: u64, opts: GradCheckOptions) -> f64 {
    let mut obj = PairLoss {
        model: jittered_model::<E>(seed),
        batch: random_batch(3, 16, seed.wrapping_add(1000)),
    };
    grad_check_params(&mut obj, opts, 1).unwrap().max_rel_error
}

/// Max relative error of the `f32` backward pass against `f64` central
/// differences at the same parameter values. A step small enough to avoid
/// crossing ReLU and max-pool switches drowns in `f32` rounding, so the
/// reference derivative comes from the wider type.
pub fn model_grad_error_f32(seed: u64) -> f64 {
    let mut narrow = PairLoss {
        model: jittered_model::<f32>(seed),
        batch: random_batch::<f32>(3, 16, seed.wrapping_add(1000)),
    };
    let mut g = Graph::new();
    let loss = narrow.evaluate(&mut g).unwrap();
    g.backward(loss).unwrap();
    let mut analytic = Vec::new();
    for (id, p) in narrow.model.store.iter() {
        let grad = g
            .bound_params()
            .find(|(pid, _)| *pid == id)
            .and_then(|(_, v)| g.grad(v).map(<[f32]>::to_vec))
            .unwrap_or_else(|| vec![0.0; p.value.numel()]);
        analytic.push(grad);
    }

    let mut wide = PairLoss {
        model: build_model::<f64>(&small_config(Variant::Full, seed)).unwrap(),
        batch: random_batch::<f64>(3, 16, seed.wrapping_add(1000)),
    };
    for (dst, (_, src)) in wide.model.store.iter_mut().zip(narrow.model.store.iter()) {
        dst.value = src.value.cast();
    }
    wide.batch = PairBatch {
        cell_a: narrow.batch.cell_a.cast(),
        cell_b: narrow.batch.cell_b.cast(),
        union: narrow.batch.union.cast(),
        positions: narrow.batch.positions.cast(),
        labels: narrow.batch.labels.clone(),
    };
    let opts = GradCheckOptions::F64;
    let eval = |obj: &mut PairLoss<f64>| {
        let mut g = Graph::new();
        let v = obj.evaluate(&mut g).unwrap();
        g.scalar_f64(v)
    };
    let mut worst = 0.0f64;
    let ids: Vec<_> = wide.model.store.iter().map(|(id, _)| id).collect();
    for (id, grad) in ids.into_iter().zip(&analytic) {
        for (i, &a) in grad.iter().enumerate() {
            let orig = wide.model.store.value(id).data()[i];
            wide.model.store.value_mut(id).data_mut()[i] = orig + opts.eps;
            let plus = eval(&mut wide);
            wide.model.store.value_mut(id).data_mut()[i] = orig - opts.eps;
            let minus = eval(&mut wide);
            wide.model.store.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = f64::from(a);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            worst = worst.max(err);
        }
    }
    worst
}
