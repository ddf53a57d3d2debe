//! Central finite-difference verification of reverse-mode gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Relative error is `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
///
/// The floor keeps coordinates whose derivative is near zero from dividing
/// rounding noise by near zero. In `f32` a central difference with step 1e-3
/// carries roughly 1e-4 of absolute noise on an O(1) objective, so the `f32`
/// floor is 0.1; in `f64` the noise is ~1e-9 and the floor is 1e-2.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub floor: f64,
}

impl GradCheckOptions {
    pub const F32: Self = Self {
        eps: 1e-3,
        floor: 0.1,
    };
    pub const F64: Self = Self {
        eps: 1e-6,
        floor: 1e-2,
    };

    /// Defaults for the precision of `E`.
    pub fn for_real<E: Real>() -> Self {
        if std::mem::size_of::<E>() <= 4 {
            Self::F32
        } else {
            Self::F64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (tensor index, element index) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
}

impl GradCheckReport {
    fn record(&mut self, tensor: usize, elem: usize, analytic: f64, numeric: f64, floor: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(floor);
        let err = (analytic - numeric).abs() / denom;
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_none() || err.is_nan() {
            self.max_rel_error = if err.is_nan() { f64::INFINITY } else { err.max(self.max_rel_error) };
            self.worst = Some((tensor, elem));
            self.analytic_at_worst = analytic;
            self.numeric_at_worst = numeric;
        }
    }
}

fn scalar<E: Real>(g: &Graph<E>, v: Var) -> f64 {
    g.scalar_f64(v)
}

/// Checks the gradient of a scalar function with respect to every element of
/// every input tensor.
pub fn grad_check<E, F>(f: F, inputs: &[Tensor<E>], eps: f64) -> Result<GradCheckReport>
where
    E: Real,
    F: FnMut(&mut Graph<E>, &[Var]) -> Result<Var>,
{
    grad_check_with(
        f,
        inputs,
        GradCheckOptions {
            eps,
            ..GradCheckOptions::for_real::<E>()
        },
    )
}

pub fn grad_check_with<E, F>(
    mut f: F,
    inputs: &[Tensor<E>],
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    E: Real,
    F: FnMut(&mut Graph<E>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<E>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).map_or_else(|| vec![E::zero(); t.numel()], <[E]>::to_vec))
        .collect();

    let mut eval = |perturbed: &[Tensor<E>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        Ok(scalar(&g, out))
    };

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for ti in 0..inputs.len() {
        for ei in 0..inputs[ti].numel() {
            let orig = inputs[ti].data()[ei];
            work[ti].data_mut()[ei] = E::from_f64_lossy(orig.as_f64() + opts.eps);
            let plus = eval(&work)?;
            work[ti].data_mut()[ei] = E::from_f64_lossy(orig.as_f64() - opts.eps);
            let minus = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            report.record(ti, ei, analytic[ti][ei].as_f64(), numeric, opts.floor);
        }
    }
    Ok(report)
}

/// A scalar objective over the parameters of some stateful model.
pub trait Objective<E: Real> {
    fn store(&mut self) -> &mut ParamStore<E>;
    fn evaluate(&mut self, g: &mut Graph<E>) -> Result<Var>;
}

fn evaluate_scalar<E: Real>(objective: &mut impl Objective<E>) -> Result<f64> {
    let mut g = Graph::new();
    let v = objective.evaluate(&mut g)?;
    Ok(scalar(&g, v))
}

/// Checks gradients with respect to stored parameters. `stride` subsamples
/// elements (every `stride`-th element of each parameter, starting at 0).
pub fn grad_check_params<E: Real>(
    objective: &mut impl Objective<E>,
    opts: GradCheckOptions,
    stride: usize,
) -> Result<GradCheckReport> {
    let stride = stride.max(1);
    let mut g = Graph::new();
    let out = objective.evaluate(&mut g)?;
    g.backward(out)?;
    let mut analytic: Vec<(ParamId, Vec<E>)> = Vec::new();
    let ids: Vec<ParamId> = objective.store().iter().map(|(id, _)| id).collect();
    for id in ids {
        let n = objective.store().value(id).numel();
        let grad = g
            .bound_params()
            .find(|(pid, _)| *pid == id)
            .and_then(|(_, v)| g.grad(v).map(<[E]>::to_vec))
            .unwrap_or_else(|| vec![E::zero(); n]);
        analytic.push((id, grad));
    }

    let mut report = GradCheckReport::default();
    for (id, grad) in &analytic {
        let n = grad.len();
        for ei in (0..n).step_by(stride) {
            let orig = objective.store().value(*id).data()[ei];
            objective.store().value_mut(*id).data_mut()[ei] = E::from_f64_lossy(orig.as_f64() + opts.eps);
            let plus = evaluate_scalar(objective)?;
            objective.store().value_mut(*id).data_mut()[ei] = E::from_f64_lossy(orig.as_f64() - opts.eps);
            let minus = evaluate_scalar(objective)?;
            objective.store().value_mut(*id).data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            report.record(id.index(), ei, grad[ei].as_f64(), numeric, opts.floor);
        }
    }
    Ok(report)
}
