//! Layers with parameters registered in a [`ParamStore`].

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::init::kaiming_uniform;
use crate::param::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub pad: usize,
}

impl Conv2d {
    /// Square `kernel x kernel` convolution with "same" padding.
    pub fn new<E: Real>(
        store: &mut ParamStore<E>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        seed: u64,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(TensorError::InvalidArgument(format!(
                "{name}: kernel size {kernel} must be odd"
            )));
        }
        let wname = format!("{name}.weight");
        let fan_in = in_channels * kernel * kernel;
        let w = kaiming_uniform(&[out_channels, in_channels, kernel, kernel], fan_in, seed, &wname);
        let weight = store.add(wname, w)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]))?;
        Ok(Self {
            weight,
            bias,
            pad: kernel / 2,
        })
    }

    pub fn forward<E: Real>(&self, g: &mut Graph<E>, store: &ParamStore<E>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, b, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<E: Real>(
        store: &mut ParamStore<E>,
        name: &str,
        inputs: usize,
        outputs: usize,
        seed: u64,
    ) -> Result<Self> {
        let wname = format!("{name}.weight");
        let w = kaiming_uniform(&[outputs, inputs], inputs, seed, &wname);
        let weight = store.add(wname, w)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]))?;
        Ok(Self { weight, bias })
    }

    pub fn forward<E: Real>(&self, g: &mut Graph<E>, store: &ParamStore<E>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<E> {
    pub mean: Vec<E>,
    pub var: Vec<E>,
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d<E> {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
    /// `None` until the first training-mode forward pass.
    pub running: Option<RunningStats<E>>,
}

impl<E: Real> BatchNorm2d<E> {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore<E>, name: &str, channels: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(&[channels]))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]))?;
        Ok(Self {
            name: name.to_string(),
            gamma,
            beta,
            channels,
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
            running: None,
        })
    }

    pub fn forward(
        &mut self,
        g: &mut Graph<E>,
        store: &ParamStore<E>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        match mode {
            Mode::Train => {
                let (y, stats) = g.batch_norm_train(x, gamma, beta, self.eps)?;
                self.update_running(&stats.mean, &stats.var, stats.count);
                Ok(y)
            }
            Mode::Eval => {
                let running = self
                    .running
                    .as_ref()
                    .ok_or_else(|| TensorError::UninitializedRunningStats(self.name.clone()))?;
                g.batch_norm_eval(x, gamma, beta, &running.mean, &running.var, self.eps)
            }
        }
    }

    fn update_running(&mut self, mean: &[E], var: &[E], count: usize) {
        let c = self.channels;
        let running = self.running.get_or_insert_with(|| RunningStats {
            mean: vec![E::zero(); c],
            var: vec![E::one(); c],
        });
        let m = self.momentum;
        let unbias = count as f64 / (count as f64 - 1.0);
        for ch in 0..c {
            let rm = running.mean[ch].as_f64();
            let rv = running.var[ch].as_f64();
            running.mean[ch] = E::from_f64_lossy((1.0 - m) * rm + m * mean[ch].as_f64());
            running.var[ch] = E::from_f64_lossy((1.0 - m) * rv + m * var[ch].as_f64() * unbias);
        }
    }
}
