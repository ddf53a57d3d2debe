//! Tape of tensor operations and the reverse sweep over it.
//!
//! Every operation validates shapes before touching data, records its inputs
//! and whatever it needs for the backward pass, and returns a [`Var`] handle.
//! Nodes are appended in creation order, so a reverse walk visits them in a
//! valid topological order.

use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::param::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-channel statistics computed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<E> {
    pub mean: Vec<E>,
    /// Biased (population) variance used for normalisation.
    pub var: Vec<E>,
    /// Elements reduced per channel.
    pub count: usize,
}

enum Op<E> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        pad: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<E>,
        inv_std: Vec<E>,
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    FoldHalves(Var),
    ConcatBatch(Var, Var),
    Sum(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<E>,
        sample_weights: Vec<E>,
        total_weight: E,
    },
}

struct Node<E> {
    value: Tensor<E>,
    op: Op<E>,
    requires_grad: bool,
    /// Unrounded value of scalar reductions.
    precise: Option<f64>,
}

/// A single forward pass worth of recorded operations.
pub struct Graph<E> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Vec<E>>>,
    bound: HashMap<ParamId, Var>,
}

impl<E: Real> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, expected: impl Into<String>, got: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        expected: expected.into(),
        got: got.to_vec(),
    }
}

impl<E: Real> Graph<E> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            bound: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            precise: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    /// Binds a stored parameter as a trainable leaf. Binding the same id twice
    /// returns the same node, so shared weights accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore<E>, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(&id) {
            return *v;
        }
        let var = self.leaf(store.value(id).clone(), true);
        self.bound.insert(id, var);
        var
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound.iter().map(|(id, v)| (*id, *v))
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    /// Scalar value of `v` in double precision. Reductions keep their
    /// accumulator, so this is more accurate than reading `value` when `E` is
    /// `f32`.
    pub fn scalar_f64(&self, v: Var) -> f64 {
        let node = &self.nodes[v.0];
        node.precise.unwrap_or_else(|| node.value.data()[0].as_f64())
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` root with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    // ---------------------------------------------------------------- ops

    /// 2-D cross-correlation with stride 1 and symmetric zero padding.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, pad: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 4 {
            return Err(mismatch("conv2d", "input [N,C,H,W]", &xs));
        }
        if ws.len() != 4 || ws[1] != xs[1] {
            return Err(mismatch(
                "conv2d",
                format!("weight [F,{},kh,kw]", xs[1]),
                &ws,
            ));
        }
        if bs != [ws[0]] {
            return Err(mismatch("conv2d", format!("bias [{}]", ws[0]), &bs));
        }
        let geom = ConvGeom::new(&xs, &ws, pad)?;
        let mut out = vec![E::zero(); geom.n * geom.f * geom.out_hw()];
        let mut cols = vec![E::zero(); geom.ckk() * geom.out_hw()];
        {
            let x = self.value(input).data();
            let w = self.value(weight).data();
            let b = self.value(bias).data();
            for n in 0..geom.n {
                geom.im2col(&x[n * geom.in_len()..(n + 1) * geom.in_len()], &mut cols);
                let dst = &mut out[n * geom.out_len()..(n + 1) * geom.out_len()];
                let ohw = geom.out_hw();
                for (f, row) in dst.chunks_exact_mut(ohw).enumerate() {
                    row.fill(b[f]);
                }
                E::gemm(
                    geom.f,
                    geom.ckk(),
                    ohw,
                    E::one(),
                    w,
                    geom.ckk(),
                    1,
                    &cols,
                    ohw,
                    1,
                    E::one(),
                    dst,
                    ohw,
                    1,
                );
            }
        }
        let rg = self.needs(&[input, weight, bias]);
        let value = Tensor::new(vec![geom.n, geom.f, geom.oh, geom.ow], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                pad,
            },
            rg,
        ))
    }

    /// Training-mode batch norm over `[N,C,H,W]`: normalises with the batch's
    /// per-channel statistics and returns them for running-average updates.
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats<E>)> {
        let (n, c, hw) = self.check_bn(input, gamma, beta)?;
        let count = n * hw;
        if count < 2 {
            return Err(TensorError::InvalidArgument(format!(
                "batch_norm_train needs at least 2 values per channel, got {count}"
            )));
        }
        let x = self.value(input).data();
        let mut mean = vec![E::zero(); c];
        let mut var = vec![E::zero(); c];
        let mut inv_std = vec![E::zero(); c];
        for ch in 0..c {
            let mut s = 0.0f64;
            for b in 0..n {
                let base = (b * c + ch) * hw;
                s += x[base..base + hw].iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let m = s / count as f64;
            let mut sq = 0.0f64;
            for b in 0..n {
                let base = (b * c + ch) * hw;
                sq += x[base..base + hw]
                    .iter()
                    .map(|v| {
                        let d = v.as_f64() - m;
                        d * d
                    })
                    .sum::<f64>();
            }
            let v = sq / count as f64;
            mean[ch] = E::from_f64_lossy(m);
            var[ch] = E::from_f64_lossy(v);
            inv_std[ch] = E::from_f64_lossy(1.0 / (v + eps).sqrt());
        }
        let var_out = self.bn_apply(input, gamma, beta, mean.clone(), inv_std, true)?;
        Ok((var_out, BatchStats { mean, var, count }))
    }

    /// Inference-mode batch norm with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[E],
        running_var: &[E],
        eps: f64,
    ) -> Result<Var> {
        let (_, c, _) = self.check_bn(input, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(mismatch(
                "batch_norm_eval",
                format!("running stats of length {c}"),
                &[running_mean.len(), running_var.len()],
            ));
        }
        let inv_std = running_var
            .iter()
            .map(|v| E::from_f64_lossy(1.0 / (v.as_f64() + eps).sqrt()))
            .collect();
        self.bn_apply(input, gamma, beta, running_mean.to_vec(), inv_std, false)
    }

    fn check_bn(&self, input: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let xs = self.shape(input);
        if xs.len() != 4 {
            return Err(mismatch("batch_norm", "input [N,C,H,W]", xs));
        }
        let c = xs[1];
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(mismatch("batch_norm", format!("affine [{c}]"), self.shape(p)));
            }
        }
        Ok((xs[0], c, xs[2] * xs[3]))
    }

    fn bn_apply(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<E>,
        inv_std: Vec<E>,
        batch_stats: bool,
    ) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let (c, hw) = (shape[1], shape[2] * shape[3]);
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![E::zero(); x.len()];
        for (i, (o, chunk)) in out.chunks_exact_mut(hw).zip(x.chunks_exact(hw)).enumerate() {
            let ch = i % c;
            let scale = g[ch] * inv_std[ch];
            let shift = bt[ch] - mean[ch] * scale;
            for (o, v) in o.iter_mut().zip(chunk) {
                *o = *v * scale + shift;
            }
        }
        let rg = self.needs(&[input, gamma, beta]);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let t = self.value(input);
        let value = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|v| v.max(E::zero())).collect(),
        )
        .expect("same shape");
        let rg = self.needs(&[input]);
        self.push(value, Op::Relu(input), rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let t = self.value(input);
        let value = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|v| sigmoid(*v)).collect(),
        )
        .expect("same shape");
        let rg = self.needs(&[input]);
        self.push(value, Op::Sigmoid(input), rg)
    }

    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(mismatch("maxpool2", "input [N,C,H,W]", &xs));
        }
        let (h, w) = (xs[2], xs[3]);
        if h < 2 || w < 2 {
            return Err(TensorError::PoolTooSmall {
                op: "maxpool2",
                dim: h.min(w),
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let planes = xs[0] * xs[1];
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xo;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * w + 2 * xo + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.needs(&[input]);
        let value = Tensor::new(vec![xs[0], xs[1], oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool2 { input, argmax }, rg))
    }

    /// `input [N,D] x weight[O,D]^T + bias[O]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 {
            return Err(mismatch("linear", "input [N,D]", &xs));
        }
        if ws.len() != 2 || ws[1] != xs[1] {
            return Err(mismatch("linear", format!("weight [O,{}]", xs[1]), &ws));
        }
        if self.shape(bias) != [ws[0]] {
            return Err(mismatch("linear", format!("bias [{}]", ws[0]), self.shape(bias)));
        }
        let (n, d, o) = (xs[0], xs[1], ws[0]);
        let b = self.value(bias).data();
        let mut out = Vec::with_capacity(n * o);
        for _ in 0..n {
            out.extend_from_slice(b);
        }
        E::gemm(
            n,
            d,
            o,
            E::one(),
            self.value(input).data(),
            d,
            1,
            self.value(weight).data(),
            1,
            d,
            E::one(),
            &mut out,
            o,
            1,
        );
        let rg = self.needs(&[input, weight, bias]);
        let value = Tensor::new(vec![n, o], out)?;
        Ok(self.push(
            value,
            Op::Linear {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::Reshape(input), rg))
    }

    /// Collapses everything after the batch dimension.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        let n = s[0];
        let rest = s[1..].iter().product();
        self.reshape(input, &[n, rest])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(
                "add",
                format!("{:?}", self.shape(a)),
                self.shape(b),
            ));
        }
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Element-wise product with broadcasting over size-1 dimensions of
    /// same-rank operands.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = Broadcast::new(self.shape(a), self.shape(b))?;
        let da = self.value(a).data();
        let db = self.value(b).data();
        let mut out = Vec::with_capacity(bc.numel());
        bc.for_each(|_, ia, ib| out.push(da[ia] * db[ib]));
        let value = Tensor::new(bc.out_shape.clone(), out)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `[2N, ...] -> [N, ...]` with `out[i] = x[i] + x[i + N]`.
    pub fn fold_halves(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.is_empty() || s[0] % 2 != 0 {
            return Err(mismatch("fold_halves", "even leading dimension", &s));
        }
        let x = self.value(input).data();
        let half = x.len() / 2;
        let data = x[..half]
            .iter()
            .zip(&x[half..])
            .map(|(p, q)| *p + *q)
            .collect();
        let mut shape = s;
        shape[0] /= 2;
        let rg = self.needs(&[input]);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::FoldHalves(input), rg))
    }

    /// Stacks two tensors along the leading dimension.
    pub fn concat_batch(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa.is_empty() || sa[1..] != sb[1..] {
            return Err(mismatch("concat_batch", format!("[*, {:?}]", &sa[1..]), sb));
        }
        let mut shape = sa.to_vec();
        shape[0] += sb[0];
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let rg = self.needs(&[a, b]);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::ConcatBatch(a, b), rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s: f64 = self.value(input).data().iter().map(|v| v.as_f64()).sum();
        let rg = self.needs(&[input]);
        let v = self.push(Tensor::scalar(E::from_f64_lossy(s)), Op::Sum(input), rg);
        self.nodes[v.0].precise = Some(s);
        v
    }

    /// Mean (optionally class-weighted) negative log-likelihood of `labels`
    /// under a row-wise softmax of `logits [N, classes]`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        class_weights: Option<&[E]>,
    ) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(mismatch(
                "softmax_cross_entropy",
                format!("logits [{}, classes]", labels.len()),
                &s,
            ));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(w) = class_weights {
            if w.len() != k {
                return Err(mismatch("softmax_cross_entropy", format!("{k} class weights"), &[w.len()]));
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::LabelOutOfRange {
                label: bad,
                classes: k,
            });
        }
        let x = self.value(logits).data();
        let mut probs = vec![E::zero(); n * k];
        let mut sample_weights = Vec::with_capacity(n);
        let mut loss = 0.0f64;
        let mut total = 0.0f64;
        for (i, &label) in labels.iter().enumerate() {
            let row = &x[i * k..(i + 1) * k];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let z: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
            let log_z = max + z.ln();
            for (p, v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = E::from_f64_lossy((v.as_f64() - log_z).exp());
            }
            let w = class_weights.map_or(1.0, |w| w[label].as_f64());
            loss += w * (log_z - row[label].as_f64());
            total += w;
            sample_weights.push(E::from_f64_lossy(w));
        }
        if total <= 0.0 {
            return Err(TensorError::InvalidArgument(
                "class weights sum to zero over the batch".into(),
            ));
        }
        let rg = self.needs(&[logits]);
        let v = self.push(
            Tensor::scalar(E::from_f64_lossy(loss / total)),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                sample_weights,
                total_weight: E::from_f64_lossy(total),
            },
            rg,
        );
        self.nodes[v.0].precise = Some(loss / total);
        Ok(v)
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar root. Gradients are kept on the graph and
    /// read back with [`Graph::grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(mismatch("backward", "scalar root", self.shape(root)));
        }
        let mut grads: Vec<Option<Vec<E>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![E::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else {
                continue;
            };
            self.backward_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, i: usize, gy: &[E], grads: &mut [Option<Vec<E>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                pad,
            } => self.conv_backward(*input, *weight, *bias, *pad, gy, grads),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => self.bn_backward(*input, *gamma, *beta, mean, inv_std, *batch_stats, gy, grads),
            Op::Relu(x) => {
                if let Some(gx) = self.slot(*x, grads) {
                    for ((g, y), v) in gx.iter_mut().zip(gy).zip(node.value.data()) {
                        if *v > E::zero() {
                            *g = *g + *y;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.slot(*x, grads) {
                    for ((g, y), s) in gx.iter_mut().zip(gy).zip(node.value.data()) {
                        *g = *g + *y * *s * (E::one() - *s);
                    }
                }
            }
            Op::MaxPool2 { input, argmax } => {
                if let Some(gx) = self.slot(*input, grads) {
                    for (y, &idx) in gy.iter().zip(argmax) {
                        gx[idx] = gx[idx] + *y;
                    }
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => self.linear_backward(*input, *weight, *bias, gy, grads),
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(*x, grads) {
                    add_into(gx, gy);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(g) = self.slot(v, grads) {
                        add_into(g, gy);
                    }
                }
            }
            Op::Mul(a, b) => {
                let bc = Broadcast::new(self.shape(*a), self.shape(*b)).expect("checked in forward");
                let da = self.value(*a).data();
                let db = self.value(*b).data();
                if let Some(ga) = self.slot(*a, grads) {
                    bc.for_each(|o, ia, ib| ga[ia] = ga[ia] + gy[o] * db[ib]);
                }
                if let Some(gb) = self.slot(*b, grads) {
                    bc.for_each(|o, ia, ib| gb[ib] = gb[ib] + gy[o] * da[ia]);
                }
            }
            Op::FoldHalves(x) => {
                if let Some(gx) = self.slot(*x, grads) {
                    let half = gy.len();
                    add_into(&mut gx[..half], gy);
                    add_into(&mut gx[half..], gy);
                }
            }
            Op::ConcatBatch(a, b) => {
                let split = self.value(*a).numel();
                if let Some(ga) = self.slot(*a, grads) {
                    add_into(ga, &gy[..split]);
                }
                if let Some(gb) = self.slot(*b, grads) {
                    add_into(gb, &gy[split..]);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(*x, grads) {
                    for g in gx.iter_mut() {
                        *g = *g + gy[0];
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
                sample_weights,
                total_weight,
            } => {
                if let Some(gx) = self.slot(*logits, grads) {
                    let k = probs.len() / labels.len();
                    for (i, &label) in labels.iter().enumerate() {
                        let scale = gy[0] * sample_weights[i] / *total_weight;
                        for c in 0..k {
                            let onehot = if c == label { E::one() } else { E::zero() };
                            let idx = i * k + c;
                            gx[idx] = gx[idx] + scale * (probs[idx] - onehot);
                        }
                    }
                }
            }
        }
    }

    /// Zero-initialised gradient buffer for `v`, or `None` if it needs none.
    fn slot<'g>(&self, v: Var, grads: &'g mut [Option<Vec<E>>]) -> Option<&'g mut Vec<E>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![E::zero(); len]))
    }

    fn conv_backward(
        &self,
        input: Var,
        weight: Var,
        bias: Var,
        pad: usize,
        gy: &[E],
        grads: &mut [Option<Vec<E>>],
    ) {
        let geom = ConvGeom::new(self.shape(input), self.shape(weight), pad).expect("checked");
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let ohw = geom.out_hw();
        if let Some(gb) = self.slot(bias, grads) {
            for n in 0..geom.n {
                for (f, row) in gy[n * geom.out_len()..(n + 1) * geom.out_len()]
                    .chunks_exact(ohw)
                    .enumerate()
                {
                    let s: f64 = row.iter().map(|v| v.as_f64()).sum();
                    gb[f] = gb[f] + E::from_f64_lossy(s);
                }
            }
        }
        let want_w = self.nodes[weight.0].requires_grad;
        let want_x = self.nodes[input.0].requires_grad;
        if !want_w && !want_x {
            return;
        }
        let mut cols = vec![E::zero(); geom.ckk() * ohw];
        let mut gcols = vec![E::zero(); if want_x { geom.ckk() * ohw } else { 0 }];
        let mut gw_acc = if want_w {
            Some(vec![E::zero(); w.len()])
        } else {
            None
        };
        let mut gx_acc = if want_x {
            Some(vec![E::zero(); x.len()])
        } else {
            None
        };
        for n in 0..geom.n {
            let gyn = &gy[n * geom.out_len()..(n + 1) * geom.out_len()];
            if let Some(gw) = gw_acc.as_mut() {
                geom.im2col(&x[n * geom.in_len()..(n + 1) * geom.in_len()], &mut cols);
                // gw[F, CKK] += gy[F, OHW] * cols^T
                E::gemm(
                    geom.f,
                    ohw,
                    geom.ckk(),
                    E::one(),
                    gyn,
                    ohw,
                    1,
                    &cols,
                    1,
                    ohw,
                    E::one(),
                    gw,
                    geom.ckk(),
                    1,
                );
            }
            if let Some(gx) = gx_acc.as_mut() {
                // gcols[CKK, OHW] = w^T * gy
                E::gemm(
                    geom.ckk(),
                    geom.f,
                    ohw,
                    E::one(),
                    w,
                    1,
                    geom.ckk(),
                    gyn,
                    ohw,
                    1,
                    E::zero(),
                    &mut gcols,
                    ohw,
                    1,
                );
                geom.col2im(&gcols, &mut gx[n * geom.in_len()..(n + 1) * geom.in_len()]);
            }
        }
        if let (Some(acc), Some(gw)) = (gw_acc, self.slot(weight, grads)) {
            add_into(gw, &acc);
        }
        if let (Some(acc), Some(gx)) = (gx_acc, self.slot(input, grads)) {
            add_into(gx, &acc);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_backward(
        &self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[E],
        inv_std: &[E],
        batch_stats: bool,
        gy: &[E],
        grads: &mut [Option<Vec<E>>],
    ) {
        let s = self.shape(input);
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let count = (n * hw) as f64;
        let mut sum_dy = vec![0.0f64; c];
        let mut sum_dy_xhat = vec![0.0f64; c];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                let (m, is) = (mean[ch].as_f64(), inv_std[ch].as_f64());
                for j in base..base + hw {
                    let d = gy[j].as_f64();
                    sum_dy[ch] += d;
                    sum_dy_xhat[ch] += d * (x[j].as_f64() - m) * is;
                }
            }
        }
        if let Some(gg) = self.slot(gamma, grads) {
            for ch in 0..c {
                gg[ch] = gg[ch] + E::from_f64_lossy(sum_dy_xhat[ch]);
            }
        }
        if let Some(gb) = self.slot(beta, grads) {
            for ch in 0..c {
                gb[ch] = gb[ch] + E::from_f64_lossy(sum_dy[ch]);
            }
        }
        if let Some(gx) = self.slot(input, grads) {
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * hw;
                    let (m, is, gm) = (mean[ch].as_f64(), inv_std[ch].as_f64(), g[ch].as_f64());
                    let scale = gm * is;
                    if batch_stats {
                        let mdy = sum_dy[ch] / count;
                        let mdyx = sum_dy_xhat[ch] / count;
                        for j in base..base + hw {
                            let xhat = (x[j].as_f64() - m) * is;
                            let d = scale * (gy[j].as_f64() - mdy - xhat * mdyx);
                            gx[j] = gx[j] + E::from_f64_lossy(d);
                        }
                    } else {
                        let sc = E::from_f64_lossy(scale);
                        for j in base..base + hw {
                            gx[j] = gx[j] + gy[j] * sc;
                        }
                    }
                }
            }
        }
    }

    fn linear_backward(
        &self,
        input: Var,
        weight: Var,
        bias: Var,
        gy: &[E],
        grads: &mut [Option<Vec<E>>],
    ) {
        let xs = self.shape(input);
        let (n, d) = (xs[0], xs[1]);
        let o = self.shape(weight)[0];
        if let Some(gb) = self.slot(bias, grads) {
            for row in gy.chunks_exact(o) {
                add_into(gb, row);
            }
        }
        if let Some(gw) = self.slot(weight, grads) {
            // gw[O, D] += gy^T[O, N] * x[N, D]
            E::gemm(
                o,
                n,
                d,
                E::one(),
                gy,
                1,
                o,
                self.value(input).data(),
                d,
                1,
                E::one(),
                gw,
                d,
                1,
            );
        }
        if let Some(gx) = self.slot(input, grads) {
            // gx[N, D] += gy[N, O] * w[O, D]
            E::gemm(
                n,
                o,
                d,
                E::one(),
                gy,
                o,
                1,
                self.value(weight).data(),
                d,
                1,
                E::one(),
                gx,
                d,
                1,
            );
        }
    }
}

fn add_into<E: Real>(dst: &mut [E], src: &[E]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

pub(crate) fn sigmoid<E: Real>(v: E) -> E {
    if v >= E::zero() {
        E::one() / (E::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (E::one() + e)
    }
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize], pad: usize) -> Result<Self> {
        let (h, w, kh, kw) = (xs[2], xs[3], ws[2], ws[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(mismatch(
                "conv2d",
                format!("padded input at least {kh}x{kw}"),
                xs,
            ));
        }
        Ok(Self {
            n: xs[0],
            c: xs[1],
            h,
            w,
            f: ws[0],
            kh,
            kw,
            pad,
            oh: h + 2 * pad - kh + 1,
            ow: w + 2 * pad - kw + 1,
        })
    }

    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_hw(&self) -> usize {
        self.oh * self.ow
    }

    fn in_len(&self) -> usize {
        self.c * self.h * self.w
    }

    fn out_len(&self) -> usize {
        self.f * self.out_hw()
    }

    /// Valid output-column range `[lo, hi)` for kernel column `j` and the
    /// matching source offset.
    fn x_range(&self, j: usize) -> (usize, usize, isize) {
        let shift = j as isize - self.pad as isize;
        let lo = (-shift).max(0) as usize;
        let hi = ((self.w as isize - shift).min(self.ow as isize)).max(lo as isize) as usize;
        (lo, hi, shift)
    }

    fn im2col<E: Real>(&self, src: &[E], cols: &mut [E]) {
        let ohw = self.out_hw();
        for ci in 0..self.c {
            let plane = &src[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((ci * self.kh + i) * self.kw + j) * ohw;
                    let (lo, hi, shift) = self.x_range(j);
                    for y in 0..self.oh {
                        let dst = &mut cols[row + y * self.ow..row + (y + 1) * self.ow];
                        let sy = y as isize + i as isize - self.pad as isize;
                        if sy < 0 || sy >= self.h as isize || lo >= hi {
                            dst.fill(E::zero());
                            continue;
                        }
                        let srow = &plane[sy as usize * self.w..(sy as usize + 1) * self.w];
                        dst[..lo].fill(E::zero());
                        let s0 = (lo as isize + shift) as usize;
                        dst[lo..hi].copy_from_slice(&srow[s0..s0 + (hi - lo)]);
                        dst[hi..].fill(E::zero());
                    }
                }
            }
        }
    }

    fn col2im<E: Real>(&self, cols: &[E], dst: &mut [E]) {
        let ohw = self.out_hw();
        for ci in 0..self.c {
            let plane = &mut dst[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((ci * self.kh + i) * self.kw + j) * ohw;
                    let (lo, hi, shift) = self.x_range(j);
                    if lo >= hi {
                        continue;
                    }
                    for y in 0..self.oh {
                        let sy = y as isize + i as isize - self.pad as isize;
                        if sy < 0 || sy >= self.h as isize {
                            continue;
                        }
                        let src = &cols[row + y * self.ow + lo..row + y * self.ow + hi];
                        let s0 = (lo as isize + shift) as usize;
                        let drow = &mut plane[sy as usize * self.w + s0..sy as usize * self.w + s0 + (hi - lo)];
                        add_into(drow, src);
                    }
                }
            }
        }
    }
}

/// Index mapping for same-rank broadcasting.
struct Broadcast {
    out_shape: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
}

impl Broadcast {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(mismatch("mul", format!("rank {}", a.len()), b));
        }
        let mut out_shape = Vec::with_capacity(a.len());
        for (&x, &y) in a.iter().zip(b) {
            if x != y && x != 1 && y != 1 {
                return Err(mismatch("mul", format!("broadcastable with {a:?}"), b));
            }
            out_shape.push(x.max(y));
        }
        let strides = |s: &[usize]| {
            let mut st = vec![0; s.len()];
            let mut acc = 1;
            for d in (0..s.len()).rev() {
                st[d] = if s[d] == 1 { 0 } else { acc };
                acc *= s[d];
            }
            st
        };
        Ok(Self {
            a_strides: strides(a),
            b_strides: strides(b),
            out_shape,
        })
    }

    fn numel(&self) -> usize {
        self.out_shape.iter().product()
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let rank = self.out_shape.len();
        let total = self.numel();
        let mut idx = vec![0usize; rank];
        let (mut ia, mut ib) = (0usize, 0usize);
        for o in 0..total {
            f(o, ia, ib);
            for d in (0..rank).rev() {
                idx[d] += 1;
                ia += self.a_strides[d];
                ib += self.b_strides[d];
                if idx[d] < self.out_shape[d] {
                    break;
                }
                ia -= self.a_strides[d] * idx[d];
                ib -= self.b_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
    }
}
