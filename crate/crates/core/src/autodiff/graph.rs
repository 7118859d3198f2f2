//! Tape-based reverse-mode differentiation at layer granularity.
//!
//! A [`Graph`] records one forward computation. Parameters are not copied onto
//! the tape; ops refer to them by [`ParamId`] and read the [`ParamStore`] on
//! both passes. [`Graph::backward`] may run once per recorded forward.

use super::categorical::log_softmax;
use super::kernels::{self, Activation, ConvDims, DenseDims, LayerNormCache};
use super::mixing;
use super::param::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-row inputs of the clipped surrogate objective.
#[derive(Clone, Debug)]
pub struct SurrogateBatch {
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub clip: f64,
    pub entropy_coef: f64,
    /// Multiplies the per-row sum; `1/B` for a mean over a minibatch of `B`.
    pub weight: f64,
}

enum Op {
    Input,
    Dense { x: Var, w: ParamId, b: Option<ParamId>, dims: DenseDims },
    Conv { x: Var, w: ParamId, b: ParamId, dims: ConvDims },
    LayerNorm { x: Var, gain: ParamId, shift: ParamId, cache: LayerNormCache },
    Act { x: Var, act: Activation },
    Reshape { x: Var },
    GatherRows { x: Var, rows: Vec<usize> },
    Stack { parts: Vec<Var> },
    Orthogonalize { x: Var, kept: Vec<bool> },
    Mix { experts: Var, coeffs: Var },
    WeightedSum { x: Var, weights: Vec<f64> },
    Add { a: Var, b: Var },
    LogProb { logits: Var, actions: Vec<usize>, weight: f64 },
    Surrogate { logits: Var, batch: SurrogateBatch },
    Mse { pred: Var, targets: Vec<f64>, weight: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(delta) {
                *a += b;
            }
        }
        None => *slot = Some(delta.to_vec()),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn dense(&mut self, store: &ParamStore, x: Var, w: ParamId, b: Option<ParamId>) -> Result<Var> {
        let (batch, fan_in) = kernels::matrix_dims(self.value(x))?;
        let (wi, fan_out) = kernels::matrix_dims(store.get(w).value())?;
        if wi != fan_in {
            return Err(Error::config(format!(
                "dense `{}` expects {} inputs, got {}",
                store.info(w).name,
                wi,
                fan_in
            )));
        }
        if let Some(b) = b {
            if store.get(b).numel() != fan_out {
                return Err(Error::config(format!("bias `{}` length mismatch", store.info(b).name)));
            }
        }
        let dims = DenseDims { batch, fan_in, fan_out };
        let y = kernels::dense_fwd(
            self.value(x).data(),
            store.get(w).value().data(),
            b.map(|b| store.get(b).value().data()),
            dims,
        );
        let t = Tensor::new(vec![batch, fan_out], y)?;
        Ok(self.push(t, Op::Dense { x, w, b, dims }))
    }

    pub fn conv2d(&mut self, store: &ParamStore, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let dims = kernels::conv_dims(self.value(x).shape(), store.get(w).shape())?;
        if store.get(b).numel() != dims.out_channels {
            return Err(Error::config("conv bias length differs from output channels"));
        }
        let y = kernels::conv2d_fwd(
            self.value(x).data(),
            store.get(w).value().data(),
            store.get(b).value().data(),
            dims,
        );
        let t = Tensor::new(vec![dims.batch, dims.out_channels, dims.out_h(), dims.out_w()], y)?;
        Ok(self.push(t, Op::Conv { x, w, b, dims }))
    }

    pub fn layer_norm(&mut self, store: &ParamStore, x: Var, gain: ParamId, shift: ParamId, eps: f64) -> Result<Var> {
        let (_, features) = kernels::matrix_dims(self.value(x))?;
        if store.get(gain).numel() != features || store.get(shift).numel() != features {
            return Err(Error::config("layernorm affine parameters must have F entries"));
        }
        let (y, cache) = kernels::layer_norm_fwd(
            self.value(x).data(),
            store.get(gain).value().data(),
            store.get(shift).value().data(),
            features,
            eps,
        );
        let t = Tensor::new(self.value(x).shape().to_vec(), y)?;
        Ok(self.push(t, Op::LayerNorm { x, gain, shift, cache }))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        let y = kernels::activation_fwd(act, self.value(x).data());
        let t = Tensor::new(self.value(x).shape().to_vec(), y).expect("same length");
        self.push(t, Op::Act { x, act })
    }

    /// View `[B, ...]` as `[B, rest]`.
    pub fn flatten(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let b = v.shape()[0];
        let rest = v.numel() / b.max(1);
        let t = v.clone().reshape(vec![b, rest]).expect("same length");
        self.push(t, Op::Reshape { x })
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let b = v.shape()[0];
        if rows.iter().any(|&r| r >= b) {
            return Err(Error::config("row index out of range"));
        }
        let width = v.numel() / b.max(1);
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            data.extend_from_slice(&v.data()[r * width..(r + 1) * width]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = rows.len();
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::GatherRows { x, rows: rows.to_vec() }))
    }

    /// Stack equally shaped `[B, F]` tensors into `[k, B, F]`.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::config("stack needs at least one part"))?;
        let shape = self.value(*first).shape().to_vec();
        let mut data = Vec::with_capacity(shape.iter().product::<usize>() * parts.len());
        for p in parts {
            if self.value(*p).shape() != shape.as_slice() {
                return Err(Error::config("stack parts must share a shape"));
            }
            data.extend_from_slice(self.value(*p).data());
        }
        let mut out_shape = vec![parts.len()];
        out_shape.extend(shape);
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push(t, Op::Stack { parts: parts.to_vec() }))
    }

    pub fn orthogonalize(&mut self, x: Var) -> Result<Var> {
        let [k, b, f] = *self.value(x).shape() else {
            return Err(Error::config("orthogonalize expects [k, B, F]"));
        };
        if k > f {
            return Err(Error::config("orthogonalize needs k <= F"));
        }
        let (y, kept) = mixing::orthogonalize_fwd(self.value(x).data(), k, b, f);
        let t = Tensor::new(vec![k, b, f], y)?;
        Ok(self.push(t, Op::Orthogonalize { x, kept }))
    }

    /// Combine `[k, B, F]` experts with per-row coefficients `[B, k]`.
    pub fn mix(&mut self, experts: Var, coeffs: Var) -> Result<Var> {
        let [k, b, f] = *self.value(experts).shape() else {
            return Err(Error::config("mix expects [k, B, F] experts"));
        };
        if self.value(coeffs).shape() != [b, k] {
            return Err(Error::config("mix coefficients must be [B, k]"));
        }
        let y = mixing::mix_fwd(self.value(experts).data(), self.value(coeffs).data(), k, b, f);
        let t = Tensor::new(vec![b, f], y)?;
        Ok(self.push(t, Op::Mix { experts, coeffs }))
    }

    /// `Σ x ⊙ weights` as a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        if weights.len() != self.value(x).numel() {
            return Err(Error::config("weighted_sum weights length mismatch"));
        }
        let s = self.value(x).data().iter().zip(&weights).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::config("add operands differ in shape"));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add { a, b }))
    }

    pub fn sum_all(&mut self, parts: &[Var]) -> Result<Var> {
        let mut acc = *parts.first().ok_or_else(|| Error::config("empty sum"))?;
        for p in &parts[1..] {
            acc = self.add(acc, *p)?;
        }
        Ok(acc)
    }

    /// `weight · Σ_rows log softmax(logits)[row, action_row]`.
    pub fn log_prob(&mut self, logits: Var, actions: &[usize], weight: f64) -> Result<Var> {
        let a = self.check_logits(logits, actions.len())?;
        if actions.iter().any(|&x| x >= a) {
            return Err(Error::Contract("action out of range".into()));
        }
        let mut s = 0.0;
        for (row, &act) in self.value(logits).data().chunks_exact(a).zip(actions) {
            s += log_softmax(row)[act];
        }
        let t = Tensor::scalar(weight * s);
        Ok(self.push(
            t,
            Op::LogProb {
                logits,
                actions: actions.to_vec(),
                weight,
            },
        ))
    }

    /// Clipped surrogate with entropy bonus, negated for minimization:
    /// `weight · Σ_rows [−min(ρA, clip(ρ)A) − c·H]`.
    pub fn surrogate_loss(&mut self, logits: Var, batch: SurrogateBatch) -> Result<Var> {
        let n = batch.actions.len();
        let a = self.check_logits(logits, n)?;
        if batch.old_log_probs.len() != n || batch.advantages.len() != n {
            return Err(Error::config("surrogate inputs must be aligned"));
        }
        let mut total = 0.0;
        for (r, row) in self.value(logits).data().chunks_exact(a).enumerate() {
            let lp = log_softmax(row);
            let ratio = (lp[batch.actions[r]] - batch.old_log_probs[r]).exp();
            if !ratio.is_finite() {
                return Err(Error::Numeric(format!("non-finite probability ratio at row {r}")));
            }
            let adv = batch.advantages[r];
            let clipped = ratio.clamp(1.0 - batch.clip, 1.0 + batch.clip);
            let surr = (ratio * adv).min(clipped * adv);
            let entropy: f64 = -lp.iter().map(|l| l.exp() * l).sum::<f64>();
            total += -surr - batch.entropy_coef * entropy;
        }
        let t = Tensor::scalar(batch.weight * total);
        Ok(self.push(t, Op::Surrogate { logits, batch }))
    }

    /// `weight · Σ (pred − target)²` over a `[B, 1]` prediction.
    pub fn mse(&mut self, pred: Var, targets: &[f64], weight: f64) -> Result<Var> {
        if self.value(pred).numel() != targets.len() {
            return Err(Error::config("mse inputs must be aligned"));
        }
        let s: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(targets)
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let t = Tensor::scalar(weight * s);
        Ok(self.push(
            t,
            Op::Mse {
                pred,
                targets: targets.to_vec(),
                weight,
            },
        ))
    }

    fn check_logits(&self, logits: Var, rows: usize) -> Result<usize> {
        let [b, a] = *self.value(logits).shape() else {
            return Err(Error::config("logits must be [B, A]"));
        };
        if b != rows {
            return Err(Error::config("one action per logits row required"));
        }
        if !self.value(logits).is_finite() {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        Ok(a)
    }

    /// Propagate `∂root/∂·` to every node and accumulate masked parameter
    /// gradients into `store`.
    pub fn backward(&mut self, root: Var, store: &mut ParamStore) -> Result<()> {
        if self.consumed {
            return Err(Error::State("backward already ran on this graph; re-run forward".into()));
        }
        if self.value(root).numel() != 1 {
            return Err(Error::config("backward root must be a scalar"));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Dense { x, w, b, dims } => {
                    let (dx, dw, db) =
                        kernels::dense_bwd(self.nodes[x.0].value.data(), store.get(*w).value().data(), &dy, *dims);
                    add_into(&mut grads[x.0], &dx);
                    accumulate_param(store, *w, &dw);
                    if let Some(b) = b {
                        accumulate_param(store, *b, &db);
                    }
                }
                Op::Conv { x, w, b, dims } => {
                    let (dx, dw, db) =
                        kernels::conv2d_bwd(self.nodes[x.0].value.data(), store.get(*w).value().data(), &dy, *dims);
                    add_into(&mut grads[x.0], &dx);
                    accumulate_param(store, *w, &dw);
                    accumulate_param(store, *b, &db);
                }
                Op::LayerNorm { x, gain, shift, cache } => {
                    let features = store.get(*gain).numel();
                    let (dx, dg, ds) = kernels::layer_norm_bwd(&dy, store.get(*gain).value().data(), cache, features);
                    add_into(&mut grads[x.0], &dx);
                    accumulate_param(store, *gain, &dg);
                    accumulate_param(store, *shift, &ds);
                }
                Op::Act { x, act } => {
                    let dx = kernels::activation_bwd(*act, self.nodes[x.0].value.data(), node.value.data(), &dy);
                    add_into(&mut grads[x.0], &dx);
                }
                Op::Reshape { x } => add_into(&mut grads[x.0], &dy),
                Op::GatherRows { x, rows } => {
                    let src = &self.nodes[x.0].value;
                    let width = src.numel() / src.shape()[0].max(1);
                    let mut dx = vec![0.0; src.numel()];
                    for (i, &r) in rows.iter().enumerate() {
                        for (d, g) in dx[r * width..(r + 1) * width].iter_mut().zip(&dy[i * width..(i + 1) * width]) {
                            *d += g;
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                }
                Op::Stack { parts } => {
                    let width = dy.len() / parts.len();
                    for (i, p) in parts.iter().enumerate() {
                        add_into(&mut grads[p.0], &dy[i * width..(i + 1) * width]);
                    }
                }
                Op::Orthogonalize { x, kept } => {
                    let [k, b, f] = *node.value.shape() else { unreachable!() };
                    let dx = mixing::orthogonalize_bwd(self.nodes[x.0].value.data(), node.value.data(), kept, &dy, k, b, f);
                    add_into(&mut grads[x.0], &dx);
                }
                Op::Mix { experts, coeffs } => {
                    let [k, b, f] = *self.nodes[experts.0].value.shape() else { unreachable!() };
                    let (de, dc) = mixing::mix_bwd(
                        self.nodes[experts.0].value.data(),
                        self.nodes[coeffs.0].value.data(),
                        &dy,
                        k,
                        b,
                        f,
                    );
                    add_into(&mut grads[experts.0], &de);
                    add_into(&mut grads[coeffs.0], &dc);
                }
                Op::WeightedSum { x, weights } => {
                    let dx: Vec<f64> = weights.iter().map(|w| w * dy[0]).collect();
                    add_into(&mut grads[x.0], &dx);
                }
                Op::Add { a, b } => {
                    add_into(&mut grads[a.0], &dy);
                    add_into(&mut grads[b.0], &dy);
                }
                Op::LogProb { logits, actions, weight } => {
                    let lv = &self.nodes[logits.0].value;
                    let a = lv.shape()[1];
                    let mut dx = vec![0.0; lv.numel()];
                    for ((row, drow), &act) in lv.data().chunks_exact(a).zip(dx.chunks_exact_mut(a)).zip(actions) {
                        let lp = log_softmax(row);
                        for j in 0..a {
                            let ind = if j == act { 1.0 } else { 0.0 };
                            drow[j] = dy[0] * weight * (ind - lp[j].exp());
                        }
                    }
                    add_into(&mut grads[logits.0], &dx);
                }
                Op::Surrogate { logits, batch } => {
                    let lv = &self.nodes[logits.0].value;
                    let a = lv.shape()[1];
                    let mut dx = vec![0.0; lv.numel()];
                    for (r, (row, drow)) in lv.data().chunks_exact(a).zip(dx.chunks_exact_mut(a)).enumerate() {
                        let lp = log_softmax(row);
                        let act = batch.actions[r];
                        let ratio = (lp[act] - batch.old_log_probs[r]).exp();
                        let adv = batch.advantages[r];
                        let clipped = ratio.clamp(1.0 - batch.clip, 1.0 + batch.clip);
                        // d(-surr)/d logp_a; zero when the clipped branch is selected.
                        let dlogp = if ratio * adv <= clipped * adv { -adv * ratio } else { 0.0 };
                        let entropy: f64 = -lp.iter().map(|l| l.exp() * l).sum::<f64>();
                        let scale = dy[0] * batch.weight;
                        for j in 0..a {
                            let p = lp[j].exp();
                            let ind = if j == act { 1.0 } else { 0.0 };
                            let d_ent = batch.entropy_coef * p * (lp[j] + entropy);
                            drow[j] = scale * (dlogp * (ind - p) + d_ent);
                        }
                    }
                    add_into(&mut grads[logits.0], &dx);
                }
                Op::Mse { pred, targets, weight } => {
                    let pv = self.nodes[pred.0].value.data();
                    let dx: Vec<f64> = pv.iter().zip(targets).map(|(p, t)| dy[0] * weight * 2.0 * (p - t)).collect();
                    add_into(&mut grads[pred.0], &dx);
                }
            }
            grads[idx] = Some(dy);
        }
        self.grads = grads;
        Ok(())
    }
}

fn accumulate_param(store: &mut ParamStore, id: ParamId, delta: &[f64]) {
    let p = store.get_mut(id);
    if p.trainable() {
        p.accumulate_grad(delta);
    }
}
