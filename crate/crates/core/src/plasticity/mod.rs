//! Plasticity probes (dormant neurons, Fisher trace, effective rank) and the
//! ReDo and Reset interventions.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{Heads, LayerKind, Network, Outgoing, Role};
use crate::autodiff::{Adam, Categorical, Graph, ParamId, Tensor};
use crate::envs::{batch_tensor, Observation};
use crate::error::{Error, Result};

/// Ring buffer of `(observation, task id)` pairs.
#[derive(Clone, Debug)]
pub struct PlasticityBuffer {
    capacity: usize,
    items: Vec<(Observation, usize)>,
    next: usize,
}

impl PlasticityBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("buffer capacity must be positive"));
        }
        Ok(PlasticityBuffer {
            capacity,
            items: Vec::new(),
            next: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, obs: Observation, task: usize) {
        if self.items.len() < self.capacity {
            self.items.push((obs, task));
        } else {
            self.items[self.next] = (obs, task);
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// Oldest to newest.
    pub fn contents(&self) -> Vec<&(Observation, usize)> {
        if self.items.len() < self.capacity {
            self.items.iter().collect()
        } else {
            self.items[self.next..].iter().chain(&self.items[..self.next]).collect()
        }
    }

    /// Up to `n` distinct entries drawn uniformly without replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<(Observation, usize)>> {
        if self.items.is_empty() {
            return Err(Error::State("plasticity buffer is empty".into()));
        }
        let n = n.min(self.items.len());
        Ok(sample(rng, self.items.len(), n).iter().map(|i| self.items[i].clone()).collect())
    }
}

/// `s_i = m_i / mean(m)`, all zero when the layer is silent.
pub fn normalized_activation_scores(mean_abs: &[f64]) -> Vec<f64> {
    let avg = mean_abs.iter().sum::<f64>() / mean_abs.len().max(1) as f64;
    if avg == 0.0 {
        return vec![0.0; mean_abs.len()];
    }
    mean_abs.iter().map(|m| m / avg).collect()
}

/// Mean absolute activation per neuron; conv channels average over the batch
/// and all spatial positions.
pub fn mean_abs_activity(act: &Tensor, kind: LayerKind) -> Vec<f64> {
    let shape = act.shape();
    let b = shape[0];
    let width = shape[1];
    let spatial: usize = match kind {
        LayerKind::Conv => shape[2..].iter().product(),
        LayerKind::Dense => 1,
    };
    let mut out = vec![0.0; width];
    for row in act.data().chunks_exact(width * spatial) {
        for (n, o) in out.iter_mut().enumerate() {
            *o += row[n * spatial..(n + 1) * spatial].iter().map(|v| v.abs()).sum::<f64>();
        }
    }
    let denom = (b * spatial).max(1) as f64;
    out.iter_mut().for_each(|o| *o /= denom);
    out
}

/// Neurons with `s_i ≤ τ` in one hidden layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerDormancy {
    pub layer: usize,
    pub role: Role,
    pub scores: Vec<f64>,
    pub dormant: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DormancyReport {
    pub actor: f64,
    pub critic: f64,
    pub layers: Vec<LayerDormancy>,
}

impl DormancyReport {
    /// Flagged `(layer, neuron)` pairs.
    pub fn flagged(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .flat_map(|l| l.dormant.iter().enumerate().filter(|(_, &d)| d).map(move |(i, _)| (l.layer, i)))
            .collect()
    }
}

/// Fraction of dormant neurons over hidden layers, actor side (trunk and
/// actor heads) and critic side (trunk and critic heads) separately.
pub fn dormancy(net: &Network, batch: &[(Observation, usize)], tau: f64) -> Result<DormancyReport> {
    if batch.is_empty() {
        return Err(Error::State("dormancy needs a non-empty batch".into()));
    }
    let obs = batch_tensor(batch.iter().map(|(o, _)| o));
    let tasks: Vec<usize> = batch.iter().map(|(_, t)| *t).collect();
    let mut g = Graph::new();
    let out = net.forward(&mut g, obs, &tasks, Heads::BOTH)?;
    let mut layers = Vec::new();
    for &(li, var) in &out.probes {
        let layer = &net.layers()[li];
        let scores = normalized_activation_scores(&mean_abs_activity(g.value(var), layer.kind));
        let dormant = scores.iter().map(|&s| s <= tau).collect();
        layers.push(LayerDormancy {
            layer: li,
            role: layer.role,
            scores,
            dormant,
        });
    }
    let ratio = |side: &dyn Fn(Role) -> bool| {
        let (mut d, mut n) = (0usize, 0usize);
        for l in layers.iter().filter(|l| side(l.role)) {
            d += l.dormant.iter().filter(|&&x| x).count();
            n += l.dormant.len();
        }
        if n == 0 {
            0.0
        } else {
            d as f64 / n as f64
        }
    };
    Ok(DormancyReport {
        actor: ratio(&|r| !matches!(r, Role::Critic(_))),
        critic: ratio(&|r| !matches!(r, Role::Actor(_))),
        layers,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FisherReport {
    pub trace: f64,
    pub skipped: usize,
    /// Standard error of the per-sample mean.
    pub std_err: f64,
}

/// Mean squared norm of `∇ log π(a|s)` over all trainable parameters
/// upstream of the logits, with `a` sampled from the policy.
pub fn fisher_trace<R: Rng + ?Sized>(net: &mut Network, batch: &[(Observation, usize)], rng: &mut R) -> Result<FisherReport> {
    if batch.is_empty() {
        return Err(Error::State("fisher trace needs a non-empty batch".into()));
    }
    let ids: Vec<ParamId> = net.policy_params();
    net.store.zero_grads();
    let mut norms = Vec::with_capacity(batch.len());
    let mut skipped = 0;
    for (obs, task) in batch {
        let mut g = Graph::new();
        let out = net.forward(&mut g, obs.tensor(), &[*task], Heads::ACTOR)?;
        let logits = out.groups[0].logits.expect("actor evaluated");
        let dist = Categorical::from_logits(g.value(logits))?;
        let a = dist.sample(0, rng);
        let lp = g.log_prob(logits, &[a], 1.0)?;
        g.backward(lp, &mut net.store)?;
        let mut sq = 0.0;
        for &id in &ids {
            if let Some(gr) = net.store.get(id).grad() {
                sq += gr.iter().map(|x| x * x).sum::<f64>();
            }
        }
        net.store.zero_grads();
        if sq.is_finite() {
            norms.push(sq);
        } else {
            skipped += 1;
        }
    }
    if skipped * 100 > batch.len() {
        log::warn!("fisher trace skipped {skipped} of {} samples with non-finite gradients", batch.len());
    }
    let n = norms.len().max(1) as f64;
    let mean = norms.iter().sum::<f64>() / n;
    let var = norms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok(FisherReport {
        trace: mean,
        skipped,
        std_err: (var / n).sqrt(),
    })
}

/// Smallest `k` whose leading singular values carry at least `1 − δ` of the
/// total; `σ` must be sorted descending.
pub fn srank_from_singular(sigma: &[f64], delta: f64) -> usize {
    let total: f64 = sigma.iter().sum();
    if total <= 0.0 {
        return 0;
    }
    let mut acc = 0.0;
    for (k, s) in sigma.iter().enumerate() {
        acc += s;
        if acc / total >= 1.0 - delta {
            return k + 1;
        }
    }
    sigma.len()
}

pub fn singular_values(m: &Tensor) -> Result<Vec<f64>> {
    let [r, c] = *m.shape() else {
        return Err(Error::config("singular values need a matrix"));
    };
    let mat = DMatrix::from_row_slice(r, c, m.data());
    let svd = mat
        .try_svd(false, false, 1e-14, 10_000)
        .ok_or_else(|| Error::Numeric("SVD did not converge".into()))?;
    let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

pub fn effective_rank(features: &Tensor, delta: f64) -> Result<usize> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::config("effective rank δ must lie in (0, 1)"));
    }
    Ok(srank_from_singular(&singular_values(features)?, delta))
}

/// Shared-trunk features of a buffer batch.
pub fn features_of(net: &Network, batch: &[(Observation, usize)]) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.input(batch_tensor(batch.iter().map(|(o, _)| o)));
    let f = net.extract_features(&mut g, x, &mut Vec::new())?;
    Ok(g.value(f).clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RedoConfig {
    pub tau: f64,
    pub every: u64,
    pub batch: usize,
}

impl Default for RedoConfig {
    fn default() -> Self {
        RedoConfig {
            tau: 0.001,
            every: 5000,
            batch: 1024,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResetConfig {
    pub every: u64,
    pub max_resets: usize,
}

impl Default for ResetConfig {
    fn default() -> Self {
        ResetConfig {
            every: 100_000,
            max_resets: 2,
        }
    }
}

/// Flat entries of a neuron's incoming weights in its layer's kernel.
fn incoming_entries(shape: &[usize], kind: LayerKind, neuron: usize) -> Vec<usize> {
    match kind {
        LayerKind::Dense => {
            let (i, o) = (shape[0], shape[1]);
            (0..i).map(|r| r * o + neuron).collect()
        }
        LayerKind::Conv => {
            let per: usize = shape[1..].iter().product();
            (neuron * per..(neuron + 1) * per).collect()
        }
    }
}

fn outgoing_entries(shape: &[usize], out: Outgoing, neuron: usize) -> Vec<usize> {
    match out {
        Outgoing::ConvChannel(_) => {
            let (k, c) = (shape[0], shape[1]);
            let win: usize = shape[2..].iter().product();
            (0..k)
                .flat_map(|kk| {
                    let base = (kk * c + neuron) * win;
                    base..base + win
                })
                .collect()
        }
        Outgoing::DenseRows { rows_per_neuron, .. } => {
            let o = shape[1];
            (neuron * rows_per_neuron * o..(neuron + 1) * rows_per_neuron * o).collect()
        }
    }
}

/// Re-draw incoming weights, bias and norm parameters of every flagged
/// neuron, zero its outgoing weights and the Adam moments of all touched
/// entries. Returns the flagged set.
pub fn redo_reinit<R: Rng + ?Sized>(
    net: &mut Network,
    adam: &mut Adam,
    report: &DormancyReport,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    let flagged = report.flagged();
    for &(li, n) in &flagged {
        let layer = net.layers()[li].clone();
        let shape = net.store.get(layer.weight).shape().to_vec();
        let inc = incoming_entries(&shape, layer.kind, n);
        net.store.reinit_entries(layer.weight, &inc, rng);
        adam.reset_entries(layer.weight, &inc);
        net.store.reinit_entries(layer.bias, &[n], rng);
        adam.reset_entries(layer.bias, &[n]);
        if let Some((gain, shift)) = layer.norm {
            for p in [gain, shift] {
                net.store.reinit_entries(p, &[n], rng);
                adam.reset_entries(p, &[n]);
            }
        }
        for out in layer.outgoing {
            let p = match out {
                Outgoing::ConvChannel(p) | Outgoing::DenseRows { param: p, .. } => p,
            };
            let shape = net.store.get(p).shape().to_vec();
            let idx = outgoing_entries(&shape, out, n);
            net.store.get_mut(p).update_values(|v| idx.iter().for_each(|&i| v[i] = 0.0));
            adam.reset_entries(p, &idx);
        }
    }
    flagged
}

/// Tracks resets performed and fires at multiples of `every` until
/// `max_resets` is reached.
#[derive(Clone, Debug)]
pub struct ResetSchedule {
    cfg: ResetConfig,
    done: usize,
}

impl ResetSchedule {
    pub fn new(cfg: ResetConfig) -> Self {
        ResetSchedule { cfg, done: 0 }
    }

    pub fn performed(&self) -> usize {
        self.done
    }

    /// Number of events due when the step counter moves `from → to`.
    pub fn due(&self, from: u64, to: u64) -> usize {
        if self.cfg.every == 0 {
            return 0;
        }
        let crossed = (to / self.cfg.every - from / self.cfg.every) as usize;
        crossed.min(self.cfg.max_resets.saturating_sub(self.done))
    }

    /// Re-draw every head parameter and zero its moments.
    pub fn reset_heads<R: Rng + ?Sized>(&mut self, net: &mut Network, adam: &mut Adam, rng: &mut R) -> usize {
        for id in net.head_params() {
            net.store.reinit_all(id, rng);
            adam.reset_param(id);
        }
        self.done += 1;
        self.done
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{ArchKind, ArchitectureSpec};
    use crate::autodiff::AdamConfig;
    use crate::envs::OBS_LEN;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn obs(seed: u8) -> Observation {
        let mut c = [0u8; OBS_LEN];
        for (i, v) in c.iter_mut().enumerate() {
            *v = ((i as u8).wrapping_mul(7).wrapping_add(seed)) % 9;
        }
        Observation::from_codes(c)
    }

    #[test]
    fn score_examples() {
        assert_eq!(normalized_activation_scores(&[2.0, 2.0, 2.0]), vec![1.0; 3]);
        let s = normalized_activation_scores(&[1.0, 1.0, 1.0, 0.0]);
        for (a, b) in s.iter().zip([4.0 / 3.0, 4.0 / 3.0, 4.0 / 3.0, 0.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(normalized_activation_scores(&[0.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn buffer_keeps_most_recent() {
        let mut b = PlasticityBuffer::new(3).unwrap();
        for i in 0..5 {
            b.push(obs(i), i as usize);
        }
        assert_eq!(b.len(), 3);
        let tasks: Vec<usize> = b.contents().iter().map(|(_, t)| *t).collect();
        assert_eq!(tasks, vec![2, 3, 4]);
    }

    #[test]
    fn empty_buffer_is_state_error() {
        let b = PlasticityBuffer::new(3).unwrap();
        assert!(matches!(b.sample(1, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::State(_))));
    }

    #[test]
    fn srank_examples() {
        assert_eq!(srank_from_singular(&[1.0, 0.0, 0.0], 0.5), 1);
        assert_eq!(srank_from_singular(&[1.0; 4], 0.1), 4);
        assert_eq!(srank_from_singular(&[0.7, 0.2, 0.1], 0.01), 3);
        assert_eq!(srank_from_singular(&[0.0, 0.0], 0.01), 0);
    }

    #[test]
    fn reset_schedule_fires_twice() {
        let s = ResetSchedule::new(ResetConfig::default());
        let mut fired = Vec::new();
        let mut sch = s.clone();
        let mut t = 0;
        while t < 400_000 {
            let n = sch.due(t, t + 2000);
            if n > 0 {
                fired.push(t + 2000);
                sch.done += n;
            }
            t += 2000;
        }
        assert_eq!(fired, vec![100_000, 200_000]);
        let never = ResetSchedule::new(ResetConfig { max_resets: 0, ..Default::default() });
        assert_eq!(never.due(0, 1_000_000), 0);
    }

    #[test]
    fn silenced_neuron_is_flagged_and_recycled() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Network::new(ArchitectureSpec::new(ArchKind::Mtppo), 1, &mut rng).unwrap();
        let layer = net.layers().iter().position(|l| l.name == "actor0.0").unwrap();
        let (w, b) = (net.layers()[layer].weight, net.layers()[layer].bias);
        net.store.get_mut(w).update_values(|v| {
            for r in 0..256 {
                v[r * 128 + 5] = 0.0;
            }
        });
        net.store.get_mut(b).update_values(|v| v[5] = 0.0);
        let batch: Vec<_> = (0..16).map(|i| (obs(i), 0)).collect();
        let rep = dormancy(&net, &batch, 0.001).unwrap();
        assert!(rep.flagged().contains(&(layer, 5)));
        let mut adam = Adam::new(AdamConfig::default(), &net.store).unwrap();
        let flagged = redo_reinit(&mut net, &mut adam, &rep, &mut rng);
        assert_eq!(flagged, rep.flagged());
        assert!((0..256).any(|r| net.store.get(w).value().data()[r * 128 + 5] != 0.0));
    }
}
