//! Multi-task actor-critic networks: a shared conv trunk, optional expert
//! mixture (plain or orthogonalized), and one actor and one critic head per
//! task.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Graph, ParamId, ParamKind, ParamStore, Tensor, Var, LAYER_NORM_EPS};
use crate::envs::{NUM_ACTIONS, OBS_CHANNELS, VIEW};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Mtppo,
    Moe,
    Moore,
}

impl ArchKind {
    pub fn uses_experts(self) -> bool {
        !matches!(self, ArchKind::Mtppo)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub kind: ArchKind,
    /// Expert count; ignored by `mtppo`.
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_channels")]
    pub conv_channels: Vec<usize>,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    /// LayerNorm before the activation of every hidden dense layer.
    #[serde(default)]
    pub layer_norm: bool,
}

fn default_hidden() -> usize {
    128
}
fn default_channels() -> Vec<usize> {
    vec![16, 32, 64]
}
fn default_kernel() -> usize {
    2
}

impl ArchitectureSpec {
    pub fn new(kind: ArchKind) -> Self {
        ArchitectureSpec {
            kind,
            k: None,
            hidden: default_hidden(),
            conv_channels: default_channels(),
            kernel: default_kernel(),
            layer_norm: false,
        }
    }

    /// Expert count, falling back to 2 for up to three tasks and 3 above.
    pub fn experts(&self, num_tasks: usize) -> usize {
        self.k.unwrap_or(if num_tasks <= 3 { 2 } else { 3 })
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.kernel == 0 || self.conv_channels.is_empty() {
            return Err(Error::config("architecture extents must be positive"));
        }
        if self.conv_channels.contains(&0) {
            return Err(Error::config("conv channels must be positive"));
        }
        if self.conv_channels.len() * (self.kernel - 1) >= VIEW {
            return Err(Error::config("conv stack shrinks the view below one cell"));
        }
        if self.kind.uses_experts() && self.k == Some(0) {
            return Err(Error::config("k must be at least 1 for moe/moore"));
        }
        Ok(())
    }

    pub fn feature_side(&self) -> usize {
        VIEW - self.conv_channels.len() * (self.kernel - 1)
    }

    /// Width of the flattened conv output.
    pub fn feature_dim(&self) -> usize {
        self.conv_channels.last().copied().unwrap_or(0) * self.feature_side().pow(2)
    }
}

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Trunk,
    Actor(usize),
    Critic(usize),
}

impl Role {
    pub fn is_head(self) -> bool {
        !matches!(self, Role::Trunk)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Dense,
}

/// Where a hidden layer's neurons feed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outgoing {
    /// Input channel of a `[K, C, kh, kw]` conv kernel.
    ConvChannel(ParamId),
    /// Consecutive input rows of an `[I, O]` dense weight, `rows_per_neuron`
    /// per neuron.
    DenseRows { param: ParamId, rows_per_neuron: usize },
}

/// A hidden layer whose post-activation output is probed for dormancy and
/// can be recycled.
#[derive(Clone, Debug)]
pub struct HiddenLayer {
    pub name: String,
    pub kind: LayerKind,
    pub role: Role,
    pub weight: ParamId,
    pub bias: ParamId,
    pub norm: Option<(ParamId, ParamId)>,
    pub activation: Activation,
    pub width: usize,
    pub outgoing: Vec<Outgoing>,
}

#[derive(Clone, Debug)]
struct Head {
    hidden: usize,
    out_w: ParamId,
    out_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Network {
    spec: ArchitectureSpec,
    num_tasks: usize,
    pub store: ParamStore,
    roles: Vec<Role>,
    layers: Vec<HiddenLayer>,
    conv: Vec<usize>,
    experts: Vec<Vec<usize>>,
    encoder: Option<ParamId>,
    actor: Vec<Head>,
    critic: Vec<Head>,
}

/// Which heads a forward pass evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Heads {
    pub actor: bool,
    pub critic: bool,
}

impl Heads {
    pub const BOTH: Heads = Heads { actor: true, critic: true };
    pub const ACTOR: Heads = Heads { actor: true, critic: false };
    pub const CRITIC: Heads = Heads { actor: false, critic: true };
}

/// Rows of one task within a batch and the head outputs for them.
#[derive(Clone, Debug)]
pub struct TaskGroup {
    pub task: usize,
    pub rows: Vec<usize>,
    pub logits: Option<Var>,
    pub value: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct ForwardOut {
    /// Flattened conv output `[B, F]`.
    pub features: Var,
    pub groups: Vec<TaskGroup>,
    /// Post-activation output of hidden layer `i` and the batch rows it
    /// covers (head layers only see their own task's rows).
    pub probes: Vec<(usize, Var)>,
}

impl ForwardOut {
    /// Per-row logits `[B, A]` reassembled in batch order.
    pub fn logits_by_row(&self, g: &Graph, batch: usize) -> Vec<Vec<f64>> {
        self.scatter(g, batch, |grp| grp.logits)
    }

    pub fn values_by_row(&self, g: &Graph, batch: usize) -> Vec<f64> {
        self.scatter(g, batch, |grp| grp.value).into_iter().map(|v| v[0]).collect()
    }

    fn scatter(&self, g: &Graph, batch: usize, pick: impl Fn(&TaskGroup) -> Option<Var>) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::new(); batch];
        for grp in &self.groups {
            let Some(v) = pick(grp) else { continue };
            let t = g.value(v);
            let w = t.numel() / grp.rows.len().max(1);
            for (i, &r) in grp.rows.iter().enumerate() {
                out[r] = t.data()[i * w..(i + 1) * w].to_vec();
            }
        }
        out
    }
}

/// Single-task outputs as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput {
    pub logits: Tensor,
    pub value: Tensor,
    pub features: Tensor,
}

impl Network {
    pub fn new<R: Rng + ?Sized>(spec: ArchitectureSpec, num_tasks: usize, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        if num_tasks == 0 {
            return Err(Error::config("at least one task required"));
        }
        let mut net = Network {
            spec: spec.clone(),
            num_tasks,
            store: ParamStore::new(),
            roles: Vec::new(),
            layers: Vec::new(),
            conv: Vec::new(),
            experts: Vec::new(),
            encoder: None,
            actor: Vec::new(),
            critic: Vec::new(),
        };
        let kk = spec.kernel;
        let mut c_in = OBS_CHANNELS;
        let n_conv = spec.conv_channels.len();
        for (i, &c_out) in spec.conv_channels.iter().enumerate() {
            let fan_in = c_in * kk * kk;
            let w = net.param(format!("conv{i}.w"), ParamKind::ConvWeight, vec![c_out, c_in, kk, kk], fan_in, Role::Trunk, rng);
            let b = net.param(format!("conv{i}.b"), ParamKind::Bias, vec![c_out], fan_in, Role::Trunk, rng);
            let act = if i + 1 == n_conv { Activation::Tanh } else { Activation::Relu };
            net.conv.push(net.layers.len());
            net.layers.push(HiddenLayer {
                name: format!("conv{i}"),
                kind: LayerKind::Conv,
                role: Role::Trunk,
                weight: w,
                bias: b,
                norm: None,
                activation: act,
                width: c_out,
                outgoing: Vec::new(),
            });
            c_in = c_out;
        }
        let feat = spec.feature_dim();
        let side2 = spec.feature_side().pow(2);
        let h = spec.hidden;
        let mut head_in = feat;
        if spec.kind.uses_experts() {
            let k = spec.experts(num_tasks);
            if k > h {
                return Err(Error::config("orthogonalization needs k <= hidden size"));
            }
            for e in 0..k {
                let l0 = net.dense_layer(format!("expert{e}.0"), feat, h, Role::Trunk, rng);
                let l1 = net.dense_layer(format!("expert{e}.1"), h, h, Role::Trunk, rng);
                net.experts.push(vec![l0, l1]);
            }
            let enc = net.param("encoder.w".into(), ParamKind::EncoderWeight, vec![num_tasks, k], num_tasks, Role::Trunk, rng);
            net.encoder = Some(enc);
            head_in = h;
        }
        for t in 0..num_tasks {
            let hid = net.dense_layer(format!("actor{t}.0"), head_in, h, Role::Actor(t), rng);
            let out_w = net.param(format!("actor{t}.out.w"), ParamKind::DenseWeight, vec![h, NUM_ACTIONS], h, Role::Actor(t), rng);
            let out_b = net.param(format!("actor{t}.out.b"), ParamKind::Bias, vec![NUM_ACTIONS], h, Role::Actor(t), rng);
            net.actor.push(Head { hidden: hid, out_w, out_b });
            let hid = net.dense_layer(format!("critic{t}.0"), head_in, h, Role::Critic(t), rng);
            let out_w = net.param(format!("critic{t}.out.w"), ParamKind::DenseWeight, vec![h, 1], h, Role::Critic(t), rng);
            let out_b = net.param(format!("critic{t}.out.b"), ParamKind::Bias, vec![1], h, Role::Critic(t), rng);
            net.critic.push(Head { hidden: hid, out_w, out_b });
        }
        net.wire_outgoing(side2);
        Ok(net)
    }

    fn param<R: Rng + ?Sized>(
        &mut self,
        name: String,
        kind: ParamKind,
        shape: Vec<usize>,
        fan_in: usize,
        role: Role,
        rng: &mut R,
    ) -> ParamId {
        self.roles.push(role);
        self.store.init(name, kind, shape, fan_in, rng)
    }

    fn dense_layer<R: Rng + ?Sized>(&mut self, name: String, i: usize, o: usize, role: Role, rng: &mut R) -> usize {
        let w = self.param(format!("{name}.w"), ParamKind::DenseWeight, vec![i, o], i, role, rng);
        let b = self.param(format!("{name}.b"), ParamKind::Bias, vec![o], i, role, rng);
        let norm = self.spec.layer_norm.then(|| {
            let g = self.param(format!("{name}.ln.gain"), ParamKind::NormGain, vec![o], o, role, rng);
            let s = self.param(format!("{name}.ln.shift"), ParamKind::NormShift, vec![o], o, role, rng);
            (g, s)
        });
        self.layers.push(HiddenLayer {
            name,
            kind: LayerKind::Dense,
            role,
            weight: w,
            bias: b,
            norm,
            activation: Activation::Tanh,
            width: o,
            outgoing: Vec::new(),
        });
        self.layers.len() - 1
    }

    fn wire_outgoing(&mut self, side2: usize) {
        let head_hidden_w: Vec<ParamId> = self
            .actor
            .iter()
            .chain(&self.critic)
            .map(|hd| self.layers[hd.hidden].weight)
            .collect();
        for (i, &li) in self.conv.iter().enumerate() {
            let out = if let Some(&next) = self.conv.get(i + 1) {
                vec![Outgoing::ConvChannel(self.layers[next].weight)]
            } else if !self.experts.is_empty() {
                self.experts
                    .iter()
                    .map(|e| Outgoing::DenseRows { param: self.layers[e[0]].weight, rows_per_neuron: side2 })
                    .collect()
            } else {
                head_hidden_w.iter().map(|&p| Outgoing::DenseRows { param: p, rows_per_neuron: side2 }).collect()
            };
            self.layers[li].outgoing = out;
        }
        for e in &self.experts {
            let out = vec![Outgoing::DenseRows { param: self.layers[e[1]].weight, rows_per_neuron: 1 }];
            self.layers[e[0]].outgoing = out;
            // Expert outputs are mixed before the heads, so the head rows are
            // shared by every expert and are left alone.
        }
        for hd in self.actor.iter().chain(&self.critic) {
            self.layers[hd.hidden].outgoing = vec![Outgoing::DenseRows { param: hd.out_w, rows_per_neuron: 1 }];
        }
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    pub fn role(&self, id: ParamId) -> Role {
        self.roles[id.index()]
    }

    pub fn layers(&self) -> &[HiddenLayer] {
        &self.layers
    }

    pub fn encoder(&self) -> Option<ParamId> {
        self.encoder
    }

    /// Parameters updated by the policy loss: trunk and actor heads.
    pub fn policy_params(&self) -> Vec<ParamId> {
        self.store.ids().filter(|&id| !matches!(self.role(id), Role::Critic(_))).collect()
    }

    /// Parameters updated by the value loss: trunk and critic heads.
    pub fn critic_params(&self) -> Vec<ParamId> {
        self.store.ids().filter(|&id| !matches!(self.role(id), Role::Actor(_))).collect()
    }

    pub fn trunk_params(&self) -> Vec<ParamId> {
        self.store.ids().filter(|&id| self.role(id) == Role::Trunk).collect()
    }

    pub fn head_params(&self) -> Vec<ParamId> {
        self.store.ids().filter(|&id| self.role(id).is_head()).collect()
    }

    /// Conv stack on `[B, 3, V, V]`, flattened to `[B, F]`.
    pub fn extract_features(&self, g: &mut Graph, obs: Var, probes: &mut Vec<(usize, Var)>) -> Result<Var> {
        let shape = g.value(obs).shape().to_vec();
        if shape.len() != 4 || shape[1..] != [OBS_CHANNELS, VIEW, VIEW] {
            return Err(Error::config(format!("observation batch must be [B, 3, {VIEW}, {VIEW}], got {shape:?}")));
        }
        let mut x = obs;
        for &li in &self.conv {
            let l = &self.layers[li];
            x = g.conv2d(&self.store, x, l.weight, l.bias)?;
            x = g.activation(x, l.activation);
            probes.push((li, x));
        }
        Ok(g.flatten(x))
    }

    fn dense_stage(&self, g: &mut Graph, x: Var, li: usize, probes: &mut Vec<(usize, Var)>) -> Result<Var> {
        let l = &self.layers[li];
        let mut y = g.dense(&self.store, x, l.weight, Some(l.bias))?;
        if let Some((gain, shift)) = l.norm {
            y = g.layer_norm(&self.store, y, gain, shift, LAYER_NORM_EPS)?;
        }
        let y = g.activation(y, l.activation);
        probes.push((li, y));
        Ok(y)
    }

    /// Encoder coefficients `[B, k]` for per-row task ids.
    pub fn encode_tasks(&self, g: &mut Graph, tasks: &[usize]) -> Result<Var> {
        let enc = self.encoder.ok_or_else(|| Error::config("architecture has no task encoder"))?;
        let t = self.num_tasks;
        let mut onehot = vec![0.0; tasks.len() * t];
        for (r, &task) in tasks.iter().enumerate() {
            onehot[r * t + task] = 1.0;
        }
        let x = g.input(Tensor::new(vec![tasks.len(), t], onehot)?);
        g.dense(&self.store, x, enc, None)
    }

    pub fn forward(&self, g: &mut Graph, obs: Tensor, tasks: &[usize], heads: Heads) -> Result<ForwardOut> {
        let batch = obs.shape().first().copied().unwrap_or(0);
        if tasks.len() != batch {
            return Err(Error::config("one task id per observation required"));
        }
        if let Some(&bad) = tasks.iter().find(|&&t| t >= self.num_tasks) {
            return Err(Error::config(format!("unknown task id {bad} (network has {} tasks)", self.num_tasks)));
        }
        let mut probes = Vec::new();
        let x = g.input(obs);
        let features = self.extract_features(g, x, &mut probes)?;
        let rep = if self.experts.is_empty() {
            features
        } else {
            let mut outs = Vec::with_capacity(self.experts.len());
            for e in &self.experts {
                let mut y = features;
                for &li in e {
                    y = self.dense_stage(g, y, li, &mut probes)?;
                }
                outs.push(y);
            }
            let mut stacked = g.stack(&outs)?;
            if self.spec.kind == ArchKind::Moore {
                stacked = g.orthogonalize(stacked)?;
            }
            let coeffs = self.encode_tasks(g, tasks)?;
            g.mix(stacked, coeffs)?
        };
        let mut groups = Vec::new();
        for task in 0..self.num_tasks {
            let rows: Vec<usize> = (0..batch).filter(|&r| tasks[r] == task).collect();
            if rows.is_empty() {
                continue;
            }
            let sub = if rows.len() == batch { rep } else { g.gather_rows(rep, &rows)? };
            let mut grp = TaskGroup { task, rows, logits: None, value: None };
            if heads.actor {
                let hd = &self.actor[task];
                let h = self.dense_stage(g, sub, hd.hidden, &mut probes)?;
                grp.logits = Some(g.dense(&self.store, h, hd.out_w, Some(hd.out_b))?);
            }
            if heads.critic {
                let hd = &self.critic[task];
                let h = self.dense_stage(g, sub, hd.hidden, &mut probes)?;
                grp.value = Some(g.dense(&self.store, h, hd.out_w, Some(hd.out_b))?);
            }
            groups.push(grp);
        }
        Ok(ForwardOut { features, groups, probes })
    }

    /// Logits, value and features for a batch drawn from a single task.
    pub fn act_and_value(&self, obs: Tensor, task: usize) -> Result<PolicyOutput> {
        let b = obs.shape().first().copied().unwrap_or(0);
        let mut g = Graph::new();
        let out = self.forward(&mut g, obs, &vec![task; b], Heads::BOTH)?;
        let grp = &out.groups[0];
        Ok(PolicyOutput {
            logits: g.value(grp.logits.expect("actor evaluated")).clone(),
            value: g.value(grp.value.expect("critic evaluated")).clone(),
            features: g.value(out.features).clone(),
        })
    }

    /// Batch rows covered by a probe of layer `li`.
    pub fn probe_rows(&self, li: usize, tasks: &[usize]) -> Vec<usize> {
        match self.layers[li].role {
            Role::Trunk => (0..tasks.len()).collect(),
            Role::Actor(t) | Role::Critic(t) => (0..tasks.len()).filter(|&r| tasks[r] == t).collect(),
        }
    }
}

/// Closed-form trainable parameter count of an `mtppo` network without
/// LayerNorm.
pub fn mtppo_param_count(spec: &ArchitectureSpec, num_tasks: usize) -> usize {
    let kk = spec.kernel * spec.kernel;
    let mut c_in = OBS_CHANNELS;
    let mut conv = 0;
    for &c in &spec.conv_channels {
        conv += c * c_in * kk + c;
        c_in = c;
    }
    let f = spec.feature_dim();
    let h = spec.hidden;
    let actor = f * h + h + h * NUM_ACTIONS + NUM_ACTIONS;
    let critic = f * h + h + h + 1;
    conv + num_tasks * (actor + critic)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Adam;
    use crate::autodiff::AdamConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    fn random_obs(b: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let n = b * OBS_CHANNELS * VIEW * VIEW;
        Tensor::new(vec![b, OBS_CHANNELS, VIEW, VIEW], (0..n).map(|_| rng.random_range(0..9) as f64).collect()).unwrap()
    }

    #[test]
    fn feature_width() {
        assert_eq!(ArchitectureSpec::new(ArchKind::Mtppo).feature_dim(), 256);
    }

    #[test]
    fn mtppo_count_matches_closed_form() {
        let spec = ArchitectureSpec::new(ArchKind::Mtppo);
        let net = Network::new(spec.clone(), 2, &mut rng()).unwrap();
        assert_eq!(net.store.trainable_count(), mtppo_param_count(&spec, 2));
        assert_eq!(mtppo_param_count(&spec, 2), 144_192);
    }

    #[test]
    fn zero_obs_features_are_finite_and_rows_identical() {
        let net = Network::new(ArchitectureSpec::new(ArchKind::Mtppo), 2, &mut rng()).unwrap();
        let out = net.act_and_value(Tensor::zeros(vec![2, 3, 5, 5]), 0).unwrap();
        assert!(out.features.is_finite());
        assert_eq!(out.features.row(0), out.features.row(1));
        assert_eq!(out.value.shape(), &[2, 1]);
        assert_eq!(out.logits.shape(), &[2, NUM_ACTIONS]);
    }

    #[test]
    fn tasks_share_features_but_not_logits() {
        let mut r = rng();
        let net = Network::new(ArchitectureSpec::new(ArchKind::Mtppo), 2, &mut r).unwrap();
        let obs = random_obs(1, &mut r);
        let a = net.act_and_value(obs.clone(), 0).unwrap();
        let b = net.act_and_value(obs, 1).unwrap();
        assert_eq!(a.features, b.features);
        assert_ne!(a.logits, b.logits);
    }

    #[test]
    fn unknown_task_is_config_error() {
        let net = Network::new(ArchitectureSpec::new(ArchKind::Mtppo), 2, &mut rng()).unwrap();
        assert!(matches!(net.act_and_value(Tensor::zeros(vec![1, 3, 5, 5]), 2), Err(Error::Config(_))));
    }

    #[test]
    fn wrong_extent_is_config_error() {
        let net = Network::new(ArchitectureSpec::new(ArchKind::Mtppo), 1, &mut rng()).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(vec![1, 3, 4, 4]));
        assert!(matches!(net.extract_features(&mut g, x, &mut Vec::new()), Err(Error::Config(_))));
    }

    #[test]
    fn encoder_selects_task_row_and_only_that_row_learns() {
        let mut r = rng();
        let spec = ArchitectureSpec { k: Some(2), ..ArchitectureSpec::new(ArchKind::Moe) };
        let mut net = Network::new(spec, 3, &mut r).unwrap();
        let enc = net.encoder().unwrap();
        let before = net.store.get(enc).value().clone();
        let mut g = Graph::new();
        let c = net.encode_tasks(&mut g, &[1]).unwrap();
        assert_eq!(g.value(c).data(), before.row(1));

        let obs = random_obs(4, &mut r);
        let mut g = Graph::new();
        let out = net.forward(&mut g, obs, &[1, 1, 1, 1], Heads::ACTOR).unwrap();
        let logits = out.groups[0].logits.unwrap();
        let loss = g.log_prob(logits, &[0, 1, 2, 3], 1.0).unwrap();
        g.backward(loss, &mut net.store).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &net.store).unwrap();
        adam.step(&mut net.store, &[enc]).unwrap();
        let after = net.store.get(enc).value();
        assert_eq!(after.row(0), before.row(0));
        assert_eq!(after.row(2), before.row(2));
        assert_ne!(after.row(1), before.row(1));
    }

    #[test]
    fn moore_expert_outputs_are_orthogonal() {
        let mut r = rng();
        let spec = ArchitectureSpec { k: Some(3), ..ArchitectureSpec::new(ArchKind::Moore) };
        let net = Network::new(spec, 2, &mut r).unwrap();
        let mut g = Graph::new();
        let mut probes = Vec::new();
        let x = g.input(random_obs(6, &mut r));
        let f = net.extract_features(&mut g, x, &mut probes).unwrap();
        let outs: Vec<Var> = net
            .experts
            .iter()
            .map(|e| {
                let y = net.dense_stage(&mut g, f, e[0], &mut probes).unwrap();
                net.dense_stage(&mut g, y, e[1], &mut probes).unwrap()
            })
            .collect();
        let s = g.stack(&outs).unwrap();
        let o = g.orthogonalize(s).unwrap();
        let d = g.value(o).data();
        let (b, fw) = (6, 128);
        for row in 0..b {
            for i in 0..3 {
                for j in 0..i {
                    let vi = &d[(i * b + row) * fw..(i * b + row + 1) * fw];
                    let vj = &d[(j * b + row) * fw..(j * b + row + 1) * fw];
                    let dot: f64 = vi.iter().zip(vj).map(|(a, c)| a * c).sum();
                    assert!(dot.abs() <= 1e-6, "dot {dot}");
                }
            }
        }
    }

    #[test]
    fn moe_with_one_expert_is_mtppo_plus_a_linear_stage() {
        // With k = 1 the mix scales the single expert output by the task's
        // encoder weight; a head reading that equals a head reading the raw
        // expert output with its hidden weights scaled by the same factor.
        let mut r = rng();
        let spec = ArchitectureSpec { k: Some(1), ..ArchitectureSpec::new(ArchKind::Moe) };
        let net = Network::new(spec, 1, &mut r).unwrap();
        let obs = random_obs(3, &mut r);
        let out = net.act_and_value(obs.clone(), 0).unwrap();

        let coef = net.store.get(net.encoder().unwrap()).value().data()[0];
        let mut g = Graph::new();
        let mut probes = Vec::new();
        let x = g.input(obs);
        let f = net.extract_features(&mut g, x, &mut probes).unwrap();
        let y = net.dense_stage(&mut g, f, net.experts[0][0], &mut probes).unwrap();
        let y = net.dense_stage(&mut g, y, net.experts[0][1], &mut probes).unwrap();
        let hd = &net.actor[0];
        let hl = &net.layers[hd.hidden];
        let mut store = net.store.clone();
        store.get_mut(hl.weight).update_values(|v| v.iter_mut().for_each(|w| *w *= coef));
        let h = g.dense(&store, y, hl.weight, Some(hl.bias)).unwrap();
        let h = g.activation(h, Activation::Tanh);
        let logits = g.dense(&store, h, hd.out_w, Some(hd.out_b)).unwrap();
        for (a, b) in g.value(logits).data().iter().zip(out.logits.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mixed_task_batch_matches_per_task_forwards() {
        let mut r = rng();
        let net = Network::new(ArchitectureSpec { k: Some(2), ..ArchitectureSpec::new(ArchKind::Moore) }, 2, &mut r).unwrap();
        let obs = random_obs(4, &mut r);
        let tasks = [0, 1, 1, 0];
        let mut g = Graph::new();
        let out = net.forward(&mut g, obs.clone(), &tasks, Heads::BOTH).unwrap();
        let logits = out.logits_by_row(&g, 4);
        for (row, &t) in tasks.iter().enumerate() {
            let single = Tensor::new(vec![1, 3, 5, 5], obs.data()[row * 75..(row + 1) * 75].to_vec()).unwrap();
            let p = net.act_and_value(single, t).unwrap();
            for (a, b) in p.logits.data().iter().zip(&logits[row]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn roles_partition_params() {
        let net = Network::new(ArchitectureSpec::new(ArchKind::Moe), 3, &mut rng()).unwrap();
        let p = net.policy_params().len();
        let c = net.critic_params().len();
        let t = net.trunk_params().len();
        assert_eq!(p + c - t, net.store.len());
    }
}
