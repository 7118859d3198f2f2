use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{compute_gae, normalize_advantages, pcgrad_project, PpoConfig};
use crate::arch::{ArchitectureSpec, Heads, Network};
use crate::autodiff::{Adam, AdamConfig, Categorical, Graph, ParamId, SurrogateBatch, Tensor};
use crate::envs::{batch_tensor, GridEnv, MultiTaskEnv, Observation, TaskContext};
use crate::error::{Error, Result};
use crate::evalstats::normalize_return;
use crate::plasticity::{
    dormancy, effective_rank, features_of, fisher_trace, redo_reinit, PlasticityBuffer, RedoConfig, ResetConfig,
    ResetSchedule,
};
use crate::sparsity::{
    erk_init_masks, gmp_params, gmp_target_sparsity, prune_to_sparsity, report, role_sparsity, set_evolve,
    set_params, GmpConfig, SetConfig,
};

/// Treatment components fired after each update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HookConfig {
    pub gmp: Option<GmpConfig>,
    pub set: Option<SetConfig>,
    pub redo: Option<RedoConfig>,
    pub reset: Option<ResetConfig>,
    pub pcgrad: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub enabled: bool,
    /// Measure every this many epochs; the final epoch is always measured.
    pub every: usize,
    pub dormancy_batch: usize,
    pub fisher_batch: usize,
    pub rank_batch: usize,
    pub tau: f64,
    pub rank_delta: f64,
    pub buffer_capacity: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            enabled: true,
            every: 1,
            dormancy_batch: 1024,
            fisher_batch: 1024,
            rank_batch: 1024,
            tau: 0.001,
            rank_delta: 0.01,
            buffer_capacity: 100_000,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.every == 0 || self.dormancy_batch == 0 || self.fisher_batch == 0 || self.rank_batch == 0 {
            return Err(Error::config("metrics cadence and batch sizes must be positive"));
        }
        if self.buffer_capacity == 0 {
            return Err(Error::config("metrics.buffer_capacity must be positive"));
        }
        if !(self.tau >= 0.0) {
            return Err(Error::config("metrics.tau must be non-negative"));
        }
        if !(self.rank_delta > 0.0 && self.rank_delta < 1.0) {
            return Err(Error::config("metrics.rank_delta must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerConfig {
    pub arch: ArchitectureSpec,
    pub tasks: Vec<TaskContext>,
    pub ppo: PpoConfig,
    pub weight_decay: f64,
    pub hooks: HookConfig,
    pub metrics: MetricsConfig,
    pub seed: u64,
}

/// One epoch of on-policy experience.
#[derive(Clone, Debug, Default)]
pub struct RolloutBatch {
    pub obs: Vec<Observation>,
    pub tasks: Vec<usize>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    pub bootstrap_value: f64,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub timestep: u64,
    /// Mean normalized evaluation return per task.
    pub eval: Option<Vec<f64>>,
    pub sparsity_global: f64,
    pub sparsity_actor: f64,
    pub sparsity_critic: f64,
    pub sparsity_trunk: f64,
    pub fisher_trace: Option<f64>,
    pub effective_rank: Option<usize>,
    pub dormant_actor: Option<f64>,
    pub dormant_critic: Option<f64>,
    /// Mean normalized return of training episodes that ended this epoch.
    pub train_return: Option<f64>,
    pub sparsity_events: usize,
    pub redo_reinitialized: usize,
    pub resets_performed: usize,
}

/// Number of multiples of `every` in `(from, to]`, and their values.
fn crossed(from: u64, to: u64, every: u64) -> impl Iterator<Item = u64> {
    (from / every + 1..=to / every).map(move |m| m * every)
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

pub struct Trainer {
    cfg: TrainerConfig,
    pub net: Network,
    pub adam: Adam,
    env: MultiTaskEnv,
    obs: Observation,
    task: usize,
    episode_return: f64,
    finished: Vec<f64>,
    buffer: Option<PlasticityBuffer>,
    reset: Option<ResetSchedule>,
    sparse_ids: Vec<ParamId>,
    timestep: u64,
    epoch: usize,
    rng_env: ChaCha8Rng,
    rng_act: ChaCha8Rng,
    rng_train: ChaCha8Rng,
    rng_sparse: ChaCha8Rng,
    rng_plastic: ChaCha8Rng,
    rng_eval: ChaCha8Rng,
}

impl Trainer {
    pub fn new(cfg: TrainerConfig) -> Result<Self> {
        cfg.ppo.validate()?;
        cfg.metrics.validate()?;
        if let Some(g) = &cfg.hooks.gmp {
            g.validate()?;
        }
        if let Some(s) = &cfg.hooks.set {
            s.validate()?;
        }
        if cfg.hooks.gmp.is_some() && cfg.hooks.set.is_some() {
            return Err(Error::config("gmp and set cannot be combined"));
        }
        let mut rng_init = rng_stream(cfg.seed, 0);
        let mut net = Network::new(cfg.arch.clone(), cfg.tasks.len(), &mut rng_init)?;
        let mut rng_sparse = rng_stream(cfg.seed, 4);
        let sparse_ids = match (&cfg.hooks.set, &cfg.hooks.gmp) {
            (Some(s), _) => {
                let ids = set_params(&net, s.include_heads);
                erk_init_masks(&mut net.store, &ids, s.sparsity, &mut rng_sparse)?;
                ids
            }
            (None, Some(g)) => gmp_params(&net, g.include_heads),
            (None, None) => gmp_params(&net, true),
        };
        let adam = Adam::new(
            AdamConfig {
                lr: cfg.ppo.actor_lr,
                weight_decay: cfg.weight_decay,
                ..Default::default()
            },
            &net.store,
        )?;
        let mut env = MultiTaskEnv::new(&cfg.tasks)?;
        let mut rng_env = rng_stream(cfg.seed, 1);
        let (task, obs) = env.reset(&mut rng_env);
        let needs_buffer = cfg.metrics.enabled || cfg.hooks.redo.is_some();
        let buffer = needs_buffer.then(|| PlasticityBuffer::new(cfg.metrics.buffer_capacity)).transpose()?;
        let reset = cfg.hooks.reset.clone().map(ResetSchedule::new);
        Ok(Trainer {
            net,
            adam,
            env,
            obs,
            task,
            episode_return: 0.0,
            finished: Vec::new(),
            buffer,
            reset,
            sparse_ids,
            timestep: 0,
            epoch: 0,
            rng_env,
            rng_act: rng_stream(cfg.seed, 2),
            rng_train: rng_stream(cfg.seed, 3),
            rng_sparse,
            rng_plastic: rng_stream(cfg.seed, 5),
            rng_eval: rng_stream(cfg.seed, 6),
            cfg,
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    pub fn timestep(&self) -> u64 {
        self.timestep
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn sparse_ids(&self) -> &[ParamId] {
        &self.sparse_ids
    }

    pub fn buffer(&self) -> Option<&PlasticityBuffer> {
        self.buffer.as_ref()
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.cfg.ppo.epochs
    }

    pub fn collect(&mut self) -> Result<RolloutBatch> {
        let steps = self.cfg.ppo.steps_per_epoch;
        let mut b = RolloutBatch::default();
        for _ in 0..steps {
            let mut g = Graph::new();
            let out = self.net.forward(&mut g, self.obs.tensor(), &[self.task], Heads::BOTH)?;
            let grp = &out.groups[0];
            let dist = Categorical::from_logits(g.value(grp.logits.expect("actor evaluated")))?;
            let action = dist.sample(0, &mut self.rng_act);
            let value = g.value(grp.value.expect("critic evaluated")).data()[0];
            let r = self.env.step(action)?;
            if let Some(buf) = &mut self.buffer {
                buf.push(self.obs.clone(), self.task);
            }
            b.obs.push(std::mem::replace(&mut self.obs, r.observation.clone()));
            b.tasks.push(self.task);
            b.actions.push(action);
            b.log_probs.push(dist.log_prob(0, action));
            b.rewards.push(r.reward);
            b.values.push(value);
            b.dones.push(r.done());
            self.episode_return += r.reward;
            if r.done() {
                let task = &self.cfg.tasks[self.task];
                self.finished.push(normalize_return(self.episode_return, task)?);
                self.episode_return = 0.0;
                let (t, o) = self.env.reset(&mut self.rng_env);
                self.task = t;
                self.obs = o;
            }
        }
        b.bootstrap_value = if b.dones.last() == Some(&true) {
            0.0
        } else {
            let mut g = Graph::new();
            let out = self.net.forward(&mut g, self.obs.tensor(), &[self.task], Heads::CRITIC)?;
            g.value(out.groups[0].value.expect("critic evaluated")).data()[0]
        };
        Ok(b)
    }

    fn surrogate_batch(&self, b: &RolloutBatch, chunk: &[usize], rows: &[usize], adv: &[f64]) -> SurrogateBatch {
        SurrogateBatch {
            actions: rows.iter().map(|&r| b.actions[chunk[r]]).collect(),
            old_log_probs: rows.iter().map(|&r| b.log_probs[chunk[r]]).collect(),
            advantages: rows.iter().map(|&r| adv[r]).collect(),
            clip: self.cfg.ppo.clip,
            entropy_coef: self.cfg.ppo.entropy_coef,
            weight: 1.0 / chunk.len() as f64,
        }
    }

    fn policy_step(&mut self, b: &RolloutBatch, chunk: &[usize], adv: &[f64], ids: &[ParamId]) -> Result<()> {
        let obs = batch_tensor(chunk.iter().map(|&i| &b.obs[i]));
        let tasks: Vec<usize> = chunk.iter().map(|&i| b.tasks[i]).collect();
        let mut g = Graph::new();
        let out = self.net.forward(&mut g, obs, &tasks, Heads::ACTOR)?;
        let mut losses = Vec::with_capacity(out.groups.len());
        for grp in &out.groups {
            let sb = self.surrogate_batch(b, chunk, &grp.rows, adv);
            losses.push(g.surrogate_loss(grp.logits.expect("actor evaluated"), sb)?);
        }
        let total = g.sum_all(&losses)?;
        g.backward(total, &mut self.net.store)?;
        self.adam.set_lr(self.cfg.ppo.actor_lr)?;
        self.adam.step(&mut self.net.store, ids)
    }

    /// Per-task backward passes; shared-parameter gradients are surgered,
    /// head gradients pass through.
    fn pcgrad_step(&mut self, b: &RolloutBatch, chunk: &[usize], adv: &[f64], ids: &[ParamId]) -> Result<()> {
        let shared: Vec<ParamId> = self.net.trunk_params();
        let sizes: Vec<usize> = shared.iter().map(|&id| self.net.store.get(id).numel()).collect();
        let mut task_grads = Vec::new();
        for task in 0..self.cfg.tasks.len() {
            let rows: Vec<usize> = (0..chunk.len()).filter(|&r| b.tasks[chunk[r]] == task).collect();
            if rows.is_empty() {
                continue;
            }
            let sub: Vec<usize> = rows.iter().map(|&r| chunk[r]).collect();
            let obs = batch_tensor(sub.iter().map(|&i| &b.obs[i]));
            let mut g = Graph::new();
            let out = self.net.forward(&mut g, obs, &vec![task; sub.len()], Heads::ACTOR)?;
            let local: Vec<usize> = (0..rows.len()).collect();
            let mut sb = self.surrogate_batch(b, &sub, &local, &rows.iter().map(|&r| adv[r]).collect::<Vec<_>>());
            sb.weight = 1.0 / chunk.len() as f64;
            let loss = g.surrogate_loss(out.groups[0].logits.expect("actor evaluated"), sb)?;
            g.backward(loss, &mut self.net.store)?;
            let mut flat = Vec::with_capacity(sizes.iter().sum());
            for (&id, &n) in shared.iter().zip(&sizes) {
                let p = self.net.store.get_mut(id);
                match p.grad() {
                    Some(gr) => flat.extend_from_slice(gr),
                    None => flat.extend(std::iter::repeat_n(0.0, n)),
                }
                p.zero_grad();
            }
            task_grads.push(flat);
        }
        let merged = pcgrad_project(&task_grads, &mut self.rng_train)?;
        let mut off = 0;
        for (&id, &n) in shared.iter().zip(&sizes) {
            let p = self.net.store.get_mut(id);
            if p.trainable() {
                p.set_grad(merged[off..off + n].to_vec())?;
            }
            off += n;
        }
        self.adam.set_lr(self.cfg.ppo.actor_lr)?;
        self.adam.step(&mut self.net.store, ids)
    }

    fn critic_step(&mut self, b: &RolloutBatch, chunk: &[usize], returns: &[f64], ids: &[ParamId]) -> Result<()> {
        let obs = batch_tensor(chunk.iter().map(|&i| &b.obs[i]));
        let tasks: Vec<usize> = chunk.iter().map(|&i| b.tasks[i]).collect();
        let mut g = Graph::new();
        let out = self.net.forward(&mut g, obs, &tasks, Heads::CRITIC)?;
        let w = 1.0 / chunk.len() as f64;
        let mut losses = Vec::new();
        for grp in &out.groups {
            let targets: Vec<f64> = grp.rows.iter().map(|&r| returns[chunk[r]]).collect();
            losses.push(g.mse(grp.value.expect("critic evaluated"), &targets, w)?);
        }
        let total = g.sum_all(&losses)?;
        g.backward(total, &mut self.net.store)?;
        self.adam.set_lr(self.cfg.ppo.critic_lr)?;
        self.adam.step(&mut self.net.store, ids)
    }

    pub fn update(&mut self, b: &RolloutBatch) -> Result<()> {
        let p = self.cfg.ppo.clone();
        let (adv, returns) = compute_gae(&b.rewards, &b.values, &b.dones, b.bootstrap_value, p.gamma, p.gae_lambda)?;
        let policy_ids = self.net.policy_params();
        let critic_ids = self.net.critic_params();
        let mut idx: Vec<usize> = (0..b.len()).collect();
        for _ in 0..p.policy_epochs {
            idx.shuffle(&mut self.rng_train);
            for chunk in idx.chunks(p.minibatch) {
                let mut a: Vec<f64> = chunk.iter().map(|&i| adv[i]).collect();
                normalize_advantages(&mut a);
                if self.cfg.hooks.pcgrad {
                    self.pcgrad_step(b, chunk, &a, &policy_ids)?;
                } else {
                    self.policy_step(b, chunk, &a, &policy_ids)?;
                }
            }
        }
        for _ in 0..p.critic_epochs {
            idx.shuffle(&mut self.rng_train);
            for chunk in idx.chunks(p.critic_batch) {
                self.critic_step(b, chunk, &returns, &critic_ids)?;
            }
        }
        Ok(())
    }

    fn sample_buffer(&mut self, n: usize) -> Result<Vec<(Observation, usize)>> {
        self.buffer
            .as_ref()
            .ok_or_else(|| Error::State("no plasticity buffer".into()))?
            .sample(n, &mut self.rng_plastic)
    }

    /// Sparsity events, then interventions, for the step window `(from, to]`.
    fn fire_hooks(&mut self, from: u64, to: u64, rec: &mut EpochRecord) -> Result<()> {
        let total = self.cfg.ppo.total_timesteps() as f64;
        if let Some(gmp) = self.cfg.hooks.gmp.clone() {
            for t in crossed(from, to, gmp.prune_every) {
                prune_to_sparsity(&mut self.net.store, &self.sparse_ids, gmp_target_sparsity(t as f64, total, &gmp));
                rec.sparsity_events += 1;
            }
        }
        if let Some(set) = self.cfg.hooks.set.clone() {
            for _ in crossed(from, to, set.evolve_every) {
                set_evolve(
                    &mut self.net.store,
                    Some(&mut self.adam),
                    &self.sparse_ids,
                    set.rewire_fraction,
                    &mut self.rng_sparse,
                );
                rec.sparsity_events += 1;
            }
        }
        if let Some(redo) = self.cfg.hooks.redo.clone() {
            for _ in crossed(from, to, redo.every) {
                let run = |tr: &mut Self| -> Result<usize> {
                    let batch = tr.sample_buffer(redo.batch)?;
                    let rep = dormancy(&tr.net, &batch, redo.tau)?;
                    Ok(redo_reinit(&mut tr.net, &mut tr.adam, &rep, &mut tr.rng_plastic).len())
                };
                rec.redo_reinitialized += run(self).map_err(|e| Error::in_hook("redo", e))?;
            }
        }
        if let Some(mut sched) = self.reset.take() {
            for _ in 0..sched.due(from, to) {
                sched.reset_heads(&mut self.net, &mut self.adam, &mut self.rng_plastic);
            }
            rec.resets_performed = sched.performed();
            self.reset = Some(sched);
        }
        Ok(())
    }

    fn measure(&mut self, rec: &mut EpochRecord) -> Result<()> {
        let m = self.cfg.metrics.clone();
        let batch = self.sample_buffer(m.dormancy_batch)?;
        let d = dormancy(&self.net, &batch, m.tau)?;
        rec.dormant_actor = Some(d.actor);
        rec.dormant_critic = Some(d.critic);
        let batch = self.sample_buffer(m.fisher_batch)?;
        let mut rng = self.rng_plastic.clone();
        let f = fisher_trace(&mut self.net, &batch, &mut rng)?;
        self.rng_plastic = rng;
        rec.fisher_trace = Some(f.trace);
        let batch = self.sample_buffer(m.rank_batch)?;
        let feats = features_of(&self.net, &batch)?;
        rec.effective_rank = Some(effective_rank(&feats, m.rank_delta)?);
        Ok(())
    }

    /// Mean normalized return per task over `eval_episodes` episodes each,
    /// run in lockstep with batched forwards.
    pub fn evaluate(&mut self) -> Result<Vec<f64>> {
        let e = self.cfg.ppo.eval_episodes;
        let mut envs = Vec::new();
        for task in &self.cfg.tasks {
            for _ in 0..e {
                let mut env = GridEnv::new(task.clone());
                let obs = env.reset(&mut self.rng_eval);
                envs.push((env, obs, 0.0f64, true));
            }
        }
        loop {
            let live: Vec<usize> = (0..envs.len()).filter(|&i| envs[i].3).collect();
            if live.is_empty() {
                break;
            }
            let obs = batch_tensor(live.iter().map(|&i| &envs[i].1));
            let tasks: Vec<usize> = live.iter().map(|&i| envs[i].0.task().id).collect();
            let mut g = Graph::new();
            let out = self.net.forward(&mut g, obs, &tasks, Heads::ACTOR)?;
            let rows = out.logits_by_row(&g, live.len());
            let a = rows[0].len();
            let logits = Tensor::new(vec![live.len(), a], rows.concat())?;
            let dist = Categorical::from_logits(&logits)?;
            for (r, &i) in live.iter().enumerate() {
                let act = if self.cfg.ppo.eval_greedy {
                    dist.argmax(r)
                } else {
                    dist.sample(r, &mut self.rng_eval)
                };
                let res = envs[i].0.step(act)?;
                envs[i].2 += res.reward;
                envs[i].1 = res.observation.clone();
                envs[i].3 = !res.done();
            }
        }
        let mut out = Vec::with_capacity(self.cfg.tasks.len());
        for (t, task) in self.cfg.tasks.iter().enumerate() {
            let mut s = 0.0;
            for (_, _, ret, _) in &envs[t * e..(t + 1) * e] {
                s += normalize_return(*ret, task)?;
            }
            out.push(s / e as f64);
        }
        Ok(out)
    }

    /// Collect, update, then run hooks, metrics and evaluation.
    pub fn train_epoch(&mut self) -> Result<EpochRecord> {
        let from = self.timestep;
        let batch = self.collect()?;
        self.update(&batch)?;
        self.timestep += batch.len() as u64;
        self.epoch += 1;
        let to = self.timestep;
        let mut rec = EpochRecord {
            epoch: self.epoch,
            timestep: to,
            eval: None,
            sparsity_global: 0.0,
            sparsity_actor: 0.0,
            sparsity_critic: 0.0,
            sparsity_trunk: 0.0,
            fisher_trace: None,
            effective_rank: None,
            dormant_actor: None,
            dormant_critic: None,
            train_return: None,
            sparsity_events: 0,
            redo_reinitialized: 0,
            resets_performed: self.reset.as_ref().map_or(0, |r| r.performed()),
        };
        self.fire_hooks(from, to, &mut rec)?;
        let rep = report(&self.net.store, &self.sparse_ids);
        let (a, c, t) = role_sparsity(&self.net, &self.sparse_ids);
        rec.sparsity_global = rep.global;
        rec.sparsity_actor = a;
        rec.sparsity_critic = c;
        rec.sparsity_trunk = t;
        let m = &self.cfg.metrics;
        if m.enabled && (self.epoch % m.every == 0 || self.is_finished()) {
            self.measure(&mut rec).map_err(|e| Error::in_hook("metrics", e))?;
        }
        if crossed(from, to, self.cfg.ppo.eval_every).next().is_some() {
            rec.eval = Some(self.evaluate().map_err(|e| Error::in_hook("eval", e))?);
        }
        if !self.finished.is_empty() {
            rec.train_return = Some(self.finished.iter().sum::<f64>() / self.finished.len() as f64);
            self.finished.clear();
        }
        Ok(rec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ArchKind;
    use crate::envs::resolve_tasks;

    fn small(hooks: HookConfig) -> TrainerConfig {
        TrainerConfig {
            arch: ArchitectureSpec { hidden: 16, ..ArchitectureSpec::new(ArchKind::Mtppo) },
            tasks: resolve_tasks("MT2").unwrap(),
            ppo: PpoConfig {
                steps_per_epoch: 200,
                minibatch: 64,
                critic_batch: 200,
                policy_epochs: 2,
                epochs: 3,
                eval_episodes: 2,
                eval_every: 400,
                ..Default::default()
            },
            weight_decay: 0.0,
            hooks,
            metrics: MetricsConfig {
                dormancy_batch: 64,
                fisher_batch: 16,
                rank_batch: 64,
                ..Default::default()
            },
            seed: 5,
        }
    }

    #[test]
    fn crossed_counts_multiples() {
        assert_eq!(crossed(0, 2000, 500).count(), 4);
        assert_eq!(crossed(2000, 4000, 10_000).count(), 0);
        assert_eq!(crossed(8000, 10_000, 10_000).collect::<Vec<_>>(), vec![10_000]);
    }

    #[test]
    fn epochs_run_and_log() {
        let mut tr = Trainer::new(small(HookConfig::default())).unwrap();
        let r1 = tr.train_epoch().unwrap();
        assert_eq!(r1.timestep, 200);
        assert!(r1.eval.is_none());
        assert!(r1.fisher_trace.is_some());
        let r2 = tr.train_epoch().unwrap();
        assert!(r2.eval.is_some());
        assert_eq!(r2.sparsity_global, 0.0);
    }

    #[test]
    fn gmp_fires_per_crossed_multiple() {
        let hooks = HookConfig {
            gmp: Some(GmpConfig { prune_every: 50, ..Default::default() }),
            ..Default::default()
        };
        let mut tr = Trainer::new(small(hooks)).unwrap();
        let r = tr.train_epoch().unwrap();
        assert_eq!(r.sparsity_events, 4);
    }

    #[test]
    fn pcgrad_and_set_run() {
        let hooks = HookConfig {
            set: Some(SetConfig { evolve_every: 200, ..Default::default() }),
            pcgrad: true,
            ..Default::default()
        };
        let mut tr = Trainer::new(small(hooks)).unwrap();
        let before = report(&tr.net.store, tr.sparse_ids()).active();
        tr.train_epoch().unwrap();
        assert_eq!(report(&tr.net.store, tr.sparse_ids()).active(), before);
    }

    #[test]
    fn same_seed_same_records() {
        let run = || {
            let mut tr = Trainer::new(small(HookConfig::default())).unwrap();
            (0..2).map(|_| tr.train_epoch().unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
