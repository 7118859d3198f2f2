//! PPO pieces: advantage estimation, gradient surgery and the epoch loop.

mod trainer;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use trainer::{EpochRecord, HookConfig, MetricsConfig, RolloutBatch, Trainer, TrainerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub entropy_coef: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub policy_epochs: usize,
    pub critic_epochs: usize,
    pub minibatch: usize,
    pub critic_batch: usize,
    pub steps_per_epoch: usize,
    pub epochs: usize,
    pub eval_episodes: usize,
    pub eval_every: u64,
    /// Greedy (argmax) actions during evaluation; sampled otherwise.
    pub eval_greedy: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            entropy_coef: 0.01,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            policy_epochs: 8,
            critic_epochs: 1,
            minibatch: 256,
            critic_batch: 2000,
            steps_per_epoch: 2000,
            epochs: 60,
            eval_episodes: 10,
            eval_every: 10_000,
            eval_greedy: false,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64, name: &str| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(Error::config(format!("ppo.{name} must lie in (0, 1], got {v}")))
            }
        };
        unit(self.gamma, "gamma")?;
        unit(self.gae_lambda, "gae_lambda")?;
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::config("ppo.clip must lie in (0, 1)"));
        }
        if self.entropy_coef < 0.0 {
            return Err(Error::config("ppo.entropy_coef must be non-negative"));
        }
        if !(self.actor_lr > 0.0) || !(self.critic_lr > 0.0) {
            return Err(Error::config("ppo learning rates must be positive"));
        }
        for (v, name) in [
            (self.policy_epochs, "policy_epochs"),
            (self.critic_epochs, "critic_epochs"),
            (self.minibatch, "minibatch"),
            (self.critic_batch, "critic_batch"),
            (self.steps_per_epoch, "steps_per_epoch"),
            (self.epochs, "epochs"),
            (self.eval_episodes, "eval_episodes"),
        ] {
            if v == 0 {
                return Err(Error::config(format!("ppo.{name} must be positive")));
            }
        }
        if self.eval_every == 0 {
            return Err(Error::config("ppo.eval_every must be positive"));
        }
        Ok(())
    }

    pub fn total_timesteps(&self) -> u64 {
        (self.epochs * self.steps_per_epoch) as u64
    }
}

/// Generalized advantage estimates and value targets. A `done` step neither
/// bootstraps nor passes advantage back across the boundary.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap_value: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(Error::config("gae inputs must be aligned"));
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap_value;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Shift and scale to mean 0, standard deviation 1 (population). Leaves a
/// single entry or a constant slice centred only.
pub fn normalize_advantages(adv: &mut [f64]) {
    let n = adv.len();
    if n == 0 {
        return;
    }
    let mean = adv.iter().sum::<f64>() / n as f64;
    adv.iter_mut().for_each(|a| *a -= mean);
    let mean2 = adv.iter().sum::<f64>() / n as f64;
    adv.iter_mut().for_each(|a| *a -= mean2);
    let std = (adv.iter().map(|a| a * a).sum::<f64>() / n as f64).sqrt();
    if n > 1 && std > 1e-12 {
        adv.iter_mut().for_each(|a| *a /= std);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Project each task gradient off every other task gradient it conflicts
/// with, visiting the others in random order.
pub fn pcgrad_surgery<R: Rng + ?Sized>(grads: &[Vec<f64>], rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let Some(len) = grads.first().map(Vec::len) else {
        return Err(Error::config("pcgrad needs at least one gradient"));
    };
    if grads.iter().any(|g| g.len() != len) {
        return Err(Error::config("pcgrad gradients differ in length"));
    }
    let norms: Vec<f64> = grads.iter().map(|g| dot(g, g)).collect();
    let mut out = Vec::with_capacity(grads.len());
    for (i, gi) in grads.iter().enumerate() {
        let mut g = gi.clone();
        let mut order: Vec<usize> = (0..grads.len()).filter(|&j| j != i).collect();
        order.shuffle(rng);
        for j in order {
            if norms[j] == 0.0 {
                continue;
            }
            let d = dot(&g, &grads[j]);
            if d < 0.0 {
                let c = d / norms[j];
                g.iter_mut().zip(&grads[j]).for_each(|(x, y)| *x -= c * y);
            }
        }
        out.push(g);
    }
    Ok(out)
}

/// Sum of the surgered task gradients.
pub fn pcgrad_project<R: Rng + ?Sized>(grads: &[Vec<f64>], rng: &mut R) -> Result<Vec<f64>> {
    let surgered = pcgrad_surgery(grads, rng)?;
    let mut sum = vec![0.0; surgered[0].len()];
    for g in &surgered {
        sum.iter_mut().zip(g).for_each(|(s, x)| *s += x);
    }
    Ok(sum)
}

/// Clipped surrogate with entropy bonus, as a loss to minimize; matches the
/// graph op and serves as its reference.
pub fn ppo_policy_loss(logp_new: &[f64], logp_old: &[f64], adv: &[f64], clip: f64, entropy: &[f64], coef: f64) -> Result<f64> {
    let n = logp_new.len();
    if logp_old.len() != n || adv.len() != n || entropy.len() != n || n == 0 {
        return Err(Error::config("policy loss inputs must be aligned and non-empty"));
    }
    let mut surr = 0.0;
    for i in 0..n {
        let ratio = (logp_new[i] - logp_old[i]).exp();
        if !ratio.is_finite() {
            return Err(Error::Numeric(format!("non-finite probability ratio at row {i}")));
        }
        surr += (ratio * adv[i]).min(ratio.clamp(1.0 - clip, 1.0 + clip) * adv[i]);
    }
    let h = entropy.iter().sum::<f64>() / n as f64;
    Ok(-surr / n as f64 - coef * h)
}

pub fn critic_loss(pred: &[f64], returns: &[f64]) -> Result<f64> {
    if pred.len() != returns.len() || pred.is_empty() {
        return Err(Error::config("critic loss inputs must be aligned and non-empty"));
    }
    Ok(pred.iter().zip(returns).map(|(p, r)| (p - r).powi(2)).sum::<f64>() / pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gae_examples() {
        let (a, _) = compute_gae(&[1.0], &[0.0], &[true], 5.0, 0.99, 0.95).unwrap();
        assert_eq!(a, vec![1.0]);
        let (a, r) = compute_gae(&[0.0, 1.0], &[0.0, 0.0], &[false, true], 0.0, 1.0, 1.0).unwrap();
        assert_eq!(a, vec![1.0, 1.0]);
        assert_eq!(r, vec![1.0, 1.0]);
    }

    #[test]
    fn gae_lambda_zero_is_td_residual() {
        let r = [0.1, 0.0, 0.5];
        let v = [0.2, 0.3, 0.4];
        let (a, _) = compute_gae(&r, &v, &[false, false, false], 0.7, 0.9, 0.0).unwrap();
        let nv = [0.3, 0.4, 0.7];
        for t in 0..3 {
            assert!((a[t] - (r[t] + 0.9 * nv[t] - v[t])).abs() < 1e-15);
        }
    }

    #[test]
    fn policy_loss_examples() {
        let l = ppo_policy_loss(&[-0.5], &[-0.5], &[2.0], 0.2, &[0.3], 0.01).unwrap();
        assert!((l - (-2.0 - 0.003)).abs() < 1e-12);
        let l = ppo_policy_loss(&[1.5f64.ln()], &[0.0], &[1.0], 0.2, &[0.0], 0.01).unwrap();
        assert!((l + 1.2).abs() < 1e-12);
        let l = ppo_policy_loss(&[0.1, -0.3], &[0.0, 0.0], &[0.0, 0.0], 0.2, &[0.5, 0.7], 0.01).unwrap();
        assert!((l + 0.006).abs() < 1e-12);
    }

    #[test]
    fn critic_loss_examples() {
        assert_eq!(critic_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(critic_loss(&[0.0], &[2.0]).unwrap(), 4.0);
        assert_eq!(critic_loss(&[1.0, 3.0], &[0.0, 0.0]).unwrap(), 5.0);
    }

    #[test]
    fn pcgrad_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = pcgrad_surgery(&[vec![1.0, 0.0], vec![-1.0, 1.0]], &mut rng).unwrap();
        assert!((s[0][0] - 0.5).abs() < 1e-15 && (s[0][1] - 0.5).abs() < 1e-15);
        let sum = pcgrad_project(&[vec![1.0, 2.0], vec![3.0, 0.5]], &mut rng).unwrap();
        assert_eq!(sum, vec![4.0, 2.5]);
        assert_eq!(pcgrad_project(&[vec![1.0, -2.0]], &mut rng).unwrap(), vec![1.0, -2.0]);
    }

    #[test]
    fn pcgrad_skips_zero_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = pcgrad_surgery(&[vec![1.0, 0.0], vec![0.0, 0.0]], &mut rng).unwrap();
        assert_eq!(s[0], vec![1.0, 0.0]);
    }

    #[test]
    fn normalized_advantages() {
        let mut a = vec![1.0, 2.0, 3.0, 10.0];
        normalize_advantages(&mut a);
        let m = a.iter().sum::<f64>() / 4.0;
        let s = (a.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 4.0).sqrt();
        assert!(m.abs() <= 1e-9 && (s - 1.0).abs() <= 1e-6);
    }
}
