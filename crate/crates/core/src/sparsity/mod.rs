//! Gradual magnitude pruning and sparse evolutionary training over masked
//! parameters.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{Network, Role};
use crate::autodiff::{Adam, ParamId, ParamKind, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmpConfig {
    pub final_sparsity: f64,
    pub prune_every: u64,
    /// Schedule start and end as fractions of the run's total timesteps.
    pub start_fraction: f64,
    pub end_fraction: f64,
    pub include_heads: bool,
}

impl Default for GmpConfig {
    fn default() -> Self {
        GmpConfig {
            final_sparsity: 0.95,
            prune_every: 500,
            start_fraction: 0.05,
            end_fraction: 0.8,
            include_heads: true,
        }
    }
}

impl GmpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.final_sparsity > 0.0 && self.final_sparsity < 1.0) {
            return Err(Error::config("gmp.final_sparsity must lie in (0, 1)"));
        }
        if self.prune_every == 0 {
            return Err(Error::config("gmp.prune_every must be positive"));
        }
        if !(0.0 <= self.start_fraction && self.start_fraction < self.end_fraction && self.end_fraction <= 1.0) {
            return Err(Error::config("gmp schedule needs 0 <= start_fraction < end_fraction <= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SetConfig {
    pub sparsity: f64,
    pub rewire_fraction: f64,
    /// ERK density parameter; the global sparsity target takes precedence,
    /// so this is carried for bookkeeping only.
    pub erk_density: f64,
    pub evolve_every: u64,
    pub include_heads: bool,
}

impl Default for SetConfig {
    fn default() -> Self {
        SetConfig {
            sparsity: 0.95,
            rewire_fraction: 0.3,
            erk_density: 11.0,
            evolve_every: 2000,
            include_heads: true,
        }
    }
}

impl SetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sparsity > 0.0 && self.sparsity < 1.0) {
            return Err(Error::config("set.sparsity must lie in (0, 1)"));
        }
        if !(self.rewire_fraction > 0.0 && self.rewire_fraction < 1.0) {
            return Err(Error::config("set.rewire_fraction must lie in (0, 1)"));
        }
        if self.evolve_every == 0 {
            return Err(Error::config("set.evolve_every must be positive"));
        }
        Ok(())
    }
}

/// Cubic sparsity ramp at timestep `t` of a `total`-step run.
pub fn gmp_target_sparsity(t: f64, total: f64, cfg: &GmpConfig) -> f64 {
    let start = cfg.start_fraction * total;
    let end = cfg.end_fraction * total;
    if t < start {
        0.0
    } else if t >= end {
        cfg.final_sparsity
    } else {
        let frac = (t - start) / (end - start);
        cfg.final_sparsity * (1.0 - (1.0 - frac).powi(3))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub nonzero: usize,
    pub total: usize,
    pub density: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub layers: Vec<LayerReport>,
    pub global: f64,
    /// Set when a request could not be honoured as asked.
    pub warning: Option<String>,
}

impl SparsityReport {
    pub fn active(&self) -> usize {
        self.layers.iter().map(|l| l.nonzero).sum()
    }

    pub fn total(&self) -> usize {
        self.layers.iter().map(|l| l.total).sum()
    }
}

/// Counts mask entries, so a weight that happens to be exactly zero but is
/// unmasked still counts as a connection.
pub fn report(store: &ParamStore, ids: &[ParamId]) -> SparsityReport {
    let layers: Vec<LayerReport> = ids
        .iter()
        .map(|&id| {
            let p = store.get(id);
            let nonzero = p.active_count();
            LayerReport {
                name: store.info(id).name.clone(),
                nonzero,
                total: p.numel(),
                density: nonzero as f64 / p.numel().max(1) as f64,
            }
        })
        .collect();
    let total: usize = layers.iter().map(|l| l.total).sum();
    let active: usize = layers.iter().map(|l| l.nonzero).sum();
    let global = if total == 0 { 0.0 } else { 1.0 - active as f64 / total as f64 };
    SparsityReport { layers, global, warning: None }
}

/// Weights eligible for magnitude pruning: conv and dense kernels, the task
/// encoder excluded.
pub fn gmp_params(net: &Network, include_heads: bool) -> Vec<ParamId> {
    net.store
        .ids()
        .filter(|&id| matches!(net.store.info(id).kind, ParamKind::ConvWeight | ParamKind::DenseWeight))
        .filter(|&id| include_heads || !net.role(id).is_head())
        .collect()
}

/// Weights under sparse evolutionary training: dense kernels only.
pub fn set_params(net: &Network, include_heads: bool) -> Vec<ParamId> {
    net.store
        .ids()
        .filter(|&id| net.store.info(id).kind == ParamKind::DenseWeight)
        .filter(|&id| include_heads || !net.role(id).is_head())
        .collect()
}

/// Sparsity of the actor-head, critic-head and trunk subsets of `ids`.
pub fn role_sparsity(net: &Network, ids: &[ParamId]) -> (f64, f64, f64) {
    let of = |pred: &dyn Fn(Role) -> bool| {
        let sub: Vec<ParamId> = ids.iter().copied().filter(|&id| pred(net.role(id))).collect();
        report(&net.store, &sub).global
    };
    (
        of(&|r| matches!(r, Role::Actor(_))),
        of(&|r| matches!(r, Role::Critic(_))),
        of(&|r| r == Role::Trunk),
    )
}

/// Entries masked at sparsity `target` of `total`: the largest count not
/// exceeding the target.
pub fn masked_count(target: f64, total: usize) -> usize {
    ((target * total as f64) + 1e-9).floor().min(total as f64) as usize
}

/// Mask the smallest-magnitude active entries across `ids` jointly until
/// `masked_count(target)` entries are masked. Ties go to the lower flat index
/// (parameters concatenated in `ids` order). Never unmasks.
pub fn prune_to_sparsity(store: &mut ParamStore, ids: &[ParamId], target: f64) -> SparsityReport {
    let before = report(store, ids);
    let total = before.total();
    let want = masked_count(target, total);
    let have = total - before.active();
    if want < have {
        let msg = format!("target sparsity {target} is below the current {:.6}; nothing pruned", before.global);
        log::warn!("{msg}");
        return SparsityReport { warning: Some(msg), ..before };
    }
    let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity(before.active());
    for (slot, &id) in ids.iter().enumerate() {
        let p = store.get(id);
        for (i, (&v, &m)) in p.value().data().iter().zip(p.mask().data()).enumerate() {
            if m != 0.0 {
                cands.push((v.abs(), slot, i));
            }
        }
    }
    let n = want - have;
    if n > 0 && n < cands.len() {
        cands.select_nth_unstable_by(n - 1, |a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    }
    let mut per: Vec<Vec<usize>> = vec![Vec::new(); ids.len()];
    for &(_, slot, i) in cands.iter().take(n) {
        per[slot].push(i);
    }
    for (slot, idx) in per.into_iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        store.get_mut(ids[slot]).edit(|_, mask| {
            for i in idx {
                mask[i] = 0.0;
            }
        });
    }
    report(store, ids)
}

/// Shape summary of a weight for density allocation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
    pub numel: usize,
}

impl LayerShape {
    fn ratio(&self) -> f64 {
        (self.fan_in + self.fan_out) as f64 / (self.fan_in * self.fan_out) as f64
    }
}

pub fn layer_shape(store: &ParamStore, id: ParamId) -> LayerShape {
    let shape = store.get(id).shape();
    let numel = store.get(id).numel();
    let fan_out = shape[0];
    let fan_in = numel / fan_out.max(1);
    // Dense kernels are [I, O]; conv kernels are [K, C, kh, kw].
    if store.info(id).kind == ParamKind::DenseWeight {
        LayerShape { fan_in: shape[0], fan_out: shape[1], numel }
    } else {
        LayerShape { fan_in, fan_out, numel }
    }
}

/// Per-layer densities `min(1, c·ratio)` with `c` chosen by bisection so the
/// expected kept count equals `(1 − s)·N`.
pub fn erk_densities(layers: &[LayerShape], s: f64) -> Result<Vec<f64>> {
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::config(format!("ERK sparsity must lie in (0, 1), got {s}")));
    }
    if layers.is_empty() || layers.iter().any(|l| l.numel == 0 || l.fan_in == 0 || l.fan_out == 0) {
        return Err(Error::config("ERK needs non-empty layers"));
    }
    let total: f64 = layers.iter().map(|l| l.numel as f64).sum();
    let goal = (1.0 - s) * total;
    let kept = |c: f64| -> f64 { layers.iter().map(|l| (c * l.ratio()).min(1.0) * l.numel as f64).sum() };
    let mut lo = 0.0;
    let mut hi = 1.0;
    while kept(hi) < goal {
        hi *= 2.0;
        if hi > 1e300 {
            return Err(Error::config("ERK allocation is infeasible"));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if kept(mid) < goal {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(layers.iter().map(|l| (hi * l.ratio()).min(1.0)).collect())
}

/// Integer kept counts summing to `N − masked_count(s, N)`, by largest
/// remainder on the ERK expectations.
pub fn erk_counts(layers: &[LayerShape], s: f64) -> Result<Vec<usize>> {
    let dens = erk_densities(layers, s)?;
    let total: usize = layers.iter().map(|l| l.numel).sum();
    let goal = total - masked_count(s, total);
    let exact: Vec<f64> = dens.iter().zip(layers).map(|(d, l)| d * l.numel as f64).collect();
    let mut counts: Vec<usize> = exact.iter().zip(layers).map(|(e, l)| (e.floor() as usize).min(l.numel)).collect();
    let mut short = goal as i64 - counts.iter().sum::<usize>() as i64;
    let mut order: Vec<usize> = (0..layers.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    while short > 0 {
        let mut moved = false;
        for &i in &order {
            if short == 0 {
                break;
            }
            if counts[i] < layers[i].numel {
                counts[i] += 1;
                short -= 1;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
    while short < 0 {
        for &i in order.iter().rev() {
            if short == 0 {
                break;
            }
            if counts[i] > 0 {
                counts[i] -= 1;
                short += 1;
            }
        }
    }
    Ok(counts)
}

/// Random ERK masks: kept positions drawn uniformly without replacement per
/// layer.
pub fn erk_init_masks<R: Rng + ?Sized>(store: &mut ParamStore, ids: &[ParamId], s: f64, rng: &mut R) -> Result<SparsityReport> {
    let shapes: Vec<LayerShape> = ids.iter().map(|&id| layer_shape(store, id)).collect();
    let counts = erk_counts(&shapes, s)?;
    for (&id, (&keep, shape)) in ids.iter().zip(counts.iter().zip(&shapes)) {
        let chosen = sample(rng, shape.numel, keep);
        store.get_mut(id).edit(|_, mask| {
            mask.fill(0.0);
            for i in chosen.iter() {
                mask[i] = 1.0;
            }
        });
    }
    Ok(report(store, ids))
}

/// One prune-and-regrow step per layer. The regrow pool is the set of slots
/// inactive before pruning, so nothing pruned here comes straight back; when
/// that pool is smaller than the prune count both are capped to it.
pub fn set_evolve<R: Rng + ?Sized>(
    store: &mut ParamStore,
    adam: Option<&mut Adam>,
    ids: &[ParamId],
    fraction: f64,
    rng: &mut R,
) -> SparsityReport {
    let mut adam = adam;
    let mut capped = Vec::new();
    for &id in ids {
        let p = store.get(id);
        let mask = p.mask().data();
        let mut active: Vec<(f64, usize)> = Vec::new();
        let mut pool: Vec<usize> = Vec::new();
        for (i, (&v, &m)) in p.value().data().iter().zip(mask).enumerate() {
            if m != 0.0 {
                active.push((v.abs(), i));
            } else {
                pool.push(i);
            }
        }
        let wanted = (fraction * active.len() as f64).floor() as usize;
        let n = wanted.min(pool.len());
        if n < wanted {
            capped.push(format!("{}: {wanted} -> {n}", store.info(id).name));
        }
        if n == 0 {
            continue;
        }
        active.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let pruned: Vec<usize> = active[..n].iter().map(|&(_, i)| i).collect();
        let grown: Vec<usize> = sample(rng, pool.len(), n).iter().map(|j| pool[j]).collect();
        store.get_mut(id).edit(|_, mask| {
            for &i in &pruned {
                mask[i] = 0.0;
            }
            for &i in &grown {
                mask[i] = 1.0;
            }
        });
        store.reinit_entries(id, &grown, rng);
        if let Some(a) = adam.as_deref_mut() {
            a.reset_entries(id, &pruned);
            a.reset_entries(id, &grown);
        }
    }
    let mut rep = report(store, ids);
    if !capped.is_empty() {
        let msg = format!("regrowth capped by free slots: {}", capped.join(", "));
        log::info!("{msg}");
        rep.warning = Some(msg);
    }
    rep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{MaskedParam, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_of(vals: &[&[f64]]) -> (ParamStore, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = vals
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let t = Tensor::new(vec![1, v.len()], v.to_vec()).unwrap();
                s.insert(format!("w{i}"), ParamKind::DenseWeight, 1, MaskedParam::dense(t))
            })
            .collect();
        (s, ids)
    }

    #[test]
    fn schedule_boundaries() {
        let cfg = GmpConfig::default();
        let t = 1000.0;
        assert_eq!(gmp_target_sparsity(50.0, t, &cfg), 0.0);
        assert_eq!(gmp_target_sparsity(800.0, t, &cfg), 0.95);
        assert!((gmp_target_sparsity(425.0, t, &cfg) - 0.83125).abs() < 1e-12);
        assert_eq!(gmp_target_sparsity(0.0, t, &cfg), 0.0);
        assert_eq!(gmp_target_sparsity(1000.0, t, &cfg), 0.95);
    }

    #[test]
    fn prune_smallest_magnitudes() {
        let (mut s, ids) = store_of(&[&[3.0, -1.0, 2.0, -4.0]]);
        let r = prune_to_sparsity(&mut s, &ids, 0.5);
        assert_eq!(s.get(ids[0]).mask().data(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(s.get(ids[0]).value().data(), &[3.0, 0.0, 0.0, -4.0]);
        assert_eq!(r.global, 0.5);
    }

    #[test]
    fn prune_zero_target_is_noop() {
        let (mut s, ids) = store_of(&[&[3.0, -1.0]]);
        prune_to_sparsity(&mut s, &ids, 0.0);
        assert_eq!(s.get(ids[0]).mask().data(), &[1.0, 1.0]);
    }

    #[test]
    fn ties_break_by_flat_index_across_params() {
        let (mut s, ids) = store_of(&[&[1.0, 1.0], &[1.0, 1.0]]);
        prune_to_sparsity(&mut s, &ids, 0.5);
        assert_eq!(s.get(ids[0]).mask().data(), &[0.0, 0.0]);
        assert_eq!(s.get(ids[1]).mask().data(), &[1.0, 1.0]);
    }

    #[test]
    fn lower_target_warns_and_keeps_masks() {
        let (mut s, ids) = store_of(&[&[3.0, -1.0, 2.0, -4.0]]);
        prune_to_sparsity(&mut s, &ids, 0.5);
        let r = prune_to_sparsity(&mut s, &ids, 0.25);
        assert!(r.warning.is_some());
        assert_eq!(r.global, 0.5);
    }

    #[test]
    fn erk_single_layer_gets_one_minus_s() {
        let l = [LayerShape { fan_in: 30, fan_out: 7, numel: 210 }];
        let d = erk_densities(&l, 0.8).unwrap();
        assert!((d[0] - 0.2).abs() < 1e-9);
        assert_eq!(erk_counts(&l, 0.8).unwrap(), vec![42]);
    }

    #[test]
    fn erk_smaller_layer_is_denser() {
        let l = [
            LayerShape { fan_in: 10, fan_out: 10, numel: 100 },
            LayerShape { fan_in: 100, fan_out: 100, numel: 10_000 },
        ];
        let d = erk_densities(&l, 0.9).unwrap();
        assert!(d[0] > d[1]);
    }

    #[test]
    fn erk_rejects_bad_sparsity() {
        let l = [LayerShape { fan_in: 3, fan_out: 3, numel: 9 }];
        assert!(matches!(erk_densities(&l, 1.0), Err(Error::Config(_))));
        assert!(matches!(erk_densities(&l, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn set_counts_are_conserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        let id = s.init("w", ParamKind::DenseWeight, vec![5, 4], 5, &mut rng);
        let mut mask = vec![0.0; 20];
        for m in mask.iter_mut().take(10) {
            *m = 1.0;
        }
        s.get_mut(id).set_mask(Tensor::new(vec![5, 4], mask).unwrap()).unwrap();
        let before: Vec<f64> = s.get(id).mask().data().to_vec();
        let r = set_evolve(&mut s, None, &[id], 0.3, &mut rng);
        assert_eq!(r.active(), 10);
        let after = s.get(id).mask().data();
        let changed_on = (0..20).filter(|&i| before[i] == 0.0 && after[i] == 1.0).count();
        let changed_off = (0..20).filter(|&i| before[i] == 1.0 && after[i] == 0.0).count();
        assert_eq!((changed_on, changed_off), (3, 3));
    }

    #[test]
    fn set_zero_fraction_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        let id = s.init("w", ParamKind::DenseWeight, vec![5, 4], 5, &mut rng);
        erk_init_masks(&mut s, &[id], 0.5, &mut rng).unwrap();
        let before = s.get(id).clone();
        set_evolve(&mut s, None, &[id], 0.0, &mut rng);
        assert_eq!(&before, s.get(id));
    }

    #[test]
    fn set_caps_regrowth_by_free_slots() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        let id = s.init("w", ParamKind::DenseWeight, vec![10, 1], 10, &mut rng);
        let mut mask = vec![1.0; 10];
        mask[0] = 0.0;
        s.get_mut(id).set_mask(Tensor::new(vec![10, 1], mask).unwrap()).unwrap();
        let r = set_evolve(&mut s, None, &[id], 0.5, &mut rng);
        assert_eq!(r.active(), 9);
        assert!(r.warning.is_some());
    }
}
