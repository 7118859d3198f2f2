//! Dormancy, effective rank, IQM and Fisher trace against independent
//! brute-force implementations.

use mtsparse::arch::{ArchKind, ArchitectureSpec, Network};
use mtsparse::envs::{Observation, CHANNEL_MAX, OBS_LEN, VIEW};
use mtsparse::evalstats::iqm;
use mtsparse::plasticity::{dormancy, effective_rank, fisher_trace};
use mtsparse::autodiff::{ParamId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 200;

fn random_obs(rng: &mut ChaCha8Rng) -> Observation {
    let mut codes = [0u8; OBS_LEN];
    for (i, c) in codes.iter_mut().enumerate() {
        *c = rng.random_range(0..=CHANNEL_MAX[i / (VIEW * VIEW)]);
    }
    Observation::from_codes(codes)
}

fn small_net(rng: &mut ChaCha8Rng, tasks: usize) -> Network {
    let spec = ArchitectureSpec {
        hidden: 6,
        conv_channels: vec![2, 3, 4],
        ..ArchitectureSpec::new(ArchKind::Mtppo)
    };
    Network::new(spec, tasks, rng).unwrap()
}

fn values(net: &Network, name: &str) -> (Vec<f64>, Vec<usize>) {
    let id = net.store.find(name).unwrap();
    let p = net.store.get(id);
    let eff = p.value().data().iter().zip(p.mask().data()).map(|(v, m)| v * m).collect();
    (eff, p.shape().to_vec())
}

// ---- naive forward -------------------------------------------------------

/// `x[c][y][x]` planes, valid 2-D cross-correlation, one sample.
fn conv_naive(x: &[Vec<Vec<f64>>], w: &[f64], ws: &[usize], b: &[f64]) -> Vec<Vec<Vec<f64>>> {
    let (k, c, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let (h, wd) = (x[0].len(), x[0][0].len());
    let (oh, ow) = (h - kh + 1, wd - kw + 1);
    let mut out = vec![vec![vec![0.0; ow]; oh]; k];
    for o in 0..k {
        for y in 0..oh {
            for xx in 0..ow {
                let mut s = b[o];
                for ci in 0..c {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            s += w[((o * c + ci) * kh + dy) * kw + dx] * x[ci][y + dy][xx + dx];
                        }
                    }
                }
                out[o][y][xx] = s;
            }
        }
    }
    out
}

fn dense_naive(x: &[f64], w: &[f64], ws: &[usize], b: &[f64]) -> Vec<f64> {
    (0..ws[1]).map(|o| b[o] + (0..ws[0]).map(|i| x[i] * w[i * ws[1] + o]).sum::<f64>()).collect()
}

struct Acts {
    /// Per conv layer and channel: mean |h| over positions.
    conv: Vec<Vec<f64>>,
    actor: Vec<f64>,
    critic: Vec<f64>,
}

fn forward_naive(net: &Network, obs: &Observation, task: usize) -> Acts {
    let mut x: Vec<Vec<Vec<f64>>> = (0..3)
        .map(|c| (0..VIEW).map(|r| (0..VIEW).map(|q| obs.codes()[(c * VIEW + r) * VIEW + q] as f64).collect()).collect())
        .collect();
    let mut conv = Vec::new();
    for i in 0..3 {
        let (w, ws) = values(net, &format!("conv{i}.w"));
        let (b, _) = values(net, &format!("conv{i}.b"));
        let mut y = conv_naive(&x, &w, &ws, &b);
        for plane in y.iter_mut().flatten().flatten() {
            *plane = if i == 2 { plane.tanh() } else { plane.max(0.0) };
        }
        conv.push(
            y.iter()
                .map(|ch| {
                    let n = (ch.len() * ch[0].len()) as f64;
                    ch.iter().flatten().map(|v| v.abs()).sum::<f64>() / n
                })
                .collect(),
        );
        x = y;
    }
    let flat: Vec<f64> = x.iter().flatten().flatten().copied().collect();
    let head = |side: &str| {
        let (w, ws) = values(net, &format!("{side}{task}.0.w"));
        let (b, _) = values(net, &format!("{side}{task}.0.b"));
        dense_naive(&flat, &w, &ws, &b).into_iter().map(f64::tanh).collect::<Vec<_>>()
    };
    Acts { conv, actor: head("actor"), critic: head("critic") }
}

fn dormant_count(mean_abs: &[f64], tau: f64) -> usize {
    let avg = mean_abs.iter().sum::<f64>() / mean_abs.len() as f64;
    mean_abs.iter().filter(|&&m| if avg == 0.0 { true } else { m / avg <= tau }).count()
}

fn silence_neurons(net: &mut Network, rng: &mut ChaCha8Rng) {
    for i in 0..3 {
        let w = net.store.find(&format!("conv{i}.w")).unwrap();
        let b = net.store.find(&format!("conv{i}.b")).unwrap();
        let shape = net.store.get(w).shape().to_vec();
        let per = shape[1..].iter().product::<usize>();
        for k in 0..shape[0] {
            if rng.random_bool(0.3) {
                net.store.get_mut(w).update_values(|v| v[k * per..(k + 1) * per].fill(0.0));
                net.store.get_mut(b).update_values(|v| v[k] = 0.0);
            }
        }
    }
    let names: Vec<String> = net
        .store
        .ids()
        .map(|id| net.store.info(id).name.clone())
        .filter(|n| n.ends_with(".0.w"))
        .collect();
    for name in names {
        let w = net.store.find(&name).unwrap();
        let b = net.store.find(&name.replace(".w", ".b")).unwrap();
        let shape = net.store.get(w).shape().to_vec();
        for j in 0..shape[1] {
            if rng.random_bool(0.3) {
                net.store.get_mut(w).update_values(|v| (0..shape[0]).for_each(|i| v[i * shape[1] + j] = 0.0));
                net.store.get_mut(b).update_values(|v| v[j] = 0.0);
            }
        }
    }
}

#[test]
pub fn dormancy_matches_brute_force() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tasks = rng.random_range(1..3);
        let mut net = small_net(&mut rng, tasks);
        silence_neurons(&mut net, &mut rng);
        let n = rng.random_range(4..12);
        let batch: Vec<(Observation, usize)> = (0..n).map(|i| (random_obs(&mut rng), i % tasks)).collect();
        let tau = [0.001, 0.1, 0.5, 0.9][rng.random_range(0..4)];
        let rep = dormancy(&net, &batch, tau).unwrap();

        let acts: Vec<Acts> = batch.iter().map(|(o, t)| forward_naive(&net, o, *t)).collect();
        let mut trunk = (0usize, 0usize);
        for l in 0..3 {
            let width = acts[0].conv[l].len();
            let mean: Vec<f64> =
                (0..width).map(|c| acts.iter().map(|a| a.conv[l][c]).sum::<f64>() / n as f64).collect();
            trunk.0 += dormant_count(&mean, tau);
            trunk.1 += width;
        }
        let mut actor = trunk;
        let mut critic = trunk;
        for t in 0..tasks {
            let rows: Vec<&Acts> = acts.iter().zip(&batch).filter(|(_, b)| b.1 == t).map(|(a, _)| a).collect();
            for (side, out) in [(true, &mut actor), (false, &mut critic)] {
                let width = if side { rows[0].actor.len() } else { rows[0].critic.len() };
                let mean: Vec<f64> = (0..width)
                    .map(|j| {
                        rows.iter().map(|a| if side { a.actor[j] } else { a.critic[j] }.abs()).sum::<f64>()
                            / rows.len() as f64
                    })
                    .collect();
                out.0 += dormant_count(&mean, tau);
                out.1 += width;
            }
        }
        let lib_actor = (rep.actor * actor.1 as f64).round() as usize;
        let lib_critic = (rep.critic * critic.1 as f64).round() as usize;
        assert_eq!(lib_actor, actor.0, "seed {seed}: actor dormant count");
        assert_eq!(lib_critic, critic.0, "seed {seed}: critic dormant count");
        assert_eq!(rep.actor, actor.0 as f64 / actor.1 as f64);
    }
}

// ---- effective rank --------------------------------------------------------

/// Cyclic Jacobi eigenvalues of a symmetric matrix.
fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

fn srank_oracle(m: &[Vec<f64>], delta: f64) -> usize {
    let cols = m[0].len();
    let gram: Vec<Vec<f64>> = (0..cols)
        .map(|i| (0..cols).map(|j| m.iter().map(|r| r[i] * r[j]).sum()).collect())
        .collect();
    let mut sigma: Vec<f64> = jacobi_eigenvalues(gram).into_iter().map(|e| e.max(0.0).sqrt()).collect();
    sigma.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = sigma.iter().sum();
    let mut acc = 0.0;
    for (k, s) in sigma.iter().enumerate() {
        acc += s;
        if acc / total >= 1.0 - delta {
            return k + 1;
        }
    }
    sigma.len()
}

#[test]
pub fn effective_rank_matches_jacobi_oracle() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (rows, cols) = (rng.random_range(2..9), rng.random_range(2..7));
        let rank = rng.random_range(1..=rows.min(cols));
        let a: Vec<Vec<f64>> = (0..rows).map(|_| (0..rank).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let scales: Vec<f64> = (0..rank).map(|i| 10f64.powi(-(i as i32))).collect();
        let b: Vec<Vec<f64>> = (0..rank).map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let m: Vec<Vec<f64>> = (0..rows)
            .map(|r| (0..cols).map(|c| (0..rank).map(|k| a[r][k] * scales[k] * b[k][c]).sum()).collect())
            .collect();
        let delta = [0.01, 0.05, 0.2][rng.random_range(0..3)];
        let t = Tensor::new(vec![rows, cols], m.iter().flatten().copied().collect()).unwrap();
        assert_eq!(effective_rank(&t, delta).unwrap(), srank_oracle(&m, delta), "seed {seed}");
    }
}

// ---- IQM -------------------------------------------------------------------

fn iqm_oracle(xs: &[f64]) -> f64 {
    let mut s = xs.to_vec();
    // insertion sort
    for i in 1..s.len() {
        let mut j = i;
        while j > 0 && s[j - 1] > s[j] {
            s.swap(j - 1, j);
            j -= 1;
        }
    }
    let cut = s.len() / 4;
    let kept = &s[cut..s.len() - cut];
    kept.iter().sum::<f64>() / kept.len() as f64
}

#[test]
pub fn iqm_matches_brute_force() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..40);
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let got = iqm(&xs).unwrap();
        let want = iqm_oracle(&xs);
        assert!((got - want).abs() <= 1e-12, "seed {seed}: {got} vs {want}");
    }
}

// ---- Fisher trace ----------------------------------------------------------

/// Actor of task 0 reduced to its output bias: hidden layer zeroed, output
/// weights masked out, logits `0` on the first `n` actions and `-1e9` on the
/// rest. `E‖e_a − p‖² = 1 − 1/n` for the uniform softmax over `n` actions.
fn bias_only_actor(n: usize) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    let mut net = small_net(&mut rng, 1);
    let id = |net: &Network, name: &str| -> ParamId { net.store.find(name).unwrap() };
    for name in ["actor0.0.w", "actor0.0.b"] {
        let p = id(&net, name);
        net.store.get_mut(p).update_values(|v| v.fill(0.0));
    }
    let w = id(&net, "actor0.out.w");
    let shape = net.store.get(w).shape().to_vec();
    net.store.get_mut(w).set_mask(Tensor::zeros(shape)).unwrap();
    let b = id(&net, "actor0.out.b");
    net.store.get_mut(b).update_values(|v| {
        for (i, x) in v.iter_mut().enumerate() {
            *x = if i < n { 0.0 } else { -1e9 };
        }
    });
    net
}

#[test]
pub fn fisher_trace_matches_bias_only_closed_form() {
    for n in [2usize, 3, 4] {
        let mut net = bias_only_actor(n);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + n as u64);
        let batch: Vec<(Observation, usize)> = (0..1024).map(|_| (random_obs(&mut rng), 0)).collect();
        let rep = fisher_trace(&mut net, &batch, &mut rng).unwrap();
        let want = 1.0 - 1.0 / n as f64;
        assert_eq!(rep.skipped, 0);
        assert!(
            (rep.trace - want).abs() <= 3.0 * rep.std_err + 1e-9,
            "n={n}: trace {} vs {want} (se {})",
            rep.trace,
            rep.std_err
        );
    }
}
