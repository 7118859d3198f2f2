//! Expert mixing kernels: task-weighted combination and per-sample
//! Gram-Schmidt orthogonalization of stacked expert outputs `[k, B, F]`.

/// Residuals shorter than this are replaced by the zero vector.
pub const ORTHO_ZERO_NORM: f64 = 1e-8;

/// `out[b] = Σ_e coeffs[b, e] · experts[e, b]`.
pub fn mix_fwd(experts: &[f64], coeffs: &[f64], k: usize, batch: usize, features: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * features];
    for e in 0..k {
        let ex = &experts[e * batch * features..(e + 1) * batch * features];
        for (b, (orow, xrow)) in out
            .chunks_exact_mut(features)
            .zip(ex.chunks_exact(features))
            .enumerate()
        {
            let c = coeffs[b * k + e];
            if c == 0.0 {
                continue;
            }
            for (o, &x) in orow.iter_mut().zip(xrow) {
                *o += c * x;
            }
        }
    }
    out
}

/// Returns `(d_experts, d_coeffs)`.
pub fn mix_bwd(
    experts: &[f64],
    coeffs: &[f64],
    dy: &[f64],
    k: usize,
    batch: usize,
    features: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut dex = vec![0.0; experts.len()];
    let mut dc = vec![0.0; coeffs.len()];
    for e in 0..k {
        let off = e * batch * features;
        for b in 0..batch {
            let row = off + b * features..off + (b + 1) * features;
            let dyr = &dy[b * features..(b + 1) * features];
            let c = coeffs[b * k + e];
            let mut acc = 0.0;
            for ((dx, &x), &g) in dex[row.clone()].iter_mut().zip(&experts[row]).zip(dyr) {
                *dx = c * g;
                acc += x * g;
            }
            dc[b * k + e] = acc;
        }
    }
    (dex, dc)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-sample classical Gram-Schmidt over the `k` expert vectors (residuals
/// are not normalized). Returns the orthogonalized stack and, per sample, the
/// flags of which residuals were kept.
pub fn orthogonalize_fwd(experts: &[f64], k: usize, batch: usize, features: usize) -> (Vec<f64>, Vec<bool>) {
    let mut out = vec![0.0; experts.len()];
    let mut kept = vec![false; k * batch];
    let mut u: Vec<Vec<f64>> = vec![vec![0.0; features]; k];
    for b in 0..batch {
        for j in 0..k {
            let v = &experts[(j * batch + b) * features..(j * batch + b + 1) * features];
            let mut r = v.to_vec();
            for i in 0..j {
                if !kept[i * batch + b] {
                    continue;
                }
                let c = dot(v, &u[i]) / dot(&u[i], &u[i]);
                for (rv, &uv) in r.iter_mut().zip(&u[i]) {
                    *rv -= c * uv;
                }
            }
            if dot(&r, &r).sqrt() < ORTHO_ZERO_NORM {
                r.fill(0.0);
            } else {
                kept[j * batch + b] = true;
            }
            out[(j * batch + b) * features..(j * batch + b + 1) * features].copy_from_slice(&r);
            u[j] = r;
        }
    }
    (out, kept)
}

/// Reverse pass of [`orthogonalize_fwd`]; `outputs` are its residuals.
pub fn orthogonalize_bwd(
    experts: &[f64],
    outputs: &[f64],
    kept: &[bool],
    dy: &[f64],
    k: usize,
    batch: usize,
    features: usize,
) -> Vec<f64> {
    let mut dv = vec![0.0; experts.len()];
    let at = |j: usize, b: usize| (j * batch + b) * features..(j * batch + b + 1) * features;
    for b in 0..batch {
        let mut du: Vec<Vec<f64>> = (0..k).map(|j| dy[at(j, b)].to_vec()).collect();
        for j in (0..k).rev() {
            if !kept[j * batch + b] {
                continue;
            }
            let v = &experts[at(j, b)];
            let duj = du[j].clone();
            for (d, g) in dv[at(j, b)].iter_mut().zip(&duj) {
                *d += g;
            }
            for i in 0..j {
                if !kept[i * batch + b] {
                    continue;
                }
                let ui = &outputs[at(i, b)];
                let num = dot(v, ui);
                let den = dot(ui, ui);
                let c = num / den;
                let dc = -dot(&duj, ui);
                let dnum = dc / den;
                let dden = -dc * num / (den * den);
                for f in 0..features {
                    du[i][f] += -c * duj[f] + dnum * v[f] + 2.0 * dden * ui[f];
                }
                for (d, &uv) in dv[at(j, b)].iter_mut().zip(ui) {
                    *d += dnum * uv;
                }
            }
        }
    }
    dv
}
