//! Return normalization, interquartile mean and stratified bootstrap
//! intervals.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::TaskContext;
use crate::error::{Error, Result};

/// `raw / achievable`, rejecting returns above what the task allows.
pub fn normalize_return(raw: f64, task: &TaskContext) -> Result<f64> {
    let best = task.achievable_reward();
    if raw > best + 1e-9 {
        return Err(Error::Data(format!(
            "return {raw} exceeds the achievable {best} of `{}`",
            task.name
        )));
    }
    Ok(raw / best)
}

/// Mean after dropping `⌊n/4⌋` samples from each end.
pub fn iqm(samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Contract("iqm of an empty sample".into()));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let cut = s.len() / 4;
    let mid = &s[cut..s.len() - cut];
    // Offset by the first kept value so constant samples come back exact.
    let base = mid[0];
    Ok(base + mid.iter().map(|x| x - base).sum::<f64>() / mid.len() as f64)
}

/// `scores[run][task]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    scores: Vec<Vec<f64>>,
}

impl ScoreMatrix {
    pub fn new(scores: Vec<Vec<f64>>) -> Result<Self> {
        let m = scores.first().map(Vec::len).unwrap_or(0);
        if scores.is_empty() || m == 0 {
            return Err(Error::Data("score matrix needs at least one run and one task".into()));
        }
        if scores.iter().any(|r| r.len() != m) {
            return Err(Error::Data("score matrix rows differ in length".into()));
        }
        if scores.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Data("score matrix holds non-finite entries".into()));
        }
        Ok(ScoreMatrix { scores })
    }

    pub fn runs(&self) -> usize {
        self.scores.len()
    }

    pub fn tasks(&self) -> usize {
        self.scores[0].len()
    }

    pub fn pooled(&self) -> Vec<f64> {
        self.scores.iter().flatten().copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateResult {
    pub point: f64,
    pub low: f64,
    pub high: f64,
    pub replicates: usize,
}

/// Nearest-rank percentile of sorted data, so endpoints are always
/// replicate values.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    sorted[(q * (sorted.len() - 1) as f64).round() as usize]
}

/// Each replicate resamples runs with replacement independently per task
/// column and takes the IQM of all resampled entries.
pub fn stratified_bootstrap_ci<R: Rng + ?Sized>(
    scores: &ScoreMatrix,
    replicates: usize,
    level: f64,
    rng: &mut R,
) -> Result<AggregateResult> {
    if replicates == 0 {
        return Err(Error::config("bootstrap needs at least one replicate"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::config("confidence level must lie in (0, 1)"));
    }
    let point = iqm(&scores.pooled())?;
    let (r, m) = (scores.runs(), scores.tasks());
    if r == 1 {
        log::warn!("single run: bootstrap interval collapses to the point estimate");
        return Ok(AggregateResult { point, low: point, high: point, replicates });
    }
    let mut reps = Vec::with_capacity(replicates);
    let mut buf = vec![0.0; r * m];
    for _ in 0..replicates {
        for t in 0..m {
            for i in 0..r {
                buf[t * r + i] = scores.scores[rng.random_range(0..r)][t];
            }
        }
        reps.push(iqm(&buf)?);
    }
    reps.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    let low = percentile(&reps, alpha);
    let high = percentile(&reps, 1.0 - alpha);
    Ok(AggregateResult { point, low, high, replicates })
}
