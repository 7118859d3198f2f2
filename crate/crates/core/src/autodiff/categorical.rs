use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Softmax distributions over the rows of a `[B, A]` logits matrix.
#[derive(Clone, Debug)]
pub struct Categorical {
    actions: usize,
    probs: Vec<f64>,
    log_probs: Vec<f64>,
}

impl Categorical {
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let [_, actions] = *logits.shape() else {
            return Err(Error::config("categorical head expects [B, A] logits"));
        };
        if actions < 2 {
            return Err(Error::config("categorical head needs at least two actions"));
        }
        if !logits.is_finite() {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        let mut log_probs = Vec::with_capacity(logits.numel());
        for row in logits.data().chunks_exact(actions) {
            log_probs.extend(log_softmax(row));
        }
        let probs = log_probs.iter().map(|l| l.exp()).collect();
        Ok(Categorical {
            actions,
            probs,
            log_probs,
        })
    }

    pub fn batch(&self) -> usize {
        self.probs.len() / self.actions
    }

    pub fn probs(&self, row: usize) -> &[f64] {
        &self.probs[row * self.actions..(row + 1) * self.actions]
    }

    pub fn log_prob(&self, row: usize, action: usize) -> f64 {
        self.log_probs[row * self.actions + action]
    }

    pub fn entropy(&self, row: usize) -> f64 {
        let lp = &self.log_probs[row * self.actions..(row + 1) * self.actions];
        -self.probs(row).iter().zip(lp).map(|(p, l)| if *p > 0.0 { p * l } else { 0.0 }).sum::<f64>()
    }

    pub fn sample<R: Rng + ?Sized>(&self, row: usize, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (a, p) in self.probs(row).iter().enumerate() {
            acc += p;
            if u < acc {
                return a;
            }
        }
        self.actions - 1
    }

    pub fn argmax(&self, row: usize) -> usize {
        let p = self.probs(row);
        let mut best = 0;
        for a in 1..p.len() {
            if p[a] > p[best] {
                best = a;
            }
        }
        best
    }
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits() {
        let c = Categorical::from_logits(&Tensor::matrix(&[&[0.0, 0.0]]).unwrap()).unwrap();
        assert!((c.probs(0)[0] - 0.5).abs() < 1e-15);
        assert!((c.entropy(0) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn hand_softmax() {
        let c = Categorical::from_logits(&Tensor::matrix(&[&[3f64.ln(), 0.0]]).unwrap()).unwrap();
        assert!((c.probs(0)[0] - 0.75).abs() < 1e-12);
        assert!((c.probs(0)[1] - 0.25).abs() < 1e-12);
        assert!((c.log_prob(0, 1) - 0.25f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn non_finite_logits_error() {
        let r = Categorical::from_logits(&Tensor::matrix(&[&[f64::NAN, 0.0]]).unwrap());
        assert!(matches!(r, Err(Error::Numeric(_))));
        assert!(Categorical::from_logits(&Tensor::matrix(&[&[0.0]]).unwrap()).is_err());
    }
}
