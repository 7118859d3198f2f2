//! Masked parameters and the per-network parameter store.
//!
//! A [`MaskedParam`] keeps `value[i] == 0` wherever `mask[i] == 0`. Every
//! mutating method re-applies the mask before returning, so kernels can read
//! `value` directly as the effective weight.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedParam {
    value: Tensor,
    mask: Tensor,
    trainable: bool,
}

impl MaskedParam {
    pub fn new(value: Tensor, mask: Tensor) -> Result<Self> {
        if value.shape() != mask.shape() {
            return Err(Error::config(format!(
                "mask shape {:?} differs from value shape {:?}",
                mask.shape(),
                value.shape()
            )));
        }
        if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::config("mask entries must be 0 or 1"));
        }
        let mut p = MaskedParam {
            value,
            mask,
            trainable: true,
        };
        p.apply_mask();
        Ok(p)
    }

    /// A parameter with an all-ones mask.
    pub fn dense(value: Tensor) -> Self {
        let mask = Tensor::filled(value.shape().to_vec(), 1.0);
        MaskedParam {
            value,
            mask,
            trainable: true,
        }
    }

    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn mask(&self) -> &Tensor {
        &self.mask
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.value.grad()
    }

    pub fn zero_grad(&mut self) {
        self.value.clear_grad();
    }

    /// Accumulate `delta` into the gradient, zeroing masked entries.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        let mask = self.mask.data().to_vec();
        let g = self.value.grad_mut();
        for ((g, d), m) in g.iter_mut().zip(delta).zip(&mask) {
            *g += d * m;
        }
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        self.value.set_grad(Some(grad))?;
        self.apply_mask_to_grad();
        Ok(())
    }

    pub fn active_count(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m != 0.0).count()
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.mask.data()[i] != 0.0
    }

    pub fn set_mask(&mut self, mask: Tensor) -> Result<()> {
        let p = MaskedParam::new(self.value.clone(), mask)?;
        self.mask = p.mask;
        self.apply_mask();
        Ok(())
    }

    /// Mutate the raw values and mask together; the mask is re-applied after.
    pub fn edit(&mut self, f: impl FnOnce(&mut [f64], &mut [f64])) {
        f(self.value.data_mut(), self.mask.data_mut());
        self.apply_mask();
    }

    /// Mutate the raw values; masked entries are re-zeroed after.
    pub fn update_values(&mut self, f: impl FnOnce(&mut [f64])) {
        f(self.value.data_mut());
        self.apply_mask();
    }

    fn apply_mask(&mut self) {
        let mask = self.mask.data();
        for (v, &m) in self.value.data_mut().iter_mut().zip(mask) {
            if m == 0.0 {
                *v = 0.0;
            }
        }
        self.apply_mask_to_grad();
    }

    fn apply_mask_to_grad(&mut self) {
        if self.value.grad().is_none() {
            return;
        }
        let mask = self.mask.data().to_vec();
        for (g, m) in self.value.grad_mut().iter_mut().zip(mask) {
            if m == 0.0 {
                *g = 0.0;
            }
        }
    }
}

/// What a parameter is, which decides its init distribution and whether it
/// may be sparsified.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    ConvWeight,
    DenseWeight,
    Bias,
    NormGain,
    NormShift,
    EncoderWeight,
}

impl ParamKind {
    pub fn is_weight(self) -> bool {
        matches!(
            self,
            ParamKind::ConvWeight | ParamKind::DenseWeight | ParamKind::EncoderWeight
        )
    }
}

/// Initial value for parameter entries: weights uniform in ±√(1/fan_in),
/// biases and norm shifts zero, norm gains one.
pub fn init_value<R: Rng + ?Sized>(kind: ParamKind, fan_in: usize, rng: &mut R) -> f64 {
    match kind {
        ParamKind::ConvWeight | ParamKind::DenseWeight | ParamKind::EncoderWeight => {
            let bound = (1.0 / fan_in.max(1) as f64).sqrt();
            rng.random_range(-bound..bound)
        }
        ParamKind::Bias | ParamKind::NormShift => 0.0,
        ParamKind::NormGain => 1.0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamInfo {
    pub name: String,
    pub kind: ParamKind,
    pub fan_in: usize,
}

/// All parameters of one network, addressed by [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<MaskedParam>,
    infos: Vec<ParamInfo>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, fan_in: usize, param: MaskedParam) -> ParamId {
        self.params.push(param);
        self.infos.push(ParamInfo {
            name: name.into(),
            kind,
            fan_in,
        });
        ParamId(self.params.len() - 1)
    }

    /// Create a parameter drawn from the init distribution of `kind`.
    pub fn init<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        kind: ParamKind,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| init_value(kind, fan_in, rng)).collect();
        let value = Tensor::new(shape, data).expect("shape product matches data length");
        self.insert(name, kind, fan_in, MaskedParam::dense(value))
    }

    pub fn get(&self, id: ParamId) -> &MaskedParam {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut MaskedParam {
        &mut self.params[id.0]
    }

    pub fn info(&self, id: ParamId) -> &ParamInfo {
        &self.infos[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.infos.iter().position(|i| i.name == name).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable())
            .map(|p| p.numel())
            .sum()
    }

    /// Re-draw the entries `indices` of `id` from its init distribution.
    /// Masked slots stay zero.
    pub fn reinit_entries<R: Rng + ?Sized>(&mut self, id: ParamId, indices: &[usize], rng: &mut R) {
        let info = self.infos[id.0].clone();
        self.params[id.0].update_values(|vals| {
            for &i in indices {
                vals[i] = init_value(info.kind, info.fan_in, rng);
            }
        });
    }

    pub fn reinit_all<R: Rng + ?Sized>(&mut self, id: ParamId, rng: &mut R) {
        let n = self.params[id.0].numel();
        let all: Vec<usize> = (0..n).collect();
        self.reinit_entries(id, &all, rng);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn construction_zeroes_masked_values() {
        let v = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        let m = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let p = MaskedParam::new(v, m).unwrap();
        assert_eq!(p.value().data(), &[3.0, 0.0]);
    }

    #[test]
    fn rejects_non_binary_mask() {
        let v = Tensor::zeros(vec![2]);
        let m = Tensor::new(vec![2], vec![1.0, 0.5]).unwrap();
        assert!(MaskedParam::new(v, m).is_err());
    }

    #[test]
    fn masked_grad_is_zero() {
        let v = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        let m = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        let mut p = MaskedParam::new(v, m).unwrap();
        p.accumulate_grad(&[5.0, 5.0]);
        assert_eq!(p.grad().unwrap(), &[0.0, 5.0]);
    }

    #[test]
    fn reinit_respects_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let id = store.init("w", ParamKind::DenseWeight, vec![4], 4, &mut rng);
        store
            .get_mut(id)
            .set_mask(Tensor::new(vec![4], vec![1.0, 0.0, 1.0, 0.0]).unwrap())
            .unwrap();
        store.reinit_all(id, &mut rng);
        let v = store.get(id).value().data();
        assert_eq!(v[1], 0.0);
        assert_eq!(v[3], 0.0);
        assert!(v[0].abs() <= 0.5 && v[0] != 0.0);
    }
}
