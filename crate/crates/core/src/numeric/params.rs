use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a registered parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors. Each name is registered exactly once.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::contract(format!("parameter `{name}` registered twice")));
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }
}

/// Truncated normal initializer (resampled outside two standard deviations).
pub fn truncated_normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let mut t = Tensor::zeros(shape);
    if std == 0.0 {
        return t;
    }
    let normal = Normal::new(0.0, std).expect("std is finite and positive");
    for v in t.data_mut() {
        *v = loop {
            let x: f64 = normal.sample(rng);
            if x.abs() <= 2.0 * std {
                break x;
            }
        };
    }
    t
}

/// Per-parameter gradients, aligned with a [`ParamStore`].
///
/// Slots are `None` for parameters the loss never reached; those read as zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn empty(params: &ParamStore) -> Self {
        Self {
            slots: vec![None; params.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.slots[id.0].as_ref()
    }

    /// Gradient for `id`, materializing zeros for unreached parameters.
    pub fn get_or_zeros(&self, id: ParamId, params: &ParamStore) -> Tensor {
        self.slots[id.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(params.get(id).shape()))
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, grad: Tensor) {
        match &mut self.slots[id.0] {
            Some(existing) => existing.add_assign(&grad),
            slot @ None => *slot = Some(grad),
        }
    }

    pub(crate) fn slot_mut(&mut self, id: ParamId, shape: &[usize]) -> &mut Tensor {
        self.slots[id.0].get_or_insert_with(|| Tensor::zeros(shape))
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, scale: f64, other: &Gradients) {
        assert_eq!(self.slots.len(), other.slots.len());
        for (mine, theirs) in self.slots.iter_mut().zip(&other.slots) {
            let Some(theirs) = theirs else { continue };
            match mine {
                Some(m) => m.scaled_add_assign(scale, theirs),
                None => {
                    let mut t = theirs.clone();
                    if scale != 1.0 {
                        t.scale_in_place(scale);
                    }
                    *mine = Some(t);
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.slots.iter_mut().flatten() {
            t.scale_in_place(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .map(Tensor::sum_squares)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale so the global norm is at most `max_norm`. Returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm.is_finite() {
            self.scale(max_norm / norm);
        }
        norm
    }

    /// Name of the first parameter whose gradient has a non-finite entry.
    pub fn first_non_finite<'a>(&self, params: &'a ParamStore) -> Option<&'a str> {
        self.slots
            .iter()
            .enumerate()
            .find(|(_, s)| s.as_ref().is_some_and(|t| !t.is_finite()))
            .map(|(i, _)| params.name(ParamId(i)))
    }

    /// Sum a list of gradients in order.
    pub fn sum(params: &ParamStore, parts: impl IntoIterator<Item = Gradients>) -> Gradients {
        let mut total = Gradients::empty(params);
        for g in parts {
            total.add_scaled(1.0, &g);
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamStore::new();
        p.register("w", Tensor::zeros(&[2, 2])).unwrap();
        assert!(matches!(
            p.register("w", Tensor::zeros(&[1, 1])),
            Err(Error::Contract(_))
        ));
        assert_eq!(p.lookup("w"), Some(ParamId(0)));
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut p = ParamStore::new();
        let a = p.register("a", Tensor::zeros(&[1, 2])).unwrap();
        let mut g = Gradients::empty(&p);
        g.accumulate(a, Tensor::row(vec![3.0, 4.0]));
        let pre = g.clip_global_norm(1.0);
        assert_eq!(pre, 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn truncated_normal_stays_in_band() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let t = truncated_normal(&[50, 40], 0.02, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let mean = t.data().iter().sum::<f64>() / t.len() as f64;
        assert!(mean.abs() < 0.002);
    }
}
