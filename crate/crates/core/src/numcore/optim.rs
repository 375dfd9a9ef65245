use std::collections::BTreeMap;

use indexmap::IndexMap;

use super::{NumError, Tensor};

pub type GradMap = BTreeMap<String, Tensor>;

/// One named parameter and its momentum buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub value: Tensor,
    pub velocity: Tensor,
}

/// Ordered, uniquely named set of trainable tensors plus optimizer state.
///
/// Iteration follows insertion (declaration) order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    entries: IndexMap<String, ParamEntry>,
    step_count: u64,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter with a zeroed momentum buffer.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<(), NumError> {
        let velocity = Tensor::zeros(value.shape());
        self.insert_with_state(name, value, velocity)
    }

    pub fn insert_with_state(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        velocity: Tensor,
    ) -> Result<(), NumError> {
        let name = name.into();
        if velocity.shape() != value.shape() {
            return Err(NumError::ShapeMismatch {
                op: "param_set",
                lhs: value.shape().to_vec(),
                rhs: velocity.shape().to_vec(),
            });
        }
        if self.entries.contains_key(&name) {
            return Err(NumError::DuplicateParam { name });
        }
        self.entries.insert(name, ParamEntry { value, velocity });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn set_step_count(&mut self, steps: u64) {
        self.step_count = steps;
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// True when both sets have the same names, order and shapes.
    pub fn same_structure(&self, other: &ParamSet) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((na, a), (nb, b))| na == nb && a.value.shape() == b.value.shape())
    }

    /// Copy of the values with fresh optimizer state.
    pub fn reset_state(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, e) in self.iter() {
            out.insert(name, e.value.clone())
                .expect("names are unique in the source set");
        }
        out
    }
}

/// Stochastic gradient descent with heavy-ball momentum:
/// `v <- momentum * v + g`, `p <- p - lr * v`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self, NumError> {
        if !(lr >= 0.0 && lr.is_finite()) || !(0.0..1.0).contains(&momentum) {
            return Err(NumError::InvalidHyper { lr, momentum });
        }
        Ok(Self { lr, momentum })
    }

    /// Applies one update. Parameters without a gradient are left untouched,
    /// including their momentum buffers.
    pub fn step(&self, mut params: ParamSet, grads: &GradMap) -> Result<ParamSet, NumError> {
        if let Some(name) = grads.keys().find(|k| !params.entries.contains_key(*k)) {
            return Err(NumError::UnknownParam { name: name.clone() });
        }
        for (name, entry) in params.entries.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if g.shape() != entry.value.shape() {
                return Err(NumError::ShapeMismatch {
                    op: "sgd_step",
                    lhs: entry.value.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let velocity: Vec<f64> = entry
                .velocity
                .data()
                .iter()
                .zip(g.data())
                .map(|(v, gv)| self.momentum * v + gv)
                .collect();
            let value = entry
                .value
                .data()
                .iter()
                .zip(&velocity)
                .map(|(p, v)| p - self.lr * v)
                .collect();
            let shape = entry.value.shape().to_vec();
            entry.value = Tensor::new(shape.clone(), value)?;
            entry.velocity = Tensor::new(shape, velocity)?;
        }
        params.step_count += 1;
        Ok(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(p: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert("p", Tensor::scalar(p)).unwrap();
        ps
    }

    fn grad(g: f64) -> GradMap {
        [("p".to_string(), Tensor::scalar(g))].into_iter().collect()
    }

    #[test]
    fn plain_step() {
        let out = Sgd::new(0.1, 0.0).unwrap().step(single(1.0), &grad(0.5)).unwrap();
        assert!((out.get("p").unwrap().data()[0] - 0.95).abs() < 1e-15);
        assert_eq!(out.step_count(), 1);
    }

    #[test]
    fn zero_lr_is_identity_on_values() {
        let ps = single(0.123);
        let out = Sgd::new(0.0, 0.9).unwrap().step(ps.clone(), &grad(7.0)).unwrap();
        assert!(out.get("p").unwrap().bitwise_eq(ps.get("p").unwrap()));
        assert_eq!(out.step_count(), 1);
    }

    #[test]
    fn momentum_recurrence() {
        let sgd = Sgd::new(0.1, 0.9).unwrap();
        let out = sgd.step(sgd.step(single(0.0), &grad(1.0)).unwrap(), &grad(1.0)).unwrap();
        assert!((out.get("p").unwrap().data()[0] - (-0.29)).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_freezes_parameter() {
        let mut ps = single(1.0);
        ps.insert("q", Tensor::scalar(2.0)).unwrap();
        let out = Sgd::new(0.5, 0.0).unwrap().step(ps, &grad(1.0)).unwrap();
        assert_eq!(out.get("q").unwrap().data(), &[2.0]);
        assert_eq!(out.get("p").unwrap().data(), &[0.5]);
    }

    #[test]
    fn shape_and_name_errors() {
        let bad: GradMap = [("p".to_string(), Tensor::zeros(&[2]))].into_iter().collect();
        assert!(Sgd::new(0.1, 0.0).unwrap().step(single(1.0), &bad).is_err());
        let unknown: GradMap = [("nope".to_string(), Tensor::scalar(1.0))].into_iter().collect();
        assert!(matches!(
            Sgd::new(0.1, 0.0).unwrap().step(single(1.0), &unknown),
            Err(NumError::UnknownParam { .. })
        ));
        assert!(Sgd::new(0.1, 1.0).is_err());
        let mut ps = single(1.0);
        assert!(matches!(ps.insert("p", Tensor::scalar(0.0)), Err(NumError::DuplicateParam { .. })));
    }
}
