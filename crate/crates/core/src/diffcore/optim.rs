//! Named parameter storage and the AdamW optimizer.

use std::collections::BTreeMap;

use crate::diffcore::array::{Array, Scalar};
use crate::diffcore::tape::{Grads, NodeId, Tape};
use crate::error::{Error, Result};
use crate::rng::Stream;

/// One parameter plus its AdamW state.
#[derive(Clone, Debug)]
pub struct ParamEntry<F: Scalar> {
    pub value: Array<F>,
    m: Array<F>,
    v: Array<F>,
    step: u64,
}

/// Named parameters with per-parameter optimizer state.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F: Scalar> {
    entries: BTreeMap<String, ParamEntry<F>>,
}

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl AdamW {
    pub fn with_lr(lr: f64) -> Self {
        AdamW { lr, ..AdamW::default() }
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { entries: BTreeMap::new() }
    }

    /// Add a parameter with zeroed optimizer state; duplicate names rejected.
    pub fn insert(&mut self, name: &str, value: Array<F>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Contract(format!("parameter '{name}' already exists")));
        }
        let shape = value.shape().to_vec();
        self.entries.insert(
            name.to_string(),
            ParamEntry { value, m: Array::zeros(shape.clone()), v: Array::zeros(shape), step: 0 },
        );
        Ok(())
    }

    /// Weight matrix initialized from a truncated normal (std 0.02 scaled).
    pub fn insert_weight(&mut self, name: &str, shape: Vec<usize>, std: f64, rng: &mut Stream) -> Result<()> {
        let n = shape.iter().product();
        let data: Vec<F> = (0..n).map(|_| F::of_f64(rng.trunc_normal(std))).collect();
        self.insert(name, Array::new(shape, data)?)
    }

    /// Zero-initialized bias vector.
    pub fn insert_zeros(&mut self, name: &str, shape: Vec<usize>) -> Result<()> {
        self.insert(name, Array::zeros(shape))
    }

    pub fn get(&self, name: &str) -> Result<&Array<F>> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))
    }

    pub fn set(&mut self, name: &str, value: Array<F>) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))?;
        if e.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter '{name}' shape {:?} cannot take value of shape {:?}",
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array<F>)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    pub fn step_of(&self, name: &str) -> Option<u64> {
        self.entries.get(name).map(|e| e.step)
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Register every parameter on a tape; returns name → node handles.
    pub fn register_all(&self, tape: &mut Tape<F>) -> Result<BTreeMap<String, NodeId>> {
        let mut map = BTreeMap::new();
        for (name, e) in &self.entries {
            map.insert(name.clone(), tape.param(name, e.value.clone())?);
        }
        Ok(map)
    }

    /// Copy parameter values (not optimizer state) from another store.
    pub fn copy_values_from(&mut self, other: &ParamStore<F>) -> Result<()> {
        for (name, e) in &other.entries {
            self.set(name, e.value.clone())?;
        }
        Ok(())
    }

    /// AdamW update from a gradient map. Parameters without a gradient entry
    /// are left untouched; unknown gradient names are a contract error.
    pub fn adamw_step(&mut self, grads: &Grads<F>, hp: &AdamW) -> Result<()> {
        for (name, g) in grads {
            let e = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter '{name}'")))?;
            if e.value.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient shape {:?} mismatches parameter '{name}' {:?}",
                    g.shape(),
                    e.value.shape()
                )));
            }
            e.step += 1;
            let b1 = F::of_f64(hp.beta1);
            let b2 = F::of_f64(hp.beta2);
            let one = F::one();
            // Decoupled weight decay, applied multiplicatively before the
            // moment update so the decay path never enters the moments.
            if hp.weight_decay != 0.0 {
                let keep = F::of_f64(1.0 - hp.lr * hp.weight_decay);
                e.value = e.value.map(|x| x * keep);
            }
            let bc1 = F::of_f64(1.0 - hp.beta1.powi(e.step as i32));
            let bc2 = F::of_f64(1.0 - hp.beta2.powi(e.step as i32));
            let lr = F::of_f64(hp.lr);
            let eps = F::of_f64(hp.eps);
            for i in 0..g.len() {
                let gi = g.data()[i];
                let m = b1 * e.m.data()[i] + (one - b1) * gi;
                let v = b2 * e.v.data()[i] + (one - b2) * gi * gi;
                e.m.data_mut()[i] = m;
                e.v.data_mut()[i] = v;
                let mh = m / bc1;
                let vh = v / bc2;
                let x = e.value.data()[i] - lr * mh / (vh.sqrt() + eps);
                e.value.data_mut()[i] = x;
            }
            if !e.value.all_finite() {
                return Err(Error::Numeric(format!("parameter '{name}' became non-finite after update")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, vals: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert(name, Array::from_f64(vec![vals.len()], vals).unwrap()).unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_one_lr() {
        // Bias correction makes the first step exactly lr * g/|g| (eps aside).
        let mut s = store_with("w", &[1.0]);
        let mut g = Grads::new();
        g.insert("w".into(), Array::from_f64(vec![1], &[1.0]).unwrap());
        s.adamw_step(&g, &AdamW { lr: 0.1, weight_decay: 0.0, ..AdamW::default() }).unwrap();
        let v = s.get("w").unwrap().data()[0];
        assert!((v - 0.9).abs() < 1e-7, "got {v}");
    }

    #[test]
    fn zero_grad_zero_decay_leaves_param() {
        let mut s = store_with("w", &[1.5]);
        let mut g = Grads::new();
        g.insert("w".into(), Array::from_f64(vec![1], &[0.0]).unwrap());
        s.adamw_step(&g, &AdamW::with_lr(0.1)).unwrap();
        assert_eq!(s.get("w").unwrap().data()[0], 1.5);
    }

    #[test]
    fn decay_alone_scales_param() {
        let mut s = store_with("w", &[2.0]);
        let mut g = Grads::new();
        g.insert("w".into(), Array::from_f64(vec![1], &[0.0]).unwrap());
        let hp = AdamW { lr: 0.1, weight_decay: 0.5, ..AdamW::default() };
        s.adamw_step(&g, &hp).unwrap();
        let v = s.get("w").unwrap().data()[0];
        assert!((v - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn step_count_is_per_parameter_and_monotone() {
        let mut s = store_with("w", &[1.0]);
        s.insert("b", Array::from_f64(vec![1], &[0.0]).unwrap()).unwrap();
        let mut g = Grads::new();
        g.insert("w".into(), Array::from_f64(vec![1], &[0.5]).unwrap());
        s.adamw_step(&g, &AdamW::with_lr(0.01)).unwrap();
        s.adamw_step(&g, &AdamW::with_lr(0.01)).unwrap();
        assert_eq!(s.step_of("w"), Some(2));
        assert_eq!(s.step_of("b"), Some(0));
    }

    #[test]
    fn duplicate_insert_is_rejected() {
        let mut s = store_with("w", &[1.0]);
        assert!(s.insert("w", Array::zeros(vec![1])).is_err());
    }
}
