//! Named, grouped trainable parameters.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Optimizer group. Encoder parameters train at a scaled learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Encoder,
    Decoder,
    Aux,
}

#[derive(Clone, Debug)]
pub struct Param<T: Real> {
    pub tensor: Tensor<T>,
    pub group: ParamGroup,
}

/// A flat named array as stored in checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamSet<T: Real> {
    params: IndexMap<String, Param<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, group: ParamGroup, shape: &[usize], values: Vec<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        let tensor = Tensor::param(shape, values)?;
        self.params.insert(name, Param { tensor, group });
        Ok(())
    }

    /// Panics on an unknown name: modules only look up names they registered.
    pub fn get(&self, name: &str) -> &Tensor<T> {
        match self.params.get(name) {
            Some(p) => &p.tensor,
            None => panic!("parameter `{name}` was never registered"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }

    /// Replaces the values of `name` with a fresh leaf. The old tensor, and
    /// any graph hanging off it, is released.
    pub fn set_values(&mut self, name: &str, values: Vec<T>) -> Result<()> {
        let p = self.params.get_mut(name).ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        p.tensor = Tensor::param(p.tensor.shape(), values)?;
        Ok(())
    }

    pub fn zero_grad(&self) {
        self.params.values().for_each(|p| p.tensor.zero_grad());
    }

    pub fn to_records(&self) -> Vec<Record> {
        self.params
            .iter()
            .map(|(name, p)| Record {
                name: name.clone(),
                shape: p.tensor.shape().to_vec(),
                values: p.tensor.data().iter().map(|v| v.as_f64() as f32).collect(),
            })
            .collect()
    }

    /// Overwrites every registered parameter from `records`. Every parameter
    /// must be present with the same shape; records with other names are
    /// returned untouched.
    pub fn load_records(&mut self, records: Vec<Record>) -> Result<Vec<Record>> {
        let mut rest = Vec::new();
        let mut loaded = std::collections::HashSet::new();
        for rec in records {
            let Some(p) = self.params.get_mut(&rec.name) else {
                rest.push(rec);
                continue;
            };
            if p.tensor.shape() != rec.shape.as_slice() {
                return Err(Error::mismatch(format!("shape of parameter `{}`", rec.name), format!("{:?}", p.tensor.shape()), format!("{:?}", rec.shape)));
            }
            let values = rec.values.iter().map(|v| T::of(*v as f64)).collect();
            p.tensor = Tensor::param(&rec.shape, values)?;
            loaded.insert(rec.name);
        }
        if let Some(missing) = self.params.keys().find(|k| !loaded.contains(*k)) {
            return Err(Error::mismatch("parameter in checkpoint", missing, "nothing"));
        }
        Ok(rest)
    }

    /// Copy in another precision, same names and groups.
    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        let params = self
            .params
            .iter()
            .map(|(k, p)| {
                let values = p.tensor.data().iter().map(|v| U::of(v.as_f64())).collect();
                let tensor = Tensor::param(p.tensor.shape(), values).expect("same shape");
                (k.clone(), Param { tensor, group: p.group })
            })
            .collect();
        ParamSet { params }
    }
}

/// Seeded weight initialiser: uniform in `±sqrt(1/fan_in)`.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn uniform<T: Real>(&mut self, len: usize, fan_in: usize) -> Vec<T> {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        (0..len).map(|_| T::of(self.rng.gen_range(-bound..bound))).collect()
    }

    /// Registers a weight of `shape` with fan-in initialisation.
    pub fn weight<T: Real>(&mut self, params: &mut ParamSet<T>, name: &str, group: ParamGroup, shape: &[usize], fan_in: usize) -> Result<String> {
        let values = self.uniform(shape.iter().product(), fan_in);
        params.insert(name, group, shape, values)?;
        Ok(name.to_string())
    }

    pub fn constant<T: Real>(&mut self, params: &mut ParamSet<T>, name: &str, group: ParamGroup, shape: &[usize], value: f64) -> Result<String> {
        params.insert(name, group, shape, vec![T::of(value); shape.iter().product()])?;
        Ok(name.to_string())
    }
}

/// Registration context for one module: a name prefix and an optimizer
/// group over a shared [`ParamSet`] and [`Init`].
pub struct Scope<'a, T: Real> {
    pub params: &'a mut ParamSet<T>,
    pub init: &'a mut Init,
    prefix: String,
    group: ParamGroup,
}

impl<'a, T: Real> Scope<'a, T> {
    pub fn new(params: &'a mut ParamSet<T>, init: &'a mut Init, prefix: &str, group: ParamGroup) -> Self {
        Self { params, init, prefix: prefix.to_string(), group }
    }

    pub fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    /// Child scope `prefix.name`, same group.
    pub fn sub(&mut self, name: &str) -> Scope<'_, T> {
        let prefix = self.name(name);
        Scope { params: self.params, init: self.init, prefix, group: self.group }
    }

    pub fn weight(&mut self, leaf: &str, shape: &[usize], fan_in: usize) -> Result<String> {
        let name = self.name(leaf);
        self.init.weight(self.params, &name, self.group, shape, fan_in)
    }

    pub fn constant(&mut self, leaf: &str, shape: &[usize], value: f64) -> Result<String> {
        let name = self.name(leaf);
        self.init.constant(self.params, &name, self.group, shape, value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut p = ParamSet::<f32>::new();
        p.insert("a", ParamGroup::Decoder, &[2], vec![0.0; 2]).unwrap();
        assert!(matches!(p.insert("a", ParamGroup::Decoder, &[2], vec![0.0; 2]), Err(Error::DuplicateParam(_))));
        assert!(p.get("a").requires_grad());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a: Vec<f64> = Init::new(7).uniform(100, 4);
        let b: Vec<f64> = Init::new(7).uniform(100, 4);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn records_round_trip() {
        let mut p = ParamSet::<f32>::new();
        let mut init = Init::new(3);
        init.weight(&mut p, "w", ParamGroup::Encoder, &[3, 2], 3).unwrap();
        let recs = p.to_records();
        let mut q = ParamSet::<f32>::new();
        q.insert("w", ParamGroup::Encoder, &[3, 2], vec![0.0; 6]).unwrap();
        assert!(q.load_records(recs).unwrap().is_empty());
        assert_eq!(q.get("w").data(), p.get("w").data());
    }
}
