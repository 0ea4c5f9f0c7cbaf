//! Named, seeded learnable parameters.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Distribution a parameter is drawn from at initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    /// Normal with the given standard deviation, resampled outside ±2σ.
    TruncNormal { std: f64 },
}

impl Init {
    /// Truncated normal scaled by `1/sqrt(fan_in)`.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::TruncNormal { std: 1.0 / (fan_in as f64).sqrt() }
    }

    fn fill(self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        match self {
            Init::Zeros => out.fill(0.0),
            Init::Ones => out.fill(1.0),
            Init::Constant(c) => out.fill(c),
            Init::TruncNormal { std } => {
                for v in out {
                    *v = loop {
                        let z: f64 = rng.sample(StandardNormal);
                        if z.abs() <= 2.0 {
                            break z * std;
                        }
                    };
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Arc<Tensor>,
    pub grad: Tensor,
    pub init: Init,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Values stay zero until [`ParamStore::initialize`].
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        let id = self.params.len();
        self.params.push(Parameter {
            name: name.clone(),
            value: Arc::new(Tensor::zeros(shape)),
            grad: Tensor::zeros(shape),
            init,
        });
        self.by_name.insert(name, id);
        Ok(ParamId(id))
    }

    /// Draws every parameter from its init spec. Each parameter gets its own
    /// stream keyed by `(seed, name)`, so values do not depend on
    /// registration order.
    pub fn initialize(&mut self, seed: u64) {
        for p in &mut self.params {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, fnv1a(p.name.as_bytes())));
            let value = Arc::make_mut(&mut p.value);
            p.init.fill(&mut rng, value.data_mut());
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    /// Mutable access to a value (copy-on-write if a tape still holds it).
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shapes("set_value", p.value.shape(), value.shape()));
        }
        p.value = Arc::new(value);
        Ok(())
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Ids whose names start with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.params
            .iter()
            .enumerate()
            .filter(move |(_, p)| p.name.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer over two words.
pub(crate) fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.rotate_left(32) ^ 0x9e37_79b9_7f4a_7c15;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("a.w", &[2, 2], Init::fan_in(2)).unwrap();
        assert!(s.add("a.w", &[2], Init::Zeros).is_err());
    }

    #[test]
    fn init_is_reproducible_and_order_free() {
        let mut s1 = ParamStore::new();
        let a1 = s1.add("a", &[4, 4], Init::fan_in(4)).unwrap();
        let b1 = s1.add("b", &[3, 5], Init::fan_in(3)).unwrap();
        s1.initialize(7);
        let mut s2 = ParamStore::new();
        let b2 = s2.add("b", &[3, 5], Init::fan_in(3)).unwrap();
        let a2 = s2.add("a", &[4, 4], Init::fan_in(4)).unwrap();
        s2.initialize(7);
        assert_eq!(s1.value(a1), s2.value(a2));
        assert_eq!(s1.value(b1), s2.value(b2));
        s2.initialize(8);
        assert_ne!(s1.value(a1), s2.value(a2));
    }

    #[test]
    fn truncated_normal_stays_in_band() {
        let mut s = ParamStore::new();
        let w = s.add("w", &[64, 64], Init::fan_in(64)).unwrap();
        s.initialize(1);
        let bound = 2.0 / 8.0;
        assert!(s.value(w).data().iter().all(|v| v.abs() <= bound));
        let mean: f64 = s.value(w).data().iter().sum::<f64>() / 4096.0;
        assert!(mean.abs() < 0.01);
    }
}
