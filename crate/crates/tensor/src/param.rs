//! Named parameters, the ordered store that owns them, and the binary weight
//! container.
//!
//! Container layout (little-endian):
//!
//! ```text
//! magic   b"DSWT"
//! version u32 (= 1)
//! count   u32
//! count × { name_len u32, name utf-8, rank u32, dims u64 × rank, values f64 × numel }
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::{Rng, RngExt};

use crate::error::{NnError, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DSWT";
const VERSION: u32 = 1;

/// Initial value distribution of a parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanInUniform {
        fan_in: usize,
    },
    Constant(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    /// Frozen tensors (batch-norm running statistics) carry `false`.
    pub requires_grad: bool,
    pub init: Init,
}

/// Ordered list of parameters with unique names.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable parameter drawn from `init`.
    pub fn add<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> Result<ParamId> {
        let numel: usize = shape.iter().product();
        let data = match init {
            Init::FanInUniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..numel)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect()
            }
            Init::Constant(c) => vec![c; numel],
        };
        self.insert(name, Tensor::new(shape.to_vec(), data)?, true, init)
    }

    /// Registers a non-trainable buffer.
    pub fn add_frozen(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        let init = Init::Constant(value.data()[0]);
        self.insert(name, value, false, init)
    }

    fn insert(
        &mut self,
        name: &str,
        value: Tensor,
        requires_grad: bool,
        init: Init,
    ) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(NnError::Config(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad: None,
            requires_grad,
            init,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.requires_grad)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(grad) {
                    *a += b;
                }
            }
            None => {
                p.grad = Some(
                    Tensor::new(p.value.shape().to_vec(), grad.to_vec())
                        .expect("gradient shape matches parameter"),
                );
            }
        }
    }

    /// Flat copy of every parameter value, in store order.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor]) {
        assert_eq!(snapshot.len(), self.params.len(), "snapshot size mismatch");
        for (p, v) in self.params.iter_mut().zip(snapshot) {
            p.value = v.clone();
        }
    }

    /// Writes the ordered `(name, shape, values)` list.
    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        let entries: Vec<(&str, &Tensor)> = self
            .params
            .iter()
            .map(|p| (p.name.as_str(), &p.value))
            .collect();
        write_container(w, &entries)
    }

    /// Overwrites values from a container written by [`ParamStore::save`].
    /// Names, order and shapes must match this store exactly.
    pub fn load<R: Read>(&mut self, r: R) -> Result<()> {
        let entries = read_container(r)?;
        if entries.len() != self.params.len() {
            return Err(NnError::Format(format!(
                "expected {} tensors, container has {}",
                self.params.len(),
                entries.len()
            )));
        }
        for (p, (name, tensor)) in self.params.iter().zip(&entries) {
            if &p.name != name || p.value.shape() != tensor.shape() {
                return Err(NnError::Format(format!(
                    "entry `{name}` {:?} does not match parameter `{}` {:?}",
                    tensor.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
        }
        for (p, (_, tensor)) in self.params.iter_mut().zip(entries) {
            p.value = tensor;
        }
        Ok(())
    }
}

/// Writes named tensors in container order.
pub fn write_container<W: Write>(mut w: W, entries: &[(&str, &Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, value) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(value.rank() as u32).to_le_bytes())?;
        for &d in value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads every `(name, tensor)` entry of a weight container.
pub fn read_container<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::Format("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(NnError::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| NnError::Format(e.to_string()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        store
            .add("w", &[2, 2], Init::Constant(0.0), &mut rng)
            .unwrap();
        assert!(store.add("w", &[1], Init::Constant(0.0), &mut rng).is_err());
    }

    #[test]
    fn frozen_tensors_are_not_counted() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        store
            .add("w", &[10, 5], Init::FanInUniform { fan_in: 10 }, &mut rng)
            .unwrap();
        store.add("b", &[5], Init::Constant(0.0), &mut rng).unwrap();
        store
            .add_frozen("running_mean", Tensor::zeros(&[5]))
            .unwrap();
        assert_eq!(store.trainable_count(), 55);
    }

    #[test]
    fn fan_in_bound_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let id = store
            .add("w", &[100, 4], Init::FanInUniform { fan_in: 100 }, &mut rng)
            .unwrap();
        assert!(store.get(id).value.data().iter().all(|v| v.abs() < 0.1));
    }

    #[test]
    fn load_rejects_mismatched_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a = ParamStore::new();
        a.add("w", &[2], Init::Constant(1.0), &mut rng).unwrap();
        let mut buf = Vec::new();
        a.save(&mut buf).unwrap();
        let mut b = ParamStore::new();
        b.add("w", &[3], Init::Constant(1.0), &mut rng).unwrap();
        assert!(b.load(buf.as_slice()).is_err());
        assert!(b.load(&b"XXXX"[..]).is_err());
    }

    proptest! {
        #[test]
        fn container_round_trip_is_bit_exact(
            values in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let id = store.add("layer.w", &[values.len()], Init::Constant(0.0), &mut rng).unwrap();
            store.get_mut(id).value = Tensor::new(vec![values.len()], values.clone()).unwrap();
            store.add_frozen("bn.running_var", Tensor::full(&[3], 1.0)).unwrap();
            let mut buf = Vec::new();
            store.save(&mut buf).unwrap();

            let mut other = store.clone();
            for p in other.iter_mut() {
                p.value.data_mut().fill(0.0);
            }
            other.load(buf.as_slice()).unwrap();
            for (a, b) in store.iter().zip(other.iter()) {
                let bits_a: Vec<u64> = a.value.data().iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u64> = b.value.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
        }
    }
}
