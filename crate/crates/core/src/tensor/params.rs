use std::collections::HashMap;
use std::io::{Read, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub type ParamId = usize;

const MAGIC: &[u8; 8] = b"DELIBPRM";
const VERSION: u32 = 1;

/// A named trainable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Arc<Tensor>,
    pub grad: Tensor,
}

/// Registry of model parameters, addressed by dense id or unique name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::usage(format!("duplicate parameter name `{name}`")));
        }
        let id = self.params.len();
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value: Arc::new(value),
            grad,
        });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id]
    }

    pub fn value(&self, id: ParamId) -> &Arc<Tensor> {
        &self.params[id].value
    }

    /// Mutable access to a value; clones the tensor if a graph still holds it.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.params[id].value)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.params[id].value.as_ref())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds `scale * grads` into the accumulated parameter gradients.
    pub fn accumulate(&mut self, grads: &super::Gradients, scale: f64) {
        for (id, g) in grads.iter() {
            let acc = self.params[*id].grad.data_mut();
            for (a, v) in acc.iter_mut().zip(g.data()) {
                *a += scale * v;
            }
        }
    }

    /// Serializes all parameters after a free-form UTF-8 metadata block.
    pub fn write<W: Write>(&self, mut w: W, meta: &str) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_block(&mut w, meta.as_bytes())?;
        let entries: Vec<Entry> = self
            .params
            .iter()
            .map(|p| Entry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect();
        let header = serde_json::to_vec(&entries).map_err(|e| Error::Checkpoint(e.to_string()))?;
        write_block(&mut w, &header)?;
        for p in &self.params {
            for v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<(ParamStore, String)> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a parameter file (bad magic)".into()));
        }
        let mut ver = [0u8; 4];
        r.read_exact(&mut ver)?;
        let ver = u32::from_le_bytes(ver);
        if ver != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {ver}")));
        }
        let meta = String::from_utf8(read_block(&mut r)?)
            .map_err(|e| Error::Checkpoint(format!("metadata is not UTF-8: {e}")))?;
        let entries: Vec<Entry> = serde_json::from_slice(&read_block(&mut r)?)
            .map_err(|e| Error::Checkpoint(format!("bad parameter header: {e}")))?;
        let mut store = ParamStore::new();
        let mut buf = [0u8; 8];
        for e in entries {
            let n: usize = e.shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            store.add(e.name, Tensor::new(e.shape, data)?)?;
        }
        Ok((store, meta))
    }

    /// True when names, shapes and every value bit agree.
    pub fn bit_equal(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a
                        .value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

fn write_block<W: Write>(w: &mut W, bytes: &[u8]) -> Result<()> {
    w.write_all(&(bytes.len() as u64).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_block<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamStore::new();
        ps.add("w", Tensor::zeros(&[2])).unwrap();
        assert!(ps.add("w", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn write_read_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ps = ParamStore::new();
        ps.add("enc.w", Tensor::normal(&[3, 4], 1.0, &mut rng)).unwrap();
        ps.add("enc.b", Tensor::vector(vec![f64::MIN_POSITIVE, -0.0, 1e300])).unwrap();
        ps.add("s", Tensor::scalar(std::f64::consts::PI)).unwrap();
        let mut buf = Vec::new();
        ps.write(&mut buf, "{\"k\":1}").unwrap();
        let (back, meta) = ParamStore::read(buf.as_slice()).unwrap();
        assert_eq!(meta, "{\"k\":1}");
        assert!(ps.bit_equal(&back));
    }

    #[test]
    fn bad_magic_is_rejected() {
        assert!(ParamStore::read(&b"NOTMAGIC\x01\0\0\0"[..]).is_err());
    }
}
