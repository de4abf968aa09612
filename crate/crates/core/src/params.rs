//! Named trainable parameters with seeded initialization and persistence.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Owns the `Var`s of one model. Layers hold tensor handles that share
/// storage with these vars, so in-place updates are visible everywhere.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

/// Deep copy of every parameter value, used for rollback.
#[derive(Debug, Clone)]
pub struct Snapshot(BTreeMap<String, Tensor>);

impl Snapshot {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Registers a parameter initialized from f64 data.
    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let name = name.into();
        if self.vars.contains_key(&name) {
            return Err(Error::validation(format!("duplicate parameter {name}")));
        }
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(handle)
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let count: usize = shape.iter().product();
        let data = (0..count)
            .map(|_| if bound > 0.0 { rng.random_range(-bound..=bound) } else { 0.0 })
            .collect();
        self.insert(name, shape, data)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<Tensor> {
        let count: usize = shape.iter().product();
        self.insert(name, shape, vec![0.0; count])
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn snapshot(&self) -> Result<Snapshot> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.vars {
            out.insert(k.clone(), v.as_tensor().copy()?.detach());
        }
        Ok(Snapshot(out))
    }

    pub fn restore(&self, snap: &Snapshot) -> Result<()> {
        for (k, v) in &self.vars {
            let src = snap
                .0
                .get(k)
                .ok_or_else(|| Error::validation(format!("snapshot lacks parameter {k}")))?;
            v.set(src)?;
        }
        Ok(())
    }

    /// Copies values from another store with identical names and shapes.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        self.restore(&other.snapshot()?)
    }

    /// Exact equality of all values, for rollback checks.
    pub fn bit_equal(&self, snap: &Snapshot) -> Result<bool> {
        for (k, v) in &self.vars {
            let Some(s) = snap.0.get(k) else { return Ok(false) };
            let a: Vec<f64> = v.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
            let b: Vec<f64> = s.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
            if a.len() != b.len() || a.iter().zip(&b).any(|(x, y)| x.to_bits() != y.to_bits()) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: HashMap<String, Tensor> = self.vars.iter().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    /// Loads values into the existing parameters; names and shapes must match.
    pub fn load(&self, path: &Path) -> Result<()> {
        let map = candle_core::safetensors::load(path, &self.device)?;
        if map.len() != self.vars.len() {
            return Err(Error::validation(format!(
                "{} holds {} tensors, model has {}",
                path.display(),
                map.len(),
                self.vars.len()
            )));
        }
        for (k, v) in &self.vars {
            let t = map
                .get(k)
                .ok_or_else(|| Error::validation(format!("{} lacks parameter {k}", path.display())))?;
            if t.dims() != v.dims() {
                return Err(Error::shape(format!("{k}: {:?}", v.dims()), format!("{:?}", t.dims())));
            }
            v.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn snapshot_restore_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new(DType::F32, Device::Cpu);
        let w = store.uniform("w", &[3, 4], 0.5, &mut rng).unwrap();
        let snap = store.snapshot().unwrap();
        store.get("w").unwrap().set(&(w.clone() * 2.0).unwrap()).unwrap();
        assert!(!store.bit_equal(&snap).unwrap());
        // layer handles see the in-place update
        let seen: Vec<Vec<f32>> = w.to_vec2().unwrap();
        let snap_vals: Vec<Vec<f32>> = snap.get("w").unwrap().to_vec2().unwrap();
        assert_eq!(seen[0][0], 2.0 * snap_vals[0][0]);
        store.restore(&snap).unwrap();
        assert!(store.bit_equal(&snap).unwrap());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.safetensors");
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut a = ParamStore::new(DType::F32, Device::Cpu);
        a.uniform("x", &[5], 1.0, &mut rng).unwrap();
        a.uniform("y", &[2, 2], 1.0, &mut rng).unwrap();
        a.save(&path).unwrap();
        let mut b = ParamStore::new(DType::F32, Device::Cpu);
        b.zeros("x", &[5]).unwrap();
        b.zeros("y", &[2, 2]).unwrap();
        b.load(&path).unwrap();
        assert!(b.bit_equal(&a.snapshot().unwrap()).unwrap());
        let mut c = ParamStore::new(DType::F32, Device::Cpu);
        c.zeros("x", &[6]).unwrap();
        c.zeros("y", &[2, 2]).unwrap();
        assert!(c.load(&path).is_err());
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut s = ParamStore::new(DType::F64, Device::Cpu);
            s.uniform("w", &[10], 0.3, &mut rng).unwrap();
            s.snapshot().unwrap()
        };
        let (a, b) = (build(), build());
        let va: Vec<f64> = a.get("w").unwrap().to_vec1().unwrap();
        let vb: Vec<f64> = b.get("w").unwrap().to_vec1().unwrap();
        assert_eq!(va, vb);
        assert!(va.iter().all(|v| v.abs() <= 0.3));
    }
}
