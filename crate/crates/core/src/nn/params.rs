use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, RwLock};

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Standard deviation of the zero-mean normal used for weight init.
pub const INIT_STD: f64 = 0.02;

/// Non-trainable state that evolves during training (power-iteration vectors).
pub type Buffer = Arc<RwLock<Tensor>>;

struct Inner {
    vars: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Buffer>,
    rng: ChaCha8Rng,
}

/// Named registry of every learnable tensor and buffer of one network.
///
/// Cloning is shallow: clones share the same tensors.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                vars: BTreeMap::new(),
                buffers: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            dtype,
            device: device.clone(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> ParamBuilder {
        ParamBuilder {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    /// Trainable variables in name order.
    pub fn vars(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().unwrap();
        inner
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn buffers(&self) -> Vec<(String, Buffer)> {
        let inner = self.inner.lock().unwrap();
        inner
            .buffers
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.inner.lock().unwrap().vars.get(name).cloned()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Digest over every variable and buffer, in name order.
    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in self.vars() {
            h.update(name.as_bytes());
            hash_tensor(&mut h, var.as_tensor())?;
        }
        for (name, buf) in self.buffers() {
            h.update(name.as_bytes());
            hash_tensor(&mut h, &buf.read().unwrap())?;
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Overwrites a variable or buffer in place.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let inner = self.inner.lock().unwrap();
        if let Some(var) = inner.vars.get(name) {
            if var.dims() != value.dims() {
                return Err(Error::shape("parameter assign", var.dims(), value.dims()));
            }
            var.set(&value.to_dtype(self.dtype)?)?;
            return Ok(());
        }
        if let Some(buf) = inner.buffers.get(name) {
            let mut slot = buf.write().unwrap();
            if slot.dims() != value.dims() {
                return Err(Error::shape("buffer assign", slot.dims(), value.dims()));
            }
            *slot = value.to_dtype(self.dtype)?;
            return Ok(());
        }
        Err(Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    fn normal(&self, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut inner = self.inner.lock().unwrap();
        let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut inner.rng)).collect();
        drop(inner);
        Ok(Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    fn register(&self, name: String, init: Tensor) -> Result<Var> {
        let var = Var::from_tensor(&init)?;
        let mut inner = self.inner.lock().unwrap();
        if inner.vars.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter {name}"
            )));
        }
        inner.vars.insert(name, var.clone());
        Ok(var)
    }

    fn register_buffer(&self, name: String, init: Tensor) -> Result<Buffer> {
        let buf = Arc::new(RwLock::new(init));
        let mut inner = self.inner.lock().unwrap();
        if inner.buffers.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate buffer {name}")));
        }
        inner.buffers.insert(name, buf.clone());
        Ok(buf)
    }
}

fn hash_tensor(h: &mut Sha256, t: &Tensor) -> Result<()> {
    let flat = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    for v in flat {
        h.update(v.to_le_bytes());
    }
    Ok(())
}

/// Hierarchical name scope used while constructing layers.
#[derive(Clone)]
pub struct ParamBuilder {
    store: ParamStore,
    prefix: String,
}

impl ParamBuilder {
    pub fn pp(&self, name: impl AsRef<str>) -> ParamBuilder {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        ParamBuilder {
            store: self.store.clone(),
            prefix,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }

    pub fn normal(&self, name: &str, shape: &[usize]) -> Result<Var> {
        let init = self.store.normal(shape, INIT_STD)?;
        self.store.register(self.path(name), init)
    }

    pub fn zeros(&self, name: &str, shape: &[usize]) -> Result<Var> {
        let init = Tensor::zeros(shape, self.store.dtype, &self.store.device)?;
        self.store.register(self.path(name), init)
    }

    pub fn ones(&self, name: &str, shape: &[usize]) -> Result<Var> {
        let init = Tensor::ones(shape, self.store.dtype, &self.store.device)?;
        self.store.register(self.path(name), init)
    }

    /// Buffer initialized to a random unit vector.
    pub fn unit_buffer(&self, name: &str, len: usize) -> Result<Buffer> {
        let v = self.store.normal(&[len], 1.0)?;
        let norm = v.sqr()?.sum_all()?.sqrt()?;
        let v = v.broadcast_div(&norm)?;
        self.store.register_buffer(self.path(name), v)
    }
}
