//! Named parameter storage shared by every network in the crate.
//!
//! Parameters live in a single ordered map keyed by dotted path. Requesting
//! the same path twice returns the same variable, which is how two modules
//! share weights.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, MutexGuard};

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{bail, Result};

/// Initialization scheme for a freshly created parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Const(f64),
    /// Normal(0, std) truncated at two standard deviations.
    TruncNormal {
        std: f64,
    },
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), i.e. Kaiming-uniform with a = sqrt(5).
    KaimingUniform {
        fan_in: usize,
    },
    Uniform {
        lo: f64,
        hi: f64,
    },
}

struct Entry {
    var: Var,
    trainable: bool,
}

struct Inner {
    entries: BTreeMap<String, Entry>,
    rng: ChaCha8Rng,
}

#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
    dtype: DType,
    device: Device,
    track: bool,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("len", &self.lock().entries.len())
            .field("dtype", &self.dtype)
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                entries: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            dtype,
            device: device.clone(),
            track: true,
        }
    }

    /// Store whose parameters are handed out without gradient tracking, so a
    /// forward pass keeps no graph alive. Gradients with respect to inputs
    /// still work. Loading weights updates the shared storage in place.
    pub fn inference(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            track: false,
            ..Self::new(seed, dtype, device)
        }
    }

    pub fn tracks_gradients(&self) -> bool {
        self.track
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().expect("parameter store poisoned")
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> ParamPath {
        ParamPath {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.lock().entries.get(name).map(|e| e.var.clone())
    }

    pub fn len(&self) -> usize {
        self.lock().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable variables in name order.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.lock()
            .entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, e)| (k.clone(), e.var.clone()))
            .collect()
    }

    /// Trainable variables whose name starts with `prefix`.
    pub fn trainable_under(&self, prefix: &str) -> Vec<(String, Var)> {
        self.trainable()
            .into_iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .collect()
    }

    pub fn num_trainable_elements(&self) -> usize {
        self.trainable().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Snapshot of every variable (trainable and buffers).
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.lock()
            .entries
            .iter()
            .map(|(k, e)| (k.clone(), e.var.as_detached_tensor()))
            .collect()
    }

    /// Overwrite every stored variable from `tensors`. The key sets must match
    /// exactly and shapes must agree.
    pub fn load(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        let inner = self.lock();
        for name in tensors.keys() {
            if !inner.entries.contains_key(name) {
                bail!(Checkpoint, "unexpected parameter `{name}`");
            }
        }
        for (name, entry) in inner.entries.iter() {
            let Some(t) = tensors.get(name) else {
                bail!(Checkpoint, "missing parameter `{name}`");
            };
            if t.shape() != entry.var.shape() {
                bail!(
                    Checkpoint,
                    "shape mismatch for `{name}`: stored {:?}, model {:?}",
                    t.dims(),
                    entry.var.dims()
                );
            }
            let t = t.to_dtype(self.dtype)?.to_device(&self.device)?;
            entry.var.set(&t)?;
        }
        Ok(())
    }

    fn create(&self, name: String, shape: Shape, init: Init, trainable: bool) -> Result<Var> {
        let mut inner = self.lock();
        if let Some(e) = inner.entries.get(&name) {
            if e.var.shape() != &shape {
                bail!(
                    Shape,
                    "parameter `{name}` requested with shape {:?} but exists with {:?}",
                    shape.dims(),
                    e.var.dims()
                );
            }
            return Ok(e.var.clone());
        }
        let n = shape.elem_count();
        let rng = &mut inner.rng;
        let mut draw: Box<dyn FnMut() -> f64 + '_> = match init {
            Init::Const(c) => Box::new(move || c),
            Init::TruncNormal { std } => Box::new(move || loop {
                let z: f64 = StandardNormal.sample(rng);
                if z.abs() <= 2.0 {
                    break z * std;
                }
            }),
            Init::KaimingUniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                Box::new(move || rng.random_range(-bound..bound))
            }
            Init::Uniform { lo, hi } => Box::new(move || rng.random_range(lo..hi)),
        };
        // Sampled in f64 and rounded once, without a full-size f64 copy for f32 stores.
        let t = match self.dtype {
            DType::F32 => Tensor::from_vec(
                (0..n).map(|_| draw() as f32).collect::<Vec<_>>(),
                shape,
                &self.device,
            )?,
            dt => Tensor::from_vec(
                (0..n).map(|_| draw()).collect::<Vec<_>>(),
                shape,
                &self.device,
            )?
            .to_dtype(dt)?,
        };
        drop(draw);
        let var = Var::from_tensor(&t)?;
        inner.entries.insert(
            name,
            Entry {
                var: var.clone(),
                trainable,
            },
        );
        Ok(var)
    }
}

/// A prefix into a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ParamPath {
    store: ParamStore,
    prefix: String,
}

impl ParamPath {
    pub fn pp(&self, name: impl std::fmt::Display) -> ParamPath {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        ParamPath {
            store: self.store.clone(),
            prefix,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }

    /// Trainable parameter. The returned tensor tracks gradients.
    pub fn param(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Tensor> {
        let var = self
            .store
            .create(self.full(name), shape.into(), init, true)?;
        Ok(if self.store.track {
            var.as_tensor().clone()
        } else {
            var.as_detached_tensor()
        })
    }

    /// Non-trainable state such as batch-norm running statistics.
    pub fn buffer(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Var> {
        self.store
            .create(self.full(name), shape.into(), init, false)
    }
}
