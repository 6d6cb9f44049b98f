//! Named parameter tensors, the Adam optimizer and global-norm clipping.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use ndarray::Zip;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Gradients, Mat, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Mat>,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    shape: [usize; 2],
    data: Vec<f64>,
}

impl Serialize for ParamStore {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let map: BTreeMap<&str, TensorRecord> = self
            .tensors
            .iter()
            .map(|(k, v)| {
                (
                    k.as_str(),
                    TensorRecord {
                        shape: [v.nrows(), v.ncols()],
                        data: v.iter().copied().collect(),
                    },
                )
            })
            .collect();
        map.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ParamStore {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let map = BTreeMap::<String, TensorRecord>::deserialize(d)?;
        let mut tensors = BTreeMap::new();
        for (k, rec) in map {
            let m = Mat::from_shape_vec((rec.shape[0], rec.shape[1]), rec.data)
                .map_err(serde::de::Error::custom)?;
            tensors.insert(k, m);
        }
        Ok(Self { tensors })
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Mat> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Mat> {
        self.tensors.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Uniform initialization in `[-scale, scale]`.
    pub fn init_uniform<R: Rng>(&mut self, name: &str, rows: usize, cols: usize, scale: f64, rng: &mut R) {
        let m = Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-scale..=scale));
        self.insert(name, m);
    }

    /// SHA-256 over the names, shapes and raw bits of the selected tensors.
    pub fn digest<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> String {
        let mut h = Sha256::new();
        let mut sorted: Vec<&str> = names.into_iter().collect();
        sorted.sort_unstable();
        for name in sorted {
            h.update(name.as_bytes());
            if let Some(m) = self.get(name) {
                h.update((m.nrows() as u64).to_le_bytes());
                h.update((m.ncols() as u64).to_le_bytes());
                for v in m.iter() {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
        }
        format!("{:x}", h.finalize())
    }

    pub fn all_finite(&self) -> Option<&str> {
        self.tensors
            .iter()
            .find(|(_, v)| v.iter().any(|x| !x.is_finite()))
            .map(|(k, _)| k.as_str())
    }
}

/// Lazily binds store tensors to graph leaves. Tensors in the trainable set
/// become gradient-carrying leaves, everything else a constant.
pub struct Binder<'a> {
    store: &'a ParamStore,
    trainable: &'a BTreeSet<String>,
    bound: HashMap<String, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore, trainable: &'a BTreeSet<String>) -> Self {
        Self {
            store,
            trainable,
            bound: HashMap::new(),
        }
    }

    pub fn get(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.store.require(name)?.clone();
        let v = if self.trainable.contains(name) {
            g.param(value)
        } else {
            g.constant(value)
        };
        self.bound.insert(name.to_owned(), v);
        Ok(v)
    }

    pub fn value(&self, name: &str) -> Result<&Mat> {
        self.store.require(name)
    }

    /// Gradients of all bound trainable tensors that received one.
    pub fn collect(&self, grads: &mut Gradients) -> BTreeMap<String, Mat> {
        let mut out = BTreeMap::new();
        for (name, &v) in &self.bound {
            if !self.trainable.contains(name) {
                continue;
            }
            if let Some(g) = grads.take(v) {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Mat>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let f = max_norm / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|x| x * f);
        }
    }
    norm
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Mat, Mat)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every tensor that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Mat>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        for (name, g) in grads {
            let p = store
                .get_mut(name)
                .ok_or_else(|| Error::Checkpoint(format!("gradient for unknown tensor `{name}`")))?;
            if p.dim() != g.dim() {
                return Err(Error::Shape(format!("gradient shape mismatch for `{name}`")));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Mat::zeros(g.dim()), Mat::zeros(g.dim())));
            Zip::from(&mut *p)
                .and(&mut *m)
                .and(&mut *v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
        Ok(())
    }
}
