use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::spec::{BlockId, NetworkSpec};
use crate::seed::{stream_rng, Stream};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Owner {
    Stem,
    Block(BlockId),
    Head,
}

impl fmt::Display for Owner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Owner::Stem => f.write_str("stem"),
            Owner::Block(id) => write!(f, "block.{id}"),
            Owner::Head => f.write_str("head"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub owner: Owner,
    pub name: String,
}

impl ParamKey {
    pub fn new(owner: Owner, name: impl Into<String>) -> Self {
        ParamKey {
            owner,
            name: name.into(),
        }
    }

    pub fn stem(name: &str) -> Self {
        Self::new(Owner::Stem, name)
    }

    pub fn block(id: BlockId, name: &str) -> Self {
        Self::new(Owner::Block(id), name)
    }

    pub fn head(name: &str) -> Self {
        Self::new(Owner::Head, name)
    }

    /// Running statistics are buffers, not trainable parameters.
    pub fn is_trainable(&self) -> bool {
        !(self.name.ends_with(".running_mean") || self.name.ends_with(".running_var"))
    }

    pub fn is_conv_weight(&self) -> bool {
        self.name.ends_with("conv.weight") || self.name.ends_with("conv1.weight") || self.name.ends_with("conv2.weight")
    }
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.owner, self.name)
    }
}

impl FromStr for ParamKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Params(format!("malformed parameter key `{s}`"));
        let (owner, name) = s.split_once('/').ok_or_else(bad)?;
        let owner = match owner {
            "stem" => Owner::Stem,
            "head" => Owner::Head,
            o => Owner::Block(o.strip_prefix("block.").ok_or_else(bad)?.parse().map_err(|_| bad())?),
        };
        Ok(ParamKey::new(owner, name))
    }
}

/// Keys of one batch-norm layer.
#[derive(Debug, Clone)]
pub struct BnKeys {
    pub scale: ParamKey,
    pub shift: ParamKey,
    pub running_mean: ParamKey,
    pub running_var: ParamKey,
}

impl BnKeys {
    pub fn new(owner: Owner, prefix: &str) -> Self {
        BnKeys {
            scale: ParamKey::new(owner, format!("{prefix}.scale")),
            shift: ParamKey::new(owner, format!("{prefix}.shift")),
            running_mean: ParamKey::new(owner, format!("{prefix}.running_mean")),
            running_var: ParamKey::new(owner, format!("{prefix}.running_var")),
        }
    }

    pub fn all(self) -> [ParamKey; 4] {
        [self.scale, self.shift, self.running_mean, self.running_var]
    }
}

/// Named parameter tensors of a network, including batch-norm buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T = f32> {
    entries: BTreeMap<ParamKey, Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }
}

fn key_stream_index(key: &ParamKey) -> u64 {
    // FNV-1a over the textual key: each tensor draws from its own stream, so a
    // tensor's initial value does not depend on which other blocks exist.
    key.to_string()
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// He-normal conv weights, unit batch-norm scale, zero shift, running
    /// statistics `(0, 1)`, and a uniform `±1/sqrt(fan_in)` classifier.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Self {
        Self::init_with_stream(spec, seed, Stream::Init)
    }

    pub(crate) fn init_with_stream(spec: &NetworkSpec, seed: u64, stream: Stream) -> Self {
        let mut store = ParamStore::new();
        let shapes = spec.param_shapes();
        let fc_in = shapes[&ParamKey::head("fc.weight")][1];
        for (key, shape) in shapes {
            let n: usize = shape.iter().product();
            let mut rng = stream_rng(seed, stream, key_stream_index(&key));
            let data: Vec<T> = if key.name.ends_with(".weight") && shape.len() == 4 {
                let fan_in = shape[1] * shape[2] * shape[3];
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
                (0..n).map(|_| T::of(normal.sample(&mut rng))).collect()
            } else if key.owner == Owner::Head {
                let bound = 1.0 / (fc_in as f64).sqrt();
                let uni = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                (0..n).map(|_| T::of(uni.sample(&mut rng))).collect()
            } else if key.name.ends_with(".scale") || key.name.ends_with(".running_var") {
                vec![T::one(); n]
            } else {
                vec![T::zero(); n]
            };
            store.insert(key, Tensor::from_vec(&shape, data).expect("shape from spec"));
        }
        store
    }

    pub fn insert(&mut self, key: ParamKey, value: Tensor<T>) -> Option<Tensor<T>> {
        self.entries.insert(key, value)
    }

    pub fn remove(&mut self, key: &ParamKey) -> Option<Tensor<T>> {
        self.entries.remove(key)
    }

    pub fn get(&self, key: &ParamKey) -> Result<&Tensor<T>> {
        self.entries
            .get(key)
            .ok_or_else(|| Error::Params(format!("missing tensor `{key}`")))
    }

    pub fn get_mut(&mut self, key: &ParamKey) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(key)
            .ok_or_else(|| Error::Params(format!("missing tensor `{key}`")))
    }

    pub fn contains(&self, key: &ParamKey) -> bool {
        self.entries.contains_key(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &Tensor<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&ParamKey, &mut Tensor<T>)> {
        self.entries.iter_mut()
    }

    pub fn keys(&self) -> impl Iterator<Item = &ParamKey> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&ParamKey, &Tensor<T>)> {
        self.entries.iter().filter(|(k, _)| k.is_trainable())
    }

    pub fn num_elements(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Verifies that keys and shapes are exactly those implied by `spec`.
    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        let expected = spec.param_shapes();
        for (key, shape) in &expected {
            match self.entries.get(key) {
                None => return Err(Error::Params(format!("missing tensor `{key}`"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Params(format!(
                        "`{key}` has shape {:?}, spec implies {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(orphan) = self.entries.keys().find(|k| !expected.contains_key(k)) {
            return Err(Error::Params(format!("orphan tensor `{orphan}`")));
        }
        Ok(())
    }

    /// Copies the entries `spec` needs; errors on gaps or shape changes.
    pub fn restricted_to(&self, spec: &NetworkSpec) -> Result<Self> {
        let mut out = ParamStore::new();
        for key in spec.param_shapes().into_keys() {
            out.insert(key.clone(), self.get(&key)?.clone());
        }
        out.check(spec)?;
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Zero tensors for every trainable entry.
    pub fn zeros_like_trainable(&self) -> Self {
        ParamStore {
            entries: self
                .trainable()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Bit-level equality of keys, shapes and values.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }

    /// L2 norm over trainable entries.
    pub fn trainable_norm(&self) -> f64 {
        self.trainable().map(|(_, t)| t.sq_norm()).sum::<f64>().sqrt()
    }

    /// `self += alpha * other` over the keys of `other`.
    pub fn axpy(&mut self, alpha: T, other: &ParamStore<T>) -> Result<()> {
        for (k, o) in &other.entries {
            let t = self.get_mut(k)?;
            for (a, &b) in t.data_mut().iter_mut().zip(o.data()) {
                *a += alpha * b;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

impl ParamStore<f32> {
    /// Writes `manifest.json` (key -> shape, dtype, byte offset) and a single
    /// little-endian `params.bin` blob into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = BTreeMap::new();
        let mut blob = Vec::with_capacity(self.num_elements() * 4);
        for (key, t) in &self.entries {
            manifest.insert(
                key.to_string(),
                ManifestEntry {
                    shape: t.shape().to_vec(),
                    dtype: "f32".into(),
                    offset: blob.len() as u64,
                },
            );
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        fs::write(dir.join(BLOB_FILE), blob)?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let manifest: BTreeMap<String, ManifestEntry> =
            serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        let blob = fs::read(dir.join(BLOB_FILE))?;
        let mut store = ParamStore::new();
        for (key, entry) in manifest {
            if entry.dtype != "f32" {
                return Err(Error::Params(format!("`{key}` has unsupported dtype {}", entry.dtype)));
            }
            let n: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let bytes = blob
                .get(start..start + 4 * n)
                .ok_or_else(|| Error::Params(format!("`{key}` extends past the end of {BLOB_FILE}")))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            store.insert(key.parse()?, Tensor::from_vec(&entry.shape, data)?);
        }
        Ok(store)
    }
}

/// Random tensor helper for tests and synthetic perturbations.
pub fn randomize<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, scale: f64) {
    let normal = Normal::new(0.0, scale).expect("finite scale");
    for (key, t) in store.iter_mut() {
        if key.name.ends_with(".running_var") {
            t.data_mut().iter_mut().for_each(|v| *v = T::of(0.5 + rng.random::<f64>()));
        } else {
            t.data_mut().iter_mut().for_each(|v| *v = T::of(normal.sample(rng)));
        }
    }
}
