//! Named parameter storage, initialisation and checkpoints.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MANIFEST: &str = "manifest.txt";
const BLOB: &str = "params.bin";
const MAGIC: &str = "genreg-checkpoint 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::invalid(format!("unknown precision `{other}` (expected f32 or f64)"))),
        }
    }
}

/// Ordered collection of named parameter tensors. Values live behind `Arc`
/// so worker threads can wrap them as graph leaves without copying.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Arc<Vec<f64>>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<f64>) -> Result<()> {
        let name = name.into();
        if values.len() != shape.iter().product::<usize>() {
            return Err(Error::shape(format!("parameter {name}: {} values for shape {shape:?}", values.len())));
        }
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.shapes.push(shape.to_vec());
        self.values.push(Arc::new(values));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn value(&self, i: usize) -> &[f64] {
        &self.values[i]
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.position(name).map(|i| self.values[i].as_slice())
    }

    pub fn set(&mut self, i: usize, values: Vec<f64>) {
        assert_eq!(values.len(), self.values[i].len(), "parameter {} size", self.names[i]);
        self.values[i] = Arc::new(values);
    }

    /// Mutable access, copying the buffer first if a graph still shares it.
    pub fn value_mut(&mut self, i: usize) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.values[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Merges another store, prefixing its names.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore) -> Result<()> {
        for i in 0..other.len() {
            self.insert(format!("{prefix}{}", other.names[i]), &other.shapes[i], other.values[i].to_vec())?;
        }
        Ok(())
    }

    /// The sub-store of entries whose name starts with `prefix` (stripped).
    pub fn strip_prefix(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for i in 0..self.len() {
            if let Some(rest) = self.names[i].strip_prefix(prefix) {
                out.index.insert(rest.to_string(), out.names.len());
                out.names.push(rest.to_string());
                out.shapes.push(self.shapes[i].clone());
                out.values.push(self.values[i].clone());
            }
        }
        out
    }

    /// Graph leaves for one forward pass. Names selected by `trainable`
    /// receive gradients.
    pub fn leaves(&self, trainable: impl Fn(&str) -> bool) -> Params {
        let tensors = (0..self.len())
            .map(|i| {
                Tensor::from_shared(self.values[i].clone(), &self.shapes[i], trainable(&self.names[i]))
                    .expect("stored shapes are valid")
            })
            .collect();
        Params { index: self.index.clone(), tensors }
    }
}

/// Per-pass view of a [`ParamStore`] as graph leaves.
pub struct Params {
    index: HashMap<String, usize>,
    tensors: Vec<Tensor>,
}

impl Params {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::Compatibility(format!("missing parameter {name}")))
    }

    /// Substitutes the leaf for `name` (used to probe gradients).
    pub fn replace(&mut self, name: &str, t: Tensor) -> Result<()> {
        let i = *self.index.get(name).ok_or_else(|| Error::Compatibility(format!("missing parameter {name}")))?;
        if t.shape() != self.tensors[i].shape() {
            return Err(Error::shape(format!("{name}: {:?} vs {:?}", t.shape(), self.tensors[i].shape())));
        }
        self.tensors[i] = t;
        Ok(())
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Gradients of every leaf in store order.
    pub fn grads(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(Tensor::grad).collect()
    }
}

/// Dense layer `[fan_in, fan_out]` with weights and bias drawn from
/// `U(−1/√fan_in, 1/√fan_in)`.
pub(crate) fn init_dense(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..=bound)).collect();
    let b = (0..fan_out).map(|_| rng.gen_range(-bound..=bound)).collect();
    store.insert(format!("{name}.w"), &[fan_in, fan_out], w)?;
    store.insert(format!("{name}.b"), &[fan_out], b)
}

pub(crate) fn init_zero_dense(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
    store.insert(format!("{name}.w"), &[fan_in, fan_out], vec![0.0; fan_in * fan_out])?;
    store.insert(format!("{name}.b"), &[fan_out], vec![0.0; fan_out])
}

pub fn config_hash(config_json: &str) -> String {
    let digest = Sha256::digest(config_json.as_bytes());
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Everything stored next to the parameter blob.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub step: usize,
    pub precision: Precision,
    /// Canonical JSON of the network configuration.
    pub config_json: String,
    pub config_hash: String,
}

/// Writes `manifest.txt` and `params.bin` into `dir`.
pub fn save_checkpoint(dir: &Path, store: &ParamStore, meta: &CheckpointMeta) -> Result<()> {
    fs::create_dir_all(dir)?;
    let width = match meta.precision {
        Precision::F32 => 4,
        Precision::F64 => 8,
    };
    let mut manifest = String::new();
    let _ = writeln!(manifest, "{MAGIC}");
    let _ = writeln!(manifest, "step {}", meta.step);
    let _ = writeln!(manifest, "precision {}", meta.precision.as_str());
    let _ = writeln!(manifest, "config_hash {}", meta.config_hash);
    let _ = writeln!(manifest, "config {}", meta.config_json);
    let mut blob = Vec::with_capacity(store.num_scalars() * width);
    let mut offset = 0;
    for i in 0..store.len() {
        let shape: Vec<String> = store.shapes[i].iter().map(usize::to_string).collect();
        let len = store.values[i].len();
        let _ = writeln!(manifest, "tensor {} {} {} {}", store.names[i], shape.join(","), offset, len);
        for &v in store.values[i].iter() {
            match meta.precision {
                Precision::F32 => blob.extend_from_slice(&(v as f32).to_le_bytes()),
                Precision::F64 => blob.extend_from_slice(&v.to_le_bytes()),
            }
        }
        offset += len;
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    fs::write(dir.join(BLOB), blob)?;
    Ok(())
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

/// Reads a checkpoint written by [`save_checkpoint`], checking every tensor
/// against the manifest and the blob length.
pub fn load_checkpoint(dir: &Path) -> Result<(ParamStore, CheckpointMeta)> {
    let manifest = fs::read_to_string(dir.join(MANIFEST))?;
    let blob = fs::read(dir.join(BLOB))?;
    let mut lines = manifest.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, l)) if l == MAGIC => {}
        _ => return Err(parse_err(1, format!("expected `{MAGIC}`"))),
    }
    let mut field = |key: &str| -> Result<(usize, String)> {
        let (n, l) = lines.next().ok_or_else(|| parse_err(0, format!("missing `{key}`")))?;
        let rest = l.strip_prefix(key).and_then(|r| r.strip_prefix(' ')).ok_or_else(|| parse_err(n, format!("expected `{key}`")))?;
        Ok((n, rest.to_string()))
    };
    let (n, step) = field("step")?;
    let step = step.parse().map_err(|_| parse_err(n, "bad step"))?;
    let (n, precision) = field("precision")?;
    let precision = Precision::parse(&precision).map_err(|e| parse_err(n, e.to_string()))?;
    let (_, config_hash) = field("config_hash")?;
    let (n, config_json) = field("config")?;
    if self::config_hash(&config_json) != config_hash {
        return Err(parse_err(n, "config does not match its recorded hash"));
    }
    let width = match precision {
        Precision::F32 => 4,
        Precision::F64 => 8,
    };
    let mut store = ParamStore::new();
    let mut expected_offset = 0;
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(' ').collect();
        if parts.len() != 5 || parts[0] != "tensor" {
            return Err(parse_err(n, "expected `tensor <name> <shape> <offset> <len>`"));
        }
        let shape: Vec<usize> = parts[2]
            .split(',')
            .map(|d| d.parse().map_err(|_| parse_err(n, format!("bad extent `{d}`"))))
            .collect::<Result<_>>()?;
        let offset: usize = parts[3].parse().map_err(|_| parse_err(n, "bad offset"))?;
        let len: usize = parts[4].parse().map_err(|_| parse_err(n, "bad length"))?;
        if len != shape.iter().product::<usize>() || shape.contains(&0) {
            return Err(parse_err(n, format!("length {len} does not match shape {shape:?}")));
        }
        if offset != expected_offset {
            return Err(parse_err(n, format!("offset {offset}, expected {expected_offset}")));
        }
        let bytes = blob
            .get(offset * width..(offset + len) * width)
            .ok_or_else(|| parse_err(n, "blob shorter than manifest"))?;
        let values = match precision {
            Precision::F32 => bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
            Precision::F64 => bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        };
        store.insert(parts[1], &shape, values)?;
        expected_offset += len;
    }
    if expected_offset * width != blob.len() {
        return Err(Error::Compatibility(format!("blob has {} bytes, manifest describes {}", blob.len(), expected_offset * width)));
    }
    Ok((store, CheckpointMeta { step, precision, config_json, config_hash }))
}
