//! Parameter storage with seeded initialization and checkpoint files.
//!
//! candle cannot seed its CPU generator, so every initial weight is drawn here
//! from a ChaCha stream; a fixed seed gives bit-identical networks.
//!
//! A checkpoint is one safetensors file. Its metadata carries a `format` tag,
//! a format `version` and a JSON `header` with the hyperparameters, seed and
//! training log; the tensors are the parameters in f32.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{ModelError, Result};

pub const CHECKPOINT_VERSION: &str = "1";

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// He normal for a layer with the given fan-in, optionally scaled.
    Kaiming { fan_in: usize, gain: f64 },
    Normal(f64),
    Zeros,
}

enum Source {
    Seeded(ChaCha8Rng),
    Loaded(HashMap<String, Tensor>),
}

pub struct ParamStore {
    source: Source,
    dtype: DType,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn seeded(seed: u64, dtype: DType) -> Self {
        Self {
            source: Source::Seeded(ChaCha8Rng::seed_from_u64(seed)),
            dtype,
            vars: BTreeMap::new(),
        }
    }

    pub fn from_tensors(tensors: HashMap<String, Tensor>, dtype: DType) -> Self {
        Self {
            source: Source::Loaded(tensors),
            dtype,
            vars: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Creates (or loads) the parameter `name` with the given shape.
    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(ModelError::InvalidInput(format!("parameter {name} declared twice")));
        }
        let tensor = match &mut self.source {
            Source::Seeded(rng) => {
                let n: usize = shape.iter().product();
                let values: Vec<f32> = match init {
                    Init::Zeros => vec![0.0; n],
                    Init::Normal(std) => sample_normal(rng, n, std),
                    Init::Kaiming { fan_in, gain } => {
                        sample_normal(rng, n, gain * (2.0 / fan_in.max(1) as f64).sqrt())
                    }
                };
                Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?
            }
            Source::Loaded(map) => {
                let t = map
                    .get(name)
                    .ok_or_else(|| ModelError::InvalidInput(format!("checkpoint lacks parameter {name}")))?;
                if t.dims() != shape {
                    return Err(ModelError::InvalidInput(format!(
                        "parameter {name}: checkpoint shape {:?}, model expects {shape:?}",
                        t.dims()
                    )));
                }
                t.to_dtype(self.dtype)?
            }
        };
        let var = Var::from_tensor(&tensor)?;
        let t = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(t)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn named_vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    fn export(&self) -> Result<Vec<(String, Tensor)>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().to_dtype(DType::F32)?)))
            .collect()
    }
}

fn sample_normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f32> {
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| dist.sample(rng) as f32).collect()
}

pub fn save_checkpoint<H: Serialize>(path: &Path, format: &str, header: &H, params: &ParamStore) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| ModelError::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    let header = serde_json::to_string(header).map_err(|e| ModelError::checkpoint(path, e.to_string()))?;
    let metadata = HashMap::from([
        ("format".to_string(), format.to_string()),
        ("version".to_string(), CHECKPOINT_VERSION.to_string()),
        ("header".to_string(), header),
    ]);
    let tensors = params.export()?;
    safetensors::tensor::serialize_to_file(tensors, Some(metadata), path)
        .map_err(|e| ModelError::checkpoint(path, e.to_string()))
}

pub fn load_checkpoint<H: DeserializeOwned>(path: &Path, format: &str) -> Result<(H, HashMap<String, Tensor>)> {
    let bytes = std::fs::read(path).map_err(|e| ModelError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| ModelError::checkpoint(path, e.to_string()))?;
    let info = meta
        .metadata()
        .as_ref()
        .ok_or_else(|| ModelError::checkpoint(path, "missing header metadata"))?;
    let found = info.get("format").map(String::as_str).unwrap_or("");
    if found != format {
        return Err(ModelError::checkpoint(path, format!("expected a {format} checkpoint, found {found:?}")));
    }
    let version = info.get("version").map(String::as_str).unwrap_or("");
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::checkpoint(path, format!("unsupported checkpoint version {version:?}")));
    }
    let header_json = info
        .get("header")
        .ok_or_else(|| ModelError::checkpoint(path, "missing header"))?;
    let header = serde_json::from_str(header_json).map_err(|e| ModelError::checkpoint(path, e.to_string()))?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    Ok((header, tensors))
}
