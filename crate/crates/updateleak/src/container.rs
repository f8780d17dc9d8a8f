//! The artifact container shared by checkpoints, corpora and reconstructions.
//!
//! Layout (safetensors): an 8-byte little-endian header length, a JSON header
//! describing every named array (dtype, shape, byte range) plus a
//! `__metadata__` string map, then the raw little-endian array bytes. The
//! metadata always carries `format`, `kind` and `config_hash`; owners add
//! their own keys (`arch_id`, `training_meta`, `seeds`, ...).

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::Tensor;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use crate::nn::DEVICE;
use crate::{Error, Result};

pub const FORMAT: &str = "updateleak/1";

#[derive(Debug, Clone, PartialEq)]
pub enum Array {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    I64 { shape: Vec<usize>, data: Vec<i64> },
}

impl Array {
    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Array::F32 { shape, data }
    }

    pub fn i64(data: Vec<i64>) -> Self {
        Array::I64 {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Ok(Array::f32(t.dims().to_vec(), crate::nn::flat_f32(t)?))
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Array::F32 { shape, .. } | Array::I64 { shape, .. } => shape,
        }
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match self {
            Array::F32 { data, .. } => Some(data),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<&[i64]> {
        match self {
            Array::I64 { data, .. } => Some(data),
            _ => None,
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        match self {
            Array::F32 { shape, data } => Ok(Tensor::from_vec(data.clone(), shape.as_slice(), &DEVICE)?),
            Array::I64 { shape, data } => Ok(Tensor::from_vec(data.clone(), shape.as_slice(), &DEVICE)?),
        }
    }

    fn bytes(&self) -> Vec<u8> {
        match self {
            Array::F32 { data, .. } => data.iter().flat_map(|v| v.to_le_bytes()).collect(),
            Array::I64 { data, .. } => data.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub metadata: BTreeMap<String, String>,
    pub arrays: BTreeMap<String, Array>,
}

impl Container {
    pub fn new(kind: &str, config_hash: &str) -> Self {
        let mut metadata = BTreeMap::new();
        metadata.insert("format".into(), FORMAT.into());
        metadata.insert("kind".into(), kind.into());
        metadata.insert("config_hash".into(), config_hash.into());
        Self {
            metadata,
            arrays: BTreeMap::new(),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn kind(&self) -> Option<&str> {
        self.meta("kind")
    }

    pub fn config_hash(&self) -> Option<&str> {
        self.meta("config_hash")
    }

    pub fn insert(&mut self, name: &str, array: Array) {
        self.arrays.insert(name.into(), array);
    }

    pub fn array(&self, name: &str, path: &Path) -> Result<&Array> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::format(path, format!("missing array `{name}`")))
    }

    pub fn f32s(&self, name: &str, path: &Path) -> Result<&[f32]> {
        self.array(name, path)?
            .as_f32()
            .ok_or_else(|| Error::format(path, format!("array `{name}` is not f32")))
    }

    pub fn i64s(&self, name: &str, path: &Path) -> Result<&[i64]> {
        self.array(name, path)?
            .as_i64()
            .ok_or_else(|| Error::format(path, format!("array `{name}` is not i64")))
    }

    /// Stores every variable of `varmap` as an f32 array named by its path,
    /// under `prefix`.
    pub fn insert_vars(&mut self, prefix: &str, varmap: &candle_nn::VarMap) -> Result<()> {
        for (name, t) in crate::nn::snapshot(varmap)? {
            self.insert(&format!("{prefix}{name}"), Array::from_tensor(&t)?);
        }
        Ok(())
    }

    /// Loads the arrays under `prefix` into `varmap`; every variable must be
    /// present with a matching shape.
    pub fn restore_vars(&self, prefix: &str, varmap: &candle_nn::VarMap, path: &Path) -> Result<()> {
        let values = self
            .arrays
            .iter()
            .filter_map(|(k, a)| k.strip_prefix(prefix).map(|n| (n.to_string(), a)))
            .map(|(k, a)| Ok((k, a.to_tensor()?)))
            .collect::<Result<HashMap<_, _>>>()?;
        crate::nn::restore(varmap, &values).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let bytes: Vec<(String, Array, Vec<u8>)> = self
            .arrays
            .iter()
            .map(|(k, a)| (k.clone(), a.clone(), a.bytes()))
            .collect();
        let views = bytes
            .iter()
            .map(|(k, a, b)| {
                let dtype = match a {
                    Array::F32 { .. } => Dtype::F32,
                    Array::I64 { .. } => Dtype::I64,
                };
                TensorView::new(dtype, a.shape().to_vec(), b).map(|v| (k.clone(), v))
            })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(Path::new("<memory>"), e.to_string()))?;
        let meta: HashMap<String, String> = self.metadata.clone().into_iter().collect();
        safetensors::serialize(views, Some(meta)).map_err(|e| Error::format(Path::new("<memory>"), e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf, path)
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let bad = |e: safetensors::SafeTensorError| Error::format(path, e.to_string());
        let (_, header) = SafeTensors::read_metadata(buf).map_err(bad)?;
        let metadata: BTreeMap<String, String> = header.metadata().clone().unwrap_or_default().into_iter().collect();
        if metadata.get("format").map(String::as_str) != Some(FORMAT) {
            return Err(Error::format(path, "not an updateleak artifact"));
        }
        let st = SafeTensors::deserialize(buf).map_err(bad)?;
        let mut arrays = BTreeMap::new();
        for (name, view) in st.tensors() {
            let shape = view.shape().to_vec();
            let raw = view.data();
            let array = match view.dtype() {
                Dtype::F32 => Array::F32 {
                    shape,
                    data: raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
                },
                Dtype::I64 => Array::I64 {
                    shape,
                    data: raw.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect(),
                },
                other => return Err(Error::format(path, format!("unsupported dtype {other:?} for `{name}`"))),
            };
            arrays.insert(name, array);
        }
        Ok(Self { metadata, arrays })
    }
}
