use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::SafeTensors;

use super::Scalar;
use crate::error::{Error, Result};

/// Named arrays plus string metadata, stored in the safetensors layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive<F> {
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<F>)>,
    pub metadata: BTreeMap<String, String>,
}

fn bad(e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(e.to_string())
}

impl<F: Scalar> Archive<F> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<F>) {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.tensors.insert(name.into(), (shape.to_vec(), values));
    }

    pub fn get(&self, name: &str) -> Result<&(Vec<usize>, Vec<F>)> {
        self.tensors.get(name).ok_or_else(|| bad(format!("missing tensor {name:?}")))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| bad(format!("missing metadata {key:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .tensors
            .iter()
            .map(|(k, (s, v))| (k.clone(), s.clone(), F::to_le_bytes_vec(v)))
            .collect();
        let views = bytes
            .iter()
            .map(|(k, s, b)| Ok((k.as_str(), TensorView::new(F::DTYPE, s.clone(), b).map_err(bad)?)))
            .collect::<Result<Vec<_>>>()?;
        let meta: HashMap<String, String> = self.metadata.clone().into_iter().collect();
        safetensors::serialize(views, &Some(meta)).map_err(bad)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let st = SafeTensors::deserialize(bytes).map_err(bad)?;
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(bad)?;
        let mut out = Self::new();
        if let Some(m) = header.metadata() {
            out.metadata = m.clone().into_iter().collect();
        }
        for name in st.names() {
            let view = st.tensor(name).map_err(bad)?;
            if view.dtype() != F::DTYPE {
                return Err(bad(format!("tensor {name:?} has dtype {:?}, expected {:?}", view.dtype(), F::DTYPE)));
            }
            out.tensors
                .insert(name.clone(), (view.shape().to_vec(), F::from_le_bytes_slice(view.data())));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
