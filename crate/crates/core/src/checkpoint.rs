//! Model checkpoint container: a JSON header followed by an `EMB1` payload
//! holding every parameter tensor, flattened row-major into a single f32
//! column. Tensor shapes live in the header under `tensor_shapes`.
//!
//! ```text
//! b"LFCK" | u32 header_len | header JSON (UTF-8) | EMB1 store bytes
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde_json::Value;

use crate::data::EmbeddingStore;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LFCK";
const SHAPES_KEY: &str = "tensor_shapes";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Value,
    shapes: BTreeMap<String, (usize, usize)>,
    tensors: EmbeddingStore,
}

impl Checkpoint {
    pub fn new(header: Value) -> Self {
        Checkpoint {
            header,
            shapes: BTreeMap::new(),
            tensors: EmbeddingStore::new(),
        }
    }

    pub fn put_matrix(&mut self, name: &str, m: Array2<f64>) -> Result<()> {
        let shape = m.dim();
        let flat = Array2::from_shape_vec((shape.0 * shape.1, 1), m.iter().copied().collect())
            .expect("length matches");
        self.tensors.insert(name, flat, None)?;
        self.shapes.insert(name.to_string(), shape);
        Ok(())
    }

    pub fn put_vector(&mut self, name: &str, v: &Array1<f64>) -> Result<()> {
        self.put_matrix(name, v.clone().insert_axis(ndarray::Axis(0)))
    }

    pub fn matrix(&self, name: &str) -> Result<Array2<f64>> {
        let (entry, &shape) = self
            .tensors
            .get(name)
            .zip(self.shapes.get(name))
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{name}`")))?;
        Array2::from_shape_vec(shape, entry.embedding.iter().copied().collect())
            .map_err(|_| Error::Format(format!("tensor `{name}` does not match its shape")))
    }

    pub fn vector(&self, name: &str) -> Result<Array1<f64>> {
        let m = self.matrix(name)?;
        if m.nrows() != 1 {
            return Err(Error::Format(format!("tensor `{name}` is not a vector")));
        }
        Ok(m.row(0).to_owned())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let wrapped = serde_json::json!({ "header": self.header, SHAPES_KEY: self.shapes });
        let header = serde_json::to_vec(&wrapped).expect("json values serialize");
        let mut out = Vec::with_capacity(8 + header.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.tensors.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (magic mismatch)".into()));
        }
        let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let body = bytes
            .get(8..8 + n)
            .ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
        let mut wrapped: Value =
            serde_json::from_slice(body).map_err(|e| Error::Format(format!("header: {e}")))?;
        let shapes: BTreeMap<String, (usize, usize)> =
            serde_json::from_value(wrapped.get(SHAPES_KEY).cloned().unwrap_or(Value::Null))
                .map_err(|e| Error::Format(format!("{SHAPES_KEY}: {e}")))?;
        let header = wrapped
            .get_mut("header")
            .map(Value::take)
            .ok_or_else(|| Error::Format("checkpoint header missing".into()))?;
        let tensors = EmbeddingStore::from_bytes(&bytes[8 + n..])?;
        for (id, entry) in tensors.iter() {
            match shapes.get(id) {
                Some(&(r, c)) if r * c == entry.embedding.nrows() => {}
                _ => return Err(Error::Format(format!("tensor `{id}` has no matching shape"))),
            }
        }
        Ok(Checkpoint { header, shapes, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
