use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default logical model payload in bytes (5.6 MB).
pub const DEFAULT_MODEL_BYTES: u64 = 5_600_000;

/// One dense layer: `outputs x inputs` row-major weights followed by
/// `outputs` biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
}

impl LayerShape {
    pub fn weight_count(&self) -> usize {
        self.inputs * self.outputs
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + self.outputs
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    layers: Vec<LayerShape>,
}

/// Offsets of one layer inside the flat vector.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerSlot {
    pub shape: LayerShape,
    pub weights: usize,
    pub biases: usize,
}

impl Layout {
    pub fn from_widths(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::config("layer_widths", "need at least input and output widths"));
        }
        if widths.contains(&0) {
            return Err(Error::config("layer_widths", "widths must be positive"));
        }
        Ok(Layout {
            layers: widths
                .windows(2)
                .map(|w| LayerShape {
                    inputs: w[0],
                    outputs: w[1],
                })
                .collect(),
        })
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerShape::param_count).sum()
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_width())
            .chain(self.layers.iter().map(|l| l.outputs))
            .collect()
    }

    pub(crate) fn slots(&self) -> Vec<LayerSlot> {
        let mut off = 0;
        self.layers
            .iter()
            .map(|&shape| {
                let slot = LayerSlot {
                    shape,
                    weights: off,
                    biases: off + shape.weight_count(),
                };
                off += shape.param_count();
                slot
            })
            .collect()
    }
}

/// Flat parameter vector of a Q-network plus the logical payload size it
/// represents on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector<T> {
    values: Vec<T>,
    layout: Layout,
    byte_size: u64,
}

impl<T: Scalar> ParamVector<T> {
    pub fn new(values: Vec<T>, layout: Layout, byte_size: u64) -> Result<Self> {
        if values.len() != layout.param_count() {
            return Err(Error::Layout(format!(
                "{} values for a layout of {} parameters",
                values.len(),
                layout.param_count()
            )));
        }
        if byte_size == 0 {
            return Err(Error::config("byte_size", "must be positive"));
        }
        Ok(ParamVector {
            values,
            layout,
            byte_size,
        })
    }

    pub fn zeros(layout: Layout) -> Self {
        let n = layout.param_count();
        ParamVector {
            values: vec![T::zero(); n],
            layout,
            byte_size: DEFAULT_MODEL_BYTES,
        }
    }

    /// A vector with the same layout and payload size but new values.
    pub fn like(&self, values: Vec<T>) -> Result<Self> {
        Self::new(values, self.layout.clone(), self.byte_size)
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn byte_size(&self) -> u64 {
        self.byte_size
    }

    pub fn with_byte_size(mut self, bytes: u64) -> Self {
        assert!(bytes > 0, "payload must be positive");
        self.byte_size = bytes;
        self
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ensure_same_layout(&self, other: &Self) -> Result<()> {
        if self.layout == other.layout {
            Ok(())
        } else {
            Err(Error::Layout(format!(
                "{:?} vs {:?}",
                self.layout.widths(),
                other.layout.widths()
            )))
        }
    }

    /// `self + alpha * other`.
    pub fn axpy(&self, alpha: T, other: &Self) -> Result<Self> {
        self.ensure_same_layout(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| a + alpha * b)
            .collect();
        self.like(values)
    }

    pub fn norm(&self) -> T {
        self.values.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.values.len() * T::WIDTH);
        for &v in &self.values {
            v.extend_le(&mut out);
        }
        out
    }

    pub fn from_le_bytes(bytes: &[u8], sidecar: &Sidecar) -> Result<Self> {
        if sidecar.dtype != T::DTYPE {
            return Err(Error::Layout(format!(
                "blob holds {} values, expected {}",
                sidecar.dtype,
                T::DTYPE
            )));
        }
        if bytes.len() != sidecar.len * T::WIDTH {
            return Err(Error::Layout(format!(
                "blob has {} bytes, sidecar promises {} values",
                bytes.len(),
                sidecar.len
            )));
        }
        let values = bytes.chunks_exact(T::WIDTH).map(T::from_le_slice).collect();
        Self::new(values, sidecar.layout.clone(), sidecar.byte_size)
    }

    pub fn sidecar(&self, tags: BTreeMap<String, String>) -> Sidecar {
        Sidecar {
            dtype: T::DTYPE.to_string(),
            len: self.values.len(),
            layout: self.layout.clone(),
            byte_size: self.byte_size,
            tags,
        }
    }

    /// Writes `<path>` as the raw blob and `<path>.json` as its sidecar.
    pub fn save(&self, path: &Path, tags: BTreeMap<String, String>) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_le_bytes())?;
        let sidecar = serde_json::to_string_pretty(&self.sidecar(tags))?;
        fs::write(sidecar_path(path), sidecar)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, Sidecar)> {
        let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
        let bytes = fs::read(path)?;
        Ok((Self::from_le_bytes(&bytes, &sidecar)?, sidecar))
    }
}

fn sidecar_path(blob: &Path) -> std::path::PathBuf {
    let mut s = blob.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// JSON description of a parameter blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub dtype: String,
    pub len: usize,
    pub layout: Layout,
    pub byte_size: u64,
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
}
