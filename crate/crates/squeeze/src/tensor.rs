//! Named dense matrix storage: the S10T container and the model layer spec.
//!
//! ## S10T container layout
//!
//! ```text
//! magic "S10T" (4 bytes)
//! version        u16 LE            (currently 1)
//! header_length  u32 LE
//! header         UTF-8 JSON array  [{"name","shape","offset","length"}, ...]
//! payload        concatenated row-major f32 LE
//! ```
//!
//! `offset` and `length` are in bytes relative to the start of the payload
//! section. Tensors are written contiguously in name order, so re-saving a
//! loaded container is byte-stable. All persisted floats are 32-bit
//! little-endian; only 2-D tensors are supported.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const S10T_MAGIC: &[u8; 4] = b"S10T";
pub const S10T_VERSION: u16 = 1;

/// A named dense 2-D matrix of finite f32 values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    name: String,
    shape: [usize; 2],
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::BadHeader("tensor name must be non-empty".into()));
        }
        if rows == 0 || cols == 0 {
            return Err(Error::ShapeMismatch {
                tensor: name,
                detail: format!("shape [{rows}, {cols}] has a zero dimension"),
            });
        }
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::ShapeMismatch {
                tensor: name,
                detail: format!(
                    "shape [{rows}, {cols}] implies {} elements, data has {}",
                    rows * cols,
                    data.len()
                ),
            });
        }
        for (i, v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteValue {
                    tensor: name,
                    kind: if v.is_nan() { "NaN" } else { "Inf" }.into(),
                    index: i,
                });
            }
        }
        Ok(Tensor {
            name,
            shape: [rows, cols],
            data,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> [usize; 2] {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.shape[1]..(r + 1) * self.shape[1]]
    }

    /// Widen to the f64 compute representation.
    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(
            self.rows(),
            self.cols(),
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }

    /// Narrow an f64 matrix back to a storage tensor.
    pub fn from_matrix(name: impl Into<String>, m: &Matrix) -> Result<Self> {
        Tensor::new(
            name,
            m.rows(),
            m.cols(),
            m.data().iter().map(|&v| v as f32).collect(),
        )
    }
}

/// Container manifest: format version plus the endianness the payload was
/// written with (the format itself pins little-endian).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Manifest {
    pub version: u16,
    pub little_endian: bool,
}

impl Default for Manifest {
    fn default() -> Self {
        Manifest {
            version: S10T_VERSION,
            little_endian: true,
        }
    }
}

/// An ordered collection of uniquely named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    tensors: BTreeMap<String, Tensor>,
    pub manifest: Manifest,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<u64>,
    offset: u64,
    length: u64,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, tensor: Tensor) -> Result<()> {
        if self.tensors.contains_key(tensor.name()) {
            return Err(Error::BadHeader(format!(
                "duplicate tensor name {:?}",
                tensor.name()
            )));
        }
        self.tensors.insert(tensor.name().to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Tensors in name order.
    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.values()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Serialize to the S10T byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut payload: Vec<u8> = Vec::new();
        for t in self.tensors.values() {
            let offset = payload.len() as u64;
            for v in &t.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(HeaderEntry {
                name: t.name.clone(),
                shape: vec![t.shape[0] as u64, t.shape[1] as u64],
                offset,
                length: (t.data.len() * 4) as u64,
            });
        }
        let header = serde_json::to_vec(&entries).expect("header serialization");
        let mut out = Vec::with_capacity(10 + header.len() + payload.len());
        out.extend_from_slice(S10T_MAGIC);
        out.extend_from_slice(&self.manifest.version.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 10 {
            return Err(Error::TruncatedFile("container shorter than header".into()));
        }
        if &bytes[0..4] != S10T_MAGIC {
            return Err(Error::MagicMismatch {
                expected: String::from_utf8_lossy(S10T_MAGIC).into_owned(),
                found: String::from_utf8_lossy(&bytes[0..4]).into_owned(),
            });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != S10T_VERSION {
            return Err(Error::VersionUnsupported {
                found: version,
                supported: S10T_VERSION,
            });
        }
        let header_len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
        let header_end = 10usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::TruncatedFile("header length exceeds file".into()))?;
        let entries: Vec<HeaderEntry> = serde_json::from_slice(&bytes[10..header_end])
            .map_err(|e| Error::BadHeader(format!("header JSON: {e}")))?;
        let payload = &bytes[header_end..];

        let mut container = TensorContainer::new();
        container.manifest.version = version;
        for entry in entries {
            if entry.shape.len() != 2 {
                return Err(Error::ShapeMismatch {
                    tensor: entry.name,
                    detail: format!("expected 2-D shape, got {:?}", entry.shape),
                });
            }
            let rows = entry.shape[0] as usize;
            let cols = entry.shape[1] as usize;
            let elems = rows.checked_mul(cols).ok_or_else(|| Error::ShapeMismatch {
                tensor: entry.name.clone(),
                detail: "shape product overflows".into(),
            })?;
            if entry.length as usize != elems * 4 {
                return Err(Error::ShapeMismatch {
                    tensor: entry.name,
                    detail: format!(
                        "payload length {} does not match shape product {} x 4 bytes",
                        entry.length, elems
                    ),
                });
            }
            let start = entry.offset as usize;
            let end = start + entry.length as usize;
            if end > payload.len() {
                return Err(Error::TruncatedFile(format!(
                    "tensor {:?} payload [{start}, {end}) exceeds section of {} bytes",
                    entry.name,
                    payload.len()
                )));
            }
            let mut data = Vec::with_capacity(elems);
            for chunk in payload[start..end].chunks_exact(4) {
                data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
            }
            container.insert(Tensor::new(entry.name, rows, cols, data)?)?;
        }
        Ok(container)
    }
}

/// Load and validate a container from disk.
pub fn load_container(path: impl AsRef<Path>) -> Result<TensorContainer> {
    let path = path.as_ref();
    let bytes =
        fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    TensorContainer::from_bytes(&bytes)
}

/// Persist a container. Writes to a sibling temp file and renames, so a
/// failed save never leaves a partial artifact at `path`.
pub fn save_container(container: &TensorContainer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_atomic(path, &container.to_bytes())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(format!("renaming {} into place", tmp.display()), e)
    })
}

/// Pull the calibration activations out of a container: either its only
/// tensor, or the tensor named `calib` when there are several.
pub fn pick_calibration(container: &TensorContainer) -> Result<&Tensor> {
    if container.len() == 1 {
        return Ok(container.iter().next().expect("len checked"));
    }
    container.get("calib").ok_or_else(|| {
        Error::BadHeader(format!(
            "calibration container holds {} tensors and none is named \"calib\"",
            container.len()
        ))
    })
}

// ── Model layer spec ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Identity,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub weight: String,
    pub nonlinearity: Nonlinearity,
}

/// Ordered list of linear layers referencing weights in a container.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub notes: String,
}

impl ModelSpec {
    pub fn from_json(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| Error::BadHeader(format!("model spec JSON: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serialization")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_json().as_bytes())
    }
}

/// A validation finding; not an error — callers decide how to react.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Diagnostic {
    MissingTensor {
        layer: usize,
        name: String,
    },
    DimensionMismatch {
        layer: usize,
        upstream_out: usize,
        expected_in: usize,
    },
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Diagnostic::MissingTensor { layer, name } => {
                write!(f, "MissingTensor: layer {layer} references {name:?}")
            }
            Diagnostic::DimensionMismatch {
                layer,
                upstream_out,
                expected_in,
            } => write!(
                f,
                "DimensionMismatch: layer {layer} expects d_in {expected_in}, upstream d_out is {upstream_out}"
            ),
        }
    }
}

/// Check that every layer's weight resolves and consecutive layers chain:
/// layer ℓ's d_out must equal layer ℓ+1's d_in. Output is deterministic and
/// ordered by layer index.
pub fn validate_model(spec: &ModelSpec, container: &TensorContainer) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let mut prev_out: Option<usize> = None;
    for (idx, layer) in spec.layers.iter().enumerate() {
        match container.get(&layer.weight) {
            None => {
                diags.push(Diagnostic::MissingTensor {
                    layer: idx,
                    name: layer.weight.clone(),
                });
                prev_out = None;
            }
            Some(w) => {
                if let Some(up) = prev_out {
                    if up != w.cols() {
                        diags.push(Diagnostic::DimensionMismatch {
                            layer: idx,
                            upstream_out: up,
                            expected_in: w.cols(),
                        });
                    }
                }
                prev_out = Some(w.rows());
            }
        }
    }
    diags
}

#[cfg(test)]
mod tests {
    use super::*;

    fn container_with(tensors: Vec<Tensor>) -> TensorContainer {
        let mut c = TensorContainer::new();
        for t in tensors {
            c.insert(t).unwrap();
        }
        c
    }

    #[test]
    fn zero_tensor_round_trip() {
        let c = container_with(vec![Tensor::new("z", 2, 3, vec![0.0; 6]).unwrap()]);
        let back = TensorContainer::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back.get("z").unwrap().shape(), [2, 3]);
        assert_eq!(back.get("z").unwrap().data(), &[0.0; 6]);
    }

    #[test]
    fn empty_container_round_trip() {
        let c = TensorContainer::new();
        let bytes = c.to_bytes();
        let back = TensorContainer::from_bytes(&bytes).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn single_value_round_trip() {
        let c = container_with(vec![Tensor::new("a", 1, 1, vec![3.5]).unwrap()]);
        let back = TensorContainer::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.get("a").unwrap().data(), &[3.5]);
    }

    #[test]
    fn payload_length_mismatch_rejected() {
        let c = container_with(vec![Tensor::new("t", 2, 2, vec![1.0; 4]).unwrap()]);
        let mut bytes = c.to_bytes();
        // truncate payload by one float
        bytes.truncate(bytes.len() - 4);
        let err = TensorContainer::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::TruncatedFile(_)), "{err:?}");
        // shape/length disagreement in the header itself
        let err = Tensor::new("t", 2, 3, vec![1.0; 4]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn non_finite_rejected() {
        let err = Tensor::new("bad", 1, 2, vec![1.0, f32::NAN]).unwrap_err();
        match err {
            Error::NonFiniteValue { tensor, index, .. } => {
                assert_eq!(tensor, "bad");
                assert_eq!(index, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            Tensor::new("inf", 1, 1, vec![f32::INFINITY]).unwrap_err(),
            Error::NonFiniteValue { .. }
        ));

        // a NaN smuggled into an otherwise valid file must fail on load
        let c = container_with(vec![Tensor::new("x", 1, 1, vec![1.0]).unwrap()]);
        let mut bytes = c.to_bytes();
        let payload_at = bytes.len() - 4;
        bytes[payload_at..].copy_from_slice(&f32::NAN.to_le_bytes());
        let err = TensorContainer::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::NonFiniteValue { .. }));
    }

    #[test]
    fn hundred_random_tensors_bit_identical() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(101);
        let mut c = TensorContainer::new();
        for i in 0..100 {
            let rows = rng.gen_range(1..6);
            let cols = rng.gen_range(1..6);
            let data: Vec<f32> = (0..rows * cols)
                .map(|_| rng.gen_range(-1e4f32..1e4))
                .collect();
            c.insert(Tensor::new(format!("t{i:03}"), rows, cols, data).unwrap())
                .unwrap();
        }
        let back = TensorContainer::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.len(), 100);
        for (a, b) in c.iter().zip(back.iter()) {
            assert_eq!(a.name(), b.name());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(back.to_bytes(), c.to_bytes());
    }

    #[test]
    fn magic_and_version_checked() {
        let c = TensorContainer::new();
        let mut bytes = c.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            TensorContainer::from_bytes(&bytes).unwrap_err(),
            Error::MagicMismatch { .. }
        ));
        let mut bytes = c.to_bytes();
        bytes[4] = 9;
        assert!(matches!(
            TensorContainer::from_bytes(&bytes).unwrap_err(),
            Error::VersionUnsupported { found: 9, .. }
        ));
    }

    #[test]
    fn validate_model_chain() {
        let c = container_with(vec![
            Tensor::new("w0", 4, 8, vec![0.1; 32]).unwrap(),
            Tensor::new("w1", 2, 4, vec![0.1; 8]).unwrap(),
            Tensor::new("w2", 2, 2, vec![0.1; 4]).unwrap(),
        ]);
        let spec = ModelSpec {
            layers: ["w0", "w1", "w2"]
                .iter()
                .map(|w| LayerSpec {
                    weight: (*w).into(),
                    nonlinearity: Nonlinearity::Identity,
                })
                .collect(),
            notes: String::new(),
        };
        assert!(validate_model(&spec, &c).is_empty());

        let mut missing = spec.clone();
        missing.layers[1].weight = "w9".into();
        let diags = validate_model(&missing, &c);
        assert_eq!(diags.len(), 1);
        assert!(matches!(diags[0], Diagnostic::MissingTensor { layer: 1, .. }));
    }

    #[test]
    fn validate_model_dimension_mismatch() {
        let c = container_with(vec![
            Tensor::new("a", 4, 8, vec![0.0; 32]).unwrap(),
            Tensor::new("b", 3, 5, vec![0.0; 15]).unwrap(),
        ]);
        let spec = ModelSpec {
            layers: vec![
                LayerSpec {
                    weight: "a".into(),
                    nonlinearity: Nonlinearity::Identity,
                },
                LayerSpec {
                    weight: "b".into(),
                    nonlinearity: Nonlinearity::Identity,
                },
            ],
            notes: String::new(),
        };
        let diags = validate_model(&spec, &c);
        assert_eq!(diags.len(), 1);
        assert!(matches!(
            diags[0],
            Diagnostic::DimensionMismatch {
                layer: 1,
                upstream_out: 4,
                expected_in: 5,
            }
        ));
    }

    #[test]
    fn spec_json_round_trip() {
        let json = r#"{"layers":[{"weight":"w0","nonlinearity":"relu"}]}"#;
        let spec = ModelSpec::from_json(json).unwrap();
        assert_eq!(spec.layers.len(), 1);
        assert_eq!(spec.layers[0].nonlinearity, Nonlinearity::Relu);
    }
}
