//! The LWAW weight container.
//!
//! ```text
//! "LWAWGT01"                 8-byte magic (the two digits are the version)
//! u32 little-endian          manifest length in bytes
//! manifest                   UTF-8 JSON: format, version, config, extra, tensors
//! zero padding               up to the next 64-byte boundary
//! data section               little-endian f32 blobs, each starting 64-byte aligned
//! ```
//!
//! Tensor offsets in the manifest are relative to the start of the data section.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Model, NetworkConfig};
use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{Element, Shape, Tensor};

pub const MAGIC: &[u8; 8] = b"LWAWGT01";
pub const VERSION: u32 = 1;
const MAGIC_PREFIX: &[u8; 6] = b"LWAWGT";
const ALIGN: usize = 64;
const FORMAT: &str = "LWAW";

/// One manifest entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerTensor {
    pub name: String,
    pub dtype: String,
    pub shape: Shape,
    pub offset: u64,
    pub length: u64,
    pub kind: ParamKind,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    config: Value,
    extra: Value,
    tensors: Vec<ContainerTensor>,
}

/// Decoded file contents: the config echo, free-form extra metadata and the tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub config: Value,
    pub extra: Value,
    pub tensors: ParamStore<f32>,
}

impl Container {
    pub fn new(config: Value, tensors: ParamStore<f32>) -> Self {
        Self {
            config,
            extra: Value::Null,
            tensors,
        }
    }

    /// The echoed network config, if the file carries one.
    pub fn network_config(&self) -> Result<NetworkConfig> {
        serde_json::from_value(self.config.clone()).map_err(|e| Error::Manifest(format!("config echo: {e}")))
    }
}

fn align_up(x: usize) -> usize {
    x.div_ceil(ALIGN) * ALIGN
}

pub fn encode_container(c: &Container) -> Vec<u8> {
    let mut entries = Vec::with_capacity(c.tensors.len());
    let mut offset = 0usize;
    for (name, e) in c.tensors.iter() {
        let length = e.tensor.len() * 4;
        entries.push(ContainerTensor {
            name: name.clone(),
            dtype: "f32".into(),
            shape: e.tensor.shape(),
            offset: offset as u64,
            length: length as u64,
            kind: e.kind,
        });
        offset = align_up(offset + length);
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        config: c.config.clone(),
        extra: c.extra.clone(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let header = MAGIC.len() + 4 + json.len();
    let data_start = align_up(header);
    let mut out = Vec::with_capacity(data_start + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.resize(data_start, 0);
    for ((_, e), entry) in c.tensors.iter().zip(&manifest.tensors) {
        out.resize(data_start + entry.offset as usize, 0);
        for v in e.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.resize(data_start + offset, 0);
    out
}

fn check_magic(bytes: &[u8]) -> Result<()> {
    if bytes.len() < MAGIC.len() {
        return Err(Error::Truncated(format!(
            "{} bytes, shorter than the magic",
            bytes.len()
        )));
    }
    let magic = &bytes[..MAGIC.len()];
    if magic == MAGIC {
        return Ok(());
    }
    if &magic[..6] == MAGIC_PREFIX {
        if let Ok(v) = std::str::from_utf8(&magic[6..]).unwrap_or("").parse::<u32>() {
            return Err(Error::UnsupportedVersion(v));
        }
    }
    Err(Error::BadMagic(magic.to_vec()))
}

pub fn decode_container(bytes: &[u8]) -> Result<Container> {
    check_magic(bytes)?;
    let len_end = MAGIC.len() + 4;
    if bytes.len() < len_end {
        return Err(Error::Truncated("manifest length field".into()));
    }
    let json_len = u32::from_le_bytes(bytes[MAGIC.len()..len_end].try_into().expect("4 bytes")) as usize;
    let json_end = len_end + json_len;
    if bytes.len() < json_end {
        return Err(Error::Truncated(format!(
            "manifest needs {json_len} bytes, file has {}",
            bytes.len() - len_end
        )));
    }
    let manifest: Manifest =
        serde_json::from_slice(&bytes[len_end..json_end]).map_err(|e| Error::Manifest(e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(Error::Manifest(format!(
            "format is {:?}, expected {FORMAT:?}",
            manifest.format
        )));
    }
    if manifest.version != VERSION {
        return Err(Error::UnsupportedVersion(manifest.version));
    }
    let data_start = align_up(json_end);
    let data = bytes.get(data_start..).unwrap_or(&[]);
    let mut tensors = ParamStore::new();
    for t in &manifest.tensors {
        if t.dtype != "f32" {
            return Err(Error::Manifest(format!(
                "tensor {}: unsupported dtype {:?}",
                t.name, t.dtype
            )));
        }
        let numel: usize = t.shape.iter().product();
        if t.length != (numel * 4) as u64 {
            return Err(Error::Manifest(format!(
                "tensor {}: byte length {} does not match shape {:?}",
                t.name, t.length, t.shape
            )));
        }
        if !(t.offset as usize).is_multiple_of(ALIGN) {
            return Err(Error::Manifest(format!(
                "tensor {}: offset {} is not 64-byte aligned",
                t.name, t.offset
            )));
        }
        if tensors.contains(&t.name) {
            return Err(Error::Manifest(format!("duplicate tensor {}", t.name)));
        }
        let start = t.offset as usize;
        let blob = data
            .get(start..start + t.length as usize)
            .ok_or_else(|| Error::Truncated(format!("tensor {} extends past end of file", t.name)))?;
        let values = blob
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        tensors.insert(t.name.clone(), Tensor::from_vec(t.shape, values)?, t.kind);
    }
    Ok(Container {
        config: manifest.config,
        extra: manifest.extra,
        tensors,
    })
}

pub fn write_container(path: &Path, c: &Container) -> Result<()> {
    fs::write(path, encode_container(c)).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<Container> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_container(&bytes)
}

/// Read just the tensors of a weight file.
pub fn load_weights(path: &Path) -> Result<ParamStore<f32>> {
    Ok(read_container(path)?.tensors)
}

/// What a load copied and what it skipped.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// Model tensors absent from the source (kept at their current values).
    pub missing: Vec<String>,
    /// Source tensors the model does not have (ignored).
    pub unexpected: Vec<String>,
}

impl<T: Element> Model<T> {
    pub fn to_container(&self) -> Container {
        Container::new(
            serde_json::to_value(&self.config).expect("config serializes"),
            self.params.cast(),
        )
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        write_container(path, &self.to_container())
    }

    /// Build a model from the config echo of a weight file and load its tensors strictly.
    pub fn from_weights_file(path: &Path) -> Result<Self> {
        let c = read_container(path)?;
        let mut model = Self::build(&c.network_config()?)?;
        model.load_params(&c.tensors, true)?;
        Ok(model)
    }

    /// Copy tensors from `src`. Strict loads require identical key sets;
    /// non-strict loads copy the intersection and keep the rest. Shapes must
    /// always match.
    pub fn load_params(&mut self, src: &ParamStore<f32>, strict: bool) -> Result<LoadReport> {
        let mut report = LoadReport::default();
        for name in self.params.names() {
            match src.get(name) {
                Some(_) => report.loaded.push(name.clone()),
                None => report.missing.push(name.clone()),
            }
        }
        report.unexpected = src.names().filter(|n| !self.params.contains(n)).cloned().collect();
        if strict {
            if let Some(name) = report.missing.first() {
                return Err(Error::MissingKey(name.clone()));
            }
            if let Some(name) = report.unexpected.first() {
                return Err(Error::UnexpectedKey(name.clone()));
            }
        }
        self.check_shapes(src, &report.loaded)?;
        for name in &report.loaded {
            self.params.set(name, src.tensor(name)?.cast())?;
        }
        Ok(report)
    }

    fn check_shapes(&self, src: &ParamStore<f32>, names: &[String]) -> Result<()> {
        for name in names {
            let expected = self.params.tensor(name)?.shape();
            let got = src.tensor(name)?.shape();
            if expected != got {
                return Err(Error::TensorShape {
                    name: name.clone(),
                    expected,
                    got,
                });
            }
        }
        Ok(())
    }

    /// Replace every encoder tensor from a weight file. All encoder tensors
    /// must be present with matching shapes, otherwise nothing is changed.
    /// Returns the number of tensors replaced.
    pub fn import_pretrained_encoder(&mut self, path: &Path) -> Result<usize> {
        let src = load_weights(path)?;
        self.import_encoder_params(&src)
    }

    pub fn import_encoder_params(&mut self, src: &ParamStore<f32>) -> Result<usize> {
        let names: Vec<String> = self
            .params
            .names()
            .filter(|n| n.starts_with("encoder."))
            .cloned()
            .collect();
        for name in &names {
            if !src.contains(name) {
                return Err(Error::MissingKey(name.clone()));
            }
        }
        self.check_shapes(src, &names)?;
        for name in &names {
            self.params.set(name, src.tensor(name)?.cast())?;
        }
        Ok(names.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut p = ParamStore::new();
        p.insert_param(
            "a.weight",
            Tensor::from_fn([2, 3, 1, 1], |[i, j, _, _]| (i * 3 + j) as f32 * 0.5 - 1.0),
        );
        p.insert_buffer("a.bn.running_var", Tensor::full([3, 1, 1, 1], f32::MIN_POSITIVE));
        p.insert_param("b", Tensor::from_vec([1, 1, 1, 1], vec![-0.0]).unwrap());
        Container::new(serde_json::json!({"k": 1}), p)
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let c = sample();
        let bytes = encode_container(&c);
        let back = decode_container(&bytes).unwrap();
        assert_eq!(back.config, c.config);
        for ((n1, e1), (n2, e2)) in c.tensors.iter().zip(back.tensors.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(e1.kind, e2.kind);
            let a: Vec<u32> = e1.tensor.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = e2.tensor.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        assert_eq!(encode_container(&back), bytes);
    }

    #[test]
    fn blobs_are_aligned() {
        let bytes = encode_container(&sample());
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let data_start = align_up(12 + len);
        assert!(bytes[12 + len..data_start].iter().all(|&b| b == 0));
        let m: Manifest = serde_json::from_slice(&bytes[12..12 + len]).unwrap();
        assert!(m.tensors.iter().all(|t| t.offset % 64 == 0));
        assert_eq!(data_start % 64, 0);
    }

    #[test]
    fn distinct_diagnostics() {
        let bytes = encode_container(&sample());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_container(&bad), Err(Error::BadMagic(_))));
        let mut v2 = bytes.clone();
        v2[6..8].copy_from_slice(b"02");
        assert!(matches!(decode_container(&v2), Err(Error::UnsupportedVersion(2))));
        assert!(matches!(
            decode_container(&bytes[..bytes.len() - 70]),
            Err(Error::Truncated(_))
        ));
        assert!(matches!(decode_container(&bytes[..5]), Err(Error::Truncated(_))));
        assert!(matches!(decode_container(&bytes[..20]), Err(Error::Truncated(_))));
    }
}
