//! Named-tensor archive.
//!
//! Layout (identical to the safetensors container, little-endian):
//!
//! ```text
//! [0..8)        u64  manifest length n
//! [8..8+n)      JSON manifest: { "<name>": { "dtype": "F32"|"F64",
//!                                            "shape": [..],
//!                                            "data_offsets": [begin, end] },
//!                                "__metadata__": { "<key>": "<string>" } }
//! [8+n..)       raw tensor bytes, offsets relative to this point
//! ```
//!
//! Metadata carries string key/values such as the geometry preset and the
//! model configuration. Manifest errors report the absolute byte offset.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use serde_json::Value;

use crate::error::{Error, Result};

const METADATA_KEY: &str = "__metadata__";

pub struct Archive {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

pub fn save_archive(
    path: &Path,
    tensors: &[(String, Tensor)],
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let contiguous = tensors
        .iter()
        .map(|(n, t)| Ok((n.clone(), t.contiguous()?)))
        .collect::<Result<Vec<_>>>()?;
    let info: HashMap<String, String> = metadata.clone().into_iter().collect();
    let bytes = safetensors::serialize(contiguous.iter().map(|(n, t)| (n.as_str(), t)), Some(info))
        .map_err(|e| Error::Load(vec![format!("serialize {}: {e}", path.display())]))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn byte_offset(text: &[u8], line: usize, column: usize) -> usize {
    let mut current = 1;
    for (i, &b) in text.iter().enumerate() {
        if current == line {
            return i + column.saturating_sub(1);
        }
        if b == b'\n' {
            current += 1;
        }
    }
    text.len()
}

/// Validates the manifest and returns the metadata block.
fn parse_manifest(bytes: &[u8]) -> Result<BTreeMap<String, String>> {
    if bytes.len() < 8 {
        return Err(Error::Parse {
            offset: bytes.len(),
            message: "file shorter than the 8-byte manifest length".into(),
        });
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let end = 8usize.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| Error::Parse {
        offset: 0,
        message: format!("manifest length {n} exceeds file size {}", bytes.len()),
    })?;
    let manifest = &bytes[8..end];
    let value: Value = serde_json::from_slice(manifest).map_err(|e| Error::Parse {
        offset: 8 + byte_offset(manifest, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let Value::Object(entries) = value else {
        return Err(Error::Parse {
            offset: 8,
            message: "manifest is not a JSON object".into(),
        });
    };
    let data_len = bytes.len() - end;
    let mut metadata = BTreeMap::new();
    for (name, entry) in &entries {
        if name == METADATA_KEY {
            if let Value::Object(map) = entry {
                for (k, v) in map {
                    if let Value::String(s) = v {
                        metadata.insert(k.clone(), s.clone());
                    }
                }
            }
            continue;
        }
        let offsets = entry
            .get("data_offsets")
            .and_then(Value::as_array)
            .and_then(|a| Some((a.first()?.as_u64()?, a.get(1)?.as_u64()?)));
        match offsets {
            Some((b, e)) if b <= e && (e as usize) <= data_len => {}
            _ => {
                let needle = format!("\"{name}\"");
                let pos = find(manifest, needle.as_bytes()).unwrap_or(0);
                return Err(Error::Parse {
                    offset: 8 + pos,
                    message: format!("tensor `{name}` has invalid data_offsets"),
                });
            }
        }
    }
    Ok(metadata)
}

fn find(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let metadata = parse_manifest(&bytes)?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)
        .map_err(|e| Error::Load(vec![format!("{}: {e}", path.display())]))?;
    Ok(Archive {
        tensors: tensors.into_iter().collect(),
        metadata,
    })
}

/// Outcome of mapping archive tensors onto a parameter set.
#[derive(Debug, Default)]
pub struct Assignment {
    /// Archive entries with no matching parameter.
    pub unmapped: Vec<String>,
}

/// Copies archive tensors into `params` by name. Every missing or
/// mis-shaped parameter is reported at once.
pub fn assign(
    params: Vec<(String, &mut Tensor)>,
    archive: &BTreeMap<String, Tensor>,
    prefix_filter: Option<&str>,
) -> Result<Assignment> {
    let mut problems = Vec::new();
    let mut used = std::collections::BTreeSet::new();
    let mut updates = Vec::new();
    for (name, slot) in params {
        match archive.get(&name) {
            None => problems.push(format!("missing tensor `{name}` {:?}", slot.dims())),
            Some(t) if t.dims() != slot.dims() => problems.push(format!(
                "shape mismatch for `{name}`: archive {:?}, expected {:?}",
                t.dims(),
                slot.dims()
            )),
            Some(t) => {
                used.insert(name.clone());
                updates.push((slot, t));
            }
        }
    }
    if !problems.is_empty() {
        return Err(Error::Load(problems));
    }
    for (slot, t) in updates {
        *slot = t.to_dtype(slot.dtype())?;
    }
    let unmapped = archive
        .keys()
        .filter(|k| !used.contains(*k))
        .filter(|k| prefix_filter.is_none_or(|p| k.starts_with(p)))
        .cloned()
        .collect();
    Ok(Assignment { unmapped })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let t = Tensor::arange(0f32, 6.0, &Device::Cpu).unwrap().reshape((2, 3)).unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("geometry".to_string(), "desk".to_string());
        save_archive(&path, &[("w".to_string(), t.clone())], &meta).unwrap();
        let a = read_archive(&path).unwrap();
        assert_eq!(a.metadata["geometry"], "desk");
        assert_eq!(a.tensors["w"].to_vec2::<f32>().unwrap(), t.to_vec2::<f32>().unwrap());
    }

    #[test]
    fn corrupted_manifest_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        let manifest = br#"{"w": {"dtype": "F32", "shape": [1], "data_offsets": [0, 4]}, oops}"#;
        let mut bytes = (manifest.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(manifest);
        bytes.extend_from_slice(&[0; 4]);
        std::fs::write(&path, &bytes).unwrap();
        match read_archive(&path) {
            Err(Error::Parse { offset, .. }) => {
                let expected = 8 + find(manifest, b"oops").unwrap();
                assert_eq!(offset, expected);
            }
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("corrupted manifest accepted"),
        }
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.ckpt");
        std::fs::write(&path, [1u8, 2, 3]).unwrap();
        assert!(matches!(read_archive(&path), Err(Error::Parse { offset: 3, .. })));
    }

    #[test]
    fn assign_enumerates_every_problem() {
        let mut a = Tensor::zeros((2, 2), candle_core::DType::F32, &Device::Cpu).unwrap();
        let mut b = Tensor::zeros(3, candle_core::DType::F32, &Device::Cpu).unwrap();
        let mut c = Tensor::zeros(1, candle_core::DType::F32, &Device::Cpu).unwrap();
        let mut archive = BTreeMap::new();
        archive.insert("a".to_string(), Tensor::ones((2, 2), candle_core::DType::F32, &Device::Cpu).unwrap());
        archive.insert("b".to_string(), Tensor::ones(4, candle_core::DType::F32, &Device::Cpu).unwrap());
        let err = assign(
            vec![("a".into(), &mut a), ("b".into(), &mut b), ("c".into(), &mut c)],
            &archive,
            None,
        )
        .unwrap_err();
        match err {
            Error::Load(list) => {
                assert_eq!(list.len(), 2);
                assert!(list[0].contains("`b`"));
                assert!(list[1].contains("`c`"));
            }
            other => panic!("{other}"),
        }
    }
}
