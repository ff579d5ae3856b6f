//! AFT1 tensor files and parameter-directory manifests.
//!
//! AFT1 layout, all integers little-endian:
//!
//! | bytes        | content                              |
//! |--------------|--------------------------------------|
//! | 4            | magic `AFT1`                         |
//! | 1            | dtype, 0 = f32, 1 = f64              |
//! | 1            | ndim                                 |
//! | 8 * ndim     | dims as u64                          |
//! | rest         | row-major payload                    |

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"AFT1";
pub const MANIFEST: &str = "manifest.txt";

pub fn encode_aft1<T: Real>(tensor: &Tensor<T>) -> Vec<u8> {
    let dtype = T::DTYPE;
    let mut out = Vec::with_capacity(6 + 8 * tensor.ndim() + dtype.size() * tensor.numel());
    out.extend_from_slice(MAGIC);
    out.push(dtype.code());
    out.push(tensor.ndim() as u8);
    for &d in tensor.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in tensor.data() {
        v.write_le(&mut out);
    }
    out
}

fn malformed(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "AFT1 tensor",
        detail: detail.into(),
    }
}

/// Decodes an AFT1 buffer, converting the payload to `T` if the stored
/// dtype differs.
pub fn decode_aft1<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(malformed("missing AFT1 magic"));
    }
    let dtype = DType::from_code(bytes[4]).ok_or_else(|| malformed(format!("unknown dtype {}", bytes[4])))?;
    let ndim = bytes[5] as usize;
    let header = 6 + 8 * ndim;
    if bytes.len() < header {
        return Err(malformed("truncated dims"));
    }
    let dims: Vec<usize> = bytes[6..header]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
        .collect();
    let numel = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| malformed("dims overflow"))?;
    let payload = &bytes[header..];
    if payload.len() != numel * dtype.size() {
        return Err(malformed(format!(
            "payload is {} bytes, dims {dims:?} need {}",
            payload.len(),
            numel * dtype.size()
        )));
    }
    let data: Vec<T> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::read_le(c) as f64))
            .collect(),
        DType::F64 => payload.chunks_exact(8).map(|c| T::from_f64(f64::read_le(c))).collect(),
    };
    Tensor::new(dims, data).map_err(|e| malformed(e.to_string()))
}

pub fn write_aft1<T: Real>(path: impl AsRef<Path>, tensor: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_aft1(tensor)).map_err(|e| Error::io(path, e))
}

pub fn read_aft1<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_aft1(&bytes)
}

/// Parses `key = file` lines; blank lines and `#` comments are skipped.
pub fn parse_manifest(text: &str) -> Result<BTreeMap<String, String>> {
    let mut entries = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, file) = line.split_once('=').ok_or_else(|| Error::Format {
            what: "manifest",
            detail: format!("line {}: expected `key = file`", lineno + 1),
        })?;
        let (key, file) = (key.trim(), file.trim());
        if key.is_empty() || file.is_empty() {
            return Err(Error::Format {
                what: "manifest",
                detail: format!("line {}: empty key or file", lineno + 1),
            });
        }
        entries.insert(key.to_string(), file.to_string());
    }
    Ok(entries)
}

pub fn render_manifest(entries: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    for (k, f) in entries {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(f);
        out.push('\n');
    }
    out
}

/// Writes named tensors as `<dir>/<name>.aft` plus a manifest.
pub fn save_tensor_dir<T: Real>(dir: impl AsRef<Path>, tensors: &BTreeMap<String, Tensor<T>>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = BTreeMap::new();
    for (name, tensor) in tensors {
        let file = format!("{}.aft", name.replace('/', "_"));
        write_aft1(dir.join(&file), tensor)?;
        manifest.insert(name.clone(), file);
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, render_manifest(&manifest)).map_err(|e| Error::io(path, e))
}

pub fn load_tensor_dir<T: Real>(dir: impl AsRef<Path>) -> Result<BTreeMap<String, Tensor<T>>> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    parse_manifest(&text)?
        .into_iter()
        .map(|(name, file)| Ok((name, read_aft1(dir.join(file))?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::<f32>::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let bytes = encode_aft1(&t);
        assert_eq!(&bytes[..4], b"AFT1");
        assert_eq!(bytes[4], 0);
        assert_eq!(bytes[5], 2);
        assert_eq!(&bytes[6..14], &2u64.to_le_bytes());
        assert_eq!(&bytes[14..22], &1u64.to_le_bytes());
        assert_eq!(&bytes[22..26], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 30);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(decode_aft1::<f32>(b"AFT2\0\0").is_err());
        assert!(decode_aft1::<f32>(b"AFT1\x07\x00").is_err());
        let mut bytes = encode_aft1(&Tensor::<f64>::zeros(&[3]));
        bytes.pop();
        assert!(decode_aft1::<f64>(&bytes).is_err());
    }

    #[test]
    fn widening_f32_to_f64() {
        let t = Tensor::<f32>::new(vec![3], vec![0.5, 1.25, -3.0]).unwrap();
        let back: Tensor<f64> = decode_aft1(&encode_aft1(&t)).unwrap();
        assert_eq!(back.data(), &[0.5, 1.25, -3.0]);
    }

    #[test]
    fn manifest_skips_comments() {
        let m = parse_manifest("# params\nfpn.w = fpn.w.aft\n\n a = b # trailing\n").unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m["a"], "b");
        assert!(parse_manifest("nokey\n").is_err());
    }

    #[test]
    fn directory_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut tensors = BTreeMap::new();
        tensors.insert("lateral.2.weight".to_string(), Tensor::<f64>::from_fn(&[2, 3], |i| i as f64));
        tensors.insert("head.bias".to_string(), Tensor::<f64>::zeros(&[4]));
        save_tensor_dir(dir.path(), &tensors).unwrap();
        let back: BTreeMap<String, Tensor<f64>> = load_tensor_dir(dir.path()).unwrap();
        assert_eq!(back, tensors);
    }

    proptest! {
        #[test]
        fn encode_decode_is_lossless(
            dims in prop::collection::vec(1usize..5, 1..5),
            seed in any::<u64>(),
        ) {
            let numel: usize = dims.iter().product();
            let data: Vec<f64> = (0..numel)
                .map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2))
                .collect();
            let t = Tensor::new(dims, data).unwrap();
            let back: Tensor<f64> = decode_aft1(&encode_aft1(&t)).unwrap();
            prop_assert!(back.bit_eq(&t));
        }
    }
}
