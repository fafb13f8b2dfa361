//! Named `f32` tensors in a safetensors container (little-endian).

use std::collections::HashMap;
use std::path::Path;

use kineflow_tensor::Array;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};

/// Tensors sorted by name, plus the string metadata.
pub struct TensorFile {
    pub tensors: Vec<(String, Array<f32>)>,
    pub metadata: HashMap<String, String>,
}

fn fmt_err(e: impl std::fmt::Display) -> Error {
    Error::Format(format!("safetensors: {e}"))
}

pub fn encode_tensors(tensors: &[(String, Array<f32>)], metadata: HashMap<String, String>) -> Result<Vec<u8>> {
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
        .iter()
        .map(|(n, a)| {
            let b = a.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            (n.clone(), a.shape().to_vec(), b)
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(n, s, b)| TensorView::new(Dtype::F32, s.clone(), b).map(|v| (n.as_str(), v)))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(fmt_err)?;
    let raw = safetensors::serialize(views, None).map_err(fmt_err)?;
    // Rewrite the header with sorted metadata so equal inputs give equal bytes.
    let n = u64::from_le_bytes(raw[..8].try_into().expect("length prefix")) as usize;
    let mut header: serde_json::Map<String, serde_json::Value> = serde_json::from_slice(&raw[8..8 + n]).map_err(fmt_err)?;
    if !metadata.is_empty() {
        let sorted: std::collections::BTreeMap<_, _> = metadata.into_iter().collect();
        header.insert("__metadata__".into(), serde_json::to_value(sorted).map_err(fmt_err)?);
    }
    let mut text = serde_json::to_vec(&header).map_err(fmt_err)?;
    text.resize(text.len().next_multiple_of(8), b' ');
    let mut out = Vec::with_capacity(8 + text.len() + raw.len() - 8 - n);
    out.extend((text.len() as u64).to_le_bytes());
    out.extend(text);
    out.extend(&raw[8 + n..]);
    Ok(out)
}

pub fn decode_tensors(bytes: &[u8]) -> Result<TensorFile> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(fmt_err)?;
    let st = SafeTensors::deserialize(bytes).map_err(fmt_err)?;
    let mut tensors = st
        .tensors()
        .into_iter()
        .map(|(name, v)| {
            if v.dtype() != Dtype::F32 {
                return Err(Error::Format(format!("tensor `{name}` is {:?}, expected F32", v.dtype())));
            }
            let data = v
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok((name, Array::new(v.shape().to_vec(), data)))
        })
        .collect::<Result<Vec<_>>>()?;
    tensors.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(TensorFile {
        tensors,
        metadata: meta.metadata().clone().unwrap_or_default(),
    })
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<TensorFile> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensors(&bytes)
}

pub fn write_tensor_file(
    path: impl AsRef<Path>,
    tensors: &[(String, Array<f32>)],
    metadata: HashMap<String, String>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensors(tensors, metadata)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let t = vec![
            ("b".to_string(), Array::new(vec![2, 1], vec![1.5f32, -0.0])),
            ("a".to_string(), Array::new(vec![3], vec![f32::MIN_POSITIVE, 7.0, 1e-30])),
        ];
        let meta = HashMap::from([("k".to_string(), "v".to_string())]);
        let back = decode_tensors(&encode_tensors(&t, meta.clone()).unwrap()).unwrap();
        assert_eq!(back.metadata, meta);
        assert_eq!(back.tensors[0], t[1]);
        assert_eq!(back.tensors[1].1.data()[1].to_bits(), (-0.0f32).to_bits());
        assert!(decode_tensors(b"garbage").is_err());
    }

    #[test]
    fn bytes_are_deterministic() {
        let t = vec![("w".to_string(), Array::new(vec![2], vec![1.0f32, 2.0]))];
        let pairs: Vec<(String, String)> = (0..20).map(|i| (format!("k{i}"), i.to_string())).collect();
        let a = encode_tensors(&t, pairs.iter().cloned().collect()).unwrap();
        let b = encode_tensors(&t, pairs.iter().rev().cloned().collect()).unwrap();
        assert_eq!(a, b);
        let n = u64::from_le_bytes(a[..8].try_into().unwrap()) as usize;
        assert_eq!(n % 8, 0);
        assert_eq!(decode_tensors(&a).unwrap().metadata.len(), 20);
    }
}
