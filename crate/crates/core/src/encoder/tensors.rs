//! Named-tensor files in the safetensors container.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};

pub type TensorMap = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

/// Storage precision on write; reads accept f64, f32, f16 and bf16.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoreAs {
    F64,
    F32,
}

fn ckpt_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {msg}", path.display()))
}

pub fn write_tensors(path: &Path, tensors: &TensorMap, metadata: &BTreeMap<String, String>, store: StoreAs) -> Result<()> {
    let (dtype, bytes): (Dtype, Vec<(&String, &Vec<usize>, Vec<u8>)>) = match store {
        StoreAs::F64 => (
            Dtype::F64,
            tensors
                .iter()
                .map(|(n, (s, v))| (n, s, v.iter().flat_map(|x| x.to_le_bytes()).collect()))
                .collect(),
        ),
        StoreAs::F32 => (
            Dtype::F32,
            tensors
                .iter()
                .map(|(n, (s, v))| (n, s, v.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect()))
                .collect(),
        ),
    };
    let mut views = Vec::with_capacity(bytes.len());
    for (n, s, b) in &bytes {
        let view = TensorView::new(dtype, s.to_vec(), b).map_err(|e| ckpt_err(path, e))?;
        views.push((n.as_str(), view));
    }
    let meta: HashMap<String, String> = metadata.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    let data = safetensors::serialize(views, Some(meta)).map_err(|e| ckpt_err(path, e))?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, data).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn f16_to_f32(bits: u16) -> f32 {
    let sign = u32::from(bits >> 15) << 31;
    let exp = u32::from((bits >> 10) & 0x1f);
    let frac = u32::from(bits & 0x3ff);
    let out = match (exp, frac) {
        (0, 0) => sign,
        (0, _) => {
            // subnormal: renormalize
            let mut e = 127 - 15 + 1;
            let mut f = frac;
            while f & 0x400 == 0 {
                f <<= 1;
                e -= 1;
            }
            sign | ((e as u32) << 23) | ((f & 0x3ff) << 13)
        }
        (0x1f, _) => sign | 0x7f80_0000 | (frac << 13),
        _ => sign | ((exp + 127 - 15) << 23) | (frac << 13),
    };
    f32::from_bits(out)
}

fn decode(view: &TensorView<'_>) -> Option<Vec<f64>> {
    let d = view.data();
    Some(match view.dtype() {
        Dtype::F64 => d.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        Dtype::F32 => d
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect(),
        Dtype::F16 => d
            .chunks_exact(2)
            .map(|c| f64::from(f16_to_f32(u16::from_le_bytes([c[0], c[1]]))))
            .collect(),
        Dtype::BF16 => d
            .chunks_exact(2)
            .map(|c| f64::from(f32::from_bits(u32::from(u16::from_le_bytes([c[0], c[1]])) << 16)))
            .collect(),
        _ => return None,
    })
}

/// Reads every floating-point tensor and the string metadata. Non-float
/// tensors are skipped.
pub fn read_tensors(path: &Path) -> Result<(TensorMap, BTreeMap<String, String>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| ckpt_err(path, e))?;
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| ckpt_err(path, e))?;
    let metadata = meta
        .metadata()
        .as_ref()
        .map(|m| m.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
        .unwrap_or_default();
    let mut out = TensorMap::new();
    for (name, view) in st.tensors() {
        match decode(&view) {
            Some(v) => {
                out.insert(name, (view.shape().to_vec(), v));
            }
            None => log::debug!("{}: skipping non-float tensor {name}", path.display()),
        }
    }
    Ok((out, metadata))
}
