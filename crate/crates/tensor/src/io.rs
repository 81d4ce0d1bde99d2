//! Safetensors serialization of a [`ParamStore`].

use std::collections::HashMap;
use std::path::Path;

use safetensors::{Dtype, SafeTensors};

use crate::error::{Result, TensorError};
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Serializes every entry (trainable and buffers) at its native precision.
pub fn to_safetensors_bytes<T: Scalar>(store: &ParamStore<T>) -> Result<Vec<u8>> {
    let raw: Vec<(String, Vec<usize>, Vec<u8>)> = store
        .entries()
        .iter()
        .map(|e| {
            let mut bytes = Vec::with_capacity(e.value.numel() * T::BYTES);
            for &v in e.value.data() {
                v.write_le(&mut bytes);
            }
            (e.name.clone(), e.value.shape().to_vec(), bytes)
        })
        .collect();
    let views = raw
        .iter()
        .map(|(name, shape, bytes)| {
            safetensors::tensor::TensorView::new(T::DTYPE, shape.clone(), bytes)
                .map(|v| (name.as_str(), v))
        })
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| TensorError::Format(e.to_string()))?;
    safetensors::serialize(views, None).map_err(|e| TensorError::Format(e.to_string()))
}

pub fn save_safetensors<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let bytes = to_safetensors_bytes(store)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Decodes all floating-point tensors of a safetensors buffer, converting
/// to `T`. Integer entries (such as batch counters) are skipped.
pub fn read_safetensors<T: Scalar>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| TensorError::Format(e.to_string()))?;
    let mut out = Vec::new();
    for (name, view) in st.tensors() {
        let data = view.data();
        let values: Vec<T> = match view.dtype() {
            Dtype::F32 => data
                .chunks_exact(4)
                .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect(),
            Dtype::F64 => data
                .chunks_exact(8)
                .map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
            Dtype::I64 | Dtype::I32 | Dtype::U8 | Dtype::BOOL => continue,
            other => {
                return Err(TensorError::ParamDtype {
                    name,
                    found: format!("{other:?}"),
                })
            }
        };
        out.push((name, Tensor::from_vec(view.shape(), values)?));
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

/// Overwrites store entries from `tensors`, mapping file names through
/// `rename`. Entries for which `rename` returns `None` are ignored. With
/// `require_all`, every store entry must be covered.
pub fn assign_tensors<T: Scalar>(
    store: &mut ParamStore<T>,
    tensors: Vec<(String, Tensor<T>)>,
    rename: impl Fn(&str) -> Option<String>,
    require_all: bool,
) -> Result<usize> {
    let mut seen = HashMap::new();
    for (name, t) in tensors {
        let Some(target) = rename(&name) else {
            continue;
        };
        let id = store
            .id(&target)
            .ok_or_else(|| TensorError::UnknownParam(target.clone()))?;
        store.set(id, t)?;
        seen.insert(id, ());
    }
    if require_all {
        if let Some(missing) = store.ids().find(|id| !seen.contains_key(id)) {
            return Err(TensorError::MissingParam(store.entry(missing).name.clone()));
        }
    }
    Ok(seen.len())
}

/// Strict load: names must match one-to-one (batch counters aside).
pub fn load_safetensors<T: Scalar>(store: &mut ParamStore<T>, bytes: &[u8]) -> Result<()> {
    let tensors = read_safetensors(bytes)?;
    assign_tensors(store, tensors, |n| Some(n.to_string()), true)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{Builder, Init};

    fn store() -> ParamStore<f32> {
        let mut b = Builder::new(5);
        b.scope("a", |b| b.param("w", &[2, 3], Init::KaimingUniform { fan_in: 3 }));
        b.buffer("stat", Tensor::full(&[2], 0.25));
        b.finish()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = store();
        let bytes = to_safetensors_bytes(&s).unwrap();
        let mut other = Builder::<f32>::new(99);
        other.scope("a", |b| b.param("w", &[2, 3], Init::Zeros));
        other.buffer("stat", Tensor::zeros(&[2]));
        let mut other = other.finish();
        load_safetensors(&mut other, &bytes).unwrap();
        for (x, y) in s.entries().iter().zip(other.entries()) {
            assert_eq!(x.value, y.value);
        }
    }

    #[test]
    fn truncated_and_mismatched_files_fail() {
        let s = store();
        let bytes = to_safetensors_bytes(&s).unwrap();
        let mut t = store();
        assert!(matches!(
            load_safetensors(&mut t, &bytes[..bytes.len() - 5]),
            Err(TensorError::Format(_))
        ));
        let mut b = Builder::<f32>::new(0);
        b.param("other", &[1], Init::Zeros);
        let mut wrong = b.finish();
        assert!(matches!(
            load_safetensors(&mut wrong, &bytes),
            Err(TensorError::UnknownParam(_))
        ));
    }
}
