//! Parameter checkpoints: one line of JSON manifest, then every tensor's
//! data as little-endian `f64`, in manifest order.

use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use super::{ParamStore, Result, Tensor, TensorError};

pub const CHECKPOINT_FORMAT: &str = "stgrid-params";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint(store: &ParamStore, mut out: impl Write) -> Result<()> {
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        version: 1,
        tensors: store
            .iter()
            .map(|(name, t)| TensorEntry { name: name.to_string(), shape: t.shape().to_vec() })
            .collect(),
    };
    let line = serde_json::to_string(&manifest).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    out.write_all(line.as_bytes())?;
    out.write_all(b"\n")?;
    for (_, t) in store.iter() {
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint(input: impl Read) -> Result<ParamStore> {
    let mut reader = BufReader::new(input);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let manifest: CheckpointManifest =
        serde_json::from_str(line.trim_end()).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    if manifest.format != CHECKPOINT_FORMAT || manifest.version != 1 {
        return Err(TensorError::Checkpoint(format!(
            "unsupported format {} v{}",
            manifest.format, manifest.version
        )));
    }
    let mut store = ParamStore::new();
    let mut buf = [0u8; 8];
    for entry in manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            reader
                .read_exact(&mut buf)
                .map_err(|_| TensorError::Checkpoint(format!("truncated data for `{}`", entry.name)))?;
            data.push(f64::from_le_bytes(buf));
        }
        store.add(entry.name, Tensor::new(entry.shape, data)?);
    }
    let mut rest = Vec::new();
    reader.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(TensorError::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_fn([2, 3], |i| (i as f64).sin() * 1e-300));
        s.add("b", Tensor::new([1], vec![-0.0]).unwrap());
        let mut bytes = Vec::new();
        write_checkpoint(&s, &mut bytes).unwrap();
        let back = read_checkpoint(&bytes[..]).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.name(crate::tensor::ParamId(0)), "w");
        for ((_, a), (_, b)) in s.iter().zip(back.iter()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn truncated_data_is_rejected() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros([4]));
        let mut bytes = Vec::new();
        write_checkpoint(&s, &mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(read_checkpoint(&bytes[..]).is_err());
    }
}
