//! Binary checkpoints: magic bytes, a length-prefixed JSON header naming
//! every tensor, then raw little-endian `f64` data in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TextSrModel};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"TSRCKPT1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    step: usize,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(path: &Path, model: &TextSrModel, step: usize) -> Result<()> {
    let header = Header {
        step,
        config: model.config().clone(),
        tensors: model
            .store
            .iter()
            .map(|(_, p)| TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + json.len() + 8 * model.store.iter().map(|(_, p)| p.value.len()).sum::<usize>());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, p) in model.store.iter() {
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Rebuilds the model stored at `path`; returns it with its step count.
pub fn load_checkpoint(path: &Path) -> Result<(TextSrModel, usize)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..body]).map_err(|e| bad(&e.to_string()))?;
    let mut model = TextSrModel::new(&header.config, 0)?;
    let mut at = body;
    let mut values = Vec::with_capacity(header.tensors.len());
    for t in header.tensors {
        let n: usize = t.shape.iter().product();
        let end = at + 8 * n;
        if end > bytes.len() {
            return Err(bad("truncated tensor data"));
        }
        let data = bytes[at..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        at = end;
        values.push((t.name, Tensor::new(&t.shape, data)?));
    }
    if at != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    model.store.load_values(values)?;
    Ok((model, header.step))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let mut model = TextSrModel::new(&ModelConfig::default(), 7).unwrap();
        // Perturb so the checkpoint differs from a fresh init.
        let id = model.store.find("decoder.image.conv_out.weight").unwrap();
        let v = model.store.value_mut(id);
        *v = v.map(|x| x + 0.01);
        save_checkpoint(&path, &model, 12).unwrap();
        let (loaded, step) = load_checkpoint(&path).unwrap();
        assert_eq!(step, 12);
        assert_eq!(loaded.store, model.store);
        let x = Image::filled(3, 16, 16, 0.3);
        assert_eq!(loaded.infer(&x).unwrap(), model.infer(&x).unwrap());

        std::fs::write(&path, b"nonsense").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
        assert!(load_checkpoint(&dir.path().join("missing.bin")).unwrap_err().is_io());
    }
}
