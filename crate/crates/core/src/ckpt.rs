//! Checkpoint and blob files. A checkpoint is a JSON manifest naming the
//! variant, config and step, next to a binary blob of named tensors: a
//! name/offset index followed by concatenated tensor records.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::VariantId;
use crate::model::{ModelBundle, ModelConfig};
use crate::tensor::{serial, Tensor};

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path.display().to_string(), e)
}

/// Write a named-tensor blob: u32 entry count, then per entry a u32 name
/// length, the name bytes, u64 offset and u64 length (offsets relative to
/// the payload section), then the tensor records.
pub fn write_named_blob(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    w.write_all(&(entries.len() as u32).to_le_bytes())
        .map_err(io_err(path))?;
    let payloads: Vec<Vec<u8>> = entries.iter().map(|(_, t)| serial::to_bytes(t)).collect();
    let mut offset = 0u64;
    for ((name, _), payload) in entries.iter().zip(&payloads) {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u32).to_le_bytes())
            .map_err(io_err(path))?;
        w.write_all(nb).map_err(io_err(path))?;
        w.write_all(&offset.to_le_bytes()).map_err(io_err(path))?;
        w.write_all(&(payload.len() as u64).to_le_bytes())
            .map_err(io_err(path))?;
        offset += payload.len() as u64;
    }
    for payload in &payloads {
        w.write_all(payload).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Index of a named blob: (name, offset, length) in file order.
pub fn read_blob_index(path: &Path) -> Result<(Vec<(String, u64, u64)>, u64)> {
    let f = std::fs::File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(f);
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(io_err(path))?;
    let n = u32::from_le_bytes(b4) as usize;
    let mut index = Vec::with_capacity(n);
    let mut header = 4u64;
    for _ in 0..n {
        r.read_exact(&mut b4).map_err(io_err(path))?;
        let name_len = u32::from_le_bytes(b4) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(io_err(path))?;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(io_err(path))?;
        let offset = u64::from_le_bytes(b8);
        r.read_exact(&mut b8).map_err(io_err(path))?;
        let len = u64::from_le_bytes(b8);
        let name = String::from_utf8(name).map_err(|_| Error::Format {
            path: path.display().to_string(),
            msg: "non-utf8 tensor name".into(),
        })?;
        index.push((name, offset, len));
        header += 4 + name_len as u64 + 16;
    }
    Ok((index, header))
}

/// Read every tensor in a blob.
pub fn read_named_blob(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let (index, header) = read_blob_index(path)?;
    let f = std::fs::File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(f);
    r.seek(SeekFrom::Start(header)).map_err(io_err(path))?;
    let mut out = BTreeMap::new();
    // entries were written in offset order
    for (name, _, _) in index {
        let t = serial::read_record(&mut r)?;
        out.insert(name, t);
    }
    Ok(out)
}

/// Read a single tensor by name without loading the rest.
pub fn read_blob_entry(path: &Path, name: &str) -> Result<Tensor> {
    let (index, header) = read_blob_index(path)?;
    let (_, offset, _) = index
        .iter()
        .find(|(n, _, _)| n == name)
        .ok_or_else(|| Error::Format {
            path: path.display().to_string(),
            msg: format!("no tensor named '{name}'"),
        })?;
    let f = std::fs::File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(f);
    r.seek(SeekFrom::Start(header + offset)).map_err(io_err(path))?;
    serial::read_record(&mut r)
}

/// Checkpoint manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub stage: String,
    pub variant: VariantId,
    pub config: ModelConfig,
    pub step: usize,
    pub blob: String,
    pub has_optimizer: bool,
    #[serde(default)]
    pub metrics: Vec<crate::train::MetricRow>,
}

/// A loaded checkpoint: model, manifest, and any non-parameter tensors
/// (optimizer moments) keyed by their prefixed names.
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: ModelBundle,
    pub extra: BTreeMap<String, Tensor>,
}

pub fn checkpoint_paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{name}.json")), dir.join(format!("{name}.bin")))
}

/// Save a checkpoint as `<dir>/<name>.json` + `<dir>/<name>.bin`.
pub fn save_checkpoint(
    dir: &Path,
    name: &str,
    model: &ModelBundle,
    stage: &str,
    step: usize,
    extra: &BTreeMap<String, Tensor>,
    metrics: &[crate::train::MetricRow],
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (json_path, bin_path) = checkpoint_paths(dir, name);
    let mut entries: Vec<(String, Tensor)> = Vec::new();
    model.for_each_param(|n, t| entries.push((n.to_string(), t.clone())));
    for (n, t) in extra {
        entries.push((n.clone(), t.clone()));
    }
    write_named_blob(&bin_path, &entries)?;
    let meta = CheckpointMeta {
        kind: "checkpoint".into(),
        stage: stage.into(),
        variant: model.variant,
        config: model.config.clone(),
        step,
        blob: bin_path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        has_optimizer: extra.keys().any(|k| k.starts_with("opt.")),
        metrics: metrics.to_vec(),
    };
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Json {
        path: json_path.display().to_string(),
        source: e,
    })?;
    std::fs::write(&json_path, json).map_err(io_err(&json_path))?;
    Ok(json_path)
}

/// Load a checkpoint from its manifest path.
pub fn load_checkpoint(json_path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(json_path).map_err(io_err(json_path))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: json_path.display().to_string(),
        source: e,
    })?;
    let bin_path = json_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&meta.blob);
    let mut tensors = read_named_blob(&bin_path)?;
    let mut model = ModelBundle::init(meta.variant, meta.config.clone(), 0)?;
    let mut missing = Vec::new();
    let mut param_names = Vec::new();
    model.for_each_param(|n, _| param_names.push(n.to_string()));
    for name in &param_names {
        match tensors.remove(name) {
            Some(t) => model.set_param(name, t)?,
            None => missing.push(name.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Format {
            path: bin_path.display().to_string(),
            msg: format!("checkpoint is missing parameters: {missing:?}"),
        });
    }
    Ok(Checkpoint {
        meta,
        model,
        extra: tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dtype;

    #[test]
    fn named_blob_round_trips_and_seeks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        let entries = vec![
            (
                "a".to_string(),
                Tensor::from_f32(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            ),
            (
                "b/nested".to_string(),
                Tensor::from_f64(vec![3], vec![-1.0, 0.5, 9.0]).unwrap(),
            ),
        ];
        write_named_blob(&path, &entries).unwrap();
        let all = read_named_blob(&path).unwrap();
        assert_eq!(all.len(), 2);
        assert!(all["a"].bit_eq(&entries[0].1));
        assert!(all["b/nested"].bit_eq(&entries[1].1));
        let one = read_blob_entry(&path, "b/nested").unwrap();
        assert!(one.bit_eq(&entries[1].1));
        assert!(read_blob_entry(&path, "missing").is_err());
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = crate::model::ModelConfig {
            layers: 1,
            width: 8,
            heads: 2,
            ff_mult: 2,
            img_h: 8,
            img_w: 8,
            p_sem: 4,
            p_dor: 4,
            vocab: 8,
            max_text: 3,
            n_query: 2,
            horizon: 2,
            dtype: Dtype::F32,
            ..ModelConfig::default()
        };
        let model = ModelBundle::init(VariantId::Uam, cfg, 9).unwrap();
        let mut extra = BTreeMap::new();
        extra.insert(
            "opt.m.expert.sem.layer0.wq".to_string(),
            Tensor::zeros(vec![8, 8], Dtype::F32),
        );
        let json = save_checkpoint(dir.path(), "test", &model, "finetuned", 7, &extra, &[])
            .unwrap();
        let ck = load_checkpoint(&json).unwrap();
        assert_eq!(ck.meta.step, 7);
        assert_eq!(ck.meta.variant, VariantId::Uam);
        assert!(ck.meta.has_optimizer);
        assert_eq!(ck.model.param_digest(), model.param_digest());
        assert!(ck.extra.contains_key("opt.m.expert.sem.layer0.wq"));
    }
}
