//! Single-file checkpoints: a tar archive holding `manifest.json` and one raw
//! little-endian f32 buffer per parameter (and per optimizer moment, when present).

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};
use tdpcr_autodiff::Array;

use crate::error::{Error, Result};
use crate::optim::{AdamW, OptimConfig};
use crate::params::{Group, ParamStore};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Model family, e.g. `tdpcr` or `seg_probe`.
    pub model: String,
    /// Architecture config echo.
    pub config: serde_json::Value,
    /// Run config echo.
    pub run_config: serde_json::Value,
    pub phase: u8,
    pub step: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ParamEntry {
    group: Group,
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    file: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct OptimizerEntry {
    cfg: OptimConfig,
    total_steps: usize,
    t: usize,
    /// Parameter indices that carry moments.
    with_state: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    meta: CheckpointMeta,
    params: Vec<ParamEntry>,
    optimizer: Option<OptimizerEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore<f32>,
    pub optimizer: Option<AdamW>,
}

fn param_file(group: Group, name: &str) -> String {
    format!("params/{group}/{name}.f32")
}

fn moment_file(which: &str, group: Group, name: &str) -> String {
    format!("optim/{which}/{group}/{name}.f32")
}

fn le_bytes(a: &Array<f32>) -> Vec<u8> {
    a.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn append(builder: &mut tar::Builder<impl std::io::Write>, path: &str, bytes: &[u8]) -> std::io::Result<()> {
    let mut header = tar::Header::new_gnu();
    header.set_size(bytes.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_cksum();
    builder.append_data(&mut header, path, bytes)
}

pub fn save(path: &Path, meta: &CheckpointMeta, params: &ParamStore<f32>, optimizer: Option<&AdamW>) -> Result<()> {
    let entries: Vec<ParamEntry> = params
        .iter()
        .map(|(_, p)| ParamEntry { group: p.group, name: p.name.clone(), shape: p.value.shape().to_vec(), trainable: p.trainable, file: param_file(p.group, &p.name) })
        .collect();
    let opt_entry = optimizer.map(|o| OptimizerEntry {
        cfg: o.cfg,
        total_steps: o.total_steps,
        t: o.t,
        with_state: o.m.iter().enumerate().filter(|(_, m)| m.is_some()).map(|(i, _)| i).collect(),
    });
    let manifest = Manifest { format_version: FORMAT_VERSION, meta: meta.clone(), params: entries, optimizer: opt_entry };

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    let write = || -> std::io::Result<()> {
        let mut b = tar::Builder::new(BufWriter::new(File::create(&tmp)?));
        append(&mut b, "manifest.json", serde_json::to_string_pretty(&manifest).expect("manifest serialises").as_bytes())?;
        for (_, p) in params.iter() {
            append(&mut b, &param_file(p.group, &p.name), &le_bytes(&p.value))?;
        }
        if let Some(o) = optimizer {
            for (i, (_, p)) in params.iter().enumerate() {
                if let (Some(m), Some(v)) = (&o.m[i], &o.v[i]) {
                    append(&mut b, &moment_file("m", p.group, &p.name), &le_bytes(m))?;
                    append(&mut b, &moment_file("v", p.group, &p.name), &le_bytes(v))?;
                }
            }
        }
        b.into_inner()?.into_inner().map_err(|e| e.into_error())?.sync_all()
    };
    write().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut archive = tar::Archive::new(BufReader::new(file));
    let mut blobs: HashMap<String, Vec<u8>> = HashMap::new();
    let bad = |what: String| Error::Data(format!("{}: {what}", path.display()));
    for entry in archive.entries().map_err(|e| Error::io(path, e))? {
        let mut entry = entry.map_err(|e| Error::io(path, e))?;
        let name = entry.path().map_err(|e| Error::io(path, e))?.to_string_lossy().into_owned();
        let mut buf = Vec::new();
        entry.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
        blobs.insert(name, buf);
    }
    let manifest: Manifest = serde_json::from_slice(blobs.get("manifest.json").ok_or_else(|| bad("missing manifest.json".into()))?)
        .map_err(|e| bad(format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {}", manifest.format_version)));
    }
    let read_array = |file: &str, shape: &[usize]| -> Result<Array<f32>> {
        let bytes = blobs.get(file).ok_or_else(|| bad(format!("missing buffer {file}")))?;
        let n: usize = shape.iter().product();
        if bytes.len() != 4 * n {
            return Err(bad(format!("{file} holds {} bytes for shape {shape:?}", bytes.len())));
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Ok(Array::from_vec(shape, data)?)
    };
    let mut params = ParamStore::new();
    for e in &manifest.params {
        let id = params.add(e.group, e.name.clone(), read_array(&e.file, &e.shape)?);
        params.get_mut(id).trainable = e.trainable;
    }
    let optimizer = match &manifest.optimizer {
        None => None,
        Some(o) => {
            let mut m = vec![None; params.len()];
            let mut v = vec![None; params.len()];
            for &i in &o.with_state {
                let e = manifest.params.get(i).ok_or_else(|| bad(format!("optimizer state for unknown parameter {i}")))?;
                m[i] = Some(read_array(&moment_file("m", e.group, &e.name), &e.shape)?);
                v[i] = Some(read_array(&moment_file("v", e.group, &e.name), &e.shape)?);
            }
            Some(AdamW { cfg: o.cfg, total_steps: o.total_steps, t: o.t, m, v })
        }
    };
    Ok(Checkpoint { meta: manifest.meta, params, optimizer })
}

impl Checkpoint {
    /// Copies values into `store`, which must have exactly the same parameters (group,
    /// name, shape); trainable flags of `store` are kept.
    pub fn load_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Data(format!("checkpoint has {} parameters, model has {}", self.params.len(), store.len())));
        }
        let index: HashMap<(Group, &str), usize> = self.params.iter().map(|(id, p)| ((p.group, p.name.as_str()), id.index())).collect();
        let src: Vec<&Array<f32>> = self.params.iter().map(|(_, p)| &p.value).collect();
        for (_, p) in store.iter_mut() {
            let i = *index.get(&(p.group, p.name.as_str())).ok_or_else(|| Error::Data(format!("checkpoint lacks {}/{}", p.group, p.name)))?;
            if src[i].shape() != p.value.shape() {
                return Err(Error::Data(format!("{}/{}: checkpoint shape {:?}, model {:?}", p.group, p.name, src[i].shape(), p.value.shape())));
            }
            p.value = src[i].clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> CheckpointMeta {
        CheckpointMeta { model: "test".into(), config: serde_json::json!({"a": 1}), run_config: serde_json::Value::Null, phase: 1, step: 7, seed: 3 }
    }

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add(Group::OpticalEncoder, "w", Array::from_vec(&[2, 2], vec![1.0, -2.5, f32::MIN_POSITIVE, 3.25e-7]).unwrap());
        s.add(Group::SegHead, "b", Array::from_vec(&[3], vec![0.0, -0.0, 9.0]).unwrap());
        s.set_trainable(Group::OpticalEncoder, false);
        s
    }

    #[test]
    fn round_trip_with_optimizer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let s = store();
        let mut opt = AdamW::new(OptimConfig::default(), 10, &s);
        opt.t = 4;
        opt.m[1].as_mut().unwrap().data_mut()[2] = 0.5;
        save(&path, &meta(), &s, Some(&opt)).unwrap();
        let c = load(&path).unwrap();
        assert_eq!(c.meta, meta());
        assert_eq!(c.optimizer.unwrap(), opt);
        for ((_, a), (_, b)) in c.params.iter().zip(s.iter()) {
            assert_eq!(a.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            assert_eq!(a.trainable, b.trainable);
        }
    }

    #[test]
    fn load_into_validates_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save(&path, &meta(), &store(), None).unwrap();
        let c = load(&path).unwrap();
        let mut other = ParamStore::<f32>::new();
        other.add(Group::OpticalEncoder, "w", Array::zeros(&[4]));
        other.add(Group::SegHead, "b", Array::zeros(&[3]));
        assert!(matches!(c.load_into(&mut other), Err(Error::Data(_))));
        let mut same = store();
        same.iter_mut().for_each(|(_, p)| p.value.data_mut().fill(0.0));
        c.load_into(&mut same).unwrap();
        assert_eq!(same.group_checksum(Group::OpticalEncoder), store().group_checksum(Group::OpticalEncoder));
    }

    #[test]
    fn garbage_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"not a tar archive at all").unwrap();
        assert!(load(&path).is_err());
    }
}
