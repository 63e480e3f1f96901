//! Single-file binary checkpoints: a versioned header, a JSON metadata
//! block, and named f64 tensor sections (model/discriminator parameters and
//! buffers, optimizer state). Little-endian throughout.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ArrayDyn;

pub const MAGIC: &[u8; 4] = b"RMTL";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Completed optimizer steps.
    pub step: u64,
    /// Best validation mIoU observed so far.
    pub best_val_miou: f64,
    /// Step at which the best mIoU was recorded.
    pub best_step: u64,
    /// Training-variant label (for provenance of the file).
    pub variant: String,
}

/// Named tensor groups (e.g. "model.params", "sgd.velocity") each holding
/// name → array entries in insertion order.
pub type Sections = IndexMap<String, IndexMap<String, ArrayDyn>>;

#[derive(Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub sections: Sections,
}

impl Checkpoint {
    pub fn section(&self, name: &str) -> Result<&IndexMap<String, ArrayDyn>> {
        self.sections
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing section {name}")))
    }
}

fn write_string(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_string(r: &mut impl Read) -> Result<String> {
    let len = r.read_u32::<LittleEndian>().map_err(|e| Error::io("checkpoint string length", e))? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|e| Error::io("checkpoint string", e))?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("non-utf8 name in checkpoint".into()))
}

fn write_array(w: &mut impl Write, a: &ArrayDyn) -> std::io::Result<()> {
    w.write_u8(a.ndim() as u8)?;
    for &d in a.shape() {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    for &v in a.iter() {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_array(r: &mut impl Read) -> Result<ArrayDyn> {
    let io = |e| Error::io("checkpoint tensor", e);
    let ndim = r.read_u8().map_err(io)? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.read_u64::<LittleEndian>().map_err(io)? as usize);
    }
    let len: usize = shape.iter().product();
    let mut data = vec![0.0; len];
    r.read_f64_into::<LittleEndian>(&mut data).map_err(io)?;
    ArrayD::from_shape_vec(IxDyn(&shape), data)
        .map_err(|e| Error::Checkpoint(format!("bad tensor shape in checkpoint: {e}")))
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let io = |e| Error::io(format!("writing checkpoint {}", path.display()), e);
    let file = File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    (|| -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        let meta = serde_json::to_vec(&ckpt.meta).expect("meta serializes");
        w.write_u64::<LittleEndian>(meta.len() as u64)?;
        w.write_all(&meta)?;
        w.write_u32::<LittleEndian>(ckpt.sections.len() as u32)?;
        for (name, entries) in &ckpt.sections {
            write_string(&mut w, name)?;
            w.write_u32::<LittleEndian>(entries.len() as u32)?;
            for (entry, array) in entries {
                write_string(&mut w, entry)?;
                write_array(&mut w, array)?;
            }
        }
        w.flush()
    })()
    .map_err(io)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let io = |e| Error::io(format!("reading checkpoint {}", path.display()), e);
    let file = File::open(path).map_err(io)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint file", path.display())));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = r.read_u64::<LittleEndian>().map_err(io)? as usize;
    let mut meta_buf = vec![0u8; meta_len];
    r.read_exact(&mut meta_buf).map_err(io)?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_buf)
        .map_err(|e| Error::Checkpoint(format!("bad checkpoint metadata: {e}")))?;

    let n_sections = r.read_u32::<LittleEndian>().map_err(io)?;
    let mut sections = Sections::new();
    for _ in 0..n_sections {
        let name = read_string(&mut r)?;
        let n_entries = r.read_u32::<LittleEndian>().map_err(io)?;
        let mut entries = IndexMap::new();
        for _ in 0..n_entries {
            let entry = read_string(&mut r)?;
            entries.insert(entry, read_array(&mut r)?);
        }
        sections.insert(name, entries);
    }
    Ok(Checkpoint { meta, sections })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample() -> Checkpoint {
        let mut sections = Sections::new();
        let mut params = IndexMap::new();
        params.insert(
            "conv.weight".to_string(),
            ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.0, -2.5, 3.25, 0.0, 1e-10, -7.0]).unwrap(),
        );
        params.insert("conv.bias".to_string(), ArrayD::from_elem(IxDyn(&[2]), 0.125));
        sections.insert("model.params".to_string(), params);
        let mut scalars = IndexMap::new();
        scalars.insert("t".to_string(), ArrayD::from_elem(IxDyn(&[]), 42.0));
        sections.insert("adam.t".to_string(), scalars);
        Checkpoint {
            meta: CheckpointMeta {
                step: 1500,
                best_val_miou: 0.731,
                best_step: 1000,
                variant: "multi_task".to_string(),
            },
            sections,
        }
    }

    #[test]
    fn roundtrip_preserves_everything_bitwise() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.rmtl");
        let ckpt = sample();
        write_checkpoint(&path, &ckpt).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back.meta, ckpt.meta);
        assert_eq!(back.sections.len(), ckpt.sections.len());
        for (name, entries) in &ckpt.sections {
            let got = back.section(name).unwrap();
            assert_eq!(got.len(), entries.len());
            for (entry, array) in entries {
                assert_eq!(&got[entry], array, "{name}/{entry}");
            }
        }
    }

    #[test]
    fn rewrite_is_byte_identical() {
        let dir = tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.rmtl"), dir.path().join("b.rmtl"));
        let ckpt = sample();
        write_checkpoint(&p1, &ckpt).unwrap();
        let back = read_checkpoint(&p1).unwrap();
        write_checkpoint(&p2, &back).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn rejects_foreign_and_truncated_files() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("junk.rmtl");
        std::fs::write(&path, b"PNG\x0d whatever").unwrap();
        let err = read_checkpoint(&path).unwrap_err();
        assert_eq!(err.code(), "E_CKPT");

        let good = dir.path().join("good.rmtl");
        write_checkpoint(&good, &sample()).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        let cut = dir.path().join("cut.rmtl");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(read_checkpoint(&cut).is_err());
    }

    #[test]
    fn missing_section_is_reported_by_name() {
        let ckpt = sample();
        let err = ckpt.section("disc.params").unwrap_err();
        assert!(err.to_string().contains("disc.params"));
    }
}
