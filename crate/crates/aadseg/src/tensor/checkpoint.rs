//! Flat binary checkpoint container.
//!
//! Layout: the magic bytes `AADCKPT1`, then one record per named array:
//! name length (u32 little-endian), UTF-8 name, rank (u32), each dim (u32),
//! then the row-major payload as little-endian f64. Round trips are
//! bit-exact.

use crate::error::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AADCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl CheckpointEntry {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        CheckpointEntry { name: name.into(), shape, data }
    }
}

pub fn write_checkpoint(path: &Path, entries: &[CheckpointEntry]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_to(&mut w, entries).map_err(|e| Error::io(path, e))
}

fn write_to<W: Write>(w: &mut W, entries: &[CheckpointEntry]) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    for e in entries {
        let name = e.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(e.shape.len() as u32).to_le_bytes())?;
        for &d in &e.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &e.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<CheckpointEntry>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, path, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "bad magic bytes"));
    }
    let mut entries = Vec::new();
    loop {
        let mut len4 = [0u8; 4];
        match r.read(&mut len4).map_err(|e| Error::io(path, e))? {
            0 => break,
            4 => {}
            n => {
                let mut rest = vec![0u8; 4 - n];
                read_exact(&mut r, &mut rest, path, "name length")?;
                len4[n..].copy_from_slice(&rest);
            }
        }
        let name_len = u32::from_le_bytes(len4) as usize;
        let mut name = vec![0u8; name_len];
        read_exact(&mut r, &mut name, path, "name")?;
        let name = String::from_utf8(name).map_err(|_| Error::format(path, "name not UTF-8"))?;
        let rank = read_u32(&mut r, path, "rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r, path, "dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            read_exact(&mut r, &mut buf, path, "payload")?;
            data.push(f64::from_le_bytes(buf));
        }
        entries.push(CheckpointEntry { name, shape, data });
    }
    Ok(entries)
}

fn read_u32<R: Read>(r: &mut R, path: &Path, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, path, what)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::format(path, format!("truncated {what}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let entries = vec![
            CheckpointEntry::new("enc.w", vec![2, 3], vec![1.5, -0.25, 1e-300, 0.0, -0.0, 7.0]),
            CheckpointEntry::new("enc.b", vec![1], vec![f64::MIN_POSITIVE]),
            CheckpointEntry::new("empty", vec![0], vec![]),
        ];
        write_checkpoint(&path, &entries).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back.len(), entries.len());
        for (a, b) in entries.iter().zip(&back) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            let bits_a: Vec<u64> = a.data.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        // save → load → save is byte-identical
        let path2 = dir.path().join("model2.ckpt");
        write_checkpoint(&path2, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn bad_magic_and_truncation_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTCKPT!").unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Format { .. })));

        let path = dir.path().join("trunc.ckpt");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&4u32.to_le_bytes());
        bytes.extend_from_slice(b"na"); // claims 4 bytes, provides 2
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Format { .. })));
    }
}
