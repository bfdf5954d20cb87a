//! Minimal binary tensor-map format used by checkpoints and encoder
//! weight files: little-endian, versioned, deterministic byte layout.

use crate::error::{MpaError, Result};
use crate::tensor::Data;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::IxDyn;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: u32 = 0x4d50_544d; // "MPTM"
const VERSION: u16 = 1;

pub fn write_tensor_map(path: &Path, entries: &[(String, Data)]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_u32::<LittleEndian>(MAGIC)?;
    w.write_u16::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(entries.len() as u32)?;
    for (name, data) in entries {
        let bytes = name.as_bytes();
        w.write_u16::<LittleEndian>(bytes.len() as u16)?;
        w.write_all(bytes)?;
        w.write_u8(data.ndim() as u8)?;
        for &d in data.shape() {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for &v in data.iter() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensor_map(path: &Path) -> Result<Vec<(String, Data)>> {
    let file = std::fs::File::open(path).map_err(|e| {
        MpaError::config(format!("cannot open tensor file {}: {e}", path.display()))
    })?;
    let mut r = BufReader::new(file);
    let magic = r.read_u32::<LittleEndian>()?;
    if magic != MAGIC {
        return Err(MpaError::config(format!(
            "{} is not a tensor-map file (bad magic)",
            path.display()
        )));
    }
    let version = r.read_u16::<LittleEndian>()?;
    if version != VERSION {
        return Err(MpaError::config(format!(
            "unsupported tensor-map version {version}"
        )));
    }
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.read_u16::<LittleEndian>()? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| MpaError::config("tensor name is not valid utf-8".to_string()))?;
        let ndim = r.read_u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u64::<LittleEndian>()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(r.read_f64::<LittleEndian>()?);
        }
        let data = Data::from_shape_vec(IxDyn(&shape), values)
            .map_err(|e| MpaError::config(format!("bad tensor shape in file: {e}")))?;
        out.push((name, data));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_named_tensors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let entries = vec![
            (
                "a.weight".to_string(),
                Data::from_shape_vec(IxDyn(&[2, 3]), vec![1.0, -2.5, 3.0, 0.0, 5.5, -6.0])
                    .unwrap(),
            ),
            ("b.bias".to_string(), Data::zeros(IxDyn(&[4]))),
        ];
        write_tensor_map(&path, &entries).unwrap();
        let back = read_tensor_map(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "a.weight");
        assert_eq!(back[0].1, entries[0].1);
        assert_eq!(back[1].1.shape(), &[4]);
    }

    #[test]
    fn rejects_non_tensor_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"not a tensor map").unwrap();
        assert!(read_tensor_map(&path).is_err());
    }
}
