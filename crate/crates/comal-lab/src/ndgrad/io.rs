//! Tensor serialization.
//!
//! Single-tensor format `NDG1`: magic bytes `NDG1`, `u32` rank, `u32`
//! extents (little-endian), then the raw little-endian IEEE-754 f64 payload.
//! Containers (`NDGC1`) hold named tensors in one file behind a text index:
//! a header line `NDGC1 <count>`, then per tensor one name line followed by
//! its `NDG1` blob. Checkpoints and dataset files both use these.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::{Error, Real, Result};

pub const MAGIC: &[u8; 4] = b"NDG1";

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&(v as f64).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Parse(format!(
            "bad tensor magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let rank = u32::from_le_bytes(buf4) as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Parse(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut buf4)?;
        shape.push(u32::from_le_bytes(buf4) as usize);
    }
    let numel: usize = shape.iter().product();
    if numel == 0 || numel > (1 << 28) {
        return Err(Error::Parse(format!("implausible tensor shape {shape:?}")));
    }
    let mut data = Vec::with_capacity(numel);
    let mut buf8 = [0u8; 8];
    for _ in 0..numel {
        r.read_exact(&mut buf8)?;
        data.push(f64::from_le_bytes(buf8) as Real);
    }
    Tensor::from_vec(data, &shape)
}

pub fn save_tensor<P: AsRef<Path>>(path: P, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor<P: AsRef<Path>>(path: P) -> Result<Tensor> {
    read_tensor(&mut BufReader::new(File::open(path)?))
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-' | '/'))
}

pub fn write_container<W: Write>(w: &mut W, items: &[(String, Tensor)]) -> Result<()> {
    writeln!(w, "NDGC1 {}", items.len())?;
    for (name, t) in items {
        if !valid_name(name) {
            return Err(Error::InvalidArg(format!("bad tensor name {name:?}")));
        }
        writeln!(w, "{name}")?;
        write_tensor(w, t)?;
    }
    Ok(())
}

fn read_line<R: Read>(r: &mut R) -> Result<String> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte)?;
        if byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
        if line.len() > 4096 {
            return Err(Error::Parse("container line too long".into()));
        }
    }
    String::from_utf8(line).map_err(|_| Error::Parse("container line is not UTF-8".into()))
}

pub fn read_container<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let header = read_line(r)?;
    let count: usize = header
        .strip_prefix("NDGC1 ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Parse(format!("bad container header {header:?}")))?;
    let mut items = Vec::with_capacity(count);
    for _ in 0..count {
        let name = read_line(r)?;
        let t = read_tensor(r)?;
        items.push((name, t));
    }
    Ok(items)
}

pub fn save_container<P: AsRef<Path>>(path: P, items: &[(String, Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_container(&mut w, items)?;
    w.flush()?;
    Ok(())
}

pub fn load_container<P: AsRef<Path>>(path: P) -> Result<Vec<(String, Tensor)>> {
    read_container(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_roundtrip_is_bit_exact() {
        let t = Tensor::from_vec(vec![0.1, -2.5e-10, 3.0, f64::MIN_POSITIVE, 1e300, -0.0], &[2, 3])
            .unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], MAGIC);
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn container_roundtrip_preserves_order_and_names() {
        let items = vec![
            ("w1".to_string(), Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap()),
            ("block0/bias".to_string(), Tensor::from_vec(vec![-1.0], &[1]).unwrap()),
        ];
        let mut buf = Vec::new();
        write_container(&mut buf, &items).unwrap();
        let back = read_container(&mut buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "w1");
        assert_eq!(back[1].0, "block0/bias");
        assert_eq!(back[1].1.data(), items[1].1.data());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let buf = b"NOPE\x01\x00\x00\x00\x01\x00\x00\x00".to_vec();
        assert!(read_tensor(&mut buf.as_slice()).is_err());
    }
}
