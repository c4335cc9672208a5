//! Binary tensor container used for spectrograms, clips, and waveforms.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic   b"AVBT"
//! version u32 = 1
//! ndim    u32
//! dims    ndim × u32
//! data    product(dims) × f32
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"AVBT";
const VERSION: u32 = 1;

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let ndim = read_u32(&mut r)? as usize;
    if ndim > 8 {
        return Err(Error::Format(format!("implausible rank {ndim}")));
    }
    let shape = (0..ndim)
        .map(|_| read_u32(&mut r).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(shape, data)
}

pub fn save(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    read_tensor(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_fixed() {
        let t = Tensor::new(vec![2, 1], vec![1.5, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let mut want = b"AVBT".to_vec();
        for v in [1u32, 2, 2, 1] {
            want.extend(v.to_le_bytes());
        }
        want.extend(1.5f32.to_le_bytes());
        want.extend((-2.0f32).to_le_bytes());
        assert_eq!(buf, want);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(
            read_tensor(&b"NOPE\x01\0\0\0"[..]),
            Err(Error::Format(_))
        ));
        let t = Tensor::ones(&[3]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(read_tensor(&buf[..]).is_err());
    }

    proptest! {
        #[test]
        fn f32_values_round_trip(vals in proptest::collection::vec(-1e6f32..1e6, 1..40)) {
            let t = Tensor::new(vec![vals.len()], vals.iter().map(|&v| v as f64).collect()).unwrap();
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            prop_assert_eq!(read_tensor(&buf[..]).unwrap(), t);
        }
    }
}
