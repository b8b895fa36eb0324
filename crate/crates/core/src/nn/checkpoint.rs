//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "IMPLCKPT"
//! version    u32       1
//! meta_len   u32       length of the metadata block in bytes
//! meta       UTF-8     free-form text (the model config for model checkpoints)
//! count      u32       number of tensors
//! per tensor:
//!   name_len u32, name UTF-8
//!   ndim     u32, dims u64 * ndim
//!   values   f64 * product(dims), IEEE-754 little-endian
//! ```
//!
//! Reading back a written container reproduces every value bit for bit.

use std::io::{Read, Write};
use std::path::Path;

use super::{NnError, ParamSet, ParamTensor};

pub const MAGIC: &[u8; 8] = b"IMPLCKPT";
pub const VERSION: u32 = 1;

pub fn write_container<W: Write>(mut w: W, meta: &str, params: &ParamSet) -> Result<(), NnError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    write_u32(&mut w, meta.len())?;
    w.write_all(meta.as_bytes())?;
    write_u32(&mut w, params.len())?;
    for (name, t) in params.iter() {
        write_u32(&mut w, name.len())?;
        w.write_all(name.as_bytes())?;
        write_u32(&mut w, t.shape().len())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.values() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_container<R: Read>(mut r: R) -> Result<(String, ParamSet), NnError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::Format("not a parameter container (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(NnError::Format(format!("unsupported container version {version}")));
    }
    let meta = read_string(&mut r)?;
    let count = read_u32(&mut r)?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name = read_string(&mut r)?;
        let ndim = read_u32(&mut r)? as usize;
        if ndim > 8 {
            return Err(NnError::Format(format!("tensor {name} has {ndim} dimensions")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            values.push(f64::from_le_bytes(b));
        }
        let tensor = ParamTensor::from_values(&shape, values)
            .map_err(|e| NnError::Format(format!("tensor {name}: {e}")))?;
        params.push(name, tensor);
    }
    Ok((meta, params))
}

pub fn save(path: &Path, meta: &str, params: &ParamSet) -> Result<(), NnError> {
    let mut buf = Vec::new();
    write_container(&mut buf, meta, params)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(String, ParamSet), NnError> {
    let bytes = std::fs::read(path)?;
    read_container(bytes.as_slice())
}

fn write_u32<W: Write>(w: &mut W, n: usize) -> Result<(), NnError> {
    let n = u32::try_from(n).map_err(|_| NnError::Format("length exceeds u32".into()))?;
    w.write_all(&n.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NnError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R) -> Result<String, NnError> {
    let len = read_u32(r)? as usize;
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| NnError::Format("invalid UTF-8 in container".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            values in prop::collection::vec(any::<f64>(), 1..40),
            meta in "[a-z =\n]{0,30}",
        ) {
            let mut p = ParamSet::new();
            p.push("a.w", ParamTensor::from_values(&[values.len()], values.clone()).unwrap());
            p.push("b", ParamTensor::from_values(&[1, 1], vec![-0.0]).unwrap());
            let mut buf = Vec::new();
            write_container(&mut buf, &meta, &p).unwrap();
            let (m2, p2) = read_container(buf.as_slice()).unwrap();
            prop_assert_eq!(m2, meta);
            prop_assert_eq!(p2.len(), 2);
            for ((n1, t1), (n2, t2)) in p.iter().zip(p2.iter()) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(t1.shape(), t2.shape());
                let bits1: Vec<u64> = t1.values().iter().map(|v| v.to_bits()).collect();
                let bits2: Vec<u64> = t2.values().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits1, bits2);
            }
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(
            read_container(&b"NOTACKPT\x01\x00\x00\x00"[..]),
            Err(NnError::Format(_))
        ));
        let mut p = ParamSet::new();
        p.push("x", ParamTensor::zeros(&[4]));
        let mut buf = Vec::new();
        write_container(&mut buf, "", &p).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_container(buf.as_slice()).is_err());
    }
}
