//! Binary tensor records.
//!
//! Layout: magic `TNSR`, then rank as `u32` little-endian, then each
//! dimension as `u32` little-endian, then the row-major payload as `f64`
//! little-endian. Everything is explicit-width so files round-trip across
//! platforms.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: [u8; 4] = *b"TNSR";

/// Rank cap while reading: protects against garbage headers asking for
/// absurd allocations.
const MAX_RANK: u32 = 8;

pub fn write_tensor<W: Write>(writer: &mut W, path: &str, tensor: &Tensor) -> Result<()> {
    let io = |source| Error::io(path, source);
    writer.write_all(&MAGIC).map_err(io)?;
    writer
        .write_all(&(tensor.shape().len() as u32).to_le_bytes())
        .map_err(io)?;
    for &dim in tensor.shape() {
        writer.write_all(&(dim as u32).to_le_bytes()).map_err(io)?;
    }
    for &value in tensor.data() {
        writer.write_all(&value.to_le_bytes()).map_err(io)?;
    }
    Ok(())
}

/// Reads one tensor record, tracking byte offsets for error messages.
/// `offset` is advanced past the record so callers can read a sequence.
pub fn read_tensor<R: Read>(reader: &mut R, path: &str, offset: &mut u64) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    read_exact(reader, path, offset, &mut magic)?;
    if magic != MAGIC {
        return Err(Error::parse(
            path,
            *offset - 4,
            format!("bad magic {:?}, expected \"TNSR\"", magic),
        ));
    }
    let rank = read_u32(reader, path, offset)?;
    if rank > MAX_RANK {
        return Err(Error::parse(
            path,
            *offset - 4,
            format!("rank {rank} exceeds limit {MAX_RANK}"),
        ));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        shape.push(read_u32(reader, path, offset)? as usize);
    }
    let len = shape.iter().product::<usize>();
    let mut data = Vec::with_capacity(len);
    let mut buf = [0u8; 8];
    for i in 0..len {
        read_exact(reader, path, offset, &mut buf)?;
        let value = f64::from_le_bytes(buf);
        if !value.is_finite() {
            return Err(Error::parse(
                path,
                *offset - 8,
                format!("non-finite element at index {i}"),
            ));
        }
        data.push(value);
    }
    Ok(Tensor::from_parts(shape, data))
}

fn read_exact<R: Read>(reader: &mut R, path: &str, offset: &mut u64, buf: &mut [u8]) -> Result<()> {
    match reader.read_exact(buf) {
        Ok(()) => {
            *offset += buf.len() as u64;
            Ok(())
        }
        Err(source) if source.kind() == std::io::ErrorKind::UnexpectedEof => Err(Error::parse(
            path,
            *offset,
            "unexpected end of file".to_string(),
        )),
        Err(source) => Err(Error::io(path, source)),
    }
}

fn read_u32<R: Read>(reader: &mut R, path: &str, offset: &mut u64) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(reader, path, offset, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn round_trip(t: &Tensor) -> Tensor {
        let mut buf = Vec::new();
        write_tensor(&mut buf, "mem", t).unwrap();
        let mut offset = 0;
        let back = read_tensor(&mut buf.as_slice(), "mem", &mut offset).unwrap();
        assert_eq!(offset as usize, buf.len());
        back
    }

    #[test]
    fn round_trips_preserve_bits() {
        let t = Tensor::new(
            vec![2, 3],
            vec![0.1, -2.5, 1.0 / 3.0, f64::MIN_POSITIVE, 1e300, -0.0],
        )
        .unwrap();
        let back = round_trip(&t);
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn scalar_and_empty_shapes() {
        let s = round_trip(&Tensor::scalar(42.0));
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.item(), 42.0);
    }

    #[test]
    fn header_layout_is_fixed() {
        let t = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, "mem", &t).unwrap();
        assert_eq!(&buf[0..4], b"TNSR");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 2);
        assert_eq!(buf.len(), 16 + 2 * 8);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, "mem", &t).unwrap();
        buf.truncate(buf.len() - 3);
        let mut offset = 0;
        let err = read_tensor(&mut buf.as_slice(), "mem", &mut offset).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("mem"), "{msg}");
        assert!(msg.contains("end of file"), "{msg}");
    }

    #[test]
    fn bad_magic_rejected() {
        let buf = b"XXXX\x01\x00\x00\x00".to_vec();
        let mut offset = 0;
        let err = read_tensor(&mut buf.as_slice(), "mem", &mut offset).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }
}
