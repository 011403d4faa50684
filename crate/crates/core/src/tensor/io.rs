//! ".ten" tensor file format.
//!
//! Layout, all integers little-endian:
//!   magic "TEN1" | u8 dtype (0=f32, 1=f64) | u32 rank | u64 dims[rank] | payload
//!
//! The payload is the row-major element buffer, each element little-endian.
//! Endianness is fixed in the format, so files round-trip across platforms.

use std::fs;
use std::path::Path;

use super::{Dtype, Element, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TEN1";

pub fn write_ten<E: Element>(path: &Path, tensor: &Tensor<E>) -> Result<()> {
    let mut bytes = Vec::with_capacity(4 + 1 + 4 + 8 * tensor.rank() + E::BYTES * tensor.numel());
    bytes.extend_from_slice(MAGIC);
    bytes.push(E::DTYPE.code());
    bytes.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        bytes.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in tensor.data() {
        v.write_le(&mut bytes);
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_ten<E: Element>(path: &Path) -> Result<Tensor<E>> {
    let bytes = fs::read(path)?;
    let fail = |msg: &str| Error::Integrity(format!("{}: {msg}", path.display()));
    if bytes.len() < 9 || &bytes[..4] != MAGIC {
        return Err(fail("missing TEN1 magic"));
    }
    let dtype = Dtype::from_code(bytes[4]).map_err(|_| fail("bad dtype code"))?;
    if dtype != E::DTYPE {
        return Err(fail(&format!(
            "dtype {:?} in file, {:?} requested",
            dtype,
            E::DTYPE
        )));
    }
    let rank = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let dims_end = 9 + 8 * rank;
    if bytes.len() < dims_end {
        return Err(fail("truncated dimension list"));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 9 + 8 * i;
        shape.push(u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize);
    }
    let numel: usize = shape.iter().product();
    let expected = dims_end + numel * E::BYTES;
    if bytes.len() != expected {
        return Err(fail(&format!(
            "payload size {} does not match shape {:?} ({} bytes expected)",
            bytes.len() - dims_end,
            shape,
            numel * E::BYTES
        )));
    }
    let data = bytes[dims_end..]
        .chunks_exact(E::BYTES)
        .map(E::read_le)
        .collect();
    Tensor::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ten");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = Tensor::<f32>::uniform(vec![2, 3, 4], 10.0, &mut rng);
        write_ten(&path, &t).unwrap();
        let back: Tensor<f32> = read_ten(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn header_bytes_are_pinned() {
        // golden header for a 1-element f64 tensor of shape [1]
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.ten");
        let t = Tensor::<f64>::from_vec(vec![1], vec![1.0]).unwrap();
        write_ten(&path, &t).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let mut expected = Vec::new();
        expected.extend_from_slice(b"TEN1");
        expected.push(1u8); // f64
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&1.0f64.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ten");
        let t = Tensor::<f32>::zeros(vec![2]);
        write_ten(&path, &t).unwrap();
        let err = read_ten::<f64>(&path).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ten");
        let t = Tensor::<f32>::zeros(vec![4]);
        write_ten(&path, &t).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 2);
        std::fs::write(&path, bytes).unwrap();
        assert!(read_ten::<f32>(&path).is_err());
    }
}
