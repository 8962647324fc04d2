//! "CKPT1" checkpoint files.
//!
//! Layout (little-endian): magic `CKPT`, u32 version = 1, u32 entry count,
//! then per entry: u32 name length, name bytes, u32 rank, rank x u32 dims,
//! product(dims) x f32 values.

use std::io::{Read, Write};
use std::path::Path;

use crate::binio::*;

use super::Tensor;

const MAGIC: &[u8; 4] = b"CKPT";
const VERSION: u32 = 1;

/// Ordered list of named f32 tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(k, _)| k == name).map(|(_, t)| t)
    }

    pub fn write<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        write_u32(w, VERSION)?;
        write_u32(w, self.entries.len() as u32)?;
        for (name, t) in &self.entries {
            write_str(w, name)?;
            write_u32(w, t.rank() as u32)?;
            for &d in t.shape() {
                write_u32(w, d as u32)?;
            }
            write_f32s(w, t.data())?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> std::io::Result<Self> {
        expect_magic(r, MAGIC)?;
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(invalid(format!("unsupported checkpoint version {version}")));
        }
        let count = read_u32(r)? as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = read_str(r, 1 << 16)?;
            let rank = read_u32(r)? as usize;
            if rank > 8 {
                return Err(invalid(format!("rank {rank} too large for {name}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(r)? as usize);
            }
            let n: usize = shape.iter().product();
            if n > 1 << 30 {
                return Err(invalid(format!("entry {name} too large")));
            }
            let data = read_f32s(r, n)?;
            entries.push((name, Tensor::new(shape, data).map_err(|e| invalid(e.to_string()))?));
        }
        Ok(Self { entries })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to memory");
        buf
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read(&mut bytes.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            tensors in prop::collection::vec(
                (("[a-z.]{1,12}"), prop::collection::vec(1usize..4, 0..3), any::<u32>()),
                0..5,
            )
        ) {
            let entries: Vec<(String, Tensor<f32>)> = tensors
                .into_iter()
                .map(|(name, shape, seed)| {
                    let n: usize = shape.iter().product();
                    // arbitrary bit patterns, NaNs included
                    let data = (0..n).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 40503))).collect();
                    (name, Tensor::new(shape, data).unwrap())
                })
                .collect();
            let ck = Checkpoint { entries };
            let bytes = ck.to_bytes();
            let back = Checkpoint::read(&mut bytes.as_slice()).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            prop_assert_eq!(back.entries.len(), ck.entries.len());
            for ((n1, t1), (n2, t2)) in back.entries.iter().zip(&ck.entries) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(t1.shape(), t2.shape());
                let b1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
                let b2: Vec<u32> = t2.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(b1, b2);
            }
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let bytes = b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00".to_vec();
        assert!(Checkpoint::read(&mut bytes.as_slice()).is_err());
    }
}
