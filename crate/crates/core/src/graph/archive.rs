//! Binary tensor archive.
//!
//! Little-endian layout:
//!
//! ```text
//! "MPCT" | u32 version (=1) | u64 tensor_count
//! per tensor: u32 name_len | name (UTF-8) | u8 dtype (0=f32, 1=i8, 2=i32)
//!             | u8 ndim | ndim × u64 dims | row-major payload
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::{DType, Tensor, TensorData};

pub const MAGIC: [u8; 4] = *b"MPCT";
pub const VERSION: u32 = 1;

/// Tensors keyed by name, iterated in name order.
pub type TensorMap = BTreeMap<String, Tensor>;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("not a tensor archive (bad magic {0:02x?})")]
    BadMagic([u8; 4]),
    #[error("unsupported archive version {0}")]
    Version(u32),
    #[error("archive truncated while reading {0}")]
    Truncated(String),
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("tensor `{name}` has unsupported dtype code {code}")]
    UnsupportedDtype { name: String, code: u8 },
    #[error("tensor name is not valid UTF-8")]
    Name,
    #[error("tensor `{0}` is too large")]
    Oversize(String),
    #[error("{} trailing bytes after the last tensor", .0)]
    Trailing(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, ArchiveError>;

fn dtype_code(d: DType) -> u8 {
    match d {
        DType::F32 => 0,
        DType::I8 => 1,
        DType::I32 => 2,
    }
}

pub fn write_archive<W: Write>(map: &TensorMap, mut out: W) -> Result<()> {
    out.write_all(&MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(map.len() as u64).to_le_bytes())?;
    for (name, t) in map {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&[dtype_code(t.dtype()), t.shape().len() as u8])?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        match t.data() {
            TensorData::F32(v) => v.iter().try_for_each(|x| out.write_all(&x.to_le_bytes()))?,
            TensorData::I8(v) => v.iter().try_for_each(|x| out.write_all(&x.to_le_bytes()))?,
            TensorData::I32(v) => v.iter().try_for_each(|x| out.write_all(&x.to_le_bytes()))?,
        }
    }
    Ok(())
}

pub fn encode_archive(map: &TensorMap) -> Vec<u8> {
    let mut buf = Vec::new();
    write_archive(map, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: impl FnOnce() -> String) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(ArchiveError::Truncated(what()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: impl FnOnce() -> String) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }
}

pub fn decode_archive(buf: &[u8]) -> Result<TensorMap> {
    let mut cur = Cursor { buf, pos: 0 };
    let magic: [u8; 4] = cur.array(|| "header".into())?;
    if magic != MAGIC {
        return Err(ArchiveError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(cur.array(|| "header".into())?);
    if version != VERSION {
        return Err(ArchiveError::Version(version));
    }
    let count = u64::from_le_bytes(cur.array(|| "header".into())?);
    let mut map = TensorMap::new();
    for index in 0..count {
        let name_len = u32::from_le_bytes(cur.array(|| format!("name length of tensor #{index}"))?);
        let name = cur.take(name_len as usize, || format!("name of tensor #{index}"))?;
        let name = std::str::from_utf8(name)
            .map_err(|_| ArchiveError::Name)?
            .to_owned();
        let [code, ndim] = cur.array(|| format!("tensor `{name}`"))?;
        let dtype = match code {
            0 => DType::F32,
            1 => DType::I8,
            2 => DType::I32,
            code => return Err(ArchiveError::UnsupportedDtype { name, code }),
        };
        let mut shape = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            let d = u64::from_le_bytes(cur.array(|| format!("tensor `{name}`"))?);
            shape.push(usize::try_from(d).map_err(|_| ArchiveError::Oversize(name.clone()))?);
        }
        let bytes = shape
            .iter()
            .try_fold(dtype.size_of(), |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| ArchiveError::Oversize(name.clone()))?;
        let payload = cur.take(bytes, || format!("tensor `{name}`"))?;
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::I8 => TensorData::I8(payload.iter().map(|&b| b as i8).collect()),
            DType::I32 => TensorData::I32(
                payload
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        let tensor = Tensor::new(shape, data).expect("payload length derived from shape");
        if map.contains_key(&name) {
            return Err(ArchiveError::DuplicateName(name));
        }
        map.insert(name, tensor);
    }
    if cur.pos != buf.len() {
        return Err(ArchiveError::Trailing(buf.len() - cur.pos));
    }
    Ok(map)
}

pub fn save_archive(map: &TensorMap, path: impl AsRef<Path>) -> Result<()> {
    let mut file = io::BufWriter::new(fs::File::create(path)?);
    write_archive(map, &mut file)?;
    file.flush()?;
    Ok(())
}

pub fn load_archive(path: impl AsRef<Path>) -> Result<TensorMap> {
    decode_archive(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> TensorMap {
        let mut m = TensorMap::new();
        m.insert(
            "conv.weight".into(),
            Tensor::from_f32(vec![2, 1, 1, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap(),
        );
        m.insert(
            "conv.codes".into(),
            Tensor::from_i8(vec![3], vec![-1, 0, 1]).unwrap(),
        );
        m.insert(
            "labels".into(),
            Tensor::from_i32(vec![2], vec![7, -3]).unwrap(),
        );
        m
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let m = sample();
        let bytes = encode_archive(&m);
        let back = decode_archive(&bytes).unwrap();
        assert_eq!(back, m);
        let w = back["conv.weight"].as_f32().unwrap();
        assert_eq!(w[1].to_bits(), (-0.0f32).to_bits());
        assert_eq!(encode_archive(&back), bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = encode_archive(&TensorMap::new());
        assert_eq!(
            bytes,
            [b'M', b'P', b'C', b'T', 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]
        );
        assert!(decode_archive(&bytes).unwrap().is_empty());

        let mut m = TensorMap::new();
        m.insert("a".into(), Tensor::from_i8(vec![1], vec![-2]).unwrap());
        let bytes = encode_archive(&m);
        assert_eq!(
            &bytes[16..],
            &[1, 0, 0, 0, b'a', 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0xfe]
        );
    }

    #[test]
    fn distinct_errors() {
        let good = encode_archive(&sample());

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_archive(&bad),
            Err(ArchiveError::BadMagic(_))
        ));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(
            decode_archive(&bad),
            Err(ArchiveError::Version(2))
        ));

        let err = decode_archive(&good[..good.len() - 1]).unwrap_err();
        match err {
            ArchiveError::Truncated(what) => assert!(what.contains("labels"), "{what}"),
            other => panic!("unexpected {other}"),
        }

        // Dtype byte of the first tensor ("conv.codes": 4 + 10 bytes in).
        let mut bad = good.clone();
        bad[16 + 4 + 10] = 9;
        assert!(matches!(
            decode_archive(&bad),
            Err(ArchiveError::UnsupportedDtype { code: 9, .. })
        ));

        let mut m = TensorMap::new();
        m.insert("x".into(), Tensor::scalar(1.0));
        let one = encode_archive(&m);
        let mut dup = one[..8].to_vec();
        dup.extend_from_slice(&2u64.to_le_bytes());
        dup.extend_from_slice(&one[16..]);
        dup.extend_from_slice(&one[16..]);
        assert!(matches!(decode_archive(&dup), Err(ArchiveError::DuplicateName(n)) if n == "x"));

        let mut trailing = one.clone();
        trailing.push(0);
        assert!(matches!(
            decode_archive(&trailing),
            Err(ArchiveError::Trailing(1))
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mpct");
        save_archive(&sample(), &path).unwrap();
        assert_eq!(load_archive(&path).unwrap(), sample());
    }

    proptest! {
        #[test]
        fn arbitrary_f32_bits_round_trip(bits in prop::collection::vec(any::<u32>(), 0..40)) {
            let mut m = TensorMap::new();
            let data: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).collect();
            m.insert("t".into(), Tensor::from_f32(vec![data.len()], data).unwrap());
            let back = decode_archive(&encode_archive(&m)).unwrap();
            let got: Vec<u32> = back["t"].as_f32().unwrap().iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(got, bits);
        }
    }
}
