//! VISF: a minimal little-endian tensor container.
//!
//! Layout: `"VISF"` magic, `u32` version (1), `u8` dtype code, `u32` ndim,
//! `ndim` x `u64` dimension sizes, then the row-major payload.

use std::fs;
use std::path::Path;

use crate::{Error, FormatError, Result};

pub const MAGIC: &[u8; 4] = b"VISF";
pub const VERSION: u32 = 1;
const FIXED_HEADER: usize = 4 + 4 + 1 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    U8,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::U8 => 2,
            DType::F64 => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, FormatError> {
        match code {
            1 => Ok(DType::F32),
            2 => Ok(DType::U8),
            3 => Ok(DType::F64),
            other => Err(FormatError::UnknownDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::U8(_) => DType::U8,
            TensorData::F64(_) => DType::F64,
        }
    }
}

/// A shaped, typed array as stored in a VISF file.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

fn element_count(shape: &[usize]) -> Result<usize, FormatError> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(FormatError::Overflow)
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let n = element_count(&shape)?;
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {n} elements, data has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(shape, TensorData::F64(data))
    }

    pub fn u8(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Self::new(shape, TensorData::U8(data))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn mismatch(&self, expected: DType) -> Error {
        FormatError::DtypeMismatch {
            expected,
            found: self.dtype(),
        }
        .into()
    }

    pub fn into_f32(self) -> Result<(Vec<usize>, Vec<f32>)> {
        match self.data {
            TensorData::F32(v) => Ok((self.shape, v)),
            _ => Err(self.mismatch(DType::F32)),
        }
    }

    pub fn into_f64(self) -> Result<(Vec<usize>, Vec<f64>)> {
        match self.data {
            TensorData::F64(v) => Ok((self.shape, v)),
            _ => Err(self.mismatch(DType::F64)),
        }
    }

    pub fn into_u8(self) -> Result<(Vec<usize>, Vec<u8>)> {
        match self.data {
            TensorData::U8(v) => Ok((self.shape, v)),
            _ => Err(self.mismatch(DType::U8)),
        }
    }

    /// Widens float payloads to f64; u8 payloads are rejected.
    pub fn into_real(self) -> Result<(Vec<usize>, Vec<f64>)> {
        match self.data {
            TensorData::F32(v) => Ok((self.shape, v.into_iter().map(f64::from).collect())),
            TensorData::F64(v) => Ok((self.shape, v)),
            TensorData::U8(_) => Err(self.mismatch(DType::F64)),
        }
    }

    /// Like [`Tensor::into_real`] but also checks the shape.
    pub fn into_real_shaped(self, expected: &[usize]) -> Result<Vec<f64>> {
        if self.shape != expected {
            return Err(Error::shape(format!(
                "expected shape {expected:?}, found {:?}",
                self.shape
            )));
        }
        Ok(self.into_real()?.1)
    }
}

pub fn encode(tensor: &Tensor) -> Result<Vec<u8>> {
    if tensor.shape.is_empty() || tensor.is_empty() {
        return Err(FormatError::Empty.into());
    }
    let dtype = tensor.dtype();
    let mut out =
        Vec::with_capacity(FIXED_HEADER + 8 * tensor.shape.len() + tensor.len() * dtype.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype.code());
    out.extend_from_slice(&(tensor.shape.len() as u32).to_le_bytes());
    for &d in &tensor.shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match &tensor.data {
        TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::U8(v) => out.extend_from_slice(v),
        TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    Ok(out)
}

fn need(bytes: &[u8], needed: usize) -> Result<(), FormatError> {
    if bytes.len() < needed {
        Err(FormatError::Truncated {
            needed,
            found: bytes.len(),
        })
    } else {
        Ok(())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    need(bytes, 4)?;
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(FormatError::BadMagic(magic).into());
    }
    need(bytes, FIXED_HEADER)?;
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version).into());
    }
    let dtype = DType::from_code(bytes[8])?;
    let ndim = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let header_len = ndim
        .checked_mul(8)
        .and_then(|n| n.checked_add(FIXED_HEADER))
        .ok_or(FormatError::Overflow)?;
    need(bytes, header_len)?;
    let shape = bytes[FIXED_HEADER..header_len]
        .chunks_exact(8)
        .map(|c| usize::try_from(u64::from_le_bytes(c.try_into().unwrap())))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| FormatError::Overflow)?;
    let count = element_count(&shape)?;
    let payload_len = count
        .checked_mul(dtype.size())
        .ok_or(FormatError::Overflow)?;
    let total = header_len
        .checked_add(payload_len)
        .ok_or(FormatError::Overflow)?;
    need(bytes, total)?;
    if bytes.len() > total {
        return Err(FormatError::TrailingBytes(bytes.len() - total).into());
    }
    let payload = &bytes[header_len..total];
    let data = match dtype {
        DType::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::U8 => TensorData::U8(payload.to_vec()),
        DType::F64 => TensorData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    Tensor::new(shape, data)
}

pub fn save_tensor(tensor: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(tensor)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zeros_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.visf");
        let t = Tensor::f32(vec![2, 3], vec![0.0; 6]).unwrap();
        save_tensor(&t, &path).unwrap();
        assert_eq!(load_tensor(&path).unwrap(), t);
    }

    #[test]
    fn scalar_file_layout() {
        let t = Tensor::f32(vec![1, 1], vec![42.0]).unwrap();
        let bytes = encode(&t).unwrap();
        assert_eq!(bytes.len(), 29 + 4);
        assert_eq!(&bytes[0..4], b"VISF");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(bytes[8], 1);
        assert_eq!(&bytes[9..13], &2u32.to_le_bytes());
        assert_eq!(&bytes[13..21], &1u64.to_le_bytes());
        assert_eq!(&bytes[21..29], &1u64.to_le_bytes());
        assert_eq!(&bytes[29..33], &42.0f32.to_le_bytes());
    }

    #[test]
    fn empty_rejected() {
        let t = Tensor::f32(vec![0, 3], vec![]).unwrap();
        assert!(matches!(
            encode(&t),
            Err(Error::Format(FormatError::Empty))
        ));
    }

    #[test]
    fn second_write_wins() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.visf");
        save_tensor(&Tensor::u8(vec![2], vec![1, 2]).unwrap(), &path).unwrap();
        let second = Tensor::f64(vec![3], vec![1.5, -2.0, 3.25]).unwrap();
        save_tensor(&second, &path).unwrap();
        assert_eq!(load_tensor(&path).unwrap(), second);
    }

    #[test]
    fn distinct_decode_errors() {
        let good = encode(&Tensor::f32(vec![2, 2], vec![1.0; 4]).unwrap()).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            decode(&bad_magic),
            Err(Error::Format(FormatError::BadMagic(m))) if &m == b"XXXX"
        ));

        let mut bad_version = good.clone();
        bad_version[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            decode(&bad_version),
            Err(Error::Format(FormatError::UnsupportedVersion(2)))
        ));

        let mut bad_dtype = good.clone();
        bad_dtype[8] = 9;
        assert!(matches!(
            decode(&bad_dtype),
            Err(Error::Format(FormatError::UnknownDtype(9)))
        ));

        assert!(matches!(
            decode(&good[..good.len() - 1]),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));
        assert!(matches!(
            decode(&good[..10]),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));

        let mut long = good.clone();
        long.push(0);
        assert!(matches!(
            decode(&long),
            Err(Error::Format(FormatError::TrailingBytes(1)))
        ));

        let t = decode(&good).unwrap();
        assert!(matches!(
            t.into_u8(),
            Err(Error::Format(FormatError::DtypeMismatch {
                expected: DType::U8,
                found: DType::F32
            }))
        ));
    }

    #[test]
    fn wrong_shape_detected() {
        let t = Tensor::f32(vec![2, 3], vec![0.0; 6]).unwrap();
        assert!(matches!(t.into_real_shaped(&[3, 2]), Err(Error::Shape(_))));
    }

    fn any_tensor() -> impl Strategy<Value = Tensor> {
        prop::collection::vec(1usize..5, 1..4).prop_flat_map(|shape| {
            let n: usize = shape.iter().product();
            prop_oneof![
                prop::collection::vec(any::<f32>(), n)
                    .prop_map(TensorData::F32)
                    .boxed(),
                prop::collection::vec(any::<u8>(), n)
                    .prop_map(TensorData::U8)
                    .boxed(),
                prop::collection::vec(any::<f64>(), n)
                    .prop_map(TensorData::F64)
                    .boxed(),
            ]
            .prop_map(move |data| Tensor::new(shape.clone(), data).unwrap())
        })
    }

    proptest! {
        // Compare re-encoded bytes so NaN payloads count as equal bit patterns.
        #[test]
        fn encode_decode_is_bit_exact(t in any_tensor()) {
            let bytes = encode(&t).unwrap();
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert_eq!(encode(&back).unwrap(), bytes);
        }
    }
}
