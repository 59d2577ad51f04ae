//! Little-endian binary tensor records.
//!
//! ```text
//! "BCMD" | u32 version=1 | u32 rank | rank × u64 extent | u32 dtype | payload
//! ```
//! dtype 1 is `f32`, dtype 2 is `u8`. A file may hold several records back to
//! back.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"BCMD";
pub const VERSION: u32 = 1;
const MAX_RANK: u32 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 1,
    U8 = 2,
}

impl DType {
    fn from_code(code: u32) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::U8),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

/// Element types with an on-disk encoding.
pub trait Element: Copy {
    const DTYPE: DType;
    fn put(self, out: &mut Vec<u8>);
    fn get(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Element for u8 {
    const DTYPE: DType = DType::U8;
    fn put(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn get(bytes: &[u8]) -> Self {
        bytes[0]
    }
}

/// A decoded record of either supported dtype.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    U8(Tensor<u8>),
}

impl AnyTensor {
    pub fn into_f32(self, source: &Path) -> Result<Tensor<f32>> {
        match self {
            AnyTensor::F32(t) => Ok(t),
            AnyTensor::U8(_) => Err(Error::format(source, "expected f32 record, found u8")),
        }
    }

    pub fn into_u8(self, source: &Path) -> Result<Tensor<u8>> {
        match self {
            AnyTensor::U8(t) => Ok(t),
            AnyTensor::F32(_) => Err(Error::format(source, "expected u8 record, found f32")),
        }
    }

    fn encode(&self, out: &mut Vec<u8>) {
        match self {
            AnyTensor::F32(t) => encode(t, out),
            AnyTensor::U8(t) => encode(t, out),
        }
    }
}

impl From<Tensor<f32>> for AnyTensor {
    fn from(t: Tensor<f32>) -> Self {
        AnyTensor::F32(t)
    }
}

impl From<Tensor<u8>> for AnyTensor {
    fn from(t: Tensor<u8>) -> Self {
        AnyTensor::U8(t)
    }
}

fn encode<E: Element>(t: &Tensor<E>, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    out.extend_from_slice(&(E::DTYPE as u32).to_le_bytes());
    out.reserve(t.len() * E::DTYPE.width());
    for &v in t.data() {
        v.put(out);
    }
}

/// Encodes one record into `w`.
pub fn write_tensor<E: Element>(w: &mut impl Write, t: &Tensor<E>) -> std::io::Result<()> {
    let mut buf = Vec::new();
    encode(t, &mut buf);
    w.write_all(&buf)
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Shape and dtype of a record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub shape: Vec<usize>,
    pub dtype: DType,
}

impl Header {
    fn payload_bytes(&self, source: &Path) -> Result<usize> {
        self.shape
            .iter()
            .try_fold(self.dtype.width(), |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::format(source, "extent overflow"))
    }
}

/// Decodes a record header. Returns `Ok(None)` on a clean end of stream.
pub fn read_header(r: &mut impl Read, source: &Path) -> Result<Option<Header>> {
    let mut magic = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut magic[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(Error::format(source, "truncated header")),
            Ok(n) => got += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::io(source, e)),
        }
    }
    if &magic != MAGIC {
        return Err(Error::format(source, format!("bad magic {magic:?}")));
    }
    let trunc = |_| Error::format(source, "truncated header");
    let version = read_u32(r).map_err(trunc)?;
    if version != VERSION {
        return Err(Error::format(source, format!("unsupported version {version}")));
    }
    let rank = read_u32(r).map_err(trunc)?;
    if rank > MAX_RANK {
        return Err(Error::format(source, format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(trunc)?;
        shape.push(u64::from_le_bytes(b) as usize);
    }
    let code = read_u32(r).map_err(trunc)?;
    let dtype = DType::from_code(code)
        .ok_or_else(|| Error::format(source, format!("unknown dtype code {code}")))?;
    Ok(Some(Header { shape, dtype }))
}

/// Decodes one record. Returns `Ok(None)` on a clean end of stream.
pub fn read_tensor(r: &mut impl Read, source: &Path) -> Result<Option<AnyTensor>> {
    let Some(header) = read_header(r, source)? else {
        return Ok(None);
    };
    let mut payload = vec![0u8; header.payload_bytes(source)?];
    r.read_exact(&mut payload)
        .map_err(|_| Error::format(source, "truncated payload"))?;
    let t = match header.dtype {
        DType::F32 => AnyTensor::F32(Tensor::from_vec(
            header.shape,
            payload.chunks_exact(4).map(f32::get).collect(),
        )?),
        DType::U8 => AnyTensor::U8(Tensor::from_vec(header.shape, payload)?),
    };
    Ok(Some(t))
}

/// Headers of every record in `path`, checking that each payload is present.
pub fn scan_headers(path: &Path) -> Result<Vec<Header>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut r = BufReader::new(file);
    let mut out = Vec::new();
    let mut pos = 0u64;
    while let Some(h) = read_header(&mut r, path)? {
        let n = h.payload_bytes(path)? as u64;
        pos += 4 + 4 + 4 + 8 * h.shape.len() as u64 + 4 + n;
        if pos > len {
            return Err(Error::format(path, "truncated payload"));
        }
        r.seek_relative(n as i64).map_err(|e| Error::io(path, e))?;
        out.push(h);
    }
    Ok(out)
}

/// Writes all records to `path`, replacing it.
pub fn write_tensors(path: &Path, tensors: &[AnyTensor]) -> Result<()> {
    let mut buf = Vec::new();
    for t in tensors {
        t.encode(&mut buf);
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads every record in `path`.
pub fn read_tensors(path: &Path) -> Result<Vec<AnyTensor>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut out = Vec::new();
    while let Some(t) = read_tensor(&mut r, path)? {
        out.push(t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::<u8>::from_vec([2, 1], vec![7, 9]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let mut expect = b"BCMD".to_vec();
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&2u64.to_le_bytes());
        expect.extend_from_slice(&1u64.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&[7, 9]);
        assert_eq!(buf, expect);
    }

    #[test]
    fn corrupt_magic_and_truncation() {
        let src = Path::new("mem");
        let t = Tensor::<f32>::from_vec([3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_tensor(&mut &bad[..], src), Err(Error::Format { .. })));

        let short = &buf[..buf.len() - 2];
        assert!(matches!(read_tensor(&mut &short[..], src), Err(Error::Format { .. })));

        let mut bad_dtype = buf.clone();
        let off = 4 + 4 + 4 + 8;
        bad_dtype[off] = 9;
        assert!(read_tensor(&mut &bad_dtype[..], src).is_err());

        let back = read_tensor(&mut &buf[..], src).unwrap().unwrap();
        assert_eq!(back, AnyTensor::F32(t));
    }
}
