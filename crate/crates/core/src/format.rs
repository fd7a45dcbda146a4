//! Little-endian binary encoding shared by the knowledge-base and checkpoint
//! files: fixed headers, named tensor records and a CRC32 trailer over every
//! preceding byte.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Element encoding of tensor payloads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Dtype {
    #[default]
    F64,
    F32,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F64 => 0,
            Dtype::F32 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F64),
            1 => Ok(Dtype::F32),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }
}

#[derive(Debug, Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn values(&mut self, m: &Matrix, dtype: Dtype) {
        for &x in m.data() {
            match dtype {
                Dtype::F64 => self.buf.extend_from_slice(&x.to_le_bytes()),
                Dtype::F32 => self.buf.extend_from_slice(&(x as f32).to_le_bytes()),
            }
        }
    }

    /// `[name_len u32][name utf-8][rows u64][cols u64][data]`
    pub fn record(&mut self, name: &str, m: &Matrix, dtype: Dtype) {
        self.u32(name.len() as u32);
        self.bytes(name.as_bytes());
        self.u64(m.rows() as u64);
        self.u64(m.cols() as u64);
        self.values(m, dtype);
    }

    /// Appends the CRC32 of everything written so far and returns the bytes.
    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated(what));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u32(&mut self, what: &'static str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self, what: &'static str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn dim(&mut self, what: &'static str) -> Result<usize> {
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in memory")))
    }

    pub fn values(&mut self, rows: usize, cols: usize, dtype: Dtype, what: &'static str) -> Result<Matrix> {
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Format(format!("{what}: {rows}x{cols} overflows")))?;
        let width = match dtype {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        };
        let bytes = count
            .checked_mul(width)
            .filter(|&b| b <= self.remaining())
            .ok_or(Error::Truncated(what))?;
        let raw = self.take(bytes, what)?;
        let data = match dtype {
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
        };
        Matrix::from_vec(rows, cols, data)
    }

    pub fn record(&mut self, dtype: Dtype) -> Result<(String, Matrix)> {
        let len = self.u32("record name length")? as usize;
        let name = std::str::from_utf8(self.take(len, "record name")?)
            .map_err(|_| Error::Format("record name is not UTF-8".into()))?
            .to_string();
        let rows = self.dim("record rows")?;
        let cols = self.dim("record cols")?;
        let m = self.values(rows, cols, dtype, "record data")?;
        Ok((name, m))
    }
}

/// Verifies the trailing CRC32 and returns the covered payload.
pub fn verify_crc(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < 4 {
        return Err(Error::Truncated("checksum trailer"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    Ok(body)
}

/// Writes via a sibling temporary file and rename, so readers never observe
/// a half-written file.
pub fn write_atomic(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_round_trip_and_crc() {
        let m = Matrix::from_rows(&[[1.5, -2.25], [3.0, 1e-300]]);
        let mut w = Writer::new();
        w.record("w", &m, Dtype::F64);
        let bytes = w.finish();
        let body = verify_crc(&bytes).unwrap();
        let mut r = Reader::new(body);
        let (name, back) = r.record(Dtype::F64).unwrap();
        assert_eq!(name, "w");
        assert_eq!(back, m);
        assert_eq!(r.remaining(), 0);

        let mut bad = bytes.clone();
        bad[10] ^= 0x40;
        assert!(matches!(verify_crc(&bad), Err(Error::Checksum { .. })));
    }

    #[test]
    fn f32_records_round_to_single_precision() {
        let m = Matrix::from_rows(&[[0.1, 2.0]]);
        let mut w = Writer::new();
        w.record("x", &m, Dtype::F32);
        let bytes = w.finish();
        let (_, back) = Reader::new(verify_crc(&bytes).unwrap()).record(Dtype::F32).unwrap();
        assert_eq!(back.get(0, 0), 0.1f32 as f64);
        assert_eq!(back.get(0, 1), 2.0);
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let mut w = Writer::new();
        w.record("x", &Matrix::zeros(4, 4), Dtype::F64);
        let bytes = w.finish();
        let cut = &bytes[..bytes.len() - 20];
        assert!(matches!(Reader::new(cut).record(Dtype::F64), Err(Error::Truncated(_))));
    }
}
