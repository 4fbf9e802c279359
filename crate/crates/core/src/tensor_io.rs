//! Named-tensor wire format shared by the encoder and classifier
//! checkpoints. Each record is:
//!
//! ```text
//! u32 name_len | name bytes (UTF-8) | u32 rank | u32 dims[rank] | f32 LE data
//! ```
//!
//! Values are stored as f32; in-memory computation is f64.

use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum WireError {
    #[error("truncated tensor stream")]
    Truncated,
    #[error("bad tensor record: {0}")]
    BadRecord(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Self {
        let t = NamedTensor {
            name: name.into(),
            dims,
            data,
        };
        debug_assert_eq!(t.dims.iter().product::<usize>(), t.data.len());
        t
    }
}

pub fn write_tensor(out: &mut Vec<u8>, t: &NamedTensor) {
    out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
    out.extend_from_slice(t.name.as_bytes());
    out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
    for &d in &t.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in &t.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub struct TensorReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> TensorReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        TensorReader { bytes, pos: 0 }
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.pos + n > self.bytes.len() {
            return Err(WireError::Truncated);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn read_u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn read_tensor(&mut self) -> Result<NamedTensor, WireError> {
        let name_len = self.read_u32()? as usize;
        if name_len > 4096 {
            return Err(WireError::BadRecord("tensor name too long".into()));
        }
        let name = std::str::from_utf8(self.take(name_len)?)
            .map_err(|_| WireError::BadRecord("tensor name not UTF-8".into()))?
            .to_string();
        let rank = self.read_u32()? as usize;
        if rank > 8 {
            return Err(WireError::BadRecord(format!("rank {rank} too large")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.read_u32()? as usize);
        }
        let count: usize = dims.iter().product();
        let mut data = Vec::with_capacity(count);
        for chunk in self.take(count * 4)?.chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
        Ok(NamedTensor { name, dims, data })
    }

    pub fn read_all(&mut self) -> Result<Vec<NamedTensor>, WireError> {
        let mut out = Vec::new();
        while !self.is_done() {
            out.push(self.read_tensor()?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_two_tensors() {
        let a = NamedTensor::new("w", vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, -0.5]);
        let b = NamedTensor::new("bias", vec![3], vec![0.25, -0.25, 0.0]);
        let mut bytes = Vec::new();
        write_tensor(&mut bytes, &a);
        write_tensor(&mut bytes, &b);
        let tensors = TensorReader::new(&bytes).read_all().unwrap();
        assert_eq!(tensors.len(), 2);
        assert_eq!(tensors[0], a);
        assert_eq!(tensors[1], b);
    }

    #[test]
    fn truncated_stream_rejected() {
        let t = NamedTensor::new("w", vec![4], vec![1.0; 4]);
        let mut bytes = Vec::new();
        write_tensor(&mut bytes, &t);
        bytes.truncate(bytes.len() - 3);
        assert_eq!(
            TensorReader::new(&bytes).read_all().unwrap_err(),
            WireError::Truncated
        );
    }

    #[test]
    fn f32_rounding_is_the_only_loss() {
        let t = NamedTensor::new("x", vec![2], vec![std::f64::consts::PI, 1e-20]);
        let mut bytes = Vec::new();
        write_tensor(&mut bytes, &t);
        let read = TensorReader::new(&bytes).read_tensor().unwrap();
        assert_eq!(read.data[0], std::f64::consts::PI as f32 as f64);
    }
}
