//! Dense row-major f64 tensors and their flat binary serialization.

use crate::error::{CoreError, Result};
use std::io::{Read, Write};

/// A dense n-dimensional array of f64 values in row-major order.
///
/// `grad` is populated by reverse-mode differentiation when `requires_grad`
/// is set and the tensor participates in a recorded computation.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match {} values",
            shape,
            data.len()
        );
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; n])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], vec![value])
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }
}

const MAGIC: &[u8; 4] = b"SST1";

/// Write a tensor in the flat binary format: magic "SST1", u32 rank,
/// u32 dims (little-endian), f64 values row-major (little-endian).
pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in &t.shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in &t.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Read a tensor in the SST1 format. `path` is used for error reporting only.
pub fn read_tensor<R: Read>(r: &mut R, path: &str) -> Result<Tensor> {
    let mut offset = 0usize;
    let mut magic = [0u8; 4];
    read_exact_at(r, &mut magic, path, &mut offset)?;
    if &magic != MAGIC {
        return Err(CoreError::Format {
            path: path.to_string(),
            offset: 0,
            detail: format!("bad magic {:?}, expected \"SST1\"", magic),
        });
    }
    let rank = read_u32(r, path, &mut offset)? as usize;
    if rank > 8 {
        return Err(CoreError::Format {
            path: path.to_string(),
            offset: offset - 4,
            detail: format!("implausible rank {rank}"),
        });
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r, path, &mut offset)? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let mut buf = [0u8; 8];
    for _ in 0..numel {
        read_exact_at(r, &mut buf, path, &mut offset)?;
        data.push(f64::from_le_bytes(buf));
    }
    Ok(Tensor::new(shape, data))
}

fn read_u32<R: Read>(r: &mut R, path: &str, offset: &mut usize) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact_at(r, &mut buf, path, offset)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_exact_at<R: Read>(
    r: &mut R,
    buf: &mut [u8],
    path: &str,
    offset: &mut usize,
) -> Result<()> {
    r.read_exact(buf).map_err(|e| CoreError::Format {
        path: path.to_string(),
        offset: *offset,
        detail: format!("short read: {e}"),
    })?;
    *offset += buf.len();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_trip_exact() {
        let t = Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, f64::MIN_POSITIVE, 1e300]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back = read_tensor(&mut buf.as_slice(), "mem").unwrap();
        assert_eq!(back.shape, t.shape);
        assert_eq!(back.data, t.data);
    }

    #[test]
    fn bad_magic_rejected() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &Tensor::scalar(1.0)).unwrap();
        buf[0] = b'X';
        let err = read_tensor(&mut buf.as_slice(), "mem").unwrap_err();
        match err {
            CoreError::Format { offset, .. } => assert_eq!(offset, 0),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn truncated_reports_offset() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        buf.truncate(buf.len() - 3);
        let err = read_tensor(&mut buf.as_slice(), "mem").unwrap_err();
        match err {
            CoreError::Format { offset, .. } => assert!(offset > 0),
            other => panic!("unexpected error {other}"),
        }
    }

    proptest! {
        #[test]
        fn serialization_round_trips(data in proptest::collection::vec(-1e6f64..1e6, 1..64)) {
            let t = Tensor::new(vec![data.len()], data);
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            let back = read_tensor(&mut buf.as_slice(), "mem").unwrap();
            prop_assert_eq!(back.data, t.data);
        }
    }
}
