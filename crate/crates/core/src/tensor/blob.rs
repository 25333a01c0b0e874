//! Weight blob encoding: per tensor, `rank` and each extent as little-endian
//! u64, then the elements as little-endian f32. A blob is a plain
//! concatenation of such records.

use std::io::{self, Read, Write};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAX_RANK: u64 = 8;

pub fn write_tensor<T: Scalar, W: Write>(out: &mut W, t: &Tensor<T>) -> io::Result<()> {
    out.write_all(&(t.rank() as u64).to_le_bytes())?;
    for &d in t.shape() {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for &x in t.data() {
        buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
    }
    out.write_all(&buf)
}

pub fn write_tensors<'a, T: Scalar + 'a, W: Write>(
    out: &mut W,
    tensors: impl IntoIterator<Item = &'a Tensor<T>>,
) -> io::Result<()> {
    for t in tensors {
        write_tensor(out, t)?;
    }
    Ok(())
}

fn read_u64<R: Read>(input: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads one record; `Ok(None)` on a clean end of stream.
pub fn read_tensor<T: Scalar, R: Read>(input: &mut R) -> Result<Option<Tensor<T>>> {
    let mut first = [0u8; 8];
    let mut got = 0;
    while got < 8 {
        match input.read(&mut first[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(Error::Format("truncated tensor header".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::Format(e.to_string())),
        }
    }
    let rank = u64::from_le_bytes(first);
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let fmt = |e: io::Error| Error::Format(format!("truncated tensor: {e}"));
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        let d = read_u64(input).map_err(fmt)?;
        if d == 0 || d > u32::MAX as u64 {
            return Err(Error::Format(format!("implausible extent {d}")));
        }
        shape.push(d as usize);
    }
    let n: usize = shape.iter().product();
    let mut raw = vec![0u8; n * 4];
    input.read_exact(&mut raw).map_err(fmt)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::from_vec(&shape, data).map(Some)
}

pub fn read_tensors<T: Scalar, R: Read>(input: &mut R) -> Result<Vec<Tensor<T>>> {
    let mut out = Vec::new();
    while let Some(t) = read_tensor(input)? {
        out.push(t);
    }
    Ok(out)
}
