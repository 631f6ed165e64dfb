//! `DFT1` tensor dumps for cross-checking values between implementations.
//!
//! Layout, all little-endian: magic `DFT1`, `u32` rank (always 4), four
//! `u32` dims in NCHW order, then the raw elements as 32- or 64-bit floats.
//! The element width is implied by the remaining byte count.

use std::io::{Read, Write};

use crate::error::{DfnError, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

pub const FIXTURE_MAGIC: &[u8; 4] = b"DFT1";

pub fn write_fixture<T: Scalar, W: Write>(t: &Tensor4<T>, mut out: W) -> Result<()> {
    out.write_all(FIXTURE_MAGIC)?;
    out.write_all(&4u32.to_le_bytes())?;
    for d in t.shape().dims() {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * std::mem::size_of::<T>());
    for v in t.data() {
        match std::mem::size_of::<T>() {
            4 => buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
            _ => buf.extend_from_slice(&v.as_f64().to_le_bytes()),
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_fixture<T: Scalar, R: Read>(mut input: R) -> Result<Tensor4<T>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 24 || &bytes[..4] != FIXTURE_MAGIC {
        return Err(DfnError::Format("missing DFT1 magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    if word(4) != 4 {
        return Err(DfnError::Format(format!("fixture rank {} != 4", word(4))));
    }
    let shape = Shape4::new(word(8), word(12), word(16), word(20))?;
    let payload = &bytes[24..];
    let numel = shape.numel();
    let data = if payload.len() == numel * 4 {
        payload
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect()
    } else if payload.len() == numel * 8 {
        payload
            .chunks_exact(8)
            .map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().unwrap())))
            .collect()
    } else {
        return Err(DfnError::Format(format!(
            "{} payload bytes for {numel} elements",
            payload.len()
        )));
    };
    Tensor4::from_vec(shape, data)
}
