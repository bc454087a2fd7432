//! `MEF1` tensor container: magic, `u32` rank, then per axis a `u32` extent
//! and a 16-byte NUL-padded ASCII name, then the little-endian `f32` payload
//! in row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MEF1";
const NAME_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorContainer {
    pub axes: Vec<String>,
    pub tensor: Tensor<f32>,
}

impl TensorContainer {
    pub fn new(axes: &[&str], tensor: Tensor<f32>) -> Result<Self> {
        if axes.len() != tensor.ndim() {
            return Err(Error::Container(format!(
                "{} axis names for a rank-{} tensor",
                axes.len(),
                tensor.ndim()
            )));
        }
        for a in axes {
            if !a.is_ascii() || a.len() > NAME_LEN {
                return Err(Error::Container(format!("axis name `{}` is not ≤16 ASCII bytes", a)));
            }
        }
        Ok(Self {
            axes: axes.iter().map(|s| s.to_string()).collect(),
            tensor,
        })
    }

    /// Builds a container from raw parts, checking that the payload fits the extents.
    pub fn from_parts(dims: &[usize], axes: &[&str], payload: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != payload.len() {
            return Err(Error::Container(format!(
                "dims {:?} need {} values, payload has {}",
                dims,
                n,
                payload.len()
            )));
        }
        Self::new(axes, Tensor::from_vec(dims, payload)?)
    }

    pub fn from_scalar_tensor<T: Scalar>(axes: &[&str], t: &Tensor<T>) -> Result<Self> {
        Self::new(axes, t.cast())
    }

    pub fn dims(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.axes.len() * 20 + self.tensor.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.axes.len() as u32).to_le_bytes());
        for (d, name) in self.tensor.shape().iter().zip(&self.axes) {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
            let mut field = [0u8; NAME_LEN];
            field[..name.len()].copy_from_slice(name.as_bytes());
            out.extend_from_slice(&field);
        }
        for v in self.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Container(format!("bad magic {:?}", magic)));
        }
        let rank = read_u32(&mut r)? as usize;
        if rank > 16 {
            return Err(Error::Container(format!("implausible rank {}", rank)));
        }
        let mut dims = Vec::with_capacity(rank);
        let mut axes = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(&mut r)? as usize);
            let mut field = [0u8; NAME_LEN];
            read_exact(&mut r, &mut field)?;
            let end = field.iter().position(|&b| b == 0).unwrap_or(NAME_LEN);
            let name = std::str::from_utf8(&field[..end])
                .map_err(|_| Error::Container("axis name is not ASCII".into()))?;
            axes.push(name.to_string());
        }
        let n: usize = dims.iter().product();
        if r.len() != n * 4 {
            return Err(Error::Container(format!(
                "payload is {} bytes, dims {:?} need {}",
                r.len(),
                dims,
                n * 4
            )));
        }
        let payload = r
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let axes_ref: Vec<&str> = axes.iter().map(String::as_str).collect();
        Self::from_parts(&dims, &axes_ref, payload)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Container("truncated header".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_tensor(t: &TensorContainer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&t.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorContainer> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    TensorContainer::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_tensor_round_trips() {
        let c = TensorContainer::new(&["row", "col"], Tensor::zeros(&[2, 2])).unwrap();
        assert_eq!(TensorContainer::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn payload_mismatch_is_rejected() {
        assert!(TensorContainer::from_parts(&[2, 2], &["a", "b"], vec![0.0; 3]).is_err());
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let c = TensorContainer::new(&["x"], Tensor::zeros(&[3])).unwrap();
        let mut b = c.to_bytes();
        b[0] = b'X';
        assert!(matches!(TensorContainer::from_bytes(&b), Err(Error::Container(_))));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let c = TensorContainer::new(&["x"], Tensor::zeros(&[3])).unwrap();
        let b = c.to_bytes();
        assert!(TensorContainer::from_bytes(&b[..b.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(dims in prop::collection::vec(1usize..5, 1..4), seed in any::<u32>()) {
            let n: usize = dims.iter().product();
            let payload: Vec<f32> = (0..n)
                .map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 7919) & 0x7f7f_ffff))
                .collect();
            let names: Vec<String> = (0..dims.len()).map(|i| format!("axis{}", i)).collect();
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            let c = TensorContainer::from_parts(&dims, &refs, payload).unwrap();
            let back = TensorContainer::from_bytes(&c.to_bytes()).unwrap();
            prop_assert_eq!(&back.axes, &c.axes);
            prop_assert_eq!(back.dims(), c.dims());
            let same = back.tensor.data().iter().zip(c.tensor.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
    }
}
