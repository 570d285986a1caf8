//! Binary weight checkpoints.
//!
//! Layout (all integers little-endian, payload 64-bit floats):
//!
//! ```text
//! magic          8 bytes  "CGANSEG1"
//! variant        u8       (0 autoenc, 1 unet, 2 discriminator, 3 shapecnn)
//! resolution     u32
//! depth          u32
//! base_channels  u32
//! seed           u64
//! n_tensors      u32
//! per tensor:
//!   name_len     u32
//!   name         name_len bytes, UTF-8
//!   rank         u32
//!   extents      rank x u32
//!   payload      prod(extents) x f64
//! ```
//!
//! Tensors appear in [`crate::nets::param_layout`] order; loading
//! verifies the names and shapes against the layout derived from the
//! header, so a checkpoint can never silently disagree with its spec.
//! Writing is fully deterministic: the same weights always produce the
//! same bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nets::{param_layout, NetworkSpec, Variant, Weights};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CGANSEG1";
const MAX_NAME_LEN: u32 = 256;

/// Serializes weights to `path` in the format above.
pub fn save_weights(weights: &Weights<f64>, path: &Path) -> Result<()> {
    let layout = param_layout(weights.spec())?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&[weights.spec().variant.code()])?;
    write_u32(&mut w, weights.spec().input_resolution)?;
    write_u32(&mut w, weights.spec().depth)?;
    write_u32(&mut w, weights.spec().base_channels)?;
    w.write_all(&weights.seed().to_le_bytes())?;
    write_u32(&mut w, layout.len())?;
    for ((name, _), tensor) in layout.iter().zip(weights.tensors()) {
        write_u32(&mut w, name.len())?;
        w.write_all(name.as_bytes())?;
        write_u32(&mut w, tensor.shape().len())?;
        for &e in tensor.shape() {
            write_u32(&mut w, e)?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint, reconstructing the `NetworkSpec` from its header.
pub fn read_weights(path: &Path) -> Result<Weights<f64>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(
            "not a weight checkpoint (bad magic)".into(),
        ));
    }
    let mut vb = [0u8; 1];
    read_exact(&mut r, &mut vb)?;
    let variant = Variant::from_code(vb[0])?;
    let input_resolution = read_u32(&mut r)?;
    let depth = read_u32(&mut r)?;
    let base_channels = read_u32(&mut r)?;
    let mut seed_bytes = [0u8; 8];
    read_exact(&mut r, &mut seed_bytes)?;
    let seed = u64::from_le_bytes(seed_bytes);
    let spec = NetworkSpec::new(variant, input_resolution, depth, base_channels)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;

    let layout = param_layout(&spec)?;
    let n_tensors = read_u32(&mut r)?;
    if n_tensors != layout.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {n_tensors} tensors, spec requires {}",
            layout.len()
        )));
    }
    let mut tensors = Vec::with_capacity(layout.len());
    for (name, shape) in &layout {
        let name_len = read_u32(&mut r)?;
        if name_len > MAX_NAME_LEN as usize {
            return Err(Error::Format(format!(
                "tensor name length {name_len} exceeds limit"
            )));
        }
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes)?;
        let stored = String::from_utf8(name_bytes)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        if &stored != name {
            return Err(Error::Format(format!(
                "tensor name '{stored}' does not match layout entry '{name}'"
            )));
        }
        let rank = read_u32(&mut r)?;
        if rank != shape.len() {
            return Err(Error::Format(format!(
                "tensor {name} has rank {rank}, layout requires {}",
                shape.len()
            )));
        }
        let mut extents = Vec::with_capacity(rank);
        for _ in 0..rank {
            extents.push(read_u32(&mut r)?);
        }
        if &extents != shape {
            return Err(Error::Format(format!(
                "tensor {name} has extents {extents:?}, layout requires {shape:?}"
            )));
        }
        let numel: usize = extents.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            read_exact(&mut r, &mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        let t = Tensor::from_vec(&extents, data).map_err(|e| {
            Error::Format(format!("tensor {name} payload invalid: {e}"))
        })?;
        tensors.push(t);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format(
            "trailing bytes after final tensor".into(),
        ));
    }
    Weights::from_tensors(spec, seed, tensors)
}

/// Reads a checkpoint and insists it matches `expected`.
pub fn load_weights(expected: &NetworkSpec, path: &Path) -> Result<Weights<f64>> {
    let w = read_weights(path)?;
    if w.spec() != expected {
        return Err(Error::Format(format!(
            "checkpoint spec {:?} does not match requested {:?}",
            w.spec(),
            expected
        )));
    }
    Ok(w)
}

fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| Error::Format(format!("value {v} exceeds u32 range")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf) as usize)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format("truncated checkpoint".into())
        } else {
            Error::Io(e)
        }
    })
}
