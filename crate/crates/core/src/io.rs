//! Bit-exact persistence for tensors and parameter checkpoints.
//!
//! Tensor file (little-endian): magic `TNSR`, version u8 = 1, dtype u8 = 0
//! (f32), ndim u8, ndim x u32 dims, raw f32 payload row-major.
//! Checkpoint file: magic `CKPT`, version u8 = 1, u32 parameter count, then
//! per parameter: u16 name length, UTF-8 name, u8 trainable flag, embedded
//! tensor record.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

const TENSOR_MAGIC: [u8; 4] = *b"TNSR";
const CKPT_MAGIC: [u8; 4] = *b"CKPT";
const FORMAT_VERSION: u8 = 1;
const DTYPE_F32: u8 = 0;

pub fn save_tensor(x: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    write_tensor_record(&mut w, x, path.as_ref())?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path.as_ref())?);
    let t = read_tensor_record(&mut r, &ctx(path.as_ref()))?;
    Ok(t)
}

pub fn save_checkpoint(store: &ParameterStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&CKPT_MAGIC)?;
    w.write_all(&[FORMAT_VERSION])?;
    let names = store.names_sorted();
    let count: u32 = names
        .len()
        .try_into()
        .map_err(|_| Error::DimOverflow(format!("{} parameters", names.len())))?;
    w.write_all(&count.to_le_bytes())?;
    for name in names {
        let bytes = name.as_bytes();
        let len: u16 = bytes
            .len()
            .try_into()
            .map_err(|_| Error::DimOverflow(format!("parameter name `{name}` too long")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[u8::from(store.is_trainable(&name)?)])?;
        write_tensor_record(&mut w, store.get(&name)?, path)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParameterStore> {
    let path = path.as_ref();
    let context = ctx(path);
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, &context)?;
    if magic != CKPT_MAGIC {
        return Err(Error::MagicMismatch(format!(
            "{context}: expected CKPT, got {magic:?}"
        )));
    }
    let version = read_u8(&mut r, &context)?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch { version, context });
    }
    let count = read_u32(&mut r, &context)?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let name_len = read_u16(&mut r, &context)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes, &context)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::InvalidArg(format!("{context}: parameter name not UTF-8")))?;
        let trainable = read_u8(&mut r, &context)? != 0;
        let tensor = read_tensor_record(&mut r, &context)?;
        store.insert(&name, tensor, trainable)?;
    }
    Ok(store)
}

fn write_tensor_record(w: &mut impl Write, x: &Tensor, path: &Path) -> Result<()> {
    w.write_all(&TENSOR_MAGIC)?;
    w.write_all(&[FORMAT_VERSION, DTYPE_F32])?;
    let ndim: u8 = x
        .dims()
        .len()
        .try_into()
        .map_err(|_| Error::DimOverflow(ctx(path)))?;
    w.write_all(&[ndim])?;
    for &d in x.dims() {
        let d: u32 = d.try_into().map_err(|_| Error::DimOverflow(ctx(path)))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for &v in x.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor_record(r: &mut impl Read, context: &str) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, context)?;
    if magic != TENSOR_MAGIC {
        return Err(Error::MagicMismatch(format!(
            "{context}: expected TNSR, got {magic:?}"
        )));
    }
    let version = read_u8(r, context)?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            version,
            context: context.to_string(),
        });
    }
    let dtype = read_u8(r, context)?;
    if dtype != DTYPE_F32 {
        return Err(Error::InvalidArg(format!(
            "{context}: unsupported dtype {dtype}"
        )));
    }
    let ndim = read_u8(r, context)? as usize;
    let mut dims = Vec::with_capacity(ndim);
    let mut numel: usize = 1;
    for _ in 0..ndim {
        let d = read_u32(r, context)? as usize;
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| Error::DimOverflow(context.to_string()))?;
        dims.push(d);
    }
    // 1 GiB payload guard against corrupt headers
    if numel > (1usize << 28) {
        return Err(Error::DimOverflow(format!("{context}: {numel} elements")));
    }
    let mut payload = vec![0u8; numel * 4];
    read_exact(r, &mut payload, context)?;
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(dims, data)
}

fn ctx(path: &Path) -> String {
    path.display().to_string()
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], context: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated(context.to_string())
        } else {
            Error::Io(e)
        }
    })
}

fn read_u8(r: &mut impl Read, context: &str) -> Result<u8> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b, context)?;
    Ok(b[0])
}

fn read_u16(r: &mut impl Read, context: &str) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b, context)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read, context: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, context)?;
    Ok(u32::from_le_bytes(b))
}
