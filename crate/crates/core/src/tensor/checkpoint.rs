//! Flat parameter archive.
//!
//! Layout (all integers little-endian `u32`, values little-endian `f32`):
//!
//! ```text
//! "TIRGCKPT1"                      9-byte magic
//! count                            number of records
//! repeat count times:
//!   name_len, name (UTF-8 bytes)
//!   ndim, extent × ndim
//!   value × product(extents)      row-major
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"TIRGCKPT1";

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Argument(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serializes every parameter of `store` (values rounded to `f32`).
pub fn encode_checkpoint(store: &ParamStore) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(16 + 4 * store.numel());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, store.len())?;
    for (_, p) in store.iter() {
        put_u32(&mut buf, p.name.len())?;
        buf.extend_from_slice(p.name.as_bytes());
        put_u32(&mut buf, p.value.shape().len())?;
        for &e in p.value.shape() {
            put_u32(&mut buf, e)?;
        }
        for &v in p.value.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() < n {
            return Err(Error::Data("checkpoint truncated".into()));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Parses an archive into `(name, tensor)` records in file order.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut cur = Cursor { bytes };
    if cur.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
        return Err(Error::Data("not a checkpoint (bad magic)".into()));
    }
    let count = cur.u32()?;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let len = cur.u32()?;
        let name = String::from_utf8(cur.take(len)?.to_vec())
            .map_err(|_| Error::Data("parameter name is not UTF-8".into()))?;
        let ndim = cur.u32()?;
        let shape = (0..ndim).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = cur.take(4 * numel)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        records.push((name, Tensor::new(&shape, data)?));
    }
    if !cur.bytes.is_empty() {
        return Err(Error::Data("trailing bytes after checkpoint records".into()));
    }
    Ok(records)
}

pub fn write_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(store)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn f32_values_survive_a_round_trip(
            values in prop::collection::vec(-1e6f32..1e6, 1..40),
            name in "[a-z.]{1,12}",
        ) {
            let mut store = ParamStore::new();
            let data: Vec<f64> = values.iter().map(|&v| v as f64).collect();
            store.add(name.clone(), Tensor::vector(data.clone())).unwrap();
            let records = decode_checkpoint(&encode_checkpoint(&store).unwrap()).unwrap();
            prop_assert_eq!(records.len(), 1);
            prop_assert_eq!(&records[0].0, &name);
            prop_assert_eq!(records[0].1.data(), data.as_slice());
        }
    }

    #[test]
    fn header_is_magic_then_count() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(&[1, 2], vec![1.0, -2.0]).unwrap()).unwrap();
        let bytes = encode_checkpoint(&store).unwrap();
        assert_eq!(&bytes[..9], b"TIRGCKPT1");
        assert_eq!(&bytes[9..13], &1u32.to_le_bytes());
        // name_len, "w", ndim=2, 1, 2, then two f32s
        assert_eq!(bytes.len(), 13 + 4 + 1 + 4 + 8 + 8);
        assert_eq!(&bytes[bytes.len() - 4..], &(-2.0f32).to_le_bytes());
    }

    #[test]
    fn bad_magic_and_truncation_are_data_errors() {
        assert!(matches!(decode_checkpoint(b"NOTACKPT1\0\0\0\0"), Err(Error::Data(_))));
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let bytes = encode_checkpoint(&store).unwrap();
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 1]), Err(Error::Data(_))));
    }
}
