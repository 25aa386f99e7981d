//! Flat binary parameter container.
//!
//! Layout: `b"INKW"`, version `u32`, count `u32`, then per entry: id length `u16`,
//! id bytes, rank `u8`, dims as `u32` each, little-endian `f32` data.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"INKW";
pub const VERSION: u32 = 1;

pub fn encode(entries: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (id, t) in entries {
        let id_len = u16::try_from(id.len()).map_err(|_| Error::invalid(format!("parameter id too long: {id}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::invalid("rank above 255"))?;
        out.extend_from_slice(&id_len.to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                format: "checkpoint",
                offset: self.pos,
                msg: format!("truncated: need {n} more bytes"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format { format: "checkpoint", offset: 0, msg: "bad magic".into() });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format { format: "checkpoint", offset: 4, msg: format!("unsupported version {version}") });
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let id_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let at = r.pos;
        let id = std::str::from_utf8(r.take(id_len)?)
            .map_err(|_| Error::Format { format: "checkpoint", offset: at, msg: "id is not UTF-8".into() })?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::invalid("tensor too large"))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        entries.push((id, Tensor::from_vec(&shape, data)));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format { format: "checkpoint", offset: r.pos, msg: "trailing bytes".into() });
    }
    Ok(entries)
}

/// Writes every parameter (including buffers) of `store`.
pub fn save(store: &ParameterStore, path: impl AsRef<Path>) -> Result<()> {
    let entries: Vec<(String, Tensor)> = store.iter().map(|p| (p.id.clone(), p.tensor.clone())).collect();
    fs::write(path, encode(&entries)?)?;
    Ok(())
}

/// Overwrites the values of `store` from a checkpoint. Every stored id must be
/// present in the file with a matching shape.
pub fn load_into(store: &mut ParameterStore, path: impl AsRef<Path>) -> Result<()> {
    let entries = decode(&fs::read(path)?)?;
    let mut seen = std::collections::HashSet::new();
    for (id, t) in entries {
        if store.contains(&id) {
            store.set(&id, t)?;
            seen.insert(id);
        }
    }
    let missing: Vec<&str> = store.ids().filter(|id| !seen.contains(*id)).collect();
    if let Some(first) = missing.first() {
        return Err(Error::UnboundParameter(first.to_string()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamRole;

    #[test]
    fn round_trip_is_bit_exact() {
        let entries = vec![
            ("a.weight".to_string(), Tensor::from_vec(&[2, 3], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.25e-20, -7.0, 1e30])),
            ("s".to_string(), Tensor::scalar(0.125)),
        ];
        let back = decode(&encode(&entries).unwrap()).unwrap();
        for ((ia, ta), (ib, tb)) in entries.iter().zip(&back) {
            assert_eq!(ia, ib);
            assert_eq!(ta.shape(), tb.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(ta), bits(tb));
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&[("ab".to_string(), Tensor::from_vec(&[2], vec![1.0, 2.0]))]).unwrap();
        assert_eq!(&bytes[..4], b"INKW");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..14], &2u16.to_le_bytes());
        assert_eq!(&bytes[14..16], b"ab");
        assert_eq!(bytes[16], 1);
        assert_eq!(&bytes[17..21], &2u32.to_le_bytes());
        assert_eq!(&bytes[21..25], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 29);
    }

    #[test]
    fn truncated_and_bad_magic_fail() {
        let bytes = encode(&[("x".to_string(), Tensor::zeros(&[4]))]).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn store_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.inkw");
        let mut s = ParameterStore::new(3);
        s.init("w", &[4, 4], 4, ParamRole::Weight);
        s.init("b", &[4], 4, ParamRole::Bias);
        save(&s, &path).unwrap();
        let mut t = ParameterStore::new(99);
        t.init("w", &[4, 4], 4, ParamRole::Weight);
        t.init("b", &[4], 4, ParamRole::Bias);
        load_into(&mut t, &path).unwrap();
        assert!(s.same_values(&t));

        let mut u = ParameterStore::new(0);
        u.init("other", &[1], 1, ParamRole::Bias);
        assert!(load_into(&mut u, &path).is_err());
    }
}
