//! Binary checkpoint layout:
//!
//! ```text
//! "VSRCKPT1" <metadata line, UTF-8, '\n'-terminated>
//! repeated until EOF:
//!   u32 name length, name bytes, u32 rank, rank x u32 dims, f64 values
//! ```
//!
//! All integers and floats are little-endian.

use super::{AutodiffError, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VSRCKPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: String,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// `key=value` pairs of the metadata line.
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta
            .split_whitespace()
            .filter_map(|kv| kv.split_once('='))
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v)
    }

    /// Copies every stored tensor into the same-named parameter of `store`.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<(), AutodiffError> {
        for i in 0..store.len() {
            let id = super::ParamId(i);
            let name = store.get(id).name.clone();
            let t = self
                .get(&name)
                .ok_or_else(|| AutodiffError::Checkpoint(format!("missing parameter {name:?}")))?;
            if t.dims() != store.get(id).value.dims() {
                return Err(AutodiffError::Checkpoint(format!(
                    "parameter {name:?} has dims {:?}, model expects {:?}",
                    t.dims(),
                    store.get(id).value.dims()
                )));
            }
            store.get_mut(id).value = t.clone();
        }
        Ok(())
    }
}

pub fn save_checkpoint(meta: &str, store: &ParamStore) -> Vec<u8> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    out.extend_from_slice(meta.replace('\n', " ").as_bytes());
    out.push(b'\n');
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.dims().len() as u32).to_le_bytes());
        for &d in p.value.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], AutodiffError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| AutodiffError::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, AutodiffError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<Checkpoint, AutodiffError> {
    if !bytes.starts_with(CHECKPOINT_MAGIC) {
        return Err(AutodiffError::Checkpoint("bad magic".into()));
    }
    let rest = &bytes[CHECKPOINT_MAGIC.len()..];
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| AutodiffError::Checkpoint("missing metadata line".into()))?;
    let meta = std::str::from_utf8(&rest[..nl])
        .map_err(|_| AutodiffError::Checkpoint("metadata is not UTF-8".into()))?
        .to_string();
    let mut r = Reader {
        bytes,
        pos: CHECKPOINT_MAGIC.len() + nl + 1,
    };
    let mut params = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| AutodiffError::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = dims.iter().product();
        let raw = r.take(
            n.checked_mul(8)
                .ok_or_else(|| AutodiffError::Checkpoint("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push((name, Tensor::new(&dims, data)?));
    }
    Ok(Checkpoint { meta, params })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_layout() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(&[1, 2], vec![1.5, -2.0]).unwrap());
        s.add_frozen("mu", Tensor::scalar(0.25));
        let bytes = save_checkpoint("germ depth=2 seed=7", &s);
        assert!(bytes.starts_with(b"VSRCKPT1germ depth=2 seed=7\n"));
        let header = 8 + 20;
        assert_eq!(&bytes[header..header + 4], &1u32.to_le_bytes());
        assert_eq!(bytes[header + 4], b'w');
        let ck = load_checkpoint(&bytes).unwrap();
        assert_eq!(ck.meta_value("seed"), Some("7"));
        assert_eq!(ck.get("w").unwrap().data(), &[1.5, -2.0]);
        let mut fresh = ParamStore::new();
        fresh.add("w", Tensor::zeros(&[1, 2]));
        fresh.add_frozen("mu", Tensor::zeros(&[1]));
        ck.restore_into(&mut fresh).unwrap();
        assert_eq!(fresh, s);
    }

    #[test]
    fn rejects_damaged_bytes() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(&[3]));
        let bytes = save_checkpoint("m", &s);
        assert!(load_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        assert!(load_checkpoint(b"VSRCKPT0\n").is_err());
        let mut other = ParamStore::new();
        other.add("w", Tensor::zeros(&[4]));
        assert!(load_checkpoint(&bytes).unwrap().restore_into(&mut other).is_err());
    }
}
