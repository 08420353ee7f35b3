//! Model checkpoint files.
//!
//! Layout: magic `ANRC`, format version (u32 LE), a length-prefixed JSON
//! architecture descriptor, then every parameter in ascending name order as
//! length-prefixed name, u32 rank, u32 dims, and f32 LE data. Weights are
//! stored in f32; loading widens back to f64, so save/load/save is
//! byte-identical while load/save of a freshly trained f64 state rounds once.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Arch, ModelState};

const MAGIC: &[u8; 4] = b"ANRC";
const VERSION: u32 = 1;

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

/// Serializes a model state; the byte stream is a pure function of the
/// state (BTreeMap order fixes the parameter sequence).
pub fn save(state: &ModelState, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let arch_json = serde_json::to_string(state.arch())
        .map_err(|e| Error::format(path_str(path), format!("architecture encode: {e}")))?;
    buf.extend_from_slice(&(arch_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(arch_json.as_bytes());
    for (name, t) in state.params() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path_str(path), e))?;
    file.write_all(&buf).map_err(|e| Error::io(path_str(path), e))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                &self.path,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Loads and fully validates a checkpoint (magic, version, architecture,
/// exact parameter catalog, finite values).
pub fn load(path: &Path) -> Result<ModelState> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path_str(path), e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path: path_str(path),
    };

    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(&r.path, "bad magic (not a checkpoint file)"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(
            &r.path,
            format!("unsupported format version {version} (expected {VERSION})"),
        ));
    }
    let arch_len = r.u32("architecture length")? as usize;
    let arch_bytes = r.take(arch_len, "architecture descriptor")?;
    let arch: Arch = serde_json::from_slice(arch_bytes)
        .map_err(|e| Error::format(&r.path, format!("architecture decode: {e}")))?;

    let mut params = BTreeMap::new();
    while !r.done() {
        let name_len = r.u32("parameter name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "parameter name")?)
            .map_err(|_| Error::format(&r.path, "parameter name is not UTF-8"))?
            .to_string();
        let rank = r.u32("parameter rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::format(
                &r.path,
                format!("parameter {name} has implausible rank {rank}"),
            ));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("parameter dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4, "parameter data")?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let t = Tensor::new(shape, data)
            .map_err(|e| Error::format(&r.path, format!("parameter {name}: {e}")))?;
        if params.insert(name.clone(), t).is_some() {
            return Err(Error::format(&r.path, format!("duplicate parameter {name}")));
        }
    }

    ModelState::from_params(arch, params)
        .map_err(|e| Error::format(path_str(path), format!("catalog mismatch: {e}")))
}

#[cfg(test)]
mod tests {
    use super::super::tests::small_arch;
    use super::*;

    #[test]
    fn save_load_round_trips_and_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.anrc");
        let p2 = dir.path().join("b.anrc");
        let state = ModelState::init(small_arch(), 42).unwrap();
        save(&state, &p1).unwrap();
        let loaded = load(&p1).unwrap();
        assert_eq!(loaded.arch(), state.arch());
        save(&loaded, &p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2, "save -> load -> save must be byte-identical");
        // f32 storage: loading the loaded state again changes nothing.
        let again = load(&p2).unwrap();
        assert_eq!(again.params(), loaded.params());
    }

    #[test]
    fn load_rejects_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.anrc");
        let state = ModelState::init(small_arch(), 1).unwrap();
        save(&state, &p).unwrap();
        let good = std::fs::read(&p).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        std::fs::write(&p, &bad_magic).unwrap();
        assert!(matches!(load(&p), Err(Error::Format { .. })));

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        std::fs::write(&p, &bad_version).unwrap();
        assert!(matches!(load(&p), Err(Error::Format { .. })));

        let truncated = &good[..good.len() - 3];
        std::fs::write(&p, truncated).unwrap();
        assert!(matches!(load(&p), Err(Error::Format { .. })));

        let mut extra = good.clone();
        extra.extend_from_slice(&[0, 0]);
        std::fs::write(&p, &extra).unwrap();
        assert!(matches!(load(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn load_rejects_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let err = load(&dir.path().join("absent.anrc")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn loaded_weights_match_f32_rounding() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.anrc");
        let state = ModelState::init(small_arch(), 7).unwrap();
        save(&state, &p).unwrap();
        let loaded = load(&p).unwrap();
        for (name, t) in state.params() {
            let lt = loaded.param(name).unwrap();
            for (&orig, &got) in t.data().iter().zip(lt.data()) {
                assert_eq!(got, orig as f32 as f64, "{name}");
            }
        }
    }
}
