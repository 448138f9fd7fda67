//! The `FDWN` weight archive: a bit-exact little-endian container of named
//! f32 tensors followed by a CRC32 of everything after the magic.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::NetworkGraph;
use crate::params::ParamStore;

pub const MAGIC: &[u8; 4] = b"FDWN";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// Entries in the network's canonical order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightArchive {
    pub entries: Vec<ArchiveEntry>,
}

impl WeightArchive {
    pub fn from_store(store: &ParamStore<f32>) -> Self {
        WeightArchive {
            entries: store
                .iter()
                .map(|(_, p)| ArchiveEntry {
                    name: p.name.clone(),
                    dims: p.dims.clone(),
                    data: p.value.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payload: usize = self.entries.iter().map(|e| e.data.len() * 4 + e.name.len() + 64).sum();
        let mut out = Vec::with_capacity(16 + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32_of(self.entries.len(), "entry count")?.to_le_bytes());
        for e in &self.entries {
            let name_len = u16::try_from(e.name.len())
                .map_err(|_| Error::MalformedArchive(format!("name `{}` too long", e.name)))?;
            let rank = u8::try_from(e.dims.len())
                .map_err(|_| Error::MalformedArchive(format!("rank of `{}` too large", e.name)))?;
            if e.dims.iter().product::<usize>() != e.data.len() {
                return Err(Error::MalformedArchive(format!(
                    "`{}` has dims {:?} but {} values",
                    e.name,
                    e.dims,
                    e.data.len()
                )));
            }
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(rank);
            for &d in &e.dims {
                out.extend_from_slice(&u32_of(d, "dimension")?.to_le_bytes());
            }
            out.push(DTYPE_F32);
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out[MAGIC.len()..]);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    /// Checks magic, then the checksum, then the version and layout.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::BadMagic);
        }
        let body = &bytes[MAGIC.len()..];
        if body.len() < 4 {
            return Err(Error::ChecksumMismatch {
                stored: 0,
                computed: crc32fast::hash(body),
            });
        }
        let (content, tail) = body.split_at(body.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(content);
        if stored != computed {
            return Err(Error::ChecksumMismatch { stored, computed });
        }
        let mut r = Reader { buf: content, pos: 0 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::VersionUnsupported(version));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::MalformedArchive("entry name is not UTF-8".into()))?
                .to_string();
            let rank = r.u8()? as usize;
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(Error::MalformedArchive(format!("`{name}` has dtype {dtype}")));
            }
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::MalformedArchive(format!("`{name}` is too large")))?;
            let data = r
                .take(n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            entries.push(ArchiveEntry { name, dims, data });
        }
        if r.pos != content.len() {
            return Err(Error::MalformedArchive(format!(
                "{} trailing bytes",
                content.len() - r.pos
            )));
        }
        Ok(WeightArchive { entries })
    }

    /// Copies every entry into `store`; on error the store is untouched.
    pub fn apply_to(self, store: &mut ParamStore<f32>) -> Result<()> {
        store.assign(self.entries.into_iter().map(|e| (e.name, e.dims, e.data)).collect())
    }
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::MalformedArchive(format!("{what} {v} exceeds u32")))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::MalformedArchive(format!("unexpected end at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn save_weights(net: &NetworkGraph<f32>) -> Result<Vec<u8>> {
    WeightArchive::from_store(&net.params).to_bytes()
}

pub fn load_weights(bytes: &[u8], net: &mut NetworkGraph<f32>) -> Result<()> {
    WeightArchive::from_bytes(bytes)?.apply_to(&mut net.params)
}

pub fn save_weights_file(net: &NetworkGraph<f32>, path: &Path) -> Result<()> {
    write_atomic(path, &save_weights(net)?)
}

pub fn load_weights_file(path: &Path, net: &mut NetworkGraph<f32>) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    load_weights(&bytes, net)
}

/// Writes to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::io(path, std::io::Error::other("path has no file name")))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rng;

    fn small() -> WeightArchive {
        WeightArchive {
            entries: vec![
                ArchiveEntry {
                    name: "a".into(),
                    dims: vec![2],
                    data: vec![1.0, -2.5],
                },
                ArchiveEntry {
                    name: "b.k".into(),
                    dims: vec![1, 1, 1, 1],
                    data: vec![0.25],
                },
            ],
        }
    }

    #[test]
    fn layout_is_bit_exact() {
        let bytes = small().to_bytes().unwrap();
        let mut want = b"FDWN".to_vec();
        want.extend_from_slice(&[1, 0, 0, 0, 2, 0, 0, 0]);
        want.extend_from_slice(&[1, 0, b'a', 1, 2, 0, 0, 0, 0]);
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.5f32).to_le_bytes());
        want.extend_from_slice(&[3, 0, b'b', b'.', b'k', 4]);
        for _ in 0..4 {
            want.extend_from_slice(&[1, 0, 0, 0]);
        }
        want.push(0);
        want.extend_from_slice(&0.25f32.to_le_bytes());
        let crc = crc32fast::hash(&want[4..]);
        want.extend_from_slice(&crc.to_le_bytes());
        assert_eq!(bytes, want);
        assert_eq!(WeightArchive::from_bytes(&bytes).unwrap(), small());
    }

    #[test]
    fn crc_matches_the_standard_check_value() {
        assert_eq!(crc32fast::hash(b"123456789"), 0xCBF4_3926);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let bytes = small().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(WeightArchive::from_bytes(&bad), Err(Error::BadMagic)));
        assert!(matches!(WeightArchive::from_bytes(b"FD"), Err(Error::BadMagic)));
        for cut in [5, 10, bytes.len() - 1] {
            assert!(matches!(
                WeightArchive::from_bytes(&bytes[..cut]),
                Err(Error::ChecksumMismatch { .. })
            ));
        }
    }

    #[test]
    fn rejects_other_versions_with_valid_crc() {
        let mut bytes = small().to_bytes().unwrap();
        bytes[4] = 2;
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[4..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            WeightArchive::from_bytes(&bytes),
            Err(Error::VersionUnsupported(2))
        ));
    }

    #[test]
    fn network_round_trip_and_class_mismatch() {
        let net = NetworkGraph::<f32>::build(19, &mut Rng::new(1)).unwrap();
        let bytes = save_weights(&net).unwrap();
        let mut other = NetworkGraph::<f32>::build(19, &mut Rng::new(2)).unwrap();
        load_weights(&bytes, &mut other).unwrap();
        assert_eq!(other.params, net.params);
        assert_eq!(save_weights(&other).unwrap(), bytes);

        let mut eleven = NetworkGraph::<f32>::build(11, &mut Rng::new(2)).unwrap();
        let before = eleven.params.clone();
        match load_weights(&bytes, &mut eleven) {
            Err(Error::ShapeMismatchOnLoad { name, .. }) => assert!(name.starts_with("layer31")),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(eleven.params, before);
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.fdwn");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
