//! Binary payload layout (all integers and floats little-endian):
//!
//! ```text
//! "MPES"  u32 version = 1
//! u32 n_videos  u32 frames  u32 dim      f32[n_videos·frames·dim]   videos sorted by id
//! u32 n_temp    u32 n_classes u32 dim    f32[n_temp·n_classes·dim]  sorted by (template, class)
//! u32 crc32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use super::{EmbeddingRecords, EmbeddingStore, StoreManifest};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MPES";
pub const PAYLOAD_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const PAYLOAD_FILE: &str = "embeddings.bin";

/// Validates `records` against `manifest` and writes both files into `dir`.
pub fn write_store(dir: impl AsRef<Path>, manifest: StoreManifest, records: EmbeddingRecords) -> Result<EmbeddingStore> {
    let store = EmbeddingStore::new(manifest, records)?;
    write_store_files(dir.as_ref(), &store)?;
    Ok(store)
}

pub(super) fn write_store_files(dir: &Path, store: &EmbeddingStore) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = toml::to_string(store.manifest())
        .map_err(|e| Error::Format(format!("manifest serialisation: {e}")))?;
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    let ppath = dir.join(PAYLOAD_FILE);
    fs::write(&ppath, encode_payload(store)).map_err(|e| Error::io(&ppath, e))
}

pub fn read_store(dir: impl AsRef<Path>) -> Result<EmbeddingStore> {
    let dir = dir.as_ref();
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: StoreManifest = toml::from_str(&text).map_err(|e| Error::Parse {
        path: mpath.clone(),
        detail: e.to_string(),
    })?;
    manifest.validate()?;
    let ppath = dir.join(PAYLOAD_FILE);
    let bytes = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
    let records = decode_payload(&manifest, &bytes)?;
    EmbeddingStore::new(manifest, records)
}

fn sorted_video_order(manifest: &StoreManifest) -> Vec<usize> {
    let mut order: Vec<usize> = (0..manifest.videos.len()).collect();
    order.sort_by(|&a, &b| manifest.videos[a].id.cmp(&manifest.videos[b].id));
    order
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, vs: &[f32]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_payload(store: &EmbeddingStore) -> Vec<u8> {
    let m = store.manifest();
    let (l, d, nc) = (m.frames, m.dim, m.classes.len());
    let mut out = Vec::with_capacity(8 + 24 + 4 * (m.videos.len() * l * d + m.n_temp * nc * d) + 4);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, PAYLOAD_VERSION as usize);

    put_u32(&mut out, m.videos.len());
    put_u32(&mut out, l);
    put_u32(&mut out, d);
    for i in sorted_video_order(m) {
        put_f32s(&mut out, store.visual(i).data());
    }

    put_u32(&mut out, m.n_temp);
    put_u32(&mut out, nc);
    put_u32(&mut out, d);
    for t in 0..m.n_temp {
        for c in 0..nc {
            put_f32s(&mut out, store.text(t, c));
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                expected: end,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn expect_header(field: &str, found: u32, expected: usize) -> Result<()> {
    if found as usize != expected {
        return Err(Error::Format(format!(
            "payload header {field} = {found} disagrees with manifest value {expected}"
        )));
    }
    Ok(())
}

pub fn decode_payload(manifest: &StoreManifest, bytes: &[u8]) -> Result<EmbeddingRecords> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Format("bad magic bytes, not an embedding store payload".into()));
    }
    let version = cur.u32()?;
    if version != PAYLOAD_VERSION {
        return Err(Error::Format(format!("unsupported payload version {version}")));
    }
    let (l, d, nc) = (manifest.frames, manifest.dim, manifest.classes.len());

    expect_header("n_videos", cur.u32()?, manifest.videos.len())?;
    expect_header("frames", cur.u32()?, l)?;
    expect_header("dim", cur.u32()?, d)?;
    let mut records = EmbeddingRecords::default();
    for i in sorted_video_order(manifest) {
        let data = cur.f32s(l * d)?;
        records
            .visual
            .insert(manifest.videos[i].id.clone(), Tensor::from_parts(vec![l, d], data));
    }

    expect_header("n_temp", cur.u32()?, manifest.n_temp)?;
    expect_header("n_classes", cur.u32()?, nc)?;
    expect_header("dim", cur.u32()?, d)?;
    for t in 0..manifest.n_temp {
        for c in 0..nc {
            records.text.insert((t, c), cur.f32s(d)?);
        }
    }

    let body_end = cur.pos;
    let stored = cur.u32()?;
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checksum",
            bytes.len() - cur.pos
        )));
    }
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    Ok(records)
}
