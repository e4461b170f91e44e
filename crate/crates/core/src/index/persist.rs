//! `LKSYNC1` index file.
//!
//! All integers little-endian.
//!
//! ```text
//! header   magic "LKSYNC1" | version u32 | dim u32 | count u64 | crc32(header so far) u32
//! vectors  count * dim * f32
//! attrs    per entry: id str | flags u8 | category u8 | gender u8 | brand str
//!          | has_price u8 [minor u64 | currency str] | sizes u32 + str* | geography str
//! graph    m u32 | ef_construction u32 | ef_search u32 | exact_threshold u32 | seed u64
//!          | entry u32 (u32::MAX = none) | max_level u32
//!          | per entry: top level u8, then per level: n u32 + n * u32
//! trailer  crc32(vectors..graph) u32
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8. Flag bit 0 marks a tombstone
//! and is reserved; writers always emit 0.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use super::{AnnParams, FilterKey, IndexError, IndexParams, Store};
use crate::attributes::{AttributeSet, Category, Gender, Price};
use crate::index::hnsw::Graph;

pub const MAGIC: &[u8; 7] = b"LKSYNC1";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 7 + 4 + 4 + 8 + 4;
const NO_ENTRY: u32 = u32::MAX;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
}

pub(crate) fn encode(params: &IndexParams, store: &Store) -> Vec<u8> {
    let count = store.ids.len();
    let mut w = Writer {
        buf: Vec::with_capacity(HEADER_LEN + count * (store.dim * 4 + 64)),
    };
    w.buf.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    w.u32(store.dim as u32);
    w.u64(count as u64);
    let header_crc = crc32fast::hash(&w.buf);
    w.u32(header_crc);

    for v in &store.vectors {
        w.buf.extend_from_slice(&v.to_le_bytes());
    }
    for (id, attrs) in store.ids.iter().zip(&store.attrs) {
        w.str(id);
        w.u8(0);
        w.u8(attrs.category.code());
        w.u8(attrs.gender.code());
        w.str(&attrs.brand);
        match &attrs.price {
            Some(p) => {
                w.u8(1);
                w.u64(p.minor);
                w.str(&p.currency);
            }
            None => w.u8(0),
        }
        w.u32(attrs.sizes.len() as u32);
        for s in &attrs.sizes {
            w.str(s);
        }
        w.str(&attrs.geography);
    }
    let ann = params.ann;
    w.u32(ann.m as u32);
    w.u32(ann.ef_construction as u32);
    w.u32(ann.ef_search as u32);
    w.u32(ann.exact_threshold as u32);
    w.u64(ann.seed);
    w.u32(store.graph.entry.unwrap_or(NO_ENTRY));
    w.u32(store.graph.max_level as u32);
    for levels in &store.graph.links {
        w.u8((levels.len() - 1) as u8);
        for l in levels {
            w.u32(l.len() as u32);
            for &n in l {
                w.u32(n);
            }
        }
    }
    let body_crc = crc32fast::hash(&w.buf[HEADER_LEN..]);
    w.u32(body_crc);
    w.buf
}

/// Writes to a sibling temp file and renames it over `path`, so a crash
/// leaves either the old file or the new one.
pub(crate) fn save(params: &IndexParams, store: &Store, path: &Path) -> Result<u64, IndexError> {
    let bytes = encode(params, store);
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "index".into());
    let tmp = path.with_file_name(format!(".{file_name}.tmp-{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(bytes.len() as u64)
}

pub(crate) fn load(path: &Path) -> Result<(IndexParams, Store), IndexError> {
    let bytes = std::fs::read(path)?;
    decode(&bytes)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(msg: impl Into<String>) -> IndexError {
    IndexError::CorruptFile(msg.into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IndexError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| corrupt("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, IndexError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, IndexError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, IndexError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String, IndexError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("invalid utf-8 string"))
    }
}

pub(crate) fn decode(bytes: &[u8]) -> Result<(IndexParams, Store), IndexError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    if bytes.len() < HEADER_LEN + 4 {
        return Err(corrupt("truncated header"));
    }
    let mut r = Reader { buf: bytes, pos: MAGIC.len() };
    let version = r.u32()?;
    let dim = r.u32()? as usize;
    let count = r.u64()?;
    let stored_crc = r.u32()?;
    if crc32fast::hash(&bytes[..HEADER_LEN - 4]) != stored_crc {
        return Err(corrupt("header checksum mismatch"));
    }
    if version != FORMAT_VERSION {
        return Err(IndexError::VersionUnsupported(version));
    }
    let body = &bytes[HEADER_LEN..bytes.len() - 4];
    let trailer = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    if crc32fast::hash(body) != trailer {
        return Err(corrupt("body checksum mismatch (truncated or damaged)"));
    }
    if dim == 0 {
        return Err(corrupt("zero dimension"));
    }
    let count = usize::try_from(count).map_err(|_| corrupt("count overflow"))?;
    let mut r = Reader { buf: body, pos: 0 };

    let vec_bytes = count.checked_mul(dim).and_then(|n| n.checked_mul(4)).ok_or_else(|| corrupt("size overflow"))?;
    let raw = r.take(vec_bytes)?;
    let vectors: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if vectors.iter().any(|v| !v.is_finite()) {
        return Err(corrupt("non-finite vector component"));
    }

    let mut ids = Vec::with_capacity(count);
    let mut slots = HashMap::with_capacity(count);
    let mut attrs = Vec::with_capacity(count);
    for slot in 0..count {
        let id = r.str()?;
        let _flags = r.u8()?;
        let category = Category::from_code(r.u8()?).ok_or_else(|| corrupt("bad category code"))?;
        let gender = Gender::from_code(r.u8()?).ok_or_else(|| corrupt("bad gender code"))?;
        let brand = r.str()?;
        let price = match r.u8()? {
            0 => None,
            1 => Some(Price {
                minor: r.u64()?,
                currency: r.str()?,
            }),
            _ => return Err(corrupt("bad price flag")),
        };
        let n_sizes = r.u32()? as usize;
        let mut sizes = BTreeSet::new();
        for _ in 0..n_sizes {
            sizes.insert(r.str()?);
        }
        let geography = r.str()?;
        if slots.insert(id.clone(), slot as u32).is_some() {
            return Err(corrupt(format!("duplicate product id {id:?}")));
        }
        ids.push(id);
        attrs.push(AttributeSet {
            category,
            gender,
            brand,
            price,
            sizes,
            geography,
        });
    }

    let ann = AnnParams {
        m: r.u32()? as usize,
        ef_construction: r.u32()? as usize,
        ef_search: r.u32()? as usize,
        exact_threshold: r.u32()? as usize,
        seed: r.u64()?,
    };
    let params = IndexParams { dim, ann };
    params.validate().map_err(|e| corrupt(e.to_string()))?;
    let entry = match r.u32()? {
        NO_ENTRY => None,
        e if (e as usize) < count => Some(e),
        _ => return Err(corrupt("entry point out of range")),
    };
    let max_level = r.u32()? as usize;
    let mut links = Vec::with_capacity(count);
    for _ in 0..count {
        let top = r.u8()? as usize;
        let mut levels = Vec::with_capacity(top + 1);
        for _ in 0..=top {
            let n = r.u32()? as usize;
            let mut l = Vec::with_capacity(n.min(1024));
            for _ in 0..n {
                let nb = r.u32()?;
                if nb as usize >= count {
                    return Err(corrupt("neighbour out of range"));
                }
                l.push(nb);
            }
            levels.push(l);
        }
        links.push(levels);
    }
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes after graph"));
    }
    if entry.is_none() != (count == 0) {
        return Err(corrupt("entry point inconsistent with count"));
    }

    let mut graph = Graph::new(ann.m, ann.ef_construction, ann.seed);
    graph.links = links;
    graph.entry = entry;
    graph.max_level = max_level;

    let mut store = Store::new(&params);
    store.ids = ids;
    store.slots = slots;
    store.vectors = vectors;
    store.graph = graph;
    store.keys = Vec::with_capacity(count);
    for a in &attrs {
        let key: FilterKey = store.key_for(a);
        store.keys.push(key);
    }
    store.attrs = attrs;
    Ok((params, store))
}
