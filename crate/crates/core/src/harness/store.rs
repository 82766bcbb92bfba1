//! Embedding store file and the forward pass that fills it.
//!
//! Layout, little-endian: magic `AURE`, u16 version, u64 n, u32 d, u32 K,
//! then per record u64 id, `z` as d f32, and K components of d f32 each,
//! followed by a CRC32 of everything before it.

use std::io::{Read, Write};

use crate::encoder::{checked_body, encode_batch, Cursor, ModelBundle};
use crate::error::{Error, Result};
use crate::metrics::EmbeddingSet;
use crate::numcore::Tensor;
use crate::synthcohort::{feature_matrix, CohortRecord};

const STORE_MAGIC: &[u8; 4] = b"AURE";
const STORE_VERSION: u16 = 1;
const EMBED_BATCH: usize = 1024;

/// Encodes every record, rows sorted by id.
pub fn embed(bundle: &ModelBundle, records: &[CohortRecord]) -> Result<EmbeddingSet> {
    let p = bundle.config.input_dim;
    if let Some(r) = records.iter().find(|r| r.features.len() != p) {
        return Err(Error::config(format!(
            "record {} has {} features, checkpoint expects {p}",
            r.id,
            r.features.len()
        )));
    }
    if records.is_empty() {
        return Err(Error::contract("nothing to embed"));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by_key(|&i| records[i].id);
    let d = bundle.config.latent_dim;
    let k = bundle.config.subspaces;
    let mut z = Vec::with_capacity(records.len() * d);
    let mut comps = vec![Vec::with_capacity(records.len() * d); k];
    for chunk in order.chunks(EMBED_BATCH) {
        let emb = encode_batch(bundle, &feature_matrix(records, chunk)?)?;
        z.extend_from_slice(emb.z.data());
        for (dst, src) in comps.iter_mut().zip(&emb.components) {
            dst.extend_from_slice(src.data());
        }
    }
    let n = records.len();
    EmbeddingSet::new(
        order.iter().map(|&i| records[i].id).collect(),
        Tensor::matrix(n, d, z)?,
        comps.into_iter().map(|c| Tensor::matrix(n, d, c)).collect::<Result<_>>()?,
    )
}

pub fn write_store(out: &mut impl Write, set: &EmbeddingSet) -> Result<()> {
    let n = set.len();
    let d = set.z.cols();
    let k = set.components.len();
    let mut buf = Vec::with_capacity(18 + n * (8 + 4 * d * (k + 1)) + 4);
    buf.extend_from_slice(STORE_MAGIC);
    buf.extend_from_slice(&STORE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    buf.extend_from_slice(&(k as u32).to_le_bytes());
    for i in 0..n {
        buf.extend_from_slice(&set.ids[i].to_le_bytes());
        for t in std::iter::once(&set.z).chain(&set.components) {
            for &v in t.row(i) {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_store(input: &mut impl Read) -> Result<EmbeddingSet> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let body = checked_body(&bytes)?;
    let mut c = Cursor { buf: body, pos: 0 };
    if c.take(4)? != STORE_MAGIC {
        return Err(Error::format("not an embedding store (bad magic)"));
    }
    let version = c.u16()?;
    if version != STORE_VERSION {
        return Err(Error::format(format!("unsupported store version {version}")));
    }
    let n = usize::try_from(c.u64()?).map_err(|_| Error::format("record count too large"))?;
    let d = c.u32()? as usize;
    let k = c.u32()? as usize;
    let record_len = d
        .checked_mul(k + 1)
        .and_then(|x| x.checked_mul(4))
        .and_then(|x| x.checked_add(8))
        .ok_or_else(|| Error::format("bad store dimensions"))?;
    if n.checked_mul(record_len) != Some(body.len() - c.pos) {
        return Err(Error::format("store length does not match its header"));
    }
    let mut ids = Vec::with_capacity(n);
    let mut mats = vec![Vec::with_capacity(n * d); k + 1];
    for _ in 0..n {
        ids.push(c.u64()?);
        for m in mats.iter_mut() {
            for b in c.take(4 * d)?.chunks_exact(4) {
                m.push(f32::from_le_bytes(b.try_into().unwrap()) as f64);
            }
        }
    }
    let mut mats = mats.into_iter().map(|m| Tensor::matrix(n, d, m));
    let z = mats.next().unwrap()?;
    EmbeddingSet::new(ids, z, mats.collect::<Result<_>>()?)
}
