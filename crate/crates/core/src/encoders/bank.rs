//! Embedding bank file format.
//!
//! Layout (little-endian): magic `MEFAEMB1`, `u32` version, `u32` modality
//! (0 image, 1 text, 2 similarity rows), `u32` item count, `u32` D, then per
//! item `u32` identity id, `u32` local count, `f32` global[D],
//! `f32` locals[local_count x D].

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EncodedItem;
use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::numerics::Tensor;

pub const BANK_MAGIC: &[u8; 8] = b"MEFAEMB1";
pub const BANK_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
    /// Rows of a query-by-gallery similarity matrix stored as globals.
    Similarity,
}

impl Modality {
    pub fn tag(self) -> u32 {
        match self {
            Modality::Image => 0,
            Modality::Text => 1,
            Modality::Similarity => 2,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(Modality::Image),
            1 => Some(Modality::Text),
            2 => Some(Modality::Similarity),
            _ => None,
        }
    }
}

/// Items of one modality sharing a dimension, indexed by identity.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBank {
    modality: Modality,
    dim: usize,
    items: Vec<EncodedItem<f32>>,
    by_identity: BTreeMap<u32, Vec<usize>>,
}

impl EmbeddingBank {
    pub fn new(modality: Modality, dim: usize) -> Self {
        EmbeddingBank {
            modality,
            dim,
            items: Vec::new(),
            by_identity: BTreeMap::new(),
        }
    }

    pub fn from_items(
        modality: Modality,
        dim: usize,
        items: impl IntoIterator<Item = EncodedItem<f32>>,
    ) -> Result<Self> {
        let mut bank = EmbeddingBank::new(modality, dim);
        for it in items {
            bank.push(it)?;
        }
        Ok(bank)
    }

    pub fn push(&mut self, item: EncodedItem<f32>) -> Result<()> {
        if item.dim() != self.dim {
            return Err(Error::Shape(format!(
                "bank has D = {}, item has D = {}",
                self.dim,
                item.dim()
            )));
        }
        self.by_identity
            .entry(item.identity_id)
            .or_default()
            .push(self.items.len());
        self.items.push(item);
        Ok(())
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[EncodedItem<f32>] {
        &self.items
    }

    pub fn get(&self, i: usize) -> &EncodedItem<f32> {
        &self.items[i]
    }

    /// Positions of the items carrying `identity_id`.
    pub fn positions_of(&self, identity_id: u32) -> &[usize] {
        self.by_identity
            .get(&identity_id)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn identities(&self) -> Vec<u32> {
        self.items.iter().map(|it| it.identity_id).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(BANK_MAGIC);
        w.u32(BANK_VERSION);
        w.u32(self.modality.tag());
        w.u32(self.items.len() as u32);
        w.u32(self.dim as u32);
        for it in &self.items {
            w.u32(it.identity_id);
            w.u32(it.local_count() as u32);
            for &v in it.global_feat.data() {
                w.f32(v);
            }
            for &v in it.locals.data() {
                w.f32(v);
            }
        }
        w.into_inner()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf);
        let (modality, count, dim) = read_header(&mut r)?;
        if modality == Modality::Similarity {
            return Err(Error::Format {
                offset: 12,
                reason: "file holds similarity rows, not embeddings".into(),
            });
        }
        let mut bank = EmbeddingBank::new(modality, dim);
        for _ in 0..count {
            let id = r.u32()?;
            let locals = r.u32()? as usize;
            let global = read_f32s(&mut r, dim)?;
            let at = r.offset();
            let items = read_f32s(&mut r, locals * dim)?;
            let global = Tensor::vector(global).expect("positive dimension");
            let locals = Tensor::matrix(locals, dim, items).map_err(|e| Error::Format {
                offset: at,
                reason: e.to_string(),
            })?;
            bank.items.push(EncodedItem {
                locals,
                global_feat: global,
                identity_id: id,
            });
            bank.by_identity
                .entry(id)
                .or_default()
                .push(bank.items.len() - 1);
        }
        r.finish()?;
        Ok(bank)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn read_header(r: &mut ByteReader<'_>) -> Result<(Modality, usize, usize)> {
    r.magic(BANK_MAGIC)?;
    r.version(BANK_VERSION)?;
    let at = r.offset();
    let tag = r.u32()?;
    let modality = Modality::from_tag(tag).ok_or_else(|| Error::Format {
        offset: at,
        reason: format!("unknown modality tag {tag}"),
    })?;
    let count = r.u32()? as usize;
    let at = r.offset();
    let dim = r.u32()? as usize;
    if dim == 0 {
        return Err(Error::Format {
            offset: at,
            reason: "dimension must be positive".into(),
        });
    }
    Ok((modality, count, dim))
}

/// Query-by-gallery score rows in the bank layout: one item per query with
/// the query identity, zero locals and the row of scores as the global.
pub fn similarity_rows_to_bytes(query_ids: &[u32], cols: usize, values: &[f32]) -> Result<Vec<u8>> {
    if cols == 0 || values.len() != query_ids.len() * cols {
        return Err(Error::Shape(format!(
            "{} queries x {cols} columns needs {} values, got {}",
            query_ids.len(),
            query_ids.len() * cols,
            values.len()
        )));
    }
    let mut w = ByteWriter::new();
    w.bytes(BANK_MAGIC);
    w.u32(BANK_VERSION);
    w.u32(Modality::Similarity.tag());
    w.u32(query_ids.len() as u32);
    w.u32(cols as u32);
    for (q, &id) in query_ids.iter().enumerate() {
        w.u32(id);
        w.u32(0);
        for &v in &values[q * cols..(q + 1) * cols] {
            w.f32(v);
        }
    }
    Ok(w.into_inner())
}

/// Inverse of [`similarity_rows_to_bytes`]: `(query ids, cols, values)`.
pub fn similarity_rows_from_bytes(buf: &[u8]) -> Result<(Vec<u32>, usize, Vec<f32>)> {
    let mut r = ByteReader::new(buf);
    let (modality, count, cols) = read_header(&mut r)?;
    if modality != Modality::Similarity {
        return Err(Error::Format {
            offset: 12,
            reason: "file holds embeddings, not similarity rows".into(),
        });
    }
    let mut ids = Vec::with_capacity(count);
    let mut values = Vec::with_capacity(count * cols);
    for _ in 0..count {
        ids.push(r.u32()?);
        let at = r.offset();
        if r.u32()? != 0 {
            return Err(Error::Format {
                offset: at,
                reason: "similarity rows carry no locals".into(),
            });
        }
        values.extend(read_f32s(&mut r, cols)?);
    }
    r.finish()?;
    Ok((ids, cols, values))
}

fn read_f32s(r: &mut ByteReader<'_>, n: usize) -> Result<Vec<f32>> {
    let bytes = r.take(n * 4)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}
