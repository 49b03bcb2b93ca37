//! Knowledge-grounded item representations.
//!
//! Each item carries structured knowledge along two perspectives — what user
//! demand it serves and what product attributes it has. Both are rendered to
//! canonical text, pushed through a text encoder, and summed into one vector
//! per item. The built-in encoder is a seeded feature hasher, so the whole
//! path is deterministic and dependency-free; any embedding backend can slot
//! in through the `TextEncoder` trait.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::tensor::l2_normalize;
use crate::types::ItemId;

/// One knowledge dimension: a label, a short free-text analysis, and the
/// keywords that ground it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeEntry {
    pub dimension: String,
    #[serde(default)]
    pub analysis: String,
    pub keywords: Vec<String>,
}

/// Structured knowledge for one item, split by perspective.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemKnowledge {
    pub user_demand: Vec<KnowledgeEntry>,
    pub product_attribute: Vec<KnowledgeEntry>,
}

/// Dense representation of one item.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ItemRep {
    pub item_id: ItemId,
    pub vector: Vec<f32>,
}

/// Renders knowledge to the two canonical text strings (demand, attribute).
///
/// Each entry becomes `dimension: kw1, kw2`; entries are joined with `; `.
/// The rendering is bit-exact stable — representations, and everything
/// downstream of them, depend on it.
pub fn build_knowledge_text(k: &ItemKnowledge) -> (String, String) {
    (render(&k.user_demand), render(&k.product_attribute))
}

fn render(entries: &[KnowledgeEntry]) -> String {
    entries
        .iter()
        .map(|e| format!("{}: {}", e.dimension, e.keywords.join(", ")))
        .collect::<Vec<_>>()
        .join("; ")
}

pub trait TextEncoder {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Vec<f32>;
}

/// Seeded signed feature hashing into a fixed-width vector.
///
/// Tokens are maximal alphanumeric runs. Each token hashes (with the seed) to
/// one coordinate and a sign, so texts sharing tokens land near each other
/// and one inserted token moves exactly one pre-normalization coordinate.
#[derive(Clone, Debug)]
pub struct HashEncoder {
    dim: usize,
    seed: u64,
}

pub fn hash_encoder(dim: usize, seed: u64) -> HashEncoder {
    HashEncoder { dim, seed }
}

impl HashEncoder {
    /// Signed token counts before normalization.
    pub fn raw_counts(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0.0f32; self.dim];
        for token in text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
        {
            let mut hasher = Sha256::new();
            hasher.update(self.seed.to_le_bytes());
            hasher.update(token.as_bytes());
            let digest = hasher.finalize();
            let h = u64::from_le_bytes(digest[..8].try_into().unwrap());
            let idx = (h % self.dim as u64) as usize;
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[idx] += sign;
        }
        v
    }
}

impl TextEncoder for HashEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Vec<f32> {
        let mut v = self.raw_counts(text);
        l2_normalize(&mut v, 1e-12);
        v
    }
}

/// Combines both perspectives: h = enc(demand text) + enc(attribute text).
///
/// Items with no knowledge at all get a zero vector and a logged warning;
/// downstream cosine against them is defined as zero.
pub fn encode_item(item_id: ItemId, k: &ItemKnowledge, encoder: &dyn TextEncoder) -> ItemRep {
    let (demand, attribute) = build_knowledge_text(k);
    if demand.is_empty() && attribute.is_empty() {
        log::warn!("item {item_id} has no knowledge; representation is all-zero");
        return ItemRep {
            item_id,
            vector: vec![0.0; encoder.dim()],
        };
    }
    let mut vector = encoder.encode(&demand);
    for (h, t) in vector.iter_mut().zip(encoder.encode(&attribute)) {
        *h += t;
    }
    ItemRep { item_id, vector }
}

/// Item representations packed row-major with an id index. The lookup table
/// every downstream consumer (tokenizer, filler, ranker, metrics) reads.
#[derive(Clone, Debug)]
pub struct RepTable {
    dim: usize,
    ids: Vec<ItemId>,
    by_id: BTreeMap<ItemId, usize>,
    data: Vec<f32>,
}

impl RepTable {
    pub fn from_reps(reps: Vec<ItemRep>) -> Result<Self> {
        let dim = reps
            .first()
            .map(|r| r.vector.len())
            .ok_or_else(|| Error::data("empty representation table"))?;
        let mut ids = Vec::with_capacity(reps.len());
        let mut by_id = BTreeMap::new();
        let mut data = Vec::with_capacity(reps.len() * dim);
        for (row, rep) in reps.into_iter().enumerate() {
            if rep.vector.len() != dim {
                return Err(Error::data(format!(
                    "item {} has dim {}, table has {dim}",
                    rep.item_id,
                    rep.vector.len()
                )));
            }
            if !rep.vector.iter().all(|v| v.is_finite()) {
                return Err(Error::data(format!("non-finite vector for item {}", rep.item_id)));
            }
            if by_id.insert(rep.item_id, row).is_some() {
                return Err(Error::data(format!("duplicate item id {}", rep.item_id)));
            }
            ids.push(rep.item_id);
            data.extend_from_slice(&rep.vector);
        }
        Ok(RepTable { dim, ids, by_id, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[ItemId] {
        &self.ids
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    pub fn row_of(&self, id: ItemId) -> Option<usize> {
        self.by_id.get(&id).copied()
    }

    pub fn get(&self, id: ItemId) -> Result<&[f32]> {
        self.row_of(id)
            .map(|r| self.row(r))
            .ok_or_else(|| Error::data(format!("item {id} missing from representation table")))
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}
