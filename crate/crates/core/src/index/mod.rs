//! Knowledge-base store with exact and inverted-file inner-product search.

mod ivf;
mod persist;

use std::collections::HashMap;

pub use ivf::{Quantizer, QuantizerConfig};

use crate::error::{Error, Result};

/// Stored unit norms must be within this of 1.
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub id: u64,
    /// External document key, e.g. the dataset record id it came from.
    pub key: String,
    pub tokens: Vec<u32>,
    pub embedding: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchHit {
    pub id: u64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryIndex {
    d_model: usize,
    entries: Vec<IndexEntry>,
    quantizer: Option<Quantizer>,
    epoch: u64,
    by_id: HashMap<u64, usize>,
    by_key: HashMap<String, u64>,
}

pub(crate) fn score(query: &[f64], embedding: &[f32]) -> f64 {
    query.iter().zip(embedding).map(|(q, e)| q * f64::from(*e)).sum()
}

/// Descending score, ascending id on ties.
pub(crate) fn rank(hits: &mut [SearchHit]) {
    hits.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.id.cmp(&b.id)));
}

fn check_unit(id: u64, embedding: &[f32]) -> Result<()> {
    let n = embedding.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt();
    if (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::Ingestion(format!(
            "entry {id} embedding has norm {n}, expected unit norm"
        )));
    }
    Ok(())
}

impl MemoryIndex {
    pub fn new(d_model: usize, entries: Vec<IndexEntry>, epoch: u64) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(entries.len());
        let mut by_key = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.embedding.len() != d_model {
                return Err(Error::dim("index entry", &[d_model], &[e.embedding.len()]));
            }
            check_unit(e.id, &e.embedding)?;
            if by_id.insert(e.id, i).is_some() {
                return Err(Error::Ingestion(format!("duplicate index id {}", e.id)));
            }
            if by_key.insert(e.key.clone(), e.id).is_some() {
                return Err(Error::Ingestion(format!("duplicate index key {:?}", e.key)));
            }
        }
        Ok(Self {
            d_model,
            entries,
            quantizer: None,
            epoch,
            by_id,
            by_key,
        })
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn entry(&self, id: u64) -> Option<&IndexEntry> {
        self.by_id.get(&id).map(|&i| &self.entries[i])
    }

    pub fn id_for_key(&self, key: &str) -> Option<u64> {
        self.by_key.get(key).copied()
    }

    pub fn quantizer(&self) -> Option<&Quantizer> {
        self.quantizer.as_ref()
    }

    pub fn clear_quantizer(&mut self) {
        self.quantizer = None;
    }

    /// Replaces every embedding (in entry order) and bumps the epoch.
    /// A present quantizer is retrained with its original configuration.
    pub fn replace_embeddings(&mut self, embeddings: Vec<Vec<f32>>) -> Result<()> {
        if embeddings.len() != self.entries.len() {
            return Err(Error::dim("replace_embeddings", &[self.entries.len()], &[embeddings.len()]));
        }
        for (e, emb) in self.entries.iter().zip(&embeddings) {
            if emb.len() != self.d_model {
                return Err(Error::dim("replace_embeddings", &[self.d_model], &[emb.len()]));
            }
            check_unit(e.id, emb)?;
        }
        for (e, emb) in self.entries.iter_mut().zip(embeddings) {
            e.embedding = emb;
        }
        self.epoch += 1;
        if let Some(q) = self.quantizer.take() {
            self.train_quantizer(q.config)?;
        }
        Ok(())
    }

    fn check_query(&self, query: &[f64], k: usize) -> Result<()> {
        if k == 0 {
            return Err(Error::Contract("k must be at least 1".into()));
        }
        if self.entries.is_empty() {
            return Err(Error::Retrieval("search on an empty index".into()));
        }
        if query.len() != self.d_model {
            return Err(Error::dim("search query", &[self.d_model], &[query.len()]));
        }
        Ok(())
    }

    /// Top-`k` inner products over every entry.
    pub fn search_exact(&self, query: &[f64], k: usize) -> Result<Vec<SearchHit>> {
        self.check_query(query, k)?;
        Ok(self.rank_subset(query, 0..self.entries.len(), k))
    }

    fn rank_subset(&self, query: &[f64], subset: impl Iterator<Item = usize>, k: usize) -> Vec<SearchHit> {
        let mut hits: Vec<SearchHit> = subset
            .map(|i| {
                let e = &self.entries[i];
                SearchHit {
                    id: e.id,
                    score: score(query, &e.embedding),
                }
            })
            .collect();
        rank(&mut hits);
        hits.truncate(k);
        hits
    }

    /// Runs k-means over the embeddings and stores the inverted lists.
    pub fn train_quantizer(&mut self, config: QuantizerConfig) -> Result<&Quantizer> {
        let q = Quantizer::train(&self.entries, self.d_model, config)?;
        Ok(self.quantizer.insert(q))
    }

    /// Exact search restricted to the `n_probe` cells whose centroids score
    /// highest against the query.
    pub fn search_approx(&self, query: &[f64], k: usize, n_probe: usize) -> Result<Vec<SearchHit>> {
        self.check_query(query, k)?;
        let q = self
            .quantizer
            .as_ref()
            .ok_or_else(|| Error::Configuration("approximate search needs a trained quantizer".into()))?;
        let n_list = q.centroids.len();
        if n_probe == 0 || n_probe > n_list {
            return Err(Error::Configuration(format!(
                "n_probe {n_probe} must be within 1..={n_list}"
            )));
        }
        let cells = q.nearest_cells(query, n_probe);
        let subset = cells.into_iter().flat_map(|c| q.lists[c].iter().copied());
        Ok(self.rank_subset(query, subset, k))
    }

    pub(crate) fn set_quantizer(&mut self, q: Option<Quantizer>) {
        self.quantizer = q;
    }
}
