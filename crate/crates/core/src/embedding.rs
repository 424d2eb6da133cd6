//! Text embeddings and the edit memory's retrieval index.

use std::collections::HashMap;
use std::hash::Hasher;
use std::sync::Arc;

use fnv::FnvHasher;

use crate::dataset::FactEdit;
use crate::error::{Error, Result};
use crate::text::tokens;

pub const DEFAULT_DIM: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(vector: Vec<f64>) -> Result<Self> {
        if vector.is_empty() {
            return Err(Error::InvalidInput("embedding has no components".into()));
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("embedding has a non-finite component".into()));
        }
        Ok(Embedding(vector))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Cosine similarity; `-inf` when either side has zero norm.
    pub fn cosine(&self, other: &Embedding) -> f64 {
        cosine(&self.0, &other.0)
    }
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return f64::NEG_INFINITY;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<Embedding>;
}

/// Bag of hashed tokens: lowercased, punctuation stripped, FNV-1a bucketed,
/// additive counts, L2-normalized.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashEmbedder { dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// FNV-1a of the token. The low bits of FNV-1a alone correlate for tokens
    /// that differ in one character, so the high half is folded in first.
    pub fn bucket(&self, token: &str) -> usize {
        let mut h = FnvHasher::default();
        h.write(token.as_bytes());
        let x = h.finish();
        let x = (x ^ (x >> 32)).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        ((x >> 32) % self.dim as u64) as usize
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder::new(DEFAULT_DIM)
    }
}

impl Embedder for HashEmbedder {
    fn embed(&self, text: &str) -> Result<Embedding> {
        if text.trim().is_empty() {
            return Err(Error::InvalidInput("cannot embed empty text".into()));
        }
        let mut v = vec![0.0; self.dim];
        for token in tokens(text) {
            v[self.bucket(&token)] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Embedding::new(v)
    }
}

/// External store of fact edits, indexed by the embedding of each edit prompt.
///
/// Retrieval is a flat linear scan. Concurrent readers are fine; inserts need `&mut`.
#[derive(Clone)]
pub struct EditMemory {
    embedder: Arc<dyn Embedder>,
    edits: Vec<FactEdit>,
    embeddings: Vec<Embedding>,
    by_id: HashMap<String, usize>,
}

impl std::fmt::Debug for EditMemory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EditMemory")
            .field("edits", &self.edits)
            .finish_non_exhaustive()
    }
}

impl EditMemory {
    pub fn new(embedder: Arc<dyn Embedder>) -> Self {
        EditMemory {
            embedder,
            edits: Vec::new(),
            embeddings: Vec::new(),
            by_id: HashMap::new(),
        }
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        &self.embedder
    }

    pub fn len(&self) -> usize {
        self.edits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edits.is_empty()
    }

    pub fn edits(&self) -> &[FactEdit] {
        &self.edits
    }

    pub fn get(&self, id: &str) -> Option<&FactEdit> {
        self.by_id.get(id).map(|&i| &self.edits[i])
    }

    pub fn embedding(&self, id: &str) -> Option<&Embedding> {
        self.by_id.get(id).map(|&i| &self.embeddings[i])
    }

    pub fn embed(&self, text: &str) -> Result<Embedding> {
        self.embedder.embed(text)
    }

    /// Stores `edit`, indexing the embedding of its edit prompt.
    pub fn insert(&mut self, edit: FactEdit) -> Result<()> {
        if self.by_id.contains_key(&edit.id) {
            return Err(Error::DuplicateEdit(edit.id));
        }
        let embedding = self.embedder.embed(&edit.edit_prompt)?;
        self.insert_with_embedding(edit, embedding)
    }

    /// Stores `edit` under a caller-supplied embedding.
    pub fn insert_with_embedding(&mut self, edit: FactEdit, embedding: Embedding) -> Result<()> {
        if self.by_id.contains_key(&edit.id) {
            return Err(Error::DuplicateEdit(edit.id));
        }
        if let Some(first) = self.embeddings.first() {
            if first.dim() != embedding.dim() {
                return Err(Error::InvalidInput(format!(
                    "embedding dim {} does not match index dim {}",
                    embedding.dim(),
                    first.dim()
                )));
            }
        }
        self.by_id.insert(edit.id.clone(), self.edits.len());
        self.edits.push(edit);
        self.embeddings.push(embedding);
        Ok(())
    }

    pub fn remove(&mut self, id: &str) -> Option<FactEdit> {
        let idx = self.by_id.remove(id)?;
        self.embeddings.remove(idx);
        let edit = self.edits.remove(idx);
        for (i, e) in self.edits.iter().enumerate().skip(idx) {
            self.by_id.insert(e.id.clone(), i);
        }
        Some(edit)
    }

    /// The stored edit whose edit-prompt embedding is closest (cosine) to `prompt`.
    pub fn retrieve_top1(&self, prompt: &str) -> Result<&FactEdit> {
        let query = self.embedder.embed(prompt)?;
        self.retrieve_by_embedding(&query)
    }

    pub fn retrieve_by_embedding(&self, query: &Embedding) -> Result<&FactEdit> {
        self.best_among(query, 0..self.len())
            .map(|i| &self.edits[i])
            .ok_or(Error::EmptyMemory)
    }

    /// Argmax of cosine similarity over `candidates`; ties go to the
    /// lexicographically smallest edit id.
    pub(crate) fn best_among(&self, query: &Embedding, candidates: impl IntoIterator<Item = usize>) -> Option<usize> {
        let mut best: Option<(f64, usize)> = None;
        for i in candidates {
            let sim = if query.dim() == self.embeddings[i].dim() {
                query.cosine(&self.embeddings[i])
            } else {
                f64::NEG_INFINITY
            };
            let better = match best {
                None => true,
                Some((s, j)) => sim > s || (sim == s && self.edits[i].id < self.edits[j].id),
            };
            if better {
                best = Some((sim, i));
            }
        }
        best.map(|(_, i)| i)
    }
}
