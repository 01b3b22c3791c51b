//! Ranker-free inference: an immutable matrix of document embeddings searched
//! exactly by dot product.
//!
//! Index file layout (integers little-endian):
//!
//! ```text
//! b"PDIX" | u32 version | u32 dim | u64 count | u32 query_max_len | u32 doc_max_len
//!         | u8 similarity (0 dot, 1 cosine) | u64 retriever checksum
//!         | count·dim f32 row-major
//!         | count × (u32 byte length, utf-8 doc id)
//!         | sha256 of everything before it
//! ```

use std::cmp::Ordering;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{ranker_invocations, Encoder, Role};
use crate::error::{Error, Result};
use crate::text::{tokenize, DocumentStore, SeqLens, TokenSequence, Vocabulary};

const MAGIC: &[u8; 4] = b"PDIX";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    #[default]
    Dot,
    Cosine,
}

impl std::str::FromStr for Similarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot" => Ok(Similarity::Dot),
            "cosine" => Ok(Similarity::Cosine),
            _ => Err(Error::Invalid(format!("unknown similarity `{s}` (expected dot or cosine)"))),
        }
    }
}

impl std::fmt::Display for Similarity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Similarity::Dot => "dot",
            Similarity::Cosine => "cosine",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    dim: usize,
    doc_ids: Vec<String>,
    embeddings: Vec<f32>,
    lens: SeqLens,
    similarity: Similarity,
    retriever_checksum: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub hits: Vec<(String, f64)>,
    pub latency_us: f64,
    /// Ranker forward passes observed while answering; always 0.
    pub ranker_calls: u64,
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn check_retriever(retriever: &Encoder) -> Result<()> {
    if retriever.role() != Role::Retriever {
        return Err(Error::Invalid("index operations take the retriever, not the ranker".into()));
    }
    Ok(())
}

pub fn build_index(
    retriever: &Encoder,
    store: &DocumentStore,
    vocab: &Vocabulary,
    lens: SeqLens,
    similarity: Similarity,
) -> Result<EmbeddingIndex> {
    check_retriever(retriever)?;
    if store.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let seqs: Vec<TokenSequence> = store.texts.iter().map(|t| tokenize(t, vocab, lens.doc)).collect();
    build_index_from_tokens(retriever, &store.doc_ids, &seqs, lens, similarity)
}

pub fn build_index_from_tokens(
    retriever: &Encoder,
    doc_ids: &[String],
    docs: &[TokenSequence],
    lens: SeqLens,
    similarity: Similarity,
) -> Result<EmbeddingIndex> {
    check_retriever(retriever)?;
    if docs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let emb = retriever.embed(docs)?;
    let dim = emb.ncols();
    let mut embeddings = Vec::with_capacity(emb.len());
    for row in emb.outer_iter() {
        let mut r = row.to_vec();
        if similarity == Similarity::Cosine {
            normalize(&mut r);
        }
        embeddings.extend(r.iter().map(|&v| v as f32));
    }
    Ok(EmbeddingIndex {
        dim,
        doc_ids: doc_ids.to_vec(),
        embeddings,
        lens,
        similarity,
        retriever_checksum: retriever.checksum(),
    })
}

impl EmbeddingIndex {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn lens(&self) -> SeqLens {
        self.lens
    }

    pub fn retriever_checksum(&self) -> u64 {
        self.retriever_checksum
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    /// Scores of every document against a query embedding.
    pub fn scores(&self, query: &[f64]) -> Vec<f64> {
        let q: Vec<f64> = query.iter().map(|&v| v as f32 as f64).collect();
        (0..self.len())
            .map(|i| self.row(i).iter().zip(&q).map(|(&e, &x)| e as f64 * x).sum())
            .collect()
    }

    /// Exact top-k by score, ties by ascending doc id.
    pub fn top_k(&self, query: &[f64], k: usize) -> Result<Vec<(String, f64)>> {
        if k == 0 {
            return Err(Error::Invalid("k must be at least 1".into()));
        }
        if self.is_empty() {
            return Err(Error::Invalid("empty index".into()));
        }
        if query.len() != self.dim {
            return Err(Error::Shape(format!("query dim {} vs index dim {}", query.len(), self.dim)));
        }
        let scores = self.scores(query);
        let cmp = |a: &usize, b: &usize| {
            scores[*b]
                .partial_cmp(&scores[*a])
                .unwrap_or(Ordering::Equal)
                .then_with(|| self.doc_ids[*a].cmp(&self.doc_ids[*b]))
        };
        let mut order: Vec<usize> = (0..self.len()).collect();
        let k = k.min(order.len());
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, cmp);
            order.truncate(k);
        }
        order.sort_unstable_by(cmp);
        Ok(order.into_iter().map(|i| (self.doc_ids[i].clone(), scores[i])).collect())
    }

    /// Query embedding under this index's similarity.
    pub fn embed_query(&self, text: &str, retriever: &Encoder, vocab: &Vocabulary) -> Result<Vec<f64>> {
        check_retriever(retriever)?;
        if retriever.config().hidden_dim != self.dim {
            return Err(Error::Shape(format!(
                "retriever width {} does not match index dim {}",
                retriever.config().hidden_dim,
                self.dim
            )));
        }
        if retriever.checksum() != self.retriever_checksum {
            return Err(Error::Invalid("index was built with a different retriever checkpoint".into()));
        }
        let seq = tokenize(text, vocab, self.lens.query);
        let mut q = retriever.embed(std::slice::from_ref(&seq))?.row(0).to_vec();
        if self.similarity == Similarity::Cosine {
            normalize(&mut q);
        }
        Ok(q)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(48 + 4 * self.embeddings.len() + 16 * self.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.lens.query as u32).to_le_bytes());
        out.extend_from_slice(&(self.lens.doc as u32).to_le_bytes());
        out.push(match self.similarity {
            Similarity::Dot => 0,
            Similarity::Cosine => 1,
        });
        out.extend_from_slice(&self.retriever_checksum.to_le_bytes());
        for v in &self.embeddings {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for id in &self.doc_ids {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |m: &str| Error::corrupt(path, m);
        if bytes.len() < 37 + 32 {
            return Err(corrupt("file too short"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4).ok_or_else(|| corrupt("truncated"))? != MAGIC {
            return Err(corrupt("not an index file"));
        }
        let version = r.u32().ok_or_else(|| corrupt("truncated"))?;
        if version != VERSION {
            return Err(corrupt(&format!("unsupported index version {version}")));
        }
        let trunc = || corrupt("truncated header");
        let dim = r.u32().ok_or_else(trunc)? as usize;
        let count = r.u64().ok_or_else(trunc)? as usize;
        let query = r.u32().ok_or_else(trunc)? as usize;
        let doc = r.u32().ok_or_else(trunc)? as usize;
        let similarity = match r.take(1).ok_or_else(trunc)?[0] {
            0 => Similarity::Dot,
            1 => Similarity::Cosine,
            s => return Err(corrupt(&format!("unknown similarity tag {s}"))),
        };
        let retriever_checksum = r.u64().ok_or_else(trunc)?;
        let payload = r
            .take(4 * dim * count)
            .ok_or_else(|| corrupt("truncated embeddings"))?;
        let embeddings = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let mut doc_ids = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u32().ok_or_else(|| corrupt("truncated id table"))? as usize;
            let raw = r.take(n).ok_or_else(|| corrupt("truncated id table"))?;
            doc_ids.push(String::from_utf8(raw.to_vec()).map_err(|_| corrupt("doc id is not utf-8"))?);
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self {
            dim,
            doc_ids,
            embeddings,
            lens: SeqLens { query, doc },
            similarity,
            retriever_checksum,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Encodes the query with the retriever and returns the exact top-k.
pub fn search(
    index: &EmbeddingIndex,
    query: &str,
    retriever: &Encoder,
    vocab: &Vocabulary,
    k: usize,
) -> Result<SearchResult> {
    if index.is_empty() {
        return Err(Error::Invalid("empty index".into()));
    }
    let calls_before = ranker_invocations();
    let start = Instant::now();
    let q = index.embed_query(query, retriever, vocab)?;
    let hits = index.top_k(&q, k)?;
    let latency_us = start.elapsed().as_secs_f64() * 1e6;
    Ok(SearchResult {
        hits,
        latency_us,
        ranker_calls: ranker_invocations() - calls_before,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    /// Mean latency of each query over the timed repetitions, microseconds.
    pub per_query_us: Vec<f64>,
    pub mean_us: f64,
    pub p50_us: f64,
    pub p95_us: f64,
    pub ranker_calls: u64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Per-query wall clock of query encoding plus scoring; one untimed warm-up pass first.
pub fn measure_latency(
    index: &EmbeddingIndex,
    queries: &[String],
    retriever: &Encoder,
    vocab: &Vocabulary,
    k: usize,
    repetitions: usize,
) -> Result<LatencyStats> {
    if repetitions == 0 {
        return Err(Error::Invalid("repetitions must be at least 1".into()));
    }
    if queries.is_empty() {
        return Err(Error::Invalid("no queries to time".into()));
    }
    let calls_before = ranker_invocations();
    for q in queries {
        search(index, q, retriever, vocab, k)?;
    }
    let mut per_query_us = Vec::with_capacity(queries.len());
    for q in queries {
        let mut total = 0.0;
        for _ in 0..repetitions {
            let start = Instant::now();
            let r = search(index, q, retriever, vocab, k)?;
            std::hint::black_box(&r);
            total += start.elapsed().as_secs_f64() * 1e6;
        }
        // sub-microsecond timer granularity would otherwise report 0
        per_query_us.push((total / repetitions as f64).max(f64::MIN_POSITIVE));
    }
    let mut sorted = per_query_us.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    Ok(LatencyStats {
        mean_us: per_query_us.iter().sum::<f64>() / per_query_us.len() as f64,
        p50_us: percentile(&sorted, 0.5),
        p95_us: percentile(&sorted, 0.95),
        per_query_us,
        ranker_calls: ranker_invocations() - calls_before,
    })
}
