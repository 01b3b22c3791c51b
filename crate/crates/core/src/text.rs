//! Tokenization, TSV ingestion, training-group construction and the synthetic
//! corpus generator.
//!
//! Tokenization is lowercase whitespace splitting with an `[UNK]` fallback.
//! Ids 0..4 are reserved for the special tokens.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;

const SPECIALS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    token_to_id: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens(body: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(body);
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if token_to_id.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self {
            tokens,
            token_to_id,
        })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn token_to_id(&self) -> &HashMap<String, u32> {
        &self.token_to_id
    }

    /// Writes one token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < SPECIALS.len() || lines[..SPECIALS.len()] != SPECIALS {
            return Err(Error::corrupt(path, "vocabulary does not start with the special tokens"));
        }
        Self::from_tokens(lines[SPECIALS.len()..].iter().map(|s| s.to_string()))
    }
}

/// Every token with frequency at least `min_freq`, in order of first occurrence
/// (documents first, then queries), after the four specials.
pub fn build_vocab(store: &DocumentStore, queries: &[&str], min_freq: usize) -> Result<Vocabulary> {
    if store.is_empty() && queries.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut order = Vec::new();
    for text in store.texts.iter().map(String::as_str).chain(queries.iter().copied()) {
        for tok in split_words(text) {
            let c = counts.entry(tok.clone()).or_insert_with(|| {
                order.push(tok);
                0
            });
            *c += 1;
        }
    }
    let min_freq = min_freq.max(1);
    Vocabulary::from_tokens(
        order
            .into_iter()
            .filter(|t| counts[t] >= min_freq && !SPECIALS.contains(&t.as_str())),
    )
}

fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Token ids padded to `max_len`; `length` counts the real tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub length: usize,
}

impl TokenSequence {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    pub fn real(&self) -> &[u32] {
        &self.ids[..self.length]
    }
}

pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    let mut ids: Vec<u32> = split_words(text).take(max_len).map(|t| vocab.id(&t)).collect();
    let length = ids.len();
    ids.resize(max_len, PAD);
    TokenSequence { ids, length }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DocumentStore {
    pub doc_ids: Vec<String>,
    pub texts: Vec<String>,
}

impl DocumentStore {
    pub fn new(doc_ids: Vec<String>, texts: Vec<String>) -> Result<Self> {
        if doc_ids.len() != texts.len() {
            return Err(Error::Invalid("doc id and text counts differ".into()));
        }
        let mut seen = HashSet::new();
        for id in &doc_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Invalid(format!("duplicate doc id `{id}`")));
            }
        }
        Ok(Self { doc_ids, texts })
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn position(&self, doc_id: &str) -> Option<usize> {
        self.doc_ids.iter().position(|d| d == doc_id)
    }

    pub fn to_tsv(&self) -> String {
        to_tsv(self.doc_ids.iter().zip(&self.texts))
    }
}

/// Queries in file order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QuerySet {
    entries: Vec<(String, String)>,
    index: HashMap<String, usize>,
}

impl QuerySet {
    pub fn new(entries: Vec<(String, String)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, (id, _)) in entries.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate query id `{id}`")));
            }
        }
        Ok(Self { entries, index })
    }

    pub fn get(&self, id: &str) -> Option<&str> {
        self.index.get(id).map(|&i| self.entries[i].1.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(a, b)| (a.as_str(), b.as_str()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The subset with the given ids, in the order given.
    pub fn subset(&self, ids: &[String]) -> Result<Self> {
        let entries = ids
            .iter()
            .map(|id| {
                self.get(id)
                    .map(|t| (id.clone(), t.to_string()))
                    .ok_or_else(|| Error::Invalid(format!("unknown query id `{id}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries)
    }

    pub fn to_tsv(&self) -> String {
        to_tsv(self.entries.iter().map(|(a, b)| (a, b)))
    }
}

/// Relevance judgments; each query's relevant docs keep file order, duplicates dropped.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    map: BTreeMap<String, Vec<String>>,
}

impl Qrels {
    pub fn insert(&mut self, query_id: &str, doc_id: &str) {
        let docs = self.map.entry(query_id.to_string()).or_default();
        if !docs.iter().any(|d| d == doc_id) {
            docs.push(doc_id.to_string());
        }
    }

    pub fn relevant(&self, query_id: &str) -> &[String] {
        self.map.get(query_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn is_relevant(&self, query_id: &str, doc_id: &str) -> bool {
        self.relevant(query_id).iter().any(|d| d == doc_id)
    }

    pub fn contains_query(&self, query_id: &str) -> bool {
        self.map.contains_key(query_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[String])> {
        self.map.iter().map(|(q, d)| (q.as_str(), d.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (q, docs) in &self.map {
            for d in docs {
                out.push_str(q);
                out.push('\t');
                out.push_str(d);
                out.push('\n');
            }
        }
        out
    }
}

fn to_tsv<'a>(rows: impl Iterator<Item = (&'a String, &'a String)>) -> String {
    let mut out = String::new();
    for (a, b) in rows {
        out.push_str(a);
        out.push('\t');
        out.push_str(b);
        out.push('\n');
    }
    out
}

fn read_pairs(path: &Path) -> Result<Vec<(usize, String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 2 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected 2 tab-separated columns, found {}", cols.len()),
            });
        }
        rows.push((i + 1, cols[0].to_string(), cols[1].to_string()));
    }
    Ok(rows)
}

pub fn load_corpus(path: &Path) -> Result<DocumentStore> {
    let mut seen = HashSet::new();
    let mut store = DocumentStore::default();
    for (_, id, text) in read_pairs(path)? {
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateId {
                path: path.to_path_buf(),
                id,
            });
        }
        store.doc_ids.push(id);
        store.texts.push(text);
    }
    Ok(store)
}

pub fn load_queries(path: &Path) -> Result<QuerySet> {
    let rows = read_pairs(path)?;
    let mut seen = HashSet::new();
    for (_, id, _) in &rows {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateId {
                path: path.to_path_buf(),
                id: id.clone(),
            });
        }
    }
    QuerySet::new(rows.into_iter().map(|(_, id, text)| (id, text)).collect())
}

pub fn load_qrels(path: &Path) -> Result<Qrels> {
    let mut qrels = Qrels::default();
    for (_, q, d) in read_pairs(path)? {
        qrels.insert(&q, &d);
    }
    Ok(qrels)
}

/// One query with n candidates, exactly one of which is relevant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryGroup {
    pub query_id: String,
    pub query: TokenSequence,
    pub docs: Vec<TokenSequence>,
    pub doc_ids: Vec<String>,
    pub pos_idx: usize,
}

impl QueryGroup {
    pub fn n(&self) -> usize {
        self.docs.len()
    }
}

/// Sequence lengths used when tokenizing groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqLens {
    pub query: usize,
    pub doc: usize,
}

/// Builds one group per query: the first relevant doc (qrels order) at index 0,
/// followed by `n - 1` negatives drawn uniformly without replacement.
pub fn build_train_groups(
    queries: &QuerySet,
    qrels: &Qrels,
    store: &DocumentStore,
    vocab: &Vocabulary,
    lens: SeqLens,
    n: usize,
    seed: u64,
) -> Result<Vec<QueryGroup>> {
    if n < 2 {
        return Err(Error::Invalid("group size must be at least 2".into()));
    }
    if n > store.len() {
        return Err(Error::Invalid(format!(
            "group size {n} exceeds corpus size {}",
            store.len()
        )));
    }
    let position: HashMap<&str, usize> = store
        .doc_ids
        .iter()
        .enumerate()
        .map(|(i, d)| (d.as_str(), i))
        .collect();
    let doc_tokens: Vec<TokenSequence> = store
        .texts
        .iter()
        .map(|t| tokenize(t, vocab, lens.doc))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups = Vec::with_capacity(queries.len());
    for (qid, text) in queries.iter() {
        let relevant = qrels.relevant(qid);
        let pos = relevant
            .iter()
            .find_map(|d| position.get(d.as_str()).copied())
            .ok_or_else(|| Error::Invalid(format!("query `{qid}` has no relevant doc in the corpus")))?;
        let relevant_pos: HashSet<usize> = relevant
            .iter()
            .filter_map(|d| position.get(d.as_str()).copied())
            .collect();
        let pool: Vec<usize> = (0..store.len()).filter(|i| !relevant_pos.contains(i)).collect();
        if pool.len() < n - 1 {
            return Err(Error::Invalid(format!(
                "query `{qid}` has {} non-relevant docs, need {}",
                pool.len(),
                n - 1
            )));
        }
        let mut chosen = vec![pos];
        chosen.extend(index::sample(&mut rng, pool.len(), n - 1).into_iter().map(|i| pool[i]));
        groups.push(QueryGroup {
            query_id: qid.to_string(),
            query: tokenize(text, vocab, lens.query),
            docs: chosen.iter().map(|&i| doc_tokens[i].clone()).collect(),
            doc_ids: chosen.iter().map(|&i| store.doc_ids[i].clone()).collect(),
            pos_idx: 0,
        });
    }
    Ok(groups)
}

/// Parameters of the synthetic corpus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub num_docs: usize,
    pub num_queries: usize,
    pub vocab_size: usize,
    pub doc_len: usize,
    pub query_len: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticData {
    pub store: DocumentStore,
    pub queries: QuerySet,
    pub qrels: Qrels,
}

/// Whether C(vocab_size, query_len) reaches `needed`.
fn enough_topics(vocab_size: usize, query_len: usize, needed: usize) -> bool {
    if query_len > vocab_size {
        return false;
    }
    // C(v, i) increases for i <= v / 2, so partial products may stop early
    let k = query_len.min(vocab_size - query_len) as u128;
    let mut c = 1u128;
    for i in 0..k {
        c = c * (vocab_size as u128 - i) / (i + 1);
        if c >= needed as u128 {
            return true;
        }
    }
    c >= needed as u128
}

/// Each query is a distinct "topic" token set. Its single relevant document
/// carries at least half of those tokens mixed with filler; every other
/// document is drawn uniformly from the whole vocabulary.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    let SyntheticSpec {
        num_docs,
        num_queries,
        vocab_size,
        doc_len,
        query_len,
        seed,
    } = *spec;
    if num_queries == 0 || num_docs == 0 {
        return Err(Error::Invalid("need at least one document and one query".into()));
    }
    if num_queries > num_docs {
        return Err(Error::Invalid("num_queries must not exceed num_docs".into()));
    }
    if query_len == 0 || doc_len < query_len {
        return Err(Error::Invalid("need 1 <= query_len <= doc_len".into()));
    }
    if !enough_topics(vocab_size, query_len, num_queries) {
        return Err(Error::Invalid(format!(
            "vocab_size {vocab_size} too small for {num_queries} distinct topics of {query_len} tokens"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words: Vec<String> = (0..vocab_size).map(|i| format!("w{i}")).collect();

    // each topic is a distinct token set; tokens may recur across topics
    let mut seen = HashSet::new();
    let mut topics: Vec<Vec<usize>> = Vec::with_capacity(num_queries);
    while topics.len() < num_queries {
        let t = index::sample(&mut rng, vocab_size, query_len).into_vec();
        let mut key = t.clone();
        key.sort_unstable();
        if seen.insert(key) {
            topics.push(t);
        }
    }

    // relevant doc of query i sits at a random corpus slot
    let slots = index::sample(&mut rng, num_docs, num_queries).into_vec();
    let mut owner = vec![None; num_docs];
    for (q, &slot) in slots.iter().enumerate() {
        owner[slot] = Some(q);
    }

    let topic = |q: usize| topics[q].as_slice();
    let mut queries = Vec::with_capacity(num_queries);
    for q in 0..num_queries {
        let mut toks = topic(q).to_vec();
        toks.shuffle(&mut rng);
        queries.push((format!("Q{q:05}"), join(&words, &toks)));
    }

    let mut store = DocumentStore::default();
    let mut qrels = Qrels::default();
    let min_shared = query_len.div_ceil(2);
    for (slot, owner) in owner.iter().enumerate() {
        let doc_id = format!("D{slot:05}");
        let mut toks: Vec<usize> = match owner {
            Some(q) => {
                let shared = rng.random_range(min_shared..=query_len);
                let t = topic(*q);
                index::sample(&mut rng, query_len, shared)
                    .into_iter()
                    .map(|i| t[i])
                    .collect()
            }
            None => Vec::new(),
        };
        while toks.len() < doc_len {
            toks.push(rng.random_range(0..vocab_size));
        }
        toks.shuffle(&mut rng);
        if let Some(q) = owner {
            qrels.insert(&format!("Q{q:05}"), &doc_id);
        }
        store.doc_ids.push(doc_id);
        store.texts.push(join(&words, &toks));
    }
    Ok(SyntheticData {
        store,
        queries: QuerySet::new(queries)?,
        qrels,
    })
}

fn join(words: &[String], toks: &[usize]) -> String {
    toks.iter()
        .map(|&t| words[t].as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(texts: &[&str]) -> DocumentStore {
        DocumentStore::new(
            (0..texts.len()).map(|i| format!("D{}", i + 1)).collect(),
            texts.iter().map(|s| s.to_string()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn vocab_counts_and_threshold() {
        let s = store(&["a b", "b c"]);
        let v = build_vocab(&s, &[], 1).unwrap();
        assert_eq!(v.size(), 7);
        let v2 = build_vocab(&s, &[], 2).unwrap();
        assert_eq!(v2.size(), 5);
        assert_ne!(v2.id("b"), UNK);
        assert_eq!(v2.id("a"), UNK);
        assert_eq!(build_vocab(&s, &[], 1).unwrap(), v);
    }

    #[test]
    fn empty_corpus_rejected() {
        let err = build_vocab(&DocumentStore::default(), &[], 1).unwrap_err();
        assert_eq!(err.to_string(), "empty corpus");
    }

    #[test]
    fn specials_are_distinct_and_in_range() {
        let v = build_vocab(&store(&["x"]), &[], 1).unwrap();
        let ids = [PAD, UNK, CLS, SEP];
        for (i, a) in ids.iter().enumerate() {
            assert!((*a as usize) < v.size());
            for b in &ids[i + 1..] {
                assert_ne!(a, b);
            }
        }
        for id in 0..v.size() as u32 {
            if id != UNK {
                assert_eq!(v.id(v.token(id).unwrap()), id);
            }
        }
    }

    #[test]
    fn tokenize_pads_truncates_and_substitutes() {
        let v = build_vocab(&store(&["hello world x z a b c d"]), &[], 1).unwrap();
        let t = tokenize("Hello World", &v, 4);
        assert_eq!(t.ids, vec![v.id("hello"), v.id("world"), PAD, PAD]);
        assert_eq!(t.length, 2);
        let t = tokenize("x y z", &v, 3);
        assert_eq!(t.ids, vec![v.id("x"), UNK, v.id("z")]);
        assert_eq!(t.length, 3);
        let t = tokenize("a b c d", &v, 2);
        assert_eq!(t.ids, vec![v.id("a"), v.id("b")]);
        assert_eq!(t.length, 2);
        let t = tokenize("", &v, 3);
        assert_eq!(t.length, 0);
        assert!(t.ids.iter().all(|&i| i == PAD));
    }

    #[test]
    fn loaders_parse_and_reject() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("corpus.tsv");
        fs::write(&p, "D1\thello world\n").unwrap();
        assert_eq!(load_corpus(&p).unwrap().doc_ids, vec!["D1"]);

        let p = dir.path().join("qrels.tsv");
        fs::write(&p, "Q1\tD1\nQ1\tD2\n").unwrap();
        let q = load_qrels(&p).unwrap();
        assert_eq!(q.relevant("Q1"), ["D1", "D2"]);

        let p = dir.path().join("bad.tsv");
        fs::write(&p, "D1\tok\nonlyone\n").unwrap();
        let err = load_corpus(&p).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(err.to_string().contains(":2:"));

        let p = dir.path().join("dup.tsv");
        fs::write(&p, "D1\ta\nD1\tb\n").unwrap();
        assert!(matches!(load_corpus(&p), Err(Error::DuplicateId { .. })));
        assert!(matches!(load_queries(&p), Err(Error::DuplicateId { .. })));
    }

    fn tiny_setup(n_docs: usize) -> (QuerySet, Qrels, DocumentStore, Vocabulary) {
        let texts: Vec<String> = (0..n_docs).map(|i| format!("t{i} common")).collect();
        let s = DocumentStore::new(
            (0..n_docs).map(|i| format!("D{}", i + 1)).collect(),
            texts,
        )
        .unwrap();
        let q = QuerySet::new(vec![("Q1".into(), "t0".into())]).unwrap();
        let mut r = Qrels::default();
        r.insert("Q1", "D1");
        let v = build_vocab(&s, &["t0"], 1).unwrap();
        (q, r, s, v)
    }

    #[test]
    fn groups_are_seeded_and_well_formed() {
        let (q, r, s, v) = tiny_setup(4);
        let lens = SeqLens { query: 2, doc: 3 };
        let a = build_train_groups(&q, &r, &s, &v, lens, 3, 11).unwrap();
        let b = build_train_groups(&q, &r, &s, &v, lens, 3, 11).unwrap();
        assert_eq!(a, b);
        let g = &a[0];
        assert_eq!(g.n(), 3);
        assert_eq!(g.doc_ids[g.pos_idx], "D1");
        let negs: HashSet<_> = g.doc_ids[1..].iter().collect();
        assert_eq!(negs.len(), 2);
        assert!(!negs.contains(&"D1".to_string()));
    }

    #[test]
    fn forced_group_and_oversized_group() {
        let (q, r, s, v) = tiny_setup(2);
        let lens = SeqLens { query: 2, doc: 3 };
        let g = build_train_groups(&q, &r, &s, &v, lens, 2, 0).unwrap();
        assert_eq!(g[0].doc_ids, vec!["D1", "D2"]);
        assert!(build_train_groups(&q, &r, &s, &v, lens, 3, 0).is_err());
    }

    #[test]
    fn synthetic_is_deterministic_and_labelled() {
        let spec = SyntheticSpec {
            num_docs: 100,
            num_queries: 10,
            vocab_size: 200,
            doc_len: 12,
            query_len: 4,
            seed: 7,
        };
        let a = gen_synthetic(&spec).unwrap();
        let b = gen_synthetic(&spec).unwrap();
        assert_eq!(a.store.to_tsv(), b.store.to_tsv());
        assert_eq!(a.queries.to_tsv(), b.queries.to_tsv());
        assert_eq!(a.qrels.to_tsv(), b.qrels.to_tsv());
        for (qid, _) in a.queries.iter() {
            assert_eq!(a.qrels.relevant(qid).len(), 1);
        }
        let c = gen_synthetic(&SyntheticSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a.store, c.store);
        let small = SyntheticSpec {
            vocab_size: 5,
            ..spec
        };
        assert!(gen_synthetic(&small).is_err());
        assert!(!enough_topics(5, 4, 10));
        assert!(enough_topics(5, 4, 5));
        assert!(enough_topics(400, 4, 250));
    }
}
