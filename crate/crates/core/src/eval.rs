//! MRR@k and macro-averaged Recall@k over run files.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::Qrels;

/// Ranked doc ids per query, best first.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Run {
    rankings: BTreeMap<String, Vec<(String, f64)>>,
}

impl Run {
    pub fn insert(&mut self, query_id: &str, ranked: Vec<(String, f64)>) -> Result<()> {
        let mut seen = HashSet::new();
        if let Some((d, _)) = ranked.iter().find(|(d, _)| !seen.insert(d.as_str())) {
            return Err(Error::Invalid(format!("doc `{d}` ranked twice for query `{query_id}`")));
        }
        self.rankings.insert(query_id.to_string(), ranked);
        Ok(())
    }

    pub fn from_doc_lists(lists: impl IntoIterator<Item = (String, Vec<String>)>) -> Result<Self> {
        let mut run = Run::default();
        for (q, docs) in lists {
            let n = docs.len();
            let ranked = docs
                .into_iter()
                .enumerate()
                .map(|(i, d)| (d, (n - i) as f64))
                .collect();
            run.insert(&q, ranked)?;
        }
        Ok(run)
    }

    pub fn len(&self) -> usize {
        self.rankings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rankings.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[(String, f64)])> {
        self.rankings.iter().map(|(q, r)| (q.as_str(), r.as_slice()))
    }

    /// `<query_id>\t<doc_id>\t<rank>\t<score>`, rank starting at 1.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (q, ranked) in &self.rankings {
            for (i, (d, s)) in ranked.iter().enumerate() {
                out.push_str(&format!("{q}\t{d}\t{}\t{s}\n", i + 1));
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut rows: BTreeMap<String, Vec<(usize, String, f64)>> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(bad(format!("expected 4 tab-separated columns, found {}", cols.len())));
            }
            let rank: usize = cols[2].parse().map_err(|_| bad(format!("bad rank `{}`", cols[2])))?;
            let score: f64 = cols[3].parse().map_err(|_| bad(format!("bad score `{}`", cols[3])))?;
            rows.entry(cols[0].to_string())
                .or_default()
                .push((rank, cols[1].to_string(), score));
        }
        let mut run = Run::default();
        for (q, mut r) in rows {
            r.sort_by_key(|(rank, _, _)| *rank);
            run.insert(&q, r.into_iter().map(|(_, d, s)| (d, s)).collect())?;
        }
        Ok(run)
    }
}

fn check_run(run: &Run, qrels: &Qrels, k: usize) -> Result<()> {
    if run.is_empty() {
        return Err(Error::Invalid("empty run".into()));
    }
    if k == 0 {
        return Err(Error::Invalid("cutoff k must be at least 1".into()));
    }
    if let Some((q, _)) = run.iter().find(|(q, _)| !qrels.contains_query(q)) {
        return Err(Error::Invalid(format!("query `{q}` has no relevance judgments")));
    }
    Ok(())
}

fn reciprocal_rank(ranked: &[(String, f64)], relevant: &[String], k: usize) -> f64 {
    ranked
        .iter()
        .take(k)
        .position(|(d, _)| relevant.contains(d))
        .map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

fn recall(ranked: &[(String, f64)], relevant: &[String], k: usize) -> f64 {
    let hits = ranked.iter().take(k).filter(|(d, _)| relevant.contains(d)).count();
    hits as f64 / relevant.len() as f64
}

pub fn mrr_at_k(run: &Run, qrels: &Qrels, k: usize) -> Result<f64> {
    check_run(run, qrels, k)?;
    let sum: f64 = run
        .iter()
        .map(|(q, r)| reciprocal_rank(r, qrels.relevant(q), k))
        .sum();
    Ok(sum / run.len() as f64)
}

pub fn recall_at_k(run: &Run, qrels: &Qrels, k: usize) -> Result<f64> {
    check_run(run, qrels, k)?;
    let mut sum = 0.0;
    for (q, r) in run.iter() {
        let relevant = qrels.relevant(q);
        if relevant.is_empty() {
            return Err(Error::Invalid(format!("query `{q}` has an empty relevant set")));
        }
        sum += recall(r, relevant, k);
    }
    Ok(sum / run.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    Mrr(usize),
    Recall(usize),
}

impl Metric {
    pub fn k(self) -> usize {
        match self {
            Metric::Mrr(k) | Metric::Recall(k) => k,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Mrr(k) => write!(f, "MRR@{k}"),
            Metric::Recall(k) => write!(f, "R@{k}"),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Invalid(format!("unknown metric `{s}` (expected e.g. MRR@10 or R@100)"));
        let (name, k) = s.split_once('@').ok_or_else(bad)?;
        let k: usize = k.parse().map_err(|_| bad())?;
        match name.to_ascii_lowercase().as_str() {
            "mrr" => Ok(Metric::Mrr(k)),
            "r" | "recall" => Ok(Metric::Recall(k)),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryDiagnostics {
    pub query_id: String,
    /// 1-based rank of the first relevant doc anywhere in the list.
    pub first_relevant_rank: Option<usize>,
    pub relevant_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub values: BTreeMap<Metric, f64>,
    pub query_count: usize,
    pub per_query: Vec<QueryDiagnostics>,
}

impl EvalReport {
    pub fn get(&self, m: Metric) -> Option<f64> {
        self.values.get(&m).copied()
    }

    /// Human-readable metric table.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<10} {:>10}\n", "metric", "value");
        for (m, v) in &self.values {
            out.push_str(&format!("{:<10} {:>10.4}\n", m.to_string(), v));
        }
        out.push_str(&format!("{:<10} {:>10}\n", "queries", self.query_count));
        out
    }

    /// One JSON object per metric.
    pub fn to_records(&self) -> String {
        let mut out = String::new();
        for (m, v) in &self.values {
            let rec = serde_json::json!({ "metric": m.to_string(), "k": m.k(), "value": v, "queries": self.query_count });
            out.push_str(&rec.to_string());
            out.push('\n');
        }
        out
    }
}

pub fn evaluate(run: &Run, qrels: &Qrels, metrics: &[Metric]) -> Result<EvalReport> {
    if metrics.is_empty() {
        return Err(Error::Invalid("no metrics requested".into()));
    }
    let mut values = BTreeMap::new();
    for &m in metrics {
        let v = match m {
            Metric::Mrr(k) => mrr_at_k(run, qrels, k)?,
            Metric::Recall(k) => recall_at_k(run, qrels, k)?,
        };
        values.insert(m, v);
    }
    let per_query = run
        .iter()
        .map(|(q, r)| {
            let relevant = qrels.relevant(q);
            QueryDiagnostics {
                query_id: q.to_string(),
                first_relevant_rank: r.iter().position(|(d, _)| relevant.contains(d)).map(|i| i + 1),
                relevant_count: relevant.len(),
            }
        })
        .collect();
    Ok(EvalReport {
        values,
        query_count: run.len(),
        per_query,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_with_first_relevant(ranks: &[usize]) -> (Run, Qrels) {
        let mut qrels = Qrels::default();
        let mut lists = Vec::new();
        for (i, &rank) in ranks.iter().enumerate() {
            let q = format!("Q{i}");
            let docs: Vec<String> = (1..=20).map(|r| if r == rank { format!("R{i}") } else { format!("N{i}_{r}") }).collect();
            qrels.insert(&q, &format!("R{i}"));
            lists.push((q, docs));
        }
        (Run::from_doc_lists(lists).unwrap(), qrels)
    }

    #[test]
    fn mrr_examples() {
        let (run, qrels) = run_with_first_relevant(&[1]);
        assert_eq!(mrr_at_k(&run, &qrels, 10).unwrap(), 1.0);
        let (run, qrels) = run_with_first_relevant(&[1, 2, 4]);
        assert!((mrr_at_k(&run, &qrels, 10).unwrap() - 0.583_333_333).abs() < 1e-6);
        let (run, qrels) = run_with_first_relevant(&[11]);
        assert_eq!(mrr_at_k(&run, &qrels, 10).unwrap(), 0.0);
        assert!(mrr_at_k(&Run::default(), &qrels, 10).is_err());
    }

    #[test]
    fn recall_examples() {
        let (run, qrels) = run_with_first_relevant(&[3]);
        assert_eq!(recall_at_k(&run, &qrels, 5).unwrap(), 1.0);
        assert_eq!(recall_at_k(&run, &qrels, 2).unwrap(), 0.0);
        assert!(recall_at_k(&run, &qrels, 0).is_err());

        let mut qrels = Qrels::default();
        qrels.insert("Q", "A");
        qrels.insert("Q", "B");
        let run = Run::from_doc_lists([("Q".to_string(), vec!["A".into(), "X".into(), "B".into()])]).unwrap();
        assert_eq!(recall_at_k(&run, &qrels, 2).unwrap(), 0.5);
        let (run, qrels) = run_with_first_relevant(&[2]);
        assert_eq!(recall_at_k(&run, &qrels, 1).unwrap(), 0.0);
    }

    #[test]
    fn evaluate_reports_each_metric() {
        let (run, qrels) = run_with_first_relevant(&[1, 3]);
        let r = evaluate(&run, &qrels, &[Metric::Mrr(10), Metric::Recall(50), Metric::Recall(1000)]).unwrap();
        assert_eq!(r.values.len(), 3);
        assert_eq!(r.query_count, 2);
        assert_eq!(r.per_query[1].first_relevant_rank, Some(3));
        assert!(r.to_table().contains("MRR@10"));
        assert_eq!(r.to_records().lines().count(), 3);
    }

    #[test]
    fn metrics_parse() {
        assert_eq!("MRR@10".parse::<Metric>().unwrap(), Metric::Mrr(10));
        assert_eq!("R@1000".parse::<Metric>().unwrap(), Metric::Recall(1000));
        assert!("ndcg@10".parse::<Metric>().is_err());
    }

    #[test]
    fn run_file_round_trip() {
        let (run, _) = run_with_first_relevant(&[1, 2]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.tsv");
        run.save(&p).unwrap();
        assert_eq!(Run::load(&p).unwrap(), run);
        let dup = Run::from_doc_lists([("Q".to_string(), vec!["A".into(), "A".into()])]);
        assert!(dup.is_err());
    }
}
