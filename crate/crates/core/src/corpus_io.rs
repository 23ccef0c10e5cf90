//! Readers and writers for every on-disk artifact: corpus, queries, qrels,
//! embeddings and TREC run files.
//!
//! Formats:
//! - corpus / queries: one JSON object per line, `{"doc_id": .., "text": ..}`
//!   (queries use `query_id`).
//! - qrels: TREC four-column `qid 0 did grade`.
//! - runs: TREC six-column `qid Q0 did rank score tag`.
//! - embeddings: a `dim=<d>` header followed by `id<TAB>v1 v2 .. vd` rows.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{OreError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: String,
    pub text: String,
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = (usize, Result<String>)> + '_> {
    let file = File::open(path).map_err(|e| OreError::io(path, e))?;
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .map(move |(i, line)| (i + 1, line.map_err(|e| OreError::io(path, e)))))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| OreError::io(parent, e))?;
        }
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| OreError::io(path, e))
}

fn write_err(path: &Path) -> impl Fn(std::io::Error) -> OreError + '_ {
    move |e| OreError::io(path, e)
}

/// Load a line-delimited corpus. Blank lines are skipped.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Document>> {
    let path = path.as_ref();
    let mut docs = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in open_lines(path)? {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line)
            .map_err(|e| OreError::parse(path, lineno, e.to_string()))?;
        if doc.text.trim().is_empty() {
            return Err(OreError::validation(format!(
                "document {} has empty text (line {lineno})",
                doc.doc_id
            )));
        }
        if !seen.insert(doc.doc_id.clone()) {
            return Err(OreError::validation(format!(
                "duplicate doc_id {} (line {lineno})",
                doc.doc_id
            )));
        }
        docs.push(doc);
    }
    Ok(docs)
}

pub fn write_corpus(docs: &[Document], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = create(path)?;
    for doc in docs {
        let line = serde_json::to_string(doc).expect("document serializes");
        writeln!(out, "{line}").map_err(write_err(path))?;
    }
    out.flush().map_err(write_err(path))
}

pub fn load_queries(path: impl AsRef<Path>) -> Result<Vec<Query>> {
    let path = path.as_ref();
    let mut queries = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in open_lines(path)? {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let query: Query = serde_json::from_str(&line)
            .map_err(|e| OreError::parse(path, lineno, e.to_string()))?;
        if !seen.insert(query.query_id.clone()) {
            return Err(OreError::validation(format!(
                "duplicate query_id {} (line {lineno})",
                query.query_id
            )));
        }
        queries.push(query);
    }
    Ok(queries)
}

pub fn write_queries(queries: &[Query], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = create(path)?;
    for q in queries {
        let line = serde_json::to_string(q).expect("query serializes");
        writeln!(out, "{line}").map_err(write_err(path))?;
    }
    out.flush().map_err(write_err(path))
}

pub const MAX_GRADE: u8 = 3;

/// Graded relevance judgments. Absent pairs have grade 0.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    grades: BTreeMap<String, BTreeMap<String, u8>>,
    /// Number of duplicate `(qid, did)` lines that overwrote an earlier grade.
    pub overwrites: usize,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a judgment; returns true when an earlier grade was replaced.
    pub fn insert(&mut self, query_id: &str, doc_id: &str, grade: u8) -> Result<bool> {
        if grade > MAX_GRADE {
            return Err(OreError::validation(format!(
                "grade {grade} for ({query_id},{doc_id}) outside 0..={MAX_GRADE}"
            )));
        }
        let replaced = self
            .grades
            .entry(query_id.to_string())
            .or_default()
            .insert(doc_id.to_string(), grade)
            .is_some();
        Ok(replaced)
    }

    pub fn grade(&self, query_id: &str, doc_id: &str) -> u8 {
        self.grades
            .get(query_id)
            .and_then(|m| m.get(doc_id))
            .copied()
            .unwrap_or(0)
    }

    pub fn judged(&self, query_id: &str) -> Option<&BTreeMap<String, u8>> {
        self.grades.get(query_id)
    }

    pub fn relevant(&self, query_id: &str, min_grade: u8) -> Vec<&str> {
        self.grades
            .get(query_id)
            .map(|m| {
                m.iter()
                    .filter(|(_, &g)| g >= min_grade)
                    .map(|(d, _)| d.as_str())
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.grades.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.grades.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, u8)> {
        self.grades
            .iter()
            .flat_map(|(q, m)| m.iter().map(move |(d, &g)| (q.as_str(), d.as_str(), g)))
    }
}

/// Load TREC qrels. Later duplicates win; each one bumps `overwrites`.
pub fn load_qrels(path: impl AsRef<Path>) -> Result<Qrels> {
    let path = path.as_ref();
    let mut qrels = Qrels::new();
    for (lineno, line) in open_lines(path)? {
        let line = line?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 4 {
            return Err(OreError::parse(
                path,
                lineno,
                format!("expected 4 fields, found {}", fields.len()),
            ));
        }
        let grade: u8 = fields[3].parse().map_err(|_| {
            OreError::parse(path, lineno, format!("grade `{}` is not an integer", fields[3]))
        })?;
        if grade > MAX_GRADE {
            return Err(OreError::parse(
                path,
                lineno,
                format!("grade {grade} outside 0..={MAX_GRADE}"),
            ));
        }
        if qrels.insert(fields[0], fields[2], grade)? {
            qrels.overwrites += 1;
            log::warn!("{}:{lineno}: duplicate judgment overwrites earlier grade", path.display());
        }
    }
    Ok(qrels)
}

pub fn write_qrels(qrels: &Qrels, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = create(path)?;
    for (q, d, g) in qrels.iter() {
        writeln!(out, "{q} 0 {d} {g}").map_err(write_err(path))?;
    }
    out.flush().map_err(write_err(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub query_id: String,
    pub doc_id: String,
    pub rank: usize,
    pub score: f64,
    pub tag: String,
}

/// Check the run invariants: per query, ranks are `1..=n` in order, scores
/// never increase, and equal scores are ordered by ascending doc id.
pub fn validate_run(entries: &[RunEntry]) -> Result<()> {
    let mut last: HashMap<&str, &RunEntry> = HashMap::new();
    for e in entries {
        if !e.score.is_finite() {
            return Err(OreError::validation(format!(
                "non-finite score for ({},{})",
                e.query_id, e.doc_id
            )));
        }
        match last.get(e.query_id.as_str()) {
            None if e.rank != 1 => {
                return Err(OreError::validation(format!(
                    "query {} starts at rank {} instead of 1",
                    e.query_id, e.rank
                )));
            }
            None => {}
            Some(prev) => {
                if e.rank != prev.rank + 1 {
                    return Err(OreError::validation(format!(
                        "rank gap in query {}: {} followed by {}",
                        e.query_id, prev.rank, e.rank
                    )));
                }
                if e.score > prev.score {
                    return Err(OreError::validation(format!(
                        "score inversion in query {} at rank {}",
                        e.query_id, e.rank
                    )));
                }
                if e.score == prev.score && e.doc_id <= prev.doc_id {
                    return Err(OreError::validation(format!(
                        "tie at rank {} of query {} not ordered by doc id",
                        e.rank, e.query_id
                    )));
                }
            }
        }
        last.insert(&e.query_id, e);
    }
    Ok(())
}

/// Documents with scores, best first.
pub type RankedList = Vec<(String, f64)>;

/// Sort by score descending, ties by ascending doc id.
pub fn sort_ranked(list: &mut RankedList) {
    list.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
}

pub fn run_entries(query_id: &str, list: &[(String, f64)], tag: &str) -> Vec<RunEntry> {
    list.iter()
        .enumerate()
        .map(|(i, (d, s))| RunEntry {
            query_id: query_id.to_string(),
            doc_id: d.clone(),
            rank: i + 1,
            score: *s,
            tag: tag.to_string(),
        })
        .collect()
}

pub fn format_run_line(e: &RunEntry) -> String {
    format!("{} Q0 {} {} {} {}", e.query_id, e.doc_id, e.rank, e.score, e.tag)
}

pub fn write_run(entries: &[RunEntry], path: impl AsRef<Path>) -> Result<()> {
    validate_run(entries)?;
    let path = path.as_ref();
    let mut out = create(path)?;
    for e in entries {
        writeln!(out, "{}", format_run_line(e)).map_err(write_err(path))?;
    }
    out.flush().map_err(write_err(path))
}

pub fn load_run(path: impl AsRef<Path>) -> Result<Vec<RunEntry>> {
    let path = path.as_ref();
    let mut entries = Vec::new();
    for (lineno, line) in open_lines(path)? {
        let line = line?;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        if f.len() != 6 {
            return Err(OreError::parse(
                path,
                lineno,
                format!("expected 6 fields, found {}", f.len()),
            ));
        }
        let rank = f[3]
            .parse()
            .map_err(|_| OreError::parse(path, lineno, format!("bad rank `{}`", f[3])))?;
        let score = f[4]
            .parse()
            .map_err(|_| OreError::parse(path, lineno, format!("bad score `{}`", f[4])))?;
        entries.push(RunEntry {
            query_id: f[0].to_string(),
            doc_id: f[2].to_string(),
            rank,
            score,
            tag: f[5].to_string(),
        });
    }
    validate_run(&entries)?;
    Ok(entries)
}

/// Dense vectors keyed by opaque id, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorTable {
    dim: usize,
    ids: Vec<String>,
    rows: HashMap<String, usize>,
    data: Vec<f64>,
}

impl VectorTable {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(OreError::validation("embedding dim must be positive"));
        }
        Ok(Self {
            dim,
            ids: Vec::new(),
            rows: HashMap::new(),
            data: Vec::new(),
        })
    }

    pub fn insert(&mut self, id: &str, vector: &[f64]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(OreError::validation(format!(
                "vector for {id} has length {} but dim is {}",
                vector.len(),
                self.dim
            )));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(OreError::validation(format!("vector for {id} has non-finite values")));
        }
        if self.rows.contains_key(id) {
            return Err(OreError::validation(format!("duplicate vector id {id}")));
        }
        self.rows.insert(id.to_string(), self.ids.len());
        self.ids.push(id.to_string());
        self.data.extend_from_slice(vector);
        Ok(())
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

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row_of(&self, id: &str) -> Option<usize> {
        self.rows.get(id).copied()
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.row_of(id).map(|r| self.row(r))
    }
}

/// Document vectors plus optional query vectors sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub docs: VectorTable,
    pub queries: Option<VectorTable>,
}

impl EmbeddingTable {
    pub fn new(docs: VectorTable) -> Self {
        Self { docs, queries: None }
    }

    pub fn with_queries(mut self, queries: VectorTable) -> Result<Self> {
        if queries.dim() != self.docs.dim() {
            return Err(OreError::validation(format!(
                "query vectors have dim {} but document vectors have dim {}",
                queries.dim(),
                self.docs.dim()
            )));
        }
        self.queries = Some(queries);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.docs.dim()
    }

    pub fn doc(&self, doc_id: &str) -> Option<&[f64]> {
        self.docs.get(doc_id)
    }

    pub fn query(&self, query_id: &str) -> Option<&[f64]> {
        self.queries.as_ref().and_then(|q| q.get(query_id))
    }
}

pub fn load_vectors(path: impl AsRef<Path>) -> Result<VectorTable> {
    let path = path.as_ref();
    let mut lines = open_lines(path)?;
    let dim = loop {
        match lines.next() {
            None => return Err(OreError::parse(path, 1, "missing `dim=<d>` header")),
            Some((lineno, line)) => {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let value = line
                    .trim()
                    .strip_prefix("dim=")
                    .ok_or_else(|| OreError::parse(path, lineno, "expected `dim=<d>` header"))?;
                break value
                    .parse::<usize>()
                    .map_err(|_| OreError::parse(path, lineno, format!("bad dim `{value}`")))?;
            }
        }
    };
    let mut table = VectorTable::new(dim)?;
    let mut buf = Vec::with_capacity(dim);
    for (lineno, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, values) = line
            .split_once('\t')
            .ok_or_else(|| OreError::parse(path, lineno, "expected `id<TAB>values`"))?;
        buf.clear();
        for v in values.split_whitespace() {
            buf.push(v.parse::<f64>().map_err(|_| {
                OreError::parse(path, lineno, format!("bad value `{v}` for {id}"))
            })?);
        }
        table.insert(id, &buf)?;
    }
    Ok(table)
}

pub fn write_vectors(table: &VectorTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = create(path)?;
    writeln!(out, "dim={}", table.dim()).map_err(write_err(path))?;
    for (row, id) in table.ids().iter().enumerate() {
        let values: Vec<String> = table.row(row).iter().map(|v| v.to_string()).collect();
        writeln!(out, "{id}\t{}", values.join(" ")).map_err(write_err(path))?;
    }
    out.flush().map_err(write_err(path))
}

/// Load a document embedding file.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    load_vectors(path).map(EmbeddingTable::new)
}

/// Load a `qid<TAB>did<TAB>score` file of cached ranker scores.
pub fn load_score_file(path: impl AsRef<Path>) -> Result<HashMap<(String, String), f64>> {
    let path = path.as_ref();
    let mut scores = HashMap::new();
    for (lineno, line) in open_lines(path)? {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(OreError::parse(path, lineno, "expected `qid<TAB>did<TAB>score`"));
        }
        let score: f64 = f[2]
            .trim()
            .parse()
            .map_err(|_| OreError::parse(path, lineno, format!("bad score `{}`", f[2])))?;
        if !score.is_finite() {
            return Err(OreError::parse(path, lineno, "non-finite score"));
        }
        scores.insert((f[0].to_string(), f[1].to_string()), score);
    }
    Ok(scores)
}

pub fn write_score_file<'a>(
    scores: impl IntoIterator<Item = (&'a str, &'a str, f64)>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = create(path)?;
    for (q, d, s) in scores {
        writeln!(out, "{q}\t{d}\t{s}").map_err(write_err(path))?;
    }
    out.flush().map_err(write_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn file_with(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn corpus_loads_in_file_order() {
        let f = file_with("{\"doc_id\":\"d1\",\"text\":\"a b\"}\n{\"doc_id\":\"d2\",\"text\":\"c\"}\n");
        let docs = load_corpus(f.path()).unwrap();
        assert_eq!(
            docs,
            vec![
                Document { doc_id: "d1".into(), text: "a b".into() },
                Document { doc_id: "d2".into(), text: "c".into() },
            ]
        );
    }

    #[test]
    fn corpus_duplicate_id_is_rejected() {
        let f = file_with("{\"doc_id\":\"d1\",\"text\":\"a\"}\n{\"doc_id\":\"d1\",\"text\":\"b\"}\n");
        let err = load_corpus(f.path()).unwrap_err();
        assert!(matches!(err, OreError::Validation(ref m) if m.contains("d1")), "{err}");
    }

    #[test]
    fn corpus_empty_file_and_malformed_line() {
        let f = file_with("");
        assert!(load_corpus(f.path()).unwrap().is_empty());
        let f = file_with("{\"doc_id\":\"d1\",\"text\":\"a\"}\nnot json\n");
        assert!(matches!(load_corpus(f.path()), Err(OreError::Parse { line: 2, .. })));
    }

    #[test]
    fn qrels_parse_and_overwrite() {
        let f = file_with("q1 0 d1 2\n");
        let q = load_qrels(f.path()).unwrap();
        assert_eq!(q.grade("q1", "d1"), 2);
        assert_eq!(q.grade("q1", "zz"), 0);

        let f = file_with("q1 0 d1 1\nq1 0 d1 3\n");
        let q = load_qrels(f.path()).unwrap();
        assert_eq!(q.grade("q1", "d1"), 3);
        assert_eq!(q.overwrites, 1);

        let f = file_with("q1 0 d1 x\n");
        assert!(matches!(load_qrels(f.path()), Err(OreError::Parse { line: 1, .. })));
    }

    #[test]
    fn run_line_format() {
        let e = RunEntry {
            query_id: "q1".into(),
            doc_id: "d1".into(),
            rank: 1,
            score: 0.9,
            tag: "ore".into(),
        };
        assert_eq!(format_run_line(&e), "q1 Q0 d1 1 0.9 ore");
    }

    #[test]
    fn run_with_rank_gap_is_rejected() {
        let mk = |rank, doc: &str, score| RunEntry {
            query_id: "q1".into(),
            doc_id: doc.into(),
            rank,
            score,
            tag: "t".into(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run");
        let err = write_run(&[mk(1, "a", 2.0), mk(3, "b", 1.0)], &path).unwrap_err();
        assert!(matches!(err, OreError::Validation(_)));
        let err = write_run(&[mk(1, "a", 1.0), mk(2, "b", 2.0)], &path).unwrap_err();
        assert!(matches!(err, OreError::Validation(_)));
        let err = write_run(&[mk(1, "b", 1.0), mk(2, "a", 1.0)], &path).unwrap_err();
        assert!(matches!(err, OreError::Validation(_)));
    }

    #[test]
    fn embeddings_parse_and_validate() {
        let f = file_with("dim=2\nd1\t1.0 0.0\n");
        let t = load_embeddings(f.path()).unwrap();
        assert_eq!(t.dim(), 2);
        assert_eq!(t.doc("d1").unwrap(), &[1.0, 0.0]);

        let f = file_with("dim=2\nd1\t1.0 0.0 3.0\n");
        let err = load_embeddings(f.path()).unwrap_err();
        assert!(err.to_string().contains("d1"), "{err}");

        let f = file_with("dim=2\nd1\tNaN 0.0\n");
        assert!(load_embeddings(f.path()).is_err());
    }

    #[test]
    fn score_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.tsv");
        write_score_file([("q1", "d1", 0.7), ("q1", "d2", -1.5)], &path).unwrap();
        let s = load_score_file(&path).unwrap();
        assert_eq!(s[&("q1".to_string(), "d1".to_string())], 0.7);
        assert_eq!(s.len(), 2);
    }

    fn arb_run() -> impl Strategy<Value = Vec<RunEntry>> {
        prop::collection::vec(
            (0usize..4, prop::collection::vec(-1.0e6f64..1.0e6, 1..40)),
            1..4,
        )
        .prop_map(|queries| {
            let mut out = Vec::new();
            for (qi, (_, mut scores)) in queries.into_iter().enumerate() {
                scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
                for (i, s) in scores.into_iter().enumerate() {
                    out.push(RunEntry {
                        query_id: format!("q{qi}"),
                        doc_id: format!("d{i:04}"),
                        rank: i + 1,
                        score: s,
                        tag: "prop".into(),
                    });
                }
            }
            out
        })
    }

    proptest! {
        #[test]
        fn run_roundtrips(entries in arb_run()) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("run");
            write_run(&entries, &path).unwrap();
            prop_assert_eq!(load_run(&path).unwrap(), entries);
        }

        #[test]
        fn vectors_roundtrip(rows in prop::collection::vec(prop::collection::vec(-1.0e3f64..1.0e3, 3), 0..20)) {
            let mut table = VectorTable::new(3).unwrap();
            for (i, r) in rows.iter().enumerate() {
                table.insert(&format!("v{i}"), r).unwrap();
            }
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("emb");
            write_vectors(&table, &path).unwrap();
            prop_assert_eq!(load_vectors(&path).unwrap(), table);
        }
    }

    #[test]
    fn corpus_and_qrels_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let docs = vec![
            Document { doc_id: "a".into(), text: "x y \"quoted\"".into() },
            Document { doc_id: "b".into(), text: "z".into() },
        ];
        write_corpus(&docs, dir.path().join("c.jsonl")).unwrap();
        assert_eq!(load_corpus(dir.path().join("c.jsonl")).unwrap(), docs);

        let mut q = Qrels::new();
        q.insert("q1", "a", 3).unwrap();
        q.insert("q2", "b", 0).unwrap();
        write_qrels(&q, dir.path().join("qrels")).unwrap();
        assert_eq!(load_qrels(dir.path().join("qrels")).unwrap(), q);
    }
}
