//! Patent records, technology codes and time-windowed corpora.
//!
//! A corpus file is newline-delimited JSON, one record per line:
//!
//! ```text
//! {"id":"EP1","pub_date":"2006-03-01","title":"...","abstract":"...","ipc":["A61K 31/4745"],"citations":["EP0"]}
//! ```
//!
//! Raw IPC strings are truncated to the group level on ingest.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed IPC code {0:?}")]
    MalformedCode(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate patent id {0:?}")]
    DuplicateId(String),
    #[error("corpus contains no valid records")]
    EmptyCorpus,
    #[error("invalid time window {0:?}")]
    InvalidWindow(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Longest group-level code: section, two class digits, subclass, four group digits.
const CODE_CAPACITY: usize = 8;

/// A group-level IPC code such as `A61K31`.
///
/// Stored inline so pairs of codes are `Copy` and cheap to hash and sort.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TechCode {
    bytes: [u8; CODE_CAPACITY],
    len: u8,
}

impl TechCode {
    pub fn as_str(&self) -> &str {
        // Construction only admits ASCII.
        std::str::from_utf8(&self.bytes[..self.len as usize]).expect("ascii code")
    }

    fn from_validated(s: &str) -> Self {
        let mut bytes = [0u8; CODE_CAPACITY];
        bytes[..s.len()].copy_from_slice(s.as_bytes());
        TechCode {
            bytes,
            len: s.len() as u8,
        }
    }
}

/// Checks `^[A-H][0-9]{2}[A-Z][0-9]{1,4}$`.
fn is_group_code(s: &[u8]) -> bool {
    if s.len() < 5 || s.len() > CODE_CAPACITY {
        return false;
    }
    (b'A'..=b'H').contains(&s[0])
        && s[1].is_ascii_digit()
        && s[2].is_ascii_digit()
        && s[3].is_ascii_uppercase()
        && s[4..].iter().all(u8::is_ascii_digit)
}

/// Truncates a raw IPC symbol to its group: `"A61K 31/4745"` becomes `A61K31`.
pub fn truncate_code(raw_ipc: &str) -> Result<TechCode, CorpusError> {
    let compact: String = raw_ipc
        .split('/')
        .next()
        .unwrap_or("")
        .chars()
        .filter(|c| !c.is_whitespace())
        .map(|c| c.to_ascii_uppercase())
        .collect();
    if is_group_code(compact.as_bytes()) {
        Ok(TechCode::from_validated(&compact))
    } else {
        Err(CorpusError::MalformedCode(raw_ipc.to_string()))
    }
}

impl FromStr for TechCode {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        truncate_code(s)
    }
}

impl fmt::Display for TechCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Debug for TechCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TechCode({})", self.as_str())
    }
}

impl Serialize for TechCode {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for TechCode {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        truncate_code(&raw).map_err(serde::de::Error::custom)
    }
}

/// Inclusive range of publication years.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start_year: i32,
    pub end_year: i32,
}

impl TimeWindow {
    pub fn new(start_year: i32, end_year: i32) -> Result<Self, CorpusError> {
        if start_year > end_year {
            return Err(CorpusError::InvalidWindow(format!("{start_year}:{end_year}")));
        }
        Ok(TimeWindow {
            start_year,
            end_year,
        })
    }

    pub fn year(year: i32) -> Self {
        TimeWindow {
            start_year: year,
            end_year: year,
        }
    }

    pub fn contains(&self, year: i32) -> bool {
        (self.start_year..=self.end_year).contains(&year)
    }

    pub fn years(&self) -> impl Iterator<Item = i32> {
        self.start_year..=self.end_year
    }
}

impl FromStr for TimeWindow {
    type Err = CorpusError;

    /// Parses `Y1:Y2`, or a single year `Y`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || CorpusError::InvalidWindow(s.to_string());
        let (a, b) = s.split_once(':').unwrap_or((s, s));
        let start = a.trim().parse().map_err(|_| bad())?;
        let end = b.trim().parse().map_err(|_| bad())?;
        TimeWindow::new(start, end).map_err(|_| bad())
    }
}

impl fmt::Display for TimeWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.start_year, self.end_year)
    }
}

/// One patent. `codes` is sorted and free of duplicates.
#[derive(Clone, Debug, PartialEq)]
pub struct PatentRecord {
    pub id: String,
    pub pub_date: NaiveDate,
    pub title: String,
    pub abstract_text: String,
    pub codes: Vec<TechCode>,
    pub citations: Vec<String>,
}

impl PatentRecord {
    pub fn pub_year(&self) -> i32 {
        self.pub_date.year()
    }

    pub fn has_code(&self, code: TechCode) -> bool {
        self.codes.binary_search(&code).is_ok()
    }
}

/// Wire shape of one corpus line.
#[derive(Serialize, Deserialize)]
struct RawRecord {
    id: String,
    pub_date: String,
    title: String,
    #[serde(rename = "abstract")]
    abstract_text: String,
    ipc: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    citations: Vec<String>,
}

/// Sorts and deduplicates codes, returning how many duplicates were dropped.
fn normalize_codes(codes: &mut Vec<TechCode>) -> usize {
    let before = codes.len();
    codes.sort_unstable();
    codes.dedup();
    before - codes.len()
}

fn record_from_raw(raw: RawRecord, line: usize) -> Result<(PatentRecord, usize), CorpusError> {
    let err = |message: String| CorpusError::Parse { line, message };
    if raw.id.trim().is_empty() {
        return Err(err("empty id".into()));
    }
    if raw.title.trim().is_empty() {
        return Err(err("empty title".into()));
    }
    if raw.abstract_text.trim().is_empty() {
        return Err(err("empty abstract".into()));
    }
    let pub_date = NaiveDate::parse_from_str(&raw.pub_date, "%Y-%m-%d")
        .map_err(|e| err(format!("bad pub_date {:?}: {e}", raw.pub_date)))?;
    let mut codes = raw
        .ipc
        .iter()
        .map(|c| truncate_code(c))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| err(e.to_string()))?;
    if codes.is_empty() {
        return Err(err("no IPC codes".into()));
    }
    if raw.citations.iter().any(|c| c == &raw.id) {
        return Err(err(format!("record {} cites itself", raw.id)));
    }
    let dropped = normalize_codes(&mut codes);
    Ok((
        PatentRecord {
            id: raw.id,
            pub_date,
            title: raw.title,
            abstract_text: raw.abstract_text,
            codes,
            citations: raw.citations,
        },
        dropped,
    ))
}

/// An immutable, indexed collection of patents.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    records: Vec<PatentRecord>,
    by_id: HashMap<String, usize>,
    by_year: BTreeMap<i32, Vec<usize>>,
    by_code: BTreeMap<TechCode, Vec<usize>>,
    duplicate_codes_dropped: usize,
}

impl Corpus {
    /// Builds the indices. Codes in each record are normalized (sorted, deduplicated).
    pub fn from_records(mut records: Vec<PatentRecord>) -> Result<Self, CorpusError> {
        let mut dropped = 0;
        for r in &mut records {
            dropped += normalize_codes(&mut r.codes);
        }
        let mut corpus = Corpus::index(records)?;
        corpus.duplicate_codes_dropped = dropped;
        Ok(corpus)
    }

    fn index(records: Vec<PatentRecord>) -> Result<Self, CorpusError> {
        let mut by_id = HashMap::with_capacity(records.len());
        let mut by_year: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
        let mut by_code: BTreeMap<TechCode, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            if by_id.insert(r.id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateId(r.id.clone()));
            }
            by_year.entry(r.pub_year()).or_default().push(i);
            for &c in &r.codes {
                by_code.entry(c).or_default().push(i);
            }
        }
        Ok(Corpus {
            records,
            by_id,
            by_year,
            by_code,
            duplicate_codes_dropped: 0,
        })
    }

    pub fn records(&self) -> &[PatentRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&PatentRecord> {
        self.by_id.get(id).map(|&i| &self.records[i])
    }

    /// Number of within-record duplicate codes removed while building the corpus.
    pub fn duplicate_codes_dropped(&self) -> usize {
        self.duplicate_codes_dropped
    }

    /// Records published in `year`, in corpus order.
    pub fn records_in_year(&self, year: i32) -> impl Iterator<Item = &PatentRecord> {
        self.by_year
            .get(&year)
            .into_iter()
            .flatten()
            .map(|&i| &self.records[i])
    }

    /// Records carrying `code`, in corpus order.
    pub fn records_with_code(&self, code: TechCode) -> impl Iterator<Item = &PatentRecord> {
        self.by_code
            .get(&code)
            .into_iter()
            .flatten()
            .map(|&i| &self.records[i])
    }

    /// All distinct codes, sorted.
    pub fn codes(&self) -> impl Iterator<Item = TechCode> + '_ {
        self.by_code.keys().copied()
    }

    pub fn year_range(&self) -> Option<TimeWindow> {
        let first = *self.by_year.keys().next()?;
        let last = *self.by_year.keys().next_back()?;
        Some(TimeWindow {
            start_year: first,
            end_year: last,
        })
    }

    /// Number of patents carrying `code`.
    pub fn code_support(&self, code: TechCode) -> usize {
        self.by_code.get(&code).map_or(0, Vec::len)
    }

    /// Total number of patent–code links.
    pub fn link_count(&self) -> usize {
        self.records.iter().map(|r| r.codes.len()).sum()
    }

    /// The sub-corpus of patents whose publication year lies in `window`.
    pub fn window_slice(&self, window: TimeWindow) -> Corpus {
        let records = self
            .by_year
            .range(window.start_year..=window.end_year)
            .flat_map(|(_, idx)| idx.iter().copied())
            .collect::<Vec<_>>();
        let mut idx = records;
        idx.sort_unstable();
        let records = idx.into_iter().map(|i| self.records[i].clone()).collect();
        Corpus::index(records).expect("ids of a valid corpus stay unique")
    }

    /// Records with the given ids, in corpus order. Unknown ids are ignored.
    pub fn subset<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Corpus {
        let mut idx: Vec<usize> = ids
            .into_iter()
            .filter_map(|id| self.by_id.get(id).copied())
            .collect();
        idx.sort_unstable();
        idx.dedup();
        let records = idx.into_iter().map(|i| self.records[i].clone()).collect();
        Corpus::index(records).expect("ids of a valid corpus stay unique")
    }

    /// Writes the corpus in the line-delimited JSON format accepted by [`parse_corpus`].
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), CorpusError> {
        for r in &self.records {
            let raw = RawRecord {
                id: r.id.clone(),
                pub_date: r.pub_date.format("%Y-%m-%d").to_string(),
                title: r.title.clone(),
                abstract_text: r.abstract_text.clone(),
                ipc: r.codes.iter().map(|c| c.to_string()).collect(),
                citations: r.citations.clone(),
            };
            serde_json::to_writer(&mut out, &raw).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Parses a line-delimited JSON corpus. Blank lines are skipped.
pub fn parse_corpus<R: BufRead>(input: R) -> Result<Corpus, CorpusError> {
    let mut records = Vec::new();
    let mut dropped = 0;
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let (record, d) = record_from_raw(raw, line_no)?;
        dropped += d;
        records.push(record);
    }
    if records.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut corpus = Corpus::index(records)?;
    corpus.duplicate_codes_dropped = dropped;
    if dropped > 0 {
        log::warn!("dropped {dropped} duplicate codes within records");
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code(s: &str) -> TechCode {
        s.parse().unwrap()
    }

    fn line(id: &str, date: &str, ipc: &[&str]) -> String {
        let ipc = ipc.iter().map(|c| format!("{c:?}")).collect::<Vec<_>>().join(",");
        format!(
            r#"{{"id":"{id}","pub_date":"{date}","title":"a title","abstract":"an abstract","ipc":[{ipc}]}}"#
        )
    }

    fn parse(lines: &[String]) -> Result<Corpus, CorpusError> {
        parse_corpus(lines.join("\n").as_bytes())
    }

    #[test]
    fn truncation() {
        assert_eq!(truncate_code("A61K 31/4745").unwrap().as_str(), "A61K31");
        assert_eq!(truncate_code("h01l 21/02").unwrap().as_str(), "H01L21");
        assert_eq!(truncate_code("G06F17").unwrap().as_str(), "G06F17");
        assert!(matches!(truncate_code("B0X"), Err(CorpusError::MalformedCode(_))));
        assert!(truncate_code("Z01K31/00").is_err());
        assert!(truncate_code("A61K31415/00").is_err());
        assert!(truncate_code("").is_err());
    }

    #[test]
    fn parses_three_records() {
        let c = parse(&[
            line("P1", "2006-01-02", &["A61K 31/00", "H01L 21/02"]),
            line("P2", "2007-05-06", &["A61K 31/10"]),
            line("P3", "2011-12-31", &["H01L 21/02"]),
        ])
        .unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.records()[0].id, "P1");
        assert_eq!(c.get("P3").unwrap().pub_year(), 2011);
    }

    #[test]
    fn empty_abstract_is_rejected_with_line() {
        let bad = r#"{"id":"P2","pub_date":"2006-01-01","title":"t","abstract":" ","ipc":["A01B1"]}"#;
        let err = parse(&[line("P1", "2006-01-01", &["A01B1"]), bad.to_string()]).unwrap_err();
        assert!(matches!(err, CorpusError::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn duplicate_ids_and_empty_input() {
        let err = parse(&[
            line("P1", "2006-01-01", &["A01B1"]),
            line("P1", "2007-01-01", &["A01B2"]),
        ])
        .unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateId(id) if id == "P1"));
        assert!(matches!(parse(&[]), Err(CorpusError::EmptyCorpus)));
    }

    #[test]
    fn self_citation_is_invalid() {
        let bad = r#"{"id":"P1","pub_date":"2006-01-01","title":"t","abstract":"a","ipc":["A01B1"],"citations":["P1"]}"#;
        assert!(matches!(parse_corpus(bad.as_bytes()), Err(CorpusError::Parse { line: 1, .. })));
    }

    #[test]
    fn duplicate_codes_are_counted() {
        let c = parse(&[line("P1", "2006-01-01", &["A61K 31/00", "A61K 31/10", "B01D1"])]).unwrap();
        assert_eq!(c.records()[0].codes, vec![code("A61K31"), code("B01D1")]);
        assert_eq!(c.duplicate_codes_dropped(), 1);
    }

    #[test]
    fn window_slicing() {
        let c = parse(&[
            line("P1", "2006-01-01", &["A01B1"]),
            line("P2", "2011-01-01", &["A01B1"]),
        ])
        .unwrap();
        assert_eq!(c.window_slice(TimeWindow::new(2006, 2010).unwrap()).len(), 1);
        assert!(c.window_slice(TimeWindow::new(1900, 1901).unwrap()).is_empty());
        let y = c.window_slice(TimeWindow::year(2011));
        assert_eq!(y.len(), 1);
        assert_eq!(y.records()[0].id, "P2");
    }

    #[test]
    fn support_counts() {
        let c = parse(&[
            line("P1", "2006-01-01", &["A01B1", "B01D1"]),
            line("P2", "2007-01-01", &["A01B1"]),
            line("P3", "2008-01-01", &["A01B1", "C07D2"]),
        ])
        .unwrap();
        assert_eq!(c.code_support(code("C07D2")), 1);
        assert_eq!(c.code_support(code("B01D1")), 1);
        assert_eq!(c.code_support(code("A01B1")), 3);
        assert_eq!(c.code_support(code("H01L21")), 0);
        let total: usize = c.codes().map(|k| c.code_support(k)).sum();
        assert_eq!(total, c.link_count());
    }

    #[test]
    fn window_parse() {
        assert_eq!("2006:2010".parse::<TimeWindow>().unwrap(), TimeWindow::new(2006, 2010).unwrap());
        assert_eq!("2006".parse::<TimeWindow>().unwrap(), TimeWindow::year(2006));
        assert!("2010:2006".parse::<TimeWindow>().is_err());
    }
}
