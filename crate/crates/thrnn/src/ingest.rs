//! Raw log adapters.
//!
//! LastFM-1K listening logs are tab separated with six columns: user,
//! timestamp (RFC 3339), artist id, artist name, track id, track name. The
//! artist is the item; rows without an artist id fall back to the artist
//! name. Reddit logs are comma separated: user, subreddit, UTC seconds. A
//! header row is skipped when its timestamp column does not parse.

use std::io::Read;

use anyhow::{bail, Context, Result};
use chrono::DateTime;
use serde::{Deserialize, Serialize};
use thrnn_core::pipeline::RawInteraction;

/// Share of rows allowed to be malformed before ingestion fails.
pub const MAX_MALFORMED_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    Lastfm,
    Reddit,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub interactions: Vec<RawInteraction>,
    pub rows: usize,
    pub malformed: usize,
    /// First few malformed rows as `(line, reason)`.
    pub examples: Vec<(usize, String)>,
}

impl Ingested {
    fn new() -> Self {
        Ingested {
            interactions: Vec::new(),
            rows: 0,
            malformed: 0,
            examples: Vec::new(),
        }
    }

    fn reject(&mut self, line: usize, reason: impl Into<String>) {
        self.malformed += 1;
        if self.examples.len() < 5 {
            self.examples.push((line, reason.into()));
        }
    }

    /// Fails on an empty log or when too many rows were malformed.
    fn check(self) -> Result<Self> {
        if self.rows == 0 {
            bail!("input has zero data rows");
        }
        if self.malformed as f64 > MAX_MALFORMED_FRACTION * self.rows as f64 {
            let shown: Vec<String> = self.examples.iter().map(|(l, r)| format!("line {l}: {r}")).collect();
            bail!(
                "{} of {} rows are malformed (limit {:.0}%); first: {}",
                self.malformed,
                self.rows,
                MAX_MALFORMED_FRACTION * 100.0,
                shown.join("; ")
            );
        }
        if self.interactions.is_empty() {
            bail!("input has no valid rows");
        }
        Ok(self)
    }
}

/// Seconds since the epoch from RFC 3339 or a plain (possibly fractional)
/// number.
pub fn parse_timestamp(s: &str) -> Option<i64> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.timestamp());
    }
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    s.parse::<f64>().ok().filter(|v| v.is_finite()).map(|v| v.floor() as i64)
}

fn reader(delimiter: u8, input: impl Read) -> csv::Reader<impl Read> {
    csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(false)
        .flexible(true)
        .quoting(delimiter == b',')
        .from_reader(input)
}

pub fn read_lastfm(input: impl Read) -> Result<Ingested> {
    let mut out = Ingested::new();
    for (i, rec) in reader(b'\t', input).into_records().enumerate() {
        let line = i + 1;
        out.rows += 1;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                out.reject(line, e.to_string());
                continue;
            }
        };
        if rec.len() != 6 {
            out.reject(line, format!("expected 6 columns, found {}", rec.len()));
            continue;
        }
        let Some(ts) = parse_timestamp(&rec[1]) else {
            out.reject(line, format!("bad timestamp {:?}", &rec[1]));
            continue;
        };
        let artist = if rec[2].trim().is_empty() { rec[3].trim() } else { rec[2].trim() };
        match RawInteraction::new(rec[0].trim(), artist, ts) {
            Ok(r) => out.interactions.push(r),
            Err(e) => out.reject(line, e.to_string()),
        }
    }
    out.check()
}

pub fn read_reddit(input: impl Read) -> Result<Ingested> {
    let mut out = Ingested::new();
    for (i, rec) in reader(b',', input).into_records().enumerate() {
        let line = i + 1;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                out.rows += 1;
                out.reject(line, e.to_string());
                continue;
            }
        };
        let ts = rec.get(2).and_then(parse_timestamp);
        if line == 1 && rec.len() == 3 && ts.is_none() {
            continue;
        }
        out.rows += 1;
        if rec.len() != 3 {
            out.reject(line, format!("expected 3 columns, found {}", rec.len()));
            continue;
        }
        let Some(ts) = ts else {
            out.reject(line, format!("bad timestamp {:?}", &rec[2]));
            continue;
        };
        match RawInteraction::new(rec[0].trim(), rec[1].trim(), ts) {
            Ok(r) => out.interactions.push(r),
            Err(e) => out.reject(line, e.to_string()),
        }
    }
    out.check()
}

pub fn read_log(dataset: Dataset, path: &std::path::Path) -> Result<Ingested> {
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let input = std::io::BufReader::new(file);
    match dataset {
        Dataset::Lastfm => read_lastfm(input),
        Dataset::Reddit => read_reddit(input),
        Dataset::Synthetic => bail!("synthetic corpora are generated from a spec, not read from a log"),
    }
    .with_context(|| format!("reading {}", path.display()))
}
