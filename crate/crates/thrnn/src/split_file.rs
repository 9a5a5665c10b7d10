//! Line-delimited JSON split files.
//!
//! ```text
//! {"format":"thrnn-split","version":1,"num_items":N,"num_users":U,"max_session_len":L}
//! {"item_ids":["...", ...]}
//! {"user":"...","index":0,"train":[Session, ...],"test":[Session, ...]}
//! ...
//! ```
//!
//! One user line per user, in index order. A session is
//! `{"items":[..],"start_time":s,"end_time":e,"gap_before":g,"gap_masked":b}`
//! with times in seconds and item indices into `item_ids`.

use std::io::{BufRead, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use thrnn_core::pipeline::{DatasetSplit, Session, UserHistory};

pub const SPLIT_FORMAT: &str = "thrnn-split";
pub const SPLIT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    num_items: usize,
    num_users: usize,
    max_session_len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Items {
    item_ids: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UserLine {
    user: String,
    index: usize,
    train: Vec<Session>,
    test: Vec<Session>,
}

pub fn write_split(mut out: impl Write, split: &DatasetSplit, max_session_len: usize) -> Result<()> {
    split.validate(max_session_len)?;
    let header = Header {
        format: SPLIT_FORMAT.into(),
        version: SPLIT_VERSION,
        num_items: split.num_items(),
        num_users: split.num_users(),
        max_session_len,
    };
    serde_json::to_writer(&mut out, &header)?;
    writeln!(out)?;
    serde_json::to_writer(&mut out, &Items { item_ids: split.item_ids.clone() })?;
    writeln!(out)?;
    for (u, (train, test)) in split.train.iter().zip(&split.test).enumerate() {
        let line = UserLine {
            user: split.user_ids[u].clone(),
            index: u,
            train: train.sessions.clone(),
            test: test.sessions.clone(),
        };
        serde_json::to_writer(&mut out, &line)?;
        writeln!(out)?;
    }
    Ok(())
}

/// Reads and validates a split; returns it with its maximum session length.
pub fn read_split(input: impl BufRead) -> Result<(DatasetSplit, usize)> {
    let mut lines = input.lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((i, l)) => Ok((i + 1, l?)),
            None => bail!("split file ends before the {what} line"),
        }
    };
    let (_, line) = next("header")?;
    let header: Header = serde_json::from_str(&line).context("split header")?;
    ensure!(header.format == SPLIT_FORMAT, "not a split file (format {:?})", header.format);
    ensure!(
        header.version == SPLIT_VERSION,
        "split format version {} is not supported (expected {SPLIT_VERSION})",
        header.version
    );
    let (_, line) = next("item")?;
    let items: Items = serde_json::from_str(&line).context("split item line")?;
    ensure!(items.item_ids.len() == header.num_items, "item line does not match the header count");
    let mut split = DatasetSplit {
        train: Vec::with_capacity(header.num_users),
        test: Vec::with_capacity(header.num_users),
        item_ids: items.item_ids,
        user_ids: Vec::with_capacity(header.num_users),
    };
    for u in 0..header.num_users {
        let (n, line) = next("user")?;
        let user: UserLine = serde_json::from_str(&line).with_context(|| format!("split line {n}"))?;
        ensure!(user.index == u, "split line {n}: user index {} out of order", user.index);
        split.user_ids.push(user.user);
        split.train.push(UserHistory {
            user_index: u,
            sessions: user.train,
        });
        split.test.push(UserHistory {
            user_index: u,
            sessions: user.test,
        });
    }
    split.validate(header.max_session_len)?;
    Ok((split, header.max_session_len))
}

pub fn save_split(path: &Path, split: &DatasetSplit, max_session_len: usize) -> Result<()> {
    let file = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut out = std::io::BufWriter::new(file);
    write_split(&mut out, split, max_session_len)?;
    out.flush()?;
    Ok(())
}

pub fn load_split(path: &Path) -> Result<(DatasetSplit, usize)> {
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_split(std::io::BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}
