//! Bank directories: a versioned `index.jsonl` (header line, then one
//! record per entry) plus lossless image blobs for generated images.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blob::{self, DType};
use crate::error::{Error, Result};
use crate::memory::bank::{LongTermBank, LongTermEntry, ShortTermBank, ShortTermEntry};

const INDEX: &str = "index.jsonl";
const FORMAT: &str = "rainbow-bank";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    kind: String,
    entries: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: usize,
    task: usize,
    prompt: String,
    /// f64 bit patterns as 16-digit hex strings.
    feature: Vec<String>,
    image: Option<String>,
    score: Option<String>,
    candidate: Option<usize>,
}

fn hex(x: f64) -> String {
    format!("{:016x}", x.to_bits())
}

fn unhex(s: &str) -> Option<f64> {
    if s.len() != 16 {
        return None;
    }
    u64::from_str_radix(s, 16).ok().map(f64::from_bits)
}

fn write_index(dir: &Path, kind: &str, records: &[Record]) -> Result<()> {
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        kind: kind.into(),
        entries: records.len(),
    };
    let mut text = serde_json::to_string(&header)?;
    text.push('\n');
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    let path = dir.join(INDEX);
    fs::write(&path, text).map_err(Error::io(&path))
}

fn read_index(dir: &Path, kind: &str) -> Result<Vec<Record>> {
    let path = dir.join(INDEX);
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    let loc = path.display().to_string();
    let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
    let mut lines = text.lines();
    let header: Header = lines
        .next()
        .ok_or_else(|| Error::integrity(&loc, "empty index"))
        .and_then(|l| serde_json::from_str(l).map_err(|e| Error::integrity(&loc, format!("header: {e}"))))?;
    if header.format != FORMAT || header.version != VERSION || header.kind != kind {
        return Err(Error::integrity(
            &loc,
            format!("expected {FORMAT} v{VERSION} `{kind}`, found {} v{} `{}`", header.format, header.version, header.kind),
        ));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let r: Record = serde_json::from_str(line)
            .map_err(|e| Error::integrity(format!("{loc} record {i}"), e.to_string()))?;
        if r.id != i {
            return Err(Error::integrity(format!("{loc} record {i}"), format!("id {} out of order", r.id)));
        }
        out.push(r);
    }
    if out.len() != header.entries {
        return Err(Error::integrity(
            &loc,
            format!("header lists {} entries, found {}", header.entries, out.len()),
        ));
    }
    Ok(out)
}

fn features(r: &Record, loc: &str) -> Result<Vec<f64>> {
    r.feature
        .iter()
        .map(|s| unhex(s).ok_or_else(|| Error::integrity(format!("{loc} record {}", r.id), format!("bad feature value `{s}`"))))
        .collect()
}

pub fn save_long_term(bank: &LongTermBank, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let records: Vec<Record> = bank
        .entries()
        .iter()
        .enumerate()
        .map(|(id, e)| Record {
            id,
            task: e.task,
            prompt: e.prompt.clone(),
            feature: e.feature.iter().map(|&x| hex(x)).collect(),
            image: None,
            score: None,
            candidate: None,
        })
        .collect();
    write_index(dir, "long-term", &records)
}

pub fn load_long_term(dir: &Path) -> Result<LongTermBank> {
    let loc = dir.display().to_string();
    let mut bank = LongTermBank::new();
    let records = read_index(dir, "long-term")?;
    let mut entries = Vec::new();
    for r in &records {
        entries.push(LongTermEntry {
            feature: features(r, &loc)?,
            prompt: r.prompt.clone(),
            task: r.task,
        });
    }
    bank.restore(entries);
    Ok(bank)
}

pub fn save_short_term(bank: &ShortTermBank, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut records = Vec::new();
    for (id, e) in bank.entries.iter().enumerate() {
        let file = format!("entry-{id}.bin");
        blob::write(&dir.join(&file), &e.image, DType::F64)?;
        records.push(Record {
            id,
            task: e.task,
            prompt: e.prompt.clone(),
            feature: Vec::new(),
            image: Some(file),
            score: Some(hex(e.score)),
            candidate: Some(e.candidate),
        });
    }
    write_index(dir, "short-term", &records)
}

pub fn load_short_term(dir: &Path) -> Result<ShortTermBank> {
    let loc = dir.display().to_string();
    let mut entries = Vec::new();
    for r in read_index(dir, "short-term")? {
        let bad = |what: &str| Error::integrity(format!("{loc} record {}", r.id), format!("missing {what}"));
        let file = r.image.as_ref().ok_or_else(|| bad("image"))?;
        let image = blob::read(&dir.join(file)).map_err(|e| match e {
            Error::Integrity { reason, .. } => Error::integrity(format!("{loc} record {}", r.id), reason),
            other => other,
        })?;
        let score = r.score.as_deref().and_then(unhex).ok_or_else(|| bad("score"))?;
        entries.push(ShortTermEntry {
            image,
            prompt: r.prompt.clone(),
            task: r.task,
            score,
            candidate: r.candidate.ok_or_else(|| bad("candidate"))?,
        });
    }
    Ok(ShortTermBank { entries })
}
