//! Line-delimited manifest files.
//!
//! Line 1 is a header record (format tag, config digest, funnel); each
//! following line is one entry. Nothing time-dependent is written, so
//! re-serializing an unchanged manifest is byte-identical.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DatasetManifest, EditPairRecord, FunnelStats, ManifestEntry};

pub const DATASET_FORMAT: &str = "pipe-dataset/1";
pub const WORK_FORMAT: &str = "pipe-work/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    config_digest: String,
    funnel: FunnelStats,
}

/// Intermediate pipeline state between stages.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkManifest {
    pub stage: String,
    pub config_digest: String,
    pub funnel: FunnelStats,
    #[serde(skip)]
    pub records: Vec<EditPairRecord>,
}

#[derive(Serialize, Deserialize)]
struct WorkHeader {
    format: String,
    stage: String,
    config_digest: String,
    funnel: FunnelStats,
}

pub fn dataset_to_string(m: &DatasetManifest) -> Result<String> {
    m.validate()?;
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        config_digest: m.config_digest.clone(),
        funnel: m.funnel.clone(),
    };
    to_lines(&header, &m.entries)
}

pub fn dataset_from_str(text: &str) -> Result<DatasetManifest> {
    let (header, entries): (DatasetHeader, Vec<ManifestEntry>) = from_lines(text)?;
    check_format(&header.format, DATASET_FORMAT)?;
    let m = DatasetManifest {
        config_digest: header.config_digest,
        funnel: header.funnel,
        entries,
    };
    m.validate()?;
    Ok(m)
}

pub fn write_manifest(m: &DatasetManifest, path: &Path) -> Result<()> {
    write_atomic(path, dataset_to_string(m)?.as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    dataset_from_str(&read_text(path)?)
}

pub fn work_to_string(m: &WorkManifest) -> Result<String> {
    m.funnel.validate()?;
    for r in &m.records {
        r.validate()?;
    }
    let header = WorkHeader {
        format: WORK_FORMAT.into(),
        stage: m.stage.clone(),
        config_digest: m.config_digest.clone(),
        funnel: m.funnel.clone(),
    };
    to_lines(&header, &m.records)
}

pub fn work_from_str(text: &str) -> Result<WorkManifest> {
    let (header, records): (WorkHeader, Vec<EditPairRecord>) = from_lines(text)?;
    check_format(&header.format, WORK_FORMAT)?;
    header.funnel.validate()?;
    for r in &records {
        r.validate()?;
    }
    Ok(WorkManifest {
        stage: header.stage,
        config_digest: header.config_digest,
        funnel: header.funnel,
        records,
    })
}

pub fn write_work(m: &WorkManifest, path: &Path) -> Result<()> {
    write_atomic(path, work_to_string(m)?.as_bytes())
}

pub fn read_work(path: &Path) -> Result<WorkManifest> {
    work_from_str(&read_text(path)?)
}

fn check_format(found: &str, expected: &str) -> Result<()> {
    if found != expected {
        return Err(Error::Parse {
            line: 1,
            message: format!("unsupported format '{found}', expected '{expected}'"),
        });
    }
    Ok(())
}

fn to_lines<H: Serialize, T: Serialize>(header: &H, items: &[T]) -> Result<String> {
    let mut out = serde_json::to_string(header)?;
    out.push('\n');
    for it in items {
        out.push_str(&serde_json::to_string(it)?);
        out.push('\n');
    }
    Ok(out)
}

fn from_lines<H: DeserializeOwned, T: DeserializeOwned>(text: &str) -> Result<(H, Vec<T>)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "missing header record".into(),
    })?;
    let header = serde_json::from_str(first).map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    let items = lines
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect::<Result<Vec<T>>>()?;
    Ok((header, items))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
