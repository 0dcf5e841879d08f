//! Dataset manifests: CSV with header `path,mos[,split]`. Paths are relative
//! to the manifest's directory unless absolute.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub path: String,
    pub mos: f64,
    pub split: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let mut seen = HashSet::new();
        for r in &self.rows {
            if !seen.insert(r.path.as_str()) {
                return Err(format!("duplicate path {}", r.path));
            }
            if !r.mos.is_finite() {
                return Err(format!("non-finite MOS for {}", r.path));
            }
        }
        Ok(())
    }
}

pub fn write_manifest_to<W: std::io::Write>(m: &Manifest, out: W) -> Result<()> {
    m.validate().map_err(Error::Input)?;
    let with_split = m.rows.iter().any(|r| r.split.is_some());
    let mut w = csv::Writer::from_writer(out);
    let wrap = |e: csv::Error| Error::Input(format!("writing manifest: {e}"));
    if with_split {
        w.write_record(["path", "mos", "split"]).map_err(wrap)?;
    } else {
        w.write_record(["path", "mos"]).map_err(wrap)?;
    }
    for r in &m.rows {
        let mos = r.mos.to_string();
        if with_split {
            w.write_record([r.path.as_str(), mos.as_str(), r.split.as_deref().unwrap_or("")]).map_err(wrap)?;
        } else {
            w.write_record([r.path.as_str(), mos.as_str()]).map_err(wrap)?;
        }
    }
    w.flush().map_err(|e| Error::Input(format!("writing manifest: {e}")))
}

pub fn write_manifest(m: &Manifest, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_manifest_to(m, &mut buf)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Parse manifest text. `origin` is only used in error messages.
pub fn parse_manifest(text: &str, origin: &Path) -> Result<Manifest> {
    let perr = |line: u64, msg: String| Error::Parse { path: origin.to_path_buf(), line, msg };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| perr(1, e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let path_col = col("path").ok_or_else(|| perr(1, "header has no `path` column".into()))?;
    let mos_col = col("mos").ok_or_else(|| perr(1, "header has no `mos` column".into()))?;
    let split_col = col("split");
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            perr(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let path = rec.get(path_col).filter(|s| !s.is_empty()).ok_or_else(|| perr(line, "empty path".into()))?;
        let mos_text = rec.get(mos_col).ok_or_else(|| perr(line, "missing mos value".into()))?;
        let mos: f64 = mos_text.parse().map_err(|_| perr(line, format!("mos {mos_text:?} is not a number")))?;
        if !mos.is_finite() {
            return Err(perr(line, format!("mos {mos_text:?} is not finite")));
        }
        if !seen.insert(path.to_string()) {
            return Err(perr(line, format!("duplicate path {path}")));
        }
        let split = split_col.and_then(|c| rec.get(c)).filter(|s| !s.is_empty()).map(String::from);
        rows.push(ManifestRow { path: path.to_string(), mos, split });
    }
    Ok(Manifest { rows })
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path)
}
