//! Run artifacts: the output directory and CSV builders.

use std::fmt::Write as _;
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use super::{FileEntry, RunManifest};
use crate::error::{Error, Result};
use crate::hjb::{fmt_num, ValueSolution};
use crate::market::PriceField;
use crate::sim::PathBundle;

/// Destination of a run's files. Without a directory, files are hashed and
/// listed but not written.
pub struct OutputSink {
    dir: Option<PathBuf>,
    files: Vec<FileEntry>,
}

impl OutputSink {
    pub fn new(dir: Option<PathBuf>) -> Result<Self> {
        if let Some(d) = &dir {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        Ok(Self { dir, files: Vec::new() })
    }

    pub fn dir(&self) -> Option<&PathBuf> {
        self.dir.as_ref()
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        if let Some(d) = &self.dir {
            let path = d.join(name);
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        self.files.push(FileEntry {
            name: name.into(),
            bytes: bytes.len(),
            sha256: hex::encode(Sha256::digest(bytes)),
        });
        Ok(())
    }

    /// Records the inventory in `manifest` and writes `manifest.json`.
    pub fn finish(self, manifest: &mut RunManifest) -> Result<()> {
        manifest.files = self.files;
        if let Some(d) = &self.dir {
            let path = d.join("manifest.json");
            let mut text = serde_json::to_string_pretty(manifest)?;
            text.push('\n');
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Minimal CSV writer with fixed float formatting.
pub(crate) struct Csv {
    text: String,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        let mut text = header.join(",");
        text.push('\n');
        Self { text }
    }

    pub fn with_header(header: Vec<String>) -> Self {
        let mut text = header.join(",");
        text.push('\n');
        Self { text }
    }

    pub fn row(&mut self, fields: &[Field<'_>]) {
        for (j, f) in fields.iter().enumerate() {
            if j > 0 {
                self.text.push(',');
            }
            match f {
                Field::Num(v) => self.text.push_str(&fmt_num(*v)),
                Field::Int(v) => {
                    let _ = write!(self.text, "{v}");
                }
                Field::Text(s) => {
                    if s.contains([',', '"', '\n']) {
                        let _ = write!(self.text, "\"{}\"", s.replace('"', "\"\""));
                    } else {
                        self.text.push_str(s);
                    }
                }
            }
        }
        self.text.push('\n');
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.text.into_bytes()
    }
}

pub(crate) enum Field<'a> {
    Num(f64),
    Int(usize),
    Text(&'a str),
}

pub(crate) fn value_csv(v: &ValueSolution, points: &[(f64, Vec<f64>)]) -> Vec<u8> {
    let mut out = Vec::new();
    v.write_csv(&mut out, points).expect("writing to memory");
    out
}

/// `t, x.., agent, level, row..` for every lattice point and agent.
pub(crate) fn prices_csv(h: &dyn PriceField, points: &[(f64, Vec<f64>)]) -> Vec<u8> {
    let n = h.state_dim();
    let mut header = vec!["t".to_string()];
    header.extend((0..n).map(|c| format!("x{c}")));
    header.push("agent".into());
    header.push("level".into());
    header.extend((0..n).map(|c| format!("row{c}")));
    let mut csv = Csv::with_header(header);
    let mut row = vec![0.0; n];
    let mut last_t = f64::NAN;
    let mut at = h.at(points.first().map_or(0.0, |p| p.0));
    for (t, x) in points {
        if *t != last_t {
            at = h.at(*t);
            last_t = *t;
        }
        for i in 0..h.n_agents() {
            at.row_into(i, x, &mut row);
            let mut fields = vec![Field::Num(*t)];
            fields.extend(x.iter().map(|v| Field::Num(*v)));
            fields.push(Field::Int(i));
            fields.push(Field::Num(at.level(i, x)));
            fields.extend(row.iter().map(|v| Field::Num(*v)));
            csv.row(&fields);
        }
    }
    csv.into_bytes()
}

/// Long-format `quantity, t, value` series of cross-path means and standard
/// deviations of every state and control component.
pub(crate) fn series_csv(bundle: &PathBundle) -> Vec<u8> {
    let mut csv = Csv::new(&["quantity", "t", "value"]);
    let grid = bundle.grid();
    let np = bundle.n_paths() as f64;
    let emit = |csv: &mut Csv, name: &str, t: f64, vals: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = vals.collect();
        let mean = v.iter().sum::<f64>() / np;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (np - 1.0).max(1.0);
        csv.row(&[Field::Text(&format!("mean_{name}")), Field::Num(t), Field::Num(mean)]);
        csv.row(&[Field::Text(&format!("std_{name}")), Field::Num(t), Field::Num(var.sqrt())]);
    };
    for k in 0..grid.n_nodes() {
        let t = grid.node(k);
        for c in 0..bundle.state_dim() {
            emit(&mut csv, &format!("x{c}"), t, &mut (0..bundle.n_paths()).map(|p| bundle.state(k, p)[c]));
        }
        if k < grid.n_steps() {
            for c in 0..bundle.control_dim() {
                emit(&mut csv, &format!("u{c}"), t, &mut (0..bundle.n_paths()).map(|p| bundle.control(k, p)[c]));
            }
        }
    }
    csv.into_bytes()
}

/// `path, t, x.., u..` rows for the first `max_paths` paths.
pub(crate) fn paths_csv(bundle: &PathBundle, max_paths: usize) -> Vec<u8> {
    let n = bundle.state_dim();
    let m = bundle.control_dim();
    let mut header = vec!["path".to_string(), "t".to_string()];
    header.extend((0..n).map(|c| format!("x{c}")));
    header.extend((0..m).map(|c| format!("u{c}")));
    let mut csv = Csv::with_header(header);
    let grid = bundle.grid();
    for p in 0..bundle.n_paths().min(max_paths) {
        for k in 0..grid.n_nodes() {
            let mut fields = vec![Field::Int(p), Field::Num(grid.node(k))];
            fields.extend(bundle.state(k, p).iter().map(|v| Field::Num(*v)));
            if k < grid.n_steps() {
                fields.extend(bundle.control(k, p).iter().map(|v| Field::Num(*v)));
            } else {
                fields.extend((0..m).map(|_| Field::Text("")));
            }
            csv.row(&fields);
        }
    }
    csv.into_bytes()
}
