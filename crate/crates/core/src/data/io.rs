//! Dataset files.
//!
//! `dataset.json` names the feature widths and one record file per split.
//! Record files are either newline-delimited JSON objects
//! `{id, label, text, visual, acoustic}` (each modality a list of rows) or
//! a packed little-endian binary layout:
//!
//! ```text
//! "TCAN" | u32 version | u32 n_records
//! per record: u32 id_len | id (utf-8) | f32 label | 3 × (u32 rows | u32 cols | f32 × rows·cols)
//! ```
//!
//! Modalities are stored text, visual, acoustic. The loader picks the
//! format from the first four bytes.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::{InputWidths, Modality};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "dataset.json";
const BINARY_MAGIC: &[u8; 4] = b"TCAN";
const BINARY_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitFiles {
    pub train: String,
    pub val: String,
    pub test: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub d_t: usize,
    pub d_v: usize,
    pub d_a: usize,
    pub splits: SplitFiles,
}

impl DatasetManifest {
    pub fn widths(&self) -> InputWidths {
        InputWidths {
            text: self.d_t,
            visual: self.d_v,
            acoustic: self.d_a,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RecordFormat {
    #[default]
    Json,
    Binary,
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    id: String,
    label: f32,
    text: Vec<Vec<f32>>,
    visual: Vec<Vec<f32>>,
    acoustic: Vec<Vec<f32>>,
}

fn rows_of(t: &Tensor) -> Vec<Vec<f32>> {
    let cols = t.dims()[1];
    t.data().chunks(cols.max(1)).map(<[f32]>::to_vec).collect()
}

/// Reads `dir/dataset.json` (or the manifest at `path` if it is a file) and
/// every split it names.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let manifest_path = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let dir = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: manifest_path.clone(),
        source,
    })?;
    let widths = manifest.widths();
    let load = |name: &str| -> Result<Vec<Sample>> {
        let samples = read_records(dir.join(name))?;
        for s in &samples {
            s.check_widths(widths)?;
        }
        Ok(samples)
    };
    Ok(Dataset {
        widths,
        train: load(&manifest.splits.train)?,
        val: load(&manifest.splits.val)?,
        test: load(&manifest.splits.test)?,
    })
}

/// Writes the manifest and three record files into `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, data: &Dataset, format: RecordFormat) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ext = match format {
        RecordFormat::Json => "jsonl",
        RecordFormat::Binary => "bin",
    };
    let manifest = DatasetManifest {
        d_t: data.widths.text,
        d_v: data.widths.visual,
        d_a: data.widths.acoustic,
        splits: SplitFiles {
            train: format!("train.{ext}"),
            val: format!("val.{ext}"),
            test: format!("test.{ext}"),
        },
    };
    write_records(dir.join(&manifest.splits.train), &data.train, format)?;
    write_records(dir.join(&manifest.splits.val), &data.val, format)?;
    write_records(dir.join(&manifest.splits.test), &data.test, format)?;
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn write_records(path: impl AsRef<Path>, samples: &[Sample], format: RecordFormat) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    match format {
        RecordFormat::Json => {
            for s in samples {
                let rec = JsonRecord {
                    id: s.id.clone(),
                    label: s.label,
                    text: rows_of(&s.text),
                    visual: rows_of(&s.visual),
                    acoustic: rows_of(&s.acoustic),
                };
                serde_json::to_writer(&mut buf, &rec).expect("record serialises");
                buf.push(b'\n');
            }
        }
        RecordFormat::Binary => {
            buf.extend_from_slice(BINARY_MAGIC);
            buf.extend_from_slice(&BINARY_VERSION.to_le_bytes());
            buf.extend_from_slice(&(samples.len() as u32).to_le_bytes());
            for s in samples {
                buf.extend_from_slice(&(s.id.len() as u32).to_le_bytes());
                buf.extend_from_slice(s.id.as_bytes());
                buf.extend_from_slice(&s.label.to_le_bytes());
                for m in Modality::ALL {
                    let t = s.features(m);
                    buf.extend_from_slice(&(t.dims()[0] as u32).to_le_bytes());
                    buf.extend_from_slice(&(t.dims()[1] as u32).to_le_bytes());
                    for v in t.data() {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Reads one record file in either format.
pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match f.read(&mut head[got..]) {
            Ok(0) => break,
            Ok(n) => got += n,
            Err(e) => return Err(Error::io(path, e)),
        }
    }
    if got == 4 && &head == BINARY_MAGIC {
        let mut rest = Vec::new();
        f.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
        return read_binary(path, &rest);
    }
    drop(f);
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_json_lines(path, BufReader::new(f))
}

fn read_json_lines(path: &Path, reader: impl BufRead) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let corrupt = |id: String, reason: String| Error::CorruptRecord {
            id,
            path: path.to_path_buf(),
            reason,
        };
        let rec: JsonRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                // name the sample if the id is still readable
                let id = serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(|i| i.as_str()).map(str::to_string))
                    .unwrap_or_else(|| format!("<line {}>", n + 1));
                return Err(corrupt(id, e.to_string()));
            }
        };
        let tensor = |m: &str, rows: &[Vec<f32>]| {
            Tensor::from_rows(rows)
                .map_err(|e| corrupt(rec.id.clone(), format!("{m}: {e}")))
                .and_then(|t| {
                    if t.data().iter().all(|v| v.is_finite()) {
                        Ok(t)
                    } else {
                        Err(corrupt(rec.id.clone(), format!("{m}: non-finite value")))
                    }
                })
        };
        let text = tensor("text", &rec.text)?;
        let visual = tensor("visual", &rec.visual)?;
        let acoustic = tensor("acoustic", &rec.acoustic)?;
        let sample = Sample {
            id: rec.id.clone(),
            text,
            visual,
            acoustic,
            label: rec.label,
        };
        finish(path, sample, &mut out)?;
    }
    Ok(out)
}

fn finish(path: &Path, sample: Sample, out: &mut Vec<Sample>) -> Result<()> {
    match sample.validate() {
        Ok(()) => {
            out.push(sample);
            Ok(())
        }
        Err(Error::Contract(reason)) => Err(Error::CorruptRecord {
            id: sample.id,
            path: path.to_path_buf(),
            reason,
        }),
        Err(e) => Err(e),
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let s = self.buf.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Option<f32> {
        self.take(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

fn read_binary(path: &Path, body: &[u8]) -> Result<Vec<Sample>> {
    let mut c = Cursor { buf: body, pos: 0 };
    let corrupt = |id: String, reason: &str| Error::CorruptRecord {
        id,
        path: PathBuf::from(path),
        reason: reason.to_string(),
    };
    let version = c.u32().ok_or_else(|| corrupt("<header>".into(), "truncated header"))?;
    if version != BINARY_VERSION {
        return Err(corrupt("<header>".into(), &format!("unsupported version {version}")));
    }
    let n = c.u32().ok_or_else(|| corrupt("<header>".into(), "truncated header"))? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 20));
    for i in 0..n {
        let placeholder = format!("<record {i}>");
        let id_len = c.u32().ok_or_else(|| corrupt(placeholder.clone(), "truncated"))? as usize;
        let id = c
            .take(id_len)
            .and_then(|b| std::str::from_utf8(b).ok())
            .ok_or_else(|| corrupt(placeholder.clone(), "bad id"))?
            .to_string();
        let label = c.f32().ok_or_else(|| corrupt(id.clone(), "truncated label"))?;
        let mut seqs = Vec::with_capacity(3);
        for m in Modality::ALL {
            let rows = c.u32().ok_or_else(|| corrupt(id.clone(), "truncated extents"))? as usize;
            let cols = c.u32().ok_or_else(|| corrupt(id.clone(), "truncated extents"))? as usize;
            let bytes = c
                .take(rows * cols * 4)
                .ok_or_else(|| corrupt(id.clone(), &format!("truncated {m} payload")))?;
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            seqs.push(Tensor::from_vec(&[rows, cols], data).expect("extents match payload"));
        }
        let acoustic = seqs.pop().expect("three");
        let visual = seqs.pop().expect("three");
        let text = seqs.pop().expect("three");
        finish(
            path,
            Sample {
                id,
                text,
                visual,
                acoustic,
                label,
            },
            &mut out,
        )?;
    }
    Ok(out)
}
