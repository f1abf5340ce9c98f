//! Run-directory file formats: `samples.jsonl`, `scores.csv`, `labels.jsonl`
//! and generic JSON-lines helpers. All files are UTF-8 with LF endings.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::datapool::{check_unique_ids, LabelEntry, LabelRole, LabeledSet, Sample};
use crate::error::{Error, Result};
use crate::scores::ScoreMatrix;

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partially written file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp~");
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut buf = serde_json::to_vec_pretty(value)?;
    buf.push(b'\n');
    write_atomic(path, &buf)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Appends one JSON line; used by the single rating writer.
pub fn append_jsonl<T: Serialize>(file: &mut fs::File, record: &T) -> Result<()> {
    let mut buf = serde_json::to_vec(record)?;
    buf.push(b'\n');
    file.write_all(&buf)
        .and_then(|_| file.flush())
        .map_err(|e| Error::io("<append>", e))
}

pub fn write_manifest(path: &Path, samples: &[Sample]) -> Result<()> {
    write_jsonl(path, samples)
}

/// Reads a sample manifest, rejecting duplicate ids and non-finite features.
pub fn load_manifest(path: &Path) -> Result<Vec<Sample>> {
    let samples: Vec<Sample> = read_jsonl(path)?;
    check_unique_ids(&samples)?;
    for s in &samples {
        if s.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite feature in `{}`", s.id)));
        }
        if let Some(l) = &s.latents {
            if !l.is_valid() {
                return Err(Error::invalid(format!("latents of `{}` outside [0, 1]", s.id)));
            }
        }
    }
    Ok(samples)
}

/// Cross-checks a manifest against an optional external score file.
///
/// Samples without features are accepted only when they carry an
/// `image_ref` and every model in `scores` has a value for them; every
/// scored sample must exist in the manifest.
pub fn validate_manifest(samples: &[Sample], scores: Option<&ScoreMatrix>) -> Result<()> {
    let ids: HashSet<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    if let Some(m) = scores {
        if let Some(unknown) = m.sample_ids().iter().find(|id| !ids.contains(id.as_str())) {
            return Err(Error::UnknownSample(unknown.clone()));
        }
    }
    for s in samples.iter().filter(|s| s.features.is_empty()) {
        if s.image_ref.is_none() {
            return Err(Error::invalid(format!("`{}` has neither features nor image_ref", s.id)));
        }
        let scored = scores.is_some_and(|m| m.sample_position(&s.id).is_some());
        if !scored {
            return Err(Error::invalid(format!(
                "`{}` has no features and no external scores",
                s.id
            )));
        }
    }
    Ok(())
}

pub fn write_scores(path: &Path, m: &ScoreMatrix) -> Result<()> {
    let mut out = String::from("sample_id");
    for id in m.model_ids() {
        out.push(',');
        out.push_str(id);
    }
    out.push('\n');
    for (j, sid) in m.sample_ids().iter().enumerate() {
        out.push_str(sid);
        for i in 0..m.n_models() {
            out.push(',');
            out.push_str(&m.get(i, j).to_string());
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn load_scores(path: &Path) -> Result<ScoreMatrix> {
    let text = read_text(path)?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty score file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"sample_id") || cols.len() < 2 {
        return Err(parse_err(1, "header must be `sample_id,<model_id>,...`".into()));
    }
    let model_ids: Vec<String> = cols[1..].iter().map(|s| s.to_string()).collect();
    let mut sample_ids = Vec::new();
    let mut rows = vec![Vec::new(); model_ids.len()];
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        let row = i; // 0-based line index == data row number
        if cells.len() > cols.len() {
            return Err(parse_err(
                i + 1,
                format!("{} cells, expected {}", cells.len(), cols.len()),
            ));
        }
        sample_ids.push(cells[0].to_string());
        for (m, model) in model_ids.iter().enumerate() {
            let cell = cells.get(m + 1).map(|c| c.trim()).unwrap_or("");
            if cell.is_empty() {
                return Err(Error::MissingScore {
                    row,
                    column: model.clone(),
                });
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(i + 1, format!("bad score `{cell}` in column `{model}`")))?;
            rows[m].push(v);
        }
    }
    ScoreMatrix::from_rows(model_ids, sample_ids, rows)
}

#[derive(Serialize, Deserialize)]
struct LabelLine {
    sample_id: String,
    mos: f64,
    std: f64,
    n: usize,
}

pub fn write_labels(path: &Path, set: &LabeledSet) -> Result<()> {
    let lines: Vec<LabelLine> = set
        .entries
        .iter()
        .map(|(id, e)| LabelLine {
            sample_id: id.clone(),
            mos: e.mos,
            std: e.std,
            n: e.n_ratings,
        })
        .collect();
    write_jsonl(path, &lines)
}

pub fn load_labels(path: &Path, role: LabelRole) -> Result<LabeledSet> {
    let lines: Vec<LabelLine> = read_jsonl(path)?;
    let mut set = LabeledSet::new(role);
    for l in lines {
        set.insert(
            &l.sample_id,
            LabelEntry {
                mos: l.mos,
                std: l.std,
                n_ratings: l.n,
            },
        )?;
    }
    Ok(set)
}
