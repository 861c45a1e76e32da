//! JSON / JSONL helpers and the on-disk dataset layout:
//!
//! ```text
//! <dir>/world.json            generator config
//! <dir>/answers.json          answer vocabulary (JSON array)
//! <dir>/<split>.jsonl         one QA record per line
//! <dir>/<split>_scenes.jsonl  one scene per line
//! <dir>/<split>_regions.{bin,json}  region features, one tensor per scene
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use dpt_core::tensor::Matrix;
use dpt_core::world::{DatasetSplits, QARecord, Scene, Split, SplitName, WorldConfig};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::archive;
use crate::error::{IoError, Result};

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| IoError::at(dir, e))?;
    }
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut s = serde_json::to_string_pretty(value).map_err(|e| IoError::format(path, e.to_string()))?;
    s.push('\n');
    fs::write(path, s).map_err(|e| IoError::at(path, e))?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| IoError::at(path, e))?;
    Ok(serde_json::from_str(&s).map_err(|e| IoError::format(path, e.to_string()))?)
}

pub fn write_jsonl<'a, T: Serialize + 'a>(path: &Path, items: impl IntoIterator<Item = &'a T>) -> Result<()> {
    ensure_parent(path)?;
    let f = fs::File::create(path).map_err(|e| IoError::at(path, e))?;
    let mut w = BufWriter::new(f);
    for it in items {
        let line = serde_json::to_string(it).map_err(|e| IoError::format(path, e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| IoError::at(path, e))?;
    }
    w.flush().map_err(|e| IoError::at(path, e))?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| IoError::at(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| IoError::at(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| IoError::format(path, format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

/// Appends JSON lines as they are produced.
pub struct JsonlWriter {
    path: std::path::PathBuf,
    w: BufWriter<fs::File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        ensure_parent(path)?;
        let f = fs::File::create(path).map_err(|e| IoError::at(path, e))?;
        Ok(Self { path: path.to_path_buf(), w: BufWriter::new(f) })
    }

    pub fn push<T: Serialize>(&mut self, item: &T) -> Result<()> {
        let line = serde_json::to_string(item).map_err(|e| IoError::format(&self.path, e.to_string()))?;
        writeln!(self.w, "{line}").map_err(|e| IoError::at(&self.path, e))?;
        self.w.flush().map_err(|e| IoError::at(&self.path, e))?;
        Ok(())
    }
}

fn write_split(dir: &Path, split: &Split) -> Result<()> {
    let name = split.name.as_str();
    write_jsonl(&dir.join(format!("{name}.jsonl")), &split.records)?;
    write_jsonl(&dir.join(format!("{name}_scenes.jsonl")), &split.scenes)?;
    let mats: Vec<(String, Matrix<f32>)> = split
        .scenes
        .iter()
        .zip(&split.regions)
        .map(|(s, r)| {
            let cols = r.first().map_or(0, Vec::len);
            (s.scene_id.clone(), Matrix::from_vec(r.len(), cols, r.concat()))
        })
        .collect();
    archive::write_archive(
        &dir.join(format!("{name}_regions")),
        mats.iter().map(|(n, m)| (n.as_str(), m)),
        serde_json::json!({ "split": name }),
    )
}

fn read_split(dir: &Path, name: SplitName) -> Result<Split> {
    let n = name.as_str();
    let records: Vec<QARecord> = read_jsonl(&dir.join(format!("{n}.jsonl")))?;
    let scenes: Vec<Scene> = read_jsonl(&dir.join(format!("{n}_scenes.jsonl")))?;
    let stem = dir.join(format!("{n}_regions"));
    let (tensors, _) = archive::read_archive(&stem)?;
    if tensors.len() != scenes.len() || tensors.iter().zip(&scenes).any(|((id, _), s)| *id != s.scene_id) {
        return Err(IoError::format(&stem.with_extension("json"), "region tensors do not match the scene list").into());
    }
    let regions = tensors
        .into_iter()
        .map(|(_, m)| (0..m.rows).map(|r| m.row(r).to_vec()).collect())
        .collect();
    Ok(Split::new(name, scenes, regions, records))
}

pub fn write_dataset(dir: &Path, data: &DatasetSplits) -> Result<()> {
    write_json(&dir.join("world.json"), &data.world)?;
    write_json(&dir.join("answers.json"), &data.answers)?;
    for name in SplitName::ALL {
        write_split(dir, data.split(name))?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<DatasetSplits> {
    let world: WorldConfig = read_json(&dir.join("world.json"))?;
    let answers: Vec<String> = read_json(&dir.join("answers.json"))?;
    Ok(DatasetSplits {
        world,
        answers,
        train: read_split(dir, SplitName::Train)?,
        val: read_split(dir, SplitName::Val)?,
        test: read_split(dir, SplitName::Test)?,
    })
}
