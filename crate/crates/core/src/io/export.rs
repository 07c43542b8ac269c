//! Dataset and rollout export.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::domain::{Example, Shape, CHANNELS, IMAGE_SIDE};
use crate::error::{CoevoError, Result};
use crate::policy::Rollout;

#[derive(Serialize)]
struct IndexEntry {
    file: String,
    prompt_id: usize,
    fg: usize,
    bg: usize,
    shape: Shape,
}

#[derive(Serialize)]
struct Index {
    shape: [usize; 3],
    dtype: &'static str,
    layout: &'static str,
    items: Vec<IndexEntry>,
}

/// One raw little-endian f32 file per image plus `index.json`.
pub fn export_dataset(data: &[Example], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CoevoError::io(dir, e))?;
    let mut items = Vec::with_capacity(data.len());
    for (i, ex) in data.iter().enumerate() {
        let file = format!("{i:05}.f32");
        let bytes: Vec<u8> = ex
            .image
            .pixels()
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect();
        let path = dir.join(&file);
        std::fs::write(&path, bytes).map_err(|e| CoevoError::io(&path, e))?;
        items.push(IndexEntry {
            file,
            prompt_id: ex.prompt.id,
            fg: ex.prompt.fg,
            bg: ex.prompt.bg,
            shape: ex.prompt.shape,
        });
    }
    let index = Index {
        shape: [IMAGE_SIDE, IMAGE_SIDE, CHANNELS],
        dtype: "f32le",
        layout: "hwc",
        items,
    };
    let path = dir.join("index.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&index)?).map_err(|e| CoevoError::io(&path, e))
}

/// Rollout records as JSONL (tokens as row-major integer lists).
pub fn write_rollouts(rollouts: &[Rollout], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| CoevoError::io(path, e))?;
    for r in rollouts {
        let line = serde_json::to_string(r)?;
        writeln!(f, "{line}").map_err(|e| CoevoError::io(path, e))?;
    }
    Ok(())
}
