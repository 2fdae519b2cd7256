//! Paired dataset files: motions with raw and optional atomic texts.
//!
//! ```json
//! {"items": [{"motion": "motions/walk.motion", "text": "a person walks", "atomic": "atomic/walk.json"}]}
//! ```
//! Paths are relative to the dataset file.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use atomotion::llm::AtomicTextMatrix;
use atomotion::motion::{load_motion, MotionSequence};

use crate::error::{CliError, Result, EXIT_IO};
use crate::run::Run;

#[derive(Deserialize)]
struct RawDataset {
    items: Vec<RawItem>,
}

#[derive(Deserialize)]
struct RawItem {
    motion: PathBuf,
    text: String,
    atomic: Option<PathBuf>,
}

pub struct Item {
    pub motion: MotionSequence,
    pub text: String,
    pub atomic: Option<AtomicTextMatrix>,
}

pub fn load_motion_file(run: &mut Run, path: &Path) -> Result<MotionSequence> {
    let bytes = run.read(path)?;
    load_motion(&bytes[..]).map_err(|e| CliError::from(e).at(path))
}

pub fn load_atomic_file(run: &mut Run, path: &Path) -> Result<AtomicTextMatrix> {
    let text = run.read_string(path)?;
    AtomicTextMatrix::from_json(&text).map_err(|e| CliError::from(e).at(path))
}

pub fn load(run: &mut Run, path: &Path) -> Result<Vec<Item>> {
    let text = run.read_string(path)?;
    let raw: RawDataset =
        serde_json::from_str(&text).map_err(|e| CliError::new(EXIT_IO, format!("{}: {e}", path.display())))?;
    if raw.items.is_empty() {
        return Err(CliError::new(EXIT_IO, format!("{}: dataset has no items", path.display())));
    }
    let base = path.parent().unwrap_or(Path::new(""));
    raw.items
        .into_iter()
        .map(|it| {
            let motion = load_motion_file(run, &base.join(&it.motion))?;
            let atomic = match &it.atomic {
                Some(p) => Some(load_atomic_file(run, &base.join(p))?),
                None => None,
            };
            Ok(Item {
                motion,
                text: it.text,
                atomic,
            })
        })
        .collect()
}
