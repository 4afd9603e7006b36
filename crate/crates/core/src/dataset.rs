//! Paired blurry/sharp datasets on disk.
//!
//! A dataset root either holds `blur/` and `sharp/` frame folders directly
//! (one sequence) or one sub-directory per sequence, each with its own pair.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{PahsError, Result};
use crate::frames::{load_sequence, save_frames, FrameFormat, FrameSequence};
use crate::tensor::{check_same, Real};

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSequence<T> {
    pub name: String,
    pub blur: FrameSequence<T>,
    pub sharp: FrameSequence<T>,
}

impl<T: Real> PairedSequence<T> {
    pub fn new(name: impl Into<String>, blur: FrameSequence<T>, sharp: FrameSequence<T>) -> Result<Self> {
        if blur.len() != sharp.len() {
            return Err(PahsError::shape("paired sequence", "frames", blur.len(), sharp.len()));
        }
        check_same("paired sequence", blur.frame_shape(), sharp.frame_shape())?;
        Ok(PairedSequence {
            name: name.into(),
            blur,
            sharp,
        })
    }

    pub fn len(&self) -> usize {
        self.blur.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blur.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub sequences: Vec<PairedSequence<T>>,
}

impl<T: Real> Dataset<T> {
    pub fn new(sequences: Vec<PairedSequence<T>>) -> Result<Self> {
        if sequences.is_empty() {
            return Err(PahsError::Contract("empty dataset".into()));
        }
        Ok(Dataset { sequences })
    }

    pub fn single(blur: FrameSequence<T>, sharp: FrameSequence<T>) -> Result<Self> {
        Dataset::new(vec![PairedSequence::new("seq_000", blur, sharp)?])
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Shortest sequence length.
    pub fn min_len(&self) -> usize {
        self.sequences.iter().map(|s| s.len()).min().unwrap_or(0)
    }

    pub fn load(root: &Path) -> Result<Self> {
        if root.join("blur").is_dir() {
            return Dataset::new(vec![load_pair(root, "seq_000")?]);
        }
        let entries = fs::read_dir(root).map_err(|e| PahsError::io(root, e))?;
        let mut dirs: Vec<PathBuf> = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| PahsError::io(root, e))?.path();
            if path.join("blur").is_dir() {
                dirs.push(path);
            }
        }
        dirs.sort();
        if dirs.is_empty() {
            return Err(PahsError::Contract(format!(
                "no blur/sharp pairs found under {}",
                root.display()
            )));
        }
        let seqs = dirs
            .iter()
            .map(|d| {
                let name = d.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
                load_pair(d, &name)
            })
            .collect::<Result<_>>()?;
        Dataset::new(seqs)
    }

    /// Writes `root/<name>/{blur,sharp}/%06d.<ext>`.
    pub fn save(&self, root: &Path, format: FrameFormat) -> Result<()> {
        for s in &self.sequences {
            let dir = root.join(&s.name);
            save_frames(&dir.join("blur"), s.blur.frames(), &bare_ids(s.blur.len()), format)?;
            save_frames(&dir.join("sharp"), s.sharp.frames(), &bare_ids(s.sharp.len()), format)?;
        }
        Ok(())
    }
}

fn bare_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{i:06}")).collect()
}

fn load_pair<T: Real>(dir: &Path, name: &str) -> Result<PairedSequence<T>> {
    let blur = load_sequence(&dir.join("blur"))?;
    let sharp = load_sequence(&dir.join("sharp"))?;
    PairedSequence::new(name, blur, sharp)
}
