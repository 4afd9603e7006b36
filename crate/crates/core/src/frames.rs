//! Frame sequences and frame directories (`%06d.ppm` or `%06d.pt4`).

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{PahsError, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Ordered, non-empty list of frames `(n, 3, H, W)` with uniform dims.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence<T> {
    frames: Vec<Tensor<T>>,
    ids: Vec<String>,
}

impl<T: Real> FrameSequence<T> {
    pub fn new(frames: Vec<Tensor<T>>, ids: Vec<String>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| PahsError::Contract("no frames found".into()))?
            .shape();
        if ids.len() != frames.len() {
            return Err(PahsError::shape("frame sequence", "ids", frames.len(), ids.len()));
        }
        if first.c != 3 {
            return Err(PahsError::shape("frame sequence", "channels", 3, first.c));
        }
        for f in &frames {
            crate::tensor::check_same("frame sequence", first, f.shape())?;
        }
        Ok(FrameSequence { frames, ids })
    }

    /// Frames labelled `000000`, `000001`, ...
    pub fn from_frames(frames: Vec<Tensor<T>>) -> Result<Self> {
        let ids = (0..frames.len()).map(|i| format!("{i:06}")).collect();
        FrameSequence::new(frames, ids)
    }

    pub fn frames(&self) -> &[Tensor<T>] {
        &self.frames
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_shape(&self) -> Shape {
        self.frames[0].shape()
    }

    /// Same spatial crop of every frame.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        let frames = self
            .frames
            .iter()
            .map(|f| f.crop(top, left, height, width))
            .collect::<Result<_>>()?;
        FrameSequence::new(frames, self.ids.clone())
    }

    pub fn into_frames(self) -> Vec<Tensor<T>> {
        self.frames
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameFormat {
    Ppm,
    Pt4,
}

impl FrameFormat {
    pub fn extension(self) -> &'static str {
        match self {
            FrameFormat::Ppm => "ppm",
            FrameFormat::Pt4 => "pt4",
        }
    }

    fn from_path(path: &Path) -> Option<Self> {
        let stem = path.file_stem()?.to_str()?;
        if stem.len() != 6 || !stem.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        match path.extension()?.to_str()? {
            "ppm" => Some(FrameFormat::Ppm),
            "pt4" => Some(FrameFormat::Pt4),
            _ => None,
        }
    }
}

/// Frame files in `dir`, sorted by name. Other files are ignored.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| PahsError::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| PahsError::io(dir, e))?.path();
        if path.is_file() && FrameFormat::from_path(&path).is_some() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_frame<T: Real>(path: &Path) -> Result<Tensor<T>> {
    match FrameFormat::from_path(path) {
        Some(FrameFormat::Ppm) => read_ppm(path),
        Some(FrameFormat::Pt4) => {
            let t = Tensor::load_pt4(path)?;
            let s = t.shape();
            if s.n != 1 || s.c != 3 {
                return Err(PahsError::format(path, format!("frame must be (1, 3, H, W), got {s}")));
            }
            Ok(t)
        }
        None => Err(PahsError::format(path, "not a %06d.ppm or %06d.pt4 frame")),
    }
}

/// Loads every frame of `dir`; ids are the file names.
pub fn load_sequence<T: Real>(dir: &Path) -> Result<FrameSequence<T>> {
    let paths = list_frames(dir)?;
    if paths.is_empty() {
        return Err(PahsError::Contract(format!("no frames found in {}", dir.display())));
    }
    let mut frames = Vec::with_capacity(paths.len());
    let mut ids = Vec::with_capacity(paths.len());
    for p in &paths {
        frames.push(load_frame(p)?);
        ids.push(p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string());
    }
    FrameSequence::new(frames, ids)
}

/// Writes one file per frame. `names` are file names (as produced by
/// [`load_sequence`]) or bare ids, in which case `format` picks the extension.
pub fn save_frames<T: Real>(dir: &Path, frames: &[Tensor<T>], names: &[String], format: FrameFormat) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| PahsError::io(dir, e))?;
    for (frame, name) in frames.iter().zip(names) {
        let path = dir.join(name);
        let path = match FrameFormat::from_path(&path) {
            Some(_) => path,
            None => dir.join(format!("{name}.{}", format.extension())),
        };
        match FrameFormat::from_path(&path) {
            Some(FrameFormat::Ppm) => write_ppm(&path, frame)?,
            _ => frame.save_pt4(&path)?,
        }
    }
    Ok(())
}

/// Reads a binary (P6) 8-bit PPM into `(1, 3, H, W)` with values in `[0, 1]`.
pub fn read_ppm<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| PahsError::io(path, e))?;
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // skip whitespace and comments
        while pos < bytes.len() {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(PahsError::format(path, "truncated PPM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(PahsError::format(path, "only binary P6 PPM is supported"));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| PahsError::format(path, format!("bad PPM header field `{s}`")))
    };
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(PahsError::format(path, "only 8-bit PPM (maxval 255) is supported"));
    }
    pos += 1; // single whitespace byte after maxval
    let body = bytes
        .get(pos..pos + width * height * 3)
        .ok_or_else(|| PahsError::format(path, "truncated PPM pixel data"))?;
    let scale = T::from_f64_lossy(255.0);
    Ok(Tensor::from_fn(Shape::new(1, 3, height, width), |_, c, h, w| {
        T::from_f64_lossy(body[(h * width + w) * 3 + c] as f64) / scale
    }))
}

/// Quantises `[0, 1]` values to 8 bits (clamping) and writes a P6 PPM.
pub fn write_ppm<T: Real>(path: &Path, frame: &Tensor<T>) -> Result<()> {
    let s = frame.shape();
    if s.n != 1 || s.c != 3 {
        return Err(PahsError::Contract(format!(
            "PPM export needs a (1, 3, H, W) frame, got {s}"
        )));
    }
    let mut out = format!("P6\n{} {}\n255\n", s.w, s.h).into_bytes();
    out.reserve(s.numel());
    for h in 0..s.h {
        for w in 0..s.w {
            for c in 0..3 {
                out.push(to_u8(frame.at(0, c, h, w).as_f64()));
            }
        }
    }
    fs::write(path, out).map_err(|e| PahsError::io(path, e))
}

fn to_u8(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Clamps to `[0, 1]`, the export-time range of restored frames.
pub fn clamp_unit<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| v.max(T::zero()).min(T::one()))
}
