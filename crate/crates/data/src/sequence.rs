use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lstcn_core::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::image::BinaryImage;
use crate::DataError;

/// Walking condition: normal, carrying a bag, wearing a coat, or synthetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Condition {
    Nm,
    Bg,
    Cl,
    Synth,
}

impl Condition {
    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Nm => "NM",
            Condition::Bg => "BG",
            Condition::Cl => "CL",
            Condition::Synth => "SYNTH",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, DataError> {
        match s.to_ascii_uppercase().as_str() {
            "NM" => Ok(Condition::Nm),
            "BG" => Ok(Condition::Bg),
            "CL" => Ok(Condition::Cl),
            "SYNTH" => Ok(Condition::Synth),
            _ => Err(DataError::Invalid(format!("unknown condition `{s}`"))),
        }
    }
}

/// Identity and recording labels of one sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SequenceKey {
    pub subject_id: String,
    pub condition: Condition,
    pub view_deg: i32,
    pub seq_index: u32,
}

impl fmt::Display for SequenceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}-{:02}/{:03}",
            self.subject_id, self.condition, self.seq_index, self.view_deg
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SilhouetteSequence {
    pub key: SequenceKey,
    frames: Vec<BinaryImage>,
}

impl SilhouetteSequence {
    pub fn new(key: SequenceKey, frames: Vec<BinaryImage>) -> Result<Self, DataError> {
        let Some(first) = frames.first() else {
            return Err(DataError::Invalid(format!("sequence {key} has no frames")));
        };
        let (h, w) = (first.height(), first.width());
        if let Some(i) = frames
            .iter()
            .position(|f| (f.height(), f.width()) != (h, w))
        {
            return Err(DataError::Invalid(format!(
                "sequence {key}: frame {i} is {}x{} but frame 0 is {h}x{w}",
                frames[i].height(),
                frames[i].width()
            )));
        }
        Ok(SilhouetteSequence { key, frames })
    }

    pub fn frames(&self) -> &[BinaryImage] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_size(&self) -> (usize, usize) {
        (self.frames[0].height(), self.frames[0].width())
    }

    /// `[T, 1, H, W]` tensor of the selected frame indices.
    pub fn to_tensor<S: Scalar>(&self, indices: &[usize]) -> Tensor<S> {
        let (h, w) = self.frame_size();
        let mut data = Vec::with_capacity(indices.len() * h * w);
        for &i in indices {
            data.extend(self.frames[i].pixels().iter().map(|&p| {
                if p != 0 {
                    S::one()
                } else {
                    S::zero()
                }
            }));
        }
        Tensor::from_vec(vec![indices.len(), 1, h, w], data).expect("frame data matches shape")
    }

    /// All frames as `[T, 1, H, W]`.
    pub fn full_tensor<S: Scalar>(&self) -> Tensor<S> {
        self.to_tensor(&(0..self.len()).collect::<Vec<_>>())
    }
}

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "pgm", "pbm", "ppm", "pnm"];

/// Value of the last run of digits in a file stem.
fn frame_number(path: &Path) -> Option<u64> {
    let stem = path.file_stem()?.to_str()?;
    let end = stem.rfind(|c: char| c.is_ascii_digit())? + 1;
    let start = stem[..end]
        .rfind(|c: char| !c.is_ascii_digit())
        .map_or(0, |i| i + 1);
    stem[start..end].parse().ok()
}

/// Image files of `dir` in frame-number order.
pub fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let rd = fs::read_dir(dir).map_err(|e| DataError::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| DataError::io(dir, e))?.path();
        let ext = p
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            paths.push(p);
        }
    }
    if paths.is_empty() {
        return Err(DataError::Invalid(format!(
            "{} contains no frame images",
            dir.display()
        )));
    }
    paths.sort_by(|a, b| (frame_number(a), a).cmp(&(frame_number(b), b)));
    Ok(paths)
}

/// Load a directory of frames. Nonzero pixels become foreground.
pub fn load_sequence(dir: &Path, key: SequenceKey) -> Result<SilhouetteSequence, DataError> {
    let frames = frame_paths(dir)?
        .iter()
        .map(|p| BinaryImage::load(p))
        .collect::<Result<Vec<_>, _>>()?;
    SilhouetteSequence::new(key, frames)
        .map_err(|e| DataError::Invalid(format!("{}: {e}", dir.display())))
}

/// Write frames as `0000.png`, `0001.png`, ... into `dir` (created if needed).
pub fn save_sequence(seq: &SilhouetteSequence, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    for (i, f) in seq.frames().iter().enumerate() {
        f.save(&dir.join(format!("{i:04}.png")))?;
    }
    Ok(())
}

/// Parse the CASIA-B layout `<subject>/<cond>-<nn>/<view>`, e.g. `001/nm-01/090`.
/// Only the last three path components are used.
pub fn parse_casia_path(path: &Path) -> Result<SequenceKey, DataError> {
    let bad = || {
        DataError::Invalid(format!(
            "`{}` is not <subject>/<cond>-<nn>/<view>",
            path.display()
        ))
    };
    let parts: Vec<&str> = path
        .components()
        .filter_map(|c| c.as_os_str().to_str())
        .filter(|c| !c.is_empty() && *c != "/")
        .collect();
    let [subject, cond_seq, view] = parts.get(parts.len().saturating_sub(3)..).ok_or_else(bad)?
    else {
        return Err(bad());
    };
    let (cond, seq) = cond_seq.split_once('-').ok_or_else(bad)?;
    Ok(SequenceKey {
        subject_id: subject.to_string(),
        condition: cond.parse().map_err(|_| bad())?,
        view_deg: view.parse().map_err(|_| bad())?,
        seq_index: seq.parse().map_err(|_| bad())?,
    })
}

/// Inverse of [`parse_casia_path`].
pub fn casia_path(key: &SequenceKey) -> PathBuf {
    PathBuf::from(&key.subject_id)
        .join(format!(
            "{}-{:02}",
            key.condition.as_str().to_ascii_lowercase(),
            key.seq_index
        ))
        .join(format!("{:03}", key.view_deg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key() -> SequenceKey {
        SequenceKey {
            subject_id: "001".into(),
            condition: Condition::Nm,
            view_deg: 90,
            seq_index: 1,
        }
    }

    #[test]
    fn casia_path_round_trip() {
        let k = parse_casia_path(Path::new("data/001/nm-01/090")).unwrap();
        assert_eq!(k, key());
        assert_eq!(casia_path(&k), PathBuf::from("001/nm-01/090"));
        assert!(parse_casia_path(Path::new("001/xx-01/090")).is_err());
        assert!(parse_casia_path(Path::new("090")).is_err());
    }

    #[test]
    fn frames_sort_numerically() {
        let dir = tempfile::tempdir().unwrap();
        for (i, name) in ["f10.png", "f2.png", "f1.png"].iter().enumerate() {
            BinaryImage::from_fn(4, 3, |y, _| y == i)
                .save(&dir.path().join(name))
                .unwrap();
        }
        std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let seq = load_sequence(dir.path(), key()).unwrap();
        assert_eq!(seq.len(), 3);
        // f1 (row 2), f2 (row 1), f10 (row 0)
        assert!(seq.frames()[0].get(2, 0));
        assert!(seq.frames()[1].get(1, 0));
        assert!(seq.frames()[2].get(0, 0));
    }

    #[test]
    fn thirty_identical_frames() {
        let dir = tempfile::tempdir().unwrap();
        let f = BinaryImage::from_fn(64, 44, |y, x| y > 5 && x > 10 && x < 30);
        let seq = SilhouetteSequence::new(key(), vec![f; 30]).unwrap();
        save_sequence(&seq, dir.path()).unwrap();
        let back = load_sequence(dir.path(), key()).unwrap();
        assert_eq!(back.len(), 30);
        assert_eq!(back, seq);
    }

    #[test]
    fn empty_dir_and_mixed_sizes_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_sequence(dir.path(), key()).is_err());
        BinaryImage::new(4, 4)
            .save(&dir.path().join("0.png"))
            .unwrap();
        BinaryImage::new(5, 4)
            .save(&dir.path().join("1.png"))
            .unwrap();
        let err = load_sequence(dir.path(), key()).unwrap_err().to_string();
        assert!(err.contains("frame 1"), "{err}");
    }
}
