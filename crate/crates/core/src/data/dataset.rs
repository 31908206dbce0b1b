//! On-disk sequences: `<root>/<seq>/{rgb,x}/%06d.ppm`, `groundtruth.txt`
//! with one `x,y,w,h` line per frame, and `meta.txt` holding
//! `modality=T|E|D` and an optional `fps=`.

use std::path::{Path, PathBuf};

use super::{Image, Rect, Sequence};
use crate::embed::Modality;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord {
    pub id: String,
    pub modality: Modality,
    pub width: usize,
    pub height: usize,
    pub boxes: Vec<Rect>,
    pub rgb_paths: Vec<PathBuf>,
    pub x_paths: Vec<PathBuf>,
    pub fps: Option<f64>,
}

impl SequenceRecord {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Reads every frame into memory.
    pub fn load(&self) -> Result<Sequence> {
        let read = |paths: &[PathBuf]| -> Result<Vec<Image>> {
            paths
                .iter()
                .map(|p| {
                    let img = Image::read_ppm(p)?;
                    if (img.width, img.height) != (self.width, self.height) {
                        return Err(dataset_err(
                            p,
                            format!("{}x{} frame, sequence is {}x{}", img.width, img.height, self.width, self.height),
                        ));
                    }
                    Ok(img)
                })
                .collect()
        };
        Ok(Sequence {
            id: self.id.clone(),
            modality: self.modality,
            rgb: read(&self.rgb_paths)?,
            x: read(&self.x_paths)?,
            boxes: self.boxes.clone(),
        })
    }
}

fn dataset_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Dataset {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn parse_err(path: &Path, line: usize, detail: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        detail: detail.into(),
    }
}

pub fn frame_name(index: usize) -> String {
    format!("{index:06}.ppm")
}

/// Contiguous `000000.ppm ..` frame files of one stream directory.
fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(dataset_err(dir, "missing stream directory"));
    }
    let mut indices = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        let Some(stem) = name.strip_suffix(".ppm") else {
            continue;
        };
        match stem.parse::<usize>() {
            Ok(i) if stem.len() == 6 => indices.push(i),
            _ => return Err(dataset_err(&entry.path(), "frame file name is not %06d.ppm")),
        }
    }
    indices.sort_unstable();
    for (expect, &i) in indices.iter().enumerate() {
        if i != expect {
            return Err(dataset_err(&dir.join(frame_name(expect)), "missing frame"));
        }
    }
    Ok(indices.into_iter().map(|i| dir.join(frame_name(i))).collect())
}

/// Parses a groundtruth file, one box per non-empty line.
pub fn read_boxes(path: &Path) -> Result<Vec<Rect>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_boxes(&text).map_err(|(line, detail)| parse_err(path, line, detail))
}

pub fn parse_boxes(text: &str) -> std::result::Result<Vec<Rect>, (usize, String)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| Rect::parse_line(l).map_err(|e| (i + 1, e)))
        .collect()
}

pub fn write_boxes(path: &Path, boxes: &[Rect]) -> Result<()> {
    let mut text = String::new();
    for b in boxes {
        text.push_str(&b.to_line());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_meta(path: &Path) -> Result<(Modality, Option<f64>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (mut modality, mut fps) = (None, None);
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(parse_err(path, i + 1, "expected key=value"));
        };
        match k.trim() {
            "modality" => match v.trim().parse::<Modality>() {
                Ok(m) if m != Modality::Rgb => modality = Some(m),
                _ => return Err(parse_err(path, i + 1, format!("modality must be T, E or D, got {:?}", v.trim()))),
            },
            "fps" => match v.trim().parse::<f64>() {
                Ok(f) if f.is_finite() && f > 0.0 => fps = Some(f),
                _ => return Err(parse_err(path, i + 1, format!("bad fps {:?}", v.trim()))),
            },
            other => return Err(parse_err(path, i + 1, format!("unknown key {other:?}"))),
        }
    }
    let modality = modality.ok_or_else(|| dataset_err(path, "missing modality"))?;
    Ok((modality, fps))
}

/// Validates one sequence directory without keeping pixel data.
pub fn load_record(dir: &Path) -> Result<SequenceRecord> {
    let id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let (modality, fps) = read_meta(&dir.join("meta.txt"))?;
    let rgb_dir = dir.join("rgb");
    let x_dir = dir.join("x");
    let rgb_paths = list_frames(&rgb_dir)?;
    let x_paths = list_frames(&x_dir)?;
    if rgb_paths.is_empty() {
        return Err(dataset_err(&rgb_dir, "no frames"));
    }
    if x_paths.len() != rgb_paths.len() {
        return Err(dataset_err(
            &x_dir,
            format!("{} frames, rgb has {}", x_paths.len(), rgb_paths.len()),
        ));
    }
    let gt_path = dir.join("groundtruth.txt");
    let boxes = read_boxes(&gt_path)?;
    if boxes.len() != rgb_paths.len() {
        return Err(dataset_err(
            &gt_path,
            format!("{} boxes for {} frames", boxes.len(), rgb_paths.len()),
        ));
    }
    let first = Image::read_ppm(&rgb_paths[0])?;
    let (width, height) = (first.width, first.height);
    for p in rgb_paths.iter().skip(1).chain(&x_paths) {
        let img = Image::read_ppm(p)?;
        if (img.width, img.height) != (width, height) {
            return Err(dataset_err(
                p,
                format!("{}x{} frame, sequence is {width}x{height}", img.width, img.height),
            ));
        }
    }
    for (i, b) in boxes.iter().enumerate() {
        if !b.intersects_frame(width, height) {
            return Err(parse_err(&gt_path, i + 1, "box does not intersect the frame"));
        }
    }
    Ok(SequenceRecord {
        id,
        modality,
        width,
        height,
        boxes,
        rgb_paths,
        x_paths,
        fps,
    })
}

/// Every sequence directory under `root`, sorted by name.
pub fn load_dataset(root: &Path) -> Result<Vec<SequenceRecord>> {
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(dataset_err(root, "no sequence directories"));
    }
    dirs.iter().map(|d| load_record(d)).collect()
}

/// Writes a sequence in the layout `load_dataset` reads.
pub fn write_sequence(root: &Path, seq: &Sequence) -> Result<PathBuf> {
    let dir = root.join(&seq.id);
    for sub in ["rgb", "x"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for (i, (rgb, x)) in seq.rgb.iter().zip(&seq.x).enumerate() {
        rgb.write_ppm(&dir.join("rgb").join(frame_name(i)))?;
        x.write_ppm(&dir.join("x").join(frame_name(i)))?;
    }
    write_boxes(&dir.join("groundtruth.txt"), &seq.boxes)?;
    let meta = dir.join("meta.txt");
    std::fs::write(&meta, format!("modality={}\n", seq.modality)).map_err(|e| Error::io(&meta, e))?;
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_parse_reports_line_numbers() {
        assert_eq!(parse_boxes("1,2,3,4\n\n5,6,7,8\n").unwrap().len(), 2);
        assert_eq!(parse_boxes("1,2,3,4\n5,6,7\n").unwrap_err().0, 2);
    }
}
