//! Images, boxes, sequences and their on-disk format.

pub mod crop;
pub mod dataset;
pub mod synth;

use std::path::Path;

use crate::embed::Modality;
use crate::error::{Error, Result};

pub use crop::{crop_pair, CropTransform};
pub use dataset::{load_dataset, write_sequence, SequenceRecord};
pub use synth::{generate_sequence, SynthConfig};

/// 8-bit RGB image, interleaved row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Mean of each channel in `[0, 1]`.
    pub fn channel_means(&self) -> [f64; 3] {
        let mut sums = [0u64; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                sums[c] += px[c] as u64;
            }
        }
        let n = (self.width * self.height).max(1) as f64 * 255.0;
        sums.map(|s| s as f64 / n)
    }

    /// Quantizes a `[3, H, W]` float buffer in `[0, 1]`.
    pub fn from_planes(width: usize, height: usize, planes: &[f32]) -> Self {
        let hw = width * height;
        let mut data = Vec::with_capacity(hw * 3);
        for i in 0..hw {
            for c in 0..3 {
                data.push(quantize(planes[c * hw + i]));
            }
        }
        Image { width, height, data }
    }

    /// Binary PPM (P6, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(format!("truncated header at byte {pos}"));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P6" {
            return Err(format!("unsupported magic {:?}, expected P6", fields[0]));
        }
        let num = |s: &str, what: &str| -> std::result::Result<usize, String> {
            s.parse().map_err(|_| format!("bad {what} {s:?}"))
        };
        let (width, height, maxval) = (num(&fields[1], "width")?, num(&fields[2], "height")?, num(&fields[3], "maxval")?);
        if maxval != 255 {
            return Err(format!("unsupported maxval {maxval}"));
        }
        if width == 0 || height == 0 {
            return Err("empty image".into());
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let need = width * height * 3;
        if bytes.len() < pos + need {
            return Err(format!(
                "raster truncated: {} bytes after header, expected {need}",
                bytes.len().saturating_sub(pos)
            ));
        }
        Ok(Image {
            width,
            height,
            data: bytes[pos..pos + need].to_vec(),
        })
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Image::from_ppm(&bytes).map_err(|detail| Error::Dataset {
            path: path.to_path_buf(),
            detail,
        })
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Axis-aligned box in absolute pixels, top-left origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Rect { x, y, w, h }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Rect {
            x: cx - w / 2.0,
            y: cy - h / 2.0,
            w,
            h,
        }
    }

    pub fn iou(&self, other: &Rect) -> f64 {
        let iw = ((self.x + self.w).min(other.x + other.w) - self.x.max(other.x)).max(0.0);
        let ih = ((self.y + self.h).min(other.y + other.h) - self.y.max(other.y)).max(0.0);
        let inter = iw * ih;
        let union = self.w * self.h + other.w * other.h - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn center_distance(&self, other: &Rect) -> f64 {
        let (a, b) = (self.center(), other.center());
        ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
    }

    /// Whether the box overlaps a `width x height` frame.
    pub fn intersects_frame(&self, width: usize, height: usize) -> bool {
        self.w > 0.0
            && self.h > 0.0
            && self.x < width as f64
            && self.y < height as f64
            && self.x + self.w > 0.0
            && self.y + self.h > 0.0
    }

    /// Clips to the frame, keeping at least one pixel of extent.
    pub fn clamp_to(&self, width: usize, height: usize) -> Rect {
        let (fw, fh) = (width as f64, height as f64);
        let x1 = self.x.clamp(0.0, fw - 1.0);
        let y1 = self.y.clamp(0.0, fh - 1.0);
        let x2 = (self.x + self.w).clamp(x1 + 1.0, fw);
        let y2 = (self.y + self.h).clamp(y1 + 1.0, fh);
        Rect::new(x1, y1, x2 - x1, y2 - y1)
    }

    /// `x,y,w,h` as written to box files.
    pub fn to_line(&self) -> String {
        format!("{},{},{},{}", fmt_num(self.x), fmt_num(self.y), fmt_num(self.w), fmt_num(self.h))
    }

    pub fn parse_line(line: &str) -> std::result::Result<Rect, String> {
        let parts: Vec<&str> = line.trim().split(',').collect();
        if parts.len() != 4 {
            return Err(format!("expected 4 comma-separated values, got {}", parts.len()));
        }
        let mut v = [0.0; 4];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| format!("not a number: {:?}", p.trim()))?;
        }
        Ok(Rect::new(v[0], v[1], v[2], v[3]))
    }
}

/// Shortest decimal that parses back to the same value.
fn fmt_num(v: f64) -> String {
    let s = format!("{v}");
    if s == "-0" {
        "0".into()
    } else {
        s
    }
}

/// A loaded RGB+X sequence with per-frame ground truth.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub id: String,
    pub modality: Modality,
    pub rgb: Vec<Image>,
    pub x: Vec<Image>,
    pub boxes: Vec<Rect>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_with_comment() {
        let mut img = Image::new(3, 2);
        img.data.iter_mut().enumerate().for_each(|(i, v)| *v = (i * 13) as u8);
        let bytes = img.to_ppm();
        assert_eq!(Image::from_ppm(&bytes).unwrap(), img);
        let mut commented = b"P6\n# made by hand\n3 2\n255\n".to_vec();
        commented.extend_from_slice(&img.data);
        assert_eq!(Image::from_ppm(&commented).unwrap(), img);
        assert!(Image::from_ppm(b"P3\n1 1\n255\n000").is_err());
        assert!(Image::from_ppm(b"P6\n2 2\n255\n\x00\x00").is_err());
    }

    #[test]
    fn box_lines() {
        assert_eq!(Rect::parse_line("10,20,30,40").unwrap(), Rect::new(10.0, 20.0, 30.0, 40.0));
        assert_eq!(Rect::parse_line(" 1.5, 2 ,3,4\r").unwrap(), Rect::new(1.5, 2.0, 3.0, 4.0));
        assert!(Rect::parse_line("1,2,3").is_err());
        assert!(Rect::parse_line("1,2,x,4").is_err());
        let r = Rect::new(0.1, 2.0, 33.25, 1e-3);
        assert_eq!(Rect::parse_line(&r.to_line()).unwrap(), r);
    }

    #[test]
    fn rect_iou() {
        let a = Rect::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&Rect::new(20.0, 0.0, 5.0, 5.0)), 0.0);
        assert!((a.iou(&Rect::new(5.0, 0.0, 10.0, 10.0)) - 50.0 / 150.0).abs() < 1e-12);
    }
}
