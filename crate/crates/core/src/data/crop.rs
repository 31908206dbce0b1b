//! Square context crops around a box, shared by training and tracking.

use rand::Rng;

use super::{Image, Rect};
use crate::head::BBox;
use crate::numerics::{Scalar, Tensor};

pub const TEMPLATE_FACTOR: f64 = 2.0;
pub const SEARCH_FACTOR: f64 = 4.0;
/// Jitter bounds: center shift as a fraction of the crop side, and side scale.
pub const JITTER_SHIFT: f64 = 0.08;
pub const JITTER_SCALE: (f64, f64) = (0.9, 1.1);

/// Maps crop pixel `(u, v)` to image point `(x0 + u * scale, y0 + v * scale)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropTransform {
    pub x0: f64,
    pub y0: f64,
    /// Image pixels per crop pixel.
    pub scale: f64,
    pub out_side: usize,
}

/// Random crop perturbation applied during training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    pub dx: f64,
    pub dy: f64,
    pub scale: f64,
}

impl Jitter {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Jitter {
            dx: rng.random_range(-JITTER_SHIFT..=JITTER_SHIFT),
            dy: rng.random_range(-JITTER_SHIFT..=JITTER_SHIFT),
            scale: rng.random_range(JITTER_SCALE.0..=JITTER_SCALE.1),
        }
    }
}

impl CropTransform {
    /// Square of side `factor * sqrt(w * h)` around the box center.
    pub fn around(rect: &Rect, factor: f64, out_side: usize, jitter: Option<Jitter>) -> Self {
        let j = jitter.unwrap_or(Jitter {
            dx: 0.0,
            dy: 0.0,
            scale: 1.0,
        });
        let side = factor * (rect.w * rect.h).max(1.0).sqrt() * j.scale;
        let (cx, cy) = rect.center();
        let (cx, cy) = (cx + j.dx * side, cy + j.dy * side);
        CropTransform {
            x0: cx - side / 2.0,
            y0: cy - side / 2.0,
            scale: side / out_side as f64,
            out_side,
        }
    }

    pub fn side(&self) -> f64 {
        self.scale * self.out_side as f64
    }

    /// Image box to normalized crop coordinates.
    pub fn to_crop(&self, r: &Rect) -> BBox {
        let (cx, cy) = r.center();
        let side = self.side();
        BBox {
            cx: (cx - self.x0) / side,
            cy: (cy - self.y0) / side,
            w: r.w / side,
            h: r.h / side,
        }
    }

    /// Normalized crop box back to image pixels.
    pub fn to_image(&self, b: &BBox) -> Rect {
        let side = self.side();
        Rect::from_center(self.x0 + b.cx * side, self.y0 + b.cy * side, b.w * side, b.h * side)
    }

    /// Bilinear resample into `[3, out, out]` with values in `[0, 1]`;
    /// samples falling outside the image take the channel mean.
    pub fn apply<T: Scalar>(&self, img: &Image) -> Tensor<T> {
        let n = self.out_side;
        let mean = img.channel_means();
        let (w, h) = (img.width as isize, img.height as isize);
        let mut out = vec![T::zero(); 3 * n * n];
        let tap = |x: isize, y: isize, c: usize| -> f64 {
            if x < 0 || y < 0 || x >= w || y >= h {
                mean[c]
            } else {
                img.data[((y * w + x) * 3) as usize + c] as f64 / 255.0
            }
        };
        for v in 0..n {
            let sy = self.y0 + (v as f64 + 0.5) * self.scale - 0.5;
            let y0 = sy.floor();
            let fy = sy - y0;
            for u in 0..n {
                let sx = self.x0 + (u as f64 + 0.5) * self.scale - 0.5;
                let x0 = sx.floor();
                let fx = sx - x0;
                let (xi, yi) = (x0 as isize, y0 as isize);
                for c in 0..3 {
                    let top = tap(xi, yi, c) * (1.0 - fx) + tap(xi + 1, yi, c) * fx;
                    let bot = tap(xi, yi + 1, c) * (1.0 - fx) + tap(xi + 1, yi + 1, c) * fx;
                    out[(c * n + v) * n + u] = T::from_f64_lossy(top * (1.0 - fy) + bot * fy);
                }
            }
        }
        Tensor::from_vec(&[3, n, n], out).expect("crop shape is consistent")
    }
}

/// Crops both modality frames with one shared transform.
pub fn crop_pair<T: Scalar>(
    rgb: &Image,
    x: &Image,
    rect: &Rect,
    factor: f64,
    out_side: usize,
    jitter: Option<Jitter>,
) -> (Tensor<T>, Tensor<T>, CropTransform) {
    let t = CropTransform::around(rect, factor, out_side, jitter);
    (t.apply(rgb), t.apply(x), t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centered_target_fills_the_middle_half() {
        let r = Rect::new(40.0, 40.0, 20.0, 20.0);
        let t = CropTransform::around(&r, 2.0, 32, None);
        let b = t.to_crop(&r);
        assert!((b.cx - 0.5).abs() < 1e-12 && (b.cy - 0.5).abs() < 1e-12);
        assert!((b.w - 0.5).abs() < 1e-12 && (b.h - 0.5).abs() < 1e-12);
    }

    #[test]
    fn round_trip_under_jitter() {
        let r = Rect::new(13.2, 71.9, 17.5, 22.25);
        let t = CropTransform::around(
            &r,
            4.0,
            64,
            Some(Jitter {
                dx: 0.07,
                dy: -0.05,
                scale: 1.08,
            }),
        );
        let back = t.to_image(&t.to_crop(&r));
        for (a, b) in [(back.x, r.x), (back.y, r.y), (back.w, r.w), (back.h, r.h)] {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_crop_reproduces_pixels_and_pads_with_mean() {
        let mut img = Image::new(8, 8);
        img.data.iter_mut().enumerate().for_each(|(i, v)| *v = (i % 251) as u8);
        let t = CropTransform {
            x0: 0.0,
            y0: 0.0,
            scale: 1.0,
            out_side: 8,
        };
        let c = t.apply::<f64>(&img);
        assert!((c.get(&[1, 2, 3]) - img.pixel(3, 2)[1] as f64 / 255.0).abs() < 1e-12);

        let shifted = CropTransform { x0: -20.0, ..t };
        let c = shifted.apply::<f64>(&img);
        assert!((c.get(&[0, 0, 0]) - img.channel_means()[0]).abs() < 1e-12);
    }
}
