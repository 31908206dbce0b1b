//! Three-branch convolutional prediction head, box decoding and the
//! training objective.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn;
use crate::numerics::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// Initial score-branch output bias: `sigmoid(-2.19) ~= 0.1`.
pub const SCORE_BIAS_INIT: f64 = -2.19;
pub const FOCAL_ALPHA: f64 = 2.0;
pub const FOCAL_BETA: f64 = 4.0;
/// Minimum overlap used to size the Gaussian target radius.
pub const TARGET_MIN_OVERLAP: f64 = 0.7;

/// Normalized `(cx, cy, w, h)` box, as fractions of the search side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

fn check_box(b: &BBox, op: &'static str) -> Result<()> {
    if !(b.w > 0.0 && b.h > 0.0) || ![b.cx, b.cy, b.w, b.h].iter().all(|v| v.is_finite()) {
        return Err(Error::domain(op, format!("degenerate box {b:?}")));
    }
    Ok(())
}

/// Intersection, union and enclosing-box areas of two boxes, all taken
/// from corners so that identical boxes overlap exactly.
fn overlap(a: &BBox, b: &BBox) -> (f64, f64, f64) {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let ew = ax2.max(bx2) - ax1.min(bx1);
    let eh = ay2.max(by2) - ay1.min(by1);
    let inter = iw * ih;
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    (inter, union, ew * eh)
}

/// Plain IoU; 0 for degenerate boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if check_box(a, "iou").is_err() || check_box(b, "iou").is_err() {
        return 0.0;
    }
    let (inter, union, _) = overlap(a, b);
    inter / union
}

/// Generalized IoU in `[-1, 1]`.
pub fn giou(a: &BBox, b: &BBox) -> Result<f64> {
    check_box(a, "giou")?;
    check_box(b, "giou")?;
    let (inter, union, enclose) = overlap(a, b);
    Ok(inter / union - (enclose - union) / enclose)
}

pub fn giou_loss(a: &BBox, b: &BBox) -> Result<f64> {
    giou(a, b).map(|v| 1.0 - v)
}

/// `conv3x3 -> gelu -> conv3x3 -> conv1x1 -> sigmoid`.
#[derive(Debug, Clone)]
pub struct Branch {
    pub convs: [(ParamId, ParamId); 3],
}

impl Branch {
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        hidden: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut conv = |i: usize, ci: usize, co: usize, k: usize| -> Result<(ParamId, ParamId)> {
            Ok((
                nn::weight(store, &format!("{name}.conv{i}.weight"), &[co, ci, k, k], rng)?,
                nn::constant(store, &format!("{name}.conv{i}.bias"), &[co], 0.0)?,
            ))
        };
        Ok(Branch {
            convs: [conv(1, c_in, hidden, 3)?, conv(2, hidden, hidden, 3)?, conv(3, hidden, c_out, 1)?],
        })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let apply = |g: &mut Graph<T>, x: Var, (w, b): (ParamId, ParamId)| -> Result<Var> {
            let w = g.param(store, w);
            let b = g.param(store, b);
            g.conv2d(x, w, b)
        };
        let h = apply(g, x, self.convs[0])?;
        let h = g.gelu(h)?;
        let h = apply(g, h, self.convs[1])?;
        let h = apply(g, h, self.convs[2])?;
        g.sigmoid(h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadConfig {
    pub channels: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
pub struct Head {
    pub cfg: HeadConfig,
    pub score: Branch,
    pub size: Branch,
    pub offset: Branch,
}

/// Head outputs: `score [1,h,w]`, `size [2,h,w]`, `offset [2,h,w]`.
#[derive(Debug, Clone, Copy)]
pub struct ScoreMaps {
    pub score: Var,
    pub size: Var,
    pub offset: Var,
    pub grid: (usize, usize),
}

impl Head {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: HeadConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let score = Branch::new(store, "head.score", cfg.channels, cfg.hidden, 1, rng)?;
        store
            .get_mut(score.convs[2].1)
            .value
            .fill(T::from_f64_lossy(SCORE_BIAS_INIT));
        Ok(Head {
            cfg,
            score,
            size: Branch::new(store, "head.size", cfg.channels, cfg.hidden, 2, rng)?,
            offset: Branch::new(store, "head.offset", cfg.channels, cfg.hidden, 2, rng)?,
        })
    }

    /// Maps fused search tokens `[L, C]` on grid `(h, w)` to score maps.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        fused: Var,
        grid: (usize, usize),
    ) -> Result<ScoreMaps> {
        let (l, c) = (g.shape(fused)[0], g.shape(fused)[1]);
        if l != grid.0 * grid.1 {
            return Err(Error::shape(
                "head_forward",
                format!("{l} tokens do not fill a {}x{} grid", grid.0, grid.1),
            ));
        }
        let t = g.transpose(fused)?;
        let x = g.reshape(t, &[c, grid.0, grid.1])?;
        Ok(ScoreMaps {
            score: self.score.forward(g, store, x)?,
            size: self.size.forward(g, store, x)?,
            offset: self.offset.forward(g, store, x)?,
            grid,
        })
    }
}

/// Box at the score peak (row-major first on ties) and the peak score.
pub fn decode_box<T: Scalar>(score: &Tensor<T>, size: &Tensor<T>, offset: &Tensor<T>) -> (BBox, f64) {
    let (h, w) = (score.shape()[1], score.shape()[2]);
    let mut best = 0;
    for (i, &v) in score.data().iter().enumerate() {
        if v > score.data()[best] {
            best = i;
        }
    }
    let (i, j) = (best / w, best % w);
    let hw = h * w;
    let f = |t: &Tensor<T>, ch: usize| t.data()[ch * hw + best].to_f64_lossy();
    (
        BBox {
            cx: (j as f64 + f(offset, 0)) / w as f64,
            cy: (i as f64 + f(offset, 1)) / h as f64,
            w: f(size, 0),
            h: f(size, 1),
        },
        score.data()[best].to_f64_lossy(),
    )
}

/// Grid cell containing the box center.
pub fn center_cell(gt: &BBox, grid: (usize, usize)) -> (usize, usize) {
    let cell = |v: f64, n: usize| ((v * n as f64).floor().max(0.0) as usize).min(n - 1);
    (cell(gt.cy, grid.0), cell(gt.cx, grid.1))
}

/// Radius (in cells) such that a box shifted by it still overlaps the
/// original by at least `min_overlap`.
pub fn gaussian_radius(height: f64, width: f64, min_overlap: f64) -> f64 {
    let (a1, b1) = (1.0, height + width);
    let c1 = width * height * (1.0 - min_overlap) / (1.0 + min_overlap);
    let r1 = (b1 + (b1 * b1 - 4.0 * a1 * c1).sqrt()) / 2.0;
    let (a2, b2) = (4.0, 2.0 * (height + width));
    let c2 = (1.0 - min_overlap) * width * height;
    let r2 = (b2 + (b2 * b2 - 4.0 * a2 * c2).sqrt()) / 2.0;
    let (a3, b3) = (4.0 * min_overlap, -2.0 * min_overlap * (height + width));
    let c3 = (min_overlap - 1.0) * width * height;
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / 2.0;
    r1.min(r2).min(r3)
}

/// Gaussian classification target (exactly 1 at the center cell) and the
/// row-major index of that cell, the only place box regression applies.
pub fn make_target_map<T: Scalar>(gt: &BBox, grid: (usize, usize)) -> Result<(Tensor<T>, usize)> {
    check_box(gt, "make_target_map")?;
    let (h, w) = grid;
    let (ci, cj) = center_cell(gt, grid);
    let radius = gaussian_radius(gt.h * h as f64, gt.w * w as f64, TARGET_MIN_OVERLAP)
        .floor()
        .max(0.0);
    let sigma = (2.0 * radius + 1.0) / 6.0;
    let mut data = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let d2 = (i as f64 - ci as f64).powi(2) + (j as f64 - cj as f64).powi(2);
            data.push(T::from_f64_lossy((-d2 / (2.0 * sigma * sigma)).exp()));
        }
    }
    let center = ci * w + cj;
    data[center] = T::one();
    Ok((Tensor::from_vec(&[1, h, w], data)?, center))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub balance: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 1.0,
            l1: 5.0,
            giou: 2.0,
            balance: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let all = [self.cls, self.l1, self.giou, self.balance];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err("loss weights must be finite and nonnegative".into());
        }
        if all.iter().all(|&v| v == 0.0) {
            return Err("at least one loss weight must be positive".into());
        }
        Ok(())
    }
}

/// Unweighted loss components of one prediction.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub balance: f64,
    pub total: f64,
}

/// Predicted normalized box at cell `index` as four `[1,1]` vars.
fn box_at<T: Scalar>(g: &mut Graph<T>, maps: &ScoreMaps, index: usize) -> Result<[Var; 4]> {
    let (h, w) = maps.grid;
    let hw = h * w;
    let size = g.reshape(maps.size, &[2, hw])?;
    let size = g.slice_cols(size, index, 1)?;
    let off = g.reshape(maps.offset, &[2, hw])?;
    let off = g.slice_cols(off, index, 1)?;
    let (i, j) = (index / w, index % w);
    let ox = g.slice_rows(off, 0, 1)?;
    let cx = g.add_const(ox, T::from_usize(j).unwrap())?;
    let cx = g.scale(cx, T::one() / T::from_usize(w).unwrap())?;
    let oy = g.slice_rows(off, 1, 1)?;
    let cy = g.add_const(oy, T::from_usize(i).unwrap())?;
    let cy = g.scale(cy, T::one() / T::from_usize(h).unwrap())?;
    let bw = g.slice_rows(size, 0, 1)?;
    let bh = g.slice_rows(size, 1, 1)?;
    Ok([cx, cy, bw, bh])
}

/// Differentiable `1 - GIoU` between a predicted box and a constant one.
fn giou_loss_graph<T: Scalar>(g: &mut Graph<T>, pred: [Var; 4], gt: &BBox) -> Result<Var> {
    let half = T::from_f64_lossy(0.5);
    let [cx, cy, w, h] = pred;
    let hw = g.scale(w, half)?;
    let hh = g.scale(h, half)?;
    let px1 = g.sub(cx, hw)?;
    let px2 = g.add(cx, hw)?;
    let py1 = g.sub(cy, hh)?;
    let py2 = g.add(cy, hh)?;
    let (gx1, gy1, gx2, gy2) = gt.corners();
    let c = |g: &mut Graph<T>, v: f64| g.constant(Tensor::from_vec(&[1, 1], vec![T::from_f64_lossy(v)]).unwrap());
    let (gx1, gy1, gx2, gy2) = (c(g, gx1), c(g, gy1), c(g, gx2), c(g, gy2));

    let ix1 = g.maximum(px1, gx1)?;
    let ix2 = g.minimum(px2, gx2)?;
    let iy1 = g.maximum(py1, gy1)?;
    let iy2 = g.minimum(py2, gy2)?;
    let iw = g.sub(ix2, ix1)?;
    let iw = g.relu(iw)?;
    let ih = g.sub(iy2, iy1)?;
    let ih = g.relu(ih)?;
    let inter = g.mul(iw, ih)?;

    let area_p = g.mul(w, h)?;
    let area_g = T::from_f64_lossy(gt.area());
    let sum = g.add_const(area_p, area_g)?;
    let union = g.sub(sum, inter)?;

    let ex1 = g.minimum(px1, gx1)?;
    let ex2 = g.maximum(px2, gx2)?;
    let ey1 = g.minimum(py1, gy1)?;
    let ey2 = g.maximum(py2, gy2)?;
    let ew = g.sub(ex2, ex1)?;
    let eh = g.sub(ey2, ey1)?;
    let enclose = g.mul(ew, eh)?;

    let iou = g.div(inter, union)?;
    let gap = g.sub(enclose, union)?;
    let pen = g.div(gap, enclose)?;
    let giou = g.sub(iou, pen)?;
    let neg = g.scale(giou, -T::one())?;
    g.add_const(neg, T::one())
}

/// Weighted training objective for one prediction.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    maps: &ScoreMaps,
    gt: &BBox,
    balance: Option<Var>,
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let (target, center) = make_target_map::<T>(gt, maps.grid)?;
    let cls = g.focal_loss(maps.score, &target, FOCAL_ALPHA, FOCAL_BETA)?;

    let pred = box_at(g, maps, center)?;
    let stacked = g.concat_rows(&pred)?;
    let gt_vec = g.constant(Tensor::from_vec(
        &[4, 1],
        [gt.cx, gt.cy, gt.w, gt.h].iter().map(|&v| T::from_f64_lossy(v)).collect(),
    )?);
    let diff = g.sub(stacked, gt_vec)?;
    let abs = g.abs(diff)?;
    let l1 = g.mean(abs)?;
    let giou = giou_loss_graph(g, pred, gt)?;
    let giou = g.reshape(giou, &[1])?;

    let mut terms = vec![(cls, weights.cls), (l1, weights.l1), (giou, weights.giou)];
    if let Some(b) = balance {
        terms.push((b, weights.balance));
    }
    let mut total: Option<Var> = None;
    for &(v, w) in &terms {
        let v = g.reshape(v, &[1])?;
        let s = g.scale(v, T::from_f64_lossy(w))?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    let total = total.expect("at least three terms");
    let val = |g: &Graph<T>, v: Var| g.value(v).data()[0].to_f64_lossy();
    let breakdown = LossBreakdown {
        cls: val(g, cls),
        l1: val(g, l1),
        giou: val(g, giou),
        balance: balance.map(|b| val(g, b)).unwrap_or(0.0),
        total: val(g, total),
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn giou_identical_and_disjoint() {
        let a = BBox::new(0.25, 0.25, 0.5, 0.5);
        assert_eq!(giou(&a, &a).unwrap(), 1.0);
        let b = BBox::new(0.75, 0.75, 0.5, 0.5);
        // touching corners: IoU 0, union 0.5, enclosure 1
        assert!((giou(&a, &b).unwrap() + 0.5).abs() < 1e-12);
        assert!(matches!(giou(&a, &BBox::new(0.5, 0.5, 0.0, 0.1)), Err(Error::Domain { .. })));
    }

    #[test]
    fn decode_by_hand() {
        let mut score = Tensor::<f64>::zeros(&[1, 4, 4]);
        score.set(&[0, 1, 2], 0.9);
        let offset = Tensor::full(&[2, 4, 4], 0.5);
        let size = Tensor::full(&[2, 4, 4], 0.25);
        let (b, s) = decode_box(&score, &size, &offset);
        assert_eq!((b.cx, b.cy, b.w, b.h, s), (0.625, 0.375, 0.25, 0.25, 0.9));

        let flat = Tensor::<f64>::full(&[1, 4, 4], 0.3);
        let (b, _) = decode_box(&flat, &size, &offset);
        assert_eq!((b.cx, b.cy), (0.125, 0.125));
    }

    #[test]
    fn target_map_shape() {
        let gt = BBox::new(0.6, 0.4, 0.5, 0.5);
        let (t, center) = make_target_map::<f64>(&gt, (8, 8)).unwrap();
        assert_eq!(center, 3 * 8 + 4);
        assert_eq!(t.data()[center], 1.0);
        assert_eq!(t.data().iter().filter(|&&v| v == 1.0).count(), 1);
        assert!(t.data()[center + 1] < 1.0 && t.data()[center + 2] < t.data()[center + 1]);
        assert!(make_target_map::<f64>(&BBox::new(0.5, 0.5, 0.0, 0.2), (4, 4)).is_err());
    }

    #[test]
    fn loss_weight_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let zero = LossWeights { cls: 0.0, l1: 0.0, giou: 0.0, balance: 0.0 };
        assert!(zero.validate().is_err());
    }
}
