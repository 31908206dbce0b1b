use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{project, Check, OP_TOLERANCE};
use crate::head::{center_cell, decode_box, giou, make_target_map, total_loss, BBox, Head, HeadConfig, LossWeights, FOCAL_ALPHA, FOCAL_BETA};
use crate::numerics::gradcheck::{grad_check, grad_check_params, DEFAULT_STEP};
use crate::numerics::{Graph, ParamStore, Tensor};
use crate::Result;

/// Focal loss allowed for a prediction equal to the indicator map.
pub const PERFECT_FOCAL: f64 = 1e-6;

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    BBox::new(
        rng.random_range(0.05..0.95),
        rng.random_range(0.05..0.95),
        rng.random_range(0.05..0.8),
        rng.random_range(0.05..0.8),
    )
}

fn giou_identities() -> Result<Check> {
    let rng = &mut ChaCha8Rng::seed_from_u64(11);
    let (mut self_ok, mut worst_sym) = (true, 0.0f64);
    for _ in 0..1000 {
        let (a, b) = (random_box(rng), random_box(rng));
        self_ok &= giou(&a, &a)? == 1.0;
        worst_sym = worst_sym.max((giou(&a, &b)? - giou(&b, &a)?).abs());
    }
    Ok(Check::new(
        "giou identity and symmetry",
        self_ok && worst_sym == 0.0,
        format!("GIoU(b,b)=1 for all: {self_ok}, max asymmetry {worst_sym:.1e}"),
    ))
}

/// Writes a box into head maps at its center cell, offset at the cell center.
fn encode(b: &BBox, grid: (usize, usize)) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let (h, w) = grid;
    let (i, j) = center_cell(b, grid);
    let cell = i * w + j;
    let mut score = Tensor::zeros(&[1, h, w]);
    score.data_mut()[cell] = 1.0;
    let mut size = Tensor::zeros(&[2, h, w]);
    size.data_mut()[cell] = b.w;
    size.data_mut()[h * w + cell] = b.h;
    let offset = Tensor::full(&[2, h, w], 0.5);
    (score, size, offset)
}

fn round_trip() -> Result<Check> {
    let rng = &mut ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    let mut bound_ok = true;
    for _ in 0..1000 {
        let n = rng.random_range(2..=16);
        let grid = (n, n);
        // snap the center to a cell center
        let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
        let b = BBox::new(
            (j as f64 + 0.5) / n as f64,
            (i as f64 + 0.5) / n as f64,
            rng.random_range(0.05..1.0),
            rng.random_range(0.05..1.0),
        );
        let (s, z, o) = encode(&b, grid);
        let (d, _) = decode_box(&s, &z, &o);
        let err = (d.cx - b.cx).abs().max((d.cy - b.cy).abs());
        let size_err = (d.w - b.w).abs().max((d.h - b.h).abs());
        bound_ok &= err <= 0.5 / n as f64 && size_err == 0.0;
        worst = worst.max(err * n as f64);
    }
    Ok(Check::new(
        "decode inverts encode on grid-snapped boxes",
        bound_ok,
        format!("max center error {worst:.3e} cells over 1000 boxes (bound 0.5 cell)"),
    ))
}

fn perfect_focal() -> Result<Check> {
    let rng = &mut ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let grid = (4, 4);
        let b = random_box(rng);
        let (target, center) = make_target_map::<f64>(&b, grid)?;
        let mut perfect = Tensor::zeros(target.shape());
        perfect.data_mut()[center] = 1.0;
        let mut g = Graph::new();
        let p = g.constant(perfect);
        let l = g.focal_loss(p, &target, FOCAL_ALPHA, FOCAL_BETA)?;
        worst = worst.max(g.value(l).data()[0].abs());
    }
    Ok(Check::new(
        "focal loss of the indicator prediction",
        worst < PERFECT_FOCAL,
        format!("max {worst:.3e} (tol {PERFECT_FOCAL:.0e})"),
    ))
}

fn head(seed: u64) -> Result<(Head, ParamStore<f64>)> {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let head = Head::new(&mut store, HeadConfig { channels: 4, hidden: 4 }, rng)?;
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    Ok((head, store))
}

fn head_forward_grad() -> Result<f64> {
    let (head, mut store) = head(14)?;
    let rng = &mut ChaCha8Rng::seed_from_u64(15);
    let grid = (3, 3);
    let x = Tensor::uniform(&[9, 4], -1.0, 1.0, rng);
    let eval = |g: &mut Graph<f64>, s: &ParamStore<f64>, v| -> Result<_> {
        let m = head.forward(g, s, v, grid)?;
        let a = project(g, m.score, 1)?;
        let b = project(g, m.size, 2)?;
        let c = project(g, m.offset, 3)?;
        let ab = g.add(a, b)?;
        g.add(ab, c)
    };
    let p = grad_check_params(
        &mut store,
        |g, s| {
            let v = g.constant(x.clone());
            eval(g, s, v)
        },
        DEFAULT_STEP,
        Some(8),
    )?;
    let i = grad_check(std::slice::from_ref(&x), |g, v| eval(g, &store, v[0]), DEFAULT_STEP)?;
    Ok(p.max_rel_err.max(i.max_rel_err))
}

fn total_loss_grad() -> Result<f64> {
    let (head, mut store) = head(16)?;
    let rng = &mut ChaCha8Rng::seed_from_u64(17);
    let grid = (4, 4);
    let x = Tensor::uniform(&[16, 4], -1.0, 1.0, rng);
    let bal = Tensor::from_vec(&[1], vec![1.3])?;
    let gt = BBox::new(0.41, 0.57, 0.3, 0.22);
    let weights = LossWeights::default();
    let p = grad_check_params(
        &mut store,
        |g, s| {
            let v = g.constant(x.clone());
            let b = g.constant(bal.clone());
            let m = head.forward(g, s, v, grid)?;
            Ok(total_loss(g, &m, &gt, Some(b), &weights)?.0)
        },
        DEFAULT_STEP,
        Some(8),
    )?;
    let i = grad_check(
        &[x.clone(), bal.clone()],
        |g, v| {
            let m = head.forward(g, &store, v[0], grid)?;
            Ok(total_loss(g, &m, &gt, Some(v[1]), &weights)?.0)
        },
        DEFAULT_STEP,
    )?;
    Ok(p.max_rel_err.max(i.max_rel_err))
}

pub fn head_suite() -> Vec<Check> {
    vec![
        Check::from_result("giou identities", giou_identities()),
        Check::from_result("decode round trip", round_trip()),
        Check::from_result("perfect focal", perfect_focal()),
        Check::from_result(
            "grad head forward",
            head_forward_grad().map(|e| Check::within("grad head forward", e, OP_TOLERANCE)),
        ),
        Check::from_result(
            "grad total loss",
            total_loss_grad().map(|e| Check::within("grad total loss", e, OP_TOLERANCE)),
        ),
    ]
}
