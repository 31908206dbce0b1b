use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{project, Check, OP_TOLERANCE};
use crate::numerics::gradcheck::{grad_check, DEFAULT_STEP};
use crate::numerics::{Graph, Tensor, Var};
use crate::Result;

type G = Graph<f64>;

struct Case {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    f: Box<dyn Fn(&mut G, &[Var]) -> Result<Var>>,
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..=16), rng.random_range(1..=16))
}

fn u(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, lo, hi, rng)
}

/// Values bounded away from zero (`|v| in [0.1, 1]`), for ops with a kink at 0.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let t = u(shape, 0.1, 1.0, rng);
    let signs = u(shape, -1.0, 1.0, rng);
    t.zip_map(&signs, |v, s| if s < 0.0 { -v } else { v }).unwrap()
}

macro_rules! case {
    ($name:expr, [$($inp:expr),*], |$g:ident, $v:ident| $body:expr) => {
        Case {
            name: $name,
            inputs: vec![$($inp),*],
            f: Box::new(move |$g: &mut G, $v: &[Var]| -> Result<Var> {
                let out = $body?;
                project($g, out, 7)
            }),
        }
    };
}

fn cases(seed: u64) -> Vec<Case> {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let (m, k) = dims(rng);
    let n = rng.random_range(1..=16);
    let (r, c) = dims(rng);
    let a = u(&[r, c], -1.0, 1.0, rng);
    let b = u(&[r, c], -1.0, 1.0, rng);
    let gap = away_from_zero(&[r, c], rng);
    let b_off = a.zip_map(&gap, |x, d| x + d).unwrap();
    let pos = u(&[r, c], 0.5, 2.0, rng);
    let mask: Vec<bool> = {
        let mut m: Vec<bool> = (0..r * c).map(|_| rng.random_bool(0.6)).collect();
        for row in m.chunks_exact_mut(c) {
            row[0] = true;
        }
        m
    };
    let (r2, _) = dims(rng);
    let heads = [1usize, 2, 4][rng.random_range(0..3)];
    let dh = rng.random_range(1..=4);
    let (lq, lk) = (rng.random_range(1..=12), rng.random_range(1..=12));
    let start = rng.random_range(0..r);
    let len = rng.random_range(1..=r - start);
    let cstart = rng.random_range(0..c);
    let clen = rng.random_range(1..=c - cstart);
    let (sl, sc, sd) = (rng.random_range(1..=8), rng.random_range(1..=6), rng.random_range(1..=4));

    vec![
        case!("matmul", [u(&[m, k], -1.0, 1.0, rng), u(&[k, n], -1.0, 1.0, rng)], |g, v| g.matmul(v[0], v[1])),
        case!("transpose", [a.clone()], |g, v| g.transpose(v[0])),
        case!("add", [a.clone(), b.clone()], |g, v| g.add(v[0], v[1])),
        case!("sub", [a.clone(), b.clone()], |g, v| g.sub(v[0], v[1])),
        case!("mul", [a.clone(), b.clone()], |g, v| g.mul(v[0], v[1])),
        case!("div", [a.clone(), pos.clone()], |g, v| g.div(v[0], v[1])),
        case!("minimum", [a.clone(), b_off.clone()], |g, v| g.minimum(v[0], v[1])),
        case!("maximum", [a.clone(), b_off.clone()], |g, v| g.maximum(v[0], v[1])),
        case!("add_bias", [a.clone(), u(&[c], -1.0, 1.0, rng)], |g, v| g.add_bias(v[0], v[1])),
        case!("mul_col", [a.clone(), u(&[r, 1], -1.0, 1.0, rng)], |g, v| g.mul_col(v[0], v[1])),
        case!("scale", [a.clone()], |g, v| g.scale(v[0], -1.7)),
        case!("add_const", [a.clone()], |g, v| g.add_const(v[0], 0.3)),
        case!("sigmoid", [u(&[r, c], -4.0, 4.0, rng)], |g, v| g.sigmoid(v[0])),
        case!("softplus", [u(&[r, c], -6.0, 6.0, rng)], |g, v| g.softplus(v[0])),
        case!("gelu", [u(&[r, c], -3.0, 3.0, rng)], |g, v| g.gelu(v[0])),
        case!("exp", [a.clone()], |g, v| g.exp(v[0])),
        case!("log", [pos.clone()], |g, v| g.log(v[0])),
        case!("abs", [gap.clone()], |g, v| g.abs(v[0])),
        case!("relu", [gap.clone()], |g, v| g.relu(v[0])),
        case!("square", [a.clone()], |g, v| g.square(v[0])),
        case!("softmax", [u(&[r, c], -3.0, 3.0, rng)], |g, v| g.softmax_rows(v[0])),
        case!("masked_softmax", [u(&[r, c], -3.0, 3.0, rng)], |g, v| g.masked_softmax_rows(v[0], &mask)),
        case!(
            "layer_norm",
            [u(&[r, c.max(2)], -2.0, 2.0, rng), u(&[c.max(2)], 0.5, 1.5, rng), u(&[c.max(2)], -0.5, 0.5, rng)],
            |g, v| g.layer_norm(v[0], v[1], v[2])
        ),
        case!("channel_gap", [a.clone()], |g, v| g.mean_cols(v[0])),
        case!("mean_rows", [a.clone()], |g, v| g.mean_rows(v[0])),
        case!("sum", [a.clone()], |g, v| g.sum(v[0])),
        case!("mean", [a.clone()], |g, v| g.mean(v[0])),
        case!("concat_rows", [a.clone(), u(&[r2, c], -1.0, 1.0, rng)], |g, v| g.concat_rows(&[v[0], v[1]])),
        case!("concat_cols", [a.clone(), b.clone()], |g, v| g.concat_cols(&[v[0], v[1]])),
        case!("slice_rows", [a.clone()], |g, v| g.slice_rows(v[0], start, len)),
        case!("slice_cols", [a.clone()], |g, v| g.slice_cols(v[0], cstart, clen)),
        case!("reshape", [a.clone()], |g, v| g.reshape(v[0], &[c, r])),
        case!(
            "attention",
            [
                u(&[lq, heads * dh], -1.0, 1.0, rng),
                u(&[lk, heads * dh], -1.0, 1.0, rng),
                u(&[lk, heads * dh], -1.0, 1.0, rng)
            ],
            |g, v| g.attention(v[0], v[1], v[2], heads)
        ),
        case!(
            "conv2d",
            [u(&[2, 5, 5], -1.0, 1.0, rng), u(&[3, 2, 3, 3], -0.5, 0.5, rng), u(&[3], -0.5, 0.5, rng)],
            |g, v| g.conv2d(v[0], v[1], v[2])
        ),
        case!(
            "conv2d_1x1",
            [u(&[3, 4, 4], -1.0, 1.0, rng), u(&[2, 3, 1, 1], -0.5, 0.5, rng), u(&[2], -0.5, 0.5, rng)],
            |g, v| g.conv2d(v[0], v[1], v[2])
        ),
        scan_case(sl, sc, sd, rng),
        focal_case(rng),
    ]
}

fn scan_case(l: usize, c: usize, d: usize, rng: &mut ChaCha8Rng) -> Case {
    Case {
        name: "selective_scan",
        inputs: vec![
            u(&[l, c], -1.0, 1.0, rng),
            u(&[l, c], 0.05, 1.0, rng),
            u(&[l, d], -1.0, 1.0, rng),
            u(&[l, d], -1.0, 1.0, rng),
            u(&[c, d], -2.0, -0.2, rng),
            u(&[c], -1.0, 1.0, rng),
            u(&[c, d], -1.0, 1.0, rng),
        ],
        f: Box::new(|g: &mut G, v: &[Var]| {
            let (y, h) = g.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5], v[6])?;
            let py = project(g, y, 3)?;
            let ph = project(g, h, 5)?;
            g.add(py, ph)
        }),
    }
}

fn focal_case(rng: &mut ChaCha8Rng) -> Case {
    let (h, w) = (4, 5);
    let mut target = Tensor::zeros(&[1, h, w]);
    for (i, v) in target.data_mut().iter_mut().enumerate() {
        *v = (-(i as f64 - 7.0).powi(2) / 6.0).exp();
    }
    target.data_mut()[7] = 1.0;
    Case {
        name: "focal_loss",
        inputs: vec![u(&[1, h, w], 0.05, 0.95, rng)],
        f: Box::new(move |g: &mut G, v: &[Var]| g.focal_loss(v[0], &target, 2.0, 4.0)),
    }
}

/// Gradient checks of every primitive on randomized shapes (float64).
pub fn numerics_suite() -> Vec<Check> {
    let mut out = Vec::new();
    for seed in 0..3u64 {
        for case in cases(seed) {
            let name = format!("grad {} (seed {seed})", case.name);
            let r = grad_check(&case.inputs, &case.f, DEFAULT_STEP)
                .map(|rep| Check::within(&name, rep.max_rel_err, OP_TOLERANCE));
            out.push(Check::from_result(&name, r));
        }
    }
    out
}
