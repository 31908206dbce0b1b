use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{project, Check, OP_TOLERANCE};
use crate::embed::Modality;
use crate::fusion::{fusion_weights, load_balance_loss, Fusion, FusionConfig, FusionMode, LAMBDA_RGB, LAMBDA_X, NUM_EXPERTS, TOP_K};
use crate::numerics::gradcheck::{grad_check, grad_check_params, DEFAULT_STEP};
use crate::numerics::{Graph, ParamStore, Tensor};
use crate::Result;

pub const GATE_TOLERANCE: f64 = 1e-6;

fn fusion(mode: FusionMode, c: usize, seed: u64, spread: f64) -> Result<(Fusion, ParamStore<f64>)> {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = FusionConfig {
        channels: c,
        bottleneck: 2,
        top_k: TOP_K,
        mode,
        true_modality_experts: false,
    };
    let f = Fusion::new(&mut store, cfg, rng)?;
    for p in store.iter_mut() {
        p.value = p.value.map(|v| v * spread);
    }
    Ok((f, store))
}

/// Rows of `gates` violating "exactly K nonzero, summing to one".
fn bad_gate_rows(gates: &Tensor<f64>) -> usize {
    gates
        .data()
        .chunks_exact(NUM_EXPERTS)
        .filter(|row| {
            let nz = row.iter().filter(|&&v| v != 0.0).count();
            let sum: f64 = row.iter().sum();
            nz != TOP_K || (sum - 1.0).abs() > GATE_TOLERANCE
        })
        .count()
}

fn routing_contract() -> Result<Check> {
    let c = 8;
    let (f, store) = fusion(FusionMode::Moe, c, 1, 20.0)?;
    let rng = &mut ChaCha8Rng::seed_from_u64(2);
    let mut bad = 0;
    let mut tokens = 0;
    for batch in 0..10 {
        let s = Tensor::<f64>::randn(&[1000, 2 * c], 1.0, rng);
        for train in [false, true] {
            let mut g = Graph::new();
            let v = g.constant(s.clone());
            let d = f.route(&mut g, &store, v, train, batch)?;
            bad += bad_gate_rows(g.value(d.gates));
        }
        tokens += 1000;
    }
    Ok(Check::new(
        "routing keeps exactly two gates summing to one",
        bad == 0,
        format!("{bad} bad rows over {tokens} tokens in eval and train mode"),
    ))
}

fn eval_determinism() -> Result<Check> {
    let c = 8;
    let (f, store) = fusion(FusionMode::Moe, c, 3, 20.0)?;
    let rng = &mut ChaCha8Rng::seed_from_u64(4);
    let a = Tensor::<f64>::randn(&[16, c], 1.0, rng);
    let b = Tensor::<f64>::randn(&[16, c], 1.0, rng);
    let run = |seed: u64| -> Result<Tensor<f64>> {
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let out = f.forward(&mut g, &store, va, vb, Modality::D, false, seed)?;
        Ok(g.value(out.fused).clone())
    };
    let same = run(1)?.bit_eq(&run(2)?);
    Ok(Check::new("eval-mode fusion is deterministic", same, "two runs with different noise seeds"))
}

fn balance_bounds() -> Result<Check> {
    let rng = &mut ChaCha8Rng::seed_from_u64(5);
    let value = |probs: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let p = g.constant(probs);
        let l = load_balance_loss(&mut g, &[p])?;
        Ok(g.value(l).data()[0])
    };
    let mut lowest = f64::INFINITY;
    for _ in 0..200 {
        let rows = rng.random_range(1..=64);
        let logits = Tensor::<f64>::randn(&[rows, NUM_EXPERTS], 3.0, rng);
        let mut g = Graph::new();
        let v = g.constant(logits);
        let p = g.softmax_rows(v)?;
        lowest = lowest.min(value(g.value(p).clone())?);
    }
    let uniform = value(Tensor::full(&[10, NUM_EXPERTS], 1.0 / NUM_EXPERTS as f64))?;
    let mut two = vec![0.0; 10 * NUM_EXPERTS];
    for row in two.chunks_exact_mut(NUM_EXPERTS) {
        row[0] = 0.5;
        row[2] = 0.5;
    }
    let two = value(Tensor::from_vec(&[10, NUM_EXPERTS], two)?)?;
    let ok = lowest >= 1.0 - GATE_TOLERANCE && (uniform - 1.0).abs() <= GATE_TOLERANCE && (two - 2.0).abs() <= GATE_TOLERANCE;
    Ok(Check::new(
        "load-balance loss bounds",
        ok,
        format!("min over random routing {lowest:.6}, uniform {uniform:.9}, two experts {two:.9}"),
    ))
}

fn closed_forms() -> Result<Check> {
    let rng = &mut ChaCha8Rng::seed_from_u64(6);
    let (l, c) = (12, 8);
    let e = Tensor::<f64>::randn(&[l, c], 2.0, rng);
    let gate = Tensor::<f64>::uniform(&[l, 1], 0.0, 1.0, rng);
    let mut g = Graph::new();
    let (ev, gv) = (g.constant(e.clone()), g.constant(gate.clone()));
    let f = fusion_weights(&mut g, gv, ev)?;
    let zero = g.constant(Tensor::zeros(&[l, 1]));
    let f0 = fusion_weights(&mut g, zero, ev)?;
    let mut worst: f64 = 0.0;
    let mut inside = true;
    for t in 0..l {
        let gt = gate.data()[t];
        let oracle = (0..c)
            .map(|j| 1.0 / (1.0 + (-(gt * e.data()[t * c + j])).exp()))
            .sum::<f64>()
            / c as f64;
        let got = g.value(f).data()[t];
        worst = worst.max((got - oracle).abs());
        inside &= got > 0.0 && got < 1.0;
        worst = worst.max((g.value(f0).data()[t] - 0.5).abs());
    }

    let (fu, store) = fusion(FusionMode::Moe, c, 7, 20.0)?;
    let a = Tensor::<f64>::randn(&[l, c], 1.0, rng);
    let b = Tensor::<f64>::randn(&[l, c], 1.0, rng);
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = fu.forward(&mut g, &store, va, vb, Modality::T, false, 0)?;
    let (fr, fx) = (g.value(out.f_rgb.unwrap()).clone(), g.value(out.f_x.unwrap()).clone());
    for t in 0..l {
        inside &= fr.data()[t] > 0.0 && fr.data()[t] < 1.0 && fx.data()[t] > 0.0 && fx.data()[t] < 1.0;
        for j in 0..c {
            let oracle = 0.5 * fr.data()[t] * a.data()[t * c + j] + 0.5 * fx.data()[t] * b.data()[t * c + j];
            worst = worst.max((g.value(out.fused).data()[t * c + j] - oracle).abs());
        }
    }
    let ok = worst <= GATE_TOLERANCE && inside && LAMBDA_RGB == 0.5 && LAMBDA_X == 0.5;
    Ok(Check::new(
        "fusion weights closed forms",
        ok,
        format!("max abs diff {worst:.3e}, F strictly inside (0,1): {inside}, lambdas {LAMBDA_RGB}/{LAMBDA_X}"),
    ))
}

fn fusion_grad(mode: FusionMode, train: bool, seed: u64) -> Result<f64> {
    let c = 6;
    let (f, mut store) = fusion(mode, c, seed, 5.0)?;
    let rng = &mut ChaCha8Rng::seed_from_u64(seed + 100);
    let a = Tensor::<f64>::randn(&[5, c], 1.0, rng);
    let b = Tensor::<f64>::randn(&[5, c], 1.0, rng);
    let params = grad_check_params(
        &mut store,
        |g, s| {
            let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
            let out = f.forward(g, s, va, vb, Modality::E, train, 9)?;
            let mut total = project(g, out.fused, 1)?;
            if let Some(bal) = out.balance {
                total = g.add(total, bal)?;
            }
            Ok(total)
        },
        DEFAULT_STEP,
        None,
    )?;
    let inputs = grad_check(
        &[a.clone(), b.clone()],
        |g, v| {
            let out = f.forward(g, &store, v[0], v[1], Modality::E, train, 9)?;
            let mut total = project(g, out.fused, 1)?;
            if let Some(bal) = out.balance {
                total = g.add(total, bal)?;
            }
            Ok(total)
        },
        DEFAULT_STEP,
    )?;
    Ok(params.max_rel_err.max(inputs.max_rel_err))
}

pub fn fusion_suite() -> Vec<Check> {
    let mut out = vec![
        Check::from_result("routing contract", routing_contract()),
        Check::from_result("eval determinism", eval_determinism()),
        Check::from_result("load-balance bounds", balance_bounds()),
        Check::from_result("closed forms", closed_forms()),
    ];
    for (label, mode, train) in [
        ("moe eval", FusionMode::Moe, false),
        ("moe train", FusionMode::Moe, true),
        ("uniform", FusionMode::Uniform, false),
        ("baseline", FusionMode::Baseline, false),
    ] {
        let name = format!("grad fusion {label}");
        let r = fusion_grad(mode, train, 40).map(|e| Check::within(&name, e, OP_TOLERANCE));
        out.push(Check::from_result(&name, r));
    }
    out
}
