use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{project, Check, OP_TOLERANCE};
use crate::embed::{assemble_joint, JointSeq, Modality, Role, TokenSeq};
use crate::numerics::gradcheck::{grad_check_params, DEFAULT_STEP};
use crate::numerics::{Graph, ParamStore, Tensor, Var};
use crate::temporal::{ssm_discretize, ssm_step, Ssm, TemporalConfig, TemporalMode, TemporalModule};
use crate::Result;

/// Tolerance of the scan against the explicit recurrence.
pub const SCAN_TOLERANCE: f64 = 1e-6;
pub const SPOT_TOLERANCE: f64 = 1e-12;

/// Largest deviation between the fused scan and a token-by-token loop.
fn scan_vs_loop(rng: &mut ChaCha8Rng) -> Result<f64> {
    let l = rng.random_range(1..=64);
    let c = rng.random_range(1..=32);
    let d = rng.random_range(1..=16);
    let x = Tensor::<f64>::uniform(&[l, c], -1.0, 1.0, rng);
    let delta = Tensor::uniform(&[l, c], 0.001, 1.0, rng);
    let b = Tensor::uniform(&[l, d], -1.0, 1.0, rng);
    let cm = Tensor::uniform(&[l, d], -1.0, 1.0, rng);
    let a = Tensor::uniform(&[c, d], -4.0, -0.01, rng);
    let dd = Tensor::uniform(&[c], -1.0, 1.0, rng);
    let h0 = Tensor::uniform(&[c, d], -1.0, 1.0, rng);

    let mut g = Graph::new();
    let vars: Vec<Var> = [&x, &delta, &b, &cm, &a, &dd, &h0]
        .iter()
        .map(|t| g.constant((*t).clone()))
        .collect();
    let (y, h) = g.selective_scan(vars[0], vars[1], vars[2], vars[3], vars[4], vars[5], vars[6])?;

    let mut state = h0.clone();
    let mut worst: f64 = 0.0;
    for t in 0..l {
        let (abar, bbar) = ssm_discretize(&a, &delta.rows(t, 1)?.reshape(&[c])?, &b.rows(t, 1)?.reshape(&[d])?)?;
        let (next, yt) = ssm_step(
            &state,
            &x.rows(t, 1)?.reshape(&[c])?,
            &abar,
            &bbar,
            &cm.rows(t, 1)?.reshape(&[d])?,
            &dd,
        )?;
        state = next;
        for ch in 0..c {
            worst = worst.max((yt.data()[ch] - g.value(y).data()[t * c + ch]).abs());
        }
    }
    for (p, q) in state.data().iter().zip(g.value(h).data()) {
        worst = worst.max((p - q).abs());
    }
    Ok(worst)
}

fn spot_values() -> Result<f64> {
    let one = |a: f64, dt: f64| -> Result<f64> {
        let (abar, _) = ssm_discretize(
            &Tensor::from_vec(&[1, 1], vec![a])?,
            &Tensor::from_vec(&[1], vec![dt])?,
            &Tensor::from_vec(&[1], vec![1.0])?,
        )?;
        Ok(abar.data()[0])
    };
    Ok((one(0.0, 0.3)? - 1.0).abs().max((one(-1.0, 2f64.ln())? - 0.5).abs()))
}

fn cfg(mode: TemporalMode, no_cross: bool, tie_bidir: bool, inject_first: bool) -> TemporalConfig {
    TemporalConfig {
        channels: 8,
        heads: 2,
        d_state: 4,
        mode,
        no_cross,
        tie_bidir,
        inject_first,
    }
}

/// Joint sequence with 2 template and `l` search tokens per stream.
fn joint(g: &mut Graph<f64>, rgb: &Tensor<f64>, x: &Tensor<f64>, z: &Tensor<f64>) -> Result<JointSeq> {
    let l = rgb.shape()[0];
    let seq = |g: &mut Graph<f64>, t: &Tensor<f64>, role, modality, grid| TokenSeq {
        tokens: g.constant(t.clone()),
        role,
        modality,
        grid,
    };
    let zr = seq(g, z, Role::Template, Modality::Rgb, (1, 2));
    let zx = seq(g, z, Role::Template, Modality::T, (1, 2));
    let sr = seq(g, rgb, Role::Search, Modality::Rgb, (1, l));
    let sx = seq(g, x, Role::Search, Modality::T, (1, l));
    assemble_joint(g, &zr, &zx, &sr, &sx, None)
}

fn module_grad(mode: TemporalMode, no_cross: bool, tie: bool, inject_first: bool, seed: u64) -> Result<f64> {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let c = cfg(mode, no_cross, tie, inject_first);
    let mut store = ParamStore::<f64>::new();
    let module = TemporalModule::new(&mut store, "t", c, rng)?;
    // move A_log, D and the step bias off their structured init
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let l = 5;
    let rgb = Tensor::uniform(&[l, 8], -1.0, 1.0, rng);
    let x = Tensor::uniform(&[l, 8], -1.0, 1.0, rng);
    let z = Tensor::uniform(&[2, 8], -1.0, 1.0, rng);
    let width = if mode == TemporalMode::Mixed { 16 } else { 8 };
    let states: Vec<Tensor<f64>> = (0..if mode == TemporalMode::Mixed { 1 } else { 2 })
        .map(|_| Tensor::uniform(&[width, 4], -1.0, 1.0, rng))
        .collect();
    let report = grad_check_params(
        &mut store,
        |g, s| {
            let j = joint(g, &rgb, &x, &z)?;
            let h: Vec<Var> = states.iter().map(|t| g.constant(t.clone())).collect();
            let (out, new_h) = module.forward(g, s, &j, &h)?;
            let mut total = project(g, out.tokens, 1)?;
            for (i, v) in new_h.into_iter().enumerate() {
                let p = project(g, v, 2 + i as u64)?;
                total = g.add(total, p)?;
            }
            Ok(total)
        },
        DEFAULT_STEP,
        Some(6),
    )?;
    Ok(report.max_rel_err)
}

fn ssm_layer_grad(seed: u64) -> Result<f64> {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let ssm = Ssm::new(&mut store, "s", 6, 3, rng)?;
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
    }
    let x = Tensor::uniform(&[7, 6], -1.0, 1.0, rng);
    let h0 = Tensor::uniform(&[6, 3], -1.0, 1.0, rng);
    let r = grad_check_params(
        &mut store,
        |g, s| {
            let xv = g.constant(x.clone());
            let hv = g.constant(h0.clone());
            let (out, h) = ssm.scan(g, s, xv, hv)?;
            let a = project(g, out, 3)?;
            let b = project(g, h, 4)?;
            g.add(a, b)
        },
        DEFAULT_STEP,
        None,
    )?;
    Ok(r.max_rel_err)
}

/// Runs `frames` frames through a decoupled module and returns the
/// per-frame memory of stream `watch` (0 = RGB, 1 = X).
fn memory_trace(
    module: &TemporalModule,
    store: &ParamStore<f64>,
    frames: &[(Tensor<f64>, Tensor<f64>)],
    z: &Tensor<f64>,
    watch: usize,
) -> Result<Vec<Tensor<f64>>> {
    let c = module.cfg.channels;
    let d = module.cfg.d_state;
    let mut h = vec![Tensor::zeros(&[c, d]), Tensor::zeros(&[c, d])];
    let mut trace = Vec::new();
    for (rgb, x) in frames {
        let mut g = Graph::new();
        let j = joint(&mut g, rgb, x, z)?;
        let hv: Vec<Var> = h.iter().map(|t| g.constant(t.clone())).collect();
        let (_, next) = module.forward(&mut g, store, &j, &hv)?;
        h = next.iter().map(|&v| g.value(v).clone()).collect();
        trace.push(h[watch].clone());
    }
    Ok(trace)
}

/// Counts, over `trials` random perturbations of stream `perturb`, how
/// many change the other stream's memory at any of 10 frames.
pub fn isolation_trials(no_cross: bool, perturb: usize, trials: usize, seed: u64) -> Result<usize> {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let c = cfg(TemporalMode::Decoupled, no_cross, false, false);
    let mut store = ParamStore::<f64>::new();
    let module = TemporalModule::new(&mut store, "t", c, rng)?;
    let l = 6;
    let frames: Vec<(Tensor<f64>, Tensor<f64>)> = (0..10)
        .map(|_| (Tensor::uniform(&[l, 8], -1.0, 1.0, rng), Tensor::uniform(&[l, 8], -1.0, 1.0, rng)))
        .collect();
    let z = Tensor::uniform(&[2, 8], -1.0, 1.0, rng);
    let watch = 1 - perturb;
    let base = memory_trace(&module, &store, &frames, &z, watch)?;
    let mut changed = 0;
    for _ in 0..trials {
        let noisy: Vec<(Tensor<f64>, Tensor<f64>)> = frames
            .iter()
            .map(|(r, x)| {
                let bump = Tensor::uniform(&[l, 8], -0.5, 0.5, rng);
                if perturb == 0 {
                    (r.zip_map(&bump, |a, b| a + b).unwrap(), x.clone())
                } else {
                    (r.clone(), x.zip_map(&bump, |a, b| a + b).unwrap())
                }
            })
            .collect();
        let trace = memory_trace(&module, &store, &noisy, &z, watch)?;
        if trace.iter().zip(&base).any(|(a, b)| !a.bit_eq(b)) {
            changed += 1;
        }
    }
    Ok(changed)
}

pub fn temporal_suite() -> Vec<Check> {
    let mut out = Vec::new();
    let rng = &mut ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    let mut failure = None;
    for _ in 0..100 {
        match scan_vs_loop(rng) {
            Ok(e) => worst = worst.max(e),
            Err(e) => failure = Some(e),
        }
    }
    out.push(match failure {
        Some(e) => Check::new("scan equals explicit recurrence", false, format!("error: {e}")),
        None => Check::new(
            "scan equals explicit recurrence",
            worst < SCAN_TOLERANCE,
            format!("100 instances, max abs diff {worst:.3e} (tol {SCAN_TOLERANCE:.0e})"),
        ),
    });
    out.push(Check::from_result(
        "discretization spot values",
        spot_values().map(|e| {
            Check::new(
                "discretization spot values",
                e < SPOT_TOLERANCE,
                format!("max abs diff {e:.3e} (tol {SPOT_TOLERANCE:.0e})"),
            )
        }),
    ));
    let name = "grad ssm layer";
    out.push(Check::from_result(name, ssm_layer_grad(5).map(|e| Check::within(name, e, OP_TOLERANCE))));
    let variants = [
        ("decoupled", TemporalMode::Decoupled, false, false, false),
        ("decoupled no_cross", TemporalMode::Decoupled, true, false, false),
        ("decoupled tie_bidir", TemporalMode::Decoupled, false, true, false),
        ("decoupled inject_first", TemporalMode::Decoupled, false, false, true),
        ("mixed", TemporalMode::Mixed, false, false, false),
    ];
    for (i, (label, mode, nc, tie, first)) in variants.into_iter().enumerate() {
        let name = format!("grad temporal module {label}");
        let r = module_grad(mode, nc, tie, first, 20 + i as u64).map(|e| Check::within(&name, e, OP_TOLERANCE));
        out.push(Check::from_result(&name, r));
    }
    for (perturb, label) in [(1, "X perturbations keep RGB memory"), (0, "RGB perturbations keep X memory")] {
        let r = isolation_trials(true, perturb, 100, 31 + perturb as u64)
            .map(|n| Check::new(label, n == 0, format!("{n}/100 changed without cross-attention")));
        out.push(Check::from_result(label, r));
    }
    let label = "cross-attention exchanges information";
    let r = isolation_trials(false, 1, 100, 33).map(|n| Check::new(label, n >= 99, format!("{n}/100 changed (need 99)")));
    out.push(Check::from_result(label, r));
    out
}
