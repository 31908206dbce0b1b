use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Check;
use crate::embed::Modality;
use crate::head::{total_loss, BBox};
use crate::numerics::gradcheck::{grad_check_params, DEFAULT_STEP};
use crate::numerics::{DType, Tensor};
use crate::pipeline::{Model, ModelConfig, PairCrop};
use crate::Result;

/// Tolerance of the end-to-end model gradient check.
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Probed elements per parameter tensor.
pub const MODEL_PROBES: usize = 3;

fn crop(side: usize, rng: &mut ChaCha8Rng) -> PairCrop<f64> {
    PairCrop {
        rgb: Tensor::uniform(&[3, side, side], 0.0, 1.0, rng),
        x: Tensor::uniform(&[3, side, side], 0.0, 1.0, rng),
    }
}

/// Two-frame training loss of `cfg` (run in f64), checked against central
/// differences on a sample of every parameter tensor. Memories start
/// nonzero and carry gradient from frame two back into frame one.
pub fn model_grad(cfg: ModelConfig, seed: u64) -> Result<(f64, String)> {
    let cfg = ModelConfig { dtype: DType::F64, ..cfg };
    let mut model = Model::<f64>::build(cfg, seed)?;
    let rng = &mut ChaCha8Rng::seed_from_u64(seed + 1);
    let x = Modality::T;
    let mut states = model.reset_states(x);
    for block in &mut states.blocks {
        for s in block {
            s.h = Tensor::uniform(s.h.shape(), -0.5, 0.5, rng);
        }
    }
    if let Some(c) = &mut states.context {
        c.tokens = Tensor::uniform(c.tokens.shape(), -0.5, 0.5, rng);
    }
    let template = crop(cfg.embed.template_side, rng);
    let search = [crop(cfg.embed.search_side, rng), crop(cfg.embed.search_side, rng)];
    let gts = [BBox::new(0.48, 0.52, 0.27, 0.3), BBox::new(0.53, 0.47, 0.25, 0.31)];
    let weights = cfg.loss;

    let mut store = std::mem::take(&mut model.store);
    let report = grad_check_params(
        &mut store,
        |g, s| {
            let mut h = states.to_graph(g);
            let mut total = None;
            for (t, (frame, gt)) in search.iter().zip(&gts).enumerate() {
                let p = model.forward_with(g, s, &template, frame, x, &h, true, 5 + t as u64)?;
                let (l, _) = total_loss(g, &p.maps, gt, p.balance, &weights)?;
                total = Some(match total {
                    Some(acc) => g.add(acc, l)?,
                    None => l,
                });
                h = p.states;
            }
            Ok(total.expect("two frames"))
        },
        DEFAULT_STEP,
        Some(MODEL_PROBES),
    )?;
    Ok((report.max_rel_err, format!("{} probes, worst at {}[{}]", report.checked, report.worst, report.worst_index)))
}

pub fn model_suite() -> Vec<Check> {
    let name = "grad full model, two frames";
    let r = model_grad(ModelConfig::default(), 21).map(|(err, detail)| {
        Check::new(
            name,
            err < MODEL_TOLERANCE,
            format!("max rel err {err:.3e} (tol {MODEL_TOLERANCE:.0e}), {detail}"),
        )
    });
    vec![Check::from_result(name, r)]
}
