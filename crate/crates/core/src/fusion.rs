//! Modality-aware fusion: noisy top-K routing over a four-adapter expert
//! library, per-token fusion weights and the load-balancing regularizer.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::embed::Modality;
use crate::error::{Error, Result};
use crate::nn::{self, Linear};
use crate::numerics::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

pub const NUM_EXPERTS: usize = 4;
pub const TOP_K: usize = 2;
/// Stream weights of the final weighted sum.
pub const LAMBDA_RGB: f64 = 0.5;
pub const LAMBDA_X: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// Plain average of the two streams, no parameters.
    Baseline,
    /// One shared adapter, no routing, gate fixed to 1.
    Uniform,
    /// Routed expert library.
    Moe,
}

impl FromStr for FusionMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(FusionMode::Baseline),
            "uniform" => Ok(FusionMode::Uniform),
            "moe" => Ok(FusionMode::Moe),
            other => Err(format!("unknown fusion mode {other:?} (baseline, uniform, moe)")),
        }
    }
}

impl FusionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Baseline => "baseline",
            FusionMode::Uniform => "uniform",
            FusionMode::Moe => "moe",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionConfig {
    pub channels: usize,
    pub bottleneck: usize,
    pub top_k: usize,
    pub mode: FusionMode,
    /// Route the X stream through the expert of its true modality instead
    /// of the highest-gated X expert.
    pub true_modality_experts: bool,
}

/// Residual bottleneck adapter `x + up(gelu(down(x)))`.
#[derive(Debug, Clone)]
pub struct Expert {
    pub down: Linear,
    pub up: Linear,
}

impl Expert {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        r: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let hidden = (c / r).max(1);
        Ok(Expert {
            down: Linear::new(store, &format!("{name}.down"), c, hidden, true, rng)?,
            up: Linear::new(store, &format!("{name}.up"), hidden, c, true, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.down.forward(g, store, x)?;
        let h = g.gelu(h)?;
        let h = self.up.forward(g, store, h)?;
        g.add(x, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.down, &self.up]
            .iter()
            .flat_map(|l| std::iter::once(l.weight).chain(l.bias))
            .collect()
    }
}

/// Per-token routing result.
#[derive(Debug, Clone)]
pub struct GateDecision {
    /// `[L, 4]`, exactly K nonzero per row.
    pub gates: Var,
    /// `[L, 4]` logits including noise (train mode).
    pub raw_logits: Var,
    /// `[L, 4]` softmax over all four logits (before top-K).
    pub probs: Var,
    /// Row-major `[L, 4]` top-K selection.
    pub topk_mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct FusionOutput {
    /// `[L, C]` fused search tokens.
    pub fused: Var,
    /// `[L, 1]` per-token stream weights (absent for the baseline).
    pub f_rgb: Option<Var>,
    pub f_x: Option<Var>,
    /// Load-balancing loss of this decision (routed mode only).
    pub balance: Option<Var>,
    pub chosen: Option<Modality>,
    pub decision: Option<GateDecision>,
}

/// Top-K selection per row: descending value, ties to the lower index.
pub fn topk_mask<T: Scalar>(logits: &[T], cols: usize, k: usize) -> Vec<bool> {
    let mut mask = vec![false; logits.len()];
    let mut order: Vec<usize> = (0..cols).collect();
    for (r, row) in logits.chunks_exact(cols).enumerate() {
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        for &j in &order[..k.min(cols)] {
            mask[r * cols + j] = true;
        }
    }
    mask
}

/// Channel-wise concatenation of aligned token pairs: `[L, 2C]`, RGB first.
pub fn pair_concat<T: Scalar>(g: &mut Graph<T>, s_rgb: Var, s_x: Var) -> Result<Var> {
    if g.shape(s_rgb)[0] != g.shape(s_x)[0] {
        return Err(Error::shape(
            "pair_concat",
            format!("{:?} vs {:?}", g.shape(s_rgb), g.shape(s_x)),
        ));
    }
    g.concat_cols(&[s_rgb, s_x])
}

/// Top-K gating of raw logits (no projection, no noise).
pub fn gate_logits<T: Scalar>(g: &mut Graph<T>, logits: Var, k: usize) -> Result<GateDecision> {
    let cols = g.shape(logits)[1];
    if k == 0 || k > cols {
        return Err(Error::Contract(format!("top-k {k} over {cols} experts")));
    }
    let topk_mask = topk_mask(g.value(logits).data(), cols, k);
    let gates = g.masked_softmax_rows(logits, &topk_mask)?;
    let probs = g.softmax_rows(logits)?;
    Ok(GateDecision {
        gates,
        raw_logits: logits,
        probs,
        topk_mask,
    })
}

/// `F = channel_gap(sigmoid(G * E(S)))` with a per-token gate column `gate: [L,1]`.
pub fn fusion_weights<T: Scalar>(g: &mut Graph<T>, gate: Var, expert_out: Var) -> Result<Var> {
    let scaled = g.mul_col(expert_out, gate)?;
    let s = g.sigmoid(scaled)?;
    g.mean_cols(s)
}

/// `lambda_rgb * (F_rgb * s_rgb) + lambda_x * (F_x * s_x)`.
pub fn fuse<T: Scalar>(
    g: &mut Graph<T>,
    s_rgb: Var,
    s_x: Var,
    f_rgb: Var,
    f_x: Var,
    lambda_rgb: f64,
    lambda_x: f64,
) -> Result<Var> {
    let a = g.mul_col(s_rgb, f_rgb)?;
    let a = g.scale(a, T::from_f64_lossy(lambda_rgb))?;
    let b = g.mul_col(s_x, f_x)?;
    let b = g.scale(b, T::from_f64_lossy(lambda_x))?;
    g.add(a, b)
}

/// `E * sum_e Pbar_e^2`, with `Pbar` the mean pre-top-K routing
/// probability of each expert over every token of every decision.
/// Equals 1 under uniform routing and is never below it.
pub fn load_balance_loss<T: Scalar>(g: &mut Graph<T>, probs: &[Var]) -> Result<Var> {
    if probs.is_empty() {
        return Err(Error::domain("load_balance_loss", "no routing decisions"));
    }
    let all = if probs.len() == 1 {
        probs[0]
    } else {
        g.concat_rows(probs)?
    };
    let e = g.shape(all)[1];
    let mean = g.mean_rows(all)?;
    let sq = g.square(mean)?;
    let s = g.sum(sq)?;
    g.scale(s, T::from_usize(e).unwrap())
}

/// Fraction of top-K selections that hit each expert (diagnostic).
pub fn selection_fractions(masks: &[&[bool]], experts: usize) -> Vec<f64> {
    let mut counts = vec![0usize; experts];
    let mut total = 0usize;
    for m in masks {
        for row in m.chunks_exact(experts) {
            for (c, &sel) in counts.iter_mut().zip(row) {
                if sel {
                    *c += 1;
                    total += 1;
                }
            }
        }
    }
    counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect()
}

#[derive(Debug, Clone)]
pub struct Fusion {
    pub cfg: FusionConfig,
    /// `{RGB, T, E, D}` (routed) or a single shared adapter (uniform).
    pub experts: Vec<Expert>,
    pub w_gate: Option<ParamId>,
    pub w_noise: Option<ParamId>,
}

impl Fusion {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: FusionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let c = cfg.channels;
        match cfg.mode {
            FusionMode::Baseline => Ok(Fusion {
                cfg,
                experts: Vec::new(),
                w_gate: None,
                w_noise: None,
            }),
            FusionMode::Uniform => Ok(Fusion {
                cfg,
                experts: vec![Expert::new(store, "fusion.shared", c, cfg.bottleneck, rng)?],
                w_gate: None,
                w_noise: None,
            }),
            FusionMode::Moe => {
                let experts = Modality::ALL
                    .iter()
                    .map(|m| {
                        Expert::new(store, &format!("fusion.expert_{}", m.as_str().to_lowercase()), c, cfg.bottleneck, rng)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Fusion {
                    cfg,
                    experts,
                    w_gate: Some(nn::weight(store, "fusion.router.w_gate", &[2 * c, NUM_EXPERTS], rng)?),
                    w_noise: Some(nn::weight(store, "fusion.router.w_noise", &[2 * c, NUM_EXPERTS], rng)?),
                })
            }
        }
    }

    /// `logits = S W_g + eps * softplus(S W_noise)`; `eps ~ N(0,1)` drawn
    /// from `seed` in train mode, zero in eval mode.
    pub fn route<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        s_rgbx: Var,
        train: bool,
        seed: u64,
    ) -> Result<GateDecision> {
        let (Some(wg), Some(wn)) = (self.w_gate, self.w_noise) else {
            return Err(Error::Contract("routing requires the expert library".into()));
        };
        let wg = g.param(store, wg);
        let mut logits = g.matmul(s_rgbx, wg)?;
        if train {
            let wn = g.param(store, wn);
            let pre = g.matmul(s_rgbx, wn)?;
            let scale = g.softplus(pre)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = g.shape(scale).to_vec();
            let n: usize = shape.iter().product();
            let eps: Vec<T> = (0..n)
                .map(|_| T::from_f64_lossy(rng.sample::<f64, _>(StandardNormal)))
                .collect();
            let eps = g.constant(Tensor::from_vec(&shape, eps)?);
            let noise = g.mul(eps, scale)?;
            logits = g.add(logits, noise)?;
        }
        gate_logits(g, logits, self.cfg.top_k)
    }

    pub fn expert_apply<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        expert: Modality,
        tokens: Var,
    ) -> Result<Var> {
        let e = self
            .experts
            .get(expert.index())
            .filter(|_| self.cfg.mode == FusionMode::Moe)
            .ok_or_else(|| Error::Contract(format!("no expert {expert} in {} fusion", self.cfg.mode.as_str())))?;
        e.forward(g, store, tokens)
    }

    /// X expert with the highest mean gate over the tokens (ties to the
    /// lower index).
    pub fn chosen_x_expert<T: Scalar>(gates: &Tensor<T>) -> Modality {
        let cols = gates.shape()[1];
        let mut best = (Modality::T, T::neg_infinity());
        for m in Modality::X {
            let total = gates
                .data()
                .chunks_exact(cols)
                .fold(T::zero(), |a, row| a + row[m.index()]);
            if total > best.1 {
                best = (m, total);
            }
        }
        best.0
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        s_rgb: Var,
        s_x: Var,
        modality: Modality,
        train: bool,
        seed: u64,
    ) -> Result<FusionOutput> {
        if modality == Modality::Rgb {
            return Err(Error::Contract("X stream cannot be tagged RGB".into()));
        }
        if g.shape(s_rgb) != g.shape(s_x) {
            return Err(Error::shape(
                "fusion",
                format!("{:?} vs {:?}", g.shape(s_rgb), g.shape(s_x)),
            ));
        }
        match self.cfg.mode {
            FusionMode::Baseline => {
                let a = g.scale(s_rgb, T::from_f64_lossy(LAMBDA_RGB))?;
                let b = g.scale(s_x, T::from_f64_lossy(LAMBDA_X))?;
                Ok(FusionOutput {
                    fused: g.add(a, b)?,
                    f_rgb: None,
                    f_x: None,
                    balance: None,
                    chosen: None,
                    decision: None,
                })
            }
            FusionMode::Uniform => {
                let e = &self.experts[0];
                let l = g.shape(s_rgb)[0];
                let one = g.constant(Tensor::ones(&[l, 1]));
                let er = e.forward(g, store, s_rgb)?;
                let ex = e.forward(g, store, s_x)?;
                let f_rgb = fusion_weights(g, one, er)?;
                let f_x = fusion_weights(g, one, ex)?;
                let fused = fuse(g, s_rgb, s_x, f_rgb, f_x, LAMBDA_RGB, LAMBDA_X)?;
                Ok(FusionOutput {
                    fused,
                    f_rgb: Some(f_rgb),
                    f_x: Some(f_x),
                    balance: None,
                    chosen: None,
                    decision: None,
                })
            }
            FusionMode::Moe => {
                let cat = pair_concat(g, s_rgb, s_x)?;
                let decision = self.route(g, store, cat, train, seed)?;
                let chosen = if self.cfg.true_modality_experts {
                    modality
                } else {
                    Self::chosen_x_expert(g.value(decision.gates))
                };
                let g_rgb = g.slice_cols(decision.gates, Modality::Rgb.index(), 1)?;
                let g_x = g.slice_cols(decision.gates, chosen.index(), 1)?;
                let er = self.expert_apply(g, store, Modality::Rgb, s_rgb)?;
                let ex = self.expert_apply(g, store, chosen, s_x)?;
                let f_rgb = fusion_weights(g, g_rgb, er)?;
                let f_x = fusion_weights(g, g_x, ex)?;
                let fused = fuse(g, s_rgb, s_x, f_rgb, f_x, LAMBDA_RGB, LAMBDA_X)?;
                let balance = load_balance_loss(g, &[decision.probs])?;
                Ok(FusionOutput {
                    fused,
                    f_rgb: Some(f_rgb),
                    f_x: Some(f_x),
                    balance: Some(balance),
                    chosen: Some(chosen),
                    decision: Some(decision),
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topk_ties_go_to_lower_index() {
        let m = topk_mask(&[0.0f64, 0.0, 0.0, 0.0], 4, 2);
        assert_eq!(m, vec![true, true, false, false]);
        let m = topk_mask(&[1.0f64, 3.0, 3.0, 2.0], 4, 2);
        assert_eq!(m, vec![false, true, true, false]);
    }

    #[test]
    fn gate_example_row() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::from_vec(&[1, 4], vec![2.0, 1.0, 0.0, -1.0]).unwrap());
        let d = gate_logits(&mut g, l, 2).unwrap();
        let gates = g.value(d.gates).data();
        assert!((gates[0] - 0.7311).abs() < 1e-4 && (gates[1] - 0.2689).abs() < 1e-4);
        assert_eq!(&gates[2..], &[0.0, 0.0]);
    }

    #[test]
    fn balance_closed_forms() {
        let mut g = Graph::<f64>::new();
        let uniform = g.constant(Tensor::zeros(&[5, 4]));
        let d = gate_logits(&mut g, uniform, 2).unwrap();
        let b = load_balance_loss(&mut g, &[d.probs]).unwrap();
        assert!((g.value(b).data()[0] - 1.0).abs() < 1e-12);

        let two = g.constant(Tensor::from_vec(&[2, 4], vec![50.0, 50.0, -50.0, -50.0, 50.0, 50.0, -50.0, -50.0]).unwrap());
        let d = gate_logits(&mut g, two, 2).unwrap();
        let b = load_balance_loss(&mut g, &[d.probs]).unwrap();
        assert!((g.value(b).data()[0] - 2.0).abs() < 1e-12);
        assert!(matches!(load_balance_loss(&mut g, &[]), Err(Error::Domain { .. })));
    }

    #[test]
    fn selection_fraction_counts() {
        let m = [true, true, false, false, false, true, true, false];
        let f = selection_fractions(&[&m], 4);
        assert_eq!(f, vec![0.25, 0.5, 0.25, 0.0]);
    }
}
