//! Pre-norm self-attention block stack with temporal hooks.

use rand::Rng;

use crate::embed::JointSeq;
use crate::error::{Error, Result};
use crate::nn::{Attention, Mlp, Norm};
use crate::numerics::{Graph, ParamStore, Scalar, Var};
use crate::temporal::{GraphStates, TemporalConfig, TemporalModule};

pub const MLP_RATIO: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneConfig {
    pub depth: usize,
    pub channels: usize,
    pub heads: usize,
    /// Block `i` is hooked iff `(i + 1) % temporal_every == 0`.
    pub temporal_every: usize,
}

impl BackboneConfig {
    pub fn is_hooked(&self, block: usize) -> bool {
        (block + 1).is_multiple_of(self.temporal_every)
    }

    pub fn hook_count(&self) -> usize {
        (0..self.depth).filter(|&i| self.is_hooked(i)).count()
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: Norm,
    pub attn: Attention,
    pub norm2: Norm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Block {
            norm1: Norm::new(store, &format!("{name}.norm1"), c)?,
            attn: Attention::new(store, &format!("{name}.attn"), c, heads, rng)?,
            norm2: Norm::new(store, &format!("{name}.norm2"), c)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), c, MLP_RATIO * c, rng)?,
        })
    }

    /// `x + Attn(LN x)` followed by `x + MLP(LN x)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let n = self.norm1.forward(g, store, x)?;
        let a = self.attn.forward(g, store, n, n)?;
        let x = g.add(x, a)?;
        let n = self.norm2.forward(g, store, x)?;
        let m = self.mlp.forward(g, store, n)?;
        g.add(x, m)
    }

    /// Self-attention sub-layer alone: `x + Attn(LN x)`.
    pub fn self_attention<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let n = self.norm1.forward(g, store, x)?;
        let a = self.attn.forward(g, store, n, n)?;
        g.add(x, a)
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub blocks: Vec<Block>,
    /// Temporal module per hooked block (empty when temporal mode has no
    /// memories).
    pub temporal: Vec<TemporalModule>,
    pub final_norm: Norm,
}

impl Backbone {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: BackboneConfig,
        tcfg: TemporalConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(cfg.depth);
        let mut temporal = Vec::new();
        for i in 0..cfg.depth {
            blocks.push(Block::new(store, &format!("blocks.{i}"), cfg.channels, cfg.heads, rng)?);
            if tcfg.mode.has_ssm() && cfg.is_hooked(i) {
                temporal.push(TemporalModule::new(store, &format!("temporal.{i}"), tcfg, rng)?);
            }
        }
        Ok(Backbone {
            cfg,
            blocks,
            temporal,
            final_norm: Norm::new(store, "backbone.norm", cfg.channels)?,
        })
    }

    /// Runs every block; hooked blocks exchange with their temporal module
    /// when `use_temporal` is set. `states` is updated in place.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        joint: &JointSeq,
        states: &mut GraphStates,
        use_temporal: bool,
    ) -> Result<JointSeq> {
        let use_temporal = use_temporal && !self.temporal.is_empty();
        if use_temporal && states.h.len() != self.temporal.len() {
            return Err(Error::Contract(format!(
                "{} temporal states for {} hooked blocks",
                states.h.len(),
                self.temporal.len()
            )));
        }
        let mut joint = *joint;
        let mut hook = 0;
        for (i, block) in self.blocks.iter().enumerate() {
            joint.tokens = block.forward(g, store, joint.tokens)?;
            if use_temporal && self.cfg.is_hooked(i) {
                let (next, h) = self.temporal[hook].forward(g, store, &joint, &states.h[hook])?;
                states.h[hook] = h;
                joint = next;
                hook += 1;
            }
        }
        joint.tokens = self.final_norm.forward(g, store, joint.tokens)?;
        Ok(joint)
    }
}

