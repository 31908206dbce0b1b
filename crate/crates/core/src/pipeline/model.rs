//! The assembled tracker: embedding, backbone with temporal hooks, fusion
//! and head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::backbone::Backbone;
use crate::embed::{assemble_joint, split_search, Embedder, Frame, Modality, Role, TokenSeq};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionOutput};
use crate::head::{Head, ScoreMaps};
use crate::numerics::{Graph, ParamStore, Scalar, Tensor};
use crate::temporal::{GraphStates, TemporalMode, TemporalStates};

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub embedder: Embedder,
    pub backbone: Backbone,
    pub fusion: Fusion,
    pub head: Head,
}

/// RGB and X crops of one frame, each `[3, side, side]`.
#[derive(Debug, Clone)]
pub struct PairCrop<T> {
    pub rgb: Tensor<T>,
    pub x: Tensor<T>,
}

/// One forward pass: head maps, the routing regularizer and the states to
/// carry into the next frame.
#[derive(Debug)]
pub struct Prediction {
    pub maps: ScoreMaps,
    pub balance: Option<crate::numerics::Var>,
    pub fusion: FusionOutput,
    pub states: GraphStates,
}

impl<T: Scalar> Model<T> {
    /// Initializes every parameter from `seed`.
    pub fn build(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embedder = Embedder::new(&mut store, cfg.embed, &mut rng)?;
        let backbone = Backbone::new(&mut store, cfg.backbone, cfg.temporal, &mut rng)?;
        let fusion = Fusion::new(&mut store, cfg.fusion, &mut rng)?;
        let head = Head::new(&mut store, cfg.head, &mut rng)?;
        Ok(Model {
            cfg,
            store,
            embedder,
            backbone,
            fusion,
            head,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_elements()
    }

    pub fn search_tokens(&self) -> usize {
        let (h, w) = self.cfg.embed.search_grid();
        h * w
    }

    /// Fresh memories for a new sequence.
    pub fn reset_states(&self, x: Modality) -> TemporalStates<T> {
        TemporalStates::reset(
            &self.cfg.temporal,
            self.backbone.temporal.len(),
            self.search_tokens(),
            x,
        )
    }

    /// Checks that `states` belong to this model and X modality.
    pub fn check_states(&self, states: &TemporalStates<T>, x: Modality) -> Result<()> {
        if states.blocks.len() != self.backbone.temporal.len() {
            return Err(Error::Contract(format!(
                "{} state blocks for {} temporal modules",
                states.blocks.len(),
                self.backbone.temporal.len()
            )));
        }
        let d = self.cfg.temporal.d_state;
        for (i, (block, module)) in states.blocks.iter().zip(&self.backbone.temporal).enumerate() {
            let tags: Vec<_> = block.iter().map(|s| s.tag).collect();
            let expected = module.expected_tags(x);
            if tags != expected {
                return Err(Error::Contract(format!("block {i}: states tagged {tags:?}, expected {expected:?}")));
            }
            let width = match self.cfg.temporal.mode {
                TemporalMode::Mixed => 2 * self.cfg.embed.channels,
                _ => self.cfg.embed.channels,
            };
            for s in block {
                if s.h.shape() != [width, d] {
                    return Err(Error::Contract(format!("block {i}: state shape {:?}, expected [{width}, {d}]", s.h.shape())));
                }
            }
        }
        let want_context = self.cfg.temporal.mode == TemporalMode::Token;
        match &states.context {
            Some(c) if want_context => {
                let want = [self.search_tokens(), self.cfg.embed.channels];
                if c.tokens.shape() != want {
                    return Err(Error::Contract(format!("context shape {:?}, expected {want:?}", c.tokens.shape())));
                }
            }
            None if !want_context => {}
            _ => return Err(Error::Contract("context tokens do not match the temporal mode".into())),
        }
        Ok(())
    }

    /// `forward_with` using the model's own parameters.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        template: &PairCrop<T>,
        search: &PairCrop<T>,
        x: Modality,
        states: &GraphStates,
        train: bool,
        seed: u64,
    ) -> Result<Prediction> {
        self.forward_with(g, &self.store, template, search, x, states, train, seed)
    }

    /// Embed, assemble, backbone with temporal hooks, split, fuse, head.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_with(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        template: &PairCrop<T>,
        search: &PairCrop<T>,
        x: Modality,
        states: &GraphStates,
        train: bool,
        seed: u64,
    ) -> Result<Prediction> {
        if x == Modality::Rgb {
            return Err(Error::Contract("X stream cannot be RGB".into()));
        }
        let mode = self.cfg.temporal.mode;
        if mode.has_ssm() && states.h.len() != self.backbone.temporal.len() {
            return Err(Error::Contract(format!(
                "{} state blocks for {} temporal modules",
                states.h.len(),
                self.backbone.temporal.len()
            )));
        }
        if (mode == TemporalMode::Token) != states.context.is_some() {
            return Err(Error::Contract("context tokens do not match the temporal mode".into()));
        }
        let e = &self.embedder;
        let frame = |m: Modality, t: &Tensor<T>| Frame::new(m, t.clone());
        let z_rgb = e.embed(g, store, &frame(Modality::Rgb, &template.rgb)?, Role::Template)?;
        let z_x = e.embed(g, store, &frame(x, &template.x)?, Role::Template)?;
        let s_rgb = e.embed(g, store, &frame(Modality::Rgb, &search.rgb)?, Role::Search)?;
        let s_x = e.embed(g, store, &frame(x, &search.x)?, Role::Search)?;
        let context = states.context.map(|tokens| TokenSeq {
            tokens,
            role: Role::Search,
            modality: x,
            grid: s_rgb.grid,
        });
        let joint = assemble_joint(g, &z_rgb, &z_x, &s_rgb, &s_x, context.as_ref())?;

        let mut next = states.clone();
        let out = self.backbone.forward(g, store, &joint, &mut next, mode.has_ssm())?;
        let (sr, sx) = split_search(g, &out)?;
        let fusion = self.fusion.forward(g, store, sr.tokens, sx.tokens, x, train, seed)?;
        let maps = self.head.forward(g, store, fusion.fused, sr.grid)?;
        if mode == TemporalMode::Token {
            next.context = Some(g.detach(fusion.fused));
        }
        Ok(Prediction {
            maps,
            balance: fusion.balance,
            fusion,
            states: next,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_weights() {
        let cfg = ModelConfig::default();
        let a = Model::<f32>::build(cfg, 3).unwrap();
        let b = Model::<f32>::build(cfg, 3).unwrap();
        let c = Model::<f32>::build(cfg, 4).unwrap();
        assert_eq!(a.store.checksum(), b.store.checksum());
        assert_ne!(a.store.checksum(), c.store.checksum());
    }
}
