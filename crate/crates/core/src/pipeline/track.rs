//! Frame-by-frame tracking with temporal state carried across frames.

use super::model::{Model, PairCrop};
use crate::data::crop::{CropTransform, SEARCH_FACTOR, TEMPLATE_FACTOR};
use crate::data::{Image, Rect};
use crate::embed::Modality;
use crate::error::{Error, Result};
use crate::head::decode_box;
use crate::numerics::{Graph, Scalar};
use crate::temporal::TemporalStates;

/// Seed of the (unused in eval mode) router noise during tracking.
const EVAL_SEED: u64 = 0;

/// One sequence being tracked. The template pair is fixed at init.
#[derive(Debug, Clone)]
pub struct TrackSession<'m, T> {
    pub model: &'m Model<T>,
    pub x: Modality,
    pub template: PairCrop<T>,
    pub template_transform: CropTransform,
    pub states: TemporalStates<T>,
    pub prev: Rect,
    pub frame_size: (usize, usize),
    /// Drop temporal memory before every frame (ablation of the carry).
    pub reset_every_frame: bool,
}

fn check_pair(rgb: &Image, x: &Image) -> Result<()> {
    if (rgb.width, rgb.height) != (x.width, x.height) {
        return Err(Error::shape(
            "track",
            format!("RGB frame {}x{} vs X frame {}x{}", rgb.width, rgb.height, x.width, x.height),
        ));
    }
    Ok(())
}

impl<'m, T: Scalar> TrackSession<'m, T> {
    /// Crops the templates around `gt` and resets the memories.
    pub fn init(model: &'m Model<T>, rgb: &Image, x_img: &Image, gt: Rect, x: Modality) -> Result<Self> {
        check_pair(rgb, x_img)?;
        let finite = [gt.x, gt.y, gt.w, gt.h].iter().all(|v| v.is_finite());
        if !finite || gt.w <= 0.0 || gt.h <= 0.0 || !gt.intersects_frame(rgb.width, rgb.height) {
            return Err(Error::domain("track_init", format!("degenerate initial box {gt:?}")));
        }
        if x == Modality::Rgb {
            return Err(Error::domain("track_init", "X modality must be T, E or D"));
        }
        let t = CropTransform::around(&gt, TEMPLATE_FACTOR, model.cfg.embed.template_side, None);
        Ok(TrackSession {
            model,
            x,
            template: PairCrop {
                rgb: t.apply(rgb),
                x: t.apply(x_img),
            },
            template_transform: t,
            states: model.reset_states(x),
            prev: gt,
            frame_size: (rgb.width, rgb.height),
            reset_every_frame: false,
        })
    }

    pub fn frame_index(&self) -> u64 {
        self.states.frame_index()
    }

    /// Replaces the memories, e.g. with states restored from disk.
    pub fn set_states(&mut self, states: TemporalStates<T>) -> Result<()> {
        self.model.check_states(&states, self.x)?;
        self.states = states;
        Ok(())
    }

    /// Localizes the target in the next frame; returns the box in image
    /// pixels and the peak score.
    pub fn update(&mut self, rgb: &Image, x_img: &Image) -> Result<(Rect, f64)> {
        check_pair(rgb, x_img)?;
        if (rgb.width, rgb.height) != self.frame_size {
            return Err(Error::shape(
                "track_update",
                format!("frame size changed from {:?} to {}x{}", self.frame_size, rgb.width, rgb.height),
            ));
        }
        if self.reset_every_frame {
            let index = self.states.frame_index();
            self.states = self.model.reset_states(self.x);
            for s in self.states.blocks.iter_mut().flatten() {
                s.frame_index = index;
            }
            if let Some(c) = &mut self.states.context {
                c.frame_index = index;
            }
        }
        let t = CropTransform::around(&self.prev, SEARCH_FACTOR, self.model.cfg.embed.search_side, None);
        let search = PairCrop {
            rgb: t.apply(rgb),
            x: t.apply(x_img),
        };
        let mut g = Graph::new();
        let gs = self.states.to_graph(&mut g);
        let pred = self.model.forward(&mut g, &self.template, &search, self.x, &gs, false, EVAL_SEED)?;
        let (b, score) = decode_box(
            g.value(pred.maps.score),
            g.value(pred.maps.size),
            g.value(pred.maps.offset),
        );
        let rect = t.to_image(&b).clamp_to(self.frame_size.0, self.frame_size.1);
        self.states = self.states.advance(&g, &pred.states);
        self.prev = rect;
        Ok((rect, score))
    }
}
