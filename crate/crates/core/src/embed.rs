//! Patch embedding, positional tables and the joint token layout.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn;
use crate::numerics::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// Sensor stream of a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Rgb,
    /// Thermal infrared.
    T,
    /// Event camera.
    E,
    /// Depth.
    D,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Rgb, Modality::T, Modality::E, Modality::D];
    pub const X: [Modality; 3] = [Modality::T, Modality::E, Modality::D];

    /// Expert / column index (RGB=0, T=1, E=2, D=3).
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Rgb => "RGB",
            Modality::T => "T",
            Modality::E => "E",
            Modality::D => "D",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "RGB" | "rgb" => Ok(Modality::Rgb),
            "T" | "t" => Ok(Modality::T),
            "E" | "e" => Ok(Modality::E),
            "D" | "d" => Ok(Modality::D),
            other => Err(format!("unknown modality {other:?} (expected RGB, T, E or D)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Template,
    Search,
}

/// A 3-channel image `[3, H, W]` with values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Frame<T> {
    pub modality: Modality,
    pub pixels: Tensor<T>,
}

impl<T: Scalar> Frame<T> {
    pub fn new(modality: Modality, pixels: Tensor<T>) -> Result<Self> {
        match pixels.shape() {
            [3, _, _] => Ok(Frame { modality, pixels }),
            s => Err(Error::shape("frame", format!("expected [3,H,W], got {s:?}"))),
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
}

/// Tokens of one role/modality with their raster grid.
#[derive(Debug, Clone, Copy)]
pub struct TokenSeq {
    pub tokens: Var,
    pub role: Role,
    pub modality: Modality,
    /// `(rows, cols)`; token index = row * cols + col.
    pub grid: (usize, usize),
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub offset: usize,
    pub len: usize,
    pub grid: (usize, usize),
}

/// Layout of the joint sequence `[Z_RGB | Z_X | S_RGB | S_X | CTX?]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentMap {
    pub z_rgb: Segment,
    pub z_x: Segment,
    pub s_rgb: Segment,
    pub s_x: Segment,
    /// Extra context tokens (previous-frame search features), if any.
    pub context: Option<Segment>,
}

impl SegmentMap {
    pub fn total(&self) -> usize {
        self.segments().iter().map(|s| s.len).sum()
    }

    fn segments(&self) -> Vec<Segment> {
        let mut v = vec![self.z_rgb, self.z_x, self.s_rgb, self.s_x];
        v.extend(self.context);
        v
    }

    /// Checks the segments are contiguous, in order and grid-consistent.
    pub fn validate(&self, rows: usize) -> Result<()> {
        let mut next = 0;
        for s in self.segments() {
            if s.offset != next || s.len != s.grid.0 * s.grid.1 || s.len == 0 {
                return Err(Error::Contract(format!("corrupt segment map: {self:?}")));
            }
            next += s.len;
        }
        if next != rows {
            return Err(Error::Contract(format!(
                "segment map covers {next} tokens, sequence has {rows}"
            )));
        }
        if self.z_rgb.grid != self.z_x.grid || self.s_rgb.grid != self.s_x.grid {
            return Err(Error::Contract("modality pair grids differ".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct JointSeq {
    pub tokens: Var,
    pub segments: SegmentMap,
    pub x_modality: Modality,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbedConfig {
    pub patch: usize,
    pub channels: usize,
    pub template_side: usize,
    pub search_side: usize,
}

impl EmbedConfig {
    pub fn template_grid(&self) -> (usize, usize) {
        let n = self.template_side / self.patch;
        (n, n)
    }

    pub fn search_grid(&self) -> (usize, usize) {
        let n = self.search_side / self.patch;
        (n, n)
    }
}

/// Rearranges `[3, H, W]` pixels into `[L, 3*P*P]` patch rows in raster
/// order; each row is flattened channel-major, then row, then column.
pub fn patchify<T: Scalar>(pixels: &Tensor<T>, patch: usize) -> Result<(Tensor<T>, (usize, usize))> {
    let (c, h, w) = match pixels.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::shape("patch_embed", format!("expected [c,H,W], got {s:?}"))),
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(
            "patch_embed",
            format!("{h}x{w} frame is not divisible into {patch}x{patch} patches"),
        ));
    }
    let (gr, gc) = (h / patch, w / patch);
    let dim = c * patch * patch;
    let src = pixels.data();
    let mut out = Vec::with_capacity(gr * gc * dim);
    for pr in 0..gr {
        for pc in 0..gc {
            for ch in 0..c {
                for y in 0..patch {
                    let row = (ch * h + pr * patch + y) * w + pc * patch;
                    out.extend_from_slice(&src[row..row + patch]);
                }
            }
        }
    }
    Ok((Tensor::from_vec(&[gr * gc, dim], out)?, (gr, gc)))
}

/// Patch projections (one for RGB, one shared by the X modalities) and the
/// learned positional tables (one per role, shared across modalities).
#[derive(Debug, Clone)]
pub struct Embedder {
    pub cfg: EmbedConfig,
    pub patch_rgb: ParamId,
    pub patch_x: ParamId,
    pub pos_template: ParamId,
    pub pos_search: ParamId,
}

impl Embedder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: EmbedConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let dim = 3 * cfg.patch * cfg.patch;
        let (zt, st) = (cfg.template_grid(), cfg.search_grid());
        Ok(Embedder {
            cfg,
            patch_rgb: nn::weight(store, "embed.patch_rgb", &[dim, cfg.channels], rng)?,
            patch_x: nn::weight(store, "embed.patch_x", &[dim, cfg.channels], rng)?,
            pos_template: nn::weight(store, "embed.pos_template", &[zt.0 * zt.1, cfg.channels], rng)?,
            pos_search: nn::weight(store, "embed.pos_search", &[st.0 * st.1, cfg.channels], rng)?,
        })
    }

    /// Linear (bias-free) projection of each patch.
    pub fn patch_embed<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        frame: &Frame<T>,
        role: Role,
    ) -> Result<TokenSeq> {
        let (patches, grid) = patchify(&frame.pixels, self.cfg.patch)?;
        let p = g.constant(patches);
        let w = match frame.modality {
            Modality::Rgb => self.patch_rgb,
            _ => self.patch_x,
        };
        let w = g.param(store, w);
        let tokens = g.matmul(p, w)?;
        Ok(TokenSeq {
            tokens,
            role,
            modality: frame.modality,
            grid,
        })
    }

    pub fn table(&self, role: Role) -> ParamId {
        match role {
            Role::Template => self.pos_template,
            Role::Search => self.pos_search,
        }
    }

    pub fn add_positional<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        seq: TokenSeq,
    ) -> Result<TokenSeq> {
        let table = g.param(store, self.table(seq.role));
        let rows = g.shape(table)[0];
        if seq.len() > rows {
            return Err(Error::shape(
                "add_positional",
                format!("grid {:?} exceeds positional table of {rows} rows", seq.grid),
            ));
        }
        let pos = if seq.len() == rows {
            table
        } else {
            g.slice_rows(table, 0, seq.len())?
        };
        let tokens = g.add(seq.tokens, pos)?;
        Ok(TokenSeq { tokens, ..seq })
    }

    /// `patch_embed` followed by `add_positional`.
    pub fn embed<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        frame: &Frame<T>,
        role: Role,
    ) -> Result<TokenSeq> {
        let seq = self.patch_embed(g, store, frame, role)?;
        self.add_positional(g, store, seq)
    }
}

fn segment(offset: usize, seq: &TokenSeq) -> Segment {
    Segment {
        offset,
        len: seq.len(),
        grid: seq.grid,
    }
}

/// Concatenates `[Z_RGB | Z_X | S_RGB | S_X]` (plus optional context tokens).
pub fn assemble_joint<T: Scalar>(
    g: &mut Graph<T>,
    z_rgb: &TokenSeq,
    z_x: &TokenSeq,
    s_rgb: &TokenSeq,
    s_x: &TokenSeq,
    context: Option<&TokenSeq>,
) -> Result<JointSeq> {
    if z_rgb.grid != z_x.grid || s_rgb.grid != s_x.grid {
        return Err(Error::shape(
            "assemble_joint",
            "template pair and search pair must share grids".to_string(),
        ));
    }
    let z_rgb_seg = segment(0, z_rgb);
    let z_x_seg = segment(z_rgb_seg.len, z_x);
    let s_rgb_seg = segment(z_x_seg.offset + z_x_seg.len, s_rgb);
    let s_x_seg = segment(s_rgb_seg.offset + s_rgb_seg.len, s_x);
    let ctx_seg = context.map(|c| segment(s_x_seg.offset + s_x_seg.len, c));
    let mut parts = vec![z_rgb.tokens, z_x.tokens, s_rgb.tokens, s_x.tokens];
    parts.extend(context.map(|c| c.tokens));
    let tokens = g.concat_rows(&parts)?;
    Ok(JointSeq {
        tokens,
        segments: SegmentMap {
            z_rgb: z_rgb_seg,
            z_x: z_x_seg,
            s_rgb: s_rgb_seg,
            s_x: s_x_seg,
            context: ctx_seg,
        },
        x_modality: z_x.modality,
    })
}

/// The two search segments of a joint sequence.
pub fn split_search<T: Scalar>(g: &mut Graph<T>, joint: &JointSeq) -> Result<(TokenSeq, TokenSeq)> {
    let rows = g.shape(joint.tokens)[0];
    joint.segments.validate(rows)?;
    let take = |g: &mut Graph<T>, s: Segment, modality| -> Result<TokenSeq> {
        Ok(TokenSeq {
            tokens: g.slice_rows(joint.tokens, s.offset, s.len)?,
            role: Role::Search,
            modality,
            grid: s.grid,
        })
    };
    let rgb = take(g, joint.segments.s_rgb, Modality::Rgb)?;
    let x = take(g, joint.segments.s_x, joint.x_modality)?;
    Ok((rgb, x))
}

/// Replaces the two search segments, keeping everything else.
pub fn replace_search<T: Scalar>(
    g: &mut Graph<T>,
    joint: &JointSeq,
    s_rgb: Var,
    s_x: Var,
) -> Result<JointSeq> {
    let seg = joint.segments;
    let rows = g.shape(joint.tokens)[0];
    seg.validate(rows)?;
    for (v, s) in [(s_rgb, seg.s_rgb), (s_x, seg.s_x)] {
        if g.shape(v)[0] != s.len {
            return Err(Error::shape(
                "replace_search",
                format!("segment of {} tokens replaced by {:?}", s.len, g.shape(v)),
            ));
        }
    }
    let z = g.slice_rows(joint.tokens, 0, seg.s_rgb.offset)?;
    let mut parts = vec![z, s_rgb, s_x];
    if let Some(c) = seg.context {
        parts.push(g.slice_rows(joint.tokens, c.offset, c.len)?);
    }
    let tokens = g.concat_rows(&parts)?;
    Ok(JointSeq { tokens, ..*joint })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn desk() -> EmbedConfig {
        EmbedConfig {
            patch: 16,
            channels: 8,
            template_side: 32,
            search_side: 64,
        }
    }

    fn frame(side: usize, modality: Modality, rng: &mut ChaCha8Rng) -> Frame<f64> {
        Frame::new(modality, Tensor::uniform(&[3, side, side], 0.0, 1.0, rng)).unwrap()
    }

    #[test]
    fn token_counts() {
        let px = Tensor::<f64>::zeros(&[3, 32, 32]);
        assert_eq!(patchify(&px, 16).unwrap().1, (2, 2));
        let px = Tensor::<f64>::zeros(&[3, 112, 112]);
        assert_eq!(patchify(&px, 16).unwrap().0.shape()[0], 49);
        let px = Tensor::<f64>::zeros(&[3, 224, 224]);
        assert_eq!(patchify(&px, 16).unwrap().0.shape()[0], 196);
        let px = Tensor::<f64>::zeros(&[3, 30, 32]);
        assert!(matches!(patchify(&px, 16), Err(Error::Shape { .. })));
    }

    #[test]
    fn patchify_raster_order() {
        let data: Vec<f64> = (0..3 * 4 * 4).map(|v| v as f64).collect();
        let px = Tensor::from_vec(&[3, 4, 4], data).unwrap();
        let (p, grid) = patchify(&px, 2).unwrap();
        assert_eq!(grid, (2, 2));
        // second patch (row 0, col 1), channel 0: pixels (0,2),(0,3),(1,2),(1,3)
        assert_eq!(&p.data()[12..16], &[2.0, 3.0, 6.0, 7.0]);
        // channel 1 of the same patch starts 16 further on
        assert_eq!(p.data()[16], 18.0);
    }

    #[test]
    fn joint_layout_and_round_trip() {
        let rng = &mut ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let emb = Embedder::new(&mut store, desk(), rng).unwrap();
        let mut g = Graph::new();
        let z0 = emb.embed(&mut g, &store, &frame(32, Modality::Rgb, rng), Role::Template).unwrap();
        let z1 = emb.embed(&mut g, &store, &frame(32, Modality::T, rng), Role::Template).unwrap();
        let s0 = emb.embed(&mut g, &store, &frame(64, Modality::Rgb, rng), Role::Search).unwrap();
        let s1 = emb.embed(&mut g, &store, &frame(64, Modality::T, rng), Role::Search).unwrap();
        let joint = assemble_joint(&mut g, &z0, &z1, &s0, &s1, None).unwrap();
        assert_eq!(g.shape(joint.tokens), &[40, 8]);
        assert_eq!(joint.segments.s_rgb.offset, 8);
        let (a, b) = split_search(&mut g, &joint).unwrap();
        assert!(g.value(a.tokens).bit_eq(g.value(s0.tokens)));
        assert!(g.value(b.tokens).bit_eq(g.value(s1.tokens)));
        let again = replace_search(&mut g, &joint, a.tokens, b.tokens).unwrap();
        assert!(g.value(again.tokens).bit_eq(g.value(joint.tokens)));
    }

    #[test]
    fn corrupt_segment_map_is_a_contract_error() {
        let rng = &mut ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::<f64>::new();
        let t = g.constant(Tensor::uniform(&[40, 4], 0.0, 1.0, rng));
        let seg = |offset, len, n| Segment { offset, len, grid: (n, n) };
        let mut joint = JointSeq {
            tokens: t,
            segments: SegmentMap {
                z_rgb: seg(0, 4, 2),
                z_x: seg(4, 4, 2),
                s_rgb: seg(8, 16, 4),
                s_x: seg(24, 16, 4),
                context: None,
            },
            x_modality: Modality::T,
        };
        assert!(split_search(&mut g, &joint).is_ok());
        joint.segments.s_x.offset = 23;
        assert!(matches!(split_search(&mut g, &joint), Err(Error::Contract(_))));
    }

    #[test]
    fn positional_round_trip_and_oversized_grid() {
        let rng = &mut ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let emb = Embedder::new(&mut store, desk(), rng).unwrap();
        let mut g = Graph::new();
        let f = frame(32, Modality::E, rng);
        let raw = emb.patch_embed(&mut g, &store, &f, Role::Template).unwrap();
        let pos = emb.add_positional(&mut g, &store, raw).unwrap();
        let table = g.param(&store, emb.pos_template);
        let back = g.sub(pos.tokens, table).unwrap();
        let diff = g.value(back).zip_map(g.value(raw.tokens), |a, b| (a - b).abs()).unwrap();
        assert!(diff.max_abs() < 1e-12);

        let big = frame(64, Modality::E, rng);
        let raw = emb.patch_embed(&mut g, &store, &big, Role::Template).unwrap();
        assert!(matches!(
            emb.add_positional(&mut g, &store, raw),
            Err(Error::Shape { .. })
        ));
    }
}
