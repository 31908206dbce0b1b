//! Decoupled temporal propagation: cross-stream exchange, per-modality
//! selective state-space memories carried across frames, and the two
//! cross-attention interactions with the backbone search features.

use std::str::FromStr;

use rand::Rng;

use crate::embed::{replace_search, split_search, JointSeq, Modality};
use crate::error::{Error, Result};
use crate::nn::{self, CrossAttention, Linear};
use crate::numerics::{DType, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// How the temporal hooks behave.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemporalMode {
    /// No temporal modules at all.
    Off,
    /// Separate RGB and X memories (the full model).
    Decoupled,
    /// One memory over the channel-concatenated streams.
    Mixed,
    /// No memories; the previous frame's fused search tokens are appended
    /// to the joint sequence as context.
    Token,
}

impl FromStr for TemporalMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "off" => Ok(TemporalMode::Off),
            "decoupled" => Ok(TemporalMode::Decoupled),
            "mixed" => Ok(TemporalMode::Mixed),
            "token" => Ok(TemporalMode::Token),
            other => Err(format!(
                "unknown temporal mode {other:?} (off, decoupled, mixed, token)"
            )),
        }
    }
}

impl TemporalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TemporalMode::Off => "off",
            TemporalMode::Decoupled => "decoupled",
            TemporalMode::Mixed => "mixed",
            TemporalMode::Token => "token",
        }
    }

    /// Whether hooked blocks carry state-space memories.
    pub fn has_ssm(self) -> bool {
        matches!(self, TemporalMode::Decoupled | TemporalMode::Mixed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TemporalConfig {
    pub channels: usize,
    pub heads: usize,
    pub d_state: usize,
    pub mode: TemporalMode,
    /// Disables the bidirectional cross-stream attention.
    pub no_cross: bool,
    /// Shares one set of weights between the two exchange directions.
    pub tie_bidir: bool,
    /// Runs the backbone injection before the temporal-token update.
    /// By default the update runs first so both interactions reach the
    /// backbone output.
    pub inject_first: bool,
}

/// Which stream a memory belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StateTag {
    Stream(Modality),
    /// Shared memory over both streams.
    Mixed,
}

impl StateTag {
    pub fn code(self) -> u8 {
        match self {
            StateTag::Stream(m) => m.index() as u8,
            StateTag::Mixed => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0..=3 => Modality::from_index(code as usize).map(StateTag::Stream),
            4 => Some(StateTag::Mixed),
            _ => None,
        }
    }
}

/// Hidden state `h: [C, d_state]` of one memory.
#[derive(Debug, Clone)]
pub struct SsmState<T> {
    pub h: Tensor<T>,
    pub frame_index: u64,
    pub tag: StateTag,
}

/// Previous-frame search tokens used by [`TemporalMode::Token`].
#[derive(Debug, Clone)]
pub struct ContextState<T> {
    pub tokens: Tensor<T>,
    pub frame_index: u64,
}

/// All temporal memory of one tracking session.
#[derive(Debug, Clone)]
pub struct TemporalStates<T> {
    /// One entry per hooked block: `[rgb, x]` (decoupled) or `[mixed]`.
    pub blocks: Vec<Vec<SsmState<T>>>,
    pub context: Option<ContextState<T>>,
}

/// Graph-side view of [`TemporalStates`] used during a forward pass.
#[derive(Debug, Clone)]
pub struct GraphStates {
    pub h: Vec<Vec<Var>>,
    pub context: Option<Var>,
}

impl<T: Scalar> TemporalStates<T> {
    /// Zero memories for `hooks` hooked blocks.
    pub fn reset(cfg: &TemporalConfig, hooks: usize, search_tokens: usize, x: Modality) -> Self {
        let zero = |c: usize, tag| SsmState {
            h: Tensor::zeros(&[c, cfg.d_state]),
            frame_index: 0,
            tag,
        };
        let blocks = match cfg.mode {
            TemporalMode::Decoupled => (0..hooks)
                .map(|_| {
                    vec![
                        zero(cfg.channels, StateTag::Stream(Modality::Rgb)),
                        zero(cfg.channels, StateTag::Stream(x)),
                    ]
                })
                .collect(),
            TemporalMode::Mixed => (0..hooks)
                .map(|_| vec![zero(2 * cfg.channels, StateTag::Mixed)])
                .collect(),
            TemporalMode::Off | TemporalMode::Token => Vec::new(),
        };
        let context = (cfg.mode == TemporalMode::Token).then(|| ContextState {
            tokens: Tensor::zeros(&[search_tokens, cfg.channels]),
            frame_index: 0,
        });
        TemporalStates { blocks, context }
    }

    /// Frames processed so far (0 right after a reset).
    pub fn frame_index(&self) -> u64 {
        self.blocks
            .iter()
            .flatten()
            .map(|s| s.frame_index)
            .chain(self.context.iter().map(|c| c.frame_index))
            .next()
            .unwrap_or(0)
    }

    /// Binds the states as untracked graph constants.
    pub fn to_graph(&self, g: &mut Graph<T>) -> GraphStates {
        GraphStates {
            h: self
                .blocks
                .iter()
                .map(|b| b.iter().map(|s| g.constant(s.h.clone())).collect())
                .collect(),
            context: self.context.as_ref().map(|c| g.constant(c.tokens.clone())),
        }
    }

    /// Reads back the states after one processed frame.
    pub fn advance(&self, g: &Graph<T>, next: &GraphStates) -> Self {
        TemporalStates {
            blocks: self
                .blocks
                .iter()
                .zip(&next.h)
                .map(|(old, new)| {
                    old.iter()
                        .zip(new)
                        .map(|(s, &v)| SsmState {
                            h: g.value(v).clone(),
                            frame_index: s.frame_index + 1,
                            tag: s.tag,
                        })
                        .collect()
                })
                .collect(),
            context: self.context.as_ref().zip(next.context).map(|(c, v)| ContextState {
                tokens: g.value(v).clone(),
                frame_index: c.frame_index + 1,
            }),
        }
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.blocks.len() == other.blocks.len()
            && self.blocks.iter().zip(&other.blocks).all(|(a, b)| {
                a.len() == b.len()
                    && a.iter().zip(b).all(|(x, y)| {
                        x.tag == y.tag && x.frame_index == y.frame_index && x.h.bit_eq(&y.h)
                    })
            })
            && match (&self.context, &other.context) {
                (None, None) => true,
                (Some(a), Some(b)) => a.frame_index == b.frame_index && a.tokens.bit_eq(&b.tokens),
                _ => false,
            }
    }
}

const STATE_MAGIC: &[u8; 4] = b"MDTS";
const STATE_VERSION: u16 = 1;
/// Record code and block index marking the token-context record.
const CONTEXT_CODE: u8 = 5;
const CONTEXT_BLOCK: u16 = u16::MAX;

fn put_record<T: Scalar>(out: &mut Vec<u8>, block: u16, code: u8, frame: u64, t: &Tensor<T>) {
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    out.extend_from_slice(&block.to_le_bytes());
    out.push(code);
    out.extend_from_slice(&frame.to_le_bytes());
    out.push(T::DTYPE.code());
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for &v in t.data() {
        v.write_le(out);
    }
}

/// Little-endian byte reader that reports offsets on failure.
pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }

    /// Reads `count` elements stored as `dtype` into `T`.
    pub fn elements<T: Scalar>(&mut self, dtype: DType, count: usize, what: &str) -> Result<Vec<T>> {
        let start = self.pos;
        if dtype != T::DTYPE {
            return Err(Error::format(
                start,
                format!("{what} stored as {} but {} was requested", dtype.name(), T::DTYPE.name()),
            ));
        }
        let size = dtype.size_of();
        let raw = self.take(count.saturating_mul(size), what)?;
        Ok(raw.chunks_exact(size).map(T::read_le).collect())
    }
}

impl<T: Scalar> TemporalStates<T> {
    /// Encodes as an `MDTS` container.
    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(STATE_MAGIC);
        out.extend_from_slice(&STATE_VERSION.to_le_bytes());
        for (b, states) in self.blocks.iter().enumerate() {
            for s in states {
                put_record(&mut out, b as u16, s.tag.code(), s.frame_index, &s.h);
            }
        }
        if let Some(c) = &self.context {
            put_record(&mut out, CONTEXT_BLOCK, CONTEXT_CODE, c.frame_index, &c.tokens);
        }
        out
    }

    /// Decodes an `MDTS` container; failures carry the byte offset.
    pub fn restore(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4, "magic")? != STATE_MAGIC {
            return Err(Error::format(0, "bad magic, expected MDTS"));
        }
        let at = r.pos;
        let version = r.u16("version")?;
        if version != STATE_VERSION {
            return Err(Error::format(at, format!("unsupported state version {version}")));
        }
        let mut blocks: Vec<Vec<SsmState<T>>> = Vec::new();
        let mut context = None;
        while !r.done() {
            let start = r.pos;
            let block = r.u16("block index")?;
            let code_at = r.pos;
            let code = r.u8("modality")?;
            let frame_index = r.u64("frame index")?;
            let dtype_at = r.pos;
            let dtype = DType::from_code(r.u8("dtype")?)
                .ok_or_else(|| Error::format(dtype_at, "unknown dtype code"))?;
            let rows = r.u32("rows")? as usize;
            let cols = r.u32("cols")? as usize;
            if rows == 0 || cols == 0 {
                return Err(Error::format(start, "empty state record"));
            }
            let data = r.elements::<T>(dtype, rows * cols, "state buffer")?;
            let tensor = Tensor::from_vec(&[rows, cols], data)?;
            if code == CONTEXT_CODE {
                if block != CONTEXT_BLOCK || context.is_some() {
                    return Err(Error::format(start, "misplaced context record"));
                }
                context = Some(ContextState {
                    tokens: tensor,
                    frame_index,
                });
                continue;
            }
            let tag = StateTag::from_code(code)
                .ok_or_else(|| Error::format(code_at, format!("unknown modality code {code}")))?;
            let block = block as usize;
            if block == blocks.len() {
                blocks.push(Vec::new());
            } else if block + 1 != blocks.len() {
                return Err(Error::format(start, format!("block {block} out of order")));
            }
            blocks[block].push(SsmState {
                h: tensor,
                frame_index,
                tag,
            });
        }
        Ok(TemporalStates { blocks, context })
    }
}

/// Selective state-space layer parameters.
#[derive(Debug, Clone)]
pub struct Ssm {
    pub channels: usize,
    pub d_state: usize,
    pub a_log: ParamId,
    pub d: ParamId,
    pub delta: Linear,
    pub b: Linear,
    pub c: Linear,
}

/// `softplus^-1(0.01)`: initial time step bias.
pub fn delta_bias_init() -> f64 {
    (0.01f64.exp() - 1.0).ln()
}

impl Ssm {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        d_state: usize,
        rng: &mut R,
    ) -> Result<Self> {
        // A = -exp(A_log) spans -1 .. -d_state, log-spaced along the state axis
        let ln_max = (d_state as f64).ln();
        let mut a_log = Vec::with_capacity(channels * d_state);
        for _ in 0..channels {
            for j in 0..d_state {
                let frac = if d_state > 1 { j as f64 / (d_state - 1) as f64 } else { 0.0 };
                a_log.push(T::from_f64_lossy(frac * ln_max));
            }
        }
        let a_log = store.add(format!("{name}.a_log"), Tensor::from_vec(&[channels, d_state], a_log)?)?;
        let d = nn::constant(store, &format!("{name}.d"), &[channels], 1.0)?;
        let delta = Linear::new(store, &format!("{name}.delta"), channels, channels, true, rng)?;
        if let Some(b) = delta.bias {
            store.get_mut(b).value.fill(T::from_f64_lossy(delta_bias_init()));
        }
        let b = Linear::new(store, &format!("{name}.b"), channels, d_state, false, rng)?;
        let c = Linear::new(store, &format!("{name}.c"), channels, d_state, false, rng)?;
        Ok(Ssm {
            channels,
            d_state,
            a_log,
            d,
            delta,
            b,
            c,
        })
    }

    /// Scans the rows of `seq` from state `h0`: returns `(seq + y, h_final)`.
    pub fn scan<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        seq: Var,
        h0: Var,
    ) -> Result<(Var, Var)> {
        let pre = self.delta.forward(g, store, seq)?;
        let delta = g.softplus(pre)?;
        let b = self.b.forward(g, store, seq)?;
        let c = self.c.forward(g, store, seq)?;
        let a_log = g.param(store, self.a_log);
        let a = g.exp(a_log)?;
        let a = g.scale(a, -T::one())?;
        let d = g.param(store, self.d);
        let (y, h) = g.selective_scan(seq, delta, b, c, a, d, h0)?;
        let out = g.add(seq, y)?;
        Ok((out, h))
    }
}

/// Zero-order-hold discretization with the first-order input term:
/// `Abar = exp(delta * A)`, `Bbar[c, :] = delta[c] * B`.
pub fn ssm_discretize<T: Scalar>(
    a: &Tensor<T>,
    delta: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, d) = a.dims2("ssm_discretize")?;
    if delta.shape() != [c] || b.shape() != [d] {
        return Err(Error::shape(
            "ssm_discretize",
            format!("A {:?}, delta {:?}, B {:?}", a.shape(), delta.shape(), b.shape()),
        ));
    }
    if delta.data().iter().any(|&v| v <= T::zero()) {
        return Err(Error::domain("ssm_discretize", "time step must be positive"));
    }
    let mut abar = Vec::with_capacity(c * d);
    let mut bbar = Vec::with_capacity(c * d);
    for ch in 0..c {
        let dt = delta.data()[ch];
        for j in 0..d {
            abar.push((dt * a.data()[ch * d + j]).exp());
            bbar.push(dt * b.data()[j]);
        }
    }
    Ok((Tensor::from_vec(&[c, d], abar)?, Tensor::from_vec(&[c, d], bbar)?))
}

/// One recurrence step from discretized `Abar`, `Bbar`:
/// `h = Abar * h_prev + Bbar * x`, `y = <c_out, h> + D * x`.
pub fn ssm_step<T: Scalar>(
    h_prev: &Tensor<T>,
    x: &Tensor<T>,
    abar: &Tensor<T>,
    bbar: &Tensor<T>,
    c_out: &Tensor<T>,
    d: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, ds) = h_prev.dims2("ssm_step")?;
    if x.shape() != [c] || abar.shape() != [c, ds] || bbar.shape() != [c, ds] || c_out.shape() != [ds] || d.shape() != [c] {
        return Err(Error::shape("ssm_step", "inconsistent shapes".to_string()));
    }
    let mut h = Vec::with_capacity(c * ds);
    let mut y = Vec::with_capacity(c);
    for ch in 0..c {
        let mut acc = T::zero();
        for j in 0..ds {
            let k = ch * ds + j;
            let v = abar.data()[k] * h_prev.data()[k] + bbar.data()[k] * x.data()[ch];
            acc = acc + c_out.data()[j] * v;
            h.push(v);
        }
        y.push(acc + d.data()[ch] * x.data()[ch]);
    }
    Ok((Tensor::from_vec(&[c, ds], h)?, Tensor::from_vec(&[c], y)?))
}

/// Weights of the temporal module attached to one backbone block.
#[derive(Debug, Clone)]
pub struct TemporalModule {
    pub cfg: TemporalConfig,
    /// RGB queries attending to X (and, when tied, the reverse too).
    pub bidir_rgb: Option<CrossAttention>,
    pub bidir_x: Option<CrossAttention>,
    /// `[rgb, x]` (decoupled) or `[mixed]`.
    pub ssm: Vec<Ssm>,
    pub inject: [CrossAttention; 2],
    pub update: [CrossAttention; 2],
}

impl TemporalModule {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: TemporalConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let (c, h) = (cfg.channels, cfg.heads);
        let cross = cfg.mode == TemporalMode::Decoupled && !cfg.no_cross;
        let bidir_rgb = if cross {
            Some(CrossAttention::new(store, &format!("{name}.bidir_rgb"), c, h, rng)?)
        } else {
            None
        };
        let bidir_x = if cross && !cfg.tie_bidir {
            Some(CrossAttention::new(store, &format!("{name}.bidir_x"), c, h, rng)?)
        } else {
            None
        };
        let ssm = match cfg.mode {
            TemporalMode::Decoupled => vec![
                Ssm::new(store, &format!("{name}.ssm_rgb"), c, cfg.d_state, rng)?,
                Ssm::new(store, &format!("{name}.ssm_x"), c, cfg.d_state, rng)?,
            ],
            TemporalMode::Mixed => vec![Ssm::new(store, &format!("{name}.ssm_mixed"), 2 * c, cfg.d_state, rng)?],
            _ => {
                return Err(Error::Contract(format!(
                    "temporal module requested in mode {}",
                    cfg.mode.as_str()
                )))
            }
        };
        Ok(TemporalModule {
            cfg,
            bidir_rgb,
            bidir_x,
            ssm,
            inject: [
                CrossAttention::new(store, &format!("{name}.inject_rgb"), c, h, rng)?,
                CrossAttention::new(store, &format!("{name}.inject_x"), c, h, rng)?,
            ],
            update: [
                CrossAttention::new(store, &format!("{name}.update_rgb"), c, h, rng)?,
                CrossAttention::new(store, &format!("{name}.update_x"), c, h, rng)?,
            ],
        })
    }

    /// Symmetric exchange: both outputs are computed from the inputs as given.
    pub fn bidir_cross_attn<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        s_rgb: Var,
        s_x: Var,
    ) -> Result<(Var, Var)> {
        if g.shape(s_rgb) != g.shape(s_x) {
            return Err(Error::shape(
                "bidir_cross_attn",
                format!("{:?} vs {:?}", g.shape(s_rgb), g.shape(s_x)),
            ));
        }
        let Some(rgb_q) = &self.bidir_rgb else {
            return Ok((s_rgb, s_x));
        };
        let x_q = self.bidir_x.as_ref().unwrap_or(rgb_q);
        let new_rgb = rgb_q.forward(g, store, s_rgb, s_x)?;
        let new_x = x_q.forward(g, store, s_x, s_rgb)?;
        Ok((new_rgb, new_x))
    }

    /// The two interactions between backbone search tokens and temporal
    /// tokens of stream `stream` (0 = RGB, 1 = X).
    pub fn inject_update<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        stream: usize,
        backbone: Var,
        temporal: Var,
    ) -> Result<(Var, Var)> {
        if g.shape(backbone) != g.shape(temporal) {
            return Err(Error::shape(
                "inject_update",
                format!("{:?} vs {:?}", g.shape(backbone), g.shape(temporal)),
            ));
        }
        let (inject, update) = (&self.inject[stream], &self.update[stream]);
        if self.cfg.inject_first {
            let b = inject.forward(g, store, backbone, temporal)?;
            let t = update.forward(g, store, temporal, b)?;
            Ok((b, t))
        } else {
            let t = update.forward(g, store, temporal, backbone)?;
            let b = inject.forward(g, store, backbone, t)?;
            Ok((b, t))
        }
    }

    /// Runs the module on the search segments of `joint`, consuming and
    /// returning this block's memory states.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        joint: &JointSeq,
        h: &[Var],
    ) -> Result<(JointSeq, Vec<Var>)> {
        let (s_rgb, s_x) = split_search(g, joint)?;
        let (b_rgb, b_x) = (s_rgb.tokens, s_x.tokens);
        let (t_rgb, t_x, new_h) = match self.cfg.mode {
            TemporalMode::Decoupled => {
                if h.len() != 2 {
                    return Err(Error::Contract(format!("decoupled module got {} states", h.len())));
                }
                let (c_rgb, c_x) = self.bidir_cross_attn(g, store, b_rgb, b_x)?;
                let (t_rgb, h_rgb) = self.ssm[0].scan(g, store, c_rgb, h[0])?;
                let (t_x, h_x) = self.ssm[1].scan(g, store, c_x, h[1])?;
                (t_rgb, t_x, vec![h_rgb, h_x])
            }
            TemporalMode::Mixed => {
                if h.len() != 1 {
                    return Err(Error::Contract(format!("mixed module got {} states", h.len())));
                }
                let cat = g.concat_cols(&[b_rgb, b_x])?;
                let (t, h_mixed) = self.ssm[0].scan(g, store, cat, h[0])?;
                let c = self.cfg.channels;
                let t_rgb = g.slice_cols(t, 0, c)?;
                let t_x = g.slice_cols(t, c, c)?;
                (t_rgb, t_x, vec![h_mixed])
            }
            _ => unreachable!("constructor rejects other modes"),
        };
        let (out_rgb, _) = self.inject_update(g, store, 0, b_rgb, t_rgb)?;
        let (out_x, _) = self.inject_update(g, store, 1, b_x, t_x)?;
        let joint = replace_search(g, joint, out_rgb, out_x)?;
        Ok((joint, new_h))
    }

    /// Memory tags this module expects for an X modality.
    pub fn expected_tags(&self, x: Modality) -> Vec<StateTag> {
        match self.cfg.mode {
            TemporalMode::Mixed => vec![StateTag::Mixed],
            _ => vec![StateTag::Stream(Modality::Rgb), StateTag::Stream(x)],
        }
    }

    /// Zeroes the V projections of every attention in the module.
    pub fn zero_values<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for ca in self
            .bidir_rgb
            .iter()
            .chain(self.bidir_x.iter())
            .chain(self.inject.iter())
            .chain(self.update.iter())
        {
            ca.attn.zero_values(store);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discretize_spot_values() {
        let a = Tensor::from_vec(&[1, 2], vec![0.0, -1.0]).unwrap();
        let delta = Tensor::from_vec(&[1], vec![2f64.ln()]).unwrap();
        let b = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let (abar, bbar) = ssm_discretize(&a, &delta, &b).unwrap();
        assert_eq!(abar.data()[0], 1.0);
        assert!((abar.data()[1] - 0.5).abs() < 1e-12);
        assert!((bbar.data()[1] - 2.0 * 2f64.ln()).abs() < 1e-12);

        let delta = Tensor::from_vec(&[1], vec![0.1]).unwrap();
        let (_, bbar) = ssm_discretize(&a, &delta, &b).unwrap();
        assert!((bbar.data()[0] - 0.1).abs() < 1e-15 && (bbar.data()[1] - 0.2).abs() < 1e-15);

        let bad = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        assert!(matches!(ssm_discretize(&a, &bad, &b), Err(Error::Domain { .. })));
    }

    #[test]
    fn one_step_by_hand() {
        let t = |s: &[usize], v: Vec<f64>| Tensor::from_vec(s, v).unwrap();
        let (h, y) = ssm_step(
            &t(&[1, 1], vec![0.0]),
            &t(&[1], vec![3.0]),
            &t(&[1, 1], vec![0.9]),
            &t(&[1, 1], vec![1.0]),
            &t(&[1], vec![2.0]),
            &t(&[1], vec![0.0]),
        )
        .unwrap();
        assert_eq!(h.data(), &[3.0]);
        assert_eq!(y.data(), &[6.0]);

        // memoryless limit and skip path
        let (h, y) = ssm_step(
            &t(&[1, 2], vec![5.0, -5.0]),
            &t(&[1], vec![0.5]),
            &t(&[1, 2], vec![0.0, 0.0]),
            &t(&[1, 2], vec![1.0, 1.0]),
            &t(&[2], vec![0.0, 0.0]),
            &t(&[1], vec![1.0]),
        )
        .unwrap();
        assert_eq!(h.data(), &[0.5, 0.5]);
        assert_eq!(y.data(), &[0.5]);
    }

    #[test]
    fn delta_bias_gives_small_step() {
        let s = crate::numerics::functional::softplus_scalar(delta_bias_init());
        assert!((s - 0.01).abs() < 1e-12);
    }

    #[test]
    fn state_tags_round_trip() {
        for code in 0..5 {
            assert_eq!(StateTag::from_code(code).unwrap().code(), code);
        }
        assert!(StateTag::from_code(9).is_none());
    }
}
