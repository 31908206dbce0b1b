//! Flat `key=value` configuration with dotted keys.
//!
//! Blank lines and `#` comments are ignored. Every key must be known;
//! unknown, duplicate or malformed entries are reported together.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::BackboneConfig;
use crate::data::SynthConfig;
use crate::embed::{EmbedConfig, Modality};
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionMode, NUM_EXPERTS, TOP_K};
use crate::head::{HeadConfig, LossWeights};
use crate::numerics::DType;
use crate::temporal::{TemporalConfig, TemporalMode};

/// Parsed `key -> (value, line)` pairs awaiting typed extraction.
#[derive(Debug, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (String, usize)>,
    errors: Vec<String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Self {
        let mut kv = KeyValues::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                kv.errors.push(format!("line {}: expected key=value, got {line:?}", i + 1));
                continue;
            };
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if let Some((_, first)) = kv.entries.get(&k) {
                kv.errors.push(format!("line {}: {k} already set on line {first}", i + 1));
                continue;
            }
            kv.entries.insert(k, (v, i + 1));
        }
        kv
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), (value.into(), 0));
    }

    /// Removes and parses `key`, recording a message on failure.
    fn take<V: FromStr>(&mut self, key: &str, slot: &mut V)
    where
        V::Err: std::fmt::Display,
    {
        if let Some((v, line)) = self.entries.remove(key) {
            match v.parse::<V>() {
                Ok(x) => *slot = x,
                Err(e) => self.errors.push(format!("line {line}: {key}={v:?}: {e}")),
            }
        }
    }

    fn take_bool(&mut self, key: &str, slot: &mut bool) {
        if let Some((v, line)) = self.entries.remove(key) {
            match v.as_str() {
                "true" | "1" | "yes" => *slot = true,
                "false" | "0" | "no" => *slot = false,
                _ => self.errors.push(format!("line {line}: {key}={v:?}: expected a boolean")),
            }
        }
    }

    fn take_path(&mut self, key: &str, slot: &mut Option<PathBuf>) {
        if let Some((v, _)) = self.entries.remove(key) {
            *slot = (!v.is_empty()).then(|| PathBuf::from(v));
        }
    }

    /// Errors so far plus every key nobody consumed.
    fn finish(mut self) -> Result<()> {
        for (k, (_, line)) in &self.entries {
            self.errors.push(format!("line {line}: unknown key {k}"));
        }
        if self.errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(self.errors))
        }
    }
}

fn parse_dtype(s: &str) -> std::result::Result<DType, String> {
    match s {
        "f32" | "float32" => Ok(DType::F32),
        "f64" | "float64" => Ok(DType::F64),
        other => Err(format!("unknown dtype {other:?} (f32, f64)")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub embed: EmbedConfig,
    pub backbone: BackboneConfig,
    pub temporal: TemporalConfig,
    pub fusion: FusionConfig,
    pub head: HeadConfig,
    pub loss: LossWeights,
    pub dtype: DType,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let c = 64;
        ModelConfig {
            embed: EmbedConfig {
                patch: 16,
                channels: c,
                template_side: 32,
                search_side: 64,
            },
            backbone: BackboneConfig {
                depth: 4,
                channels: c,
                heads: 4,
                temporal_every: 1,
            },
            temporal: TemporalConfig {
                channels: c,
                heads: 4,
                d_state: 8,
                mode: TemporalMode::Decoupled,
                no_cross: false,
                tie_bidir: false,
                inject_first: false,
            },
            fusion: FusionConfig {
                channels: c,
                bottleneck: 4,
                top_k: TOP_K,
                mode: FusionMode::Moe,
                true_modality_experts: false,
            },
            head: HeadConfig { channels: c, hidden: 32 },
            loss: LossWeights::default(),
            dtype: DType::F32,
        }
    }
}

impl ModelConfig {
    /// Sets the channel width everywhere it appears.
    pub fn with_channels(mut self, c: usize) -> Self {
        self.embed.channels = c;
        self.backbone.channels = c;
        self.temporal.channels = c;
        self.fusion.channels = c;
        self.head.channels = c;
        self
    }

    pub fn with_heads(mut self, heads: usize) -> Self {
        self.backbone.heads = heads;
        self.temporal.heads = heads;
        self
    }

    /// Every inconsistency, one message each.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        let e = &self.embed;
        let c = e.channels;
        if c == 0 {
            p.push("embed.channels must be positive".into());
        }
        if [self.backbone.channels, self.temporal.channels, self.fusion.channels, self.head.channels] != [c; 4] {
            p.push("channel widths disagree between modules".into());
        }
        if self.temporal.heads != self.backbone.heads {
            p.push("temporal and backbone head counts disagree".into());
        }
        if e.patch == 0 || !e.template_side.is_multiple_of(e.patch) || e.template_side == 0 {
            p.push(format!("embed.template={} is not a positive multiple of embed.patch={}", e.template_side, e.patch));
        }
        if e.patch == 0 || !e.search_side.is_multiple_of(e.patch) || e.search_side == 0 {
            p.push(format!("embed.search={} is not a positive multiple of embed.patch={}", e.search_side, e.patch));
        }
        if self.backbone.depth == 0 {
            p.push("backbone.n must be positive".into());
        }
        if self.backbone.heads == 0 || !c.is_multiple_of(self.backbone.heads.max(1)) {
            p.push(format!("backbone.heads={} must divide embed.channels={c}", self.backbone.heads));
        }
        if self.backbone.temporal_every == 0 {
            p.push("backbone.temporal_every must be positive".into());
        } else if self.temporal.mode.has_ssm() && self.backbone.hook_count() == 0 {
            p.push("backbone.temporal_every leaves no hooked block".into());
        }
        if self.temporal.d_state == 0 {
            p.push("temporal.d_state must be positive".into());
        }
        if self.fusion.top_k == 0 || self.fusion.top_k > NUM_EXPERTS {
            p.push(format!("fusion.k={} must be in 1..={NUM_EXPERTS}", self.fusion.top_k));
        }
        if self.fusion.bottleneck == 0 {
            p.push("fusion.r must be positive".into());
        }
        if self.head.hidden == 0 {
            p.push("head.hidden must be positive".into());
        }
        if let Err(m) = self.loss.validate() {
            p.push(m);
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    fn take(&mut self, kv: &mut KeyValues) {
        let mut c = self.embed.channels;
        let mut heads = self.backbone.heads;
        kv.take("embed.channels", &mut c);
        kv.take("backbone.heads", &mut heads);
        *self = self.with_channels(c).with_heads(heads);
        kv.take("embed.patch", &mut self.embed.patch);
        kv.take("embed.template", &mut self.embed.template_side);
        kv.take("embed.search", &mut self.embed.search_side);
        kv.take("backbone.n", &mut self.backbone.depth);
        kv.take("backbone.temporal_every", &mut self.backbone.temporal_every);
        kv.take("temporal.mode", &mut self.temporal.mode);
        kv.take("temporal.d_state", &mut self.temporal.d_state);
        kv.take_bool("temporal.no_cross", &mut self.temporal.no_cross);
        kv.take_bool("temporal.tie_bidir", &mut self.temporal.tie_bidir);
        kv.take_bool("temporal.inject_first", &mut self.temporal.inject_first);
        kv.take("fusion.mode", &mut self.fusion.mode);
        kv.take("fusion.k", &mut self.fusion.top_k);
        kv.take("fusion.r", &mut self.fusion.bottleneck);
        kv.take_bool("fusion.true_modality_experts", &mut self.fusion.true_modality_experts);
        kv.take("head.hidden", &mut self.head.hidden);
        kv.take("loss.cls", &mut self.loss.cls);
        kv.take("loss.l1", &mut self.loss.l1);
        kv.take("loss.giou", &mut self.loss.giou);
        kv.take("loss.balance", &mut self.loss.balance);
        if let Some((v, line)) = kv.entries.remove("model.dtype") {
            match parse_dtype(&v) {
                Ok(d) => self.dtype = d,
                Err(e) => kv.errors.push(format!("line {line}: model.dtype: {e}")),
            }
        }
    }

    /// Canonical `key=value` lines, parseable by [`Config::parse`].
    pub fn to_text(&self) -> String {
        let e = &self.embed;
        let t = &self.temporal;
        let f = &self.fusion;
        let l = &self.loss;
        [
            format!("model.dtype={}", if self.dtype == DType::F32 { "f32" } else { "f64" }),
            format!("embed.patch={}", e.patch),
            format!("embed.channels={}", e.channels),
            format!("embed.template={}", e.template_side),
            format!("embed.search={}", e.search_side),
            format!("backbone.n={}", self.backbone.depth),
            format!("backbone.heads={}", self.backbone.heads),
            format!("backbone.temporal_every={}", self.backbone.temporal_every),
            format!("temporal.mode={}", t.mode.as_str()),
            format!("temporal.d_state={}", t.d_state),
            format!("temporal.no_cross={}", t.no_cross),
            format!("temporal.tie_bidir={}", t.tie_bidir),
            format!("temporal.inject_first={}", t.inject_first),
            format!("fusion.mode={}", f.mode.as_str()),
            format!("fusion.k={}", f.top_k),
            format!("fusion.r={}", f.bottleneck),
            format!("fusion.true_modality_experts={}", f.true_modality_experts),
            format!("head.hidden={}", self.head.hidden),
            format!("loss.cls={:?}", l.cls),
            format!("loss.l1={:?}", l.l1),
            format!("loss.giou={:?}", l.giou),
            format!("loss.balance={:?}", l.balance),
        ]
        .join("\n")
            + "\n"
    }

    /// Parses text holding only model keys.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text);
        let mut cfg = ModelConfig::default();
        cfg.take(&mut kv);
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// One RGB+X pairing.
    Specific,
    /// All pairings mixed uniformly per batch element.
    Unified,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Specific => "specific",
            Regime::Unified => "unified",
        })
    }
}

impl FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "specific" => Ok(Regime::Specific),
            "unified" => Ok(Regime::Unified),
            other => Err(format!("unknown regime {other:?} (specific, unified)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub regime: Regime,
    /// X modality of the specific regime.
    pub modality: Modality,
    pub steps_per_epoch: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Linear warmup length in steps, then cosine decay to `lr * min_lr_ratio`.
    pub warmup: usize,
    pub min_lr_ratio: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
    /// Consecutive search frames per sample, trained through the carried
    /// temporal state.
    pub clip: usize,
    /// Frames run without gradient before the clip to warm the state.
    pub burn_in: usize,
    /// Largest template-to-search frame distance.
    pub max_gap: usize,
    /// Dataset roots: one for the specific regime, or one per X modality
    /// (`train.data.t`, `.e`, `.d`) for the unified regime. Synthetic data
    /// is generated when absent.
    pub data: Option<PathBuf>,
    pub data_by_modality: [Option<PathBuf>; 3],
    /// Synthetic sequences per modality.
    pub sequences: usize,
    /// Checkpoint directory; one file per epoch.
    pub out: Option<PathBuf>,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            regime: Regime::Specific,
            modality: Modality::T,
            steps_per_epoch: 100,
            epochs: 20,
            batch: 16,
            lr: 5e-5,
            weight_decay: 1e-4,
            warmup: 0,
            min_lr_ratio: 1.0,
            grad_clip: 0.0,
            seed: 0,
            clip: 2,
            burn_in: 1,
            max_gap: 30,
            data: None,
            data_by_modality: [None, None, None],
            sequences: 16,
            out: None,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch * self.epochs
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        for (k, v) in [
            ("train.steps_per_epoch", self.steps_per_epoch),
            ("train.epochs", self.epochs),
            ("train.batch", self.batch),
            ("train.clip", self.clip),
            ("train.max_gap", self.max_gap),
            ("train.log_every", self.log_every),
        ] {
            if v == 0 {
                p.push(format!("{k} must be positive"));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            p.push("train.lr must be positive".into());
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            p.push("train.weight_decay must be nonnegative".into());
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            p.push("train.grad_clip must be nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            p.push("train.min_lr_ratio must be in [0, 1]".into());
        }
        if self.modality == Modality::Rgb {
            p.push("train.modality must be T, E or D".into());
        }
        if self.data.is_none() && self.sequences == 0 {
            p.push("train.sequences must be positive without train.data".into());
        }
        p
    }

    fn take(&mut self, kv: &mut KeyValues) {
        kv.take("train.regime", &mut self.regime);
        kv.take("train.modality", &mut self.modality);
        kv.take("train.steps_per_epoch", &mut self.steps_per_epoch);
        kv.take("train.epochs", &mut self.epochs);
        kv.take("train.batch", &mut self.batch);
        kv.take("train.lr", &mut self.lr);
        kv.take("train.weight_decay", &mut self.weight_decay);
        kv.take("train.warmup", &mut self.warmup);
        kv.take("train.min_lr_ratio", &mut self.min_lr_ratio);
        kv.take("train.grad_clip", &mut self.grad_clip);
        kv.take("train.seed", &mut self.seed);
        kv.take("train.clip", &mut self.clip);
        kv.take("train.burn_in", &mut self.burn_in);
        kv.take("train.max_gap", &mut self.max_gap);
        kv.take_path("train.data", &mut self.data);
        for (slot, m) in self.data_by_modality.iter_mut().zip(Modality::X) {
            kv.take_path(&format!("train.data.{}", m.as_str().to_lowercase()), slot);
        }
        kv.take("train.sequences", &mut self.sequences);
        kv.take_path("train.out", &mut self.out);
        kv.take("train.log_every", &mut self.log_every);
    }
}

/// Settings of the `synth` command and of generated training data.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub cfg: SynthConfig,
    /// Sequences written per modality.
    pub count: usize,
    pub modalities: Vec<Modality>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            cfg: SynthConfig::default(),
            count: 8,
            modalities: vec![Modality::T],
        }
    }
}

impl SynthSpec {
    fn take(&mut self, kv: &mut KeyValues) {
        let c = &mut self.cfg;
        kv.take("synth.canvas", &mut c.canvas);
        kv.take("synth.frames", &mut c.frames);
        kv.take("synth.target_min", &mut c.target_min);
        kv.take("synth.target_max", &mut c.target_max);
        kv.take("synth.size_drift", &mut c.size_drift);
        kv.take("synth.speed", &mut c.speed);
        kv.take("synth.amplitude", &mut c.amplitude);
        kv.take("synth.period", &mut c.period);
        kv.take("synth.distractors", &mut c.distractors);
        kv.take("synth.occluders", &mut c.occluders);
        kv.take("synth.noise", &mut c.noise);
        kv.take("synth.seed", &mut c.seed);
        kv.take("synth.count", &mut self.count);
        if let Some((v, line)) = kv.entries.remove("synth.modality") {
            let parsed: std::result::Result<Vec<Modality>, String> = if v == "all" {
                Ok(Modality::X.to_vec())
            } else {
                v.split(',').map(|s| s.trim().parse::<Modality>()).collect()
            };
            match parsed {
                Ok(ms) if !ms.is_empty() && !ms.contains(&Modality::Rgb) => self.modalities = ms,
                _ => kv.errors.push(format!("line {line}: synth.modality={v:?}: expected T, E, D, a list or all")),
            }
        }
    }
}

/// A whole configuration file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthSpec,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with(KeyValues::parse(text))
    }

    /// Parses after applying `overrides` on top of the file's entries.
    pub fn parse_with_overrides(text: &str, overrides: &[(&str, String)]) -> Result<Self> {
        let mut kv = KeyValues::parse(text);
        for (k, v) in overrides {
            kv.set(k, v.clone());
        }
        Self::parse_with(kv)
    }

    fn parse_with(mut kv: KeyValues) -> Result<Self> {
        let mut cfg = Config::default();
        cfg.model.take(&mut kv);
        cfg.train.take(&mut kv);
        cfg.synth.take(&mut kv);
        kv.finish()?;
        let mut problems = cfg.model.problems();
        problems.extend(cfg.train.problems());
        if let Err(e) = cfg.synth.cfg.validate() {
            problems.push(format!("synth: {e}"));
        }
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_consistent() {
        assert!(ModelConfig::default().problems().is_empty());
        assert!(TrainConfig::default().problems().is_empty());
    }

    #[test]
    fn dotted_keys_override_defaults() {
        let cfg = Config::parse("# desk\nbackbone.n = 2\nembed.channels=32\ntemporal.mode=mixed\ntrain.lr=1e-3\n").unwrap();
        assert_eq!(cfg.model.backbone.depth, 2);
        assert_eq!(cfg.model.head.channels, 32);
        assert_eq!(cfg.model.temporal.mode, TemporalMode::Mixed);
        assert_eq!(cfg.train.lr, 1e-3);
    }

    #[test]
    fn unknown_and_bad_keys_are_all_reported() {
        let err = Config::parse("backbone.n=x\nbogus.key=1\nfusion.k=2\nfusion.k=3\n").unwrap_err();
        let Error::Config(msgs) = err else { panic!() };
        assert_eq!(msgs.len(), 3, "{msgs:?}");
        assert!(msgs.iter().any(|m| m.contains("bogus.key")));
        assert!(msgs.iter().any(|m| m.contains("backbone.n")));
        assert!(msgs.iter().any(|m| m.contains("already set")));
    }

    #[test]
    fn inconsistent_shapes_list_fields() {
        let err = Config::parse("embed.search=60\nbackbone.heads=3\n").unwrap_err();
        let Error::Config(msgs) = err else { panic!() };
        assert!(msgs.iter().any(|m| m.contains("embed.search")));
        assert!(msgs.iter().any(|m| m.contains("backbone.heads")));
    }

    #[test]
    fn model_text_round_trip() {
        let mut m = ModelConfig::default().with_channels(48);
        m.temporal.no_cross = true;
        m.fusion.mode = FusionMode::Uniform;
        m.loss.balance = 0.125;
        assert_eq!(ModelConfig::from_text(&m.to_text()).unwrap(), m);
    }
}
