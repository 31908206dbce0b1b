//! Procedural RGB + X sequences with exact ground truth.
//!
//! A colored two-tone target follows a linear + sinusoidal path over a
//! textured background, optionally among distractors and occluding bars.
//! The X stream renders the same scene as thermal intensity (target
//! hottest), event polarity (signed frame difference) or depth (target
//! nearest).

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Image, Rect, Sequence};
use crate::embed::Modality;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub canvas: usize,
    pub frames: usize,
    /// Range of the target's base side length in pixels.
    pub target_min: f64,
    pub target_max: f64,
    /// Relative amplitude of the slow size oscillation.
    pub size_drift: f64,
    /// Maximum linear speed per axis, pixels per frame.
    pub speed: f64,
    /// Maximum sinusoid amplitude per axis, pixels.
    pub amplitude: f64,
    /// Sinusoid period in frames.
    pub period: f64,
    pub distractors: usize,
    /// Opaque bars sweeping across the target path.
    pub occluders: usize,
    /// Pixel noise standard deviation.
    pub noise: f64,
    pub modality: Modality,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            canvas: 128,
            frames: 48,
            target_min: 14.0,
            target_max: 20.0,
            size_drift: 0.1,
            speed: 1.5,
            amplitude: 16.0,
            period: 40.0,
            distractors: 2,
            occluders: 0,
            noise: 0.03,
            modality: Modality::T,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.canvas < 16 || self.frames == 0 {
            return Err("canvas must be at least 16 and frames positive".into());
        }
        if !(self.target_min > 1.0 && self.target_min <= self.target_max) {
            return Err("target size range must satisfy 1 < min <= max".into());
        }
        if !(0.0..0.5).contains(&self.size_drift) {
            return Err("size_drift must be in [0, 0.5)".into());
        }
        if self.speed < 0.0 || self.amplitude < 0.0 || self.period <= 0.0 || self.noise < 0.0 {
            return Err("speed, amplitude and noise must be nonnegative, period positive".into());
        }
        if self.modality == Modality::Rgb {
            return Err("X modality must be T, E or D".into());
        }
        Ok(())
    }
}

/// `center(t) = c0 + v t + amp sin(2 pi t / period + phase)`, per axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trajectory {
    pub c0: [f64; 2],
    pub v: [f64; 2],
    pub amp: [f64; 2],
    pub phase: [f64; 2],
    pub period: f64,
}

impl Trajectory {
    pub fn center(&self, t: f64) -> (f64, f64) {
        let axis = |k: usize| self.c0[k] + self.v[k] * t + self.amp[k] * (TAU * t / self.period + self.phase[k]).sin();
        (axis(0), axis(1))
    }
}

/// Target size over time: `base * (1 + drift sin(pi t / period + phase))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizeCurve {
    pub base: [f64; 2],
    pub drift: f64,
    pub phase: f64,
    pub period: f64,
}

impl SizeCurve {
    pub fn size(&self, t: f64) -> (f64, f64) {
        let s = 1.0 + self.drift * (std::f64::consts::PI * t / self.period + self.phase).sin();
        (self.base[0] * s, self.base[1] * s)
    }
}

/// Target motion of a sequence, exposed for oracle checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetPlan {
    pub trajectory: Trajectory,
    pub size: SizeCurve,
}

impl TargetPlan {
    pub fn rect(&self, t: usize) -> Rect {
        let (cx, cy) = self.trajectory.center(t as f64);
        let (w, h) = self.size.size(t as f64);
        Rect::from_center(cx, cy, w, h)
    }
}

/// Draws a motion plan that keeps the target at least one target width
/// away from every canvas edge over frames `-1 .. frames`.
fn plan_target(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<TargetPlan> {
    let base = [
        rng.random_range(cfg.target_min..=cfg.target_max),
        rng.random_range(cfg.target_min..=cfg.target_max),
    ];
    let size = SizeCurve {
        base,
        drift: cfg.size_drift,
        phase: rng.random_range(0.0..TAU),
        period: cfg.period,
    };
    let max_side = base[0].max(base[1]) * (1.0 + cfg.size_drift);
    let (lo, hi) = (1.5 * max_side, cfg.canvas as f64 - 1.5 * max_side);
    if lo >= hi {
        return Err(Error::domain(
            "generate_sequence",
            format!("a {max_side:.1}px target cannot keep its margin on a {}px canvas", cfg.canvas),
        ));
    }
    let mut v = [rng.random_range(-cfg.speed..=cfg.speed), rng.random_range(-cfg.speed..=cfg.speed)];
    let mut amp = [rng.random_range(0.0..=cfg.amplitude), rng.random_range(0.0..=cfg.amplitude)];
    let phase = [rng.random_range(0.0..TAU), rng.random_range(0.0..TAU)];
    let u0: f64 = rng.random();
    let u1: f64 = rng.random();
    for _ in 0..40 {
        let probe = Trajectory {
            c0: [0.0, 0.0],
            v,
            amp,
            phase,
            period: cfg.period,
        };
        let mut ext = [[f64::INFINITY, f64::NEG_INFINITY]; 2];
        for t in -1..cfg.frames as i64 {
            let (x, y) = probe.center(t as f64);
            for (k, p) in [x, y].into_iter().enumerate() {
                ext[k][0] = ext[k][0].min(p);
                ext[k][1] = ext[k][1].max(p);
            }
        }
        let room = |k: usize| (lo - ext[k][0], hi - ext[k][1]);
        let (rx, ry) = (room(0), room(1));
        if rx.0 <= rx.1 && ry.0 <= ry.1 {
            return Ok(TargetPlan {
                trajectory: Trajectory {
                    c0: [rx.0 + u0 * (rx.1 - rx.0), ry.0 + u1 * (ry.1 - ry.0)],
                    ..probe
                },
                size,
            });
        }
        v = v.map(|x| x * 0.7);
        amp = amp.map(|x| x * 0.7);
    }
    Err(Error::domain("generate_sequence", "no feasible motion for the configured canvas"))
}

#[derive(Debug, Clone)]
struct Distractor {
    p0: [f64; 2],
    v: [f64; 2],
    size: [f64; 2],
    color: [f32; 3],
    inner: [f32; 3],
    heat: f32,
    depth: f32,
}

impl Distractor {
    /// Linear motion reflected at the canvas borders.
    fn rect(&self, t: f64, canvas: f64) -> Rect {
        let reflect = |p: f64, lo: f64, hi: f64| {
            let span = hi - lo;
            let m = (p - lo).rem_euclid(2.0 * span);
            lo + if m > span { 2.0 * span - m } else { m }
        };
        let c = |k: usize| reflect(self.p0[k] + self.v[k] * t, self.size[k] / 2.0, canvas - self.size[k] / 2.0);
        Rect::from_center(c(0), c(1), self.size[0], self.size[1])
    }
}

#[derive(Debug, Clone)]
struct Occluder {
    /// Sweeps horizontally when true, vertically otherwise.
    horizontal: bool,
    pos0: f64,
    v: f64,
    thickness: f64,
    shade: f32,
}

impl Occluder {
    fn rect(&self, t: f64, canvas: f64) -> Rect {
        let p = self.pos0 + self.v * t;
        if self.horizontal {
            Rect::new(p - self.thickness / 2.0, 0.0, self.thickness, canvas)
        } else {
            Rect::new(0.0, p - self.thickness / 2.0, canvas, self.thickness)
        }
    }
}

/// Float planes `[c, n, n]` being rendered.
struct Canvas {
    n: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Canvas {
    fn new(n: usize, channels: usize) -> Self {
        Canvas {
            n,
            channels,
            data: vec![0.0; n * n * channels],
        }
    }

    /// Alpha-blends a rectangle with exact per-pixel area coverage.
    fn fill_rect(&mut self, r: &Rect, color: &[f32], alpha: f32) {
        let n = self.n;
        let (x1, y1, x2, y2) = (r.x, r.y, r.x + r.w, r.y + r.h);
        let px0 = x1.floor().max(0.0) as usize;
        let py0 = y1.floor().max(0.0) as usize;
        let px1 = (x2.ceil().max(0.0) as usize).min(n);
        let py1 = (y2.ceil().max(0.0) as usize).min(n);
        for py in py0..py1 {
            let cy = ((py + 1) as f64).min(y2) - (py as f64).max(y1);
            if cy <= 0.0 {
                continue;
            }
            for px in px0..px1 {
                let cx = ((px + 1) as f64).min(x2) - (px as f64).max(x1);
                if cx <= 0.0 {
                    continue;
                }
                let a = alpha * (cx * cy) as f32;
                for (c, &col) in color.iter().enumerate().take(self.channels) {
                    let v = &mut self.data[(c * n + py) * n + px];
                    *v = *v * (1.0 - a) + col * a;
                }
            }
        }
    }

    fn add_noise(&mut self, sigma: f64, rng: &mut ChaCha8Rng) {
        if sigma <= 0.0 {
            return;
        }
        let normal = Normal::new(0.0, sigma).expect("positive sigma");
        for v in self.data.iter_mut() {
            *v += normal.sample(rng) as f32;
        }
    }

    fn into_image(self) -> Image {
        let planes = if self.channels == 3 {
            self.data
        } else {
            let mut p = self.data.clone();
            p.extend_from_slice(&self.data);
            p.extend_from_slice(&self.data);
            p
        };
        Image::from_planes(self.n, self.n, &planes)
    }
}

/// Everything needed to render any frame of a sequence.
struct Scene {
    cfg: SynthConfig,
    plan: TargetPlan,
    outer: [f32; 3],
    inner: [f32; 3],
    bg: [f32; 3],
    /// Background wave: (kx, ky, phase, amplitude) per channel.
    wave: [(f64, f64, f64, f64); 3],
    heat: f32,
    distractors: Vec<Distractor>,
    occluders: Vec<Occluder>,
}

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    let hue = rng.random_range(0.0..6.0f64);
    let (sat, val) = (rng.random_range(0.6..0.95), rng.random_range(0.6..0.95));
    let c = val * sat;
    let x = c * (1.0 - ((hue % 2.0) - 1.0).abs());
    let (r, g, b) = match hue as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = val - c;
    [(r + m) as f32, (g + m) as f32, (b + m) as f32]
}

impl Scene {
    fn new(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate().map_err(|e| Error::domain("generate_sequence", e))?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let plan = plan_target(cfg, &mut rng)?;
        let outer = random_color(&mut rng);
        let inner = random_color(&mut rng);
        let bg = [0; 3].map(|_| rng.random_range(0.15..0.45f32));
        let wave = [0; 3].map(|_| {
            (
                rng.random_range(0.02..0.12),
                rng.random_range(0.02..0.12),
                rng.random_range(0.0..TAU),
                rng.random_range(0.03..0.1),
            )
        });
        let canvas = cfg.canvas as f64;
        let distractors = (0..cfg.distractors)
            .map(|_| {
                let size = [
                    rng.random_range(cfg.target_min..=cfg.target_max),
                    rng.random_range(cfg.target_min..=cfg.target_max),
                ];
                // half of the distractors share the target's outer color
                let color = if rng.random_bool(0.5) { outer } else { random_color(&mut rng) };
                Distractor {
                    p0: [rng.random_range(0.0..canvas), rng.random_range(0.0..canvas)],
                    v: [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)],
                    size,
                    color,
                    inner: random_color(&mut rng),
                    heat: rng.random_range(0.45..0.6),
                    depth: rng.random_range(0.35..0.6),
                }
            })
            .collect();
        let frames = cfg.frames as f64;
        let occluders = (0..cfg.occluders)
            .map(|_| {
                let horizontal = rng.random_bool(0.5);
                let tc = rng.random_range(0.2 * frames..=0.8 * frames);
                let (cx, cy) = plan.trajectory.center(tc);
                let v = rng.random_range(1.0..2.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let through = if horizontal { cx } else { cy };
                Occluder {
                    horizontal,
                    pos0: through - v * tc,
                    v,
                    thickness: rng.random_range(10.0..18.0),
                    shade: rng.random_range(0.35..0.65),
                }
            })
            .collect();
        Ok(Scene {
            cfg: cfg.clone(),
            plan,
            outer,
            inner,
            bg,
            wave,
            heat: rng.random_range(0.85..0.95),
            distractors,
            occluders,
        })
    }

    fn inner_rect(r: &Rect) -> Rect {
        let (cx, cy) = r.center();
        Rect::from_center(cx, cy, r.w * 0.5, r.h * 0.5)
    }

    fn rgb(&self, t: usize, rng: &mut ChaCha8Rng) -> Image {
        let n = self.cfg.canvas;
        let tf = t as f64;
        let mut c = Canvas::new(n, 3);
        for ch in 0..3 {
            let (kx, ky, ph, a) = self.wave[ch];
            for y in 0..n {
                for x in 0..n {
                    c.data[(ch * n + y) * n + x] = self.bg[ch] + (a * (kx * x as f64 + ky * y as f64 + ph).sin()) as f32;
                }
            }
        }
        for d in &self.distractors {
            let r = d.rect(tf, n as f64);
            c.fill_rect(&r, &d.color, 1.0);
            c.fill_rect(&Self::inner_rect(&r), &d.inner, 1.0);
        }
        let r = self.plan.rect(t);
        c.fill_rect(&r, &self.outer, 1.0);
        c.fill_rect(&Self::inner_rect(&r), &self.inner, 1.0);
        for o in &self.occluders {
            c.fill_rect(&o.rect(tf, n as f64), &[o.shade; 3], 1.0);
        }
        c.add_noise(self.cfg.noise, rng);
        c.into_image()
    }

    /// Single-plane rendering of the scene with per-object values.
    fn plane(&self, t: f64, bg: impl Fn(usize, usize) -> f32, value: impl Fn(Object) -> f32, occluder_alpha: f32) -> Canvas {
        let n = self.cfg.canvas;
        let mut c = Canvas::new(n, 1);
        for y in 0..n {
            for x in 0..n {
                c.data[y * n + x] = bg(x, y);
            }
        }
        for d in &self.distractors {
            c.fill_rect(&d.rect(t, n as f64), &[value(Object::Distractor(d))], 1.0);
        }
        let (cx, cy) = self.plan.trajectory.center(t);
        let (w, h) = self.plan.size.size(t);
        c.fill_rect(&Rect::from_center(cx, cy, w, h), &[value(Object::Target)], 1.0);
        for o in &self.occluders {
            c.fill_rect(&o.rect(t, n as f64), &[value(Object::Occluder(o))], occluder_alpha);
        }
        c
    }

    fn x(&self, t: usize, rng: &mut ChaCha8Rng) -> Image {
        let n = self.cfg.canvas as f64;
        let tf = t as f64;
        let (kx, ky, ph, _) = self.wave[0];
        let mut c = match self.cfg.modality {
            Modality::T => self.plane(
                tf,
                |x, y| 0.2 + (0.04 * (kx * x as f64 + ky * y as f64 + ph).sin()) as f32,
                |o| match o {
                    Object::Target => self.heat,
                    Object::Distractor(d) => d.heat,
                    Object::Occluder(_) => 0.3,
                },
                0.5,
            ),
            Modality::D => self.plane(
                tf,
                |_, y| 0.15 + 0.35 * (y as f64 / n) as f32,
                |o| match o {
                    Object::Target => 0.9,
                    Object::Distractor(d) => d.depth,
                    Object::Occluder(_) => 0.7,
                },
                0.5,
            ),
            Modality::E => {
                let luma = |o: Object| match o {
                    Object::Target => 0.9,
                    Object::Distractor(_) => 0.6,
                    Object::Occluder(o) => o.shade,
                };
                let now = self.plane(tf, |_, _| 0.3, luma, 0.5);
                let before = self.plane(tf - 1.0, |_, _| 0.3, luma, 0.5);
                let mut c = Canvas::new(self.cfg.canvas, 1);
                for (dst, (a, b)) in c.data.iter_mut().zip(now.data.iter().zip(&before.data)) {
                    *dst = 0.5 + 0.5 * (3.0 * (a - b)).clamp(-1.0, 1.0);
                }
                // sparse spurious events
                let p = self.cfg.noise.min(1.0);
                for v in c.data.iter_mut() {
                    if rng.random_bool(p) {
                        *v = if rng.random_bool(0.5) { 0.0 } else { 1.0 };
                    }
                }
                return c.into_image();
            }
            Modality::Rgb => unreachable!("validated"),
        };
        c.add_noise(self.cfg.noise, rng);
        c.into_image()
    }
}

#[derive(Clone, Copy)]
enum Object<'a> {
    Target,
    Distractor(&'a Distractor),
    Occluder(&'a Occluder),
}

/// The target motion plan a config will produce.
pub fn target_plan(cfg: &SynthConfig) -> Result<TargetPlan> {
    Scene::new(cfg).map(|s| s.plan)
}

/// Renders a full sequence; bit-identical for identical configs.
pub fn generate_sequence(cfg: &SynthConfig, id: &str) -> Result<Sequence> {
    let scene = Scene::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_f00d);
    let mut rgb = Vec::with_capacity(cfg.frames);
    let mut x = Vec::with_capacity(cfg.frames);
    let mut boxes = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        rgb.push(scene.rgb(t, &mut rng));
        x.push(scene.x(t, &mut rng));
        boxes.push(scene.plan.rect(t));
    }
    Ok(Sequence {
        id: id.to_string(),
        modality: cfg.modality,
        rgb,
        x,
        boxes,
    })
}

/// Seed of the `index`-th sequence derived from a base seed.
pub fn sequence_seed(base: u64, index: usize) -> u64 {
    // splitmix64 step
    let mut z = base.wrapping_add((index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `count` sequences named `{prefix}_{i:04}` with derived seeds.
pub fn generate_set(cfg: &SynthConfig, count: usize, prefix: &str) -> Result<Vec<Sequence>> {
    (0..count)
        .map(|i| {
            let c = SynthConfig {
                seed: sequence_seed(cfg.seed, i),
                ..cfg.clone()
            };
            generate_sequence(&c, &format!("{prefix}_{i:04}"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn infeasible_configs_are_domain_errors() {
        let cfg = SynthConfig {
            canvas: 40,
            target_min: 20.0,
            target_max: 20.0,
            ..SynthConfig::default()
        };
        assert!(matches!(generate_sequence(&cfg, "x"), Err(Error::Domain { .. })));
    }

    #[test]
    fn boxes_stay_inside_with_margin() {
        for seed in 0..20 {
            let cfg = SynthConfig {
                seed,
                speed: 4.0,
                amplitude: 40.0,
                frames: 10,
                ..SynthConfig::default()
            };
            let plan = target_plan(&cfg).unwrap();
            for t in 0..cfg.frames {
                let r = plan.rect(t);
                assert!(r.x >= r.w - 1e-9 && r.x + 2.0 * r.w <= cfg.canvas as f64 + 1e-9, "{r:?}");
            }
        }
    }
}
