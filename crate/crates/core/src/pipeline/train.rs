//! Training loop: pair sampling, per-sample graphs reduced in a fixed
//! order, AdamW with warmup and cosine decay, per-epoch checkpoints.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::{Regime, SynthSpec, TrainConfig};
use super::model::{Model, PairCrop};
use super::optim::{clip_grad_norm, AdamW};
use crate::data::crop::{CropTransform, Jitter, SEARCH_FACTOR, TEMPLATE_FACTOR};
use crate::data::dataset::load_dataset;
use crate::data::synth::{generate_set, sequence_seed};
use crate::data::Sequence;
use crate::embed::Modality;
use crate::error::{Error, Result};
use crate::head::{total_loss, LossBreakdown};
use crate::numerics::{Graph, ParamId, Scalar, Tensor};

/// Training sequences grouped by X modality (`T`, `E`, `D`).
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub by_modality: [Vec<Sequence>; 3],
}

fn x_slot(m: Modality) -> usize {
    m.index() - 1
}

impl TrainData {
    pub fn from_sequences(seqs: Vec<Sequence>) -> Self {
        let mut data = TrainData::default();
        for s in seqs {
            data.by_modality[x_slot(s.modality)].push(s);
        }
        data
    }

    pub fn get(&self, m: Modality) -> &[Sequence] {
        &self.by_modality[x_slot(m)]
    }

    /// Modalities the regime draws from.
    pub fn modalities(cfg: &TrainConfig) -> Vec<Modality> {
        match cfg.regime {
            Regime::Specific => vec![cfg.modality],
            Regime::Unified => Modality::X.to_vec(),
        }
    }

    /// Loads the configured roots, or generates `cfg.sequences` synthetic
    /// sequences per needed modality.
    pub fn prepare(cfg: &TrainConfig, synth: &SynthSpec) -> Result<Self> {
        let needed = Self::modalities(cfg);
        let mut seqs = Vec::new();
        for &m in &needed {
            let root: Option<&PathBuf> = cfg.data_by_modality[x_slot(m)]
                .as_ref()
                .or(if cfg.regime == Regime::Specific { cfg.data.as_ref() } else { None });
            match root {
                Some(root) => {
                    for r in load_dataset(root)? {
                        if r.modality == m {
                            seqs.push(r.load()?);
                        }
                    }
                }
                None => {
                    let c = crate::data::SynthConfig {
                        modality: m,
                        seed: sequence_seed(synth.cfg.seed, m.index()),
                        ..synth.cfg.clone()
                    };
                    seqs.extend(generate_set(&c, cfg.sequences, &format!("train_{m}"))?);
                }
            }
        }
        let data = Self::from_sequences(seqs);
        for m in needed {
            if data.get(m).is_empty() {
                return Err(Error::Config(vec![format!("no training sequences for modality {m}")]));
            }
        }
        Ok(data)
    }
}

/// What one batch element trains on.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSpec {
    pub modality: Modality,
    pub sequence: usize,
    pub template_frame: usize,
    /// Burn-in frames followed by the gradient frames, consecutive.
    pub search_frames: Vec<usize>,
    pub burn_in: usize,
    pub seed: u64,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    sequence_seed(sequence_seed(seed, a as usize), b as usize)
}

/// Draws batch element `b` of step `step`; a pure function of its inputs.
pub fn sample_spec(cfg: &TrainConfig, data: &TrainData, step: u64, b: usize) -> SampleSpec {
    let seed = mix(cfg.seed, step, b as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let modality = match cfg.regime {
        Regime::Specific => cfg.modality,
        Regime::Unified => Modality::X[rng.random_range(0..3)],
    };
    let pool = data.get(modality);
    let sequence = rng.random_range(0..pool.len());
    let len = pool[sequence].len();
    let want = cfg.burn_in + cfg.clip;
    let total = want.min(len.saturating_sub(1)).max(1);
    let burn_in = total.saturating_sub(cfg.clip.min(total));
    let start = rng.random_range(0..=len - total);
    let last = start + total - 1;
    let lo = start.saturating_sub(cfg.max_gap);
    let hi = (last + cfg.max_gap).min(len - 1);
    let template_frame = rng.random_range(lo..=hi);
    SampleSpec {
        modality,
        sequence,
        template_frame,
        search_frames: (start..=last).collect(),
        burn_in,
        seed,
    }
}

/// Gradients and losses of one batch element.
struct SampleResult<T> {
    grads: Vec<(ParamId, Tensor<T>)>,
    loss: LossBreakdown,
}

fn run_sample<T: Scalar>(model: &Model<T>, data: &TrainData, spec: &SampleSpec) -> Result<SampleResult<T>> {
    let seq = &data.get(spec.modality)[spec.sequence];
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xc0ffee);
    let e = &model.cfg.embed;
    let zt = CropTransform::around(
        &seq.boxes[spec.template_frame],
        TEMPLATE_FACTOR,
        e.template_side,
        Some(Jitter::sample(&mut rng)),
    );
    let template = PairCrop {
        rgb: zt.apply(&seq.rgb[spec.template_frame]),
        x: zt.apply(&seq.x[spec.template_frame]),
    };
    let mut crops = Vec::with_capacity(spec.search_frames.len());
    for &f in &spec.search_frames {
        let anchor = seq.boxes[f.saturating_sub(1)];
        let t = CropTransform::around(&anchor, SEARCH_FACTOR, e.search_side, Some(Jitter::sample(&mut rng)));
        crops.push((
            PairCrop {
                rgb: t.apply(&seq.rgb[f]),
                x: t.apply(&seq.x[f]),
            },
            t.to_crop(&seq.boxes[f]),
        ));
    }

    let mut states = model.reset_states(spec.modality);
    for (i, (search, _)) in crops.iter().take(spec.burn_in).enumerate() {
        let mut g = Graph::new();
        let gs = states.to_graph(&mut g);
        let p = model.forward(&mut g, &template, search, spec.modality, &gs, true, spec.seed.wrapping_add(i as u64))?;
        states = states.advance(&g, &p.states);
    }

    let mut g = Graph::new();
    let mut gs = states.to_graph(&mut g);
    let mut total = None;
    let mut sum = LossBreakdown::default();
    let frames = crops.len() - spec.burn_in;
    for (i, (search, target)) in crops.iter().enumerate().skip(spec.burn_in) {
        let p = model.forward(&mut g, &template, search, spec.modality, &gs, true, spec.seed.wrapping_add(i as u64))?;
        let (loss, parts) = total_loss(&mut g, &p.maps, target, p.balance, &model.cfg.loss)?;
        total = Some(match total {
            Some(t) => g.add(t, loss)?,
            None => loss,
        });
        sum.cls += parts.cls;
        sum.l1 += parts.l1;
        sum.giou += parts.giou;
        sum.balance += parts.balance;
        sum.total += parts.total;
        gs = p.states;
    }
    let total = total.expect("at least one gradient frame");
    let total = g.scale(total, T::from_f64_lossy(1.0 / frames as f64))?;
    let grads = g.backward(total)?;
    let grads = g.param_grads(&grads).into_iter().map(|(id, t)| (id, t.clone())).collect();
    let k = 1.0 / frames as f64;
    Ok(SampleResult {
        grads,
        loss: LossBreakdown {
            cls: sum.cls * k,
            l1: sum.l1 * k,
            giou: sum.giou * k,
            balance: sum.balance * k,
            total: sum.total * k,
        },
    })
}

/// Per-step log entry.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    /// Batch means of the unweighted components and the weighted total.
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub modalities: Vec<Modality>,
}

/// Learning rate after `step` updates: linear warmup, then cosine decay.
pub fn learning_rate(cfg: &TrainConfig, step: u64) -> f64 {
    let total = cfg.total_steps() as f64;
    let s = step as f64;
    if (step as usize) < cfg.warmup {
        return cfg.lr * (s + 1.0) / cfg.warmup as f64;
    }
    let span = (total - cfg.warmup as f64).max(1.0);
    let progress = ((s - cfg.warmup as f64) / span).clamp(0.0, 1.0);
    let floor = cfg.lr * cfg.min_lr_ratio;
    floor + (cfg.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

pub struct Trainer<T> {
    pub model: Model<T>,
    pub opt: AdamW<T>,
    pub cfg: TrainConfig,
    pub data: TrainData,
    pub log: Vec<StepRecord>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, cfg: TrainConfig, data: TrainData) -> Result<Self> {
        let problems = cfg.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let opt = AdamW::new(&model.store, cfg.weight_decay);
        Ok(Trainer {
            model,
            opt,
            cfg,
            data,
            log: Vec::new(),
        })
    }

    /// Continues from a checkpoint, including its optimizer state.
    pub fn resume(ck: &Checkpoint<T>, cfg: TrainConfig, data: TrainData) -> Result<Self> {
        let model = ck.to_model()?;
        let opt = ck.to_optimizer(&model, cfg.weight_decay)?;
        let mut t = Trainer::new(model, cfg, data)?;
        t.opt = opt;
        Ok(t)
    }

    pub fn step_count(&self) -> u64 {
        self.opt.step
    }

    /// One optimizer update over a batch.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.opt.step;
        let specs: Vec<SampleSpec> = (0..self.cfg.batch)
            .map(|b| sample_spec(&self.cfg, &self.data, step, b))
            .collect();
        let (model, data) = (&self.model, &self.data);
        let results = super::run_parallel(specs.len(), |b| run_sample(model, data, &specs[b]))?;

        let store = &mut self.model.store;
        store.zero_grad();
        let scale = T::from_f64_lossy(1.0 / specs.len() as f64);
        let mut mean = LossBreakdown::default();
        for r in &results {
            for (id, g) in &r.grads {
                store.accumulate(*id, g, scale);
            }
            mean.cls += r.loss.cls;
            mean.l1 += r.loss.l1;
            mean.giou += r.loss.giou;
            mean.balance += r.loss.balance;
            mean.total += r.loss.total;
        }
        let k = 1.0 / results.len() as f64;
        let loss = LossBreakdown {
            cls: mean.cls * k,
            l1: mean.l1 * k,
            giou: mean.giou * k,
            balance: mean.balance * k,
            total: mean.total * k,
        };
        if !loss.total.is_finite() {
            return Err(Error::Training {
                step,
                detail: format!("non-finite loss {loss:?}"),
            });
        }
        let grad_norm = clip_grad_norm(store, self.cfg.grad_clip);
        let lr = learning_rate(&self.cfg, step);
        self.opt.update(store, lr)?;
        let record = StepRecord {
            step,
            lr,
            loss,
            grad_norm,
            modalities: specs.iter().map(|s| s.modality).collect(),
        };
        if step.is_multiple_of(self.cfg.log_every as u64) {
            log::info!(
                "step {step} lr {lr:.2e} loss {:.4} cls {:.4} l1 {:.4} giou {:.4} balance {:.4} |g| {grad_norm:.3}",
                loss.total,
                loss.cls,
                loss.l1,
                loss.giou,
                loss.balance
            );
        }
        self.log.push(record.clone());
        Ok(record)
    }

    /// Runs `n` steps.
    pub fn run(&mut self, n: usize) -> Result<()> {
        for _ in 0..n {
            self.step()?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint::capture(&self.model, Some(&self.opt), self.opt.step)
    }

    /// Trains the remaining epochs, writing `epoch_NNN.mdck` after each one
    /// when an output directory is configured.
    pub fn run_epochs(&mut self) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        if let Some(dir) = &self.cfg.out {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let per = self.cfg.steps_per_epoch as u64;
        while self.opt.step < self.cfg.total_steps() as u64 {
            let remaining = per - self.opt.step % per;
            self.run(remaining as usize)?;
            let epoch = self.opt.step / per;
            log::info!("epoch {epoch} done at step {}", self.opt.step);
            if let Some(dir) = &self.cfg.out {
                let path = dir.join(format!("epoch_{epoch:03}.mdck"));
                self.checkpoint().save(&path)?;
                written.push(path);
            }
        }
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let cfg = TrainConfig {
            lr: 1.0,
            warmup: 10,
            min_lr_ratio: 0.1,
            steps_per_epoch: 110,
            epochs: 1,
            ..TrainConfig::default()
        };
        assert!((learning_rate(&cfg, 0) - 0.1).abs() < 1e-12);
        assert!((learning_rate(&cfg, 10) - 1.0).abs() < 1e-12);
        assert!((learning_rate(&cfg, 110) - 0.1).abs() < 1e-12);
        let flat = TrainConfig::default();
        assert_eq!(learning_rate(&flat, 0), flat.lr);
        assert_eq!(learning_rate(&flat, 1000), flat.lr);
    }
}
