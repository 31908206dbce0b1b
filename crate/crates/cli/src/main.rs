use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use mdtrack_core::data::dataset::{load_record, write_boxes};
use mdtrack_core::data::synth::{generate_set, sequence_seed};
use mdtrack_core::data::{load_dataset, write_sequence, SynthConfig};
use mdtrack_core::embed::Modality;
use mdtrack_core::numerics::{DType, Scalar};
use mdtrack_core::pipeline::checkpoint::peek_config;
use mdtrack_core::pipeline::eval::evaluate;
use mdtrack_core::pipeline::{Checkpoint, Config, Model, Regime, TrackSession, TrainData, Trainer};
use mdtrack_core::verify::{self, Suite};

#[derive(Parser)]
#[command(name = "mdtrack", version, about = "RGB+X tracker with temporal state propagation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; one checkpoint per epoch goes to `train.out`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        regime: Option<Regime>,
        #[arg(long, value_parser = x_modality)]
        modality: Option<Modality>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Track one sequence from its first ground-truth box.
    Track {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write the temporal states after the last frame.
        #[arg(long)]
        save_states: Option<PathBuf>,
    },
    /// Track every sequence under a dataset root and write metrics.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Write synthetic sequences.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the gradient and oracle suites.
    Verify {
        #[arg(long, default_value = "all")]
        module: Suite,
    },
}

fn x_modality(s: &str) -> Result<Modality, String> {
    match s.parse::<Modality>()? {
        Modality::Rgb => Err("the X modality must be T, E or D".into()),
        m => Ok(m),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train {
            config,
            regime,
            modality,
            seed,
            resume,
        } => {
            let text = std::fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let mut overrides = Vec::new();
            if let Some(r) = regime {
                overrides.push(("train.regime", r.to_string()));
            }
            if let Some(m) = modality {
                overrides.push(("train.modality", m.to_string()));
            }
            if let Some(s) = seed {
                overrides.push(("train.seed", s.to_string()));
            }
            let cfg = Config::parse_with_overrides(&text, &overrides).with_context(|| format!("in {}", config.display()))?;
            if cfg.train.out.is_none() {
                bail!("{}: train.out is not set, so no checkpoint would be written", config.display());
            }
            match cfg.model.dtype {
                DType::F32 => train::<f32>(&cfg, resume.as_deref()),
                DType::F64 => train::<f64>(&cfg, resume.as_deref()),
            }?;
        }
        Command::Track {
            checkpoint,
            sequence,
            out,
            save_states,
        } => match checkpoint_dtype(&checkpoint)? {
            DType::F32 => track::<f32>(&checkpoint, &sequence, &out, save_states.as_deref())?,
            DType::F64 => track::<f64>(&checkpoint, &sequence, &out, save_states.as_deref())?,
        },
        Command::Eval {
            checkpoint,
            dataset,
            report,
        } => match checkpoint_dtype(&checkpoint)? {
            DType::F32 => eval::<f32>(&checkpoint, &dataset, &report)?,
            DType::F64 => eval::<f64>(&checkpoint, &dataset, &report)?,
        },
        Command::Synth { config, out } => synth(&config, &out)?,
        Command::Verify { module } => {
            let checks = verify::run(module);
            for c in &checks {
                println!("{c}");
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            println!("{} checks, {failed} failed", checks.len());
            if failed > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn checkpoint_dtype(path: &Path) -> Result<DType> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = peek_config(&bytes).with_context(|| format!("in {}", path.display()))?;
    Ok(cfg.dtype)
}

fn load_model<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let ck = Checkpoint::<T>::load(path)?;
    info!("loaded {} (step {})", path.display(), ck.step);
    Ok(ck.to_model()?)
}

fn train<T: Scalar>(cfg: &Config, resume: Option<&Path>) -> Result<()> {
    let data = TrainData::prepare(&cfg.train, &cfg.synth)?;
    let mut trainer = match resume {
        Some(path) => {
            let ck = Checkpoint::<T>::load(path)?;
            if ck.config != cfg.model {
                bail!("{}: model configuration differs from the config file", path.display());
            }
            info!("resuming from step {}", ck.step);
            Trainer::resume(&ck, cfg.train.clone(), data)?
        }
        None => Trainer::new(Model::<T>::build(cfg.model, cfg.train.seed)?, cfg.train.clone(), data)?,
    };
    info!(
        "{} parameters, {} steps, regime {}",
        trainer.model.num_params(),
        cfg.train.total_steps(),
        cfg.train.regime
    );
    for path in trainer.run_epochs()? {
        info!("wrote {}", path.display());
    }
    Ok(())
}

fn track<T: Scalar>(checkpoint: &Path, sequence: &Path, out: &Path, save_states: Option<&Path>) -> Result<()> {
    let model = load_model::<T>(checkpoint)?;
    let seq = load_record(sequence)?.load()?;
    if seq.is_empty() {
        bail!("{}: no frames", sequence.display());
    }
    let mut session = TrackSession::init(&model, &seq.rgb[0], &seq.x[0], seq.boxes[0], seq.modality)?;
    let mut boxes = vec![seq.boxes[0]];
    for t in 1..seq.len() {
        boxes.push(session.update(&seq.rgb[t], &seq.x[t])?.0);
    }
    write_boxes(out, &boxes)?;
    info!("tracked {} frames into {}", boxes.len(), out.display());
    if let Some(path) = save_states {
        std::fs::write(path, session.states.serialize()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn eval<T: Scalar>(checkpoint: &Path, dataset: &Path, report: &Path) -> Result<()> {
    let model = load_model::<T>(checkpoint)?;
    let seqs = load_dataset(dataset)?
        .iter()
        .map(|r| r.load())
        .collect::<mdtrack_core::Result<Vec<_>>>()?;
    if seqs.is_empty() {
        bail!("{}: no sequences", dataset.display());
    }
    let e = evaluate(&model, &seqs, false)?;
    std::fs::write(report, e.report()).with_context(|| format!("writing {}", report.display()))?;
    let m = e.metrics;
    println!(
        "sequences={} frames={} precision20={:.4} auc={:.4} mean_iou={:.4}",
        seqs.len(),
        m.frames,
        m.precision20,
        m.auc,
        m.mean_iou
    );
    Ok(())
}

fn synth(config: &Path, out: &Path) -> Result<()> {
    let cfg = Config::load(config).with_context(|| format!("in {}", config.display()))?;
    let spec = &cfg.synth;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for &m in &spec.modalities {
        let c = SynthConfig {
            modality: m,
            seed: sequence_seed(spec.cfg.seed, m.index()),
            ..spec.cfg.clone()
        };
        for seq in generate_set(&c, spec.count, &m.to_string().to_lowercase())? {
            write_sequence(out, &seq)?;
        }
        info!("wrote {} {m} sequences", spec.count);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_valid() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn train_flags_parse() {
        let cli = Cli::try_parse_from(["mdtrack", "train", "--config", "a.cfg", "--regime", "unified", "--modality", "E", "--seed", "3"]).unwrap();
        match cli.command {
            Command::Train { regime, modality, seed, .. } => {
                assert_eq!(regime, Some(Regime::Unified));
                assert_eq!(modality, Some(Modality::E));
                assert_eq!(seed, Some(3));
            }
            _ => panic!("wrong subcommand"),
        }
        assert!(Cli::try_parse_from(["mdtrack", "train", "--config", "a", "--modality", "RGB"]).is_err());
        assert!(Cli::try_parse_from(["mdtrack", "verify", "--module", "nope"]).is_err());
    }
}
