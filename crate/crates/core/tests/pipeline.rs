use mdtrack_core::data::synth::generate_set;
use mdtrack_core::data::{Rect, Sequence, SynthConfig};
use mdtrack_core::embed::Modality;
use mdtrack_core::pipeline::eval::{score, success_curve};
use mdtrack_core::pipeline::train::sample_spec;
use mdtrack_core::pipeline::*;
use mdtrack_core::temporal::TemporalStates;
use mdtrack_core::Error;

/// Parameter count from the layer inventory: bias-free patch projections
/// and attention outputs, 4x MLPs, LayerNorm gain+bias.
fn expected_params(cfg: &ModelConfig, hooks: usize) -> usize {
    let c = cfg.embed.channels;
    let p = cfg.embed.patch;
    let tokens = (cfg.embed.template_side / p).pow(2) + (cfg.embed.search_side / p).pow(2);
    let norm = 2 * c;
    let attn = 3 * (c * c + c) + c * c;
    let embed = 2 * 3 * p * p * c + tokens * c;
    let block = 2 * norm + attn + (c * 4 * c + 4 * c) + (4 * c * c + c);
    let cross = 2 * norm + attn;
    let d = cfg.temporal.d_state;
    let ssm = c * d + c + (c * c + c) + 2 * c * d;
    let temporal = match cfg.temporal.mode.as_str() {
        "off" => 0,
        "decoupled" => 6 * cross + 2 * ssm,
        other => panic!("no inventory for {other}"),
    };
    let h = (c / cfg.fusion.bottleneck).max(1);
    let expert = c * h + h + h * c + c;
    let fusion = match cfg.fusion.mode.as_str() {
        "baseline" => 0,
        "uniform" => expert,
        _ => 4 * expert + 2 * (2 * c * 4),
    };
    let k = cfg.head.hidden;
    let branch = |out: usize| k * c * 9 + k + k * k * 9 + k + out * k + out;
    let head = branch(1) + 2 * branch(2);
    embed + cfg.backbone.depth * block + norm + hooks * temporal + fusion + head
}

#[test]
fn desk_parameter_count() {
    let cfg = ModelConfig::default();
    let m = Model::<f32>::build(cfg, 0).unwrap();
    assert_eq!(m.num_params(), expected_params(&cfg, 4));
    assert_eq!(m.num_params(), 842_277);
}

#[test]
fn parameter_count_across_ablations() {
    let base = "embed.channels=32\nbackbone.n=4\nbackbone.heads=2\nhead.hidden=8\nfusion.r=8\n";
    for (extra, hooks) in [
        ("backbone.temporal_every=2\n", 2),
        ("temporal.mode=off\nfusion.mode=baseline\n", 0),
        ("fusion.mode=uniform\n", 4),
        ("temporal.tie_bidir=true\n", 4),
    ] {
        let cfg = Config::parse(&format!("{base}{extra}")).unwrap().model;
        let m = Model::<f32>::build(cfg, 1).unwrap();
        let mut want = expected_params(&cfg, hooks);
        if cfg.temporal.tie_bidir {
            // one bidirectional block serves both streams
            want -= 4 * (2 * 2 * 32 + 3 * (32 * 32 + 32) + 32 * 32);
        }
        assert_eq!(m.num_params(), want, "{extra}");
    }
}

#[test]
fn ablations_grow_the_model_monotonically() {
    let count = |extra: &str| {
        let cfg = Config::parse(extra).unwrap().model;
        Model::<f32>::build(cfg, 0).unwrap().num_params()
    };
    let baseline = count("temporal.mode=off\nfusion.mode=baseline\n");
    let uniform = count("temporal.mode=off\nfusion.mode=uniform\n");
    let moe = count("temporal.mode=off\n");
    let full = count("");
    assert!(baseline < uniform && uniform < moe && moe < full);
}

fn tiny(extra: &str) -> Config {
    let text = String::from(
        "embed.channels=16\nbackbone.n=2\nbackbone.heads=2\ntemporal.d_state=4\nhead.hidden=8\nfusion.r=4\n\
         train.batch=2\ntrain.sequences=2\ntrain.clip=2\ntrain.burn_in=1\ntrain.lr=1e-3\n\
         synth.frames=16\n"
    );
    let overrides: Vec<(&str, String)> = extra
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k, v.to_string()))
        .collect();
    Config::parse_with_overrides(&text, &overrides).unwrap()
}

fn trainer(cfg: &Config, seed: u64) -> Trainer<f32> {
    let data = TrainData::prepare(&cfg.train, &cfg.synth).unwrap();
    Trainer::new(Model::build(cfg.model, seed).unwrap(), cfg.train.clone(), data).unwrap()
}

#[test]
fn every_ablation_combination_trains() {
    let mut combos = Vec::new();
    for fusion in ["baseline", "uniform", "moe"] {
        combos.push(format!("temporal.mode=off\nfusion.mode={fusion}\n"));
        combos.push(format!("temporal.mode=mixed\nfusion.mode={fusion}\n"));
        combos.push(format!("temporal.mode=token\nfusion.mode={fusion}\n"));
        for bits in 0..8 {
            combos.push(format!(
                "temporal.mode=decoupled\nfusion.mode={fusion}\ntemporal.no_cross={}\ntemporal.tie_bidir={}\ntemporal.inject_first={}\n",
                bits & 1 == 1,
                bits & 2 == 2,
                bits & 4 == 4
            ));
        }
    }
    combos.push("fusion.true_modality_experts=true\n".into());
    for combo in combos {
        let cfg = tiny(&combo);
        let mut t = trainer(&cfg, 0);
        let r = t.step().unwrap();
        assert!(r.loss.total.is_finite(), "{combo}: {:?}", r.loss);
        assert!(t.model.store.iter().all(|(_, p)| p.value.all_finite()), "{combo}");
    }
}

#[test]
fn resumed_training_replays_exactly() {
    let cfg = tiny("");
    let mut straight = trainer(&cfg, 3);
    straight.run(4).unwrap();

    let mut first = trainer(&cfg, 3);
    first.run(2).unwrap();
    let bytes = first.checkpoint().to_bytes();
    let ck = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
    let data = TrainData::prepare(&cfg.train, &cfg.synth).unwrap();
    let mut resumed = Trainer::resume(&ck, cfg.train.clone(), data).unwrap();
    assert_eq!(resumed.step_count(), 2);
    resumed.run(2).unwrap();

    assert_eq!(straight.model.store.checksum(), resumed.model.store.checksum());
    let losses = |t: &Trainer<f32>| t.log.iter().map(|r| r.loss.total.to_bits()).collect::<Vec<_>>();
    assert_eq!(losses(&straight)[2..], losses(&resumed)[..]);
}

#[test]
fn specific_regime_stays_on_its_modality() {
    let cfg = tiny("train.modality=E\n");
    let data = TrainData::prepare(&cfg.train, &cfg.synth).unwrap();
    assert!(data.get(Modality::T).is_empty() && data.get(Modality::D).is_empty());
    for step in 0..100 {
        for b in 0..4 {
            assert_eq!(sample_spec(&cfg.train, &data, step, b).modality, Modality::E);
        }
    }
}

#[test]
fn unified_regime_mixes_all_modalities() {
    let cfg = tiny("train.regime=unified\n");
    let data = TrainData::prepare(&cfg.train, &cfg.synth).unwrap();
    let mut counts = [0usize; 3];
    for step in 0..300 {
        for b in 0..4 {
            let s = sample_spec(&cfg.train, &data, step, b);
            counts[s.modality.index() - 1] += 1;
            let seq = &data.get(s.modality)[s.sequence];
            assert_eq!(seq.modality, s.modality);
            assert!(s.search_frames.iter().all(|&f| f < seq.len()));
        }
    }
    // 1200 draws; each share within 5 sigma of 1/3
    for c in counts {
        assert!((c as f64 - 400.0).abs() < 5.0 * (1200.0f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt(), "{counts:?}");
    }
}

#[test]
fn success_thresholds_on_three_frames() {
    let gt = Rect::new(0.0, 0.0, 10.0, 10.0);
    let gts = vec![gt; 4];
    let preds = vec![
        gt,
        gt,
        Rect::new(0.0, 0.0, 10.0, 5.0),
        Rect::new(100.0, 100.0, 10.0, 10.0),
    ];
    let ious: Vec<f64> = preds.iter().zip(&gts).skip(1).map(|(p, g)| p.iou(g)).collect();
    assert_eq!(ious, vec![1.0, 0.5, 0.0]);
    let curve = success_curve(&ious);
    for (k, v) in curve.iter().enumerate() {
        let want = if k <= 10 { 2.0 / 3.0 } else { 1.0 / 3.0 };
        assert!((v - want).abs() < 1e-12, "threshold {k}: {v}");
    }
    let m = score(&[(&preds, &gts)]).unwrap();
    assert!((m.auc - 32.0 / 63.0).abs() < 1e-12);
    assert!((m.mean_iou - 0.5).abs() < 1e-12);
    assert_eq!(m.frames, 3);
    assert!((m.precision20 - 2.0 / 3.0).abs() < 1e-12);
}

fn one_sequence(modality: Modality, frames: usize) -> Sequence {
    let c = SynthConfig {
        modality,
        frames,
        seed: 4,
        ..SynthConfig::default()
    };
    generate_set(&c, 1, "s").unwrap().remove(0)
}

#[test]
fn tracking_advances_and_states_replay() {
    let cfg = tiny("").model;
    let model = Model::<f32>::build(cfg, 2).unwrap();
    let seq = one_sequence(Modality::D, 8);
    let mut a = TrackSession::init(&model, &seq.rgb[0], &seq.x[0], seq.boxes[0], Modality::D).unwrap();
    assert_eq!(a.frame_index(), 0);
    for t in 1..5 {
        a.update(&seq.rgb[t], &seq.x[t]).unwrap();
        assert_eq!(a.frame_index(), t as u64);
    }
    let saved = TemporalStates::<f32>::restore(&a.states.serialize()).unwrap();
    assert!(saved.bit_eq(&a.states));

    let mut b = TrackSession::init(&model, &seq.rgb[0], &seq.x[0], seq.boxes[0], Modality::D).unwrap();
    b.prev = a.prev;
    b.set_states(saved).unwrap();
    for t in 5..8 {
        let ra = a.update(&seq.rgb[t], &seq.x[t]).unwrap();
        let rb = b.update(&seq.rgb[t], &seq.x[t]).unwrap();
        assert_eq!(ra, rb);
    }
    assert!(a.states.bit_eq(&b.states));

    let wrong = Model::<f32>::build(tiny("temporal.mode=mixed\n").model, 2).unwrap();
    assert!(matches!(b.set_states(wrong.reset_states(Modality::D)), Err(Error::Contract(_))));
    assert!(matches!(b.set_states(model.reset_states(Modality::T)), Err(Error::Contract(_))));
}

#[test]
fn loss_falls_fivefold_in_500_steps() {
    let cfg = tiny("train.sequences=8\ntrain.batch=4\ntrain.lr=2e-3\ntrain.grad_clip=1\ntrain.warmup=20\n");
    let mut t = trainer(&cfg, 5);
    t.run(500).unwrap();
    let mean = |r: &[mdtrack_core::pipeline::train::StepRecord]| r.iter().map(|r| r.loss.total).sum::<f64>() / r.len() as f64;
    let (first, last) = (mean(&t.log[..10]), mean(&t.log[490..]));
    assert!(first >= 5.0 * last, "loss {first:.4} -> {last:.4}");
}

#[test]
fn shipped_config_parses() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.cfg");
    let cfg = Config::load(&path).unwrap();
    assert_eq!(cfg.model, ModelConfig::default());
    assert_eq!(cfg.train.total_steps(), 2000);
    assert_eq!(cfg.synth.modalities, Modality::X.to_vec());
}

#[test]
fn config_errors_are_collected() {
    let err = Config::parse("backbone.n=4\nbogus.key=1\ntrain.lr=abc\nbackbone.n=2\n").unwrap_err();
    let Error::Config(msgs) = err else { panic!("{err}") };
    let all = msgs.join("\n");
    assert!(all.contains("bogus.key") && all.contains("train.lr") && all.contains("already set"), "{all}");
}
