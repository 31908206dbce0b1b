use proptest::prelude::*;

use mdtrack_core::embed::Modality;
use mdtrack_core::fusion::{gate_logits, load_balance_loss, topk_mask, FusionMode, NUM_EXPERTS, TOP_K};
use mdtrack_core::head::{giou, iou, BBox};
use mdtrack_core::numerics::{Graph, Tensor};
use mdtrack_core::pipeline::ModelConfig;
use mdtrack_core::temporal::{TemporalMode, TemporalStates};

fn bbox() -> impl Strategy<Value = BBox> {
    (-50.0..50.0f64, -50.0..50.0f64, 0.1..40.0f64, 0.1..40.0f64).prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h))
}

fn logits(rows: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-20.0..20.0f64, rows * NUM_EXPERTS)
}

proptest! {
    #[test]
    fn overlap_measures_stay_in_range(a in bbox(), b in bbox()) {
        let i = iou(&a, &b);
        let gi = giou(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&i));
        prop_assert!(gi <= i + 1e-12 && gi >= -1.0 - 1e-12);
        prop_assert_eq!(gi.to_bits(), giou(&b, &a).unwrap().to_bits());
    }

    #[test]
    fn topk_picks_exactly_k_per_row(v in logits(6), k in 1..=NUM_EXPERTS) {
        let mask = topk_mask(&v, NUM_EXPERTS, k);
        for (row, m) in v.chunks_exact(NUM_EXPERTS).zip(mask.chunks_exact(NUM_EXPERTS)) {
            prop_assert_eq!(m.iter().filter(|&&b| b).count(), k);
            let lowest_kept = row.iter().zip(m).filter(|p| *p.1).map(|p| *p.0).fold(f64::INFINITY, f64::min);
            let highest_dropped = row.iter().zip(m).filter(|p| !*p.1).map(|p| *p.0).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lowest_kept >= highest_dropped);
        }
    }

    #[test]
    fn gates_are_a_distribution_over_the_chosen(v in logits(8)) {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::from_vec(&[8, NUM_EXPERTS], v).unwrap());
        let d = gate_logits(&mut g, l, TOP_K).unwrap();
        let gates = g.value(d.gates).data().to_vec();
        for (row, m) in gates.chunks_exact(NUM_EXPERTS).zip(d.topk_mask.chunks_exact(NUM_EXPERTS)) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (x, keep) in row.iter().zip(m) {
                prop_assert!(*keep || *x == 0.0);
            }
        }
    }

    #[test]
    fn balance_loss_is_at_least_one(v in logits(5), w in logits(3)) {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_vec(&[5, NUM_EXPERTS], v).unwrap());
        let b = g.constant(Tensor::from_vec(&[3, NUM_EXPERTS], w).unwrap());
        let pa = gate_logits(&mut g, a, TOP_K).unwrap().probs;
        let pb = gate_logits(&mut g, b, TOP_K).unwrap().probs;
        let loss = load_balance_loss(&mut g, &[pa, pb]).unwrap();
        let value = g.value(loss).data()[0];
        prop_assert!(value >= 1.0 - 1e-9 && value <= NUM_EXPERTS as f64 + 1e-9);
    }

    #[test]
    fn model_config_text_round_trips(
        heads in 1..4usize,
        width in 1..5usize,
        every in 1..4usize,
        mode in 0..4usize,
        fusion in 0..3usize,
        flags in 0..8u8,
    ) {
        let mut cfg = ModelConfig::default().with_channels(heads * width * 8);
        cfg.backbone.heads = heads;
        cfg.temporal.heads = heads;
        cfg.backbone.temporal_every = every;
        cfg.temporal.mode = [TemporalMode::Off, TemporalMode::Decoupled, TemporalMode::Mixed, TemporalMode::Token][mode];
        cfg.fusion.mode = [FusionMode::Baseline, FusionMode::Uniform, FusionMode::Moe][fusion];
        cfg.temporal.no_cross = flags & 1 != 0;
        cfg.temporal.tie_bidir = flags & 2 != 0;
        cfg.temporal.inject_first = flags & 4 != 0;
        prop_assert_eq!(ModelConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn states_round_trip_bit_exactly(
        values in prop::collection::vec(any::<f32>(), 1..64),
        frame in 0..1000u64,
        hooks in 1..4usize,
        m in 0..3usize,
    ) {
        let cfg = ModelConfig::default().temporal;
        let mut s = TemporalStates::<f32>::reset(&cfg, hooks, 16, Modality::X[m]);
        for (i, st) in s.blocks.iter_mut().flatten().enumerate() {
            st.frame_index = frame;
            for (j, x) in st.h.data_mut().iter_mut().enumerate() {
                *x = values[(i + j) % values.len()];
            }
        }
        let back = TemporalStates::<f32>::restore(&s.serialize()).unwrap();
        prop_assert!(back.bit_eq(&s));
        prop_assert_eq!(back.serialize(), s.serialize());
    }
}
