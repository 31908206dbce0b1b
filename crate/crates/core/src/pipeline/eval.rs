//! Whole-sequence tracking and the precision / success metrics.

use super::model::Model;
use super::track::TrackSession;
use crate::data::{Rect, Sequence};
use crate::error::{Error, Result};
use crate::numerics::Scalar;

/// IoU thresholds of the success curve: `0, 0.05, .., 1`.
pub const SUCCESS_THRESHOLDS: usize = 21;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Metrics {
    /// Fraction of frames with center error at most 20 px.
    pub precision20: f64,
    pub precision5: f64,
    /// Mean success rate over the IoU thresholds.
    pub auc: f64,
    pub mean_iou: f64,
    /// Frames scored (the initialization frame excluded).
    pub frames: usize,
}

/// Success rate at each threshold `k / 20`. A frame succeeds at `t` when
/// its IoU is positive and at least `t`.
pub fn success_curve(ious: &[f64]) -> Vec<f64> {
    (0..SUCCESS_THRESHOLDS)
        .map(|k| {
            let t = k as f64 / (SUCCESS_THRESHOLDS - 1) as f64;
            let hits = ious.iter().filter(|&&iou| iou > 0.0 && iou >= t).count();
            if ious.is_empty() {
                0.0
            } else {
                hits as f64 / ious.len() as f64
            }
        })
        .collect()
}

/// Scores per-frame predictions of possibly many sequences; the first
/// frame of each sequence is skipped.
pub fn score(runs: &[(&[Rect], &[Rect])]) -> Result<Metrics> {
    let mut ious = Vec::new();
    let mut dists = Vec::new();
    for (pred, gt) in runs {
        if pred.len() != gt.len() {
            return Err(Error::shape(
                "evaluate",
                format!("{} predictions for {} ground-truth boxes", pred.len(), gt.len()),
            ));
        }
        for (p, g) in pred.iter().zip(gt.iter()).skip(1) {
            ious.push(p.iou(g));
            dists.push(p.center_distance(g));
        }
    }
    let n = ious.len();
    if n == 0 {
        return Ok(Metrics::default());
    }
    let frac = |tau: f64| dists.iter().filter(|&&d| d <= tau).count() as f64 / n as f64;
    let curve = success_curve(&ious);
    Ok(Metrics {
        precision20: frac(20.0),
        precision5: frac(5.0),
        auc: curve.iter().sum::<f64>() / curve.len() as f64,
        mean_iou: ious.iter().sum::<f64>() / n as f64,
        frames: n,
    })
}

/// Tracks a loaded sequence from its first ground-truth box. The first
/// returned box is that ground truth.
pub fn track_sequence<T: Scalar>(model: &Model<T>, seq: &Sequence, reset_every_frame: bool) -> Result<Vec<Rect>> {
    if seq.is_empty() {
        return Ok(Vec::new());
    }
    let mut session = TrackSession::init(model, &seq.rgb[0], &seq.x[0], seq.boxes[0], seq.modality)?;
    session.reset_every_frame = reset_every_frame;
    let mut out = vec![seq.boxes[0]];
    for t in 1..seq.len() {
        out.push(session.update(&seq.rgb[t], &seq.x[t])?.0);
    }
    Ok(out)
}

/// Per-sequence predictions plus pooled metrics over all sequences.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub per_sequence: Vec<(String, Metrics)>,
    pub predictions: Vec<Vec<Rect>>,
}

pub fn evaluate<T: Scalar>(model: &Model<T>, sequences: &[Sequence], reset_every_frame: bool) -> Result<Evaluation> {
    let predictions: Vec<Vec<Rect>> = super::run_parallel(sequences.len(), |i| {
        track_sequence(model, &sequences[i], reset_every_frame)
    })?;
    let runs: Vec<(&[Rect], &[Rect])> = predictions
        .iter()
        .zip(sequences)
        .map(|(p, s)| (p.as_slice(), s.boxes.as_slice()))
        .collect();
    let metrics = score(&runs)?;
    let per_sequence = runs
        .iter()
        .zip(sequences)
        .map(|(r, s)| score(std::slice::from_ref(r)).map(|m| (s.id.clone(), m)))
        .collect::<Result<_>>()?;
    Ok(Evaluation {
        metrics,
        per_sequence,
        predictions,
    })
}

impl Evaluation {
    /// Plain-text report, one `key=value` per line.
    pub fn report(&self) -> String {
        let line = |prefix: &str, m: &Metrics| {
            format!(
                "{prefix}precision20={:.6}\n{prefix}precision5={:.6}\n{prefix}auc={:.6}\n{prefix}mean_iou={:.6}\n{prefix}frames={}\n",
                m.precision20, m.precision5, m.auc, m.mean_iou, m.frames
            )
        };
        let mut out = line("", &self.metrics);
        for (id, m) in &self.per_sequence {
            out.push_str(&line(&format!("{id}."), m));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_hopeless() {
        let gt = vec![Rect::new(10.0, 10.0, 20.0, 20.0); 5];
        let m = score(&[(&gt, &gt)]).unwrap();
        assert_eq!((m.precision20, m.auc, m.mean_iou, m.frames), (1.0, 1.0, 1.0, 4));
        let far = vec![Rect::new(500.0, 500.0, 1.0, 1.0); 5];
        let m = score(&[(&far, &gt)]).unwrap();
        assert_eq!((m.precision20, m.auc), (0.0, 0.0));
    }
}
