//! Training objectives: answer classification cross-entropy, the two frame
//! supervision losses (BCE and its class-balanced variant BBCE), the
//! in/out-frame score margin (IOFSM), span-to-label conversion, and the
//! per-class frame score statistics.

use serde::{Deserialize, Serialize};

use crate::tensor::{Result, Scalar, Tensor, TensorError};

/// Scores are clamped to [CLAMP_EPS, 1 - CLAMP_EPS] before logs.
pub const CLAMP_EPS: f64 = 1e-7;

/// Frames are sampled every two seconds (0.5 fps).
pub const FRAME_INTERVAL_SEC: f64 = 2.0;

/// Binary per-frame relevance labels derived from a time span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameLabels {
    pub labels: Vec<u8>,
    pub span: (f64, f64),
}

impl FrameLabels {
    pub fn in_indices(&self) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, &l)| l == 1).map(|(i, _)| i).collect()
    }

    pub fn out_indices(&self) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, &l)| l == 0).map(|(i, _)| i).collect()
    }
}

/// Which frame-supervision loss is active; BCE and BBCE are exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FrameLossKind {
    #[default]
    None,
    Bce,
    Bbce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossFlags {
    pub frame: FrameLossKind,
    pub iofsm: bool,
}

impl Default for LossFlags {
    fn default() -> Self {
        LossFlags { frame: FrameLossKind::Bbce, iofsm: true }
    }
}

/// Scalar loss terms for one batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub frame: Option<f64>,
    pub io: Option<f64>,
    pub total: f64,
}

/// Per-class mean and population standard deviation of local gate scores.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default)]
pub struct FrameScoreStats {
    pub ifs_avg: Option<f64>,
    pub ifs_std: Option<f64>,
    pub ofs_avg: Option<f64>,
    pub ofs_std: Option<f64>,
}

/// Label 1 iff start <= t * interval <= end, boundaries inclusive.
pub fn span_to_labels(span: (f64, f64), t_f: usize, interval_sec: f64) -> Result<FrameLabels> {
    let (start, end) = span;
    if start < 0.0 || end < 0.0 {
        return Err(TensorError::Invalid(format!("negative span times ({start}, {end})")));
    }
    if start > end {
        return Err(TensorError::Invalid(format!("span start {start} after end {end}")));
    }
    let labels = (0..t_f)
        .map(|t| {
            let time = t as f64 * interval_sec;
            u8::from(time >= start && time <= end)
        })
        .collect();
    Ok(FrameLabels { labels, span })
}

/// Softmax cross-entropy of the ground-truth answer over the 5 logits.
pub fn classification_loss<F: Scalar>(logits: &Tensor<F>, gt: usize) -> Result<Tensor<F>> {
    let n = logits.len();
    if gt >= n {
        return Err(TensorError::IndexOutOfRange { index: gt, len: n });
    }
    let probs = logits.transpose().softmax_rows(None)?.transpose();
    let p_gt = probs.gather_rows(&[gt])?;
    Ok(p_gt.clamp(1e-30, 1.0).ln().affine(-1.0, 0.0).sum_all())
}

fn check_scores<F: Scalar>(scores: &Tensor<F>, labels: &FrameLabels) -> Result<()> {
    if scores.is_empty() {
        return Err(TensorError::Invalid("empty frame score vector".into()));
    }
    if scores.len() != labels.labels.len() {
        return Err(TensorError::ShapeMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.labels.len()
        )));
    }
    Ok(())
}

/// Summed (not averaged) binary cross-entropy over all frames.
pub fn bce_loss<F: Scalar>(scores: &Tensor<F>, labels: &FrameLabels) -> Result<Tensor<F>> {
    check_scores(scores, labels)?;
    let s = scores.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS);
    let ln_s = s.ln();
    let ln_1ms = s.affine(-1.0, 1.0).ln();
    let in_ids = labels.in_indices();
    let out_ids = labels.out_indices();
    let mut total = Tensor::scalar(F::zero());
    if !in_ids.is_empty() {
        total = total.add(&ln_s.gather_rows(&in_ids)?.sum_all())?;
    }
    if !out_ids.is_empty() {
        total = total.add(&ln_1ms.gather_rows(&out_ids)?.sum_all())?;
    }
    Ok(total.affine(-1.0, 0.0))
}

/// 1 + Avg(out-frame scores) - Avg(in-frame scores). An empty class is
/// replaced by its ideal average (empty IFS -> 1, empty OFS -> 0) with a
/// warning, so the loss stays finite.
pub fn iofsm_loss<F: Scalar>(scores: &Tensor<F>, labels: &FrameLabels) -> Result<Tensor<F>> {
    check_scores(scores, labels)?;
    let in_ids = labels.in_indices();
    let out_ids = labels.out_indices();
    let in_avg = if in_ids.is_empty() {
        eprintln!("warning: iofsm_loss with no in-frames; Avg(IFS) treated as 1");
        Tensor::scalar(F::one())
    } else {
        scores.gather_rows(&in_ids)?.mean_all()
    };
    let out_avg = if out_ids.is_empty() {
        eprintln!("warning: iofsm_loss with no out-frames; Avg(OFS) treated as 0");
        Tensor::scalar(F::zero())
    } else {
        scores.gather_rows(&out_ids)?.mean_all()
    };
    Ok(out_avg.add(&in_avg.affine(-1.0, 0.0))?.affine(1.0, 1.0))
}

/// Class-balanced binary cross-entropy: per-class mean log-likelihoods summed.
/// An empty class drops its term with a warning.
pub fn bbce_loss<F: Scalar>(scores: &Tensor<F>, labels: &FrameLabels) -> Result<Tensor<F>> {
    check_scores(scores, labels)?;
    let s = scores.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS);
    let in_ids = labels.in_indices();
    let out_ids = labels.out_indices();
    let mut total = Tensor::scalar(F::zero());
    if in_ids.is_empty() {
        eprintln!("warning: bbce_loss with no in-frames; in-class term dropped");
    } else {
        total = total.add(&s.ln().gather_rows(&in_ids)?.mean_all())?;
    }
    if out_ids.is_empty() {
        eprintln!("warning: bbce_loss with no out-frames; out-class term dropped");
    } else {
        total = total.add(&s.affine(-1.0, 1.0).ln().gather_rows(&out_ids)?.mean_all())?;
    }
    Ok(total.affine(-1.0, 0.0))
}

/// Additive combination of the enabled loss terms.
pub fn total_loss<F: Scalar>(
    cls: &Tensor<F>,
    frame: Option<&Tensor<F>>,
    io: Option<&Tensor<F>>,
) -> Result<(Tensor<F>, LossBreakdown)> {
    let mut total = cls.affine(1.0, 0.0);
    for part in [frame, io].into_iter().flatten() {
        total = total.add(part)?;
    }
    let breakdown = LossBreakdown {
        cls: cls.item().to_f64_val(),
        frame: frame.map(|t| t.item().to_f64_val()),
        io: io.map(|t| t.item().to_f64_val()),
        total: total.item().to_f64_val(),
    };
    if !breakdown.total.is_finite() {
        return Err(TensorError::NonFinite("total loss"));
    }
    Ok((total, breakdown))
}

fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Aggregate per-class gate score statistics; empty classes are absent.
pub fn frame_score_stats(scores: &[f64], labels: &[u8]) -> FrameScoreStats {
    let ifs: Vec<f64> =
        scores.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(&s, _)| s).collect();
    let ofs: Vec<f64> =
        scores.iter().zip(labels).filter(|(_, &l)| l == 0).map(|(&s, _)| s).collect();
    let i = mean_std(&ifs);
    let o = mean_std(&ofs);
    FrameScoreStats {
        ifs_avg: i.map(|(m, _)| m),
        ifs_std: i.map(|(_, s)| s),
        ofs_avg: o.map(|(m, _)| m),
        ofs_std: o.map(|(_, s)| s),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap()
    }

    fn lbl(bits: &[u8]) -> FrameLabels {
        FrameLabels { labels: bits.to_vec(), span: (0.0, 0.0) }
    }

    #[test]
    fn classification_uniform_logits_is_ln5() {
        let loss = classification_loss(&t(&[0.3; 5]), 2).unwrap();
        assert!((loss.item() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn classification_known_value() {
        // logits [2,0,0,0,0], gt 0 => ln(e^2 + 4) - 2
        let loss = classification_loss(&t(&[2.0, 0.0, 0.0, 0.0, 0.0]), 0).unwrap();
        assert!((loss.item() - 0.4326529029917916).abs() < 1e-12);
    }

    #[test]
    fn classification_confident_correct_is_tiny() {
        let loss = classification_loss(&t(&[30.0, 0.0, 0.0, 0.0, 0.0]), 0).unwrap();
        assert!(loss.item() < 1e-9);
    }

    #[test]
    fn classification_gt_out_of_range() {
        assert!(classification_loss(&t(&[0.0; 5]), 5).is_err());
    }

    #[test]
    fn bce_half_scores_is_two_ln_two() {
        let loss = bce_loss(&t(&[0.5, 0.5]), &lbl(&[1, 0])).unwrap();
        assert!((loss.item() - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_known_value() {
        let loss = bce_loss(&t(&[0.9, 0.8, 0.2, 0.3]), &lbl(&[1, 1, 0, 0])).unwrap();
        assert!((loss.item() - 0.9083225622249782).abs() < 1e-12);
    }

    #[test]
    fn bbce_known_value() {
        let loss = bbce_loss(&t(&[0.9, 0.8, 0.2, 0.3]), &lbl(&[1, 1, 0, 0])).unwrap();
        assert!((loss.item() - 0.4541612811124891).abs() < 1e-12);
    }

    #[test]
    fn bbce_equals_bce_over_m_when_balanced() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let m = rng.gen_range(1..=6usize);
            let scores: Vec<f64> = (0..2 * m).map(|_| rng.gen_range(0.01..0.99)).collect();
            let mut labels = vec![1u8; m];
            labels.extend(vec![0u8; m]);
            let bce = bce_loss(&t(&scores), &lbl(&labels)).unwrap().item();
            let bbce = bbce_loss(&t(&scores), &lbl(&labels)).unwrap().item();
            assert!((bbce - bce / m as f64).abs() < 1e-10, "m={m} bce={bce} bbce={bbce}");
        }
    }

    #[test]
    fn iofsm_known_values() {
        let loss = iofsm_loss(&t(&[0.9, 0.8, 0.2, 0.3]), &lbl(&[1, 1, 0, 0])).unwrap();
        assert!((loss.item() - 0.4).abs() < 1e-12);
        // Perfect separation -> 0, fully inverted -> 2.
        let best = iofsm_loss(&t(&[1.0, 0.0]), &lbl(&[1, 0])).unwrap();
        assert!(best.item().abs() < 1e-12);
        let worst = iofsm_loss(&t(&[0.0, 1.0]), &lbl(&[1, 0])).unwrap();
        assert!((worst.item() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn iofsm_stays_in_zero_two_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let scores: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..=1.0)).collect();
            let v = iofsm_loss(&t(&scores), &lbl(&[1, 0, 1, 0, 0, 1])).unwrap().item();
            assert!((0.0..=2.0).contains(&v));
        }
    }

    #[test]
    fn empty_class_fallbacks_stay_finite() {
        let all_in = lbl(&[1, 1]);
        let all_out = lbl(&[0, 0]);
        for l in [&all_in, &all_out] {
            assert!(iofsm_loss(&t(&[0.4, 0.6]), l).unwrap().item().is_finite());
            assert!(bbce_loss(&t(&[0.4, 0.6]), l).unwrap().item().is_finite());
        }
    }

    #[test]
    fn losses_reject_length_mismatch_and_empty() {
        assert!(bce_loss(&t(&[0.5]), &lbl(&[1, 0])).is_err());
        assert!(bce_loss(&t(&[]), &lbl(&[])).is_err());
        assert!(iofsm_loss(&t(&[]), &lbl(&[])).is_err());
        assert!(bbce_loss(&t(&[0.5, 0.5, 0.5]), &lbl(&[1])).is_err());
    }

    #[test]
    fn span_to_labels_inclusive_boundaries() {
        // Frames at t = 0,2,4,6,8,10 s; span [3,9] covers 4,6,8.
        let l = span_to_labels((3.0, 9.0), 6, FRAME_INTERVAL_SEC).unwrap();
        assert_eq!(l.labels, vec![0, 0, 1, 1, 1, 0]);
        // Boundary exactly on a frame time is included on both ends.
        let l = span_to_labels((2.0, 6.0), 6, FRAME_INTERVAL_SEC).unwrap();
        assert_eq!(l.labels, vec![0, 1, 1, 1, 0, 0]);
    }

    #[test]
    fn span_to_labels_point_span_and_errors() {
        let l = span_to_labels((4.0, 4.0), 6, FRAME_INTERVAL_SEC).unwrap();
        assert_eq!(l.labels, vec![0, 0, 1, 0, 0, 0]);
        assert!(span_to_labels((-1.0, 3.0), 6, FRAME_INTERVAL_SEC).is_err());
        assert!(span_to_labels((5.0, 3.0), 6, FRAME_INTERVAL_SEC).is_err());
    }

    #[test]
    fn total_loss_is_additive_and_reports_parts() {
        let cls = Tensor::scalar(1.5f64);
        let frame = Tensor::scalar(0.25f64);
        let io = Tensor::scalar(0.5f64);
        let (total, b) = total_loss(&cls, Some(&frame), Some(&io)).unwrap();
        assert!((total.item() - 2.25).abs() < 1e-12);
        assert_eq!(b.cls, 1.5);
        assert_eq!(b.frame, Some(0.25));
        assert_eq!(b.io, Some(0.5));
        let (only_cls, b) = total_loss(&cls, None, None).unwrap();
        assert!((only_cls.item() - 1.5).abs() < 1e-12);
        assert_eq!(b.frame, None);
        let bad = Tensor::scalar(f64::NAN);
        assert!(total_loss(&bad, None, None).is_err());
    }

    #[test]
    fn frame_score_stats_per_class() {
        let s = frame_score_stats(&[0.9, 0.7, 0.1, 0.3], &[1, 1, 0, 0]);
        assert!((s.ifs_avg.unwrap() - 0.8).abs() < 1e-12);
        assert!((s.ifs_std.unwrap() - 0.1).abs() < 1e-12);
        assert!((s.ofs_avg.unwrap() - 0.2).abs() < 1e-12);
        assert!((s.ofs_std.unwrap() - 0.1).abs() < 1e-12);
        let empty = frame_score_stats(&[0.5], &[1]);
        assert!(empty.ofs_avg.is_none() && empty.ofs_std.is_none());
    }
}
