//! Frame-selection gates and the answer classifier.
//!
//! The integrated frame features are re-encoded, scored per frame by a
//! supervised local gate and an unsupervised global gate, pooled three ways
//! (gated sums plus a frame-wise max-pool), and fed per hypothesis to a
//! two-layer classifier.

use serde::{Deserialize, Serialize};

use crate::ctx::RunCtx;
use crate::encoder::{conv_encoder, EncoderParams};
use crate::params::{Init, ParamSource};
use crate::tensor::{concat_cols, concat_rows, Result, Scalar, Tensor, TensorError};

pub const NUM_ANSWERS: usize = 5;

/// How the gated frame sequences are reduced to a single vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GatedPool {
    #[default]
    Sum,
    Max,
}

pub struct GateParams<F: Scalar> {
    pub encoder: EncoderParams<F>,
    pub local_w: Tensor<F>,
    pub local_b: Tensor<F>,
    pub global_w: Tensor<F>,
    pub global_b: Tensor<F>,
    pub cls_w1: Tensor<F>,
    pub cls_b1: Tensor<F>,
    pub cls_w2: Tensor<F>,
    pub cls_b2: Tensor<F>,
    pub pool: GatedPool,
}

impl<F: Scalar> GateParams<F> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        src: &mut dyn ParamSource<F>,
        prefix: &str,
        d: usize,
        l: usize,
        n: usize,
        k: usize,
        pool: GatedPool,
    ) -> Self {
        GateParams {
            encoder: EncoderParams::new(src, &format!("{prefix}.encoder"), d, l, n, k),
            local_w: src.param(&format!("{prefix}.local_gate.weight"), &[d, 1], Init::GlorotUniform),
            local_b: src.param(&format!("{prefix}.local_gate.bias"), &[1], Init::Zeros),
            global_w: src.param(&format!("{prefix}.global_gate.weight"), &[d, 1], Init::GlorotUniform),
            global_b: src.param(&format!("{prefix}.global_gate.bias"), &[1], Init::Zeros),
            cls_w1: src.param(&format!("{prefix}.classifier.w1"), &[3 * d, d], Init::GlorotUniform),
            cls_b1: src.param(&format!("{prefix}.classifier.b1"), &[d], Init::Zeros),
            cls_w2: src.param(&format!("{prefix}.classifier.w2"), &[d, 1], Init::GlorotUniform),
            cls_b2: src.param(&format!("{prefix}.classifier.b2"), &[1], Init::Zeros),
            pool,
        }
    }
}

/// Per-hypothesis pooled features plus the raw gate score sequences.
pub struct GatedFeatures<F: Scalar> {
    pub z_max: Tensor<F>,
    pub z_gg_pooled: Tensor<F>,
    pub z_gl_pooled: Tensor<F>,
    /// [T_F, 1] local gate scores in (0, 1); these receive span supervision.
    pub gate_local: Tensor<F>,
    /// [T_F, 1] global gate scores in (0, 1); trained by the answer loss only.
    pub gate_global: Tensor<F>,
}

pub fn frame_gates<F: Scalar>(
    z: &Tensor<F>,
    params: &GateParams<F>,
    ctx: &mut RunCtx,
) -> Result<GatedFeatures<F>> {
    let z_hat = conv_encoder(z, &params.encoder, ctx)?;
    let gate_local = z_hat.matmul(&params.local_w)?.add_bias(&params.local_b)?.sigmoid();
    let gate_global = z_hat.matmul(&params.global_w)?.add_bias(&params.global_b)?.sigmoid();
    let z_gl = z_hat.scale_rows(&gate_local)?;
    let z_gg = z_hat.scale_rows(&gate_global)?;
    let reduce = |x: &Tensor<F>| -> Result<Tensor<F>> {
        match params.pool {
            GatedPool::Sum => Ok(x.sum_axis0()),
            GatedPool::Max => x.maxpool_axis0(None),
        }
    };
    Ok(GatedFeatures {
        z_max: z_hat.maxpool_axis0(None)?,
        z_gg_pooled: reduce(&z_gg)?,
        z_gl_pooled: reduce(&z_gl)?,
        gate_local,
        gate_global,
    })
}

/// Answer logits for the five hypotheses, as a [5, 1] tensor.
pub fn classify<F: Scalar>(gated: &[GatedFeatures<F>], params: &GateParams<F>) -> Result<Tensor<F>> {
    if gated.len() != NUM_ANSWERS {
        return Err(TensorError::Invalid(format!(
            "classifier needs {} hypotheses, got {}",
            NUM_ANSWERS,
            gated.len()
        )));
    }
    let mut logits = Vec::with_capacity(NUM_ANSWERS);
    for g in gated {
        let feats = concat_cols(&[g.z_max.clone(), g.z_gg_pooled.clone(), g.z_gl_pooled.clone()])?;
        let h = feats.matmul(&params.cls_w1)?.add_bias(&params.cls_b1)?.relu();
        logits.push(h.matmul(&params.cls_w2)?.add_bias(&params.cls_b2)?);
    }
    concat_rows(&logits)
}

/// Argmax over logits, ties broken to the lowest index.
pub fn predicted_answer<F: Scalar>(logits: &Tensor<F>) -> usize {
    let vals = logits.values();
    let mut best = 0;
    for (i, v) in vals.iter().enumerate() {
        if *v > vals[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ConstSource;
    use crate::tensor::Tensor;

    fn gate_params(glorot: f64) -> GateParams<f64> {
        let mut src = ConstSource { glorot };
        GateParams::new(&mut src, "g", 4, 1, 1, 3, GatedPool::Sum)
    }

    fn run(z_vals: Vec<f64>, t_f: usize, p: &GateParams<f64>) -> GatedFeatures<f64> {
        let z = Tensor::new(vec![t_f, 4], z_vals).unwrap();
        frame_gates(&z, p, &mut RunCtx::eval()).unwrap()
    }

    #[test]
    fn zero_gate_weights_score_every_frame_half() {
        let p = gate_params(0.0);
        let g = run(vec![0.3; 12], 3, &p);
        for v in g.gate_local.values().iter().chain(g.gate_global.values().iter()) {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_scores_stay_in_the_open_unit_interval() {
        let p = gate_params(0.4);
        let g = run((0..20).map(|i| 0.3 * i as f64 - 3.0).collect(), 5, &p);
        for v in g.gate_local.values().iter().chain(g.gate_global.values().iter()) {
            assert!(*v > 0.0 && *v < 1.0);
        }
    }

    #[test]
    fn large_negative_bias_saturates_the_local_gate() {
        let p = gate_params(0.2);
        p.local_b.set_values(vec![-20.0]).unwrap();
        let g = run(vec![0.5; 8], 2, &p);
        assert!(g.gate_local.values().iter().all(|v| *v < 1e-6));
    }

    #[test]
    fn sum_pool_halves_with_gate_half() {
        // With zero gate weights every gate is 0.5, so the gated sums are half
        // the plain column sums of the re-encoded features.
        let p = gate_params(0.0);
        let z = Tensor::new(vec![3, 4], (0..12).map(|i| 0.1 * i as f64).collect()).unwrap();
        let g = frame_gates(&z, &p, &mut RunCtx::eval()).unwrap();
        let z_hat = conv_encoder(&z, &p.encoder, &mut RunCtx::eval()).unwrap();
        let sums = z_hat.sum_axis0();
        for (a, b) in g.z_gl_pooled.values().iter().zip(sums.values()) {
            assert!((a - 0.5 * b).abs() < 1e-10);
        }
        for (a, b) in g.z_gg_pooled.values().iter().zip(sums.values()) {
            assert!((a - 0.5 * b).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_classifier_weights_give_uniform_logits() {
        let p = gate_params(0.0);
        let gated: Vec<GatedFeatures<f64>> =
            (0..NUM_ANSWERS).map(|i| run(vec![0.1 * i as f64; 8], 2, &p)).collect();
        let logits = classify(&gated, &p).unwrap();
        assert_eq!(logits.shape(), vec![NUM_ANSWERS, 1]);
        assert!(logits.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn classify_rejects_wrong_hypothesis_count() {
        let p = gate_params(0.1);
        let gated: Vec<GatedFeatures<f64>> = (0..3).map(|_| run(vec![0.2; 8], 2, &p)).collect();
        assert!(classify(&gated, &p).is_err());
    }

    #[test]
    fn predicted_answer_argmax_with_lowest_index_ties() {
        let l = Tensor::new(vec![5, 1], vec![0.1, 0.9, 0.3, 0.9, 0.2]).unwrap();
        assert_eq!(predicted_answer(&l), 1);
        let tie = Tensor::new(vec![5, 1], vec![0.5; 5]).unwrap();
        assert_eq!(predicted_answer(&tie), 0);
    }
}
