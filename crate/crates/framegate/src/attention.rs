//! Dual-level attention: word/object-level fusion of each QA hypothesis with
//! one frame's context items, then frame-level cross-alignment of two fused
//! streams.

use crate::params::{Init, ParamSource};
use crate::tensor::{concat_cols, Mask, Result, Scalar, Tensor, TensorError};

/// Word/object-level parameters for one stream pair. f1 is shared between the
/// two attention directions of the pair; f2 combines them.
pub struct WordAttnParams<F: Scalar> {
    pub f1_w: Tensor<F>,
    pub f1_b: Tensor<F>,
    pub f2_w: Tensor<F>,
    pub f2_b: Tensor<F>,
}

impl<F: Scalar> WordAttnParams<F> {
    pub fn new(src: &mut dyn ParamSource<F>, prefix: &str, d: usize) -> Self {
        WordAttnParams {
            f1_w: src.param(
                &format!("{prefix}.f1.weight"),
                &[3 * d, d],
                // Rows 2d.. read the qa (x) context elementwise-product block;
                // lifting them makes match strength visible at initialization.
                Init::GlorotUniformRowsLifted { first_row: 2 * d, lift: 6.0 / d as f64 },
            ),
            f1_b: src.param(&format!("{prefix}.f1.bias"), &[d], Init::Zeros),
            f2_w: src.param(
                &format!("{prefix}.f2.weight"),
                &[4 * d, d],
                // Rows 2d.. read the product and sum blocks of the two pooled
                // directions; lifted so pooled match strength stays readable.
                Init::GlorotUniformRowsLifted { first_row: 2 * d, lift: 6.0 / d as f64 },
            ),
            f2_b: src.param(&format!("{prefix}.f2.bias"), &[d], Init::Zeros),
        }
    }
}

/// Frame-level parameters for one stream pair; f3 is shared between the two
/// directions of the pair.
pub struct FrameAttnParams<F: Scalar> {
    pub f3_w: Tensor<F>,
    pub f3_b: Tensor<F>,
}

impl<F: Scalar> FrameAttnParams<F> {
    pub fn new(src: &mut dyn ParamSource<F>, prefix: &str, d: usize) -> Self {
        FrameAttnParams {
            f3_w: src.param(
                &format!("{prefix}.f3.weight"),
                &[4 * d, d],
                // Same trailing-block lift as f1/f2: keeps the cross-frame
                // product and sum blocks readable at initialization.
                Init::GlorotUniformRowsLifted { first_row: 2 * d, lift: 6.0 / d as f64 },
            ),
            f3_b: src.param(&format!("{prefix}.f3.bias"), &[d], Init::Zeros),
        }
    }
}

/// Captured attention weights for inspection.
#[derive(Debug, Clone, Default)]
pub struct AttnMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Dot-product similarity: entry (i, j) = a_i . b_j.
pub fn similarity_matrix<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    a.matmul_nt(b)
}

fn fc_relu<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    Ok(x.matmul(w)?.add_bias(b)?.relu())
}

/// Expand a per-item validity vector into a [rows, len] column mask.
fn broadcast_mask(item_mask: Option<&Mask>, rows: usize) -> Option<Mask> {
    item_mask.map(|m| {
        let mut data = Vec::with_capacity(rows * m.data.len());
        for _ in 0..rows {
            data.extend_from_slice(&m.data);
        }
        Mask { shape: vec![rows, m.data.len()], data }
    })
}

/// Word/object-level attention for one frame: aligns the QA hypothesis with
/// that frame's context items in both directions, max-pools each direction to
/// a d-vector, and combines them into a single fused d-vector (returned as a
/// 1 x d tensor). Masks mark valid (non-padding) positions and masked items
/// cannot influence the output.
pub fn word_object_attend<F: Scalar>(
    qa: &Tensor<F>,
    qa_mask: Option<&Mask>,
    ctx_items: &Tensor<F>,
    ctx_mask: Option<&Mask>,
    params: &WordAttnParams<F>,
    mut trace: Option<&mut AttnMatrix>,
) -> Result<Tensor<F>> {
    let (t_qa, d) = qa.rows_cols2()?;
    let (t_c, d2) = ctx_items.rows_cols2()?;
    if d != d2 {
        return Err(TensorError::ShapeMismatch(format!("qa width {} vs context width {}", d, d2)));
    }
    let sim = similarity_matrix(qa, ctx_items)?;

    // context -> QA direction
    let attn_c = sim.softmax_rows(broadcast_mask(ctx_mask, t_qa).as_ref())?;
    if let Some(tr) = trace.as_deref_mut() {
        *tr = AttnMatrix {
            rows: t_qa,
            cols: t_c,
            data: attn_c.values().iter().map(|v| v.to_f64_val()).collect(),
        };
    }
    let ctx_att = attn_c.matmul(ctx_items)?;
    let qa_fused = fc_relu(&concat_cols(&[qa.clone(), ctx_att.clone(), qa.mul(&ctx_att)?])?, &params.f1_w, &params.f1_b)?;
    let qa_m = qa_fused.maxpool_axis0(qa_mask)?;

    // QA -> context direction
    let attn_q = sim.transpose().softmax_rows(broadcast_mask(qa_mask, t_c).as_ref())?;
    let qa_att = attn_q.matmul(qa)?;
    let ctx_fused =
        fc_relu(&concat_cols(&[ctx_items.clone(), qa_att.clone(), ctx_items.mul(&qa_att)?])?, &params.f1_w, &params.f1_b)?;
    let ctx_m = ctx_fused.maxpool_axis0(ctx_mask)?;

    let combined = concat_cols(&[qa_m.clone(), ctx_m.clone(), qa_m.mul(&ctx_m)?, qa_m.add(&ctx_m)?])?;
    fc_relu(&combined, &params.f2_w, &params.f2_b)
}

/// Frame-level cross-alignment of two fused streams of equal length, with the
/// residual additions on both attention directions. Returns the integrated
/// per-frame features.
pub fn frame_attend<F: Scalar>(
    s_w: &Tensor<F>,
    v_w: &Tensor<F>,
    params: &FrameAttnParams<F>,
    trace: Option<&mut AttnMatrix>,
) -> Result<Tensor<F>> {
    frame_attend_scaled(s_w, v_w, params, 1.0, trace)
}

/// Same as [`frame_attend`] with the attention weights scaled by a constant;
/// scale 0 reduces both attended features to their residual inputs (test hook).
pub fn frame_attend_scaled<F: Scalar>(
    s_w: &Tensor<F>,
    v_w: &Tensor<F>,
    params: &FrameAttnParams<F>,
    attn_scale: f64,
    trace: Option<&mut AttnMatrix>,
) -> Result<Tensor<F>> {
    let (t_s, _) = s_w.rows_cols2()?;
    let (t_v, _) = v_w.rows_cols2()?;
    if t_s != t_v {
        return Err(TensorError::ShapeMismatch(format!("frame counts differ: {} vs {}", t_s, t_v)));
    }
    let sim = similarity_matrix(s_w, v_w)?;
    let mut attn = sim.softmax_rows(None)?;
    let mut attn_t = sim.transpose().softmax_rows(None)?;
    if attn_scale != 1.0 {
        attn = attn.affine(attn_scale, 0.0);
        attn_t = attn_t.affine(attn_scale, 0.0);
    }
    if let Some(tr) = trace {
        *tr = AttnMatrix {
            rows: t_s,
            cols: t_v,
            data: attn.values().iter().map(|v| v.to_f64_val()).collect(),
        };
    }
    let s_att = attn.matmul(s_w)?.add(s_w)?;
    let v_hat = fc_relu(
        &concat_cols(&[v_w.clone(), s_att.clone(), v_w.mul(&s_att)?, v_w.add(&s_att)?])?,
        &params.f3_w,
        &params.f3_b,
    )?;
    let v_att = attn_t.matmul(v_w)?.add(v_w)?;
    let s_hat = fc_relu(
        &concat_cols(&[s_w.clone(), v_att.clone(), s_w.mul(&v_att)?, s_w.add(&v_att)?])?,
        &params.f3_w,
        &params.f3_b,
    )?;
    s_hat.add(&v_hat)
}

impl<F: Scalar> Tensor<F> {
    pub(crate) fn rows_cols2(&self) -> Result<(usize, usize)> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch(format!("expected a matrix, got shape {:?}", s)));
        }
        Ok((s[0], s[1]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ConstSource;

    fn t(shape: Vec<usize>, v: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, v).unwrap()
    }

    fn word_params(glorot: f64, d: usize) -> WordAttnParams<f64> {
        let mut src = ConstSource { glorot };
        WordAttnParams::new(&mut src, "w", d)
    }

    fn frame_params(glorot: f64, d: usize) -> FrameAttnParams<f64> {
        let mut src = ConstSource { glorot };
        FrameAttnParams::new(&mut src, "f", d)
    }

    #[test]
    fn similarity_is_pairwise_dot_products() {
        let a = t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = t(vec![1, 2], vec![5.0, 6.0]);
        let s = similarity_matrix(&a, &b).unwrap();
        assert_eq!(s.shape(), vec![2, 1]);
        assert_eq!(s.values(), vec![17.0, 39.0]);
    }

    #[test]
    fn word_attend_hand_oracle_d1() {
        // d = 1, qa = [0.5], ctx = [1.0], all-ones fc weights, zero biases:
        // both attentions are [[1]]; qa side relu(0.5 + 1 + 0.5) = 2; ctx side
        // relu(1 + 0.5 + 0.5) = 2; combine relu(2 + 2 + 4 + 4) = 12.
        let p = word_params(1.0, 1);
        let qa = t(vec![1, 1], vec![0.5]);
        let ctx = t(vec![1, 1], vec![1.0]);
        let out = word_object_attend(&qa, None, &ctx, None, &p, None).unwrap();
        assert_eq!(out.shape(), vec![1, 1]);
        assert!((out.item() - 12.0).abs() < 1e-12);
    }

    #[test]
    fn word_attend_output_is_one_by_d() {
        let d = 4;
        let p = word_params(0.2, d);
        let qa = t(vec![3, d], (0..12).map(|i| 0.1 * i as f64).collect());
        let ctx = t(vec![5, d], (0..20).map(|i| 0.05 * i as f64).collect());
        let out = word_object_attend(&qa, None, &ctx, None, &p, None).unwrap();
        assert_eq!(out.shape(), vec![1, d]);
    }

    #[test]
    fn word_attend_rejects_width_mismatch() {
        let p = word_params(0.2, 2);
        let qa = t(vec![1, 2], vec![0.1, 0.2]);
        let ctx = t(vec![1, 3], vec![0.1, 0.2, 0.3]);
        assert!(word_object_attend(&qa, None, &ctx, None, &p, None).is_err());
    }

    #[test]
    fn masked_padding_does_not_change_the_output() {
        let d = 3;
        let p = word_params(0.3, d);
        let qa = t(vec![2, d], vec![0.4, -0.2, 0.7, 0.1, 0.9, -0.5]);
        let ctx = t(vec![2, d], vec![0.2, 0.3, -0.1, -0.6, 0.5, 0.8]);
        let base = word_object_attend(&qa, None, &ctx, None, &p, None).unwrap();

        // Same context plus a large padding row that the mask must suppress.
        let padded = t(vec![3, d], vec![0.2, 0.3, -0.1, -0.6, 0.5, 0.8, 9.0, 9.0, 9.0]);
        let mask = Mask::new(vec![3], vec![true, true, false]).unwrap();
        let out = word_object_attend(&qa, None, &padded, Some(&mask), &p, None).unwrap();
        for (a, b) in out.values().iter().zip(base.values()) {
            assert!((a - b).abs() < 1e-10, "padding leaked: {a} vs {b}");
        }
    }

    #[test]
    fn word_attend_trace_rows_sum_to_one() {
        let d = 2;
        let p = word_params(0.4, d);
        let qa = t(vec![2, d], vec![0.5, -0.3, 0.2, 0.8]);
        let ctx = t(vec![3, d], vec![0.1, 0.2, -0.4, 0.6, 0.9, -0.2]);
        let mut mat = AttnMatrix::default();
        word_object_attend(&qa, None, &ctx, None, &p, Some(&mut mat)).unwrap();
        assert_eq!((mat.rows, mat.cols), (2, 3));
        for r in 0..mat.rows {
            let s: f64 = mat.data[r * mat.cols..(r + 1) * mat.cols].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn frame_attend_hand_oracle_d1() {
        // s = [1], v = [2], all-ones f3, zero bias: sim = [[2]], both attention
        // matrices are [[1]]; s_att = 1 + 1 = 2, v_hat = relu(2+2+4+4) = 12;
        // v_att = 2 + 2 = 4, s_hat = relu(1+4+4+5) = 14; total 26.
        let p = frame_params(1.0, 1);
        let s = t(vec![1, 1], vec![1.0]);
        let v = t(vec![1, 1], vec![2.0]);
        let out = frame_attend(&s, &v, &p, None).unwrap();
        assert!((out.item() - 26.0).abs() < 1e-12);
    }

    #[test]
    fn frame_attend_equal_streams_gives_twice_one_direction() {
        let d = 3;
        let p = frame_params(0.3, d);
        let s = t(vec![2, d], vec![0.3, -0.1, 0.5, 0.7, 0.2, -0.4]);
        let out = frame_attend(&s, &s, &p, None).unwrap();
        // With identical streams both directions coincide, so the output is
        // exactly twice one direction's fused features.
        let sim = similarity_matrix(&s, &s).unwrap();
        let attn = sim.softmax_rows(None).unwrap();
        let s_att = attn.matmul(&s).unwrap().add(&s).unwrap();
        let one = concat_cols(&[
            s.clone(),
            s_att.clone(),
            s.mul(&s_att).unwrap(),
            s.add(&s_att).unwrap(),
        ])
        .unwrap()
        .matmul(&p.f3_w)
        .unwrap()
        .add_bias(&p.f3_b)
        .unwrap()
        .relu();
        for (a, b) in out.values().iter().zip(one.values()) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn frame_attend_scale_zero_uses_residual_inputs_only() {
        let d = 2;
        let p = frame_params(0.5, d);
        let s = t(vec![2, d], vec![0.2, 0.6, -0.3, 0.1]);
        let v = t(vec![2, d], vec![0.4, -0.2, 0.8, 0.5]);
        let out = frame_attend_scaled(&s, &v, &p, 0.0, None).unwrap();
        // scale 0 zeroes the attention weights, so s_att = s and v_att = v.
        let v_hat = concat_cols(&[v.clone(), s.clone(), v.mul(&s).unwrap(), v.add(&s).unwrap()])
            .unwrap()
            .matmul(&p.f3_w)
            .unwrap()
            .add_bias(&p.f3_b)
            .unwrap()
            .relu();
        let s_hat = concat_cols(&[s.clone(), v.clone(), s.mul(&v).unwrap(), s.add(&v).unwrap()])
            .unwrap()
            .matmul(&p.f3_w)
            .unwrap()
            .add_bias(&p.f3_b)
            .unwrap()
            .relu();
        let expected = s_hat.add(&v_hat).unwrap();
        for (a, b) in out.values().iter().zip(expected.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn frame_attend_rejects_frame_count_mismatch() {
        let p = frame_params(0.3, 2);
        let s = t(vec![2, 2], vec![0.0; 4]);
        let v = t(vec![3, 2], vec![0.0; 6]);
        assert!(frame_attend(&s, &v, &p, None).is_err());
    }
}
