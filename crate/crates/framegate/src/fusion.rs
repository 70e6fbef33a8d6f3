//! Stream integration via multi-head self-attention over the frame-wise
//! concatenation of the video-fused and dense-caption-fused streams, so each
//! stream attends to itself and to the other simultaneously.

use crate::params::{Init, ParamSource};
use crate::tensor::{concat_cols, concat_rows, Result, Scalar, Tensor, TensorError};

pub struct SelfAttnParams<F: Scalar> {
    pub heads: usize,
    pub w_q: Vec<Tensor<F>>,
    pub w_k: Vec<Tensor<F>>,
    pub w_v: Vec<Tensor<F>>,
    pub w_m: Tensor<F>,
    /// Adds x back onto the attention output when set (off by default).
    pub residual: bool,
}

impl<F: Scalar> SelfAttnParams<F> {
    pub fn new(src: &mut dyn ParamSource<F>, prefix: &str, d: usize, heads: usize, residual: bool) -> Self {
        assert!(heads > 0 && d % heads == 0, "head count {heads} must divide width {d}");
        let dh = d / heads;
        let mk = |src: &mut dyn ParamSource<F>, role: &str| -> Vec<Tensor<F>> {
            (0..heads)
                .map(|h| src.param(&format!("{prefix}.head{h}.{role}"), &[d, dh], Init::GlorotUniform))
                .collect()
        };
        let w_q = mk(src, "w_q");
        let w_k = mk(src, "w_k");
        let w_v = mk(src, "w_v");
        // Zero-init the output projection: with the residual connection the
        // whole block starts as the identity, so the attention path fades in
        // by learning instead of injecting random mixing at step one.
        let w_m = src.param(&format!("{prefix}.w_m"), &[d, d], Init::Zeros);
        SelfAttnParams { heads, w_q, w_k, w_v, w_m, residual }
    }
}

/// Scaled dot-product multi-head self-attention over a [T, d] sequence.
pub fn multi_head_self_attention<F: Scalar>(
    x: &Tensor<F>,
    params: &SelfAttnParams<F>,
) -> Result<Tensor<F>> {
    let (_, d) = x.rows_cols2()?;
    if d % params.heads != 0 {
        return Err(TensorError::Invalid(format!(
            "head count {} does not divide width {}",
            params.heads, d
        )));
    }
    let dh = d / params.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let q = x.matmul(&params.w_q[h])?;
        let k = x.matmul(&params.w_k[h])?;
        let v = x.matmul(&params.w_v[h])?;
        let attn = q.matmul_nt(&k)?.affine(scale, 0.0).softmax_rows(None)?;
        heads.push(attn.matmul(&v)?);
    }
    let out = concat_cols(&heads)?.matmul(&params.w_m)?;
    if params.residual {
        out.add(x)
    } else {
        Ok(out)
    }
}

/// Concatenate the two streams frame-wise (video stream first), self-attend,
/// split the output back into the input shape, and add the halves.
pub fn integrate_streams<F: Scalar>(
    u_sv: &Tensor<F>,
    u_sd: &Tensor<F>,
    params: &SelfAttnParams<F>,
) -> Result<Tensor<F>> {
    let (t_f, _) = u_sv.rows_cols2()?;
    let (t_f2, _) = u_sd.rows_cols2()?;
    if t_f != t_f2 {
        return Err(TensorError::ShapeMismatch(format!("frame counts differ: {} vs {}", t_f, t_f2)));
    }
    let joint = concat_rows(&[u_sv.clone(), u_sd.clone()])?;
    let fused = multi_head_self_attention(&joint, params)?;
    let first = fused.slice_rows(0, t_f)?;
    let second = fused.slice_rows(t_f, 2 * t_f)?;
    first.add(&second)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ConstSource;

    fn t(shape: Vec<usize>, v: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, v).unwrap()
    }

    fn params(glorot: f64, d: usize, heads: usize, residual: bool) -> SelfAttnParams<f64> {
        let mut src = ConstSource { glorot };
        SelfAttnParams::new(&mut src, "sa", d, heads, residual)
    }

    #[test]
    fn zero_weights_give_zero_output_without_residual() {
        let p = params(0.0, 4, 2, false);
        let x = t(vec![3, 4], (0..12).map(|i| 0.1 * i as f64).collect());
        let out = multi_head_self_attention(&x, &p).unwrap();
        assert!(out.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn residual_flag_adds_the_input_back() {
        let mut src = ConstSource { glorot: 0.0 };
        let p = SelfAttnParams::new(&mut src, "sa", 4, 2, true);
        let x = t(vec![2, 4], vec![0.3; 8]);
        let out = multi_head_self_attention(&x, &p).unwrap();
        assert_eq!(out.values(), x.values());
    }

    #[test]
    fn output_shape_matches_input() {
        let p = params(0.2, 8, 4, false);
        let x = t(vec![5, 8], vec![0.25; 40]);
        let out = multi_head_self_attention(&x, &p).unwrap();
        assert_eq!(out.shape(), vec![5, 8]);
    }

    #[test]
    fn identical_rows_produce_identical_outputs() {
        // Self-attention has no positional signal, so equal rows stay equal.
        let p = params(0.3, 4, 2, false);
        let x = t(vec![3, 4], vec![0.7, -0.2, 0.4, 0.1].repeat(3));
        let out = multi_head_self_attention(&x, &p).unwrap();
        let v = out.values();
        assert_eq!(v[0..4], v[4..8]);
        assert_eq!(v[0..4], v[8..12]);
    }

    #[test]
    fn integration_is_symmetric_in_the_two_streams() {
        // With no positional signal, concatenation order cannot matter because
        // the halves are summed afterwards.
        let p = params(0.25, 4, 2, false);
        let a = t(vec![2, 4], vec![0.5, -0.1, 0.3, 0.9, -0.4, 0.2, 0.6, 0.0]);
        let b = t(vec![2, 4], vec![0.1, 0.8, -0.6, 0.2, 0.7, -0.3, 0.4, 0.5]);
        let ab = integrate_streams(&a, &b, &p).unwrap();
        let ba = integrate_streams(&b, &a, &p).unwrap();
        for (x, y) in ab.values().iter().zip(ba.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_streams_integrate_to_twice_one_half() {
        let p = params(0.2, 4, 2, false);
        let x = t(vec![1, 4], vec![0.4, -0.2, 0.7, 0.1]);
        let joint = integrate_streams(&x, &x, &p).unwrap();
        let single = multi_head_self_attention(
            &crate::tensor::concat_rows(&[x.clone(), x.clone()]).unwrap(),
            &p,
        )
        .unwrap();
        let row0 = single.slice_rows(0, 1).unwrap();
        for (a, b) in joint.values().iter().zip(row0.values()) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn integration_rejects_frame_count_mismatch() {
        let p = params(0.2, 4, 2, false);
        let a = t(vec![2, 4], vec![0.0; 8]);
        let b = t(vec![3, 4], vec![0.0; 12]);
        assert!(integrate_streams(&a, &b, &p).is_err());
    }

    #[test]
    fn head_count_must_divide_width() {
        // Construction itself asserts, so exercise the runtime guard by
        // feeding a width the head count does not divide.
        let p = params(0.2, 4, 2, false);
        let x = t(vec![2, 5], vec![0.0; 10]);
        assert!(multi_head_self_attention(&x, &p).is_err());
    }
}
