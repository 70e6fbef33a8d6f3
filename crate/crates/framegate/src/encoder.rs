//! Positional encoding and the residual convolutional sequence encoder.
//!
//! The encoder adds a sinusoidal positional encoding to its input, then runs
//! N blocks of L rounds of [LayerNorm -> conv1d -> ReLU] with residual
//! additions, and finishes each block with a layer normalization. Every
//! encoder instance in the model owns its parameters.

use crate::ctx::RunCtx;
use crate::params::{Init, ParamSource};
use crate::tensor::{Result, Scalar, Tensor, TensorError};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Weight of the positional encoding relative to the standardized content
/// rows. Attention in this model scores raw encoding dot products, so an
/// equal-scale positional term would dominate every similarity matrix with a
/// content-independent stripe pattern; a small weight keeps order information
/// available without masking token identity.
pub const POS_SCALE: f64 = 0.1;

struct ConvLayer<F: Scalar> {
    ln_gamma: Tensor<F>,
    ln_beta: Tensor<F>,
    kernel: Tensor<F>,
    bias: Tensor<F>,
}

pub struct EncoderParams<F: Scalar> {
    blocks: Vec<Block<F>>,
    d: usize,
}

struct Block<F: Scalar> {
    layers: Vec<ConvLayer<F>>,
    out_gamma: Tensor<F>,
    out_beta: Tensor<F>,
}

impl<F: Scalar> EncoderParams<F> {
    /// `l` convolutions per block, `n` blocks, kernel width `k` (odd), width d.
    pub fn new(src: &mut dyn ParamSource<F>, prefix: &str, d: usize, l: usize, n: usize, k: usize) -> Self {
        let mut blocks = Vec::with_capacity(n);
        for bi in 0..n {
            let mut layers = Vec::with_capacity(l);
            for li in 0..l {
                let p = format!("{prefix}.block{bi}.conv{li}");
                layers.push(ConvLayer {
                    ln_gamma: src.param(&format!("{p}.ln_gamma"), &[d], Init::Ones),
                    ln_beta: src.param(&format!("{p}.ln_beta"), &[d], Init::Zeros),
                    kernel: src.param(&format!("{p}.kernel"), &[k, d, d], Init::GlorotUniform),
                    bias: src.param(&format!("{p}.bias"), &[d], Init::Zeros),
                });
            }
            blocks.push(Block {
                layers,
                out_gamma: src.param(&format!("{prefix}.block{bi}.out_gamma"), &[d], Init::Ones),
                out_beta: src.param(&format!("{prefix}.block{bi}.out_beta"), &[d], Init::Zeros),
            });
        }
        EncoderParams { blocks, d }
    }
}

/// Sinusoidal positional encoding: entry (t, 2i) = sin(t / 10000^(2i/d)),
/// entry (t, 2i+1) = cos of the same angle. Requires even d.
pub fn positional_encoding<F: Scalar>(t: usize, d: usize) -> Result<Tensor<F>> {
    if d % 2 != 0 {
        return Err(TensorError::Invalid(format!("positional encoding needs even width, got {d}")));
    }
    let mut data = Vec::with_capacity(t * d);
    for ti in 0..t {
        for i in 0..d / 2 {
            let angle = ti as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data.push(F::from_f64(angle.sin()));
            data.push(F::from_f64(angle.cos()));
        }
    }
    Tensor::new(vec![t, d], data)
}

/// Encode a [T, d] sequence. Dropout (when the context enables it) is applied
/// after each convolution's ReLU.
pub fn conv_encoder<F: Scalar>(
    x: &Tensor<F>,
    params: &EncoderParams<F>,
    ctx: &mut RunCtx,
) -> Result<Tensor<F>> {
    let (t, d) = {
        let s = x.shape();
        if s.len() != 2 || s[1] != params.d {
            return Err(TensorError::ShapeMismatch(format!(
                "encoder expects [T, {}], got {:?}",
                params.d, s
            )));
        }
        (s[0], s[1])
    };
    let pos = positional_encoding::<F>(t, d)?.affine(POS_SCALE, 0.0);
    // Standardize rows before adding the positional encoding: encoder inputs
    // arrive at wildly different scales (embeddings vs. downstream fused
    // features), and an oversized positional term drowns the content.
    let unit = Tensor::new(vec![d], vec![F::one(); d])?;
    let zero = Tensor::new(vec![d], vec![F::zero(); d])?;
    let mut h = x.layer_norm(&unit, &zero, LAYER_NORM_EPS)?.add(&pos)?;
    for block in &params.blocks {
        for layer in &block.layers {
            let mut y = h.layer_norm(&layer.ln_gamma, &layer.ln_beta, LAYER_NORM_EPS)?;
            y = y.conv1d_same(&layer.kernel, &layer.bias)?;
            y = y.relu();
            if ctx.dropout_active() {
                let rate = ctx.dropout;
                let rng = ctx.rng.as_mut().expect("train ctx carries an rng");
                y = y.dropout(rate, rng)?;
            }
            h = y.add(&h)?;
        }
        h = h.layer_norm(&block.out_gamma, &block.out_beta, LAYER_NORM_EPS)?;
    }
    Ok(h)
}
