//! End-to-end model: embeddings -> stream encoders -> word/object-level
//! attention -> frame-level attention -> stream fusion -> frame-selection
//! gates -> answer classifier.

use serde::{Deserialize, Serialize};

use crate::attention::{frame_attend, word_object_attend, AttnMatrix, FrameAttnParams, WordAttnParams};
use crate::ctx::RunCtx;
use crate::data::{Episode, Stream};
use crate::encoder::{conv_encoder, EncoderParams};
use crate::fusion::{integrate_streams, SelfAttnParams};
use crate::gates::{classify, frame_gates, GateParams, GatedFeatures, GatedPool, NUM_ANSWERS};
use crate::losses::{
    bbce_loss, bce_loss, classification_loss, iofsm_loss, span_to_labels, total_loss, FrameLabels,
    FrameLossKind, LossBreakdown, LossFlags, FRAME_INTERVAL_SEC,
};
use crate::params::{BindSource, Init, InitSource, ParamSource, ParamStore, SliceSource};
use crate::tensor::{embedding, Result, Scalar, Tensor, TensorError};

/// Whether frame losses supervise all five hypotheses or only the
/// ground-truth one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FrameLossHypotheses {
    #[default]
    All,
    Gt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Base hidden width; must be even and divisible by `heads`.
    pub d: usize,
    pub heads: usize,
    /// Convolutions per encoder block.
    pub conv_layers: usize,
    /// Encoder block count.
    pub blocks: usize,
    pub kernel: usize,
    pub vocab_size: usize,
    pub object_codebook: usize,
    pub dropout: f64,
    /// Frame-level attention on (off replaces it with identity stream addition).
    pub dual_attention: bool,
    pub use_densecap: bool,
    pub gated_pool: GatedPool,
    /// Residual connection inside the stream-fusion self-attention.
    pub fusion_residual: bool,
    pub frame_loss_hypotheses: FrameLossHypotheses,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 32,
            heads: 4,
            conv_layers: 2,
            blocks: 1,
            kernel: 3,
            vocab_size: 400,
            object_codebook: 80,
            dropout: 0.1,
            dual_attention: true,
            use_densecap: true,
            gated_pool: GatedPool::default(),
            fusion_residual: true,
            frame_loss_hypotheses: FrameLossHypotheses::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d % 2 != 0 {
            return Err(TensorError::Invalid(format!("width {} must be positive and even", self.d)));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(TensorError::Invalid(format!(
                "head count {} must divide width {}",
                self.heads, self.d
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(TensorError::Invalid(format!("kernel width {} must be odd", self.kernel)));
        }
        Ok(())
    }
}

pub struct Model<F: Scalar> {
    pub cfg: ModelConfig,
    pub token_emb: Tensor<F>,
    pub object_emb: Tensor<F>,
    enc_qa: EncoderParams<F>,
    enc_sub: EncoderParams<F>,
    enc_vid: EncoderParams<F>,
    enc_cap: EncoderParams<F>,
    word_sub: WordAttnParams<F>,
    word_vid: WordAttnParams<F>,
    word_cap: WordAttnParams<F>,
    frame_sv: FrameAttnParams<F>,
    frame_sd: FrameAttnParams<F>,
    fusion: SelfAttnParams<F>,
    gates: GateParams<F>,
    /// Every learnable tensor in store order; empty when built from a
    /// [`SliceSource`] (gradient checking owns the tensors there).
    pub named_params: Vec<(String, Tensor<F>)>,
}

fn build_model<F: Scalar>(cfg: &ModelConfig, src: &mut dyn ParamSource<F>) -> Model<F> {
    let d = cfg.d;
    let (l, n, k) = (cfg.conv_layers, cfg.blocks, cfg.kernel);
    Model {
        cfg: cfg.clone(),
        token_emb: src.param("embeddings.token", &[cfg.vocab_size, d], Init::EmbeddingUniform),
        object_emb: src.param("embeddings.object", &[cfg.object_codebook, d], Init::EmbeddingUniform),
        enc_qa: EncoderParams::new(src, "encoder.qa", d, l, n, k),
        enc_sub: EncoderParams::new(src, "encoder.subtitle", d, l, n, k),
        enc_vid: EncoderParams::new(src, "encoder.video", d, l, n, k),
        enc_cap: EncoderParams::new(src, "encoder.densecap", d, l, n, k),
        word_sub: WordAttnParams::new(src, "word_attn.subtitle", d),
        word_vid: WordAttnParams::new(src, "word_attn.video", d),
        word_cap: WordAttnParams::new(src, "word_attn.densecap", d),
        frame_sv: FrameAttnParams::new(src, "frame_attn.sv", d),
        frame_sd: FrameAttnParams::new(src, "frame_attn.sd", d),
        fusion: SelfAttnParams::new(src, "fusion", d, cfg.heads, cfg.fusion_residual),
        gates: GateParams::new(src, "gates", d, l, n, k, cfg.gated_pool),
        named_params: Vec::new(),
    }
}

impl<F: Scalar> Model<F> {
    /// Fresh glorot-style initialization; returns the canonical store.
    pub fn init<R: rand::Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<ParamStore<F>> {
        cfg.validate()?;
        let mut src = InitSource::<F, R>::new(rng);
        build_model(cfg, &mut src);
        Ok(src.store)
    }

    /// Bind leaf tensors to an existing store (training / evaluation).
    pub fn bind(cfg: &ModelConfig, store: &ParamStore<F>) -> Result<Model<F>> {
        cfg.validate()?;
        let mut src = BindSource::new(store);
        let mut model = build_model(cfg, &mut src);
        model.named_params = src.finish()?;
        Ok(model)
    }

    /// Wire the model onto externally supplied parameter tensors, in store
    /// order (gradient checking).
    pub fn from_tensors(cfg: &ModelConfig, tensors: &[Tensor<F>]) -> Result<Model<F>> {
        cfg.validate()?;
        let mut src = SliceSource::new(tensors);
        Ok(build_model(cfg, &mut src))
    }

    /// Copy current tensor values back into a store (checkpointing).
    pub fn to_store(&self) -> ParamStore<F> {
        ParamStore {
            entries: self
                .named_params
                .iter()
                .map(|(name, t)| crate::params::StoreEntry {
                    name: name.clone(),
                    shape: t.shape(),
                    values: t.values(),
                })
                .collect(),
        }
    }

    pub fn zero_grads(&self) {
        for (_, t) in &self.named_params {
            t.zero_grad();
        }
    }

    fn word_params(&self, stream: Stream) -> &WordAttnParams<F> {
        match stream {
            Stream::Subtitle => &self.word_sub,
            Stream::Object => &self.word_vid,
            Stream::DenseCap => &self.word_cap,
        }
    }

    fn stream_encoder(&self, stream: Stream) -> &EncoderParams<F> {
        match stream {
            Stream::Subtitle => &self.enc_sub,
            Stream::Object => &self.enc_vid,
            Stream::DenseCap => &self.enc_cap,
        }
    }
}

/// Per-frame attention matrices and gate scores captured for `inspect`.
#[derive(Debug, Clone, Default)]
pub struct EpisodeTrace {
    /// word/object-level attention per stream, one matrix per frame (for the
    /// traced hypothesis).
    pub word: Vec<(Stream, Vec<AttnMatrix>)>,
    pub frame_sv: AttnMatrix,
    pub frame_sd: Option<AttnMatrix>,
    pub gate_local: Vec<f64>,
    pub gate_global: Vec<f64>,
    pub traced_hypothesis: usize,
}

pub struct EpisodeForward<F: Scalar> {
    /// [5, 1] answer logits.
    pub logits: Tensor<F>,
    /// Local gate score tensors, one [T_F, 1] per hypothesis.
    pub gates: Vec<GatedFeatures<F>>,
    pub trace: Option<EpisodeTrace>,
}

/// Token id sequence for hypothesis h: question followed by answer h, with
/// out-of-vocabulary ids clamped to UNK.
pub fn hypothesis_tokens(ep: &Episode, h: usize, vocab_size: usize) -> Vec<usize> {
    let clamp = |t: &u32| -> usize {
        let t = *t as usize;
        if t < vocab_size {
            t
        } else {
            crate::data::UNK as usize
        }
    };
    ep.question.iter().map(clamp).chain(ep.answers[h].iter().map(clamp)).collect()
}

fn stream_token_ids(ep: &Episode, stream: Stream, t: usize, vocab_size: usize, codebook: usize) -> Vec<usize> {
    let frame = &ep.frames[t];
    let ids: &[u32] = match stream {
        Stream::Subtitle => &frame.subtitle,
        Stream::Object => &frame.objects,
        Stream::DenseCap => &frame.densecap,
    };
    let limit = if stream == Stream::Object { codebook } else { vocab_size };
    ids.iter()
        .map(|&x| {
            let x = x as usize;
            if x < limit {
                x
            } else {
                crate::data::UNK as usize
            }
        })
        .collect()
}

impl<F: Scalar> Model<F> {
    fn streams(&self) -> Vec<Stream> {
        if self.cfg.use_densecap {
            vec![Stream::Subtitle, Stream::Object, Stream::DenseCap]
        } else {
            vec![Stream::Subtitle, Stream::Object]
        }
    }

    /// Full forward pass over one episode. When `trace_hypothesis` is set the
    /// attention matrices and gate scores of that hypothesis are captured.
    pub fn forward(
        &self,
        ep: &Episode,
        ctx: &mut RunCtx,
        trace_hypothesis: Option<usize>,
    ) -> Result<EpisodeForward<F>> {
        let t_f = ep.num_frames();
        if t_f == 0 {
            return Err(TensorError::Invalid(format!("episode {} has no frames", ep.id)));
        }
        if ep.answers.len() != NUM_ANSWERS {
            return Err(TensorError::Invalid(format!(
                "episode {} has {} answers",
                ep.id,
                ep.answers.len()
            )));
        }
        let streams = self.streams();

        // Encode per-frame context streams once; they are hypothesis-independent.
        let mut encoded: Vec<Vec<Tensor<F>>> = Vec::with_capacity(streams.len());
        for &stream in &streams {
            let table = if stream == Stream::Object { &self.object_emb } else { &self.token_emb };
            let mut per_frame = Vec::with_capacity(t_f);
            for t in 0..t_f {
                let ids = stream_token_ids(ep, stream, t, self.cfg.vocab_size, self.cfg.object_codebook);
                if ids.is_empty() {
                    return Err(TensorError::Invalid(format!(
                        "episode {} frame {t} has an empty {} stream",
                        ep.id,
                        stream.name()
                    )));
                }
                let emb = embedding(table, &ids)?;
                per_frame.push(conv_encoder(&emb, self.stream_encoder(stream), ctx)?);
            }
            encoded.push(per_frame);
        }

        let mut gates_out = Vec::with_capacity(NUM_ANSWERS);
        let mut trace = trace_hypothesis.map(|h| EpisodeTrace { traced_hypothesis: h, ..Default::default() });
        for h in 0..NUM_ANSWERS {
            let tracing = trace_hypothesis == Some(h);
            let qa_ids = hypothesis_tokens(ep, h, self.cfg.vocab_size);
            let qa = conv_encoder(&embedding(&self.token_emb, &qa_ids)?, &self.enc_qa, ctx)?;

            // word/object-level fusion per stream
            let mut fused: Vec<Tensor<F>> = Vec::with_capacity(streams.len());
            for (si, &stream) in streams.iter().enumerate() {
                let mut frame_mats = Vec::new();
                let mut rows = Vec::with_capacity(t_f);
                for enc_frame in &encoded[si] {
                    let mut mat = AttnMatrix::default();
                    let sink = tracing.then_some(&mut mat);
                    rows.push(word_object_attend(&qa, None, enc_frame, None, self.word_params(stream), sink)?);
                    if tracing {
                        frame_mats.push(mat);
                    }
                }
                if tracing {
                    trace.as_mut().unwrap().word.push((stream, frame_mats));
                }
                // Fix the scale of the fused rows before frame-level
                // attention: the word-level combiner output norm grows with
                // sequence content, and unnormalized rows make every
                // downstream random projection's noise proportional to that
                // norm, drowning the per-frame evidence signal. RMS (not
                // layer) normalization keeps the row-mean direction, which is
                // where a lifted combiner init places match strength.
                fused.push(crate::tensor::concat_rows(&rows)?.rms_norm_rows(crate::encoder::LAYER_NORM_EPS)?);
            }
            let (s_w, v_w) = (&fused[0], &fused[1]);

            let mut sv_mat = AttnMatrix::default();
            let u_sv = if self.cfg.dual_attention {
                frame_attend(s_w, v_w, &self.frame_sv, tracing.then_some(&mut sv_mat))?
            } else {
                s_w.add(v_w)?
            };
            // Same scale fix between the frame-level and fusion stages.
            let u_sv = u_sv.rms_norm_rows(crate::encoder::LAYER_NORM_EPS)?;
            let z = if self.cfg.use_densecap {
                let d_w = &fused[2];
                let mut sd_mat = AttnMatrix::default();
                let u_sd = if self.cfg.dual_attention {
                    frame_attend(s_w, d_w, &self.frame_sd, tracing.then_some(&mut sd_mat))?
                } else {
                    s_w.add(d_w)?
                };
                if tracing {
                    trace.as_mut().unwrap().frame_sd = Some(sd_mat);
                }
                let u_sd = u_sd.rms_norm_rows(crate::encoder::LAYER_NORM_EPS)?;
                integrate_streams(&u_sv, &u_sd, &self.fusion)?
            } else {
                u_sv
            };
            if tracing {
                trace.as_mut().unwrap().frame_sv = sv_mat;
            }

            // Fix the scale of the integrated rows so the gates and
            // classifier see unit-scale inputs (same rationale and same
            // mean-preserving normalization as for the fused rows above).
            let z = z.rms_norm_rows(crate::encoder::LAYER_NORM_EPS)?;

            let gated = frame_gates(&z, &self.gates, ctx)?;
            if tracing {
                let tr = trace.as_mut().unwrap();
                tr.gate_local = gated.gate_local.values().iter().map(|v| v.to_f64_val()).collect();
                tr.gate_global = gated.gate_global.values().iter().map(|v| v.to_f64_val()).collect();
            }
            gates_out.push(gated);
        }

        let logits = classify(&gates_out, &self.gates)?;
        Ok(EpisodeForward { logits, gates: gates_out, trace })
    }

    /// Frame labels for an episode at the fixed 0.5 fps sampling rate.
    pub fn frame_labels(&self, ep: &Episode) -> Result<FrameLabels> {
        span_to_labels(ep.gt_span, ep.num_frames(), FRAME_INTERVAL_SEC)
    }

    /// Mean loss over a batch of episodes: classification loss averaged per
    /// episode, frame losses averaged per (episode x supervised hypothesis),
    /// combined additively.
    pub fn batch_loss(
        &self,
        episodes: &[Episode],
        flags: LossFlags,
        ctx: &mut RunCtx,
    ) -> Result<(Tensor<F>, LossBreakdown)> {
        if episodes.is_empty() {
            return Err(TensorError::Invalid("empty batch".into()));
        }
        let mut cls_terms: Vec<Tensor<F>> = Vec::new();
        let mut frame_terms: Vec<Tensor<F>> = Vec::new();
        let mut io_terms: Vec<Tensor<F>> = Vec::new();
        for ep in episodes {
            let out = self.forward(ep, ctx, None)?;
            cls_terms.push(classification_loss(&out.logits, ep.gt_answer)?);
            if flags.frame == FrameLossKind::None && !flags.iofsm {
                continue;
            }
            let labels = self.frame_labels(ep)?;
            let hyps: Vec<usize> = match self.cfg.frame_loss_hypotheses {
                FrameLossHypotheses::All => (0..NUM_ANSWERS).collect(),
                FrameLossHypotheses::Gt => vec![ep.gt_answer],
            };
            for h in hyps {
                let scores = &out.gates[h].gate_local;
                match flags.frame {
                    FrameLossKind::None => {}
                    FrameLossKind::Bce => frame_terms.push(bce_loss(scores, &labels)?),
                    FrameLossKind::Bbce => frame_terms.push(bbce_loss(scores, &labels)?),
                }
                if flags.iofsm {
                    io_terms.push(iofsm_loss(scores, &labels)?);
                }
            }
        }
        let mean_of = |terms: &[Tensor<F>]| -> Result<Tensor<F>> {
            let mut sum = terms[0].clone();
            for t in &terms[1..] {
                sum = sum.add(t)?;
            }
            Ok(sum.affine(1.0 / terms.len() as f64, 0.0))
        };
        let cls = mean_of(&cls_terms)?;
        let frame = if frame_terms.is_empty() { None } else { Some(mean_of(&frame_terms)?) };
        let io = if io_terms.is_empty() { None } else { Some(mean_of(&io_terms)?) };
        total_loss(&cls, frame.as_ref(), io.as_ref())
    }
}

/// Gradient-check target: the full batch loss over fixed episodes, buildable
/// at either precision from the same parameter list.
pub struct ModelLossTarget {
    pub cfg: ModelConfig,
    pub episodes: Vec<Episode>,
    pub flags: LossFlags,
}

impl crate::gradcheck::CheckFn for ModelLossTarget {
    fn loss<F: Scalar>(&self, params: &[Tensor<F>]) -> Result<Tensor<F>> {
        let model = Model::from_tensors(&self.cfg, params)?;
        let mut ctx = RunCtx::eval();
        let (loss, _) = model.batch_loss(&self.episodes, self.flags, &mut ctx)?;
        Ok(loss)
    }
}

/// Param specs for a model config, drawn from a seeded store.
pub fn model_param_specs(cfg: &ModelConfig, seed: u64) -> Result<Vec<crate::gradcheck::ParamSpec>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let store: ParamStore<f64> = Model::<f64>::init(cfg, &mut rng)?;
    Ok(store
        .entries
        .iter()
        .map(|e| crate::gradcheck::ParamSpec::new(&e.name, &e.shape, e.values.clone()))
        .collect())
}
