//! Central-difference gradient checking.
//!
//! The numeric side always runs in `f64` so the finite-difference baseline is
//! not drowned in rounding noise; the analytic side runs at the precision
//! under test. In 32-bit mode the parameters are first rounded through `f32`
//! so both sides evaluate at identical representable points.

use crate::tensor::{Result, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Bits32,
    Bits64,
}

/// A scalar-valued function of named parameters, buildable at any precision.
pub trait CheckFn {
    fn loss<F: Scalar>(&self, params: &[Tensor<F>]) -> Result<Tensor<F>>;
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParamSpec {
    pub fn new(name: &str, shape: &[usize], values: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        ParamSpec { name: name.to_string(), shape: shape.to_vec(), values }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
}

/// Denominator floor: gradients below the square root of the machine epsilon
/// of the precision under test carry no reliable relative information and are
/// compared absolutely at that scale instead.
fn noise_floor(precision: Precision) -> f64 {
    match precision {
        Precision::Bits32 => (f32::EPSILON as f64).sqrt(),
        Precision::Bits64 => f64::EPSILON.sqrt(),
    }
}

fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn build_params<F: Scalar>(specs: &[ParamSpec], values: &[Vec<f64>]) -> Vec<Tensor<F>> {
    specs
        .iter()
        .zip(values)
        .map(|(s, v)| {
            Tensor::param(s.shape.clone(), v.iter().map(|&x| F::from_f64(x)).collect()).unwrap()
        })
        .collect()
}

fn eval_f64<T: CheckFn>(f: &T, specs: &[ParamSpec], values: &[Vec<f64>]) -> Result<f64> {
    let params = build_params::<f64>(specs, values);
    let loss = f.loss(&params)?;
    let v = loss.item();
    if !v.is_finite() {
        return Err(TensorError::NonFinite("grad_check loss"));
    }
    Ok(v)
}

/// Max over all parameter elements of the relative error between analytic
/// gradients and central finite differences (f(θ+ε)−f(θ−ε))/2ε.
pub fn grad_check<T: CheckFn>(
    f: &T,
    specs: &[ParamSpec],
    epsilon: f64,
    precision: Precision,
) -> Result<GradCheckReport> {
    if !(1e-5..=1e-2).contains(&epsilon) {
        return Err(TensorError::Invalid(format!("epsilon {} outside [1e-5, 1e-2]", epsilon)));
    }
    // Evaluation point, rounded to the precision under test.
    let base: Vec<Vec<f64>> = specs
        .iter()
        .map(|s| match precision {
            Precision::Bits32 => s.values.iter().map(|&v| v as f32 as f64).collect(),
            Precision::Bits64 => s.values.clone(),
        })
        .collect();

    // Analytic gradients at the precision under test.
    let analytic: Vec<Vec<f64>> = match precision {
        Precision::Bits32 => {
            let params = build_params::<f32>(specs, &base);
            let loss = f.loss(&params)?;
            if !loss.item().is_finite() {
                return Err(TensorError::NonFinite("grad_check loss"));
            }
            loss.backward()?;
            params
                .iter()
                .map(|p| {
                    p.grad()
                        .map(|g| g.iter().map(|&v| v as f64).collect())
                        .unwrap_or_else(|| vec![0.0; p.len()])
                })
                .collect()
        }
        Precision::Bits64 => {
            let params = build_params::<f64>(specs, &base);
            let loss = f.loss(&params)?;
            if !loss.item().is_finite() {
                return Err(TensorError::NonFinite("grad_check loss"));
            }
            loss.backward()?;
            params
                .iter()
                .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.len()]))
                .collect()
        }
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: 0,
    };
    let floor = noise_floor(precision);
    let mut values = base.clone();
    for (pi, spec) in specs.iter().enumerate() {
        for ei in 0..spec.values.len() {
            let orig = values[pi][ei];
            values[pi][ei] = orig + epsilon;
            let plus = eval_f64(f, specs, &values)?;
            values[pi][ei] = orig - epsilon;
            let minus = eval_f64(f, specs, &values)?;
            values[pi][ei] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let e = rel_err(analytic[pi][ei], numeric, floor);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst_param = spec.name.clone();
                report.worst_index = ei;
                report.worst_analytic = analytic[pi][ei];
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Named gradient-check targets covering every differentiable primitive plus
/// the full training objective on a tiny episode, shared by the CLI and the
/// test suite.
pub mod suite {
    use super::{grad_check, CheckFn, GradCheckReport, ParamSpec, Precision};
    use crate::tensor::{concat_cols, concat_rows, embedding, Mask, Result, Scalar, Tensor};

    /// Deterministic smooth values, kept away from relu/clamp kinks and
    /// softmax ties.
    fn smooth(n: usize, lo: f64, hi: f64, phase: f64) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let t = (i as f64 * 0.7310 + phase).sin();
                lo + (hi - lo) * (0.5 + 0.45 * t)
            })
            .collect()
    }

    fn spec(name: &str, shape: &[usize], lo: f64, hi: f64, phase: f64) -> ParamSpec {
        ParamSpec::new(name, shape, smooth(shape.iter().product(), lo, hi, phase))
    }

    /// Reduce a matrix to a scalar with fixed non-uniform weights so that
    /// every output element receives a distinct upstream gradient.
    fn weighted_sum<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
        let n = x.len();
        let w = Tensor::new(x.shape(), smooth(n, -1.0, 1.0, 2.4).iter().map(|&v| F::from_f64(v)).collect())?;
        Ok(x.mul(&w)?.sum_all())
    }

    enum Prim {
        Matmul,
        MatmulNt,
        Add,
        Mul,
        AddBias,
        ScaleRows,
        Relu,
        Sigmoid,
        Ln,
        Affine,
        Clamp,
        SoftmaxRows,
        SoftmaxRowsMasked,
        LayerNorm,
        RmsNormRows,
        Conv1dSame,
        MaxpoolAxis0,
        SumAxis0,
        SliceRows,
        GatherRows,
        Transpose,
        MeanAll,
        ConcatRows,
        ConcatCols,
        Embedding,
        DropoutMask,
    }

    struct PrimCheck(Prim);

    impl CheckFn for PrimCheck {
        fn loss<F: Scalar>(&self, p: &[Tensor<F>]) -> Result<Tensor<F>> {
            let out = match self.0 {
                Prim::Matmul => p[0].matmul(&p[1])?,
                Prim::MatmulNt => p[0].matmul_nt(&p[1])?,
                Prim::Add => p[0].add(&p[1])?,
                Prim::Mul => p[0].mul(&p[1])?,
                Prim::AddBias => p[0].add_bias(&p[1])?,
                Prim::ScaleRows => p[0].scale_rows(&p[1])?,
                Prim::Relu => p[0].relu(),
                Prim::Sigmoid => p[0].sigmoid(),
                Prim::Ln => p[0].ln(),
                Prim::Affine => p[0].affine(1.7, -0.3),
                Prim::Clamp => p[0].clamp(-10.0, 10.0),
                Prim::SoftmaxRows => p[0].softmax_rows(None)?,
                Prim::SoftmaxRowsMasked => {
                    let mask = Mask::new(vec![3, 4], vec![
                        true, true, false, true, //
                        true, false, true, true, //
                        false, true, true, true,
                    ])?;
                    p[0].softmax_rows(Some(&mask))?
                }
                Prim::LayerNorm => p[0].layer_norm(&p[1], &p[2], 1e-5)?,
                Prim::RmsNormRows => p[0].rms_norm_rows(1e-5)?,
                Prim::Conv1dSame => p[0].conv1d_same(&p[1], &p[2])?,
                Prim::MaxpoolAxis0 => p[0].maxpool_axis0(None)?,
                Prim::SumAxis0 => p[0].sum_axis0(),
                Prim::SliceRows => p[0].slice_rows(1, 3)?,
                Prim::GatherRows => p[0].gather_rows(&[2, 0, 2])?,
                Prim::Transpose => p[0].transpose(),
                Prim::MeanAll => p[0].mean_all(),
                Prim::ConcatRows => concat_rows(&[p[0].clone(), p[1].clone()])?,
                Prim::ConcatCols => concat_cols(&[p[0].clone(), p[1].clone()])?,
                Prim::Embedding => embedding(&p[0], &[1, 0, 2, 1])?,
                Prim::DropoutMask => {
                    let keep: Vec<bool> = (0..12).map(|i| i % 3 != 1).collect();
                    p[0].dropout_with_mask(keep, 0.75)?
                }
            };
            weighted_sum(&out)
        }
    }

    fn prim_specs(kind: &Prim) -> Vec<ParamSpec> {
        match kind {
            Prim::Matmul => vec![spec("a", &[3, 4], -2.0, 2.0, 0.3), spec("b", &[4, 2], -2.0, 2.0, 1.1)],
            Prim::MatmulNt => vec![spec("a", &[3, 4], -2.0, 2.0, 0.3), spec("b", &[2, 4], -2.0, 2.0, 1.1)],
            Prim::Add | Prim::Mul => {
                vec![spec("a", &[3, 4], -2.0, 2.0, 0.3), spec("b", &[3, 4], -2.0, 2.0, 1.7)]
            }
            Prim::AddBias => vec![spec("a", &[3, 4], -2.0, 2.0, 0.3), spec("b", &[1, 4], -1.0, 1.0, 0.9)],
            Prim::ScaleRows => vec![spec("a", &[3, 4], -2.0, 2.0, 0.3), spec("s", &[3, 1], 0.2, 1.8, 0.9)],
            // mixed signs, clear of the kink at zero
            Prim::Relu => vec![ParamSpec::new(
                "a",
                &[3, 4],
                vec![0.7, -0.9, 1.3, -0.4, 2.0, -1.6, 0.5, -0.5, 1.1, -2.0, 0.8, -1.2],
            )],
            Prim::Sigmoid | Prim::Affine | Prim::Clamp | Prim::SoftmaxRows | Prim::Transpose | Prim::MeanAll | Prim::SumAxis0 | Prim::DropoutMask | Prim::SoftmaxRowsMasked => {
                vec![spec("a", &[3, 4], -2.0, 2.0, 0.3)]
            }
            Prim::Ln => vec![spec("a", &[3, 4], 0.2, 3.0, 0.3)],
            Prim::LayerNorm => vec![
                spec("x", &[3, 4], -2.0, 2.0, 0.3),
                spec("gamma", &[1, 4], 0.5, 1.5, 1.0),
                spec("beta", &[1, 4], -0.5, 0.5, 1.9),
            ],
            Prim::RmsNormRows => vec![spec("x", &[3, 4], -2.0, 2.0, 0.3)],
            Prim::Conv1dSame => vec![
                spec("x", &[5, 3], -2.0, 2.0, 0.3),
                spec("kernel", &[3, 3, 2], -1.0, 1.0, 1.0),
                spec("bias", &[1, 2], -0.5, 0.5, 1.9),
            ],
            Prim::MaxpoolAxis0 | Prim::SliceRows | Prim::GatherRows => {
                vec![spec("a", &[4, 3], -2.0, 2.0, 0.3)]
            }
            Prim::ConcatRows => vec![spec("a", &[2, 3], -2.0, 2.0, 0.3), spec("b", &[3, 3], -2.0, 2.0, 1.5)],
            Prim::ConcatCols => vec![spec("a", &[3, 2], -2.0, 2.0, 0.3), spec("b", &[3, 3], -2.0, 2.0, 1.5)],
            Prim::Embedding => vec![spec("table", &[4, 3], -2.0, 2.0, 0.3)],
        }
    }

    /// Tiny two-frame episode exercising the whole network and Eq-style
    /// combined loss.
    pub fn toy_model_target() -> crate::model::ModelLossTarget {
        use crate::data::{Episode, Frame, Stream};
        let cfg = crate::model::ModelConfig {
            d: 8,
            heads: 2,
            vocab_size: 20,
            object_codebook: 8,
            dropout: 0.0,
            ..Default::default()
        };
        let ep = Episode {
            id: "toy-00000".into(),
            frames: vec![
                Frame { subtitle: vec![3, 4], objects: vec![2, 5], densecap: vec![6, 7] },
                Frame { subtitle: vec![8, 9], objects: vec![1, 3], densecap: vec![10, 11] },
            ],
            question: vec![12, 13],
            answers: vec![vec![14], vec![15], vec![16], vec![17], vec![18]],
            gt_answer: 1,
            gt_span: (0.0, 1.0),
            evidence_stream: Stream::Subtitle,
        };
        crate::model::ModelLossTarget {
            cfg,
            episodes: vec![ep],
            flags: crate::losses::LossFlags::default(),
        }
    }

    /// Run every named check at the given precision. Returns (name, report).
    pub fn run_all(epsilon: f64, precision: Precision) -> Result<Vec<(String, GradCheckReport)>> {
        let prims = [
            ("matmul", Prim::Matmul),
            ("matmul_nt", Prim::MatmulNt),
            ("add", Prim::Add),
            ("mul", Prim::Mul),
            ("add_bias", Prim::AddBias),
            ("scale_rows", Prim::ScaleRows),
            ("relu", Prim::Relu),
            ("sigmoid", Prim::Sigmoid),
            ("ln", Prim::Ln),
            ("affine", Prim::Affine),
            ("clamp", Prim::Clamp),
            ("softmax_rows", Prim::SoftmaxRows),
            ("softmax_rows_masked", Prim::SoftmaxRowsMasked),
            ("layer_norm", Prim::LayerNorm),
            ("rms_norm_rows", Prim::RmsNormRows),
            ("conv1d_same", Prim::Conv1dSame),
            ("maxpool_axis0", Prim::MaxpoolAxis0),
            ("sum_axis0", Prim::SumAxis0),
            ("slice_rows", Prim::SliceRows),
            ("gather_rows", Prim::GatherRows),
            ("transpose", Prim::Transpose),
            ("mean_all", Prim::MeanAll),
            ("concat_rows", Prim::ConcatRows),
            ("concat_cols", Prim::ConcatCols),
            ("embedding", Prim::Embedding),
            ("dropout_mask", Prim::DropoutMask),
        ];
        let mut out = Vec::new();
        for (name, kind) in prims {
            let specs = prim_specs(&kind);
            let report = grad_check(&PrimCheck(kind), &specs, epsilon, precision)?;
            out.push((name.to_string(), report));
        }
        let target = toy_model_target();
        // Seed chosen so no max-pool argmax sits within epsilon of a tie;
        // ties make central differences step across the kink.
        let specs = crate::model::model_param_specs(&target.cfg, std::env::var("GC_SEED").ok().and_then(|v| v.parse().ok()).unwrap_or(1))?;
        let report = grad_check(&target, &specs, epsilon, precision)?;
        out.push(("model_loss".to_string(), report));
        Ok(out)
    }
}
