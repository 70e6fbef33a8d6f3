//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Tensors are rank-1/2/3 row-major arrays of `f32` or `f64` joined into an
//! acyclic computation graph. Calling [`Tensor::backward`] on a scalar output
//! walks the graph once in reverse topological order and accumulates (`+=`)
//! gradients into every node that requires them, so shared subgraphs receive
//! summed gradients.

mod ops;

pub use ops::{concat_cols, concat_rows, embedding};

use std::cell::RefCell;
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

/// Float type the engine is generic over. Training uses `f32`; gradient
/// checking additionally instantiates everything at `f64`.
pub trait Scalar: num_traits::Float + fmt::Debug + fmt::Display + 'static {
    fn from_f64(v: f64) -> Self {
        num_traits::cast(v).expect("finite f64 fits any Scalar")
    }
    fn to_f64_val(self) -> f64 {
        num_traits::cast(self).expect("Scalar widens to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("softmax row {row} is fully masked")]
    FullyMaskedRow { row: usize },
    #[error("max-pool has no valid positions")]
    EmptyPool,
    #[error("conv1d kernel width {0} must be odd")]
    EvenKernel(usize),
    #[error("index {index} out of range {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Boolean validity mask; `true` marks a valid position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub shape: Vec<usize>,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(shape: Vec<usize>, data: Vec<bool>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "mask shape {:?} needs {} entries, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Mask { shape, data })
    }

    pub fn all_valid(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Mask { shape, data: vec![true; n] }
    }
}

pub(crate) enum Op<F: Scalar> {
    MatMul(Tensor<F>, Tensor<F>),
    /// a [m,k] · b[n,k]ᵀ -> [m,n]
    MatMulNT(Tensor<F>, Tensor<F>),
    Add(Tensor<F>, Tensor<F>),
    Mul(Tensor<F>, Tensor<F>),
    /// [m,n] + bias[n] broadcast over rows
    AddBias(Tensor<F>, Tensor<F>),
    /// [m,n] scaled row-wise by s[m,1]
    ScaleRows(Tensor<F>, Tensor<F>),
    Relu(Tensor<F>),
    Sigmoid(Tensor<F>),
    Ln(Tensor<F>),
    /// a*x + b elementwise with constant a, b
    Affine(Tensor<F>, F, F),
    Clamp(Tensor<F>, F, F),
    SoftmaxRows(Tensor<F>),
    LayerNorm { x: Tensor<F>, gamma: Tensor<F>, beta: Tensor<F>, eps: F },
    RmsNormRows { x: Tensor<F>, eps: F },
    Conv1dSame { x: Tensor<F>, kernel: Tensor<F>, bias: Tensor<F> },
    MaxPoolAxis0 { x: Tensor<F>, argmax: Vec<usize> },
    SumAxis0(Tensor<F>),
    ConcatRows(Vec<Tensor<F>>),
    ConcatCols(Vec<Tensor<F>>),
    SliceRows(Tensor<F>, usize, usize),
    GatherRows(Tensor<F>, Vec<usize>),
    Transpose(Tensor<F>),
    SumAll(Tensor<F>),
    MeanAll(Tensor<F>),
    Embedding { table: Tensor<F>, ids: Vec<usize> },
    Dropout { x: Tensor<F>, keep: Vec<bool>, scale: F },
}

pub(crate) struct Inner<F: Scalar> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
    pub grad: Option<Vec<F>>,
    pub requires_grad: bool,
    pub op: Option<Op<F>>,
}

/// Shared handle to a tensor node. Cloning is cheap and aliases the same node.
pub struct Tensor<F: Scalar> {
    pub(crate) inner: Rc<RefCell<Inner<F>>>,
}

impl<F: Scalar> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl<F: Scalar> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.inner.borrow();
        write!(f, "Tensor(shape={:?}, requires_grad={})", b.shape, b.requires_grad)
    }
}

impl<F: Scalar> Tensor<F> {
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<F>, op: Op<F>) -> Self {
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape,
                data,
                grad: None,
                requires_grad: true,
                op: Some(op),
            })),
        }
    }

    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            inner: Rc::new(RefCell::new(Inner { shape, data, grad: None, requires_grad: false, op: None })),
        })
    }

    /// Leaf tensor that participates in gradient accumulation.
    pub fn param(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        t.inner.borrow_mut().requires_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape,
                data: vec![F::zero(); n],
                grad: None,
                requires_grad: false,
                op: None,
            })),
        }
    }

    pub fn scalar(v: F) -> Self {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> Vec<F> {
        self.inner.borrow().data.clone()
    }

    pub fn item(&self) -> F {
        let b = self.inner.borrow();
        assert_eq!(b.data.len(), 1, "item() needs a single-element tensor");
        b.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn grad(&self) -> Option<Vec<F>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Overwrite the stored gradient (testing and optimizer experiments).
    pub fn set_grad(&self, grad: Vec<F>) -> Result<()> {
        let mut b = self.inner.borrow_mut();
        if grad.len() != b.data.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "gradient length {} vs tensor length {}",
                grad.len(),
                b.data.len()
            )));
        }
        b.grad = Some(grad);
        Ok(())
    }

    /// Overwrite the stored values in place. The graph, if any, is detached.
    pub fn set_values(&self, data: Vec<F>) -> Result<()> {
        let mut b = self.inner.borrow_mut();
        if data.len() != b.data.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "set_values: expected {} values, got {}",
                b.data.len(),
                data.len()
            )));
        }
        b.data = data;
        b.op = None;
        Ok(())
    }

    pub(crate) fn rows_cols(&self) -> (usize, usize) {
        let b = self.inner.borrow();
        match b.shape.len() {
            1 => (1, b.shape[0]),
            2 => (b.shape[0], b.shape[1]),
            _ => panic!("rows_cols on rank-{} tensor", b.shape.len()),
        }
    }

    fn accumulate(&self, delta: &[F]) {
        let mut b = self.inner.borrow_mut();
        let n = b.data.len();
        let g = b.grad.get_or_insert_with(|| vec![F::zero(); n]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi = *gi + *di;
        }
    }

    /// Reverse-mode sweep from a scalar output. Visits each graph node exactly
    /// once; gradients accumulate into every tensor with `requires_grad`.
    pub fn backward(&self) -> Result<()> {
        {
            let b = self.inner.borrow();
            if b.data.len() != 1 {
                return Err(TensorError::Invalid(format!(
                    "backward needs a scalar output, got shape {:?}",
                    b.shape
                )));
            }
            if !b.data[0].is_finite() {
                return Err(TensorError::NonFinite("backward seed"));
            }
        }
        let order = self.topo_order();
        self.accumulate(&[F::one()]);
        for node in order.iter().rev() {
            node.step_backward();
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Tensor<F>> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Inner<F>> = HashSet::new();
        // Iterative DFS; the graph can be deep for long training expressions.
        enum Visit<F: Scalar> {
            Enter(Tensor<F>),
            Exit(Tensor<F>),
        }
        let mut stack = vec![Visit::Enter(self.clone())];
        while let Some(v) = stack.pop() {
            match v {
                Visit::Enter(t) => {
                    let ptr = Rc::as_ptr(&t.inner) as *const Inner<F>;
                    if !seen.insert(ptr) {
                        continue;
                    }
                    let children = t.children();
                    stack.push(Visit::Exit(t));
                    for c in children {
                        stack.push(Visit::Enter(c));
                    }
                }
                Visit::Exit(t) => order.push(t),
            }
        }
        order
    }

    fn children(&self) -> Vec<Tensor<F>> {
        let b = self.inner.borrow();
        match &b.op {
            None => vec![],
            Some(op) => match op {
                Op::MatMul(a, c) | Op::MatMulNT(a, c) | Op::Add(a, c) | Op::Mul(a, c) => {
                    vec![a.clone(), c.clone()]
                }
                Op::AddBias(a, c) | Op::ScaleRows(a, c) => vec![a.clone(), c.clone()],
                Op::Relu(a)
                | Op::Sigmoid(a)
                | Op::Ln(a)
                | Op::Affine(a, _, _)
                | Op::Clamp(a, _, _)
                | Op::SoftmaxRows(a)
                | Op::SumAxis0(a)
                | Op::SliceRows(a, _, _)
                | Op::GatherRows(a, _)
                | Op::Transpose(a)
                | Op::SumAll(a)
                | Op::MeanAll(a) => vec![a.clone()],
                Op::MaxPoolAxis0 { x, .. } => vec![x.clone()],
                Op::LayerNorm { x, gamma, beta, .. } => vec![x.clone(), gamma.clone(), beta.clone()],
                Op::RmsNormRows { x, .. } => vec![x.clone()],
                Op::Conv1dSame { x, kernel, bias } => vec![x.clone(), kernel.clone(), bias.clone()],
                Op::ConcatRows(ts) | Op::ConcatCols(ts) => ts.clone(),
                Op::Embedding { table, .. } => vec![table.clone()],
                Op::Dropout { x, .. } => vec![x.clone()],
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn p(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::param(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_uniform_row() {
        let out = t(&[1, 3], &[0.0, 0.0, 0.0]).softmax_rows(None).unwrap();
        for v in out.values() {
            assert_relative_eq!(v, 1.0 / 3.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn softmax_log_ratio_row() {
        let out = t(&[1, 3], &[0.0, 2f64.ln(), 3f64.ln()]).softmax_rows(None).unwrap();
        let v = out.values();
        assert_relative_eq!(v[0], 1.0 / 6.0, epsilon = 1e-4);
        assert_relative_eq!(v[1], 2.0 / 6.0, epsilon = 1e-4);
        assert_relative_eq!(v[2], 3.0 / 6.0, epsilon = 1e-4);
    }

    #[test]
    fn softmax_masked_middle() {
        let mask = Mask::new(vec![1, 3], vec![true, false, true]).unwrap();
        let out = t(&[1, 3], &[5.0, 9.0, 5.0]).softmax_rows(Some(&mask)).unwrap();
        assert_eq!(out.values(), vec![0.5, 0.0, 0.5]);
    }

    #[test]
    fn softmax_fully_masked_row_is_an_error() {
        let mask = Mask::new(vec![1, 2], vec![false, false]).unwrap();
        let err = t(&[1, 2], &[1.0, 2.0]).softmax_rows(Some(&mask)).unwrap_err();
        assert!(matches!(err, TensorError::FullyMaskedRow { row: 0 }));
    }

    #[test]
    fn softmax_rows_sum_to_one_with_extreme_logits() {
        let out = t(&[2, 3], &[1000.0, 999.0, 998.0, -1000.0, -1000.0, -1000.0])
            .softmax_rows(None)
            .unwrap();
        let v = out.values();
        for r in 0..2 {
            let s: f64 = v[3 * r..3 * r + 3].iter().sum();
            assert_relative_eq!(s, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_row_maps_to_zero() {
        let gamma = t(&[1, 3], &[1.0, 1.0, 1.0]);
        let beta = t(&[1, 3], &[0.0, 0.0, 0.0]);
        let out = t(&[1, 3], &[4.0, 4.0, 4.0]).layer_norm(&gamma, &beta, 1e-5).unwrap();
        for v in out.values() {
            assert!(v.abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn layer_norm_two_point_row() {
        // mean 2, population std 1
        let gamma = t(&[1, 2], &[1.0, 1.0]);
        let beta = t(&[1, 2], &[0.0, 0.0]);
        let out = t(&[1, 2], &[1.0, 3.0]).layer_norm(&gamma, &beta, 1e-12).unwrap();
        let v = out.values();
        assert_relative_eq!(v[0], -1.0, epsilon = 1e-5);
        assert_relative_eq!(v[1], 1.0, epsilon = 1e-5);
    }

    #[test]
    fn layer_norm_beta_shifts() {
        let gamma = t(&[1, 2], &[1.0, 1.0]);
        let beta = t(&[1, 2], &[2.0, 2.0]);
        let out = t(&[1, 2], &[1.0, 3.0]).layer_norm(&gamma, &beta, 1e-12).unwrap();
        let v = out.values();
        assert_relative_eq!(v[0], 1.0, epsilon = 1e-5);
        assert_relative_eq!(v[1], 3.0, epsilon = 1e-5);
    }

    #[test]
    fn conv_identity_kernels() {
        let x = t(&[4, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        // k=1 identity
        let k1 = t(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[1, 2], &[0.0, 0.0]);
        assert_eq!(x.conv1d_same(&k1, &b).unwrap().values(), x.values());
        // k=3, zero except identity at the center tap
        let mut k3v = vec![0.0; 3 * 2 * 2];
        k3v[1 * 4 + 0] = 1.0; // center tap, in 0 -> out 0
        k3v[1 * 4 + 3] = 1.0; // center tap, in 1 -> out 1
        let k3 = t(&[3, 2, 2], &k3v);
        assert_eq!(x.conv1d_same(&k3, &b).unwrap().values(), x.values());
    }

    #[test]
    fn conv_all_ones_kernel_with_zero_padding() {
        let x = t(&[3, 1], &[1.0, 2.0, 3.0]);
        let k = t(&[3, 1, 1], &[1.0, 1.0, 1.0]);
        let b = t(&[1, 1], &[0.0]);
        assert_eq!(x.conv1d_same(&k, &b).unwrap().values(), vec![3.0, 6.0, 5.0]);
    }

    #[test]
    fn conv_rejects_even_kernels() {
        let x = t(&[3, 1], &[1.0, 2.0, 3.0]);
        let k = t(&[2, 1, 1], &[1.0, 1.0]);
        let b = t(&[1, 1], &[0.0]);
        assert!(matches!(x.conv1d_same(&k, &b).unwrap_err(), TensorError::EvenKernel(2)));
    }

    #[test]
    fn maxpool_column_maxima() {
        let x = t(&[2, 2], &[1.0, 4.0, 3.0, 2.0]);
        assert_eq!(x.maxpool_axis0(None).unwrap().values(), vec![3.0, 4.0]);
    }

    #[test]
    fn maxpool_single_row_is_identity() {
        let x = t(&[1, 3], &[7.0, -1.0, 2.0]);
        assert_eq!(x.maxpool_axis0(None).unwrap().values(), vec![7.0, -1.0, 2.0]);
    }

    #[test]
    fn maxpool_masked_row_excluded() {
        let x = t(&[2, 2], &[1.0, 4.0, 9.0, 9.0]);
        let mask = Mask::new(vec![2], vec![true, false]).unwrap();
        assert_eq!(x.maxpool_axis0(Some(&mask)).unwrap().values(), vec![1.0, 4.0]);
    }

    #[test]
    fn maxpool_all_masked_is_an_error() {
        let x = t(&[2, 2], &[1.0, 4.0, 9.0, 9.0]);
        let mask = Mask::new(vec![2], vec![false, false]).unwrap();
        assert!(matches!(x.maxpool_axis0(Some(&mask)).unwrap_err(), TensorError::EmptyPool));
    }

    #[test]
    fn maxpool_tie_routes_gradient_to_lowest_index() {
        let x = p(&[2, 1], &[5.0, 5.0]);
        let out = x.maxpool_axis0(None).unwrap();
        out.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let x = p(&[1, 1], &[0.0]);
        x.sigmoid().sum_all().backward().unwrap();
        assert_relative_eq!(x.grad().unwrap()[0], 0.25, epsilon = 1e-12);
    }

    #[test]
    fn linear_gradient_is_exact() {
        let x = p(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        x.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn shared_subgraph_gradients_accumulate() {
        // y = x*x + x: dy/dx = 2x + 1
        let x = p(&[1, 1], &[3.0]);
        let y = x.mul(&x).unwrap().add(&x).unwrap();
        y.sum_all().backward().unwrap();
        assert_relative_eq!(x.grad().unwrap()[0], 7.0, epsilon = 1e-12);
    }

    #[test]
    fn backward_requires_scalar_output() {
        let x = p(&[2, 1], &[1.0, 2.0]);
        assert!(x.backward().is_err());
    }

    #[test]
    fn backward_rejects_non_finite_seed() {
        let x = p(&[1, 1], &[1.0]);
        let y = x.ln().affine(f64::INFINITY, 0.0);
        assert!(matches!(y.sum_all().backward().unwrap_err(), TensorError::NonFinite(_)));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 3], &[0.0; 6]);
        assert!(matches!(a.matmul(&b).unwrap_err(), TensorError::ShapeMismatch(_)));
    }

    #[test]
    fn embedding_repeated_ids_accumulate_gradient() {
        let table = p(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let out = embedding(&table, &[1, 1, 0]).unwrap();
        assert_eq!(out.values(), vec![3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        out.sum_all().backward().unwrap();
        assert_eq!(table.grad().unwrap(), vec![1.0, 1.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn embedding_out_of_range_id() {
        let table = t(&[3, 2], &[0.0; 6]);
        assert!(matches!(
            embedding(&table, &[3]).unwrap_err(),
            TensorError::IndexOutOfRange { index: 3, len: 3 }
        ));
    }

    #[test]
    fn dropout_mask_zeroes_and_rescales() {
        let x = t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]);
        let out = x.dropout_with_mask(vec![true, false, true, false], 0.5).unwrap();
        assert_eq!(out.values(), vec![2.0, 0.0, 6.0, 0.0]);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let a = t(&[1, 2], &[1.0, 2.0]);
        let b = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        let cat = concat_rows(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(cat.shape(), vec![3, 2]);
        assert_eq!(cat.slice_rows(0, 1).unwrap().values(), a.values());
        assert_eq!(cat.slice_rows(1, 3).unwrap().values(), b.values());
    }

    #[test]
    fn transpose_round_trip() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(a.transpose().transpose().values(), a.values());
        assert_eq!(a.transpose().shape(), vec![3, 2]);
    }

    #[test]
    fn scale_rows_scales_each_row() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let s = t(&[2, 1], &[2.0, 0.5]);
        assert_eq!(a.scale_rows(&s).unwrap().values(), vec![2.0, 4.0, 1.5, 2.0]);
    }
}
