//! Forward constructors and backward rules for every primitive.

use super::{Mask, Op, Result, Scalar, Tensor, TensorError};

// Slice matmul kernels shared by forward and backward passes.
// All operands are row-major.

/// c[m,n] += a[m,k] · b[k,n]
fn mm_nn<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (l, &ail) in arow.iter().enumerate() {
            if ail == F::zero() {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + ail * bv;
            }
        }
    }
}

/// c[m,n] += a[m,k] · b[n,k]ᵀ
fn mm_nt<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc = acc + av * bv;
            }
            c[i * n + j] = c[i * n + j] + acc;
        }
    }
}

/// c[k,n] += a[m,k]ᵀ · b[m,n]
fn mm_tn<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (l, &ail) in arow.iter().enumerate() {
            if ail == F::zero() {
                continue;
            }
            let crow = &mut c[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + ail * bv;
            }
        }
    }
}

impl<F: Scalar> Tensor<F> {
    pub fn matmul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        let (m, k) = self.rows_cols();
        let (k2, n) = other.rows_cols();
        if k != k2 {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul: {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = vec![F::zero(); m * n];
        {
            let a = self.inner.borrow();
            let b = other.inner.borrow();
            mm_nn(&a.data, &b.data, &mut out, m, k, n);
        }
        Ok(Tensor::from_op(vec![m, n], out, Op::MatMul(self.clone(), other.clone())))
    }

    /// self [m,k] · otherᵀ, other given as [n,k]. Used for similarity matrices.
    pub fn matmul_nt(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        let (m, k) = self.rows_cols();
        let (n, k2) = other.rows_cols();
        if k != k2 {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul_nt: {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = vec![F::zero(); m * n];
        {
            let a = self.inner.borrow();
            let b = other.inner.borrow();
            mm_nt(&a.data, &b.data, &mut out, m, k, n);
        }
        Ok(Tensor::from_op(vec![m, n], out, Op::MatMulNT(self.clone(), other.clone())))
    }

    pub fn add(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let out = {
            let a = self.inner.borrow();
            let b = other.inner.borrow();
            a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect()
        };
        Ok(Tensor::from_op(self.shape(), out, Op::Add(self.clone(), other.clone())))
    }

    pub fn mul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch(format!(
                "mul: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let out = {
            let a = self.inner.borrow();
            let b = other.inner.borrow();
            a.data.iter().zip(&b.data).map(|(&x, &y)| x * y).collect()
        };
        Ok(Tensor::from_op(self.shape(), out, Op::Mul(self.clone(), other.clone())))
    }

    /// Broadcast a length-n bias over the rows of an [m,n] matrix.
    pub fn add_bias(&self, bias: &Tensor<F>) -> Result<Tensor<F>> {
        let (m, n) = self.rows_cols();
        if bias.len() != n {
            return Err(TensorError::ShapeMismatch(format!(
                "add_bias: {:?} + bias len {}",
                self.shape(),
                bias.len()
            )));
        }
        let out = {
            let a = self.inner.borrow();
            let b = bias.inner.borrow();
            let mut out = Vec::with_capacity(m * n);
            for i in 0..m {
                for j in 0..n {
                    out.push(a.data[i * n + j] + b.data[j]);
                }
            }
            out
        };
        Ok(Tensor::from_op(vec![m, n], out, Op::AddBias(self.clone(), bias.clone())))
    }

    /// Multiply each row i of an [m,n] matrix by s[i], s of shape [m,1] (or [m]).
    pub fn scale_rows(&self, s: &Tensor<F>) -> Result<Tensor<F>> {
        let (m, n) = self.rows_cols();
        if s.len() != m {
            return Err(TensorError::ShapeMismatch(format!(
                "scale_rows: {:?} by {:?}",
                self.shape(),
                s.shape()
            )));
        }
        let out = {
            let a = self.inner.borrow();
            let sv = s.inner.borrow();
            let mut out = Vec::with_capacity(m * n);
            for i in 0..m {
                for j in 0..n {
                    out.push(a.data[i * n + j] * sv.data[i]);
                }
            }
            out
        };
        Ok(Tensor::from_op(vec![m, n], out, Op::ScaleRows(self.clone(), s.clone())))
    }

    pub fn relu(&self) -> Tensor<F> {
        let out = self
            .inner
            .borrow()
            .data
            .iter()
            .map(|&x| if x > F::zero() { x } else { F::zero() })
            .collect();
        Tensor::from_op(self.shape(), out, Op::Relu(self.clone()))
    }

    pub fn sigmoid(&self) -> Tensor<F> {
        let out = self
            .inner
            .borrow()
            .data
            .iter()
            .map(|&x| {
                // split on sign for numeric stability
                if x >= F::zero() {
                    F::one() / (F::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (F::one() + e)
                }
            })
            .collect();
        Tensor::from_op(self.shape(), out, Op::Sigmoid(self.clone()))
    }

    pub fn ln(&self) -> Tensor<F> {
        let out = self.inner.borrow().data.iter().map(|&x| x.ln()).collect();
        Tensor::from_op(self.shape(), out, Op::Ln(self.clone()))
    }

    /// Elementwise a*x + b with constants.
    pub fn affine(&self, a: f64, b: f64) -> Tensor<F> {
        let (af, bf) = (F::from_f64(a), F::from_f64(b));
        let out = self.inner.borrow().data.iter().map(|&x| af * x + bf).collect();
        Tensor::from_op(self.shape(), out, Op::Affine(self.clone(), af, bf))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor<F> {
        let (l, h) = (F::from_f64(lo), F::from_f64(hi));
        let out = self
            .inner
            .borrow()
            .data
            .iter()
            .map(|&x| if x < l { l } else if x > h { h } else { x })
            .collect();
        Tensor::from_op(self.shape(), out, Op::Clamp(self.clone(), l, h))
    }

    /// Row-wise softmax with an optional validity mask over columns. Masked
    /// positions are exactly zero in the output; a fully-masked row is an error
    /// naming the row.
    pub fn softmax_rows(&self, mask: Option<&Mask>) -> Result<Tensor<F>> {
        let (m, n) = self.rows_cols();
        if let Some(msk) = mask {
            if msk.data.len() != m * n {
                return Err(TensorError::ShapeMismatch(format!(
                    "softmax mask {:?} vs logits {:?}",
                    msk.shape,
                    self.shape()
                )));
            }
        }
        let valid = |i: usize, j: usize| mask.map_or(true, |msk| msk.data[i * n + j]);
        let mut out = vec![F::zero(); m * n];
        {
            let a = self.inner.borrow();
            for i in 0..m {
                let mut mx = F::neg_infinity();
                for j in 0..n {
                    if valid(i, j) && a.data[i * n + j] > mx {
                        mx = a.data[i * n + j];
                    }
                }
                if mx == F::neg_infinity() {
                    return Err(TensorError::FullyMaskedRow { row: i });
                }
                let mut denom = F::zero();
                for j in 0..n {
                    if valid(i, j) {
                        let e = (a.data[i * n + j] - mx).exp();
                        out[i * n + j] = e;
                        denom = denom + e;
                    }
                }
                for j in 0..n {
                    out[i * n + j] = out[i * n + j] / denom;
                }
            }
        }
        Ok(Tensor::from_op(vec![m, n], out, Op::SoftmaxRows(self.clone())))
    }

    /// Per-row layer normalization over the last axis (population variance).
    pub fn layer_norm(&self, gamma: &Tensor<F>, beta: &Tensor<F>, eps: f64) -> Result<Tensor<F>> {
        let (m, n) = self.rows_cols();
        if gamma.len() != n || beta.len() != n {
            return Err(TensorError::ShapeMismatch(format!(
                "layer_norm: x {:?}, gamma {:?}, beta {:?}",
                self.shape(),
                gamma.shape(),
                beta.shape()
            )));
        }
        let epsf = F::from_f64(eps);
        let mut out = vec![F::zero(); m * n];
        {
            let x = self.inner.borrow();
            let g = gamma.inner.borrow();
            let b = beta.inner.borrow();
            let nf = F::from_f64(n as f64);
            for i in 0..m {
                let row = &x.data[i * n..(i + 1) * n];
                let mean = row.iter().fold(F::zero(), |s, &v| s + v) / nf;
                let var = row.iter().fold(F::zero(), |s, &v| s + (v - mean) * (v - mean)) / nf;
                let inv = F::one() / (var + epsf).sqrt();
                for j in 0..n {
                    out[i * n + j] = g.data[j] * (row[j] - mean) * inv + b.data[j];
                }
            }
        }
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            Op::LayerNorm { x: self.clone(), gamma: gamma.clone(), beta: beta.clone(), eps: epsf },
        ))
    }

    /// Row-wise RMS normalization: each row is divided by
    /// sqrt(mean(row^2) + eps). Unlike layer_norm this keeps the row mean, so
    /// a uniform shift of a row survives as a direction instead of being
    /// subtracted away; it only fixes the row scale.
    pub fn rms_norm_rows(&self, eps: f64) -> Result<Tensor<F>> {
        let (m, n) = self.rows_cols();
        let epsf = F::from_f64(eps);
        let nf = F::from_f64(n as f64);
        let mut out = vec![F::zero(); m * n];
        {
            let x = self.inner.borrow();
            for i in 0..m {
                let row = &x.data[i * n..(i + 1) * n];
                let ms = row.iter().fold(F::zero(), |s, &v| s + v * v) / nf;
                let inv = F::one() / (ms + epsf).sqrt();
                for j in 0..n {
                    out[i * n + j] = row[j] * inv;
                }
            }
        }
        Ok(Tensor::from_op(vec![m, n], out, Op::RmsNormRows { x: self.clone(), eps: epsf }))
    }

    /// "Same" 1-D convolution over the sequence axis. x is [T, d_in], kernel
    /// [k, d_in, d_out] with odd k, bias [d_out]; zero padding (k-1)/2.
    pub fn conv1d_same(&self, kernel: &Tensor<F>, bias: &Tensor<F>) -> Result<Tensor<F>> {
        let (t, d_in) = self.rows_cols();
        let kshape = kernel.shape();
        if kshape.len() != 3 {
            return Err(TensorError::ShapeMismatch(format!("conv1d kernel must be rank 3, got {:?}", kshape)));
        }
        let (k, kd_in, d_out) = (kshape[0], kshape[1], kshape[2]);
        if k % 2 == 0 {
            return Err(TensorError::EvenKernel(k));
        }
        if kd_in != d_in || bias.len() != d_out {
            return Err(TensorError::ShapeMismatch(format!(
                "conv1d: x {:?}, kernel {:?}, bias {:?}",
                self.shape(),
                kshape,
                bias.shape()
            )));
        }
        let pad = (k - 1) / 2;
        let mut out = vec![F::zero(); t * d_out];
        {
            let x = self.inner.borrow();
            let w = kernel.inner.borrow();
            let b = bias.inner.borrow();
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(&b.data);
            }
            for ti in 0..t {
                for j in 0..k {
                    let src = ti + j;
                    if src < pad || src - pad >= t {
                        continue;
                    }
                    let xrow = &x.data[(src - pad) * d_in..(src - pad + 1) * d_in];
                    let orow = &mut out[ti * d_out..(ti + 1) * d_out];
                    for (i, &xv) in xrow.iter().enumerate() {
                        if xv == F::zero() {
                            continue;
                        }
                        let wrow = &w.data[(j * d_in + i) * d_out..(j * d_in + i + 1) * d_out];
                        for (ov, &wv) in orow.iter_mut().zip(wrow) {
                            *ov = *ov + xv * wv;
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            vec![t, d_out],
            out,
            Op::Conv1dSame { x: self.clone(), kernel: kernel.clone(), bias: bias.clone() },
        ))
    }

    /// Column-wise maximum over rows, masked rows excluded. Gradient routes to
    /// the argmax row per column, ties broken to the lowest index.
    pub fn maxpool_axis0(&self, mask: Option<&Mask>) -> Result<Tensor<F>> {
        let (m, n) = self.rows_cols();
        if let Some(msk) = mask {
            if msk.data.len() != m {
                return Err(TensorError::ShapeMismatch(format!(
                    "maxpool mask len {} vs {} rows",
                    msk.data.len(),
                    m
                )));
            }
        }
        let valid = |i: usize| mask.map_or(true, |msk| msk.data[i]);
        if !(0..m).any(valid) {
            return Err(TensorError::EmptyPool);
        }
        let mut out = vec![F::neg_infinity(); n];
        let mut argmax = vec![usize::MAX; n];
        {
            let x = self.inner.borrow();
            for i in 0..m {
                if !valid(i) {
                    continue;
                }
                for j in 0..n {
                    let v = x.data[i * n + j];
                    if argmax[j] == usize::MAX || v > out[j] {
                        out[j] = v;
                        argmax[j] = i;
                    }
                }
            }
        }
        Ok(Tensor::from_op(vec![1, n], out, Op::MaxPoolAxis0 { x: self.clone(), argmax }))
    }

    /// Maximum over the chosen axis (0 pools rows, 1 pools columns).
    pub fn maxpool_over_axis(&self, axis: usize, mask: Option<&Mask>) -> Result<Tensor<F>> {
        match axis {
            0 => self.maxpool_axis0(mask),
            1 => self.transpose().maxpool_axis0(mask),
            _ => Err(TensorError::Invalid(format!("maxpool axis {} out of range", axis))),
        }
    }

    /// Column sums: [m,n] -> [1,n].
    pub fn sum_axis0(&self) -> Tensor<F> {
        let (m, n) = self.rows_cols();
        let mut out = vec![F::zero(); n];
        {
            let x = self.inner.borrow();
            for i in 0..m {
                for j in 0..n {
                    out[j] = out[j] + x.data[i * n + j];
                }
            }
        }
        Tensor::from_op(vec![1, n], out, Op::SumAxis0(self.clone()))
    }

    /// Rows [start, end) of a matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor<F>> {
        let (m, n) = self.rows_cols();
        if start > end || end > m {
            return Err(TensorError::Invalid(format!("slice_rows {}..{} of {} rows", start, end, m)));
        }
        let out = {
            let x = self.inner.borrow();
            x.data[start * n..end * n].to_vec()
        };
        Ok(Tensor::from_op(vec![end - start, n], out, Op::SliceRows(self.clone(), start, end)))
    }

    /// Selected rows, in the given order (repeats allowed).
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor<F>> {
        let (m, n) = self.rows_cols();
        let mut out = Vec::with_capacity(ids.len() * n);
        {
            let x = self.inner.borrow();
            for &r in ids {
                if r >= m {
                    return Err(TensorError::IndexOutOfRange { index: r, len: m });
                }
                out.extend_from_slice(&x.data[r * n..(r + 1) * n]);
            }
        }
        Ok(Tensor::from_op(vec![ids.len(), n], out, Op::GatherRows(self.clone(), ids.to_vec())))
    }

    pub fn transpose(&self) -> Tensor<F> {
        let (m, n) = self.rows_cols();
        let mut out = vec![F::zero(); m * n];
        {
            let x = self.inner.borrow();
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = x.data[i * n + j];
                }
            }
        }
        Tensor::from_op(vec![n, m], out, Op::Transpose(self.clone()))
    }

    pub fn sum_all(&self) -> Tensor<F> {
        let s = self.inner.borrow().data.iter().fold(F::zero(), |a, &v| a + v);
        Tensor::from_op(vec![1], vec![s], Op::SumAll(self.clone()))
    }

    pub fn mean_all(&self) -> Tensor<F> {
        let b = self.inner.borrow();
        let nf = F::from_f64(b.data.len() as f64);
        let s = b.data.iter().fold(F::zero(), |a, &v| a + v) / nf;
        drop(b);
        Tensor::from_op(vec![1], vec![s], Op::MeanAll(self.clone()))
    }

    /// Inverted dropout with an explicit keep mask; `keep_prob` is 1 - rate.
    /// Kept entries are scaled by 1/keep_prob so eval mode is the identity.
    pub fn dropout_with_mask(&self, keep: Vec<bool>, keep_prob: f64) -> Result<Tensor<F>> {
        if keep.len() != self.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "dropout mask len {} vs {} values",
                keep.len(),
                self.len()
            )));
        }
        let scale = F::from_f64(1.0 / keep_prob);
        let out = {
            let x = self.inner.borrow();
            x.data
                .iter()
                .zip(&keep)
                .map(|(&v, &k)| if k { v * scale } else { F::zero() })
                .collect()
        };
        Ok(Tensor::from_op(self.shape(), out, Op::Dropout { x: self.clone(), keep, scale }))
    }

    pub fn dropout<R: rand::Rng>(&self, rate: f64, rng: &mut R) -> Result<Tensor<F>> {
        let keep: Vec<bool> = (0..self.len()).map(|_| rng.gen::<f64>() >= rate).collect();
        self.dropout_with_mask(keep, 1.0 - rate)
    }

    pub(crate) fn step_backward(&self) {
        let dy = match self.inner.borrow().grad.clone() {
            Some(g) => g,
            None => return,
        };
        let op_children: Vec<Tensor<F>> = self.children();
        let b = self.inner.borrow();
        let op = match &b.op {
            Some(op) => op,
            None => return,
        };
        // Each arm computes input deltas, then accumulates into children that
        // require gradients.
        let mut deltas: Vec<Vec<F>> = Vec::new();
        match op {
            Op::MatMul(a, bt) => {
                let (m, k) = a.rows_cols();
                let (_, n) = bt.rows_cols();
                let av = a.inner.borrow();
                let bv = bt.inner.borrow();
                let mut da = vec![F::zero(); m * k];
                let mut db = vec![F::zero(); k * n];
                mm_nt(&dy, &bv.data, &mut da, m, n, k);
                mm_tn(&av.data, &dy, &mut db, m, k, n);
                deltas.push(da);
                deltas.push(db);
            }
            Op::MatMulNT(a, bt) => {
                let (m, k) = a.rows_cols();
                let (n, _) = bt.rows_cols();
                let av = a.inner.borrow();
                let bv = bt.inner.borrow();
                let mut da = vec![F::zero(); m * k];
                let mut db = vec![F::zero(); n * k];
                mm_nn(&dy, &bv.data, &mut da, m, n, k);
                mm_tn(&dy, &av.data, &mut db, m, n, k);
                deltas.push(da);
                deltas.push(db);
            }
            Op::Add(_, _) => {
                deltas.push(dy.clone());
                deltas.push(dy.clone());
            }
            Op::Mul(a, c) => {
                let av = a.inner.borrow();
                let cv = c.inner.borrow();
                deltas.push(dy.iter().zip(&cv.data).map(|(&g, &v)| g * v).collect());
                deltas.push(dy.iter().zip(&av.data).map(|(&g, &v)| g * v).collect());
            }
            Op::AddBias(x, bias) => {
                let (m, n) = x.rows_cols();
                let mut db = vec![F::zero(); bias.len()];
                for i in 0..m {
                    for j in 0..n {
                        db[j] = db[j] + dy[i * n + j];
                    }
                }
                deltas.push(dy.clone());
                deltas.push(db);
            }
            Op::ScaleRows(x, s) => {
                let (m, n) = x.rows_cols();
                let xv = x.inner.borrow();
                let sv = s.inner.borrow();
                let mut dx = vec![F::zero(); m * n];
                let mut ds = vec![F::zero(); m];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = dy[i * n + j] * sv.data[i];
                        ds[i] = ds[i] + dy[i * n + j] * xv.data[i * n + j];
                    }
                }
                deltas.push(dx);
                deltas.push(ds);
            }
            Op::Relu(x) => {
                let xv = x.inner.borrow();
                deltas.push(
                    dy.iter()
                        .zip(&xv.data)
                        .map(|(&g, &v)| if v > F::zero() { g } else { F::zero() })
                        .collect(),
                );
            }
            Op::Sigmoid(_) => {
                deltas.push(dy.iter().zip(&b.data).map(|(&g, &y)| g * y * (F::one() - y)).collect());
            }
            Op::Ln(x) => {
                let xv = x.inner.borrow();
                deltas.push(dy.iter().zip(&xv.data).map(|(&g, &v)| g / v).collect());
            }
            Op::Affine(_, a, _) => {
                let a = *a;
                deltas.push(dy.iter().map(|&g| g * a).collect());
            }
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let xv = x.inner.borrow();
                deltas.push(
                    dy.iter()
                        .zip(&xv.data)
                        .map(|(&g, &v)| if v >= lo && v <= hi { g } else { F::zero() })
                        .collect(),
                );
            }
            Op::SoftmaxRows(x) => {
                let (m, n) = x.rows_cols();
                let mut dx = vec![F::zero(); m * n];
                for i in 0..m {
                    let y = &b.data[i * n..(i + 1) * n];
                    let g = &dy[i * n..(i + 1) * n];
                    let dot = y.iter().zip(g).fold(F::zero(), |s, (&yv, &gv)| s + yv * gv);
                    for j in 0..n {
                        dx[i * n + j] = y[j] * (g[j] - dot);
                    }
                }
                deltas.push(dx);
            }
            Op::LayerNorm { x, gamma, eps, .. } => {
                let (m, n) = x.rows_cols();
                let xv = x.inner.borrow();
                let gv = gamma.inner.borrow();
                let nf = F::from_f64(n as f64);
                let mut dx = vec![F::zero(); m * n];
                let mut dgamma = vec![F::zero(); n];
                let mut dbeta = vec![F::zero(); n];
                for i in 0..m {
                    let row = &xv.data[i * n..(i + 1) * n];
                    let g = &dy[i * n..(i + 1) * n];
                    let mean = row.iter().fold(F::zero(), |s, &v| s + v) / nf;
                    let var = row.iter().fold(F::zero(), |s, &v| s + (v - mean) * (v - mean)) / nf;
                    let inv = F::one() / (var + *eps).sqrt();
                    let xhat: Vec<F> = row.iter().map(|&v| (v - mean) * inv).collect();
                    let gg: Vec<F> = g.iter().zip(&gv.data).map(|(&gi, &gam)| gi * gam).collect();
                    let mean_gg = gg.iter().fold(F::zero(), |s, &v| s + v) / nf;
                    let mean_ggx = gg.iter().zip(&xhat).fold(F::zero(), |s, (&a, &h)| s + a * h) / nf;
                    for j in 0..n {
                        dx[i * n + j] = inv * (gg[j] - mean_gg - xhat[j] * mean_ggx);
                        dgamma[j] = dgamma[j] + g[j] * xhat[j];
                        dbeta[j] = dbeta[j] + g[j];
                    }
                }
                deltas.push(dx);
                deltas.push(dgamma);
                deltas.push(dbeta);
            }
            Op::RmsNormRows { x, eps } => {
                let (m, n) = x.rows_cols();
                let xv = x.inner.borrow();
                let nf = F::from_f64(n as f64);
                let mut dx = vec![F::zero(); m * n];
                for i in 0..m {
                    let row = &xv.data[i * n..(i + 1) * n];
                    let g = &dy[i * n..(i + 1) * n];
                    let ms = row.iter().fold(F::zero(), |s, &v| s + v * v) / nf;
                    let inv = F::one() / (ms + *eps).sqrt();
                    // y = x * inv; d inv/d x_k = -inv^3 * x_k / n
                    let gdotx = g.iter().zip(row).fold(F::zero(), |s, (&gi, &xi)| s + gi * xi);
                    let inv3 = inv * inv * inv;
                    for j in 0..n {
                        dx[i * n + j] = g[j] * inv - row[j] * gdotx * inv3 / nf;
                    }
                }
                deltas.push(dx);
            }
            Op::Conv1dSame { x, kernel, bias } => {
                let (t, d_in) = x.rows_cols();
                let kshape = kernel.shape();
                let (k, d_out) = (kshape[0], kshape[2]);
                let pad = (k - 1) / 2;
                let xv = x.inner.borrow();
                let wv = kernel.inner.borrow();
                let mut dx = vec![F::zero(); t * d_in];
                let mut dw = vec![F::zero(); k * d_in * d_out];
                let mut db = vec![F::zero(); bias.len()];
                for ti in 0..t {
                    let g = &dy[ti * d_out..(ti + 1) * d_out];
                    for (bj, &gv) in db.iter_mut().zip(g) {
                        *bj = *bj + gv;
                    }
                    for j in 0..k {
                        let src = ti + j;
                        if src < pad || src - pad >= t {
                            continue;
                        }
                        let s = src - pad;
                        for i in 0..d_in {
                            let wrow = &wv.data[(j * d_in + i) * d_out..(j * d_in + i + 1) * d_out];
                            let mut acc = F::zero();
                            for (gv, &wvv) in g.iter().zip(wrow) {
                                acc = acc + *gv * wvv;
                            }
                            dx[s * d_in + i] = dx[s * d_in + i] + acc;
                            let xvv = xv.data[s * d_in + i];
                            if xvv != F::zero() {
                                let dwrow = &mut dw[(j * d_in + i) * d_out..(j * d_in + i + 1) * d_out];
                                for (dwv, &gv) in dwrow.iter_mut().zip(g) {
                                    *dwv = *dwv + xvv * gv;
                                }
                            }
                        }
                    }
                }
                deltas.push(dx);
                deltas.push(dw);
                deltas.push(db);
            }
            Op::MaxPoolAxis0 { x, argmax } => {
                let (m, n) = x.rows_cols();
                let mut dx = vec![F::zero(); m * n];
                for (j, &r) in argmax.iter().enumerate() {
                    dx[r * n + j] = dx[r * n + j] + dy[j];
                }
                deltas.push(dx);
            }
            Op::SumAxis0(x) => {
                let (m, n) = x.rows_cols();
                let mut dx = vec![F::zero(); m * n];
                for i in 0..m {
                    dx[i * n..(i + 1) * n].copy_from_slice(&dy[..n]);
                }
                deltas.push(dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = p.len();
                    deltas.push(dy[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = self.rows_cols();
                let mut col = 0;
                for p in parts {
                    let (_, pn) = p.rows_cols();
                    let mut dp = vec![F::zero(); m * pn];
                    for i in 0..m {
                        dp[i * pn..(i + 1) * pn].copy_from_slice(&dy[i * n + col..i * n + col + pn]);
                    }
                    deltas.push(dp);
                    col += pn;
                }
            }
            Op::SliceRows(x, start, end) => {
                let (m, n) = x.rows_cols();
                let mut dx = vec![F::zero(); m * n];
                dx[start * n..end * n].copy_from_slice(&dy);
                deltas.push(dx);
            }
            Op::GatherRows(x, ids) => {
                let (m, n) = x.rows_cols();
                let mut dx = vec![F::zero(); m * n];
                for (r, &src) in ids.iter().enumerate() {
                    for j in 0..n {
                        dx[src * n + j] = dx[src * n + j] + dy[r * n + j];
                    }
                }
                deltas.push(dx);
            }
            Op::Transpose(x) => {
                let (m, n) = x.rows_cols();
                let mut dx = vec![F::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = dy[j * m + i];
                    }
                }
                deltas.push(dx);
            }
            Op::SumAll(x) => {
                deltas.push(vec![dy[0]; x.len()]);
            }
            Op::MeanAll(x) => {
                let nf = F::from_f64(x.len() as f64);
                deltas.push(vec![dy[0] / nf; x.len()]);
            }
            Op::Embedding { table, ids } => {
                let (v, n) = table.rows_cols();
                let mut dt = vec![F::zero(); v * n];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..n {
                        dt[id * n + j] = dt[id * n + j] + dy[r * n + j];
                    }
                }
                deltas.push(dt);
            }
            Op::Dropout { keep, scale, .. } => {
                let scale = *scale;
                deltas.push(
                    dy.iter()
                        .zip(keep)
                        .map(|(&g, &k)| if k { g * scale } else { F::zero() })
                        .collect(),
                );
            }
        }
        drop(b);
        for (child, delta) in op_children.iter().zip(deltas) {
            if child.requires_grad() {
                child.accumulate(&delta);
            }
        }
    }
}

/// Look rows of `table` up by id; gradient scatter-adds back into the table.
pub fn embedding<F: Scalar>(table: &Tensor<F>, ids: &[usize]) -> Result<Tensor<F>> {
    let (v, n) = table.rows_cols();
    let mut out = Vec::with_capacity(ids.len() * n);
    {
        let tv = table.inner.borrow();
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange { index: id, len: v });
            }
            out.extend_from_slice(&tv.data[id * n..(id + 1) * n]);
        }
    }
    Ok(Tensor::from_op(
        vec![ids.len(), n],
        out,
        Op::Embedding { table: table.clone(), ids: ids.to_vec() },
    ))
}

/// Stack matrices with equal column counts along the row axis.
pub fn concat_rows<F: Scalar>(parts: &[Tensor<F>]) -> Result<Tensor<F>> {
    if parts.is_empty() {
        return Err(TensorError::Invalid("concat_rows of nothing".into()));
    }
    let (_, n) = parts[0].rows_cols();
    let mut rows = 0;
    let mut out = Vec::new();
    for p in parts {
        let (pm, pn) = p.rows_cols();
        if pn != n {
            return Err(TensorError::ShapeMismatch(format!("concat_rows: {} vs {} cols", n, pn)));
        }
        rows += pm;
        out.extend_from_slice(&p.inner.borrow().data);
    }
    Ok(Tensor::from_op(vec![rows, n], out, Op::ConcatRows(parts.to_vec())))
}

/// Stack matrices with equal row counts along the column axis.
pub fn concat_cols<F: Scalar>(parts: &[Tensor<F>]) -> Result<Tensor<F>> {
    if parts.is_empty() {
        return Err(TensorError::Invalid("concat_cols of nothing".into()));
    }
    let (m, _) = parts[0].rows_cols();
    let mut n = 0;
    for p in parts {
        let (pm, pn) = p.rows_cols();
        if pm != m {
            return Err(TensorError::ShapeMismatch(format!("concat_cols: {} vs {} rows", m, pm)));
        }
        n += pn;
    }
    let mut out = vec![F::zero(); m * n];
    let mut col = 0;
    for p in parts {
        let (_, pn) = p.rows_cols();
        let pv = p.inner.borrow();
        for i in 0..m {
            out[i * n + col..i * n + col + pn].copy_from_slice(&pv.data[i * pn..(i + 1) * pn]);
        }
        col += pn;
    }
    Ok(Tensor::from_op(vec![m, n], out, Op::ConcatCols(parts.to_vec())))
}
