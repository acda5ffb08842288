//! Reverse-mode differentiation over [`DenseArray`] values.
//!
//! A [`Tape`] records every primitive applied during a forward pass and
//! replays them in reverse to produce exact analytic gradients of a scalar
//! with respect to every leaf. Finiteness is enforced after each primitive.

use crate::error::{Result, SamError};
use crate::kernels;
use crate::tensor::{DenseArray, Scalar};

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F> {
    Leaf { requires_grad: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Linear { x: usize, w: usize, b: Option<usize> },
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Relu(usize),
    Tanh(usize),
    SoftmaxRows(usize),
    LayerNormRows { x: usize, inv_std: Vec<F> },
    Conv2d { x: usize, w: usize, b: Option<usize>, stride: usize, pad: usize },
    Upsample2x(usize),
    ConcatCols(usize, usize),
    SliceCols { x: usize, start: usize },
    ConcatRows(usize, usize),
    SliceRows { x: usize, start: usize },
    GatherRows { x: usize, idx: Vec<usize> },
    GatherCols { x: usize, idx: Vec<usize> },
    Reshape { x: usize },
    SumAll(usize),
    LogSumExpRows(usize),
}

struct Node<F> {
    op: Op<F>,
    value: DenseArray<F>,
}

/// Gradient tape. One tape per forward pass.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &DenseArray<F> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> F {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, op: Op<F>, value: DenseArray<F>, name: &str) -> Result<Var> {
        if !value.all_finite() {
            return Err(SamError::NonFinite(name.into()));
        }
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Differentiable input (parameter).
    pub fn leaf(&mut self, value: DenseArray<F>) -> Result<Var> {
        self.push(Op::Leaf { requires_grad: true }, value, "leaf")
    }

    /// Non-differentiable input (data).
    pub fn constant(&mut self, value: DenseArray<F>) -> Result<Var> {
        self.push(Op::Leaf { requires_grad: false }, value, "constant")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(SamError::ShapeMismatch(format!(
                "add {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = DenseArray::new(va.shape().to_vec(), data)?;
        self.push(Op::Add(a.0, b.0), value, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(SamError::ShapeMismatch(format!(
                "sub {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        let value = DenseArray::new(va.shape().to_vec(), data)?;
        self.push(Op::Sub(a.0, b.0), value, "sub")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let fs = F::from_f64(s);
        let value = self.nodes[a.0].value.map(|v| v * fs);
        self.push(Op::Scale(a.0, s), value, "scale")
    }

    /// `[n,c] + [c]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, v: Var) -> Result<Var> {
        let (ma, mv) = (&self.nodes[a.0].value, &self.nodes[v.0].value);
        let c = ma.cols();
        if mv.len() != c {
            return Err(SamError::ShapeMismatch(format!(
                "add_row cols {} vs vec {}",
                c,
                mv.len()
            )));
        }
        let mut data = Vec::with_capacity(ma.len());
        for r in 0..ma.rows() {
            data.extend(ma.row(r).iter().zip(mv.data()).map(|(&x, &y)| x + y));
        }
        let value = DenseArray::new(ma.shape().to_vec(), data)?;
        self.push(Op::AddRow(a.0, v.0), value, "add_row")
    }

    /// `[n,c] * [c]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, v: Var) -> Result<Var> {
        let (ma, mv) = (&self.nodes[a.0].value, &self.nodes[v.0].value);
        let c = ma.cols();
        if mv.len() != c {
            return Err(SamError::ShapeMismatch(format!(
                "mul_row cols {} vs vec {}",
                c,
                mv.len()
            )));
        }
        let mut data = Vec::with_capacity(ma.len());
        for r in 0..ma.rows() {
            data.extend(ma.row(r).iter().zip(mv.data()).map(|(&x, &y)| x * y));
        }
        let value = DenseArray::new(ma.shape().to_vec(), data)?;
        self.push(Op::MulRow(a.0, v.0), value, "mul_row")
    }

    /// `x [n,in] * w^T [out,in] + b -> [n,out]`. Weights use the
    /// `[out,in]` layout throughout the crate.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = kernels::matmul_nt(&self.nodes[x.0].value, &self.nodes[w.0].value)?;
        let y = match b {
            Some(bias) => {
                let bv = &self.nodes[bias.0].value;
                if bv.len() != y.cols() {
                    return Err(SamError::ShapeMismatch(format!(
                        "linear bias {} vs out {}",
                        bv.len(),
                        y.cols()
                    )));
                }
                let mut data = Vec::with_capacity(y.len());
                for r in 0..y.rows() {
                    data.extend(y.row(r).iter().zip(bv.data()).map(|(&a, &c)| a + c));
                }
                DenseArray::new(y.shape().to_vec(), data)?
            }
            None => y,
        };
        self.push(
            Op::Linear { x: x.0, w: w.0, b: b.map(|v| v.0) },
            y,
            "linear",
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::matmul(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        self.push(Op::MatMul(a.0, b.0), y, "matmul")
    }

    /// `a [m,k] * b^T [n,k] -> [m,n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::matmul_nt(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        self.push(Op::MatMulNt(a.0, b.0), y, "matmul_nt")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.map(|v| v.max(F::zero()));
        self.push(Op::Relu(a.0), value, "relu")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.map(|v| v.tanh());
        self.push(Op::Tanh(a.0), value, "tanh")
    }

    /// Row-wise stabilized softmax. Errors on empty rows.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let m = &self.nodes[a.0].value;
        if m.cols() == 0 || m.len() == 0 {
            return Err(SamError::EmptyInput("softmax over empty vector".into()));
        }
        let mut value = m.clone();
        let c = value.cols();
        let rows = value.rows();
        for r in 0..rows {
            kernels::softmax_row_inplace(&mut value.data_mut()[r * c..(r + 1) * c]);
        }
        self.push(Op::SoftmaxRows(a.0), value, "softmax")
    }

    /// Row-wise layer normalization without affine parameters.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let m = &self.nodes[a.0].value;
        if m.cols() < 1 {
            return Err(SamError::EmptyInput("layer_norm over empty vector".into()));
        }
        let (value, inv_std) = kernels::layer_norm_rows(m, F::from_f64(eps));
        self.push(Op::LayerNormRows { x: a.0, inv_std }, value, "layer_norm")
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let y = kernels::conv2d(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            b.map(|v| &self.nodes[v.0].value),
            stride,
            pad,
        )?;
        self.push(
            Op::Conv2d { x: x.0, w: w.0, b: b.map(|v| v.0), stride, pad },
            y,
            "conv2d",
        )
    }

    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let y = kernels::upsample2x(&self.nodes[a.0].value);
        self.push(Op::Upsample2x(a.0), y, "upsample2x")
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, mb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ma.rows() != mb.rows() {
            return Err(SamError::ShapeMismatch(format!(
                "concat_cols rows {} vs {}",
                ma.rows(),
                mb.rows()
            )));
        }
        let (ca, cb) = (ma.cols(), mb.cols());
        let mut data = Vec::with_capacity(ma.len() + mb.len());
        for r in 0..ma.rows() {
            data.extend_from_slice(ma.row(r));
            data.extend_from_slice(mb.row(r));
        }
        let value = DenseArray::new(vec![ma.rows(), ca + cb], data)?;
        self.push(Op::ConcatCols(a.0, b.0), value, "concat_cols")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let m = &self.nodes[a.0].value;
        if start > end || end > m.cols() {
            return Err(SamError::OutOfBounds(format!(
                "slice_cols {}..{} of {}",
                start,
                end,
                m.cols()
            )));
        }
        let mut data = Vec::with_capacity(m.rows() * (end - start));
        for r in 0..m.rows() {
            data.extend_from_slice(&m.row(r)[start..end]);
        }
        let value = DenseArray::new(vec![m.rows(), end - start], data)?;
        self.push(Op::SliceCols { x: a.0, start }, value, "slice_cols")
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, mb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ma.cols() != mb.cols() {
            return Err(SamError::ShapeMismatch(format!(
                "concat_rows cols {} vs {}",
                ma.cols(),
                mb.cols()
            )));
        }
        let mut data = Vec::with_capacity(ma.len() + mb.len());
        data.extend_from_slice(ma.data());
        data.extend_from_slice(mb.data());
        let value = DenseArray::new(vec![ma.rows() + mb.rows(), ma.cols()], data)?;
        self.push(Op::ConcatRows(a.0, b.0), value, "concat_rows")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let m = &self.nodes[a.0].value;
        if start > end || end > m.rows() {
            return Err(SamError::OutOfBounds(format!(
                "slice_rows {}..{} of {}",
                start,
                end,
                m.rows()
            )));
        }
        let c = m.cols();
        let data = m.data()[start * c..end * c].to_vec();
        let value = DenseArray::new(vec![end - start, c], data)?;
        self.push(Op::SliceRows { x: a.0, start }, value, "slice_rows")
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let m = &self.nodes[a.0].value;
        let c = m.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= m.rows() {
                return Err(SamError::OutOfBounds(format!(
                    "gather_rows row {} of {}",
                    i,
                    m.rows()
                )));
            }
            data.extend_from_slice(m.row(i));
        }
        let value = DenseArray::new(vec![idx.len(), c], data)?;
        self.push(Op::GatherRows { x: a.0, idx: idx.to_vec() }, value, "gather_rows")
    }

    /// Per-row column pick: `out[i] = a[i, idx[i]]`, shape `[n,1]`.
    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let m = &self.nodes[a.0].value;
        if idx.len() != m.rows() {
            return Err(SamError::ShapeMismatch(format!(
                "gather_cols {} indices for {} rows",
                idx.len(),
                m.rows()
            )));
        }
        let mut data = Vec::with_capacity(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            if i >= m.cols() {
                return Err(SamError::OutOfBounds(format!(
                    "gather_cols col {} of {}",
                    i,
                    m.cols()
                )));
            }
            data.push(m.at2(r, i));
        }
        let value = DenseArray::new(vec![idx.len(), 1], data)?;
        self.push(Op::GatherCols { x: a.0, idx: idx.to_vec() }, value, "gather_cols")
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.nodes[a.0].value.clone().reshape(shape)?;
        self.push(Op::Reshape { x: a.0 }, value, "reshape")
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.data().iter().cloned().sum::<F>();
        self.push(Op::SumAll(a.0), DenseArray::scalar(s), "sum_all")
    }

    /// Row-wise `log(sum(exp(x)))`, shape `[n,1]`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let m = &self.nodes[a.0].value;
        if m.cols() == 0 || m.len() == 0 {
            return Err(SamError::EmptyInput("logsumexp over empty vector".into()));
        }
        let mut data = Vec::with_capacity(m.rows());
        for r in 0..m.rows() {
            let row = m.row(r);
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let s = row.iter().map(|&v| (v - max).exp()).sum::<F>();
            data.push(max + s.ln());
        }
        let value = DenseArray::new(vec![m.rows(), 1], data)?;
        self.push(Op::LogSumExpRows(a.0), value, "logsumexp")
    }

    /// Backward pass from a scalar node. Returns one gradient slot per node;
    /// leaves created with [`Tape::constant`] stay `None`.
    pub fn backward(&self, loss: Var) -> Result<Vec<Option<DenseArray<F>>>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(SamError::InvalidArgument(
                "backward requires a scalar loss".into(),
            ));
        }
        let mut grads: Vec<Option<DenseArray<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(DenseArray::new(
            self.nodes[loss.0].value.shape().to_vec(),
            vec![F::one()],
        )?);

        for i in (0..self.nodes.len()).rev() {
            let dy = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf { requires_grad } => {
                    if *requires_grad {
                        grads[i] = Some(dy);
                    }
                }
                Op::Add(a, b) => {
                    self.accum(&mut grads, *a, dy.clone())?;
                    self.accum(&mut grads, *b, dy)?;
                }
                Op::Sub(a, b) => {
                    self.accum(&mut grads, *a, dy.clone())?;
                    self.accum(&mut grads, *b, dy.map(|v| -v))?;
                }
                Op::Scale(a, s) => {
                    let fs = F::from_f64(*s);
                    self.accum(&mut grads, *a, dy.map(|v| v * fs))?;
                }
                Op::AddRow(a, v) => {
                    let c = dy.cols();
                    let mut dv = vec![F::zero(); c];
                    for r in 0..dy.rows() {
                        for (acc, &g) in dv.iter_mut().zip(dy.row(r)) {
                            *acc = *acc + g;
                        }
                    }
                    self.accum(&mut grads, *a, dy)?;
                    self.accum(&mut grads, *v, DenseArray::from_vec(dv))?;
                }
                Op::MulRow(a, v) => {
                    let ma = &self.nodes[*a].value;
                    let mv = &self.nodes[*v].value;
                    let c = dy.cols();
                    let mut da = Vec::with_capacity(dy.len());
                    let mut dv = vec![F::zero(); c];
                    for r in 0..dy.rows() {
                        for ((idx, &g), &xa) in dy.row(r).iter().enumerate().zip(ma.row(r)) {
                            da.push(g * mv.data()[idx]);
                            dv[idx] = dv[idx] + g * xa;
                        }
                    }
                    self.accum(&mut grads, *a, DenseArray::new(ma.shape().to_vec(), da)?)?;
                    self.accum(&mut grads, *v, DenseArray::from_vec(dv))?;
                }
                Op::Linear { x, w, b } => {
                    let dx = kernels::matmul(&dy, &self.nodes[*w].value)?;
                    let dw = kernels::matmul_tn(&dy, &self.nodes[*x].value)?;
                    self.accum(&mut grads, *x, dx.reshape(self.nodes[*x].value.shape().to_vec())?)?;
                    self.accum(&mut grads, *w, dw)?;
                    if let Some(bias) = b {
                        let c = dy.cols();
                        let mut db = vec![F::zero(); c];
                        for r in 0..dy.rows() {
                            for (acc, &g) in db.iter_mut().zip(dy.row(r)) {
                                *acc = *acc + g;
                            }
                        }
                        self.accum(&mut grads, *bias, DenseArray::from_vec(db))?;
                    }
                }
                Op::MatMul(a, b) => {
                    let da = kernels::matmul_nt(&dy, &self.nodes[*b].value)?;
                    let db = kernels::matmul_tn(&self.nodes[*a].value, &dy)?;
                    self.accum(&mut grads, *a, da)?;
                    self.accum(&mut grads, *b, db)?;
                }
                Op::MatMulNt(a, b) => {
                    let da = kernels::matmul(&dy, &self.nodes[*b].value)?;
                    let db = kernels::matmul_tn(&dy, &self.nodes[*a].value)?;
                    self.accum(&mut grads, *a, da)?;
                    self.accum(&mut grads, *b, db)?;
                }
                Op::Relu(a) => {
                    let y = &self.nodes[i].value;
                    let da = DenseArray::new(
                        dy.shape().to_vec(),
                        dy.data()
                            .iter()
                            .zip(y.data())
                            .map(|(&g, &v)| if v > F::zero() { g } else { F::zero() })
                            .collect(),
                    )?;
                    self.accum(&mut grads, *a, da)?;
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    let da = DenseArray::new(
                        dy.shape().to_vec(),
                        dy.data()
                            .iter()
                            .zip(y.data())
                            .map(|(&g, &v)| g * (F::one() - v * v))
                            .collect(),
                    )?;
                    self.accum(&mut grads, *a, da)?;
                }
                Op::SoftmaxRows(a) => {
                    let s = &self.nodes[i].value;
                    let c = s.cols();
                    let mut da = Vec::with_capacity(s.len());
                    for r in 0..s.rows() {
                        let srow = s.row(r);
                        let grow = dy.row(r);
                        let dot = srow
                            .iter()
                            .zip(grow)
                            .map(|(&sv, &gv)| sv * gv)
                            .sum::<F>();
                        da.extend(srow.iter().zip(grow).map(|(&sv, &gv)| sv * (gv - dot)));
                    }
                    self.accum(&mut grads, *a, DenseArray::new(vec![s.rows(), c], da)?)?;
                }
                Op::LayerNormRows { x, inv_std } => {
                    let y = &self.nodes[i].value;
                    let c = y.cols();
                    let cn = F::from_f64(c as f64);
                    let mut da = Vec::with_capacity(y.len());
                    for r in 0..y.rows() {
                        let yrow = y.row(r);
                        let grow = dy.row(r);
                        let mean_g = grow.iter().cloned().sum::<F>() / cn;
                        let mean_gy = grow
                            .iter()
                            .zip(yrow)
                            .map(|(&g, &v)| g * v)
                            .sum::<F>()
                            / cn;
                        let is = inv_std[r];
                        da.extend(
                            grow.iter()
                                .zip(yrow)
                                .map(|(&g, &v)| is * (g - mean_g - v * mean_gy)),
                        );
                    }
                    self.accum(
                        &mut grads,
                        *x,
                        DenseArray::new(self.nodes[*x].value.shape().to_vec(), da)?,
                    )?;
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (dx, dw, db) = kernels::conv2d_backward(
                        &self.nodes[*x].value,
                        &self.nodes[*w].value,
                        &dy,
                        *stride,
                        *pad,
                        b.is_some(),
                    );
                    self.accum(&mut grads, *x, dx)?;
                    self.accum(&mut grads, *w, dw)?;
                    if let (Some(bias), Some(db)) = (b, db) {
                        self.accum(&mut grads, *bias, db)?;
                    }
                }
                Op::Upsample2x(a) => {
                    let xs = self.nodes[*a].value.shape();
                    let (h, w, c) = (xs[0], xs[1], xs[2]);
                    let mut da = vec![F::zero(); h * w * c];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            let src = (y * 2 * w + xx) * c;
                            let dst = (y / 2 * w + xx / 2) * c;
                            for ch in 0..c {
                                da[dst + ch] = da[dst + ch] + dy.data()[src + ch];
                            }
                        }
                    }
                    self.accum(&mut grads, *a, DenseArray::new(vec![h, w, c], da)?)?;
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.nodes[*a].value.cols();
                    let cb = self.nodes[*b].value.cols();
                    let rows = dy.rows();
                    let mut da = Vec::with_capacity(rows * ca);
                    let mut db = Vec::with_capacity(rows * cb);
                    for r in 0..rows {
                        let row = dy.row(r);
                        da.extend_from_slice(&row[..ca]);
                        db.extend_from_slice(&row[ca..]);
                    }
                    self.accum(&mut grads, *a, DenseArray::new(vec![rows, ca], da)?)?;
                    self.accum(&mut grads, *b, DenseArray::new(vec![rows, cb], db)?)?;
                }
                Op::SliceCols { x, start } => {
                    let xm = &self.nodes[*x].value;
                    let mut da = DenseArray::zeros(vec![xm.rows(), xm.cols()]);
                    let c = xm.cols();
                    let sc = dy.cols();
                    for r in 0..dy.rows() {
                        let dst = &mut da.data_mut()[r * c + start..r * c + start + sc];
                        for (d, &g) in dst.iter_mut().zip(dy.row(r)) {
                            *d = g;
                        }
                    }
                    self.accum(&mut grads, *x, da.reshape(xm.shape().to_vec())?)?;
                }
                Op::ConcatRows(a, b) => {
                    let ra = self.nodes[*a].value.rows();
                    let c = dy.cols();
                    let da = DenseArray::new(vec![ra, c], dy.data()[..ra * c].to_vec())?;
                    let db = DenseArray::new(
                        vec![dy.rows() - ra, c],
                        dy.data()[ra * c..].to_vec(),
                    )?;
                    self.accum(&mut grads, *a, da)?;
                    self.accum(&mut grads, *b, db)?;
                }
                Op::SliceRows { x, start } => {
                    let xm = &self.nodes[*x].value;
                    let c = xm.cols();
                    let mut da = DenseArray::zeros(vec![xm.rows(), c]);
                    da.data_mut()[start * c..start * c + dy.len()].copy_from_slice(dy.data());
                    self.accum(&mut grads, *x, da.reshape(xm.shape().to_vec())?)?;
                }
                Op::GatherRows { x, idx } => {
                    let xm = &self.nodes[*x].value;
                    let c = xm.cols();
                    let mut da = DenseArray::zeros(vec![xm.rows(), c]);
                    for (r, &src) in idx.iter().enumerate() {
                        let dst = &mut da.data_mut()[src * c..(src + 1) * c];
                        for (d, &g) in dst.iter_mut().zip(dy.row(r)) {
                            *d = *d + g;
                        }
                    }
                    self.accum(&mut grads, *x, da.reshape(xm.shape().to_vec())?)?;
                }
                Op::GatherCols { x, idx } => {
                    let xm = &self.nodes[*x].value;
                    let c = xm.cols();
                    let mut da = DenseArray::zeros(vec![xm.rows(), c]);
                    for (r, &col) in idx.iter().enumerate() {
                        da.data_mut()[r * c + col] = da.data()[r * c + col] + dy.data()[r];
                    }
                    self.accum(&mut grads, *x, da)?;
                }
                Op::Reshape { x } => {
                    let shape = self.nodes[*x].value.shape().to_vec();
                    self.accum(&mut grads, *x, dy.reshape(shape)?)?;
                }
                Op::SumAll(a) => {
                    let g = dy.data()[0];
                    let xm = &self.nodes[*a].value;
                    let da = DenseArray::new(xm.shape().to_vec(), vec![g; xm.len()])?;
                    self.accum(&mut grads, *a, da)?;
                }
                Op::LogSumExpRows(a) => {
                    let xm = &self.nodes[*a].value;
                    let c = xm.cols();
                    let mut da = Vec::with_capacity(xm.len());
                    for r in 0..xm.rows() {
                        let mut row = xm.row(r).to_vec();
                        kernels::softmax_row_inplace(&mut row);
                        let g = dy.data()[r];
                        da.extend(row.into_iter().map(|p| p * g));
                    }
                    self.accum(&mut grads, *a, DenseArray::new(vec![xm.rows(), c], da)?)?;
                }
            }
        }
        Ok(grads)
    }

    pub fn grad(&self, grads: &[Option<DenseArray<F>>], v: Var) -> Option<DenseArray<F>> {
        grads[v.0].clone()
    }

    fn accum(
        &self,
        grads: &mut [Option<DenseArray<F>>],
        idx: usize,
        delta: DenseArray<F>,
    ) -> Result<()> {
        match &mut grads[idx] {
            Some(g) => g.add_assign(&delta),
            slot @ None => {
                *slot = Some(delta);
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_array(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> DenseArray<f64> {
        let n = shape.iter().product();
        DenseArray::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check for an arbitrary scalar graph builder.
    fn check_grad(
        build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
        inputs: &[DenseArray<f64>],
    ) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone()).unwrap()).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss).unwrap();
        let eps = 1e-6;
        for (pi, input) in inputs.iter().enumerate() {
            let g = tape.grad(&grads, vars[pi]).unwrap_or_else(|| DenseArray::zeros(input.shape().to_vec()));
            for k in 0..input.len() {
                let eval = |delta: f64| {
                    let mut shifted: Vec<DenseArray<f64>> = inputs.to_vec();
                    shifted[pi].data_mut()[k] += delta;
                    let mut t = Tape::new();
                    let vs: Vec<Var> = shifted.iter().map(|a| t.leaf(a.clone()).unwrap()).collect();
                    let l = build(&mut t, &vs);
                    t.scalar_value(l)
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let rel = (g.data()[k] - fd).abs() / fd.abs().max(1.0);
                assert!(
                    rel < 1e-6,
                    "param {pi} elem {k}: analytic {} vs fd {fd}",
                    g.data()[k]
                );
            }
        }
    }

    #[test]
    fn linear_and_matmul_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_array(&mut rng, vec![3, 4]);
        let w = rand_array(&mut rng, vec![5, 4]);
        let b = rand_array(&mut rng, vec![5]);
        check_grad(
            |t, v| {
                let y = t.linear(v[0], v[1], Some(v[2])).unwrap();
                let y = t.matmul(y, v[1]).unwrap();
                t.sum_all(y).unwrap()
            },
            &[x, w, b],
        );
    }

    #[test]
    fn softmax_layernorm_logsumexp_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_array(&mut rng, vec![2, 6]);
        check_grad(
            |t, v| {
                let s = t.softmax_rows(v[0]).unwrap();
                let n = t.layer_norm_rows(s, 1e-6).unwrap();
                let l = t.logsumexp_rows(n).unwrap();
                t.sum_all(l).unwrap()
            },
            &[x],
        );
    }

    #[test]
    fn conv_upsample_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_array(&mut rng, vec![4, 4, 2]);
        let w = rand_array(&mut rng, vec![3, 3, 2, 2]);
        let b = rand_array(&mut rng, vec![2]);
        check_grad(
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap();
                let y = t.relu(y).unwrap();
                let y = t.upsample2x(y).unwrap();
                t.sum_all(y).unwrap()
            },
            &[x, w, b],
        );
    }

    #[test]
    fn slicing_gather_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_array(&mut rng, vec![4, 6]);
        let y = rand_array(&mut rng, vec![2, 6]);
        check_grad(
            |t, v| {
                let c = t.concat_rows(v[0], v[1]).unwrap();
                let g = t.gather_rows(c, &[5, 0, 0, 3]).unwrap();
                let lo = t.slice_cols(g, 0, 3).unwrap();
                let hi = t.slice_cols(g, 3, 6).unwrap();
                let scale = t.constant(DenseArray::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
                let m = t.mul_row(lo, scale).unwrap();
                let s = t.add(m, hi).unwrap();
                let p = t.gather_cols(s, &[0, 2, 1, 0]).unwrap();
                let th = t.tanh(p).unwrap();
                t.sum_all(th).unwrap()
            },
            &[x, y],
        );
    }

    #[test]
    fn softmax_empty_errors() {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(DenseArray::from_vec(vec![])).unwrap();
        assert!(tape.softmax_rows(v).is_err());
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(DenseArray::from_vec(vec![1.0, 2.0])).unwrap();
        let c = tape.constant(DenseArray::from_vec(vec![3.0, 4.0])).unwrap();
        let s = tape.add(a, c).unwrap();
        let l = tape.sum_all(s).unwrap();
        let grads = tape.backward(l).unwrap();
        assert!(tape.grad(&grads, a).is_some());
        assert!(tape.grad(&grads, c).is_none());
    }

    #[test]
    fn nonfinite_forward_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let a = tape
            .constant(DenseArray::from_vec(vec![1e30f32, 1e30]))
            .unwrap();
        let b = tape.constant(DenseArray::from_vec(vec![1e30f32, 1e30])).unwrap();
        let y = tape.matmul_nt(a, b);
        assert!(matches!(y, Err(SamError::NonFinite(_))));
    }

    #[test]
    fn rand_grad_stress() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let q = rand_array(&mut rng, vec![3, 8]);
            let k = rand_array(&mut rng, vec![5, 8]);
            check_grad(
                |t, v| {
                    let s = t.matmul_nt(v[0], v[1]).unwrap();
                    let a = t.softmax_rows(s).unwrap();
                    let o = t.matmul(a, v[1]).unwrap();
                    let l = t.logsumexp_rows(o).unwrap();
                    t.sum_all(l).unwrap()
                },
                &[q, k],
            );
        }
    }
}
