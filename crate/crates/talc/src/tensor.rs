//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: row-major storage, explicit shapes, and
//! only the operations the denoiser needs (matmul, masked softmax, layer
//! norm, GELU, slicing/concatenation, reductions). There is no implicit
//! broadcasting beyond scalar scaling and per-row vectors. Graph construction
//! and `backward` are single-threaded; tensors are immutable after
//! construction except for gradient buffers and explicit `set_data` calls by
//! the optimizer between steps.

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use crate::error::{Result, TalcError};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// RAII guard that disables graph construction (inference mode).
pub struct NoGradGuard {
    prev: bool,
}

impl NoGradGuard {
    pub fn new() -> Self {
        let prev = GRAD_ENABLED.with(|g| g.replace(false));
        NoGradGuard { prev }
    }
}

impl Default for NoGradGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        let prev = self.prev;
        GRAD_ENABLED.with(|g| g.set(prev));
    }
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

type BackwardFn = Box<dyn Fn(&[f64])>;

struct Node {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward_fn: Option<BackwardFn>,
}

/// Shared handle to a node in the computation graph.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

fn shape_product(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if shape_product(&shape) != data.len() {
            return Err(TalcError::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                shape_product(&shape),
                data.len()
            )));
        }
        Ok(Tensor::leaf(shape, data, false))
    }

    /// Leaf that participates in gradient computation (a parameter).
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if shape_product(&shape) != data.len() {
            return Err(TalcError::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                shape_product(&shape),
                data.len()
            )));
        }
        Ok(Tensor::leaf(shape, data, true))
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape_product(&shape);
        Tensor::leaf(shape, vec![0.0; n], false)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::leaf(vec![1], vec![v], false)
    }

    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            parents: Vec::new(),
            backward_fn: None,
        }))
    }

    fn op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward_fn: BackwardFn,
    ) -> Tensor {
        let track = grad_enabled() && parents.iter().any(|p| p.0.requires_grad);
        if track {
            Tensor(Rc::new(Node {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: true,
                parents,
                backward_fn: Some(backward_fn),
            }))
        } else {
            Tensor::leaf(shape, data, false)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        shape_product(&self.0.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.0.data.borrow()[0]
    }

    /// Replace the stored values (optimizer update between graph builds).
    pub fn set_data(&self, new: &[f64]) {
        let mut d = self.0.data.borrow_mut();
        assert_eq!(d.len(), new.len(), "set_data length mismatch");
        d.copy_from_slice(new);
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    fn accumulate_grad(&self, contribution: &[f64]) {
        let mut g = self.0.grad.borrow_mut();
        match g.as_mut() {
            Some(buf) => {
                for (b, c) in buf.iter_mut().zip(contribution) {
                    *b += c;
                }
            }
            None => *g = Some(contribution.to_vec()),
        }
    }

    fn ensure_grad_alloc(&self) {
        let mut g = self.0.grad.borrow_mut();
        if g.is_none() {
            *g = Some(vec![0.0; self.numel()]);
        }
    }

    fn rows_cols(&self) -> (usize, usize) {
        let s = &self.0.shape;
        match s.len() {
            0 => (1, 1),
            1 => (1, s[0]),
            _ => (s[..s.len() - 1].iter().product(), s[s.len() - 1]),
        }
    }

    /// Reverse-mode backprop from a scalar.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TalcError::Usage(format!(
                "backward() requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        let order = topo_order(self);
        // Every reachable requires_grad tensor ends up with a populated
        // (possibly zero) gradient buffer.
        for t in &order {
            if t.0.requires_grad {
                t.ensure_grad_alloc();
            }
        }
        self.accumulate_grad(&[1.0]);
        for t in order.iter().rev() {
            if let Some(f) = &t.0.backward_fn {
                let g = t.0.grad.borrow();
                if let Some(g) = g.as_ref() {
                    f(g);
                }
            }
        }
        Ok(())
    }

    // ── elementwise ─────────────────────────────────────────────────────

    fn check_same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(TalcError::Shape(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "add")?;
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a + b)
            .collect();
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                pa.accumulate_grad(g);
                pb.accumulate_grad(g);
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "sub")?;
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a - b)
            .collect();
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                pa.accumulate_grad(g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                pb.accumulate_grad(&neg);
            }),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "mul")?;
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a * b)
            .collect();
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let da: Vec<f64> = g.iter().zip(pb.data().iter()).map(|(g, b)| g * b).collect();
                let db: Vec<f64> = g.iter().zip(pa.data().iter()).map(|(g, a)| g * a).collect();
                pa.accumulate_grad(&da);
                pb.accumulate_grad(&db);
            }),
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|v| v * c).collect();
        let p = self.clone();
        Tensor::op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let d: Vec<f64> = g.iter().map(|v| v * c).collect();
                p.accumulate_grad(&d);
            }),
        )
    }

    /// Add a length-`cols` vector to every row.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let (r, c) = self.rows_cols();
        if row.numel() != c {
            return Err(TalcError::Shape(format!(
                "add_row: row has {} elements, expected {}",
                row.numel(),
                c
            )));
        }
        let mut data = self.to_vec();
        {
            let rv = row.data();
            for i in 0..r {
                for j in 0..c {
                    data[i * c + j] += rv[j];
                }
            }
        }
        let (pa, pb) = (self.clone(), row.clone());
        Ok(Tensor::op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), row.clone()],
            Box::new(move |g| {
                pa.accumulate_grad(g);
                let mut d = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        d[j] += g[i * c + j];
                    }
                }
                pb.accumulate_grad(&d);
            }),
        ))
    }

    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044715;
        let x = self.to_vec();
        let data: Vec<f64> = x
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (C * (v + A * v * v * v)).tanh()))
            .collect();
        let p = self.clone();
        Tensor::op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let x = p.data().clone();
                let d: Vec<f64> = g
                    .iter()
                    .zip(x.iter())
                    .map(|(&g, &v)| {
                        let u = C * (v + A * v * v * v);
                        let t = u.tanh();
                        let sech2 = 1.0 - t * t;
                        g * (0.5 * (1.0 + t) + 0.5 * v * sech2 * C * (1.0 + 3.0 * A * v * v))
                    })
                    .collect();
                p.accumulate_grad(&d);
            }),
        )
    }

    // ── matmul ──────────────────────────────────────────────────────────

    /// Standard 2-D matrix product `[m×k] · [k×p] -> [m×p]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TalcError::Shape(format!(
                "matmul: incompatible shapes {:?} x {:?}",
                sa, sb
            )));
        }
        let (m, k, p) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(&self.data(), &other.data(), m, k, p);
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::op(
            vec![m, p],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                // dA = G · Bᵀ ; dB = Aᵀ · G
                let b = pb.data();
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    let grow = &g[i * p..(i + 1) * p];
                    for kk in 0..k {
                        let brow = &b[kk * p..(kk + 1) * p];
                        da[i * k + kk] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                    }
                }
                drop(b);
                let a = pa.data();
                let mut db = vec![0.0; k * p];
                for i in 0..m {
                    let grow = &g[i * p..(i + 1) * p];
                    let arow = &a[i * k..(i + 1) * k];
                    for (kk, &av) in arow.iter().enumerate() {
                        let dst = &mut db[kk * p..(kk + 1) * p];
                        for (d, &gv) in dst.iter_mut().zip(grow) {
                            *d += av * gv;
                        }
                    }
                }
                drop(a);
                pa.accumulate_grad(&da);
                pb.accumulate_grad(&db);
            }),
        ))
    }

    pub fn transpose2d(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(TalcError::Shape(format!(
                "transpose2d: expected rank 2, got {:?}",
                s
            )));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        drop(src);
        let p = self.clone();
        Ok(Tensor::op(
            vec![c, r],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut d = vec![0.0; r * c];
                for j in 0..c {
                    for i in 0..r {
                        d[i * c + j] = g[j * r + i];
                    }
                }
                p.accumulate_grad(&d);
            }),
        ))
    }

    // ── softmax / layer norm ────────────────────────────────────────────

    /// Softmax over the last axis with max-subtraction. `mask`, when given,
    /// marks attendable positions; masked positions get weight exactly 0 and
    /// receive no gradient.
    pub fn softmax_masked(&self, mask: Option<&[bool]>) -> Result<Tensor> {
        let (rows, cols) = self.rows_cols();
        if let Some(m) = mask {
            if m.len() != cols {
                return Err(TalcError::Shape(format!(
                    "softmax mask has {} entries for {} columns",
                    m.len(),
                    cols
                )));
            }
            if !m.iter().any(|&v| v) {
                return Err(TalcError::Numeric(
                    "softmax: every position is masked".into(),
                ));
            }
        }
        let x = self.data();
        if x.iter().any(|v| v.is_nan()) {
            return Err(TalcError::Numeric("softmax: NaN input".into()));
        }
        let valid: Vec<bool> = match mask {
            Some(m) => m.to_vec(),
            None => vec![true; cols],
        };
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            let row = &x[i * cols..(i + 1) * cols];
            let mut mx = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if valid[j] && v > mx {
                    mx = v;
                }
            }
            let mut sum = 0.0;
            for j in 0..cols {
                if valid[j] {
                    let e = (row[j] - mx).exp();
                    data[i * cols + j] = e;
                    sum += e;
                }
            }
            for j in 0..cols {
                data[i * cols + j] /= sum;
            }
        }
        drop(x);
        let y = data.clone();
        let p = self.clone();
        Ok(Tensor::op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut d = vec![0.0; rows * cols];
                for i in 0..rows {
                    let yr = &y[i * cols..(i + 1) * cols];
                    let gr = &g[i * cols..(i + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        d[i * cols + j] = yr[j] * (gr[j] - dot);
                    }
                }
                p.accumulate_grad(&d);
            }),
        ))
    }

    pub fn softmax(&self) -> Result<Tensor> {
        self.softmax_masked(None)
    }

    /// Per-row normalization to zero mean / unit variance followed by an
    /// affine transform: `y = gamma * (x - mean) / sqrt(var + eps) + shift`.
    pub fn layer_norm(&self, gamma: &Tensor, shift: &Tensor, eps: f64) -> Result<Tensor> {
        let (rows, cols) = self.rows_cols();
        if gamma.numel() != cols || shift.numel() != cols {
            return Err(TalcError::Shape(format!(
                "layer_norm: gamma/shift have {}/{} elements for {} columns",
                gamma.numel(),
                shift.numel(),
                cols
            )));
        }
        let x = self.data();
        let gv = gamma.data();
        let bv = shift.data();
        let mut data = vec![0.0; rows * cols];
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        for i in 0..rows {
            let row = &x[i * cols..(i + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..cols {
                let xh = (row[j] - mean) * istd;
                xhat[i * cols + j] = xh;
                data[i * cols + j] = gv[j] * xh + bv[j];
            }
        }
        drop(x);
        drop(gv);
        drop(bv);
        let (px, pg, pb) = (self.clone(), gamma.clone(), shift.clone());
        Ok(Tensor::op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), gamma.clone(), shift.clone()],
            Box::new(move |g| {
                let gv = pg.data().clone();
                let mut dx = vec![0.0; rows * cols];
                let mut dgamma = vec![0.0; cols];
                let mut dshift = vec![0.0; cols];
                for i in 0..rows {
                    let xh = &xhat[i * cols..(i + 1) * cols];
                    let go = &g[i * cols..(i + 1) * cols];
                    let mut sum_gw = 0.0;
                    let mut sum_gwx = 0.0;
                    for j in 0..cols {
                        let gw = go[j] * gv[j];
                        sum_gw += gw;
                        sum_gwx += gw * xh[j];
                        dgamma[j] += go[j] * xh[j];
                        dshift[j] += go[j];
                    }
                    let istd = inv_std[i];
                    let n = cols as f64;
                    for j in 0..cols {
                        let gw = go[j] * gv[j];
                        dx[i * cols + j] = istd * (gw - sum_gw / n - xh[j] * sum_gwx / n);
                    }
                }
                px.accumulate_grad(&dx);
                pg.accumulate_grad(&dgamma);
                pb.accumulate_grad(&dshift);
            }),
        ))
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        let p = self.clone();
        Tensor::op(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |g| {
                let d = vec![g[0]; n];
                p.accumulate_grad(&d);
            }),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        let s: f64 = self.data().iter().sum();
        let p = self.clone();
        Tensor::op(
            vec![1],
            vec![s / n as f64],
            vec![self.clone()],
            Box::new(move |g| {
                let d = vec![g[0] / n as f64; n];
                p.accumulate_grad(&d);
            }),
        )
    }

    // ── shape ops ───────────────────────────────────────────────────────

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        if shape_product(&shape) != self.numel() {
            return Err(TalcError::Shape(format!(
                "reshape: {:?} -> {:?} changes element count",
                self.shape(),
                shape
            )));
        }
        let p = self.clone();
        Ok(Tensor::op(
            shape,
            self.to_vec(),
            vec![self.clone()],
            Box::new(move |g| p.accumulate_grad(g)),
        ))
    }

    /// Rows `[r0, r1)` of a 2-D tensor.
    pub fn slice_rows(&self, r0: usize, r1: usize) -> Result<Tensor> {
        let (rows, cols) = self.rows_cols();
        if r0 >= r1 || r1 > rows {
            return Err(TalcError::Index(format!(
                "slice_rows [{r0}, {r1}) out of range for {rows} rows"
            )));
        }
        let data = self.data()[r0 * cols..r1 * cols].to_vec();
        let p = self.clone();
        let total = rows * cols;
        Ok(Tensor::op(
            vec![r1 - r0, cols],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut d = vec![0.0; total];
                d[r0 * cols..r1 * cols].copy_from_slice(g);
                p.accumulate_grad(&d);
            }),
        ))
    }

    /// Columns `[c0, c1)` of a 2-D tensor.
    pub fn slice_cols(&self, c0: usize, c1: usize) -> Result<Tensor> {
        let (rows, cols) = self.rows_cols();
        if c0 >= c1 || c1 > cols {
            return Err(TalcError::Index(format!(
                "slice_cols [{c0}, {c1}) out of range for {cols} columns"
            )));
        }
        let w = c1 - c0;
        let src = self.data();
        let mut data = vec![0.0; rows * w];
        for i in 0..rows {
            data[i * w..(i + 1) * w].copy_from_slice(&src[i * cols + c0..i * cols + c1]);
        }
        drop(src);
        let p = self.clone();
        Ok(Tensor::op(
            vec![rows, w],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut d = vec![0.0; rows * cols];
                for i in 0..rows {
                    d[i * cols + c0..i * cols + c1].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                p.accumulate_grad(&d);
            }),
        ))
    }

    /// Gather rows by index (duplicates allowed); gradient scatter-adds.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let (rows, cols) = self.rows_cols();
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TalcError::Index(format!(
                "gather_rows: index {bad} out of range for {rows} rows"
            )));
        }
        let src = self.data();
        let mut data = vec![0.0; indices.len() * cols];
        for (o, &i) in indices.iter().enumerate() {
            data[o * cols..(o + 1) * cols].copy_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        drop(src);
        let idx = indices.to_vec();
        let p = self.clone();
        Ok(Tensor::op(
            vec![indices.len(), cols],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut d = vec![0.0; rows * cols];
                for (o, &i) in idx.iter().enumerate() {
                    for j in 0..cols {
                        d[i * cols + j] += g[o * cols + j];
                    }
                }
                p.accumulate_grad(&d);
            }),
        ))
    }

    /// Stack 2-D tensors along the row axis.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TalcError::Usage("concat_rows: no inputs".into()));
        }
        let cols = parts[0].rows_cols().1;
        let mut rows = 0;
        for p in parts {
            let (r, c) = p.rows_cols();
            if c != cols {
                return Err(TalcError::Shape(format!(
                    "concat_rows: column mismatch {c} vs {cols}"
                )));
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(&p.data());
        }
        let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        let sizes: Vec<usize> = parts.iter().map(|p| p.numel()).collect();
        let captured = owned.clone();
        Ok(Tensor::op(
            vec![rows, cols],
            data,
            owned,
            Box::new(move |g| {
                let mut off = 0;
                for (p, &n) in captured.iter().zip(&sizes) {
                    p.accumulate_grad(&g[off..off + n]);
                    off += n;
                }
            }),
        ))
    }

    /// Stack 2-D tensors along the column axis (same row count).
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TalcError::Usage("concat_cols: no inputs".into()));
        }
        let rows = parts[0].rows_cols().0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = p.rows_cols();
            if r != rows {
                return Err(TalcError::Shape(format!(
                    "concat_cols: row mismatch {r} vs {rows}"
                )));
            }
            widths.push(c);
        }
        let cols: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * cols];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let src = p.data();
            for i in 0..rows {
                data[i * cols + off..i * cols + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        let captured = owned.clone();
        let widths_b = widths.clone();
        Ok(Tensor::op(
            vec![rows, cols],
            data,
            owned,
            Box::new(move |g| {
                let mut off = 0;
                for (p, &w) in captured.iter().zip(&widths_b) {
                    let mut d = vec![0.0; rows * w];
                    for i in 0..rows {
                        d[i * w..(i + 1) * w]
                            .copy_from_slice(&g[i * cols + off..i * cols + off + w]);
                    }
                    p.accumulate_grad(&d);
                    off += w;
                }
            }),
        ))
    }
}

/// Row-major `[m×k] · [k×p]` on raw slices.
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * p..(i + 1) * p];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * p..(kk + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut visited: std::collections::HashSet<*const Node> = std::collections::HashSet::new();
    let mut order = Vec::new();
    // Iterative DFS with an explicit stack of (node, child cursor).
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    visited.insert(Rc::as_ptr(&root.0));
    while let Some((node, cursor)) = stack.pop() {
        if cursor < node.0.parents.len() {
            let child = node.0.parents[cursor].clone();
            stack.push((node, cursor + 1));
            if visited.insert(Rc::as_ptr(&child.0)) {
                stack.push((child, 0));
            }
        } else {
            order.push(node);
        }
    }
    order
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}
