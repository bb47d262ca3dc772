//! Internal reverse-mode gradient graph.
//!
//! Not public API: the crate exposes analytic gradients only through the
//! training entry points, and every gradient path is validated against
//! `ops::finite_diff_grad`. Node values are held in f64 so that central
//! differences at h = 1e-3 remain meaningful against storage quantization;
//! parameters, checkpoints and all public tensors stay f32.

use crate::ops;
use crate::tensor::Tensor;

/// Flat f64 buffer with shape, mirroring `Tensor` at higher precision.
#[derive(Debug, Clone)]
pub(crate) struct Arr {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Arr {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            &self.shape,
            self.data.iter().map(|&v| v as f32).collect(),
        )
        .expect("shape preserved")
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() <= 1 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    MatmulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Gelu(Var),
    LayerNorm(Var, f64),
    SoftmaxRows(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    MeanRows(Var),
    SumAll(Var),
    Reshape(Var),
    Patchify(Var, PatchDims),
    Unpatchify(Var, PatchDims),
    Cosine(Var, Var),
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct PatchDims {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
}

impl PatchDims {
    fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    /// Flat pixel index for (token, within-token) coordinates.
    fn pixel_index(&self, token: usize, inner: usize) -> usize {
        let (gh, gw) = self.grid();
        let f = token / (gh * gw);
        let rem = token % (gh * gw);
        let gy = rem / gw;
        let gx = rem % gw;
        let py = inner / self.patch;
        let px = inner % self.patch;
        f * self.height * self.width + (gy * self.patch + py) * self.width + gx * self.patch + px
    }

    pub fn tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        self.frames * gh * gw
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch
    }
}

struct Node {
    value: Arr,
    op: Op,
}

pub(crate) struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Arr, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Arr {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        self.value(v).to_tensor()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.value(v).len(), 1);
        self.value(v).data[0]
    }

    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(Arr::from_tensor(t), Op::Leaf)
    }

    pub fn leaf_arr(&mut self, a: Arr) -> Var {
        self.push(a, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = (self.value(a).rows(), self.value(a).cols());
        let (kb, n) = (self.value(b).rows(), self.value(b).cols());
        assert_eq!(k, kb, "tape matmul inner dims");
        let mut out = Arr::zeros(&[m, n]);
        ops::matmul_kernel(
            &self.value(a).data,
            &self.value(b).data,
            m,
            k,
            n,
            &mut out.data,
        );
        self.push(out, Op::Matmul(a, b))
    }

    /// a · bᵀ (rows of b are the "keys").
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = (self.value(a).rows(), self.value(a).cols());
        let (n, kb) = (self.value(b).rows(), self.value(b).cols());
        assert_eq!(k, kb, "tape matmul_nt inner dims");
        let mut out = Arr::zeros(&[m, n]);
        ops::matmul_nt_kernel(
            &self.value(a).data,
            &self.value(b).data,
            m,
            k,
            n,
            &mut out.data,
        );
        self.push(out, Op::MatmulNT(a, b))
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        assert_eq!(self.value(a).len(), self.value(b).len(), "elementwise len");
        let mut out = Arr::zeros(&self.value(a).shape.clone());
        for i in 0..out.len() {
            out.data[i] = f(self.value(a).data[i], self.value(b).data[i]);
        }
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut out = self.value(a).clone();
        for v in &mut out.data {
            *v *= c;
        }
        self.push(out, Op::Scale(a, c))
    }

    /// y[i, :] = x[i, :] + v, where v has length cols(x).
    pub fn add_row(&mut self, x: Var, v: Var) -> Var {
        let cols = self.value(x).cols();
        assert_eq!(self.value(v).len(), cols, "add_row width");
        let mut out = self.value(x).clone();
        let rows = out.rows();
        for i in 0..rows {
            for j in 0..cols {
                out.data[i * cols + j] += self.value(v).data[j];
            }
        }
        self.push(out, Op::AddRow(x, v))
    }

    /// y[i, :] = x[i, :] ⊙ v.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Var {
        let cols = self.value(x).cols();
        assert_eq!(self.value(v).len(), cols, "mul_row width");
        let mut out = self.value(x).clone();
        let rows = out.rows();
        for i in 0..rows {
            for j in 0..cols {
                out.data[i * cols + j] *= self.value(v).data[j];
            }
        }
        self.push(out, Op::MulRow(x, v))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in &mut out.data {
            *v = ops::gelu_scalar(*v);
        }
        self.push(out, Op::Gelu(x))
    }

    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let (r, c) = (self.value(x).rows(), self.value(x).cols());
        let mut out = Arr::zeros(&self.value(x).shape.clone());
        ops::layer_norm_kernel(&self.value(x).data, r, c, eps, &mut out.data);
        self.push(out, Op::LayerNorm(x, eps))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = (self.value(x).rows(), self.value(x).cols());
        let mut out = Arr::zeros(&self.value(x).shape.clone());
        ops::softmax_rows_kernel(&self.value(x).data, r, c, &mut out.data);
        self.push(out, Op::SoftmaxRows(x))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            assert_eq!(self.value(p).cols(), cols, "concat_rows width");
            rows += self.value(p).rows();
        }
        let mut out = Arr::zeros(&[rows, cols]);
        let mut at = 0;
        for &p in parts {
            let v = self.value(p);
            out.data[at..at + v.len()].copy_from_slice(&v.data);
            at += v.len();
        }
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let cols = self.value(x).cols();
        let mut out = Arr::zeros(&[len, cols]);
        out.data
            .copy_from_slice(&self.value(x).data[start * cols..(start + len) * cols]);
        self.push(out, Op::SliceRows(x, start, len))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            assert_eq!(self.value(p).rows(), rows, "concat_cols rows");
            cols += self.value(p).cols();
        }
        let mut out = Arr::zeros(&[rows, cols]);
        for i in 0..rows {
            let mut at = 0;
            for &p in parts {
                let pc = self.value(p).cols();
                for j in 0..pc {
                    out.data[i * cols + at + j] = self.value(p).data[i * pc + j];
                }
                at += pc;
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (rows, cols) = (self.value(x).rows(), self.value(x).cols());
        let mut out = Arr::zeros(&[rows, len]);
        for i in 0..rows {
            for j in 0..len {
                out.data[i * len + j] = self.value(x).data[i * cols + start + j];
            }
        }
        self.push(out, Op::SliceCols(x, start, len))
    }

    /// [n×d] -> [1×d] mean over rows.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (rows, cols) = (self.value(x).rows(), self.value(x).cols());
        let mut out = Arr::zeros(&[1, cols]);
        for i in 0..rows {
            for j in 0..cols {
                out.data[j] += self.value(x).data[i * cols + j];
            }
        }
        for v in &mut out.data {
            *v /= rows as f64;
        }
        self.push(out, Op::MeanRows(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = 0.0f64;
        for &v in &self.value(x).data {
            acc += v;
        }
        let out = Arr {
            shape: vec![1],
            data: vec![acc],
        };
        self.push(out, Op::SumAll(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.value(x).len(), "reshape element count");
        let mut out = self.value(x).clone();
        out.shape = shape.to_vec();
        self.push(out, Op::Reshape(x))
    }

    /// [F, H, W] pixels -> [F·(H/p)·(W/p), p²] row-major patch tokens.
    pub fn patchify(&mut self, x: Var, dims: PatchDims) -> Var {
        assert_eq!(self.value(x).len(), dims.frames * dims.height * dims.width);
        let mut out = Arr::zeros(&[dims.tokens(), dims.patch_len()]);
        let pl = dims.patch_len();
        for t in 0..dims.tokens() {
            for q in 0..pl {
                out.data[t * pl + q] = self.value(x).data[dims.pixel_index(t, q)];
            }
        }
        self.push(out, Op::Patchify(x, dims))
    }

    /// Inverse of `patchify`.
    pub fn unpatchify(&mut self, x: Var, dims: PatchDims) -> Var {
        assert_eq!(self.value(x).len(), dims.frames * dims.height * dims.width);
        let mut out = Arr::zeros(&[dims.frames, dims.height, dims.width]);
        let pl = dims.patch_len();
        for t in 0..dims.tokens() {
            for q in 0..pl {
                out.data[dims.pixel_index(t, q)] = self.value(x).data[t * pl + q];
            }
        }
        self.push(out, Op::Unpatchify(x, dims))
    }

    /// Cosine similarity of two flattened vectors, as a [1] node.
    /// Panics on zero norm; callers guard with a degenerate-input error.
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).len(), self.value(b).len(), "cosine len");
        let (na, nb, dot) = self.cosine_parts(a, b);
        assert!(na > 0.0 && nb > 0.0, "cosine of zero-norm vector");
        let out = Arr {
            shape: vec![1],
            data: vec![dot / (na * nb)],
        };
        self.push(out, Op::Cosine(a, b))
    }

    fn cosine_parts(&self, a: Var, b: Var) -> (f64, f64, f64) {
        let (va, vb) = (&self.value(a).data, &self.value(b).data);
        let mut na = 0.0;
        let mut nb = 0.0;
        let mut dot = 0.0;
        for i in 0..va.len() {
            na += va[i] * va[i];
            nb += vb[i] * vb[i];
            dot += va[i] * vb[i];
        }
        (na.sqrt(), nb.sqrt(), dot)
    }

    /// Reverse pass from a scalar node. Returns per-node gradients.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Arr>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Arr {
            shape: vec![1],
            data: vec![1.0],
        });

        for idx in (0..self.nodes.len()).rev() {
            let g = match &grads[idx] {
                Some(g) => g.clone(),
                None => continue,
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                    let n = self.value(*b).cols();
                    let mut da = Arr::zeros(&self.value(*a).shape.clone());
                    ops::matmul_nt_kernel(&g.data, &self.value(*b).data, m, n, k, &mut da.data);
                    let mut db = Arr::zeros(&self.value(*b).shape.clone());
                    matmul_tn(&self.value(*a).data, &g.data, m, k, n, &mut db.data);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatmulNT(a, b) => {
                    let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                    let n = self.value(*b).rows();
                    let mut da = Arr::zeros(&self.value(*a).shape.clone());
                    ops::matmul_kernel(&g.data, &self.value(*b).data, m, n, k, &mut da.data);
                    let mut db = Arr::zeros(&self.value(*b).shape.clone());
                    matmul_tn(&g.data, &self.value(*a).data, m, n, k, &mut db.data);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, reshape_like(&g, &self.value(*a).shape));
                    accumulate(&mut grads, *b, reshape_like(&g, &self.value(*b).shape));
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, reshape_like(&g, &self.value(*a).shape));
                    let mut nb = g.clone();
                    for v in &mut nb.data {
                        *v = -*v;
                    }
                    accumulate(&mut grads, *b, reshape_like(&nb, &self.value(*b).shape));
                }
                Op::Mul(a, b) => {
                    let mut da = g.clone();
                    for (v, &o) in da.data.iter_mut().zip(&self.value(*b).data) {
                        *v *= o;
                    }
                    let mut db = g.clone();
                    for (v, &o) in db.data.iter_mut().zip(&self.value(*a).data) {
                        *v *= o;
                    }
                    accumulate(&mut grads, *a, reshape_like(&da, &self.value(*a).shape));
                    accumulate(&mut grads, *b, reshape_like(&db, &self.value(*b).shape));
                }
                Op::Scale(a, c) => {
                    let mut da = g.clone();
                    for v in &mut da.data {
                        *v *= c;
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::AddRow(x, v) => {
                    let cols = self.value(*x).cols();
                    let rows = self.value(*x).rows();
                    let mut dv = Arr::zeros(&self.value(*v).shape.clone());
                    for i in 0..rows {
                        for j in 0..cols {
                            dv.data[j] += g.data[i * cols + j];
                        }
                    }
                    accumulate(&mut grads, *x, g.clone());
                    accumulate(&mut grads, *v, dv);
                }
                Op::MulRow(x, v) => {
                    let cols = self.value(*x).cols();
                    let rows = self.value(*x).rows();
                    let mut dx = g.clone();
                    let mut dv = Arr::zeros(&self.value(*v).shape.clone());
                    for i in 0..rows {
                        for j in 0..cols {
                            dx.data[i * cols + j] *= self.value(*v).data[j];
                            dv.data[j] += g.data[i * cols + j] * self.value(*x).data[i * cols + j];
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *v, dv);
                }
                Op::Gelu(x) => {
                    let mut dx = g.clone();
                    for (v, &inp) in dx.data.iter_mut().zip(&self.value(*x).data) {
                        *v *= ops::gelu_grad_scalar(inp);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::LayerNorm(x, eps) => {
                    let (rows, cols) = (self.value(*x).rows(), self.value(*x).cols());
                    let y = &node.value;
                    let mut dx = Arr::zeros(&self.value(*x).shape.clone());
                    for i in 0..rows {
                        let xr = &self.value(*x).data[i * cols..(i + 1) * cols];
                        let yr = &y.data[i * cols..(i + 1) * cols];
                        let gr = &g.data[i * cols..(i + 1) * cols];
                        let mean: f64 = xr.iter().sum::<f64>() / cols as f64;
                        let var: f64 =
                            xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gmean: f64 = gr.iter().sum::<f64>() / cols as f64;
                        let gymean: f64 =
                            gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<f64>() / cols as f64;
                        for j in 0..cols {
                            dx.data[i * cols + j] = inv * (gr[j] - gmean - yr[j] * gymean);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::SoftmaxRows(x) => {
                    let (rows, cols) = (self.value(*x).rows(), self.value(*x).cols());
                    let y = &node.value;
                    let mut dx = Arr::zeros(&self.value(*x).shape.clone());
                    for i in 0..rows {
                        let yr = &y.data[i * cols..(i + 1) * cols];
                        let gr = &g.data[i * cols..(i + 1) * cols];
                        let dot: f64 = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..cols {
                            dx.data[i * cols + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatRows(parts) => {
                    let cols = node.value.cols();
                    let mut at = 0;
                    for &p in parts {
                        let pr = self.value(p).rows();
                        let mut dp = Arr::zeros(&self.value(p).shape.clone());
                        dp.data
                            .copy_from_slice(&g.data[at * cols..(at + pr) * cols]);
                        accumulate(&mut grads, p, dp);
                        at += pr;
                    }
                }
                Op::SliceRows(x, start, len) => {
                    let cols = self.value(*x).cols();
                    let mut dx = Arr::zeros(&self.value(*x).shape.clone());
                    dx.data[start * cols..(start + len) * cols].copy_from_slice(&g.data);
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let rows = node.value.rows();
                    let cols = node.value.cols();
                    let mut at = 0;
                    for &p in parts {
                        let pc = self.value(p).cols();
                        let mut dp = Arr::zeros(&self.value(p).shape.clone());
                        for i in 0..rows {
                            for j in 0..pc {
                                dp.data[i * pc + j] = g.data[i * cols + at + j];
                            }
                        }
                        accumulate(&mut grads, p, dp);
                        at += pc;
                    }
                }
                Op::SliceCols(x, start, len) => {
                    let (rows, cols) = (self.value(*x).rows(), self.value(*x).cols());
                    let mut dx = Arr::zeros(&self.value(*x).shape.clone());
                    for i in 0..rows {
                        for j in 0..*len {
                            dx.data[i * cols + start + j] = g.data[i * len + j];
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::MeanRows(x) => {
                    let (rows, cols) = (self.value(*x).rows(), self.value(*x).cols());
                    let mut dx = Arr::zeros(&self.value(*x).shape.clone());
                    for i in 0..rows {
                        for j in 0..cols {
                            dx.data[i * cols + j] = g.data[j] / rows as f64;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::SumAll(x) => {
                    let mut dx = Arr::zeros(&self.value(*x).shape.clone());
                    for v in &mut dx.data {
                        *v = g.data[0];
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Reshape(x) => {
                    accumulate(&mut grads, *x, reshape_like(&g, &self.value(*x).shape));
                }
                Op::Patchify(x, dims) => {
                    let mut dx = Arr::zeros(&self.value(*x).shape.clone());
                    let pl = dims.patch_len();
                    for t in 0..dims.tokens() {
                        for q in 0..pl {
                            dx.data[dims.pixel_index(t, q)] = g.data[t * pl + q];
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Unpatchify(x, dims) => {
                    let mut dx = Arr::zeros(&self.value(*x).shape.clone());
                    let pl = dims.patch_len();
                    for t in 0..dims.tokens() {
                        for q in 0..pl {
                            dx.data[t * pl + q] = g.data[dims.pixel_index(t, q)];
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Cosine(a, b) => {
                    let (na, nb, dot) = self.cosine_parts(*a, *b);
                    let c = dot / (na * nb);
                    let gc = g.data[0];
                    let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                    let mut da = Arr::zeros(&self.value(*a).shape.clone());
                    let mut db = Arr::zeros(&self.value(*b).shape.clone());
                    for i in 0..va.len() {
                        da.data[i] = gc * (vb[i] / (na * nb) - c * va[i] / (na * na));
                        db.data[i] = gc * (va[i] / (na * nb) - c * vb[i] / (nb * nb));
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
            }
        }
        Gradients { grads }
    }
}

/// C[k×n] = A[m×k]ᵀ · B[m×n], f64 only (backward helper).
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = 0.0;
    }
    for i in 0..m {
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[kk * n + j] += aik * b[i * n + j];
            }
        }
    }
}

fn reshape_like(g: &Arr, shape: &[usize]) -> Arr {
    Arr {
        shape: shape.to_vec(),
        data: g.data.clone(),
    }
}

fn accumulate(grads: &mut [Option<Arr>], v: Var, add: Arr) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.data.iter_mut().zip(&add.data) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(add),
    }
}

/// Caches one leaf per parameter name so weights shared across positions or
/// layers accumulate their gradients on a single node.
pub(crate) struct ParamBinding<'p> {
    pub params: &'p crate::params::ParamSet,
    vars: std::collections::HashMap<String, Var>,
}

impl<'p> ParamBinding<'p> {
    pub fn new(params: &'p crate::params::ParamSet) -> Self {
        Self {
            params,
            vars: std::collections::HashMap::new(),
        }
    }

    pub fn var(&mut self, tape: &mut Tape, name: &str) -> Var {
        if let Some(&v) = self.vars.get(name) {
            return v;
        }
        let v = tape.leaf(self.params.tensor(name));
        self.vars.insert(name.to_string(), v);
        v
    }

    /// Gradient tensors for the named parameters (zeros when unreachable).
    pub fn grad_map(
        &self,
        grads: &Gradients,
        names: &[String],
    ) -> std::collections::BTreeMap<String, Tensor> {
        names
            .iter()
            .map(|n| {
                let shape = self.params.tensor(n).shape().to_vec();
                let g = match self.vars.get(n) {
                    Some(&v) => grads.tensor_or_zeros(v, &shape),
                    None => Tensor::zeros(&shape),
                };
                (n.clone(), g)
            })
            .collect()
    }

    /// Whether a parameter was referenced while building the graph.
    pub fn bound(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }
}

pub(crate) struct Gradients {
    grads: Vec<Option<Arr>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Arr> {
        self.grads[v.0].as_ref()
    }

    /// Gradient as an f32 tensor; zeros if the node is unreachable from the loss.
    pub fn tensor_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        match self.get(v) {
            Some(a) => a.to_tensor(),
            None => Tensor::zeros(shape),
        }
    }
}
