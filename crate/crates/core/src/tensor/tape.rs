//! Define-by-run tape: every forward op records itself, and `backward`
//! walks the nodes once in reverse creation order (which is a reverse
//! topological order by construction).

use super::{ParamStore, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Debug)]
enum Op {
    Leaf { slot: Option<usize> },
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    AddBias { x: VarId, bias: VarId },
    Scale { x: VarId, c: f32 },
    AddScalar { x: VarId },
    Matmul { a: VarId, b: VarId },
    Transpose2d { x: VarId },
    Reshape { x: VarId },
    ConcatCols { parts: Vec<VarId> },
    SliceCols { x: VarId, start: usize, len: usize },
    SoftmaxRows { x: VarId },
    LayerNormRows { x: VarId, gamma: VarId, beta: VarId, eps: f32 },
    Gelu { x: VarId },
    Relu { x: VarId },
    Abs { x: VarId },
    Clamp01 { x: VarId },
    MeanAll { x: VarId },
    SumAll { x: VarId },
    Conv2d {
        x: VarId,
        w: VarId,
        bias: VarId,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: VarId,
        w: VarId,
        bias: VarId,
        stride: usize,
        kernel: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded operation graph for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

// Plain matmul kernels over row-major slices.

fn mm_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aval) in arow.iter().enumerate() {
            if aval == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aval * bv;
            }
        }
    }
}

/// out[m, n] += A[m, k] * B^T with B stored as [n, k].
fn mm_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot: f32 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * n + j] += dot;
        }
    }
}

/// out[k, n] += A^T * B with A stored as [m, k], B as [m, n].
fn mm_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &aval) in arow.iter().enumerate() {
            if aval == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aval * bv;
            }
        }
    }
}

fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfolds [cin, h, w] into [cin*kh*kw, ho*wo] patch columns.
fn im2col(
    x: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f32> {
    let ho = conv_out_size(h, kh, stride, pad);
    let wo = conv_out_size(w, kw, stride, pad);
    let mut cols = vec![0.0f32; cin * kh * kw * ho * wo];
    let cols_w = ho * wo;
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * cols_w;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = (c * h + iy as usize) * w;
                    let dst = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            cols[dst + ox] = x[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Transpose of im2col: folds patch-column gradients back onto the image.
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f32> {
    let ho = conv_out_size(h, kh, stride, pad);
    let wo = conv_out_size(w, kw, stride, pad);
    let cols_w = ho * wo;
    let mut x = vec![0.0f32; cin * h * w];
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * cols_w;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = (c * h + iy as usize) * w;
                    let src = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[dst + ix as usize] += cols[src + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

fn gelu_scalar(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad_scalar(x: f32) -> f32 {
    const C: f32 = 0.797_884_6;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    fn push(&mut self, value: Tensor, op: Op) -> VarId {
        debug_assert!(value.is_finite(), "non-finite values after {op:?}");
        self.nodes.push(Node { value, op });
        VarId(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, value: Tensor) -> VarId {
        self.push(value, Op::Leaf { slot: None })
    }

    /// Parameter leaf bound to a gradient slot (its index in the store).
    pub fn param(&mut self, store: &ParamStore, slot: usize) -> VarId {
        self.push(store.get(slot).clone(), Op::Leaf { slot: Some(slot) })
    }

    /// Binds every parameter of the store, in order; the returned ids are
    /// indexed by slot.
    pub fn params(&mut self, store: &ParamStore) -> Vec<VarId> {
        (0..store.len()).map(|s| self.param(store, s)).collect()
    }

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: VarId,
        b: VarId,
    ) -> Result<(Vec<usize>, Vec<f32>, Vec<f32>), TensorError> {
        let ta = self.value(a);
        let tb = self.value(b);
        if ta.shape != tb.shape {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        Ok((ta.shape.clone(), ta.data.clone(), tb.data.clone()))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        let (shape, da, db) = self.binary_same_shape("add", a, b)?;
        let data = da.iter().zip(&db).map(|(x, y)| x + y).collect();
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        let (shape, da, db) = self.binary_same_shape("sub", a, b)?;
        let data = da.iter().zip(&db).map(|(x, y)| x - y).collect();
        Ok(self.push(Tensor { shape, data }, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        let (shape, da, db) = self.binary_same_shape("mul", a, b)?;
        let data = da.iter().zip(&db).map(|(x, y)| x * y).collect();
        Ok(self.push(Tensor { shape, data }, Op::Mul(a, b)))
    }

    /// Adds a row vector bias to every row of a 2D tensor.
    pub fn add_bias(&mut self, x: VarId, bias: VarId) -> Result<VarId, TensorError> {
        let tx = self.value(x);
        let tb = self.value(bias);
        if tx.shape.len() != 2 || tb.shape != [tx.shape[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: tx.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let (rows, cols) = (tx.shape[0], tx.shape[1]);
        let mut data = tx.data.clone();
        let bias_data = tb.data.clone();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += bias_data[c];
            }
        }
        let shape = vec![rows, cols];
        Ok(self.push(Tensor { shape, data }, Op::AddBias { x, bias }))
    }

    pub fn scale(&mut self, x: VarId, c: f32) -> VarId {
        let tx = self.value(x);
        let t = Tensor {
            shape: tx.shape.clone(),
            data: tx.data.iter().map(|v| v * c).collect(),
        };
        self.push(t, Op::Scale { x, c })
    }

    pub fn add_scalar(&mut self, x: VarId, c: f32) -> VarId {
        let tx = self.value(x);
        let t = Tensor {
            shape: tx.shape.clone(),
            data: tx.data.iter().map(|v| v + c).collect(),
        };
        self.push(t, Op::AddScalar { x })
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        let ta = self.value(a);
        let tb = self.value(b);
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut data = vec![0.0f32; m * n];
        mm_nn(&ta.data, &tb.data, m, k, n, &mut data);
        let shape = vec![m, n];
        Ok(self.push(Tensor { shape, data }, Op::Matmul { a, b }))
    }

    pub fn transpose2d(&mut self, x: VarId) -> Result<VarId, TensorError> {
        let tx = self.value(x);
        if tx.shape.len() != 2 {
            return Err(TensorError::Invalid {
                op: "transpose2d",
                msg: format!("expected 2D tensor, got {:?}", tx.shape),
            });
        }
        let (m, n) = (tx.shape[0], tx.shape[1]);
        let mut data = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = tx.data[i * n + j];
            }
        }
        let shape = vec![n, m];
        Ok(self.push(Tensor { shape, data }, Op::Transpose2d { x }))
    }

    pub fn reshape(&mut self, x: VarId, shape: &[usize]) -> Result<VarId, TensorError> {
        let tx = self.value(x);
        let expected: usize = shape.iter().product();
        if expected != tx.data.len() {
            return Err(TensorError::BadLength {
                op: "reshape",
                shape: shape.to_vec(),
                expected,
                got: tx.data.len(),
            });
        }
        let t = Tensor {
            shape: shape.to_vec(),
            data: tx.data.clone(),
        };
        Ok(self.push(t, Op::Reshape { x }))
    }

    /// Concatenates 2D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[VarId]) -> Result<VarId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat_cols",
                msg: "no parts".into(),
            });
        }
        let rows = self.value(parts[0]).shape[0];
        let mut total_cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.shape.len() != 2 || t.shape[0] != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
            total_cols += t.shape[1];
        }
        let mut data = vec![0.0f32; rows * total_cols];
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            let cols = t.shape[1];
            for r in 0..rows {
                data[r * total_cols + offset..r * total_cols + offset + cols]
                    .copy_from_slice(&t.data[r * cols..(r + 1) * cols]);
            }
            offset += cols;
        }
        let shape = vec![rows, total_cols];
        Ok(self.push(
            Tensor { shape, data },
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn slice_cols(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId, TensorError> {
        let tx = self.value(x);
        if tx.shape.len() != 2 || start + len > tx.shape[1] {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                msg: format!("range {start}..{} of shape {:?}", start + len, tx.shape),
            });
        }
        let (rows, cols) = (tx.shape[0], tx.shape[1]);
        let mut data = vec![0.0f32; rows * len];
        for r in 0..rows {
            data[r * len..(r + 1) * len]
                .copy_from_slice(&tx.data[r * cols + start..r * cols + start + len]);
        }
        let shape = vec![rows, len];
        Ok(self.push(Tensor { shape, data }, Op::SliceCols { x, start, len }))
    }

    /// Softmax over the last axis of a 2D tensor.
    pub fn softmax_rows(&mut self, x: VarId) -> Result<VarId, TensorError> {
        let tx = self.value(x);
        if tx.shape.len() != 2 {
            return Err(TensorError::Invalid {
                op: "softmax_rows",
                msg: format!("expected 2D tensor, got {:?}", tx.shape),
            });
        }
        let (rows, cols) = (tx.shape[0], tx.shape[1]);
        let mut data = tx.data.clone();
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let shape = vec![rows, cols];
        Ok(self.push(Tensor { shape, data }, Op::SoftmaxRows { x }))
    }

    /// Layer normalization over the last axis with learned gamma/beta.
    pub fn layer_norm_rows(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        eps: f32,
    ) -> Result<VarId, TensorError> {
        let tx = self.value(x);
        let tg = self.value(gamma);
        let tb = self.value(beta);
        if tx.shape.len() != 2 || tg.shape != [tx.shape[1]] || tb.shape != [tx.shape[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm_rows",
                lhs: tx.shape.clone(),
                rhs: tg.shape.clone(),
            });
        }
        let (rows, cols) = (tx.shape[0], tx.shape[1]);
        let g = tg.data.clone();
        let b = tb.data.clone();
        let xd = tx.data.clone();
        let mut data = vec![0.0f32; rows * cols];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f32>() / cols as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..cols {
                data[r * cols + c] = (row[c] - mean) * inv * g[c] + b[c];
            }
        }
        let shape = vec![rows, cols];
        Ok(self.push(
            Tensor { shape, data },
            Op::LayerNormRows { x, gamma, beta, eps },
        ))
    }

    pub fn gelu(&mut self, x: VarId) -> VarId {
        let tx = self.value(x);
        let t = Tensor {
            shape: tx.shape.clone(),
            data: tx.data.iter().map(|&v| gelu_scalar(v)).collect(),
        };
        self.push(t, Op::Gelu { x })
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let tx = self.value(x);
        let t = Tensor {
            shape: tx.shape.clone(),
            data: tx.data.iter().map(|&v| v.max(0.0)).collect(),
        };
        self.push(t, Op::Relu { x })
    }

    pub fn abs(&mut self, x: VarId) -> VarId {
        let tx = self.value(x);
        let t = Tensor {
            shape: tx.shape.clone(),
            data: tx.data.iter().map(|&v| v.abs()).collect(),
        };
        self.push(t, Op::Abs { x })
    }

    /// Clamp to [0, 1]; the gradient is the exact subgradient (zero where
    /// the input is outside the range).
    pub fn clamp01(&mut self, x: VarId) -> VarId {
        let tx = self.value(x);
        let t = Tensor {
            shape: tx.shape.clone(),
            data: tx.data.iter().map(|&v| v.clamp(0.0, 1.0)).collect(),
        };
        self.push(t, Op::Clamp01 { x })
    }

    pub fn mean_all(&mut self, x: VarId) -> VarId {
        let tx = self.value(x);
        let mean = tx.data.iter().map(|&v| v as f64).sum::<f64>() / tx.data.len().max(1) as f64;
        let t = Tensor::scalar(mean as f32);
        self.push(t, Op::MeanAll { x })
    }

    pub fn sum_all(&mut self, x: VarId) -> VarId {
        let tx = self.value(x);
        let sum = tx.data.iter().map(|&v| v as f64).sum::<f64>();
        let t = Tensor::scalar(sum as f32);
        self.push(t, Op::SumAll { x })
    }

    /// 2D convolution: x [cin, h, w], w [cout, cin, kh, kw], bias [cout].
    pub fn conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        bias: VarId,
        stride: usize,
        pad: usize,
    ) -> Result<VarId, TensorError> {
        let tx = self.value(x);
        let tw = self.value(w);
        let tb = self.value(bias);
        if tx.shape.len() != 3 || tw.shape.len() != 4 || tx.shape[0] != tw.shape[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: tx.shape.clone(),
                rhs: tw.shape.clone(),
            });
        }
        let (cin, h, wd) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        let (cout, kh, kw) = (tw.shape[0], tw.shape[2], tw.shape[3]);
        if tb.shape != [cout] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: tw.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let ho = conv_out_size(h, kh, stride, pad);
        let wo = conv_out_size(wd, kw, stride, pad);
        let cols = im2col(&tx.data, cin, h, wd, kh, kw, stride, pad);
        let mut data = vec![0.0f32; cout * ho * wo];
        mm_nn(&tw.data, &cols, cout, cin * kh * kw, ho * wo, &mut data);
        for c in 0..cout {
            let bv = tb.data[c];
            for v in &mut data[c * ho * wo..(c + 1) * ho * wo] {
                *v += bv;
            }
        }
        let shape = vec![cout, ho, wo];
        Ok(self.push(
            Tensor { shape, data },
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
            },
        ))
    }

    /// Transposed 2D convolution (upsampling): x [cin, h, w],
    /// w [cin, cout, k, k], bias [cout]; output [(h-1)*stride + k].
    pub fn conv_transpose2d(
        &mut self,
        x: VarId,
        w: VarId,
        bias: VarId,
        stride: usize,
    ) -> Result<VarId, TensorError> {
        let tx = self.value(x);
        let tw = self.value(w);
        let tb = self.value(bias);
        if tx.shape.len() != 3 || tw.shape.len() != 4 || tx.shape[0] != tw.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2d",
                lhs: tx.shape.clone(),
                rhs: tw.shape.clone(),
            });
        }
        let (cin, h, wd) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        let (cout, kh, kw) = (tw.shape[1], tw.shape[2], tw.shape[3]);
        if kh != kw {
            return Err(TensorError::Invalid {
                op: "conv_transpose2d",
                msg: format!("kernel must be square, got {kh}x{kw}"),
            });
        }
        if tb.shape != [cout] {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2d",
                lhs: tw.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let k = kh;
        let ho = (h - 1) * stride + k;
        let wo = (wd - 1) * stride + k;
        // M[hw, cout*k*k] = X2[hw, cin] . Wmat[cin, cout*k*k]
        let hw = h * wd;
        let mut x2 = vec![0.0f32; hw * cin];
        for c in 0..cin {
            for p in 0..hw {
                x2[p * cin + c] = tx.data[c * hw + p];
            }
        }
        let mut m = vec![0.0f32; hw * cout * k * k];
        mm_nn(&x2, &tw.data, hw, cin, cout * k * k, &mut m);
        let mut data = vec![0.0f32; cout * ho * wo];
        for c in 0..cout {
            let bv = tb.data[c];
            for v in &mut data[c * ho * wo..(c + 1) * ho * wo] {
                *v += bv;
            }
        }
        for iy in 0..h {
            for ix in 0..wd {
                let p = iy * wd + ix;
                let mrow = &m[p * cout * k * k..(p + 1) * cout * k * k];
                for c in 0..cout {
                    for ky in 0..k {
                        let oy = iy * stride + ky;
                        let base = (c * ho + oy) * wo + ix * stride;
                        for kx in 0..k {
                            data[base + kx] += mrow[(c * k + ky) * k + kx];
                        }
                    }
                }
            }
        }
        let shape = vec![cout, ho, wo];
        Ok(self.push(
            Tensor { shape, data },
            Op::ConvTranspose2d {
                x,
                w,
                bias,
                stride,
                kernel: k,
            },
        ))
    }

    /// Reverse pass from a scalar loss. Returns one gradient per store
    /// slot (None for parameters that never entered the graph).
    pub fn backward(
        &self,
        loss: VarId,
        slot_count: usize,
    ) -> Result<Vec<Option<Tensor>>, TensorError> {
        let loss_shape = &self.nodes[loss.0].value.shape;
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: loss_shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut slot_grads: Vec<Option<Tensor>> = (0..slot_count).map(|_| None).collect();

        macro_rules! grad_buf {
            ($id:expr) => {
                grads[$id.0].get_or_insert_with(|| vec![0.0; self.nodes[$id.0].value.len()])
            };
        }

        for idx in (0..self.nodes.len()).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf { slot } => {
                    if let Some(slot) = *slot {
                        let entry = slot_grads[slot].get_or_insert_with(|| Tensor {
                            shape: node.value.shape.clone(),
                            data: vec![0.0; node.value.len()],
                        });
                        for (g, &v) in entry.data.iter_mut().zip(&gout) {
                            *g += v;
                        }
                    }
                }
                Op::Add(a, b) => {
                    for (g, &v) in grad_buf!(a).iter_mut().zip(&gout) {
                        *g += v;
                    }
                    for (g, &v) in grad_buf!(b).iter_mut().zip(&gout) {
                        *g += v;
                    }
                }
                Op::Sub(a, b) => {
                    for (g, &v) in grad_buf!(a).iter_mut().zip(&gout) {
                        *g += v;
                    }
                    for (g, &v) in grad_buf!(b).iter_mut().zip(&gout) {
                        *g -= v;
                    }
                }
                Op::Mul(a, b) => {
                    let da = self.nodes[a.0].value.data.clone();
                    let db = self.nodes[b.0].value.data.clone();
                    for ((g, &v), &other) in grad_buf!(a).iter_mut().zip(&gout).zip(&db) {
                        *g += v * other;
                    }
                    for ((g, &v), &other) in grad_buf!(b).iter_mut().zip(&gout).zip(&da) {
                        *g += v * other;
                    }
                }
                Op::AddBias { x, bias } => {
                    let cols = self.nodes[bias.0].value.len();
                    for (g, &v) in grad_buf!(x).iter_mut().zip(&gout) {
                        *g += v;
                    }
                    let gb = grad_buf!(bias);
                    for (i, &v) in gout.iter().enumerate() {
                        gb[i % cols] += v;
                    }
                }
                Op::Scale { x, c } => {
                    let c = *c;
                    for (g, &v) in grad_buf!(x).iter_mut().zip(&gout) {
                        *g += v * c;
                    }
                }
                Op::AddScalar { x } => {
                    for (g, &v) in grad_buf!(x).iter_mut().zip(&gout) {
                        *g += v;
                    }
                }
                Op::Matmul { a, b } => {
                    let ta = &self.nodes[a.0].value;
                    let tb = &self.nodes[b.0].value;
                    let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                    let (adata, bdata) = (ta.data.clone(), tb.data.clone());
                    mm_nt(&gout, &bdata, m, n, k, grad_buf!(a));
                    mm_tn(&adata, &gout, m, k, n, grad_buf!(b));
                }
                Op::Transpose2d { x } => {
                    let shape = &node.value.shape; // [n, m]
                    let (n, m) = (shape[0], shape[1]);
                    let gx = grad_buf!(x);
                    for i in 0..n {
                        for j in 0..m {
                            gx[j * n + i] += gout[i * m + j];
                        }
                    }
                }
                Op::Reshape { x } => {
                    for (g, &v) in grad_buf!(x).iter_mut().zip(&gout) {
                        *g += v;
                    }
                }
                Op::ConcatCols { parts } => {
                    let rows = node.value.shape[0];
                    let total = node.value.shape[1];
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.nodes[p.0].value.shape[1];
                        let gp = grad_buf!(p);
                        for r in 0..rows {
                            for c in 0..cols {
                                gp[r * cols + c] += gout[r * total + offset + c];
                            }
                        }
                        offset += cols;
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let cols = self.nodes[x.0].value.shape[1];
                    let rows = node.value.shape[0];
                    let gx = grad_buf!(x);
                    for r in 0..rows {
                        for c in 0..*len {
                            gx[r * cols + start + c] += gout[r * len + c];
                        }
                    }
                }
                Op::SoftmaxRows { x } => {
                    let y = &node.value;
                    let (rows, cols) = (y.shape[0], y.shape[1]);
                    let ydata = y.data.clone();
                    let gx = grad_buf!(x);
                    for r in 0..rows {
                        let yrow = &ydata[r * cols..(r + 1) * cols];
                        let grow = &gout[r * cols..(r + 1) * cols];
                        let dot: f32 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            gx[r * cols + c] += yrow[c] * (grow[c] - dot);
                        }
                    }
                }
                Op::LayerNormRows { x, gamma, beta, eps } => {
                    let tx = &self.nodes[x.0].value;
                    let tg = &self.nodes[gamma.0].value;
                    let (rows, cols) = (tx.shape[0], tx.shape[1]);
                    let xd = tx.data.clone();
                    let gd = tg.data.clone();
                    let eps = *eps;
                    // Per-row recompute of mean/var.
                    let mut gx_acc = vec![0.0f32; rows * cols];
                    let mut ggamma = vec![0.0f32; cols];
                    let mut gbeta = vec![0.0f32; cols];
                    for r in 0..rows {
                        let row = &xd[r * cols..(r + 1) * cols];
                        let grow = &gout[r * cols..(r + 1) * cols];
                        let mean = row.iter().sum::<f32>() / cols as f32;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
                        let inv = 1.0 / (var + eps).sqrt();
                        let mut mean_g = 0.0f32;
                        let mut mean_gx = 0.0f32;
                        for c in 0..cols {
                            let xhat = (row[c] - mean) * inv;
                            let g = grow[c] * gd[c];
                            mean_g += g;
                            mean_gx += g * xhat;
                            ggamma[c] += grow[c] * xhat;
                            gbeta[c] += grow[c];
                        }
                        mean_g /= cols as f32;
                        mean_gx /= cols as f32;
                        for c in 0..cols {
                            let xhat = (row[c] - mean) * inv;
                            let g = grow[c] * gd[c];
                            gx_acc[r * cols + c] = inv * (g - mean_g - xhat * mean_gx);
                        }
                    }
                    for (g, v) in grad_buf!(x).iter_mut().zip(gx_acc) {
                        *g += v;
                    }
                    for (g, v) in grad_buf!(gamma).iter_mut().zip(ggamma) {
                        *g += v;
                    }
                    for (g, v) in grad_buf!(beta).iter_mut().zip(gbeta) {
                        *g += v;
                    }
                }
                Op::Gelu { x } => {
                    let xd = self.nodes[x.0].value.data.clone();
                    for ((g, &v), &xv) in grad_buf!(x).iter_mut().zip(&gout).zip(&xd) {
                        *g += v * gelu_grad_scalar(xv);
                    }
                }
                Op::Relu { x } => {
                    let xd = self.nodes[x.0].value.data.clone();
                    for ((g, &v), &xv) in grad_buf!(x).iter_mut().zip(&gout).zip(&xd) {
                        if xv > 0.0 {
                            *g += v;
                        }
                    }
                }
                Op::Abs { x } => {
                    let xd = self.nodes[x.0].value.data.clone();
                    for ((g, &v), &xv) in grad_buf!(x).iter_mut().zip(&gout).zip(&xd) {
                        *g += v * if xv >= 0.0 { 1.0 } else { -1.0 };
                    }
                }
                Op::Clamp01 { x } => {
                    let xd = self.nodes[x.0].value.data.clone();
                    for ((g, &v), &xv) in grad_buf!(x).iter_mut().zip(&gout).zip(&xd) {
                        if (0.0..=1.0).contains(&xv) {
                            *g += v;
                        }
                    }
                }
                Op::MeanAll { x } => {
                    let n = self.nodes[x.0].value.len() as f32;
                    let v = gout[0] / n;
                    for g in grad_buf!(x).iter_mut() {
                        *g += v;
                    }
                }
                Op::SumAll { x } => {
                    let v = gout[0];
                    for g in grad_buf!(x).iter_mut() {
                        *g += v;
                    }
                }
                Op::Conv2d {
                    x,
                    w,
                    bias,
                    stride,
                    pad,
                } => {
                    let tx = &self.nodes[x.0].value;
                    let tw = &self.nodes[w.0].value;
                    let (cin, h, wd) = (tx.shape[0], tx.shape[1], tx.shape[2]);
                    let (cout, kh, kw) = (tw.shape[0], tw.shape[2], tw.shape[3]);
                    let ho = conv_out_size(h, kh, *stride, *pad);
                    let wo = conv_out_size(wd, kw, *stride, *pad);
                    let cols = im2col(&tx.data, cin, h, wd, kh, kw, *stride, *pad);
                    // dW = dOut . cols^T
                    mm_nt(&gout, &cols, cout, ho * wo, cin * kh * kw, grad_buf!(w));
                    // db = row sums of dOut
                    {
                        let gb = grad_buf!(bias);
                        for c in 0..cout {
                            gb[c] += gout[c * ho * wo..(c + 1) * ho * wo].iter().sum::<f32>();
                        }
                    }
                    // dX = col2im(W^T . dOut)
                    let wdata = tw.data.clone();
                    let mut dcols = vec![0.0f32; cin * kh * kw * ho * wo];
                    mm_tn(&wdata, &gout, cout, cin * kh * kw, ho * wo, &mut dcols);
                    let dx = col2im(&dcols, cin, h, wd, kh, kw, *stride, *pad);
                    for (g, v) in grad_buf!(x).iter_mut().zip(dx) {
                        *g += v;
                    }
                }
                Op::ConvTranspose2d {
                    x,
                    w,
                    bias,
                    stride,
                    kernel,
                } => {
                    let tx = &self.nodes[x.0].value;
                    let tw = &self.nodes[w.0].value;
                    let (cin, h, wd) = (tx.shape[0], tx.shape[1], tx.shape[2]);
                    let cout = tw.shape[1];
                    let k = *kernel;
                    let (ho, wo) = (node.value.shape[1], node.value.shape[2]);
                    let hw = h * wd;
                    // Gather dM from the scattered output positions.
                    let mut dm = vec![0.0f32; hw * cout * k * k];
                    for iy in 0..h {
                        for ix in 0..wd {
                            let p = iy * wd + ix;
                            let mrow = &mut dm[p * cout * k * k..(p + 1) * cout * k * k];
                            for c in 0..cout {
                                for ky in 0..k {
                                    let oy = iy * stride + ky;
                                    let base = (c * ho + oy) * wo + ix * stride;
                                    for kx in 0..k {
                                        mrow[(c * k + ky) * k + kx] += gout[base + kx];
                                    }
                                }
                            }
                        }
                    }
                    // db: sum over output spatial per channel.
                    {
                        let gb = grad_buf!(bias);
                        for c in 0..cout {
                            gb[c] += gout[c * ho * wo..(c + 1) * ho * wo].iter().sum::<f32>();
                        }
                    }
                    // dX2 = dM . Wmat^T, then transpose into [cin, h, w].
                    let wdata = tw.data.clone();
                    let mut dx2 = vec![0.0f32; hw * cin];
                    mm_nt(&dm, &wdata, hw, cout * k * k, cin, &mut dx2);
                    {
                        let gx = grad_buf!(x);
                        for c in 0..cin {
                            for p in 0..hw {
                                gx[c * hw + p] += dx2[p * cin + c];
                            }
                        }
                    }
                    // dWmat = X2^T . dM.
                    let mut x2 = vec![0.0f32; hw * cin];
                    for c in 0..cin {
                        for p in 0..hw {
                            x2[p * cin + c] = tx.data[c * hw + p];
                        }
                    }
                    mm_tn(&x2, &dm, hw, cin, cout * k * k, grad_buf!(w));
                }
            }
        }
        Ok(slot_grads)
    }
}
