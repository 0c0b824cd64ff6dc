//! Wengert tape: eager forward evaluation with recorded ops, replayed in
//! reverse for gradients.

use super::linalg::{matmul, transpose};
use super::tensor::Tensor;
use super::NumericsError;

/// Arena index of a tensor buffer on the tape.
pub type BufId = usize;

const NORM_EPS: f64 = 1e-12;
const LAYERNORM_EPS: f64 = 1e-5;

struct Buf {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
}

impl Buf {
    fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 0,
            1 => self.shape[0],
            _ => self.shape[self.shape.len() - 1],
        }
    }
}

#[derive(Clone)]
enum Op {
    /// out = A @ B, A: [m,k], B: [k,n]
    Matmul { a: BufId, b: BufId, out: BufId, m: usize, k: usize, n: usize },
    Transpose { x: BufId, out: BufId, rows: usize, cols: usize },
    /// Strided dilated convolution over [t_in, c_in] with kernel [k, c_in, c_out].
    Conv1d {
        x: BufId,
        w: BufId,
        out: BufId,
        t_in: usize,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
    },
    Add { a: BufId, b: BufId, out: BufId },
    /// out[r, :] = x[r, :] + bias
    AddBias { x: BufId, bias: BufId, out: BufId, rows: usize, cols: usize },
    Mul { a: BufId, b: BufId, out: BufId },
    /// out = mul * x + add (elementwise with scalar constants)
    Affine { x: BufId, out: BufId, mul: f64 },
    Relu { x: BufId, out: BufId },
    Clamp { x: BufId, out: BufId, lo: f64, hi: f64 },
    SoftmaxRows { x: BufId, out: BufId, rows: usize, cols: usize },
    Log { x: BufId, out: BufId },
    Exp { x: BufId, out: BufId },
    Sigmoid { x: BufId, out: BufId },
    Sum { x: BufId, out: BufId },
    Mean { x: BufId, out: BufId },
    /// out[c] = mean over rows of x[:, c]
    RowMean { x: BufId, out: BufId, rows: usize, cols: usize },
    L2NormalizeRows { x: BufId, out: BufId, rows: usize, cols: usize },
    LayerNormRows {
        x: BufId,
        gain: BufId,
        bias: BufId,
        out: BufId,
        rows: usize,
        cols: usize,
    },
    ConcatRows { xs: Vec<BufId>, out: BufId, cols: usize },
    SliceRows { x: BufId, out: BufId, start: usize, len: usize, cols: usize },
    ConcatCols { xs: Vec<BufId>, out: BufId, rows: usize },
    SliceCols {
        x: BufId,
        out: BufId,
        start: usize,
        len: usize,
        rows: usize,
        cols: usize,
    },
    Dot { a: BufId, b: BufId, out: BufId },
}

impl Op {
    /// (input buffers, output buffer) for gradient reachability.
    fn io(&self) -> (Vec<BufId>, BufId) {
        match self {
            Op::Matmul { a, b, out, .. } => (vec![*a, *b], *out),
            Op::Transpose { x, out, .. } => (vec![*x], *out),
            Op::Conv1d { x, w, out, .. } => (vec![*x, *w], *out),
            Op::Add { a, b, out } => (vec![*a, *b], *out),
            Op::AddBias { x, bias, out, .. } => (vec![*x, *bias], *out),
            Op::Mul { a, b, out } => (vec![*a, *b], *out),
            Op::Affine { x, out, .. } => (vec![*x], *out),
            Op::Relu { x, out } => (vec![*x], *out),
            Op::Clamp { x, out, .. } => (vec![*x], *out),
            Op::SoftmaxRows { x, out, .. } => (vec![*x], *out),
            Op::Log { x, out } => (vec![*x], *out),
            Op::Exp { x, out } => (vec![*x], *out),
            Op::Sigmoid { x, out } => (vec![*x], *out),
            Op::Sum { x, out } => (vec![*x], *out),
            Op::Mean { x, out } => (vec![*x], *out),
            Op::RowMean { x, out, .. } => (vec![*x], *out),
            Op::L2NormalizeRows { x, out, .. } => (vec![*x], *out),
            Op::LayerNormRows {
                x, gain, bias, out, ..
            } => (vec![*x, *gain, *bias], *out),
            Op::ConcatRows { xs, out, .. } => (xs.clone(), *out),
            Op::SliceRows { x, out, .. } => (vec![*x], *out),
            Op::ConcatCols { xs, out, .. } => (xs.clone(), *out),
            Op::SliceCols { x, out, .. } => (vec![*x], *out),
            Op::Dot { a, b, out } => (vec![*a, *b], *out),
        }
    }
}

/// Records every primitive applied during a forward pass. One tape per
/// scalar evaluation; distinct tapes share nothing and may run concurrently.
#[derive(Default)]
pub struct Tape {
    bufs: Vec<Buf>,
    ops: Vec<Op>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    /// Register a non-differentiable input (data, masks, references).
    pub fn input(&mut self, t: &Tensor) -> BufId {
        self.push_buf(t.data().to_vec(), t.shape().to_vec(), false)
    }

    /// Register a parameter: gradients will be accumulated for it.
    pub fn param(&mut self, t: &Tensor) -> BufId {
        self.push_buf(t.data().to_vec(), t.shape().to_vec(), true)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> BufId {
        self.push_buf(data, shape, false)
    }

    fn push_buf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> BufId {
        let id = self.bufs.len();
        self.bufs.push(Buf {
            data,
            shape,
            requires_grad,
        });
        id
    }

    pub fn value(&self, id: BufId) -> &[f64] {
        &self.bufs[id].data
    }

    pub fn shape(&self, id: BufId) -> &[usize] {
        &self.bufs[id].shape
    }

    pub fn rows(&self, id: BufId) -> usize {
        self.bufs[id].rows()
    }

    pub fn cols(&self, id: BufId) -> usize {
        self.bufs[id].cols()
    }

    pub fn scalar_value(&self, id: BufId) -> f64 {
        debug_assert_eq!(self.bufs[id].data.len(), 1);
        self.bufs[id].data[0]
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    // ── primitives ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: BufId, b: BufId) -> BufId {
        let (m, k) = (self.bufs[a].rows(), self.bufs[a].cols());
        let (k2, n) = (self.bufs[b].rows(), self.bufs[b].cols());
        assert_eq!(k, k2, "matmul inner dims: {k} vs {k2}");
        let mut data = vec![0.0; m * n];
        matmul(&self.bufs[a].data, &self.bufs[b].data, &mut data, m, k, n);
        let out = self.push_buf(data, vec![m, n], false);
        self.ops.push(Op::Matmul { a, b, out, m, k, n });
        out
    }

    pub fn transpose(&mut self, x: BufId) -> BufId {
        let (rows, cols) = (self.bufs[x].rows(), self.bufs[x].cols());
        let mut data = vec![0.0; rows * cols];
        transpose(&self.bufs[x].data, &mut data, rows, cols);
        let out = self.push_buf(data, vec![cols, rows], false);
        self.ops.push(Op::Transpose { x, out, rows, cols });
        out
    }

    /// Dilated strided convolution with symmetric zero padding.
    ///
    /// Output length is exactly ceil(t_in / stride); output frame t reads
    /// input positions t*stride + (j - (k-1)/2)*dilation, j in [0, k).
    pub fn conv1d(
        &mut self,
        x: BufId,
        w: BufId,
        stride: usize,
        dilation: usize,
    ) -> Result<BufId, NumericsError> {
        assert!(stride >= 1 && dilation >= 1);
        let (t_in, c_in) = (self.bufs[x].rows(), self.bufs[x].cols());
        let wshape = self.bufs[w].shape.to_vec();
        assert_eq!(wshape.len(), 3, "conv kernel must be [k, c_in, c_out]");
        let (kernel, kc_in, c_out) = (wshape[0], wshape[1], wshape[2]);
        assert_eq!(c_in, kc_in, "conv channel mismatch");
        if kernel % 2 == 0 {
            return Err(NumericsError::EvenKernel(kernel));
        }
        let t_out = t_in.div_ceil(stride);
        let mut data = vec![0.0; t_out * c_out];
        conv1d_forward(
            &self.bufs[x].data,
            &self.bufs[w].data,
            &mut data,
            t_in,
            c_in,
            c_out,
            kernel,
            stride,
            dilation,
        );
        let out = self.push_buf(data, vec![t_out, c_out], false);
        self.ops.push(Op::Conv1d {
            x,
            w,
            out,
            t_in,
            c_in,
            c_out,
            kernel,
            stride,
            dilation,
        });
        Ok(out)
    }

    pub fn add(&mut self, a: BufId, b: BufId) -> BufId {
        assert_eq!(self.bufs[a].data.len(), self.bufs[b].data.len());
        let data: Vec<f64> = self.bufs[a]
            .data
            .iter()
            .zip(&self.bufs[b].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.bufs[a].shape.clone();
        let out = self.push_buf(data, shape, false);
        self.ops.push(Op::Add { a, b, out });
        out
    }

    pub fn add_bias(&mut self, x: BufId, bias: BufId) -> BufId {
        let (rows, cols) = (self.bufs[x].rows(), self.bufs[x].cols());
        assert_eq!(self.bufs[bias].data.len(), cols);
        let mut data = self.bufs[x].data.clone();
        for r in 0..rows {
            for (o, b) in data[r * cols..(r + 1) * cols]
                .iter_mut()
                .zip(&self.bufs[bias].data)
            {
                *o += b;
            }
        }
        let shape = self.bufs[x].shape.clone();
        let out = self.push_buf(data, shape, false);
        self.ops.push(Op::AddBias { x, bias, out, rows, cols });
        out
    }

    pub fn mul(&mut self, a: BufId, b: BufId) -> BufId {
        assert_eq!(self.bufs[a].data.len(), self.bufs[b].data.len());
        let data: Vec<f64> = self.bufs[a]
            .data
            .iter()
            .zip(&self.bufs[b].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.bufs[a].shape.clone();
        let out = self.push_buf(data, shape, false);
        self.ops.push(Op::Mul { a, b, out });
        out
    }

    /// out = mul * x + add
    pub fn affine(&mut self, x: BufId, mul: f64, add: f64) -> BufId {
        let data: Vec<f64> = self.bufs[x].data.iter().map(|v| mul * v + add).collect();
        let shape = self.bufs[x].shape.clone();
        let out = self.push_buf(data, shape, false);
        self.ops.push(Op::Affine { x, out, mul });
        out
    }

    pub fn scale(&mut self, x: BufId, c: f64) -> BufId {
        self.affine(x, c, 0.0)
    }

    /// max(x, 0) elementwise; subgradient 0 at the hinge point.
    pub fn relu(&mut self, x: BufId) -> BufId {
        let data: Vec<f64> = self.bufs[x].data.iter().map(|v| v.max(0.0)).collect();
        let shape = self.bufs[x].shape.clone();
        let out = self.push_buf(data, shape, false);
        self.ops.push(Op::Relu { x, out });
        out
    }

    pub fn clamp(&mut self, x: BufId, lo: f64, hi: f64) -> BufId {
        let data: Vec<f64> = self.bufs[x].data.iter().map(|v| v.clamp(lo, hi)).collect();
        let shape = self.bufs[x].shape.clone();
        let out = self.push_buf(data, shape, false);
        self.ops.push(Op::Clamp { x, out, lo, hi });
        out
    }

    pub fn softmax_rows(&mut self, x: BufId) -> BufId {
        let (rows, cols) = (self.bufs[x].rows(), self.bufs[x].cols());
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &self.bufs[x].data[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &v) in data[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (v - m).exp();
                z += *o;
            }
            for o in &mut data[r * cols..(r + 1) * cols] {
                *o /= z;
            }
        }
        let shape = self.bufs[x].shape.clone();
        let out = self.push_buf(data, shape, false);
        self.ops.push(Op::SoftmaxRows { x, out, rows, cols });
        out
    }

    pub fn log(&mut self, x: BufId) -> BufId {
        let data: Vec<f64> = self.bufs[x].data.iter().map(|v| v.ln()).collect();
        let shape = self.bufs[x].shape.clone();
        let out = self.push_buf(data, shape, false);
        self.ops.push(Op::Log { x, out });
        out
    }

    pub fn exp(&mut self, x: BufId) -> BufId {
        let data: Vec<f64> = self.bufs[x].data.iter().map(|v| v.exp()).collect();
        let shape = self.bufs[x].shape.clone();
        let out = self.push_buf(data, shape, false);
        self.ops.push(Op::Exp { x, out });
        out
    }

    pub fn sigmoid(&mut self, x: BufId) -> BufId {
        let data: Vec<f64> = self.bufs[x]
            .data
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let shape = self.bufs[x].shape.clone();
        let out = self.push_buf(data, shape, false);
        self.ops.push(Op::Sigmoid { x, out });
        out
    }

    pub fn sum(&mut self, x: BufId) -> BufId {
        let s: f64 = self.bufs[x].data.iter().sum();
        let out = self.push_buf(vec![s], vec![1], false);
        self.ops.push(Op::Sum { x, out });
        out
    }

    pub fn mean(&mut self, x: BufId) -> BufId {
        let n = self.bufs[x].data.len();
        let s: f64 = self.bufs[x].data.iter().sum();
        let out = self.push_buf(vec![s / n as f64], vec![1], false);
        self.ops.push(Op::Mean { x, out });
        out
    }

    /// Column means: [rows, cols] -> [cols].
    pub fn row_mean(&mut self, x: BufId) -> BufId {
        let (rows, cols) = (self.bufs[x].rows(), self.bufs[x].cols());
        let mut data = vec![0.0; cols];
        for r in 0..rows {
            for (o, &v) in data.iter_mut().zip(&self.bufs[x].data[r * cols..(r + 1) * cols]) {
                *o += v;
            }
        }
        for o in &mut data {
            *o /= rows as f64;
        }
        let out = self.push_buf(data, vec![cols], false);
        self.ops.push(Op::RowMean { x, out, rows, cols });
        out
    }

    pub fn l2_normalize_rows(&mut self, x: BufId) -> BufId {
        let (rows, cols) = (self.bufs[x].rows(), self.bufs[x].cols());
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &self.bufs[x].data[r * cols..(r + 1) * cols];
            let q: f64 = row.iter().map(|v| v * v).sum();
            let s = 1.0 / (q + NORM_EPS).sqrt();
            for (o, &v) in data[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = v * s;
            }
        }
        let shape = self.bufs[x].shape.clone();
        let out = self.push_buf(data, shape, false);
        self.ops.push(Op::L2NormalizeRows { x, out, rows, cols });
        out
    }

    pub fn layer_norm_rows(&mut self, x: BufId, gain: BufId, bias: BufId) -> BufId {
        let (rows, cols) = (self.bufs[x].rows(), self.bufs[x].cols());
        assert_eq!(self.bufs[gain].data.len(), cols);
        assert_eq!(self.bufs[bias].data.len(), cols);
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &self.bufs[x].data[r * cols..(r + 1) * cols];
            let mu: f64 = row.iter().sum::<f64>() / cols as f64;
            let var: f64 = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
            let rstd = 1.0 / (var + LAYERNORM_EPS).sqrt();
            for (c, (o, &v)) in data[r * cols..(r + 1) * cols]
                .iter_mut()
                .zip(row)
                .enumerate()
            {
                *o = (v - mu) * rstd * self.bufs[gain].data[c] + self.bufs[bias].data[c];
            }
        }
        let shape = self.bufs[x].shape.clone();
        let out = self.push_buf(data, shape, false);
        self.ops.push(Op::LayerNormRows {
            x,
            gain,
            bias,
            out,
            rows,
            cols,
        });
        out
    }

    pub fn concat_rows(&mut self, xs: &[BufId]) -> BufId {
        assert!(!xs.is_empty());
        let cols = self.bufs[xs[0]].cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &x in xs {
            assert_eq!(self.bufs[x].cols(), cols, "concat_rows column mismatch");
            rows += self.bufs[x].rows();
            data.extend_from_slice(&self.bufs[x].data);
        }
        let out = self.push_buf(data, vec![rows, cols], false);
        self.ops.push(Op::ConcatRows {
            xs: xs.to_vec(),
            out,
            cols,
        });
        out
    }

    pub fn slice_rows(&mut self, x: BufId, start: usize, len: usize) -> BufId {
        let (rows, cols) = (self.bufs[x].rows(), self.bufs[x].cols());
        assert!(start + len <= rows, "slice_rows out of range");
        let data = self.bufs[x].data[start * cols..(start + len) * cols].to_vec();
        let out = self.push_buf(data, vec![len, cols], false);
        self.ops.push(Op::SliceRows {
            x,
            out,
            start,
            len,
            cols,
        });
        out
    }

    pub fn concat_cols(&mut self, xs: &[BufId]) -> BufId {
        assert!(!xs.is_empty());
        let rows = self.bufs[xs[0]].rows();
        let total_cols: usize = xs.iter().map(|&x| self.bufs[x].cols()).sum();
        let mut data = vec![0.0; rows * total_cols];
        let mut offset = 0;
        for &x in xs {
            let c = self.bufs[x].cols();
            assert_eq!(self.bufs[x].rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                data[r * total_cols + offset..r * total_cols + offset + c]
                    .copy_from_slice(&self.bufs[x].data[r * c..(r + 1) * c]);
            }
            offset += c;
        }
        let out = self.push_buf(data, vec![rows, total_cols], false);
        self.ops.push(Op::ConcatCols {
            xs: xs.to_vec(),
            out,
            rows,
        });
        out
    }

    pub fn slice_cols(&mut self, x: BufId, start: usize, len: usize) -> BufId {
        let (rows, cols) = (self.bufs[x].rows(), self.bufs[x].cols());
        assert!(start + len <= cols, "slice_cols out of range");
        let mut data = vec![0.0; rows * len];
        for r in 0..rows {
            data[r * len..(r + 1) * len]
                .copy_from_slice(&self.bufs[x].data[r * cols + start..r * cols + start + len]);
        }
        let out = self.push_buf(data, vec![rows, len], false);
        self.ops.push(Op::SliceCols {
            x,
            out,
            start,
            len,
            rows,
            cols,
        });
        out
    }

    pub fn dot(&mut self, a: BufId, b: BufId) -> BufId {
        assert_eq!(self.bufs[a].data.len(), self.bufs[b].data.len());
        let s: f64 = self.bufs[a]
            .data
            .iter()
            .zip(&self.bufs[b].data)
            .map(|(x, y)| x * y)
            .sum();
        let out = self.push_buf(vec![s], vec![1], false);
        self.ops.push(Op::Dot { a, b, out });
        out
    }

    // ── backward ────────────────────────────────────────────────────

    /// Which buffers need gradients: params plus anything downstream of one.
    fn grad_reachability(&self) -> Vec<bool> {
        let mut needs: Vec<bool> = self.bufs.iter().map(|b| b.requires_grad).collect();
        for op in &self.ops {
            let (inputs, out) = op.io();
            if inputs.iter().any(|&i| needs[i]) {
                needs[out] = true;
            }
        }
        needs
    }

    /// Reverse sweep from a scalar loss. Returns per-buffer gradients
    /// (None where no gradient flowed or none was required).
    pub fn backward(&self, loss: BufId) -> Result<Gradients, NumericsError> {
        let numel = self.bufs[loss].data.len();
        if numel != 1 {
            return Err(NumericsError::NonScalarOutput { numel });
        }
        let needs = self.grad_reachability();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.bufs.len()];
        grads[loss] = Some(vec![1.0]);
        for op in self.ops.iter().rev() {
            self.backward_op(op, &mut grads, &needs);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], needs: &[bool], id: BufId, delta: &[f64]) {
        if !needs[id] {
            return;
        }
        match &mut grads[id] {
            Some(g) => {
                for (gi, d) in g.iter_mut().zip(delta) {
                    *gi += d;
                }
            }
            None => grads[id] = Some(delta.to_vec()),
        }
    }

    fn backward_op(&self, op: &Op, grads: &mut Vec<Option<Vec<f64>>>, needs: &[bool]) {
        match op {
            Op::Matmul { a, b, out, m, k, n } => {
                let Some(d_out) = grads[*out].clone() else { return };
                if needs[*a] {
                    // dA = dC @ B^T
                    let mut b_t = vec![0.0; k * n];
                    transpose(&self.bufs[*b].data, &mut b_t, *k, *n);
                    let mut d_a = vec![0.0; m * k];
                    matmul(&d_out, &b_t, &mut d_a, *m, *n, *k);
                    self.accumulate(grads, needs, *a, &d_a);
                }
                if needs[*b] {
                    // dB = A^T @ dC
                    let mut a_t = vec![0.0; m * k];
                    transpose(&self.bufs[*a].data, &mut a_t, *m, *k);
                    let mut d_b = vec![0.0; k * n];
                    matmul(&a_t, &d_out, &mut d_b, *k, *m, *n);
                    self.accumulate(grads, needs, *b, &d_b);
                }
            }
            Op::Transpose { x, out, rows, cols } => {
                let Some(d_out) = grads[*out].clone() else { return };
                let mut d_x = vec![0.0; rows * cols];
                transpose(&d_out, &mut d_x, *cols, *rows);
                self.accumulate(grads, needs, *x, &d_x);
            }
            Op::Conv1d {
                x,
                w,
                out,
                t_in,
                c_in,
                c_out,
                kernel,
                stride,
                dilation,
            } => {
                let Some(d_out) = grads[*out].clone() else { return };
                let mut d_x = vec![0.0; t_in * c_in];
                let mut d_w = vec![0.0; kernel * c_in * c_out];
                conv1d_backward(
                    &self.bufs[*x].data,
                    &self.bufs[*w].data,
                    &d_out,
                    &mut d_x,
                    &mut d_w,
                    needs[*x],
                    *t_in,
                    *c_in,
                    *c_out,
                    *kernel,
                    *stride,
                    *dilation,
                );
                if needs[*x] {
                    self.accumulate(grads, needs, *x, &d_x);
                }
                self.accumulate(grads, needs, *w, &d_w);
            }
            Op::Add { a, b, out } => {
                let Some(d_out) = grads[*out].clone() else { return };
                self.accumulate(grads, needs, *a, &d_out);
                self.accumulate(grads, needs, *b, &d_out);
            }
            Op::AddBias { x, bias, out, rows, cols } => {
                let Some(d_out) = grads[*out].clone() else { return };
                self.accumulate(grads, needs, *x, &d_out);
                let mut d_bias = vec![0.0; *cols];
                for r in 0..*rows {
                    for (db, d) in d_bias.iter_mut().zip(&d_out[r * cols..(r + 1) * cols]) {
                        *db += d;
                    }
                }
                self.accumulate(grads, needs, *bias, &d_bias);
            }
            Op::Mul { a, b, out } => {
                let Some(d_out) = grads[*out].clone() else { return };
                let d_a: Vec<f64> = d_out
                    .iter()
                    .zip(&self.bufs[*b].data)
                    .map(|(d, v)| d * v)
                    .collect();
                self.accumulate(grads, needs, *a, &d_a);
                let d_b: Vec<f64> = d_out
                    .iter()
                    .zip(&self.bufs[*a].data)
                    .map(|(d, v)| d * v)
                    .collect();
                self.accumulate(grads, needs, *b, &d_b);
            }
            Op::Affine { x, out, mul } => {
                let Some(d_out) = grads[*out].clone() else { return };
                let d_x: Vec<f64> = d_out.iter().map(|d| d * mul).collect();
                self.accumulate(grads, needs, *x, &d_x);
            }
            Op::Relu { x, out } => {
                let Some(d_out) = grads[*out].clone() else { return };
                let d_x: Vec<f64> = d_out
                    .iter()
                    .zip(&self.bufs[*x].data)
                    .map(|(d, &v)| if v > 0.0 { *d } else { 0.0 })
                    .collect();
                self.accumulate(grads, needs, *x, &d_x);
            }
            Op::Clamp { x, out, lo, hi } => {
                let Some(d_out) = grads[*out].clone() else { return };
                let d_x: Vec<f64> = d_out
                    .iter()
                    .zip(&self.bufs[*x].data)
                    .map(|(d, &v)| if v >= *lo && v <= *hi { *d } else { 0.0 })
                    .collect();
                self.accumulate(grads, needs, *x, &d_x);
            }
            Op::SoftmaxRows { x, out, rows, cols } => {
                let Some(d_out) = grads[*out].clone() else { return };
                let y = &self.bufs[*out].data;
                let mut d_x = vec![0.0; rows * cols];
                for r in 0..*rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let dr = &d_out[r * cols..(r + 1) * cols];
                    let dotp: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &dv) in d_x[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .zip(yr)
                        .zip(dr)
                    {
                        *o = yv * (dv - dotp);
                    }
                }
                self.accumulate(grads, needs, *x, &d_x);
            }
            Op::Log { x, out } => {
                let Some(d_out) = grads[*out].clone() else { return };
                let d_x: Vec<f64> = d_out
                    .iter()
                    .zip(&self.bufs[*x].data)
                    .map(|(d, v)| d / v)
                    .collect();
                self.accumulate(grads, needs, *x, &d_x);
            }
            Op::Exp { x, out } => {
                let Some(d_out) = grads[*out].clone() else { return };
                let d_x: Vec<f64> = d_out
                    .iter()
                    .zip(&self.bufs[*out].data)
                    .map(|(d, v)| d * v)
                    .collect();
                self.accumulate(grads, needs, *x, &d_x);
            }
            Op::Sigmoid { x, out } => {
                let Some(d_out) = grads[*out].clone() else { return };
                let d_x: Vec<f64> = d_out
                    .iter()
                    .zip(&self.bufs[*out].data)
                    .map(|(d, y)| d * y * (1.0 - y))
                    .collect();
                self.accumulate(grads, needs, *x, &d_x);
            }
            Op::Sum { x, out } => {
                let Some(d_out) = grads[*out].clone() else { return };
                let d_x = vec![d_out[0]; self.bufs[*x].data.len()];
                self.accumulate(grads, needs, *x, &d_x);
            }
            Op::Mean { x, out } => {
                let Some(d_out) = grads[*out].clone() else { return };
                let n = self.bufs[*x].data.len();
                let d_x = vec![d_out[0] / n as f64; n];
                self.accumulate(grads, needs, *x, &d_x);
            }
            Op::RowMean { x, out, rows, cols } => {
                let Some(d_out) = grads[*out].clone() else { return };
                let mut d_x = vec![0.0; rows * cols];
                for r in 0..*rows {
                    for (o, d) in d_x[r * cols..(r + 1) * cols].iter_mut().zip(&d_out) {
                        *o = d / *rows as f64;
                    }
                }
                self.accumulate(grads, needs, *x, &d_x);
            }
            Op::L2NormalizeRows { x, out, rows, cols } => {
                let Some(d_out) = grads[*out].clone() else { return };
                let mut d_x = vec![0.0; rows * cols];
                for r in 0..*rows {
                    let xr = &self.bufs[*x].data[r * cols..(r + 1) * cols];
                    let dr = &d_out[r * cols..(r + 1) * cols];
                    let q: f64 = xr.iter().map(|v| v * v).sum();
                    let s = 1.0 / (q + NORM_EPS).sqrt();
                    let xd: f64 = xr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    let s3 = s * s * s;
                    for ((o, &xv), &dv) in d_x[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .zip(xr)
                        .zip(dr)
                    {
                        *o = dv * s - xv * xd * s3;
                    }
                }
                self.accumulate(grads, needs, *x, &d_x);
            }
            Op::LayerNormRows {
                x,
                gain,
                bias,
                out,
                rows,
                cols,
            } => {
                let Some(d_out) = grads[*out].clone() else { return };
                let n = *cols as f64;
                let g = &self.bufs[*gain].data;
                let mut d_x = vec![0.0; rows * cols];
                let mut d_gain = vec![0.0; *cols];
                let mut d_bias = vec![0.0; *cols];
                for r in 0..*rows {
                    let xr = &self.bufs[*x].data[r * cols..(r + 1) * cols];
                    let dr = &d_out[r * cols..(r + 1) * cols];
                    let mu: f64 = xr.iter().sum::<f64>() / n;
                    let var: f64 = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                    let rstd = 1.0 / (var + LAYERNORM_EPS).sqrt();
                    // xhat_i = (x_i - mu)*rstd; dxhat = dout * gain
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for c in 0..*cols {
                        let xhat = (xr[c] - mu) * rstd;
                        let dxhat = dr[c] * g[c];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        d_gain[c] += dr[c] * xhat;
                        d_bias[c] += dr[c];
                    }
                    for c in 0..*cols {
                        let xhat = (xr[c] - mu) * rstd;
                        let dxhat = dr[c] * g[c];
                        d_x[r * cols + c] =
                            rstd * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
                    }
                }
                self.accumulate(grads, needs, *x, &d_x);
                self.accumulate(grads, needs, *gain, &d_gain);
                self.accumulate(grads, needs, *bias, &d_bias);
            }
            Op::ConcatRows { xs, out, cols } => {
                let Some(d_out) = grads[*out].clone() else { return };
                let mut offset = 0;
                for &xi in xs {
                    let r = self.bufs[xi].rows();
                    let d = &d_out[offset * cols..(offset + r) * cols];
                    self.accumulate(grads, needs, xi, d);
                    offset += r;
                }
            }
            Op::SliceRows {
                x,
                out,
                start,
                len,
                cols,
            } => {
                let Some(d_out) = grads[*out].clone() else { return };
                let mut d_x = vec![0.0; self.bufs[*x].data.len()];
                d_x[start * cols..(start + len) * cols].copy_from_slice(&d_out);
                self.accumulate(grads, needs, *x, &d_x);
            }
            Op::ConcatCols { xs, out, rows } => {
                let Some(d_out) = grads[*out].clone() else { return };
                let total_cols = self.bufs[*out].cols();
                let mut offset = 0;
                for &xi in xs {
                    let c = self.bufs[xi].cols();
                    let mut d = vec![0.0; rows * c];
                    for r in 0..*rows {
                        d[r * c..(r + 1) * c].copy_from_slice(
                            &d_out[r * total_cols + offset..r * total_cols + offset + c],
                        );
                    }
                    self.accumulate(grads, needs, xi, &d);
                    offset += c;
                }
            }
            Op::SliceCols {
                x,
                out,
                start,
                len,
                rows,
                cols,
            } => {
                let Some(d_out) = grads[*out].clone() else { return };
                let mut d_x = vec![0.0; rows * cols];
                for r in 0..*rows {
                    d_x[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&d_out[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, needs, *x, &d_x);
            }
            Op::Dot { a, b, out } => {
                let Some(d_out) = grads[*out].clone() else { return };
                let c = d_out[0];
                let d_a: Vec<f64> = self.bufs[*b].data.iter().map(|v| c * v).collect();
                self.accumulate(grads, needs, *a, &d_a);
                let d_b: Vec<f64> = self.bufs[*a].data.iter().map(|v| c * v).collect();
                self.accumulate(grads, needs, *b, &d_b);
            }
        }
    }
}

/// Per-buffer gradients from one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: BufId) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }
}

#[allow(clippy::too_many_arguments)]
fn conv1d_forward(
    x: &[f64],
    w: &[f64],
    out: &mut [f64],
    t_in: usize,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
) {
    let half = (kernel - 1) / 2;
    let t_out = t_in.div_ceil(stride);
    for t in 0..t_out {
        let center = (t * stride) as isize;
        let out_row = &mut out[t * c_out..(t + 1) * c_out];
        for j in 0..kernel {
            let p = center + (j as isize - half as isize) * dilation as isize;
            if p < 0 || p >= t_in as isize {
                continue;
            }
            let x_row = &x[p as usize * c_in..(p as usize + 1) * c_in];
            let w_tap = &w[j * c_in * c_out..(j + 1) * c_in * c_out];
            for (ci, &xv) in x_row.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let w_row = &w_tap[ci * c_out..(ci + 1) * c_out];
                for (o, &wv) in out_row.iter_mut().zip(w_row) {
                    *o += xv * wv;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    d_out: &[f64],
    d_x: &mut [f64],
    d_w: &mut [f64],
    need_dx: bool,
    t_in: usize,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
) {
    let half = (kernel - 1) / 2;
    let t_out = t_in.div_ceil(stride);
    for t in 0..t_out {
        let center = (t * stride) as isize;
        let d_row = &d_out[t * c_out..(t + 1) * c_out];
        for j in 0..kernel {
            let p = center + (j as isize - half as isize) * dilation as isize;
            if p < 0 || p >= t_in as isize {
                continue;
            }
            let p = p as usize;
            let x_row = &x[p * c_in..(p + 1) * c_in];
            let w_tap = &w[j * c_in * c_out..(j + 1) * c_in * c_out];
            let dw_tap = &mut d_w[j * c_in * c_out..(j + 1) * c_in * c_out];
            if need_dx {
                let dx_row = &mut d_x[p * c_in..(p + 1) * c_in];
                for ci in 0..c_in {
                    let w_row = &w_tap[ci * c_out..(ci + 1) * c_out];
                    let dw_row = &mut dw_tap[ci * c_out..(ci + 1) * c_out];
                    let xv = x_row[ci];
                    let mut acc = 0.0;
                    for ((&d, &wv), dw) in d_row.iter().zip(w_row).zip(dw_row.iter_mut()) {
                        acc += d * wv;
                        *dw += d * xv;
                    }
                    dx_row[ci] += acc;
                }
            } else {
                for (ci, &xv) in x_row.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let dw_row = &mut dw_tap[ci * c_out..(ci + 1) * c_out];
                    for (&d, dw) in d_row.iter().zip(dw_row.iter_mut()) {
                        *dw += d * xv;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn conv1d_identity_kernel_is_identity() {
        // center tap = identity over channels, other taps zero
        let mut tape = Tape::new();
        let x = tensor(vec![8, 2], (0..16).map(|v| v as f64 * 0.25 - 2.0).collect());
        let mut w = vec![0.0; 3 * 2 * 2];
        w[1 * 4 + 0 * 2 + 0] = 1.0;
        w[1 * 4 + 1 * 2 + 1] = 1.0;
        let xi = tape.input(&x);
        let wi = tape.constant(vec![3, 2, 2], w);
        let out = tape.conv1d(xi, wi, 1, 1).unwrap();
        assert_eq!(tape.value(out), x.data());
    }

    #[test]
    fn conv1d_output_length_is_ceil() {
        let mut tape = Tape::new();
        let x = tensor(vec![7, 1], vec![1.0; 7]);
        let xi = tape.input(&x);
        let wi = tape.constant(vec![3, 1, 1], vec![1.0; 3]);
        let out = tape.conv1d(xi, wi, 2, 1).unwrap();
        assert_eq!(tape.shape(out), &[4, 1]);
    }

    #[test]
    fn conv1d_impulse_support_is_center_plus_minus_dilation() {
        let mut tape = Tape::new();
        let mut data = vec![0.0; 17];
        data[8] = 1.0;
        let x = tensor(vec![17, 1], data);
        let xi = tape.input(&x);
        let wi = tape.constant(vec![3, 1, 1], vec![0.3, 0.5, 0.7]);
        let out = tape.conv1d(xi, wi, 1, 4).unwrap();
        let nonzero: Vec<usize> = tape
            .value(out)
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(nonzero, vec![4, 8, 12]);
    }

    #[test]
    fn conv1d_even_kernel_rejected() {
        let mut tape = Tape::new();
        let x = tensor(vec![8, 1], vec![1.0; 8]);
        let xi = tape.input(&x);
        let wi = tape.constant(vec![4, 1, 1], vec![1.0; 4]);
        let err = tape.conv1d(xi, wi, 1, 1).unwrap_err();
        assert!(matches!(err, NumericsError::EvenKernel(4)));
    }

    #[test]
    fn conv1d_locality_outside_receptive_field() {
        // perturbing an input frame farther than ((k-1)/2)*dilation*stride from
        // an output frame's center leaves that output exactly unchanged
        let mut rng_state = 12345u64;
        let mut next = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (rng_state >> 33) as f64 / (1u64 << 31) as f64 - 0.5
        };
        let (t_in, k, dilation, stride) = (24usize, 3usize, 2usize, 2usize);
        let x_data: Vec<f64> = (0..t_in * 2).map(|_| next()).collect();
        let w_data: Vec<f64> = (0..k * 2 * 2).map(|_| next()).collect();

        let run = |xd: &[f64]| {
            let mut tape = Tape::new();
            let xi = tape.input(&tensor(vec![t_in, 2], xd.to_vec()));
            let wi = tape.constant(vec![k, 2, 2], w_data.clone());
            let out = tape.conv1d(xi, wi, stride, dilation).unwrap();
            tape.value(out).to_vec()
        };

        let base = run(&x_data);
        let reach = ((k - 1) / 2) * dilation * stride;
        for out_frame in 0..t_in.div_ceil(stride) {
            let center = out_frame * stride;
            for perturbed in 0..t_in {
                if perturbed.abs_diff(center) <= reach {
                    continue;
                }
                let mut xd = x_data.clone();
                xd[perturbed * 2] += 0.7;
                xd[perturbed * 2 + 1] -= 0.4;
                let got = run(&xd);
                assert_eq!(
                    got[out_frame * 2], base[out_frame * 2],
                    "output frame {out_frame} changed by input frame {perturbed}"
                );
                assert_eq!(got[out_frame * 2 + 1], base[out_frame * 2 + 1]);
            }
        }
    }
}
