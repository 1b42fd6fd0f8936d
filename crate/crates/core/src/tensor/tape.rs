//! Operation tape for reverse-mode differentiation.
//!
//! Each forward call validates shapes, computes the output value, verifies
//! it is finite (NaN/Inf is an error state), and records the operation.
//! [`Tape::backward`] walks the records in exact reverse execution order and
//! accumulates vector-Jacobian products additively, so a tensor feeding
//! multiple consumers receives the sum of its downstream gradients and the
//! accumulation order is fixed by the tape.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::ops::{dot, matmul_nn, matmul_nt, matmul_tn, sigmoid};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Elementwise activation kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Exp,
}

enum Op {
    Leaf,
    Matmul(Var, Var),
    /// A * B^T with B stored row-major.
    MatmulNT(Var, Var),
    Add(Var, Var),
    /// Row-broadcast bias add: x[n,d] + b[d].
    AddBiasRows(Var, Var),
    Scale(Var, f64),
    Unary(Activation, Var),
    SoftmaxTemp {
        logits: Var,
        tau: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    AvgPool2d {
        x: Var,
        k: usize,
    },
    UpsampleNearest {
        x: Var,
        factor: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    MeanRows(Var),
    /// Per-row dot product of two [m,d] tensors -> [m].
    RowDot(Var, Var),
    Reshape(Var),
    BceWithLogits {
        logits: Var,
        labels: Arc<Vec<f64>>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients for every recorded value, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the given shape when `v` never
    /// influenced the loss.
    pub fn wrt_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        match self.wrt(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

/// Records forward operations and replays their VJPs in reverse.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var(nodes.len() - 1)
    }

    fn push_checked(&self, value: Tensor, op: Op, requires_grad: bool, what: &str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::numeric(format!("non-finite values in {what}")));
        }
        Ok(self.push(value, op, requires_grad))
    }

    /// Record an input that does not need a gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Record a trainable input.
    pub fn param(&self, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Leaf, true)
    }

    /// Record an input with an explicit `requires_grad` flag.
    pub fn leaf(&self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Current value of a recorded variable (cheap: shares the buffer).
    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Value of a one-element variable.
    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        self.nodes.borrow()[v.0].value.item()
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    // ---- forward operations -------------------------------------------

    /// C[m,n] = A[m,k] B[k,n]
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape().to_vec(), tb.shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let c = matmul_nn(ta.data(), tb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], c)?;
        self.push_checked(value, Op::Matmul(a, b), self.rg(&[a, b]), "matmul")
    }

    /// C[m,n] = A[m,k] B[n,k]^T
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape().to_vec(), tb.shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape(format!("matmul_nt {sa:?} x {sb:?}^T")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let c = matmul_nt(ta.data(), tb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], c)?;
        self.push_checked(value, Op::MatmulNT(a, b), self.rg(&[a, b]), "matmul_nt")
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!(
                "add {:?} + {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push_checked(value, Op::Add(a, b), self.rg(&[a, b]), "add")
    }

    /// x[n,d] + b[d], bias broadcast over rows.
    pub fn add_bias_rows(&self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tx.rank() != 2 || tb.rank() != 1 || tx.shape()[1] != tb.shape()[0] {
            return Err(Error::shape(format!(
                "bias add {:?} + {:?}",
                tx.shape(),
                tb.shape()
            )));
        }
        let (n, d) = (tx.shape()[0], tx.shape()[1]);
        let mut data = tx.data().to_vec();
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] += tb.data()[j];
            }
        }
        let value = Tensor::new(vec![n, d], data)?;
        self.push_checked(value, Op::AddBiasRows(x, b), self.rg(&[x, b]), "add_bias_rows")
    }

    pub fn scale(&self, x: Var, c: f64) -> Result<Var> {
        let tx = self.value(x);
        let value = tx.map(|v| v * c);
        self.push_checked(value, Op::Scale(x, c), self.rg(&[x]), "scale")
    }

    /// y = x W + b; the standard affine layer.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias_rows(xw, b)
    }

    pub fn activation(&self, kind: Activation, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let value = match kind {
            Activation::Relu => tx.map(|v| if v > 0.0 { v } else { 0.0 }),
            Activation::Tanh => tx.map(f64::tanh),
            Activation::Exp => tx.map(f64::exp),
        };
        let what = match kind {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Exp => "exp (overflow for entries > ~700)",
        };
        self.push_checked(value, Op::Unary(kind, x), self.rg(&[x]), what)
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        self.activation(Activation::Relu, x)
    }

    pub fn tanh(&self, x: Var) -> Result<Var> {
        self.activation(Activation::Tanh, x)
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        self.activation(Activation::Exp, x)
    }

    /// Row m of the output is `softmax(logits[m] / tau[m])`, stabilized by
    /// row-max subtraction. Requires `tau[m] > 0`.
    pub fn softmax_with_temperature(&self, logits: Var, tau: Var) -> Result<Var> {
        let (tz, tt) = (self.value(logits), self.value(tau));
        if tz.rank() != 2 || tt.rank() != 1 || tz.shape()[0] != tt.shape()[0] {
            return Err(Error::shape(format!(
                "softmax_with_temperature logits {:?}, tau {:?}",
                tz.shape(),
                tt.shape()
            )));
        }
        if tt.data().iter().any(|&t| !(t > 0.0)) {
            return Err(Error::numeric("non-positive temperature"));
        }
        let (m, n) = (tz.shape()[0], tz.shape()[1]);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let t = tt.data()[r];
            let row = &tz.data()[r * n..(r + 1) * n];
            let orow = &mut out[r * n..(r + 1) * n];
            let mut mx = f64::NEG_INFINITY;
            for &z in row {
                mx = mx.max(z / t);
            }
            let mut sum = 0.0;
            for (o, &z) in orow.iter_mut().zip(row) {
                let e = (z / t - mx).exp();
                *o = e;
                sum += e;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        self.push_checked(
            value,
            Op::SoftmaxTemp { logits, tau },
            self.rg(&[logits, tau]),
            "softmax_with_temperature",
        )
    }

    /// Per-row standardization over the feature axis, then affine.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        if tx.rank() != 2
            || tg.rank() != 1
            || tb.rank() != 1
            || tg.shape()[0] != tx.shape()[1]
            || tb.shape()[0] != tx.shape()[1]
        {
            return Err(Error::shape(format!(
                "layer_norm x {:?}, gamma {:?}, beta {:?}",
                tx.shape(),
                tg.shape(),
                tb.shape()
            )));
        }
        if !(eps > 0.0) || tx.shape()[1] == 0 {
            return Err(Error::config("layer_norm requires eps > 0 and d >= 1"));
        }
        let (n, d) = (tx.shape()[0], tx.shape()[1]);
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &tx.data()[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            let orow = &mut out[i * d..(i + 1) * d];
            for j in 0..d {
                let xhat = (row[j] - mean) * inv;
                orow[j] = tg.data()[j] * xhat + tb.data()[j];
            }
        }
        let value = Tensor::new(vec![n, d], out)?;
        self.push_checked(
            value,
            Op::LayerNorm { x, gamma, beta, eps },
            self.rg(&[x, gamma, beta]),
            "layer_norm",
        )
    }

    /// Non-overlapping k x k block means of x[H,W,d].
    pub fn avg_pool2d(&self, x: Var, k: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 3 {
            return Err(Error::shape(format!("avg_pool2d on {:?}", tx.shape())));
        }
        let (h, w, d) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::shape(format!(
                "grid {h}x{w} not divisible by pool size {k}"
            )));
        }
        let (oh, ow) = (h / k, w / k);
        let mut out = vec![0.0; oh * ow * d];
        let data = tx.data();
        for i in 0..h {
            for j in 0..w {
                let src = &data[(i * w + j) * d..(i * w + j + 1) * d];
                let dst = &mut out[((i / k) * ow + j / k) * d..((i / k) * ow + j / k + 1) * d];
                for c in 0..d {
                    dst[c] += src[c];
                }
            }
        }
        let inv = 1.0 / (k * k) as f64;
        for v in out.iter_mut() {
            *v *= inv;
        }
        let value = Tensor::new(vec![oh, ow, d], out)?;
        self.push_checked(value, Op::AvgPool2d { x, k }, self.rg(&[x]), "avg_pool2d")
    }

    /// Replicate each cell of x[h,w,d] into an f x f block.
    pub fn upsample_nearest(&self, x: Var, factor: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 3 {
            return Err(Error::shape(format!("upsample_nearest on {:?}", tx.shape())));
        }
        if factor == 0 {
            return Err(Error::config("upsample factor must be >= 1"));
        }
        let (h, w, d) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (oh, ow) = (h * factor, w * factor);
        let mut out = vec![0.0; oh * ow * d];
        let data = tx.data();
        for i in 0..oh {
            for j in 0..ow {
                let src = &data[((i / factor) * w + j / factor) * d..((i / factor) * w + j / factor + 1) * d];
                out[(i * ow + j) * d..(i * ow + j + 1) * d].copy_from_slice(src);
            }
        }
        let value = Tensor::new(vec![oh, ow, d], out)?;
        self.push_checked(
            value,
            Op::UpsampleNearest { x, factor },
            self.rg(&[x]),
            "upsample_nearest",
        )
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat of zero tensors"));
        }
        let tensors: Vec<Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let rank = tensors[0].rank();
        if axis >= rank {
            return Err(Error::shape(format!("concat axis {axis} out of range for rank {rank}")));
        }
        let mut out_shape = tensors[0].shape().to_vec();
        out_shape[axis] = 0;
        for t in &tensors {
            if t.rank() != rank {
                return Err(Error::shape("concat rank mismatch"));
            }
            for a in 0..rank {
                if a != axis && t.shape()[a] != tensors[0].shape()[a] {
                    return Err(Error::shape(format!(
                        "concat extent mismatch on axis {a}: {:?} vs {:?}",
                        t.shape(),
                        tensors[0].shape()
                    )));
                }
            }
            out_shape[axis] += t.shape()[axis];
        }
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let total: usize = out_shape.iter().product();
        let mut out = vec![0.0; total];
        let mut offset = 0;
        let out_block = out_shape[axis] * inner;
        for t in &tensors {
            let block = t.shape()[axis] * inner;
            for o in 0..outer {
                let src = &t.data()[o * block..(o + 1) * block];
                out[o * out_block + offset..o * out_block + offset + block].copy_from_slice(src);
            }
            offset += block;
        }
        let value = Tensor::new(out_shape, out)?;
        self.push_checked(
            value,
            Op::Concat { parts: parts.to_vec(), axis },
            self.rg(parts),
            "concat",
        )
    }

    /// Columns `start..start+len` of a rank-2 tensor.
    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 || start + len > tx.shape()[1] || len == 0 {
            return Err(Error::shape(format!(
                "slice_cols [{start}, {start}+{len}) of {:?}",
                tx.shape()
            )));
        }
        let (n, d) = (tx.shape()[0], tx.shape()[1]);
        let mut out = vec![0.0; n * len];
        for i in 0..n {
            out[i * len..(i + 1) * len].copy_from_slice(&tx.data()[i * d + start..i * d + start + len]);
        }
        let value = Tensor::new(vec![n, len], out)?;
        self.push_checked(value, Op::SliceCols { x, start, len }, self.rg(&[x]), "slice_cols")
    }

    /// Mean over rows of x[n,d] -> [1,d].
    pub fn mean_rows(&self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 || tx.shape()[0] == 0 {
            return Err(Error::shape(format!("mean_rows on {:?}", tx.shape())));
        }
        let (n, d) = (tx.shape()[0], tx.shape()[1]);
        let mut out = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                out[j] += tx.data()[i * d + j];
            }
        }
        for v in out.iter_mut() {
            *v /= n as f64;
        }
        let value = Tensor::new(vec![1, d], out)?;
        self.push_checked(value, Op::MeanRows(x), self.rg(&[x]), "mean_rows")
    }

    /// out[i] = <a[i,:], b[i,:]> for two [m,d] tensors.
    pub fn row_dot(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || ta.shape() != tb.shape() {
            return Err(Error::shape(format!(
                "row_dot {:?} . {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, d) = (ta.shape()[0], ta.shape()[1]);
        let out: Vec<f64> = (0..m)
            .map(|i| dot(&ta.data()[i * d..(i + 1) * d], &tb.data()[i * d..(i + 1) * d]))
            .collect();
        let value = Tensor::new(vec![m], out)?;
        self.push_checked(value, Op::RowDot(a, b), self.rg(&[a, b]), "row_dot")
    }

    /// View under a new shape with equal element count.
    pub fn reshape(&self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).with_shape(shape)?;
        Ok(self.push(value, Op::Reshape(x), self.rg(&[x])))
    }

    /// Mean binary cross-entropy with logits, in the stable formulation
    /// `max(z,0) - z*y + ln(1 + exp(-|z|))`; finite for any |z|.
    pub fn bce_with_logits(&self, logits: Var, labels: &[f64]) -> Result<Var> {
        let tz = self.value(logits);
        if tz.rank() != 1 || tz.shape()[0] != labels.len() || labels.is_empty() {
            return Err(Error::shape(format!(
                "bce_with_logits logits {:?} vs {} labels",
                tz.shape(),
                labels.len()
            )));
        }
        if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::data("labels must be 0 or 1"));
        }
        let m = labels.len() as f64;
        let mut total = 0.0;
        for (&z, &y) in tz.data().iter().zip(labels) {
            total += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        }
        let value = Tensor::scalar(total / m);
        self.push_checked(
            value,
            Op::BceWithLogits { logits, labels: Arc::new(labels.to_vec()) },
            self.rg(&[logits]),
            "bce_with_logits",
        )
    }

    // ---- backward ------------------------------------------------------

    /// Reverse-mode gradients of a scalar loss with respect to every
    /// recorded variable that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::shape(format!(
                "backward requires a scalar loss, got {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let rg = |v: Var| nodes[v.0].requires_grad;
            let send = |target: Var, contrib: Vec<f64>, grads: &mut Vec<Option<Vec<f64>>>| {
                debug_assert_eq!(contrib.len(), nodes[target.0].value.numel());
                match &mut grads[target.0] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contrib) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            };

            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g); // keep for extraction
                }
                Op::Matmul(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    if rg(*a) {
                        send(*a, matmul_nt(&g, tb.data(), m, n, k), &mut grads);
                    }
                    if rg(*b) {
                        send(*b, matmul_tn(ta.data(), &g, m, k, n), &mut grads);
                    }
                }
                Op::MatmulNT(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                    if rg(*a) {
                        send(*a, matmul_nn(&g, tb.data(), m, n, k), &mut grads);
                    }
                    if rg(*b) {
                        send(*b, matmul_tn(&g, ta.data(), m, n, k), &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    if rg(*a) {
                        send(*a, g.clone(), &mut grads);
                    }
                    if rg(*b) {
                        send(*b, g.clone(), &mut grads);
                    }
                }
                Op::AddBiasRows(x, b) => {
                    let d = nodes[b.0].value.shape()[0];
                    if rg(*x) {
                        send(*x, g.clone(), &mut grads);
                    }
                    if rg(*b) {
                        let n = nodes[x.0].value.shape()[0];
                        let mut db = vec![0.0; d];
                        for i in 0..n {
                            for j in 0..d {
                                db[j] += g[i * d + j];
                            }
                        }
                        send(*b, db, &mut grads);
                    }
                }
                Op::Scale(x, c) => {
                    if rg(*x) {
                        send(*x, g.iter().map(|v| v * c).collect(), &mut grads);
                    }
                }
                Op::Unary(kind, x) => {
                    if rg(*x) {
                        let contrib: Vec<f64> = match kind {
                            Activation::Relu => {
                                let tx = &nodes[x.0].value;
                                g.iter()
                                    .zip(tx.data())
                                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                                    .collect()
                            }
                            Activation::Tanh => {
                                let y = &node.value;
                                g.iter().zip(y.data()).map(|(gv, &yv)| gv * (1.0 - yv * yv)).collect()
                            }
                            Activation::Exp => {
                                let y = &node.value;
                                g.iter().zip(y.data()).map(|(gv, &yv)| gv * yv).collect()
                            }
                        };
                        send(*x, contrib, &mut grads);
                    }
                }
                Op::SoftmaxTemp { logits, tau } => {
                    let y = node.value.data();
                    let tz = &nodes[logits.0].value;
                    let tt = &nodes[tau.0].value;
                    let (m, n) = (tz.shape()[0], tz.shape()[1]);
                    let mut dz = vec![0.0; m * n];
                    let mut dt = vec![0.0; m];
                    for r in 0..m {
                        let t = tt.data()[r];
                        let yrow = &y[r * n..(r + 1) * n];
                        let grow = &g[r * n..(r + 1) * n];
                        let zrow = &tz.data()[r * n..(r + 1) * n];
                        let gy: f64 = grow.iter().zip(yrow).map(|(gv, yv)| gv * yv).sum();
                        let mut dtau = 0.0;
                        for j in 0..n {
                            let ds = yrow[j] * (grow[j] - gy); // d loss / d (z_j / tau)
                            dz[r * n + j] = ds / t;
                            dtau -= ds * zrow[j] / (t * t);
                        }
                        dt[r] = dtau;
                    }
                    if rg(*logits) {
                        send(*logits, dz, &mut grads);
                    }
                    if rg(*tau) {
                        send(*tau, dt, &mut grads);
                    }
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let tx = &nodes[x.0].value;
                    let tg = &nodes[gamma.0].value;
                    let (n, d) = (tx.shape()[0], tx.shape()[1]);
                    let mut dx = vec![0.0; n * d];
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    for i in 0..n {
                        let row = &tx.data()[i * d..(i + 1) * d];
                        let grow = &g[i * d..(i + 1) * d];
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        // dxhat, plus accumulation for gamma/beta
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        let mut dxhat = vec![0.0; d];
                        for j in 0..d {
                            let xhat = (row[j] - mean) * inv;
                            dgamma[j] += grow[j] * xhat;
                            dbeta[j] += grow[j];
                            dxhat[j] = grow[j] * tg.data()[j];
                            sum_dxhat += dxhat[j];
                            sum_dxhat_xhat += dxhat[j] * xhat;
                        }
                        for j in 0..d {
                            let xhat = (row[j] - mean) * inv;
                            dx[i * d + j] = inv
                                * (dxhat[j] - sum_dxhat / d as f64 - xhat * sum_dxhat_xhat / d as f64);
                        }
                    }
                    if rg(*x) {
                        send(*x, dx, &mut grads);
                    }
                    if rg(*gamma) {
                        send(*gamma, dgamma, &mut grads);
                    }
                    if rg(*beta) {
                        send(*beta, dbeta, &mut grads);
                    }
                }
                Op::AvgPool2d { x, k } => {
                    if rg(*x) {
                        let tx = &nodes[x.0].value;
                        let (h, w, d) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                        let ow = w / k;
                        let inv = 1.0 / (k * k) as f64;
                        let mut dx = vec![0.0; h * w * d];
                        for i in 0..h {
                            for j in 0..w {
                                let src = &g[((i / k) * ow + j / k) * d..((i / k) * ow + j / k + 1) * d];
                                let dst = &mut dx[(i * w + j) * d..(i * w + j + 1) * d];
                                for c in 0..d {
                                    dst[c] = src[c] * inv;
                                }
                            }
                        }
                        send(*x, dx, &mut grads);
                    }
                }
                Op::UpsampleNearest { x, factor } => {
                    if rg(*x) {
                        let tx = &nodes[x.0].value;
                        let (h, w, d) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                        let ow = w * factor;
                        let mut dx = vec![0.0; h * w * d];
                        for i in 0..h * factor {
                            for j in 0..ow {
                                let src = &g[(i * ow + j) * d..(i * ow + j + 1) * d];
                                let dst = &mut dx
                                    [((i / factor) * w + j / factor) * d..((i / factor) * w + j / factor + 1) * d];
                                for c in 0..d {
                                    dst[c] += src[c];
                                }
                            }
                        }
                        send(*x, dx, &mut grads);
                    }
                }
                Op::Concat { parts, axis } => {
                    let out_shape = node.value.shape().to_vec();
                    let outer: usize = out_shape[..*axis].iter().product();
                    let inner: usize = out_shape[*axis + 1..].iter().product();
                    let out_block = out_shape[*axis] * inner;
                    let mut offset = 0;
                    for p in parts {
                        let ps = nodes[p.0].value.shape().to_vec();
                        let block = ps[*axis] * inner;
                        if rg(*p) {
                            let mut dp = vec![0.0; nodes[p.0].value.numel()];
                            for o in 0..outer {
                                dp[o * block..(o + 1) * block]
                                    .copy_from_slice(&g[o * out_block + offset..o * out_block + offset + block]);
                            }
                            send(*p, dp, &mut grads);
                        }
                        offset += block;
                    }
                }
                Op::SliceCols { x, start, len } => {
                    if rg(*x) {
                        let tx = &nodes[x.0].value;
                        let (n, d) = (tx.shape()[0], tx.shape()[1]);
                        let mut dx = vec![0.0; n * d];
                        for i in 0..n {
                            dx[i * d + start..i * d + start + len]
                                .copy_from_slice(&g[i * len..(i + 1) * len]);
                        }
                        send(*x, dx, &mut grads);
                    }
                }
                Op::MeanRows(x) => {
                    if rg(*x) {
                        let tx = &nodes[x.0].value;
                        let (n, d) = (tx.shape()[0], tx.shape()[1]);
                        let inv = 1.0 / n as f64;
                        let mut dx = vec![0.0; n * d];
                        for i in 0..n {
                            for j in 0..d {
                                dx[i * d + j] = g[j] * inv;
                            }
                        }
                        send(*x, dx, &mut grads);
                    }
                }
                Op::RowDot(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, d) = (ta.shape()[0], ta.shape()[1]);
                    if rg(*a) {
                        let mut da = vec![0.0; m * d];
                        for i in 0..m {
                            for j in 0..d {
                                da[i * d + j] = g[i] * tb.data()[i * d + j];
                            }
                        }
                        send(*a, da, &mut grads);
                    }
                    if rg(*b) {
                        let mut db = vec![0.0; m * d];
                        for i in 0..m {
                            for j in 0..d {
                                db[i * d + j] = g[i] * ta.data()[i * d + j];
                            }
                        }
                        send(*b, db, &mut grads);
                    }
                }
                Op::Reshape(x) => {
                    if rg(*x) {
                        send(*x, g.clone(), &mut grads);
                    }
                }
                Op::BceWithLogits { logits, labels } => {
                    if rg(*logits) {
                        let tz = &nodes[logits.0].value;
                        let m = labels.len() as f64;
                        let contrib: Vec<f64> = tz
                            .data()
                            .iter()
                            .zip(labels.iter())
                            .map(|(&z, &y)| g[0] * (sigmoid(z) - y) / m)
                            .collect();
                        send(*logits, contrib, &mut grads);
                    }
                }
            }
        }

        let out = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| match (g, matches!(nodes[id].op, Op::Leaf)) {
                (Some(data), true) => {
                    Some(Tensor::new(nodes[id].value.shape().to_vec(), data).expect("grad shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: out })
    }
}
