use super::kernels::{conv_backward, conv_forward, gemm, log_softmax, ConvGeom};
use super::store::{ParamId, ParamStore};
use super::{shape_err, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Gate matrices of an LSTM cell, gates stacked in (input, forget, cell, output) order.
#[derive(Debug, Clone)]
pub struct LstmWeights<T> {
    /// `[4m, d]`
    pub w_ih: T,
    /// `[4m, m]`
    pub w_hh: T,
    /// `[4m]`
    pub bias: T,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Dense {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    GlobalAvgPool(NodeId),
    Concat(NodeId, NodeId),
    SliceCols {
        input: NodeId,
        start: usize,
    },
    GatherRows {
        input: NodeId,
        rows: Vec<usize>,
    },
    SoftmaxCe {
        logits: NodeId,
        targets: Vec<f64>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// A computation record built during one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize), TensorError> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(shape_err(op, "a 2-D tensor", format!("{:?}", t.shape()))),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<NodeId, TensorError> {
        if !value.is_finite() {
            let name = match op {
                Op::Input => "input",
                Op::Param(_) => "param",
                Op::Conv2d { .. } => "conv2d",
                Op::Dense { .. } => "dense",
                Op::SoftmaxCe { .. } => "softmax_cross_entropy",
                _ => "elementwise",
            };
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// A constant leaf; receives no gradient.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node { value, op: Op::Input });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param(id),
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Batched convolution over `[N,C,H,W]` input.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId, TensorError> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        if x.shape().len() != 4 {
            return Err(shape_err("conv2d", "[N,C,H,W]", format!("{:?}", x.shape())));
        }
        let geom = ConvGeom::new(x.shape(), w.shape(), stride, padding)?;
        if b.len() != geom.cout {
            return Err(shape_err("conv2d", format!("bias of {}", geom.cout), b.len()));
        }
        let (y, cols) = conv_forward(&geom, x.data(), w.data(), b.data());
        let value = Tensor::from_parts(vec![geom.n, geom.cout, geom.oh, geom.ow], y);
        self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
        )
    }

    /// `x·Wᵀ + b` for `x: [N,in]`, `W: [out,in]`, `b: [out]`.
    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId, TensorError> {
        let (n, din) = dims2(self.value(input), "dense")?;
        let (dout, win) = dims2(self.value(weight), "dense")?;
        if din != win {
            return Err(shape_err("dense", format!("{win} input features"), din));
        }
        let mut y = vec![0.0; n * dout];
        if let Some(b) = bias {
            let b = self.value(b);
            if b.len() != dout {
                return Err(shape_err("dense", format!("bias of {dout}"), b.len()));
            }
            for row in y.chunks_mut(dout) {
                row.copy_from_slice(b.data());
            }
        }
        gemm(
            n,
            din,
            dout,
            1.0,
            self.value(input).data(),
            false,
            self.value(weight).data(),
            true,
            1.0,
            &mut y,
        );
        self.push(Tensor::from_parts(vec![n, dout], y), Op::Dense { input, weight, bias })
    }

    fn map(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> Result<NodeId, TensorError> {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(value, op)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.map(a, |v| v.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.map(a, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId, TensorError> {
        self.map(a, |v| v * k, Op::Scale(a, k))
    }

    fn zip(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<NodeId, TensorError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("elementwise", format!("{:?}", x.shape()), format!("{:?}", y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(value, op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip(a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip(a, b, |p, q| p * q, Op::Mul(a, b))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// `[N,C,H,W] → [N,C]` mean over spatial positions.
    pub fn global_avg_pool(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let x = self.value(a);
        let [n, c, h, w] = *x.shape() else {
            return Err(shape_err("global_avg_pool", "[N,C,H,W]", format!("{:?}", x.shape())));
        };
        let inv = 1.0 / (h * w) as f64;
        let data = x.data().chunks(h * w).map(|p| p.iter().sum::<f64>() * inv).collect();
        self.push(Tensor::from_parts(vec![n, c], data), Op::GlobalAvgPool(a))
    }

    /// Column-wise concatenation of `[N,p]` and `[N,q]`.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (n, p) = dims2(self.value(a), "concat")?;
        let (n2, q) = dims2(self.value(b), "concat")?;
        if n != n2 {
            return Err(shape_err("concat", format!("{n} rows"), n2));
        }
        let mut data = Vec::with_capacity(n * (p + q));
        for r in 0..n {
            data.extend_from_slice(&self.value(a).data()[r * p..(r + 1) * p]);
            data.extend_from_slice(&self.value(b).data()[r * q..(r + 1) * q]);
        }
        self.push(Tensor::from_parts(vec![n, p + q], data), Op::Concat(a, b))
    }

    /// Columns `start..start+len` of a `[N,D]` tensor.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, TensorError> {
        let (n, d) = dims2(self.value(a), "slice_cols")?;
        if start + len > d || len == 0 {
            return Err(shape_err("slice_cols", format!("range within {d}"), format!("{start}..{}", start + len)));
        }
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&x[r * d + start..r * d + start + len]);
        }
        self.push(Tensor::from_parts(vec![n, len], data), Op::SliceCols { input: a, start })
    }

    /// Selects rows of a `[U,D]` tensor; rows may repeat.
    pub fn gather_rows(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId, TensorError> {
        let (u, d) = dims2(self.value(a), "gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= u) {
            return Err(shape_err("gather_rows", format!("row < {u}"), bad));
        }
        if rows.is_empty() {
            return Err(shape_err("gather_rows", "at least one row", 0));
        }
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(&x[r * d..(r + 1) * d]);
        }
        self.push(
            Tensor::from_parts(vec![rows.len(), d], data),
            Op::GatherRows {
                input: a,
                rows: rows.to_vec(),
            },
        )
    }

    /// Sum over rows of `weight_n · CE(softmax(logits_n), target_n)`; a scalar.
    ///
    /// `targets` is row-major `[N,K]`; each row must be a distribution.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[f64],
        weights: &[f64],
    ) -> Result<NodeId, TensorError> {
        let (n, k) = dims2(self.value(logits), "softmax_cross_entropy")?;
        if targets.len() != n * k || weights.len() != n {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("{n}x{k} targets and {n} weights"),
                format!("{} targets and {} weights", targets.len(), weights.len()),
            ));
        }
        let x = self.value(logits).data();
        let mut probs = Vec::with_capacity(n * k);
        let mut loss = 0.0;
        for r in 0..n {
            let logp = log_softmax(&x[r * k..(r + 1) * k]);
            let t = &targets[r * k..(r + 1) * k];
            loss -= weights[r] * t.iter().zip(&logp).map(|(a, b)| a * b).sum::<f64>();
            probs.extend(logp.iter().map(|l| l.exp()));
        }
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        )
    }

    /// One batched LSTM update; `x: [B,d]`, `h, c: [B,m]`.
    pub fn lstm_step(
        &mut self,
        x: NodeId,
        h: NodeId,
        c: NodeId,
        w: &LstmWeights<NodeId>,
    ) -> Result<(NodeId, NodeId), TensorError> {
        let (_, m) = dims2(self.value(h), "lstm_step")?;
        let gates_x = self.dense(x, w.w_ih, Some(w.bias))?;
        let gates_h = self.dense(h, w.w_hh, None)?;
        let gates = self.add(gates_x, gates_h)?;
        if self.value(gates).shape()[1] != 4 * m {
            return Err(shape_err("lstm_step", 4 * m, self.value(gates).shape()[1]));
        }
        let i = self.slice_cols(gates, 0, m)?;
        let i = self.sigmoid(i)?;
        let f = self.slice_cols(gates, m, m)?;
        let f = self.sigmoid(f)?;
        let g = self.slice_cols(gates, 2 * m, m)?;
        let g = self.tanh(g)?;
        let o = self.slice_cols(gates, 3 * m, m)?;
        let o = self.sigmoid(o)?;
        let keep = self.mul(f, c)?;
        let write = self.mul(i, g)?;
        let c_next = self.add(keep, write)?;
        let squashed = self.tanh(c_next)?;
        let h_next = self.mul(o, squashed)?;
        Ok((h_next, c_next))
    }

    /// Reverse pass from a scalar node.
    ///
    /// Every parameter gradient in `store` is overwritten: parameters not
    /// reachable from `loss` end with zero gradient.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore) -> Result<(), TensorError> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(TensorError::Usage("backward called without a recorded forward pass".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", "scalar loss", format!("{:?}", self.value(loss).shape())));
        }
        store.zero_grad();
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
            grads[id.0].get_or_insert_with(|| vec![0.0; len])
        }

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => {
                    for (g, d) in store.grad_mut(*pid).data_mut().iter_mut().zip(&dy) {
                        *g += d;
                    }
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                    cols,
                } => {
                    let w = self.value(*weight).data();
                    let mut dw = vec![0.0; w.len()];
                    let mut db = vec![0.0; geom.cout];
                    let in_len = self.value(*input).len();
                    let dx = if matches!(self.nodes[input.0].op, Op::Input) {
                        None
                    } else {
                        Some(acc(&mut grads, *input, in_len))
                    };
                    conv_backward(geom, cols, w, &dy, dx.map(|v| v.as_mut_slice()), &mut dw, &mut db);
                    add_into(acc(&mut grads, *weight, dw.len()), &dw);
                    add_into(acc(&mut grads, *bias, db.len()), &db);
                }
                Op::Dense { input, weight, bias } => {
                    let x = self.value(*input);
                    let w = self.value(*weight);
                    let (n, din) = (x.shape()[0], x.shape()[1]);
                    let dout = w.shape()[0];
                    if !matches!(self.nodes[input.0].op, Op::Input) {
                        let dx = acc(&mut grads, *input, n * din);
                        gemm(n, dout, din, 1.0, &dy, false, w.data(), false, 1.0, dx);
                    }
                    let dw = acc(&mut grads, *weight, dout * din);
                    gemm(dout, n, din, 1.0, &dy, true, x.data(), false, 1.0, dw);
                    if let Some(b) = bias {
                        let db = acc(&mut grads, *b, dout);
                        for row in dy.chunks(dout) {
                            add_into(db, row);
                        }
                    }
                }
                Op::Relu(a) => {
                    let x = self.value(*a).data();
                    let g = acc(&mut grads, *a, x.len());
                    for ((gi, xi), di) in g.iter_mut().zip(x).zip(&dy) {
                        if *xi > 0.0 {
                            *gi += di;
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    let g = acc(&mut grads, *a, y.len());
                    for ((gi, yi), di) in g.iter_mut().zip(y).zip(&dy) {
                        *gi += di * yi * (1.0 - yi);
                    }
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    let g = acc(&mut grads, *a, y.len());
                    for ((gi, yi), di) in g.iter_mut().zip(y).zip(&dy) {
                        *gi += di * (1.0 - yi * yi);
                    }
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads, *a, dy.len()), &dy);
                    add_into(acc(&mut grads, *b, dy.len()), &dy);
                }
                Op::Mul(a, b) => {
                    let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                    let ga = acc(&mut grads, *a, dy.len());
                    for ((g, d), v) in ga.iter_mut().zip(&dy).zip(xb) {
                        *g += d * v;
                    }
                    let gb = acc(&mut grads, *b, dy.len());
                    for ((g, d), v) in gb.iter_mut().zip(&dy).zip(xa) {
                        *g += d * v;
                    }
                }
                Op::Scale(a, k) => {
                    let g = acc(&mut grads, *a, dy.len());
                    for (gi, di) in g.iter_mut().zip(&dy) {
                        *gi += k * di;
                    }
                }
                Op::Sum(a) => {
                    let len = self.value(*a).len();
                    let g = acc(&mut grads, *a, len);
                    for gi in g.iter_mut() {
                        *gi += dy[0];
                    }
                }
                Op::GlobalAvgPool(a) => {
                    let s = self.value(*a).shape();
                    let area = s[2] * s[3];
                    let inv = 1.0 / area as f64;
                    let g = acc(&mut grads, *a, s.iter().product());
                    for (plane, d) in g.chunks_mut(area).zip(&dy) {
                        for gi in plane {
                            *gi += d * inv;
                        }
                    }
                }
                Op::Concat(a, b) => {
                    let p = self.value(*a).shape()[1];
                    let q = self.value(*b).shape()[1];
                    let n = dy.len() / (p + q);
                    let ga = acc(&mut grads, *a, n * p);
                    for r in 0..n {
                        add_into(&mut ga[r * p..(r + 1) * p], &dy[r * (p + q)..r * (p + q) + p]);
                    }
                    let gb = acc(&mut grads, *b, n * q);
                    for r in 0..n {
                        add_into(&mut gb[r * q..(r + 1) * q], &dy[r * (p + q) + p..(r + 1) * (p + q)]);
                    }
                }
                Op::SliceCols { input, start } => {
                    let d = self.value(*input).shape()[1];
                    let (n, len) = (node.value.shape()[0], node.value.shape()[1]);
                    let g = acc(&mut grads, *input, n * d);
                    for r in 0..n {
                        add_into(&mut g[r * d + start..r * d + start + len], &dy[r * len..(r + 1) * len]);
                    }
                }
                Op::GatherRows { input, rows } => {
                    let s = self.value(*input).shape();
                    let d = s[1];
                    let g = acc(&mut grads, *input, s[0] * d);
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut g[r * d..(r + 1) * d], &dy[k * d..(k + 1) * d]);
                    }
                }
                Op::SoftmaxCe {
                    logits,
                    targets,
                    weights,
                    probs,
                } => {
                    let k = self.value(*logits).shape()[1];
                    let g = acc(&mut grads, *logits, probs.len());
                    for (r, w) in weights.iter().enumerate() {
                        for j in 0..k {
                            let i = r * k + j;
                            g[i] += dy[0] * w * (probs[i] - targets[i]);
                        }
                    }
                }
            }
        }
        for id in store.ids().collect::<Vec<_>>() {
            if !store.grad(id).is_finite() {
                return Err(TensorError::NonFiniteGradient {
                    param: store.name(id).to_string(),
                });
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
