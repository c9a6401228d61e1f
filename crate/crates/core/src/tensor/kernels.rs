use super::graph::{Graph, LstmWeights};
use super::{shape_err, Tensor, TensorError};

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers.
///
/// `ta`/`tb` select the transpose of the stored matrix; `a` is stored as
/// `m×k` (or `k×m` when transposed), `b` as `k×n` (or `n×k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover exactly the strided extents described above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv_output_len(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self, TensorError> {
        let (n, cin, h, w) = match *input {
            [c, h, w] => (1, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(shape_err("conv2d", "[C,H,W] or [N,C,H,W] input", format!("{input:?}"))),
        };
        let [cout, kc, kh, kw] = *kernel else {
            return Err(shape_err("conv2d", "[Cout,Cin,kH,kW] kernels", format!("{kernel:?}")));
        };
        if kc != cin {
            return Err(shape_err("conv2d", format!("{cin} kernel channels"), kc));
        }
        if stride == 0 {
            return Err(TensorError::Usage("conv2d stride must be positive".into()));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(shape_err(
                "conv2d",
                format!("kernel within padded {}x{}", h + 2 * pad, w + 2 * pad),
                format!("{kh}x{kw}"),
            ));
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            oh: conv_output_len(h, kh, stride, pad),
            ow: conv_output_len(w, kw, stride, pad),
        })
    }

    pub fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let out = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            out.fill(0.0);
                            continue;
                        }
                        let src = &image[(c * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *o = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut image[(c * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Batched convolution forward. Returns the output and the im2col buffers
/// (one `[patch, positions]` block per image) needed for the backward pass.
pub(crate) fn conv_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let k = g.patch();
    let p = g.positions();
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * p;
    let mut cols = vec![0.0; g.n * k * p];
    let mut y = vec![0.0; g.n * out_len];
    for i in 0..g.n {
        let col = &mut cols[i * k * p..(i + 1) * k * p];
        g.im2col(&x[i * in_len..(i + 1) * in_len], col);
        let out = &mut y[i * out_len..(i + 1) * out_len];
        for (o, row) in out.chunks_mut(p).enumerate() {
            row.fill(b[o]);
        }
        gemm(g.cout, k, p, 1.0, w, false, col, false, 1.0, out);
    }
    (y, cols)
}

/// Accumulates input, kernel and bias gradients for one convolution.
pub(crate) fn conv_backward(
    g: &ConvGeom,
    cols: &[f64],
    w: &[f64],
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dw: &mut [f64],
    db: &mut [f64],
) {
    let k = g.patch();
    let p = g.positions();
    let out_len = g.cout * p;
    let in_len = g.cin * g.h * g.w;
    for i in 0..g.n {
        let dyi = &dy[i * out_len..(i + 1) * out_len];
        let col = &cols[i * k * p..(i + 1) * k * p];
        gemm(g.cout, p, k, 1.0, dyi, false, col, true, 1.0, dw);
        for (o, row) in dyi.chunks(p).enumerate() {
            db[o] += row.iter().sum::<f64>();
        }
    }
    if let Some(dx) = dx {
        let mut dcol = vec![0.0; k * p];
        for i in 0..g.n {
            let dyi = &dy[i * out_len..(i + 1) * out_len];
            gemm(k, g.cout, p, 1.0, w, true, dyi, false, 0.0, &mut dcol);
            g.col2im(&dcol, &mut dx[i * in_len..(i + 1) * in_len]);
        }
    }
}

/// Cross-correlation of a `[Cin,H,W]` (or batched `[N,Cin,H,W]`) input.
pub fn conv2d(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor, TensorError> {
    let g = ConvGeom::new(input.shape(), kernels.shape(), stride, padding)?;
    if bias.len() != g.cout {
        return Err(shape_err("conv2d", format!("bias of {}", g.cout), bias.len()));
    }
    let (y, _) = conv_forward(&g, input.data(), kernels.data(), bias.data());
    let shape = if input.shape().len() == 3 {
        vec![g.cout, g.oh, g.ow]
    } else {
        vec![g.n, g.cout, g.oh, g.ow]
    };
    Ok(Tensor::from_parts(shape, y))
}

/// Numerically stable softmax of one row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub(crate) fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Weighted cross-entropy of logits against a soft target distribution.
///
/// Returns the loss and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &[f64], target: &[f64], weight: f64) -> Result<(f64, Vec<f64>), TensorError> {
    if logits.len() != target.len() {
        return Err(shape_err("softmax_cross_entropy", logits.len(), target.len()));
    }
    if !logits.iter().all(|l| l.is_finite()) {
        return Err(TensorError::NonFinite {
            op: "softmax_cross_entropy",
        });
    }
    if !(weight > 0.0) {
        return Err(TensorError::Usage(format!("loss weight must be positive, got {weight}")));
    }
    let sum: f64 = target.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || target.iter().any(|&t| t < 0.0) {
        return Err(TensorError::Usage(format!("target is not a distribution: {target:?}")));
    }
    let logp = log_softmax(logits);
    let loss = -weight * target.iter().zip(&logp).map(|(t, lp)| t * lp).sum::<f64>();
    let grad = logp
        .iter()
        .zip(target)
        .map(|(lp, t)| weight * (lp.exp() - t))
        .collect();
    Ok((loss, grad))
}

/// One LSTM cell update on unbatched state vectors.
pub fn lstm_step(
    x: &Tensor,
    h: &Tensor,
    c: &Tensor,
    weights: &LstmWeights<Tensor>,
) -> Result<(Tensor, Tensor), TensorError> {
    let mut graph = Graph::new();
    let row = |t: &Tensor| Tensor::from_parts(vec![1, t.len()], t.data().to_vec());
    let xi = graph.input(row(x));
    let hi = graph.input(row(h));
    let ci = graph.input(row(c));
    let w = LstmWeights {
        w_ih: graph.input(weights.w_ih.clone()),
        w_hh: graph.input(weights.w_hh.clone()),
        bias: graph.input(weights.bias.clone()),
    };
    let (h2, c2) = graph.lstm_step(xi, hi, ci, &w)?;
    Ok((
        Tensor::vector(graph.value(h2).data().to_vec()),
        Tensor::vector(graph.value(c2).data().to_vec()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_kernel_scales_input() {
        let x = Tensor::full(&[1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 1, 1], 2.0);
        let y = conv2d(&x, &k, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn two_by_two_sum() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::full(&[1, 1, 2, 2], 1.0);
        let y = conv2d(&x, &k, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn zero_kernels_broadcast_bias() {
        let x = Tensor::new(vec![2, 4, 5], (0..40).map(|v| v as f64 * 0.3 - 2.0).collect()).unwrap();
        let k = Tensor::zeros(&[3, 2, 3, 3]);
        let b = Tensor::vector(vec![0.5, -1.0, 2.0]);
        let y = conv2d(&x, &k, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), &[3, 2, 3]);
        for (o, plane) in y.data().chunks(6).enumerate() {
            assert!(plane.iter().all(|&v| v == b.data()[o]));
        }
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        let err = conv2d(&x, &k, &Tensor::zeros(&[1]), 1, 0).unwrap_err();
        assert!(matches!(err, TensorError::Shape { op: "conv2d", .. }));
    }

    #[test]
    fn output_shape_follows_floor_formula() {
        for h in 3..12 {
            for w in 3..9 {
                for k in 1..=3 {
                    for stride in 1..=3 {
                        for pad in 0..=2 {
                            let x = Tensor::zeros(&[1, h, w]);
                            let ker = Tensor::zeros(&[1, 1, k, k]);
                            let y = conv2d(&x, &ker, &Tensor::zeros(&[1]), stride, pad).unwrap();
                            let eh = (h + 2 * pad - k) / stride + 1;
                            let ew = (w + 2 * pad - k) / stride + 1;
                            assert_eq!(y.shape(), &[1, eh, ew]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let (loss, grad) = softmax_cross_entropy(&[0.0; 3], &[1.0, 0.0, 0.0], 1.0).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
        let expected = [-2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];
        for (g, e) in grad.iter().zip(expected) {
            assert!((g - e).abs() < 1e-12);
        }

        let third = 1.0 / 3.0;
        let (loss, grad) = softmax_cross_entropy(&[0.0; 3], &[third, third, 1.0 - 2.0 * third], 1.0).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
        assert!(grad.iter().all(|g| g.abs() < 1e-12));

        // -(2/3) ln(e/(e+2)) - (1/3) ln(1/(e+2))
        let (loss, _) = softmax_cross_entropy(&[1.0, 0.0, 0.0], &[2.0 / 3.0, third, 0.0], 1.0).unwrap();
        let e = std::f64::consts::E;
        let oracle = -(2.0 / 3.0) * (e / (e + 2.0)).ln() - third * (1.0 / (e + 2.0)).ln();
        assert!((loss - oracle).abs() < 1e-12);
        assert!((loss - 0.884778).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_bad_input() {
        assert!(matches!(
            softmax_cross_entropy(&[f64::NAN, 0.0, 0.0], &[1.0, 0.0, 0.0], 1.0),
            Err(TensorError::NonFinite { .. })
        ));
        assert!(softmax_cross_entropy(&[0.0; 3], &[1.0, 0.0, 0.0], 0.0).is_err());
        assert!(softmax_cross_entropy(&[0.0; 3], &[0.5, 0.0, 0.0], 1.0).is_err());
    }

    fn zero_lstm(d: usize, m: usize) -> LstmWeights<Tensor> {
        LstmWeights {
            w_ih: Tensor::zeros(&[4 * m, d]),
            w_hh: Tensor::zeros(&[4 * m, m]),
            bias: Tensor::zeros(&[4 * m]),
        }
    }

    #[test]
    fn lstm_zero_weights() {
        let w = zero_lstm(2, 1);
        let x = Tensor::vector(vec![0.3, -0.7]);
        let (h, c) = lstm_step(&x, &Tensor::zeros(&[1]), &Tensor::zeros(&[1]), &w).unwrap();
        assert_eq!(h.data(), &[0.0]);
        assert_eq!(c.data(), &[0.0]);

        let (h, c) = lstm_step(&x, &Tensor::zeros(&[1]), &Tensor::scalar(1.0), &w).unwrap();
        assert!((c.item() - 0.5).abs() < 1e-15);
        assert!((h.item() - 0.5 * 0.5f64.tanh()).abs() < 1e-15);
        assert!((h.item() - 0.231059).abs() < 1e-6);
    }

    #[test]
    fn lstm_is_deterministic_and_checks_shapes() {
        let w = LstmWeights {
            w_ih: Tensor::new(vec![8, 3], (0..24).map(|v| (v as f64 * 0.37).sin()).collect()).unwrap(),
            w_hh: Tensor::new(vec![8, 2], (0..16).map(|v| (v as f64 * 0.71).cos()).collect()).unwrap(),
            bias: Tensor::vector((0..8).map(|v| v as f64 * 0.1).collect()),
        };
        let x = Tensor::vector(vec![0.1, 0.2, -0.3]);
        let h = Tensor::vector(vec![0.5, -0.5]);
        let c = Tensor::vector(vec![0.2, 0.9]);
        let a = lstm_step(&x, &h, &c, &w).unwrap();
        let b = lstm_step(&x, &h, &c, &w).unwrap();
        assert_eq!(a, b);

        let bad = Tensor::vector(vec![0.1, 0.2]);
        assert!(matches!(lstm_step(&bad, &h, &c, &w), Err(TensorError::Shape { .. })));
    }
}
