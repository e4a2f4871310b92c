//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Every forward op appends a node holding its output value and a record of
//! its inputs; `backward` walks the tape in reverse, accumulating gradients.
//! A `Graph` is built per training step and must not be driven from two
//! threads (enforced by `&mut self`).
//!
//! Conventions fixed here so the finite-difference oracles are reproducible:
//! - convolution is cross-correlation (no kernel flip);
//! - relu subgradient at exactly 0 is 0;
//! - bilinear interpolation is align-corners-false with edge clamping;
//! - binary ops support exact-shape and scalar (1-element) broadcast only.

use crate::error::{Error, Result};
use crate::tensor::{c, nchw_index, Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(usize);

struct Node<T: Scalar> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    /// Gradient is tracked for this node (leaf flag, or any input tracked).
    needs: bool,
    op: Op<T>,
}

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: usize,
        pad: usize,
        /// im2col buffers, one `[k_total][out_hw]` block per sample.
        cols: Vec<T>,
    },
    Linear {
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
    },
    Relu(TensorId),
    LeakyRelu(TensorId, T),
    Sigmoid(TensorId),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    Scale(TensorId, T),
    AddConst(TensorId, T),
    Neg(TensorId),
    InstanceNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: T,
        /// per-(n,c) mean and inverse std, saved by the forward pass
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Softmax {
        x: TensorId,
        axis: usize,
    },
    Interpolate(TensorId),
    MaxPool {
        x: TensorId,
        argmax: Vec<u32>,
    },
    GlobalAvgPool(TensorId),
    SumAll(TensorId),
    SumPerChannel(TensorId),
    ConcatChannels(TensorId, TensorId),
    Clamp {
        x: TensorId,
        lo: Vec<T>,
        hi: Vec<T>,
    },
    ExtractCrop {
        image: TensorId,
        center: TensorId,
        size: usize,
    },
    Paste {
        features: TensorId,
        row0: usize,
        col0: usize,
    },
    /// Forward: one-hot of argmax (first maximum wins). Backward: identity.
    HardmaxSte(TensorId),
    /// Forward: clip/scale/round quantizer. Backward: identity inside the clip
    /// range, zero outside.
    QuantizeSte {
        x: TensorId,
        scale: T,
    },
    Select {
        x: TensorId,
        index: usize,
    },
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf value. Gradients are accumulated for it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> TensorId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, id: TensorId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor<T>, needs: bool, op: Op<T>) -> TensorId {
        self.nodes.push(Node { value, grad: None, needs, op });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs
    }

    fn shape_of(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    // ── elementwise and broadcast helpers ────────────────────────────

    fn binary_shapes(&self, a: TensorId, b: TensorId, what: &str) -> Result<Vec<usize>> {
        let sa = self.shape_of(a);
        let sb = self.shape_of(b);
        if sa == sb {
            return Ok(sa.to_vec());
        }
        let na: usize = sa.iter().product();
        let nb: usize = sb.iter().product();
        if na == 1 {
            return Ok(sb.to_vec());
        }
        if nb == 1 {
            return Ok(sa.to_vec());
        }
        Err(Error::shape(what, format!("{:?} (or scalar)", sa), format!("{:?}", sb)))
    }

    fn binary_forward(
        &mut self,
        a: TensorId,
        b: TensorId,
        what: &str,
        f: impl Fn(T, T) -> T,
        op: impl Fn(TensorId, TensorId) -> Op<T>,
    ) -> Result<TensorId> {
        let shape = self.binary_shapes(a, b, what)?;
        let da = self.nodes[a.0].value.data();
        let db = self.nodes[b.0].value.data();
        let numel: usize = shape.iter().product();
        let mut out = Vec::with_capacity(numel);
        if da.len() == db.len() {
            for i in 0..numel {
                out.push(f(da[i], db[i]));
            }
        } else if da.len() == 1 {
            for i in 0..numel {
                out.push(f(da[0], db[i]));
            }
        } else {
            for i in 0..numel {
                out.push(f(da[i], db[0]));
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, needs, op(a, b)))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_forward(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_forward(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_forward(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_forward(a, b, "div", |x, y| x / y, Op::Div)
    }

    pub fn scale(&mut self, x: TensorId, k: T) -> TensorId {
        let v = self.nodes[x.0].value.clone();
        let out: Vec<T> = v.data().iter().map(|&a| a * k).collect();
        let needs = self.needs(x);
        self.push(Tensor::new(v.shape().to_vec(), out).unwrap(), needs, Op::Scale(x, k))
    }

    pub fn add_const(&mut self, x: TensorId, k: T) -> TensorId {
        let v = self.nodes[x.0].value.clone();
        let out: Vec<T> = v.data().iter().map(|&a| a + k).collect();
        let needs = self.needs(x);
        self.push(Tensor::new(v.shape().to_vec(), out).unwrap(), needs, Op::AddConst(x, k))
    }

    pub fn neg(&mut self, x: TensorId) -> TensorId {
        let v = self.nodes[x.0].value.clone();
        let out: Vec<T> = v.data().iter().map(|&a| -a).collect();
        let needs = self.needs(x);
        self.push(Tensor::new(v.shape().to_vec(), out).unwrap(), needs, Op::Neg(x))
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let v = self.nodes[x.0].value.clone();
        let out: Vec<T> = v.data().iter().map(|&a| a.max(T::zero())).collect();
        let needs = self.needs(x);
        self.push(Tensor::new(v.shape().to_vec(), out).unwrap(), needs, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: TensorId, slope: T) -> TensorId {
        let v = self.nodes[x.0].value.clone();
        let out: Vec<T> = v
            .data()
            .iter()
            .map(|&a| if a > T::zero() { a } else { a * slope })
            .collect();
        let needs = self.needs(x);
        self.push(Tensor::new(v.shape().to_vec(), out).unwrap(), needs, Op::LeakyRelu(x, slope))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let v = self.nodes[x.0].value.clone();
        let one = T::one();
        let out: Vec<T> = v.data().iter().map(|&a| one / (one + (-a).exp())).collect();
        let needs = self.needs(x);
        self.push(Tensor::new(v.shape().to_vec(), out).unwrap(), needs, Op::Sigmoid(x))
    }

    /// Elementwise clamp with per-element bounds; gradient passes where the
    /// input lies inside its interval.
    pub fn clamp(&mut self, x: TensorId, lo: Vec<T>, hi: Vec<T>) -> Result<TensorId> {
        let v = self.nodes[x.0].value.clone();
        if lo.len() != v.numel() || hi.len() != v.numel() {
            return Err(Error::shape(
                "clamp",
                format!("{} bounds", v.numel()),
                format!("lo {} / hi {}", lo.len(), hi.len()),
            ));
        }
        let out: Vec<T> = v
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| a.max(lo[i]).min(hi[i]))
            .collect();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(v.shape().to_vec(), out).unwrap(), needs, Op::Clamp { x, lo, hi }))
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let v = &self.nodes[x.0].value;
        let s = v.data().iter().fold(T::zero(), |acc, &a| acc + a);
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), needs, Op::SumAll(x))
    }

    /// `[N,C,H,W] -> [C]`, summing over batch and spatial dims.
    pub fn sum_per_channel(&mut self, x: TensorId) -> Result<TensorId> {
        let v = &self.nodes[x.0].value;
        let s = v.shape();
        if s.len() != 4 {
            return Err(Error::shape("sum_per_channel", "[N,C,H,W]", format!("{:?}", s)));
        }
        let (n_dim, c_dim, hw) = (s[0], s[1], s[2] * s[3]);
        let data = v.data();
        let mut out = vec![T::zero(); c_dim];
        for n in 0..n_dim {
            for ch in 0..c_dim {
                let base = (n * c_dim + ch) * hw;
                let mut acc = T::zero();
                for i in 0..hw {
                    acc = acc + data[base + i];
                }
                out[ch] = out[ch] + acc;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![c_dim], out)?, needs, Op::SumPerChannel(x)))
    }

    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        let v = &self.nodes[x.0].value;
        let s = v.shape();
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", "[N,C,H,W]", format!("{:?}", s)));
        }
        let (n_dim, c_dim, hw) = (s[0], s[1], s[2] * s[3]);
        let inv = T::one() / T::fromf(hw as f64);
        let data = v.data();
        let mut out = vec![T::zero(); n_dim * c_dim];
        for n in 0..n_dim {
            for ch in 0..c_dim {
                let base = (n * c_dim + ch) * hw;
                let mut acc = T::zero();
                for i in 0..hw {
                    acc = acc + data[base + i];
                }
                out[n * c_dim + ch] = acc * inv;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![n_dim, c_dim], out)?, needs, Op::GlobalAvgPool(x)))
    }

    /// Pick a single element as a `[1]` scalar tensor.
    pub fn select(&mut self, x: TensorId, index: usize) -> Result<TensorId> {
        let v = &self.nodes[x.0].value;
        if index >= v.numel() {
            return Err(Error::invalid(format!(
                "select index {} out of range for {} elements",
                index,
                v.numel()
            )));
        }
        let needs = self.needs(x);
        let val = v.data()[index];
        Ok(self.push(Tensor::scalar(val), needs, Op::Select { x, index }))
    }

    // ── softmax ──────────────────────────────────────────────────────

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let v = self.nodes[x.0].value.clone();
        let shape = v.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!("softmax axis {} for shape {:?}", axis, shape)));
        }
        let axis_len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let data = v.data();
        let mut out = vec![T::zero(); data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * axis_len * inner + k * inner + i;
                let mut mx = T::neg_infinity();
                for k in 0..axis_len {
                    mx = mx.max(data[at(k)]);
                }
                let mut sum = T::zero();
                for k in 0..axis_len {
                    let e = (data[at(k)] - mx).exp();
                    out[at(k)] = e;
                    sum = sum + e;
                }
                for k in 0..axis_len {
                    out[at(k)] = out[at(k)] / sum;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, needs, Op::Softmax { x, axis }))
    }

    /// Straight-through hard argmax: forward emits a one-hot vector (first
    /// maximum wins on ties), backward is the identity.
    pub fn hardmax_ste(&mut self, x: TensorId) -> TensorId {
        let v = &self.nodes[x.0].value;
        let data = v.data();
        let mut best = 0;
        for (i, &val) in data.iter().enumerate() {
            if val > data[best] {
                best = i;
            }
        }
        let mut out = vec![T::zero(); data.len()];
        out[best] = T::one();
        let needs = self.needs(x);
        self.push(Tensor::new(v.shape().to_vec(), out).unwrap(), needs, Op::HardmaxSte(x))
    }

    // ── quantization ─────────────────────────────────────────────────

    /// Clip/scale/round quantizer with a straight-through backward: the
    /// rounding is treated as identity and the clip gates the gradient to
    /// `|x| <= scale`. `r(bit) = 2^(bit-1)`; rounding is half-away-from-zero.
    pub fn quantize_ste(&mut self, x: TensorId, bit: u32, scale: T) -> Result<TensorId> {
        if bit < 2 {
            return Err(Error::invalid(format!("quantize bit width {} < 2", bit)));
        }
        if scale < T::zero() {
            return Err(Error::invalid("quantize scale a < 0".to_string()));
        }
        let v = self.nodes[x.0].value.clone();
        let out = quantize_values(v.data(), bit, scale);
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(v.shape().to_vec(), out).unwrap(), needs, Op::QuantizeSte { x, scale }))
    }

    // ── convolution / linear ─────────────────────────────────────────

    /// 2D cross-correlation with zero padding. Output size must divide
    /// exactly: `H' = (H + 2 pad - kh) / stride + 1`.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let xs = self.shape_of(x).to_vec();
        let ws = self.shape_of(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape("conv2d", "x [N,C,H,W], w [O,C,kh,kw]", format!("x {:?}, w {:?}", xs, ws)));
        }
        if stride < 1 {
            return Err(Error::invalid("conv2d stride must be >= 1".to_string()));
        }
        let (n_dim, c_in, h, w_dim) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wc != c_in {
            return Err(Error::shape("conv2d channels", format!("weight C_in {}", c_in), format!("{}", wc)));
        }
        if h + 2 * pad < kh || w_dim + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d kernel",
                format!("kernel <= padded input {}x{}", h + 2 * pad, w_dim + 2 * pad),
                format!("{}x{}", kh, kw),
            ));
        }
        if (h + 2 * pad - kh) % stride != 0 || (w_dim + 2 * pad - kw) % stride != 0 {
            return Err(Error::invalid(format!(
                "conv2d output size not exact: input {}x{}, kernel {}x{}, stride {}, pad {}",
                h, w_dim, kh, kw, stride, pad
            )));
        }
        if let Some(bid) = b {
            let bs = self.shape_of(bid);
            if bs != [c_out] {
                return Err(Error::shape("conv2d bias", format!("[{}]", c_out), format!("{:?}", bs)));
            }
        }
        let out_h = (h + 2 * pad - kh) / stride + 1;
        let out_w = (w_dim + 2 * pad - kw) / stride + 1;
        let k_total = c_in * kh * kw;
        let m_total = out_h * out_w;

        let xv = self.nodes[x.0].value.clone();
        let wv = self.nodes[w.0].value.clone();
        let bv = b.map(|bid| self.nodes[bid.0].value.clone());

        let mut cols = vec![T::zero(); n_dim * k_total * m_total];
        let mut out = vec![T::zero(); n_dim * c_out * m_total];
        let xd = xv.data();
        let wd = wv.data();
        for n in 0..n_dim {
            let col = &mut cols[n * k_total * m_total..(n + 1) * k_total * m_total];
            im2col(xd, n, c_in, h, w_dim, kh, kw, stride, pad, out_h, out_w, col);
            let o_base = n * c_out * m_total;
            // out[o][m] = sum_k w[o][k] * col[k][m]
            for o in 0..c_out {
                let orow = &mut out[o_base + o * m_total..o_base + (o + 1) * m_total];
                if let Some(ref bt) = bv {
                    let bias = bt.data()[o];
                    for v in orow.iter_mut() {
                        *v = bias;
                    }
                }
                for k in 0..k_total {
                    let a = wd[o * k_total + k];
                    if a == T::zero() {
                        continue;
                    }
                    let crow = &col[k * m_total..(k + 1) * m_total];
                    for (ov, &cv) in orow.iter_mut().zip(crow.iter()) {
                        *ov = *ov + a * cv;
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.map(|bid| self.needs(bid)).unwrap_or(false);
        Ok(self.push(
            Tensor::new(vec![n_dim, c_out, out_h, out_w], out)?,
            needs,
            Op::Conv2d { x, w, b, stride, pad, cols },
        ))
    }

    /// Fully connected layer: `x [N,F] * w [O,F]^T (+ b [O]) -> [N,O]`.
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: Option<TensorId>) -> Result<TensorId> {
        let xs = self.shape_of(x).to_vec();
        let ws = self.shape_of(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape("linear", "x [N,F], w [O,F]", format!("x {:?}, w {:?}", xs, ws)));
        }
        let (n_dim, f_dim) = (xs[0], xs[1]);
        let o_dim = ws[0];
        if let Some(bid) = b {
            let bs = self.shape_of(bid);
            if bs != [o_dim] {
                return Err(Error::shape("linear bias", format!("[{}]", o_dim), format!("{:?}", bs)));
            }
        }
        let xv = self.nodes[x.0].value.clone();
        let wv = self.nodes[w.0].value.clone();
        let bv = b.map(|bid| self.nodes[bid.0].value.clone());
        let xd = xv.data();
        let wd = wv.data();
        let mut out = vec![T::zero(); n_dim * o_dim];
        for n in 0..n_dim {
            for o in 0..o_dim {
                let mut acc = match &bv {
                    Some(bt) => bt.data()[o],
                    None => T::zero(),
                };
                let xrow = &xd[n * f_dim..(n + 1) * f_dim];
                let wrow = &wd[o * f_dim..(o + 1) * f_dim];
                for (xa, wa) in xrow.iter().zip(wrow.iter()) {
                    acc = acc + *xa * *wa;
                }
                out[n * o_dim + o] = acc;
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.map(|bid| self.needs(bid)).unwrap_or(false);
        Ok(self.push(Tensor::new(vec![n_dim, o_dim], out)?, needs, Op::Linear { x, w, b }))
    }

    // ── normalization ────────────────────────────────────────────────

    /// Instance normalization: zero mean / unit variance over H,W per
    /// (sample, channel), then per-channel affine.
    pub fn instance_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: T) -> Result<TensorId> {
        let xs = self.shape_of(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("instance_norm", "[N,C,H,W]", format!("{:?}", xs)));
        }
        let (n_dim, c_dim, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        if self.shape_of(gamma) != [c_dim] || self.shape_of(beta) != [c_dim] {
            return Err(Error::shape(
                "instance_norm affine",
                format!("gamma/beta [{}]", c_dim),
                format!("{:?}/{:?}", self.shape_of(gamma), self.shape_of(beta)),
            ));
        }
        let xv = self.nodes[x.0].value.clone();
        let gv = self.nodes[gamma.0].value.clone();
        let bv = self.nodes[beta.0].value.clone();
        let xd = xv.data();
        let inv_hw = T::one() / T::fromf(hw as f64);
        let mut out = vec![T::zero(); xd.len()];
        let mut means = vec![T::zero(); n_dim * c_dim];
        let mut inv_stds = vec![T::zero(); n_dim * c_dim];
        for n in 0..n_dim {
            for ch in 0..c_dim {
                let base = (n * c_dim + ch) * hw;
                let mut mean = T::zero();
                for i in 0..hw {
                    mean = mean + xd[base + i];
                }
                mean = mean * inv_hw;
                let mut var = T::zero();
                for i in 0..hw {
                    let d = xd[base + i] - mean;
                    var = var + d * d;
                }
                var = var * inv_hw;
                let inv_std = T::one() / (var + eps).sqrt();
                let (g, bta) = (gv.data()[ch], bv.data()[ch]);
                for i in 0..hw {
                    out[base + i] = (xd[base + i] - mean) * inv_std * g + bta;
                }
                means[n * c_dim + ch] = mean;
                inv_stds[n * c_dim + ch] = inv_std;
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::new(xs, out)?,
            needs,
            Op::InstanceNorm { x, gamma, beta, eps, mean: means, inv_std: inv_stds },
        ))
    }

    // ── spatial ops ──────────────────────────────────────────────────

    /// Bilinear resize, align-corners-false: source coordinate for output
    /// index `i` is `(i + 0.5) * in / out - 0.5`, clamped to the valid range.
    pub fn interpolate_bilinear(&mut self, x: TensorId, out_h: usize, out_w: usize) -> Result<TensorId> {
        let xs = self.shape_of(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("interpolate_bilinear", "[N,C,H,W]", format!("{:?}", xs)));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("interpolate output dims must be >= 1".to_string()));
        }
        let (n_dim, c_dim, h, w_dim) = (xs[0], xs[1], xs[2], xs[3]);
        let xv = self.nodes[x.0].value.clone();
        let xd = xv.data();
        let mut out = vec![T::zero(); n_dim * c_dim * out_h * out_w];
        for i in 0..out_h {
            let (y0, y1, wy) = src_coord::<T>(i, h, out_h);
            for j in 0..out_w {
                let (x0, x1, wx) = src_coord::<T>(j, w_dim, out_w);
                let w00 = (T::one() - wy) * (T::one() - wx);
                let w01 = (T::one() - wy) * wx;
                let w10 = wy * (T::one() - wx);
                let w11 = wy * wx;
                for n in 0..n_dim {
                    for ch in 0..c_dim {
                        let v = w00 * xd[nchw_index(c_dim, h, w_dim, n, ch, y0, x0)]
                            + w01 * xd[nchw_index(c_dim, h, w_dim, n, ch, y0, x1)]
                            + w10 * xd[nchw_index(c_dim, h, w_dim, n, ch, y1, x0)]
                            + w11 * xd[nchw_index(c_dim, h, w_dim, n, ch, y1, x1)];
                        out[nchw_index(c_dim, out_h, out_w, n, ch, i, j)] = v;
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![n_dim, c_dim, out_h, out_w], out)?, needs, Op::Interpolate(x)))
    }

    pub fn max_pool2d(&mut self, x: TensorId, k: usize, stride: usize) -> Result<TensorId> {
        let xs = self.shape_of(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("max_pool2d", "[N,C,H,W]", format!("{:?}", xs)));
        }
        let (n_dim, c_dim, h, w_dim) = (xs[0], xs[1], xs[2], xs[3]);
        if k == 0 || stride == 0 || k > h || k > w_dim || (h - k) % stride != 0 || (w_dim - k) % stride != 0 {
            return Err(Error::invalid(format!(
                "max_pool2d window {}x{} stride {} does not tile input {}x{}",
                k, k, stride, h, w_dim
            )));
        }
        let out_h = (h - k) / stride + 1;
        let out_w = (w_dim - k) / stride + 1;
        let xv = self.nodes[x.0].value.clone();
        let xd = xv.data();
        let mut out = vec![T::zero(); n_dim * c_dim * out_h * out_w];
        let mut argmax = vec![0u32; out.len()];
        for n in 0..n_dim {
            for ch in 0..c_dim {
                for i in 0..out_h {
                    for j in 0..out_w {
                        let mut best_idx = nchw_index(c_dim, h, w_dim, n, ch, i * stride, j * stride);
                        let mut best = xd[best_idx];
                        for u in 0..k {
                            for v in 0..k {
                                let idx = nchw_index(c_dim, h, w_dim, n, ch, i * stride + u, j * stride + v);
                                if xd[idx] > best {
                                    best = xd[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let oi = nchw_index(c_dim, out_h, out_w, n, ch, i, j);
                        out[oi] = best;
                        argmax[oi] = best_idx as u32;
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![n_dim, c_dim, out_h, out_w], out)?, needs, Op::MaxPool { x, argmax }))
    }

    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape_of(a).to_vec();
        let sb = self.shape_of(b).to_vec();
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
            return Err(Error::shape("concat_channels", format!("{:?} compatible", sa), format!("{:?}", sb)));
        }
        let (n_dim, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
        let av = self.nodes[a.0].value.clone();
        let bv = self.nodes[b.0].value.clone();
        let mut out = Vec::with_capacity((ca + cb) * n_dim * hw);
        for n in 0..n_dim {
            out.extend_from_slice(&av.data()[n * ca * hw..(n + 1) * ca * hw]);
            out.extend_from_slice(&bv.data()[n * cb * hw..(n + 1) * cb * hw]);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![n_dim, ca + cb, sa[2], sa[3]], out)?,
            needs,
            Op::ConcatChannels(a, b),
        ))
    }

    /// Sample a `P x P` window centered at a continuous `center = [cx, cy]`
    /// via bilinear interpolation. Offsets run over `{-P/2, ..., P/2 - 1}`.
    /// Differentiable with respect to both the image and the center.
    pub fn extract_crop(&mut self, image: TensorId, center: TensorId, size: usize) -> Result<TensorId> {
        let xs = self.shape_of(image).to_vec();
        if xs.len() != 4 || xs[0] != 1 {
            return Err(Error::shape("extract_crop", "[1,C,H,W]", format!("{:?}", xs)));
        }
        if self.shape_of(center) != [2] {
            return Err(Error::shape("extract_crop center", "[2]", format!("{:?}", self.shape_of(center))));
        }
        if size == 0 || size > xs[2] || size > xs[3] {
            return Err(Error::invalid(format!(
                "crop size {} invalid for image {}x{}",
                size, xs[2], xs[3]
            )));
        }
        let (c_dim, h, w_dim) = (xs[1], xs[2], xs[3]);
        let img = self.nodes[image.0].value.clone();
        let ctr = self.nodes[center.0].value.clone();
        let (cx, cy) = (ctr.data()[0], ctr.data()[1]);
        let half = size as isize / 2;
        let xd = img.data();
        let mut out = vec![T::zero(); c_dim * size * size];
        for i in 0..size {
            let sy = cy + T::fromf((i as isize - half) as f64);
            let (y0, y1, wy) = sample_coord(sy, h);
            for j in 0..size {
                let sx = cx + T::fromf((j as isize - half) as f64);
                let (x0, x1, wx) = sample_coord(sx, w_dim);
                let w00 = (T::one() - wy) * (T::one() - wx);
                let w01 = (T::one() - wy) * wx;
                let w10 = wy * (T::one() - wx);
                let w11 = wy * wx;
                for ch in 0..c_dim {
                    let v = w00 * xd[nchw_index(c_dim, h, w_dim, 0, ch, y0, x0)]
                        + w01 * xd[nchw_index(c_dim, h, w_dim, 0, ch, y0, x1)]
                        + w10 * xd[nchw_index(c_dim, h, w_dim, 0, ch, y1, x0)]
                        + w11 * xd[nchw_index(c_dim, h, w_dim, 0, ch, y1, x1)];
                    out[nchw_index(c_dim, size, size, 0, ch, i, j)] = v;
                }
            }
        }
        let needs = self.needs(image) || self.needs(center);
        Ok(self.push(
            Tensor::new(vec![1, c_dim, size, size], out)?,
            needs,
            Op::ExtractCrop { image, center, size },
        ))
    }

    /// Write `features [1,C,P,P]` onto a zero `H x W` canvas with its top-left
    /// at `(row0, col0)`. Gradient flows to the features only.
    pub fn paste_translate(
        &mut self,
        features: TensorId,
        row0: usize,
        col0: usize,
        out_h: usize,
        out_w: usize,
    ) -> Result<TensorId> {
        let fs = self.shape_of(features).to_vec();
        if fs.len() != 4 || fs[0] != 1 || fs[2] != fs[3] {
            return Err(Error::shape("paste_translate", "[1,C,P,P]", format!("{:?}", fs)));
        }
        let (c_dim, p) = (fs[1], fs[2]);
        if row0 + p > out_h || col0 + p > out_w {
            return Err(Error::invalid(format!(
                "paste window {}x{} at ({},{}) exceeds canvas {}x{}",
                p, p, row0, col0, out_h, out_w
            )));
        }
        let fv = self.nodes[features.0].value.clone();
        let fd = fv.data();
        let mut out = vec![T::zero(); c_dim * out_h * out_w];
        for ch in 0..c_dim {
            for i in 0..p {
                let src = nchw_index(c_dim, p, p, 0, ch, i, 0);
                let dst = nchw_index(c_dim, out_h, out_w, 0, ch, row0 + i, col0);
                out[dst..dst + p].copy_from_slice(&fd[src..src + p]);
            }
        }
        let needs = self.needs(features);
        Ok(self.push(
            Tensor::new(vec![1, c_dim, out_h, out_w], out)?,
            needs,
            Op::Paste { features, row0, col0 },
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse accumulation from a scalar root. Fills `grad` for every
    /// gradient-tracked node reachable from the root; a tensor feeding two
    /// consumers receives the sum of both contributions.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar root, got shape {:?}",
                self.shape_of(root)
            )));
        }
        for node in self.nodes.iter_mut() {
            node.grad = None;
        }
        self.nodes[root.0].grad = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs {
                continue;
            }
            self.backstep(i)?;
        }
        Ok(())
    }

    fn ensure_grad(&mut self, id: TensorId) -> &mut Vec<T> {
        let numel = self.nodes[id.0].value.numel();
        self.nodes[id.0].grad.get_or_insert_with(|| vec![T::zero(); numel])
    }

    fn accum(&mut self, id: TensorId, contrib: &[T]) {
        if !self.needs(id) {
            return;
        }
        let g = self.ensure_grad(id);
        for (a, b) in g.iter_mut().zip(contrib.iter()) {
            *a = *a + *b;
        }
    }

    /// Accumulate into `id` handling scalar-broadcast inputs.
    fn accum_broadcast(&mut self, id: TensorId, contrib: &[T]) {
        if !self.needs(id) {
            return;
        }
        if self.nodes[id.0].value.numel() == 1 && contrib.len() > 1 {
            let s = contrib.iter().fold(T::zero(), |acc, &v| acc + v);
            let g = self.ensure_grad(id);
            g[0] = g[0] + s;
        } else {
            self.accum(id, contrib);
        }
    }

    fn backstep(&mut self, i: usize) -> Result<()> {
        let grad = self.nodes[i].grad.clone().expect("grad present");
        // Toll of the enum tape: each arm reads saved inputs and scatters.
        match std::mem::replace(&mut self.nodes[i].op, Op::Leaf) {
            Op::Leaf => {}
            op @ Op::Conv2d { .. } => {
                self.backward_conv2d(&op, &grad, i)?;
                self.nodes[i].op = op;
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape_of(x).to_vec();
                let ws = self.shape_of(w).to_vec();
                let (n_dim, f_dim, o_dim) = (xs[0], xs[1], ws[0]);
                let xv = self.nodes[x.0].value.clone();
                let wv = self.nodes[w.0].value.clone();
                if self.needs(x) {
                    let mut dx = vec![T::zero(); n_dim * f_dim];
                    for n in 0..n_dim {
                        for o in 0..o_dim {
                            let g = grad[n * o_dim + o];
                            let wrow = &wv.data()[o * f_dim..(o + 1) * f_dim];
                            let xrow = &mut dx[n * f_dim..(n + 1) * f_dim];
                            for (d, &wa) in xrow.iter_mut().zip(wrow.iter()) {
                                *d = *d + g * wa;
                            }
                        }
                    }
                    self.accum(x, &dx);
                }
                if self.needs(w) {
                    let mut dw = vec![T::zero(); o_dim * f_dim];
                    for n in 0..n_dim {
                        for o in 0..o_dim {
                            let g = grad[n * o_dim + o];
                            let xrow = &xv.data()[n * f_dim..(n + 1) * f_dim];
                            let wrow = &mut dw[o * f_dim..(o + 1) * f_dim];
                            for (d, &xa) in wrow.iter_mut().zip(xrow.iter()) {
                                *d = *d + g * xa;
                            }
                        }
                    }
                    self.accum(w, &dw);
                }
                if let Some(bid) = b {
                    if self.needs(bid) {
                        let mut db = vec![T::zero(); o_dim];
                        for n in 0..n_dim {
                            for o in 0..o_dim {
                                db[o] = db[o] + grad[n * o_dim + o];
                            }
                        }
                        self.accum(bid, &db);
                    }
                }
                self.nodes[i].op = Op::Linear { x, w, b };
            }
            Op::Relu(x) => {
                let xv = self.nodes[x.0].value.clone();
                let dx: Vec<T> = grad
                    .iter()
                    .zip(xv.data().iter())
                    .map(|(&g, &a)| if a > T::zero() { g } else { T::zero() })
                    .collect();
                self.accum(x, &dx);
                self.nodes[i].op = Op::Relu(x);
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.nodes[x.0].value.clone();
                let dx: Vec<T> = grad
                    .iter()
                    .zip(xv.data().iter())
                    .map(|(&g, &a)| if a > T::zero() { g } else { g * slope })
                    .collect();
                self.accum(x, &dx);
                self.nodes[i].op = Op::LeakyRelu(x, slope);
            }
            Op::Sigmoid(x) => {
                let ov = self.nodes[i].value.clone();
                let dx: Vec<T> = grad
                    .iter()
                    .zip(ov.data().iter())
                    .map(|(&g, &s)| g * s * (T::one() - s))
                    .collect();
                self.accum(x, &dx);
                self.nodes[i].op = Op::Sigmoid(x);
            }
            Op::Add(a, b) => {
                self.accum_broadcast(a, &grad);
                self.accum_broadcast(b, &grad);
                self.nodes[i].op = Op::Add(a, b);
            }
            Op::Sub(a, b) => {
                self.accum_broadcast(a, &grad);
                let neg: Vec<T> = grad.iter().map(|&g| -g).collect();
                self.accum_broadcast(b, &neg);
                self.nodes[i].op = Op::Sub(a, b);
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                if self.needs(a) {
                    let da: Vec<T> = grad
                        .iter()
                        .enumerate()
                        .map(|(k, &g)| g * bv.data()[if bv.numel() == 1 { 0 } else { k }])
                        .collect();
                    self.accum_broadcast(a, &da);
                }
                if self.needs(b) {
                    let db: Vec<T> = grad
                        .iter()
                        .enumerate()
                        .map(|(k, &g)| g * av.data()[if av.numel() == 1 { 0 } else { k }])
                        .collect();
                    self.accum_broadcast(b, &db);
                }
                self.nodes[i].op = Op::Mul(a, b);
            }
            Op::Div(a, b) => {
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                if self.needs(a) {
                    let da: Vec<T> = grad
                        .iter()
                        .enumerate()
                        .map(|(k, &g)| g / bv.data()[if bv.numel() == 1 { 0 } else { k }])
                        .collect();
                    self.accum_broadcast(a, &da);
                }
                if self.needs(b) {
                    let db: Vec<T> = grad
                        .iter()
                        .enumerate()
                        .map(|(k, &g)| {
                            let an = av.data()[if av.numel() == 1 { 0 } else { k }];
                            let bn = bv.data()[if bv.numel() == 1 { 0 } else { k }];
                            -g * an / (bn * bn)
                        })
                        .collect();
                    self.accum_broadcast(b, &db);
                }
                self.nodes[i].op = Op::Div(a, b);
            }
            Op::Scale(x, k) => {
                let dx: Vec<T> = grad.iter().map(|&g| g * k).collect();
                self.accum(x, &dx);
                self.nodes[i].op = Op::Scale(x, k);
            }
            Op::AddConst(x, k) => {
                self.accum(x, &grad);
                self.nodes[i].op = Op::AddConst(x, k);
            }
            Op::Neg(x) => {
                let dx: Vec<T> = grad.iter().map(|&g| -g).collect();
                self.accum(x, &dx);
                self.nodes[i].op = Op::Neg(x);
            }
            Op::InstanceNorm { x, gamma, beta, eps, mean, inv_std } => {
                self.backward_instance_norm(x, gamma, beta, &mean, &inv_std, &grad);
                self.nodes[i].op = Op::InstanceNorm { x, gamma, beta, eps, mean, inv_std };
            }
            Op::Softmax { x, axis } => {
                let ov = self.nodes[i].value.clone();
                let shape = ov.shape().to_vec();
                let axis_len = shape[axis];
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let s = ov.data();
                let mut dx = vec![T::zero(); s.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |k: usize| o * axis_len * inner + k * inner + ii;
                        let mut dot = T::zero();
                        for k in 0..axis_len {
                            dot = dot + grad[at(k)] * s[at(k)];
                        }
                        for k in 0..axis_len {
                            dx[at(k)] = s[at(k)] * (grad[at(k)] - dot);
                        }
                    }
                }
                self.accum(x, &dx);
                self.nodes[i].op = Op::Softmax { x, axis };
            }
            Op::Interpolate(x) => {
                let xs = self.shape_of(x).to_vec();
                let os = self.nodes[i].value.shape().to_vec();
                let (n_dim, c_dim, h, w_dim) = (xs[0], xs[1], xs[2], xs[3]);
                let (out_h, out_w) = (os[2], os[3]);
                let mut dx = vec![T::zero(); n_dim * c_dim * h * w_dim];
                for ii in 0..out_h {
                    let (y0, y1, wy) = src_coord::<T>(ii, h, out_h);
                    for jj in 0..out_w {
                        let (x0, x1, wx) = src_coord::<T>(jj, w_dim, out_w);
                        let w00 = (T::one() - wy) * (T::one() - wx);
                        let w01 = (T::one() - wy) * wx;
                        let w10 = wy * (T::one() - wx);
                        let w11 = wy * wx;
                        for n in 0..n_dim {
                            for ch in 0..c_dim {
                                let g = grad[nchw_index(c_dim, out_h, out_w, n, ch, ii, jj)];
                                dx[nchw_index(c_dim, h, w_dim, n, ch, y0, x0)] =
                                    dx[nchw_index(c_dim, h, w_dim, n, ch, y0, x0)] + g * w00;
                                dx[nchw_index(c_dim, h, w_dim, n, ch, y0, x1)] =
                                    dx[nchw_index(c_dim, h, w_dim, n, ch, y0, x1)] + g * w01;
                                dx[nchw_index(c_dim, h, w_dim, n, ch, y1, x0)] =
                                    dx[nchw_index(c_dim, h, w_dim, n, ch, y1, x0)] + g * w10;
                                dx[nchw_index(c_dim, h, w_dim, n, ch, y1, x1)] =
                                    dx[nchw_index(c_dim, h, w_dim, n, ch, y1, x1)] + g * w11;
                            }
                        }
                    }
                }
                self.accum(x, &dx);
                self.nodes[i].op = Op::Interpolate(x);
            }
            Op::MaxPool { x, argmax } => {
                let numel = self.nodes[x.0].value.numel();
                let mut dx = vec![T::zero(); numel];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src as usize] = dx[src as usize] + grad[o];
                }
                self.accum(x, &dx);
                self.nodes[i].op = Op::MaxPool { x, argmax };
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.shape_of(x).to_vec();
                let (n_dim, c_dim, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let inv = T::one() / T::fromf(hw as f64);
                let mut dx = vec![T::zero(); n_dim * c_dim * hw];
                for n in 0..n_dim {
                    for ch in 0..c_dim {
                        let g = grad[n * c_dim + ch] * inv;
                        let base = (n * c_dim + ch) * hw;
                        for v in dx[base..base + hw].iter_mut() {
                            *v = g;
                        }
                    }
                }
                self.accum(x, &dx);
                self.nodes[i].op = Op::GlobalAvgPool(x);
            }
            Op::SumAll(x) => {
                let numel = self.nodes[x.0].value.numel();
                let dx = vec![grad[0]; numel];
                self.accum(x, &dx);
                self.nodes[i].op = Op::SumAll(x);
            }
            Op::SumPerChannel(x) => {
                let xs = self.shape_of(x).to_vec();
                let (n_dim, c_dim, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let mut dx = vec![T::zero(); n_dim * c_dim * hw];
                for n in 0..n_dim {
                    for ch in 0..c_dim {
                        let g = grad[ch];
                        let base = (n * c_dim + ch) * hw;
                        for v in dx[base..base + hw].iter_mut() {
                            *v = g;
                        }
                    }
                }
                self.accum(x, &dx);
                self.nodes[i].op = Op::SumPerChannel(x);
            }
            Op::ConcatChannels(a, b) => {
                let sa = self.shape_of(a).to_vec();
                let sb = self.shape_of(b).to_vec();
                let (n_dim, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
                if self.needs(a) {
                    let mut da = vec![T::zero(); n_dim * ca * hw];
                    for n in 0..n_dim {
                        let src = n * (ca + cb) * hw;
                        da[n * ca * hw..(n + 1) * ca * hw].copy_from_slice(&grad[src..src + ca * hw]);
                    }
                    self.accum(a, &da);
                }
                if self.needs(b) {
                    let mut db = vec![T::zero(); n_dim * cb * hw];
                    for n in 0..n_dim {
                        let src = n * (ca + cb) * hw + ca * hw;
                        db[n * cb * hw..(n + 1) * cb * hw].copy_from_slice(&grad[src..src + cb * hw]);
                    }
                    self.accum(b, &db);
                }
                self.nodes[i].op = Op::ConcatChannels(a, b);
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.nodes[x.0].value.clone();
                let dx: Vec<T> = grad
                    .iter()
                    .enumerate()
                    .map(|(k, &g)| {
                        let a = xv.data()[k];
                        if a >= lo[k] && a <= hi[k] {
                            g
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accum(x, &dx);
                self.nodes[i].op = Op::Clamp { x, lo, hi };
            }
            Op::ExtractCrop { image, center, size } => {
                self.backward_extract_crop(image, center, size, &grad);
                self.nodes[i].op = Op::ExtractCrop { image, center, size };
            }
            Op::Paste { features, row0, col0 } => {
                let fs = self.shape_of(features).to_vec();
                let os = self.nodes[i].value.shape().to_vec();
                let (c_dim, p) = (fs[1], fs[2]);
                let (out_h, out_w) = (os[2], os[3]);
                let mut df = vec![T::zero(); c_dim * p * p];
                for ch in 0..c_dim {
                    for r in 0..p {
                        let src = nchw_index(c_dim, out_h, out_w, 0, ch, row0 + r, col0);
                        let dst = nchw_index(c_dim, p, p, 0, ch, r, 0);
                        df[dst..dst + p].copy_from_slice(&grad[src..src + p]);
                    }
                }
                self.accum(features, &df);
                self.nodes[i].op = Op::Paste { features, row0, col0 };
            }
            Op::HardmaxSte(x) => {
                self.accum(x, &grad);
                self.nodes[i].op = Op::HardmaxSte(x);
            }
            Op::QuantizeSte { x, scale } => {
                let xv = self.nodes[x.0].value.clone();
                let dx: Vec<T> = grad
                    .iter()
                    .zip(xv.data().iter())
                    .map(|(&g, &a)| if a.abs() <= scale { g } else { T::zero() })
                    .collect();
                self.accum(x, &dx);
                self.nodes[i].op = Op::QuantizeSte { x, scale };
            }
            Op::Select { x, index } => {
                let numel = self.nodes[x.0].value.numel();
                let mut dx = vec![T::zero(); numel];
                dx[index] = grad[0];
                self.accum(x, &dx);
                self.nodes[i].op = Op::Select { x, index };
            }
        }
        Ok(())
    }

    fn backward_conv2d(&mut self, op: &Op<T>, grad: &[T], _node: usize) -> Result<()> {
        let (x, w, b, stride, pad, cols) = match op {
            Op::Conv2d { x, w, b, stride, pad, cols } => (*x, *w, *b, *stride, *pad, cols),
            _ => unreachable!(),
        };
        let xs = self.shape_of(x).to_vec();
        let ws = self.shape_of(w).to_vec();
        let (n_dim, c_in, h, w_dim) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
        let out_h = (h + 2 * pad - kh) / stride + 1;
        let out_w = (w_dim + 2 * pad - kw) / stride + 1;
        let k_total = c_in * kh * kw;
        let m_total = out_h * out_w;

        if let Some(bid) = b {
            if self.needs(bid) {
                let mut db = vec![T::zero(); c_out];
                for n in 0..n_dim {
                    for o in 0..c_out {
                        let base = (n * c_out + o) * m_total;
                        let mut acc = T::zero();
                        for m in 0..m_total {
                            acc = acc + grad[base + m];
                        }
                        db[o] = db[o] + acc;
                    }
                }
                self.accum(bid, &db);
            }
        }
        if self.needs(w) {
            let mut dw = vec![T::zero(); c_out * k_total];
            for n in 0..n_dim {
                let col = &cols[n * k_total * m_total..(n + 1) * k_total * m_total];
                for o in 0..c_out {
                    let grow = &grad[(n * c_out + o) * m_total..(n * c_out + o + 1) * m_total];
                    for k in 0..k_total {
                        let crow = &col[k * m_total..(k + 1) * m_total];
                        let mut acc = T::zero();
                        for (ga, ca) in grow.iter().zip(crow.iter()) {
                            acc = acc + *ga * *ca;
                        }
                        dw[o * k_total + k] = dw[o * k_total + k] + acc;
                    }
                }
            }
            self.accum(w, &dw);
        }
        if self.needs(x) {
            let wv = self.nodes[w.0].value.clone();
            let wd = wv.data();
            let mut dx = vec![T::zero(); n_dim * c_in * h * w_dim];
            let mut dcols = vec![T::zero(); k_total * m_total];
            for n in 0..n_dim {
                for v in dcols.iter_mut() {
                    *v = T::zero();
                }
                for o in 0..c_out {
                    let grow = &grad[(n * c_out + o) * m_total..(n * c_out + o + 1) * m_total];
                    for k in 0..k_total {
                        let a = wd[o * k_total + k];
                        if a == T::zero() {
                            continue;
                        }
                        let drow = &mut dcols[k * m_total..(k + 1) * m_total];
                        for (d, &g) in drow.iter_mut().zip(grow.iter()) {
                            *d = *d + a * g;
                        }
                    }
                }
                col2im(&dcols, n, c_in, h, w_dim, kh, kw, stride, pad, out_h, out_w, &mut dx);
            }
            self.accum(x, &dx);
        }
        Ok(())
    }

    fn backward_instance_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: &[T],
        inv_std: &[T],
        grad: &[T],
    ) {
        let xs = self.shape_of(x).to_vec();
        let (n_dim, c_dim, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let xv = self.nodes[x.0].value.clone();
        let gv = self.nodes[gamma.0].value.clone();
        let xd = xv.data();
        let hw_t = T::fromf(hw as f64);
        let mut dgamma = vec![T::zero(); c_dim];
        let mut dbeta = vec![T::zero(); c_dim];
        let mut dx = vec![T::zero(); xd.len()];
        for n in 0..n_dim {
            for ch in 0..c_dim {
                let base = (n * c_dim + ch) * hw;
                let m = mean[n * c_dim + ch];
                let is = inv_std[n * c_dim + ch];
                let g_affine = gv.data()[ch];
                let mut sum_dxhat = T::zero();
                let mut sum_dxhat_xhat = T::zero();
                for i in 0..hw {
                    let xhat = (xd[base + i] - m) * is;
                    let go = grad[base + i];
                    dgamma[ch] = dgamma[ch] + go * xhat;
                    dbeta[ch] = dbeta[ch] + go;
                    let dxh = go * g_affine;
                    sum_dxhat = sum_dxhat + dxh;
                    sum_dxhat_xhat = sum_dxhat_xhat + dxh * xhat;
                }
                let inv_hw = T::one() / hw_t;
                for i in 0..hw {
                    let xhat = (xd[base + i] - m) * is;
                    let dxh = grad[base + i] * g_affine;
                    dx[base + i] = is * inv_hw * (hw_t * dxh - sum_dxhat - xhat * sum_dxhat_xhat);
                }
            }
        }
        self.accum(x, &dx);
        self.accum(gamma, &dgamma);
        self.accum(beta, &dbeta);
    }

    fn backward_extract_crop(&mut self, image: TensorId, center: TensorId, size: usize, grad: &[T]) {
        let xs = self.shape_of(image).to_vec();
        let (c_dim, h, w_dim) = (xs[1], xs[2], xs[3]);
        let img = self.nodes[image.0].value.clone();
        let ctr = self.nodes[center.0].value.clone();
        let (cx, cy) = (ctr.data()[0], ctr.data()[1]);
        let half = size as isize / 2;
        let xd = img.data();
        let need_img = self.needs(image);
        let need_ctr = self.needs(center);
        let mut dimg = vec![T::zero(); xd.len()];
        let mut dcx = T::zero();
        let mut dcy = T::zero();
        for i in 0..size {
            let sy_raw = cy + T::fromf((i as isize - half) as f64);
            let y_in = sy_raw >= T::zero() && sy_raw <= T::fromf((h - 1) as f64);
            let (y0, y1, wy) = sample_coord(sy_raw, h);
            for j in 0..size {
                let sx_raw = cx + T::fromf((j as isize - half) as f64);
                let x_in = sx_raw >= T::zero() && sx_raw <= T::fromf((w_dim - 1) as f64);
                let (x0, x1, wx) = sample_coord(sx_raw, w_dim);
                let w00 = (T::one() - wy) * (T::one() - wx);
                let w01 = (T::one() - wy) * wx;
                let w10 = wy * (T::one() - wx);
                let w11 = wy * wx;
                for ch in 0..c_dim {
                    let g = grad[nchw_index(c_dim, size, size, 0, ch, i, j)];
                    if g == T::zero() {
                        continue;
                    }
                    let i00 = nchw_index(c_dim, h, w_dim, 0, ch, y0, x0);
                    let i01 = nchw_index(c_dim, h, w_dim, 0, ch, y0, x1);
                    let i10 = nchw_index(c_dim, h, w_dim, 0, ch, y1, x0);
                    let i11 = nchw_index(c_dim, h, w_dim, 0, ch, y1, x1);
                    if need_img {
                        dimg[i00] = dimg[i00] + g * w00;
                        dimg[i01] = dimg[i01] + g * w01;
                        dimg[i10] = dimg[i10] + g * w10;
                        dimg[i11] = dimg[i11] + g * w11;
                    }
                    if need_ctr {
                        if x_in {
                            let dv_dx = (T::one() - wy) * (xd[i01] - xd[i00]) + wy * (xd[i11] - xd[i10]);
                            dcx = dcx + g * dv_dx;
                        }
                        if y_in {
                            let dv_dy = (T::one() - wx) * (xd[i10] - xd[i00]) + wx * (xd[i11] - xd[i01]);
                            dcy = dcy + g * dv_dy;
                        }
                    }
                }
            }
        }
        if need_img {
            self.accum(image, &dimg);
        }
        if need_ctr {
            self.accum(center, &[dcx, dcy]);
        }
    }
}

/// Quantize raw values: `round(clip(t, -a, a) * r / a) * a / r`, `r = 2^(bit-1)`.
pub(crate) fn quantize_values<T: Scalar>(data: &[T], bit: u32, a: T) -> Vec<T> {
    if a == T::zero() {
        return vec![T::zero(); data.len()];
    }
    let r = T::fromf(f64::from(1u32 << (bit - 1)));
    let step = a / r;
    data.iter()
        .map(|&t| {
            let clipped = t.max(-a).min(a);
            (clipped * r / a).round() * step
        })
        .collect()
}

/// Source coordinate for align-corners-false bilinear resizing.
fn src_coord<T: Scalar>(i: usize, in_len: usize, out_len: usize) -> (usize, usize, T) {
    if in_len == out_len {
        return (i, i, T::zero());
    }
    let s = (T::fromf(i as f64) + c::<T>(0.5)) * T::fromf(in_len as f64) / T::fromf(out_len as f64) - c::<T>(0.5);
    let s = s.max(T::zero()).min(T::fromf((in_len - 1) as f64));
    let i0 = s.floor().tof() as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, s - T::fromf(i0 as f64))
}

/// Edge-clamped sampling coordinate for crop extraction.
fn sample_coord<T: Scalar>(s: T, len: usize) -> (usize, usize, T) {
    let s = s.max(T::zero()).min(T::fromf((len - 1) as f64));
    let i0 = s.floor().tof() as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, s - T::fromf(i0 as f64))
}

fn im2col<T: Scalar>(
    x: &[T],
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
    cols: &mut [T],
) {
    let m_total = out_h * out_w;
    for ci in 0..c_in {
        for u in 0..kh {
            for v in 0..kw {
                let k = (ci * kh + u) * kw + v;
                let row = &mut cols[k * m_total..(k + 1) * m_total];
                for i in 0..out_h {
                    let y = (i * stride + u) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        for j in 0..out_w {
                            row[i * out_w + j] = T::zero();
                        }
                        continue;
                    }
                    let src_base = nchw_index(c_in, h, w, n, ci, y as usize, 0);
                    for j in 0..out_w {
                        let xx = (j * stride + v) as isize - pad as isize;
                        row[i * out_w + j] = if xx < 0 || xx >= w as isize {
                            T::zero()
                        } else {
                            x[src_base + xx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(
    dcols: &[T],
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
    dx: &mut [T],
) {
    let m_total = out_h * out_w;
    for ci in 0..c_in {
        for u in 0..kh {
            for v in 0..kw {
                let k = (ci * kh + u) * kw + v;
                let row = &dcols[k * m_total..(k + 1) * m_total];
                for i in 0..out_h {
                    let y = (i * stride + u) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let dst_base = nchw_index(c_in, h, w, n, ci, y as usize, 0);
                    for j in 0..out_w {
                        let xx = (j * stride + v) as isize - pad as isize;
                        if xx >= 0 && xx < w as isize {
                            let idx = dst_base + xx as usize;
                            dx[idx] = dx[idx] + row[i * out_w + j];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: Vec<usize>, values: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(shape, values).unwrap()
    }

    #[test]
    fn conv_all_ones_sums_window() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(vec![1, 1, 3, 3], 1.0), false);
        let w = g.leaf(Tensor::full(vec![1, 1, 3, 3], 1.0), false);
        let b = g.leaf(Tensor::zeros(vec![1]), false);
        let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data()[0], 9.0);
    }

    #[test]
    fn conv_impulse_reproduces_flipped_kernel() {
        // Cross-correlation of a centered impulse reverses the kernel.
        let mut g = Graph::<f64>::new();
        let mut xv = vec![0.0; 25];
        xv[2 * 5 + 2] = 1.0;
        let x = g.leaf(t64(vec![1, 1, 5, 5], &xv), false);
        let wv: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let w = g.leaf(t64(vec![1, 1, 3, 3], &wv), false);
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let out = g.value(y).data();
        for di in 0..3usize {
            for dj in 0..3usize {
                let got = out[(1 + di) * 5 + (1 + dj)];
                let expect = wv[(2 - di) * 3 + (2 - dj)];
                assert_eq!(got, expect, "at ({},{})", di, dj);
            }
        }
    }

    #[test]
    fn conv_rejects_inexact_output() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(vec![1, 1, 5, 5]), false);
        let w = g.leaf(Tensor::zeros(vec![1, 1, 2, 2]), false);
        let err = g.conv2d(x, w, None, 2, 0).unwrap_err();
        assert!(matches!(err, Error::InvalidArg(_)));
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(vec![1, 2, 4, 4]), false);
        let w = g.leaf(Tensor::zeros(vec![1, 3, 3, 3]), false);
        let err = g.conv2d(x, w, None, 1, 1).unwrap_err();
        assert!(err.to_string().contains("C_in"));
    }

    #[test]
    fn relu_and_leaky_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(vec![3], &[-1.0, 0.0, 2.0]), false);
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let z = g.leaf(t64(vec![1], &[-2.0]), false);
        let l = g.leaky_relu(z, 0.01);
        assert!((g.value(l).data()[0] + 0.02).abs() < 1e-15);
    }

    #[test]
    fn add_rejects_incompatible_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros(vec![2, 3]), false);
        let b = g.leaf(Tensor::zeros(vec![3, 2]), false);
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn instance_norm_examples() {
        let mut g = Graph::<f64>::new();
        // constant channel collapses to beta
        let x = g.leaf(Tensor::full(vec![1, 1, 2, 2], 5.0), false);
        let gamma = g.leaf(Tensor::full(vec![1], 1.0), false);
        let beta = g.leaf(Tensor::zeros(vec![1]), false);
        let y = g.instance_norm(x, gamma, beta, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-2));

        // [1,3] has mean 2, population std 1
        let x2 = g.leaf(t64(vec![1, 1, 1, 2], &[1.0, 3.0]), false);
        let y2 = g.instance_norm(x2, gamma, beta, 1e-12).unwrap();
        let d = g.value(y2).data();
        assert!((d[0] + 1.0).abs() < 1e-5 && (d[1] - 1.0).abs() < 1e-5);

        // affine on normalized values
        let gamma2 = g.leaf(Tensor::full(vec![1], 2.0), false);
        let beta2 = g.leaf(Tensor::full(vec![1], 1.0), false);
        let y3 = g.instance_norm(x2, gamma2, beta2, 1e-12).unwrap();
        let d3 = g.value(y3).data();
        assert!((d3[0] + 1.0).abs() < 1e-5 && (d3[1] - 3.0).abs() < 1e-5);
    }

    #[test]
    fn interpolate_identity_and_corners() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(vec![1, 1, 2, 2], &[0.0, 1.0, 2.0, 3.0]), false);
        let same = g.interpolate_bilinear(x, 2, 2).unwrap();
        assert_eq!(g.value(same).data(), g.value(x).data());

        let up = g.interpolate_bilinear(x, 4, 4).unwrap();
        let d = g.value(up).data();
        assert_eq!(d[0], 0.0);
        assert_eq!(d[3], 1.0);
        assert_eq!(d[12], 2.0);
        assert_eq!(d[15], 3.0);
    }

    #[test]
    fn softmax_symmetry_and_shift_invariance() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(vec![3], &[0.0, 0.0, 0.0]), false);
        let s = g.softmax(x, 0).unwrap();
        for v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let big = g.leaf(t64(vec![2], &[1000.0, 1000.0]), false);
        let sb = g.softmax(big, 0).unwrap();
        for v in g.value(sb).data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(vec![3]), true);
        let y = g.relu(x);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn backward_of_sum_x_squared_is_2x() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(vec![4], &[1.0, -2.0, 0.5, 3.0]), true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum_all(sq);
        g.backward(s).unwrap();
        let grad = g.grad(x).unwrap();
        for (gv, xv) in grad.iter().zip(g.value(x).data()) {
            assert!((gv - 2.0 * xv).abs() < 1e-12);
        }
    }

    #[test]
    fn fanout_accumulates_gradients() {
        // y = sum(x) + sum(2x): dy/dx = 3 through two consumers.
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(vec![3], &[1.0, 2.0, 3.0]), true);
        let a = g.sum_all(x);
        let two = g.scale(x, 2.0);
        let b = g.sum_all(two);
        let y = g.add(a, b).unwrap();
        g.backward(y).unwrap();
        for v in g.grad(x).unwrap() {
            assert_eq!(*v, 3.0);
        }
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(vec![1, 1, 2, 2], &[1.0, 5.0, 3.0, 2.0]), true);
        let p = g.max_pool2d(x, 2, 2).unwrap();
        assert_eq!(g.value(p).data(), &[5.0]);
        let s = g.sum_all(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn hardmax_ste_first_max_wins() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(vec![3], &[0.4, 0.4, 0.2]), true);
        let h = g.hardmax_ste(x);
        assert_eq!(g.value(h).data(), &[1.0, 0.0, 0.0]);
        let weights = g.leaf(t64(vec![3], &[5.0, 7.0, 9.0]), false);
        let m = g.mul(h, weights).unwrap();
        let s = g.sum_all(m);
        g.backward(s).unwrap();
        // straight-through: identity backward
        assert_eq!(g.grad(x).unwrap(), &[5.0, 7.0, 9.0]);
    }

    #[test]
    fn paste_places_window_and_conserves_sum() {
        let mut g = Graph::<f64>::new();
        let f = g.leaf(t64(vec![1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let y = g.paste_translate(f, 0, 0, 4, 4).unwrap();
        let d = g.value(y).data();
        assert_eq!(d[0], 1.0);
        assert_eq!(d[1], 2.0);
        assert_eq!(d[4], 3.0);
        assert_eq!(d[5], 4.0);
        let total: f64 = d.iter().sum();
        assert_eq!(total, 10.0);
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(f).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn paste_rejects_out_of_canvas() {
        let mut g = Graph::<f64>::new();
        let f = g.leaf(Tensor::zeros(vec![1, 1, 3, 3]), false);
        assert!(g.paste_translate(f, 2, 2, 4, 4).is_err());
    }

    #[test]
    fn extract_crop_integer_center_is_exact_slice() {
        let mut g = Graph::<f64>::new();
        let vals: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let img = g.leaf(t64(vec![1, 1, 4, 4], &vals), false);
        let ctr = g.leaf(t64(vec![2], &[2.0, 2.0]), false);
        let crop = g.extract_crop(img, ctr, 2).unwrap();
        // rows 1..3, cols 1..3
        assert_eq!(g.value(crop).data(), &[5.0, 6.0, 9.0, 10.0]);
    }

    #[test]
    fn extract_crop_full_size_is_identity() {
        let mut g = Graph::<f64>::new();
        let vals: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let img = g.leaf(t64(vec![1, 1, 4, 4], &vals), false);
        let ctr = g.leaf(t64(vec![2], &[2.0, 2.0]), false);
        let crop = g.extract_crop(img, ctr, 4).unwrap();
        assert_eq!(g.value(crop).data(), g.value(img).data());
    }

    #[test]
    fn quantize_ste_grid_and_clip() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(vec![2], &[0.3, 2.5]), true);
        let q = g.quantize_ste(x, 8, 1.0).unwrap();
        assert_eq!(g.value(q).data()[0], 38.0 / 128.0);
        assert_eq!(g.value(q).data()[1], 1.0);
        let s = g.sum_all(q);
        g.backward(s).unwrap();
        // inside clip: identity; outside: zero
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn select_extracts_and_scatters() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(vec![3], &[4.0, 5.0, 6.0]), true);
        let s = g.select(x, 1).unwrap();
        assert_eq!(g.value(s).data(), &[5.0]);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 0.0]);
    }
}
