//! Differentiable operations: forward implementations and graph nodes.
//!
//! Each method computes its result eagerly, then records an [`Op`] node when
//! graph recording is on and any input is tracked. Backward rules live in
//! `backward.rs`; the two files share the op payloads.


use super::tensor::graph_enabled;
use super::{check_same_shape, shape_numel, shape_strides, Element, Tensor};
use crate::error::{Error, Result};

/// Graph node: the operation that produced a tensor, holding its inputs.
pub(crate) enum Op<E: Element> {
    Add(Tensor<E>, Tensor<E>),
    Sub(Tensor<E>, Tensor<E>),
    Mul(Tensor<E>, Tensor<E>),
    Scale(Tensor<E>, E),
    AddScalar(Tensor<E>),
    /// `[B,C,H,W] + [C]`
    AddChannelBias {
        x: Tensor<E>,
        bias: Tensor<E>,
    },
    /// `[..., D] + [D]`
    AddTokenBias {
        x: Tensor<E>,
        bias: Tensor<E>,
    },
    /// `[B,C,H,W] + [B,C]` (per-sample per-channel shift)
    AddSampleChannel {
        x: Tensor<E>,
        shift: Tensor<E>,
    },
    /// `[M,K] x [K,N]`, or `[M,K] x [N,K]^T` when `transb`
    Matmul {
        a: Tensor<E>,
        b: Tensor<E>,
        transb: bool,
    },
    /// `[B,M,K] x [B,K,N]`, or `[B,M,K] x [B,N,K]^T` when `transb`
    BatchMatmul {
        a: Tensor<E>,
        b: Tensor<E>,
        transb: bool,
    },
    Conv2d {
        x: Tensor<E>,
        weight: Tensor<E>,
        bias: Tensor<E>,
        stride: usize,
        pad: usize,
    },
    GroupNorm {
        x: Tensor<E>,
        gamma: Tensor<E>,
        beta: Tensor<E>,
        groups: usize,
        eps: f64,
    },
    Gelu(Tensor<E>),
    /// Softmax over the last axis; `mask[j] = false` excludes key `j` for
    /// every row (output zero there, no probability mass assigned).
    Softmax {
        x: Tensor<E>,
    },
    Sum(Tensor<E>),
    Mean(Tensor<E>),
    Reshape(Tensor<E>),
    Permute {
        x: Tensor<E>,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<Tensor<E>>,
        axis: usize,
    },
    Slice {
        x: Tensor<E>,
        axis: usize,
        start: usize,
    },
    UpsampleNearest2x(Tensor<E>),
}

impl<E: Element> Op<E> {
    pub(crate) fn inputs(&self) -> Vec<&Tensor<E>> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Scale(x, _) | Op::AddScalar(x) | Op::Gelu(x) => vec![x],
            Op::AddChannelBias { x, bias } | Op::AddTokenBias { x, bias } => vec![x, bias],
            Op::AddSampleChannel { x, shift } => vec![x, shift],
            Op::Matmul { a, b, .. } | Op::BatchMatmul { a, b, .. } => vec![a, b],
            Op::Conv2d {
                x, weight, bias, ..
            } => vec![x, weight, bias],
            Op::GroupNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Softmax { x, .. } => vec![x],
            Op::Sum(x) | Op::Mean(x) | Op::Reshape(x) => vec![x],
            Op::Permute { x, .. } => vec![x],
            Op::Concat { parts, .. } => parts.iter().collect(),
            Op::Slice { x, .. } => vec![x],
            Op::UpsampleNearest2x(x) => vec![x],
        }
    }
}

fn any_tracked<E: Element>(inputs: &[&Tensor<E>]) -> bool {
    graph_enabled() && inputs.iter().any(|t| t.tracked())
}

fn finish<E: Element>(data: Vec<E>, shape: &[usize], tracked: bool, op: Op<E>) -> Result<Tensor<E>> {
    if tracked {
        Tensor::from_op(data, shape, op)
    } else {
        Tensor::from_vec(data, shape)
    }
}

// ---------------------------------------------------------------------------
// Raw kernels shared by forward and backward.
// ---------------------------------------------------------------------------

/// `out += A x B` with optional transposes. `m, k, n` are the logical GEMM
/// dimensions after transposition: A is `m x k`, B is `k x n`, out is `m x n`.
pub(crate) fn gemm_acc<E: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[E],
    b: &[E],
    out: &mut [E],
    transa: bool,
    transb: bool,
) {
    debug_assert_eq!(out.len(), m * n);
    match (transa, transb) {
        (false, false) => {
            // a: [m,k], b: [k,n]; row-accumulation order is cache friendly.
            for i in 0..m {
                let a_row = &a[i * k..(i + 1) * k];
                let out_row = &mut out[i * n..(i + 1) * n];
                for (p, &av) in a_row.iter().enumerate() {
                    if av == E::ZERO {
                        continue;
                    }
                    let b_row = &b[p * n..(p + 1) * n];
                    for (o, &bv) in out_row.iter_mut().zip(b_row) {
                        *o += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            // a: [m,k], b stored as [n,k]; contiguous dot products. Eight
            // independent accumulators break the serial add dependency so the
            // loop is throughput- rather than latency-bound. Element p always
            // lands in lane p % 8 (the remainder folds into its lanes rather
            // than a separate tail), so extending a dot product with trailing
            // zero terms leaves the result unchanged — models whose widened
            // layers carry zero-initialized columns must reproduce the
            // unwidened model exactly.
            for i in 0..m {
                let a_row = &a[i * k..(i + 1) * k];
                let out_row = &mut out[i * n..(i + 1) * n];
                for (j, o) in out_row.iter_mut().enumerate() {
                    let b_row = &b[j * k..(j + 1) * k];
                    let mut lanes = [E::ZERO; 8];
                    let mut ca = a_row.chunks_exact(8);
                    let mut cb = b_row.chunks_exact(8);
                    for (xa, xb) in (&mut ca).zip(&mut cb) {
                        for (l, lane) in lanes.iter_mut().enumerate() {
                            *lane += xa[l] * xb[l];
                        }
                    }
                    for (l, (&av, &bv)) in ca.remainder().iter().zip(cb.remainder()).enumerate() {
                        lanes[l] += av * bv;
                    }
                    *o += ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
                        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
                }
            }
        }
        (true, false) => {
            // a stored as [k,m], b: [k,n]; rank-1 accumulation over p.
            for p in 0..k {
                let a_row = &a[p * m..(p + 1) * m];
                let b_row = &b[p * n..(p + 1) * n];
                for (i, &av) in a_row.iter().enumerate() {
                    if av == E::ZERO {
                        continue;
                    }
                    let out_row = &mut out[i * n..(i + 1) * n];
                    for (o, &bv) in out_row.iter_mut().zip(b_row) {
                        *o += av * bv;
                    }
                }
            }
        }
        (true, true) => unreachable!("gemm_acc: double-transposed product is never needed"),
    }
}

pub(crate) struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn conv_dims<E: Element>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    bias: &Tensor<E>,
    stride: usize,
    pad: usize,
) -> Result<ConvDims> {
    let xs = x.shape();
    let ws = weight.shape();
    if xs.len() != 4 || ws.len() != 4 {
        return Err(Error::dim(format!(
            "conv2d expects x [B,C,H,W] and weight [OC,IC,K,K], got {xs:?} and {ws:?}"
        )));
    }
    let (batch, in_ch, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (out_ch, w_in_ch, k, k2) = (ws[0], ws[1], ws[2], ws[3]);
    if k != k2 {
        return Err(Error::dim(format!("conv2d kernel must be square, got {ws:?}")));
    }
    if w_in_ch != in_ch {
        return Err(Error::dim(format!(
            "conv2d input channels {in_ch} do not match weight channels {w_in_ch}"
        )));
    }
    if bias.shape() != [out_ch] {
        return Err(Error::dim(format!(
            "conv2d bias shape {:?} does not match out channels {out_ch}",
            bias.shape()
        )));
    }
    if stride == 0 {
        return Err(Error::contract("conv2d stride must be positive".to_string()));
    }
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::dim(format!(
            "conv2d kernel {k} larger than padded input {h}x{w} (pad {pad})"
        )));
    }
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    Ok(ConvDims {
        batch,
        in_ch,
        h,
        w,
        out_ch,
        k,
        stride,
        pad,
        oh,
        ow,
    })
}

/// Unfolds `x` into a `[B*OH*OW, IC*K*K]` matrix (zero padding outside).
pub(crate) fn im2col<E: Element>(x: &[E], d: &ConvDims) -> Vec<E> {
    let cols = d.in_ch * d.k * d.k;
    let rows = d.batch * d.oh * d.ow;
    let mut col = vec![E::ZERO; rows * cols];
    let mut row = 0usize;
    for b in 0..d.batch {
        let x_b = &x[b * d.in_ch * d.h * d.w..];
        for oy in 0..d.oh {
            for ox in 0..d.ow {
                let base = row * cols;
                let mut c = 0usize;
                for ic in 0..d.in_ch {
                    let x_c = &x_b[ic * d.h * d.w..(ic + 1) * d.h * d.w];
                    for ky in 0..d.k {
                        let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                        for kx in 0..d.k {
                            let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                            if iy >= 0 && (iy as usize) < d.h && ix >= 0 && (ix as usize) < d.w {
                                col[base + c] = x_c[iy as usize * d.w + ix as usize];
                            }
                            c += 1;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    col
}

/// Scatter-adds a `[B*OH*OW, IC*K*K]` gradient back onto the input layout.
pub(crate) fn col2im_acc<E: Element>(dcol: &[E], d: &ConvDims, dx: &mut [E]) {
    let cols = d.in_ch * d.k * d.k;
    let mut row = 0usize;
    for b in 0..d.batch {
        let dx_b = b * d.in_ch * d.h * d.w;
        for oy in 0..d.oh {
            for ox in 0..d.ow {
                let base = row * cols;
                let mut c = 0usize;
                for ic in 0..d.in_ch {
                    let dx_c = dx_b + ic * d.h * d.w;
                    for ky in 0..d.k {
                        let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                        for kx in 0..d.k {
                            let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                            if iy >= 0 && (iy as usize) < d.h && ix >= 0 && (ix as usize) < d.w {
                                dx[dx_c + iy as usize * d.w + ix as usize] += dcol[base + c];
                            }
                            c += 1;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn gelu_scalar<E: Element>(x: E) -> E {
    // tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
    let c = E::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = E::from_f64(0.044715);
    let half = E::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (E::ONE + u.tanh())
}

pub(crate) fn gelu_grad_scalar<E: Element>(x: E) -> E {
    let c = E::from_f64(0.797_884_560_802_865_4);
    let a = E::from_f64(0.044715);
    let half = E::from_f64(0.5);
    let three = E::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = E::ONE - t * t;
    half * (E::ONE + t) + half * x * sech2 * c * (E::ONE + three * a * x * x)
}

/// Softmax over rows of length `n`, with an optional shared key mask.
/// Masked keys get probability zero; the max-subtraction trick keeps the
/// computation finite for any finite logits.
pub(crate) fn softmax_rows<E: Element>(
    data: &mut [E],
    n: usize,
    mask: Option<&[bool]>,
) -> Result<()> {
    if n == 0 {
        return Err(Error::dim("softmax over an empty axis".to_string()));
    }
    if let Some(m) = mask {
        if m.len() != n {
            return Err(Error::dim(format!(
                "softmax mask length {} does not match axis length {n}",
                m.len()
            )));
        }
        if !m.iter().any(|&keep| keep) {
            return Err(Error::contract(
                "softmax mask must keep at least one key".to_string(),
            ));
        }
    }
    for row in data.chunks_exact_mut(n) {
        let mut max = None;
        for (j, &v) in row.iter().enumerate() {
            if mask.map_or(true, |m| m[j]) && max.map_or(true, |mx| v > mx) {
                max = Some(v);
            }
        }
        let max = max.expect("mask keeps at least one key");
        let mut sum = E::ZERO;
        for (j, v) in row.iter_mut().enumerate() {
            if mask.map_or(true, |m| m[j]) {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = E::ZERO;
            }
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Public operations.
// ---------------------------------------------------------------------------

impl<E: Element> Tensor<E> {
    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        check_same_shape("add", self.shape(), other.shape())?;
        let data: Vec<E> = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect()
        };
        let tracked = any_tracked(&[self, other]);
        finish(data, self.shape(), tracked, Op::Add(self.clone(), other.clone()))
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        check_same_shape("sub", self.shape(), other.shape())?;
        let data: Vec<E> = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(&x, &y)| x - y).collect()
        };
        let tracked = any_tracked(&[self, other]);
        finish(data, self.shape(), tracked, Op::Sub(self.clone(), other.clone()))
    }

    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        check_same_shape("mul", self.shape(), other.shape())?;
        let data: Vec<E> = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect()
        };
        let tracked = any_tracked(&[self, other]);
        finish(data, self.shape(), tracked, Op::Mul(self.clone(), other.clone()))
    }

    pub fn scale(&self, s: E) -> Result<Tensor<E>> {
        let data: Vec<E> = self.data().iter().map(|&x| x * s).collect();
        let tracked = any_tracked(&[self]);
        finish(data, self.shape(), tracked, Op::Scale(self.clone(), s))
    }

    pub fn add_scalar(&self, s: E) -> Result<Tensor<E>> {
        let data: Vec<E> = self.data().iter().map(|&x| x + s).collect();
        let tracked = any_tracked(&[self]);
        finish(data, self.shape(), tracked, Op::AddScalar(self.clone()))
    }

    /// `[B,C,H,W] + [C]`: per-channel bias.
    pub fn add_channel_bias(&self, bias: &Tensor<E>) -> Result<Tensor<E>> {
        let s = self.shape();
        if s.len() != 4 || bias.shape() != [s[1]] {
            return Err(Error::dim(format!(
                "add_channel_bias: x {s:?} with bias {:?}",
                bias.shape()
            )));
        }
        let (c, hw) = (s[1], s[2] * s[3]);
        let mut data = self.to_vec();
        {
            let b = bias.data();
            for (i, v) in data.iter_mut().enumerate() {
                *v += b[(i / hw) % c];
            }
        }
        let tracked = any_tracked(&[self, bias]);
        finish(
            data,
            s,
            tracked,
            Op::AddChannelBias {
                x: self.clone(),
                bias: bias.clone(),
            },
        )
    }

    /// `[..., D] + [D]`: bias over the last axis.
    pub fn add_token_bias(&self, bias: &Tensor<E>) -> Result<Tensor<E>> {
        let s = self.shape();
        let d = *s.last().ok_or_else(|| Error::dim("add_token_bias on 0-d tensor".to_string()))?;
        if bias.shape() != [d] {
            return Err(Error::dim(format!(
                "add_token_bias: x {s:?} with bias {:?}",
                bias.shape()
            )));
        }
        let mut data = self.to_vec();
        {
            let b = bias.data();
            for (i, v) in data.iter_mut().enumerate() {
                *v += b[i % d];
            }
        }
        let tracked = any_tracked(&[self, bias]);
        finish(
            data,
            s,
            tracked,
            Op::AddTokenBias {
                x: self.clone(),
                bias: bias.clone(),
            },
        )
    }

    /// `[B,C,H,W] + [B,C]`: per-sample per-channel shift (timestep features).
    pub fn add_sample_channel(&self, shift: &Tensor<E>) -> Result<Tensor<E>> {
        let s = self.shape();
        if s.len() != 4 || shift.shape() != [s[0], s[1]] {
            return Err(Error::dim(format!(
                "add_sample_channel: x {s:?} with shift {:?}",
                shift.shape()
            )));
        }
        let hw = s[2] * s[3];
        let mut data = self.to_vec();
        {
            let b = shift.data();
            for (i, v) in data.iter_mut().enumerate() {
                *v += b[i / hw];
            }
        }
        let tracked = any_tracked(&[self, shift]);
        finish(
            data,
            s,
            tracked,
            Op::AddSampleChannel {
                x: self.clone(),
                shift: shift.clone(),
            },
        )
    }

    /// `[M,K] x [K,N]` (or `[M,K] x [N,K]^T` with `transb`).
    pub fn matmul_t(&self, other: &Tensor<E>, transb: bool) -> Result<Tensor<E>> {
        let (a_s, b_s) = (self.shape(), other.shape());
        if a_s.len() != 2 || b_s.len() != 2 {
            return Err(Error::dim(format!("matmul expects 2-d tensors, got {a_s:?} x {b_s:?}")));
        }
        let (m, k) = (a_s[0], a_s[1]);
        let (bk, n) = if transb { (b_s[1], b_s[0]) } else { (b_s[0], b_s[1]) };
        if k != bk {
            return Err(Error::dim(format!(
                "matmul inner dims differ: {a_s:?} x {b_s:?} (transb={transb})"
            )));
        }
        let mut out = vec![E::ZERO; m * n];
        gemm_acc(m, k, n, &self.data(), &other.data(), &mut out, false, transb);
        let tracked = any_tracked(&[self, other]);
        finish(
            out,
            &[m, n],
            tracked,
            Op::Matmul {
                a: self.clone(),
                b: other.clone(),
                transb,
            },
        )
    }

    pub fn matmul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.matmul_t(other, false)
    }

    /// `[B,M,K] x [B,K,N]` (or `[B,M,K] x [B,N,K]^T` with `transb`).
    pub fn batch_matmul_t(&self, other: &Tensor<E>, transb: bool) -> Result<Tensor<E>> {
        let (a_s, b_s) = (self.shape(), other.shape());
        if a_s.len() != 3 || b_s.len() != 3 || a_s[0] != b_s[0] {
            return Err(Error::dim(format!(
                "batch_matmul expects matching 3-d tensors, got {a_s:?} x {b_s:?}"
            )));
        }
        let (bs, m, k) = (a_s[0], a_s[1], a_s[2]);
        let (bk, n) = if transb { (b_s[2], b_s[1]) } else { (b_s[1], b_s[2]) };
        if k != bk {
            return Err(Error::dim(format!(
                "batch_matmul inner dims differ: {a_s:?} x {b_s:?} (transb={transb})"
            )));
        }
        let mut out = vec![E::ZERO; bs * m * n];
        {
            let a = self.data();
            let b = other.data();
            for i in 0..bs {
                gemm_acc(
                    m,
                    k,
                    n,
                    &a[i * m * k..(i + 1) * m * k],
                    &b[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                    transb,
                );
            }
        }
        let tracked = any_tracked(&[self, other]);
        finish(
            out,
            &[bs, m, n],
            tracked,
            Op::BatchMatmul {
                a: self.clone(),
                b: other.clone(),
                transb,
            },
        )
    }

    /// 2-d convolution, square kernel, zero padding.
    pub fn conv2d(
        &self,
        weight: &Tensor<E>,
        bias: &Tensor<E>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<E>> {
        let d = conv_dims(self, weight, bias, stride, pad)?;
        let cols = d.in_ch * d.k * d.k;
        let rows = d.batch * d.oh * d.ow;
        let col = im2col(&self.data(), &d);
        // out_mat [rows, OC] = col [rows, cols] x weight [OC, cols]^T
        let mut out_mat = vec![E::ZERO; rows * d.out_ch];
        gemm_acc(rows, cols, d.out_ch, &col, &weight.data(), &mut out_mat, false, true);
        drop(col);
        let mut out = vec![E::ZERO; rows * d.out_ch];
        {
            let b = bias.data();
            let ohw = d.oh * d.ow;
            for row in 0..rows {
                let batch = row / ohw;
                let pix = row % ohw;
                for oc in 0..d.out_ch {
                    out[(batch * d.out_ch + oc) * ohw + pix] = out_mat[row * d.out_ch + oc] + b[oc];
                }
            }
        }
        let shape = [d.batch, d.out_ch, d.oh, d.ow];
        let tracked = any_tracked(&[self, weight, bias]);
        finish(
            out,
            &shape,
            tracked,
            Op::Conv2d {
                x: self.clone(),
                weight: weight.clone(),
                bias: bias.clone(),
                stride,
                pad,
            },
        )
    }

    /// Group normalization over `[B,C,H,W]` with per-channel affine.
    /// Statistics are computed per sample per group (population variance).
    pub fn group_norm(&self, gamma: &Tensor<E>, beta: &Tensor<E>, groups: usize, eps: f64) -> Result<Tensor<E>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::dim(format!("group_norm expects [B,C,H,W], got {s:?}")));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        if groups == 0 || c % groups != 0 {
            return Err(Error::contract(format!(
                "group_norm: groups {groups} must divide channels {c}"
            )));
        }
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::dim(format!(
                "group_norm affine shapes {:?}/{:?} must be [{c}]",
                gamma.shape(),
                beta.shape()
            )));
        }
        let cpg = c / groups;
        let hw = h * w;
        let group_len = cpg * hw;
        let mut out = self.to_vec();
        {
            let g = gamma.data();
            let be = beta.data();
            let epse = E::from_f64(eps);
            for bi in 0..b {
                for gi in 0..groups {
                    let start = bi * c * hw + gi * group_len;
                    let chunk = &mut out[start..start + group_len];
                    let mut mean = E::ZERO;
                    for &v in chunk.iter() {
                        mean += v;
                    }
                    mean = mean / E::from_f64(group_len as f64);
                    let mut var = E::ZERO;
                    for &v in chunk.iter() {
                        let d = v - mean;
                        var += d * d;
                    }
                    var = var / E::from_f64(group_len as f64);
                    let inv_std = E::ONE / (var + epse).sqrt();
                    for (i, v) in chunk.iter_mut().enumerate() {
                        let ch = gi * cpg + i / hw;
                        *v = g[ch] * ((*v - mean) * inv_std) + be[ch];
                    }
                }
            }
        }
        let tracked = any_tracked(&[self, gamma, beta]);
        finish(
            out,
            s,
            tracked,
            Op::GroupNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                groups,
                eps,
            },
        )
    }

    /// GELU activation (tanh approximation).
    pub fn gelu(&self) -> Result<Tensor<E>> {
        let data: Vec<E> = self.data().iter().map(|&x| gelu_scalar(x)).collect();
        let tracked = any_tracked(&[self]);
        finish(data, self.shape(), tracked, Op::Gelu(self.clone()))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Result<Tensor<E>> {
        self.softmax_last_masked(None)
    }

    /// Softmax over the last axis with an optional key mask shared by all
    /// rows: `mask[j] = false` gives key `j` exactly zero probability.
    pub fn softmax_last_masked(&self, mask: Option<&[bool]>) -> Result<Tensor<E>> {
        let n = *self
            .shape()
            .last()
            .ok_or_else(|| Error::dim("softmax on 0-d tensor".to_string()))?;
        let mut data = self.to_vec();
        softmax_rows(&mut data, n, mask)?;
        let tracked = any_tracked(&[self]);
        finish(
            data,
            self.shape(),
            tracked,
            Op::Softmax { x: self.clone() },
        )
    }

    /// Sum of all elements (scalar `[1]`).
    pub fn sum_all(&self) -> Result<Tensor<E>> {
        let mut acc = E::ZERO;
        for &v in self.data().iter() {
            acc += v;
        }
        let tracked = any_tracked(&[self]);
        finish(vec![acc], &[1], tracked, Op::Sum(self.clone()))
    }

    /// Mean of all elements (scalar `[1]`).
    pub fn mean_all(&self) -> Result<Tensor<E>> {
        if self.numel() == 0 {
            return Err(Error::dim("mean of an empty tensor".to_string()));
        }
        let mut acc = E::ZERO;
        for &v in self.data().iter() {
            acc += v;
        }
        let mean = acc / E::from_f64(self.numel() as f64);
        let tracked = any_tracked(&[self]);
        finish(vec![mean], &[1], tracked, Op::Mean(self.clone()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<E>> {
        if shape_numel(shape) != self.numel() {
            return Err(Error::dim(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(),
                shape
            )));
        }
        let tracked = any_tracked(&[self]);
        finish(self.to_vec(), shape, tracked, Op::Reshape(self.clone()))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<E>> {
        let s = self.shape();
        if perm.len() != s.len() {
            return Err(Error::dim(format!(
                "permute {perm:?} does not match rank of {s:?}"
            )));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || seen[p] {
                return Err(Error::dim(format!("permute {perm:?} is not a permutation")));
            }
            seen[p] = true;
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let data = permute_copy(&self.data(), s, perm);
        let tracked = any_tracked(&[self]);
        finish(
            data,
            &out_shape,
            tracked,
            Op::Permute {
                x: self.clone(),
                perm: perm.to_vec(),
            },
        )
    }

    /// Concatenation along `axis`. All other dims must match exactly.
    pub fn concat(parts: &[&Tensor<E>], axis: usize) -> Result<Tensor<E>> {
        if parts.is_empty() {
            return Err(Error::dim("concat of zero tensors".to_string()));
        }
        let rank = parts[0].shape().len();
        if axis >= rank {
            return Err(Error::dim(format!(
                "concat axis {axis} out of range for rank {rank}"
            )));
        }
        let mut axis_total = 0usize;
        for p in parts {
            let s = p.shape();
            if s.len() != rank {
                return Err(Error::dim("concat parts have different ranks".to_string()));
            }
            for (i, (&a, &b)) in s.iter().zip(parts[0].shape()).enumerate() {
                if i != axis && a != b {
                    return Err(Error::dim(format!(
                        "concat parts disagree outside axis {axis}: {:?} vs {:?}",
                        s,
                        parts[0].shape()
                    )));
                }
            }
            axis_total += s[axis];
        }
        let mut out_shape = parts[0].shape().to_vec();
        out_shape[axis] = axis_total;

        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut data = vec![E::ZERO; shape_numel(&out_shape)];
        let out_block = axis_total * inner;
        let mut offset = 0usize;
        for p in parts {
            let p_axis = p.shape()[axis];
            let p_block = p_axis * inner;
            let pd = p.data();
            for o in 0..outer {
                let src = &pd[o * p_block..(o + 1) * p_block];
                let dst_start = o * out_block + offset * inner;
                data[dst_start..dst_start + p_block].copy_from_slice(src);
            }
            offset += p_axis;
        }
        let owned: Vec<Tensor<E>> = parts.iter().map(|p| (*p).clone()).collect();
        let tracked = graph_enabled() && owned.iter().any(|t| t.tracked());
        finish(data, &out_shape, tracked, Op::Concat { parts: owned, axis })
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<E>> {
        let s = self.shape();
        if axis >= s.len() {
            return Err(Error::dim(format!(
                "slice axis {axis} out of range for rank {}",
                s.len()
            )));
        }
        if start + len > s[axis] {
            return Err(Error::dim(format!(
                "slice [{start}, {}) exceeds axis length {}",
                start + len,
                s[axis]
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let in_block = s[axis] * inner;
        let out_block = len * inner;
        let mut out_shape = s.to_vec();
        out_shape[axis] = len;
        let mut data = vec![E::ZERO; outer * out_block];
        {
            let src = self.data();
            for o in 0..outer {
                let src_start = o * in_block + start * inner;
                data[o * out_block..(o + 1) * out_block]
                    .copy_from_slice(&src[src_start..src_start + out_block]);
            }
        }
        let tracked = any_tracked(&[self]);
        finish(
            data,
            &out_shape,
            tracked,
            Op::Slice {
                x: self.clone(),
                axis,
                start,
            },
        )
    }

    /// Nearest-neighbor 2x spatial upsampling of `[B,C,H,W]`.
    pub fn upsample_nearest_2x(&self) -> Result<Tensor<E>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::dim(format!("upsample expects [B,C,H,W], got {s:?}")));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut data = vec![E::ZERO; b * c * 4 * h * w];
        {
            let src = self.data();
            for bc in 0..b * c {
                let sp = &src[bc * h * w..(bc + 1) * h * w];
                let dp = &mut data[bc * 4 * h * w..(bc + 1) * 4 * h * w];
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        dp[y * 2 * w + x] = sp[(y / 2) * w + x / 2];
                    }
                }
            }
        }
        let tracked = any_tracked(&[self]);
        finish(data, &[b, c, 2 * h, 2 * w], tracked, Op::UpsampleNearest2x(self.clone()))
    }

    /// Mean squared difference to `other` (scalar).
    pub fn mse(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let d = self.sub(other)?;
        d.mul(&d)?.mean_all()
    }
}

pub(crate) fn permute_copy<E: Element>(src: &[E], shape: &[usize], perm: &[usize]) -> Vec<E> {
    let rank = shape.len();
    let in_strides = shape_strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides = shape_strides(&out_shape);
    let n = shape_numel(shape);
    let mut out = vec![E::ZERO; n];
    // Walk output positions in order; compute matching input index.
    let mut idx = vec![0usize; rank];
    for (out_pos, slot) in out.iter_mut().enumerate() {
        let mut rem = out_pos;
        let mut in_pos = 0usize;
        for d in 0..rank {
            idx[d] = rem / out_strides[d];
            rem %= out_strides[d];
            in_pos += idx[d] * in_strides[perm[d]];
        }
        *slot = src[in_pos];
    }
    out
}
