//! Reverse-mode gradient propagation.
//!
//! `backward` walks the graph from a scalar output in reverse topological
//! order, applying each op's vector-Jacobian product and accumulating into
//! leaf variables. Gradients accumulate across calls until `zero_grad`.

use std::collections::{HashMap, HashSet};

use super::ops::{col2im_acc, conv_dims, gelu_grad_scalar, gemm_acc, im2col, permute_copy, Op};
use super::{shape_numel, Element, Tensor};
use crate::error::{Error, Result};

impl<E: Element> Tensor<E> {
    /// Backpropagates from this scalar through the recorded graph.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::dim(format!(
                "backward requires a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.tracked() {
            return Err(Error::contract(
                "backward on an untracked tensor (no graph was recorded)".to_string(),
            ));
        }
        let order = topo_order(self);
        let mut grads: HashMap<u64, Vec<E>> = HashMap::new();
        grads.insert(self.id(), vec![E::ONE]);

        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            match &node.inner.op {
                None => {
                    if node.tracked() {
                        node.accumulate_grad(&g);
                    }
                }
                Some(op) => vjp(node, op, &g, &mut grads)?,
            }
        }
        Ok(())
    }
}

/// Post-order DFS (children before parents), iterative to stay safe on deep
/// graphs. Only tracked tensors are traversed.
fn topo_order<E: Element>(root: &Tensor<E>) -> Vec<Tensor<E>> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor<E>, bool)> = vec![(root.clone(), false)];
    while let Some((node, children_done)) = stack.pop() {
        if children_done {
            order.push(node);
            continue;
        }
        if !visited.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        if let Some(op) = &node.inner.op {
            for input in op.inputs() {
                if input.tracked() && !visited.contains(&input.id()) {
                    stack.push((input.clone(), false));
                }
            }
        }
    }
    order
}

fn add_to<E: Element>(grads: &mut HashMap<u64, Vec<E>>, t: &Tensor<E>, contribution: Vec<E>) {
    if !t.tracked() {
        return;
    }
    match grads.entry(t.id()) {
        std::collections::hash_map::Entry::Occupied(mut e) => {
            for (acc, c) in e.get_mut().iter_mut().zip(contribution) {
                *acc += c;
            }
        }
        std::collections::hash_map::Entry::Vacant(e) => {
            e.insert(contribution);
        }
    }
}

fn vjp<E: Element>(
    node: &Tensor<E>,
    op: &Op<E>,
    g: &[E],
    grads: &mut HashMap<u64, Vec<E>>,
) -> Result<()> {
    match op {
        Op::Add(a, b) => {
            add_to(grads, a, g.to_vec());
            add_to(grads, b, g.to_vec());
        }
        Op::Sub(a, b) => {
            add_to(grads, a, g.to_vec());
            add_to(grads, b, g.iter().map(|&v| -v).collect());
        }
        Op::Mul(a, b) => {
            if a.tracked() {
                let bd = b.data();
                add_to(grads, a, g.iter().zip(bd.iter()).map(|(&gi, &bi)| gi * bi).collect());
            }
            if b.tracked() {
                let ad = a.data();
                add_to(grads, b, g.iter().zip(ad.iter()).map(|(&gi, &ai)| gi * ai).collect());
            }
        }
        Op::Scale(x, s) => {
            add_to(grads, x, g.iter().map(|&v| v * *s).collect());
        }
        Op::AddScalar(x) => {
            add_to(grads, x, g.to_vec());
        }
        Op::AddChannelBias { x, bias } => {
            add_to(grads, x, g.to_vec());
            if bias.tracked() {
                let s = x.shape();
                let (c, hw) = (s[1], s[2] * s[3]);
                let mut db = vec![E::ZERO; c];
                for (i, &gi) in g.iter().enumerate() {
                    db[(i / hw) % c] += gi;
                }
                add_to(grads, bias, db);
            }
        }
        Op::AddTokenBias { x, bias } => {
            add_to(grads, x, g.to_vec());
            if bias.tracked() {
                let d = *x.shape().last().expect("checked at construction");
                let mut db = vec![E::ZERO; d];
                for (i, &gi) in g.iter().enumerate() {
                    db[i % d] += gi;
                }
                add_to(grads, bias, db);
            }
        }
        Op::AddSampleChannel { x, shift } => {
            add_to(grads, x, g.to_vec());
            if shift.tracked() {
                let s = x.shape();
                let hw = s[2] * s[3];
                let mut db = vec![E::ZERO; s[0] * s[1]];
                for (i, &gi) in g.iter().enumerate() {
                    db[i / hw] += gi;
                }
                add_to(grads, shift, db);
            }
        }
        Op::Matmul { a, b, transb } => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = if *transb { b.shape()[0] } else { b.shape()[1] };
            if a.tracked() {
                let mut da = vec![E::ZERO; m * k];
                let bd = b.data();
                if *transb {
                    // C = A B^T, B stored [n,k]: dA = g B
                    gemm_acc(m, n, k, g, &bd, &mut da, false, false);
                } else {
                    // C = A B, B stored [k,n]: dA = g B^T
                    gemm_acc(m, n, k, g, &bd, &mut da, false, true);
                }
                add_to(grads, a, da);
            }
            if b.tracked() {
                let ad = a.data();
                if *transb {
                    // dB [n,k] = g^T A
                    let mut db = vec![E::ZERO; n * k];
                    gemm_acc(n, m, k, g, &ad, &mut db, true, false);
                    add_to(grads, b, db);
                } else {
                    // dB [k,n] = A^T g
                    let mut db = vec![E::ZERO; k * n];
                    gemm_acc(k, m, n, &ad, g, &mut db, true, false);
                    add_to(grads, b, db);
                }
            }
        }
        Op::BatchMatmul { a, b, transb } => {
            let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let n = if *transb { b.shape()[1] } else { b.shape()[2] };
            if a.tracked() {
                let mut da = vec![E::ZERO; bs * m * k];
                let bd = b.data();
                for i in 0..bs {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let bi = &bd[i * k * n..(i + 1) * k * n];
                    let di = &mut da[i * m * k..(i + 1) * m * k];
                    gemm_acc(m, n, k, gi, bi, di, false, !*transb);
                }
                add_to(grads, a, da);
            }
            if b.tracked() {
                let ad = a.data();
                let mut db = vec![E::ZERO; bs * k * n];
                for i in 0..bs {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &ad[i * m * k..(i + 1) * m * k];
                    let di = &mut db[i * k * n..(i + 1) * k * n];
                    if *transb {
                        // dB [n,k] = g^T A
                        gemm_acc(n, m, k, gi, ai, di, true, false);
                    } else {
                        // dB [k,n] = A^T g
                        gemm_acc(k, m, n, ai, gi, di, true, false);
                    }
                }
                add_to(grads, b, db);
            }
        }
        Op::Conv2d {
            x,
            weight,
            bias,
            stride,
            pad,
        } => {
            let d = conv_dims(x, weight, bias, *stride, *pad)?;
            let cols = d.in_ch * d.k * d.k;
            let rows = d.batch * d.oh * d.ow;
            let ohw = d.oh * d.ow;
            // Rearrange g [B,OC,OH,OW] into [rows, OC].
            let mut g_mat = vec![E::ZERO; rows * d.out_ch];
            for row in 0..rows {
                let batch = row / ohw;
                let pix = row % ohw;
                for oc in 0..d.out_ch {
                    g_mat[row * d.out_ch + oc] = g[(batch * d.out_ch + oc) * ohw + pix];
                }
            }
            if bias.tracked() {
                let mut db = vec![E::ZERO; d.out_ch];
                for row in 0..rows {
                    for oc in 0..d.out_ch {
                        db[oc] += g_mat[row * d.out_ch + oc];
                    }
                }
                add_to(grads, bias, db);
            }
            if weight.tracked() {
                let col = im2col(&x.data(), &d);
                // dW [OC, cols] = g_mat^T col
                let mut dw = vec![E::ZERO; d.out_ch * cols];
                gemm_acc(d.out_ch, rows, cols, &g_mat, &col, &mut dw, true, false);
                add_to(grads, weight, dw);
            }
            if x.tracked() {
                // dcol [rows, cols] = g_mat W
                let mut dcol = vec![E::ZERO; rows * cols];
                gemm_acc(rows, d.out_ch, cols, &g_mat, &weight.data(), &mut dcol, false, false);
                let mut dx = vec![E::ZERO; x.numel()];
                col2im_acc(&dcol, &d, &mut dx);
                add_to(grads, x, dx);
            }
        }
        Op::GroupNorm {
            x,
            gamma,
            beta,
            groups,
            eps,
        } => {
            let s = x.shape();
            let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
            let cpg = c / groups;
            let hw = h * w;
            let group_len = cpg * hw;
            let xd = x.data();
            let gd = gamma.data();
            let inv_len = E::from_f64(1.0 / group_len as f64);
            let epse = E::from_f64(*eps);

            let mut dx = if x.tracked() { vec![E::ZERO; x.numel()] } else { Vec::new() };
            let mut dgamma = vec![E::ZERO; c];
            let mut dbeta = vec![E::ZERO; c];

            for bi in 0..b {
                for gi in 0..*groups {
                    let start = bi * c * hw + gi * group_len;
                    let xs = &xd[start..start + group_len];
                    let gs = &g[start..start + group_len];
                    let mut mean = E::ZERO;
                    for &v in xs {
                        mean += v;
                    }
                    mean = mean * inv_len;
                    let mut var = E::ZERO;
                    for &v in xs {
                        let dv = v - mean;
                        var += dv * dv;
                    }
                    var = var * inv_len;
                    let inv_std = E::ONE / (var + epse).sqrt();

                    // Accumulate per-channel affine grads and the two group means.
                    let mut mean_dxhat = E::ZERO;
                    let mut mean_dxhat_xhat = E::ZERO;
                    for i in 0..group_len {
                        let ch = gi * cpg + i / hw;
                        let xhat = (xs[i] - mean) * inv_std;
                        dgamma[ch] += gs[i] * xhat;
                        dbeta[ch] += gs[i];
                        let dxhat = gs[i] * gd[ch];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat;
                    }
                    mean_dxhat = mean_dxhat * inv_len;
                    mean_dxhat_xhat = mean_dxhat_xhat * inv_len;

                    if x.tracked() {
                        for i in 0..group_len {
                            let ch = gi * cpg + i / hw;
                            let xhat = (xs[i] - mean) * inv_std;
                            let dxhat = gs[i] * gd[ch];
                            dx[start + i] = inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                }
            }
            drop(xd);
            drop(gd);
            if x.tracked() {
                add_to(grads, x, dx);
            }
            add_to(grads, gamma, dgamma);
            add_to(grads, beta, dbeta);
        }
        Op::Gelu(x) => {
            let xd = x.data();
            add_to(
                grads,
                x,
                g.iter()
                    .zip(xd.iter())
                    .map(|(&gi, &xi)| gi * gelu_grad_scalar(xi))
                    .collect(),
            );
        }
        Op::Softmax { x, .. } => {
            // dx_j = y_j (g_j - sum_k g_k y_k); masked keys have y = 0.
            let n = *node.shape().last().expect("softmax output has an axis");
            let y = node.data();
            let mut dx = vec![E::ZERO; y.len()];
            for (row_idx, (y_row, g_row)) in y.chunks_exact(n).zip(g.chunks_exact(n)).enumerate() {
                let mut s = E::ZERO;
                for (&yj, &gj) in y_row.iter().zip(g_row) {
                    s += yj * gj;
                }
                let out_row = &mut dx[row_idx * n..(row_idx + 1) * n];
                for j in 0..n {
                    out_row[j] = y_row[j] * (g_row[j] - s);
                }
            }
            drop(y);
            add_to(grads, x, dx);
        }
        Op::Sum(x) => {
            add_to(grads, x, vec![g[0]; x.numel()]);
        }
        Op::Mean(x) => {
            let coef = g[0] / E::from_f64(x.numel() as f64);
            add_to(grads, x, vec![coef; x.numel()]);
        }
        Op::Reshape(x) => {
            add_to(grads, x, g.to_vec());
        }
        Op::Permute { x, perm } => {
            // Invert the permutation and push the gradient back.
            let mut inv = vec![0usize; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
            add_to(grads, x, permute_copy(g, &out_shape, &inv));
        }
        Op::Concat { parts, axis } => {
            let rank = parts[0].shape().len();
            let inner: usize = parts[0].shape()[axis + 1..].iter().product();
            let outer: usize = parts[0].shape()[..*axis].iter().product();
            let total_axis: usize = parts.iter().map(|p| p.shape()[*axis]).sum();
            let out_block = total_axis * inner;
            debug_assert_eq!(g.len(), outer * out_block);
            debug_assert!(rank > *axis);
            let mut offset = 0usize;
            for p in parts {
                let p_axis = p.shape()[*axis];
                let p_block = p_axis * inner;
                if p.tracked() {
                    let mut dp = vec![E::ZERO; shape_numel(p.shape())];
                    for o in 0..outer {
                        let src_start = o * out_block + offset * inner;
                        dp[o * p_block..(o + 1) * p_block]
                            .copy_from_slice(&g[src_start..src_start + p_block]);
                    }
                    add_to(grads, p, dp);
                }
                offset += p_axis;
            }
        }
        Op::Slice { x, axis, start } => {
            let s = x.shape();
            let inner: usize = s[*axis + 1..].iter().product();
            let outer: usize = s[..*axis].iter().product();
            let in_block = s[*axis] * inner;
            let len = node.shape()[*axis];
            let out_block = len * inner;
            let mut dx = vec![E::ZERO; x.numel()];
            for o in 0..outer {
                let dst_start = o * in_block + start * inner;
                dx[dst_start..dst_start + out_block]
                    .copy_from_slice(&g[o * out_block..(o + 1) * out_block]);
            }
            add_to(grads, x, dx);
        }
        Op::UpsampleNearest2x(x) => {
            let s = x.shape();
            let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
            let mut dx = vec![E::ZERO; x.numel()];
            for i in 0..bc {
                let gp = &g[i * 4 * h * w..(i + 1) * 4 * h * w];
                let dp = &mut dx[i * h * w..(i + 1) * h * w];
                for y in 0..2 * h {
                    for xcol in 0..2 * w {
                        dp[(y / 2) * w + xcol / 2] += gp[y * 2 * w + xcol];
                    }
                }
            }
            add_to(grads, x, dx);
        }
    }
    Ok(())
}
