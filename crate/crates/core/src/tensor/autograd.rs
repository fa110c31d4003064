//! Reverse-mode differentiation over the recorded op graph.

use std::collections::HashSet;

use super::ops::{
    bilinear_axis, conv_out_size, conv_valid_range, gemm_nt, gemm_tn, permute_values, split_axis,
    stable_sigmoid, MatPlan,
};
use super::TensorBase;
use crate::error::{Result, TensorError};
use crate::scalar::{norm_cdf, norm_pdf, Scalar};

pub(crate) enum Op<F: Scalar> {
    Add(TensorBase<F>, TensorBase<F>),
    Sub(TensorBase<F>, TensorBase<F>),
    Mul(TensorBase<F>, TensorBase<F>),
    Div(TensorBase<F>, TensorBase<F>),
    AddScalar(TensorBase<F>),
    MulScalar(TensorBase<F>, F),
    AddBroadcast(TensorBase<F>, TensorBase<F>),
    MatMul(TensorBase<F>, TensorBase<F>),
    Gelu(TensorBase<F>),
    Sigmoid(TensorBase<F>),
    Softmax {
        x: TensorBase<F>,
        axis: usize,
    },
    LayerNorm {
        x: TensorBase<F>,
        gamma: TensorBase<F>,
        beta: TensorBase<F>,
        eps: F,
    },
    Conv2d {
        x: TensorBase<F>,
        w: TensorBase<F>,
        bias: Option<TensorBase<F>>,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        x: TensorBase<F>,
        w: TensorBase<F>,
        bias: Option<TensorBase<F>>,
        stride: usize,
    },
    UpsampleBilinear(TensorBase<F>),
    Reshape(TensorBase<F>),
    Permute {
        x: TensorBase<F>,
        axes: Vec<usize>,
    },
    Sum(TensorBase<F>),
    BceWithLogits {
        logits: TensorBase<F>,
        target: TensorBase<F>,
    },
}

impl<F: Scalar> Op<F> {
    pub(crate) fn inputs(&self) -> Vec<&TensorBase<F>> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![a, b],
            Op::AddScalar(x) | Op::MulScalar(x, _) => vec![x],
            Op::AddBroadcast(x, b) => vec![x, b],
            Op::MatMul(a, b) => vec![a, b],
            Op::Gelu(x) | Op::Sigmoid(x) => vec![x],
            Op::Softmax { x, .. } => vec![x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Conv2d { x, w, bias, .. } | Op::ConvTranspose2d { x, w, bias, .. } => {
                let mut v = vec![x, w];
                if let Some(b) = bias {
                    v.push(b);
                }
                v
            }
            Op::UpsampleBilinear(x) | Op::Reshape(x) | Op::Sum(x) => vec![x],
            Op::Permute { x, .. } => vec![x],
            Op::BceWithLogits { logits, target } => vec![logits, target],
        }
    }
}

impl<F: Scalar> TensorBase<F> {
    /// Populates `grad` on every `requires_grad` tensor that `self` depends
    /// on. `self` must be a scalar (one element).
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape().to_vec(),
            });
        }
        if !self.requires_grad() {
            // Loss is constant with respect to every parameter; nothing to do.
            return Ok(());
        }
        let order = self.topo_order();
        self.seed_grad_one();
        for node in order.iter().rev() {
            if let Some(op) = node.op() {
                let grad = node
                    .grad()
                    .expect("graph node visited before its consumers");
                backprop(op, node, &grad);
                // Intermediate grads are scratch; free them as we go so only
                // leaf tensors keep gradients after the pass.
                node.zero_grad();
            }
        }
        Ok(())
    }

    /// Post-order over the requires-grad subgraph, inputs before outputs;
    /// each node appears exactly once.
    fn topo_order(&self) -> Vec<TensorBase<F>> {
        let mut order = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(TensorBase<F>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = t.op() {
                for inp in op.inputs() {
                    if inp.requires_grad() && !visited.contains(&inp.key()) {
                        stack.push((inp.clone(), false));
                    }
                }
            }
        }
        order
    }
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}

fn backprop<F: Scalar>(op: &Op<F>, node: &TensorBase<F>, g: &[F]) {
    match op {
        Op::Add(a, b) => {
            if a.requires_grad() {
                a.accumulate_grad(g);
            }
            if b.requires_grad() {
                b.accumulate_grad(g);
            }
        }
        Op::Sub(a, b) => {
            if a.requires_grad() {
                a.accumulate_grad(g);
            }
            if b.requires_grad() {
                let neg: Vec<F> = g.iter().map(|&v| -v).collect();
                b.accumulate_grad(&neg);
            }
        }
        Op::Mul(a, b) => {
            if a.requires_grad() {
                let bs = b.values();
                let da: Vec<F> = g.iter().zip(bs.iter()).map(|(&gv, &bv)| gv * bv).collect();
                drop(bs);
                a.accumulate_grad(&da);
            }
            if b.requires_grad() {
                let avs = a.values();
                let db: Vec<F> = g.iter().zip(avs.iter()).map(|(&gv, &av)| gv * av).collect();
                drop(avs);
                b.accumulate_grad(&db);
            }
        }
        Op::Div(a, b) => {
            if a.requires_grad() {
                let bs = b.values();
                let da: Vec<F> = g.iter().zip(bs.iter()).map(|(&gv, &bv)| gv / bv).collect();
                drop(bs);
                a.accumulate_grad(&da);
            }
            if b.requires_grad() {
                let avs = a.values();
                let bs = b.values();
                let db: Vec<F> = g
                    .iter()
                    .zip(avs.iter().zip(bs.iter()))
                    .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                    .collect();
                drop(avs);
                drop(bs);
                b.accumulate_grad(&db);
            }
        }
        Op::AddScalar(x) => {
            if x.requires_grad() {
                x.accumulate_grad(g);
            }
        }
        Op::MulScalar(x, c) => {
            if x.requires_grad() {
                let dx: Vec<F> = g.iter().map(|&gv| gv * *c).collect();
                x.accumulate_grad(&dx);
            }
        }
        Op::AddBroadcast(x, b) => {
            if x.requires_grad() {
                x.accumulate_grad(g);
            }
            if b.requires_grad() {
                let bn = b.numel().max(1);
                b.with_grad_buf(|db| {
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % bn] += gv;
                    }
                });
            }
        }
        Op::MatMul(a, b) => {
            let plan = MatPlan::new("matmul", a.shape(), b.shape())
                .expect("shapes were validated in forward");
            let (m, k, n) = (plan.m, plan.k, plan.n);
            if a.requires_grad() {
                let bs = b.values();
                a.with_grad_buf(|da| {
                    for bi in 0..plan.batch_count() {
                        let (af, bf) = plan.operand_batches(bi);
                        gemm_nt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bs[bf * k * n..(bf + 1) * k * n],
                            &mut da[af * m * k..(af + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            if b.requires_grad() {
                let avs = a.values();
                b.with_grad_buf(|db| {
                    for bi in 0..plan.batch_count() {
                        let (af, bf) = plan.operand_batches(bi);
                        gemm_tn(
                            &avs[af * m * k..(af + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut db[bf * k * n..(bf + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
        }
        Op::Gelu(x) => {
            if x.requires_grad() {
                let xs = x.values();
                // d/dx [x·Φ(x)] = Φ(x) + x·φ(x)
                let dx: Vec<F> = g
                    .iter()
                    .zip(xs.iter())
                    .map(|(&gv, &xv)| gv * (norm_cdf(xv) + xv * norm_pdf(xv)))
                    .collect();
                drop(xs);
                x.accumulate_grad(&dx);
            }
        }
        Op::Sigmoid(x) => {
            if x.requires_grad() {
                let out = node.values();
                let dx: Vec<F> = g
                    .iter()
                    .zip(out.iter())
                    .map(|(&gv, &s)| gv * s * (F::one() - s))
                    .collect();
                drop(out);
                x.accumulate_grad(&dx);
            }
        }
        Op::Softmax { x, axis } => {
            if x.requires_grad() {
                let s = node.values();
                let (outer, len, inner) = split_axis(node.shape(), *axis);
                let mut dx = vec![F::zero(); s.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = F::zero();
                        for a in 0..len {
                            let idx = base + a * inner;
                            dot += g[idx] * s[idx];
                        }
                        for a in 0..len {
                            let idx = base + a * inner;
                            dx[idx] = s[idx] * (g[idx] - dot);
                        }
                    }
                }
                drop(s);
                x.accumulate_grad(&dx);
            }
        }
        Op::LayerNorm { x, gamma, beta, eps } => {
            let d = *x.shape().last().unwrap();
            let inv_d = F::lit(1.0 / d as f64);
            let xs = x.values();
            let gs = gamma.values();
            let rows = xs.len() / d;
            let mut dx = vec![F::zero(); xs.len()];
            let mut dgamma = vec![F::zero(); d];
            let mut dbeta = vec![F::zero(); d];
            for r in 0..rows {
                let xr = &xs[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                let mut mean = F::zero();
                for &v in xr {
                    mean += v;
                }
                mean *= inv_d;
                let mut var = F::zero();
                for &v in xr {
                    let c = v - mean;
                    var += c * c;
                }
                var *= inv_d;
                let inv_std = (var + *eps).sqrt().recip();
                let mut sum_dxhat = F::zero();
                let mut sum_dxhat_xhat = F::zero();
                for i in 0..d {
                    let xhat = (xr[i] - mean) * inv_std;
                    let dxhat = gr[i] * gs[i];
                    dgamma[i] += gr[i] * xhat;
                    dbeta[i] += gr[i];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                for i in 0..d {
                    let xhat = (xr[i] - mean) * inv_std;
                    let dxhat = gr[i] * gs[i];
                    dx[r * d + i] =
                        inv_std * inv_d * (F::lit(d as f64) * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                }
            }
            drop(xs);
            drop(gs);
            if x.requires_grad() {
                x.accumulate_grad(&dx);
            }
            if gamma.requires_grad() {
                gamma.accumulate_grad(&dgamma);
            }
            if beta.requires_grad() {
                beta.accumulate_grad(&dbeta);
            }
        }
        Op::Conv2d {
            x,
            w,
            bias,
            stride,
            padding,
        } => {
            let (b, c, h, wd) = dims4(x.shape());
            let (o, _, kh, kw) = dims4(w.shape());
            let (h2, w2) = conv_out_size(h, wd, kh, kw, *stride, *padding)
                .expect("validated in forward");
            if x.requires_grad() {
                let ws = w.values();
                x.with_grad_buf(|dx| {
                    for bi in 0..b {
                        for oi in 0..o {
                            let g_base = (bi * o + oi) * h2 * w2;
                            for ci in 0..c {
                                let x_base = (bi * c + ci) * h * wd;
                                let w_base = (oi * c + ci) * kh * kw;
                                for di in 0..kh {
                                    let qi = di as isize - *padding as isize;
                                    let (i_lo, i_hi) = conv_valid_range(qi, *stride, h, h2);
                                    for dj in 0..kw {
                                        let qj = dj as isize - *padding as isize;
                                        let (j_lo, j_hi) = conv_valid_range(qj, *stride, wd, w2);
                                        let wv = ws[w_base + di * kw + dj];
                                        for i in i_lo..i_hi {
                                            let yi = (i * stride) as isize + qi;
                                            let xrow = x_base + yi as usize * wd;
                                            let grow = g_base + i * w2;
                                            for j in j_lo..j_hi {
                                                let xj = (j * stride) as isize + qj;
                                                dx[xrow + xj as usize] += wv * g[grow + j];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            if w.requires_grad() {
                let xs = x.values();
                w.with_grad_buf(|dw| {
                    for bi in 0..b {
                        for oi in 0..o {
                            let g_base = (bi * o + oi) * h2 * w2;
                            for ci in 0..c {
                                let x_base = (bi * c + ci) * h * wd;
                                let w_base = (oi * c + ci) * kh * kw;
                                for di in 0..kh {
                                    let qi = di as isize - *padding as isize;
                                    let (i_lo, i_hi) = conv_valid_range(qi, *stride, h, h2);
                                    for dj in 0..kw {
                                        let qj = dj as isize - *padding as isize;
                                        let (j_lo, j_hi) = conv_valid_range(qj, *stride, wd, w2);
                                        let mut acc = F::zero();
                                        for i in i_lo..i_hi {
                                            let yi = (i * stride) as isize + qi;
                                            let xrow = x_base + yi as usize * wd;
                                            let grow = g_base + i * w2;
                                            for j in j_lo..j_hi {
                                                let xj = (j * stride) as isize + qj;
                                                acc += xs[xrow + xj as usize] * g[grow + j];
                                            }
                                        }
                                        dw[w_base + di * kw + dj] += acc;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            if let Some(bias) = bias {
                if bias.requires_grad() {
                    bias.with_grad_buf(|db| {
                        for bi in 0..b {
                            for (oi, slot) in db.iter_mut().enumerate() {
                                let g_base = (bi * o + oi) * h2 * w2;
                                let mut acc = F::zero();
                                for &gv in &g[g_base..g_base + h2 * w2] {
                                    acc += gv;
                                }
                                *slot += acc;
                            }
                        }
                    });
                }
            }
        }
        Op::ConvTranspose2d { x, w, bias, stride } => {
            let (b, c, h, wd) = dims4(x.shape());
            let (_, o, kh, kw) = dims4(w.shape());
            let (_, _, h2, w2) = dims4(node.shape());
            if x.requires_grad() {
                let ws = w.values();
                x.with_grad_buf(|dx| {
                    for bi in 0..b {
                        for ci in 0..c {
                            let x_base = (bi * c + ci) * h * wd;
                            for oi in 0..o {
                                let g_base = (bi * o + oi) * h2 * w2;
                                let w_base = (ci * o + oi) * kh * kw;
                                for di in 0..kh {
                                    for dj in 0..kw {
                                        let wv = ws[w_base + di * kw + dj];
                                        for i in 0..h {
                                            let xrow = x_base + i * wd;
                                            let grow = g_base + (i * stride + di) * w2 + dj;
                                            for j in 0..wd {
                                                dx[xrow + j] += wv * g[grow + j * stride];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            if w.requires_grad() {
                let xs = x.values();
                w.with_grad_buf(|dw| {
                    for bi in 0..b {
                        for ci in 0..c {
                            let x_base = (bi * c + ci) * h * wd;
                            for oi in 0..o {
                                let g_base = (bi * o + oi) * h2 * w2;
                                let w_base = (ci * o + oi) * kh * kw;
                                for di in 0..kh {
                                    for dj in 0..kw {
                                        let mut acc = F::zero();
                                        for i in 0..h {
                                            let xrow = x_base + i * wd;
                                            let grow = g_base + (i * stride + di) * w2 + dj;
                                            for j in 0..wd {
                                                acc += xs[xrow + j] * g[grow + j * stride];
                                            }
                                        }
                                        dw[w_base + di * kw + dj] += acc;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            if let Some(bias) = bias {
                if bias.requires_grad() {
                    bias.with_grad_buf(|db| {
                        for bi in 0..b {
                            for (oi, slot) in db.iter_mut().enumerate() {
                                let g_base = (bi * o + oi) * h2 * w2;
                                let mut acc = F::zero();
                                for &gv in &g[g_base..g_base + h2 * w2] {
                                    acc += gv;
                                }
                                *slot += acc;
                            }
                        }
                    });
                }
            }
        }
        Op::UpsampleBilinear(x) => {
            if x.requires_grad() {
                let (b, c, h, w) = dims4(x.shape());
                let (_, _, oh, ow) = dims4(node.shape());
                let ys = bilinear_axis(h, oh);
                let xs_ax = bilinear_axis(w, ow);
                x.with_grad_buf(|dx| {
                    for bc in 0..b * c {
                        let in_base = bc * h * w;
                        let out_base = bc * oh * ow;
                        for (i, &(y0, y1, wy)) in ys.iter().enumerate() {
                            let wy = F::lit(wy);
                            let r0 = in_base + y0 * w;
                            let r1 = in_base + y1 * w;
                            let grow = out_base + i * ow;
                            for (j, &(x0, x1, wx)) in xs_ax.iter().enumerate() {
                                let wx = F::lit(wx);
                                let gv = g[grow + j];
                                dx[r0 + x0] += gv * (F::one() - wy) * (F::one() - wx);
                                dx[r0 + x1] += gv * (F::one() - wy) * wx;
                                dx[r1 + x0] += gv * wy * (F::one() - wx);
                                dx[r1 + x1] += gv * wy * wx;
                            }
                        }
                    }
                });
            }
        }
        Op::Reshape(x) => {
            if x.requires_grad() {
                x.accumulate_grad(g);
            }
        }
        Op::Permute { x, axes } => {
            if x.requires_grad() {
                let mut inverse = vec![0usize; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let dx = permute_values(g, node.shape(), &inverse, x.shape());
                x.accumulate_grad(&dx);
            }
        }
        Op::Sum(x) => {
            if x.requires_grad() {
                let gv = g[0];
                x.with_grad_buf(|dx| {
                    for v in dx.iter_mut() {
                        *v += gv;
                    }
                });
            }
        }
        Op::BceWithLogits { logits, target } => {
            if logits.requires_grad() {
                let xs = logits.values();
                let ts = target.values();
                let dx: Vec<F> = g
                    .iter()
                    .zip(xs.iter().zip(ts.iter()))
                    .map(|(&gv, (&x, &t))| gv * (stable_sigmoid(x) - t))
                    .collect();
                drop(xs);
                drop(ts);
                logits.accumulate_grad(&dx);
            }
            if target.requires_grad() {
                // dℓ/dt = -ln(σ/(1-σ)) = -x
                let xs = logits.values();
                let dt: Vec<F> = g.iter().zip(xs.iter()).map(|(&gv, &x)| -gv * x).collect();
                drop(xs);
                target.accumulate_grad(&dt);
            }
        }
    }
}
