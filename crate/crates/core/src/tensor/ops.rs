//! Forward operations. Each op validates shapes, computes values eagerly and
//! records itself on the output when any input participates in a gradient.

use super::{Op, TensorBase};
use crate::error::{Result, TensorError};
use crate::scalar::{norm_cdf, Scalar};

/// Batch-broadcast plan for matmul over `[..batch, m, k] @ [..batch, k, n]`.
pub(crate) struct MatPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub batch: Vec<usize>,
    a_batch: Vec<usize>,
    b_batch: Vec<usize>,
    pub out_shape: Vec<usize>,
}

impl MatPlan {
    pub fn new(op: &'static str, a_shape: &[usize], b_shape: &[usize]) -> Result<Self> {
        if a_shape.len() < 2 || b_shape.len() < 2 {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a_shape.to_vec(),
                rhs: b_shape.to_vec(),
            });
        }
        let (m, ka) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
        let (kb, n) = (b_shape[b_shape.len() - 2], b_shape[b_shape.len() - 1]);
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a_shape.to_vec(),
                rhs: b_shape.to_vec(),
            });
        }
        let rank = a_shape.len().max(b_shape.len()) - 2;
        let mut batch = vec![1usize; rank];
        let mut a_batch = vec![1usize; rank];
        let mut b_batch = vec![1usize; rank];
        for d in 0..rank {
            let da = dim_from_right(a_shape, rank - d, 2);
            let db = dim_from_right(b_shape, rank - d, 2);
            if da != db && da != 1 && db != 1 {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: a_shape.to_vec(),
                    rhs: b_shape.to_vec(),
                });
            }
            batch[d] = da.max(db);
            a_batch[d] = da;
            b_batch[d] = db;
        }
        let mut out_shape = batch.clone();
        out_shape.push(m);
        out_shape.push(n);
        Ok(MatPlan {
            m,
            k: ka,
            n,
            batch,
            a_batch,
            b_batch,
            out_shape,
        })
    }

    pub fn batch_count(&self) -> usize {
        self.batch.iter().product()
    }

    /// Maps a flat output-batch index to flat batch indices of each operand.
    pub fn operand_batches(&self, mut flat: usize) -> (usize, usize) {
        let mut a_flat = 0;
        let mut b_flat = 0;
        // Decode most-significant first so the accumulators stay in step.
        let mut coords = vec![0usize; self.batch.len()];
        for d in (0..self.batch.len()).rev() {
            coords[d] = flat % self.batch[d];
            flat /= self.batch[d];
        }
        for (d, &coord) in coords.iter().enumerate() {
            a_flat = a_flat * self.a_batch[d] + if self.a_batch[d] == 1 { 0 } else { coord };
            b_flat = b_flat * self.b_batch[d] + if self.b_batch[d] == 1 { 0 } else { coord };
        }
        (a_flat, b_flat)
    }
}

fn dim_from_right(shape: &[usize], from_right: usize, skip_last: usize) -> usize {
    let avail = shape.len() - skip_last;
    if from_right > avail {
        1
    } else {
        shape[avail - from_right]
    }
}

/// `c += a @ b` for row-major blocks.
pub(crate) fn gemm<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += av * bj;
            }
        }
    }
}

/// `da += g @ bᵀ` where `g` is `[m,n]` and `b` is `[k,n]`.
pub(crate) fn gemm_nt<F: Scalar>(g: &[F], b: &[F], da: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let darow = &mut da[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = F::zero();
            for (&gj, &bj) in grow.iter().zip(brow) {
                acc += gj * bj;
            }
            darow[p] += acc;
        }
    }
}

/// `db += aᵀ @ g` where `a` is `[m,k]` and `g` is `[m,n]`.
pub(crate) fn gemm_tn<F: Scalar>(a: &[F], g: &[F], db: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &ap) in arow.iter().enumerate() {
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (dj, &gj) in dbrow.iter_mut().zip(grow) {
                *dj += ap * gj;
            }
        }
    }
}

pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Valid output range for a convolution coordinate `j*stride + q` over
/// `0..in_size`, clamped to `0..out_size`.
pub(crate) fn conv_valid_range(
    q: isize,
    stride: usize,
    in_size: usize,
    out_size: usize,
) -> (usize, usize) {
    let s = stride as isize;
    let lo = if q < 0 { (-q + s - 1) / s } else { 0 };
    let max_num = in_size as isize - q;
    let hi = if max_num <= 0 { 0 } else { (max_num + s - 1) / s };
    (
        lo.clamp(0, out_size as isize) as usize,
        hi.clamp(0, out_size as isize) as usize,
    )
}

/// Half-pixel bilinear sampling positions along one axis.
pub(crate) fn bilinear_axis(in_size: usize, out_size: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_size as f64 / out_size as f64;
    (0..out_size)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_size - 1);
            let i1 = (i0 + 1).min(in_size - 1);
            (i0, i1, (src - i0 as f64).clamp(0.0, 1.0))
        })
        .collect()
}

fn dims4(shape: &[usize]) -> Option<(usize, usize, usize, usize)> {
    if shape.len() == 4 {
        Some((shape[0], shape[1], shape[2], shape[3]))
    } else {
        None
    }
}

impl<F: Scalar> TensorBase<F> {
    fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        let out = {
            let a = self.values();
            let b = other.values();
            a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect()
        };
        Ok(Self::node(out, self.shape().to_vec(), Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        let out = {
            let a = self.values();
            let b = other.values();
            a.iter().zip(b.iter()).map(|(&x, &y)| x - y).collect()
        };
        Ok(Self::node(out, self.shape().to_vec(), Op::Sub(self.clone(), other.clone())))
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "mul")?;
        let out = {
            let a = self.values();
            let b = other.values();
            a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect()
        };
        Ok(Self::node(out, self.shape().to_vec(), Op::Mul(self.clone(), other.clone())))
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "div")?;
        let out = {
            let a = self.values();
            let b = other.values();
            a.iter().zip(b.iter()).map(|(&x, &y)| x / y).collect()
        };
        Ok(Self::node(out, self.shape().to_vec(), Op::Div(self.clone(), other.clone())))
    }

    pub fn add_scalar(&self, c: F) -> Self {
        let out = self.values().iter().map(|&x| x + c).collect();
        Self::node(out, self.shape().to_vec(), Op::AddScalar(self.clone()))
    }

    pub fn mul_scalar(&self, c: F) -> Self {
        let out = self.values().iter().map(|&x| x * c).collect();
        Self::node(out, self.shape().to_vec(), Op::MulScalar(self.clone(), c))
    }

    /// Adds `b` tiled over the leading dimensions of `self`; `b.shape` must be
    /// a suffix of `self.shape` (bias vectors, positional grids).
    pub fn add_broadcast(&self, b: &Self) -> Result<Self> {
        let sr = self.ndim();
        let br = b.ndim();
        if br > sr || self.shape()[sr - br..] != *b.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add_broadcast",
                lhs: self.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let bn = b.numel().max(1);
        let out = {
            let xs = self.values();
            let bs = b.values();
            xs.iter()
                .enumerate()
                .map(|(i, &x)| x + bs[i % bn])
                .collect()
        };
        Ok(Self::node(
            out,
            self.shape().to_vec(),
            Op::AddBroadcast(self.clone(), b.clone()),
        ))
    }

    /// Batched matrix product with numpy-style broadcast over batch dims.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let plan = MatPlan::new("matmul", self.shape(), other.shape())?;
        let (m, k, n) = (plan.m, plan.k, plan.n);
        let mut out = vec![F::zero(); plan.batch_count() * m * n];
        {
            let a = self.values();
            let b = other.values();
            for bi in 0..plan.batch_count() {
                let (af, bf) = plan.operand_batches(bi);
                gemm(
                    &a[af * m * k..(af + 1) * m * k],
                    &b[bf * k * n..(bf + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let shape = plan.out_shape.clone();
        Ok(Self::node(out, shape, Op::MatMul(self.clone(), other.clone())))
    }

    /// Exact GELU `x·Φ(x)` with Φ the standard normal CDF (erf form).
    pub fn gelu(&self) -> Self {
        let out = self.values().iter().map(|&x| x * norm_cdf(x)).collect();
        Self::node(out, self.shape().to_vec(), Op::Gelu(self.clone()))
    }

    pub fn sigmoid(&self) -> Self {
        let out = self.values().iter().map(|&x| stable_sigmoid(x)).collect();
        Self::node(out, self.shape().to_vec(), Op::Sigmoid(self.clone()))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        if axis >= self.ndim() {
            return Err(TensorError::Config {
                op: "softmax",
                msg: format!("axis {axis} out of range for shape {:?}", self.shape()),
            });
        }
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let xs = self.values();
        let mut out = vec![F::zero(); xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = F::neg_infinity();
                for a in 0..len {
                    mx = mx.max(xs[base + a * inner]);
                }
                let mut denom = F::zero();
                for a in 0..len {
                    let e = (xs[base + a * inner] - mx).exp();
                    out[base + a * inner] = e;
                    denom += e;
                }
                for a in 0..len {
                    out[base + a * inner] /= denom;
                }
            }
        }
        drop(xs);
        let shape = self.shape().to_vec();
        Ok(Self::node(out, shape, Op::Softmax { x: self.clone(), axis }))
    }

    /// Normalizes the last dimension to zero mean and unit population
    /// variance, then applies the affine `γ·x̂ + β`.
    pub fn layer_norm(&self, gamma: &Self, beta: &Self, eps: F) -> Result<Self> {
        let d = *self.shape().last().ok_or(TensorError::Config {
            op: "layer_norm",
            msg: "input must have rank >= 1".into(),
        })?;
        if gamma.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        if beta.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: beta.shape().to_vec(),
            });
        }
        if eps <= F::zero() {
            return Err(TensorError::Config {
                op: "layer_norm",
                msg: "eps must be positive".into(),
            });
        }
        let out = {
            let xs = self.values();
            let gs = gamma.values();
            let bs = beta.values();
            let mut out = vec![F::zero(); xs.len()];
            let inv_d = F::lit(1.0 / d as f64);
            for row in xs.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
                let (x, y) = row;
                let mut mean = F::zero();
                for &v in x {
                    mean += v;
                }
                mean *= inv_d;
                let mut var = F::zero();
                for &v in x {
                    let c = v - mean;
                    var += c * c;
                }
                var *= inv_d;
                let inv_std = (var + eps).sqrt().recip();
                for i in 0..d {
                    y[i] = (x[i] - mean) * inv_std * gs[i] + bs[i];
                }
            }
            out
        };
        let shape = self.shape().to_vec();
        Ok(Self::node(
            out,
            shape,
            Op::LayerNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                eps,
            },
        ))
    }

    /// Cross-correlation of `[B,C,H,W]` with kernels `[O,C,kh,kw]`.
    pub fn conv2d(
        &self,
        weight: &Self,
        bias: Option<&Self>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let (b, c, h, w) = dims4(self.shape()).ok_or(TensorError::Config {
            op: "conv2d",
            msg: format!("input must be rank 4, got {:?}", self.shape()),
        })?;
        let (o, cw, kh, kw) = dims4(weight.shape()).ok_or(TensorError::Config {
            op: "conv2d",
            msg: format!("kernel must be rank 4, got {:?}", weight.shape()),
        })?;
        if c != cw {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        if let Some(bias) = bias {
            if bias.shape() != [o] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: weight.shape().to_vec(),
                    rhs: bias.shape().to_vec(),
                });
            }
        }
        if stride == 0 {
            return Err(TensorError::Config {
                op: "conv2d",
                msg: "stride must be positive".into(),
            });
        }
        let (h2, w2) = conv_out_size(h, w, kh, kw, stride, padding)?;
        let mut out = vec![F::zero(); b * o * h2 * w2];
        {
            let xs = self.values();
            let ws = weight.values();
            let bv = bias.map(|t| t.to_vec());
            for bi in 0..b {
                for oi in 0..o {
                    let out_base = (bi * o + oi) * h2 * w2;
                    if let Some(bv) = &bv {
                        out[out_base..out_base + h2 * w2].fill(bv[oi]);
                    }
                    for ci in 0..c {
                        let x_base = (bi * c + ci) * h * w;
                        let w_base = (oi * c + ci) * kh * kw;
                        for di in 0..kh {
                            let qi = di as isize - padding as isize;
                            let (i_lo, i_hi) = conv_valid_range(qi, stride, h, h2);
                            for dj in 0..kw {
                                let qj = dj as isize - padding as isize;
                                let (j_lo, j_hi) = conv_valid_range(qj, stride, w, w2);
                                let wv = ws[w_base + di * kw + dj];
                                for i in i_lo..i_hi {
                                    let yi = (i * stride) as isize + qi;
                                    let xrow = x_base + yi as usize * w;
                                    let orow = out_base + i * w2;
                                    for j in j_lo..j_hi {
                                        let xj = (j * stride) as isize + qj;
                                        out[orow + j] += wv * xs[xrow + xj as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(Self::node(
            out,
            vec![b, o, h2, w2],
            Op::Conv2d {
                x: self.clone(),
                w: weight.clone(),
                bias: bias.cloned(),
                stride,
                padding,
            },
        ))
    }

    /// Transposed convolution of `[B,C,H,W]` with kernels `[C,O,kh,kw]`,
    /// output `[B,O,(H-1)s+kh,(W-1)s+kw]`.
    pub fn conv_transpose2d(&self, weight: &Self, bias: Option<&Self>, stride: usize) -> Result<Self> {
        let (b, c, h, w) = dims4(self.shape()).ok_or(TensorError::Config {
            op: "conv_transpose2d",
            msg: format!("input must be rank 4, got {:?}", self.shape()),
        })?;
        let (cw, o, kh, kw) = dims4(weight.shape()).ok_or(TensorError::Config {
            op: "conv_transpose2d",
            msg: format!("kernel must be rank 4, got {:?}", weight.shape()),
        })?;
        if c != cw {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2d",
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        if let Some(bias) = bias {
            if bias.shape() != [o] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv_transpose2d",
                    lhs: weight.shape().to_vec(),
                    rhs: bias.shape().to_vec(),
                });
            }
        }
        if stride == 0 {
            return Err(TensorError::Config {
                op: "conv_transpose2d",
                msg: "stride must be positive".into(),
            });
        }
        let h2 = (h - 1) * stride + kh;
        let w2 = (w - 1) * stride + kw;
        let mut out = vec![F::zero(); b * o * h2 * w2];
        {
            let xs = self.values();
            let ws = weight.values();
            let bv = bias.map(|t| t.to_vec());
            for bi in 0..b {
                for oi in 0..o {
                    let out_base = (bi * o + oi) * h2 * w2;
                    if let Some(bv) = &bv {
                        out[out_base..out_base + h2 * w2].fill(bv[oi]);
                    }
                    for ci in 0..c {
                        let x_base = (bi * c + ci) * h * w;
                        let w_base = (ci * o + oi) * kh * kw;
                        for di in 0..kh {
                            for dj in 0..kw {
                                let wv = ws[w_base + di * kw + dj];
                                for i in 0..h {
                                    let xrow = x_base + i * w;
                                    let orow = out_base + (i * stride + di) * w2 + dj;
                                    for j in 0..w {
                                        out[orow + j * stride] += wv * xs[xrow + j];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(Self::node(
            out,
            vec![b, o, h2, w2],
            Op::ConvTranspose2d {
                x: self.clone(),
                w: weight.clone(),
                bias: bias.cloned(),
                stride,
            },
        ))
    }

    /// Half-pixel bilinear resampling of `[B,C,H,W]` to `[B,C,oh,ow]`.
    pub fn upsample_bilinear(&self, oh: usize, ow: usize) -> Result<Self> {
        let (b, c, h, w) = dims4(self.shape()).ok_or(TensorError::Config {
            op: "upsample_bilinear",
            msg: format!("input must be rank 4, got {:?}", self.shape()),
        })?;
        if oh == 0 || ow == 0 {
            return Err(TensorError::Config {
                op: "upsample_bilinear",
                msg: "output size must be positive".into(),
            });
        }
        let ys = bilinear_axis(h, oh);
        let xs_ax = bilinear_axis(w, ow);
        let mut out = vec![F::zero(); b * c * oh * ow];
        {
            let xs = self.values();
            for bc in 0..b * c {
                let in_base = bc * h * w;
                let out_base = bc * oh * ow;
                for (i, &(y0, y1, wy)) in ys.iter().enumerate() {
                    let wy = F::lit(wy);
                    let r0 = in_base + y0 * w;
                    let r1 = in_base + y1 * w;
                    let orow = out_base + i * ow;
                    for (j, &(x0, x1, wx)) in xs_ax.iter().enumerate() {
                        let wx = F::lit(wx);
                        let top = xs[r0 + x0] * (F::one() - wx) + xs[r0 + x1] * wx;
                        let bot = xs[r1 + x0] * (F::one() - wx) + xs[r1 + x1] * wx;
                        out[orow + j] = top * (F::one() - wy) + bot * wy;
                    }
                }
            }
        }
        Ok(Self::node(
            out,
            vec![b, c, oh, ow],
            Op::UpsampleBilinear(self.clone()),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.to_vec();
        Ok(Self::node(out, shape.to_vec(), Op::Reshape(self.clone())))
    }

    /// Reorders dimensions; `axes` must be a permutation of `0..rank`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.ndim();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::Config {
                op: "permute",
                msg: format!("{axes:?} is not a permutation of 0..{rank}"),
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let out = permute_values(&self.values(), self.shape(), axes, &out_shape);
        Ok(Self::node(
            out,
            out_shape,
            Op::Permute {
                x: self.clone(),
                axes: axes.to_vec(),
            },
        ))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Self {
        let mut acc = F::zero();
        for &v in self.values().iter() {
            acc += v;
        }
        Self::node(vec![acc], Vec::new(), Op::Sum(self.clone()))
    }

    /// Mean of all elements as a rank-0 tensor.
    pub fn mean(&self) -> Self {
        self.sum().mul_scalar(F::lit(1.0 / self.numel() as f64))
    }

    /// Elementwise binary cross-entropy on raw logits, computed in the
    /// overflow-safe form `max(x,0) - x·t + ln(1+exp(-|x|))`.
    pub fn bce_with_logits(&self, target: &Self) -> Result<Self> {
        self.check_same_shape(target, "bce_with_logits")?;
        let out = {
            let xs = self.values();
            let ts = target.values();
            xs.iter()
                .zip(ts.iter())
                .map(|(&x, &t)| x.max(F::zero()) - x * t + (-x.abs()).exp().ln_1p())
                .collect()
        };
        Ok(Self::node(
            out,
            self.shape().to_vec(),
            Op::BceWithLogits {
                logits: self.clone(),
                target: target.clone(),
            },
        ))
    }
}

pub(crate) fn conv_out_size(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    let check = |size: usize, k: usize| -> Result<usize> {
        let padded = size + 2 * padding;
        if padded < k || !(padded - k).is_multiple_of(stride) {
            return Err(TensorError::Config {
                op: "conv2d",
                msg: format!(
                    "output size ({size} + 2*{padding} - {k}) / {stride} + 1 is not integral"
                ),
            });
        }
        Ok((padded - k) / stride + 1)
    };
    Ok((check(h, kh)?, check(w, kw)?))
}

pub(crate) fn stable_sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        (F::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn permute_values<F: Scalar>(
    values: &[F],
    in_shape: &[usize],
    axes: &[usize],
    out_shape: &[usize],
) -> Vec<F> {
    let rank = in_shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    // Stride of each output axis inside the input buffer.
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(values.len());
    let mut coords = vec![0usize; rank];
    let mut in_flat = 0usize;
    for _ in 0..values.len() {
        out.push(values[in_flat]);
        for d in (0..rank).rev() {
            coords[d] += 1;
            in_flat += strides[d];
            if coords[d] < out_shape[d] {
                break;
            }
            in_flat -= strides[d] * out_shape[d];
            coords[d] = 0;
        }
    }
    out
}
