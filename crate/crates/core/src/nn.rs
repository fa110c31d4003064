//! Parameter-bearing layers shared by the encoder, adapters and decoder.

use rand::Rng;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::TensorBase;

/// Parameters labelled with dotted paths, e.g. `encoder.block.0.attn.query.weight`.
pub type NamedParams<F> = Vec<(String, TensorBase<F>)>;

pub fn push_param<F: Scalar>(
    out: &mut NamedParams<F>,
    prefix: &str,
    name: &str,
    tensor: &TensorBase<F>,
) {
    out.push((format!("{prefix}.{name}"), tensor.clone()));
}

/// Default epsilon for every layer norm in the model stack.
pub const LAYER_NORM_EPS: f64 = 1e-6;

fn fan_in_std<F: Scalar>(fan_in: usize) -> F {
    F::lit((1.0 / fan_in as f64).sqrt())
}

/// Fully connected layer `x @ W + b` with `W: [in, out]`.
pub struct Linear<F: Scalar = f64> {
    pub weight: TensorBase<F>,
    pub bias: TensorBase<F>,
}

impl<F: Scalar> Linear<F> {
    /// Weights `~ N(0, 1/in_dim)`, bias zero.
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let layer = Linear {
            weight: TensorBase::randn(&[in_dim, out_dim], fan_in_std(in_dim), rng),
            bias: TensorBase::zeros(&[out_dim]),
        };
        layer.weight.set_requires_grad(true);
        layer.bias.set_requires_grad(true);
        layer
    }

    /// All-zero weights and bias (identity-at-init up-projections).
    pub fn zeroed(in_dim: usize, out_dim: usize) -> Self {
        let layer = Linear {
            weight: TensorBase::zeros(&[in_dim, out_dim]),
            bias: TensorBase::zeros(&[out_dim]),
        };
        layer.weight.set_requires_grad(true);
        layer.bias.set_requires_grad(true);
        layer
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Applies to the last dimension of `x`.
    pub fn forward(&self, x: &TensorBase<F>) -> Result<TensorBase<F>> {
        x.matmul(&self.weight)?.add_broadcast(&self.bias)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut NamedParams<F>) {
        push_param(out, prefix, "weight", &self.weight);
        push_param(out, prefix, "bias", &self.bias);
    }
}

/// Learnable affine layer norm over the last dimension.
pub struct LayerNorm<F: Scalar = f64> {
    pub gamma: TensorBase<F>,
    pub beta: TensorBase<F>,
    pub eps: F,
}

impl<F: Scalar> LayerNorm<F> {
    pub fn new(dim: usize) -> Self {
        let norm = LayerNorm {
            gamma: TensorBase::ones(&[dim]),
            beta: TensorBase::zeros(&[dim]),
            eps: F::lit(LAYER_NORM_EPS),
        };
        norm.gamma.set_requires_grad(true);
        norm.beta.set_requires_grad(true);
        norm
    }

    pub fn forward(&self, x: &TensorBase<F>) -> Result<TensorBase<F>> {
        x.layer_norm(&self.gamma, &self.beta, self.eps)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut NamedParams<F>) {
        push_param(out, prefix, "gamma", &self.gamma);
        push_param(out, prefix, "beta", &self.beta);
    }
}

/// Strided 2-d convolution with kernels `[out, in, k, k]`.
pub struct Conv2d<F: Scalar = f64> {
    pub weight: TensorBase<F>,
    pub bias: TensorBase<F>,
    pub stride: usize,
    pub padding: usize,
}

impl<F: Scalar> Conv2d<F> {
    pub fn new<R: Rng>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let std = fan_in_std(in_ch * kernel * kernel);
        Self::with_std(in_ch, out_ch, kernel, stride, padding, std, rng)
    }

    pub fn with_std<R: Rng>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        std: F,
        rng: &mut R,
    ) -> Self {
        let layer = Conv2d {
            weight: TensorBase::randn(&[out_ch, in_ch, kernel, kernel], std, rng),
            bias: TensorBase::zeros(&[out_ch]),
            stride,
            padding,
        };
        layer.weight.set_requires_grad(true);
        layer.bias.set_requires_grad(true);
        layer
    }

    pub fn forward(&self, x: &TensorBase<F>) -> Result<TensorBase<F>> {
        x.conv2d(&self.weight, Some(&self.bias), self.stride, self.padding)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut NamedParams<F>) {
        push_param(out, prefix, "weight", &self.weight);
        push_param(out, prefix, "bias", &self.bias);
    }
}

/// Transposed 2-d convolution with kernels `[in, out, k, k]`.
pub struct ConvTranspose2d<F: Scalar = f64> {
    pub weight: TensorBase<F>,
    pub bias: TensorBase<F>,
    pub stride: usize,
}

impl<F: Scalar> ConvTranspose2d<F> {
    pub fn new<R: Rng>(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        let layer = ConvTranspose2d {
            weight: TensorBase::randn(
                &[in_ch, out_ch, kernel, kernel],
                fan_in_std(in_ch * kernel * kernel),
                rng,
            ),
            bias: TensorBase::zeros(&[out_ch]),
            stride,
        };
        layer.weight.set_requires_grad(true);
        layer.bias.set_requires_grad(true);
        layer
    }

    pub fn forward(&self, x: &TensorBase<F>) -> Result<TensorBase<F>> {
        x.conv_transpose2d(&self.weight, Some(&self.bias), self.stride)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut NamedParams<F>) {
        push_param(out, prefix, "weight", &self.weight);
        push_param(out, prefix, "bias", &self.bias);
    }
}

/// Two fully connected layers with a GELU between them.
pub struct Mlp<F: Scalar = f64> {
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

impl<F: Scalar> Mlp<F> {
    pub fn new<R: Rng>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        Mlp {
            fc1: Linear::new(dim, hidden, rng),
            fc2: Linear::new(hidden, dim, rng),
        }
    }

    pub fn forward(&self, x: &TensorBase<F>) -> Result<TensorBase<F>> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu())
    }

    pub fn collect_params(&self, prefix: &str, out: &mut NamedParams<F>) {
        self.fc1.collect_params(&format!("{prefix}.fc1"), out);
        self.fc2.collect_params(&format!("{prefix}.fc2"), out);
    }
}

/// Multi-head self-attention over `[batch, tokens, channels]`.
pub struct MultiHeadAttention<F: Scalar = f64> {
    pub query: Linear<F>,
    pub key: Linear<F>,
    pub value: Linear<F>,
    pub output: Linear<F>,
    pub num_heads: usize,
}

impl<F: Scalar> MultiHeadAttention<F> {
    pub fn new<R: Rng>(dim: usize, num_heads: usize, rng: &mut R) -> Self {
        debug_assert_eq!(dim % num_heads, 0);
        MultiHeadAttention {
            query: Linear::new(dim, dim, rng),
            key: Linear::new(dim, dim, rng),
            value: Linear::new(dim, dim, rng),
            output: Linear::new(dim, dim, rng),
            num_heads,
        }
    }

    pub fn forward(&self, x: &TensorBase<F>) -> Result<TensorBase<F>> {
        let (b, n, m) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let heads = self.num_heads;
        let dh = m / heads;
        let split = |t: TensorBase<F>| -> Result<TensorBase<F>> {
            t.reshape(&[b, n, heads, dh])?.permute(&[0, 2, 1, 3])
        };
        let q = split(self.query.forward(x)?)?;
        let k = split(self.key.forward(x)?)?;
        let v = split(self.value.forward(x)?)?;
        let scores = q
            .matmul(&k.permute(&[0, 1, 3, 2])?)?
            .mul_scalar(F::lit(1.0 / (dh as f64).sqrt()));
        let attn = scores.softmax(3)?;
        let ctx = attn
            .matmul(&v)?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, n, m])?;
        self.output.forward(&ctx)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut NamedParams<F>) {
        self.query.collect_params(&format!("{prefix}.query"), out);
        self.key.collect_params(&format!("{prefix}.key"), out);
        self.value.collect_params(&format!("{prefix}.value"), out);
        self.output.collect_params(&format!("{prefix}.output"), out);
    }
}

/// Element count over a named parameter list.
pub fn param_count<F: Scalar>(params: &NamedParams<F>) -> usize {
    params.iter().map(|(_, t)| t.numel()).sum()
}
