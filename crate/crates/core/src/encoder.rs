//! ViT-style image encoder: a strided patch-embedding convolution plus a
//! stack of pre-norm transformer blocks. Every parameter can be frozen.

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::nn::{Conv2d, LayerNorm, Mlp, MultiHeadAttention, NamedParams};
use crate::scalar::Scalar;
use crate::tensor::TensorBase;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Square input side in pixels.
    pub image_size: usize,
    pub patch_size: usize,
    /// Token channel count M.
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    /// MLP hidden width as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
}

impl EncoderConfig {
    /// Small enough to train on a CPU in minutes.
    pub fn toy() -> Self {
        EncoderConfig {
            image_size: 64,
            patch_size: 8,
            embed_dim: 64,
            num_blocks: 4,
            num_heads: 4,
            mlp_ratio: 4,
        }
    }

    /// ViT-L geometry at full resolution; used for parameter accounting only.
    pub fn vitl_shape() -> Self {
        EncoderConfig {
            image_size: 1024,
            patch_size: 16,
            embed_dim: 1024,
            num_blocks: 24,
            num_heads: 16,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| TensorError::Config {
            op: "encoder_config",
            msg,
        };
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(fail(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(fail(format!(
                "embed dim {} is not divisible by head count {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.num_blocks == 0 {
            return Err(fail("at least one transformer block is required".into()));
        }
        if self.mlp_ratio == 0 {
            return Err(fail("mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn tokens_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }
}

/// Token activations laid out as `[batch, h_tokens, w_tokens, channels]`.
#[derive(Clone)]
pub struct TokenGrid<F: Scalar = f64> {
    data: TensorBase<F>,
}

impl<F: Scalar> TokenGrid<F> {
    pub fn new(data: TensorBase<F>) -> Result<Self> {
        if data.ndim() != 4 {
            return Err(TensorError::Config {
                op: "token_grid",
                msg: format!("expected [B,h,w,M], got {:?}", data.shape()),
            });
        }
        Ok(TokenGrid { data })
    }

    pub fn tensor(&self) -> &TensorBase<F> {
        &self.data
    }

    pub fn batch(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn grid_h(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn grid_w(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[3]
    }

    /// Flattens the spatial grid into a token sequence `[B, h·w, M]`.
    pub fn seq(&self) -> TensorBase<F> {
        self.data
            .reshape(&[self.batch(), self.grid_h() * self.grid_w(), self.channels()])
            .expect("flatten is always valid")
    }

    /// Restores grid layout from a `[B, h·w, M]` sequence.
    pub fn from_seq(seq: TensorBase<F>, h: usize, w: usize) -> Result<Self> {
        let (b, n, m) = (seq.shape()[0], seq.shape()[1], seq.shape()[2]);
        if n != h * w {
            return Err(TensorError::Config {
                op: "token_grid",
                msg: format!("{n} tokens cannot form a {h}x{w} grid"),
            });
        }
        Ok(TokenGrid {
            data: seq.reshape(&[b, h, w, m])?,
        })
    }
}

/// Patch embedding: a convolution with kernel = stride = patch size that
/// projects RGB to M channels, plus a learned absolute positional grid.
pub struct PatchEmbed<F: Scalar = f64> {
    pub proj: Conv2d<F>,
    /// `[h_tokens, w_tokens, M]`, added to every sample in the batch.
    pub pos: TensorBase<F>,
    image_size: usize,
}

impl<F: Scalar> PatchEmbed<F> {
    pub fn new<R: Rng>(config: &EncoderConfig, rng: &mut R) -> Self {
        let side = config.tokens_per_side();
        let pos = TensorBase::randn(&[side, side, config.embed_dim], F::lit(0.02), rng);
        pos.set_requires_grad(true);
        PatchEmbed {
            proj: Conv2d::new(3, config.embed_dim, config.patch_size, config.patch_size, 0, rng),
            pos,
            image_size: config.image_size,
        }
    }

    pub fn forward(&self, image: &TensorBase<F>) -> Result<TokenGrid<F>> {
        let shape = image.shape();
        let expected = vec![
            if shape.is_empty() { 0 } else { shape[0] },
            3,
            self.image_size,
            self.image_size,
        ];
        if shape.len() != 4 || shape[1..] != expected[1..] {
            return Err(TensorError::ShapeMismatch {
                op: "patch_embed",
                lhs: shape.to_vec(),
                rhs: expected,
            });
        }
        let tokens = self
            .proj
            .forward(image)? // [B, M, h, w]
            .permute(&[0, 2, 3, 1])? // [B, h, w, M]
            .add_broadcast(&self.pos)?;
        TokenGrid::new(tokens)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut NamedParams<F>) {
        self.proj.collect_params(&format!("{prefix}.proj"), out);
        out.push((format!("{prefix}.pos"), self.pos.clone()));
    }
}

/// Pre-norm transformer block: `x_T = MSA(LN1(x)) + x`, then
/// `out = MLP(LN2(x_T)) + x_T`.
pub struct TransformerBlock<F: Scalar = f64> {
    pub norm1: LayerNorm<F>,
    pub attn: MultiHeadAttention<F>,
    pub norm2: LayerNorm<F>,
    pub mlp: Mlp<F>,
}

impl<F: Scalar> TransformerBlock<F> {
    pub fn new<R: Rng>(dim: usize, num_heads: usize, mlp_ratio: usize, rng: &mut R) -> Self {
        TransformerBlock {
            norm1: LayerNorm::new(dim),
            attn: MultiHeadAttention::new(dim, num_heads, rng),
            norm2: LayerNorm::new(dim),
            mlp: Mlp::new(dim, dim * mlp_ratio, rng),
        }
    }

    /// The MSA branch `x_A = MSA(LN1(x))` on a `[B,N,M]` sequence.
    pub fn attention_branch(&self, x: &TensorBase<F>) -> Result<TensorBase<F>> {
        self.attn.forward(&self.norm1.forward(x)?)
    }

    /// The tail `out = MLP(LN2(x_T)) + x_T`.
    pub fn feed_forward(&self, x_t: &TensorBase<F>) -> Result<TensorBase<F>> {
        self.mlp.forward(&self.norm2.forward(x_t)?)?.add(x_t)
    }

    pub fn forward_seq(&self, x: &TensorBase<F>) -> Result<TensorBase<F>> {
        let x_t = self.attention_branch(x)?.add(x)?;
        self.feed_forward(&x_t)
    }

    pub fn forward(&self, x: &TokenGrid<F>) -> Result<TokenGrid<F>> {
        let out = self.forward_seq(&x.seq())?;
        TokenGrid::from_seq(out, x.grid_h(), x.grid_w())
    }

    pub fn collect_params(&self, prefix: &str, out: &mut NamedParams<F>) {
        self.norm1.collect_params(&format!("{prefix}.norm1"), out);
        self.attn.collect_params(&format!("{prefix}.attn"), out);
        self.norm2.collect_params(&format!("{prefix}.norm2"), out);
        self.mlp.collect_params(&format!("{prefix}.mlp"), out);
    }
}

pub struct Encoder<F: Scalar = f64> {
    pub config: EncoderConfig,
    pub patch_embed: PatchEmbed<F>,
    pub blocks: Vec<TransformerBlock<F>>,
}

impl<F: Scalar> Encoder<F> {
    pub fn new<R: Rng>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let patch_embed = PatchEmbed::new(&config, rng);
        let blocks = (0..config.num_blocks)
            .map(|_| TransformerBlock::new(config.embed_dim, config.num_heads, config.mlp_ratio, rng))
            .collect();
        Ok(Encoder {
            config,
            patch_embed,
            blocks,
        })
    }

    /// Full forward pass: patch embedding then all blocks in order.
    pub fn encode(&self, image: &TensorBase<F>) -> Result<TokenGrid<F>> {
        let mut tokens = self.patch_embed.forward(image)?;
        for block in &self.blocks {
            tokens = block.forward(&tokens)?;
        }
        Ok(tokens)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut NamedParams<F>) {
        self.patch_embed.collect_params(&format!("{prefix}.patch_embed"), out);
        for (i, block) in self.blocks.iter().enumerate() {
            block.collect_params(&format!("{prefix}.block.{i}"), out);
        }
    }

    pub fn named_params(&self) -> NamedParams<F> {
        let mut out = Vec::new();
        self.collect_params("encoder", &mut out);
        out
    }
}

impl EncoderConfig {
    /// Closed-form parameter count: patch conv `3·P²·M + M`, positional grid
    /// `(S/P)²·M`, and `(4+2r)·M² + (9+r)·M` per block.
    pub fn param_count(&self) -> usize {
        let m = self.embed_dim;
        let p = self.patch_size;
        let side = self.tokens_per_side();
        let r = self.mlp_ratio;
        let patch = 3 * p * p * m + m;
        let pos = side * side * m;
        let per_block = (4 + 2 * r) * m * m + (9 + r) * m;
        patch + pos + self.num_blocks * per_block
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn zero_all(params: &NamedParams<f64>) {
        for (_, p) in params {
            p.set_values(&vec![0.0; p.numel()]);
        }
    }

    #[test]
    fn patch_embed_shapes() {
        let config = EncoderConfig::toy();
        assert_eq!(config.tokens_per_side(), 8);
        let embed = PatchEmbed::<f64>::new(&config, &mut rng(1));
        let image = Tensor::zeros(&[2, 3, 64, 64]);
        let tokens = embed.forward(&image).unwrap();
        assert_eq!(tokens.tensor().shape(), &[2, 8, 8, 64]);
        // Full-resolution ViT-L/16 geometry: 1024/16 = 64 tokens per side.
        assert_eq!(EncoderConfig::vitl_shape().tokens_per_side(), 64);
    }

    #[test]
    fn patch_embed_zero_image_zero_pos_gives_zero_tokens() {
        let config = EncoderConfig::toy();
        let embed = PatchEmbed::<f64>::new(&config, &mut rng(2));
        embed.pos.set_values(&vec![0.0; embed.pos.numel()]);
        embed.proj.bias.set_values(&vec![0.0; 64]);
        let tokens = embed.forward(&Tensor::zeros(&[1, 3, 64, 64])).unwrap();
        assert!(tokens.tensor().to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patch_embed_rejects_bad_inputs() {
        let config = EncoderConfig::toy();
        let embed = PatchEmbed::<f64>::new(&config, &mut rng(3));
        assert!(embed.forward(&Tensor::zeros(&[1, 1, 64, 64])).is_err());
        assert!(embed.forward(&Tensor::zeros(&[1, 3, 32, 64])).is_err());
        assert!(embed.forward(&Tensor::zeros(&[3, 64, 64])).is_err());
    }

    #[test]
    fn config_validation() {
        let mut config = EncoderConfig::toy();
        config.patch_size = 7;
        assert!(config.validate().is_err());
        let mut config = EncoderConfig::toy();
        config.num_heads = 5;
        assert!(config.validate().is_err());
        let mut config = EncoderConfig::toy();
        config.num_blocks = 0;
        assert!(config.validate().is_err());
    }

    #[test]
    fn zeroed_block_is_pure_residual_path() {
        let block = TransformerBlock::<f64>::new(8, 2, 4, &mut rng(4));
        let mut params = Vec::new();
        block.collect_params("block", &mut params);
        zero_all(&params); // includes both layer-norm gammas
        let x = Tensor::randn(&[2, 5, 8], 1.0, &mut rng(5));
        let out = block.forward_seq(&x).unwrap();
        assert_eq!(out.to_vec(), x.to_vec());
        // Restoring the gammas but keeping zero weights is still the identity:
        // both branches emit only their zero biases.
        block.norm1.gamma.set_values(&[1.0; 8]);
        block.norm2.gamma.set_values(&[1.0; 8]);
        let out = block.forward_seq(&x).unwrap();
        assert_eq!(out.to_vec(), x.to_vec());
    }

    #[test]
    fn block_preserves_shape() {
        let block = TransformerBlock::<f64>::new(16, 4, 4, &mut rng(6));
        let x = Tensor::randn(&[3, 2, 4, 16], 1.0, &mut rng(7));
        let grid = TokenGrid::new(x).unwrap();
        let out = block.forward(&grid).unwrap();
        assert_eq!(out.tensor().shape(), &[3, 2, 4, 16]);
    }

    // Straight-line scalar recomputation of one block on a single token with
    // hand-set 2-dim weights. Attention over one token reduces to the value
    // path because softmax of a single score is 1.
    #[test]
    fn single_token_block_matches_scalar_trace() {
        let block = TransformerBlock::<f64>::new(2, 1, 2, &mut rng(8));
        let set = |t: &Tensor, v: &[f64]| t.set_values(v);
        set(&block.norm1.gamma, &[1.5, 0.5]);
        set(&block.norm1.beta, &[0.1, -0.2]);
        set(&block.attn.query.weight, &[0.3, -0.2, 0.1, 0.4]);
        set(&block.attn.query.bias, &[0.05, -0.05]);
        set(&block.attn.key.weight, &[-0.1, 0.2, 0.3, -0.4]);
        set(&block.attn.key.bias, &[0.0, 0.1]);
        set(&block.attn.value.weight, &[0.7, -0.6, 0.5, 0.4]);
        set(&block.attn.value.bias, &[0.02, 0.03]);
        set(&block.attn.output.weight, &[0.9, 0.1, -0.3, 0.8]);
        set(&block.attn.output.bias, &[-0.01, 0.04]);
        set(&block.norm2.gamma, &[0.8, 1.2]);
        set(&block.norm2.beta, &[0.0, 0.1]);
        set(&block.mlp.fc1.weight, &[0.5, -0.4, 0.3, 0.2, -0.1, 0.6, 0.25, -0.35]);
        set(&block.mlp.fc1.bias, &[0.01, 0.02, 0.03, 0.04]);
        set(
            &block.mlp.fc2.weight,
            &[0.45, -0.15, 0.05, 0.35, -0.25, 0.15, 0.55, -0.05],
        );
        set(&block.mlp.fc2.bias, &[0.06, -0.07]);

        let x = [0.7, -0.3];
        let eps = crate::nn::LAYER_NORM_EPS;

        // Independent trace in plain f64 arithmetic.
        let ln = |v: [f64; 2], g: [f64; 2], b: [f64; 2]| -> [f64; 2] {
            let mean = (v[0] + v[1]) / 2.0;
            let var = ((v[0] - mean).powi(2) + (v[1] - mean).powi(2)) / 2.0;
            let inv = 1.0 / (var + eps).sqrt();
            [
                (v[0] - mean) * inv * g[0] + b[0],
                (v[1] - mean) * inv * g[1] + b[1],
            ]
        };
        let mat2 = |v: [f64; 2], w: [f64; 4], b: [f64; 2]| -> [f64; 2] {
            [
                v[0] * w[0] + v[1] * w[2] + b[0],
                v[0] * w[1] + v[1] * w[3] + b[1],
            ]
        };
        let gelu = |x: f64| x * 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));

        let h = ln(x, [1.5, 0.5], [0.1, -0.2]);
        // Single token: attention output is the projected value vector.
        let v = mat2(h, [0.7, -0.6, 0.5, 0.4], [0.02, 0.03]);
        let x_a = mat2(v, [0.9, 0.1, -0.3, 0.8], [-0.01, 0.04]);
        let x_t = [x_a[0] + x[0], x_a[1] + x[1]];
        let h2 = ln(x_t, [0.8, 1.2], [0.0, 0.1]);
        let fc1_w = [0.5, -0.4, 0.3, 0.2, -0.1, 0.6, 0.25, -0.35];
        let fc1_b = [0.01, 0.02, 0.03, 0.04];
        let mut hidden = [0.0; 4];
        for j in 0..4 {
            hidden[j] = gelu(h2[0] * fc1_w[j] + h2[1] * fc1_w[4 + j] + fc1_b[j]);
        }
        let fc2_w = [0.45, -0.15, 0.05, 0.35, -0.25, 0.15, 0.55, -0.05];
        let mut mlp_out = [0.06, -0.07];
        for j in 0..2 {
            for (i, h) in hidden.iter().enumerate() {
                mlp_out[j] += h * fc2_w[i * 2 + j];
            }
        }
        let expected = [mlp_out[0] + x_t[0], mlp_out[1] + x_t[1]];

        let input = Tensor::from_vec(x.to_vec(), &[1, 1, 2]).unwrap();
        let out = block.forward_seq(&input).unwrap().to_vec();
        assert!((out[0] - expected[0]).abs() < 1e-12, "{out:?} vs {expected:?}");
        assert!((out[1] - expected[1]).abs() < 1e-12, "{out:?} vs {expected:?}");
    }

    #[test]
    fn encode_is_block_compose_patch_for_one_block() {
        let config = EncoderConfig {
            image_size: 16,
            patch_size: 8,
            embed_dim: 8,
            num_blocks: 1,
            num_heads: 2,
            mlp_ratio: 2,
        };
        let encoder = Encoder::<f64>::new(config, &mut rng(9)).unwrap();
        let image = Tensor::randn(&[1, 3, 16, 16], 0.5, &mut rng(10));
        let direct = encoder.encode(&image).unwrap();
        let manual = encoder.blocks[0]
            .forward(&encoder.patch_embed.forward(&image).unwrap())
            .unwrap();
        assert_eq!(direct.tensor().to_vec(), manual.tensor().to_vec());
    }

    // The model stack is scalar-generic; a block must run in f32 too.
    #[test]
    fn block_forward_is_generic_over_f32() {
        let block = TransformerBlock::<f32>::new(8, 2, 2, &mut rng(40));
        let x = crate::tensor::TensorBase::<f32>::randn(&[1, 4, 8], 1.0, &mut rng(41));
        let out = block.forward_seq(&x).unwrap();
        assert_eq!(out.shape(), &[1, 4, 8]);
        assert!(out.to_vec().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encode_is_deterministic() {
        let encoder = Encoder::<f64>::new(EncoderConfig::toy(), &mut rng(11)).unwrap();
        let image = Tensor::randn(&[1, 3, 64, 64], 0.5, &mut rng(12));
        let a = encoder.encode(&image).unwrap().tensor().to_vec();
        let b = encoder.encode(&image).unwrap().tensor().to_vec();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn vitl_shape_parameter_count_matches_closed_form_band() {
        // 12·L·M² dominates; the full count sits just above 3.0e8.
        let count = EncoderConfig::vitl_shape().param_count();
        assert!((300_000_000..=310_000_000).contains(&count), "{count}");
        assert_eq!(count, 307_291_136);
    }

    #[test]
    fn closed_form_count_matches_assembled_encoder() {
        let config = EncoderConfig::toy();
        let encoder = Encoder::<f64>::new(config.clone(), &mut rng(13)).unwrap();
        let actual: usize = encoder.named_params().iter().map(|(_, p)| p.numel()).sum();
        assert_eq!(actual, config.param_count());
        assert_eq!(actual, 216_384);
    }

    #[test]
    fn gradient_flows_through_every_block() {
        let config = EncoderConfig {
            image_size: 16,
            patch_size: 8,
            embed_dim: 8,
            num_blocks: 3,
            num_heads: 2,
            mlp_ratio: 2,
        };
        let encoder = Encoder::<f64>::new(config, &mut rng(14)).unwrap();
        let image = Tensor::randn(&[1, 3, 16, 16], 0.5, &mut rng(15));
        let weights = Tensor::randn(&[1, 2, 2, 8], 1.0, &mut rng(16));
        let loss = encoder
            .encode(&image)
            .unwrap()
            .tensor()
            .mul(&weights)
            .unwrap()
            .sum();
        loss.backward().unwrap();
        for (name, p) in encoder.named_params() {
            let grad = p.grad().unwrap_or_else(|| panic!("{name} has no grad"));
            let max = grad.iter().fold(0.0f64, |a, &g| a.max(g.abs()));
            assert!(max > 0.0, "{name} received a zero gradient");
        }
    }

    #[test]
    fn frozen_encoder_gets_no_grads() {
        let encoder = Encoder::<f64>::new(
            EncoderConfig {
                image_size: 16,
                patch_size: 8,
                embed_dim: 8,
                num_blocks: 1,
                num_heads: 2,
                mlp_ratio: 2,
            },
            &mut rng(17),
        )
        .unwrap();
        for (_, p) in encoder.named_params() {
            p.set_requires_grad(false);
        }
        let image = Tensor::randn(&[1, 3, 16, 16], 0.5, &mut rng(18));
        encoder.encode(&image).unwrap().tensor().sum().backward().unwrap();
        for (name, p) in encoder.named_params() {
            assert!(!p.has_grad(), "{name} should stay grad-free when frozen");
        }
    }
}
