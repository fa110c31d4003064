//! Prompt-free mask decoder: transformer refinement of the encoder tokens,
//! learned ×2 transposed-convolution upsampling stages (each halving the
//! channel count), a per-pixel MLP head, and a final bilinear interpolation
//! that closes any remaining gap to the input resolution. Every decoder
//! parameter is always trainable.

use rand::Rng;

use crate::encoder::{TokenGrid, TransformerBlock};
use crate::error::{Result, TensorError};
use crate::nn::{Conv2d, ConvTranspose2d, Linear, NamedParams};
use crate::scalar::Scalar;
use crate::tensor::TensorBase;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderConfig {
    /// Internal working width; encoder tokens are projected down to this.
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    /// Number of ×2 learned upsampling steps.
    pub upsample_stages: usize,
    /// Hidden width of the per-pixel head.
    pub head_hidden: usize,
}

impl DecoderConfig {
    pub fn toy() -> Self {
        DecoderConfig {
            embed_dim: 32,
            num_blocks: 2,
            num_heads: 4,
            upsample_stages: 2,
            head_hidden: 8,
        }
    }

    /// Sized so the trainable fraction of the full-shape model stays small.
    pub fn vitl_shape() -> Self {
        DecoderConfig {
            embed_dim: 128,
            num_blocks: 2,
            num_heads: 4,
            upsample_stages: 2,
            head_hidden: 32,
        }
    }

    /// Closed-form parameter count given the encoder channel width.
    pub fn param_count(&self, encoder_dim: usize) -> usize {
        let e = self.embed_dim;
        let neck = encoder_dim * e + e;
        let per_block = 12 * e * e + 13 * e; // mlp_ratio is fixed at 4
        let mut ups = 0;
        let mut ch = e;
        for _ in 0..self.upsample_stages {
            ups += ch * (ch / 2) * 4 + ch / 2;
            ch /= 2;
        }
        let head = ch * self.head_hidden + self.head_hidden + self.head_hidden + 1;
        neck + self.num_blocks * per_block + ups + head
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| TensorError::Config {
            op: "decoder_config",
            msg,
        };
        if self.upsample_stages == 0 {
            return Err(fail("at least one upsample stage is required".into()));
        }
        if !self.embed_dim.is_multiple_of(1 << self.upsample_stages) {
            return Err(fail(format!(
                "embed dim {} cannot halve across {} upsample stages",
                self.embed_dim, self.upsample_stages
            )));
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(fail(format!(
                "embed dim {} is not divisible by head count {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.num_blocks == 0 {
            return Err(fail("at least one decoder block is required".into()));
        }
        Ok(())
    }
}

/// Raw pre-sigmoid mask scores, `[B, 1, H, W]` at input resolution.
#[derive(Clone)]
pub struct LogitMap<F: Scalar = f64> {
    pub data: TensorBase<F>,
}

impl<F: Scalar> LogitMap<F> {
    pub fn batch(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }
}

pub struct Decoder<F: Scalar = f64> {
    pub config: DecoderConfig,
    neck: Linear<F>,
    blocks: Vec<TransformerBlock<F>>,
    ups: Vec<ConvTranspose2d<F>>,
    head_fc1: Conv2d<F>,
    head_fc2: Conv2d<F>,
    image_size: usize,
}

impl<F: Scalar> Decoder<F> {
    pub fn new<R: Rng>(
        encoder_dim: usize,
        image_size: usize,
        config: DecoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let e = config.embed_dim;
        let neck = Linear::new(encoder_dim, e, rng);
        let blocks = (0..config.num_blocks)
            .map(|_| TransformerBlock::new(e, config.num_heads, 4, rng))
            .collect();
        let mut ups = Vec::new();
        let mut ch = e;
        for _ in 0..config.upsample_stages {
            ups.push(ConvTranspose2d::new(ch, ch / 2, 2, 2, rng));
            ch /= 2;
        }
        // 1x1 convolutions act as a per-pixel MLP.
        let head_fc1 = Conv2d::new(ch, config.head_hidden, 1, 1, 0, rng);
        let head_fc2 = Conv2d::new(config.head_hidden, 1, 1, 1, 0, rng);
        Ok(Decoder {
            config,
            neck,
            blocks,
            ups,
            head_fc1,
            head_fc2,
            image_size,
        })
    }

    pub fn expected_channels(&self) -> usize {
        self.neck.in_dim()
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    /// Tokens to a full-resolution logit map.
    pub fn decode(&self, tokens: &TokenGrid<F>) -> Result<LogitMap<F>> {
        if tokens.channels() != self.neck.in_dim() {
            return Err(TensorError::ShapeMismatch {
                op: "decode",
                lhs: tokens.tensor().shape().to_vec(),
                rhs: vec![self.neck.in_dim()],
            });
        }
        let (h, w) = (tokens.grid_h(), tokens.grid_w());
        let mut seq = self.neck.forward(&tokens.seq())?;
        for block in &self.blocks {
            seq = block.forward_seq(&seq)?;
        }
        let mut spatial = TokenGrid::from_seq(seq, h, w)?
            .tensor()
            .permute(&[0, 3, 1, 2])?; // [B, E, h, w]
        for up in &self.ups {
            spatial = up.forward(&spatial)?.gelu();
        }
        let logits = self.head_fc2.forward(&self.head_fc1.forward(&spatial)?.gelu())?;
        let full = logits.upsample_bilinear(self.image_size, self.image_size)?;
        Ok(LogitMap { data: full })
    }

    pub fn collect_params(&self, prefix: &str, out: &mut NamedParams<F>) {
        self.neck.collect_params(&format!("{prefix}.neck"), out);
        for (i, block) in self.blocks.iter().enumerate() {
            block.collect_params(&format!("{prefix}.block.{i}"), out);
        }
        for (i, up) in self.ups.iter().enumerate() {
            up.collect_params(&format!("{prefix}.up.{i}"), out);
        }
        self.head_fc1.collect_params(&format!("{prefix}.head.fc1"), out);
        self.head_fc2.collect_params(&format!("{prefix}.head.fc2"), out);
    }

    pub fn named_params(&self) -> NamedParams<F> {
        let mut out = Vec::new();
        self.collect_params("decoder", &mut out);
        out
    }
}

/// Binarizes logits: pixel = 1 iff `sigmoid(logit) >= threshold`.
/// Returns a `[B, H, W]` tensor with values in {0, 1}.
pub fn predict_mask<F: Scalar>(logits: &LogitMap<F>, threshold: f64) -> Result<TensorBase<F>> {
    if threshold <= 0.0 || threshold >= 1.0 || threshold.is_nan() {
        return Err(TensorError::Config {
            op: "predict_mask",
            msg: format!("threshold {threshold} must lie in (0, 1)"),
        });
    }
    let (b, h, w) = (logits.batch(), logits.height(), logits.width());
    let t = F::lit(threshold);
    let mask: Vec<F> = logits
        .data
        .values()
        .iter()
        .map(|&v| {
            if crate::tensor::sigmoid_scalar(v) >= t {
                F::one()
            } else {
                F::zero()
            }
        })
        .collect();
    TensorBase::from_vec(mask, &[b, h, w])
}
