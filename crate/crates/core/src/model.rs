//! Full model: frozen-capable encoder, optional adapter stack, trainable
//! decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::adapter::{forward_inside, forward_outside, AtlConfig, AtlLayer, Placement};
use crate::decoder::{Decoder, DecoderConfig, LogitMap};
use crate::encoder::{Encoder, EncoderConfig, TokenGrid};
use crate::error::Result;
use crate::nn::NamedParams;
use crate::scalar::Scalar;
use crate::tensor::TensorBase;

/// Independent init streams so e.g. adapter presence never shifts decoder
/// initialization for the same seed.
fn init_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub struct ModelAssembly<F: Scalar = f64> {
    pub encoder: Encoder<F>,
    /// One adapter per encoder block; empty for a plain encoder-decoder model.
    pub adapters: Vec<AtlLayer<F>>,
    pub decoder: Decoder<F>,
    pub atl_config: Option<AtlConfig>,
}

impl<F: Scalar> ModelAssembly<F> {
    pub fn new(
        encoder_config: EncoderConfig,
        atl_config: Option<AtlConfig>,
        decoder_config: DecoderConfig,
        seed: u64,
    ) -> Result<Self> {
        let embed_dim = encoder_config.embed_dim;
        let image_size = encoder_config.image_size;
        let num_blocks = encoder_config.num_blocks;
        let encoder = Encoder::new(encoder_config, &mut init_rng(seed, 0))?;
        let adapters = match &atl_config {
            Some(cfg) => {
                let mut rng = init_rng(seed, 1);
                (0..num_blocks)
                    .map(|_| AtlLayer::new(cfg, embed_dim, &mut rng))
                    .collect::<Result<Vec<_>>>()?
            }
            None => Vec::new(),
        };
        let decoder = Decoder::new(embed_dim, image_size, decoder_config, &mut init_rng(seed, 2))?;
        Ok(ModelAssembly {
            encoder,
            adapters,
            decoder,
            atl_config,
        })
    }

    pub fn placement(&self) -> Option<Placement> {
        self.atl_config.as_ref().map(|c| c.placement)
    }

    /// Encoder features with the adapter stack applied per its placement.
    pub fn encode_features(&self, images: &TensorBase<F>) -> Result<TokenGrid<F>> {
        if self.adapters.is_empty() {
            return self.encoder.encode(images);
        }
        match self.placement().expect("adapters imply a config") {
            Placement::OutsideBlock => {
                let tokens = self.encoder.patch_embed.forward(images)?;
                forward_outside(&self.encoder.blocks, &self.adapters, tokens)
            }
            Placement::InsideBlock => {
                let mut tokens = self.encoder.patch_embed.forward(images)?;
                for (block, adapter) in self.encoder.blocks.iter().zip(&self.adapters) {
                    tokens = forward_inside(block, adapter, &tokens)?;
                }
                Ok(tokens)
            }
        }
    }

    pub fn forward(&self, images: &TensorBase<F>) -> Result<LogitMap<F>> {
        self.decoder.decode(&self.encode_features(images)?)
    }

    pub fn encoder_params(&self) -> NamedParams<F> {
        self.encoder.named_params()
    }

    pub fn adapter_params(&self) -> NamedParams<F> {
        let mut out = Vec::new();
        for (i, adapter) in self.adapters.iter().enumerate() {
            adapter.collect_params(&format!("adapter.{i}"), &mut out);
        }
        out
    }

    pub fn decoder_params(&self) -> NamedParams<F> {
        self.decoder.named_params()
    }

    /// All parameters in a stable order (encoder, adapters, decoder).
    pub fn named_params(&self) -> NamedParams<F> {
        let mut out = self.encoder_params();
        out.extend(self.adapter_params());
        out.extend(self.decoder_params());
        out
    }

    pub fn trainable_params(&self) -> NamedParams<F> {
        self.named_params()
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .collect()
    }
}
