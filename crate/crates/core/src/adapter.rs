//! Bottleneck adapter layers and their deployment around or inside frozen
//! transformer blocks.
//!
//! An adapter projects M-channel tokens down to a small width `d`, runs an
//! ordered stack of MidLay units, projects back up to M, and optionally
//! fuses the result with its input through a residual connection. Two
//! MidLay kinds exist: `M` is a fully connected layer followed by GELU;
//! `C` reshapes tokens to their spatial grid, applies a 3×3 convolution,
//! a channel layer norm and GELU. The up-projection starts at zero so a
//! residual adapter is the identity map at initialization.

use std::fmt;

use rand::Rng;

use crate::encoder::{TokenGrid, TransformerBlock};
use crate::error::{Result, TensorError};
use crate::nn::{Conv2d, LayerNorm, Linear, NamedParams};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MidLayKind {
    /// Fully connected + GELU.
    M,
    /// 3×3 convolution + LayerNorm + GELU over the token grid.
    C,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    /// Between consecutive transformer blocks.
    OutsideBlock,
    /// Between the MSA and MLP stages of each block.
    InsideBlock,
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Placement::OutsideBlock => write!(f, "outside"),
            Placement::InsideBlock => write!(f, "inside"),
        }
    }
}

/// One row of the ablation grid: MidLay composition, residual flag and
/// placement flag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VariantSpec {
    pub name: &'static str,
    pub midlays: Vec<MidLayKind>,
    pub residual: bool,
    pub placement: Placement,
}

impl VariantSpec {
    /// Render the composition as e.g. `[M]x1` or `[M]x2+[C]x3`.
    pub fn midlay_label(&self) -> String {
        midlay_label(&self.midlays)
    }

    pub fn atl_config(&self, bottleneck_dim: usize) -> AtlConfig {
        AtlConfig {
            bottleneck_dim,
            midlays: self.midlays.clone(),
            residual: self.residual,
            placement: self.placement,
        }
    }
}

pub fn midlay_label(midlays: &[MidLayKind]) -> String {
    let mut parts: Vec<(MidLayKind, usize)> = Vec::new();
    for &kind in midlays {
        match parts.last_mut() {
            Some((k, count)) if *k == kind => *count += 1,
            _ => parts.push((kind, 1)),
        }
    }
    parts
        .iter()
        .map(|(k, count)| {
            let tag = match k {
                MidLayKind::M => "M",
                MidLayKind::C => "C",
            };
            format!("[{tag}]x{count}")
        })
        .collect::<Vec<_>>()
        .join("+")
}

/// Report order of the ablation grid (baseline variant last).
pub const VARIANT_NAMES: [&str; 9] = [
    "TransLandSeg-1",
    "TransLandSeg-2",
    "TransLandSeg-3",
    "TransLandSeg-4",
    "TransLandSeg-5",
    "TransLandSeg-6",
    "TransLandSeg-7",
    "TransLandSeg-8",
    "TransLandSeg",
];

/// Looks up one named row of the ablation grid.
pub fn make_variant(name: &str) -> Result<VariantSpec> {
    use MidLayKind::{C, M};
    use Placement::{InsideBlock, OutsideBlock};
    let (midlays, residual, placement): (Vec<MidLayKind>, bool, Placement) = match name {
        "TransLandSeg" => (vec![M], true, OutsideBlock),
        "TransLandSeg-1" => (vec![C, C, C], true, OutsideBlock),
        "TransLandSeg-2" => (vec![C, C], true, OutsideBlock),
        "TransLandSeg-3" => (vec![C, C], false, OutsideBlock),
        "TransLandSeg-4" => (vec![M, M], true, OutsideBlock),
        "TransLandSeg-5" => (vec![M, M, C, C, C], true, OutsideBlock),
        "TransLandSeg-6" => (vec![M, M, C, C, C], true, InsideBlock),
        "TransLandSeg-7" => (vec![M], false, OutsideBlock),
        "TransLandSeg-8" => (vec![M], true, InsideBlock),
        other => {
            return Err(TensorError::Config {
                op: "make_variant",
                msg: format!("unknown variant {other:?}; valid names: {}", VARIANT_NAMES.join(", ")),
            })
        }
    };
    let name = VARIANT_NAMES
        .iter()
        .find(|&&n| n == name)
        .expect("matched above");
    Ok(VariantSpec {
        name,
        midlays,
        residual,
        placement,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AtlConfig {
    /// Bottleneck width d, strictly smaller than the token channel count.
    pub bottleneck_dim: usize,
    pub midlays: Vec<MidLayKind>,
    pub residual: bool,
    pub placement: Placement,
}

impl AtlConfig {
    pub fn validate(&self, embed_dim: usize) -> Result<()> {
        let fail = |msg: String| TensorError::Config {
            op: "atl_config",
            msg,
        };
        if self.bottleneck_dim == 0 || self.bottleneck_dim >= embed_dim {
            return Err(fail(format!(
                "bottleneck dim {} must be in 1..{embed_dim}",
                self.bottleneck_dim
            )));
        }
        if self.midlays.is_empty() || self.midlays.len() > 5 {
            return Err(fail(format!(
                "midlay stack length {} must be in 1..=5",
                self.midlays.len()
            )));
        }
        Ok(())
    }
}

/// Default bottleneck width for a given token channel count.
pub fn default_bottleneck_dim(embed_dim: usize) -> usize {
    (embed_dim / 16).max(1)
}

pub enum MidLayer<F: Scalar = f64> {
    Fc {
        fc: Linear<F>,
    },
    Conv {
        conv: Conv2d<F>,
        norm: LayerNorm<F>,
    },
}

impl<F: Scalar> MidLayer<F> {
    fn new<R: Rng>(kind: MidLayKind, dim: usize, rng: &mut R) -> Self {
        match kind {
            MidLayKind::M => MidLayer::Fc {
                fc: Linear::new(dim, dim, rng),
            },
            // MidLay weights are N(0, 1/d) regardless of the 3x3 taps.
            MidLayKind::C => MidLayer::Conv {
                conv: Conv2d::with_std(dim, dim, 3, 1, 1, F::lit((1.0 / dim as f64).sqrt()), rng),
                norm: LayerNorm::new(dim),
            },
        }
    }

    fn forward(&self, grid: &TokenGrid<F>) -> Result<TokenGrid<F>> {
        match self {
            MidLayer::Fc { fc } => {
                TokenGrid::new(fc.forward(grid.tensor())?.gelu())
            }
            MidLayer::Conv { conv, norm } => {
                let spatial = grid.tensor().permute(&[0, 3, 1, 2])?; // [B,d,h,w]
                let convolved = conv.forward(&spatial)?.permute(&[0, 2, 3, 1])?;
                TokenGrid::new(norm.forward(&convolved)?.gelu())
            }
        }
    }

    fn collect_params(&self, prefix: &str, out: &mut NamedParams<F>) {
        match self {
            MidLayer::Fc { fc } => fc.collect_params(&format!("{prefix}.fc"), out),
            MidLayer::Conv { conv, norm } => {
                conv.collect_params(&format!("{prefix}.conv"), out);
                norm.collect_params(&format!("{prefix}.norm"), out);
            }
        }
    }
}

/// One adapter: down-projection, MidLay stack, up-projection, with the
/// residual and placement flags of its configuration.
pub struct AtlLayer<F: Scalar = f64> {
    pub down: Linear<F>,
    pub mids: Vec<MidLayer<F>>,
    pub up: Linear<F>,
    pub residual: bool,
    pub placement: Placement,
}

impl<F: Scalar> AtlLayer<F> {
    pub fn new<R: Rng>(config: &AtlConfig, embed_dim: usize, rng: &mut R) -> Result<Self> {
        config.validate(embed_dim)?;
        let d = config.bottleneck_dim;
        Ok(AtlLayer {
            down: Linear::new(embed_dim, d, rng),
            mids: config
                .midlays
                .iter()
                .map(|&kind| MidLayer::new(kind, d, rng))
                .collect(),
            up: Linear::zeroed(d, embed_dim),
            residual: config.residual,
            placement: config.placement,
        })
    }

    /// The adapter map Θ: down-project, MidLays in order, up-project.
    pub fn transform(&self, tokens: &TokenGrid<F>) -> Result<TokenGrid<F>> {
        if tokens.channels() != self.down.in_dim() {
            return Err(TensorError::ShapeMismatch {
                op: "atl_forward",
                lhs: tokens.tensor().shape().to_vec(),
                rhs: vec![self.down.in_dim()],
            });
        }
        let mut grid = TokenGrid::new(self.down.forward(tokens.tensor())?)?;
        for mid in &self.mids {
            grid = mid.forward(&grid)?;
        }
        TokenGrid::new(self.up.forward(grid.tensor())?)
    }

    /// Ω(x) = Θ(x) + x when the residual flag is set, Θ(x) alone otherwise.
    pub fn fuse(&self, tokens: &TokenGrid<F>) -> Result<TokenGrid<F>> {
        let transformed = self.transform(tokens)?;
        if self.residual {
            TokenGrid::new(transformed.tensor().add(tokens.tensor())?)
        } else {
            Ok(transformed)
        }
    }

    pub fn collect_params(&self, prefix: &str, out: &mut NamedParams<F>) {
        self.down.collect_params(&format!("{prefix}.down"), out);
        for (i, mid) in self.mids.iter().enumerate() {
            mid.collect_params(&format!("{prefix}.mid.{i}"), out);
        }
        self.up.collect_params(&format!("{prefix}.up"), out);
    }
}

/// Closed-form trainable parameter count for `num_layers` adapters on
/// M-channel tokens: per layer, down `M·d+d`, each MidLay `d·d+d` (fc) or
/// `9·d·d+d+2d` (3×3 conv plus layer norm affine), up `d·M+M`.
pub fn count_adapter_params(config: &AtlConfig, embed_dim: usize, num_layers: usize) -> usize {
    let d = config.bottleneck_dim;
    let m = embed_dim;
    let mut per_layer = (m * d + d) + (d * m + m);
    for kind in &config.midlays {
        per_layer += match kind {
            MidLayKind::M => d * d + d,
            MidLayKind::C => 9 * d * d + d + 2 * d,
        };
    }
    per_layer * num_layers
}

/// Outside deployment: `Φ_i = τ_i(Ω(Φ_{i-1}))` — each adapter transforms the
/// token stream entering its block.
pub fn forward_outside<F: Scalar>(
    blocks: &[TransformerBlock<F>],
    adapters: &[AtlLayer<F>],
    tokens: TokenGrid<F>,
) -> Result<TokenGrid<F>> {
    if blocks.len() != adapters.len() {
        return Err(TensorError::Config {
            op: "forward_outside",
            msg: format!("{} adapters for {} blocks", adapters.len(), blocks.len()),
        });
    }
    let mut tokens = tokens;
    for (block, adapter) in blocks.iter().zip(adapters) {
        tokens = block.forward(&adapter.fuse(&tokens)?)?;
    }
    Ok(tokens)
}

/// Inside deployment: the adapter wraps the MSA output before the block's
/// first residual addition — `x_T = Ω(MSA(LN1(x))) + x`, then the MLP tail.
pub fn forward_inside<F: Scalar>(
    block: &TransformerBlock<F>,
    adapter: &AtlLayer<F>,
    tokens: &TokenGrid<F>,
) -> Result<TokenGrid<F>> {
    let (h, w) = (tokens.grid_h(), tokens.grid_w());
    let x_seq = tokens.seq();
    let x_a = block.attention_branch(&x_seq)?;
    let fused = adapter.fuse(&TokenGrid::from_seq(x_a, h, w)?)?;
    let x_t = fused.seq().add(&x_seq)?;
    TokenGrid::from_seq(block.feed_forward(&x_t)?, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{Encoder, EncoderConfig};
    use crate::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn grid(shape: &[usize], seed: u64) -> TokenGrid<f64> {
        TokenGrid::new(Tensor::randn(shape, 1.0, &mut rng(seed))).unwrap()
    }

    fn outside_config(midlays: Vec<MidLayKind>, residual: bool) -> AtlConfig {
        AtlConfig {
            bottleneck_dim: 2,
            midlays,
            residual,
            placement: Placement::OutsideBlock,
        }
    }

    #[test]
    fn variant_table_rows() {
        use MidLayKind::{C, M};
        let v = make_variant("TransLandSeg").unwrap();
        assert_eq!(v.midlays, vec![M]);
        assert!(v.residual);
        assert_eq!(v.placement, Placement::OutsideBlock);

        let v = make_variant("TransLandSeg-3").unwrap();
        assert_eq!(v.midlays, vec![C, C]);
        assert!(!v.residual);
        assert_eq!(v.placement, Placement::OutsideBlock);

        let v = make_variant("TransLandSeg-8").unwrap();
        assert_eq!(v.midlays, vec![M]);
        assert!(v.residual);
        assert_eq!(v.placement, Placement::InsideBlock);
    }

    #[test]
    fn variant_grid_is_distinct_and_complete() {
        let variants: Vec<VariantSpec> = VARIANT_NAMES
            .iter()
            .map(|n| make_variant(n).unwrap())
            .collect();
        assert_eq!(variants.len(), 9);
        for (i, a) in variants.iter().enumerate() {
            for b in &variants[i + 1..] {
                assert!(
                    a.midlays != b.midlays || a.residual != b.residual || a.placement != b.placement,
                    "{} and {} share a configuration",
                    a.name,
                    b.name
                );
            }
        }
        // Stack lengths cover exactly {1, 2, 3, 5}.
        let mut lens: Vec<usize> = variants.iter().map(|v| v.midlays.len()).collect();
        lens.sort_unstable();
        lens.dedup();
        assert_eq!(lens, vec![1, 2, 3, 5]);
        assert!(variants.iter().any(|v| !v.residual));
        assert!(variants.iter().any(|v| v.placement == Placement::InsideBlock));
    }

    #[test]
    fn unknown_variant_lists_valid_names() {
        let err = make_variant("TransLandSeg-99").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("TransLandSeg-1"));
        assert!(msg.contains("TransLandSeg-8"));
    }

    #[test]
    fn midlay_labels() {
        assert_eq!(make_variant("TransLandSeg").unwrap().midlay_label(), "[M]x1");
        assert_eq!(make_variant("TransLandSeg-1").unwrap().midlay_label(), "[C]x3");
        assert_eq!(
            make_variant("TransLandSeg-5").unwrap().midlay_label(),
            "[M]x2+[C]x3"
        );
    }

    #[test]
    fn zeroed_up_projection_emits_zeros() {
        for midlays in [
            vec![MidLayKind::M],
            vec![MidLayKind::C, MidLayKind::C],
            vec![MidLayKind::M, MidLayKind::M, MidLayKind::C, MidLayKind::C, MidLayKind::C],
        ] {
            let layer =
                AtlLayer::<f64>::new(&outside_config(midlays, true), 8, &mut rng(1)).unwrap();
            let x = grid(&[2, 3, 3, 8], 2);
            let out = layer.transform(&x).unwrap();
            assert!(out.tensor().to_vec().iter().all(|&v| v == 0.0));
            assert_eq!(out.tensor().shape(), x.tensor().shape());
        }
    }

    #[test]
    fn fuse_is_definitional_residual_sum() {
        let config = outside_config(vec![MidLayKind::M], true);
        let layer = AtlLayer::<f64>::new(&config, 8, &mut rng(3)).unwrap();
        // Give the up-projection real values so Θ(x) is nonzero.
        let mut r = rng(4);
        let up = Tensor::randn(&[2, 8], 0.5, &mut r);
        layer.up.weight.set_values(&up.to_vec());
        let x = grid(&[1, 2, 2, 8], 5);
        let fused = layer.fuse(&x).unwrap().tensor().to_vec();
        let theta = layer.transform(&x).unwrap().tensor().to_vec();
        let xs = x.tensor().to_vec();
        for i in 0..fused.len() {
            assert_eq!(fused[i].to_bits(), (theta[i] + xs[i]).to_bits());
        }
    }

    #[test]
    fn fuse_without_residual_is_plain_transform() {
        let config = outside_config(vec![MidLayKind::M], false);
        let layer = AtlLayer::<f64>::new(&config, 8, &mut rng(6)).unwrap();
        let x = grid(&[1, 2, 2, 8], 7);
        let out = layer.fuse(&x).unwrap();
        assert!(out.tensor().to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_zero_init_is_bitwise_identity() {
        let config = outside_config(vec![MidLayKind::M, MidLayKind::C], true);
        let layer = AtlLayer::<f64>::new(&config, 8, &mut rng(8)).unwrap();
        let x = grid(&[2, 3, 3, 8], 9);
        let out = layer.fuse(&x).unwrap();
        let a = out.tensor().to_vec();
        let b = x.tensor().to_vec();
        assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    // Scalar trace with M=2, d=1 and one fully connected MidLay.
    #[test]
    fn scalar_trace_oracle_midlay_m() {
        let config = AtlConfig {
            bottleneck_dim: 1,
            midlays: vec![MidLayKind::M],
            residual: false,
            placement: Placement::OutsideBlock,
        };
        let layer = AtlLayer::<f64>::new(&config, 2, &mut rng(10)).unwrap();
        layer.down.weight.set_values(&[0.4, -0.7]);
        layer.down.bias.set_values(&[0.05]);
        match &layer.mids[0] {
            MidLayer::Fc { fc } => {
                fc.weight.set_values(&[1.3]);
                fc.bias.set_values(&[-0.1]);
            }
            MidLayer::Conv { .. } => unreachable!(),
        }
        layer.up.weight.set_values(&[0.9, -0.2]);
        layer.up.bias.set_values(&[0.01, 0.02]);

        let x = [0.6, -0.5];
        let down = x[0] * 0.4 + x[1] * (-0.7) + 0.05;
        let mid = down * 1.3 - 0.1;
        let act = mid * 0.5 * (1.0 + libm::erf(mid / std::f64::consts::SQRT_2));
        let expected = [act * 0.9 + 0.01, act * (-0.2) + 0.02];

        let input = TokenGrid::new(Tensor::from_vec(x.to_vec(), &[1, 1, 1, 2]).unwrap()).unwrap();
        let out = layer.transform(&input).unwrap().tensor().to_vec();
        assert!((out[0] - expected[0]).abs() < 1e-14, "{out:?} vs {expected:?}");
        assert!((out[1] - expected[1]).abs() < 1e-14);
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let layer = AtlLayer::<f64>::new(&outside_config(vec![MidLayKind::M], true), 8, &mut rng(11))
            .unwrap();
        let x = grid(&[1, 2, 2, 4], 12);
        assert!(matches!(
            layer.transform(&x),
            Err(TensorError::ShapeMismatch { op: "atl_forward", .. })
        ));
    }

    #[test]
    fn config_validation_bounds() {
        let mut config = outside_config(vec![MidLayKind::M], true);
        config.bottleneck_dim = 8;
        assert!(config.validate(8).is_err()); // d must stay below M
        config.bottleneck_dim = 0;
        assert!(config.validate(8).is_err());
        config.bottleneck_dim = 2;
        config.midlays = vec![MidLayKind::M; 6];
        assert!(config.validate(8).is_err());
        config.midlays = vec![];
        assert!(config.validate(8).is_err());
    }

    #[test]
    fn counting_formula_examples() {
        let mut config = outside_config(vec![MidLayKind::M], true);
        config.bottleneck_dim = 8;
        // 4·(520 + 72 + 576)
        assert_eq!(count_adapter_params(&config, 64, 4), 4672);
        config.bottleneck_dim = 64;
        assert_eq!(count_adapter_params(&config, 1024, 24), 3_271_680);
    }

    #[test]
    fn counting_matches_assembled_layers() {
        for midlays in [vec![MidLayKind::M], vec![MidLayKind::C, MidLayKind::M]] {
            let mut config = outside_config(midlays, true);
            config.bottleneck_dim = 4;
            let layer = AtlLayer::<f64>::new(&config, 16, &mut rng(13)).unwrap();
            let mut params = Vec::new();
            layer.collect_params("a", &mut params);
            let actual: usize = params.iter().map(|(_, p)| p.numel()).sum();
            assert_eq!(actual, count_adapter_params(&config, 16, 1));
        }
    }

    #[test]
    fn counting_monotonicity() {
        let base = outside_config(vec![MidLayKind::M], true);
        let count_d = |d: usize| {
            let mut c = base.clone();
            c.bottleneck_dim = d;
            count_adapter_params(&c, 64, 4)
        };
        assert!(count_d(2) < count_d(4) && count_d(4) < count_d(8));

        let count_stack = |midlays: Vec<MidLayKind>| {
            let mut c = base.clone();
            c.bottleneck_dim = 4;
            c.midlays = midlays;
            count_adapter_params(&c, 64, 4)
        };
        assert!(
            count_stack(vec![MidLayKind::M])
                < count_stack(vec![MidLayKind::M, MidLayKind::M])
        );
        assert!(
            count_stack(vec![MidLayKind::M, MidLayKind::M])
                < count_stack(vec![MidLayKind::M, MidLayKind::M, MidLayKind::C])
        );

        // The projection weight terms are linear in d: doubling d doubles them.
        let proj_weights = |d: usize| 2 * 64 * d;
        assert_eq!(proj_weights(8), 2 * proj_weights(4));
    }

    fn small_encoder(seed: u64) -> Encoder<f64> {
        Encoder::new(
            EncoderConfig {
                image_size: 16,
                patch_size: 8,
                embed_dim: 8,
                num_blocks: 2,
                num_heads: 2,
                mlp_ratio: 2,
            },
            &mut rng(seed),
        )
        .unwrap()
    }

    #[test]
    fn outside_zero_init_matches_plain_encode_bitwise() {
        let encoder = small_encoder(20);
        let config = outside_config(vec![MidLayKind::M], true);
        let mut r = rng(21);
        let adapters: Vec<AtlLayer<f64>> = (0..2)
            .map(|_| AtlLayer::new(&config, 8, &mut r).unwrap())
            .collect();
        let image = Tensor::randn(&[1, 3, 16, 16], 0.5, &mut rng(22));
        let plain = encoder.encode(&image).unwrap().tensor().to_vec();
        let tokens = encoder.patch_embed.forward(&image).unwrap();
        let wrapped = forward_outside(&encoder.blocks, &adapters, tokens)
            .unwrap()
            .tensor()
            .to_vec();
        assert!(plain.iter().zip(&wrapped).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn outside_adapter_count_mismatch_is_config_error() {
        let encoder = small_encoder(23);
        let config = outside_config(vec![MidLayKind::M], true);
        let adapters = vec![AtlLayer::<f64>::new(&config, 8, &mut rng(24)).unwrap()];
        let tokens = encoder
            .patch_embed
            .forward(&Tensor::zeros(&[1, 3, 16, 16]))
            .unwrap();
        assert!(matches!(
            forward_outside(&encoder.blocks, &adapters, tokens),
            Err(TensorError::Config { op: "forward_outside", .. })
        ));
    }

    #[test]
    fn outside_output_drifts_after_an_update() {
        let encoder = small_encoder(25);
        let config = outside_config(vec![MidLayKind::M], true);
        let mut r = rng(26);
        let adapters: Vec<AtlLayer<f64>> = (0..2)
            .map(|_| AtlLayer::new(&config, 8, &mut r).unwrap())
            .collect();
        let image = Tensor::randn(&[1, 3, 16, 16], 0.5, &mut rng(27));
        let plain = encoder.encode(&image).unwrap().tensor().to_vec();

        // One gradient step on the adapters only.
        let tokens = encoder.patch_embed.forward(&image).unwrap();
        let loss = forward_outside(&encoder.blocks, &adapters, tokens)
            .unwrap()
            .tensor()
            .sum();
        loss.backward().unwrap();
        for adapter in &adapters {
            let mut params = Vec::new();
            adapter.collect_params("a", &mut params);
            for (_, p) in params {
                if let Some(g) = p.grad() {
                    p.update_values(|v| {
                        for i in 0..v.len() {
                            v[i] -= 0.05 * g[i];
                        }
                    });
                    p.zero_grad();
                }
            }
        }
        let tokens = encoder.patch_embed.forward(&image).unwrap();
        let after = forward_outside(&encoder.blocks, &adapters, tokens)
            .unwrap()
            .tensor()
            .to_vec();
        assert!(plain.iter().zip(&after).any(|(a, b)| a != b));
    }

    #[test]
    fn inside_zero_init_matches_unwrapped_block_bitwise() {
        let encoder = small_encoder(28);
        let config = AtlConfig {
            bottleneck_dim: 2,
            midlays: vec![MidLayKind::M],
            residual: true,
            placement: Placement::InsideBlock,
        };
        let adapter = AtlLayer::<f64>::new(&config, 8, &mut rng(29)).unwrap();
        let x = grid(&[1, 2, 2, 8], 30);
        let wrapped = forward_inside(&encoder.blocks[0], &adapter, &x)
            .unwrap()
            .tensor()
            .to_vec();
        let plain = encoder.blocks[0].forward(&x).unwrap().tensor().to_vec();
        assert!(wrapped.iter().zip(&plain).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn inside_no_residual_zero_init_annihilates_msa_branch() {
        let encoder = small_encoder(31);
        let block = &encoder.blocks[0];
        let config = AtlConfig {
            bottleneck_dim: 2,
            midlays: vec![MidLayKind::M],
            residual: false,
            placement: Placement::InsideBlock,
        };
        let adapter = AtlLayer::<f64>::new(&config, 8, &mut rng(32)).unwrap();
        let x = grid(&[1, 2, 2, 8], 33);
        let wrapped = forward_inside(block, &adapter, &x).unwrap();
        // Θ(x_A) = 0, so x_T = x and the output is MLP(LN2(x)) + x.
        let zero_like = Tensor::zeros(&[1, 4, 8]);
        let x_t = zero_like.add(&x.seq()).unwrap();
        let expected = block.feed_forward(&x_t).unwrap().to_vec();
        let got = wrapped.tensor().to_vec();
        assert!(got.iter().zip(&expected).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(wrapped.tensor().shape(), x.tensor().shape());
    }

    #[test]
    fn gradient_isolation_between_adapters_and_frozen_blocks() {
        let encoder = small_encoder(34);
        for (_, p) in encoder.named_params() {
            p.set_requires_grad(false);
        }
        let config = outside_config(vec![MidLayKind::M, MidLayKind::C], true);
        let mut r = rng(35);
        let adapters: Vec<AtlLayer<f64>> = (0..2)
            .map(|_| AtlLayer::new(&config, 8, &mut r).unwrap())
            .collect();
        let image = Tensor::randn(&[1, 3, 16, 16], 0.5, &mut rng(36));
        let tokens = encoder.patch_embed.forward(&image).unwrap();
        forward_outside(&encoder.blocks, &adapters, tokens)
            .unwrap()
            .tensor()
            .sum()
            .backward()
            .unwrap();
        for (name, p) in encoder.named_params() {
            assert!(!p.has_grad(), "frozen {name} must stay grad-free");
        }
        for (i, adapter) in adapters.iter().enumerate() {
            let mut params = Vec::new();
            adapter.collect_params(&format!("adapter.{i}"), &mut params);
            for (name, p) in params {
                assert!(p.has_grad(), "{name} should have a gradient");
            }
        }
    }
}
