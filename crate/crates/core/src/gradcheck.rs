//! Finite-difference verification of the autodiff engine.

use crate::scalar::Scalar;
use crate::tensor::TensorBase;

/// Compares the reverse-mode gradient of `f` at `x` against central finite
/// differences `(f(x+h) - f(x-h)) / 2h`, coordinate by coordinate.
///
/// `f` must be a pure scalar-valued function of its argument. Returns the
/// worst relative error, with denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F, Fun>(f: Fun, x: &TensorBase<F>, h: F) -> f64
where
    F: Scalar,
    Fun: Fn(&TensorBase<F>) -> TensorBase<F>,
{
    grad_check_floored(f, x, h, 1e-8)
}

/// [`grad_check`] with a configurable denominator floor. Raising the floor
/// turns the comparison into a mixed relative/absolute tolerance: against an
/// O(1) loss, a central difference carries ~1e-10 of cancellation noise, so
/// coordinates whose true gradient sits below ~1e-5 can only be certified in
/// absolute terms.
pub fn grad_check_floored<F, Fun>(f: Fun, x: &TensorBase<F>, h: F, floor: f64) -> f64
where
    F: Scalar,
    Fun: Fn(&TensorBase<F>) -> TensorBase<F>,
{
    let base = x.to_vec();
    let shape = x.shape().to_vec();

    let leaf = TensorBase::from_vec(base.clone(), &shape).expect("shape matches values");
    leaf.set_requires_grad(true);
    let loss = f(&leaf);
    assert_eq!(loss.numel(), 1, "grad_check requires a scalar-valued function");
    loss.backward().expect("scalar loss");
    let analytic = leaf
        .grad()
        .unwrap_or_else(|| vec![F::zero(); base.len()]);

    let eval = |values: Vec<F>| -> F {
        let t = TensorBase::from_vec(values, &shape).expect("shape matches values");
        f(&t).item()
    };

    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let numeric = (eval(plus) - eval(minus)) / (F::lit(2.0) * h);
        worst = worst.max(relative_error_floored(
            analytic[i].to_f64(),
            numeric.to_f64(),
            floor,
        ));
    }
    worst
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floored(analytic, numeric, 1e-8)
}

fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Finite-difference check of `d loss / d param` for a parameter embedded in
/// a model: `loss_fn` rebuilds the forward pass from the parameter's current
/// values. The parameter must require gradients.
pub fn grad_check_param<F, Fun>(loss_fn: Fun, param: &TensorBase<F>, h: F) -> f64
where
    F: Scalar,
    Fun: Fn() -> TensorBase<F>,
{
    grad_check_param_floored(loss_fn, param, h, 1e-8)
}

/// [`grad_check_param`] with a configurable denominator floor (see
/// [`grad_check_floored`]).
pub fn grad_check_param_floored<F, Fun>(
    loss_fn: Fun,
    param: &TensorBase<F>,
    h: F,
    floor: f64,
) -> f64
where
    F: Scalar,
    Fun: Fn() -> TensorBase<F>,
{
    assert!(param.requires_grad(), "parameter must be trainable");
    param.zero_grad();
    let loss = loss_fn();
    loss.backward().expect("scalar loss");
    let analytic = param
        .grad()
        .unwrap_or_else(|| vec![F::zero(); param.numel()]);
    param.zero_grad();

    let base = param.to_vec();
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut bumped = base.clone();
        bumped[i] = base[i] + h;
        param.set_values(&bumped);
        let plus = loss_fn().item();
        bumped[i] = base[i] - h;
        param.set_values(&bumped);
        let minus = loss_fn().item();
        bumped[i] = base[i];
        param.set_values(&base);
        let numeric = (plus - minus) / (F::lit(2.0) * h);
        worst = worst.max(relative_error_floored(
            analytic[i].to_f64(),
            numeric.to_f64(),
            floor,
        ));
    }
    worst
}

pub mod families {
    //! The per-op-family sweep behind the `gradcheck` command: each family
    //! builds small random cases over ten seeds and reports the worst
    //! relative error of reverse-mode gradients against central differences.

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    use super::{grad_check, grad_check_floored, grad_check_param_floored};
    use crate::adapter::{AtlConfig, MidLayKind, Placement};
    use crate::decoder::DecoderConfig;
    use crate::encoder::EncoderConfig;
    use crate::model::ModelAssembly;
    use crate::train::{apply_freeze_policy, bce_dice_loss, TrainConfig};
    use crate::Tensor;

    pub const FAMILY_NAMES: [&str; 12] = [
        "elementwise",
        "matmul",
        "gelu",
        "sigmoid",
        "softmax",
        "layer_norm",
        "conv2d",
        "conv_transpose2d",
        "upsample_bilinear",
        "bce_with_logits",
        "transformer_block",
        "full_model_loss",
    ];

    const SEEDS: u64 = 10;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    /// Worst relative error for one family; `None` for an unknown name.
    pub fn check_family(name: &str) -> Option<f64> {
        let mut worst = 0.0f64;
        match name {
            "elementwise" => {
                for s in 0..SEEDS {
                    let mut r = rng(s);
                    let x = Tensor::randn(&[6], 1.0, &mut r);
                    let y = Tensor::randn(&[6], 1.0, &mut r).add_scalar(3.0); // keep away from /0
                    let e = grad_check(
                        |x| {
                            let sum = x.add(&y).unwrap();
                            let prod = x.mul(&y).unwrap();
                            let ratio = x.div(&y).unwrap();
                            sum.sub(&prod)
                                .unwrap()
                                .add(&ratio)
                                .unwrap()
                                .mul_scalar(0.5)
                                .add_scalar(1.0)
                                .sum()
                        },
                        &x,
                        1e-5,
                    );
                    worst = worst.max(e);
                }
            }
            "matmul" => {
                for s in 0..SEEDS {
                    let mut r = rng(s);
                    let a = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
                    let b = Tensor::randn(&[4, 3], 1.0, &mut r);
                    worst = worst.max(grad_check(|a| a.matmul(&b).unwrap().sum(), &a, 1e-4));
                    worst = worst.max(grad_check(|b| a.matmul(b).unwrap().sum(), &b, 1e-4));
                }
            }
            "gelu" => {
                for s in 0..SEEDS {
                    let mut r = rng(s);
                    let vals: Vec<f64> = (0..8).map(|_| r.random_range(-2.0..2.0)).collect();
                    let x = Tensor::from_vec(vals, &[8]).unwrap();
                    worst = worst.max(grad_check(|x| x.gelu().sum(), &x, 1e-5));
                }
            }
            "sigmoid" => {
                for s in 0..SEEDS {
                    let mut r = rng(s);
                    let x = Tensor::randn(&[8], 2.0, &mut r);
                    worst = worst.max(grad_check(|x| x.sigmoid().sum(), &x, 1e-5));
                }
            }
            "softmax" => {
                for s in 0..SEEDS {
                    let mut r = rng(s);
                    let x = Tensor::randn(&[2, 5], 1.5, &mut r);
                    let w = Tensor::randn(&[2, 5], 1.0, &mut r);
                    worst = worst.max(grad_check(
                        |x| x.softmax(1).unwrap().mul(&w).unwrap().sum(),
                        &x,
                        1e-5,
                    ));
                }
            }
            "layer_norm" => {
                for s in 0..SEEDS {
                    let mut r = rng(s);
                    let x = Tensor::randn(&[3, 5], 1.0, &mut r);
                    let gamma = Tensor::randn(&[5], 1.0, &mut r);
                    let beta = Tensor::randn(&[5], 1.0, &mut r);
                    worst = worst.max(grad_check(
                        |x| x.layer_norm(&gamma, &beta, 1e-6).unwrap().sum(),
                        &x,
                        1e-5,
                    ));
                    worst = worst.max(grad_check(
                        |g| x.layer_norm(g, &beta, 1e-6).unwrap().sum(),
                        &gamma,
                        1e-5,
                    ));
                }
            }
            "conv2d" => {
                for s in 0..SEEDS {
                    let mut r = rng(s);
                    let x = Tensor::randn(&[1, 2, 5, 5], 1.0, &mut r);
                    let w = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut r);
                    let b = Tensor::randn(&[3], 0.5, &mut r);
                    worst = worst.max(grad_check(
                        |x| x.conv2d(&w, Some(&b), 2, 1).unwrap().sum(),
                        &x,
                        1e-4,
                    ));
                    worst = worst.max(grad_check(
                        |w| x.conv2d(w, Some(&b), 2, 1).unwrap().sum(),
                        &w,
                        1e-4,
                    ));
                }
            }
            "conv_transpose2d" => {
                for s in 0..SEEDS {
                    let mut r = rng(s);
                    let x = Tensor::randn(&[1, 3, 3, 3], 1.0, &mut r);
                    let w = Tensor::randn(&[3, 2, 2, 2], 0.5, &mut r);
                    let b = Tensor::randn(&[2], 0.5, &mut r);
                    worst = worst.max(grad_check(
                        |x| x.conv_transpose2d(&w, Some(&b), 2).unwrap().sum(),
                        &x,
                        1e-4,
                    ));
                    worst = worst.max(grad_check(
                        |w| x.conv_transpose2d(w, Some(&b), 2).unwrap().sum(),
                        &w,
                        1e-4,
                    ));
                }
            }
            "upsample_bilinear" => {
                for s in 0..SEEDS {
                    let mut r = rng(s);
                    let x = Tensor::randn(&[1, 2, 3, 3], 1.0, &mut r);
                    let w = Tensor::randn(&[1, 2, 6, 6], 1.0, &mut r);
                    worst = worst.max(grad_check(
                        |x| x.upsample_bilinear(6, 6).unwrap().mul(&w).unwrap().sum(),
                        &x,
                        1e-4,
                    ));
                }
            }
            "bce_with_logits" => {
                for s in 0..SEEDS {
                    let mut r = rng(s);
                    let x = Tensor::randn(&[8], 2.0, &mut r);
                    let t: Vec<f64> = (0..8).map(|_| f64::from(r.random_range(0..=1))).collect();
                    let target = Tensor::from_vec(t, &[8]).unwrap();
                    worst = worst.max(grad_check(
                        |x| x.bce_with_logits(&target).unwrap().mean(),
                        &x,
                        1e-5,
                    ));
                }
            }
            "transformer_block" => {
                use crate::encoder::TransformerBlock;
                for s in 0..SEEDS {
                    let mut r = rng(s);
                    let block = TransformerBlock::<f64>::new(4, 2, 2, &mut r);
                    let x = Tensor::randn(&[1, 3, 4], 1.0, &mut r);
                    let w = Tensor::randn(&[1, 3, 4], 1.0, &mut r);
                    worst = worst.max(grad_check(
                        |x| block.forward_seq(x).unwrap().mul(&w).unwrap().sum(),
                        &x,
                        1e-5,
                    ));
                }
            }
            "full_model_loss" => {
                worst = full_model_loss_check();
            }
            _ => return None,
        }
        Some(worst)
    }

    /// End-to-end check on a miniature assembly: gradient of the training
    /// loss with respect to the input image and to one parameter of every
    /// trainable subsystem (adapter down/mid/up, decoder). A 4x4 token grid
    /// keeps conv-tap gradients away from accidental cancellation, which
    /// would push their relative error into finite-difference noise.
    fn full_model_loss_check() -> f64 {
        let encoder_config = EncoderConfig {
            image_size: 16,
            patch_size: 4,
            embed_dim: 8,
            num_blocks: 2,
            num_heads: 2,
            mlp_ratio: 2,
        };
        let atl = AtlConfig {
            bottleneck_dim: 2,
            midlays: vec![MidLayKind::M, MidLayKind::C],
            residual: true,
            placement: Placement::OutsideBlock,
        };
        let decoder_config = DecoderConfig {
            embed_dim: 8,
            num_blocks: 1,
            num_heads: 2,
            upsample_stages: 1,
            head_hidden: 4,
        };
        let model = ModelAssembly::new(encoder_config, Some(atl), decoder_config, 5).unwrap();
        apply_freeze_policy(&model);
        // Re-draw every adapter weight at a healthy scale: the zero
        // up-projections would block gradient flow entirely, and the tiny
        // default init leaves deep-path gradients near the finite-difference
        // noise floor.
        let mut r = rng(77);
        for (name, p) in model.adapter_params() {
            if name.ends_with("weight") {
                let vals: Vec<f64> = (0..p.numel()).map(|_| r.random_range(-0.45..0.45)).collect();
                p.set_values(&vals);
            }
        }
        let mut r = rng(123);
        let image = Tensor::randn(&[1, 3, 16, 16], 0.5, &mut r).add_scalar(0.5);
        let mask_vals: Vec<f64> = (0..256).map(|_| f64::from(r.random_range(0..=1))).collect();
        let mask = Tensor::from_vec(mask_vals, &[1, 16, 16]).unwrap();
        let train_config = TrainConfig::default();

        // h = 2e-5 balances the two error floors of a central difference
        // through this deep composition: O(h²) truncation from its strong
        // curvature against O(eps/h) cancellation noise. The 1e-4 denominator
        // floor turns the gate into the mixed tolerance
        // |a-n| <= max(1e-5·|g|, 1e-9): individual taps deep in the stack can
        // carry true gradients of ~1e-7 whose relative error central
        // differences cannot resolve against an O(1) loss.
        let h = 2e-5;
        let floor = 1e-4;
        let loss_from_image = |img: &Tensor| {
            let logits = model.forward(img).unwrap();
            bce_dice_loss(&logits, &mask, &train_config).unwrap()
        };
        let mut worst = grad_check_floored(loss_from_image, &image, h, floor);

        let loss = || {
            let logits = model.forward(&image).unwrap();
            bce_dice_loss(&logits, &mask, &train_config).unwrap()
        };
        // One parameter per trainable subsystem stage.
        let interesting = |name: &str| {
            name == "adapter.0.down.weight"
                || name == "adapter.0.mid.0.fc.weight"
                || name == "adapter.0.mid.1.conv.weight"
                || name == "adapter.0.mid.1.norm.gamma"
                || name == "adapter.1.up.weight"
                || name == "decoder.neck.weight"
                || name == "decoder.head.fc2.weight"
                || name == "decoder.up.0.weight"
        };
        let params = model.trainable_params();
        for (name, p) in params.iter().filter(|(n, _)| interesting(n)) {
            let e = grad_check_param_floored(loss, p, h, floor);
            debug_assert!(e.is_finite(), "{name}: non-finite gradcheck error");
            worst = worst.max(e);
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::families::{check_family, FAMILY_NAMES};
    use super::{grad_check, relative_error};
    use crate::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn every_family_passes_below_1e5() {
        for name in FAMILY_NAMES {
            let worst = check_family(name).expect("known family");
            assert!(worst < 1e-5, "family {name}: worst relative error {worst}");
        }
    }

    #[test]
    fn unknown_family_is_none() {
        assert!(check_family("does_not_exist").is_none());
    }

    // The checker must catch a wrong derivative: feed it a GELU whose
    // backward result is scaled by 1.01 and expect a clear failure.
    #[test]
    fn corrupted_gelu_derivative_fails_the_check() {
        let mut r = ChaCha20Rng::seed_from_u64(1);
        let x = Tensor::randn(&[8], 1.0, &mut r);

        let leaf = Tensor::from_vec(x.to_vec(), &[8]).unwrap();
        leaf.set_requires_grad(true);
        leaf.gelu().sum().backward().unwrap();
        let corrupted: Vec<f64> = leaf.grad().unwrap().iter().map(|g| g * 1.01).collect();

        // Numeric reference from the genuine forward pass.
        let h = 1e-5;
        let mut worst = 0.0f64;
        let base = x.to_vec();
        for i in 0..base.len() {
            let eval = |vals: Vec<f64>| Tensor::from_vec(vals, &[8]).unwrap().gelu().sum().item();
            let mut plus = base.clone();
            plus[i] += h;
            let mut minus = base.clone();
            minus[i] -= h;
            let numeric = (eval(plus) - eval(minus)) / (2.0 * h);
            worst = worst.max(relative_error(corrupted[i], numeric));
        }
        assert!(worst > 1e-5, "corrupted derivative slipped through: {worst}");

        // And the intact op still passes.
        let clean = grad_check(|x| x.gelu().sum(), &x, 1e-5);
        assert!(clean < 1e-6);
    }
}
