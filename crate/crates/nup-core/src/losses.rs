//! Adversarial, cycle, and combined training objectives.
//!
//! The image discriminator trains on the softplus (non-saturating) form:
//! its loss is `mean softplus(-real) + mean softplus(fake)` over raw
//! logits and the matching generator term is `mean softplus(-fake)`. The
//! mask discriminator trains least-squares on its patch map, targets one
//! for real and zero for fake, with expectations taken over every patch
//! position. Both get an R1 gradient penalty on real inputs, computed by
//! differentiating the logit sum back to the input and squaring, which
//! needs the second-order graph the tape always records.
//!
//! The combined objective weighs the mask-side GAN, the two-way cycle
//! reconstruction, and the segmentation sum against the image-side GAN
//! term, which carries weight one.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the mask-domain GAN terms.
    pub lambda_mask_gan: f32,
    /// Weight of the cycle reconstruction term.
    pub lambda_cycle: f32,
    /// Weight of the segmentation term.
    pub lambda_seg: f32,
    /// R1 strength for the image discriminator.
    pub gamma_g: f32,
    /// R1 strength for the mask discriminator.
    pub gamma_s: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_mask_gan: 2.0,
            lambda_cycle: 10.0,
            lambda_seg: 2.0,
            gamma_g: 1.0,
            gamma_s: 1.0,
        }
    }
}

/// Image discriminator loss on raw logits (R1 not included).
pub fn dg_disc_loss(real_logits: &Tensor, fake_logits: &Tensor) -> Tensor {
    let real = real_logits.neg().softplus().mean_all();
    let fake = fake_logits.softplus().mean_all();
    real.add(&fake)
}

/// Non-saturating generator loss against the image discriminator.
pub fn dg_gen_loss(fake_logits: &Tensor) -> Tensor {
    fake_logits.neg().softplus().mean_all()
}

/// Least-squares loss of the mask discriminator over its patch map.
pub fn ds_disc_loss(real_map: &Tensor, fake_map: &Tensor) -> Tensor {
    let real = real_map.add_scalar(-1.0).square().mean_all();
    let fake = fake_map.square().mean_all();
    real.add(&fake).mul_scalar(0.5)
}

/// Least-squares generator loss against the mask discriminator.
pub fn ds_gen_loss(fake_map: &Tensor) -> Tensor {
    fake_map.add_scalar(-1.0).square().mean_all().mul_scalar(0.5)
}

/// R1 penalty `(gamma/2) E_b[ |grad_x D(x)|^2 ]` for logits produced from
/// `input`. Differentiable in the discriminator parameters.
pub fn r1_penalty(logits: &Tensor, input: &Tensor, gamma: f32) -> Tensor {
    let g = logits.graph().clone();
    if gamma == 0.0 {
        return g.scalar(0.0);
    }
    let total = logits.sum_all();
    let grads = g.grad(&total, &[input]);
    match &grads[0] {
        None => g.scalar(0.0),
        Some(gi) => {
            let b = input.shape()[0].max(1);
            gi.square().sum_all().mul_scalar(gamma / (2.0 * b as f32))
        }
    }
}

/// Mean absolute reconstruction error.
pub fn cycle_loss(a: &Tensor, b: &Tensor) -> Tensor {
    a.sub(b).abs().mean_all()
}

/// Combined generator-side objective.
pub fn total_loss(
    l_gan_g: &Tensor,
    l_gan_s: &Tensor,
    l_cyc: &Tensor,
    l_seg: &Tensor,
    w: &LossWeights,
) -> Tensor {
    l_gan_g
        .add(&l_gan_s.mul_scalar(w.lambda_mask_gan))
        .add(&l_cyc.mul_scalar(w.lambda_cycle))
        .add(&l_seg.mul_scalar(w.lambda_seg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::tensor::Graph;
    use ndarray::{ArrayD, IxDyn};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f32> {
        use rand_distr::{Distribution, StandardNormal};
        let n: usize = shape.iter().product();
        ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|_| StandardNormal.sample(rng)).collect())
            .unwrap()
    }

    #[test]
    fn weighted_total_matches_hand_arithmetic() {
        let g = Graph::new();
        let total = total_loss(
            &g.scalar(1.0),
            &g.scalar(2.0),
            &g.scalar(3.0),
            &g.scalar(4.0),
            &LossWeights::default(),
        );
        assert!((total.item() - 43.0).abs() < 1e-6, "1 + 2*2 + 10*3 + 2*4");
    }

    #[test]
    fn image_gan_losses_at_an_undecided_discriminator() {
        let g = Graph::new();
        let zeros = g.constant(ArrayD::from_elem(IxDyn(&[5, 1]), 0.0f32));
        let two_log2 = 2.0 * std::f32::consts::LN_2;
        assert!((dg_disc_loss(&zeros, &zeros).item() - two_log2).abs() < 1e-6);
        assert!((dg_gen_loss(&zeros).item() - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn image_gan_losses_vanish_for_a_perfect_discriminator() {
        let g = Graph::new();
        let real = g.constant(ArrayD::from_elem(IxDyn(&[4, 1]), 25.0f32));
        let fake = g.constant(ArrayD::from_elem(IxDyn(&[4, 1]), -25.0f32));
        assert!(dg_disc_loss(&real, &fake).item() < 1e-6);
    }

    #[test]
    fn mask_gan_losses_hit_their_midpoint_and_optimum() {
        let g = Graph::new();
        let half = g.constant(ArrayD::from_elem(IxDyn(&[2, 1, 6, 6]), 0.5f32));
        assert!((ds_disc_loss(&half, &half).item() - 0.25).abs() < 1e-6);
        assert!((ds_gen_loss(&half).item() - 0.125).abs() < 1e-6);

        let ones = g.constant(ArrayD::from_elem(IxDyn(&[2, 1, 6, 6]), 1.0f32));
        let zeros = g.constant(ArrayD::from_elem(IxDyn(&[2, 1, 6, 6]), 0.0f32));
        assert_eq!(ds_disc_loss(&ones, &zeros).item(), 0.0);
        assert!((ds_gen_loss(&zeros).item() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn random_logits_match_term_by_term_recomputation() {
        let g = Graph::new();
        let mut rng = substream(31, "loss", 0);
        let rv = randn(&mut rng, &[7, 1]);
        let fv = randn(&mut rng, &[7, 1]);
        let real = g.constant(rv.clone());
        let fake = g.constant(fv.clone());

        let sp = |x: f64| (1.0 + x.exp()).ln();
        let want_disc: f64 = rv.iter().map(|&v| sp(-v as f64)).sum::<f64>() / 7.0
            + fv.iter().map(|&v| sp(v as f64)).sum::<f64>() / 7.0;
        let want_gen: f64 = fv.iter().map(|&v| sp(-v as f64)).sum::<f64>() / 7.0;
        assert!((dg_disc_loss(&real, &fake).item() as f64 - want_disc).abs() < 1e-6);
        assert!((dg_gen_loss(&fake).item() as f64 - want_gen).abs() < 1e-6);

        let rm = randn(&mut rng, &[2, 1, 4, 4]);
        let fm = randn(&mut rng, &[2, 1, 4, 4]);
        let real_m = g.constant(rm.clone());
        let fake_m = g.constant(fm.clone());
        let n = 32.0;
        let want_ds: f64 = 0.5 * rm.iter().map(|&v| (v as f64 - 1.0).powi(2)).sum::<f64>() / n
            + 0.5 * fm.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / n;
        let want_ds_gen: f64 = 0.5 * fm.iter().map(|&v| (v as f64 - 1.0).powi(2)).sum::<f64>() / n;
        assert!((ds_disc_loss(&real_m, &fake_m).item() as f64 - want_ds).abs() < 1e-6);
        assert!((ds_gen_loss(&fake_m).item() as f64 - want_ds_gen).abs() < 1e-6);

        let a = randn(&mut rng, &[3, 3, 8, 8]);
        let b = randn(&mut rng, &[3, 3, 8, 8]);
        let want_cyc: f64 = a
            .iter()
            .zip(b.iter())
            .map(|(&x, &y)| (x as f64 - y as f64).abs())
            .sum::<f64>()
            / a.len() as f64;
        let got = cycle_loss(&g.constant(a), &g.constant(b)).item() as f64;
        assert!((got - want_cyc).abs() < 1e-6);
    }

    #[test]
    fn gan_loss_parts_are_nonnegative_on_random_inputs() {
        let mut rng = substream(32, "loss", 0);
        for trial in 0..50 {
            let g = Graph::new();
            let a = g.constant(randn(&mut rng, &[4, 1]));
            let b = g.constant(randn(&mut rng, &[4, 1]));
            let m = g.constant(randn(&mut rng, &[2, 1, 5, 5]));
            assert!(dg_disc_loss(&a, &b).item() >= 0.0, "trial {trial}");
            assert!(dg_gen_loss(&b).item() >= 0.0);
            assert!(ds_disc_loss(&m, &m).item() >= 0.0);
            assert!(ds_gen_loss(&m).item() >= 0.0);
        }
    }

    #[test]
    fn linear_discriminator_r1_is_half_the_weight_norm() {
        let g = Graph::new();
        let mut rng = substream(33, "loss", 0);
        let a = randn(&mut rng, &[6, 1]);
        let w = g.input(a.clone());
        let x = g.input(randn(&mut rng, &[4, 6]));
        let logits = x.matmul(&w);
        let r1 = r1_penalty(&logits, &x, 1.0).item() as f64;
        let want: f64 = 0.5 * a.iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
        assert!((r1 - want).abs() < 1e-5 * want.max(1.0), "got {r1}, want {want}");
    }

    #[test]
    fn r1_vanishes_for_zero_gamma_and_input_free_logits() {
        let g = Graph::new();
        let mut rng = substream(34, "loss", 0);
        let x = g.input(randn(&mut rng, &[4, 6]));
        let w = g.input(randn(&mut rng, &[6, 1]));
        let logits = x.matmul(&w);
        assert_eq!(r1_penalty(&logits, &x, 0.0).item(), 0.0);

        let detached = g.constant(randn(&mut rng, &[4, 1]));
        assert_eq!(r1_penalty(&detached, &x, 1.0).item(), 0.0);
    }

    #[test]
    fn r1_penalty_is_differentiable_in_the_weights() {
        // Double backprop: the penalty itself must carry a gradient to the
        // discriminator parameters.
        let g = Graph::new();
        let mut rng = substream(35, "loss", 0);
        let w = g.input(randn(&mut rng, &[6, 1]));
        let x = g.input(randn(&mut rng, &[4, 6]));
        let logits = x.matmul(&w).tanh();
        let r1 = r1_penalty(&logits, &x, 1.0);
        let gw = g.grad(&r1, &[&w]);
        let gw = gw[0].as_ref().expect("weight gradient through the penalty");
        assert!(gw.value().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn r1_matches_a_double_precision_finite_difference_oracle() {
        // Tiny convolutional discriminator, replicated in f64: one 3x3
        // convolution, tanh, then a weighted global sum.
        let cin = 2usize;
        let cout = 3usize;
        let k = 3usize;
        let h = 5usize;
        let w = 5usize;
        let b = 2usize;
        let mut rng = substream(36, "loss", 0);
        let wv = randn(&mut rng, &[cout, cin, k, k]);
        let head = randn(&mut rng, &[cout]);
        let xv = randn(&mut rng, &[b, cin, h, w]);

        let g = Graph::new();
        let x = g.input(xv.clone());
        let wt = g.input(wv.clone());
        let conv = crate::nn::conv2d(&x, &wt, None, 1, 1).tanh();
        let head_t = g
            .constant(head.clone().into_shape_with_order(IxDyn(&[1, cout, 1, 1])).unwrap())
            .broadcast_to(&[b, cout, h, w]);
        let logits = conv.mul(&head_t).sum_axes(&[1, 2, 3]);
        let r1 = r1_penalty(&logits, &x, 1.0).item() as f64;

        // f64 oracle: the same network evaluated in double precision, with
        // central differences per input element.
        let xs64: Vec<f64> = xv.iter().map(|&v| v as f64).collect();
        let at = |xs: &[f64], bi: usize, ic: usize, iy: usize, ix: usize| {
            xs[((bi * cin + ic) * h + iy) * w + ix]
        };
        let dval = |xs: &[f64], bi: usize| -> f64 {
            let mut total = 0.0f64;
            for oc in 0..cout {
                for oy in 0..h {
                    for ox in 0..w {
                        let mut acc = 0.0f64;
                        for ic in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = oy as isize + ky as isize - 1;
                                    let ix = ox as isize + kx as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += at(xs, bi, ic, iy as usize, ix as usize)
                                        * wv[[oc, ic, ky, kx]] as f64;
                                }
                            }
                        }
                        total += acc.tanh() * head[oc] as f64;
                    }
                }
            }
            total
        };
        let eps = 1e-5f64;
        let mut want = 0.0f64;
        for bi in 0..b {
            let mut sq = 0.0f64;
            for ic in 0..cin {
                for iy in 0..h {
                    for ix in 0..w {
                        let pos = ((bi * cin + ic) * h + iy) * w + ix;
                        let mut probe = xs64.clone();
                        probe[pos] = xs64[pos] + eps;
                        let dplus = dval(&probe, bi);
                        probe[pos] = xs64[pos] - eps;
                        let dminus = dval(&probe, bi);
                        let deriv = (dplus - dminus) / (2.0 * eps);
                        sq += deriv * deriv;
                    }
                }
            }
            want += sq;
        }
        want *= 0.5 / b as f64;
        let rel = (r1 - want).abs() / want.abs().max(1e-12);
        assert!(rel < 1e-4, "r1 {r1} vs finite differences {want}, rel {rel}");
    }
}
