//! The two discriminators: D_G judges histology-domain images with a
//! residual downsampling trunk ending in a scalar logit per sample;
//! D_S judges mask-domain images with a small patch discriminator that
//! emits a spatial logit map (least-squares targets live in the loss
//! functions, not here).

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::nn::{instance_norm, Conv2d, Ctx};
use crate::tensor::{Scope, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DgConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub max_channels: usize,
}

impl Default for DgConfig {
    fn default() -> Self {
        DgConfig { image_size: 64, base_channels: 16, max_channels: 64 }
    }
}

impl DgConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !self.image_size.is_power_of_two() || self.image_size < 16 {
            return Err(ModelError::NotPowerOfTwo(self.image_size, self.image_size));
        }
        Ok(())
    }

    fn channels(&self, res: usize) -> usize {
        (self.base_channels * (self.image_size / res)).min(self.max_channels)
    }
}

struct ResDown {
    conv1: Conv2d,
    conv2: Conv2d,
    skip: Conv2d,
}

/// Residual downsampling discriminator with a scalar output logit.
pub struct DiscriminatorG {
    cfg: DgConfig,
    from_rgb: Conv2d,
    blocks: Vec<ResDown>,
    tail: Conv2d,
    fc1: crate::nn::Linear,
    fc2: crate::nn::Linear,
}

impl DiscriminatorG {
    pub fn new(cfg: &DgConfig, sc: &mut Scope, rng: &mut ChaCha8Rng) -> Result<DiscriminatorG, ModelError> {
        cfg.validate()?;
        let s = cfg.image_size;
        let from_rgb = Conv2d::new(sc, "from_rgb", 3, cfg.channels(s), 1, 1, 0, true, rng);
        let mut blocks = Vec::new();
        let mut res = s;
        let mut i = 0;
        while res > 4 {
            let mut bsc = sc.child(&format!("block{i}"));
            let cin = cfg.channels(res);
            let cout = cfg.channels(res / 2);
            blocks.push(ResDown {
                conv1: Conv2d::new(&mut bsc, "conv1", cin, cin, 3, 1, 1, true, rng),
                conv2: Conv2d::new(&mut bsc, "conv2", cin, cout, 3, 2, 1, true, rng),
                skip: Conv2d::new(&mut bsc, "skip", cin, cout, 1, 2, 0, false, rng),
            });
            res /= 2;
            i += 1;
        }
        let c4 = cfg.channels(4);
        let tail = Conv2d::new(sc, "tail", c4, c4, 3, 1, 1, true, rng);
        let fc1 = crate::nn::Linear::new(sc, "fc1", 16 * c4, c4, true, rng);
        let fc2 = crate::nn::Linear::new(sc, "fc2", c4, 1, true, rng);
        Ok(DiscriminatorG { cfg: cfg.clone(), from_rgb, blocks, tail, fc1, fc2 })
    }

    /// Raw logits `[B, 1]`.
    pub fn forward(&self, cx: &Ctx, img: &Tensor) -> Result<Tensor, ModelError> {
        let sh = img.shape();
        let want = vec![sh.first().copied().unwrap_or(0), 3, self.cfg.image_size, self.cfg.image_size];
        if sh != want {
            return Err(ModelError::ShapeMismatch { got: sh, want });
        }
        let b = img.shape()[0];
        let mut h = self.from_rgb.forward(cx, img).lrelu(0.2);
        let inv_sqrt2 = 1.0 / 2f32.sqrt();
        for blk in &self.blocks {
            let main = blk.conv1.forward(cx, &h).lrelu(0.2);
            let main = blk.conv2.forward(cx, &main).lrelu(0.2);
            let skip = blk.skip.forward(cx, &h);
            h = main.add(&skip).mul_scalar(inv_sqrt2);
        }
        let h = self.tail.forward(cx, &h).lrelu(0.2);
        let c4 = self.cfg.channels(4);
        let h = h.reshape(&[b, 16 * c4]);
        let h = self.fc1.forward(cx, &h).lrelu(0.2);
        Ok(self.fc2.forward(cx, &h))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DiscSConfig {
    pub image_size: usize,
    pub base_channels: usize,
}

impl Default for DiscSConfig {
    fn default() -> Self {
        DiscSConfig { image_size: 64, base_channels: 16 }
    }
}

/// Patch discriminator: stride-2 4x4 convolutions with instance norm
/// from the second layer on, then two stride-1 layers ending in a
/// one-channel logit map.
pub struct DiscriminatorS {
    cfg: DiscSConfig,
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
    c4: Conv2d,
    out: Conv2d,
}

impl DiscriminatorS {
    pub fn new(cfg: &DiscSConfig, sc: &mut Scope, rng: &mut ChaCha8Rng) -> Result<DiscriminatorS, ModelError> {
        if cfg.image_size < 32 {
            return Err(ModelError::InvalidConfig("patch discriminator needs at least 32 px".into()));
        }
        let c = cfg.base_channels;
        let c1 = Conv2d::new(sc, "c1", 3, c, 4, 2, 1, true, rng);
        let c2 = Conv2d::new(sc, "c2", c, 2 * c, 4, 2, 1, true, rng);
        let c3 = Conv2d::new(sc, "c3", 2 * c, 4 * c, 4, 2, 1, true, rng);
        let c4 = Conv2d::new(sc, "c4", 4 * c, 8 * c, 4, 1, 1, true, rng);
        let out = Conv2d::new(sc, "out", 8 * c, 1, 4, 1, 1, true, rng);
        Ok(DiscriminatorS { cfg: cfg.clone(), c1, c2, c3, c4, out })
    }

    /// Raw logit map `[B, 1, h', w']`.
    pub fn forward(&self, cx: &Ctx, img: &Tensor) -> Result<Tensor, ModelError> {
        let sh = img.shape();
        let want = vec![sh.first().copied().unwrap_or(0), 3, self.cfg.image_size, self.cfg.image_size];
        if sh != want {
            return Err(ModelError::ShapeMismatch { got: sh, want });
        }
        let h = self.c1.forward(cx, img).lrelu(0.2);
        let h = instance_norm(&self.c2.forward(cx, &h), 1e-5).lrelu(0.2);
        let h = instance_norm(&self.c3.forward(cx, &h), 1e-5).lrelu(0.2);
        let h = instance_norm(&self.c4.forward(cx, &h), 1e-5).lrelu(0.2);
        Ok(self.out.forward(cx, &h))
    }
}
