//! Co-modulated generator G.
//!
//! A mask image is encoded to a 4x4 bottleneck whose flattening (with
//! dropout at train time) is the conditional style; a small mapping
//! network turns noise into the stochastic style; their concatenation
//! feeds one learned affine per styled convolution, and another affine
//! whose reshaped output is the first synthesis-block input. Synthesis
//! runs demodulated 3x3 convolutions with nearest upsampling, adding
//! projected encoder skips at matching resolutions, and ends in a 1x1
//! convolution squashed to [-1, 1].

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::nn::{dropout, Conv2d, Ctx, Linear, ModConv2d};
use crate::tensor::{ParamId, Scope, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ComodConfig {
    /// Square input/output size; power of two, at least 16.
    pub image_size: usize,
    /// Channel width at the full resolution; doubles per halving.
    pub base_channels: usize,
    /// Channel cap for the deep levels.
    pub max_channels: usize,
    /// Noise vector dimension.
    pub z_dim: usize,
    /// Stochastic style dimension out of the mapping network.
    pub w_dim: usize,
    /// Mapping network depth.
    pub mapping_depth: usize,
    /// Dropout rate on the flattened conditional style at train time.
    pub dropout: f32,
}

impl Default for ComodConfig {
    fn default() -> Self {
        ComodConfig {
            image_size: 64,
            base_channels: 16,
            max_channels: 64,
            z_dim: 512,
            w_dim: 512,
            mapping_depth: 2,
            dropout: 0.5,
        }
    }
}

impl ComodConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !self.image_size.is_power_of_two() || self.image_size < 16 {
            return Err(ModelError::NotPowerOfTwo(self.image_size, self.image_size));
        }
        if self.base_channels == 0 || self.max_channels < self.base_channels {
            return Err(ModelError::InvalidConfig(
                "need 0 < base_channels <= max_channels".into(),
            ));
        }
        if self.z_dim == 0 || self.w_dim == 0 || self.mapping_depth == 0 {
            return Err(ModelError::InvalidConfig("z_dim, w_dim, mapping_depth must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidConfig("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Channel width at a given resolution.
    fn channels(&self, res: usize) -> usize {
        (self.base_channels * (self.image_size / res)).min(self.max_channels)
    }

    /// Conditional style dimension: the flattened 4x4 bottleneck.
    pub fn cond_dim(&self) -> usize {
        16 * self.channels(4)
    }

    /// Dimension of the concatenated [e; w] style fed to the affines.
    pub fn style_dim(&self) -> usize {
        self.cond_dim() + self.w_dim
    }
}

struct EncBlock {
    keep: Conv2d,
    down: Conv2d,
}

struct SynthBlock {
    conv1: ModConv2d,
    conv2: ModConv2d,
    skip_proj: Conv2d,
}

pub struct Generator {
    cfg: ComodConfig,
    from_rgb: Conv2d,
    enc: Vec<EncBlock>,
    mapping: Vec<Linear>,
    fc_in: Linear,
    first: ModConv2d,
    blocks: Vec<SynthBlock>,
    to_rgb: Conv2d,
}

impl Generator {
    pub fn new(cfg: &ComodConfig, sc: &mut Scope, rng: &mut ChaCha8Rng) -> Result<Generator, ModelError> {
        cfg.validate()?;
        let s = cfg.image_size;
        let from_rgb = Conv2d::new(sc, "from_rgb", 3, cfg.channels(s), 3, 1, 1, true, rng);
        let mut enc = Vec::new();
        let mut res = s;
        let mut level = 0usize;
        while res > 4 {
            let mut esc = sc.child(&format!("enc{level}"));
            let keep =
                Conv2d::new(&mut esc, "keep", cfg.channels(res), cfg.channels(res), 3, 1, 1, true, rng);
            let down = Conv2d::new(
                &mut esc,
                "down",
                cfg.channels(res),
                cfg.channels(res / 2),
                3,
                2,
                1,
                true,
                rng,
            );
            enc.push(EncBlock { keep, down });
            res /= 2;
            level += 1;
        }
        let mut mapping = Vec::new();
        for d in 0..cfg.mapping_depth {
            let cin = if d == 0 { cfg.z_dim } else { cfg.w_dim };
            mapping.push(Linear::new(&mut sc.child("map"), &format!("fc{d}"), cin, cfg.w_dim, true, rng));
        }
        let style_dim = cfg.style_dim();
        let fc_in = Linear::new(sc, "fc_in", style_dim, 16 * cfg.channels(4), true, rng);
        let first = ModConv2d::new(sc, "first", cfg.channels(4), cfg.channels(4), 3, style_dim, rng);
        let mut blocks = Vec::new();
        let mut res = 8usize;
        let mut bi = 0usize;
        while res <= s {
            let mut bsc = sc.child(&format!("syn{bi}"));
            let cin = cfg.channels(res / 2);
            let cout = cfg.channels(res);
            let conv1 = ModConv2d::new(&mut bsc, "conv1", cin, cout, 3, style_dim, rng);
            let conv2 = ModConv2d::new(&mut bsc, "conv2", cout, cout, 3, style_dim, rng);
            let skip_proj = Conv2d::new(&mut bsc, "skip", cout, cout, 1, 1, 0, false, rng);
            blocks.push(SynthBlock { conv1, conv2, skip_proj });
            res *= 2;
            bi += 1;
        }
        let to_rgb = Conv2d::new(sc, "to_rgb", cfg.channels(s), 3, 1, 1, 0, true, rng);
        Ok(Generator { cfg: cfg.clone(), from_rgb, enc, mapping, fc_in, first, blocks, to_rgb })
    }

    pub fn config(&self) -> &ComodConfig {
        &self.cfg
    }

    fn check_image(&self, x: &Tensor) -> Result<(), ModelError> {
        let sh = x.shape();
        let want = vec![sh.first().copied().unwrap_or(0), 3, self.cfg.image_size, self.cfg.image_size];
        if sh.len() != 4 || sh[2] != sh[3] || !sh[2].is_power_of_two() || sh[2] < 16 {
            return Err(ModelError::NotPowerOfTwo(
                sh.get(2).copied().unwrap_or(0),
                sh.get(3).copied().unwrap_or(0),
            ));
        }
        if sh != want {
            return Err(ModelError::ShapeMismatch { got: sh, want });
        }
        Ok(())
    }

    /// Encode a mask image batch into the conditional style (flattened
    /// 4x4 bottleneck, dropout at train time) plus the per-resolution
    /// skip features, returned from full resolution downward.
    pub fn encode(&self, cx: &mut Ctx, x: &Tensor) -> Result<(Tensor, Vec<Tensor>), ModelError> {
        self.check_image(x)?;
        let b = x.shape()[0];
        let mut h = self.from_rgb.forward(cx, x).lrelu(0.2);
        let mut skips = Vec::with_capacity(self.enc.len());
        for blk in &self.enc {
            h = blk.keep.forward(cx, &h).lrelu(0.2);
            skips.push(h.clone());
            h = blk.down.forward(cx, &h).lrelu(0.2);
        }
        let e = h.reshape(&[b, self.cfg.cond_dim()]);
        let e = dropout(cx, &e, self.cfg.dropout);
        Ok((e, skips))
    }

    /// Map noise to the stochastic style.
    pub fn map_noise(&self, cx: &Ctx, z: &Tensor) -> Result<Tensor, ModelError> {
        let sh = z.shape();
        if sh.len() != 2 || sh[1] != self.cfg.z_dim {
            return Err(ModelError::ShapeMismatch {
                got: sh.clone(),
                want: vec![sh.first().copied().unwrap_or(0), self.cfg.z_dim],
            });
        }
        let mut w = z.clone();
        for fc in &self.mapping {
            w = fc.forward(cx, &w).lrelu(0.2);
        }
        Ok(w)
    }

    /// Full generator pass: x and z to a [-1, 1] image of x's size.
    pub fn generate(&self, cx: &mut Ctx, x: &Tensor, z: &Tensor) -> Result<Tensor, ModelError> {
        let (e, skips) = self.encode(cx, x)?;
        let w = self.map_noise(cx, z)?;
        let style = cx.g.concat(&[e, w], 1);
        let b = x.shape()[0];
        let c4 = self.cfg.channels(4);
        let mut h = self.fc_in.forward(cx, &style).reshape(&[b, c4, 4, 4]);
        h = self.first.forward(cx, &h, &style).lrelu(0.2);
        for (i, blk) in self.blocks.iter().enumerate() {
            h = h.up_nearest_2x();
            h = blk.conv1.forward(cx, &h, &style).lrelu(0.2);
            h = blk.conv2.forward(cx, &h, &style).lrelu(0.2);
            let skip = &skips[skips.len() - 1 - i];
            h = h.add(&blk.skip_proj.forward(cx, skip));
        }
        Ok(self.to_rgb.forward(cx, &h).tanh())
    }
}

/// Ids of every generator parameter, via the name prefix the scope gave
/// it at construction.
pub fn param_group(store: &crate::tensor::ParamStore, prefix: &str) -> Vec<ParamId> {
    store.ids_with_prefix(prefix)
}
