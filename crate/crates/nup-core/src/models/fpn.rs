//! Histology-to-mask network: a residual backbone with a feature pyramid
//! feeds two heads. A dense decode head fuses the pyramid at quarter
//! resolution and emits the three-channel mask image used by the cycle,
//! and a region-based instance branch trains detection and per-instance
//! masks with five loss terms (anchor classification, anchor regression,
//! box classification, box regression, mask).
//!
//! Both heads run on the same backbone and pyramid parameters; nothing is
//! duplicated, so instance supervision shapes the features the decode head
//! consumes.
//!
//! Loss conventions, fixed here and relied on by the training loop:
//! anchor and box classification are means over the sampled candidates,
//! the two box regressions are smooth-L1 sums normalized by the number of
//! sampled candidates (not the number of positives), and the mask term is
//! a mean over predicted mask logits of foreground rois. Images without
//! instances train the anchor classifier toward all-negative and
//! contribute exact zeros for the roi terms.

use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::nn::{instance_norm, Conv2d, Ctx, GroupNorm, Linear};
use crate::synth::InstanceAnnotationSet;
use crate::tensor::{Graph, Roi, RoiAlignGeom, Scope, Tensor};

/// Upsampling used when fusing pyramid levels to a common resolution.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Interp {
    Nearest,
    Bilinear,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct FpnConfig {
    pub stem_channels: usize,
    pub stage_channels: [usize; 5],
    pub fpn_channels: usize,
    pub gn_groups: usize,
    pub interp: Interp,
    /// Two-way foreground/background roi classifier (and a single mask
    /// channel) when set; per-category heads otherwise.
    pub class_agnostic: bool,
    pub num_classes: usize,
    pub anchor_sizes: [f32; 5],
    pub anchor_ratios: Vec<f32>,
    pub rpn_pos_iou: f32,
    pub rpn_neg_iou: f32,
    pub rpn_batch: usize,
    pub rpn_pos_fraction: f32,
    pub pre_nms_top: usize,
    pub proposal_nms_iou: f32,
    pub post_nms_top: usize,
    pub roi_fg_iou: f32,
    pub roi_batch: usize,
    pub roi_fg_fraction: f32,
    pub roi_out: usize,
    pub mask_roi_out: usize,
    pub head_dim: usize,
    pub score_thresh: f32,
    pub detect_nms_iou: f32,
    pub detect_top: usize,
}

impl Default for FpnConfig {
    fn default() -> Self {
        FpnConfig {
            stem_channels: 16,
            stage_channels: [24, 32, 48, 64, 64],
            fpn_channels: 48,
            gn_groups: 8,
            interp: Interp::Bilinear,
            class_agnostic: true,
            num_classes: 2,
            anchor_sizes: [8.0, 16.0, 32.0, 64.0, 128.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            rpn_batch: 64,
            rpn_pos_fraction: 0.5,
            pre_nms_top: 64,
            proposal_nms_iou: 0.7,
            post_nms_top: 32,
            roi_fg_iou: 0.5,
            roi_batch: 16,
            roi_fg_fraction: 0.25,
            roi_out: 7,
            mask_roi_out: 7,
            head_dim: 128,
            score_thresh: 0.5,
            detect_nms_iou: 0.5,
            detect_top: 64,
        }
    }
}

impl FpnConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.stem_channels % self.gn_groups != 0
            || self.fpn_channels % self.gn_groups != 0
            || self.stage_channels.iter().any(|c| c % self.gn_groups != 0)
        {
            return Err(ModelError::InvalidConfig(
                "channel widths must be divisible by the group norm group count".into(),
            ));
        }
        if self.anchor_ratios.is_empty() {
            return Err(ModelError::InvalidConfig("need at least one anchor ratio".into()));
        }
        if !(0.0..=1.0).contains(&self.rpn_pos_fraction) || !(0.0..=1.0).contains(&self.roi_fg_fraction) {
            return Err(ModelError::InvalidConfig("sampling fractions must lie in [0, 1]".into()));
        }
        if self.rpn_batch == 0 || self.roi_batch == 0 || self.roi_out == 0 || self.mask_roi_out == 0 {
            return Err(ModelError::InvalidConfig("sampling sizes must be positive".into()));
        }
        if self.num_classes == 0 {
            return Err(ModelError::InvalidConfig("need at least one instance class".into()));
        }
        Ok(())
    }

    fn cls_ways(&self) -> usize {
        if self.class_agnostic {
            2
        } else {
            1 + self.num_classes
        }
    }

    fn mask_channels(&self) -> usize {
        if self.class_agnostic {
            1
        } else {
            self.num_classes
        }
    }
}

/// Ground truth for one image: tight boxes, category codes, and full-image
/// boolean masks, one entry per instance.
#[derive(Clone, Debug, Default)]
pub struct SegTargets {
    pub boxes: Vec<[f32; 4]>,
    pub classes: Vec<u8>,
    pub masks: Vec<Vec<bool>>,
    pub height: usize,
    pub width: usize,
}

impl SegTargets {
    pub fn from_annotations(ann: &InstanceAnnotationSet) -> SegTargets {
        let mut t = SegTargets {
            boxes: Vec::with_capacity(ann.instances.len()),
            classes: Vec::with_capacity(ann.instances.len()),
            masks: Vec::with_capacity(ann.instances.len()),
            height: ann.height,
            width: ann.width,
        };
        for inst in &ann.instances {
            let [x, y, w, h] = inst.bbox;
            t.boxes.push([x as f32, y as f32, (x + w) as f32, (y + h) as f32]);
            t.classes.push(inst.category.code());
            t.masks.push(inst.mask.clone());
        }
        t
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// The five instance-branch loss terms, each a scalar tensor.
pub struct SegComponents {
    pub anchor_cls: Tensor,
    pub anchor_reg: Tensor,
    pub bbox_cls: Tensor,
    pub bbox_reg: Tensor,
    pub mask: Tensor,
}

impl SegComponents {
    /// Unweighted sum of all five terms.
    pub fn total(&self) -> Tensor {
        self.anchor_cls
            .add(&self.anchor_reg)
            .add(&self.bbox_cls)
            .add(&self.bbox_reg)
            .add(&self.mask)
    }
}

/// Raw numbers behind one image's loss terms, for recomputing them
/// externally.
#[derive(Clone, Debug, Default)]
pub struct ImageDebug {
    pub sampled_logits: Vec<f32>,
    pub sampled_labels: Vec<f32>,
    pub num_sampled: usize,
    pub rpn_reg_pred: Vec<[f32; 4]>,
    pub rpn_reg_tgt: Vec<[f32; 4]>,
    pub roi_cls_logits: Vec<Vec<f32>>,
    pub roi_labels: Vec<usize>,
    pub num_rois: usize,
    pub roi_reg_pred: Vec<[f32; 4]>,
    pub roi_reg_tgt: Vec<[f32; 4]>,
    pub mask_logits: Vec<f32>,
    pub mask_targets: Vec<f32>,
}

#[derive(Clone, Debug, Default)]
pub struct SegDebug {
    pub images: Vec<ImageDebug>,
}

/// Inference output for one image, instances in descending score order.
#[derive(Clone, Debug, Default)]
pub struct Detections {
    pub boxes: Vec<[f32; 4]>,
    pub scores: Vec<f32>,
    pub classes: Vec<u8>,
    pub masks: Vec<Vec<bool>>,
}

struct Stage {
    conv1: Conv2d,
    gn1: GroupNorm,
    conv2: Conv2d,
    gn2: GroupNorm,
    skip: Conv2d,
}

impl Stage {
    fn new(sc: &mut Scope, cin: usize, cout: usize, groups: usize, rng: &mut ChaCha8Rng) -> Stage {
        Stage {
            conv1: Conv2d::new(sc, "conv1", cin, cout, 3, 2, 1, false, rng),
            gn1: GroupNorm::new(sc, "gn1", cout, groups, rng),
            conv2: Conv2d::new(sc, "conv2", cout, cout, 3, 1, 1, false, rng),
            gn2: GroupNorm::new(sc, "gn2", cout, groups, rng),
            skip: Conv2d::new(sc, "skip", cin, cout, 1, 2, 0, false, rng),
        }
    }

    fn forward(&self, cx: &Ctx, x: &Tensor) -> Tensor {
        let h = self.gn1.forward(cx, &self.conv1.forward(cx, x)).relu();
        let h = self.gn2.forward(cx, &self.conv2.forward(cx, &h));
        h.add(&self.skip.forward(cx, x)).relu()
    }
}

/// Upsample pyramid maps to a shared resolution and sum them.
pub fn fuse_pyramid(ps: &[Tensor], target_hw: (usize, usize), interp: Interp) -> Tensor {
    let (th, tw) = target_hw;
    let mut acc: Option<Tensor> = None;
    for p in ps {
        let sh = p.shape();
        let mut up = p.clone();
        match interp {
            Interp::Nearest => {
                let (h, w) = (sh[2], sh[3]);
                assert!(
                    th % h == 0 && tw % w == 0 && th / h == tw / w,
                    "nearest fusion needs one power-of-two factor per level"
                );
                let mut have = h;
                while have < th {
                    up = up.up_nearest_2x();
                    have *= 2;
                }
            }
            Interp::Bilinear => {
                if (sh[2], sh[3]) != (th, tw) {
                    up = up.resize_bilinear(th, tw);
                }
            }
        }
        acc = Some(match acc {
            None => up,
            Some(a) => a.add(&up),
        });
    }
    acc.expect("fuse_pyramid needs at least one level")
}

/// Anchor boxes for every pyramid cell, with their flattened indices into
/// the concatenated rpn logit and delta vectors.
struct AnchorLayout {
    boxes: Vec<[f32; 4]>,
    level_of: Vec<usize>,
    cls_idx: Vec<usize>,
    reg_idx: Vec<[usize; 4]>,
}

pub struct Segmenter {
    cfg: FpnConfig,
    stem: Conv2d,
    stem_gn: GroupNorm,
    stages: Vec<Stage>,
    lateral: Vec<Conv2d>,
    smooth: Vec<Conv2d>,
    smooth_gn: Vec<GroupNorm>,
    dec1: Conv2d,
    dec2: Conv2d,
    dec_out: Conv2d,
    rpn_conv: Conv2d,
    rpn_cls: Conv2d,
    rpn_reg: Conv2d,
    box_fc1: Linear,
    box_fc2: Linear,
    box_cls: Linear,
    box_reg: Linear,
    mask_conv1: Conv2d,
    mask_gn1: GroupNorm,
    mask_conv2: Conv2d,
    mask_gn2: GroupNorm,
    mask_out: Conv2d,
}

impl Segmenter {
    pub fn new(cfg: &FpnConfig, sc: &mut Scope, rng: &mut ChaCha8Rng) -> Result<Segmenter, ModelError> {
        cfg.validate()?;
        let f = cfg.fpn_channels;
        let groups = cfg.gn_groups;
        let a = cfg.anchor_ratios.len();
        let stem = Conv2d::new(sc, "stem", 3, cfg.stem_channels, 3, 2, 1, false, rng);
        let stem_gn = GroupNorm::new(sc, "stem_gn", cfg.stem_channels, groups, rng);
        let mut stages = Vec::new();
        let mut cin = cfg.stem_channels;
        for (i, &cout) in cfg.stage_channels.iter().enumerate() {
            let mut ssc = sc.child(&format!("stage{i}"));
            stages.push(Stage::new(&mut ssc, cin, cout, groups, rng));
            cin = cout;
        }
        let mut lateral = Vec::new();
        let mut smooth = Vec::new();
        let mut smooth_gn = Vec::new();
        {
            let mut fsc = sc.child("fpn");
            for (i, &c) in cfg.stage_channels.iter().enumerate() {
                lateral.push(Conv2d::new(&mut fsc, &format!("lat{i}"), c, f, 1, 1, 0, true, rng));
                smooth.push(Conv2d::new(&mut fsc, &format!("smooth{i}"), f, f, 3, 1, 1, false, rng));
                smooth_gn.push(GroupNorm::new(&mut fsc, &format!("gn{i}"), f, groups, rng));
            }
        }
        let mut dsc = sc.child("decode");
        let dec1 = Conv2d::new(&mut dsc, "conv1", f, f, 3, 1, 1, true, rng);
        let dec2 = Conv2d::new(&mut dsc, "conv2", f, f, 3, 1, 1, true, rng);
        let dec_out = Conv2d::new(&mut dsc, "out", f, 3, 3, 1, 1, true, rng);
        drop(dsc);
        let mut rsc = sc.child("rpn");
        let rpn_conv = Conv2d::new(&mut rsc, "conv", f, f, 3, 1, 1, true, rng);
        let rpn_cls = Conv2d::new(&mut rsc, "cls", f, a, 1, 1, 0, true, rng);
        let rpn_reg = Conv2d::new(&mut rsc, "reg", f, 4 * a, 1, 1, 0, true, rng);
        drop(rsc);
        let mut bsc = sc.child("box");
        let box_fc1 = Linear::new(&mut bsc, "fc1", f * cfg.roi_out * cfg.roi_out, cfg.head_dim, true, rng);
        let box_fc2 = Linear::new(&mut bsc, "fc2", cfg.head_dim, cfg.head_dim, true, rng);
        let box_cls = Linear::new(&mut bsc, "cls", cfg.head_dim, cfg.cls_ways(), true, rng);
        let box_reg = Linear::new(&mut bsc, "reg", cfg.head_dim, 4, true, rng);
        drop(bsc);
        let mut msc = sc.child("mask");
        let mask_conv1 = Conv2d::new(&mut msc, "conv1", f, f, 3, 1, 1, false, rng);
        let mask_gn1 = GroupNorm::new(&mut msc, "gn1", f, groups, rng);
        let mask_conv2 = Conv2d::new(&mut msc, "conv2", f, f, 3, 1, 1, false, rng);
        let mask_gn2 = GroupNorm::new(&mut msc, "gn2", f, groups, rng);
        let mask_out = Conv2d::new(&mut msc, "out", f, cfg.mask_channels(), 3, 1, 1, true, rng);
        drop(msc);
        Ok(Segmenter {
            cfg: cfg.clone(),
            stem,
            stem_gn,
            stages,
            lateral,
            smooth,
            smooth_gn,
            dec1,
            dec2,
            dec_out,
            rpn_conv,
            rpn_cls,
            rpn_reg,
            box_fc1,
            box_fc2,
            box_cls,
            box_reg,
            mask_conv1,
            mask_gn1,
            mask_conv2,
            mask_gn2,
            mask_out,
        })
    }

    pub fn config(&self) -> &FpnConfig {
        &self.cfg
    }

    fn check_image(&self, img: &Tensor) -> Result<(usize, usize, usize), ModelError> {
        let sh = img.shape();
        if sh.len() != 4 || sh[1] != 3 {
            return Err(ModelError::ShapeMismatch {
                got: sh.clone(),
                want: vec![sh.first().copied().unwrap_or(0), 3, 64, 64],
            });
        }
        let (h, w) = (sh[2], sh[3]);
        if h == 0 || w == 0 || h % 64 != 0 || w % 64 != 0 {
            return Err(ModelError::NotDivisible64(h, w));
        }
        Ok((sh[0], h, w))
    }

    /// Backbone maps at strides 4, 8, 16, 32, 64.
    pub fn backbone(&self, cx: &Ctx, img: &Tensor) -> Result<Vec<Tensor>, ModelError> {
        self.check_image(img)?;
        let mut h = self.stem_gn.forward(cx, &self.stem.forward(cx, img)).relu();
        let mut maps = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            h = stage.forward(cx, &h);
            maps.push(h.clone());
        }
        Ok(maps)
    }

    /// Pyramid maps at strides 4, 8, 16, 32, 64, all `fpn_channels` wide.
    pub fn pyramid(&self, cx: &Ctx, img: &Tensor) -> Result<Vec<Tensor>, ModelError> {
        let cs = self.backbone(cx, img)?;
        let n = cs.len();
        let mut merged: Vec<Option<Tensor>> = vec![None; n];
        let mut above: Option<Tensor> = None;
        for i in (0..n).rev() {
            let lat = self.lateral[i].forward(cx, &cs[i]);
            let m = match &above {
                None => lat,
                Some(top) => {
                    let sh = cs[i].shape();
                    let up = match self.cfg.interp {
                        Interp::Nearest => top.up_nearest_2x(),
                        Interp::Bilinear => top.resize_bilinear(sh[2], sh[3]),
                    };
                    lat.add(&up)
                }
            };
            above = Some(m.clone());
            merged[i] = Some(m);
        }
        Ok(merged
            .into_iter()
            .enumerate()
            .map(|(i, m)| {
                let m = m.expect("level filled");
                self.smooth_gn[i].forward(cx, &self.smooth[i].forward(cx, &m))
            })
            .collect())
    }

    /// Dense three-channel mask image in [-1, 1], same size as the input.
    pub fn decode_mask(&self, cx: &Ctx, img: &Tensor) -> Result<Tensor, ModelError> {
        let (_b, h, w) = self.check_image(img)?;
        let ps = self.pyramid(cx, img)?;
        let fused = fuse_pyramid(&ps, (h / 4, w / 4), self.cfg.interp);
        let d = instance_norm(&self.dec1.forward(cx, &fused), 1e-5).relu().up_nearest_2x();
        let d = instance_norm(&self.dec2.forward(cx, &d), 1e-5).relu().up_nearest_2x();
        Ok(self.dec_out.forward(cx, &d).tanh())
    }

    fn build_anchors(&self, level_hw: &[(usize, usize)]) -> AnchorLayout {
        let ratios = &self.cfg.anchor_ratios;
        let mut layout = AnchorLayout {
            boxes: Vec::new(),
            level_of: Vec::new(),
            cls_idx: Vec::new(),
            reg_idx: Vec::new(),
        };
        let mut cls_off = 0usize;
        let mut reg_off = 0usize;
        for (lvl, &(h, w)) in level_hw.iter().enumerate() {
            let stride = (4usize << lvl) as f32;
            let hw = h * w;
            let size = self.cfg.anchor_sizes[lvl];
            for (ai, &r) in ratios.iter().enumerate() {
                let aw = size / r.sqrt();
                let ah = size * r.sqrt();
                for i in 0..h {
                    for j in 0..w {
                        let cx = (j as f32 + 0.5) * stride;
                        let cy = (i as f32 + 0.5) * stride;
                        layout.boxes.push([cx - aw / 2.0, cy - ah / 2.0, cx + aw / 2.0, cy + ah / 2.0]);
                        layout.level_of.push(lvl);
                        layout.cls_idx.push(cls_off + ai * hw + i * w + j);
                        let base = reg_off + (ai * 4) * hw + i * w + j;
                        layout.reg_idx.push([base, base + hw, base + 2 * hw, base + 3 * hw]);
                    }
                }
            }
            cls_off += ratios.len() * hw;
            reg_off += 4 * ratios.len() * hw;
        }
        layout
    }

    /// Train-time forward of the instance branch. Averages each loss term
    /// over the batch.
    pub fn instance_forward(
        &self,
        cx: &mut Ctx,
        img: &Tensor,
        targets: &[SegTargets],
    ) -> Result<SegComponents, ModelError> {
        Ok(self.instance_forward_debug(cx, img, targets)?.0)
    }

    pub fn instance_forward_debug(
        &self,
        cx: &mut Ctx,
        img: &Tensor,
        targets: &[SegTargets],
    ) -> Result<(SegComponents, SegDebug), ModelError> {
        let (b, h, w) = self.check_image(img)?;
        if targets.len() != b {
            return Err(ModelError::InvalidConfig(format!(
                "batch of {b} images with {} target sets",
                targets.len()
            )));
        }
        let ps = self.pyramid(cx, img)?;
        let level_hw: Vec<(usize, usize)> =
            ps.iter().map(|p| (p.shape()[2], p.shape()[3])).collect();
        let layout = self.build_anchors(&level_hw);
        let (cls_maps, reg_maps): (Vec<Tensor>, Vec<Tensor>) = ps
            .iter()
            .map(|p| {
                let t = self.rpn_conv.forward(cx, p).relu();
                (self.rpn_cls.forward(cx, &t), self.rpn_reg.forward(cx, &t))
            })
            .unzip();

        let g = cx.g.clone();
        let zero = || g.scalar(0.0);
        let mut anchor_cls_acc = zero();
        let mut anchor_reg_acc = zero();
        let mut bbox_cls_acc = zero();
        let mut bbox_reg_acc = zero();
        let mut mask_acc = zero();
        let mut debug = SegDebug::default();

        for bi in 0..b {
            let mut dbg = ImageDebug::default();
            let tgt = &targets[bi];
            let cls_flat = flatten_image_maps(&g, &cls_maps, bi);
            let reg_flat = flatten_image_maps(&g, &reg_maps, bi);
            let cls_vals = cls_flat.value();
            let cls_vals = cls_vals.as_slice().expect("contiguous logits");
            let reg_vals = reg_flat.value();
            let reg_vals = reg_vals.as_slice().expect("contiguous deltas");

            // Anchor assignment and sampling.
            let (labels, matched) = match_anchors(
                &layout.boxes,
                &tgt.boxes,
                self.cfg.rpn_pos_iou,
                self.cfg.rpn_neg_iou,
            );
            let pos_pool: Vec<usize> =
                (0..labels.len()).filter(|&i| labels[i] == 1).collect();
            let neg_pool: Vec<usize> =
                (0..labels.len()).filter(|&i| labels[i] == 0).collect();
            let pos_want = (self.cfg.rpn_batch as f32 * self.cfg.rpn_pos_fraction) as usize;
            let pos_take = sample_take(cx.rng, pos_pool, pos_want);
            let neg_take = sample_take(cx.rng, neg_pool, self.cfg.rpn_batch - pos_take.len());
            let num_sampled = pos_take.len() + neg_take.len();

            let mut sample_idx: Vec<usize> = Vec::with_capacity(num_sampled);
            let mut sample_lab: Vec<f32> = Vec::with_capacity(num_sampled);
            for &i in &pos_take {
                sample_idx.push(layout.cls_idx[i]);
                sample_lab.push(1.0);
            }
            for &i in &neg_take {
                sample_idx.push(layout.cls_idx[i]);
                sample_lab.push(0.0);
            }
            let picked = cls_flat.index_select0(Rc::new(sample_idx.clone()));
            let lab_t = g.constant(ArrayD::from_shape_vec(IxDyn(&[num_sampled]), sample_lab.clone()).unwrap());
            anchor_cls_acc = anchor_cls_acc.add(&bce_with_logits(&picked, &lab_t).mean_all());
            dbg.sampled_logits = sample_idx.iter().map(|&i| cls_vals[i]).collect();
            dbg.sampled_labels = sample_lab;
            dbg.num_sampled = num_sampled;

            if pos_take.is_empty() {
                anchor_reg_acc = anchor_reg_acc.add(&zero());
            } else {
                let mut reg_gather = Vec::with_capacity(pos_take.len() * 4);
                let mut reg_tgts = Vec::with_capacity(pos_take.len() * 4);
                for &i in &pos_take {
                    let enc = encode_box(&layout.boxes[i], &tgt.boxes[matched[i]]);
                    for d in 0..4 {
                        reg_gather.push(layout.reg_idx[i][d]);
                        reg_tgts.push(enc[d]);
                    }
                    dbg.rpn_reg_pred.push([
                        reg_vals[layout.reg_idx[i][0]],
                        reg_vals[layout.reg_idx[i][1]],
                        reg_vals[layout.reg_idx[i][2]],
                        reg_vals[layout.reg_idx[i][3]],
                    ]);
                    dbg.rpn_reg_tgt.push(enc);
                }
                let pred = reg_flat
                    .index_select0(Rc::new(reg_gather))
                    .reshape(&[pos_take.len(), 4]);
                let tgt_t = g.constant(
                    ArrayD::from_shape_vec(IxDyn(&[pos_take.len(), 4]), reg_tgts).unwrap(),
                );
                let term = smooth_l1(&g, &pred.sub(&tgt_t))
                    .sum_all()
                    .mul_scalar(1.0 / num_sampled as f32);
                anchor_reg_acc = anchor_reg_acc.add(&term);
            }

            // Proposals (not differentiated through), then roi heads.
            if tgt.is_empty() {
                bbox_cls_acc = bbox_cls_acc.add(&zero());
                bbox_reg_acc = bbox_reg_acc.add(&zero());
                mask_acc = mask_acc.add(&zero());
                debug.images.push(dbg);
                continue;
            }
            let mut proposals = self.make_proposals(&layout, cls_vals, reg_vals, h, w);
            proposals.extend(tgt.boxes.iter().copied());

            // Label and sample rois.
            let mut fg_pool = Vec::new();
            let mut bg_pool = Vec::new();
            let mut roi_match = vec![0usize; proposals.len()];
            for (pi, pbox) in proposals.iter().enumerate() {
                let mut best = 0.0f32;
                let mut best_gt = 0usize;
                for (gi, gbox) in tgt.boxes.iter().enumerate() {
                    let v = iou(pbox, gbox);
                    if v > best {
                        best = v;
                        best_gt = gi;
                    }
                }
                roi_match[pi] = best_gt;
                if best >= self.cfg.roi_fg_iou {
                    fg_pool.push(pi);
                } else {
                    bg_pool.push(pi);
                }
            }
            let fg_want = (self.cfg.roi_batch as f32 * self.cfg.roi_fg_fraction) as usize;
            let fg_take = sample_take(cx.rng, fg_pool, fg_want);
            let bg_take = sample_take(cx.rng, bg_pool, self.cfg.roi_batch - fg_take.len());
            let num_rois = fg_take.len() + bg_take.len();
            let num_fg = fg_take.len();
            let mut rois: Vec<usize> = fg_take.clone();
            rois.extend(bg_take.iter().copied());

            let mut labels = Vec::with_capacity(num_rois);
            for (k, &pi) in rois.iter().enumerate() {
                if k < num_fg {
                    let cls = if self.cfg.class_agnostic {
                        1
                    } else {
                        tgt.classes[roi_match[pi]] as usize
                    };
                    labels.push(cls);
                } else {
                    labels.push(0);
                }
            }

            // Box head.
            let mut rows = Vec::with_capacity(num_rois);
            for &pi in &rois {
                rows.push(self.roi_features(&ps, bi, &proposals[pi], self.cfg.roi_out));
            }
            let feats = g
                .concat(&rows, 0)
                .reshape(&[num_rois, self.cfg.fpn_channels * self.cfg.roi_out * self.cfg.roi_out]);
            let hbox = self.box_fc1.forward(cx, &feats).relu();
            let hbox = self.box_fc2.forward(cx, &hbox).relu();
            let cls_logits = self.box_cls.forward(cx, &hbox);
            let reg_out = self.box_reg.forward(cx, &hbox);

            bbox_cls_acc = bbox_cls_acc.add(&cross_entropy(&g, &cls_logits, &labels));
            {
                let lv = cls_logits.value();
                let ways = self.cfg.cls_ways();
                for k in 0..num_rois {
                    dbg.roi_cls_logits
                        .push((0..ways).map(|c| lv[[k, c]]).collect());
                }
                dbg.roi_labels = labels.clone();
                dbg.num_rois = num_rois;
            }

            if num_fg == 0 {
                bbox_reg_acc = bbox_reg_acc.add(&zero());
                mask_acc = mask_acc.add(&zero());
                debug.images.push(dbg);
                continue;
            }

            let mut reg_tgts = Vec::with_capacity(num_fg * 4);
            for (k, &pi) in rois[..num_fg].iter().enumerate() {
                let enc = encode_box(&proposals[pi], &tgt.boxes[roi_match[pi]]);
                reg_tgts.extend_from_slice(&enc);
                let rv = reg_out.value();
                dbg.roi_reg_pred.push([rv[[k, 0]], rv[[k, 1]], rv[[k, 2]], rv[[k, 3]]]);
                dbg.roi_reg_tgt.push(enc);
            }
            let fg_pred = reg_out.slice(&[(0, num_fg), (0, 4)]);
            let tgt_t =
                g.constant(ArrayD::from_shape_vec(IxDyn(&[num_fg, 4]), reg_tgts).unwrap());
            let term = smooth_l1(&g, &fg_pred.sub(&tgt_t))
                .sum_all()
                .mul_scalar(1.0 / num_rois as f32);
            bbox_reg_acc = bbox_reg_acc.add(&term);

            // Mask head on foreground rois.
            let m = 2 * self.cfg.mask_roi_out;
            let mut mrows = Vec::with_capacity(num_fg);
            for &pi in &rois[..num_fg] {
                mrows.push(self.roi_features(&ps, bi, &proposals[pi], self.cfg.mask_roi_out));
            }
            let mfeat = g.concat(&mrows, 0);
            let mh = self.mask_gn1.forward(cx, &self.mask_conv1.forward(cx, &mfeat)).relu();
            let mh = self.mask_gn2.forward(cx, &self.mask_conv2.forward(cx, &mh)).relu();
            let mlogits = self.mask_out.forward(cx, &mh.up_nearest_2x());
            let mlogits = if self.cfg.class_agnostic {
                mlogits.slice(&[(0, num_fg), (0, 1), (0, m), (0, m)])
            } else {
                let picked: Vec<Tensor> = (0..num_fg)
                    .map(|k| {
                        let c = labels[k] - 1;
                        mlogits.slice(&[(k, k + 1), (c, c + 1), (0, m), (0, m)])
                    })
                    .collect();
                g.concat(&picked, 0)
            };
            let mut tgt_vals = Vec::with_capacity(num_fg * m * m);
            for &pi in &rois[..num_fg] {
                let crop = self.mask_crop(&g, &tgt.masks[roi_match[pi]], h, w, &proposals[pi], m);
                tgt_vals.extend(crop);
            }
            let mtgt = g.constant(
                ArrayD::from_shape_vec(IxDyn(&[num_fg, 1, m, m]), tgt_vals.clone()).unwrap(),
            );
            mask_acc = mask_acc.add(&bce_with_logits(&mlogits, &mtgt).mean_all());
            dbg.mask_logits = mlogits.value().iter().copied().collect();
            dbg.mask_targets = tgt_vals;
            debug.images.push(dbg);
        }

        let inv_b = 1.0 / b as f32;
        Ok((
            SegComponents {
                anchor_cls: anchor_cls_acc.mul_scalar(inv_b),
                anchor_reg: anchor_reg_acc.mul_scalar(inv_b),
                bbox_cls: bbox_cls_acc.mul_scalar(inv_b),
                bbox_reg: bbox_reg_acc.mul_scalar(inv_b),
                mask: mask_acc.mul_scalar(inv_b),
            },
            debug,
        ))
    }

    fn make_proposals(
        &self,
        layout: &AnchorLayout,
        cls_vals: &[f32],
        reg_vals: &[f32],
        h: usize,
        w: usize,
    ) -> Vec<[f32; 4]> {
        let nlevels = self.cfg.anchor_sizes.len();
        let mut cands: Vec<(f32, [f32; 4])> = Vec::new();
        for lvl in 0..nlevels {
            let mut idx: Vec<usize> =
                (0..layout.boxes.len()).filter(|&i| layout.level_of[i] == lvl).collect();
            // total_cmp: a poisoned forward pass (NaN scores) must still
            // reach the loss so the trainer can fail with a diagnostic.
            idx.sort_by(|&a, &b| {
                let sa = cls_vals[layout.cls_idx[a]];
                let sb = cls_vals[layout.cls_idx[b]];
                sb.total_cmp(&sa).then(a.cmp(&b))
            });
            idx.truncate(self.cfg.pre_nms_top);
            for i in idx {
                let d = [
                    reg_vals[layout.reg_idx[i][0]],
                    reg_vals[layout.reg_idx[i][1]],
                    reg_vals[layout.reg_idx[i][2]],
                    reg_vals[layout.reg_idx[i][3]],
                ];
                let mut bx = decode_box(&layout.boxes[i], &d);
                clip_box(&mut bx, w as f32, h as f32);
                if bx[2] - bx[0] >= 1.0 && bx[3] - bx[1] >= 1.0 {
                    cands.push((sigmoid(cls_vals[layout.cls_idx[i]]), bx));
                }
            }
        }
        let keep = nms(&cands, self.cfg.proposal_nms_iou);
        keep.into_iter()
            .take(self.cfg.post_nms_top)
            .map(|i| cands[i].1)
            .collect()
    }

    /// RoIAlign one box out of its assigned pyramid level.
    fn roi_features(&self, ps: &[Tensor], batch: usize, bx: &[f32; 4], out: usize) -> Tensor {
        let lvl = assign_level(bx, ps.len());
        let stride = (4usize << lvl) as f32;
        let roi = Roi { batch, x1: bx[0], y1: bx[1], x2: bx[2], y2: bx[3] };
        let geom = RoiAlignGeom { out, spatial_scale: 1.0 / stride, sampling_ratio: 2 };
        ps[lvl].roi_align(Rc::new(vec![roi]), geom)
    }

    /// Binary mask crop for one roi, resampled to `m`x`m` and thresholded.
    fn mask_crop(
        &self,
        g: &Graph,
        mask: &[bool],
        h: usize,
        w: usize,
        bx: &[f32; 4],
        m: usize,
    ) -> Vec<f32> {
        let vals: Vec<f32> = mask.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        let full = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, 1, h, w]), vals).unwrap());
        let roi = Roi { batch: 0, x1: bx[0], y1: bx[1], x2: bx[2], y2: bx[3] };
        let geom = RoiAlignGeom { out: m, spatial_scale: 1.0, sampling_ratio: 2 };
        let crop = full.roi_align(Rc::new(vec![roi]), geom);
        crop.value().iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect()
    }

    /// Inference for a single image: score-thresholded, NMS-pruned
    /// instances with pasted full-image masks.
    pub fn detect(&self, cx: &Ctx, img: &Tensor) -> Result<Detections, ModelError> {
        let (b, h, w) = self.check_image(img)?;
        if b != 1 {
            return Err(ModelError::InvalidConfig("detect expects a single image".into()));
        }
        let ps = self.pyramid(cx, img)?;
        let level_hw: Vec<(usize, usize)> =
            ps.iter().map(|p| (p.shape()[2], p.shape()[3])).collect();
        let layout = self.build_anchors(&level_hw);
        let (cls_maps, reg_maps): (Vec<Tensor>, Vec<Tensor>) = ps
            .iter()
            .map(|p| {
                let t = self.rpn_conv.forward(cx, p).relu();
                (self.rpn_cls.forward(cx, &t), self.rpn_reg.forward(cx, &t))
            })
            .unzip();
        let g = cx.g.clone();
        let cls_flat = flatten_image_maps(&g, &cls_maps, 0);
        let reg_flat = flatten_image_maps(&g, &reg_maps, 0);
        let cls_vals = cls_flat.value();
        let cls_vals = cls_vals.as_slice().expect("contiguous logits");
        let reg_vals = reg_flat.value();
        let reg_vals = reg_vals.as_slice().expect("contiguous deltas");
        let proposals = self.make_proposals(&layout, cls_vals, reg_vals, h, w);
        if proposals.is_empty() {
            return Ok(Detections::default());
        }

        let mut rows = Vec::with_capacity(proposals.len());
        for bx in &proposals {
            rows.push(self.roi_features(&ps, 0, bx, self.cfg.roi_out));
        }
        let feats = g
            .concat(&rows, 0)
            .reshape(&[proposals.len(), self.cfg.fpn_channels * self.cfg.roi_out * self.cfg.roi_out]);
        let hbox = self.box_fc1.forward(cx, &feats).relu();
        let hbox = self.box_fc2.forward(cx, &hbox).relu();
        let cls_logits = self.box_cls.forward(cx, &hbox).value();
        let reg_out = self.box_reg.forward(cx, &hbox).value();

        let ways = self.cfg.cls_ways();
        let mut cands: Vec<(f32, [f32; 4], u8)> = Vec::new();
        for (pi, pbox) in proposals.iter().enumerate() {
            let logits: Vec<f32> = (0..ways).map(|c| cls_logits[[pi, c]]).collect();
            let mx = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let exps: Vec<f32> = logits.iter().map(|&v| (v - mx).exp()).collect();
            let z: f32 = exps.iter().sum();
            let (best_c, best_p) = exps
                .iter()
                .enumerate()
                .skip(1)
                .map(|(c, &e)| (c, e / z))
                .fold((0usize, 0.0f32), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
            if best_c == 0 || best_p < self.cfg.score_thresh {
                continue;
            }
            let d = [reg_out[[pi, 0]], reg_out[[pi, 1]], reg_out[[pi, 2]], reg_out[[pi, 3]]];
            let mut bx = decode_box(pbox, &d);
            clip_box(&mut bx, w as f32, h as f32);
            if bx[2] - bx[0] < 1.0 || bx[3] - bx[1] < 1.0 {
                continue;
            }
            let code = if self.cfg.class_agnostic { 1 } else { best_c as u8 };
            cands.push((best_p, bx, code));
        }
        let scored: Vec<(f32, [f32; 4])> = cands.iter().map(|c| (c.0, c.1)).collect();
        let keep = nms(&scored, self.cfg.detect_nms_iou);
        let keep: Vec<usize> = keep.into_iter().take(self.cfg.detect_top).collect();

        let mut det = Detections::default();
        let m = 2 * self.cfg.mask_roi_out;
        for &i in &keep {
            let (score, bx, code) = cands[i];
            let mfeat = self.roi_features(&ps, 0, &bx, self.cfg.mask_roi_out);
            let mh = self.mask_gn1.forward(cx, &self.mask_conv1.forward(cx, &mfeat)).relu();
            let mh = self.mask_gn2.forward(cx, &self.mask_conv2.forward(cx, &mh)).relu();
            let mlogits = self.mask_out.forward(cx, &mh.up_nearest_2x());
            let ch = if self.cfg.class_agnostic { 0 } else { code as usize - 1 };
            let probs = mlogits.slice(&[(0, 1), (ch, ch + 1), (0, m), (0, m)]).sigmoid().value();
            let flat: Vec<f32> = probs.iter().copied().collect();
            det.masks.push(paste_mask(&flat, m, &bx, h, w));
            det.boxes.push(bx);
            det.scores.push(score);
            det.classes.push(code);
        }
        Ok(det)
    }
}

/// Slice one image out of per-level maps and concatenate them flat, in
/// level order.
fn flatten_image_maps(g: &Graph, maps: &[Tensor], bi: usize) -> Tensor {
    let flats: Vec<Tensor> = maps
        .iter()
        .map(|mp| {
            let sh = mp.shape();
            mp.slice(&[(bi, bi + 1), (0, sh[1]), (0, sh[2]), (0, sh[3])])
                .reshape(&[sh[1] * sh[2] * sh[3]])
        })
        .collect();
    g.concat(&flats, 0)
}

/// Elementwise binary cross entropy from logits: `t*softplus(-z) +
/// (1-t)*softplus(z)`.
fn bce_with_logits(z: &Tensor, t: &Tensor) -> Tensor {
    let one_minus = t.neg().add_scalar(1.0);
    t.mul(&z.neg().softplus()).add(&one_minus.mul(&z.softplus()))
}

/// Mean cross entropy of `[N, C]` logits against integer labels.
fn cross_entropy(g: &Graph, logits: &Tensor, labels: &[usize]) -> Tensor {
    let sh = logits.shape();
    let (n, c) = (sh[0], sh[1]);
    assert_eq!(n, labels.len());
    let vals = logits.value();
    let mut shift = Vec::with_capacity(n);
    for i in 0..n {
        let mut mx = f32::NEG_INFINITY;
        for j in 0..c {
            mx = mx.max(vals[[i, j]]);
        }
        shift.push(mx);
    }
    let shift_col = g.constant(ArrayD::from_shape_vec(IxDyn(&[n, 1]), shift.clone()).unwrap());
    let lse = logits
        .sub(&shift_col.broadcast_to(&[n, c]))
        .exp()
        .sum_axes(&[1])
        .log();
    let shift_vec = g.constant(ArrayD::from_shape_vec(IxDyn(&[n]), shift).unwrap());
    let idx: Vec<usize> = labels.iter().enumerate().map(|(i, &y)| i * c + y).collect();
    let picked = logits.reshape(&[n * c]).index_select0(Rc::new(idx));
    lse.add(&shift_vec).sub(&picked).mean_all()
}

/// Elementwise smooth L1: `x^2/2` inside the unit band, `|x| - 1/2`
/// outside. The branch mask is held constant, which matches the exact
/// derivative on both sides.
fn smooth_l1(g: &Graph, x: &Tensor) -> Tensor {
    let a = x.abs();
    let mask_vals = a.value().mapv(|v| if v < 1.0 { 1.0f32 } else { 0.0 });
    let m = g.constant(mask_vals);
    let inner = x.square().mul_scalar(0.5);
    let outer = a.add_scalar(-0.5);
    m.mul(&inner).add(&m.neg().add_scalar(1.0).mul(&outer))
}

fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

fn iou(a: &[f32; 4], b: &[f32; 4]) -> f32 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if ua <= 0.0 {
        0.0
    } else {
        inter / ua
    }
}

/// Per-anchor labels (1 positive, 0 negative, -1 ignored) and matched
/// ground-truth index. The best anchor of each ground-truth box is forced
/// positive; without ground truth everything is negative.
fn match_anchors(
    anchors: &[[f32; 4]],
    gts: &[[f32; 4]],
    pos_iou: f32,
    neg_iou: f32,
) -> (Vec<i8>, Vec<usize>) {
    let n = anchors.len();
    if gts.is_empty() {
        return (vec![0; n], vec![0; n]);
    }
    let mut labels = vec![-1i8; n];
    let mut matched = vec![0usize; n];
    let mut best_per_gt = vec![(0.0f32, usize::MAX); gts.len()];
    for (ai, abox) in anchors.iter().enumerate() {
        let mut best = 0.0f32;
        let mut best_gt = 0usize;
        for (gi, gbox) in gts.iter().enumerate() {
            let v = iou(abox, gbox);
            if v > best {
                best = v;
                best_gt = gi;
            }
            if v > best_per_gt[gi].0 {
                best_per_gt[gi] = (v, ai);
            }
        }
        matched[ai] = best_gt;
        if best >= pos_iou {
            labels[ai] = 1;
        } else if best < neg_iou {
            labels[ai] = 0;
        }
    }
    for (gi, &(v, ai)) in best_per_gt.iter().enumerate() {
        if v > 0.0 && ai != usize::MAX {
            labels[ai] = 1;
            matched[ai] = gi;
        }
    }
    (labels, matched)
}

/// Draw up to `want` items from the pool without replacement, returned in
/// ascending order.
fn sample_take(rng: &mut ChaCha8Rng, mut pool: Vec<usize>, want: usize) -> Vec<usize> {
    let take = want.min(pool.len());
    for i in 0..take {
        let j = i + rng.gen_range(0..pool.len() - i);
        pool.swap(i, j);
    }
    let mut out = pool[..take].to_vec();
    out.sort_unstable();
    out
}

/// `(tx, ty, tw, th)` of a target box relative to a reference box.
fn encode_box(reference: &[f32; 4], gt: &[f32; 4]) -> [f32; 4] {
    let rw = reference[2] - reference[0];
    let rh = reference[3] - reference[1];
    let rcx = reference[0] + rw / 2.0;
    let rcy = reference[1] + rh / 2.0;
    let gw = gt[2] - gt[0];
    let gh = gt[3] - gt[1];
    let gcx = gt[0] + gw / 2.0;
    let gcy = gt[1] + gh / 2.0;
    [(gcx - rcx) / rw, (gcy - rcy) / rh, (gw / rw).ln(), (gh / rh).ln()]
}

fn decode_box(reference: &[f32; 4], d: &[f32; 4]) -> [f32; 4] {
    let rw = reference[2] - reference[0];
    let rh = reference[3] - reference[1];
    let rcx = reference[0] + rw / 2.0;
    let rcy = reference[1] + rh / 2.0;
    let cx = rcx + d[0].clamp(-4.0, 4.0) * rw;
    let cy = rcy + d[1].clamp(-4.0, 4.0) * rh;
    let w = rw * d[2].clamp(-4.0, 4.0).exp();
    let h = rh * d[3].clamp(-4.0, 4.0).exp();
    [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
}

fn clip_box(bx: &mut [f32; 4], w: f32, h: f32) {
    bx[0] = bx[0].clamp(0.0, w);
    bx[1] = bx[1].clamp(0.0, h);
    bx[2] = bx[2].clamp(0.0, w);
    bx[3] = bx[3].clamp(0.0, h);
}

/// Greedy NMS: indices of kept candidates in descending score order, score
/// ties broken toward the earlier index.
fn nms(cands: &[(f32, [f32; 4])], iou_thr: f32) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| cands[b].0.total_cmp(&cands[a].0).then(a.cmp(&b)));
    let mut keep = Vec::new();
    let mut dead = vec![false; cands.len()];
    for &i in &order {
        if dead[i] {
            continue;
        }
        keep.push(i);
        for &j in &order {
            if !dead[j] && j != i && iou(&cands[i].1, &cands[j].1) > iou_thr {
                dead[j] = true;
            }
        }
    }
    keep
}

/// Pyramid level index for a box by its scale, quarter-stride level first.
fn assign_level(bx: &[f32; 4], nlevels: usize) -> usize {
    let area = ((bx[2] - bx[0]) * (bx[3] - bx[1])).max(1.0);
    let k = 4.0 + (area.sqrt() / 56.0).log2();
    (k.floor() as i64).clamp(2, 2 + nlevels as i64 - 1) as usize - 2
}

/// Resample an `m`x`m` mask probability grid into image space over the
/// box footprint and threshold at one half.
fn paste_mask(probs: &[f32], m: usize, bx: &[f32; 4], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    let bw = (bx[2] - bx[0]).max(1e-3);
    let bh = (bx[3] - bx[1]).max(1e-3);
    let x0 = bx[0].floor().max(0.0) as usize;
    let y0 = bx[1].floor().max(0.0) as usize;
    let x1 = (bx[2].ceil() as usize).min(w);
    let y1 = (bx[3].ceil() as usize).min(h);
    for py in y0..y1 {
        for px in x0..x1 {
            let u = ((px as f32 + 0.5 - bx[0]) / bw) * m as f32 - 0.5;
            let v = ((py as f32 + 0.5 - bx[1]) / bh) * m as f32 - 0.5;
            if u < -0.5 || v < -0.5 || u > m as f32 - 0.5 || v > m as f32 - 0.5 {
                continue;
            }
            let uc = u.clamp(0.0, m as f32 - 1.0);
            let vc = v.clamp(0.0, m as f32 - 1.0);
            let j0 = uc.floor() as usize;
            let i0 = vc.floor() as usize;
            let j1 = (j0 + 1).min(m - 1);
            let i1 = (i0 + 1).min(m - 1);
            let fu = uc - j0 as f32;
            let fv = vc - i0 as f32;
            let p = probs[i0 * m + j0] * (1.0 - fv) * (1.0 - fu)
                + probs[i0 * m + j1] * (1.0 - fv) * fu
                + probs[i1 * m + j0] * fv * (1.0 - fu)
                + probs[i1 * m + j1] * fv * fu;
            if p >= 0.5 {
                out[py * w + px] = true;
            }
        }
    }
    out
}
