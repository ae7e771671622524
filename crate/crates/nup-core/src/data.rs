//! Dataset manifests and the resize-crop pipeline feeding pretraining.
//!
//! Domain X entries are synthesized mask PNGs with instance annotations;
//! domain Y entries are unannotated histology patches (at desk scale,
//! procedurally texturized stand-ins rendered by [`histology_standin`]).
//! Every image is resized by a factor drawn from the configured range,
//! randomly cropped, and normalized to [-1, 1] planar tensors. For X
//! entries the instance annotations follow the identical geometric
//! transform, and instances that lose most of their area to the crop
//! window are dropped from the targets.
//!
//! Paths inside a manifest are resolved relative to the manifest file's
//! directory, so a dataset directory can be moved wholesale.

use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::SegTargets;
use crate::synth::{load_annotations, InstanceAnnotationSet, MaskImage, SynthError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("domain {0} is empty")]
    EmptyDomain(char),
    #[error("crop {crop} exceeds resized image {h}x{w}")]
    CropTooLarge { crop: usize, h: usize, w: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EntryX {
    pub image: PathBuf,
    pub annotations: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EntryY {
    pub image: PathBuf,
}

/// The on-disk dataset description:
/// `{domain_x: [{image, annotations}], domain_y: [{image}]}`.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub domain_x: Vec<EntryX>,
    pub domain_y: Vec<EntryY>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

impl DatasetManifest {
    /// Parse a manifest, resolve entries against its directory, and check
    /// that every referenced file exists.
    pub fn load(path: &Path) -> Result<DatasetManifest, DataError> {
        let text = std::fs::read_to_string(path)?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for e in &mut m.domain_x {
            e.image = resolve(base, &e.image);
            e.annotations = resolve(base, &e.annotations);
        }
        for e in &mut m.domain_y {
            e.image = resolve(base, &e.image);
        }
        m.check_files()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn check_files(&self) -> Result<(), DataError> {
        for e in &self.domain_x {
            for p in [&e.image, &e.annotations] {
                if !p.is_file() {
                    return Err(DataError::MissingFile(p.clone()));
                }
            }
        }
        for e in &self.domain_y {
            if !e.image.is_file() {
                return Err(DataError::MissingFile(e.image.clone()));
            }
        }
        Ok(())
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Square crop size fed to the networks.
    pub crop: usize,
    /// Inclusive resize-factor range applied before cropping.
    pub scale_range: [f32; 2],
    /// Random horizontal/vertical flips after the crop. Off by default:
    /// only resize-crop is applied during pretraining.
    pub extra_flips: bool,
    /// Instances keeping less than this fraction of their (resized) area
    /// inside the crop are dropped from the targets.
    pub min_visible: f32,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            crop: 64,
            scale_range: [0.8, 1.0],
            extra_flips: false,
            min_visible: 0.25,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.crop == 0 {
            return Err(DataError::InvalidConfig("crop must be positive".into()));
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(DataError::InvalidConfig(format!(
                "scale_range must satisfy 0 < lo <= hi, got [{lo}, {hi}]"
            )));
        }
        if !(0.0..=1.0).contains(&self.min_visible) {
            return Err(DataError::InvalidConfig(format!(
                "min_visible must lie in [0, 1], got {}",
                self.min_visible
            )));
        }
        Ok(())
    }
}

/// One drawn geometric transform: resize to `resized_h x resized_w`, crop
/// at `(oy, ox)`, then optional flips. Images and annotations share it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropDraw {
    pub scale: f32,
    pub resized_h: usize,
    pub resized_w: usize,
    pub oy: usize,
    pub ox: usize,
    pub hflip: bool,
    pub vflip: bool,
}

/// Draw a transform for an `h x w` source. Draw order is fixed (scale,
/// then crop row, then crop column, then flips) so seeded runs replay.
pub fn draw_crop(
    h: usize,
    w: usize,
    cfg: &DataConfig,
    rng: &mut ChaCha8Rng,
) -> Result<CropDraw, DataError> {
    cfg.validate()?;
    let [lo, hi] = cfg.scale_range;
    let scale = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    let resized_h = (h as f32 * scale).round() as usize;
    let resized_w = (w as f32 * scale).round() as usize;
    if resized_h < cfg.crop || resized_w < cfg.crop {
        return Err(DataError::CropTooLarge {
            crop: cfg.crop,
            h: resized_h,
            w: resized_w,
        });
    }
    let oy = rng.gen_range(0..=resized_h - cfg.crop);
    let ox = rng.gen_range(0..=resized_w - cfg.crop);
    let (hflip, vflip) = if cfg.extra_flips {
        (rng.gen_bool(0.5), rng.gen_bool(0.5))
    } else {
        (false, false)
    };
    Ok(CropDraw {
        scale,
        resized_h,
        resized_w,
        oy,
        ox,
        hflip,
        vflip,
    })
}

/// Continuous source coordinate for the centre of output pixel `out`
/// along one axis: undo the flip, add the crop offset, then map from the
/// resized frame back to the source frame.
fn src_center(out: usize, offset: usize, flip: bool, crop: usize, factor: f32) -> f32 {
    let c = out as f32 + 0.5;
    let c = if flip { crop as f32 - c } else { c };
    (c + offset as f32) * factor
}

/// Resize-crop-flip an 8-bit HWC image into a normalized [-1, 1] planar
/// (3, crop, crop) tensor. Bilinear resampling with pixel-centre
/// alignment; at scale 1.0 the result is an exact pixel copy.
pub fn augment_image(img: &Array3<u8>, d: &CropDraw, crop: usize) -> Array3<f32> {
    let (h, w, _) = img.dim();
    let fy = h as f32 / d.resized_h as f32;
    let fx = w as f32 / d.resized_w as f32;
    let mut out = Array3::<f32>::zeros((3, crop, crop));
    for r in 0..crop {
        let ys = (src_center(r, d.oy, d.vflip, crop, fy) - 0.5).clamp(0.0, (h - 1) as f32);
        let i0 = ys.floor() as usize;
        let i1 = (i0 + 1).min(h - 1);
        let ty = ys - i0 as f32;
        for c in 0..crop {
            let xs = (src_center(c, d.ox, d.hflip, crop, fx) - 0.5).clamp(0.0, (w - 1) as f32);
            let j0 = xs.floor() as usize;
            let j1 = (j0 + 1).min(w - 1);
            let tx = xs - j0 as f32;
            for ch in 0..3 {
                let v00 = img[[i0, j0, ch]] as f32;
                let v01 = img[[i0, j1, ch]] as f32;
                let v10 = img[[i1, j0, ch]] as f32;
                let v11 = img[[i1, j1, ch]] as f32;
                let v = (1.0 - ty) * ((1.0 - tx) * v00 + tx * v01)
                    + ty * ((1.0 - tx) * v10 + tx * v11);
                out[[ch, r, c]] = v / 127.5 - 1.0;
            }
        }
    }
    out
}

/// Map an 8-bit HWC image to the normalized planar tensor without any
/// geometric change.
pub fn normalize(img: &Array3<u8>) -> Array3<f32> {
    let (h, w, _) = img.dim();
    let mut out = Array3::<f32>::zeros((3, h, w));
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                out[[c, i, j]] = img[[i, j, c]] as f32 / 127.5 - 1.0;
            }
        }
    }
    out
}

/// Invert [`normalize`]: planar [-1, 1] floats back to 8-bit HWC, rounding
/// to nearest. Round trips exactly for 8-bit inputs.
pub fn denormalize(t: &Array3<f32>) -> Array3<u8> {
    let (_, h, w) = t.dim();
    let mut out = Array3::<u8>::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                let v = (t[[c, i, j]] + 1.0) * 127.5;
                out[[i, j, c]] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

/// Nearest source pixel index for the centre of a resized-frame pixel.
fn nearest_index(out: usize, offset: usize, flip: bool, crop: usize, factor: f32, n: usize) -> usize {
    let s = src_center(out, offset, flip, crop, factor);
    (s.floor() as isize).clamp(0, n as isize - 1) as usize
}

/// Transform one full-frame instance mask through `d`. Returns the
/// cropped mask and the pixel counts (inside the crop window, and over
/// the whole resized frame) used by the visibility drop rule.
fn transform_instance_mask(
    mask: &[bool],
    h: usize,
    w: usize,
    d: &CropDraw,
    crop: usize,
) -> (Vec<bool>, usize, usize) {
    let fy = h as f32 / d.resized_h as f32;
    let fx = w as f32 / d.resized_w as f32;
    let mut full = 0usize;
    for rr in 0..d.resized_h {
        let i = ((((rr as f32 + 0.5) * fy).floor()) as isize).clamp(0, h as isize - 1) as usize;
        for cc in 0..d.resized_w {
            let j = ((((cc as f32 + 0.5) * fx).floor()) as isize).clamp(0, w as isize - 1) as usize;
            if mask[i * w + j] {
                full += 1;
            }
        }
    }
    let mut out = vec![false; crop * crop];
    let mut visible = 0usize;
    for r in 0..crop {
        let i = nearest_index(r, d.oy, d.vflip, crop, fy, h);
        for c in 0..crop {
            let j = nearest_index(c, d.ox, d.hflip, crop, fx, w);
            if mask[i * w + j] {
                out[r * crop + c] = true;
                visible += 1;
            }
        }
    }
    (out, visible, full)
}

/// Apply `d` to a full annotation set, dropping instances whose visible
/// area falls below `cfg.min_visible` of their resized area.
pub fn augment_targets(
    ann: &InstanceAnnotationSet,
    d: &CropDraw,
    cfg: &DataConfig,
) -> SegTargets {
    let crop = cfg.crop;
    let mut t = SegTargets {
        boxes: Vec::new(),
        classes: Vec::new(),
        masks: Vec::new(),
        height: crop,
        width: crop,
    };
    for inst in &ann.instances {
        let (mask, visible, full) =
            transform_instance_mask(&inst.mask, ann.height, ann.width, d, crop);
        if visible == 0 || (visible as f32) < cfg.min_visible * full as f32 {
            continue;
        }
        let (mut x0, mut y0, mut x1, mut y1) = (crop, crop, 0usize, 0usize);
        for r in 0..crop {
            for c in 0..crop {
                if mask[r * crop + c] {
                    x0 = x0.min(c);
                    y0 = y0.min(r);
                    x1 = x1.max(c);
                    y1 = y1.max(r);
                }
            }
        }
        t.boxes
            .push([x0 as f32, y0 as f32, (x1 + 1) as f32, (y1 + 1) as f32]);
        t.classes.push(inst.category.code());
        t.masks.push(mask);
    }
    t
}

/// Load an 8-bit RGB PNG into an HWC array.
pub fn load_image_rgb(path: &Path) -> Result<Array3<u8>, DataError> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<u8>::zeros((h as usize, w as usize, 3));
    for i in 0..h as usize {
        for j in 0..w as usize {
            let p = img.get_pixel(j as u32, i as u32);
            out[[i, j, 0]] = p.0[0];
            out[[i, j, 1]] = p.0[1];
            out[[i, j, 2]] = p.0[2];
        }
    }
    Ok(out)
}

pub enum ManifestEntry<'a> {
    X(&'a EntryX),
    Y(&'a EntryY),
}

/// Load one manifest entry, apply a freshly drawn transform, and return
/// the normalized tensor plus targets for X entries.
pub fn load_and_augment(
    entry: ManifestEntry,
    cfg: &DataConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Array3<f32>, Option<SegTargets>), DataError> {
    match entry {
        ManifestEntry::X(e) => {
            let img = load_image_rgb(&e.image)?;
            let ann = load_annotations(&e.annotations)?;
            let (h, w, _) = img.dim();
            let d = draw_crop(h, w, cfg, rng)?;
            let x = augment_image(&img, &d, cfg.crop);
            let t = augment_targets(&ann, &d, cfg);
            Ok((x, Some(t)))
        }
        ManifestEntry::Y(e) => {
            let img = load_image_rgb(&e.image)?;
            let (h, w, _) = img.dim();
            let d = draw_crop(h, w, cfg, rng)?;
            Ok((augment_image(&img, &d, cfg.crop), None))
        }
    }
}

/// One unpaired training batch, with the drawn source indices kept for
/// determinism checks.
pub struct Batch {
    pub x: Array4<f32>,
    pub x_targets: Vec<SegTargets>,
    pub y: Array4<f32>,
    pub x_indices: Vec<usize>,
    pub y_indices: Vec<usize>,
}

/// Epoch-less unpaired sampler over both domains. All images and
/// annotations are held in memory (desk-scale datasets are small), so a
/// batch never touches the filesystem.
pub struct UnpairedBatcher {
    cfg: DataConfig,
    batch: usize,
    xs: Vec<(Array3<u8>, InstanceAnnotationSet)>,
    ys: Vec<Array3<u8>>,
    rng: ChaCha8Rng,
}

impl UnpairedBatcher {
    pub fn new(
        manifest: &DatasetManifest,
        cfg: DataConfig,
        batch: usize,
        rng: ChaCha8Rng,
    ) -> Result<UnpairedBatcher, DataError> {
        cfg.validate()?;
        if batch == 0 {
            return Err(DataError::InvalidConfig("batch size must be positive".into()));
        }
        if manifest.domain_x.is_empty() {
            return Err(DataError::EmptyDomain('X'));
        }
        if manifest.domain_y.is_empty() {
            return Err(DataError::EmptyDomain('Y'));
        }
        manifest.check_files()?;
        let mut xs = Vec::with_capacity(manifest.domain_x.len());
        for e in &manifest.domain_x {
            xs.push((load_image_rgb(&e.image)?, load_annotations(&e.annotations)?));
        }
        let mut ys = Vec::with_capacity(manifest.domain_y.len());
        for e in &manifest.domain_y {
            ys.push(load_image_rgb(&e.image)?);
        }
        Ok(UnpairedBatcher {
            cfg,
            batch,
            xs,
            ys,
            rng,
        })
    }

    pub fn len_x(&self) -> usize {
        self.xs.len()
    }

    pub fn len_y(&self) -> usize {
        self.ys.len()
    }

    /// The sampler's RNG state, exposed so a training run can persist and
    /// restore it across a resume.
    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn set_rng(&mut self, rng: ChaCha8Rng) {
        self.rng = rng;
    }

    /// Draw the next batch: the X samples first, then the Y samples, one
    /// index draw followed by one transform draw per sample.
    pub fn next_batch(&mut self) -> Result<Batch, DataError> {
        let crop = self.cfg.crop;
        let b = self.batch;
        let mut x = Array4::<f32>::zeros((b, 3, crop, crop));
        let mut y = Array4::<f32>::zeros((b, 3, crop, crop));
        let mut x_targets = Vec::with_capacity(b);
        let mut x_indices = Vec::with_capacity(b);
        let mut y_indices = Vec::with_capacity(b);
        for bi in 0..b {
            let idx = self.rng.gen_range(0..self.xs.len());
            x_indices.push(idx);
            let (img, ann) = &self.xs[idx];
            let (h, w, _) = img.dim();
            let d = draw_crop(h, w, &self.cfg, &mut self.rng)?;
            x.slice_mut(ndarray::s![bi, .., .., ..])
                .assign(&augment_image(img, &d, crop));
            x_targets.push(augment_targets(ann, &d, &self.cfg));
        }
        for bi in 0..b {
            let idx = self.rng.gen_range(0..self.ys.len());
            y_indices.push(idx);
            let img = &self.ys[idx];
            let (h, w, _) = img.dim();
            let d = draw_crop(h, w, &self.cfg, &mut self.rng)?;
            y.slice_mut(ndarray::s![bi, .., .., ..])
                .assign(&augment_image(img, &d, crop));
        }
        Ok(Batch {
            x,
            x_targets,
            y,
            x_indices,
            y_indices,
        })
    }
}

/// Render an H&E-flavoured stand-in histology patch from a mask image:
/// eosin-pink stroma with low-frequency shading, hematoxylin-purple
/// nuclei modulated by the mask's fill intensity, darkened instance
/// boundaries, a light blur, and per-pixel sensor noise. Deterministic
/// for a given RNG state.
pub fn histology_standin(mask: &MaskImage, rng: &mut ChaCha8Rng) -> Array3<u8> {
    let (h, w) = (mask.height(), mask.width());
    let bg = [231.0f32, 203.0, 219.0];
    let epi = [92.0f32, 58.0, 146.0];
    let oth = [118.0f32, 76.0, 158.0];

    // Three random plane waves make the stromal shading field.
    let mut waves = [[0.0f32; 3]; 3];
    for wv in &mut waves {
        let ang = rng.gen_range(0.0..std::f32::consts::TAU);
        let freq = rng.gen_range(0.02..0.08);
        let phase = rng.gen_range(0.0..std::f32::consts::TAU);
        *wv = [ang.cos() * freq, ang.sin() * freq, phase];
    }

    let mut float = Array3::<f32>::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            let mut field = 0.0f32;
            for wv in &waves {
                field += (wv[0] * j as f32 + wv[1] * i as f32 + wv[2]).sin();
            }
            let shade = 1.0 + 0.05 * field;
            let fill_e = mask.pixels[[i, j, 0]] as f32 / 255.0;
            let fill_o = mask.pixels[[i, j, 1]] as f32 / 255.0;
            let boundary = mask.pixels[[i, j, 2]] as f32 / 255.0;
            let alpha = (fill_e + fill_o).min(1.0);
            for c in 0..3 {
                let nucleus = if fill_e >= fill_o { epi[c] } else { oth[c] };
                let mut v = (1.0 - alpha) * bg[c] * shade + alpha * nucleus;
                v *= 1.0 - 0.3 * boundary;
                float[[i, j, c]] = v;
            }
        }
    }

    // 3x3 box blur softens the rasterized edges.
    let mut blurred = Array3::<f32>::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                let mut acc = 0.0f32;
                let mut n = 0.0f32;
                for di in -1i32..=1 {
                    for dj in -1i32..=1 {
                        let ii = i as i32 + di;
                        let jj = j as i32 + dj;
                        if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                            acc += float[[ii as usize, jj as usize, c]];
                            n += 1.0;
                        }
                    }
                }
                blurred[[i, j, c]] = acc / n;
            }
        }
    }

    let mut out = Array3::<u8>::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            let noise = rng.gen_range(-4.0f32..=4.0);
            for c in 0..3 {
                out[[i, j, c]] = (blurred[[i, j, c]] + noise).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}
