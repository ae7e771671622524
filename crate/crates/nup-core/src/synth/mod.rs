//! Pseudo nuclear mask synthesis (domain X).
//!
//! Images are built in three passes: sample glandular ovals, place
//! epithelial nuclei around their rims and stromal/other nuclei on a
//! jittered background grid, then stylize each nucleus into a smoothed
//! polygon and rasterize the set into a three-channel mask image with
//! instance annotations. Channel 0 carries epithelial fills, channel 1
//! other fills, channel 2 one-pixel boundaries at 255.
//!
//! All draws flow from one per-image stream, so a (config, seed, index)
//! triple always produces a bit-identical image.

pub mod geometry;
mod io;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use geometry::{
    bezier_smooth, disk_overlap_area, mask_boundary, polygon_area, polygon_is_simple,
    rasterize_polygon,
};
pub use io::{
    annotations_to_json, load_annotations, load_mask_png, save_annotations, save_mask_png,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("could not place gland inside image bounds after {0} attempts")]
    GlandPlacement(usize),
    #[error("degenerate nucleus polygon after {0} attempts")]
    DegeneratePolygon(usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Nucleus class. Serialized as 1 (epithelial) / 2 (other) in annotations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Epithelial,
    Other,
}

impl Category {
    pub fn code(self) -> u8 {
        match self {
            Category::Epithelial => 1,
            Category::Other => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Category> {
        match c {
            1 => Some(Category::Epithelial),
            2 => Some(Category::Other),
            _ => None,
        }
    }
}

/// Per-class fill intensity band: `base ± perturbation`, clamped to [1, 255].
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct IntensityBand {
    pub base: f32,
    pub perturbation: f32,
}

/// All synthesis knobs.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Square output size in pixels.
    pub image_size: usize,
    /// Inclusive range for the number of glandular ovals per image.
    pub gland_count_range: [usize; 2],
    /// Inclusive range for each gland semi-axis, pixels.
    pub gland_semi_axis_range: [f32; 2],
    /// Maximum sinusoidal rim deformation amplitude (fraction of radius).
    pub gland_deformation_max: f32,
    /// Polar step between epithelial nuclei on a gland rim, radians.
    pub angular_step: f32,
    /// Inclusive range of extra nuclei added at each polar angle.
    pub nuclei_per_angle_range: [usize; 2],
    /// Radial perturbation of each glandular nucleus centre, pixels.
    pub radial_perturbation: f32,
    /// Background grid pitch, pixels (cell centres carry nuclei).
    pub background_grid_pitch: f32,
    /// Uniform jitter applied to each background grid centre, pixels.
    pub background_grid_jitter: f32,
    /// Inclusive range for nucleus base radius, pixels.
    pub nucleus_radius_range: [f32; 2],
    /// Inclusive range for raw polygon vertex count before smoothing.
    pub polygon_vertex_range: [usize; 2],
    /// Per-vertex radial jitter as a fraction of the base radius.
    pub polygon_radial_jitter: f32,
    /// Number of points on the smoothed outline.
    pub bezier_samples: usize,
    pub epithelial_intensity: IntensityBand,
    pub other_intensity: IntensityBand,
    /// Maximum tolerated pairwise overlap as a fraction of the smaller
    /// nucleus area; a later nucleus beyond this is dropped and reported.
    pub overlap_tolerance: f32,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 64,
            gland_count_range: [1, 2],
            gland_semi_axis_range: [8.0, 13.0],
            gland_deformation_max: 0.15,
            angular_step: std::f32::consts::TAU / 12.0,
            nuclei_per_angle_range: [0, 1],
            radial_perturbation: 1.5,
            background_grid_pitch: 16.0,
            background_grid_jitter: 3.0,
            nucleus_radius_range: [2.5, 4.5],
            polygon_vertex_range: [5, 9],
            polygon_radial_jitter: 0.3,
            bezier_samples: 24,
            epithelial_intensity: IntensityBand { base: 200.0, perturbation: 40.0 },
            other_intensity: IntensityBand { base: 200.0, perturbation: 40.0 },
            overlap_tolerance: 0.2,
            rng_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let err = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if self.image_size < 16 {
            return err("image_size must be at least 16");
        }
        if self.gland_count_range[0] > self.gland_count_range[1]
            || self.nuclei_per_angle_range[0] > self.nuclei_per_angle_range[1]
            || self.polygon_vertex_range[0] > self.polygon_vertex_range[1]
            || self.gland_semi_axis_range[0] > self.gland_semi_axis_range[1]
            || self.nucleus_radius_range[0] > self.nucleus_radius_range[1]
        {
            return err("range fields must satisfy lo <= hi");
        }
        if !(0.0..1.0).contains(&self.overlap_tolerance) {
            return err("overlap_tolerance must be in [0, 1)");
        }
        if self.polygon_vertex_range[0] < 3 {
            return err("polygons need at least 3 vertices");
        }
        if self.bezier_samples < self.polygon_vertex_range[1] {
            return err("bezier_samples must be at least the max vertex count");
        }
        if !(self.angular_step > 0.0) {
            return err("angular_step must be positive");
        }
        for band in [self.epithelial_intensity, self.other_intensity] {
            if band.base - band.perturbation < 1.0 || band.base + band.perturbation > 255.0 {
                return err("intensity band must stay within [1, 255]");
            }
        }
        Ok(())
    }

    fn intensity(&self, cat: Category) -> IntensityBand {
        match cat {
            Category::Epithelial => self.epithelial_intensity,
            Category::Other => self.other_intensity,
        }
    }
}

/// A glandular oval: lumen-like structure whose rim carries epithelial
/// nuclei.
#[derive(Clone, Debug, PartialEq)]
pub struct GlandSpec {
    pub center: [f32; 2],
    pub orientation: f32,
    pub semi_axes: [f32; 2],
    pub deformation: f32,
}

impl GlandSpec {
    /// Deformed rim radius in world direction `theta`: the oval radius
    /// modulated by a three-lobe sinusoid whose phase follows orientation.
    pub fn rim_radius(&self, theta: f32) -> f32 {
        let phi = theta - self.orientation;
        let (a, b) = (self.semi_axes[0], self.semi_axes[1]);
        let r = a * b / ((b * phi.cos()).powi(2) + (a * phi.sin()).powi(2)).sqrt();
        r * (1.0 + self.deformation * (3.0 * theta + 2.0 * self.orientation).sin())
    }
}

/// One stylized nucleus: smoothed closed outline plus class and intensity.
#[derive(Clone, Debug, PartialEq)]
pub struct NucleusSpec {
    pub center: [f32; 2],
    pub vertices: Vec<[f32; 2]>,
    pub category: Category,
    pub fill_intensity: u8,
}

/// H x W x 3 (row, col, channel) raster; ch0 epithelial fill, ch1 other
/// fill, ch2 boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskImage {
    pub pixels: ndarray::Array3<u8>,
}

impl MaskImage {
    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }
    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }
}

/// One rasterized instance: row-major binary mask plus tight box, class,
/// and the smoothed outline it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub category: Category,
    /// Tight box [x, y, w, h] of the rasterized mask, pixels.
    pub bbox: [u32; 4],
    pub polygon: Vec<[f32; 2]>,
    pub mask: Vec<bool>,
    pub area: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceAnnotationSet {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    pub instances: Vec<Instance>,
}

/// Per-image placement accounting, aggregated into the synthesis report.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct ImageStats {
    pub placed: usize,
    pub epithelial: usize,
    pub other: usize,
    pub dropped_overlap: usize,
    pub dropped_degenerate: usize,
    pub dropped_out_of_bounds: usize,
}

impl ImageStats {
    pub fn absorb(&mut self, o: &ImageStats) {
        self.placed += o.placed;
        self.epithelial += o.epithelial;
        self.other += o.other;
        self.dropped_overlap += o.dropped_overlap;
        self.dropped_degenerate += o.dropped_degenerate;
        self.dropped_out_of_bounds += o.dropped_out_of_bounds;
    }
}

/// Aggregate report written next to a synthesized dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthReport {
    pub images: usize,
    pub seed: u64,
    pub totals: ImageStats,
    pub config: SynthConfig,
}

const GLAND_RETRIES: usize = 100;
const POLYGON_RETRIES: usize = 10;

/// Draw the glandular ovals for one image. Centres are rejection-sampled
/// so the whole deformed rim plus placement margin stays in bounds.
pub fn sample_gland_layout(
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<GlandSpec>, SynthError> {
    let count = draw_range_usize(rng, cfg.gland_count_range);
    let size = cfg.image_size as f32;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..GLAND_RETRIES {
            let a = draw_range_f32(rng, cfg.gland_semi_axis_range);
            let b = draw_range_f32(rng, cfg.gland_semi_axis_range);
            let orientation = rng.gen_range(0.0..std::f32::consts::PI);
            let deformation = rng.gen_range(0.0..=cfg.gland_deformation_max);
            let margin = a.max(b) * (1.0 + deformation)
                + cfg.radial_perturbation
                + cfg.nucleus_radius_range[1];
            if 2.0 * margin >= size {
                continue;
            }
            let center = [
                rng.gen_range(margin..size - margin),
                rng.gen_range(margin..size - margin),
            ];
            out.push(GlandSpec { center, orientation, semi_axes: [a, b], deformation });
            placed = true;
            break;
        }
        if !placed {
            return Err(SynthError::GlandPlacement(GLAND_RETRIES));
        }
    }
    Ok(out)
}

/// Epithelial nucleus centres around one gland rim: one per polar step,
/// plus a drawn number of extras per angle, each with its own radial
/// perturbation.
pub fn place_glandular_nuclei(
    gland: &GlandSpec,
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<([f32; 2], Category)> {
    let n_angles = (std::f32::consts::TAU / cfg.angular_step).floor() as usize;
    let mut out = Vec::with_capacity(n_angles);
    for k in 0..n_angles {
        let theta = k as f32 * cfg.angular_step;
        let rim = gland.rim_radius(theta);
        let extras = draw_range_usize(rng, cfg.nuclei_per_angle_range);
        for _ in 0..(1 + extras) {
            let r = rim
                + if cfg.radial_perturbation > 0.0 {
                    rng.gen_range(-cfg.radial_perturbation..=cfg.radial_perturbation)
                } else {
                    0.0
                };
            let c = [
                gland.center[0] + r * theta.cos(),
                gland.center[1] + r * theta.sin(),
            ];
            out.push((c, Category::Epithelial));
        }
    }
    out
}

/// Other-class nucleus centres on a jittered grid, excluding cells whose
/// nucleus would overlap an occupied centre beyond the tolerance.
/// `occupied` carries (centre, radius estimate) pairs.
pub fn place_background_nuclei(
    cfg: &SynthConfig,
    occupied: &[([f32; 2], f32)],
    rng: &mut ChaCha8Rng,
) -> Vec<([f32; 2], Category)> {
    let size = cfg.image_size as f32;
    let pitch = cfg.background_grid_pitch;
    let cells = (size / pitch).floor() as usize;
    let mean_r = 0.5 * (cfg.nucleus_radius_range[0] + cfg.nucleus_radius_range[1]);
    let min_area = std::f32::consts::PI * mean_r * mean_r;
    let mut out = Vec::new();
    for gi in 0..cells {
        for gj in 0..cells {
            let mut c = [
                (gi as f32 + 0.5) * pitch,
                (gj as f32 + 0.5) * pitch,
            ];
            if cfg.background_grid_jitter > 0.0 {
                c[0] += rng.gen_range(-cfg.background_grid_jitter..=cfg.background_grid_jitter);
                c[1] += rng.gen_range(-cfg.background_grid_jitter..=cfg.background_grid_jitter);
            }
            if c[0] < 0.0 || c[1] < 0.0 || c[0] >= size || c[1] >= size {
                continue;
            }
            let excluded = occupied.iter().any(|&(oc, or)| {
                let lens = disk_overlap_area(c, mean_r, oc, or);
                let smaller = min_area.min(std::f32::consts::PI * or * or);
                lens > cfg.overlap_tolerance * smaller
            });
            if !excluded {
                out.push((c, Category::Other));
            }
        }
    }
    out
}

/// Build one stylized nucleus at `center`: a star-shaped polygon with a
/// drawn vertex count and per-vertex radial jitter, smoothed to exactly
/// `bezier_samples` outline points, with a drawn fill intensity.
pub fn stylize_nucleus(
    center: [f32; 2],
    category: Category,
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> Result<NucleusSpec, SynthError> {
    for _ in 0..POLYGON_RETRIES {
        let nv = draw_range_usize(rng, cfg.polygon_vertex_range);
        let base_r = draw_range_f32(rng, cfg.nucleus_radius_range);
        let step = std::f32::consts::TAU / nv as f32;
        let mut raw = Vec::with_capacity(nv);
        for i in 0..nv {
            // Angle jitter below half a step keeps angles sorted, so the
            // raw polygon is star-shaped and therefore simple.
            let theta = (i as f32 + rng.gen_range(-0.35..0.35)) * step;
            let jit = cfg.polygon_radial_jitter;
            let r = (base_r * (1.0 + if jit > 0.0 { rng.gen_range(-jit..=jit) } else { 0.0 }))
                .max(0.5);
            raw.push([center[0] + r * theta.cos(), center[1] + r * theta.sin()]);
        }
        let vertices = bezier_smooth(&raw, cfg.bezier_samples);
        let band = cfg.intensity(category);
        let fill = if band.perturbation > 0.0 {
            band.base + rng.gen_range(-band.perturbation..=band.perturbation)
        } else {
            band.base
        };
        if polygon_area(&vertices) <= 1.0 || !polygon_is_simple(&vertices) {
            continue;
        }
        return Ok(NucleusSpec {
            center,
            vertices,
            category,
            fill_intensity: fill.round().clamp(1.0, 255.0) as u8,
        });
    }
    Err(SynthError::DegeneratePolygon(POLYGON_RETRIES))
}

/// Rasterize stylized nuclei in placement order. A nucleus whose pixel
/// overlap with any already-kept nucleus exceeds
/// `overlap_tolerance * min(area)` is dropped and counted, never silently
/// kept.
pub fn rasterize(
    nuclei: &[NucleusSpec],
    cfg: &SynthConfig,
) -> (MaskImage, Vec<Instance>, ImageStats) {
    let s = cfg.image_size;
    let mut pixels = ndarray::Array3::<u8>::zeros((s, s, 3));
    let mut kept: Vec<Instance> = Vec::new();
    let mut stats = ImageStats::default();
    for spec in nuclei {
        let mask = rasterize_polygon(&spec.vertices, s, s);
        let area = mask.iter().filter(|&&b| b).count();
        if area == 0 {
            stats.dropped_degenerate += 1;
            continue;
        }
        let bbox = tight_bbox(&mask, s, s);
        let too_much = kept.iter().any(|other| {
            if !bboxes_touch(bbox, other.bbox) {
                return false;
            }
            let shared = mask
                .iter()
                .zip(other.mask.iter())
                .filter(|(&a, &b)| a && b)
                .count();
            shared as f32 > cfg.overlap_tolerance * area.min(other.area) as f32
        });
        if too_much {
            stats.dropped_overlap += 1;
            continue;
        }
        let ch = match spec.category {
            Category::Epithelial => 0,
            Category::Other => 1,
        };
        for i in 0..s {
            for j in 0..s {
                if mask[i * s + j] {
                    pixels[[i, j, ch]] = spec.fill_intensity;
                }
            }
        }
        let boundary = mask_boundary(&mask, s, s);
        for i in 0..s {
            for j in 0..s {
                if boundary[i * s + j] {
                    pixels[[i, j, 2]] = 255;
                }
            }
        }
        match spec.category {
            Category::Epithelial => stats.epithelial += 1,
            Category::Other => stats.other += 1,
        }
        stats.placed += 1;
        kept.push(Instance {
            category: spec.category,
            bbox,
            polygon: spec.vertices.clone(),
            mask,
            area,
        });
    }
    (MaskImage { pixels }, kept, stats)
}

/// Full per-image pipeline, deterministic in (config, seed, index).
pub fn synthesize_image(
    cfg: &SynthConfig,
    seed: u64,
    index: u64,
    image_id: &str,
) -> Result<(MaskImage, InstanceAnnotationSet, ImageStats), SynthError> {
    cfg.validate()?;
    let mut rng = crate::rng::substream(seed, "synth-image", index);
    let glands = sample_gland_layout(cfg, &mut rng)?;
    let mut centers: Vec<([f32; 2], Category)> = Vec::new();
    for gland in &glands {
        centers.extend(place_glandular_nuclei(gland, cfg, &mut rng));
    }
    let mean_r = 0.5 * (cfg.nucleus_radius_range[0] + cfg.nucleus_radius_range[1]);
    let occupied: Vec<([f32; 2], f32)> = centers.iter().map(|&(c, _)| (c, mean_r)).collect();
    centers.extend(place_background_nuclei(cfg, &occupied, &mut rng));

    let size = cfg.image_size as f32;
    let mut stats = ImageStats::default();
    let mut nuclei = Vec::with_capacity(centers.len());
    for (c, cat) in centers {
        if c[0] < 0.0 || c[1] < 0.0 || c[0] >= size || c[1] >= size {
            stats.dropped_out_of_bounds += 1;
            continue;
        }
        nuclei.push(stylize_nucleus(c, cat, cfg, &mut rng)?);
    }
    let (img, instances, raster_stats) = rasterize(&nuclei, cfg);
    stats.absorb(&raster_stats);
    let ann = InstanceAnnotationSet {
        image_id: image_id.to_string(),
        height: cfg.image_size,
        width: cfg.image_size,
        instances,
    };
    Ok((img, ann, stats))
}

fn tight_bbox(mask: &[bool], h: usize, w: usize) -> [u32; 4] {
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0usize, 0usize);
    for i in 0..h {
        for j in 0..w {
            if mask[i * w + j] {
                x0 = x0.min(j);
                y0 = y0.min(i);
                x1 = x1.max(j);
                y1 = y1.max(i);
            }
        }
    }
    if x0 > x1 {
        return [0, 0, 0, 0];
    }
    [x0 as u32, y0 as u32, (x1 - x0 + 1) as u32, (y1 - y0 + 1) as u32]
}

fn bboxes_touch(a: [u32; 4], b: [u32; 4]) -> bool {
    a[0] <= b[0] + b[2] && b[0] <= a[0] + a[2] && a[1] <= b[1] + b[3] && b[1] <= a[1] + a[3]
}

fn draw_range_usize(rng: &mut ChaCha8Rng, range: [usize; 2]) -> usize {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.gen_range(range[0]..=range[1])
    }
}

fn draw_range_f32(rng: &mut ChaCha8Rng, range: [f32; 2]) -> f32 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.gen_range(range[0]..=range[1])
    }
}
