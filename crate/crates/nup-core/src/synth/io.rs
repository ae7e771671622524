//! PNG and annotation JSON serialization for synthesized masks.
//!
//! Mask images are written as 8-bit RGB PNGs (R = epithelial fill,
//! G = other fill, B = boundary). Annotations use one JSON file per image:
//! `{image_id, height, width, instances: [{category, bbox, mask}]}` where
//! `category` is 1 (epithelial) or 2 (other), `bbox` is `[x, y, w, h]`,
//! and `mask` is the smoothed outline as a point list.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{geometry, Category, Instance, InstanceAnnotationSet, MaskImage, SynthError};

pub fn save_mask_png(path: &Path, img: &MaskImage) -> Result<(), SynthError> {
    let (h, w) = (img.height(), img.width());
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            buf.put_pixel(
                j as u32,
                i as u32,
                image::Rgb([
                    img.pixels[[i, j, 0]],
                    img.pixels[[i, j, 1]],
                    img.pixels[[i, j, 2]],
                ]),
            );
        }
    }
    buf.save(path)?;
    Ok(())
}

pub fn load_mask_png(path: &Path) -> Result<MaskImage, SynthError> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    let mut pixels = ndarray::Array3::<u8>::zeros((h as usize, w as usize, 3));
    for i in 0..h {
        for j in 0..w {
            let p = img.get_pixel(j, i);
            for c in 0..3 {
                pixels[[i as usize, j as usize, c]] = p.0[c];
            }
        }
    }
    Ok(MaskImage { pixels })
}

#[derive(Serialize, Deserialize)]
struct InstanceJson {
    category: u8,
    bbox: [u32; 4],
    mask: Vec<[f32; 2]>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationsJson {
    image_id: String,
    height: usize,
    width: usize,
    instances: Vec<InstanceJson>,
}

/// Render annotations as the same JSON document the per-image files
/// hold, without touching the filesystem.
pub fn annotations_to_json(ann: &InstanceAnnotationSet) -> Result<String, SynthError> {
    let doc = AnnotationsJson {
        image_id: ann.image_id.clone(),
        height: ann.height,
        width: ann.width,
        instances: ann
            .instances
            .iter()
            .map(|inst| InstanceJson {
                category: inst.category.code(),
                bbox: inst.bbox,
                mask: inst.polygon.clone(),
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn save_annotations(path: &Path, ann: &InstanceAnnotationSet) -> Result<(), SynthError> {
    std::fs::write(path, annotations_to_json(ann)?)?;
    Ok(())
}

/// Load annotations, re-rasterizing each polygon to recover its binary
/// mask and area at the stored image size.
pub fn load_annotations(path: &Path) -> Result<InstanceAnnotationSet, SynthError> {
    let doc: AnnotationsJson = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let instances = doc
        .instances
        .into_iter()
        .map(|inst| {
            let mask = geometry::rasterize_polygon(&inst.mask, doc.height, doc.width);
            let area = mask.iter().filter(|&&b| b).count();
            Instance {
                category: Category::from_code(inst.category).unwrap_or(Category::Other),
                bbox: inst.bbox,
                polygon: inst.mask,
                mask,
                area,
            }
        })
        .collect();
    Ok(InstanceAnnotationSet {
        image_id: doc.image_id,
        height: doc.height,
        width: doc.width,
        instances,
    })
}
