//! Instance segmentation metrics over integer label maps.
//!
//! Matching conventions, where the source definitions leave room:
//! greedy matching breaks ties by lower ground-truth id, then lower
//! prediction id; detection F1 of two empty labelings is 1.0; a class
//! absent from both prediction and ground truth across the whole
//! accumulated set is excluded from mPQ+; panoptic quality pools
//! TP/FP/FN/IoU statistics over all accumulated images before the
//! division. Object-level Dice and Hausdorff follow the GlaS scheme:
//! each object is paired with its maximally overlapping counterpart,
//! per-object values are area-weighted, and the two directions are
//! averaged. An object with no overlapping counterpart contributes
//! Dice 0, and Hausdorff equal to the image diagonal; a tie in the top
//! overlap resolves to the better value (higher Dice, lower distance),
//! which keeps the object metrics invariant under relabeling.
//! Hausdorff runs on 4-neighbour boundary pixels (an isolated pixel is
//! its own boundary).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("labelings have different shapes: {0:?} vs {1:?}")]
    ShapeMismatch([usize; 2], [usize; 2]),
    #[error("instance labels must be contiguous from 1: {0}")]
    NonContiguous(String),
    #[error("classes length {0} does not match instance count {1}")]
    ClassLength(usize, usize),
    #[error("panoptic quality needs per-instance classes on both labelings")]
    MissingClasses,
    #[error("ground truth has no instances")]
    EmptyGroundTruth,
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("{path}: label {label} exceeds the 16-bit png range")]
    LabelRange { path: PathBuf, label: u32 },
    #[error("{path}: expected a 16-bit grayscale label png")]
    NotLuma16 { path: PathBuf },
}

/// H x W integer label map: 0 is background, instance k covers the
/// pixels labeled k, with k running contiguously from 1. Instances may
/// carry a class id each.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceLabeling {
    labels: Array2<u32>,
    classes: Option<Vec<u8>>,
    areas: Vec<usize>,
}

impl InstanceLabeling {
    pub fn new(labels: Array2<u32>) -> Result<Self, MetricsError> {
        let max = labels.iter().copied().max().unwrap_or(0) as usize;
        let mut areas = vec![0usize; max];
        for &l in labels.iter() {
            if l > 0 {
                areas[(l - 1) as usize] += 1;
            }
        }
        if let Some(k) = areas.iter().position(|&a| a == 0) {
            return Err(MetricsError::NonContiguous(format!(
                "label {} is unused while {} exists",
                k + 1,
                max
            )));
        }
        Ok(InstanceLabeling { labels, classes: None, areas })
    }

    pub fn with_classes(labels: Array2<u32>, classes: Vec<u8>) -> Result<Self, MetricsError> {
        let mut lab = Self::new(labels)?;
        if classes.len() != lab.areas.len() {
            return Err(MetricsError::ClassLength(classes.len(), lab.areas.len()));
        }
        lab.classes = Some(classes);
        Ok(lab)
    }

    /// Paint binary masks into a label map in the given order; pixels
    /// already claimed by an earlier mask are not overwritten. Masks
    /// left without any pixel are skipped so labels stay contiguous.
    pub fn from_masks(h: usize, w: usize, masks: &[(Vec<bool>, u8)]) -> Self {
        let mut labels = Array2::<u32>::zeros((h, w));
        let mut classes = Vec::new();
        let mut next = 1u32;
        for (mask, class) in masks {
            let mut any = false;
            for i in 0..h {
                for j in 0..w {
                    if mask[i * w + j] && labels[[i, j]] == 0 {
                        labels[[i, j]] = next;
                        any = true;
                    }
                }
            }
            if any {
                classes.push(*class);
                next += 1;
            }
        }
        let mut lab = Self::new(labels).expect("painted labels are contiguous");
        lab.classes = Some(classes);
        lab
    }

    pub fn labels(&self) -> &Array2<u32> {
        &self.labels
    }

    pub fn classes(&self) -> Option<&[u8]> {
        self.classes.as_deref()
    }

    /// Number of instances.
    pub fn len(&self) -> usize {
        self.areas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.areas.is_empty()
    }

    /// Pixel count of instance `k` (1-based).
    pub fn area(&self, k: usize) -> usize {
        self.areas[k - 1]
    }

    pub fn shape(&self) -> [usize; 2] {
        let s = self.labels.shape();
        [s[0], s[1]]
    }

    /// Boundary pixels of instance `k`: pixels of `k` that touch the
    /// image border or a 4-neighbour with a different label.
    fn boundary(&self, k: u32) -> Vec<[f64; 2]> {
        let (h, w) = self.labels.dim();
        let mut out = Vec::new();
        for i in 0..h {
            for j in 0..w {
                if self.labels[[i, j]] != k {
                    continue;
                }
                let edge = i == 0
                    || j == 0
                    || i == h - 1
                    || j == w - 1
                    || self.labels[[i - 1, j]] != k
                    || self.labels[[i + 1, j]] != k
                    || self.labels[[i, j - 1]] != k
                    || self.labels[[i, j + 1]] != k;
                if edge {
                    out.push([i as f64, j as f64]);
                }
            }
        }
        out
    }
}

fn check_shapes(a: &InstanceLabeling, b: &InstanceLabeling) -> Result<(), MetricsError> {
    if a.shape() != b.shape() {
        return Err(MetricsError::ShapeMismatch(a.shape(), b.shape()));
    }
    Ok(())
}

/// Pairwise intersection pixel counts, rows = `a` instances, cols = `b`
/// instances (both 0-based here).
fn intersections(a: &InstanceLabeling, b: &InstanceLabeling) -> Array2<usize> {
    let mut out = Array2::<usize>::zeros((a.len(), b.len()));
    for (&la, &lb) in a.labels.iter().zip(b.labels.iter()) {
        if la > 0 && lb > 0 {
            out[[(la - 1) as usize, (lb - 1) as usize]] += 1;
        }
    }
    out
}

fn iou(inter: usize, area_a: usize, area_b: usize) -> f64 {
    inter as f64 / (area_a + area_b - inter) as f64
}

/// Aggregated Jaccard index. Ground-truth instances are visited in id
/// order; each takes the unused prediction with the highest IoU (ties
/// to the lower prediction id), adding the pair's intersection and
/// union to the running totals; an unmatched ground truth adds its own
/// area to the union, and every unused prediction does the same at the
/// end. Two empty labelings agree perfectly and score 1.0.
pub fn aji(pred: &InstanceLabeling, gt: &InstanceLabeling) -> Result<f64, MetricsError> {
    check_shapes(pred, gt)?;
    if gt.is_empty() && pred.is_empty() {
        return Ok(1.0);
    }
    let inter = intersections(gt, pred);
    let mut used = vec![false; pred.len()];
    let mut c = 0usize;
    let mut u = 0usize;
    for gi in 0..gt.len() {
        let mut best: Option<(f64, usize)> = None;
        for (pj, &flag) in used.iter().enumerate() {
            if flag || inter[[gi, pj]] == 0 {
                continue;
            }
            let v = iou(inter[[gi, pj]], gt.area(gi + 1), pred.area(pj + 1));
            if best.map_or(true, |(b, _)| v > b) {
                best = Some((v, pj));
            }
        }
        match best {
            Some((_, pj)) => {
                used[pj] = true;
                c += inter[[gi, pj]];
                u += gt.area(gi + 1) + pred.area(pj + 1) - inter[[gi, pj]];
            }
            None => u += gt.area(gi + 1),
        }
    }
    for (pj, &flag) in used.iter().enumerate() {
        if !flag {
            u += pred.area(pj + 1);
        }
    }
    Ok(c as f64 / u as f64)
}

/// Matched pairs plus leftovers from one-to-one greedy matching by
/// descending IoU at a threshold.
#[derive(Clone, Debug, Default)]
pub struct MatchStats {
    /// (gt id, pred id, IoU), both ids 1-based.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_gt: Vec<usize>,
    pub unmatched_pred: Vec<usize>,
}

/// Greedy one-to-one matching: candidate pairs with IoU >= threshold
/// are taken in descending IoU order, ties to the lower gt id then the
/// lower pred id.
pub fn match_instances(
    pred: &InstanceLabeling,
    gt: &InstanceLabeling,
    iou_threshold: f64,
) -> Result<MatchStats, MetricsError> {
    check_shapes(pred, gt)?;
    let inter = intersections(gt, pred);
    let mut cand = Vec::new();
    for gi in 0..gt.len() {
        for pj in 0..pred.len() {
            if inter[[gi, pj]] == 0 {
                continue;
            }
            let v = iou(inter[[gi, pj]], gt.area(gi + 1), pred.area(pj + 1));
            if v >= iou_threshold {
                cand.push((v, gi, pj));
            }
        }
    }
    cand.sort_by(|a, b| {
        b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
    });
    let mut gt_used = vec![false; gt.len()];
    let mut pred_used = vec![false; pred.len()];
    let mut stats = MatchStats::default();
    for (v, gi, pj) in cand {
        if !gt_used[gi] && !pred_used[pj] {
            gt_used[gi] = true;
            pred_used[pj] = true;
            stats.pairs.push((gi + 1, pj + 1, v));
        }
    }
    stats.unmatched_gt =
        gt_used.iter().enumerate().filter(|(_, &u)| !u).map(|(i, _)| i + 1).collect();
    stats.unmatched_pred =
        pred_used.iter().enumerate().filter(|(_, &u)| !u).map(|(i, _)| i + 1).collect();
    Ok(stats)
}

/// Detection F1 = 2TP / (2TP + FP + FN) under greedy one-to-one
/// matching at the IoU threshold. Empty against empty is a perfect
/// score, 1.0.
pub fn detection_f1(
    pred: &InstanceLabeling,
    gt: &InstanceLabeling,
    iou_threshold: f64,
) -> Result<f64, MetricsError> {
    check_shapes(pred, gt)?;
    if gt.is_empty() && pred.is_empty() {
        return Ok(1.0);
    }
    let m = match_instances(pred, gt, iou_threshold)?;
    let tp = m.pairs.len();
    Ok(2.0 * tp as f64 / (2 * tp + m.unmatched_pred.len() + m.unmatched_gt.len()) as f64)
}

#[derive(Clone, Copy, Debug, Default)]
struct ClassBin {
    tp: usize,
    fp: usize,
    fn_: usize,
    iou_sum: f64,
}

/// Pools panoptic-quality statistics over a set of images before the
/// final division, the "+" convention. Matching inside one class uses
/// IoU > 0.5, which pairs instances uniquely.
#[derive(Clone, Debug, Default)]
pub struct PqAccumulator {
    bins: BTreeMap<u8, ClassBin>,
}

impl PqAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_image(
        &mut self,
        pred: &InstanceLabeling,
        gt: &InstanceLabeling,
    ) -> Result<(), MetricsError> {
        check_shapes(pred, gt)?;
        let gt_classes = match (gt.classes(), gt.is_empty()) {
            (Some(c), _) => c.to_vec(),
            (None, true) => Vec::new(),
            (None, false) => return Err(MetricsError::MissingClasses),
        };
        let pred_classes = match (pred.classes(), pred.is_empty()) {
            (Some(c), _) => c.to_vec(),
            (None, true) => Vec::new(),
            (None, false) => return Err(MetricsError::MissingClasses),
        };
        let inter = intersections(gt, pred);
        let mut gt_matched = vec![false; gt.len()];
        let mut pred_matched = vec![false; pred.len()];
        for gi in 0..gt.len() {
            for pj in 0..pred.len() {
                if gt_classes[gi] != pred_classes[pj] || inter[[gi, pj]] == 0 {
                    continue;
                }
                let v = iou(inter[[gi, pj]], gt.area(gi + 1), pred.area(pj + 1));
                if v > 0.5 {
                    gt_matched[gi] = true;
                    pred_matched[pj] = true;
                    let bin = self.bins.entry(gt_classes[gi]).or_default();
                    bin.tp += 1;
                    bin.iou_sum += v;
                }
            }
        }
        for gi in 0..gt.len() {
            if !gt_matched[gi] {
                self.bins.entry(gt_classes[gi]).or_default().fn_ += 1;
            }
        }
        for pj in 0..pred.len() {
            if !pred_matched[pj] {
                self.bins.entry(pred_classes[pj]).or_default().fp += 1;
            }
        }
        Ok(())
    }

    /// Per-class PQ over everything accumulated so far. Only classes
    /// that appeared somewhere have entries.
    pub fn class_pq(&self) -> BTreeMap<u8, f64> {
        self.bins
            .iter()
            .map(|(&c, b)| {
                let denom = b.tp as f64 + 0.5 * b.fp as f64 + 0.5 * b.fn_ as f64;
                (c, b.iou_sum / denom)
            })
            .collect()
    }

    /// Unweighted mean of per-class PQ; None when no class appeared at
    /// all.
    pub fn mpq(&self) -> Option<f64> {
        let pq = self.class_pq();
        if pq.is_empty() {
            return None;
        }
        Some(pq.values().sum::<f64>() / pq.len() as f64)
    }
}

/// Single-image panoptic quality: per-class PQ plus mPQ+.
pub fn panoptic_quality(
    pred: &InstanceLabeling,
    gt: &InstanceLabeling,
) -> Result<(BTreeMap<u8, f64>, Option<f64>), MetricsError> {
    let mut acc = PqAccumulator::new();
    acc.add_image(pred, gt)?;
    Ok((acc.class_pq(), acc.mpq()))
}

/// All maximally overlapping counterparts of one `a` instance among the
/// `b` instances: empty when nothing overlaps, several entries when the
/// top overlap count is tied. Keeping the whole tie set lets the object
/// metrics resolve ties by value, which keeps them invariant under
/// instance relabeling.
fn best_overlaps(inter: &Array2<usize>, ai: usize, nb: usize, transposed: bool) -> Vec<usize> {
    let mut best = 0usize;
    let mut out = Vec::new();
    for bj in 0..nb {
        let v = if transposed { inter[[bj, ai]] } else { inter[[ai, bj]] };
        if v == 0 || v < best {
            continue;
        }
        if v > best {
            best = v;
            out.clear();
        }
        out.push(bj);
    }
    out
}

fn dice(inter: usize, a: usize, b: usize) -> f64 {
    2.0 * inter as f64 / (a + b) as f64
}

/// GlaS object-level Dice: per-object Dice against the maximally
/// overlapping counterpart, area-weighted within each direction, the
/// two directions averaged. No counterpart means Dice 0 for that
/// object; a tie in the top overlap resolves to the higher Dice.
pub fn object_dice(pred: &InstanceLabeling, gt: &InstanceLabeling) -> Result<f64, MetricsError> {
    check_shapes(pred, gt)?;
    if gt.is_empty() {
        return Err(MetricsError::EmptyGroundTruth);
    }
    let inter = intersections(gt, pred);
    let gt_total: usize = (1..=gt.len()).map(|k| gt.area(k)).sum();
    let pred_total: usize = (1..=pred.len()).map(|k| pred.area(k)).sum();
    let mut forward = 0.0;
    for gi in 0..gt.len() {
        let w = gt.area(gi + 1) as f64 / gt_total as f64;
        let best = best_overlaps(&inter, gi, pred.len(), false)
            .into_iter()
            .map(|pj| dice(inter[[gi, pj]], gt.area(gi + 1), pred.area(pj + 1)))
            .fold(f64::NAN, f64::max);
        if !best.is_nan() {
            forward += w * best;
        }
    }
    let mut backward = 0.0;
    if pred_total > 0 {
        for pj in 0..pred.len() {
            let w = pred.area(pj + 1) as f64 / pred_total as f64;
            let best = best_overlaps(&inter, pj, gt.len(), true)
                .into_iter()
                .map(|gi| dice(inter[[gi, pj]], gt.area(gi + 1), pred.area(pj + 1)))
                .fold(f64::NAN, f64::max);
            if !best.is_nan() {
                backward += w * best;
            }
        }
    }
    Ok(0.5 * (forward + backward))
}

fn hausdorff(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    let directed = |from: &[[f64; 2]], to: &[[f64; 2]]| {
        from.iter()
            .map(|p| {
                to.iter()
                    .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    };
    directed(a, b).max(directed(b, a))
}

/// GlaS object-level Hausdorff: per-object boundary Hausdorff against
/// the maximally overlapping counterpart, area-weighted within each
/// direction, the two directions averaged. No counterpart costs the
/// image diagonal; a tie in the top overlap resolves to the lower
/// distance.
pub fn object_hausdorff(
    pred: &InstanceLabeling,
    gt: &InstanceLabeling,
) -> Result<f64, MetricsError> {
    check_shapes(pred, gt)?;
    if gt.is_empty() {
        return Err(MetricsError::EmptyGroundTruth);
    }
    let [h, w] = gt.shape();
    let diagonal = ((h * h + w * w) as f64).sqrt();
    let inter = intersections(gt, pred);
    let gt_total: usize = (1..=gt.len()).map(|k| gt.area(k)).sum();
    let pred_total: usize = (1..=pred.len()).map(|k| pred.area(k)).sum();
    let gt_bounds: Vec<_> = (1..=gt.len()).map(|k| gt.boundary(k as u32)).collect();
    let pred_bounds: Vec<_> = (1..=pred.len()).map(|k| pred.boundary(k as u32)).collect();

    let mut forward = 0.0;
    for gi in 0..gt.len() {
        let weight = gt.area(gi + 1) as f64 / gt_total as f64;
        let best = best_overlaps(&inter, gi, pred.len(), false)
            .into_iter()
            .map(|pj| hausdorff(&gt_bounds[gi], &pred_bounds[pj]))
            .fold(f64::INFINITY, f64::min);
        forward += weight * if best.is_finite() { best } else { diagonal };
    }
    let mut backward = 0.0;
    if pred_total > 0 {
        for pj in 0..pred.len() {
            let weight = pred.area(pj + 1) as f64 / pred_total as f64;
            let best = best_overlaps(&inter, pj, gt.len(), true)
                .into_iter()
                .map(|gi| hausdorff(&gt_bounds[gi], &pred_bounds[pj]))
                .fold(f64::INFINITY, f64::min);
            backward += weight * if best.is_finite() { best } else { diagonal };
        }
    }
    Ok(0.5 * (forward + backward))
}

/// Write an instance label map as a 16-bit grayscale png, the exchange
/// format the evaluate command reads. Labels above 65535 do not fit and
/// are rejected rather than truncated.
pub fn save_label_png(path: &Path, labels: &Array2<u32>) -> Result<(), MetricsError> {
    let (h, w) = labels.dim();
    let mut raw = Vec::with_capacity(h * w);
    for &v in labels.iter() {
        if v > u16::MAX as u32 {
            return Err(MetricsError::LabelRange {
                path: path.to_path_buf(),
                label: v,
            });
        }
        raw.push(v as u16);
    }
    let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(w as u32, h as u32, raw)
        .expect("buffer length matches dimensions");
    img.save(path).map_err(|source| MetricsError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Read a label map written by [`save_label_png`]. Only genuine 16-bit
/// grayscale images are accepted: an 8-bit file would be rescaled by
/// the decoder and silently corrupt the instance ids.
pub fn load_label_png(path: &Path) -> Result<Array2<u32>, MetricsError> {
    let img = image::open(path).map_err(|source| MetricsError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let image::DynamicImage::ImageLuma16(buf) = img else {
        return Err(MetricsError::NotLuma16 {
            path: path.to_path_buf(),
        });
    };
    let (w, h) = buf.dimensions();
    let raw: Vec<u32> = buf.into_raw().into_iter().map(u32::from).collect();
    Ok(Array2::from_shape_vec((h as usize, w as usize), raw)
        .expect("buffer length matches dimensions"))
}
