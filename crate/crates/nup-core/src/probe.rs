//! Downstream probes for exported weights: a frozen-encoder linear
//! classification probe and a small detection fine-tune.
//!
//! Both are smoke-level transfer harnesses, not benchmark reproductions:
//! they prove an export loads bitwise, that frozen parameters stay
//! frozen, and that the loaded features are usable. All probe data is
//! synthesized, so no external datasets are involved.
//!
//! The linear probe demands an encoder-scope export, freezes the
//! backbone, pools the deepest backbone map into one feature vector per
//! image, and fits a multinomial logistic head by plain gradient descent
//! (the head lives outside the parameter store, so the backbone cannot
//! move by construction; the report still carries an explicit bitwise
//! check). The detection fine-tune demands an fpn-scope export, freezes
//! everything the export covers, trains only the instance branch on
//! annotated mask images, and reports instance metrics.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3, Array4};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{export_scope, load_matching_params, Archive, ArchiveError, ArchiveKind, ExportScope};
use crate::data::{
    histology_standin, load_and_augment, load_image_rgb, normalize, DataConfig, DataError,
    DatasetManifest, ManifestEntry,
};
use crate::metrics::{detection_f1, InstanceLabeling, MetricsError, PqAccumulator};
use crate::models::{Detections, FpnConfig, ModelError, SegTargets, Segmenter};
use crate::nn::Ctx;
use crate::synth::{synthesize_image, SynthConfig, SynthError};
use crate::tensor::{Adam, Graph, ParamId, ParamStore, Scope};
use crate::train::TrainError;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("export scope mismatch: need {want}, archive has {got}")]
    ScopeMismatch { want: String, got: String },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("archive does not load cleanly: {0}")]
    LoadMismatch(String),
}

impl From<TrainError> for ProbeError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Archive(a) => ProbeError::Archive(a),
            TrainError::Model(m) => ProbeError::Model(m),
            TrainError::Data(d) => ProbeError::Data(d),
            TrainError::Io(io) => ProbeError::Io(io),
            TrainError::Json(j) => ProbeError::Json(j),
            other => ProbeError::InvalidConfig(other.to_string()),
        }
    }
}

/// One labeled classification sample.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ClassEntry {
    pub image: PathBuf,
    pub label: usize,
}

/// Labeled toy dataset: `{classes: [names], entries: [{image, label}]}`.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct ClassManifest {
    pub classes: Vec<String>,
    pub entries: Vec<ClassEntry>,
}

impl ClassManifest {
    pub fn load(path: &Path) -> Result<ClassManifest, ProbeError> {
        let text = std::fs::read_to_string(path)?;
        let mut m: ClassManifest = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for e in &mut m.entries {
            if !e.image.is_absolute() {
                e.image = base.join(&e.image);
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), ProbeError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ProbeError> {
        if self.classes.len() < 2 {
            return Err(ProbeError::InvalidConfig("need at least two classes".into()));
        }
        if self.entries.is_empty() {
            return Err(ProbeError::InvalidConfig("no labeled samples".into()));
        }
        for e in &self.entries {
            if e.label >= self.classes.len() {
                return Err(ProbeError::InvalidConfig(format!(
                    "label {} out of range for {} classes",
                    e.label,
                    self.classes.len()
                )));
            }
            if !e.image.is_file() {
                return Err(ProbeError::Data(DataError::MissingFile(e.image.clone())));
            }
        }
        Ok(())
    }
}

/// Synthesize a two-class texture dataset from nucleus-mask stand-in
/// renderings. Class one gets its red and blue channels swapped (a
/// gross stain shift) plus a periodic horizontal banding (a texture
/// signature); both survive the backbone's normalization layers, so the
/// task is linearly separable from pooled features by design and
/// exercises the probe machinery rather than the encoder's quality.
pub fn toy_class_dataset(
    dir: &Path,
    per_class: usize,
    image_size: usize,
    seed: u64,
) -> Result<ClassManifest, ProbeError> {
    if per_class == 0 {
        return Err(ProbeError::InvalidConfig("need at least one sample per class".into()));
    }
    std::fs::create_dir_all(dir)?;
    let synth = SynthConfig { image_size, ..SynthConfig::default() };
    let mut m = ClassManifest {
        classes: vec!["baseline".into(), "shifted".into()],
        entries: Vec::new(),
    };
    for label in 0..2usize {
        for i in 0..per_class {
            let idx = (label * per_class + i) as u64;
            let (mask, _, _) = synthesize_image(&synth, seed, idx, &format!("c{label}i{i}"))?;
            let mut rng = crate::rng::substream(seed, "probe-texture", idx);
            let mut tex = histology_standin(&mask, &mut rng);
            if label == 1 {
                let (h, w, _) = tex.dim();
                for r in 0..h {
                    for c in 0..w {
                        tex.swap([r, c, 0], [r, c, 2]);
                    }
                }
                for r in 0..h {
                    if (r / 4) % 2 == 0 {
                        for c in 0..w {
                            for ch in 0..3 {
                                tex[[r, c, ch]] = (tex[[r, c, ch]] as f32 * 0.35) as u8;
                            }
                        }
                    }
                }
            }
            let path = dir.join(format!("class{label}_{i:04}.png"));
            let (h, w, _) = tex.dim();
            let mut buf = image::RgbImage::new(w as u32, h as u32);
            for r in 0..h {
                for c in 0..w {
                    buf.put_pixel(
                        c as u32,
                        r as u32,
                        image::Rgb([tex[[r, c, 0]], tex[[r, c, 1]], tex[[r, c, 2]]]),
                    );
                }
            }
            buf.save(&path).map_err(DataError::Image)?;
            m.entries.push(ClassEntry { image: path, label });
        }
    }
    Ok(m)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LinearProbeConfig {
    pub seed: u64,
    /// Full-batch gradient-descent epochs for the logistic head.
    pub epochs: usize,
    pub lr: f32,
    /// Leading fraction of the shuffled samples used for head training;
    /// the rest is the evaluation split.
    pub train_fraction: f32,
    /// Images per feature-extraction forward pass.
    pub batch: usize,
    pub segmenter: FpnConfig,
}

impl Default for LinearProbeConfig {
    fn default() -> Self {
        LinearProbeConfig {
            seed: 0,
            epochs: 300,
            lr: 0.5,
            train_fraction: 0.8,
            batch: 8,
            segmenter: FpnConfig::default(),
        }
    }
}

impl LinearProbeConfig {
    pub fn validate(&self) -> Result<(), ProbeError> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(ProbeError::InvalidConfig("epochs and batch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(ProbeError::InvalidConfig("lr must be positive".into()));
        }
        if !(0.0 < self.train_fraction && self.train_fraction < 1.0) {
            return Err(ProbeError::InvalidConfig("train_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ProbeReport {
    pub task: String,
    pub accuracy: f64,
    pub f1: f64,
    pub n_train: usize,
    pub n_eval: usize,
    pub classes: Vec<String>,
    /// Bitwise before/after equality of every frozen parameter.
    pub frozen_intact: bool,
}

fn bits_snapshot(store: &ParamStore, ids: &[ParamId]) -> Vec<Vec<u32>> {
    ids.iter()
        .map(|&id| store.value(id).iter().map(|v| v.to_bits()).collect())
        .collect()
}

/// Build a segmenter, load the export into it, and hand back the pieces.
/// Every tensor in the archive must land on a parameter; the load is
/// refused otherwise.
fn load_into_fresh(
    archive: &Archive,
    want: ExportScope,
    cfg: &FpnConfig,
    seed: u64,
) -> Result<(ParamStore, Segmenter, Vec<String>), ProbeError> {
    archive.expect_kind(ArchiveKind::Export)?;
    match export_scope(archive) {
        Some(s) if s == want => {}
        got => {
            return Err(ProbeError::ScopeMismatch {
                want: want.as_str().to_string(),
                got: got.map(|s| s.as_str().to_string()).unwrap_or_else(|| "none".into()),
            })
        }
    }
    let mut store = ParamStore::new();
    let seg = {
        let mut root = Scope::root(&mut store);
        Segmenter::new(cfg, &mut root.child("s"), &mut crate::rng::stream(seed, "probe-init"))?
    };
    let loaded = load_matching_params(archive, &mut store)?;
    if loaded.len() != archive.len() {
        return Err(ProbeError::LoadMismatch(format!(
            "{} of {} archive tensors matched a parameter; the architecture \
             config does not match the export",
            loaded.len(),
            archive.len()
        )));
    }
    Ok((store, seg, loaded))
}

/// Pooled backbone features, one row per image: the per-channel spatial
/// mean and standard deviation of every backbone stage, concatenated.
/// The second moment carries texture energy the plain mean discards.
fn pooled_features(
    store: &ParamStore,
    seg: &Segmenter,
    images: &[Array3<f32>],
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f32>, ProbeError> {
    let ids = store.all_ids();
    let mut rows: Vec<Vec<f32>> = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch) {
        let b = chunk.len();
        let (c, h, w) = chunk[0].dim();
        let mut batch_arr = Array4::<f32>::zeros((b, c, h, w));
        for (i, img) in chunk.iter().enumerate() {
            if img.dim() != (c, h, w) {
                return Err(ProbeError::InvalidConfig(
                    "probe images must share one size".into(),
                ));
            }
            batch_arr.slice_mut(ndarray::s![i, .., .., ..]).assign(img);
        }
        let graph = Graph::new();
        let bound = store.bind_const(&graph, &ids);
        let cx = Ctx { g: graph.clone(), p: &bound, train: false, rng };
        let img_t = graph.constant(batch_arr.into_dyn());
        let maps = seg.backbone(&cx, &img_t)?;
        let mut batch_rows: Vec<Vec<f32>> = vec![Vec::new(); b];
        for map in &maps {
            let sh = map.shape();
            let vals = map.value();
            let (ch, fh, fw) = (sh[1], sh[2], sh[3]);
            let n = (fh * fw) as f64;
            for (i, row) in batch_rows.iter_mut().enumerate() {
                for k in 0..ch {
                    let mut acc = 0f64;
                    let mut acc2 = 0f64;
                    for y in 0..fh {
                        for x in 0..fw {
                            let u = vals[[i, k, y, x]] as f64;
                            acc += u;
                            acc2 += u * u;
                        }
                    }
                    let m = acc / n;
                    row.push(m as f32);
                    row.push((acc2 / n - m * m).max(0.0).sqrt() as f32);
                }
            }
        }
        rows.extend(batch_rows);
    }
    let d = rows.first().map(|r| r.len()).unwrap_or(0);
    let flat: Vec<f32> = rows.into_iter().flatten().collect();
    Ok(Array2::from_shape_vec((flat.len() / d.max(1), d), flat)
        .expect("rows share one width"))
}

/// Multinomial logistic head fit by full-batch gradient descent on
/// standardized features.
struct LogisticHead {
    w: Array2<f32>,
    b: Array1<f32>,
    mean: Array1<f32>,
    std: Array1<f32>,
}

impl LogisticHead {
    fn fit(feats: &Array2<f32>, labels: &[usize], k: usize, epochs: usize, lr: f32) -> LogisticHead {
        let (n, d) = feats.dim();
        let mut mean = Array1::<f32>::zeros(d);
        let mut std = Array1::<f32>::zeros(d);
        for j in 0..d {
            let col = feats.column(j);
            let m: f32 = col.sum() / n as f32;
            let v: f32 = col.iter().map(|x| (x - m) * (x - m)).sum::<f32>() / n as f32;
            mean[j] = m;
            std[j] = v.sqrt().max(1e-6);
        }
        let xs = {
            let mut xs = feats.clone();
            for j in 0..d {
                let (m, s) = (mean[j], std[j]);
                xs.column_mut(j).mapv_inplace(|x| (x - m) / s);
            }
            xs
        };
        let mut w = Array2::<f32>::zeros((k, d));
        let mut b = Array1::<f32>::zeros(k);
        for _ in 0..epochs {
            // logits [n, k]
            let logits = xs.dot(&w.t()) + &b;
            let mut gw = Array2::<f32>::zeros((k, d));
            let mut gb = Array1::<f32>::zeros(k);
            for i in 0..n {
                let row = logits.row(i);
                let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let exps: Vec<f32> = row.iter().map(|&v| (v - mx).exp()).collect();
                let z: f32 = exps.iter().sum();
                for c in 0..k {
                    let p = exps[c] / z - if labels[i] == c { 1.0 } else { 0.0 };
                    gb[c] += p;
                    for j in 0..d {
                        gw[[c, j]] += p * xs[[i, j]];
                    }
                }
            }
            let scale = lr / n as f32;
            w.scaled_add(-scale, &gw);
            b.scaled_add(-scale, &gb);
        }
        LogisticHead { w, b, mean, std }
    }

    fn predict(&self, feat: ndarray::ArrayView1<f32>) -> usize {
        let k = self.w.dim().0;
        let mut best = (0usize, f32::NEG_INFINITY);
        for c in 0..k {
            let mut z = self.b[c];
            for j in 0..feat.len() {
                z += self.w[[c, j]] * (feat[j] - self.mean[j]) / self.std[j];
            }
            if z > best.1 {
                best = (c, z);
            }
        }
        best.0
    }
}

/// Macro-averaged F1 over classes; a class absent from both the labels
/// and the predictions contributes nothing.
pub fn macro_f1(pred: &[usize], truth: &[usize], k: usize) -> f64 {
    assert_eq!(pred.len(), truth.len());
    let mut f1s = Vec::new();
    for c in 0..k {
        let tp = pred.iter().zip(truth).filter(|(p, t)| **p == c && **t == c).count();
        let fp = pred.iter().zip(truth).filter(|(p, t)| **p == c && **t != c).count();
        let fn_ = pred.iter().zip(truth).filter(|(p, t)| **p != c && **t == c).count();
        if tp + fp + fn_ == 0 {
            continue;
        }
        f1s.push(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64);
    }
    if f1s.is_empty() {
        return 0.0;
    }
    f1s.iter().sum::<f64>() / f1s.len() as f64
}

/// Linear evaluation: freeze an encoder-scope export, pool its deepest
/// features, fit a logistic head on the training split, report held-out
/// accuracy and macro-F1.
pub fn linear_probe(
    archive: &Archive,
    manifest: &ClassManifest,
    cfg: &LinearProbeConfig,
) -> Result<ProbeReport, ProbeError> {
    cfg.validate()?;
    manifest.validate()?;
    let (store, seg, _) = load_into_fresh(archive, ExportScope::Encoder, &cfg.segmenter, cfg.seed)?;
    let frozen_ids = store.all_ids();
    let before = bits_snapshot(&store, &frozen_ids);

    let mut images = Vec::with_capacity(manifest.entries.len());
    let mut labels = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        images.push(normalize(&load_image_rgb(&e.image)?));
        labels.push(e.label);
    }
    let mut rng = crate::rng::stream(cfg.seed, "probe-linear");
    let feats = pooled_features(&store, &seg, &images, cfg.batch, &mut rng)?;

    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut rng);
    let n_train = ((images.len() as f32 * cfg.train_fraction).round() as usize)
        .clamp(1, images.len() - 1);
    let (train_idx, eval_idx) = order.split_at(n_train);

    let k = manifest.classes.len();
    let d = feats.dim().1;
    let mut tr = Array2::<f32>::zeros((train_idx.len(), d));
    let mut tr_labels = Vec::with_capacity(train_idx.len());
    for (row, &i) in train_idx.iter().enumerate() {
        tr.row_mut(row).assign(&feats.row(i));
        tr_labels.push(labels[i]);
    }
    let head = LogisticHead::fit(&tr, &tr_labels, k, cfg.epochs, cfg.lr);

    let mut pred = Vec::with_capacity(eval_idx.len());
    let mut truth = Vec::with_capacity(eval_idx.len());
    for &i in eval_idx {
        pred.push(head.predict(feats.row(i)));
        truth.push(labels[i]);
    }
    let correct = pred.iter().zip(&truth).filter(|(p, t)| p == t).count();
    let accuracy = correct as f64 / pred.len().max(1) as f64;
    let f1 = macro_f1(&pred, &truth, k);
    let frozen_intact = bits_snapshot(&store, &frozen_ids) == before;
    Ok(ProbeReport {
        task: "linear".into(),
        accuracy,
        f1,
        n_train: train_idx.len(),
        n_eval: eval_idx.len(),
        classes: manifest.classes.clone(),
        frozen_intact,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DetectFinetuneConfig {
    pub seed: u64,
    pub steps: usize,
    pub lr: f32,
    pub batch: usize,
    /// Images scored with the instance metrics after fine-tuning.
    pub eval_images: usize,
    /// IoU threshold for the detection-F1 matching.
    pub iou_threshold: f64,
    pub segmenter: FpnConfig,
    pub data: DataConfig,
}

impl Default for DetectFinetuneConfig {
    fn default() -> Self {
        DetectFinetuneConfig {
            seed: 0,
            steps: 200,
            lr: 1e-3,
            batch: 2,
            eval_images: 8,
            iou_threshold: 0.5,
            segmenter: FpnConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl DetectFinetuneConfig {
    pub fn validate(&self) -> Result<(), ProbeError> {
        if self.steps == 0 || self.batch == 0 {
            return Err(ProbeError::InvalidConfig("steps and batch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(ProbeError::InvalidConfig("lr must be positive".into()));
        }
        if !(0.0 < self.iou_threshold && self.iou_threshold < 1.0) {
            return Err(ProbeError::InvalidConfig("iou_threshold must lie in (0, 1)".into()));
        }
        self.data.validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DetectReport {
    pub task: String,
    /// Mean instance loss over the first tenth of the steps.
    pub l_seg_first: f32,
    /// Mean instance loss over the last tenth of the steps.
    pub l_seg_last: f32,
    pub mpq_plus: f64,
    pub detection_f1: f64,
    pub n_eval: usize,
    pub frozen_intact: bool,
}

/// Rasterize one instance set into a labeled map, later instances
/// overwriting earlier ones where they overlap.
fn paint_labeling(
    masks: &[Vec<bool>],
    classes: &[u8],
    h: usize,
    w: usize,
) -> Result<InstanceLabeling, MetricsError> {
    let mut canvas = Array2::<u32>::zeros((h, w));
    let mut kept_classes = Vec::new();
    let mut next = 0u32;
    for (mask, &cls) in masks.iter().zip(classes) {
        let mut any = false;
        for (i, &on) in mask.iter().enumerate() {
            if on {
                canvas[[i / w, i % w]] = next + 1;
                any = true;
            }
        }
        if any {
            next += 1;
            kept_classes.push(cls);
        }
    }
    // Overwriting can erase an earlier instance entirely; compact ids.
    let mut remap = vec![0u32; next as usize + 1];
    let mut used = vec![false; next as usize + 1];
    for &l in canvas.iter() {
        if l > 0 {
            used[l as usize] = true;
        }
    }
    let mut compact_classes = Vec::new();
    let mut cur = 0u32;
    for (old, &u) in used.iter().enumerate().skip(1) {
        if u {
            cur += 1;
            remap[old] = cur;
            compact_classes.push(kept_classes[old - 1]);
        }
    }
    canvas.mapv_inplace(|l| remap[l as usize]);
    InstanceLabeling::with_classes(canvas, compact_classes)
}

fn targets_labeling(t: &SegTargets) -> Result<InstanceLabeling, MetricsError> {
    paint_labeling(&t.masks, &t.classes, t.height, t.width)
}

fn detections_labeling(d: &Detections, h: usize, w: usize) -> Result<InstanceLabeling, MetricsError> {
    paint_labeling(&d.masks, &d.classes, h, w)
}

/// Fine-tune the instance branch on annotated mask images with the
/// export-covered backbone and pyramid frozen, then score the training
/// split with the instance metrics.
pub fn detection_finetune(
    archive: &Archive,
    manifest: &DatasetManifest,
    cfg: &DetectFinetuneConfig,
) -> Result<DetectReport, ProbeError> {
    cfg.validate()?;
    if manifest.domain_x.is_empty() {
        return Err(ProbeError::Data(DataError::EmptyDomain('X')));
    }
    let (mut store, seg, loaded) =
        load_into_fresh(archive, ExportScope::Fpn, &cfg.segmenter, cfg.seed)?;
    let frozen_ids: Vec<ParamId> = loaded
        .iter()
        .map(|n| store.lookup(n).expect("loaded names exist"))
        .collect();
    let head_ids: Vec<ParamId> = [
        store.ids_with_prefix("s.rpn"),
        store.ids_with_prefix("s.box"),
        store.ids_with_prefix("s.mask"),
    ]
    .concat();
    let before = bits_snapshot(&store, &frozen_ids);

    let mut rng = crate::rng::stream(cfg.seed, "probe-detect");
    let mut opt = Adam::new(0.9, 0.999, 1e-8);
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut imgs = Vec::with_capacity(cfg.batch);
        let mut targets = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let pick = rng.gen_range(0..manifest.domain_x.len());
            let (img, t) =
                load_and_augment(ManifestEntry::X(&manifest.domain_x[pick]), &cfg.data, &mut rng)?;
            imgs.push(img);
            targets.push(t.expect("domain X always carries annotations"));
        }
        let crop = cfg.data.crop;
        let mut batch = Array4::<f32>::zeros((cfg.batch, 3, crop, crop));
        for (i, img) in imgs.iter().enumerate() {
            batch.slice_mut(ndarray::s![i, .., .., ..]).assign(img);
        }
        let graph = Graph::new();
        let bound = store
            .bind(&graph, &head_ids)
            .merge(store.bind_const(&graph, &frozen_ids));
        let mut cx = Ctx { g: graph.clone(), p: &bound, train: true, rng: &mut rng };
        let img_t = graph.constant(batch.into_dyn());
        let comps = seg.instance_forward(&mut cx, &img_t, &targets)?;
        let loss = comps.total();
        drop(cx);
        store.zero_grad(&head_ids);
        bound.backward(&mut store, &loss);
        opt.step(&mut store, &head_ids, cfg.lr);
        store.zero_grad(&head_ids);
        losses.push(loss.item());
    }
    let tenth = (cfg.steps / 10).max(1);
    let l_seg_first = losses[..tenth].iter().sum::<f32>() / tenth as f32;
    let l_seg_last = losses[cfg.steps - tenth..].iter().sum::<f32>() / tenth as f32;

    // Deterministic evaluation pass on un-augmented crops of the
    // training split.
    let eval_cfg = DataConfig {
        scale_range: [1.0, 1.0],
        extra_flips: false,
        ..cfg.data
    };
    let mut pq = PqAccumulator::new();
    let mut f1_sum = 0.0;
    let n_eval = cfg.eval_images.min(manifest.domain_x.len());
    let mut eval_rng = crate::rng::stream(cfg.seed, "probe-detect-eval");
    for e in manifest.domain_x.iter().take(n_eval) {
        let (img, t) = load_and_augment(ManifestEntry::X(e), &eval_cfg, &mut eval_rng)?;
        let targets = t.expect("domain X always carries annotations");
        let crop = eval_cfg.crop;
        let mut one = Array4::<f32>::zeros((1, 3, crop, crop));
        one.slice_mut(ndarray::s![0, .., .., ..]).assign(&img);
        let graph = Graph::new();
        let bound = store.bind_const(&graph, &store.all_ids());
        let cx = Ctx { g: graph.clone(), p: &bound, train: false, rng: &mut eval_rng };
        let img_t = graph.constant(one.into_dyn());
        let det = seg.detect(&cx, &img_t)?;
        let pred = detections_labeling(&det, crop, crop)?;
        let gt = targets_labeling(&targets)?;
        pq.add_image(&pred, &gt)?;
        f1_sum += detection_f1(&pred, &gt, cfg.iou_threshold)?;
    }
    let mpq_plus = pq.mpq().unwrap_or(0.0);
    let detection_f1 = if n_eval > 0 { f1_sum / n_eval as f64 } else { 0.0 };
    let frozen_intact = bits_snapshot(&store, &frozen_ids) == before;
    Ok(DetectReport {
        task: "detect".into(),
        l_seg_first,
        l_seg_last,
        mpq_plus,
        detection_f1,
        n_eval,
        frozen_intact,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::export;
    use crate::data::EntryX;
    use crate::synth::{save_annotations, save_mask_png};
    use crate::train::{streams, TrainConfig};

    fn micro_fpn() -> FpnConfig {
        FpnConfig {
            stem_channels: 8,
            stage_channels: [8, 8, 8, 8, 8],
            fpn_channels: 8,
            gn_groups: 4,
            head_dim: 16,
            rpn_batch: 16,
            post_nms_top: 8,
            pre_nms_top: 16,
            roi_batch: 4,
            ..FpnConfig::default()
        }
    }

    /// Checkpoint-shaped archive holding a fresh segmenter, exported at
    /// the wanted scope.
    fn fresh_export(cfg: &FpnConfig, seed: u64, scope: ExportScope) -> Archive {
        let mut store = ParamStore::new();
        {
            let mut root = Scope::root(&mut store);
            Segmenter::new(cfg, &mut root.child("s"), &mut crate::rng::stream(seed, streams::INIT_S))
                .unwrap();
        }
        let mut ckpt = Archive::new(ArchiveKind::Checkpoint);
        crate::checkpoint::pack_params(&mut ckpt, &store, &store.all_ids()).unwrap();
        ckpt.meta = serde_json::json!({"config": TrainConfig::default()});
        export(&ckpt, scope).unwrap()
    }

    #[test]
    fn toy_dataset_is_learnable_and_probe_reports_high_accuracy() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = toy_class_dataset(dir.path(), 24, 64, 11).unwrap();
        assert_eq!(manifest.entries.len(), 48);
        let cfg = LinearProbeConfig { segmenter: micro_fpn(), ..LinearProbeConfig::default() };
        let archive = fresh_export(&cfg.segmenter, 3, ExportScope::Encoder);
        let report = linear_probe(&archive, &manifest, &cfg).unwrap();
        assert!(report.frozen_intact);
        assert!(
            report.accuracy > 0.95,
            "separable task should be nearly solved, got {}",
            report.accuracy
        );
        assert!(report.f1 > 0.9, "macro-F1 {}", report.f1);
    }

    #[test]
    fn random_labels_score_near_chance() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = toy_class_dataset(dir.path(), 30, 64, 13).unwrap();
        // Scramble the labels with a seeded draw; the held-out accuracy
        // should collapse to coin flipping.
        let mut rng = crate::rng::stream(99, "scramble");
        for e in &mut manifest.entries {
            e.label = rng.gen_range(0..2);
        }
        if manifest.entries.iter().all(|e| e.label == 0) {
            manifest.entries[0].label = 1;
        }
        let cfg = LinearProbeConfig { segmenter: micro_fpn(), ..LinearProbeConfig::default() };
        let archive = fresh_export(&cfg.segmenter, 3, ExportScope::Encoder);
        let report = linear_probe(&archive, &manifest, &cfg).unwrap();
        assert!(
            (report.accuracy - 0.5).abs() <= 0.25,
            "random labels should hover near chance, got {}",
            report.accuracy
        );
    }

    #[test]
    fn wrong_scope_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = toy_class_dataset(dir.path(), 2, 64, 17).unwrap();
        let cfg = LinearProbeConfig { segmenter: micro_fpn(), ..LinearProbeConfig::default() };
        let archive = fresh_export(&cfg.segmenter, 3, ExportScope::Fpn);
        match linear_probe(&archive, &manifest, &cfg) {
            Err(ProbeError::ScopeMismatch { want, got }) => {
                assert_eq!(want, "encoder");
                assert_eq!(got, "fpn");
            }
            other => panic!("expected scope mismatch, got {:?}", other.map(|r| r.task)),
        }
    }

    #[test]
    fn mismatched_architecture_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = toy_class_dataset(dir.path(), 2, 64, 19).unwrap();
        let archive = fresh_export(&micro_fpn(), 3, ExportScope::Encoder);
        let cfg = LinearProbeConfig {
            segmenter: FpnConfig { stem_channels: 4, ..micro_fpn() },
            ..LinearProbeConfig::default()
        };
        match linear_probe(&archive, &manifest, &cfg) {
            Err(ProbeError::Archive(_) | ProbeError::LoadMismatch(_)) => {}
            other => panic!("expected load refusal, got {:?}", other.map(|r| r.task)),
        }
    }

    fn mask_image_manifest(dir: &Path, n: usize) -> DatasetManifest {
        let synth = SynthConfig { image_size: 80, ..SynthConfig::default() };
        let mut m = DatasetManifest::default();
        for i in 0..n {
            let (img, ann, _) = synthesize_image(&synth, 41, i as u64, &format!("d{i}")).unwrap();
            let ip = dir.join(format!("d{i}.png"));
            let ap = dir.join(format!("d{i}.json"));
            save_mask_png(&ip, &img).unwrap();
            save_annotations(&ap, &ann).unwrap();
            m.domain_x.push(EntryX { image: ip, annotations: ap });
        }
        m
    }

    #[test]
    fn detection_finetune_trains_heads_keeps_export_frozen_and_reports_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = mask_image_manifest(dir.path(), 4);
        let cfg = DetectFinetuneConfig {
            steps: 10,
            eval_images: 2,
            segmenter: micro_fpn(),
            data: DataConfig { crop: 64, ..DataConfig::default() },
            ..DetectFinetuneConfig::default()
        };
        let archive = fresh_export(&cfg.segmenter, 7, ExportScope::Fpn);
        let report = detection_finetune(&archive, &manifest, &cfg).unwrap();
        assert!(report.frozen_intact, "export-covered parameters moved");
        assert!(report.l_seg_first.is_finite() && report.l_seg_last.is_finite());
        assert!((0.0..=1.0).contains(&report.mpq_plus), "mPQ+ {}", report.mpq_plus);
        assert!(
            (0.0..=1.0).contains(&report.detection_f1),
            "detection F1 {}",
            report.detection_f1
        );
        assert_eq!(report.n_eval, 2);
    }

    #[test]
    fn detection_finetune_demands_fpn_scope() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = mask_image_manifest(dir.path(), 2);
        let cfg = DetectFinetuneConfig {
            steps: 1,
            segmenter: micro_fpn(),
            data: DataConfig { crop: 64, ..DataConfig::default() },
            ..DetectFinetuneConfig::default()
        };
        let archive = fresh_export(&cfg.segmenter, 7, ExportScope::AllAvailable);
        match detection_finetune(&archive, &manifest, &cfg) {
            Err(ProbeError::ScopeMismatch { want, got }) => {
                assert_eq!(want, "fpn");
                assert_eq!(got, "all_available");
            }
            other => panic!("expected scope mismatch, got {:?}", other.map(|r| r.task)),
        }
    }

    #[test]
    fn labeling_painter_compacts_fully_overwritten_instances() {
        // Second mask completely covers the first; the first id must not
        // linger as an empty label.
        let h = 4;
        let w = 4;
        let mut a = vec![false; 16];
        a[5] = true;
        let mut b = vec![false; 16];
        b[5] = true;
        b[6] = true;
        let lab = paint_labeling(&[a, b], &[1, 1], h, w).unwrap();
        assert_eq!(lab.len(), 1);
    }
}
