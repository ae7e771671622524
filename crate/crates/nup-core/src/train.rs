//! The alternating training loop and its two-stage schedule.
//!
//! Each step runs two phases on one unpaired batch. The discriminator
//! phase scores real images against detached fakes (generator and
//! segmenter weights enter the graph as constants, so no gradient can
//! reach them), applies the shared ADA plan to both inputs of the image
//! discriminator, and adds an R1 penalty on each discriminator's real
//! input. The generator phase redraws the noise, runs both cycles, adds
//! the instance-branch loss on the translated image against the mask
//! annotations, and updates the generator and segmenter jointly under the
//! weighted objective.
//!
//! The schedule trains every network in stage one, then reinitializes the
//! segmenter and the mask discriminator from fresh named streams at each
//! stage boundary while the generator side continues, preserving its
//! optimizer moments. A single-stage schedule is the ablation mode and
//! performs no reinit. Desk-scale defaults: (2000 iterations at 4e-4,
//! then 1250 at 1e-4) at 64-pixel crops, keeping the 40k:25k ratio of the
//! full-scale recipe, which runs batch 12 at 256 pixels.
//!
//! Every random draw flows from named substreams of the config seed, so a
//! seeded run replays bit-identically, including across a checkpoint
//! resume (model RNG, sampler RNG, optimizer moments, and the ADA
//! controller all round-trip through the checkpoint archive).

use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ada::{AdaConfig, AdaState, AugmentPlan};
use crate::checkpoint::{
    export, load_matching_params, pack_adam, pack_params, unpack_adam, Archive, ArchiveError,
    ArchiveKind, ExportScope,
};
use crate::data::{Batch, DataConfig, DataError, DatasetManifest, UnpairedBatcher};
use crate::losses::{
    cycle_loss, dg_disc_loss, dg_gen_loss, ds_disc_loss, ds_gen_loss, r1_penalty, total_loss,
    LossWeights,
};
use crate::models::{
    ComodConfig, DgConfig, DiscSConfig, DiscriminatorG, DiscriminatorS, FpnConfig, Generator,
    ModelError, Segmenter,
};
use crate::nn::Ctx;
use crate::tensor::{Adam, Graph, ParamId, ParamStore, Scope};

/// Named RNG streams drawn from the run seed. Reinit streams are indexed
/// by the stage being entered, so a fresh single-network build from the
/// same stream reproduces the post-reinit parameters bit for bit.
pub mod streams {
    pub const INIT_G: &str = "init-g";
    pub const INIT_S: &str = "init-s";
    pub const INIT_DG: &str = "init-dg";
    pub const INIT_DS: &str = "init-ds";
    pub const TRAIN: &str = "train";
    pub const DATA: &str = "data";
    pub const REINIT_S: &str = "reinit-s";
    pub const REINIT_DS: &str = "reinit-ds";
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at iteration {iter}: {detail}")]
    NonFinite { iter: usize, detail: String },
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub iters: usize,
    pub lr: f32,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Images per domain per step (full-scale recipe: 12).
    pub batch: usize,
    pub weights: LossWeights,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    /// Stage schedule; one entry disables the reinit (ablation mode).
    /// Full-scale recipe: (40000, 4e-4), (25000, 1e-4).
    pub stages: Vec<StageSpec>,
    pub log_every: usize,
    pub generator: ComodConfig,
    pub disc_g: DgConfig,
    pub disc_s: DiscSConfig,
    pub segmenter: FpnConfig,
    pub ada: AdaConfig,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch: 2,
            weights: LossWeights::default(),
            beta1: 0.0,
            beta2: 0.99,
            adam_eps: 1e-8,
            stages: vec![
                StageSpec { iters: 2000, lr: 4e-4 },
                StageSpec { iters: 1250, lr: 1e-4 },
            ],
            log_every: 1,
            generator: ComodConfig::default(),
            disc_g: DgConfig::default(),
            disc_s: DiscSConfig::default(),
            segmenter: FpnConfig::default(),
            ada: AdaConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let w = &self.weights;
        for (name, v) in [
            ("lambda_mask_gan", w.lambda_mask_gan),
            ("lambda_cycle", w.lambda_cycle),
            ("lambda_seg", w.lambda_seg),
            ("gamma_g", w.gamma_g),
            ("gamma_s", w.gamma_s),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(TrainError::InvalidConfig(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if self.stages.is_empty() {
            return Err(TrainError::InvalidConfig("need at least one stage".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.iters == 0 || !(s.lr > 0.0 && s.lr.is_finite()) {
                return Err(TrainError::InvalidConfig(format!(
                    "stage {i} needs positive iters and lr"
                )));
            }
        }
        if self.batch == 0 {
            return Err(TrainError::InvalidConfig("batch must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(TrainError::InvalidConfig("log_every must be positive".into()));
        }
        let crop = self.data.crop;
        if self.generator.image_size != crop
            || self.disc_g.image_size != crop
            || self.disc_s.image_size != crop
        {
            return Err(TrainError::InvalidConfig(format!(
                "model image sizes must equal the crop size {crop}"
            )));
        }
        if crop % 64 != 0 {
            return Err(TrainError::InvalidConfig(
                "crop must be divisible by 64 for the segmenter".into(),
            ));
        }
        self.data.validate().map_err(TrainError::Data)?;
        self.ada
            .validate()
            .map_err(TrainError::InvalidConfig)?;
        Ok(())
    }

    fn total_iters(&self) -> usize {
        self.stages.iter().map(|s| s.iters).sum()
    }

    /// Global iteration at which each stage ends.
    fn stage_bounds(&self) -> Vec<usize> {
        let mut acc = 0;
        self.stages
            .iter()
            .map(|s| {
                acc += s.iters;
                acc
            })
            .collect()
    }
}

/// The four weighted objective components and their combined value, as
/// evaluated for one generator-phase step.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct LossBundle {
    pub l_gan_g: f32,
    pub l_gan_s: f32,
    pub l_cyc: f32,
    pub l_seg: f32,
    pub total: f32,
}

/// Discriminator-phase diagnostics.
#[derive(Clone, Copy, Debug, Serialize, PartialEq)]
pub struct DiscStats {
    pub loss_g: f32,
    pub loss_s: f32,
    pub r1_g: f32,
    pub r1_s: f32,
    /// Overfitting heuristic, present when this step closed an ADA window.
    pub rt: Option<f32>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct ReinitEvent {
    /// 1-based stage being entered.
    pub stage: usize,
    /// Global iteration count at the boundary.
    pub iter: usize,
}

/// Everything logged for one completed step.
#[derive(Clone, Copy, Debug, Serialize, PartialEq)]
pub struct StepRecord {
    pub iter: usize,
    /// 1-based stage.
    pub stage: usize,
    pub lr: f32,
    pub bundle: LossBundle,
    pub disc: DiscStats,
    pub ada_p: f64,
    pub ada_rt: f32,
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f32> {
    let n: usize = shape.iter().product();
    ArrayD::from_shape_vec(
        IxDyn(shape),
        (0..n)
            .map(|_| <StandardNormal as Distribution<f32>>::sample(&StandardNormal, rng))
            .collect(),
    )
    .unwrap()
}

pub struct Trainer {
    cfg: TrainConfig,
    store: ParamStore,
    g: Generator,
    s: Segmenter,
    dg: DiscriminatorG,
    ds: DiscriminatorS,
    opt_gs: Adam,
    opt_d: Adam,
    gs_ids: Vec<ParamId>,
    d_ids: Vec<ParamId>,
    ada: AdaState,
    batcher: UnpairedBatcher,
    rng_train: ChaCha8Rng,
    iter: usize,
    stage_idx: usize,
    events: Vec<ReinitEvent>,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, manifest: &DatasetManifest) -> Result<Trainer, TrainError> {
        cfg.validate()?;
        let seed = cfg.seed;
        let mut store = ParamStore::new();
        let (g, s, dg, ds) = {
            let mut root = Scope::root(&mut store);
            let g = Generator::new(
                &cfg.generator,
                &mut root.child("g"),
                &mut crate::rng::stream(seed, streams::INIT_G),
            )?;
            let s = Segmenter::new(
                &cfg.segmenter,
                &mut root.child("s"),
                &mut crate::rng::stream(seed, streams::INIT_S),
            )?;
            let dg = DiscriminatorG::new(
                &cfg.disc_g,
                &mut root.child("dg"),
                &mut crate::rng::stream(seed, streams::INIT_DG),
            )?;
            let ds = DiscriminatorS::new(
                &cfg.disc_s,
                &mut root.child("ds"),
                &mut crate::rng::stream(seed, streams::INIT_DS),
            )?;
            (g, s, dg, ds)
        };
        let gs_ids: Vec<ParamId> = [store.ids_with_prefix("g."), store.ids_with_prefix("s.")]
            .concat();
        let d_ids: Vec<ParamId> = [store.ids_with_prefix("dg."), store.ids_with_prefix("ds.")]
            .concat();
        let batcher = UnpairedBatcher::new(
            manifest,
            cfg.data,
            cfg.batch,
            crate::rng::stream(seed, streams::DATA),
        )?;
        Ok(Trainer {
            cfg: cfg.clone(),
            store,
            g,
            s,
            dg,
            ds,
            opt_gs: Adam::new(cfg.beta1, cfg.beta2, cfg.adam_eps),
            opt_d: Adam::new(cfg.beta1, cfg.beta2, cfg.adam_eps),
            gs_ids,
            d_ids,
            ada: AdaState::new(),
            batcher,
            rng_train: crate::rng::stream(seed, streams::TRAIN),
            iter: 0,
            stage_idx: 0,
            events: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn ada(&self) -> &AdaState {
        &self.ada
    }

    pub fn iter(&self) -> usize {
        self.iter
    }

    /// 0-based index of the stage currently training.
    pub fn stage_idx(&self) -> usize {
        self.stage_idx
    }

    pub fn events(&self) -> &[ReinitEvent] {
        &self.events
    }

    pub fn next_batch(&mut self) -> Result<Batch, TrainError> {
        Ok(self.batcher.next_batch()?)
    }

    fn dyn4(a: &ndarray::Array4<f32>) -> ArrayD<f32> {
        a.clone().into_dyn()
    }

    /// Phase (a): update both discriminators on one batch. Fakes are
    /// produced under constant generator weights, the ADA plan transforms
    /// the image discriminator's real and fake inputs alike, and each
    /// discriminator pays an R1 penalty at its real input. Feeds the real
    /// logits to the ADA controller.
    pub fn discriminator_step(&mut self, batch: &Batch, lr: f32) -> Result<DiscStats, TrainError> {
        let b = batch.x.dim().0;
        let w = self.cfg.weights;
        let graph = Graph::new();
        let bound = self
            .store
            .bind(&graph, &self.d_ids)
            .merge(self.store.bind_const(&graph, &self.gs_ids));
        let x_vals = Self::dyn4(&batch.x);
        let y_vals = Self::dyn4(&batch.y);
        let x_real = graph.constant(x_vals.clone());
        let y_real = graph.constant(y_vals);
        let mut cx = Ctx {
            g: graph.clone(),
            p: &bound,
            train: true,
            rng: &mut self.rng_train,
        };
        let z = graph.constant(randn(cx.rng, &[b, self.cfg.generator.z_dim]));
        let y_fake = self.g.generate(&mut cx, &x_real, &z)?;
        let x_fake = self.s.decode_mask(&cx, &y_real)?;

        let plan = AugmentPlan::draw(cx.rng, self.ada.p() as f32, &self.cfg.ada, b);
        // The R1 leaf is the discriminator's actual input, i.e. the
        // augmented real image.
        let y_real_in = graph.input(plan.apply(&y_real).value());
        let y_fake_in = plan.apply(&y_fake);
        let dg_real = self.dg.forward(&cx, &y_real_in)?;
        let dg_fake = self.dg.forward(&cx, &y_fake_in)?;
        let loss_dg = dg_disc_loss(&dg_real, &dg_fake);
        let r1_g = r1_penalty(&dg_real, &y_real_in, w.gamma_g);

        let x_real_in = graph.input(x_vals);
        let ds_real = self.ds.forward(&cx, &x_real_in)?;
        let ds_fake = self.ds.forward(&cx, &x_fake)?;
        let loss_ds = ds_disc_loss(&ds_real, &ds_fake);
        let r1_s = r1_penalty(&ds_real, &x_real_in, w.gamma_s);

        let objective = loss_dg
            .add(&r1_g)
            .add(&loss_ds.add(&r1_s).mul_scalar(w.lambda_mask_gan));
        let stats_logits: Vec<f32> = dg_real.value().iter().copied().collect();
        drop(cx);
        self.store.zero_grad(&self.d_ids);
        bound.backward(&mut self.store, &objective);
        self.opt_d.step(&mut self.store, &self.d_ids, lr);
        self.store.zero_grad(&self.d_ids);
        let rt = self.ada.observe(&self.cfg.ada, &stats_logits);
        Ok(DiscStats {
            loss_g: loss_dg.item(),
            loss_s: loss_ds.item(),
            r1_g: r1_g.item(),
            r1_s: r1_s.item(),
            rt,
        })
    }

    /// Phase (b): joint generator and segmenter update. Fresh noise for
    /// the forward pass and for the backward-cycle reconstruction, the
    /// instance loss on the translated image against the mask batch's
    /// annotations, discriminators entering as constants.
    pub fn generator_step(&mut self, batch: &Batch, lr: f32) -> Result<LossBundle, TrainError> {
        let b = batch.x.dim().0;
        let w = self.cfg.weights;
        let graph = Graph::new();
        let bound = self
            .store
            .bind(&graph, &self.gs_ids)
            .merge(self.store.bind_const(&graph, &self.d_ids));
        let x = graph.constant(Self::dyn4(&batch.x));
        let y = graph.constant(Self::dyn4(&batch.y));
        let mut cx = Ctx {
            g: graph.clone(),
            p: &bound,
            train: true,
            rng: &mut self.rng_train,
        };
        let z = graph.constant(randn(cx.rng, &[b, self.cfg.generator.z_dim]));
        let z_back = graph.constant(randn(cx.rng, &[b, self.cfg.generator.z_dim]));

        let y_hat = self.g.generate(&mut cx, &x, &z)?;
        let plan = AugmentPlan::draw(cx.rng, self.ada.p() as f32, &self.cfg.ada, b);
        let dg_fake = self.dg.forward(&cx, &plan.apply(&y_hat))?;
        let l_gan_g = dg_gen_loss(&dg_fake);

        let x_hat = self.s.decode_mask(&cx, &y)?;
        let ds_fake = self.ds.forward(&cx, &x_hat)?;
        let l_gan_s = ds_gen_loss(&ds_fake);

        let x_rec = self.s.decode_mask(&cx, &y_hat)?;
        let y_rec = self.g.generate(&mut cx, &x_hat, &z_back)?;
        let l_cyc = cycle_loss(&x_rec, &x).add(&cycle_loss(&y_rec, &y));

        let seg = self.s.instance_forward(&mut cx, &y_hat, &batch.x_targets)?;
        let l_seg = seg.total();

        let total = total_loss(&l_gan_g, &l_gan_s, &l_cyc, &l_seg, &w);
        drop(cx);
        self.store.zero_grad(&self.gs_ids);
        bound.backward(&mut self.store, &total);
        self.opt_gs.step(&mut self.store, &self.gs_ids, lr);
        self.store.zero_grad(&self.gs_ids);
        Ok(LossBundle {
            l_gan_g: l_gan_g.item(),
            l_gan_s: l_gan_s.item(),
            l_cyc: l_cyc.item(),
            l_seg: l_seg.item(),
            total: total.item(),
        })
    }

    /// Gradient L2 norms of the instance-branch loss alone on the
    /// generator's parameters, at the current weights. Diagnostic for the
    /// claim that the segmentation loss reaches G through the translated
    /// image.
    pub fn seg_grad_norms_on_g(&mut self, batch: &Batch) -> Result<Vec<(String, f32)>, TrainError> {
        let g_ids = self.store.ids_with_prefix("g.");
        let graph = Graph::new();
        let all: Vec<ParamId> = [g_ids.clone(), self.store.ids_with_prefix("s.")].concat();
        let bound = self.store.bind(&graph, &all);
        let x = graph.constant(Self::dyn4(&batch.x));
        let mut cx = Ctx {
            g: graph.clone(),
            p: &bound,
            train: true,
            rng: &mut self.rng_train,
        };
        let b = batch.x.dim().0;
        let z = graph.constant(randn(cx.rng, &[b, self.cfg.generator.z_dim]));
        let y_hat = self.g.generate(&mut cx, &x, &z)?;
        let seg = self.s.instance_forward(&mut cx, &y_hat, &batch.x_targets)?;
        let l_seg = seg.total();
        drop(cx);
        self.store.zero_grad(&all);
        bound.backward(&mut self.store, &l_seg);
        let mut norms = Vec::with_capacity(g_ids.len());
        for id in g_ids {
            let n = self
                .store
                .grad(id)
                .map(|g| g.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt() as f32)
                .unwrap_or(0.0);
            norms.push((self.store.name(id).to_string(), n));
        }
        self.store.zero_grad(&all);
        Ok(norms)
    }

    /// One full alternating step at the current stage's learning rate.
    pub fn train_step(&mut self) -> Result<StepRecord, TrainError> {
        let lr = self.cfg.stages[self.stage_idx].lr;
        let batch = self.batcher.next_batch()?;
        let disc = self.discriminator_step(&batch, lr)?;
        let bundle = self.generator_step(&batch, lr)?;
        self.iter += 1;
        let rec = StepRecord {
            iter: self.iter,
            stage: self.stage_idx + 1,
            lr,
            bundle,
            disc,
            ada_p: self.ada.p(),
            ada_rt: self.ada.rt(),
        };
        let finite = [
            ("l_gan_g", bundle.l_gan_g),
            ("l_gan_s", bundle.l_gan_s),
            ("l_cyc", bundle.l_cyc),
            ("l_seg", bundle.l_seg),
            ("total", bundle.total),
            ("d_loss_g", disc.loss_g),
            ("d_loss_s", disc.loss_s),
        ];
        for (name, v) in finite {
            if !v.is_finite() {
                return Err(TrainError::NonFinite {
                    iter: self.iter,
                    detail: format!("{name} = {v}"),
                });
            }
        }
        Ok(rec)
    }

    /// Cross the boundary into the next stage: reinitialize the segmenter
    /// and the mask discriminator from fresh streams indexed by the new
    /// stage, drop their optimizer moments, and record the event. The
    /// generator and image discriminator continue untouched.
    pub fn advance_stage(&mut self) {
        self.stage_idx += 1;
        let s_ids = self.store.ids_with_prefix("s.");
        let ds_ids = self.store.ids_with_prefix("ds.");
        let mut rs = crate::rng::substream(self.cfg.seed, streams::REINIT_S, self.stage_idx as u64);
        self.store.reinit(&s_ids, &mut rs);
        let mut rds =
            crate::rng::substream(self.cfg.seed, streams::REINIT_DS, self.stage_idx as u64);
        self.store.reinit(&ds_ids, &mut rds);
        self.opt_gs.reset(&s_ids);
        self.opt_d.reset(&ds_ids);
        self.events.push(ReinitEvent {
            stage: self.stage_idx + 1,
            iter: self.iter,
        });
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), TrainError> {
        let mut a = Archive::new(ArchiveKind::Checkpoint);
        pack_params(&mut a, &self.store, &self.store.all_ids())?;
        pack_adam(&mut a, "gs", &self.opt_gs, &self.store)?;
        pack_adam(&mut a, "d", &self.opt_d, &self.store)?;
        a.meta = serde_json::json!({
            "config": self.cfg,
            "iter": self.iter,
            "stage_idx": self.stage_idx,
            "ada": self.ada,
            "rng_train": &self.rng_train,
            "rng_data": self.batcher.rng(),
            "events": self.events,
        });
        a.save(path)?;
        Ok(())
    }

    /// Rebuild a trainer from a checkpoint archive: parameters bitwise,
    /// optimizer moments, ADA state, counters, and both RNG streams.
    pub fn resume(
        cfg: &TrainConfig,
        manifest: &DatasetManifest,
        archive: &Archive,
    ) -> Result<Trainer, TrainError> {
        archive.expect_kind(ArchiveKind::Checkpoint)?;
        let mut t = Trainer::new(cfg, manifest)?;
        let loaded = load_matching_params(archive, &mut t.store)?;
        if loaded.len() != t.store.len() {
            return Err(TrainError::Mismatch(format!(
                "checkpoint covers {} of {} parameters",
                loaded.len(),
                t.store.len()
            )));
        }
        unpack_adam(archive, "gs", &mut t.opt_gs, &t.store)?;
        unpack_adam(archive, "d", &mut t.opt_d, &t.store)?;
        let meta = &archive.meta;
        let get = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| TrainError::Mismatch(format!("checkpoint meta lacks {k}")))
        };
        t.iter = get("iter")?
            .as_u64()
            .ok_or_else(|| TrainError::Mismatch("iter is not an integer".into()))?
            as usize;
        t.stage_idx = get("stage_idx")?
            .as_u64()
            .ok_or_else(|| TrainError::Mismatch("stage_idx is not an integer".into()))?
            as usize;
        t.ada = serde_json::from_value(get("ada")?)?;
        t.rng_train = serde_json::from_value(get("rng_train")?)?;
        t.batcher.set_rng(serde_json::from_value(get("rng_data")?)?);
        t.events = serde_json::from_value(get("events")?)?;
        Ok(t)
    }
}

/// Artifacts of a completed run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub metrics_path: PathBuf,
    pub stage_checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub events: Vec<ReinitEvent>,
    pub last_record: Option<StepRecord>,
}

fn metric_line(rec: &StepRecord) -> serde_json::Value {
    serde_json::json!({
        "iter": rec.iter,
        "stage": rec.stage,
        "l_gan_g": rec.bundle.l_gan_g,
        "l_gan_s": rec.bundle.l_gan_s,
        "l_cyc": rec.bundle.l_cyc,
        "l_seg": rec.bundle.l_seg,
        "total": rec.bundle.total,
        "ada_p": rec.ada_p,
        "ada_rt": rec.ada_rt,
        "lr": rec.lr,
    })
}

/// Run the full schedule, streaming metrics as JSON lines and writing a
/// checkpoint at every stage boundary and at the end. `resume` continues
/// a prior run's checkpoint; the metrics stream is then appended to.
pub fn run(
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    out: &Path,
    resume_from: Option<&Path>,
) -> Result<RunSummary, TrainError> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    std::fs::write(
        out.join("train_config.json"),
        serde_json::to_string_pretty(cfg)?,
    )?;
    let mut trainer = match resume_from {
        None => Trainer::new(cfg, manifest)?,
        Some(p) => Trainer::resume(cfg, manifest, &Archive::load(p)?)?,
    };
    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)?;
    let bounds = cfg.stage_bounds();
    let total = cfg.total_iters();
    let mut stage_checkpoints = Vec::new();
    let mut last_record = None;
    while trainer.iter() < total {
        if trainer.iter() == bounds[trainer.stage_idx()] {
            let path = out.join(format!("checkpoint_stage{}.nupw", trainer.stage_idx() + 1));
            trainer.save_checkpoint(&path)?;
            stage_checkpoints.push(path);
            trainer.advance_stage();
            let ev = *trainer.events().last().unwrap();
            writeln!(
                metrics,
                "{}",
                serde_json::json!({"event": "reinit", "stage": ev.stage, "iter": ev.iter})
            )?;
        }
        let rec = match trainer.train_step() {
            Ok(rec) => rec,
            Err(TrainError::NonFinite { iter, detail }) => {
                let dump = serde_json::json!({
                    "iter": iter,
                    "detail": detail,
                    "ada_p": trainer.ada().p(),
                    "stage_idx": trainer.stage_idx(),
                });
                std::fs::write(
                    out.join("diagnostics.json"),
                    serde_json::to_string_pretty(&dump)?,
                )?;
                return Err(TrainError::NonFinite { iter, detail });
            }
            Err(e) => return Err(e),
        };
        if rec.iter % cfg.log_every == 0 || rec.iter == total {
            writeln!(metrics, "{}", metric_line(&rec))?;
        }
        last_record = Some(rec);
    }
    let final_checkpoint = out.join("checkpoint_final.nupw");
    trainer.save_checkpoint(&final_checkpoint)?;
    Ok(RunSummary {
        metrics_path,
        stage_checkpoints,
        final_checkpoint,
        events: trainer.events().to_vec(),
        last_record,
    })
}

/// Convenience wrapper for the CLI: load a checkpoint, project a scope,
/// save the export.
pub fn export_weights(
    ckpt_path: &Path,
    scope: ExportScope,
    out_path: &Path,
) -> Result<(), TrainError> {
    let ckpt = Archive::load(ckpt_path)?;
    ckpt.expect_kind(ArchiveKind::Checkpoint)?;
    let exp = export(&ckpt, scope)?;
    exp.save(out_path)?;
    Ok(())
}
