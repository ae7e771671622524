//! `nup`: command line front end for the nucleus-aware unpaired
//! pretraining toolkit.
//!
//! The subcommands cover the whole workflow. `synth-masks` draws the
//! synthetic mask domain (optionally with textured stand-in images and
//! a dataset manifest), `pretrain` runs the staged translation
//! schedule, `export-weights` projects a checkpoint onto a reusable
//! scope, `evaluate` scores predicted instance label maps against
//! ground truth, and `probe` fits a lightweight downstream head on
//! exported weights.
//!
//! Configuration is JSON layered over built-in defaults. Precedence,
//! lowest to highest: defaults, the `--config` file, repeated
//! `--set path=value` overrides, and finally the `NUP_SEED`
//! environment variable for the seed alone. Config-driven commands
//! print the resolved configuration before running and write it next
//! to their outputs, so every run is reproducible from its artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::{env, fs};

use anyhow::{anyhow, bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use nup_core::checkpoint::{Archive, ExportScope};
use nup_core::data::{histology_standin, DatasetManifest, EntryX, EntryY};
use nup_core::metrics::{
    aji, detection_f1, load_label_png, object_dice, object_hausdorff, InstanceLabeling,
    PqAccumulator,
};
use nup_core::models::FpnConfig;
use nup_core::probe::{
    detection_finetune, linear_probe, ClassManifest, DetectFinetuneConfig, LinearProbeConfig,
};
use nup_core::rng::{substream, SEED_ENV_VAR};
use nup_core::synth::{save_annotations, save_mask_png, synthesize_image, ImageStats, SynthConfig};
use nup_core::train::{self, TrainConfig};

/// Everything the toolkit can be told through a config file. Each
/// command reads the sections it needs and ignores the rest, so one
/// file can drive a whole experiment end to end.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
struct AppConfig {
    /// Base seed. A command-line `--seed` beats it, `NUP_SEED` beats both.
    seed: Option<u64>,
    /// Default dataset manifest for `pretrain`.
    manifest: Option<PathBuf>,
    synth: SynthConfig,
    train: TrainConfig,
    probe_linear: LinearProbeConfig,
    probe_detect: DetectFinetuneConfig,
}

#[derive(Parser)]
#[command(
    name = "nup",
    version,
    about = "Nucleus-aware unpaired pretraining toolkit",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file merged over the built-in defaults.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config value by dotted path, e.g.
    /// --set train.weights.lambda_cycle=12.5 (repeatable).
    #[arg(long = "set", value_name = "PATH=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize nuclear mask images with per-instance annotations.
    SynthMasks {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory for images, annotations, and the report.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Number of mask images to synthesize.
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Base seed for the deterministic synthesis streams.
        #[arg(long)]
        seed: Option<u64>,
        /// Also render N textured stand-in images from extra masks and
        /// write a manifest.json pairing the two domains.
        #[arg(long, value_name = "N", default_value_t = 0)]
        standin: usize,
    },
    /// Run the staged unpaired pretraining schedule.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory for metrics, checkpoints, and the config.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Dataset manifest (overrides `manifest` from the config).
        #[arg(long, value_name = "FILE")]
        data: Option<PathBuf>,
        /// Resume from a checkpoint archive written by an earlier run.
        #[arg(long, value_name = "FILE")]
        resume: Option<PathBuf>,
    },
    /// Project a training checkpoint onto an export scope.
    ExportWeights {
        /// Checkpoint archive written by `pretrain`.
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        /// Which parameters to keep: encoder, fpn, or all.
        #[arg(long, value_parser = parse_scope)]
        scope: ExportScope,
        /// Destination archive.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Score predicted instance label maps against ground truth.
    Evaluate {
        /// Directory of predicted 16-bit grayscale label pngs.
        #[arg(long, value_name = "DIR")]
        pred: PathBuf,
        /// Directory of ground-truth label pngs with matching names.
        #[arg(long, value_name = "DIR")]
        gt: PathBuf,
        /// Comma-separated metrics: aji,f1,mpq,dice,hausdorff.
        #[arg(long, default_value = "aji,f1,mpq,dice,hausdorff")]
        metrics: String,
        /// IoU threshold for detection F1 matching.
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        /// Report destination (json).
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Fit a downstream probe on exported weights and report metrics.
    Probe {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Exported weight archive.
        #[arg(long, value_name = "FILE")]
        weights: PathBuf,
        /// Which probe to run.
        #[arg(long, value_enum)]
        task: ProbeTask,
        /// Class manifest (linear) or dataset manifest (detect).
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        /// Report destination (json).
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProbeTask {
    /// Frozen features, logistic classification head.
    Linear,
    /// Frozen backbone and pyramid, trainable detection heads.
    Detect,
}

fn parse_scope(s: &str) -> Result<ExportScope, String> {
    ExportScope::parse(s).ok_or_else(|| format!("unknown scope `{s}` (expected encoder, fpn, or all)"))
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli.cmd) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::SynthMasks {
            cfg,
            out,
            count,
            seed,
            standin,
        } => cmd_synth_masks(&cfg, &out, count, seed, standin),
        Cmd::Pretrain {
            cfg,
            out,
            data,
            resume,
        } => cmd_pretrain(&cfg, &out, data, resume),
        Cmd::ExportWeights { ckpt, scope, out } => cmd_export_weights(&ckpt, scope, &out),
        Cmd::Evaluate {
            pred,
            gt,
            metrics,
            iou,
            out,
        } => cmd_evaluate(&pred, &gt, &metrics, iou, &out),
        Cmd::Probe {
            cfg,
            weights,
            task,
            data,
            out,
        } => cmd_probe(&cfg, &weights, task, &data, &out),
    }
}

// ---------------------------------------------------------------------------
// Config resolution
// ---------------------------------------------------------------------------

/// Defaults -> config file -> --set overrides, parsed section by
/// section so an error names the part of the config it came from.
fn resolve_config(args: &ConfigArgs) -> Result<AppConfig> {
    let mut root = serde_json::to_value(AppConfig::default()).expect("defaults serialize");
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let user: Value = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        ensure!(
            user.is_object(),
            "config {} must be a json object",
            path.display()
        );
        deep_merge(&mut root, user);
    }
    for spec in &args.set {
        apply_set(&mut root, spec)?;
    }
    parse_app_config(&root)
}

/// Object fields merge recursively; any other value replaces the base.
fn deep_merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Apply one `--set dotted.path=value` override. The value is parsed
/// as json when possible and kept as a string otherwise, so both
/// `--set train.batch=4` and `--set manifest=data/manifest.json` work.
fn apply_set(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("--set expects dotted.path=value, got `{spec}`"))?;
    ensure!(!path.is_empty(), "--set `{spec}` has an empty path");
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
    let parts: Vec<&str> = path.split('.').collect();
    let (last, walk) = parts.split_last().expect("path is nonempty");
    let mut cur = root;
    for (i, part) in walk.iter().enumerate() {
        ensure!(!part.is_empty(), "--set path `{path}` has an empty segment");
        cur = step_into(cur, part, &parts[..=i].join("."))?;
    }
    ensure!(!last.is_empty(), "--set path `{path}` has an empty segment");
    match cur {
        Value::Object(map) => {
            map.insert((*last).to_string(), value);
        }
        Value::Array(items) => {
            let idx = array_index(last, path, items.len())?;
            items[idx] = value;
        }
        _ => bail!("--set path `{path}`: `{}` is not an object", walk.join(".")),
    }
    Ok(())
}

/// Advance one path segment, creating intermediate objects as needed
/// and indexing into arrays when the segment is a number.
fn step_into<'v>(cur: &'v mut Value, part: &str, sofar: &str) -> Result<&'v mut Value> {
    match cur {
        Value::Object(map) => Ok(map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()))),
        Value::Array(items) => {
            let idx = array_index(part, sofar, items.len())?;
            Ok(&mut items[idx])
        }
        _ => bail!("--set path `{sofar}` descends into a non-object value"),
    }
}

fn array_index(part: &str, path: &str, len: usize) -> Result<usize> {
    let idx: usize = part
        .parse()
        .map_err(|_| anyhow!("--set path `{path}`: `{part}` must be an array index"))?;
    ensure!(
        idx < len,
        "--set path `{path}`: index {idx} is out of bounds (len {len})"
    );
    Ok(idx)
}

fn parse_app_config(root: &Value) -> Result<AppConfig> {
    let obj = root.as_object().expect("root starts as an object");
    const KNOWN: [&str; 6] = [
        "seed",
        "manifest",
        "synth",
        "train",
        "probe_linear",
        "probe_detect",
    ];
    if let Some(key) = obj.keys().find(|k| !KNOWN.contains(&k.as_str())) {
        bail!(
            "unknown config field `{key}` (expected one of {})",
            KNOWN.join(", ")
        );
    }
    fn field<T: serde::de::DeserializeOwned + Default>(
        obj: &Map<String, Value>,
        key: &str,
    ) -> Result<T> {
        match obj.get(key) {
            None | Some(Value::Null) => Ok(T::default()),
            Some(v) => serde_json::from_value(v.clone())
                .with_context(|| format!("config field `{key}`")),
        }
    }
    Ok(AppConfig {
        seed: field(obj, "seed")?,
        manifest: field(obj, "manifest")?,
        synth: field(obj, "synth")?,
        train: field(obj, "train")?,
        probe_linear: field(obj, "probe_linear")?,
        probe_detect: field(obj, "probe_detect")?,
    })
}

/// `NUP_SEED` wins over every other seed source; reject garbage here
/// so the failure is a clean error instead of a panic downstream.
fn env_seed() -> Result<Option<u64>> {
    match env::var(SEED_ENV_VAR) {
        Ok(s) => s
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| anyhow!("{SEED_ENV_VAR} must be an unsigned integer, got `{s}`")),
        Err(env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(anyhow!("{SEED_ENV_VAR}: {e}")),
    }
}

fn announce(cfg: &AppConfig) -> Result<()> {
    println!(
        "resolved config:\n{}",
        serde_json::to_string_pretty(cfg).context("serializing resolved config")?
    );
    Ok(())
}

fn write_resolved(cfg: &AppConfig, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(cfg)?)
        .with_context(|| format!("writing {}", path.display()))
}

/// Sibling path for a report's resolved config:
/// `report.json` -> `report.resolved_config.json`.
fn sibling_config_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    out.with_file_name(format!("{stem}.resolved_config.json"))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// synth-masks
// ---------------------------------------------------------------------------

fn cmd_synth_masks(
    cfg_args: &ConfigArgs,
    out: &Path,
    count: usize,
    seed_flag: Option<u64>,
    standin: usize,
) -> Result<()> {
    let mut cfg = resolve_config(cfg_args)?;
    let seed = env_seed()?
        .or(seed_flag)
        .or(cfg.seed)
        .unwrap_or(0);
    cfg.seed = Some(seed);
    announce(&cfg)?;
    ensure!(count > 0, "--count must be at least 1");

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_resolved(&cfg, &out.join("resolved_config.json"))?;

    let mut stats = ImageStats::default();
    let mut instances = 0usize;
    let mut manifest = DatasetManifest::default();
    for i in 0..count {
        let id = format!("mask_{i:05}");
        let (img, ann, s) = synthesize_image(&cfg.synth, seed, i as u64, &id)
            .with_context(|| format!("synthesizing `{id}`"))?;
        save_mask_png(&out.join(format!("{id}.png")), &img)?;
        save_annotations(&out.join(format!("{id}.json")), &ann)?;
        instances += ann.instances.len();
        stats.absorb(&s);
        manifest.domain_x.push(EntryX {
            image: format!("{id}.png").into(),
            annotations: format!("{id}.json").into(),
        });
    }

    // Stand-ins are textured renderings of extra masks drawn from the
    // same stream family, offset past the real ones so the two sets
    // never share geometry.
    for j in 0..standin {
        let id = format!("standin_{j:05}");
        let (img, _, _) = synthesize_image(&cfg.synth, seed, (count + j) as u64, &id)
            .with_context(|| format!("synthesizing `{id}`"))?;
        let mut rng = substream(seed, "standin", j as u64);
        let tex = histology_standin(&img, &mut rng);
        let (h, w, _) = tex.dim();
        let raw: Vec<u8> = tex.iter().copied().collect();
        let file = format!("{id}.png");
        image::RgbImage::from_raw(w as u32, h as u32, raw)
            .expect("buffer length matches dimensions")
            .save(out.join(&file))
            .with_context(|| format!("writing `{file}`"))?;
        manifest.domain_y.push(EntryY { image: file.into() });
    }
    if standin > 0 {
        manifest
            .save(&out.join("manifest.json"))
            .context("writing manifest.json")?;
    }

    let report = json!({
        "count": count,
        "standin": standin,
        "seed": seed,
        "image_size": cfg.synth.image_size,
        "instances": instances,
        "stats": stats,
    });
    fs::write(
        out.join("synthesis_report.json"),
        serde_json::to_string_pretty(&report)?,
    )
    .context("writing synthesis_report.json")?;

    println!(
        "wrote {count} mask images ({instances} instances: {} epithelial, {} other) to {}",
        stats.epithelial,
        stats.other,
        out.display()
    );
    println!(
        "dropped nuclei: {} overlap, {} degenerate, {} out of bounds",
        stats.dropped_overlap, stats.dropped_degenerate, stats.dropped_out_of_bounds
    );
    if standin > 0 {
        println!("wrote {standin} stand-in images and manifest.json");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

fn cmd_pretrain(
    cfg_args: &ConfigArgs,
    out: &Path,
    data: Option<PathBuf>,
    resume: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = resolve_config(cfg_args)?;
    if let Some(s) = env_seed()?.or(cfg.seed) {
        cfg.train.seed = s;
    }
    cfg.seed = Some(cfg.train.seed);
    let manifest_path = data.or_else(|| cfg.manifest.clone()).ok_or_else(|| {
        anyhow!("no dataset manifest: pass --data FILE or set `manifest` in the config")
    })?;
    cfg.manifest = Some(manifest_path.clone());
    announce(&cfg)?;

    let manifest = DatasetManifest::load(&manifest_path)
        .with_context(|| format!("loading manifest {}", manifest_path.display()))?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_resolved(&cfg, &out.join("resolved_config.json"))?;

    let summary = train::run(&cfg.train, &manifest, out, resume.as_deref())?;
    if let Some(rec) = &summary.last_record {
        println!(
            "pretraining finished at iter {}: total {:.4}, l_cyc {:.4}, ada p {:.6}",
            rec.iter, rec.bundle.total, rec.bundle.l_cyc, rec.ada_p
        );
    }
    for ev in &summary.events {
        println!("stage {} reinitialized S and D_S at iter {}", ev.stage, ev.iter);
    }
    println!(
        "metrics: {}\nfinal checkpoint: {}",
        summary.metrics_path.display(),
        summary.final_checkpoint.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// export-weights
// ---------------------------------------------------------------------------

fn cmd_export_weights(ckpt: &Path, scope: ExportScope, out: &Path) -> Result<()> {
    ensure_parent(out)?;
    train::export_weights(ckpt, scope, out)?;
    let archive = Archive::load(out)?;
    println!(
        "exported {} tensors under scope `{}` to {}",
        archive.len(),
        scope.as_str(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, PartialEq, Eq)]
enum Metric {
    Aji,
    F1,
    Mpq,
    Dice,
    Hausdorff,
}

impl Metric {
    fn parse(name: &str) -> Result<Metric> {
        Ok(match name {
            "aji" => Metric::Aji,
            "f1" => Metric::F1,
            "mpq" => Metric::Mpq,
            "dice" => Metric::Dice,
            "hausdorff" => Metric::Hausdorff,
            other => bail!("unknown metric `{other}` (expected aji, f1, mpq, dice, hausdorff)"),
        })
    }

    fn name(self) -> &'static str {
        match self {
            Metric::Aji => "aji",
            Metric::F1 => "f1",
            Metric::Mpq => "mpq",
            Metric::Dice => "dice",
            Metric::Hausdorff => "hausdorff",
        }
    }
}

fn parse_metric_list(arg: &str) -> Result<Vec<Metric>> {
    let mut out = Vec::new();
    for name in arg.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let m = Metric::parse(name)?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    ensure!(!out.is_empty(), "--metrics selected nothing");
    Ok(out)
}

/// Load a label map plus its optional `<name>.classes.json` sidecar.
fn load_labeling(path: &Path) -> Result<InstanceLabeling> {
    let labels = load_label_png(path)?;
    let sidecar = path.with_extension("classes.json");
    let lab = if sidecar.is_file() {
        let text = fs::read_to_string(&sidecar)
            .with_context(|| format!("reading {}", sidecar.display()))?;
        let classes: Vec<u8> = serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", sidecar.display()))?;
        InstanceLabeling::with_classes(labels, classes)
            .with_context(|| format!("labeling {}", path.display()))?
    } else {
        InstanceLabeling::new(labels).with_context(|| format!("labeling {}", path.display()))?
    };
    Ok(lab)
}

/// Panoptic quality needs classes on both sides; a class-agnostic
/// labeling counts as a single class.
fn with_default_classes(lab: &InstanceLabeling) -> InstanceLabeling {
    if lab.classes().is_some() {
        lab.clone()
    } else {
        InstanceLabeling::with_classes(lab.labels().clone(), vec![1; lab.len()])
            .expect("class vector length matches")
    }
}

fn cmd_evaluate(pred: &Path, gt: &Path, metrics: &str, iou: f64, out: &Path) -> Result<()> {
    let wanted = parse_metric_list(metrics)?;
    ensure!(
        iou.is_finite() && (0.0..=1.0).contains(&iou),
        "--iou must be in [0, 1]"
    );
    let mut names: Vec<String> = fs::read_dir(pred)
        .with_context(|| format!("reading {}", pred.display()))?
        .filter_map(|e| e.ok())
        .filter(|e| {
            Path::new(&e.file_name())
                .extension()
                .is_some_and(|x| x.eq_ignore_ascii_case("png"))
        })
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    ensure!(
        !names.is_empty(),
        "no .png label maps found in {}",
        pred.display()
    );

    let mut acc = PqAccumulator::new();
    let mut rows: Vec<Value> = Vec::new();
    let mut sums: BTreeMap<&'static str, f64> = BTreeMap::new();
    for name in &names {
        let ppath = pred.join(name);
        let gpath = gt.join(name);
        ensure!(
            gpath.is_file(),
            "missing ground truth for `{name}` in {}",
            gt.display()
        );
        let plab = load_labeling(&ppath)?;
        let glab = load_labeling(&gpath)?;
        let mut row = Map::new();
        row.insert("image".into(), Value::from(name.as_str()));
        row.insert("n_pred".into(), Value::from(plab.len()));
        row.insert("n_gt".into(), Value::from(glab.len()));
        for &m in &wanted {
            let value = match m {
                Metric::Aji => aji(&plab, &glab),
                Metric::F1 => detection_f1(&plab, &glab, iou),
                Metric::Dice => object_dice(&plab, &glab),
                Metric::Hausdorff => object_hausdorff(&plab, &glab),
                Metric::Mpq => {
                    acc.add_image(&with_default_classes(&plab), &with_default_classes(&glab))
                        .with_context(|| format!("accumulating pq on `{name}`"))?;
                    continue;
                }
            }
            .with_context(|| format!("{} on `{name}`", m.name()))?;
            row.insert(m.name().into(), Value::from(value));
            *sums.entry(m.name()).or_default() += value;
        }
        rows.push(Value::Object(row));
    }

    let mut aggregate = Map::new();
    aggregate.insert("n_images".into(), Value::from(names.len()));
    for &m in &wanted {
        if m == Metric::Mpq {
            aggregate.insert("mpq_plus".into(), Value::from(acc.mpq()));
            let class_pq: BTreeMap<String, f64> = acc
                .class_pq()
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect();
            aggregate.insert("class_pq".into(), serde_json::to_value(class_pq)?);
        } else {
            let mean = sums.get(m.name()).copied().unwrap_or(0.0) / names.len() as f64;
            aggregate.insert(m.name().into(), Value::from(mean));
        }
    }

    let report = json!({
        "pred": pred.display().to_string(),
        "gt": gt.display().to_string(),
        "iou_threshold": iou,
        "metrics": wanted.iter().map(|m| m.name()).collect::<Vec<_>>(),
        "images": rows,
        "aggregate": aggregate,
    });
    ensure_parent(out)?;
    fs::write(out, serde_json::to_string_pretty(&report)?)
        .with_context(|| format!("writing {}", out.display()))?;
    println!(
        "evaluated {} image pairs; aggregate: {}",
        names.len(),
        serde_json::to_string(&Value::Object(aggregate))?
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// probe
// ---------------------------------------------------------------------------

/// Exported archives carry the training config in their metadata;
/// reusing its segmenter section guarantees the rebuilt backbone has
/// the exact shape the weights expect.
fn segmenter_from_meta(archive: &Archive) -> Result<Option<FpnConfig>> {
    let Some(cfg) = archive.meta.get("config") else {
        return Ok(None);
    };
    let Some(seg) = cfg.get("segmenter") else {
        return Ok(None);
    };
    serde_json::from_value(seg.clone())
        .map(Some)
        .context("archive meta `config.segmenter`")
}

fn cmd_probe(
    cfg_args: &ConfigArgs,
    weights: &Path,
    task: ProbeTask,
    data: &Path,
    out: &Path,
) -> Result<()> {
    let mut cfg = resolve_config(cfg_args)?;
    if let Some(env) = env_seed()? {
        cfg.seed = Some(env);
    }
    if let Some(s) = cfg.seed {
        cfg.probe_linear.seed = s;
        cfg.probe_detect.seed = s;
    }
    let archive =
        Archive::load(weights).with_context(|| format!("loading {}", weights.display()))?;
    if let Some(seg) = segmenter_from_meta(&archive)? {
        println!("using the segmenter config embedded in {}", weights.display());
        cfg.probe_linear.segmenter = seg.clone();
        cfg.probe_detect.segmenter = seg;
    }
    announce(&cfg)?;
    ensure_parent(out)?;
    write_resolved(&cfg, &sibling_config_path(out))?;

    let report = match task {
        ProbeTask::Linear => {
            let manifest = ClassManifest::load(data)
                .with_context(|| format!("loading class manifest {}", data.display()))?;
            let report = linear_probe(&archive, &manifest, &cfg.probe_linear)?;
            println!(
                "linear probe: accuracy {:.4}, macro f1 {:.4} over {} held-out images (frozen intact: {})",
                report.accuracy, report.f1, report.n_eval, report.frozen_intact
            );
            serde_json::to_value(&report)?
        }
        ProbeTask::Detect => {
            let manifest = DatasetManifest::load(data)
                .with_context(|| format!("loading dataset manifest {}", data.display()))?;
            let report = detection_finetune(&archive, &manifest, &cfg.probe_detect)?;
            println!(
                "detection probe: mpq+ {:.4}, detection f1 {:.4}, l_seg {:.4} -> {:.4} (frozen intact: {})",
                report.mpq_plus,
                report.detection_f1,
                report.l_seg_first,
                report.l_seg_last,
                report.frozen_intact
            );
            serde_json::to_value(&report)?
        }
    };
    fs::write(out, serde_json::to_string_pretty(&report)?)
        .with_context(|| format!("writing {}", out.display()))?;
    println!("report: {}", out.display());
    Ok(())
}
