use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pmad::checkpoint::{load_checkpoint, save_checkpoint, AnyModel, TrainingState};
use pmad::cls::{make_classifier_input, ClsModel, ClsNetConfig, CLASS_NAMES};
use pmad::data::{balance_classes, export_busi, load_busi, preprocess_sample, split, synth_generate, DatasetSplit, ImageSample, Label};
use pmad::explain::{
    cls_grad_cam, emit_curves, emit_overlay, panels, render_cam, seg_grad_cam, GradCam, DEFAULT_CLS_LAYER, DEFAULT_SEG_LAYER,
};
use pmad::imgproc::{load_image, load_mask, preprocess as run_pipeline, preprocess_stages, save_image, save_mask, Mask, RawImage};
use pmad::metrics::{argmax_masks, MetricsReport};
use pmad::model::{Network, Profile};
use pmad::seg::{SegModel, SegNetConfig};
use pmad::training::{append_jsonl, evaluate_classifier, evaluate_segmentation, train_classifier, train_segmentation, TrainConfig};
use pmad::verify::{attention_suite, cls_network_check, primitive_suite, render_table, seg_network_check};
use pmad::Tensor;

use crate::config::Config;
use crate::error::CliError;
use crate::manifest::{checkpoint_hash, RunManifest};
use crate::{Common, ModelKind};

pub const CHECKPOINT_NAME: &str = "checkpoint.pmad";

fn settings(common: &Common) -> Result<Config, CliError> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    cfg.set("seed", common.seed.map(|s| s.to_string()));
    cfg.set("profile", common.profile.clone());
    Ok(cfg)
}

fn profile(cfg: &Config) -> Result<Profile, CliError> {
    Ok(cfg.get_or("profile", Profile::Tiny)?)
}

fn require<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    v.as_deref().ok_or_else(|| CliError::Usage(format!("missing required flag --{flag}")))
}

fn seg_config(cfg: &Config) -> Result<SegNetConfig, CliError> {
    let base = SegNetConfig::for_profile(profile(cfg)?);
    let (h, w) = cfg.input_size(base.input_size)?;
    Ok(base.with_input(h, w))
}

fn cls_config(cfg: &Config) -> Result<ClsNetConfig, CliError> {
    let base = ClsNetConfig::for_profile(profile(cfg)?);
    let (h, w) = cfg.input_size(base.input_size)?;
    Ok(base.with_input(h, w))
}

fn load_model(path: &Path) -> Result<AnyModel, CliError> {
    Ok(load_checkpoint(path)?.into_model()?)
}

fn seg_checkpoint(path: &Path) -> Result<SegModel, CliError> {
    match load_model(path)? {
        AnyModel::Seg(m) => Ok(m),
        AnyModel::Cls(_) => Err(CliError::Usage(format!("{} holds a classifier, not a segmentation model", path.display()))),
    }
}

fn cls_checkpoint(path: &Path) -> Result<ClsModel, CliError> {
    match load_model(path)? {
        AnyModel::Cls(m) => Ok(m),
        AnyModel::Seg(_) => Err(CliError::Usage(format!("{} holds a segmentation model, not a classifier", path.display()))),
    }
}

/// The dataset resized and preprocessed to the network's input size.
fn prepared(cfg: &Config, dir: &Path, shape: [usize; 3]) -> Result<Vec<ImageSample>, CliError> {
    let pre = cfg.preprocess(shape[1], shape[2])?;
    let samples = load_busi(dir)?;
    if samples.is_empty() {
        return Err(CliError::Data(format!("no images found under {}", dir.display())));
    }
    Ok(samples.iter().map(|s| preprocess_sample(s, &pre)).collect::<pmad::Result<_>>()?)
}

fn image_tensor(img: &RawImage) -> Result<Tensor, CliError> {
    let g = img.to_gray();
    Ok(Tensor::from_vec(&[1, 1, g.height, g.width], g.pixels)?)
}

fn write_json(out: Option<&Path>, json: &str) -> Result<(), CliError> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, format!("{json}\n"))?;
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn save_rgb(img: &RgbImage, path: &Path) -> Result<(), CliError> {
    img.save(path).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

pub fn preprocess(
    common: &Common,
    input: Option<PathBuf>,
    dump_stages: Option<PathBuf>,
    height: Option<usize>,
    width: Option<usize>,
) -> Result<(), CliError> {
    let cfg = settings(common)?;
    let default = seg_config(&cfg)?.input_size;
    let pre = cfg.preprocess(height.unwrap_or(default.0), width.unwrap_or(default.1))?;
    let mut manifest = RunManifest::begin("preprocess", cfg.snapshot(), cfg.seed()?);
    let out = require(&common.out, "out")?;
    match (&input, &common.data_dir) {
        (Some(path), None) => {
            let stages = preprocess_stages(&load_image(path)?, &pre)?;
            save_image(&stages.normalized, out)?;
            manifest.inputs.push(path.clone());
            manifest.outputs.push(out.to_path_buf());
            if let Some(dir) = &dump_stages {
                fs::create_dir_all(dir)?;
                for (name, img) in stages.named() {
                    let p = dir.join(format!("{name}.png"));
                    save_image(img, &p)?;
                    manifest.outputs.push(p);
                }
            }
        }
        (None, Some(dir)) => {
            let samples = load_busi(dir)?;
            let done: Vec<ImageSample> = samples.iter().map(|s| preprocess_sample(s, &pre)).collect::<pmad::Result<_>>()?;
            export_busi(&done, out)?;
            manifest.inputs.push(dir.clone());
            manifest.outputs.push(out.to_path_buf());
            if let Some(stage_dir) = &dump_stages {
                for s in &samples {
                    let d = stage_dir.join(&s.id);
                    fs::create_dir_all(&d)?;
                    for (name, img) in preprocess_stages(&s.image, &pre)?.named() {
                        save_image(img, &d.join(format!("{name}.png")))?;
                    }
                }
                manifest.outputs.push(stage_dir.clone());
            }
        }
        _ => return Err(CliError::Usage("preprocess takes exactly one of --input or --data-dir".into())),
    }
    manifest.finish(out)?;
    Ok(())
}

pub fn synth_data(common: &Common, n_per_class: Option<usize>, size: Option<usize>) -> Result<(), CliError> {
    let mut cfg = settings(common)?;
    cfg.set("n_per_class", n_per_class.map(|n| n.to_string()));
    cfg.set("image_size", size.map(|n| n.to_string()));
    let out = require(&common.out, "out")?;
    let seed = cfg.seed()?;
    let n: usize = cfg.get_or("n_per_class", 50)?;
    let side: usize = cfg.get_or("image_size", 64)?;
    let mut manifest = RunManifest::begin("synth-data", cfg.snapshot(), seed);
    let samples = synth_generate(n, side, seed)?;
    export_busi(&samples, out)?;
    manifest.outputs.push(out.to_path_buf());
    manifest.finish(out)?;
    println!("wrote {} samples ({n} per class, {side}x{side}) to {}", samples.len(), out.display());
    Ok(())
}

/// Epochs at which Grad-CAM snapshots are taken: 16, 32, 64 and 96 for runs
/// of at least 96 epochs, the same fractions of shorter runs.
pub fn snapshot_epochs(epochs: usize) -> Vec<usize> {
    let mut out: Vec<usize> = [16, 32, 64, 96]
        .iter()
        .map(|&e| if epochs >= 96 { e } else { (e * epochs).div_ceil(96).max(1) })
        .collect();
    out.dedup();
    out
}

struct TrainSetup {
    cfg: Config,
    train: TrainConfig,
    out: PathBuf,
    data_dir: PathBuf,
    manifest: RunManifest,
}

fn train_setup(common: &Common, command: &str) -> Result<TrainSetup, CliError> {
    let cfg = settings(common)?;
    let train = cfg.train()?;
    let out = require(&common.out, "out")?.to_path_buf();
    let data_dir = require(&common.data_dir, "data-dir")?.to_path_buf();
    fs::create_dir_all(&out)?;
    let mut manifest = RunManifest::begin(command, cfg.snapshot(), train.seed);
    manifest.inputs.push(data_dir.clone());
    if let Some(c) = &common.checkpoint {
        manifest.inputs.push(c.clone());
    }
    Ok(TrainSetup {
        cfg,
        train,
        out,
        data_dir,
        manifest,
    })
}

fn make_split(setup: &TrainSetup, samples: &[ImageSample]) -> Result<DatasetSplit, CliError> {
    let mut sp = split(samples, setup.cfg.split_fractions()?, setup.train.seed)?;
    if setup.cfg.get_or("balance", true)? {
        let mut rng = ChaCha8Rng::seed_from_u64(setup.train.seed);
        sp.train = balance_classes(&sp.train, &mut rng, &setup.cfg.augment())?;
    }
    Ok(sp)
}

/// Per-epoch side effects shared by both trainers: metrics line, last
/// checkpoint, and Grad-CAM snapshots.
struct EpochArtifacts {
    jsonl: PathBuf,
    checkpoint: PathBuf,
    snapshots: Vec<usize>,
    panels: Vec<RgbImage>,
    out: PathBuf,
}

impl EpochArtifacts {
    fn new(out: &Path, epochs: usize) -> Result<Self, CliError> {
        let jsonl = out.join("metrics.jsonl");
        if jsonl.exists() {
            fs::remove_file(&jsonl)?;
        }
        Ok(Self {
            jsonl,
            checkpoint: out.join(CHECKPOINT_NAME),
            snapshots: snapshot_epochs(epochs),
            panels: Vec::new(),
            out: out.to_path_buf(),
        })
    }

    fn record<N: Network>(
        &mut self,
        report: &MetricsReport,
        net: &N,
        state: &TrainingState,
        cam: impl FnOnce(&N) -> pmad::Result<Option<RgbImage>>,
    ) -> pmad::Result<()> {
        append_jsonl(&self.jsonl, report)?;
        save_checkpoint(net, state, &self.checkpoint)?;
        eprintln!("epoch {:>3}  lr {:.2e}  {}", state.epoch, state.learning_rate, summary(report));
        if self.snapshots.contains(&state.epoch) {
            if let Some(img) = cam(net)? {
                let p = self.out.join(format!("gradcam_epoch_{:03}.png", state.epoch));
                img.save(&p).map_err(|e| pmad::Error::Io(std::io::Error::other(e)))?;
                self.panels.push(img);
            }
        }
        Ok(())
    }

    fn finish(self, reports: &[MetricsReport], manifest: &mut RunManifest) -> Result<(), CliError> {
        let files = emit_curves(reports, &self.out)?;
        manifest.outputs.extend(files.iter().map(|f| self.out.join(f)));
        if !self.panels.is_empty() {
            let p = self.out.join("gradcam_panels.png");
            save_rgb(&panels(&self.panels)?, &p)?;
            manifest.outputs.push(p);
        }
        manifest.outputs.push(self.jsonl);
        manifest.checkpoint_hash = Some(checkpoint_hash(&self.checkpoint)?);
        manifest.outputs.push(self.checkpoint);
        Ok(())
    }
}

fn summary(r: &MetricsReport) -> String {
    let mut parts = Vec::new();
    let mut push = |name: &str, v: Option<f64>| {
        if let Some(v) = v {
            parts.push(format!("{name} {v:.4}"));
        }
    };
    push("train_loss", r.train_loss);
    push("val_loss", r.loss_total);
    push("dice", r.dice);
    push("iou", r.iou);
    push("accuracy", r.cls_accuracy);
    push("f1", r.f1);
    parts.join("  ")
}

/// First validation sample with a lesion, else the first sample at all.
fn cam_sample(sp: &DatasetSplit) -> Option<ImageSample> {
    let pool = if sp.validation.is_empty() { &sp.train } else { &sp.validation };
    pool.iter().find(|s| s.mask.count() > 0).or(pool.first()).cloned()
}

pub fn train_seg(common: &Common) -> Result<(), CliError> {
    let mut setup = train_setup(common, "train-seg")?;
    let mut model = match &common.checkpoint {
        Some(p) => seg_checkpoint(p)?,
        None => SegModel::new(seg_config(&setup.cfg)?, setup.train.seed)?,
    };
    let samples = prepared(&setup.cfg, &setup.data_dir, model.input_shape())?;
    let sp = make_split(&setup, &samples)?;
    let probe = cam_sample(&sp);
    let mut art = EpochArtifacts::new(&setup.out, setup.train.epochs)?;
    let mut hook = |r: &MetricsReport, m: &SegModel, st: &TrainingState| {
        art.record(r, m, st, |m| match &probe {
            Some(s) => {
                let x = image_tensor(&s.image).map_err(|e| pmad::Error::InvalidConfig(e.to_string()))?;
                let cam = seg_grad_cam(m, &x, None, DEFAULT_SEG_LAYER)?;
                Ok(Some(render_cam(&s.image, &cam)?))
            }
            None => Ok(None),
        })
    };
    let reports = train_segmentation(&mut model, &sp, &setup.train, &mut hook)?;
    art.finish(&reports, &mut setup.manifest)?;
    setup.manifest.finish(&setup.out)?;
    if let Some(r) = reports.last() {
        println!("{}", summary(r));
    }
    Ok(())
}

pub fn train_cls(common: &Common) -> Result<(), CliError> {
    let mut setup = train_setup(common, "train-cls")?;
    let mut model = match &common.checkpoint {
        Some(p) => cls_checkpoint(p)?,
        None => ClsModel::new(cls_config(&setup.cfg)?, setup.train.seed)?,
    };
    let samples = prepared(&setup.cfg, &setup.data_dir, model.input_shape())?;
    let sp = make_split(&setup, &samples)?;
    let probe = cam_sample(&sp);
    let mut art = EpochArtifacts::new(&setup.out, setup.train.epochs)?;
    let mut hook = |r: &MetricsReport, m: &ClsModel, st: &TrainingState| {
        art.record(r, m, st, |m| match &probe {
            Some(s) => {
                let (x, _) = pmad::training::cls_batch(&[s])?;
                let cam = cls_grad_cam(m, &x, s.label.index(), DEFAULT_CLS_LAYER)?;
                Ok(Some(render_cam(&s.image, &cam)?))
            }
            None => Ok(None),
        })
    };
    let reports = train_classifier(&mut model, &sp, &setup.train, &mut hook)?;
    art.finish(&reports, &mut setup.manifest)?;
    setup.manifest.finish(&setup.out)?;
    if let Some(r) = reports.last() {
        println!("{}", summary(r));
    }
    Ok(())
}

fn eval_common<N: Network>(
    common: &Common,
    command: &str,
    net: &N,
    evaluate: impl FnOnce(&[ImageSample], &TrainConfig) -> pmad::Result<MetricsReport>,
) -> Result<(), CliError> {
    let cfg = settings(common)?;
    let ckpt = require(&common.checkpoint, "checkpoint")?;
    let dir = require(&common.data_dir, "data-dir")?;
    let mut manifest = RunManifest::begin(command, cfg.snapshot(), cfg.seed()?);
    let samples = prepared(&cfg, dir, net.input_shape())?;
    let report = evaluate(&samples, &cfg.train()?)?;
    write_json(common.out.as_deref(), &report.to_json())?;
    if let Some(out) = &common.out {
        manifest.inputs = vec![ckpt.to_path_buf(), dir.to_path_buf()];
        manifest.outputs.push(out.clone());
        manifest.checkpoint_hash = Some(checkpoint_hash(ckpt)?);
        manifest.finish(out)?;
    }
    Ok(())
}

pub fn eval_seg(common: &Common) -> Result<(), CliError> {
    let model = seg_checkpoint(require(&common.checkpoint, "checkpoint")?)?;
    eval_common(common, "eval-seg", &model, |s, t| evaluate_segmentation(&model, s, t))
}

pub fn eval_cls(common: &Common) -> Result<(), CliError> {
    let model = cls_checkpoint(require(&common.checkpoint, "checkpoint")?)?;
    eval_common(common, "eval-cls", &model, |s, t| evaluate_classifier(&model, s, t))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    path.with_file_name(format!("{stem}{suffix}.png"))
}

pub fn segment(common: &Common, input: &Path) -> Result<(), CliError> {
    let cfg = settings(common)?;
    let ckpt = require(&common.checkpoint, "checkpoint")?;
    let out = require(&common.out, "out")?;
    let model = seg_checkpoint(ckpt)?;
    let [_, h, w] = model.input_shape();
    let original = load_image(input)?;
    let x = image_tensor(&run_pipeline(&original, &cfg.preprocess(h, w)?)?)?;
    let mask = argmax_masks(&model.segment(&x)?)?.remove(0).resize(original.height, original.width);
    save_mask(&mask, out)?;
    let overlay = with_suffix(out, "_overlay");
    let stats = emit_overlay(&original, &mask, &overlay)?;
    let mut manifest = RunManifest::begin("segment", cfg.snapshot(), cfg.seed()?);
    manifest.inputs = vec![ckpt.to_path_buf(), input.to_path_buf()];
    manifest.outputs = vec![out.to_path_buf(), overlay];
    manifest.checkpoint_hash = Some(checkpoint_hash(ckpt)?);
    manifest.finish(out)?;
    println!(
        "lesion pixels {} of {} ({} region{})",
        mask.count(),
        mask.values.len(),
        stats.contours,
        if stats.contours == 1 { "" } else { "s" }
    );
    Ok(())
}

/// Masked three-channel classifier input at the network's resolution.
fn classifier_input(cfg: &Config, model: &ClsModel, image: &Path, mask: &Path) -> Result<(RawImage, Tensor), CliError> {
    let [_, h, w] = model.input_shape();
    let img = run_pipeline(&load_image(image)?, &cfg.preprocess(h, w)?)?;
    let m = load_mask(mask)?.resize(h, w);
    let mask_t = Tensor::from_vec(&[h, w], m.values.iter().map(|&v| f64::from(v)).collect())?;
    let x = make_classifier_input(&image_tensor(&img)?.reshape(&[h, w])?, &mask_t)?.reshape(&[1, 3, h, w])?;
    Ok((img, x))
}

pub fn classify(common: &Common, input: &Path, mask: &Path) -> Result<(), CliError> {
    let cfg = settings(common)?;
    let ckpt = require(&common.checkpoint, "checkpoint")?;
    let model = cls_checkpoint(ckpt)?;
    let (_, x) = classifier_input(&cfg, &model, input, mask)?;
    let probs = model.classify(&x)?;
    let p = probs.values();
    let best = (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap_or(0);
    let json = serde_json::json!({
        "class": CLASS_NAMES[best],
        "probabilities": CLASS_NAMES.iter().zip(p).map(|(n, v)| (n.to_string(), serde_json::Value::from(*v))).collect::<serde_json::Map<_, _>>(),
    });
    write_json(common.out.as_deref(), &json.to_string())?;
    if let Some(out) = &common.out {
        let mut manifest = RunManifest::begin("classify", cfg.snapshot(), cfg.seed()?);
        manifest.inputs = vec![ckpt.to_path_buf(), input.to_path_buf(), mask.to_path_buf()];
        manifest.outputs.push(out.clone());
        manifest.checkpoint_hash = Some(checkpoint_hash(ckpt)?);
        manifest.finish(out)?;
    }
    Ok(())
}

pub fn gradcam(common: &Common, input: &Path, mask: Option<&Path>, layer: Option<String>, class: Option<String>) -> Result<(), CliError> {
    let cfg = settings(common)?;
    let ckpt = require(&common.checkpoint, "checkpoint")?;
    let out = require(&common.out, "out")?;
    fs::create_dir_all(out)?;
    let (image, cam): (RawImage, GradCam) = match load_model(ckpt)? {
        AnyModel::Seg(model) => {
            if class.is_some() {
                return Err(CliError::Usage("--class applies to classifier checkpoints only".into()));
            }
            let [_, h, w] = model.input_shape();
            let img = run_pipeline(&load_image(input)?, &cfg.preprocess(h, w)?)?;
            let region = mask.map(load_mask).transpose()?.map(|m: Mask| m.resize(h, w));
            let layer = layer.as_deref().unwrap_or(DEFAULT_SEG_LAYER);
            let cam = seg_grad_cam(&model, &image_tensor(&img)?, region.as_ref(), layer)?;
            (img, cam)
        }
        AnyModel::Cls(model) => {
            let mask = mask.ok_or_else(|| CliError::Usage("classifier Grad-CAM needs --mask".into()))?;
            let (img, x) = classifier_input(&cfg, &model, input, mask)?;
            let target = match class {
                Some(name) => name.parse::<Label>()?.index(),
                None => {
                    let p = model.classify(&x)?;
                    let p = p.values();
                    (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap_or(0)
                }
            };
            let layer = layer.as_deref().unwrap_or(DEFAULT_CLS_LAYER);
            (img, cls_grad_cam(&model, &x, target, layer)?)
        }
    };
    let heat = out.join("heatmap.png");
    let overlay = out.join("gradcam_overlay.png");
    save_image(&cam.to_image(), &heat)?;
    save_rgb(&render_cam(&image, &cam)?, &overlay)?;
    let mut manifest = RunManifest::begin("gradcam", cfg.snapshot(), cfg.seed()?);
    manifest.inputs = vec![ckpt.to_path_buf(), input.to_path_buf()];
    manifest.inputs.extend(mask.map(Path::to_path_buf));
    manifest.outputs = vec![heat, overlay];
    manifest.checkpoint_hash = Some(checkpoint_hash(ckpt)?);
    manifest.finish(out)?;
    Ok(())
}

pub fn gradcheck(common: &Common, network: bool) -> Result<(), CliError> {
    let cfg = settings(common)?;
    let seeds: u64 = cfg.get_or("seeds", 20)?;
    let seed = cfg.seed()?;
    let mut rows = primitive_suite(seeds)?;
    rows.extend(attention_suite(seeds)?);
    if network {
        if profile(&cfg)? != Profile::Tiny {
            return Err(CliError::Usage("whole-network checks run on the tiny profile only".into()));
        }
        let coords: usize = cfg.get_or("network_coords", 8)?;
        rows.push(seg_network_check(coords, seed)?);
        rows.push(cls_network_check(coords, seed)?);
    }
    let table = render_table(&rows);
    print!("{table}");
    if let Some(out) = &common.out {
        fs::write(out, &table)?;
        let mut manifest = RunManifest::begin("gradcheck", cfg.snapshot(), seed);
        manifest.outputs.push(out.clone());
        manifest.finish(out)?;
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("gradient check failed: {}", failed.join(", "))))
    }
}

pub fn print_arch(common: &Common, model: ModelKind) -> Result<(), CliError> {
    let cfg = settings(common)?;
    let text = match &common.checkpoint {
        Some(p) => load_model(p)?.network().describe(),
        None => match model {
            ModelKind::Seg => SegModel::uninit(seg_config(&cfg)?)?.describe(),
            ModelKind::Cls => ClsModel::uninit(cls_config(&cfg)?)?.describe(),
        },
    };
    match &common.out {
        Some(out) => fs::write(out, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}
