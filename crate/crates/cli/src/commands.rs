use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use ndarray::Array3;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tcupgan_core::checkpoint::Checkpoint;
use tcupgan_core::components::Connectivity;
use tcupgan_core::discriminator::Discriminator;
use tcupgan_core::generator::{Generator, LayerInfo};
use tcupgan_core::metrics::{
    aggregate, dice_histogram_csv, hd95_histogram_csv, lesionwise, metrics_csv, summary_csv, summary_table, ClassSummary,
    MetricConfig, SampleMetrics,
};
use tcupgan_core::pipeline::{predict_labels, predict_probabilities, prepare_training_sample};
use tcupgan_core::postprocess::{combine, derive_class, tune_thresholds, FilterThresholds, TuneSample, TunerConfig, TunerReport, TumorClass};
use tcupgan_core::training::{train_run, RunConfig, Start, TrainReport};
use tcupgan_core::volume::{make_phantom, split_dataset, LabelVolume, PhantomSpec, PreprocessConfig};
use tcupgan_core::Error as CoreError;

use crate::dataset::{load_labels, load_samples, save_image, save_labels, Entry, Manifest, VolumeFormat};
use crate::{Cli, Command, DescribeArgs, EvaluateArgs, MakePhantomsArgs, PredictArgs, TrainArgs, TuneArgs};

/// Writes to stdout, returning an error instead of panicking when the
/// reader has gone away.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())?;
    out.flush()?;
    Ok(())
}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    CoreError::Config(msg.into()).into()
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_or_default<T: DeserializeOwned + Default>(path: Option<&PathBuf>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), |p| read_json(p))
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::read(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.as_os_str().is_empty() {
        return Err(config_error(format!("{what} not given on the command line or in the config")));
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakePhantoms(a) => make_phantoms(a).map(drop),
        Command::Train(a) => train(a).map(drop),
        Command::Predict(a) => predict(a).map(drop),
        Command::Evaluate(a) => evaluate(a).map(drop),
        Command::TuneThresholds(a) => tune(a).map(drop),
        Command::Describe(a) => describe(a),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSetConfig {
    pub n: usize,
    pub seed: u64,
    pub spec: PhantomSpec,
}

impl Default for PhantomSetConfig {
    fn default() -> Self {
        PhantomSetConfig {
            n: 10,
            seed: 0,
            spec: PhantomSpec::default(),
        }
    }
}

/// Default spec with the tumour radii scaled to `dims`.
pub fn scaled_spec(dims: (usize, usize, usize)) -> PhantomSpec {
    let base = PhantomSpec::default();
    let f = (
        dims.0 as f64 / base.dims.0 as f64,
        dims.1 as f64 / base.dims.1 as f64,
        dims.2 as f64 / base.dims.2 as f64,
    );
    let scale = |r: (f64, f64, f64)| (r.0 * f.0, r.1 * f.1, r.2 * f.2);
    PhantomSpec {
        dims,
        radii_et: scale(base.radii_et),
        radii_nc: scale(base.radii_nc),
        radii_ed: scale(base.radii_ed),
        ..base
    }
}

pub fn make_phantoms(a: MakePhantomsArgs) -> Result<Manifest> {
    let mut cfg: PhantomSetConfig = load_or_default(a.config.as_ref())?;
    if let Some(n) = a.n {
        cfg.n = n;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(d) = a.dims {
        match d.as_slice() {
            &[z, y, x] => cfg.spec = scaled_spec((z, y, x)),
            _ => return Err(config_error("--dims takes three values: depth,height,width")),
        }
    }
    if cfg.n == 0 {
        return Err(config_error("n must be at least 1"));
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut manifest = Manifest::default();
    for i in 0..cfg.n {
        let id = format!("phantom_{i:03}");
        let (vol, labels) = make_phantom(&cfg.spec, cfg.seed.wrapping_add(i as u64))?;
        let (image_file, label_file) = (format!("{id}_image.json"), format!("{id}_labels.json"));
        save_image(&a.out.join(&image_file), &vol)?;
        save_labels(&a.out.join(&label_file), &labels)?;
        manifest.samples.push(Entry {
            id,
            images: vec![image_file],
            labels: Some(label_file),
            classes: None,
        });
    }
    manifest.write(&a.out)?;
    write_json(&a.out.join("make_phantoms.config.json"), &cfg)?;
    info!("wrote {} phantoms to {}", cfg.n, a.out.display());
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainCommandConfig {
    pub data: PathBuf,
    pub init_weights: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub run: RunConfig,
}

fn parse_hw(s: &str) -> Result<Option<(usize, usize)>> {
    if s.eq_ignore_ascii_case("native") {
        return Ok(None);
    }
    let parts: Vec<&str> = s.split(['x', ',']).collect();
    match parts.as_slice() {
        [h, w] => match (h.trim().parse(), w.trim().parse()) {
            (Ok(h), Ok(w)) => Ok(Some((h, w))),
            _ => Err(config_error(format!("target size '{s}' is not HxW or 'native'"))),
        },
        _ => Err(config_error(format!("target size '{s}' is not HxW or 'native'"))),
    }
}

/// Reads either a bare run configuration or a resolved `train.config.json`.
fn load_train_config(path: Option<&PathBuf>) -> Result<(RunConfig, Option<TrainCommandConfig>)> {
    let Some(p) = path else { return Ok((RunConfig::default(), None)) };
    let value: serde_json::Value = read_json(p)?;
    if value.get("run").is_some() {
        let full: TrainCommandConfig = serde_json::from_value(value)
            .map_err(|e| config_error(format!("{}: {e}", p.display())))?;
        Ok((full.run.clone(), Some(full)))
    } else {
        let run = serde_json::from_value(value).map_err(|e| config_error(format!("{}: {e}", p.display())))?;
        Ok((run, None))
    }
}

pub fn train(mut a: TrainArgs) -> Result<TrainReport> {
    let (mut run, stored) = load_train_config(a.config.as_ref())?;
    if let Some(f) = stored {
        a.data = a.data.or(Some(f.data));
        if a.resume.is_none() && a.init_weights.is_none() {
            a.resume = f.resume;
            a.init_weights = f.init_weights;
        }
    }
    let Some(data) = a.data.clone() else {
        return Err(config_error("--data not given on the command line or in the config"));
    };
    if let Some(seed) = a.seed {
        run.train.seed = seed;
        run.preprocess.seed = seed;
    }
    let t = &mut run.train;
    if let Some(e) = a.epochs {
        t.epochs = e;
    }
    if let Some(b) = a.batch_size {
        t.batch_size = b;
    }
    if a.max_steps.is_some() {
        t.max_steps = a.max_steps;
    }
    if (a.transfer || t.transfer) && a.resume.is_none() {
        if a.init_weights.is_none() {
            return Err(config_error("--transfer needs --init-weights"));
        }
        t.transfer = true;
    }
    t.literal_lfake |= a.literal_lfake;
    if a.no_adversarial {
        t.adversarial = false;
    }
    if let Some(m) = a.lr_decay {
        t.lr_decay = m.into();
    }
    if let Some(hw) = &a.target_hw {
        run.preprocess.target_hw = parse_hw(hw)?;
    }
    run.validate()?;

    let start = match (&a.resume, &a.init_weights) {
        (Some(p), _) => {
            let ckpt = read_checkpoint(p)?;
            // the stored configuration wins when resuming
            if let Some(stored) = &ckpt.meta.run {
                run = stored.clone();
                // a step cap only bounds the invocation that set it
                run.train.max_steps = a.max_steps;
            }
            Start::Resume(Box::new(ckpt))
        }
        (None, Some(p)) => Start::Transfer(Box::new(read_checkpoint(p)?)),
        (None, None) => Start::Fresh,
    };

    let samples = load_samples(&data, true)?;
    let multiple = run.generator.spatial_multiple();
    let prepared = samples
        .iter()
        .map(|s| {
            let labels = s.labels.as_ref().expect("labels required above");
            prepare_training_sample(s.id.clone(), &s.image, labels, &run.preprocess, multiple)
        })
        .collect::<tcupgan_core::Result<Vec<_>>>()?;
    let (train_set, val_set) = split_dataset(prepared, run.train.train_fraction, run.train.seed);
    if train_set.is_empty() {
        return Err(config_error("train_fraction leaves no training samples"));
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_json(
        &a.out.join("train.config.json"),
        &TrainCommandConfig {
            data: data.clone(),
            init_weights: a.init_weights.clone(),
            resume: a.resume.clone(),
            run: run.clone(),
        },
    )?;
    info!("training on {} samples, validating on {}", train_set.len(), val_set.len());
    let report = train_run(&a.out, run, &train_set, &val_set, start)?;
    for e in &report.epochs {
        info!(
            "epoch {:>3}  bce' {:.4}  lr_gen {:.3e}  lr_disc {:.3e}",
            e.epoch, e.train_bce_prime, e.lr_gen, e.lr_disc
        );
    }
    Ok(report)
}

/// Parses a preset name, three comma-separated areas, or a JSON file
/// holding thresholds or a tuner report.
pub fn parse_thresholds(s: &str) -> Result<FilterThresholds> {
    if let Ok(t) = FilterThresholds::preset(s) {
        return Ok(t);
    }
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() == 3 {
        if let Ok(v) = parts.iter().map(|p| p.trim().parse::<f64>()).collect::<Result<Vec<_>, _>>() {
            return Ok(FilterThresholds::new([v[0], v[1], v[2]], 5)?);
        }
    }
    let path = Path::new(s);
    if path.exists() {
        let value: serde_json::Value = read_json(path)?;
        let t: FilterThresholds = match value.get("selected") {
            Some(sel) => serde_json::from_value(sel.clone())?,
            None => serde_json::from_value(value)?,
        };
        t.validate()?;
        return Ok(t);
    }
    Err(config_error(format!("cannot read thresholds from '{s}'")))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictConfig {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub thresholds: FilterThresholds,
    pub connectivity: Connectivity,
    pub format: VolumeFormat,
    /// Taken from the checkpoint's run when absent.
    pub preprocess: Option<PreprocessConfig>,
}

fn checkpoint_preprocess(ckpt: &Checkpoint) -> PreprocessConfig {
    ckpt.meta.run.as_ref().map(|r| r.preprocess.clone()).unwrap_or_default()
}

pub fn predict(a: PredictArgs) -> Result<Manifest> {
    let mut cfg: PredictConfig = load_or_default(a.config.as_ref())?;
    if let Some(c) = a.checkpoint {
        cfg.checkpoint = c;
    }
    if let Some(d) = a.data {
        cfg.data = d;
    }
    if let Some(t) = &a.thresholds {
        cfg.thresholds = parse_thresholds(t)?;
    }
    if let Some(s) = a.min_span {
        cfg.thresholds.min_depth_span = s;
    }
    if let Some(c) = a.connectivity {
        cfg.connectivity = c.into();
    }
    if let Some(f) = a.format {
        cfg.format = f;
    }
    require(&cfg.checkpoint, "checkpoint")?;
    require(&cfg.data, "data")?;
    cfg.thresholds.validate()?;
    let ckpt = read_checkpoint(&cfg.checkpoint)?;
    let gen = ckpt.generator()?;
    let pre = cfg.preprocess.clone().unwrap_or_else(|| checkpoint_preprocess(&ckpt));
    cfg.preprocess = Some(pre.clone());

    let samples = load_samples(&cfg.data, false)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut manifest = Manifest::default();
    for s in &samples {
        let (out, geometry) = predict_labels(&gen, &s.image, &pre, &cfg.thresholds, cfg.connectivity)?;
        if geometry.was_padded() {
            info!(
                "{}: padded {:?} to {:?} and cropped back",
                s.id, geometry.resized_hw, geometry.padded_hw
            );
        }
        let label_file = cfg.format.file_name(&format!("{}_labels", s.id));
        save_labels(&a.out.join(&label_file), &out.labels)?;
        let classes = TumorClass::ALL.map(|cls| cfg.format.file_name(&format!("{}_{}", s.id, cls.name().to_lowercase())));
        for (cls, file) in TumorClass::ALL.iter().zip(&classes) {
            let binary = LabelVolume::new(out.class(*cls).mapv(u8::from))?;
            save_labels(&a.out.join(file), &binary)?;
        }
        manifest.samples.push(Entry {
            id: s.id.clone(),
            images: vec![],
            labels: Some(label_file),
            classes: Some(classes),
        });
    }
    manifest.write(&a.out)?;
    write_json(&a.out.join("predict.config.json"), &cfg)?;
    info!("wrote {} predictions to {}", samples.len(), a.out.display());
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateConfig {
    pub pred: PathBuf,
    pub gt: PathBuf,
    pub metric: MetricConfig,
    pub bins: usize,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            pred: PathBuf::new(),
            gt: PathBuf::new(),
            metric: MetricConfig::default(),
            bins: 10,
        }
    }
}

/// Per-class binaries of a prediction entry, from the class files when
/// present and from the label cube otherwise.
fn prediction_classes(dir: &Path, e: &Entry) -> Result<[Array3<bool>; 3]> {
    match (&e.classes, &e.labels) {
        (Some(files), _) => {
            let mut out = Vec::with_capacity(3);
            for f in files {
                out.push(load_labels(&dir.join(f))?.data().mapv(|v| v != 0));
            }
            Ok([out.remove(0), out.remove(0), out.remove(0)])
        }
        (None, Some(f)) => {
            let l = load_labels(&dir.join(f))?;
            Ok(TumorClass::ALL.map(|c| derive_class(&l, c)))
        }
        (None, None) => bail!(CoreError::InvalidInput(format!("prediction {} names no files", e.id))),
    }
}

pub struct Evaluation {
    pub samples: Vec<SampleMetrics>,
    pub summary: Vec<ClassSummary>,
    pub table: String,
}

pub fn evaluate(a: EvaluateArgs) -> Result<Evaluation> {
    let mut cfg: EvaluateConfig = load_or_default(a.config.as_ref())?;
    if let Some(p) = a.pred {
        cfg.pred = p;
    }
    if let Some(g) = a.gt {
        cfg.gt = g;
    }
    if let Some(c) = a.connectivity {
        cfg.metric.connectivity = c.into();
    }
    if let Some(d) = a.dilation {
        cfg.metric.dilation_radius = d;
    }
    if let Some(p) = a.penalty {
        cfg.metric.penalty = p;
    }
    if let Some(m) = a.hd95_mode {
        cfg.metric.hd95_mode = m.into();
    }
    if let Some(b) = a.bins {
        cfg.bins = b;
    }
    require(&cfg.pred, "pred")?;
    require(&cfg.gt, "gt")?;
    if !(cfg.metric.penalty > 0.0) || cfg.bins == 0 {
        return Err(config_error("penalty and bins must be positive"));
    }
    let pred = Manifest::read(&cfg.pred)?;
    let gt = Manifest::read(&cfg.gt)?;
    let unmatched: Vec<&str> = pred
        .samples
        .iter()
        .filter(|e| gt.get(&e.id).is_none())
        .chain(gt.samples.iter().filter(|e| pred.get(&e.id).is_none()))
        .map(|e| e.id.as_str())
        .collect();
    if !unmatched.is_empty() {
        bail!(CoreError::InvalidInput(format!("unmatched sample ids: {}", unmatched.join(", "))));
    }

    let mut samples = Vec::with_capacity(gt.samples.len());
    for g in &gt.samples {
        let label_file = g
            .labels
            .as_ref()
            .ok_or_else(|| CoreError::InvalidInput(format!("ground truth {} has no labels", g.id)))?;
        let truth = load_labels(&cfg.gt.join(label_file))?;
        let p = pred.get(&g.id).expect("ids matched above");
        let predicted = prediction_classes(&cfg.pred, p)?;
        let mut classes = Vec::with_capacity(3);
        for (cls, pd) in TumorClass::ALL.iter().zip(&predicted) {
            let r = lesionwise(&derive_class(&truth, *cls), pd, &cfg.metric).with_context(|| format!("sample {}", g.id))?;
            classes.push((*cls, r));
        }
        samples.push(SampleMetrics {
            sample_id: g.id.clone(),
            classes,
        });
    }
    let summary = aggregate(&samples)?;
    let table = summary_table("Lesion-wise Dice (D_lw) and 95% Hausdorff distance (H95_lw)", &summary);

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join("metrics.csv"), metrics_csv(&samples))?;
    fs::write(a.out.join("summary.csv"), summary_csv(&summary))?;
    fs::write(a.out.join("summary.txt"), &table)?;
    fs::write(a.out.join("dice_histogram.csv"), dice_histogram_csv(&samples, cfg.bins))?;
    fs::write(a.out.join("hd95_histogram.csv"), hd95_histogram_csv(&samples, cfg.bins, cfg.metric.penalty))?;
    write_json(&a.out.join("evaluate.config.json"), &cfg)?;
    emit(&table)?;
    Ok(Evaluation { samples, summary, table })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneCommandConfig {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub tuner: TunerConfig,
    pub preprocess: Option<PreprocessConfig>,
}

pub fn tune(a: TuneArgs) -> Result<TunerReport> {
    let mut cfg: TuneCommandConfig = load_or_default(a.config.as_ref())?;
    if let Some(c) = a.checkpoint {
        cfg.checkpoint = c;
    }
    if let Some(d) = a.data {
        cfg.data = d;
    }
    if let Some(g) = a.grid {
        cfg.tuner.grid = g;
    }
    if let Some(i) = a.iters {
        cfg.tuner.iterations = i;
    }
    if let Some(s) = a.seed {
        cfg.tuner.seed = s;
    }
    if let Some(s) = a.min_span {
        cfg.tuner.min_depth_span = s;
    }
    if let Some(c) = a.connectivity {
        cfg.tuner.metric.connectivity = c.into();
    }
    require(&cfg.checkpoint, "checkpoint")?;
    require(&cfg.data, "data")?;
    let ckpt = read_checkpoint(&cfg.checkpoint)?;
    let gen = ckpt.generator()?;
    let pre = cfg.preprocess.clone().unwrap_or_else(|| checkpoint_preprocess(&ckpt));
    cfg.preprocess = Some(pre.clone());

    let mut tune_set = Vec::new();
    for s in load_samples(&cfg.data, true)? {
        let (pd, _) = predict_probabilities(&gen, &s.image, &pre)?;
        tune_set.push(TuneSample {
            id: s.id,
            prediction: combine(&pd),
            truth: s.labels.expect("labels required above"),
        });
    }
    let report = tune_thresholds(&tune_set, &cfg.tuner)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_json(&a.out.join("tuner_report.json"), &report)?;
    write_json(&a.out.join("thresholds.json"), &report.selected)?;
    write_json(&a.out.join("tune_thresholds.config.json"), &cfg)?;
    info!(
        "selected thresholds {:?} (mean D_lw {:?})",
        report.selected.a_thresh, report.selected_mean_dice
    );
    Ok(report)
}

#[derive(Serialize)]
struct Description {
    generator_params: usize,
    discriminator_params: usize,
    generator_layers: Vec<LayerInfo>,
}

pub fn describe(a: DescribeArgs) -> Result<()> {
    let run = match &a.config {
        Some(p) if p.extension().is_some_and(|e| e == "ckpt") => {
            let ckpt = read_checkpoint(p)?;
            let mut r = ckpt.meta.run.clone().unwrap_or_default();
            r.generator = ckpt.meta.generator.clone();
            r.discriminator = ckpt.meta.discriminator.clone();
            r
        }
        Some(p) => read_json::<RunConfig>(p)?,
        None => RunConfig::default(),
    };
    run.validate()?;
    let gen = Generator::new(run.generator.clone(), 0)?;
    let disc = Discriminator::new(run.discriminator.clone(), 0)?;
    let d = Description {
        generator_params: gen.num_params(),
        discriminator_params: disc.num_params(),
        generator_layers: gen.describe(),
    };
    if a.json {
        return emit(&(serde_json::to_string_pretty(&d)? + "\n"));
    }
    let mut text = format!("{:<28} {:<18} {:>10}\n", "parameter", "shape", "count");
    for l in &d.generator_layers {
        text += &format!("{:<28} {:<18} {:>10}\n", l.name, format!("{:?}", l.shape), l.count);
    }
    text += &format!("generator total:     {}\n", d.generator_params);
    text += &format!("discriminator total: {}\n", d.discriminator_params);
    emit(&text)
}
