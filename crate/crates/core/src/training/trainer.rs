use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{adversarial_label, bce_const_graph, bce_prime_graph, class_weights, ClassWeights};
use super::schedule::{lr_schedule, LrDecay};
use crate::autograd::{Graph, Var};
use crate::checkpoint::{Checkpoint, CheckpointMeta, RngState};
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::volume::{add_foreground_noise, one_hot_encode, sample_seed, LabelVolume, MultiModalVolume, PreprocessConfig};

pub const LOSS_LOG_HEADER: &str = "step,bce_prime,l_real,l_fake,l_disc,l_gen,lr_gen,lr_disc";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub gen_lr0: f64,
    pub disc_lr0: f64,
    pub decay_exponent: f64,
    pub decay_every: usize,
    pub lr_decay: LrDecay,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fine-tuning from existing weights with a constant rate.
    pub transfer: bool,
    pub transfer_lr: f64,
    /// Add the adversarial term to the generator loss.
    pub adversarial: bool,
    /// Skip discriminator updates.
    pub freeze_discriminator: bool,
    /// Generator adversarial term against the "fake" label, exactly as the
    /// loss is written, instead of against "real".
    pub literal_lfake: bool,
    pub train_fraction: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Stop after this many optimizer steps in total.
    pub max_steps: Option<u64>,
    pub checkpoint_every: usize,
    /// Hash both parameter sets around every half-step and fail if the
    /// wrong network changed.
    pub verify_isolation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 200.0,
            gen_lr0: 5e-4,
            disc_lr0: 1e-4,
            decay_exponent: 0.95,
            decay_every: 5,
            lr_decay: LrDecay::PowerOfRate,
            epochs: 30,
            batch_size: 2,
            transfer: false,
            transfer_lr: 1e-4,
            adversarial: true,
            freeze_discriminator: false,
            literal_lfake: false,
            train_fraction: 0.9,
            seed: 0,
            adam: AdamConfig::default(),
            max_steps: None,
            checkpoint_every: 1,
            verify_isolation: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("gamma", self.gamma >= 0.0),
            ("gen_lr0", self.gen_lr0 > 0.0),
            ("disc_lr0", self.disc_lr0 > 0.0),
            ("transfer_lr", self.transfer_lr > 0.0),
            ("decay_exponent", self.decay_exponent > 0.0),
            ("epochs", self.epochs > 0),
            ("batch_size", self.batch_size > 0),
            ("checkpoint_every", self.checkpoint_every > 0),
            ("train_fraction", self.train_fraction > 0.0 && self.train_fraction <= 1.0),
        ];
        match positive.iter().find(|(_, ok)| !ok) {
            Some((name, _)) => Err(Error::Config(format!("{name} out of range"))),
            None => Ok(()),
        }
    }

    /// `(generator, discriminator)` learning rates for a 0-based epoch.
    pub fn learning_rates(&self, epoch: usize) -> (f64, f64) {
        if self.transfer {
            return (self.transfer_lr, self.transfer_lr);
        }
        let lr = |lr0| lr_schedule(epoch, lr0, self.decay_exponent, self.decay_every, self.lr_decay);
        (lr(self.gen_lr0), lr(self.disc_lr0))
    }
}

/// Everything needed to reproduce a training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub preprocess: PreprocessConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.preprocess.validate()?;
        self.train.validate()?;
        let expected = self.generator.in_channels + self.generator.out_classes;
        if self.discriminator.in_channels != expected {
            return Err(Error::Config(format!(
                "discriminator expects {} channels, generator pairs give {expected}",
                self.discriminator.in_channels
            )));
        }
        Ok(())
    }
}

/// A preprocessed (normalized, resized, noise-free) training pair.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub id: String,
    pub image: MultiModalVolume,
    pub target: Rc<Tensor>,
    pub weights: ClassWeights,
}

impl TrainSample {
    pub fn new(id: impl Into<String>, image: MultiModalVolume, labels: &LabelVolume) -> Result<Self> {
        let (_, d, h, w) = image.dim();
        if labels.dim() != (d, h, w) {
            return Err(Error::shape((d, h, w), labels.dim()));
        }
        let onehot = one_hot_encode(labels);
        Ok(TrainSample {
            id: id.into(),
            weights: class_weights(&onehot),
            target: Rc::new(onehot.to_tensor()),
            image,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepReport {
    pub epoch: usize,
    pub step: u64,
    pub bce_prime: f64,
    pub l_real: f64,
    pub l_fake: f64,
    pub l_disc: f64,
    pub adversarial: f64,
    pub l_gen: f64,
    pub lr_gen: f64,
    pub lr_disc: f64,
    pub class_weights: Vec<Vec<f64>>,
}

impl StepReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, self.bce_prime, self.l_real, self.l_fake, self.l_disc, self.l_gen, self.lr_gen, self.lr_disc
        )
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn add_grads(acc: &mut Option<Vec<Tensor>>, grads: Vec<Tensor>) {
    match acc {
        Some(a) => a.iter_mut().zip(&grads).for_each(|(x, g)| x.add_assign(g)),
        None => *acc = Some(grads),
    }
}

fn adam_tensors(prefix: &str, adam: &Adam, store: &ParamStore) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for ((name, t), (m, v)) in store.iter().zip(adam.m.iter().zip(&adam.v)) {
        out.push((format!("{prefix}.m.{name}"), Tensor::new(t.shape().to_vec(), m.clone()).expect("shape")));
        out.push((format!("{prefix}.v.{name}"), Tensor::new(t.shape().to_vec(), v.clone()).expect("shape")));
    }
    out
}

fn restore_adam(prefix: &str, ckpt: &Checkpoint, adam: &mut Adam, store: &ParamStore, steps: u64) -> Result<()> {
    for (i, (name, _)) in store.iter().enumerate() {
        let get = |kind: &str| {
            ckpt.tensor(&format!("{prefix}.{kind}.{name}"))
                .map(|t| t.data().to_vec())
                .ok_or_else(|| Error::InvalidInput(format!("checkpoint lacks optimizer state for {name}")))
        };
        adam.m[i] = get("m")?;
        adam.v[i] = get("v")?;
    }
    adam.steps = steps;
    Ok(())
}

/// Generator, discriminator, both optimizers and the dropout stream.
pub struct Trainer {
    pub config: RunConfig,
    pub gen: Generator,
    pub disc: Discriminator,
    adam_gen: Adam,
    adam_disc: Adam,
    rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.train.seed;
        let gen = Generator::new(config.generator.clone(), seed)?;
        let disc = Discriminator::new(config.discriminator.clone(), seed.wrapping_add(1))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        Ok(Trainer {
            adam_gen: Adam::new(config.train.adam, &gen.params),
            adam_disc: Adam::new(config.train.adam, &disc.params),
            config,
            gen,
            disc,
            rng,
            epoch: 0,
            step: 0,
        })
    }

    /// Fresh optimizers, weights taken from `ckpt`.
    pub fn with_weights(config: RunConfig, ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta.generator != config.generator || ckpt.meta.discriminator != config.discriminator {
            return Err(Error::Config("checkpoint architecture differs from the run configuration".into()));
        }
        let mut t = Self::new(config)?;
        ckpt.fill_store(&mut t.gen.params)?;
        ckpt.fill_store(&mut t.disc.params)?;
        Ok(t)
    }

    /// Continues exactly where `ckpt` stopped.
    pub fn resume(ckpt: &Checkpoint) -> Result<Self> {
        let config = ckpt
            .meta
            .run
            .clone()
            .ok_or_else(|| Error::InvalidInput("checkpoint carries no run configuration".into()))?;
        let mut t = Self::with_weights(config, ckpt)?;
        restore_adam("adam_gen", ckpt, &mut t.adam_gen, &t.gen.params, ckpt.meta.adam_gen_steps)?;
        restore_adam("adam_disc", ckpt, &mut t.adam_disc, &t.disc.params, ckpt.meta.adam_disc_steps)?;
        if let Some(rng) = &ckpt.meta.rng {
            t.rng = rng.restore()?;
        }
        t.epoch = ckpt.meta.epoch;
        t.step = ckpt.meta.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint {
            meta: CheckpointMeta {
                generator: self.config.generator.clone(),
                discriminator: self.config.discriminator.clone(),
                run: Some(self.config.clone()),
                epoch: self.epoch,
                step: self.step,
                rng: Some(RngState::capture(&self.rng)),
                adam_gen_steps: self.adam_gen.steps,
                adam_disc_steps: self.adam_disc.steps,
            },
            tensors: Vec::new(),
        };
        ckpt.push_store(&self.gen.params);
        ckpt.push_store(&self.disc.params);
        ckpt.tensors.extend(adam_tensors("adam_gen", &self.adam_gen, &self.gen.params));
        ckpt.tensors.extend(adam_tensors("adam_disc", &self.adam_disc, &self.disc.params));
        ckpt
    }

    fn noisy_input(&self, index: usize, sample: &TrainSample, epoch: usize) -> Result<Tensor> {
        let p = &self.config.preprocess;
        let seed = sample_seed(self.config.train.seed, index as u64, epoch as u64);
        Ok(add_foreground_noise(&sample.image, p.noise_mu, p.noise_sigma, seed)?.to_tensor())
    }

    fn check_finite(&self, what: &str, v: f64) -> Result<()> {
        if v.is_finite() {
            Ok(())
        } else {
            Err(Error::Divergence {
                step: self.step,
                what: format!("{what} = {v}"),
            })
        }
    }

    fn check_unchanged(&self, before: Option<String>, store: &ParamStore, what: &str) -> Result<()> {
        match before {
            Some(fp) if fp != store.fingerprint() => Err(Error::InvalidInput(format!(
                "{what} parameters changed during the other network's update"
            ))),
            _ => Ok(()),
        }
    }

    /// One optimizer step for each network on `batch` (pairs of dataset
    /// index and sample).
    pub fn train_step(&mut self, batch: &[(usize, &TrainSample)]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let tc = self.config.train.clone();
        let (lr_gen, lr_disc) = tc.learning_rates(self.epoch);
        let scale = 1.0 / batch.len() as f64;

        // generator forward, one graph per sample, kept for the backward pass
        struct Forward {
            graph: Graph,
            gen_params: crate::params::Bound,
            x: Var,
            pd: Var,
            bce: Var,
        }
        let mut fwd = Vec::with_capacity(batch.len());
        for &(index, sample) in batch {
            let graph = Graph::new();
            let gen_params = self.gen.params.bind(&graph);
            let x = graph.constant(self.noisy_input(index, sample, self.epoch)?);
            let pd = self.gen.forward_graph(&graph, &gen_params, &x)?;
            let bce = bce_prime_graph(&graph, &pd, sample.target.clone(), &sample.weights.w, tc.gamma)?;
            fwd.push(Forward {
                graph,
                gen_params,
                x,
                pd,
                bce,
            });
        }

        // discriminator half-step on (x, GT) against (x, PD)
        let gen_before = tc.verify_isolation.then(|| self.gen.params.fingerprint());
        let (mut l_real, mut l_fake) = (Vec::new(), Vec::new());
        let mut disc_grads = None;
        for (f, &(_, sample)) in fwd.iter().zip(batch) {
            let g = Graph::new();
            let p = self.disc.params.bind(&g);
            let x = g.constant_rc(f.x.value_rc());
            let real_in = g.concat(&[&x, &g.constant_rc(sample.target.clone())])?;
            let fake_in = g.concat(&[&x, &g.constant_rc(f.pd.value_rc())])?;
            let s_real = self.disc.forward_graph(&g, &p, &real_in, Some(&mut self.rng))?;
            let s_fake = self.disc.forward_graph(&g, &p, &fake_in, Some(&mut self.rng))?;
            let lr_ = bce_const_graph(&g, &s_real, 1.0)?;
            let lf_ = bce_const_graph(&g, &s_fake, 0.0)?;
            l_real.push(lr_.value().item());
            l_fake.push(lf_.value().item());
            if !tc.freeze_discriminator {
                let loss = g.scale(&g.add(&lr_, &lf_)?, 0.5 * scale);
                add_grads(&mut disc_grads, p.grads(&g.backward(&loss)?));
            }
        }
        let (l_real, l_fake) = (mean(&l_real), mean(&l_fake));
        let l_disc = 0.5 * (l_real + l_fake);
        for (what, v) in [("l_real", l_real), ("l_fake", l_fake)] {
            self.check_finite(what, v)?;
        }
        if let Some(grads) = disc_grads {
            self.adam_disc.step(&mut self.disc.params, &grads, lr_disc)?;
        }
        self.check_unchanged(gen_before, &self.gen.params, "generator")?;

        // generator half-step on BCE' plus the adversarial term
        let disc_before = tc.verify_isolation.then(|| self.disc.params.fingerprint());
        let (mut bces, mut advs) = (Vec::new(), Vec::new());
        let mut gen_grads = None;
        for f in &fwd {
            let g = &f.graph;
            bces.push(f.bce.value().item());
            let total = if tc.adversarial {
                let p = self.disc.params.bind_frozen(g);
                let input = g.concat(&[&f.x, &f.pd])?;
                let s = self.disc.forward_graph(g, &p, &input, Some(&mut self.rng))?;
                let adv = bce_const_graph(g, &s, adversarial_label(tc.literal_lfake))?;
                advs.push(adv.value().item());
                g.add(&f.bce, &adv)?
            } else {
                advs.push(0.0);
                f.bce.clone()
            };
            let loss = g.scale(&total, scale);
            add_grads(&mut gen_grads, f.gen_params.grads(&g.backward(&loss)?));
        }
        let (bce_prime, adversarial) = (mean(&bces), mean(&advs));
        let l_gen = bce_prime + adversarial;
        for (what, v) in [("bce_prime", bce_prime), ("adversarial", adversarial)] {
            self.check_finite(what, v)?;
        }
        drop(fwd);
        self.adam_gen.step(&mut self.gen.params, &gen_grads.expect("non-empty batch"), lr_gen)?;
        self.check_unchanged(disc_before, &self.disc.params, "discriminator")?;

        self.step += 1;
        Ok(StepReport {
            epoch: self.epoch,
            step: self.step,
            bce_prime,
            l_real,
            l_fake,
            l_disc,
            adversarial,
            l_gen,
            lr_gen,
            lr_disc,
            class_weights: batch.iter().map(|(_, s)| s.weights.w.clone()).collect(),
        })
    }

    fn budget_left(&self) -> bool {
        self.config.train.max_steps.is_none_or(|m| self.step < m)
    }

    /// One pass over `data` in a seeded per-epoch order.
    pub fn run_epoch(&mut self, data: &[TrainSample], mut on_step: impl FnMut(&StepReport) -> Result<()>) -> Result<Vec<StepReport>> {
        if data.is_empty() {
            return Err(Error::InvalidInput("no training samples".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(self.config.train.seed);
        shuffle_rng.set_stream(1_000 + self.epoch as u64);
        order.shuffle(&mut shuffle_rng);
        let mut reports = Vec::new();
        for chunk in order.chunks(self.config.train.batch_size) {
            if !self.budget_left() {
                break;
            }
            let batch: Vec<(usize, &TrainSample)> = chunk.iter().map(|&i| (i, &data[i])).collect();
            let r = self.train_step(&batch)?;
            on_step(&r)?;
            reports.push(r);
        }
        self.epoch += 1;
        Ok(reports)
    }

    /// Mean BCE' over `data`, without noise or dropout.
    pub fn validate(&self, data: &[TrainSample]) -> Result<f64> {
        let mut total = 0.0;
        for s in data {
            let g = Graph::inference();
            let p = self.gen.params.bind(&g);
            let pd = self.gen.forward_graph(&g, &p, &g.constant(s.image.to_tensor()))?;
            total += bce_prime_graph(&g, &pd, s.target.clone(), &s.weights.w, self.config.train.gamma)?.value().item();
        }
        Ok(total / data.len().max(1) as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    /// 1-based.
    pub epoch: usize,
    pub steps: u64,
    pub train_bce_prime: f64,
    pub val_bce_prime: Option<f64>,
    pub lr_gen: f64,
    pub lr_disc: f64,
    pub checkpoint: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochSummary>,
    pub total_steps: u64,
    pub generator_params: usize,
    pub discriminator_params: usize,
    pub generator_fingerprint: String,
    pub discriminator_fingerprint: String,
    pub final_checkpoint: String,
    pub train_samples: Vec<String>,
    pub val_samples: Vec<String>,
}

/// How a run begins.
pub enum Start {
    Fresh,
    /// Initial weights from another run, new optimizers.
    Transfer(Box<Checkpoint>),
    /// Continue a run, optimizer and random state included.
    Resume(Box<Checkpoint>),
}

pub fn checkpoint_path(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("epoch_{epoch:03}.ckpt"))
}

/// Trains for the configured number of epochs, writing `config.json`,
/// `checkpoints/epoch_NNN.ckpt`, `loss_log.csv` and `report.json` under
/// `run_dir`.
pub fn train_run(
    run_dir: &Path,
    config: RunConfig,
    train: &[TrainSample],
    val: &[TrainSample],
    start: Start,
) -> Result<TrainReport> {
    let mut trainer = match &start {
        Start::Fresh => Trainer::new(config)?,
        Start::Transfer(ckpt) => Trainer::with_weights(config, ckpt)?,
        Start::Resume(ckpt) => {
            // the checkpoint's configuration wins, apart from the step cap
            let mut t = Trainer::resume(ckpt)?;
            t.config.train.max_steps = config.train.max_steps;
            t
        }
    };
    let config = trainer.config.clone();
    fs::create_dir_all(run_dir.join("checkpoints"))?;
    fs::write(run_dir.join("config.json"), serde_json::to_string_pretty(&config)?)?;

    let log_path = run_dir.join("loss_log.csv");
    let resuming = matches!(start, Start::Resume(_)) && log_path.exists();
    let mut log = OpenOptions::new()
        .create(true)
        .append(resuming)
        .write(true)
        .truncate(!resuming)
        .open(&log_path)?;
    if !resuming {
        writeln!(log, "{LOSS_LOG_HEADER}")?;
    }

    let report_path = run_dir.join("report.json");
    let mut epochs: Vec<EpochSummary> = match (&start, fs::read_to_string(&report_path)) {
        (Start::Resume(_), Ok(text)) => serde_json::from_str::<TrainReport>(&text)
            .map(|r| r.epochs.into_iter().filter(|e| e.epoch <= trainer.epoch).collect())
            .unwrap_or_default(),
        _ => Vec::new(),
    };
    let tc = &config.train;
    let mut final_checkpoint = None;
    while trainer.epoch < tc.epochs && trainer.budget_left() {
        let (lr_gen, lr_disc) = tc.learning_rates(trainer.epoch);
        let reports = trainer.run_epoch(train, |r| Ok(writeln!(log, "{}", r.csv_row())?))?;
        log.flush()?;
        let epoch = trainer.epoch;
        let last = epoch == tc.epochs || !trainer.budget_left();
        let checkpoint = if epoch % tc.checkpoint_every == 0 || last {
            let path = checkpoint_path(run_dir, epoch);
            trainer.checkpoint().write(&path)?;
            final_checkpoint = Some(path.clone());
            Some(path.strip_prefix(run_dir).unwrap_or(&path).display().to_string())
        } else {
            None
        };
        epochs.push(EpochSummary {
            epoch,
            steps: reports.len() as u64,
            train_bce_prime: mean(&reports.iter().map(|r| r.bce_prime).collect::<Vec<_>>()),
            val_bce_prime: if val.is_empty() { None } else { Some(trainer.validate(val)?) },
            lr_gen,
            lr_disc,
            checkpoint,
        });
    }
    let final_checkpoint = match final_checkpoint {
        Some(p) => p,
        None => {
            let path = checkpoint_path(run_dir, trainer.epoch);
            trainer.checkpoint().write(&path)?;
            path
        }
    };
    let report = TrainReport {
        epochs,
        total_steps: trainer.step,
        generator_params: trainer.gen.num_params(),
        discriminator_params: trainer.disc.num_params(),
        generator_fingerprint: trainer.gen.params.fingerprint(),
        discriminator_fingerprint: trainer.disc.params.fingerprint(),
        final_checkpoint: final_checkpoint.strip_prefix(run_dir).unwrap_or(&final_checkpoint).display().to_string(),
        train_samples: train.iter().map(|s| s.id.clone()).collect(),
        val_samples: val.iter().map(|s| s.id.clone()).collect(),
    };
    fs::write(report_path, serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}
