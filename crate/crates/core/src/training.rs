//! Self-supervised training: sample a latent pair, turn the flow between
//! their images into pseudo user inputs, and regress the perturbed codes.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array1;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::autodiff::Gradients;
use crate::checkpoint::Archive;
use crate::error::{invalid, Error, Result};
use crate::flow::{normalize, random_subset, subsample, BlockMatching, FlowBackend, Normalizers};
use crate::generator::{FeatureGrid, Generator, GeneratorConfig};
use crate::latent::{seeded_rng, LatentSeq, LatentW};
use crate::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::transformer::{LatentTransformer, TransformerConfig, UserInputSet};

/// Retries allowed when a pair yields no valid flow cells.
const MAX_RESAMPLES: u64 = 64;

pub(crate) fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 over the three words
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws `(w_before, w_after)` pairs: truncated broadcast codes, then an
/// independent perturbation per layer.
#[derive(Debug, Clone)]
pub struct PairSampler<'g> {
    generator: &'g Generator,
    pub w_bar: LatentW,
    pub psi: f64,
    pub phi: f64,
    /// Layers left unperturbed.
    pub hold: Vec<usize>,
}

impl<'g> PairSampler<'g> {
    pub fn new(generator: &'g Generator, w_bar: LatentW, psi: f64, phi: f64) -> Self {
        Self {
            generator,
            w_bar,
            psi,
            phi,
            hold: Vec::new(),
        }
    }

    pub fn generator(&self) -> &'g Generator {
        self.generator
    }

    pub fn sample(&self, seed: u64, index: u64) -> Result<(LatentSeq, LatentSeq)> {
        let key = mix(seed, index, 0x70616972);
        let mut rng = seeded_rng(key, 0);
        let w_rand = self.generator.sample_w(&mut rng);
        let w = self.generator.truncate(&w_rand, &self.w_bar, self.psi)?;
        let before = LatentSeq::broadcast(&w, self.generator.num_wplus());
        let after = self.generator.perturb(&before, self.phi, key, &self.hold)?;
        Ok((before, after))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub psi: f64,
    pub phi: f64,
    pub iterations: u64,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub flow_grid: usize,
    /// Train on random subsets of this many flow samples instead of the full
    /// grid.
    pub train_subset_k: Option<usize>,
    /// Fraction of examples thinned to a log-uniform random number of flow
    /// samples, so the model also sees sparse inputs.
    pub sparse_fraction: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub calibration_pairs: usize,
    pub average_latent_samples: usize,
    /// Keep codes outside the trainable set fixed when perturbing.
    pub hold_untrained_layers: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            psi: 0.3,
            phi: 0.1,
            iterations: 60_000,
            batch_size: 1,
            optimizer: OptimizerConfig::ranger(0.001),
            flow_grid: 16,
            train_subset_k: None,
            sparse_fraction: 0.0,
            seed: 0,
            checkpoint_every: 1000,
            calibration_pairs: 300,
            average_latent_samples: 10_000,
            hold_untrained_layers: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.psi) || !(0.0..=1.0).contains(&self.phi) {
            return Err(Error::Config("psi and phi must lie in [0, 1]".into()));
        }
        if self.optimizer.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.flow_grid == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("batch_size, flow_grid and checkpoint_every must be positive".into()));
        }
        if self.train_subset_k == Some(0) {
            return Err(Error::Config("train_subset_k must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.sparse_fraction) {
            return Err(Error::Config("sparse_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One prepared training example.
#[derive(Debug, Clone)]
pub struct Example {
    pub w_before: LatentSeq,
    pub w_after: LatentSeq,
    pub inputs: UserInputSet,
    pub features: FeatureGrid,
}

/// Builds the example for `(seed, index)`, resampling pairs whose flow has
/// no usable cells.
pub fn prepare_example(
    sampler: &PairSampler<'_>,
    backend: &dyn FlowBackend,
    norms: Normalizers,
    cfg: &TrainConfig,
    index: u64,
) -> Result<Example> {
    let g = sampler.generator();
    for attempt in 0..MAX_RESAMPLES {
        let key = mix(cfg.seed, index, attempt);
        let (w_before, w_after) = sampler.sample(key, 0)?;
        let (img_before, features) = g.synthesize_with_features(&w_before)?;
        let img_after = g.synthesize(&w_after)?;
        let flow = normalize(&backend.estimate(&img_before, &img_after)?, norms)?;
        let mut inputs = subsample(&flow, cfg.flow_grid)?;
        if let Some(k) = cfg.train_subset_k {
            if inputs.len() < k {
                tracing::debug!(index, attempt, valid = inputs.len(), "too few valid flow cells; resampling");
                continue;
            }
            inputs = random_subset(&inputs, k, key)?;
        }
        if inputs.is_empty() {
            tracing::debug!(index, attempt, "no valid flow cells; resampling");
            continue;
        }
        let mut rng = seeded_rng(key, 4);
        if cfg.sparse_fraction > 0.0 && rng.random::<f64>() < cfg.sparse_fraction {
            let n = inputs.len();
            let k = ((n as f64 + 1.0).ln() * rng.random::<f64>()).exp().floor() as usize;
            inputs = random_subset(&inputs, k.clamp(1, n), key)?;
        }
        return Ok(Example {
            w_before,
            w_after,
            inputs,
            features,
        });
    }
    Err(Error::Backend(format!(
        "no usable flow after {MAX_RESAMPLES} pairs at iteration {index}"
    )))
}

fn dump_pair(ex: &Example, iteration: u64) -> String {
    let path = std::env::temp_dir().join(format!("dragedit-nonfinite-{iteration}.json"));
    let body = json!({
        "iteration": iteration,
        "w_before": ex.w_before.to_rows(),
        "w_after": ex.w_after.to_rows(),
        "inputs": ex.inputs,
    });
    match fs::write(&path, body.to_string()) {
        Ok(()) => path.display().to_string(),
        Err(e) => format!("<dump failed: {e}>"),
    }
}

/// Mean loss over `batch` and one optimiser update.
pub fn optimize_on(
    model: &mut LatentTransformer<f32>,
    optimizer: &mut Optimizer<f32>,
    batch: &[Example],
    iteration: u64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut summed: Option<Gradients<f32>> = None;
    let mut per_example = Vec::with_capacity(batch.len());
    for ex in batch {
        let (loss, grads) = model.loss_and_grads(&ex.w_before, &ex.inputs, &ex.features, &ex.w_after)?;
        if !loss.is_finite() || !grads.squared_norm().is_finite() {
            let dump = dump_pair(ex, iteration);
            return Err(Error::NonFinite(format!(
                "loss {loss} at iteration {iteration}; offending pair written to {dump}"
            )));
        }
        total += loss;
        per_example.push(grads);
    }
    if batch.len() == 1 {
        summed = per_example.pop();
    } else {
        let scale = 1.0 / batch.len() as f32;
        for g in per_example {
            summed = Some(match summed {
                None => g.scaled(scale),
                Some(acc) => acc.add_scaled(&g, scale),
            });
        }
    }
    let grads = summed.ok_or_else(|| invalid("empty batch"))?;
    optimizer.step(model.params_mut(), &grads);
    Ok(total / batch.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub count: u64,
    pub mean: f64,
    pub last: f64,
}

impl LossStats {
    fn push(&mut self, loss: f64) {
        self.count += 1;
        self.mean += (loss - self.mean) / self.count as f64;
        self.last = loss;
    }
}

/// Everything needed to continue a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub iteration: u64,
    pub optimizer: Optimizer<f32>,
    pub stats: LossStats,
}

/// Model, optimiser and data pipeline of one training run.
pub struct Trainer<'g> {
    pub cfg: TrainConfig,
    pub model: LatentTransformer<f32>,
    pub state: TrainState,
    pub norms: Normalizers,
    sampler: PairSampler<'g>,
    backend: Box<dyn FlowBackend>,
}

impl<'g> Trainer<'g> {
    pub fn new(
        generator: &'g Generator,
        model: LatentTransformer<f32>,
        backend: Box<dyn FlowBackend>,
        norms: Normalizers,
        w_bar: LatentW,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut sampler = PairSampler::new(generator, w_bar, cfg.psi, cfg.phi);
        if cfg.hold_untrained_layers {
            let trainable = &model.config().trainable_layers;
            sampler.hold = (0..generator.num_wplus()).filter(|l| !trainable.contains(l)).collect();
        }
        let optimizer = Optimizer::new(cfg.optimizer, model.params());
        Ok(Self {
            cfg,
            model,
            state: TrainState {
                iteration: 0,
                optimizer,
                stats: LossStats::default(),
            },
            norms,
            sampler,
            backend,
        })
    }

    pub fn sampler(&self) -> &PairSampler<'g> {
        &self.sampler
    }

    pub fn backend(&self) -> &dyn FlowBackend {
        self.backend.as_ref()
    }

    pub fn prepare(&self, index: u64) -> Result<Example> {
        prepare_example(&self.sampler, self.backend.as_ref(), self.norms, &self.cfg, index)
    }

    /// One optimisation step on freshly sampled data (α = 1).
    pub fn step(&mut self) -> Result<f64> {
        let it = self.state.iteration;
        let batch: Vec<Example> = (0..self.cfg.batch_size as u64)
            .map(|b| self.prepare(it * self.cfg.batch_size as u64 + b))
            .collect::<Result<_>>()?;
        let loss = optimize_on(&mut self.model, &mut self.state.optimizer, &batch, it)?;
        self.state.iteration += 1;
        self.state.stats.push(loss);
        Ok(loss)
    }

    fn metadata(&self) -> Value {
        json!({
            "normalizers": self.norms,
            "w_bar": self.sampler.w_bar.0.to_vec(),
            "train": self.cfg,
            "iteration": self.state.iteration,
            "optimizer_steps": self.state.optimizer.steps_taken(),
            "stats": self.state.stats,
            "generator": self.sampler.generator().config(),
        })
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = self.model.to_archive(self.metadata());
        self.state.optimizer.write_state(self.model.params(), &mut a);
        a
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive().save(path)
    }

    /// Restores model, optimiser and counters from a training checkpoint.
    pub fn resume(generator: &'g Generator, backend: Box<dyn FlowBackend>, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let a = Archive::load(path)?;
        let meta = RunMetadata::from_extra(&a.extra).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let model = LatentTransformer::from_archive(&a)?;
        let mut t = Self::new(generator, model, backend, meta.normalizers, meta.w_bar(), meta.train.clone())?;
        t.state.iteration = meta.iteration;
        t.state.stats = meta.stats;
        t.state.optimizer = Optimizer::read_state(t.cfg.optimizer, meta.optimizer_steps, t.model.params(), &a)?;
        Ok(t)
    }
}

/// Training metadata stored in a transformer checkpoint's `extra` field.
#[derive(Debug, Clone, Deserialize)]
pub struct RunMetadata {
    pub normalizers: Normalizers,
    pub w_bar: Vec<f64>,
    pub train: TrainConfig,
    pub iteration: u64,
    pub optimizer_steps: u64,
    #[serde(default)]
    pub stats: LossStats,
}

impl RunMetadata {
    pub fn from_extra(extra: &Value) -> Result<Self> {
        Ok(serde_json::from_value(extra.clone())?)
    }

    pub fn w_bar(&self) -> LatentW {
        LatentW(Array1::from(self.w_bar.clone()))
    }
}

/// Where the generator for a run comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorSource {
    Checkpoint(PathBuf),
    Procedural { config: GeneratorConfig, seed: u64 },
}

impl GeneratorSource {
    pub fn load(&self) -> Result<Generator> {
        match self {
            Self::Checkpoint(p) => Generator::load(p),
            Self::Procedural { config, seed } => Generator::procedural(config.clone(), *seed),
        }
    }
}

/// Width/depth of the transformer; geometry comes from the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelShape {
    pub model_dim: usize,
    pub token_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub feed_forward_dim: usize,
    pub trainable_layers: Vec<usize>,
    pub use_style_features: bool,
    pub use_position_embeddings: bool,
    pub null_memory: bool,
    pub init_seed: u64,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            model_dim: 512,
            token_dim: 256,
            heads: 8,
            layers: 6,
            feed_forward_dim: 2048,
            trainable_layers: (0..6).collect(),
            use_style_features: true,
            use_position_embeddings: true,
            null_memory: true,
            init_seed: 0,
        }
    }
}

impl ModelShape {
    pub fn config_for(&self, generator: &Generator) -> Result<TransformerConfig> {
        let features = generator.extract_feature_map(&LatentSeq::broadcast(
            &LatentW(Array1::zeros(generator.latent_dim())),
            generator.num_wplus(),
        ))?;
        let cfg = TransformerConfig {
            latent_dim: generator.latent_dim(),
            num_wplus: generator.num_wplus(),
            image_resolution: generator.resolution(),
            feature_channels: features.channels(),
            model_dim: self.model_dim,
            token_dim: self.token_dim,
            heads: self.heads,
            layers: self.layers,
            feed_forward_dim: self.feed_forward_dim,
            trainable_layers: self.trainable_layers.clone(),
            use_style_features: self.use_style_features,
            use_position_embeddings: self.use_position_embeddings,
            null_memory: self.null_memory,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Contents of a `train --config` file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub generator: GeneratorSource,
    #[serde(default)]
    pub model: ModelShape,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub flow: BlockMatching,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Serialize)]
struct LossRecord {
    iteration: u64,
    loss: f64,
    wall_time: f64,
}

/// Calibrates, trains and checkpoints according to `run`. Returns the path of
/// the final checkpoint.
pub fn train(run: &RunConfig) -> Result<PathBuf> {
    run.train.validate()?;
    let generator = run.generator.load()?;
    fs::create_dir_all(&run.output_dir)?;
    // Serving and evaluation load these instead of the run's generator source.
    generator.save(run.output_dir.join("generator.ckpt"))?;
    fs::write(run.output_dir.join("run.json"), serde_json::to_string_pretty(run)?)?;
    let model_cfg = run.model.config_for(&generator)?;
    let model = LatentTransformer::new(model_cfg, run.model.init_seed)?;
    let w_bar = generator.average_latent(run.train.average_latent_samples.max(1), mix(run.train.seed, 1, 0))?;
    let sampler = PairSampler::new(&generator, w_bar.clone(), run.train.psi, run.train.phi);
    let norms = crate::flow::calibrate(&sampler, &run.flow, run.train.calibration_pairs, mix(run.train.seed, 2, 0))?;
    tracing::info!(sigma_f = norms.sigma_f, sigma_e = norms.sigma_e, "calibrated flow normalisers");
    let mut trainer = Trainer::new(&generator, model, Box::new(run.flow.clone()), norms, w_bar, run.train.clone())?;
    let log = run.output_dir.join("loss.jsonl");
    fs::write(&log, b"")?;
    run_loop(&mut trainer, &run.output_dir)
}

/// Continues a run from `checkpoint` until the configured iteration count.
pub fn resume(run: &RunConfig, checkpoint: impl AsRef<Path>) -> Result<PathBuf> {
    let generator = run.generator.load()?;
    fs::create_dir_all(&run.output_dir)?;
    let mut trainer = Trainer::resume(&generator, Box::new(run.flow.clone()), checkpoint)?;
    trainer.cfg.iterations = run.train.iterations;
    run_loop(&mut trainer, &run.output_dir)
}

fn run_loop(trainer: &mut Trainer<'_>, out_dir: &Path) -> Result<PathBuf> {
    let start = Instant::now();
    let mut log = OpenOptions::new().create(true).append(true).open(out_dir.join("loss.jsonl"))?;
    if trainer.cfg.iterations == 0 {
        return finish(trainer, out_dir);
    }
    while trainer.state.iteration < trainer.cfg.iterations {
        let loss = trainer.step()?;
        let rec = LossRecord {
            iteration: trainer.state.iteration,
            loss,
            wall_time: start.elapsed().as_secs_f64(),
        };
        writeln!(log, "{}", serde_json::to_string(&rec)?)?;
        if trainer.state.iteration.is_multiple_of(trainer.cfg.checkpoint_every) {
            let p = out_dir.join(format!("checkpoint_{:06}.ckpt", trainer.state.iteration));
            trainer.save(&p)?;
            tracing::info!(iteration = trainer.state.iteration, mean_loss = trainer.state.stats.mean, "checkpoint {}", p.display());
        }
    }
    finish(trainer, out_dir)
}

fn finish(trainer: &Trainer<'_>, out_dir: &Path) -> Result<PathBuf> {
    let p = out_dir.join("final.ckpt");
    trainer.save(&p)?;
    Ok(p)
}

/// Optimiser family from a CLI-style name.
pub fn parse_optimizer(name: &str, lr: f64) -> Result<OptimizerConfig> {
    match name {
        "ranger" => Ok(OptimizerConfig::ranger(lr)),
        "adam" => Ok(OptimizerConfig::adam(lr)),
        other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
    }
}

impl OptimizerKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Ranger => "ranger",
            Self::Adam => "adam",
        }
    }
}
