//! Deterministic masked-image pretraining.
//!
//! One seed drives everything: parameter init draws per-tensor streams from
//! it, and a separate stream of the same seed picks batch samples and mask
//! plans. Per-sample gradients may be computed in parallel; they are always
//! reduced in batch order, so a run is bitwise reproducible.

mod config;
mod optim;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::RunConfig;
pub use optim::{adamw_step, AdamState, AdamW};

use crate::checkpoint::{model_from_checkpoint, Checkpoint, CheckpointKind};
use crate::error::{Error, Result};
use crate::exec::{try_map_ordered, Execution};
use crate::imaging::dataset::{ChannelStats, Dataset, DatasetManifest};
use crate::imaging::MultimodalImage;
use crate::masking::{make_mask_plan, tokenize, TokenGrid};
use crate::model::MimModel;
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "step,loss,lr,seconds";
const DATA_STREAM: u64 = 1;

/// Loads the configured manifest, or builds the synthetic corpus.
pub fn load_dataset(cfg: &RunConfig, exec: Execution) -> Result<Dataset> {
    let (h, w) = (cfg.model.image_height, cfg.model.image_width);
    match &cfg.manifest {
        Some(path) => {
            let manifest = DatasetManifest::load(path)?;
            let base = path.parent().unwrap_or(Path::new("."));
            Dataset::load(&manifest, base, h, w, exec)
        }
        None => {
            let manifest = DatasetManifest::synthetic(cfg.seed, cfg.synthetic_train, cfg.synthetic_test, cfg.modality());
            Dataset::load(&manifest, Path::new("."), h, w, exec)
        }
    }
}

/// A dataset tokenized for one model configuration.
pub struct Corpus {
    dataset: Dataset,
    patch_size: usize,
    stats: Option<ChannelStats>,
    train: Vec<TokenGrid>,
}

impl Corpus {
    /// Tokenizes the training split. An RGB+IR dataset is reduced to RGB when
    /// the model expects three channels.
    pub fn new(dataset: &Dataset, cfg: &RunConfig) -> Result<Self> {
        let want = cfg.model.channels;
        let dataset = match (dataset.modality().channels(), want) {
            (a, b) if a == b => dataset.clone(),
            (4, 3) => dataset.rgb_only(),
            (a, b) => {
                return Err(Error::Data(format!("dataset has {a} channels but the model expects {b}")));
            }
        };
        let first = &dataset.train[0].image;
        if (first.height(), first.width()) != (cfg.model.image_height, cfg.model.image_width) {
            return Err(Error::Data(format!(
                "dataset images are {}x{}, model expects {}x{}",
                first.height(),
                first.width(),
                cfg.model.image_height,
                cfg.model.image_width
            )));
        }
        let stats = if cfg.standardize {
            let imgs: Vec<&MultimodalImage> = dataset.train.iter().map(|s| &s.image).collect();
            Some(ChannelStats::compute(&imgs)?)
        } else {
            None
        };
        let mut corpus = Self {
            dataset,
            patch_size: cfg.model.patch_size,
            stats,
            train: Vec::new(),
        };
        corpus.train = corpus.dataset.train.iter().map(|s| corpus.grid(&s.image)).collect::<Result<_>>()?;
        Ok(corpus)
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn stats(&self) -> Option<&ChannelStats> {
        self.stats.as_ref()
    }

    pub fn train_grids(&self) -> &[TokenGrid] {
        &self.train
    }

    /// Model input for an image: its token grid, standardized if enabled.
    pub fn grid(&self, img: &MultimodalImage) -> Result<TokenGrid> {
        let grid = tokenize(img, self.patch_size)?;
        match &self.stats {
            None => Ok(grid),
            Some(s) => {
                let mut t = grid.tokens().clone();
                s.apply(t.data_mut());
                grid.with_tokens(t)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Format("corrupt RNG state in checkpoint".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    step: u64,
    adam_t: u64,
    rng: RngState,
    run: RunConfig,
}

/// Model, optimizer moments, step counter and data-stream position.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: MimModel,
    pub optimizer: AdamState,
    pub step: u64,
    rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = MimModel::new(&cfg.model, cfg.seed)?;
        let optimizer = AdamState::new(model.parameters().map(|(_, t)| t.shape()));
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(DATA_STREAM);
        Ok(Self {
            model,
            optimizer,
            step: 0,
            rng,
        })
    }

    pub fn to_checkpoint(&self, cfg: &RunConfig) -> Result<Checkpoint> {
        let mut tensors: Vec<(String, Tensor)> = self
            .model
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        for (i, (name, _)) in self.model.parameters().enumerate() {
            tensors.push((format!("opt.m.{name}"), self.optimizer.m[i].clone()));
        }
        for (i, (name, _)) in self.model.parameters().enumerate() {
            tensors.push((format!("opt.v.{name}"), self.optimizer.v[i].clone()));
        }
        let meta = StateMeta {
            step: self.step,
            adam_t: self.optimizer.t,
            rng: RngState::capture(&self.rng),
            run: cfg.clone(),
        };
        Ok(Checkpoint {
            kind: CheckpointKind::TrainState,
            config: self.model.config().clone(),
            meta: serde_json::to_value(meta)?,
            tensors,
        })
    }

    /// Restores a training state and the run configuration it was saved with.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, RunConfig)> {
        if ck.kind != CheckpointKind::TrainState {
            return Err(Error::Format("not a training-state checkpoint".into()));
        }
        let meta: StateMeta = serde_json::from_value(ck.meta.clone())?;
        let model = model_from_checkpoint(ck)?;
        let moments = |prefix: &str| -> Result<Vec<Tensor>> {
            model
                .parameters()
                .map(|(name, p)| {
                    let t = ck
                        .get(&format!("{prefix}{name}"))
                        .ok_or_else(|| Error::Format(format!("missing optimizer tensor {prefix}{name}")))?;
                    if t.shape() != p.shape() {
                        return Err(Error::Format(format!("optimizer tensor {prefix}{name} has the wrong shape")));
                    }
                    Ok(t.clone())
                })
                .collect()
        };
        let optimizer = AdamState {
            m: moments("opt.m.")?,
            v: moments("opt.v.")?,
            t: meta.adam_t,
        };
        let state = Self {
            model,
            optimizer,
            step: meta.step,
            rng: meta.rng.restore()?,
        };
        Ok((state, meta.run))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub seconds: Option<f64>,
}

impl MetricRow {
    pub fn to_csv(&self) -> String {
        let secs = self.seconds.map(|s| format!("{s:.6}")).unwrap_or_default();
        format!("{},{},{},{}", self.step, self.loss, self.lr, secs)
    }
}

pub struct TrainOutput {
    pub state: TrainState,
    pub metrics: Vec<MetricRow>,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join("checkpoints").join(format!("step-{step:06}.imim"))
}

struct Outputs {
    dir: PathBuf,
    metrics: BufWriter<File>,
}

impl Outputs {
    fn open(dir: &Path, fresh: bool) -> Result<Self> {
        fs::create_dir_all(dir.join("checkpoints"))?;
        let path = dir.join("metrics.csv");
        let mut metrics = if fresh || !path.exists() {
            let mut f = BufWriter::new(File::create(&path)?);
            writeln!(f, "{METRICS_HEADER}")?;
            f
        } else {
            BufWriter::new(OpenOptions::new().append(true).open(&path)?)
        };
        metrics.flush()?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics,
        })
    }

    fn row(&mut self, row: &MetricRow) -> Result<()> {
        writeln!(self.metrics, "{}", row.to_csv())?;
        self.metrics.flush()?;
        Ok(())
    }

    fn checkpoint(&self, state: &TrainState, cfg: &RunConfig) -> Result<()> {
        state.to_checkpoint(cfg)?.save(checkpoint_path(&self.dir, state.step))
    }
}

/// Mean loss and mean gradients of one batch, reduced in batch order.
pub fn batch_gradients(model: &MimModel, grids: &[TokenGrid], picks: &[(usize, u64)], ratio: f64, exec: Execution) -> Result<(f64, Vec<Tensor>)> {
    let per_sample = try_map_ordered(exec, picks, |_, &(idx, plan_seed)| {
        let grid = &grids[idx];
        let plan = make_mask_plan(grid.n_tokens(), ratio, plan_seed)?;
        model.loss_and_grads(grid, &plan)
    })?;
    let scale = 1.0 / picks.len() as f64;
    let mut iter = per_sample.into_iter();
    let (mut loss, mut grads) = iter.next().ok_or_else(|| Error::contract("empty batch"))?;
    for (l, g) in iter {
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            acc.add_assign(gi);
        }
    }
    for g in &mut grads {
        g.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    Ok((loss * scale, grads))
}

fn draw_batch(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<(usize, u64)> {
    (0..batch).map(|_| (rng.gen_range(0..n), rng.gen::<u64>())).collect()
}

/// Runs steps until `cfg.steps`, continuing from `state`. With `out_dir`,
/// metrics and checkpoints are written there; the initial state is saved
/// when starting from step 0.
pub fn train(cfg: &RunConfig, corpus: &Corpus, mut state: TrainState, out_dir: Option<&Path>, exec: Execution) -> Result<TrainOutput> {
    cfg.validate()?;
    if state.model.config() != &cfg.model {
        return Err(Error::Config("training state was built for a different model configuration".into()));
    }
    let grids = corpus.train_grids();
    if grids.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    let mut outputs = out_dir.map(|d| Outputs::open(d, state.step == 0)).transpose()?;
    if let Some(o) = &outputs {
        if state.step == 0 {
            o.checkpoint(&state, cfg)?;
        }
    }
    let hp = cfg.optimizer();
    let start = Instant::now();
    let mut metrics = Vec::new();
    while state.step < cfg.steps {
        let picks = draw_batch(&mut state.rng, grids.len(), cfg.batch_size);
        let (loss, grads) = batch_gradients(&state.model, grids, &picks, cfg.mask_ratio, exec)?;
        let step = state.step + 1;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss });
        }
        adamw_step(state.model.parameters_mut(), &grads, &mut state.optimizer, &hp)?;
        state.step = step;
        let row = MetricRow {
            step,
            loss,
            lr: hp.lr,
            seconds: cfg.log_wall_time.then(|| start.elapsed().as_secs_f64()),
        };
        if let Some(o) = &mut outputs {
            o.row(&row)?;
            let periodic = cfg.checkpoint_every > 0 && step.is_multiple_of(cfg.checkpoint_every);
            if periodic || step == cfg.steps {
                o.checkpoint(&state, cfg)?;
            }
        }
        if step.is_multiple_of(100) || step == cfg.steps {
            log::info!("step {step}/{} loss {loss:.6}", cfg.steps);
        }
        metrics.push(row);
    }
    Ok(TrainOutput { state, metrics })
}

/// Fresh run from `cfg`.
pub fn pretrain(cfg: &RunConfig, corpus: &Corpus, out_dir: Option<&Path>, exec: Execution) -> Result<TrainOutput> {
    train(cfg, corpus, TrainState::new(cfg)?, out_dir, exec)
}
