//! Meta-training: episodic next-token objective plus λ-weighted
//! selectivity regularization, Adam with step decay, checkpoints.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::episodes::{assemble_sequence, EpisodeSpec, QueryTarget, SamplePool, SequenceLayout};
use crate::error::{Error, Result};
use crate::models::model::OPTIMIZER_TENSOR_PREFIX;
use crate::models::{Checkpoint, Family, Model, ModelConfig};
use crate::optim::{adam_step, clip_global_norm, AdamState};
use crate::rng::rng_for;
use crate::selectivity::{selectivity_loss_on_tape, SelectivityConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub episode: EpisodeSpec,
    pub batch_size: usize,
    pub max_steps: usize,
    pub base_lr: f64,
    pub lr_decay_rate: f64,
    pub lr_decay_step: usize,
    pub lambda_slct: f64,
    /// Global-norm clip threshold.
    pub clip_norm: f64,
    /// Clip even when the selectivity term is active (λ > 0).
    pub clip_with_selectivity: bool,
    pub selectivity: SelectivityConfig,
    pub seed: u64,
    /// Evaluation cadence in steps for observers; 0 disables.
    pub eval_every: usize,
    /// Checkpoint cadence in steps; 0 disables.
    pub checkpoint_every: usize,
    /// Worker threads for per-episode passes.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            episode: EpisodeSpec::classification(20, 5, 1),
            batch_size: 16,
            max_steps: 50_000,
            base_lr: 1e-4,
            lr_decay_rate: 0.5,
            lr_decay_step: 10_000,
            lambda_slct: 0.5,
            clip_norm: 1.0,
            clip_with_selectivity: false,
            selectivity: SelectivityConfig::default(),
            seed: 0,
            eval_every: 0,
            checkpoint_every: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    /// Toy classification run: K=5, S=2, 2000 steps over the desk-scale model,
    /// halving the learning rate once halfway through.
    pub fn toy(family: Family) -> Self {
        Self {
            model: ModelConfig::toy(family),
            episode: EpisodeSpec::classification(5, 2, 1),
            max_steps: 2000,
            base_lr: match family {
                Family::Mamba => 3e-3,
                _ => 5e-3,
            },
            lr_decay_step: 1000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 || self.lr_decay_step == 0 || self.threads == 0 {
            return Err(Error::Config("batch_size, lr_decay_step and threads must be at least 1".into()));
        }
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("lr_decay_rate", self.lr_decay_rate),
            ("clip_norm", self.clip_norm),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.lambda_slct >= 0.0) || !self.lambda_slct.is_finite() {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda_slct)));
        }
        if self.episode.tests_per_class == 0 {
            return Err(Error::Config("training episodes need at least one test item".into()));
        }
        Ok(())
    }

    fn clips(&self) -> bool {
        self.lambda_slct == 0.0 || self.clip_with_selectivity
    }
}

/// `base_lr · rate^⌊step / decay_step⌋`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    cfg.base_lr * cfg.lr_decay_rate.powi((step / cfg.lr_decay_step) as i32)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeLoss {
    pub task: f64,
    /// Unweighted selectivity term (0 when nothing was scored).
    pub slct: f64,
    /// `task + λ · slct`.
    pub combined: f64,
}

struct TapedLoss {
    combined: Var,
    loss: EpisodeLoss,
}

fn taped_loss(
    tape: &mut Tape,
    model: &Model,
    params: &[Var],
    layout: &SequenceLayout,
    lambda: f64,
    selectivity: &SelectivityConfig,
) -> Result<TapedLoss> {
    let fwd = model.forward(tape, params, &layout.tokens, true)?;
    let rows: Vec<Var> = layout
        .query_positions
        .iter()
        .map(|&p| tape.slice_rows(fwd.output, p, 1))
        .collect::<Result<_>>()?;
    let out = if rows.len() == 1 { rows[0] } else { tape.concat_rows(&rows)? };
    let task = match &layout.targets[..] {
        [QueryTarget::Code(_), ..] => {
            let codes = layout
                .targets
                .iter()
                .map(|t| match t {
                    QueryTarget::Code(c) => Ok(*c),
                    QueryTarget::Value(_) => Err(Error::Contract("mixed query targets".into())),
                })
                .collect::<Result<Vec<_>>>()?;
            tape.cross_entropy(out, &codes)?
        }
        [QueryTarget::Value(_), ..] => {
            let rows = layout
                .targets
                .iter()
                .map(|t| match t {
                    QueryTarget::Value(v) => Ok(v.clone()),
                    QueryTarget::Code(_) => Err(Error::Contract("mixed query targets".into())),
                })
                .collect::<Result<Vec<_>>>()?;
            tape.mse(out, &Tensor::from_rows(&rows)?)?
        }
        [] => return Err(Error::Contract("layout has no scored queries".into())),
    };
    let assoc = fwd.associations.as_deref().unwrap_or_default();
    let slct = selectivity_loss_on_tape(tape, layout, assoc, selectivity)?;
    let task_v = tape.value(task).item();
    let slct_v = slct.map_or(0.0, |s| tape.value(s).item());
    let combined = match slct {
        Some(s) if lambda > 0.0 => {
            let w = tape.scale(s, lambda);
            tape.add(task, w)?
        }
        _ => task,
    };
    Ok(TapedLoss {
        combined,
        loss: EpisodeLoss {
            task: task_v,
            slct: slct_v,
            combined: tape.value(combined).item(),
        },
    })
}

/// Task and selectivity losses of one layout, without gradients.
pub fn episode_loss(
    model: &Model,
    layout: &SequenceLayout,
    lambda: f64,
    selectivity: &SelectivityConfig,
) -> Result<EpisodeLoss> {
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape, false);
    Ok(taped_loss(&mut tape, model, &p, layout, lambda, selectivity)?.loss)
}

/// Loss and gradients for every parameter listed in `trainable`.
pub fn episode_gradients(
    model: &Model,
    trainable: &[usize],
    layout: &SequenceLayout,
    lambda: f64,
    selectivity: &SelectivityConfig,
) -> Result<(Vec<Tensor>, EpisodeLoss)> {
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape, true);
    let t = taped_loss(&mut tape, model, &p, layout, lambda, selectivity)?;
    let mut grads = tape.backward(t.combined)?;
    let g = trainable
        .iter()
        .map(|&i| {
            grads
                .take(p[i])
                .unwrap_or_else(|| Tensor::zeros(model.params().get(i).shape()))
        })
        .collect();
    Ok((g, t.loss))
}

/// Training layout for episode `index` of `step`: a fresh episode with one
/// randomly chosen query.
pub fn training_layout(cfg: &TrainConfig, pool: Option<&SamplePool>, step: usize, index: usize) -> Result<SequenceLayout> {
    let mut rng = rng_for(cfg.seed, &[step as u64, index as u64]);
    let ep = cfg.episode.sample(pool, cfg.model.vocab_size, &mut rng)?;
    let q = rng.random_range(0..ep.tests.len());
    assemble_sequence(&ep, q)
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: usize,
    pub model: Model,
    pub adam: AdamState,
    pub task_loss_avg: f64,
    pub slct_loss_avg: f64,
}

const RUNNING_AVG_DECAY: f64 = 0.95;

fn trainable_indices(model: &Model) -> Vec<usize> {
    (0..model.params().len())
        .filter(|&i| model.params().param(i).trainable)
        .collect()
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model.clone(), cfg.seed)?;
        let sizes: Vec<usize> = trainable_indices(&model)
            .iter()
            .map(|&i| model.params().get(i).numel())
            .collect();
        Ok(Self {
            step: 0,
            model,
            adam: AdamState::new(&sizes),
            task_loss_avg: 0.0,
            slct_loss_avg: 0.0,
        })
    }

    /// Model checkpoint plus optimizer moments and training counters.
    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let mut ck = self.model.to_checkpoint();
        let m = &mut ck.meta;
        m.insert("train.step".into(), self.step.to_string());
        m.insert("train.seed".into(), cfg.seed.to_string());
        m.insert("train.batch_size".into(), cfg.batch_size.to_string());
        m.insert("train.adam_steps".into(), self.adam.step_count.to_string());
        m.insert("train.task_loss_avg".into(), self.task_loss_avg.to_string());
        m.insert("train.slct_loss_avg".into(), self.slct_loss_avg.to_string());
        for (k, &i) in trainable_indices(&self.model).iter().enumerate() {
            let p = self.model.params().param(i);
            let shape = p.value.shape().to_vec();
            let moment = |v: &Vec<f64>| Tensor::new(shape.clone(), v.clone()).expect("moment matches parameter");
            ck.tensors
                .push((format!("{OPTIMIZER_TENSOR_PREFIX}m.{}", p.name), moment(&self.adam.first_moment[k])));
            ck.tensors
                .push((format!("{OPTIMIZER_TENSOR_PREFIX}v.{}", p.name), moment(&self.adam.second_moment[k])));
        }
        ck
    }

    /// Restores a training state, rejecting checkpoints whose model or
    /// run settings differ from `cfg`.
    pub fn from_checkpoint(ck: &Checkpoint, cfg: &TrainConfig) -> Result<Self> {
        let mismatch = |msg: String| Error::format(8, msg);
        let model = Model::from_checkpoint(ck)?;
        if model.config() != &cfg.model {
            let ours = cfg.model.to_kv();
            let key = model
                .config()
                .to_kv()
                .into_iter()
                .find(|(k, v)| ours.get(k) != Some(v))
                .map_or_else(|| "?".to_string(), |(k, _)| k);
            return Err(mismatch(format!("checkpoint model configuration differs at '{key}'")));
        }
        let meta = |k: &str| {
            ck.meta
                .get(k)
                .ok_or_else(|| mismatch(format!("checkpoint lacks '{k}'")))
        };
        let num = |k: &str| -> Result<u64> {
            meta(k)?
                .parse()
                .map_err(|_| mismatch(format!("checkpoint key '{k}' is not an integer")))
        };
        let float = |k: &str| -> Result<f64> {
            meta(k)?
                .parse()
                .map_err(|_| mismatch(format!("checkpoint key '{k}' is not a number")))
        };
        if num("train.seed")? != cfg.seed || num("train.batch_size")? != cfg.batch_size as u64 {
            return Err(mismatch("checkpoint seed or batch size differs from the run".into()));
        }
        let idx = trainable_indices(&model);
        let sizes: Vec<usize> = idx.iter().map(|&i| model.params().get(i).numel()).collect();
        let mut adam = AdamState::new(&sizes);
        adam.step_count = num("train.adam_steps")?;
        for (k, &i) in idx.iter().enumerate() {
            let name = &model.params().param(i).name;
            for (which, dst) in [("m", &mut adam.first_moment[k]), ("v", &mut adam.second_moment[k])] {
                let key = format!("{OPTIMIZER_TENSOR_PREFIX}{which}.{name}");
                let t = ck
                    .tensors
                    .iter()
                    .find(|(n, _)| *n == key)
                    .ok_or_else(|| mismatch(format!("checkpoint lacks optimizer tensor '{key}'")))?;
                if t.1.numel() != dst.len() {
                    return Err(mismatch(format!("optimizer tensor '{key}' has the wrong size")));
                }
                dst.copy_from_slice(t.1.data());
            }
        }
        Ok(Self {
            step: num("train.step")? as usize,
            model,
            adam,
            task_loss_avg: float("train.task_loss_avg")?,
            slct_loss_avg: float("train.slct_loss_avg")?,
        })
    }
}

/// Loads a checkpoint written by [`TrainState::to_checkpoint`].
pub fn resume(path: &Path, cfg: &TrainConfig) -> Result<TrainState> {
    TrainState::from_checkpoint(&Checkpoint::load(path)?, cfg)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub task_loss: f64,
    pub slct_loss: f64,
    pub combined_loss: f64,
}

pub const METRICS_HEADER: &str = "step,lr,task_loss,slct_loss,combined_loss";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.step, self.lr, self.task_loss, self.slct_loss, self.combined_loss
        )
    }
}

/// Called after every optimizer step.
pub trait TrainObserver {
    fn on_step(&mut self, cfg: &TrainConfig, row: &MetricsRow, state: &TrainState) -> Result<()>;
}

/// Appends metrics rows to a CSV file, writing the header once.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
        let mut out = BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?);
        if fresh {
            writeln!(out, "{METRICS_HEADER}")?;
        }
        Ok(Self { out })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.out, "{}", row.to_csv())?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Writes `metrics.csv` and periodic `ckpt-<step>.bin` files into a run
/// directory.
pub struct RunDirObserver {
    dir: PathBuf,
    metrics: MetricsWriter,
}

impl RunDirObserver {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics: MetricsWriter::open(&dir.join("metrics.csv"))?,
        })
    }

    pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
        dir.join(format!("ckpt-{step:07}.bin"))
    }
}

impl TrainObserver for RunDirObserver {
    fn on_step(&mut self, cfg: &TrainConfig, row: &MetricsRow, state: &TrainState) -> Result<()> {
        self.metrics.write(row)?;
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
            self.metrics.flush()?;
            state
                .to_checkpoint(cfg)
                .save(&Self::checkpoint_path(&self.dir, state.step))?;
        }
        if state.step == cfg.max_steps {
            self.metrics.flush()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub state: TrainState,
    pub metrics: Vec<MetricsRow>,
}

/// Fresh training run per `cfg`.
pub fn meta_train(cfg: &TrainConfig, pool: Option<&SamplePool>, observer: Option<&mut dyn TrainObserver>) -> Result<TrainOutput> {
    let state = TrainState::new(cfg)?;
    continue_training(cfg, pool, state, observer)
}

/// Runs optimizer steps from `state.step` up to `cfg.max_steps`.
pub fn continue_training(
    cfg: &TrainConfig,
    pool: Option<&SamplePool>,
    mut state: TrainState,
    mut observer: Option<&mut dyn TrainObserver>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let trainable = trainable_indices(&state.model);
    let workers = if cfg.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.threads)
                .build()
                .map_err(|e| Error::Config(format!("cannot start worker threads: {e}")))?,
        )
    } else {
        None
    };
    let mut metrics = Vec::with_capacity(cfg.max_steps.saturating_sub(state.step));
    while state.step < cfg.max_steps {
        let step = state.step;
        let lr = lr_schedule(step, cfg);
        let model = &state.model;
        let one = |i: usize| -> Result<(Vec<Tensor>, EpisodeLoss)> {
            let layout = training_layout(cfg, pool, step, i)?;
            episode_gradients(model, &trainable, &layout, cfg.lambda_slct, &cfg.selectivity)
        };
        let results: Vec<Result<(Vec<Tensor>, EpisodeLoss)>> = match &workers {
            Some(tp) => tp.install(|| (0..cfg.batch_size).into_par_iter().map(one).collect()),
            None => (0..cfg.batch_size).map(one).collect(),
        };
        // fixed-order reduction keeps runs bit-identical across thread counts
        let mut sum: Option<Vec<Tensor>> = None;
        let (mut task, mut slct, mut combined) = (0.0, 0.0, 0.0);
        for r in results {
            let (g, l) = r?;
            task += l.task;
            slct += l.slct;
            combined += l.combined;
            match &mut sum {
                None => sum = Some(g),
                Some(acc) => {
                    for (a, gi) in acc.iter_mut().zip(&g) {
                        a.add_assign(gi)?;
                    }
                }
            }
        }
        let b = cfg.batch_size as f64;
        let (task, slct, combined) = (task / b, slct / b, combined / b);
        if !combined.is_finite() {
            return Err(Error::Diverged { step, loss: combined });
        }
        let mut grads: Vec<Tensor> = sum
            .unwrap_or_default()
            .into_iter()
            .map(|g| g.scale(1.0 / b))
            .collect();
        if cfg.clips() {
            clip_global_norm(&mut grads, cfg.clip_norm);
        }
        {
            let mut selected: Vec<&mut Tensor> = state
                .model
                .params_mut()
                .values_mut()
                .into_iter()
                .enumerate()
                .filter(|(i, _)| trainable.binary_search(i).is_ok())
                .map(|(_, v)| v)
                .collect();
            adam_step(&mut selected, &grads, &mut state.adam, lr)?;
        }
        if step == 0 {
            state.task_loss_avg = task;
            state.slct_loss_avg = slct;
        } else {
            state.task_loss_avg = RUNNING_AVG_DECAY * state.task_loss_avg + (1.0 - RUNNING_AVG_DECAY) * task;
            state.slct_loss_avg = RUNNING_AVG_DECAY * state.slct_loss_avg + (1.0 - RUNNING_AVG_DECAY) * slct;
        }
        state.step += 1;
        let row = MetricsRow {
            step: state.step,
            lr,
            task_loss: task,
            slct_loss: slct,
            combined_loss: combined,
        };
        if step % 100 == 0 {
            log::debug!("step {} lr {lr:e} task {task:.4} slct {slct:.4}", state.step);
        }
        if let Some(obs) = observer.as_deref_mut() {
            obs.on_step(cfg, &row, &state)?;
        }
        metrics.push(row);
    }
    Ok(TrainOutput { state, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_halves_every_decay_step() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, &cfg), 1e-4);
        assert_eq!(lr_schedule(9_999, &cfg), 1e-4);
        assert_eq!(lr_schedule(10_000, &cfg), 5e-5);
        assert!((lr_schedule(25_000, &cfg) - 2.5e-5).abs() < 1e-20);
        let mut prev = f64::INFINITY;
        for s in (0..60_000).step_by(777) {
            let lr = lr_schedule(s, &cfg);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn invalid_settings_rejected() {
        let cfg = TrainConfig {
            base_lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = TrainConfig {
            lambda_slct: -1.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    fn tiny(family: crate::models::Family) -> (Model, SequenceLayout) {
        use crate::episodes::make_synthetic_pool;
        use rand::SeedableRng;
        let mut cfg = ModelConfig::toy(family);
        cfg.hidden_dim = 8;
        cfg.head_dim = 4;
        cfg.ssm_state_size = 4;
        cfg.dt_rank = 2;
        cfg.ffn_hidden = 8;
        cfg.num_performer_features = 4;
        cfg.vocab_size = 10;
        cfg.input_dim = 4;
        let pool = make_synthetic_pool(4, 4, 4, 0.3, 0, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1)).unwrap();
        let ep = EpisodeSpec::classification(3, 2, 1)
            .sample(Some(&pool), 10, &mut rand_chacha::ChaCha8Rng::seed_from_u64(2))
            .unwrap();
        (Model::new(cfg, 3).unwrap(), assemble_sequence(&ep, 1).unwrap())
    }

    #[test]
    fn episode_gradients_match_finite_differences() {
        use crate::models::Family;
        for family in Family::ALL {
            let (mut model, layout) = tiny(family);
            let sel = SelectivityConfig::default();
            let idx = trainable_indices(&model);
            let (grads, _) = episode_gradients(&model, &idx, &layout, 0.5, &sel).unwrap();
            let mut worst: f64 = 0.0;
            for (k, &i) in idx.iter().enumerate().step_by(3) {
                let j = (7 * k) % model.params().get(i).numel();
                let h = 1e-5;
                let base = model.params().get(i).clone();
                let mut eval = |delta: f64| {
                    let mut t = base.clone();
                    t.data_mut()[j] += delta;
                    model.params_mut().set(i, t).unwrap();
                    episode_loss(&model, &layout, 0.5, &sel).unwrap().combined
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                model.params_mut().set(i, base).unwrap();
                let g = grads[k].data()[j];
                let rel = (fd - g).abs() / (fd.abs() + g.abs()).max(1e-6);
                worst = worst.max(rel);
                assert!(rel < 1e-4, "{family} {}: fd {fd} vs {g}", model.params().param(i).name);
            }
            assert!(worst < 1e-4);
        }
    }

    #[test]
    fn metrics_row_format() {
        let r = MetricsRow {
            step: 3,
            lr: 1e-4,
            task_loss: 1.5,
            slct_loss: 0.25,
            combined_loss: 1.625,
        };
        assert_eq!(r.to_csv(), "3,0.0001,1.5,0.25,1.625");
    }
}
