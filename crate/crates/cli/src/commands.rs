use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use mcl_core::episodes::{
    check_disjoint, load_embedding_pool, make_synthetic_pool, write_embedding_pool, EpisodeKind, EpisodeSpec,
    SamplePool, Split, SINE_POINTS,
};
use mcl_core::evaluation::{
    association_matrix, eval_episode, meta_test, sweep_noise, sweep_shots, sweep_tasks, write_association_csv,
    write_reports, EvalOptions, EvalReport, EvalSetting,
};
use mcl_core::models::{Checkpoint, Discretization, Family, Model, ModelConfig, MoeConfig};
use mcl_core::rng::rng_for;
use mcl_core::selectivity::{LayerSelection, PositionSelection, SelectivityConfig};
use mcl_core::training::{
    continue_training, resume, training_layout, MetricsRow, RunDirObserver, TrainConfig, TrainObserver, TrainState,
};
use mcl_core::Error;

use crate::config::{Command, Settings};
use crate::CliError;

pub fn run(s: &Settings) -> Result<(), CliError> {
    match s.command {
        Command::GenPool => gen_pool(s),
        Command::Train => train(s),
        Command::Eval => eval(s),
        Command::Sweep => sweep(s),
        Command::ExportAssoc => export_assoc(s),
    }
}

fn gen_pool(s: &Settings) -> Result<(), CliError> {
    let out = s.path("out")?;
    let mut rng = rng_for(s.get("seed")?, &[]);
    let pool = make_synthetic_pool(
        s.get("classes")?,
        s.get("items")?,
        s.get("dim")?,
        s.get("std")?,
        s.get("first-class")?,
        &mut rng,
    )?;
    write_embedding_pool(&pool, out)?;
    log::info!(
        "wrote {} items of {} classes (dim {}) to {}",
        pool.items.len(),
        pool.num_classes(),
        pool.dim,
        out.display()
    );
    Ok(())
}

fn episode_spec(s: &Settings, tests_per_class: usize) -> Result<EpisodeSpec, CliError> {
    Ok(EpisodeSpec {
        kind: s.get("task-kind")?,
        tasks: s.get("tasks")?,
        shots: s.get("shots")?,
        tests_per_class,
        shuffled: s.flag("shuffled")?,
    })
}

fn load_pool(s: &Settings, key: &str, split: Split, kind: EpisodeKind) -> Result<Option<SamplePool>, CliError> {
    match (s.optional_path(key), kind) {
        (Some(p), _) => {
            if !p.is_file() {
                return Err(CliError::Usage(format!("{key} '{}' does not exist", p.display())));
            }
            Ok(Some(load_embedding_pool(p, split)?))
        }
        (None, EpisodeKind::Sine) => Ok(None),
        (None, _) => Err(CliError::Usage(format!("'{key}' is required for {kind} episodes"))),
    }
}

fn model_config(s: &Settings, spec: &EpisodeSpec, pool_dim: usize) -> Result<ModelConfig, CliError> {
    let family: Family = s.get("family")?;
    let experts: usize = s.get("moe-experts")?;
    let ffn_hidden: usize = s.get("ffn-hidden")?;
    let moe_hidden = match s.raw("moe-hidden") {
        "" => ffn_hidden,
        _ => s.get("moe-hidden")?,
    };
    let cfg = ModelConfig {
        family,
        num_layers: s.get("layers")?,
        hidden_dim: s.get("hidden")?,
        head_dim: s.get("head-dim")?,
        ssm_state_size: s.get("state-size")?,
        conv_width: s.get("conv-width")?,
        expand: s.get("expand")?,
        dt_rank: s.get("dt-rank")?,
        ffn_hidden,
        vocab_size: s.get("vocab")?,
        input_dim: spec.input_dim(pool_dim),
        target_dim: spec.target_dim(pool_dim),
        num_performer_features: s.get("performer-features")?,
        max_positions: s.get("max-positions")?,
        moe: (experts > 0).then_some(MoeConfig {
            num_experts: experts,
            expert_hidden: moe_hidden,
        }),
        discretization: s.get("discretization")?,
        record_associations: false,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn selectivity(s: &Settings) -> Result<SelectivityConfig, CliError> {
    let layers = match s.raw("slct-layers") {
        "final" => LayerSelection::Final,
        "all" => LayerSelection::All,
        other => return Err(CliError::Usage(format!("unknown slct-layers '{other}' (valid: final, all)"))),
    };
    let positions = match s.raw("slct-positions") {
        "queries" => PositionSelection::Queries,
        "stream" => PositionSelection::QueriesAndStream,
        other => {
            return Err(CliError::Usage(format!(
                "unknown slct-positions '{other}' (valid: queries, stream)"
            )))
        }
    };
    Ok(SelectivityConfig { layers, positions })
}

fn write_resolved(dir: &Path, s: &Settings) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("resolved.cfg"), s.to_resolved())?;
    Ok(())
}

pub const FINAL_CHECKPOINT: &str = "ckpt-final.bin";

/// Run-directory observer plus optional periodic meta-testing.
struct TrainRunObserver<'a> {
    run_dir: RunDirObserver,
    progress: Option<(PathBuf, &'a SamplePool, EvalSetting, EvalOptions)>,
    sine_progress: Option<(PathBuf, EvalSetting, EvalOptions)>,
}

impl TrainObserver for TrainRunObserver<'_> {
    fn on_step(&mut self, cfg: &TrainConfig, row: &MetricsRow, state: &TrainState) -> mcl_core::Result<()> {
        self.run_dir.on_step(cfg, row, state)?;
        if cfg.eval_every == 0 || state.step % cfg.eval_every != 0 {
            return Ok(());
        }
        let (path, pool, setting, opts) = match (&self.progress, &self.sine_progress) {
            (Some((p, pool, s, o)), _) => (p, Some(*pool), s, o),
            (None, Some((p, s, o))) => (p, None, s, o),
            (None, None) => return Ok(()),
        };
        let report = meta_test(&state.model, pool, setting, opts)?;
        let fresh = !path.exists();
        let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(f, "step,metric,metric_mean,metric_std")?;
        }
        writeln!(f, "{},{},{},{}", state.step, report.metric.as_str(), report.mean, report.std)?;
        Ok(())
    }
}

fn train(s: &Settings) -> Result<(), CliError> {
    let out = s.path("out")?.to_path_buf();
    let spec = episode_spec(s, 1)?;
    let train_pool = load_pool(s, "train-pool", Split::MetaTrain, spec.kind)?;
    let eval_every: usize = s.get("eval-every")?;
    let test_pool = match s.optional_path("test-pool") {
        Some(_) => load_pool(s, "test-pool", Split::MetaTest, spec.kind)?,
        None => None,
    };
    if let (Some(a), Some(b)) = (&train_pool, &test_pool) {
        check_disjoint(a, b)?;
        if a.dim != b.dim {
            return Err(CliError::Usage(format!("pool widths differ: {} vs {}", a.dim, b.dim)));
        }
    }
    if eval_every > 0 && test_pool.is_none() && spec.kind != EpisodeKind::Sine {
        return Err(CliError::Usage("'eval-every' needs a 'test-pool'".into()));
    }
    let pool_dim = train_pool.as_ref().map_or(SINE_POINTS, |p| p.dim);
    let cfg = TrainConfig {
        model: model_config(s, &spec, pool_dim)?,
        episode: spec,
        batch_size: s.get("batch")?,
        max_steps: s.get("steps")?,
        base_lr: s.get("lr")?,
        lr_decay_rate: s.get("lr-decay-rate")?,
        lr_decay_step: s.get("lr-decay-step")?,
        lambda_slct: s.get("lambda")?,
        clip_norm: s.get("clip")?,
        clip_with_selectivity: s.flag("clip-with-selectivity")?,
        selectivity: selectivity(s)?,
        seed: s.get("seed")?,
        eval_every,
        checkpoint_every: s.get("checkpoint-every")?,
        threads: s.get("threads")?,
    };
    cfg.validate()?;
    // a trial episode surfaces pool shortfalls before anything is written
    training_layout(&cfg, train_pool.as_ref(), 0, 0)?;
    let state = match s.optional_path("resume") {
        Some(p) => resume(p, &cfg)?,
        None => TrainState::new(&cfg)?,
    };
    let eval_setting = EvalSetting::new("progress", EpisodeSpec {
        tests_per_class: s.get("tests-per-class")?,
        ..spec
    });
    let eval_opts = EvalOptions {
        num_episodes: s.get("episodes")?,
        seed: cfg.seed,
        threads: cfg.threads,
    };

    write_resolved(&out, s)?;
    let progress_path = out.join("eval").join("progress.csv");
    if eval_every > 0 {
        fs::create_dir_all(out.join("eval"))?;
    }
    let mut observer = TrainRunObserver {
        run_dir: RunDirObserver::new(&out)?,
        progress: test_pool
            .as_ref()
            .map(|p| (progress_path.clone(), p, eval_setting.clone(), eval_opts)),
        sine_progress: (test_pool.is_none() && spec.kind == EpisodeKind::Sine)
            .then(|| (progress_path.clone(), eval_setting.clone(), eval_opts)),
    };
    log::info!(
        "training {} for {} steps (K={}, S={}, λ={})",
        cfg.model.family,
        cfg.max_steps,
        spec.tasks,
        spec.shots,
        cfg.lambda_slct
    );
    let result = continue_training(&cfg, train_pool.as_ref(), state, Some(&mut observer));
    drop(observer);
    let output = result?;
    let ckpt = out.join(FINAL_CHECKPOINT);
    output.state.to_checkpoint(&cfg).save(&ckpt)?;
    if let Some(last) = output.metrics.last() {
        log::info!(
            "step {}: task {:.4}, selectivity {:.4}",
            last.step,
            last.task_loss,
            last.slct_loss
        );
    }
    log::info!("wrote {}", ckpt.display());
    Ok(())
}

/// Loads the evaluated model and rejects explicit model keys that disagree
/// with the checkpoint.
fn load_model(s: &Settings) -> Result<Model, CliError> {
    let path = s.path("checkpoint")?;
    if !path.is_file() {
        return Err(CliError::Usage(format!("checkpoint '{}' does not exist", path.display())));
    }
    let model = Model::from_checkpoint(&Checkpoint::load(path)?)?;
    let cfg = model.config();
    if s.is_explicit("family") {
        let family: Family = s.get("family")?;
        if family != cfg.family {
            return Err(CliError::Usage(format!(
                "checkpoint '{}' holds a {} model, but family is set to {family}",
                path.display(),
                cfg.family
            )));
        }
    }
    if s.is_explicit("moe-experts") {
        let experts: usize = s.get("moe-experts")?;
        if experts != cfg.moe.map_or(0, |m| m.num_experts) {
            return Err(CliError::Usage(format!(
                "checkpoint '{}' has {} experts, moe-experts is {experts}",
                path.display(),
                cfg.moe.map_or(0, |m| m.num_experts)
            )));
        }
    }
    if s.is_explicit("discretization") {
        let d: Discretization = s.get("discretization")?;
        if d != cfg.discretization {
            return Err(CliError::Usage(format!(
                "checkpoint '{}' uses {} discretization, not {d}",
                path.display(),
                cfg.discretization
            )));
        }
    }
    Ok(model)
}

struct EvalContext {
    model: Model,
    pool: Option<SamplePool>,
    setting: EvalSetting,
    opts: EvalOptions,
    out: PathBuf,
}

fn eval_context(s: &Settings, label: &str) -> Result<EvalContext, CliError> {
    let out = s.path("out")?.to_path_buf();
    let model = load_model(s)?;
    let spec = episode_spec(s, s.get("tests-per-class")?)?;
    let pool = load_pool(s, "test-pool", Split::MetaTest, spec.kind)?;
    let pool_dim = pool.as_ref().map_or(SINE_POINTS, |p| p.dim);
    let cfg = model.config();
    if spec.input_dim(pool_dim) != cfg.input_dim || spec.target_dim(pool_dim) != cfg.target_dim {
        return Err(CliError::Usage(format!(
            "{} episodes on a width-{pool_dim} pool do not fit the checkpoint's input width {}",
            spec.kind, cfg.input_dim
        )));
    }
    let opts = EvalOptions {
        num_episodes: if s.applies("episodes") { s.get("episodes")? } else { 1 },
        seed: s.get("seed")?,
        threads: s.get("threads")?,
    };
    if opts.num_episodes == 0 {
        return Err(CliError::Usage("'episodes' must be at least 1".into()));
    }
    Ok(EvalContext {
        model,
        pool,
        setting: EvalSetting::new(label, spec),
        opts,
        out,
    })
}

fn finish_reports(s: &Settings, ctx: &EvalContext, name: &str, reports: &[EvalReport]) -> Result<(), CliError> {
    write_resolved(&ctx.out, s)?;
    let dir = ctx.out.join("eval");
    fs::create_dir_all(&dir)?;
    let path = dir.join(name);
    write_reports(&path, reports)?;
    for r in reports {
        println!("{}", r.csv_row());
    }
    log::info!("wrote {}", path.display());
    Ok(())
}

fn eval(s: &Settings) -> Result<(), CliError> {
    let mut ctx = eval_context(s, "base")?;
    ctx.setting.sigma = s.get("sigma")?;
    if !(ctx.setting.sigma >= 0.0) {
        return Err(CliError::Usage("'sigma' must be non-negative".into()));
    }
    // cheap check of the first episode before the full run
    eval_episode(&ctx.setting, ctx.pool.as_ref(), ctx.model.config().vocab_size, ctx.opts.seed, 0)?;
    let report = meta_test(&ctx.model, ctx.pool.as_ref(), &ctx.setting, &ctx.opts)?;
    finish_reports(s, &ctx, "eval.csv", &[report])
}

fn sweep(s: &Settings) -> Result<(), CliError> {
    let ctx = eval_context(s, "sweep")?;
    let pool = ctx.pool.as_ref();
    let axis = s.raw("axis");
    let reports = match axis {
        "tasks" | "shots" => {
            let values: Vec<usize> = s.list("values")?;
            if values.contains(&0) {
                return Err(CliError::Usage("sweep values must be at least 1".into()));
            }
            let vocab = ctx.model.config().vocab_size;
            for &v in &values {
                let mut probe = ctx.setting.clone();
                if axis == "tasks" {
                    probe.episode.tasks = v;
                } else {
                    probe.episode.shots = v;
                }
                eval_episode(&probe, pool, vocab, ctx.opts.seed, 0)?;
            }
            if axis == "tasks" {
                sweep_tasks(&ctx.model, pool, &ctx.setting, &values, &ctx.opts)?
            } else {
                sweep_shots(&ctx.model, pool, &ctx.setting, &values, &ctx.opts)?
            }
        }
        "noise" => {
            let values: Vec<f64> = s.list("values")?;
            if values.iter().any(|v| !(*v >= 0.0)) {
                return Err(CliError::Usage("noise levels must be non-negative".into()));
            }
            sweep_noise(&ctx.model, pool, &ctx.setting, &values, &ctx.opts)?
        }
        "" => return Err(CliError::Usage("'axis' is required (tasks, shots or noise)".into())),
        other => return Err(CliError::Usage(format!("unknown axis '{other}' (valid: tasks, shots, noise)"))),
    };
    finish_reports(s, &ctx, &format!("sweep-{axis}.csv"), &reports)
}

fn export_assoc(s: &Settings) -> Result<(), CliError> {
    let ctx = eval_context(s, "assoc")?;
    let index: usize = s.get("episode-index")?;
    let episode = eval_episode(
        &ctx.setting,
        ctx.pool.as_ref(),
        ctx.model.config().vocab_size,
        ctx.opts.seed,
        index,
    )?;
    let dir = ctx.out.join("assoc");
    let path = dir.join(format!("assoc-{index}.csv"));
    // compute before touching the filesystem
    let m = association_matrix(&ctx.model, &episode)?;
    write_resolved(&ctx.out, s)?;
    fs::create_dir_all(&dir)?;
    write_association_csv(&m, &path)?;
    log::info!(
        "wrote {} ({} queries × {} positions)",
        path.display(),
        m.rows.len(),
        m.columns.len()
    );
    Ok(())
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => CliError::Usage(msg),
            other => CliError::Core(other),
        }
    }
}
