//! Meta-testing, generalization sweeps, association export and streaming
//! cost accounting.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::episodes::{
    angle_of, assemble_sequence, inject_noise, query_token, rotation_error, stream_tokens, Episode, EpisodeKind,
    EpisodeSpec, QueryTarget, SamplePool,
};
use crate::error::{Error, Result};
use crate::models::{Family, Model, ModelConfig, StreamingState, Token};
use crate::rng::derive_seed;
use crate::selectivity::extract_association;

/// Stream samples perturbed per episode in the noise study.
pub const NOISE_SAMPLES: usize = 5;

/// Default meta-test queries per class.
pub const EVAL_TESTS_PER_CLASS: usize = 5;

/// Per-episode score: accuracy for classification, `1 − cos` for rotation,
/// mean squared error otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Accuracy,
    Mse,
    RotationError,
}

impl Metric {
    pub fn for_kind(kind: EpisodeKind) -> Self {
        match kind {
            EpisodeKind::Classification => Metric::Accuracy,
            EpisodeKind::Rotation => Metric::RotationError,
            EpisodeKind::Sine | EpisodeKind::Completion => Metric::Mse,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Mse => "mse",
            Metric::RotationError => "rotation_error",
        }
    }
}

/// One evaluated configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSetting {
    /// Free-form label written to the `setting` column.
    pub label: String,
    pub episode: EpisodeSpec,
    pub sigma: f64,
}

impl EvalSetting {
    pub fn new(label: &str, episode: EpisodeSpec) -> Self {
        Self {
            label: label.to_string(),
            episode,
            sigma: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub index: usize,
    pub metric: f64,
    pub num_queries: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub setting: EvalSetting,
    pub family: Family,
    pub metric: Metric,
    pub num_episodes: usize,
    pub mean: f64,
    /// Population standard deviation of the per-episode means.
    pub std: f64,
    pub episodes: Vec<EpisodeRecord>,
}

pub const REPORT_HEADER: &str = "setting,K,S,sigma,episodes,metric_mean,metric_std";

impl EvalReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.setting.label,
            self.setting.episode.tasks,
            self.setting.episode.shots,
            self.setting.sigma,
            self.num_episodes,
            self.mean,
            self.std
        )
    }
}

/// Writes reports as a CSV with the standard header.
pub fn write_reports(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

/// Evaluation knobs shared by every setting of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    pub num_episodes: usize,
    pub seed: u64,
    pub threads: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            num_episodes: 200,
            seed: 0,
            threads: 1,
        }
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn score_query(metric: Metric, output: &[f64], target: &QueryTarget) -> Result<f64> {
    match (metric, target) {
        (Metric::Accuracy, QueryTarget::Code(c)) => Ok(f64::from(u8::from(argmax(output) == *c))),
        (Metric::Mse, QueryTarget::Value(y)) if y.len() == output.len() => {
            Ok(output.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
        }
        (Metric::RotationError, QueryTarget::Value(y)) if y.len() == 2 && output.len() == 2 => {
            Ok(rotation_error(angle_of(output), angle_of(y)))
        }
        _ => Err(Error::Contract(format!(
            "model output of width {} cannot be scored as {}",
            output.len(),
            metric.as_str()
        ))),
    }
}

/// Streams the training part once, then scores every test query from a copy
/// of the resulting state. Returns one score per query.
pub fn score_episode(model: &Model, episode: &Episode) -> Result<Vec<f64>> {
    let metric = Metric::for_kind(episode.kind);
    let mut state: StreamingState = model.new_state();
    for t in stream_tokens(episode)? {
        model.step(&mut state, &t)?;
    }
    (0..episode.tests.len())
        .map(|q| {
            let (token, target) = query_token(episode, q)?;
            let mut snapshot = state.clone();
            let out = model.step(&mut snapshot, &token)?;
            score_query(metric, &out, &target)
        })
        .collect()
}

fn check_compatible(model: &Model, spec: &EpisodeSpec) -> Result<()> {
    let cfg = model.config();
    match (spec.kind.is_regression(), cfg.target_dim) {
        (false, Some(_)) => Err(Error::Config("a regression model cannot be evaluated on classification".into())),
        (true, None) => Err(Error::Config(format!("{} episodes need a regression model", spec.kind))),
        _ => Ok(()),
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn run_parallel<T: Send>(threads: usize, n: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    if threads <= 1 {
        return (0..n).map(f).collect();
    }
    let tp = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker threads: {e}")))?;
    tp.install(|| (0..n).into_par_iter().map(f).collect())
}

/// Draws episode `index` of a run. The episode and noise streams depend only
/// on `(seed, index)`, so settings that differ only in σ see the same episodes.
pub fn eval_episode(
    setting: &EvalSetting,
    pool: Option<&SamplePool>,
    vocab_size: usize,
    seed: u64,
    index: usize,
) -> Result<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[index as u64, 0]));
    let ep = setting.episode.sample(pool, vocab_size, &mut rng)?;
    if setting.sigma == 0.0 {
        return Ok(ep);
    }
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[index as u64, 1]));
    let count = NOISE_SAMPLES.min(ep.stream.len());
    inject_noise(&ep, setting.sigma, count, &mut noise_rng)
}

/// Evaluates `opts.num_episodes` fresh episodes under `setting`.
pub fn meta_test(model: &Model, pool: Option<&SamplePool>, setting: &EvalSetting, opts: &EvalOptions) -> Result<EvalReport> {
    check_compatible(model, &setting.episode)?;
    let vocab = model.config().vocab_size;
    let per_episode = run_parallel(opts.threads, opts.num_episodes, |i| {
        let ep = eval_episode(setting, pool, vocab, opts.seed, i)?;
        let scores = score_episode(model, &ep)?;
        let (m, _) = mean_std(&scores);
        Ok(EpisodeRecord {
            index: i,
            metric: m,
            num_queries: scores.len(),
        })
    })?;
    let (mean, std) = mean_std(&per_episode.iter().map(|r| r.metric).collect::<Vec<_>>());
    log::info!(
        "{} K={} S={} sigma={}: {} {mean:.4} ± {std:.4}",
        setting.label,
        setting.episode.tasks,
        setting.episode.shots,
        setting.sigma,
        Metric::for_kind(setting.episode.kind).as_str()
    );
    Ok(EvalReport {
        setting: setting.clone(),
        family: model.family(),
        metric: Metric::for_kind(setting.episode.kind),
        num_episodes: opts.num_episodes,
        mean,
        std,
        episodes: per_episode,
    })
}

/// One report per task count at the base shot count.
pub fn sweep_tasks(
    model: &Model,
    pool: Option<&SamplePool>,
    base: &EvalSetting,
    task_counts: &[usize],
    opts: &EvalOptions,
) -> Result<Vec<EvalReport>> {
    task_counts
        .iter()
        .map(|&k| {
            let mut s = base.clone();
            s.label = "tasks".into();
            s.episode.tasks = k;
            meta_test(model, pool, &s, opts)
        })
        .collect()
}

/// One report per shot count at the base task count.
pub fn sweep_shots(
    model: &Model,
    pool: Option<&SamplePool>,
    base: &EvalSetting,
    shot_counts: &[usize],
    opts: &EvalOptions,
) -> Result<Vec<EvalReport>> {
    shot_counts
        .iter()
        .map(|&s_| {
            let mut s = base.clone();
            s.label = "shots".into();
            s.episode.shots = s_;
            meta_test(model, pool, &s, opts)
        })
        .collect()
}

/// One report per noise level, perturbing [`NOISE_SAMPLES`] stream samples
/// of each episode.
pub fn sweep_noise(
    model: &Model,
    pool: Option<&SamplePool>,
    base: &EvalSetting,
    sigmas: &[f64],
    opts: &EvalOptions,
) -> Result<Vec<EvalReport>> {
    sigmas
        .iter()
        .map(|&sigma| {
            let mut s = base.clone();
            s.label = "noise".into();
            s.sigma = sigma;
            meta_test(model, pool, &s, opts)
        })
        .collect()
}

/// Raw final-layer association scores of every test query against the
/// `2·K·S` stream tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct AssociationMatrix {
    /// One row per test query, `2·K·S` columns.
    pub rows: Vec<Vec<f64>>,
    pub query_tasks: Vec<usize>,
    /// `(task, shot, kind)` of every stream column.
    pub columns: Vec<(usize, usize, &'static str)>,
}

pub fn association_matrix(model: &Model, episode: &Episode) -> Result<AssociationMatrix> {
    let last = model.config().num_layers - 1;
    let mut rows = Vec::with_capacity(episode.tests.len());
    for q in 0..episode.tests.len() {
        let layout = assemble_sequence(episode, q)?;
        let run = model.run_with(&layout.tokens, true)?;
        let scores = extract_association(run.log.as_ref(), last, layout.query_positions[0])?;
        rows.push(scores.scores);
    }
    let mut seen = std::collections::BTreeMap::<usize, usize>::new();
    let mut columns = Vec::with_capacity(2 * episode.stream.len());
    for s in &episode.stream {
        let shot = seen.entry(s.task).or_default();
        columns.push((s.task, *shot, "x"));
        columns.push((s.task, *shot, "y"));
        *shot += 1;
    }
    Ok(AssociationMatrix {
        rows,
        query_tasks: episode.tests.iter().map(|t| t.task).collect(),
        columns,
    })
}

/// Writes `m` to `out_path` and its column sidecar next to it
/// (`<stem>.positions.csv`).
pub fn write_association_csv(m: &AssociationMatrix, out_path: &Path) -> Result<()> {
    let mut body = String::from("query,task");
    for j in 0..m.columns.len() {
        body.push_str(&format!(",t{j}"));
    }
    body.push('\n');
    for (q, (row, task)) in m.rows.iter().zip(&m.query_tasks).enumerate() {
        body.push_str(&format!("{q},{task}"));
        for v in row {
            body.push_str(&format!(",{v}"));
        }
        body.push('\n');
    }
    let mut side = String::from("position,task,shot,kind\n");
    for (j, (task, shot, kind)) in m.columns.iter().enumerate() {
        side.push_str(&format!("{j},{task},{shot},{kind}\n"));
    }
    fs::write(out_path, body)?;
    let mut f = fs::File::create(sidecar_path(out_path))?;
    f.write_all(side.as_bytes())?;
    Ok(())
}

/// [`association_matrix`] followed by [`write_association_csv`].
pub fn export_association_matrix(model: &Model, episode: &Episode, out_path: &Path) -> Result<AssociationMatrix> {
    let m = association_matrix(model, episode)?;
    write_association_csv(&m, out_path)?;
    Ok(m)
}

pub fn sidecar_path(matrix_path: &Path) -> std::path::PathBuf {
    let stem = matrix_path.file_stem().and_then(|s| s.to_str()).unwrap_or("assoc");
    matrix_path.with_file_name(format!("{stem}.positions.csv"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub family: Family,
    pub sequence_lengths: Vec<usize>,
    pub state_bytes: Vec<usize>,
    pub token_step_flops: Vec<u64>,
    pub params_count: usize,
}

pub const COST_HEADER: &str = "family,length,state_bytes,token_step_flops,params";

impl CostReport {
    pub fn csv_rows(&self) -> Vec<String> {
        self.sequence_lengths
            .iter()
            .zip(&self.state_bytes)
            .zip(&self.token_step_flops)
            .map(|((l, b), f)| format!("{},{l},{b},{f},{}", self.family, self.params_count))
            .collect()
    }
}

/// Streams `length` alternating x/y tokens through a freshly initialized
/// model per length and records the serialized state size and the
/// multiply-adds of the last step.
pub fn measure_costs(config: &ModelConfig, sequence_lengths: &[usize]) -> Result<CostReport> {
    if sequence_lengths.contains(&0) {
        return Err(Error::Contract("sequence lengths must be at least 1".into()));
    }
    let model = Model::new(config.clone(), 0)?;
    let x = Token::Input(vec![0.5; config.input_dim]);
    let y = match config.target_dim {
        Some(d) => Token::Target(vec![0.5; d]),
        None => Token::Code(1),
    };
    let mut state_bytes = Vec::with_capacity(sequence_lengths.len());
    let mut flops = Vec::with_capacity(sequence_lengths.len());
    for &len in sequence_lengths {
        let mut state = model.new_state();
        for i in 0..len {
            model.step(&mut state, if i % 2 == 0 { &x } else { &y })?;
        }
        state_bytes.push(state.byte_size());
        flops.push(model.token_step_flops(len - 1));
    }
    Ok(CostReport {
        family: config.family,
        sequence_lengths: sequence_lengths.to_vec(),
        state_bytes,
        token_step_flops: flops,
        params_count: model.params().num_scalars(),
    })
}
