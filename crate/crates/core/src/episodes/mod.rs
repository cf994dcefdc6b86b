//! Continual-learning episodes and their token layout.

mod classification;
mod layout;
mod pool;
mod regression;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};

pub use classification::{make_classification_episode, shuffle_stream};
pub use layout::{assemble_sequence, query_token, stream_tokens, QueryTarget, SequenceLayout};
pub use pool::{
    check_disjoint, load_embedding_pool, make_synthetic_pool, pool_from_bytes, pool_to_bytes, write_embedding_pool,
    PoolItem, PoolSource, SamplePool, Split, POOL_MAGIC,
};
pub use regression::{
    angle_of, completion_pair, make_completion_episode, make_rotation_episode, make_sine_episode, rotate_pairs,
    rotation_error, sine_points, sine_wave, SINE_POINTS,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EpisodeKind {
    Classification,
    Sine,
    Rotation,
    Completion,
}

impl EpisodeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EpisodeKind::Classification => "classification",
            EpisodeKind::Sine => "sine",
            EpisodeKind::Rotation => "rotation",
            EpisodeKind::Completion => "completion",
        }
    }

    pub fn is_regression(self) -> bool {
        !matches!(self, EpisodeKind::Classification)
    }
}

impl fmt::Display for EpisodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EpisodeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(EpisodeKind::Classification),
            "sine" => Ok(EpisodeKind::Sine),
            "rotation" => Ok(EpisodeKind::Rotation),
            "completion" => Ok(EpisodeKind::Completion),
            _ => Err(Error::Config(format!(
                "unknown task kind '{s}' (valid: classification, sine, rotation, completion)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Label {
    Class(u32),
    Value(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub label: Label,
    /// Index of the task segment this sample belongs to.
    pub task: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub kind: EpisodeKind,
    pub num_tasks: usize,
    pub shots: usize,
    /// `num_tasks · shots` samples, task by task unless shuffled.
    pub stream: Vec<Sample>,
    pub tests: Vec<Sample>,
    /// Class id → vocabulary code (classification only).
    pub token_codes: BTreeMap<u32, usize>,
}

impl Episode {
    /// Identity used for association patterns: the class id for
    /// classification, the task index for regression.
    pub fn association_label(&self, s: &Sample) -> u32 {
        match s.label {
            Label::Class(c) => c,
            Label::Value(_) => s.task as u32,
        }
    }

    pub fn sequence_len(&self) -> usize {
        2 * self.stream.len() + 1
    }
}

/// What kind of episode to draw and at what size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeSpec {
    pub kind: EpisodeKind,
    pub tasks: usize,
    pub shots: usize,
    pub tests_per_class: usize,
    /// Interleave the stream randomly instead of task by task.
    pub shuffled: bool,
}

impl EpisodeSpec {
    pub fn classification(tasks: usize, shots: usize, tests_per_class: usize) -> Self {
        Self {
            kind: EpisodeKind::Classification,
            tasks,
            shots,
            tests_per_class,
            shuffled: false,
        }
    }

    /// Draws one episode. Every kind except sine needs a pool.
    pub fn sample<R: Rng + ?Sized>(&self, pool: Option<&SamplePool>, vocab_size: usize, rng: &mut R) -> Result<Episode> {
        let need_pool = || pool.ok_or_else(|| Error::Config(format!("{} episodes need a sample pool", self.kind)));
        let mut ep = match self.kind {
            EpisodeKind::Classification => {
                make_classification_episode(need_pool()?, self.tasks, self.shots, self.tests_per_class, vocab_size, rng)?
            }
            EpisodeKind::Sine => make_sine_episode(self.tasks, self.shots, self.tests_per_class, rng)?,
            EpisodeKind::Rotation => {
                make_rotation_episode(need_pool()?, self.tasks, self.shots, self.tests_per_class, rng)?
            }
            EpisodeKind::Completion => {
                make_completion_episode(need_pool()?, self.tasks, self.shots, self.tests_per_class, rng)?
            }
        };
        if self.shuffled {
            shuffle_stream(&mut ep, rng);
        }
        Ok(ep)
    }

    /// Width of x-embeddings for this kind given a pool width.
    pub fn input_dim(&self, pool_dim: usize) -> usize {
        match self.kind {
            EpisodeKind::Classification | EpisodeKind::Rotation => pool_dim,
            EpisodeKind::Sine => SINE_POINTS,
            EpisodeKind::Completion => pool_dim / 2,
        }
    }

    /// Regression target width, `None` for classification.
    pub fn target_dim(&self, pool_dim: usize) -> Option<usize> {
        match self.kind {
            EpisodeKind::Classification => None,
            EpisodeKind::Sine => Some(SINE_POINTS),
            EpisodeKind::Rotation => Some(2),
            EpisodeKind::Completion => Some(pool_dim / 2),
        }
    }
}

/// Draws `num_classes` distinct codes from `0..vocab_size`, uniformly
/// without replacement, in class order.
pub fn assign_target_tokens<R: Rng + ?Sized>(num_classes: usize, vocab_size: usize, rng: &mut R) -> Result<Vec<usize>> {
    if num_classes > vocab_size {
        return Err(Error::Config(format!(
            "{num_classes} classes do not fit a vocabulary of {vocab_size} codes"
        )));
    }
    Ok(index::sample(rng, vocab_size, num_classes).into_vec())
}

/// Adds `N(0, σ²)` noise to the x-embeddings of `count` distinct, uniformly
/// chosen stream samples.
pub fn inject_noise<R: Rng + ?Sized>(episode: &Episode, sigma: f64, count: usize, rng: &mut R) -> Result<Episode> {
    if count > episode.stream.len() {
        return Err(Error::Contract(format!(
            "cannot perturb {count} samples of a {}-sample stream",
            episode.stream.len()
        )));
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Contract(format!("noise σ must be finite and non-negative, got {sigma}")));
    }
    let mut out = episode.clone();
    if sigma == 0.0 || count == 0 {
        return Ok(out);
    }
    let normal = rand_distr::Normal::new(0.0, sigma).map_err(|e| Error::Numeric(e.to_string()))?;
    for i in index::sample(rng, episode.stream.len(), count) {
        for x in &mut out.stream[i].x {
            *x += rng.sample(normal);
        }
    }
    Ok(out)
}
