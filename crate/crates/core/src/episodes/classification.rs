use rand::seq::{index, SliceRandom};
use rand::Rng;

use super::{assign_target_tokens, Episode, EpisodeKind, Label, Sample, SamplePool};
use crate::error::{Error, Result};

/// Samples `tasks` distinct classes, then `shots` stream items and
/// `tests_per_class` held-out items per class, without overlap.
pub fn make_classification_episode<R: Rng + ?Sized>(
    pool: &SamplePool,
    tasks: usize,
    shots: usize,
    tests_per_class: usize,
    vocab_size: usize,
    rng: &mut R,
) -> Result<Episode> {
    if tasks == 0 || shots == 0 {
        return Err(Error::Config("episodes need at least one task and one shot".into()));
    }
    if tasks > vocab_size {
        return Err(Error::Config(format!(
            "{tasks} tasks do not fit a vocabulary of {vocab_size} codes"
        )));
    }
    let need = shots + tests_per_class;
    let drawn = draw_classes(pool, tasks, need, rng)?;
    let codes = assign_target_tokens(tasks, vocab_size, rng)?;
    let mut stream = Vec::with_capacity(tasks * shots);
    let mut tests = Vec::with_capacity(tasks * tests_per_class);
    let mut token_codes = std::collections::BTreeMap::new();
    for (task, ((class_id, picks), &code)) in drawn.iter().zip(&codes).enumerate() {
        token_codes.insert(*class_id, code);
        for (n, &p) in picks.iter().enumerate() {
            let item = &pool.items[p];
            let s = Sample {
                x: item.embedding.iter().map(|&v| v as f64).collect(),
                label: Label::Class(*class_id),
                task,
            };
            if n < shots {
                stream.push(s);
            } else {
                tests.push(s);
            }
        }
    }
    Ok(Episode {
        kind: EpisodeKind::Classification,
        num_tasks: tasks,
        shots,
        stream,
        tests,
        token_codes,
    })
}

/// Picks `tasks` distinct classes holding at least `need` items each, and
/// `need` distinct item indices from every picked class.
pub(super) fn draw_classes<R: Rng + ?Sized>(
    pool: &SamplePool,
    tasks: usize,
    need: usize,
    rng: &mut R,
) -> Result<Vec<(u32, Vec<usize>)>> {
    let eligible: Vec<(u32, &Vec<usize>)> = pool
        .by_class()
        .iter()
        .filter(|(_, idx)| idx.len() >= need)
        .map(|(&c, idx)| (c, idx))
        .collect();
    if eligible.len() < tasks {
        return Err(Error::Data(format!(
            "pool has {} classes with at least {need} items, episode needs {tasks} (short by {})",
            eligible.len(),
            tasks - eligible.len()
        )));
    }
    let chosen = index::sample(rng, eligible.len(), tasks).into_vec();
    Ok(chosen
        .into_iter()
        .map(|ci| {
            let (class_id, items) = &eligible[ci];
            let picks = index::sample(rng, items.len(), need).into_iter().map(|p| items[p]).collect();
            (*class_id, picks)
        })
        .collect())
}

/// Ablation: randomly interleaves the stream instead of task-by-task order.
pub fn shuffle_stream<R: Rng + ?Sized>(episode: &mut Episode, rng: &mut R) {
    episode.stream.shuffle(rng);
}
