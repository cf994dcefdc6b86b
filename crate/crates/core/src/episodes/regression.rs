//! Regression episodes: sine reconstruction, rotation and completion.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use super::classification::draw_classes;
use super::{Episode, EpisodeKind, Label, Sample, SamplePool};
use crate::error::{Error, Result};

/// Number of evaluation points of a sine target.
pub const SINE_POINTS: usize = 50;

pub const SINE_AMPLITUDE: (f64, f64) = (0.1, 1.0);
pub const SINE_FREQUENCY: (f64, f64) = (0.5, 1.5);
pub const SINE_NOISE_STD: f64 = 0.05;

/// Equally spaced evaluation points in [0, 1).
pub fn sine_points() -> Vec<f64> {
    (0..SINE_POINTS).map(|i| i as f64 / SINE_POINTS as f64).collect()
}

/// `A · sin(2πντ + ψ)` at every `τ`.
pub fn sine_wave(amplitude: f64, frequency: f64, phase: f64, taus: &[f64]) -> Vec<f64> {
    taus.iter()
        .map(|&t| amplitude * (2.0 * PI * frequency * t + phase).sin())
        .collect()
}

fn check_counts(tasks: usize, shots: usize) -> Result<()> {
    if tasks == 0 || shots == 0 {
        return Err(Error::Config("episodes need at least one task and one shot".into()));
    }
    Ok(())
}

fn assemble(kind: EpisodeKind, tasks: usize, shots: usize, per_task: Vec<Vec<Sample>>) -> Episode {
    let mut stream = Vec::with_capacity(tasks * shots);
    let mut tests = Vec::new();
    for samples in per_task {
        let mut it = samples.into_iter();
        stream.extend(it.by_ref().take(shots));
        tests.extend(it);
    }
    Episode {
        kind,
        num_tasks: tasks,
        shots,
        stream,
        tests,
        token_codes: BTreeMap::new(),
    }
}

/// Each task fixes a frequency, a phase and a corrupting phase shift; the
/// amplitude varies per sample. `y` is the clean wave, `x` the shifted wave
/// plus Gaussian noise.
pub fn make_sine_episode<R: Rng + ?Sized>(
    tasks: usize,
    shots: usize,
    tests_per_task: usize,
    rng: &mut R,
) -> Result<Episode> {
    check_counts(tasks, shots)?;
    let taus = sine_points();
    let per_task = (0..tasks)
        .map(|task| {
            let nu = rng.random_range(SINE_FREQUENCY.0..SINE_FREQUENCY.1);
            let psi = rng.random_range(0.0..2.0 * PI);
            let shift = rng.random_range(0.0..2.0 * PI);
            (0..shots + tests_per_task)
                .map(|_| {
                    let a = rng.random_range(SINE_AMPLITUDE.0..SINE_AMPLITUDE.1);
                    let y = sine_wave(a, nu, psi, &taus);
                    let x = sine_wave(a, nu, psi + shift, &taus)
                        .into_iter()
                        .map(|v| v + SINE_NOISE_STD * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    Sample {
                        x,
                        label: Label::Value(y),
                        task,
                    }
                })
                .collect()
        })
        .collect();
    Ok(assemble(EpisodeKind::Sine, tasks, shots, per_task))
}

/// `1 − cos(ψ̂ − ψ)`, in [0, 2].
pub fn rotation_error(predicted: f64, truth: f64) -> f64 {
    1.0 - (predicted - truth).cos()
}

/// Angle encoded by a `(cos ψ, sin ψ)` regression output.
pub fn angle_of(v: &[f64]) -> f64 {
    v[1].atan2(v[0])
}

/// Rotates consecutive coordinate pairs of `x` by `angle`.
pub fn rotate_pairs(x: &[f64], angle: f64) -> Vec<f64> {
    let (s, c) = angle.sin_cos();
    x.chunks_exact(2)
        .flat_map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1]])
        .collect()
}

/// Each task is one pool class. A sample rotates an item of that class by
/// `ψ ~ U[0, 2π)` (pairwise in the embedding plane) and targets
/// `(cos ψ, sin ψ)`.
pub fn make_rotation_episode<R: Rng + ?Sized>(
    pool: &SamplePool,
    tasks: usize,
    shots: usize,
    tests_per_task: usize,
    rng: &mut R,
) -> Result<Episode> {
    check_counts(tasks, shots)?;
    if pool.dim % 2 != 0 {
        return Err(Error::Data(format!("rotation needs an even embedding dim, got {}", pool.dim)));
    }
    let drawn = draw_classes(pool, tasks, shots + tests_per_task, rng)?;
    let per_task = drawn
        .iter()
        .enumerate()
        .map(|(task, (_, picks))| {
            picks
                .iter()
                .map(|&p| {
                    let x: Vec<f64> = pool.items[p].embedding.iter().map(|&v| v as f64).collect();
                    let psi = rng.random_range(0.0..2.0 * PI);
                    Sample {
                        x: rotate_pairs(&x, psi),
                        label: Label::Value(vec![psi.cos(), psi.sin()]),
                        task,
                    }
                })
                .collect()
        })
        .collect();
    Ok(assemble(EpisodeKind::Rotation, tasks, shots, per_task))
}

/// Splits an item vector into its observed first half and target second half.
pub fn completion_pair(item: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if item.len() % 2 != 0 {
        return Err(Error::Data(format!("completion needs even-length items, got {}", item.len())));
    }
    let (a, b) = item.split_at(item.len() / 2);
    Ok((a.to_vec(), b.to_vec()))
}

/// Each task is one pool class; `x` is the first half of an item and `y`
/// the second half.
pub fn make_completion_episode<R: Rng + ?Sized>(
    pool: &SamplePool,
    tasks: usize,
    shots: usize,
    tests_per_task: usize,
    rng: &mut R,
) -> Result<Episode> {
    check_counts(tasks, shots)?;
    if pool.dim % 2 != 0 {
        return Err(Error::Data(format!("completion needs even-length items, got {}", pool.dim)));
    }
    let drawn = draw_classes(pool, tasks, shots + tests_per_task, rng)?;
    let per_task = drawn
        .iter()
        .enumerate()
        .map(|(task, (_, picks))| {
            picks
                .iter()
                .map(|&p| {
                    let v: Vec<f64> = pool.items[p].embedding.iter().map(|&v| v as f64).collect();
                    let (x, y) = completion_pair(&v)?;
                    Ok(Sample {
                        x,
                        label: Label::Value(y),
                        task,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(EpisodeKind::Completion, tasks, shots, per_task))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::make_synthetic_pool;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_amplitude_is_flat() {
        assert!(sine_wave(0.0, 1.3, 0.4, &sine_points()).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn quarter_period_peaks() {
        assert!((sine_wave(1.0, 1.0, 0.0, &[0.25])[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sine_episode_targets_follow_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ep = make_sine_episode(3, 4, 2, &mut rng).unwrap();
        assert_eq!(ep.stream.len(), 12);
        assert_eq!(ep.tests.len(), 6);
        // replay the generator's draws and compare pointwise
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let taus: Vec<f64> = (0..50).map(|i| i as f64 * 0.02).collect();
        let mut all = ep.stream.chunks(4).zip(ep.tests.chunks(2));
        for _ in 0..3 {
            let nu: f64 = rng.random_range(0.5..1.5);
            let psi: f64 = rng.random_range(0.0..2.0 * PI);
            let _shift: f64 = rng.random_range(0.0..2.0 * PI);
            let (s, t) = all.next().unwrap();
            for sample in s.iter().chain(t) {
                let a: f64 = rng.random_range(0.1..1.0);
                for _ in 0..50 {
                    let _: f64 = rng.sample(StandardNormal);
                }
                let Label::Value(y) = &sample.label else { panic!() };
                for (k, &tau) in taus.iter().enumerate() {
                    assert!((y[k] - a * (2.0 * PI * nu * tau + psi).sin()).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rotation_metric_endpoints() {
        assert_eq!(rotation_error(0.7, 0.7), 0.0);
        assert!((rotation_error(0.7 + PI, 0.7) - 2.0).abs() < 1e-15);
        assert!((angle_of(&[(-2.0f64).cos(), (-2.0f64).sin()]) + 2.0).abs() < 1e-12);
    }

    #[test]
    fn rotation_episode_encodes_angle() {
        let pool = make_synthetic_pool(4, 6, 8, 0.1, 0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let ep = make_rotation_episode(&pool, 3, 2, 1, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for s in &ep.stream {
            let Label::Value(y) = &s.label else { panic!() };
            assert!(((y[0] * y[0] + y[1] * y[1]) - 1.0).abs() < 1e-12);
            // rotating back by ψ restores a pool item
            let back = rotate_pairs(&s.x, -angle_of(y));
            let found = pool.items.iter().any(|it| {
                it.embedding.iter().zip(&back).all(|(&a, &b)| (a as f64 - b).abs() < 1e-9)
            });
            assert!(found);
        }
    }

    #[test]
    fn completion_halves() {
        let (x, y) = completion_pair(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!((x, y), (vec![1.0, 2.0], vec![3.0, 4.0]));
        assert!(matches!(completion_pair(&[1.0, 2.0, 3.0]), Err(Error::Data(_))));
        let odd = make_synthetic_pool(2, 3, 5, 0.1, 0, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert!(make_completion_episode(&odd, 1, 1, 1, &mut ChaCha8Rng::seed_from_u64(5)).is_err());
    }

    #[test]
    fn zero_prediction_mse_is_mean_square_of_targets() {
        let pool = make_synthetic_pool(3, 5, 6, 0.3, 0, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let ep = make_completion_episode(&pool, 3, 2, 2, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let mut total = 0.0;
        let mut count = 0usize;
        for t in &ep.tests {
            let Label::Value(y) = &t.label else { panic!() };
            for v in y {
                total += (0.0 - v) * (0.0 - v);
                count += 1;
            }
        }
        let mse = total / count as f64;
        let oracle: f64 = ep
            .tests
            .iter()
            .map(|t| match &t.label {
                Label::Value(y) => y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64,
                _ => unreachable!(),
            })
            .sum::<f64>()
            / ep.tests.len() as f64;
        assert!((mse - oracle).abs() < 1e-12);
    }
}
