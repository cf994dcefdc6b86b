use mcl_core::episodes::{assemble_sequence, make_synthetic_pool, EpisodeSpec, SamplePool};
use mcl_core::evaluation::*;
use mcl_core::models::{Family, Model, ModelConfig, Token};
use mcl_core::tensor::{dot, normalize_row};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pool() -> SamplePool {
    make_synthetic_pool(40, 10, 8, 0.1, 500, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
}

fn small(family: Family) -> ModelConfig {
    ModelConfig {
        num_layers: 1,
        hidden_dim: 12,
        head_dim: 6,
        ssm_state_size: 4,
        dt_rank: 2,
        ffn_hidden: 12,
        input_dim: 8,
        num_performer_features: 6,
        max_positions: 256,
        ..ModelConfig::toy(family)
    }
}

#[test]
fn untrained_models_score_at_chance() {
    let p = pool();
    let setting = EvalSetting::new("base", EpisodeSpec::classification(5, 2, 5));
    // 20 episodes × 25 queries = 500 queries
    let opts = EvalOptions {
        num_episodes: 20,
        seed: 1,
        threads: 1,
    };
    let chance = 1.0 / 200.0;
    let band = 3.0 * (chance * (1.0 - chance) / 500.0f64).sqrt();
    for family in [Family::Transformer, Family::LinearTf, Family::Performer, Family::Mamba] {
        let model = Model::new(small(family), 2).unwrap();
        let r = meta_test(&model, Some(&p), &setting, &opts).unwrap();
        assert_eq!(r.episodes.iter().map(|e| e.num_queries).sum::<usize>(), 500);
        assert!((r.mean - chance).abs() <= band, "{family:?}: {}", r.mean);
    }
}

#[test]
fn zero_noise_matches_the_plain_run() {
    let p = pool();
    let model = Model::new(small(Family::Mamba), 4).unwrap();
    let base = EvalSetting::new("base", EpisodeSpec::classification(3, 2, 2));
    let opts = EvalOptions {
        num_episodes: 6,
        seed: 9,
        threads: 1,
    };
    let plain = meta_test(&model, Some(&p), &base, &opts).unwrap();
    let swept = sweep_noise(&model, Some(&p), &base, &[0.0, 2.0], &opts).unwrap();
    assert_eq!(plain.episodes, swept[0].episodes);
    assert_eq!(swept[1].setting.sigma, 2.0);
    assert_eq!(swept[1].setting.label, "noise");
}

#[test]
fn thread_count_does_not_change_reports() {
    let p = pool();
    let model = Model::new(small(Family::Transformer), 4).unwrap();
    let base = EvalSetting::new("base", EpisodeSpec::classification(3, 2, 2));
    let one = EvalOptions {
        num_episodes: 5,
        seed: 2,
        threads: 1,
    };
    let a = meta_test(&model, Some(&p), &base, &one).unwrap();
    let b = meta_test(&model, Some(&p), &base, &EvalOptions { threads: 3, ..one }).unwrap();
    assert_eq!(a.episodes, b.episodes);
    assert_eq!(a.mean, b.mean);
}

#[test]
fn evaluation_leaves_parameters_untouched() {
    let p = pool();
    let model = Model::new(small(Family::Performer), 4).unwrap();
    let before = model.to_checkpoint().to_bytes();
    let base = EvalSetting::new("base", EpisodeSpec::classification(3, 2, 2));
    let opts = EvalOptions {
        num_episodes: 3,
        ..EvalOptions::default()
    };
    sweep_shots(&model, Some(&p), &base, &[1, 3], &opts).unwrap();
    let ep = eval_episode(&base, Some(&p), 200, 0, 0).unwrap();
    association_matrix(&model, &ep).unwrap();
    assert_eq!(before, model.to_checkpoint().to_bytes());
}

#[test]
fn sweeps_report_one_row_per_value() {
    let p = pool();
    let model = Model::new(small(Family::LinearTf), 4).unwrap();
    let base = EvalSetting::new("base", EpisodeSpec::classification(5, 2, 1));
    let opts = EvalOptions {
        num_episodes: 2,
        ..EvalOptions::default()
    };
    let tasks = sweep_tasks(&model, Some(&p), &base, &[5, 8, 10, 12], &opts).unwrap();
    assert_eq!(tasks.iter().map(|r| r.setting.episode.tasks).collect::<Vec<_>>(), [5, 8, 10, 12]);
    let noise = sweep_noise(&model, Some(&p), &base, &[0.0, 1.0, 2.0, 4.0, 6.0, 8.0, 10.0], &opts).unwrap();
    assert_eq!(noise.len(), 7);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sweep.csv");
    write_reports(&path, &noise).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 8);
    assert_eq!(text.lines().next().unwrap(), REPORT_HEADER);
}

/// Hand-computed `Q·Kᵀ` of a one-layer transformer.
#[test]
fn transformer_association_export_is_query_key_products() {
    let p = pool();
    let model = Model::new(small(Family::Transformer), 8).unwrap();
    let setting = EvalSetting::new("base", EpisodeSpec::classification(3, 2, 2));
    let ep = eval_episode(&setting, Some(&p), 200, 3, 0).unwrap();
    let m = association_matrix(&model, &ep).unwrap();
    assert_eq!(m.rows.len(), ep.tests.len());
    assert_eq!(m.columns.len(), 12);
    assert_eq!(&m.columns[..2], &[(ep.stream[0].task, 0, "x"), (ep.stream[0].task, 0, "y")]);

    let params = model.params();
    let get = |name: &str| params.get(params.find(name).unwrap());
    let (w_in, b_in, codes, pos) = (
        get("embed.input.weight"),
        get("embed.input.bias"),
        get("embed.codes"),
        get("embed.positions"),
    );
    let (gain, bias, wq, wk) = (
        get("layers.0.norm.gain"),
        get("layers.0.norm.bias"),
        get("layers.0.attn.wq"),
        get("layers.0.attn.wk"),
    );
    let width = 12;
    let project = |i: usize, t: &Token, w: &mcl_core::Tensor| -> Vec<f64> {
        let mut h: Vec<f64> = match t {
            Token::Input(x) => (0..width)
                .map(|j| b_in.data()[j] + (0..x.len()).map(|r| x[r] * w_in.get2(r, j)).sum::<f64>())
                .collect(),
            Token::Code(c) => codes.row(*c).to_vec(),
            Token::Target(_) => unreachable!(),
        };
        for (j, v) in h.iter_mut().enumerate() {
            *v += pos.get2(i, j);
        }
        let mut z = vec![0.0; width];
        normalize_row(&h, &mut z);
        let z: Vec<f64> = (0..width).map(|j| z[j] * gain.data()[j] + bias.data()[j]).collect();
        (0..w.cols()).map(|c| (0..width).map(|j| z[j] * w.get2(j, c)).sum()).collect()
    };
    for (qi, row) in m.rows.iter().enumerate() {
        let layout = assemble_sequence(&ep, qi).unwrap();
        let qpos = layout.query_positions[0];
        let q = project(qpos, &layout.tokens[qpos], wq);
        for (j, &score) in row.iter().enumerate() {
            let k = project(j, &layout.tokens[j], wk);
            assert!((score - dot(&q, &k)).abs() < 1e-10, "query {qi} key {j}");
        }
    }
}

#[test]
fn state_size_law() {
    let lengths = [51, 201, 1001, 2001];
    for family in [Family::Mamba, Family::LinearTf, Family::Performer] {
        let r = measure_costs(&small(family), &lengths).unwrap();
        assert!(r.state_bytes.windows(2).all(|w| w[0] == w[1]), "{family:?}: {:?}", r.state_bytes);
        assert!(r.token_step_flops.windows(2).all(|w| w[0] == w[1]));
    }
    let long = ModelConfig {
        max_positions: 2048,
        ..small(Family::Transformer)
    };
    let r = measure_costs(&long, &lengths).unwrap();
    let b = &r.state_bytes;
    let slope = (b[1] - b[0]) as f64 / 150.0;
    assert!(slope > 0.0);
    for (len, bytes) in lengths.iter().zip(b) {
        assert_eq!(*bytes as f64, b[0] as f64 + slope * (*len - 51) as f64);
    }
    assert!(r.token_step_flops.windows(2).all(|w| w[0] < w[1]));
}
