use disc::checkpoint;
use disc::hypernet::{HypernetConfig, InitMode};
use disc::lang::{Lexicon, LexiconConfig, Split, Task};
use disc::model::{Model, ModelConfig, ModelKind};
use disc::par::Exec;
use disc::policy::PolicyArch;
use disc::seed;
use disc::sim::{generate_dataset, Dataset, EnvConfig, Transition};
use disc::tensor::cosine_lr;
use disc::train::{bc_loss, bc_loss_grads, sample_batch, train, Batch, Embeddings, TrainConfig};
use disc::DiscError;

fn lexicon() -> Lexicon {
    Lexicon::build(LexiconConfig { d_lang: 16, ..Default::default() }).unwrap()
}

fn hyper() -> HypernetConfig {
    HypernetConfig {
        d: 8,
        heads: 2,
        win_blocks: 1,
        refine_steps: 2,
        d_lang: 16,
        arch: PolicyArch::new(vec![19, 8, 3]).unwrap(),
        init: InitMode::Win,
    }
}

fn small_data() -> (EnvConfig, Dataset) {
    let env = EnvConfig::default();
    let tasks = [Task::new(0, 0), Task::new(1, 2), Task::new(2, 1)];
    let data = generate_dataset(&env, &tasks, 4, 3, Exec::Sequential).unwrap();
    (env, data)
}

fn fake_transition(task: Task, obs: f64, act: [f64; 3]) -> Transition {
    Transition { task: [task.object, task.container], surface: 0, obs: vec![obs; 19], act: act.to_vec(), episode: 0, t: 0 }
}

fn quick(steps: u64) -> TrainConfig {
    TrainConfig { steps, lr: 3e-3, batch_size: 32, checkpoint_every: 10, log_every: 0, ..Default::default() }
}

#[test]
fn task_frequencies_follow_transition_counts() {
    let counts = [100usize, 300, 600];
    let mut data = Vec::new();
    for (i, &n) in counts.iter().enumerate() {
        data.extend((0..n).map(|_| fake_transition(Task::new(i, 0), 0.0, [0.0; 3])));
    }
    let draws = 100_000;
    let batch = sample_batch(&data, draws, false, &mut seed::rng(1, &[])).unwrap();
    let mut observed = [0usize; 3];
    for g in &batch.groups {
        observed[g.task.object] += g.rows.len();
    }
    let total: usize = counts.iter().sum();
    let chi2: f64 = counts
        .iter()
        .zip(observed)
        .map(|(&c, o)| {
            let e = draws as f64 * c as f64 / total as f64;
            (o as f64 - e).powi(2) / e
        })
        .sum();
    // 2 degrees of freedom, p = 0.001
    assert!(chi2 < 13.816, "chi2 {chi2}, observed {observed:?}");
}

#[test]
fn fixed_rng_gives_identical_batches() {
    let (_, data) = small_data();
    for para in [false, true] {
        let a = sample_batch(&data.transitions, 128, para, &mut seed::rng(4, &[])).unwrap();
        let b = sample_batch(&data.transitions, 128, para, &mut seed::rng(4, &[])).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 128);
    }
    assert!(matches!(sample_batch(&[], 4, false, &mut seed::rng(0, &[])), Err(DiscError::Contract(_))));
}

#[test]
fn paraphrase_augmentation_draws_one_training_surface_per_task() {
    let (_, data) = small_data();
    let b = sample_batch(&data.transitions, 256, true, &mut seed::rng(8, &[])).unwrap();
    let tasks: Vec<Task> = b.groups.iter().map(|g| g.task).collect();
    let mut dedup = tasks.clone();
    dedup.dedup();
    assert_eq!(tasks, dedup);
    assert!(b.groups.iter().all(|g| g.surface < Split::Train.size()));
}

#[test]
fn perfect_predictions_give_zero_loss() {
    let lex = lexicon();
    let env = EnvConfig::default();
    let model = Model::new(ModelConfig::new(ModelKind::Disc, hyper()), 2).unwrap();
    let emb = Embeddings::new(&lex, Split::Train);
    let task = Task::new(1, 1);
    let c = model.controller(&emb.get(task, 0).unwrap()).unwrap();
    let data: Vec<Transition> = (0..5)
        .map(|i| {
            let obs = vec![0.1 * i as f64 - 0.2; 19];
            let a = env.denormalize_action(&c.act(&obs));
            Transition { obs, act: a.to_vec(), ..fake_transition(task, 0.0, [0.0; 3]) }
        })
        .collect();
    let loss = bc_loss(&model, &env, &data, &Batch::from_rows(&data, 0..5), &emb).unwrap();
    assert!(loss < 1e-28, "{loss}");
}

fn zeroed_concat(hyper: HypernetConfig) -> Model {
    let mut m = Model::new(ModelConfig { width: Some(6), ..ModelConfig::new(ModelKind::ConcatMlp, hyper) }, 0).unwrap();
    m.params_mut().tensors_mut().iter_mut().for_each(|t| t.data_mut().fill(0.0));
    m
}

#[test]
fn zero_policy_loss_is_mean_squared_action_norm() {
    let lex = lexicon();
    let env = EnvConfig::default();
    let model = zeroed_concat(hyper());
    let s = 1.0 / 3f64.sqrt();
    // unit-norm normalized actions
    let data = vec![
        fake_transition(Task::new(0, 0), 0.3, env.denormalize_action(&[1.0, 0.0, 0.0])),
        fake_transition(Task::new(0, 1), -0.3, env.denormalize_action(&[s, s, s])),
        fake_transition(Task::new(2, 2), 0.5, env.denormalize_action(&[0.0, 0.0, -1.0])),
    ];
    let emb = Embeddings::new(&lex, Split::Train);
    let loss = bc_loss(&model, &env, &data, &Batch::from_rows(&data, 0..3), &emb).unwrap();
    assert!((loss - 1.0).abs() < 1e-12, "{loss}");
}

#[test]
fn hand_computed_two_sample_batch() {
    let lex = lexicon();
    let env = EnvConfig::default();
    let mut model = zeroed_concat(hyper());
    let id = model.params().id_of("concat.mlp.2.b").unwrap();
    model.params_mut().get_mut(id).data_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
    let a1 = [0.02, 0.01, 1.0]; // normalized (0.4, 0.2, 1)
    let a2 = [-0.05, 0.0, -1.0]; // normalized (-1, 0, -1)
    let data = vec![fake_transition(Task::new(0, 0), 0.1, a1), fake_transition(Task::new(1, 0), -0.7, a2)];
    // (0.1² + 1.2² + 1²) = 2.45 and (1.5² + 1² + 3²) = 12.25, mean 7.35
    let emb = Embeddings::new(&lex, Split::Train);
    let loss = bc_loss(&model, &env, &data, &Batch::from_rows(&data, 0..2), &emb).unwrap();
    assert!((loss - 7.35).abs() < 1e-12, "{loss}");
}

#[test]
fn non_finite_loss_aborts_training() {
    let lex = lexicon();
    let (env, mut data) = small_data();
    data.transitions[0].act[0] = f64::NAN;
    data.transitions.truncate(1);
    let mut model = Model::new(ModelConfig::new(ModelKind::Disc, hyper()), 0).unwrap();
    let err = train(&mut model, &env, &data, &lex, &quick(3), 0, None, Exec::Sequential).unwrap_err();
    assert!(matches!(err, DiscError::Training(_)), "{err}");
}

#[test]
fn both_generator_stages_receive_gradient_immediately() {
    let lex = lexicon();
    let (env, data) = small_data();
    let model = Model::new(ModelConfig::new(ModelKind::Disc, hyper()), 5).unwrap();
    let batch = sample_batch(&data.transitions, 64, true, &mut seed::rng(5, &[])).unwrap();
    let emb = Embeddings::new(&lex, Split::Train);
    let (_, grads) = bc_loss_grads(&model, &env, &data.transitions, &batch, &emb, true, Exec::Sequential).unwrap();
    let grads = grads.unwrap();
    let norm = |prefix: &str| -> f64 {
        model.params().names().iter().zip(&grads).filter(|(n, _)| n.starts_with(prefix)).map(|(_, g)| g.norm()).sum()
    };
    assert!(norm("win.") > 0.0);
    assert!(norm("ref.") > 0.0);
}

#[test]
fn training_is_deterministic_and_mode_independent() {
    let lex = lexicon();
    let lex_digest = lex.digest();
    let (env, data) = small_data();
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let mut digests = Vec::new();
    for (i, exec) in [Exec::Sequential, Exec::Sequential, Exec::Parallel].into_iter().enumerate() {
        let mut model = Model::new(ModelConfig::new(ModelKind::Disc, hyper()), 7).unwrap();
        let rep = train(&mut model, &env, &data, &lex, &quick(30), 7, Some(dirs[i].path()), exec).unwrap();
        for c in &rep.curve {
            assert_eq!(c.lr.to_bits(), cosine_lr(c.step, 30, 3e-3).to_bits());
        }
        let names: Vec<_> = rep.checkpoints.iter().map(|p| p.file_name().unwrap().to_str().unwrap().to_string()).collect();
        assert_eq!(names, ["ckpt_000010.bin", "ckpt_000020.bin", "model.bin"]);
        let reloaded = Model::from_checkpoint(&checkpoint::load(&rep.checkpoints[2]).unwrap()).unwrap();
        assert_eq!(reloaded.params().digest(), model.params().digest());
        digests.push(std::fs::read(&rep.checkpoints[2]).unwrap());
    }
    assert_eq!(digests[0], digests[1]);
    assert_eq!(digests[0], digests[2]);
    assert_eq!(lex.digest(), lex_digest);
}

#[test]
fn every_model_kind_trains_through_the_same_loop() {
    let lex = lexicon();
    let (env, data) = small_data();
    for kind in ModelKind::ALL {
        let mut model = Model::new(ModelConfig::new(kind, hyper()), 1).unwrap();
        let rep = train(&mut model, &env, &data, &lex, &quick(60), 1, None, Exec::Parallel).unwrap();
        assert!(rep.tail_loss(10) < rep.initial_loss, "{kind}: {} -> {}", rep.initial_loss, rep.tail_loss(10));
    }
}

#[test]
fn invalid_config_is_rejected() {
    let lex = lexicon();
    let (env, data) = small_data();
    let mut model = Model::new(ModelConfig::new(ModelKind::Disc, hyper()), 0).unwrap();
    let cfg = TrainConfig { lr: -1.0, ..quick(5) };
    assert!(matches!(train(&mut model, &env, &data, &lex, &cfg, 0, None, Exec::Sequential), Err(DiscError::Config(_))));
}
