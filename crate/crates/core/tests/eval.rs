use disc::eval::{
    blind_eval, few_shot_adapt, lowrank_adapt, paraphrase_eval, random_policy, rollout_eval, rollout_with, solve_lora, summarize, AdaptConfig,
    AdaptEval, LoraPlan, EVAL_PARAPHRASES,
};
use disc::hypernet::{HypernetConfig, InitMode};
use disc::lang::{Lexicon, LexiconConfig, Split, Task};
use disc::model::{Model, ModelConfig, ModelKind};
use disc::par::Exec;
use disc::policy::PolicyArch;
use disc::sim::{expert_action, generate_dataset, EnvConfig};
use disc::DiscError;

fn lexicon(sigma_syn: f64) -> Lexicon {
    Lexicon::build(LexiconConfig { d_lang: 16, sigma_syn, ..Default::default() }).unwrap()
}

fn hyper() -> HypernetConfig {
    HypernetConfig {
        d: 8,
        heads: 2,
        win_blocks: 1,
        refine_steps: 1,
        d_lang: 16,
        arch: PolicyArch::new(vec![19, 8, 3]).unwrap(),
        init: InitMode::Win,
    }
}

fn adapt_cfg(steps: usize) -> AdaptConfig {
    AdaptConfig { steps, eta: 3e-3, checkpoints: vec![0, steps], eval_episodes: 5 }
}

#[test]
fn expert_succeeds_and_random_policy_fails() {
    let env = EnvConfig::default();
    let tasks = env.tasks();
    let eps = rollout_with(&env, &tasks, 20, 3, Exec::Parallel, |ti, _, s, _| expert_action(&env, s, tasks[ti])).unwrap();
    let rep = summarize("expert", &env, &tasks, &eps, Split::Train, 3, 0);
    assert_eq!(rep.overall, 1.0);
    for (i, row) in rep.confusion.iter().enumerate() {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(row[i], 1.0);
    }
    assert_eq!(rep.leakage(env.n_containers), 0.0);

    let theta = random_policy(&PolicyArch::new(vec![env.obs_dim(), 16, 16, 3]).unwrap(), 1);
    let eps = rollout_with(&env, &tasks, 20, 3, Exec::Parallel, |_, _, _, o| env.denormalize_action(&theta.act(o))).unwrap();
    let rep = summarize("random", &env, &tasks, &eps, Split::Train, 3, 0);
    assert!(rep.overall <= 0.05, "{}", rep.overall);
}

#[test]
fn generations_are_one_per_task_and_paraphrase() {
    let env = EnvConfig::default();
    let lex = lexicon(0.1);
    let model = Model::new(ModelConfig::new(ModelKind::Disc, hyper()), 0).unwrap();
    let tasks = [Task::new(0, 0), Task::new(2, 1)];
    let few = rollout_eval(&model, &env, &lex, &tasks, 3, Split::Train, 0, Exec::Parallel).unwrap();
    assert_eq!(few.generations, 6);
    let many = rollout_eval(&model, &env, &lex, &tasks, 12, Split::Heldout, 0, Exec::Parallel).unwrap();
    assert_eq!(many.generations, 2 * EVAL_PARAPHRASES);
    assert_eq!(many.tasks.iter().map(|t| t.episodes).sum::<usize>(), 24);
    for row in &many.confusion {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let blind = blind_eval(&model, &env, &lex, &tasks, 3, 0, Exec::Parallel).unwrap();
    assert_eq!(blind.generations, 1);
}

#[test]
fn evaluation_is_reproducible_across_exec_modes() {
    let env = EnvConfig::default();
    let lex = lexicon(0.1);
    let model = Model::new(ModelConfig::new(ModelKind::FilmMlp, hyper()), 2).unwrap();
    let tasks = env.tasks();
    let a = rollout_eval(&model, &env, &lex, &tasks, 4, Split::Train, 9, Exec::Sequential).unwrap();
    let b = rollout_eval(&model, &env, &lex, &tasks, 4, Split::Train, 9, Exec::Parallel).unwrap();
    assert_eq!(a, b);
}

#[test]
fn without_synonym_noise_the_paraphrase_gap_vanishes() {
    let env = EnvConfig::default();
    let lex = lexicon(0.0);
    let model = Model::new(ModelConfig::new(ModelKind::ConcatMlp, hyper()), 4).unwrap();
    let rep = paraphrase_eval(&model, &env, &lex, &env.tasks(), 10, 5, Exec::Parallel).unwrap();
    assert_eq!(rep.train.confusion, rep.heldout.confusion);
    assert_eq!(rep.gap, 0.0);
}

#[test]
fn few_shot_adaptation_fits_demos_without_touching_the_generator() {
    let env = EnvConfig::default();
    let lex = lexicon(0.1);
    let task = Task::new(1, 1);
    let demos = generate_dataset(&env, &[task], 3, 11, Exec::Sequential).unwrap().transitions;
    let val = generate_dataset(&env, &[task], 2, 12, Exec::Sequential).unwrap().transitions;
    let model = Model::new(ModelConfig::new(ModelKind::Disc, hyper()), 6).unwrap();
    let digest = model.params().digest();
    let emb = disc::train::Embeddings::new(&lex, Split::Train).get(task, 0).unwrap();
    let theta0 = model.generate(&emb).unwrap().unwrap();
    let ev = AdaptEval { env: &env, task, seed: 1, exec: Exec::Parallel };
    let rep = few_shot_adapt(&env, &theta0, &demos, &val, &adapt_cfg(200), Some(ev)).unwrap();
    assert_eq!(model.params().digest(), digest);
    let (start, end) = (rep.at(0).unwrap(), rep.at(200).unwrap());
    assert!(end.train_loss < 0.5 * start.train_loss, "{} -> {}", start.train_loss, end.train_loss);
    assert!(end.val_loss.is_finite());
    assert!(end.success.is_some());
    assert_ne!(rep.theta, theta0);

    let err = few_shot_adapt(&env, &theta0, &[], &val, &adapt_cfg(10), None).unwrap_err();
    assert!(matches!(err, DiscError::Contract(_)));
    let bad = AdaptConfig { eta: 0.0, ..adapt_cfg(10) };
    assert!(matches!(few_shot_adapt(&env, &theta0, &demos, &val, &bad, None), Err(DiscError::Config(_))));
}

#[test]
fn lora_solver_matches_target_or_refuses() {
    let mats = vec![("a".to_string(), 64, 64), ("b".to_string(), 64, 64), ("c".to_string(), 64, 3)];
    for target in [500, 2000, 9000, 30_000] {
        let plan = solve_lora(&mats, target, 0.10).unwrap();
        let err = (plan.numel() as f64 - target as f64).abs() / target as f64;
        assert!(err <= 0.10, "target {target}: {} ({err})", plan.numel());
    }
    assert!(matches!(solve_lora(&mats, 10, 0.10), Err(DiscError::Config(_))));
}

#[test]
fn lowrank_adaptation_starts_from_the_frozen_model() {
    let env = EnvConfig::default();
    let lex = lexicon(0.1);
    let task = Task::new(0, 2);
    let demos = generate_dataset(&env, &[task], 2, 21, Exec::Sequential).unwrap().transitions;
    let model = Model::new(ModelConfig::new(ModelKind::ConcatMlp, hyper()).resolved().unwrap(), 8).unwrap();
    let digest = model.params().digest();
    let mats = model.concat().unwrap().adaptable();

    let zero = LoraPlan { rank: 0, matrices: mats.clone() };
    let rep = lowrank_adapt(&model, &env, &lex, task, &demos, &[], &zero, &adapt_cfg(20), None, 0).unwrap();
    assert_eq!(rep.model.params().digest(), digest);

    let plan = solve_lora(&mats, 1000, 0.10).unwrap();
    let rep = lowrank_adapt(&model, &env, &lex, task, &demos, &demos, &plan, &adapt_cfg(100), None, 0).unwrap();
    assert_eq!(model.params().digest(), digest);
    assert_ne!(rep.model.params().digest(), digest);
    let (start, end) = (&rep.points[0], rep.points.last().unwrap());
    assert!(end.train_loss < start.train_loss);
    // B starts at zero, so the first score is the frozen model's
    let frozen = lowrank_adapt(&model, &env, &lex, task, &demos, &demos, &zero, &adapt_cfg(1), None, 0).unwrap();
    assert_eq!(frozen.points[0].val_loss, start.val_loss);

    let disc = Model::new(ModelConfig::new(ModelKind::Disc, hyper()), 8).unwrap();
    assert!(matches!(lowrank_adapt(&disc, &env, &lex, task, &demos, &[], &plan, &adapt_cfg(1), None, 0), Err(DiscError::Config(_))));
}
