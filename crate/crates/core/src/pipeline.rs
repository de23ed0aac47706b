//! End-to-end steps driven by a [`RunConfig`], shared by the command line
//! and the acceptance runs.

use std::path::Path;

use crate::config::RunConfig;
use crate::error::{DiscError, Result};
use crate::eval::{few_shot_adapt, lowrank_adapt, random_policy, solve_lora, AdaptEval, AdaptReport, LoraReport};
use crate::lang::{Lexicon, Split, Task};
use crate::model::{Model, ModelKind, PARAM_MATCH_TOL};
use crate::policy::param_count;
use crate::seed;
use crate::sim::{generate_dataset, Dataset, Transition};
use crate::train::{train, Embeddings, TrainReport};

/// Held-out demonstrations scored during adaptation.
pub const ADAPT_VAL_DEMOS: usize = 20;

pub fn lexicon(cfg: &RunConfig) -> Result<Lexicon> {
    Lexicon::build(cfg.lexicon.clone())
}

/// Expert demonstrations for every training task.
pub fn gen_data(cfg: &RunConfig, seed: u64) -> Result<Dataset> {
    generate_dataset(&cfg.env, &cfg.train_tasks(), cfg.demos, seed, cfg.exec)
}

/// Fresh model of `cfg.model` trained on `data`; checkpoints go to `out`.
pub fn train_model(cfg: &RunConfig, data: &Dataset, lex: &Lexicon, seed: u64, out: Option<&Path>) -> Result<(Model, TrainReport)> {
    let mut model = Model::new(cfg.model_config(), seed)?;
    let report = train(&mut model, &cfg.env, data, lex, &cfg.train, seed, out, cfg.exec)?;
    Ok((model, report))
}

/// `shots` demonstrations of `task` plus a disjoint validation set.
pub fn adaptation_data(cfg: &RunConfig, task: Task, seed: u64) -> Result<(Vec<Transition>, Vec<Transition>)> {
    let demos = generate_dataset(&cfg.env, &[task], cfg.shots, seed::derive(seed, &[0x6164, 0]), cfg.exec)?.transitions;
    let val = generate_dataset(&cfg.env, &[task], ADAPT_VAL_DEMOS, seed::derive(seed, &[0x6164, 1]), cfg.exec)?.transitions;
    Ok((demos, val))
}

/// Few-shot adaptation from the generated policy and from a random one
/// with the same data and rate.
#[derive(Clone, Debug)]
pub struct FewShotComparison {
    pub task: Task,
    pub generated: AdaptReport,
    pub random: AdaptReport,
}

pub fn few_shot(cfg: &RunConfig, model: &Model, lex: &Lexicon, seed: u64, score_success: bool) -> Result<FewShotComparison> {
    if cfg.shots == 0 {
        return Err(DiscError::Contract("few-shot adaptation needs at least one demonstration".into()));
    }
    let task = cfg.adapt_task;
    let (demos, val) = adaptation_data(cfg, task, seed)?;
    let emb = Embeddings::new(lex, Split::Train).get(task, 0)?;
    let theta0 = model.generate(&emb)?.ok_or_else(|| DiscError::Config(format!("{} does not generate a policy", model.kind())))?;
    let ev = score_success.then_some(AdaptEval { env: &cfg.env, task, seed, exec: cfg.exec });
    let generated = few_shot_adapt(&cfg.env, &theta0, &demos, &val, &cfg.adapt, ev)?;
    let random = few_shot_adapt(&cfg.env, &random_policy(model.arch(), seed), &demos, &val, &cfg.adapt, ev)?;
    Ok(FewShotComparison { task, generated, random })
}

/// Low-rank adaptation of a concat baseline with as many trainable
/// parameters as the generated policy.
pub fn lora(cfg: &RunConfig, model: &Model, lex: &Lexicon, seed: u64, score_success: bool) -> Result<LoraReport> {
    let net = model.concat().ok_or_else(|| DiscError::Config(format!("low-rank adaptation needs a concat baseline, got {}", model.kind())))?;
    let plan = solve_lora(&net.adaptable(), param_count(model.arch()), PARAM_MATCH_TOL)?;
    let task = cfg.adapt_task;
    let (demos, val) = adaptation_data(cfg, task, seed)?;
    let ev = score_success.then_some(AdaptEval { env: &cfg.env, task, seed, exec: cfg.exec });
    lowrank_adapt(model, &cfg.env, lex, task, &demos, &val, &plan, &cfg.adapt, ev, seed)
}

/// Loads a checkpoint written by [`train_model`].
pub fn load_model(path: &Path) -> Result<Model> {
    Model::from_checkpoint(&crate::checkpoint::load(path)?)
}

/// Concat baseline sized against `cfg`'s generator.
pub fn baseline_config(cfg: &RunConfig) -> RunConfig {
    cfg.with_model(ModelKind::ConcatMlp)
}
