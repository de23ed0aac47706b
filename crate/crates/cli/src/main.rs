use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use disc::analysis::{manifold_export, svg, timing_bench};
use disc::config::RunConfig;
use disc::eval::{blind_eval, paraphrase_eval, rollout_eval, AdaptPoint};
use disc::gradcheck::{op_suite, pipeline_check, CheckResult};
use disc::lang::Split;
use disc::model::Model;
use disc::pipeline;
use disc::sim::{env_reset, Dataset};
use disc::{DiscError, Result};

#[derive(Parser)]
#[command(name = "disc", version, about = "Instruction-to-policy-weights generation on a pick-and-place desk benchmark")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat key = value configuration file (see docs/config.md).
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; also where later steps look for data.jsonl and model.bin.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Checkpoint to load instead of <out>/model.bin.
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
    /// Also write SVG plots next to the CSV files.
    #[arg(long)]
    svg: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Heldout,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate expert demonstrations.
    GenData(Common),
    /// Behavior-clone the configured model.
    Train(Common),
    /// Roll out a trained model on every task.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
    },
    /// Few-shot adaptation to `adapt_task` (generated vs random init, or low-rank for concat).
    Adapt(Common),
    /// First-placement confusion on decorrelated scenes.
    Leakage(Common),
    /// Success on training vs held-out paraphrases.
    Paraphrase(Common),
    /// Cosine matrix and PCA projection of generated policies.
    Manifold(Common),
    /// Weight generation vs control-step timing.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
    },
    /// Finite-difference checks of every op and the full generator.
    Gradcheck(Common),
}

struct Ctx {
    cfg: RunConfig,
    seed: u64,
    out: PathBuf,
    model: Option<PathBuf>,
    svg: bool,
}

impl Ctx {
    fn new(c: &Common) -> Result<Self> {
        let cfg = match &c.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        std::fs::create_dir_all(&c.out)?;
        Ok(Self { cfg, seed: c.seed, out: c.out.clone(), model: c.model.clone(), svg: c.svg })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn provenance(&self) -> String {
        self.cfg.provenance(self.seed)
    }

    fn load_model(&self) -> Result<Model> {
        let p = self.model.clone().unwrap_or_else(|| self.path("model.bin"));
        if !p.exists() {
            return Err(DiscError::Contract(format!("{} not found; run `disc train` first", p.display())));
        }
        pipeline::load_model(&p)
    }
}

fn write_points(path: &Path, provenance: &str, rows: &[(&str, &[AdaptPoint])]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# {provenance}")?;
    writeln!(f, "init,step,train_loss,val_loss,success")?;
    for (name, pts) in rows {
        for p in *pts {
            let s = p.success.map_or(String::new(), |s| s.to_string());
            writeln!(f, "{name},{},{},{},{s}", p.step, p.train_loss, p.val_loss)?;
        }
    }
    Ok(f.flush()?)
}

fn gen_data(ctx: &Ctx) -> Result<()> {
    let data = pipeline::gen_data(&ctx.cfg, ctx.seed)?;
    let path = ctx.path("data.jsonl");
    data.save(&path)?;
    println!("{} transitions from {} tasks -> {}", data.transitions.len(), ctx.cfg.train_tasks().len(), path.display());
    println!("sha256 {}", data.digest()?);
    Ok(())
}

fn train(ctx: &Ctx) -> Result<()> {
    let path = ctx.path("data.jsonl");
    let data = if path.exists() { Dataset::load(&path)? } else { pipeline::gen_data(&ctx.cfg, ctx.seed)? };
    let lex = pipeline::lexicon(&ctx.cfg)?;
    let (model, rep) = pipeline::train_model(&ctx.cfg, &data, &lex, ctx.seed, Some(&ctx.out))?;
    rep.write_csv(&ctx.path("curve.csv"), &ctx.provenance())?;
    if ctx.svg {
        let pts = rep.curve.iter().map(|c| [c.step as f64, c.loss]).collect();
        std::fs::write(ctx.path("curve.svg"), svg::lines(&[("bc loss".into(), pts)], "training loss"))?;
    }
    println!(
        "{}: {} parameters, loss {:.5} -> {:.5}, checkpoint {}",
        model.kind(),
        model.params().numel(),
        rep.initial_loss,
        rep.final_loss,
        rep.checkpoints.last().map_or("-".into(), |p| p.display().to_string())
    );
    Ok(())
}

fn eval(ctx: &Ctx, split: Split) -> Result<()> {
    let model = ctx.load_model()?;
    let lex = pipeline::lexicon(&ctx.cfg)?;
    let rep = rollout_eval(&model, &ctx.cfg.env, &lex, &ctx.cfg.env.tasks(), ctx.cfg.eval_episodes, split, ctx.seed, ctx.cfg.exec)?;
    rep.write_csv(&ctx.path("eval.csv"), &ctx.provenance())?;
    rep.write_json(&ctx.path("eval.json"))?;
    for t in &rep.tasks {
        println!("object {} container {}: {}/{}", t.task.object, t.task.container, t.successes, t.episodes);
    }
    println!("overall {:.3} ({} generations)", rep.overall, rep.generations);
    Ok(())
}

fn adapt(ctx: &Ctx) -> Result<()> {
    let model = ctx.load_model()?;
    let lex = pipeline::lexicon(&ctx.cfg)?;
    let path = ctx.path("adapt.csv");
    let series: Vec<(String, Vec<AdaptPoint>)> = if model.kind().is_generator() {
        let cmp = pipeline::few_shot(&ctx.cfg, &model, &lex, ctx.seed, true)?;
        write_points(&path, &ctx.provenance(), &[("generated", &cmp.generated.points), ("random", &cmp.random.points)])?;
        vec![("generated".into(), cmp.generated.points), ("random".into(), cmp.random.points)]
    } else {
        let rep = pipeline::lora(&ctx.cfg, &model, &lex, ctx.seed, true)?;
        println!("low-rank plan: rank {} on {} matrices, {} parameters", rep.plan.rank, rep.plan.matrices.len(), rep.plan.numel());
        write_points(&path, &ctx.provenance(), &[("lowrank", &rep.points)])?;
        vec![("lowrank".into(), rep.points)]
    };
    for (name, pts) in &series {
        for p in pts {
            println!("{name} step {}: train {:.5} val {:.5} success {:?}", p.step, p.train_loss, p.val_loss, p.success);
        }
    }
    if ctx.svg {
        let lines = series.iter().map(|(n, pts)| (n.clone(), pts.iter().map(|p| [p.step as f64, p.val_loss]).collect())).collect::<Vec<_>>();
        std::fs::write(ctx.path("adapt.svg"), svg::lines(&lines, "validation loss during adaptation"))?;
    }
    Ok(())
}

fn leakage(ctx: &Ctx) -> Result<()> {
    let model = ctx.load_model()?;
    let lex = pipeline::lexicon(&ctx.cfg)?;
    let tasks = ctx.cfg.env.tasks();
    let rep = rollout_eval(&model, &ctx.cfg.env, &lex, &tasks, ctx.cfg.eval_episodes, Split::Train, ctx.seed, ctx.cfg.exec)?;
    let blind = blind_eval(&model, &ctx.cfg.env, &lex, &tasks, ctx.cfg.eval_episodes, ctx.seed, ctx.cfg.exec)?;
    rep.write_csv(&ctx.path("leakage.csv"), &ctx.provenance())?;
    blind.write_csv(&ctx.path("leakage_blind.csv"), &ctx.provenance())?;
    let n = ctx.cfg.env.n_containers;
    println!("off-diagonal placement mass {:.4} (instruction zeroed: {:.4})", rep.leakage(n), blind.leakage(n));
    Ok(())
}

fn paraphrase(ctx: &Ctx) -> Result<()> {
    let model = ctx.load_model()?;
    let lex = pipeline::lexicon(&ctx.cfg)?;
    let rep = paraphrase_eval(&model, &ctx.cfg.env, &lex, &ctx.cfg.env.tasks(), ctx.cfg.eval_episodes, ctx.seed, ctx.cfg.exec)?;
    rep.train.write_csv(&ctx.path("paraphrase_train.csv"), &ctx.provenance())?;
    rep.heldout.write_csv(&ctx.path("paraphrase_heldout.csv"), &ctx.provenance())?;
    let summary = serde_json::json!({ "train": rep.train.overall, "heldout": rep.heldout.overall, "gap": rep.gap });
    std::fs::write(ctx.path("paraphrase.json"), serde_json::to_string_pretty(&summary)?)?;
    println!("train {:.3} heldout {:.3} gap {:.3}", rep.train.overall, rep.heldout.overall, rep.gap);
    Ok(())
}

fn manifold(ctx: &Ctx) -> Result<()> {
    let model = ctx.load_model()?;
    let lex = pipeline::lexicon(&ctx.cfg)?;
    let rep = manifold_export(&model, &lex, &ctx.cfg.env.tasks())?;
    rep.write_csv(&ctx.path("manifold.csv"), &ctx.provenance())?;
    if ctx.svg {
        rep.write_svg(&ctx.path("manifold.svg"))?;
    }
    println!("same-object cosine {:.4}, unrelated cosine {:.4}", rep.same_object_mean(), rep.unrelated_mean());
    Ok(())
}

fn bench(ctx: &Ctx, trials: usize) -> Result<()> {
    let model = ctx.load_model()?;
    let lex = pipeline::lexicon(&ctx.cfg)?;
    let baseline = Model::new(pipeline::baseline_config(&ctx.cfg).model_config(), ctx.seed)?;
    let task = ctx.cfg.adapt_task;
    let obs = env_reset(&ctx.cfg.env, task, ctx.seed)?.observe();
    let rep = timing_bench(&model, &baseline, &lex, task, &obs, trials)?;
    rep.write_csv(&ctx.path("bench.csv"), &ctx.provenance())?;
    for (name, s) in [("weight generation", rep.weight_gen), ("target step", rep.target_step), ("baseline step", rep.baseline_step)] {
        println!("{name:>18}: median {:.5} ms, p95 {:.5} ms", s.median_ms, s.p95_ms);
    }
    println!("generation / step = {:.1}", rep.gen_to_step_ratio());
    Ok(())
}

fn gradcheck(ctx: &Ctx) -> Result<()> {
    let mut results: Vec<CheckResult> = op_suite(20, ctx.seed)?;
    results.push(pipeline_check(ctx.seed, 24)?);
    let mut f = std::io::BufWriter::new(std::fs::File::create(ctx.path("gradcheck.csv"))?);
    writeln!(f, "# {}", ctx.provenance())?;
    writeln!(f, "check,max_rel_error,tolerance,coordinates,passed")?;
    for r in &results {
        writeln!(f, "{},{:e},{:e},{},{}", r.name, r.max_rel_error, r.tol, r.checked, r.passed())?;
        println!("{:<14} {:>10.3e} < {:.0e} {}", r.name, r.max_rel_error, r.tol, if r.passed() { "ok" } else { "FAIL" });
    }
    f.flush()?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(DiscError::Contract(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData(c) => gen_data(&Ctx::new(&c)?),
        Cmd::Train(c) => train(&Ctx::new(&c)?),
        Cmd::Eval { common, split } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Heldout => Split::Heldout,
            };
            eval(&Ctx::new(&common)?, split)
        }
        Cmd::Adapt(c) => adapt(&Ctx::new(&c)?),
        Cmd::Leakage(c) => leakage(&Ctx::new(&c)?),
        Cmd::Paraphrase(c) => paraphrase(&Ctx::new(&c)?),
        Cmd::Manifold(c) => manifold(&Ctx::new(&c)?),
        Cmd::Bench { common, trials } => bench(&Ctx::new(&common)?, trials),
        Cmd::Gradcheck(c) => gradcheck(&Ctx::new(&c)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
