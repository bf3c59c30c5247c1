//! Command-line front end: corpus generation, training, closed-loop
//! evaluation, and a fast self-verification suite.
//!
//! Every subcommand writes its fully resolved configuration next to its
//! outputs, so any run can be reproduced from the artifacts alone. Relative
//! output paths land under the directory named by `VIDPOLICY_OUT`, default
//! `runs`.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::{Array2, Array3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use vidpolicy::actionspace::{decode, encode, ActionVector, ACTION_DIMS, NUM_BINS};
use vidpolicy::config::{ModelConfig, RunConfig};
use vidpolicy::datapipe::{self, gather_frames, sample_prompt_frames, Corpus, Split};
use vidpolicy::encoders::attention_pair_counts;
use vidpolicy::evalharness::{
    chain_prompts, eval_seed, eval_suite, no_prompt_suite, transfer_suite, write_rollout_gif,
    ChainPrompt, EvalOptions, EvalReport, ModelPolicy,
};
use vidpolicy::losses::{self, ContrastiveHead, LossMask};
use vidpolicy::nn::{fd_max_rel_err, Params};
use vidpolicy::policy::ActionLogits;
use vidpolicy::simenv::{self, EmbodimentStyle, Milestones, TaskSpec, Template};
use vidpolicy::trainer;
use vidpolicy::{Error, Result};

/// Environment variable naming the root directory for relative outputs.
const OUT_ENV: &str = "VIDPOLICY_OUT";

#[derive(Parser)]
#[command(
    name = "vidpolicy",
    version,
    about = "Video-conditioned manipulation policy: data, training, evaluation."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a paired-demonstration corpus.
    Gen(GenArgs),
    /// Train a policy on a generated corpus.
    Train(TrainArgs),
    /// Evaluate a checkpoint in closed loop.
    Eval(EvalArgs),
    /// Run fast property checks; exits nonzero on any failure.
    Verify,
}

/// Configuration source shared by the data-touching subcommands: an optional
/// preset, an optional flat key=value file, and dotted-key overrides, applied
/// in that order.
#[derive(Args)]
struct ConfigArgs {
    /// Preset name, "desk" or "paper".
    #[arg(long)]
    preset: Option<String>,
    /// Flat key=value config file with env. / model. / train. prefixes.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one resolved key, e.g. --set train.steps=500. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut overrides: Vec<(String, String)> = Vec::new();
        if let Some(p) = &self.preset {
            for block in ["env", "model", "train"] {
                overrides.push((format!("{block}.preset"), p.clone()));
            }
        }
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Input(format!("override {s:?} must be key=value")))?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// How many tasks from the roster to generate, in roster order.
    #[arg(long, default_value_t = 4)]
    tasks: usize,
    /// Robot episodes per task; each gets a human-style partner episode.
    #[arg(long = "per-task", default_value_t = 100)]
    per_task: usize,
    /// Base seed for episode generation.
    #[arg(long, default_value_t = 3000)]
    seed: u64,
    /// Corpus directory, relative to the output root unless absolute.
    #[arg(long, default_value = "corpus")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Corpus directory from a prior gen run.
    #[arg(long, default_value = "corpus")]
    corpus: PathBuf,
    /// Run directory for checkpoints and logs.
    #[arg(long, default_value = "train")]
    out: PathBuf,
    /// Resume from this checkpoint file.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Enable exactly these losses, e.g. "ce" or "ce,tcc,vvcl".
    #[arg(long = "loss-mask")]
    loss_mask: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Checkpoint file to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus directory supplying held-out prompts.
    #[arg(long, default_value = "corpus")]
    corpus: PathBuf,
    /// Report directory.
    #[arg(long, default_value = "eval")]
    out: PathBuf,
    /// Suite to run: standard, transfer, no-prompt, or chain.
    #[arg(long, default_value = "standard")]
    suite: String,
    /// Rollouts per task.
    #[arg(long = "n-per-task", default_value_t = 8)]
    n_per_task: usize,
    /// Base seed for trial seeds.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also render one GIF per rollout.
    #[arg(long)]
    gifs: bool,
}

fn output_root() -> PathBuf {
    env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn resolve_path(p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        output_root().join(p)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.cmd {
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Verify => cmd_verify(),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

// ---------------------------------------------------------------------------
// gen

fn cmd_gen(a: &GenArgs) -> Result<()> {
    let run = a.cfg.resolve()?;
    let roster = datapipe::task_roster();
    if a.tasks == 0 || a.tasks > roster.len() {
        return Err(Error::Input(format!("--tasks must be in 1..={}", roster.len())));
    }
    if a.per_task == 0 {
        return Err(Error::Input("--per-task must be positive".into()));
    }
    let tasks = roster[..a.tasks].to_vec();
    let out = resolve_path(&a.out);
    let (manifest, warnings) =
        datapipe::generate_corpus(&run.env, &out, &tasks, a.per_task, a.seed)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    fs::write(out.join("config.txt"), run.to_kv_text())?;
    fs::write(
        out.join("gen.txt"),
        format!("tasks={}\nper_task={}\nseed={}\n", a.tasks, a.per_task, a.seed),
    )?;
    let robot = manifest.entries.iter().filter(|e| e.style_name == "robot").count();
    println!(
        "wrote {} episodes ({robot} robot) across {} tasks to {}",
        manifest.entries.len(),
        manifest.tasks.len(),
        out.display()
    );
    for b in &manifest.buckets {
        println!("  bucket {:<12} weight {:.2}  available {}", b.source.as_str(), b.weight, b.available);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train

fn apply_loss_mask(run: &mut RunConfig, mask: &str) -> Result<()> {
    run.train.loss_ce = false;
    run.train.loss_tcc = false;
    run.train.loss_vvcl = false;
    run.train.loss_vtcl = false;
    for part in mask.split(',') {
        match part.trim() {
            "ce" => run.train.loss_ce = true,
            "tcc" => run.train.loss_tcc = true,
            "vvcl" => run.train.loss_vvcl = true,
            "vtcl" => run.train.loss_vtcl = true,
            other => {
                return Err(Error::Input(format!(
                    "unknown loss {other:?} in --loss-mask; expected ce, tcc, vvcl, vtcl"
                )))
            }
        }
    }
    run.validate()
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut run = a.cfg.resolve()?;
    if let Some(mask) = &a.loss_mask {
        apply_loss_mask(&mut run, mask)?;
    }
    let corpus = resolve_path(&a.corpus);
    let out = resolve_path(&a.out);
    let resume = a.resume.as_ref().map(|p| resolve_path(p));
    let outcome = trainer::train(&run, &corpus, &out, resume.as_deref())?;
    match outcome.last_bundle {
        Some(b) => println!(
            "trained to step {} (objective {:.4}); final checkpoint {}",
            run.train.steps,
            b.total,
            outcome.final_checkpoint.display()
        ),
        None => println!(
            "nothing left to train; final checkpoint {}",
            outcome.final_checkpoint.display()
        ),
    }
    if let Some(best) = &outcome.best_checkpoint {
        println!("best held-out action loss checkpoint {}", best.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let run = a.cfg.resolve()?;
    let ckpt_path = resolve_path(&a.checkpoint);
    let mut policy = ModelPolicy::load(&ckpt_path, &run.env)?;
    if policy.config().frame_size != run.env.frame_size {
        return Err(Error::Config(format!(
            "checkpoint frame size {} does not match env frame size {}",
            policy.config().frame_size,
            run.env.frame_size
        )));
    }
    let out = resolve_path(&a.out);
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.txt"), run.to_kv_text())?;
    let mut opt = EvalOptions::new(policy.config());
    opt.n_per_task = a.n_per_task;
    opt.seed = a.seed;
    let report = match a.suite.as_str() {
        "standard" => {
            let corpus = Corpus::load(&resolve_path(&a.corpus))?;
            let tasks = corpus.manifest.tasks.clone();
            eval_suite(&run.env, &mut policy, &corpus, &tasks, &opt)?
        }
        "no-prompt" => {
            let corpus = Corpus::load(&resolve_path(&a.corpus))?;
            let tasks = corpus.manifest.tasks.clone();
            no_prompt_suite(&run.env, &mut policy, &corpus, &tasks, &opt)?
        }
        "transfer" => {
            opt.arm = "transfer".to_string();
            transfer_suite(&run.env, &mut policy, &opt)?
        }
        "chain" => {
            let corpus = Corpus::load(&resolve_path(&a.corpus))?;
            run_chain_suite(&run, &mut policy, &corpus, &opt)?
        }
        other => {
            return Err(Error::Input(format!(
                "unknown suite {other:?}; expected standard, transfer, no-prompt, or chain"
            )))
        }
    };
    report.write(&out)?;
    if a.gifs {
        for (i, rec) in report.records.iter().enumerate() {
            write_rollout_gif(rec, &out.join(format!("rollout_{i:03}.gif")))?;
        }
    }
    print!("{}", report.to_text());
    println!("report written to {}", out.display());
    Ok(())
}

/// Long-horizon demonstration: open the drawer, put the blue can into it,
/// close it, swapping prompts on each policy terminate without a reset.
fn run_chain_suite(
    run: &RunConfig,
    policy: &mut ModelPolicy,
    corpus: &Corpus,
    opt: &EvalOptions,
) -> Result<EvalReport> {
    let open = TaskSpec::new(Template::Open, None, None)?;
    let place = datapipe::quartet()[1].clone();
    let close = TaskSpec::new(Template::Close, None, None)?;
    let seed = eval_seed(opt.seed, 0xC4A1, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let links = [open, place, close]
        .into_iter()
        .map(|task| {
            let matching: Vec<usize> = corpus
                .manifest
                .entries
                .iter()
                .enumerate()
                .filter(|(_, e)| e.split == Split::Val && e.instruction == task.instruction)
                .map(|(i, _)| i)
                .collect();
            if matching.is_empty() {
                return Err(Error::Input(format!(
                    "chain suite needs held-out episodes for '{}'; generate the full task roster",
                    task.instruction
                )));
            }
            let mi = matching[rng.gen_range(0..matching.len())];
            let ep = &corpus.episodes[mi];
            let idx = sample_prompt_frames(ep.meta.num_frames, opt.prompt_frames, &mut rng)?;
            let frames = gather_frames(ep, &idx)?;
            Ok(ChainPrompt { id: corpus.manifest.entries[mi].dir.clone(), frames, task })
        })
        .collect::<Result<Vec<_>>>()?;
    let outcome = chain_prompts(
        &run.env,
        policy,
        &links,
        seed,
        &[],
        opt.state_frames,
        run.env.max_steps,
    )?;
    match outcome.failed_at {
        None => println!("chain succeeded across {} sub-tasks", outcome.records.len()),
        Some(i) => println!("chain failed at sub-task {i}"),
    }
    let groups = outcome
        .records
        .into_iter()
        .map(|r| (r.task.instruction.clone(), vec![r]))
        .collect();
    Ok(EvalReport::from_groups("chain", groups, Vec::new()))
}

// ---------------------------------------------------------------------------
// verify

fn thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

type CheckResult = std::result::Result<String, String>;

fn verify_accounting() -> CheckResult {
    let paper = ModelConfig::preset("paper").map_err(|e| e.to_string())?;
    let (full, resampled) = attention_pair_counts(&paper);
    let tokens =
        ((paper.prompt_frames + paper.state_frames) * paper.tokens_per_frame()) as u64;
    if full != tokens * tokens {
        return Err(format!("joint count {full} is not {tokens} squared"));
    }
    if (full, resampled) != (22_127_616, 301_056) {
        return Err(format!("expected 22,127,616 vs 301,056, got {full} vs {resampled}"));
    }
    Ok(format!(
        "joint self-attention {} vs resampled cross-attention {}",
        thousands(full),
        thousands(resampled)
    ))
}

fn verify_binning() -> CheckResult {
    let ranges = vidpolicy::actionspace::ActionRanges::default_for(1.0);
    let mut worst: f64 = 0.0;
    for d in 0..ACTION_DIMS {
        let (lo, hi) = ranges.get(d);
        let half = (hi - lo) / (2.0 * NUM_BINS as f64);
        for k in 0..=1000 {
            let v = lo + (hi - lo) * k as f64 / 1000.0;
            let mut slots = [0.0; ACTION_DIMS];
            for (j, s) in slots.iter_mut().enumerate() {
                let (jl, jh) = ranges.get(j);
                *s = 0.5 * (jl + jh);
            }
            slots[d] = v;
            let a = ActionVector::from_slots(&slots);
            let decoded = decode(&encode(&a, &ranges).map_err(|e| e.to_string())?, &ranges)
                .map_err(|e| e.to_string())?;
            let err = (decoded.slots()[d] - a.slots()[d]).abs();
            worst = worst.max(err / half);
            if err > half + 1e-12 {
                return Err(format!(
                    "dim {d} value {v} round-trips with error {err}, above half bin width {half}"
                ));
            }
        }
    }
    Ok(format!("max round-trip error {worst:.3} of half a bin width over 11x1001 samples"))
}

fn verify_loss_oracles() -> CheckResult {
    let logits = ActionLogits::new(Array3::<f64>::zeros((1, ACTION_DIMS, NUM_BINS)))
        .map_err(|e| e.to_string())?;
    let targets = Array2::<u16>::zeros((1, ACTION_DIMS));
    let ce = losses::action_ce(&logits, targets.view()).map_err(|e| e.to_string())?;
    let want = (NUM_BINS as f64).ln();
    if (ce - want).abs() > 1e-12 {
        return Err(format!("uniform-logits cross entropy {ce} is not ln(256) = {want}"));
    }
    let bundle = losses::LossBundle::new(0.8, 0.4, 0.2, 0.6).map_err(|e| e.to_string())?;
    if (bundle.total - 0.5).abs() > 1e-15 {
        return Err(format!("bundle total {} is not the four-loss mean", bundle.total));
    }
    let w = LossMask::ce_only().weights();
    if w != [1.0, 0.0, 0.0, 0.0] {
        return Err(format!("ce-only mask weights {w:?}"));
    }
    Ok(format!("uniform cross entropy matches ln(256) = {want:.6}; masked means check out"))
}

fn verify_gradients() -> CheckResult {
    let mut p = Params::<f64>::new();
    let head = ContrastiveHead::new(&mut p, "chk");
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let z1: Array2<f64> = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
    let z2: Array2<f64> = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
    let a = p.add("chk.z1", z1, false);
    let b = p.add("chk.z2", z2, false);
    let (_, d_z1, d_z2) = {
        let z1 = p.value(a).clone();
        let z2 = p.value(b).clone();
        losses::siglip_grads(&mut p, &head, &z1, &z2, 1.0).map_err(|e| e.to_string())?
    };
    p.acc_grad(a, &d_z1);
    p.acc_grad(b, &d_z2);
    let head_for_fd = head.clone();
    let rel = fd_max_rel_err(
        &mut p,
        &mut |p| {
            let z1 = p.value(a).clone();
            let z2 = p.value(b).clone();
            losses::siglip(p, &head_for_fd, &z1, &z2).unwrap()
        },
        1e-5,
        1e-10,
        16,
    );
    if rel > 1e-6 {
        return Err(format!("sigmoid contrastive gradient error {rel:.3e} above 1e-6"));
    }
    Ok(format!("finite differences agree with analytic gradients to {rel:.3e}"))
}

fn verify_milestone_oracle() -> CheckResult {
    let mut cfg = vidpolicy::config::EnvConfig::preset("desk").map_err(|e| e.to_string())?;
    cfg.frame_size = 16;
    let task = datapipe::task_roster()[0].clone();
    let ep = simenv::expert_episode(&cfg, &task, &EmbodimentStyle::robot(), 5)
        .map_err(|e| e.to_string())?;
    if !ep.milestones.all_true() {
        return Err(format!("expert episode missed a milestone: {:?}", ep.milestones));
    }
    let raw = Milestones { reached: true, grasped: false, released: true, terminated: true };
    if raw.cascade().as_flags() != [true, false, false, false] {
        return Err("cascade did not clear flags after the first false".into());
    }
    Ok("expert satisfies all milestones; cascade clears trailing flags".into())
}

fn cmd_verify() -> Result<()> {
    let checks: [(&str, fn() -> CheckResult); 5] = [
        ("attention-accounting", verify_accounting),
        ("bin-round-trip", verify_binning),
        ("loss-oracles", verify_loss_oracles),
        ("gradients", verify_gradients),
        ("milestone-oracle", verify_milestone_oracle),
    ];
    let mut failures = 0;
    for (name, check) in checks {
        match check() {
            Ok(msg) => println!("PASS {name}: {msg}"),
            Err(msg) => {
                println!("FAIL {name}: {msg}");
                failures += 1;
            }
        }
    }
    if failures > 0 {
        return Err(Error::Input(format!("{failures} verification checks failed")));
    }
    println!("all checks passed");
    Ok(())
}
