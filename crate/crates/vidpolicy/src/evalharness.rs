//! Closed-loop evaluation: prompt-conditioned rollouts against the
//! simulator, milestone scoring through the ground-truth oracle, success
//! aggregation with Wilson intervals, a cross-object motion-transfer suite,
//! a blank-prompt ablation, and multi-prompt chaining without scene resets.
//!
//! A rollout repeatedly builds the trailing state window, queries the
//! policy, and advances the simulator until the policy terminates or a step
//! cap fires. Human scoring is replaced by [`simenv::milestone_oracle_raw`]
//! plus the progressive cascade, so a lucky final state cannot score without
//! the grasp that should have produced it.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use ndarray::{Array2, Array3, Array4, ArrayView4};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::actionspace::{ActionRanges, ActionVector, ACTION_DIMS};
use crate::config::{EnvConfig, ModelConfig};
use crate::datapipe::{
    self, gather_frames, sample_prompt_frames, scene_extras, state_indices, Corpus, Split,
};
use crate::error::{Error, Result};
use crate::nn::Params;
use crate::policy::{PolicyModel, PromptContext};
use crate::simenv::{
    self, EmbodimentStyle, Episode, Milestones, ObjectSpec, SceneState, TaskSpec, Trace,
};
use crate::trainer::Checkpoint;

/// Default step-cap multiple of the scripted expert's episode length.
pub const STEP_CAP_FACTOR: usize = 3;

/// Trials per task in the standard suite.
pub const TRIALS_PER_TASK: usize = 8;

// ---------------------------------------------------------------------------
// Rollout records

/// Why a rollout stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// The policy emitted a terminate action.
    PolicyTerminate,
    /// The step cap fired first.
    StepCap,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::PolicyTerminate => "policy-terminate",
            Termination::StepCap => "step-cap",
        }
    }
}

/// One control step: the state window the policy saw (as indices into
/// [`RolloutRecord::frames`]), the action it chose, and a digest of the
/// simulator state the action produced.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub window: Vec<usize>,
    pub action: ActionVector,
    pub digest: u64,
}

/// A complete scored rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    /// Which prompt conditioned the policy, e.g. a corpus episode directory.
    pub prompt_id: String,
    pub task: TaskSpec,
    /// Seed of the initial scene.
    pub seed: u64,
    /// One rendered frame per visited state, reset included, quantized to
    /// 8 bits exactly as stored corpus frames are.
    pub frames: Vec<Array3<u8>>,
    pub steps: Vec<StepRecord>,
    pub termination: Termination,
    /// Oracle flags before cascading.
    pub raw: Milestones,
    /// Flags after the progressive cascade; these are what reports count.
    pub cascaded: Milestones,
    /// True iff all four cascaded flags are true.
    pub success: bool,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Order-stable digest of a simulator state for determinism checks.
pub fn digest_state(s: &SceneState) -> Result<u64> {
    Ok(fnv1a64(&serde_json::to_vec(s)?))
}

fn quantize_frame(f: &Array3<f64>) -> Array3<u8> {
    f.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

/// Stacks the trailing `k`-frame window from the rendered history, front
/// padded with the first frame, mirroring the training-side state clip.
fn state_window(frames: &[Array3<u8>], k: usize) -> Result<(Array4<f32>, Vec<usize>)> {
    let idx = state_indices(frames.len(), frames.len() - 1, k)?;
    let (h, w, c) = frames[0].dim();
    let mut out = Array4::<f32>::zeros((k, h, w, c));
    for (i, &fi) in idx.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i)
            .assign(&frames[fi].mapv(|v| v as f32 / 255.0));
    }
    Ok((out, idx))
}

// ---------------------------------------------------------------------------
// Policies

/// What a policy sees at each control step. `state` is the `(k, H, W, 3)`
/// frame window in `[0, 1]`; `scene` and `task` are ground truth that only
/// oracle policies may consult.
pub struct Observation<'a> {
    pub state: &'a Array4<f32>,
    pub scene: &'a SceneState,
    pub task: &'a TaskSpec,
    pub t: usize,
}

/// Anything that can drive a rollout.
pub trait RolloutPolicy {
    fn act(&mut self, obs: &Observation<'_>) -> Result<ActionVector>;
}

/// A rollout policy whose behavior is conditioned on a prompt video.
pub trait PromptPolicy: RolloutPolicy {
    /// Swaps the conditioning video. Frames are `(n, H, W, 3)` in `[0, 1]`.
    fn set_prompt(&mut self, frames: ArrayView4<'_, f32>) -> Result<()>;
}

/// The trained model behind the [`PromptPolicy`] interface. The prompt is
/// encoded once per [`set_prompt`](PromptPolicy::set_prompt) and reused for
/// every subsequent step.
pub struct ModelPolicy {
    pub params: Params<f32>,
    pub model: PolicyModel,
    pub ranges: ActionRanges,
    prompt: Option<PromptContext<f32>>,
}

impl ModelPolicy {
    /// Rebuilds the model from a checkpoint, restoring parameters by name.
    /// Entries the model does not own, such as contrastive loss heads, are
    /// ignored.
    pub fn from_checkpoint(ckpt: &Checkpoint, env: &EnvConfig) -> Result<ModelPolicy> {
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let vocab = simenv::vocabulary();
        let model = PolicyModel::new(&mut params, &mut rng, &ckpt.model, &vocab);
        let by_name: HashMap<&str, &Array2<f32>> =
            ckpt.values.iter().map(|(n, v)| (n.as_str(), v)).collect();
        for e in params.entries_mut() {
            let src = by_name.get(e.name.as_str()).ok_or_else(|| {
                Error::Input(format!("checkpoint is missing parameter {}", e.name))
            })?;
            if src.dim() != e.value.dim() {
                return Err(Error::Shape(format!(
                    "checkpoint parameter {} has shape {:?}, model expects {:?}",
                    e.name,
                    src.dim(),
                    e.value.dim()
                )));
            }
            e.value.assign(src);
        }
        Ok(ModelPolicy { params, model, ranges: env.action_ranges(), prompt: None })
    }

    pub fn load(path: &Path, env: &EnvConfig) -> Result<ModelPolicy> {
        ModelPolicy::from_checkpoint(&crate::trainer::load_checkpoint(path)?, env)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.cfg
    }
}

impl RolloutPolicy for ModelPolicy {
    fn act(&mut self, obs: &Observation<'_>) -> Result<ActionVector> {
        let prompt = self
            .prompt
            .as_ref()
            .ok_or_else(|| Error::Input("no prompt set before rollout".into()))?;
        self.model.step_with_prompt(&self.params, &self.ranges, prompt, obs.state.view())
    }
}

impl PromptPolicy for ModelPolicy {
    fn set_prompt(&mut self, frames: ArrayView4<'_, f32>) -> Result<()> {
        self.prompt = Some(self.model.encode_prompt(&self.params, frames)?);
        Ok(())
    }
}

/// Oracle stub that replays the scripted expert, ignoring the prompt. An
/// upper-bound sanity policy: its rollouts must satisfy the oracle.
pub struct ExpertReplay {
    pub cfg: EnvConfig,
}

impl RolloutPolicy for ExpertReplay {
    fn act(&mut self, obs: &Observation<'_>) -> Result<ActionVector> {
        simenv::scripted_expert(&self.cfg, obs.task, obs.scene)
    }
}

impl PromptPolicy for ExpertReplay {
    fn set_prompt(&mut self, _frames: ArrayView4<'_, f32>) -> Result<()> {
        Ok(())
    }
}

/// Stub that always emits the all-zero action vector, whose mode slot
/// decodes to terminate. A lower-bound sanity policy: nothing is achieved.
pub struct ZeroAction;

impl RolloutPolicy for ZeroAction {
    fn act(&mut self, _obs: &Observation<'_>) -> Result<ActionVector> {
        Ok(ActionVector::from_slots(&[0.0; ACTION_DIMS]))
    }
}

impl PromptPolicy for ZeroAction {
    fn set_prompt(&mut self, _frames: ArrayView4<'_, f32>) -> Result<()> {
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Wilson intervals

/// A success rate with its 95% Wilson score interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateCi {
    pub successes: usize,
    pub n: usize,
    pub rate: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Wilson score interval at 95% confidence. At zero successes the lower
/// bound is exactly zero; at full successes the upper bound is exactly one.
pub fn wilson95(successes: usize, n: usize) -> RateCi {
    const Z: f64 = 1.959963984540054;
    if n == 0 {
        return RateCi { successes, n, rate: 0.0, lo: 0.0, hi: 1.0 };
    }
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = Z * Z;
    let denom = 1.0 + z2 / nf;
    let center = p + z2 / (2.0 * nf);
    let half = Z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    RateCi {
        successes,
        n,
        rate: p,
        lo: ((center - half) / denom).max(0.0),
        hi: ((center + half) / denom).min(1.0),
    }
}

// ---------------------------------------------------------------------------
// Rollout execution

/// Shared rollout loop starting from an explicit state. Returns the record
/// and the final simulator state so chains can continue without a reset.
fn rollout_core<P: RolloutPolicy + ?Sized>(
    cfg: &EnvConfig,
    policy: &mut P,
    prompt_id: &str,
    task: &TaskSpec,
    seed: u64,
    start: SceneState,
    state_frames: usize,
    step_cap: usize,
) -> Result<(RolloutRecord, SceneState)> {
    if step_cap == 0 {
        return Err(Error::Input("step cap must be positive".into()));
    }
    let style = EmbodimentStyle::robot();
    let mut state = start;
    let mut states = vec![state.clone()];
    let mut frames = vec![quantize_frame(&simenv::render(cfg, &state, &style))];
    let mut steps = Vec::new();
    let mut termination = Termination::StepCap;
    for t in 0..step_cap {
        let (window, idx) = state_window(&frames, state_frames)?;
        let obs = Observation { state: &window, scene: &state, task, t };
        let action = policy.act(&obs)?;
        state = simenv::step(cfg, &state, &action);
        states.push(state.clone());
        frames.push(quantize_frame(&simenv::render(cfg, &state, &style)));
        steps.push(StepRecord { window: idx, action, digest: digest_state(&state)? });
        if state.done {
            termination = Termination::PolicyTerminate;
            break;
        }
    }
    let raw = simenv::milestone_oracle_raw(cfg, &Trace { task: task.clone(), states });
    let cascaded = raw.cascade();
    let record = RolloutRecord {
        prompt_id: prompt_id.to_string(),
        task: task.clone(),
        seed,
        frames,
        steps,
        termination,
        raw,
        cascaded,
        success: cascaded.all_true(),
    };
    Ok((record, state))
}

/// Runs one rollout from a fresh scene: reset, then loop over build state
/// window, query policy, step simulator, until terminate or `step_cap`.
pub fn rollout<P: RolloutPolicy + ?Sized>(
    cfg: &EnvConfig,
    policy: &mut P,
    prompt_id: &str,
    task: &TaskSpec,
    seed: u64,
    extras: &[ObjectSpec],
    state_frames: usize,
    step_cap: usize,
) -> Result<RolloutRecord> {
    let style = EmbodimentStyle::robot();
    let start = simenv::reset_with_roster(cfg, task, &style, seed, extras)?;
    let (record, _) =
        rollout_core(cfg, policy, prompt_id, task, seed, start, state_frames, step_cap)?;
    Ok(record)
}

/// Number of actions the scripted expert takes to finish the task from the
/// given scene, without rendering. Step caps are multiples of this.
pub fn expert_action_count(
    cfg: &EnvConfig,
    task: &TaskSpec,
    seed: u64,
    extras: &[ObjectSpec],
) -> Result<usize> {
    let style = EmbodimentStyle::robot();
    let mut state = simenv::reset_with_roster(cfg, task, &style, seed, extras)?;
    for n in 0..cfg.max_steps {
        if state.done {
            return Ok(n);
        }
        let a = simenv::scripted_expert(cfg, task, &state)?;
        state = simenv::step(cfg, &state, &a);
    }
    if state.done {
        return Ok(cfg.max_steps);
    }
    Err(Error::Config(format!(
        "expert could not finish '{}' from seed {seed} within {} steps",
        task.instruction, cfg.max_steps
    )))
}

// ---------------------------------------------------------------------------
// Seeds

const EVAL_SEED_BIT: u64 = 1 << 63;

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives the scene seed for one trial. The top bit is forced on so eval
/// scenes never collide with corpus episode seeds, which are small sums.
pub fn eval_seed(seed: u64, lane: u64, trial: u64) -> u64 {
    mix64(seed ^ lane.wrapping_mul(0x9e37_79b9) ^ trial.wrapping_mul(0x85eb_ca6b)) | EVAL_SEED_BIT
}

// ---------------------------------------------------------------------------
// Suites

/// Knobs shared by every suite.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Rollouts per task. Must be at least one.
    pub n_per_task: usize,
    /// Base seed; every trial seed derives from it.
    pub seed: u64,
    /// Frames per prompt video, normally the model's prompt length.
    pub prompt_frames: usize,
    /// Frames per state window, normally the model's state length.
    pub state_frames: usize,
    /// Step cap as a multiple of the expert episode length.
    pub step_cap_factor: usize,
    /// Replace every prompt with all-zero frames.
    pub blank_prompt: bool,
    /// Label recorded in the report, e.g. "conditioned" or "no-prompt".
    pub arm: String,
}

impl EvalOptions {
    pub fn new(model: &ModelConfig) -> EvalOptions {
        EvalOptions {
            n_per_task: TRIALS_PER_TASK,
            seed: 0,
            prompt_frames: model.prompt_frames,
            state_frames: model.state_frames,
            step_cap_factor: STEP_CAP_FACTOR,
            blank_prompt: false,
            arm: "conditioned".to_string(),
        }
    }
}

fn blank_prompt_frames(cfg: &EnvConfig, n: usize) -> Array4<f32> {
    Array4::zeros((n, cfg.frame_size, cfg.frame_size, 3))
}

/// Standard suite: for every task, `n_per_task` rollouts over fresh seeds
/// and fresh distractor rosters, prompted by held-out corpus episodes that
/// share the task's instruction. Simulator faults exclude the affected
/// rollout and are logged in the report instead of aborting the suite.
pub fn eval_suite<P: PromptPolicy + ?Sized>(
    cfg: &EnvConfig,
    policy: &mut P,
    corpus: &Corpus,
    tasks: &[TaskSpec],
    opt: &EvalOptions,
) -> Result<EvalReport> {
    if opt.n_per_task == 0 {
        return Err(Error::Input("n_per_task must be at least 1".into()));
    }
    let mut groups: Vec<(String, Vec<RolloutRecord>)> = Vec::new();
    let mut excluded = Vec::new();
    for (ti, task) in tasks.iter().enumerate() {
        let matching: Vec<usize> = corpus
            .manifest
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == Split::Val && e.instruction == task.instruction)
            .map(|(i, _)| i)
            .collect();
        if matching.is_empty() && !opt.blank_prompt {
            return Err(Error::Input(format!(
                "no held-out episodes for instruction '{}'",
                task.instruction
            )));
        }
        let mut records = Vec::new();
        for trial in 0..opt.n_per_task {
            let rseed = eval_seed(opt.seed, ti as u64, trial as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(rseed);
            let outcome = (|| -> Result<RolloutRecord> {
                let prompt_id = if opt.blank_prompt {
                    let frames = blank_prompt_frames(cfg, opt.prompt_frames);
                    policy.set_prompt(frames.view())?;
                    "blank".to_string()
                } else {
                    let mi = matching[rng.gen_range(0..matching.len())];
                    let ep = &corpus.episodes[mi];
                    let idx = sample_prompt_frames(ep.meta.num_frames, opt.prompt_frames, &mut rng)?;
                    let frames = gather_frames(ep, &idx)?;
                    policy.set_prompt(frames.view())?;
                    corpus.manifest.entries[mi].dir.clone()
                };
                let mut roster_rng = ChaCha8Rng::seed_from_u64(rseed ^ 0x5eed_0d15);
                let extras = scene_extras(cfg, task, &mut roster_rng);
                let cap = expert_action_count(cfg, task, rseed, &extras)? * opt.step_cap_factor;
                rollout(cfg, policy, &prompt_id, task, rseed, &extras, opt.state_frames, cap)
            })();
            match outcome {
                Ok(rec) => records.push(rec),
                Err(e) => excluded.push(format!(
                    "task '{}' trial {trial} seed {rseed}: {e}",
                    task.instruction
                )),
            }
        }
        groups.push((task.instruction.clone(), records));
    }
    Ok(EvalReport::from_groups(&opt.arm, groups, excluded))
}

/// Blank-prompt ablation: the standard suite with every prompt replaced by
/// exactly-zero frames and the arm labeled "no-prompt".
pub fn no_prompt_suite<P: PromptPolicy + ?Sized>(
    cfg: &EnvConfig,
    policy: &mut P,
    corpus: &Corpus,
    tasks: &[TaskSpec],
    opt: &EvalOptions,
) -> Result<EvalReport> {
    let mut opt = opt.clone();
    opt.blank_prompt = true;
    opt.arm = "no-prompt".to_string();
    eval_suite(cfg, policy, corpus, tasks, &opt)
}

// ---------------------------------------------------------------------------
// Motion transfer

/// One conditioning video for the transfer grid: a fresh robot expert
/// demonstration of a trained task, labeled by its motion template.
pub struct TransferPrompt {
    pub label: String,
    pub template: simenv::Template,
    pub frames: Array4<f32>,
    pub demo_seed: u64,
}

fn episode_prompt_frames(ep: &Episode, n: usize, rng: &mut impl Rng) -> Result<Array4<f32>> {
    let idx = sample_prompt_frames(ep.frames.len(), n, rng)?;
    let (h, w, c) = ep.frames[0].dim();
    let mut out = Array4::<f32>::zeros((n, h, w, c));
    for (i, &fi) in idx.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i)
            .assign(&quantize_frame(&ep.frames[fi]).mapv(|v| v as f32 / 255.0));
    }
    Ok(out)
}

/// Generates the five transfer prompts: one demo per trained single-object
/// template plus a second, independently seeded pick demo.
pub fn transfer_prompts(cfg: &EnvConfig, n_frames: usize, seed: u64) -> Result<Vec<TransferPrompt>> {
    let mut tasks = datapipe::quartet().to_vec();
    tasks.push(tasks[0].clone());
    let style = EmbodimentStyle::robot();
    tasks
        .iter()
        .enumerate()
        .map(|(i, task)| {
            let demo_seed = eval_seed(seed, 0x7f, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(demo_seed ^ 0x5eed_0d15);
            let extras = scene_extras(cfg, task, &mut rng);
            let ep = simenv::expert_episode_with_roster(cfg, task, &style, demo_seed, &extras)?;
            let frames = episode_prompt_frames(&ep, n_frames, &mut rng)?;
            Ok(TransferPrompt {
                label: task.template.as_str().to_string(),
                template: task.template,
                frames,
                demo_seed,
            })
        })
        .collect()
}

/// Cross-object transfer: each of the five prompts is played against scenes
/// containing only never-trained objects, and success means the oracle sees
/// the prompt's motion template applied to the scene object. Reports group
/// by template.
pub fn transfer_suite<P: PromptPolicy + ?Sized>(
    cfg: &EnvConfig,
    policy: &mut P,
    opt: &EvalOptions,
) -> Result<EvalReport> {
    let prompts = transfer_prompts(cfg, opt.prompt_frames, opt.seed)?;
    let objects = datapipe::transfer_objects();
    let mut by_label: Vec<(String, Vec<RolloutRecord>)> = Vec::new();
    let mut excluded = Vec::new();
    for (pi, prompt) in prompts.iter().enumerate() {
        if opt.blank_prompt {
            let frames = blank_prompt_frames(cfg, opt.prompt_frames);
            policy.set_prompt(frames.view())?;
        } else {
            policy.set_prompt(prompt.frames.view())?;
        }
        for (oi, obj) in objects.iter().enumerate() {
            let scene_task = TaskSpec::new(prompt.template, Some(*obj), None)?;
            let companion = objects[(oi + 1) % objects.len()];
            let extras = [companion];
            let rseed = eval_seed(opt.seed, (1000 + pi) as u64, oi as u64);
            let prompt_id = format!("{}#{}", prompt.label, prompt.demo_seed);
            let outcome = (|| -> Result<RolloutRecord> {
                let cap =
                    expert_action_count(cfg, &scene_task, rseed, &extras)? * opt.step_cap_factor;
                rollout(cfg, policy, &prompt_id, &scene_task, rseed, &extras, opt.state_frames, cap)
            })();
            match outcome {
                Ok(rec) => {
                    match by_label.iter_mut().find(|(l, _)| *l == prompt.label) {
                        Some((_, v)) => v.push(rec),
                        None => by_label.push((prompt.label.clone(), vec![rec])),
                    }
                }
                Err(e) => excluded.push(format!(
                    "prompt '{}' object '{}' seed {rseed}: {e}",
                    prompt.label,
                    obj.phrase()
                )),
            }
        }
    }
    Ok(EvalReport::from_groups(&opt.arm, by_label, excluded))
}

// ---------------------------------------------------------------------------
// Prompt chaining

/// One link in a prompt chain: a conditioning video and the sub-task the
/// oracle scores it against.
pub struct ChainPrompt {
    pub id: String,
    pub frames: Array4<f32>,
    pub task: TaskSpec,
}

/// Outcome of a chained rollout. `records` stops at the first failed
/// sub-task; `success` requires every sub-task to succeed.
#[derive(Debug)]
pub struct ChainOutcome {
    pub records: Vec<RolloutRecord>,
    pub success: bool,
    pub failed_at: Option<usize>,
}

/// Runs the prompts in order against a single scene. On policy terminate
/// the next prompt takes over without a reset; the done latch is cleared so
/// the simulator accepts further actions. Each sub-task is scored on its
/// own state window, and the chain stops at the first sub-task that fails
/// either by step cap or by oracle.
pub fn chain_prompts<P: PromptPolicy + ?Sized>(
    cfg: &EnvConfig,
    policy: &mut P,
    prompts: &[ChainPrompt],
    seed: u64,
    extras: &[ObjectSpec],
    state_frames: usize,
    step_cap: usize,
) -> Result<ChainOutcome> {
    if prompts.is_empty() {
        return Err(Error::Input("a prompt chain needs at least one prompt".into()));
    }
    let style = EmbodimentStyle::robot();
    let first = &prompts[0].task;
    let mut roster = extras.to_vec();
    let first_req = first.required_specs();
    for p in &prompts[1..] {
        for spec in p.task.required_specs() {
            if !first_req.contains(&spec) && !roster.contains(&spec) {
                roster.push(spec);
            }
        }
    }
    let mut state = simenv::reset_with_roster(cfg, first, &style, seed, &roster)?;
    let mut records = Vec::new();
    let mut failed_at = None;
    for (i, p) in prompts.iter().enumerate() {
        policy.set_prompt(p.frames.view())?;
        state.done = false;
        let (record, end) =
            rollout_core(cfg, policy, &p.id, &p.task, seed, state, state_frames, step_cap)?;
        state = end;
        let ok = record.success;
        records.push(record);
        if !ok {
            failed_at = Some(i);
            break;
        }
    }
    Ok(ChainOutcome { success: failed_at.is_none(), failed_at, records })
}

// ---------------------------------------------------------------------------
// Reports

/// Per-group slice of a report: the group label (an instruction or a motion
/// template), its success rate, and its cascaded milestone rates.
#[derive(Debug, Clone, Serialize)]
pub struct TaskReport {
    pub label: String,
    pub rate: RateCi,
    pub milestones: [RateCi; 4],
}

/// Aggregated rates over a set of rollouts, grouped by task.
#[derive(Debug)]
pub struct EvalReport {
    pub arm: String,
    pub per_task: Vec<TaskReport>,
    pub overall: RateCi,
    /// Cascaded reach, grasp, release, terminate rates over all rollouts;
    /// monotone non-increasing by construction of the cascade.
    pub milestones: [RateCi; 4],
    pub records: Vec<RolloutRecord>,
    /// Log entries for rollouts excluded by simulator faults.
    pub excluded: Vec<String>,
}

fn milestone_rates(records: &[&RolloutRecord]) -> [RateCi; 4] {
    let n = records.len();
    let mut out = [wilson95(0, n); 4];
    for (i, slot) in out.iter_mut().enumerate() {
        let s = records.iter().filter(|r| r.cascaded.as_flags()[i]).count();
        *slot = wilson95(s, n);
    }
    out
}

impl EvalReport {
    /// Assembles a report from grouped records. The overall rate is the
    /// exact mean of the per-rollout success booleans.
    pub fn from_groups(
        arm: &str,
        groups: Vec<(String, Vec<RolloutRecord>)>,
        excluded: Vec<String>,
    ) -> EvalReport {
        let per_task = groups
            .iter()
            .map(|(label, recs)| {
                let refs: Vec<&RolloutRecord> = recs.iter().collect();
                let s = refs.iter().filter(|r| r.success).count();
                TaskReport {
                    label: label.clone(),
                    rate: wilson95(s, refs.len()),
                    milestones: milestone_rates(&refs),
                }
            })
            .collect();
        let records: Vec<RolloutRecord> =
            groups.into_iter().flat_map(|(_, recs)| recs).collect();
        let refs: Vec<&RolloutRecord> = records.iter().collect();
        let s = refs.iter().filter(|r| r.success).count();
        EvalReport {
            arm: arm.to_string(),
            per_task,
            overall: wilson95(s, refs.len()),
            milestones: milestone_rates(&refs),
            records,
            excluded,
        }
    }

    /// Frame-free summary for serialization.
    pub fn summary(&self) -> ReportSummary {
        ReportSummary {
            arm: self.arm.clone(),
            overall: self.overall,
            milestones: self.milestones,
            per_task: self.per_task.clone(),
            rollouts: self
                .records
                .iter()
                .map(|r| RolloutSummary {
                    prompt_id: r.prompt_id.clone(),
                    instruction: r.task.instruction.clone(),
                    seed: r.seed,
                    steps: r.steps.len(),
                    termination: r.termination.as_str().to_string(),
                    raw: r.raw.as_flags(),
                    cascaded: r.cascaded.as_flags(),
                    success: r.success,
                })
                .collect(),
            excluded: self.excluded.clone(),
        }
    }

    /// Human-readable report body.
    pub fn to_text(&self) -> String {
        let pct = |r: &RateCi| {
            format!(
                "{:5.1}% ({}/{}) ci95 [{:.3}, {:.3}]",
                100.0 * r.rate,
                r.successes,
                r.n,
                r.lo,
                r.hi
            )
        };
        let mut s = String::new();
        let _ = writeln!(s, "arm: {}", self.arm);
        let _ = writeln!(s, "rollouts: {}  excluded: {}", self.records.len(), self.excluded.len());
        let _ = writeln!(s, "overall: {}", pct(&self.overall));
        let names = ["reach", "grasp", "release", "terminate"];
        for (name, m) in names.iter().zip(self.milestones.iter()) {
            let _ = writeln!(s, "  {:<9} {}", name, pct(m));
        }
        let _ = writeln!(s);
        for t in &self.per_task {
            let _ = writeln!(s, "{:<44} {}", t.label, pct(&t.rate));
            for (name, m) in names.iter().zip(t.milestones.iter()) {
                let _ = writeln!(s, "  {:<9} {}", name, pct(m));
            }
        }
        if !self.excluded.is_empty() {
            let _ = writeln!(s, "\nexcluded rollouts:");
            for e in &self.excluded {
                let _ = writeln!(s, "  {e}");
            }
        }
        s
    }

    /// Writes `report.txt` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.txt"), self.to_text())?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&self.summary())?)?;
        Ok(())
    }
}

/// Serializable mirror of [`EvalReport`] without frames.
#[derive(Debug, Clone, Serialize)]
pub struct ReportSummary {
    pub arm: String,
    pub overall: RateCi,
    pub milestones: [RateCi; 4],
    pub per_task: Vec<TaskReport>,
    pub rollouts: Vec<RolloutSummary>,
    pub excluded: Vec<String>,
}

/// One rollout's outcome without frames.
#[derive(Debug, Clone, Serialize)]
pub struct RolloutSummary {
    pub prompt_id: String,
    pub instruction: String,
    pub seed: u64,
    pub steps: usize,
    pub termination: String,
    pub raw: [bool; 4],
    pub cascaded: [bool; 4],
    pub success: bool,
}

/// Renders a rollout's frames as an animated GIF for offline inspection.
pub fn write_rollout_gif(record: &RolloutRecord, path: &Path) -> Result<()> {
    use image::codecs::gif::{GifEncoder, Repeat};
    use image::{Delay, Frame, RgbaImage};
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let file = fs::File::create(path)?;
    let mut enc = GifEncoder::new(BufWriter::new(file));
    enc.set_repeat(Repeat::Infinite)?;
    for f in &record.frames {
        let (h, w, _) = f.dim();
        let mut img = RgbaImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                img.put_pixel(
                    x as u32,
                    y as u32,
                    image::Rgba([f[[y, x, 0]], f[[y, x, 1]], f[[y, x, 2]], 255]),
                );
            }
        }
        enc.encode_frame(Frame::from_parts(img, 0, 0, Delay::from_numer_denom_ms(80, 1)))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::{generate_corpus, task_roster};

    fn tiny_cfg() -> EnvConfig {
        let mut cfg = EnvConfig::preset("desk").unwrap();
        cfg.frame_size = 16;
        cfg
    }

    fn stub_opt() -> EvalOptions {
        EvalOptions {
            n_per_task: 2,
            seed: 7,
            prompt_frames: 4,
            state_frames: 3,
            step_cap_factor: STEP_CAP_FACTOR,
            blank_prompt: false,
            arm: "conditioned".to_string(),
        }
    }

    #[test]
    fn wilson_interval_satisfies_its_defining_equation() {
        const Z: f64 = 1.959963984540054;
        for &(s, n) in &[(0usize, 8usize), (1, 8), (4, 8), (7, 8), (8, 8), (13, 40), (30, 40)] {
            let ci = wilson95(s, n);
            let p_hat = s as f64 / n as f64;
            for p in [ci.lo, ci.hi] {
                let lhs = (p_hat - p) * (p_hat - p);
                let rhs = Z * Z * p * (1.0 - p) / n as f64;
                assert!(
                    (lhs - rhs).abs() <= 1e-9 * rhs.max(1e-12),
                    "endpoint {p} of ({s},{n}) violates the score equation: {lhs} vs {rhs}"
                );
            }
            assert!(ci.lo <= p_hat && p_hat <= ci.hi);
        }
    }

    #[test]
    fn wilson_extremes_hit_the_bounds_exactly() {
        let zero = wilson95(0, 8);
        assert_eq!(zero.lo, 0.0);
        assert!(zero.hi > 0.0 && zero.hi < 1.0);
        let full = wilson95(8, 8);
        assert_eq!(full.hi, 1.0);
        assert!(full.lo > 0.0 && full.lo < 1.0);
        assert_eq!(wilson95(4, 8).rate, 0.5);
    }

    #[test]
    fn expert_replay_rollout_succeeds() {
        let cfg = tiny_cfg();
        let task = task_roster()[0].clone();
        let mut policy = ExpertReplay { cfg: cfg.clone() };
        let rec = rollout(&cfg, &mut policy, "expert", &task, 42, &[], 3, cfg.max_steps).unwrap();
        assert!(rec.success, "expert replay must satisfy the oracle: {:?}", rec.raw);
        assert_eq!(rec.termination, Termination::PolicyTerminate);
        assert_eq!(rec.frames.len(), rec.steps.len() + 1);
    }

    #[test]
    fn zero_action_rollout_achieves_nothing() {
        let cfg = tiny_cfg();
        let task = task_roster()[0].clone();
        let mut policy = ZeroAction;
        let rec = rollout(&cfg, &mut policy, "zero", &task, 42, &[], 3, cfg.max_steps).unwrap();
        assert!(!rec.success);
        assert_eq!(rec.cascaded, Milestones::none());
    }

    #[test]
    fn raw_flags_cascade_per_the_progressive_rule() {
        let raw = Milestones { reached: true, grasped: false, released: true, terminated: true };
        let c = raw.cascade();
        assert_eq!(c.as_flags(), [true, false, false, false]);
        assert_eq!(c.cascade(), c);
    }

    #[test]
    fn rollouts_are_deterministic() {
        let cfg = tiny_cfg();
        let task = task_roster()[0].clone();
        let mut policy = ExpertReplay { cfg: cfg.clone() };
        let a = rollout(&cfg, &mut policy, "p", &task, 11, &[], 3, cfg.max_steps).unwrap();
        let b = rollout(&cfg, &mut policy, "p", &task, 11, &[], 3, cfg.max_steps).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn step_cap_fires_for_a_policy_that_never_terminates() {
        let cfg = tiny_cfg();
        let task = task_roster()[0].clone();
        struct Hover;
        impl RolloutPolicy for Hover {
            fn act(&mut self, _obs: &Observation<'_>) -> Result<ActionVector> {
                Ok(ActionVector::hold(0.5, 0.0))
            }
        }
        let rec = rollout(&cfg, &mut Hover, "h", &task, 5, &[], 3, 6).unwrap();
        assert_eq!(rec.termination, Termination::StepCap);
        assert_eq!(rec.steps.len(), 6);
        assert!(!rec.success);
    }

    fn synthetic_record(success_flags: [bool; 4]) -> RolloutRecord {
        let raw = Milestones {
            reached: success_flags[0],
            grasped: success_flags[1],
            released: success_flags[2],
            terminated: success_flags[3],
        };
        let cascaded = raw.cascade();
        RolloutRecord {
            prompt_id: "synthetic".into(),
            task: task_roster()[0].clone(),
            seed: 0,
            frames: Vec::new(),
            steps: Vec::new(),
            termination: Termination::PolicyTerminate,
            raw,
            cascaded,
            success: cascaded.all_true(),
        }
    }

    #[test]
    fn overall_rate_is_the_exact_mean_of_successes() {
        let recs: Vec<RolloutRecord> = [
            [true, true, true, true],
            [true, true, true, true],
            [true, false, true, true],
            [false, false, false, false],
            [true, true, true, true],
            [true, true, false, false],
        ]
        .iter()
        .map(|f| synthetic_record(*f))
        .collect();
        let report = EvalReport::from_groups("conditioned", vec![("g".into(), recs)], Vec::new());
        assert_eq!(report.overall.rate, 3.0 / 6.0);
        assert_eq!(report.overall.successes, 3);
        assert_eq!(report.overall.n, 6);
    }

    #[test]
    fn milestone_rates_are_monotone_in_every_report() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let recs: Vec<RolloutRecord> =
                (0..12).map(|_| synthetic_record([rng.gen(), rng.gen(), rng.gen(), rng.gen()])).collect();
            let report = EvalReport::from_groups("x", vec![("g".into(), recs)], Vec::new());
            for w in report.milestones.windows(2) {
                assert!(
                    w[0].rate >= w[1].rate,
                    "milestone rates must be non-increasing: {:?}",
                    report.milestones
                );
            }
            for t in &report.per_task {
                for w in t.milestones.windows(2) {
                    assert!(w[0].rate >= w[1].rate);
                }
            }
        }
    }

    #[test]
    fn eval_seeds_stay_clear_of_corpus_seeds() {
        let a = eval_seed(0, 0, 0);
        let b = eval_seed(0, 0, 1);
        let c = eval_seed(0, 1, 0);
        assert!(a >= EVAL_SEED_BIT && b >= EVAL_SEED_BIT && c >= EVAL_SEED_BIT);
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    fn tiny_corpus(dir: &Path) -> Corpus {
        let cfg = tiny_cfg();
        let tasks = vec![task_roster()[0].clone()];
        generate_corpus(&cfg, dir, &tasks, 10, 3100).unwrap();
        Corpus::load(dir).unwrap()
    }

    #[test]
    fn expert_suite_scores_full_marks_on_held_out_prompts() {
        let tmp = tempfile::tempdir().unwrap();
        let corpus = tiny_corpus(tmp.path());
        let cfg = tiny_cfg();
        let tasks = vec![task_roster()[0].clone()];
        let mut policy = ExpertReplay { cfg: cfg.clone() };
        let report = eval_suite(&cfg, &mut policy, &corpus, &tasks, &stub_opt()).unwrap();
        assert_eq!(report.records.len(), 2);
        assert!(report.excluded.is_empty(), "{:?}", report.excluded);
        assert_eq!(report.overall.rate, 1.0);
        assert_eq!(report.per_task.len(), 1);
        for rec in &report.records {
            let entry = corpus
                .manifest
                .entries
                .iter()
                .find(|e| e.dir == rec.prompt_id)
                .expect("prompt must come from the corpus");
            assert_eq!(entry.split, Split::Val, "prompts must be held out");
        }
    }

    #[test]
    fn no_prompt_suite_sends_blank_frames_and_labels_the_arm() {
        struct Recorder {
            cfg: EnvConfig,
            prompts: Vec<Array4<f32>>,
        }
        impl RolloutPolicy for Recorder {
            fn act(&mut self, obs: &Observation<'_>) -> Result<ActionVector> {
                simenv::scripted_expert(&self.cfg, obs.task, obs.scene)
            }
        }
        impl PromptPolicy for Recorder {
            fn set_prompt(&mut self, frames: ArrayView4<'_, f32>) -> Result<()> {
                self.prompts.push(frames.to_owned());
                Ok(())
            }
        }
        let tmp = tempfile::tempdir().unwrap();
        let corpus = tiny_corpus(tmp.path());
        let cfg = tiny_cfg();
        let tasks = vec![task_roster()[0].clone()];
        let mut policy = Recorder { cfg: cfg.clone(), prompts: Vec::new() };
        let report = no_prompt_suite(&cfg, &mut policy, &corpus, &tasks, &stub_opt()).unwrap();
        assert_eq!(report.arm, "no-prompt");
        assert_eq!(policy.prompts.len(), 2);
        for p in &policy.prompts {
            assert_eq!(p.dim(), (4, cfg.frame_size, cfg.frame_size, 3));
            assert!(p.iter().all(|&v| v == 0.0), "blank prompts must be exactly zero");
        }
        for rec in &report.records {
            assert_eq!(rec.prompt_id, "blank");
        }
    }

    #[test]
    fn transfer_suite_covers_the_template_by_object_grid() {
        let cfg = tiny_cfg();
        let mut policy = ExpertReplay { cfg: cfg.clone() };
        let mut opt = stub_opt();
        opt.arm = "transfer".to_string();
        let report = transfer_suite(&cfg, &mut policy, &opt).unwrap();
        assert!(report.excluded.is_empty(), "{:?}", report.excluded);
        assert_eq!(report.records.len(), 5 * 6);
        assert_eq!(report.per_task.len(), 4, "five prompts share four templates");
        let pick = report.per_task.iter().find(|t| t.label == "pick").unwrap();
        assert_eq!(pick.rate.n, 12, "the duplicated pick prompt doubles its cell");
        assert_eq!(report.overall.rate, 1.0, "expert replay transfers by construction");
        let trained: Vec<String> =
            datapipe::train_targets().iter().map(|o| o.phrase()).collect();
        for rec in &report.records {
            let obj = rec.task.object.unwrap().phrase();
            assert!(!trained.contains(&obj), "scene object {obj} was trained on");
        }
    }

    #[test]
    fn single_prompt_chain_matches_a_plain_rollout() {
        let cfg = tiny_cfg();
        let task = task_roster()[0].clone();
        let frames = Array4::<f32>::zeros((4, cfg.frame_size, cfg.frame_size, 3));
        let link = ChainPrompt { id: "p0".into(), frames, task: task.clone() };
        let mut policy = ExpertReplay { cfg: cfg.clone() };
        let chain =
            chain_prompts(&cfg, &mut policy, &[link], 21, &[], 3, cfg.max_steps).unwrap();
        let solo = rollout(&cfg, &mut policy, "p0", &task, 21, &[], 3, cfg.max_steps).unwrap();
        assert!(chain.success);
        assert_eq!(chain.records.len(), 1);
        assert_eq!(chain.records[0], solo);
    }

    #[test]
    fn chain_runs_sub_tasks_in_sequence_without_reset() {
        let cfg = tiny_cfg();
        let open = TaskSpec::new(simenv::Template::Open, None, None).unwrap();
        let close = TaskSpec::new(simenv::Template::Close, None, None).unwrap();
        let blank = Array4::<f32>::zeros((4, cfg.frame_size, cfg.frame_size, 3));
        let links = vec![
            ChainPrompt { id: "open".into(), frames: blank.clone(), task: open },
            ChainPrompt { id: "close".into(), frames: blank, task: close },
        ];
        let mut policy = ExpertReplay { cfg: cfg.clone() };
        let chain =
            chain_prompts(&cfg, &mut policy, &links, 33, &[], 3, cfg.max_steps).unwrap();
        assert!(chain.success, "open then close must both score: {:?}", chain.failed_at);
        assert_eq!(chain.records.len(), 2);
        assert!(chain.records.iter().all(|r| r.success));
    }

    #[test]
    fn chain_failure_truncates_the_record_list() {
        let cfg = tiny_cfg();
        let task = task_roster()[0].clone();
        struct ExpertOnce {
            cfg: EnvConfig,
            links_seen: usize,
        }
        impl RolloutPolicy for ExpertOnce {
            fn act(&mut self, obs: &Observation<'_>) -> Result<ActionVector> {
                if self.links_seen <= 1 {
                    simenv::scripted_expert(&self.cfg, obs.task, obs.scene)
                } else {
                    Ok(ActionVector::hold(0.5, 0.0))
                }
            }
        }
        impl PromptPolicy for ExpertOnce {
            fn set_prompt(&mut self, _frames: ArrayView4<'_, f32>) -> Result<()> {
                self.links_seen += 1;
                Ok(())
            }
        }
        let blank = Array4::<f32>::zeros((4, cfg.frame_size, cfg.frame_size, 3));
        let links: Vec<ChainPrompt> = (0..3)
            .map(|i| ChainPrompt {
                id: format!("p{i}"),
                frames: blank.clone(),
                task: task.clone(),
            })
            .collect();
        let mut policy = ExpertOnce { cfg: cfg.clone(), links_seen: 0 };
        let chain = chain_prompts(&cfg, &mut policy, &links, 21, &[], 3, 40).unwrap();
        assert!(!chain.success);
        assert_eq!(chain.failed_at, Some(1));
        assert_eq!(chain.records.len(), 2, "index 2 must be absent");
        assert_eq!(chain.records[1].termination, Termination::StepCap);
    }

    #[test]
    fn report_files_and_gif_land_on_disk() {
        let cfg = tiny_cfg();
        let task = task_roster()[0].clone();
        let mut policy = ExpertReplay { cfg: cfg.clone() };
        let rec = rollout(&cfg, &mut policy, "p", &task, 3, &[], 3, cfg.max_steps).unwrap();
        let report =
            EvalReport::from_groups("conditioned", vec![(task.instruction.clone(), vec![rec])], Vec::new());
        let tmp = tempfile::tempdir().unwrap();
        report.write(tmp.path()).unwrap();
        let text = std::fs::read_to_string(tmp.path().join("report.txt")).unwrap();
        assert!(text.contains("arm: conditioned"));
        assert!(text.contains("overall"));
        let json: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(tmp.path().join("report.json")).unwrap())
                .unwrap();
        assert_eq!(json["arm"], "conditioned");
        assert_eq!(json["rollouts"].as_array().unwrap().len(), 1);
        let gif = tmp.path().join("rollout.gif");
        write_rollout_gif(&report.records[0], &gif).unwrap();
        assert!(gif.metadata().unwrap().len() > 0);
    }

    #[test]
    fn model_policy_restores_from_a_checkpoint_and_acts() {
        use crate::config::RunConfig;
        use crate::trainer::Trainer;
        let mut run = RunConfig::preset("desk").unwrap();
        run.env.frame_size = 16;
        run.model.frame_size = 16;
        run.model.patch_size = 8;
        run.model.dim = 16;
        run.model.vit_layers = 1;
        run.model.vit_mlp_ratio = 2;
        run.model.heads = 2;
        run.model.latents = 4;
        run.model.resampler_layers = 1;
        run.model.fusion_layers = 1;
        run.model.decoder_layers = 1;
        run.model.prompt_frames = 4;
        run.model.state_frames = 3;
        run.model.horizon = 2;
        run.model.align_dim = 8;
        let trainer = Trainer::new(&run).unwrap();
        let ckpt = trainer.checkpoint();
        let mut policy = ModelPolicy::from_checkpoint(&ckpt, &run.env).unwrap();
        let task = task_roster()[0].clone();
        let frames = Array4::<f32>::zeros((4, 16, 16, 3));
        assert!(
            matches!(
                rollout(&run.env, &mut policy, "p", &task, 2, &[], 3, 4),
                Err(Error::Input(_))
            ),
            "acting without a prompt must fail"
        );
        policy.set_prompt(frames.view()).unwrap();
        let rec = rollout(&run.env, &mut policy, "p", &task, 2, &[], 3, 4).unwrap();
        assert!(rec.steps.len() <= 4);
        let mut bad = ckpt.clone();
        bad.values.retain(|(n, _)| !n.starts_with("vit."));
        assert!(ModelPolicy::from_checkpoint(&bad, &run.env).is_err());
    }
}
