//! Optimization: the warmup-cosine schedule, a training loop with stateless
//! per-step batch derivation, bitwise-resumable checkpoints, line-delimited
//! metric logging, and held-out validation.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::actionspace::{ActionRanges, ACTION_DIMS};
use crate::config::{ModelConfig, RunConfig, TrainConfig};
use crate::datapipe::{
    pair_episodes_weighted, BatchData, BatchSampler, Corpus, PromptPair, Split,
    PROMPTS_PER_EPISODE,
};
use crate::error::{Error, Result};
use crate::losses::{training_losses, ContrastiveHead, LossBundle, LossMask};
use crate::nn::{AdamW, Params};
use crate::policy::PolicyModel;
use crate::simenv::vocabulary;

/// Validation uses roughly this many held-out samples per pass.
const VAL_SAMPLES: usize = 256;

/// The first eight action dimensions: mode plus the seven arm slots.
pub const ARM_DIMS: usize = 8;

// ---------------------------------------------------------------------------
// Schedule

/// Learning rate at a 1-based optimizer step: linear `0 -> peak` over the
/// warmup, then cosine `peak -> final` over the remainder. Steps past the
/// configured total clamp to the final rate.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let (warmup, total) = (cfg.warmup_steps, cfg.steps);
    if step >= total {
        return cfg.final_lr;
    }
    if step <= warmup {
        if warmup == 0 {
            return cfg.peak_lr;
        }
        return cfg.peak_lr * step as f64 / warmup as f64;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    cfg.final_lr
        + 0.5 * (cfg.peak_lr - cfg.final_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Derives an unrelated RNG stream for (seed, step, salt), so any step's
/// batch can be rebuilt without replaying the steps before it.
fn step_seed(seed: u64, step: usize, salt: u64) -> u64 {
    let mut x = seed ^ salt ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

const SALT_PAIRS: u64 = 0x7061_6972;
const SALT_BATCH: u64 = 0x6261_7463;
const SALT_VAL: u64 = 0x7661_6c69;

// ---------------------------------------------------------------------------
// Checkpoints

const CKPT_MAGIC: &[u8; 8] = b"VPCKPT01";

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    step: usize,
    adam_t: u64,
    fingerprint: String,
    model: ModelConfig,
    params: Vec<CkptParam>,
}

#[derive(Serialize, Deserialize)]
struct CkptParam {
    name: String,
    rows: usize,
    cols: usize,
    decay: bool,
}

/// A checkpoint loaded back into memory: every parameter keyed by its
/// module path, both optimizer moments, the step counter, and the config
/// fingerprint of the run that wrote it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: usize,
    pub adam_t: u64,
    pub fingerprint: String,
    pub model: ModelConfig,
    pub values: Vec<(String, Array2<f32>)>,
    pub m: Vec<Array2<f32>>,
    pub v: Vec<Array2<f32>>,
}

fn write_array(w: &mut impl Write, a: &Array2<f32>) -> Result<()> {
    for &v in a.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_array(r: &mut impl Read, rows: usize, cols: usize) -> Result<Array2<f32>> {
    let mut buf = vec![0u8; rows * cols * 4];
    r.read_exact(&mut buf)?;
    let vals: Vec<f32> =
        buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Array2::from_shape_vec((rows, cols), vals).map_err(|e| Error::Shape(e.to_string()))
}

/// Writes parameters, optimizer moments, step counter, and config
/// fingerprint. The write goes to a temporary file first so a crash never
/// leaves a truncated checkpoint behind.
pub fn save_checkpoint(
    path: &Path,
    run: &RunConfig,
    params: &Params<f32>,
    opt: &AdamW<f32>,
    step: usize,
) -> Result<()> {
    let header = CkptHeader {
        step,
        adam_t: opt.t,
        fingerprint: run.fingerprint(),
        model: run.model.clone(),
        params: params
            .entries()
            .iter()
            .map(|e| CkptParam {
                name: e.name.clone(),
                rows: e.value.nrows(),
                cols: e.value.ncols(),
                decay: e.decay,
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        w.write_all(&header_bytes)?;
        for e in params.entries() {
            write_array(&mut w, &e.value)?;
        }
        let (m, v) = opt.state_arrays();
        for a in m {
            write_array(&mut w, a)?;
        }
        for a in v {
            write_array(&mut w, a)?;
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(Error::Input(format!("no checkpoint at {}", path.display())));
    }
    let mut r = std::io::BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Input(format!("{} is not a checkpoint file", path.display())));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut header_bytes = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut header_bytes)?;
    let header: CkptHeader = serde_json::from_slice(&header_bytes)?;
    let mut values = Vec::with_capacity(header.params.len());
    for p in &header.params {
        values.push((p.name.clone(), read_array(&mut r, p.rows, p.cols)?));
    }
    let mut m = Vec::with_capacity(header.params.len());
    for p in &header.params {
        m.push(read_array(&mut r, p.rows, p.cols)?);
    }
    let mut v = Vec::with_capacity(header.params.len());
    for p in &header.params {
        v.push(read_array(&mut r, p.rows, p.cols)?);
    }
    Ok(Checkpoint {
        step: header.step,
        adam_t: header.adam_t,
        fingerprint: header.fingerprint,
        model: header.model,
        values,
        m,
        v,
    })
}

// ---------------------------------------------------------------------------
// Trainer

/// Model, parameters, contrastive heads, and optimizer for one run.
pub struct Trainer {
    pub run: RunConfig,
    pub params: Params<f32>,
    pub model: PolicyModel,
    pub head_vv: ContrastiveHead,
    pub head_vt: ContrastiveHead,
    pub opt: AdamW<f32>,
    /// Completed optimizer steps.
    pub step: usize,
}

impl Trainer {
    /// Fresh initialization from the run seed.
    pub fn new(run: &RunConfig) -> Result<Trainer> {
        run.validate()?;
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(run.train.seed);
        let vocab = vocabulary();
        let model = PolicyModel::new(&mut params, &mut rng, &run.model, &vocab);
        let head_vv = ContrastiveHead::new(&mut params, "loss.vv");
        let head_vt = ContrastiveHead::new(&mut params, "loss.vt");
        let opt = AdamW::new(&params, run.train.weight_decay);
        Ok(Trainer { run: run.clone(), params, model, head_vv, head_vt, opt, step: 0 })
    }

    /// In-memory snapshot equivalent to writing and reading back a
    /// checkpoint file.
    pub fn checkpoint(&self) -> Checkpoint {
        let (m, v) = self.opt.state_arrays();
        Checkpoint {
            step: self.step,
            adam_t: self.opt.t,
            fingerprint: self.run.fingerprint(),
            model: self.run.model.clone(),
            values: self
                .params
                .entries()
                .iter()
                .map(|e| (e.name.clone(), e.value.clone()))
                .collect(),
            m: m.to_vec(),
            v: v.to_vec(),
        }
    }

    /// Rebuilds a run mid-flight. The checkpoint must come from an identical
    /// config, otherwise the resumed trajectory could silently diverge.
    pub fn resume(run: &RunConfig, ckpt: &Checkpoint) -> Result<Trainer> {
        if ckpt.fingerprint != run.fingerprint() {
            return Err(Error::Config(format!(
                "checkpoint fingerprint {} does not match config fingerprint {}",
                ckpt.fingerprint,
                run.fingerprint()
            )));
        }
        let mut t = Trainer::new(run)?;
        t.restore(ckpt)?;
        Ok(t)
    }

    /// Overwrites parameters, moments, and the step counter from a
    /// checkpoint with matching parameter names and shapes.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.values.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} parameters, model has {}",
                ckpt.values.len(),
                self.params.len()
            )));
        }
        for (entry, (name, value)) in self.params.entries_mut().iter_mut().zip(&ckpt.values) {
            if entry.name != *name || entry.value.raw_dim() != value.raw_dim() {
                return Err(Error::Shape(format!(
                    "checkpoint parameter {name} {:?} does not match model {} {:?}",
                    value.raw_dim(),
                    entry.name,
                    entry.value.raw_dim()
                )));
            }
            entry.value.assign(value);
        }
        self.opt.restore(ckpt.adam_t, ckpt.m.clone(), ckpt.v.clone());
        self.step = ckpt.step;
        Ok(())
    }

    pub fn mask(&self) -> LossMask {
        LossMask {
            ce: self.run.train.loss_ce,
            tcc: self.run.train.loss_tcc,
            vvcl: self.run.train.loss_vvcl,
            vtcl: self.run.train.loss_vtcl,
        }
    }

    fn forward_losses(
        &mut self,
        batch: &BatchData,
        backward: bool,
    ) -> Result<(LossBundle, crate::policy::TrainActs<f32>)> {
        let ids: Vec<Vec<usize>> = batch
            .instructions
            .iter()
            .map(|s| self.model.text.tokenize(s))
            .collect::<Result<_>>()?;
        let patches = self.model.patchify_batch(batch.frames.view())?;
        let mask = self.mask();
        let (acts, caches) = self.model.train_forward(&self.params, &patches, &ids);
        let (bundle, grads) = training_losses(
            &mut self.params,
            &self.run.model,
            &acts,
            &batch.targets,
            &self.head_vv,
            &self.head_vt,
            mask,
        )?;
        if backward {
            self.model.train_backward(&mut self.params, &caches, &grads);
        }
        Ok((bundle, acts))
    }

    /// One optimizer step on an assembled batch. Returns the logged bundle
    /// and the learning rate that was applied.
    pub fn train_step(&mut self, batch: &BatchData) -> Result<(LossBundle, f64)> {
        let (bundle, _) = self.forward_losses(batch, true)?;
        self.params.clip_global_norm(self.run.train.grad_clip);
        let lr = lr_at(self.step + 1, &self.run.train);
        self.opt.step(&mut self.params, lr);
        self.params.zero_grads();
        self.step += 1;
        Ok((bundle, lr))
    }
}

// ---------------------------------------------------------------------------
// Validation

/// Metrics over deterministic held-out batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub step: usize,
    pub samples: usize,
    pub bundle: LossBundle,
    /// Top-1 bin accuracy per action dimension, over all horizon steps.
    pub bin_accuracy: Vec<f64>,
    /// Fraction of predictions within one bin of the target, per dimension.
    pub within_one: Vec<f64>,
    /// Mean top-1 accuracy over the mode and arm dimensions.
    pub arm_accuracy: f64,
}

/// Tallies per-dimension hits for `(rows, 256)` logits whose rows cycle
/// through the action dimensions fastest.
fn accuracy_tallies(
    logits: &Array2<f32>,
    targets: &[u16],
    hits: &mut [usize; ACTION_DIMS],
    near: &mut [usize; ACTION_DIMS],
    rows_per_dim: &mut usize,
) {
    assert_eq!(logits.nrows(), targets.len());
    for (r, row) in logits.rows().into_iter().enumerate() {
        let mut best = 0usize;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        let dim = r % ACTION_DIMS;
        let target = targets[r] as i64;
        if best as i64 == target {
            hits[dim] += 1;
        }
        if (best as i64 - target).abs() <= 1 {
            near[dim] += 1;
        }
    }
    *rows_per_dim += logits.nrows() / ACTION_DIMS;
}

/// Runs the model over deterministic validation batches and reports bin
/// accuracies plus the full loss bundle. Identical parameters always yield
/// identical metrics. Gradients are zeroed on exit.
pub fn validate(
    trainer: &mut Trainer,
    corpus: &Corpus,
    pairs: &[PromptPair],
    batch_size: usize,
) -> Result<ValMetrics> {
    let ranges = ActionRanges::default_for(trainer.run.env.workspace);
    let mut sampler = BatchSampler::new(corpus, pairs, ranges, &trainer.run.model, 0)?;
    let batches = VAL_SAMPLES.div_ceil(batch_size).min(16);
    let mut hits = [0usize; ACTION_DIMS];
    let mut near = [0usize; ACTION_DIMS];
    let mut rows_per_dim = 0usize;
    let mut sums = [0.0f64; 5];
    for bi in 0..batches {
        sampler.reseed(step_seed(trainer.run.train.seed, bi, SALT_VAL));
        let batch = sampler.next_batch(batch_size)?;
        let (bundle, acts) = trainer.forward_losses(&batch, false)?;
        sums[0] += bundle.l_ce;
        sums[1] += bundle.l_tcc;
        sums[2] += bundle.l_vvcl;
        sums[3] += bundle.l_vtcl;
        sums[4] += bundle.total;
        accuracy_tallies(&acts.logits, &batch.targets, &mut hits, &mut near, &mut rows_per_dim);
    }
    // The loss helpers accumulated head gradients; validation must not
    // leave any behind.
    trainer.params.zero_grads();
    let n = batches as f64;
    let bundle = LossBundle {
        l_ce: sums[0] / n,
        l_tcc: sums[1] / n,
        l_vvcl: sums[2] / n,
        l_vtcl: sums[3] / n,
        total: sums[4] / n,
    };
    let bin_accuracy: Vec<f64> =
        hits.iter().map(|&h| h as f64 / rows_per_dim as f64).collect();
    let within_one: Vec<f64> =
        near.iter().map(|&h| h as f64 / rows_per_dim as f64).collect();
    let arm_accuracy = bin_accuracy[..ARM_DIMS].iter().sum::<f64>() / ARM_DIMS as f64;
    Ok(ValMetrics {
        step: trainer.step,
        samples: batches * batch_size,
        bundle,
        bin_accuracy,
        within_one,
        arm_accuracy,
    })
}

// ---------------------------------------------------------------------------
// Metrics log

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub l_ce: f64,
    pub l_tcc: f64,
    pub l_vvcl: f64,
    pub l_vtcl: f64,
    pub total: f64,
    pub lr: f64,
}

struct MetricsLog {
    w: BufWriter<fs::File>,
}

impl MetricsLog {
    fn append(path: &Path) -> Result<MetricsLog> {
        let file = fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(MetricsLog { w: BufWriter::new(file) })
    }

    fn write_row(&mut self, row: &MetricsRow) -> Result<()> {
        serde_json::to_writer(&mut self.w, row)?;
        self.w.write_all(b"\n")?;
        self.w.flush()?;
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, value: &T) -> Result<()> {
        serde_json::to_writer(&mut self.w, value)?;
        self.w.write_all(b"\n")?;
        self.w.flush()?;
        Ok(())
    }
}

/// Parses a metrics log written by [`train`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path)?;
    text.lines().map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Parses a validation log written by [`train`].
pub fn read_val_metrics(path: &Path) -> Result<Vec<ValMetrics>> {
    let text = fs::read_to_string(path)?;
    text.lines().map(|l| Ok(serde_json::from_str(l)?)).collect()
}

// ---------------------------------------------------------------------------
// Training loop

/// Artifact paths of a finished run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub final_checkpoint: PathBuf,
    /// Checkpoint with the lowest held-out action cross-entropy, when
    /// validation ran at least once.
    pub best_checkpoint: Option<PathBuf>,
    pub metrics: PathBuf,
    pub last_bundle: Option<LossBundle>,
}

fn dump_bad_batch(out_dir: &Path, step: usize, batch: &BatchData, err: &Error) -> PathBuf {
    let path = out_dir.join(format!("bad_batch_step{step}.json"));
    let frames = &batch.frames;
    let stats = serde_json::json!({
        "step": step,
        "error": err.to_string(),
        "instructions": batch.instructions,
        "pair_indices": batch.pair_indices,
        "timesteps": batch.timesteps,
        "targets": batch.targets,
        "frame_min": frames.iter().cloned().fold(f32::INFINITY, f32::min),
        "frame_max": frames.iter().cloned().fold(f32::NEG_INFINITY, f32::max),
        "frame_mean": frames.mean().unwrap_or(0.0),
    });
    let _ = fs::write(&path, serde_json::to_string_pretty(&stats).unwrap_or_default());
    path
}

/// Runs (or resumes) a full training job against a generated corpus,
/// writing `config.txt`, `metrics.jsonl`, `val.jsonl`, and checkpoints
/// under `out_dir`. The loop is deterministic given (seed, config,
/// manifest): resuming from the step-k checkpoint reproduces the
/// uninterrupted run bitwise.
pub fn train(
    run: &RunConfig,
    corpus_root: &Path,
    out_dir: &Path,
    resume_from: Option<&Path>,
) -> Result<TrainOutcome> {
    run.validate()?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.txt"), run.to_kv_text())?;
    let corpus = Corpus::load(corpus_root)?;
    let tc = run.train.clone();
    let pairs = pair_episodes_weighted(
        &corpus.manifest,
        Split::Train,
        PROMPTS_PER_EPISODE,
        tc.mixture(),
        step_seed(tc.seed, 0, SALT_PAIRS),
    )?;
    let val_pairs = pair_episodes_weighted(
        &corpus.manifest,
        Split::Val,
        PROMPTS_PER_EPISODE,
        tc.mixture(),
        step_seed(tc.seed, 1, SALT_PAIRS),
    )
    .ok();
    let mut trainer = match resume_from {
        Some(p) => Trainer::resume(run, &load_checkpoint(p)?)?,
        None => Trainer::new(run)?,
    };
    let ranges = ActionRanges::default_for(run.env.workspace);
    let mut sampler = BatchSampler::new(&corpus, &pairs, ranges, &run.model, 0)?;
    let mut log = MetricsLog::append(&out_dir.join("metrics.jsonl"))?;
    let mut val_log = MetricsLog::append(&out_dir.join("val.jsonl"))?;
    let final_path = out_dir.join("final.ckpt");
    let last_path = out_dir.join("last.ckpt");
    let best_path = out_dir.join("best.ckpt");
    let mut best_ce = f64::INFINITY;
    let mut wrote_best = false;
    let mut last_bundle = None;
    let started = Instant::now();
    while trainer.step < tc.steps {
        let step_now = trainer.step + 1;
        sampler.reseed(step_seed(tc.seed, step_now, SALT_BATCH));
        let batch = sampler.next_batch(tc.batch_size)?;
        let (bundle, lr) = match trainer.train_step(&batch) {
            Ok(out) => out,
            Err(err) => {
                let dump = dump_bad_batch(out_dir, step_now, &batch, &err);
                return Err(Error::NonFinite {
                    step: step_now,
                    detail: format!("{err}; offending batch dumped to {}", dump.display()),
                });
            }
        };
        log.write_row(&MetricsRow {
            step: step_now,
            l_ce: bundle.l_ce,
            l_tcc: bundle.l_tcc,
            l_vvcl: bundle.l_vvcl,
            l_vtcl: bundle.l_vtcl,
            total: bundle.total,
            lr,
        })?;
        last_bundle = Some(bundle);
        if step_now == 1 || step_now % 50 == 0 {
            eprintln!(
                "step {step_now}/{} total {:.4} ce {:.4} lr {lr:.3e} [{:.0}s]",
                tc.steps,
                bundle.total,
                bundle.l_ce,
                started.elapsed().as_secs_f64()
            );
        }
        if step_now % tc.val_every == 0 {
            if let Some(vp) = &val_pairs {
                let vm = validate(&mut trainer, &corpus, vp, tc.batch_size)?;
                eprintln!(
                    "  val @{step_now}: ce {:.4} arm acc {:.3}",
                    vm.bundle.l_ce, vm.arm_accuracy
                );
                val_log.write_json(&vm)?;
                if vm.bundle.l_ce < best_ce {
                    best_ce = vm.bundle.l_ce;
                    save_checkpoint(&best_path, run, &trainer.params, &trainer.opt, trainer.step)?;
                    wrote_best = true;
                }
            }
        }
        if step_now % tc.ckpt_every == 0 {
            save_checkpoint(&last_path, run, &trainer.params, &trainer.opt, trainer.step)?;
        }
    }
    save_checkpoint(&final_path, run, &trainer.params, &trainer.opt, trainer.step)?;
    Ok(TrainOutcome {
        out_dir: out_dir.to_path_buf(),
        final_checkpoint: final_path,
        best_checkpoint: wrote_best.then_some(best_path),
        metrics: out_dir.join("metrics.jsonl"),
        last_bundle,
    })
}
