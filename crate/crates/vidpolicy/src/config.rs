//! Flat `key = value` configuration files and the preset tables.
//!
//! Every run is fully described by three blocks: environment, model and
//! training. Each block round-trips through a plain-text format with one
//! `key = value` pair per line, `#` comments, and no nesting; unknown keys
//! are rejected so typos fail loudly instead of silently using a default.

use crate::actionspace::ActionRanges;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

/// Parses flat `key = value` text into an ordered map.
///
/// Blank lines and lines starting with `#` are skipped. Values keep their
/// raw textual form; typed accessors live on [`KvMap`].
pub fn parse_kv(text: &str) -> Result<KvMap> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected `key = value`, got {raw:?}",
                lineno + 1
            )));
        };
        let key = key.trim().to_string();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
        }
        if map.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(Error::Config(format!(
                "line {}: duplicate key {key:?}",
                lineno + 1
            )));
        }
    }
    Ok(KvMap { map })
}

/// An ordered `key = value` map with typed, consumption-tracking accessors.
#[derive(Debug, Clone)]
pub struct KvMap {
    map: BTreeMap<String, String>,
}

impl KvMap {
    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    fn take_raw(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    pub fn take_string(&mut self, key: &str, default: &str) -> String {
        self.take_raw(key).unwrap_or_else(|| default.to_string())
    }

    pub fn take_f64(&mut self, key: &str, default: f64) -> Result<f64> {
        match self.take_raw(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| Error::Config(format!("key {key:?}: expected a number, got {s:?}"))),
        }
    }

    pub fn take_usize(&mut self, key: &str, default: usize) -> Result<usize> {
        match self.take_raw(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| Error::Config(format!("key {key:?}: expected an integer, got {s:?}"))),
        }
    }

    pub fn take_u64(&mut self, key: &str, default: u64) -> Result<u64> {
        match self.take_raw(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| Error::Config(format!("key {key:?}: expected an integer, got {s:?}"))),
        }
    }

    pub fn take_bool(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.take_raw(key) {
            None => Ok(default),
            Some(s) => match s.as_str() {
                "true" | "1" => Ok(true),
                "false" | "0" => Ok(false),
                _ => Err(Error::Config(format!(
                    "key {key:?}: expected true/false, got {s:?}"
                ))),
            },
        }
    }

    /// Fails if any key was never consumed by an accessor.
    pub fn finish(self) -> Result<()> {
        if let Some(key) = self.map.keys().next() {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        Ok(())
    }
}

/// Simulator and data-generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    /// Named preset this config was derived from.
    pub preset: String,
    /// Square workspace half. Positions live in `[0, workspace]^2`.
    pub workspace: f64,
    /// Rendered frame side length in pixels.
    pub frame_size: usize,
    /// Gripper displacement per step for the robot style; the human-like
    /// style multiplies this by its speed factor.
    pub robot_speed: f64,
    /// Speed multiplier for the human-like style (> 1: faster playback).
    pub human_speed_factor: f64,
    /// Rollout length cap in control steps.
    pub max_steps: usize,
    /// Distance within which a closing gripper binds to an object.
    pub grasp_radius: f64,
    /// Distance within which place / move-near targets count as reached.
    pub place_radius: f64,
    /// Number of distractor objects sampled per scene, inclusive range.
    pub distractors_min: usize,
    pub distractors_max: usize,
}

impl EnvConfig {
    pub fn preset(name: &str) -> Result<EnvConfig> {
        match name {
            "desk" => Ok(EnvConfig {
                preset: "desk".to_string(),
                workspace: 1.0,
                frame_size: 48,
                robot_speed: 0.035,
                human_speed_factor: 1.3,
                max_steps: 180,
                grasp_radius: 0.07,
                place_radius: 0.08,
                distractors_min: 0,
                distractors_max: 2,
            }),
            "paper" => Ok(EnvConfig {
                preset: "paper".to_string(),
                frame_size: 224,
                ..EnvConfig::preset("desk")?
            }),
            _ => Err(Error::Config(format!("unknown env preset {name:?}"))),
        }
    }

    pub fn from_kv(mut kv: KvMap) -> Result<EnvConfig> {
        let preset = kv.take_string("preset", "desk");
        let base = EnvConfig::preset(&preset)?;
        let cfg = EnvConfig {
            preset,
            workspace: kv.take_f64("workspace", base.workspace)?,
            frame_size: kv.take_usize("frame_size", base.frame_size)?,
            robot_speed: kv.take_f64("robot_speed", base.robot_speed)?,
            human_speed_factor: kv.take_f64("human_speed_factor", base.human_speed_factor)?,
            max_steps: kv.take_usize("max_steps", base.max_steps)?,
            grasp_radius: kv.take_f64("grasp_radius", base.grasp_radius)?,
            place_radius: kv.take_f64("place_radius", base.place_radius)?,
            distractors_min: kv.take_usize("distractors_min", base.distractors_min)?,
            distractors_max: kv.take_usize("distractors_max", base.distractors_max)?,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.workspace <= 0.0 {
            return Err(Error::Config("workspace must be positive".into()));
        }
        if self.frame_size < 16 {
            return Err(Error::Config("frame_size must be at least 16".into()));
        }
        if !(self.robot_speed > 0.0 && self.robot_speed < self.workspace) {
            return Err(Error::Config("robot_speed must be in (0, workspace)".into()));
        }
        if !(self.human_speed_factor >= 1.0) {
            return Err(Error::Config("human_speed_factor must be at least 1".into()));
        }
        if self.max_steps < 4 {
            return Err(Error::Config("max_steps must be at least 4".into()));
        }
        if self.distractors_min > self.distractors_max {
            return Err(Error::Config(
                "distractors_min must not exceed distractors_max".into(),
            ));
        }
        Ok(())
    }

    /// Action ranges induced by this environment.
    pub fn action_ranges(&self) -> ActionRanges {
        ActionRanges::default_for(self.workspace)
    }

    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "preset = {}", self.preset);
        let _ = writeln!(s, "workspace = {}", self.workspace);
        let _ = writeln!(s, "frame_size = {}", self.frame_size);
        let _ = writeln!(s, "robot_speed = {}", self.robot_speed);
        let _ = writeln!(s, "human_speed_factor = {}", self.human_speed_factor);
        let _ = writeln!(s, "max_steps = {}", self.max_steps);
        let _ = writeln!(s, "grasp_radius = {}", self.grasp_radius);
        let _ = writeln!(s, "place_radius = {}", self.place_radius);
        let _ = writeln!(s, "distractors_min = {}", self.distractors_min);
        let _ = writeln!(s, "distractors_max = {}", self.distractors_max);
        s
    }
}

/// Architecture hyperparameters shared by every network component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: String,
    /// Input frame side length; must match the environment's `frame_size`.
    pub frame_size: usize,
    /// Square patch side for the frame encoder.
    pub patch_size: usize,
    /// Token width used everywhere outside the alignment head.
    pub dim: usize,
    /// Per-frame encoder depth.
    pub vit_layers: usize,
    /// Per-frame encoder MLP expansion ratio.
    pub vit_mlp_ratio: usize,
    /// Attention heads in every attention block.
    pub heads: usize,
    /// Latent count for each perceiver resampler.
    pub latents: usize,
    /// Resampler depth (cross-attend + self-attend per layer).
    pub resampler_layers: usize,
    /// State-prompt fusion depth.
    pub fusion_layers: usize,
    /// Action decoder depth.
    pub decoder_layers: usize,
    /// Prompt video frames fed to the prompt branch.
    pub prompt_frames: usize,
    /// Recent robot frames fed to the state branch.
    pub state_frames: usize,
    /// Prediction horizon: action steps decoded per forward pass.
    pub horizon: usize,
    /// Width of the temporal-alignment projector output.
    pub align_dim: usize,
}

impl ModelConfig {
    pub fn preset(name: &str) -> Result<ModelConfig> {
        match name {
            "desk" => Ok(ModelConfig {
                preset: "desk".to_string(),
                frame_size: 48,
                patch_size: 8,
                dim: 128,
                vit_layers: 1,
                vit_mlp_ratio: 2,
                heads: 4,
                latents: 16,
                resampler_layers: 1,
                fusion_layers: 2,
                decoder_layers: 2,
                prompt_frames: 12,
                state_frames: 8,
                horizon: 4,
                align_dim: 64,
            }),
            "paper" => Ok(ModelConfig {
                preset: "paper".to_string(),
                frame_size: 224,
                patch_size: 16,
                dim: 768,
                vit_layers: 12,
                vit_mlp_ratio: 4,
                heads: 12,
                latents: 64,
                resampler_layers: 2,
                fusion_layers: 4,
                decoder_layers: 4,
                prompt_frames: 16,
                state_frames: 8,
                horizon: 4,
                align_dim: 384,
            }),
            _ => Err(Error::Config(format!("unknown model preset {name:?}"))),
        }
    }

    pub fn from_kv(mut kv: KvMap) -> Result<ModelConfig> {
        let preset = kv.take_string("preset", "desk");
        let base = ModelConfig::preset(&preset)?;
        let cfg = ModelConfig {
            preset,
            frame_size: kv.take_usize("frame_size", base.frame_size)?,
            patch_size: kv.take_usize("patch_size", base.patch_size)?,
            dim: kv.take_usize("dim", base.dim)?,
            vit_layers: kv.take_usize("vit_layers", base.vit_layers)?,
            vit_mlp_ratio: kv.take_usize("vit_mlp_ratio", base.vit_mlp_ratio)?,
            heads: kv.take_usize("heads", base.heads)?,
            latents: kv.take_usize("latents", base.latents)?,
            resampler_layers: kv.take_usize("resampler_layers", base.resampler_layers)?,
            fusion_layers: kv.take_usize("fusion_layers", base.fusion_layers)?,
            decoder_layers: kv.take_usize("decoder_layers", base.decoder_layers)?,
            prompt_frames: kv.take_usize("prompt_frames", base.prompt_frames)?,
            state_frames: kv.take_usize("state_frames", base.state_frames)?,
            horizon: kv.take_usize("horizon", base.horizon)?,
            align_dim: kv.take_usize("align_dim", base.align_dim)?,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.frame_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "patch_size {} must divide frame_size {}",
                self.patch_size, self.frame_size
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads {} must divide dim {}",
                self.heads, self.dim
            )));
        }
        if self.prompt_frames < 2 {
            return Err(Error::Config("prompt_frames must be at least 2".into()));
        }
        if self.state_frames == 0 {
            return Err(Error::Config("state_frames must be positive".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        for (name, v) in [
            ("dim", self.dim),
            ("vit_layers", self.vit_layers),
            ("latents", self.latents),
            ("resampler_layers", self.resampler_layers),
            ("fusion_layers", self.fusion_layers),
            ("decoder_layers", self.decoder_layers),
            ("align_dim", self.align_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Patch tokens per frame.
    pub fn tokens_per_frame(&self) -> usize {
        let side = self.frame_size / self.patch_size;
        side * side
    }

    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "preset = {}", self.preset);
        let _ = writeln!(s, "frame_size = {}", self.frame_size);
        let _ = writeln!(s, "patch_size = {}", self.patch_size);
        let _ = writeln!(s, "dim = {}", self.dim);
        let _ = writeln!(s, "vit_layers = {}", self.vit_layers);
        let _ = writeln!(s, "vit_mlp_ratio = {}", self.vit_mlp_ratio);
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "latents = {}", self.latents);
        let _ = writeln!(s, "resampler_layers = {}", self.resampler_layers);
        let _ = writeln!(s, "fusion_layers = {}", self.fusion_layers);
        let _ = writeln!(s, "decoder_layers = {}", self.decoder_layers);
        let _ = writeln!(s, "prompt_frames = {}", self.prompt_frames);
        let _ = writeln!(s, "state_frames = {}", self.state_frames);
        let _ = writeln!(s, "horizon = {}", self.horizon);
        let _ = writeln!(s, "align_dim = {}", self.align_dim);
        s
    }
}

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub preset: String,
    pub batch_size: usize,
    pub steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub final_lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Seed governing init, batch sampling and augmentation.
    pub seed: u64,
    /// Validation cadence in steps.
    pub val_every: usize,
    /// Checkpoint cadence in steps.
    pub ckpt_every: usize,
    /// Which of the four losses are active, as a comma-free flag quartet.
    pub loss_ce: bool,
    pub loss_tcc: bool,
    pub loss_vvcl: bool,
    pub loss_vtcl: bool,
    /// Prompt-source mixture weights used when pairing episodes.
    pub mix_robot_robot: f64,
    pub mix_hindsight: f64,
    pub mix_colocated: f64,
}

impl TrainConfig {
    pub fn preset(name: &str) -> Result<TrainConfig> {
        match name {
            "desk" => Ok(TrainConfig {
                preset: "desk".to_string(),
                batch_size: 24,
                steps: 5000,
                warmup_steps: 200,
                peak_lr: 3e-4,
                final_lr: 1e-5,
                weight_decay: 1e-4,
                grad_clip: 1.0,
                seed: 0,
                val_every: 500,
                ckpt_every: 1000,
                loss_ce: true,
                loss_tcc: true,
                loss_vvcl: true,
                loss_vtcl: true,
                mix_robot_robot: 0.90,
                mix_hindsight: 0.05,
                mix_colocated: 0.05,
            }),
            "paper" => Ok(TrainConfig {
                preset: "paper".to_string(),
                batch_size: 2048,
                steps: 200_000,
                warmup_steps: 2000,
                peak_lr: 8e-5,
                final_lr: 1e-6,
                ..TrainConfig::preset("desk")?
            }),
            _ => Err(Error::Config(format!("unknown train preset {name:?}"))),
        }
    }

    pub fn from_kv(mut kv: KvMap) -> Result<TrainConfig> {
        let preset = kv.take_string("preset", "desk");
        let base = TrainConfig::preset(&preset)?;
        let cfg = TrainConfig {
            preset,
            batch_size: kv.take_usize("batch_size", base.batch_size)?,
            steps: kv.take_usize("steps", base.steps)?,
            warmup_steps: kv.take_usize("warmup_steps", base.warmup_steps)?,
            peak_lr: kv.take_f64("peak_lr", base.peak_lr)?,
            final_lr: kv.take_f64("final_lr", base.final_lr)?,
            weight_decay: kv.take_f64("weight_decay", base.weight_decay)?,
            grad_clip: kv.take_f64("grad_clip", base.grad_clip)?,
            seed: kv.take_u64("seed", base.seed)?,
            val_every: kv.take_usize("val_every", base.val_every)?,
            ckpt_every: kv.take_usize("ckpt_every", base.ckpt_every)?,
            loss_ce: kv.take_bool("loss_ce", base.loss_ce)?,
            loss_tcc: kv.take_bool("loss_tcc", base.loss_tcc)?,
            loss_vvcl: kv.take_bool("loss_vvcl", base.loss_vvcl)?,
            loss_vtcl: kv.take_bool("loss_vtcl", base.loss_vtcl)?,
            mix_robot_robot: kv.take_f64("mix_robot_robot", base.mix_robot_robot)?,
            mix_hindsight: kv.take_f64("mix_hindsight", base.mix_hindsight)?,
            mix_colocated: kv.take_f64("mix_colocated", base.mix_colocated)?,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.warmup_steps >= self.steps {
            return Err(Error::Config(format!(
                "warmup_steps {} must be below steps {}",
                self.warmup_steps, self.steps
            )));
        }
        if !(self.peak_lr > 0.0) || !(self.final_lr >= 0.0) || self.final_lr > self.peak_lr {
            return Err(Error::Config(
                "need 0 <= final_lr <= peak_lr and peak_lr > 0".into(),
            ));
        }
        if !(self.loss_ce || self.loss_tcc || self.loss_vvcl || self.loss_vtcl) {
            return Err(Error::Config("at least one loss must be active".into()));
        }
        if self.val_every == 0 || self.ckpt_every == 0 {
            return Err(Error::Config("val_every and ckpt_every must be positive".into()));
        }
        let mix = self.mixture();
        if mix.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) || mix.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(
                "mixture weights must be non-negative with a positive sum".into(),
            ));
        }
        Ok(())
    }

    /// Mixture weights ordered robot-robot, hindsight, co-located.
    pub fn mixture(&self) -> [f64; 3] {
        [self.mix_robot_robot, self.mix_hindsight, self.mix_colocated]
    }

    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "preset = {}", self.preset);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "warmup_steps = {}", self.warmup_steps);
        let _ = writeln!(s, "peak_lr = {}", self.peak_lr);
        let _ = writeln!(s, "final_lr = {}", self.final_lr);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "grad_clip = {}", self.grad_clip);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "val_every = {}", self.val_every);
        let _ = writeln!(s, "ckpt_every = {}", self.ckpt_every);
        let _ = writeln!(s, "loss_ce = {}", self.loss_ce);
        let _ = writeln!(s, "loss_tcc = {}", self.loss_tcc);
        let _ = writeln!(s, "loss_vvcl = {}", self.loss_vvcl);
        let _ = writeln!(s, "loss_vtcl = {}", self.loss_vtcl);
        let _ = writeln!(s, "mix_robot_robot = {}", self.mix_robot_robot);
        let _ = writeln!(s, "mix_hindsight = {}", self.mix_hindsight);
        let _ = writeln!(s, "mix_colocated = {}", self.mix_colocated);
        s
    }
}

/// The three config blocks that fully describe a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<RunConfig> {
        Ok(RunConfig {
            env: EnvConfig::preset(name)?,
            model: ModelConfig::preset(name)?,
            train: TrainConfig::preset(name)?,
        })
    }

    /// Loads a combined file where keys are prefixed `env.` / `model.` /
    /// `train.`, then applies `overrides` in the same dotted form.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)?;
            let mut kv = parse_kv(&text)?;
            for (k, v) in std::mem::take(&mut kv.map) {
                pairs.push((k, v));
            }
        }
        pairs.extend(overrides.iter().cloned());
        RunConfig::from_dotted(pairs)
    }

    pub fn from_dotted(pairs: Vec<(String, String)>) -> Result<RunConfig> {
        let mut env = BTreeMap::new();
        let mut model = BTreeMap::new();
        let mut train = BTreeMap::new();
        for (key, value) in pairs {
            let Some((block, sub)) = key.split_once('.') else {
                return Err(Error::Config(format!(
                    "key {key:?} must be prefixed env. / model. / train."
                )));
            };
            let target = match block {
                "env" => &mut env,
                "model" => &mut model,
                "train" => &mut train,
                _ => {
                    return Err(Error::Config(format!(
                        "unknown config block {block:?} in key {key:?}"
                    )))
                }
            };
            target.insert(sub.to_string(), value);
        }
        let wrap = |map: BTreeMap<String, String>| KvMap { map };
        let cfg = RunConfig {
            env: EnvConfig::from_kv(wrap(env))?,
            model: ModelConfig::from_kv(wrap(model))?,
            train: TrainConfig::from_kv(wrap(train))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.env.frame_size != self.model.frame_size {
            return Err(Error::Config(format!(
                "env frame_size {} must equal model frame_size {}",
                self.env.frame_size, self.model.frame_size
            )));
        }
        Ok(())
    }

    /// Every resolved value in dotted flat form, the text echoed by the CLI
    /// and written next to checkpoints.
    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        for line in self.env.to_kv_text().lines() {
            let _ = writeln!(s, "env.{line}");
        }
        for line in self.model.to_kv_text().lines() {
            let _ = writeln!(s, "model.{line}");
        }
        for line in self.train.to_kv_text().lines() {
            let _ = writeln!(s, "train.{line}");
        }
        s
    }

    /// Dotted keys whose resolved values differ between two configs. Both
    /// sides always render the same key set, so a zip suffices.
    pub fn diff(&self, other: &RunConfig) -> Vec<String> {
        self.to_kv_text()
            .lines()
            .zip(other.to_kv_text().lines())
            .filter(|(a, b)| a != b)
            .map(|(a, _)| a.split('=').next().unwrap_or(a).trim().to_string())
            .collect()
    }

    /// Stable fingerprint of the resolved config, used to name artifacts.
    pub fn fingerprint(&self) -> String {
        let text = self.to_kv_text();
        // FNV-1a, 64-bit: stable across platforms and runs.
        let mut h: u64 = 0xcbf29ce484222325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_kv_skips_comments_and_blanks() {
        let kv = parse_kv("# header\n\n a = 1 \nb=two\n").unwrap();
        let mut kv = kv;
        assert_eq!(kv.take_f64("a", 0.0).unwrap(), 1.0);
        assert_eq!(kv.take_string("b", ""), "two");
        kv.finish().unwrap();
    }

    #[test]
    fn parse_kv_rejects_malformed_and_duplicate_lines() {
        assert!(parse_kv("just words").is_err());
        assert!(parse_kv("a = 1\na = 2\n").is_err());
        assert!(parse_kv("= 3\n").is_err());
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let kv = parse_kv("presett = desk\n").unwrap();
        let err = EnvConfig::from_kv(kv).unwrap_err();
        assert!(err.to_string().contains("presett"), "got: {err}");
    }

    #[test]
    fn env_preset_round_trips_through_text() {
        let cfg = EnvConfig::preset("desk").unwrap();
        let kv = parse_kv(&cfg.to_kv_text()).unwrap();
        assert_eq!(EnvConfig::from_kv(kv).unwrap(), cfg);
    }

    #[test]
    fn model_presets_match_published_scale() {
        let p = ModelConfig::preset("paper").unwrap();
        assert_eq!((p.frame_size, p.patch_size), (224, 16));
        assert_eq!(p.tokens_per_frame(), 196);
        assert_eq!((p.dim, p.latents, p.heads), (768, 64, 12));
        assert_eq!((p.fusion_layers, p.decoder_layers), (4, 4));
        assert_eq!((p.prompt_frames, p.state_frames), (16, 8));

        let d = ModelConfig::preset("desk").unwrap();
        assert_eq!((d.frame_size, d.patch_size), (48, 8));
        assert_eq!(d.tokens_per_frame(), 36);
        assert_eq!((d.dim, d.latents), (128, 16));
    }

    #[test]
    fn train_presets_match_published_schedule() {
        let p = TrainConfig::preset("paper").unwrap();
        assert_eq!(p.batch_size, 2048);
        assert_eq!(p.steps, 200_000);
        assert_eq!(p.warmup_steps, 2000);
        assert_eq!(p.peak_lr, 8e-5);
        assert_eq!(p.final_lr, 1e-6);

        let d = TrainConfig::preset("desk").unwrap();
        assert_eq!(d.batch_size, 24);
        assert_eq!(d.peak_lr, 3e-4);
        assert_eq!(d.warmup_steps, 200);
        assert!((5000..=20000).contains(&d.steps));
    }

    #[test]
    fn dotted_overrides_apply_and_validate() {
        let cfg = RunConfig::from_dotted(vec![
            ("train.seed".into(), "7".into()),
            ("model.dim".into(), "64".into()),
        ])
        .unwrap();
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.model.dim, 64);

        let err = RunConfig::from_dotted(vec![("model.dim".into(), "65".into())]).unwrap_err();
        assert!(err.to_string().contains("heads"), "got: {err}");

        let err =
            RunConfig::from_dotted(vec![("env.frame_size".into(), "32".into())]).unwrap_err();
        assert!(err.to_string().contains("frame_size"), "got: {err}");
    }

    #[test]
    fn run_config_round_trips_and_fingerprint_is_stable() {
        let cfg = RunConfig::preset("desk").unwrap();
        let pairs: Vec<(String, String)> = cfg
            .to_kv_text()
            .lines()
            .map(|l| {
                let (k, v) = l.split_once('=').unwrap();
                (k.trim().to_string(), v.trim().to_string())
            })
            .collect();
        let back = RunConfig::from_dotted(pairs).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.fingerprint(), cfg.fingerprint());

        let mut other = cfg.clone();
        other.train.seed = 1;
        assert_ne!(other.fingerprint(), cfg.fingerprint());
    }

    #[test]
    fn schedule_bounds_are_validated() {
        let mut t = TrainConfig::preset("desk").unwrap();
        t.warmup_steps = t.steps;
        assert!(t.validate().is_err());
        let mut t = TrainConfig::preset("desk").unwrap();
        t.final_lr = t.peak_lr * 2.0;
        assert!(t.validate().is_err());
        let mut t = TrainConfig::preset("desk").unwrap();
        t.loss_ce = false;
        t.loss_tcc = false;
        t.loss_vvcl = false;
        t.loss_vtcl = false;
        assert!(t.validate().is_err());
    }
}
