//! Paired-demonstration corpus: on-disk episode store, prompt pairing,
//! frame sampling, photometric augmentation, and training batch assembly.
//!
//! On disk a corpus is one directory per episode holding `frames.png`
//! (every frame stacked vertically into a single losslessly compressed
//! strip) and `meta.json` (instruction, task, style, seed, milestones,
//! and the action sequence as decimal lists). A `manifest.json` at the
//! corpus root lists every episode with its train/val split plus the
//! prompt-source mixture buckets used when pairing.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array4};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::actionspace::{
    encode, ActionRanges, ActionVector, DiscretizedAction, ACTION_DIMS,
};
use crate::config::{EnvConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::simenv::{
    catalog, expert_episode_with_roster, ColorName, EmbodimentStyle, Episode,
    Milestones, ObjectSpec, Shape, TaskSpec, Template,
};

/// Prompts sampled per robot episode when building the pair list.
pub const PROMPTS_PER_EPISODE: usize = 3;

/// Nominal prompt-source mixture: robot-robot, hindsight, co-located.
pub const MIXTURE_WEIGHTS: [f64; 3] = [0.90, 0.05, 0.05];

/// One episode index in ten goes to the validation split.
const VAL_STRIDE: usize = 10;

// ---------------------------------------------------------------------------
// Episode store

/// Everything about an episode except its pixels, stored human-readable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub instruction: String,
    pub task: TaskSpec,
    pub style: EmbodimentStyle,
    pub seed: u64,
    pub num_frames: usize,
    pub frame_size: usize,
    pub milestones: Milestones,
    /// One row per control step, eleven decimal slots each.
    pub actions: Vec<Vec<f64>>,
}

/// An episode loaded back from disk: metadata plus `(T, H, W, 3)` u8 frames.
#[derive(Debug, Clone)]
pub struct StoredEpisode {
    pub meta: EpisodeMeta,
    pub frames: Array4<u8>,
}

impl StoredEpisode {
    /// Reconstructs the typed action sequence from the decimal slot lists.
    pub fn action_vectors(&self) -> Result<Vec<ActionVector>> {
        self.meta
            .actions
            .iter()
            .map(|row| {
                let slots: [f64; ACTION_DIMS] = row.as_slice().try_into().map_err(|_| {
                    Error::Input(format!(
                        "action row has {} slots, expected {ACTION_DIMS}",
                        row.len()
                    ))
                })?;
                Ok(ActionVector::from_slots(&slots))
            })
            .collect()
    }
}

/// Writes one episode directory: `frames.png` plus `meta.json`.
pub fn save_episode(dir: &Path, ep: &Episode) -> Result<()> {
    if ep.frames.is_empty() {
        return Err(Error::Input("cannot save an episode with no frames".into()));
    }
    let size = ep.frames[0].shape()[0];
    if ep.frames[0].shape() != [size, size, 3] {
        return Err(Error::Shape(format!(
            "expected square RGB frames, got {:?}",
            ep.frames[0].shape()
        )));
    }
    fs::create_dir_all(dir)?;
    let t = ep.frames.len();
    let mut raw = Vec::with_capacity(t * size * size * 3);
    for f in &ep.frames {
        for v in f.iter() {
            raw.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    image::save_buffer(
        dir.join("frames.png"),
        &raw,
        size as u32,
        (t * size) as u32,
        image::ExtendedColorType::Rgb8,
    )?;
    let meta = EpisodeMeta {
        instruction: ep.instruction.clone(),
        task: ep.task.clone(),
        style: ep.style.clone(),
        seed: ep.seed,
        num_frames: t,
        frame_size: size,
        milestones: ep.milestones,
        actions: ep.actions.iter().map(|a| a.slots().to_vec()).collect(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Reads one episode directory back into memory.
pub fn load_episode(dir: &Path) -> Result<StoredEpisode> {
    let meta: EpisodeMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    let img = image::open(dir.join("frames.png"))?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w != meta.frame_size || h != meta.num_frames * meta.frame_size {
        return Err(Error::Shape(format!(
            "frame strip is {w}x{h}, metadata expects {}x{}",
            meta.frame_size,
            meta.num_frames * meta.frame_size
        )));
    }
    let frames = Array4::from_shape_vec(
        (meta.num_frames, meta.frame_size, meta.frame_size, 3),
        img.into_raw(),
    )
    .map_err(|e| Error::Shape(e.to_string()))?;
    Ok(StoredEpisode { meta, frames })
}

// ---------------------------------------------------------------------------
// Manifest

/// Which slice of the corpus an episode belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
}

/// How a prompt video relates to the robot episode it is paired with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairSource {
    /// Another robot demonstration of the same instruction, different seed.
    RobotRobot,
    /// A human-style demonstration of the same instruction, different seed.
    Hindsight,
    /// A human-style demonstration captured at the same seed, so both halves
    /// show the identical scene layout.
    CoLocated,
}

impl PairSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            PairSource::RobotRobot => "robot-robot",
            PairSource::Hindsight => "hindsight",
            PairSource::CoLocated => "co-located",
        }
    }
}

/// One prompt-source bucket: its nominal sampling weight and how many
/// ordered pairs the training split can actually supply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureBucket {
    pub source: PairSource,
    pub weight: f64,
    pub available: usize,
}

/// One corpus episode as listed in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Directory name relative to the corpus root.
    pub dir: String,
    pub instruction: String,
    /// Index into [`Manifest::tasks`].
    pub task_index: usize,
    pub style_name: String,
    pub seed: u64,
    pub num_actions: usize,
    pub split: Split,
}

/// Corpus index: every episode plus the prompt mixture buckets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub frame_size: usize,
    pub tasks: Vec<TaskSpec>,
    pub buckets: Vec<MixtureBucket>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn save(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root)?;
        fs::write(root.join("manifest.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Manifest> {
        let path = root.join("manifest.json");
        if !path.is_file() {
            return Err(Error::Input(format!("no manifest at {}", path.display())));
        }
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    fn indices(&self, split: Split, robot: bool) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == split && (e.style_name == "robot") == robot)
            .map(|(i, _)| i)
            .collect()
    }
}

/// A fully loaded corpus: manifest plus every episode's frames, index-aligned
/// with `manifest.entries`.
#[derive(Debug)]
pub struct Corpus {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub episodes: Vec<StoredEpisode>,
}

impl Corpus {
    pub fn load(root: &Path) -> Result<Corpus> {
        let manifest = Manifest::load(root)?;
        let episodes = manifest
            .entries
            .iter()
            .map(|e| load_episode(&root.join(&e.dir)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus { root: root.to_path_buf(), manifest, episodes })
    }
}

// ---------------------------------------------------------------------------
// Corpus generation

/// The four training tasks. Each is bound to one fixed object so that task
/// identity is recoverable from the prompt alone, and the transfer objects
/// below never appear during training.
pub fn quartet() -> [TaskSpec; 4] {
    let red_cube = ObjectSpec::new(ColorName::Red, Shape::Cube);
    let blue_can = ObjectSpec::new(ColorName::Blue, Shape::Can);
    let yellow_bottle = ObjectSpec::new(ColorName::Yellow, Shape::Bottle);
    let green_bottle = ObjectSpec::new(ColorName::Green, Shape::Bottle);
    [
        TaskSpec::new(Template::Pick, Some(red_cube), None).unwrap(),
        TaskSpec::new(Template::PlaceInto, Some(blue_can), None).unwrap(),
        TaskSpec::new(Template::KnockOver, Some(yellow_bottle), None).unwrap(),
        TaskSpec::new(Template::PlaceUpright, Some(green_bottle), None).unwrap(),
    ]
}

/// Tasks available to corpus generation, one instruction each. The first
/// four cover distinct skills on distinct objects; the rest reuse the same
/// object set so nothing outside [`distractor_pool`] leaks into scenes.
pub fn task_roster() -> Vec<TaskSpec> {
    let red_cube = ObjectSpec::new(ColorName::Red, Shape::Cube);
    let blue_can = ObjectSpec::new(ColorName::Blue, Shape::Can);
    let mut tasks = quartet().to_vec();
    tasks.push(TaskSpec::new(Template::Open, None, None).unwrap());
    tasks.push(TaskSpec::new(Template::Close, None, None).unwrap());
    tasks.push(TaskSpec::new(Template::MoveNear, Some(blue_can), Some(red_cube)).unwrap());
    tasks.push(TaskSpec::new(Template::PickPlaceOn, Some(red_cube), Some(blue_can)).unwrap());
    tasks
}

/// The four objects present in every training scene.
pub fn train_targets() -> Vec<ObjectSpec> {
    quartet().iter().flat_map(|t| t.required_specs()).collect()
}

/// Objects reserved for the transfer evaluation; never shown in training.
pub fn transfer_objects() -> Vec<ObjectSpec> {
    vec![
        ObjectSpec::new(ColorName::Purple, Shape::Ball),
        ObjectSpec::new(ColorName::Orange, Shape::Cup),
        ObjectSpec::new(ColorName::Green, Shape::Block),
        ObjectSpec::new(ColorName::Purple, Shape::Cup),
        ObjectSpec::new(ColorName::Orange, Shape::Ball),
        ObjectSpec::new(ColorName::Blue, Shape::Block),
    ]
}

/// Catalog entries that may appear as training distractors: everything
/// except the training targets and the held-out transfer objects.
pub fn distractor_pool() -> Vec<ObjectSpec> {
    let excluded: Vec<ObjectSpec> =
        train_targets().into_iter().chain(transfer_objects()).collect();
    catalog().into_iter().filter(|o| !excluded.contains(o)).collect()
}

/// Extra objects for one generated scene: the training targets the task does
/// not already require, plus a few sampled distractors. Every training scene
/// therefore contains all four target objects, so the correct one cannot be
/// identified from object presence alone.
pub fn scene_extras(cfg: &EnvConfig, task: &TaskSpec, rng: &mut ChaCha8Rng) -> Vec<ObjectSpec> {
    let required = task.required_specs();
    let mut extras: Vec<ObjectSpec> =
        train_targets().into_iter().filter(|o| !required.contains(o)).collect();
    let pool = distractor_pool();
    let count = rng.gen_range(cfg.distractors_min..=cfg.distractors_max);
    extras.extend(pool.choose_multiple(rng, count).copied());
    extras
}

fn split_for(j: usize) -> Split {
    if j % VAL_STRIDE == VAL_STRIDE - 1 {
        Split::Val
    } else {
        Split::Train
    }
}

/// Generates `per_task` robot episodes per task, each with a co-seeded
/// human-style counterpart, writes them under `root`, and returns the
/// manifest plus any warnings about empty mixture buckets. Regenerating
/// with the same arguments reproduces the files byte for byte.
pub fn generate_corpus(
    cfg: &EnvConfig,
    root: &Path,
    tasks: &[TaskSpec],
    per_task: usize,
    seed: u64,
) -> Result<(Manifest, Vec<String>)> {
    if tasks.is_empty() || per_task == 0 {
        return Err(Error::Input("corpus generation needs at least one task and episode".into()));
    }
    let styles = [EmbodimentStyle::robot(), EmbodimentStyle::human_like(cfg)];
    let mut entries = Vec::new();
    for (ti, task) in tasks.iter().enumerate() {
        for j in 0..per_task {
            let ep_seed = seed
                .wrapping_add(ti as u64 * 1_000_003)
                .wrapping_add(j as u64);
            let mut roster_rng = ChaCha8Rng::seed_from_u64(ep_seed ^ 0x5eed_0d15);
            let extras = scene_extras(cfg, task, &mut roster_rng);
            for style in &styles {
                let ep = expert_episode_with_roster(cfg, task, style, ep_seed, &extras)?;
                if !ep.milestones.all_true() {
                    return Err(Error::Input(format!(
                        "expert demonstration failed milestones for '{}' (seed {ep_seed}, style {})",
                        task.instruction, style.name
                    )));
                }
                let dir = format!("t{ti}_e{j:04}_{}", style.name);
                save_episode(&root.join(&dir), &ep)?;
                entries.push(ManifestEntry {
                    dir,
                    instruction: task.instruction.clone(),
                    task_index: ti,
                    style_name: style.name.clone(),
                    seed: ep_seed,
                    num_actions: ep.actions.len(),
                    split: split_for(j),
                });
            }
        }
    }
    let (buckets, warnings) = mixture_buckets(&entries);
    let manifest = Manifest {
        frame_size: cfg.frame_size,
        tasks: tasks.to_vec(),
        buckets,
        entries,
    };
    manifest.save(root)?;
    Ok((manifest, warnings))
}

/// Counts the ordered pairs each source bucket can supply from the training
/// split. Buckets that can supply none are omitted with a warning.
fn mixture_buckets(entries: &[ManifestEntry]) -> (Vec<MixtureBucket>, Vec<String>) {
    let train =
        |robot: bool| -> Vec<&ManifestEntry> {
            entries
                .iter()
                .filter(|e| e.split == Split::Train && (e.style_name == "robot") == robot)
                .collect()
        };
    let robots = train(true);
    let humans = train(false);
    let mut rr = 0usize;
    let mut hs = 0usize;
    let mut cl = 0usize;
    for r in &robots {
        let partners =
            robots.iter().filter(|o| o.instruction == r.instruction && o.seed != r.seed).count();
        // A lone instruction still supports one self-pair.
        rr += partners.max(1);
        hs += humans.iter().filter(|h| h.instruction == r.instruction && h.seed != r.seed).count();
        cl += humans.iter().filter(|h| h.instruction == r.instruction && h.seed == r.seed).count();
    }
    let sources = [PairSource::RobotRobot, PairSource::Hindsight, PairSource::CoLocated];
    let counts = [rr, hs, cl];
    let mut buckets = Vec::new();
    let mut warnings = Vec::new();
    for i in 0..3 {
        if counts[i] == 0 {
            warnings.push(format!(
                "mixture bucket '{}' has no candidate pairs and was omitted",
                sources[i].as_str()
            ));
        } else {
            buckets.push(MixtureBucket {
                source: sources[i],
                weight: MIXTURE_WEIGHTS[i],
                available: counts[i],
            });
        }
    }
    (buckets, warnings)
}

// ---------------------------------------------------------------------------
// Prompt pairing

/// One training pair: a prompt episode and the robot episode it conditions.
/// Both halves always carry the identical instruction string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPair {
    /// Manifest index of the prompt episode.
    pub prompt: usize,
    /// Manifest index of the robot episode.
    pub robot: usize,
    pub instruction: String,
    pub source: PairSource,
    /// True when the prompt is the robot episode itself because no partner
    /// shares its instruction; the two halves then differ only by their
    /// independently drawn augmentations.
    pub self_pair: bool,
}

/// Draws [`PROMPTS_PER_EPISODE`] prompts for every robot episode in `split`,
/// choosing each prompt's source from the manifest's mixture buckets. Every
/// robot episode therefore appears in at least one pair.
pub fn pair_episodes(
    manifest: &Manifest,
    split: Split,
    per_episode: usize,
    seed: u64,
) -> Result<Vec<PromptPair>> {
    pair_with_buckets(manifest, split, per_episode, manifest.buckets.clone(), seed)
}

/// Like [`pair_episodes`] but with explicit mixture weights ordered
/// robot-robot, hindsight, co-located, overriding the manifest's nominal
/// weights. Buckets the manifest omitted stay omitted.
pub fn pair_episodes_weighted(
    manifest: &Manifest,
    split: Split,
    per_episode: usize,
    weights: [f64; 3],
    seed: u64,
) -> Result<Vec<PromptPair>> {
    let order = [PairSource::RobotRobot, PairSource::Hindsight, PairSource::CoLocated];
    let buckets = manifest
        .buckets
        .iter()
        .map(|b| {
            let i = order.iter().position(|s| *s == b.source).unwrap();
            MixtureBucket { weight: weights[i], ..b.clone() }
        })
        .collect();
    pair_with_buckets(manifest, split, per_episode, buckets, seed)
}

fn pair_with_buckets(
    manifest: &Manifest,
    split: Split,
    per_episode: usize,
    buckets: Vec<MixtureBucket>,
    seed: u64,
) -> Result<Vec<PromptPair>> {
    if per_episode == 0 {
        return Err(Error::Input("per_episode must be positive".into()));
    }
    let robot_ids = manifest.indices(split, true);
    let human_ids = manifest.indices(split, false);
    if robot_ids.is_empty() {
        return Err(Error::Input(format!("no robot episodes in the {split:?} split")));
    }
    let buckets: Vec<MixtureBucket> = buckets.into_iter().filter(|b| b.weight > 0.0).collect();
    if buckets.is_empty() {
        return Err(Error::Input("no mixture bucket has positive weight".into()));
    }
    let mut robot_by_instr: HashMap<&str, Vec<usize>> = HashMap::new();
    for &i in &robot_ids {
        robot_by_instr.entry(manifest.entries[i].instruction.as_str()).or_default().push(i);
    }
    let mut human_by_instr: HashMap<&str, Vec<usize>> = HashMap::new();
    for &i in &human_ids {
        human_by_instr.entry(manifest.entries[i].instruction.as_str()).or_default().push(i);
    }
    let total_weight: f64 = buckets.iter().map(|b| b.weight).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(robot_ids.len() * per_episode);
    for &ri in &robot_ids {
        let entry = &manifest.entries[ri];
        let instr = entry.instruction.as_str();
        let rr: Vec<usize> = robot_by_instr[instr].iter().copied().filter(|&o| o != ri).collect();
        let empty = Vec::new();
        let humans = human_by_instr.get(instr).unwrap_or(&empty);
        let hs: Vec<usize> =
            humans.iter().copied().filter(|&h| manifest.entries[h].seed != entry.seed).collect();
        let cl: Option<usize> =
            humans.iter().copied().find(|&h| manifest.entries[h].seed == entry.seed);
        for _ in 0..per_episode {
            let mut source = draw_source(&buckets, total_weight, &mut rng);
            // Degrade toward robot-robot when a bucket has no candidate
            // for this particular episode.
            if source == PairSource::CoLocated && cl.is_none() {
                source = PairSource::Hindsight;
            }
            if source == PairSource::Hindsight && hs.is_empty() {
                source = PairSource::RobotRobot;
            }
            let (prompt, self_pair) = match source {
                PairSource::RobotRobot => match rr.choose(&mut rng) {
                    Some(&p) => (p, false),
                    None => (ri, true),
                },
                PairSource::Hindsight => (*hs.choose(&mut rng).unwrap(), false),
                PairSource::CoLocated => (cl.unwrap(), false),
            };
            debug_assert_eq!(manifest.entries[prompt].instruction, entry.instruction);
            pairs.push(PromptPair {
                prompt,
                robot: ri,
                instruction: entry.instruction.clone(),
                source,
                self_pair,
            });
        }
    }
    Ok(pairs)
}

fn draw_source(buckets: &[MixtureBucket], total: f64, rng: &mut ChaCha8Rng) -> PairSource {
    let r: f64 = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for b in buckets {
        acc += b.weight;
        if r < acc {
            return b.source;
        }
    }
    buckets[buckets.len() - 1].source
}

// ---------------------------------------------------------------------------
// Frame sampling

/// Picks `n` sorted frame indices from a video of `num_frames`, always
/// including the first and last frame. Videos shorter than `n` yield
/// repeated indices; a video of exactly `n` frames yields every frame once.
pub fn sample_prompt_frames(
    num_frames: usize,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if num_frames == 0 {
        return Err(Error::Input("cannot sample frames from an empty video".into()));
    }
    if n < 2 {
        return Err(Error::Input("prompt frame count must be at least 2".into()));
    }
    if num_frames == 1 {
        return Ok(vec![0; n]);
    }
    let interior = num_frames - 2;
    let mut idx = Vec::with_capacity(n);
    idx.push(0);
    idx.push(num_frames - 1);
    if interior >= n - 2 {
        for k in rand::seq::index::sample(rng, interior, n - 2) {
            idx.push(k + 1);
        }
    } else {
        for _ in 0..n - 2 {
            idx.push(rng.gen_range(0..num_frames));
        }
    }
    idx.sort_unstable();
    Ok(idx)
}

/// Indices of the `k` most recent frames at time `t`, left-padded with
/// frame 0 when the episode is younger than `k` steps.
pub fn state_indices(num_frames: usize, t: usize, k: usize) -> Result<Vec<usize>> {
    if t >= num_frames {
        return Err(Error::Input(format!(
            "state time {t} out of range for a {num_frames}-frame episode"
        )));
    }
    Ok((0..k).map(|i| (t + i + 1).saturating_sub(k)).collect())
}

/// Gathers the given frames of a stored episode as `(n, H, W, 3)` floats
/// in `[0, 1]`.
pub fn gather_frames(ep: &StoredEpisode, idx: &[usize]) -> Result<Array4<f32>> {
    let size = ep.meta.frame_size;
    let mut out = Array4::<f32>::zeros((idx.len(), size, size, 3));
    for (row, &i) in idx.iter().enumerate() {
        if i >= ep.meta.num_frames {
            return Err(Error::Input(format!(
                "frame index {i} out of range for a {}-frame episode",
                ep.meta.num_frames
            )));
        }
        let src = ep.frames.slice(s![i, .., .., ..]);
        let mut dst = out.slice_mut(s![row, .., .., ..]);
        dst.zip_mut_with(&src, |d, &s| *d = s as f32 / 255.0);
    }
    Ok(out)
}

/// The state clip at time `t`: the `k` most recent frames, frame-0 padded.
pub fn build_state(ep: &StoredEpisode, t: usize, k: usize) -> Result<Array4<f32>> {
    gather_frames(ep, &state_indices(ep.meta.num_frames, t, k)?)
}

// ---------------------------------------------------------------------------
// Augmentation

/// One photometric draw, applied identically to every frame of a video.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Crop height and width as a fraction of the frame, resized back.
    pub crop_h: f64,
    pub crop_w: f64,
    /// Crop offsets as a fraction of the slack left by the crop.
    pub off_y: f64,
    pub off_x: f64,
    pub brightness: f64,
    pub contrast: f64,
    /// Additive hue rotation in turns.
    pub hue: f64,
    pub saturation: f64,
}

impl AugmentParams {
    /// Parameters that leave the video bit-identical.
    pub fn identity() -> AugmentParams {
        AugmentParams {
            crop_h: 1.0,
            crop_w: 1.0,
            off_y: 0.0,
            off_x: 0.0,
            brightness: 1.0,
            contrast: 1.0,
            hue: 0.0,
            saturation: 1.0,
        }
    }

    /// One fresh draw over the full augmentation range.
    pub fn sample(rng: &mut impl Rng) -> AugmentParams {
        AugmentParams {
            crop_h: rng.gen_range(0.95..1.0),
            crop_w: rng.gen_range(0.95..1.0),
            off_y: rng.gen::<f64>(),
            off_x: rng.gen::<f64>(),
            brightness: rng.gen_range(0.9..1.1),
            contrast: rng.gen_range(0.8..1.2),
            hue: rng.gen_range(0.0..0.03),
            saturation: rng.gen_range(0.8..1.2),
        }
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / delta).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}

/// Applies one augmentation draw to a `(T, H, W, 3)` video in `[0, 1]`.
/// Stages at their identity values are skipped, so
/// [`AugmentParams::identity`] reproduces the input exactly.
pub fn augment_with(frames: &Array4<f32>, p: &AugmentParams) -> Array4<f32> {
    let mut out = frames.clone();
    let (t, h, w, _) = frames.dim();

    if p.crop_h != 1.0 || p.crop_w != 1.0 || p.off_y != 0.0 || p.off_x != 0.0 {
        let ch = p.crop_h * h as f64;
        let cw = p.crop_w * w as f64;
        let oy = p.off_y * (h as f64 - ch);
        let ox = p.off_x * (w as f64 - cw);
        let mut resized = Array4::<f32>::zeros(frames.dim());
        for fi in 0..t {
            for y in 0..h {
                let sy = (oy + (y as f64 + 0.5) * ch / h as f64 - 0.5)
                    .clamp(0.0, h as f64 - 1.0);
                let y0 = sy.floor() as usize;
                let y1 = (y0 + 1).min(h - 1);
                let fy = (sy - y0 as f64) as f32;
                for x in 0..w {
                    let sx = (ox + (x as f64 + 0.5) * cw / w as f64 - 0.5)
                        .clamp(0.0, w as f64 - 1.0);
                    let x0 = sx.floor() as usize;
                    let x1 = (x0 + 1).min(w - 1);
                    let fx = (sx - x0 as f64) as f32;
                    for ch3 in 0..3 {
                        let v00 = out[(fi, y0, x0, ch3)];
                        let v01 = out[(fi, y0, x1, ch3)];
                        let v10 = out[(fi, y1, x0, ch3)];
                        let v11 = out[(fi, y1, x1, ch3)];
                        let top = v00 + (v01 - v00) * fx;
                        let bot = v10 + (v11 - v10) * fx;
                        resized[(fi, y, x, ch3)] = top + (bot - top) * fy;
                    }
                }
            }
        }
        out = resized;
    }

    if p.brightness != 1.0 {
        let b = p.brightness as f32;
        out.mapv_inplace(|v| v * b);
    }

    if p.contrast != 1.0 {
        let mean = out.mean().unwrap_or(0.0);
        let c = p.contrast as f32;
        out.mapv_inplace(|v| mean + (v - mean) * c);
    }

    if p.hue != 0.0 || p.saturation != 1.0 {
        let hue = p.hue as f32;
        let sat = p.saturation as f32;
        let dims = out.dim();
        let mut flat = out.into_shape_with_order((dims.0 * dims.1 * dims.2, 3)).unwrap();
        for mut px in flat.rows_mut() {
            let (hh, ss, vv) = rgb_to_hsv(px[0], px[1], px[2]);
            let (r, g, b) = hsv_to_rgb(hh + hue, (ss * sat).clamp(0.0, 1.0), vv);
            px[0] = r;
            px[1] = g;
            px[2] = b;
        }
        out = flat.into_shape_with_order(dims).unwrap();
    }

    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    out
}

/// Augments a video with a single fresh parameter draw.
pub fn augment(frames: &Array4<f32>, rng: &mut impl Rng) -> Array4<f32> {
    augment_with(frames, &AugmentParams::sample(rng))
}

// ---------------------------------------------------------------------------
// Targets

/// The `horizon` discretized actions starting at `t`, padded past the end of
/// the episode with terminate actions.
pub fn make_targets(
    actions: &[ActionVector],
    ranges: &ActionRanges,
    t: usize,
    horizon: usize,
) -> Result<Vec<DiscretizedAction>> {
    if t >= actions.len() {
        return Err(Error::Input(format!(
            "target time {t} out of range for {} actions",
            actions.len()
        )));
    }
    (0..horizon)
        .map(|i| {
            let a = actions.get(t + i).copied().unwrap_or_else(ActionVector::terminate);
            encode(&a, ranges)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Batch assembly

/// One assembled training batch, ready for the policy's batched forward.
#[derive(Debug, Clone)]
pub struct BatchData {
    /// `(B * (2 * prompt_frames + state_frames), H, W, 3)` frames ordered as
    /// all prompt videos, then all robot full videos, then all state clips,
    /// with each video's frames contiguous.
    pub frames: Array4<f32>,
    /// `(B * horizon * 11)` target bins, sample-major then step then dim.
    pub targets: Vec<u16>,
    pub instructions: Vec<String>,
    /// Pair-list index and robot timestep behind each sample, kept for
    /// failure diagnostics.
    pub pair_indices: Vec<usize>,
    pub timesteps: Vec<usize>,
}

/// Draws training batches from a corpus and its pair list. Each video in a
/// sample gets its own augmentation draw, so even the two halves of a
/// self-pair differ.
pub struct BatchSampler<'a> {
    corpus: &'a Corpus,
    pairs: &'a [PromptPair],
    ranges: ActionRanges,
    prompt_frames: usize,
    state_frames: usize,
    horizon: usize,
    rng: ChaCha8Rng,
}

impl<'a> BatchSampler<'a> {
    pub fn new(
        corpus: &'a Corpus,
        pairs: &'a [PromptPair],
        ranges: ActionRanges,
        model: &ModelConfig,
        seed: u64,
    ) -> Result<BatchSampler<'a>> {
        if pairs.is_empty() {
            return Err(Error::Input("cannot sample from an empty pair list".into()));
        }
        if corpus.manifest.frame_size != model.frame_size {
            return Err(Error::Shape(format!(
                "corpus frames are {} px but the model expects {}",
                corpus.manifest.frame_size, model.frame_size
            )));
        }
        Ok(BatchSampler {
            corpus,
            pairs,
            ranges,
            prompt_frames: model.prompt_frames,
            state_frames: model.state_frames,
            horizon: model.horizon,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Restarts the draw stream from a fresh seed. The trainer reseeds per
    /// step so any step's batch can be reproduced without replaying history.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn next_batch(&mut self, batch: usize) -> Result<BatchData> {
        if batch == 0 {
            return Err(Error::Input("batch size must be positive".into()));
        }
        let (fp, fs) = (self.prompt_frames, self.state_frames);
        let size = self.corpus.manifest.frame_size;
        let mut frames = Array4::<f32>::zeros((batch * (2 * fp + fs), size, size, 3));
        let mut targets = Vec::with_capacity(batch * self.horizon * ACTION_DIMS);
        let mut instructions = Vec::with_capacity(batch);
        let mut pair_indices = Vec::with_capacity(batch);
        let mut timesteps = Vec::with_capacity(batch);
        for b in 0..batch {
            let pi = self.rng.gen_range(0..self.pairs.len());
            let pair = &self.pairs[pi];
            let prompt_ep = &self.corpus.episodes[pair.prompt];
            let robot_ep = &self.corpus.episodes[pair.robot];
            let t = self.rng.gen_range(0..robot_ep.meta.actions.len());

            let p_idx = sample_prompt_frames(prompt_ep.meta.num_frames, fp, &mut self.rng)?;
            let r_idx = sample_prompt_frames(robot_ep.meta.num_frames, fp, &mut self.rng)?;
            let prompt_v = augment(&gather_frames(prompt_ep, &p_idx)?, &mut self.rng);
            let robot_v = augment(&gather_frames(robot_ep, &r_idx)?, &mut self.rng);
            let state_v = augment(&build_state(robot_ep, t, fs)?, &mut self.rng);

            frames.slice_mut(s![b * fp..(b + 1) * fp, .., .., ..]).assign(&prompt_v);
            frames
                .slice_mut(s![(batch + b) * fp..(batch + b + 1) * fp, .., .., ..])
                .assign(&robot_v);
            let s0 = 2 * batch * fp + b * fs;
            frames.slice_mut(s![s0..s0 + fs, .., .., ..]).assign(&state_v);

            for d in make_targets(&robot_ep.action_vectors()?, &self.ranges, t, self.horizon)? {
                targets.extend_from_slice(&d.bins);
            }
            instructions.push(pair.instruction.clone());
            pair_indices.push(pi);
            timesteps.push(t);
        }
        Ok(BatchData { frames, targets, instructions, pair_indices, timesteps })
    }
}
