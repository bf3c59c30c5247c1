//! Frame, video and text encoders feeding the policy.
//!
//! A single shared per-frame encoder turns every video frame into patch
//! tokens. Two latent resamplers compress variable-length token stacks into
//! a fixed number of tokens, one for the prompt video and one for the recent
//! state. Small heads derive everything the training losses consume:
//! per-frame alignment embeddings, pooled video vectors and text vectors.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::blocks::{CrossBlockCache, SelfBlockCache};
use crate::nn::layers::{gelu, gelu_grad, EmbeddingCache, LayerNormCache, LinearCache};
use crate::nn::{normal_init, s, CrossBlock, Embedding, LayerNorm, Linear, ParamId, Params, Scalar, SelfBlock};
use ndarray::{s as nds, Array2, ArrayView4, Axis};
use rand::Rng;

/// Pipeline stage that produced a token set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Prompt,
    State,
    Fused,
}

/// A stack of `d`-wide token rows tagged with its provenance.
#[derive(Debug, Clone)]
pub struct TokenSet<T> {
    pub branch: Branch,
    pub tokens: Array2<T>,
}

impl<T: Scalar> TokenSet<T> {
    /// Wraps tokens after rejecting non-finite entries.
    pub fn new(branch: Branch, tokens: Array2<T>) -> Result<TokenSet<T>> {
        if let Some(bad) = tokens.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!(
                "{branch:?} tokens contain a non-finite entry at flat index {bad}"
            )));
        }
        Ok(TokenSet { branch, tokens })
    }
}

/// Rearranges `(frames, size, size, 3)` pixels into per-patch rows.
///
/// Output row `f * P + py * side + px` holds patch `(py, px)` of frame `f`
/// flattened in `(dy, dx, channel)` order, where `side = size / patch` and
/// `P = side²`.
pub fn patchify<T: Scalar>(
    frames: ArrayView4<'_, T>,
    frame_size: usize,
    patch: usize,
) -> Result<Array2<T>> {
    let (n, h, w, c) = frames.dim();
    if h != frame_size || w != frame_size || c != 3 {
        return Err(Error::Shape(format!(
            "expected frames shaped (n, {frame_size}, {frame_size}, 3), got ({n}, {h}, {w}, {c})"
        )));
    }
    let side = frame_size / patch;
    let ptok = side * side;
    let mut out = Array2::zeros((n * ptok, patch * patch * 3));
    for f in 0..n {
        for py in 0..side {
            for px in 0..side {
                let row = f * ptok + py * side + px;
                let mut col = 0;
                for dy in 0..patch {
                    for dx in 0..patch {
                        for ch in 0..3 {
                            out[(row, col)] =
                                frames[(f, py * patch + dy, px * patch + dx, ch)];
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Mean over each consecutive `group` rows.
pub fn mean_rows<T: Scalar>(x: &Array2<T>, group: usize) -> Array2<T> {
    assert_eq!(x.nrows() % group, 0, "rows not divisible by group");
    let scale = s::<T>(1.0 / group as f64);
    let mut out = Array2::zeros((x.nrows() / group, x.ncols()));
    for g in 0..out.nrows() {
        let sum = x.slice(nds![g * group..(g + 1) * group, ..]).sum_axis(Axis(0));
        out.row_mut(g).assign(&sum.mapv(|v| v * scale));
    }
    out
}

/// Shared per-frame patch-token encoder.
///
/// Both the prompt and state branches run their frames through this one
/// module, so identical frames yield identical tokens regardless of branch.
#[derive(Debug, Clone)]
pub struct VitEncoder {
    pub frame_size: usize,
    pub patch_size: usize,
    pub embed: Linear,
    /// Learned positional embedding, one row per patch position.
    pub pos: ParamId,
    pub blocks: Vec<SelfBlock>,
    pub ln_out: LayerNorm,
}

pub struct VitCache<T> {
    c_embed: LinearCache<T>,
    c_blocks: Vec<SelfBlockCache<T>>,
    c_ln: LayerNormCache<T>,
    frames: usize,
}

impl VitEncoder {
    pub fn new<T: Scalar, R: Rng>(
        p: &mut Params<T>,
        rng: &mut R,
        cfg: &ModelConfig,
    ) -> VitEncoder {
        let ptok = cfg.tokens_per_frame();
        let in_dim = cfg.patch_size * cfg.patch_size * 3;
        let embed = Linear::new(p, rng, "vit.embed", in_dim, cfg.dim);
        let pos = p.add("vit.pos", normal_init(rng, ptok, cfg.dim, 0.02), false);
        let blocks = (0..cfg.vit_layers)
            .map(|i| {
                SelfBlock::new(p, rng, &format!("vit.blk{i}"), cfg.dim, cfg.heads, cfg.vit_mlp_ratio)
            })
            .collect();
        let ln_out = LayerNorm::new(p, "vit.ln_out", cfg.dim);
        VitEncoder { frame_size: cfg.frame_size, patch_size: cfg.patch_size, embed, pos, blocks, ln_out }
    }

    pub fn tokens_per_frame(&self) -> usize {
        let side = self.frame_size / self.patch_size;
        side * side
    }

    /// Encodes pre-patchified rows into `(frames * P, d)` tokens.
    pub fn forward<T: Scalar>(
        &self,
        p: &Params<T>,
        patches: &Array2<T>,
    ) -> (Array2<T>, VitCache<T>) {
        let ptok = self.tokens_per_frame();
        assert_eq!(patches.nrows() % ptok, 0, "patch rows not divisible by tokens per frame");
        let frames = patches.nrows() / ptok;
        let (mut x, c_embed) = self.embed.forward(p, patches);
        let pos = p.value(self.pos);
        for f in 0..frames {
            let mut rows = x.slice_mut(nds![f * ptok..(f + 1) * ptok, ..]);
            rows += pos;
        }
        let mut c_blocks = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (y, c) = blk.forward(p, &x, ptok);
            x = y;
            c_blocks.push(c);
        }
        let (y, c_ln) = self.ln_out.forward(p, &x);
        (y, VitCache { c_embed, c_blocks, c_ln, frames })
    }

    /// Accumulates parameter gradients; pixels receive no gradient.
    pub fn backward<T: Scalar>(&self, p: &mut Params<T>, cache: &VitCache<T>, dtokens: &Array2<T>) {
        let ptok = self.tokens_per_frame();
        let mut d = self.ln_out.backward(p, &cache.c_ln, dtokens);
        for (blk, c) in self.blocks.iter().zip(&cache.c_blocks).rev() {
            d = blk.backward(p, c, &d);
        }
        let mut dpos: Array2<T> = Array2::zeros(p.value(self.pos).raw_dim());
        for f in 0..cache.frames {
            dpos += &d.slice(nds![f * ptok..(f + 1) * ptok, ..]);
        }
        p.acc_grad(self.pos, &dpos);
        self.embed.backward_no_input(p, &cache.c_embed, &d);
    }

    /// Cache-free forward for inference paths.
    pub fn infer<T: Scalar>(&self, p: &Params<T>, patches: &Array2<T>) -> Array2<T> {
        let ptok = self.tokens_per_frame();
        assert_eq!(patches.nrows() % ptok, 0, "patch rows not divisible by tokens per frame");
        let frames = patches.nrows() / ptok;
        let mut x = self.embed.infer(p, patches);
        let pos = p.value(self.pos);
        for f in 0..frames {
            let mut rows = x.slice_mut(nds![f * ptok..(f + 1) * ptok, ..]);
            rows += pos;
        }
        for blk in &self.blocks {
            x = blk.infer(p, &x, ptok);
        }
        self.ln_out.infer(p, &x)
    }

    /// Patchifies raw frames and encodes them.
    pub fn encode_frames<T: Scalar>(
        &self,
        p: &Params<T>,
        frames: ArrayView4<'_, T>,
    ) -> Result<(Array2<T>, VitCache<T>)> {
        let patches = patchify(frames, self.frame_size, self.patch_size)?;
        Ok(self.forward(p, &patches))
    }

    /// Cache-free [`VitEncoder::encode_frames`].
    pub fn infer_frames<T: Scalar>(
        &self,
        p: &Params<T>,
        frames: ArrayView4<'_, T>,
    ) -> Result<Array2<T>> {
        let patches = patchify(frames, self.frame_size, self.patch_size)?;
        Ok(self.infer(p, &patches))
    }
}

/// Latent-query resampler compressing `frames * P` tokens per video into a
/// fixed set of latent tokens.
///
/// Learned per-frame temporal embeddings are added to the context tokens
/// before resampling so frame order stays visible to cross-attention.
#[derive(Debug, Clone)]
pub struct Resampler {
    /// Learned latent queries, `(latents, d)`.
    pub latents: ParamId,
    /// Temporal slot embeddings, `(frames, d)`.
    pub time: ParamId,
    pub blocks: Vec<CrossBlock>,
    pub num_latents: usize,
    pub frames: usize,
}

pub struct ResamplerCache<T> {
    c_blocks: Vec<CrossBlockCache<T>>,
    videos: usize,
    tokens_per_frame: usize,
}

impl Resampler {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        p: &mut Params<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        num_latents: usize,
        layers: usize,
        frames: usize,
    ) -> Resampler {
        let latents = p.add(&format!("{name}.latents"), normal_init(rng, num_latents, dim, 0.02), true);
        let time = p.add(&format!("{name}.time"), normal_init(rng, frames, dim, 0.02), false);
        let blocks = (0..layers)
            .map(|i| CrossBlock::new(p, rng, &format!("{name}.blk{i}"), dim, heads, mlp_ratio))
            .collect();
        Resampler { latents, time, blocks, num_latents, frames }
    }

    /// Resamples `(videos * frames * P, d)` tokens to `(videos * latents, d)`.
    pub fn forward<T: Scalar>(
        &self,
        p: &Params<T>,
        tokens: &Array2<T>,
        tokens_per_frame: usize,
    ) -> (Array2<T>, ResamplerCache<T>) {
        let span = self.frames * tokens_per_frame;
        assert_eq!(tokens.nrows() % span, 0, "token rows not divisible by video span");
        let videos = tokens.nrows() / span;
        let ctx = self.with_time(p, tokens, tokens_per_frame, videos);
        let mut x = self.tile_latents(p, videos);
        let mut c_blocks = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (y, c) = blk.forward(p, &x, &ctx, self.num_latents, span);
            x = y;
            c_blocks.push(c);
        }
        (x, ResamplerCache { c_blocks, videos, tokens_per_frame })
    }

    /// Returns the gradient with respect to the input tokens.
    pub fn backward<T: Scalar>(
        &self,
        p: &mut Params<T>,
        cache: &ResamplerCache<T>,
        dout: &Array2<T>,
    ) -> Array2<T> {
        let span = self.frames * cache.tokens_per_frame;
        let l = self.num_latents;
        let mut dq = dout.clone();
        let mut dctx: Option<Array2<T>> = None;
        for (blk, c) in self.blocks.iter().zip(&cache.c_blocks).rev() {
            let (dx, dc) = blk.backward(p, c, &dq);
            dq = dx;
            match &mut dctx {
                None => dctx = Some(dc),
                Some(t) => *t += &dc,
            }
        }
        let dctx = dctx.expect("resampler has at least one block");

        let mut dlatents = Array2::zeros((l, dq.ncols()));
        for v in 0..cache.videos {
            dlatents += &dq.slice(nds![v * l..(v + 1) * l, ..]);
        }
        p.acc_grad(self.latents, &dlatents);

        let mut dtime = Array2::zeros((self.frames, dctx.ncols()));
        for v in 0..cache.videos {
            for fr in 0..self.frames {
                let start = v * span + fr * cache.tokens_per_frame;
                let sum = dctx
                    .slice(nds![start..start + cache.tokens_per_frame, ..])
                    .sum_axis(Axis(0));
                let mut row = dtime.row_mut(fr);
                row += &sum;
            }
        }
        p.acc_grad(self.time, &dtime);
        dctx
    }

    /// Cache-free forward for inference paths.
    pub fn infer<T: Scalar>(
        &self,
        p: &Params<T>,
        tokens: &Array2<T>,
        tokens_per_frame: usize,
    ) -> Array2<T> {
        let span = self.frames * tokens_per_frame;
        assert_eq!(tokens.nrows() % span, 0, "token rows not divisible by video span");
        let videos = tokens.nrows() / span;
        let ctx = self.with_time(p, tokens, tokens_per_frame, videos);
        let mut x = self.tile_latents(p, videos);
        for blk in &self.blocks {
            x = blk.infer(p, &x, &ctx, self.num_latents, span);
        }
        x
    }

    fn with_time<T: Scalar>(
        &self,
        p: &Params<T>,
        tokens: &Array2<T>,
        tokens_per_frame: usize,
        videos: usize,
    ) -> Array2<T> {
        let span = self.frames * tokens_per_frame;
        let time = p.value(self.time);
        let mut ctx = tokens.clone();
        for v in 0..videos {
            for fr in 0..self.frames {
                let start = v * span + fr * tokens_per_frame;
                let mut rows = ctx.slice_mut(nds![start..start + tokens_per_frame, ..]);
                let trow = time.row(fr);
                for mut r in rows.rows_mut() {
                    r += &trow;
                }
            }
        }
        ctx
    }

    fn tile_latents<T: Scalar>(&self, p: &Params<T>, videos: usize) -> Array2<T> {
        let lat = p.value(self.latents);
        let mut x = Array2::zeros((videos * self.num_latents, lat.ncols()));
        for v in 0..videos {
            x.slice_mut(nds![v * self.num_latents..(v + 1) * self.num_latents, ..]).assign(lat);
        }
        x
    }
}

/// Two-layer projector producing per-frame alignment embeddings.
///
/// Patch tokens are mean-pooled per frame, then projected to the alignment
/// width. Only the temporal-alignment loss consumes this output.
#[derive(Debug, Clone)]
pub struct AlignHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct AlignCache<T> {
    c1: LinearCache<T>,
    pre: Array2<T>,
    c2: LinearCache<T>,
    tokens_per_frame: usize,
}

impl AlignHead {
    pub fn new<T: Scalar, R: Rng>(
        p: &mut Params<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        out_dim: usize,
    ) -> AlignHead {
        AlignHead {
            fc1: Linear::new(p, rng, &format!("{name}.fc1"), dim, dim),
            fc2: Linear::new(p, rng, &format!("{name}.fc2"), dim, out_dim),
        }
    }

    /// Maps `(frames * P, d)` tokens to `(frames, out_dim)` embeddings.
    pub fn forward<T: Scalar>(
        &self,
        p: &Params<T>,
        tokens: &Array2<T>,
        tokens_per_frame: usize,
    ) -> (Array2<T>, AlignCache<T>) {
        let pooled = mean_rows(tokens, tokens_per_frame);
        let (pre, c1) = self.fc1.forward(p, &pooled);
        let act = pre.mapv(gelu);
        let (y, c2) = self.fc2.forward(p, &act);
        (y, AlignCache { c1, pre, c2, tokens_per_frame })
    }

    /// Returns the gradient with respect to the input tokens.
    pub fn backward<T: Scalar>(
        &self,
        p: &mut Params<T>,
        cache: &AlignCache<T>,
        dy: &Array2<T>,
    ) -> Array2<T> {
        let dact = self.fc2.backward(p, &cache.c2, dy);
        let dpre = dact * cache.pre.mapv(gelu_grad);
        let dpooled = self.fc1.backward(p, &cache.c1, &dpre);
        let ptok = cache.tokens_per_frame;
        let scale = s::<T>(1.0 / ptok as f64);
        let mut dtok = Array2::zeros((dpooled.nrows() * ptok, dpooled.ncols()));
        for f in 0..dpooled.nrows() {
            let row = dpooled.row(f).mapv(|v| v * scale);
            for mut r in dtok.slice_mut(nds![f * ptok..(f + 1) * ptok, ..]).rows_mut() {
                r.assign(&row);
            }
        }
        dtok
    }

    /// Cache-free forward for inference paths.
    pub fn infer<T: Scalar>(
        &self,
        p: &Params<T>,
        tokens: &Array2<T>,
        tokens_per_frame: usize,
    ) -> Array2<T> {
        let pooled = mean_rows(tokens, tokens_per_frame);
        self.fc2.infer(p, &self.fc1.infer(p, &pooled).mapv(gelu))
    }
}

/// Bag-of-embeddings text encoder over the closed task vocabulary.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    vocab: Vec<String>,
    pub embed: Embedding,
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct TextCache<T> {
    c_embed: Vec<EmbeddingCache>,
    counts: Vec<usize>,
    c1: LinearCache<T>,
    pre: Array2<T>,
    c2: LinearCache<T>,
}

impl TextEncoder {
    pub fn new<T: Scalar, R: Rng>(
        p: &mut Params<T>,
        rng: &mut R,
        name: &str,
        vocab: &[&str],
        dim: usize,
    ) -> TextEncoder {
        let vocab: Vec<String> = vocab.iter().map(|w| w.to_lowercase()).collect();
        for (i, w) in vocab.iter().enumerate() {
            assert!(!vocab[..i].contains(w), "duplicate vocabulary word {w:?}");
        }
        TextEncoder {
            embed: Embedding::new(p, rng, &format!("{name}.embed"), vocab.len(), dim),
            fc1: Linear::new(p, rng, &format!("{name}.fc1"), dim, dim),
            fc2: Linear::new(p, rng, &format!("{name}.fc2"), dim, dim),
            vocab,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Lower-cases, strips edge punctuation and maps words to vocabulary ids.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = Vec::new();
        for word in text.split_whitespace() {
            let w = word.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
            if w.is_empty() {
                continue;
            }
            match self.vocab.iter().position(|v| *v == w) {
                Some(i) => ids.push(i),
                None => {
                    return Err(Error::Input(format!(
                        "word {w:?} is outside the task vocabulary"
                    )))
                }
            }
        }
        if ids.is_empty() {
            return Err(Error::Input("instruction has no usable words".into()));
        }
        Ok(ids)
    }

    /// Encodes a batch of tokenized instructions to `(B, d)` vectors.
    pub fn forward<T: Scalar>(
        &self,
        p: &Params<T>,
        batch: &[Vec<usize>],
    ) -> (Array2<T>, TextCache<T>) {
        assert!(!batch.is_empty(), "empty instruction batch");
        let dim = p.value(self.embed.table).ncols();
        let mut pooled = Array2::zeros((batch.len(), dim));
        let mut c_embed = Vec::with_capacity(batch.len());
        let mut counts = Vec::with_capacity(batch.len());
        for (i, ids) in batch.iter().enumerate() {
            assert!(!ids.is_empty(), "instruction {i} has no tokens");
            let (e, c) = self.embed.forward(p, ids);
            pooled.row_mut(i).assign(&e.mean_axis(Axis(0)).expect("non-empty"));
            c_embed.push(c);
            counts.push(ids.len());
        }
        let (pre, c1) = self.fc1.forward(p, &pooled);
        let act = pre.mapv(gelu);
        let (y, c2) = self.fc2.forward(p, &act);
        (y, TextCache { c_embed, counts, c1, pre, c2 })
    }

    pub fn backward<T: Scalar>(&self, p: &mut Params<T>, cache: &TextCache<T>, dy: &Array2<T>) {
        let dact = self.fc2.backward(p, &cache.c2, dy);
        let dpre = dact * cache.pre.mapv(gelu_grad);
        let dpooled = self.fc1.backward(p, &cache.c1, &dpre);
        for (i, c) in cache.c_embed.iter().enumerate() {
            let n = cache.counts[i];
            let drow = dpooled.row(i).mapv(|v| v / s::<T>(n as f64));
            let de = Array2::from_shape_fn((n, dpooled.ncols()), |(_, j)| drow[j]);
            self.embed.backward(p, c, &de);
        }
    }

    /// Cache-free forward for inference paths.
    pub fn infer<T: Scalar>(&self, p: &Params<T>, batch: &[Vec<usize>]) -> Array2<T> {
        assert!(!batch.is_empty(), "empty instruction batch");
        let dim = p.value(self.embed.table).ncols();
        let mut pooled = Array2::zeros((batch.len(), dim));
        for (i, ids) in batch.iter().enumerate() {
            assert!(!ids.is_empty(), "instruction {i} has no tokens");
            let (e, _) = self.embed.forward(p, ids);
            pooled.row_mut(i).assign(&e.mean_axis(Axis(0)).expect("non-empty"));
        }
        self.fc2.infer(p, &self.fc1.infer(p, &pooled).mapv(gelu))
    }
}

/// Attention-pair counts for one fused forward pass under `cfg`.
///
/// The first count is the hypothetical cost of joint self-attention over the
/// concatenated prompt and state patch tokens; the second is the cost the two
/// latent resamplers actually pay. The published-scale preset yields
/// 4704² = 22,127,616 versus 301,056.
pub fn attention_pair_counts(cfg: &ModelConfig) -> (u64, u64) {
    let ptok = cfg.tokens_per_frame() as u64;
    let prompt = cfg.prompt_frames as u64 * ptok;
    let state = cfg.state_frames as u64 * ptok;
    let full = (prompt + state) * (prompt + state);
    let resampled = (prompt + state) * cfg.latents as u64;
    (full, resampled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::fd_max_rel_err;
    use ndarray::Array4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            preset: "test".to_string(),
            frame_size: 4,
            patch_size: 2,
            dim: 6,
            vit_layers: 1,
            vit_mlp_ratio: 2,
            heads: 2,
            latents: 2,
            resampler_layers: 1,
            fusion_layers: 1,
            decoder_layers: 1,
            prompt_frames: 2,
            state_frames: 2,
            horizon: 1,
            align_dim: 3,
        }
    }

    fn random_frames(n: usize, size: usize, seed: u64) -> Array4<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((n, size, size, 3), |_| rand::Rng::gen::<f64>(&mut r))
    }

    #[test]
    fn patchify_keeps_every_pixel_in_raster_order() {
        let frames = Array4::from_shape_fn((1, 4, 4, 3), |(_, y, x, c)| {
            (y * 100 + x * 10 + c) as f64
        });
        let patches = patchify(frames.view(), 4, 2).unwrap();
        assert_eq!(patches.dim(), (4, 12));
        // Patch (0, 0): pixels (0,0), (0,1), (1,0), (1,1) in (dy, dx, c) order.
        let row0: Vec<f64> = patches.row(0).to_vec();
        assert_eq!(row0, vec![0., 1., 2., 10., 11., 12., 100., 101., 102., 110., 111., 112.]);
        // Patch (1, 1) starts at pixel (2, 2).
        assert_eq!(patches[(3, 0)], 220.0);
        assert_eq!(patches.sum(), frames.sum());
    }

    #[test]
    fn patchify_rejects_wrong_shape() {
        let frames = random_frames(2, 8, 0);
        assert!(patchify(frames.view(), 4, 2).is_err());
    }

    #[test]
    fn desk_encoder_shapes_and_determinism() {
        let cfg = ModelConfig::preset("desk").unwrap();
        let mut p: Params<f32> = Params::new();
        let vit = VitEncoder::new(&mut p, &mut rng(), &cfg);
        let frames = random_frames(8, 48, 1).mapv(|v| v as f32);
        let (tok, _) = vit.encode_frames(&p, frames.view()).unwrap();
        assert_eq!(tok.dim(), (8 * 36, 128));
        let (tok2, _) = vit.encode_frames(&p, frames.view()).unwrap();
        assert_eq!(tok, tok2);
        assert_eq!(tok, vit.infer_frames(&p, frames.view()).unwrap());
    }

    #[test]
    fn vit_gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let mut p: Params<f64> = Params::new();
        let vit = VitEncoder::new(&mut p, &mut rng(), &cfg);
        let patches = patchify(random_frames(2, 4, 2).view(), 4, 2).unwrap();
        let run = |p: &Params<f64>| {
            let (y, _) = vit.forward(p, &patches);
            y.mapv(|v| v * v).sum()
        };
        let (y, cache) = vit.forward(&p, &patches);
        vit.backward(&mut p, &cache, &y.mapv(|v| 2.0 * v));
        let err = fd_max_rel_err(&mut p, &mut |p| run(p), 1e-4, 1e-4, 48);
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn resampler_output_size_is_independent_of_frame_count() {
        let mut p: Params<f64> = Params::new();
        let long = Resampler::new(&mut p, &mut rng(), "rs_long", 6, 2, 2, 4, 1, 4);
        let short = Resampler::new(&mut p, &mut rng(), "rs_short", 6, 2, 2, 4, 1, 2);
        let ptok = 3;
        let toks_long = crate::nn::normal_init(&mut rng(), 2 * 4 * ptok, 6, 1.0);
        let toks_short = crate::nn::normal_init(&mut rng(), 2 * 2 * ptok, 6, 1.0);
        let (a, _) = long.forward(&p, &toks_long, ptok);
        let (b, _) = short.forward(&p, &toks_short, ptok);
        assert_eq!(a.dim(), (2 * 4, 6));
        assert_eq!(b.dim(), (2 * 4, 6));
        assert_eq!(a, long.infer(&p, &toks_long, ptok));
    }

    #[test]
    fn resampler_gradients_match_finite_differences() {
        let mut p: Params<f64> = Params::new();
        let rs = Resampler::new(&mut p, &mut rng(), "rs", 6, 2, 2, 2, 2, 2);
        let x_id = p.add("x", crate::nn::normal_init(&mut rng(), 2 * 2 * 3, 6, 1.0), false);
        let run = |p: &Params<f64>| {
            let (y, _) = rs.forward(p, p.value(x_id), 3);
            y.mapv(|v| v * v).sum()
        };
        let tokens = p.value(x_id).clone();
        let (y, cache) = rs.forward(&p, &tokens, 3);
        let dtok = rs.backward(&mut p, &cache, &y.mapv(|v| 2.0 * v));
        p.acc_grad(x_id, &dtok);
        // Two stacked cross-attention layers under a squared-sum loss: the
        // curvature leaves real truncation error at step 1e-4, and at 1e-5
        // the zero-gradient key biases show cancellation noise near 1e-5.
        // The bound is loose accordingly; single-block tests stay at 1e-6.
        let err = fd_max_rel_err(&mut p, &mut |p| run(p), 1e-5, 1e-4, 32);
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn align_head_pools_means_and_ignores_patch_order() {
        let mut p: Params<f64> = Params::new();
        let head = AlignHead::new(&mut p, &mut rng(), "align", 6, 3);
        // Constant tokens per frame pool to exactly that constant.
        let mut tokens = Array2::zeros((6, 6));
        tokens.slice_mut(nds![0..3, ..]).fill(0.5);
        tokens.slice_mut(nds![3..6, ..]).fill(-1.25);
        let pooled = mean_rows(&tokens, 3);
        assert_eq!(pooled.row(0).to_vec(), vec![0.5; 6]);
        assert_eq!(pooled.row(1).to_vec(), vec![-1.25; 6]);

        let tokens = crate::nn::normal_init(&mut rng(), 6, 6, 1.0);
        let (y, _) = head.forward(&p, &tokens, 3);
        assert_eq!(y.dim(), (2, 3));
        // Swap two patch rows inside frame 0.
        let mut permuted = tokens.clone();
        let r0 = tokens.row(0).to_owned();
        let r2 = tokens.row(2).to_owned();
        permuted.row_mut(0).assign(&r2);
        permuted.row_mut(2).assign(&r0);
        let y2 = head.infer(&p, &permuted, 3);
        let diff = (&y - &y2).mapv(f64::abs).sum();
        assert!(diff < 1e-12, "permutation changed output by {diff}");
    }

    #[test]
    fn align_head_gradients_match_finite_differences() {
        let mut p: Params<f64> = Params::new();
        let head = AlignHead::new(&mut p, &mut rng(), "align", 6, 3);
        let x_id = p.add("x", crate::nn::normal_init(&mut rng(), 8, 6, 1.0), false);
        let run = |p: &Params<f64>| {
            let (y, _) = head.forward(p, p.value(x_id), 4);
            y.mapv(|v| v * v).sum()
        };
        let tokens = p.value(x_id).clone();
        let (y, cache) = head.forward(&p, &tokens, 4);
        let dtok = head.backward(&mut p, &cache, &y.mapv(|v| 2.0 * v));
        p.acc_grad(x_id, &dtok);
        let err = fd_max_rel_err(&mut p, &mut |p| run(p), 1e-5, 1e-4, 64);
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn attention_pool_is_invariant_to_duplicated_tokens() {
        use crate::nn::attention::AttnPool;
        let mut p: Params<f64> = Params::new();
        let pool = AttnPool::new(&mut p, &mut rng(), "pool", 6, 2);
        let tokens = crate::nn::normal_init(&mut rng(), 3, 6, 1.0);
        let mut doubled = Array2::zeros((6, 6));
        doubled.slice_mut(nds![0..3, ..]).assign(&tokens);
        doubled.slice_mut(nds![3..6, ..]).assign(&tokens);
        let a = pool.infer(&p, &tokens, 3);
        let b = pool.infer(&p, &doubled, 6);
        let diff = (&a - &b).mapv(f64::abs).sum();
        assert!(diff < 1e-12, "duplication changed pooled output by {diff}");
    }

    #[test]
    fn text_encoder_is_deterministic_and_rejects_bad_input() {
        let mut p: Params<f64> = Params::new();
        let text = TextEncoder::new(&mut p, &mut rng(), "text", &["pick", "the", "red", "block"], 6);
        let a = text.tokenize("Pick the red block.").unwrap();
        let b = text.tokenize("pick   THE red block").unwrap();
        assert_eq!(a, b);
        let (va, _) = text.forward(&p, &[a.clone()]);
        let vb = text.infer(&p, &[b]);
        assert_eq!(va, vb);
        assert_eq!(va.dim(), (1, 6));

        assert!(matches!(text.tokenize("pick the blue block"), Err(Error::Input(_))));
        assert!(matches!(text.tokenize(""), Err(Error::Input(_))));
        assert!(matches!(text.tokenize("  ... "), Err(Error::Input(_))));
    }

    #[test]
    fn text_encoder_gradients_match_finite_differences() {
        let mut p: Params<f64> = Params::new();
        let text = TextEncoder::new(&mut p, &mut rng(), "text", &["a", "b", "c", "d", "e"], 6);
        let batch = vec![vec![0, 1, 2], vec![3, 4]];
        let run = |p: &Params<f64>| {
            let (y, _) = text.forward(p, &batch);
            y.mapv(|v| v * v).sum()
        };
        let (y, cache) = text.forward(&p, &batch);
        text.backward(&mut p, &cache, &y.mapv(|v| 2.0 * v));
        let err = fd_max_rel_err(&mut p, &mut |p| run(p), 1e-5, 1e-4, 64);
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn token_set_rejects_non_finite_entries() {
        let mut t = Array2::zeros((2, 3));
        assert!(TokenSet::<f64>::new(Branch::Prompt, t.clone()).is_ok());
        t[(1, 2)] = f64::NAN;
        assert!(TokenSet::new(Branch::State, t).is_err());
    }

    #[test]
    fn attention_pair_counts_match_published_figures() {
        let paper = ModelConfig::preset("paper").unwrap();
        assert_eq!(attention_pair_counts(&paper), (22_127_616, 301_056));
        let desk = ModelConfig::preset("desk").unwrap();
        assert_eq!(attention_pair_counts(&desk), (720 * 720, 720 * 16));
    }
}
