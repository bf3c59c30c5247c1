//! The full policy network: state-prompt fusion, the action decoder and
//! closed-loop action selection.
//!
//! [`PolicyModel`] owns every sub-module and exposes three levels of API:
//! single-sample operations mirroring the component contracts (`fuse`,
//! `decode_actions`, `policy_step`), a cached-prompt rollout path, and the
//! batched training forward/backward used by the trainer.

use crate::actionspace::{decode, ActionRanges, ActionVector, DiscretizedAction, ACTION_DIMS, NUM_BINS};
use crate::config::ModelConfig;
use crate::encoders::{patchify, AlignCache, AlignHead, Branch, Resampler, ResamplerCache, TextCache, TextEncoder, TokenSet, VitCache, VitEncoder};
use crate::error::{Error, Result};
use crate::nn::attention::{AttnPool, AttnPoolCache};
use crate::nn::blocks::CrossBlockCache;
use crate::nn::layers::LinearCache;
use crate::nn::{normal_init, CrossBlock, Linear, ParamId, Params, Scalar};
use ndarray::{s as nds, Array2, Array3, ArrayView4};
use rand::Rng;

/// Unnormalized bin scores for one sample: `(horizon, dimension, bin)`.
#[derive(Debug, Clone)]
pub struct ActionLogits<T> {
    pub values: Array3<T>,
}

impl<T: Scalar> ActionLogits<T> {
    pub fn new(values: Array3<T>) -> Result<ActionLogits<T>> {
        let (_, dims, bins) = values.dim();
        if dims != ACTION_DIMS || bins != NUM_BINS {
            return Err(Error::Shape(format!(
                "action logits must be (H, {ACTION_DIMS}, {NUM_BINS}), got {:?}",
                values.dim()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::Input("action logits contain non-finite values".into()));
        }
        Ok(ActionLogits { values })
    }

    pub fn horizon(&self) -> usize {
        self.values.dim().0
    }
}

/// Per-dimension argmax over bins at horizon step 0; ties break toward the
/// lowest bin index.
pub fn select_action<T: Scalar>(logits: &ActionLogits<T>) -> DiscretizedAction {
    let mut bins = [0u16; ACTION_DIMS];
    for dim in 0..ACTION_DIMS {
        let row = logits.values.slice(nds![0, dim, ..]);
        let mut best = 0usize;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        bins[dim] = best as u16;
    }
    DiscretizedAction::new(bins).expect("argmax index below NUM_BINS")
}

/// Shared projection from decoder output tokens to per-slot bin logits.
///
/// One linear map `d -> horizon * 256` is applied to each of the 11 decoder
/// tokens; the output is rearranged so each row is one `(sample, step,
/// dimension)` slot over 256 bins.
#[derive(Debug, Clone)]
pub struct ActionHead {
    pub proj: Linear,
    pub horizon: usize,
}

pub struct ActionHeadCache<T> {
    c_proj: LinearCache<T>,
    batch: usize,
}

impl ActionHead {
    pub fn new<T: Scalar, R: Rng>(
        p: &mut Params<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        horizon: usize,
    ) -> ActionHead {
        ActionHead {
            proj: Linear::new(p, rng, &format!("{name}.proj"), dim, horizon * NUM_BINS),
            horizon,
        }
    }

    /// Maps `(B * 11, d)` tokens to `(B * horizon * 11, 256)` logit rows,
    /// ordered by sample, then step, then dimension.
    pub fn forward<T: Scalar>(
        &self,
        p: &Params<T>,
        tokens: &Array2<T>,
    ) -> (Array2<T>, ActionHeadCache<T>) {
        assert_eq!(tokens.nrows() % ACTION_DIMS, 0, "token rows not divisible by 11");
        let batch = tokens.nrows() / ACTION_DIMS;
        let (wide, c_proj) = self.proj.forward(p, tokens);
        let h = self.horizon;
        let mut out = Array2::zeros((batch * h * ACTION_DIMS, NUM_BINS));
        for b in 0..batch {
            for step in 0..h {
                for dim in 0..ACTION_DIMS {
                    let src = wide.slice(nds![b * ACTION_DIMS + dim, step * NUM_BINS..(step + 1) * NUM_BINS]);
                    out.row_mut(b * h * ACTION_DIMS + step * ACTION_DIMS + dim).assign(&src);
                }
            }
        }
        (out, ActionHeadCache { c_proj, batch })
    }

    /// Returns the gradient with respect to the decoder tokens.
    pub fn backward<T: Scalar>(
        &self,
        p: &mut Params<T>,
        cache: &ActionHeadCache<T>,
        dlogits: &Array2<T>,
    ) -> Array2<T> {
        let h = self.horizon;
        let mut dwide = Array2::zeros((cache.batch * ACTION_DIMS, h * NUM_BINS));
        for b in 0..cache.batch {
            for step in 0..h {
                for dim in 0..ACTION_DIMS {
                    let src = dlogits.row(b * h * ACTION_DIMS + step * ACTION_DIMS + dim);
                    dwide
                        .slice_mut(nds![b * ACTION_DIMS + dim, step * NUM_BINS..(step + 1) * NUM_BINS])
                        .assign(&src);
                }
            }
        }
        self.proj.backward(p, &cache.c_proj, &dwide)
    }

    /// Cache-free forward for inference paths.
    pub fn infer<T: Scalar>(&self, p: &Params<T>, tokens: &Array2<T>) -> Array2<T> {
        assert_eq!(tokens.nrows() % ACTION_DIMS, 0, "token rows not divisible by 11");
        let batch = tokens.nrows() / ACTION_DIMS;
        let wide = self.proj.infer(p, tokens);
        let h = self.horizon;
        let mut out = Array2::zeros((batch * h * ACTION_DIMS, NUM_BINS));
        for b in 0..batch {
            for step in 0..h {
                for dim in 0..ACTION_DIMS {
                    let src = wide.slice(nds![b * ACTION_DIMS + dim, step * NUM_BINS..(step + 1) * NUM_BINS]);
                    out.row_mut(b * h * ACTION_DIMS + step * ACTION_DIMS + dim).assign(&src);
                }
            }
        }
        out
    }
}

/// Prompt latents encoded once and reused across the steps of a rollout.
#[derive(Debug, Clone)]
pub struct PromptContext<T> {
    pub latents: Array2<T>,
}

/// Every learned component of the policy, wired over one parameter arena.
pub struct PolicyModel {
    pub cfg: ModelConfig,
    pub vit: VitEncoder,
    pub prompt_rs: Resampler,
    pub state_rs: Resampler,
    pub fusion: Vec<CrossBlock>,
    /// Learned action-position queries, `(11, d)`.
    pub action_queries: ParamId,
    pub decoder: Vec<CrossBlock>,
    pub head: ActionHead,
    pub align: AlignHead,
    pub pool_vv: AttnPool,
    pub pool_vt: AttnPool,
    pub text: TextEncoder,
}

/// Forward activations consumed by the losses.
pub struct TrainActs<T> {
    /// `(B * H * 11, 256)` action bin logits.
    pub logits: Array2<T>,
    /// `(B * prompt_frames, align_dim)` prompt alignment embeddings.
    pub e_prompt: Array2<T>,
    /// `(B * prompt_frames, align_dim)` robot full-video alignment embeddings.
    pub e_robot: Array2<T>,
    /// `(2B, d)` pooled video vectors for the video-video loss; rows `0..B`
    /// are prompts, rows `B..2B` the paired robot videos.
    pub z_vv: Array2<T>,
    /// `(2B, d)` pooled video vectors for the video-text loss, same layout.
    pub z_vt: Array2<T>,
    /// `(B, d)` text vectors.
    pub z_text: Array2<T>,
}

/// Gradients with respect to every field of [`TrainActs`].
pub struct TrainGrads<T> {
    pub d_logits: Array2<T>,
    pub d_e_prompt: Array2<T>,
    pub d_e_robot: Array2<T>,
    pub d_z_vv: Array2<T>,
    pub d_z_vt: Array2<T>,
    pub d_z_text: Array2<T>,
}

pub struct TrainCaches<T> {
    c_vit: VitCache<T>,
    c_prompt_rs: ResamplerCache<T>,
    c_state_rs: ResamplerCache<T>,
    c_fusion: Vec<CrossBlockCache<T>>,
    c_decoder: Vec<CrossBlockCache<T>>,
    c_head: ActionHeadCache<T>,
    c_align_p: AlignCache<T>,
    c_align_r: AlignCache<T>,
    c_pool_vv: AttnPoolCache<T>,
    c_pool_vt: AttnPoolCache<T>,
    c_text: TextCache<T>,
    batch: usize,
}

impl PolicyModel {
    pub fn new<T: Scalar, R: Rng>(
        p: &mut Params<T>,
        rng: &mut R,
        cfg: &ModelConfig,
        vocab: &[&str],
    ) -> PolicyModel {
        let d = cfg.dim;
        let vit = VitEncoder::new(p, rng, cfg);
        let prompt_rs = Resampler::new(
            p, rng, "prompt_rs", d, cfg.heads, cfg.vit_mlp_ratio, cfg.latents,
            cfg.resampler_layers, cfg.prompt_frames,
        );
        let state_rs = Resampler::new(
            p, rng, "state_rs", d, cfg.heads, cfg.vit_mlp_ratio, cfg.latents,
            cfg.resampler_layers, cfg.state_frames,
        );
        let fusion = (0..cfg.fusion_layers)
            .map(|i| CrossBlock::new(p, rng, &format!("fusion.blk{i}"), d, cfg.heads, cfg.vit_mlp_ratio))
            .collect();
        let action_queries = p.add("policy.queries", normal_init(rng, ACTION_DIMS, d, 0.02), true);
        let decoder = (0..cfg.decoder_layers)
            .map(|i| CrossBlock::new(p, rng, &format!("decoder.blk{i}"), d, cfg.heads, cfg.vit_mlp_ratio))
            .collect();
        let head = ActionHead::new(p, rng, "head", d, cfg.horizon);
        let align = AlignHead::new(p, rng, "align", d, cfg.align_dim);
        let pool_vv = AttnPool::new(p, rng, "pool_vv", d, cfg.heads);
        let pool_vt = AttnPool::new(p, rng, "pool_vt", d, cfg.heads);
        let text = TextEncoder::new(p, rng, "text", vocab, d);
        PolicyModel {
            cfg: cfg.clone(),
            vit,
            prompt_rs,
            state_rs,
            fusion,
            action_queries,
            decoder,
            head,
            align,
            pool_vv,
            pool_vt,
            text,
        }
    }

    fn tile_queries<T: Scalar>(&self, p: &Params<T>, batch: usize) -> Array2<T> {
        let q = p.value(self.action_queries);
        let mut x = Array2::zeros((batch * ACTION_DIMS, q.ncols()));
        for b in 0..batch {
            x.slice_mut(nds![b * ACTION_DIMS..(b + 1) * ACTION_DIMS, ..]).assign(q);
        }
        x
    }

    /// Prompt-aware state tokens: state latents query the prompt latents.
    pub fn fuse<T: Scalar>(
        &self,
        p: &Params<T>,
        z_state: &TokenSet<T>,
        z_prompt: &TokenSet<T>,
    ) -> Result<TokenSet<T>> {
        if z_state.branch != Branch::State || z_prompt.branch != Branch::Prompt {
            return Err(Error::Input(format!(
                "fuse expects (state, prompt) token sets, got ({:?}, {:?})",
                z_state.branch, z_prompt.branch
            )));
        }
        if z_state.tokens.ncols() != z_prompt.tokens.ncols() {
            return Err(Error::Config(format!(
                "token widths differ: state {} vs prompt {}",
                z_state.tokens.ncols(),
                z_prompt.tokens.ncols()
            )));
        }
        let q_len = z_state.tokens.nrows();
        let c_len = z_prompt.tokens.nrows();
        let mut x = z_state.tokens.clone();
        for blk in &self.fusion {
            x = blk.infer(p, &x, &z_prompt.tokens, q_len, c_len);
        }
        TokenSet::new(Branch::Fused, x)
    }

    /// Decodes one sample's fused tokens into `(horizon, 11, 256)` logits.
    pub fn decode_actions<T: Scalar>(
        &self,
        p: &Params<T>,
        fused: &TokenSet<T>,
    ) -> Result<ActionLogits<T>> {
        if fused.branch != Branch::Fused {
            return Err(Error::Input(format!(
                "decode_actions expects fused tokens, got {:?}",
                fused.branch
            )));
        }
        let c_len = fused.tokens.nrows();
        let mut x = self.tile_queries(p, 1);
        for blk in &self.decoder {
            x = blk.infer(p, &x, &fused.tokens, ACTION_DIMS, c_len);
        }
        let rows = self.head.infer(p, &x);
        let h = self.head.horizon;
        let mut values = Array3::zeros((h, ACTION_DIMS, NUM_BINS));
        for step in 0..h {
            for dim in 0..ACTION_DIMS {
                values
                    .slice_mut(nds![step, dim, ..])
                    .assign(&rows.row(step * ACTION_DIMS + dim));
            }
        }
        ActionLogits::new(values)
    }

    /// Encodes a prompt video once for reuse across a rollout.
    pub fn encode_prompt<T: Scalar>(
        &self,
        p: &Params<T>,
        prompt_frames: ArrayView4<'_, T>,
    ) -> Result<PromptContext<T>> {
        if prompt_frames.dim().0 != self.cfg.prompt_frames {
            return Err(Error::Shape(format!(
                "expected {} prompt frames, got {}",
                self.cfg.prompt_frames,
                prompt_frames.dim().0
            )));
        }
        let tokens = self.vit.infer_frames(p, prompt_frames)?;
        let latents = self.prompt_rs.infer(p, &tokens, self.cfg.tokens_per_frame());
        Ok(PromptContext { latents })
    }

    /// One control step against a pre-encoded prompt.
    pub fn step_with_prompt<T: Scalar>(
        &self,
        p: &Params<T>,
        ranges: &ActionRanges,
        prompt: &PromptContext<T>,
        state_frames: ArrayView4<'_, T>,
    ) -> Result<ActionVector> {
        if state_frames.dim().0 != self.cfg.state_frames {
            return Err(Error::Shape(format!(
                "expected {} state frames, got {}",
                self.cfg.state_frames,
                state_frames.dim().0
            )));
        }
        let tokens = self.vit.infer_frames(p, state_frames)?;
        let state_lat = self.state_rs.infer(p, &tokens, self.cfg.tokens_per_frame());
        let z_state = TokenSet::new(Branch::State, state_lat)?;
        let z_prompt = TokenSet::new(Branch::Prompt, prompt.latents.clone())?;
        let fused = self.fuse(p, &z_state, &z_prompt)?;
        let logits = self.decode_actions(p, &fused)?;
        let action = select_action(&logits);
        decode(&action, ranges)
    }

    /// Full composition: encode, resample, fuse, decode, select, and map the
    /// winning bins back to a continuous action.
    pub fn policy_step<T: Scalar>(
        &self,
        p: &Params<T>,
        ranges: &ActionRanges,
        prompt_frames: ArrayView4<'_, T>,
        state_frames: ArrayView4<'_, T>,
    ) -> Result<ActionVector> {
        let prompt = self.encode_prompt(p, prompt_frames)?;
        self.step_with_prompt(p, ranges, &prompt, state_frames)
    }

    /// Batched training forward over pre-patchified frames.
    ///
    /// `patches` stacks, in order: B prompt videos of `prompt_frames` frames,
    /// B robot full videos of `prompt_frames` frames, and B state clips of
    /// `state_frames` frames, each frame contributing P patch rows.
    pub fn train_forward<T: Scalar>(
        &self,
        p: &Params<T>,
        patches: &Array2<T>,
        instruction_ids: &[Vec<usize>],
    ) -> (TrainActs<T>, TrainCaches<T>) {
        let ptok = self.cfg.tokens_per_frame();
        let batch = instruction_ids.len();
        let fp = self.cfg.prompt_frames;
        let fs = self.cfg.state_frames;
        let lat = self.cfg.latents;
        assert_eq!(
            patches.nrows(),
            batch * (2 * fp + fs) * ptok,
            "patch rows disagree with batch layout"
        );
        let video_rows = batch * fp * ptok;

        let (tokens, c_vit) = self.vit.forward(p, patches);
        let pr_tokens = tokens.slice(nds![0..2 * video_rows, ..]).to_owned();
        let st_tokens = tokens.slice(nds![2 * video_rows.., ..]).to_owned();

        let (lat_pr, c_prompt_rs) = self.prompt_rs.forward(p, &pr_tokens, ptok);
        let (lat_st, c_state_rs) = self.state_rs.forward(p, &st_tokens, ptok);

        let prompt_lat = lat_pr.slice(nds![0..batch * lat, ..]).to_owned();
        let mut fused = lat_st.clone();
        let mut c_fusion = Vec::with_capacity(self.fusion.len());
        for blk in &self.fusion {
            let (y, c) = blk.forward(p, &fused, &prompt_lat, lat, lat);
            fused = y;
            c_fusion.push(c);
        }

        let mut dec = self.tile_queries(p, batch);
        let mut c_decoder = Vec::with_capacity(self.decoder.len());
        for blk in &self.decoder {
            let (y, c) = blk.forward(p, &dec, &fused, ACTION_DIMS, lat);
            dec = y;
            c_decoder.push(c);
        }
        let (logits, c_head) = self.head.forward(p, &dec);

        let (e_prompt, c_align_p) =
            self.align.forward(p, &tokens.slice(nds![0..video_rows, ..]).to_owned(), ptok);
        let (e_robot, c_align_r) =
            self.align.forward(p, &tokens.slice(nds![video_rows..2 * video_rows, ..]).to_owned(), ptok);

        let (z_vv, c_pool_vv) = self.pool_vv.forward(p, &lat_pr, lat);
        let (z_vt, c_pool_vt) = self.pool_vt.forward(p, &lat_pr, lat);
        let (z_text, c_text) = self.text.forward(p, instruction_ids);

        let acts = TrainActs { logits, e_prompt, e_robot, z_vv, z_vt, z_text };
        let caches = TrainCaches {
            c_vit,
            c_prompt_rs,
            c_state_rs,
            c_fusion,
            c_decoder,
            c_head,
            c_align_p,
            c_align_r,
            c_pool_vv,
            c_pool_vt,
            c_text,
            batch,
        };
        (acts, caches)
    }

    /// Batched training backward; accumulates every parameter gradient.
    pub fn train_backward<T: Scalar>(
        &self,
        p: &mut Params<T>,
        caches: &TrainCaches<T>,
        g: &TrainGrads<T>,
    ) {
        let ptok = self.cfg.tokens_per_frame();
        let batch = caches.batch;
        let fp = self.cfg.prompt_frames;
        let fs = self.cfg.state_frames;
        let lat = self.cfg.latents;
        let d = self.cfg.dim;
        let video_rows = batch * fp * ptok;

        self.text.backward(p, &caches.c_text, &g.d_z_text);

        let mut d_lat_pr = self.pool_vv.backward(p, &caches.c_pool_vv, &g.d_z_vv);
        d_lat_pr += &self.pool_vt.backward(p, &caches.c_pool_vt, &g.d_z_vt);

        let d_dec = self.head.backward(p, &caches.c_head, &g.d_logits);
        let mut dq = d_dec;
        let mut d_fused: Array2<T> = Array2::zeros((batch * lat, d));
        for (blk, c) in self.decoder.iter().zip(&caches.c_decoder).rev() {
            let (dx, dctx) = blk.backward(p, c, &dq);
            dq = dx;
            d_fused += &dctx;
        }
        let mut dqueries = Array2::zeros((ACTION_DIMS, d));
        for b in 0..batch {
            dqueries += &dq.slice(nds![b * ACTION_DIMS..(b + 1) * ACTION_DIMS, ..]);
        }
        p.acc_grad(self.action_queries, &dqueries);

        let mut d_state_lat = d_fused;
        let mut d_prompt_ctx: Array2<T> = Array2::zeros((batch * lat, d));
        for (blk, c) in self.fusion.iter().zip(&caches.c_fusion).rev() {
            let (dx, dctx) = blk.backward(p, c, &d_state_lat);
            d_state_lat = dx;
            d_prompt_ctx += &dctx;
        }
        {
            let mut first = d_lat_pr.slice_mut(nds![0..batch * lat, ..]);
            first += &d_prompt_ctx;
        }

        let d_pr_tokens = self.prompt_rs.backward(p, &caches.c_prompt_rs, &d_lat_pr);
        let d_st_tokens = self.state_rs.backward(p, &caches.c_state_rs, &d_state_lat);

        let mut dtokens = Array2::zeros((batch * (2 * fp + fs) * ptok, d));
        dtokens.slice_mut(nds![0..2 * video_rows, ..]).assign(&d_pr_tokens);
        dtokens.slice_mut(nds![2 * video_rows.., ..]).assign(&d_st_tokens);
        {
            let d_ep = self.align.backward(p, &caches.c_align_p, &g.d_e_prompt);
            let mut rows = dtokens.slice_mut(nds![0..video_rows, ..]);
            rows += &d_ep;
        }
        {
            let d_er = self.align.backward(p, &caches.c_align_r, &g.d_e_robot);
            let mut rows = dtokens.slice_mut(nds![video_rows..2 * video_rows, ..]);
            rows += &d_er;
        }
        self.vit.backward(p, &caches.c_vit, &dtokens);
    }

    /// Patchifies a frame stack laid out as in [`PolicyModel::train_forward`].
    pub fn patchify_batch<T: Scalar>(&self, frames: ArrayView4<'_, T>) -> Result<Array2<T>> {
        patchify(frames, self.cfg.frame_size, self.cfg.patch_size)
    }
}
