//! Pre-norm transformer blocks built from the attention and MLP layers.

use super::attention::{AttnCache, MultiHeadAttention};
use super::layers::{LayerNorm, LayerNormCache, Mlp, MlpCache};
use super::{Params, Scalar};
use ndarray::Array2;
use rand::Rng;

/// Pre-norm self-attention block: `x + attn(ln(x))` then `x + mlp(ln(x))`.
#[derive(Debug, Clone)]
pub struct SelfBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

pub struct SelfBlockCache<T> {
    c_ln1: LayerNormCache<T>,
    c_attn: AttnCache<T>,
    c_ln2: LayerNormCache<T>,
    c_mlp: MlpCache<T>,
}

impl SelfBlock {
    pub fn new<T: Scalar, R: Rng>(
        p: &mut Params<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> SelfBlock {
        SelfBlock {
            ln1: LayerNorm::new(p, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(p, rng, &format!("{name}.attn"), dim, heads),
            ln2: LayerNorm::new(p, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(p, rng, &format!("{name}.mlp"), dim, dim * mlp_ratio),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        p: &Params<T>,
        x: &Array2<T>,
        seq_len: usize,
    ) -> (Array2<T>, SelfBlockCache<T>) {
        let (n1, c_ln1) = self.ln1.forward(p, x);
        let (a, c_attn) = self.attn.forward(p, &n1, &n1, seq_len, seq_len);
        let h = x + &a;
        let (n2, c_ln2) = self.ln2.forward(p, &h);
        let (m, c_mlp) = self.mlp.forward(p, &n2);
        let y = &h + &m;
        (y, SelfBlockCache { c_ln1, c_attn, c_ln2, c_mlp })
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &mut Params<T>,
        cache: &SelfBlockCache<T>,
        dy: &Array2<T>,
    ) -> Array2<T> {
        let dm = self.mlp.backward(p, &cache.c_mlp, dy);
        let dh = dy + &self.ln2.backward(p, &cache.c_ln2, &dm);
        let (da_q, da_c) = self.attn.backward(p, &cache.c_attn, &dh);
        let dn1 = da_q + da_c;
        &dh + &self.ln1.backward(p, &cache.c_ln1, &dn1)
    }

    /// Cache-free forward for inference paths.
    pub fn infer<T: Scalar>(&self, p: &Params<T>, x: &Array2<T>, seq_len: usize) -> Array2<T> {
        let n1 = self.ln1.infer(p, x);
        let h = x + &self.attn.infer(p, &n1, &n1, seq_len, seq_len);
        let m = self.mlp.infer(p, &self.ln2.infer(p, &h));
        h + m
    }
}

/// Pre-norm cross-attention block.
///
/// In order: cross-attend queries to a fixed context, self-attend among the
/// queries, then the MLP, each with a residual connection. The context is
/// layer-normed per block and receives gradients.
#[derive(Debug, Clone)]
pub struct CrossBlock {
    pub ln_q: LayerNorm,
    pub ln_c: LayerNorm,
    pub cross: MultiHeadAttention,
    pub ln_s: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln_m: LayerNorm,
    pub mlp: Mlp,
}

pub struct CrossBlockCache<T> {
    c_ln_q: LayerNormCache<T>,
    c_ln_c: LayerNormCache<T>,
    c_cross: AttnCache<T>,
    c_ln_s: LayerNormCache<T>,
    c_self: AttnCache<T>,
    c_ln_m: LayerNormCache<T>,
    c_mlp: MlpCache<T>,
}

impl CrossBlock {
    pub fn new<T: Scalar, R: Rng>(
        p: &mut Params<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> CrossBlock {
        CrossBlock {
            ln_q: LayerNorm::new(p, &format!("{name}.ln_q"), dim),
            ln_c: LayerNorm::new(p, &format!("{name}.ln_c"), dim),
            cross: MultiHeadAttention::new(p, rng, &format!("{name}.cross"), dim, heads),
            ln_s: LayerNorm::new(p, &format!("{name}.ln_s"), dim),
            self_attn: MultiHeadAttention::new(p, rng, &format!("{name}.self"), dim, heads),
            ln_m: LayerNorm::new(p, &format!("{name}.ln_m"), dim),
            mlp: Mlp::new(p, rng, &format!("{name}.mlp"), dim, dim * mlp_ratio),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        p: &Params<T>,
        x: &Array2<T>,
        context: &Array2<T>,
        q_len: usize,
        c_len: usize,
    ) -> (Array2<T>, CrossBlockCache<T>) {
        let (nq, c_ln_q) = self.ln_q.forward(p, x);
        let (nc, c_ln_c) = self.ln_c.forward(p, context);
        let (a, c_cross) = self.cross.forward(p, &nq, &nc, q_len, c_len);
        let h = x + &a;
        let (ns, c_ln_s) = self.ln_s.forward(p, &h);
        let (sa, c_self) = self.self_attn.forward(p, &ns, &ns, q_len, q_len);
        let g = &h + &sa;
        let (nm, c_ln_m) = self.ln_m.forward(p, &g);
        let (m, c_mlp) = self.mlp.forward(p, &nm);
        let y = &g + &m;
        let cache = CrossBlockCache { c_ln_q, c_ln_c, c_cross, c_ln_s, c_self, c_ln_m, c_mlp };
        (y, cache)
    }

    /// Returns `(dx, dcontext)`.
    pub fn backward<T: Scalar>(
        &self,
        p: &mut Params<T>,
        cache: &CrossBlockCache<T>,
        dy: &Array2<T>,
    ) -> (Array2<T>, Array2<T>) {
        let dm = self.mlp.backward(p, &cache.c_mlp, dy);
        let dg = dy + &self.ln_m.backward(p, &cache.c_ln_m, &dm);
        let (ds_q, ds_c) = self.self_attn.backward(p, &cache.c_self, &dg);
        let dns = ds_q + ds_c;
        let dh = &dg + &self.ln_s.backward(p, &cache.c_ln_s, &dns);
        let (da_q, da_c) = self.cross.backward(p, &cache.c_cross, &dh);
        let dx = &dh + &self.ln_q.backward(p, &cache.c_ln_q, &da_q);
        let dcontext = self.ln_c.backward(p, &cache.c_ln_c, &da_c);
        (dx, dcontext)
    }

    /// Cache-free forward for inference paths.
    pub fn infer<T: Scalar>(
        &self,
        p: &Params<T>,
        x: &Array2<T>,
        context: &Array2<T>,
        q_len: usize,
        c_len: usize,
    ) -> Array2<T> {
        let nq = self.ln_q.infer(p, x);
        let nc = self.ln_c.infer(p, context);
        let h = x + &self.cross.infer(p, &nq, &nc, q_len, c_len);
        let ns = self.ln_s.infer(p, &h);
        let g = &h + &self.self_attn.infer(p, &ns, &ns, q_len, q_len);
        let m = self.mlp.infer(p, &self.ln_m.infer(p, &g));
        g + m
    }
}
