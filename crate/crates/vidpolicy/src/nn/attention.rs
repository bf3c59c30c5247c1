//! Chunked multi-head attention.
//!
//! Inputs are stacks of equal-length sequences: a `(rows, dim)` matrix plus
//! a per-sequence length. Attention runs independently inside each chunk,
//! so one module serves batched per-frame encoding, resampling, fusion and
//! decoding. Self-attention is the special case `queries == context`.

use super::layers::{Linear, LinearCache};
use super::{s, ParamId, Params, Scalar};
use ndarray::{s as nds, Array2};
use rand::Rng;

/// Row-wise softmax, numerically stabilized, in place.
pub fn softmax_rows<T: Scalar>(x: &mut Array2<T>) {
    for mut row in x.rows_mut() {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Gradient through a row-wise softmax with output `y`.
pub fn softmax_backward<T: Scalar>(y: &Array2<T>, dy: &Array2<T>) -> Array2<T> {
    let mut dx = dy * y;
    for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
        let dot = drow.sum();
        drow.scaled_add(-dot, &yrow);
    }
    dx
}

/// Multi-head cross-attention with output projection.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Forward activations for one attention call.
pub struct AttnCache<T> {
    cq: LinearCache<T>,
    ck: LinearCache<T>,
    cv: LinearCache<T>,
    co: LinearCache<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    /// Attention probabilities, one matrix per (chunk, head).
    probs: Vec<Array2<T>>,
    q_len: usize,
    c_len: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng>(
        p: &mut Params<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> MultiHeadAttention {
        assert!(dim % heads == 0, "heads must divide dim");
        MultiHeadAttention {
            wq: Linear::new(p, rng, &format!("{name}.wq"), dim, dim),
            wk: Linear::new(p, rng, &format!("{name}.wk"), dim, dim),
            wv: Linear::new(p, rng, &format!("{name}.wv"), dim, dim),
            wo: Linear::new(p, rng, &format!("{name}.wo"), dim, dim),
            heads,
            dim,
        }
    }

    /// Attends `queries` to `context`, each a stack of equal-length chunks.
    /// Chunk counts must agree between the two sides.
    pub fn forward<T: Scalar>(
        &self,
        p: &Params<T>,
        queries: &Array2<T>,
        context: &Array2<T>,
        q_len: usize,
        c_len: usize,
    ) -> (Array2<T>, AttnCache<T>) {
        let chunks = queries.nrows() / q_len;
        assert_eq!(queries.nrows() % q_len, 0, "query rows not divisible by q_len");
        assert_eq!(context.nrows(), chunks * c_len, "context chunk count mismatch");
        let dh = self.dim / self.heads;
        let scale = s::<T>(1.0 / (dh as f64).sqrt());

        let (q, cq) = self.wq.forward(p, queries);
        let (k, ck) = self.wk.forward(p, context);
        let (v, cv) = self.wv.forward(p, context);

        let mut merged = Array2::zeros((queries.nrows(), self.dim));
        let mut probs = Vec::with_capacity(chunks * self.heads);
        for c in 0..chunks {
            let qr = c * q_len..(c + 1) * q_len;
            let cr = c * c_len..(c + 1) * c_len;
            for h in 0..self.heads {
                let hc = h * dh..(h + 1) * dh;
                let qh = q.slice(nds![qr.clone(), hc.clone()]);
                let kh = k.slice(nds![cr.clone(), hc.clone()]);
                let vh = v.slice(nds![cr.clone(), hc.clone()]);
                let mut scores = qh.dot(&kh.t());
                scores.mapv_inplace(|x| x * scale);
                softmax_rows(&mut scores);
                let out = scores.dot(&vh);
                merged.slice_mut(nds![qr.clone(), hc]).assign(&out);
                probs.push(scores);
            }
        }
        let (y, co) = self.wo.forward(p, &merged);
        let cache = AttnCache { cq, ck, cv, co, q, k, v, probs, q_len, c_len };
        (y, cache)
    }

    /// Returns `(d_queries, d_context)`. For self-attention callers add the
    /// two gradients together.
    pub fn backward<T: Scalar>(
        &self,
        p: &mut Params<T>,
        cache: &AttnCache<T>,
        dy: &Array2<T>,
    ) -> (Array2<T>, Array2<T>) {
        let dh = self.dim / self.heads;
        let scale = s::<T>(1.0 / (dh as f64).sqrt());
        let chunks = cache.q.nrows() / cache.q_len;

        let dmerged = self.wo.backward(p, &cache.co, dy);
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for c in 0..chunks {
            let qr = c * cache.q_len..(c + 1) * cache.q_len;
            let cr = c * cache.c_len..(c + 1) * cache.c_len;
            for h in 0..self.heads {
                let hc = h * dh..(h + 1) * dh;
                let probs = &cache.probs[c * self.heads + h];
                let dout = dmerged.slice(nds![qr.clone(), hc.clone()]);
                let qh = cache.q.slice(nds![qr.clone(), hc.clone()]);
                let kh = cache.k.slice(nds![cr.clone(), hc.clone()]);
                let vh = cache.v.slice(nds![cr.clone(), hc.clone()]);

                let dvh = probs.t().dot(&dout);
                let dprobs = dout.dot(&vh.t());
                let mut dscores = softmax_backward(probs, &dprobs);
                dscores.mapv_inplace(|x| x * scale);
                let dqh = dscores.dot(&kh);
                let dkh = dscores.t().dot(&qh);

                dq.slice_mut(nds![qr.clone(), hc.clone()]).assign(&dqh);
                dk.slice_mut(nds![cr.clone(), hc.clone()]).assign(&dkh);
                dv.slice_mut(nds![cr.clone(), hc]).assign(&dvh);
            }
        }
        let dqueries = self.wq.backward(p, &cache.cq, &dq);
        let dcontext =
            self.wk.backward(p, &cache.ck, &dk) + self.wv.backward(p, &cache.cv, &dv);
        (dqueries, dcontext)
    }

    /// Cache-free forward for inference paths.
    pub fn infer<T: Scalar>(
        &self,
        p: &Params<T>,
        queries: &Array2<T>,
        context: &Array2<T>,
        q_len: usize,
        c_len: usize,
    ) -> Array2<T> {
        let chunks = queries.nrows() / q_len;
        assert_eq!(queries.nrows() % q_len, 0, "query rows not divisible by q_len");
        assert_eq!(context.nrows(), chunks * c_len, "context chunk count mismatch");
        let dh = self.dim / self.heads;
        let scale = s::<T>(1.0 / (dh as f64).sqrt());

        let q = self.wq.infer(p, queries);
        let k = self.wk.infer(p, context);
        let v = self.wv.infer(p, context);

        let mut merged = Array2::zeros((queries.nrows(), self.dim));
        for c in 0..chunks {
            let qr = c * q_len..(c + 1) * q_len;
            let cr = c * c_len..(c + 1) * c_len;
            for h in 0..self.heads {
                let hc = h * dh..(h + 1) * dh;
                let qh = q.slice(nds![qr.clone(), hc.clone()]);
                let kh = k.slice(nds![cr.clone(), hc.clone()]);
                let vh = v.slice(nds![cr.clone(), hc.clone()]);
                let mut scores = qh.dot(&kh.t());
                scores.mapv_inplace(|x| x * scale);
                softmax_rows(&mut scores);
                let out = scores.dot(&vh);
                merged.slice_mut(nds![qr.clone(), hc]).assign(&out);
            }
        }
        self.wo.infer(p, &merged)
    }
}

/// Attention pooling: a single learned query summarizes each chunk into one
/// output row.
#[derive(Debug, Clone)]
pub struct AttnPool {
    pub query: ParamId,
    pub attn: MultiHeadAttention,
}

pub struct AttnPoolCache<T> {
    attn: AttnCache<T>,
}

impl AttnPool {
    pub fn new<T: Scalar, R: Rng>(
        p: &mut Params<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> AttnPool {
        let query = p.add(&format!("{name}.query"), super::normal_init(rng, 1, dim, 0.02), true);
        AttnPool { query, attn: MultiHeadAttention::new(p, rng, name, dim, heads) }
    }

    /// Pools `(chunks * c_len, dim)` context rows into `(chunks, dim)`.
    pub fn forward<T: Scalar>(
        &self,
        p: &Params<T>,
        context: &Array2<T>,
        c_len: usize,
    ) -> (Array2<T>, AttnPoolCache<T>) {
        let chunks = context.nrows() / c_len;
        let mut queries = Array2::zeros((chunks, self.attn.dim));
        for c in 0..chunks {
            queries.row_mut(c).assign(&p.value(self.query).row(0));
        }
        let (y, attn) = self.attn.forward(p, &queries, context, 1, c_len);
        (y, AttnPoolCache { attn })
    }

    /// Returns the context gradient; the query gradient accumulates in place.
    pub fn backward<T: Scalar>(
        &self,
        p: &mut Params<T>,
        cache: &AttnPoolCache<T>,
        dy: &Array2<T>,
    ) -> Array2<T> {
        let (dqueries, dcontext) = self.attn.backward(p, &cache.attn, dy);
        let dquery = dqueries.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
        p.acc_grad(self.query, &dquery);
        dcontext
    }

    /// Cache-free forward for inference paths.
    pub fn infer<T: Scalar>(&self, p: &Params<T>, context: &Array2<T>, c_len: usize) -> Array2<T> {
        let chunks = context.nrows() / c_len;
        let mut queries = Array2::zeros((chunks, self.attn.dim));
        for c in 0..chunks {
            queries.row_mut(c).assign(&p.value(self.query).row(0));
        }
        self.attn.infer(p, &queries, context, 1, c_len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{fd_max_rel_err, normal_init};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(1)
    }

    #[test]
    fn softmax_rows_sum_to_one_and_order_is_preserved() {
        let mut x = ndarray::array![[1.0f64, 2.0, 3.0], [1000.0, 1000.0, 999.0]];
        softmax_rows(&mut x);
        for row in x.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!(x[(0, 2)] > x[(0, 1)] && x[(0, 1)] > x[(0, 0)]);
        // Stabilized against overflow: large logits still give finite values.
        assert!((x[(1, 0)] - x[(1, 1)]).abs() < 1e-12);
    }

    #[test]
    fn chunked_attention_is_independent_per_chunk() {
        let mut p: Params<f64> = Params::new();
        let attn = MultiHeadAttention::new(&mut p, &mut rng(), "a", 8, 2);
        let a = normal_init(&mut rng(), 3, 8, 1.0);
        let b = normal_init(&mut rng(), 3, 8, 1.0);
        // Stack the two sequences and attend with chunk length 3.
        let mut stacked = Array2::zeros((6, 8));
        stacked.slice_mut(nds![0..3, ..]).assign(&a);
        stacked.slice_mut(nds![3..6, ..]).assign(&b);
        let (y_stacked, _) = attn.forward(&p, &stacked, &stacked, 3, 3);
        let (ya, _) = attn.forward(&p, &a, &a, 3, 3);
        let (yb, _) = attn.forward(&p, &b, &b, 3, 3);
        let mut expect = Array2::zeros((6, 8));
        expect.slice_mut(nds![0..3, ..]).assign(&ya);
        expect.slice_mut(nds![3..6, ..]).assign(&yb);
        let diff = (&y_stacked - &expect).mapv(f64::abs).sum();
        assert!(diff < 1e-12, "chunks leaked into each other: {diff}");
    }

    #[test]
    fn self_attention_gradients_match_finite_differences() {
        let mut p: Params<f64> = Params::new();
        let attn = MultiHeadAttention::new(&mut p, &mut rng(), "a", 6, 2);
        let x = normal_init(&mut rng(), 4, 6, 1.0);
        let run = |p: &Params<f64>| {
            let (y, _) = attn.forward(p, &x, &x, 2, 2);
            y.mapv(|v| v * v).sum()
        };
        let (y, cache) = attn.forward(&p, &x, &x, 2, 2);
        attn.backward(&mut p, &cache, &y.mapv(|v| 2.0 * v));
        let err = fd_max_rel_err(&mut p, &mut |p| run(p), 1e-4, 1e-4, 64);
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn cross_attention_input_gradients_match_finite_differences() {
        // Perturb the inputs through linear pre-layers so input gradients
        // are exercised as parameter gradients.
        let mut p: Params<f64> = Params::new();
        let pre_q = Linear::new(&mut p, &mut rng(), "pq", 5, 6);
        let pre_c = Linear::new(&mut p, &mut rng(), "pc", 5, 6);
        let attn = MultiHeadAttention::new(&mut p, &mut rng(), "a", 6, 3);
        let xq = normal_init(&mut rng(), 2, 5, 1.0);
        let xc = normal_init(&mut rng(), 7, 5, 1.0);
        let run = |p: &Params<f64>| {
            let (q, _) = pre_q.forward(p, &xq);
            let (c, _) = pre_c.forward(p, &xc);
            let (y, _) = attn.forward(p, &q, &c, 2, 7);
            y.sum()
        };
        let (q, cq) = pre_q.forward(&p, &xq);
        let (c, cc) = pre_c.forward(&p, &xc);
        let (y, cache) = attn.forward(&p, &q, &c, 2, 7);
        let (dq, dc) = attn.backward(&mut p, &cache, &Array2::ones(y.raw_dim()));
        pre_q.backward(&mut p, &cq, &dq);
        pre_c.backward(&mut p, &cc, &dc);
        let err = fd_max_rel_err(&mut p, &mut |p| run(p), 1e-4, 1e-4, 64);
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn attn_pool_reduces_chunks_to_single_rows() {
        let mut p: Params<f64> = Params::new();
        let pool = AttnPool::new(&mut p, &mut rng(), "pool", 8, 2);
        let ctx = normal_init(&mut rng(), 10, 8, 1.0);
        let (y, _) = pool.forward(&p, &ctx, 5);
        assert_eq!(y.dim(), (2, 8));
        assert_eq!(y, pool.infer(&p, &ctx, 5));
    }

    #[test]
    fn attn_pool_gradients_match_finite_differences() {
        let mut p: Params<f64> = Params::new();
        let pool = AttnPool::new(&mut p, &mut rng(), "pool", 6, 2);
        let ctx = normal_init(&mut rng(), 6, 6, 1.0);
        let run = |p: &Params<f64>| {
            let (y, _) = pool.forward(p, &ctx, 3);
            y.mapv(|v| v * v).sum()
        };
        let (y, cache) = pool.forward(&p, &ctx, 3);
        pool.backward(&mut p, &cache, &y.mapv(|v| 2.0 * v));
        let err = fd_max_rel_err(&mut p, &mut |p| run(p), 1e-4, 1e-4, 64);
        assert!(err < 1e-6, "max rel err {err}");
    }
}
