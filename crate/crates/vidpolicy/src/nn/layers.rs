//! Position-wise layers: linear projection, layer norm, GELU MLP and a
//! token embedding table.
//!
//! Layers operate on `(rows, dim)` matrices where every row is one token,
//! so stacked sequences of equal length share a single matrix multiply.

use super::{s, normal_init, xavier_init, ParamId, Params, Scalar};
use ndarray::{Array1, Array2, Axis};
use rand::Rng;

/// Affine projection `y = x W + b` with `W: (din, dout)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

/// Forward activations needed by [`Linear::backward`].
pub struct LinearCache<T> {
    x: Array2<T>,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        p: &mut Params<T>,
        rng: &mut R,
        name: &str,
        din: usize,
        dout: usize,
    ) -> Linear {
        let w = p.add(&format!("{name}.w"), xavier_init(rng, din, dout), true);
        let b = p.add(&format!("{name}.b"), Array2::zeros((1, dout)), false);
        Linear { w, b }
    }

    pub fn forward<T: Scalar>(
        &self,
        p: &Params<T>,
        x: &Array2<T>,
    ) -> (Array2<T>, LinearCache<T>) {
        let y = x.dot(p.value(self.w)) + p.value(self.b);
        (y, LinearCache { x: x.clone() })
    }

    /// Accumulates weight gradients and returns the input gradient.
    pub fn backward<T: Scalar>(
        &self,
        p: &mut Params<T>,
        cache: &LinearCache<T>,
        dy: &Array2<T>,
    ) -> Array2<T> {
        let dw = cache.x.t().dot(dy);
        let db = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dx = dy.dot(&p.value(self.w).t());
        p.acc_grad(self.w, &dw);
        p.acc_grad(self.b, &db);
        dx
    }

    /// Cache-free forward for inference paths.
    pub fn infer<T: Scalar>(&self, p: &Params<T>, x: &Array2<T>) -> Array2<T> {
        x.dot(p.value(self.w)) + p.value(self.b)
    }

    /// Like `backward` but skips the input gradient, for graph roots whose
    /// inputs are data rather than activations.
    pub fn backward_no_input<T: Scalar>(
        &self,
        p: &mut Params<T>,
        cache: &LinearCache<T>,
        dy: &Array2<T>,
    ) {
        let dw = cache.x.t().dot(dy);
        let db = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        p.acc_grad(self.w, &dw);
        p.acc_grad(self.b, &db);
    }
}

/// Row-wise layer normalization with learned gain and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub struct LayerNormCache<T> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Scalar>(p: &mut Params<T>, name: &str, dim: usize) -> LayerNorm {
        let gamma = p.add(&format!("{name}.gamma"), Array2::ones((1, dim)), false);
        let beta = p.add(&format!("{name}.beta"), Array2::zeros((1, dim)), false);
        LayerNorm { gamma, beta }
    }

    pub fn forward<T: Scalar>(
        &self,
        p: &Params<T>,
        x: &Array2<T>,
    ) -> (Array2<T>, LayerNormCache<T>) {
        let d = s::<T>(x.ncols() as f64);
        let mean = x.sum_axis(Axis(1)) / d;
        let centered = x - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
        let inv_std = var.mapv(|v| T::one() / (v + s::<T>(LN_EPS)).sqrt());
        let xhat = &centered * &inv_std.view().insert_axis(Axis(1));
        let y = &xhat * p.value(self.gamma) + p.value(self.beta);
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &mut Params<T>,
        cache: &LayerNormCache<T>,
        dy: &Array2<T>,
    ) -> Array2<T> {
        let d = s::<T>(dy.ncols() as f64);
        let dgamma = (dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        let dbeta = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dxhat = dy * p.value(self.gamma);
        // dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
        let m1 = (dxhat.sum_axis(Axis(1)) / d).insert_axis(Axis(1));
        let m2 = ((&dxhat * &cache.xhat).sum_axis(Axis(1)) / d).insert_axis(Axis(1));
        let dx = (&dxhat - &m1 - &cache.xhat * &m2) * &cache.inv_std.view().insert_axis(Axis(1));
        p.acc_grad(self.gamma, &dgamma);
        p.acc_grad(self.beta, &dbeta);
        dx
    }

    /// Cache-free forward for inference paths.
    pub fn infer<T: Scalar>(&self, p: &Params<T>, x: &Array2<T>) -> Array2<T> {
        let d = s::<T>(x.ncols() as f64);
        let mean = x.sum_axis(Axis(1)) / d;
        let centered = x - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
        let inv_std = var.mapv(|v| T::one() / (v + s::<T>(LN_EPS)).sqrt());
        let xhat = &centered * &inv_std.view().insert_axis(Axis(1));
        &xhat * p.value(self.gamma) + p.value(self.beta)
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2 / pi)
const GELU_A: f64 = 0.044715;

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let u = s::<T>(GELU_C) * (x + s::<T>(GELU_A) * x * x * x);
    s::<T>(0.5) * x * (T::one() + u.tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let u = s::<T>(GELU_C) * (x + s::<T>(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = s::<T>(GELU_C) * (T::one() + s::<T>(3.0 * GELU_A) * x * x);
    s::<T>(0.5) * (T::one() + t) + s::<T>(0.5) * x * (T::one() - t * t) * du
}

/// Two-layer MLP with tanh-approximate GELU.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct MlpCache<T> {
    c1: LinearCache<T>,
    pre: Array2<T>,
    c2: LinearCache<T>,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng>(
        p: &mut Params<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Mlp {
        Mlp {
            fc1: Linear::new(p, rng, &format!("{name}.fc1"), dim, hidden),
            fc2: Linear::new(p, rng, &format!("{name}.fc2"), hidden, dim),
        }
    }

    pub fn forward<T: Scalar>(&self, p: &Params<T>, x: &Array2<T>) -> (Array2<T>, MlpCache<T>) {
        let (pre, c1) = self.fc1.forward(p, x);
        let act = pre.mapv(gelu);
        let (y, c2) = self.fc2.forward(p, &act);
        (y, MlpCache { c1, pre, c2 })
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &mut Params<T>,
        cache: &MlpCache<T>,
        dy: &Array2<T>,
    ) -> Array2<T> {
        let dact = self.fc2.backward(p, &cache.c2, dy);
        let dpre = dact * cache.pre.mapv(gelu_grad);
        self.fc1.backward(p, &cache.c1, &dpre)
    }

    /// Cache-free forward for inference paths.
    pub fn infer<T: Scalar>(&self, p: &Params<T>, x: &Array2<T>) -> Array2<T> {
        self.fc2.infer(p, &self.fc1.infer(p, x).mapv(gelu))
    }
}

/// Lookup table mapping token ids to learned rows.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
}

pub struct EmbeddingCache {
    ids: Vec<usize>,
}

impl Embedding {
    pub fn new<T: Scalar, R: Rng>(
        p: &mut Params<T>,
        rng: &mut R,
        name: &str,
        vocab: usize,
        dim: usize,
    ) -> Embedding {
        let table = p.add(&format!("{name}.table"), normal_init(rng, vocab, dim, 0.02), true);
        Embedding { table }
    }

    pub fn forward<T: Scalar>(
        &self,
        p: &Params<T>,
        ids: &[usize],
    ) -> (Array2<T>, EmbeddingCache) {
        let table = p.value(self.table);
        let mut out = Array2::zeros((ids.len(), table.ncols()));
        for (row, &id) in ids.iter().enumerate() {
            out.row_mut(row).assign(&table.row(id));
        }
        (out, EmbeddingCache { ids: ids.to_vec() })
    }

    pub fn backward<T: Scalar>(&self, p: &mut Params<T>, cache: &EmbeddingCache, dy: &Array2<T>) {
        let mut dtable = Array2::zeros(p.value(self.table).raw_dim());
        for (row, &id) in cache.ids.iter().enumerate() {
            let mut target = dtable.row_mut(id);
            target += &dy.row(row);
        }
        p.acc_grad(self.table, &dtable);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::fd_max_rel_err;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn linear_matches_hand_computation() {
        let mut p: Params<f64> = Params::new();
        let lin = Linear::new(&mut p, &mut rng(), "l", 2, 2);
        p.value_mut(lin.w).assign(&array![[1.0, 2.0], [3.0, 4.0]]);
        p.value_mut(lin.b).assign(&array![[0.5, -0.5]]);
        let (y, _) = lin.forward(&p, &array![[1.0, 1.0]]);
        assert_eq!(y, array![[4.5, 5.5]]);
    }

    #[test]
    fn layernorm_rows_have_zero_mean_unit_variance() {
        let mut p: Params<f64> = Params::new();
        let ln = LayerNorm::new(&mut p, "ln", 8);
        let x = normal_init(&mut rng(), 5, 8, 2.0) + 3.0;
        let (y, _) = ln.forward(&p, &x);
        for row in y.rows() {
            let mean: f64 = row.mean().unwrap();
            let var: f64 = row.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn gelu_matches_reference_points() {
        // Reference values for the tanh approximation.
        assert!((gelu(0.0f64)).abs() < 1e-15);
        assert!((gelu(1.0f64) - 0.8411919906082768).abs() < 1e-12);
        assert!((gelu(-1.0f64) + 0.15880800939172324).abs() < 1e-12);
        // Derivative agrees with central differences.
        for &x in &[-2.0f64, -0.5, 0.0, 0.3, 1.7] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "at {x}");
        }
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut p: Params<f64> = Params::new();
        let lin = Linear::new(&mut p, &mut rng(), "l", 3, 4);
        let x = normal_init(&mut rng(), 5, 3, 1.0);
        let run = |p: &Params<f64>| {
            let (y, _) = lin.forward(p, &x);
            y.mapv(|v| v * v).sum()
        };
        let (y, cache) = lin.forward(&p, &x);
        lin.backward(&mut p, &cache, &y.mapv(|v| 2.0 * v));
        let err = fd_max_rel_err(&mut p, &mut |p| run(p), 1e-5, 1e-4, 64);
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn layernorm_gradients_match_finite_differences() {
        let mut p: Params<f64> = Params::new();
        let ln = LayerNorm::new(&mut p, "ln", 6);
        // Non-trivial gain so the gamma path is exercised.
        p.value_mut(ln.gamma).assign(&normal_init(&mut rng(), 1, 6, 1.0));
        let x = normal_init(&mut rng(), 4, 6, 1.5);
        let run = |p: &Params<f64>| {
            let (y, _) = ln.forward(p, &x);
            y.mapv(|v| v * v * v / 3.0).sum()
        };
        let (y, cache) = ln.forward(&p, &x);
        ln.backward(&mut p, &cache, &y.mapv(|v| v * v));
        let err = fd_max_rel_err(&mut p, &mut |p| run(p), 1e-5, 1e-4, 64);
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut p: Params<f64> = Params::new();
        let mlp = Mlp::new(&mut p, &mut rng(), "mlp", 4, 8);
        let x = normal_init(&mut rng(), 3, 4, 1.0);
        let run = |p: &Params<f64>| {
            let (y, _) = mlp.forward(p, &x);
            y.sum()
        };
        let (_, cache) = mlp.forward(&p, &x);
        mlp.backward(&mut p, &cache, &Array2::ones((3, 4)));
        let err = fd_max_rel_err(&mut p, &mut |p| run(p), 1e-5, 1e-4, 64);
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn embedding_gathers_and_scatters() {
        let mut p: Params<f64> = Params::new();
        let emb = Embedding::new(&mut p, &mut rng(), "e", 5, 3);
        let (out, cache) = emb.forward(&p, &[2, 2, 4]);
        assert_eq!(out.row(0), out.row(1));
        assert_eq!(out.row(0), p.value(emb.table).row(2));
        emb.backward(&mut p, &cache, &Array2::ones((3, 3)));
        // Row 2 was used twice, row 4 once, others never.
        assert_eq!(p.grad(emb.table)[(2, 0)], 2.0);
        assert_eq!(p.grad(emb.table)[(4, 0)], 1.0);
        assert_eq!(p.grad(emb.table)[(0, 0)], 0.0);
    }
}
