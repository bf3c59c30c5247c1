//! Minimal neural-network substrate: a named parameter arena, transformer
//! layers with explicit backward passes, and AdamW.
//!
//! Every layer is generic over the element type so the identical code path
//! runs in `f32` for training and in `f64` for finite-difference gradient
//! checks. All compute is single-threaded and deterministic: given the same
//! seed and inputs, forward, backward and optimizer steps are bitwise
//! reproducible.

pub mod adamw;
pub mod attention;
pub mod blocks;
pub mod layers;

pub use adamw::AdamW;
pub use attention::MultiHeadAttention;
pub use blocks::{CrossBlock, SelfBlock};
pub use layers::{Embedding, LayerNorm, Linear, Mlp};

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Element type bound shared by every layer.
pub trait Scalar:
    ndarray::NdFloat + ndarray::LinalgScalar + num_traits::FromPrimitive + std::iter::Sum
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand conversion from an `f64` constant into the active element type.
pub fn s<T: Scalar>(x: f64) -> T {
    T::from(x).expect("constant representable in scalar type")
}

/// Handle to one parameter tensor inside a [`Params`] arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// One named parameter tensor with its gradient accumulator.
///
/// All parameters are stored as matrices; vectors and scalars use a single
/// row so broadcasting against token matrices stays uniform.
#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Array2<T>,
    pub grad: Array2<T>,
    /// Whether AdamW applies weight decay to this tensor. Single-row
    /// parameters (biases, norm gains, scalars) opt out.
    pub decay: bool,
}

/// Central parameter store. Layers hold [`ParamId`]s and borrow values at
/// forward time; backward passes accumulate into the paired gradients.
#[derive(Debug, Clone)]
pub struct Params<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Params<T> {
        Params { entries: Vec::new() }
    }

    /// Registers a tensor under a unique dotted name.
    pub fn add(&mut self, name: &str, value: Array2<T>, decay: bool) -> ParamId {
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name:?}"
        );
        let grad = Array2::zeros(value.raw_dim());
        self.entries.push(ParamEntry { name: name.to_string(), value, grad, decay });
        ParamId(self.entries.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &Array2<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<T> {
        &mut self.entries[id.0].value
    }

    /// Adds a contribution into a parameter's gradient accumulator.
    pub fn acc_grad(&mut self, id: ParamId, g: &Array2<T>) {
        self.entries[id.0].grad += g;
    }

    pub fn grad(&self, id: ParamId) -> &Array2<T> {
        &self.entries[id.0].grad
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(T::zero());
        }
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Euclidean norm of the full gradient vector, accumulated in `f64`.
    pub fn grad_global_norm(&self) -> f64 {
        let mut sq = 0.0f64;
        for e in &self.entries {
            for &g in e.grad.iter() {
                let g = g.to_f64().unwrap();
                sq += g * g;
            }
        }
        sq.sqrt()
    }

    /// Scales all gradients so the global norm does not exceed `max_norm`.
    /// Returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_global_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = s::<T>(max_norm / norm);
            for e in &mut self.entries {
                e.grad.mapv_inplace(|g| g * scale);
            }
        }
        norm
    }

    /// Casts the arena into another element type, preserving names, decay
    /// flags and order. Gradients reset to zero.
    pub fn cast<U: Scalar>(&self) -> Params<U> {
        let entries = self
            .entries
            .iter()
            .map(|e| ParamEntry {
                name: e.name.clone(),
                value: e.value.mapv(|v| U::from(v.to_f64().unwrap()).unwrap()),
                grad: Array2::zeros(e.value.raw_dim()),
                decay: e.decay,
            })
            .collect();
        Params { entries }
    }
}

impl<T: Scalar> Default for Params<T> {
    fn default() -> Self {
        Params::new()
    }
}

/// Draws an i.i.d. normal matrix with the given standard deviation.
pub fn normal_init<T: Scalar, R: Rng>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    std: f64,
) -> Array2<T> {
    let dist = Normal::new(0.0f64, std).expect("positive std");
    Array2::from_shape_fn((rows, cols), |_| s(dist.sample(rng)))
}

/// Xavier-scaled normal init for a `(fan_in, fan_out)` weight matrix.
pub fn xavier_init<T: Scalar, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Array2<T> {
    normal_init(rng, fan_in, fan_out, (2.0 / (fan_in + fan_out) as f64).sqrt())
}

/// Maximum relative error between analytic gradients already accumulated in
/// `params` and central finite differences of `loss`.
///
/// Checks up to `max_per_param` evenly strided elements of every tensor.
/// Per element the error is `|fd - analytic| / (atol + max(|fd|, |analytic|))`:
/// `atol` absorbs finite-difference cancellation noise on gradients that are
/// exactly zero (softmax is invariant to key-bias shifts, for example) while
/// leaving gradients of ordinary magnitude under a pure relative check.
pub fn fd_max_rel_err(
    params: &mut Params<f64>,
    loss: &mut dyn FnMut(&Params<f64>) -> f64,
    eps: f64,
    atol: f64,
    max_per_param: usize,
) -> f64 {
    let analytic: Vec<Array2<f64>> = params.entries.iter().map(|e| e.grad.clone()).collect();
    let mut worst = 0.0f64;
    for pi in 0..params.entries.len() {
        let n = params.entries[pi].value.len();
        let stride = n.div_ceil(max_per_param).max(1);
        for flat in (0..n).step_by(stride) {
            let cols = params.entries[pi].value.ncols();
            let idx = (flat / cols, flat % cols);
            let orig = params.entries[pi].value[idx];
            params.entries[pi].value[idx] = orig + eps;
            let up = loss(params);
            params.entries[pi].value[idx] = orig - eps;
            let down = loss(params);
            params.entries[pi].value[idx] = orig;
            let fd = (up - down) / (2.0 * eps);
            let an = analytic[pi][idx];
            let rel = (fd - an).abs() / (atol + fd.abs().max(an.abs()));
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn add_rejects_duplicate_names() {
        let mut p: Params<f32> = Params::new();
        p.add("w", Array2::zeros((2, 2)), true);
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            p.add("w", Array2::zeros((2, 2)), true);
        }));
        assert!(result.is_err());
    }

    #[test]
    fn global_norm_clip_scales_to_bound() {
        let mut p: Params<f64> = Params::new();
        let id = p.add("g", Array2::zeros((1, 2)), true);
        p.acc_grad(id, &array![[3.0, 4.0]]);
        assert!((p.grad_global_norm() - 5.0).abs() < 1e-12);
        let pre = p.clip_global_norm(1.0);
        assert!((pre - 5.0).abs() < 1e-12);
        assert!((p.grad_global_norm() - 1.0).abs() < 1e-12);
        // A second clip at the same bound is a no-op.
        p.clip_global_norm(1.0);
        assert!((p.grad(id)[(0, 0)] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn cast_preserves_names_and_values() {
        let mut p: Params<f64> = Params::new();
        p.add("a", array![[1.5, -2.0]], true);
        p.add("b", array![[0.25]], false);
        let q: Params<f32> = p.cast();
        assert_eq!(q.entries()[0].name, "a");
        assert_eq!(q.entries()[0].value[(0, 1)], -2.0f32);
        assert!(!q.entries()[1].decay);
    }

    #[test]
    fn normal_init_is_seed_deterministic() {
        use rand::SeedableRng;
        let mut r1 = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut r2 = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let a: Array2<f32> = normal_init(&mut r1, 3, 3, 0.02);
        let b: Array2<f32> = normal_init(&mut r2, 3, 3, 0.02);
        assert_eq!(a, b);
    }
}
