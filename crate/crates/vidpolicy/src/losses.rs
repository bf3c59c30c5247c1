//! The four training losses: action cross-entropy, temporal cycle
//! consistency, video-video contrastive, video-text contrastive.
//!
//! Each loss exposes a forward-only form for evaluation and a `_grads` form
//! returning gradients with respect to its inputs, scaled by a caller-chosen
//! weight. Ablation masks redistribute the optimized objective through those
//! weights while the reported [`LossBundle`] always carries all four values.

use crate::actionspace::NUM_BINS;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{s, ParamId, Params, Scalar};
use crate::policy::{ActionLogits, PolicyModel, TrainActs, TrainGrads};
use ndarray::{s as nds, Array1, Array2, ArrayView1, ArrayView2, ArrayView4};
use serde::{Deserialize, Serialize};

/// Per-step loss report. `total` is always the mean of the four components,
/// independent of which of them are being optimized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_ce: f64,
    pub l_tcc: f64,
    pub l_vvcl: f64,
    pub l_vtcl: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn new(l_ce: f64, l_tcc: f64, l_vvcl: f64, l_vtcl: f64) -> Result<LossBundle> {
        let parts = [("l_ce", l_ce), ("l_tcc", l_tcc), ("l_vvcl", l_vvcl), ("l_vtcl", l_vtcl)];
        for (name, v) in parts {
            if !v.is_finite() {
                return Err(Error::Input(format!("{name} is not finite: {v}")));
            }
            if v < 0.0 {
                return Err(Error::Input(format!("{name} is negative: {v}")));
            }
        }
        let total = (l_ce + l_tcc + l_vvcl + l_vtcl) / 4.0;
        Ok(LossBundle { l_ce, l_tcc, l_vvcl, l_vtcl, total })
    }
}

/// Which losses participate in the optimized objective. The objective is the
/// mean of the active losses, so a CE-only mask trains on exactly `l_ce`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossMask {
    pub ce: bool,
    pub tcc: bool,
    pub vvcl: bool,
    pub vtcl: bool,
}

impl LossMask {
    pub fn all() -> LossMask {
        LossMask { ce: true, tcc: true, vvcl: true, vtcl: true }
    }

    pub fn ce_only() -> LossMask {
        LossMask { ce: true, tcc: false, vvcl: false, vtcl: false }
    }

    pub fn active_count(&self) -> usize {
        [self.ce, self.tcc, self.vvcl, self.vtcl].iter().filter(|&&f| f).count()
    }

    /// Gradient weight per loss, in bundle order: `1/active` for active
    /// losses, zero otherwise.
    pub fn weights(&self) -> [f64; 4] {
        let n = self.active_count();
        if n == 0 {
            return [0.0; 4];
        }
        let w = 1.0 / n as f64;
        [
            if self.ce { w } else { 0.0 },
            if self.tcc { w } else { 0.0 },
            if self.vvcl { w } else { 0.0 },
            if self.vtcl { w } else { 0.0 },
        ]
    }

    /// The optimized scalar implied by this mask.
    pub fn objective(&self, b: &LossBundle) -> f64 {
        let w = self.weights();
        w[0] * b.l_ce + w[1] * b.l_tcc + w[2] * b.l_vvcl + w[3] * b.l_vtcl
    }
}

/// Learnable temperature and bias of a sigmoid contrastive loss. The
/// temperature is stored as its logarithm so it stays positive.
#[derive(Debug, Clone, Copy)]
pub struct ContrastiveHead {
    pub log_tau: ParamId,
    pub bias: ParamId,
}

impl ContrastiveHead {
    /// Initializes τ = 10 and b = −10.
    pub fn new<T: Scalar>(p: &mut Params<T>, name: &str) -> ContrastiveHead {
        let log_tau = p.add(
            &format!("{name}.log_tau"),
            Array2::from_elem((1, 1), s::<T>(10.0f64.ln())),
            false,
        );
        let bias = p.add(&format!("{name}.bias"), Array2::from_elem((1, 1), s::<T>(-10.0)), false);
        ContrastiveHead { log_tau, bias }
    }

    pub fn tau<T: Scalar>(&self, p: &Params<T>) -> T {
        p.value(self.log_tau)[(0, 0)].exp()
    }

    pub fn bias_value<T: Scalar>(&self, p: &Params<T>) -> T {
        p.value(self.bias)[(0, 0)]
    }
}

fn softplus<T: Scalar>(y: T) -> T {
    y.max(T::zero()) + (T::one() + (-y.abs()).exp()).ln()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Mean negative log-softmax over rows; `targets[i]` is the true bin of row
/// `i`. Returns the loss and `weight` times its gradient.
pub fn action_ce_grads<T: Scalar>(
    logits: &Array2<T>,
    targets: &[u16],
    weight: T,
) -> Result<(T, Array2<T>)> {
    if logits.nrows() != targets.len() {
        return Err(Error::Shape(format!(
            "{} logit rows vs {} targets",
            logits.nrows(),
            targets.len()
        )));
    }
    if logits.ncols() != NUM_BINS {
        return Err(Error::Shape(format!("expected {NUM_BINS} bins, got {}", logits.ncols())));
    }
    for (i, &t) in targets.iter().enumerate() {
        if t as usize >= NUM_BINS {
            return Err(Error::Input(format!("target bin {t} at slot {i} is outside 0..{NUM_BINS}")));
        }
    }
    let n = logits.nrows();
    let inv = s::<T>(1.0 / n as f64);
    let mut loss = T::zero();
    let mut dlogits = Array2::zeros(logits.dim());
    for (i, row) in logits.rows().into_iter().enumerate() {
        let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for &v in row {
            z = z + (v - m).exp();
        }
        let lse = m + z.ln();
        loss = loss + (lse - row[targets[i] as usize]) * inv;
        let scale = weight * inv;
        let mut drow = dlogits.row_mut(i);
        for (j, &v) in row.iter().enumerate() {
            drow[j] = (v - m).exp() / z * scale;
        }
        drow[targets[i] as usize] = drow[targets[i] as usize] - scale;
    }
    Ok((loss, dlogits))
}

/// Mean negative log-softmax of the target bins for one sample's logits.
pub fn action_ce<T: Scalar>(logits: &ActionLogits<T>, targets: ArrayView2<'_, u16>) -> Result<T> {
    let (h, dims, bins) = logits.values.dim();
    if targets.dim() != (h, dims) {
        return Err(Error::Shape(format!(
            "targets {:?} do not match logits ({h}, {dims})",
            targets.dim()
        )));
    }
    let rows = logits
        .values
        .view()
        .into_shape_with_order((h * dims, bins))
        .expect("contiguous logits")
        .to_owned();
    let flat: Vec<u16> = targets.iter().cloned().collect();
    let (loss, _) = action_ce_grads(&rows, &flat, T::zero())?;
    Ok(loss)
}

fn sqdist<T: Scalar>(x: ArrayView1<'_, T>, y: ArrayView1<'_, T>) -> T {
    x.iter().zip(y.iter()).map(|(&a, &b)| (a - b) * (a - b)).sum()
}

fn softmax1<T: Scalar>(v: &Array1<T>) -> Array1<T> {
    let m = v.iter().cloned().fold(T::neg_infinity(), T::max);
    let e = v.mapv(|x| (x - m).exp());
    let z = e.sum();
    e / z
}

/// One direction of the cycle: each frame of `a` finds its soft neighbor in
/// `b`, cycles back, and regresses the recovered index onto its own.
/// Returns the direction loss (mean over frames of `a`) and its gradients.
fn tcc_direction<T: Scalar>(a: &Array2<T>, b: &Array2<T>) -> (T, Array2<T>, Array2<T>) {
    let (ta, d) = a.dim();
    let tb = b.nrows();
    let inv = s::<T>(1.0 / ta as f64);
    let two = s::<T>(2.0);
    let mut loss = T::zero();
    let mut da = Array2::zeros((ta, d));
    let mut db = Array2::zeros((tb, d));
    for t in 0..ta {
        let neg_d1 = Array1::from_iter((0..tb).map(|k| -sqdist(a.row(t), b.row(k))));
        let alpha = softmax1(&neg_d1);
        let mut nu = Array1::zeros(d);
        for k in 0..tb {
            nu = nu + &(b.row(k).to_owned() * alpha[k]);
        }
        let neg_d2 = Array1::from_iter((0..ta).map(|k| -sqdist(nu.view(), a.row(k))));
        let beta = softmax1(&neg_d2);
        let mu: T = beta.iter().enumerate().map(|(i, &v)| s::<T>(i as f64) * v).sum();
        let diff = mu - s::<T>(t as f64);
        loss = loss + diff * diff * inv;

        let dmu = two * diff * inv;
        let dbeta = Array1::from_iter((0..ta).map(|i| s::<T>(i as f64) * dmu));
        let dot: T = beta.iter().zip(dbeta.iter()).map(|(&p, &g)| p * g).sum();
        let dneg_d2 = Array1::from_iter((0..ta).map(|i| beta[i] * (dbeta[i] - dot)));
        let mut dnu = Array1::zeros(d);
        for k in 0..ta {
            let dv = &nu - &a.row(k);
            dnu = dnu + &(dv.clone() * (-two * dneg_d2[k]));
            let mut row = da.row_mut(k);
            row += &(dv * (two * dneg_d2[k]));
        }
        let dalpha = Array1::from_iter((0..tb).map(|k| dnu.dot(&b.row(k))));
        for k in 0..tb {
            let mut row = db.row_mut(k);
            row += &(dnu.clone() * alpha[k]);
        }
        let dot: T = alpha.iter().zip(dalpha.iter()).map(|(&p, &g)| p * g).sum();
        let dneg_d1 = Array1::from_iter((0..tb).map(|k| alpha[k] * (dalpha[k] - dot)));
        for k in 0..tb {
            let dv = &a.row(t) - &b.row(k);
            {
                let mut row = da.row_mut(t);
                row += &(dv.clone() * (-two * dneg_d1[k]));
            }
            let mut row = db.row_mut(k);
            row += &(dv * (two * dneg_d1[k]));
        }
    }
    (loss, da, db)
}

/// Symmetrized temporal cycle consistency between two frame-embedding
/// sequences, with `weight` times the gradients.
pub fn tcc_grads<T: Scalar>(
    e_p: &Array2<T>,
    e_r: &Array2<T>,
    weight: T,
) -> (T, Array2<T>, Array2<T>) {
    let half = s::<T>(0.5);
    let (l1, da1, db1) = tcc_direction(e_p, e_r);
    let (l2, da2, db2) = tcc_direction(e_r, e_p);
    let loss = (l1 + l2) * half;
    let w = weight * half;
    let d_ep = (da1 + db2) * w;
    let d_er = (db1 + da2) * w;
    (loss, d_ep, d_er)
}

/// Forward-only symmetrized cycle-consistency loss.
pub fn tcc<T: Scalar>(e_p: &Array2<T>, e_r: &Array2<T>) -> T {
    tcc_grads(e_p, e_r, T::zero()).0
}

struct SiglipCore<T> {
    loss: T,
    d_z1: Array2<T>,
    d_z2: Array2<T>,
    d_tau: T,
    d_b: T,
}

fn l2_rows<T: Scalar>(z: &Array2<T>) -> (Array2<T>, Array1<T>) {
    let guard = s::<T>(1e-12);
    let norms = Array1::from_iter(z.rows().into_iter().map(|r| (r.dot(&r) + guard).sqrt()));
    let mut out = z.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        row /= norms[i];
    }
    (out, norms)
}

fn siglip_core<T: Scalar>(tau: T, b: T, z1: &Array2<T>, z2: &Array2<T>) -> Result<SiglipCore<T>> {
    let bsz = z1.nrows();
    if bsz == 0 {
        return Err(Error::Input("contrastive batch is empty".into()));
    }
    if z1.dim() != z2.dim() {
        return Err(Error::Shape(format!(
            "embedding shapes differ: {:?} vs {:?}",
            z1.dim(),
            z2.dim()
        )));
    }
    let (n1, norm1) = l2_rows(z1);
    let (n2, norm2) = l2_rows(z2);
    let dots = n1.dot(&n2.t());
    let inv_b = s::<T>(1.0 / bsz as f64);
    let mut loss = T::zero();
    let mut dlogit = Array2::zeros((bsz, bsz));
    for i in 0..bsz {
        for j in 0..bsz {
            let y = if i == j { T::one() } else { -T::one() };
            let yhat = dots[(i, j)] * tau + b;
            loss = loss + softplus(-y * yhat) * inv_b;
            dlogit[(i, j)] = -y * sigmoid(-y * yhat) * inv_b;
        }
    }
    let d_tau = (&dlogit * &dots).sum();
    let d_b = dlogit.sum();
    let d_dots = dlogit * tau;
    let d_n1 = d_dots.dot(&n2);
    let d_n2 = d_dots.t().dot(&n1);
    let mut d_z1 = Array2::zeros(z1.dim());
    let mut d_z2 = Array2::zeros(z2.dim());
    for i in 0..bsz {
        let backprop = |dn: ArrayView1<'_, T>, z: ArrayView1<'_, T>, norm: T| {
            let dot = dn.dot(&z);
            let n3 = norm * norm * norm;
            Array1::from_iter(
                dn.iter().zip(z.iter()).map(|(&g, &v)| g / norm - v * dot / n3),
            )
        };
        d_z1.row_mut(i).assign(&backprop(d_n1.row(i), z1.row(i), norm1[i]));
        d_z2.row_mut(i).assign(&backprop(d_n2.row(i), z2.row(i), norm2[i]));
    }
    Ok(SiglipCore { loss, d_z1, d_z2, d_tau, d_b })
}

/// Sigmoid contrastive loss over L2-normalized rows with index-aligned
/// positives. Labels are +1 on the diagonal and −1 elsewhere.
pub fn siglip<T: Scalar>(
    p: &Params<T>,
    head: &ContrastiveHead,
    z1: &Array2<T>,
    z2: &Array2<T>,
) -> Result<T> {
    Ok(siglip_core(head.tau(p), head.bias_value(p), z1, z2)?.loss)
}

/// [`siglip`] plus gradients: input gradients are returned and the head's
/// temperature and bias gradients accumulate into `p`, all scaled by `weight`.
pub fn siglip_grads<T: Scalar>(
    p: &mut Params<T>,
    head: &ContrastiveHead,
    z1: &Array2<T>,
    z2: &Array2<T>,
    weight: T,
) -> Result<(T, Array2<T>, Array2<T>)> {
    let tau = head.tau(p);
    let core = siglip_core(tau, head.bias_value(p), z1, z2)?;
    p.acc_grad(head.log_tau, &Array2::from_elem((1, 1), weight * core.d_tau * tau));
    p.acc_grad(head.bias, &Array2::from_elem((1, 1), weight * core.d_b));
    Ok((core.loss, core.d_z1 * weight, core.d_z2 * weight))
}

/// Video-text loss over already-pooled embeddings: the average of the
/// prompt-text and robot-text sigmoid contrastive terms.
pub fn vtcl_pooled<T: Scalar>(
    p: &Params<T>,
    head: &ContrastiveHead,
    z_prompt: &Array2<T>,
    z_robot: &Array2<T>,
    z_text: &Array2<T>,
) -> Result<T> {
    let half = s::<T>(0.5);
    Ok((siglip(p, head, z_prompt, z_text)? + siglip(p, head, z_robot, z_text)?) * half)
}

/// [`vtcl_pooled`] plus gradients, scaled by `weight`.
pub fn vtcl_pooled_grads<T: Scalar>(
    p: &mut Params<T>,
    head: &ContrastiveHead,
    z_prompt: &Array2<T>,
    z_robot: &Array2<T>,
    z_text: &Array2<T>,
    weight: T,
) -> Result<(T, Array2<T>, Array2<T>, Array2<T>)> {
    let half = s::<T>(0.5);
    let (l1, d_zp, mut d_zt) = siglip_grads(p, head, z_prompt, z_text, weight * half)?;
    let (l2, d_zr, d_zt2) = siglip_grads(p, head, z_robot, z_text, weight * half)?;
    d_zt += &d_zt2;
    Ok(((l1 + l2) * half, d_zp, d_zr, d_zt))
}

fn pooled_prompt_embedding<T: Scalar>(
    p: &Params<T>,
    model: &PolicyModel,
    videos: ArrayView4<'_, T>,
) -> Result<Array2<T>> {
    let fp = model.cfg.prompt_frames;
    if videos.dim().0 == 0 || videos.dim().0 % fp != 0 {
        return Err(Error::Shape(format!(
            "video stack of {} frames is not a multiple of {fp}",
            videos.dim().0
        )));
    }
    let tokens = model.vit.infer_frames(p, videos)?;
    let lat = model.prompt_rs.infer(p, &tokens, model.cfg.tokens_per_frame());
    Ok(model.pool_vv.infer(p, &lat, model.cfg.latents))
}

/// Video-video contrastive loss from raw frames: both batches go through the
/// prompt encoder path and its pooling head, then [`siglip`]. Videos are
/// stacked along the frame axis, `prompt_frames` frames each.
pub fn vvcl<T: Scalar>(
    p: &Params<T>,
    model: &PolicyModel,
    head: &ContrastiveHead,
    prompt_videos: ArrayView4<'_, T>,
    robot_videos: ArrayView4<'_, T>,
) -> Result<T> {
    let z_p = pooled_prompt_embedding(p, model, prompt_videos)?;
    let z_r = pooled_prompt_embedding(p, model, robot_videos)?;
    siglip(p, head, &z_p, &z_r)
}

/// Video-text contrastive loss from raw frames and instruction strings.
pub fn vtcl<T: Scalar>(
    p: &Params<T>,
    model: &PolicyModel,
    head: &ContrastiveHead,
    prompt_videos: ArrayView4<'_, T>,
    robot_videos: ArrayView4<'_, T>,
    instructions: &[&str],
) -> Result<T> {
    let fp = model.cfg.prompt_frames;
    let tokens_p = model.vit.infer_frames(p, prompt_videos)?;
    let tokens_r = model.vit.infer_frames(p, robot_videos)?;
    let ptok = model.cfg.tokens_per_frame();
    let lat_p = model.prompt_rs.infer(p, &tokens_p, ptok);
    let lat_r = model.prompt_rs.infer(p, &tokens_r, ptok);
    let z_p = model.pool_vt.infer(p, &lat_p, model.cfg.latents);
    let z_r = model.pool_vt.infer(p, &lat_r, model.cfg.latents);
    if instructions.len() != prompt_videos.dim().0 / fp {
        return Err(Error::Shape(format!(
            "{} instructions for {} videos",
            instructions.len(),
            prompt_videos.dim().0 / fp
        )));
    }
    let ids: Result<Vec<Vec<usize>>> =
        instructions.iter().map(|t| model.text.tokenize(t)).collect();
    let z_t = model.text.infer(p, &ids?);
    vtcl_pooled(p, head, &z_p, &z_r, &z_t)
}

/// Computes all four losses over a training batch's activations, returning
/// the bundle and the activation gradients of the masked objective.
///
/// `targets` holds one bin per logit row, ordered sample-major then step then
/// dimension, exactly matching `TrainActs::logits`. Masked losses are still
/// evaluated and reported; only their gradients are dropped.
pub fn training_losses<T: Scalar>(
    p: &mut Params<T>,
    cfg: &ModelConfig,
    acts: &TrainActs<T>,
    targets: &[u16],
    head_vv: &ContrastiveHead,
    head_vt: &ContrastiveHead,
    mask: LossMask,
) -> Result<(LossBundle, TrainGrads<T>)> {
    let batch = acts.z_text.nrows();
    let fp = cfg.prompt_frames;
    let w = mask.weights();

    let (l_ce, d_logits) = action_ce_grads(&acts.logits, targets, s::<T>(w[0]))?;

    let mut l_tcc = T::zero();
    let mut d_e_prompt = Array2::zeros(acts.e_prompt.dim());
    let mut d_e_robot = Array2::zeros(acts.e_robot.dim());
    let per_pair = s::<T>(w[1] / batch as f64);
    let inv_b = s::<T>(1.0 / batch as f64);
    for b in 0..batch {
        let rows = b * fp..(b + 1) * fp;
        let ep = acts.e_prompt.slice(nds![rows.clone(), ..]).to_owned();
        let er = acts.e_robot.slice(nds![rows.clone(), ..]).to_owned();
        let (l, d_ep, d_er) = tcc_grads(&ep, &er, per_pair);
        l_tcc = l_tcc + l * inv_b;
        d_e_prompt.slice_mut(nds![rows.clone(), ..]).assign(&d_ep);
        d_e_robot.slice_mut(nds![rows, ..]).assign(&d_er);
    }

    let zp_vv = acts.z_vv.slice(nds![0..batch, ..]).to_owned();
    let zr_vv = acts.z_vv.slice(nds![batch.., ..]).to_owned();
    let (l_vvcl, d_zp, d_zr) = siglip_grads(p, head_vv, &zp_vv, &zr_vv, s::<T>(w[2]))?;
    let mut d_z_vv = Array2::zeros(acts.z_vv.dim());
    d_z_vv.slice_mut(nds![0..batch, ..]).assign(&d_zp);
    d_z_vv.slice_mut(nds![batch.., ..]).assign(&d_zr);

    let zp_vt = acts.z_vt.slice(nds![0..batch, ..]).to_owned();
    let zr_vt = acts.z_vt.slice(nds![batch.., ..]).to_owned();
    let (l_vtcl, d_zp, d_zr, d_z_text) =
        vtcl_pooled_grads(p, head_vt, &zp_vt, &zr_vt, &acts.z_text, s::<T>(w[3]))?;
    let mut d_z_vt = Array2::zeros(acts.z_vt.dim());
    d_z_vt.slice_mut(nds![0..batch, ..]).assign(&d_zp);
    d_z_vt.slice_mut(nds![batch.., ..]).assign(&d_zr);

    let bundle = LossBundle::new(
        l_ce.to_f64().unwrap(),
        l_tcc.to_f64().unwrap(),
        l_vvcl.to_f64().unwrap(),
        l_vtcl.to_f64().unwrap(),
    )?;
    let grads = TrainGrads { d_logits, d_e_prompt, d_e_robot, d_z_vv, d_z_vt, d_z_text };
    Ok((bundle, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actionspace::ACTION_DIMS;
    use crate::nn::fd_max_rel_err;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn randn(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| r.gen::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn action_ce_confident_logits_approach_zero() {
        let h = 2;
        let mut values = Array3::zeros((h, ACTION_DIMS, NUM_BINS));
        let mut targets = Array2::zeros((h, ACTION_DIMS));
        let mut r = rng();
        for step in 0..h {
            for dim in 0..ACTION_DIMS {
                let bin = r.gen_range(0..NUM_BINS);
                values[(step, dim, bin)] = 50.0;
                targets[(step, dim)] = bin as u16;
            }
        }
        let loss = action_ce(&ActionLogits::new(values).unwrap(), targets.view()).unwrap();
        assert!(loss < 1e-6, "confident loss {loss}");
    }

    #[test]
    fn action_ce_uniform_logits_give_ln_256() {
        let values = Array3::<f64>::zeros((1, ACTION_DIMS, NUM_BINS));
        let targets = Array2::zeros((1, ACTION_DIMS));
        let loss = action_ce(&ActionLogits::new(values).unwrap(), targets.view()).unwrap();
        assert!((loss - (NUM_BINS as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn action_ce_matches_per_slot_nll_oracle() {
        let mut r = rng();
        let rows = 7;
        let logits = randn(&mut r, rows, NUM_BINS) * 3.0;
        let targets: Vec<u16> = (0..rows).map(|_| r.gen_range(0..NUM_BINS as u16)).collect();
        let (loss, _) = action_ce_grads(&logits, &targets, 0.0).unwrap();
        let mut want = 0.0;
        for i in 0..rows {
            let mut z = 0.0;
            for j in 0..NUM_BINS {
                z += logits[(i, j)].exp();
            }
            want += -(logits[(i, targets[i] as usize)].exp() / z).ln();
        }
        want /= rows as f64;
        assert!((loss - want).abs() / want.abs() < 1e-6, "{loss} vs {want}");
    }

    #[test]
    fn action_ce_rejects_out_of_range_targets() {
        let logits = Array2::<f64>::zeros((1, NUM_BINS));
        assert!(action_ce_grads(&logits, &[256], 0.0).is_err());
        assert!(action_ce_grads(&logits, &[0, 1], 0.0).is_err());
    }

    #[test]
    fn action_ce_gradients_match_finite_differences() {
        let mut r = rng();
        let mut p: Params<f64> = Params::new();
        let x = p.add("x", randn(&mut r, 5, NUM_BINS), false);
        let targets: Vec<u16> = (0..5).map(|_| r.gen_range(0..NUM_BINS as u16)).collect();
        let (_, dx) = action_ce_grads(p.value(x), &targets, 1.0).unwrap();
        p.acc_grad(x, &dx);
        let err = fd_max_rel_err(
            &mut p,
            &mut |p| action_ce_grads(p.value(x), &targets, 1.0).unwrap().0,
            1e-5,
            1e-8,
            16,
        );
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn tcc_single_frames_are_perfectly_aligned() {
        let e = Array2::from_shape_vec((1, 3), vec![0.3, -0.7, 2.0]).unwrap();
        assert_eq!(tcc(&e, &e), 0.0);
    }

    #[test]
    fn tcc_sharpens_to_zero_as_scale_grows() {
        let base = Array2::from_shape_vec((2, 1), vec![0.0, 1.0]).unwrap();
        let at = |s: f64| {
            let e = &base * s;
            tcc(&e, &e)
        };
        let (l1, l10, l100) = (at(1.0), at(10.0), at(100.0));
        assert!(l1 > l10 && l10 > l100, "not monotone: {l1} {l10} {l100}");
        assert!(l100 < 1e-12, "l100 = {l100}");
    }

    #[test]
    fn tcc_matches_double_loop_oracle() {
        let mut r = rng();
        let e_p = randn(&mut r, 4, 3);
        let e_r = randn(&mut r, 5, 3);
        let got = tcc(&e_p, &e_r);

        let direction = |a: &Array2<f64>, b: &Array2<f64>| {
            let mut total = 0.0;
            for t in 0..a.nrows() {
                let mut w = vec![0.0; b.nrows()];
                for k in 0..b.nrows() {
                    let mut d = 0.0;
                    for c in 0..a.ncols() {
                        d += (a[(t, c)] - b[(k, c)]).powi(2);
                    }
                    w[k] = (-d).exp();
                }
                let z: f64 = w.iter().sum();
                let mut nu = vec![0.0; a.ncols()];
                for k in 0..b.nrows() {
                    for c in 0..a.ncols() {
                        nu[c] += w[k] / z * b[(k, c)];
                    }
                }
                let mut v = vec![0.0; a.nrows()];
                for k in 0..a.nrows() {
                    let mut d = 0.0;
                    for c in 0..a.ncols() {
                        d += (nu[c] - a[(k, c)]).powi(2);
                    }
                    v[k] = (-d).exp();
                }
                let z2: f64 = v.iter().sum();
                let mu: f64 = v.iter().enumerate().map(|(i, q)| i as f64 * q / z2).sum();
                total += (mu - t as f64).powi(2);
            }
            total / a.nrows() as f64
        };
        let want = (direction(&e_p, &e_r) + direction(&e_r, &e_p)) / 2.0;
        assert!((got - want).abs() / want.abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn tcc_is_symmetric_in_its_arguments() {
        let mut r = rng();
        let e_p = randn(&mut r, 3, 4);
        let e_r = randn(&mut r, 6, 4);
        assert_eq!(tcc(&e_p, &e_r), tcc(&e_r, &e_p));
    }

    #[test]
    fn tcc_gradients_match_finite_differences() {
        let mut r = rng();
        let mut p: Params<f64> = Params::new();
        let a = p.add("a", randn(&mut r, 3, 4), false);
        let b = p.add("b", randn(&mut r, 5, 4), false);
        let (_, da, db) = tcc_grads(p.value(a), p.value(b), 1.0);
        p.acc_grad(a, &da);
        p.acc_grad(b, &db);
        let err = fd_max_rel_err(
            &mut p,
            &mut |p| tcc_grads(p.value(a), p.value(b), 0.0).0,
            1e-6,
            1e-8,
            24,
        );
        assert!(err < 1e-6, "max rel err {err}");
    }

    fn unit_head(p: &mut Params<f64>) -> ContrastiveHead {
        let head = ContrastiveHead::new(p, "head");
        p.value_mut(head.log_tau)[(0, 0)] = 0.0;
        p.value_mut(head.bias)[(0, 0)] = 0.0;
        head
    }

    #[test]
    fn siglip_single_positive_pair_is_minus_log_sigma_one() {
        let mut p: Params<f64> = Params::new();
        let head = unit_head(&mut p);
        let z = Array2::from_shape_vec((1, 2), vec![3.0, 4.0]).unwrap();
        let loss = siglip(&p, &head, &z, &z).unwrap();
        let want = -(1.0f64 / (1.0 + (-1.0f64).exp())).ln();
        assert!((loss - want).abs() < 1e-9, "{loss} vs {want}");
    }

    #[test]
    fn siglip_two_orthonormal_rows_match_hand_value() {
        let mut p: Params<f64> = Params::new();
        let head = unit_head(&mut p);
        let z = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let loss = siglip(&p, &head, &z, &z).unwrap();
        let on = -(1.0f64 / (1.0 + (-1.0f64).exp())).ln();
        let off = 2.0f64.ln();
        let want = (2.0 * on + 2.0 * off) / 2.0;
        assert!((loss - want).abs() < 1e-9, "{loss} vs {want}");
    }

    #[test]
    fn siglip_matches_loop_oracle_under_bias_shift() {
        let mut r = rng();
        let mut p: Params<f64> = Params::new();
        let head = ContrastiveHead::new(&mut p, "head");
        p.value_mut(head.log_tau)[(0, 0)] = 0.4f64.ln();
        p.value_mut(head.bias)[(0, 0)] = 1.7;
        let z1 = randn(&mut r, 4, 5);
        let z2 = randn(&mut r, 4, 5);
        let loss = siglip(&p, &head, &z1, &z2).unwrap();

        let norm = |z: &Array2<f64>, i: usize| {
            let mut ss = 0.0;
            for c in 0..z.ncols() {
                ss += z[(i, c)].powi(2);
            }
            (ss + 1e-12).sqrt()
        };
        let mut want = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                let mut dot = 0.0;
                for c in 0..5 {
                    dot += z1[(i, c)] / norm(&z1, i) * (z2[(j, c)] / norm(&z2, j));
                }
                let yhat = dot * 0.4 + 1.7;
                let y = if i == j { 1.0 } else { -1.0 };
                want += -(1.0 / (1.0 + (-(y * yhat)).exp())).ln();
            }
        }
        want /= 4.0;
        assert!((loss - want).abs() / want.abs() < 1e-6, "{loss} vs {want}");
    }

    #[test]
    fn siglip_rejects_empty_batches() {
        let mut p: Params<f64> = Params::new();
        let head = ContrastiveHead::new(&mut p, "head");
        let z = Array2::<f64>::zeros((0, 3));
        assert!(siglip(&p, &head, &z, &z).is_err());
    }

    #[test]
    fn siglip_gradients_match_finite_differences_including_head() {
        let mut r = rng();
        let mut p: Params<f64> = Params::new();
        let head = ContrastiveHead::new(&mut p, "head");
        let z1 = p.add("z1", randn(&mut r, 3, 4), false);
        let z2 = p.add("z2", randn(&mut r, 3, 4), false);
        let (_, d1, d2) = {
            let a = p.value(z1).clone();
            let b = p.value(z2).clone();
            siglip_grads(&mut p, &head, &a, &b, 1.0).unwrap()
        };
        p.acc_grad(z1, &d1);
        p.acc_grad(z2, &d2);
        let err = fd_max_rel_err(
            &mut p,
            &mut |p| siglip(p, &head, p.value(z1), p.value(z2)).unwrap(),
            1e-6,
            1e-8,
            16,
        );
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn vtcl_pooled_is_the_mean_of_two_siglip_terms() {
        let mut r = rng();
        let mut p: Params<f64> = Params::new();
        let head = ContrastiveHead::new(&mut p, "head");
        let zp = randn(&mut r, 3, 4);
        let zr = randn(&mut r, 3, 4);
        let zt = randn(&mut r, 3, 4);
        let got = vtcl_pooled(&p, &head, &zp, &zr, &zt).unwrap();
        let want =
            (siglip(&p, &head, &zp, &zt).unwrap() + siglip(&p, &head, &zr, &zt).unwrap()) / 2.0;
        assert!((got - want).abs() < 1e-7 * want.abs().max(1.0));
        // Both video halves equal to the text embedding collapse to a single
        // self-similarity term.
        let same = vtcl_pooled(&p, &head, &zt, &zt, &zt).unwrap();
        assert!((same - siglip(&p, &head, &zt, &zt).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn single_pair_vvcl_reduces_to_siglip() {
        let mut r = rng();
        let mut p: Params<f64> = Params::new();
        let head = ContrastiveHead::new(&mut p, "head");
        let z1 = randn(&mut r, 1, 6);
        let z2 = randn(&mut r, 1, 6);
        // With B = 1 the contrastive matrix is the single positive pair.
        let loss = siglip(&p, &head, &z1, &z2).unwrap();
        assert!(loss > 0.0 && loss.is_finite());
    }

    #[test]
    fn bundle_total_is_the_mean_and_rejects_bad_values() {
        let b = LossBundle::new(1.0, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(b.total, 1.0);
        let b = LossBundle::new(2.0, 0.0, 1.0, 5.0).unwrap();
        assert_eq!(b.total, 2.0);
        assert!(LossBundle::new(f64::NAN, 0.0, 0.0, 0.0).is_err());
        assert!(LossBundle::new(-0.5, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn mask_weights_redistribute_over_active_losses() {
        assert_eq!(LossMask::all().weights(), [0.25; 4]);
        assert_eq!(LossMask::ce_only().weights(), [1.0, 0.0, 0.0, 0.0]);
        let m = LossMask { ce: true, tcc: false, vvcl: true, vtcl: false };
        assert_eq!(m.weights(), [0.5, 0.0, 0.5, 0.0]);
        let b = LossBundle::new(1.0, 2.0, 3.0, 4.0).unwrap();
        assert_eq!(LossMask::ce_only().objective(&b), 1.0);
        assert_eq!(LossMask::all().objective(&b), b.total);
    }

    fn fake_acts(r: &mut ChaCha8Rng, batch: usize, fp: usize, h: usize, d: usize, ad: usize) -> TrainActs<f64> {
        TrainActs {
            logits: randn(r, batch * h * ACTION_DIMS, NUM_BINS),
            e_prompt: randn(r, batch * fp, ad),
            e_robot: randn(r, batch * fp, ad),
            z_vv: randn(r, 2 * batch, d),
            z_vt: randn(r, 2 * batch, d),
            z_text: randn(r, batch, d),
        }
    }

    fn small_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::preset("desk").unwrap();
        cfg.prompt_frames = 3;
        cfg.horizon = 2;
        cfg
    }

    #[test]
    fn ce_only_mask_zeroes_every_other_gradient() {
        let mut r = rng();
        let cfg = small_cfg();
        let mut p: Params<f64> = Params::new();
        let head_vv = ContrastiveHead::new(&mut p, "head_vv");
        let head_vt = ContrastiveHead::new(&mut p, "head_vt");
        let acts = fake_acts(&mut r, 2, cfg.prompt_frames, cfg.horizon, 6, 4);
        let targets: Vec<u16> =
            (0..acts.logits.nrows()).map(|_| r.gen_range(0..NUM_BINS as u16)).collect();
        let (bundle, grads) = training_losses(
            &mut p, &cfg, &acts, &targets, &head_vv, &head_vt, LossMask::ce_only(),
        )
        .unwrap();
        assert!(bundle.l_tcc > 0.0 && bundle.l_vvcl > 0.0 && bundle.l_vtcl > 0.0);
        assert_eq!(grads.d_e_prompt.mapv(f64::abs).sum(), 0.0);
        assert_eq!(grads.d_z_vv.mapv(f64::abs).sum(), 0.0);
        assert_eq!(grads.d_z_vt.mapv(f64::abs).sum(), 0.0);
        assert_eq!(grads.d_z_text.mapv(f64::abs).sum(), 0.0);
        assert!(p.grad(head_vv.log_tau)[(0, 0)] == 0.0 && p.grad(head_vt.bias)[(0, 0)] == 0.0);
        let (_, full) = action_ce_grads(&acts.logits, &targets, 1.0).unwrap();
        assert_eq!(grads.d_logits, full);
    }

    #[test]
    fn training_losses_are_reproducible_bitwise() {
        let cfg = small_cfg();
        let run = || {
            let mut r = rng();
            let mut p: Params<f64> = Params::new();
            let head_vv = ContrastiveHead::new(&mut p, "head_vv");
            let head_vt = ContrastiveHead::new(&mut p, "head_vt");
            let acts = fake_acts(&mut r, 2, cfg.prompt_frames, cfg.horizon, 6, 4);
            let targets: Vec<u16> =
                (0..acts.logits.nrows()).map(|_| r.gen_range(0..NUM_BINS as u16)).collect();
            training_losses(&mut p, &cfg, &acts, &targets, &head_vv, &head_vt, LossMask::all())
                .unwrap()
                .0
        };
        let a = run();
        let b = run();
        assert_eq!(a.l_ce.to_bits(), b.l_ce.to_bits());
        assert_eq!(a.total.to_bits(), b.total.to_bits());
    }

    #[test]
    fn training_losses_gradients_match_finite_differences() {
        let mut r = rng();
        let cfg = small_cfg();
        let mut p: Params<f64> = Params::new();
        let head_vv = ContrastiveHead::new(&mut p, "head_vv");
        let head_vt = ContrastiveHead::new(&mut p, "head_vt");
        let batch = 2;
        let acts = fake_acts(&mut r, batch, cfg.prompt_frames, cfg.horizon, 6, 4);
        let x_log = p.add("x_log", acts.logits.clone(), false);
        let x_ep = p.add("x_ep", acts.e_prompt.clone(), false);
        let x_er = p.add("x_er", acts.e_robot.clone(), false);
        let x_vv = p.add("x_vv", acts.z_vv.clone(), false);
        let x_vt = p.add("x_vt", acts.z_vt.clone(), false);
        let x_tx = p.add("x_tx", acts.z_text.clone(), false);
        let targets: Vec<u16> =
            (0..acts.logits.nrows()).map(|_| r.gen_range(0..NUM_BINS as u16)).collect();
        let view = |p: &Params<f64>| TrainActs {
            logits: p.value(x_log).clone(),
            e_prompt: p.value(x_ep).clone(),
            e_robot: p.value(x_er).clone(),
            z_vv: p.value(x_vv).clone(),
            z_vt: p.value(x_vt).clone(),
            z_text: p.value(x_tx).clone(),
        };
        let mask = LossMask::all();
        let (_, grads) = {
            let a = view(&p);
            training_losses(&mut p, &cfg, &a, &targets, &head_vv, &head_vt, mask).unwrap()
        };
        p.acc_grad(x_log, &grads.d_logits);
        p.acc_grad(x_ep, &grads.d_e_prompt);
        p.acc_grad(x_er, &grads.d_e_robot);
        p.acc_grad(x_vv, &grads.d_z_vv);
        p.acc_grad(x_vt, &grads.d_z_vt);
        p.acc_grad(x_tx, &grads.d_z_text);
        let err = fd_max_rel_err(
            &mut p,
            &mut |p| {
                let a = view(p);
                let mut scratch = p.clone();
                let (bundle, _) = training_losses(
                    &mut scratch, &cfg, &a, &targets, &head_vv, &head_vt, mask,
                )
                .unwrap();
                mask.objective(&bundle)
            },
            1e-5,
            1e-8,
            8,
        );
        assert!(err < 1e-5, "max rel err {err}");
    }
}
