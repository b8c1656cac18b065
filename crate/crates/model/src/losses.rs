//! Scalar training objectives: the WGAN-GP critic/generator pair with its
//! gradient penalty, the VAE evidence terms, both introspective-VAE losses,
//! the soft Dice loss, and a finite-difference gradient harness.
//!
//! Loss builders return graph nodes so gradients (including the
//! second-order path through the gradient penalty) flow to whatever the
//! caller differentiates against. Batch reduction is the arithmetic mean
//! everywhere.

use crate::nets::GaussianPosterior;
use crate::{ModelError, Result};
use cranio_autodiff::{lit, Element, Graph, NodeId};
use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Probabilities are clamped into `[CLAMP, 1 - CLAMP]` before the
/// cross-entropy logarithms.
pub const PROB_CLAMP: f64 = 1e-6;
/// Stabilizer inside the gradient-norm square root.
const NORM_FLOOR: f64 = 1e-12;
/// Gradient magnitudes below this scale are compared absolutely in the
/// finite-difference harness.
const FD_REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WganGpConfig {
    pub lambda_gp: f64,
    pub critic_iters_per_gen: usize,
}

impl Default for WganGpConfig {
    fn default() -> Self {
        Self {
            lambda_gp: 100.0,
            critic_iters_per_gen: 5,
        }
    }
}

impl WganGpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_gp < 0.0 {
            return Err(ModelError::Numeric(format!(
                "lambda_gp {} must be >= 0",
                self.lambda_gp
            )));
        }
        if self.critic_iters_per_gen == 0 {
            return Err(ModelError::Numeric(
                "critic_iters_per_gen must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntroVaeConfig {
    pub alpha: f64,
    pub beta: f64,
    pub margin: f64,
}

impl Default for IntroVaeConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            beta: 1.0,
            margin: 10.0,
        }
    }
}

impl IntroVaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.margin <= 0.0 {
            return Err(ModelError::Numeric(format!(
                "introvae config out of range: alpha {}, beta {}, m {}",
                self.alpha, self.beta, self.margin
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiceLossConfig {
    pub epsilon: f64,
}

impl Default for DiceLossConfig {
    fn default() -> Self {
        Self { epsilon: 1.0 }
    }
}

fn all_axes_but_batch(ndim: usize) -> Vec<usize> {
    (1..ndim).collect()
}

fn check_finite<T: Element>(g: &Graph<T>, id: NodeId, what: &str) -> Result<()> {
    if g.value(id).iter().any(|v| !v.is_finite()) {
        return Err(ModelError::Numeric(format!("{what} is not finite")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// WGAN-GP
// ---------------------------------------------------------------------------

/// Mean squared deviation of the critic's per-sample input-gradient norm
/// from 1, measured on straight-line interpolates `eps*real + (1-eps)*fake`
/// with one uniform `eps` per sample.
///
/// The returned node can be differentiated with respect to the critic's
/// parameters (the double-backward path).
pub fn gradient_penalty<T, F>(
    g: &mut Graph<T>,
    critic: &mut F,
    real: &ArrayD<T>,
    fake: &ArrayD<T>,
    eps: &[T],
) -> Result<NodeId>
where
    T: Element,
    F: FnMut(&mut Graph<T>, NodeId) -> Result<NodeId>,
{
    if real.shape() != fake.shape() {
        return Err(ModelError::Shape(format!(
            "gradient_penalty: real {:?} vs fake {:?}",
            real.shape(),
            fake.shape()
        )));
    }
    let n = real.shape()[0];
    if eps.len() != n {
        return Err(ModelError::Shape(format!(
            "gradient_penalty: {} eps values for batch {n}",
            eps.len()
        )));
    }
    let mut interp = fake.clone();
    for (i, mut row) in interp.outer_iter_mut().enumerate() {
        let e = eps[i];
        let one_m = T::one() - e;
        row.zip_mut_with(&real.index_axis(ndarray::Axis(0), i), |f, r| {
            *f = e * *r + one_m * *f;
        });
    }
    let xhat = g.leaf(interp);
    let scores = run_critic(g, critic, xhat)?;
    // per-sample gradient of the summed scores
    let total = g.sum_all(scores);
    let grad = g.grad(total, &[xhat])[0];
    let grad = match grad {
        Some(id) => id,
        // a critic that ignores its input has zero gradient everywhere
        None => {
            let shape = g.shape(xhat);
            g.leaf(ArrayD::zeros(IxDyn(&shape)))
        }
    };
    let sq = g.square(grad);
    let axes = all_axes_but_batch(g.shape(sq).len());
    let sums = g.sum_axes(sq, &axes);
    let sums = g.reshape(sums, &[n]);
    let sums = g.add_scalar(sums, NORM_FLOOR);
    let norms = g.sqrt(sums);
    let dev = g.add_scalar(norms, -1.0);
    let dev2 = g.square(dev);
    Ok(g.mean_all(dev2))
}

/// Applies the critic and rejects non-finite scores.
fn run_critic<T, F>(g: &mut Graph<T>, critic: &mut F, x: NodeId) -> Result<NodeId>
where
    T: Element,
    F: FnMut(&mut Graph<T>, NodeId) -> Result<NodeId>,
{
    let scores = critic(g, x)?;
    check_finite(g, scores, "critic output")?;
    Ok(scores)
}

/// The three summands of the critic objective.
#[derive(Debug, Clone, Copy)]
pub struct CriticLossParts {
    pub total: NodeId,
    /// Wasserstein estimate `mean C(real) - mean C(fake)` (for tracing).
    pub wasserstein: NodeId,
    pub penalty: NodeId,
}

/// `mean C(fake) - mean C(real) + lambda * gradient_penalty`.
pub fn critic_loss<T, F>(
    g: &mut Graph<T>,
    critic: &mut F,
    real: &ArrayD<T>,
    fake: &ArrayD<T>,
    eps: &[T],
    cfg: &WganGpConfig,
) -> Result<CriticLossParts>
where
    T: Element,
    F: FnMut(&mut Graph<T>, NodeId) -> Result<NodeId>,
{
    cfg.validate()?;
    let real_node = g.leaf(real.clone());
    let fake_node = g.leaf(fake.clone());
    let s_real = run_critic(g, critic, real_node)?;
    let s_fake = run_critic(g, critic, fake_node)?;
    let m_real = g.mean_all(s_real);
    let m_fake = g.mean_all(s_fake);
    let wasserstein = g.sub(m_real, m_fake);
    let base = g.sub(m_fake, m_real);
    let (penalty, total) = if cfg.lambda_gp > 0.0 {
        let p = gradient_penalty(g, critic, real, fake, eps)?;
        let scaled = g.mul_scalar(p, cfg.lambda_gp);
        (p, g.add(base, scaled))
    } else {
        (g.scalar(T::zero()), base)
    };
    Ok(CriticLossParts {
        total,
        wasserstein,
        penalty,
    })
}

/// `-mean C(fake)`, with `fake` an in-graph node so the gradient reaches
/// the generator that produced it.
pub fn generator_wgan_loss<T, F>(g: &mut Graph<T>, critic: &mut F, fake: NodeId) -> Result<NodeId>
where
    T: Element,
    F: FnMut(&mut Graph<T>, NodeId) -> Result<NodeId>,
{
    let scores = run_critic(g, critic, fake)?;
    let m = g.mean_all(scores);
    Ok(g.neg(m))
}

// ---------------------------------------------------------------------------
// VAE / IntroVAE
// ---------------------------------------------------------------------------

/// `KL(N(mu, exp(log_var)) || N(0, I))`, summed over latent dimensions and
/// meaned over the batch: `0.5 * sum(exp(lv) + mu^2 - 1 - lv)`.
pub fn kl_standard_normal<T: Element>(g: &mut Graph<T>, p: &GaussianPosterior) -> NodeId {
    let e = g.exp(p.log_var);
    let mu2 = g.square(p.mu);
    let sum = g.add(e, mu2);
    let sum = g.add_scalar(sum, -1.0);
    let sum = g.sub(sum, p.log_var);
    let per_sample = g.sum_axes(sum, &[1]);
    let mean = g.mean_all(per_sample);
    g.mul_scalar(mean, 0.5)
}

/// Per-voxel binary cross-entropy of `x_rec` against binary `x`, summed
/// over voxels and channels and meaned over the batch. `x_rec` is clamped
/// into `[1e-6, 1 - 1e-6]` first.
pub fn reconstruction_loss<T: Element>(
    g: &mut Graph<T>,
    x: NodeId,
    x_rec: NodeId,
) -> Result<NodeId> {
    if g.shape(x) != g.shape(x_rec) {
        return Err(ModelError::Shape(format!(
            "reconstruction_loss: x {:?} vs x_rec {:?}",
            g.shape(x),
            g.shape(x_rec)
        )));
    }
    let p = g.clamp(x_rec, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let log_p = g.ln(p);
    let neg_p = g.neg(p);
    let one_m_p = g.add_scalar(neg_p, 1.0);
    let log_1mp = g.ln(one_m_p);
    let neg_x = g.neg(x);
    let one_m_x = g.add_scalar(neg_x, 1.0);
    let pos = g.mul(x, log_p);
    let negt = g.mul(one_m_x, log_1mp);
    let ll = g.add(pos, negt);
    let axes = all_axes_but_batch(g.shape(ll).len());
    let per_sample = g.sum_axes(ll, &axes);
    let mean = g.mean_all(per_sample);
    Ok(g.neg(mean))
}

#[derive(Debug, Clone, Copy)]
pub struct IntroVaeEncoderParts {
    pub total: NodeId,
    pub kl_real: NodeId,
    pub adv_kl_rec: NodeId,
    pub adv_kl_sampled: NodeId,
    pub hinge_rec: NodeId,
    pub hinge_sampled: NodeId,
    pub recon: NodeId,
}

/// Encoder objective: `KL(real) + alpha * sum_s max(0, m - KL(s)) +
/// beta * reconstruction`. The `rec`/`sampled` posteriors must come from
/// generator outputs with gradients stopped at those volumes.
pub fn introvae_encoder_loss<T: Element>(
    g: &mut Graph<T>,
    real: &GaussianPosterior,
    rec: &GaussianPosterior,
    sampled: &GaussianPosterior,
    x: NodeId,
    x_rec: NodeId,
    cfg: &IntroVaeConfig,
) -> Result<IntroVaeEncoderParts> {
    cfg.validate()?;
    let kl_real = kl_standard_normal(g, real);
    let adv_kl_rec = kl_standard_normal(g, rec);
    let adv_kl_sampled = kl_standard_normal(g, sampled);
    let hinge = |g: &mut Graph<T>, kl: NodeId| -> NodeId {
        let neg = g.neg(kl);
        let gap = g.add_scalar(neg, cfg.margin);
        g.relu(gap)
    };
    let hinge_rec = hinge(g, adv_kl_rec);
    let hinge_sampled = hinge(g, adv_kl_sampled);
    let recon = reconstruction_loss(g, x, x_rec)?;
    let hinges = g.add(hinge_rec, hinge_sampled);
    let adv = g.mul_scalar(hinges, cfg.alpha);
    let rec_term = g.mul_scalar(recon, cfg.beta);
    let partial = g.add(kl_real, adv);
    let total = g.add(partial, rec_term);
    Ok(IntroVaeEncoderParts {
        total,
        kl_real,
        adv_kl_rec,
        adv_kl_sampled,
        hinge_rec,
        hinge_sampled,
        recon,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct IntroVaeGeneratorParts {
    pub total: NodeId,
    pub adv_kl_rec: NodeId,
    pub adv_kl_sampled: NodeId,
    pub recon: NodeId,
}

/// Generator objective: `alpha * sum_s KL(s) + beta * reconstruction`,
/// with posteriors computed while gradients flow through the generator.
pub fn introvae_generator_loss<T: Element>(
    g: &mut Graph<T>,
    rec: &GaussianPosterior,
    sampled: &GaussianPosterior,
    x: NodeId,
    x_rec: NodeId,
    cfg: &IntroVaeConfig,
) -> Result<IntroVaeGeneratorParts> {
    cfg.validate()?;
    let adv_kl_rec = kl_standard_normal(g, rec);
    let adv_kl_sampled = kl_standard_normal(g, sampled);
    let recon = reconstruction_loss(g, x, x_rec)?;
    let kls = g.add(adv_kl_rec, adv_kl_sampled);
    let adv = g.mul_scalar(kls, cfg.alpha);
    let rec_term = g.mul_scalar(recon, cfg.beta);
    let total = g.add(adv, rec_term);
    Ok(IntroVaeGeneratorParts {
        total,
        adv_kl_rec,
        adv_kl_sampled,
        recon,
    })
}

// ---------------------------------------------------------------------------
// Dice
// ---------------------------------------------------------------------------

/// Soft Dice loss `1 - 2*sum(p*t) / (sum(p) + sum(t) + eps)` per sample,
/// meaned over the batch. The soft intersection uses products.
pub fn dice_loss<T: Element>(
    g: &mut Graph<T>,
    pred: NodeId,
    target: NodeId,
    cfg: &DiceLossConfig,
) -> Result<NodeId> {
    if g.shape(pred) != g.shape(target) {
        return Err(ModelError::Shape(format!(
            "dice_loss: pred {:?} vs target {:?}",
            g.shape(pred),
            g.shape(target)
        )));
    }
    let axes = all_axes_but_batch(g.shape(pred).len());
    let prod = g.mul(pred, target);
    let inter = g.sum_axes(prod, &axes);
    let sum_p = g.sum_axes(pred, &axes);
    let sum_t = g.sum_axes(target, &axes);
    let denom = g.add(sum_p, sum_t);
    let denom = g.add_scalar(denom, cfg.epsilon);
    let ratio = g.div(inter, denom);
    let ratio = g.mul_scalar(ratio, 2.0);
    let neg = g.neg(ratio);
    let one_minus = g.add_scalar(neg, 1.0);
    Ok(g.mean_all(one_minus))
}

// ---------------------------------------------------------------------------
// finite differences
// ---------------------------------------------------------------------------

/// Compares analytic gradients against central finite differences on
/// `probe_count` randomly chosen parameter entries, returning the maximum
/// relative error. The relative error uses
/// `|a - fd| / max(|a|, |fd|, 1e-3)` so vanishing gradients are compared
/// on an absolute scale.
pub fn finite_difference_check<T, F>(
    mut loss_fn: F,
    params: &[ArrayD<T>],
    probe_count: usize,
    step: f64,
    seed: u64,
) -> Result<f64>
where
    T: Element,
    F: FnMut(&mut Graph<T>, &[NodeId]) -> Result<NodeId>,
{
    if step <= 0.0 {
        return Err(ModelError::Numeric(format!("step {step} must be > 0")));
    }
    let eval = |arrays: &[ArrayD<T>], loss_fn: &mut F| -> Result<T> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = arrays.iter().map(|a| g.leaf(a.clone())).collect();
        let loss = loss_fn(&mut g, &ids)?;
        let v = g.scalar_value(loss);
        if !v.is_finite() {
            return Err(ModelError::Numeric("loss is not finite".into()));
        }
        Ok(v)
    };

    // analytic gradients once
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|a| g.leaf(a.clone())).collect();
    let loss = loss_fn(&mut g, &ids)?;
    if !g.scalar_value(loss).is_finite() {
        return Err(ModelError::Numeric("loss is not finite".into()));
    }
    let grads = g.grad(loss, &ids);
    let analytic: Vec<ArrayD<T>> = grads
        .iter()
        .zip(params)
        .map(|(og, p)| match og {
            Some(id) => g.value(*id).clone(),
            None => ArrayD::zeros(IxDyn(p.shape())),
        })
        .collect();

    // probe positions across the flattened parameter space
    let mut positions: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.len()).map(move |fi| (pi, fi)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    positions.shuffle(&mut rng);
    positions.truncate(probe_count.min(positions.len()));

    let h = lit::<T>(step);
    let mut max_rel = 0.0f64;
    let mut work = params.to_vec();
    for (pi, fi) in positions {
        let orig = work[pi].as_slice().unwrap()[fi];
        work[pi].as_slice_mut().unwrap()[fi] = orig + h;
        let plus = eval(&work, &mut loss_fn)?;
        work[pi].as_slice_mut().unwrap()[fi] = orig - h;
        let minus = eval(&work, &mut loss_fn)?;
        work[pi].as_slice_mut().unwrap()[fi] = orig;

        let fd = (plus - minus).to_f64().unwrap() / (2.0 * step);
        let a = analytic[pi].as_slice().unwrap()[fi].to_f64().unwrap();
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(FD_REL_FLOOR);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
