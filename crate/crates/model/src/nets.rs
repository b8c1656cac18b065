//! Builders for the five parameterized networks.
//!
//! Every public forward map takes channel-last batches `[N, D, H, W, C]`
//! (the layout the data layer produces) and permutes to channel-first
//! internally. Strided and transpose convolutions use kernel 4, stride 2,
//! padding 1 throughout; channel widths double (or halve) per block from
//! `base_channels`, capped at 256.

use crate::{ModelError, Result};
use cranio_autodiff::{lit, Element, Graph, NodeId};
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const DEFAULT_LATENT_DIM: usize = 200;
pub const CHANNEL_CAP: usize = 256;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const NORM_EPS: f64 = 1e-5;
/// `log_var` outputs are clamped to this symmetric range to keep the KL
/// term finite.
pub const LOG_VAR_CLAMP: f64 = 10.0;
pub const GROUP_NORM_GROUPS: usize = 8;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Critic,
    Generator,
    Encoder,
    Decoder,
    VNet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Layer,
    Batch,
    Group,
}

/// One learnable (or state) array with a stable name for checkpoints.
#[derive(Debug, Clone)]
pub struct NamedArray<T> {
    pub name: String,
    pub array: ArrayD<T>,
}

impl<T> NamedArray<T> {
    pub fn new(name: impl Into<String>, array: ArrayD<T>) -> Self {
        Self {
            name: name.into(),
            array,
        }
    }
}

/// The full state of one network: role, geometry and the ordered set of
/// learnable arrays (plus non-learnable buffers such as batch-norm running
/// statistics).
#[derive(Debug, Clone)]
pub struct NetworkParameters<T> {
    pub role: Role,
    pub resolution: usize,
    pub channels: Vec<usize>,
    pub latent_dim: usize,
    pub params: Vec<NamedArray<T>>,
    pub buffers: Vec<NamedArray<T>>,
}

impl<T: Element> NetworkParameters<T> {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.array.len()).sum()
    }
}

/// Binds every learnable array as a graph leaf, in declaration order.
pub fn bind_params<T: Element>(g: &mut Graph<T>, np: &NetworkParameters<T>) -> Vec<NodeId> {
    np.params.iter().map(|p| g.leaf(p.array.clone())).collect()
}

/// Encoder output: per-sample Gaussian posterior parameters, shape `[N, L]`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianPosterior {
    pub mu: NodeId,
    pub log_var: NodeId,
}

/// `z = mu + exp(0.5 * log_var) * noise`.
pub fn reparameterize<T: Element>(
    g: &mut Graph<T>,
    p: &GaussianPosterior,
    noise: NodeId,
) -> Result<NodeId> {
    let mu_shape = g.shape(p.mu);
    if g.shape(p.log_var) != mu_shape || g.shape(noise) != mu_shape {
        return Err(ModelError::Shape(format!(
            "reparameterize: mu {:?}, log_var {:?}, noise {:?}",
            mu_shape,
            g.shape(p.log_var),
            g.shape(noise)
        )));
    }
    let half = g.mul_scalar(p.log_var, 0.5);
    let std = g.exp(half);
    let scaled = g.mul(std, noise);
    Ok(g.add(p.mu, scaled))
}

// ---------------------------------------------------------------------------
// shared building blocks
// ---------------------------------------------------------------------------

fn doubling_schedule(base: usize, blocks: usize) -> Vec<usize> {
    (0..blocks).map(|i| (base << i).min(CHANNEL_CAP)).collect()
}

/// Seed width plus one output width per block: `[8b, 4b, 2b, b, b/2]`,
/// capped at [`CHANNEL_CAP`] and floored at 8 so group normalization with
/// 8 groups stays valid.
fn halving_schedule(base: usize, blocks: usize) -> Vec<usize> {
    (0..=blocks)
        .map(|j| ((base << blocks) >> j).clamp(8, CHANNEL_CAP))
        .collect()
}

fn normal_array<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<T> {
    let dist = Normal::new(0.0f64, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| lit::<T>(dist.sample(rng))).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

fn zeros<T: Element>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::zeros(IxDyn(shape))
}

fn ones<T: Element>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::from_elem(IxDyn(shape), T::one())
}

/// Channel-wise affine: `x * gamma + beta` with `gamma`, `beta` of shape `[C]`.
fn affine_channels<T: Element>(
    g: &mut Graph<T>,
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
) -> NodeId {
    let shape = g.shape(x);
    let c = shape[1];
    let gshape = [1, c, 1, 1, 1];
    let ga = g.reshape(gamma, &gshape);
    let ga = g.broadcast_to(ga, &shape);
    let be = g.reshape(beta, &gshape);
    let be = g.broadcast_to(be, &shape);
    let scaled = g.mul(x, ga);
    g.add(scaled, be)
}

/// Normalizes over `axes` (keepdims) and rescales; shared core of the three
/// normalization layers.
fn normalize_over<T: Element>(g: &mut Graph<T>, x: NodeId, axes: &[usize]) -> NodeId {
    let shape = g.shape(x);
    let mu = g.mean_axes(x, axes);
    let mu_b = g.broadcast_to(mu, &shape);
    let centered = g.sub(x, mu_b);
    let sq = g.square(centered);
    let var = g.mean_axes(sq, axes);
    let var_eps = g.add_scalar(var, NORM_EPS);
    let denom = g.sqrt(var_eps);
    let denom_b = g.broadcast_to(denom, &shape);
    g.div(centered, denom_b)
}

/// Per-sample layer normalization over all channels and voxels.
fn layer_norm<T: Element>(g: &mut Graph<T>, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
    let xn = normalize_over(g, x, &[1, 2, 3, 4]);
    affine_channels(g, xn, gamma, beta)
}

/// Per-sample group normalization with `groups` channel groups.
fn group_norm<T: Element>(
    g: &mut Graph<T>,
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    groups: usize,
) -> NodeId {
    let shape = g.shape(x);
    let (n, c) = (shape[0], shape[1]);
    debug_assert_eq!(c % groups, 0, "channels {c} not divisible by {groups}");
    let grouped = [n, groups, c / groups, shape[2], shape[3], shape[4]];
    let xg = g.reshape(x, &grouped);
    let mu = g.mean_axes(xg, &[2, 3, 4, 5]);
    let mu_b = g.broadcast_to(mu, &grouped);
    let centered = g.sub(xg, mu_b);
    let sq = g.square(centered);
    let var = g.mean_axes(sq, &[2, 3, 4, 5]);
    let var_eps = g.add_scalar(var, NORM_EPS);
    let denom = g.sqrt(var_eps);
    let denom_b = g.broadcast_to(denom, &grouped);
    let xn = g.div(centered, denom_b);
    let xn = g.reshape(xn, &shape);
    affine_channels(g, xn, gamma, beta)
}

/// Batch normalization. In training mode it normalizes with batch statistics
/// and updates the running buffers in place; in inference mode it uses the
/// running statistics only.
#[allow(clippy::too_many_arguments)]
fn batch_norm<T: Element>(
    g: &mut Graph<T>,
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    train: bool,
    running_mean: &mut ArrayD<T>,
    running_var: &mut ArrayD<T>,
) -> NodeId {
    let shape = g.shape(x);
    let c = shape[1];
    let xn = if train {
        let mu = g.mean_axes(x, &[0, 2, 3, 4]);
        let mu_b = g.broadcast_to(mu, &shape);
        let centered = g.sub(x, mu_b);
        let sq = g.square(centered);
        let var = g.mean_axes(sq, &[0, 2, 3, 4]);
        // running-stat update with the freshly computed batch moments
        let m = lit::<T>(BATCH_NORM_MOMENTUM);
        let keep = T::one() - m;
        let mu_v = g.value(mu).iter().cloned().collect::<Vec<T>>();
        let var_v = g.value(var).iter().cloned().collect::<Vec<T>>();
        for (i, (rm, rv)) in running_mean
            .iter_mut()
            .zip(running_var.iter_mut())
            .enumerate()
        {
            *rm = keep * *rm + m * mu_v[i];
            *rv = keep * *rv + m * var_v[i];
        }
        let var_eps = g.add_scalar(var, NORM_EPS);
        let denom = g.sqrt(var_eps);
        let denom_b = g.broadcast_to(denom, &shape);
        g.div(centered, denom_b)
    } else {
        let stat = [1, c, 1, 1, 1];
        let rm = g.leaf(running_mean.clone().into_shape_with_order(IxDyn(&stat)).unwrap());
        let rv = g.leaf(running_var.clone().into_shape_with_order(IxDyn(&stat)).unwrap());
        let rm_b = g.broadcast_to(rm, &shape);
        let centered = g.sub(x, rm_b);
        let rv_eps = g.add_scalar(rv, NORM_EPS);
        let denom = g.sqrt(rv_eps);
        let denom_b = g.broadcast_to(denom, &shape);
        g.div(centered, denom_b)
    };
    affine_channels(g, xn, gamma, beta)
}

/// `[N, D, H, W, C]` -> `[N, C, D, H, W]`.
fn to_channel_first<T: Element>(g: &mut Graph<T>, x: NodeId) -> NodeId {
    g.permute(x, &[0, 4, 1, 2, 3])
}

/// `[N, C, D, H, W]` -> `[N, D, H, W, C]`.
fn to_channel_last<T: Element>(g: &mut Graph<T>, x: NodeId) -> NodeId {
    g.permute(x, &[0, 2, 3, 4, 1])
}

fn check_input<T: Element>(
    g: &Graph<T>,
    x: NodeId,
    resolution: usize,
    channels: usize,
    what: &str,
) -> Result<()> {
    let shape = g.shape(x);
    let ok = shape.len() == 5
        && shape[1] == resolution
        && shape[2] == resolution
        && shape[3] == resolution
        && shape[4] == channels;
    if !ok {
        return Err(ModelError::Shape(format!(
            "{what}: expected [N, {resolution}, {resolution}, {resolution}, {channels}], got {shape:?}"
        )));
    }
    Ok(())
}

/// Sequential parameter reader used by the forward passes; the order must
/// match the `init` order exactly.
struct Cursor<'a> {
    ids: &'a [NodeId],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(ids: &'a [NodeId]) -> Self {
        Self { ids, pos: 0 }
    }

    fn next(&mut self) -> NodeId {
        let id = self.ids[self.pos];
        self.pos += 1;
        id
    }

    fn finish(self) {
        assert_eq!(self.pos, self.ids.len(), "parameter count mismatch");
    }
}

// ---------------------------------------------------------------------------
// critic
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticConfig {
    pub resolution: usize,
    pub in_channels: usize,
    pub base_channels: usize,
}

impl CriticConfig {
    pub fn new(resolution: usize, base_channels: usize) -> Self {
        Self {
            resolution,
            in_channels: 2,
            base_channels,
        }
    }
}

/// Four strided convolution blocks (conv + layer norm + LeakyReLU), each
/// halving the resolution and doubling the channel count, then a single
/// affine map to one unbounded score per sample.
#[derive(Debug, Clone)]
pub struct Critic {
    pub cfg: CriticConfig,
    channels: Vec<usize>,
}

impl Critic {
    pub const BLOCKS: usize = 4;

    pub fn new(cfg: CriticConfig) -> Result<Self> {
        if cfg.resolution == 0 || cfg.resolution % (1 << Self::BLOCKS) != 0 {
            return Err(ModelError::Architecture(format!(
                "critic resolution {} not divisible by {}",
                cfg.resolution,
                1 << Self::BLOCKS
            )));
        }
        if cfg.base_channels == 0 {
            return Err(ModelError::Architecture("base_channels must be positive".into()));
        }
        let channels = doubling_schedule(cfg.base_channels, Self::BLOCKS);
        Ok(Self { cfg, channels })
    }

    pub fn channels(&self) -> &[usize] {
        &self.channels
    }

    /// Flattened feature size after the last block.
    pub fn feature_len(&self) -> usize {
        let side = self.cfg.resolution >> Self::BLOCKS;
        self.channels[Self::BLOCKS - 1] * side * side * side
    }

    pub fn init<T: Element>(&self, seed: u64) -> NetworkParameters<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut cin = self.cfg.in_channels;
        for (i, &cout) in self.channels.iter().enumerate() {
            params.push(NamedArray::new(
                format!("conv{i}.w"),
                normal_array(&mut rng, &[cout, cin, 4, 4, 4], INIT_STD),
            ));
            params.push(NamedArray::new(format!("ln{i}.gamma"), ones::<T>(&[cout])));
            params.push(NamedArray::new(format!("ln{i}.beta"), zeros::<T>(&[cout])));
            cin = cout;
        }
        params.push(NamedArray::new(
            "fc.w",
            normal_array(&mut rng, &[self.feature_len(), 1], INIT_STD),
        ));
        params.push(NamedArray::new("fc.b", zeros::<T>(&[1])));
        NetworkParameters {
            role: Role::Critic,
            resolution: self.cfg.resolution,
            channels: self.channels.clone(),
            latent_dim: 0,
            params,
            buffers: Vec::new(),
        }
    }

    /// `[N, R, R, R, in_channels]` -> `[N, 1]` unbounded scores.
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        params: &[NodeId],
        x: NodeId,
    ) -> Result<NodeId> {
        check_input(g, x, self.cfg.resolution, self.cfg.in_channels, "critic")?;
        let mut cur = Cursor::new(params);
        let mut h = to_channel_first(g, x);
        for _ in 0..Self::BLOCKS {
            let w = cur.next();
            let gamma = cur.next();
            let beta = cur.next();
            h = g.conv3d(h, w, 2, 1);
            h = layer_norm(g, h, gamma, beta);
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        let n = g.shape(h)[0];
        let flat = g.reshape(h, &[n, self.feature_len()]);
        let fc_w = cur.next();
        let fc_b = cur.next();
        cur.finish();
        let scores = g.matmul(flat, fc_w);
        let b = g.broadcast_to(fc_b, &[n, 1]);
        Ok(g.add(scores, b))
    }
}

// ---------------------------------------------------------------------------
// generator / decoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub resolution: usize,
    pub latent_dim: usize,
    pub base_channels: usize,
    pub out_channels: usize,
    pub norm: NormKind,
    /// Squash outputs into (0, 1). Off for the IntroVAE generator, which is
    /// clamped only at synthesis time.
    pub final_sigmoid: bool,
}

impl GeneratorConfig {
    /// WGAN-GP generator: batch norm, sigmoid output.
    pub fn wgan(resolution: usize, base_channels: usize, latent_dim: usize) -> Self {
        Self {
            resolution,
            latent_dim,
            base_channels,
            out_channels: 2,
            norm: NormKind::Batch,
            final_sigmoid: true,
        }
    }

    /// VAE decoder: group norm (matching the encoder), sigmoid output.
    pub fn vae_decoder(resolution: usize, base_channels: usize, latent_dim: usize) -> Self {
        Self {
            norm: NormKind::Group,
            ..Self::wgan(resolution, base_channels, latent_dim)
        }
    }

    /// IntroVAE generator: decoder topology without the output sigmoid.
    pub fn introvae(resolution: usize, base_channels: usize, latent_dim: usize) -> Self {
        Self {
            final_sigmoid: false,
            ..Self::vae_decoder(resolution, base_channels, latent_dim)
        }
    }
}

/// Affine projection of the latent code to a seed volume, four transpose
/// convolution blocks (deconv + norm + ReLU) each doubling the resolution
/// and halving the channels, and a 1-voxel convolution to the output
/// channels.
#[derive(Debug, Clone)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    channels: Vec<usize>,
}

impl Generator {
    pub const BLOCKS: usize = 4;

    pub fn new(cfg: GeneratorConfig) -> Result<Self> {
        if cfg.resolution == 0 || cfg.resolution % (1 << Self::BLOCKS) != 0 {
            return Err(ModelError::Architecture(format!(
                "generator resolution {} not divisible by {}",
                cfg.resolution,
                1 << Self::BLOCKS
            )));
        }
        if cfg.latent_dim == 0 {
            return Err(ModelError::Architecture("latent_dim must be positive".into()));
        }
        let channels = halving_schedule(cfg.base_channels, Self::BLOCKS);
        if cfg.norm == NormKind::Group {
            if let Some(&bad) = channels.iter().find(|&&c| c % GROUP_NORM_GROUPS != 0) {
                return Err(ModelError::Architecture(format!(
                    "channel width {bad} not divisible by {GROUP_NORM_GROUPS} groups"
                )));
            }
        }
        Ok(Self { cfg, channels })
    }

    pub fn channels(&self) -> &[usize] {
        &self.channels
    }

    fn seed_side(&self) -> usize {
        self.cfg.resolution >> Self::BLOCKS
    }

    pub fn init<T: Element>(&self, seed: u64) -> NetworkParameters<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        let d = self.seed_side();
        let c0 = self.channels[0];
        params.push(NamedArray::new(
            "project.w",
            normal_array(&mut rng, &[self.cfg.latent_dim, c0 * d * d * d], INIT_STD),
        ));
        let push_norm = |params: &mut Vec<NamedArray<T>>,
                             buffers: &mut Vec<NamedArray<T>>,
                             i: usize,
                             c: usize| {
            params.push(NamedArray::new(format!("norm{i}.gamma"), ones::<T>(&[c])));
            params.push(NamedArray::new(format!("norm{i}.beta"), zeros::<T>(&[c])));
            if self.cfg.norm == NormKind::Batch {
                buffers.push(NamedArray::new(
                    format!("norm{i}.running_mean"),
                    zeros::<T>(&[c]),
                ));
                buffers.push(NamedArray::new(
                    format!("norm{i}.running_var"),
                    ones::<T>(&[c]),
                ));
            }
        };
        push_norm(&mut params, &mut buffers, 0, c0);
        for i in 0..Self::BLOCKS {
            let (cin, cout) = (self.channels[i], self.channels[i + 1]);
            params.push(NamedArray::new(
                format!("deconv{i}.w"),
                normal_array(&mut rng, &[cin, cout, 4, 4, 4], INIT_STD),
            ));
            push_norm(&mut params, &mut buffers, i + 1, cout);
        }
        params.push(NamedArray::new(
            "head.w",
            normal_array(
                &mut rng,
                &[self.cfg.out_channels, self.channels[Self::BLOCKS], 1, 1, 1],
                INIT_STD,
            ),
        ));
        params.push(NamedArray::new(
            "head.b",
            zeros::<T>(&[self.cfg.out_channels]),
        ));
        NetworkParameters {
            role: if self.cfg.norm == NormKind::Batch {
                Role::Generator
            } else {
                Role::Decoder
            },
            resolution: self.cfg.resolution,
            channels: self.channels.clone(),
            latent_dim: self.cfg.latent_dim,
            params,
            buffers,
        }
    }

    fn apply_norm<T: Element>(
        &self,
        g: &mut Graph<T>,
        h: NodeId,
        gamma: NodeId,
        beta: NodeId,
        train: bool,
        buffers: &mut [NamedArray<T>],
        norm_idx: usize,
    ) -> NodeId {
        match self.cfg.norm {
            NormKind::Batch => {
                // running mean and var are adjacent buffer entries
                let pair = &mut buffers[2 * norm_idx..2 * norm_idx + 2];
                let (rm, rv) = pair.split_at_mut(1);
                batch_norm(g, h, gamma, beta, train, &mut rm[0].array, &mut rv[0].array)
            }
            NormKind::Group => group_norm(g, h, gamma, beta, GROUP_NORM_GROUPS),
            NormKind::Layer => layer_norm(g, h, gamma, beta),
        }
    }

    /// `[N, latent_dim]` codes -> `[N, R, R, R, out_channels]` volumes.
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        params: &[NodeId],
        z: NodeId,
        train: bool,
        buffers: &mut [NamedArray<T>],
    ) -> Result<NodeId> {
        let zshape = g.shape(z);
        if zshape.len() != 2 || zshape[1] != self.cfg.latent_dim {
            return Err(ModelError::Shape(format!(
                "generator: expected [N, {}], got {zshape:?}",
                self.cfg.latent_dim
            )));
        }
        let n = zshape[0];
        let d = self.seed_side();
        let mut cur = Cursor::new(params);
        let proj = cur.next();
        let mut h = g.matmul(z, proj);
        h = g.reshape(h, &[n, self.channels[0], d, d, d]);
        let gamma = cur.next();
        let beta = cur.next();
        h = self.apply_norm(g, h, gamma, beta, train, buffers, 0);
        h = g.relu(h);
        for i in 0..Self::BLOCKS {
            let w = cur.next();
            let gamma = cur.next();
            let beta = cur.next();
            h = g.conv_transpose3d(h, w, 2, 1);
            h = self.apply_norm(g, h, gamma, beta, train, buffers, i + 1);
            h = g.relu(h);
        }
        let head_w = cur.next();
        let head_b = cur.next();
        cur.finish();
        h = g.conv3d(h, head_w, 1, 0);
        let hshape = g.shape(h);
        let b = g.reshape(head_b, &[1, self.cfg.out_channels, 1, 1, 1]);
        let b = g.broadcast_to(b, &hshape);
        h = g.add(h, b);
        if self.cfg.final_sigmoid {
            h = g.sigmoid(h);
        }
        Ok(to_channel_last(g, h))
    }
}

// ---------------------------------------------------------------------------
// VAE encoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub resolution: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    pub latent_dim: usize,
    pub groups: usize,
}

impl EncoderConfig {
    pub fn new(resolution: usize, base_channels: usize, latent_dim: usize) -> Self {
        Self {
            resolution,
            in_channels: 2,
            base_channels,
            latent_dim,
            groups: GROUP_NORM_GROUPS,
        }
    }
}

/// Critic topology with group normalization instead of layer normalization,
/// and two parallel affine heads emitting `mu` and `log_var`.
#[derive(Debug, Clone)]
pub struct VaeEncoder {
    pub cfg: EncoderConfig,
    channels: Vec<usize>,
}

impl VaeEncoder {
    pub const BLOCKS: usize = 4;

    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        if cfg.resolution == 0 || cfg.resolution % (1 << Self::BLOCKS) != 0 {
            return Err(ModelError::Architecture(format!(
                "encoder resolution {} not divisible by {}",
                cfg.resolution,
                1 << Self::BLOCKS
            )));
        }
        let channels = doubling_schedule(cfg.base_channels, Self::BLOCKS);
        if let Some(&bad) = channels.iter().find(|&&c| c % cfg.groups != 0) {
            return Err(ModelError::Architecture(format!(
                "channel width {bad} not divisible by {} groups",
                cfg.groups
            )));
        }
        Ok(Self { cfg, channels })
    }

    pub fn channels(&self) -> &[usize] {
        &self.channels
    }

    pub fn feature_len(&self) -> usize {
        let side = self.cfg.resolution >> Self::BLOCKS;
        self.channels[Self::BLOCKS - 1] * side * side * side
    }

    pub fn init<T: Element>(&self, seed: u64) -> NetworkParameters<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut cin = self.cfg.in_channels;
        for (i, &cout) in self.channels.iter().enumerate() {
            params.push(NamedArray::new(
                format!("conv{i}.w"),
                normal_array(&mut rng, &[cout, cin, 4, 4, 4], INIT_STD),
            ));
            params.push(NamedArray::new(format!("gn{i}.gamma"), ones::<T>(&[cout])));
            params.push(NamedArray::new(format!("gn{i}.beta"), zeros::<T>(&[cout])));
            cin = cout;
        }
        let f = self.feature_len();
        params.push(NamedArray::new(
            "mu.w",
            normal_array(&mut rng, &[f, self.cfg.latent_dim], INIT_STD),
        ));
        params.push(NamedArray::new("mu.b", zeros::<T>(&[self.cfg.latent_dim])));
        params.push(NamedArray::new(
            "logvar.w",
            normal_array(&mut rng, &[f, self.cfg.latent_dim], INIT_STD),
        ));
        params.push(NamedArray::new(
            "logvar.b",
            zeros::<T>(&[self.cfg.latent_dim]),
        ));
        NetworkParameters {
            role: Role::Encoder,
            resolution: self.cfg.resolution,
            channels: self.channels.clone(),
            latent_dim: self.cfg.latent_dim,
            params,
            buffers: Vec::new(),
        }
    }

    /// `[N, R, R, R, in_channels]` -> posterior `(mu, log_var)` of `[N, L]`.
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        params: &[NodeId],
        x: NodeId,
    ) -> Result<GaussianPosterior> {
        check_input(g, x, self.cfg.resolution, self.cfg.in_channels, "encoder")?;
        let mut cur = Cursor::new(params);
        let mut h = to_channel_first(g, x);
        for _ in 0..Self::BLOCKS {
            let w = cur.next();
            let gamma = cur.next();
            let beta = cur.next();
            h = g.conv3d(h, w, 2, 1);
            h = group_norm(g, h, gamma, beta, self.cfg.groups);
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        let n = g.shape(h)[0];
        let flat = g.reshape(h, &[n, self.feature_len()]);
        let head = |g: &mut Graph<T>, cur: &mut Cursor, flat: NodeId| -> NodeId {
            let w = cur.next();
            let b = cur.next();
            let out = g.matmul(flat, w);
            let b = g.broadcast_to(b, &[n, self.cfg.latent_dim]);
            g.add(out, b)
        };
        let mu = head(g, &mut cur, flat);
        let log_var_raw = head(g, &mut cur, flat);
        cur.finish();
        let log_var = g.clamp(log_var_raw, -LOG_VAR_CLAMP, LOG_VAR_CLAMP);
        Ok(GaussianPosterior { mu, log_var })
    }
}

/// The IntroVAE pairing: an inference model sharing the VAE encoder
/// topology and a generator without the output sigmoid.
pub fn build_introvae(
    resolution: usize,
    base_channels: usize,
    latent_dim: usize,
) -> Result<(VaeEncoder, Generator)> {
    let inference = VaeEncoder::new(EncoderConfig::new(resolution, base_channels, latent_dim))?;
    let generator = Generator::new(GeneratorConfig::introvae(
        resolution,
        base_channels,
        latent_dim,
    ))?;
    Ok((inference, generator))
}

// ---------------------------------------------------------------------------
// V-Net
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VNetConfig {
    pub resolution: usize,
    pub base_channels: usize,
    /// Number of downsampling stages (a slightly shallower V-Net: 3).
    pub levels: usize,
}

impl VNetConfig {
    pub fn new(resolution: usize, base_channels: usize) -> Self {
        Self {
            resolution,
            base_channels,
            levels: 3,
        }
    }

    /// Spatial side length of the deepest feature map.
    pub fn deepest_resolution(&self) -> usize {
        self.resolution >> self.levels
    }
}

/// Encoder-decoder segmenter with residual double-convolution blocks per
/// level, additive skip connections at matching resolutions, and a sigmoid
/// head emitting per-voxel defect probability.
#[derive(Debug, Clone)]
pub struct VNet {
    pub cfg: VNetConfig,
    widths: Vec<usize>,
}

impl VNet {
    pub fn new(cfg: VNetConfig) -> Result<Self> {
        if cfg.levels == 0 {
            return Err(ModelError::Architecture("levels must be >= 1".into()));
        }
        if cfg.resolution == 0 || cfg.resolution % (1 << cfg.levels) != 0 {
            return Err(ModelError::Architecture(format!(
                "v-net resolution {} not divisible by {}",
                cfg.resolution,
                1 << cfg.levels
            )));
        }
        let widths = doubling_schedule(cfg.base_channels, cfg.levels + 1);
        Ok(Self { cfg, widths })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    fn groups_for(width: usize) -> usize {
        (1..=GROUP_NORM_GROUPS)
            .rev()
            .find(|g| width % g == 0)
            .unwrap_or(1)
    }

    fn push_resblock<T: Element>(
        rng: &mut ChaCha8Rng,
        params: &mut Vec<NamedArray<T>>,
        prefix: &str,
        width: usize,
    ) {
        for j in 0..2 {
            params.push(NamedArray::new(
                format!("{prefix}.conv{j}.w"),
                normal_array(rng, &[width, width, 3, 3, 3], INIT_STD),
            ));
            params.push(NamedArray::new(
                format!("{prefix}.gn{j}.gamma"),
                ones::<T>(&[width]),
            ));
            params.push(NamedArray::new(
                format!("{prefix}.gn{j}.beta"),
                zeros::<T>(&[width]),
            ));
        }
    }

    pub fn init<T: Element>(&self, seed: u64) -> NetworkParameters<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let w0 = self.widths[0];
        params.push(NamedArray::new(
            "stem.w",
            normal_array(&mut rng, &[w0, 1, 3, 3, 3], INIT_STD),
        ));
        params.push(NamedArray::new("stem.gn.gamma", ones::<T>(&[w0])));
        params.push(NamedArray::new("stem.gn.beta", zeros::<T>(&[w0])));
        for l in 0..=self.cfg.levels {
            Self::push_resblock(&mut rng, &mut params, &format!("enc{l}"), self.widths[l]);
            if l < self.cfg.levels {
                let (cin, cout) = (self.widths[l], self.widths[l + 1]);
                params.push(NamedArray::new(
                    format!("down{l}.w"),
                    normal_array(&mut rng, &[cout, cin, 4, 4, 4], INIT_STD),
                ));
                params.push(NamedArray::new(format!("down{l}.gn.gamma"), ones::<T>(&[cout])));
                params.push(NamedArray::new(format!("down{l}.gn.beta"), zeros::<T>(&[cout])));
            }
        }
        for l in (0..self.cfg.levels).rev() {
            let (cin, cout) = (self.widths[l + 1], self.widths[l]);
            params.push(NamedArray::new(
                format!("up{l}.w"),
                normal_array(&mut rng, &[cin, cout, 4, 4, 4], INIT_STD),
            ));
            params.push(NamedArray::new(format!("up{l}.gn.gamma"), ones::<T>(&[cout])));
            params.push(NamedArray::new(format!("up{l}.gn.beta"), zeros::<T>(&[cout])));
            Self::push_resblock(&mut rng, &mut params, &format!("dec{l}"), cout);
        }
        params.push(NamedArray::new(
            "head.w",
            normal_array(&mut rng, &[1, w0, 1, 1, 1], INIT_STD),
        ));
        params.push(NamedArray::new("head.b", zeros::<T>(&[1])));
        NetworkParameters {
            role: Role::VNet,
            resolution: self.cfg.resolution,
            channels: self.widths.clone(),
            latent_dim: 0,
            params,
            buffers: Vec::new(),
        }
    }

    fn resblock<T: Element>(g: &mut Graph<T>, cur: &mut Cursor, h: NodeId, width: usize) -> NodeId {
        let groups = Self::groups_for(width);
        let w1 = cur.next();
        let ga1 = cur.next();
        let be1 = cur.next();
        let w2 = cur.next();
        let ga2 = cur.next();
        let be2 = cur.next();
        let mut f = g.conv3d(h, w1, 1, 1);
        f = group_norm(g, f, ga1, be1, groups);
        f = g.relu(f);
        f = g.conv3d(f, w2, 1, 1);
        f = group_norm(g, f, ga2, be2, groups);
        let sum = g.add(f, h);
        g.relu(sum)
    }

    /// `[N, R, R, R, 1]` defective skull -> `[N, R, R, R, 1]` defect
    /// probability in `(0, 1)`.
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        params: &[NodeId],
        x: NodeId,
    ) -> Result<NodeId> {
        check_input(g, x, self.cfg.resolution, 1, "v-net")?;
        let mut cur = Cursor::new(params);
        let mut h = to_channel_first(g, x);
        let stem_w = cur.next();
        let stem_ga = cur.next();
        let stem_be = cur.next();
        h = g.conv3d(h, stem_w, 1, 1);
        h = group_norm(g, h, stem_ga, stem_be, Self::groups_for(self.widths[0]));
        h = g.relu(h);

        let mut skips = Vec::with_capacity(self.cfg.levels);
        for l in 0..=self.cfg.levels {
            h = Self::resblock(g, &mut cur, h, self.widths[l]);
            if l < self.cfg.levels {
                skips.push(h);
                let w = cur.next();
                let ga = cur.next();
                let be = cur.next();
                h = g.conv3d(h, w, 2, 1);
                h = group_norm(g, h, ga, be, Self::groups_for(self.widths[l + 1]));
                h = g.relu(h);
            }
        }
        for l in (0..self.cfg.levels).rev() {
            let w = cur.next();
            let ga = cur.next();
            let be = cur.next();
            h = g.conv_transpose3d(h, w, 2, 1);
            h = group_norm(g, h, ga, be, Self::groups_for(self.widths[l]));
            h = g.relu(h);
            h = g.add(h, skips[l]);
            h = Self::resblock(g, &mut cur, h, self.widths[l]);
        }
        let head_w = cur.next();
        let head_b = cur.next();
        cur.finish();
        h = g.conv3d(h, head_w, 1, 0);
        let hshape = g.shape(h);
        let b = g.reshape(head_b, &[1, 1, 1, 1, 1]);
        let b = g.broadcast_to(b, &hshape);
        h = g.add(h, b);
        h = g.sigmoid(h);
        Ok(to_channel_last(g, h))
    }
}
