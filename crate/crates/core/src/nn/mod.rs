//! Policy and value networks: a cross-attention keypoint encoder driven by
//! learned query tokens, a two-layer ReLU trunk, and independent categorical
//! action heads, plus a separately parameterized critic whose input is
//! widened by privileged signals. Gradients come from the reverse-mode tape
//! in [`tape`].

pub mod tape;

pub use tape::{Graph, NodeId, TapeError, Tensor};

use crate::env::{Action, Observation, PrivilegedObservation, GRID_SIZES};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Keyframe head arity: {skip, take}.
pub const KEYFRAME_CLASSES: usize = 2;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("non-finite keypoint coordinates in observation")]
    MalformedKeypoints,
    #[error("action index {index} out of range for {classes} classes")]
    IndexOutOfRange { index: usize, classes: usize },
    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

impl From<std::io::Error> for NnError {
    fn from(e: std::io::Error) -> Self {
        NnError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Number of learned query tokens (M).
    pub token_count: usize,
    /// Token / attention width (D).
    pub token_dim: usize,
    /// Attention heads (h); must divide token_dim.
    pub num_heads: usize,
    /// Trunk hidden width.
    pub mlp_hidden: usize,
    /// Length of the map-statistics vector appended to the encoding.
    pub map_stats_dim: usize,
    /// Keyframe head arity (fixed at 2).
    pub keyframe_classes: usize,
    /// Grid-size head arity (fixed to the action set).
    pub gridsize_classes: usize,
    /// Extra critic inputs: current window error plus future motion.
    pub privileged_extra_dim: usize,
    /// Keypoint depths are divided by this scene scale before encoding.
    pub depth_scale: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            token_count: 4,
            token_dim: 32,
            num_heads: 4,
            mlp_hidden: 128,
            map_stats_dim: 12,
            keyframe_classes: KEYFRAME_CLASSES,
            gridsize_classes: GRID_SIZES.len(),
            privileged_extra_dim: 11,
            depth_scale: 10.0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let fail = |msg: String| Err(NnError::InvalidConfig(msg));
        if self.token_count == 0
            || self.token_dim == 0
            || self.num_heads == 0
            || self.mlp_hidden == 0
            || self.map_stats_dim == 0
        {
            return fail("all dimensions must be positive".into());
        }
        if !self.token_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "token_dim {} must be divisible by num_heads {}",
                self.token_dim, self.num_heads
            ));
        }
        // The head arities are tied to the fixed action space.
        if self.keyframe_classes != KEYFRAME_CLASSES {
            return fail(format!("keyframe_classes must be {KEYFRAME_CLASSES}"));
        }
        if self.gridsize_classes != GRID_SIZES.len() {
            return fail(format!("gridsize_classes must be {}", GRID_SIZES.len()));
        }
        if self.privileged_extra_dim == 0 {
            return fail("privileged_extra_dim must be positive".into());
        }
        if !(self.depth_scale.is_finite() && self.depth_scale > 0.0) {
            return fail("depth_scale must be positive and finite".into());
        }
        Ok(())
    }

    /// Width of the flattened encoder output.
    pub fn encoding_dim(&self) -> usize {
        self.token_count * self.token_dim
    }

    /// Trunk input width for the actor.
    pub fn actor_input_dim(&self) -> usize {
        self.encoding_dim() + self.map_stats_dim
    }

    /// Trunk input width for the critic.
    pub fn critic_input_dim(&self) -> usize {
        self.actor_input_dim() + self.privileged_extra_dim
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub tokens: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrunkParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Actor parameters. `tensors()` order is the canonical declared order used
/// by slot binding, gradient export, optimizer state, and checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParameters {
    pub encoder: EncoderParams,
    pub trunk: TrunkParams,
    pub w_keyframe: Tensor,
    pub b_keyframe: Tensor,
    pub w_gridsize: Tensor,
    pub b_gridsize: Tensor,
}

/// Critic parameters; a separate network (no weight sharing with the actor).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticParameters {
    pub encoder: EncoderParams,
    pub trunk: TrunkParams,
    pub w_value: Tensor,
    pub b_value: Tensor,
}

impl EncoderParams {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.tokens,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.tokens,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
        ]
    }

    fn shapes(cfg: &NetConfig) -> Vec<(usize, usize)> {
        let (m, d) = (cfg.token_count, cfg.token_dim);
        vec![
            (m, d),
            (d, d),
            (1, d),
            (3, d),
            (1, d),
            (3, d),
            (1, d),
            (d, d),
            (1, d),
        ]
    }
}

impl TrunkParams {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    fn shapes(input_dim: usize, hidden: usize) -> Vec<(usize, usize)> {
        vec![(input_dim, hidden), (1, hidden), (hidden, hidden), (1, hidden)]
    }
}

impl PolicyParameters {
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut t = self.encoder.tensors();
        t.extend(self.trunk.tensors());
        t.push(&self.w_keyframe);
        t.push(&self.b_keyframe);
        t.push(&self.w_gridsize);
        t.push(&self.b_gridsize);
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t = self.encoder.tensors_mut();
        t.extend(self.trunk.tensors_mut());
        t.push(&mut self.w_keyframe);
        t.push(&mut self.b_keyframe);
        t.push(&mut self.w_gridsize);
        t.push(&mut self.b_gridsize);
        t
    }

    pub fn shapes(cfg: &NetConfig) -> Vec<(usize, usize)> {
        let mut s = EncoderParams::shapes(cfg);
        s.extend(TrunkParams::shapes(cfg.actor_input_dim(), cfg.mlp_hidden));
        s.push((cfg.mlp_hidden, cfg.keyframe_classes));
        s.push((1, cfg.keyframe_classes));
        s.push((cfg.mlp_hidden, cfg.gridsize_classes));
        s.push((1, cfg.gridsize_classes));
        s
    }
}

impl CriticParameters {
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut t = self.encoder.tensors();
        t.extend(self.trunk.tensors());
        t.push(&self.w_value);
        t.push(&self.b_value);
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t = self.encoder.tensors_mut();
        t.extend(self.trunk.tensors_mut());
        t.push(&mut self.w_value);
        t.push(&mut self.b_value);
        t
    }

    pub fn shapes(cfg: &NetConfig) -> Vec<(usize, usize)> {
        let mut s = EncoderParams::shapes(cfg);
        s.extend(TrunkParams::shapes(cfg.critic_input_dim(), cfg.mlp_hidden));
        s.push((cfg.mlp_hidden, 1));
        s.push((1, 1));
        s
    }
}

/// Total scalar parameter count of actor and critic together.
pub fn count_parameters(actor: &PolicyParameters, critic: &CriticParameters) -> usize {
    actor.tensors().iter().map(|t| t.len()).sum::<usize>()
        + critic.tensors().iter().map(|t| t.len()).sum::<usize>()
}

/// Orthogonal(-style) initialization: QR of a standard-normal matrix with
/// the R-diagonal sign fix, transposed when the target is wide, scaled by
/// `gain`.
fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let tall = rows.max(cols);
    let thin = rows.min(cols);
    let a = DMatrix::<f64>::from_fn(tall, thin, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..thin {
        if r[(j, j)] < 0.0 {
            for i in 0..tall {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    let mut out = Tensor::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let v = if rows >= cols { q[(i, j)] } else { q[(j, i)] };
            out.data[i * cols + j] = gain * v;
        }
    }
    out
}

fn init_encoder(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> EncoderParams {
    let (m, d) = (cfg.token_count, cfg.token_dim);
    let token_scale = 1.0 / (d as f64).sqrt();
    let tokens = Tensor::from_vec(
        m,
        d,
        (0..m * d)
            .map(|_| token_scale * rng.sample::<f64, _>(StandardNormal))
            .collect(),
    );
    EncoderParams {
        tokens,
        wq: orthogonal(d, d, 1.0, rng),
        bq: Tensor::zeros(1, d),
        wk: orthogonal(3, d, 1.0, rng),
        bk: Tensor::zeros(1, d),
        wv: orthogonal(3, d, 1.0, rng),
        bv: Tensor::zeros(1, d),
        wo: orthogonal(d, d, 1.0, rng),
        bo: Tensor::zeros(1, d),
    }
}

fn init_trunk(input_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> TrunkParams {
    let gain = 2.0_f64.sqrt();
    TrunkParams {
        w1: orthogonal(input_dim, hidden, gain, rng),
        b1: Tensor::zeros(1, hidden),
        w2: orthogonal(hidden, hidden, gain, rng),
        b2: Tensor::zeros(1, hidden),
    }
}

/// Deterministic parameter initialization: one seed drives one draw stream
/// covering actor tensors then critic tensors in declared order.
pub fn init_parameters(
    cfg: &NetConfig,
    seed: u64,
) -> Result<(PolicyParameters, CriticParameters), NnError> {
    cfg.validate()?;
    const HEAD_GAIN: f64 = 0.01;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let actor = PolicyParameters {
        encoder: init_encoder(cfg, &mut rng),
        trunk: init_trunk(cfg.actor_input_dim(), cfg.mlp_hidden, &mut rng),
        w_keyframe: orthogonal(cfg.mlp_hidden, cfg.keyframe_classes, HEAD_GAIN, &mut rng),
        b_keyframe: Tensor::zeros(1, cfg.keyframe_classes),
        w_gridsize: orthogonal(cfg.mlp_hidden, cfg.gridsize_classes, HEAD_GAIN, &mut rng),
        b_gridsize: Tensor::zeros(1, cfg.gridsize_classes),
    };
    let critic = CriticParameters {
        encoder: init_encoder(cfg, &mut rng),
        trunk: init_trunk(cfg.critic_input_dim(), cfg.mlp_hidden, &mut rng),
        w_value: orthogonal(cfg.mlp_hidden, 1, HEAD_GAIN, &mut rng),
        b_value: Tensor::zeros(1, 1),
    };
    Ok((actor, critic))
}

// ---------------------------------------------------------------------------
// Observation standardization
// ---------------------------------------------------------------------------

/// Online mean/variance (Welford). Used to standardize the map statistics
/// and the critic's privileged extras; updated only between training
/// updates, frozen at evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningNorm {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl RunningNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> f64 {
        self.count
    }

    pub fn update(&mut self, sample: &[f64]) {
        assert_eq!(sample.len(), self.mean.len(), "norm dimension mismatch");
        self.count += 1.0;
        for ((&x, mean), m2) in sample.iter().zip(&mut self.mean).zip(&mut self.m2) {
            let delta = x - *mean;
            *mean += delta / self.count;
            *m2 += delta * (x - *mean);
        }
    }

    fn std(&self, i: usize) -> f64 {
        if self.count < 2.0 {
            return 1.0;
        }
        (self.m2[i] / self.count).sqrt().max(1e-8)
    }

    /// Standardizes without mutating (frozen view of the statistics).
    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.mean.len(), "norm dimension mismatch");
        let offset = if self.count < 2.0 { vec![0.0; x.len()] } else { self.mean.clone() };
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - offset[i]) / self.std(i))
            .collect()
    }
}

/// An observation prepared for the network: depth-scaled keypoints plus the
/// standardized statistics vector (map stats for the actor; map stats ++
/// privileged extras for the critic).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetInput {
    pub keypoints: Vec<[f64; 3]>,
    pub stats: Vec<f64>,
}

fn scaled_keypoints(cfg: &NetConfig, keypoints: &[[f64; 3]]) -> Result<Vec<[f64; 3]>, NnError> {
    let mut out = Vec::with_capacity(keypoints.len());
    for kp in keypoints {
        if !kp.iter().all(|v| v.is_finite()) {
            return Err(NnError::MalformedKeypoints);
        }
        out.push([kp[0], kp[1], kp[2] / cfg.depth_scale]);
    }
    Ok(out)
}

pub fn prepare_actor_input(
    cfg: &NetConfig,
    obs: &Observation,
    obs_norm: &RunningNorm,
) -> Result<NetInput, NnError> {
    Ok(NetInput {
        keypoints: scaled_keypoints(cfg, &obs.keypoints)?,
        stats: obs_norm.normalize(&obs.map_stats),
    })
}

pub fn prepare_critic_input(
    cfg: &NetConfig,
    pobs: &PrivilegedObservation,
    obs_norm: &RunningNorm,
    priv_norm: &RunningNorm,
) -> Result<NetInput, NnError> {
    let mut stats = obs_norm.normalize(&pobs.observation.map_stats);
    let extras = pobs.privileged_extras();
    stats.extend(priv_norm.normalize(&extras));
    Ok(NetInput {
        keypoints: scaled_keypoints(cfg, &pobs.observation.keypoints)?,
        stats,
    })
}

// ---------------------------------------------------------------------------
// Graph construction
// ---------------------------------------------------------------------------

/// Encoder parameters bound to graph leaves.
pub struct EncoderNodes {
    pub tokens: NodeId,
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
}

pub struct TrunkNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

pub struct ActorNodes {
    pub encoder: EncoderNodes,
    pub trunk: TrunkNodes,
    pub w_keyframe: NodeId,
    pub b_keyframe: NodeId,
    pub w_gridsize: NodeId,
    pub b_gridsize: NodeId,
}

pub struct CriticNodes {
    pub encoder: EncoderNodes,
    pub trunk: TrunkNodes,
    pub w_value: NodeId,
    pub b_value: NodeId,
}

fn bind_encoder(g: &mut Graph, p: &EncoderParams, slot: &mut usize) -> EncoderNodes {
    let mut bind = |t: &Tensor, g: &mut Graph| {
        let id = g.param(t.clone(), *slot);
        *slot += 1;
        id
    };
    EncoderNodes {
        tokens: bind(&p.tokens, g),
        wq: bind(&p.wq, g),
        bq: bind(&p.bq, g),
        wk: bind(&p.wk, g),
        bk: bind(&p.bk, g),
        wv: bind(&p.wv, g),
        bv: bind(&p.bv, g),
        wo: bind(&p.wo, g),
        bo: bind(&p.bo, g),
    }
}

fn bind_trunk(g: &mut Graph, p: &TrunkParams, slot: &mut usize) -> TrunkNodes {
    let mut bind = |t: &Tensor, g: &mut Graph| {
        let id = g.param(t.clone(), *slot);
        *slot += 1;
        id
    };
    TrunkNodes {
        w1: bind(&p.w1, g),
        b1: bind(&p.b1, g),
        w2: bind(&p.w2, g),
        b2: bind(&p.b2, g),
    }
}

/// Binds actor parameters as graph leaves with consecutive slots starting at
/// `*slot`, in the same order as `PolicyParameters::tensors()`.
pub fn bind_actor(g: &mut Graph, p: &PolicyParameters, slot: &mut usize) -> ActorNodes {
    let encoder = bind_encoder(g, &p.encoder, slot);
    let trunk = bind_trunk(g, &p.trunk, slot);
    let mut bind = |t: &Tensor, g: &mut Graph| {
        let id = g.param(t.clone(), *slot);
        *slot += 1;
        id
    };
    ActorNodes {
        encoder,
        trunk,
        w_keyframe: bind(&p.w_keyframe, g),
        b_keyframe: bind(&p.b_keyframe, g),
        w_gridsize: bind(&p.w_gridsize, g),
        b_gridsize: bind(&p.b_gridsize, g),
    }
}

/// Binds critic parameters, order matching `CriticParameters::tensors()`.
pub fn bind_critic(g: &mut Graph, p: &CriticParameters, slot: &mut usize) -> CriticNodes {
    let encoder = bind_encoder(g, &p.encoder, slot);
    let trunk = bind_trunk(g, &p.trunk, slot);
    let mut bind = |t: &Tensor, g: &mut Graph| {
        let id = g.param(t.clone(), *slot);
        *slot += 1;
        id
    };
    CriticNodes {
        encoder,
        trunk,
        w_value: bind(&p.w_value, g),
        b_value: bind(&p.b_value, g),
    }
}

/// Scaled dot-product multi-head cross-attention from the learned tokens
/// onto one sample's keypoints; returns the flattened 1×(M·D) encoding. An
/// empty keypoint set yields the documented zero-context fallback: the
/// output-projection bias replicated per token.
pub fn encode_keypoints(
    g: &mut Graph,
    e: &EncoderNodes,
    cfg: &NetConfig,
    keypoints: &[[f64; 3]],
) -> NodeId {
    let (m, d, h) = (cfg.token_count, cfg.token_dim, cfg.num_heads);
    let hd = d / h;
    let context = if keypoints.is_empty() {
        g.constant(Tensor::zeros(m, d))
    } else {
        let n = keypoints.len();
        let kp = g.constant(Tensor::from_vec(
            n,
            3,
            keypoints.iter().flat_map(|k| k.iter().copied()).collect(),
        ));
        let q0 = g.matmul(e.tokens, e.wq);
        let q = g.add_row(q0, e.bq);
        let k0 = g.matmul(kp, e.wk);
        let k = g.add_row(k0, e.bk);
        let v0 = g.matmul(kp, e.wv);
        let v = g.add_row(v0, e.bv);
        let mut heads = Vec::with_capacity(h);
        for i in 0..h {
            let qi = g.slice_cols(q, i * hd, (i + 1) * hd);
            let ki = g.slice_cols(k, i * hd, (i + 1) * hd);
            let vi = g.slice_cols(v, i * hd, (i + 1) * hd);
            let kt = g.transpose(ki);
            let scores0 = g.matmul(qi, kt);
            let scores = g.scale(scores0, 1.0 / (hd as f64).sqrt());
            let log_attn = g.log_softmax_rows(scores);
            let attn = g.exp(log_attn);
            heads.push(g.matmul(attn, vi));
        }
        g.concat_cols(&heads)
    };
    let out0 = g.matmul(context, e.wo);
    let out = g.add_row(out0, e.bo);
    g.reshape(out, 1, m * d)
}

fn trunk_forward(g: &mut Graph, t: &TrunkNodes, x: NodeId) -> NodeId {
    let h1 = g.matmul(x, t.w1);
    let h1 = g.add_row(h1, t.b1);
    let h1 = g.relu(h1);
    let h2 = g.matmul(h1, t.w2);
    let h2 = g.add_row(h2, t.b2);
    g.relu(h2)
}

fn batch_trunk_input(
    g: &mut Graph,
    e: &EncoderNodes,
    cfg: &NetConfig,
    inputs: &[NetInput],
) -> NodeId {
    assert!(!inputs.is_empty(), "empty batch");
    let rows: Vec<NodeId> = inputs
        .iter()
        .map(|input| {
            let enc = encode_keypoints(g, e, cfg, &input.keypoints);
            let stats = g.constant(Tensor::from_vec(1, input.stats.len(), input.stats.clone()));
            g.concat_cols(&[enc, stats])
        })
        .collect();
    g.concat_rows(&rows)
}

/// Batched actor forward: returns (keyframe logits B×2, grid logits B×5).
pub fn actor_logits(
    g: &mut Graph,
    nodes: &ActorNodes,
    cfg: &NetConfig,
    inputs: &[NetInput],
) -> (NodeId, NodeId) {
    let x = batch_trunk_input(g, &nodes.encoder, cfg, inputs);
    let hidden = trunk_forward(g, &nodes.trunk, x);
    let kf0 = g.matmul(hidden, nodes.w_keyframe);
    let kf = g.add_row(kf0, nodes.b_keyframe);
    let gs0 = g.matmul(hidden, nodes.w_gridsize);
    let gs = g.add_row(gs0, nodes.b_gridsize);
    (kf, gs)
}

/// Batched critic forward: B×1 state values.
pub fn critic_values(
    g: &mut Graph,
    nodes: &CriticNodes,
    cfg: &NetConfig,
    inputs: &[NetInput],
) -> NodeId {
    let x = batch_trunk_input(g, &nodes.encoder, cfg, inputs);
    let hidden = trunk_forward(g, &nodes.trunk, x);
    let v0 = g.matmul(hidden, nodes.w_value);
    g.add_row(v0, nodes.b_value)
}

/// Joint log-probability of the stored actions under the given logits
/// (B×1): per-head log-softmax gathered by one-hot masks, then summed.
pub fn joint_log_prob(
    g: &mut Graph,
    kf_logits: NodeId,
    grid_logits: NodeId,
    actions: &[Action],
) -> NodeId {
    let b = actions.len();
    let mut kf_hot = Tensor::zeros(b, KEYFRAME_CLASSES);
    let mut grid_hot = Tensor::zeros(b, GRID_SIZES.len());
    for (r, a) in actions.iter().enumerate() {
        kf_hot.data[r * KEYFRAME_CLASSES + usize::from(a.keyframe)] = 1.0;
        grid_hot.data[r * GRID_SIZES.len() + a.grid_size_index] = 1.0;
    }
    let kf_hot = g.constant(kf_hot);
    let grid_hot = g.constant(grid_hot);
    let kf_ls = g.log_softmax_rows(kf_logits);
    let grid_ls = g.log_softmax_rows(grid_logits);
    let kf_pick0 = g.mul_elem(kf_ls, kf_hot);
    let kf_pick = g.sum_rows(kf_pick0);
    let grid_pick0 = g.mul_elem(grid_ls, grid_hot);
    let grid_pick = g.sum_rows(grid_pick0);
    g.add(kf_pick, grid_pick)
}

/// Joint entropy of the two categorical heads per batch row (B×1).
pub fn joint_entropy(g: &mut Graph, kf_logits: NodeId, grid_logits: NodeId) -> NodeId {
    let head = |logits: NodeId, g: &mut Graph| {
        let ls = g.log_softmax_rows(logits);
        let p = g.exp(ls);
        let plp = g.mul_elem(p, ls);
        let s = g.sum_rows(plp);
        g.scale(s, -1.0)
    };
    let hk = head(kf_logits, g);
    let hg = head(grid_logits, g);
    g.add(hk, hg)
}

// ---------------------------------------------------------------------------
// Inference-time API
// ---------------------------------------------------------------------------

fn log_softmax_slice(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    xs.iter().map(|x| x - lse).collect()
}

fn softmax_slice(xs: &[f64]) -> Vec<f64> {
    log_softmax_slice(xs).iter().map(|l| l.exp()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyOutput {
    pub keyframe_logits: [f64; 2],
    pub gridsize_logits: [f64; 5],
}

impl PolicyOutput {
    pub fn keyframe_probabilities(&self) -> [f64; 2] {
        let p = softmax_slice(&self.keyframe_logits);
        [p[0], p[1]]
    }

    pub fn gridsize_probabilities(&self) -> [f64; 5] {
        let p = softmax_slice(&self.gridsize_logits);
        [p[0], p[1], p[2], p[3], p[4]]
    }

    /// Independent categorical draws from both heads; returns the action and
    /// its joint log-probability.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> (Action, f64) {
        fn draw(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return i;
                }
            }
            probs.len() - 1
        }
        let kf_ls = log_softmax_slice(&self.keyframe_logits);
        let grid_ls = log_softmax_slice(&self.gridsize_logits);
        let kf = draw(&self.keyframe_probabilities(), rng);
        let grid = draw(&self.gridsize_probabilities(), rng);
        let action = Action::new(kf == 1, grid);
        (action, kf_ls[kf] + grid_ls[grid])
    }

    /// Argmax per head; ties resolve to the lower index.
    pub fn greedy(&self) -> Action {
        fn argmax(xs: &[f64]) -> usize {
            let mut best = 0;
            for (i, v) in xs.iter().enumerate() {
                if *v > xs[best] {
                    best = i;
                }
            }
            best
        }
        Action::new(
            argmax(&self.keyframe_logits) == 1,
            argmax(&self.gridsize_logits),
        )
    }

    /// Joint log-probability of `action` plus the summed categorical
    /// entropy of both heads.
    pub fn log_prob_and_entropy(&self, action: &Action) -> Result<(f64, f64), NnError> {
        if action.grid_size_index >= GRID_SIZES.len() {
            return Err(NnError::IndexOutOfRange {
                index: action.grid_size_index,
                classes: GRID_SIZES.len(),
            });
        }
        let kf_ls = log_softmax_slice(&self.keyframe_logits);
        let grid_ls = log_softmax_slice(&self.gridsize_logits);
        let log_prob = kf_ls[usize::from(action.keyframe)] + grid_ls[action.grid_size_index];
        let entropy = -kf_ls.iter().map(|l| l.exp() * l).sum::<f64>()
            - grid_ls.iter().map(|l| l.exp() * l).sum::<f64>();
        Ok((log_prob, entropy))
    }
}

/// Single-observation actor forward (builds a throwaway graph).
pub fn policy_forward(
    cfg: &NetConfig,
    params: &PolicyParameters,
    input: &NetInput,
) -> PolicyOutput {
    let mut g = Graph::new();
    let mut slot = 0;
    let nodes = bind_actor(&mut g, params, &mut slot);
    let (kf, gs) = actor_logits(&mut g, &nodes, cfg, std::slice::from_ref(input));
    let kf = g.value(kf);
    let gs = g.value(gs);
    PolicyOutput {
        keyframe_logits: [kf.data[0], kf.data[1]],
        gridsize_logits: [gs.data[0], gs.data[1], gs.data[2], gs.data[3], gs.data[4]],
    }
}

/// Batched actor forward without gradient bookkeeping.
pub fn policy_forward_batch(
    cfg: &NetConfig,
    params: &PolicyParameters,
    inputs: &[NetInput],
) -> Vec<PolicyOutput> {
    let mut g = Graph::new();
    let mut slot = 0;
    let nodes = bind_actor(&mut g, params, &mut slot);
    let (kf, gs) = actor_logits(&mut g, &nodes, cfg, inputs);
    let kf = g.value(kf);
    let gs = g.value(gs);
    (0..inputs.len())
        .map(|r| PolicyOutput {
            keyframe_logits: [kf.data[2 * r], kf.data[2 * r + 1]],
            gridsize_logits: [
                gs.data[5 * r],
                gs.data[5 * r + 1],
                gs.data[5 * r + 2],
                gs.data[5 * r + 3],
                gs.data[5 * r + 4],
            ],
        })
        .collect()
}

/// Single-observation critic forward.
pub fn critic_forward(cfg: &NetConfig, params: &CriticParameters, input: &NetInput) -> f64 {
    critic_forward_batch(cfg, params, std::slice::from_ref(input))[0]
}

/// Batched critic forward without gradient bookkeeping.
pub fn critic_forward_batch(
    cfg: &NetConfig,
    params: &CriticParameters,
    inputs: &[NetInput],
) -> Vec<f64> {
    let mut g = Graph::new();
    let mut slot = 0;
    let nodes = bind_critic(&mut g, params, &mut slot);
    let v = critic_values(&mut g, &nodes, cfg, inputs);
    g.value(v).data.clone()
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"VOCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume or evaluate a policy: config, actor and
/// critic parameters in declared order, both normalizers, and the training
/// iteration counter. Binary layout: magic, version (u32 LE), then a
/// length-prefixed little-endian serialization of the struct (all floats 64
/// bit). Round-trips are bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: NetConfig,
    pub actor: PolicyParameters,
    pub critic: CriticParameters,
    pub obs_norm: RunningNorm,
    pub priv_norm: RunningNorm,
    pub iteration: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, NnError> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        bincode::serialize_into(&mut bytes, self)
            .map_err(|e| NnError::Checkpoint(format!("encode failed: {e}")))?;
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        if bytes.len() < 8 {
            return Err(NnError::Checkpoint("file too short".into()));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(NnError::Checkpoint("bad magic — not a checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!(
                "unsupported version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let ckpt: Checkpoint = bincode::deserialize(&bytes[8..])
            .map_err(|e| NnError::Checkpoint(format!("decode failed: {e}")))?;
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        Ok(std::fs::write(path, self.to_bytes()?)?)
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Config validity plus shape congruence of every tensor and both
    /// normalizers.
    pub fn validate(&self) -> Result<(), NnError> {
        self.config.validate()?;
        let check = |tensors: Vec<&Tensor>, shapes: Vec<(usize, usize)>, what: &str| {
            if tensors.len() != shapes.len() {
                return Err(NnError::Checkpoint(format!(
                    "{what}: expected {} tensors, found {}",
                    shapes.len(),
                    tensors.len()
                )));
            }
            for (i, (t, (r, c))) in tensors.iter().zip(shapes).enumerate() {
                if t.rows != r || t.cols != c {
                    return Err(NnError::Checkpoint(format!(
                        "{what} tensor {i}: expected {r}x{c}, found {}x{}",
                        t.rows, t.cols
                    )));
                }
                if !t.is_finite() {
                    return Err(NnError::Checkpoint(format!(
                        "{what} tensor {i} contains non-finite values"
                    )));
                }
            }
            Ok(())
        };
        check(
            self.actor.tensors(),
            PolicyParameters::shapes(&self.config),
            "actor",
        )?;
        check(
            self.critic.tensors(),
            CriticParameters::shapes(&self.config),
            "critic",
        )?;
        if self.obs_norm.dim() != self.config.map_stats_dim {
            return Err(NnError::Checkpoint("obs_norm dimension mismatch".into()));
        }
        if self.priv_norm.dim() != self.config.privileged_extra_dim {
            return Err(NnError::Checkpoint("priv_norm dimension mismatch".into()));
        }
        Ok(())
    }
}
