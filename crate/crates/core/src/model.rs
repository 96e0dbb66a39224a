//! Toy two-stage global/local sequence estimator.
//!
//! Per-frame MLP encoder, random frame masking with a learned placeholder, a
//! global stage that decodes every frame from a temporal window of encoder
//! features (one ReLU layer plus a linear skip, shared across frames), and a
//! local MLP over the centre window that produces the global-local embedding
//! and an additive correction.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mathcore::{init_linear, to_json_pretty, Graph, ParamStore, RngStream, Tensor, Var};
use crate::synth::TrajectorySpec;

/// Pose block `theta` `[d_theta × T]` and shape block `beta` `[d_beta × T]`.
///
/// The flat layout used by the networks is `theta` row-major followed by
/// `beta` row-major, so entry `(j, t)` of the stacked `[d × T]` matrix sits
/// at `j·T + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseShapeOutput {
    theta: Tensor,
    beta: Tensor,
}

impl PoseShapeOutput {
    pub fn new(theta: Tensor, beta: Tensor) -> Result<Self> {
        let (_, t1) = theta.matrix_dims()?;
        let (_, t2) = beta.matrix_dims()?;
        if theta.shape().len() != 2 || beta.shape().len() != 2 || t1 != t2 {
            return Err(Error::Dimension {
                op: "PoseShapeOutput::new",
                left: theta.shape().to_vec(),
                right: beta.shape().to_vec(),
            });
        }
        Ok(PoseShapeOutput { theta, beta })
    }

    pub fn from_flat(d_theta: usize, d_beta: usize, t: usize, data: Vec<f64>) -> Result<Self> {
        let expected = (d_theta + d_beta) * t;
        if data.len() != expected {
            return Err(Error::Dimension {
                op: "PoseShapeOutput::from_flat",
                left: vec![data.len()],
                right: vec![expected],
            });
        }
        let split = d_theta * t;
        let beta = data[split..].to_vec();
        let mut theta = data;
        theta.truncate(split);
        Ok(PoseShapeOutput {
            theta: Tensor::new(vec![d_theta, t], theta)?,
            beta: Tensor::new(vec![d_beta, t], beta)?,
        })
    }

    pub fn zeros(d_theta: usize, d_beta: usize, t: usize) -> Self {
        PoseShapeOutput {
            theta: Tensor::zeros(&[d_theta, t]),
            beta: Tensor::zeros(&[d_beta, t]),
        }
    }

    pub fn theta(&self) -> &Tensor {
        &self.theta
    }

    pub fn beta(&self) -> &Tensor {
        &self.beta
    }

    pub fn d_theta(&self) -> usize {
        self.theta.shape()[0]
    }

    pub fn d_beta(&self) -> usize {
        self.beta.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.theta.shape()[1]
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.theta.data().to_vec();
        out.extend_from_slice(self.beta.data());
        out
    }

    /// Frame `t` as `theta[:, t] ++ beta[:, t]`.
    pub fn frame(&self, t: usize) -> Vec<f64> {
        let n = self.frames();
        (0..self.d_theta())
            .map(|j| self.theta.data()[j * n + t])
            .chain((0..self.d_beta()).map(|j| self.beta.data()[j * n + t]))
            .collect()
    }

    fn check_same(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.theta.shape() != other.theta.shape() || self.beta.shape() != other.beta.shape() {
            return Err(Error::Dimension {
                op,
                left: vec![self.d_theta(), self.d_beta(), self.frames()],
                right: vec![other.d_theta(), other.d_beta(), other.frames()],
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub t: usize,
    pub m: usize,
    pub d_theta: usize,
    pub d_beta: usize,
    pub mask_ratio: f64,
    /// Half-width of the centre window seen by the local stage.
    pub local_window: usize,
    /// Width of `phi_gl`: pooled local features followed by the global embedding.
    pub d_embed: usize,
    /// Global-embedding part of `phi_gl`; must be below `d_embed`.
    pub d_global: usize,
    pub enc_hidden: usize,
    pub d_feat: usize,
    pub global_hidden: usize,
    /// Frames on each side of `t` seen by the global decoder at frame `t`.
    pub temporal_radius: usize,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::for_trajectory(&TrajectorySpec::default())
    }
}

impl ModelConfig {
    pub fn for_trajectory(spec: &TrajectorySpec) -> Self {
        ModelConfig {
            t: spec.t,
            m: spec.m,
            d_theta: spec.d_theta,
            d_beta: spec.d_beta,
            mask_ratio: 0.25,
            local_window: 4,
            d_embed: 64,
            d_global: 32,
            enc_hidden: 32,
            d_feat: 16,
            global_hidden: 128,
            temporal_radius: 2,
            dropout_rate: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t < 2 || self.m == 0 || self.d_theta == 0 || self.d_beta == 0 {
            return Err(Error::param("model dimensions must match a valid trajectory spec"));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::param(format!("mask ratio {} outside [0, 1)", self.mask_ratio)));
        }
        if self.local_window == 0 || self.local_window > self.t / 2 {
            return Err(Error::param(format!(
                "local window {} outside [1, {}]",
                self.local_window,
                self.t / 2
            )));
        }
        if self.d_global == 0 || self.d_global >= self.d_embed {
            return Err(Error::param(format!(
                "need 1 <= d_global < d_embed, got {} and {}",
                self.d_global, self.d_embed
            )));
        }
        if self.enc_hidden == 0 || self.d_feat == 0 || self.global_hidden == 0 {
            return Err(Error::param("hidden sizes must be at least 1"));
        }
        if self.temporal_radius >= self.t {
            return Err(Error::param(format!(
                "temporal radius {} must be below T = {}",
                self.temporal_radius, self.t
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::param(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn target_dim(&self) -> usize {
        self.d_theta + self.d_beta
    }

    /// Width of a flattened output sequence.
    pub fn output_width(&self) -> usize {
        self.target_dim() * self.t
    }

    pub fn d_local(&self) -> usize {
        self.d_embed - self.d_global
    }

    /// Width of the windowed features fed to the global decoder.
    pub fn context_width(&self) -> usize {
        (2 * self.temporal_radius + 1) * (self.d_feat + 1)
    }

    pub fn masked_frames(&self) -> usize {
        (self.mask_ratio * self.t as f64).ceil() as usize
    }

    /// Frames `lo..=hi` around `T/2`, clipped to the episode.
    pub fn window(&self) -> (usize, usize) {
        let c = self.t / 2;
        (
            c.saturating_sub(self.local_window),
            (c + self.local_window).min(self.t - 1),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, to_json_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub vector: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
    McDropout,
}

impl Mode {
    fn stochastic(self) -> bool {
        !matches!(self, Mode::Eval)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardResult {
    pub y_global: PoseShapeOutput,
    pub y_local_correction: PoseShapeOutput,
    pub y_final: PoseShapeOutput,
    pub phi_gl: Embedding,
    pub mask_used: Vec<bool>,
}

/// Handles into a batched forward pass; row `i` belongs to input `i`.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub y_global: Var,
    pub y_local: Var,
    pub y_final: Var,
    pub phi_gl: Var,
    pub masks: Vec<Vec<bool>>,
}

/// Fresh estimator parameters under the `model.` prefix.
pub fn init_params(cfg: &ModelConfig, rng: &mut RngStream) -> Result<ParamStore> {
    cfg.validate()?;
    let mut s = ParamStore::new();
    init_linear(&mut s, "model.enc1", cfg.m, cfg.enc_hidden, rng)?;
    init_linear(&mut s, "model.enc2", cfg.enc_hidden, cfg.d_feat, rng)?;
    init_linear(&mut s, "model.enc_skip", cfg.m, cfg.d_feat, rng)?;
    s.insert("model.mask_token", Tensor::zeros(&[1, cfg.d_feat]))?;
    init_linear(&mut s, "model.glob1", cfg.context_width(), cfg.global_hidden, rng)?;
    init_linear(&mut s, "model.glob_out", cfg.global_hidden, cfg.target_dim(), rng)?;
    init_linear(&mut s, "model.glob_skip", cfg.context_width(), cfg.target_dim(), rng)?;
    init_linear(&mut s, "model.glob_emb", cfg.global_hidden, cfg.d_global, rng)?;
    init_linear(&mut s, "model.loc1", cfg.d_feat + 1 + cfg.d_global, cfg.d_local(), rng)?;
    init_linear(&mut s, "model.loc_out", cfg.d_embed, cfg.output_width(), rng)?;
    Ok(s)
}

fn layer(g: &mut Graph, params: &ParamStore, name: &str, trainable: bool, x: Var) -> Result<Var> {
    let w = g.bind(params, &format!("{name}.w"), trainable)?;
    let b = g.bind(params, &format!("{name}.b"), trainable)?;
    g.affine(x, w, b)
}

/// Batched forward pass on the tape. Each input is one episode's `[T × m]`
/// observations; masks and dropout are drawn from `rng` in train and
/// MC-dropout modes.
pub fn forward_graph(
    g: &mut Graph,
    cfg: &ModelConfig,
    params: &ParamStore,
    trainable: bool,
    inputs: &[&Tensor],
    mode: Mode,
    rng: &mut RngStream,
) -> Result<ForwardVars> {
    let n = inputs.len();
    if n == 0 {
        return Err(Error::usage("forward pass with no inputs"));
    }
    let (t_len, f) = (cfg.t, cfg.d_feat);
    let mut stacked = Vec::with_capacity(n * t_len * cfg.m);
    for x in inputs {
        if x.shape() != [t_len, cfg.m] {
            return Err(Error::Dimension {
                op: "model::forward",
                left: x.shape().to_vec(),
                right: vec![t_len, cfg.m],
            });
        }
        stacked.extend_from_slice(x.data());
    }
    let rate = if mode.stochastic() { cfg.dropout_rate } else { 0.0 };

    let x = g.constant(Tensor::new(vec![n * t_len, cfg.m], stacked)?);
    let h = layer(g, params, "model.enc1", trainable, x)?;
    let h = g.relu(h);
    let h = g.dropout(h, rate, rng)?;
    let deep = layer(g, params, "model.enc2", trainable, h)?;
    let skip = layer(g, params, "model.enc_skip", trainable, x)?;
    let mut feats = g.add(deep, skip)?;

    let mut masks = vec![vec![false; t_len]; n];
    if mode.stochastic() && cfg.masked_frames() > 0 {
        for mask in masks.iter_mut() {
            for t in rng.choose_indices(t_len, cfg.masked_frames()) {
                mask[t] = true;
            }
        }
    }
    // Occluded frames (all-zero observation rows) are hidden like masked ones.
    let hidden: Vec<bool> = inputs
        .iter()
        .zip(&masks)
        .flat_map(|(x, mask)| (0..t_len).map(move |t| mask[t] || x.row(t).iter().all(|&v| v == 0.0)))
        .collect();
    if hidden.iter().any(|&b| b) {
        let keep: Vec<f64> = hidden
            .iter()
            .flat_map(|&b| std::iter::repeat_n(if b { 0.0 } else { 1.0 }, f))
            .collect();
        let fill: Vec<f64> = keep.iter().map(|k| 1.0 - k).collect();
        let kept = g.mul_const(feats, Tensor::new(vec![n * t_len, f], keep)?)?;
        let token = g.bind(params, "model.mask_token", trainable)?;
        let token = g.broadcast_rows(token, n * t_len)?;
        let filled = g.mul_const(token, Tensor::new(vec![n * t_len, f], fill)?)?;
        feats = g.add(kept, filled)?;
    }
    // Column `d_feat` flags hidden slots so the decoders can tell them apart.
    let flags = hidden.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let flags = g.constant(Tensor::new(vec![n * t_len, 1], flags)?);
    let feats = g.concat_cols(feats, flags)?;

    // Row (i, t) of `ctx` holds frames t−r..=t+r of input i, clamped at the ends.
    let r = cfg.temporal_radius as isize;
    let mut ctx = feats;
    for off in (-r..=r).filter(|&o| o != 0) {
        let rows = (0..n)
            .flat_map(|i| (0..t_len).map(move |t| i * t_len + (t as isize + off).clamp(0, t_len as isize - 1) as usize))
            .collect();
        let shifted = g.gather_rows(feats, rows)?;
        ctx = g.concat_cols(ctx, shifted)?;
    }
    let gh = layer(g, params, "model.glob1", trainable, ctx)?;
    let gh = g.relu(gh);
    let gh = g.dropout(gh, rate, rng)?;
    let y_deep = layer(g, params, "model.glob_out", trainable, gh)?;
    let y_skip = layer(g, params, "model.glob_skip", trainable, ctx)?;
    let y_frames = g.add(y_deep, y_skip)?;
    let y_frames = g.reshape(y_frames, &[n, cfg.output_width()])?;
    let y_global = g.gather_cols(y_frames, flat_from_frame_major(t_len, cfg.target_dim()))?;
    let g_emb = layer(g, params, "model.glob_emb", trainable, gh)?;
    let g_emb = g.relu(g_emb);
    let g_emb = g.group_mean_rows(g_emb, t_len)?;

    let (lo, hi) = cfg.window();
    let width = hi - lo + 1;
    let rows = (0..n).flat_map(|i| (lo..=hi).map(move |t| i * t_len + t)).collect();
    let local = g.gather_rows(feats, rows)?;
    let g_rep = g.repeat_rows(g_emb, width)?;
    let local = g.concat_cols(local, g_rep)?;
    let lh = layer(g, params, "model.loc1", trainable, local)?;
    let lh = g.relu(lh);
    let lh = g.dropout(lh, rate, rng)?;
    let pooled = g.group_mean_rows(lh, width)?;
    let phi_gl = g.concat_cols(pooled, g_emb)?;
    let y_local = layer(g, params, "model.loc_out", trainable, phi_gl)?;
    let y_final = g.add(y_global, y_local)?;

    Ok(ForwardVars {
        y_global,
        y_local,
        y_final,
        phi_gl,
        masks,
    })
}

/// Source column `t·d + j` for each flat output index `j·T + t`.
fn flat_from_frame_major(t_len: usize, d: usize) -> Vec<usize> {
    (0..d).flat_map(|j| (0..t_len).map(move |t| t * d + j)).collect()
}

fn row_output(cfg: &ModelConfig, value: &Tensor, i: usize) -> Result<PoseShapeOutput> {
    PoseShapeOutput::from_flat(cfg.d_theta, cfg.d_beta, cfg.t, value.row(i).to_vec())
}

/// Value-level batched forward; one result per input.
pub fn forward_batch(
    inputs: &[&Tensor],
    cfg: &ModelConfig,
    params: &ParamStore,
    rng: &mut RngStream,
    mode: Mode,
) -> Result<Vec<ForwardResult>> {
    let mut g = Graph::new();
    let vars = forward_graph(&mut g, cfg, params, false, inputs, mode, rng)?;
    let (yg, yl, yf, phi) = (
        g.value(vars.y_global),
        g.value(vars.y_local),
        g.value(vars.y_final),
        g.value(vars.phi_gl),
    );
    vars.masks
        .into_iter()
        .enumerate()
        .map(|(i, mask_used)| {
            Ok(ForwardResult {
                y_global: row_output(cfg, yg, i)?,
                y_local_correction: row_output(cfg, yl, i)?,
                y_final: row_output(cfg, yf, i)?,
                phi_gl: Embedding {
                    vector: Tensor::new(vec![cfg.d_embed], phi.row(i).to_vec())?,
                },
                mask_used,
            })
        })
        .collect()
}

pub fn forward(
    x: &Tensor,
    cfg: &ModelConfig,
    params: &ParamStore,
    rng: &mut RngStream,
    mode: Mode,
) -> Result<ForwardResult> {
    Ok(forward_batch(&[x], cfg, params, rng, mode)?.remove(0))
}

/// `h` train-mode passes over the same input, each with a fresh mask.
pub fn sample_hypotheses(
    x: &Tensor,
    cfg: &ModelConfig,
    params: &ParamStore,
    h: usize,
    rng: &mut RngStream,
) -> Result<Vec<ForwardResult>> {
    if h == 0 {
        return Err(Error::param("hypothesis count must be at least 1"));
    }
    forward_batch(&vec![x; h], cfg, params, rng, Mode::Train)
}

/// Task loss: mean squared error over all entries plus mean squared error of
/// frame-to-frame differences.
pub fn loss_task(pred: &PoseShapeOutput, target: &PoseShapeOutput) -> Result<f64> {
    pred.check_same(target, "loss_task")?;
    let t_len = pred.frames();
    let (p, q) = (pred.flatten(), target.flatten());
    let mse = p.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / p.len() as f64;
    let rows = p.len() / t_len;
    let mut vel = 0.0;
    for j in 0..rows {
        for t in 0..t_len - 1 {
            let i = j * t_len + t;
            vel += ((p[i + 1] - p[i]) - (q[i + 1] - q[i])).powi(2);
        }
    }
    Ok(mse + vel / (rows * (t_len - 1)) as f64)
}

/// `[T × (T−1)]` matrix whose column `t` takes frame `t+1` minus frame `t`.
pub fn difference_matrix(t_len: usize) -> Tensor {
    let cols = t_len - 1;
    let mut data = vec![0.0; t_len * cols];
    for t in 0..cols {
        data[(t + 1) * cols + t] = 1.0;
        data[t * cols + t] = -1.0;
    }
    Tensor::new(vec![t_len, cols], data).expect("finite by construction")
}

/// Taped task loss of flat predictions `[N × T·d]` against targets of the
/// same shape, averaged over rows.
pub fn loss_task_graph(g: &mut Graph, cfg: &ModelConfig, pred: Var, target: Var) -> Result<Var> {
    let diff = g.sub(pred, target)?;
    let sq = g.square(diff)?;
    let mse = g.mean(sq)?;
    let rows = g.value(diff).numel() / cfg.t;
    let per_dim = g.reshape(diff, &[rows, cfg.t])?;
    let dmat = g.constant(difference_matrix(cfg.t));
    let vel = g.matmul(per_dim, dmat)?;
    let vsq = g.square(vel)?;
    let vel = g.mean(vsq)?;
    g.add(mse, vel)
}
