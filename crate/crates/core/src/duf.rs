//! Learned nonconformity scorer over (embedding, output) pairs.
//!
//! `S(X, Y) = sigmoid(MLP(phi_gl(X), flatten(theta), flatten(beta)))`, two
//! ReLU hidden layers. Low scores mark realistic outputs and high scores
//! nonconforming ones: the score loss drives ground-truth pairs to 0 and
//! estimator samples to 1, while the adversarial loss pulls samples back
//! towards 0.

use crate::error::{Error, Result};
use crate::mathcore::{init_linear, sigmoid_scalar, Graph, ParamStore, RngStream, Tensor, Var};
use crate::model::{Embedding, PoseShapeOutput};

pub const DEFAULT_HIDDEN: usize = 128;

/// A score strictly inside `(0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct UncertaintyScore(f64);

impl UncertaintyScore {
    pub fn new(value: f64) -> Result<Self> {
        if value > 0.0 && value < 1.0 {
            Ok(UncertaintyScore(value))
        } else {
            Err(Error::Numeric(format!("score {value} outside (0, 1)")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Fresh scorer parameters under the `scorer.` prefix.
pub fn init_scorer(d_embed: usize, output_width: usize, hidden: usize, rng: &mut RngStream) -> Result<ParamStore> {
    if d_embed == 0 || output_width == 0 || hidden == 0 {
        return Err(Error::param("scorer dimensions must be at least 1"));
    }
    let mut s = ParamStore::new();
    init_linear(&mut s, "scorer.h1", d_embed + output_width, hidden, rng)?;
    init_linear(&mut s, "scorer.h2", hidden, hidden, rng)?;
    init_linear(&mut s, "scorer.out", hidden, 1, rng)?;
    Ok(s)
}

/// Input width `d_embed + T·d` the scorer was built for.
pub fn input_width(scorer: &ParamStore) -> Result<usize> {
    Ok(scorer.get("scorer.h1.w")?.matrix_dims()?.0)
}

#[derive(Clone, Copy, Debug)]
pub struct ScorerVars {
    /// Second hidden layer, the feature vector used for distance weights.
    pub features: Var,
    pub logit: Var,
    pub score: Var,
}

/// Taped scorer on `phi: [N × d_embed]` and flat outputs `y: [N × T·d]`.
pub fn score_graph(g: &mut Graph, scorer: &ParamStore, trainable: bool, phi: Var, y: Var) -> Result<ScorerVars> {
    let width = input_width(scorer)?;
    let (n1, a) = g.value(phi).matrix_dims()?;
    let (n2, b) = g.value(y).matrix_dims()?;
    if n1 != n2 || a + b != width {
        return Err(Error::Dimension {
            op: "duf::score",
            left: vec![n1, a, b],
            right: vec![n1, width],
        });
    }
    let x = g.concat_cols(phi, y)?;
    let mut h = x;
    for name in ["scorer.h1", "scorer.h2"] {
        let w = g.bind(scorer, &format!("{name}.w"), trainable)?;
        let bias = g.bind(scorer, &format!("{name}.b"), trainable)?;
        let z = g.affine(h, w, bias)?;
        h = g.relu(z);
    }
    let w = g.bind(scorer, "scorer.out.w", trainable)?;
    let bias = g.bind(scorer, "scorer.out.b", trainable)?;
    let logit = g.affine(h, w, bias)?;
    let score = g.sigmoid(logit);
    Ok(ScorerVars {
        features: h,
        logit,
        score,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredBatch {
    pub scores: Vec<f64>,
    /// `[N × hidden]` penultimate activations.
    pub features: Tensor,
}

pub fn score_batch(phis: &Tensor, ys: &Tensor, scorer: &ParamStore) -> Result<ScoredBatch> {
    let mut g = Graph::new();
    let phi = g.constant(phis.clone());
    let y = g.constant(ys.clone());
    let vars = score_graph(&mut g, scorer, false, phi, y)?;
    // Recomputed from the logit so the range matches `sigmoid_scalar`.
    let scores = g.value(vars.logit).data().iter().map(|&z| sigmoid_scalar(z)).collect();
    Ok(ScoredBatch {
        scores,
        features: g.value(vars.features).clone(),
    })
}

pub fn score(phi_gl: &Embedding, y: &PoseShapeOutput, scorer: &ParamStore) -> Result<UncertaintyScore> {
    let phi = phi_gl.vector.reshape(&[1, phi_gl.vector.numel()])?;
    let flat = y.flatten();
    let ys = Tensor::new(vec![1, flat.len()], flat)?;
    UncertaintyScore::new(score_batch(&phi, &ys, scorer)?.scores[0])
}

fn nonempty(xs: &[f64], what: &str) -> Result<()> {
    if xs.is_empty() {
        Err(Error::usage(format!("{what} needs at least one score")))
    } else {
        Ok(())
    }
}

fn mean(xs: impl Iterator<Item = f64>, n: usize) -> f64 {
    xs.sum::<f64>() / n as f64
}

/// `mean(S_gt²) + mean((1 − S_pred)²)`.
pub fn loss_score(scores_gt: &[f64], scores_pred: &[f64]) -> Result<f64> {
    nonempty(scores_gt, "loss_score")?;
    nonempty(scores_pred, "loss_score")?;
    Ok(mean(scores_gt.iter().map(|s| s * s), scores_gt.len())
        + mean(scores_pred.iter().map(|s| (1.0 - s).powi(2)), scores_pred.len()))
}

/// `mean(S_pred²)`.
pub fn loss_adv(scores_pred: &[f64]) -> Result<f64> {
    nonempty(scores_pred, "loss_adv")?;
    Ok(mean(scores_pred.iter().map(|s| s * s), scores_pred.len()))
}

/// `l_task + lambda·(l_score + l_adv)`.
pub fn loss_total(l_task: f64, l_score: f64, l_adv: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::param(format!("lambda {lambda} must be >= 0")));
    }
    Ok(l_task + lambda * (l_score + l_adv))
}

/// Taped score loss; feed it scores computed from detached estimator values
/// so that only the scorer receives gradients.
pub fn loss_score_graph(g: &mut Graph, s_gt: Var, s_pred: Var) -> Result<Var> {
    let gt_sq = g.square(s_gt)?;
    let gt = g.mean(gt_sq)?;
    let ones = g.constant(Tensor::ones(g.value(s_pred).shape()));
    let miss = g.sub(ones, s_pred)?;
    let miss_sq = g.square(miss)?;
    let pred = g.mean(miss_sq)?;
    g.add(gt, pred)
}

/// Taped adversarial loss; feed it scores from a scorer bound as constants so
/// that only the estimator receives gradients.
pub fn loss_adv_graph(g: &mut Graph, s_pred: Var) -> Result<Var> {
    let sq = g.square(s_pred)?;
    g.mean(sq)
}
