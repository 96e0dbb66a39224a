//! End-to-end training, evaluation and ablations on the synthetic task.
//!
//! Each iteration draws a minibatch, runs `H` masked train-mode passes per
//! episode, and steps the estimator on `L_G + λ·L_adv`. Every
//! `scorer_update_period` iterations the scorer is stepped first, on `L_S`
//! over the same detached hypotheses.

use std::collections::{BTreeSet, VecDeque};
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conformal::{calibrate, coverage_of_scores, stack, stack_outputs, CalibrationExample, Scheme};
use crate::duf::{
    init_scorer, loss_adv, loss_adv_graph, loss_score, loss_score_graph, loss_total, score_batch, score_graph,
    DEFAULT_HIDDEN,
};
use crate::error::{Error, Result};
use crate::mathcore::{fmt_f64, to_json_pretty, Adam, Graph, ParamStore, RngStream, Tensor};
use crate::model::{forward_batch, forward_graph, init_params, loss_task, loss_task_graph, Mode, ModelConfig};
use crate::synth::{
    corrupt_output, gen_episode, gen_stream, gen_stream_with_regimes, Episode, StreamSpec, TrajectorySpec,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub trajectory: TrajectorySpec,
    pub model: ModelConfig,
    pub epochs: usize,
    /// Episodes per minibatch; each contributes `h_train` hypotheses.
    pub batch_size: usize,
    /// Peak learning rate of the estimator's cosine schedule.
    pub lr: f64,
    pub lambda: f64,
    pub h_train: usize,
    pub scorer_update_period: usize,
    /// Adam steps taken on `L_S` at each scorer update, each on a minibatch
    /// drawn from the rolling pair buffer.
    pub scorer_steps: usize,
    pub scorer_batch: usize,
    /// Iterations of detached pairs retained for scorer updates.
    pub scorer_buffer_iters: usize,
    /// Hypotheses per episode and iteration copied into the buffer.
    pub scorer_keep: usize,
    /// Peak learning rate of the scorer, on the same cosine schedule.
    pub scorer_lr: f64,
    pub scorer_hidden: usize,
    pub alpha: f64,
    /// Noise scale of the corrupted outputs used in evaluation.
    pub corruption_sigma: f64,
    pub seed: u64,
    /// Seed of the base observation regime shared by all splits.
    pub world_seed: u64,
    pub n_train: usize,
    pub n_cal: usize,
    pub n_test: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        default_config()
    }
}

pub fn default_config() -> TrainConfig {
    let trajectory = TrajectorySpec::default();
    TrainConfig {
        model: ModelConfig::for_trajectory(&trajectory),
        trajectory,
        epochs: 1,
        batch_size: 4,
        lr: 3e-3,
        lambda: 0.6,
        h_train: 20,
        scorer_update_period: 100,
        scorer_steps: 30,
        scorer_batch: 256,
        scorer_buffer_iters: 1500,
        scorer_keep: 2,
        scorer_lr: 1e-3,
        scorer_hidden: DEFAULT_HIDDEN,
        alpha: 0.1,
        corruption_sigma: 0.5,
        seed: 0,
        world_seed: 0,
        n_train: 24000,
        n_cal: 500,
        n_test: 5000,
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.trajectory.validate()?;
        self.model.validate()?;
        let t = &self.trajectory;
        let m = &self.model;
        if (m.t, m.m, m.d_theta, m.d_beta) != (t.t, t.m, t.d_theta, t.d_beta) {
            return Err(Error::param("model dimensions disagree with the trajectory spec"));
        }
        if [
            self.h_train,
            self.scorer_update_period,
            self.batch_size,
            self.scorer_hidden,
            self.scorer_batch,
        ]
        .contains(&0)
            || self.scorer_buffer_iters == 0
            || self.scorer_keep == 0
        {
            return Err(Error::param("batch, hypothesis, scorer and buffer sizes must be >= 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::param(format!("lambda {} must be >= 0", self.lambda)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite() && self.scorer_lr > 0.0 && self.scorer_lr.is_finite()) {
            return Err(Error::param("learning rates must be > 0"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::param(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        if !(self.corruption_sigma >= 0.0) {
            return Err(Error::param("corruption_sigma must be >= 0"));
        }
        if self.n_train == 0 {
            return Err(Error::param("n_train must be >= 1"));
        }
        Ok(())
    }

    pub fn iterations_per_epoch(&self) -> usize {
        self.n_train.div_ceil(self.batch_size)
    }

    pub fn iterations(&self) -> usize {
        self.epochs * self.iterations_per_epoch()
    }

    /// Cosine factor falling from 1 at step 0 towards 0 at the last step.
    pub fn schedule(&self, step: usize) -> f64 {
        let total = self.iterations().max(1) as f64;
        0.5 * (1.0 + (PI * step as f64 / total).cos())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        to_json_pretty(self)
    }
}

/// Hex SHA-256 of the sorted, de-duplicated episode ids, one per line.
pub fn split_hash(ids: impl IntoIterator<Item = usize>) -> String {
    let set: BTreeSet<usize> = ids.into_iter().collect();
    let mut h = Sha256::new();
    for id in set {
        h.update(id.to_string().as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<Episode>,
    pub cal: Vec<Episode>,
    pub test: Vec<Episode>,
}

impl Splits {
    /// Consecutive train/cal/test blocks of one exchangeable stream.
    pub fn generate(cfg: &TrainConfig) -> Result<Splits> {
        let n = cfg.n_train + cfg.n_cal + cfg.n_test;
        let mut spec = StreamSpec::iid(n, cfg.trajectory.clone());
        spec.world_seed = cfg.world_seed;
        let mut eps = gen_stream(&spec, &mut RngStream::new(cfg.seed).fork(0x5d17))?;
        let test = eps.split_off(cfg.n_train + cfg.n_cal);
        let cal = eps.split_off(cfg.n_train);
        Ok(Splits { train: eps, cal, test })
    }

    /// Usage error when any episode id appears in two splits.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (name, split) in [("train", &self.train), ("cal", &self.cal), ("test", &self.test)] {
            for e in split {
                if !seen.insert(e.id) {
                    return Err(Error::usage(format!(
                        "episode {} appears in more than one split ({name})",
                        e.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn hashes(&self) -> SplitHashes {
        let ids = |s: &[Episode]| split_hash(s.iter().map(|e| e.id));
        SplitHashes {
            train: ids(&self.train),
            cal: ids(&self.cal),
            test: ids(&self.test),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitHashes {
    pub train: String,
    pub cal: String,
    pub test: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub l_task: f64,
    pub l_score: f64,
    pub l_adv: f64,
    pub l_net: f64,
}

pub fn write_log_csv<W: Write>(out: W, log: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "l_task", "l_score", "l_adv", "l_net"])?;
    for r in log {
        w.write_record([
            r.step.to_string(),
            fmt_f64(r.l_task),
            fmt_f64(r.l_score),
            fmt_f64(r.l_adv),
            fmt_f64(r.l_net),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log_csv<R: std::io::Read>(input: R) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| Ok(row?)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trained {
    pub model_cfg: ModelConfig,
    pub model: ParamStore,
    pub scorer: ParamStore,
    pub log: Vec<LogRow>,
    /// Hash of every episode id that fed a gradient.
    pub touched_hash: String,
}

pub const MODEL_CONFIG_FILE: &str = "model_config.json";
pub const MODEL_PARAMS_FILE: &str = "model_params.json";
pub const SCORER_PARAMS_FILE: &str = "scorer_params.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";

impl Trained {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.model_cfg.save(&dir.join(MODEL_CONFIG_FILE))?;
        self.model.save(&dir.join(MODEL_PARAMS_FILE))?;
        self.scorer.save(&dir.join(SCORER_PARAMS_FILE))?;
        write_log_csv(std::fs::File::create(dir.join(TRAIN_LOG_FILE))?, &self.log)
    }
}

/// Checkpoints written by [`Trained::save`].
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_cfg: ModelConfig,
    pub model: ParamStore,
    pub scorer: ParamStore,
}

impl Checkpoint {
    pub fn load(dir: &Path) -> Result<Checkpoint> {
        Ok(Checkpoint {
            model_cfg: ModelConfig::load(&dir.join(MODEL_CONFIG_FILE))?,
            model: ParamStore::load(&dir.join(MODEL_PARAMS_FILE))?,
            scorer: ParamStore::load(&dir.join(SCORER_PARAMS_FILE))?,
        })
    }
}

impl From<Trained> for Checkpoint {
    fn from(t: Trained) -> Self {
        Checkpoint {
            model_cfg: t.model_cfg,
            model: t.model,
            scorer: t.scorer,
        }
    }
}

/// Rolling window of detached (embedding, truth, hypothesis) rows that feeds
/// the scorer updates; one chunk per iteration, oldest evicted first.
struct PairBuffer {
    chunks: VecDeque<[Tensor; 3]>,
    capacity: usize,
}

impl PairBuffer {
    fn new(capacity: usize) -> Self {
        PairBuffer {
            chunks: VecDeque::with_capacity(capacity + 1),
            capacity,
        }
    }

    fn push(&mut self, chunk: [Tensor; 3]) {
        self.chunks.push_back(chunk);
        if self.chunks.len() > self.capacity {
            self.chunks.pop_front();
        }
    }

    /// `count` rows drawn uniformly without replacement (all rows if fewer).
    fn sample(&self, count: usize, rng: &mut RngStream) -> Result<[Tensor; 3]> {
        let sizes: Vec<usize> = self.chunks.iter().map(|c| c[0].shape()[0]).collect();
        let total: usize = sizes.iter().sum();
        let mut picked = rng.choose_indices(total, count.min(total));
        picked.sort_unstable();
        let mut located = Vec::with_capacity(picked.len());
        let (mut chunk, mut offset) = (0, 0);
        for idx in picked {
            while idx >= offset + sizes[chunk] {
                offset += sizes[chunk];
                chunk += 1;
            }
            located.push((chunk, idx - offset));
        }
        let part = |k: usize| {
            let width = self.chunks[0][k].shape()[1];
            stack(located.iter().map(|&(c, r)| self.chunks[c][k].row(r)), width)
        };
        Ok([part(0)?, part(1)?, part(2)?])
    }
}

fn pick_rows(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    stack(rows.iter().map(|&r| t.row(r)), t.shape()[1])
}

fn check_finite(step: usize, row: &LogRow) -> Result<()> {
    for (name, v) in [
        ("l_task", row.l_task),
        ("l_score", row.l_score),
        ("l_adv", row.l_adv),
        ("l_net", row.l_net),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFiniteTraining {
                step,
                detail: format!("{name} = {v}"),
            });
        }
    }
    Ok(())
}

/// Alternating estimator/scorer optimisation on `splits.train`; the other
/// splits are only checked for disjointness.
pub fn train(cfg: &TrainConfig, splits: &Splits) -> Result<Trained> {
    // The schedule length follows the split actually supplied.
    let cfg = &TrainConfig {
        n_train: splits.train.len().max(1),
        ..cfg.clone()
    };
    cfg.validate()?;
    splits.check_disjoint()?;
    if splits.train.is_empty() {
        return Err(Error::usage("training split is empty"));
    }
    let mcfg = &cfg.model;
    let width = mcfg.output_width();
    let root = RngStream::new(cfg.seed);
    let mut model = init_params(mcfg, &mut root.fork(1))?;
    let mut scorer = init_scorer(mcfg.d_embed, width, cfg.scorer_hidden, &mut root.fork(2))?;
    let mut batch_rng = root.fork(3);
    let mut noise_rng = root.fork(4);
    let mut scorer_rng = root.fork(5);
    let mut buffer = PairBuffer::new(cfg.scorer_buffer_iters);
    let mut opt_model = Adam::new(cfg.lr, 0.9, 0.999, 1e-8, 0.0)?;
    let mut opt_scorer = Adam::new(cfg.scorer_lr, 0.9, 0.999, 1e-8, 0.0)?;

    let n_train = splits.train.len();
    let h = cfg.h_train;
    let epochs_iters = n_train.div_ceil(cfg.batch_size);
    let mut log = Vec::with_capacity(cfg.epochs * epochs_iters);
    let mut touched = BTreeSet::new();
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        batch_rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let decay = cfg.schedule(step);
            let batch: Vec<&Episode> = chunk.iter().map(|&i| &splits.train[i]).collect();
            touched.extend(batch.iter().map(|e| e.id));
            let inputs: Vec<&Tensor> = batch
                .iter()
                .flat_map(|e| std::iter::repeat_n(&e.observations, h))
                .collect();
            let target = stack_outputs(batch.iter().flat_map(|e| std::iter::repeat_n(&e.target, h)), width)?;

            let mut g = Graph::new();
            let vars = forward_graph(&mut g, mcfg, &model, true, &inputs, Mode::Train, &mut noise_rng)?;
            let target_var = g.constant(target.clone());
            let l_task_var = loss_task_graph(&mut g, mcfg, vars.y_final, target_var)?;
            let phi_val = g.value(vars.phi_gl).clone();
            let pred_val = g.value(vars.y_final).clone();

            // Scorer first; it sees the hypotheses as constants.
            let s_gt = score_batch(&phi_val, &target, &scorer)?.scores;
            let s_pred = score_batch(&phi_val, &pred_val, &scorer)?.scores;
            let l_score = loss_score(&s_gt, &s_pred)?;
            // The first `scorer_keep` hypotheses of every episode enter the buffer.
            let keep: Vec<usize> = (0..batch.len())
                .flat_map(|b| (0..cfg.scorer_keep.min(h)).map(move |j| b * h + j))
                .collect();
            buffer.push([
                pick_rows(&phi_val, &keep)?,
                pick_rows(&target, &keep)?,
                pick_rows(&pred_val, &keep)?,
            ]);
            if step % cfg.scorer_update_period == 0 {
                for _ in 0..cfg.scorer_steps {
                    let [phi, gt, pred] = buffer.sample(cfg.scorer_batch, &mut scorer_rng)?;
                    let mut sg = Graph::new();
                    let phi = sg.constant(phi);
                    let gt = sg.constant(gt);
                    let pred = sg.constant(pred);
                    let on_gt = score_graph(&mut sg, &scorer, true, phi, gt)?;
                    let on_pred = score_graph(&mut sg, &scorer, true, phi, pred)?;
                    let loss = loss_score_graph(&mut sg, on_gt.score, on_pred.score)?;
                    let grads = sg.backward(loss, &scorer)?;
                    opt_scorer.step_with_lr(&mut scorer, &grads, cfg.scorer_lr * decay)?;
                }
            }

            let l_task = g.value(l_task_var).item()?;
            let (objective, l_adv) = if cfg.lambda > 0.0 {
                let phi = g.detach(vars.phi_gl);
                let on_pred = score_graph(&mut g, &scorer, false, phi, vars.y_final)?;
                let adv = loss_adv_graph(&mut g, on_pred.score)?;
                let weighted = g.scale(adv, cfg.lambda)?;
                let objective = g.add(l_task_var, weighted)?;
                (objective, g.value(adv).item()?)
            } else {
                (
                    l_task_var,
                    loss_adv(&score_batch(&phi_val, &pred_val, &scorer)?.scores)?,
                )
            };
            let row = LogRow {
                step,
                l_task,
                l_score,
                l_adv,
                l_net: loss_total(l_task, l_score, l_adv, cfg.lambda)?,
            };
            check_finite(step, &row)?;
            let grads = g.backward(objective, &model)?;
            opt_model.step_with_lr(&mut model, &grads, cfg.lr * decay)?;
            log.push(row);
            step += 1;
        }
    }
    Ok(Trained {
        model_cfg: mcfg.clone(),
        model,
        scorer,
        log,
        touched_hash: split_hash(touched),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean per-frame Euclidean error of the `theta` block.
    pub task_error: f64,
    /// Mean score of corrupted outputs minus mean score of ground truth.
    pub score_separation: f64,
    /// Probability that a corrupted output outscores a ground-truth output.
    pub auroc: f64,
}

/// Mann–Whitney AUROC of `positives` against `negatives`; ties count half.
pub fn auroc(negatives: &[f64], positives: &[f64]) -> Result<f64> {
    if negatives.is_empty() || positives.is_empty() {
        return Err(Error::usage("AUROC needs both classes"));
    }
    let mut all: Vec<(f64, bool)> = negatives
        .iter()
        .map(|&s| (s, false))
        .chain(positives.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Sum of midranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j + 1) as f64 / 2.0;
        rank_sum += mid * all[i..j].iter().filter(|x| x.1).count() as f64;
        i = j;
    }
    let (np, nn) = (positives.len() as f64, negatives.len() as f64);
    Ok(((rank_sum - np * (np + 1.0) / 2.0) / (np * nn)).clamp(0.0, 1.0))
}

/// Eval-mode task error plus the scorer's ability to flag `sigma`-corrupted
/// ground truth.
pub fn evaluate(
    cfg: &ModelConfig,
    model: &ParamStore,
    scorer: &ParamStore,
    test: &[Episode],
    sigma: f64,
    rng: &mut RngStream,
) -> Result<EvalReport> {
    const CHUNK: usize = 256;
    if test.is_empty() {
        return Err(Error::usage("evaluation needs at least one test episode"));
    }
    let width = cfg.output_width();
    let mut err_sum = 0.0;
    let mut frames = 0usize;
    let (mut gt_scores, mut bad_scores) = (Vec::new(), Vec::new());
    let mut unused = RngStream::new(0);
    for chunk in test.chunks(CHUNK) {
        let xs: Vec<&Tensor> = chunk.iter().map(|e| &e.observations).collect();
        let results = forward_batch(&xs, cfg, model, &mut unused, Mode::Eval)?;
        for (r, e) in results.iter().zip(chunk) {
            let (p, q) = (r.y_final.theta(), e.target.theta());
            for t in 0..cfg.t {
                let sq: f64 = (0..cfg.d_theta)
                    .map(|j| (p.data()[j * cfg.t + t] - q.data()[j * cfg.t + t]).powi(2))
                    .sum();
                err_sum += sq.sqrt();
                frames += 1;
            }
        }
        let phis = stack(results.iter().map(|r| r.phi_gl.vector.data()), cfg.d_embed)?;
        let truth = stack_outputs(chunk.iter().map(|e| &e.target), width)?;
        let corrupted = chunk
            .iter()
            .map(|e| corrupt_output(&e.target, sigma, rng))
            .collect::<Result<Vec<_>>>()?;
        let corrupted = stack_outputs(corrupted.iter(), width)?;
        gt_scores.extend(score_batch(&phis, &truth, scorer)?.scores);
        bad_scores.extend(score_batch(&phis, &corrupted, scorer)?.scores);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(EvalReport {
        task_error: err_sum / frames as f64,
        score_separation: mean(&bad_scores) - mean(&gt_scores),
        auroc: auroc(&gt_scores, &bad_scores)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    #[serde(rename = "H")]
    pub h: usize,
    pub seed: u64,
    pub task_error: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaRow {
    pub lambda: f64,
    pub seed: u64,
    pub task_error: f64,
    pub auroc: f64,
}

fn train_and_evaluate(cfg: &TrainConfig) -> Result<EvalReport> {
    let splits = Splits::generate(cfg)?;
    let trained = train(cfg, &splits)?;
    evaluate(
        &trained.model_cfg,
        &trained.model,
        &trained.scorer,
        &splits.test,
        cfg.corruption_sigma,
        &mut RngStream::new(cfg.seed).fork(0xe7a1),
    )
}

/// One run per `(H, seed)` pair, rows in `hs`-major order. Runs are
/// independent and execute on the rayon pool.
pub fn ablate_h(cfg: &TrainConfig, hs: &[usize], seeds: &[u64]) -> Result<Vec<AblationRow>> {
    if hs.is_empty() || seeds.is_empty() || hs.contains(&0) {
        return Err(Error::param(
            "ablation needs a nonempty H list of positive values and at least one seed",
        ));
    }
    let jobs: Vec<(usize, u64)> = hs.iter().flat_map(|&h| seeds.iter().map(move |&s| (h, s))).collect();
    jobs.par_iter()
        .map(|&(h, seed)| {
            let run = TrainConfig {
                h_train: h,
                seed,
                ..cfg.clone()
            };
            Ok(AblationRow {
                h,
                seed,
                task_error: train_and_evaluate(&run)?.task_error,
            })
        })
        .collect()
}

/// Strength sweep; reported, not asserted.
pub fn ablate_lambda(cfg: &TrainConfig, lambdas: &[f64], seeds: &[u64]) -> Result<Vec<LambdaRow>> {
    if lambdas.is_empty() || seeds.is_empty() {
        return Err(Error::param(
            "ablation needs a nonempty lambda list and at least one seed",
        ));
    }
    let jobs: Vec<(f64, u64)> = lambdas
        .iter()
        .flat_map(|&l| seeds.iter().map(move |&s| (l, s)))
        .collect();
    jobs.par_iter()
        .map(|&(lambda, seed)| {
            let run = TrainConfig {
                lambda,
                seed,
                ..cfg.clone()
            };
            let report = train_and_evaluate(&run)?;
            Ok(LambdaRow {
                lambda,
                seed,
                task_error: report.task_error,
                auroc: report.auroc,
            })
        })
        .collect()
}

pub fn write_ablation_csv<W: Write>(out: W, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["H", "seed", "task_error"])?;
    for r in rows {
        w.write_record([r.h.to_string(), r.seed.to_string(), fmt_f64(r.task_error)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_lambda_csv<W: Write>(out: W, rows: &[LambdaRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["lambda", "seed", "task_error", "auroc"])?;
    for r in rows {
        w.write_record([
            fmt_f64(r.lambda),
            r.seed.to_string(),
            fmt_f64(r.task_error),
            fmt_f64(r.auroc),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Median of a nonempty sample; the mean of the middle pair for even sizes.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::usage("median of an empty sample"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Ok(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

/// Calibration and test episodes for one coverage trial.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialData {
    pub cal: Vec<Episode>,
    pub test: Vec<Episode>,
    /// Regime of each calibration episode.
    pub segments: Vec<usize>,
}

/// `spec.n` calibration episodes followed by `n_test` test episodes drawn
/// from the regime of the last calibration episode. For an iid spec the
/// test episodes are ordinary draws from regime 0.
pub fn trial_data(spec: &StreamSpec, n_test: usize, rng: &RngStream) -> Result<TrialData> {
    let (cal, regimes) = gen_stream_with_regimes(spec, &mut rng.clone())?;
    let last = regimes.last().expect("at least one regime");
    let mut test_rng = rng.fork(0x7e57);
    let test = (0..n_test)
        .map(|i| gen_episode(&spec.trajectory, last, spec.n + i, &mut test_rng))
        .collect::<Result<Vec<_>>>()?;
    let segments = cal.iter().map(|e| e.regime_id).collect();
    Ok(TrialData { cal, test, segments })
}

/// Ground-truth scores of the calibration episodes paired with the test
/// scores, ready for any calibration scheme.
pub fn score_trial(data: &TrialData, ckpt: &Checkpoint) -> Result<(Vec<CalibrationExample>, Vec<f64>)> {
    let cal = crate::conformal::score_episodes(&data.cal, &ckpt.model_cfg, &ckpt.model, &ckpt.scorer)?;
    let test = crate::conformal::score_episodes(&data.test, &ckpt.model_cfg, &ckpt.model, &ckpt.scorer)?;
    Ok((cal, test.into_iter().map(|e| e.score).collect()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub seed: u64,
    pub scheme: Scheme,
    pub coverage: f64,
    pub n_test: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibrationSettings {
    pub alpha: f64,
    pub rho: f64,
    pub temperature: f64,
}

/// One coverage trial: a fresh stream under `spec` seeded by `seed`, scored
/// once and calibrated under every scheme in `schemes`.
pub fn coverage_trial(
    ckpt: &Checkpoint,
    spec: &StreamSpec,
    n_test: usize,
    seed: u64,
    schemes: &[Scheme],
    settings: CalibrationSettings,
) -> Result<Vec<CoverageRow>> {
    let data = trial_data(spec, n_test, &RngStream::new(seed))?;
    let (cal, test) = score_trial(&data, ckpt)?;
    schemes
        .iter()
        .map(|&scheme| {
            let result = calibrate(&cal, settings.alpha, scheme, settings.rho, settings.temperature)?;
            Ok(CoverageRow {
                seed,
                scheme,
                coverage: coverage_of_scores(&test, &result)?.coverage,
                n_test,
            })
        })
        .collect()
}

/// `seed,scheme,coverage,n_test`, then `mean` and `std` rows per scheme
/// (sample standard deviation; 0 for a single trial).
pub fn write_coverage_csv<W: Write>(out: W, rows: &[CoverageRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["seed", "scheme", "coverage", "n_test"])?;
    for r in rows {
        w.write_record([
            r.seed.to_string(),
            r.scheme.name().to_string(),
            fmt_f64(r.coverage),
            r.n_test.to_string(),
        ])?;
    }
    let mut schemes: Vec<Scheme> = Vec::new();
    for r in rows {
        if !schemes.contains(&r.scheme) {
            schemes.push(r.scheme);
        }
    }
    for scheme in schemes {
        let covs: Vec<f64> = rows.iter().filter(|r| r.scheme == scheme).map(|r| r.coverage).collect();
        let n_test: usize = rows.iter().filter(|r| r.scheme == scheme).map(|r| r.n_test).sum();
        let (mean, std) = mean_std(&covs);
        w.write_record([
            "mean".to_string(),
            scheme.name().to_string(),
            fmt_f64(mean),
            n_test.to_string(),
        ])?;
        w.write_record([
            "std".to_string(),
            scheme.name().to_string(),
            fmt_f64(std),
            n_test.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Mean and sample standard deviation; the deviation is 0 below two values.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Eval-mode task loss averaged over `episodes`.
pub fn mean_task_loss(cfg: &ModelConfig, model: &ParamStore, episodes: &[Episode]) -> Result<f64> {
    if episodes.is_empty() {
        return Err(Error::usage("task loss needs at least one episode"));
    }
    let mut total = 0.0;
    let mut unused = RngStream::new(0);
    for chunk in episodes.chunks(256) {
        let xs: Vec<&Tensor> = chunk.iter().map(|e| &e.observations).collect();
        for (r, e) in forward_batch(&xs, cfg, model, &mut unused, Mode::Eval)?
            .iter()
            .zip(chunk)
        {
            total += loss_task(&r.y_final, &e.target)?;
        }
    }
    Ok(total / episodes.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> TrainConfig {
        let trajectory = TrajectorySpec {
            t: 8,
            d_theta: 3,
            d_beta: 1,
            m: 6,
            ..TrajectorySpec::default()
        };
        let model = ModelConfig {
            local_window: 2,
            d_embed: 12,
            d_global: 6,
            enc_hidden: 8,
            d_feat: 4,
            global_hidden: 8,
            temporal_radius: 1,
            ..ModelConfig::for_trajectory(&trajectory)
        };
        TrainConfig {
            trajectory,
            model,
            epochs: 2,
            batch_size: 4,
            h_train: 3,
            scorer_update_period: 2,
            scorer_steps: 2,
            scorer_batch: 8,
            scorer_buffer_iters: 4,
            scorer_hidden: 8,
            n_train: 12,
            n_cal: 6,
            n_test: 10,
            ..default_config()
        }
    }

    #[test]
    fn defaults_follow_the_reference_setup() {
        let cfg = default_config();
        assert_eq!(cfg.lambda, 0.6);
        assert_eq!(cfg.h_train, 20);
        assert_eq!(cfg.trajectory.t, 16);
        assert_eq!(cfg.model.t, 16);
        assert_eq!(cfg.alpha, 0.1);
        assert_eq!(cfg.scorer_update_period, 100);
        cfg.validate().unwrap();
        assert_eq!(TrainConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = small_config();
        for bad in [
            TrainConfig {
                h_train: 0,
                ..base.clone()
            },
            TrainConfig {
                lambda: -0.1,
                ..base.clone()
            },
            TrainConfig {
                scorer_update_period: 0,
                ..base.clone()
            },
            TrainConfig {
                alpha: 1.0,
                ..base.clone()
            },
            TrainConfig {
                model: ModelConfig {
                    t: 10,
                    ..base.model.clone()
                },
                ..base.clone()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Parameter(_))));
        }
    }

    #[test]
    fn schedule_is_cosine() {
        let cfg = small_config();
        let total = cfg.iterations();
        assert_eq!(total, 6);
        assert_eq!(cfg.schedule(0), 1.0);
        assert!((cfg.schedule(total / 2) - 0.5).abs() < 1e-12);
        assert!(cfg.schedule(total - 1) > 0.0);
    }

    #[test]
    fn overlapping_splits_are_a_usage_error() {
        let cfg = small_config();
        let mut splits = Splits::generate(&cfg).unwrap();
        splits.check_disjoint().unwrap();
        splits.cal.push(splits.train[0].clone());
        assert!(matches!(train(&cfg, &splits), Err(Error::Usage(_))));
    }

    #[test]
    fn split_hash_ignores_order_and_duplicates() {
        assert_eq!(split_hash([3, 1, 2]), split_hash([1, 2, 3, 3]));
        assert_ne!(split_hash([1, 2]), split_hash([1, 2, 3]));
        // sha256 of "1\n2\n3\n"
        assert_eq!(
            split_hash([1, 2, 3]),
            "14c5e74c4b96ccef41cd94db73a9ec3348038ac094feca4fd897cecffa07cdae"
        );
    }

    #[test]
    fn training_log_is_finite_and_decomposes() {
        let cfg = small_config();
        let splits = Splits::generate(&cfg).unwrap();
        let trained = train(&cfg, &splits).unwrap();
        assert_eq!(trained.log.len(), cfg.iterations());
        for (i, r) in trained.log.iter().enumerate() {
            assert_eq!(r.step, i);
            assert!([r.l_task, r.l_score, r.l_adv, r.l_net].iter().all(|v| v.is_finite()));
            let expect = r.l_task + cfg.lambda * (r.l_score + r.l_adv);
            assert!((r.l_net - expect).abs() <= 1e-12);
        }
        // Only training episodes feed gradients.
        let hashes = splits.hashes();
        assert_eq!(trained.touched_hash, hashes.train);
        assert_ne!(trained.touched_hash, hashes.cal);
        assert_ne!(trained.touched_hash, hashes.test);
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let cfg = small_config();
        let splits = Splits::generate(&cfg).unwrap();
        let a = train(&cfg, &splits).unwrap();
        let b = train(&cfg, &splits).unwrap();
        assert_eq!(a, b);
        let c = train(&TrainConfig { seed: 9, ..cfg.clone() }, &splits).unwrap();
        assert_ne!(a.model, c.model);
    }

    #[test]
    fn zero_lambda_leaves_the_scorer_out_of_the_estimator_step() {
        let cfg = TrainConfig {
            lambda: 0.0,
            ..small_config()
        };
        let splits = Splits::generate(&cfg).unwrap();
        let trained = train(&cfg, &splits).unwrap();
        // Swapping in a different scorer seed must not change the estimator.
        let mut other = cfg.clone();
        other.scorer_hidden = 5;
        let alt = train(&other, &splits).unwrap();
        assert_eq!(trained.model, alt.model);
        assert!(trained.log.iter().all(|r| r.l_net == r.l_task));
    }

    #[test]
    fn checkpoints_round_trip() {
        let cfg = small_config();
        let trained = train(&cfg, &Splits::generate(&cfg).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        trained.save(dir.path()).unwrap();
        let log = read_log_csv(std::fs::File::open(dir.path().join(TRAIN_LOG_FILE)).unwrap()).unwrap();
        assert_eq!(log, trained.log);
        let ckpt = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(ckpt, Checkpoint::from(trained));
    }

    #[test]
    fn auroc_oracles() {
        assert_eq!(auroc(&[0.3; 5], &[0.3; 7]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.0; 4], &[1.0; 4]).unwrap(), 1.0);
        assert_eq!(auroc(&[1.0; 4], &[0.0; 4]).unwrap(), 0.0);
        // Pairs (neg, pos): 1<2 win, 1<4, 3>2 loss, 3<4 win -> 3/4.
        assert_eq!(auroc(&[1.0, 3.0], &[2.0, 4.0]).unwrap(), 0.75);
        // One tie out of four pairs counts half.
        assert_eq!(auroc(&[1.0, 2.0], &[2.0, 3.0]).unwrap(), 0.875);
        assert!(auroc(&[], &[1.0]).is_err());
    }

    #[test]
    fn constant_scorer_has_no_separation() {
        let cfg = small_config();
        let splits = Splits::generate(&cfg).unwrap();
        let mcfg = &cfg.model;
        let model = init_params(mcfg, &mut RngStream::new(1)).unwrap();
        let mut scorer = init_scorer(mcfg.d_embed, mcfg.output_width(), 8, &mut RngStream::new(2)).unwrap();
        scorer.set("scorer.out.w", Tensor::zeros(&[8, 1])).unwrap();
        let rep = evaluate(mcfg, &model, &scorer, &splits.test, 0.5, &mut RngStream::new(3)).unwrap();
        assert_eq!(rep.score_separation, 0.0);
        assert_eq!(rep.auroc, 0.5);
        assert!(rep.task_error > 0.0);
    }

    #[test]
    fn ablation_row_counts() {
        let cfg = TrainConfig {
            epochs: 1,
            ..small_config()
        };
        let rows = ablate_h(&cfg, &[1], &[0]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!((rows[0].h, rows[0].seed), (1, 0));
        let rows = ablate_h(&cfg, &[1, 2], &[0, 1, 2]).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows.iter().map(|r| r.h).collect::<Vec<_>>(), [1, 1, 1, 2, 2, 2]);
        let mut out = Vec::new();
        write_ablation_csv(&mut out, &rows).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("H,seed,task_error\n"));
        assert_eq!(text.lines().count(), 7);
        assert!(ablate_h(&cfg, &[], &[0]).is_err());
        assert_eq!(ablate_lambda(&cfg, &[0.0, 0.6], &[0]).unwrap().len(), 2);
    }

    #[test]
    fn median_picks_the_middle() {
        assert_eq!(median(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]).unwrap(), 2.5);
        assert!(median(&[]).is_err());
    }

    #[test]
    fn trial_test_episodes_follow_the_last_regime() {
        let traj = small_config().trajectory;
        let spec = StreamSpec::changepoint(20, 5, 1.0, traj);
        let data = trial_data(&spec, 7, &RngStream::new(4)).unwrap();
        assert_eq!(data.cal.len(), 20);
        assert_eq!(data.test.len(), 7);
        assert_eq!(data.segments, data.cal.iter().map(|e| e.regime_id).collect::<Vec<_>>());
        let last = *data.segments.last().unwrap();
        assert!(data.test.iter().all(|e| e.regime_id == last));
        assert_eq!(data.test[0].id, 20);
    }
}
