//! Weighted conformal calibration and deep-uncertainty conformal sets.
//!
//! The threshold `tau*` is the `(1 − alpha)` quantile of a discrete
//! distribution that puts normalised weight `w̃_i` on each calibration score
//! and the test point's weight on `+∞`. Sets keep every hypothesis whose
//! score is at most `tau*`.

use std::io::{Read, Write};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::duf::score_batch;
use crate::error::{Error, Result};
use crate::mathcore::{fmt_f64, to_json_pretty, ParamStore, RngStream, Tensor};
use crate::model::{forward_batch, Mode, ModelConfig, PoseShapeOutput};
use crate::synth::Episode;

/// Slack for comparing accumulated masses against the target level.
const MASS_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationExample {
    pub episode_id: usize,
    pub score: f64,
    /// Externally supplied weight in `(0, 1]`; takes precedence over features.
    pub raw_weight: Option<f64>,
    /// Scorer features of the (embedding, prediction) pair.
    pub phi_pred: Option<Vec<f64>>,
    /// Scorer features of the (embedding, ground truth) pair.
    pub phi_gt: Option<Vec<f64>>,
}

impl CalibrationExample {
    pub fn scored(episode_id: usize, score: f64) -> Self {
        CalibrationExample {
            episode_id,
            score,
            raw_weight: None,
            phi_pred: None,
            phi_gt: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Uniform,
    /// Rank-decay weights ordered by feature-distance weight.
    FeatureDecay,
    /// Rank-decay weights ordered by position alone (most recent highest).
    RecencyDecay,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Uniform => "uniform",
            Scheme::FeatureDecay => "feature_decay",
            Scheme::RecencyDecay => "recency_decay",
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Scheme::Uniform),
            "feature_decay" => Ok(Scheme::FeatureDecay),
            "recency_decay" => Ok(Scheme::RecencyDecay),
            other => Err(Error::usage(format!("unknown weighting scheme {other:?}"))),
        }
    }
}

/// `exp(−‖phi_pred − phi_gt‖² / temperature)`, floored at the smallest
/// positive normal float so that the weight stays in `(0, 1]`.
pub fn feature_weight(phi_pred: &[f64], phi_gt: &[f64], temperature: f64) -> Result<f64> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::param(format!("temperature {temperature} must be > 0")));
    }
    if phi_pred.len() != phi_gt.len() {
        return Err(Error::Dimension {
            op: "feature_weight",
            left: vec![phi_pred.len()],
            right: vec![phi_gt.len()],
        });
    }
    let d2: f64 = phi_pred.iter().zip(phi_gt).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((-d2 / temperature).exp().max(f64::MIN_POSITIVE))
}

/// Normalised calibration masses and the test point's (infinity) mass.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedWeights {
    pub weights: Vec<f64>,
    pub infinity_mass: f64,
}

/// Rank-decay normalisation. Ranks `π` are ascending in the raw weight
/// (ties go to the later index); `w'_i = rho^(n+1−π_i)`, the test point gets
/// `w' = 1`, and all `n + 1` masses are divided by their sum.
pub fn decay_normalize(raw_weights: &[f64], rho: f64) -> Result<NormalizedWeights> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::param(format!("decay rho {rho} outside (0, 1]")));
    }
    let n = raw_weights.len();
    if n == 0 {
        return Err(Error::usage("decay normalisation needs at least one weight"));
    }
    if raw_weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::Numeric("raw weights must be finite".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| raw_weights[a].total_cmp(&raw_weights[b]).then(a.cmp(&b)));
    let mut w = vec![0.0; n];
    for (pos, &i) in order.iter().enumerate() {
        let rank = pos + 1;
        w[i] = rho.powi((n + 1 - rank) as i32);
    }
    let total: f64 = w.iter().sum::<f64>() + 1.0;
    Ok(NormalizedWeights {
        weights: w.iter().map(|v| v / total).collect(),
        infinity_mass: 1.0 / total,
    })
}

pub fn uniform_weights(n: usize) -> Result<NormalizedWeights> {
    if n == 0 {
        return Err(Error::usage("uniform weights need at least one point"));
    }
    let m = 1.0 / (n + 1) as f64;
    Ok(NormalizedWeights {
        weights: vec![m; n],
        infinity_mass: m,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightedScoreDistribution {
    /// `(score, mass)` sorted ascending by score.
    atoms: Vec<(f64, f64)>,
    infinity_mass: f64,
}

impl WeightedScoreDistribution {
    pub fn new(scores: &[f64], weights: &NormalizedWeights) -> Result<Self> {
        if scores.len() != weights.weights.len() {
            return Err(Error::Dimension {
                op: "WeightedScoreDistribution::new",
                left: vec![scores.len()],
                right: vec![weights.weights.len()],
            });
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numeric("calibration scores must be finite".into()));
        }
        let mut atoms: Vec<(f64, f64)> = scores.iter().copied().zip(weights.weights.iter().copied()).collect();
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        Self::from_atoms(atoms, weights.infinity_mass)
    }

    /// Atoms must already be sorted by score.
    pub fn from_atoms(atoms: Vec<(f64, f64)>, infinity_mass: f64) -> Result<Self> {
        if atoms.windows(2).any(|w| w[0].0 > w[1].0) {
            return Err(Error::usage("atoms must be sorted by score"));
        }
        if atoms.iter().any(|a| !(a.1 >= 0.0)) || !(infinity_mass >= 0.0) {
            return Err(Error::usage("masses must be non-negative"));
        }
        Ok(WeightedScoreDistribution { atoms, infinity_mass })
    }

    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    pub fn infinity_mass(&self) -> f64 {
        self.infinity_mass
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.1).sum::<f64>() + self.infinity_mass
    }
}

/// Smallest atom score whose cumulative mass reaches `q`, or `+∞` when only
/// the infinity mass gets there.
pub fn weighted_quantile(dist: &WeightedScoreDistribution, q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::param(format!("quantile level {q} outside (0, 1)")));
    }
    let total = dist.total_mass();
    if (total - 1.0).abs() > MASS_TOL {
        return Err(Error::usage(format!("distribution mass sums to {total}, not 1")));
    }
    let mut cum = 0.0;
    for &(s, m) in &dist.atoms {
        cum += m;
        if cum + MASS_TOL >= q {
            return Ok(s);
        }
    }
    Ok(f64::INFINITY)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub alpha: f64,
    /// `+∞` is written as the string `"inf"`.
    #[serde(with = "tau_format")]
    pub tau_star: f64,
    pub scheme: Scheme,
    pub rho: f64,
    pub temperature: f64,
    pub n: usize,
    pub seed: Option<u64>,
    pub created_at: Option<String>,
}

impl CalibrationResult {
    pub fn to_json(&self) -> Result<String> {
        to_json_pretty(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cal: CalibrationResult = serde_json::from_str(text)?;
        if !(cal.alpha > 0.0 && cal.alpha < 1.0) {
            return Err(Error::Format(format!("alpha {} outside (0, 1)", cal.alpha)));
        }
        Ok(cal)
    }
}

mod tau_format {
    use super::*;

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if *v == f64::INFINITY {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("bad threshold {t:?}"))),
        }
    }
}

/// Normalised masses for `examples` under `scheme`.
pub fn scheme_weights(
    examples: &[CalibrationExample],
    scheme: Scheme,
    rho: f64,
    temperature: f64,
) -> Result<NormalizedWeights> {
    match scheme {
        Scheme::Uniform => uniform_weights(examples.len()),
        Scheme::RecencyDecay => decay_normalize(&vec![1.0; examples.len()], rho),
        Scheme::FeatureDecay => {
            let raw = examples
                .iter()
                .map(|e| match (&e.raw_weight, &e.phi_pred, &e.phi_gt) {
                    (Some(w), _, _) => {
                        if *w > 0.0 && *w <= 1.0 {
                            Ok(*w)
                        } else {
                            Err(Error::usage(format!(
                                "raw weight {w} of episode {} outside (0, 1]",
                                e.episode_id
                            )))
                        }
                    }
                    (None, Some(p), Some(g)) => feature_weight(p, g, temperature),
                    _ => Err(Error::usage(format!(
                        "episode {} has neither a raw weight nor scorer features",
                        e.episode_id
                    ))),
                })
                .collect::<Result<Vec<_>>>()?;
            decay_normalize(&raw, rho)
        }
    }
}

pub fn calibrate(
    examples: &[CalibrationExample],
    alpha: f64,
    scheme: Scheme,
    rho: f64,
    temperature: f64,
) -> Result<CalibrationResult> {
    if examples.is_empty() {
        return Err(Error::usage("calibration set is empty"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::param(format!("alpha {alpha} outside (0, 1)")));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::param(format!("temperature {temperature} must be > 0")));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::param(format!("decay rho {rho} outside (0, 1]")));
    }
    let weights = scheme_weights(examples, scheme, rho, temperature)?;
    let scores: Vec<f64> = examples.iter().map(|e| e.score).collect();
    let dist = WeightedScoreDistribution::new(&scores, &weights)?;
    Ok(CalibrationResult {
        alpha,
        tau_star: weighted_quantile(&dist, 1.0 - alpha)?,
        scheme,
        rho,
        temperature,
        n: examples.len(),
        seed: None,
        created_at: None,
    })
}

/// Inclusive threshold test; `+∞` admits every score.
pub fn ducs_membership(score: f64, cal: &CalibrationResult) -> bool {
    score <= cal.tau_star
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub hypotheses: Vec<(PoseShapeOutput, f64)>,
    /// Membership flag per hypothesis.
    pub members: Vec<bool>,
    pub tau_star: f64,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.members.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `h` MC-dropout hypotheses for one episode, each scored with its own
/// embedding and filtered by the calibrated threshold.
pub fn mc_dropout_set(
    x: &Tensor,
    h: usize,
    cal: &CalibrationResult,
    cfg: &ModelConfig,
    model: &ParamStore,
    scorer: &ParamStore,
    rng: &mut RngStream,
) -> Result<PredictionSet> {
    if h == 0 {
        return Err(Error::param("hypothesis count must be at least 1"));
    }
    let results = forward_batch(&vec![x; h], cfg, model, rng, Mode::McDropout)?;
    let phis = stack(results.iter().map(|r| r.phi_gl.vector.data()), cfg.d_embed)?;
    let ys = stack_outputs(results.iter().map(|r| &r.y_final), cfg.output_width())?;
    let scores = score_batch(&phis, &ys, scorer)?.scores;
    let members = scores.iter().map(|&s| ducs_membership(s, cal)).collect();
    Ok(PredictionSet {
        hypotheses: results.into_iter().map(|r| r.y_final).zip(scores).collect(),
        members,
        tau_star: cal.tau_star,
    })
}

pub(crate) fn stack<'a>(rows: impl Iterator<Item = &'a [f64]>, width: usize) -> Result<Tensor> {
    let data: Vec<f64> = rows.flat_map(|r| r.iter().copied()).collect();
    Tensor::new(vec![data.len() / width, width], data)
}

pub(crate) fn stack_outputs<'a>(ys: impl Iterator<Item = &'a PoseShapeOutput>, width: usize) -> Result<Tensor> {
    let data: Vec<f64> = ys.flat_map(|y| y.flatten()).collect();
    Tensor::new(vec![data.len() / width, width], data)
}

/// Eval-mode scores of every episode: the score of the ground truth plus
/// scorer features of the (embedding, prediction) and (embedding, truth)
/// pairs, ready for calibration or coverage.
pub fn score_episodes(
    episodes: &[Episode],
    cfg: &ModelConfig,
    model: &ParamStore,
    scorer: &ParamStore,
) -> Result<Vec<CalibrationExample>> {
    const CHUNK: usize = 256;
    let mut out = Vec::with_capacity(episodes.len());
    let mut rng = RngStream::new(0);
    for chunk in episodes.chunks(CHUNK) {
        let xs: Vec<&Tensor> = chunk.iter().map(|e| &e.observations).collect();
        let results = forward_batch(&xs, cfg, model, &mut rng, Mode::Eval)?;
        let phis = stack(results.iter().map(|r| r.phi_gl.vector.data()), cfg.d_embed)?;
        let preds = stack_outputs(results.iter().map(|r| &r.y_final), cfg.output_width())?;
        let truth = stack_outputs(chunk.iter().map(|e| &e.target), cfg.output_width())?;
        let on_gt = score_batch(&phis, &truth, scorer)?;
        let on_pred = score_batch(&phis, &preds, scorer)?;
        for (i, ep) in chunk.iter().enumerate() {
            out.push(CalibrationExample {
                episode_id: ep.id,
                score: on_gt.scores[i],
                raw_weight: None,
                phi_pred: Some(on_pred.features.row(i).to_vec()),
                phi_gt: Some(on_gt.features.row(i).to_vec()),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub n_test: usize,
    pub covered_count: usize,
    pub coverage: f64,
    pub alpha: f64,
    pub lower_bound_used: Option<f64>,
}

/// Fraction of ground-truth scores admitted by `cal`.
pub fn coverage_of_scores(scores: &[f64], cal: &CalibrationResult) -> Result<CoverageReport> {
    if scores.is_empty() {
        return Err(Error::usage("coverage needs at least one test point"));
    }
    let covered_count = scores.iter().filter(|&&s| ducs_membership(s, cal)).count();
    Ok(CoverageReport {
        n_test: scores.len(),
        covered_count,
        coverage: covered_count as f64 / scores.len() as f64,
        alpha: cal.alpha,
        lower_bound_used: None,
    })
}

pub fn empirical_coverage(
    test: &[Episode],
    cal: &CalibrationResult,
    cfg: &ModelConfig,
    model: &ParamStore,
    scorer: &ParamStore,
) -> Result<CoverageReport> {
    if test.is_empty() {
        return Err(Error::usage("coverage needs at least one test episode"));
    }
    let scores: Vec<f64> = score_episodes(test, cfg, model, scorer)?
        .iter()
        .map(|e| e.score)
        .collect();
    coverage_of_scores(&scores, cal)
}

/// `episode_id,score[,raw_weight]`.
pub fn write_scores_csv<W: Write>(mut out: W, examples: &[CalibrationExample], with_weights: bool) -> Result<()> {
    writeln!(
        out,
        "{}",
        if with_weights {
            "episode_id,score,raw_weight"
        } else {
            "episode_id,score"
        }
    )?;
    for e in examples {
        if with_weights {
            let w = e
                .raw_weight
                .ok_or_else(|| Error::usage(format!("episode {} has no raw weight", e.episode_id)))?;
            writeln!(out, "{},{},{}", e.episode_id, fmt_f64(e.score), fmt_f64(w))?;
        } else {
            writeln!(out, "{},{}", e.episode_id, fmt_f64(e.score))?;
        }
    }
    Ok(())
}

pub fn read_scores_csv<R: Read>(input: R) -> Result<Vec<CalibrationExample>> {
    let mut reader = csv::Reader::from_reader(input);
    let headers = reader.headers()?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    let with_weights = match cols.as_slice() {
        ["episode_id", "score"] => false,
        ["episode_id", "score", "raw_weight"] => true,
        _ => return Err(Error::Format(format!("unexpected scores header {cols:?}"))),
    };
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let bad = |i: usize| Error::Format(format!("bad value {:?} in column {}", &rec[i], cols[i]));
        let episode_id = rec[0].parse().map_err(|_| bad(0))?;
        let score: f64 = rec[1].parse().map_err(|_| bad(1))?;
        if !score.is_finite() {
            return Err(bad(1));
        }
        let raw_weight = if with_weights && !rec[2].is_empty() {
            Some(rec[2].parse::<f64>().map_err(|_| bad(2))?)
        } else {
            None
        };
        out.push(CalibrationExample {
            episode_id,
            score,
            raw_weight,
            phi_pred: None,
            phi_gt: None,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    fn examples(scores: &[f64]) -> Vec<CalibrationExample> {
        scores
            .iter()
            .enumerate()
            .map(|(i, &s)| CalibrationExample::scored(i, s))
            .collect()
    }

    #[test]
    fn feature_weight_closed_forms() {
        assert_eq!(feature_weight(&[1.0, 2.0], &[1.0, 2.0], 1.0).unwrap(), 1.0);
        assert!(close(
            feature_weight(&[1.0, 1.0], &[0.0, 0.0], 2.0).unwrap(),
            (-1.0f64).exp()
        ));
        assert!(close(
            feature_weight(&[1.0, 1.0], &[0.0, 0.0], 1.0).unwrap(),
            0.1353352832366127
        ));
        assert!(matches!(feature_weight(&[0.0], &[0.0], 0.0), Err(Error::Parameter(_))));
        assert!(feature_weight(&[1e3], &[-1e3], 1.0).unwrap() > 0.0);
    }

    /// Enumeration oracle: rank by sorting (weight, index) pairs, raise rho to
    /// the complementary rank, normalise with the unit test mass.
    fn decay_oracle(raw: &[f64], rho: f64) -> (Vec<f64>, f64) {
        let n = raw.len();
        let mut ranks = vec![0usize; n];
        for i in 0..n {
            ranks[i] = 1
                + (0..n)
                    .filter(|&j| raw[j] < raw[i] || (raw[j] == raw[i] && j < i))
                    .count();
        }
        let mut w: Vec<f64> = ranks
            .iter()
            .map(|&r| (0..n + 1 - r).fold(1.0, |acc, _| acc * rho))
            .collect();
        w.push(1.0);
        let z: f64 = w.iter().sum();
        let inf = w.pop().unwrap() / z;
        (w.iter().map(|v| v / z).collect(), inf)
    }

    #[test]
    fn decay_examples() {
        let out = decay_normalize(&[0.2, 0.9, 0.5], 0.5).unwrap();
        let expected = [1.0 / 15.0, 4.0 / 15.0, 2.0 / 15.0];
        for (a, b) in out.weights.iter().zip(expected) {
            assert!(close(*a, b));
        }
        assert!(close(out.infinity_mass, 8.0 / 15.0));

        let one = decay_normalize(&[0.7], 0.5).unwrap();
        assert!(close(one.weights[0], 1.0 / 3.0) && close(one.infinity_mass, 2.0 / 3.0));

        let flat = decay_normalize(&[0.1, 0.4, 0.4, 0.9], 1.0).unwrap();
        assert!(flat.weights.iter().all(|&w| close(w, 0.2)) && close(flat.infinity_mass, 0.2));

        assert!(matches!(decay_normalize(&[0.5], 0.0), Err(Error::Parameter(_))));
        assert!(matches!(decay_normalize(&[0.5], 1.5), Err(Error::Parameter(_))));
    }

    #[test]
    fn decay_ties_follow_recency() {
        let out = decay_normalize(&[0.5, 0.5, 0.5], 0.5).unwrap();
        assert!(out.weights[0] < out.weights[1] && out.weights[1] < out.weights[2]);
    }

    #[test]
    fn uniform_examples() {
        let u = uniform_weights(3).unwrap();
        assert_eq!(u.weights, vec![0.25; 3]);
        assert_eq!(u.infinity_mass, 0.25);
        let u = uniform_weights(1).unwrap();
        assert_eq!((u.weights[0], u.infinity_mass), (0.5, 0.5));
        assert!(uniform_weights(0).is_err());
    }

    #[test]
    fn quantile_examples() {
        let single = WeightedScoreDistribution::from_atoms(vec![(0.5, 1.0)], 0.0).unwrap();
        assert_eq!(weighted_quantile(&single, 0.9).unwrap(), 0.5);

        let atoms = (1..=10).map(|s| (s as f64, 1.0 / 11.0)).collect();
        let ten = WeightedScoreDistribution::from_atoms(atoms, 1.0 / 11.0).unwrap();
        assert_eq!(weighted_quantile(&ten, 0.9).unwrap(), 10.0);

        let two = WeightedScoreDistribution::from_atoms(vec![(0.2, 0.3), (0.4, 0.3)], 0.4).unwrap();
        assert_eq!(weighted_quantile(&two, 0.5).unwrap(), 0.4);
        assert_eq!(weighted_quantile(&two, 0.7).unwrap(), f64::INFINITY);

        let loose = WeightedScoreDistribution::from_atoms(vec![(0.2, 0.3)], 0.3).unwrap();
        assert!(matches!(weighted_quantile(&loose, 0.5), Err(Error::Usage(_))));
    }

    #[test]
    fn calibrate_examples() {
        let scores: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let cal = calibrate(&examples(&scores), 0.1, Scheme::Uniform, 1.0, 1.0).unwrap();
        assert_eq!(cal.tau_star, 1.0);

        let cal = calibrate(&examples(&[0.3; 9]), 0.1, Scheme::Uniform, 1.0, 1.0).unwrap();
        assert_eq!(cal.tau_star, 0.3);
        // Decay puts the largest single mass on +∞: nine points at rho = 0.99
        // carry only ~0.895, fifty carry enough.
        let cal = calibrate(&examples(&[0.3; 9]), 0.1, Scheme::RecencyDecay, 0.99, 1.0).unwrap();
        assert_eq!(cal.tau_star, f64::INFINITY);
        let cal = calibrate(&examples(&[0.3; 50]), 0.1, Scheme::RecencyDecay, 0.99, 1.0).unwrap();
        assert_eq!(cal.tau_star, 0.3);

        let n = 10;
        let tiny = 1.0 / (2.0 * (n as f64 + 1.0));
        let cal = calibrate(&examples(&scores), tiny, Scheme::Uniform, 1.0, 1.0).unwrap();
        assert_eq!(cal.tau_star, f64::INFINITY);

        assert!(matches!(
            calibrate(&[], 0.1, Scheme::Uniform, 1.0, 1.0),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            calibrate(&examples(&scores), 0.1, Scheme::FeatureDecay, 0.9, 1.0),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn membership_is_inclusive() {
        let mut cal = calibrate(&examples(&[0.5]), 0.5, Scheme::Uniform, 1.0, 1.0).unwrap();
        assert_eq!(cal.tau_star, 0.5);
        assert!(ducs_membership(0.2, &cal));
        assert!(ducs_membership(0.5, &cal));
        assert!(!ducs_membership(0.51, &cal));
        cal.tau_star = f64::INFINITY;
        assert!(ducs_membership(0.999, &cal));
    }

    #[test]
    fn calibration_json_round_trip() {
        let mut cal = calibrate(&examples(&[0.1, 0.7, 0.3]), 0.1, Scheme::Uniform, 1.0, 1.0).unwrap();
        assert_eq!(cal.tau_star, f64::INFINITY);
        cal.seed = Some(7);
        let text = cal.to_json().unwrap();
        assert!(text.contains("\"tau_star\": \"inf\""), "{text}");
        assert_eq!(CalibrationResult::from_json(&text).unwrap(), cal);

        cal.tau_star = 0.1 + 0.2;
        let back = CalibrationResult::from_json(&cal.to_json().unwrap()).unwrap();
        assert_eq!(back.tau_star.to_bits(), cal.tau_star.to_bits());
    }

    #[test]
    fn scores_csv_round_trip() {
        let mut ex = examples(&[0.25, 1.0 / 3.0]);
        ex[0].raw_weight = Some(0.5);
        ex[1].raw_weight = Some(1e-300);
        let mut buf = Vec::new();
        write_scores_csv(&mut buf, &ex, true).unwrap();
        assert_eq!(read_scores_csv(buf.as_slice()).unwrap(), ex);
        let plain = read_scores_csv("episode_id,score\n3,0.5\n".as_bytes()).unwrap();
        assert_eq!(plain, vec![CalibrationExample::scored(3, 0.5)]);
        assert!(read_scores_csv("id,score\n".as_bytes()).is_err());
    }

    #[test]
    fn coverage_extremes() {
        let mut cal = calibrate(&examples(&[0.5; 20]), 0.1, Scheme::Uniform, 1.0, 1.0).unwrap();
        cal.tau_star = f64::INFINITY;
        assert_eq!(coverage_of_scores(&[0.9, 0.99], &cal).unwrap().coverage, 1.0);
        cal.tau_star = 0.01;
        assert_eq!(coverage_of_scores(&[0.9, 0.99], &cal).unwrap().coverage, 0.0);
        assert!(coverage_of_scores(&[], &cal).is_err());
    }

    /// `ceil((1 − alpha)(n + 1))`-th smallest score, or `+∞` past the end.
    fn order_statistic(scores: &[f64], alpha: f64) -> f64 {
        let mut s = scores.to_vec();
        s.sort_by(f64::total_cmp);
        let k = ((1.0 - alpha) * (s.len() + 1) as f64).ceil() as usize;
        if k > s.len() {
            f64::INFINITY
        } else {
            s[k - 1]
        }
    }

    proptest! {
        #[test]
        fn decay_matches_enumeration(raw in prop::collection::vec(0.0f64..1.0, 1..40), rho in 0.05f64..1.0) {
            let out = decay_normalize(&raw, rho).unwrap();
            let (w, inf) = decay_oracle(&raw, rho);
            for (a, b) in out.weights.iter().zip(&w) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert!((out.infinity_mass - inf).abs() < 1e-12);
            let total = out.weights.iter().sum::<f64>() + out.infinity_mass;
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn quantile_is_monotone(scores in prop::collection::vec(0.0f64..1.0, 1..50), q1 in 0.01f64..0.99, q2 in 0.01f64..0.99) {
            let raw: Vec<f64> = scores.iter().map(|s| 1.0 - s).collect();
            let dist = WeightedScoreDistribution::new(&scores, &decay_normalize(&raw, 0.9).unwrap()).unwrap();
            let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
            prop_assert!(weighted_quantile(&dist, lo).unwrap() <= weighted_quantile(&dist, hi).unwrap());
        }

        #[test]
        fn uniform_equals_order_statistic(scores in prop::collection::vec(0.0f64..1.0, 1..200), alpha in 0.01f64..0.5) {
            let cal = calibrate(&examples(&scores), alpha, Scheme::Uniform, 1.0, 1.0).unwrap();
            prop_assert_eq!(cal.tau_star, order_statistic(&scores, alpha));
        }

        #[test]
        fn rho_one_degenerates_to_uniform(scores in prop::collection::vec(0.0f64..1.0, 1..100), alpha in 0.01f64..0.5) {
            let mut ex = examples(&scores);
            for (i, e) in ex.iter_mut().enumerate() {
                e.raw_weight = Some(((i * 7919) % 13 + 1) as f64 / 14.0);
            }
            let u = calibrate(&ex, alpha, Scheme::Uniform, 1.0, 1.0).unwrap();
            let d = calibrate(&ex, alpha, Scheme::FeatureDecay, 1.0, 1.0).unwrap();
            prop_assert_eq!(u.tau_star, d.tau_star);
        }

        #[test]
        fn uniform_is_permutation_invariant(scores in prop::collection::vec(0.0f64..1.0, 1..100), seed in any::<u64>()) {
            let mut shuffled = scores.clone();
            RngStream::new(seed).shuffle(&mut shuffled);
            let a = calibrate(&examples(&scores), 0.1, Scheme::Uniform, 1.0, 1.0).unwrap();
            let b = calibrate(&examples(&shuffled), 0.1, Scheme::Uniform, 1.0, 1.0).unwrap();
            prop_assert_eq!(a.tau_star, b.tau_star);
        }
    }
}
