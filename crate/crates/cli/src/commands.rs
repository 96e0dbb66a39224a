use std::fmt;
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ducs_core::bounds::{beta_grid, changepoint_gap_bound};
use ducs_core::conformal::{
    calibrate, coverage_of_scores, mc_dropout_set, read_scores_csv, score_episodes, write_scores_csv,
    CalibrationResult, Scheme,
};
use ducs_core::mathcore::{fmt_f64, to_json_pretty, RngStream};
use ducs_core::pipeline::{
    ablate_h, ablate_lambda, coverage_trial, default_config, median, train, write_ablation_csv, write_coverage_csv,
    write_lambda_csv, CalibrationSettings, Checkpoint, CoverageRow, Splits, TrainConfig, MODEL_CONFIG_FILE,
    MODEL_PARAMS_FILE, SCORER_PARAMS_FILE, TRAIN_LOG_FILE,
};
use ducs_core::synth::{gen_stream, read_episodes_csv, write_episodes_csv, Episode, StreamSpec};
use rayon::prelude::*;
use serde::Serialize;

use crate::manifest::{FileHash, RunManifest};
use crate::{
    AblateArgs, BoundsArgs, CalibrateArgs, CalibrationFlags, Cli, Command, CoverageArgs, ModeArg, PredictArgs,
    SchemeArg, SimulateArgs, StreamArgs, TrainArgs,
};

/// A completed run whose outputs failed a soundness or reproducibility check.
#[derive(Debug)]
pub struct Verification(pub String);

impl fmt::Display for Verification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "verification failed: {}", self.0)
    }
}

impl std::error::Error for Verification {}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<Verification>() {
            return 4;
        }
        if let Some(core) = cause.downcast_ref::<ducs_core::Error>() {
            return match core {
                ducs_core::Error::Numeric(_)
                | ducs_core::Error::NonFiniteTraining { .. }
                | ducs_core::Error::Quadrature { .. } => 3,
                _ => 2,
            };
        }
    }
    2
}

/// Files a command read and wrote, plus an optional failed check reported
/// after the manifest is on disk.
#[derive(Default)]
struct Outcome {
    inputs: Vec<PathBuf>,
    outputs: Vec<&'static str>,
    failed_check: Option<String>,
}

pub fn run(cli: Cli) -> Result<()> {
    if let Command::Replay(args) = &cli.command {
        return replay(&args.manifest, &cli.out_dir);
    }
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            TrainConfig::from_json(&text)?
        }
        None => default_config(),
    };
    cfg.seed = cli.seed.unwrap_or(cfg.seed);
    execute(&cli.command, &cfg, &cli.out_dir)?;
    Ok(())
}

fn replay(manifest_path: &Path, out_dir: &Path) -> Result<()> {
    let manifest = RunManifest::load(manifest_path)?;
    let changed = manifest.mismatched_inputs()?;
    if !changed.is_empty() {
        return Err(Verification(format!("inputs changed since the recorded run: {changed:?}")).into());
    }
    let command: Command = serde_json::from_value(manifest.args.clone()).context("decoding recorded command")?;
    let fresh = execute(&command, &manifest.config, out_dir)?;
    let differing = manifest.mismatched_outputs(out_dir)?;
    if !differing.is_empty() || manifest.outputs.len() != fresh.outputs.len() {
        return Err(Verification(format!("replayed outputs differ: {differing:?}")).into());
    }
    eprintln!("replay reproduced {} output file(s)", fresh.outputs.len());
    Ok(())
}

fn execute(command: &Command, cfg: &TrainConfig, out_dir: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let outcome = match command {
        Command::Simulate(a) => simulate(a, cfg, out_dir)?,
        Command::Train(a) => train_cmd(a, cfg, out_dir)?,
        Command::Calibrate(a) => calibrate_cmd(a, cfg, out_dir)?,
        Command::Predict(a) => predict(a, cfg, out_dir)?,
        Command::Coverage(a) => coverage(a, cfg, out_dir)?,
        Command::Bounds(a) => bounds(a, out_dir)?,
        Command::Ablate(a) => ablate(a, cfg, out_dir)?,
        Command::Replay(_) => bail!("replay cannot be recorded"),
    };
    let args = serde_json::to_value(command)?;
    let manifest = RunManifest {
        command: args["command"].as_str().unwrap_or_default().to_string(),
        args,
        config: cfg.clone(),
        seed: cfg.seed,
        inputs: outcome.inputs.iter().map(|p| FileHash::of(p)).collect::<Result<_>>()?,
        outputs: outcome
            .outputs
            .iter()
            .map(|name| {
                Ok(FileHash {
                    path: name.to_string(),
                    sha256: crate::manifest::sha256_file(&out_dir.join(name))?,
                })
            })
            .collect::<Result<_>>()?,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        created_at: chrono::Utc::now().to_rfc3339(),
    };
    manifest.write(out_dir)?;
    if let Some(msg) = outcome.failed_check {
        return Err(Verification(msg).into());
    }
    Ok(manifest)
}

fn stream_spec(s: &StreamArgs, n: usize, cfg: &TrainConfig) -> StreamSpec {
    let mut spec = match s.mode {
        ModeArg::Iid => StreamSpec::iid(n, cfg.trajectory.clone()),
        ModeArg::Changepoint => StreamSpec::changepoint(n, s.k, s.shift, cfg.trajectory.clone()),
    };
    spec.noise_shift = s.noise_shift;
    spec.world_seed = cfg.world_seed;
    spec
}

fn scheme(s: SchemeArg) -> Scheme {
    match s {
        SchemeArg::Uniform => Scheme::Uniform,
        SchemeArg::FeatureDecay => Scheme::FeatureDecay,
        SchemeArg::RecencyDecay => Scheme::RecencyDecay,
    }
}

fn read_episodes(path: &Path) -> Result<Vec<Episode>> {
    let file = File::open(path).with_context(|| format!("opening episodes {}", path.display()))?;
    read_episodes_csv(file).with_context(|| format!("reading episodes {}", path.display()))
}

fn load_checkpoint(dir: &Path) -> Result<(Checkpoint, Vec<PathBuf>)> {
    let ckpt = Checkpoint::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    let files = [MODEL_CONFIG_FILE, MODEL_PARAMS_FILE, SCORER_PARAMS_FILE].map(|f| dir.join(f));
    Ok((ckpt, files.to_vec()))
}

fn load_calibration(path: &Path) -> Result<CalibrationResult> {
    let text = fs::read_to_string(path).with_context(|| format!("reading calibration {}", path.display()))?;
    Ok(CalibrationResult::from_json(&text)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json_pretty(value)?)?;
    Ok(())
}

/// Reproducible-build timestamp: `SOURCE_DATE_EPOCH` when set, else none,
/// so that calibration files stay byte-identical across re-runs.
fn reproducible_timestamp() -> Option<String> {
    let secs: i64 = std::env::var("SOURCE_DATE_EPOCH").ok()?.parse().ok()?;
    chrono::DateTime::from_timestamp(secs, 0).map(|t| t.to_rfc3339())
}

const EPISODES_FILE: &str = "episodes.csv";
const CALIBRATION_FILE: &str = "calibration.json";
const SCORES_FILE: &str = "scores.csv";
const PREDICTION_FILE: &str = "prediction.json";
const COVERAGE_FILE: &str = "coverage.csv";
const BOUNDS_FILE: &str = "bounds.csv";
const ABLATION_FILE: &str = "ablation_h.csv";
const LAMBDA_FILE: &str = "ablation_lambda.csv";

fn simulate(a: &SimulateArgs, cfg: &TrainConfig, out: &Path) -> Result<Outcome> {
    let spec = stream_spec(&a.stream, a.n, cfg);
    let mut episodes = gen_stream(&spec, &mut RngStream::new(cfg.seed))?;
    for e in &mut episodes {
        e.id += a.first_id;
    }
    write_episodes_csv(File::create(out.join(EPISODES_FILE))?, &episodes)?;
    Ok(Outcome {
        outputs: vec![EPISODES_FILE],
        ..Outcome::default()
    })
}

fn train_cmd(a: &TrainArgs, cfg: &TrainConfig, out: &Path) -> Result<Outcome> {
    let train_eps = read_episodes(&a.episodes)?;
    let mut held = Vec::new();
    for p in &a.holdout {
        held.extend(read_episodes(p)?);
    }
    let splits = Splits {
        train: train_eps,
        cal: held,
        test: Vec::new(),
    };
    let trained = train(cfg, &splits)?;
    trained.save(out)?;
    if let Some(last) = trained.log.last() {
        eprintln!(
            "trained {} iterations; final l_task {:.4} l_score {:.4} l_adv {:.4}",
            trained.log.len(),
            last.l_task,
            last.l_score,
            last.l_adv
        );
    }
    let mut inputs = vec![a.episodes.clone()];
    inputs.extend(a.holdout.iter().cloned());
    Ok(Outcome {
        inputs,
        outputs: vec![MODEL_CONFIG_FILE, MODEL_PARAMS_FILE, SCORER_PARAMS_FILE, TRAIN_LOG_FILE],
        failed_check: None,
    })
}

fn calibrate_cmd(a: &CalibrateArgs, cfg: &TrainConfig, out: &Path) -> Result<Outcome> {
    let mut outcome = Outcome::default();
    let examples = match (&a.scores, &a.checkpoint, &a.episodes) {
        (Some(path), _, _) => {
            outcome.inputs.push(path.clone());
            let file = File::open(path).with_context(|| format!("opening scores {}", path.display()))?;
            read_scores_csv(file)?
        }
        (None, Some(dir), Some(eps)) => {
            let (ckpt, files) = load_checkpoint(dir)?;
            outcome.inputs.extend(files);
            outcome.inputs.push(eps.clone());
            let examples = score_episodes(&read_episodes(eps)?, &ckpt.model_cfg, &ckpt.model, &ckpt.scorer)?;
            write_scores_csv(File::create(out.join(SCORES_FILE))?, &examples, false)?;
            outcome.outputs.push(SCORES_FILE);
            examples
        }
        _ => bail!("calibrate needs --scores or both --checkpoint and --episodes"),
    };
    let f = &a.calibration;
    let mut result = calibrate(
        &examples,
        f.alpha.unwrap_or(cfg.alpha),
        scheme(f.scheme),
        f.rho,
        f.temperature,
    )?;
    result.seed = Some(cfg.seed);
    result.created_at = reproducible_timestamp();
    fs::write(out.join(CALIBRATION_FILE), result.to_json()?)?;
    outcome.outputs.push(CALIBRATION_FILE);
    eprintln!("tau_star = {}", fmt_f64(result.tau_star));
    Ok(outcome)
}

#[derive(Serialize)]
struct PredictionJson {
    episode_id: usize,
    /// `"inf"` when every hypothesis is admitted.
    tau_star: serde_json::Value,
    set_size: usize,
    hypotheses: Vec<HypothesisJson>,
}

#[derive(Serialize)]
struct HypothesisJson {
    score: f64,
    member: bool,
    /// One row per frame: the `theta` block followed by the `beta` block.
    frames: Vec<Vec<f64>>,
}

fn predict(a: &PredictArgs, cfg: &TrainConfig, out: &Path) -> Result<Outcome> {
    let (ckpt, mut inputs) = load_checkpoint(&a.checkpoint)?;
    let cal = load_calibration(&a.calibration)?;
    let episodes = read_episodes(&a.episodes)?;
    let Some(ep) = episodes.iter().find(|e| e.id == a.episode_id) else {
        bail!("episode {} not found in {}", a.episode_id, a.episodes.display());
    };
    let set = mc_dropout_set(
        &ep.observations,
        a.h,
        &cal,
        &ckpt.model_cfg,
        &ckpt.model,
        &ckpt.scorer,
        &mut RngStream::new(cfg.seed),
    )?;
    let tau_star = if cal.tau_star.is_finite() {
        serde_json::Value::from(cal.tau_star)
    } else {
        serde_json::Value::from("inf")
    };
    let json = PredictionJson {
        episode_id: ep.id,
        tau_star,
        set_size: set.len(),
        hypotheses: set
            .hypotheses
            .iter()
            .zip(&set.members)
            .map(|((y, score), &member)| HypothesisJson {
                score: *score,
                member,
                frames: (0..y.frames()).map(|t| y.frame(t)).collect(),
            })
            .collect(),
    };
    write_json(&out.join(PREDICTION_FILE), &json)?;
    inputs.push(a.calibration.clone());
    inputs.push(a.episodes.clone());
    Ok(Outcome {
        inputs,
        outputs: vec![PREDICTION_FILE],
        failed_check: None,
    })
}

fn coverage(a: &CoverageArgs, cfg: &TrainConfig, out: &Path) -> Result<Outcome> {
    let (ckpt, mut inputs) = load_checkpoint(&a.checkpoint)?;
    let rows: Vec<CoverageRow> = match (&a.calibration, &a.episodes, a.trials) {
        (Some(cal_path), Some(eps), None) => {
            if a.compare {
                bail!("--compare needs --trials");
            }
            let cal = load_calibration(cal_path)?;
            let test = read_episodes(eps)?;
            inputs.push(cal_path.clone());
            inputs.push(eps.clone());
            let scores: Vec<f64> = score_episodes(&test, &ckpt.model_cfg, &ckpt.model, &ckpt.scorer)?
                .iter()
                .map(|e| e.score)
                .collect();
            let report = coverage_of_scores(&scores, &cal)?;
            vec![CoverageRow {
                seed: cfg.seed,
                scheme: cal.scheme,
                coverage: report.coverage,
                n_test: report.n_test,
            }]
        }
        (None, None, Some(trials)) => {
            if trials == 0 {
                bail!("--trials must be at least 1");
            }
            let f: &CalibrationFlags = &a.calibration_flags;
            let mut schemes = vec![scheme(f.scheme)];
            if a.compare && schemes[0] != Scheme::Uniform {
                schemes.push(Scheme::Uniform);
            }
            let spec = stream_spec(&a.stream, a.n_cal.unwrap_or(cfg.n_cal), cfg);
            let n_test = a.n_test.unwrap_or(cfg.n_test);
            let settings = CalibrationSettings {
                alpha: f.alpha.unwrap_or(cfg.alpha),
                rho: f.rho,
                temperature: f.temperature,
            };
            let per_trial = (0..trials as u64)
                .into_par_iter()
                .map(|i| coverage_trial(&ckpt, &spec, n_test, cfg.seed + i, &schemes, settings))
                .collect::<ducs_core::Result<Vec<_>>>()?;
            per_trial.into_iter().flatten().collect()
        }
        _ => bail!("coverage needs either --calibration with --episodes, or --trials"),
    };
    write_coverage_csv(File::create(out.join(COVERAGE_FILE))?, &rows)?;
    Ok(Outcome {
        inputs,
        outputs: vec![COVERAGE_FILE],
        failed_check: None,
    })
}

fn bounds(a: &BoundsArgs, out: &Path) -> Result<Outcome> {
    if a.n_list.is_empty() || a.k_list.is_empty() || a.a1_list.is_empty() {
        bail!("bound grid lists must be nonempty");
    }
    if let Some(k) = a.k_list.iter().find(|k| !(k.fract() == 0.0 && **k >= 0.0)) {
        bail!("k = {k} must be a nonnegative integer");
    }
    if let Some(f) = a.a1_list.iter().find(|f| !(**f > 0.0 && **f < 1.0)) {
        bail!("a1 fraction {f} outside (0, 1)");
    }
    let rows = beta_grid(&a.n_list, &a.k_list, &a.a1_list)?;
    let mut w = csv::Writer::from_writer(File::create(out.join(BOUNDS_FILE))?);
    w.write_record([
        "n",
        "k",
        "a1",
        "a2",
        "tv_numeric",
        "hellinger",
        "beta_bound",
        "changepoint_bound",
        "holds",
    ])?;
    for r in &rows {
        w.write_record([
            fmt_f64(r.n),
            fmt_f64(r.k),
            fmt_f64(r.a1),
            fmt_f64(r.a2),
            fmt_f64(r.tv_numeric),
            fmt_f64(r.hellinger),
            fmt_f64(r.beta_bound),
            fmt_f64(changepoint_gap_bound(a.rho, r.k as u64)?),
            r.holds.to_string(),
        ])?;
    }
    w.flush()?;
    let failing = rows.iter().filter(|r| !r.holds).count();
    Ok(Outcome {
        outputs: vec![BOUNDS_FILE],
        failed_check: (failing > 0).then(|| format!("{failing} of {} grid cells violate the Beta bound", rows.len())),
        ..Outcome::default()
    })
}

fn ablate(a: &AblateArgs, cfg: &TrainConfig, out: &Path) -> Result<Outcome> {
    let rows = ablate_h(cfg, &a.h_list, &a.seeds)?;
    write_ablation_csv(File::create(out.join(ABLATION_FILE))?, &rows)?;
    for &h in &a.h_list {
        let errs: Vec<f64> = rows.iter().filter(|r| r.h == h).map(|r| r.task_error).collect();
        eprintln!("H = {h}: median task error {:.4}", median(&errs)?);
    }
    let mut outputs = vec![ABLATION_FILE];
    if !a.lambda_list.is_empty() {
        let rows = ablate_lambda(cfg, &a.lambda_list, &a.seeds)?;
        write_lambda_csv(File::create(out.join(LAMBDA_FILE))?, &rows)?;
        outputs.push(LAMBDA_FILE);
    }
    Ok(Outcome {
        outputs,
        ..Outcome::default()
    })
}
