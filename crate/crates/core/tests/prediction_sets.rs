use ducs_core::conformal::{
    calibrate, coverage_of_scores, empirical_coverage, mc_dropout_set, score_episodes, CalibrationResult, Scheme,
};
use ducs_core::duf::init_scorer;
use ducs_core::mathcore::{ParamStore, RngStream};
use ducs_core::model::{init_params, ModelConfig};
use ducs_core::synth::{gen_stream, Episode, StreamSpec, TrajectorySpec};

fn setup(mask_ratio: f64, dropout_rate: f64) -> (ModelConfig, ParamStore, ParamStore, Vec<Episode>) {
    let traj = TrajectorySpec {
        t: 8,
        d_theta: 3,
        d_beta: 1,
        m: 6,
        ..TrajectorySpec::default()
    };
    let cfg = ModelConfig {
        mask_ratio,
        dropout_rate,
        local_window: 2,
        d_embed: 12,
        d_global: 6,
        enc_hidden: 8,
        d_feat: 4,
        global_hidden: 8,
        temporal_radius: 1,
        ..ModelConfig::for_trajectory(&traj)
    };
    let model = init_params(&cfg, &mut RngStream::new(1)).unwrap();
    let scorer = init_scorer(cfg.d_embed, cfg.output_width(), 8, &mut RngStream::new(2)).unwrap();
    let episodes = gen_stream(&StreamSpec::iid(30, traj), &mut RngStream::new(3)).unwrap();
    (cfg, model, scorer, episodes)
}

fn threshold(tau_star: f64) -> CalibrationResult {
    CalibrationResult {
        alpha: 0.1,
        tau_star,
        scheme: Scheme::Uniform,
        rho: 1.0,
        temperature: 1.0,
        n: 10,
        seed: None,
        created_at: None,
    }
}

#[test]
fn infinite_threshold_admits_every_hypothesis() {
    let (cfg, model, scorer, eps) = setup(0.25, 0.1);
    let set = mc_dropout_set(
        &eps[0].observations,
        7,
        &threshold(f64::INFINITY),
        &cfg,
        &model,
        &scorer,
        &mut RngStream::new(4),
    )
    .unwrap();
    assert_eq!(set.hypotheses.len(), 7);
    assert_eq!(set.len(), 7);
    assert!(set.members.iter().all(|&m| m));

    let none = mc_dropout_set(
        &eps[0].observations,
        7,
        &threshold(-1.0),
        &cfg,
        &model,
        &scorer,
        &mut RngStream::new(4),
    )
    .unwrap();
    assert!(none.is_empty());
}

#[test]
fn sets_are_seeded_and_stochastic() {
    let (cfg, model, scorer, eps) = setup(0.25, 0.1);
    let cal = threshold(0.5);
    let x = &eps[1].observations;
    let a = mc_dropout_set(x, 5, &cal, &cfg, &model, &scorer, &mut RngStream::new(9)).unwrap();
    let b = mc_dropout_set(x, 5, &cal, &cfg, &model, &scorer, &mut RngStream::new(9)).unwrap();
    assert_eq!(a, b);
    let distinct = a.hypotheses.windows(2).any(|w| w[0].0 != w[1].0);
    assert!(distinct, "masking and dropout should vary the hypotheses");
}

#[test]
fn no_stochasticity_gives_identical_hypotheses() {
    let (cfg, model, scorer, eps) = setup(0.0, 0.0);
    let scores: Vec<f64> = (0..3)
        .map(|_| {
            let set = mc_dropout_set(
                &eps[2].observations,
                4,
                &threshold(0.5),
                &cfg,
                &model,
                &scorer,
                &mut RngStream::new(5),
            )
            .unwrap();
            assert!(set.hypotheses.iter().all(|h| h == &set.hypotheses[0]));
            assert!(set.len() == 0 || set.len() == 4);
            set.hypotheses[0].1
        })
        .collect();
    assert!(scores.iter().all(|&s| s == scores[0]));
}

#[test]
fn scored_calibration_reaches_nominal_coverage_on_itself() {
    let (cfg, model, scorer, eps) = setup(0.25, 0.1);
    let (cal_eps, test_eps) = eps.split_at(20);
    let examples = score_episodes(cal_eps, &cfg, &model, &scorer).unwrap();
    assert!(examples.iter().all(|e| e.phi_pred.is_some() && e.phi_gt.is_some()));
    let cal = calibrate(&examples, 0.2, Scheme::Uniform, 1.0, 1.0).unwrap();
    let own: Vec<f64> = examples.iter().map(|e| e.score).collect();
    // The threshold is an order statistic of the calibration scores.
    assert!(coverage_of_scores(&own, &cal).unwrap().coverage >= 0.8);
    let weighted = calibrate(&examples, 0.2, Scheme::FeatureDecay, 0.9, 1.0).unwrap();
    assert_eq!(weighted.n, 20);
    let report = empirical_coverage(test_eps, &cal, &cfg, &model, &scorer).unwrap();
    assert_eq!(report.n_test, 10);
    assert!(empirical_coverage(&[], &cal, &cfg, &model, &scorer).is_err());
}
