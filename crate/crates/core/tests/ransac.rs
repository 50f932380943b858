use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trackvel::robust::{ransac_tracks, RansacConfig};
use trackvel::sim::{
    add_noise, generate_scene, run_trials, trial_rng, Estimator, NoiseConfig, OutlierConfig, SimConfig,
};
use trackvel::solver::SolveConfig;

fn ransac_config(threshold_deg: f64) -> RansacConfig {
    RansacConfig {
        inlier_threshold_deg: threshold_deg,
        ..RansacConfig::default()
    }
}

fn sim_config(outliers: f64, pixel_sigma: f64, threshold_deg: f64, trials: usize) -> SimConfig {
    SimConfig {
        noise: NoiseConfig::new(pixel_sigma, 0.0, 0.0),
        estimator: Estimator::Ransac {
            config: ransac_config(threshold_deg),
        },
        outliers: OutlierConfig {
            fraction: outliers,
            ..OutlierConfig::default()
        },
        trials,
        seed: 17,
        ..SimConfig::default()
    }
}

#[test]
fn refit_lowers_the_inlier_residual() {
    let stats = run_trials(&sim_config(0.2, 1.0, 0.5, 200)).unwrap();
    let pairs: Vec<(f64, f64)> = stats.outcomes.iter().filter_map(|o| o.residuals_deg).collect();
    assert_eq!(pairs.len(), stats.outcomes.len());
    let improved = pairs.iter().filter(|(hyp, refined)| refined <= hyp).count();
    assert!(
        improved as f64 >= 0.95 * pairs.len() as f64,
        "refit no worse on {improved}/{}",
        pairs.len()
    );
}

#[test]
fn clean_scenes_keep_most_tracks_at_the_default_threshold() {
    let stats = run_trials(&sim_config(0.0, 1.0, RansacConfig::default().inlier_threshold_deg, 200)).unwrap();
    let good = stats.outcomes.iter().filter(|o| o.inlier_ratio.unwrap() >= 0.9).count();
    assert!(good as f64 >= 0.95 * stats.trials as f64, "{good}/{}", stats.trials);
}

#[test]
fn track_order_does_not_change_the_result() {
    let cfg = sim_config(0.3, 1.0, 0.25, 1);
    for trial in 0..10 {
        let mut rng = trial_rng(3, trial);
        let scene = generate_scene(&cfg, &mut rng).unwrap();
        let (tracks, omega) = add_noise(&scene.tracks, &scene.truth.omega, &cfg.noise, &mut rng);
        let rc = RansacConfig { seed: trial, ..ransac_config(0.25) };
        let run = |tr: &[trackvel::geometry::Track]| {
            ransac_tracks(tr, &[omega], &scene.intrinsics, &scene.model, &SolveConfig::default(), &rc).unwrap()
        };
        let reference = run(&tracks);
        let mut shuffled = tracks.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(trial));
        let other = run(&shuffled);
        assert_eq!(reference.inlier_ids, other.inlier_ids);
        assert_eq!(reference.iterations_run, other.iterations_run);
        assert_eq!(reference.estimate.velocity(), other.estimate.velocity());
    }
}

#[test]
fn same_seed_same_result() {
    let cfg = sim_config(0.3, 1.0, 0.25, 40);
    let a = run_trials(&cfg).unwrap();
    let b = run_trials(&cfg).unwrap();
    assert_eq!(a, b);
    let c = run_trials(&SimConfig { seed: 18, ..cfg }).unwrap();
    assert_ne!(a.errors_deg, c.errors_deg);
}
