//! End-to-end checks of the pipeline against simulated markets.

use ivjump::eventstudy::{reference_redraws, StandardErrors, VariableKind, WindowSpec};
use ivjump::jumps::detect_jumps;
use ivjump::marketdata::{MarketData, MinuteOfDay, QuoteSource, Stamp};
use ivjump::pipeline::{analyse, build_surfaces, curves, detect, robustness, Analysis, AnalysisConfig};
use ivjump::simulator::{simulate_market, JumpSchedule, Response, SimConfig, SimOutput};
use ivjump::surface::{bin_centers, Maturity, SurfaceConfig};

fn morning(days: usize, jump_days: usize, seed: u64, response: Response) -> SimConfig {
    SimConfig {
        days,
        seed,
        schedule: JumpSchedule::Morning {
            days: jump_days,
            latest: MinuteOfDay::from_hm(10, 30),
        },
        jump_mean: 0.006,
        positive: response,
        negative: response,
        ..SimConfig::default()
    }
}

fn atm_config() -> AnalysisConfig {
    AnalysisConfig {
        maturities: vec![Maturity::ThreeMonth],
        pca_variables: false,
        windows: vec![5, 30, 60],
        include_modes: vec![false],
        redraw_windows: vec![30],
        ..AnalysisConfig::default()
    }
}

fn run(sim: &SimOutput, config: &AnalysisConfig) -> Analysis {
    analyse(sim, &sim.day_prices(), &sim.rates(), config).unwrap()
}

fn ks_uniform(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - i as f64 / n).abs().max(((i + 1) as f64 / n - v).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn no_jumps_planted_keeps_test_size() {
    let sim = simulate_market(&SimConfig {
        days: 1001,
        seed: 5,
        schedule: JumpSchedule::Poisson { intensity: 0.0 },
        ..SimConfig::default()
    })
    .unwrap();
    assert!(sim.truth().is_empty());
    let config = AnalysisConfig::default();
    let detection = detect(&sim.day_prices(), &config.jump, config.complete_until()).unwrap();
    let events = detect_jumps(&detection.statistics, config.jump.alpha);
    // Day 0 only fills the local-volatility window.
    let tested = sim.paths.len() - 1;
    let flagged = (1..sim.paths.len())
        .filter(|&d| events.iter().any(|e| e.day == sim.paths[d].day))
        .count();
    let alpha = config.jump.alpha;
    let limit = alpha + 2.0 * (alpha * (1.0 - alpha) / tested as f64).sqrt();
    let rate = flagged as f64 / tested as f64;
    assert!(rate <= limit, "{flagged}/{tested} days flagged, limit {limit:.4}");
}

#[test]
fn surfaces_recover_truth_without_spread() {
    let sim = simulate_market(&SimConfig {
        days: 3,
        half_spread: 0.0,
        ..SimConfig::default()
    })
    .unwrap();
    let prices = sim.day_prices();
    let run = build_surfaces(
        &sim,
        &prices,
        &sim.rates(),
        MinuteOfDay::from_hm(10, 0),
        &SurfaceConfig::default(),
        &Maturity::ALL,
        true,
    );
    assert_eq!(run.failed_minutes, 0);
    assert!(run.samples.len() > 3 * 3 * 25);
    let centers = bin_centers();
    let mut worst: f64 = 0.0;
    for sample in &run.samples {
        let truth = sim.smile_at(sample.stamp).unwrap();
        for (value, m) in sample.bins.iter().zip(centers) {
            worst = worst.max((value - truth.iv(m)).abs());
        }
        worst = worst.max((sample.atm - truth.iv(1.0)).abs());
    }
    assert!(worst < 1e-3, "worst bin error {worst:.2e}");
}

#[test]
fn zero_response_betas_stay_insignificant() {
    let mut quiet = [0usize; 2];
    let seeds = 20;
    for seed in 0..seeds {
        let sim = simulate_market(&morning(201, 80, 200 + seed, Response::NONE)).unwrap();
        let config = AnalysisConfig {
            windows: vec![30],
            ..atm_config()
        };
        let fit = &run(&sim, &config).regressions[0].fit;
        quiet[0] += usize::from(fit.p[1] > 0.05);
        quiet[1] += usize::from(fit.p[2] > 0.05);
    }
    assert!(quiet.iter().all(|&q| q >= 18), "p > 0.05 in {quiet:?} of {seeds} seeds");
}

#[test]
fn opposite_responses_give_opposite_signs() {
    let sim = simulate_market(&morning(301, 120, 3, Response { a0: 0.4, a1: 0.3, h: 5.0 })).unwrap();
    let analysis = run(&sim, &atm_config());
    for row in &analysis.regressions {
        let fit = &row.fit;
        assert!(fit.beta[1] < 0.0 && fit.beta[2] > 0.0, "W={}: {:?}", row.spec.window, fit.beta);
        assert!(fit.p[1] < 0.01 && fit.p[2] < 0.01);
    }
}

#[test]
fn planted_negative_curve_leaves_band_early() {
    let sim = simulate_market(&morning(301, 120, 4, Response { a0: 0.5, a1: 0.3, h: 5.0 })).unwrap();
    let config = atm_config();
    let analysis = run(&sim, &config);
    let sets = curves(&analysis.variables, &analysis.detection.labels, &config);
    let set = sets
        .iter()
        .find(|s| s.variable == VariableKind::AtmIv && !s.include_first)
        .unwrap();
    let exit = (1..=5).find(|&m| set.curves.negative[m] > set.band.upper[m]);
    assert!(exit.is_some(), "negative curve {:?}", &set.curves.negative[..=5]);
}

#[test]
#[ignore = "the band covers the reference mean only; jump-class means over fewer days leave it far more often than 15% of minutes"]
fn zero_response_curves_inside_band() {
    let sim = simulate_market(&morning(651, 300, 6, Response::NONE)).unwrap();
    let config = AnalysisConfig {
        include_modes: vec![true, false],
        ..atm_config()
    };
    let analysis = run(&sim, &config);
    for set in curves(&analysis.variables, &analysis.detection.labels, &config) {
        let minutes = set.band.lower.len();
        for (name, curve) in [
            ("positive", &set.curves.positive),
            ("negative", &set.curves.negative),
            ("reference", &set.curves.reference),
        ] {
            let inside = (0..minutes)
                .filter(|&m| curve[m] >= set.band.lower[m] - 1e-12 && curve[m] <= set.band.upper[m] + 1e-12)
                .count();
            let share = inside as f64 / minutes as f64;
            assert!(share >= 0.85, "{name} include={} inside {share:.2}", set.include_first);
        }
    }
}

#[test]
#[ignore = "re-draws share the fixed jump sample, so their p-values are strongly dependent and not uniform"]
fn null_redraw_pvalues_uniform() {
    let sim = simulate_market(&morning(651, 300, 7, Response::NONE)).unwrap();
    let config = atm_config();
    let analysis = run(&sim, &config);
    let labels = &analysis.detection.labels;
    let inputs = analysis
        .variables
        .inputs(labels, (VariableKind::AtmIv, Maturity::ThreeMonth), &config)
        .unwrap();
    let spec = WindowSpec {
        window: 30,
        include_first: false,
    };
    let summary = reference_redraws(&inputs, spec, 1000, 1, StandardErrors::Classical).unwrap();
    let mut p: Vec<f64> = summary.fits.iter().map(|f| f.p[2]).collect();
    let d = ks_uniform(&mut p);
    assert!(d < 0.05, "KS distance {d:.3}");
}

#[test]
fn robustness_drivers_run_on_simulated_market() {
    let sim = simulate_market(&morning(121, 50, 8, Response { a0: 0.5, a1: 0.3, h: 5.0 })).unwrap();
    let config = AnalysisConfig {
        redraws: 50,
        ..atm_config()
    };
    let analysis = run(&sim, &config);
    let report = robustness(&analysis, &sim.day_prices(), &config).unwrap();
    assert_eq!(report.alpha.len(), config.windows.len());
    // Surfaces stop at 11:30, short of the extended window.
    assert!(report.extended.is_empty());
    assert_eq!(report.redraws.len(), 1);
    assert_eq!(report.redraws[0].summary.iterations, 50);
    let again = robustness(&analysis, &sim.day_prices(), &config).unwrap();
    assert_eq!(report, again);

}

#[test]
fn full_smiles_feed_component_variables() {
    let sim = simulate_market(&morning(41, 15, 9, Response { a0: 0.5, a1: 0.3, h: 5.0 })).unwrap();
    let config = AnalysisConfig {
        windows: vec![5, 30],
        ..AnalysisConfig::default()
    };
    let analysis = run(&sim, &config);
    let variables = &analysis.variables;
    assert_eq!(variables.models.len(), Maturity::ALL.len());
    for cm in &variables.models {
        assert!(cm.model.rotated);
        assert_eq!(cm.model.loadings.ncols(), 3);
        assert!(cm.model.explained.iter().take(3).sum::<f64>() > 0.5);
        if let Some(regions) = &cm.regions {
            for kind in [VariableKind::AtmPc, VariableKind::OtmCallPc, VariableKind::OtmPutPc] {
                assert!(variables.series.contains_key(&(kind, cm.maturity)), "{kind} {regions:?}");
            }
        }
    }
    let expected = variables.series.len() * config.windows.len() * config.include_modes.len();
    assert_eq!(analysis.regressions.len(), expected);
}

#[test]
fn written_files_load_back() {
    let sim = simulate_market(&morning(4, 2, 10, Response { a0: 0.5, a1: 0.3, h: 5.0 })).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let until = MinuteOfDay::from_hm(9, 45);
    sim.write_files(dir.path(), until).unwrap();
    let data = MarketData::load(
        &dir.path().join("underlying.csv"),
        &dir.path().join("options.csv"),
        &dir.path().join("rates.csv"),
    )
    .unwrap();
    data.check_rates().unwrap();
    assert_eq!(data.days(), sim.days());
    assert_eq!(data.bars().len(), sim.bars().len());
    let stamp = Stamp::new(sim.paths[2].day, MinuteOfDay::from_hm(9, 40));
    let (loaded, direct) = (data.quotes_at(stamp), sim.quotes_at(stamp));
    assert_eq!(loaded.len(), direct.len());
    for (a, b) in loaded.iter().zip(&direct) {
        assert_eq!((a.expiry, a.right), (b.expiry, b.right));
        assert!((a.strike - b.strike).abs() <= 1e-9 * b.strike);
        assert!((a.mid() - b.mid()).abs() <= 1e-9 * b.mid().max(1.0));
    }
    let late = Stamp::new(sim.paths[2].day, MinuteOfDay::from_hm(9, 46));
    assert!(data.quotes_at(late).is_empty());
    let truth = std::fs::read_to_string(dir.path().join("truth.csv")).unwrap();
    assert_eq!(truth.lines().count(), 1 + sim.truth().len());
}
