mod common;

use hba_flow::data::{generate_synthetic, window_and_normalize, Branch, Example, SyntheticScenarioConfig, WindowConfig};
use hba_flow::eval::{
    benchmark_sampling, cll_conversion, evaluate, min_ade_fde, mode_coverage, negative_cll, top_fraction_error,
    BranchClassifier, EvalConfig, EvalError, Forecaster, GaussianBaseline, MetricReport,
};
use hba_flow::haar::Trajectory;
use hba_flow::model::{HbaFlowModel, PriorKind};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// `T x 2` trajectory with a constant offset `r` along y from the line `(t, 0)`.
fn shifted(len: usize, r: f64) -> Trajectory {
    Trajectory::new((0..len).flat_map(|t| [t as f64, r]).collect(), 2, 0.25).unwrap()
}

fn from_points(pts: &[[f64; 2]]) -> Trajectory {
    Trajectory::new(pts.iter().flatten().copied().collect(), 2, 0.25).unwrap()
}

#[test]
fn top_fraction_ranking_oracle() {
    let gt = shifted(6, 0.0);
    let offsets = [0.9, 0.3, 1.7, 0.05, 2.2, 0.6, 1.1, 0.45, 3.0, 0.8];
    let samples: Vec<_> = offsets.iter().map(|&r| shifted(6, r)).collect();
    let e = top_fraction_error(&gt, &samples, 0.2, &[1, 3, 6], false).unwrap();
    let want = (0.05 + 0.3) / 2.0;
    for v in e {
        assert!((v - want).abs() < 1e-15);
    }
    // gt kept alone among 50
    let mut many: Vec<_> = (1..50).map(|i| shifted(6, i as f64 * 0.1)).collect();
    many.push(gt.clone());
    assert_eq!(top_fraction_error(&gt, &many, 0.02, &[1, 6], false).unwrap(), vec![0.0, 0.0]);
    assert!(matches!(
        top_fraction_error(&gt, &samples, 0.1, &[7], false),
        Err(EvalError::Horizon { step: 7, len: 6 })
    ));
}

#[test]
fn min_ade_fde_enumeration_oracle() {
    let gt = from_points(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]);
    // per-step distances: a (1, 1, 1), b (0, 0, 3), c (2, 0.5, 0.5)
    let a = from_points(&[[0.0, 1.0], [1.0, 1.0], [2.0, 1.0]]);
    let b = from_points(&[[0.0, 0.0], [1.0, 0.0], [2.0, 3.0]]);
    let c = from_points(&[[2.0, 0.0], [1.0, 0.5], [2.0, -0.5]]);
    let (made, mfde) = min_ade_fde(&gt, &[a.clone(), b.clone(), c.clone()], 3).unwrap();
    assert!((made - 1.0).abs() < 1e-15);
    assert!((mfde - 0.5).abs() < 1e-15);
    assert_eq!(min_ade_fde(&gt, &[a, gt.clone(), c], 3).unwrap(), (0.0, 0.0));
    let same: Vec<_> = (0..20).map(|_| shifted(3, 0.7)).collect();
    let (m, f) = min_ade_fde(&shifted(3, 0.0), &same, 20).unwrap();
    assert!((m - 0.7).abs() < 1e-15 && (f - 0.7).abs() < 1e-15);
    assert!(matches!(
        min_ade_fde(&gt, &[b], 20),
        Err(EvalError::SampleCount { expected: 20, got: 1 })
    ));
}

proptest! {
    #[test]
    fn keeping_fewer_samples_never_hurts(offsets in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 20)) {
        let gt = shifted(4, 0.0);
        let samples: Vec<_> = offsets
            .iter()
            .map(|o| Trajectory::new((0..4).flat_map(|t| [t as f64, o[t]]).collect(), 2, 0.25).unwrap())
            .collect();
        let all: Vec<usize> = (1..=4).collect();
        let mut prev_mean = f64::INFINITY;
        let mut prev_h = [f64::INFINITY; 4];
        for frac in [1.0, 0.5, 0.25, 0.1, 0.05] {
            // overall ranking: the full-trajectory mean is monotone
            let e = top_fraction_error(&gt, &samples, frac, &all, false).unwrap();
            let mean = e.iter().sum::<f64>() / 4.0;
            prop_assert!(mean <= prev_mean + 1e-12);
            prev_mean = mean;
            // per-horizon ranking: each horizon is monotone
            let h = top_fraction_error(&gt, &samples, frac, &all, true).unwrap();
            for i in 0..4 {
                prop_assert!(h[i] <= prev_h[i] + 1e-12);
                prev_h[i] = h[i];
            }
        }
        let (made, mfde) = min_ade_fde(&gt, &samples, 20).unwrap();
        for s in &samples {
            let d: Vec<f64> = (0..4).map(|t| (s.point(t)[1]).abs()).collect();
            prop_assert!(made <= d.iter().sum::<f64>() / 4.0 + 1e-12);
            prop_assert!(mfde <= d[3] + 1e-12);
        }
    }
}

#[test]
fn classifier_and_coverage() {
    let past = from_points(&[[-3.0, 0.0], [-2.0, 0.0], [-1.0, 0.0], [0.0, 0.0]]);
    let straight = from_points(&[[1.0, 0.0], [2.0, 0.1]]);
    let left = from_points(&[[0.0, 1.0], [0.1, 2.0]]);
    let right = from_points(&[[0.0, -1.0], [0.0, -2.0]]);
    let c = BranchClassifier;
    assert_eq!(c.classify(&past, &straight), Branch::Straight);
    assert_eq!(c.classify(&past, &left), Branch::Left);
    assert_eq!(c.classify(&past, &right), Branch::Right);
    let all_straight = vec![straight.clone(); 7];
    assert_eq!(mode_coverage(all_straight.iter().map(|s| (&past, s))), [1.0, 0.0, 0.0]);
    let mix = [straight, left.clone(), left, right];
    assert_eq!(mode_coverage(mix.iter().map(|s| (&past, s))), [0.25, 0.5, 0.25]);
}

#[test]
fn generator_samples_cover_configured_modes() {
    let cfg = SyntheticScenarioConfig {
        count: 1000,
        seed: 12,
        ..Default::default()
    };
    let data = generate_synthetic(&cfg).unwrap();
    let ds = window_and_normalize(&data.tracks, &WindowConfig::default()).unwrap();
    let cov = mode_coverage(ds.examples.iter().map(|e| (&e.x, &e.y)));
    for i in 0..3 {
        assert!((cov[i] - cfg.probs[i]).abs() < 0.05, "{cov:?}");
    }
    // the classifier agrees with the generator's labels
    let c = BranchClassifier;
    for (e, b) in ds.examples.iter().zip(&data.branches) {
        assert_eq!(c.classify(&e.x, &e.y), *b);
    }
}

/// Exact conditional density `y_t = x_last + (t + 1, 0) + σ_t ε_t` (d = 2, T = 2).
struct ToyGaussian {
    sigma: [f64; 2],
}

impl ToyGaussian {
    fn mean(&self, x: &Trajectory) -> [f64; 4] {
        let p = x.last_point();
        [p[0] + 1.0, p[1], p[0] + 2.0, p[1]]
    }

    fn sd(&self, i: usize) -> f64 {
        self.sigma[i / 2]
    }

    fn entropy(&self) -> f64 {
        (0..4)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * self.sd(i).powi(2)).ln())
            .sum()
    }
}

impl Forecaster for ToyGaussian {
    fn log_likelihoods(&self, examples: &[&Example]) -> Result<Vec<f64>, EvalError> {
        Ok(examples
            .iter()
            .map(|e| {
                let m = self.mean(&e.x);
                (0..4)
                    .map(|i| {
                        let z = (e.y.values()[i] - m[i]) / self.sd(i);
                        -0.5 * z * z - self.sd(i).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
                    })
                    .sum()
            })
            .collect())
    }

    fn sample_futures(&self, x: &Trajectory, n: usize, _t: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Trajectory>, EvalError> {
        let m = self.mean(x);
        Ok((0..n)
            .map(|_| {
                let v = (0..4).map(|i| m[i] + self.sd(i) * rng.sample::<f64, _>(StandardNormal)).collect();
                Trajectory::new(v, 2, 1.0).unwrap()
            })
            .collect())
    }
}

fn toy_examples(toy: &ToyGaussian, n: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let xt = Trajectory::new(x, 2, 1.0).unwrap();
            let y = toy.sample_futures(&xt, 1, 2, &mut rng).unwrap().remove(0);
            Example {
                track_id: i as u64,
                start: 0,
                x: xt,
                y,
                offset: [0.0, 0.0],
                scale: 1.0,
            }
        })
        .collect()
}

#[test]
fn negative_cll_of_the_generator_is_its_entropy() {
    let toy = ToyGaussian { sigma: [0.3, 0.8] };
    let ex = toy_examples(&toy, 20_000, 1);
    let refs: Vec<_> = ex.iter().collect();
    let cll = negative_cll(&toy, &refs).unwrap();
    assert!((cll.nats - toy.entropy()).abs() < 0.05, "{} vs {}", cll.nats, toy.entropy());
    let doubled: Vec<_> = refs.iter().chain(&refs).copied().collect();
    assert!((negative_cll(&toy, &doubled).unwrap().nats - cll.nats).abs() < 1e-12);

    // a fitted model cannot beat the generator beyond Monte Carlo noise
    let train = toy_examples(&toy, 200, 2);
    let fit = GaussianBaseline::fit(&train.iter().collect::<Vec<_>>(), 1e-6, 1e-9).unwrap();
    let lls = toy.log_likelihoods(&refs).unwrap();
    let fit_lls = fit.log_likelihoods(&refs).unwrap();
    let diffs: Vec<f64> = lls.iter().zip(&fit_lls).map(|(a, b)| a - b).collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(mean >= -3.0 * sd / n.sqrt());
}

#[test]
fn scene_unit_conversion() {
    assert!((cll_conversion(2, 1, 2.0) - 2.0 * 2f64.ln()).abs() < 1e-15);
    assert_eq!(cll_conversion(16, 2, 1.0), 0.0);
}

#[test]
fn baseline_recovers_a_linear_gaussian() {
    let toy = ToyGaussian { sigma: [0.2, 0.4] };
    let train = toy_examples(&toy, 4000, 5);
    let fit = GaussianBaseline::fit(&train.iter().collect::<Vec<_>>(), 1e-8, 1e-12).unwrap();
    let x = Trajectory::new(vec![0.2, -0.1, 0.5, 0.3, -0.4, 0.7], 2, 1.0).unwrap();
    let m = fit.mean(&x);
    let want = toy.mean(&x);
    for i in 0..4 {
        assert!((m[i] - want[i]).abs() < 0.05, "{m}");
    }
}

#[test]
fn sampling_benchmark_counts_stages() {
    for (t, k) in [(16usize, 4usize), (32, 5)] {
        let m = HbaFlowModel::new(common::tiny_config(t, k, PriorKind::Hba, 0.5)).unwrap();
        let x = common::traj(vec![0.0; 3], 1);
        let b = benchmark_sampling(&m, &x, 8, 1, t, 0).unwrap();
        assert_eq!(b.stages, k + 1);
        assert_eq!(b.runs_ms.len(), 1);
        assert!(b.median_ms.is_finite() && b.median_ms >= 0.0);
    }
}

#[test]
fn evaluation_is_reproducible_and_aggregates() {
    let toy = ToyGaussian { sigma: [0.3, 0.3] };
    let ex = toy_examples(&toy, 30, 3);
    let refs: Vec<_> = ex.iter().collect();
    let cfg = EvalConfig {
        horizons: vec![1.0, 2.0],
        samples: 20,
        min_samples: 20,
        fraction: 0.1,
        ..Default::default()
    };
    let a = evaluate(&toy, &refs[..15], &cfg).unwrap();
    let b = evaluate(&toy, &refs[..15], &cfg).unwrap();
    assert_eq!(a.to_kv().to_text(), b.to_kv().to_text());
    assert!(a.sampling_ms.is_none());
    assert_eq!(a.to_kv().raw("seed"), Some("0"));
    assert_eq!(a.to_kv().raw("samples"), Some("20"));
    let c = evaluate(&toy, &refs[15..], &cfg).unwrap();
    let agg = MetricReport::aggregate(&[a.clone(), c.clone()]).unwrap();
    assert!((agg.neg_cll - (a.neg_cll + c.neg_cll) / 2.0).abs() < 1e-15);
    assert!((agg.top_errors[1] - (a.top_errors[1] + c.top_errors[1]) / 2.0).abs() < 1e-15);
    assert_eq!(agg.examples, 30);
    assert_eq!(a.csv_header().split(',').count(), a.csv_row().split(',').count());
}
