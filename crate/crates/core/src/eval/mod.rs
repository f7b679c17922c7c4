//! Forecast metrics: top-fraction error, negative conditional
//! log-likelihood, minimum ADE/FDE, branch coverage and sampling speed.

mod baseline;

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use baseline::GaussianBaseline;

use crate::config::{join_f64, ConfigError, KvMap};
use crate::data::{Branch, Example};
use crate::haar::Trajectory;
use crate::model::{batch_trajectories, HbaFlowModel, ModelError};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("horizon step {step} is beyond the {len}-step future")]
    Horizon { step: usize, len: usize },
    #[error("expected {expected} samples, got {got}")]
    SampleCount { expected: usize, got: usize },
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_pair(gt: &Trajectory, s: &Trajectory) -> Result<(), EvalError> {
    if s.len() != gt.len() || s.dim() != gt.dim() {
        return Err(EvalError::Input(format!(
            "sample of {}x{} against ground truth {}x{}",
            s.len(),
            s.dim(),
            gt.len(),
            gt.dim()
        )));
    }
    Ok(())
}

/// Per-step Euclidean distances between a sample and the ground truth.
fn step_errors(gt: &Trajectory, s: &Trajectory) -> Vec<f64> {
    (0..gt.len()).map(|t| dist(gt.point(t), s.point(t))).collect()
}

/// Mean error of the best `⌈n·fraction⌉` samples at each 1-based horizon step.
///
/// Samples are ranked by their mean error over the whole future; with
/// `per_horizon_ranking` each horizon ranks independently instead.
pub fn top_fraction_error(
    gt: &Trajectory,
    samples: &[Trajectory],
    fraction: f64,
    horizons: &[usize],
    per_horizon_ranking: bool,
) -> Result<Vec<f64>, EvalError> {
    let keep = (samples.len() as f64 * fraction).ceil() as usize;
    if !(fraction > 0.0 && fraction <= 1.0) || keep == 0 {
        return Err(EvalError::Input(format!(
            "fraction {fraction} of {} samples keeps nothing",
            samples.len()
        )));
    }
    if let Some(&h) = horizons.iter().find(|&&h| h == 0 || h > gt.len()) {
        return Err(EvalError::Horizon { step: h, len: gt.len() });
    }
    let mut errs = Vec::with_capacity(samples.len());
    for s in samples {
        check_pair(gt, s)?;
        errs.push(step_errors(gt, s));
    }
    let best = |key: &dyn Fn(&Vec<f64>) -> f64| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..errs.len()).collect();
        idx.sort_by(|&a, &b| key(&errs[a]).total_cmp(&key(&errs[b])).then(a.cmp(&b)));
        idx.truncate(keep);
        idx
    };
    let overall = best(&|e: &Vec<f64>| e.iter().sum::<f64>() / e.len() as f64);
    Ok(horizons
        .iter()
        .map(|&h| {
            let chosen = if per_horizon_ranking {
                best(&|e: &Vec<f64>| e[h - 1])
            } else {
                overall.clone()
            };
            chosen.iter().map(|&i| errs[i][h - 1]).sum::<f64>() / keep as f64
        })
        .collect())
}

/// Minimum average and final displacement errors over exactly `required` samples.
pub fn min_ade_fde(gt: &Trajectory, samples: &[Trajectory], required: usize) -> Result<(f64, f64), EvalError> {
    if samples.len() != required {
        return Err(EvalError::SampleCount {
            expected: required,
            got: samples.len(),
        });
    }
    let mut ade = f64::INFINITY;
    let mut fde = f64::INFINITY;
    for s in samples {
        check_pair(gt, s)?;
        let e = step_errors(gt, s);
        ade = ade.min(e.iter().sum::<f64>() / e.len() as f64);
        fde = fde.min(*e.last().expect("non-empty"));
    }
    Ok((ade, fde))
}

/// Assigns a future to the nearest intersection branch by the turn angle
/// between the approach heading and the final displacement.
#[derive(Clone, Copy, Debug, Default)]
pub struct BranchClassifier;

impl BranchClassifier {
    pub fn classify(&self, past: &Trajectory, future: &Trajectory) -> Branch {
        let (a, b) = (past.point(0), past.last_point());
        let heading = (b[0] - a[0], b[1] - a[1]);
        let end = future.last_point();
        let disp = (end[0] - b[0], end[1] - b[1]);
        let turn = (heading.0 * disp.1 - heading.1 * disp.0).atan2(heading.0 * disp.0 + heading.1 * disp.1);
        Branch::ALL
            .into_iter()
            .min_by(|p, q| {
                let dp = (turn - p.angle()).abs();
                let dq = (turn - q.angle()).abs();
                dp.total_cmp(&dq)
            })
            .expect("three branches")
    }
}

/// Fraction of futures assigned to each branch (straight, left, right).
pub fn mode_coverage<'a>(pairs: impl IntoIterator<Item = (&'a Trajectory, &'a Trajectory)>) -> [f64; 3] {
    let c = BranchClassifier;
    let mut counts = [0usize; 3];
    let mut n = 0;
    for (x, y) in pairs {
        counts[c.classify(x, y).index()] += 1;
        n += 1;
    }
    counts.map(|k| if n == 0 { 0.0 } else { k as f64 / n as f64 })
}

/// Anything that scores and samples futures given an observed past,
/// in normalized coordinates.
pub trait Forecaster {
    fn log_likelihoods(&self, examples: &[&Example]) -> Result<Vec<f64>, EvalError>;
    fn sample_futures(
        &self,
        x: &Trajectory,
        n: usize,
        t_future: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Trajectory>, EvalError>;
}

impl Forecaster for HbaFlowModel {
    fn log_likelihoods(&self, examples: &[&Example]) -> Result<Vec<f64>, EvalError> {
        let mut out = Vec::with_capacity(examples.len());
        for c in examples.chunks(128) {
            let y = batch_trajectories(c.iter().map(|e| &e.y))?;
            let x = batch_trajectories(c.iter().map(|e| &e.x))?;
            out.extend(self.log_likelihood_batch(&y, &x)?);
        }
        Ok(out)
    }

    fn sample_futures(
        &self,
        x: &Trajectory,
        n: usize,
        t_future: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Trajectory>, EvalError> {
        let xa = batch_trajectories(std::iter::repeat_n(x, n))?;
        let (y, _) = self.sample_batch(&xa, t_future, 1.0, rng)?;
        (0..n)
            .map(|i| Trajectory::from_channel_major(&y, i, x.dt()).map_err(|e| EvalError::Input(e.to_string())))
            .collect()
    }
}

/// Mean negative log-likelihood in normalized units, and the constant that
/// converts it to scene units (`T·d·log(scale)`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NegativeCll {
    pub nats: f64,
    pub scene_offset: f64,
}

/// Additive constant from normalized to scene-unit NLL.
pub fn cll_conversion(t_fut: usize, dim: usize, scale: f64) -> f64 {
    (t_fut * dim) as f64 * scale.ln()
}

pub fn negative_cll(model: &dyn Forecaster, examples: &[&Example]) -> Result<NegativeCll, EvalError> {
    let first = examples.first().ok_or_else(|| EvalError::Input("empty test set".into()))?;
    let ll = model.log_likelihoods(examples)?;
    Ok(NegativeCll {
        nats: -ll.iter().sum::<f64>() / ll.len() as f64,
        scene_offset: cll_conversion(first.y.len(), first.y.dim(), first.scale),
    })
}

/// Wall-clock sampling statistics for one batch size.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingBenchmark {
    pub median_ms: f64,
    pub iqr_ms: f64,
    pub stages: usize,
    pub batch: usize,
    pub runs_ms: Vec<f64>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Time `repeats` draws of `batch` futures for one past (after one warm-up draw).
pub fn benchmark_sampling(
    model: &HbaFlowModel,
    x: &Trajectory,
    batch: usize,
    repeats: usize,
    t_future: usize,
    seed: u64,
) -> Result<SamplingBenchmark, EvalError> {
    if repeats == 0 || batch == 0 {
        return Err(EvalError::Input("benchmark needs positive batch and repeats".into()));
    }
    let xa = batch_trajectories(std::iter::repeat_n(x, batch))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, trace) = model.sample_batch(&xa, t_future, 1.0, &mut rng)?;
    let mut runs = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        model.sample_batch(&xa, t_future, 1.0, &mut rng)?;
        runs.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mut sorted = runs.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(SamplingBenchmark {
        median_ms: quantile(&sorted, 0.5),
        iqr_ms: quantile(&sorted, 0.75) - quantile(&sorted, 0.25),
        stages: trace.stages,
        batch,
        runs_ms: runs,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Horizons in seconds; converted to steps with the data timestep.
    pub horizons: Vec<f64>,
    pub samples: usize,
    pub fraction: f64,
    pub min_samples: usize,
    pub per_horizon_ranking: bool,
    pub bench: bool,
    pub bench_repeats: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            horizons: vec![1.0, 2.0, 3.0, 4.0],
            samples: 50,
            fraction: 0.1,
            min_samples: 20,
            per_horizon_ranking: false,
            bench: false,
            bench_repeats: 10,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("eval.horizons", join_f64(&self.horizons));
        kv.set("eval.samples", self.samples);
        kv.set("eval.fraction", format!("{:?}", self.fraction));
        kv.set("eval.min_samples", self.min_samples);
        kv.set("eval.per_horizon_ranking", self.per_horizon_ranking);
        kv.set("eval.bench", self.bench);
        kv.set("eval.bench_repeats", self.bench_repeats);
        kv.set("eval.seed", self.seed);
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self, ConfigError> {
        let d = Self::default();
        Ok(Self {
            horizons: kv.get_list("eval.horizons")?.unwrap_or(d.horizons),
            samples: kv.get_or("eval.samples", d.samples)?,
            fraction: kv.get_or("eval.fraction", d.fraction)?,
            min_samples: kv.get_or("eval.min_samples", d.min_samples)?,
            per_horizon_ranking: kv.get_or("eval.per_horizon_ranking", d.per_horizon_ranking)?,
            bench: kv.get_or("eval.bench", d.bench)?,
            bench_repeats: kv.get_or("eval.bench_repeats", d.bench_repeats)?,
            seed: kv.get_or("eval.seed", d.seed)?,
        })
    }
}

/// Metrics for one test set. Distances are in scene units, NLL in
/// normalized units (add `cll_scene_offset` for scene units).
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub horizons: Vec<f64>,
    pub top_errors: Vec<f64>,
    pub neg_cll: f64,
    pub cll_scene_offset: f64,
    pub made: f64,
    pub mfde: f64,
    pub coverage: [f64; 3],
    pub sampling_ms: Option<f64>,
    pub samples: usize,
    pub min_samples: usize,
    pub examples: usize,
    pub seed: u64,
}

impl MetricReport {
    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("units.distance", "scene");
        kv.set("units.neg_cll", "nats, normalized coordinates");
        for (h, e) in self.horizons.iter().zip(&self.top_errors) {
            kv.set(format!("top_error@{h}s"), format!("{e:?}"));
        }
        kv.set("neg_cll", format!("{:?}", self.neg_cll));
        kv.set("neg_cll.scene_offset", format!("{:?}", self.cll_scene_offset));
        kv.set("made", format!("{:?}", self.made));
        kv.set("mfde", format!("{:?}", self.mfde));
        kv.set("coverage", join_f64(&self.coverage));
        if let Some(ms) = self.sampling_ms {
            kv.set("sampling_ms_batch128", format!("{ms:?}"));
        }
        kv.set("samples", self.samples);
        kv.set("min_samples", self.min_samples);
        kv.set("examples", self.examples);
        kv.set("seed", self.seed);
        kv
    }

    pub fn csv_header(&self) -> String {
        let mut cols: Vec<String> = self.horizons.iter().map(|h| format!("top_error@{h}s")).collect();
        cols.extend(
            ["neg_cll", "neg_cll_scene_offset", "made", "mfde", "cov_straight", "cov_left", "cov_right", "sampling_ms", "samples", "min_samples", "examples", "seed"]
                .map(String::from),
        );
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols: Vec<String> = self.top_errors.iter().map(|e| format!("{e:?}")).collect();
        cols.push(format!("{:?}", self.neg_cll));
        cols.push(format!("{:?}", self.cll_scene_offset));
        cols.push(format!("{:?}", self.made));
        cols.push(format!("{:?}", self.mfde));
        cols.extend(self.coverage.iter().map(|c| format!("{c:?}")));
        cols.push(self.sampling_ms.map_or(String::new(), |m| format!("{m:?}")));
        cols.push(self.samples.to_string());
        cols.push(self.min_samples.to_string());
        cols.push(self.examples.to_string());
        cols.push(self.seed.to_string());
        cols.join(",")
    }

    /// Unweighted mean over folds.
    pub fn aggregate(reports: &[MetricReport]) -> Result<MetricReport, EvalError> {
        let first = reports.first().ok_or_else(|| EvalError::Input("no reports to aggregate".into()))?;
        let n = reports.len() as f64;
        let mean = |f: &dyn Fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let timed: Vec<f64> = reports.iter().filter_map(|r| r.sampling_ms).collect();
        Ok(MetricReport {
            horizons: first.horizons.clone(),
            top_errors: (0..first.top_errors.len()).map(|i| mean(&|r| r.top_errors[i])).collect(),
            neg_cll: mean(&|r| r.neg_cll),
            cll_scene_offset: mean(&|r| r.cll_scene_offset),
            made: mean(&|r| r.made),
            mfde: mean(&|r| r.mfde),
            coverage: [0, 1, 2].map(|i| mean(&|r| r.coverage[i])),
            sampling_ms: (timed.len() == reports.len()).then(|| timed.iter().sum::<f64>() / n),
            samples: first.samples,
            min_samples: first.min_samples,
            examples: reports.iter().map(|r| r.examples).sum(),
            seed: first.seed,
        })
    }
}

/// Every metric over `test`, sampling each example with a seed derived from
/// `cfg.seed` and its index.
pub fn evaluate(model: &dyn Forecaster, test: &[&Example], cfg: &EvalConfig) -> Result<MetricReport, EvalError> {
    let first = test.first().ok_or_else(|| EvalError::Input("empty test set".into()))?;
    let dt = first.y.dt();
    let steps: Vec<usize> = cfg.horizons.iter().map(|h| (h / dt).round() as usize).collect();
    let n = cfg.samples.max(cfg.min_samples);
    let mut top = vec![0.0; steps.len()];
    let (mut ade, mut fde) = (0.0, 0.0);
    let mut cover = [0.0; 3];
    for (i, ex) in test.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
        let norm = model.sample_futures(&ex.x, n, ex.y.len(), &mut rng)?;
        let scene: Vec<Trajectory> = norm.iter().map(|s| ex.denormalize(s)).collect();
        let gt = ex.denormalize(&ex.y);
        let e = top_fraction_error(&gt, &scene[..cfg.samples], cfg.fraction, &steps, cfg.per_horizon_ranking)?;
        top.iter_mut().zip(e).for_each(|(t, v)| *t += v);
        let (a, f) = min_ade_fde(&gt, &scene[..cfg.min_samples], cfg.min_samples)?;
        ade += a;
        fde += f;
        let c = mode_coverage(norm.iter().map(|s| (&ex.x, s)));
        cover.iter_mut().zip(c).for_each(|(t, v)| *t += v);
    }
    let m = test.len() as f64;
    let cll = negative_cll(model, test)?;
    Ok(MetricReport {
        horizons: cfg.horizons.clone(),
        top_errors: top.into_iter().map(|t| t / m).collect(),
        neg_cll: cll.nats,
        cll_scene_offset: cll.scene_offset,
        made: ade / m,
        mfde: fde / m,
        coverage: cover.map(|c| c / m),
        sampling_ms: None,
        samples: cfg.samples,
        min_samples: cfg.min_samples,
        examples: test.len(),
        seed: cfg.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(offset: f64, len: usize) -> Trajectory {
        Trajectory::new((0..len).flat_map(|t| [t as f64, offset]).collect(), 2, 1.0).unwrap()
    }

    #[test]
    fn constant_offset_errors() {
        let gt = line(0.0, 4);
        let samples: Vec<_> = (0..5).map(|_| line(0.5, 4)).collect();
        assert_eq!(top_fraction_error(&gt, &samples, 0.2, &[1, 4], false).unwrap(), vec![0.5, 0.5]);
        assert_eq!(min_ade_fde(&gt, &samples, 5).unwrap(), (0.5, 0.5));
        assert!(matches!(min_ade_fde(&gt, &samples, 20), Err(EvalError::SampleCount { .. })));
        assert!(matches!(
            top_fraction_error(&gt, &samples, 0.2, &[5], false),
            Err(EvalError::Horizon { step: 5, len: 4 })
        ));
    }

    #[test]
    fn straight_futures_are_classified_straight() {
        let past = Trajectory::new(vec![-2.0, 0.0, -1.0, 0.0, 0.0, 0.0], 2, 1.0).unwrap();
        let straight = Trajectory::new(vec![1.0, 0.0, 2.0, 0.0], 2, 1.0).unwrap();
        let left = Trajectory::new(vec![0.0, 1.0, 0.0, 2.0], 2, 1.0).unwrap();
        let right = Trajectory::new(vec![0.0, -1.0, 0.0, -2.0], 2, 1.0).unwrap();
        assert_eq!(mode_coverage([(&past, &straight), (&past, &straight)]), [1.0, 0.0, 0.0]);
        assert_eq!(mode_coverage([(&past, &left), (&past, &right)]), [0.0, 0.5, 0.5]);
    }

    #[test]
    fn unit_conversion() {
        assert!((cll_conversion(2, 1, 2.0) - 2.0 * 2f64.ln()).abs() < 1e-15);
    }
}
