//! Trajectory datasets: a synthetic branching-intersection generator, CSV
//! track I/O, windowing into (past, future) pairs with normalization, and
//! track-level fold splits.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{ConfigError, KvMap};
use crate::haar::{self, HaarError, Trajectory};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid {field}: {reason}")]
    Config { field: String, reason: String },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("track {track}: timestamps are not strictly increasing")]
    Order { track: u64 },
    #[error("{0}")]
    Split(String),
    #[error(transparent)]
    Haar(#[from] HaarError),
    #[error(transparent)]
    KeyValue(#[from] ConfigError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn config_error(field: &str, reason: impl Into<String>) -> DataError {
    DataError::Config {
        field: field.into(),
        reason: reason.into(),
    }
}

/// A timestamped 2-D track.
#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub id: u64,
    pub times: Vec<f64>,
    /// `[x0, y0, x1, y1, ...]`
    pub positions: Vec<f64>,
}

impl Track {
    pub fn new(id: u64, times: Vec<f64>, positions: Vec<f64>) -> Result<Self, DataError> {
        if positions.len() != 2 * times.len() {
            return Err(config_error("track", format!("{} times but {} coordinates", times.len(), positions.len())));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(DataError::Order { track: id });
        }
        Ok(Self { id, times, positions })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn point(&self, i: usize) -> [f64; 2] {
        [self.positions[2 * i], self.positions[2 * i + 1]]
    }
}

/// Which way an agent leaves the intersection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    Straight,
    Left,
    Right,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Straight, Branch::Left, Branch::Right];

    /// Turn angle relative to the approach heading (counter-clockwise positive).
    pub fn angle(self) -> f64 {
        match self {
            Branch::Straight => 0.0,
            Branch::Left => std::f64::consts::FRAC_PI_2,
            Branch::Right => -std::f64::consts::FRAC_PI_2,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Branch::Straight => 0,
            Branch::Left => 1,
            Branch::Right => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Branch::Straight => "straight",
            Branch::Left => "left",
            Branch::Right => "right",
        }
    }
}

/// Synthetic intersection scenario. Speeds and noise are in units per step.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScenarioConfig {
    /// Straight, left, right.
    pub probs: [f64; 3],
    pub speed_mean: f64,
    pub speed_std: f64,
    pub noise_std: f64,
    pub t_obs: usize,
    pub t_fut: usize,
    pub count: usize,
    pub seed: u64,
    /// Number of approach directions, evenly spaced around the origin.
    pub arms: usize,
    /// Seconds per step.
    pub dt: f64,
}

impl Default for SyntheticScenarioConfig {
    fn default() -> Self {
        Self {
            probs: [0.4, 0.4, 0.2],
            speed_mean: 1.0,
            speed_std: 0.1,
            noise_std: 0.02,
            t_obs: 8,
            t_fut: 16,
            count: 1000,
            seed: 0,
            arms: 4,
            dt: 0.25,
        }
    }
}

impl SyntheticScenarioConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (self.probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(config_error(
                "synthetic.probs",
                format!("{:?} must be in [0, 1] and sum to 1", self.probs),
            ));
        }
        if !(self.speed_std >= 0.0) {
            return Err(config_error("synthetic.speed_std", "must be non-negative"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(config_error("synthetic.noise_std", "must be non-negative"));
        }
        if !(self.speed_mean > 0.0) {
            return Err(config_error("synthetic.speed_mean", "must be positive"));
        }
        if self.t_obs < 2 || self.t_fut == 0 {
            return Err(config_error("synthetic.t_obs", "need t_obs >= 2 and t_fut >= 1"));
        }
        if self.arms == 0 {
            return Err(config_error("synthetic.arms", "must be positive"));
        }
        if !(self.dt > 0.0) {
            return Err(config_error("synthetic.dt", "must be positive"));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("synthetic.probs", crate::config::join_f64(&self.probs));
        kv.set("synthetic.speed_mean", format!("{:?}", self.speed_mean));
        kv.set("synthetic.speed_std", format!("{:?}", self.speed_std));
        kv.set("synthetic.noise_std", format!("{:?}", self.noise_std));
        kv.set("synthetic.t_obs", self.t_obs);
        kv.set("synthetic.t_fut", self.t_fut);
        kv.set("synthetic.count", self.count);
        kv.set("synthetic.seed", self.seed);
        kv.set("synthetic.arms", self.arms);
        kv.set("synthetic.dt", format!("{:?}", self.dt));
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self, DataError> {
        let d = Self::default();
        let probs = match kv.get_list::<f64>("synthetic.probs")? {
            None => d.probs,
            Some(v) if v.len() == 3 => [v[0], v[1], v[2]],
            Some(v) => return Err(config_error("synthetic.probs", format!("expected 3 values, got {}", v.len()))),
        };
        let cfg = Self {
            probs,
            speed_mean: kv.get_or("synthetic.speed_mean", d.speed_mean)?,
            speed_std: kv.get_or("synthetic.speed_std", d.speed_std)?,
            noise_std: kv.get_or("synthetic.noise_std", d.noise_std)?,
            t_obs: kv.get_or("synthetic.t_obs", d.t_obs)?,
            t_fut: kv.get_or("synthetic.t_fut", d.t_fut)?,
            count: kv.get_or("synthetic.count", d.count)?,
            seed: kv.get_or("synthetic.seed", d.seed)?,
            arms: kv.get_or("synthetic.arms", d.arms)?,
            dt: kv.get_or("synthetic.dt", d.dt)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Generated tracks with the branch each one took.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub tracks: Vec<Track>,
    pub branches: Vec<Branch>,
}

/// Agents approach the origin along one of `arms` directions, reach it at
/// the last observed step, then continue straight or turn ±90°.
pub fn generate_synthetic(cfg: &SyntheticScenarioConfig) -> Result<SyntheticData, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let speed = Normal::new(cfg.speed_mean, cfg.speed_std).map_err(|e| config_error("synthetic.speed_std", e.to_string()))?;
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| config_error("synthetic.noise_std", e.to_string()))?;
    let n = cfg.t_obs + cfg.t_fut;
    let mut tracks = Vec::with_capacity(cfg.count);
    let mut branches = Vec::with_capacity(cfg.count);
    for id in 0..cfg.count {
        let arm = rng.random_range(0..cfg.arms);
        let u: f64 = rng.random();
        let branch = if u < cfg.probs[0] {
            Branch::Straight
        } else if u < cfg.probs[0] + cfg.probs[1] {
            Branch::Left
        } else {
            Branch::Right
        };
        // keep degenerate configs exact: a zero-probability branch is never drawn
        let branch = if cfg.probs[branch.index()] == 0.0 {
            Branch::ALL.into_iter().rev().find(|b| cfg.probs[b.index()] > 0.0).unwrap_or(Branch::Straight)
        } else {
            branch
        };
        let s = speed.sample(&mut rng).max(0.05 * cfg.speed_mean);
        // heading of travel while approaching
        let inbound = 2.0 * std::f64::consts::PI * arm as f64 / cfg.arms as f64;
        let outbound = inbound + branch.angle();
        let mut times = Vec::with_capacity(n);
        let mut positions = Vec::with_capacity(2 * n);
        for i in 0..n {
            let j = i as f64 - (cfg.t_obs - 1) as f64;
            let heading = if j <= 0.0 { inbound } else { outbound };
            let (px, py) = (j * s * heading.cos(), j * s * heading.sin());
            times.push(i as f64 * cfg.dt);
            positions.push(px + noise.sample(&mut rng));
            positions.push(py + noise.sample(&mut rng));
        }
        tracks.push(Track::new(id as u64, times, positions)?);
        branches.push(branch);
    }
    Ok(SyntheticData { tracks, branches })
}

/// Write tracks as `track_id,t,x,y` CSV.
pub fn write_tracks(path: &Path, tracks: &[Track]) -> Result<(), DataError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    w.write_record(["track_id", "t", "x", "y"])?;
    for tr in tracks {
        for i in 0..tr.len() {
            let p = tr.point(i);
            w.write_record([
                tr.id.to_string(),
                format!("{:?}", tr.times[i]),
                format!("{:?}", p[0]),
                format!("{:?}", p[1]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read `track_id,t,x,y` CSV (header required, columns in any order).
/// Tracks keep the order of their first appearance.
pub fn load_tracks(path: &Path) -> Result<Vec<Track>, DataError> {
    let text = std::fs::read_to_string(path)?;
    parse_tracks(&text)
}

pub fn parse_tracks(text: &str) -> Result<Vec<Track>, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| DataError::Parse {
            line: 1,
            reason: format!("missing column {name}"),
        })
    };
    let (ci, ct, cx, cy) = (col("track_id")?, col("t")?, col("x")?, col("y")?);
    let mut order = Vec::new();
    let mut rows: HashMap<u64, (Vec<f64>, Vec<f64>)> = HashMap::new();
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let field = |c: usize, name: &str| {
            rec.get(c).ok_or_else(|| DataError::Parse {
                line,
                reason: format!("missing {name} value"),
            })
        };
        let id: u64 = field(ci, "track_id")?.parse().map_err(|_| DataError::Parse {
            line,
            reason: format!("bad track_id {:?}", rec.get(ci).unwrap_or("")),
        })?;
        let num = |c: usize, name: &str| -> Result<f64, DataError> {
            let s = field(c, name)?;
            let v: f64 = s.parse().map_err(|_| DataError::Parse {
                line,
                reason: format!("bad {name} value {s:?}"),
            })?;
            if !v.is_finite() {
                return Err(DataError::Parse {
                    line,
                    reason: format!("non-finite {name} value"),
                });
            }
            Ok(v)
        };
        let (t, x, y) = (num(ct, "t")?, num(cx, "x")?, num(cy, "y")?);
        let entry = rows.entry(id).or_insert_with(|| {
            order.push(id);
            (Vec::new(), Vec::new())
        });
        entry.0.push(t);
        entry.1.extend([x, y]);
    }
    order
        .into_iter()
        .map(|id| {
            let (t, p) = rows.remove(&id).expect("recorded id");
            Track::new(id, t, p)
        })
        .collect()
}

/// How tracks are cut into examples.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowConfig {
    pub t_obs: usize,
    pub t_fut: usize,
    pub stride: usize,
    /// Keep every `resample`-th sample before windowing.
    pub resample: usize,
    /// The model's scale count; `t_fut` must be divisible by `2^scales`.
    pub scales: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            t_obs: 8,
            t_fut: 16,
            stride: 24,
            resample: 1,
            scales: 2,
        }
    }
}

/// A normalized (past, future) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub track_id: u64,
    /// Index of the first past sample in the resampled track.
    pub start: usize,
    pub x: Trajectory,
    pub y: Trajectory,
    /// Scene position of the last observed point.
    pub offset: [f64; 2],
    pub scale: f64,
}

impl Example {
    /// Map a normalized trajectory back to scene units.
    pub fn denormalize(&self, t: &Trajectory) -> Trajectory {
        denormalize(t, self.offset, self.scale)
    }
}

pub fn normalize(t: &Trajectory, offset: [f64; 2], scale: f64) -> Trajectory {
    let vals = t
        .values()
        .chunks(2)
        .flat_map(|p| [(p[0] - offset[0]) / scale, (p[1] - offset[1]) / scale])
        .collect();
    Trajectory::new(vals, 2, t.dt()).expect("same shape")
}

pub fn denormalize(t: &Trajectory, offset: [f64; 2], scale: f64) -> Trajectory {
    let vals = t
        .values()
        .chunks(2)
        .flat_map(|p| [p[0] * scale + offset[0], p[1] * scale + offset[1]])
        .collect();
    Trajectory::new(vals, 2, t.dt()).expect("same shape")
}

/// Windowed examples plus the normalization scale shared by all of them.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub scale: f64,
    pub window: WindowConfig,
}

impl Dataset {
    /// Manifest: resample rate, window lengths, normalization scale.
    pub fn manifest(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("data.resample", self.window.resample);
        kv.set("data.t_obs", self.window.t_obs);
        kv.set("data.t_fut", self.window.t_fut);
        kv.set("data.stride", self.window.stride);
        kv.set("data.scale", format!("{:?}", self.scale));
        kv.set("data.examples", self.examples.len());
        kv
    }
}

fn resampled(track: &Track, every: usize) -> Track {
    let idx: Vec<usize> = (0..track.len()).step_by(every).collect();
    Track {
        id: track.id,
        times: idx.iter().map(|&i| track.times[i]).collect(),
        positions: idx.iter().flat_map(|&i| track.point(i)).collect(),
    }
}

/// Standard deviation of per-step displacement components over all tracks.
pub fn displacement_scale(tracks: &[Track], resample: usize) -> Result<f64, DataError> {
    let mut vals = Vec::new();
    for tr in tracks {
        let tr = resampled(tr, resample.max(1));
        for i in 1..tr.len() {
            let (a, b) = (tr.point(i - 1), tr.point(i));
            vals.extend([b[0] - a[0], b[1] - a[1]]);
        }
    }
    if vals.len() < 2 {
        return Err(config_error("data", "too few samples to estimate a displacement scale"));
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
    let sd = var.sqrt();
    if !(sd > 0.0) {
        return Err(config_error("data", "displacements have zero spread"));
    }
    Ok(sd)
}

/// Cut tracks into examples, normalizing with a scale estimated from the tracks.
pub fn window_and_normalize(tracks: &[Track], cfg: &WindowConfig) -> Result<Dataset, DataError> {
    let scale = displacement_scale(tracks, cfg.resample)?;
    window_with_scale(tracks, cfg, scale)
}

/// Cut tracks into examples using a given normalization scale.
pub fn window_with_scale(tracks: &[Track], cfg: &WindowConfig, scale: f64) -> Result<Dataset, DataError> {
    haar::check_scales(cfg.t_fut, cfg.scales)?;
    if cfg.t_obs == 0 || cfg.stride == 0 || cfg.resample == 0 {
        return Err(config_error("data", "t_obs, stride and resample must be positive"));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(config_error("data.scale", format!("{scale} is not a positive finite number")));
    }
    let span = cfg.t_obs + cfg.t_fut;
    let mut examples = Vec::new();
    for tr in tracks {
        let tr = resampled(tr, cfg.resample);
        if tr.len() < span {
            continue;
        }
        let dt = tr.times[1] - tr.times[0];
        let mut start = 0;
        while start + span <= tr.len() {
            let offset = tr.point(start + cfg.t_obs - 1);
            let slice = |a: usize, b: usize| {
                Trajectory::new(tr.positions[2 * a..2 * b].to_vec(), 2, dt).expect("non-empty window")
            };
            let x = normalize(&slice(start, start + cfg.t_obs), offset, scale);
            let y = normalize(&slice(start + cfg.t_obs, start + span), offset, scale);
            examples.push(Example {
                track_id: tr.id,
                start,
                x,
                y,
                offset,
                scale,
            });
            start += cfg.stride;
        }
    }
    if examples.is_empty() {
        return Err(config_error(
            "data",
            format!("no track is long enough for a {span}-step window"),
        ));
    }
    Ok(Dataset {
        examples,
        scale,
        window: cfg.clone(),
    })
}

/// Track ids assigned to each test fold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldAssignment {
    pub folds: Vec<Vec<u64>>,
}

impl FoldAssignment {
    pub fn len(&self) -> usize {
        self.folds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.folds.is_empty()
    }

    /// `(train, test)` examples for fold `k`.
    pub fn split<'a>(&self, examples: &'a [Example], k: usize) -> (Vec<&'a Example>, Vec<&'a Example>) {
        let test: std::collections::HashSet<u64> = self.folds[k].iter().copied().collect();
        examples.iter().partition(|e| !test.contains(&e.track_id))
    }
}

fn track_ids(examples: &[Example]) -> Vec<u64> {
    let mut ids: Vec<u64> = examples.iter().map(|e| e.track_id).collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

/// Partition track ids into `folds` groups: shuffle with `seed`, deal round-robin.
pub fn kfold_split(examples: &[Example], folds: usize, seed: u64) -> Result<FoldAssignment, DataError> {
    let mut ids = track_ids(examples);
    if folds == 0 || ids.len() < folds {
        return Err(DataError::Split(format!(
            "{} tracks cannot fill {folds} folds",
            ids.len()
        )));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![Vec::new(); folds];
    for (i, id) in ids.into_iter().enumerate() {
        out[i % folds].push(id);
    }
    for f in &mut out {
        f.sort_unstable();
    }
    Ok(FoldAssignment { folds: out })
}

/// Hold out about `fraction` of the tracks (at least one) for validation.
pub fn validation_split<'a>(
    examples: &[&'a Example],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<&'a Example>, Vec<&'a Example>), DataError> {
    let mut ids: Vec<u64> = examples.iter().map(|e| e.track_id).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(DataError::Split("need at least two tracks to hold out validation data".into()));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((ids.len() as f64 * fraction).round() as usize).clamp(1, ids.len() - 1);
    let val: std::collections::HashSet<u64> = ids[..n_val].iter().copied().collect();
    let (v, t): (Vec<&Example>, Vec<&Example>) = examples.iter().partition(|e| val.contains(&e.track_id));
    Ok((t, v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_scenario_is_straight_lines() {
        let cfg = SyntheticScenarioConfig {
            probs: [1.0, 0.0, 0.0],
            noise_std: 0.0,
            speed_std: 0.0,
            arms: 1,
            count: 5,
            ..Default::default()
        };
        let d = generate_synthetic(&cfg).unwrap();
        assert!(d.branches.iter().all(|&b| b == Branch::Straight));
        for tr in &d.tracks {
            assert_eq!(tr.positions, d.tracks[0].positions);
            // collinear, unit spacing
            for i in 1..tr.len() {
                let (a, b) = (tr.point(i - 1), tr.point(i));
                assert!(((b[0] - a[0]) - 1.0).abs() < 1e-12 && (b[1] - a[1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn probabilities_are_validated() {
        let cfg = SyntheticScenarioConfig {
            probs: [0.5, 0.5, 0.5],
            ..Default::default()
        };
        let err = generate_synthetic(&cfg).unwrap_err();
        assert!(err.to_string().contains("synthetic.probs"));
    }

    #[test]
    fn parse_examples() {
        let t = parse_tracks("track_id,t,x,y\n1,0.0,0,0\n1,0.1,1,0\n1,0.2,2,0\n").unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].len(), 3);
        let err = parse_tracks("track_id,t,x,y\n1,0.0,0,0\na,b,c\n").unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 3, .. }), "{err}");
        let err = parse_tracks("track_id,t,x,y\n4,0.2,0,0\n4,0.1,1,0\n").unwrap_err();
        assert!(matches!(err, DataError::Order { track: 4 }));
        assert!(matches!(parse_tracks("track_id,t,x\n1,0,0\n"), Err(DataError::Parse { line: 1, .. })));
        assert!(matches!(parse_tracks("track_id,t,x,y\n1,0,NaN,0\n"), Err(DataError::Parse { line: 2, .. })));
    }

    #[test]
    fn window_arithmetic() {
        let d = generate_synthetic(&SyntheticScenarioConfig {
            count: 3,
            ..Default::default()
        })
        .unwrap();
        let ds = window_and_normalize(&d.tracks, &WindowConfig::default()).unwrap();
        assert_eq!(ds.examples.len(), 3);
        for e in &ds.examples {
            assert_eq!(e.x.last_point(), &[0.0, 0.0]);
        }
        let bad = WindowConfig {
            t_fut: 6,
            scales: 2,
            ..Default::default()
        };
        assert!(matches!(window_and_normalize(&d.tracks, &bad), Err(DataError::Haar(_))));
    }

    #[test]
    fn ten_tracks_five_folds() {
        let d = generate_synthetic(&SyntheticScenarioConfig {
            count: 10,
            ..Default::default()
        })
        .unwrap();
        let ds = window_and_normalize(&d.tracks, &WindowConfig::default()).unwrap();
        let f = kfold_split(&ds.examples, 5, 3).unwrap();
        assert!(f.folds.iter().all(|f| f.len() == 2));
        assert_eq!(f, kfold_split(&ds.examples, 5, 3).unwrap());
        assert!(kfold_split(&ds.examples, 11, 3).is_err());
    }
}
