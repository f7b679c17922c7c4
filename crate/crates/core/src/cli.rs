//! The `hbaflow` command line: data generation, training, evaluation,
//! sampling, pyramid inspection and sampling benchmarks.
//!
//! Every command resolves one flat key-value configuration (built-in
//! defaults, then `--config`, then `--set`), rejects unknown keys and
//! writes the resolved configuration to `<out>/config.txt` before running.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{ConfigError, KvMap};
use crate::coupling::CouplingError;
use crate::data::{
    generate_synthetic, kfold_split, load_tracks, validation_split, window_and_normalize, write_tracks, DataError,
    Dataset, Example, SyntheticScenarioConfig, Track, WindowConfig,
};
use crate::eval::{benchmark_sampling, evaluate, EvalConfig, EvalError, Forecaster, MetricReport};
use crate::haar::{self, HaarError, Trajectory};
use crate::model::{load_checkpoint, read_checkpoint, save_checkpoint, CheckpointError, HbaFlowModel, ModelConfig, ModelError};
use crate::train::{TrainConfig, TrainError, Trainer};

#[derive(Debug, Parser)]
#[command(name = "hbaflow", version, about = "Haar block-autoregressive flows for trajectory forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic intersection dataset (tracks.csv + manifest.txt).
    GenData(Common),
    /// Train one model per selected cross-validation fold.
    Train(Common),
    /// Evaluate trained folds and write per-fold and aggregate reports.
    Eval(Common),
    /// Draw futures for test examples; CSV plus optional SVG overlays.
    Sample(Common),
    /// Print the Haar pyramid of a trajectory given as `inspect.values`.
    Inspect(Common),
    /// Time sampling of a batch of futures.
    Bench(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// Key-value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for every random component.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override one key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

/// A failed command, classified by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config { .. } | DataError::KeyValue(_) => CliError::Usage(e.to_string()),
            DataError::Haar(HaarError::Divisibility { .. }) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<HaarError> for CliError {
    fn from(e: HaarError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Coupling(CouplingError::Numeric(_)) => CliError::Numeric(e.to_string()),
            ModelError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => m.into(),
            EvalError::Config(c) => c.into(),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::Config(c) => c.into(),
            TrainError::Diverged(_) | TrainError::NonFiniteGradient(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

const SEED_KEYS: [&str; 5] = ["synthetic.seed", "model.init_seed", "train.seed", "eval.seed", "cv.seed"];

/// Every accepted key with its default value.
pub fn default_config() -> KvMap {
    let mut kv = KvMap::new();
    kv.set("seed", 0);
    let mut synth = SyntheticScenarioConfig::default().to_kv();
    // window lengths come from the model section
    synth = KvMap::parse(
        &synth
            .iter()
            .filter(|(k, _)| *k != "synthetic.t_obs" && *k != "synthetic.t_fut")
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect::<String>(),
    )
    .expect("canonical text");
    kv.merge(&synth);
    kv.merge(&ModelConfig::default().to_kv());
    kv.merge(&TrainConfig::default().to_kv());
    kv.merge(&EvalConfig::default().to_kv());
    kv.set("train.resume", false);
    kv.set("data.path", "");
    kv.set("data.stride", 24);
    kv.set("data.resample", 1);
    kv.set("cv.folds", 5);
    kv.set("cv.run", "0");
    kv.set("sample.checkpoint", "");
    kv.set("sample.count", 50);
    kv.set("sample.examples", 4);
    kv.set("sample.temperature", "1.0");
    kv.set("sample.svg", true);
    kv.set("inspect.values", "1,2,3,4");
    kv.set("inspect.dim", 1);
    kv.set("inspect.scales", 2);
    kv.set("inspect.alpha", "0.5");
    kv.set("bench.checkpoint", "");
    kv.set("bench.batch", 128);
    kv.set("bench.repeats", 10);
    kv
}

/// Defaults, then the file, then `--set` overrides, then `--seed`. Component
/// seeds not given explicitly follow the master seed.
fn resolve(common: &Common) -> Result<KvMap, CliError> {
    let defaults = default_config();
    let mut explicit = KvMap::new();
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        explicit.merge(&KvMap::parse(&text)?);
    }
    for o in &common.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {o:?}")))?;
        explicit.set(k.trim(), v.trim());
    }
    if let Some(seed) = common.seed {
        explicit.set("seed", seed);
    }
    if let Some(k) = explicit.keys().find(|k| !defaults.contains(k)) {
        return Err(ConfigError::Unknown(k.to_string()).into());
    }
    let mut kv = defaults;
    kv.merge(&explicit);
    let seed: u64 = kv.require("seed")?;
    for key in SEED_KEYS {
        if !explicit.contains(key) {
            kv.set(key, seed);
        }
    }
    Ok(kv)
}

fn synthetic_config(kv: &KvMap, model: &ModelConfig) -> Result<SyntheticScenarioConfig, CliError> {
    let mut s = SyntheticScenarioConfig::from_kv(kv)?;
    s.t_obs = model.t_obs;
    s.t_fut = model.t_fut;
    s.validate()?;
    Ok(s)
}

fn window_config(kv: &KvMap, model: &ModelConfig) -> Result<WindowConfig, CliError> {
    Ok(WindowConfig {
        t_obs: model.t_obs,
        t_fut: model.t_fut,
        stride: kv.require("data.stride")?,
        resample: kv.require("data.resample")?,
        scales: model.scales,
    })
}

fn tracks_for(kv: &KvMap, model: &ModelConfig) -> Result<Vec<Track>, CliError> {
    let path: String = kv.require("data.path")?;
    if path.is_empty() {
        Ok(generate_synthetic(&synthetic_config(kv, model)?)?.tracks)
    } else {
        Ok(load_tracks(Path::new(&path))?)
    }
}

fn dataset(kv: &KvMap, model: &ModelConfig) -> Result<Dataset, CliError> {
    let tracks = tracks_for(kv, model)?;
    Ok(window_and_normalize(&tracks, &window_config(kv, model)?)?)
}

fn folds_to_run(kv: &KvMap) -> Result<Vec<usize>, CliError> {
    let folds: usize = kv.require("cv.folds")?;
    let run = kv.raw("cv.run").unwrap_or("0");
    let list: Vec<usize> = if run == "all" {
        (0..folds).collect()
    } else {
        kv.get_list("cv.run")?.unwrap_or_default()
    };
    if list.is_empty() || list.iter().any(|&k| k >= folds) {
        return Err(CliError::Usage(format!("cv.run={run} does not select folds below cv.folds={folds}")));
    }
    Ok(list)
}

fn fold_dir(out: &Path, k: usize) -> PathBuf {
    out.join(format!("fold{k}"))
}

fn prepare_out(common: &Common, kv: &KvMap) -> Result<(), CliError> {
    fs::create_dir_all(&common.out)?;
    fs::write(common.out.join("config.txt"), kv.to_text())?;
    Ok(())
}

fn cmd_gen_data(common: &Common, kv: &KvMap) -> Result<String, CliError> {
    let model = ModelConfig::from_kv(kv)?;
    let synth = synthetic_config(kv, &model)?;
    let data = generate_synthetic(&synth)?;
    let tracks_path = common.out.join("tracks.csv");
    write_tracks(&tracks_path, &data.tracks)?;
    let mut manifest = synth.to_kv();
    manifest.set("synthetic.t_obs", synth.t_obs);
    manifest.set("synthetic.t_fut", synth.t_fut);
    let ds = window_and_normalize(&data.tracks, &window_config(kv, &model)?)?;
    manifest.merge(&ds.manifest());
    manifest.set("tracks", data.tracks.len());
    manifest.set("rows", data.tracks.iter().map(Track::len).sum::<usize>());
    fs::write(common.out.join("manifest.txt"), manifest.to_text())?;
    let mut branches = String::from("track_id,branch\n");
    for (t, b) in data.tracks.iter().zip(&data.branches) {
        writeln!(branches, "{},{}", t.id, b.name()).expect("string write");
    }
    fs::write(common.out.join("branches.csv"), branches)?;
    Ok(format!(
        "wrote {} tracks to {}",
        data.tracks.len(),
        tracks_path.display()
    ))
}

fn cmd_train(common: &Common, kv: &KvMap) -> Result<String, CliError> {
    let model_cfg = ModelConfig::from_kv(kv)?;
    let ds = dataset(kv, &model_cfg)?;
    let folds = kfold_split(&ds.examples, kv.require("cv.folds")?, kv.require("cv.seed")?)?;
    let resume: bool = kv.require("train.resume")?;
    let mut summary = String::new();
    for k in folds_to_run(kv)? {
        let dir = fold_dir(&common.out, k);
        fs::create_dir_all(&dir)?;
        let mut cfg = TrainConfig::from_kv(kv)?;
        cfg.checkpoint_dir = Some(dir.clone());
        let (train_all, _) = folds.split(&ds.examples, k);
        let (train, val) = validation_split(&train_all, cfg.val_fraction, cfg.seed)?;
        let last = dir.join("last.ckpt");
        let mut trainer = if resume && last.exists() {
            let mut t = Trainer::from_checkpoint(&read_checkpoint(&last)?, cfg)?;
            let best = dir.join("best.ckpt");
            if best.exists() {
                t.best = Some(load_checkpoint(&best)?);
            }
            t
        } else {
            Trainer::new(HbaFlowModel::new(model_cfg.clone())?, cfg)
        };
        let metrics_path = dir.join("metrics.csv");
        let mut log = fs::OpenOptions::new()
            .create(true)
            .append(trainer.epoch > 0)
            .write(true)
            .truncate(trainer.epoch == 0)
            .open(&metrics_path)?;
        let mut sink = Tee(&mut log);
        if let Err(e) = trainer.fit(&train, &val, &mut sink) {
            if let TrainError::Diverged(d) = &e {
                fs::write(dir.join("diagnostics.txt"), d.to_kv().to_text())?;
            }
            return Err(e.into());
        }
        save_checkpoint(&dir.join("model.ckpt"), trainer.best_model())?;
        writeln!(
            summary,
            "fold {k}: {} steps, best val nll {:.4}",
            trainer.opt.step, trainer.best_val
        )
        .expect("string write");
    }
    Ok(summary.trim_end().to_string())
}

/// Writes to a file and echoes to stdout.
struct Tee<'a>(&'a mut fs::File);

impl std::io::Write for Tee<'_> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.write_all(buf)?;
        std::io::stdout().write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.0.flush()?;
        std::io::stdout().flush()
    }
}

fn cmd_eval(common: &Common, kv: &KvMap) -> Result<String, CliError> {
    let model_cfg = ModelConfig::from_kv(kv)?;
    let eval_cfg = EvalConfig::from_kv(kv)?;
    let ds = dataset(kv, &model_cfg)?;
    let folds = kfold_split(&ds.examples, kv.require("cv.folds")?, kv.require("cv.seed")?)?;
    let mut reports = Vec::new();
    let mut csv = String::new();
    for k in folds_to_run(kv)? {
        let dir = fold_dir(&common.out, k);
        let path = dir.join("model.ckpt");
        if !path.exists() {
            return Err(CliError::Data(format!("missing checkpoint {}", path.display())));
        }
        let model = load_checkpoint(&path)?;
        let (_, test) = folds.split(&ds.examples, k);
        let mut report = evaluate(&model, &test, &eval_cfg)?;
        if eval_cfg.bench {
            let b = benchmark_sampling(&model, &test[0].x, 128, eval_cfg.bench_repeats, model_cfg.t_fut, eval_cfg.seed)?;
            report.sampling_ms = Some(b.median_ms);
        }
        fs::write(dir.join("report.txt"), report.to_kv().to_text())?;
        if csv.is_empty() {
            csv = format!("fold,{}\n", report.csv_header());
        }
        writeln!(csv, "{k},{}", report.csv_row()).expect("string write");
        reports.push(report);
    }
    let agg = MetricReport::aggregate(&reports)?;
    writeln!(csv, "mean,{}", agg.csv_row()).expect("string write");
    fs::write(common.out.join("report.csv"), &csv)?;
    fs::write(common.out.join("aggregate.txt"), agg.to_kv().to_text())?;
    Ok(agg.to_kv().to_text().trim_end().to_string())
}

fn checkpoint_path(kv: &KvMap, key: &str, out: &Path) -> Result<Option<PathBuf>, CliError> {
    let p: String = kv.require(key)?;
    Ok(if p.is_empty() {
        let default = fold_dir(out, 0).join("model.ckpt");
        default.exists().then_some(default)
    } else {
        Some(PathBuf::from(p))
    })
}

fn cmd_sample(common: &Common, kv: &KvMap) -> Result<String, CliError> {
    let path = checkpoint_path(kv, "sample.checkpoint", &common.out)?
        .ok_or_else(|| CliError::Data("no checkpoint: set sample.checkpoint or train fold 0 first".into()))?;
    let model = load_checkpoint(&path)?;
    let model_cfg = model.config().clone();
    let ds = dataset(kv, &model_cfg)?;
    let folds = kfold_split(&ds.examples, kv.require("cv.folds")?, kv.require("cv.seed")?)?;
    let (_, test) = folds.split(&ds.examples, 0);
    let count: usize = kv.require("sample.count")?;
    let n_examples = kv.require::<usize>("sample.examples")?.min(test.len());
    let temperature: f64 = kv.require("sample.temperature")?;
    let svg: bool = kv.require("sample.svg")?;
    let seed: u64 = kv.require("seed")?;
    let mut csv = String::from("example_id,track_id,sample_id,t,x,y\n");
    for (i, ex) in test.iter().take(n_examples).enumerate() {
        let (samples, _) = model.sample_with_temperature(&ex.x, count, ex.y.len(), seed.wrapping_add(i as u64), temperature)?;
        let scene: Vec<Trajectory> = samples.iter().map(|s| ex.denormalize(s)).collect();
        for (j, s) in scene.iter().enumerate() {
            for t in 0..s.len() {
                let p = s.point(t);
                writeln!(csv, "{i},{},{j},{t},{:?},{:?}", ex.track_id, p[0], p[1]).expect("string write");
            }
        }
        if svg {
            fs::write(common.out.join(format!("example{i}.svg")), render_svg(ex, &scene))?;
        }
    }
    fs::write(common.out.join("samples.csv"), csv)?;
    Ok(format!("{count} samples for each of {n_examples} examples"))
}

/// One polyline per sample plus the ground truth (past and future).
pub fn render_svg(ex: &Example, samples: &[Trajectory]) -> String {
    let past = ex.denormalize(&ex.x);
    let future = ex.denormalize(&ex.y);
    let mut gt: Vec<[f64; 2]> = (0..past.len()).map(|t| [past.point(t)[0], past.point(t)[1]]).collect();
    gt.extend((0..future.len()).map(|t| [future.point(t)[0], future.point(t)[1]]));
    let lines: Vec<Vec<[f64; 2]>> = samples
        .iter()
        .map(|s| (0..s.len()).map(|t| [s.point(t)[0], s.point(t)[1]]).collect())
        .collect();
    let all = lines.iter().flatten().chain(&gt);
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in all {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    let pad = 0.05 * (x1 - x0).max(y1 - y0).max(1e-9);
    let (vx, vy, vw, vh) = (x0 - pad, y0 - pad, x1 - x0 + 2.0 * pad, y1 - y0 + 2.0 * pad);
    let stroke = 0.004 * vw.max(vh);
    let pts = |ps: &[[f64; 2]]| {
        ps.iter()
            // flip y so north is up
            .map(|p| format!("{:.4},{:.4}", p[0], vy + vh - (p[1] - vy)))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"{vx:.4} {vy:.4} {vw:.4} {vh:.4}\">\n"
    );
    for l in &lines {
        writeln!(
            s,
            "<polyline class=\"sample\" fill=\"none\" stroke=\"steelblue\" stroke-opacity=\"0.4\" stroke-width=\"{stroke:.4}\" points=\"{}\"/>",
            pts(l)
        )
        .expect("string write");
    }
    writeln!(
        s,
        "<polyline class=\"gt\" fill=\"none\" stroke=\"black\" stroke-width=\"{:.4}\" points=\"{}\"/>",
        2.0 * stroke,
        pts(&gt)
    )
    .expect("string write");
    s.push_str("</svg>\n");
    s
}

fn cmd_inspect(common: &Common, kv: &KvMap) -> Result<String, CliError> {
    let values: Vec<f64> = kv.get_list("inspect.values")?.unwrap_or_default();
    let dim: usize = kv.require("inspect.dim")?;
    let scales: usize = kv.require("inspect.scales")?;
    let alpha: f64 = kv.require("inspect.alpha")?;
    let y = Trajectory::new(values, dim, 1.0).map_err(|e| CliError::Usage(e.to_string()))?;
    let p = haar::decompose(&y, scales, &[alpha]).map_err(|e| match e {
        HaarError::Divisibility { .. } | HaarError::Alpha(_) => CliError::Usage(e.to_string()),
        other => CliError::Data(other.to_string()),
    })?;
    let text = p.to_text();
    fs::write(common.out.join("pyramid.txt"), &text)?;
    Ok(text.trim_end().to_string())
}

fn cmd_bench(common: &Common, kv: &KvMap) -> Result<String, CliError> {
    let model = match checkpoint_path(kv, "bench.checkpoint", &common.out)? {
        Some(p) => load_checkpoint(&p)?,
        None => HbaFlowModel::new(ModelConfig::from_kv(kv)?)?,
    };
    let cfg = model.config();
    let x = Trajectory::new(
        (0..cfg.t_obs)
            .flat_map(|t| {
                let v = t as f64 - (cfg.t_obs - 1) as f64;
                (0..cfg.dim).map(move |c| if c == 0 { v } else { 0.0 })
            })
            .collect(),
        cfg.dim,
        1.0,
    )
    .map_err(|e| CliError::Usage(e.to_string()))?;
    let b = benchmark_sampling(
        &model,
        &x,
        kv.require("bench.batch")?,
        kv.require("bench.repeats")?,
        cfg.t_fut,
        kv.require("seed")?,
    )?;
    let mut r = KvMap::new();
    r.set("batch", b.batch);
    r.set("median_ms", format!("{:.3}", b.median_ms));
    r.set("iqr_ms", format!("{:.3}", b.iqr_ms));
    r.set("stages", b.stages);
    r.set("scales", cfg.scales);
    r.set("t_fut", cfg.t_fut);
    fs::write(common.out.join("bench.txt"), r.to_text())?;
    Ok(r.to_text().trim_end().to_string())
}

fn dispatch(cli: Cli) -> Result<String, CliError> {
    let (common, f): (&Common, fn(&Common, &KvMap) -> Result<String, CliError>) = match &cli.command {
        Command::GenData(c) => (c, cmd_gen_data),
        Command::Train(c) => (c, cmd_train),
        Command::Eval(c) => (c, cmd_eval),
        Command::Sample(c) => (c, cmd_sample),
        Command::Inspect(c) => (c, cmd_inspect),
        Command::Bench(c) => (c, cmd_bench),
    };
    let kv = resolve(common)?;
    prepare_out(common, &kv)?;
    f(common, &kv)
}

/// Parse `args` (including the program name), run the command and return
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(msg) => {
            if !msg.is_empty() {
                println!("{msg}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Evaluation helper shared with callers that hold a model in memory.
pub fn evaluate_model(model: &dyn Forecaster, test: &[&Example], kv: &KvMap) -> Result<MetricReport, CliError> {
    Ok(evaluate(model, test, &EvalConfig::from_kv(kv)?)?)
}
