//! Experiment drivers behind the command-line subcommands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use i2p_core::cloud::{Point, PointCloud};
use i2p_core::guidance::sample_mask;
use i2p_core::model::{group_tokens, I2pMae};
use i2p_core::probe::{evaluate, extract_global, train_linear_svm, FeatureBank, ProbeResult};
use i2p_core::projection::{render_depth, render_views, Axis};
use i2p_core::train::{mask_seed, pretrain, BatchExecutor, EpochMetrics};
use i2p_core::Error;

use crate::config::{ConfigFile, RunConfig};
use crate::dataset::{pretrain_clouds, probe_split, ViewCache};
use crate::extractor::build_extractor;
use crate::formats::{metrics_csv, save_checkpoint, write_file, write_ppm};
use crate::{RunError, RunResult};

pub const CHECKPOINT_FILE: &str = "checkpoint.i2pt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RESULTS_HEADER: [&str; 9] = [
    "config_id",
    "policy",
    "ratio",
    "views",
    "sal_agg",
    "tgt_agg",
    "assignment",
    "seed",
    "accuracy",
];

/// Records the config file and flag overrides verbatim, plus the resolved
/// configuration, under the output directory.
pub fn write_provenance(
    cfg: &RunConfig,
    file: Option<(&Path, &str)>,
    flags: &[(String, String)],
) -> RunResult<()> {
    let mut log = String::new();
    match file {
        Some((path, text)) => {
            let _ = writeln!(log, "# config file: {}", path.display());
            log.push_str(text);
            if !text.ends_with('\n') {
                log.push('\n');
            }
        }
        None => log.push_str("# no config file\n"),
    }
    log.push_str("# flag overrides\n");
    for (k, v) in flags {
        let _ = writeln!(log, "{k} = {v}");
    }
    write_file(&cfg.out_dir.join("config.log"), log.as_bytes())?;
    write_file(&cfg.out_dir.join("resolved.cfg"), cfg.dump().as_bytes())
}

/// Output of one pre-training run.
pub struct Pretrained {
    pub model: I2pMae,
    pub metrics: Vec<EpochMetrics>,
}

/// Pre-trains on the configured set. With `out`, writes the final checkpoint,
/// the metrics CSV and any periodic checkpoints there.
pub fn run_pretrain(
    cfg: &RunConfig,
    cache: &mut ViewCache,
    executor: &dyn BatchExecutor,
    out: Option<&Path>,
    progress: &mut dyn FnMut(&EpochMetrics),
) -> RunResult<Pretrained> {
    cfg.validate()?;
    let clouds = pretrain_clouds(cfg)?;
    let samples = cache.prepare(cfg, &clouds)?;
    let mut model = I2pMae::new(cfg.model_config(), cfg.train.seed)?;
    let mut io_err = None;
    let mut observer = |m: &EpochMetrics, model: &I2pMae| {
        progress(m);
        if let (Some(dir), n) = (out, cfg.checkpoint_every) {
            if n > 0 && m.epoch.is_multiple_of(n) && m.epoch < cfg.train.epochs {
                let path = dir.join(format!("checkpoint_e{:04}.i2pt", m.epoch));
                if let Err(e) = save_checkpoint(model.params(), &path) {
                    let msg = e.to_string();
                    io_err = Some(e);
                    return Err(Error::Contract(msg));
                }
            }
        }
        Ok(())
    };
    let metrics = pretrain(&mut model, &samples, &cfg.train, executor, &mut observer);
    if let Some(e) = io_err {
        return Err(e);
    }
    let metrics = metrics?;
    if let Some(dir) = out {
        save_checkpoint(model.params(), &dir.join(CHECKPOINT_FILE))?;
        write_file(&dir.join(METRICS_FILE), &metrics_csv(&metrics)?)?;
    }
    Ok(Pretrained { model, metrics })
}

fn bank(model: &I2pMae, cfg: &RunConfig, clouds: &[PointCloud]) -> RunResult<FeatureBank> {
    let mode = cfg.probe.descriptor;
    let mut bank = FeatureBank::new(mode.width(cfg.model.channels), mode);
    for c in clouds {
        let label = c
            .label
            .ok_or_else(|| Error::Input(format!("probe sample {} has no label", c.source_id)))?;
        let tokens = group_tokens(c, cfg.model.tokens, cfg.model.k, cfg.data.seed)?;
        bank.push(&extract_global(model, &tokens, mode)?, label)?;
    }
    Ok(bank)
}

/// Linear-SVM probe of frozen encoder features on the probe split.
pub fn run_probe(model: &I2pMae, cfg: &RunConfig, config_id: &str) -> RunResult<ProbeResult> {
    let (train, test) = probe_split(cfg)?;
    let train_bank = bank(model, cfg, &train)?;
    let test_bank = bank(model, cfg, &test)?;
    let svm_cfg = i2p_core::probe::SvmConfig {
        seed: cfg.train.seed,
        ..cfg.probe.svm
    };
    let svm = train_linear_svm(&train_bank, &svm_cfg)?;
    Ok(evaluate(&svm, &test_bank, config_id, cfg.train.seed))
}

/// `class,accuracy` rows; classes absent from the test split are left blank.
pub fn per_class_csv(result: &ProbeResult) -> RunResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["class", "accuracy"])?;
    for (c, a) in result.per_class_accuracy.iter().enumerate() {
        w.write_record([
            c.to_string(),
            a.map(|a| format!("{a:.6}")).unwrap_or_default(),
        ])?;
    }
    w.into_inner().map_err(|e| RunError::Parse(e.to_string()))
}

/// One grid point: its id and resolved configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub id: String,
    pub config: RunConfig,
}

/// Cartesian product of the grid axes, first axis slowest. Every point is
/// validated before this returns.
pub fn expand_grid(base: &RunConfig, grid: &[(String, Vec<String>)]) -> RunResult<Vec<GridPoint>> {
    if grid.is_empty() {
        return Err(RunError::Config(
            "the grid is empty: add grid.<key> = v1,v2,... lines".into(),
        ));
    }
    if let Some((k, _)) = grid.iter().find(|(_, v)| v.is_empty()) {
        return Err(RunError::Config(format!("grid.{k} lists no values")));
    }
    let mut points = vec![GridPoint {
        id: String::new(),
        config: base.clone(),
    }];
    for (key, values) in grid {
        let mut next = Vec::with_capacity(points.len() * values.len());
        for p in &points {
            for v in values {
                let mut config = p.config.clone();
                config.set(key, v)?;
                let id = if p.id.is_empty() {
                    format!("{key}={v}")
                } else {
                    format!("{};{key}={v}", p.id)
                };
                next.push(GridPoint { id, config });
            }
        }
        points = next;
    }
    for p in &points {
        p.config
            .validate()
            .map_err(|e| RunError::Config(format!("grid point {}: {e}", p.id)))?;
    }
    Ok(points)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub config_id: String,
    pub config: RunConfig,
    pub seed: u64,
    pub accuracy: f64,
}

impl ResultRow {
    fn fields(&self) -> [String; 8] {
        let c = &self.config;
        [
            self.config_id.clone(),
            c.train.policy.to_string(),
            c.train.mask_ratio.to_string(),
            c.views.to_string(),
            c.sal_agg.to_string(),
            c.tgt_agg.to_string(),
            c.train.assignment.to_string(),
            self.seed.to_string(),
        ]
    }
}

pub fn results_csv(rows: &[ResultRow]) -> RunResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RESULTS_HEADER)?;
    for r in rows {
        let f = r.fields();
        w.write_record(
            f.iter()
                .map(String::as_str)
                .chain([format!("{:.6}", r.accuracy).as_str()]),
        )?;
    }
    w.into_inner().map_err(|e| RunError::Parse(e.to_string()))
}

/// Mean and sample standard deviation of accuracy per grid point, in grid order.
pub fn summarize(rows: &[ResultRow]) -> Vec<(String, usize, f64, f64)> {
    let mut ids: Vec<&str> = Vec::new();
    for r in rows {
        if !ids.contains(&r.config_id.as_str()) {
            ids.push(&r.config_id);
        }
    }
    ids.into_iter()
        .map(|id| {
            let acc: Vec<f64> = rows
                .iter()
                .filter(|r| r.config_id == id)
                .map(|r| r.accuracy)
                .collect();
            let n = acc.len() as f64;
            let mean = acc.iter().sum::<f64>() / n;
            let var = if acc.len() > 1 {
                acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            (id.to_string(), acc.len(), mean, var.sqrt())
        })
        .collect()
}

pub fn summary_csv(rows: &[ResultRow]) -> RunResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["config_id", "runs", "mean_accuracy", "std_accuracy"])?;
    for (id, n, mean, std) in summarize(rows) {
        w.write_record([id, n.to_string(), format!("{mean:.6}"), format!("{std:.6}")])?;
    }
    w.into_inner().map_err(|e| RunError::Parse(e.to_string()))
}

/// Pre-trains and probes every grid point under every seed. With `out`,
/// writes `results.csv`, `summary.csv` and per-run metrics there.
pub fn run_grid(
    points: &[GridPoint],
    seeds: &[u64],
    cache: &mut ViewCache,
    executor: &dyn BatchExecutor,
    out: Option<&Path>,
    progress: &mut dyn FnMut(&ResultRow),
) -> RunResult<Vec<ResultRow>> {
    if seeds.is_empty() {
        return Err(RunError::Config("no seeds given".into()));
    }
    let mut rows = Vec::with_capacity(points.len() * seeds.len());
    for (pi, p) in points.iter().enumerate() {
        for &seed in seeds {
            let mut cfg = p.config.clone();
            cfg.train.seed = seed;
            let run_dir: Option<PathBuf> =
                out.map(|d| d.join("runs").join(format!("p{pi:03}-s{seed}")));
            let trained = run_pretrain(&cfg, cache, executor, None, &mut |_| {})?;
            if let Some(d) = &run_dir {
                write_file(&d.join(METRICS_FILE), &metrics_csv(&trained.metrics)?)?;
            }
            let probe = run_probe(&trained.model, &cfg, &p.id)?;
            let row = ResultRow {
                config_id: p.id.clone(),
                config: cfg,
                seed,
                accuracy: probe.accuracy,
            };
            progress(&row);
            rows.push(row);
        }
    }
    if let Some(d) = out {
        write_file(&d.join("results.csv"), &results_csv(&rows)?)?;
        write_file(&d.join("summary.csv"), &summary_csv(&rows)?)?;
    }
    Ok(rows)
}

/// Grid of the data-fraction sweep.
pub fn sweep_grid(cfg: &RunConfig) -> Vec<(String, Vec<String>)> {
    vec![(
        "data.fraction".to_string(),
        cfg.fractions.iter().map(|f| f.to_string()).collect(),
    )]
}

/// Reads a config file's grid section, or an empty grid without a file.
pub fn file_grid(file: Option<&ConfigFile>) -> Vec<(String, Vec<String>)> {
    file.map(|f| f.grid.clone()).unwrap_or_default()
}

/// Background, masked and visible levels of the token image.
pub const TOKEN_LEVELS: [f64; 3] = [0.0, 0.5, 1.0];

/// Writes depth and saliency maps of each view plus a top-down image of the
/// visible and masked token centers. Returns the written paths.
pub fn run_render(cfg: &RunConfig) -> RunResult<Vec<PathBuf>> {
    cfg.validate()?;
    let clouds = pretrain_clouds(cfg)?;
    let idx = cfg.render_sample;
    let cloud = clouds.get(idx).ok_or_else(|| {
        Error::Input(format!(
            "render.sample {idx} out of range for {} samples",
            clouds.len()
        ))
    })?;
    let image = (cfg.image, cfg.image);
    let ex = build_extractor(cfg)?;
    let mut written = Vec::new();
    for d in render_views(&cloud.points, cfg.views, image)? {
        let axis = d.axis.name();
        let path = cfg.out_dir.join(format!("depth_{axis}.ppm"));
        write_ppm(&path, &d.pixels, d.height, d.width)?;
        written.push(path);
        let f = ex.extract_features(&cloud.source_id, &d)?;
        let s = ex.extract_saliency(&cloud.source_id, &f)?;
        let path = cfg.out_dir.join(format!("saliency_{axis}.ppm"));
        write_ppm(&path, &s.values, s.height, s.width)?;
        written.push(path);
    }
    let sample = ViewCache::new()
        .prepare(cfg, std::slice::from_ref(cloud))?
        .remove(0);
    let part = sample_mask(
        &sample.saliency,
        cfg.train.mask_ratio,
        cfg.train.policy,
        mask_seed(cfg.train.seed, 0, idx),
    )?;
    let pick = |ix: &[usize]| {
        ix.iter()
            .map(|&i| sample.tokens.centers[i])
            .collect::<Vec<Point>>()
    };
    let mut pixels = vec![TOKEN_LEVELS[0]; image.0 * image.1];
    for (ix, level) in [
        (&part.masked_idx, TOKEN_LEVELS[1]),
        (&part.visible_idx, TOKEN_LEVELS[2]),
    ] {
        if ix.is_empty() {
            continue;
        }
        let d = render_depth(&pick(ix), Axis::Z, image)?;
        for (p, v) in pixels.iter_mut().zip(&d.pixels) {
            if *v > 0.0 {
                *p = level;
            }
        }
    }
    let path = cfg.out_dir.join("tokens.ppm");
    write_ppm(&path, &pixels, image.0, image.1)?;
    written.push(path);
    Ok(written)
}
