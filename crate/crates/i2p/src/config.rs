//! `key = value` run configuration with per-field command-line overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use i2p_core::guidance::{MaskPolicy, SaliencyAgg, TargetAgg};
use i2p_core::model::{ModelConfig, TargetAssignment};
use i2p_core::probe::{DescriptorMode, SvmConfig};
use i2p_core::train::{PrepConfig, TrainConfig};

use crate::error::{RunError, RunResult};

/// Every configurable field: key, default, help.
pub const FIELDS: &[(&str, &str, &str)] = &[
    (
        "data.source",
        "synthetic",
        "pre-training set: 'synthetic' or a manifest of path<TAB>label lines",
    ),
    (
        "data.shapes",
        "512",
        "synthetic pre-training shapes (classes cycle sphere, cube, plane, cylinder)",
    ),
    ("data.jitter", "0.01", "Gaussian jitter of synthetic points"),
    (
        "data.random_pose",
        "true",
        "randomly rotate synthetic shapes",
    ),
    (
        "data.seed",
        "0",
        "seed of synthetic data, point subsets and token sampling",
    ),
    (
        "data.fraction",
        "1.0",
        "fraction of the pre-training set used, in (0, 1]",
    ),
    (
        "probe.source",
        "synthetic",
        "probe set: 'synthetic' or a manifest",
    ),
    ("probe.shapes", "400", "synthetic probe shapes"),
    (
        "probe.seed",
        "1000",
        "seed of the synthetic probe set and its train/test split",
    ),
    (
        "probe.train_fraction",
        "0.5",
        "share of the probe set used to fit the classifier",
    ),
    (
        "probe.descriptor",
        "max+ave",
        "global descriptor: max, ave or max+ave",
    ),
    ("probe.lambda", "1e-3", "SVM regularization strength"),
    ("probe.epochs", "50", "SVM passes over the training split"),
    ("probe.eta0", "0.1", "SVM initial step size"),
    ("model.points", "2048", "points per cloud"),
    ("model.tokens", "512", "point tokens per cloud"),
    ("model.k", "16", "neighbors per token"),
    ("model.channels", "384", "transformer width"),
    ("model.heads", "6", "attention heads"),
    ("model.encoder", "5,5,5", "blocks per encoder stage"),
    ("model.decoder", "1,1", "blocks per decoder stage"),
    (
        "model.hierarchical",
        "true",
        "halve the token count at each encoder stage",
    ),
    (
        "model.mlp_ratio",
        "4",
        "hidden width of block MLPs relative to the channels",
    ),
    ("views.count", "3", "projected views (x, then y, then z)"),
    ("views.image", "224", "depth map resolution"),
    ("views.grid", "14", "2D feature grid resolution"),
    ("extractor.kind", "stub", "2D feature source: stub or file"),
    ("extractor.seed", "0", "seed of the stub extractor weights"),
    (
        "extractor.dir",
        "",
        "directory of <sample_id>.<axis>.feat/.sal files for kind=file",
    ),
    ("extractor.channels", "384", "2D feature channels"),
    (
        "guidance.sal_agg",
        "ave",
        "saliency aggregation across views: ave, max or min",
    ),
    (
        "guidance.tgt_agg",
        "concat",
        "2D target aggregation across views: concat or ave",
    ),
    ("mask.ratio", "0.8", "share of tokens masked"),
    (
        "mask.policy",
        "important",
        "which tokens stay visible: important, random or unimportant",
    ),
    (
        "train.assignment",
        "M3D+V2D",
        "reconstruction targets: M3D+V2D, M3D, V2D, M2D or M3D+M2D",
    ),
    ("train.epochs", "300", "pre-training epochs"),
    ("train.batch", "64", "samples per update"),
    ("train.warmup", "10", "linear warm-up epochs"),
    ("train.lr", "1e-3", "peak learning rate"),
    ("train.lr_min", "1e-5", "cosine floor"),
    (
        "train.weight_decay",
        "0.05",
        "decoupled weight decay (norms, biases and mask token exempt)",
    ),
    ("train.beta1", "0.9", "AdamW first-moment decay"),
    ("train.beta2", "0.999", "AdamW second-moment decay"),
    ("train.eps", "1e-8", "AdamW epsilon"),
    ("train.w3d", "1.0", "weight of the 3D term"),
    ("train.w2d", "1.0", "weight of the 2D term"),
    ("train.clip", "0", "global gradient norm clip; 0 disables"),
    (
        "train.seed",
        "0",
        "seed of initialization, masks, shuffling and the probe classifier",
    ),
    (
        "train.checkpoint_every",
        "0",
        "also checkpoint every n epochs; 0 keeps only the final one",
    ),
    ("output.dir", "runs/default", "output directory"),
    (
        "render.sample",
        "0",
        "index of the pre-training sample to render",
    ),
    ("seeds", "0", "seeds of ablation and sweep runs"),
    (
        "sweep.fractions",
        "0.2,0.4,0.6,0.8,1.0",
        "data fractions of sweep-data",
    ),
];

#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    Synthetic,
    Manifest(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: Source,
    pub shapes: usize,
    pub jitter: f64,
    pub random_pose: bool,
    pub seed: u64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub source: Source,
    pub shapes: usize,
    pub seed: u64,
    pub train_fraction: f64,
    pub descriptor: DescriptorMode,
    pub svm: SvmConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtractorKind {
    Stub,
    File,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorConfig {
    pub kind: ExtractorKind,
    pub seed: u64,
    pub dir: PathBuf,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub probe: ProbeConfig,
    pub model: ModelConfig,
    pub views: usize,
    pub image: usize,
    pub grid: usize,
    pub extractor: ExtractorConfig,
    pub sal_agg: SaliencyAgg,
    pub tgt_agg: TargetAgg,
    pub train: TrainConfig,
    pub checkpoint_every: usize,
    pub out_dir: PathBuf,
    pub render_sample: usize,
    pub seeds: Vec<u64>,
    pub fractions: Vec<f64>,
}

fn parse<T: FromStr>(key: &str, value: &str) -> RunResult<T> {
    value
        .trim()
        .parse()
        .map_err(|_| RunError::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> RunResult<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v)).collect()
}

fn parse_core<T: FromStr<Err = i2p_core::Error>>(key: &str, value: &str) -> RunResult<T> {
    value
        .trim()
        .parse()
        .map_err(|e: i2p_core::Error| RunError::Config(format!("{key}: {e}")))
}

fn parse_source(value: &str) -> Source {
    match value.trim() {
        "synthetic" => Source::Synthetic,
        path => Source::Manifest(PathBuf::from(path)),
    }
}

fn show_source(s: &Source) -> String {
    match s {
        Source::Synthetic => "synthetic".into(),
        Source::Manifest(p) => p.display().to_string(),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            data: DataConfig {
                source: Source::Synthetic,
                shapes: 0,
                jitter: 0.0,
                random_pose: false,
                seed: 0,
                fraction: 1.0,
            },
            probe: ProbeConfig {
                source: Source::Synthetic,
                shapes: 0,
                seed: 0,
                train_fraction: 0.5,
                descriptor: DescriptorMode::default(),
                svm: SvmConfig::default(),
            },
            model: ModelConfig::default(),
            views: 0,
            image: 0,
            grid: 0,
            extractor: ExtractorConfig {
                kind: ExtractorKind::Stub,
                seed: 0,
                dir: PathBuf::new(),
                channels: 0,
            },
            sal_agg: SaliencyAgg::default(),
            tgt_agg: TargetAgg::default(),
            train: TrainConfig::default(),
            checkpoint_every: 0,
            out_dir: PathBuf::new(),
            render_sample: 0,
            seeds: Vec::new(),
            fractions: Vec::new(),
        };
        for (key, value, _) in FIELDS {
            cfg.set(key, value).expect("field defaults parse");
        }
        cfg
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> RunResult<()> {
        let v = value.trim();
        match key {
            "data.source" => self.data.source = parse_source(v),
            "data.shapes" => self.data.shapes = parse(key, v)?,
            "data.jitter" => self.data.jitter = parse(key, v)?,
            "data.random_pose" => self.data.random_pose = parse(key, v)?,
            "data.seed" => self.data.seed = parse(key, v)?,
            "data.fraction" => self.data.fraction = parse(key, v)?,
            "probe.source" => self.probe.source = parse_source(v),
            "probe.shapes" => self.probe.shapes = parse(key, v)?,
            "probe.seed" => self.probe.seed = parse(key, v)?,
            "probe.train_fraction" => self.probe.train_fraction = parse(key, v)?,
            "probe.descriptor" => self.probe.descriptor = parse_core(key, v)?,
            "probe.lambda" => self.probe.svm.lambda = parse(key, v)?,
            "probe.epochs" => self.probe.svm.epochs = parse(key, v)?,
            "probe.eta0" => self.probe.svm.eta0 = parse(key, v)?,
            "model.points" => self.model.n_points = parse(key, v)?,
            "model.tokens" => self.model.tokens = parse(key, v)?,
            "model.k" => self.model.k = parse(key, v)?,
            "model.channels" => self.model.channels = parse(key, v)?,
            "model.heads" => self.model.heads = parse(key, v)?,
            "model.encoder" => self.model.encoder_stages = parse_list(key, v)?,
            "model.decoder" => self.model.decoder_stages = parse_list(key, v)?,
            "model.hierarchical" => self.model.hierarchical = parse(key, v)?,
            "model.mlp_ratio" => self.model.mlp_ratio = parse(key, v)?,
            "views.count" => self.views = parse(key, v)?,
            "views.image" => self.image = parse(key, v)?,
            "views.grid" => self.grid = parse(key, v)?,
            "extractor.kind" => {
                self.extractor.kind = match v {
                    "stub" => ExtractorKind::Stub,
                    "file" => ExtractorKind::File,
                    _ => {
                        return Err(RunError::Config(format!(
                            "{key}: expected stub or file, got '{v}'"
                        )))
                    }
                }
            }
            "extractor.seed" => self.extractor.seed = parse(key, v)?,
            "extractor.dir" => self.extractor.dir = PathBuf::from(v),
            "extractor.channels" => self.extractor.channels = parse(key, v)?,
            "guidance.sal_agg" => self.sal_agg = parse_core(key, v)?,
            "guidance.tgt_agg" => self.tgt_agg = parse_core(key, v)?,
            "mask.ratio" => self.train.mask_ratio = parse(key, v)?,
            "mask.policy" => self.train.policy = parse_core::<MaskPolicy>(key, v)?,
            "train.assignment" => self.train.assignment = parse_core::<TargetAssignment>(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.batch" => self.train.batch_size = parse(key, v)?,
            "train.warmup" => self.train.warmup_epochs = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.lr_min" => self.train.lr_min = parse(key, v)?,
            "train.weight_decay" => self.train.adamw.weight_decay = parse(key, v)?,
            "train.beta1" => self.train.adamw.beta1 = parse(key, v)?,
            "train.beta2" => self.train.adamw.beta2 = parse(key, v)?,
            "train.eps" => self.train.adamw.eps = parse(key, v)?,
            "train.w3d" => self.train.loss_weights.w3d = parse(key, v)?,
            "train.w2d" => self.train.loss_weights.w2d = parse(key, v)?,
            "train.clip" => {
                let c: f64 = parse(key, v)?;
                self.train.clip_norm = (c > 0.0).then_some(c);
            }
            "train.seed" => self.train.seed = parse(key, v)?,
            "train.checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "output.dir" => self.out_dir = PathBuf::from(v),
            "render.sample" => self.render_sample = parse(key, v)?,
            "seeds" => self.seeds = parse_list(key, v)?,
            "sweep.fractions" => self.fractions = parse_list(key, v)?,
            _ => return Err(RunError::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Current value of `key` in the same text form `set` accepts.
    pub fn get(&self, key: &str) -> RunResult<String> {
        let s = match key {
            "data.source" => show_source(&self.data.source),
            "data.shapes" => self.data.shapes.to_string(),
            "data.jitter" => self.data.jitter.to_string(),
            "data.random_pose" => self.data.random_pose.to_string(),
            "data.seed" => self.data.seed.to_string(),
            "data.fraction" => self.data.fraction.to_string(),
            "probe.source" => show_source(&self.probe.source),
            "probe.shapes" => self.probe.shapes.to_string(),
            "probe.seed" => self.probe.seed.to_string(),
            "probe.train_fraction" => self.probe.train_fraction.to_string(),
            "probe.descriptor" => self.probe.descriptor.to_string(),
            "probe.lambda" => self.probe.svm.lambda.to_string(),
            "probe.epochs" => self.probe.svm.epochs.to_string(),
            "probe.eta0" => self.probe.svm.eta0.to_string(),
            "model.points" => self.model.n_points.to_string(),
            "model.tokens" => self.model.tokens.to_string(),
            "model.k" => self.model.k.to_string(),
            "model.channels" => self.model.channels.to_string(),
            "model.heads" => self.model.heads.to_string(),
            "model.encoder" => join(&self.model.encoder_stages),
            "model.decoder" => join(&self.model.decoder_stages),
            "model.hierarchical" => self.model.hierarchical.to_string(),
            "model.mlp_ratio" => self.model.mlp_ratio.to_string(),
            "views.count" => self.views.to_string(),
            "views.image" => self.image.to_string(),
            "views.grid" => self.grid.to_string(),
            "extractor.kind" => match self.extractor.kind {
                ExtractorKind::Stub => "stub".into(),
                ExtractorKind::File => "file".into(),
            },
            "extractor.seed" => self.extractor.seed.to_string(),
            "extractor.dir" => self.extractor.dir.display().to_string(),
            "extractor.channels" => self.extractor.channels.to_string(),
            "guidance.sal_agg" => self.sal_agg.to_string(),
            "guidance.tgt_agg" => self.tgt_agg.to_string(),
            "mask.ratio" => self.train.mask_ratio.to_string(),
            "mask.policy" => self.train.policy.to_string(),
            "train.assignment" => self.train.assignment.to_string(),
            "train.epochs" => self.train.epochs.to_string(),
            "train.batch" => self.train.batch_size.to_string(),
            "train.warmup" => self.train.warmup_epochs.to_string(),
            "train.lr" => self.train.lr.to_string(),
            "train.lr_min" => self.train.lr_min.to_string(),
            "train.weight_decay" => self.train.adamw.weight_decay.to_string(),
            "train.beta1" => self.train.adamw.beta1.to_string(),
            "train.beta2" => self.train.adamw.beta2.to_string(),
            "train.eps" => self.train.adamw.eps.to_string(),
            "train.w3d" => self.train.loss_weights.w3d.to_string(),
            "train.w2d" => self.train.loss_weights.w2d.to_string(),
            "train.clip" => self.train.clip_norm.unwrap_or(0.0).to_string(),
            "train.seed" => self.train.seed.to_string(),
            "train.checkpoint_every" => self.checkpoint_every.to_string(),
            "output.dir" => self.out_dir.display().to_string(),
            "render.sample" => self.render_sample.to_string(),
            "seeds" => join(&self.seeds),
            "sweep.fractions" => join(&self.fractions),
            _ => return Err(RunError::Config(format!("unknown config key '{key}'"))),
        };
        Ok(s)
    }

    /// Every field as `key = value` lines, in table order.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (key, _, _) in FIELDS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed field"));
        }
        out
    }

    /// Width of the 2D semantic target.
    pub fn target_width(&self) -> usize {
        match self.tgt_agg {
            TargetAgg::Concat => self.views * self.extractor.channels,
            TargetAgg::Ave => self.extractor.channels,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            target_width: self.target_width(),
            ..self.model.clone()
        }
    }

    pub fn prep_config(&self) -> PrepConfig {
        PrepConfig {
            tokens: self.model.tokens,
            k: self.model.k,
            views: self.views,
            image: (self.image, self.image),
            sal_agg: self.sal_agg,
            tgt_agg: self.tgt_agg,
            token_seed: self.data.seed,
        }
    }

    /// Checks every field before any work starts.
    pub fn validate(&self) -> RunResult<()> {
        let bad = |m: String| Err(RunError::Config(m));
        self.model_config().validate()?;
        self.train.validate()?;
        if !(1..=3).contains(&self.views) {
            return bad(format!("views.count must be 1, 2 or 3, got {}", self.views));
        }
        if self.grid == 0 || self.image == 0 || !self.image.is_multiple_of(self.grid) {
            return bad(format!(
                "views.image {} must be a positive multiple of views.grid {}",
                self.image, self.grid
            ));
        }
        if self.extractor.channels == 0 {
            return bad("extractor.channels must be positive".into());
        }
        if self.extractor.kind == ExtractorKind::File && !self.extractor.dir.is_dir() {
            return bad(format!(
                "extractor.dir '{}' is not a directory",
                self.extractor.dir.display()
            ));
        }
        for (name, src, shapes) in [
            ("data", &self.data.source, self.data.shapes),
            ("probe", &self.probe.source, self.probe.shapes),
        ] {
            match src {
                Source::Synthetic if shapes == 0 => {
                    return bad(format!("{name}.shapes must be positive"))
                }
                Source::Manifest(p) if p.as_os_str().is_empty() => {
                    return bad(format!(
                        "{name}.source is empty: give a manifest path or 'synthetic'"
                    ))
                }
                Source::Manifest(p) if !p.is_file() => {
                    return bad(format!(
                        "{name}.source manifest '{}' does not exist",
                        p.display()
                    ))
                }
                _ => {}
            }
        }
        if !(self.data.fraction > 0.0 && self.data.fraction <= 1.0) {
            return bad(format!(
                "data.fraction {} outside (0, 1]",
                self.data.fraction
            ));
        }
        if !(self.probe.train_fraction > 0.0 && self.probe.train_fraction < 1.0) {
            return bad(format!(
                "probe.train_fraction {} outside (0, 1)",
                self.probe.train_fraction
            ));
        }
        if !(self.data.jitter >= 0.0 && self.data.jitter.is_finite()) {
            return bad("data.jitter must be finite and nonnegative".into());
        }
        if !(self.probe.svm.lambda > 0.0 && self.probe.svm.eta0 > 0.0) {
            return bad("probe.lambda and probe.eta0 must be positive".into());
        }
        if self.out_dir.as_os_str().is_empty() {
            return bad("output.dir is empty".into());
        }
        Ok(())
    }
}

/// A parsed config file: plain assignments and `grid.<key>` value lists, in
/// file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    pub entries: Vec<(String, String)>,
    pub grid: Vec<(String, Vec<String>)>,
}

impl ConfigFile {
    pub fn parse(text: &str, origin: &str) -> RunResult<Self> {
        let mut out = ConfigFile::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                RunError::Config(format!("{origin}:{}: expected key = value", n + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if let Some(field) = key.strip_prefix("grid.") {
                let values: Vec<String> = value
                    .split(',')
                    .map(|v| v.trim().to_string())
                    .filter(|v| !v.is_empty())
                    .collect();
                out.grid.push((field.to_string(), values));
            } else {
                out.entries.push((key.to_string(), value.to_string()));
            }
        }
        Ok(out)
    }

    pub fn read(path: &Path) -> RunResult<(Self, String)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RunError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Ok((Self::parse(&text, &path.display().to_string())?, text))
    }
}
