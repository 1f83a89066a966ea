//! Pre-training and probe sets, data-fraction subsets and the 2D view cache.

use std::collections::HashMap;
use std::sync::Arc;

use i2p_core::cloud::{generate_shape, PointCloud, ShapeClass, ShapeSpec};
use i2p_core::projection::Axis;
use i2p_core::rng::{derive, seeded};
use i2p_core::train::{extract_views, prepare_from_views, PreparedSample, ViewMaps};
use i2p_core::vision::FeatureExtractor;
use i2p_core::Error;
use rand::seq::index::sample;

use crate::config::{RunConfig, Source};
use crate::extractor::{build_extractor, extractor_key};
use crate::formats::{read_manifest, read_xyz};
use crate::RunResult;

/// Which set of the configuration to load.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Pretrain,
    Probe,
}

struct SetSpec<'a> {
    source: &'a Source,
    shapes: usize,
    seed: u64,
}

fn spec(cfg: &RunConfig, split: Split) -> SetSpec<'_> {
    match split {
        Split::Pretrain => SetSpec {
            source: &cfg.data.source,
            shapes: cfg.data.shapes,
            seed: cfg.data.seed,
        },
        Split::Probe => SetSpec {
            source: &cfg.probe.source,
            shapes: cfg.probe.shapes,
            seed: cfg.probe.seed,
        },
    }
}

/// Loads every cloud of a set, normalized and subsampled to `model.points`.
/// Synthetic sample `i` has class `i mod 4` and id `syn<seed>-<i>`; manifest
/// samples are identified by their file stem.
pub fn load_set(cfg: &RunConfig, split: Split) -> RunResult<Vec<PointCloud>> {
    let s = spec(cfg, split);
    let n = cfg.model.n_points;
    match s.source {
        Source::Synthetic => (0..s.shapes)
            .map(|i| {
                let mut c = generate_shape(&ShapeSpec {
                    class: ShapeClass::ALL[i % 4],
                    n_points: n,
                    seed: derive(s.seed, i as u64),
                    jitter: cfg.data.jitter,
                    random_pose: cfg.data.random_pose,
                })?;
                c.source_id = format!("syn{}-{i}", s.seed);
                Ok(c)
            })
            .collect(),
        Source::Manifest(path) => read_manifest(path)?
            .into_iter()
            .enumerate()
            .map(|(i, (file, label))| {
                let mut c = read_xyz(&file)?
                    .normalize()?
                    .subsample(n, derive(s.seed, i as u64));
                c.label = Some(label);
                c.source_id = file
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| format!("sample{i}"));
                Ok(c)
            })
            .collect(),
    }
}

/// Sorted indices of a seeded `floor(fraction * n)` subset; the full set
/// for fraction 1.
pub fn fraction_indices(n: usize, fraction: f64, seed: u64) -> RunResult<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(
            Error::Input(format!("data fraction must lie in (0, 1], got {fraction}")).into(),
        );
    }
    let keep = (fraction * n as f64).floor() as usize;
    if keep == 0 {
        return Err(Error::Input(format!("fraction {fraction} of {n} samples keeps none")).into());
    }
    if keep == n {
        return Ok((0..n).collect());
    }
    let mut idx = sample(&mut seeded(derive(seed, 0x5eed_f4ac)), n, keep).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// The pre-training clouds after applying `data.fraction`.
pub fn pretrain_clouds(cfg: &RunConfig) -> RunResult<Vec<PointCloud>> {
    let all = load_set(cfg, Split::Pretrain)?;
    let keep = fraction_indices(all.len(), cfg.data.fraction, cfg.data.seed)?;
    let mut all: Vec<Option<PointCloud>> = all.into_iter().map(Some).collect();
    Ok(keep
        .into_iter()
        .map(|i| all[i].take().expect("indices are distinct"))
        .collect())
}

/// Deterministic train/test split of the probe set.
pub fn probe_split(cfg: &RunConfig) -> RunResult<(Vec<PointCloud>, Vec<PointCloud>)> {
    let all = load_set(cfg, Split::Probe)?;
    let n_train = (cfg.probe.train_fraction * all.len() as f64).floor() as usize;
    let train_idx = fraction_indices(all.len(), cfg.probe.train_fraction, cfg.probe.seed)?;
    debug_assert_eq!(train_idx.len(), n_train);
    let mut is_train = vec![false; all.len()];
    train_idx.iter().for_each(|&i| is_train[i] = true);
    let (train, test): (Vec<_>, Vec<_>) = all.into_iter().zip(is_train).partition(|(_, t)| *t);
    let strip = |v: Vec<(PointCloud, bool)>| v.into_iter().map(|(c, _)| c).collect::<Vec<_>>();
    Ok((strip(train), strip(test)))
}

/// Frozen-extractor outputs for all three axes, keyed by extractor, data
/// settings and sample id. Grid runs that only change guidance or training
/// knobs reuse them.
#[derive(Default)]
pub struct ViewCache {
    maps: HashMap<(String, String), Arc<ViewMaps>>,
}

impl ViewCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    fn get(
        &mut self,
        key: &str,
        cloud: &PointCloud,
        image: usize,
        ex: &dyn FeatureExtractor,
    ) -> RunResult<Arc<ViewMaps>> {
        let k = (key.to_string(), cloud.source_id.clone());
        if let Some(m) = self.maps.get(&k) {
            return Ok(m.clone());
        }
        let maps = Arc::new(extract_views(cloud, Axis::ORDER.len(), (image, image), ex)?);
        self.maps.insert(k, maps.clone());
        Ok(maps)
    }

    /// Tokens, saliency and 2D targets of every cloud.
    pub fn prepare(
        &mut self,
        cfg: &RunConfig,
        clouds: &[PointCloud],
    ) -> RunResult<Vec<PreparedSample>> {
        let ex = build_extractor(cfg)?;
        let d = &cfg.data;
        let key = format!(
            "{}|{:?}|{}|{}|{}|{}",
            extractor_key(cfg),
            d.source,
            d.seed,
            d.jitter,
            d.random_pose,
            cfg.model.n_points
        );
        let prep = cfg.prep_config();
        clouds
            .iter()
            .map(|c| {
                let maps = self.get(&key, c, cfg.image, ex.as_ref())?;
                Ok(prepare_from_views(c, &maps, &prep)?)
            })
            .collect()
    }
}
