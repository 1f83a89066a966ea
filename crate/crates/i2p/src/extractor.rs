//! 2D feature sources selected by configuration.

use std::path::{Path, PathBuf};

use i2p_core::projection::{Axis, DepthMap, GridMap};
use i2p_core::vision::{extract_saliency, FeatureExtractor, StubExtractor};
use i2p_core::{Error, Result};

use crate::config::{ExtractorKind, RunConfig};
use crate::formats::load_tensor_file;
use crate::RunResult;

/// Loads externally computed maps named `<sample_id>.<axis>.feat`, with an
/// optional `<sample_id>.<axis>.sal` saliency map next to each.
#[derive(Debug, Clone, PartialEq)]
pub struct FileExtractor {
    dir: PathBuf,
    channels: usize,
}

impl FileExtractor {
    pub fn new(dir: impl Into<PathBuf>, channels: usize) -> Self {
        FileExtractor {
            dir: dir.into(),
            channels,
        }
    }

    pub fn path(&self, sample_id: &str, axis: Axis, ext: &str) -> PathBuf {
        self.dir.join(format!("{sample_id}.{}.{ext}", axis.name()))
    }

    fn load(&self, path: &Path, axis: Axis, image: (usize, usize)) -> Result<GridMap> {
        load_tensor_file(path, axis, image).map_err(|e| Error::Input(e.to_string()))
    }
}

impl FeatureExtractor for FileExtractor {
    fn channels(&self) -> usize {
        self.channels
    }

    fn extract_features(&self, sample_id: &str, map: &DepthMap) -> Result<GridMap> {
        let f = self.load(
            &self.path(sample_id, map.axis, "feat"),
            map.axis,
            (map.height, map.width),
        )?;
        if f.channels != self.channels {
            return Err(Error::Input(format!(
                "{}: {} channels, configured {}",
                self.path(sample_id, map.axis, "feat").display(),
                f.channels,
                self.channels
            )));
        }
        Ok(f)
    }

    /// Uses the `.sal` file when present, else max-pools the features.
    fn extract_saliency(&self, sample_id: &str, features: &GridMap) -> Result<GridMap> {
        let path = self.path(sample_id, features.axis, "sal");
        if !path.is_file() {
            return Ok(extract_saliency(features));
        }
        let s = self.load(
            &path,
            features.axis,
            (features.image_height, features.image_width),
        )?;
        if (s.height, s.width, s.channels) != (features.height, features.width, 1) {
            return Err(Error::Input(format!(
                "{}: saliency must be {}x{}x1, got {}x{}x{}",
                path.display(),
                features.height,
                features.width,
                s.height,
                s.width,
                s.channels
            )));
        }
        Ok(s)
    }
}

/// Builds the extractor a configuration names.
pub fn build_extractor(cfg: &RunConfig) -> RunResult<Box<dyn FeatureExtractor + Sync>> {
    Ok(match cfg.extractor.kind {
        ExtractorKind::Stub => Box::new(StubExtractor::new(
            cfg.extractor.channels,
            (cfg.grid, cfg.grid),
            (cfg.image, cfg.image),
            cfg.extractor.seed,
        )?),
        ExtractorKind::File => Box::new(FileExtractor::new(
            &cfg.extractor.dir,
            cfg.extractor.channels,
        )),
    })
}

/// Identifies an extractor's output for caching: equal keys give equal maps.
pub fn extractor_key(cfg: &RunConfig) -> String {
    match cfg.extractor.kind {
        ExtractorKind::Stub => format!(
            "stub:{}:{}:{}:{}",
            cfg.extractor.seed, cfg.extractor.channels, cfg.grid, cfg.image
        ),
        ExtractorKind::File => format!(
            "file:{}:{}:{}",
            cfg.extractor.dir.display(),
            cfg.extractor.channels,
            cfg.image
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::save_tensor_file;
    use i2p_core::projection::render_depth;

    #[test]
    fn file_round_trip_and_saliency_fallback() {
        let dir = tempfile::tempdir().unwrap();
        let values: Vec<f64> = (0..2 * 2 * 3).map(|v| v as f64 - 4.0).collect();
        let map = GridMap::with_image(Axis::Y, 2, 2, 3, values, (8, 8)).unwrap();
        save_tensor_file(&map, &dir.path().join("s1.y.feat")).unwrap();
        let ex = FileExtractor::new(dir.path(), 3);
        let depth = render_depth(&[[0.5, 0.5, 0.5]], Axis::Y, (8, 8)).unwrap();
        let f = ex.extract_features("s1", &depth).unwrap();
        assert_eq!(f, map);
        assert_eq!(ex.extract_saliency("s1", &f).unwrap(), extract_saliency(&f));

        let sal = GridMap::with_image(Axis::Y, 2, 2, 1, vec![1.0, 0.0, 0.0, 2.0], (8, 8)).unwrap();
        save_tensor_file(&sal, &dir.path().join("s1.y.sal")).unwrap();
        assert_eq!(ex.extract_saliency("s1", &f).unwrap(), sal);

        assert!(FileExtractor::new(dir.path(), 4)
            .extract_features("s1", &depth)
            .is_err());
        assert!(ex.extract_features("missing", &depth).is_err());
    }
}
