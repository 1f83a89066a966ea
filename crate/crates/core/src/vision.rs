//! Frozen 2D feature extraction from depth maps.
//!
//! [`StubExtractor`] is a fixed random convolution stack standing in for a
//! pretrained image backbone. Anything else implementing [`FeatureExtractor`]
//! (for instance features loaded from disk) plugs into the same pipeline.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{input_err, Error, Result};
use crate::linalg::gemm;
use crate::projection::{DepthMap, GridMap};
use crate::rng::seeded;

const BIAS_STD: f64 = 0.1;

pub trait FeatureExtractor {
    /// Feature channels per grid cell.
    fn channels(&self) -> usize;

    /// `H x W x C` features of one view of sample `sample_id`.
    fn extract_features(&self, sample_id: &str, map: &DepthMap) -> Result<GridMap>;

    /// `H x W x 1` saliency of the same view; by default the channel maximum.
    fn extract_saliency(&self, _sample_id: &str, features: &GridMap) -> Result<GridMap> {
        Ok(extract_saliency(features))
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ConvLayer {
    stride: (usize, usize),
    c_in: usize,
    c_out: usize,
    /// `c_out x (stride.0 * stride.1 * c_in)`, patch order (dy, dx, ci).
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl ConvLayer {
    fn forward(&self, input: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
        let (sr, sc) = self.stride;
        let (oh, ow) = (h / sr, w / sc);
        let k = sr * sc * self.c_in;
        let mut patches = Vec::with_capacity(oh * ow * k);
        for r in 0..oh {
            for c in 0..ow {
                for dy in 0..sr {
                    let at = ((r * sr + dy) * w + c * sc) * self.c_in;
                    patches.extend_from_slice(&input[at..at + sc * self.c_in]);
                }
            }
        }
        let mut out = vec![0.0; oh * ow * self.c_out];
        gemm(
            oh * ow,
            k,
            self.c_out,
            &patches,
            (k, 1),
            &self.weight,
            (1, k),
            0.0,
            &mut out,
        );
        for cell in out.chunks_mut(self.c_out) {
            for (v, b) in cell.iter_mut().zip(&self.bias) {
                *v = (*v + b).max(0.0);
            }
        }
        (out, oh, ow)
    }
}

/// Splits a total stride over three layers; the later layers take factors of 2.
fn split_stride(total: usize) -> [usize; 3] {
    let mut rest = total;
    let mut s = [1usize; 3];
    for slot in [2, 1] {
        if rest.is_multiple_of(2) && rest >= 4 {
            s[slot] = 2;
            rest /= 2;
        }
    }
    s[0] = rest;
    s
}

/// Three conv -> bias -> ReLU layers with non-overlapping kernels whose strides
/// multiply to the image/grid ratio. Weights are drawn once from a seeded
/// Gaussian scaled by fan-in and never updated.
#[derive(Debug, Clone, PartialEq)]
pub struct StubExtractor {
    channels: usize,
    grid: (usize, usize),
    image: (usize, usize),
    seed: u64,
    layers: Vec<ConvLayer>,
}

impl StubExtractor {
    pub fn new(
        channels: usize,
        grid: (usize, usize),
        image: (usize, usize),
        seed: u64,
    ) -> Result<Self> {
        if channels == 0 || grid.0 == 0 || grid.1 == 0 {
            return Err(input_err!("extractor channels and grid must be positive"));
        }
        if !image.0.is_multiple_of(grid.0) || !image.1.is_multiple_of(grid.1) {
            return Err(input_err!(
                "image {}x{} is not divisible by grid {}x{}",
                image.0,
                image.1,
                grid.0,
                grid.1
            ));
        }
        let rows = split_stride(image.0 / grid.0);
        let cols = split_stride(image.1 / grid.1);
        let widths = [1, (channels / 4).max(4), (channels / 2).max(4), channels];
        let mut rng = seeded(seed);
        let layers = (0..3)
            .map(|l| {
                let (c_in, c_out) = (widths[l], widths[l + 1]);
                let fan_in = rows[l] * cols[l] * c_in;
                let std = libm::sqrt(2.0 / fan_in as f64);
                let weight = (0..c_out * fan_in)
                    .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let bias = (0..c_out)
                    .map(|_| BIAS_STD * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                ConvLayer {
                    stride: (rows[l], cols[l]),
                    c_in,
                    c_out,
                    weight,
                    bias,
                }
            })
            .collect();
        Ok(StubExtractor {
            channels,
            grid,
            image,
            seed,
            layers,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn extract(&self, map: &DepthMap) -> Result<GridMap> {
        if (map.height, map.width) != self.image {
            return Err(Error::dim(
                "extract_features",
                &[map.height, map.width],
                &[self.image.0, self.image.1],
            ));
        }
        let (mut h, mut w) = (map.height, map.width);
        let mut x = map.pixels.clone();
        for layer in &self.layers {
            let (y, oh, ow) = layer.forward(&x, h, w);
            x = y;
            h = oh;
            w = ow;
        }
        GridMap::with_image(map.axis, h, w, self.channels, x, self.image)
    }
}

impl FeatureExtractor for StubExtractor {
    fn channels(&self) -> usize {
        self.channels
    }

    fn extract_features(&self, _sample_id: &str, map: &DepthMap) -> Result<GridMap> {
        self.extract(map)
    }
}

/// Per-cell maximum over channels.
pub fn extract_saliency(features: &GridMap) -> GridMap {
    let values = features
        .values
        .chunks(features.channels)
        .map(|cell| cell.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    GridMap {
        axis: features.axis,
        height: features.height,
        width: features.width,
        channels: 1,
        values,
        image_height: features.image_height,
        image_width: features.image_width,
    }
}
